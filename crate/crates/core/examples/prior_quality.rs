//! Scores the registered retrieval prior on its own against the truth.
//!
//! Shows how much of the segmentation the fourth channel already carries
//! before any network sees it.

use ndarray::{Array3, Axis};
use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::evaluation::evaluate_volume;
use priorseg::inference::{assemble_channels, GateConfig};
use priorseg::retrieval::{FeatureConfig, RetrievalContext};
use priorseg::training::ChannelMode;

fn main() -> priorseg::Result<()> {
    let spec = PhantomSpec::default();
    let train: Vec<_> = (0..5).map(|s| generate_phantom(&spec.with_seed(s))).collect::<Result<_, _>>()?;
    let context = RetrievalContext::build(train, &FeatureConfig::default())?;
    for seed in 100..102 {
        let v = generate_phantom(&spec.with_seed(seed))?;
        let (z, r, c) = v.shape();
        let mut prior = Array3::<u8>::zeros((z, r, c));
        let mut used = 0;
        for i in 0..z {
            let (stack, d) = assemble_channels(&v, i, ChannelMode::FourRetrieved, Some(&context), &GateConfig::default())?;
            let d = d.expect("retrieved mode records a decision");
            used += d.use_prior as usize;
            println!(
                "  slice {i}: {} sim {:.3} rot {:.1} t {:?}",
                d.matched_source,
                d.similarity,
                d.transform.rotation_degrees(),
                d.transform.translation
            );
            prior
                .index_axis_mut(Axis(0), i)
                .assign(&stack.channels().index_axis(Axis(2), 3).mapv(|p| (p * 5.0).round() as u8));
        }
        let report = evaluate_volume(&prior, v.labels().unwrap())?;
        let dice: Vec<String> = report.per_class.iter().map(|d| format!("{:.3}", d.value)).collect();
        println!("{}: {used}/{z} slices accepted, prior dice {}", v.subject_id(), dice.join(" "));
    }
    Ok(())
}
