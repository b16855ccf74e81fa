//! Trains the three channel modes on phantoms and compares test Dice.
//!
//! cargo run --release --example compare_modes -- [repetitions] [epochs]

use std::time::Instant;

use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::evaluation::summarize;
use priorseg::inference::StitchConfig;
use priorseg::retrieval::{FeatureConfig, RetrievalContext};
use priorseg::training::{run_repeated, ChannelMode, TrainConfig, TrainingSet};

fn main() -> priorseg::Result<()> {
    let arg = |i: usize| std::env::args().nth(i).and_then(|a| a.parse::<usize>().ok());
    let base = TrainConfig {
        repetitions: arg(1).unwrap_or(1),
        epochs: arg(2).unwrap_or(TrainConfig::tiny().epochs),
        ..TrainConfig::tiny()
    };
    let spec = PhantomSpec::default();
    let train: Vec<_> = (0..5).map(|s| generate_phantom(&spec.with_seed(s))).collect::<Result<_, _>>()?;
    let test: Vec<_> = (100..102).map(|s| generate_phantom(&spec.with_seed(s))).collect::<Result<_, _>>()?;
    let context = RetrievalContext::build(train.clone(), &FeatureConfig::default())?;

    for mode in [ChannelMode::FourOwnGt, ChannelMode::FourRetrieved, ChannelMode::Three] {
        let config = TrainConfig { channel_mode: mode, ..base.clone() };
        let t = Instant::now();
        let set = TrainingSet::prepare(&train, mode, Some(&context), &config.gate(), config.min_foreground)?;
        let accepted = set.slices().iter().filter(|s| s.decision.as_ref().is_some_and(|d| d.use_prior)).count();
        println!("{mode}: {} slices, {accepted} with a prior", set.slices().len());
        let records = run_repeated(&config, &set, &test, Some(&context), &StitchConfig::default(), None)?;
        for r in &records {
            println!("  run {} final loss {:.1}", r.run_index, r.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        let [c, g, w] = summarize(&records)?.formatted();
        println!("  CSF {c}  GM {g}  WM {w}  ({:.1?})", t.elapsed());
    }
    Ok(())
}
