//! Trains a three-channel network, segments an unseen phantom with the
//! sliding window and scores it per tissue.
//!
//! cargo run --release --example segment_and_evaluate

use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::evaluation::evaluate_volume;
use priorseg::inference::{segment_volume, GateConfig, StitchConfig};
use priorseg::model::Tissue;
use priorseg::training::{train, ChannelMode, TrainConfig, TrainingSet};

fn main() -> priorseg::Result<()> {
    let config = TrainConfig {
        channel_mode: ChannelMode::Three,
        ..TrainConfig::tiny()
    };
    let spec = PhantomSpec::default();
    let volumes: Vec<_> = (0..5).map(|s| generate_phantom(&spec.with_seed(s))).collect::<Result<_, _>>()?;
    let set = TrainingSet::prepare(&volumes, config.channel_mode, None, &GateConfig::default(), config.min_foreground)?;
    let run = train(&config, &set, 0, None)?;

    let test = generate_phantom(&spec.with_seed(100))?;
    let seg = segment_volume(&run.state, &test, config.channel_mode, None, &StitchConfig::default(), &config.gate())?;
    let report = evaluate_volume(&seg.labels, test.labels().expect("labeled"))?;
    for t in Tissue::ALL.into_iter().skip(1) {
        let d = report.per_class[t.index()];
        println!("{:<12} {:.4}{}", t.name(), d.value, if d.both_empty { " (absent)" } else { "" });
    }
    let [c, g, w] = report.scores.values();
    println!("CSF/GM/WM {c:.4} {g:.4} {w:.4}, mean {:.4}", report.scores.mean());
    Ok(())
}
