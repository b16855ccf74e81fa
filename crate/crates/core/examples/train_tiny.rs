//! Trains one small network on four-channel patches whose prior is the
//! subject's own truth, then reloads the checkpoint.
//!
//! cargo run --release --example train_tiny -- [epochs]

use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::inference::GateConfig;
use priorseg::net::NetworkState;
use priorseg::training::{train, ChannelMode, TrainConfig, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = TrainConfig {
        channel_mode: ChannelMode::FourOwnGt,
        ..TrainConfig::tiny()
    };
    if let Some(e) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        config.epochs = e;
    }
    let spec = PhantomSpec::default();
    let volumes: Vec<_> = (0..3).map(|s| generate_phantom(&spec.with_seed(s))).collect::<priorseg::Result<_>>()?;
    let set = TrainingSet::prepare(&volumes, config.channel_mode, None, &GateConfig::default(), config.min_foreground)?;
    println!(
        "{} slices, {} eligible 64x64 windows, {} steps per epoch",
        set.slices().len(),
        set.num_positions(),
        config.steps_per_epoch()
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run_0.ckpt");
    let run = train(&config, &set, 0, Some(&path))?;
    for (epoch, loss) in run.record.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.3}");
    }
    let back = NetworkState::load(&path)?;
    assert_eq!(back.params(), run.state.params());
    println!("seed {}, {} parameters, checkpoint reloaded", run.record.seed, run.state.param_count());
    Ok(())
}
