//! Runs the whole pipeline in a scratch directory: phantoms, index,
//! training in all three channel modes, segmentation, evaluation and
//! reports. Uses a shortened schedule so it finishes in a few minutes.
//!
//! cargo run --release --example pipeline -- [work_dir]

use std::path::PathBuf;

use priorseg::commands::{cmd_boxplot, cmd_evaluate, cmd_index, cmd_overlay, cmd_phantom, cmd_segment, cmd_train, prediction_path};
use priorseg::config::PipelineConfig;
use priorseg::training::{ChannelMode, TrainConfig};

fn main() -> priorseg::Result<()> {
    let work: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priorseg_pipeline"));
    let mut cfg = PipelineConfig::with_base(&work);
    cfg.phantom.count = 5;
    cfg.phantom.test_count = 1;
    cfg.train = TrainConfig {
        epochs: 3,
        ..TrainConfig::tiny()
    };

    let subjects = cmd_phantom(&cfg.phantom.spec, cfg.phantom.count, cfg.phantom.test_count, &cfg.paths.data_dir)?;
    let index = cmd_index(&cfg.paths.manifest(), &cfg.paths.index, &cfg.features)?;
    println!("{} subjects, {} indexed slices", subjects.len(), index.len());

    for mode in ChannelMode::ALL {
        let out = cmd_train(&cfg, mode)?;
        let [c, g, w] = out.report.formatted();
        println!("{mode:<15} CSF {c}  GM {g}  WM {w}");
        cmd_segment(&cfg, mode, 0)?;
        let eval = cmd_evaluate(
            &cfg.paths.prediction_dir(mode),
            &cfg.paths.manifest(),
            &cfg.paths.reports.join(format!("{mode}_eval")),
        )?;
        println!("{:<15} segmented test mean {:?}", "", eval.mean.values());
        cmd_boxplot(
            &cfg.paths.reports.join(format!("{mode}_runs.json")),
            None,
            &cfg.paths.reports.join(format!("{mode}_boxplot.json")),
        )?;
    }

    let test_id = &subjects.last().expect("one test subject").subject_id;
    let slice = cfg.phantom.spec.shape[0] / 2;
    cmd_overlay(
        &cfg.paths.manifest(),
        test_id,
        slice,
        &prediction_path(&cfg.paths.prediction_dir(ChannelMode::Three), test_id),
        &prediction_path(&cfg.paths.prediction_dir(ChannelMode::FourRetrieved), test_id),
        &cfg.paths.reports.join("overlay.png"),
    )?;
    println!("outputs under {}", work.display());
    Ok(())
}
