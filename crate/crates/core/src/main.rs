use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use priorseg::commands;
use priorseg::config::PipelineConfig;
use priorseg::training::ChannelMode;
use priorseg::{Error, Result};

#[derive(Parser)]
#[command(name = "priorseg", version, about = "Retrieval-prior brain tissue segmentation")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted, with paths
    /// relative to the working directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    gate_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic subjects and their manifest.
    Phantom {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the configured data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the retrieval index over the training subjects.
    Index {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score repeated runs of one channel mode.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: ChannelMode,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Segment the test subjects with a trained checkpoint.
    Segment {
        #[arg(long, value_parser = parse_mode)]
        mode: ChannelMode,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        gate_threshold: Option<f64>,
    },
    /// Score predictions against the test labels.
    Evaluate {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ChannelMode>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output path without extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Box-plot data from a run-record file.
    Boxplot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        best: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-panel overlay of one test slice.
    Overlay {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        three: PathBuf,
        #[arg(long)]
        four: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<ChannelMode, String> {
    ChannelMode::from_name(s).ok_or_else(|| format!("unknown mode {s:?} (three, four_own_gt, four_retrieved)"))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::with_base(Path::new("."))),
    }
}

fn apply(cfg: &mut PipelineConfig, o: &TrainOverrides) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.patches_per_epoch {
        t.patches_per_epoch = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.seed {
        t.base_seed = v;
    }
    if let Some(v) = o.repetitions {
        t.repetitions = v;
    }
    if let Some(v) = o.gate_threshold {
        t.gate_threshold = v;
    }
    cfg.validate()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom { count, test_count, seed, out } => {
            let p = &mut cfg.phantom;
            p.count = count.unwrap_or(p.count);
            p.test_count = test_count.unwrap_or(p.test_count);
            p.spec.seed = seed.unwrap_or(p.spec.seed);
            cfg.validate()?;
            if cfg.phantom.count == 0 {
                eprintln!("warning: count is 0, writing an empty manifest");
            }
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let subjects = commands::cmd_phantom(&cfg.phantom.spec, cfg.phantom.count, cfg.phantom.test_count, &out)?;
            println!("wrote {} subjects to {}", subjects.len(), out.display());
        }
        Command::Index { manifest, out } => {
            let manifest = manifest.unwrap_or_else(|| cfg.paths.manifest());
            let out = out.unwrap_or_else(|| cfg.paths.index.clone());
            let index = commands::cmd_index(&manifest, &out, &cfg.features)?;
            println!("indexed {} slices into {}", index.len(), out.display());
        }
        Command::Train { mode, overrides } => {
            apply(&mut cfg, &overrides)?;
            let out = commands::cmd_train(&cfg, mode)?;
            let [c, g, w] = out.report.formatted();
            println!("{mode}: {} runs  CSF {c}  GM {g}  WM {w}", out.records.len());
        }
        Command::Segment { mode, run, gate_threshold } => {
            if let Some(t) = gate_threshold {
                cfg.train.gate_threshold = t;
                cfg.validate()?;
            }
            let written = commands::cmd_segment(&cfg, mode, run)?;
            println!("wrote {} predictions", written.len());
        }
        Command::Evaluate { mode, predictions, manifest, out } => {
            let name = mode.map(|m| m.name()).unwrap_or("predictions");
            let predictions = match (predictions, mode) {
                (Some(p), _) => p,
                (None, Some(m)) => cfg.paths.prediction_dir(m),
                (None, None) => return Err(Error::Config("evaluate needs --mode or --predictions".into())),
            };
            let manifest = manifest.unwrap_or_else(|| cfg.paths.manifest());
            let out = out.unwrap_or_else(|| cfg.paths.reports.join(format!("{name}_eval")));
            let report = commands::cmd_evaluate(&predictions, &manifest, &out)?;
            let [c, g, w] = report.mean.values();
            println!("{} subjects  CSF {c:.4}  GM {g:.4}  WM {w:.4}", report.subjects.len());
        }
        Command::Boxplot { records, best, out } => {
            let data = commands::cmd_boxplot(&records, best, &out)?;
            for s in &data.series {
                let f = &s.summary;
                println!("{}: {:.4} {:.4} {:.4} {:.4} {:.4}", s.class, f.min, f.q1, f.median, f.q3, f.max);
            }
        }
        Command::Overlay { subject, slice, three, four, out, manifest } => {
            let manifest = manifest.unwrap_or_else(|| cfg.paths.manifest());
            let lay = commands::cmd_overlay(&manifest, &subject, slice, &three, &four, &out)?;
            println!("wrote {}x{} panel to {}", lay.width, lay.height, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"status": "error", "kind": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
