//! The pipeline steps behind the command-line subcommands. Each is a plain
//! function of its config and inputs; outputs are deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{
    generate_phantom, load_label_volume, load_volume, read_manifest, save_label_volume, save_volume, write_manifest,
    PhantomSpec, Split, SubjectManifest,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_volume, select_best, summarize, DiceReport, DiceScores, VolumeDice};
use crate::inference::segment_volume;
use crate::model::{normalize_intensity, LabelMap, Modality, Volume};
use crate::net::NetworkState;
use crate::reports::{emit_boxplot, emit_overlay, BoxPlotData, OverlayLayout};
use crate::retrieval::{build_index, FeatureConfig, RetrievalContext, RetrievalIndex};
use crate::training::{run_repeated, ChannelMode, RunRecord, TrainConfig, TrainingSet};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Generates `count` phantoms with seeds `spec.seed..spec.seed + count`;
/// the last `test_count` are assigned to the test split.
pub fn cmd_phantom(spec: &PhantomSpec, count: usize, test_count: usize, out_dir: &Path) -> Result<Vec<SubjectManifest>> {
    if test_count > count {
        return Err(Error::Config(format!("test_count ({test_count}) exceeds count ({count})")));
    }
    let mut subjects = Vec::with_capacity(count);
    for i in 0..count {
        let volume = generate_phantom(&spec.with_seed(spec.seed + i as u64))?;
        let mut m = save_volume(&volume, out_dir)?;
        m.split = Some(if i + test_count >= count { Split::Test } else { Split::Train });
        subjects.push(m);
    }
    write_manifest(&out_dir.join("manifest.json"), &subjects)?;
    Ok(subjects)
}

/// Subjects of one split; entries without a split count as training data.
pub fn split_of(manifests: &[SubjectManifest], split: Split) -> Vec<SubjectManifest> {
    manifests
        .iter()
        .filter(|m| m.split.unwrap_or(Split::Train) == split)
        .cloned()
        .collect()
}

pub fn load_split(manifest: &Path, split: Split) -> Result<Vec<Volume>> {
    split_of(&read_manifest(manifest)?, split).iter().map(load_volume).collect()
}

/// Indexes the training subjects of `manifest`.
pub fn cmd_index(manifest: &Path, out: &Path, features: &FeatureConfig) -> Result<RetrievalIndex> {
    let train = load_split(manifest, Split::Train)?;
    let index = build_index(&train, features)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    index.save(out)?;
    Ok(index)
}

fn context_for(cfg: &PipelineConfig, mode: ChannelMode, train: &[Volume]) -> Result<Option<RetrievalContext>> {
    if mode != ChannelMode::FourRetrieved {
        return Ok(None);
    }
    let index = RetrievalIndex::load(&cfg.paths.index)?;
    Ok(Some(RetrievalContext::new(index, train.to_vec())?))
}

fn report_path(cfg: &PipelineConfig, mode: ChannelMode, suffix: &str) -> PathBuf {
    cfg.paths.reports.join(format!("{}_{suffix}", mode.name()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutputs {
    pub records: Vec<RunRecord>,
    pub report: DiceReport,
}

/// Trains `repetitions` networks in `mode` and writes checkpoints, run
/// records (`<mode>_runs.json`), and the summary (`<mode>_summary.json`,
/// `<mode>_runs.csv`).
pub fn cmd_train(cfg: &PipelineConfig, mode: ChannelMode) -> Result<TrainOutputs> {
    let manifest = cfg.paths.manifest();
    let train = load_split(&manifest, Split::Train)?;
    let test = load_split(&manifest, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Empty(format!("{} lists no test subjects", manifest.display())));
    }
    let config = TrainConfig {
        channel_mode: mode,
        ..cfg.train.clone()
    };
    let context = context_for(cfg, mode, &train)?;
    let set = TrainingSet::prepare(&train, mode, context.as_ref(), &config.gate(), config.min_foreground)?;
    let ckpt_dir = cfg.paths.checkpoints.join(mode.name());
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut records = run_repeated(&config, &set, &test, context.as_ref(), &cfg.stitch, Some(&ckpt_dir))?;
    for r in &mut records {
        r.checkpoint = r.checkpoint.as_deref().map(|p| cfg.display_path(p));
    }
    let report = summarize(&records)?;
    write_json(&report_path(cfg, mode, "runs.json"), &records)?;
    write_text(&report_path(cfg, mode, "summary.json"), &report.to_json())?;
    write_text(&report_path(cfg, mode, "runs.csv"), &report.to_csv())?;
    Ok(TrainOutputs { records, report })
}

pub fn prediction_path(dir: &Path, subject_id: &str) -> PathBuf {
    dir.join(format!("{subject_id}_pred.raw"))
}

/// Segments the test subjects with checkpoint `run` of `mode`; writes
/// `<id>_pred.raw` and, in four_retrieved mode, the `<id>_gate.json` log.
pub fn cmd_segment(cfg: &PipelineConfig, mode: ChannelMode, run: usize) -> Result<Vec<PathBuf>> {
    let manifest = cfg.paths.manifest();
    let state = NetworkState::load(&cfg.paths.checkpoint(mode, run))?;
    if state.config().in_channels != mode.in_channels() {
        return Err(Error::Config(format!(
            "checkpoint has {} input channels but {mode} needs {}",
            state.config().in_channels,
            mode.in_channels()
        )));
    }
    let train = if mode == ChannelMode::FourRetrieved {
        load_split(&manifest, Split::Train)?
    } else {
        Vec::new()
    };
    let context = context_for(cfg, mode, &train)?;
    let out_dir = cfg.paths.prediction_dir(mode);
    let gate = TrainConfig {
        channel_mode: mode,
        ..cfg.train.clone()
    }
    .gate();
    let mut written = Vec::new();
    for m in split_of(&read_manifest(&manifest)?, Split::Test) {
        let volume = load_volume(&m)?;
        let seg = segment_volume(&state, &volume, mode, context.as_ref(), &cfg.stitch, &gate)?;
        let path = prediction_path(&out_dir, volume.subject_id());
        save_label_volume(&path, &seg.labels, volume.spacing(), volume.subject_id())?;
        if mode == ChannelMode::FourRetrieved {
            write_json(&out_dir.join(format!("{}_gate.json", volume.subject_id())), &seg.gate_log())?;
        }
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDice {
    pub subject_id: String,
    pub dice: VolumeDice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub subjects: Vec<SubjectDice>,
    pub mean: DiceScores,
}

/// Scores every test subject of `manifest` against `<pred_dir>/<id>_pred.raw`
/// and writes `<out>.json` and `<out>.csv`.
pub fn cmd_evaluate(pred_dir: &Path, manifest: &Path, out: &Path) -> Result<EvaluationReport> {
    let mut subjects = Vec::new();
    for m in split_of(&read_manifest(manifest)?, Split::Test) {
        let path = prediction_path(pred_dir, &m.subject_id);
        if !path.exists() {
            return Err(Error::MissingPrediction(m.subject_id.clone()));
        }
        let volume = load_volume(&m)?;
        let truth = volume.labels().ok_or_else(|| Error::MissingLabels(m.subject_id.clone()))?;
        let (_, pred) = load_label_volume(&path)?;
        subjects.push(SubjectDice {
            subject_id: m.subject_id.clone(),
            dice: evaluate_volume(&pred, truth)?,
        });
    }
    if subjects.is_empty() {
        return Err(Error::Empty(format!("{} lists no test subjects", manifest.display())));
    }
    let scores: Vec<DiceScores> = subjects.iter().map(|s| s.dice.scores).collect();
    let report = EvaluationReport {
        mean: DiceScores::average(&scores)?,
        subjects,
    };
    let mut csv = String::from("subject,csf,gm,wm,mean\n");
    for s in &report.subjects {
        let [a, b, c] = s.dice.scores.values();
        csv += &format!("{},{a:.6},{b:.6},{c:.6},{:.6}\n", s.subject_id, s.dice.scores.mean());
    }
    let [a, b, c] = report.mean.values();
    csv += &format!("mean,{a:.6},{b:.6},{c:.6},{:.6}\n", report.mean.mean());
    write_json(&out.with_extension("json"), &report)?;
    write_text(&out.with_extension("csv"), &csv)?;
    Ok(report)
}

/// Box-plot data of the runs in a `<mode>_runs.json` file, optionally
/// restricted to the `best` top runs.
pub fn cmd_boxplot(records: &Path, best: Option<usize>, out: &Path) -> Result<BoxPlotData> {
    let mut runs: Vec<RunRecord> = read_json(records)?;
    if let Some(k) = best {
        runs = select_best(&runs, k)?;
    }
    let scores = runs
        .iter()
        .map(|r| r.dice.ok_or_else(|| Error::Empty(format!("run {} has no test scores", r.run_index))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    emit_boxplot(&scores, out)
}

/// Overlay panel for one slice of a test subject: T1 input, truth and the
/// two predictions.
pub fn cmd_overlay(
    manifest: &Path,
    subject_id: &str,
    slice: usize,
    pred_three: &Path,
    pred_four: &Path,
    out: &Path,
) -> Result<OverlayLayout> {
    let m = read_manifest(manifest)?
        .into_iter()
        .find(|m| m.subject_id == subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    let volume = load_volume(&m)?;
    if slice >= volume.num_slices() {
        return Err(Error::InvalidDimension {
            dim: "slice".into(),
            reason: format!("slice {slice} of a {}-slice volume", volume.num_slices()),
        });
    }
    let truth = volume.label_slice(slice).ok_or_else(|| Error::MissingLabels(subject_id.to_string()))?;
    let pred = |path: &Path| -> Result<LabelMap> {
        let (_, labels) = load_label_volume(path)?;
        if labels.dim() != volume.shape() {
            let (z, r, c) = volume.shape();
            return Err(Error::shape(format!("prediction {}", path.display()), &[z, r, c], labels.shape()));
        }
        LabelMap::new(labels.index_axis(ndarray::Axis(0), slice).to_owned())
    };
    let input = normalize_intensity(volume.slice(Modality::T1, slice));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    emit_overlay(input.view(), &truth, &pred(pred_three)?, &pred(pred_four)?, out)
}
