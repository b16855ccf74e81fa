//! Dice scores, per-run summaries and best-run selection.

use std::fmt::Write as _;

use ndarray::{ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Tissue, NUM_CLASSES};
use crate::training::RunRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl ConfusionCounts {
    pub fn dice(&self) -> Dice {
        let denom = 2 * self.true_positive + self.false_positive + self.false_negative;
        if denom == 0 {
            return Dice {
                value: 1.0,
                both_empty: true,
            };
        }
        Dice {
            value: (2 * self.true_positive) as f64 / denom as f64,
            both_empty: false,
        }
    }
}

/// A Dice coefficient; `both_empty` marks the 0/0 case reported as 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dice {
    pub value: f64,
    pub both_empty: bool,
}

fn check_shapes<S, T, D>(pred: &ArrayBase<S, D>, truth: &ArrayBase<T, D>) -> Result<()>
where
    S: Data<Elem = u8>,
    T: Data<Elem = u8>,
    D: Dimension,
{
    if pred.shape() != truth.shape() {
        return Err(Error::shape("prediction vs truth", pred.shape(), truth.shape()));
    }
    Ok(())
}

pub fn confusion<S, T, D>(pred: &ArrayBase<S, D>, truth: &ArrayBase<T, D>, class_id: u8) -> Result<ConfusionCounts>
where
    S: Data<Elem = u8>,
    T: Data<Elem = u8>,
    D: Dimension,
{
    check_shapes(pred, truth)?;
    if class_id as usize >= NUM_CLASSES {
        return Err(Error::Config(format!("class id {class_id} is not a tissue class")));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p == class_id, t == class_id) {
            (true, true) => counts.true_positive += 1,
            (true, false) => counts.false_positive += 1,
            (false, true) => counts.false_negative += 1,
            (false, false) => {}
        }
    }
    Ok(counts)
}

/// `2TP / (2TP + FP + FN)` for one class.
pub fn dice<S, T, D>(pred: &ArrayBase<S, D>, truth: &ArrayBase<T, D>, class_id: u8) -> Result<Dice>
where
    S: Data<Elem = u8>,
    T: Data<Elem = u8>,
    D: Dimension,
{
    Ok(confusion(pred, truth, class_id)?.dice())
}

/// Dice of the three evaluated tissues.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

impl DiceScores {
    pub fn new(values: [f64; 3]) -> Self {
        DiceScores {
            csf: values[0],
            gm: values[1],
            wm: values[2],
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.csf, self.gm, self.wm]
    }

    pub fn mean(&self) -> f64 {
        (self.csf + self.gm + self.wm) / 3.0
    }

    /// Class-wise mean of several score sets.
    pub fn average(scores: &[DiceScores]) -> Result<DiceScores> {
        if scores.is_empty() {
            return Err(Error::Empty("no scores to average".into()));
        }
        let n = scores.len() as f64;
        let mut acc = [0.0; 3];
        for s in scores {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        Ok(DiceScores::new(acc.map(|a| a / n)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDice {
    pub scores: DiceScores,
    /// Every class, background included, indexed by label value.
    pub per_class: Vec<Dice>,
}

impl VolumeDice {
    pub fn both_empty(&self, tissue: Tissue) -> bool {
        self.per_class[tissue.index()].both_empty
    }
}

/// Dice of every class over the whole volume (all slices pooled).
pub fn evaluate_volume<S, T, D>(pred: &ArrayBase<S, D>, truth: &ArrayBase<T, D>) -> Result<VolumeDice>
where
    S: Data<Elem = u8>,
    T: Data<Elem = u8>,
    D: Dimension,
{
    check_shapes(pred, truth)?;
    let mut counts = [ConfusionCounts::default(); NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if p as usize >= NUM_CLASSES || t as usize >= NUM_CLASSES {
            return Err(Error::Config(format!("label {} is not a tissue class", p.max(t))));
        }
        if p == t {
            counts[p as usize].true_positive += 1;
        } else {
            counts[p as usize].false_positive += 1;
            counts[t as usize].false_negative += 1;
        }
    }
    let per_class: Vec<Dice> = counts.iter().map(|c| c.dice()).collect();
    let scores = DiceScores::new(Tissue::EVALUATED.map(|t| per_class[t.index()].value));
    Ok(VolumeDice { scores, per_class })
}

fn scored(records: &[RunRecord]) -> Result<Vec<(&RunRecord, DiceScores)>> {
    if records.is_empty() {
        return Err(Error::Empty("no run records".into()));
    }
    records
        .iter()
        .map(|r| {
            r.dice
                .map(|d| (r, d))
                .ok_or_else(|| Error::Empty(format!("run {} has no test scores", r.run_index)))
        })
        .collect()
}

/// The `k` best runs by mean CSF/GM/WM Dice, best first; ties keep the lower
/// run index first.
pub fn select_best(records: &[RunRecord], k: usize) -> Result<Vec<RunRecord>> {
    let mut ranked = scored(records)?;
    if k == 0 || k > ranked.len() {
        return Err(Error::Config(format!("cannot select {k} of {} runs", ranked.len())));
    }
    ranked.sort_by(|a, b| {
        b.1.mean()
            .total_cmp(&a.1.mean())
            .then(a.0.run_index.cmp(&b.0.run_index))
    });
    Ok(ranked.into_iter().take(k).map(|(r, _)| r.clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub run_index: usize,
    pub seed: u64,
    pub scores: DiceScores,
}

/// Per-run scores with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub runs: Vec<RunScores>,
    pub mean: DiceScores,
    pub std: DiceScores,
}

pub fn summarize(records: &[RunRecord]) -> Result<DiceReport> {
    let ranked = scored(records)?;
    let runs: Vec<RunScores> = ranked
        .iter()
        .map(|(r, s)| RunScores {
            run_index: r.run_index,
            seed: r.seed,
            scores: *s,
        })
        .collect();
    let all: Vec<DiceScores> = runs.iter().map(|r| r.scores).collect();
    let mean = DiceScores::average(&all)?;
    let n = all.len() as f64;
    let mut var = [0.0; 3];
    for s in &all {
        for ((v, x), m) in var.iter_mut().zip(s.values()).zip(mean.values()) {
            *v += (x - m) * (x - m);
        }
    }
    let std = DiceScores::new(var.map(|v| (v / n).sqrt()));
    Ok(DiceReport { runs, mean, std })
}

impl DiceReport {
    /// `mean±std` per class, four decimals.
    pub fn formatted(&self) -> [String; 3] {
        let m = self.mean.values();
        let s = self.std.values();
        [0, 1, 2].map(|i| format!("{:.4}±{:.4}", m[i], s[i]))
    }

    /// One row per run plus mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,seed,csf,gm,wm,mean\n");
        for r in &self.runs {
            let [a, b, c] = r.scores.values();
            let _ = writeln!(out, "{},{},{a:.6},{b:.6},{c:.6},{:.6}", r.run_index, r.seed, r.scores.mean());
        }
        let [a, b, c] = self.mean.values();
        let _ = writeln!(out, "mean,,{a:.6},{b:.6},{c:.6},{:.6}", self.mean.mean());
        let [a, b, c] = self.std.values();
        let _ = writeln!(out, "std,,{a:.6},{b:.6},{c:.6},");
        out
    }

    pub fn to_json(&self) -> String {
        let f = self.formatted();
        let value = serde_json::json!({
            "runs": self.runs,
            "mean": self.mean,
            "std": self.std,
            "formatted": {"csf": f[0], "gm": f[1], "wm": f[2]},
        });
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }
}
