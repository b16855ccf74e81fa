//! Patch sampling, the Adam training loop and repeated runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_volume, DiceScores};
use crate::inference::{assemble_channels, segment_volume, GateConfig, StitchConfig};
use crate::model::{extract_patch, onehot_encode, ChannelStack, LabelMap, Patch, Volume, NUM_CLASSES, PATCH_SIZE};
use crate::net::{backward, build_network, BatchTensor, NetworkConfig, NetworkState};
use crate::registration::{GateDecision, RegistrationConfig, DEFAULT_GATE_THRESHOLD};
use crate::retrieval::{RetrievalContext, SliceKey};

/// Which input the network receives in its optional fourth channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Modalities only.
    Three,
    /// Modalities plus the slice's own labels.
    FourOwnGt,
    /// Modalities plus the gated, registered labels of the best database match.
    FourRetrieved,
}

impl ChannelMode {
    pub const ALL: [ChannelMode; 3] = [ChannelMode::Three, ChannelMode::FourOwnGt, ChannelMode::FourRetrieved];

    pub fn in_channels(self) -> usize {
        match self {
            ChannelMode::Three => 3,
            _ => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Three => "three",
            ChannelMode::FourOwnGt => "four_own_gt",
            ChannelMode::FourRetrieved => "four_retrieved",
        }
    }

    pub fn from_name(name: &str) -> Option<ChannelMode> {
        ChannelMode::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_seed: u64,
    pub channel_mode: ChannelMode,
    pub gate_threshold: f64,
    pub registration: RegistrationConfig,
    pub repetitions: usize,
    pub depth: usize,
    pub base_filters: usize,
    /// Minimum fraction of non-background pixels in a sampled window.
    pub min_foreground: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            patches_per_epoch: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_seed: 0,
            channel_mode: ChannelMode::FourRetrieved,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            registration: RegistrationConfig::default(),
            repetitions: 1,
            depth: 4,
            base_filters: 32,
            min_foreground: 0.05,
        }
    }
}

impl TrainConfig {
    /// A budget small enough for a single CPU core, about four minutes a run.
    pub fn tiny() -> Self {
        TrainConfig {
            epochs: 20,
            patches_per_epoch: 256,
            batch_size: 8,
            learning_rate: 3e-3,
            depth: 3,
            base_filters: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("repetitions", self.repetitions),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.patches_per_epoch < self.batch_size {
            return Err(Error::Config(format!(
                "patches_per_epoch ({}) is smaller than one batch ({})",
                self.patches_per_epoch, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam decays must lie in [0, 1) and epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) || !(0.0..=1.0).contains(&self.min_foreground) {
            return Err(Error::Config("gate threshold and foreground floor must lie in [0, 1]".into()));
        }
        self.network(0).validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch / self.batch_size
    }

    pub fn seed(&self, run_index: usize) -> u64 {
        self.base_seed + run_index as u64
    }

    pub fn network(&self, seed: u64) -> NetworkConfig {
        NetworkConfig {
            in_channels: self.channel_mode.in_channels(),
            depth: self.depth,
            base_filters: self.base_filters,
            seed,
            ..Default::default()
        }
    }

    pub fn gate(&self) -> GateConfig {
        GateConfig {
            threshold: self.gate_threshold,
            registration: self.registration.clone(),
            exclude_same_subject: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    /// Mean test Dice over the test subjects, when evaluated.
    pub dice: Option<DiceScores>,
}

/// A training slice with its assembled input and eligible window origins.
#[derive(Clone, Debug)]
pub struct PreparedSlice {
    pub key: SliceKey,
    pub stack: ChannelStack,
    pub labels: LabelMap,
    pub decision: Option<GateDecision>,
    origins: Vec<(usize, usize)>,
}

impl PreparedSlice {
    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }
}

/// Window origins whose `PATCH_SIZE` window holds at least
/// `min_fraction` non-background pixels.
pub fn eligible_origins(labels: &LabelMap, min_fraction: f64) -> Vec<(usize, usize)> {
    let (rows, cols) = labels.dim();
    if rows < PATCH_SIZE || cols < PATCH_SIZE {
        return Vec::new();
    }
    let mut integral = vec![0usize; (rows + 1) * (cols + 1)];
    let at = |r: usize, c: usize| r * (cols + 1) + c;
    for r in 0..rows {
        for c in 0..cols {
            let fg = usize::from(labels.get(r, c) != 0);
            integral[at(r + 1, c + 1)] = fg + integral[at(r, c + 1)] + integral[at(r + 1, c)] - integral[at(r, c)];
        }
    }
    let need = min_fraction * (PATCH_SIZE * PATCH_SIZE) as f64;
    let mut out = Vec::new();
    for r in 0..=rows - PATCH_SIZE {
        for c in 0..=cols - PATCH_SIZE {
            let (r1, c1) = (r + PATCH_SIZE, c + PATCH_SIZE);
            let n = integral[at(r1, c1)] + integral[at(r, c)] - integral[at(r, c1)] - integral[at(r1, c)];
            if n as f64 >= need {
                out.push((r, c));
            }
        }
    }
    out
}

/// All training slices assembled for one channel mode. Assembly does not
/// depend on the run seed, so one set serves every repetition.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    mode: ChannelMode,
    slices: Vec<PreparedSlice>,
    cumulative: Vec<usize>,
}

impl TrainingSet {
    pub fn prepare(
        volumes: &[Volume],
        mode: ChannelMode,
        context: Option<&RetrievalContext>,
        gate: &GateConfig,
        min_foreground: f64,
    ) -> Result<Self> {
        let mut slices = Vec::new();
        for v in volumes {
            if !v.has_labels() {
                return Err(Error::MissingLabels(v.subject_id().to_string()));
            }
            for z in 0..v.num_slices() {
                let labels = v.label_slice(z).expect("labels checked");
                let origins = eligible_origins(&labels, min_foreground);
                if origins.is_empty() {
                    continue;
                }
                let (stack, decision) = assemble_channels(v, z, mode, context, gate).map_err(|e| Error::Slice {
                    slice: z,
                    source: Box::new(e),
                })?;
                slices.push(PreparedSlice {
                    key: SliceKey::new(v.subject_id(), z),
                    stack,
                    labels,
                    decision,
                    origins,
                });
            }
        }
        if slices.is_empty() {
            return Err(Error::NoEligibleSlices(format!(
                "no slice of {} volume(s) has a window with {:.0}% foreground",
                volumes.len(),
                min_foreground * 100.0
            )));
        }
        let cumulative = slices
            .iter()
            .scan(0, |acc, s| {
                *acc += s.origins.len();
                Some(*acc)
            })
            .collect();
        Ok(TrainingSet { mode, slices, cumulative })
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn slices(&self) -> &[PreparedSlice] {
        &self.slices
    }

    /// Number of eligible (slice, origin) pairs.
    pub fn num_positions(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    /// `count` patches drawn uniformly over every eligible (slice, origin).
    pub fn sample_patches<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Vec<Patch>> {
        let total = self.num_positions();
        (0..count)
            .map(|_| {
                let u = rng.random_range(0..total);
                let i = self.cumulative.partition_point(|&c| c <= u);
                let before = if i == 0 { 0 } else { self.cumulative[i - 1] };
                let s = &self.slices[i];
                extract_patch(&s.stack, &s.labels, s.origins[u - before])
            })
            .collect()
    }
}

/// Stacks patches into network input and one-hot targets.
pub fn patches_to_batch(patches: &[Patch]) -> Result<(BatchTensor, BatchTensor)> {
    let c = patches.first().map(|p| p.data.dim().2).unwrap_or(0);
    let mut x = Array4::zeros((patches.len(), PATCH_SIZE, PATCH_SIZE, c));
    let mut y = Array4::zeros((patches.len(), PATCH_SIZE, PATCH_SIZE, NUM_CLASSES));
    for (b, p) in patches.iter().enumerate() {
        x.index_axis_mut(Axis(0), b).assign(&p.data);
        let labels = LabelMap::new(p.target.clone())?;
        y.index_axis_mut(Axis(0), b).assign(&onehot_encode(&labels));
    }
    Ok((BatchTensor::new(x)?, BatchTensor::new(y)?))
}

#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut BTreeMap<String, ArrayD<f64>>, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub state: NetworkState,
    pub record: RunRecord,
}

/// Trains one network with seed `base_seed + run_index`.
pub fn train(config: &TrainConfig, data: &TrainingSet, run_index: usize, checkpoint: Option<&Path>) -> Result<TrainedRun> {
    config.validate()?;
    if data.mode() != config.channel_mode {
        return Err(Error::Config(format!(
            "training set was prepared for {} but the config asks for {}",
            data.mode(),
            config.channel_mode
        )));
    }
    let seed = config.seed(run_index);
    let mut state = build_network(&config.network(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.beta1, config.beta2, config.epsilon);
    let steps = config.steps_per_epoch();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let patches = data.sample_patches(config.batch_size, &mut rng)?;
            let (x, y) = patches_to_batch(&patches)?;
            let out = backward(&state, &x, &y)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch * steps + step });
            }
            total += out.loss;
            adam.update(state.params_mut(), &out.gradients, config.learning_rate);
            state.update_running_stats(&out.stats);
        }
        epoch_losses.push(total / steps as f64);
    }
    if let Some(path) = checkpoint {
        state.save(path)?;
    }
    Ok(TrainedRun {
        state,
        record: RunRecord {
            run_index,
            seed,
            epoch_losses,
            checkpoint: checkpoint.map(Path::to_path_buf),
            dice: None,
        },
    })
}

/// Mean CSF/GM/WM Dice of a network over the test volumes.
pub fn evaluate_network(
    state: &NetworkState,
    test: &[Volume],
    mode: ChannelMode,
    context: Option<&RetrievalContext>,
    stitch: &StitchConfig,
    gate: &GateConfig,
) -> Result<DiceScores> {
    let mut scores = Vec::with_capacity(test.len());
    for v in test {
        let truth = v.labels().ok_or_else(|| Error::MissingLabels(v.subject_id().to_string()))?;
        let seg = segment_volume(state, v, mode, context, stitch, gate)?;
        scores.push(evaluate_volume(&seg.labels, truth)?.scores);
    }
    DiceScores::average(&scores)
}

/// `repetitions` independent runs, each scored on `test`. Checkpoints go to
/// `checkpoint_dir/run_<i>.ckpt` when a directory is given.
pub fn run_repeated(
    config: &TrainConfig,
    data: &TrainingSet,
    test: &[Volume],
    context: Option<&RetrievalContext>,
    stitch: &StitchConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let gate = config.gate();
    (0..config.repetitions)
        .map(|run| {
            let tag = |e: Error| Error::Run {
                run,
                source: Box::new(e),
            };
            let path = checkpoint_dir.map(|d| d.join(format!("run_{run}.ckpt")));
            let mut trained = train(config, data, run, path.as_deref()).map_err(tag)?;
            let dice = evaluate_network(&trained.state, test, config.channel_mode, context, stitch, &gate).map_err(tag)?;
            trained.record.dice = Some(dice);
            Ok(trained.record)
        })
        .collect()
}
