//! Multi-channel U-Net style encoder-decoder.
//!
//! Each encoder level applies two conv -> batch-norm -> ReLU blocks and,
//! except at the bottleneck, a 2x2 max pool. The decoder mirrors it with
//! 2x2 stride-2 transposed convolutions, concatenates the same-resolution
//! encoder features and applies two more blocks. A 1x1 convolution and a
//! per-pixel softmax produce class probabilities.
//!
//! Tensors are NHWC `f64`. Parameters live in a name-keyed map so that
//! gradients, optimizer state and checkpoints share one naming scheme.

mod ops;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::rawfile::{read_raw, write_raw, DType, RawHeader};
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            num_classes: NUM_CLASSES,
            depth: 4,
            base_filters: 32,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.in_channels) {
            return Err(Error::Config(format!("in_channels must be 3 or 4, got {}", self.in_channels)));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_filters < 1 || self.num_classes < 2 {
            return Err(Error::Config("base_filters >= 1 and num_classes >= 2 required".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Momentum of the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// `N x rows x cols x channels`, `N >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensor(Array4<f64>);

impl BatchTensor {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.dim().0 == 0 {
            return Err(Error::InvalidDimension {
                dim: "batch".into(),
                reason: "batch size must be at least 1".into(),
            });
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(BatchTensor(values))
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

pub type Gradients = BTreeMap<String, ArrayD<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    config: NetworkConfig,
    params: BTreeMap<String, ArrayD<f64>>,
    buffers: BTreeMap<String, ArrayD<f64>>,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    Normal(f64),
    Const(f64),
}

fn block_specs(prefix: &str, cin: usize, cout: usize, k: usize, out: &mut Vec<ParamSpec>, buffers: &mut Vec<(String, usize, f64)>) {
    for (j, ci) in [(0, cin), (1, cout)] {
        out.push(ParamSpec {
            name: format!("{prefix}.conv{j}.weight"),
            shape: vec![k, k, ci, cout],
            init: Init::Normal((2.0 / (k * k * ci) as f64).sqrt()),
        });
        out.push(ParamSpec {
            name: format!("{prefix}.bn{j}.gamma"),
            shape: vec![cout],
            init: Init::Const(1.0),
        });
        out.push(ParamSpec {
            name: format!("{prefix}.bn{j}.beta"),
            shape: vec![cout],
            init: Init::Const(0.0),
        });
        buffers.push((format!("{prefix}.bn{j}.running_mean"), cout, 0.0));
        buffers.push((format!("{prefix}.bn{j}.running_var"), cout, 1.0));
    }
}

fn layout(config: &NetworkConfig) -> (Vec<ParamSpec>, Vec<(String, usize, f64)>) {
    let k = config.kernel_size;
    let mut specs = Vec::new();
    let mut buffers = Vec::new();
    let mut cin = config.in_channels;
    for l in 0..config.depth {
        let f = config.filters(l);
        block_specs(&format!("enc{l}"), cin, f, k, &mut specs, &mut buffers);
        cin = f;
    }
    for l in (0..config.depth - 1).rev() {
        let f = config.filters(l);
        let below = config.filters(l + 1);
        specs.push(ParamSpec {
            name: format!("dec{l}.up.weight"),
            shape: vec![below, 2, 2, f],
            init: Init::Normal((2.0 / below as f64).sqrt()),
        });
        specs.push(ParamSpec {
            name: format!("dec{l}.up.bias"),
            shape: vec![f],
            init: Init::Const(0.0),
        });
        block_specs(&format!("dec{l}"), 2 * f, f, k, &mut specs, &mut buffers);
    }
    let f0 = config.filters(0);
    specs.push(ParamSpec {
        name: "head.weight".into(),
        shape: vec![f0, config.num_classes],
        init: Init::Normal((1.0 / f0 as f64).sqrt()),
    });
    specs.push(ParamSpec {
        name: "head.bias".into(),
        shape: vec![config.num_classes],
        init: Init::Const(0.0),
    });
    (specs, buffers)
}

/// Builds a freshly initialized network; weights depend only on `config`.
pub fn build_network(config: &NetworkConfig) -> Result<NetworkState> {
    config.validate()?;
    let (specs, buffer_specs) = layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BTreeMap::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        params.insert(spec.name, ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("sized"));
    }
    let buffers = buffer_specs
        .into_iter()
        .map(|(name, n, v)| (name, ArrayD::from_elem(IxDyn(&[n]), v)))
        .collect();
    Ok(NetworkState {
        config: config.clone(),
        params,
        buffers,
    })
}

/// Per-layer normalization statistics gathered by a training-mode pass.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    stats: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)>,
}

impl NetworkState {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, ArrayD<f64>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, ArrayD<f64>> {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    fn p(&self, name: &str) -> &[f64] {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .as_slice()
            .expect("standard layout")
    }

    fn buf(&self, name: &str) -> &[f64] {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
            .as_slice()
            .expect("standard layout")
    }

    /// Folds batch statistics into the running estimates
    /// (`running = m * running + (1 - m) * batch`, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (prefix, (mean, var, count)) in &stats.stats {
            let unbias = if *count > 1 { *count as f64 / (*count - 1) as f64 } else { 1.0 };
            let rm = self.buffers.get_mut(&format!("{prefix}.running_mean")).expect("buffer");
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = self.buffers.get_mut(&format!("{prefix}.running_var")).expect("buffer");
            for (r, v) in rv.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut table = Vec::new();
        let mut flat = Vec::new();
        for (kind, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in map {
                table.push(serde_json::json!({
                    "name": name,
                    "kind": kind,
                    "shape": t.shape(),
                    "offset": flat.len(),
                }));
                flat.extend(t.iter().copied());
            }
        }
        let mut header = RawHeader::new(&[flat.len()], DType::F64);
        header.meta.insert(
            "network_config".into(),
            serde_json::to_value(&self.config).map_err(|e| Error::format(path, e.to_string()))?,
        );
        header.meta.insert("tensors".into(), serde_json::Value::Array(table));
        write_raw(path, &header, &flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            kind: String,
            shape: Vec<usize>,
            offset: usize,
        }
        let (header, flat) = read_raw::<f64>(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let config: NetworkConfig = serde_json::from_value(header.meta.get("network_config").cloned().ok_or_else(|| bad("missing network_config"))?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let entries: Vec<Entry> = serde_json::from_value(header.meta.get("tensors").cloned().ok_or_else(|| bad("missing tensor table"))?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut state = build_network(&config)?;
        let expected = state.param_shapes();
        let mut seen = 0usize;
        for e in entries {
            let n: usize = e.shape.iter().product();
            let data = flat.get(e.offset..e.offset + n).ok_or_else(|| bad("tensor exceeds payload"))?;
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data.to_vec()).map_err(|err| Error::format(path, err.to_string()))?;
            let map = match e.kind.as_str() {
                "param" => &mut state.params,
                "buffer" => &mut state.buffers,
                other => return Err(bad(&format!("unknown tensor kind {other}"))),
            };
            match map.get_mut(&e.name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t,
                Some(slot) => return Err(Error::shape(format!("checkpoint tensor {}", e.name), slot.shape(), t.shape())),
                None => return Err(bad(&format!("unexpected tensor {}", e.name))),
            }
            seen += 1;
        }
        if seen != expected.len() + state.buffers.len() {
            return Err(bad("checkpoint is missing tensors"));
        }
        Ok(state)
    }
}

struct BlockCache {
    input: Array4<f64>,
    xhat: Array4<f64>,
    var: Vec<f64>,
    output: Array4<f64>,
}

struct LevelCache {
    blocks: [BlockCache; 2],
}

struct DecoderCache {
    up_input: Array4<f64>,
    skip_channels: usize,
    blocks: [BlockCache; 2],
}

/// Intermediate activations of one forward pass, needed by the backward pass.
struct Trace {
    encoder: Vec<LevelCache>,
    pools: Vec<((usize, usize, usize, usize), Vec<usize>)>,
    decoder: Vec<DecoderCache>,
    head_input: Array4<f64>,
    probs: Array4<f64>,
    stats: BatchStats,
}

fn conv_block(state: &NetworkState, prefix: &str, j: usize, x: Array4<f64>, mode: Mode, stats: &mut BatchStats) -> BlockCache {
    let cfg = &state.config;
    let w = state.p(&format!("{prefix}.conv{j}.weight"));
    let gamma = state.p(&format!("{prefix}.bn{j}.gamma"));
    let beta = state.p(&format!("{prefix}.bn{j}.beta"));
    let cout = gamma.len();
    let pre = ops::conv_forward(&x, w, cfg.kernel_size, cout);
    let bn = format!("{prefix}.bn{j}");
    let (mean, var) = match mode {
        Mode::Train => {
            let s = ops::channel_stats(&pre);
            stats.stats.insert(bn, (s.mean.clone(), s.var.clone(), s.count));
            (s.mean, s.var)
        }
        Mode::Eval => (
            state.buf(&format!("{bn}.running_mean")).to_vec(),
            state.buf(&format!("{bn}.running_var")).to_vec(),
        ),
    };
    let (xhat, mut out) = ops::bn_apply(&pre, &mean, &var, gamma, beta);
    ops::relu_inplace(&mut out);
    BlockCache {
        input: x,
        xhat,
        var,
        output: out,
    }
}

fn block_backward(state: &NetworkState, prefix: &str, j: usize, cache: &BlockCache, mut dy: Array4<f64>, grads: &mut Gradients) -> Array4<f64> {
    let cfg = &state.config;
    ops::relu_backward(&cache.output, &mut dy);
    let gamma = state.p(&format!("{prefix}.bn{j}.gamma"));
    let (dpre, dgamma, dbeta) = ops::bn_backward(&cache.xhat, &cache.var, gamma, &dy);
    let w = state.p(&format!("{prefix}.conv{j}.weight"));
    let (dx, dw) = ops::conv_backward(&cache.input, w, cfg.kernel_size, &dpre);
    put(grads, state, &format!("{prefix}.conv{j}.weight"), dw);
    put(grads, state, &format!("{prefix}.bn{j}.gamma"), dgamma);
    put(grads, state, &format!("{prefix}.bn{j}.beta"), dbeta);
    dx
}

fn put(grads: &mut Gradients, state: &NetworkState, name: &str, g: Vec<f64>) {
    let shape = state.params[name].shape().to_vec();
    grads.insert(name.to_string(), ArrayD::from_shape_vec(IxDyn(&shape), g).expect("gradient matches parameter"));
}

fn check_input(state: &NetworkState, batch: &BatchTensor) -> Result<()> {
    let (_, h, w, c) = batch.dim();
    let cfg = &state.config;
    if c != cfg.in_channels {
        return Err(Error::InvalidDimension {
            dim: "channels".into(),
            reason: format!("network expects {} input channels, got {c}", cfg.in_channels),
        });
    }
    let m = cfg.spatial_multiple();
    for (name, v) in [("rows", h), ("cols", w)] {
        if v == 0 || v % m != 0 {
            return Err(Error::InvalidDimension {
                dim: name.into(),
                reason: format!("{v} is not a positive multiple of {m} (depth {})", cfg.depth),
            });
        }
    }
    Ok(())
}

fn run_forward(state: &NetworkState, batch: &BatchTensor, mode: Mode) -> Result<Trace> {
    check_input(state, batch)?;
    let cfg = &state.config;
    let mut stats = BatchStats::default();
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut pools = Vec::new();
    let mut x = batch.values().clone();
    for l in 0..cfg.depth {
        let prefix = format!("enc{l}");
        let b0 = conv_block(state, &prefix, 0, x, mode, &mut stats);
        let b1 = conv_block(state, &prefix, 1, b0.output.clone(), mode, &mut stats);
        x = if l + 1 < cfg.depth {
            let (pooled, arg) = ops::maxpool_forward(&b1.output);
            pools.push((b1.output.dim(), arg));
            pooled
        } else {
            b1.output.clone()
        };
        encoder.push(LevelCache { blocks: [b0, b1] });
    }
    let mut decoder = Vec::with_capacity(cfg.depth - 1);
    for l in (0..cfg.depth - 1).rev() {
        let prefix = format!("dec{l}");
        let up = ops::upconv_forward(&x, state.p(&format!("{prefix}.up.weight")), state.p(&format!("{prefix}.up.bias")));
        let skip = &encoder[l].blocks[1].output;
        let cat = ops::concat(skip, &up);
        let b0 = conv_block(state, &prefix, 0, cat, mode, &mut stats);
        let b1 = conv_block(state, &prefix, 1, b0.output.clone(), mode, &mut stats);
        let up_input = std::mem::replace(&mut x, b1.output.clone());
        decoder.push(DecoderCache {
            up_input,
            skip_channels: skip.dim().3,
            blocks: [b0, b1],
        });
    }
    let mut logits = ops::conv_forward(&x, state.p("head.weight"), 1, cfg.num_classes);
    ops::add_bias(&mut logits, state.p("head.bias"));
    ops::softmax_inplace(&mut logits);
    Ok(Trace {
        encoder,
        pools,
        decoder,
        head_input: x,
        probs: logits,
        stats,
    })
}

/// Class probabilities `N x rows x cols x num_classes`.
pub fn forward(state: &NetworkState, batch: &BatchTensor, mode: Mode) -> Result<BatchTensor> {
    let trace = run_forward(state, batch, mode)?;
    Ok(BatchTensor(trace.probs))
}

/// Like [`forward`] in training mode, also returning the batch statistics.
pub fn forward_train(state: &NetworkState, batch: &BatchTensor) -> Result<(BatchTensor, BatchStats)> {
    let trace = run_forward(state, batch, Mode::Train)?;
    Ok((BatchTensor(trace.probs), trace.stats))
}

/// `L = (1/N) * sum_n ||x_n - y_n||^2`, the squared norm running over every
/// pixel and channel of sample `n`.
pub fn mse_loss(output: &BatchTensor, target: &BatchTensor) -> Result<f64> {
    if output.dim() != target.dim() {
        let (a, b) = (output.dim(), target.dim());
        return Err(Error::shape("loss output vs target", &[a.0, a.1, a.2, a.3], &[b.0, b.1, b.2, b.3]));
    }
    let n = output.batch_size() as f64;
    let sum: f64 = output
        .values()
        .iter()
        .zip(target.values().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub loss: f64,
    pub gradients: Gradients,
    pub stats: BatchStats,
}

/// Exact gradients of [`mse_loss`] for a training-mode forward pass.
pub fn backward(state: &NetworkState, batch: &BatchTensor, target: &BatchTensor) -> Result<BackwardOutput> {
    let trace = run_forward(state, batch, Mode::Train)?;
    let output = BatchTensor(trace.probs);
    let loss = mse_loss(&output, target)?;
    let cfg = &state.config;
    let n = batch.batch_size() as f64;
    let mut dprobs = output.values().clone();
    ndarray::Zip::from(&mut dprobs)
        .and(target.values())
        .for_each(|d, &y| *d = 2.0 * (*d - y) / n);
    let dlogits = ops::softmax_backward(output.values(), &dprobs);
    let mut grads = Gradients::new();
    put(&mut grads, state, "head.bias", ops::bias_grad(&dlogits));
    let (mut dx, dw) = ops::conv_backward(&trace.head_input, state.p("head.weight"), 1, &dlogits);
    put(&mut grads, state, "head.weight", dw);

    let mut skip_grads: Vec<Option<Array4<f64>>> = (0..cfg.depth).map(|_| None).collect();
    for (cache, l) in trace.decoder.iter().rev().zip(0..cfg.depth - 1) {
        let prefix = format!("dec{l}");
        dx = block_backward(state, &prefix, 1, &cache.blocks[1], dx, &mut grads);
        dx = block_backward(state, &prefix, 0, &cache.blocks[0], dx, &mut grads);
        let (dskip, dup) = ops::split_channels(&dx, cache.skip_channels);
        skip_grads[l] = Some(dskip);
        let (dbelow, dw, db) = ops::upconv_backward(&cache.up_input, state.p(&format!("{prefix}.up.weight")), &dup);
        put(&mut grads, state, &format!("{prefix}.up.weight"), dw);
        put(&mut grads, state, &format!("{prefix}.up.bias"), db);
        dx = dbelow;
    }
    for l in (0..cfg.depth).rev() {
        let prefix = format!("enc{l}");
        if l + 1 < cfg.depth {
            let (dim, arg) = &trace.pools[l];
            let mut d = ops::maxpool_backward(*dim, arg, &dx);
            if let Some(s) = skip_grads[l].take() {
                d += &s;
            }
            dx = d;
        }
        let level = &trace.encoder[l];
        dx = block_backward(state, &prefix, 1, &level.blocks[1], dx, &mut grads);
        dx = block_backward(state, &prefix, 0, &level.blocks[0], dx, &mut grads);
    }
    Ok(BackwardOutput {
        loss,
        gradients: grads,
        stats: trace.stats,
    })
}
