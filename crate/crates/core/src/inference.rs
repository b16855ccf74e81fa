//! Channel assembly with the gated prior, sliding-window prediction and
//! stitching.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_intensity, onehot_decode, ChannelStack, LabelMap, Modality, PriorKind, Volume, PATCH_SIZE};
use crate::net::{forward, BatchTensor, Mode, NetworkState};
use crate::registration::{gate_fourth_channel, GateDecision, RegistrationConfig, RetrievedSlice, DEFAULT_GATE_THRESHOLD};
use crate::retrieval::RetrievalContext;
use crate::training::ChannelMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub window: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Windows per forward call.
    pub batch_size: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            window: PATCH_SIZE,
            stride: 32,
            padding: Padding::Reflect,
            batch_size: 16,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.stride > self.window || self.batch_size < 1 {
            return Err(Error::Config(format!(
                "stitching needs 1 <= stride ({}) <= window ({}) and a positive batch size",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// How the fourth channel is obtained from the retrieval database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub threshold: f64,
    pub registration: RegistrationConfig,
    /// Skip database entries of the query's own subject.
    pub exclude_same_subject: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            threshold: DEFAULT_GATE_THRESHOLD,
            registration: RegistrationConfig::default(),
            exclude_same_subject: true,
        }
    }
}

/// Normalized modality channels of one slice, in [`Modality::ALL`] order.
pub fn modality_channels(volume: &Volume, slice_index: usize) -> Result<[Array2<f64>; 3]> {
    if slice_index >= volume.num_slices() {
        return Err(Error::InvalidDimension {
            dim: "slice".into(),
            reason: format!("slice {slice_index} of a {}-slice volume", volume.num_slices()),
        });
    }
    Ok(Modality::ALL.map(|m| normalize_intensity(volume.slice(m, slice_index))))
}

/// Builds the network input for one slice. In `FourRetrieved` mode the best
/// database match is registered to the query and its labels become the
/// prior when the gate accepts, a zero channel otherwise.
pub fn assemble_channels(
    volume: &Volume,
    slice_index: usize,
    mode: ChannelMode,
    context: Option<&RetrievalContext>,
    gate: &GateConfig,
) -> Result<(ChannelStack, Option<GateDecision>)> {
    let channels = modality_channels(volume, slice_index)?;
    match mode {
        ChannelMode::Three => Ok((ChannelStack::new(channels, None)?, None)),
        ChannelMode::FourOwnGt => {
            let labels = volume
                .label_slice(slice_index)
                .ok_or_else(|| Error::MissingLabels(volume.subject_id().to_string()))?;
            let prior = labels.to_prior_channel();
            Ok((ChannelStack::new(channels, Some((prior, PriorKind::OwnTruth)))?, None))
        }
        ChannelMode::FourRetrieved => {
            let context = context.ok_or_else(|| Error::Retrieval("four_retrieved mode needs a retrieval index".into()))?;
            let modality = context.index().config().modality;
            let query = normalize_intensity(volume.slice(modality, slice_index));
            let exclude = gate.exclude_same_subject.then_some(volume.subject_id());
            let retrieved = retrieve_for(context, query.view(), exclude)?;
            let decision = gate_fourth_channel(query.view(), &retrieved, gate.threshold, &gate.registration)?;
            let prior = match &decision.warped_prior {
                Some(prior) => (prior.to_prior_channel(), PriorKind::Retrieved),
                None => (Array2::zeros(query.dim()), PriorKind::ZeroFallback),
            };
            Ok((ChannelStack::new(channels, Some(prior))?, Some(decision)))
        }
    }
}

/// Mirror index without edge repetition, periodic for any offset.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn covering_extent(n: usize, window: usize, stride: usize) -> usize {
    if n <= window {
        window
    } else {
        (n - window).div_ceil(stride) * stride + window
    }
}

/// Window origins along one padded axis.
fn origins(padded: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..=(padded - window) / stride).map(|i| i * stride).collect()
}

/// Sliding-window prediction; returns the labels and the averaged class
/// probabilities (`rows x cols x classes`).
pub fn segment_slice(state: &NetworkState, stack: &ChannelStack, stitch: &StitchConfig) -> Result<(LabelMap, Array3<f64>)> {
    stitch.validate()?;
    let cfg = state.config();
    if stack.num_channels() != cfg.in_channels {
        return Err(Error::InvalidDimension {
            dim: "channels".into(),
            reason: format!("network expects {} channels, stack has {}", cfg.in_channels, stack.num_channels()),
        });
    }
    let (rows, cols) = stack.dim();
    let c = stack.num_channels();
    let w = stitch.window;
    let (pr, pc) = (covering_extent(rows, w, stitch.stride), covering_extent(cols, w, stitch.stride));
    let src = stack.channels();
    let padded = Array3::from_shape_fn((pr, pc, c), |(r, k, ch)| src[[reflect(r, rows), reflect(k, cols), ch]]);

    let windows: Vec<(usize, usize)> = origins(pr, w, stitch.stride)
        .into_iter()
        .flat_map(|r| origins(pc, w, stitch.stride).into_iter().map(move |k| (r, k)))
        .collect();
    let classes = cfg.num_classes;
    let mut sum = Array3::<f64>::zeros((pr, pc, classes));
    let mut count = Array2::<f64>::zeros((pr, pc));
    for chunk in windows.chunks(stitch.batch_size) {
        let mut batch = Array4::zeros((chunk.len(), w, w, c));
        for (b, &(r, k)) in chunk.iter().enumerate() {
            batch.index_axis_mut(Axis(0), b).assign(&padded.slice(s![r..r + w, k..k + w, ..]));
        }
        let probs = forward(state, &BatchTensor::new(batch)?, Mode::Eval)?.into_inner();
        for (b, &(r, k)) in chunk.iter().enumerate() {
            let mut dst = sum.slice_mut(s![r..r + w, k..k + w, ..]);
            dst += &probs.index_axis(Axis(0), b);
            count.slice_mut(s![r..r + w, k..k + w]).mapv_inplace(|v| v + 1.0);
        }
    }
    let mut avg = sum.slice(s![..rows, ..cols, ..]).to_owned();
    for ((r, k, _), v) in avg.indexed_iter_mut() {
        *v /= count[[r, k]];
    }
    let labels = onehot_decode(avg.view())?;
    Ok((labels, avg))
}

/// One line of the gate audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateLogEntry {
    pub slice: usize,
    pub matched_source: String,
    pub similarity: f64,
    pub used: bool,
    pub rotation_deg: f64,
    pub translation_px: (f64, f64),
}

impl GateLogEntry {
    pub fn new(slice: usize, decision: &GateDecision) -> Self {
        GateLogEntry {
            slice,
            matched_source: decision.matched_source.to_string(),
            similarity: decision.similarity,
            used: decision.use_prior,
            rotation_deg: decision.transform.rotation_degrees(),
            translation_px: decision.transform.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSegmentation {
    pub labels: Array3<u8>,
    pub decisions: Vec<(usize, GateDecision)>,
}

impl VolumeSegmentation {
    pub fn gate_log(&self) -> Vec<GateLogEntry> {
        self.decisions.iter().map(|(z, d)| GateLogEntry::new(*z, d)).collect()
    }
}

/// Segments every slice of `volume`.
pub fn segment_volume(
    state: &NetworkState,
    volume: &Volume,
    mode: ChannelMode,
    context: Option<&RetrievalContext>,
    stitch: &StitchConfig,
    gate: &GateConfig,
) -> Result<VolumeSegmentation> {
    let (z, rows, cols) = volume.shape();
    let mut labels = Array3::zeros((z, rows, cols));
    let mut decisions = Vec::new();
    for i in 0..z {
        let tag = |e: Error| Error::Slice {
            slice: i,
            source: Box::new(e),
        };
        let (stack, decision) = assemble_channels(volume, i, mode, context, gate).map_err(tag)?;
        let (map, _) = segment_slice(state, &stack, stitch).map_err(tag)?;
        labels.index_axis_mut(Axis(0), i).assign(map.classes());
        if let Some(d) = decision {
            decisions.push((i, d));
        }
    }
    Ok(VolumeSegmentation { labels, decisions })
}

/// The best database match of a normalized query slice.
pub fn retrieve_for(context: &RetrievalContext, query: ArrayView2<'_, f64>, exclude: Option<&str>) -> Result<RetrievedSlice> {
    let (key, _) = context.best_match(query, exclude)?;
    let (image, labels) = context.fetch(&key)?;
    Ok(RetrievedSlice {
        source: key,
        image,
        labels,
    })
}
