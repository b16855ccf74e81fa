//! Domain types shared across the pipeline: multi-modality volumes, label
//! maps, network input stacks and training patches.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of label classes, background included.
pub const NUM_CLASSES: usize = 6;

/// Spatial extent of a training patch and of an inference window.
pub const PATCH_SIZE: usize = 64;

/// Tissue classes in label-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    GrayMatter = 2,
    WhiteMatter = 3,
    BrainStem = 4,
    Cerebellum = 5,
}

impl Tissue {
    pub const ALL: [Tissue; NUM_CLASSES] = [
        Tissue::Background,
        Tissue::Csf,
        Tissue::GrayMatter,
        Tissue::WhiteMatter,
        Tissue::BrainStem,
        Tissue::Cerebellum,
    ];

    /// The three classes that enter the headline Dice scores.
    pub const EVALUATED: [Tissue; 3] = [Tissue::Csf, Tissue::GrayMatter, Tissue::WhiteMatter];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::Csf => "CSF",
            Tissue::GrayMatter => "GM",
            Tissue::WhiteMatter => "WM",
            Tissue::BrainStem => "brain stem",
            Tissue::Cerebellum => "cerebellum",
        }
    }
}

/// MRI acquisition sequences carried by a [`Volume`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1IR,
    T2FLAIR,
}

impl Modality {
    /// Fixed channel order of a [`ChannelStack`].
    pub const ALL: [Modality; 3] = [Modality::T1, Modality::T1IR, Modality::T2FLAIR];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1IR => "T1IR",
            Modality::T2FLAIR => "T2FLAIR",
        }
    }

    pub fn from_name(name: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A multi-modality scan, indexed `[slice, row, col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    subject_id: String,
    modalities: BTreeMap<Modality, Array3<f32>>,
    labels: Option<Array3<u8>>,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(
        subject_id: impl Into<String>,
        modalities: BTreeMap<Modality, Array3<f32>>,
        labels: Option<Array3<u8>>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        for m in Modality::ALL {
            if !modalities.contains_key(&m) {
                return Err(Error::Config(format!(
                    "subject {subject_id:?} is missing modality {m}"
                )));
            }
        }
        let shape = modalities[&Modality::T1].shape().to_vec();
        for (m, data) in &modalities {
            if data.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("T1 vs {m} of subject {subject_id:?}"),
                    &shape,
                    data.shape(),
                ));
            }
        }
        if let Some(labels) = &labels {
            if labels.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("T1 vs labels of subject {subject_id:?}"),
                    &shape,
                    labels.shape(),
                ));
            }
            if let Some(((_, r, c), &v)) = labels.indexed_iter().find(|(_, &v)| v as usize >= NUM_CLASSES) {
                return Err(Error::InvalidLabel { row: r, col: c, value: v });
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume {
            subject_id,
            modalities,
            labels,
            spacing,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// `(slices, rows, cols)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.modalities[&Modality::T1].dim()
    }

    pub fn num_slices(&self) -> usize {
        self.shape().0
    }

    pub fn modality(&self, m: Modality) -> &Array3<f32> {
        &self.modalities[&m]
    }

    pub fn modalities(&self) -> &BTreeMap<Modality, Array3<f32>> {
        &self.modalities
    }

    pub fn labels(&self) -> Option<&Array3<u8>> {
        self.labels.as_ref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn slice(&self, m: Modality, index: usize) -> ArrayView2<'_, f32> {
        self.modalities[&m].index_axis(Axis(0), index)
    }

    pub fn label_slice(&self, index: usize) -> Option<LabelMap> {
        self.labels.as_ref().map(|l| LabelMap {
            classes: l.index_axis(Axis(0), index).to_owned(),
        })
    }

    /// Drops the label volume, e.g. to mimic an unlabeled test subject.
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }
}

/// Per-pixel class indices in `0..NUM_CLASSES`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    classes: Array2<u8>,
}

impl LabelMap {
    pub fn new(classes: Array2<u8>) -> Result<Self> {
        if let Some(((row, col), &value)) =
            classes.indexed_iter().find(|(_, &v)| v as usize >= NUM_CLASSES)
        {
            return Err(Error::InvalidLabel { row, col, value });
        }
        Ok(LabelMap { classes })
    }

    pub fn background(rows: usize, cols: usize) -> Self {
        LabelMap {
            classes: Array2::zeros((rows, cols)),
        }
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn classes(&self) -> &Array2<u8> {
        &self.classes
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.classes
    }

    pub fn dim(&self) -> (usize, usize) {
        self.classes.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[[row, col]]
    }

    /// Labels rescaled to `[0, 1]` by `1 / (NUM_CLASSES - 1)`, the encoding of
    /// the prior input channel.
    pub fn to_prior_channel(&self) -> Array2<f64> {
        let denom = (NUM_CLASSES - 1) as f64;
        self.classes.mapv(|v| f64::from(v) / denom)
    }

    /// Count of non-background pixels.
    pub fn foreground_count(&self) -> usize {
        self.classes.iter().filter(|&&v| v != 0).count()
    }
}

/// Where the prior channel of a [`ChannelStack`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    /// Three-channel stack.
    Absent,
    /// The slice's own ground truth.
    OwnTruth,
    /// A retrieved, registered and gate-accepted label map.
    Retrieved,
    /// The gate rejected the retrieved match; the channel is all zeros.
    ZeroFallback,
}

/// Network input for one slice: `rows x cols x C` with C = 3 (modalities)
/// or 4 (modalities + prior).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    channels: Array3<f64>,
    prior: PriorKind,
}

impl ChannelStack {
    /// Stacks the three normalized modality slices (in [`Modality::ALL`] order)
    /// and, optionally, a prior channel.
    pub fn new(modalities: [Array2<f64>; 3], prior: Option<(Array2<f64>, PriorKind)>) -> Result<Self> {
        let (rows, cols) = modalities[0].dim();
        for m in &modalities[1..] {
            if m.dim() != (rows, cols) {
                return Err(Error::shape("channel stack modality", &[rows, cols], m.shape()));
            }
        }
        let c = if prior.is_some() { 4 } else { 3 };
        let mut channels = Array3::zeros((rows, cols, c));
        for (k, m) in modalities.iter().enumerate() {
            channels.index_axis_mut(Axis(2), k).assign(m);
        }
        let kind = match prior {
            Some((p, kind)) => {
                if p.dim() != (rows, cols) {
                    return Err(Error::shape("prior channel", &[rows, cols], p.shape()));
                }
                if kind == PriorKind::Absent {
                    return Err(Error::Config("a prior channel needs a non-absent kind".into()));
                }
                channels.index_axis_mut(Axis(2), 3).assign(&p);
                kind
            }
            None => PriorKind::Absent,
        };
        Ok(ChannelStack {
            channels,
            prior: kind,
        })
    }

    pub fn channels(&self) -> &Array3<f64> {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.dim().2
    }

    pub fn has_prior(&self) -> bool {
        self.prior != PriorKind::Absent
    }

    pub fn prior_kind(&self) -> PriorKind {
        self.prior
    }

    pub fn dim(&self) -> (usize, usize) {
        let (r, c, _) = self.channels.dim();
        (r, c)
    }
}

/// A 64x64 training window and its target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: Array3<f64>,
    pub target: Array2<u8>,
    pub origin: (usize, usize),
    pub prior: PriorKind,
}

/// Display palette for label overlays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    entries: [(Tissue, &'static str, u8); NUM_CLASSES],
}

impl Default for ClassPalette {
    fn default() -> Self {
        ClassPalette {
            entries: [
                (Tissue::Background, "background", 0),
                (Tissue::Csf, "CSF", 85),
                (Tissue::GrayMatter, "GM", 170),
                (Tissue::WhiteMatter, "WM", 255),
                (Tissue::BrainStem, "brain stem", 212),
                (Tissue::Cerebellum, "cerebellum", 128),
            ],
        }
    }
}

impl ClassPalette {
    pub fn gray(&self, class: u8) -> u8 {
        self.entries[class as usize].2
    }

    pub fn name(&self, class: u8) -> &'static str {
        self.entries[class as usize].1
    }

    pub fn entries(&self) -> impl Iterator<Item = (Tissue, &'static str, u8)> + '_ {
        self.entries.iter().copied()
    }
}

/// One-hot encoding `rows x cols x NUM_CLASSES`.
pub fn onehot_encode(labels: &LabelMap) -> Array3<f64> {
    let (rows, cols) = labels.dim();
    let mut out = Array3::zeros((rows, cols, NUM_CLASSES));
    for ((r, c), &v) in labels.classes.indexed_iter() {
        out[[r, c, v as usize]] = 1.0;
    }
    out
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn onehot_decode(probs: ArrayView3<'_, f64>) -> Result<LabelMap> {
    let (rows, cols, k) = probs.dim();
    if k != NUM_CLASSES {
        return Err(Error::InvalidDimension {
            dim: "classes".into(),
            reason: format!("expected {NUM_CLASSES}, got {k}"),
        });
    }
    let mut classes = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let lane = probs.slice(s![r, c, ..]);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in lane.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { index: vec![r, c, i] });
                }
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            classes[[r, c]] = best as u8;
        }
    }
    Ok(LabelMap { classes })
}

/// Min-max rescaling of one slice to `[0, 1]`; a constant slice maps to zeros.
pub fn normalize_intensity<A>(slice: ArrayView2<'_, A>) -> Array2<f64>
where
    A: Copy + Into<f64>,
{
    let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        let v: f64 = v.into();
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(slice.dim());
    }
    slice.mapv(|v| ((v.into() - lo) / range).clamp(0.0, 1.0))
}

/// Crops the 64x64 window whose top-left corner is `origin`.
pub fn extract_patch(stack: &ChannelStack, target: &LabelMap, origin: (usize, usize)) -> Result<Patch> {
    let (rows, cols) = stack.dim();
    if target.dim() != (rows, cols) {
        return Err(Error::shape("stack vs target", &[rows, cols], target.classes.shape()));
    }
    let (r0, c0) = origin;
    if r0 + PATCH_SIZE > rows || c0 + PATCH_SIZE > cols {
        return Err(Error::PatchOutOfBounds {
            row: r0,
            col: c0,
            rows,
            cols,
        });
    }
    Ok(Patch {
        data: stack
            .channels
            .slice(s![r0..r0 + PATCH_SIZE, c0..c0 + PATCH_SIZE, ..])
            .to_owned(),
        target: target
            .classes
            .slice(s![r0..r0 + PATCH_SIZE, c0..c0 + PATCH_SIZE])
            .to_owned(),
        origin,
        prior: stack.prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(rows: usize, cols: usize, seed: u64) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabelMap::new(Array2::from_shape_fn((rows, cols), |_| rng.random_range(0..NUM_CLASSES as u8))).unwrap()
    }

    fn stack_from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize, usize) -> f64) -> ChannelStack {
        let mods = [0, 1, 2].map(|k| Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c, k)));
        let prior = Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c, 3));
        ChannelStack::new(mods, Some((prior, PriorKind::OwnTruth))).unwrap()
    }

    #[test]
    fn onehot_single_pixel() {
        let l = LabelMap::new(array![[2u8]]).unwrap();
        let e = onehot_encode(&l);
        assert_eq!(e.slice(s![0, 0, ..]).to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn onehot_all_background() {
        let e = onehot_encode(&LabelMap::background(4, 4));
        assert!(e.index_axis(Axis(2), 0).iter().all(|&v| v == 1.0));
        for k in 1..NUM_CLASSES {
            assert!(e.index_axis(Axis(2), k).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn onehot_matches_direct_loop() {
        let l = random_labels(8, 8, 3);
        let e = onehot_encode(&l);
        for r in 0..8 {
            for c in 0..8 {
                for k in 0..NUM_CLASSES {
                    let want = if l.get(r, c) as usize == k { 1.0 } else { 0.0 };
                    assert_eq!(e[[r, c, k]], want);
                }
            }
        }
        assert_eq!(onehot_decode(e.view()).unwrap(), l);
    }

    #[test]
    fn invalid_label_reports_pixel() {
        let err = LabelMap::new(array![[0u8, 1], [6, 2]]).unwrap_err();
        match err {
            Error::InvalidLabel { row, col, value } => assert_eq!((row, col, value), (1, 0, 6)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn decode_argmax_and_ties() {
        let mut p = Array3::zeros((1, 2, NUM_CLASSES));
        p.slice_mut(s![0, 0, ..]).assign(&array![0.2, 0.2, 0.6, 0.0, 0.0, 0.0]);
        p.slice_mut(s![0, 1, ..]).assign(&array![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let l = onehot_decode(p.view()).unwrap();
        assert_eq!(l.get(0, 0), 2);
        assert_eq!(l.get(0, 1), 0);
    }

    #[test]
    fn decode_rejects_nan() {
        let mut p = Array3::zeros((2, 2, NUM_CLASSES));
        p[[1, 0, 3]] = f64::NAN;
        assert!(matches!(onehot_decode(p.view()), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn normalize_linear_and_constant() {
        let n = normalize_intensity(array![[0.0f64, 50.0, 100.0]].view());
        assert_eq!(n, array![[0.0, 0.5, 1.0]]);
        let c = normalize_intensity(Array2::from_elem((3, 3), 7.3f32).view());
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_whole_slice_and_offsets() {
        let st = stack_from_fn(64, 64, |r, c, k| (r * 1000 + c * 10 + k) as f64);
        let tgt = random_labels(64, 64, 1);
        let p = extract_patch(&st, &tgt, (0, 0)).unwrap();
        assert_eq!(&p.data, st.channels());
        assert_eq!(&p.target, tgt.classes());

        let st = stack_from_fn(128, 128, |r, c, k| (r * 1000 + c * 10 + k) as f64);
        let tgt = random_labels(128, 128, 2);
        let p = extract_patch(&st, &tgt, (10, 20)).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                for k in 0..4 {
                    assert_eq!(p.data[[r, c, k]], st.channels()[[10 + r, 20 + c, k]]);
                }
                assert_eq!(p.target[[r, c]], tgt.get(10 + r, 20 + c));
            }
        }
        assert_eq!(p.origin, (10, 20));
        assert!(matches!(
            extract_patch(&st, &tgt, (100, 100)),
            Err(Error::PatchOutOfBounds { .. })
        ));
    }

    #[test]
    fn patch_tiling_reconstructs_slice() {
        let st = stack_from_fn(128, 192, |r, c, k| ((r * 7 + c * 13 + k) % 17) as f64);
        let tgt = random_labels(128, 192, 9);
        let mut rebuilt = Array3::<f64>::from_elem((128, 192, 4), -1.0);
        let mut labels = Array2::<u8>::from_elem((128, 192), 255);
        for r0 in (0..128).step_by(64) {
            for c0 in (0..192).step_by(64) {
                let p = extract_patch(&st, &tgt, (r0, c0)).unwrap();
                rebuilt.slice_mut(s![r0..r0 + 64, c0..c0 + 64, ..]).assign(&p.data);
                labels.slice_mut(s![r0..r0 + 64, c0..c0 + 64]).assign(&p.target);
            }
        }
        assert_eq!(&rebuilt, st.channels());
        assert_eq!(&labels, tgt.classes());
    }

    #[test]
    fn palette_is_distinct() {
        let p = ClassPalette::default();
        let mut names: Vec<_> = p.entries().map(|e| e.1).collect();
        let mut grays: Vec<_> = p.entries().map(|e| e.2).collect();
        names.sort();
        names.dedup();
        grays.sort();
        grays.dedup();
        assert_eq!(names.len(), NUM_CLASSES);
        assert_eq!(grays.len(), NUM_CLASSES);
        assert_eq!(p.gray(Tissue::Background as u8), 0);
        assert_eq!(p.gray(Tissue::WhiteMatter as u8), 255);
        assert!(p.gray(Tissue::Csf as u8) < p.gray(Tissue::GrayMatter as u8));
    }

    #[test]
    fn volume_rejects_mismatched_modalities() {
        let mut m = BTreeMap::new();
        m.insert(Modality::T1, Array3::zeros((2, 4, 4)));
        m.insert(Modality::T1IR, Array3::zeros((2, 4, 3)));
        m.insert(Modality::T2FLAIR, Array3::zeros((2, 4, 4)));
        assert!(matches!(
            Volume::new("x", m, None, [1.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn onehot_roundtrip(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            let l = random_labels(rows, cols, seed);
            let e = onehot_encode(&l);
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert_eq!(e.slice(s![r, c, ..]).sum(), 1.0);
                }
            }
            prop_assert_eq!(onehot_decode(e.view()).unwrap(), l);
        }

        #[test]
        fn normalize_bounds_and_idempotent(vals in proptest::collection::vec(-1e3f64..1e3, 16)) {
            let a = Array2::from_shape_vec((4, 4), vals).unwrap();
            let n = normalize_intensity(a.view());
            let lo = n.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if n.iter().any(|&v| v != 0.0) {
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
            let nn = normalize_intensity(n.view());
            prop_assert_eq!(nn, n);
        }
    }
}
