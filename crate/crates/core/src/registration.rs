//! Rigid 2D registration of a retrieved slice onto a query slice, the L1
//! overlap similarity, and the gate that decides whether the retrieved
//! labels become the prior channel.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelMap;
use crate::retrieval::SliceKey;

/// Rotation about the image centre followed by a translation.
///
/// Warping `moving` by a transform samples it at
/// `R(rotation) * (p - centre) + centre + translation` for every output
/// pixel `p = (row, col)`, so a positive translation pulls content from
/// larger coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    /// Radians, kept in `(-pi, pi]`.
    pub rotation: f64,
    /// `(rows, cols)` in pixels.
    pub translation: (f64, f64),
}

impl Default for RigidTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl RigidTransform2D {
    pub fn identity() -> Self {
        RigidTransform2D {
            rotation: 0.0,
            translation: (0.0, 0.0),
        }
    }

    pub fn new(rotation: f64, translation: (f64, f64)) -> Self {
        RigidTransform2D {
            rotation: wrap_angle(rotation),
            translation,
        }
    }

    pub fn from_degrees(degrees: f64, translation: (f64, f64)) -> Self {
        Self::new(degrees.to_radians(), translation)
    }

    pub fn rotation_degrees(&self) -> f64 {
        self.rotation.to_degrees()
    }

    /// Source coordinate sampled for output pixel `(r, c)`.
    fn source(&self, r: f64, c: f64, center: (f64, f64)) -> (f64, f64) {
        let (s, co) = self.rotation.sin_cos();
        let (dr, dc) = (r - center.0, c - center.1);
        (
            co * dr - s * dc + center.0 + self.translation.0,
            s * dr + co * dc + center.1 + self.translation.1,
        )
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.rotation).sin_cos();
        let (tr, tc) = self.translation;
        RigidTransform2D::new(-self.rotation, (-(c * tr - s * tc), -(s * tr + c * tc)))
    }
}

fn center_of(rows: usize, cols: usize) -> (f64, f64) {
    ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0)
}

#[inline]
fn bilinear(img: &ArrayView2<'_, f64>, y: f64, x: f64) -> f64 {
    let (rows, cols) = img.dim();
    if !(y >= 0.0 && x >= 0.0 && y <= (rows - 1) as f64 && x <= (cols - 1) as f64) {
        return 0.0;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let y1 = (y0 + 1).min(rows - 1);
    let x1 = (x0 + 1).min(cols - 1);
    let top = if fx == 0.0 { img[[y0, x0]] } else { img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 { img[[y1, x0]] } else { img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx };
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resampling of `moving`; pixels mapped outside the frame are 0.
pub fn warp_image(moving: ArrayView2<'_, f64>, transform: &RigidTransform2D) -> Array2<f64> {
    let (rows, cols) = moving.dim();
    let center = center_of(rows, cols);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (y, x) = transform.source(r as f64, c as f64, center);
        bilinear(&moving, y, x)
    })
}

/// Nearest-neighbour resampling of a label map; outside the frame is background.
pub fn warp_labels(labels: &LabelMap, transform: &RigidTransform2D) -> LabelMap {
    let (rows, cols) = labels.dim();
    let center = center_of(rows, cols);
    let src = labels.classes();
    let out = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (y, x) = transform.source(r as f64, c as f64, center);
        let (yi, xi) = ((y + 0.5).floor(), (x + 0.5).floor());
        if yi < 0.0 || xi < 0.0 || yi >= rows as f64 || xi >= cols as f64 {
            0
        } else {
            src[[yi as usize, xi as usize]]
        }
    });
    LabelMap::new(out).expect("resampling preserves the label set")
}

/// `S(A, B) = 1 - |A - B|_1 / |A + B|_1`, with `S = 1` when both images are empty.
pub fn similarity(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("similarity inputs", a.shape(), b.shape()));
    }
    let mut diff = 0.0;
    let mut sum = 0.0;
    for ((idx, &x), &y) in a.indexed_iter().zip(b.iter()) {
        if x < 0.0 || y < 0.0 || !x.is_finite() || !y.is_finite() {
            let value = if x < 0.0 || !x.is_finite() { x } else { y };
            return Err(Error::NegativeValue {
                index: vec![idx.0, idx.1],
                value,
            });
        }
        diff += (x - y).abs();
        sum += x + y;
    }
    if sum == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - diff / sum)
}

/// Similarity of `fixed` against `moving` warped by `transform`, without
/// materialising the warped image.
fn warped_similarity(fixed: &ArrayView2<'_, f64>, moving: &ArrayView2<'_, f64>, t: &RigidTransform2D) -> f64 {
    let (rows, cols) = fixed.dim();
    let center = center_of(rows, cols);
    let (s, co) = t.rotation.sin_cos();
    let mut diff = 0.0;
    let mut sum = 0.0;
    for r in 0..rows {
        let dr = r as f64 - center.0;
        let base_y = co * dr + center.0 + t.translation.0;
        let base_x = s * dr + center.1 + t.translation.1;
        for c in 0..cols {
            let dc = c as f64 - center.1;
            let m = bilinear(moving, base_y - s * dc, base_x + co * dc);
            let f = fixed[[r, c]];
            diff += (f - m).abs();
            sum += f + m;
        }
    }
    if sum == 0.0 {
        1.0
    } else {
        1.0 - diff / sum
    }
}

/// Coarse-to-fine search bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Pyramid levels, coarsest first in the search.
    pub levels: usize,
    /// Exhaustive grid at the coarsest level, in full-resolution pixels and degrees.
    pub max_translation_px: f64,
    pub translation_step_px: f64,
    pub max_rotation_deg: f64,
    pub rotation_step_deg: f64,
    /// Finer levels search `incumbent +/- refine_steps * step` with halved steps.
    pub refine_steps: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            max_translation_px: 16.0,
            translation_step_px: 2.0,
            max_rotation_deg: 15.0,
            rotation_step_deg: 3.0,
            refine_steps: 2,
        }
    }
}

fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = img.dim();
    Array2::from_shape_fn((rows / 2, cols / 2), |(r, c)| {
        0.25 * (img[[2 * r, 2 * c]] + img[[2 * r + 1, 2 * c]] + img[[2 * r, 2 * c + 1]] + img[[2 * r + 1, 2 * c + 1]])
    })
}

fn pyramid(img: ArrayView2<'_, f64>, levels: usize) -> Vec<Array2<f64>> {
    let mut out = vec![img.to_owned()];
    for _ in 1..levels {
        let last = out.last().expect("non-empty");
        if last.nrows() < 16 || last.ncols() < 16 {
            break;
        }
        out.push(downsample(last));
    }
    out
}

/// Candidate parameters: `(degrees, dr, dc)` in full-resolution units.
type Params = (f64, f64, f64);

fn steps(center: f64, radius: f64, step: f64) -> Vec<f64> {
    let n = (radius / step + 1e-9).floor() as i64;
    (-n..=n).map(|k| center + k as f64 * step).collect()
}

fn magnitude(p: &Params) -> f64 {
    p.0.abs() + p.1.abs() + p.2.abs()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform2D,
    pub warped: Array2<f64>,
    pub similarity: f64,
}

/// Finds the rigid transform maximizing [`similarity`] between `fixed` and
/// the warped `moving` image.
pub fn register(fixed: ArrayView2<'_, f64>, moving: ArrayView2<'_, f64>, config: &RegistrationConfig) -> Result<Registration> {
    if fixed.dim() != moving.dim() {
        return Err(Error::shape("registration inputs", fixed.shape(), moving.shape()));
    }
    let identity_sim = similarity(fixed, moving)?;
    let degenerate = fixed.iter().all(|&v| v == 0.0) || moving.iter().all(|&v| v == 0.0);
    if degenerate || config.levels == 0 {
        return Ok(Registration {
            transform: RigidTransform2D::identity(),
            warped: moving.to_owned(),
            similarity: identity_sim,
        });
    }
    let fixed_pyr = pyramid(fixed, config.levels);
    let moving_pyr = pyramid(moving, config.levels);
    let coarsest = fixed_pyr.len() - 1;

    let evaluate = |level: usize, p: &Params| -> f64 {
        let scale = (1usize << level) as f64;
        let t = RigidTransform2D::from_degrees(p.0, (p.1 / scale, p.2 / scale));
        warped_similarity(&fixed_pyr[level].view(), &moving_pyr[level].view(), &t)
    };
    let mut best: Params = (0.0, 0.0, 0.0);
    let mut best_s = f64::NEG_INFINITY;
    let consider = |p: Params, s: f64, best: &mut Params, best_s: &mut f64| {
        if s > *best_s || (s == *best_s && magnitude(&p) < magnitude(best)) {
            *best = p;
            *best_s = s;
        }
    };

    let mut t_step = config.translation_step_px;
    let mut r_step = config.rotation_step_deg;
    for angle in steps(0.0, config.max_rotation_deg, r_step) {
        for dr in steps(0.0, config.max_translation_px, t_step) {
            for dc in steps(0.0, config.max_translation_px, t_step) {
                let p = (angle, dr, dc);
                let s = evaluate(coarsest, &p);
                consider(p, s, &mut best, &mut best_s);
            }
        }
    }
    for level in (0..coarsest).rev() {
        t_step /= 2.0;
        r_step /= 2.0;
        let incumbent = best;
        best_s = f64::NEG_INFINITY;
        let k = config.refine_steps as f64;
        for angle in steps(incumbent.0, k * r_step, r_step) {
            for dr in steps(incumbent.1, k * t_step, t_step) {
                for dc in steps(incumbent.2, k * t_step, t_step) {
                    let p = (angle, dr, dc);
                    let s = evaluate(level, &p);
                    consider(p, s, &mut best, &mut best_s);
                }
            }
        }
    }
    let mut transform = RigidTransform2D::from_degrees(best.0, (best.1, best.2));
    let mut warped = warp_image(moving, &transform);
    let mut sim = similarity(fixed, warped.view())?;
    if sim < identity_sim {
        transform = RigidTransform2D::identity();
        warped = moving.to_owned();
        sim = identity_sim;
    }
    Ok(Registration {
        transform,
        warped,
        similarity: sim,
    })
}

/// A retrieved database slice (normalized image and labels).
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedSlice {
    pub source: SliceKey,
    pub image: Array2<f64>,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub use_prior: bool,
    pub similarity: f64,
    pub transform: RigidTransform2D,
    pub matched_source: SliceKey,
    /// Present exactly when `use_prior` is set.
    pub warped_prior: Option<LabelMap>,
}

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.70;

/// Registers the retrieved slice to the query and accepts its labels as a
/// prior when the post-registration similarity exceeds `threshold`.
pub fn gate_fourth_channel(
    query: ArrayView2<'_, f64>,
    retrieved: &RetrievedSlice,
    threshold: f64,
    config: &RegistrationConfig,
) -> Result<GateDecision> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("gate threshold {threshold} is outside [0, 1]")));
    }
    if retrieved.labels.dim() != retrieved.image.dim() {
        return Err(Error::shape("retrieved image vs labels", retrieved.image.shape(), retrieved.labels.classes().shape()));
    }
    let reg = register(query, retrieved.image.view(), config)?;
    Ok(decide(reg.similarity, reg.transform, retrieved, threshold))
}

fn decide(similarity: f64, transform: RigidTransform2D, retrieved: &RetrievedSlice, threshold: f64) -> GateDecision {
    let use_prior = similarity > threshold;
    GateDecision {
        use_prior,
        similarity,
        transform,
        matched_source: retrieved.source.clone(),
        warped_prior: use_prior.then(|| warp_labels(&retrieved.labels, &transform)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_phantom, PhantomSpec};
    use crate::model::{normalize_intensity, Modality};
    use ndarray::array;
    use proptest::prelude::*;

    fn phantom_slice(seed: u64, z: usize) -> (Array2<f64>, LabelMap) {
        let spec = PhantomSpec {
            seed,
            shape: [8, 96, 96],
            ..Default::default()
        };
        let v = generate_phantom(&spec).unwrap();
        (normalize_intensity(v.slice(Modality::T1, z)), v.label_slice(z).unwrap())
    }

    fn retrieved(image: Array2<f64>, labels: LabelMap) -> RetrievedSlice {
        RetrievedSlice {
            source: SliceKey::new("db", 0),
            image,
            labels,
        }
    }

    #[test]
    fn similarity_reference_values() {
        let a = array![[0.3, 0.7], [0.0, 1.0]];
        assert_eq!(similarity(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(similarity(a.view(), Array2::zeros((2, 2)).view()).unwrap(), 0.0);
        let s = similarity(array![[2.0]].view(), array![[1.0]].view()).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(similarity(z.view(), z.view()).unwrap(), 1.0);
    }

    #[test]
    fn similarity_errors() {
        assert!(matches!(
            similarity(array![[1.0, 2.0]].view(), array![[1.0]].view()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            similarity(array![[1.0, -2.0]].view(), array![[1.0, 1.0]].view()),
            Err(Error::NegativeValue { .. })
        ));
    }

    #[test]
    fn identity_registration_of_itself() {
        let (img, _) = phantom_slice(1, 4);
        let reg = register(img.view(), img.view(), &RegistrationConfig::default()).unwrap();
        assert_eq!(reg.transform, RigidTransform2D::identity());
        assert_eq!(reg.similarity, 1.0);
    }

    #[test]
    fn recovers_translation() {
        let (img, _) = phantom_slice(2, 4);
        let shift = RigidTransform2D::new(0.0, (-3.0, 2.0));
        let moving = warp_image(img.view(), &shift);
        let reg = register(img.view(), moving.view(), &RegistrationConfig::default()).unwrap();
        let want = shift.inverse();
        assert!((reg.transform.translation.0 - want.translation.0).abs() <= 1.0, "{:?}", reg.transform);
        assert!((reg.transform.translation.1 - want.translation.1).abs() <= 1.0, "{:?}", reg.transform);
        assert!(reg.transform.rotation_degrees().abs() <= 2.0);
        assert_eq!(want.translation, (3.0, -2.0));
    }

    #[test]
    fn never_worse_than_identity() {
        for (a, b) in [(1, 2), (3, 4), (5, 8)] {
            let (fixed, _) = phantom_slice(a, 3);
            let (moving, _) = phantom_slice(b, 3);
            let before = similarity(fixed.view(), moving.view()).unwrap();
            let reg = register(fixed.view(), moving.view(), &RegistrationConfig::default()).unwrap();
            assert!(reg.similarity >= before - 1e-9);
            assert_eq!(reg.similarity, similarity(fixed.view(), reg.warped.view()).unwrap());
        }
    }

    #[test]
    fn degenerate_input_returns_identity() {
        let (img, _) = phantom_slice(1, 4);
        let zero = Array2::zeros(img.dim());
        let reg = register(img.view(), zero.view(), &RegistrationConfig::default()).unwrap();
        assert_eq!(reg.transform, RigidTransform2D::identity());
        assert_eq!(reg.similarity, 0.0);
        let reg = register(zero.view(), zero.view(), &RegistrationConfig::default()).unwrap();
        assert_eq!(reg.similarity, 1.0);
    }

    #[test]
    fn warp_labels_identity_and_shift() {
        let (_, labels) = phantom_slice(3, 2);
        assert_eq!(warp_labels(&labels, &RigidTransform2D::identity()), labels);
        let shifted = warp_labels(&labels, &RigidTransform2D::new(0.0, (5.0, 0.0)));
        let (rows, cols) = labels.dim();
        for r in 0..rows {
            for c in 0..cols {
                let want = if r + 5 < rows { labels.get(r + 5, c) } else { 0 };
                assert_eq!(shifted.get(r, c), want);
            }
        }
        let rotated = warp_labels(&labels, &RigidTransform2D::from_degrees(17.0, (1.3, -2.2)));
        assert!(rotated.classes().iter().all(|&v| v < 6));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform2D::from_degrees(8.0, (2.5, -4.0));
        let inv = t.inverse();
        let c = (47.5, 47.5);
        let (y, x) = t.source(10.0, 20.0, c);
        let (y2, x2) = inv.source(y, x, c);
        assert!((y2 - 10.0).abs() < 1e-9 && (x2 - 20.0).abs() < 1e-9);
    }

    #[test]
    fn gate_threshold_logic() {
        let (img, labels) = phantom_slice(4, 4);
        let r = retrieved(img.clone(), labels.clone());
        let d = decide(0.85, RigidTransform2D::identity(), &r, 0.70);
        assert!(d.use_prior && d.warped_prior.is_some());
        let d = decide(0.60, RigidTransform2D::identity(), &r, 0.70);
        assert!(!d.use_prior && d.warped_prior.is_none());

        let d = gate_fourth_channel(img.view(), &r, 0.99, &RegistrationConfig::default()).unwrap();
        assert!(d.use_prior);
        assert_eq!(d.similarity, 1.0);
        assert_eq!(d.warped_prior.unwrap(), labels);

        let d = gate_fourth_channel(img.view(), &r, 1.0, &RegistrationConfig::default()).unwrap();
        assert!(!d.use_prior);
        assert!(gate_fourth_channel(img.view(), &r, 1.5, &RegistrationConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn similarity_properties(
            a in proptest::collection::vec(0.0f64..10.0, 12),
            b in proptest::collection::vec(0.0f64..10.0, 12),
            c in 0.01f64..100.0,
        ) {
            let a = Array2::from_shape_vec((3, 4), a).unwrap();
            let b = Array2::from_shape_vec((3, 4), b).unwrap();
            let s = similarity(a.view(), b.view()).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, similarity(b.view(), a.view()).unwrap());
            prop_assert_eq!(similarity(a.view(), a.view()).unwrap(), 1.0);
            let ca = a.mapv(|v| v * c);
            prop_assert_eq!(similarity(ca.view(), ca.view()).unwrap(), 1.0);
        }

        #[test]
        fn gate_invariant(threshold in 0.0f64..=1.0, sim in 0.0f64..=1.0) {
            let r = retrieved(Array2::zeros((4, 4)), LabelMap::background(4, 4));
            let d = decide(sim, RigidTransform2D::identity(), &r, threshold);
            prop_assert_eq!(d.use_prior, sim > threshold);
            prop_assert_eq!(d.warped_prior.is_some(), d.use_prior);
        }
    }
}
