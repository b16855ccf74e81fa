//! Deterministic synthetic head phantoms.
//!
//! Every subject is a seed-dependent warp of one shared template: concentric
//! CSF / cortical GM / WM shells with a folded GM-WM boundary, ventricles in
//! the WM core, and separate brain-stem and cerebellum blobs on inferior
//! slices. The warp combines a small in-plane pose change with a smooth
//! low-frequency displacement field, so different seeds give distinct but
//! anatomically similar subjects.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, Tissue, Volume, NUM_CLASSES};

/// Template geometry in normalized in-plane coordinates (`[-1, 1]` across
/// the field of view) and normalized slice coordinate `w` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomGeometry {
    /// Cerebrum semi-axes `[vertical, horizontal]` at the widest slice.
    pub brain_radii: [f64; 2],
    /// Relative radius where the outer CSF layer starts.
    pub csf_inner: f64,
    /// Relative radius where the cortical ribbon starts.
    pub gm_inner: f64,
    /// Amplitude and angular frequency of the folded GM/WM boundary.
    pub gyral_amplitude: f64,
    pub gyral_frequency: f64,
    /// Horizontal offset and `[vertical, horizontal]` semi-axes of the two ventricles.
    pub ventricle_offset: f64,
    pub ventricle_radii: [f64; 2],
    pub stem_center: f64,
    pub stem_radius: f64,
    pub cerebellum_center: f64,
    pub cerebellum_radii: [f64; 2],
    /// Folia bands per cerebellar radius; cerebellum pixels then alternate
    /// between GM and WM intensities. Zero uses the cerebellum table entry.
    pub folia_frequency: f64,
    /// Half-extent of the cerebrum along the slice axis `[inferior, superior]`,
    /// in units of the volume half-depth.
    pub cerebrum_extent: [f64; 2],
    /// Render the brain stem with WM intensities instead of its own entry.
    pub stem_looks_like_wm: bool,
}

impl Default for PhantomGeometry {
    fn default() -> Self {
        PhantomGeometry {
            brain_radii: [0.80, 0.70],
            csf_inner: 0.86,
            gm_inner: 0.64,
            gyral_amplitude: 0.07,
            gyral_frequency: 11.0,
            ventricle_offset: 0.12,
            ventricle_radii: [0.24, 0.07],
            stem_center: 0.12,
            stem_radius: 0.12,
            cerebellum_center: 0.50,
            cerebellum_radii: [0.28, 0.50],
            folia_frequency: 3.0,
            cerebrum_extent: [1.35, 1.1],
            stem_looks_like_wm: true,
        }
    }
}

/// Mean intensity of each class, per modality, indexed by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityTable {
    pub t1: [f64; NUM_CLASSES],
    pub t1ir: [f64; NUM_CLASSES],
    pub t2flair: [f64; NUM_CLASSES],
}

impl Default for IntensityTable {
    fn default() -> Self {
        // Cerebellum and brain stem sit close to WM, as on real scans.
        IntensityTable {
            t1: [0.0, 40.0, 80.0, 120.0, 108.0, 114.0],
            t1ir: [0.0, 20.0, 70.0, 120.0, 110.0, 116.0],
            t2flair: [0.0, 25.0, 95.0, 70.0, 78.0, 74.0],
        }
    }
}

impl IntensityTable {
    pub fn get(&self, m: Modality) -> &[f64; NUM_CLASSES] {
        match m {
            Modality::T1 => &self.t1,
            Modality::T1IR => &self.t1ir,
            Modality::T2FLAIR => &self.t2flair,
        }
    }
}

/// Bounds of the per-subject in-plane pose change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseJitter {
    pub max_rotation_deg: f64,
    pub max_shift_px: f64,
    pub max_scale: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        PoseJitter {
            max_rotation_deg: 6.0,
            max_shift_px: 4.0,
            max_scale: 0.02,
        }
    }
}

impl PoseJitter {
    pub fn none() -> Self {
        PoseJitter {
            max_rotation_deg: 0.0,
            max_shift_px: 0.0,
            max_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[slices, rows, cols]`.
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub geometry: PhantomGeometry,
    pub intensities: IntensityTable,
    /// Standard deviation of additive noise, in intensity units.
    pub noise_std: f64,
    /// Peak amplitude of the smooth displacement field, in pixels.
    pub deformation: f64,
    /// Peak relative amplitude of the smooth multiplicative intensity bias.
    pub bias_field: f64,
    pub pose: PoseJitter,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            shape: [16, 128, 128],
            spacing_mm: [3.0, 0.958, 0.958],
            geometry: PhantomGeometry::default(),
            intensities: IntensityTable::default(),
            noise_std: 40.0,
            deformation: 2.0,
            bias_field: 0.0,
            pose: PoseJitter::default(),
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        let [slices, rows, cols] = self.shape;
        if slices == 0 || rows < 64 || cols < 64 {
            return Err(Error::Phantom(format!(
                "shape {:?} needs at least one slice and 64 pixels in-plane",
                self.shape
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Phantom(format!("noise std {} must be >= 0", self.noise_std)));
        }
        if !(self.deformation >= 0.0) || !self.deformation.is_finite() {
            return Err(Error::Phantom(format!("deformation {} must be >= 0", self.deformation)));
        }
        if !(0.0..1.0).contains(&self.bias_field) {
            return Err(Error::Phantom(format!("bias field {} must lie in [0, 1)", self.bias_field)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Phantom(format!("spacing {:?} must be positive", self.spacing_mm)));
        }
        let p = &self.pose;
        if p.max_rotation_deg < 0.0 || p.max_shift_px < 0.0 || !(0.0..0.5).contains(&p.max_scale) {
            return Err(Error::Phantom("pose jitter bounds must be non-negative (scale < 0.5)".into()));
        }
        let g = &self.geometry;
        if !(0.0 < g.gm_inner && g.gm_inner < g.csf_inner && g.csf_inner < 1.0) {
            return Err(Error::Phantom(format!(
                "shell radii must satisfy 0 < gm_inner ({}) < csf_inner ({}) < 1",
                g.gm_inner, g.csf_inner
            )));
        }
        if g.cerebrum_extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Phantom(format!("cerebrum extent {:?} must be positive", g.cerebrum_extent)));
        }
        if g.gyral_amplitude < 0.0 || g.gyral_amplitude >= (g.csf_inner - g.gm_inner).min(g.gm_inner) {
            return Err(Error::Phantom("folding amplitude crosses a neighbouring shell".into()));
        }
        let core = g.gm_inner - g.gyral_amplitude;
        let vent_extent = (g.ventricle_offset + g.ventricle_radii[1]) / g.brain_radii[1];
        let vent_vertical = g.ventricle_radii[0] / g.brain_radii[0];
        if vent_extent >= core || vent_vertical >= core {
            return Err(Error::Phantom("ventricles reach outside the white-matter core".into()));
        }
        let half = rows.min(cols) as f64 / 2.0;
        let margin = (p.max_shift_px + self.deformation) / half;
        let reach = g
            .brain_radii
            .iter()
            .chain(g.cerebellum_radii.iter())
            .fold(0.0f64, |a, &b| a.max(b))
            .max(g.cerebellum_center + g.cerebellum_radii[0]);
        if g.brain_radii.iter().any(|&r| !(r > 0.0)) || reach * (1.0 + p.max_scale) + margin >= 1.0 {
            return Err(Error::Phantom("anatomy does not fit inside the field of view".into()));
        }
        Ok(())
    }
}

/// One sinusoidal component of the displacement field.
struct Wave {
    amp: f64,
    freq: [f64; 3],
    phase: f64,
}

struct SubjectWarp {
    cos: f64,
    sin: f64,
    scale: f64,
    shift: [f64; 2],
    waves: [Vec<Wave>; 2],
}

impl SubjectWarp {
    fn draw(spec: &PhantomSpec, rng: &mut ChaCha8Rng, half: f64) -> Self {
        let p = &spec.pose;
        let mut sym = |bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        let theta = sym(p.max_rotation_deg).to_radians();
        let scale = 1.0 + sym(p.max_scale);
        let shift = [sym(p.max_shift_px) / half, sym(p.max_shift_px) / half];
        let amp = spec.deformation / half;
        let waves = [0, 1].map(|_| {
            (0..3)
                .map(|_| Wave {
                    amp: amp / 3.0 * rng.random_range(0.5..=1.0),
                    freq: [
                        rng.random_range(-0.6..=0.6),
                        rng.random_range(-0.6..=0.6),
                        rng.random_range(-0.4..=0.4),
                    ],
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect()
        });
        SubjectWarp {
            cos: theta.cos(),
            sin: theta.sin(),
            scale,
            shift,
            waves,
        }
    }

    /// Maps subject coordinates `(v, u)` on slice `w` into template space.
    fn to_template(&self, v: f64, u: f64, w: f64) -> (f64, f64) {
        let (v, u) = (v - self.shift[0], u - self.shift[1]);
        let (v, u) = (
            (self.cos * v + self.sin * u) / self.scale,
            (-self.sin * v + self.cos * u) / self.scale,
        );
        let disp = |waves: &[Wave]| -> f64 {
            waves
                .iter()
                .map(|k| k.amp * (2.0 * PI * (k.freq[0] * v + k.freq[1] * u + k.freq[2] * w) + k.phase).sin())
                .sum()
        };
        (v + disp(&self.waves[0]), u + disp(&self.waves[1]))
    }
}

fn ellipse(v: f64, u: f64, cv: f64, cu: f64, rv: f64, ru: f64) -> f64 {
    ((v - cv) / rv).powi(2) + ((u - cu) / ru).powi(2)
}

/// Label at a template point and the class whose intensities it shows.
fn template_tissue(g: &PhantomGeometry, v: f64, u: f64, w: f64) -> (Tissue, Tissue) {
    if w < 0.15 && ellipse(v, u, g.stem_center, 0.0, g.stem_radius, g.stem_radius) <= 1.0 {
        let look = if g.stem_looks_like_wm { Tissue::WhiteMatter } else { Tissue::BrainStem };
        return (Tissue::BrainStem, look);
    }
    let cb_profile = 1.0 - ((w + 0.75) / 0.6).powi(2);
    if w < -0.15 && cb_profile > 0.0 {
        let s = cb_profile.sqrt();
        let [rv, ru] = g.cerebellum_radii;
        let e = ellipse(v, u, g.cerebellum_center, 0.0, rv * s, ru * s);
        if e <= 1.0 {
            if g.folia_frequency <= 0.0 {
                return (Tissue::Cerebellum, Tissue::Cerebellum);
            }
            let band = (2.0 * PI * g.folia_frequency * e.sqrt()).cos();
            let look = if band > 0.0 { Tissue::GrayMatter } else { Tissue::WhiteMatter };
            return (Tissue::Cerebellum, look);
        }
    }
    let t = template_label(g, v, u, w);
    (t, t)
}

fn template_label(g: &PhantomGeometry, v: f64, u: f64, w: f64) -> Tissue {
    let extent = if w < 0.0 { g.cerebrum_extent[0] } else { g.cerebrum_extent[1] };
    let profile = 1.0 - (w / extent).powi(2);
    if profile <= 0.0 {
        return Tissue::Background;
    }
    let s = profile.sqrt();
    let rho = ellipse(v, u, 0.0, 0.0, g.brain_radii[0] * s, g.brain_radii[1] * s).sqrt();
    if rho > 1.0 {
        return Tissue::Background;
    }
    if rho > g.csf_inner {
        return Tissue::Csf;
    }
    let angle = v.atan2(u);
    if rho > g.gm_inner + g.gyral_amplitude * (g.gyral_frequency * angle).sin() {
        return Tissue::GrayMatter;
    }
    let vent = 1.0 - (w / 0.45).powi(2);
    if vent > 0.0 {
        let vs = vent.sqrt();
        let [rv, ru] = g.ventricle_radii;
        for cu in [-g.ventricle_offset, g.ventricle_offset] {
            if ellipse(v, u, -0.05, cu * s, rv * vs * s, ru * vs * s) <= 1.0 {
                return Tissue::Csf;
            }
        }
    }
    Tissue::WhiteMatter
}

/// Smooth gain field around 1, shared by all modalities of one subject.
fn bias_field(spec: &PhantomSpec, half: f64) -> Array3<f64> {
    let [slices, rows, cols] = spec.shape;
    if spec.bias_field == 0.0 {
        return Array3::ones((slices, rows, cols));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(16);
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            amp: rng.random_range(0.5..=1.0),
            freq: [
                rng.random_range(-0.35..=0.35),
                rng.random_range(-0.35..=0.35),
                rng.random_range(-0.2..=0.2),
            ],
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let norm: f64 = waves.iter().map(|k| k.amp).sum();
    Array3::from_shape_fn((slices, rows, cols), |(z, r, c)| {
        let w = -1.0 + 2.0 * (z as f64 + 0.5) / slices as f64;
        let v = (r as f64 + 0.5 - rows as f64 / 2.0) / half;
        let u = (c as f64 + 0.5 - cols as f64 / 2.0) / half;
        let s: f64 = waves
            .iter()
            .map(|k| k.amp * (2.0 * PI * (k.freq[0] * v + k.freq[1] * u + k.freq[2] * w) + k.phase).sin())
            .sum();
        1.0 + spec.bias_field * s / norm
    })
}

/// Builds the labeled phantom described by `spec`; a pure function of it.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let [slices, rows, cols] = spec.shape;
    let half = rows.min(cols) as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let warp = SubjectWarp::draw(spec, &mut rng, half);

    let tissue = Array3::from_shape_fn((slices, rows, cols), |(z, r, c)| {
        let w = -1.0 + 2.0 * (z as f64 + 0.5) / slices as f64;
        let v = (r as f64 + 0.5 - rows as f64 / 2.0) / half;
        let u = (c as f64 + 0.5 - cols as f64 / 2.0) / half;
        let (tv, tu) = warp.to_template(v, u, w);
        template_tissue(&spec.geometry, tv, tu, w)
    });
    let labels = tissue.mapv(|(t, _)| t as u8);
    let looks = tissue.mapv(|(_, a)| a as usize);
    let bias = bias_field(spec, half);

    let mut modalities = BTreeMap::new();
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let table = spec.intensities.get(m);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        noise_rng.set_stream(k as u64 + 1);
        let data = if spec.noise_std > 0.0 {
            let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
            Array3::from_shape_fn(looks.dim(), |i| {
                (table[looks[i]] * bias[i] + normal.sample(&mut noise_rng)).abs() as f32
            })
        } else {
            Array3::from_shape_fn(looks.dim(), |i| (table[looks[i]] * bias[i]) as f32)
        };
        modalities.insert(m, data);
    }
    let id = format!("phantom{:03}", spec.seed);
    Volume::new(id, modalities, Some(labels), spec.spacing_mm)
}
