//! Volume storage, subject manifests, train/test splits and synthetic
//! phantoms.

mod phantom;
pub mod rawfile;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, Volume};
use rawfile::{read_raw, write_raw, DType, RawHeader};

pub use phantom::{generate_phantom, IntensityTable, PhantomGeometry, PhantomSpec, PoseJitter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where one subject's files live.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectManifest {
    pub subject_id: String,
    pub modalities: BTreeMap<Modality, PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    subjects: Vec<SubjectManifest>,
}

fn read_modality(path: &Path) -> Result<(RawHeader, Array3<f32>)> {
    let (header, data) = read_raw::<f32>(path)?;
    let arr = to_array3(path, &header, data)?;
    Ok((header, arr))
}

fn to_array3<T>(path: &Path, header: &RawHeader, data: Vec<T>) -> Result<Array3<T>> {
    let &[z, r, c] = header.shape.as_slice() else {
        return Err(Error::format(path, format!("expected a 3D shape, got {:?}", header.shape)));
    };
    Array3::from_shape_vec((z, r, c), data).map_err(|e| Error::format(path, e.to_string()))
}

fn spacing_of(path: &Path, header: &RawHeader) -> Result<[f64; 3]> {
    match header.spacing_mm.as_deref() {
        Some(&[a, b, c]) => Ok([a, b, c]),
        _ => Err(Error::format(path, "missing or malformed spacing_mm")),
    }
}

/// Reads every modality (and labels, when listed) of one subject.
pub fn load_volume(manifest: &SubjectManifest) -> Result<Volume> {
    let mut modalities = BTreeMap::new();
    let mut reference: Option<(Modality, Vec<usize>, [f64; 3])> = None;
    for m in Modality::ALL {
        let path = manifest.modalities.get(&m).ok_or_else(|| {
            Error::Config(format!("manifest of {:?} lists no {m} file", manifest.subject_id))
        })?;
        let (header, arr) = read_modality(path)?;
        let spacing = spacing_of(path, &header)?;
        match &reference {
            None => reference = Some((m, header.shape.clone(), spacing)),
            Some((rm, shape, _)) if *shape != header.shape => {
                return Err(Error::shape(
                    format!("{rm} vs {m} of subject {:?}", manifest.subject_id),
                    shape,
                    &header.shape,
                ))
            }
            _ => {}
        }
        modalities.insert(m, arr);
    }
    let (_, shape, spacing) = reference.expect("three modalities read");
    let labels = match &manifest.labels {
        Some(path) => {
            let (header, data) = read_raw::<u8>(path)?;
            if header.shape != shape {
                return Err(Error::shape(
                    format!("T1 vs labels of subject {:?}", manifest.subject_id),
                    &shape,
                    &header.shape,
                ));
            }
            Some(to_array3(path, &header, data)?)
        }
        None => None,
    };
    Volume::new(manifest.subject_id.clone(), modalities, labels, spacing)
}

/// Writes `volume` as `<id>_<modality>.raw` (+ `<id>_labels.raw`) under
/// `directory`, creating it if needed.
pub fn save_volume(volume: &Volume, directory: &Path) -> Result<SubjectManifest> {
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    let (z, r, c) = volume.shape();
    let mut header = RawHeader::new(&[z, r, c], DType::F32);
    header.spacing_mm = Some(volume.spacing().to_vec());
    let id = volume.subject_id();
    let mut modalities = BTreeMap::new();
    for m in Modality::ALL {
        let path = directory.join(format!("{id}_{}.raw", m.name()));
        let data = volume.modality(m);
        let flat: Vec<f32> = data.iter().copied().collect();
        write_raw(&path, &header, &flat)?;
        modalities.insert(m, path);
    }
    let labels = match volume.labels() {
        Some(l) => {
            let path = directory.join(format!("{id}_labels.raw"));
            let flat: Vec<u8> = l.iter().copied().collect();
            write_raw(&path, &header, &flat)?;
            Some(path)
        }
        None => None,
    };
    Ok(SubjectManifest {
        subject_id: id.to_string(),
        modalities,
        labels,
        split: None,
    })
}

/// Writes a label volume (e.g. a prediction) with its subject id in the
/// header metadata.
pub fn save_label_volume(path: &Path, labels: &Array3<u8>, spacing: [f64; 3], subject_id: &str) -> Result<()> {
    let (z, r, c) = labels.dim();
    let mut header = RawHeader::new(&[z, r, c], DType::U8);
    header.spacing_mm = Some(spacing.to_vec());
    header.meta.insert("subject_id".into(), subject_id.into());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let flat: Vec<u8> = labels.iter().copied().collect();
    write_raw(path, &header, &flat)
}

pub fn load_label_volume(path: &Path) -> Result<(RawHeader, Array3<u8>)> {
    let (header, data) = read_raw::<u8>(path)?;
    if let Some(i) = data.iter().position(|&l| l as usize >= crate::model::NUM_CLASSES) {
        return Err(Error::format(path, format!("label {} at flat index {i} is not a tissue class", data[i])));
    }
    let arr = to_array3(path, &header, data)?;
    Ok((header, arr))
}

/// Writes a manifest list. Paths under the manifest's directory are stored
/// relative to it.
pub fn write_manifest(path: &Path, subjects: &[SubjectManifest]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> PathBuf { p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf()) };
    let subjects = subjects
        .iter()
        .map(|s| SubjectManifest {
            subject_id: s.subject_id.clone(),
            modalities: s.modalities.iter().map(|(m, p)| (*m, rel(p))).collect(),
            labels: s.labels.as_deref().map(rel),
            split: s.split,
        })
        .collect();
    let text = serde_json::to_string_pretty(&ManifestFile { subjects })
        .map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a manifest list, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<SubjectManifest>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(file
        .subjects
        .into_iter()
        .map(|mut s| {
            for p in s.modalities.values_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(l) = s.labels.as_mut().filter(|l| l.is_relative()) {
                *l = base.join(&*l);
            }
            s
        })
        .collect())
}

/// Partitions `manifests` by subject id, keeping manifest order. Every
/// subject must be assigned to exactly one side.
pub fn make_split(
    manifests: &[SubjectManifest],
    train_ids: &[&str],
    test_ids: &[&str],
) -> Result<(Vec<SubjectManifest>, Vec<SubjectManifest>)> {
    let train: BTreeSet<&str> = train_ids.iter().copied().collect();
    let test: BTreeSet<&str> = test_ids.iter().copied().collect();
    let overlap: Vec<String> = train.intersection(&test).map(|s| s.to_string()).collect();
    if !overlap.is_empty() {
        return Err(Error::OverlappingSplit(overlap));
    }
    let known: BTreeSet<&str> = manifests.iter().map(|m| m.subject_id.as_str()).collect();
    if let Some(id) = train.union(&test).find(|id| !known.contains(*id)) {
        return Err(Error::UnknownSubject(id.to_string()));
    }
    let mut train_set = Vec::new();
    let mut test_set = Vec::new();
    for m in manifests {
        let mut m = m.clone();
        if train.contains(m.subject_id.as_str()) {
            m.split = Some(Split::Train);
            train_set.push(m);
        } else if test.contains(m.subject_id.as_str()) {
            m.split = Some(Split::Test);
            test_set.push(m);
        } else {
            return Err(Error::Config(format!(
                "subject {:?} is in neither the train nor the test list",
                m.subject_id
            )));
        }
    }
    Ok((train_set, test_set))
}
