//! Content-based retrieval of the most similar labeled database slice.
//!
//! Each slice is described by an intensity histogram of its foreground
//! pixels concatenated with a coarse area-averaged thumbnail; neighbours
//! are found by exhaustive Euclidean search.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::rawfile::{read_raw, write_raw, DType, RawHeader};
use crate::error::{Error, Result};
use crate::model::{normalize_intensity, LabelMap, Modality, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub bins: usize,
    pub thumbnail: usize,
    pub modality: Modality,
    /// Slices with at most this many non-background pixels are not indexed.
    pub min_brain_pixels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            bins: 64,
            thumbnail: 16,
            modality: Modality::T1,
            min_brain_pixels: 200,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        self.bins + self.thumbnail * self.thumbnail
    }
}

/// Identifies one database slice.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub subject_id: String,
    pub slice_index: usize,
}

impl SliceKey {
    pub fn new(subject_id: impl Into<String>, slice_index: usize) -> Self {
        SliceKey {
            subject_id: subject_id.into(),
            slice_index,
        }
    }
}

impl fmt::Display for SliceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.subject_id, self.slice_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Set when the slice had no non-zero pixel; `values` is then all zeros.
    pub empty: bool,
    pub source: Option<SliceKey>,
}

/// Per-axis area weights mapping `n` pixels onto `m` equal bins.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * step, (i + 1) as f64 * step);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|p| {
                    let w = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    (w > 0.0).then_some((p, w))
                })
                .collect()
        })
        .collect()
}

/// Area-averaged `size x size` thumbnail.
pub fn thumbnail(slice: ArrayView2<'_, f64>, size: usize) -> Array2<f64> {
    let (rows, cols) = slice.dim();
    let wr = area_weights(rows, size);
    let wc = area_weights(cols, size);
    let area = (rows as f64 / size as f64) * (cols as f64 / size as f64);
    Array2::from_shape_fn((size, size), |(i, j)| {
        let mut acc = 0.0;
        for &(r, a) in &wr[i] {
            for &(c, b) in &wc[j] {
                acc += a * b * slice[[r, c]];
            }
        }
        acc / area
    })
}

/// Features of a slice already normalized to `[0, 1]`.
pub fn extract_features(slice: ArrayView2<'_, f64>, config: &FeatureConfig) -> FeatureVector {
    let mut hist = vec![0.0; config.bins];
    let mut count = 0usize;
    for &v in slice.iter() {
        if v > 0.0 {
            let bin = ((v * config.bins as f64) as usize).min(config.bins - 1);
            hist[bin] += 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return FeatureVector {
            values: vec![0.0; config.dim()],
            empty: true,
            source: None,
        };
    }
    for h in &mut hist {
        *h /= count as f64;
    }
    let mut values = hist;
    values.extend(thumbnail(slice, config.thumbnail).iter().copied());
    FeatureVector {
        values,
        empty: false,
        source: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    config: FeatureConfig,
    entries: Vec<FeatureVector>,
}

impl RetrievalIndex {
    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn entries(&self) -> &[FeatureVector] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds an index from pre-computed entries; every entry needs a unique source.
    pub fn from_entries(config: FeatureConfig, mut entries: Vec<FeatureVector>) -> Result<Self> {
        let dim = config.dim();
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.values.len() != dim {
                return Err(Error::shape("index entry", &[dim], &[e.values.len()]));
            }
            if let Some(i) = e.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: vec![i] });
            }
            let key = e
                .source
                .clone()
                .ok_or_else(|| Error::Retrieval("index entry without a source".into()))?;
            if !seen.insert(key.clone()) {
                return Err(Error::Retrieval(format!("duplicate source {key}")));
            }
        }
        entries.sort_by(|a, b| a.source.cmp(&b.source));
        Ok(RetrievalIndex { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.config.dim();
        let mut header = RawHeader::new(&[self.entries.len(), dim], DType::F64);
        header.meta.insert(
            "config".into(),
            serde_json::to_value(&self.config).map_err(|e| Error::format(path, e.to_string()))?,
        );
        let sources: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                let s = e.source.as_ref().expect("indexed entries have sources");
                serde_json::json!([s.subject_id, s.slice_index, e.empty])
            })
            .collect();
        header.meta.insert("sources".into(), Value::Array(sources));
        let flat: Vec<f64> = self.entries.iter().flat_map(|e| e.values.iter().copied()).collect();
        write_raw(path, &header, &flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = read_raw::<f64>(path)?;
        let config: FeatureConfig = header
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::format(path, "index header lacks config"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
        let sources: Vec<(String, usize, bool)> = header
            .meta
            .get("sources")
            .cloned()
            .ok_or_else(|| Error::format(path, "index header lacks sources"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
        let dim = config.dim();
        if header.shape != [sources.len(), dim] {
            return Err(Error::format(path, format!("shape {:?} disagrees with metadata", header.shape)));
        }
        let entries = sources
            .into_iter()
            .zip(data.chunks_exact(dim.max(1)))
            .map(|((id, slice, empty), values)| FeatureVector {
                values: values.to_vec(),
                empty,
                source: Some(SliceKey::new(id, slice)),
            })
            .collect();
        RetrievalIndex::from_entries(config, entries)
    }
}

/// Indexes every sufficiently large labeled slice of `database`.
pub fn build_index(database: &[Volume], config: &FeatureConfig) -> Result<RetrievalIndex> {
    let mut entries = Vec::new();
    for volume in database {
        let labels = volume
            .labels()
            .ok_or_else(|| Error::MissingLabels(volume.subject_id().to_string()))?;
        for z in 0..volume.num_slices() {
            let brain = labels.index_axis(ndarray::Axis(0), z).iter().filter(|&&l| l != 0).count();
            if brain <= config.min_brain_pixels {
                continue;
            }
            let norm = normalize_intensity(volume.slice(config.modality, z));
            let mut fv = extract_features(norm.view(), config);
            fv.source = Some(SliceKey::new(volume.subject_id(), z));
            entries.push(fv);
        }
    }
    RetrievalIndex::from_entries(config.clone(), entries)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The `k` nearest entries by Euclidean distance, ascending; ties are
/// broken by `(subject_id, slice_index)`.
pub fn query_top_k(
    index: &RetrievalIndex,
    query: &FeatureVector,
    k: usize,
    exclude_subject: Option<&str>,
) -> Result<Vec<(SliceKey, f64)>> {
    if k == 0 {
        return Err(Error::Retrieval("k must be at least 1".into()));
    }
    let dim = index.config.dim();
    if query.values.len() != dim {
        return Err(Error::shape("query features", &[dim], &[query.values.len()]));
    }
    let mut hits: Vec<(SliceKey, f64)> = index
        .entries
        .iter()
        .filter_map(|e| {
            let key = e.source.as_ref()?;
            if exclude_subject == Some(key.subject_id.as_str()) {
                return None;
            }
            Some((key.clone(), euclidean(&e.values, &query.values)))
        })
        .collect();
    if hits.is_empty() {
        return Err(Error::Retrieval("no index entries left after exclusion".into()));
    }
    hits.sort_by(|a, b| match a.1.total_cmp(&b.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    hits.truncate(k);
    Ok(hits)
}

/// An index together with the labeled volumes it was built from, so a hit
/// can be turned back into image data and labels.
#[derive(Clone, Debug)]
pub struct RetrievalContext {
    index: RetrievalIndex,
    database: BTreeMap<String, Volume>,
}

impl RetrievalContext {
    pub fn new(index: RetrievalIndex, database: Vec<Volume>) -> Result<Self> {
        let database: BTreeMap<String, Volume> =
            database.into_iter().map(|v| (v.subject_id().to_string(), v)).collect();
        for e in index.entries() {
            let key = e.source.as_ref().expect("indexed entries have sources");
            let vol = database
                .get(&key.subject_id)
                .ok_or_else(|| Error::UnknownSubject(key.subject_id.clone()))?;
            if !vol.has_labels() {
                return Err(Error::MissingLabels(key.subject_id.clone()));
            }
            if key.slice_index >= vol.num_slices() {
                return Err(Error::Retrieval(format!("index entry {key} is out of range")));
            }
        }
        Ok(RetrievalContext { index, database })
    }

    pub fn build(database: Vec<Volume>, config: &FeatureConfig) -> Result<Self> {
        let index = build_index(&database, config)?;
        RetrievalContext::new(index, database)
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    /// Normalized slice (in the index modality) and labels of a database entry.
    pub fn fetch(&self, key: &SliceKey) -> Result<(Array2<f64>, LabelMap)> {
        let vol = self
            .database
            .get(&key.subject_id)
            .ok_or_else(|| Error::UnknownSubject(key.subject_id.clone()))?;
        let image = normalize_intensity(vol.slice(self.index.config.modality, key.slice_index));
        let labels = vol
            .label_slice(key.slice_index)
            .ok_or_else(|| Error::MissingLabels(key.subject_id.clone()))?;
        Ok((image, labels))
    }

    /// Best match for a normalized query slice.
    pub fn best_match(&self, query: ArrayView2<'_, f64>, exclude_subject: Option<&str>) -> Result<(SliceKey, f64)> {
        let fv = extract_features(query, &self.index.config);
        let mut hits = query_top_k(&self.index, &fv, 1, exclude_subject)?;
        Ok(hits.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_phantom, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_db(n: usize) -> Vec<Volume> {
        let spec = PhantomSpec {
            shape: [6, 64, 64],
            pose: crate::dataset::PoseJitter::none(),
            ..Default::default()
        };
        (0..n).map(|s| generate_phantom(&spec.with_seed(s as u64)).unwrap()).collect()
    }

    #[test]
    fn constant_slice_features() {
        let cfg = FeatureConfig::default();
        let fv = extract_features(Array2::from_elem((64, 48), 0.5).view(), &cfg);
        assert!(!fv.empty);
        for (i, &h) in fv.values[..64].iter().enumerate() {
            assert_eq!(h, if i == 32 { 1.0 } else { 0.0 });
        }
        for &t in &fv.values[64..] {
            assert!((t - 0.5).abs() < 1e-12, "{t}");
        }
        assert_eq!(fv.values.len(), 64 + 256);
    }

    #[test]
    fn zero_slice_is_flagged() {
        let fv = extract_features(Array2::zeros((32, 32)).view(), &FeatureConfig::default());
        assert!(fv.empty);
        assert!(fv.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn copies_have_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((40, 40), |_| rng.random::<f64>());
        let b = a.clone();
        let cfg = FeatureConfig::default();
        assert_eq!(extract_features(a.view(), &cfg), extract_features(b.view(), &cfg));
    }

    #[test]
    fn thumbnail_block_mean() {
        let a = Array2::from_shape_fn((32, 32), |(r, c)| (r / 2 * 16 + c / 2) as f64);
        let t = thumbnail(a.view(), 16);
        for i in 0..16 {
            for j in 0..16 {
                assert!((t[[i, j]] - (i * 16 + j) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn index_counts_and_threshold() {
        let db = small_db(3);
        let cfg = FeatureConfig {
            min_brain_pixels: 0,
            ..Default::default()
        };
        let idx = build_index(&db, &cfg).unwrap();
        assert_eq!(idx.len(), 18);
        let strict = FeatureConfig {
            min_brain_pixels: 64 * 64,
            ..Default::default()
        };
        assert_eq!(build_index(&db, &strict).unwrap().len(), 0);
        assert_eq!(build_index(&db, &cfg).unwrap(), idx);
    }

    #[test]
    fn index_rejects_unlabeled() {
        let mut db = small_db(2);
        let v = db.pop().unwrap().without_labels();
        db.push(v);
        assert!(matches!(
            build_index(&db, &FeatureConfig::default()),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn self_query_and_exclusion() {
        let db = small_db(3);
        let idx = build_index(&db, &FeatureConfig::default()).unwrap();
        let probe = idx.entries()[4].clone();
        let own = probe.source.clone().unwrap();
        let hits = query_top_k(&idx, &probe, 1, None).unwrap();
        assert_eq!(hits[0], (own.clone(), 0.0));
        let hits = query_top_k(&idx, &probe, 3, Some(&own.subject_id)).unwrap();
        assert!(hits.iter().all(|h| h.0.subject_id != own.subject_id));
        let all = query_top_k(&idx, &probe, 1000, None).unwrap();
        assert_eq!(all.len(), idx.len());
    }

    #[test]
    fn exclusion_of_everything_fails() {
        let db = small_db(1);
        let idx = build_index(&db, &FeatureConfig::default()).unwrap();
        let q = idx.entries()[0].clone();
        assert!(query_top_k(&idx, &q, 1, Some(db[0].subject_id())).is_err());
        assert!(query_top_k(&idx, &q, 0, None).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = build_index(&small_db(2), &FeatureConfig::default()).unwrap();
        let p = dir.path().join("index.raw");
        idx.save(&p).unwrap();
        assert_eq!(RetrievalIndex::load(&p).unwrap(), idx);
    }
}
