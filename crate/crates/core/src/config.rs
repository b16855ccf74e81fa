//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PhantomSpec;
use crate::error::{Error, Result};
use crate::inference::StitchConfig;
use crate::retrieval::FeatureConfig;
use crate::training::{ChannelMode, TrainConfig};

/// Locations of inputs and outputs. Relative entries are taken relative to
/// the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub index: PathBuf,
    pub checkpoints: PathBuf,
    pub predictions: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            index: "work/index.raw".into(),
            checkpoints: "work/checkpoints".into(),
            predictions: "work/predictions".into(),
            reports: "work/reports".into(),
        }
    }
}

impl PathsConfig {
    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join("manifest.json")
    }

    pub fn checkpoint(&self, mode: ChannelMode, run: usize) -> PathBuf {
        self.checkpoints.join(mode.name()).join(format!("run_{run}.ckpt"))
    }

    pub fn prediction_dir(&self, mode: ChannelMode) -> PathBuf {
        self.predictions.join(mode.name())
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.data_dir,
            &mut self.index,
            &mut self.checkpoints,
            &mut self.predictions,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Subjects to generate; seeds run from `spec.seed` upward.
    pub count: usize,
    /// The last `test_count` subjects form the test split.
    pub test_count: usize,
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 7,
            test_count: 2,
            spec: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub phantom: PhantomSection,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub stitch: StitchConfig,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.paths.resolve(base_dir);
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    /// Defaults with paths under `base_dir`.
    pub fn with_base(base_dir: &Path) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.paths.resolve(base_dir);
        cfg.base_dir = base_dir.to_path_buf();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantom.test_count > self.phantom.count {
            return Err(Error::Config(format!(
                "test_count ({}) exceeds count ({})",
                self.phantom.test_count, self.phantom.count
            )));
        }
        if self.features.bins < 1 || self.features.thumbnail < 1 {
            return Err(Error::Config("feature bins and thumbnail size must be positive".into()));
        }
        self.train.validate()?;
        self.stitch.validate()
    }

    /// `path` relative to the base directory when it lies beneath it.
    pub fn display_path(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.base_dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_toml_and_resolves_paths() {
        let text = r#"
            [paths]
            index = "out/idx.raw"

            [phantom]
            count = 3
            test_count = 1
            spec = { noise_std = 5.0 }

            [train]
            epochs = 2
            channel_mode = "four_own_gt"

            [stitch]
            stride = 16
        "#;
        let cfg = PipelineConfig::from_toml(text, Path::new("/tmp/p")).unwrap();
        assert_eq!(cfg.paths.index, PathBuf::from("/tmp/p/out/idx.raw"));
        assert_eq!(cfg.paths.manifest(), PathBuf::from("/tmp/p/data/manifest.json"));
        assert_eq!(cfg.phantom.spec.noise_std, 5.0);
        assert_eq!(cfg.phantom.spec.shape, PhantomSpec::default().shape);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.channel_mode, ChannelMode::FourOwnGt);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.stitch.stride, 16);
        assert_eq!(
            cfg.paths.checkpoint(ChannelMode::Three, 2),
            PathBuf::from("/tmp/p/work/checkpoints/three/run_2.ckpt")
        );
        assert_eq!(cfg.display_path(&cfg.paths.index), PathBuf::from("out/idx.raw"));
    }

    #[test]
    fn rejects_bad_values() {
        let base = Path::new(".");
        assert!(PipelineConfig::from_toml("[phantom]\ncount = 1\ntest_count = 2\n", base).is_err());
        assert!(PipelineConfig::from_toml("[stitch]\nstride = 65\n", base).is_err());
        assert!(PipelineConfig::from_toml("[train]\nepochs = 0\n", base).is_err());
        assert!(PipelineConfig::from_toml("[unknown]\n", base).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = PipelineConfig::with_base(Path::new(""));
        let back = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("")).unwrap();
        assert_eq!(back, cfg);
    }
}
