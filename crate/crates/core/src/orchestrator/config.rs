use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunError;
use crate::data::{load_cifar_binary, load_idx, synth_blobs, synth_glyphs, Dataset};
use crate::metrics::report::ReportFormat;
use crate::model::{Arch, CutSpec, DEFAULT_RESNET_BLOCKS};
use crate::protocol::Mode;
use crate::tensor::DType;
use crate::transport::LinkSimulation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters; train and test share the cluster centres.
    Blobs {
        train: usize,
        test: usize,
        dims: Vec<usize>,
        classes: usize,
        spread: f64,
    },
    /// Synthetic 28x28 digit glyphs.
    Glyphs { train: usize, test: usize },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar { train: Vec<PathBuf>, test: Vec<PathBuf> },
}

impl DatasetSpec {
    /// Loads (train, test). Synthetic sets are drawn from `seed`.
    pub fn load(&self, seed: u64, dtype: DType) -> Result<(Dataset, Dataset), RunError> {
        let split = |all: Dataset, train: usize| -> Result<(Dataset, Dataset), RunError> {
            let tr: Vec<usize> = (0..train).collect();
            let te: Vec<usize> = (train..all.len()).collect();
            Ok((all.subset(&tr)?, all.subset(&te)?))
        };
        match self {
            DatasetSpec::Blobs {
                train,
                test,
                dims,
                classes,
                spread,
            } => {
                if *test == 0 {
                    return Err(RunError::Config("test split must be non-empty".into()));
                }
                split(synth_blobs(train + test, dims, *classes, seed, *spread, dtype)?, *train)
            }
            DatasetSpec::Glyphs { train, test } => {
                if *test == 0 {
                    return Err(RunError::Config("test split must be non-empty".into()));
                }
                split(synth_glyphs(train + test, seed, dtype)?, *train)
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels, dtype)?;
                let test = load_idx(test_images, test_labels, dtype)?;
                Ok((train, test))
            }
            DatasetSpec::Cifar { train, test } => Ok((load_cifar_binary(train, dtype)?, load_cifar_binary(test, dtype)?)),
        }
    }
}

/// Simulated link; when set, reported comm time is derived from frame
/// counts and sizes instead of the wall clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSpec {
    pub simulate: bool,
    pub latency_ms: f64,
    /// Megabytes (2^20 bytes) per second; absent means unlimited.
    pub bandwidth_mb_per_s: Option<f64>,
}

impl LinkSpec {
    pub fn simulation(&self) -> Option<LinkSimulation> {
        self.simulate.then(|| LinkSimulation {
            latency: Duration::from_secs_f64(self.latency_ms / 1000.0),
            bytes_per_second: self.bandwidth_mb_per_s.map(|mb| mb * 1_048_576.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub arch: Arch,
    /// Residual block count for tiny-resnet.
    pub resnet_blocks: usize,
    pub cut: CutSpec,
    pub clients: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
    /// DSL pipelining: activations the client may send before the server
    /// must have consumed them.
    pub window: usize,
    pub dataset: DatasetSpec,
    pub link: LinkSpec,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Dsl,
            arch: Arch::TinyConv,
            resnet_blocks: DEFAULT_RESNET_BLOCKS,
            cut: CutSpec::Middle,
            clients: 1,
            epochs: 50,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            dtype: DType::F32,
            window: 1,
            dataset: DatasetSpec::Glyphs { train: 10_000, test: 2_000 },
            link: LinkSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

/// A stable 64-bit seed for one named use of the experiment seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let fail = |m: String| Err(RunError::Config(m));
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.link.latency_ms >= 0.0 && self.link.latency_ms.is_finite()) {
            return fail(format!("latency {} must be non-negative", self.link.latency_ms));
        }
        if let Some(bw) = self.link.bandwidth_mb_per_s {
            if !(bw > 0.0 && bw.is_finite()) {
                return fail(format!("bandwidth {bw} must be positive"));
            }
        }
        Ok(())
    }

    /// The configuration as canonical TOML, without output settings.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSpec::default();
        toml::to_string(&c).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.lr, c.momentum, c.batch_size, c.epochs, c.window), (0.001, 0.9, 128, 50, 1));
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            mode = "hybrid:0.5"
            arch = "mlp"
            cut = "2"
            epochs = 3
            [dataset]
            kind = "blobs"
            train = 100
            test = 20
            dims = [8]
            classes = 4
            spread = 0.3
            [link]
            simulate = true
            bandwidth_mb_per_s = 1.0
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.mode, Mode::hybrid(0.5));
        assert_eq!(c.cut, CutSpec::Index(2));
        assert_eq!(c.batch_size, 128);
        assert_eq!(ExperimentConfig::from_toml(&c.canonical()).unwrap(), c);
        assert_eq!(c.link.simulation().unwrap().bytes_per_second, Some(1_048_576.0));
    }

    #[test]
    fn hash_ignores_output_but_not_training_knobs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = Some("/tmp/x".into());
        assert_eq!(a.sha256(), b.sha256());
        b.seed = 1;
        assert_ne!(a.sha256(), b.sha256());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml("clients = 0").is_err());
        assert!(ExperimentConfig::from_toml("momentum = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("mode = \"sl\"").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "init"), derive_seed(1, "aux"));
        assert_eq!(derive_seed(1, "init"), derive_seed(1, "init"));
    }
}
