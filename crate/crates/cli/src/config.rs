//! Run configuration, read from a TOML file.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/toy"
//!
//! [data]
//! kind = "gaussian_blobs"      # or "planted_block", "idx"
//! n = 200
//! dim = 8
//! classes = 2
//! separation = 0.3
//! std = 0.1
//! train_fraction = 0.75
//!
//! [optimizer]                  # optional; Adam, lr 1e-3 by default
//! method = "adam"
//!
//! [snn]
//! layers = [{ kind = "dense", units = 64 }, { kind = "relu" }, { kind = "dense", units = 2 }]
//! epochs = 200
//!
//! [autoencoder]
//! encoder = [...]
//! decoder = [...]
//! epochs = 150
//!
//! [explain]                    # every key optional
//! s = 1
//! q = 1
//! ```
//!
//! Relative `idx` paths are resolved against the config file's directory;
//! `out_dir` is resolved against the working directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use siamex::autoencoder::AutoencoderLossWeights;
use siamex::data::{gen_synthetic, load_idx_dataset, Dataset, SyntheticSpec};
use siamex::explain::PerturbationConfig;
use siamex::nn::{LayerSpec, NetworkSpec, OptimizerConfig};
use siamex::siamese::ContrastiveParams;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub snn: SnnSection,
    pub autoencoder: AeSection,
    #[serde(default)]
    pub explain: ExplainSection,
    /// Directory of the config file; relative data paths hang off it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Leading fraction of the examples used for training; the rest is the
    /// held-out split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.75
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    GaussianBlobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        std: f64,
    },
    PlantedBlock {
        n: usize,
        height: usize,
        width: usize,
        block: [usize; 4],
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnnSection {
    /// Defaults to the flat input `[m]`.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default)]
    pub mu_reg: f64,
    #[serde(default = "default_pairs_per_anchor")]
    pub pairs_per_anchor: usize,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Overrides `[optimizer] learning_rate` for this stage.
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSection {
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub mu_close: f64,
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f64,
    pub epochs: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub s: Option<usize>,
    pub q: Option<usize>,
    pub n_samples: Option<usize>,
    pub sigma_factor: Option<f64>,
    pub sigma_floor: Option<f64>,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
    /// Dataset indices explained when no `--index` is given.
    #[serde(default)]
    pub indices: Vec<usize>,
}

fn one() -> f64 {
    1.0
}
fn default_pairs_per_anchor() -> usize {
    2
}
fn default_batch_size() -> usize {
    32
}
fn default_lambda_reg() -> f64 {
    1e-4
}
fn default_finetune_epochs() -> usize {
    10
}

/// Values given on the command line; each replaces its config counterpart.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub s: Option<usize>,
    pub q: Option<usize>,
    pub n_samples: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg =
            Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if o.s.is_some() {
            self.explain.s = o.s;
        }
        if o.q.is_some() {
            self.explain.q = o.q;
        }
        if o.n_samples.is_some() {
            self.explain.n_samples = o.n_samples;
        }
        self.validate()
    }

    /// Numeric checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let f = self.data.train_fraction;
        ensure!(
            f > 0.0 && f <= 1.0,
            "data.train_fraction must lie in (0, 1], got {f}"
        );
        self.optimizer_for(self.snn.learning_rate).validate()?;
        self.optimizer_for(self.autoencoder.learning_rate)
            .validate()?;
        self.contrastive().validate()?;
        self.ae_weights().validate()?;
        ensure!(self.snn.epochs >= 1, "snn.epochs must be at least 1");
        ensure!(
            self.autoencoder.epochs >= 1,
            "autoencoder.epochs must be at least 1"
        );
        ensure!(
            self.snn.batch_size >= 1 && self.autoencoder.batch_size >= 1,
            "batch sizes must be at least 1"
        );
        ensure!(
            self.snn.pairs_per_anchor >= 1,
            "snn.pairs_per_anchor must be at least 1"
        );
        Ok(())
    }

    pub fn optimizer_for(&self, learning_rate: Option<f64>) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: learning_rate.unwrap_or(self.optimizer.learning_rate),
            seed: self.seed,
            ..self.optimizer.clone()
        }
    }

    pub fn contrastive(&self) -> ContrastiveParams {
        ContrastiveParams {
            tau: self.snn.tau,
            mu_reg: self.snn.mu_reg,
        }
    }

    pub fn ae_weights(&self) -> AutoencoderLossWeights {
        AutoencoderLossWeights {
            gamma: self.autoencoder.gamma,
            mu_close: self.autoencoder.mu_close,
            lambda_reg: self.autoencoder.lambda_reg,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = match &self.data.source {
            DataSource::Idx {
                images,
                labels,
                limit,
            } => load_idx_dataset(
                &self.base_dir.join(images),
                &self.base_dir.join(labels),
                *limit,
            )?,
            DataSource::GaussianBlobs {
                n,
                dim,
                classes,
                separation,
                std,
            } => gen_synthetic(
                &SyntheticSpec::GaussianBlobs {
                    n: *n,
                    dim: *dim,
                    classes: *classes,
                    separation: *separation,
                    std: *std,
                },
                self.seed,
            )?,
            DataSource::PlantedBlock {
                n,
                height,
                width,
                block,
            } => gen_synthetic(
                &SyntheticSpec::PlantedBlock {
                    n: *n,
                    height: *height,
                    width: *width,
                    block: *block,
                },
                self.seed,
            )?,
        };
        data.validate()?;
        ensure!(!data.is_empty(), "dataset is empty");
        Ok(data)
    }

    /// `(train, held_out)`; the training split is the leading
    /// `round(train_fraction * n)` examples.
    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        let n_train = (data.len() as f64 * self.data.train_fraction).round() as usize;
        if n_train == 0 {
            bail!(
                "train_fraction leaves no training examples out of {}",
                data.len()
            );
        }
        Ok(data.split(n_train.min(data.len())))
    }

    pub fn snn_spec(&self, input_len: usize) -> NetworkSpec {
        let shape = self.snn.input_shape.clone().unwrap_or(vec![input_len]);
        NetworkSpec::new(shape, self.snn.layers.clone())
    }

    pub fn encoder_spec(&self, input_len: usize) -> NetworkSpec {
        let shape = self
            .autoencoder
            .input_shape
            .clone()
            .unwrap_or(vec![input_len]);
        NetworkSpec::new(shape, self.autoencoder.encoder.clone())
    }

    pub fn decoder_spec(&self, code_len: usize) -> NetworkSpec {
        NetworkSpec::new(vec![code_len], self.autoencoder.decoder.clone())
    }

    /// Explanation settings for embedding length `d` and input length `m`.
    pub fn perturbation(&self, d: usize, m: usize) -> Result<PerturbationConfig> {
        let base = PerturbationConfig::defaults_for(d, m);
        let e = &self.explain;
        let cfg = PerturbationConfig {
            s: e.s.unwrap_or(base.s),
            q: e.q.unwrap_or(base.q),
            n_samples: e.n_samples.unwrap_or(base.n_samples),
            sigma_factor: e.sigma_factor.unwrap_or(base.sigma_factor),
            sigma_floor: e.sigma_floor.unwrap_or(base.sigma_floor),
            seed: e.seed.unwrap_or(self.seed),
        };
        cfg.validate(d, m)?;
        Ok(cfg)
    }
}
