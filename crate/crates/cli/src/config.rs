//! JSON run configuration shared by every subcommand.

use std::path::PathBuf;

use lipnet::data::{load_mnist_dir, two_blobs, LabeledDataset, MNIST_TRAIN_SPLIT};
use lipnet::train::{LrDrop, OptimizerConfig, SensitivityDeltas};
use lipnet::{HyperParams, KSpace, LipschitzParams};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const DATA_DIR_ENV: &str = "LIPNET_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    /// Two Gaussian blobs in the plane; small enough for smoke runs.
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Directory with the four MNIST IDX files. Falls back to `LIPNET_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Registered architecture; defaults to the one matching `dataset`.
    pub model: Option<String>,
    pub out_dir: Option<PathBuf>,

    pub sigma_train: Vec<f64>,
    pub beta: Vec<f64>,
    pub l_n: Vec<f64>,
    pub k_space: KSpace,
    /// Adds a β = 0 run to `grid`.
    pub include_standard: bool,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_drops: Vec<LrDrop>,
    pub optimizer: OptimizerConfig,
    pub train_ratio: f64,
    pub seeds: Vec<u64>,

    pub sigmas: Vec<f64>,
    pub corruption_seed: u64,
    pub ratios: Vec<f64>,
    /// Evaluate on the first `test_limit` test samples only.
    pub test_limit: Option<usize>,

    pub sensitivity: Option<SensitivityDeltas>,
    pub sigma_eval: f64,

    pub audit_sigma: f64,
    pub audit_samples: usize,
    pub synthetic_trials: usize,
    pub classes: Option<usize>,

    pub workers: usize,
    pub blobs_train: usize,
    pub blobs_test: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::mnist(LipschitzParams::standard(), 0);
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            model: None,
            out_dir: None,
            sigma_train: Vec::new(),
            beta: Vec::new(),
            l_n: Vec::new(),
            k_space: KSpace::default(),
            include_standard: true,
            lr: hp.lr,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            lr_drops: Vec::new(),
            optimizer: hp.optimizer,
            train_ratio: 1.0,
            seeds: vec![0],
            sigmas: vec![0.0, 0.5, 1.0],
            corruption_seed: 2024,
            ratios: vec![0.1, 0.3, 0.5, 0.7, 1.0],
            test_limit: None,
            sensitivity: None,
            sigma_eval: 0.5,
            audit_sigma: 0.5,
            audit_samples: 1000,
            synthetic_trials: 10_000,
            classes: None,
            workers: 1,
            blobs_train: 1000,
            blobs_test: 500,
        }
    }
}

/// One training configuration of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub lip: LipschitzParams,
    pub seed: u64,
}

impl Cell {
    pub fn method(&self) -> &'static str {
        if self.lip.is_standard() {
            "standard"
        } else {
            "lipschitz"
        }
    }

    /// Directory name built from the parameter values.
    pub fn dir_name(&self) -> String {
        let v = |x: f64| x.to_string().replace('.', "p").replace('-', "m").replace('+', "");
        if self.lip.is_standard() {
            format!("standard_seed{}", self.seed)
        } else {
            format!(
                "st{}_b{}_ln{}_seed{}",
                v(self.lip.sigma_train),
                v(self.lip.beta),
                v(self.lip.l_n),
                self.seed
            )
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn model_name(&self) -> String {
        self.model.clone().unwrap_or_else(|| match self.dataset {
            DatasetKind::Mnist => "mnist".into(),
            DatasetKind::Blobs => "blobs-mlp".into(),
        })
    }

    pub fn hyperparams(&self, lip: LipschitzParams, seed: u64) -> HyperParams {
        HyperParams {
            lip,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_drops: self.lr_drops.clone(),
            train_ratio: self.train_ratio,
            seed,
            optimizer: self.optimizer,
        }
    }

    fn lip(&self, sigma_train: f64, beta: f64, l_n: f64) -> LipschitzParams {
        LipschitzParams {
            k_space: self.k_space,
            ..LipschitzParams::new(sigma_train, beta, l_n)
        }
    }

    /// Every (σ_train, β, L_n) combination, standard first when requested.
    /// Missing lists mean the standard method only.
    pub fn grid(&self) -> Result<Vec<LipschitzParams>, Failure> {
        let mut out = Vec::new();
        if self.beta.is_empty() && self.sigma_train.is_empty() && self.l_n.is_empty() {
            return Ok(vec![LipschitzParams::standard()]);
        }
        if self.beta.is_empty() || self.sigma_train.is_empty() || self.l_n.is_empty() {
            return Err(Failure::Usage(
                "sigma_train, beta and l_n must all be given (or all omitted for standard training)".into(),
            ));
        }
        if self.include_standard {
            out.push(LipschitzParams::standard());
        }
        for &s in &self.sigma_train {
            for &b in &self.beta {
                for &l in &self.l_n {
                    let lip = if b == 0.0 { LipschitzParams::standard() } else { self.lip(s, b, l) };
                    lip.validate().map_err(|e| Failure::Usage(e.to_string()))?;
                    if !out.contains(&lip) {
                        out.push(lip);
                    }
                }
            }
        }
        Ok(out)
    }

    /// The single configuration used by `train`, `sensitivity` and `ratio-study`.
    pub fn single(&self) -> Result<LipschitzParams, Failure> {
        let multi = [&self.sigma_train, &self.beta, &self.l_n].iter().any(|v| v.len() > 1);
        if multi {
            return Err(Failure::Usage(
                "sigma_train, beta and l_n must hold at most one value here; use `grid` for several".into(),
            ));
        }
        if self.beta.first().copied().unwrap_or(0.0) == 0.0 {
            return Ok(LipschitzParams::standard());
        }
        let lip = self.lip(
            self.sigma_train.first().copied().unwrap_or(0.0),
            self.beta[0],
            self.l_n.first().copied().unwrap_or(0.0),
        );
        lip.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(lip)
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.seeds.first().copied().ok_or_else(|| Failure::Usage("seeds is empty".into()))
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    /// Training and test splits. A missing dataset is a usage error.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset), Failure> {
        let (train, test) = match self.dataset {
            DatasetKind::Blobs => (two_blobs(self.blobs_train, 1), two_blobs(self.blobs_test, 2)),
            DatasetKind::Mnist => {
                let dir = self.data_dir().ok_or_else(|| {
                    Failure::Usage(format!("no MNIST directory: set data_dir in the config or {DATA_DIR_ENV}"))
                })?;
                let (train, test) = load_mnist_dir(&dir).map_err(|e| Failure::Usage(e.to_string()))?;
                (train.take(MNIST_TRAIN_SPLIT).map_err(|e| Failure::Run(e.into()))?, test)
            }
        };
        let test = match self.test_limit {
            Some(n) => test.take(n).map_err(|e| Failure::Run(e.into()))?,
            None => test,
        };
        Ok((train, test))
    }

    pub fn check_sigmas(&self) -> Result<(), Failure> {
        if self.sigmas.is_empty() {
            return Err(Failure::Usage("sigmas is empty".into()));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Failure::Usage(format!("sigma {s} must be finite and non-negative")));
        }
        Ok(())
    }
}

/// The configuration exactly as a command used it.
#[derive(Debug, Serialize)]
pub struct ResolvedConfig<'a> {
    pub command: &'a str,
    pub method: &'a str,
    pub code_version: &'a str,
    pub config: &'a RunConfig,
}
