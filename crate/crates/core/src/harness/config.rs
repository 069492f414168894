use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::encoders::Task;
use crate::error::{Error, Result};
use crate::mgvat::PerturbationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the auxiliary, regularization, contrastive and VAT terms.
    pub beta: f64,
    pub experts: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Token feature width.
    pub d: usize,
    /// Shared scoring space width.
    pub h: usize,
    /// Perturbation radius.
    pub eps: f64,
    /// Probe radius of the perturbation solver.
    pub xi: f64,
    pub perturbation_steps: usize,
    pub task: Task,
    pub no_vmoe: bool,
    pub no_mgvat: bool,
    pub optimizer: OptimizerKind,
    /// Longest marked token sequence, `[CLS]` and `[SEP]` included.
    pub max_len: usize,
    /// Keep lexicon-initialized word embeddings fixed.
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            experts: 8,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            d: 32,
            h: 16,
            eps: 0.1,
            xi: 0.01,
            perturbation_steps: 1,
            task: Task::Met,
            no_vmoe: false,
            no_mgvat: false,
            optimizer: OptimizerKind::Adam,
            max_len: 24,
            freeze_embeddings: true,
        }
    }
}

impl TrainConfig {
    /// `desk` is the default; `large` uses the large-backbone learning rate
    /// and width.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "large" => Ok(Self {
                lr: 1e-5,
                d: 768,
                ..Self::default()
            }),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected desk or large)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("xi", self.xi),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        let counts = [
            ("experts", self.experts),
            ("batch_size", self.batch_size),
            ("d", self.d),
            ("h", self.h),
            ("perturbation_steps", self.perturbation_steps),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        PerturbationConfig {
            eps: self.eps,
            xi: self.xi,
            steps: self.perturbation_steps,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}
