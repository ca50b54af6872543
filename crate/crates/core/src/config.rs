//! Run configuration shared by every pipeline stage.
//!
//! The digest of the resolved configuration is stamped into every artifact
//! so that stages refuse to mix outputs from different settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::io;
use crate::network::ModelConfig;
use crate::phantom::PhantomConfig;
use crate::quantizer::DEFAULT_LAMBDA;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Bins per axis; the codebook has `bins²` classes.
    pub bins: usize,
    pub lambda: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub codebook: CodebookConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `path` if given, otherwise the defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn digest(&self) -> Result<String> {
        io::digest_of(self)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantom;
        if p.subjects < 3 {
            return Err(Error::Config(format!(
                "leave-one-subject-out needs at least 3 subjects, got {}",
                p.subjects
            )));
        }
        if p.sequences_per_subject == 0 {
            return Err(Error::Config("sequences_per_subject must be positive".into()));
        }
        if self.codebook.bins < 2 {
            return Err(Error::Config(format!("codebook.bins must be ≥ 2, got {}", self.codebook.bins)));
        }
        if !(0.0..=1.0).contains(&self.codebook.lambda) {
            return Err(Error::Config(format!("codebook.lambda must lie in [0, 1], got {}", self.codebook.lambda)));
        }
        let q = self.codebook.bins * self.codebook.bins;
        if self.model.q != q {
            return Err(Error::Config(format!(
                "model.q = {} but codebook.bins = {} gives {q} classes",
                self.model.q, self.codebook.bins
            )));
        }
        self.model.validate()?;
        self.model
            .check_frame_size(p.height, p.width)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.train.t_train > self.model.t_max {
            return Err(Error::Config(format!(
                "train.t_train {} exceeds model.t_max {}",
                self.train.t_train, self.model.t_max
            )));
        }
        let shortest = self.model.n_inputs + self.train.t_train.max(self.eval.horizon);
        if p.frames < shortest {
            return Err(Error::Config(format!(
                "{} frames per sequence cannot hold {} inputs plus the horizon",
                p.frames, self.model.n_inputs
            )));
        }
        if self.eval.horizon == 0 || self.eval.window_stride == 0 {
            return Err(Error::Config("eval.horizon and eval.window_stride must be positive".into()));
        }
        if !(self.eval.pca_var_threshold > 0.0 && self.eval.pca_var_threshold <= 1.0) {
            return Err(Error::Config("eval.pca_var_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Fails unless an artifact's stamped digest matches the current run.
pub fn check_digest(what: &str, found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(d) if d == expected => Ok(()),
        Some(d) => Err(Error::Config(format!(
            "{what} was produced with config digest {d}, current config is {expected}"
        ))),
        None => Err(Error::Config(format!("{what} carries no config digest"))),
    }
}
