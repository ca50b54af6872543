//! Stage functions shared by the command-line tool and the benchmarks:
//! fold selection, codebook fitting, training and evaluation of one
//! held-out subject.

use crate::config::{CodebookConfig, RunConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Method, MetricsReport, Predictor};
use crate::network::{EncoderVariant, ModelConfig, ModelParams};
use crate::pca::{pca_fit, PcaModel};
use crate::phantom::Sequence;
use crate::quantizer::{build_codebook, Codebook, SplitTag};
use crate::training::{self, Split, TrainConfig, TrainOutcome};

/// Sequences of one leave-one-subject-out fold.
pub struct Fold<'a> {
    pub split: Split,
    pub tag: SplitTag,
    pub train: Vec<&'a Sequence>,
    pub val: Vec<&'a Sequence>,
    pub test: Vec<&'a Sequence>,
}

impl<'a> Fold<'a> {
    pub fn new(ds: &'a Dataset, held_out: usize, split_seed: u64) -> Result<Self> {
        if !ds.subject_ids().contains(&held_out) {
            return Err(Error::Data(format!(
                "held-out subject {held_out} is not in the dataset ({} subjects)",
                ds.subjects.len()
            )));
        }
        let split = ds.split(held_out, split_seed)?;
        Ok(Self {
            train: ds.sequences_of(&split.train),
            val: ds.sequences_of(&split.val),
            test: ds.sequences_of(&split.test),
            split,
            tag: SplitTag { held_out, split_seed },
        })
    }

    fn train_fields(&self) -> Vec<crate::field::DisplacementField> {
        self.train.iter().flat_map(|s| s.fields.iter().cloned()).collect()
    }
}

/// Codebook from the training split only, stamped with digest and fold.
pub fn fit_codebook(fold: &Fold, cfg: &CodebookConfig, digest: &str) -> Result<Codebook> {
    let mut cb = build_codebook(&fold.train_fields(), cfg.bins)?;
    let histogram = cb.histogram.clone();
    cb.reweight(&histogram, cfg.lambda)?;
    cb.digest = Some(digest.to_string());
    cb.split = Some(fold.tag);
    Ok(cb)
}

/// Rejects a codebook built for another fold.
pub fn check_codebook_fold(cb: &Codebook, fold: &Fold) -> Result<()> {
    match cb.split {
        Some(tag) if tag == fold.tag => Ok(()),
        Some(tag) => Err(Error::Config(format!(
            "codebook was built for held-out subject {} (split seed {}), not {} (split seed {})",
            tag.held_out, tag.split_seed, fold.tag.held_out, fold.tag.split_seed
        ))),
        None => Err(Error::Config("codebook carries no fold information".into())),
    }
}

pub fn model_config(cfg: &RunConfig, variant: EncoderVariant, codebook: &Codebook) -> ModelConfig {
    ModelConfig {
        encoder_variant: variant,
        q: codebook.q,
        ..cfg.model.clone()
    }
}

/// Trains from a fresh initialisation seeded by `train.seed`.
pub fn train_model(fold: &Fold, codebook: &Codebook, model: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    let init = ModelParams::init(model, train.seed)?;
    training::train(&fold.train, &fold.val, codebook, model, train, init)
}

pub fn fit_pca(fold: &Fold, var_threshold: f64) -> Result<PcaModel> {
    pca_fit(&fold.train_fields(), var_threshold)
}

/// Trained artifacts available to [`evaluate_fold`].
#[derive(Default)]
pub struct Models<'a> {
    pub proposed: Option<(&'a ModelConfig, &'a ModelParams)>,
    pub convpool: Option<(&'a ModelConfig, &'a ModelParams)>,
}

/// Evaluates `methods` on the fold's test subject. PCA is fitted here.
pub fn evaluate_fold(
    cfg: &RunConfig,
    fold: &Fold,
    codebook: &Codebook,
    models: &Models,
    methods: &[Method],
    digest: &str,
) -> Result<MetricsReport> {
    let pca = if methods.contains(&Method::Pca) {
        Some(fit_pca(fold, cfg.eval.pca_var_threshold)?)
    } else {
        None
    };
    let missing = |m: Method| Error::Data(format!("method {} needs a trained model", m.name()));
    let mut predictors = Vec::new();
    for &m in methods {
        let p = match m {
            Method::Proposed | Method::Convpool => {
                let (config, params) = if m == Method::Proposed { models.proposed } else { models.convpool }.ok_or_else(|| missing(m))?;
                Predictor::Network { config, params, codebook }
            }
            Method::Pca => Predictor::Pca(pca.as_ref().expect("fitted above")),
            Method::Oracle => Predictor::Oracle,
            Method::QuantizedOracle => Predictor::QuantizedOracle(codebook),
        };
        predictors.push((m, p));
    }
    evaluate(&predictors, &fold.test, cfg.model.n_inputs, &cfg.eval, digest)
}
