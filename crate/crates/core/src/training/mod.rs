//! Optimisation loop: Adam, plateau learning-rate schedule, subject-level
//! splits and sliding-window training on quantised motion targets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{argmax_labels, ModelConfig, ModelParams, Network};
use crate::par;
use crate::phantom::Sequence;
use crate::quantizer::{Codebook, MotionLabelMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub patience: usize,
    /// The learning rate is divided by this on a plateau.
    pub lr_factor: f64,
    pub min_lr: f64,
    /// Smallest validation-accuracy gain that counts as improvement.
    pub min_improvement: f64,
    pub max_epochs: usize,
    pub t_train: usize,
    pub seed: u64,
    /// Windows whose gradients are averaged per optimizer step.
    pub accumulation: usize,
    /// Step between consecutive window starts within a sequence.
    pub window_stride: usize,
    /// Random subset of training windows visited per epoch.
    pub windows_per_epoch: Option<usize>,
    /// Step between validation window starts.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            patience: 10,
            lr_factor: 2.0,
            min_lr: 1e-5,
            min_improvement: 1e-4,
            max_epochs: 200,
            t_train: 5,
            seed: 0,
            accumulation: 1,
            window_stride: 1,
            windows_per_epoch: None,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > self.min_lr && self.min_lr > 0.0) {
            return Err(Error::Config(format!(
                "need lr > min_lr > 0, got lr={} min_lr={}",
                self.lr, self.min_lr
            )));
        }
        if self.patience == 0 || self.lr_factor <= 1.0 {
            return Err(Error::Config("patience must be ≥ 1 and lr_factor > 1".into()));
        }
        if self.accumulation == 0 || self.window_stride == 0 || self.val_stride == 0 || self.t_train == 0 {
            return Err(Error::Config("accumulation, strides and t_train must be positive".into()));
        }
        if self.windows_per_epoch == Some(0) {
            return Err(Error::Config("windows_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// Bias-corrected Adam update. Fails without touching anything if a
/// gradient is missing, misshapen or non-finite.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("gradient for `{name}` has shape {:?}", g.shape())));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{name}` at index {bad}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in iter {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Divides the learning rate when validation accuracy stalls.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    factor: f64,
    min_lr: f64,
    threshold: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            best: f64::NEG_INFINITY,
            stale: 0,
            patience: cfg.patience,
            factor: cfg.lr_factor,
            min_lr: cfg.min_lr,
            threshold: cfg.min_improvement,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation accuracy and returns the rate for the
    /// next epoch.
    pub fn step(&mut self, val_acc: f64) -> f64 {
        if val_acc > self.best + self.threshold || self.best == f64::NEG_INFINITY {
            self.best = val_acc;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr / self.factor).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after each epoch for a sequence of validation accuracies.
pub fn plateau_schedule(val_accs: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let mut s = PlateauScheduler::new(cfg);
    val_accs.iter().map(|&a| s.step(a)).collect()
}

/// Subject indices for one leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out `held_out` for testing and one other subject, chosen by
/// `seed`, for validation.
pub fn split_louo(subject_ids: &[usize], held_out: usize, seed: u64) -> Result<Split> {
    let mut ids = subject_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(Error::Data("duplicate subject ids".into()));
    }
    if ids.len() < 3 {
        return Err(Error::Data(format!(
            "leave-one-subject-out needs at least 3 subjects, got {}",
            ids.len()
        )));
    }
    if !ids.contains(&held_out) {
        return Err(Error::Data(format!("held-out subject {held_out} not in cohort")));
    }
    let others: Vec<usize> = ids.iter().copied().filter(|&s| s != held_out).collect();
    let val = others[(seed % others.len() as u64) as usize];
    Ok(Split {
        train: others.iter().copied().filter(|&s| s != val).collect(),
        val: vec![val],
        test: vec![held_out],
    })
}

/// Valid window starts: inputs are frames `s..s+n`, targets are the `t`
/// fields starting at the last input frame.
pub fn window_starts(frames: usize, n: usize, t: usize, stride: usize) -> Vec<usize> {
    if frames < n + t || stride == 0 {
        return Vec::new();
    }
    (0..=frames - n - t).step_by(stride).collect()
}

/// Frames as tensors and fields as label maps, ready for windowing.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub frames: Vec<Tensor>,
    pub labels: Vec<MotionLabelMap>,
}

impl PreparedSequence {
    pub fn new(seq: &Sequence, codebook: &Codebook) -> Self {
        Self {
            frames: seq.frames.iter().map(|f| f.to_tensor()).collect(),
            labels: seq.fields.iter().map(|f| codebook.encode(f)).collect(),
        }
    }

    fn targets(&self, start: usize, n: usize, t: usize) -> Vec<&MotionLabelMap> {
        let last = start + n - 1;
        self.labels[last..last + t].iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub seq: usize,
    pub start: usize,
}

fn all_windows(seqs: &[PreparedSequence], n: usize, t: usize, stride: usize) -> Vec<Window> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| {
            window_starts(s.frames.len(), n, t, stride)
                .into_iter()
                .map(move |start| Window { seq: i, start })
        })
        .collect()
}

/// Loss and gradients for one window.
pub fn window_gradients(
    config: &ModelConfig,
    params: &ModelParams,
    seq: &PreparedSequence,
    start: usize,
    t: usize,
    class_weights: &[f64],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let n = config.n_inputs;
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, config, params, true)?;
    let frames: Vec<Var> = seq.frames[start..start + n]
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let loss = net.sequence_loss(&mut tape, &frames, &seq.targets(start, n, t), class_weights)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value} at window start {start}")));
    }
    Ok((value, tape.backward(loss)?.into_map()))
}

/// Matching and total pixel counts over paired label maps.
pub fn label_agreement(preds: &[MotionLabelMap], targets: &[&MotionLabelMap]) -> Result<(u64, u64)> {
    if preds.len() != targets.len() {
        return Err(Error::shape("label_agreement", "prediction and target counts differ"));
    }
    let (mut hit, mut total) = (0u64, 0u64);
    for (p, t) in preds.iter().zip(targets) {
        if (p.width, p.height) != (t.width, t.height) {
            return Err(Error::shape("label_agreement", "label map sizes differ"));
        }
        hit += p.labels.iter().zip(&t.labels).filter(|(a, b)| a == b).count() as u64;
        total += t.labels.len() as u64;
    }
    Ok((hit, total))
}

/// Per-pixel label accuracy over every window and predicted step.
pub fn validate(
    config: &ModelConfig,
    params: &ModelParams,
    seqs: &[PreparedSequence],
    t: usize,
    stride: usize,
) -> Result<f64> {
    let windows = all_windows(seqs, config.n_inputs, t, stride);
    if windows.is_empty() {
        return Err(Error::Data("validation split has no windows".into()));
    }
    let counts = par::map(&windows, |w| -> Result<(u64, u64)> {
        let seq = &seqs[w.seq];
        let n = config.n_inputs;
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, config, params, false)?;
        let frames: Vec<Var> = seq.frames[w.start..w.start + n]
            .iter()
            .map(|f| tape.constant(f.clone()))
            .collect();
        let logits = net.forward(&mut tape, &frames, t)?;
        let preds = logits
            .iter()
            .map(|l| argmax_labels(tape.value(*l)))
            .collect::<Result<Vec<_>>>()?;
        label_agreement(&preds, &seq.targets(w.start, n, t))
    });
    let (mut hit, mut total) = (0u64, 0u64);
    for c in counts {
        let (h, n) = c?;
        hit += h;
        total += n;
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    /// Wall time; kept out of the main CSV so reruns compare byte-for-byte.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,loss,val_acc,lr";
    pub const TIMING_HEADER: &'static str = "epoch,seconds";

    /// Deterministic per-epoch record. Lines starting with `#` are comments.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.val_acc, r.lr);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from(Self::TIMING_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{:.3}", r.epoch, r.seconds);
        }
        s
    }

    /// Parses [`TrainLog::to_csv`] output; `seconds` is left at zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Data("train log header mismatch".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("train log row {}: `{line}`", i + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            let f = |k: usize| cols[k].parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: cols[0].parse().map_err(|_| bad())?,
                loss: f(1)?,
                val_acc: f(2)?,
                lr: f(3)?,
                seconds: 0.0,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub last: ModelParams,
    pub log: TrainLog,
}

/// Trains from `init` on windows of `train`, selecting by accuracy on `val`.
/// Class weights come from the codebook, which must be built from the
/// training split only.
pub fn train(
    train: &[&Sequence],
    val: &[&Sequence],
    codebook: &Codebook,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.q != codebook.q {
        return Err(Error::Config(format!(
            "model has {} classes, codebook has {}",
            model_cfg.q, codebook.q
        )));
    }
    if cfg.t_train > model_cfg.t_max {
        return Err(Error::Config(format!(
            "t_train {} exceeds model t_max {}",
            cfg.t_train, model_cfg.t_max
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let prepare = |s: &[&Sequence]| -> Vec<PreparedSequence> { s.iter().map(|q| PreparedSequence::new(q, codebook)).collect() };
    let train_seqs = prepare(train);
    let val_seqs = prepare(val);
    let n = model_cfg.n_inputs;
    let t = cfg.t_train;
    let windows = all_windows(&train_seqs, n, t, cfg.window_stride);
    if windows.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    let weights = codebook.weights.clone();

    let mut params = init;
    let mut state = AdamState::default();
    let mut sched = PlateauScheduler::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order = windows.clone();
        order.shuffle(&mut rng);
        if let Some(k) = cfg.windows_per_epoch {
            order.truncate(k);
        }
        let lr = sched.lr();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.accumulation) {
            let results = par::map(batch, |w| {
                window_gradients(model_cfg, &params, &train_seqs[w.seq], w.start, t, &weights)
            });
            let mut grads: Option<BTreeMap<String, Tensor>> = None;
            for r in results {
                let (loss, g) = r.map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
                loss_sum += loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            for (a, b) in t.data_mut().iter_mut().zip(g[name].data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            adam_step(&mut params.tensors, &grads, &mut state, AdamHyper::with_lr(lr))
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            for p in params.tensors.values_mut() {
                p.round_to_f32();
            }
        }
        let loss = loss_sum / order.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: mean training loss is {loss}")));
        }
        let val_acc = validate(model_cfg, &params, &val_seqs, t, cfg.val_stride)?;
        if best.as_ref().is_none_or(|(_, b, _)| val_acc > *b) {
            best = Some((epoch, val_acc, params.clone()));
        }
        let lr_next = sched.step(val_acc);
        let record = EpochRecord {
            epoch,
            loss,
            val_acc,
            lr: lr_next,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {loss:.5} val_acc {val_acc:.4} lr {lr_next:e} ({:.1}s)",
            record.seconds
        );
        log.records.push(record);
    }
    let (best_epoch, best_val_acc, best_params) = best.ok_or_else(|| Error::Config("max_epochs must be ≥ 1".into()))?;
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        best_val_acc,
        last: params,
        log,
    })
}
