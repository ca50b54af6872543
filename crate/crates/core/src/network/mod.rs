//! Recurrent encoder-decoder for motion-label prediction.
//!
//! Each input frame passes through the encoder (two multi-scale blocks or,
//! for the baseline, two conv layers, each followed by 2× max pooling).
//! A ConvLSTM consumes the encoded frames; its hidden state is decoded to
//! per-pixel class logits. Later steps are produced autoregressively by
//! feeding a 1×1 projection of the hidden state back in as the next input.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PoolMode, Tape, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::field::Image;
use crate::io;
use crate::quantizer::MotionLabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Multiscale,
    Convpool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_variant: EncoderVariant,
    /// Encoder output channels `F`.
    pub base_channels: usize,
    pub lstm_hidden: usize,
    pub decoder_channels: usize,
    pub kernel_size: usize,
    /// Number of motion classes.
    pub q: usize,
    pub n_inputs: usize,
    pub t_max: usize,
    /// Width of the first conv-pool layer; derived from the multi-scale
    /// parameter count when absent.
    pub convpool_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_variant: EncoderVariant::Multiscale,
            base_channels: 16,
            lstm_hidden: 32,
            decoder_channels: 16,
            kernel_size: 3,
            q: 25,
            n_inputs: 5,
            t_max: 5,
            convpool_channels: None,
        }
    }
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy)]
enum Init {
    Kernel { fan_in: usize, gain: f64 },
    Const(f64),
}

fn ms_param_count(k: usize, cin: usize, f: usize) -> usize {
    3 * (k * k * cin * f + f) + (3 * f * f + f)
}

fn convpool_param_count(k: usize, c1: usize, f: usize) -> usize {
    (k * k * c1 + c1) + (k * k * c1 * f + f)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.base_channels == 0 || self.lstm_hidden == 0 || self.decoder_channels == 0 || self.q < 2 {
            return Err(Error::Config("channel counts must be positive and q ≥ 2".into()));
        }
        if self.n_inputs == 0 || self.t_max == 0 {
            return Err(Error::Config("n_inputs and t_max must be positive".into()));
        }
        Ok(())
    }

    /// Frame extents must be multiples of this. The second multi-scale
    /// block runs at half resolution and pools by 4 internally, so the
    /// multi-scale encoder needs 8.
    pub fn frame_multiple(&self) -> usize {
        match self.encoder_variant {
            EncoderVariant::Multiscale => 8,
            EncoderVariant::Convpool => 4,
        }
    }

    pub fn check_frame_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.frame_multiple();
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(Error::shape(
                "model input",
                format!("frame {height}×{width} must have extents divisible by {m}"),
            ));
        }
        Ok(())
    }

    /// Parameter count of the multi-scale encoder.
    pub fn multiscale_encoder_params(&self) -> usize {
        let (k, f) = (self.kernel_size, self.base_channels);
        ms_param_count(k, 1, f) + ms_param_count(k, f, f)
    }

    /// First conv-pool width, matched to the multi-scale encoder's size.
    pub fn convpool_width(&self) -> usize {
        if let Some(c) = self.convpool_channels {
            return c;
        }
        let target = self.multiscale_encoder_params() as f64;
        let (k, f) = (self.kernel_size, self.base_channels);
        (1..=4096)
            .min_by(|&a, &b| {
                let da = (convpool_param_count(k, a, f) as f64 - target).abs();
                let db = (convpool_param_count(k, b, f) as f64 - target).abs();
                da.total_cmp(&db)
            })
            .expect("non-empty range")
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let k = self.kernel_size;
        let (f, hd, d, q) = (self.base_channels, self.lstm_hidden, self.decoder_channels, self.q);
        let relu_gain = 2f64.sqrt();
        let mut specs = Vec::new();
        let mut conv = |name: &str, k: usize, cin: usize, cout: usize, gain: f64, bias: Option<f64>| {
            specs.push((
                format!("{name}.w"),
                vec![k, k, cin, cout],
                Init::Kernel { fan_in: k * k * cin, gain },
            ));
            if let Some(b) = bias {
                specs.push((format!("{name}.b"), vec![cout], Init::Const(b)));
            }
        };
        match self.encoder_variant {
            EncoderVariant::Multiscale => {
                for (block, cin) in [("enc.ms1", 1), ("enc.ms2", f)] {
                    for branch in ["full", "mid", "low"] {
                        conv(&format!("{block}.{branch}"), k, cin, f, relu_gain, Some(0.0));
                    }
                    conv(&format!("{block}.fuse"), 1, 3 * f, f, relu_gain, Some(0.0));
                }
            }
            EncoderVariant::Convpool => {
                let c1 = self.convpool_width();
                conv("enc.cp1", k, 1, c1, relu_gain, Some(0.0));
                conv("enc.cp2", k, c1, f, relu_gain, Some(0.0));
            }
        }
        for g in GATES {
            let bias = if g == "f" { FORGET_BIAS } else { 0.0 };
            conv(&format!("lstm.x{g}"), k, f, hd, 1.0, Some(bias));
            conv(&format!("lstm.h{g}"), k, hd, hd, 1.0, None);
        }
        conv("rollout", 1, hd, f, 1.0, Some(0.0));
        conv("dec.conv1", k, hd, d, relu_gain, Some(0.0));
        conv("dec.conv2", k, d, d, relu_gain, Some(0.0));
        conv("dec.head", 1, d, q, 1.0, Some(0.0));
        specs
    }
}

/// Named model tensors, kept on the `f32` grid so checkpoints round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Uniform fan-in initialisation; biases zero except the forget gate.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in config.param_specs() {
            let mut t = match init {
                Init::Kernel { fan_in, gain } => {
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
                Init::Const(v) => Tensor::full(&shape, v),
            };
            t.round_to_f32();
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Same structure with every value set to zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            tensors: config
                .param_specs()
                .into_iter()
                .map(|(n, s, _)| (n, Tensor::zeros(&s)))
                .collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "model has {} tensors, config expects {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in specs {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Data(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Data(format!("checkpoint lacks tensor `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, config: &ModelConfig, meta: serde_json::Value) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "kind": "model",
            "config": config,
            "meta": meta,
        });
        let list: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        io::encode_container(&header, &list)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, Self, serde_json::Value)> {
        let (header, tensors) = io::decode_container(bytes)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("model") {
            return Err(Error::Data("container does not hold a model".into()));
        }
        let config: ModelConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Data(format!("model config: {e}")))?;
        let params = Self {
            tensors: tensors.into_iter().collect(),
        };
        params.check_against(&config)?;
        Ok((config, params, header["meta"].clone()))
    }

    pub fn save(&self, path: &Path, config: &ModelConfig, meta: serde_json::Value) -> Result<()> {
        io::write_atomic(path, &self.to_bytes(config, meta)?)
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, Self, serde_json::Value)> {
        Self::from_bytes(&io::read(path)?)
    }
}

/// ConvLSTM hidden and cell state.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Model parameters bound to a tape.
pub struct Network<'a> {
    config: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl<'a> Network<'a> {
    /// Registers every parameter on `tape`, as learnable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(tape: &mut Tape, config: &'a ModelConfig, params: &ModelParams, trainable: bool) -> Result<Self> {
        config.validate()?;
        params.check_against(config)?;
        let mut vars = BTreeMap::new();
        for (name, t) in &params.tensors {
            let v = if trainable {
                tape.param(name.clone(), t.clone())?
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Ok(Self { config, vars })
    }

    /// Wraps parameter handles already on a tape.
    pub fn bind_vars(config: &'a ModelConfig, vars: BTreeMap<String, Var>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_specs();
        if expected.len() != vars.len() || expected.iter().any(|(n, _, _)| !vars.contains_key(n)) {
            return Err(Error::InvalidArgument("parameter handles do not match the config".into()));
        }
        Ok(Self { config, vars })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let b = self.vars.get(&format!("{name}.b")).copied();
        tape.conv2d(x, self.var(&format!("{name}.w")), b)
    }

    fn conv_relu(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(tape, x, name)?;
        tape.relu(y)
    }

    /// Full, half and quarter resolution branches fused by a 1×1 conv.
    pub fn ms_block(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let (h, w, _) = tape.value(x).hwc()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("ms_block", format!("extents {h}×{w} not divisible by 4")));
        }
        let full = self.conv_relu(tape, x, &format!("{prefix}.full"))?;

        let half = tape.pool2d(x, PoolMode::Avg, 2)?;
        let mid = self.conv_relu(tape, half, &format!("{prefix}.mid"))?;
        let mid = tape.upsample2d(mid, 2, UpsampleMode::Bilinear)?;

        let quarter = tape.pool2d(x, PoolMode::Avg, 4)?;
        let low = self.conv_relu(tape, quarter, &format!("{prefix}.low"))?;
        let low = tape.upsample2d(low, 4, UpsampleMode::Bilinear)?;

        let cat = tape.concat_channels(&[full, mid, low])?;
        self.conv_relu(tape, cat, &format!("{prefix}.fuse"))
    }

    /// `H × W × 1` frame → `(H/4) × (W/4) × F` features.
    pub fn encode_frame(&self, tape: &mut Tape, frame: Var) -> Result<Var> {
        let (h, w, _) = tape.value(frame).hwc()?;
        self.config.check_frame_size(h, w)?;
        match self.config.encoder_variant {
            EncoderVariant::Multiscale => {
                let a = self.ms_block(tape, frame, "enc.ms1")?;
                let a = tape.pool2d(a, PoolMode::Max, 2)?;
                let b = self.ms_block(tape, a, "enc.ms2")?;
                tape.pool2d(b, PoolMode::Max, 2)
            }
            EncoderVariant::Convpool => {
                let a = self.conv_relu(tape, frame, "enc.cp1")?;
                let a = tape.pool2d(a, PoolMode::Max, 2)?;
                let b = self.conv_relu(tape, a, "enc.cp2")?;
                tape.pool2d(b, PoolMode::Max, 2)
            }
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, h: usize, w: usize) -> LstmState {
        let shape = [h, w, self.config.lstm_hidden];
        LstmState {
            hidden: tape.constant(Tensor::zeros(&shape)),
            cell: tape.constant(Tensor::zeros(&shape)),
        }
    }

    fn gate(&self, tape: &mut Tape, x: Var, h: Var, g: &str) -> Result<Var> {
        let from_x = self.conv(tape, x, &format!("lstm.x{g}"))?;
        let from_h = self.conv(tape, h, &format!("lstm.h{g}"))?;
        tape.add(from_x, from_h)
    }

    /// One ConvLSTM update.
    pub fn convlstm_step(&self, tape: &mut Tape, x: Var, state: LstmState) -> Result<LstmState> {
        let xs = tape.value(x).hwc()?;
        let hs = tape.value(state.hidden).hwc()?;
        if (xs.0, xs.1) != (hs.0, hs.1) || hs.2 != self.config.lstm_hidden {
            return Err(Error::shape(
                "convlstm_step",
                format!("input {xs:?} incompatible with state {hs:?}"),
            ));
        }
        let pre_i = self.gate(tape, x, state.hidden, "i")?;
        let i = tape.sigmoid(pre_i)?;
        let pre_f = self.gate(tape, x, state.hidden, "f")?;
        let f = tape.sigmoid(pre_f)?;
        let pre_o = self.gate(tape, x, state.hidden, "o")?;
        let o = tape.sigmoid(pre_o)?;
        let pre_g = self.gate(tape, x, state.hidden, "g")?;
        let g = tape.tanh(pre_g)?;

        let keep = tape.hadamard(f, state.cell)?;
        let write = tape.hadamard(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell)?;
        let hidden = tape.hadamard(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }

    /// Hidden state → `H × W × Q` logits.
    pub fn decode_state(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let up = tape.upsample2d(hidden, 2, UpsampleMode::Bilinear)?;
        let a = self.conv_relu(tape, up, "dec.conv1")?;
        let up = tape.upsample2d(a, 2, UpsampleMode::Bilinear)?;
        let b = self.conv_relu(tape, up, "dec.conv2")?;
        self.conv(tape, b, "dec.head")
    }

    /// Logits for the `t` motion steps following the last input frame.
    pub fn forward(&self, tape: &mut Tape, frames: &[Var], t: usize) -> Result<Vec<Var>> {
        if frames.len() != self.config.n_inputs {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input frames, got {}",
                self.config.n_inputs,
                frames.len()
            )));
        }
        if t == 0 || t > self.config.t_max {
            return Err(Error::InvalidArgument(format!(
                "prediction horizon {t} outside 1..={}",
                self.config.t_max
            )));
        }
        let (h, w, _) = tape.value(frames[0]).hwc()?;
        self.config.check_frame_size(h, w)?;
        for &f in frames {
            if tape.value(f).shape() != [h, w, 1] {
                return Err(Error::shape("forward", "input frames differ in shape"));
            }
        }
        let mut state = self.zero_state(tape, h / 4, w / 4);
        for &frame in frames {
            let feat = self.encode_frame(tape, frame)?;
            state = self.convlstm_step(tape, feat, state)?;
        }
        let mut outputs = Vec::with_capacity(t);
        outputs.push(self.decode_state(tape, state.hidden)?);
        for _ in 1..t {
            let x = self.conv(tape, state.hidden, "rollout")?;
            state = self.convlstm_step(tape, x, state)?;
            outputs.push(self.decode_state(tape, state.hidden)?);
        }
        Ok(outputs)
    }

    /// Mean weighted cross entropy over the predicted steps.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        frames: &[Var],
        targets: &[&MotionLabelMap],
        class_weights: &[f64],
    ) -> Result<Var> {
        let logits = self.forward(tape, frames, targets.len())?;
        loss_from_logits(tape, &logits, targets, class_weights)
    }
}

/// Class-weighted cross-entropy averaged over pixels and then over steps.
pub fn loss_from_logits(
    tape: &mut Tape,
    logits: &[Var],
    targets: &[&MotionLabelMap],
    class_weights: &[f64],
) -> Result<Var> {
    if logits.len() != targets.len() || targets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} logit maps for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (l, target) in logits.iter().zip(targets) {
        let ce = tape.weighted_softmax_ce(*l, &target.labels, class_weights)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let total = total.expect("at least one step");
    tape.scale(total, 1.0 / targets.len() as f64)
}

/// Per-pixel contributions to [`loss_from_logits`], computed from logit
/// values. They sum to the loss up to rounding.
pub fn loss_terms(logits: &[Tensor], targets: &[&MotionLabelMap], class_weights: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (l, target) in logits.iter().zip(targets) {
        let (h, w, q) = l.hwc()?;
        let scale = 1.0 / (h * w * targets.len()) as f64;
        for (row, &label) in l.data().chunks_exact(q).zip(&target.labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let k = label as usize;
            out.push(class_weights[k] * (lse - row[k]) * scale);
        }
    }
    Ok(out)
}

/// Per-pixel argmax, ties resolved to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Result<MotionLabelMap> {
    let (h, w, q) = logits.hwc()?;
    let labels = logits
        .data()
        .chunks_exact(q)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    Ok(MotionLabelMap {
        width: w,
        height: h,
        labels,
    })
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: Vec<MotionLabelMap>,
    pub logits: Vec<Tensor>,
}

/// Predicts `t` label maps from exactly `n_inputs` frames.
pub fn predict_sequence(config: &ModelConfig, params: &ModelParams, frames: &[Image], t: usize) -> Result<Prediction> {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, config, params, false)?;
    let inputs: Vec<Var> = frames.iter().map(|f| tape.constant(f.to_tensor())).collect();
    let outs = net.forward(&mut tape, &inputs, t)?;
    let logits: Vec<Tensor> = outs.iter().map(|&v| tape.value(v).clone()).collect();
    let labels = logits.iter().map(argmax_labels).collect::<Result<_>>()?;
    Ok(Prediction { labels, logits })
}
