//! Randomised finite-difference checks for every tape primitive and for
//! the full model loss. Shared by unit tests and the acceptance run.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_params, grad_check_terms_with, PoolMode, Stencil, Tape, UpsampleMode, Var};
use crate::error::Result;
use crate::field::Image;
use crate::network::{loss_from_logits, loss_terms, EncoderVariant, ModelConfig, ModelParams, Network};
use crate::quantizer::MotionLabelMap;
use crate::tensor::Tensor;

pub const PRIMITIVE_EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ r` for a fixed random `r`.
fn probe(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let prod = tape.hadamard(out, r)?;
    tape.sum(prod)
}

type Primitive = fn(&mut Tape, &BTreeMap<String, Var>, &Dims) -> Result<Var>;

#[derive(Clone, Copy)]
struct Dims {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    cout: usize,
    q: usize,
}

fn input_shapes(name: &str, d: &Dims) -> Vec<(&'static str, Vec<usize>)> {
    let x = vec![d.h, d.w, d.c];
    match name {
        "conv2d" => vec![
            ("x", x),
            ("k", vec![d.k, d.k, d.c, d.cout]),
            ("b", vec![d.cout]),
        ],
        "add" | "hadamard" | "concat" => vec![("x", x.clone()), ("y", x)],
        "weighted_ce" => vec![("x", vec![d.h, d.w, d.q])],
        _ => vec![("x", x)],
    }
}

const PRIMITIVES: [(&str, Primitive); 14] = [
    ("conv2d", |t, v, _| t.conv2d(v["x"], v["k"], Some(v["b"]))),
    ("max_pool", |t, v, _| t.pool2d(v["x"], PoolMode::Max, 2)),
    ("avg_pool", |t, v, _| t.pool2d(v["x"], PoolMode::Avg, 2)),
    ("upsample_nearest", |t, v, _| t.upsample2d(v["x"], 2, UpsampleMode::Nearest)),
    ("upsample_bilinear", |t, v, _| t.upsample2d(v["x"], 2, UpsampleMode::Bilinear)),
    ("sigmoid", |t, v, _| t.sigmoid(v["x"])),
    ("tanh", |t, v, _| t.tanh(v["x"])),
    ("relu", |t, v, _| t.relu(v["x"])),
    ("scale", |t, v, _| t.scale(v["x"], -1.7)),
    ("add", |t, v, _| t.add(v["x"], v["y"])),
    ("hadamard", |t, v, _| t.hadamard(v["x"], v["y"])),
    ("concat", |t, v, _| t.concat_channels(&[v["x"], v["y"]])),
    ("sum", |t, v, _| t.sum(v["x"])),
    ("weighted_ce", |_, _, _| unreachable!("handled separately")),
];

/// Max relative error per primitive at one random seed. Shapes are drawn
/// with even extents up to 8×8 and up to 4 channels.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims {
        h: 2 * rng.random_range(1..=4),
        w: 2 * rng.random_range(1..=4),
        c: rng.random_range(1..=4),
        k: [1, 3, 5][rng.random_range(0..3)],
        cout: rng.random_range(1..=4),
        q: rng.random_range(2..=6),
    };
    let mut out = Vec::new();
    for (name, op) in PRIMITIVES {
        let params: BTreeMap<String, Tensor> = input_shapes(name, &d)
            .into_iter()
            .map(|(n, s)| (n.to_string(), rand_tensor(&mut rng, &s)))
            .collect();
        let err = if name == "weighted_ce" {
            let labels: Vec<u32> = (0..d.h * d.w).map(|_| rng.random_range(0..d.q as u32)).collect();
            let weights: Vec<f64> = (0..d.q).map(|_| rng.random_range(0.2..3.0)).collect();
            grad_check_params(
                |t, v| t.weighted_softmax_ce(v["x"], &labels, &weights),
                &params,
                PRIMITIVE_EPS,
            )?
        } else {
            // Output shape from a dry run, then a fixed random probe.
            let mut tape = Tape::new();
            let vars: BTreeMap<String, Var> = params
                .iter()
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect();
            let y = op(&mut tape, &vars, &d)?;
            let r = rand_tensor(&mut rng, tape.value(y).shape());
            grad_check_params(
                |t, v| {
                    let y = op(t, v, &d)?;
                    probe(t, y, &r)
                },
                &params,
                PRIMITIVE_EPS,
            )?
        };
        out.push((name, err.values().copied().fold(0.0, f64::max)));
    }
    Ok(out)
}

/// Small model used for the end-to-end check: 8×8 frames, three inputs,
/// two predicted steps.
pub fn composite_config(variant: EncoderVariant) -> ModelConfig {
    ModelConfig {
        encoder_variant: variant,
        base_channels: 2,
        lstm_hidden: 2,
        decoder_channels: 2,
        q: 3,
        n_inputs: 3,
        t_max: 2,
        ..ModelConfig::default()
    }
}

/// Per-tensor max relative error of the full model loss gradient at a
/// random point: fan-in initialised weights, biases jittered so some ReLUs
/// start dead, random frames, targets and class weights.
///
/// Finite differences use [`Stencil::Smooth`]: every sample must take the
/// same ReLU and max-pool branches as the base point, so the comparison is
/// against the derivative of the piece the analytic gradient describes.
/// Samples are differenced per pixel term; the loss itself is about 1.8,
/// and its rounding would otherwise swamp entries near 1e-9.
pub fn composite_check(variant: EncoderVariant, seed: u64) -> Result<BTreeMap<String, f64>> {
    let cfg = composite_config(variant);
    let mut params = ModelParams::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let frames: Vec<Tensor> = (0..cfg.n_inputs)
        .map(|_| {
            let data = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            Image::new(8, 8, data).map(|i| i.to_tensor())
        })
        .collect::<Result<_>>()?;
    let targets: Vec<MotionLabelMap> = (0..cfg.t_max)
        .map(|_| MotionLabelMap {
            width: 8,
            height: 8,
            labels: (0..64).map(|_| rng.random_range(0..cfg.q as u32)).collect(),
        })
        .collect();
    let weights: Vec<f64> = (0..cfg.q).map(|_| rng.random_range(0.5..2.0)).collect();
    let learn = params.tensors.clone();
    let tr: Vec<&MotionLabelMap> = targets.iter().collect();
    grad_check_terms_with(
        |tape, vars| {
            let net = Network::bind_vars(&cfg, vars.clone())?;
            let fv: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            let logits = net.forward(tape, &fv, tr.len())?;
            let loss = loss_from_logits(tape, &logits, &tr, &weights)?;
            let values: Vec<Tensor> = logits.iter().map(|&l| tape.value(l).clone()).collect();
            Ok((loss, loss_terms(&values, &tr, &weights)?))
        },
        &learn,
        Stencil::Smooth { h: 2e-2, min_h: 1e-6 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_on_a_few_seeds() {
        for seed in 0..4 {
            for (name, err) in primitive_checks(seed).unwrap() {
                assert!(err < 1e-5, "seed {seed} {name}: {err}");
            }
        }
    }

    #[test]
    fn composite_passes_for_both_variants() {
        for (variant, seed) in [(EncoderVariant::Multiscale, 1), (EncoderVariant::Convpool, 2)] {
            let errs = composite_check(variant, seed).unwrap();
            assert_eq!(errs.len(), ModelParams::zeros(&composite_config(variant)).unwrap().tensors.len());
            for (name, e) in &errs {
                assert!(*e < 1e-5, "{variant:?} {name}: {e}");
            }
        }
    }
}
