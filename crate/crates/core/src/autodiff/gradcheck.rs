//! Central finite-difference checks of tape gradients.

use std::collections::BTreeMap;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", format!("function must be scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Max relative error between the tape gradient of `f` at `point` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync + Send,
{
    let mut params = BTreeMap::new();
    params.insert("x".to_string(), point.clone());
    let errs = grad_check_params(|tape, vars| f(tape, vars["x"]), &params, eps)?;
    Ok(errs["x"])
}

/// Finite-difference stencil used by [`grad_check_params_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`.
    Central(f64),
    /// Fourth-order central difference with step `h`.
    Central4(f64),
    /// Richardson-extrapolated fourth-order differences starting at step
    /// `h`, halved until every sample lies in the same smooth region as
    /// the base point (see [`Tape::branch_signature`]). Never goes below
    /// `min_h`.
    Smooth { h: f64, min_h: f64 },
}

/// Per-parameter max relative error for a scalar function of several named tensors.
pub fn grad_check_params<F>(f: F, params: &BTreeMap<String, Tensor>, eps: f64) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync + Send,
{
    grad_check_params_with(f, params, Stencil::Central(eps))
}

/// [`grad_check_params`] with an explicit stencil.
pub fn grad_check_params_with<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    stencil: Stencil,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync + Send,
{
    grad_check_terms_with(
        |tape, vars| {
            let out = f(tape, vars)?;
            let value = scalar_of(tape, out)?;
            Ok((out, vec![value]))
        },
        params,
        stencil,
    )
}

/// Like [`grad_check_params_with`], but `f` also returns its value split
/// into additive terms. Finite differences sum `term(x + δ) − term(x)`
/// over terms, so they resolve changes well below one ulp of the total.
/// The terms must sum to the scalar within `1e-9 · (1 + |value|)`.
pub fn grad_check_terms_with<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    stencil: Stencil,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<(Var, Vec<f64>)> + Sync + Send,
{
    let eval = |overrides: Option<(&str, usize, f64)>| -> Result<(Tape, Var, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in params {
            let mut t = t.clone();
            if let Some((n, i, delta)) = overrides {
                if n == name {
                    t.data_mut()[i] += delta;
                }
            }
            vars.insert(name.clone(), tape.param(name.clone(), t)?);
        }
        let (out, terms) = f(&mut tape, &vars)?;
        Ok((tape, out, terms))
    };

    let (mut tape, out, base_terms) = eval(None)?;
    let value = scalar_of(&tape, out)?;
    let summed: f64 = base_terms.iter().sum();
    if (summed - value).abs() > 1e-9 * (1.0 + value.abs()) {
        return Err(Error::InvalidArgument(format!(
            "grad_check terms sum to {summed}, function value is {value}"
        )));
    }
    let base_signature = tape.branch_signature();
    let grads = tape.backward(out)?;

    let coords: Vec<(&str, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.as_str(), i)))
        .collect();
    let errs = par::map(&coords, |&(name, i)| -> Result<f64> {
        // Value relative to the base point.
        let sample = |delta: f64| -> Result<(f64, u64)> {
            let (t, _, terms) = eval(Some((name, i, delta)))?;
            if terms.len() != base_terms.len() {
                return Err(Error::shape("grad_check", "term count changed between samples"));
            }
            let diff = terms.iter().zip(&base_terms).map(|(a, b)| a - b).sum();
            Ok((diff, t.branch_signature()))
        };
        let at = |delta: f64| sample(delta).map(|s| s.0);
        let d4 = |fp: f64, fm: f64, f2p: f64, f2m: f64, h: f64| (8.0 * (fp - fm) - (f2p - f2m)) / (12.0 * h);
        let numeric = match stencil {
            Stencil::Central(eps) => (at(eps)? - at(-eps)?) / (2.0 * eps),
            Stencil::Central4(h) => d4(at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?, h),
            Stencil::Smooth { h, min_h } => {
                let mut h = h;
                loop {
                    // Samples at ±h/2, ±h, ±2h serve both step sizes.
                    let offsets = [0.5, 1.0, 2.0];
                    let mut plus = [0.0; 3];
                    let mut minus = [0.0; 3];
                    let mut smooth = true;
                    for (k, o) in offsets.iter().enumerate() {
                        let (fp, sp) = sample(o * h)?;
                        let (fm, sm) = sample(-o * h)?;
                        plus[k] = fp;
                        minus[k] = fm;
                        smooth &= sp == base_signature && sm == base_signature;
                    }
                    if smooth || h / 2.0 < min_h {
                        let coarse = d4(plus[1], minus[1], plus[2], minus[2], h);
                        let fine = d4(plus[0], minus[0], plus[1], minus[1], h / 2.0);
                        break fine + (fine - coarse) / 15.0;
                    }
                    h /= 2.0;
                }
            }
        };
        let analytic = grads.get(name).expect("registered parameter").data()[i];
        Ok(relative_error(analytic, numeric))
    });

    let mut worst: BTreeMap<String, f64> = params.keys().map(|k| (k.clone(), 0.0)).collect();
    for (&(name, _), e) in coords.iter().zip(errs) {
        let e = e?;
        let slot = worst.get_mut(name).expect("known name");
        *slot = slot.max(e);
    }
    Ok(worst)
}
