//! Statistical baseline: principal components of displacement fields with
//! per-component AR(2) extrapolation of the coefficients.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::io::{self, Dtype};
use crate::tensor::Tensor;

pub const DEFAULT_VAR_THRESHOLD: f64 = 0.95;
/// Ridge strength of the AR(2) fit.
pub const AR_RIDGE: f64 = 1e-6;
/// Prior the ridge pulls toward: `c_t = 2c_{t−1} − c_{t−2}`, which
/// reproduces constant and linear histories exactly.
pub const AR_PRIOR: [f64; 2] = [2.0, -1.0];
/// Roots of the AR polynomial beyond this modulus count as explosive.
pub const AR_MAX_ROOT: f64 = 1.05;
/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub width: usize,
    pub height: usize,
    pub mean: Vec<f64>,
    /// `components[k]` is a unit vector of length `2·H·W`.
    pub components: Vec<Vec<f64>>,
    /// Explained-variance ratio of each kept component.
    pub explained: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PcaMeta {
    kind: String,
    width: usize,
    height: usize,
    explained: Vec<f64>,
}

/// Top components reaching `var_threshold` cumulative explained variance.
/// A threshold of 1 keeps every component with non-zero variance.
pub fn pca_fit(fields: &[DisplacementField], var_threshold: f64) -> Result<PcaModel> {
    if fields.len() < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 fields, got {}", fields.len())));
    }
    if !(var_threshold > 0.0 && var_threshold <= 1.0) {
        return Err(Error::Config(format!("variance threshold {var_threshold} outside (0, 1]")));
    }
    let (w, h) = (fields[0].width, fields[0].height);
    if fields.iter().any(|f| !f.same_grid(&fields[0])) {
        return Err(Error::shape("pca_fit", "fields differ in size"));
    }
    let d = 2 * w * h;
    let n = fields.len();
    let rows: Vec<Vec<f64>> = fields.iter().map(DisplacementField::to_vector).collect();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);

    // Eigenvectors of the n×n Gram matrix map to those of the covariance.
    let gram = &centered * centered.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut model = PcaModel {
        width: w,
        height: h,
        mean,
        components: Vec::new(),
        explained: Vec::new(),
    };
    if total <= 0.0 {
        return Ok(model);
    }
    let mut cumulative = 0.0;
    for &i in &order {
        let lambda = eig.eigenvalues[i];
        if lambda <= RANK_TOL * top {
            break;
        }
        let v = eig.eigenvectors.column(i);
        let mut u: Vec<f64> = (centered.transpose() * v).iter().copied().collect();
        // Re-orthogonalise against earlier components, then normalise.
        for prev in &model.components {
            let dot: f64 = prev.iter().zip(&u).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        u.iter_mut().for_each(|x| *x /= norm);
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = u.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        model.components.push(u);
        let ratio = lambda / total;
        model.explained.push(ratio);
        cumulative += ratio;
        if cumulative >= var_threshold - 1e-12 && var_threshold < 1.0 {
            break;
        }
    }
    Ok(model)
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    fn check(&self, f: &DisplacementField) -> Result<()> {
        if (f.width, f.height) != (self.width, self.height) {
            return Err(Error::shape(
                "pca",
                format!("field {}×{} vs model {}×{}", f.width, f.height, self.width, self.height),
            ));
        }
        Ok(())
    }

    /// `componentsᵀ · (field − mean)`.
    pub fn coeffs(&self, field: &DisplacementField) -> Result<Vec<f64>> {
        self.check(field)?;
        let x = field.to_vector();
        Ok(self
            .components
            .iter()
            .map(|u| u.iter().zip(&x).zip(&self.mean).map(|((u, x), m)| u * (x - m)).sum())
            .collect())
    }

    /// `mean + components · coeffs`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<DisplacementField> {
        if coeffs.len() != self.k() {
            return Err(Error::shape("pca_reconstruct", format!("{} coefficients for {} components", coeffs.len(), self.k())));
        }
        let mut v = self.mean.clone();
        for (c, u) in coeffs.iter().zip(&self.components) {
            v.iter_mut().zip(u).for_each(|(x, u)| *x += c * u);
        }
        DisplacementField::from_vector(self.width, self.height, &v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(PcaMeta {
            kind: "pca".into(),
            width: self.width,
            height: self.height,
            explained: self.explained.clone(),
        })?;
        let d = self.mean.len();
        let mean = Tensor::new(vec![d], self.mean.clone())?;
        let comps = Tensor::new(vec![self.k(), d], self.components.concat())?;
        io::encode_container_typed(&meta, &[("mean", &mean, Dtype::F64), ("components", &comps, Dtype::F64)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = io::decode_container(bytes)?;
        let meta: PcaMeta = serde_json::from_value(meta).map_err(|e| Error::Data(format!("PCA header: {e}")))?;
        if meta.kind != "pca" {
            return Err(Error::Data("container does not hold a PCA model".into()));
        }
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("PCA container lacks `{name}`")))
        };
        let mean = find("mean")?;
        let comps = find("components")?;
        let d = 2 * meta.width * meta.height;
        if mean.shape() != [d] || comps.shape() != [meta.explained.len(), d] {
            return Err(Error::Data("PCA tensor shapes disagree with header".into()));
        }
        Ok(Self {
            width: meta.width,
            height: meta.height,
            mean: mean.data().to_vec(),
            components: comps.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
            explained: meta.explained,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?)
    }
}

/// AR(2) fit of one coefficient history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ar2 {
    pub a1: f64,
    pub a2: f64,
}

impl Ar2 {
    /// Ridge least squares for `c_t ≈ a1·c_{t−1} + a2·c_{t−2}`, pulled
    /// toward [`AR_PRIOR`]. Returns `None` for a non-finite or explosive fit.
    pub fn fit(history: &[f64]) -> Option<Self> {
        if history.len() < 3 {
            return None;
        }
        let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for w in history.windows(3) {
            let (x1, x2, y) = (w[1], w[0], w[2]);
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            r1 += x1 * y;
            r2 += x2 * y;
        }
        // Solve (S + rI) a = r + r·prior.
        let (p1, p2) = (AR_PRIOR[0], AR_PRIOR[1]);
        let (m11, m12, m22) = (s11 + AR_RIDGE, s12, s22 + AR_RIDGE);
        let (b1, b2) = (r1 + AR_RIDGE * p1, r2 + AR_RIDGE * p2);
        let det = m11 * m22 - m12 * m12;
        let a1 = (b1 * m22 - b2 * m12) / det;
        let a2 = (m11 * b2 - m12 * b1) / det;
        let fit = Self { a1, a2 };
        (a1.is_finite() && a2.is_finite() && fit.max_root_modulus() <= AR_MAX_ROOT).then_some(fit)
    }

    /// Largest root modulus of `z² − a1·z − a2`.
    pub fn max_root_modulus(&self) -> f64 {
        let disc = self.a1 * self.a1 + 4.0 * self.a2;
        if disc >= 0.0 {
            let s = disc.sqrt();
            ((self.a1 + s) / 2.0).abs().max(((self.a1 - s) / 2.0).abs())
        } else {
            // Complex pair: |z|² = −a2.
            (-self.a2).sqrt()
        }
    }

    pub fn roll(&self, history: &[f64], steps: usize) -> Vec<f64> {
        let mut prev2 = history[history.len() - 2];
        let mut prev1 = history[history.len() - 1];
        (0..steps)
            .map(|_| {
                let next = self.a1 * prev1 + self.a2 * prev2;
                prev2 = prev1;
                prev1 = next;
                next
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PcaPrediction {
    pub fields: Vec<DisplacementField>,
    /// Components that fell back to holding their last coefficient.
    pub held: Vec<usize>,
}

/// Extrapolates `t` fields after the observed ones.
pub fn pca_predict(observed: &[DisplacementField], model: &PcaModel, t: usize) -> Result<PcaPrediction> {
    if observed.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA extrapolation needs at least 3 observed fields, got {}",
            observed.len()
        )));
    }
    let coeffs = observed.iter().map(|f| model.coeffs(f)).collect::<Result<Vec<_>>>()?;
    let mut future = vec![vec![0.0; model.k()]; t];
    let mut held = Vec::new();
    for k in 0..model.k() {
        let history: Vec<f64> = coeffs.iter().map(|c| c[k]).collect();
        let rolled = match Ar2::fit(&history) {
            Some(ar) => ar.roll(&history, t),
            None => {
                held.push(k);
                vec![*history.last().expect("non-empty"); t]
            }
        };
        for (step, v) in rolled.into_iter().enumerate() {
            future[step][k] = v;
        }
    }
    let fields = future.iter().map(|c| model.reconstruct(c)).collect::<Result<_>>()?;
    Ok(PcaPrediction { fields, held })
}
