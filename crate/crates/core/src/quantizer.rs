//! Displacement-field quantization into `Q = b²` motion classes.
//!
//! Each axis is split into `b` bins whose edges sit at the minimum, the
//! maximum, and symmetric multiples of the standard deviation around the
//! mean. A pixel's class is `ix · b + iy`, where `ix`/`iy` are its x/y
//! bin indices. Decoding maps a class back to the bin midpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Axes whose standard deviation falls below this are treated as constant.
pub const DEGENERATE_STD: f64 = 1e-9;
/// Bin width used around the mean of a constant axis.
pub const DEGENERATE_BIN_WIDTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl AxisStats {
    /// Population statistics.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no displacement samples".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Self {
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub x: AxisStats,
    pub y: AxisStats,
}

/// Per-axis bin edges and representatives plus class-rebalancing weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    pub b: usize,
    pub q: usize,
    pub edges_x: Vec<f64>,
    pub edges_y: Vec<f64>,
    pub reps_x: Vec<f64>,
    pub reps_y: Vec<f64>,
    pub stats: CodebookStats,
    pub lambda: f64,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub histogram: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    /// Leave-one-subject-out fold whose training split built the codebook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitTag {
    pub held_out: usize,
    pub split_seed: u64,
}

/// Per-pixel class indices in `[0, Q)`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl MotionLabelMap {
    /// `H × W × Q` one-hot expansion.
    pub fn one_hot(&self, q: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros(&[self.height, self.width, q]);
        for (px, &l) in self.labels.iter().enumerate() {
            if l as usize >= q {
                return Err(Error::InvalidArgument(format!("label {l} out of range for Q = {q}")));
            }
            t.data_mut()[px * q + l as usize] = 1.0;
        }
        Ok(t)
    }

    pub fn histogram(&self, q: usize) -> Vec<u64> {
        let mut h = vec![0u64; q];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

fn interior_edges(s: &AxisStats, b: usize) -> Vec<f64> {
    let (mu, sigma) = (s.mean, s.std);
    if b % 2 == 1 {
        let m = b / 2;
        let denom = (2 * m - 1) as f64;
        let fracs: Vec<f64> = (1..=m).map(|j| (2 * j - 1) as f64 / denom).collect();
        fracs
            .iter()
            .rev()
            .map(|f| mu - sigma * f)
            .chain(fracs.iter().map(|f| mu + sigma * f))
            .collect()
    } else if b == 2 {
        vec![mu]
    } else {
        (0..=b - 2)
            .map(|j| mu - sigma + 2.0 * sigma * j as f64 / (b - 2) as f64)
            .collect()
    }
}

/// Edges for one axis; the flag reports the degenerate-axis fallback.
pub fn axis_edges(s: &AxisStats, b: usize) -> (Vec<f64>, bool) {
    if s.std <= DEGENERATE_STD {
        let half = b as f64 / 2.0;
        let edges = (0..=b)
            .map(|k| s.mean + DEGENERATE_BIN_WIDTH * (k as f64 - half))
            .collect();
        return (edges, true);
    }
    let mut edges = Vec::with_capacity(b + 1);
    edges.push(s.min);
    edges.extend(interior_edges(s, b));
    edges.push(s.max);
    if edges.windows(2).all(|w| w[0] < w[1]) {
        (edges, false)
    } else {
        let uniform = (0..=b)
            .map(|k| s.min + (s.max - s.min) * k as f64 / b as f64)
            .collect();
        (uniform, false)
    }
}

fn midpoints(edges: &[f64]) -> Vec<f64> {
    edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Bin of `v` under right-exclusive bins; the last bin is closed and
/// out-of-range values are clamped first.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    let b = edges.len() - 1;
    let v = v.clamp(edges[0], edges[b]);
    edges[1..b].partition_point(|&e| e <= v)
}

/// Builds the codebook from every pixel of every field. Weights use
/// [`DEFAULT_LAMBDA`] and the label histogram of the same fields.
pub fn build_codebook(fields: &[DisplacementField], b: usize) -> Result<Codebook> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("cannot build a codebook from zero fields".into()));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins per axis, got {b}")));
    }
    let xs: Vec<f64> = fields.iter().flat_map(|f| f.dx.iter().copied()).collect();
    let ys: Vec<f64> = fields.iter().flat_map(|f| f.dy.iter().copied()).collect();
    let stats = CodebookStats {
        x: AxisStats::of(&xs)?,
        y: AxisStats::of(&ys)?,
    };
    let (edges_x, dx) = axis_edges(&stats.x, b);
    let (edges_y, dy) = axis_edges(&stats.y, b);
    for (axis, degenerate) in [("x", dx), ("y", dy)] {
        if degenerate {
            log::warn!("displacement axis {axis} is constant; using degenerate bins around its mean");
        }
    }
    let q = b * b;
    let mut cb = Codebook {
        b,
        q,
        reps_x: midpoints(&edges_x),
        reps_y: midpoints(&edges_y),
        edges_x,
        edges_y,
        stats,
        lambda: DEFAULT_LAMBDA,
        weights: vec![1.0; q],
        histogram: vec![0; q],
        digest: None,
        split: None,
    };
    let mut hist = vec![0u64; q];
    for f in fields {
        for (h, c) in hist.iter_mut().zip(cb.encode(f).histogram(q)) {
            *h += c;
        }
    }
    cb.reweight(&hist, DEFAULT_LAMBDA)?;
    Ok(cb)
}

/// Rebalancing weights `w_q ∝ 1 / ((1 − λ) p̃_q + λ / Q)` with `Σ p̃_q w_q = 1`.
pub fn class_weights(histogram: &[u64], lambda: f64) -> Result<Vec<f64>> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("class histogram is empty".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 && histogram.contains(&0) {
        return Err(Error::InvalidArgument(
            "lambda = 0 with an empty class gives an unbounded weight".into(),
        ));
    }
    let q = histogram.len() as f64;
    let p: Vec<f64> = histogram.iter().map(|&c| c as f64 / total as f64).collect();
    let raw: Vec<f64> = p.iter().map(|pq| 1.0 / ((1.0 - lambda) * pq + lambda / q)).collect();
    let norm: f64 = p.iter().zip(&raw).map(|(pq, w)| pq * w).sum();
    Ok(raw.into_iter().map(|w| w / norm).collect())
}

impl Codebook {
    pub fn reweight(&mut self, histogram: &[u64], lambda: f64) -> Result<()> {
        if histogram.len() != self.q {
            return Err(Error::shape("class_weights", format!("{} counts for Q = {}", histogram.len(), self.q)));
        }
        self.weights = class_weights(histogram, lambda)?;
        self.lambda = lambda;
        self.histogram = histogram.to_vec();
        Ok(())
    }

    pub fn classify(&self, dx: f64, dy: f64) -> u32 {
        (bin_index(&self.edges_x, dx) * self.b + bin_index(&self.edges_y, dy)) as u32
    }

    pub fn representative(&self, label: u32) -> Result<(f64, f64)> {
        let l = label as usize;
        if l >= self.q {
            return Err(Error::InvalidArgument(format!("label {label} out of range for Q = {}", self.q)));
        }
        Ok((self.reps_x[l / self.b], self.reps_y[l % self.b]))
    }

    pub fn encode(&self, field: &DisplacementField) -> MotionLabelMap {
        MotionLabelMap {
            width: field.width,
            height: field.height,
            labels: field
                .dx
                .iter()
                .zip(&field.dy)
                .map(|(&x, &y)| self.classify(x, y))
                .collect(),
        }
    }

    pub fn decode(&self, labels: &MotionLabelMap) -> Result<DisplacementField> {
        let mut dx = Vec::with_capacity(labels.labels.len());
        let mut dy = Vec::with_capacity(labels.labels.len());
        for &l in &labels.labels {
            let (x, y) = self.representative(l)?;
            dx.push(x);
            dy.push(y);
        }
        DisplacementField::new(labels.width, labels.height, dx, dy)
    }

    /// Half the width of the widest bin on each axis.
    pub fn half_bin_widths(&self) -> (f64, f64) {
        let widest = |e: &[f64]| e.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        (0.5 * widest(&self.edges_x), 0.5 * widest(&self.edges_y))
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.b;
        let ok = b >= 2
            && self.q == b * b
            && self.edges_x.len() == b + 1
            && self.edges_y.len() == b + 1
            && self.reps_x.len() == b
            && self.reps_y.len() == b
            && self.weights.len() == self.q;
        if !ok {
            return Err(Error::Data("codebook arrays inconsistent with b".into()));
        }
        for (edges, reps) in [(&self.edges_x, &self.reps_x), (&self.edges_y, &self.reps_y)] {
            if !edges.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Data("codebook edges are not strictly increasing".into()));
            }
            if !reps.iter().enumerate().all(|(k, &r)| edges[k] < r && r < edges[k + 1]) {
                return Err(Error::Data("codebook representative outside its bin".into()));
            }
        }
        if !self.weights.iter().all(|&w| w > 0.0 && w.is_finite()) {
            return Err(Error::Data("class weights must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cb: Codebook = serde_json::from_str(s).map_err(|e| Error::Data(format!("codebook json: {e}")))?;
        cb.validate()?;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_codebook() -> Codebook {
        let dx = vec![-3.0, -1.0, 0.0, 1.0, 3.0];
        let f = DisplacementField::new(5, 1, dx.clone(), dx).unwrap();
        build_codebook(&[f], 5).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn hand_statistics_codebook() {
        let cb = hand_codebook();
        assert_eq!(cb.stats.x, AxisStats { mean: 0.0, std: 2.0, min: -3.0, max: 3.0 });
        assert!(close(&cb.edges_x, &[-3.0, -2.0, -2.0 / 3.0, 2.0 / 3.0, 2.0, 3.0]));
        assert!(close(&cb.reps_x, &[-2.5, -4.0 / 3.0, 0.0, 4.0 / 3.0, 2.5]));
        assert_eq!(cb.q, 25);
        cb.validate().unwrap();
    }

    #[test]
    fn encode_examples() {
        let cb = hand_codebook();
        assert_eq!(cb.classify(0.0, 0.0), 12);
        assert_eq!(cb.classify(-3.0, -3.0), 0);
        assert_eq!(cb.classify(10.0, 10.0), 24);
        assert_eq!(cb.classify(-2.0, 3.0), 9);
    }

    #[test]
    fn decode_examples() {
        let cb = hand_codebook();
        assert_eq!(cb.representative(12).unwrap(), (0.0, 0.0));
        assert_eq!(cb.representative(0).unwrap(), (-2.5, -2.5));
        let bad = MotionLabelMap { width: 1, height: 1, labels: vec![25] };
        assert!(cb.decode(&bad).is_err());
    }

    #[test]
    fn constant_displacements_fall_back_to_degenerate_bins() {
        let f = DisplacementField::constant(4, 4, 1.25, -0.5);
        let cb = build_codebook(&[f.clone()], 5).unwrap();
        cb.validate().unwrap();
        let labels = cb.encode(&f);
        assert!(labels.labels.iter().all(|&l| l == 12));
        let back = cb.decode(&labels).unwrap();
        assert!(back.dx.iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!(back.dy.iter().all(|&v| (v + 0.5).abs() < 1e-12));
    }

    #[test]
    fn non_monotone_edges_fall_back_to_uniform() {
        // min = -1 lies above mean - std, so the sigma edges are unusable.
        let s = AxisStats { mean: 0.0, std: 2.0, min: -1.0, max: 9.0 };
        let (e, degenerate) = axis_edges(&s, 5);
        assert!(!degenerate);
        assert!(close(&e, &[-1.0, 1.0, 3.0, 5.0, 7.0, 9.0]));
    }

    #[test]
    fn other_bin_counts() {
        let s = AxisStats { mean: 0.0, std: 1.0, min: -4.0, max: 4.0 };
        assert!(close(&axis_edges(&s, 3).0, &[-4.0, -1.0, 1.0, 4.0]));
        assert!(close(&axis_edges(&s, 7).0, &[-4.0, -1.0, -0.6, -0.2, 0.2, 0.6, 1.0, 4.0]));
        assert!(close(&axis_edges(&s, 2).0, &[-4.0, 0.0, 4.0]));
        assert!(close(&axis_edges(&s, 4).0, &[-4.0, -1.0, 0.0, 1.0, 4.0]));
    }

    #[test]
    fn empty_input_and_bad_b_are_errors() {
        assert!(build_codebook(&[], 5).is_err());
        assert!(build_codebook(&[DisplacementField::zeros(2, 2)], 1).is_err());
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[7, 1, 0, 300], 1.0).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let w = class_weights(&[9, 1], 0.5).unwrap();
        assert!((w[0] - 0.8824).abs() < 1e-4 && (w[1] - 2.0588).abs() < 1e-4);
        let expected0 = (1.0 / 0.7) / (0.9 / 0.7 + 0.1 / 0.3);
        assert!((w[0] - expected0).abs() < 1e-14);

        for lambda in [0.0, 0.3, 1.0] {
            let w = class_weights(&[5; 25], lambda).unwrap();
            assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        assert!(class_weights(&[3, 0], 0.0).is_err());
        assert!(class_weights(&[0, 0], 0.5).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut cb = hand_codebook();
        cb.digest = Some("abc".into());
        let back = Codebook::from_json(&cb.to_json().unwrap()).unwrap();
        assert_eq!(back, cb);
        assert!(Codebook::from_json(&cb.to_json().unwrap().replacen("\"b\"", "\"bins\"", 1)).is_err());
    }

    #[test]
    fn one_hot_expansion() {
        let m = MotionLabelMap { width: 2, height: 1, labels: vec![1, 3] };
        let t = m.one_hot(4).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn label_layout_is_a_bijection(b in 2usize..9) {
            let mut seen = vec![false; b * b];
            for ix in 0..b {
                for iy in 0..b {
                    let l = ix * b + iy;
                    prop_assert!(!seen[l]);
                    seen[l] = true;
                    prop_assert_eq!((l / b, l % b), (ix, iy));
                }
            }
        }

        #[test]
        fn decode_encode_is_bounded_and_idempotent(
            samples in prop::collection::vec((-5.0f64..5.0, -9.0f64..9.0), 3..40),
            probe in (-5.0f64..5.0, -9.0f64..9.0),
        ) {
            let (dx, dy): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
            let f = DisplacementField::new(dx.len(), 1, dx, dy).unwrap();
            let cb = build_codebook(&[f], 5).unwrap();
            let (hx, hy) = cb.half_bin_widths();
            let px = probe.0.clamp(cb.edges_x[0], cb.edges_x[5]);
            let py = probe.1.clamp(cb.edges_y[0], cb.edges_y[5]);
            let l = cb.classify(px, py);
            let (rx, ry) = cb.representative(l).unwrap();
            prop_assert!((rx - px).abs() <= hx + 1e-12);
            prop_assert!((ry - py).abs() <= hy + 1e-12);
            prop_assert_eq!(cb.classify(rx, ry), l);
        }
    }
}
