//! Field algebra and image warping used to turn predicted motion into
//! images and vessel positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Image};

pub const INVERT_TOL: f64 = 1e-2;
pub const INVERT_MAX_ITER: usize = 50;

/// Convergence summary of a field inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inversion {
    /// Fraction of pixels with residual below the tolerance.
    pub converged: f64,
    pub worst_residual: f64,
}

/// Backward field `g` with `g(p) ≈ −d(p + g(p))`, by fixed-point iteration
/// from `g = −d`. At least 99% of pixels must reach a residual below `tol`.
pub fn invert_field(field: &DisplacementField, tol: f64, max_iter: usize) -> Result<DisplacementField> {
    let (g, report) = invert_field_unchecked(field, tol, max_iter)?;
    if report.converged < 0.99 {
        let n = field.len();
        let above = n - (report.converged * n as f64).round() as usize;
        return Err(Error::Numeric(format!(
            "field inversion did not converge: {above} of {n} pixels above tolerance {tol}, worst residual {:.4} px",
            report.worst_residual
        )));
    }
    Ok(g)
}

/// The fixed-point iterate after `max_iter` steps or convergence, with its
/// residual statistics, whether or not it meets the 99% rule.
pub fn invert_field_unchecked(field: &DisplacementField, tol: f64, max_iter: usize) -> Result<(DisplacementField, Inversion)> {
    let (w, h) = (field.width, field.height);
    let mut g = DisplacementField::new(
        w,
        h,
        field.dx.iter().map(|v| -v).collect(),
        field.dy.iter().map(|v| -v).collect(),
    )?;
    let residual = |g: &DisplacementField, i: usize| {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let (dx, dy) = field.sample(x + g.dx[i], y + g.dy[i]);
        (g.dx[i] + dx).hypot(g.dy[i] + dy)
    };
    for _ in 0..max_iter {
        let mut change: f64 = 0.0;
        for i in 0..w * h {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (dx, dy) = field.sample(x + g.dx[i], y + g.dy[i]);
            change = change.max((g.dx[i] + dx).hypot(g.dy[i] + dy));
            g.dx[i] = -dx;
            g.dy[i] = -dy;
        }
        if change < tol * 1e-3 {
            break;
        }
    }
    let residuals: Vec<f64> = (0..w * h).map(|i| residual(&g, i)).collect();
    let converged = residuals.iter().filter(|&&r| r < tol).count();
    let report = Inversion {
        converged: converged as f64 / (w * h) as f64,
        worst_residual: residuals.iter().cloned().fold(0.0, f64::max),
    };
    Ok((g, report))
}

/// Pull-back warp: `out(p) = image(p + g(p))`, bilinear, clamped to the border.
pub fn warp_image(image: &Image, inverse: &DisplacementField) -> Result<Image> {
    if (image.width, image.height) != (inverse.width, inverse.height) {
        return Err(Error::shape("warp_image", "image and field grids differ"));
    }
    let w = image.width;
    let data = (0..image.data.len())
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            image.sample(x + inverse.dx[i], y + inverse.dy[i])
        })
        .collect();
    Image::new(w, image.height, data)
}

/// `d(p) = d1(p) + d2(p + d1(p))`: motion over two consecutive intervals.
pub fn compose_fields(first: &DisplacementField, second: &DisplacementField) -> Result<DisplacementField> {
    if !first.same_grid(second) {
        return Err(Error::shape("compose_fields", "fields live on different grids"));
    }
    let w = first.width;
    let n = first.len();
    let (mut dx, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let (ax, ay) = (first.dx[i], first.dy[i]);
        let (bx, by) = second.sample(x + ax, y + ay);
        dx.push(ax + bx);
        dy.push(ay + by);
    }
    DisplacementField::new(w, first.height, dx, dy)
}

/// Positions of tracked points; `positions[i][t]` for point `i` after `t` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Set when a point was pushed off the image and clamped back.
    pub left_image: Vec<bool>,
}

/// Propagates points through consecutive forward fields.
pub fn track_points(points: &[[f64; 2]], fields: &[DisplacementField]) -> Trajectories {
    let mut positions = Vec::with_capacity(points.len());
    let mut left_image = Vec::with_capacity(points.len());
    for &start in points {
        let mut traj = Vec::with_capacity(fields.len() + 1);
        let mut left = false;
        let mut p = start;
        traj.push(p);
        for f in fields {
            let (dx, dy) = f.sample(p[0], p[1]);
            let (mx, my) = ((f.width - 1) as f64, (f.height - 1) as f64);
            let next = [p[0] + dx, p[1] + dy];
            let clamped = [next[0].clamp(0.0, mx), next[1].clamp(0.0, my)];
            left |= clamped != next;
            p = clamped;
            traj.push(p);
        }
        positions.push(traj);
        left_image.push(left);
    }
    Trajectories { positions, left_image }
}

/// Running mean/std accumulator (population std).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Stats {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, other: &Stats) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        let m = self.mean();
        (self.sum_sq / self.n as f64 - m * m).max(0.0).sqrt()
    }
}

/// Per-horizon Euclidean errors in millimetres, aggregated over
/// trajectories. Each trajectory lists positions at horizons `1..=T`.
pub fn tracking_error(predicted: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>], pixel_spacing_mm: f64) -> Result<Vec<Stats>> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "tracking_error",
            format!("{} predicted vs {} true trajectories", predicted.len(), truth.len()),
        ));
    }
    let horizons = truth.first().map_or(0, |t| t.len());
    let mut out = vec![Stats::default(); horizons];
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() || t.len() != horizons {
            return Err(Error::shape("tracking_error", format!("trajectory lengths {} vs {}", p.len(), t.len())));
        }
        for (k, (a, b)) in p.iter().zip(t).enumerate() {
            out[k].push((a[0] - b[0]).hypot(a[1] - b[1]) * pixel_spacing_mm);
        }
    }
    Ok(out)
}

/// Zero-mean normalized cross-correlation over the whole frame.
pub fn ncc(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape("ncc", "images differ in size"));
    }
    let constant = |img: &Image| img.data.iter().all(|&v| v == img.data[0]);
    if constant(a) || constant(b) {
        return Err(Error::InvalidArgument("NCC undefined for a constant image".into()));
    }
    let n = a.data.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (u, v) = (x - ma, y - mb);
        sab += u * v;
        saa += u * u;
        sbb += v * v;
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn impulse() -> Image {
        let mut img = Image::zeros(10, 10);
        img.set(5, 5, 1.0);
        img
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(8, 6, (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn inverting_simple_fields() {
        let z = DisplacementField::zeros(8, 8);
        assert_eq!(invert_field(&z, INVERT_TOL, INVERT_MAX_ITER).unwrap(), z);
        let c = DisplacementField::constant(8, 8, 1.5, -0.25);
        let inv = invert_field(&c, INVERT_TOL, INVERT_MAX_ITER).unwrap();
        assert!(inv.dx.iter().all(|&v| v == -1.5));
        assert!(inv.dy.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn warping_examples() {
        let img = impulse();
        let same = warp_image(&img, &DisplacementField::zeros(10, 10)).unwrap();
        assert_eq!(same, img);

        let shifted = warp_image(&img, &DisplacementField::constant(10, 10, 1.0, 0.0)).unwrap();
        assert_eq!(shifted.get(4, 5), 1.0);
        assert_eq!(shifted.data.iter().sum::<f64>(), 1.0);

        let half = warp_image(&img, &DisplacementField::constant(10, 10, 0.5, 0.0)).unwrap();
        assert_eq!(half.get(4, 5), 0.5);
        assert_eq!(half.get(5, 5), 0.5);
        assert_eq!(half.data.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn composition_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DisplacementField::new(
            6,
            6,
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let z = DisplacementField::zeros(6, 6);
        assert_eq!(compose_fields(&z, &d).unwrap(), d);
        assert_eq!(compose_fields(&d, &z).unwrap(), d);

        let a = DisplacementField::constant(6, 6, 0.5, 1.0);
        let b = DisplacementField::constant(6, 6, -0.25, 0.5);
        let c = DisplacementField::constant(6, 6, 0.125, 0.25);
        let ab = compose_fields(&a, &b).unwrap();
        assert_eq!(ab, DisplacementField::constant(6, 6, 0.25, 1.5));
        let left = compose_fields(&ab, &c).unwrap();
        let right = compose_fields(&a, &compose_fields(&b, &c).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn tracking_examples() {
        let zero = vec![DisplacementField::zeros(20, 20); 3];
        let t = track_points(&[[10.0, 10.0]], &zero);
        assert!(t.positions[0].iter().all(|p| *p == [10.0, 10.0]));

        let one = vec![DisplacementField::constant(20, 20, 1.0, 0.0); 3];
        let t = track_points(&[[10.0, 10.0]], &one);
        assert_eq!(t.positions[0][3], [13.0, 10.0]);
        assert!(!t.left_image[0]);

        let t = track_points(&[[18.5, 3.0]], &one);
        assert_eq!(t.positions[0][3], [19.0, 3.0]);
        assert!(t.left_image[0]);
    }

    #[test]
    fn tracking_error_examples() {
        let a = vec![vec![[1.0, 2.0], [3.0, 4.0]]];
        let e = tracking_error(&a, &a, 1.7).unwrap();
        assert!(e.iter().all(|s| s.mean() == 0.0 && s.std() == 0.0));

        let e = tracking_error(&[vec![[11.0, 10.0]]], &[vec![[12.0, 10.0]]], 1.7).unwrap();
        assert_eq!(e[0].mean(), 1.7);

        assert!(tracking_error(&[vec![[0.0, 0.0]]], &[vec![[0.0, 0.0], [1.0, 1.0]]], 1.7).is_err());
        assert!(tracking_error(&a, &[], 1.7).is_err());
    }

    #[test]
    fn ncc_properties() {
        let x = random_image(1);
        assert!((ncc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image::new(8, 6, x.data.iter().map(|v| 3.0 - v).collect()).unwrap();
        assert!((ncc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let y = random_image(2);
        let affine = Image::new(8, 6, y.data.iter().map(|v| 2.5 * v - 0.7).collect()).unwrap();
        assert!((ncc(&x, &y).unwrap() - ncc(&x, &affine).unwrap()).abs() < 1e-12);
        let flat = Image::new(8, 6, vec![0.3; 48]).unwrap();
        assert!(ncc(&x, &flat).is_err());
    }

    #[test]
    fn stats_merge_matches_direct() {
        let mut a = Stats::default();
        let mut b = Stats::default();
        let mut all = Stats::default();
        for (i, v) in [1.0, 4.0, 2.0, 8.0, 5.0].iter().enumerate() {
            if i < 2 { a.push(*v) } else { b.push(*v) }
            all.push(*v);
        }
        a.merge(&b);
        assert_eq!(a, all);
        assert_eq!(all.mean(), 4.0);
        assert!((all.std() - 6f64.sqrt()).abs() < 1e-12);
    }
}
