//! Synthetic free-breathing sequences with exact ground-truth motion.
//!
//! A material point with reference position `X` sits at `X + a(t)·G(X)`
//! at frame `t`, where `a(t)` is a sinusoidal breathing excursion (large
//! along `y`, scaled by `ρ` and phase-lagged by `ψ` along `x`) and `G` is
//! a Gaussian spatial envelope. Frames are rendered by pulling the
//! analytic anatomy back through the inverse deformation, so no
//! registration step is involved.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Image};
use crate::par;

/// Fixed-point tolerance (pixels) when inverting the deformation.
pub const INVERSE_TOL: f64 = 1e-9;
pub const INVERSE_MAX_ITER: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectParams {
    pub height: usize,
    pub width: usize,
    /// Superior-inferior excursion `A` in pixels.
    pub amplitude: f64,
    /// Breathing period in frames.
    pub period: f64,
    pub phase: f64,
    /// Anterior-posterior to superior-inferior amplitude ratio `ρ`.
    pub ap_ratio: f64,
    /// Phase lag of the x motion relative to y, radians.
    pub hysteresis: f64,
    /// Envelope centre `(x, y)`.
    pub envelope_center: [f64; 2],
    pub envelope_width: f64,
    pub liver_center: [f64; 2],
    pub liver_radii: [f64; 2],
    /// Reference vessel positions `(x, y)`.
    pub vessels: Vec<[f64; 2]>,
    pub texture_seed: u64,
    pub noise_sigma: f64,
    pub frames: usize,
    pub pixel_spacing_mm: f64,
}

impl SubjectParams {
    /// Mid-range parameters for an `height × width` image.
    pub fn default_for(height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        let (cx, cy) = ((w / 2.0).floor(), (h / 2.0).floor());
        Self {
            height,
            width,
            amplitude: 6.0,
            period: 10.0,
            phase: 0.0,
            ap_ratio: 0.25,
            hysteresis: 0.3,
            envelope_center: [cx, cy],
            envelope_width: 0.35 * h.min(w),
            liver_center: [cx, cy],
            liver_radii: [0.38 * w, 0.32 * h],
            vessels: vec![
                [(cx - 0.15 * w).round(), (cy - 0.06 * h).round()],
                [(cx + 0.12 * w).round(), (cy + 0.1 * h).round()],
            ],
            texture_seed: 0,
            noise_sigma: 0.01,
            frames: 50,
            pixel_spacing_mm: 1.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!("image {}×{} is too small", self.height, self.width));
        }
        if !(self.amplitude > 0.0) {
            return bad(format!("amplitude must be positive, got {}", self.amplitude));
        }
        if !(self.period >= 4.0) {
            return bad(format!("period must be at least 4 frames, got {}", self.period));
        }
        if !(self.ap_ratio >= 0.0) {
            return bad(format!("ap_ratio must be non-negative, got {}", self.ap_ratio));
        }
        if !(self.envelope_width > 0.0) || !(self.noise_sigma >= 0.0) || !(self.pixel_spacing_mm > 0.0) {
            return bad("envelope width, noise and pixel spacing must be positive".into());
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        for v in &self.vessels {
            if self.liver_radius(v[0], v[1]) >= 1.0 {
                return bad(format!("vessel at ({}, {}) lies outside the liver ellipse", v[0], v[1]));
            }
        }
        // |∇u| ≤ max|a| · max|∇G| with max|∇G| = 1 / (s·√e).
        let max_grad = self.amplitude * (1.0 + self.ap_ratio * self.ap_ratio).sqrt()
            / (self.envelope_width * 0.5f64.exp());
        if max_grad >= 1.0 {
            return bad(format!(
                "deformation gradient bound {max_grad:.3} ≥ 1; motion would fold (widen the envelope or lower the amplitude)"
            ));
        }
        Ok(())
    }

    fn liver_radius(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.liver_center[0]) / self.liver_radii[0];
        let v = (y - self.liver_center[1]) / self.liver_radii[1];
        (u * u + v * v).sqrt()
    }

    /// Breathing excursion `a(t) = (ρ·A·sin(ωt + φ + ψ), A·sin(ωt + φ))`.
    pub fn excursion(&self, t: f64) -> (f64, f64) {
        let arg = TAU * t / self.period + self.phase;
        (
            self.ap_ratio * self.amplitude * (arg + self.hysteresis).sin(),
            self.amplitude * arg.sin(),
        )
    }

    pub fn envelope(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.envelope_center[0];
        let dy = y - self.envelope_center[1];
        (-(dx * dx + dy * dy) / (2.0 * self.envelope_width * self.envelope_width)).exp()
    }

    /// Reference position of the material found at `(x, y)` in frame `t`:
    /// the root of `X + a(t)·G(X) = p`, by Newton iteration on the
    /// rank-one Jacobian `I + a ∇Gᵀ`.
    pub fn material_point(&self, x: f64, y: f64, t: f64) -> Result<(f64, f64)> {
        let (ax, ay) = self.excursion(t);
        let s2 = self.envelope_width * self.envelope_width;
        let residual = |mx: f64, my: f64| {
            let g = self.envelope(mx, my);
            (mx + ax * g - x, my + ay * g - y)
        };
        let (mut mx, mut my) = (x, y);
        let (mut rx, mut ry) = residual(mx, my);
        for _ in 0..INVERSE_MAX_ITER {
            let norm = rx.hypot(ry);
            if norm < INVERSE_TOL {
                return Ok((mx, my));
            }
            let g = self.envelope(mx, my);
            let gx = -g * (mx - self.envelope_center[0]) / s2;
            let gy = -g * (my - self.envelope_center[1]) / s2;
            let proj = (gx * rx + gy * ry) / (1.0 + gx * ax + gy * ay);
            let (sx, sy) = (rx - ax * proj, ry - ay * proj);
            // Backtrack until the residual shrinks.
            let mut step = 1.0;
            loop {
                let (nx, ny) = (mx - step * sx, my - step * sy);
                let (nrx, nry) = residual(nx, ny);
                if nrx.hypot(nry) < norm || step < 1e-4 {
                    (mx, my, rx, ry) = (nx, ny, nrx, nry);
                    break;
                }
                step *= 0.5;
            }
        }
        Err(Error::Parameter(format!(
            "deformation inverse did not converge at ({x}, {y}), frame {t}"
        )))
    }

    /// Absolute deformation of reference point `(x, y)` at frame `t`.
    pub fn deformation(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let (ax, ay) = self.excursion(t);
        let g = self.envelope(x, y);
        (ax * g, ay * g)
    }
}

/// Smooth analytic anatomy: an elliptical "liver" with blob texture and
/// bright Gaussian vessels, all intensities in `[0, 1]`.
struct Anatomy<'a> {
    params: &'a SubjectParams,
    blobs: Vec<([f64; 2], f64, f64)>,
}

const BACKGROUND: f64 = 0.05;
const LIVER: f64 = 0.38;
const TEXTURE: f64 = 0.12;
const VESSEL: f64 = 0.35;
const VESSEL_SIGMA: f64 = 0.8;

impl<'a> Anatomy<'a> {
    fn new(params: &'a SubjectParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.texture_seed);
        let scale = params.height.min(params.width) as f64 / 32.0;
        let blobs = (0..6)
            .map(|_| {
                let r = rng.random_range(0.0..0.9f64).sqrt();
                let th = rng.random_range(0.0..TAU);
                let c = [
                    params.liver_center[0] + r * th.cos() * params.liver_radii[0],
                    params.liver_center[1] + r * th.sin() * params.liver_radii[1],
                ];
                let sigma = rng.random_range(2.5..5.0) * scale;
                let amp = rng.random_range(-1.0..1.0);
                (c, sigma, amp)
            })
            .collect();
        Self { params, blobs }
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        let p = self.params;
        let r = p.liver_radius(x, y);
        let edge = p.liver_radii[0].min(p.liver_radii[1]) / 0.8;
        let mask = 1.0 / (1.0 + ((r - 1.0) * edge).exp());
        let blob_sum: f64 = self
            .blobs
            .iter()
            .map(|(c, s, a)| a * (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        let vessels: f64 = p
            .vessels
            .iter()
            .map(|v| {
                VESSEL * (-((x - v[0]).powi(2) + (y - v[1]).powi(2)) / (2.0 * VESSEL_SIGMA * VESSEL_SIGMA)).exp()
            })
            .sum();
        BACKGROUND + mask * (LIVER + TEXTURE * blob_sum.tanh()) + vessels
    }
}

/// Noise-free reference frame (zero deformation).
pub fn reference_anatomy(params: &SubjectParams) -> Result<Image> {
    params.validate()?;
    let a = Anatomy::new(params);
    let mut img = Image::zeros(params.width, params.height);
    for y in 0..params.height {
        for x in 0..params.width {
            img.set(x, y, a.intensity(x as f64, y as f64));
        }
    }
    Ok(img)
}

/// Forward field from frame `t` to `t + 1` on the frame-`t` pixel grid.
pub fn analytic_displacement(params: &SubjectParams, t: usize) -> Result<DisplacementField> {
    if t + 1 >= params.frames {
        return Err(Error::InvalidArgument(format!(
            "frame {t} has no successor in a {}-frame sequence",
            params.frames
        )));
    }
    let (ax0, ay0) = params.excursion(t as f64);
    let (ax1, ay1) = params.excursion(t as f64 + 1.0);
    let n = params.width * params.height;
    let (mut dx, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..params.height {
        for x in 0..params.width {
            let (mx, my) = params.material_point(x as f64, y as f64, t as f64)?;
            let g = params.envelope(mx, my);
            dx.push((ax1 - ax0) * g);
            dy.push((ay1 - ay0) * g);
        }
    }
    DisplacementField::new(params.width, params.height, dx, dy)
}

/// One synthetic acquisition: frames, forward fields and vessel tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub subject_id: usize,
    pub sequence_id: usize,
    pub seed: u64,
    pub params: SubjectParams,
    pub frames: Vec<Image>,
    pub fields: Vec<DisplacementField>,
    /// `vessels[v][t]` is the `(x, y)` position of vessel `v` in frame `t`.
    pub vessels: Vec<Vec<[f64; 2]>>,
}

impl Sequence {
    pub fn height(&self) -> usize {
        self.params.height
    }

    pub fn width(&self) -> usize {
        self.params.width
    }
}

/// All sequences acquired from one synthetic subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: usize,
    pub sequences: Vec<Sequence>,
}

/// Renders frames, fields (stored at `f32` precision) and vessel tracks.
///
/// Tracks start at the analytic vessel position and are propagated by
/// bilinear sampling of the stored fields, so they agree with any
/// downstream bilinear tracker to rounding error.
pub fn render_sequence(params: &SubjectParams, seed: u64) -> Result<Sequence> {
    params.validate()?;
    let anatomy = Anatomy::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(format!("noise: {e}")))?;

    let mut frames = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let mut img = Image::zeros(params.width, params.height);
        for y in 0..params.height {
            for x in 0..params.width {
                let (mx, my) = params.material_point(x as f64, y as f64, t as f64)?;
                img.set(x, y, anatomy.intensity(mx, my));
            }
        }
        if params.noise_sigma > 0.0 {
            img.data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        img.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        frames.push(img);
    }

    let fields = (0..params.frames - 1)
        .map(|t| {
            let mut f = analytic_displacement(params, t)?;
            f.round_to_f32();
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;

    let vessels = params
        .vessels
        .iter()
        .map(|v| {
            let (ux, uy) = params.deformation(v[0], v[1], 0.0);
            let mut track = vec![[v[0] + ux, v[1] + uy]];
            for f in &fields {
                let p = *track.last().expect("non-empty");
                let (dx, dy) = f.sample(p[0], p[1]);
                track.push([p[0] + dx, p[1] + dy]);
            }
            track
        })
        .collect();

    Ok(Sequence {
        subject_id: 0,
        sequence_id: 0,
        seed,
        params: params.clone(),
        frames,
        fields,
        vessels,
    })
}

/// Parameter ranges and acquisition settings for a synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Cohort size and seed used by dataset generation.
    pub subjects: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sequences_per_subject: usize,
    pub noise_sigma: f64,
    pub pixel_spacing_mm: f64,
    pub amplitude_range: [f64; 2],
    pub period_range: [f64; 2],
    pub ap_ratio_range: [f64; 2],
    pub hysteresis_range: [f64; 2],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            subjects: 12,
            seed: 7,
            height: 32,
            width: 32,
            frames: 50,
            sequences_per_subject: 3,
            noise_sigma: 0.01,
            pixel_spacing_mm: 1.7,
            amplitude_range: [3.0, 8.0],
            period_range: [8.0, 16.0],
            ap_ratio_range: [0.1, 0.4],
            hysteresis_range: [0.0, 0.6],
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Parameters of sequence `sequence` of subject `subject`.
pub fn sequence_params(cfg: &PhantomConfig, seed: u64, subject: usize, sequence: usize) -> SubjectParams {
    let mut subject_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ subject as u64);
    let amplitude = draw(&mut subject_rng, cfg.amplitude_range);
    let period = draw(&mut subject_rng, cfg.period_range);
    let ap_ratio = draw(&mut subject_rng, cfg.ap_ratio_range);
    let hysteresis = draw(&mut subject_rng, cfg.hysteresis_range);

    let mut seq_rng = ChaCha8Rng::seed_from_u64(subject_rng.random::<u64>() ^ (sequence as u64) << 32);
    let mut p = SubjectParams::default_for(cfg.height, cfg.width);
    p.amplitude = amplitude;
    p.period = period;
    p.ap_ratio = ap_ratio;
    p.hysteresis = hysteresis;
    p.phase = seq_rng.random_range(0.0..TAU);
    p.envelope_center[0] += seq_rng.random_range(-1.5..1.5);
    p.envelope_center[1] += seq_rng.random_range(-1.5..1.5);
    for v in &mut p.vessels {
        v[0] += seq_rng.random_range(-1..=1) as f64;
        v[1] += seq_rng.random_range(-1..=1) as f64;
    }
    p.texture_seed = seq_rng.random();
    p.noise_sigma = cfg.noise_sigma;
    p.frames = cfg.frames;
    p.pixel_spacing_mm = cfg.pixel_spacing_mm;
    p
}

/// Deterministic cohort of `n_subjects`, each with
/// `cfg.sequences_per_subject` sequences. Subjects render concurrently.
pub fn make_cohort(cfg: &PhantomConfig, n_subjects: usize, seed: u64) -> Result<Vec<SubjectDataset>> {
    if n_subjects < 2 {
        return Err(Error::InvalidArgument(format!(
            "a cohort needs at least 2 subjects, got {n_subjects}"
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..n_subjects)
        .flat_map(|s| (0..cfg.sequences_per_subject).map(move |q| (s, q)))
        .collect();
    let rendered = par::map(&jobs, |&(s, q)| {
        let p = sequence_params(cfg, seed, s, q);
        let seq_seed = seed ^ ((s as u64) << 40) ^ ((q as u64) << 20) ^ 0x5eed;
        render_sequence(&p, seq_seed).map(|mut seq| {
            seq.subject_id = s;
            seq.sequence_id = q;
            seq
        })
    });
    let mut subjects: Vec<SubjectDataset> = (0..n_subjects)
        .map(|s| SubjectDataset {
            subject_id: s,
            sequences: Vec::new(),
        })
        .collect();
    for seq in rendered {
        let seq = seq?;
        subjects[seq.subject_id].sequences.push(seq);
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(h: usize, w: usize) -> SubjectParams {
        let mut p = SubjectParams::default_for(h, w);
        p.frames = 12;
        p
    }

    #[test]
    fn reference_is_deterministic_and_in_range() {
        let p = small(32, 32);
        let a = reference_anatomy(&p).unwrap();
        let b = reference_anatomy(&p).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn vessels_are_local_maxima() {
        for seed in 0..10 {
            let mut p = small(32, 32);
            p.texture_seed = seed;
            let img = reference_anatomy(&p).unwrap();
            for v in &p.vessels {
                let (vx, vy) = (v[0] as i64, v[1] as i64);
                let centre = img.get(vx as usize, vy as usize);
                for dy in -2..=2i64 {
                    for dx in -2..=2i64 {
                        if (dx, dy) != (0, 0) {
                            let n = img.get((vx + dx) as usize, (vy + dy) as usize);
                            assert!(n < centre, "seed {seed}: neighbour ({dx},{dy}) not below vessel");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn vessel_outside_liver_is_rejected() {
        let mut p = small(32, 32);
        p.vessels.push([0.0, 0.0]);
        assert!(matches!(reference_anatomy(&p), Err(Error::Parameter(_))));
    }

    #[test]
    fn folding_motion_is_rejected() {
        let mut p = small(32, 32);
        p.amplitude = 30.0;
        assert!(matches!(p.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_ap_ratio_gives_zero_dx() {
        let mut p = small(16, 16);
        p.ap_ratio = 0.0;
        for t in 0..5 {
            assert!(analytic_displacement(&p, t).unwrap().dx.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_sine_at_envelope_centre() {
        let mut p = small(32, 32);
        p.amplitude = 6.0;
        p.period = 10.0;
        p.phase = 0.0;
        p.hysteresis = 0.0;
        let f = analytic_displacement(&p, 0).unwrap();
        let (cx, cy) = (p.envelope_center[0] as usize, p.envelope_center[1] as usize);
        let dy = f.at(cx, cy).1;
        assert!((dy - 6.0 * (TAU / 10.0).sin()).abs() < 1e-12);
        assert!((dy - 3.5267).abs() < 1e-4);
    }

    #[test]
    fn dy_changes_sign_across_the_peak() {
        let mut p = small(32, 32);
        p.period = 8.0;
        p.phase = 0.0;
        // sin peaks at t = 2 for P = 8.
        let before = analytic_displacement(&p, 1).unwrap();
        let after = analytic_displacement(&p, 2).unwrap();
        let (cx, cy) = (16, 16);
        assert!(before.at(cx, cy).1 > 0.0);
        assert!(after.at(cx, cy).1 < 0.0);
    }

    #[test]
    fn last_frame_has_no_field() {
        let p = small(16, 16);
        assert!(analytic_displacement(&p, 11).is_err());
    }

    #[test]
    fn zero_motion_limit() {
        let mut p = small(16, 16);
        p.amplitude = 1e-12;
        p.noise_sigma = 0.0;
        let s = render_sequence(&p, 3).unwrap();
        let r = reference_anatomy(&p).unwrap();
        for f in &s.frames {
            assert!(f.data.iter().zip(&r.data).all(|(a, b)| (a - b).abs() < 1e-6));
        }
        assert!(s.fields.iter().all(|f| f.max_magnitude() < 1e-11));
        let cb = crate::quantizer::build_codebook(&s.fields, 5).unwrap();
        for f in &s.fields {
            assert!(cb.encode(f).labels.iter().all(|&l| l == 12));
        }
    }

    #[test]
    fn tracks_follow_bilinear_fields() {
        let s = render_sequence(&small(32, 32), 1).unwrap();
        assert_eq!(s.fields.len(), s.frames.len() - 1);
        for track in &s.vessels {
            for (t, f) in s.fields.iter().enumerate() {
                let (dx, dy) = f.sample(track[t][0], track[t][1]);
                assert!((track[t + 1][0] - track[t][0] - dx).abs() < 1e-6);
                assert!((track[t + 1][1] - track[t][1] - dy).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn track_amplitude_matches_envelope() {
        let mut p = SubjectParams::default_for(32, 32);
        p.period = 8.0;
        p.phase = 0.0;
        p.frames = 17;
        let s = render_sequence(&p, 0).unwrap();
        for (v, track) in p.vessels.iter().zip(&s.vessels) {
            let ys: Vec<f64> = track[..=8].iter().map(|q| q[1]).collect();
            let span = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let expected = 2.0 * p.amplitude * p.envelope(v[0], v[1]);
            assert!((span - expected).abs() / expected < 0.02, "span {span}, expected {expected}");
        }
    }

    #[test]
    fn cohort_is_deterministic_and_sized() {
        let cfg = PhantomConfig {
            height: 16,
            width: 16,
            frames: 8,
            ..PhantomConfig::default()
        };
        let a = make_cohort(&cfg, 4, 7).unwrap();
        let b = make_cohort(&cfg, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|s| s.sequences.len() == 3));
        assert!(make_cohort(&cfg, 1, 7).is_err());
        assert_ne!(a, make_cohort(&cfg, 4, 8).unwrap());
    }
}
