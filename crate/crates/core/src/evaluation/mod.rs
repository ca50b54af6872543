//! Evaluation protocol: per-window multi-step prediction, vessel tracking
//! error and NCC of warped images, aggregated per method and horizon.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Image};
use crate::network::{predict_sequence, ModelConfig, ModelParams};
use crate::par;
use crate::pca::{pca_predict, PcaModel};
use crate::phantom::Sequence;
use crate::quantizer::Codebook;
use crate::training::window_starts;
use crate::warp::{compose_fields, invert_field_unchecked, ncc, track_points, tracking_error, warp_image, Stats, INVERT_MAX_ITER, INVERT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    Convpool,
    Pca,
    Oracle,
    QuantizedOracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Proposed,
        Method::Convpool,
        Method::Pca,
        Method::Oracle,
        Method::QuantizedOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Convpool => "convpool",
            Method::Pca => "pca",
            Method::Oracle => "oracle",
            Method::QuantizedOracle => "quantized-oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Field source for one method.
pub enum Predictor<'a> {
    Network {
        config: &'a ModelConfig,
        params: &'a ModelParams,
        codebook: &'a Codebook,
    },
    Pca(&'a PcaModel),
    Oracle,
    QuantizedOracle(&'a Codebook),
}

impl Predictor<'_> {
    /// `t` forward fields starting at the last input frame `start + n − 1`.
    pub fn predict(&self, seq: &Sequence, start: usize, n: usize, t: usize) -> Result<Vec<DisplacementField>> {
        self.predict_counted(seq, start, n, t).map(|(f, _)| f)
    }

    /// Also returns the number of PCA components held at their last value.
    fn predict_counted(&self, seq: &Sequence, start: usize, n: usize, t: usize) -> Result<(Vec<DisplacementField>, u64)> {
        let last = start + n - 1;
        if last + t > seq.fields.len() {
            return Err(Error::InvalidArgument(format!(
                "window at {start} needs fields up to {}, sequence has {}",
                last + t,
                seq.fields.len()
            )));
        }
        match self {
            Predictor::Network { config, params, codebook } => {
                if config.n_inputs != n {
                    return Err(Error::Config(format!("model takes {} inputs, protocol uses {n}", config.n_inputs)));
                }
                let p = predict_sequence(config, params, &seq.frames[start..=last], t)?;
                Ok((p.labels.iter().map(|l| codebook.decode(l)).collect::<Result<_>>()?, 0))
            }
            Predictor::Pca(model) => {
                let p = pca_predict(&seq.fields[start..last], model, t)?;
                Ok((p.fields, p.held.len() as u64))
            }
            Predictor::Oracle => Ok((seq.fields[last..last + t].to_vec(), 0)),
            Predictor::QuantizedOracle(cb) => Ok((
                seq.fields[last..last + t]
                    .iter()
                    .map(|f| cb.decode(&cb.encode(f)))
                    .collect::<Result<_>>()?,
                0,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub t: usize,
    pub error: Stats,
    pub ncc: Stats,
}

impl Cell {
    pub fn err_mean_mm(&self) -> f64 {
        self.error.mean()
    }
}

/// Vessel positions at one horizon over consecutive windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySeries {
    pub method: Method,
    pub subject: usize,
    pub sequence: usize,
    pub vessel: usize,
    pub horizon: usize,
    /// Frame each position refers to.
    pub frames: Vec<usize>,
    pub predicted: Vec<[f64; 2]>,
    pub truth: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub cells: Vec<Cell>,
    /// Warps whose inversion left more than 1% of pixels unconverged.
    pub rough_inversions: u64,
    /// Tracked points pushed off the image and clamped.
    pub clamped_tracks: u64,
    /// PCA components that fell back to holding their last value.
    #[serde(default)]
    pub held_components: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub digest: String,
    pub held_out: Vec<usize>,
    pub n_inputs: usize,
    pub horizon: usize,
    pub windows: usize,
    pub pixel_spacing_mm: f64,
    pub methods: Vec<MethodMetrics>,
    pub trajectories: Vec<TrajectorySeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizon: usize,
    pub window_stride: usize,
    pub methods: Vec<Method>,
    pub pca_var_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            window_stride: 1,
            methods: Method::ALL.to_vec(),
            pca_var_threshold: crate::pca::DEFAULT_VAR_THRESHOLD,
        }
    }
}

struct WindowResult {
    errors: Vec<Stats>,
    ncc: Vec<Stats>,
    rough: u64,
    clamped: u64,
    held: u64,
    /// `positions[v][k]`: vessel `v` at horizon `k + 1`.
    positions: Vec<Vec<[f64; 2]>>,
    truth: Vec<Vec<[f64; 2]>>,
}

fn evaluate_window(
    predictor: &Predictor,
    seq: &Sequence,
    start: usize,
    n: usize,
    t: usize,
) -> Result<WindowResult> {
    let last = start + n - 1;
    let (fields, held) = predictor.predict_counted(seq, start, n, t)?;
    let starts: Vec<[f64; 2]> = seq.vessels.iter().map(|v| v[last]).collect();
    let traj = track_points(&starts, &fields);
    let positions: Vec<Vec<[f64; 2]>> = traj.positions.iter().map(|p| p[1..].to_vec()).collect();
    let truth: Vec<Vec<[f64; 2]>> = seq.vessels.iter().map(|v| v[last + 1..=last + t].to_vec()).collect();
    let errors = tracking_error(&positions, &truth, seq.params.pixel_spacing_mm)?;

    let mut ncc_stats = vec![Stats::default(); t];
    let mut rough = 0;
    let mut total: Option<DisplacementField> = None;
    for (k, f) in fields.iter().enumerate() {
        let composed = match &total {
            None => f.clone(),
            Some(acc) => compose_fields(acc, f)?,
        };
        let (inv, report) = invert_field_unchecked(&composed, INVERT_TOL, INVERT_MAX_ITER)?;
        if report.converged < 0.99 {
            rough += 1;
        }
        let warped: Image = warp_image(&seq.frames[last], &inv)?;
        ncc_stats[k].push(ncc(&warped, &seq.frames[last + k + 1])?);
        total = Some(composed);
    }
    Ok(WindowResult {
        errors,
        ncc: ncc_stats,
        rough,
        clamped: traj.left_image.iter().filter(|&&b| b).count() as u64,
        held,
        positions,
        truth,
    })
}

/// Runs every method over all windows of the test sequences.
pub fn evaluate(
    methods: &[(Method, Predictor)],
    test: &[&Sequence],
    n_inputs: usize,
    cfg: &EvalConfig,
    digest: &str,
) -> Result<MetricsReport> {
    let t = cfg.horizon;
    if t == 0 || cfg.window_stride == 0 {
        return Err(Error::Config("horizon and window_stride must be positive".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("no test sequences".into()));
    }
    let windows: Vec<(usize, usize)> = test
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            window_starts(s.frames.len(), n_inputs, t, cfg.window_stride)
                .into_iter()
                .map(move |w| (i, w))
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::Data("test sequences too short for one window".into()));
    }
    let mut held_out: Vec<usize> = test.iter().map(|s| s.subject_id).collect();
    held_out.sort_unstable();
    held_out.dedup();

    let mut report = MetricsReport {
        digest: digest.to_string(),
        held_out,
        n_inputs,
        horizon: t,
        windows: windows.len(),
        pixel_spacing_mm: test[0].params.pixel_spacing_mm,
        methods: Vec::new(),
        trajectories: Vec::new(),
    };
    for (method, predictor) in methods {
        let results = par::map(&windows, |&(i, start)| evaluate_window(predictor, test[i], start, n_inputs, t));
        let mut m = MethodMetrics {
            method: *method,
            cells: (1..=t)
                .map(|k| Cell {
                    t: k,
                    error: Stats::default(),
                    ncc: Stats::default(),
                })
                .collect(),
            rough_inversions: 0,
            clamped_tracks: 0,
            held_components: 0,
        };
        let mut series: Vec<TrajectorySeries> = Vec::new();
        let horizons: Vec<usize> = if t == 1 { vec![1] } else { vec![1, t] };
        for (&(i, start), r) in windows.iter().zip(results) {
            let r = r?;
            for (k, cell) in m.cells.iter_mut().enumerate() {
                cell.error.merge(&r.errors[k]);
                cell.ncc.merge(&r.ncc[k]);
            }
            m.rough_inversions += r.rough;
            m.clamped_tracks += r.clamped;
            m.held_components += r.held;
            let seq = test[i];
            let last = start + n_inputs - 1;
            for (v, (pos, truth)) in r.positions.iter().zip(&r.truth).enumerate() {
                for &horizon in &horizons {
                    let s = match series.iter_mut().find(|s| {
                        (s.subject, s.sequence, s.vessel, s.horizon) == (seq.subject_id, seq.sequence_id, v, horizon)
                    }) {
                        Some(s) => s,
                        None => {
                            series.push(TrajectorySeries {
                                method: *method,
                                subject: seq.subject_id,
                                sequence: seq.sequence_id,
                                vessel: v,
                                horizon,
                                frames: Vec::new(),
                                predicted: Vec::new(),
                                truth: Vec::new(),
                            });
                            series.last_mut().expect("just pushed")
                        }
                    };
                    s.frames.push(last + horizon);
                    s.predicted.push(pos[horizon - 1]);
                    s.truth.push(truth[horizon - 1]);
                }
            }
        }
        report.methods.push(m);
        report.trajectories.extend(series);
    }
    Ok(report)
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "method,t,err_mean_mm,err_std_mm,ncc_mean,ncc_std,n";

    pub fn method(&self, m: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|x| x.method == m)
    }

    /// Mean tracking error of `m` at horizons `1..=T`.
    pub fn error_means(&self, m: Method) -> Option<Vec<f64>> {
        self.method(m).map(|x| x.cells.iter().map(|c| c.error.mean()).collect())
    }

    pub fn ncc_means(&self, m: Method) -> Option<Vec<f64>> {
        self.method(m).map(|x| x.cells.iter().map(|c| c.ncc.mean()).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# digest={}\n{}\n", self.digest, Self::CSV_HEADER);
        for m in &self.methods {
            for c in &m.cells {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    m.method.name(),
                    c.t,
                    c.error.mean(),
                    c.error.std(),
                    c.ncc.mean(),
                    c.ncc.std(),
                    c.error.n
                );
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("metrics report: {e}")))
    }
}

#[cfg(test)]
mod tests;
