use super::*;
use crate::phantom::{make_cohort, PhantomConfig};
use crate::quantizer::build_codebook;

fn cohort() -> Vec<Sequence> {
    let cfg = PhantomConfig {
        height: 32,
        width: 32,
        frames: 20,
        sequences_per_subject: 1,
        ..PhantomConfig::default()
    };
    make_cohort(&cfg, 2, 3)
        .unwrap()
        .into_iter()
        .flat_map(|s| s.sequences)
        .collect()
}

fn codebook(seqs: &[Sequence]) -> Codebook {
    let fields: Vec<DisplacementField> = seqs.iter().flat_map(|s| s.fields.iter().cloned()).collect();
    build_codebook(&fields, 5).unwrap()
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(Method::parse(m.name()).unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!(Method::parse("lstm").is_err());
}

#[test]
fn oracle_tracking_error_is_small_at_every_horizon() {
    let seqs = cohort();
    let test: Vec<&Sequence> = seqs.iter().collect();
    let cfg = EvalConfig {
        window_stride: 3,
        ..EvalConfig::default()
    };
    let r = evaluate(&[(Method::Oracle, Predictor::Oracle)], &test, 5, &cfg, "d").unwrap();
    let errs = r.error_means(Method::Oracle).unwrap();
    assert_eq!(errs.len(), 5);
    for (t, e) in errs.iter().enumerate() {
        assert!(*e < 0.5, "t={} err {e} mm", t + 1);
    }
    for n in r.ncc_means(Method::Oracle).unwrap() {
        assert!(n > 0.95, "ncc {n}");
    }
}

#[test]
fn quantized_oracle_respects_half_bin_bound() {
    let seqs = cohort();
    let cb = codebook(&seqs);
    let test: Vec<&Sequence> = seqs.iter().collect();
    let cfg = EvalConfig {
        window_stride: 2,
        ..EvalConfig::default()
    };
    let r = evaluate(
        &[
            (Method::Oracle, Predictor::Oracle),
            (Method::QuantizedOracle, Predictor::QuantizedOracle(&cb)),
        ],
        &test,
        5,
        &cfg,
        "d",
    )
    .unwrap();
    let (hx, hy) = cb.half_bin_widths();
    let half = hx.max(hy);
    let oracle = r.error_means(Method::Oracle).unwrap();
    let quant = r.error_means(Method::QuantizedOracle).unwrap();
    for t in 0..5 {
        let bound = half * 1.7 * (t + 1) as f64 + 0.5;
        assert!(quant[t] <= bound, "t={} {} > {bound}", t + 1, quant[t]);
        assert!(oracle[t] <= quant[t] + 1e-9, "t={}: oracle {} quantized {}", t + 1, oracle[t], quant[t]);
    }
}

#[test]
fn report_shape_and_serialization() {
    let seqs = cohort();
    let cb = codebook(&seqs);
    let test: Vec<&Sequence> = vec![&seqs[1]];
    let cfg = EvalConfig {
        horizon: 3,
        window_stride: 4,
        ..EvalConfig::default()
    };
    let model_cfg = ModelConfig {
        base_channels: 2,
        lstm_hidden: 2,
        decoder_channels: 2,
        q: cb.q,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&model_cfg, 0).unwrap();
    let pca = crate::pca::pca_fit(&seqs[0].fields, 0.95).unwrap();
    let methods = vec![
        (
            Method::Proposed,
            Predictor::Network {
                config: &model_cfg,
                params: &params,
                codebook: &cb,
            },
        ),
        (Method::Pca, Predictor::Pca(&pca)),
        (Method::Oracle, Predictor::Oracle),
    ];
    let r = evaluate(&methods, &test, 5, &cfg, "abc").unwrap();
    // 20 frames, n = 5, T = 3: starts 0..=12 step 4.
    assert_eq!(r.windows, 4);
    assert_eq!(r.held_out, vec![1]);
    assert_eq!(r.methods.len(), 3);
    for m in &r.methods {
        assert_eq!(m.cells.len(), 3);
        for c in &m.cells {
            assert_eq!(c.error.n, 4 * seqs[1].vessels.len() as u64);
            assert_eq!(c.ncc.n, 4);
        }
    }
    // One series per vessel for horizons 1 and T, each with one point per window.
    let per_method = 2 * seqs[1].vessels.len();
    assert_eq!(r.trajectories.len(), 3 * per_method);
    assert!(r.trajectories.iter().all(|s| s.frames.len() == 4));
    let s = &r.trajectories[0];
    assert_eq!(s.horizon, 1);
    assert_eq!(s.frames, vec![5, 9, 13, 17]);

    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# digest=abc");
    assert_eq!(lines[1], MetricsReport::CSV_HEADER);
    assert_eq!(lines.len(), 2 + 9);
    assert!(lines[2].starts_with("proposed,1,"));
    let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn rejects_short_sequences_and_bad_config() {
    let seqs = cohort();
    let test: Vec<&Sequence> = seqs.iter().collect();
    let long = EvalConfig {
        horizon: 20,
        ..EvalConfig::default()
    };
    assert!(evaluate(&[(Method::Oracle, Predictor::Oracle)], &test, 5, &long, "").is_err());
    let zero = EvalConfig {
        window_stride: 0,
        ..EvalConfig::default()
    };
    assert!(evaluate(&[(Method::Oracle, Predictor::Oracle)], &test, 5, &zero, "").is_err());
    assert!(evaluate(&[(Method::Oracle, Predictor::Oracle)], &[], 5, &EvalConfig::default(), "").is_err());
}
