//! `respmotion`: synthetic data generation, codebook fitting, training,
//! prediction, evaluation and reporting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use respmotion::config::{check_digest, RunConfig};
use respmotion::dataset::{generate, write_dataset, Dataset};
use respmotion::evaluation::{Method, MetricsReport};
use respmotion::io::{f32_bytes, read, write_atomic};
use respmotion::network::{predict_sequence, EncoderVariant, ModelConfig, ModelParams};
use respmotion::pipeline::{self, Fold, Models};
use respmotion::report;
use respmotion::{Codebook, Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "respmotion", version, about = "Breathing-motion prediction on synthetic image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic cohort to a dataset directory.
    GenData(GenData),
    /// Fit the motion codebook on the training split of one fold.
    Codebook(CodebookCmd),
    /// Train a model for one held-out subject.
    Train(Train),
    /// Predict label maps and fields for one window.
    Predict(Predict),
    /// Evaluate methods on the held-out subject.
    Eval(Eval),
    /// Merge metrics across held-out subjects into a table and plots.
    Report(Report),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON). Defaults are used when absent.
    #[arg(long, env = "RESPMOTION_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FoldArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    held_out: usize,
    /// Seed choosing the validation subject.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct CodebookCmd {
    #[command(flatten)]
    fold: FoldArgs,
    /// Bins per axis; defaults to the config value.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    fold: FoldArgs,
    #[arg(long)]
    codebook: PathBuf,
    /// Encoder variant; defaults to the config value.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<EncoderVariant>,
    /// Initialisation and shuffling seed; defaults to the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for model.bin and the training log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Predict {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    subject: usize,
    #[arg(long, default_value_t = 0)]
    sequence: usize,
    /// First input frame of the window.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    fold: FoldArgs,
    #[arg(long)]
    codebook: PathBuf,
    /// Checkpoint for the `proposed` method.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Checkpoint for the `convpool` method.
    #[arg(long)]
    convpool_model: Option<PathBuf>,
    /// Comma-separated methods; defaults to the config list.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Report {
    /// metrics.json files or directories containing one.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<EncoderVariant, String> {
    match s {
        "multiscale" => Ok(EncoderVariant::Multiscale),
        "convpool" => Ok(EncoderVariant::Convpool),
        _ => Err(format!("expected multiscale or convpool, got `{s}`")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

/// Loads the dataset; an explicit config must match the one it was built with.
fn open_dataset(data: &Path, config: &ConfigArg) -> Result<Dataset> {
    let ds = Dataset::load(data)?;
    if let Some(path) = &config.config {
        let given = RunConfig::load(path)?;
        check_digest(&format!("dataset {}", data.display()), Some(&ds.digest), &given.digest()?)?;
    }
    Ok(ds)
}

fn load_codebook(path: &Path, ds: &Dataset, fold: &Fold) -> Result<Codebook> {
    let cb = Codebook::load(path)?;
    check_digest(&format!("codebook {}", path.display()), cb.digest.as_deref(), &ds.digest)?;
    pipeline::check_codebook_fold(&cb, fold)?;
    Ok(cb)
}

struct Checkpoint {
    config: ModelConfig,
    params: ModelParams,
}

fn load_checkpoint(path: &Path, ds: &Dataset, cb: &Codebook, fold: Option<&Fold>) -> Result<Checkpoint> {
    let (config, params, meta) = ModelParams::load(path)?;
    let what = format!("checkpoint {}", path.display());
    check_digest(&what, meta.get("digest").and_then(|d| d.as_str()), &ds.digest)?;
    if config.q != cb.q {
        return Err(Error::Config(format!("{what} has {} classes, codebook has {}", config.q, cb.q)));
    }
    let tag = cb.split.expect("checked by load_codebook");
    let same_fold = meta.get("held_out").and_then(|v| v.as_u64()) == Some(tag.held_out as u64)
        && meta.get("split_seed").and_then(|v| v.as_u64()) == Some(tag.split_seed);
    if !same_fold {
        return Err(Error::Config(format!("{what} was trained on a different fold than the codebook")));
    }
    if let Some(f) = fold {
        pipeline::check_codebook_fold(cb, f)?;
    }
    Ok(Checkpoint { config, params })
}

fn cmd_gen_data(a: GenData) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.config.as_deref())?;
    if let Some(n) = a.subjects {
        cfg.phantom.subjects = n;
    }
    if let Some(s) = a.seed {
        cfg.phantom.seed = s;
    }
    cfg.validate()?;
    let cohort = generate(&cfg)?;
    let s = write_dataset(&a.out, &cfg, &cohort, a.force)?;
    println!("dataset    {}", a.out.display());
    println!("digest     {}", s.digest);
    println!(
        "subjects   {}  sequences {}  frames {}  size {}x{}  seed {}",
        s.subjects, s.sequences, s.frames, s.height, s.width, s.seed
    );
    for (axis, st) in [("dx", s.dx), ("dy", s.dy)] {
        println!(
            "{axis} (px)    mean {:+.4}  std {:.4}  min {:+.4}  max {:+.4}",
            st.mean, st.std, st.min, st.max
        );
    }
    Ok(())
}

fn cmd_codebook(a: CodebookCmd) -> Result<()> {
    let ds = open_dataset(&a.fold.data, &a.fold.config)?;
    let fold = Fold::new(&ds, a.fold.held_out, a.fold.split_seed)?;
    let mut cb_cfg = ds.config.codebook.clone();
    if let Some(b) = a.bins {
        cb_cfg.bins = b;
    }
    let cb = pipeline::fit_codebook(&fold, &cb_cfg, &ds.digest)?;
    cb.save(&a.out)?;
    println!(
        "codebook {}: b={} q={} lambda={} (train subjects {:?}, val {:?}, test {:?})",
        a.out.display(),
        cb.b,
        cb.q,
        cb.lambda,
        fold.split.train,
        fold.split.val,
        fold.split.test
    );
    let total: u64 = cb.histogram.iter().sum();
    println!("class  count      share    weight");
    for (k, (&n, w)) in cb.histogram.iter().zip(&cb.weights).enumerate() {
        println!("{k:>5}  {n:>9}  {:>7.4}  {w:>8.4}", n as f64 / total as f64);
    }
    Ok(())
}

fn cmd_train(a: Train) -> Result<()> {
    let ds = open_dataset(&a.fold.data, &a.fold.config)?;
    let fold = Fold::new(&ds, a.fold.held_out, a.fold.split_seed)?;
    let cb = load_codebook(&a.codebook, &ds, &fold)?;
    let variant = a.variant.unwrap_or(ds.config.model.encoder_variant);
    let model = pipeline::model_config(&ds.config, variant, &cb);
    let mut train_cfg = ds.config.train.clone();
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    let out = pipeline::train_model(&fold, &cb, &model, &train_cfg)?;
    let meta = json!({
        "digest": ds.digest,
        "held_out": fold.tag.held_out,
        "split_seed": fold.tag.split_seed,
        "seed": train_cfg.seed,
        "best_epoch": out.best_epoch,
        "best_val_acc": out.best_val_acc,
    });
    out.best.save(&a.out.join("model.bin"), &model, meta)?;
    let log = format!("# digest={}\n{}", ds.digest, out.log.to_csv());
    write_atomic(&a.out.join("train_log.csv"), log.as_bytes())?;
    write_atomic(&a.out.join("train_timing.csv"), out.log.timing_csv().as_bytes())?;
    println!(
        "trained {variant:?} encoder, {} parameters: best val acc {:.4} at epoch {}; wrote {}",
        out.best.count(),
        out.best_val_acc,
        out.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn cmd_predict(a: Predict) -> Result<()> {
    let ds = open_dataset(&a.data, &a.config)?;
    let cb = Codebook::load(&a.codebook)?;
    check_digest(&format!("codebook {}", a.codebook.display()), cb.digest.as_deref(), &ds.digest)?;
    if cb.split.is_none() {
        return Err(Error::Config("codebook carries no fold information".into()));
    }
    let ck = load_checkpoint(&a.model, &ds, &cb, None)?;
    let seq = ds.sequence(a.subject, a.sequence)?;
    let t = a.horizon.unwrap_or(ds.config.eval.horizon);
    let n = ck.config.n_inputs;
    if a.start + n > seq.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "window at {} needs {n} frames, sequence has {}",
            a.start,
            seq.frames.len()
        )));
    }
    let pred = predict_sequence(&ck.config, &ck.params, &seq.frames[a.start..a.start + n], t)?;
    let fields = pred.labels.iter().map(|l| cb.decode(l)).collect::<Result<Vec<_>>>()?;
    let labels = json!({
        "digest": ds.digest,
        "subject": a.subject,
        "sequence": a.sequence,
        "start": a.start,
        "horizon": t,
        "height": seq.height(),
        "width": seq.width(),
        "labels": pred.labels.iter().map(|l| &l.labels).collect::<Vec<_>>(),
    });
    write_atomic(&a.out.join("labels.json"), (serde_json::to_string(&labels)? + "\n").as_bytes())?;
    write_atomic(
        &a.out.join("fields.bin"),
        &f32_bytes(fields.iter().flat_map(|f| f.dx.iter().chain(&f.dy).copied())),
    )?;
    println!(
        "predicted {t} steps after frames {}..={} of subject {} sequence {}; wrote {}",
        a.start,
        a.start + n - 1,
        a.subject,
        a.sequence,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: Eval) -> Result<()> {
    let ds = open_dataset(&a.fold.data, &a.fold.config)?;
    let fold = Fold::new(&ds, a.fold.held_out, a.fold.split_seed)?;
    let cb = load_codebook(&a.codebook, &ds, &fold)?;
    let methods = a.methods.unwrap_or_else(|| ds.config.eval.methods.clone());
    let load = |p: &Option<PathBuf>, m: Method| -> Result<Option<Checkpoint>> {
        match p {
            Some(p) => load_checkpoint(p, &ds, &cb, Some(&fold)).map(Some),
            None if methods.contains(&m) => Err(Error::Data(format!(
                "method {} needs a checkpoint (--{})",
                m.name(),
                if m == Method::Proposed { "model" } else { "convpool-model" }
            ))),
            None => Ok(None),
        }
    };
    let proposed = load(&a.model, Method::Proposed)?;
    let convpool = load(&a.convpool_model, Method::Convpool)?;
    let models = Models {
        proposed: proposed.as_ref().map(|c| (&c.config, &c.params)),
        convpool: convpool.as_ref().map(|c| (&c.config, &c.params)),
    };
    let r = pipeline::evaluate_fold(&ds.config, &fold, &cb, &models, &methods, &ds.digest)?;
    write_atomic(&a.out.join("metrics.csv"), r.to_csv().as_bytes())?;
    write_atomic(&a.out.join("metrics.json"), (r.to_json()? + "\n").as_bytes())?;
    print!("{}", r.to_csv());
    for m in &r.methods {
        if m.rough_inversions > 0 || m.clamped_tracks > 0 || m.held_components > 0 {
            println!(
                "# {}: {} rough inversions, {} clamped tracks, {} held PCA components",
                m.method.name(),
                m.rough_inversions,
                m.clamped_tracks,
                m.held_components
            );
        }
    }
    Ok(())
}

fn cmd_report(a: Report) -> Result<()> {
    let mut reports = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() { input.join("metrics.json") } else { input.clone() };
        let text = String::from_utf8(read(&path)?).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
        reports.push(MetricsReport::from_json(&text)?);
    }
    let merged = report::merge_reports(&reports)?;
    write_atomic(&a.out.join("table.csv"), report::table_csv(&merged).as_bytes())?;
    write_atomic(&a.out.join("metrics.csv"), merged.to_csv().as_bytes())?;
    write_atomic(&a.out.join("error.svg"), report::error_plot_svg(&merged).as_bytes())?;
    write_atomic(&a.out.join("ncc.svg"), report::ncc_plot_svg(&merged).as_bytes())?;
    if let Some(svg) = report::trajectory_plot_svg(&merged) {
        write_atomic(&a.out.join("trajectories.svg"), svg.as_bytes())?;
    }
    print!("{}", report::table_csv(&merged));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Codebook(a) => cmd_codebook(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
