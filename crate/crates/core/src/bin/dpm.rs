use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpm_core::baselines::{build_lagged_design, feature_names, fit_glm};
use dpm_core::estimation::{fit_restarts, FitReport, SgdConfig};
use dpm_core::eval::{last_touch_histogram, roc_curve, score_dataset};
use dpm_core::filter::FilterConfig;
use dpm_core::io::{
    load_dataset, load_json, load_model, read_coefficients, read_scores, save_model, split_dataset,
    write_coefficients, write_dataset, write_histogram, write_roc, write_scores, write_trajectories,
    FitMetadata, LoadOptions, ModelFile, ScoreRow, SegmentModel, MODEL_SCHEMA_VERSION,
};
use dpm_core::model::{sigmoid, Dataset};
use dpm_core::simulate::{calibrate_offset, generate, SimConfig};
use dpm_core::{DpmError, Result};

/// Dynamic propensity model: simulate, fit, score and evaluate.
#[derive(Parser, Debug)]
#[command(name = "dpm", version)]
struct Cli {
    /// Seed for every randomized step; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset column holding a segment key; models are fit per segment.
    #[arg(long, global = true)]
    segment_column: Option<String>,
    /// Worker threads for per-customer work. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset from a simulation config.
    Simulate(SimulateArgs),
    /// Fit the model by stochastic gradient ascent.
    Fit(FitArgs),
    /// Fit a lagged logistic regression baseline.
    FitBaseline(FitBaselineArgs),
    /// Write one-step-ahead purchase probabilities for every customer-day.
    Score(ScoreArgs),
    /// ROC curve and AUC of pooled customer-day scores.
    EvalRoc(EvalRocArgs),
    /// Days between each purchase and the last touch per channel.
    DiagLasttouch(DiagArgs),
    /// Customer-level train/test split, stratified by purchase.
    Split(SplitArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set the offset so the simulated daily purchase rate is this value.
    #[arg(long)]
    calibrate_rate: Option<f64>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, required_unless_present = "print_config")]
    data: Option<PathBuf>,
    /// Fitting config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Independent fits from different starting points; the one with the
    /// highest predictive likelihood is kept.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// CSV of the raw parameter iterates.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitBaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    lag: u8,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Filter config JSON; defaults are used when omitted.
    #[arg(long)]
    filter_config: Option<PathBuf>,
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalRocArgs {
    /// Score CSV written by `score`.
    #[arg(long, conflicts_with_all = ["model", "coefficients"])]
    scores: Option<PathBuf>,
    /// Model file to score `--data` with.
    #[arg(long, requires = "data", conflicts_with = "coefficients")]
    model: Option<PathBuf>,
    /// Baseline coefficient CSV written by `fit-baseline`.
    #[arg(long, requires = "data")]
    coefficients: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pool only label days at or after this 0-based day.
    #[arg(long, default_value_t = 0)]
    min_label_day: usize,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    max_days: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    train_frac: f64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DpmError::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let load = LoadOptions {
        segment_column: cli.segment_column.clone(),
    };
    let segment_column = cli.segment_column.as_deref();
    match cli.command {
        Command::Simulate(args) => simulate(args, cli.seed),
        Command::Fit(args) => fit(args, cli.seed, &load),
        Command::FitBaseline(args) => {
            let data = load_dataset(&args.data, &load)?;
            let design = build_lagged_design(&data, args.lag as usize)?;
            let fit = fit_glm(&design, args.max_iters, args.tol)?;
            if !fit.converged {
                eprintln!("warning: IRLS did not converge in {} iterations", fit.iterations);
            }
            if fit.separation_detected {
                eprintln!("warning: possible separation; estimates may be unreliable");
            }
            write_coefficients(&args.out, &fit)
        }
        Command::Score(args) => {
            let model = load_model(&args.model)?;
            let data = load_dataset(&args.data, &load)?;
            let cfg = filter_config(&args.filter, cli.seed)?;
            write_scores(&args.out, &score_rows(&model, &data, &cfg)?)
        }
        Command::EvalRoc(args) => eval_roc(args, cli.seed, &load),
        Command::DiagLasttouch(args) => {
            let data = load_dataset(&args.data, &load)?;
            write_histogram(&args.out, &last_touch_histogram(&data, args.max_days))
        }
        Command::Split(args) => {
            let data = load_dataset(&args.data, &load)?;
            let (train, test) = split_dataset(&data, args.train_frac, cli.seed.unwrap_or(0))?;
            write_dataset(&args.train_out, &train, segment_column)?;
            write_dataset(&args.test_out, &test, segment_column)?;
            println!("train\t{}\ntest\t{}", train.len(), test.len());
            Ok(())
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(DpmError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn simulate(args: SimulateArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: SimConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(rate) = args.calibrate_rate {
        cfg.true_params.c = calibrate_offset(&cfg.true_params, &cfg.touch, cfg.horizon, rate, cfg.seed)?;
    }
    if args.print_config {
        return print_json(&cfg);
    }
    let data = generate(&cfg)?;
    write_dataset(args.out.as_ref().expect("required by clap"), &data, None)?;
    println!(
        "customers\t{}\npurchasers\t{}\ndaily_rate\t{}",
        data.len(),
        data.purchasers(),
        data.daily_purchase_rate()
    );
    Ok(())
}

fn fit(args: FitArgs, seed: Option<u64>, load: &LoadOptions) -> Result<()> {
    let mut cfg: SgdConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => SgdConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.filter.seed = seed;
    }
    if args.print_config {
        return print_json(&cfg);
    }
    cfg.validate()?;
    let data = load_dataset(args.data.as_ref().expect("required by clap"), load)?;

    let mut models = Vec::new();
    let mut reports: Vec<(Option<String>, FitReport)> = Vec::new();
    for (segment, part) in data.by_segment() {
        let mut outcomes = fit_restarts(&part, &cfg, args.restarts)?;
        let best = outcomes.swap_remove(0);
        let used = SgdConfig {
            seed: best.seed,
            init_phi: best.init_phi,
            ..cfg.clone()
        };
        let label = segment.as_deref().unwrap_or("all");
        for w in &best.report.warnings {
            eprintln!("warning [{label}]: {w}");
        }
        models.push(SegmentModel {
            segment: segment.clone(),
            params: best.report.final_params.clone(),
            fit: Some(FitMetadata::from_report(&used, &best.report)?),
        });
        reports.push((segment, best.report));
    }
    let model = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        k: data.k(),
        l: data.l(),
        models,
    };
    save_model(args.out.as_ref().expect("required by clap"), &model)?;
    if let Some(path) = &args.trajectory {
        let refs: Vec<_> = reports.iter().map(|(s, r)| (s.clone(), r)).collect();
        write_trajectories(path, &refs)?;
    }
    Ok(())
}

fn filter_config(args: &FilterArgs, seed: Option<u64>) -> Result<FilterConfig> {
    let mut cfg: FilterConfig = match &args.filter_config {
        Some(path) => load_json(path)?,
        None => FilterConfig::default(),
    };
    if let Some(p) = args.particles {
        cfg.particle_count = p;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn score_rows(model: &ModelFile, data: &Dataset, cfg: &FilterConfig) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (segment, part) in data.by_segment() {
        let params = model.params_for(segment.as_deref()).ok_or_else(|| {
            DpmError::InvalidConfig(format!("model file has no parameters for segment {segment:?}"))
        })?;
        let scores = score_dataset(params, &part, cfg)?;
        for (h, per_day) in part.customers().iter().zip(scores) {
            for (day, score) in per_day.into_iter().enumerate() {
                rows.push(ScoreRow {
                    id: h.id().to_string(),
                    day,
                    score,
                    y: h.y()[day],
                });
            }
        }
    }
    Ok(rows)
}

fn eval_roc(args: EvalRocArgs, seed: Option<u64>, load: &LoadOptions) -> Result<()> {
    let (scores, labels) = if let Some(path) = &args.scores {
        let rows = read_scores(path)?;
        rows.iter()
            .filter(|r| r.day >= args.min_label_day)
            .map(|r| (r.score, r.y))
            .unzip()
    } else {
        let Some(data_path) = &args.data else {
            return Err(DpmError::InvalidConfig(
                "eval-roc needs --scores, or --data with --model or --coefficients".into(),
            ));
        };
        let data = load_dataset(data_path, load)?;
        if let Some(path) = &args.model {
            let model = load_model(path)?;
            let cfg = filter_config(&args.filter, seed)?;
            let rows = score_rows(&model, &data, &cfg)?;
            rows.iter()
                .filter(|r| r.day >= args.min_label_day)
                .map(|r| (r.score, r.y))
                .unzip()
        } else if let Some(path) = &args.coefficients {
            baseline_scores(path, &data, args.min_label_day)?
        } else {
            return Err(DpmError::InvalidConfig(
                "eval-roc needs --model or --coefficients with --data".into(),
            ));
        }
    };
    let roc = roc_curve(&scores, &labels)?;
    write_roc(&args.out, &roc)?;
    println!("auc\t{}", roc.auc);
    Ok(())
}

fn baseline_scores(path: &PathBuf, data: &Dataset, min_label_day: usize) -> Result<(Vec<f64>, Vec<u8>)> {
    let table = read_coefficients(path)?;
    let names: Vec<&str> = table.iter().map(|c| c.name.as_str()).collect();
    let lag = (0..=2)
        .find(|&lag| feature_names(data.k(), data.l(), lag) == names)
        .ok_or_else(|| {
            DpmError::InvalidConfig("coefficient names do not match the dataset's channels at any lag".into())
        })?;
    let coef: Vec<f64> = table.iter().map(|c| c.estimate).collect();
    let design = build_lagged_design(data, lag)?.from_label_day(min_label_day);
    let scores = (0..design.rows())
        .map(|i| {
            let (row, _) = design.row(i);
            sigmoid(row.iter().zip(&coef).map(|(x, b)| x * b).sum())
        })
        .collect();
    Ok((scores, design.labels().to_vec()))
}

