use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mmtraj::annotator::{AnnotatorParams, AnnotatorTrainConfig, ThresholdCalibration};
use mmtraj::cohort::{load_cohort, write_cohort, write_exclusions, Cohort, Feature, PatientRecord};
use mmtraj::config::KeyValues;
use mmtraj::crbm::GibbsChainConfig;
use mmtraj::eval::{trajectory_seed, Row};
use mmtraj::forecaster::{forecast_trajectory, ForecasterParams, TrainConfig};
use mmtraj::nn::{load_checkpoint, save_checkpoint};
use mmtraj::pipeline::{
    annotation_features, calibrate_annotator, evaluate_fold, feature_mode_of, fit_annotator, fit_forecaster,
    fit_transform, metric_rows, raw_series, render_metrics, run_cv, score_sequences, write_fold_outputs, FittedFold,
    FoldSeeds, RunConfig, ANNOTATOR_STEM, CALIBRATION_FILE, FEATURE_TRANSFORM_FILE, FORECASTER_STEM, TRANSFORM_FILE,
};
use mmtraj::preprocess::{transform_series, TransformParams};
use mmtraj::report::emit_report;
use mmtraj::synth::{synthesize_cohort, SynthConfig};

/// Probabilistic lab-trajectory forecasting and progression annotation.
#[derive(Debug, Parser)]
#[command(name = "mmtraj", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "mmtraj-out")]
    out: PathBuf,
    /// Fold index: train on the other folds, apply to this one.
    #[arg(long, global = true)]
    fold: Option<usize>,
}

#[derive(Debug, Args)]
struct CohortArg {
    /// Cohort CSV; defaults to the configured source.
    #[arg(long)]
    cohort: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArg {
    /// Directory holding fitted artefacts; defaults to --out.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (`synth.*` keys or a bare synth config).
    Synth,
    /// Validate a cohort CSV and write the accepted patients and exclusions.
    Ingest { input: PathBuf },
    /// Assign patients to cross-validation folds.
    Split(CohortArg),
    /// Fit the lab transform and train the forecaster.
    TrainForecaster(CohortArg),
    /// Fit the annotation feature transform and train the annotator.
    TrainAnnotator(CohortArg),
    /// Choose the F-beta optimal threshold on training scores.
    Calibrate {
        #[command(flatten)]
        cohort: CohortArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Sample trajectory forecasts after each patient's last visit.
    Forecast {
        #[command(flatten)]
        cohort: CohortArg,
        #[command(flatten)]
        model: ModelArg,
        /// Steps ahead; defaults to eval.max_horizon.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score every visit for progression.
    Annotate {
        #[command(flatten)]
        cohort: CohortArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Evaluate fitted artefacts on the held-out fold.
    Evaluate {
        #[command(flatten)]
        cohort: CohortArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Full cross-validated experiment with report.
    RunCv,
    /// Regenerate figures and report.md from a run directory.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Error chain without causes that an outer message already quotes.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &text;
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<mmtraj::Error>())
        .map_or(2, |m| m.exit_code() as u8)
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Synth => synth(cli),
        Command::Ingest { input } => ingest(cli, input),
        Command::Split(c) => split(cli, c),
        Command::TrainForecaster(c) => train_forecaster(cli, c),
        Command::TrainAnnotator(c) => train_annotator(cli, c),
        Command::Calibrate { cohort, model } => calibrate(cli, cohort, model),
        Command::Forecast { cohort, model, horizon } => forecast(cli, cohort, model, *horizon),
        Command::Annotate { cohort, model } => annotate(cli, cohort, model),
        Command::Evaluate { cohort, model } => evaluate(cli, cohort, model),
        Command::RunCv => {
            let config = run_config(cli)?;
            let only = cli.fold.map(|f| vec![f]);
            let summary = run_cv(&config, &cli.out, only.as_deref())?;
            for (k, s) in summary.status.iter().enumerate() {
                let (status, message) = s.csv();
                println!("fold {k}: {status} {message}");
            }
            println!("wrote {}", summary.out_dir.display());
            Ok(summary.exit_code() as u8)
        }
        Command::Report => {
            let files = emit_report(&cli.out)?;
            println!("wrote {} files under {}", files.len(), cli.out.display());
            Ok(0)
        }
    }
}

fn config_file(path: &Path) -> Result<KeyValues> {
    KeyValues::load(path).map_err(|e| match e {
        mmtraj::Error::Io { .. } => mmtraj::Error::Config(e.to_string()).into(),
        e => e.into(),
    })
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_key_values(&config_file(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn cohort(config: &RunConfig, arg: &CohortArg) -> Result<Cohort> {
    let cohort = match &arg.cohort {
        Some(path) => load_cohort(path)?.cohort,
        None => config.load_cohort()?.0,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Patients used for fitting and the patients the fitted artefacts are applied
/// to. Without `--fold` both are the whole cohort.
fn partition<'a>(
    cli: &Cli,
    config: &RunConfig,
    cohort: &'a Cohort,
) -> Result<(Vec<&'a PatientRecord>, Vec<&'a PatientRecord>)> {
    match cli.fold {
        Some(k) => {
            if k >= config.folds {
                return Err(mmtraj::Error::Config(format!("fold {k} out of range 0..{}", config.folds)).into());
            }
            Ok(config.split(cohort)?.partition(cohort, k))
        }
        None => {
            let all: Vec<&PatientRecord> = cohort.patients.iter().collect();
            Ok((all.clone(), all))
        }
    }
}

/// Same seeds as `run-cv` for the same fold; a separate stream without `--fold`.
fn seeds(cli: &Cli, config: &RunConfig) -> FoldSeeds {
    FoldSeeds::new(config.seed, cli.fold.unwrap_or(config.folds))
}

fn model_dir<'a>(cli: &'a Cli, arg: &'a ModelArg) -> &'a Path {
    arg.model.as_deref().unwrap_or(&cli.out)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", e + 1);
    }
    s
}

fn synth(cli: &Cli) -> Result<u8> {
    let mut config = match &cli.config {
        Some(path) => {
            let kv = config_file(path)?;
            let section = kv.section("synth");
            SynthConfig::from_key_values(if section.iter().next().is_some() { &section } else { &kv })?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let s = synthesize_cohort(&config)?;
    let out = out_dir(cli)?;
    write_cohort(&s.cohort, out.join("cohort.csv"))?;
    println!(
        "{} patients, {} visits, PD prevalence {:.4} (rule threshold {:.4})",
        s.cohort.len(),
        s.cohort.n_visits(),
        s.prevalence,
        s.threshold
    );
    Ok(0)
}

fn ingest(cli: &Cli, input: &Path) -> Result<u8> {
    let report = load_cohort(input)?;
    report.cohort.validate()?;
    let out = out_dir(cli)?;
    write_cohort(&report.cohort, out.join("cohort.csv"))?;
    write_exclusions(&report.excluded, out.join("exclusions.csv"))?;
    println!(
        "{} patients accepted, {} excluded",
        report.cohort.len(),
        report.excluded.len()
    );
    Ok(0)
}

fn split(cli: &Cli, arg: &CohortArg) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let folds = config.split(&cohort)?;
    folds.write(out_dir(cli)?.join("folds.csv"))?;
    println!("fold sizes {:?}", folds.sizes());
    Ok(0)
}

fn train_forecaster(cli: &Cli, arg: &CohortArg) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let (train, _) = partition(cli, &config, &cohort)?;
    let transform = fit_transform(&train)?;
    let tc = TrainConfig {
        seed: seeds(cli, &config).forecaster,
        ..config.forecaster.clone()
    };
    let (params, losses) = fit_forecaster(&train, &transform, &tc)?;
    let out = out_dir(cli)?;
    transform.write_csv(out.join(TRANSFORM_FILE))?;
    save_checkpoint(&params, out.join(FORECASTER_STEM))?;
    write(out.join("forecaster_loss.csv"), &loss_csv(&losses))?;
    println!(
        "forecaster trained on {} patients, final loss {:.6}",
        train.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn train_annotator(cli: &Cli, arg: &CohortArg) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let (train, _) = partition(cli, &config, &cohort)?;
    let ac = AnnotatorTrainConfig {
        seed: seeds(cli, &config).annotator,
        ..config.annotator.clone()
    };
    let (params, feature_transform, losses) = fit_annotator(&train, config.feature_mode, &ac)?;
    let out = out_dir(cli)?;
    feature_transform.write_csv(out.join(FEATURE_TRANSFORM_FILE))?;
    save_checkpoint(&params, out.join(ANNOTATOR_STEM))?;
    write(out.join("annotator_loss.csv"), &loss_csv(&losses))?;
    println!(
        "annotator trained on {} patients, final loss {:.6}",
        train.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn load_annotator(dir: &Path) -> Result<(AnnotatorParams<f64>, TransformParams<f64>)> {
    let transform = TransformParams::read_csv(dir.join(FEATURE_TRANSFORM_FILE))?;
    let mut params = AnnotatorParams::zeros();
    load_checkpoint(&mut params, dir.join(ANNOTATOR_STEM))?;
    params.validate()?;
    Ok((params, transform))
}

fn calibrate(cli: &Cli, arg: &CohortArg, model: &ModelArg) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let (train, _) = partition(cli, &config, &cohort)?;
    let (params, transform) = load_annotator(model_dir(cli, model))?;
    let mode = feature_mode_of(&transform)?;
    let calibration = calibrate_annotator(&train, &params, mode, &transform, config.beta)?;
    write(out_dir(cli)?.join(CALIBRATION_FILE), &calibration.to_csv_string())?;
    println!(
        "threshold {:.6} (F{} = {:.4})",
        calibration.threshold, calibration.beta, calibration.achieved_fbeta
    );
    Ok(0)
}

fn forecast(cli: &Cli, arg: &CohortArg, model: &ModelArg, horizon: Option<usize>) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let (_, target) = partition(cli, &config, &cohort)?;
    let dir = model_dir(cli, model);
    let transform = TransformParams::read_csv(dir.join(TRANSFORM_FILE))?;
    let mut params = ForecasterParams::zeros();
    load_checkpoint(&mut params, dir.join(FORECASTER_STEM))?;
    params.validate()?;
    let horizon = horizon.unwrap_or(config.max_horizon);
    let base = seeds(cli, &config).gibbs;

    let mut csv = String::from("patient_id,step,feature,mean,lo95,hi95,mean_raw,lo95_raw,hi95_raw\n");
    for (p, (record, raw)) in target.iter().zip(raw_series(&target)?).enumerate() {
        let history = transform_series(&raw, &transform);
        let gibbs = GibbsChainConfig {
            seed: trajectory_seed(base, p, history.len()),
            ..config.gibbs
        };
        let d = forecast_trajectory(&params, &history, horizon, &gibbs)?;
        let invert = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|r| transform.invert(r)).collect() };
        let (mean_raw, lo_raw, hi_raw) = (invert(&d.mean), invert(&d.lo95), invert(&d.hi95));
        for step in 0..horizon {
            for f in Feature::ALL {
                let i = f.index();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{}",
                    record.patient_id,
                    step + 1,
                    f.name(),
                    d.mean[step][i],
                    d.lo95[step][i],
                    d.hi95[step][i],
                    mean_raw[step][i],
                    lo_raw[step][i],
                    hi_raw[step][i]
                );
            }
        }
    }
    write(out_dir(cli)?.join("forecast.csv"), &csv)?;
    println!("{} patients forecast {horizon} steps ahead", target.len());
    Ok(0)
}

fn annotate(cli: &Cli, arg: &CohortArg, model: &ModelArg) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let (_, target) = partition(cli, &config, &cohort)?;
    let dir = model_dir(cli, model);
    let (params, transform) = load_annotator(dir)?;
    let path = dir.join(CALIBRATION_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let (_, threshold, _) = ThresholdCalibration::parse_summary(&text)?;
    let raw: Vec<Vec<Row>> = raw_series(&target)?;
    let (features, _) = annotation_features(&raw, feature_mode_of(&transform)?, Some(&transform))?;
    let scores = score_sequences(&params, &features)?;

    let mut csv = String::from("patient_id,visit_index,pd_probability,pd_flag\n");
    let mut flagged = 0;
    for (record, s) in target.iter().zip(&scores) {
        for (visit, &score) in record.visits.iter().zip(s) {
            let flag = score >= threshold;
            flagged += flag as usize;
            let _ = writeln!(
                csv,
                "{},{},{score},{}",
                record.patient_id, visit.visit_index, flag as u8
            );
        }
    }
    write(out_dir(cli)?.join("annotations.csv"), &csv)?;
    println!("{flagged} visits flagged at threshold {threshold:.6}");
    Ok(0)
}

fn evaluate(cli: &Cli, arg: &CohortArg, model: &ModelArg) -> Result<u8> {
    let config = run_config(cli)?;
    let cohort = cohort(&config, arg)?;
    let (train, val) = partition(cli, &config, &cohort)?;
    let fitted = FittedFold::load(model_dir(cli, model))?;
    let ev = evaluate_fold(&fitted, &train, &val, &config, &seeds(cli, &config))?;
    let out = out_dir(cli)?;
    write_fold_outputs(out, &ev)?;
    let rows = metric_rows(cli.fold.unwrap_or(0), &fitted, &ev);
    write(out.join("metrics.csv"), &render_metrics(&rows))?;
    if let Some(a) = &ev.annotator {
        println!("annotator AUROC {:.4}, AUPRC {:.4}", a.auroc, a.auprc);
    }
    Ok(0)
}
