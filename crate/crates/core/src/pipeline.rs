//! Cross-validated experiment: cohort → folds → per-fold fitting of the lab
//! transform, forecaster, annotator and threshold on training patients only →
//! evaluation on the held-out fold → CSV bundle and figures.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::annotator::{
    annotate, calibrate_threshold, derive_features, fit_feature_transform, train_annotator, transform_features,
    AnnotationRow, AnnotatorParams, AnnotatorTrainConfig, FeatureMode, ThresholdCalibration,
};
use crate::cohort::{
    load_cohort, split_folds, write_cohort, write_exclusions, Cohort, Exclusion, Feature, FoldAssignment,
    PatientRecord, N_FEATURES,
};
use crate::config::KeyValues;
use crate::crbm::GibbsChainConfig;
use crate::error::{Error, Result};
use crate::eval::{
    annotator_scorer, combined_pipeline_eval, feature_correlations, invert_forecasts, model_forecasts,
    moment_comparison, one_step_series, CombinedEval, HorizonCorrelations, LagComparison, Row, TrajectorySummary,
};
use crate::forecaster::{train_forecaster, ForecasterParams, TrainConfig};
use crate::metrics::{auroc, fbeta, pr_curve, roc_curve, Confusion, PrPoint, RocPoint, RocSummary};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::preprocess::{fit_lab_transform, imputed_series, qq_points, transform_series, TransformParams};
use crate::seeds::derive_seed;
use crate::synth::{synthesize_cohort, SynthConfig};

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CohortSource {
    File(PathBuf),
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: CohortSource,
    pub seed: u64,
    pub folds: usize,
    pub forecaster: TrainConfig,
    pub annotator: AnnotatorTrainConfig,
    pub feature_mode: FeatureMode,
    pub gibbs: GibbsChainConfig,
    pub beta: f64,
    pub max_horizon: usize,
    pub max_lag: usize,
    pub shuffle_control: bool,
    /// Validation patients drawn as trajectory-sleeve examples per fold.
    pub sleeve_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: CohortSource::Synthetic(SynthConfig::default()),
            seed: 42,
            folds: 5,
            forecaster: TrainConfig::default(),
            annotator: AnnotatorTrainConfig::default(),
            feature_mode: FeatureMode::default(),
            gibbs: GibbsChainConfig::default(),
            beta: 5.0,
            max_horizon: 5,
            max_lag: 5,
            shuffle_control: true,
            sleeve_examples: 3,
        }
    }
}

impl RunConfig {
    /// Keys: `seed`, `folds`, `beta`, `cohort` (path; otherwise `synth.*`),
    /// `forecaster.*`, `annotator.*` (plus `annotator.feature_mode`),
    /// `gibbs.steps|n_samples|init`, `eval.max_horizon|max_lag|shuffle_control|sleeve_examples`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = RunConfig::default();
        let source = match kv.get_str("cohort") {
            Some(path) => CohortSource::File(PathBuf::from(path)),
            None => CohortSource::Synthetic(SynthConfig::from_key_values(&kv.section("synth"))?),
        };
        let g = kv.section("gibbs");
        let gibbs = GibbsChainConfig {
            steps: g.get_or("steps", d.gibbs.steps)?,
            n_samples: g.get_or("n_samples", d.gibbs.n_samples)?,
            seed: 0,
            init: g.get_or("init", d.gibbs.init)?,
        };
        let a = kv.section("annotator");
        let e = kv.section("eval");
        let cfg = RunConfig {
            source,
            seed: kv.get_or("seed", d.seed)?,
            folds: kv.get_or("folds", d.folds)?,
            forecaster: TrainConfig::from_key_values(&kv.section("forecaster"))?,
            annotator: AnnotatorTrainConfig::from_key_values(&a)?,
            feature_mode: a.get_or("feature_mode", d.feature_mode)?,
            gibbs,
            beta: kv.get_or("beta", d.beta)?,
            max_horizon: e.get_or("max_horizon", d.max_horizon)?,
            max_lag: e.get_or("max_lag", d.max_lag)?,
            shuffle_control: e.get_or("shuffle_control", d.shuffle_control)?,
            sleeve_examples: e.get_or("sleeve_examples", d.sleeve_examples)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("seed", self.seed);
        kv.insert("folds", self.folds);
        kv.insert("beta", self.beta);
        match &self.source {
            CohortSource::File(p) => kv.insert("cohort", p.display()),
            CohortSource::Synthetic(s) => {
                for (k, v) in s.to_key_values().iter() {
                    kv.insert(format!("synth.{k}"), v);
                }
            }
        }
        for (k, v) in self.forecaster.to_key_values().iter() {
            kv.insert(format!("forecaster.{k}"), v);
        }
        for (k, v) in self.annotator.to_key_values().iter() {
            kv.insert(format!("annotator.{k}"), v);
        }
        kv.insert("annotator.feature_mode", self.feature_mode);
        kv.insert("gibbs.steps", self.gibbs.steps);
        kv.insert("gibbs.n_samples", self.gibbs.n_samples);
        kv.insert("gibbs.init", self.gibbs.init);
        kv.insert("eval.max_horizon", self.max_horizon);
        kv.insert("eval.max_lag", self.max_lag);
        kv.insert("eval.shuffle_control", self.shuffle_control);
        kv.insert("eval.sleeve_examples", self.sleeve_examples);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.max_horizon == 0 {
            return Err(Error::Config("eval.max_horizon must be at least 1".into()));
        }
        self.forecaster.validate()?;
        self.annotator.validate()?;
        self.gibbs.validate()
    }

    /// Cohort named by the configuration, with any ingest exclusions.
    pub fn load_cohort(&self) -> Result<(Cohort, Vec<Exclusion>)> {
        match &self.source {
            CohortSource::File(path) => {
                let r = load_cohort(path)?;
                Ok((r.cohort, r.excluded))
            }
            CohortSource::Synthetic(s) => Ok((synthesize_cohort(s)?.cohort, Vec::new())),
        }
    }

    pub fn split(&self, cohort: &Cohort) -> Result<FoldAssignment> {
        split_folds(cohort, self.folds, derive_seed(self.seed, "split", 0))
    }
}

/// Seeds used by every stage of one fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldSeeds {
    pub forecaster: u64,
    pub annotator: u64,
    pub gibbs: u64,
    pub shuffle: u64,
    pub shuffled_annotator: u64,
    pub sleeves: u64,
}

impl FoldSeeds {
    pub fn new(global: u64, fold: usize) -> Self {
        let f = fold as u64;
        FoldSeeds {
            forecaster: derive_seed(global, "forecaster", f),
            annotator: derive_seed(global, "annotator", f),
            gibbs: derive_seed(global, "gibbs", f),
            shuffle: derive_seed(global, "label-shuffle", f),
            shuffled_annotator: derive_seed(global, "annotator-shuffled", f),
            sleeves: derive_seed(global, "sleeve-examples", f),
        }
    }

    fn entries(&self) -> [(&'static str, u64); 6] {
        [
            ("forecaster", self.forecaster),
            ("annotator", self.annotator),
            ("gibbs", self.gibbs),
            ("label_shuffle", self.shuffle),
            ("annotator_shuffled", self.shuffled_annotator),
            ("sleeve_examples", self.sleeves),
        ]
    }
}

pub fn require_labels(records: &[&PatientRecord]) -> Result<Vec<Vec<bool>>> {
    records
        .iter()
        .map(|p| {
            p.visits
                .iter()
                .map(|v| {
                    v.pd_label.ok_or_else(|| {
                        Error::Validation(format!(
                            "patient {} visit {} has no pd_label",
                            p.patient_id, v.visit_index
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// LOCF-imputed raw lab series.
pub fn raw_series(records: &[&PatientRecord]) -> Result<Vec<Vec<Row>>> {
    records.iter().map(|p| imputed_series(p)).collect()
}

/// Everything fitted on the training portion of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedFold {
    pub transform: TransformParams<f64>,
    pub feature_mode: FeatureMode,
    pub feature_transform: TransformParams<f64>,
    pub forecaster: ForecasterParams<f64>,
    pub annotator: AnnotatorParams<f64>,
    pub calibration: ThresholdCalibration,
    pub forecaster_loss: Vec<f64>,
    pub annotator_loss: Vec<f64>,
}

pub const FORECASTER_STEM: &str = "forecaster";
pub const ANNOTATOR_STEM: &str = "annotator";
pub const TRANSFORM_FILE: &str = "transform.csv";
pub const FEATURE_TRANSFORM_FILE: &str = "annotator_transform.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const LOSS_FILE: &str = "training_loss.csv";

pub fn fit_transform(train: &[&PatientRecord]) -> Result<TransformParams<f64>> {
    fit_lab_transform(train.iter().copied())
}

pub fn fit_forecaster(
    train: &[&PatientRecord],
    transform: &TransformParams<f64>,
    config: &TrainConfig,
) -> Result<(ForecasterParams<f64>, Vec<f64>)> {
    let series: Vec<Vec<Row>> = raw_series(train)?
        .iter()
        .map(|s| transform_series(s, transform))
        .collect();
    let (params, log) = train_forecaster(&series, config)?;
    Ok((params, log.epoch_loss))
}

/// Annotation features of raw series, transformed with a transform fitted on
/// the same rows when `transform` is `None`.
pub fn annotation_features(
    raw: &[Vec<Row>],
    mode: FeatureMode,
    transform: Option<&TransformParams<f64>>,
) -> Result<(Vec<Vec<AnnotationRow>>, TransformParams<f64>)> {
    let features: Vec<Vec<AnnotationRow>> = raw.iter().map(|s| derive_features(s, mode)).collect();
    let tp = match transform {
        Some(t) => t.clone(),
        None => {
            let rows: Vec<AnnotationRow> = features.iter().flatten().copied().collect();
            fit_feature_transform(&rows, mode)?
        }
    };
    let out = features.iter().map(|f| transform_features(f, &tp)).collect();
    Ok((out, tp))
}

pub fn score_sequences(params: &AnnotatorParams<f64>, features: &[Vec<AnnotationRow>]) -> Result<Vec<Vec<f64>>> {
    features.iter().map(|f| annotate(params, f)).collect()
}

/// Annotator and its feature transform fitted on labelled training patients.
pub fn fit_annotator(
    train: &[&PatientRecord],
    mode: FeatureMode,
    config: &AnnotatorTrainConfig,
) -> Result<(AnnotatorParams<f64>, TransformParams<f64>, Vec<f64>)> {
    let labels = require_labels(train)?;
    let (features, feature_transform) = annotation_features(&raw_series(train)?, mode, None)?;
    let (params, loss) = train_annotator(&features, &labels, config)?;
    Ok((params, feature_transform, loss))
}

/// F_β-optimal threshold on the annotator's scores of the given patients.
pub fn calibrate_annotator(
    records: &[&PatientRecord],
    annotator: &AnnotatorParams<f64>,
    mode: FeatureMode,
    feature_transform: &TransformParams<f64>,
    beta: f64,
) -> Result<ThresholdCalibration> {
    let labels = require_labels(records)?;
    let (features, _) = annotation_features(&raw_series(records)?, mode, Some(feature_transform))?;
    let scores: Vec<f64> = score_sequences(annotator, &features)?.into_iter().flatten().collect();
    let flat: Vec<bool> = labels.iter().flatten().copied().collect();
    calibrate_threshold(&scores, &flat, beta)
}

/// Fit transform, both models and the decision threshold on training patients.
pub fn fit_fold(train: &[&PatientRecord], config: &RunConfig, seeds: &FoldSeeds) -> Result<FittedFold> {
    require_labels(train)?;
    let transform = fit_transform(train)?;
    let fc = TrainConfig {
        seed: seeds.forecaster,
        ..config.forecaster.clone()
    };
    let (forecaster, forecaster_loss) = fit_forecaster(train, &transform, &fc)?;
    let ac = AnnotatorTrainConfig {
        seed: seeds.annotator,
        ..config.annotator.clone()
    };
    let (annotator, feature_transform, annotator_loss) = fit_annotator(train, config.feature_mode, &ac)?;
    let calibration = calibrate_annotator(train, &annotator, config.feature_mode, &feature_transform, config.beta)?;
    Ok(FittedFold {
        transform,
        feature_mode: config.feature_mode,
        feature_transform,
        forecaster,
        annotator,
        calibration,
        forecaster_loss,
        annotator_loss,
    })
}

/// Annotation feature mode recorded by the column names of a feature transform.
pub fn feature_mode_of(transform: &TransformParams<f64>) -> Result<FeatureMode> {
    let names: Vec<&str> = transform.features.iter().map(|f| f.name.as_str()).collect();
    [FeatureMode::TemporalDelta, FeatureMode::InvolvedUninvolved]
        .into_iter()
        .find(|m| m.names()[..] == names[..])
        .ok_or_else(|| Error::Checkpoint(format!("unrecognised annotation features {names:?}")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl FittedFold {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        self.transform.write_csv(dir.join(TRANSFORM_FILE))?;
        self.feature_transform.write_csv(dir.join(FEATURE_TRANSFORM_FILE))?;
        save_checkpoint(&self.forecaster, dir.join(FORECASTER_STEM))?;
        save_checkpoint(&self.annotator, dir.join(ANNOTATOR_STEM))?;
        write_file(&dir.join(CALIBRATION_FILE), &self.calibration.to_csv_string())?;
        let mut loss = String::from("epoch,model,loss\n");
        for (e, l) in self.forecaster_loss.iter().enumerate() {
            let _ = writeln!(loss, "{},forecaster,{l}", e + 1);
        }
        for (e, l) in self.annotator_loss.iter().enumerate() {
            let _ = writeln!(loss, "{},annotator,{l}", e + 1);
        }
        write_file(&dir.join(LOSS_FILE), &loss)
    }

    /// Reload the artefacts written by [`Self::save`]; training losses and the
    /// calibration curve are not restored.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let transform = TransformParams::read_csv(dir.join(TRANSFORM_FILE))?;
        let feature_transform = TransformParams::read_csv(dir.join(FEATURE_TRANSFORM_FILE))?;
        let feature_mode = feature_mode_of(&feature_transform)?;
        let mut forecaster = ForecasterParams::zeros();
        load_checkpoint(&mut forecaster, dir.join(FORECASTER_STEM))?;
        forecaster.validate()?;
        let mut annotator = AnnotatorParams::zeros();
        load_checkpoint(&mut annotator, dir.join(ANNOTATOR_STEM))?;
        annotator.validate()?;
        let (beta, threshold, achieved_fbeta) =
            ThresholdCalibration::parse_summary(&read_file(&dir.join(CALIBRATION_FILE))?)?;
        Ok(FittedFold {
            transform,
            feature_mode,
            feature_transform,
            forecaster,
            annotator,
            calibration: ThresholdCalibration {
                beta,
                threshold,
                achieved_fbeta,
                curve: Vec::new(),
            },
            forecaster_loss: Vec::new(),
            annotator_loss: Vec::new(),
        })
    }
}

/// Forecast sleeve for one validation patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SleeveExample {
    pub patient_id: String,
    pub n_prior: usize,
    /// All observed visits, transformed.
    pub observed: Vec<Row>,
    pub forecast: TrajectorySummary,
}

/// Held-out results of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub annotator: Option<RocSummary>,
    pub annotator_fbeta: f64,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub shuffled_auroc: Option<f64>,
    pub combined: CombinedEval,
    pub combined_patients: Vec<String>,
    pub moments: Vec<LagComparison>,
    pub correlations: Vec<HorizonCorrelations>,
    pub sleeves: Vec<SleeveExample>,
    /// `(feature, split, theoretical, sample)` on transformed columns.
    pub qq: Vec<(usize, &'static str, f64, f64)>,
}

/// Annotator trained on training labels permuted across all visits, scored
/// against the true held-out labels.
pub fn shuffled_label_auroc(
    train_features: &[Vec<AnnotationRow>],
    train_labels: &[Vec<bool>],
    val_features: &[Vec<AnnotationRow>],
    val_labels: &[Vec<bool>],
    config: &AnnotatorTrainConfig,
    shuffle_seed: u64,
) -> Result<f64> {
    let mut flat: Vec<bool> = train_labels.iter().flatten().copied().collect();
    flat.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let mut it = flat.into_iter();
    let shuffled: Vec<Vec<bool>> = train_labels
        .iter()
        .map(|l| it.by_ref().take(l.len()).collect())
        .collect();
    let (params, _) = train_annotator(train_features, &shuffled, config)?;
    let scores: Vec<f64> = score_sequences(&params, val_features)?.into_iter().flatten().collect();
    let truth: Vec<bool> = val_labels.iter().flatten().copied().collect();
    auroc(&scores, &truth)
}

const QQ_POINTS: usize = 101;

fn thinned_qq(column: &[f64]) -> Vec<(f64, f64)> {
    let pts = qq_points(column);
    if pts.len() <= QQ_POINTS {
        return pts;
    }
    (0..QQ_POINTS)
        .map(|k| pts[k * (pts.len() - 1) / (QQ_POINTS - 1)])
        .collect()
}

pub fn evaluate_fold(
    fitted: &FittedFold,
    train: &[&PatientRecord],
    val: &[&PatientRecord],
    config: &RunConfig,
    seeds: &FoldSeeds,
) -> Result<FoldEvaluation> {
    let val_labels = require_labels(val)?;
    let val_raw = raw_series(val)?;
    let val_t: Vec<Vec<Row>> = val_raw.iter().map(|s| transform_series(s, &fitted.transform)).collect();

    // annotator on observed validation series
    let (val_features, _) = annotation_features(&val_raw, fitted.feature_mode, Some(&fitted.feature_transform))?;
    let scores: Vec<f64> = score_sequences(&fitted.annotator, &val_features)?
        .into_iter()
        .flatten()
        .collect();
    let flat: Vec<bool> = val_labels.iter().flatten().copied().collect();
    let threshold = fitted.calibration.threshold;
    let annotator = RocSummary::compute(&scores, &flat, threshold).ok();
    let c = Confusion::at(&scores, &flat, threshold);
    let annotator_fbeta = fbeta(c.precision(), c.recall(), config.beta);
    let roc = roc_curve(&scores, &flat).unwrap_or_default();
    let pr = pr_curve(&scores, &flat).unwrap_or_default();

    let shuffled_auroc = if config.shuffle_control {
        let train_labels = require_labels(train)?;
        let (train_features, _) = annotation_features(
            &raw_series(train)?,
            fitted.feature_mode,
            Some(&fitted.feature_transform),
        )?;
        let ac = AnnotatorTrainConfig {
            seed: seeds.shuffled_annotator,
            ..config.annotator.clone()
        };
        Some(shuffled_label_auroc(
            &train_features,
            &train_labels,
            &val_features,
            &val_labels,
            &ac,
            seeds.shuffle,
        )?)
    } else {
        None
    };

    // forecasts after every prior count, then the three forecast analyses
    let gibbs = GibbsChainConfig {
        seed: seeds.gibbs,
        ..config.gibbs
    };
    let forecasts = model_forecasts(&fitted.forecaster, &val_t, config.max_horizon, &gibbs)?;
    let (obs1, fc1) = one_step_series(&val_t, &forecasts);
    let moments = moment_comparison(&obs1, &fc1, config.max_lag)?;
    let correlations = feature_correlations(&val_t, &forecasts, config.max_horizon);
    let forecasts_raw = invert_forecasts(&forecasts, &fitted.transform);
    let scorer = annotator_scorer(&fitted.annotator, &fitted.feature_transform, fitted.feature_mode);
    let combined = combined_pipeline_eval(
        &val_raw,
        &val_labels,
        &forecasts_raw,
        threshold,
        config.max_horizon,
        scorer,
    )?;

    let mut candidates: Vec<usize> = (0..val.len())
        .filter(|&p| val_t[p].len() > config.max_horizon + 1)
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.sleeves));
    candidates.truncate(config.sleeve_examples);
    candidates.sort_unstable();
    let sleeves = candidates
        .into_iter()
        .map(|p| {
            let n_prior = val_t[p].len() - config.max_horizon;
            SleeveExample {
                patient_id: val[p].patient_id.clone(),
                n_prior,
                observed: val_t[p].clone(),
                forecast: forecasts[p][n_prior - 1].clone(),
            }
        })
        .collect();

    let mut qq = Vec::new();
    let train_t: Vec<Row> = raw_series(train)?
        .iter()
        .flat_map(|s| transform_series(s, &fitted.transform))
        .collect();
    for f in 0..N_FEATURES {
        for (split, rows) in [("train", &train_t), ("validation", &val_t.concat())] {
            let column: Vec<f64> = rows.iter().map(|r| r[f]).collect();
            if column.len() >= 2 {
                qq.extend(thinned_qq(&column).into_iter().map(|(t, s)| (f, split, t, s)));
            }
        }
    }

    Ok(FoldEvaluation {
        annotator,
        annotator_fbeta,
        roc,
        pr,
        shuffled_auroc,
        combined,
        combined_patients: val.iter().map(|p| p.patient_id.clone()).collect(),
        moments,
        correlations,
        sleeves,
        qq,
    })
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub fold: usize,
    pub horizon: Option<usize>,
    pub n_prior: Option<usize>,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "metric,fold,horizon,n_prior,value";

fn opt(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.metric,
            self.fold,
            opt(self.horizon),
            opt(self.n_prior),
            self.value
        )
    }
}

fn push_summary(
    rows: &mut Vec<MetricRow>,
    prefix: &str,
    fold: usize,
    h: Option<usize>,
    n: Option<usize>,
    s: &RocSummary,
) {
    for (name, v) in [
        ("auroc", s.auroc),
        ("auprc", s.auprc),
        ("sensitivity", s.sensitivity),
        ("specificity", s.specificity),
        ("n", s.n as f64),
        ("n_positive", s.n_positive as f64),
    ] {
        rows.push(MetricRow {
            metric: format!("{prefix}.{name}"),
            fold,
            horizon: h,
            n_prior: n,
            value: v,
        });
    }
}

/// Flatten a fold's results. Moment fits carry the lag in the horizon column.
pub fn metric_rows(fold: usize, fitted: &FittedFold, ev: &FoldEvaluation) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let scalar = |rows: &mut Vec<MetricRow>, metric: &str, h: Option<usize>, value: f64| {
        rows.push(MetricRow {
            metric: metric.to_string(),
            fold,
            horizon: h,
            n_prior: None,
            value,
        })
    };
    scalar(&mut rows, "annotator.threshold", None, fitted.calibration.threshold);
    scalar(
        &mut rows,
        "annotator.train_fbeta",
        None,
        fitted.calibration.achieved_fbeta,
    );
    scalar(&mut rows, "annotator.fbeta", None, ev.annotator_fbeta);
    if let Some(s) = &ev.annotator {
        push_summary(&mut rows, "annotator", fold, None, None, s);
    }
    if let Some(a) = ev.shuffled_auroc {
        scalar(&mut rows, "annotator.shuffled_auroc", None, a);
    }
    for (m, s) in ev.combined.grid.horizons.iter().zip(&ev.combined.per_horizon) {
        if let Some(s) = s {
            push_summary(&mut rows, "combined", fold, Some(*m), None, s);
        }
    }
    for (r, n) in ev.combined.grid.n_prior.iter().enumerate() {
        for (c, m) in ev.combined.grid.horizons.iter().enumerate() {
            if let Some(s) = &ev.combined.grid.cells[r][c] {
                push_summary(&mut rows, "combined_cell", fold, Some(*m), Some(*n), s);
            }
        }
    }
    for lag in &ev.moments {
        if let Some(f) = &lag.fit {
            scalar(&mut rows, "moments.r_squared", Some(lag.lag), f.r_squared);
            scalar(&mut rows, "moments.slope", Some(lag.lag), f.slope);
            scalar(&mut rows, "moments.intercept", Some(lag.lag), f.intercept);
        }
    }
    for hc in &ev.correlations {
        let h = Some(hc.horizon);
        for f in Feature::ALL {
            let i = f.index();
            for (kind, v) in [
                ("model", hc.model[i]),
                ("model_diff", hc.model_diff[i]),
                ("locf", hc.locf[i]),
            ] {
                if let Some(v) = v {
                    scalar(&mut rows, &format!("forecast_r.{kind}.{}", f.name()), h, v);
                }
            }
        }
        if hc.n > 0 {
            scalar(&mut rows, "forecast.mse", h, hc.mse);
        }
    }
    rows
}

/// Mean, sample sd and 95% t-interval across folds for every
/// `(metric, horizon, n_prior)` key, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub metric: String,
    pub horizon: Option<usize>,
    pub n_prior: Option<usize>,
    pub n_folds: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub const AGGREGATE_HEADER: &str = "metric,horizon,n_prior,n_folds,mean,sd,ci95_lo,ci95_hi";

type MetricKey = (String, Option<usize>, Option<usize>);

pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut index: HashMap<MetricKey, usize> = HashMap::new();
    let mut groups: Vec<(MetricKey, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = (r.metric.clone(), r.horizon, r.n_prior);
        let i = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r.value);
    }
    groups
        .into_iter()
        .map(|((metric, horizon, n_prior), values)| {
            let (mean, sd) = crate::metrics::mean_sd(&values);
            let k = values.len();
            let half = if k >= 2 {
                let t = StudentsT::new(0.0, 1.0, (k - 1) as f64)
                    .map(|d| d.inverse_cdf(0.975))
                    .unwrap_or(f64::NAN);
                t * sd / (k as f64).sqrt()
            } else {
                f64::NAN
            };
            AggregateRow {
                metric,
                horizon,
                n_prior,
                n_folds: k,
                mean,
                sd,
                ci_lo: mean - half,
                ci_hi: mean + half,
            }
        })
        .collect()
}

pub fn render_metrics(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s += &r.csv();
        s.push('\n');
    }
    s
}

fn finite_or_empty(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

fn render_aggregate(rows: &[AggregateRow]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.metric,
            opt(r.horizon),
            opt(r.n_prior),
            r.n_folds,
            finite_or_empty(r.mean),
            finite_or_empty(r.sd),
            finite_or_empty(r.ci_lo),
            finite_or_empty(r.ci_hi)
        );
    }
    s
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what}"),
        };
        let optional = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("index"))
            }
        };
        out.push(MetricRow {
            metric: rec.get(0).ok_or_else(|| bad("metric"))?.to_string(),
            fold: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("fold"))?,
            horizon: optional(rec.get(2).unwrap_or(""))?,
            n_prior: optional(rec.get(3).unwrap_or(""))?,
            value: rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("value"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldStatus {
    Ok,
    Failed { exit_code: i32, message: String },
    NotRun,
}

impl FoldStatus {
    pub fn csv(&self) -> (String, String) {
        match self {
            FoldStatus::Ok => ("ok".into(), String::new()),
            FoldStatus::Failed { exit_code, message } => {
                (format!("failed({exit_code})"), message.replace(['\n', ','], " "))
            }
            FoldStatus::NotRun => ("missing".into(), String::new()),
        }
    }
}

/// Result of [`run_cv`]; artefacts are on disk under `out_dir`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub status: Vec<FoldStatus>,
    pub metrics: Vec<MetricRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl RunSummary {
    /// First failing fold's exit code, or 0.
    pub fn exit_code(&self) -> i32 {
        self.status
            .iter()
            .find_map(|s| match s {
                FoldStatus::Failed { exit_code, .. } => Some(*exit_code),
                _ => None,
            })
            .unwrap_or(0)
    }
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

/// Per-fold CSVs: ROC, PR, moments, combined scores, sleeves and QQ points.
pub fn write_fold_outputs(dir: &Path, ev: &FoldEvaluation) -> Result<()> {
    let mut roc = String::from("threshold,fpr,tpr\n");
    for p in &ev.roc {
        let _ = writeln!(roc, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    write_file(&dir.join("roc.csv"), &roc)?;
    let mut pr = String::from("threshold,recall,precision\n");
    for p in &ev.pr {
        let _ = writeln!(pr, "{},{},{}", p.threshold, p.recall, p.precision);
    }
    write_file(&dir.join("pr.csv"), &pr)?;
    let mut m = String::from("lag,feature_i,feature_j,observed,forecasted\n");
    for lag in &ev.moments {
        for (i, j, x, y) in &lag.points {
            let _ = writeln!(
                m,
                "{},{},{},{x},{y}",
                lag.lag,
                Feature::ALL[*i].name(),
                Feature::ALL[*j].name()
            );
        }
    }
    write_file(&dir.join("moments.csv"), &m)?;
    let mut c = String::from("patient_id,n_prior,horizon,score,label\n");
    for i in &ev.combined.instances {
        let _ = writeln!(
            c,
            "{},{},{},{},{}",
            ev.combined_patients[i.patient], i.n_prior, i.horizon, i.score, i.label as u8
        );
    }
    write_file(&dir.join("combined_scores.csv"), &c)?;
    let mut s = String::from("patient_id,visit,feature,observed,mean,lo95,hi95\n");
    for ex in &ev.sleeves {
        for (t, row) in ex.observed.iter().enumerate() {
            for f in Feature::ALL {
                let i = f.index();
                let (mean, lo, hi) = match t.checked_sub(ex.n_prior) {
                    Some(k) if k < ex.forecast.horizon() => (
                        ex.forecast.mean[k][i].to_string(),
                        ex.forecast.lo95[k][i].to_string(),
                        ex.forecast.hi95[k][i].to_string(),
                    ),
                    _ => Default::default(),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{mean},{lo},{hi}",
                    ex.patient_id,
                    t + 1,
                    f.name(),
                    row[i]
                );
            }
        }
    }
    write_file(&dir.join("sleeves.csv"), &s)?;
    let mut q = String::from("feature,split,theoretical,sample\n");
    for (f, split, t, x) in &ev.qq {
        let _ = writeln!(q, "{},{split},{t},{x}", Feature::ALL[*f].name());
    }
    write_file(&dir.join("qq.csv"), &q)
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STATUS_FILE: &str = "fold_status.csv";

fn run_fold(
    cohort: &Cohort,
    folds: &FoldAssignment,
    fold: usize,
    config: &RunConfig,
    out: &Path,
) -> Result<Vec<MetricRow>> {
    let seeds = FoldSeeds::new(config.seed, fold);
    let (train, val) = folds.partition(cohort, fold);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(format!("fold {fold} has an empty split")));
    }
    let fitted = fit_fold(&train, config, &seeds)?;
    let dir = fold_dir(out, fold);
    fitted.save(&dir)?;
    let ev = evaluate_fold(&fitted, &train, &val, config, &seeds)?;
    write_fold_outputs(&dir, &ev)?;
    Ok(metric_rows(fold, &fitted, &ev))
}

/// Run the cross-validation for `only` (all folds when `None`) and write the
/// bundle to `out`. A failing fold is recorded and the others proceed.
pub fn run_cv(config: &RunConfig, out: impl AsRef<Path>, only: Option<&[usize]>) -> Result<RunSummary> {
    let start = Instant::now();
    config.validate()?;
    let out = out.as_ref().to_path_buf();
    create_dir(&out)?;
    let (cohort, excluded) = config.load_cohort()?;
    cohort.validate()?;
    let folds = config.split(&cohort)?;
    write_cohort(&cohort, out.join("cohort.csv"))?;
    write_exclusions(&excluded, out.join("exclusions.csv"))?;
    folds.write(out.join("folds.csv"))?;

    let selected: Vec<usize> = match only {
        Some(f) => {
            if let Some(bad) = f.iter().find(|&&i| i >= config.folds) {
                return Err(Error::Config(format!("fold {bad} out of range 0..{}", config.folds)));
            }
            f.to_vec()
        }
        None => (0..config.folds).collect(),
    };
    let mut status = vec![FoldStatus::NotRun; config.folds];
    let mut metrics = Vec::new();
    for &fold in &selected {
        match run_fold(&cohort, &folds, fold, config, &out) {
            Ok(rows) => {
                metrics.extend(rows);
                status[fold] = FoldStatus::Ok;
            }
            Err(e) => {
                status[fold] = FoldStatus::Failed {
                    exit_code: e.exit_code(),
                    message: e.to_string(),
                }
            }
        }
    }
    metrics.sort_by_key(|r| r.fold);
    let agg = aggregate(&metrics);
    write_file(&out.join("metrics.csv"), &render_metrics(&metrics))?;
    write_file(&out.join("aggregate.csv"), &render_aggregate(&agg))?;
    let mut st = String::from("fold,status,message\n");
    for (i, s) in status.iter().enumerate() {
        let (a, b) = s.csv();
        let _ = writeln!(st, "{i},{a},{b}");
    }
    write_file(&out.join(STATUS_FILE), &st)?;

    let mut manifest = KeyValues::default();
    manifest.insert("package", env!("CARGO_PKG_NAME"));
    manifest.insert("version", env!("CARGO_PKG_VERSION"));
    manifest.insert("f32_sampling", cfg!(feature = "f32-sampling"));
    manifest.insert("patients", cohort.len());
    manifest.insert("visits", cohort.n_visits());
    manifest.insert("prevalence", cohort.prevalence());
    manifest.insert("fold_file", "folds.csv");
    for (k, v) in config.to_key_values().iter() {
        manifest.insert(format!("config.{k}"), v);
    }
    manifest.insert("seed.global", config.seed);
    if let CohortSource::Synthetic(s) = &config.source {
        manifest.insert("seed.synth", s.seed);
    }
    manifest.insert("seed.split", derive_seed(config.seed, "split", 0));
    for fold in 0..config.folds {
        manifest.insert(format!("fold{fold}.patients"), folds.members(fold).len());
        for (name, v) in FoldSeeds::new(config.seed, fold).entries() {
            manifest.insert(format!("seed.fold{fold}.{name}"), v);
        }
    }
    manifest.insert("wall_time_seconds", format!("{:.1}", start.elapsed().as_secs_f64()));
    write_file(&out.join(MANIFEST_FILE), &manifest.render())?;

    crate::report::emit_report(&out)?;
    Ok(RunSummary {
        out_dir: out,
        status,
        metrics,
        aggregate: agg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(n_patients: usize) -> RunConfig {
        let forecaster = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let annotator = AnnotatorTrainConfig {
            epochs: 2,
            ..AnnotatorTrainConfig::default()
        };
        RunConfig {
            source: CohortSource::Synthetic(SynthConfig {
                n_patients,
                visit_count_mean: 8.0,
                visit_count_sd: 2.0,
                ..SynthConfig::default()
            }),
            folds: 3,
            forecaster,
            annotator,
            gibbs: GibbsChainConfig {
                n_samples: 8,
                steps: 4,
                ..GibbsChainConfig::default()
            },
            max_horizon: 2,
            max_lag: 2,
            sleeve_examples: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = tiny_config(30);
        let again = RunConfig::from_key_values(&cfg.to_key_values()).unwrap();
        assert_eq!(again, cfg);
        let file = RunConfig::from_key_values(&KeyValues::parse("cohort = x.csv\nfolds = 4\n").unwrap()).unwrap();
        assert_eq!(file.source, CohortSource::File("x.csv".into()));
        assert!(RunConfig::from_key_values(&KeyValues::parse("folds = 1").unwrap()).is_err());
        assert!(RunConfig::from_key_values(&KeyValues::parse("gibbs.init = nowhere").unwrap()).is_err());
    }

    #[test]
    fn aggregate_is_mean_and_sd_of_rows() {
        let rows: Vec<MetricRow> = [0.5, 0.7, 0.9]
            .iter()
            .enumerate()
            .map(|(f, &v)| MetricRow {
                metric: "a".into(),
                fold: f,
                horizon: Some(1),
                n_prior: None,
                value: v,
            })
            .collect();
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean - 0.7).abs() < 1e-15);
        assert!((agg[0].sd - 0.2).abs() < 1e-15);
        // t(0.975, 2) = 4.302653
        assert!((agg[0].ci_lo - (0.7 - 4.302652729749464 * 0.2 / 3f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn run_cv_writes_a_complete_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(36);
        let summary = run_cv(&cfg, dir.path(), Some(&[1])).unwrap();
        assert_eq!(summary.status[1], FoldStatus::Ok);
        assert_eq!(summary.status[0], FoldStatus::NotRun);
        for f in [
            "metrics.csv",
            "aggregate.csv",
            STATUS_FILE,
            MANIFEST_FILE,
            "folds.csv",
            "cohort.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let fd = fold_dir(dir.path(), 1);
        for f in [
            "forecaster.bin",
            "annotator.manifest.csv",
            TRANSFORM_FILE,
            CALIBRATION_FILE,
            "sleeves.csv",
        ] {
            assert!(fd.join(f).exists(), "{f}");
        }
        let reloaded = read_metrics(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(reloaded, summary.metrics);
        let loaded = FittedFold::load(&fd).unwrap();
        assert_eq!(loaded.feature_mode, cfg.feature_mode);
        let status = std::fs::read_to_string(dir.path().join(STATUS_FILE)).unwrap();
        assert!(status.contains("0,missing") && status.contains("1,ok"));
    }
}
