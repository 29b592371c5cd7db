//! Validation experiments on held-out patients: moment agreement between
//! observed and forecasted series, per-feature forecast correlations against
//! the last-value baseline, and the forecast-then-annotate pipeline scored on
//! a prior-visits × horizon grid.

use crate::annotator::{annotate, derive_features, transform_features, AnnotatorParams, FeatureMode};
use crate::cohort::N_FEATURES;
use crate::crbm::GibbsChainConfig;
use crate::error::{Error, Result};
use crate::forecaster::{forecast_trajectory, ForecastDistribution, ForecasterParams};
use crate::metrics::{linear_fit, pearson_r, HorizonGrid, LinearFit, RocSummary};
use crate::preprocess::TransformParams;
use crate::seeds::derive_seed;
use crate::synth::empirical_moments;

pub type Row = [f64; N_FEATURES];

/// Per-step summaries of one trajectory ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySummary {
    pub mean: Vec<Row>,
    pub lo95: Vec<Row>,
    pub hi95: Vec<Row>,
}

impl TrajectorySummary {
    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    pub fn from_distribution<S: crate::Scalar>(d: &ForecastDistribution<S>) -> Self {
        let rows = |m: &Vec<Vec<S>>| -> Vec<Row> { m.iter().map(|r| std::array::from_fn(|f| r[f].as_f64())).collect() };
        TrajectorySummary {
            mean: rows(&d.mean),
            lo95: rows(&d.lo95),
            hi95: rows(&d.hi95),
        }
    }

    /// Deterministic point forecast (no spread).
    pub fn point(mean: Vec<Row>) -> Self {
        TrajectorySummary {
            lo95: mean.clone(),
            hi95: mean.clone(),
            mean,
        }
    }

    pub fn map(&self, f: impl Fn(&Row) -> Row) -> Self {
        TrajectorySummary {
            mean: self.mean.iter().map(&f).collect(),
            lo95: self.lo95.iter().map(&f).collect(),
            hi95: self.hi95.iter().map(&f).collect(),
        }
    }
}

/// `forecasts[p][n - 1]` is the forecast issued after the first `n` visits of
/// patient `p`, covering `min(max_horizon, T - n)` steps.
pub type Forecasts = Vec<Vec<TrajectorySummary>>;

/// Issue a forecast after every prefix `n = 1..T-1` of every series. The
/// callback only ever sees the first `n` visits.
pub fn collect_forecasts<F>(series: &[Vec<Row>], max_horizon: usize, mut forecast: F) -> Result<Forecasts>
where
    F: FnMut(usize, &[Row], usize) -> Result<TrajectorySummary>,
{
    if max_horizon == 0 {
        return Err(Error::Config("max_horizon must be at least 1".into()));
    }
    series
        .iter()
        .enumerate()
        .map(|(p, s)| {
            (1..s.len())
                .map(|n| {
                    let horizon = max_horizon.min(s.len() - n);
                    let out = forecast(p, &s[..n], horizon)?;
                    if out.horizon() != horizon {
                        return Err(Error::Dimension {
                            expected: horizon,
                            got: out.horizon(),
                            context: "forecast horizon",
                        });
                    }
                    Ok(out)
                })
                .collect()
        })
        .collect()
}

/// Gibbs seed for the forecast of patient `p` after `n` visits.
pub fn trajectory_seed(base: u64, patient: usize, n: usize) -> u64 {
    derive_seed(base, "trajectory", ((patient as u64) << 24) | n as u64)
}

/// Trajectory ensembles from a trained forecaster, in transformed space.
pub fn model_forecasts(
    params: &ForecasterParams<f64>,
    series: &[Vec<Row>],
    max_horizon: usize,
    gibbs: &GibbsChainConfig,
) -> Result<Forecasts> {
    #[cfg(feature = "f32-sampling")]
    let sampler = params.cast::<f32>();
    #[cfg(not(feature = "f32-sampling"))]
    let sampler = params.clone();
    collect_forecasts(series, max_horizon, |p, history, horizon| {
        let config = GibbsChainConfig {
            seed: trajectory_seed(gibbs.seed, p, history.len()),
            ..*gibbs
        };
        #[cfg(feature = "f32-sampling")]
        let narrowed: Vec<Vec<f32>> = history.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
        #[cfg(feature = "f32-sampling")]
        let history = &narrowed[..];
        let d = forecast_trajectory(&sampler, history, horizon, &config)?;
        Ok(TrajectorySummary::from_distribution(&d))
    })
}

/// Observed visits `1..T` paired with the one-step-ahead forecasts of the same
/// visits.
pub fn one_step_series(series: &[Vec<Row>], forecasts: &Forecasts) -> (Vec<Vec<Row>>, Vec<Vec<Row>>) {
    series
        .iter()
        .zip(forecasts)
        .map(|(s, f)| (s[1..].to_vec(), f.iter().map(|t| t.mean[0]).collect()))
        .unzip()
}

/// Fit of forecasted against observed correlation coefficients at one lag.
#[derive(Debug, Clone, PartialEq)]
pub struct LagComparison {
    pub lag: usize,
    /// `(i, j, observed, forecasted)`; lag 0 keeps only `i < j`.
    pub points: Vec<(usize, usize, f64, f64)>,
    pub fit: Option<LinearFit>,
}

pub fn moment_comparison(observed: &[Vec<Row>], forecasted: &[Vec<Row>], max_lag: usize) -> Result<Vec<LagComparison>> {
    if observed.len() != forecasted.len() || observed.iter().zip(forecasted).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Validation(
            "observed and forecasted cohorts must cover the same patients and visits".into(),
        ));
    }
    let obs = empirical_moments(observed, max_lag);
    let fc = empirical_moments(forecasted, max_lag);
    Ok((0..=max_lag)
        .map(|lag| {
            let (a, b) = (&obs.lag_corr[&lag], &fc.lag_corr[&lag]);
            let mut points = Vec::new();
            for i in 0..N_FEATURES {
                for j in 0..N_FEATURES {
                    if lag == 0 && j <= i {
                        continue;
                    }
                    if let (Some(x), Some(y)) = (a[i][j], b[i][j]) {
                        points.push((i, j, x, y));
                    }
                }
            }
            let xs: Vec<f64> = points.iter().map(|p| p.2).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.3).collect();
            let fit = if points.len() >= 3 {
                linear_fit(&xs, &ys).ok()
            } else {
                None
            };
            LagComparison { lag, points, fit }
        })
        .collect())
}

/// Per-feature Pearson correlations at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonCorrelations {
    pub horizon: usize,
    pub n: usize,
    /// Forecast mean against the observed value.
    pub model: [Option<f64>; N_FEATURES],
    /// Same, after subtracting the last observed value from both.
    pub model_diff: [Option<f64>; N_FEATURES],
    /// Last observed value carried forward.
    pub locf: [Option<f64>; N_FEATURES],
    /// Mean squared error of the forecast mean, averaged over features.
    pub mse: f64,
}

fn corr_or_none(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 3 {
        return None;
    }
    pearson_r(x, y).ok()
}

pub fn feature_correlations(
    series: &[Vec<Row>],
    forecasts: &Forecasts,
    max_horizon: usize,
) -> Vec<HorizonCorrelations> {
    (1..=max_horizon)
        .map(|m| {
            let (mut last, mut pred, mut truth) = (Vec::new(), Vec::new(), Vec::new());
            for (s, fs) in series.iter().zip(forecasts) {
                for (k, f) in fs.iter().enumerate() {
                    let n = k + 1;
                    if f.horizon() >= m {
                        last.push(s[n - 1]);
                        pred.push(f.mean[m - 1]);
                        truth.push(s[n + m - 1]);
                    }
                }
            }
            let col = |rows: &[Row], f: usize| rows.iter().map(|r| r[f]).collect::<Vec<_>>();
            let mut out = HorizonCorrelations {
                horizon: m,
                n: truth.len(),
                model: [None; N_FEATURES],
                model_diff: [None; N_FEATURES],
                locf: [None; N_FEATURES],
                mse: f64::NAN,
            };
            let mut sq = 0.0;
            for f in 0..N_FEATURES {
                let (l, p, t) = (col(&last, f), col(&pred, f), col(&truth, f));
                out.model[f] = corr_or_none(&p, &t);
                out.locf[f] = corr_or_none(&l, &t);
                let dp: Vec<f64> = p.iter().zip(&l).map(|(a, b)| a - b).collect();
                let dt: Vec<f64> = t.iter().zip(&l).map(|(a, b)| a - b).collect();
                out.model_diff[f] = corr_or_none(&dp, &dt);
                sq += p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            if !truth.is_empty() {
                out.mse = sq / (truth.len() * N_FEATURES) as f64;
            }
            out
        })
        .collect()
}

/// One scored forecast: PD probability at forecasted visit `n_prior + horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedInstance {
    pub patient: usize,
    pub n_prior: usize,
    pub horizon: usize,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedEval {
    pub instances: Vec<CombinedInstance>,
    pub grid: HorizonGrid,
    /// Instances pooled over all prior-visit counts, per horizon `1..=max`.
    pub per_horizon: Vec<Option<RocSummary>>,
}

fn summarize(instances: &[&CombinedInstance], threshold: f64) -> Option<RocSummary> {
    let scores: Vec<f64> = instances.iter().map(|i| i.score).collect();
    let labels: Vec<bool> = instances.iter().map(|i| i.label).collect();
    RocSummary::compute(&scores, &labels, threshold).ok()
}

/// Forecast-then-annotate evaluation. For every patient and prior count `n`,
/// the scorer receives the observed raw visits `1..n` followed by the raw
/// forecast means, and the PD probability at visit `n + m` is compared with
/// the recorded label there. Cells lacking either class are left empty.
pub fn combined_pipeline_eval<F>(
    raw: &[Vec<Row>],
    labels: &[Vec<bool>],
    forecasts_raw: &Forecasts,
    threshold: f64,
    max_horizon: usize,
    mut score: F,
) -> Result<CombinedEval>
where
    F: FnMut(&[Row]) -> Result<Vec<f64>>,
{
    if raw.len() != labels.len() || raw.len() != forecasts_raw.len() {
        return Err(Error::Validation(
            "series, labels and forecasts differ in patient count".into(),
        ));
    }
    let mut instances = Vec::new();
    for (p, ((s, l), fs)) in raw.iter().zip(labels).zip(forecasts_raw).enumerate() {
        if l.len() != s.len() {
            return Err(Error::Validation(format!(
                "patient {p}: label count differs from visit count"
            )));
        }
        for (k, f) in fs.iter().enumerate() {
            let n = k + 1;
            let horizon = f.horizon().min(max_horizon);
            if horizon == 0 {
                continue;
            }
            let mut joined: Vec<Row> = s[..n].to_vec();
            joined.extend_from_slice(&f.mean[..horizon]);
            let probs = score(&joined)?;
            if probs.len() != joined.len() {
                return Err(Error::Dimension {
                    expected: joined.len(),
                    got: probs.len(),
                    context: "scorer output",
                });
            }
            for m in 1..=horizon {
                instances.push(CombinedInstance {
                    patient: p,
                    n_prior: n,
                    horizon: m,
                    score: probs[n + m - 1],
                    label: l[n + m - 1],
                });
            }
        }
    }
    let mut n_prior: Vec<usize> = instances.iter().map(|i| i.n_prior).collect();
    n_prior.sort_unstable();
    n_prior.dedup();
    let horizons: Vec<usize> = (1..=max_horizon).collect();
    let cells = n_prior
        .iter()
        .map(|&n| {
            horizons
                .iter()
                .map(|&m| {
                    let cell: Vec<&CombinedInstance> =
                        instances.iter().filter(|i| i.n_prior == n && i.horizon == m).collect();
                    summarize(&cell, threshold)
                })
                .collect()
        })
        .collect();
    let per_horizon = horizons
        .iter()
        .map(|&m| {
            let pooled: Vec<&CombinedInstance> = instances.iter().filter(|i| i.horizon == m).collect();
            summarize(&pooled, threshold)
        })
        .collect();
    Ok(CombinedEval {
        instances,
        grid: HorizonGrid {
            n_prior,
            horizons,
            cells,
        },
        per_horizon,
    })
}

/// PD probabilities for a raw series through the fitted annotator.
pub fn annotator_scorer<'a>(
    params: &'a AnnotatorParams<f64>,
    feature_transform: &'a TransformParams<f64>,
    mode: FeatureMode,
) -> impl Fn(&[Row]) -> Result<Vec<f64>> + 'a {
    move |raw: &[Row]| {
        let features = transform_features(&derive_features(raw, mode), feature_transform);
        annotate(params, &features)
    }
}

pub fn invert_rows(rows: &[Row], params: &TransformParams<f64>) -> Vec<Row> {
    rows.iter()
        .map(|r| {
            let v = params.invert(r);
            std::array::from_fn(|f| v[f])
        })
        .collect()
}

/// Map transformed-space forecasts back to lab units.
pub fn invert_forecasts(forecasts: &Forecasts, params: &TransformParams<f64>) -> Forecasts {
    let inv = |r: &Row| -> Row {
        let v = params.invert(r);
        std::array::from_fn(|f| v[f])
    };
    forecasts
        .iter()
        .map(|fs| fs.iter().map(|t| t.map(inv)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ForecasterParams;
    use crate::synth::{pd_labels, synthesize_cohort, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synth_series(n: usize, seed: u64) -> (Vec<Vec<Row>>, Vec<Vec<bool>>, f64) {
        let s = synthesize_cohort(&SynthConfig {
            n_patients: n,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let raw = s.cohort.patients.iter().map(|p| p.dense_labs().unwrap()).collect();
        let labels = s.cohort.patients.iter().map(|p| p.labels()).collect();
        (raw, labels, s.threshold)
    }

    fn truth_forecasts(series: &[Vec<Row>], max_horizon: usize) -> Forecasts {
        collect_forecasts(series, max_horizon, |p, h, m| {
            Ok(TrajectorySummary::point(series[p][h.len()..h.len() + m].to_vec()))
        })
        .unwrap()
    }

    #[test]
    fn forecast_coverage_follows_prefix_and_horizon() {
        let series = vec![vec![[0.0; N_FEATURES]; 4], vec![[1.0; N_FEATURES]; 1]];
        let f = truth_forecasts(&series, 2);
        assert_eq!(
            f[0].iter().map(TrajectorySummary::horizon).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        assert!(f[1].is_empty());
    }

    #[test]
    fn identical_moments_fit_exactly() {
        let (raw, _, _) = synth_series(60, 3);
        let cmp = moment_comparison(&raw, &raw, 5).unwrap();
        assert_eq!(cmp.len(), 6);
        for c in &cmp {
            let fit = c.fit.unwrap();
            assert!((fit.slope - 1.0).abs() < 1e-12, "lag {}", c.lag);
            assert!(fit.intercept.abs() < 1e-12);
            assert!((fit.r_squared - 1.0).abs() < 1e-12);
        }
        assert_eq!(cmp[0].points.len(), 45);
        assert_eq!(cmp[1].points.len(), 100);
    }

    #[test]
    fn white_noise_forecasts_carry_no_moment_signal() {
        let (raw, _, _) = synth_series(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<Vec<Row>> = raw
            .iter()
            .map(|s| s.iter().map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect())
            .collect();
        let cmp = moment_comparison(&raw, &noise, 1).unwrap();
        assert!(cmp[0].fit.unwrap().r_squared < 0.2, "{:?}", cmp[0].fit);
        assert!(moment_comparison(&raw, &noise[1..], 1).is_err());
    }

    #[test]
    fn perfect_forecasts_correlate_perfectly() {
        let (raw, _, _) = synth_series(40, 5);
        let f = truth_forecasts(&raw, 3);
        let c = feature_correlations(&raw, &f, 3);
        for h in &c {
            assert!(h.mse.abs() < 1e-20);
            for v in h.model.iter().chain(&h.model_diff) {
                assert!((v.unwrap() - 1.0).abs() < 1e-12);
            }
            assert!(h.locf.iter().all(|r| r.unwrap() < 1.0));
        }
        let (obs, fc) = one_step_series(&raw, &f);
        assert_eq!(obs, fc);
    }

    #[test]
    fn oracle_annotator_on_true_futures_is_perfect() {
        let (raw, labels, threshold) = synth_series(150, 6);
        let f = truth_forecasts(&raw, 5);
        let mpr = crate::cohort::Feature::Mpr.index();
        let oracle = |s: &[Row]| -> Result<Vec<f64>> {
            let m: Vec<f64> = s.iter().map(|r| r[mpr]).collect();
            Ok(pd_labels(&m, threshold).into_iter().map(|b| b as u8 as f64).collect())
        };
        let eval = combined_pipeline_eval(&raw, &labels, &f, 0.5, 5, oracle).unwrap();
        let mut filled = 0;
        for row in &eval.grid.cells {
            for cell in row.iter().flatten() {
                assert_eq!(cell.auroc, 1.0);
                assert_eq!((cell.sensitivity, cell.specificity), (1.0, 1.0));
                filled += 1;
            }
        }
        assert!(filled > 10);
        for s in &eval.per_horizon {
            assert_eq!(s.unwrap().auroc, 1.0);
        }
    }

    #[test]
    fn grid_never_reads_past_the_prior_visits() {
        let (raw, labels, _) = synth_series(20, 7);
        let f = truth_forecasts(&raw, 2);
        let mut seen = Vec::new();
        combined_pipeline_eval(&raw, &labels, &f, 0.5, 2, |s| {
            seen.push(s.to_vec());
            Ok(vec![0.5; s.len()])
        })
        .unwrap();
        // every scored series is a prefix of the patient's own visits
        let mut k = 0;
        for (s, fs) in raw.iter().zip(&f) {
            for (j, t) in fs.iter().enumerate() {
                let n = j + 1;
                assert_eq!(seen[k].len(), n + t.horizon());
                assert_eq!(&seen[k][..], &s[..n + t.horizon()]);
                k += 1;
            }
        }
    }

    #[test]
    fn model_forecasts_ignore_future_visits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ForecasterParams::<f64>::init(&mut rng);
        let mut series: Vec<Vec<Row>> = (0..2)
            .map(|_| {
                (0..5)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let gibbs = GibbsChainConfig {
            n_samples: 8,
            seed: 3,
            ..GibbsChainConfig::default()
        };
        let a = model_forecasts(&params, &series, 2, &gibbs).unwrap();
        series[0][4] = [9.0; N_FEATURES];
        let b = model_forecasts(&params, &series, 2, &gibbs).unwrap();
        assert_eq!(a[0][..3], b[0][..3]);
        assert_eq!(a[1], b[1]);
        assert_eq!(b, model_forecasts(&params, &series, 2, &gibbs).unwrap());
    }
}
