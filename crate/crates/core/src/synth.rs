//! Synthetic cohorts with known cross- and lag-correlation structure.
//!
//! Every patient follows a stationary VAR(1) process in a latent space,
//! `z_t = a z_{t-1} + sqrt(1 - a²) L ε_t` with `L Lᵀ` the target correlation,
//! observed with additive Gaussian measurement noise `y_t = z_t + s η_t`.
//! Labs are `center · exp(spread · y)`. A visit is a progression event when
//! the latent M-protein coordinate has risen by at least a threshold above
//! its running minimum.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cohort::{Cohort, Feature, LabPanel, PatientRecord, Provenance, Visit, N_FEATURES};
use crate::config::{parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

pub type CorrMatrix = [[f64; N_FEATURES]; N_FEATURES];

/// Typical raw magnitude of each lab, in the units listed on [`Feature`].
pub const LAB_CENTER: [f64; N_FEATURES] = [12.0, 9.5, 1.0, 200.0, 3.8, 3.5, 1.5, 40.0, 20.0, 6.0];
/// Log-scale spread of each lab around its center.
pub const LAB_SPREAD: [f64; N_FEATURES] = [0.12, 0.06, 0.3, 0.3, 0.12, 0.5, 0.8, 1.0, 1.0, 0.3];

/// A clinically flavoured correlation structure: renal markers move together,
/// albumin and haemoglobin fall as M-protein rises.
pub fn default_cross_corr() -> CorrMatrix {
    use Feature::*;
    let pairs: [(Feature, Feature, f64); 20] = [
        (Hb, Alb, 0.35),
        (Hb, Cr, -0.25),
        (Hb, Mpr, -0.3),
        (Hb, B2m, -0.3),
        (Hb, Wbc, 0.2),
        (Ca, Alb, 0.3),
        (Ca, Cr, 0.15),
        (Ca, B2m, 0.15),
        (Cr, B2m, 0.6),
        (Cr, Ldh, 0.1),
        (Ldh, B2m, 0.25),
        (Ldh, Wbc, 0.15),
        (Alb, Mpr, -0.35),
        (Alb, B2m, -0.25),
        (B2m, Mpr, 0.2),
        (B2m, SflKappa, 0.2),
        (B2m, SflLambda, 0.2),
        (Mpr, SflKappa, 0.35),
        (Mpr, SflLambda, 0.25),
        (SflKappa, SflLambda, 0.1),
    ];
    let mut c = [[0.0; N_FEATURES]; N_FEATURES];
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (a, b, r) in pairs {
        c[a.index()][b.index()] = r;
        c[b.index()][a.index()] = r;
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub visit_count_mean: f64,
    pub visit_count_sd: f64,
    pub ar_coefficient: f64,
    pub cross_corr_target: CorrMatrix,
    /// Measurement-noise standard deviation in latent units.
    pub noise_scale: f64,
    /// Used as-is when `target_prevalence` is `None`.
    pub pd_rule_threshold: f64,
    pub target_prevalence: Option<f64>,
    /// Probability that any single lab value is blanked out.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 875,
            visit_count_mean: 19.0,
            visit_count_sd: 9.0,
            ar_coefficient: 0.85,
            cross_corr_target: default_cross_corr(),
            noise_scale: 0.5,
            pd_rule_threshold: 1.0,
            target_prevalence: Some(0.07),
            missing_rate: 0.0,
            seed: 42,
        }
    }
}

const MIN_VISITS: usize = 2;
const MAX_VISITS: usize = 64;
const PREVALENCE_TOLERANCE: f64 = 0.01;

impl SynthConfig {
    /// Read from a flat key=value file; missing keys keep their defaults.
    /// `cross_corr` is 100 comma-separated values in row-major order.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = SynthConfig::default();
        let cross_corr_target = match kv.get_str("cross_corr") {
            None => d.cross_corr_target,
            Some(s) => {
                let v: Vec<f64> = parse_list(s, "cross_corr")?;
                if v.len() != N_FEATURES * N_FEATURES {
                    return Err(Error::Config(format!(
                        "cross_corr needs {} values, got {}",
                        N_FEATURES * N_FEATURES,
                        v.len()
                    )));
                }
                let mut m = [[0.0; N_FEATURES]; N_FEATURES];
                for (i, row) in m.iter_mut().enumerate() {
                    row.copy_from_slice(&v[i * N_FEATURES..(i + 1) * N_FEATURES]);
                }
                m
            }
        };
        let target_prevalence = match kv.get_str("target_prevalence") {
            Some("none") | Some("") => None,
            Some(_) => kv.get("target_prevalence")?,
            None => d.target_prevalence,
        };
        let cfg = SynthConfig {
            n_patients: kv.get_or("n_patients", d.n_patients)?,
            visit_count_mean: kv.get_or("visit_count_mean", d.visit_count_mean)?,
            visit_count_sd: kv.get_or("visit_count_sd", d.visit_count_sd)?,
            ar_coefficient: kv.get_or("ar_coefficient", d.ar_coefficient)?,
            cross_corr_target,
            noise_scale: kv.get_or("noise_scale", d.noise_scale)?,
            pd_rule_threshold: kv.get_or("pd_rule_threshold", d.pd_rule_threshold)?,
            target_prevalence,
            missing_rate: kv.get_or("missing_rate", d.missing_rate)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("n_patients", self.n_patients);
        kv.insert("visit_count_mean", self.visit_count_mean);
        kv.insert("visit_count_sd", self.visit_count_sd);
        kv.insert("ar_coefficient", self.ar_coefficient);
        let flat: Vec<String> = self.cross_corr_target.iter().flatten().map(|x| x.to_string()).collect();
        kv.insert("cross_corr", flat.join(","));
        kv.insert("noise_scale", self.noise_scale);
        kv.insert("pd_rule_threshold", self.pd_rule_threshold);
        kv.insert(
            "target_prevalence",
            self.target_prevalence.map_or("none".to_string(), |p| p.to_string()),
        );
        kv.insert("missing_rate", self.missing_rate);
        kv.insert("seed", self.seed);
        kv
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        if !(self.ar_coefficient > 0.0 && self.ar_coefficient < 1.0) {
            return Err(Error::Config(format!(
                "ar_coefficient must lie in (0, 1), got {}",
                self.ar_coefficient
            )));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        if !(self.visit_count_mean >= MIN_VISITS as f64) || self.visit_count_sd < 0.0 {
            return Err(Error::Config("visit count mean must be >= 2 and sd >= 0".into()));
        }
        if let Some(p) = self.target_prevalence {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("target_prevalence must lie in (0, 1), got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Lower-triangular `L` with `L Lᵀ = corr`. Fails unless `corr` is a symmetric
/// positive semi-definite matrix with unit diagonal.
pub fn correlation_factor(corr: &CorrMatrix) -> Result<DMatrix<f64>> {
    let m = DMatrix::from_fn(N_FEATURES, N_FEATURES, |i, j| corr[i][j]);
    for i in 0..N_FEATURES {
        if (m[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("correlation diagonal entry {i} is not 1")));
        }
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                return Err(Error::Config(format!("correlation matrix not symmetric at ({i},{j})")));
            }
        }
    }
    let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min_eig < -1e-10 {
        return Err(Error::Config(format!(
            "correlation matrix is not positive semi-definite (smallest eigenvalue {min_eig:.3e})"
        )));
    }
    // singular PSD matrices need a touch of jitter for Cholesky
    let mut jitter = 0.0;
    loop {
        let shifted = &m + DMatrix::identity(N_FEATURES, N_FEATURES) * jitter;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.l());
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > 1e-6 {
            return Err(Error::Numerical("Cholesky factorisation failed".into()));
        }
    }
}

/// Observed latent trajectory (`y`, visits × features) of one patient.
fn simulate_latent(cfg: &SynthConfig, factor: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<[f64; N_FEATURES]> {
    let count = Normal::new(cfg.visit_count_mean, cfg.visit_count_sd.max(1e-12))
        .expect("valid normal")
        .sample(rng)
        .round()
        .clamp(MIN_VISITS as f64, MAX_VISITS as f64) as usize;
    let a = cfg.ar_coefficient;
    let innovation_scale = (1.0 - a * a).sqrt();
    let correlated = |rng: &mut ChaCha8Rng| {
        let eps: [f64; N_FEATURES] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let mut out = [0.0; N_FEATURES];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, e) in eps.iter().enumerate().take(i + 1) {
                *o += factor[(i, j)] * e;
            }
        }
        out
    };
    let mut z = correlated(rng);
    let mut ys = Vec::with_capacity(count);
    for t in 0..count {
        if t > 0 {
            let e = correlated(rng);
            for i in 0..N_FEATURES {
                z[i] = a * z[i] + innovation_scale * e[i];
            }
        }
        let mut y = z;
        for yi in y.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *yi += cfg.noise_scale * noise;
        }
        ys.push(y);
    }
    ys
}

/// Rise of the M-protein coordinate above its running minimum, per visit.
pub fn mpr_rise(latent_mpr: &[f64]) -> Vec<f64> {
    let mut running_min = f64::INFINITY;
    latent_mpr
        .iter()
        .map(|&y| {
            running_min = running_min.min(y);
            y - running_min
        })
        .collect()
}

/// Latent M-protein coordinate recovered from a raw lab value.
pub fn latent_mpr(raw_mpr: f64) -> f64 {
    let i = Feature::Mpr.index();
    (raw_mpr.max(f64::MIN_POSITIVE) / LAB_CENTER[i]).ln() / LAB_SPREAD[i]
}

/// Progression labels from the deterministic M-protein rise rule.
pub fn pd_labels(raw_mpr: &[f64], threshold: f64) -> Vec<bool> {
    let latent: Vec<f64> = raw_mpr.iter().map(|&x| latent_mpr(x)).collect();
    mpr_rise(&latent).into_iter().map(|r| r >= threshold).collect()
}

/// Re-derive every label of a complete cohort with the rise rule.
pub fn relabel(cohort: &Cohort, threshold: f64) -> Result<Cohort> {
    let mut out = cohort.clone();
    for p in &mut out.patients {
        let mpr = p
            .visits
            .iter()
            .map(|v| v.labs.get(Feature::Mpr))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Validation(format!("patient {} has missing M-protein", p.patient_id)))?;
        for (v, l) in p.visits.iter_mut().zip(pd_labels(&mpr, threshold)) {
            v.pd_label = Some(l);
        }
    }
    Ok(out)
}

/// A generated cohort together with the threshold that produced its labels.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub threshold: f64,
    pub prevalence: f64,
}

fn prevalence_at(rises: &[Vec<f64>], threshold: f64, total: usize) -> f64 {
    let pos: usize = rises
        .iter()
        .map(|r| r.iter().filter(|&&x| x >= threshold).count())
        .sum();
    pos as f64 / total as f64
}

/// Bisection on the rule threshold until the realised prevalence is within
/// one percentage point of `target`.
fn tune_threshold(rises: &[Vec<f64>], target: f64) -> Result<(f64, f64)> {
    let total: usize = rises.iter().map(Vec::len).sum();
    let max_rise = rises.iter().flatten().copied().fold(0.0, f64::max);
    let min_positive = rises
        .iter()
        .flatten()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !min_positive.is_finite() {
        return Err(Error::Config(
            "no visit ever rises above its running minimum; prevalence is unattainable".into(),
        ));
    }
    let (mut lo, mut hi) = (min_positive, max_rise);
    let reachable = (prevalence_at(rises, hi, total), prevalence_at(rises, lo, total));
    let mut best = (lo, reachable.1);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p = prevalence_at(rises, mid, total);
        if (p - target).abs() < (best.1 - target).abs() {
            best = (mid, p);
        }
        if (p - target).abs() <= 1e-4 || hi - lo < 1e-12 {
            break;
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.1 - target).abs() > PREVALENCE_TOLERANCE {
        return Err(Error::Config(format!(
            "target prevalence {target} unattainable; reachable range is [{:.4}, {:.4}]",
            reachable.0, reachable.1
        )));
    }
    Ok(best)
}

pub fn synthesize_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let factor = correlation_factor(&cfg.cross_corr_target)?;
    let latents: Vec<Vec<[f64; N_FEATURES]>> = (0..cfg.n_patients)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-patient", i as u64));
            simulate_latent(cfg, &factor, &mut rng)
        })
        .collect();
    let raws: Vec<Vec<[f64; N_FEATURES]>> = latents
        .iter()
        .map(|ys| {
            ys.iter()
                .map(|y| std::array::from_fn(|f| LAB_CENTER[f] * (LAB_SPREAD[f] * y[f]).exp()))
                .collect()
        })
        .collect();
    // labels come from the raw values so that relabelling a written cohort is exact
    let mpr = Feature::Mpr.index();
    let rises: Vec<Vec<f64>> = raws
        .iter()
        .map(|rows| mpr_rise(&rows.iter().map(|r| latent_mpr(r[mpr])).collect::<Vec<_>>()))
        .collect();
    let (threshold, prevalence) = match cfg.target_prevalence {
        Some(target) => tune_threshold(&rises, target)?,
        None => {
            let total = rises.iter().map(Vec::len).sum();
            (
                cfg.pd_rule_threshold,
                prevalence_at(&rises, cfg.pd_rule_threshold, total),
            )
        }
    };

    let width = cfg.n_patients.to_string().len().max(4);
    let patients = raws
        .iter()
        .zip(&rises)
        .enumerate()
        .map(|(i, (rows, rise))| {
            let mut visits: Vec<Visit> = rows
                .iter()
                .zip(rise)
                .enumerate()
                .map(|(t, (raw, r))| Visit {
                    visit_index: t as u32,
                    labs: LabPanel::complete(*raw),
                    pd_label: Some(*r >= threshold),
                })
                .collect();
            if cfg.missing_rate > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth-mask", i as u64));
                mask_values(&mut visits, cfg.missing_rate, &mut rng);
            }
            PatientRecord {
                patient_id: format!("SYN{:0width$}", i, width = width),
                visits,
            }
        })
        .collect();
    Ok(SynthCohort {
        cohort: Cohort {
            patients,
            provenance: Provenance::Synthetic,
        },
        threshold,
        prevalence,
    })
}

/// Blank out values at random while keeping every feature measured at least once.
fn mask_values(visits: &mut [Visit], rate: f64, rng: &mut ChaCha8Rng) {
    for f in Feature::ALL {
        let keep = rng.random_range(0..visits.len());
        for (t, v) in visits.iter_mut().enumerate() {
            if t != keep && rng.random::<f64>() < rate {
                v.labs.set(f, None);
            }
        }
    }
}

/// Pearson correlations pooled over patients: lag 0 is the cross-correlation,
/// lag `L` pairs feature `i` at visit `t` with feature `j` at `t + L` of the
/// same patient. Entries with fewer than three pairs or a constant side are
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub lag_corr: BTreeMap<usize, [[Option<f64>; N_FEATURES]; N_FEATURES]>,
}

impl Moments {
    pub fn cross_corr(&self) -> &[[Option<f64>; N_FEATURES]; N_FEATURES] {
        &self.lag_corr[&0]
    }
}

pub fn empirical_moments(series: &[Vec<[f64; N_FEATURES]>], max_lag: usize) -> Moments {
    let lag_corr = (0..=max_lag).map(|lag| (lag, lagged_corr(series, lag))).collect();
    Moments { lag_corr }
}

/// Moments of an imputed cohort.
pub fn cohort_moments(cohort: &Cohort, max_lag: usize) -> Result<Moments> {
    let series = cohort
        .patients
        .iter()
        .map(PatientRecord::dense_labs)
        .collect::<Result<Vec<_>>>()?;
    Ok(empirical_moments(&series, max_lag))
}

fn lagged_corr(series: &[Vec<[f64; N_FEATURES]>], lag: usize) -> [[Option<f64>; N_FEATURES]; N_FEATURES] {
    // shift by the pooled means first to keep the sums well conditioned
    let (mut mean, mut count) = ([0.0; N_FEATURES], 0usize);
    for row in series.iter().flatten() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
        count += 1;
    }
    if count > 0 {
        mean.iter_mut().for_each(|m| *m /= count as f64);
    }
    let mut n = 0usize;
    let (mut sx, mut sy) = ([0.0; N_FEATURES], [0.0; N_FEATURES]);
    let (mut sxx, mut syy) = ([0.0; N_FEATURES], [0.0; N_FEATURES]);
    let mut sxy = [[0.0; N_FEATURES]; N_FEATURES];
    for s in series {
        for t in 0..s.len().saturating_sub(lag) {
            let x: [f64; N_FEATURES] = std::array::from_fn(|i| s[t][i] - mean[i]);
            let y: [f64; N_FEATURES] = std::array::from_fn(|i| s[t + lag][i] - mean[i]);
            n += 1;
            for i in 0..N_FEATURES {
                sx[i] += x[i];
                sy[i] += y[i];
                sxx[i] += x[i] * x[i];
                syy[i] += y[i] * y[i];
                for j in 0..N_FEATURES {
                    sxy[i][j] += x[i] * y[j];
                }
            }
        }
    }
    let mut out = [[None; N_FEATURES]; N_FEATURES];
    if n < 3 {
        return out;
    }
    let nf = n as f64;
    for i in 0..N_FEATURES {
        for j in 0..N_FEATURES {
            let vx = sxx[i] - sx[i] * sx[i] / nf;
            let vy = syy[j] - sy[j] * sy[j] / nf;
            if vx <= 0.0 || vy <= 0.0 {
                continue;
            }
            let c = sxy[i][j] - sx[i] * sy[j] / nf;
            out[i][j] = Some((c / (vx * vy).sqrt()).clamp(-1.0, 1.0));
        }
    }
    out
}
