//! Within-patient imputation and per-feature Yeo–Johnson power transform.

use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::{Cohort, Feature, PatientRecord, N_FEATURES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Last observation carried forward; leading gaps take the earliest
/// available measurement. Returns `None` if nothing was ever observed.
pub fn locf_series(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let first = values.iter().flatten().next().copied()?;
    let mut last = first;
    Some(
        values
            .iter()
            .map(|v| {
                if let Some(x) = v {
                    last = *x;
                }
                last
            })
            .collect(),
    )
}

pub fn impute_locf(record: &PatientRecord) -> Result<PatientRecord> {
    let mut out = record.clone();
    for f in Feature::ALL {
        let column: Vec<Option<f64>> = record.visits.iter().map(|v| v.labs.get(f)).collect();
        let filled = locf_series(&column).ok_or_else(|| {
            Error::Validation(format!(
                "patient {}: feature {} never measured",
                record.patient_id,
                f.name()
            ))
        })?;
        for (v, x) in out.visits.iter_mut().zip(filled) {
            v.labs.set(f, Some(x));
        }
    }
    Ok(out)
}

/// Imputed raw lab series of one patient.
pub fn imputed_series(record: &PatientRecord) -> Result<Vec<[f64; N_FEATURES]>> {
    impute_locf(record)?.dense_labs()
}

/// Fit the lab transform on every imputed visit of `cohort`.
pub fn fit_cohort_transform(cohort: &Cohort) -> Result<TransformParams<f64>> {
    fit_lab_transform(cohort.patients.iter())
}

pub fn fit_lab_transform<'a>(records: impl IntoIterator<Item = &'a PatientRecord>) -> Result<TransformParams<f64>> {
    let mut rows = Vec::new();
    for p in records {
        rows.extend(imputed_series(p)?);
    }
    let names: Vec<&str> = Feature::ALL.iter().map(|f| f.name()).collect();
    fit_power_transform(&rows, &names)
}

pub fn transform_series(series: &[[f64; N_FEATURES]], params: &TransformParams<f64>) -> Vec<[f64; N_FEATURES]> {
    series
        .iter()
        .map(|row| {
            let mut out = [0.0; N_FEATURES];
            for (o, (f, &x)) in out.iter_mut().zip(params.features.iter().zip(row)) {
                *o = f.forward(x);
            }
            out
        })
        .collect()
}

/// Yeo–Johnson transform of one value.
pub fn yeo_johnson<S: Scalar>(x: S, lambda: S) -> S {
    let two = S::of(2.0);
    if x >= S::zero() {
        if lambda == S::zero() {
            x.ln_1p()
        } else {
            (lambda * x.ln_1p()).exp_m1() / lambda
        }
    } else if lambda == two {
        -(-x).ln_1p()
    } else {
        let p = two - lambda;
        -(p * (-x).ln_1p()).exp_m1() / p
    }
}

/// Inverse of [`yeo_johnson`]. Values outside the image of the forward map
/// are clamped to its boundary.
pub fn yeo_johnson_inverse<S: Scalar>(y: S, lambda: S) -> S {
    let two = S::of(2.0);
    let tiny = S::min_positive_value();
    let x = if y >= S::zero() {
        if lambda == S::zero() {
            y.exp_m1()
        } else {
            let base = (lambda * y).max(-S::one() + tiny);
            (base.ln_1p() / lambda).exp_m1()
        }
    } else if lambda == two {
        -(-y).exp_m1()
    } else {
        let p = two - lambda;
        let base = (-p * y).max(-S::one() + tiny);
        -(base.ln_1p() / p).exp_m1()
    };
    if x.is_finite() {
        x
    } else {
        S::max_value().copysign(x)
    }
}

fn mean_var<S: Scalar>(values: &[S]) -> (S, S) {
    let n = S::of(values.len() as f64);
    let mean = values.iter().copied().sum::<S>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, var)
}

/// Profile log-likelihood of the Yeo–Johnson exponent under a Gaussian model.
pub fn yeo_johnson_log_likelihood<S: Scalar>(column: &[S], lambda: S) -> S {
    let transformed: Vec<S> = column.iter().map(|&x| yeo_johnson(x, lambda)).collect();
    let (_, var) = mean_var(&transformed);
    let n = S::of(column.len() as f64);
    let jacobian: S = column.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    -n / S::of(2.0) * var.ln() + (lambda - S::one()) * jacobian
}

pub const LAMBDA_BOUNDS: (f64, f64) = (-5.0, 5.0);
pub const LAMBDA_TOLERANCE: f64 = 1e-6;

/// Golden-section maximisation of a unimodal function on `[lo, hi]`.
fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        // NaN likelihoods (overflow at extreme exponents) lose every comparison
        if fc > fd || fd.is_nan() {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Maximum-likelihood Yeo–Johnson exponent of one column.
pub fn fit_lambda(column: &[f64]) -> f64 {
    golden_section_max(
        |l| yeo_johnson_log_likelihood(column, l),
        LAMBDA_BOUNDS.0,
        LAMBDA_BOUNDS.1,
        LAMBDA_TOLERANCE,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTransform<S> {
    pub name: String,
    pub lambda: S,
    /// Mean and standard deviation of the power-transformed training column.
    pub mean: S,
    pub sd: S,
}

impl<S: Scalar> FeatureTransform<S> {
    pub fn forward(&self, x: S) -> S {
        (yeo_johnson(x, self.lambda) - self.mean) / self.sd
    }

    pub fn inverse(&self, z: S) -> S {
        yeo_johnson_inverse(z * self.sd + self.mean, self.lambda)
    }
}

/// Fitted per-feature transform: Yeo–Johnson followed by standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams<S> {
    pub features: Vec<FeatureTransform<S>>,
}

pub fn fit_power_transform<R: AsRef<[f64]>>(rows: &[R], names: &[&str]) -> Result<TransformParams<f64>> {
    const MIN_ROWS: usize = 10;
    if rows.len() < MIN_ROWS {
        return Err(Error::Degenerate(format!(
            "power transform needs at least {MIN_ROWS} rows, got {}",
            rows.len()
        )));
    }
    let mut features = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let column = rows
            .iter()
            .map(|r| {
                r.as_ref().get(j).copied().ok_or(Error::Dimension {
                    expected: names.len(),
                    got: r.as_ref().len(),
                    context: "power transform row",
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if column.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("feature {name} has non-finite values")));
        }
        let (_, raw_var) = mean_var(&column);
        if !(raw_var > 0.0) {
            return Err(Error::Degenerate(format!("feature {name} has zero variance")));
        }
        let lambda = fit_lambda(&column);
        let transformed: Vec<f64> = column.iter().map(|&x| yeo_johnson(x, lambda)).collect();
        let (mean, var) = mean_var(&transformed);
        let sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::Degenerate(format!(
                "feature {name} collapses under the power transform"
            )));
        }
        features.push(FeatureTransform {
            name: name.to_string(),
            lambda,
            mean,
            sd,
        });
    }
    Ok(TransformParams { features })
}

impl<S: Scalar> TransformParams<S> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn apply(&self, panel: &[S]) -> Vec<S> {
        debug_assert_eq!(panel.len(), self.features.len());
        self.features.iter().zip(panel).map(|(f, &x)| f.forward(x)).collect()
    }

    pub fn invert(&self, transformed: &[S]) -> Vec<S> {
        debug_assert_eq!(transformed.len(), self.features.len());
        self.features
            .iter()
            .zip(transformed)
            .map(|(f, &z)| f.inverse(z))
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> TransformParams<T> {
        TransformParams {
            features: self
                .features
                .iter()
                .map(|f| FeatureTransform {
                    name: f.name.clone(),
                    lambda: T::of(f.lambda.as_f64()),
                    mean: T::of(f.mean.as_f64()),
                    sd: T::of(f.sd.as_f64()),
                })
                .collect(),
        }
    }
}

impl TransformParams<f64> {
    /// `feature,lambda,mean,sd`, full round-trip precision.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("feature,lambda,mean,sd\n");
        for f in &self.features {
            s += &format!("{},{},{},{}\n", f.name, f.lambda, f.mean, f.sd);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let mut features = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                    line: i + 2,
                    message: format!("column {k} is not a number"),
                })
            };
            let sd = num(3)?;
            if !(sd > 0.0) {
                return Err(Error::Validation(format!("line {}: sd must be positive", i + 2)));
            }
            features.push(FeatureTransform {
                name: rec[0].to_string(),
                lambda: num(1)?,
                mean: num(2)?,
                sd,
            });
        }
        Ok(TransformParams { features })
    }
}

/// Normal QQ points: sample quantiles against standard-normal quantiles at
/// plotting positions `(i - 0.5) / n`.
pub fn qq_points(column: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let normal = Normal::standard();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, x)| (normal.inverse_cdf((i as f64 + 0.5) / n), x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{LabPanel, Visit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn locf_examples() {
        assert_eq!(
            locf_series(&[None, Some(2.0), None, Some(5.0)]).unwrap(),
            vec![2.0, 2.0, 2.0, 5.0]
        );
        assert_eq!(locf_series(&[Some(1.0), None, None, None]).unwrap(), vec![1.0; 4]);
        assert_eq!(locf_series(&[Some(1.0), Some(3.0)]).unwrap(), vec![1.0, 3.0]);
        assert!(locf_series(&[None, None]).is_none());
    }

    #[test]
    fn impute_record_errors_on_unmeasured_feature() {
        let mut labs = LabPanel::complete([1.0; 10]);
        labs.set(Feature::Ldh, None);
        let rec = PatientRecord {
            patient_id: "X".into(),
            visits: vec![Visit {
                visit_index: 0,
                labs,
                pd_label: None,
            }],
        };
        assert!(impute_locf(&rec).is_err());
    }

    #[test]
    fn yeo_johnson_special_cases() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 12.0] {
            // lambda = 1 is the identity
            assert!((yeo_johnson(x, 1.0) - x).abs() < 1e-12);
            for &l in &[-2.0f64, 0.0, 0.5, 1e-9, 2.0, 2.0 + 1e-9, 3.5] {
                let y = yeo_johnson(x, l);
                assert!((yeo_johnson_inverse(y, l) - x).abs() < 1e-9, "x={x} l={l}");
            }
        }
        assert!((yeo_johnson(1.0f64, 0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn yeo_johnson_is_monotone() {
        for &l in &[-4.0, -1.0, 0.0, 0.3, 1.0, 2.0, 4.5] {
            let mut prev = f64::NEG_INFINITY;
            for i in -200..=200 {
                let y = yeo_johnson(i as f64 * 0.05, l);
                assert!(y > prev);
                prev = y;
            }
        }
    }

    #[test]
    fn inverse_clamps_outside_image() {
        // negative lambda bounds the positive branch at -1/lambda
        let x = yeo_johnson_inverse(10.0f64, -1.0);
        assert!(x.is_finite() && x > 1e10);
    }

    fn grid_scan_lambda(column: &[f64]) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=6000 {
            let l = -3.0 + i as f64 * 1e-3;
            let ll = yeo_johnson_log_likelihood(column, l);
            if ll > best.0 {
                best = (ll, l);
            }
        }
        best.1
    }

    fn skewness(v: &[f64]) -> f64 {
        let (m, var) = mean_var(v);
        v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / v.len() as f64 / var.powf(1.5)
    }

    #[test]
    fn standard_normal_column_keeps_lambda_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let col: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lambda = fit_lambda(&col);
        assert!((lambda - grid_scan_lambda(&col)).abs() < 2e-3);
        assert!((lambda - 1.0).abs() < 0.1, "lambda {lambda}");
        let rows: Vec<[f64; 1]> = col.iter().map(|&x| [x]).collect();
        let p = fit_power_transform(&rows, &["x"]).unwrap();
        assert!(p.features[0].mean.abs() < 0.1);
        assert!((p.features[0].sd - 1.0).abs() < 0.1);
    }

    #[test]
    fn log_normal_column_becomes_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col: Vec<f64> = (0..4000)
            .map(|_| {
                (1.0 + 0.8 * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .exp()
            })
            .collect();
        assert!(skewness(&col) > 1.0);
        let lambda = fit_lambda(&col);
        assert!((lambda - grid_scan_lambda(&col)).abs() < 2e-3);
        let rows: Vec<[f64; 1]> = col.iter().map(|&x| [x]).collect();
        let p = fit_power_transform(&rows, &["x"]).unwrap();
        let t: Vec<f64> = col.iter().map(|&x| p.features[0].forward(x)).collect();
        assert!(skewness(&t).abs() < 0.2, "skew {}", skewness(&t));
    }

    #[test]
    fn constant_column_is_rejected() {
        let rows = vec![[1.0, 3.0]; 20];
        match fit_power_transform(&rows, &["a", "b"]) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains('a')),
            other => panic!("{other:?}"),
        }
        assert!(fit_power_transform(&[[1.0], [2.0]], &["a"]).is_err());
    }

    #[test]
    fn training_mean_maps_to_zero() {
        let rows: Vec<[f64; 1]> = (1..50).map(|i| [i as f64]).collect();
        let p = fit_power_transform(&rows, &["x"]).unwrap();
        let f = &p.features[0];
        let x_at_mean = yeo_johnson_inverse(f.mean, f.lambda);
        assert!(p.apply(&[x_at_mean])[0].abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows: Vec<[f64; 2]> = (1..40).map(|i| [i as f64 * 0.37, (i as f64).sqrt()]).collect();
        let p = fit_power_transform(&rows, &["a", "b"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        p.write_csv(&path).unwrap();
        assert_eq!(TransformParams::read_csv(&path).unwrap(), p);
    }

    #[test]
    fn qq_examples() {
        let pts = qq_points(&[3.0, 1.0, 2.0]);
        assert_eq!(pts[1].1, 2.0);
        assert!(pts[1].0.abs() < 1e-12);
        let two = qq_points(&[1.0, -1.0]);
        assert_eq!(two.len(), 2);
        assert!(two[0].0 < two[1].0 && two[0].1 < two[1].1);
    }

    #[test]
    fn qq_of_normal_sample_hugs_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let col: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pts = qq_points(&col);
        for (t, s) in &pts[50..9950] {
            assert!((t - s).abs() < 0.1, "{t} vs {s}");
        }
    }

    proptest::proptest! {
        #[test]
        fn locf_is_idempotent_and_preserves_observed(
            mask in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 1..30)
        ) {
            if let Some(filled) = locf_series(&mask) {
                for (m, f) in mask.iter().zip(&filled) {
                    if let Some(x) = m {
                        proptest::prop_assert_eq!(x, f);
                    }
                }
                let again = locf_series(&filled.iter().map(|&x| Some(x)).collect::<Vec<_>>()).unwrap();
                proptest::prop_assert_eq!(again, filled);
            }
        }
    }
}
