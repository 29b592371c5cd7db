//! Correlation, regression and classification statistics.

use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Mean and sample standard deviation (`n − 1`); `sd` is `NaN` for one value.
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0);
    (m, var.sqrt())
}

fn check_pairs(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
            context: "paired samples",
        });
    }
    if x.len() < min {
        return Err(Error::Degenerate(format!("need at least {min} pairs, got {}", x.len())));
    }
    Ok(())
}

/// Centred sums `(Sxx, Syy, Sxy)`.
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).fold((0.0, 0.0, 0.0), |(sxx, syy, sxy), (&a, &b)| {
        let (dx, dy) = (a - mx, b - my);
        (sxx + dx * dx, syy + dy * dy, sxy + dx * dy)
    })
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y, 3)?;
    let (sxx, syy, sxy) = moments(x, y);
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate("pearson r of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line `y ≈ slope·x + intercept`. A constant `y` gives `R² = 0`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    check_pairs(x, y, 3)?;
    let (sxx, syy, sxy) = moments(x, y);
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("linear fit with constant x".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 {
        (sxy * sxy / (sxx * syy)).min(1.0)
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept: mean(y) - slope * mean(x),
        r_squared,
    })
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_scored(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: labels.len(),
            context: "scores vs labels",
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    Ok(())
}

fn require_both_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "both classes required ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by the midrank (Mann–Whitney) statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scored(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Confusion counts at one threshold; the flag is `score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// Precision with `0/0` taken as 0.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(1 + β²) P R / (β² P + R)`, zero when both are zero.
pub fn fbeta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Distinct scores in descending order with cumulative `(tp, fp)` at `score ≥ threshold`.
fn descending_steps(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0, 0);
    let mut steps: Vec<(f64, usize, usize)> = Vec::new();
    for (n, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(n + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            steps.push((scores[k], tp, fp));
        }
    }
    steps
}

/// Average precision `Σ (R_k − R_{k−1}) P_k` over distinct thresholds, without interpolation.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scored(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Degenerate("average precision needs a positive label".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in descending_steps(scores, labels) {
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn sens_spec(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    check_scored(scores, labels)?;
    require_both_classes(labels)?;
    let c = Confusion::at(scores, labels, threshold);
    Ok((c.recall(), c.specificity()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(0, 0)` through every distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    check_scored(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    pts.extend(
        descending_steps(scores, labels)
            .into_iter()
            .map(|(t, tp, fp)| RocPoint {
                threshold: t,
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
            }),
    );
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_scored(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Degenerate(
            "precision-recall curve needs a positive label".into(),
        ));
    }
    Ok(descending_steps(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| PrPoint {
            threshold: t,
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbetaPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
}

/// `F_β` at every distinct score, thresholds ascending.
pub fn fbeta_curve(scores: &[f64], labels: &[bool], beta: f64) -> Result<Vec<FbetaPoint>> {
    check_scored(scores, labels)?;
    let (pos, _) = class_counts(labels);
    let mut pts: Vec<FbetaPoint> = descending_steps(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = ratio(tp, pos);
            FbetaPoint {
                threshold: t,
                precision,
                recall,
                fbeta: fbeta(precision, recall, beta),
            }
        })
        .collect();
    pts.reverse();
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocSummary {
    pub auroc: f64,
    pub auprc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub n: usize,
    pub n_positive: usize,
}

impl RocSummary {
    pub fn compute(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        let (sensitivity, specificity) = sens_spec(scores, labels, threshold)?;
        Ok(RocSummary {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            sensitivity,
            specificity,
            threshold,
            n: scores.len(),
            n_positive: class_counts(labels).0,
        })
    }
}

/// Summaries indexed by prior-visit count (rows) and horizon (columns).
/// Cells without both classes are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonGrid {
    pub n_prior: Vec<usize>,
    pub horizons: Vec<usize>,
    pub cells: Vec<Vec<Option<RocSummary>>>,
}

impl HorizonGrid {
    pub fn get(&self, n_prior: usize, horizon: usize) -> Option<&RocSummary> {
        let r = self.n_prior.iter().position(|&n| n == n_prior)?;
        let c = self.horizons.iter().position(|&m| m == horizon)?;
        self.cells[r][c].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn pearson_and_fit() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // direct: means 2 and 7/3; cov sum 3, sxx 2, syy 14/3
        let expect = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert!((pearson_r(&x, &[1.0, 2.0, 4.0]).unwrap() - expect).abs() < 1e-14);
        assert!(pearson_r(&x, &[2.0, 2.0, 2.0]).is_err());

        let f = linear_fit(&[0.0, 1.0, 2.0, 5.0], &[1.0, 3.0, 5.0, 11.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        assert!((f.r_squared - 1.0).abs() < 1e-14);
        let c = linear_fit(&[0.0, 1.0, 2.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!((c.slope, c.r_squared), (0.0, 0.0));
        assert!(linear_fit(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auprc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auprc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        let mut s = vec![0.0; 10];
        let mut one = vec![false; 10];
        s[3] = 1.0;
        one[3] = true;
        assert_eq!(auprc(&s, &one).unwrap(), 1.0);
        assert!(auprc(&[0.3], &[false]).is_err());
    }

    #[test]
    fn random_ranking_ap_is_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.1).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let prev = labels.iter().filter(|&&l| l).count() as f64 / n as f64;
        assert!((auprc(&scores, &labels).unwrap() - prev).abs() < 0.02);
    }

    #[test]
    fn sensitivity_specificity_cases() {
        let mut scores = vec![0.9; 9];
        scores.push(0.1); // FN
        scores.extend(vec![0.1; 6]); // TN
        scores.extend(vec![0.9; 4]); // FP
        let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let (se, sp) = sens_spec(&scores, &labels, 0.5).unwrap();
        assert!((se - 0.9).abs() < 1e-15 && (sp - 0.6).abs() < 1e-15);
        assert_eq!(sens_spec(&scores, &labels, 0.0).unwrap().0, 1.0);
        assert_eq!(sens_spec(&scores, &labels, 2.0).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn fbeta_identity_and_zero() {
        for beta in 1..=5 {
            for p in [0.1, 0.37, 1.0] {
                assert!((fbeta(p, p, beta as f64) - p).abs() < 1e-15);
            }
        }
        assert_eq!(fbeta(0.0, 0.0, 5.0), 0.0);
    }

    #[test]
    fn curves_end_at_full_recall() {
        let s = [0.9, 0.8, 0.8, 0.3, 0.1];
        let l = [true, false, true, false, true];
        let roc = roc_curve(&s, &l).unwrap();
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc.last().unwrap().fpr, roc.last().unwrap().tpr), (1.0, 1.0));
        let pr = pr_curve(&s, &l).unwrap();
        assert_eq!(pr.len(), 4);
        assert_eq!(pr.last().unwrap().recall, 1.0);
        let fb = fbeta_curve(&s, &l, 1.0).unwrap();
        assert_eq!(fb[0].threshold, 0.1);
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_counting(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..20)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let mono: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            prop_assert!((auroc(&mono, &labels).unwrap() - a).abs() < 1e-12);
            let all_distinct = {
                let mut v = scores.clone();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| w[0] != w[1])
            };
            if all_distinct {
                prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
