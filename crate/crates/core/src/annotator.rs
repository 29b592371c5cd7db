//! Progression-event annotator: six light-chain and M-protein features, an
//! LSTM(6→8) encoder and a softmax head over {non-PD, PD}.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{Feature, N_FEATURES};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::forecaster::patient_batches;
use crate::metrics::fbeta_curve;
use crate::nn::{
    adamw_update, dense_tensors, dense_tensors_mut, lstm_tensors, lstm_tensors_mut, softmax_bce, AdamWState, Dense,
    Lstm, ParamSet, Tensor, TensorMut,
};
use crate::preprocess::{fit_power_transform, TransformParams};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

pub const N_ANNOTATION_FEATURES: usize = 6;
pub const MEMORY_CELLS: usize = 8;
pub const PARAMETER_COUNT: usize = 530;
pub const RATIO_FLOOR: f64 = 1e-6;

/// How the two "difference" columns are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Visit-to-visit changes of κ and λ (zero at the first visit).
    #[default]
    TemporalDelta,
    /// Difference between the light chains, signed and absolute.
    InvolvedUninvolved,
}

impl FeatureMode {
    pub fn names(self) -> [&'static str; N_ANNOTATION_FEATURES] {
        match self {
            FeatureMode::TemporalDelta => [
                "mpr",
                "sfl_kappa",
                "sfl_lambda",
                "sfl_ratio",
                "delta_kappa",
                "delta_lambda",
            ],
            FeatureMode::InvolvedUninvolved => [
                "mpr",
                "sfl_kappa",
                "sfl_lambda",
                "sfl_ratio",
                "kappa_minus_lambda",
                "abs_kappa_minus_lambda",
            ],
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal_delta" => Ok(FeatureMode::TemporalDelta),
            "involved_uninvolved" => Ok(FeatureMode::InvolvedUninvolved),
            other => Err(Error::Config(format!(
                "unknown feature mode '{other}' (expected temporal_delta or involved_uninvolved)"
            ))),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMode::TemporalDelta => "temporal_delta",
            FeatureMode::InvolvedUninvolved => "involved_uninvolved",
        })
    }
}

pub type AnnotationRow = [f64; N_ANNOTATION_FEATURES];

/// Raw-space annotation features for an imputed lab series.
pub fn derive_features<X: AsRef<[f64]>>(labs: &[X], mode: FeatureMode) -> Vec<AnnotationRow> {
    let (m, k, l) = (
        Feature::Mpr.index(),
        Feature::SflKappa.index(),
        Feature::SflLambda.index(),
    );
    let mut prev: Option<(f64, f64)> = None;
    labs.iter()
        .map(|row| {
            let row = row.as_ref();
            debug_assert_eq!(row.len(), N_FEATURES);
            let (kappa, lambda) = (row[k], row[l]);
            let ratio = kappa / lambda.max(RATIO_FLOOR);
            let (a, b) = match mode {
                FeatureMode::TemporalDelta => prev.map_or((0.0, 0.0), |(pk, pl)| (kappa - pk, lambda - pl)),
                FeatureMode::InvolvedUninvolved => (kappa - lambda, (kappa - lambda).abs()),
            };
            prev = Some((kappa, lambda));
            [row[m], kappa, lambda, ratio, a, b]
        })
        .collect()
}

/// Fit the annotation-feature transform on raw training rows.
pub fn fit_feature_transform(rows: &[AnnotationRow], mode: FeatureMode) -> Result<TransformParams<f64>> {
    fit_power_transform(rows, &mode.names())
}

pub fn transform_features(rows: &[AnnotationRow], params: &TransformParams<f64>) -> Vec<AnnotationRow> {
    rows.iter()
        .map(|r| std::array::from_fn(|j| params.features[j].forward(r[j])))
        .collect()
}

/// Balance classes by drawing minority instances with replacement. Returns
/// indices into `labels`: every original index once, plus the draws.
pub fn upsample_balance(labels: &[bool], seed: u64) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate(format!(
            "upsampling needs both classes ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let (minority, deficit) = if pos.len() < neg.len() {
        (&pos, neg.len() - pos.len())
    } else {
        (&neg, pos.len() - neg.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    out.extend((0..deficit).map(|_| minority[rng.random_range(0..minority.len())]));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorParams<S> {
    pub lstm: Lstm<S>,
    pub head: Dense<S>,
}

impl<S: Scalar> AnnotatorParams<S> {
    pub fn zeros() -> Self {
        Self::checked(
            Lstm::zeros(N_ANNOTATION_FEATURES, MEMORY_CELLS),
            Dense::zeros(MEMORY_CELLS, 2),
        )
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let lstm = Lstm::init(N_ANNOTATION_FEATURES, MEMORY_CELLS, rng);
        let head = Dense::init(MEMORY_CELLS, 2, rng);
        Self::checked(lstm, head)
    }

    fn checked(lstm: Lstm<S>, head: Dense<S>) -> Self {
        let p = AnnotatorParams { lstm, head };
        assert_eq!(p.parameter_count(), PARAMETER_COUNT, "annotator architecture");
        p
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.lstm.n_in == N_ANNOTATION_FEATURES
            && self.lstm.n_hidden == MEMORY_CELLS
            && self.head.n_in == MEMORY_CELLS
            && self.head.n_out == 2;
        let count = self.parameter_count();
        if !shapes_ok || count != PARAMETER_COUNT {
            return Err(Error::Dimension {
                expected: PARAMETER_COUNT,
                got: count,
                context: "annotator parameter count",
            });
        }
        Ok(())
    }
}

impl<S: Scalar> ParamSet<S> for AnnotatorParams<S> {
    fn tensors(&self) -> Vec<Tensor<'_, S>> {
        let mut v: Vec<Tensor<'_, S>> = lstm_tensors("lstm", &self.lstm).into();
        v.extend(dense_tensors("dense", &self.head));
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, S>> {
        let mut v: Vec<TensorMut<'_, S>> = lstm_tensors_mut("lstm", &mut self.lstm).into();
        v.extend(dense_tensors_mut("dense", &mut self.head));
        v
    }
}

/// PD probability after every prefix of `features`.
pub fn annotate<S: Scalar, X: AsRef<[S]>>(params: &AnnotatorParams<S>, features: &[X]) -> Result<Vec<S>> {
    let states = params.lstm.forward(features)?;
    let mut logits = [S::zero(); 2];
    Ok(states
        .iter()
        .map(|s| {
            params.head.forward_into(&s.hidden, &mut logits);
            let (_, p1, _) = softmax_bce(&logits, false);
            p1
        })
        .collect())
}

/// Weighted BCE summed over every prefix of one sequence, gradients accumulated
/// into `grad`. `weights[t]` multiplies the loss of the prefix ending at `t`.
pub fn sequence_bce_loss<S: Scalar, X: AsRef<[S]>>(
    params: &AnnotatorParams<S>,
    features: &[X],
    labels: &[bool],
    weights: &[S],
    grad: &mut AnnotatorParams<S>,
) -> Result<S> {
    if labels.len() != features.len() || weights.len() != features.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            got: labels.len().min(weights.len()),
            context: "annotator labels and weights per visit",
        });
    }
    let trace = params.lstm.forward_trace(features)?;
    let mut d_hidden = vec![vec![S::zero(); MEMORY_CELLS]; trace.len()];
    let mut logits = [S::zero(); 2];
    let mut loss = S::zero();
    for t in 0..trace.len() {
        if weights[t] == S::zero() {
            continue;
        }
        let h = trace.hidden(t);
        params.head.forward_into(h, &mut logits);
        let (l, _, dl) = softmax_bce(&logits, labels[t]);
        loss += weights[t] * l;
        let dl = [dl[0] * weights[t], dl[1] * weights[t]];
        params.head.backward(h, &dl, &mut grad.head, Some(&mut d_hidden[t]));
    }
    params.lstm.backward(&trace, &d_hidden, &mut grad.lstm)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for AnnotatorTrainConfig {
    fn default() -> Self {
        AnnotatorTrainConfig {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: [("lstm".to_string(), 1.0), ("dense".to_string(), 1.0)].into(),
            seed: 0,
        }
    }
}

impl AnnotatorTrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let mut weight_decay = d.weight_decay.clone();
        for (group, value) in kv.section("weight_decay").iter() {
            let v: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse weight decay '{value}' for group '{group}'")))?;
            weight_decay.insert(group.to_string(), v);
        }
        let cfg = AnnotatorTrainConfig {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            weight_decay,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("learning_rate", self.learning_rate);
        kv.insert("seed", self.seed);
        for (g, d) in &self.weight_decay {
            kv.insert(format!("weight_decay.{g}"), d);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Train on transformed feature sequences with per-visit labels. Every prefix
/// is one instance; each epoch draws a fresh class-balanced multiset and
/// expresses it as per-instance multiplicities. A minibatch collects whole
/// patients until it holds `batch_size` instances.
pub fn train_annotator(
    sequences: &[Vec<AnnotationRow>],
    labels: &[Vec<bool>],
    config: &AnnotatorTrainConfig,
) -> Result<(AnnotatorParams<f64>, Vec<f64>)> {
    config.validate()?;
    if sequences.len() != labels.len() || sequences.iter().zip(labels).any(|(s, l)| s.len() != l.len()) {
        return Err(Error::Validation("one label per visit is required".into()));
    }
    let offsets: Vec<usize> = sequences
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.len();
            Some(o)
        })
        .collect();
    let flat_labels: Vec<bool> = labels.iter().flatten().copied().collect();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "annotator-init", 0));
    let mut params = AnnotatorParams::init(&mut init_rng);
    let mut opt = crate::nn::AdamWConfig::new(config.learning_rate, &[]);
    opt.weight_decay = config.weight_decay.clone();
    let mut state = AdamWState::new(&params);
    let mut grad = AnnotatorParams::zeros();
    let mut order: Vec<usize> = (0..sequences.len()).filter(|&p| !sequences[p].is_empty()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let balanced = upsample_balance(
            &flat_labels,
            derive_seed(config.seed, "annotator-upsample", epoch as u64),
        )?;
        let mut weight = vec![0.0; flat_labels.len()];
        for i in balanced {
            weight[i] += 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "annotator-epoch", epoch as u64));
        order.shuffle(&mut rng);
        let instances =
            |p: usize| -> usize { weight[offsets[p]..offsets[p] + sequences[p].len()].iter().sum::<f64>() as usize };
        let (mut total, mut count) = (0.0, 0.0);
        for (b, batch) in patient_batches(&order, instances, config.batch_size).iter().enumerate() {
            grad.fill_zero();
            let (mut loss, mut n) = (0.0, 0.0);
            for &p in batch {
                let w = &weight[offsets[p]..offsets[p] + sequences[p].len()];
                loss += sequence_bce_loss(&params, &sequences[p], &labels[p], w, &mut grad)?;
                n += w.iter().sum::<f64>();
            }
            grad.scale(1.0 / n);
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "annotator loss became non-finite at epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            adamw_update(&mut params, &grad, &mut state, &opt)?;
            total += loss;
            count += n;
        }
        epoch_loss.push(total / count);
    }
    Ok((params, epoch_loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCalibration {
    pub beta: f64,
    pub threshold: f64,
    pub achieved_fbeta: f64,
    /// `(threshold, precision, recall, fbeta)` with thresholds ascending.
    pub curve: Vec<(f64, f64, f64, f64)>,
}

/// Threshold maximising `F_β` over the distinct scores; ties go to the lowest threshold.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool], beta: f64) -> Result<ThresholdCalibration> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Degenerate("threshold calibration needs both classes".into()));
    }
    let curve = fbeta_curve(scores, labels, beta)?;
    let best = curve
        .iter()
        .fold(None::<&crate::metrics::FbetaPoint>, |best, p| match best {
            Some(b) if b.fbeta >= p.fbeta => Some(b),
            _ => Some(p),
        })
        .expect("non-empty curve");
    Ok(ThresholdCalibration {
        beta,
        threshold: best.threshold,
        achieved_fbeta: best.fbeta,
        curve: curve
            .iter()
            .map(|p| (p.threshold, p.precision, p.recall, p.fbeta))
            .collect(),
    })
}

impl ThresholdCalibration {
    pub fn to_csv_string(&self) -> String {
        let mut s = format!(
            "beta,threshold,achieved_fbeta\n{},{},{}\n",
            self.beta, self.threshold, self.achieved_fbeta
        );
        s += "\nthreshold,precision,recall,fbeta\n";
        for (t, p, r, f) in &self.curve {
            s += &format!("{t},{p},{r},{f}\n");
        }
        s
    }

    /// Read the summary line written by [`Self::to_csv_string`].
    pub fn parse_summary(text: &str) -> Result<(f64, f64, f64)> {
        let line = text.lines().nth(1).ok_or_else(|| Error::Parse {
            line: 2,
            message: "missing calibration summary".into(),
        })?;
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: 2,
                message: format!("malformed calibration summary '{line}'"),
            })?;
        match v[..] {
            [b, t, f] => Ok((b, t, f)),
            _ => Err(Error::Parse {
                line: 2,
                message: "expected beta,threshold,achieved_fbeta".into(),
            }),
        }
    }
}
