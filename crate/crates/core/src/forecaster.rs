//! LSTM-conditioned CRBM forecaster: next-visit training with contrastive
//! divergence and recurrent Monte Carlo trajectory ensembles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::N_FEATURES;
use crate::config::KeyValues;
use crate::crbm::{cd_loss_grad, gibbs_sample, ChainInit, ConditioningNets, CrbmCond, GibbsChainConfig};
use crate::error::{Error, Result};
use crate::nn::{
    adamw_update, dense_tensors, lstm_tensors, lstm_tensors_mut, AdamWConfig, AdamWState, Lstm, ParamSet, Tensor,
    TensorMut,
};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

pub const CONTEXT_SIZE: usize = 32;
pub const HIDDEN_UNITS: usize = 16;
pub const PARAMETER_COUNT: usize = 11_572;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterParams<S> {
    pub lstm: Lstm<S>,
    pub nets: ConditioningNets<S>,
}

impl<S: Scalar> ForecasterParams<S> {
    pub fn zeros() -> Self {
        Self::checked(
            Lstm::zeros(N_FEATURES, CONTEXT_SIZE),
            ConditioningNets::zeros(CONTEXT_SIZE, N_FEATURES, HIDDEN_UNITS),
        )
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let lstm = Lstm::init(N_FEATURES, CONTEXT_SIZE, rng);
        let nets = ConditioningNets::init(CONTEXT_SIZE, N_FEATURES, HIDDEN_UNITS, rng);
        Self::checked(lstm, nets)
    }

    fn checked(lstm: Lstm<S>, nets: ConditioningNets<S>) -> Self {
        let p = ForecasterParams { lstm, nets };
        assert_eq!(p.parameter_count(), PARAMETER_COUNT, "forecaster architecture");
        p
    }

    /// Reject parameter sets whose shapes differ from the fixed architecture.
    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.lstm.n_in == N_FEATURES
            && self.lstm.n_hidden == CONTEXT_SIZE
            && self.nets.n_context() == CONTEXT_SIZE
            && self.nets.n_visible() == N_FEATURES
            && self.nets.n_hidden == HIDDEN_UNITS;
        let count = self.parameter_count();
        if !shapes_ok || count != PARAMETER_COUNT {
            return Err(Error::Dimension {
                expected: PARAMETER_COUNT,
                got: count,
                context: "forecaster parameter count",
            });
        }
        Ok(())
    }

    /// RBM parameters for the next visit after `history`.
    pub fn condition_on<X: AsRef<[S]>>(&self, history: &[X]) -> Result<CrbmCond<S>> {
        let state = self.lstm.encode(history)?;
        self.nets.condition(&state.hidden)
    }

    pub fn cast<T: Scalar>(&self) -> ForecasterParams<T> {
        ForecasterParams {
            lstm: self.lstm.cast(),
            nets: self.nets.cast(),
        }
    }
}

impl<S: Scalar> ParamSet<S> for ForecasterParams<S> {
    fn tensors(&self) -> Vec<Tensor<'_, S>> {
        let mut v: Vec<Tensor<'_, S>> = lstm_tensors("lstm", &self.lstm).into();
        v.extend(dense_tensors("bias_net", &self.nets.bias_net));
        v.extend(dense_tensors("precision_net", &self.nets.precision_net));
        v.extend(dense_tensors("weights_net", &self.nets.weights_net));
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, S>> {
        let mut v: Vec<TensorMut<'_, S>> = lstm_tensors_mut("lstm", &mut self.lstm).into();
        v.extend(self.nets.tensors_mut());
        v
    }
}

/// One training example: `series[patient][..target]` predicts `series[patient][target]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub patient: usize,
    pub target: usize,
}

pub fn make_training_pairs<X>(series: &[Vec<X>]) -> Vec<TrainingPair> {
    series
        .iter()
        .enumerate()
        .flat_map(|(patient, s)| (1..s.len()).map(move |target| TrainingPair { patient, target }))
        .collect()
}

/// Summed CD loss over every next-visit target of one sequence; gradients are
/// accumulated into `grad`. `reconstruct(t, v_data, cond)` supplies the
/// negative-phase sample for target `t` and is treated as a constant.
pub fn sequence_cd_loss<S, X, F>(
    params: &ForecasterParams<S>,
    series: &[X],
    grad: &mut ForecasterParams<S>,
    mut reconstruct: F,
) -> Result<S>
where
    S: Scalar,
    X: AsRef<[S]>,
    F: FnMut(usize, &[S], &CrbmCond<S>) -> Vec<S>,
{
    if series.len() < 2 {
        return Ok(S::zero());
    }
    let trace = params.lstm.forward_trace(&series[..series.len() - 1])?;
    let mut d_hidden = vec![vec![S::zero(); CONTEXT_SIZE]; trace.len()];
    let mut loss = S::zero();
    for t in 1..series.len() {
        let context = trace.hidden(t - 1);
        let cond = params.nets.condition(context)?;
        let v_data = series[t].as_ref();
        let v_model = reconstruct(t, v_data, &cond);
        let (l, d_cond) = cd_loss_grad(v_data, &v_model, &cond);
        loss += l;
        params
            .nets
            .backward(context, &d_cond, &mut grad.nets, &mut d_hidden[t - 1]);
    }
    params.lstm.backward(&trace, &d_hidden, &mut grad.lstm)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: BTreeMap<String, f64>,
    pub cd_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: [
                ("lstm", 0.1),
                ("precision_net", 0.1),
                ("bias_net", 0.1),
                ("weights_net", 0.2),
            ]
            .into_iter()
            .map(|(g, d)| (g.to_string(), d))
            .collect(),
            cd_k: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Keys: `epochs`, `batch_size`, `learning_rate`, `cd_k`, `seed`, `weight_decay.<group>`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let mut weight_decay = d.weight_decay.clone();
        for (group, value) in kv.section("weight_decay").iter() {
            let v: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse weight decay '{value}' for group '{group}'")))?;
            weight_decay.insert(group.to_string(), v);
        }
        let cfg = TrainConfig {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            weight_decay,
            cd_k: kv.get_or("cd_k", d.cd_k)?,
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
        kv.insert("cd_k", self.cd_k);
        kv.insert("seed", self.seed);
        for (g, d) in &self.weight_decay {
            kv.insert(format!("weight_decay.{g}"), d);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.cd_k == 0 {
            return Err(Error::Config("epochs, batch_size and cd_k must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let mut cfg = AdamWConfig::new(self.learning_rate, &[]);
        cfg.weight_decay = self.weight_decay.clone();
        cfg
    }
}

/// Mean loss per pair for every epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
}

/// Group whole patients into minibatches holding at least `batch_size` items each.
pub(crate) fn patient_batches(order: &[usize], items: impl Fn(usize) -> usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut count = 0;
    for &p in order {
        current.push(p);
        count += items(p);
        if count >= batch_size {
            batches.push(std::mem::take(&mut current));
            count = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Train on transformed series. Each epoch shuffles patients; a minibatch
/// collects whole patients until it holds `batch_size` next-visit pairs, so one
/// LSTM pass per patient serves all of its prefixes.
pub fn train_forecaster<X: AsRef<[f64]>>(
    series: &[Vec<X>],
    config: &TrainConfig,
) -> Result<(ForecasterParams<f64>, TrainingLog)> {
    config.validate()?;
    for (p, s) in series.iter().enumerate() {
        if let Some(row) = s.iter().find(|r| r.as_ref().len() != N_FEATURES) {
            return Err(Error::Dimension {
                expected: N_FEATURES,
                got: row.as_ref().len(),
                context: if p == 0 {
                    "training series"
                } else {
                    "training series row"
                },
            });
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "forecaster-init", 0));
    let mut params = ForecasterParams::init(&mut init_rng);
    params.validate()?;
    let opt = config.optimizer();
    let mut state = AdamWState::new(&params);
    let mut grad = ForecasterParams::zeros();
    let mut order: Vec<usize> = (0..series.len()).filter(|&p| series[p].len() >= 2).collect();
    if order.is_empty() {
        return Err(Error::Validation("no patient has two or more visits".into()));
    }
    let mut log = TrainingLog::default();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "forecaster-epoch", epoch as u64));
        order.shuffle(&mut rng);
        let batches = patient_batches(&order, |p| series[p].len() - 1, config.batch_size);
        let (mut epoch_loss, mut epoch_pairs) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            grad.fill_zero();
            let mut loss = 0.0;
            let mut n_pairs = 0;
            for &p in batch {
                loss += sequence_cd_loss(&params, &series[p], &mut grad, |_, v, cond| {
                    gibbs_sample(v, cond, config.cd_k, &mut rng)
                })?;
                n_pairs += series[p].len() - 1;
            }
            grad.scale(1.0 / n_pairs as f64);
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "forecaster loss became non-finite at epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            adamw_update(&mut params, &grad, &mut state, &opt)?;
            epoch_loss += loss;
            epoch_pairs += n_pairs;
        }
        log.epoch_loss.push(epoch_loss / epoch_pairs as f64);
    }
    Ok((params, log))
}

/// Monte Carlo forecast: `samples[chain][step][feature]` plus per-step summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution<S> {
    pub horizon: usize,
    pub samples: Vec<Vec<Vec<S>>>,
    pub mean: Vec<Vec<S>>,
    pub lo95: Vec<Vec<S>>,
    pub hi95: Vec<Vec<S>>,
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl<S: Scalar> ForecastDistribution<S> {
    pub fn from_samples(samples: Vec<Vec<Vec<S>>>) -> Self {
        let horizon = samples.first().map_or(0, Vec::len);
        let n = samples.len();
        let mut mean = vec![vec![S::zero(); N_FEATURES]; horizon];
        let mut lo95 = mean.clone();
        let mut hi95 = mean.clone();
        let mut column = vec![0.0; n];
        for step in 0..horizon {
            for f in 0..N_FEATURES {
                let mut acc = 0.0;
                for (c, chain) in samples.iter().enumerate() {
                    column[c] = chain[step][f].as_f64();
                    acc += column[c];
                }
                mean[step][f] = S::of(acc / n as f64);
                column.sort_by(f64::total_cmp);
                lo95[step][f] = S::of(percentile_sorted(&column, 0.025));
                hi95[step][f] = S::of(percentile_sorted(&column, 0.975));
            }
        }
        ForecastDistribution {
            horizon,
            samples,
            mean,
            lo95,
            hi95,
        }
    }
}

/// Sample `config.n_samples` trajectories of length `horizon`. Every chain
/// draws a visit, appends it to its own copy of the history and conditions the
/// next step on the extended history. The LSTM state after the observed history
/// is computed once and advanced by one step per sampled visit.
pub fn forecast_trajectory<S: Scalar, X: AsRef<[S]>>(
    params: &ForecasterParams<S>,
    history: &[X],
    horizon: usize,
    config: &GibbsChainConfig,
) -> Result<ForecastDistribution<S>> {
    config.validate()?;
    if horizon == 0 {
        return Err(Error::Validation("forecast horizon must be at least 1".into()));
    }
    let last = history
        .last()
        .ok_or_else(|| Error::Validation("forecast needs a non-empty history".into()))?
        .as_ref()
        .to_vec();
    let observed = params.lstm.encode(history)?;
    let first_cond = params.nets.condition(&observed.hidden)?;
    let samples = (0..config.n_samples)
        .map(|k| {
            let mut rng = config.chain_rng(k);
            let mut state = observed.clone();
            let mut previous = last.clone();
            let mut trajectory = Vec::with_capacity(horizon);
            for step in 0..horizon {
                let cond = if step == 0 {
                    first_cond.clone()
                } else {
                    params.nets.condition(&state.hidden)?
                };
                let v0 = match config.init {
                    ChainInit::ConditionalMean => cond.bias.clone(),
                    ChainInit::LastObservation => previous,
                };
                let v = gibbs_sample(&v0, &cond, config.steps, &mut rng);
                if step + 1 < horizon {
                    state = params.lstm.step(&state, &v)?;
                }
                previous = v.clone();
                trajectory.push(v);
            }
            Ok(trajectory)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastDistribution::from_samples(samples))
}

pub fn forecast_next<S: Scalar, X: AsRef<[S]>>(
    params: &ForecasterParams<S>,
    history: &[X],
    config: &GibbsChainConfig,
) -> Result<ForecastDistribution<S>> {
    forecast_trajectory(params, history, 1, config)
}
