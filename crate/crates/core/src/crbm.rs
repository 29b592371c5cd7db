//! Conditional Gaussian-Bernoulli RBM.
//!
//! Energy `E(v, h | c) = ½ Σᵢ λᵢ (vᵢ − bᵢ)² − vᵀ W h` with zero hidden bias;
//! `b`, `λ` and `W` are affine functions of a context vector `c`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{dense_tensors, dense_tensors_mut, Dense, ParamSet, Tensor, TensorMut};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Lower bound added to every precision.
pub const PRECISION_FLOOR: f64 = 1e-4;

/// Affine heads producing the RBM parameters from a context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningNets<S> {
    pub n_hidden: usize,
    pub bias_net: Dense<S>,
    pub precision_net: Dense<S>,
    pub weights_net: Dense<S>,
}

impl<S: Scalar> ConditioningNets<S> {
    pub fn zeros(n_context: usize, n_visible: usize, n_hidden: usize) -> Self {
        ConditioningNets {
            n_hidden,
            bias_net: Dense::zeros(n_context, n_visible),
            precision_net: Dense::zeros(n_context, n_visible),
            weights_net: Dense::zeros(n_context, n_visible * n_hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(n_context: usize, n_visible: usize, n_hidden: usize, rng: &mut R) -> Self {
        ConditioningNets {
            n_hidden,
            bias_net: Dense::init(n_context, n_visible, rng),
            precision_net: Dense::init(n_context, n_visible, rng),
            weights_net: Dense::init(n_context, n_visible * n_hidden, rng),
        }
    }

    pub fn n_context(&self) -> usize {
        self.bias_net.n_in
    }

    pub fn n_visible(&self) -> usize {
        self.bias_net.n_out
    }

    pub fn condition(&self, context: &[S]) -> Result<CrbmCond<S>> {
        if context.len() != self.n_context() {
            return Err(Error::Dimension {
                expected: self.n_context(),
                got: context.len(),
                context: "conditioning context",
            });
        }
        let n_vis = self.n_visible();
        let mut cond = CrbmCond {
            n_visible: n_vis,
            n_hidden: self.n_hidden,
            bias: vec![S::zero(); n_vis],
            precision_pre: vec![S::zero(); n_vis],
            precision: vec![S::zero(); n_vis],
            weights: vec![S::zero(); n_vis * self.n_hidden],
        };
        self.bias_net.forward_into(context, &mut cond.bias);
        self.precision_net.forward_into(context, &mut cond.precision_pre);
        self.weights_net.forward_into(context, &mut cond.weights);
        for (l, &p) in cond.precision.iter_mut().zip(&cond.precision_pre) {
            *l = softplus(p) + S::of(PRECISION_FLOOR);
        }
        Ok(cond)
    }

    /// Backpropagate a gradient on the conditioned parameters into the nets
    /// (accumulated into `grad`) and into the context (accumulated into `d_context`).
    pub fn backward(&self, context: &[S], d_cond: &CondGrad<S>, grad: &mut Self, d_context: &mut [S]) {
        self.bias_net
            .backward(context, &d_cond.bias, &mut grad.bias_net, Some(&mut *d_context));
        self.precision_net.backward(
            context,
            &d_cond.precision_pre,
            &mut grad.precision_net,
            Some(&mut *d_context),
        );
        self.weights_net
            .backward(context, &d_cond.weights, &mut grad.weights_net, Some(d_context));
    }

    pub fn cast<T: Scalar>(&self) -> ConditioningNets<T> {
        ConditioningNets {
            n_hidden: self.n_hidden,
            bias_net: self.bias_net.cast(),
            precision_net: self.precision_net.cast(),
            weights_net: self.weights_net.cast(),
        }
    }
}

impl<S: Scalar> ParamSet<S> for ConditioningNets<S> {
    fn tensors(&self) -> Vec<Tensor<'_, S>> {
        let mut v = Vec::with_capacity(6);
        v.extend(dense_tensors("bias_net", &self.bias_net));
        v.extend(dense_tensors("precision_net", &self.precision_net));
        v.extend(dense_tensors("weights_net", &self.weights_net));
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, S>> {
        let mut v = Vec::with_capacity(6);
        v.extend(dense_tensors_mut("bias_net", &mut self.bias_net));
        v.extend(dense_tensors_mut("precision_net", &mut self.precision_net));
        v.extend(dense_tensors_mut("weights_net", &mut self.weights_net));
        v
    }
}

/// RBM parameters for one context. `weights` is `n_visible × n_hidden`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CrbmCond<S> {
    pub n_visible: usize,
    pub n_hidden: usize,
    pub bias: Vec<S>,
    pub precision_pre: Vec<S>,
    pub precision: Vec<S>,
    pub weights: Vec<S>,
}

impl<S: Scalar> CrbmCond<S> {
    /// Parameters given directly; `precision_pre` is recovered by inverting the softplus.
    pub fn from_parts(bias: Vec<S>, precision: Vec<S>, weights: Vec<S>) -> Result<Self> {
        let n_visible = bias.len();
        if precision.len() != n_visible {
            return Err(Error::Dimension {
                expected: n_visible,
                got: precision.len(),
                context: "precision vector",
            });
        }
        if n_visible == 0 || !weights.len().is_multiple_of(n_visible) {
            return Err(Error::Dimension {
                expected: n_visible,
                got: weights.len(),
                context: "weight matrix rows",
            });
        }
        let floor = S::of(PRECISION_FLOOR);
        if precision.iter().any(|&l| !(l > floor)) {
            return Err(Error::Validation(format!("precisions must exceed {PRECISION_FLOOR}")));
        }
        let precision_pre = precision.iter().map(|&l| (l - floor).exp_m1().ln()).collect();
        Ok(CrbmCond {
            n_visible,
            n_hidden: weights.len() / n_visible,
            bias,
            precision_pre,
            precision,
            weights,
        })
    }

    /// `(vᵀW)_j` for every hidden unit.
    fn hidden_input(&self, v: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|x| *x = S::zero());
        for (i, &vi) in v.iter().enumerate() {
            let row = &self.weights[i * self.n_hidden..(i + 1) * self.n_hidden];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
    }

    fn visible_mean_into(&self, h: &[S], out: &mut [S]) {
        for i in 0..self.n_visible {
            let row = &self.weights[i * self.n_hidden..(i + 1) * self.n_hidden];
            let wh: S = row.iter().zip(h).map(|(&w, &hj)| w * hj).sum();
            out[i] = self.bias[i] + wh / self.precision[i];
        }
    }
}

/// `p(h_j = 1 | v) = σ((vᵀW)_j)`.
pub fn hidden_given_visible<S: Scalar>(v: &[S], cond: &CrbmCond<S>) -> Vec<S> {
    let mut p = vec![S::zero(); cond.n_hidden];
    cond.hidden_input(v, &mut p);
    p.iter_mut().for_each(|x| *x = sigmoid(*x));
    p
}

/// Conditional mean `b + W h ⊘ λ` and a draw from `N(mean, diag(1/λ))`.
pub fn visible_given_hidden<S: Scalar, R: Rng + ?Sized>(h: &[S], cond: &CrbmCond<S>, rng: &mut R) -> (Vec<S>, Vec<S>) {
    let mut mean = vec![S::zero(); cond.n_visible];
    cond.visible_mean_into(h, &mut mean);
    let sample = mean
        .iter()
        .zip(&cond.precision)
        .map(|(&m, &l)| m + S::of(rng.sample::<f64, _>(StandardNormal)) / l.sqrt())
        .collect();
    (mean, sample)
}

/// `F(v) = ½ Σ λᵢ (vᵢ − bᵢ)² − Σⱼ softplus((vᵀW)ⱼ)`.
pub fn free_energy<S: Scalar>(v: &[S], cond: &CrbmCond<S>) -> S {
    let half = S::of(0.5);
    let quad: S = v
        .iter()
        .zip(&cond.bias)
        .zip(&cond.precision)
        .map(|((&vi, &bi), &li)| half * li * (vi - bi) * (vi - bi))
        .sum();
    let mut a = vec![S::zero(); cond.n_hidden];
    cond.hidden_input(v, &mut a);
    quad - a.into_iter().map(softplus).sum::<S>()
}

/// Gradient of a scalar with respect to the conditioned parameters
/// (`precision_pre` is the pre-softplus activation).
#[derive(Debug, Clone, PartialEq)]
pub struct CondGrad<S> {
    pub bias: Vec<S>,
    pub precision_pre: Vec<S>,
    pub weights: Vec<S>,
}

impl<S: Scalar> CondGrad<S> {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        CondGrad {
            bias: vec![S::zero(); n_visible],
            precision_pre: vec![S::zero(); n_visible],
            weights: vec![S::zero(); n_visible * n_hidden],
        }
    }
}

/// Accumulate `sign · ∂F(v)/∂(b, pre, W)` into `grad`.
pub fn free_energy_grad<S: Scalar>(v: &[S], cond: &CrbmCond<S>, sign: S, grad: &mut CondGrad<S>) {
    let half = S::of(0.5);
    for i in 0..cond.n_visible {
        let d = v[i] - cond.bias[i];
        grad.bias[i] -= sign * cond.precision[i] * d;
        grad.precision_pre[i] += sign * half * d * d * sigmoid(cond.precision_pre[i]);
    }
    let p = hidden_given_visible(v, cond);
    for i in 0..cond.n_visible {
        let row = &mut grad.weights[i * cond.n_hidden..(i + 1) * cond.n_hidden];
        for (g, &pj) in row.iter_mut().zip(&p) {
            *g -= sign * v[i] * pj;
        }
    }
}

/// Where generation chains start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChainInit {
    #[default]
    ConditionalMean,
    LastObservation,
}

impl std::str::FromStr for ChainInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional_mean" => Ok(ChainInit::ConditionalMean),
            "last_observation" => Ok(ChainInit::LastObservation),
            other => Err(Error::Config(format!(
                "unknown chain init '{other}' (expected conditional_mean or last_observation)"
            ))),
        }
    }
}

impl std::fmt::Display for ChainInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChainInit::ConditionalMean => "conditional_mean",
            ChainInit::LastObservation => "last_observation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GibbsChainConfig {
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub init: ChainInit,
}

impl Default for GibbsChainConfig {
    fn default() -> Self {
        GibbsChainConfig {
            steps: 32,
            n_samples: 1000,
            seed: 0,
            init: ChainInit::ConditionalMean,
        }
    }
}

impl GibbsChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.n_samples == 0 {
            return Err(Error::Config("gibbs steps and n_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Independent stream for chain `index`.
    pub fn chain_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Run `steps` alternating `h ~ p(h|v)`, `v ~ p(v|h)` updates from `v0`.
pub fn gibbs_sample<S: Scalar, R: Rng + ?Sized>(v0: &[S], cond: &CrbmCond<S>, steps: usize, rng: &mut R) -> Vec<S> {
    let mut v = v0.to_vec();
    let mut h = vec![S::zero(); cond.n_hidden];
    let mut mean = vec![S::zero(); cond.n_visible];
    for _ in 0..steps {
        cond.hidden_input(&v, &mut h);
        for x in h.iter_mut() {
            let p = sigmoid(*x).as_f64();
            *x = if rng.random::<f64>() < p { S::one() } else { S::zero() };
        }
        cond.visible_mean_into(&h, &mut mean);
        for ((vi, &m), &l) in v.iter_mut().zip(&mean).zip(&cond.precision) {
            *vi = m + S::of(rng.sample::<f64, _>(StandardNormal)) / l.sqrt();
        }
    }
    v
}

/// `n_samples` independent chains of `steps` updates, one stream per chain.
pub fn gibbs_ensemble<S: Scalar>(v0: &[S], cond: &CrbmCond<S>, config: &GibbsChainConfig) -> Vec<Vec<S>> {
    (0..config.n_samples)
        .map(|k| gibbs_sample(v0, cond, config.steps, &mut config.chain_rng(k)))
        .collect()
}

/// CD loss `F(v_data) − F(v_model)` and its gradient with `v_model` held fixed.
pub fn cd_loss_grad<S: Scalar>(v_data: &[S], v_model: &[S], cond: &CrbmCond<S>) -> (S, CondGrad<S>) {
    let mut grad = CondGrad::zeros(cond.n_visible, cond.n_hidden);
    free_energy_grad(v_data, cond, S::one(), &mut grad);
    free_energy_grad(v_model, cond, -S::one(), &mut grad);
    (free_energy(v_data, cond) - free_energy(v_model, cond), grad)
}

/// CD-k: reconstruct with `k` Gibbs steps started at the data.
pub fn cd_step<S: Scalar, R: Rng + ?Sized>(
    v_data: &[S],
    cond: &CrbmCond<S>,
    k: usize,
    rng: &mut R,
) -> (S, CondGrad<S>) {
    let v_model = gibbs_sample(v_data, cond, k, rng);
    cd_loss_grad(v_data, &v_model, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adamw_update, AdamWConfig, AdamWState};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn random_cond(n_vis: usize, n_hid: usize, seed: u64) -> CrbmCond<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = (0..n_vis).map(|_| rng.random_range(-1.0..1.0)).collect();
        let precision = (0..n_vis).map(|_| rng.random_range(0.5..2.0)).collect();
        let weights = (0..n_vis * n_hid).map(|_| rng.random_range(-0.8..0.8)).collect();
        CrbmCond::from_parts(bias, precision, weights).unwrap()
    }

    fn energy(v: &[f64], h: &[f64], c: &CrbmCond<f64>) -> f64 {
        let quad: f64 = (0..c.n_visible)
            .map(|i| 0.5 * c.precision[i] * (v[i] - c.bias[i]).powi(2))
            .sum();
        let mut inter = 0.0;
        for i in 0..c.n_visible {
            for j in 0..c.n_hidden {
                inter += v[i] * c.weights[i * c.n_hidden + j] * h[j];
            }
        }
        quad - inter
    }

    fn hidden_configs(n: usize) -> impl Iterator<Item = Vec<f64>> {
        (0..1usize << n).map(move |m| (0..n).map(|j| ((m >> j) & 1) as f64).collect())
    }

    #[test]
    fn zero_context_closed_form() {
        let nets = ConditioningNets::<f64>::zeros(32, 10, 16);
        assert_eq!(nets.parameter_count(), 5940);
        let c = nets.condition(&[0.0; 32]).unwrap();
        assert!(c.bias.iter().all(|&b| b == 0.0));
        assert!(c.weights.iter().all(|&w| w == 0.0));
        for &l in &c.precision {
            assert!((l - (2f64.ln() + 1e-4)).abs() < 1e-12);
            assert!((l - 0.6933).abs() < 1e-4);
        }
        assert!(nets.condition(&[0.0; 3]).is_err());
    }

    #[test]
    fn conditioning_is_affine_in_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut nets = ConditioningNets::<f64>::init(5, 4, 3, &mut rng);
        nets.bias_net.bias.iter_mut().for_each(|b| *b = 0.0);
        nets.precision_net.bias.iter_mut().for_each(|b| *b = 0.0);
        let c1 = [0.3, -0.2, 0.1, 0.5, -0.4];
        let c2: Vec<f64> = c1.iter().map(|x| 2.0 * x).collect();
        let a = nets.condition(&c1).unwrap();
        let b = nets.condition(&c2).unwrap();
        for i in 0..4 {
            assert!((b.bias[i] - 2.0 * a.bias[i]).abs() < 1e-12);
            assert!((b.precision_pre[i] - 2.0 * a.precision_pre[i]).abs() < 1e-12);
        }
        assert!(a.precision.iter().chain(&b.precision).all(|&l| l >= PRECISION_FLOOR));
    }

    #[test]
    fn hidden_conditionals() {
        let zero = CrbmCond::from_parts(vec![0.0; 3], vec![1.0; 3], vec![0.0; 3 * 4]).unwrap();
        assert!(hidden_given_visible(&[1.0, -2.0, 3.0], &zero).iter().all(|&p| p == 0.5));
        let mut w = vec![0.0; 3 * 4];
        w[0] = 20.0;
        let sat = CrbmCond::from_parts(vec![0.0; 3], vec![1.0; 3], w).unwrap();
        assert!(hidden_given_visible(&[1.0, 0.0, 0.0], &sat)[0] > 1.0 - 1e-8);
    }

    #[test]
    fn hidden_conditionals_match_enumeration() {
        let c = random_cond(5, 4, 11);
        let v = [0.4, -1.1, 0.7, 0.0, 1.9];
        let p = hidden_given_visible(&v, &c);
        let mut z = 0.0;
        let mut on = [0.0; 4];
        for h in hidden_configs(4) {
            let w = (-energy(&v, &h, &c)).exp();
            z += w;
            for j in 0..4 {
                on[j] += w * h[j];
            }
        }
        for j in 0..4 {
            assert!((p[j] - on[j] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn free_energy_closed_forms() {
        let c = CrbmCond::from_parts(vec![0.5; 10], vec![0.8; 10], vec![0.0; 160]).unwrap();
        let v = vec![0.5; 10];
        let f0 = free_energy(&v, &c);
        assert!((f0 + 16.0 * 2f64.ln()).abs() < 1e-12);
        let mut v1 = v.clone();
        v1[0] += 1.0;
        assert!((free_energy(&v1, &c) - f0 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn free_energy_marginalises_hidden_units() {
        for (n_vis, n_hid, seed) in [(3, 3, 1), (4, 8, 2), (2, 5, 3)] {
            let c = random_cond(n_vis, n_hid, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..5 {
                let v: Vec<f64> = (0..n_vis).map(|_| rng.random_range(-2.0..2.0)).collect();
                let z: f64 = hidden_configs(n_hid).map(|h| (-energy(&v, &h, &c)).exp()).sum();
                assert!((free_energy(&v, &c) + z.ln()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn visible_conditionals() {
        let c = random_cond(3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mean, _) = visible_given_hidden(&[0.0, 0.0], &c, &mut rng);
        assert_eq!(mean, c.bias);

        let tight = CrbmCond::from_parts(vec![1.0; 3], vec![1e6; 3], vec![0.3; 6]).unwrap();
        let mut close = 0;
        for _ in 0..1000 {
            let (m, s) = visible_given_hidden(&[1.0, 0.0], &tight, &mut rng);
            if m.iter().zip(&s).all(|(a, b): (&f64, &f64)| (a - b).abs() < 1e-2) {
                close += 1;
            }
        }
        assert!(close >= 990);

        let h = [1.0, 0.0];
        let (mean, _) = visible_given_hidden(&h, &c, &mut rng);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let (_, s) = visible_given_hidden(&h, &c, &mut rng);
            for i in 0..3 {
                acc[i] += s[i];
            }
        }
        for i in 0..3 {
            let se = (1.0 / c.precision[i]).sqrt() / (n as f64).sqrt();
            assert!((acc[i] / n as f64 - mean[i]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn zero_interaction_chain_samples_the_gaussian() {
        let c = CrbmCond::from_parts(
            (0..10).map(|i| i as f64 * 0.3 - 1.0).collect(),
            (0..10).map(|i| 0.5 + i as f64 * 0.2).collect(),
            vec![0.0; 160],
        )
        .unwrap();
        let cfg = GibbsChainConfig {
            steps: 1,
            n_samples: 10_000,
            seed: 9,
            init: ChainInit::ConditionalMean,
        };
        let samples = gibbs_ensemble(&c.bias, &c, &cfg);
        let n = samples.len() as f64;
        for i in 0..10 {
            let m = samples.iter().map(|s| s[i]).sum::<f64>() / n;
            let se = (1.0 / c.precision[i]).sqrt() / n.sqrt();
            assert!((m - c.bias[i]).abs() < 4.0 * se, "coordinate {i}");
        }
        assert_eq!(gibbs_ensemble(&c.bias, &c, &cfg), samples);
    }

    fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn chain_is_stationary_after_32_steps() {
        let c = random_cond(10, 16, 21);
        let mk = |steps, seed| GibbsChainConfig {
            steps,
            n_samples: 10_000,
            seed,
            init: ChainInit::ConditionalMean,
        };
        let s2 = gibbs_ensemble(&c.bias, &c, &mk(2, 999));
        let s32 = gibbs_ensemble(&c.bias, &c, &mk(32, 1000));
        let s64 = gibbs_ensemble(&c.bias, &c, &mk(64, 1001));
        let n: f64 = 10_000.0;
        let critical: f64 = 1.628 * ((n + n) / (n * n)).sqrt();
        for i in 0..10 {
            let mut a: Vec<f64> = s32.iter().map(|s| s[i]).collect();
            let mut b: Vec<f64> = s64.iter().map(|s| s[i]).collect();
            let d = ks_statistic(&mut a, &mut b);
            assert!(d < critical, "coordinate {i}: D = {d}");
        }
        // a chain stopped after 2 steps is still far from equilibrium and must be flagged
        let mut flagged = 0;
        for i in 0..10 {
            let mut a: Vec<f64> = s2.iter().map(|s| s[i]).collect();
            let mut b: Vec<f64> = s64.iter().map(|s| s[i]).collect();
            if ks_statistic(&mut a, &mut b) > critical {
                flagged += 1;
            }
        }
        assert!(flagged >= 5);
    }

    /// One-visible instance: the Gibbs kernel `K(v'|v) = Σ_h p(h|v) N(v'; μ(h), 1/λ)`.
    fn kernel_cdf(c: &CrbmCond<f64>, v: f64, x: f64) -> f64 {
        let p = hidden_given_visible(&[v], c);
        hidden_configs(c.n_hidden)
            .map(|h| {
                let ph: f64 = h
                    .iter()
                    .zip(&p)
                    .map(|(&hj, &pj)| if hj > 0.5 { pj } else { 1.0 - pj })
                    .product();
                let wh: f64 = h.iter().zip(&c.weights).map(|(a, b)| a * b).sum();
                let mu = c.bias[0] + wh / c.precision[0];
                ph * Normal::new(mu, (1.0 / c.precision[0]).sqrt()).unwrap().cdf(x)
            })
            .sum()
    }

    #[test]
    fn gibbs_kernel_matches_exact_transitions_and_detailed_balance() {
        let c = CrbmCond::from_parts(vec![0.3], vec![1.5], vec![0.9, -0.6]).unwrap();
        let edges: Vec<f64> = (0..=12).map(|k| -3.0 + 0.5 * k as f64).collect();
        let n = 50_000;
        for &v in &[-1.0, 0.5, 1.5] {
            let mut counts = vec![0usize; edges.len() + 1];
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..n {
                let x = gibbs_sample(&[v], &c, 1, &mut rng)[0];
                counts[edges.partition_point(|&e| e < x)] += 1;
            }
            for b in 0..=edges.len() {
                let hi = edges.get(b).map_or(1.0, |&e| kernel_cdf(&c, v, e));
                let lo = if b == 0 { 0.0 } else { kernel_cdf(&c, v, edges[b - 1]) };
                let p = hi - lo;
                let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-4);
                assert!((counts[b] as f64 / n as f64 - p).abs() < 5.0 * se, "v={v} bin {b}");
            }
        }
        // p(v) K(v'|v) = p(v') K(v|v') with p(v) ∝ exp(−F(v)).
        let density = |v: f64, x: f64| {
            let p = hidden_given_visible(&[v], &c);
            hidden_configs(2)
                .map(|h| {
                    let ph: f64 = h
                        .iter()
                        .zip(&p)
                        .map(|(&hj, &pj)| if hj > 0.5 { pj } else { 1.0 - pj })
                        .product();
                    let wh: f64 = h.iter().zip(&c.weights).map(|(a, b)| a * b).sum();
                    let mu = c.bias[0] + wh / c.precision[0];
                    let sd = (1.0 / c.precision[0]).sqrt();
                    ph * (-(x - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
                })
                .sum::<f64>()
        };
        for &(a, b) in &[(-1.0, 0.7), (0.2, 2.1), (1.3, -0.4)] {
            let lhs = (-free_energy(&[a], &c)).exp() * density(a, b);
            let rhs = (-free_energy(&[b], &c)).exp() * density(b, a);
            assert!(((lhs - rhs) / lhs).abs() < 1e-10);
        }
    }

    #[test]
    fn cd_gradient_matches_finite_differences() {
        let base = random_cond(4, 3, 17);
        let v = [0.3, -0.8, 1.2, 0.1];
        let (_, g) = cd_loss_grad(&v, &[0.0; 4], &base);
        let (_, g_fe) = {
            let mut g = CondGrad::zeros(4, 3);
            free_energy_grad(&v, &base, 1.0, &mut g);
            ((), g)
        };
        let f = |c: &CrbmCond<f64>| free_energy(&v, c);
        let h = 1e-6;
        let rebuild = |b: &[f64], pre: &[f64], w: &[f64]| CrbmCond {
            n_visible: 4,
            n_hidden: 3,
            bias: b.to_vec(),
            precision_pre: pre.to_vec(),
            precision: pre.iter().map(|&p| softplus(p) + PRECISION_FLOOR).collect(),
            weights: w.to_vec(),
        };
        for i in 0..4 {
            let mut b = base.bias.clone();
            b[i] += h;
            let up = f(&rebuild(&b, &base.precision_pre, &base.weights));
            b[i] -= 2.0 * h;
            let down = f(&rebuild(&b, &base.precision_pre, &base.weights));
            assert!(((up - down) / (2.0 * h) - g_fe.bias[i]).abs() < 1e-6);
            assert!((g_fe.bias[i] + base.precision[i] * (v[i] - base.bias[i])).abs() < 1e-12);

            let mut p = base.precision_pre.clone();
            p[i] += h;
            let up = f(&rebuild(&base.bias, &p, &base.weights));
            p[i] -= 2.0 * h;
            let down = f(&rebuild(&base.bias, &p, &base.weights));
            assert!(((up - down) / (2.0 * h) - g_fe.precision_pre[i]).abs() < 1e-6);
        }
        for k in 0..12 {
            let mut w = base.weights.clone();
            w[k] += h;
            let up = f(&rebuild(&base.bias, &base.precision_pre, &w));
            w[k] -= 2.0 * h;
            let down = f(&rebuild(&base.bias, &base.precision_pre, &w));
            assert!(((up - down) / (2.0 * h) - g_fe.weights[k]).abs() < 1e-6);
        }
        // v_model = 0 contributes nothing to the bias-side weight gradient
        assert_eq!(g.weights, g_fe.weights);
    }

    #[test]
    fn coinciding_model_sample_gives_zero_loss_and_gradient() {
        let c = random_cond(10, 16, 4);
        let v: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let (loss, g) = cd_loss_grad(&v, &v, &c);
        assert_eq!(loss, 0.0);
        assert!(g
            .bias
            .iter()
            .chain(&g.precision_pre)
            .chain(&g.weights)
            .all(|&x| x == 0.0));
    }

    #[test]
    fn cd1_recovers_generating_bias() {
        let b_star = [1.0, -0.5, 0.25];
        let l_star = [2.0f64, 1.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<Vec<f64>> = (0..4096)
            .map(|_| {
                (0..3)
                    .map(|i| b_star[i] + rng.sample::<f64, _>(StandardNormal) / l_star[i].sqrt())
                    .collect()
            })
            .collect();
        let mut nets = ConditioningNets::<f64>::init(1, 3, 2, &mut rng);
        nets.weights_net = Dense::zeros(1, 6);
        let cfg = AdamWConfig::new(0.02, &[("bias_net", 0.0), ("precision_net", 0.0), ("weights_net", 0.0)]);
        let mut state = AdamWState::new(&nets);
        let ctx = [1.0];
        for _epoch in 0..200 {
            for batch in data.chunks(256) {
                let mut grad = ConditioningNets::zeros(1, 3, 2);
                let cond = nets.condition(&ctx).unwrap();
                let mut d_cond = CondGrad::zeros(3, 2);
                for v in batch {
                    let (_, g) = cd_step(v, &cond, 1, &mut rng);
                    for (a, b) in d_cond.bias.iter_mut().zip(&g.bias) {
                        *a += b / batch.len() as f64;
                    }
                    for (a, b) in d_cond.precision_pre.iter_mut().zip(&g.precision_pre) {
                        *a += b / batch.len() as f64;
                    }
                    for (a, b) in d_cond.weights.iter_mut().zip(&g.weights) {
                        *a += b / batch.len() as f64;
                    }
                }
                let mut d_ctx = [0.0];
                d_cond.weights.iter_mut().for_each(|g| *g = 0.0);
                nets.backward(&ctx, &d_cond, &mut grad, &mut d_ctx);
                adamw_update(&mut nets, &grad, &mut state, &cfg).unwrap();
            }
        }
        let cond = nets.condition(&ctx).unwrap();
        for i in 0..3 {
            assert!((cond.bias[i] - b_star[i]).abs() < 0.05, "b[{i}] = {}", cond.bias[i]);
        }
    }
}
