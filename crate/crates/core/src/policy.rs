//! Diagonal-Gaussian policies `N(mu(s), diag(exp(log_std))^2)` with a
//! state-independent log standard deviation.
//!
//! The flat parameter vector of a policy is the mean network's flat vector
//! followed by `log_std`.

use std::f64::consts::PI;

use crate::error::{DncError, Result};
use crate::nn::{ForwardCache, Mat, MlpParams};
use crate::rng::Rng;

/// Floor applied to every log standard deviation.
pub const LOG_STD_MIN: f64 = -20.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    mean_net: MlpParams,
    log_std: Vec<f64>,
}

/// An action drawn from a policy together with its log density.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Log density of `action` under `N(mean, diag(exp(log_std))^2)`.
pub fn gaussian_log_density(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((m, ls), a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) * (-ls).exp();
        acc += z * z + 2.0 * ls + LN_2PI;
    }
    -0.5 * acc
}

/// Closed-form KL between two diagonal Gaussians.
pub fn gaussian_kl(mean_p: &[f64], log_std_p: &[f64], mean_q: &[f64], log_std_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mean_p.len() {
        let ratio = (2.0 * (log_std_p[i] - log_std_q[i])).exp();
        let d = mean_p[i] - mean_q[i];
        kl += log_std_q[i] - log_std_p[i] + 0.5 * (ratio + d * d * (-2.0 * log_std_q[i]).exp()) - 0.5;
    }
    kl
}

impl GaussianPolicy {
    /// Wraps a mean network with unit covariance.
    pub fn new(mean_net: MlpParams) -> Self {
        let log_std = vec![0.0; mean_net.output_dim()];
        Self { mean_net, log_std }
    }

    /// Randomly initialized policy with hidden layers `hidden`.
    pub fn init(state_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(state_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Ok(Self::new(MlpParams::init(&sizes, rng)?))
    }

    pub fn from_parts(mean_net: MlpParams, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != mean_net.output_dim() {
            return Err(DncError::shape("log_std", mean_net.output_dim(), log_std.len()));
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(DncError::Numerical("non-finite log_std".into()));
        }
        let log_std = log_std.into_iter().map(|v| v.max(LOG_STD_MIN)).collect();
        Ok(Self { mean_net, log_std })
    }

    pub fn mean_net(&self) -> &MlpParams {
        &self.mean_net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn state_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mean_net.param_count() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = self.mean_net.flatten();
        flat.extend_from_slice(&self.log_std);
        flat
    }

    /// Same architecture, parameters taken from `flat`.
    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(DncError::shape("policy parameters", self.param_count(), flat.len()));
        }
        let split = self.mean_net.param_count();
        let mean_net = self.mean_net.unflatten(&flat[..split])?;
        Self::from_parts(mean_net, flat[split..].to_vec())
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.mean_net.forward(state)
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    pub fn sample_action(&self, state: &[f64], rng: &mut Rng) -> Result<ActionSample> {
        let mean = self.mean(state)?;
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.normal())
            .collect();
        let log_prob = gaussian_log_density(&mean, &self.log_std, &action);
        Ok(ActionSample { action, log_prob })
    }

    pub fn log_density(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(DncError::shape("action", self.action_dim(), action.len()));
        }
        let mean = self.mean(state)?;
        Ok(gaussian_log_density(&mean, &self.log_std, action))
    }

    /// Differential entropy (state independent).
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
    }

    pub fn forward_batch(&self, states: &Mat) -> Result<ForwardCache> {
        self.mean_net.forward_batch(states)
    }

    /// Log densities of `actions` row by row, using means from `cache`.
    pub fn log_probs(&self, cache: &ForwardCache, actions: &Mat) -> Result<Vec<f64>> {
        let means = cache.output();
        if actions.rows() != means.rows() {
            return Err(DncError::shape("action rows", means.rows(), actions.rows()));
        }
        if actions.cols() != self.action_dim() {
            return Err(DncError::shape("action cols", self.action_dim(), actions.cols()));
        }
        Ok((0..means.rows())
            .map(|r| gaussian_log_density(means.row(r), &self.log_std, actions.row(r)))
            .collect())
    }

    /// Chains output-space gradients (per-row mean gradients and a summed
    /// log_std gradient) back to the flat parameter vector.
    pub fn backprop(&self, cache: &ForwardCache, d_mean: &Mat, d_log_std: &[f64]) -> Result<Vec<f64>> {
        if d_log_std.len() != self.log_std.len() {
            return Err(DncError::shape("log_std gradient", self.log_std.len(), d_log_std.len()));
        }
        let (mut grad, _) = self.mean_net.backward_batch(cache, d_mean, false)?;
        grad.extend_from_slice(d_log_std);
        Ok(grad)
    }

    /// Gradient of `sum_r weights[r] * log pi(actions[r] | states[r])`.
    pub fn weighted_log_prob_grad(&self, cache: &ForwardCache, actions: &Mat, weights: &[f64]) -> Result<Vec<f64>> {
        let means = cache.output();
        let n = means.rows();
        if weights.len() != n {
            return Err(DncError::shape("weights", n, weights.len()));
        }
        let inv_var: Vec<f64> = self.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut d_mean = Mat::zeros(n, self.action_dim());
        let mut d_log_std = vec![0.0; self.action_dim()];
        for r in 0..n {
            let w = weights[r];
            let (m, a) = (means.row(r), actions.row(r));
            let dm = d_mean.row_mut(r);
            for k in 0..m.len() {
                let diff = a[k] - m[k];
                dm[k] = w * diff * inv_var[k];
                d_log_std[k] += w * (diff * diff * inv_var[k] - 1.0);
            }
        }
        self.backprop(cache, &d_mean, &d_log_std)
    }
}

/// KL(p || q) at a single state.
pub fn kl_divergence(p: &GaussianPolicy, q: &GaussianPolicy, state: &[f64]) -> Result<f64> {
    if p.action_dim() != q.action_dim() {
        return Err(DncError::shape("action dimension", p.action_dim(), q.action_dim()));
    }
    let mp = p.mean(state)?;
    let mq = q.mean(state)?;
    Ok(gaussian_kl(&mp, p.log_std(), &mq, q.log_std()))
}

/// Mean KL over a batch of states with optional gradients with respect to
/// either argument.
#[derive(Debug, Clone)]
pub struct KlGrads {
    pub mean_kl: f64,
    pub grad_p: Option<Vec<f64>>,
    pub grad_q: Option<Vec<f64>>,
}

/// Mean over `states` of KL(p || q), with gradients for the requested sides.
pub fn mean_kl_with_grads(
    p: &GaussianPolicy,
    q: &GaussianPolicy,
    states: &Mat,
    want_p: bool,
    want_q: bool,
) -> Result<KlGrads> {
    let (cp, cq) = (p.forward_batch(states)?, q.forward_batch(states)?);
    mean_kl_cached(p, &cp, q, &cq, want_p, want_q)
}

/// As [`mean_kl_with_grads`] with precomputed forward passes over the same
/// states.
pub fn mean_kl_cached(
    p: &GaussianPolicy,
    cp: &ForwardCache,
    q: &GaussianPolicy,
    cq: &ForwardCache,
    want_p: bool,
    want_q: bool,
) -> Result<KlGrads> {
    if p.action_dim() != q.action_dim() {
        return Err(DncError::shape("action dimension", p.action_dim(), q.action_dim()));
    }
    let n = cp.batch_size();
    if n == 0 {
        return Err(DncError::EmptyInput("KL state batch"));
    }
    if cq.batch_size() != n {
        return Err(DncError::shape("KL batch", n, cq.batch_size()));
    }
    let adim = p.action_dim();
    let (mp, mq) = (cp.output(), cq.output());
    let ratio: Vec<f64> = p
        .log_std()
        .iter()
        .zip(q.log_std())
        .map(|(a, b)| (2.0 * (a - b)).exp())
        .collect();
    let inv_var_q: Vec<f64> = q.log_std().iter().map(|ls| (-2.0 * ls).exp()).collect();
    let scale = 1.0 / n as f64;

    let mut total = 0.0;
    let mut dmp = want_p.then(|| Mat::zeros(n, adim));
    let mut dmq = want_q.then(|| Mat::zeros(n, adim));
    let mut dls_p = vec![0.0; adim];
    let mut dls_q = vec![0.0; adim];
    for r in 0..n {
        let (up, uq) = (mp.row(r), mq.row(r));
        total += gaussian_kl(up, p.log_std(), uq, q.log_std());
        for k in 0..adim {
            let d = up[k] - uq[k];
            let g = d * inv_var_q[k] * scale;
            if let Some(m) = dmp.as_mut() {
                m.set(r, k, g);
            }
            if let Some(m) = dmq.as_mut() {
                m.set(r, k, -g);
            }
            dls_p[k] += (ratio[k] - 1.0) * scale;
            dls_q[k] += (1.0 - ratio[k] - d * d * inv_var_q[k]) * scale;
        }
    }
    let grad_p = match dmp {
        Some(m) => Some(p.backprop(cp, &m, &dls_p)?),
        None => None,
    };
    let grad_q = match dmq {
        Some(m) => Some(q.backprop(cq, &m, &dls_q)?),
        None => None,
    };
    Ok(KlGrads {
        mean_kl: total * scale,
        grad_p,
        grad_q,
    })
}

pub fn mean_kl(p: &GaussianPolicy, q: &GaussianPolicy, states: &Mat) -> Result<f64> {
    Ok(mean_kl_with_grads(p, q, states, false, false)?.mean_kl)
}

/// Mean KL(p || q) over `states` and its gradient with respect to `p`'s
/// parameters, `q` held fixed.
pub fn kl_and_grad(p: &GaussianPolicy, q: &GaussianPolicy, states: &Mat) -> Result<(f64, Vec<f64>)> {
    let r = mean_kl_with_grads(p, q, states, true, false)?;
    Ok((r.mean_kl, r.grad_p.expect("requested")))
}

/// Both sides of the mixture KL bound, estimated on a common set of states.
#[derive(Debug, Clone, Copy)]
pub struct MixtureKlBound {
    /// Monte-Carlo estimate of E[KL(pi_w || pi_mix)] with w ~ weights.
    pub lhs: f64,
    /// Standard error of `lhs` over states.
    pub lhs_se: f64,
    /// Sum_{i,j} w_i w_j KL(pi_i || pi_j), analytic per state, averaged.
    pub rhs: f64,
}

/// Checks `E[KL(pi || pi_mix)] <= sum_ij w_i w_j KL(pi_i || pi_j)` where
/// `pi_mix = sum_j w_j pi_j` and the left side draws a component `i ~ w`,
/// then `a ~ pi_i(.|s)`.
pub fn mixture_kl_bound_check<F>(
    policies: &[GaussianPolicy],
    weights: &[f64],
    n_states: usize,
    actions_per_state: usize,
    mut sample_state: F,
    rng: &mut Rng,
) -> Result<MixtureKlBound>
where
    F: FnMut(&mut Rng) -> Vec<f64>,
{
    if policies.is_empty() {
        return Err(DncError::EmptyInput("mixture policies"));
    }
    if weights.len() != policies.len() {
        return Err(DncError::shape("mixture weights", policies.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(DncError::Config(format!(
            "mixture weights must be a probability vector, got {weights:?}"
        )));
    }
    if n_states == 0 || actions_per_state == 0 {
        return Err(DncError::EmptyInput("mixture sample counts"));
    }
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut per_state = Vec::with_capacity(n_states);
    let mut rhs = 0.0;
    for _ in 0..n_states {
        let s = sample_state(rng);
        let means = policies.iter().map(|p| p.mean(&s)).collect::<Result<Vec<_>>>()?;
        for (i, pi) in policies.iter().enumerate() {
            for (j, pj) in policies.iter().enumerate() {
                rhs += weights[i] * weights[j] * gaussian_kl(&means[i], pi.log_std(), &means[j], pj.log_std());
            }
        }
        let mut acc = 0.0;
        for _ in 0..actions_per_state {
            let i = rng.categorical(weights).expect("validated weights");
            let a: Vec<f64> = means[i]
                .iter()
                .zip(policies[i].log_std())
                .map(|(m, ls)| m + ls.exp() * rng.normal())
                .collect();
            let log_pi = gaussian_log_density(&means[i], policies[i].log_std(), &a);
            let terms: Vec<f64> = policies
                .iter()
                .enumerate()
                .filter(|(j, _)| weights[*j] > 0.0)
                .map(|(j, pj)| log_w[j] + gaussian_log_density(&means[j], pj.log_std(), &a))
                .collect();
            acc += log_pi - log_sum_exp(&terms);
        }
        per_state.push(acc / actions_per_state as f64);
    }
    let n = per_state.len() as f64;
    let lhs = per_state.iter().sum::<f64>() / n;
    let var = if per_state.len() > 1 {
        per_state.iter().map(|v| (v - lhs).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(MixtureKlBound {
        lhs,
        lhs_se: (var / n).sqrt(),
        rhs: rhs / n,
    })
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Constant used by tests and docs: log density of a standard normal at 0.
pub fn standard_normal_log_density_at_mode() -> f64 {
    -0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mat;

    fn linear_1d(w: f64, b: f64, log_std: f64) -> GaussianPolicy {
        let net = MlpParams::from_parts(&[1, 1], vec![Mat::from_vec(1, 1, vec![w]).unwrap()], vec![vec![b]]).unwrap();
        GaussianPolicy::from_parts(net, vec![log_std]).unwrap()
    }

    fn random_policy(rng: &mut Rng, sdim: usize, adim: usize) -> GaussianPolicy {
        let p = GaussianPolicy::init(sdim, &[5], adim, rng).unwrap();
        let ls: Vec<f64> = (0..adim).map(|_| rng.uniform_range(-0.7, 0.5)).collect();
        GaussianPolicy::from_parts(p.mean_net().clone(), ls).unwrap()
    }

    #[test]
    fn starts_with_unit_covariance() {
        let p = GaussianPolicy::init(3, &[4], 2, &mut Rng::new(0)).unwrap();
        assert_eq!(p.log_std(), &[0.0, 0.0]);
        assert_eq!(p.param_count(), 3 * 4 + 4 + 4 * 2 + 2 + 2);
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = linear_1d(0.0, 0.0, 0.0);
        let ld = p.log_density(&[0.7], &[0.0]).unwrap();
        assert!((ld - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert!((ld - standard_normal_log_density_at_mode()).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one() {
        // Composite Simpson on [-8, 8].
        let p = linear_1d(0.0, 0.0, 0.0);
        let n = 20_000;
        let h = 16.0 / n as f64;
        let f = |x: f64| p.log_density(&[0.0], &[x]).unwrap().exp();
        let mut acc = f(-8.0) + f(8.0);
        for k in 1..n {
            let x = -8.0 + k as f64 * h;
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn translation_invariance() {
        let a = linear_1d(0.0, 0.5, 0.3);
        let b = linear_1d(0.0, 2.5, 0.3);
        let la = a.log_density(&[0.0], &[1.1]).unwrap();
        let lb = b.log_density(&[0.0], &[3.1]).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn near_deterministic_sample() {
        let p = linear_1d(1.0, 0.5, -20.0);
        let s = p.sample_action(&[2.0], &mut Rng::new(1)).unwrap();
        assert!((s.action[0] - 2.5).abs() < 1e-6);
        assert!(s.log_prob.is_finite());
    }

    #[test]
    fn log_std_is_floored() {
        let p = linear_1d(1.0, 0.0, -50.0);
        assert_eq!(p.log_std(), &[LOG_STD_MIN]);
        let q = p.with_flat_params(&[1.0, 0.0, -30.0]).unwrap();
        assert_eq!(q.log_std(), &[LOG_STD_MIN]);
    }

    #[test]
    fn sample_log_prob_matches_density_exactly() {
        let mut rng = Rng::new(17);
        let p = random_policy(&mut rng, 3, 2);
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let smp = p.sample_action(&s, &mut rng).unwrap();
            assert_eq!(
                smp.log_prob.to_bits(),
                p.log_density(&s, &smp.action).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = random_policy(&mut Rng::new(2), 2, 2);
        let a = p.sample_action(&[0.1, 0.2], &mut Rng::new(44)).unwrap();
        let b = p.sample_action(&[0.1, 0.2], &mut Rng::new(44)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_network_sample_moments() {
        let p = GaussianPolicy::new(MlpParams::zeros(&[2, 1]).unwrap());
        let mut rng = Rng::new(123);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| p.sample_action(&[1.0, 1.0], &mut rng).unwrap().action[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (1.0 / n as f64).sqrt();
        let se_var = (2.0 / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 5.0 * se_mean);
        assert!((var - 1.0).abs() < 5.0 * se_var);
    }

    #[test]
    fn kl_closed_form_cases() {
        let p = linear_1d(0.0, 2.0, 0.0);
        let q = linear_1d(0.0, 0.0, 0.0);
        assert!((kl_divergence(&p, &q, &[0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p, &[0.3]).unwrap(), 0.0);
    }

    #[test]
    fn kl_identity_gives_zero_gradient() {
        let mut rng = Rng::new(8);
        let p = random_policy(&mut rng, 3, 2);
        let states = Mat::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 2.0]]).unwrap();
        let (kl, g) = kl_and_grad(&p, &p, &states).unwrap();
        assert_eq!(kl, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kl_gradient_hand_derived_1d() {
        // p: mu = w x + b, log_std s. q: mu = 0.5 x - 1, log_std 0.2.
        let (w, b, s, x) = (1.3, 0.4, -0.1, 0.8);
        let p = linear_1d(w, b, s);
        let q = linear_1d(0.5, -1.0, 0.2);
        let states = Mat::from_vec(1, 1, vec![x]).unwrap();
        let (_, g) = kl_and_grad(&p, &q, &states).unwrap();
        let d = (w * x + b) - (0.5 * x - 1.0);
        let inv_vq = (-2.0f64 * 0.2).exp();
        let expected = [d * inv_vq * x, d * inv_vq, -1.0 + (2.0 * s).exp() * inv_vq];
        for (a, e) in g.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn kl_empty_batch_is_error() {
        let p = linear_1d(1.0, 0.0, 0.0);
        let empty = Mat::zeros(0, 1);
        assert!(matches!(kl_and_grad(&p, &p, &empty), Err(DncError::EmptyInput(_))));
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = Rng::new(31);
        for _ in 0..100 {
            let p = random_policy(&mut rng, 2, 3);
            let q = random_policy(&mut rng, 2, 3);
            let s = [rng.normal(), rng.normal()];
            assert!(kl_divergence(&p, &q, &s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn entropy_of_standard_normal() {
        let p = linear_1d(0.0, 0.0, 0.0);
        assert!((p.entropy() - 0.5 * (2.0 * PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_bound_degenerate_cases() {
        let mut rng = Rng::new(3);
        let p = random_policy(&mut rng, 2, 1);
        let single = mixture_kl_bound_check(
            std::slice::from_ref(&p),
            &[1.0],
            20,
            10,
            |r| vec![r.normal(), r.normal()],
            &mut rng,
        )
        .unwrap();
        assert!(single.lhs.abs() < 1e-12 && single.rhs == 0.0);
        let same = mixture_kl_bound_check(
            &[p.clone(), p.clone()],
            &[0.3, 0.7],
            20,
            10,
            |r| vec![r.normal(), r.normal()],
            &mut rng,
        )
        .unwrap();
        assert!(same.lhs.abs() < 1e-12 && same.rhs == 0.0);
        let bad = mixture_kl_bound_check(
            &[p.clone(), p],
            &[0.3, 0.6],
            5,
            5,
            |r| vec![r.normal(), r.normal()],
            &mut rng,
        );
        assert!(matches!(bad, Err(DncError::Config(_))));
    }
}
