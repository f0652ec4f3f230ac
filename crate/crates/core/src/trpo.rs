//! Trust-region policy optimization: GAE advantages, a value baseline, the
//! importance-weighted surrogate, Fisher-vector products, conjugate gradient
//! and a KL-constrained backtracking line search.

use serde::{Deserialize, Serialize};

use crate::envs::EpisodeRecord;
use crate::error::{DncError, Result};
use crate::nn::{dot, norm, Adam, ForwardCache, Mat, MlpParams};
use crate::policy::{mean_kl_cached, GaussianPolicy};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrpoConfig {
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub gae_lambda: f64,
    pub discount: f64,
    pub vf_iters: usize,
    pub vf_step_size: f64,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            max_kl: 0.01,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            gae_lambda: 0.97,
            discount: 0.99,
            vf_iters: 50,
            vf_step_size: 1e-3,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DncError::Config(m.to_string()));
        if !(self.max_kl > 0.0 && self.max_kl.is_finite()) {
            return fail("max_kl must be positive");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda must lie in [0, 1]");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return fail("discount must lie in (0, 1]");
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return fail("backtrack_ratio must lie in (0, 1)");
        }
        if !(self.cg_damping >= 0.0) || self.cg_iters == 0 {
            return fail("cg_damping must be non-negative and cg_iters positive");
        }
        if !(self.vf_step_size > 0.0) {
            return fail("vf_step_size must be positive");
        }
        Ok(())
    }
}

/// State-value regressor. Inputs are the state plus the elapsed fraction of
/// the horizon; outputs are de-standardized with the target statistics of
/// the most recent fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    net: MlpParams,
    horizon: usize,
    target_mean: f64,
    target_std: f64,
}

impl ValueFunction {
    pub fn init(state_dim: usize, hidden: &[usize], horizon: usize, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![state_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: MlpParams::init(&sizes, rng)?,
            horizon: horizon.max(1),
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    fn features(&self, episodes: &[EpisodeRecord], include_terminal: bool) -> Result<Mat> {
        let sdim = self.net.input_dim() - 1;
        let mut data = Vec::new();
        let mut rows = 0;
        for ep in episodes {
            let n = if include_terminal { ep.states.len() } else { ep.len() };
            for (t, s) in ep.states[..n].iter().enumerate() {
                if s.len() != sdim {
                    return Err(DncError::shape("value input", sdim, s.len()));
                }
                data.extend_from_slice(s);
                data.push(t as f64 / self.horizon as f64);
                rows += 1;
            }
        }
        Mat::from_vec(rows, sdim + 1, data)
    }

    fn predict_features(&self, x: &Mat) -> Result<Vec<f64>> {
        let out = self.net.forward_batch(x)?;
        Ok(out
            .output()
            .as_slice()
            .iter()
            .map(|v| self.target_mean + self.target_std * v)
            .collect())
    }

    /// Predicted value of state `state` visited at step `t`.
    pub fn predict(&self, state: &[f64], t: usize) -> Result<f64> {
        let mut x = state.to_vec();
        x.push(t as f64 / self.horizon as f64);
        Ok(self.target_mean + self.target_std * self.net.forward(&x)?[0])
    }

    /// Predictions for every state (including terminal ones) of each
    /// episode, one vector per episode.
    pub fn predict_episodes(&self, episodes: &[EpisodeRecord]) -> Result<Vec<Vec<f64>>> {
        let flat = self.predict_features(&self.features(episodes, true)?)?;
        let mut out = Vec::with_capacity(episodes.len());
        let mut at = 0;
        for ep in episodes {
            out.push(flat[at..at + ep.states.len()].to_vec());
            at += ep.states.len();
        }
        Ok(out)
    }

    /// Mean squared error against discounted returns-to-go.
    pub fn mse(&self, episodes: &[EpisodeRecord], discount: f64) -> Result<f64> {
        let targets = returns_to_go_all(episodes, discount);
        let pred = self.predict_features(&self.features(episodes, false)?)?;
        if targets.is_empty() {
            return Err(DncError::EmptyInput("value batch"));
        }
        Ok(pred.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / targets.len() as f64)
    }
}

/// Discounted reward-to-go for each step of one episode.
pub fn returns_to_go(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + discount * acc;
        out[t] = acc;
    }
    out
}

fn returns_to_go_all(episodes: &[EpisodeRecord], discount: f64) -> Vec<f64> {
    episodes
        .iter()
        .flat_map(|e| returns_to_go(&e.rewards, discount))
        .collect()
}

/// Regresses the value function onto discounted returns-to-go with
/// `vf_iters` full-batch Adam steps on standardized targets.
pub fn fit_value_function(vf: &ValueFunction, episodes: &[EpisodeRecord], cfg: &TrpoConfig) -> Result<ValueFunction> {
    let targets = returns_to_go_all(episodes, cfg.discount);
    if targets.is_empty() {
        return Ok(vf.clone());
    }
    let x = vf.features(episodes, false)?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    let z: Vec<f64> = targets.iter().map(|t| (t - mean) / std).collect();

    let mut params = vf.net.flatten();
    let mut adam = Adam::new(params.len(), cfg.vf_step_size);
    let mut net = vf.net.clone();
    for _ in 0..cfg.vf_iters {
        let cache = net.forward_batch(&x)?;
        let out = cache.output().as_slice();
        let resid: Vec<f64> = out.iter().zip(&z).map(|(o, t)| 2.0 * (o - t) / n).collect();
        let (grad, _) = net.backward_batch(&cache, &Mat::from_vec(z.len(), 1, resid)?, false)?;
        adam.step(&mut params, &grad);
        net = net.unflatten(&params)?;
    }
    Ok(ValueFunction {
        net,
        horizon: vf.horizon,
        target_mean: mean,
        target_std: std,
    })
}

/// Flattened, aligned training data for one policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub states: Mat,
    pub actions: Mat,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl AdvantageBatch {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

/// GAE over one episode given values for all `len + 1` states. The last step
/// is terminal, so the final value is never bootstrapped.
pub fn gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let next = if t + 1 == t_len { 0.0 } else { values[t + 1] };
        let delta = rewards[t] + discount * next - values[t];
        acc = delta + discount * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// Normalizes to mean 0 and standard deviation 1 (mean removal only when
/// the spread is degenerate).
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    for v in values.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

pub fn compute_advantages(episodes: &[EpisodeRecord], vf: &ValueFunction, cfg: &TrpoConfig) -> Result<AdvantageBatch> {
    if episodes.is_empty() {
        return Err(DncError::EmptyInput("advantage episodes"));
    }
    let values = vf.predict_episodes(episodes)?;
    let mut advantages = Vec::new();
    for (ep, v) in episodes.iter().zip(&values) {
        advantages.extend(gae(&ep.rewards, v, cfg.discount, cfg.gae_lambda));
    }
    normalize(&mut advantages);
    Ok(AdvantageBatch {
        states: crate::envs::stack_states(episodes)?,
        actions: crate::envs::stack_actions(episodes)?,
        old_log_probs: episodes.iter().flat_map(|e| e.log_probs.iter().copied()).collect(),
        advantages,
    })
}

/// A differentiable scalar objective over policies, minimized by
/// [`trust_region_step`].
pub trait Objective {
    fn value(&self, policy: &GaussianPolicy) -> Result<f64>;
    fn value_and_grad(&self, policy: &GaussianPolicy) -> Result<(f64, Vec<f64>)>;
}

/// `-mean(A * exp(log pi - old_log_prob))` and its exact gradient.
pub fn surrogate_loss(policy: &GaussianPolicy, batch: &AdvantageBatch) -> Result<(f64, Vec<f64>)> {
    let cache = policy.forward_batch(&batch.states)?;
    surrogate_cached(policy, &cache, batch, true).map(|(l, g)| (l, g.expect("requested")))
}

pub(crate) fn surrogate_cached(
    policy: &GaussianPolicy,
    cache: &ForwardCache,
    batch: &AdvantageBatch,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = batch.len();
    if n == 0 {
        return Err(DncError::EmptyInput("surrogate batch"));
    }
    if batch.old_log_probs.len() != n {
        return Err(DncError::shape("old log probs", n, batch.old_log_probs.len()));
    }
    let lp = policy.log_probs(cache, &batch.actions)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut weights = vec![0.0; n];
    for r in 0..n {
        let ratio = (lp[r] - batch.old_log_probs[r]).exp();
        loss -= batch.advantages[r] * ratio;
        weights[r] = -batch.advantages[r] * ratio * inv_n;
    }
    let grad = if want_grad {
        Some(policy.weighted_log_prob_grad(cache, &batch.actions, &weights)?)
    } else {
        None
    };
    Ok((loss * inv_n, grad))
}

/// The surrogate as an [`Objective`].
pub struct Surrogate<'a>(pub &'a AdvantageBatch);

impl Objective for Surrogate<'_> {
    fn value(&self, policy: &GaussianPolicy) -> Result<f64> {
        let cache = policy.forward_batch(&self.0.states)?;
        Ok(surrogate_cached(policy, &cache, self.0, false)?.0)
    }

    fn value_and_grad(&self, policy: &GaussianPolicy) -> Result<(f64, Vec<f64>)> {
        surrogate_loss(policy, self.0)
    }
}

/// Damped Fisher operator of `policy` on a state batch: the Hessian of the
/// mean `KL(policy || policy')` with respect to `policy'` at `policy' =
/// policy`, plus `damping * I`. For a diagonal Gaussian this Hessian is the
/// exact Gauss-Newton form `J' diag(1/sigma^2) J / N` on the mean network
/// and `2 I` on the log standard deviations.
pub struct FisherOperator<'a> {
    policy: &'a GaussianPolicy,
    cache: ForwardCache,
    inv_var: Vec<f64>,
    damping: f64,
}

impl<'a> FisherOperator<'a> {
    pub fn new(policy: &'a GaussianPolicy, states: &Mat, damping: f64) -> Result<Self> {
        if states.rows() == 0 {
            return Err(DncError::EmptyInput("Fisher state batch"));
        }
        Ok(Self {
            policy,
            cache: policy.forward_batch(states)?,
            inv_var: policy.log_std().iter().map(|ls| (-2.0 * ls).exp()).collect(),
            damping,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let p = self.policy.param_count();
        if v.len() != p {
            return Err(DncError::Input(format!(
                "Fisher vector has length {}, expected {p}",
                v.len()
            )));
        }
        let net_len = self.policy.mean_net().param_count();
        let (v_net, v_ls) = v.split_at(net_len);
        let n = self.cache.batch_size();
        let mut jv = self.policy.mean_net().jvp_batch(&self.cache, v_net)?;
        let adim = self.inv_var.len();
        for (i, x) in jv.as_mut_slice().iter_mut().enumerate() {
            *x *= self.inv_var[i % adim] / n as f64;
        }
        let (mut out, _) = self.policy.mean_net().backward_batch(&self.cache, &jv, false)?;
        out.extend(v_ls.iter().map(|x| 2.0 * x));
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        Ok(out)
    }
}

pub fn fisher_vector_product(policy: &GaussianPolicy, states: &Mat, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    FisherOperator::new(policy, states, damping)?.apply(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    /// `|b - Hx| / |b|` tracked by the recurrence (0 when `b = 0`).
    pub residual: f64,
    pub iterations: usize,
}

pub const CG_TOLERANCE: f64 = 1e-6;

/// Conjugate gradient for `H x = b` with `H` given as an operator.
pub fn conjugate_gradient<F>(mut op: F, b: &[f64], iters: usize) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(CgResult {
            x,
            residual: 0.0,
            iterations: 0,
        });
    }
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    for _ in 0..iters {
        let hp = op(&p)?;
        let php = dot(&p, &hp);
        if !php.is_finite() || php <= 0.0 {
            return Err(DncError::Numerical(format!("conjugate gradient curvature {php}")));
        }
        let step = rr / php;
        for i in 0..x.len() {
            x[i] += step * p[i];
            r[i] -= step * hp[i];
        }
        iterations += 1;
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(DncError::Numerical("non-finite conjugate gradient residual".into()));
        }
        if rr_new.sqrt() / b_norm < CG_TOLERANCE {
            rr = rr_new;
            break;
        }
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok(CgResult {
        x,
        residual: rr.sqrt() / b_norm,
        iterations,
    })
}

/// Per-update diagnostics, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrpoDiagnostics {
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub mean_kl: f64,
    pub cg_residual: f64,
    pub backtracks: usize,
    pub accepted: bool,
}

impl TrpoDiagnostics {
    pub const COLUMNS: [&'static str; 6] = [
        "surrogate_before",
        "surrogate_after",
        "mean_kl",
        "cg_residual",
        "backtracks",
        "accepted",
    ];

    fn rejected(before: f64, cg_residual: f64, backtracks: usize) -> Self {
        Self {
            surrogate_before: before,
            surrogate_after: before,
            mean_kl: 0.0,
            cg_residual,
            backtracks,
            accepted: false,
        }
    }
}

/// Natural-gradient step on `objective` constrained to mean
/// `KL(old || new) <= max_kl` over `states`. Numerical failures and
/// exhausted line searches return the old policy with `accepted = false`.
pub fn trust_region_step(
    policy: &GaussianPolicy,
    objective: &dyn Objective,
    states: &Mat,
    cfg: &TrpoConfig,
) -> Result<(GaussianPolicy, TrpoDiagnostics)> {
    let (before, grad) = objective.value_and_grad(policy)?;
    if !before.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok((policy.clone(), TrpoDiagnostics::rejected(before, f64::NAN, 0)));
    }
    let fisher = FisherOperator::new(policy, states, cfg.cg_damping)?;
    let neg_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
    let cg = match conjugate_gradient(|v| fisher.apply(v), &neg_grad, cfg.cg_iters) {
        Ok(cg) => cg,
        Err(DncError::Numerical(_)) => return Ok((policy.clone(), TrpoDiagnostics::rejected(before, f64::NAN, 0))),
        Err(e) => return Err(e),
    };
    let shs = dot(&cg.x, &fisher.apply(&cg.x)?);
    if !(shs.is_finite() && shs > 0.0) {
        return Ok((policy.clone(), TrpoDiagnostics::rejected(before, cg.residual, 0)));
    }
    let scale = (2.0 * cfg.max_kl / shs).sqrt();
    let theta = policy.flat_params();
    let old_cache = policy.forward_batch(states)?;
    let mut frac = 1.0;
    for j in 0..=cfg.max_backtracks {
        let cand: Vec<f64> = theta.iter().zip(&cg.x).map(|(t, x)| t + frac * scale * x).collect();
        let new_policy = policy.with_flat_params(&cand)?;
        let new_cache = new_policy.forward_batch(states)?;
        let kl = mean_kl_cached(policy, &old_cache, &new_policy, &new_cache, false, false)?.mean_kl;
        let after = objective.value(&new_policy)?;
        if kl.is_finite() && after.is_finite() && kl <= cfg.max_kl && after < before {
            return Ok((
                new_policy,
                TrpoDiagnostics {
                    surrogate_before: before,
                    surrogate_after: after,
                    mean_kl: kl,
                    cg_residual: cg.residual,
                    backtracks: j,
                    accepted: true,
                },
            ));
        }
        frac *= cfg.backtrack_ratio;
    }
    Ok((
        policy.clone(),
        TrpoDiagnostics::rejected(before, cg.residual, cfg.max_backtracks + 1),
    ))
}

/// One TRPO update on the surrogate of `batch`.
pub fn trpo_step(
    policy: &GaussianPolicy,
    batch: &AdvantageBatch,
    cfg: &TrpoConfig,
) -> Result<(GaussianPolicy, TrpoDiagnostics)> {
    trust_region_step(policy, &Surrogate(batch), &batch.states, cfg)
}
