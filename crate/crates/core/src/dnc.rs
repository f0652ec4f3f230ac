//! Divide-and-conquer training: one local policy per context, coupled by
//! pairwise KL penalties, periodically distilled into a global policy.
//!
//! The trainer also runs the comparison variants:
//!
//! * `dnc`: pairwise penalty, distill and reset every `distill_period`.
//! * `centralized`: penalty towards a central policy that is refit every
//!   iteration, plus the periodic distill and reset.
//! * `distral`: the same central penalty, but locals are never reset and
//!   there is no periodic distill.
//! * `unconstrained`: no penalty; distill and reset as `dnc`.
//! * `trpo_monolithic`: one policy on the whole task with `n * B` steps per
//!   iteration.
//! * `dnc_no_distill`: `dnc` without distillation, evaluated as an oracle
//!   ensemble.

use std::cell::Cell;
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{
    collect_trajectories, episode_stats, evaluate_policy, rollout, ActionMode, Env, EpisodeRecord, EpisodeStats,
};
use crate::error::{DncError, Result};
use crate::metrics::{MetricsRow, Scope};
use crate::nn::{Adam, ForwardCache, Mat};
use crate::partition::Partition;
use crate::policy::{mean_kl, mean_kl_cached, GaussianPolicy};
use crate::rng::{derive_seed, Rng};
use crate::trpo::{
    compute_advantages, fit_value_function, surrogate_cached, trpo_step, trust_region_step, AdvantageBatch, Objective,
    TrpoConfig, TrpoDiagnostics, ValueFunction,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dnc,
    Centralized,
    Distral,
    Unconstrained,
    TrpoMonolithic,
    DncNoDistill,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Dnc,
        Variant::Centralized,
        Variant::Distral,
        Variant::Unconstrained,
        Variant::TrpoMonolithic,
        Variant::DncNoDistill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dnc => "dnc",
            Variant::Centralized => "centralized",
            Variant::Distral => "distral",
            Variant::Unconstrained => "unconstrained",
            Variant::TrpoMonolithic => "trpo_monolithic",
            Variant::DncNoDistill => "dnc_no_distill",
        }
    }

    /// Runs the periodic distill-and-reset.
    pub fn distills(self) -> bool {
        matches!(self, Variant::Dnc | Variant::Centralized | Variant::Unconstrained)
    }

    /// Refits the central policy by supervised learning every iteration.
    pub fn refits_central(self) -> bool {
        matches!(self, Variant::Centralized | Variant::Distral)
    }

    pub fn is_ensemble(self) -> bool {
        self != Variant::TrpoMonolithic
    }

    /// Whether the final artifact is the global policy (otherwise the
    /// oracle-selected local ensemble).
    pub fn has_global(self) -> bool {
        self != Variant::DncNoDistill
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = DncError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DncError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DncConfig {
    pub n_contexts: usize,
    pub alpha: f64,
    pub distill_period: usize,
    pub per_context_batch: usize,
    pub iterations: usize,
    pub variant: Variant,
    pub distill_epochs: usize,
    pub distill_step_size: f64,
    /// Minibatch size for distillation; 0 means full batch.
    pub distill_batch_size: usize,
    pub distill_max_per_context: usize,
    pub central_refit_epochs: usize,
    pub partition_samples: usize,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
}

impl Default for DncConfig {
    fn default() -> Self {
        Self {
            n_contexts: 4,
            alpha: 1.0,
            distill_period: 25,
            per_context_batch: 2000,
            iterations: 300,
            variant: Variant::Dnc,
            distill_epochs: 10,
            distill_step_size: 1e-3,
            distill_batch_size: 256,
            distill_max_per_context: 50_000,
            central_refit_epochs: 5,
            partition_samples: 10_000,
            policy_hidden: vec![64, 64],
            value_hidden: vec![64, 64],
        }
    }
}

impl DncConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DncError::Config(m));
        if self.n_contexts == 0 {
            return fail("n_contexts must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.distill_period == 0 {
            return fail("distill_period must be at least 1".into());
        }
        if self.per_context_batch == 0 || self.iterations == 0 {
            return fail("per_context_batch and iterations must be positive".into());
        }
        if !(self.distill_step_size > 0.0) {
            return fail("distill_step_size must be positive".into());
        }
        if self.distill_max_per_context == 0 {
            return fail("distill_max_per_context must be positive".into());
        }
        if self.variant.is_ensemble() && self.partition_samples < 10 * self.n_contexts {
            return fail(format!("partition_samples must be at least {}", 10 * self.n_contexts));
        }
        Ok(())
    }

    /// Timesteps each policy collects per iteration.
    pub fn batch_per_policy(&self) -> usize {
        if self.variant.is_ensemble() {
            self.per_context_batch
        } else {
            self.per_context_batch * self.n_contexts
        }
    }
}

/// Training state shared by all variants. The monolithic variant keeps one
/// local policy that is also the global one.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub local_policies: Vec<GaussianPolicy>,
    pub global_policy: GaussianPolicy,
    pub partition: Partition,
    pub value_fns: Vec<ValueFunction>,
    pub iteration: usize,
}

/// Pairwise `E_{data i}[KL(pi_i || pi_j)]` after an update round.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub pairwise_kl: Vec<Vec<f64>>,
    pub weighted_penalty_total: f64,
}

impl PenaltyReport {
    pub fn compute(policies: &[GaussianPolicy], states: &[&Mat], rho: &[f64]) -> Result<Self> {
        let n = policies.len();
        let mut pairwise_kl = vec![vec![0.0; n]; n];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let kl = mean_kl(&policies[i], &policies[j], states[i])?;
                pairwise_kl[i][j] = kl;
                total += rho[i] * rho[j] * kl;
            }
        }
        Ok(Self {
            pairwise_kl,
            weighted_penalty_total: total,
        })
    }

    /// `sum_j rho_j KL_ij`, the penalty row of context `i`.
    pub fn row_penalty(&self, i: usize, rho: &[f64]) -> f64 {
        self.pairwise_kl[i].iter().zip(rho).map(|(k, r)| k * r).sum()
    }
}

enum PenaltyTarget<'a> {
    None,
    Pairwise {
        peers: &'a [GaussianPolicy],
        /// `pi_j` on batch `i` states.
        peer_on_own: Vec<Option<ForwardCache>>,
        /// `pi_j` on batch `j` states.
        peer_on_theirs: Vec<Option<ForwardCache>>,
    },
    Central {
        center: &'a GaussianPolicy,
        center_on_own: ForwardCache,
    },
}

/// Penalized local objective of context `i`: the surrogate on batch `i`
/// plus the variant's KL penalty.
pub struct LocalObjective<'a> {
    i: usize,
    alpha: f64,
    rho: &'a [f64],
    batches: &'a [AdvantageBatch],
    target: PenaltyTarget<'a>,
    terms: Cell<usize>,
}

impl<'a> LocalObjective<'a> {
    fn check(i: usize, rho: &[f64], batches: &[AdvantageBatch], n: usize) -> Result<()> {
        if batches.len() != n {
            return Err(DncError::Staleness(format!(
                "expected {n} context batches, found {}",
                batches.len()
            )));
        }
        if rho.len() != n || i >= n {
            return Err(DncError::Input(format!(
                "context {i} with {} weights for {n} contexts",
                rho.len()
            )));
        }
        Ok(())
    }

    /// Pairwise penalty against `peers`; `peers[i]` itself is ignored in
    /// favor of the policy being evaluated.
    pub fn pairwise(
        i: usize,
        peers: &'a [GaussianPolicy],
        rho: &'a [f64],
        batches: &'a [AdvantageBatch],
        alpha: f64,
    ) -> Result<Self> {
        Self::check(i, rho, batches, peers.len())?;
        let mut peer_on_own = Vec::with_capacity(peers.len());
        let mut peer_on_theirs = Vec::with_capacity(peers.len());
        for (j, p) in peers.iter().enumerate() {
            if j == i {
                peer_on_own.push(None);
                peer_on_theirs.push(None);
            } else {
                peer_on_own.push(Some(p.forward_batch(&batches[i].states)?));
                peer_on_theirs.push(Some(p.forward_batch(&batches[j].states)?));
            }
        }
        Ok(Self {
            i,
            alpha,
            rho,
            batches,
            target: PenaltyTarget::Pairwise {
                peers,
                peer_on_own,
                peer_on_theirs,
            },
            terms: Cell::new(0),
        })
    }

    pub fn central(
        i: usize,
        center: &'a GaussianPolicy,
        rho: &'a [f64],
        batches: &'a [AdvantageBatch],
        alpha: f64,
    ) -> Result<Self> {
        Self::check(i, rho, batches, rho.len())?;
        Ok(Self {
            i,
            alpha,
            rho,
            batches,
            target: PenaltyTarget::Central {
                center,
                center_on_own: center.forward_batch(&batches[i].states)?,
            },
            terms: Cell::new(0),
        })
    }

    pub fn unpenalized(i: usize, rho: &'a [f64], batches: &'a [AdvantageBatch]) -> Result<Self> {
        Self::check(i, rho, batches, rho.len())?;
        Ok(Self {
            i,
            alpha: 0.0,
            rho,
            batches,
            target: PenaltyTarget::None,
            terms: Cell::new(0),
        })
    }

    /// KL penalty terms evaluated by `value_and_grad` so far.
    pub fn terms_evaluated(&self) -> usize {
        self.terms.get()
    }

    /// The penalty at `policy` and, optionally, its gradient.
    pub fn penalty(
        &self,
        policy: &GaussianPolicy,
        own: &ForwardCache,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let mut grad = want_grad.then(|| vec![0.0; policy.param_count()]);
        let mut add = |g: Option<Vec<f64>>, c: f64| {
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += c * v;
                }
            }
        };
        let i = self.i;
        let mut total = 0.0;
        match &self.target {
            PenaltyTarget::None => {}
            PenaltyTarget::Central { center, center_on_own } => {
                let c = self.alpha * self.rho[i];
                let r = mean_kl_cached(policy, own, center, center_on_own, want_grad, false)?;
                total += c * r.mean_kl;
                add(r.grad_p, c);
            }
            PenaltyTarget::Pairwise {
                peers,
                peer_on_own,
                peer_on_theirs,
            } => {
                for j in 0..peers.len() {
                    let c = self.alpha * self.rho[i] * self.rho[j];
                    if j == i {
                        // Both terms are KL(pi || pi) on batch i.
                        let r = mean_kl_cached(policy, own, policy, own, want_grad, want_grad)?;
                        total += c * 2.0 * r.mean_kl;
                        add(r.grad_p, 2.0 * c);
                        add(r.grad_q, 2.0 * c);
                        continue;
                    }
                    let peer = &peers[j];
                    let po = peer_on_own[j].as_ref().expect("peer cache");
                    let pt = peer_on_theirs[j].as_ref().expect("peer cache");
                    let r1 = mean_kl_cached(policy, own, peer, po, want_grad, false)?;
                    let mine_on_theirs = policy.forward_batch(&self.batches[j].states)?;
                    let r2 = mean_kl_cached(peer, pt, policy, &mine_on_theirs, false, want_grad)?;
                    total += c * (r1.mean_kl + r2.mean_kl);
                    add(r1.grad_p, c);
                    add(r2.grad_q, c);
                }
            }
        }
        Ok((total, grad))
    }

    fn term_count(&self) -> usize {
        match &self.target {
            PenaltyTarget::None => 0,
            PenaltyTarget::Central { .. } => 1,
            PenaltyTarget::Pairwise { peers, .. } => peers.len(),
        }
    }
}

impl Objective for LocalObjective<'_> {
    fn value(&self, policy: &GaussianPolicy) -> Result<f64> {
        let own = policy.forward_batch(&self.batches[self.i].states)?;
        let (surr, _) = surrogate_cached(policy, &own, &self.batches[self.i], false)?;
        let (pen, _) = self.penalty(policy, &own, false)?;
        Ok(surr + pen)
    }

    fn value_and_grad(&self, policy: &GaussianPolicy) -> Result<(f64, Vec<f64>)> {
        let own = policy.forward_batch(&self.batches[self.i].states)?;
        let (surr, g) = surrogate_cached(policy, &own, &self.batches[self.i], true)?;
        let (pen, pg) = self.penalty(policy, &own, true)?;
        self.terms.set(self.terms.get() + self.term_count());
        let mut g = g.expect("requested");
        for (a, b) in g.iter_mut().zip(pg.expect("requested")) {
            *a += b;
        }
        Ok((surr + pen, g))
    }
}

/// Pairwise-penalized local loss of context `i` evaluated at `locals[i]`,
/// with its gradient.
pub fn dnc_local_loss(
    i: usize,
    locals: &[GaussianPolicy],
    rho: &[f64],
    batches: &[AdvantageBatch],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let obj = LocalObjective::pairwise(i, locals, rho, batches, alpha)?;
    obj.value_and_grad(&locals[i])
}

/// Penalty term (and gradient with respect to `locals[i]`) that `variant`
/// adds to the surrogate of context `i`.
pub fn variant_penalty(
    variant: Variant,
    i: usize,
    locals: &[GaussianPolicy],
    center: &GaussianPolicy,
    rho: &[f64],
    batches: &[AdvantageBatch],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let obj = match variant {
        Variant::Dnc | Variant::DncNoDistill => LocalObjective::pairwise(i, locals, rho, batches, alpha)?,
        Variant::Centralized | Variant::Distral => LocalObjective::central(i, center, rho, batches, alpha)?,
        Variant::Unconstrained | Variant::TrpoMonolithic => LocalObjective::unpenalized(i, rho, batches)?,
    };
    let own = locals[i].forward_batch(&batches[i].states)?;
    let (v, g) = obj.penalty(&locals[i], &own, true)?;
    Ok((v, g.expect("requested")))
}

/// Weighted states with the action distribution each should be fit to.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillDataset {
    pub states: Mat,
    /// Target action means, one row per state.
    pub target_means: Mat,
    /// Target log standard deviations, one row per state.
    pub target_log_std: Mat,
    /// Per-row weights summing to 1.
    pub weights: Vec<f64>,
}

impl DistillDataset {
    /// Pools the states retained for each context, labelled with that
    /// context's local policy. Every row of context `i` gets weight
    /// `rho_i / N_i`. Empty contexts are dropped and the remaining context
    /// weights renormalized.
    pub fn from_locals(locals: &[GaussianPolicy], states: &[Mat], rho: &[f64]) -> Result<Self> {
        if states.len() != rho.len() || locals.len() != rho.len() {
            return Err(DncError::shape(
                "distill contexts",
                rho.len(),
                states.len().max(locals.len()),
            ));
        }
        let mass: f64 = states
            .iter()
            .zip(rho)
            .filter(|(s, _)| s.rows() > 0)
            .map(|(_, r)| r)
            .sum();
        if mass <= 0.0 {
            return Err(DncError::Staleness("no retained trajectories to distill".into()));
        }
        let sdim = locals[0].state_dim();
        let adim = locals[0].action_dim();
        let (mut xs, mut means, mut log_std, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((s, pi), r) in states.iter().zip(locals).zip(rho) {
            let n = s.rows();
            if n == 0 {
                continue;
            }
            if s.cols() != sdim {
                return Err(DncError::shape("distill state dimension", sdim, s.cols()));
            }
            if pi.action_dim() != adim {
                return Err(DncError::shape("distill action dimension", adim, pi.action_dim()));
            }
            let cache = pi.forward_batch(s)?;
            xs.extend_from_slice(s.as_slice());
            means.extend_from_slice(cache.output().as_slice());
            for _ in 0..n {
                log_std.extend_from_slice(pi.log_std());
            }
            weights.extend(std::iter::repeat_n(r / mass / n as f64, n));
        }
        let n = weights.len();
        Ok(Self {
            states: Mat::from_vec(n, sdim, xs)?,
            target_means: Mat::from_vec(n, adim, means)?,
            target_log_std: Mat::from_vec(n, adim, log_std)?,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn subset(&self, idx: &[usize], scale: f64) -> DistillDataset {
        DistillDataset {
            states: self.states.select_rows(idx),
            target_means: self.target_means.select_rows(idx),
            target_log_std: self.target_log_std.select_rows(idx),
            weights: idx.iter().map(|&r| self.weights[r] * scale).collect(),
        }
    }
}

/// Weighted expected negative log-likelihood
/// `sum_r w_r * E[-log pi(a | s_r)]` with `a` drawn from the row's target
/// distribution, in closed form, and its gradient.
pub fn distillation_loss(policy: &GaussianPolicy, data: &DistillDataset) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(DncError::Staleness("empty distillation dataset".into()));
    }
    let adim = policy.action_dim();
    if data.target_means.cols() != adim {
        return Err(DncError::shape(
            "distill action dimension",
            adim,
            data.target_means.cols(),
        ));
    }
    let cache = policy.forward_batch(&data.states)?;
    let mu = cache.output();
    let ls = policy.log_std();
    let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let n = data.len();
    let mut loss = 0.0;
    let mut d_mean = Mat::zeros(n, adim);
    let mut d_ls = vec![0.0; adim];
    for r in 0..n {
        let w = data.weights[r];
        let (m, tm, tls) = (mu.row(r), data.target_means.row(r), data.target_log_std.row(r));
        for k in 0..adim {
            let d = tm[k] - m[k];
            let second = (2.0 * tls[k]).exp() + d * d;
            loss += w * (ls[k] + half_log_2pi + 0.5 * second * inv_var[k]);
            d_mean.set(r, k, -w * d * inv_var[k]);
            d_ls[k] += w * (1.0 - second * inv_var[k]);
        }
    }
    Ok((loss, policy.backprop(&cache, &d_mean, &d_ls)?))
}

/// Fits `start` to `data` with Adam for `epochs` passes. With a minibatch
/// size below the dataset size each step uses an unbiased minibatch
/// estimate of the loss.
pub fn distill(
    start: &GaussianPolicy,
    data: &DistillDataset,
    epochs: usize,
    step_size: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<GaussianPolicy> {
    if data.is_empty() {
        return Err(DncError::Staleness("empty distillation dataset".into()));
    }
    let n = data.len();
    let mut params = start.flat_params();
    let mut adam = Adam::new(params.len(), step_size);
    let mut policy = start.clone();
    let full = batch_size == 0 || batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        if full {
            let (_, g) = distillation_loss(&policy, data)?;
            adam.step(&mut params, &g);
            policy = policy.with_flat_params(&params)?;
            continue;
        }
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let mb = data.subset(chunk, n as f64 / chunk.len() as f64);
            let (_, g) = distillation_loss(&policy, &mb)?;
            adam.step(&mut params, &g);
            policy = policy.with_flat_params(&params)?;
        }
    }
    if !policy.flat_params().iter().all(|v| v.is_finite()) {
        return Err(DncError::Numerical("distillation diverged".into()));
    }
    Ok(policy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEval {
    pub stats: EpisodeStats,
    /// Local policy chosen for each episode.
    pub selections: Vec<usize>,
    pub initial_states: Vec<Vec<f64>>,
}

/// Evaluates the local ensemble, running each episode with the local policy
/// of its initial state's context (mean actions). Draws initial states
/// exactly as [`evaluate_policy`] does.
pub fn evaluate_oracle_ensemble(
    locals: &[GaussianPolicy],
    partition: &Partition,
    env: &dyn Env,
    episodes: usize,
    rng: &mut Rng,
) -> Result<OracleEval> {
    if locals.len() != partition.k() {
        return Err(DncError::shape("oracle ensemble", partition.k(), locals.len()));
    }
    let mut eps = Vec::with_capacity(episodes);
    let mut selections = Vec::with_capacity(episodes);
    let mut initial_states = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let s0 = env.reset(rng);
        let i = partition.assign(&s0)?;
        selections.push(i);
        initial_states.push(s0.clone());
        eps.push(rollout(env, &locals[i], s0, ActionMode::Mean, rng)?);
    }
    Ok(OracleEval {
        stats: episode_stats(env, &eps),
        selections,
        initial_states,
    })
}

/// Per-update diagnostics row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub iteration: usize,
    pub context: usize,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub mean_kl: f64,
    pub cg_residual: f64,
    pub backtracks: usize,
    pub accepted: bool,
}

impl DiagnosticsRow {
    fn new(iteration: usize, context: usize, d: &TrpoDiagnostics) -> Self {
        Self {
            iteration,
            context,
            surrogate_before: d.surrogate_before,
            surrogate_after: d.surrogate_after,
            mean_kl: d.mean_kl,
            cg_residual: d.cg_residual,
            backtracks: d.backtracks,
            accepted: d.accepted,
        }
    }
}

/// Evaluation and bookkeeping settings of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub eval_cadence: usize,
    pub eval_episodes: usize,
    pub record_wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_cadence: 5,
            eval_episodes: 20,
            record_wall_time: false,
        }
    }
}

/// Random streams derived from the run seed.
pub mod streams {
    pub const PARTITION: u64 = 1;
    pub const INIT: u64 = 2;
    pub const VALUE: u64 = 3;
    pub const ROLLOUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const FINAL_EVAL: u64 = 6;
    pub const DISTILL: u64 = 7;
}

/// Seed of the final evaluation of a run with seed `seed`; `dnc eval` with
/// this seed replays it.
pub fn final_eval_seed(seed: u64) -> u64 {
    derive_seed(seed, streams::FINAL_EVAL)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    /// 1-based iteration number.
    pub iteration: usize,
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub penalty: Option<PenaltyReport>,
    pub penalty_terms: usize,
    pub distilled: bool,
    /// Local policies after the update and before any reset.
    pub updated_locals: Vec<GaussianPolicy>,
}

/// Iteration-by-iteration driver of one training run.
pub struct Trainer<'a> {
    env: &'a dyn Env,
    cfg: DncConfig,
    trpo: TrpoConfig,
    opts: RunOptions,
    master: Rng,
    state: EnsembleState,
    retained: VecDeque<Vec<Mat>>,
    timesteps: u64,
    started: Instant,
    last_penalty: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(env: &'a dyn Env, cfg: &DncConfig, trpo: &TrpoConfig, opts: &RunOptions, seed: u64) -> Result<Self> {
        cfg.validate()?;
        trpo.validate()?;
        if opts.eval_cadence == 0 {
            return Err(DncError::Config("eval_cadence must be at least 1".into()));
        }
        let spec = env.spec();
        if cfg.batch_per_policy() < spec.horizon {
            return Err(DncError::Config(format!(
                "per-policy batch {} is shorter than the horizon {}",
                cfg.batch_per_policy(),
                spec.horizon
            )));
        }
        let master = Rng::new(seed);
        let (partition, n) = if cfg.variant.is_ensemble() {
            let mut prng = master.derive(streams::PARTITION);
            let samples: Vec<Vec<f64>> = (0..cfg.partition_samples).map(|_| env.reset(&mut prng)).collect();
            (Partition::fit(&samples, cfg.n_contexts, &mut prng)?, cfg.n_contexts)
        } else {
            (Partition::trivial(spec.state_dim), 1)
        };
        let global = GaussianPolicy::init(
            spec.state_dim,
            &cfg.policy_hidden,
            spec.action_dim,
            &mut master.derive(streams::INIT),
        )?;
        let value_stream = master.derive(streams::VALUE);
        let value_fns = (0..n)
            .map(|i| {
                ValueFunction::init(
                    spec.state_dim,
                    &cfg.value_hidden,
                    spec.horizon,
                    &mut value_stream.derive(i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            env,
            cfg: cfg.clone(),
            trpo: trpo.clone(),
            opts: opts.clone(),
            master,
            state: EnsembleState {
                local_policies: vec![global.clone(); n],
                global_policy: global,
                partition,
                value_fns,
                iteration: 0,
            },
            retained: VecDeque::new(),
            timesteps: 0,
            started: Instant::now(),
            last_penalty: 0.0,
        })
    }

    pub fn state(&self) -> &EnsembleState {
        &self.state
    }

    pub fn config(&self) -> &DncConfig {
        &self.cfg
    }

    pub fn timesteps(&self) -> u64 {
        self.timesteps
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    pub fn final_eval_seed(&self) -> u64 {
        final_eval_seed(self.master.seed())
    }

    fn wall(&self) -> f64 {
        if self.opts.record_wall_time {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// Collects one batch per policy (in parallel), refits the value
    /// functions and builds advantage batches.
    fn collect(&self, t: usize) -> Result<Vec<(Vec<EpisodeRecord>, ValueFunction, AdvantageBatch)>> {
        let roll = self.master.derive(streams::ROLLOUT).derive(t as u64);
        let restrict = self.cfg.variant.is_ensemble();
        let batch = self.cfg.batch_per_policy();
        (0..self.state.local_policies.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = roll.derive(i as u64);
                let ctx = restrict.then_some((&self.state.partition, i));
                let eps = collect_trajectories(self.env, &self.state.local_policies[i], ctx, batch, &mut rng)?;
                let vf = fit_value_function(&self.state.value_fns[i], &eps, &self.trpo)?;
                let adv = compute_advantages(&eps, &vf, &self.trpo)?;
                Ok((eps, vf, adv))
            })
            .collect()
    }

    fn retained_dataset(&self, rng: &mut Rng) -> Result<DistillDataset> {
        let sdim = self.env.spec().state_dim;
        let mut parts = Vec::with_capacity(self.state.local_policies.len());
        for i in 0..self.state.local_policies.len() {
            let mut s = Vec::new();
            for round in &self.retained {
                s.extend_from_slice(round[i].as_slice());
            }
            let rows = s.len() / sdim;
            let states = Mat::from_vec(rows, sdim, s)?;
            if rows > self.cfg.distill_max_per_context {
                let mut idx: Vec<usize> = (0..rows).collect();
                rng.shuffle(&mut idx);
                idx.truncate(self.cfg.distill_max_per_context);
                idx.sort_unstable();
                parts.push(states.select_rows(&idx));
            } else {
                parts.push(states);
            }
        }
        DistillDataset::from_locals(&self.state.local_policies, &parts, self.state.partition.weights())
    }

    /// Runs one training iteration and any evaluation scheduled after it.
    pub fn step(&mut self) -> Result<IterationReport> {
        if self.is_done() {
            return Err(DncError::Config("training already finished".into()));
        }
        let t = self.state.iteration;
        let label = t + 1;
        let variant = self.cfg.variant;
        let n = self.state.local_policies.len();
        let collected = self.collect(t)?;
        let mut episodes = Vec::with_capacity(n);
        let mut batches = Vec::with_capacity(n);
        for (i, (eps, vf, adv)) in collected.into_iter().enumerate() {
            self.timesteps += eps.iter().map(|e| e.len() as u64).sum::<u64>();
            self.state.value_fns[i] = vf;
            episodes.push(eps);
            batches.push(adv);
        }
        let distill_rng = self.master.derive(streams::DISTILL).derive(t as u64);

        if variant.refits_central() {
            let parts: Vec<Mat> = batches.iter().map(|b| b.states.clone()).collect();
            let data = DistillDataset::from_locals(&self.state.local_policies, &parts, self.state.partition.weights())?;
            self.state.global_policy = distill(
                &self.state.global_policy,
                &data,
                self.cfg.central_refit_epochs,
                self.cfg.distill_step_size,
                self.cfg.distill_batch_size,
                &mut distill_rng.derive(0),
            )?;
        }

        let mut diagnostics = Vec::with_capacity(n);
        let mut penalty_terms = 0;
        let rho = self.state.partition.weights().to_vec();
        if variant.is_ensemble() {
            for i in 0..n {
                let obj = match variant {
                    Variant::Dnc | Variant::DncNoDistill => {
                        LocalObjective::pairwise(i, &self.state.local_policies, &rho, &batches, self.cfg.alpha)?
                    }
                    Variant::Centralized | Variant::Distral => {
                        LocalObjective::central(i, &self.state.global_policy, &rho, &batches, self.cfg.alpha)?
                    }
                    _ => LocalObjective::unpenalized(i, &rho, &batches)?,
                };
                let (new, diag) =
                    trust_region_step(&self.state.local_policies[i], &obj, &batches[i].states, &self.trpo)?;
                penalty_terms += obj.terms_evaluated();
                diagnostics.push(DiagnosticsRow::new(label, i, &diag));
                self.state.local_policies[i] = new;
            }
        } else {
            let (new, diag) = trpo_step(&self.state.local_policies[0], &batches[0], &self.trpo)?;
            diagnostics.push(DiagnosticsRow::new(label, 0, &diag));
            self.state.local_policies[0] = new.clone();
            self.state.global_policy = new;
        }

        let mut rows = Vec::new();
        let penalty = if variant.is_ensemble() {
            let states: Vec<&Mat> = batches.iter().map(|b| &b.states).collect();
            let report = PenaltyReport::compute(&self.state.local_policies, &states, &rho)?;
            self.last_penalty = report.weighted_penalty_total;
            for (i, eps) in episodes.iter().enumerate() {
                let st = episode_stats(self.env, eps);
                rows.push(MetricsRow {
                    iteration: label,
                    scope: Scope::Context(i),
                    mean_return: st.mean_return,
                    success_rate: st.success_rate,
                    mean_kl_penalty: report.row_penalty(i, &rho),
                    timesteps_consumed: self.timesteps,
                    wall_seconds: self.wall(),
                });
            }
            Some(report)
        } else {
            None
        };

        let mut distilled = false;
        if variant.distills() {
            self.retained
                .push_back(batches.iter().map(|b| b.states.clone()).collect());
            while self.retained.len() > self.cfg.distill_period {
                self.retained.pop_front();
            }
            if label.is_multiple_of(self.cfg.distill_period) {
                let data = self.retained_dataset(&mut distill_rng.derive(1))?;
                self.state.global_policy = distill(
                    &self.state.global_policy,
                    &data,
                    self.cfg.distill_epochs,
                    self.cfg.distill_step_size,
                    self.cfg.distill_batch_size,
                    &mut distill_rng.derive(2),
                )?;
                distilled = true;
            }
        }

        self.state.iteration = label;
        if label.is_multiple_of(self.opts.eval_cadence) || label == self.cfg.iterations {
            rows.extend(self.evaluate(t, label)?);
        }
        let updated_locals = self.state.local_policies.clone();
        if distilled {
            let g = self.state.global_policy.clone();
            self.state.local_policies.iter_mut().for_each(|p| *p = g.clone());
        }
        Ok(IterationReport {
            iteration: label,
            rows,
            diagnostics,
            penalty,
            penalty_terms,
            distilled,
            updated_locals,
        })
    }

    fn eval_rng(&self, t: usize, label: usize) -> Rng {
        if label == self.cfg.iterations {
            Rng::new(self.final_eval_seed())
        } else {
            self.master.derive(streams::EVAL).derive(t as u64)
        }
    }

    fn evaluate(&self, t: usize, label: usize) -> Result<Vec<MetricsRow>> {
        let variant = self.cfg.variant;
        let mut rows = Vec::new();
        let row = |scope, st: EpisodeStats| MetricsRow {
            iteration: label,
            scope,
            mean_return: st.mean_return,
            success_rate: st.success_rate,
            mean_kl_penalty: self.last_penalty,
            timesteps_consumed: self.timesteps,
            wall_seconds: self.wall(),
        };
        if variant.has_global() {
            let st = evaluate_policy(
                self.env,
                &self.state.global_policy,
                self.opts.eval_episodes,
                &mut self.eval_rng(t, label),
            )?;
            rows.push(row(Scope::Global, st));
        }
        if variant.is_ensemble() {
            let o = evaluate_oracle_ensemble(
                &self.state.local_policies,
                &self.state.partition,
                self.env,
                self.opts.eval_episodes,
                &mut self.eval_rng(t, label),
            )?;
            rows.push(row(Scope::Oracle, o.stats));
        }
        Ok(rows)
    }

    pub fn into_state(self) -> EnsembleState {
        self.state
    }
}

/// Output of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: EnsembleState,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub penalties: Vec<PenaltyReport>,
    pub final_eval_seed: u64,
}

/// Trains `cfg.iterations` iterations from seed `seed`.
pub fn run_dnc(env: &dyn Env, cfg: &DncConfig, trpo: &TrpoConfig, opts: &RunOptions, seed: u64) -> Result<RunOutput> {
    let mut trainer = Trainer::new(env, cfg, trpo, opts, seed)?;
    let mut metrics = Vec::new();
    let mut diagnostics = Vec::new();
    let mut penalties = Vec::new();
    while !trainer.is_done() {
        let rep = trainer.step()?;
        metrics.extend(rep.rows);
        diagnostics.extend(rep.diagnostics);
        penalties.extend(rep.penalty);
    }
    let final_eval_seed = trainer.final_eval_seed();
    Ok(RunOutput {
        state: trainer.into_state(),
        metrics,
        diagnostics,
        penalties,
        final_eval_seed,
    })
}
