use dnc_rl::dnc::{
    distill, distillation_loss, dnc_local_loss, evaluate_oracle_ensemble, variant_penalty, DistillDataset, DncConfig,
    LocalObjective, PenaltyReport, RunOptions, Trainer, Variant,
};
use dnc_rl::envs::{evaluate_policy, make_env};
use dnc_rl::nn::{Mat, MlpParams};
use dnc_rl::partition::Partition;
use dnc_rl::policy::{gaussian_log_density, mean_kl, GaussianPolicy};
use dnc_rl::rng::Rng;
use dnc_rl::trpo::{surrogate_loss, trpo_step, trust_region_step, AdvantageBatch, TrpoConfig};

fn random_policy(sdim: usize, hidden: &[usize], adim: usize, spread: f64, rng: &mut Rng) -> GaussianPolicy {
    let p = GaussianPolicy::init(sdim, hidden, adim, rng).unwrap();
    let flat: Vec<f64> = p.flat_params().iter().map(|v| v + spread * rng.normal()).collect();
    p.with_flat_params(&flat).unwrap()
}

/// A batch sampled from `sampler` at random states with random advantages.
fn random_batch(sampler: &GaussianPolicy, n: usize, rng: &mut Rng) -> AdvantageBatch {
    let (sdim, adim) = (sampler.state_dim(), sampler.action_dim());
    let states = Mat::from_vec(n, sdim, (0..n * sdim).map(|_| rng.normal()).collect()).unwrap();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for r in 0..n {
        let a = sampler.sample_action(states.row(r), rng).unwrap();
        old.push(a.log_prob);
        actions.extend(a.action);
    }
    AdvantageBatch {
        states,
        actions: Mat::from_vec(n, adim, actions).unwrap(),
        old_log_probs: old,
        advantages: (0..n).map(|_| rng.normal()).collect(),
    }
}

/// Closed-form diagonal Gaussian KL, written per coordinate.
fn kl_scalar(mp: &[f64], lp: &[f64], mq: &[f64], lq: &[f64]) -> f64 {
    (0..mp.len())
        .map(|k| {
            let (vp, vq) = ((2.0 * lp[k]).exp(), (2.0 * lq[k]).exp());
            lq[k] - lp[k] + (vp + (mp[k] - mq[k]).powi(2)) / (2.0 * vq) - 0.5
        })
        .sum()
}

fn mean_kl_oracle(p: &GaussianPolicy, q: &GaussianPolicy, states: &Mat) -> f64 {
    (0..states.rows())
        .map(|r| {
            let s = states.row(r);
            kl_scalar(&p.mean(s).unwrap(), p.log_std(), &q.mean(s).unwrap(), q.log_std())
        })
        .sum::<f64>()
        / states.rows() as f64
}

fn surrogate_oracle(p: &GaussianPolicy, b: &AdvantageBatch) -> f64 {
    -(0..b.len())
        .map(|r| {
            let lp = gaussian_log_density(&p.mean(b.states.row(r)).unwrap(), p.log_std(), b.actions.row(r));
            b.advantages[r] * (lp - b.old_log_probs[r]).exp()
        })
        .sum::<f64>()
        / b.len() as f64
}

/// The pairwise local loss evaluated row by row.
fn local_loss_oracle(i: usize, locals: &[GaussianPolicy], rho: &[f64], batches: &[AdvantageBatch], alpha: f64) -> f64 {
    let mut pen = 0.0;
    for j in 0..locals.len() {
        pen += rho[j]
            * (mean_kl_oracle(&locals[i], &locals[j], &batches[i].states)
                + mean_kl_oracle(&locals[j], &locals[i], &batches[j].states));
    }
    surrogate_oracle(&locals[i], &batches[i]) + alpha * rho[i] * pen
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[k] += h;
            minus[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn ensemble(n: usize, rng: &mut Rng) -> (Vec<GaussianPolicy>, Vec<AdvantageBatch>, Vec<f64>) {
    let locals: Vec<GaussianPolicy> = (0..n).map(|_| random_policy(2, &[4], 2, 0.3, rng)).collect();
    let batches: Vec<AdvantageBatch> = locals.iter().map(|p| random_batch(p, 12, rng)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.2, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    (locals, batches, raw.iter().map(|r| r / total).collect())
}

#[test]
fn local_loss_value_matches_row_oracle() {
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let (locals, batches, rho) = ensemble(3, &mut rng);
        for i in 0..3 {
            let (v, _) = dnc_local_loss(i, &locals, &rho, &batches, 0.7).unwrap();
            let want = local_loss_oracle(i, &locals, &rho, &batches, 0.7);
            assert!((v - want).abs() <= 1e-10 * want.abs().max(1.0), "{v} vs {want}");
        }
    }
}

#[test]
fn local_loss_gradient_two_linear_policies() {
    let mut rng = Rng::new(22);
    for _ in 0..50 {
        let locals: Vec<GaussianPolicy> = (0..2).map(|_| random_policy(1, &[], 1, 0.5, &mut rng)).collect();
        let batches: Vec<AdvantageBatch> = locals.iter().map(|p| random_batch(p, 10, &mut rng)).collect();
        let rho = [0.4, 0.6];
        for i in 0..2 {
            let (_, g) = dnc_local_loss(i, &locals, &rho, &batches, 1.3).unwrap();
            let fd = fd_grad(
                |theta| {
                    let mut l = locals.clone();
                    l[i] = l[i].with_flat_params(theta).unwrap();
                    local_loss_oracle(i, &l, &rho, &batches, 1.3)
                },
                &locals[i].flat_params(),
                1e-6,
            );
            assert!(rel_err(&g, &fd) < 1e-5, "rel err {}", rel_err(&g, &fd));
        }
    }
}

#[test]
fn zero_alpha_is_the_surrogate() {
    let mut rng = Rng::new(23);
    let (locals, batches, rho) = ensemble(3, &mut rng);
    for i in 0..3 {
        assert_eq!(
            dnc_local_loss(i, &locals, &rho, &batches, 0.0).unwrap(),
            surrogate_loss(&locals[i], &batches[i]).unwrap()
        );
    }
}

#[test]
fn identical_locals_have_no_penalty() {
    let mut rng = Rng::new(24);
    let p = random_policy(2, &[4], 2, 0.3, &mut rng);
    let locals = vec![p.clone(), p.clone(), p.clone()];
    let batches: Vec<AdvantageBatch> = (0..3).map(|_| random_batch(&p, 12, &mut rng)).collect();
    let rho = [0.2, 0.3, 0.5];
    for i in 0..3 {
        let (v, g) = variant_penalty(Variant::Dnc, i, &locals, &p, &rho, &batches, 2.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let (v, g) = variant_penalty(Variant::Centralized, i, &locals, &p, &rho, &batches, 2.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }
}

#[test]
fn unconstrained_penalty_is_zero() {
    let mut rng = Rng::new(25);
    let (locals, batches, rho) = ensemble(3, &mut rng);
    let center = random_policy(2, &[4], 2, 0.3, &mut rng);
    for i in 0..3 {
        let (v, g) = variant_penalty(Variant::Unconstrained, i, &locals, &center, &rho, &batches, 5.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }
}

#[test]
fn centralized_penalty_gradient() {
    let mut rng = Rng::new(26);
    for _ in 0..50 {
        let (locals, batches, rho) = ensemble(2, &mut rng);
        let center = random_policy(2, &[4], 2, 0.3, &mut rng);
        for i in 0..2 {
            let (v, g) = variant_penalty(Variant::Distral, i, &locals, &center, &rho, &batches, 0.9).unwrap();
            let oracle = |p: &GaussianPolicy| 0.9 * rho[i] * mean_kl_oracle(p, &center, &batches[i].states);
            assert!((v - oracle(&locals[i])).abs() < 1e-12);
            let fd = fd_grad(
                |t| oracle(&locals[i].with_flat_params(t).unwrap()),
                &locals[i].flat_params(),
                1e-6,
            );
            assert!(rel_err(&g, &fd) < 1e-5, "rel err {}", rel_err(&g, &fd));
        }
    }
}

#[test]
fn missing_batch_is_a_staleness_error() {
    let mut rng = Rng::new(27);
    let (locals, batches, rho) = ensemble(3, &mut rng);
    let err = dnc_local_loss(0, &locals, &rho, &batches[..2], 1.0).unwrap_err();
    assert!(matches!(err, dnc_rl::DncError::Staleness(_)), "{err}");
}

#[test]
fn penalty_report_invariants() {
    let mut rng = Rng::new(28);
    for _ in 0..10 {
        let (locals, batches, rho) = ensemble(4, &mut rng);
        let states: Vec<&Mat> = batches.iter().map(|b| &b.states).collect();
        let rep = PenaltyReport::compute(&locals, &states, &rho).unwrap();
        let mut total = 0.0;
        for i in 0..4 {
            assert!(rep.pairwise_kl[i][i].abs() <= 1e-9);
            for j in 0..4 {
                assert!(rep.pairwise_kl[i][j] >= 0.0);
                let kl = mean_kl_oracle(&locals[i], &locals[j], &batches[i].states);
                assert!((rep.pairwise_kl[i][j] - kl).abs() <= 1e-9 * kl.max(1.0));
                total += rho[i] * rho[j] * kl;
            }
        }
        assert!((rep.weighted_penalty_total - total).abs() <= 1e-9);
    }
}

#[test]
fn penalty_terms_grow_quadratically() {
    let mut rng = Rng::new(29);
    let cfg = TrpoConfig::default();
    for n in 1..=5 {
        let (mut locals, batches, rho) = ensemble(n, &mut rng);
        let mut terms = 0;
        for i in 0..n {
            let obj = LocalObjective::pairwise(i, &locals, &rho, &batches, 1.0).unwrap();
            let (new, _) = trust_region_step(&locals[i], &obj, &batches[i].states, &cfg).unwrap();
            terms += obj.terms_evaluated();
            locals[i] = new;
        }
        assert_eq!(terms, n * n);
    }
}

#[test]
fn unpenalized_step_is_a_trpo_step() {
    let mut rng = Rng::new(30);
    let cfg = TrpoConfig::default();
    let (locals, batches, rho) = ensemble(3, &mut rng);
    for i in 0..3 {
        let obj = LocalObjective::unpenalized(i, &rho, &batches).unwrap();
        let a = trust_region_step(&locals[i], &obj, &batches[i].states, &cfg).unwrap();
        let b = trpo_step(&locals[i], &batches[i], &cfg).unwrap();
        assert_eq!(a, b);
    }
}

fn random_states(n: usize, dim: usize, rng: &mut Rng) -> Mat {
    Mat::from_vec(n, dim, (0..n * dim).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn self_distillation_matches_the_locals() {
    let mut rng = Rng::new(31);
    let local = random_policy(2, &[16], 1, 0.1, &mut rng);
    let locals = vec![local.clone(), local.clone()];
    let parts = [random_states(500, 2, &mut rng), random_states(500, 2, &mut rng)];
    let data = DistillDataset::from_locals(&locals, &parts, &[0.5, 0.5]).unwrap();
    let start = GaussianPolicy::init(2, &[16], 1, &mut rng).unwrap();
    let fitted = distill(&start, &data, 300, 1e-2, 0, &mut rng).unwrap();
    let held_out = random_states(500, 2, &mut rng);
    let kl = mean_kl(&local, &fitted, &held_out).unwrap();
    assert!(kl < 1e-3, "held-out KL {kl}");
}

fn constant_policy(mean: f64, log_std: f64) -> GaussianPolicy {
    let net = MlpParams::from_parts(&[1, 1], vec![Mat::zeros(1, 1)], vec![vec![mean]]).unwrap();
    GaussianPolicy::from_parts(net, vec![log_std]).unwrap()
}

#[test]
fn two_constant_policies_distill_to_the_midpoint() {
    let mut rng = Rng::new(32);
    let (m1, m2) = (-1.5, 2.5);
    let locals = vec![constant_policy(m1, -0.5), constant_policy(m2, -0.5)];
    let shared = random_states(200, 1, &mut rng);
    let data = DistillDataset::from_locals(&locals, &[shared.clone(), shared.clone()], &[0.5, 0.5]).unwrap();
    let fitted = distill(&constant_policy(0.0, 0.0), &data, 3000, 1e-2, 0, &mut rng).unwrap();
    for r in 0..shared.rows() {
        let mu = fitted.mean(shared.row(r)).unwrap()[0];
        assert!((mu - 0.5 * (m1 + m2)).abs() < 1e-3, "{mu}");
    }
    // Single-Gaussian MLE of the mixture: variance = sigma^2 + ((m2 - m1) / 2)^2.
    let var = (-1.0f64).exp() + (0.5 * (m2 - m1)).powi(2);
    assert!((fitted.std()[0] - var.sqrt()).abs() < 1e-3);
}

#[test]
fn distillation_loss_decreases_every_epoch() {
    let mut rng = Rng::new(33);
    let locals: Vec<GaussianPolicy> = (0..3).map(|_| random_policy(2, &[8], 2, 0.3, &mut rng)).collect();
    let parts: Vec<Mat> = (0..3).map(|_| random_states(100, 2, &mut rng)).collect();
    let data = DistillDataset::from_locals(&locals, &parts, &[0.2, 0.3, 0.5]).unwrap();
    let mut policy = GaussianPolicy::init(2, &[8], 2, &mut rng).unwrap();
    let mut last = distillation_loss(&policy, &data).unwrap().0;
    for _ in 0..100 {
        policy = distill(&policy, &data, 1, 1e-3, 0, &mut rng).unwrap();
        let loss = distillation_loss(&policy, &data).unwrap().0;
        assert!(loss < last, "{loss} >= {last}");
        last = loss;
    }
}

#[test]
fn distillation_loss_is_expected_nll_under_the_locals() {
    let mut rng = Rng::new(34);
    let locals: Vec<GaussianPolicy> = (0..2).map(|_| random_policy(2, &[4], 1, 0.3, &mut rng)).collect();
    let parts: Vec<Mat> = (0..2).map(|_| random_states(3, 2, &mut rng)).collect();
    let rho = [0.3, 0.7];
    let data = DistillDataset::from_locals(&locals, &parts, &rho).unwrap();
    let student = random_policy(2, &[4], 1, 0.3, &mut rng);
    let (loss, _) = distillation_loss(&student, &data).unwrap();
    // Monte-Carlo: sum_i rho_i mean_s E_{a ~ pi_i(s)}[-log pi_c(a | s)].
    let samples = 200_000;
    let mut est = 0.0;
    let mut var = 0.0;
    for (i, s) in parts.iter().enumerate() {
        for r in 0..s.rows() {
            let (mut sum, mut sq) = (0.0, 0.0);
            let mu_c = student.mean(s.row(r)).unwrap();
            for _ in 0..samples {
                let a = locals[i].sample_action(s.row(r), &mut rng).unwrap().action;
                let v = -gaussian_log_density(&mu_c, student.log_std(), &a);
                sum += v;
                sq += v * v;
            }
            let m = sum / samples as f64;
            let w = rho[i] / s.rows() as f64;
            est += w * m;
            var += w * w * (sq / samples as f64 - m * m) / samples as f64;
        }
    }
    assert!(
        (loss - est).abs() < 4.0 * var.sqrt(),
        "{loss} vs {est} ± {}",
        var.sqrt()
    );
}

#[test]
fn empty_distillation_data_is_an_error() {
    let mut rng = Rng::new(35);
    let p = random_policy(2, &[4], 1, 0.3, &mut rng);
    let empty = Mat::zeros(0, 2);
    assert!(DistillDataset::from_locals(std::slice::from_ref(&p), &[empty], &[1.0]).is_err());
}

#[test]
fn oracle_with_one_context_is_plain_evaluation() {
    let env = make_env("point_goal").unwrap();
    let mut rng = Rng::new(36);
    let p = GaussianPolicy::init(7, &[8], 2, &mut rng).unwrap();
    let part = Partition::trivial(7);
    let o = evaluate_oracle_ensemble(std::slice::from_ref(&p), &part, env.as_ref(), 10, &mut Rng::new(5)).unwrap();
    let e = evaluate_policy(env.as_ref(), &p, 10, &mut Rng::new(5)).unwrap();
    assert_eq!(o.stats, e);
}

#[test]
fn oracle_selection_follows_the_partition() {
    let env = make_env("point_goal").unwrap();
    let mut rng = Rng::new(37);
    let samples: Vec<Vec<f64>> = (0..2000).map(|_| env.reset(&mut rng)).collect();
    let part = Partition::fit(&samples, 4, &mut rng).unwrap();
    let global = GaussianPolicy::init(7, &[8], 2, &mut rng).unwrap();
    let same = vec![global.clone(); 4];
    let o = evaluate_oracle_ensemble(&same, &part, env.as_ref(), 30, &mut Rng::new(9)).unwrap();
    let e = evaluate_policy(env.as_ref(), &global, 30, &mut Rng::new(9)).unwrap();
    assert_eq!(o.stats, e);
    let mixed: Vec<GaussianPolicy> = (0..4)
        .map(|_| GaussianPolicy::init(7, &[8], 2, &mut rng).unwrap())
        .collect();
    let o = evaluate_oracle_ensemble(&mixed, &part, env.as_ref(), 30, &mut Rng::new(9)).unwrap();
    assert_eq!(o.selections.len(), 30);
    for (sel, s0) in o.selections.iter().zip(&o.initial_states) {
        assert_eq!(*sel, part.assign(s0).unwrap());
    }
}

fn small_config(variant: Variant) -> DncConfig {
    DncConfig {
        n_contexts: 2,
        alpha: 0.1,
        distill_period: 2,
        per_context_batch: 200,
        iterations: 6,
        variant,
        distill_epochs: 2,
        partition_samples: 500,
        policy_hidden: vec![8],
        value_hidden: vec![8],
        ..DncConfig::default()
    }
}

#[test]
fn locals_equal_global_after_every_distill() {
    let env = make_env("bimodal").unwrap();
    for variant in [Variant::Dnc, Variant::Centralized, Variant::Unconstrained] {
        let cfg = small_config(variant);
        let mut tr = Trainer::new(env.as_ref(), &cfg, &TrpoConfig::default(), &RunOptions::default(), 3).unwrap();
        let mut distills = 0;
        while !tr.is_done() {
            let rep = tr.step().unwrap();
            if rep.distilled {
                distills += 1;
                let g = tr.state().global_policy.flat_params();
                for l in &tr.state().local_policies {
                    let diff = l
                        .flat_params()
                        .iter()
                        .zip(&g)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert_eq!(diff, 0.0);
                }
            }
        }
        assert_eq!(distills, 3, "{variant}");
    }
}

#[test]
fn distral_and_no_distill_never_reset() {
    let env = make_env("bimodal").unwrap();
    for variant in [Variant::Distral, Variant::DncNoDistill] {
        let cfg = small_config(variant);
        let mut tr = Trainer::new(env.as_ref(), &cfg, &TrpoConfig::default(), &RunOptions::default(), 3).unwrap();
        while !tr.is_done() {
            let rep = tr.step().unwrap();
            assert!(!rep.distilled);
            assert_eq!(rep.updated_locals, tr.state().local_policies);
        }
    }
}

#[test]
fn every_local_update_respects_the_trust_region() {
    let env = make_env("bimodal").unwrap();
    let cfg = small_config(Variant::Dnc);
    let trpo = TrpoConfig::default();
    let mut tr = Trainer::new(env.as_ref(), &cfg, &trpo, &RunOptions::default(), 4).unwrap();
    while !tr.is_done() {
        let rep = tr.step().unwrap();
        assert_eq!(rep.diagnostics.len(), 2);
        assert_eq!(rep.penalty_terms, 4);
        for d in &rep.diagnostics {
            if d.accepted {
                assert!(d.mean_kl <= trpo.max_kl);
                assert!(d.surrogate_after < d.surrogate_before);
            }
        }
    }
}

#[test]
fn monolithic_and_ensemble_budgets_match() {
    let env = make_env("bimodal").unwrap();
    let opts = RunOptions::default();
    let trpo = TrpoConfig::default();
    let mono_cfg = small_config(Variant::TrpoMonolithic);
    let dnc_cfg = small_config(Variant::Dnc);
    let mut mono = Trainer::new(env.as_ref(), &mono_cfg, &trpo, &opts, 5).unwrap();
    let mut dnc = Trainer::new(env.as_ref(), &dnc_cfg, &trpo, &opts, 5).unwrap();
    assert_eq!(mono.state().local_policies.len(), 1);
    while !mono.is_done() {
        mono.step().unwrap();
        dnc.step().unwrap();
        assert!(mono.timesteps().abs_diff(dnc.timesteps()) <= env.spec().horizon as u64);
    }
}
