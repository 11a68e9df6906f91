use pgvlab_core::envs::{generate_random_mdp, TabularMdp};
use pgvlab_core::policy::PolicyHead;
use pgvlab_core::spg::{estimate_spg, lambda_returns, SpgOptions};
use pgvlab_core::variance::{
    alpha_n, alpha_t, bandit_threshold, clt_variance, exact_moments, random_logits, sample_tabular_batch,
    tabular_estimate, ExactMoments, StepWeight,
};
use pgvlab_core::{Action, Method};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64, ns: usize, na: usize) -> (TabularMdp, Vec<f64>, ExactMoments) {
    let mdp = generate_random_mdp(seed, ns, na, 1.0, 0.6).unwrap();
    let logits = random_logits(seed, ns * na, 1.0);
    let m = exact_moments(&mdp, &logits, 8, StepWeight::Uniform).unwrap();
    (mdp, logits, m)
}

/// Forward-view lambda-return: a geometric mix of n-step returns, the last
/// one taking the remaining weight.
fn forward_view(rewards: &[f64], next_values: &[f64], gamma: f64, lam: f64, t: usize) -> f64 {
    let remaining = rewards.len() - t;
    let n_step = |n: usize| -> f64 {
        let mut g = 0.0;
        for k in 0..n {
            g += gamma.powi(k as i32) * rewards[t + k];
        }
        g + gamma.powi(n as i32) * next_values[t + n - 1]
    };
    let mut out = 0.0;
    for n in 1..remaining {
        out += (1.0 - lam) * lam.powi(n as i32 - 1) * n_step(n);
    }
    out + lam.powi(remaining as i32 - 1) * n_step(remaining)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_returns_match_forward_view(
        rewards in prop::collection::vec(-2.0f64..2.0, 1..12),
        seed in 0u64..1000,
        gamma in 0.5f64..1.0,
        lam in 0.0f64..1.0,
    ) {
        let n = rewards.len();
        let values: Vec<f64> = (0..n).map(|i| ((seed + i as u64) as f64 * 0.77).sin()).collect();
        // a continuing chain: V(s'_t) = V(s_{t+1}), the last one free
        let mut next_values: Vec<f64> = values[1..].to_vec();
        next_values.push((seed as f64).cos());
        let (ret, adv) = lambda_returns(&rewards, &values, &next_values, &vec![false; n], &vec![false; n], gamma, lam).unwrap();
        for t in 0..n {
            let want = forward_view(&rewards, &next_values, gamma, lam, t);
            prop_assert!((ret[t] - want).abs() < 1e-10, "t={t}: {} vs {want}", ret[t]);
            prop_assert!((adv[t] - (want - values[t])).abs() < 1e-10);
        }
    }

    #[test]
    fn estimator_is_the_weighted_double_sum(seed in 0u64..1000, t in 1usize..6, n in 1usize..4, baseline in any::<bool>()) {
        let (mdp, logits, m) = setup(seed, 3, 3);
        let head = PolicyHead::tabular(3, 3).unwrap();
        let params = head.tabular_params(&logits).unwrap();
        let (states, batch) = sample_tabular_batch(&mdp, &m, t, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let opts = SpgOptions { use_baseline: baseline, discount: None };
        let est = estimate_spg(&batch, &head, &params, opts, Method::Ac, 0).unwrap().grad;
        let mut want = vec![0.0; 9];
        for (i, tr) in batch.transitions.iter().enumerate() {
            let b = if baseline { batch.values[i] } else { 0.0 };
            let mut terms: Vec<(Action, f64)> = vec![(tr.action.clone(), batch.lambda_returns[i] - b)];
            terms.extend(batch.extra[i].iter().map(|e| (e.action.clone(), e.q_estimate - b)));
            for (a, w) in terms {
                let g = head.grad_log_prob(&params, &tr.state, &a).unwrap();
                for (dst, x) in want.iter_mut().zip(g) {
                    *dst += w * x / (t * n) as f64;
                }
            }
        }
        let closed = tabular_estimate(&m, &states, &batch, opts).unwrap();
        for p in 0..9 {
            prop_assert!((est[p] - want[p]).abs() < 1e-12);
            prop_assert!((closed[p] - want[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn more_actions_never_raise_variance(seed in 0u64..1000, t in 1usize..8) {
        let (_, _, m) = setup(seed, 4, 3);
        let mut prev = f64::INFINITY;
        for n in 1..=6 {
            let v = clt_variance(&m, t, n).unwrap();
            for (a, b) in v.total.iter().zip(clt_variance(&m, t, n + 1).unwrap().total.iter()) {
                prop_assert!(*b <= *a + 1e-15);
            }
            prop_assert!(v.total_trace() <= prev + 1e-15);
            prev = v.total_trace();
        }
    }
}

#[test]
fn estimator_is_unbiased_with_and_without_baseline() {
    let (mdp, _, m) = setup(5, 4, 3);
    let samples = 40_000;
    for baseline in [false, true] {
        let opts = SpgOptions { use_baseline: baseline, discount: None };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut sum = vec![0.0; 12];
        let mut sq = vec![0.0; 12];
        for _ in 0..samples {
            let (states, batch) = sample_tabular_batch(&mdp, &m, 4, 2, &mut rng).unwrap();
            let g = tabular_estimate(&m, &states, &batch, opts).unwrap();
            for p in 0..12 {
                sum[p] += g[p];
                sq[p] += g[p] * g[p];
            }
        }
        let nf = samples as f64;
        for p in 0..12 {
            let mean = sum[p] / nf;
            let se = ((sq[p] / nf - mean * mean) / nf).sqrt();
            assert!((mean - m.grad_j[p]).abs() <= 5.0 * se + 1e-12, "baseline={baseline} p={p}: {mean} vs {}", m.grad_j[p]);
        }
    }
}

#[test]
fn prefactor_examples() {
    assert_eq!(alpha_n(2, 1), -0.25);
    assert_eq!(alpha_n(1, 2), -1.0 / 6.0);
    assert_eq!(alpha_t(4, 1.0), -0.125);
    assert_eq!(bandit_threshold(1, 1.0), 0.0);
    assert_eq!(bandit_threshold(1, 0.5), 0.5);
    assert!(bandit_threshold(2, 1.0) < 0.0);
}

#[test]
fn uniform_policy_bandit_by_hand() {
    // Two states, two actions, next state uniform regardless; uniform policy.
    // With Q = r for gamma -> 0 the per-state term is easy to write down.
    let mdp = TabularMdp::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], vec![0.5; 8], 1e-12, vec![0.5, 0.5]).unwrap();
    let m = exact_moments(&mdp, &[0.0; 4], 2, StepWeight::Uniform).unwrap();
    // g(s0,a0) = Q * (1 - 0.5, -0.5) on state 0's block, other actions carry Q = 0
    // gbar(s0) = 0.5 * (0.5, -0.5); gbar(s1) = 0
    assert!((m.grad_j[0] - 0.125).abs() < 1e-9);
    assert!((m.grad_j[1] + 0.125).abs() < 1e-9);
    // Var_s gbar_0 = 0.5 * 0.25^2 - 0.125^2
    assert!((m.var_s_bar[0] - (0.5 * 0.0625 - 0.015625)).abs() < 1e-9);
    // E_s Var_a g_0 = 0.5 * (0.5 * 0.25 - 0.0625)
    assert!((m.e_var_a[0] - 0.5 * (0.125 - 0.0625)).abs() < 1e-9);
    for k in 1..=2 {
        assert!(m.cov_single(k).iter().all(|x| x.abs() < 1e-12));
    }
}
