use pgvlab_core::dynamics::{
    bias_bounds, open_loop_errors, simulate_q, train_dynamics, BiasBound, DynamicsModel, EnvModel, ReplayBuffer,
    WorldModel,
};
use pgvlab_core::envs::{generate_random_mdp, PointMass, TabularEnv};
use pgvlab_core::policy::{PolicyHead, TableCritic};
use pgvlab_core::probe::{relative_bias, relative_variance};
use pgvlab_core::variance::random_logits;
use pgvlab_core::{Action, Env, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn simulated_q_through_the_true_model_is_unbiased() {
    let (ns, na) = (3, 2);
    let mdp = generate_random_mdp(4, ns, na, 1.0, 0.8).unwrap();
    let logits = random_logits(4, ns * na, 1.0);
    let pi = pgvlab_core::envs::TabularPolicy::softmax(ns, na, &logits);
    let q = mdp.action_values(&pi).unwrap();
    let critic = TableCritic(mdp.state_values(&pi).unwrap());
    let head = PolicyHead::tabular(ns, na).unwrap();
    let params = head.tabular_params(&logits).unwrap();
    let model = EnvModel::new(Box::new(TabularEnv::new(mdp.clone(), 8)));
    let reps = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (horizon, lam) in [(0, 0.0), (3, 0.5), (5, 1.0)] {
        for s in 0..ns {
            for a in 0..na {
                let mut one_hot = vec![0.0; ns];
                one_hot[s] = 1.0;
                let states = Tensor::from_rows(&vec![one_hot; reps]).unwrap();
                let acts = vec![Action::Discrete(a); reps];
                let sim = simulate_q(&model, &critic, &head, &params, &states, &acts, horizon, mdp.gamma(), lam, &mut rng)
                    .unwrap();
                let n = reps as f64;
                let mean = sim.q.iter().sum::<f64>() / n;
                let var = sim.q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt();
                let want = q[s * na + a];
                assert!((mean - want).abs() <= 5.0 * se + 1e-9, "H={horizon} s={s} a={a}: {mean} vs {want}");
            }
        }
    }
}

#[test]
fn deterministic_model_rollout_by_hand() {
    // horizon 0: r + gamma V(s'), with the env stepped directly as the oracle
    let mut env = PointMass::new(0);
    env.set_state([0.4, -0.3, 0.2, 0.1]);
    let a = Action::Continuous(vec![0.3, -0.7]);
    let tr = env.step(&a).unwrap();
    let model = EnvModel::new(Box::new(PointMass::new(1)));
    struct Half;
    impl pgvlab_core::policy::ValueFunction for Half {
        fn value(&self, obs: &[f64]) -> pgvlab_core::Result<f64> {
            Ok(0.5 * obs[0])
        }
    }
    let head = PolicyHead::new(4, &[4], &env.action_space(), pgvlab_core::ndiff::Activation::Tanh).unwrap();
    let params = head.init(&mut ChaCha8Rng::seed_from_u64(0));
    let states = Tensor::row_vector(tr.state.clone());
    let sim = simulate_q(&model, &Half, &head, &params, &states, &[a], 0, 0.9, 0.95, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert!((sim.q[0] - (tr.reward + 0.9 * 0.5 * tr.next_state[0])).abs() < 1e-12);
}

#[test]
fn learned_model_fits_pointmass() {
    let mut env = PointMass::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut buf = ReplayBuffer::new(5_000);
    let mut transitions = Vec::new();
    for _ in 0..3_000 {
        if env.needs_reset() {
            env.reset();
        }
        let a = Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let t = env.step(&a).unwrap();
        buf.push(t.clone());
        transitions.push(t);
    }
    let mut model = DynamicsModel::new(4, env.action_space(), &[32, 32], 3e-3, &mut rng).unwrap();
    let before = open_loop_errors(&model, &transitions[..500], 1, &mut rng).unwrap()[0];
    let first = train_dynamics(&mut model, &buf, 1, 128, &mut rng).unwrap();
    let last = train_dynamics(&mut model, &buf, 1500, 128, &mut rng).unwrap();
    let after = open_loop_errors(&model, &transitions[..500], 1, &mut rng).unwrap()[0];
    assert!(last.transition < 0.05 * first.transition, "{first:?} -> {last:?}");
    assert!(after < 0.1 * before, "one-step error {before} -> {after}");
    let p = model.predict(&Tensor::row_vector(transitions[0].state.clone()), &[transitions[0].action.clone()], &mut rng).unwrap();
    assert!(p.dones.iter().all(|d| !d));
}

#[test]
fn model_memorizes_a_handful_of_transitions() {
    let mut env = PointMass::new(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut buf = ReplayBuffer::new(16);
    for i in 0..16 {
        let a = Action::Continuous(vec![(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()]);
        buf.push(env.step(&a).unwrap());
    }
    let mut model = DynamicsModel::new(4, env.action_space(), &[64], 1e-2, &mut rng).unwrap();
    let loss = train_dynamics(&mut model, &buf, 3000, 16, &mut rng).unwrap();
    assert!(loss.transition < 1e-3 && loss.reward < 1e-3, "{loss:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bias_bound_invariants(
        f_s in prop::collection::vec(-3.0f64..3.0, 1..6),
        q_true in -4.0f64..4.0,
        q_hat in -4.0f64..4.0,
        k in 0.0f64..3.0,
        err in 0.0f64..2.0,
    ) {
        let b = bias_bounds(&BiasBound { f_s: f_s.clone(), q_true, q_hat, lipschitz_k: k, state_error: err }).unwrap();
        let mut excluded = 0;
        for (p, f) in f_s.iter().enumerate() {
            prop_assert_eq!(b.ma_bias[p], f * (q_true - q_hat));
            match (b.ms_bias_upper[p], b.ms_bias_lower[p]) {
                (Some(u), Some(l)) => {
                    prop_assert!(l <= b.ma_bias[p] && b.ma_bias[p] <= u);
                    prop_assert!(((u - b.ma_bias[p]) - (b.ma_bias[p] - l)).abs() < 1e-9);
                }
                (None, None) => excluded += 1,
                _ => prop_assert!(false, "bounds disagree on exclusion"),
            }
        }
        prop_assert_eq!(excluded, b.excluded);
        // Q^2 - Q >= 0 outside (0, 1), so nothing is excluded there
        if !(0.0..1.0).contains(&q_true) || q_true == 0.0 {
            prop_assert_eq!(b.excluded, 0);
        }
    }

    #[test]
    fn probe_ratios_are_scale_free(
        base in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 2..8),
        c in 0.1f64..10.0,
    ) {
        let scaled: Vec<Vec<f64>> = base.iter().map(|g| g.iter().map(|x| c * x).collect()).collect();
        let v0 = relative_variance(&base).unwrap().value;
        let v1 = relative_variance(&scaled).unwrap().value;
        prop_assert!((v0 - v1).abs() <= 1e-9 * (1.0 + v0));
        let oracle = vec![1.0, -1.0, 0.5];
        let moved: Vec<f64> = oracle.iter().map(|x| c * x).collect();
        let b0 = relative_bias(&base[0], &oracle).unwrap().value;
        let b1 = relative_bias(&scaled[0], &moved).unwrap().value;
        prop_assert!((b0 - b1).abs() <= 1e-9 * (1.0 + b0));
        prop_assert!(relative_bias(&base[0], &base[0]).unwrap().value == 0.0);
    }
}
