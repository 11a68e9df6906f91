//! Score-function policy-gradient estimators.
//!
//! A gradient sample is `(1/T) sum_t w_t (1/N) sum_n A_t^n grad log pi(a_t^n | s_t)`
//! where `n = 0` is the executed action and `n >= 1` are extra actions
//! whose Q-values come from rewinding, a model or a Q-network.

use crate::envs::{Action, Env, RewindToken, Transition};
use crate::error::{ensure, Result};
use crate::ndiff::{ParamVector, Tensor};
use crate::policy::{PolicyHead, ValueFunction};
use rand::Rng;

/// TD(lambda) returns and GAE advantages.
///
/// `next_values[t]` is `V(s'_t)`. A terminal step (`dones`) drops the
/// bootstrap; a truncated step keeps it but cuts the trace, as does the end
/// of the slice.
pub fn lambda_returns(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    truncated: &[bool],
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    ensure!(
        values.len() == n && next_values.len() == n && dones.len() == n && truncated.len() == n,
        Shape,
        "lambda_returns: mismatched lengths"
    );
    ensure!(gamma > 0.0 && gamma <= 1.0, InvalidArgument, "gamma {gamma} not in (0,1]");
    ensure!((0.0..=1.0).contains(&lam), InvalidArgument, "lambda {lam} not in [0,1]");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_values[t] - values[t];
        let carry = if dones[t] || truncated[t] || t + 1 == n { 0.0 } else { 1.0 };
        adv[t] = delta + gamma * lam * carry * next_adv;
        next_adv = adv[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((ret, adv))
}

/// One per-parameter term `gamma^t q grad log pi(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTerm {
    pub grad: Vec<f64>,
    pub t: usize,
    pub n: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn grad_term(
    head: &PolicyHead,
    params: &ParamVector,
    obs: &[f64],
    action: &Action,
    q_estimate: f64,
    t: usize,
    n: usize,
    gamma: f64,
) -> Result<GradTerm> {
    ensure!(q_estimate.is_finite(), Numeric, "q_estimate must be finite");
    head.log_prob(params, obs, action)?;
    let w = gamma.powi(t as i32) * q_estimate;
    let grad = head.weighted_score(params, &Tensor::row_vector(obs.to_vec()), std::slice::from_ref(action), &[w])?;
    Ok(GradTerm { grad, t, n })
}

/// A simulated or rewound extra action at a real state.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtraAction {
    pub action: Action,
    pub q_estimate: f64,
    pub old_log_prob: f64,
}

/// `T` on-policy transitions with optional extra actions per state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    /// `V(s_t)` under the critic at collection time.
    pub values: Vec<f64>,
    /// `log pi_old(a_t | s_t)` of the executed actions.
    pub log_probs: Vec<f64>,
    pub lambda_returns: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per state, the `N - 1` extra actions (all lists have equal length).
    pub extra: Vec<Vec<ExtraAction>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Actions per state, counting the executed one.
    pub fn n_actions_per_state(&self) -> usize {
        1 + self.extra.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        ensure!(t > 0, InvalidArgument, "empty batch");
        ensure!(
            self.values.len() == t
                && self.log_probs.len() == t
                && self.lambda_returns.len() == t
                && self.advantages.len() == t,
            Shape,
            "batch columns disagree on T = {t}"
        );
        ensure!(self.extra.is_empty() || self.extra.len() == t, Shape, "extra actions for {} of {t} states", self.extra.len());
        let k = self.n_actions_per_state() - 1;
        ensure!(self.extra.iter().all(|e| e.len() == k), Shape, "states carry different numbers of extra actions");
        Ok(())
    }

    pub fn states(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.transitions.iter().map(|t| t.state.clone()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ac,
    Ppo,
    Qma,
    Mbma,
    Mbpo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ac => "AC",
            Method::Ppo => "PPO",
            Method::Qma => "QMA",
            Method::Mbma => "MBMA",
            Method::Mbpo => "MBPO",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AC" => Ok(Method::Ac),
            "PPO" => Ok(Method::Ppo),
            "QMA" => Ok(Method::Qma),
            "MBMA" => Ok(Method::Mbma),
            "MBPO" => Ok(Method::Mbpo),
            _ => Err(crate::Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub method: Method,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpgOptions {
    /// Subtract `V(s_t)`: executed actions use the GAE advantage, extra
    /// actions `q - V(s_t)`. Otherwise raw Q-values (the lambda-return for
    /// the executed action) are used.
    pub use_baseline: bool,
    /// Weight step `t` by `gamma^t`; `None` weights all steps equally.
    pub discount: Option<f64>,
}

impl Default for SpgOptions {
    fn default() -> Self {
        SpgOptions { use_baseline: true, discount: None }
    }
}

/// Flattened `(state, action, weight)` rows whose weighted score sum is the
/// estimate.
pub fn estimator_rows(batch: &Batch, opts: SpgOptions) -> Result<(Vec<Vec<f64>>, Vec<Action>, Vec<f64>)> {
    batch.validate()?;
    let t_len = batch.len() as f64;
    let n = batch.n_actions_per_state() as f64;
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    let mut weights = Vec::new();
    for (t, tr) in batch.transitions.iter().enumerate() {
        let disc = opts.discount.map_or(1.0, |g| g.powi(t as i32));
        let base = if opts.use_baseline { batch.values[t] } else { 0.0 };
        let a0 = if opts.use_baseline { batch.advantages[t] } else { batch.lambda_returns[t] };
        obs.push(tr.state.clone());
        actions.push(tr.action.clone());
        weights.push(disc * a0 / (t_len * n));
        if let Some(extra) = batch.extra.get(t) {
            for e in extra {
                ensure!(e.q_estimate.is_finite(), Numeric, "non-finite extra q at step {t}");
                obs.push(tr.state.clone());
                actions.push(e.action.clone());
                weights.push(disc * (e.q_estimate - base) / (t_len * n));
            }
        }
    }
    Ok((obs, actions, weights))
}

pub fn estimate_spg(
    batch: &Batch,
    head: &PolicyHead,
    params: &ParamVector,
    opts: SpgOptions,
    method: Method,
    seed: u64,
) -> Result<GradientEstimate> {
    let (obs, actions, weights) = estimator_rows(batch, opts)?;
    let grad = head.weighted_score(params, &Tensor::from_rows(&obs)?, &actions, &weights)?;
    ensure!(grad.iter().all(|g| g.is_finite()), Numeric, "non-finite gradient estimate");
    Ok(GradientEstimate { grad, method, n: batch.n_actions_per_state(), t: batch.len(), seed })
}

/// Extra actions at the snapshot's state, valued by rewinding the
/// environment: take the action, follow the policy for `horizon` more
/// steps, then bootstrap with the critic. The environment is left restored
/// to `token`.
#[allow(clippy::too_many_arguments)]
pub fn many_action_sample_env<R: Rng + ?Sized>(
    env: &mut dyn Env,
    token: &RewindToken,
    head: &PolicyHead,
    params: &ParamVector,
    n_extra: usize,
    horizon: usize,
    gamma: f64,
    critic: &dyn ValueFunction,
    rng: &mut R,
) -> Result<Vec<ExtraAction>> {
    env.restore(token)?;
    let root = env.observe();
    let mut out = Vec::with_capacity(n_extra);
    for _ in 0..n_extra {
        env.restore(token)?;
        let action = head.sample(params, &root, rng)?;
        let old_log_prob = head.log_prob(params, &root, &action)?;
        let q_estimate = rollout_return(env, &action, head, params, horizon, gamma, critic, rng)?;
        out.push(ExtraAction { action, q_estimate, old_log_prob });
    }
    env.restore(token)?;
    Ok(out)
}

/// Discounted return of `first` then `horizon` policy steps, bootstrapped
/// with the critic unless the episode terminated.
#[allow(clippy::too_many_arguments)]
pub fn rollout_return<R: Rng + ?Sized>(
    env: &mut dyn Env,
    first: &Action,
    head: &PolicyHead,
    params: &ParamVector,
    horizon: usize,
    gamma: f64,
    critic: &dyn ValueFunction,
    rng: &mut R,
) -> Result<f64> {
    let mut tr = env.step(first)?;
    let mut total = tr.reward;
    let mut disc = gamma;
    for _ in 0..horizon {
        if tr.done || tr.truncated {
            break;
        }
        let a = head.sample(params, &tr.next_state, rng)?;
        tr = env.step(&a)?;
        total += disc * tr.reward;
        disc *= gamma;
    }
    if !tr.done {
        total += disc * critic.value(&tr.next_state)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monte_carlo_case() {
        let (ret, _) = lambda_returns(
            &[1.0, 1.0, 1.0],
            &[5.0, -3.0, 0.7],
            &[-3.0, 0.7, 9.0],
            &[false, false, true],
            &[false; 3],
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(ret, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn one_step_bootstrap_at_lambda_zero() {
        let r = [0.5, -1.0, 2.0, 0.1];
        let v = [0.3, 0.2, -0.4, 1.0];
        let nv = [0.2, -0.4, 1.0, 0.6];
        let d = [false, false, true, false];
        let (ret, _) = lambda_returns(&r, &v, &nv, &d, &[false; 4], 0.9, 0.0).unwrap();
        for t in 0..4 {
            let want = r[t] + 0.9 * nv[t] * if d[t] { 0.0 } else { 1.0 };
            assert!((ret[t] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(lambda_returns(&[1.0], &[], &[0.0], &[false], &[false], 0.9, 0.9).is_err());
    }

    #[test]
    fn method_roundtrip() {
        for m in [Method::Ac, Method::Ppo, Method::Qma, Method::Mbma, Method::Mbpo] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
