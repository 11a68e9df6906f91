//! One-step world models and simulated returns.

use crate::envs::{Action, ActionSpace, Env, Transition};
use crate::error::{ensure, Error, Result};
use crate::ndiff::{
    adam_step, forward_batch, forward_tape, Activation, AdamConfig, AdamState, MlpSpec, ParamVector, Segment, Tape,
    Tensor,
};
use crate::policy::{sample_dist, PolicyHead, ValueFunction};
use crate::spg::{lambda_returns, Batch};
use rand::{Rng, RngCore};
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::Mutex;

/// Batched model output for `n` state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub next_states: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

pub trait WorldModel: Sync {
    fn predict(&self, states: &Tensor, actions: &[Action], rng: &mut dyn RngCore) -> Result<Prediction>;
}

/// Per-feature affine normalizer, frozen between training calls.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        // constant features (one-hot columns that never fire) keep unit scale
        let std = var.iter().map(|v| if v.sqrt() < 1e-6 { 1.0 } else { v.sqrt() }).collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, t: &mut Tensor) {
        for i in 0..t.rows {
            for ((x, m), s) in t.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn invert(&self, t: &mut Tensor) {
        for i in 0..t.rows {
            for ((x, m), s) in t.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
    }
}

/// Action encoding with continuous actions clipped to the bounds the
/// environment applies.
pub fn encode_clipped(a: &Action, space: &ActionSpace) -> Vec<f64> {
    match (a, space) {
        (Action::Continuous(v), ActionSpace::Continuous { low, high, .. }) => {
            v.iter().map(|x| x.clamp(*low, *high)).collect()
        }
        _ => a.encode(space),
    }
}

/// Rows of `[state, encoded action]`.
pub fn state_action_inputs(states: &Tensor, actions: &[Action], space: &ActionSpace) -> Result<Tensor> {
    ensure!(actions.len() == states.rows, Shape, "{} actions for {} states", actions.len(), states.rows);
    let rows: Vec<Vec<f64>> = (0..states.rows)
        .map(|i| {
            let mut r = states.row(i).to_vec();
            r.extend(encode_clipped(&actions[i], space));
            r
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Learned transition (state delta) and reward networks.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsModel {
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub transition: MlpSpec,
    pub reward: MlpSpec,
    pub transition_params: ParamVector,
    pub reward_params: ParamVector,
    pub input_norm: Normalizer,
    pub delta_norm: Normalizer,
    pub adam: AdamConfig,
    transition_opt: AdamState,
    reward_opt: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsLosses {
    pub transition: f64,
    pub reward: f64,
}

impl DynamicsModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_space: ActionSpace,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let in_dim = state_dim + action_space.encoded_dim();
        let transition = MlpSpec::new(in_dim, hidden, state_dim, Activation::Relu)?;
        let reward = MlpSpec::new(in_dim, hidden, 1, Activation::Relu)?;
        let transition_params = transition.init(rng, 1.0);
        let reward_params = reward.init(rng, 1.0);
        Ok(DynamicsModel {
            state_dim,
            transition_opt: AdamState::new(transition_params.len()),
            reward_opt: AdamState::new(reward_params.len()),
            action_space,
            transition,
            reward,
            transition_params,
            reward_params,
            input_norm: Normalizer::identity(in_dim),
            delta_norm: Normalizer::identity(state_dim),
            adam: AdamConfig::with_lr(lr),
        })
    }

    fn encode_action(&self, a: &Action) -> Vec<f64> {
        encode_clipped(a, &self.action_space)
    }

    fn raw_inputs(&self, states: &Tensor, actions: &[Action]) -> Result<Tensor> {
        ensure!(states.cols == self.state_dim, Shape, "states have {} columns, model expects {}", states.cols, self.state_dim);
        state_action_inputs(states, actions, &self.action_space)
    }

    /// Deterministic prediction of next states and rewards.
    pub fn predict_batch(&self, states: &Tensor, actions: &[Action]) -> Result<(Tensor, Vec<f64>)> {
        let mut x = self.raw_inputs(states, actions)?;
        self.input_norm.apply(&mut x);
        let mut delta = forward_batch(&self.transition, &self.transition_params, &x)?;
        self.delta_norm.invert(&mut delta);
        for (d, s) in delta.data.iter_mut().zip(&states.data) {
            *d += s;
        }
        let r = forward_batch(&self.reward, &self.reward_params, &x)?.data;
        Ok((delta, r))
    }

    /// Persist both networks and the normalizers.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        let in_dim = self.input_norm.mean.len();
        let norms = ParamVector::new(
            [&self.input_norm.mean, &self.input_norm.std, &self.delta_norm.mean, &self.delta_norm.std]
                .into_iter()
                .flatten()
                .copied()
                .collect(),
            vec![
                Segment::new("in_mean", 1, in_dim),
                Segment::new("in_std", 1, in_dim),
                Segment::new("delta_mean", 1, self.state_dim),
                Segment::new("delta_std", 1, self.state_dim),
            ],
        )?;
        ParamVector::concat(&[
            ("transition", &self.transition_params),
            ("reward", &self.reward_params),
            ("norm", &norms),
        ])
        .write_to(w)
    }

    /// Load a checkpoint written by [`Self::save`] for the same architecture.
    pub fn load(&mut self, r: &mut impl Read) -> Result<()> {
        let all = ParamVector::read_from(r)?;
        let t = all.extract("transition")?;
        let rw = all.extract("reward")?;
        let norms = all.extract("norm")?;
        ensure!(t.layout() == self.transition_params.layout(), Format, "transition layout mismatch");
        ensure!(rw.layout() == self.reward_params.layout(), Format, "reward layout mismatch");
        let seg = |name: &str| -> Result<Vec<f64>> {
            let i = norms.segment_index(name).ok_or_else(|| Error::Format(format!("missing {name}")))?;
            Ok(norms.segment(i).to_vec())
        };
        let (im, is, dm, ds) = (seg("in_mean")?, seg("in_std")?, seg("delta_mean")?, seg("delta_std")?);
        ensure!(
            im.len() == self.input_norm.mean.len() && dm.len() == self.state_dim,
            Format,
            "normalizer dimensions mismatch"
        );
        self.transition_params = t;
        self.reward_params = rw;
        self.input_norm = Normalizer { mean: im, std: is };
        self.delta_norm = Normalizer { mean: dm, std: ds };
        Ok(())
    }
}

impl WorldModel for DynamicsModel {
    fn predict(&self, states: &Tensor, actions: &[Action], _rng: &mut dyn RngCore) -> Result<Prediction> {
        let (next_states, rewards) = self.predict_batch(states, actions)?;
        let dones = vec![false; rewards.len()];
        Ok(Prediction { next_states, rewards, dones })
    }
}

/// The real environment used as a model: every row jumps the environment to
/// the given state and steps it once. Stochastic transitions draw from the
/// environment's own RNG.
pub struct EnvModel {
    env: Mutex<Box<dyn Env>>,
}

impl EnvModel {
    pub fn new(env: Box<dyn Env>) -> Self {
        EnvModel { env: Mutex::new(env) }
    }
}

impl WorldModel for EnvModel {
    fn predict(&self, states: &Tensor, actions: &[Action], _rng: &mut dyn RngCore) -> Result<Prediction> {
        ensure!(actions.len() == states.rows, Shape, "{} actions for {} states", actions.len(), states.rows);
        let mut env = self.env.lock().map_err(|_| Error::Contract("environment model lock poisoned".into()))?;
        let mut next = Vec::with_capacity(states.rows);
        let mut rewards = Vec::with_capacity(states.rows);
        let mut dones = Vec::with_capacity(states.rows);
        for i in 0..states.rows {
            env.set_observation(states.row(i))?;
            let tr = env.step(&actions[i])?;
            next.push(tr.next_state);
            rewards.push(tr.reward);
            dones.push(tr.done);
        }
        Ok(Prediction { next_states: Tensor::from_rows(&next)?, rewards, dones })
    }
}

/// FIFO transition store.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 25_000;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), data: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn extend<'a>(&mut self, ts: impl IntoIterator<Item = &'a Transition>) {
        for t in ts {
            self.push(t.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }
}

/// Fit both networks by Adam on mean-squared error, one step per iteration
/// on a minibatch drawn with replacement. Normalizers are refitted from the
/// whole buffer first and stay frozen afterwards.
pub fn train_dynamics<R: Rng + ?Sized>(
    model: &mut DynamicsModel,
    buffer: &ReplayBuffer,
    steps: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<DynamicsLosses> {
    ensure!(!buffer.is_empty(), InvalidArgument, "dynamics buffer is empty");
    ensure!(batch_size >= 1, InvalidArgument, "batch_size must be >= 1");
    let all: Vec<&Transition> = buffer.iter().collect();
    let inputs: Vec<Vec<f64>> = all
        .iter()
        .map(|t| {
            let mut r = t.state.clone();
            r.extend(model.encode_action(&t.action));
            r
        })
        .collect();
    let deltas: Vec<Vec<f64>> =
        all.iter().map(|t| t.next_state.iter().zip(&t.state).map(|(a, b)| a - b).collect()).collect();
    model.input_norm = Normalizer::fit(&inputs);
    model.delta_norm = Normalizer::fit(&deltas);

    let mut losses = DynamicsLosses { transition: f64::NAN, reward: f64::NAN };
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..all.len())).collect();
        let mut x = Tensor::from_rows(&idx.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
        model.input_norm.apply(&mut x);
        let mut y = Tensor::from_rows(&idx.iter().map(|&i| deltas[i].clone()).collect::<Vec<_>>())?;
        model.delta_norm.apply(&mut y);
        let r = Tensor::column(idx.iter().map(|&i| all[i].reward).collect());

        let mut tape = Tape::new();
        let tg = tape.params(&model.transition_params);
        let rg = tape.params(&model.reward_params);
        let xin = tape.constant(x);
        let pred = forward_tape(&model.transition, &mut tape, &tg.vars, xin)?;
        let target = tape.constant(y);
        let err = tape.sub(pred, target)?;
        let sq = tape.square(err);
        let t_loss = tape.mean(sq);
        let rpred = forward_tape(&model.reward, &mut tape, &rg.vars, xin)?;
        let rtarget = tape.constant(r);
        let rerr = tape.sub(rpred, rtarget)?;
        let rsq = tape.square(rerr);
        let r_loss = tape.mean(rsq);
        let tl = tape.value(t_loss).item();
        let rl = tape.value(r_loss).item();
        ensure!(tl.is_finite() && rl.is_finite(), Numeric, "non-finite dynamics loss ({tl}, {rl})");
        let total = tape.add(t_loss, r_loss)?;
        let grads = tape.backward(total)?;
        adam_step(&mut model.transition_params, grads.of(&tg), &mut model.transition_opt, &model.adam)?;
        adam_step(&mut model.reward_params, grads.of(&rg), &mut model.reward_opt, &model.adam)?;
        losses = DynamicsLosses { transition: tl, reward: rl };
    }
    Ok(losses)
}

/// Largest state magnitude a simulated rollout may reach.
pub const STATE_CLAMP: f64 = 1e6;

/// Replace non-finite entries by the previous state and clamp the rest;
/// returns how many rows needed fixing.
fn sanitize(next: &mut Tensor, prev: &Tensor) -> usize {
    let mut flagged = 0;
    for i in 0..next.rows {
        let mut bad = false;
        let cols = next.cols;
        for j in 0..cols {
            let x = next.data[i * cols + j];
            if !x.is_finite() {
                next.data[i * cols + j] = prev.data[i * cols + j];
                bad = true;
            } else if x.abs() > STATE_CLAMP {
                next.data[i * cols + j] = x.clamp(-STATE_CLAMP, STATE_CLAMP);
                bad = true;
            }
        }
        flagged += bad as usize;
    }
    flagged
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedQ {
    pub q: Vec<f64>,
    /// Rows whose simulated state had to be clamped or repaired.
    pub flagged: usize,
}

/// Q-value estimates for `(states[i], actions[i])`: unroll the model for
/// `horizon` more policy steps and form the lambda-return of the predicted
/// rewards, bootstrapped with critic values. `horizon = 0` gives
/// `r + gamma V(s')`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_q(
    model: &dyn WorldModel,
    critic: &dyn ValueFunction,
    head: &PolicyHead,
    params: &ParamVector,
    states: &Tensor,
    actions: &[Action],
    horizon: usize,
    gamma: f64,
    lam: f64,
    rng: &mut dyn RngCore,
) -> Result<SimulatedQ> {
    ensure!(actions.len() == states.rows, Shape, "{} actions for {} states", actions.len(), states.rows);
    ensure!((0.0..=1.0).contains(&gamma) && (0.0..=1.0).contains(&lam), InvalidArgument, "gamma/lambda out of range");
    let n = states.rows;
    let mut cur = states.clone();
    let mut acts = actions.to_vec();
    let mut rewards = Vec::with_capacity(horizon + 1);
    let mut values = Vec::with_capacity(horizon + 1);
    let mut dones = Vec::with_capacity(horizon + 1);
    let mut flagged = 0;
    for k in 0..=horizon {
        let mut pred = model.predict(&cur, &acts, rng)?;
        flagged += sanitize(&mut pred.next_states, &cur);
        values.push(critic.values(&pred.next_states)?);
        rewards.push(pred.rewards);
        dones.push(pred.dones);
        if k < horizon {
            let dists = head.distributions(params, &pred.next_states)?;
            acts = dists.iter().map(|d| sample_dist(d, rng)).collect();
        }
        cur = pred.next_states;
    }
    let mut q = vec![0.0; n];
    for i in 0..n {
        let live = |k: usize| if dones[k][i] { 0.0 } else { 1.0 };
        let mut g = rewards[horizon][i] + gamma * live(horizon) * values[horizon][i];
        for k in (0..horizon).rev() {
            g = rewards[k][i] + gamma * live(k) * ((1.0 - lam) * values[k][i] + lam * g);
        }
        q[i] = g;
    }
    Ok(SimulatedQ { q, flagged })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedRollout {
    /// `length` simulated transitions per start state, start-major.
    pub batch: Batch,
    pub flagged: usize,
}

/// Branch rollouts of `length` simulated transitions from every start state.
/// The first transition of each branch starts at the real state with a
/// fresh policy action.
#[allow(clippy::too_many_arguments)]
pub fn simulate_rollout(
    model: &dyn WorldModel,
    critic: &dyn ValueFunction,
    head: &PolicyHead,
    params: &ParamVector,
    starts: &Tensor,
    length: usize,
    gamma: f64,
    lam: f64,
    rng: &mut dyn RngCore,
) -> Result<SimulatedRollout> {
    ensure!(length >= 1, InvalidArgument, "rollout length must be >= 1");
    let n = starts.rows;
    let mut cur = starts.clone();
    let mut steps: Vec<(Tensor, Vec<Action>, Vec<f64>, Prediction, Vec<f64>, Vec<f64>)> = Vec::with_capacity(length);
    let mut flagged = 0;
    for _ in 0..length {
        let dists = head.distributions(params, &cur)?;
        let acts: Vec<Action> = dists.iter().map(|d| sample_dist(d, rng)).collect();
        let logp = dists.iter().zip(&acts).map(|(d, a)| crate::policy::dist_log_prob(d, a)).collect::<Result<Vec<_>>>()?;
        let mut pred = model.predict(&cur, &acts, rng)?;
        flagged += sanitize(&mut pred.next_states, &cur);
        let v = critic.values(&cur)?;
        let nv = critic.values(&pred.next_states)?;
        let next = pred.next_states.clone();
        steps.push((cur, acts, logp, pred, v, nv));
        cur = next;
    }
    let mut batch = Batch::default();
    for i in 0..n {
        let mut rewards = Vec::with_capacity(length);
        let mut vals = Vec::with_capacity(length);
        let mut nvals = Vec::with_capacity(length);
        let mut done = Vec::with_capacity(length);
        for (s, acts, logp, pred, v, nv) in &steps {
            rewards.push(pred.rewards[i]);
            vals.push(v[i]);
            nvals.push(nv[i]);
            done.push(pred.dones[i]);
            batch.transitions.push(Transition {
                state: s.row(i).to_vec(),
                action: acts[i].clone(),
                reward: pred.rewards[i],
                next_state: pred.next_states.row(i).to_vec(),
                done: pred.dones[i],
                truncated: false,
            });
            batch.values.push(v[i]);
            batch.log_probs.push(logp[i]);
        }
        // steps after a predicted termination keep the terminal bootstrap
        let (ret, adv) = lambda_returns(&rewards, &vals, &nvals, &done, &vec![false; length], gamma.max(f64::MIN_POSITIVE), lam)?;
        batch.lambda_returns.extend(ret);
        batch.advantages.extend(adv);
    }
    Ok(SimulatedRollout { batch, flagged })
}

/// Mean squared open-loop state error after `k = 1..=k_max` model steps,
/// replaying recorded actions from windows that stay inside one episode.
pub fn open_loop_errors(model: &dyn WorldModel, transitions: &[Transition], k_max: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let starts: Vec<usize> = (0..transitions.len().saturating_sub(k - 1))
            .filter(|&i| transitions[i..i + k - 1].iter().all(|t| !t.done && !t.truncated))
            .filter(|&i| (i..i + k - 1).all(|j| transitions[j].next_state == transitions[j + 1].state))
            .collect();
        ensure!(!starts.is_empty(), Degenerate, "no window of length {k}");
        let mut cur = Tensor::from_rows(&starts.iter().map(|&i| transitions[i].state.clone()).collect::<Vec<_>>())?;
        for j in 0..k {
            let acts: Vec<Action> = starts.iter().map(|&i| transitions[i + j].action.clone()).collect();
            cur = model.predict(&cur, &acts, rng)?.next_states;
        }
        let mut err = 0.0;
        for (r, &i) in starts.iter().enumerate() {
            let truth = &transitions[i + k - 1].next_state;
            err += cur.row(r).iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        out.push(err / starts.len() as f64);
    }
    Ok(out)
}

/// Inputs of the per-parameter bias expressions for one state-action pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasBound {
    /// `grad log pi(a|s)` per parameter.
    pub f_s: Vec<f64>,
    pub q_true: f64,
    pub q_hat: f64,
    /// Lipschitz constant of `s -> grad log pi(a|s)`.
    pub lipschitz_k: f64,
    /// `|s - s*|`.
    pub state_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasBounds {
    /// `f_s (Q - Q_hat)`, exact for simulated actions.
    pub ma_bias: Vec<f64>,
    /// `f_s (Q - Q_hat) + sqrt((K |s - s*|)^2 + f_s^2 (Q^2 - Q))` for
    /// simulated states; `None` where the radicand is negative.
    pub ms_bias_upper: Vec<Option<f64>>,
    /// The matching lower end with the root subtracted.
    pub ms_bias_lower: Vec<Option<f64>>,
    /// Parameters dropped for a negative radicand.
    pub excluded: usize,
}

pub fn bias_bounds(b: &BiasBound) -> Result<BiasBounds> {
    ensure!(b.lipschitz_k.is_finite() && b.lipschitz_k >= 0.0, InvalidArgument, "Lipschitz constant must be finite and >= 0");
    ensure!(b.state_error >= 0.0, InvalidArgument, "state error must be >= 0");
    ensure!(b.q_true.is_finite() && b.q_hat.is_finite(), Numeric, "Q-values must be finite");
    let dq = b.q_true - b.q_hat;
    let lip = (b.lipschitz_k * b.state_error).powi(2);
    let mut out = BiasBounds {
        ma_bias: Vec::with_capacity(b.f_s.len()),
        ms_bias_upper: Vec::with_capacity(b.f_s.len()),
        ms_bias_lower: Vec::with_capacity(b.f_s.len()),
        excluded: 0,
    };
    for &f in &b.f_s {
        let ma = f * dq;
        let radicand = lip + f * f * (b.q_true * b.q_true - b.q_true);
        out.ma_bias.push(ma);
        if radicand >= 0.0 {
            out.ms_bias_upper.push(Some(ma + radicand.sqrt()));
            out.ms_bias_lower.push(Some(ma - radicand.sqrt()));
        } else {
            out.ms_bias_upper.push(None);
            out.ms_bias_lower.push(None);
            out.excluded += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::PointMass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ma_row() {
        let b = bias_bounds(&BiasBound { f_s: vec![2.0], q_true: 5.0, q_hat: 4.5, lipschitz_k: 1.0, state_error: 0.3 }).unwrap();
        assert_eq!(b.ma_bias, vec![1.0]);
    }

    #[test]
    fn ms_collapses_without_state_error() {
        for q in [0.0, 1.0] {
            let b = bias_bounds(&BiasBound { f_s: vec![0.7, -1.3], q_true: q, q_hat: 0.2, lipschitz_k: 3.0, state_error: 0.0 })
                .unwrap();
            for (u, m) in b.ms_bias_upper.iter().zip(&b.ma_bias) {
                assert_eq!(u.unwrap(), *m);
            }
        }
    }

    #[test]
    fn negative_radicand_excluded() {
        let b = bias_bounds(&BiasBound { f_s: vec![1.0], q_true: 0.5, q_hat: 0.0, lipschitz_k: 0.0, state_error: 0.0 }).unwrap();
        assert_eq!(b.excluded, 1);
        assert!(b.ms_bias_upper[0].is_none());
    }

    #[test]
    fn buffer_is_fifo() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Transition {
                state: vec![i as f64],
                action: Action::Discrete(0),
                reward: 0.0,
                next_state: vec![0.0],
                done: false,
                truncated: false,
            });
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).state, vec![2.0]);
    }

    #[test]
    fn env_model_reproduces_env() {
        let model = EnvModel::new(Box::new(PointMass::new(0)));
        let mut env = PointMass::new(1);
        env.set_state([0.3, -0.2, 0.1, 0.0]);
        let a = Action::Continuous(vec![0.5, -0.5]);
        let t = env.step(&a).unwrap();
        let p = model
            .predict(&Tensor::row_vector(t.state.clone()), &[a], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(p.next_states.data, t.next_state);
        assert_eq!(p.rewards[0], t.reward);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let space = ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 };
        let mut a = DynamicsModel::new(4, space.clone(), &[8], 1e-3, &mut rng).unwrap();
        a.input_norm.mean[0] = 0.25;
        let mut buf = Vec::new();
        a.save(&mut buf).unwrap();
        let mut b = DynamicsModel::new(4, space, &[8], 1e-3, &mut rng).unwrap();
        b.load(&mut buf.as_slice()).unwrap();
        assert_eq!(a.transition_params, b.transition_params);
        assert_eq!(a.input_norm, b.input_norm);
    }
}
