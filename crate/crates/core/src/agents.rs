//! A shared PPO core with four ways of adding simulated gradient samples,
//! plus the rewinding actor-critic used for the CartPole batch-size study.

use crate::dynamics::{
    simulate_q, simulate_rollout, state_action_inputs, train_dynamics, DynamicsModel, ReplayBuffer, WorldModel,
    DEFAULT_BUFFER_CAPACITY,
};
use crate::envs::{Action, ActionSpace, CartPole, Env};
use crate::error::{ensure, Error, Result};
use crate::ndiff::{
    adam_step, forward_batch, forward_tape, global_norm, Activation, AdamConfig, AdamState, MlpSpec, ParamVector, Tape,
    Tensor,
};
use crate::policy::{dist_log_prob, sample_dist, Critic, PolicyHead, ValueFunction};
use crate::spg::{estimate_spg, lambda_returns, many_action_sample_env, Batch, ExtraAction, Method, SpgOptions};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Ppo,
    Qma,
    Mbpo,
    Mbma,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ppo, Variant::Qma, Variant::Mbpo, Variant::Mbma];

    pub fn method(self) -> Method {
        match self {
            Variant::Ppo => Method::Ppo,
            Variant::Qma => Method::Qma,
            Variant::Mbpo => Method::Mbpo,
            Variant::Mbma => Method::Mbma,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.method().as_str()
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<Method>()? {
            Method::Ppo => Ok(Variant::Ppo),
            Method::Qma => Ok(Variant::Qma),
            Method::Mbpo => Ok(Variant::Mbpo),
            Method::Mbma => Ok(Variant::Mbma),
            Method::Ac => Err(Error::InvalidArgument("AC is a probe method, not a training variant".into())),
        }
    }
}

/// How the number of simulated samples moves during the annealing window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnealDirection {
    /// 0 at the start, the full count from the end of the window on.
    Up,
    /// The full count at the start, 0 from the end of the window on.
    Down,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub variant: Variant,
    /// Real transitions per update.
    pub batch_size: usize,
    /// Simulated samples per real state.
    pub extra: usize,
    /// Model steps after the first simulated transition.
    pub horizon: usize,
    pub clip: f64,
    pub lam: f64,
    pub gamma: f64,
    pub epochs: usize,
    /// Real states per minibatch; their simulated samples come along.
    pub minibatch: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub anneal_fraction: f64,
    pub anneal: AnnealDirection,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub model_hidden: Vec<usize>,
    pub model_lr: f64,
    pub model_steps: usize,
    pub model_batch: usize,
    pub q_hidden: Vec<usize>,
    pub q_lr: f64,
    pub q_epochs: usize,
    pub buffer_capacity: usize,
    /// Train the Q-networks and the dynamics model whatever the variant
    /// (the probe's gathering agent needs both).
    pub train_all_models: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::Ppo,
            batch_size: 2048,
            extra: 8,
            horizon: 12,
            clip: 0.2,
            lam: 0.95,
            gamma: 0.99,
            epochs: 10,
            minibatch: 64,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            anneal_fraction: 0.15,
            anneal: AnnealDirection::Up,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            model_hidden: vec![64, 64],
            model_lr: 1e-3,
            model_steps: 200,
            model_batch: 256,
            q_hidden: vec![64, 64],
            q_lr: 1e-3,
            q_epochs: 10,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            train_all_models: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be >= 1");
        ensure!(self.minibatch >= 1, InvalidArgument, "minibatch must be >= 1");
        ensure!(self.gamma > 0.0 && self.gamma <= 1.0, InvalidArgument, "gamma {} not in (0,1]", self.gamma);
        ensure!((0.0..=1.0).contains(&self.lam), InvalidArgument, "lam {} not in [0,1]", self.lam);
        ensure!(self.clip > 0.0 && self.clip < 1.0, InvalidArgument, "clip {} not in (0,1)", self.clip);
        ensure!(
            (0.0..=1.0).contains(&self.anneal_fraction),
            InvalidArgument,
            "anneal_fraction {} not in [0,1]",
            self.anneal_fraction
        );
        ensure!(self.max_grad_norm > 0.0, InvalidArgument, "max_grad_norm must be > 0");
        ensure!(self.actor_lr > 0.0 && self.critic_lr > 0.0, InvalidArgument, "learning rates must be > 0");
        Ok(())
    }

    /// Simulated samples per state at `step` of a `total`-step run.
    pub fn extra_at(&self, step: usize, total: usize) -> usize {
        if self.variant == Variant::Ppo {
            return 0;
        }
        let window = self.anneal_fraction * total as f64;
        let progress = if window <= 0.0 { 1.0 } else { (step as f64 / window).min(1.0) };
        let up = (self.extra as f64 * progress).floor() as usize;
        match self.anneal {
            AnnealDirection::Up => up,
            AnnealDirection::Down => self.extra - up,
        }
    }
}

/// Independent random streams of one run.
#[derive(Clone, Debug)]
pub struct Streams {
    pub collect: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub update: ChaCha8Rng,
    pub models: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams { collect: stream(1), augment: stream(2), update: stream(3), models: stream(4) }
    }
}

/// Run the policy for `t` steps, resetting at episode ends, and attach
/// critic values and lambda-returns.
#[allow(clippy::too_many_arguments)]
pub fn collect<R: Rng + ?Sized>(
    env: &mut dyn Env,
    head: &PolicyHead,
    params: &ParamVector,
    critic: &dyn ValueFunction,
    t: usize,
    gamma: f64,
    lam: f64,
    rng: &mut R,
) -> Result<Batch> {
    ensure!(t >= 1, InvalidArgument, "collect needs t >= 1");
    let mut batch = Batch::default();
    for _ in 0..t {
        if env.needs_reset() {
            env.reset();
        }
        let obs = env.observe();
        let dist = head.distribution(params, &obs)?;
        let action = sample_dist(&dist, rng);
        batch.log_probs.push(dist_log_prob(&dist, &action)?);
        batch.transitions.push(env.step(&action)?);
    }
    batch.values = critic.values(&batch.states()?)?;
    let next = Tensor::from_rows(&batch.transitions.iter().map(|t| t.next_state.clone()).collect::<Vec<_>>())?;
    let next_values = critic.values(&next)?;
    let rewards: Vec<f64> = batch.transitions.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = batch.transitions.iter().map(|t| t.done).collect();
    let truncated: Vec<bool> = batch.transitions.iter().map(|t| t.truncated).collect();
    let (ret, adv) = lambda_returns(&rewards, &batch.values, &next_values, &dones, &truncated, gamma, lam)?;
    batch.lambda_returns = ret;
    batch.advantages = adv;
    Ok(batch)
}

/// Mean undiscounted return of greedy episodes.
pub fn evaluate(env: &mut dyn Env, head: &PolicyHead, params: &ParamVector, episodes: usize) -> Result<f64> {
    ensure!(episodes >= 1, InvalidArgument, "evaluate needs at least one episode");
    let cap = env.max_steps().unwrap_or(1000);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset();
        for _ in 0..cap {
            let tr = env.step(&head.greedy(params, &obs)?)?;
            total += tr.reward;
            if tr.done || tr.truncated {
                break;
            }
            obs = tr.next_state;
        }
    }
    Ok(total / episodes as f64)
}

/// One state-action value network.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    pub net: MlpSpec,
    pub params: ParamVector,
    opt: AdamState,
}

/// Two independently initialized Q-networks; extra actions are valued by
/// the smaller prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinQ {
    pub action_space: ActionSpace,
    pub nets: [QNetwork; 2],
    pub adam: AdamConfig,
}

impl TwinQ {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_space: ActionSpace,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(obs_dim + action_space.encoded_dim(), hidden, 1, Activation::Relu)?;
        let mut make = || {
            let params = spec.init(rng, 1.0);
            QNetwork { net: spec.clone(), opt: AdamState::new(params.len()), params }
        };
        let nets = [make(), make()];
        Ok(TwinQ { action_space, nets, adam: AdamConfig::with_lr(lr) })
    }

    pub fn predict(&self, states: &Tensor, actions: &[Action]) -> Result<[Vec<f64>; 2]> {
        let x = state_action_inputs(states, actions, &self.action_space)?;
        Ok([
            forward_batch(&self.nets[0].net, &self.nets[0].params, &x)?.data,
            forward_batch(&self.nets[1].net, &self.nets[1].params, &x)?.data,
        ])
    }

    pub fn min_q(&self, states: &Tensor, actions: &[Action]) -> Result<Vec<f64>> {
        let [a, b] = self.predict(states, actions)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }
}

/// Regress both networks onto `targets` (lambda-returns of the executed
/// actions) with shuffled minibatches. Returns the last minibatch MSE of
/// each network.
#[allow(clippy::too_many_arguments)]
pub fn train_q_networks<R: Rng + ?Sized>(
    q: &mut TwinQ,
    states: &Tensor,
    actions: &[Action],
    targets: &[f64],
    epochs: usize,
    minibatch: usize,
    rng: &mut R,
) -> Result<[f64; 2]> {
    ensure!(targets.len() == states.rows, Shape, "{} targets for {} states", targets.len(), states.rows);
    ensure!(minibatch >= 1, InvalidArgument, "minibatch must be >= 1");
    let x = state_action_inputs(states, actions, &q.action_space)?;
    let mut idx: Vec<usize> = (0..x.rows).collect();
    let mut last = [f64::NAN; 2];
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(minibatch) {
            let xb = x.select_rows(chunk);
            let yb = Tensor::column(chunk.iter().map(|&i| targets[i]).collect());
            for (k, net) in q.nets.iter_mut().enumerate() {
                let mut tape = Tape::new();
                let g = tape.params(&net.params);
                let xin = tape.constant(xb.clone());
                let pred = forward_tape(&net.net, &mut tape, &g.vars, xin)?;
                let y = tape.constant(yb.clone());
                let err = tape.sub(pred, y)?;
                let sq = tape.square(err);
                let loss = tape.mean(sq);
                let l = tape.value(loss).item();
                ensure!(l.is_finite(), Numeric, "non-finite Q loss");
                let grads = tape.backward(loss)?;
                adam_step(&mut net.params, grads.of(&g), &mut net.opt, &q.adam)?;
                last[k] = l;
            }
        }
    }
    Ok(last)
}

/// Optional simulators available to [`augment`].
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub q: Option<&'a TwinQ>,
    pub world: Option<&'a dyn WorldModel>,
}

/// A batch whose first `n_real` transitions are real. For MBPO the
/// simulated transitions follow, `group` of them per real state in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub batch: Batch,
    pub n_real: usize,
    pub group: usize,
    /// Simulated states that had to be clamped or repaired.
    pub flagged: usize,
}

impl Augmented {
    pub fn real(batch: Batch) -> Self {
        let n_real = batch.len();
        Augmented { batch, n_real, group: 0, flagged: 0 }
    }

    /// Real states of the batch.
    pub fn real_states(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.batch.transitions[..self.n_real].iter().map(|t| t.state.clone()).collect::<Vec<_>>())
    }
}

fn sample_extra_actions(
    head: &PolicyHead,
    params: &ParamVector,
    states: &Tensor,
    x: usize,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, Vec<Action>, Vec<f64>)> {
    let dists = head.distributions(params, states)?;
    let mut rows = Vec::with_capacity(states.rows * x);
    let mut actions = Vec::with_capacity(states.rows * x);
    let mut logp = Vec::with_capacity(states.rows * x);
    for (i, d) in dists.iter().enumerate() {
        for _ in 0..x {
            let a = sample_dist(d, rng);
            logp.push(dist_log_prob(d, &a)?);
            actions.push(a);
            rows.push(states.row(i).to_vec());
        }
    }
    Ok((Tensor::from_rows(&rows)?, actions, logp))
}

/// Add `x` simulated samples per real state according to the variant.
#[allow(clippy::too_many_arguments)]
pub fn augment(
    batch: Batch,
    variant: Variant,
    models: Models<'_>,
    head: &PolicyHead,
    params: &ParamVector,
    critic: &dyn ValueFunction,
    x: usize,
    horizon: usize,
    gamma: f64,
    lam: f64,
    rng: &mut dyn RngCore,
) -> Result<Augmented> {
    batch.validate()?;
    if variant == Variant::Ppo || x == 0 {
        return Ok(Augmented::real(batch));
    }
    let states = batch.states()?;
    let t = batch.len();
    match variant {
        Variant::Ppo => unreachable!(),
        Variant::Qma | Variant::Mbma => {
            let (rows, actions, logp) = sample_extra_actions(head, params, &states, x, rng)?;
            let (q, flagged) = if variant == Variant::Qma {
                let qn = models.q.ok_or_else(|| Error::Contract("QMA needs Q-networks".into()))?;
                (qn.min_q(&rows, &actions)?, 0)
            } else {
                let world = models.world.ok_or_else(|| Error::Contract("MBMA needs a dynamics model".into()))?;
                let sim = simulate_q(world, critic, head, params, &rows, &actions, horizon, gamma, lam, rng)?;
                (sim.q, sim.flagged)
            };
            let mut batch = batch;
            let mut it = actions.into_iter().zip(q).zip(logp);
            batch.extra = (0..t)
                .map(|_| {
                    (&mut it)
                        .take(x)
                        .map(|((action, q_estimate), old_log_prob)| ExtraAction { action, q_estimate, old_log_prob })
                        .collect()
                })
                .collect();
            Ok(Augmented { batch, n_real: t, group: 0, flagged })
        }
        Variant::Mbpo => {
            let world = models.world.ok_or_else(|| Error::Contract("MBPO needs a dynamics model".into()))?;
            let sim = simulate_rollout(world, critic, head, params, &states, x, gamma, lam, rng)?;
            let mut batch = batch;
            batch.transitions.extend(sim.batch.transitions);
            batch.values.extend(sim.batch.values);
            batch.log_probs.extend(sim.batch.log_probs);
            batch.lambda_returns.extend(sim.batch.lambda_returns);
            batch.advantages.extend(sim.batch.advantages);
            Ok(Augmented { batch, n_real: t, group: x, flagged: sim.flagged })
        }
    }
}

/// Actor, critic and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub head: PolicyHead,
    pub actor: ParamVector,
    pub critic: Critic,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub actor_adam: AdamConfig,
    pub critic_adam: AdamConfig,
}

impl Learner {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        space: &ActionSpace,
        hidden: &[usize],
        activation: Activation,
        actor_lr: f64,
        critic_lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let head = PolicyHead::new(obs_dim, hidden, space, activation)?;
        let actor = head.init(rng);
        let critic = Critic::new(obs_dim, hidden, activation, rng)?;
        Ok(Learner {
            actor_opt: AdamState::new(actor.len()),
            critic_opt: AdamState::new(critic.params.len()),
            head,
            actor,
            critic,
            actor_adam: AdamConfig::with_lr(actor_lr),
            critic_adam: AdamConfig::with_lr(critic_lr),
        })
    }
}

/// Scale `g` to global norm at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(g: &mut [f64], max: f64) -> f64 {
    let n = global_norm(g);
    if n > max {
        let k = max / n;
        g.iter_mut().for_each(|x| *x *= k);
    }
    n
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub minibatches: usize,
    /// Set when a non-finite loss aborted the update; parameters and
    /// optimizer state are then left as they were.
    pub discarded: bool,
    /// Real states the value loss saw, summed over minibatches.
    pub value_rows: usize,
}

struct Row {
    obs: usize,
    action: usize,
    adv: f64,
    old_log_prob: f64,
}

/// Clipped-surrogate epochs over all gradient samples and value regression
/// on the real states only.
pub fn ppo_update<R: Rng + ?Sized>(
    aug: &Augmented,
    learner: &mut Learner,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let b = &aug.batch;
    b.validate()?;
    let t = aug.n_real;
    ensure!(t >= 1 && t <= b.len(), Shape, "n_real {t} outside batch of {}", b.len());
    ensure!(b.len() == t + t * aug.group, Shape, "simulated transitions do not form groups of {}", aug.group);

    let mut actions: Vec<Action> = b.transitions.iter().map(|tr| tr.action.clone()).collect();
    let mut groups: Vec<Vec<Row>> = Vec::with_capacity(t);
    for i in 0..t {
        let mut rows = vec![Row { obs: i, action: i, adv: b.advantages[i], old_log_prob: b.log_probs[i] }];
        if let Some(extra) = b.extra.get(i) {
            for e in extra {
                rows.push(Row { obs: i, action: actions.len(), adv: e.q_estimate - b.values[i], old_log_prob: e.old_log_prob });
                actions.push(e.action.clone());
            }
        }
        for j in t + i * aug.group..t + (i + 1) * aug.group {
            rows.push(Row { obs: j, action: j, adv: b.advantages[j], old_log_prob: b.log_probs[j] });
        }
        groups.push(rows);
    }
    let states = b.states()?;

    let saved = (learner.actor.clone(), learner.critic.params.clone(), learner.actor_opt.clone(), learner.critic_opt.clone());
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..t).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let rows: Vec<&Row> = chunk.iter().flat_map(|&i| groups[i].iter()).collect();
            let obs = states.select_rows(&rows.iter().map(|r| r.obs).collect::<Vec<_>>());
            let acts: Vec<Action> = rows.iter().map(|r| actions[r.action].clone()).collect();

            let mut tape = Tape::new();
            let g = tape.params(&learner.actor);
            let x = tape.constant(obs);
            let lp = learner.head.log_prob_tape(&mut tape, &g.vars, x, &acts)?;
            let old = tape.constant(Tensor::column(rows.iter().map(|r| r.old_log_prob).collect()));
            let adv = tape.constant(Tensor::column(rows.iter().map(|r| r.adv).collect()));
            let diff = tape.sub(lp, old)?;
            let ratio = tape.exp(diff);
            let s1 = tape.mul(ratio, adv)?;
            let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let s2 = tape.mul(clipped, adv)?;
            let surr = tape.minimum(s1, s2)?;
            let m = tape.mean(surr);
            let loss = tape.scale(m, -1.0);
            let pl = tape.value(loss).item();

            let mut vt = Tape::new();
            let vg = vt.params(&learner.critic.params);
            let vx = vt.constant(states.select_rows(chunk));
            let v = forward_tape(&learner.critic.net, &mut vt, &vg.vars, vx)?;
            let target = vt.constant(Tensor::column(chunk.iter().map(|&i| b.lambda_returns[i]).collect()));
            let err = vt.sub(v, target)?;
            let sq = vt.square(err);
            let mse = vt.mean(sq);
            let vloss = vt.scale(mse, cfg.value_coef);
            let vl = vt.value(vloss).item();

            if !pl.is_finite() || !vl.is_finite() {
                (learner.actor, learner.critic.params, learner.actor_opt, learner.critic_opt) = saved;
                return Ok(UpdateStats { discarded: true, ..stats });
            }
            let mut ga = tape.backward(loss)?.into_group(&g);
            let mut gc = vt.backward(vloss)?.into_group(&vg);
            if ga.iter().chain(&gc).any(|x| !x.is_finite()) {
                (learner.actor, learner.critic.params, learner.actor_opt, learner.critic_opt) = saved;
                return Ok(UpdateStats { discarded: true, ..stats });
            }
            let an = clip_grad_norm(&mut ga, cfg.max_grad_norm);
            let cn = clip_grad_norm(&mut gc, cfg.max_grad_norm);
            adam_step(&mut learner.actor, &ga, &mut learner.actor_opt, &learner.actor_adam)?;
            adam_step(&mut learner.critic.params, &gc, &mut learner.critic_opt, &learner.critic_adam)?;

            let k = stats.minibatches as f64;
            stats.policy_loss = (stats.policy_loss * k + pl) / (k + 1.0);
            stats.value_loss = (stats.value_loss * k + vl / cfg.value_coef.max(f64::MIN_POSITIVE)) / (k + 1.0);
            stats.actor_grad_norm = (stats.actor_grad_norm * k + an) / (k + 1.0);
            stats.critic_grad_norm = (stats.critic_grad_norm * k + cn) / (k + 1.0);
            stats.minibatches += 1;
            stats.value_rows += chunk.len();
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub env_steps: usize,
    pub extra: usize,
    pub update: UpdateStats,
    pub flagged: usize,
}

/// A training run's mutable state.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub learner: Learner,
    pub q: Option<TwinQ>,
    pub dynamics: Option<DynamicsModel>,
    pub buffer: ReplayBuffer,
    pub env_steps: usize,
    pub updates: usize,
    pub streams: Streams,
}

impl Agent {
    pub fn new(obs_dim: usize, space: &ActionSpace, config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(0);
        let learner =
            Learner::new(obs_dim, space, &config.hidden, config.activation, config.actor_lr, config.critic_lr, &mut init)?;
        let mut model_init = ChaCha8Rng::seed_from_u64(seed);
        model_init.set_stream(5);
        let all = config.train_all_models;
        let q = if all || config.variant == Variant::Qma {
            Some(TwinQ::new(obs_dim, space.clone(), &config.q_hidden, config.q_lr, &mut model_init)?)
        } else {
            None
        };
        let dynamics = if all || matches!(config.variant, Variant::Mbma | Variant::Mbpo) {
            Some(DynamicsModel::new(obs_dim, space.clone(), &config.model_hidden, config.model_lr, &mut model_init)?)
        } else {
            None
        };
        Ok(Agent {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            learner,
            q,
            dynamics,
            env_steps: 0,
            updates: 0,
            streams: Streams::new(seed),
        })
    }

    /// Collect one batch, train whichever models the agent carries, augment
    /// with `extra` simulated samples per state and update.
    pub fn iterate(&mut self, env: &mut dyn Env, extra: usize) -> Result<IterationStats> {
        let cfg = &self.config;
        let batch = collect(
            env,
            &self.learner.head,
            &self.learner.actor,
            &self.learner.critic,
            cfg.batch_size,
            cfg.gamma,
            cfg.lam,
            &mut self.streams.collect,
        )?;
        self.env_steps += batch.len();
        self.buffer.extend(&batch.transitions);
        if let Some(q) = self.q.as_mut() {
            let actions: Vec<Action> = batch.transitions.iter().map(|t| t.action.clone()).collect();
            train_q_networks(
                q,
                &batch.states()?,
                &actions,
                &batch.lambda_returns,
                cfg.q_epochs,
                cfg.minibatch,
                &mut self.streams.models,
            )?;
        }
        if let Some(m) = self.dynamics.as_mut() {
            train_dynamics(m, &self.buffer, cfg.model_steps, cfg.model_batch, &mut self.streams.models)?;
        }
        let models = Models { q: self.q.as_ref(), world: self.dynamics.as_ref().map(|m| m as &dyn WorldModel) };
        let aug = augment(
            batch,
            cfg.variant,
            models,
            &self.learner.head,
            &self.learner.actor,
            &self.learner.critic,
            extra,
            cfg.horizon,
            cfg.gamma,
            cfg.lam,
            &mut self.streams.augment,
        )?;
        let update = ppo_update(&aug, &mut self.learner, cfg, &mut self.streams.update)?;
        self.updates += 1;
        Ok(IterationStats { env_steps: self.env_steps, extra, update, flagged: aug.flagged })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    /// `(env_steps, mean greedy return)` after updates.
    pub points: Vec<(usize, f64)>,
    pub updates: usize,
    pub discarded: usize,
    pub flagged: usize,
}

/// Train for as many whole batches as fit in `total_steps`, evaluating the
/// greedy policy whenever another `eval_interval` real steps have passed.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    env: &mut dyn Env,
    eval_env: &mut dyn Env,
    config: &AgentConfig,
    seed: u64,
    total_steps: usize,
    eval_interval: usize,
    eval_episodes: usize,
) -> Result<(TrainingCurve, Agent)> {
    ensure!(eval_interval >= 1, InvalidArgument, "eval_interval must be >= 1");
    let mut agent = Agent::new(env.obs_dim(), &env.action_space(), config.clone(), seed)?;
    let mut curve = TrainingCurve::default();
    let mut next_eval = eval_interval;
    while agent.env_steps + config.batch_size <= total_steps {
        let extra = config.extra_at(agent.env_steps, total_steps);
        let it = agent.iterate(env, extra)?;
        curve.updates += 1;
        curve.discarded += it.update.discarded as usize;
        curve.flagged += it.flagged;
        if agent.env_steps >= next_eval {
            let r = evaluate(eval_env, &agent.learner.head, &agent.learner.actor, eval_episodes)?;
            curve.points.push((agent.env_steps, r));
            while next_eval <= agent.env_steps {
                next_eval += eval_interval;
            }
        }
    }
    Ok((curve, agent))
}

/// Settings of the rewinding actor-critic on CartPole.
#[derive(Clone, Debug, PartialEq)]
pub struct Fig1Config {
    /// Real transitions per update (the trajectory length).
    pub batch: usize,
    /// Actions per state; `N - 1` of them are valued by rewinding.
    pub n: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lam: f64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_epochs: usize,
    pub max_grad_norm: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub solve_window: usize,
    pub solve_threshold: f64,
    /// Stochastic episodes per common-random-number evaluation.
    pub gain_episodes: usize,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Fig1Config {
            batch: 128,
            n: 1,
            horizon: 12,
            gamma: 0.99,
            lam: 0.95,
            hidden: vec![32],
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            critic_epochs: 5,
            max_grad_norm: 0.5,
            max_steps: 60_000,
            eval_every: 50,
            solve_window: 25,
            solve_threshold: 190.0,
            gain_episodes: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fig1Outcome {
    /// Real environment steps until the solve criterion held; `None` if the
    /// budget ran out.
    pub steps_to_solve: Option<usize>,
    pub env_steps: usize,
    pub updates: usize,
    /// Mean change of the common-random-number return per update.
    pub mean_update_gain: f64,
}

/// Mean return of stochastic episodes with fixed environment and action
/// seeds, so two parameter vectors are compared on the same randomness.
pub fn crn_return(head: &PolicyHead, params: &ParamVector, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut env = CartPole::new(seed.wrapping_add(e as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ e as u64);
        let mut obs = env.observe();
        loop {
            let tr = env.step(&head.sample(params, &obs, &mut rng)?)?;
            total += tr.reward;
            if tr.done || tr.truncated {
                break;
            }
            obs = tr.next_state;
        }
    }
    Ok(total / episodes as f64)
}

/// One CartPole run of the actor-critic whose extra actions are valued by
/// rewinding the environment. Only executed steps count as environment
/// steps.
pub fn fig1_run(cfg: &Fig1Config, seed: u64) -> Result<Fig1Outcome> {
    ensure!(cfg.n >= 1 && cfg.batch >= 1, InvalidArgument, "fig1 needs n >= 1 and batch >= 1");
    let streams = Streams::new(seed);
    let (mut act_rng, mut extra_rng, mut upd_rng) = (streams.collect, streams.augment, streams.update);
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let mut env = CartPole::new(seed.wrapping_mul(2).wrapping_add(1));
    let mut eval_env = CartPole::new(seed.wrapping_mul(2).wrapping_add(2));
    let space = env.action_space();
    let mut learner = Learner::new(4, &space, &cfg.hidden, Activation::Tanh, cfg.actor_lr, cfg.critic_lr, &mut init)?;
    let crn_seed = 0xc0ffee ^ seed;
    let j0 = crn_return(&learner.head, &learner.actor, cfg.gain_episodes, crn_seed)?;

    let mut steps = 0;
    let mut updates = 0;
    let mut evals: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut solved = None;
    'outer: while steps < cfg.max_steps {
        let mut batch = Batch::default();
        for _ in 0..cfg.batch {
            if env.needs_reset() {
                env.reset();
            }
            let obs = env.observe();
            if cfg.n > 1 {
                let token = env.snapshot();
                batch.extra.push(many_action_sample_env(
                    &mut env,
                    &token,
                    &learner.head,
                    &learner.actor,
                    cfg.n - 1,
                    cfg.horizon,
                    cfg.gamma,
                    &learner.critic,
                    &mut extra_rng,
                )?);
            }
            let dist = learner.head.distribution(&learner.actor, &obs)?;
            let a = sample_dist(&dist, &mut act_rng);
            batch.log_probs.push(dist_log_prob(&dist, &a)?);
            batch.transitions.push(env.step(&a)?);
            steps += 1;
            if steps % cfg.eval_every == 0 {
                evals.push_back(evaluate(&mut eval_env, &learner.head, &learner.actor, 1)?);
                if evals.len() > cfg.solve_window {
                    evals.pop_front();
                }
                if evals.len() == cfg.solve_window
                    && evals.iter().sum::<f64>() / cfg.solve_window as f64 >= cfg.solve_threshold
                {
                    solved = Some(steps);
                    break 'outer;
                }
            }
            if steps >= cfg.max_steps {
                break;
            }
        }
        batch.values = learner.critic.values(&batch.states()?)?;
        let next =
            Tensor::from_rows(&batch.transitions.iter().map(|t| t.next_state.clone()).collect::<Vec<_>>())?;
        let nv = learner.critic.values(&next)?;
        let rewards: Vec<f64> = batch.transitions.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.transitions.iter().map(|t| t.done).collect();
        let trunc: Vec<bool> = batch.transitions.iter().map(|t| t.truncated).collect();
        let (ret, adv) = lambda_returns(&rewards, &batch.values, &nv, &dones, &trunc, cfg.gamma, cfg.lam)?;
        batch.lambda_returns = ret;
        batch.advantages = adv;

        let est = estimate_spg(&batch, &learner.head, &learner.actor, SpgOptions::default(), Method::Ac, seed)?;
        let mut g: Vec<f64> = est.grad.iter().map(|x| -x).collect();
        clip_grad_norm(&mut g, cfg.max_grad_norm);
        adam_step(&mut learner.actor, &g, &mut learner.actor_opt, &learner.actor_adam)?;
        fit_critic(&mut learner, &batch, cfg.critic_epochs, cfg.max_grad_norm, &mut upd_rng)?;
        updates += 1;
    }
    let j1 = crn_return(&learner.head, &learner.actor, cfg.gain_episodes, crn_seed)?;
    let mean_update_gain = if updates == 0 { 0.0 } else { (j1 - j0) / updates as f64 };
    Ok(Fig1Outcome { steps_to_solve: solved, env_steps: steps, updates, mean_update_gain })
}

/// Minibatch regression of the critic onto the batch's lambda-returns.
fn fit_critic<R: Rng + ?Sized>(learner: &mut Learner, batch: &Batch, epochs: usize, max_norm: f64, rng: &mut R) -> Result<()> {
    let states = batch.states()?;
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(64) {
            let mut tape = Tape::new();
            let g = tape.params(&learner.critic.params);
            let x = tape.constant(states.select_rows(chunk));
            let v = forward_tape(&learner.critic.net, &mut tape, &g.vars, x)?;
            let y = tape.constant(Tensor::column(chunk.iter().map(|&i| batch.lambda_returns[i]).collect()));
            let e = tape.sub(v, y)?;
            let sq = tape.square(e);
            let loss = tape.mean(sq);
            ensure!(tape.value(loss).item().is_finite(), Numeric, "non-finite critic loss");
            let mut grad = tape.backward(loss)?.into_group(&g);
            clip_grad_norm(&mut grad, max_norm);
            adam_step(&mut learner.critic.params, &grad, &mut learner.critic_opt, &learner.critic_adam)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::PointMass;

    fn small() -> AgentConfig {
        AgentConfig {
            batch_size: 64,
            extra: 2,
            horizon: 2,
            epochs: 2,
            minibatch: 16,
            hidden: vec![8],
            model_hidden: vec![8],
            q_hidden: vec![8],
            model_steps: 5,
            q_epochs: 1,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn anneal_schedule() {
        let c = AgentConfig { variant: Variant::Mbma, ..AgentConfig::default() };
        assert_eq!(c.extra_at(0, 1000), 0);
        assert_eq!(c.extra_at(150, 1000), 8);
        assert_eq!(c.extra_at(999, 1000), 8);
        let mut last = 0;
        for s in 0..1000 {
            assert!(c.extra_at(s, 1000) >= last);
            last = c.extra_at(s, 1000);
        }
        let d = AgentConfig { anneal: AnnealDirection::Down, ..c };
        assert_eq!(d.extra_at(0, 1000), 8);
        assert_eq!(d.extra_at(500, 1000), 0);
    }

    #[test]
    fn too_short_run_has_no_updates() {
        let mut env = PointMass::new(0);
        let mut ev = PointMass::new(1);
        let (curve, _) = run_training(&mut env, &mut ev, &small(), 0, 63, 10, 1).unwrap();
        assert_eq!(curve.updates, 0);
        assert!(curve.points.is_empty());
    }

    #[test]
    fn variants_agree_without_extra_samples() {
        let mut trajectories = Vec::new();
        for v in Variant::ALL {
            let cfg = AgentConfig { variant: v, ..small() };
            let mut agent = Agent::new(4, &PointMass::new(0).action_space(), cfg, 9).unwrap();
            let mut env = PointMass::new(3);
            let mut traj = Vec::new();
            for _ in 0..3 {
                agent.iterate(&mut env, 0).unwrap();
                traj.push(agent.learner.actor.clone());
            }
            trajectories.push(traj);
        }
        assert!(trajectories.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn mbpo_groups_and_value_rows() {
        let cfg = AgentConfig { variant: Variant::Mbpo, ..small() };
        let mut agent = Agent::new(4, &PointMass::new(0).action_space(), cfg, 1).unwrap();
        let mut env = PointMass::new(2);
        let it = agent.iterate(&mut env, 2).unwrap();
        assert_eq!(it.update.value_rows, 2 * 64);
    }
}
