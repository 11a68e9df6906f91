//! Stochastic policies and state-value functions over [`ParamVector`]s.

use crate::envs::{Action, ActionSpace, TabularEnv};
use crate::error::{ensure, Result};
use crate::ndiff::{forward_batch, forward_tape, Activation, MlpSpec, ParamVector, Segment, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyKind {
    Categorical { n_actions: usize },
    /// Mean network plus a state-independent `log_std` row. Sampled actions
    /// are stored unclipped; environments clip to `[low, high]`.
    Gaussian { dim: usize, low: f64, high: f64 },
}

/// Action distribution at one state.
#[derive(Clone, Debug, PartialEq)]
pub enum Dist {
    Categorical(Vec<f64>),
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyHead {
    pub net: MlpSpec,
    pub kind: PolicyKind,
}

impl PolicyHead {
    pub fn new(obs_dim: usize, hidden: &[usize], space: &ActionSpace, activation: Activation) -> Result<Self> {
        let (out, kind) = match *space {
            ActionSpace::Discrete(n) => (n, PolicyKind::Categorical { n_actions: n }),
            ActionSpace::Continuous { dim, low, high } => (dim, PolicyKind::Gaussian { dim, low, high }),
        };
        Ok(PolicyHead { net: MlpSpec::new(obs_dim, hidden, out, activation)?, kind })
    }

    /// Softmax over a logit table: a bias-free linear layer on one-hot states.
    pub fn tabular(n_states: usize, n_actions: usize) -> Result<Self> {
        Ok(PolicyHead {
            net: MlpSpec::new(n_states, &[], n_actions, Activation::Tanh)?.without_bias(),
            kind: PolicyKind::Categorical { n_actions },
        })
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut l = self.net.layout();
        if let PolicyKind::Gaussian { dim, .. } = self.kind {
            l.push(Segment::new("log_std", 1, dim));
        }
        l
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(Segment::size).sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let net = self.net.init(rng, 0.01);
        match self.kind {
            PolicyKind::Categorical { .. } => net,
            PolicyKind::Gaussian { dim, .. } => {
                let mut values = net.values().to_vec();
                values.extend(std::iter::repeat_n(0.0, dim));
                ParamVector::new(values, self.layout()).expect("layout matches")
            }
        }
    }

    /// Tabular policy parameters from an `S x A` logit table.
    pub fn tabular_params(&self, logits: &[f64]) -> Result<ParamVector> {
        ParamVector::new(logits.to_vec(), self.layout())
    }

    fn log_std(&self, params: &ParamVector) -> Vec<f64> {
        let i = params.layout().len() - 1;
        params.segment(i).iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    pub fn distribution(&self, params: &ParamVector, obs: &[f64]) -> Result<Dist> {
        let out = forward_batch(&self.net, params, &Tensor::row_vector(obs.to_vec()))?.data;
        Ok(self.dist_from_output(params, out))
    }

    /// Distributions for every row of `obs`.
    pub fn distributions(&self, params: &ParamVector, obs: &Tensor) -> Result<Vec<Dist>> {
        let out = forward_batch(&self.net, params, obs)?;
        Ok((0..out.rows).map(|i| self.dist_from_output(params, out.row(i).to_vec())).collect())
    }

    fn dist_from_output(&self, params: &ParamVector, mut out: Vec<f64>) -> Dist {
        match self.kind {
            PolicyKind::Categorical { .. } => {
                let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                out.iter_mut().for_each(|x| *x = (*x - m).exp());
                let z: f64 = out.iter().sum();
                out.iter_mut().for_each(|x| *x /= z);
                Dist::Categorical(out)
            }
            PolicyKind::Gaussian { .. } => {
                Dist::Gaussian { mean: out, std: self.log_std(params).iter().map(|l| l.exp()).collect() }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, params: &ParamVector, obs: &[f64], rng: &mut R) -> Result<Action> {
        Ok(sample_dist(&self.distribution(params, obs)?, rng))
    }

    /// Most likely action: argmax or the Gaussian mean.
    pub fn greedy(&self, params: &ParamVector, obs: &[f64]) -> Result<Action> {
        Ok(match self.distribution(params, obs)? {
            Dist::Categorical(p) => Action::Discrete(argmax(&p)),
            Dist::Gaussian { mean, .. } => Action::Continuous(mean),
        })
    }

    pub fn log_prob(&self, params: &ParamVector, obs: &[f64], action: &Action) -> Result<f64> {
        dist_log_prob(&self.distribution(params, obs)?, action)
    }

    /// Record `log pi(a_i | s_i)` for every row of `obs` as an `n x 1` value.
    pub fn log_prob_tape(&self, tape: &mut Tape, vars: &[Var], obs: Var, actions: &[Action]) -> Result<Var> {
        let n = tape.value(obs).rows;
        ensure!(actions.len() == n, Shape, "{} actions for {} states", actions.len(), n);
        let out = forward_tape(&self.net, tape, vars, obs)?;
        match self.kind {
            PolicyKind::Categorical { n_actions } => {
                let mut idx = Vec::with_capacity(n);
                for a in actions {
                    match a {
                        Action::Discrete(i) if *i < n_actions => idx.push(*i),
                        other => {
                            return Err(crate::Error::InvalidArgument(format!(
                                "action {other:?} outside categorical support of size {n_actions}"
                            )))
                        }
                    }
                }
                let lp = tape.log_softmax(out);
                tape.gather(lp, &idx)
            }
            PolicyKind::Gaussian { dim, .. } => {
                let mut data = Vec::with_capacity(n * dim);
                for a in actions {
                    match a {
                        Action::Continuous(v) if v.len() == dim => data.extend_from_slice(v),
                        other => {
                            return Err(crate::Error::InvalidArgument(format!(
                                "action {other:?} is not a {dim}-dimensional continuous action"
                            )))
                        }
                    }
                }
                let ls_var = *vars.last().expect("gaussian head has a log_std segment");
                let ls = tape.clamp(ls_var, LOG_STD_MIN, LOG_STD_MAX);
                let u = tape.constant(Tensor::from_vec(n, dim, data)?);
                let diff = tape.sub(u, out)?;
                let neg_ls = tape.scale(ls, -1.0);
                let inv_std = tape.exp(neg_ls);
                let z = tape.mul_row(diff, inv_std)?;
                let z2 = tape.square(z);
                let quad = tape.sum_cols(z2);
                let quad = tape.scale(quad, -0.5);
                let ones = tape.constant(Tensor::filled(n, 1, 1.0));
                let ls_rows = tape.matmul(ones, ls)?;
                let ls_sum = tape.sum_cols(ls_rows);
                let lp = tape.sub(quad, ls_sum)?;
                Ok(tape.add_scalar(lp, -(dim as f64) * LOG_SQRT_2PI))
            }
        }
    }

    /// `sum_i w_i * grad log pi(a_i | s_i)` through one tape.
    pub fn weighted_score(&self, params: &ParamVector, obs: &Tensor, actions: &[Action], weights: &[f64]) -> Result<Vec<f64>> {
        ensure!(weights.len() == obs.rows, Shape, "{} weights for {} states", weights.len(), obs.rows);
        let mut tape = Tape::new();
        let g = tape.params(params);
        let x = tape.constant(obs.clone());
        let lp = self.log_prob_tape(&mut tape, &g.vars, x, actions)?;
        let w = tape.constant(Tensor::column(weights.to_vec()));
        let prod = tape.mul(lp, w)?;
        let total = tape.sum(prod);
        Ok(tape.backward(total)?.into_group(&g))
    }

    pub fn grad_log_prob(&self, params: &ParamVector, obs: &[f64], action: &Action) -> Result<Vec<f64>> {
        self.weighted_score(params, &Tensor::row_vector(obs.to_vec()), std::slice::from_ref(action), &[1.0])
    }
}

pub fn sample_dist<R: Rng + ?Sized>(dist: &Dist, rng: &mut R) -> Action {
    match dist {
        Dist::Categorical(p) => Action::Discrete(crate::envs::sample_categorical(p, rng)),
        Dist::Gaussian { mean, std } => Action::Continuous(
            mean.iter().zip(std).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect(),
        ),
    }
}

pub fn dist_log_prob(dist: &Dist, action: &Action) -> Result<f64> {
    match (dist, action) {
        (Dist::Categorical(p), Action::Discrete(i)) => {
            ensure!(*i < p.len(), InvalidArgument, "action {i} outside support of size {}", p.len());
            let lp = p[*i].ln();
            ensure!(lp > f64::NEG_INFINITY, Numeric, "action {i} has zero probability");
            Ok(lp)
        }
        (Dist::Gaussian { mean, std }, Action::Continuous(a)) => {
            ensure!(a.len() == mean.len(), Shape, "action dim {} != {}", a.len(), mean.len());
            Ok(mean
                .iter()
                .zip(std)
                .zip(a)
                .map(|((m, s), x)| -0.5 * ((x - m) / s).powi(2) - s.ln() - LOG_SQRT_2PI)
                .sum())
        }
        (d, a) => Err(crate::Error::InvalidArgument(format!("action {a:?} does not match distribution {d:?}"))),
    }
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps an observation to a state value.
pub trait ValueFunction: Sync {
    fn value(&self, obs: &[f64]) -> Result<f64>;

    fn values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        (0..obs.rows).map(|i| self.value(obs.row(i))).collect()
    }
}

/// MLP critic with a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: MlpSpec,
    pub params: ParamVector,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let net = MlpSpec::new(obs_dim, hidden, 1, activation)?;
        let params = net.init(rng, 1.0);
        Ok(Critic { net, params })
    }
}

impl ValueFunction for Critic {
    fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(crate::ndiff::forward(&self.net, &self.params, obs)?[0])
    }

    fn values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(forward_batch(&self.net, &self.params, obs)?.data)
    }
}

/// Exact state values looked up from a one-hot observation.
#[derive(Clone, Debug, PartialEq)]
pub struct TableCritic(pub Vec<f64>);

impl ValueFunction for TableCritic {
    fn value(&self, obs: &[f64]) -> Result<f64> {
        ensure!(obs.len() == self.0.len(), Shape, "one-hot of length {} for {} states", obs.len(), self.0.len());
        Ok(self.0[TabularEnv::decode(obs)])
    }
}

/// Constant-zero critic.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCritic;

impl ValueFunction for ZeroCritic {
    fn value(&self, _obs: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_tape_log_prob_matches_closed_form() {
        let space = ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 };
        let head = PolicyHead::new(3, &[8], &space, Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = head.init(&mut rng);
        let n = p.layout().len();
        p.segment_mut(n - 1).copy_from_slice(&[-0.3, 0.4]);
        let obs = [0.2, -0.5, 1.0];
        let a = Action::Continuous(vec![0.7, -1.2]);
        let direct = head.log_prob(&p, &obs, &a).unwrap();
        let mut tape = Tape::new();
        let g = tape.params(&p);
        let x = tape.constant(Tensor::row_vector(obs.to_vec()));
        let lp = head.log_prob_tape(&mut tape, &g.vars, x, std::slice::from_ref(&a)).unwrap();
        assert!((tape.value(lp).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn log_std_clamped() {
        let space = ActionSpace::Continuous { dim: 1, low: -1.0, high: 1.0 };
        let head = PolicyHead::new(1, &[], &space, Activation::Tanh).unwrap();
        let mut p = head.init(&mut ChaCha8Rng::seed_from_u64(0));
        let n = p.layout().len();
        p.segment_mut(n - 1)[0] = 40.0;
        match head.distribution(&p, &[0.0]).unwrap() {
            Dist::Gaussian { std, .. } => assert_eq!(std[0], LOG_STD_MAX.exp()),
            _ => unreachable!(),
        }
        let gr = head.grad_log_prob(&p, &[0.0], &Action::Continuous(vec![0.5])).unwrap();
        assert_eq!(gr[p.len() - 1], 0.0);
    }

    #[test]
    fn tabular_head_is_logit_table() {
        let head = PolicyHead::tabular(2, 3).unwrap();
        let p = head.tabular_params(&[0.0, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        match head.distribution(&p, &[1.0, 0.0]).unwrap() {
            Dist::Categorical(pr) => {
                let z = 1.0 + 1f64.exp() + 2f64.exp();
                assert!((pr[2] - 2f64.exp() / z).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
        assert!(head.log_prob(&p, &[1.0, 0.0], &Action::Discrete(3)).is_err());
    }
}
