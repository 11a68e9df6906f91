use crate::error::{ensure, Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_STATES: usize = 64;
pub const MAX_ACTIONS: usize = 64;

/// Row-major `S x S` matrix.
pub type Kernel = Vec<f64>;

/// Finite MDP `(S, A, R, p, gamma)` with initial distribution `p0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `S x A`
    reward: Vec<f64>,
    /// `S x A x S`
    kernel: Vec<f64>,
    gamma: f64,
    init_dist: Vec<f64>,
}

/// Row-stochastic `S x A` action probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        ensure!(probs.len() == n_states * n_actions, Shape, "policy table has {} entries", probs.len());
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            ensure!(row.iter().all(|&p| p >= 0.0), InvalidArgument, "negative probability in row {s}");
            let total: f64 = row.iter().sum();
            ensure!((total - 1.0).abs() < 1e-9, InvalidArgument, "policy row {s} sums to {total}");
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// Softmax over each row of an `S x A` logit table.
    pub fn softmax(n_states: usize, n_actions: usize, logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        for row in probs.chunks_mut(n_actions) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            row.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
        }
        TabularPolicy { n_states, n_actions, probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s), rng)
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        reward: Vec<f64>,
        kernel: Vec<f64>,
        gamma: f64,
        init_dist: Vec<f64>,
    ) -> Result<Self> {
        ensure!(
            (1..=MAX_STATES).contains(&n_states) && (1..=MAX_ACTIONS).contains(&n_actions),
            InvalidArgument,
            "S={n_states}, A={n_actions} outside supported range"
        );
        ensure!(reward.len() == n_states * n_actions, Shape, "reward table size");
        ensure!(kernel.len() == n_states * n_actions * n_states, Shape, "kernel size");
        ensure!(init_dist.len() == n_states, Shape, "init_dist size");
        ensure!(gamma > 0.0 && gamma <= 1.0, InvalidArgument, "gamma {gamma} not in (0,1]");
        ensure!(reward.iter().all(|r| r.is_finite()), Numeric, "rewards must be finite");
        for (i, row) in kernel.chunks(n_states).enumerate() {
            ensure!(row.iter().all(|&p| p >= 0.0), InvalidArgument, "negative transition probability");
            let t: f64 = row.iter().sum();
            ensure!((t - 1.0).abs() <= 1e-12, InvalidArgument, "kernel row {i} sums to {t}");
        }
        let t: f64 = init_dist.iter().sum();
        ensure!((t - 1.0).abs() <= 1e-12, InvalidArgument, "init_dist sums to {t}");
        Ok(TabularMdp { n_states, n_actions, reward, kernel, gamma, init_dist })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        ensure!(gamma > 0.0 && gamma <= 1.0, InvalidArgument, "gamma {gamma} not in (0,1]");
        self.gamma = gamma;
        Ok(self)
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// `p(. | s, a)`
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let o = (s * self.n_actions + a) * self.n_states;
        &self.kernel[o..o + self.n_states]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.next_dist(s, a), rng)
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        ensure!(
            policy.n_states == self.n_states && policy.n_actions == self.n_actions,
            Shape,
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states,
            policy.n_actions,
            self.n_states,
            self.n_actions
        );
        Ok(())
    }

    /// Policy-marginalized one-step kernel `p^pi(s'|s)`.
    pub fn marginal_kernel(&self, policy: &TabularPolicy) -> Result<Kernel> {
        self.check_policy(policy)?;
        let s_n = self.n_states;
        let mut m = vec![0.0; s_n * s_n];
        for s in 0..s_n {
            for a in 0..self.n_actions {
                let p = policy.prob(s, a);
                for (dst, q) in m[s * s_n..(s + 1) * s_n].iter_mut().zip(self.next_dist(s, a)) {
                    *dst += p * q;
                }
            }
        }
        Ok(m)
    }

    /// `t`-step kernel `(p^pi)^t`; `t = 0` is the identity.
    pub fn t_step_kernel(&self, policy: &TabularPolicy, t: usize) -> Result<Kernel> {
        let m = self.marginal_kernel(policy)?;
        let n = self.n_states;
        let mut out = identity(n);
        for _ in 0..t {
            out = matmul(&out, &m, n);
        }
        Ok(out)
    }

    /// Unique fixed point of the marginal kernel by power iteration.
    pub fn stationary_distribution(&self, policy: &TabularPolicy) -> Result<Vec<f64>> {
        let m = self.marginal_kernel(policy)?;
        stationary_of(&m, self.n_states)
    }

    /// Expected reward under the policy, per state.
    pub fn policy_reward(&self, policy: &TabularPolicy) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        Ok((0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| policy.prob(s, a) * self.reward(s, a)).sum())
            .collect())
    }

    /// `V = (I - gamma P^pi)^-1 r^pi`.
    pub fn state_values(&self, policy: &TabularPolicy) -> Result<Vec<f64>> {
        let n = self.n_states;
        let m = self.marginal_kernel(policy)?;
        let r = self.policy_reward(policy)?;
        let lhs = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - self.gamma * m[i * n + j]);
        let lu = lhs.lu();
        let v = lu
            .solve(&DVector::from_vec(r))
            .ok_or_else(|| Error::Numeric("singular (I - gamma P) system; gamma = 1?".into()))?;
        Ok(v.iter().copied().collect())
    }

    /// `Q(s,a) = R(s,a) + gamma sum_s' p(s'|s,a) V(s')`, row-major `S x A`.
    pub fn action_values(&self, policy: &TabularPolicy) -> Result<Vec<f64>> {
        let v = self.state_values(policy)?;
        let mut q = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let ev: f64 = self.next_dist(s, a).iter().zip(&v).map(|(p, vv)| p * vv).sum();
                q[s * self.n_actions + a] = self.reward(s, a) + self.gamma * ev;
            }
        }
        Ok(q)
    }
}

pub fn identity(n: usize) -> Kernel {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Kernel {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Kernel-vector product `K f` (row-major `K`).
pub fn apply(k: &[f64], f: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| k[i * n..(i + 1) * n].iter().zip(f).map(|(a, b)| a * b).sum()).collect()
}

const STATIONARY_TOL: f64 = 1e-15;
const STATIONARY_MAX_ITERS: usize = 200_000;

pub fn stationary_of(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..STATIONARY_MAX_ITERS {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += p[i] * m[i * n + j];
            }
        }
        let z: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= z);
        let diff = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        if diff <= STATIONARY_TOL {
            return Ok(p);
        }
    }
    Err(Error::Convergence(format!(
        "stationary distribution did not converge in {STATIONARY_MAX_ITERS} iterations"
    )))
}

/// Random ergodic MDP. Each kernel row is `(1 - mixing) * uniform +
/// mixing * random simplex point`, so every entry is at least
/// `(1 - mixing) / S`; `mixing = 0` yields a contextual-bandit chain whose
/// next state ignores the current state and action.
pub fn generate_random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    reward_scale: f64,
    mixing: f64,
) -> Result<TabularMdp> {
    ensure!(
        (2..=MAX_STATES).contains(&n_states) && (2..=MAX_ACTIONS).contains(&n_actions),
        InvalidArgument,
        "S={n_states}, A={n_actions}: need 2 <= S,A <= 64"
    );
    ensure!((0.0..=1.0).contains(&mixing), InvalidArgument, "mixing {mixing} not in [0,1]");
    ensure!(reward_scale.is_finite(), InvalidArgument, "reward_scale must be finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reward: Vec<f64> = (0..n_states * n_actions).map(|_| reward_scale * rng.random::<f64>()).collect();
    let uniform = 1.0 / n_states as f64;
    let mut kernel = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        // strictly positive draws keep the chain irreducible even at mixing = 1
        let raw: Vec<f64> = (0..n_states).map(|_| 0.05 + rng.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|x| (1.0 - mixing) * uniform + mixing * x / z).collect();
        let t: f64 = row.iter().sum();
        kernel.extend(row.iter().map(|x| x / t));
    }
    TabularMdp::new(n_states, n_actions, reward, kernel, 0.9, vec![uniform; n_states])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_when_mixing_is_zero() {
        let mdp = generate_random_mdp(4, 4, 3, 1.0, 0.0).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                for &p in mdp.next_dist(s, a) {
                    assert!((p - 0.25).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn deterministic_in_seed_and_stochastic_rows() {
        let a = generate_random_mdp(1, 3, 2, 1.0, 0.7).unwrap();
        let b = generate_random_mdp(1, 3, 2, 1.0, 0.7).unwrap();
        assert_eq!(a, b);
        for s in 0..3 {
            for act in 0..2 {
                let row = a.next_dist(s, act);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&p| p >= 0.3 / 3.0 - 1e-15));
            }
        }
    }

    #[test]
    fn range_errors() {
        assert!(generate_random_mdp(0, 1, 2, 1.0, 0.5).is_err());
        assert!(generate_random_mdp(0, 2, 65, 1.0, 0.5).is_err());
        assert!(generate_random_mdp(0, 2, 2, 1.0, 1.5).is_err());
    }

    fn two_state_flip(p_flip: f64) -> TabularMdp {
        let k = vec![1.0 - p_flip, p_flip, 1.0 - p_flip, p_flip, p_flip, 1.0 - p_flip, p_flip, 1.0 - p_flip];
        TabularMdp::new(2, 2, vec![0.0; 4], k, 0.9, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        let mdp = two_state_flip(0.3);
        let p = mdp.stationary_distribution(&TabularPolicy::uniform(2, 2)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-14 && (p[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rank_one_chain() {
        let r = [0.2, 0.5, 0.3];
        let kernel: Vec<f64> = (0..6).flat_map(|_| r).collect();
        let mdp = TabularMdp::new(3, 2, vec![0.0; 6], kernel, 0.9, vec![1.0 / 3.0; 3]).unwrap();
        let pol = TabularPolicy::uniform(3, 2);
        let p = mdp.stationary_distribution(&pol).unwrap();
        for i in 0..3 {
            assert!((p[i] - r[i]).abs() < 1e-14);
        }
        for t in 1..5 {
            let k = mdp.t_step_kernel(&pol, t).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((k[i * 3 + j] - r[j]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn t_step_identity_and_powers() {
        let mdp = generate_random_mdp(1, 3, 2, 1.0, 0.8).unwrap();
        let pol = TabularPolicy::uniform(3, 2);
        assert_eq!(mdp.t_step_kernel(&pol, 0).unwrap(), identity(3));
        let m = mdp.marginal_kernel(&pol).unwrap();
        assert_eq!(mdp.t_step_kernel(&pol, 1).unwrap(), m);
        let mut direct = m.clone();
        for _ in 0..4 {
            direct = matmul(&direct, &m, 3);
        }
        let k5 = mdp.t_step_kernel(&pol, 5).unwrap();
        for (a, b) in k5.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
        for row in k5.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bellman_consistency_of_values() {
        let mdp = generate_random_mdp(7, 4, 3, 2.0, 0.6).unwrap();
        let pol = TabularPolicy::softmax(4, 3, &[0.1, -0.4, 0.9, 0.0, 0.3, 0.2, -1.0, 0.5, 0.5, 0.7, 0.0, -0.2]);
        let v = mdp.state_values(&pol).unwrap();
        let q = mdp.action_values(&pol).unwrap();
        for s in 0..4 {
            let vs: f64 = (0..3).map(|a| pol.prob(s, a) * q[s * 3 + a]).sum();
            assert!((vs - v[s]).abs() < 1e-12);
        }
    }
}
