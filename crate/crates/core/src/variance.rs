//! Exact and sampled variance analysis of many-actions gradient estimators
//! on tabular MDPs.
//!
//! Notation: `g(s,a) = Q(s,a) grad log pi(a|s)` per parameter, `gbar(s)`
//! its policy average, `mu` the stationary mean of `gbar`. For a stationary
//! trajectory with `N` actions per state the per-step term `X_t` has
//!
//! ```text
//! Var X       = Var_s gbar + (1/N) E_s Var_a g
//! Cov(X0, Xk) = alpha_e(k) + (1/N) E_s alpha(k)
//! alpha_e(k)  = E_s[gbar H_k] - mu^2,          H_k = P^k gbar
//! alpha(k,s)  = sum_a pi g h_k - gbar H_k,     h_k(s,a) = p(.|s,a) P^(k-1) gbar
//! ```
//!
//! and `T V = Var X + 2 sum_k (T-k)/T w^k Cov(X0, Xk)`, where `w` is the
//! per-step estimator weight (1 for an unweighted mean).

use crate::envs::{Action, Env, TabularMdp, TabularPolicy};
use crate::error::{ensure, Error, Result};
use crate::ndiff::ParamVector;
use crate::policy::{PolicyHead, ValueFunction};
use crate::spg::{self, Batch, ExtraAction};
use nalgebra::DMatrix;
use rand::Rng;

/// Per-step weight of the estimator sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepWeight {
    /// Plain average over the trajectory; the CLT expression is exact.
    Uniform,
    /// `gamma^t` weights, with lag-`k` covariances scaled by `gamma^k`.
    Discounted,
}

/// Exact building blocks for a softmax-table policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactMoments {
    pub n_states: usize,
    pub n_actions: usize,
    pub policy: TabularPolicy,
    pub stationary: Vec<f64>,
    /// `S x A` action values.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    /// `gbar(s)`, one parameter vector per state.
    pub g_bar: Vec<Vec<f64>>,
    /// Stationary expectation of `gbar`, the exact gradient.
    pub grad_j: Vec<f64>,
    pub var_s_bar: Vec<f64>,
    pub e_var_a: Vec<f64>,
    /// `w^k alpha_e(k)` for `k = 1..=lags` at index `k - 1`.
    pub alpha_e: Vec<Vec<f64>>,
    /// `w^k E_s alpha(k)`.
    pub e_alpha: Vec<Vec<f64>>,
    pub omega: f64,
}

impl ExactMoments {
    pub fn n_params(&self) -> usize {
        self.grad_j.len()
    }

    pub fn lags(&self) -> usize {
        self.alpha_e.len()
    }

    /// Lag-`k` covariance of the single-action term.
    pub fn cov_single(&self, k: usize) -> Vec<f64> {
        add(&self.alpha_e[k - 1], &self.e_alpha[k - 1], 1.0)
    }

    /// Lag-`k` covariance of the policy-averaged term.
    pub fn cov_bar(&self, k: usize) -> Vec<f64> {
        self.alpha_e[k - 1].clone()
    }

    /// Lag-`k` covariance of the `N`-action term.
    pub fn cov_n(&self, k: usize, n: usize) -> Vec<f64> {
        add(&self.alpha_e[k - 1], &self.e_alpha[k - 1], 1.0 / n as f64)
    }

    /// `Var_{s,a}` of the `N`-action per-step term.
    pub fn var_n(&self, n: usize) -> Vec<f64> {
        add(&self.var_s_bar, &self.e_var_a, 1.0 / n as f64)
    }
}

fn add(a: &[f64], b: &[f64], kb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + kb * y).collect()
}

pub fn trace_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// `grad log pi(a|s)` for a softmax logit table, flattened `S x A`.
pub fn tabular_score(policy: &TabularPolicy, s: usize, a: usize) -> Vec<f64> {
    let na = policy.n_actions;
    let mut g = vec![0.0; policy.n_states * na];
    for b in 0..na {
        g[s * na + b] = if a == b { 1.0 } else { 0.0 } - policy.prob(s, b);
    }
    g
}

/// Logit table with entries uniform in `[-scale, scale]`, reproducible from
/// `seed`.
pub fn random_logits(seed: u64, len: usize, scale: f64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    (0..len).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

/// Exact moments of the gradient terms with lag covariances up to `lags`.
pub fn exact_moments(mdp: &TabularMdp, logits: &[f64], lags: usize, weight: StepWeight) -> Result<ExactMoments> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    ensure!(logits.len() == ns * na, Shape, "logit table has {} entries for {}x{}", logits.len(), ns, na);
    let policy = TabularPolicy::softmax(ns, na, logits);
    let stationary = mdp.stationary_distribution(&policy)?;
    let q = mdp.action_values(&policy)?;
    let v = mdp.state_values(&policy)?;
    let np = ns * na;
    let omega = match weight {
        StepWeight::Uniform => 1.0,
        StepWeight::Discounted => mdp.gamma(),
    };

    // g(s,a) only touches the block of state s
    let mut g = vec![vec![vec![0.0; np]; na]; ns];
    let mut g_bar = vec![vec![0.0; np]; ns];
    for s in 0..ns {
        for a in 0..na {
            let sc = tabular_score(&policy, s, a);
            let qa = q[s * na + a];
            for (dst, x) in g[s][a].iter_mut().zip(&sc) {
                *dst = qa * x;
            }
            let pa = policy.prob(s, a);
            for (dst, x) in g_bar[s].iter_mut().zip(&g[s][a]) {
                *dst += pa * x;
            }
        }
    }
    let mut grad_j = vec![0.0; np];
    for s in 0..ns {
        for (dst, x) in grad_j.iter_mut().zip(&g_bar[s]) {
            *dst += stationary[s] * x;
        }
    }
    let mut var_s_bar = vec![0.0; np];
    let mut e_var_a = vec![0.0; np];
    for s in 0..ns {
        for p in 0..np {
            var_s_bar[p] += stationary[s] * g_bar[s][p] * g_bar[s][p];
            let second: f64 = (0..na).map(|a| policy.prob(s, a) * g[s][a][p] * g[s][a][p]).sum();
            e_var_a[p] += stationary[s] * (second - g_bar[s][p] * g_bar[s][p]);
        }
    }
    for p in 0..np {
        var_s_bar[p] -= grad_j[p] * grad_j[p];
    }

    let m = mdp.marginal_kernel(&policy)?;
    // h_prev = P^(k-1) gbar, rows indexed by state
    let mut h_prev = g_bar.clone();
    let mut alpha_e = Vec::with_capacity(lags);
    let mut e_alpha = Vec::with_capacity(lags);
    let mut wk = 1.0;
    for _ in 1..=lags {
        wk *= omega;
        let h_next: Vec<Vec<f64>> = (0..ns)
            .map(|s| {
                let mut row = vec![0.0; np];
                for s2 in 0..ns {
                    let k = m[s * ns + s2];
                    for (dst, x) in row.iter_mut().zip(&h_prev[s2]) {
                        *dst += k * x;
                    }
                }
                row
            })
            .collect();
        let mut ae = vec![0.0; np];
        let mut ea = vec![0.0; np];
        for s in 0..ns {
            for p in 0..np {
                let cross = g_bar[s][p] * h_next[s][p];
                ae[p] += stationary[s] * cross;
                let mut within = 0.0;
                for a in 0..na {
                    let gp = g[s][a][p];
                    if gp == 0.0 {
                        continue;
                    }
                    let hk: f64 = mdp.next_dist(s, a).iter().zip(&h_prev).map(|(pr, h)| pr * h[p]).sum();
                    within += policy.prob(s, a) * gp * hk;
                }
                ea[p] += stationary[s] * (within - cross);
            }
        }
        for p in 0..np {
            ae[p] = wk * (ae[p] - grad_j[p] * grad_j[p]);
            ea[p] *= wk;
        }
        alpha_e.push(ae);
        e_alpha.push(ea);
        h_prev = h_next;
    }
    Ok(ExactMoments {
        n_states: ns,
        n_actions: na,
        policy,
        stationary,
        q,
        v,
        g_bar,
        grad_j,
        var_s_bar,
        e_var_a,
        alpha_e,
        e_alpha,
        omega,
    })
}

/// Decomposed variance of the `(T, N)` estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub t: usize,
    pub n: usize,
    /// `V`, per parameter.
    pub total: Vec<f64>,
    /// `T V` share immune to `N`.
    pub marginalized: Vec<f64>,
    /// `T V` share carrying the `1/N` factor (already divided by `N`).
    pub policy_dependent: Vec<f64>,
    /// Trace-mean `w^k Cov(Y, Y^k)` for `k = 1..T`.
    pub cov_single: Vec<f64>,
    /// Trace-mean `w^k Cov(Ybar, Ybar^k)`.
    pub cov_bar: Vec<f64>,
}

impl VarianceReport {
    pub fn total_trace(&self) -> f64 {
        trace_mean(&self.total)
    }

    pub fn marginalized_trace(&self) -> f64 {
        trace_mean(&self.marginalized)
    }

    pub fn policy_dependent_trace(&self) -> f64 {
        trace_mean(&self.policy_dependent)
    }
}

fn check_len(m: &ExactMoments, t: usize, n: usize) -> Result<()> {
    ensure!(t >= 1 && n >= 1, InvalidArgument, "T and N must be >= 1");
    ensure!(
        t - 1 <= m.lags(),
        InvalidArgument,
        "T = {t} needs {} covariance lags, moments hold {}",
        t - 1,
        m.lags()
    );
    Ok(())
}

/// Unscaled policy-dependent bracket `E Var_a + 2 sum (T-k)/T w^k E alpha(k)`.
fn policy_bracket(m: &ExactMoments, t: usize) -> Vec<f64> {
    let mut out = m.e_var_a.clone();
    for k in 1..t {
        let c = 2.0 * (t - k) as f64 / t as f64;
        for (dst, x) in out.iter_mut().zip(&m.e_alpha[k - 1]) {
            *dst += c * x;
        }
    }
    out
}

fn marginal_bracket(m: &ExactMoments, t: usize) -> Vec<f64> {
    let mut out = m.var_s_bar.clone();
    for k in 1..t {
        let c = 2.0 * (t - k) as f64 / t as f64;
        for (dst, x) in out.iter_mut().zip(&m.alpha_e[k - 1]) {
            *dst += c * x;
        }
    }
    out
}

pub fn clt_variance(m: &ExactMoments, t: usize, n: usize) -> Result<VarianceReport> {
    check_len(m, t, n)?;
    let marginalized = marginal_bracket(m, t);
    let policy_dependent: Vec<f64> = policy_bracket(m, t).iter().map(|x| x / n as f64).collect();
    let total = marginalized.iter().zip(&policy_dependent).map(|(a, b)| (a + b) / t as f64).collect();
    Ok(VarianceReport {
        t,
        n,
        total,
        marginalized,
        policy_dependent,
        cov_single: (1..t).map(|k| trace_mean(&m.cov_single(k))).collect(),
        cov_bar: (1..t).map(|k| trace_mean(&m.alpha_e[k - 1])).collect(),
    })
}

/// Exact variance of the estimator computed straight from the lag
/// covariances, without the decomposition.
pub fn direct_variance(m: &ExactMoments, t: usize, n: usize) -> Result<Vec<f64>> {
    check_len(m, t, n)?;
    let mut out = m.var_n(n);
    for k in 1..t {
        let c = 2.0 * (t - k) as f64 / t as f64;
        for (dst, x) in out.iter_mut().zip(m.cov_n(k, n)) {
            *dst += c * x;
        }
    }
    Ok(out.iter().map(|x| x / t as f64).collect())
}

/// Variance change from one more action per state (`delta_n`) versus
/// `delta * T` more states (`delta_t`).
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaReport {
    pub delta_n: Vec<f64>,
    pub delta_t: Vec<f64>,
    pub alpha_n: f64,
    pub alpha_t: f64,
    pub delta: f64,
    pub n: usize,
    pub t: usize,
    /// Covariance mass beyond lag `T` that `delta_t` leaves out:
    /// `2 sum_{k=T}^{L-1} (L-k)/L^2 C^k` with `L = T + delta T`. Present
    /// only when `delta T` is an integer and the moments reach lag `L - 1`.
    pub tail: Option<Vec<f64>>,
}

impl DeltaReport {
    pub fn delta_n_trace(&self) -> f64 {
        trace_mean(&self.delta_n)
    }

    pub fn delta_t_trace(&self) -> f64 {
        trace_mean(&self.delta_t)
    }
}

pub fn alpha_n(t: usize, n: usize) -> f64 {
    let n = n as f64;
    -1.0 / (t as f64 * (n * n + n))
}

pub fn alpha_t(t: usize, delta: f64) -> f64 {
    let t = t as f64;
    -delta / (t + delta * t)
}

fn extended_length(t: usize, delta: f64) -> Option<usize> {
    let dt = delta * t as f64;
    let r = dt.round();
    ((dt - r).abs() < 1e-9 && r >= 1.0).then_some(t + r as usize)
}

pub fn delta_reports(m: &ExactMoments, t: usize, n: usize, delta: f64) -> Result<DeltaReport> {
    check_len(m, t, n)?;
    ensure!(delta > 0.0 && delta.is_finite(), InvalidArgument, "delta must be positive, got {delta}");
    let an = alpha_n(t, n);
    let at = alpha_t(t, delta);
    let delta_n = policy_bracket(m, t).iter().map(|x| an * x).collect();
    let tf = t as f64;
    let l = tf + delta * tf;
    let mut bracket = m.var_n(n);
    for k in 1..t {
        let kf = k as f64;
        let c = 2.0 * ((tf - kf) / tf - kf / l);
        for (dst, x) in bracket.iter_mut().zip(m.cov_n(k, n)) {
            *dst += c * x;
        }
    }
    let delta_t = bracket.iter().map(|x| at * x).collect();
    let tail = extended_length(t, delta).filter(|&len| len - 1 <= m.lags()).map(|len| {
        let lf = len as f64;
        let mut out = vec![0.0; m.n_params()];
        for k in t..len {
            let c = 2.0 * (lf - k as f64) / (lf * lf);
            for (dst, x) in out.iter_mut().zip(m.cov_n(k, n)) {
                *dst += c * x;
            }
        }
        out
    });
    Ok(DeltaReport { delta_n, delta_t, alpha_n: an, alpha_t: at, delta, n, t, tail })
}

/// Verdict of the many-actions optimality condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimality {
    pub ma_preferred: bool,
    /// Trace-mean left side of the general condition.
    pub lhs: f64,
    /// Trace-mean right side.
    pub rhs: f64,
    /// The simplified `N = 1, delta = 1` form, when it applies.
    pub single_action_form: Option<(f64, f64)>,
}

/// Adding one action per state beats lengthening the trajectory by
/// `delta T` states exactly when `lhs >= rhs`.
pub fn ma_optimality(m: &ExactMoments, t: usize, n: usize, delta: f64) -> Result<Optimality> {
    check_len(m, t, n)?;
    ensure!(delta > 0.0 && delta.is_finite(), InvalidArgument, "delta must be positive, got {delta}");
    let (tf, nf) = (t as f64, n as f64);
    let nn = nf * nf + nf;
    let l = tf + delta * tf;
    let c_var = (1.0 - delta * nf) / (delta * nn);
    let c_t = (1.0 + delta) * (1.0 - delta * nf);
    let c_k = 1.0 - 2.0 * delta * nf - delta * delta * nf;
    let denom = (delta * tf + delta * delta * tf) * nn;
    let mut lhs = trace_mean(&m.e_var_a) * c_var;
    let mut rhs = trace_mean(&m.var_s_bar);
    for k in 1..t {
        let kf = k as f64;
        lhs += 2.0 * (c_t * tf - c_k * kf) / denom * trace_mean(&m.e_alpha[k - 1]);
        rhs += 2.0 * ((tf - kf) / tf - kf / l) * trace_mean(&m.alpha_e[k - 1]);
    }
    let single_action_form = (n == 1 && delta == 1.0).then(|| {
        let mut l8 = 0.0;
        let mut r8 = trace_mean(&m.var_s_bar);
        for k in 1..t {
            let kf = k as f64;
            l8 += kf / tf * trace_mean(&m.cov_single(k));
            r8 += 2.0 * (tf - kf) / tf * trace_mean(&m.alpha_e[k - 1]);
        }
        (l8, r8)
    });
    Ok(Optimality { ma_preferred: lhs >= rhs, lhs, rhs, single_action_form })
}

/// Bandit-case threshold: with no temporal covariance, many actions win iff
/// `Var_s gbar / E Var_a <= (1 - delta N) / (delta (N^2 + N))`.
pub fn bandit_threshold(n: usize, delta: f64) -> f64 {
    let nf = n as f64;
    (1.0 - delta * nf) / (delta * (nf * nf + nf))
}

/// Second-largest eigenvalue modulus of a row-stochastic `n x n` kernel.
pub fn second_eigenvalue_modulus(kernel: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, kernel);
    let mut mods: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mods.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    mods.get(1).copied().unwrap_or(0.0)
}

/// One sampled trajectory of the tabular estimator with exact Q-values:
/// `T` states from the stationary chain, `N - 1` extra actions each.
#[allow(clippy::too_many_arguments)]
pub fn sample_tabular_batch<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    m: &ExactMoments,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Batch)> {
    ensure!(t >= 1 && n >= 1, InvalidArgument, "T and N must be >= 1");
    let na = m.n_actions;
    let mut s = crate::envs::sample_categorical(&m.stationary, rng);
    let mut states = Vec::with_capacity(t);
    let mut batch = Batch::default();
    for _ in 0..t {
        let a = m.policy.sample(s, rng);
        let next = mdp.sample_next(s, a, rng);
        let onehot = |i: usize| {
            let mut v = vec![0.0; m.n_states];
            v[i] = 1.0;
            v
        };
        let q = m.q[s * na + a];
        batch.transitions.push(crate::envs::Transition {
            state: onehot(s),
            action: Action::Discrete(a),
            reward: mdp.reward(s, a),
            next_state: onehot(next),
            done: false,
            truncated: false,
        });
        batch.values.push(m.v[s]);
        batch.log_probs.push(m.policy.prob(s, a).ln());
        batch.lambda_returns.push(q);
        batch.advantages.push(q - m.v[s]);
        let extra = (1..n)
            .map(|_| {
                let b = m.policy.sample(s, rng);
                ExtraAction { action: Action::Discrete(b), q_estimate: m.q[s * na + b], old_log_prob: m.policy.prob(s, b).ln() }
            })
            .collect();
        batch.extra.push(extra);
        states.push(s);
        s = next;
    }
    Ok((states, batch))
}

/// Closed-form evaluation of the estimator on a tabular batch; equals
/// [`spg::estimate_spg`] with a tabular head.
pub fn tabular_estimate(m: &ExactMoments, states: &[usize], batch: &Batch, opts: spg::SpgOptions) -> Result<Vec<f64>> {
    let (_, actions, weights) = spg::estimator_rows(batch, opts)?;
    let per_state = batch.n_actions_per_state();
    let mut out = vec![0.0; m.n_params()];
    for (i, (a, w)) in actions.iter().zip(&weights).enumerate() {
        let s = states[i / per_state];
        let a = a.index().ok_or_else(|| Error::InvalidArgument("tabular batch holds continuous actions".into()))?;
        let na = m.n_actions;
        for b in 0..na {
            out[s * na + b] += w * (if a == b { 1.0 } else { 0.0 } - m.policy.prob(s, b));
        }
    }
    Ok(out)
}

/// Estimate of the two variance components from sampled states, each
/// carrying `K >= 2` per-action gradient terms.
#[derive(Clone, Debug)]
pub struct DecompositionAccumulator {
    k: usize,
    n_params: usize,
    /// Per-state action means.
    bars: Vec<Vec<f64>>,
    /// Per-state trace-mean within-state sample variance.
    within: Vec<f64>,
    pooled_sum: Vec<f64>,
    pooled_sq: Vec<f64>,
}

/// Empirical variance components (trace means) with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDecomposition {
    pub n_states: usize,
    pub k: usize,
    /// Estimate of `Var_s gbar`.
    pub marginalized: f64,
    /// Estimate of `E_s Var_a g`.
    pub policy_dependent: f64,
    pub marginalized_se: f64,
    pub policy_dependent_se: f64,
    /// Variance of all per-action terms pooled together.
    pub pooled: f64,
}

impl DecompositionAccumulator {
    pub fn new(n_params: usize, k: usize) -> Result<Self> {
        ensure!(k >= 2, InvalidArgument, "need at least 2 actions per state, got {k}");
        Ok(DecompositionAccumulator {
            k,
            n_params,
            bars: Vec::new(),
            within: Vec::new(),
            pooled_sum: vec![0.0; n_params],
            pooled_sq: vec![0.0; n_params],
        })
    }

    pub fn add_state(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        ensure!(grads.len() == self.k, Shape, "{} action terms, expected {}", grads.len(), self.k);
        let p = self.n_params;
        ensure!(grads.iter().all(|g| g.len() == p), Shape, "gradient length mismatch");
        let kf = self.k as f64;
        let mut bar = vec![0.0; p];
        let mut within = 0.0;
        for j in 0..p {
            let mean: f64 = grads.iter().map(|g| g[j]).sum::<f64>() / kf;
            within += grads.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (kf - 1.0);
            bar[j] = mean;
            for g in grads {
                self.pooled_sum[j] += g[j];
                self.pooled_sq[j] += g[j] * g[j];
            }
        }
        self.bars.push(bar);
        self.within.push(within / p as f64);
        Ok(())
    }

    pub fn finish(&self) -> Result<EmpiricalDecomposition> {
        let m = self.bars.len();
        ensure!(m >= 2, Degenerate, "need at least 2 sampled states, got {m}");
        let (mf, kf, pf) = (m as f64, self.k as f64, self.n_params as f64);
        let mut mean = vec![0.0; self.n_params];
        for b in &self.bars {
            for (dst, x) in mean.iter_mut().zip(b) {
                *dst += x / mf;
            }
        }
        // per-state contributions u_s whose mean is the component estimate
        let u: Vec<f64> = self
            .bars
            .iter()
            .zip(&self.within)
            .map(|(b, w)| b.iter().zip(&mean).map(|(x, mu)| (x - mu).powi(2)).sum::<f64>() / pf * mf / (mf - 1.0) - w / kf)
            .collect();
        let (marginalized, marginalized_se) = mean_and_se(&u);
        let (policy_dependent, policy_dependent_se) = mean_and_se(&self.within);
        let total = mf * kf;
        let pooled = self
            .pooled_sum
            .iter()
            .zip(&self.pooled_sq)
            .map(|(s, q)| (q - s * s / total) / (total - 1.0))
            .sum::<f64>()
            / pf;
        Ok(EmpiricalDecomposition {
            n_states: m,
            k: self.k,
            marginalized,
            policy_dependent,
            marginalized_se,
            policy_dependent_se,
            pooled,
        })
    }
}

/// Sample mean and its standard error.
pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Settings for [`mc_decomposition`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McDecompositionConfig {
    /// Number of sampled states `M`.
    pub samples: usize,
    /// Actions drawn per state.
    pub actions_per_state: usize,
    /// Rewound rollouts averaged into each Q-value.
    pub q_rollouts: usize,
    pub horizon: usize,
    pub gamma: f64,
    /// Policy steps between sampled states.
    pub stride: usize,
}

pub const MIN_DECOMPOSITION_SAMPLES: usize = 1000;

/// Empirical variance components on any rewindable environment: states are
/// taken from a running policy trajectory and every action's Q-value is
/// the average of `q_rollouts` critic-bootstrapped rewound rollouts.
pub fn mc_decomposition<R: Rng + ?Sized>(
    env: &mut dyn Env,
    head: &PolicyHead,
    params: &ParamVector,
    critic: &dyn ValueFunction,
    cfg: McDecompositionConfig,
    rng: &mut R,
) -> Result<EmpiricalDecomposition> {
    ensure!(
        cfg.samples >= MIN_DECOMPOSITION_SAMPLES,
        InvalidArgument,
        "need at least {MIN_DECOMPOSITION_SAMPLES} sampled states, got {}",
        cfg.samples
    );
    ensure!(cfg.q_rollouts >= 1, InvalidArgument, "q_rollouts must be >= 1");
    let mut acc = DecompositionAccumulator::new(head.n_params(), cfg.actions_per_state)?;
    if env.needs_reset() {
        env.reset();
    }
    for _ in 0..cfg.samples {
        for _ in 0..cfg.stride.max(1) {
            if env.needs_reset() {
                env.reset();
            }
            let a = head.sample(params, &env.observe(), rng)?;
            env.step(&a)?;
        }
        if env.needs_reset() {
            env.reset();
        }
        let token = env.snapshot();
        let obs = env.observe();
        let mut grads = Vec::with_capacity(cfg.actions_per_state);
        for _ in 0..cfg.actions_per_state {
            let a = head.sample(params, &obs, rng)?;
            let mut q = 0.0;
            for _ in 0..cfg.q_rollouts {
                env.restore(&token)?;
                q += spg::rollout_return(env, &a, head, params, cfg.horizon, cfg.gamma, critic, rng)?;
            }
            q /= cfg.q_rollouts as f64;
            let mut g = head.grad_log_prob(params, &obs, &a)?;
            g.iter_mut().for_each(|x| *x *= q);
            grads.push(g);
        }
        env.restore(&token)?;
        acc.add_state(&grads)?;
    }
    acc.finish()
}
