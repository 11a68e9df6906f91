//! Relative bias and variance of gradient estimators against an unbiased
//! actor-critic reference, all computed on batches gathered by one frozen
//! policy. Probe gradients are never applied.

use crate::agents::{augment, collect, Agent, AgentConfig, Models, Variant};
use crate::envs::Env;
use crate::error::{ensure, Result};
use crate::ndiff::{global_norm, ParamVector};
use crate::policy::{PolicyHead, ValueFunction};
use crate::spg::{estimate_spg, Batch, Method, SpgOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameters whose reference magnitude is below this are left out of the
/// ratios.
pub const EXCLUSION_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub n_estimates: usize,
    /// Real states per probe batch.
    pub probe_batch: usize,
    pub n_checkpoints: usize,
    pub methods: Vec<Method>,
    /// Simulated samples per state for QMA, MBMA and MBPO.
    pub extra: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lam: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_estimates: 125,
            probe_batch: 2500,
            n_checkpoints: 10,
            methods: vec![Method::Ac, Method::Qma, Method::Mbma, Method::Mbpo],
            extra: 8,
            horizon: 12,
            gamma: 0.99,
            lam: 0.95,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_estimates >= 2, InvalidArgument, "n_estimates must be >= 2 (variance needs two samples)");
        ensure!(self.probe_batch >= 1, InvalidArgument, "probe_batch must be >= 1");
        ensure!(self.n_checkpoints >= 1, InvalidArgument, "n_checkpoints must be >= 1");
        ensure!(!self.methods.is_empty(), InvalidArgument, "no probe methods");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasVarianceRow {
    pub checkpoint: usize,
    pub method: Method,
    pub relative_bias: f64,
    pub relative_variance: f64,
    pub mean_grad_norm: f64,
    pub excluded_params: usize,
}

/// A ratio averaged over the parameters that survived exclusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioStat {
    pub value: f64,
    pub excluded: usize,
}

pub fn mean_gradient(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(!samples.is_empty(), InvalidArgument, "no gradient samples");
    let p = samples[0].len();
    ensure!(p > 0, InvalidArgument, "zero-length gradient");
    ensure!(samples.iter().all(|s| s.len() == p), Shape, "gradient samples differ in length");
    let n = samples.len() as f64;
    let mut m = vec![0.0; p];
    for s in samples {
        for (a, b) in m.iter_mut().zip(s) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|x| *x /= n);
    Ok(m)
}

/// The reference gradient: the mean of single-action actor-critic estimates.
pub fn oracle_gradient(ac_estimates: &[Vec<f64>]) -> Result<Vec<f64>> {
    mean_gradient(ac_estimates)
}

/// `(1/P) sum_p |g_p - o_p| / |g_p|` over parameters with `|g_p|` above the
/// exclusion threshold, where `g` is the method's mean gradient.
pub fn relative_bias(method_mean: &[f64], oracle: &[f64]) -> Result<RatioStat> {
    ensure!(method_mean.len() == oracle.len(), Shape, "{} vs {} parameters", method_mean.len(), oracle.len());
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (g, o) in method_mean.iter().zip(oracle) {
        if g.abs() < EXCLUSION_THRESHOLD {
            continue;
        }
        sum += (g - o).abs() / g.abs();
        kept += 1;
    }
    ensure!(kept > 0, Degenerate, "every parameter excluded from relative bias");
    Ok(RatioStat { value: sum / kept as f64, excluded: method_mean.len() - kept })
}

/// `(1/P) sum_p Var[g_p] / mean(g_p)^2` with the unbiased sample variance.
pub fn relative_variance(samples: &[Vec<f64>]) -> Result<RatioStat> {
    ensure!(samples.len() >= 2, InvalidArgument, "relative variance needs at least two samples");
    let mean = mean_gradient(samples)?;
    let n = samples.len() as f64;
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (p, m) in mean.iter().enumerate() {
        if m.abs() < EXCLUSION_THRESHOLD {
            continue;
        }
        let var = samples.iter().map(|s| (s[p] - m).powi(2)).sum::<f64>() / (n - 1.0);
        sum += var / (m * m);
        kept += 1;
    }
    ensure!(kept > 0, Degenerate, "every parameter excluded from relative variance");
    Ok(RatioStat { value: sum / kept as f64, excluded: mean.len() - kept })
}

/// One method's gradient sample on a real batch.
#[allow(clippy::too_many_arguments)]
pub fn method_gradient(
    method: Method,
    batch: &Batch,
    models: Models<'_>,
    head: &PolicyHead,
    params: &ParamVector,
    critic: &dyn ValueFunction,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let variant = match method {
        Method::Ac | Method::Ppo => None,
        Method::Qma => Some(Variant::Qma),
        Method::Mbma => Some(Variant::Mbma),
        Method::Mbpo => Some(Variant::Mbpo),
    };
    let est = match variant {
        None => estimate_spg(batch, head, params, SpgOptions::default(), method, 0)?,
        Some(v) => {
            let aug = augment(batch.clone(), v, models, head, params, critic, cfg.extra, cfg.horizon, cfg.gamma, cfg.lam, rng)?;
            estimate_spg(&aug.batch, head, params, SpgOptions::default(), method, 0)?
        }
    };
    Ok(est.grad)
}

/// All methods' rows at one checkpoint. `env` supplies fresh, disjoint
/// batches by continuing its chain; `models` are frozen.
#[allow(clippy::too_many_arguments)]
pub fn probe_checkpoint(
    env: &mut dyn Env,
    head: &PolicyHead,
    params: &ParamVector,
    critic: &dyn ValueFunction,
    models: Models<'_>,
    cfg: &ProbeConfig,
    checkpoint: usize,
    seed: u64,
) -> Result<Vec<BiasVarianceRow>> {
    cfg.validate()?;
    let mut collect_rng = ChaCha8Rng::seed_from_u64(seed);
    collect_rng.set_stream(2 * checkpoint as u64 + 1);
    let mut per_method: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.n_estimates); cfg.methods.len()];
    let mut ac: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_estimates);
    for e in 0..cfg.n_estimates {
        let batch = collect(env, head, params, critic, cfg.probe_batch, cfg.gamma, cfg.lam, &mut collect_rng)?;
        ac.push(estimate_spg(&batch, head, params, SpgOptions::default(), Method::Ac, 0)?.grad);
        for (k, &m) in cfg.methods.iter().enumerate() {
            // each (estimate, method) cell owns a stream, so results do not
            // depend on the method list or evaluation order
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((checkpoint as u64) << 32) ^ e as u64);
            rng.set_stream(100 + m as u64);
            let g = if m == Method::Ac {
                ac[e].clone()
            } else {
                method_gradient(m, &batch, models, head, params, critic, cfg, &mut rng)?
            };
            per_method[k].push(g);
        }
    }
    let oracle = oracle_gradient(&ac)?;
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for (k, &m) in cfg.methods.iter().enumerate() {
        let samples = &per_method[k];
        let bias = relative_bias(&mean_gradient(samples)?, &oracle)?;
        let var = relative_variance(samples)?;
        let norm = samples.iter().map(|g| global_norm(g)).sum::<f64>() / samples.len() as f64;
        rows.push(BiasVarianceRow {
            checkpoint,
            method: m,
            relative_bias: bias.value,
            relative_variance: var.value,
            mean_grad_norm: norm,
            excluded_params: bias.excluded,
        });
    }
    Ok(rows)
}

/// Train a PPO gathering agent that also fits Q-networks and a dynamics
/// model, keeping a frozen copy after each of `n_checkpoints` equal slices
/// of `total_steps`.
pub fn train_gathering_agent(
    env: &mut dyn Env,
    config: &AgentConfig,
    total_steps: usize,
    n_checkpoints: usize,
    seed: u64,
) -> Result<Vec<Agent>> {
    ensure!(n_checkpoints >= 1, InvalidArgument, "n_checkpoints must be >= 1");
    let cfg = AgentConfig { variant: Variant::Ppo, train_all_models: true, ..config.clone() };
    let mut agent = Agent::new(env.obs_dim(), &env.action_space(), cfg, seed)?;
    let mut out = Vec::with_capacity(n_checkpoints);
    for c in 1..=n_checkpoints {
        let until = total_steps * c / n_checkpoints;
        while agent.env_steps + agent.config.batch_size <= until {
            agent.iterate(env, 0)?;
        }
        ensure!(agent.updates > 0, InvalidArgument, "checkpoint {c} reached before the first update; raise total_steps");
        out.push(agent.clone());
    }
    Ok(out)
}

/// Probe every checkpoint with its own frozen models.
pub fn run_probe(env: &mut dyn Env, cfg: &ProbeConfig, checkpoints: &[Agent], seed: u64) -> Result<Vec<BiasVarianceRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (i, agent) in checkpoints.iter().enumerate() {
        ensure!(
            agent.learner.head.net.input_dim == env.obs_dim(),
            Contract,
            "checkpoint {i} expects {} observations, environment has {}",
            agent.learner.head.net.input_dim,
            env.obs_dim()
        );
        let models = Models {
            q: agent.q.as_ref(),
            world: agent.dynamics.as_ref().map(|m| m as &dyn crate::dynamics::WorldModel),
        };
        rows.extend(probe_checkpoint(
            env,
            &agent.learner.head,
            &agent.learner.actor,
            &agent.learner.critic,
            models,
            cfg,
            i,
            seed,
        )?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_formula_examples() {
        assert_eq!(relative_bias(&[2.0, -1.0], &[1.0, -1.0]).unwrap().value, 0.25);
        assert_eq!(relative_bias(&[0.3, -2.0], &[0.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(relative_bias(&[0.3, -2.0], &[0.3, -2.0]).unwrap().value, 0.0);
    }

    #[test]
    fn variance_formula_example() {
        assert_eq!(relative_variance(&[vec![1.0], vec![3.0]]).unwrap().value, 0.5);
        assert_eq!(relative_variance(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap().value, 0.0);
    }

    #[test]
    fn all_excluded_is_degenerate() {
        assert!(relative_bias(&[0.0, 1e-13], &[1.0, 1.0]).is_err());
        let r = relative_bias(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.excluded, 1);
    }
}
