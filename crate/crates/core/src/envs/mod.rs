//! Rewindable environments.
//!
//! Every environment owns its RNG, so a [`RewindToken`] (physics state plus
//! RNG state) is enough to replay a branch bit-for-bit.

mod cartpole;
mod pointmass;
mod tabular;
mod tabular_env;

pub use cartpole::CartPole;
pub use pointmass::PointMass;
pub use tabular::{
    apply, generate_random_mdp, identity, matmul, sample_categorical, stationary_of, Kernel, TabularMdp,
    TabularPolicy, MAX_ACTIONS, MAX_STATES,
};
pub use tabular_env::TabularEnv;

use crate::error::Result;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    /// Network input encoding: one-hot for discrete actions.
    pub fn encode(&self, space: &ActionSpace) -> Vec<f64> {
        match (self, space) {
            (Action::Discrete(i), ActionSpace::Discrete(n)) => {
                let mut v = vec![0.0; *n];
                v[*i] = 1.0;
                v
            }
            (Action::Continuous(a), _) => a.clone(),
            (Action::Discrete(i), ActionSpace::Continuous { .. }) => vec![*i as f64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of [`Action::encode`].
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub truncated: bool,
}

/// Opaque environment snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct RewindToken {
    pub(crate) kind: &'static str,
    pub(crate) physics: Vec<f64>,
    pub(crate) steps: usize,
    pub(crate) needs_reset: bool,
    pub(crate) rng: ChaCha8Rng,
}

pub trait Env: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Step cap after which an episode is truncated; `None` for continuing tasks.
    fn max_steps(&self) -> Option<usize>;
    fn reset(&mut self) -> Vec<f64>;
    fn observe(&self) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<Transition>;
    fn snapshot(&self) -> RewindToken;
    fn restore(&mut self, token: &RewindToken) -> Result<()>;
    /// True once an episode ended and `reset` has not been called.
    fn needs_reset(&self) -> bool;
    /// Jump to the fully observed state `obs` as the start of a fresh episode.
    fn set_observation(&mut self, obs: &[f64]) -> Result<()>;
}

pub(crate) fn check_token(kind: &'static str, token: &RewindToken) -> Result<()> {
    crate::error::ensure!(
        token.kind == kind,
        Contract,
        "cannot restore a {} token into a {} environment",
        token.kind,
        kind
    );
    Ok(())
}

/// Build a named environment; `seed` drives resets and stochastic transitions.
pub fn make_env(name: &str, seed: u64) -> Result<Box<dyn Env>> {
    match name {
        "cartpole" => Ok(Box::new(CartPole::new(seed))),
        "pointmass" => Ok(Box::new(PointMass::new(seed))),
        other => Err(crate::Error::InvalidArgument(format!(
            "unknown environment {other:?} (expected cartpole or pointmass)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_action<R: Rng>(space: &ActionSpace, rng: &mut R) -> Action {
        match space {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..*n)),
            ActionSpace::Continuous { dim, low, high } => {
                Action::Continuous((0..*dim).map(|_| rng.random_range(*low..*high)).collect())
            }
        }
    }

    fn rewind_fidelity(mut env: Box<dyn Env>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        env.reset();
        for _ in 0..5 {
            let a = random_action(&env.action_space(), &mut rng);
            env.step(&a).unwrap();
        }
        let token = env.snapshot();
        let actions: Vec<Action> = (0..30).map(|_| random_action(&env.action_space(), &mut rng)).collect();
        let run = |env: &mut Box<dyn Env>| {
            let mut out = Vec::new();
            for a in &actions {
                if env.needs_reset() {
                    env.reset();
                }
                out.push(env.step(a).unwrap());
            }
            out
        };
        let first = run(&mut env);
        env.restore(&token).unwrap();
        let second = run(&mut env);
        assert_eq!(first, second);
    }

    #[test]
    fn rewind_reproduces_transitions() {
        rewind_fidelity(Box::new(CartPole::new(3)));
        rewind_fidelity(Box::new(PointMass::new(3)));
        let mdp = generate_random_mdp(2, 4, 3, 1.0, 0.5).unwrap();
        rewind_fidelity(Box::new(TabularEnv::new(mdp, 5)));
    }

    #[test]
    fn foreign_token_rejected() {
        let cp = CartPole::new(0);
        let mut pm = PointMass::new(0);
        assert!(pm.restore(&cp.snapshot()).is_err());
    }

    #[test]
    fn unknown_env_name() {
        assert!(make_env("acrobot", 0).is_err());
    }
}
