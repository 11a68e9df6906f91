use super::tabular::{sample_categorical, TabularMdp};
use super::{check_token, Action, ActionSpace, Env, RewindToken, Transition};
use crate::error::{ensure, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A [`TabularMdp`] behind the [`Env`] interface, observed as one-hot
/// vectors. The chain is continuing: it never terminates or truncates.
#[derive(Clone, Debug)]
pub struct TabularEnv {
    mdp: TabularMdp,
    state: usize,
    steps: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, seed: u64) -> Self {
        let mut env = TabularEnv { mdp, state: 0, steps: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.reset();
        env
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, s: usize) -> Result<()> {
        ensure!(s < self.mdp.n_states(), InvalidArgument, "state {s} out of range");
        self.state = s;
        Ok(())
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[s] = 1.0;
        v
    }

    /// Inverse of [`Self::one_hot`].
    pub fn decode(obs: &[f64]) -> usize {
        obs.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
    }
}

impl Env for TabularEnv {
    fn name(&self) -> &'static str {
        "tabular"
    }

    fn obs_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions())
    }

    fn max_steps(&self) -> Option<usize> {
        None
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = sample_categorical(self.mdp.init_dist(), &mut self.rng);
        self.steps = 0;
        self.one_hot(self.state)
    }

    fn observe(&self) -> Vec<f64> {
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        let a = match action {
            Action::Discrete(a) if *a < self.mdp.n_actions() => *a,
            other => return Err(crate::Error::InvalidArgument(format!("tabular action {other:?}"))),
        };
        let s = self.state;
        let next = self.mdp.sample_next(s, a, &mut self.rng);
        self.state = next;
        self.steps += 1;
        Ok(Transition {
            state: self.one_hot(s),
            action: action.clone(),
            reward: self.mdp.reward(s, a),
            next_state: self.one_hot(next),
            done: false,
            truncated: false,
        })
    }

    fn snapshot(&self) -> RewindToken {
        RewindToken {
            kind: "tabular",
            physics: vec![self.state as f64],
            steps: self.steps,
            needs_reset: false,
            rng: self.rng.clone(),
        }
    }

    fn restore(&mut self, token: &RewindToken) -> Result<()> {
        check_token("tabular", token)?;
        self.state = token.physics[0] as usize;
        self.steps = token.steps;
        self.rng = token.rng.clone();
        Ok(())
    }

    fn needs_reset(&self) -> bool {
        false
    }

    fn set_observation(&mut self, obs: &[f64]) -> Result<()> {
        ensure!(obs.len() == self.mdp.n_states(), Shape, "one-hot of length {}", obs.len());
        self.steps = 0;
        self.set_state(Self::decode(obs))
    }
}
