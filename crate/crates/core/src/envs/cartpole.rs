use super::{check_token, Action, ActionSpace, Env, RewindToken, Transition};
use crate::error::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MOMENT: f64 = MASS_POLE * HALF_LENGTH;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
const X_LIMIT: f64 = 2.4;
pub const CARTPOLE_MAX_STEPS: usize = 200;

/// Classic cart-pole balancing, explicit Euler at 50 Hz.
#[derive(Clone, Debug)]
pub struct CartPole {
    state: [f64; 4],
    steps: usize,
    needs_reset: bool,
    rng: ChaCha8Rng,
}

impl CartPole {
    pub fn new(seed: u64) -> Self {
        let mut env = CartPole { state: [0.0; 4], steps: 0, needs_reset: true, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.reset();
        env
    }

    /// Place the system in an explicit `[x, x_dot, theta, theta_dot]` state.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.needs_reset = false;
    }
}

impl Env for CartPole {
    fn name(&self) -> &'static str {
        "cartpole"
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn max_steps(&self) -> Option<usize> {
        Some(CARTPOLE_MAX_STEPS)
    }

    fn reset(&mut self) -> Vec<f64> {
        for s in self.state.iter_mut() {
            *s = self.rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.needs_reset = false;
        self.state.to_vec()
    }

    fn observe(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        ensure!(!self.needs_reset, Contract, "cartpole stepped after episode end without reset");
        let a = match action {
            Action::Discrete(a) if *a < 2 => *a,
            other => return Err(crate::Error::InvalidArgument(format!("cartpole action {other:?}"))),
        };
        let before = self.state;
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if a == 1 { FORCE } else { -FORCE };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MOMENT * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MOMENT * theta_acc * cos / TOTAL_MASS;
        self.state = [x + DT * x_dot, x_dot + DT * x_acc, theta + DT * theta_dot, theta_dot + DT * theta_acc];
        self.steps += 1;
        let done = self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT;
        let truncated = !done && self.steps >= CARTPOLE_MAX_STEPS;
        self.needs_reset = done || truncated;
        Ok(Transition {
            state: before.to_vec(),
            action: action.clone(),
            reward: 1.0,
            next_state: self.state.to_vec(),
            done,
            truncated,
        })
    }

    fn snapshot(&self) -> RewindToken {
        RewindToken {
            kind: "cartpole",
            physics: self.state.to_vec(),
            steps: self.steps,
            needs_reset: self.needs_reset,
            rng: self.rng.clone(),
        }
    }

    fn restore(&mut self, token: &RewindToken) -> Result<()> {
        check_token("cartpole", token)?;
        self.state.copy_from_slice(&token.physics);
        self.steps = token.steps;
        self.needs_reset = token.needs_reset;
        self.rng = token.rng.clone();
        Ok(())
    }

    fn needs_reset(&self) -> bool {
        self.needs_reset
    }

    fn set_observation(&mut self, obs: &[f64]) -> Result<()> {
        ensure!(obs.len() == 4, Shape, "cartpole state has 4 entries, got {}", obs.len());
        self.set_state([obs[0], obs[1], obs[2], obs[3]]);
        Ok(())
    }
}
