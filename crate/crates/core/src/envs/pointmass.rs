use super::{check_token, Action, ActionSpace, Env, RewindToken, Transition};
use crate::error::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DT: f64 = 0.1;
const ACCEL: f64 = 2.0;
const DRAG: f64 = 0.5;
const ARENA: f64 = 2.0;
pub const POINTMASS_MAX_STEPS: usize = 250;

/// Damped double integrator in the plane; the goal sits at the origin.
///
/// State is `[x, y, vx, vy]`, actions are forces in `[-1, 1]^2`, and the
/// reward is `1 - tanh(|p'|)` where `p'` is the position after the step.
#[derive(Clone, Debug)]
pub struct PointMass {
    state: [f64; 4],
    steps: usize,
    needs_reset: bool,
    clip: bool,
    rng: ChaCha8Rng,
}

impl PointMass {
    pub fn new(seed: u64) -> Self {
        let mut env =
            PointMass { state: [0.0; 4], steps: 0, needs_reset: true, clip: true, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.reset();
        env
    }

    /// Variant without action clipping or arena walls, so the dynamics are
    /// exactly linear.
    pub fn unclipped(seed: u64) -> Self {
        PointMass { clip: false, ..Self::new(seed) }
    }

    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.needs_reset = false;
    }
}

impl Env for PointMass {
    fn name(&self) -> &'static str {
        "pointmass"
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 }
    }

    fn max_steps(&self) -> Option<usize> {
        Some(POINTMASS_MAX_STEPS)
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = [self.rng.random_range(-1.0..1.0), self.rng.random_range(-1.0..1.0), 0.0, 0.0];
        self.steps = 0;
        self.needs_reset = false;
        self.state.to_vec()
    }

    fn observe(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        ensure!(!self.needs_reset, Contract, "pointmass stepped after episode end without reset");
        let a = match action {
            Action::Continuous(a) if a.len() == 2 => a,
            other => return Err(crate::Error::InvalidArgument(format!("pointmass action {other:?}"))),
        };
        ensure!(a.iter().all(|x| x.is_finite()), Numeric, "non-finite pointmass action");
        let before = self.state;
        for d in 0..2 {
            let f = if self.clip { a[d].clamp(-1.0, 1.0) } else { a[d] };
            let v = self.state[2 + d] + DT * (ACCEL * f - DRAG * self.state[2 + d]);
            let mut p = self.state[d] + DT * v;
            if self.clip {
                p = p.clamp(-ARENA, ARENA);
            }
            self.state[d] = p;
            self.state[2 + d] = v;
        }
        self.steps += 1;
        let dist = self.state[0].hypot(self.state[1]);
        let truncated = self.steps >= POINTMASS_MAX_STEPS;
        self.needs_reset = truncated;
        Ok(Transition {
            state: before.to_vec(),
            action: action.clone(),
            reward: 1.0 - dist.tanh(),
            next_state: self.state.to_vec(),
            done: false,
            truncated,
        })
    }

    fn snapshot(&self) -> RewindToken {
        RewindToken {
            kind: "pointmass",
            physics: self.state.to_vec(),
            steps: self.steps,
            needs_reset: self.needs_reset,
            rng: self.rng.clone(),
        }
    }

    fn restore(&mut self, token: &RewindToken) -> Result<()> {
        check_token("pointmass", token)?;
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
        ensure!(obs.len() == 4, Shape, "pointmass state has 4 entries, got {}", obs.len());
        self.set_state([obs[0], obs[1], obs[2], obs[3]]);
        Ok(())
    }
}
