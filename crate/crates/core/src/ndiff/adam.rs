use super::ParamVector;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-5 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched.
pub fn adam_step(params: &mut ParamVector, grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    ensure!(
        grad.len() == params.len() && state.m.len() == params.len(),
        Shape,
        "adam: params {} grad {} state {}",
        params.len(),
        grad.len(),
        state.m.len()
    );
    ensure!(grad.iter().all(|g| g.is_finite()), Numeric, "non-finite gradient");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = cfg.lr / bc1;
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let denom = (state.v[i] / bc2).sqrt() + cfg.eps;
        values[i] -= step_size * state.m[i] / denom;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Segment;

    fn scalar(x: f64) -> ParamVector {
        ParamVector::new(vec![x], vec![Segment::new("x", 1, 1)]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.25);
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.values(), &[1.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // at t=1: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-6] {
            let mut p = scalar(0.0);
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.values()[0] - want).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &mut st, &AdamConfig::default()).is_err());
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(st, AdamState::new(1));
    }

    #[test]
    fn quadratic_descent_matches_independent_recursion() {
        // Independent scalar Adam recursion on f(x) = x^2.
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            reference.push(x);
        }
        let mut p = scalar(1.0);
        let mut st = AdamState::new(1);
        let mut ours = Vec::new();
        for _ in 0..100 {
            let g = 2.0 * p.values()[0];
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
            ours.push(p.values()[0]);
        }
        for (a, b) in ours.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
        // |x| shrinks monotonically over the warmup phase, before momentum overshoots
        for w in ours[..8].windows(2) {
            assert!(w[1].abs() < w[0].abs());
        }
        assert!(ours.last().unwrap().abs() < 0.1);
    }
}
