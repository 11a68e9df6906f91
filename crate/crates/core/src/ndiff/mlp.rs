use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{ParamVector, Segment};
use crate::error::{ensure, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Fully connected network shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Whether layers carry a bias row. Tabular policies turn it off so the
    /// weights are exactly a logit table over one-hot states.
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_sizes: &[usize], output_dim: usize, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_sizes: hidden_sizes.to_vec(),
            output_dim,
            activation,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, InvalidArgument, "input_dim must be >= 1");
        ensure!(self.output_dim >= 1, InvalidArgument, "output_dim must be >= 1");
        ensure!(self.hidden_sizes.iter().all(|&h| h >= 1), InvalidArgument, "hidden sizes must be >= 1");
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend_from_slice(&self.hidden_sizes);
        d.push(self.output_dim);
        d
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_sizes.len() + 1
    }

    fn segs_per_layer(&self) -> usize {
        if self.bias {
            2
        } else {
            1
        }
    }

    /// Number of leading segments this network occupies in a parameter vector.
    pub fn n_segments(&self) -> usize {
        self.n_layers() * self.segs_per_layer()
    }

    pub fn layout(&self) -> Vec<Segment> {
        let d = self.dims();
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            out.push(Segment::new(format!("l{l}.w"), d[l], d[l + 1]));
            if self.bias {
                out.push(Segment::new(format!("l{l}.b"), 1, d[l + 1]));
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(Segment::size).sum()
    }

    /// Orthogonal weights (gain sqrt(2) on hidden layers, `out_gain` on the
    /// last layer) and zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, out_gain: f64) -> ParamVector {
        let d = self.dims();
        let mut values = Vec::with_capacity(self.n_params());
        for l in 0..self.n_layers() {
            let gain = if l + 1 == self.n_layers() { out_gain } else { 2f64.sqrt() };
            values.extend(orthogonal(rng, d[l], d[l + 1], gain));
            if self.bias {
                values.extend(std::iter::repeat_n(0.0, d[l + 1]));
            }
        }
        ParamVector::new(values, self.layout()).expect("init matches layout")
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let want = self.layout();
        ensure!(
            params.layout().len() >= want.len(),
            Shape,
            "parameter vector has {} segments, network needs {}",
            params.layout().len(),
            want.len()
        );
        for (a, b) in want.iter().zip(params.layout()) {
            ensure!(
                a.rows == b.rows && a.cols == b.cols,
                Shape,
                "segment {} is {}x{}, expected {}x{}",
                b.name,
                b.rows,
                b.cols,
                a.rows,
                a.cols
            );
        }
        Ok(())
    }
}

fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign-fix so the distribution is uniform over orthogonal matrices
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            for i in 0..big {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.push(gain * v);
        }
    }
    out
}

/// Batched inference without recording: `input` is `n x input_dim`.
pub fn forward_batch(spec: &MlpSpec, params: &ParamVector, input: &Tensor) -> Result<Tensor> {
    ensure!(
        input.cols == spec.input_dim,
        Shape,
        "input has {} columns, network expects {}",
        input.cols,
        spec.input_dim
    );
    spec.check_params(params)?;
    let spl = spec.segs_per_layer();
    let mut h = input.clone();
    for l in 0..spec.n_layers() {
        let w = &params.layout()[l * spl];
        let wt = Tensor { rows: w.rows, cols: w.cols, data: params.segment(l * spl).to_vec() };
        h = h.matmul(&wt)?;
        if spec.bias {
            h.add_row_inplace(params.segment(l * spl + 1));
        }
        if l + 1 < spec.n_layers() {
            h.data.iter_mut().for_each(|x| *x = spec.activation.apply(*x));
        }
    }
    Ok(h)
}

/// Single-input forward pass.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        input.len() == spec.input_dim,
        Shape,
        "input length {} != input_dim {}",
        input.len(),
        spec.input_dim
    );
    Ok(forward_batch(spec, params, &Tensor::row_vector(input.to_vec()))?.data)
}

/// Record the forward pass on a tape using registered parameter leaves
/// (`vars` from [`Tape::params`]; extra trailing segments are ignored).
pub fn forward_tape(spec: &MlpSpec, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
    ensure!(vars.len() >= spec.n_segments(), Shape, "too few parameter segments for network");
    ensure!(
        tape.value(input).cols == spec.input_dim,
        Shape,
        "input has {} columns, network expects {}",
        tape.value(input).cols,
        spec.input_dim
    );
    let spl = spec.segs_per_layer();
    let mut h = input;
    for l in 0..spec.n_layers() {
        h = tape.matmul(h, vars[l * spl])?;
        if spec.bias {
            h = tape.add_row(h, vars[l * spl + 1])?;
        }
        if l + 1 < spec.n_layers() {
            h = match spec.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Relu => tape.relu(h),
            };
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(3, &[4], 2, Activation::Tanh).unwrap();
        let p = ParamVector::zeros(spec.layout());
        assert_eq!(forward(&spec, &p, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_net() {
        let spec = MlpSpec::new(1, &[], 1, Activation::Tanh).unwrap();
        let p = ParamVector::new(vec![1.0, 0.0], spec.layout()).unwrap();
        assert_eq!(forward(&spec, &p, &[3.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let spec = MlpSpec::new(2, &[3], 1, Activation::Relu).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(0), 1.0);
        assert!(forward(&spec, &p, &[1.0]).is_err());
        let other = MlpSpec::new(3, &[3], 1, Activation::Relu).unwrap();
        assert!(forward(&other, &p, &[1.0, 2.0, 3.0]).is_err());
        assert!(MlpSpec::new(0, &[], 1, Activation::Relu).is_err());
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(&mut rng, 6, 4, 1.0);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..6).map(|i| w[i * 4 + a] * w[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_forward_matches_batch_forward() {
        let spec = MlpSpec::new(3, &[5, 4], 2, Activation::Tanh).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        let x = Tensor::from_vec(2, 3, vec![0.1, -0.2, 0.3, 1.0, 2.0, -1.0]).unwrap();
        let direct = forward_batch(&spec, &p, &x).unwrap();
        let mut tape = Tape::new();
        let g = tape.params(&p);
        let xin = tape.constant(x);
        let y = forward_tape(&spec, &mut tape, &g.vars, xin).unwrap();
        assert_eq!(tape.value(y), &direct);
    }
}
