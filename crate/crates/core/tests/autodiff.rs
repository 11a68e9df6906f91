use pgvlab_core::ndiff::{forward, forward_batch, forward_tape, Activation, MlpSpec, ParamVector, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_net(seed: u64) -> (MlpSpec, ParamVector, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=4);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=6)).collect();
    let output = rng.random_range(1..=3);
    let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let spec = MlpSpec::new(input, &hidden, output, act).unwrap();
    let mut p = spec.init(&mut rng, 1.0);
    p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let rows = rng.random_range(1..=3);
    let x = Tensor::from_vec(rows, input, (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let w = Tensor::from_vec(rows, output, (0..rows * output).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (spec, p, x, w)
}

/// Gradient of `sum(w * f(x))` with respect to the parameters.
fn tape_grad(spec: &MlpSpec, p: &ParamVector, x: &Tensor, w: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let g = tape.params(p);
    let xin = tape.constant(x.clone());
    let y = forward_tape(spec, &mut tape, &g.vars, xin).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap().into_group(&g)
}

fn objective(spec: &MlpSpec, p: &ParamVector, x: &Tensor, w: &Tensor) -> f64 {
    let y = forward_batch(spec, p, x).unwrap();
    y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(seed in 0u64..10_000) {
        let (spec, p, x, w) = random_net(seed);
        let g = tape_grad(&spec, &p, &x, &w);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut hi = p.clone();
            hi.values_mut()[i] += h;
            let mut lo = p.clone();
            lo.values_mut()[i] -= h;
            let fd = (objective(&spec, &hi, &x, &w) - objective(&spec, &lo, &x, &w)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: tape {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn gradient_is_linear_in_the_cotangent(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (spec, p, x, w1) = random_net(seed);
        let w2 = w1.map(|v| (v * 7.3).sin());
        let mixed = Tensor::from_vec(w1.rows, w1.cols, w1.data.iter().zip(&w2.data).map(|(u, v)| a * u + b * v).collect()).unwrap();
        let g1 = tape_grad(&spec, &p, &x, &w1);
        let g2 = tape_grad(&spec, &p, &x, &w2);
        let gm = tape_grad(&spec, &p, &x, &mixed);
        for i in 0..gm.len() {
            let want = a * g1[i] + b * g2[i];
            prop_assert!((gm[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn forward_is_referentially_transparent(seed in 0u64..10_000) {
        let (spec, p, x, w) = random_net(seed);
        let a = forward_batch(&spec, &p, &x).unwrap();
        let b = forward_batch(&spec, &p, &x).unwrap();
        prop_assert_eq!(&a, &b);
        for r in 0..x.rows {
            prop_assert_eq!(forward(&spec, &p, x.row(r)).unwrap(), a.row(r).to_vec());
        }
        prop_assert_eq!(tape_grad(&spec, &p, &x, &w), tape_grad(&spec, &p, &x, &w));
    }
}

#[test]
fn linear_layer_gradient_by_hand() {
    // y = x W + b with x = [2, -1], W = [[1, 0], [3, 1]], b = [0.5, 0]
    let spec = MlpSpec::new(2, &[], 2, Activation::Tanh).unwrap();
    let p = ParamVector::new(vec![1.0, 0.0, 3.0, 1.0, 0.5, 0.0], spec.layout()).unwrap();
    let x = Tensor::from_vec(1, 2, vec![2.0, -1.0]).unwrap();
    assert_eq!(forward(&spec, &p, &[2.0, -1.0]).unwrap(), vec![-0.5, -1.0]);
    let w = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
    // d/dW_ij = x_i w_j, d/db_j = w_j
    assert_eq!(tape_grad(&spec, &p, &x, &w), vec![2.0, 4.0, -1.0, -2.0, 1.0, 2.0]);
}
