#![allow(dead_code)]

use glacnet_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output element contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed);
    let w = random_tensor(&mut r, &shape, 1.0).into_data();
    let weighted = tape.mul_const(out, w).unwrap();
    tape.sum(weighted)
}

/// Worst relative error between backward gradients and central differences
/// of `build` with respect to every element of every input.
pub fn worst_fd_error(inputs: &[Tensor], h: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + h;
            let plus = eval(&probe);
            probe[k].data_mut()[i] = x - h;
            let minus = eval(&probe);
            probe[k].data_mut()[i] = x;
            worst = worst.max(rel_err(analytic[k][i], (plus - minus) / (2.0 * h)));
        }
    }
    worst
}
