mod common;

use common::{random_tensor, rng, weighted_sum, worst_fd_error};
use glacnet_core::lstm::{encode_bidirectional, lstm_step, LstmParams, LstmState};
use glacnet_core::params::ParamStore;
use glacnet_core::{Error, Tape, Tensor, Var};

struct Plain {
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    bias: Vec<f64>,
    d: usize,
    h: usize,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Plain {
    fn from_store(store: &ParamStore, p: &LstmParams) -> Self {
        Plain {
            w_ih: store.get(p.w_ih).data().to_vec(),
            w_hh: store.get(p.w_hh).data().to_vec(),
            bias: store.get(p.bias).data().to_vec(),
            d: p.input_size,
            h: p.hidden_size,
        }
    }

    fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.h;
        let mut z = vec![0.0; 4 * n];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = self.bias[r];
            for k in 0..self.d {
                acc += self.w_ih[r * self.d + k] * x[k];
            }
            for k in 0..n {
                acc += self.w_hh[r * n + k] * h[k];
            }
            *zr = acc;
        }
        let mut h2 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        for j in 0..n {
            let i = sig(z[j]);
            let f = sig(z[n + j]);
            let g = z[2 * n + j].tanh();
            let o = sig(z[3 * n + j]);
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    fn run(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.h];
        let mut c = vec![0.0; self.h];
        xs.iter()
            .map(|x| {
                let (h2, c2) = self.step(x, &h, &c);
                h = h2;
                c = c2;
                h.clone()
            })
            .collect()
    }
}

fn setup(d: usize, h: usize, seed: u64) -> (ParamStore, LstmParams, LstmParams) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let fwd = LstmParams::init(&mut store, "fwd", d, h, &mut r);
    let bwd = LstmParams::init(&mut store, "bwd", d, h, &mut r);
    // perturb biases away from their structured initial values
    for id in [fwd.bias, bwd.bias] {
        let t = random_tensor(&mut r, &[4 * h], 0.5);
        *store.get_mut(id) = t;
    }
    (store, fwd, bwd)
}

fn bi_outputs(store: &ParamStore, fwd: &LstmParams, bwd: &LstmParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(Tensor::row(x.clone()))).collect();
    let out = encode_bidirectional(&mut tape, &bound, fwd, bwd, &inputs).unwrap();
    out.iter().map(|&v| tape.value(v).data().to_vec()).collect()
}

fn random_seq(seed: u64, s: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..s).map(|_| random_tensor(&mut r, &[d], 2.0).into_data()).collect()
}

#[test]
fn bidirectional_matches_two_loop_oracle() {
    let (d, h) = (4, 3);
    let (store, fwd, bwd) = setup(d, h, 21);
    let xs = random_seq(22, 3, d);
    let got = bi_outputs(&store, &fwd, &bwd, &xs);

    let f = Plain::from_store(&store, &fwd).run(&xs);
    let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let b = Plain::from_store(&store, &bwd).run(&reversed);
    assert_eq!(got.len(), 3);
    for t in 0..3 {
        let expected: Vec<f64> = f[t].iter().chain(&b[2 - t]).copied().collect();
        for (x, y) in got[t].iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12, "t={t}: {x} vs {y}");
        }
    }
}

#[test]
fn single_image_is_two_single_steps() {
    let (store, fwd, bwd) = setup(3, 2, 23);
    let xs = random_seq(24, 1, 3);
    let got = bi_outputs(&store, &fwd, &bwd, &xs);
    let zero = vec![0.0; 2];
    let (hf, _) = Plain::from_store(&store, &fwd).step(&xs[0], &zero, &zero);
    let (hb, _) = Plain::from_store(&store, &bwd).step(&xs[0], &zero, &zero);
    let expected: Vec<f64> = hf.iter().chain(&hb).copied().collect();
    for (x, y) in got[0].iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_parameters_give_zero_outputs() {
    let (mut store, fwd, bwd) = setup(3, 2, 25);
    store.zero_all();
    for s in [1, 5] {
        let xs = random_seq(26, s, 3);
        for out in bi_outputs(&store, &fwd, &bwd, &xs) {
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn reversal_swaps_directions() {
    let (d, h) = (3, 2);
    let (store, fwd, bwd) = setup(d, h, 27);
    let xs = random_seq(28, 4, d);
    let forward = bi_outputs(&store, &fwd, &bwd, &xs);
    let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let swapped = bi_outputs(&store, &bwd, &fwd, &reversed);
    let s = xs.len();
    for t in 0..s {
        let other = &swapped[s - 1 - t];
        assert_eq!(&forward[t][..h], &other[h..]);
        assert_eq!(&forward[t][h..], &other[..h]);
    }
}

#[test]
fn every_output_sees_every_image() {
    let (d, h) = (3, 2);
    let (store, fwd, bwd) = setup(d, h, 29);
    let xs = random_seq(30, 4, d);
    let base = bi_outputs(&store, &fwd, &bwd, &xs);
    for k in 0..xs.len() {
        let mut moved = xs.clone();
        moved[k][0] += 0.5;
        let out = bi_outputs(&store, &fwd, &bwd, &moved);
        for t in 0..xs.len() {
            let diff = out[t]
                .iter()
                .zip(&base[t])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-8, "output {t} ignores image {k}");
        }
    }
}

#[test]
fn empty_sequence_and_mismatched_dims() {
    let (store, fwd, bwd) = setup(3, 2, 31);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    assert!(matches!(
        encode_bidirectional(&mut tape, &bound, &fwd, &bwd, &[]),
        Err(Error::Contract(_))
    ));
    let a = tape.constant(Tensor::row(vec![0.0; 3]));
    let b = tape.constant(Tensor::row(vec![0.0; 4]));
    assert!(encode_bidirectional(&mut tape, &bound, &fwd, &bwd, &[a, b]).is_err());
}

#[test]
fn step_gradients_match_finite_differences() {
    let (d, h) = (3, 4);
    let mut store = ParamStore::new();
    let mut r = rng(32);
    let p = LstmParams::init(&mut store, "cell", d, h, &mut r);
    let inputs = [
        store.get(p.w_ih).clone(),
        store.get(p.w_hh).clone(),
        random_tensor(&mut r, &[4 * h], 1.0),
        random_tensor(&mut r, &[2, d], 2.0),
        random_tensor(&mut r, &[2, h], 1.0),
        random_tensor(&mut r, &[2, h], 1.0),
    ];
    let err = worst_fd_error(&inputs, 1e-6, |tape, v| {
        let mut local = ParamStore::new();
        let mut tr = rng(0);
        let params = LstmParams::init(&mut local, "cell", d, h, &mut tr);
        // route the tape leaves through a binding of the same layout
        let bound = glacnet_core::params::Bound::from_vars(vec![v[0], v[1], v[2]]);
        let state = LstmState { h: v[4], c: v[5] };
        let next = lstm_step(tape, &bound, &params, v[3], &state).unwrap();
        let a = weighted_sum(tape, next.h, 1);
        let b = weighted_sum(tape, next.c, 2);
        tape.add(a, b).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn step_rejects_bad_dimensions() {
    let mut store = ParamStore::new();
    let p = LstmParams::init(&mut store, "cell", 3, 2, &mut rng(33));
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let state = LstmState::zero(&mut tape, 1, 2);
    assert!(matches!(
        lstm_step(&mut tape, &bound, &p, x, &state),
        Err(Error::Shape { .. })
    ));
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let bad_state = LstmState::zero(&mut tape, 1, 3);
    assert!(lstm_step(&mut tape, &bound, &p, x, &bad_state).is_err());
}
