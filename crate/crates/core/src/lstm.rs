//! LSTM cell and the bi-directional image-sequence encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of one LSTM layer. Gate rows are ordered input, forget,
/// cell candidate, output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmParams {
    /// `4h × d`
    pub w_ih: ParamId,
    /// `4h × h`
    pub w_hh: ParamId,
    /// `4h`
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    /// Registers `{prefix}.w_ih`, `{prefix}.w_hh` and `{prefix}.bias`.
    ///
    /// Weights are uniform in `[-1/√h, 1/√h]`; biases are zero except the
    /// forget gate, which starts at 1.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(hidden_size as f64);
        let gates = 4 * hidden_size;
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            uniform(rng, &[gates, input_size], bound),
        );
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            uniform(rng, &[gates, hidden_size], bound),
        );
        let mut b = Tensor::zeros(&[gates]);
        b.data_mut()[hidden_size..2 * hidden_size]
            .iter_mut()
            .for_each(|x| *x = 1.0);
        let bias = store.add(format!("{prefix}.bias"), b);
        LstmParams {
            w_ih,
            w_hh,
            bias,
            input_size,
            hidden_size,
        }
    }
}

/// Hidden and cell vectors of a batch of LSTM rows (`batch × h` each).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zero(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[batch, hidden]));
        let c = tape.constant(Tensor::zeros(&[batch, hidden]));
        LstmState { h, c }
    }
}

/// One LSTM recurrence on `x: batch × d`.
pub fn lstm_step(
    tape: &mut Tape,
    bound: &Bound,
    params: &LstmParams,
    x: Var,
    state: &LstmState,
) -> Result<LstmState> {
    let hs = params.hidden_size;
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != params.input_size {
        return Err(Error::shape("lstm_step", xs, &[params.input_size]));
    }
    let batch = xs[0];
    for v in [state.h, state.c] {
        if tape.shape(v) != [batch, hs] {
            return Err(Error::shape("lstm_step", tape.shape(v), &[batch, hs]));
        }
    }
    let from_input = tape.matmul_t(x, bound.var(params.w_ih))?;
    let from_hidden = tape.matmul_t(state.h, bound.var(params.w_hh))?;
    let pre = tape.add(from_input, from_hidden)?;
    let gates = tape.add_row(pre, bound.var(params.bias))?;

    let i_pre = tape.slice_cols(gates, 0, hs)?;
    let f_pre = tape.slice_cols(gates, hs, hs)?;
    let g_pre = tape.slice_cols(gates, 2 * hs, hs)?;
    let o_pre = tape.slice_cols(gates, 3 * hs, hs)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(LstmState { h, c })
}

/// Runs `fwd` over the sequence and `bwd` over its reverse, both from zero
/// state. Output `t` is `[forward hidden after t ; backward hidden after
/// consuming positions S-1 down to t]`, shape `batch × 2h`.
pub fn encode_bidirectional(
    tape: &mut Tape,
    bound: &Bound,
    fwd: &LstmParams,
    bwd: &LstmParams,
    features: &[Var],
) -> Result<Vec<Var>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("bi-directional encoder needs at least one image".into()))?;
    let batch = tape.shape(*first)[0];
    if features.iter().any(|&f| tape.shape(f) != tape.shape(*first)) {
        return Err(Error::Contract(
            "all feature vectors in a sequence must share one dimension".into(),
        ));
    }

    let mut state = LstmState::zero(tape, batch, fwd.hidden_size);
    let mut forward = Vec::with_capacity(features.len());
    for &x in features {
        state = lstm_step(tape, bound, fwd, x, &state)?;
        forward.push(state.h);
    }

    let mut state = LstmState::zero(tape, batch, bwd.hidden_size);
    let mut backward = alloc::vec![state.h; features.len()];
    for (t, &x) in features.iter().enumerate().rev() {
        state = lstm_step(tape, bound, bwd, x, &state)?;
        backward[t] = state.h;
    }

    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| tape.concat(&[f, b], 1))
        .collect()
}
