//! Masked bidirectional LSTM machinery, shared by the word-level encoder
//! and the stacked clause-level recurrent encoder.
//!
//! Standard cell: input/forget/output gates plus candidate, gate order
//! `i, f, g, o` inside the fused `[in, 4H]` / `[H, 4H]` weight matrices.
//! Masked steps emit zero states and carry the previous recurrent state
//! through unchanged, so padding never propagates.

use crate::params::{Bind, ParameterStore};
use crate::tensor::{Result, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

pub const INIT_SCALE: f64 = 0.1;

/// Register one direction's parameters: `{prefix}.w_x`, `{prefix}.w_h`,
/// `{prefix}.b`. The forget-gate bias block starts at +1.
pub fn init_lstm_direction(
    store: &mut ParameterStore,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert_uniform(&format!("{prefix}.w_x"), vec![input_dim, 4 * hidden], INIT_SCALE, rng);
    store.insert_uniform(&format!("{prefix}.w_h"), vec![hidden, 4 * hidden], INIT_SCALE, rng);
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    store.insert(&format!("{prefix}.b"), bias, vec![4 * hidden]);
}

pub fn init_bilstm(
    store: &mut ParameterStore,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    init_lstm_direction(store, &format!("{prefix}.fw"), input_dim, hidden, rng);
    init_lstm_direction(store, &format!("{prefix}.bw"), input_dim, hidden, rng);
}

/// Run one direction over `x [N, T, E]` with `mask [N, T]`.
/// Returns the per-step hidden states in time order, each `[N, H]`, zeroed
/// at masked steps.
pub fn lstm_direction(
    tape: &mut Tape,
    bound: &impl Bind,
    prefix: &str,
    x: TensorId,
    mask: &[f64],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<TensorId>> {
    let shape = tape.shape(x).to_vec();
    let (n, steps, e) = (shape[0], shape[1], shape[2]);
    let w_x = bound.id(&format!("{prefix}.w_x"));
    let w_h = bound.id(&format!("{prefix}.w_h"));
    let b = bound.id(&format!("{prefix}.b"));

    // Input contribution for all steps in one product.
    let flat = tape.reshape(x, vec![n * steps, e])?;
    let xw_flat = tape.matmul(flat, w_x)?;
    let xw = tape.reshape(xw_flat, vec![n, steps, 4 * hidden])?;

    let mut h = tape.constant(vec![0.0; n * hidden], vec![n, hidden])?;
    let mut c = tape.constant(vec![0.0; n * hidden], vec![n, hidden])?;
    let mut outputs = vec![None; steps];

    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let step_mask: Vec<f64> = (0..n * hidden)
            .map(|i| mask[(i / hidden) * steps + t])
            .collect();
        let keep_mask: Vec<f64> = step_mask.iter().map(|m| 1.0 - m).collect();

        let xw_t = tape.time_slice(xw, t)?;
        let hw = tape.matmul(h, w_h)?;
        let pre = tape.add(xw_t, hw)?;
        let gates = tape.add_bias(pre, b)?;

        let i_gate = {
            let s = tape.slice_cols(gates, 0, hidden)?;
            tape.sigmoid(s)?
        };
        let f_gate = {
            let s = tape.slice_cols(gates, hidden, hidden)?;
            tape.sigmoid(s)?
        };
        let g_cand = {
            let s = tape.slice_cols(gates, 2 * hidden, hidden)?;
            tape.tanh(s)?
        };
        let o_gate = {
            let s = tape.slice_cols(gates, 3 * hidden, hidden)?;
            tape.sigmoid(s)?
        };

        let fc = tape.mul(f_gate, c)?;
        let ig = tape.mul(i_gate, g_cand)?;
        let c_cand = tape.add(fc, ig)?;
        let c_tanh = tape.tanh(c_cand)?;
        let h_cand = tape.mul(o_gate, c_tanh)?;

        let c_live = tape.mul_const(c_cand, &step_mask)?;
        let c_keep = tape.mul_const(c, &keep_mask)?;
        c = tape.add(c_live, c_keep)?;
        let h_live = tape.mul_const(h_cand, &step_mask)?;
        let h_keep = tape.mul_const(h, &keep_mask)?;
        h = tape.add(h_live, h_keep)?;

        outputs[t] = Some(h_live);
    }
    Ok(outputs.into_iter().map(Option::unwrap).collect())
}

/// Bidirectional pass over `x [N, T, E]`: per-step forward and backward
/// states concatenated to `[N, T, 2H]`.
pub fn bilstm(
    tape: &mut Tape,
    bound: &impl Bind,
    prefix: &str,
    x: TensorId,
    mask: &[f64],
    hidden: usize,
) -> Result<TensorId> {
    let fw = lstm_direction(tape, bound, &format!("{prefix}.fw"), x, mask, hidden, false)?;
    let bw = lstm_direction(tape, bound, &format!("{prefix}.bw"), x, mask, hidden, true)?;
    let mut joined = Vec::with_capacity(fw.len());
    for (f, b) in fw.iter().zip(&bw) {
        joined.push(tape.concat_last(*f, *b)?);
    }
    tape.stack_time(&joined)
}
