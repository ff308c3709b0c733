//! Learned lookup tables and the global-prediction channel.
//!
//! Word embeddings and position tables are plain gather ops on the tape.
//! Relative positions index a `[2·max_clauses - 1, dim]` table through the
//! offset `rp + (max_clauses - 1)`; absolute positions index a
//! `[max_clauses, dim]` table directly.
//!
//! The global-prediction (GP) vector is built from *detached* hard labels,
//! so no gradient flows through the predictions that produced it; the
//! tanh-affine transform that embeds it still trains its own weights.

use crate::params::Bind;
use crate::tensor::{Result, Tape, TensorError, TensorId};

/// Table row for a relative position.
pub fn rpe_row(rp: i64, max_clauses: usize) -> Result<usize> {
    let offset = max_clauses as i64 - 1;
    let row = rp + offset;
    if row < 0 || row >= 2 * offset + 1 {
        return Err(TensorError::IndexOutOfRange {
            op: "lookup_rpe",
            index: rp.unsigned_abs() as usize,
            size: max_clauses,
        });
    }
    Ok(row as usize)
}

/// Gather word vectors for a `[B, S, T]` id grid into `[B, S, T, dim]`.
pub fn lookup_words(
    tape: &mut Tape,
    table: TensorId,
    token_ids: &[usize],
    dims: (usize, usize, usize),
) -> Result<TensorId> {
    let (b, s, t) = dims;
    tape.gather_rows(table, token_ids, &[b, s, t])
}

/// Gather relative-position vectors for a `[B, S]` grid into `[B, S, dim]`.
pub fn lookup_rpe(
    tape: &mut Tape,
    table: TensorId,
    rel_pos: &[i64],
    dims: (usize, usize),
    max_clauses: usize,
) -> Result<TensorId> {
    let rows: Result<Vec<usize>> = rel_pos.iter().map(|&rp| rpe_row(rp, max_clauses)).collect();
    tape.gather_rows(table, &rows?, &[dims.0, dims.1])
}

/// Gather absolute-position vectors (clause index) into `[B, S, dim]`.
pub fn lookup_ape(
    tape: &mut Tape,
    table: TensorId,
    dims: (usize, usize),
    max_clauses: usize,
) -> Result<TensorId> {
    let (b, s) = dims;
    if s > max_clauses {
        return Err(TensorError::IndexOutOfRange {
            op: "lookup_ape",
            index: s,
            size: max_clauses,
        });
    }
    let indices: Vec<usize> = (0..b * s).map(|i| i % s).collect();
    tape.gather_rows(table, &indices, &[b, s])
}

/// Build the `[B, S, 2W+1]` global-prediction grid from hard labels.
///
/// Slot `w` of clause `i` holds the predicted label of the clause sitting at
/// relative position `w - W`; the slot at clause `i`'s own relative position
/// is forced to 0, as are slots with no live clause.
pub fn build_gp(
    hard_labels: &[f64],
    clause_mask: &[f64],
    rel_pos: &[i64],
    dims: (usize, usize),
    window: usize,
) -> Vec<f64> {
    let (b, s) = dims;
    let width = 2 * window + 1;
    let mut gp = vec![0.0; b * s * width];
    for bi in 0..b {
        // relative position -> clause slot, live clauses only
        let mut by_rp = vec![None; width];
        for si in 0..s {
            let ix = bi * s + si;
            if clause_mask[ix] == 0.0 {
                continue;
            }
            let rp = rel_pos[ix];
            if rp.unsigned_abs() as usize <= window {
                by_rp[(rp + window as i64) as usize] = Some(si);
            }
        }
        for si in 0..s {
            let ix = bi * s + si;
            if clause_mask[ix] == 0.0 {
                continue;
            }
            for (w, slot) in by_rp.iter().enumerate() {
                if let Some(sj) = slot {
                    if *sj != si {
                        gp[ix * width + w] = hard_labels[bi * s + sj];
                    }
                }
            }
        }
    }
    gp
}

/// `tanh(GP @ W_gpe + b_gpe)`, GP entering as a constant.
pub fn gpe(
    tape: &mut Tape,
    bound: &impl Bind,
    gp: &[f64],
    dims: (usize, usize),
    window: usize,
) -> Result<TensorId> {
    let (b, s) = dims;
    let gp_id = tape.constant(gp.to_vec(), vec![b, s, 2 * window + 1])?;
    let lin = tape.matmul(gp_id, bound.id("gpe.w"))?;
    let aff = tape.add_bias(lin, bound.id("gpe.b"))?;
    tape.tanh(aff)
}

/// Masked mean over live positions of the last axis group; used by the
/// word-level Transformer pooling. `x` is `[N, T, D]`, `mask` is `[N, T]`;
/// rows with no live step give zero vectors.
pub fn masked_mean_time(
    tape: &mut Tape,
    x: TensorId,
    mask: &[f64],
    dims: (usize, usize),
) -> Result<TensorId> {
    let (n, t) = dims;
    let mut weights = vec![0.0; n * t];
    for i in 0..n {
        let live: f64 = mask[i * t..(i + 1) * t].iter().sum();
        if live > 0.0 {
            for j in 0..t {
                weights[i * t + j] = mask[i * t + j] / live;
            }
        }
    }
    let w = tape.constant(weights, vec![n, t])?;
    tape.weighted_sum_time(w, x)
}
