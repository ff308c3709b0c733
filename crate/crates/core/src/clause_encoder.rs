//! Stacked clause-level encoder.
//!
//! Each Transformer layer projects its (possibly concatenated) input down
//! to the model width, runs unscaled multi-head dot-product self-attention
//! over the clauses of each document, applies a position-wise FFN, and
//! normalizes after both sublayers' residual connections. Values are
//! computed from the previous layer's output (the word-encoder
//! representation at layer 1), not from the position-augmented input, so
//! position information only steers the attention pattern.
//!
//! A prediction sublayer closes every layer: a 2-way softmax whose hard
//! labels (+1 cause / -1 non-cause, ties to non-cause) feed the
//! global-prediction channel of the next layer with gradient stopped.
//! Layer inputs beyond the first concatenate the running mean of the
//! global-prediction embeddings produced so far.
//!
//! The recurrent alternative swaps every Transformer layer for a masked
//! bidirectional LSTM over the clause sequence under the same prediction
//! and chaining scheme.

use crate::embeddings;
use crate::lstm;
use crate::params::{Bind, ParameterStore};
use crate::tensor::{EmptyRowPolicy, Result, Tape, TensorError, TensorId};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-6;
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct LayerDims {
    /// Model width: value dimension, FFN output, layer-norm width.
    pub d_model: usize,
    pub qk_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClauseEncoderKind {
    Transformer,
    BiLstm,
}

/// Per-document clause layout of one batch.
#[derive(Debug, Clone, Copy)]
pub struct ClauseLayout<'a> {
    pub n_docs: usize,
    pub n_clauses: usize,
    pub clause_mask: &'a [f64],
    pub rel_pos: &'a [i64],
}

#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub n_layers: usize,
    pub dims: LayerDims,
    pub kind: ClauseEncoderKind,
    /// Global-prediction feedback between layers.
    pub gpe: bool,
    pub gpe_dim: usize,
    pub gp_window: usize,
    /// Residual + norm after both sublayers (default) or after the FFN only.
    pub double_residual: bool,
}

impl ChainSpec {
    fn layer_input_dim(&self, layer: usize, base_dim: usize) -> usize {
        if layer == 0 {
            base_dim
        } else if self.gpe {
            self.dims.d_model + self.gpe_dim
        } else {
            self.dims.d_model
        }
    }
}

pub fn init_transformer_layer(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    dims: LayerDims,
    rng: &mut ChaCha8Rng,
) {
    let d = dims.d_model;
    store.insert_uniform(&format!("{prefix}.p_in"), vec![d_in, d], INIT_SCALE, rng);
    store.insert_uniform(&format!("{prefix}.w_q"), vec![d, dims.qk_dim], INIT_SCALE, rng);
    store.insert_uniform(&format!("{prefix}.w_k"), vec![d, dims.qk_dim], INIT_SCALE, rng);
    store.insert_uniform(&format!("{prefix}.w_v"), vec![d, d], INIT_SCALE, rng);
    store.insert_uniform(&format!("{prefix}.ffn.w1"), vec![d, dims.ffn_dim], INIT_SCALE, rng);
    store.insert_zeros(&format!("{prefix}.ffn.b1"), vec![dims.ffn_dim]);
    store.insert_uniform(&format!("{prefix}.ffn.w2"), vec![dims.ffn_dim, d], INIT_SCALE, rng);
    store.insert_zeros(&format!("{prefix}.ffn.b2"), vec![d]);
    store.insert_full(&format!("{prefix}.ln1.g"), vec![d], 1.0);
    store.insert_zeros(&format!("{prefix}.ln1.b"), vec![d]);
    store.insert_full(&format!("{prefix}.ln2.g"), vec![d], 1.0);
    store.insert_zeros(&format!("{prefix}.ln2.b"), vec![d]);
    init_prediction_head(store, prefix, d, rng);
}

fn init_prediction_head(store: &mut ParameterStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    store.insert_uniform(&format!("{prefix}.pred.w"), vec![d, 2], INIT_SCALE, rng);
    store.insert_zeros(&format!("{prefix}.pred.b"), vec![2]);
}

pub fn init_clause_bilstm_layer(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) {
    assert!(d_model % 2 == 0, "clause BiLSTM needs an even model width");
    lstm::init_bilstm(store, prefix, d_in, d_model / 2, rng);
    init_prediction_head(store, prefix, d_model, rng);
}

/// Register every layer of the chain. `base_dim` is the width of the first
/// layer's input (clause representation plus any position channel).
pub fn init_chain(store: &mut ParameterStore, spec: &ChainSpec, base_dim: usize, rng: &mut ChaCha8Rng) {
    for l in 0..spec.n_layers {
        let d_in = spec.layer_input_dim(l, base_dim);
        let prefix = format!("clause{l}");
        match spec.kind {
            ClauseEncoderKind::Transformer => {
                init_transformer_layer(store, &prefix, d_in, spec.dims, rng)
            }
            ClauseEncoderKind::BiLstm => {
                init_clause_bilstm_layer(store, &prefix, d_in, spec.dims.d_model, rng)
            }
        }
    }
}

/// Attention mask `[B, H, S, S]` from the clause mask: an entry is live when
/// both its query and key clauses are real. Errors when a document has no
/// live clause at all.
pub fn attention_mask(
    clause_mask: &[f64],
    n_docs: usize,
    n_clauses: usize,
    heads: usize,
) -> Result<Vec<f64>> {
    let (b, s) = (n_docs, n_clauses);
    for bi in 0..b {
        if clause_mask[bi * s..(bi + 1) * s].iter().all(|&m| m == 0.0) {
            return Err(TensorError::Invalid {
                op: "multi_head_attention",
                msg: format!("document {bi} has no real clauses"),
            });
        }
    }
    let mut mask = vec![0.0; b * heads * s * s];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..s {
                if clause_mask[bi * s + i] == 0.0 {
                    continue;
                }
                for j in 0..s {
                    mask[((bi * heads + h) * s + i) * s + j] = clause_mask[bi * s + j];
                }
            }
        }
    }
    Ok(mask)
}

/// Unscaled multi-head attention: per-head `softmax(q·k)` over live keys,
/// then the weighted value mix, heads concatenated back to the value width.
/// Rows of fully padded queries come out zero.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    attn_mask: &[f64],
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let logits = tape.attn_scores(q, k, heads)?;
    let beta = tape.softmax(logits, Some(attn_mask), EmptyRowPolicy::ZeroRow)?;
    let z = tape.attn_combine(beta, v, heads)?;
    Ok((z, beta))
}

pub struct LayerOutput {
    pub o: TensorId,
    /// Attention weights `[B, H, S, S]`; absent for the recurrent encoder.
    pub beta: Option<TensorId>,
}

/// One Transformer clause layer over `x_cat [B, S, d_in]` with values drawn
/// from `v_src [B, S, d_model]`.
pub fn transformer_layer(
    tape: &mut Tape,
    bound: &impl Bind,
    prefix: &str,
    x_cat: TensorId,
    v_src: TensorId,
    attn_mask: &[f64],
    dims: LayerDims,
    double_residual: bool,
) -> Result<LayerOutput> {
    let x_proj = tape.matmul(x_cat, bound.id(&format!("{prefix}.p_in")))?;
    let q = {
        let p = tape.matmul(x_proj, bound.id(&format!("{prefix}.w_q")))?;
        tape.relu(p)?
    };
    let k = {
        let p = tape.matmul(x_proj, bound.id(&format!("{prefix}.w_k")))?;
        tape.relu(p)?
    };
    let v = {
        let p = tape.matmul(v_src, bound.id(&format!("{prefix}.w_v")))?;
        tape.relu(p)?
    };
    let (z, beta) = multi_head_attention(tape, q, k, v, attn_mask, dims.heads)?;

    let attn_out = if double_residual {
        let res = tape.add(z, x_proj)?;
        tape.layer_norm(
            res,
            bound.id(&format!("{prefix}.ln1.g")),
            bound.id(&format!("{prefix}.ln1.b")),
            LN_EPS,
        )?
    } else {
        z
    };

    let e = {
        let h = tape.matmul(attn_out, bound.id(&format!("{prefix}.ffn.w1")))?;
        let h = tape.add_bias(h, bound.id(&format!("{prefix}.ffn.b1")))?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, bound.id(&format!("{prefix}.ffn.w2")))?;
        tape.add_bias(h, bound.id(&format!("{prefix}.ffn.b2")))?
    };
    let residual = if double_residual { attn_out } else { x_proj };
    let res = tape.add(e, residual)?;
    let o = tape.layer_norm(
        res,
        bound.id(&format!("{prefix}.ln2.g")),
        bound.id(&format!("{prefix}.ln2.b")),
        LN_EPS,
    )?;
    Ok(LayerOutput { o, beta: Some(beta) })
}

/// One recurrent clause layer: masked BiLSTM over the clause sequence.
pub fn clause_bilstm_layer(
    tape: &mut Tape,
    bound: &impl Bind,
    prefix: &str,
    x_cat: TensorId,
    layout: ClauseLayout,
    d_model: usize,
) -> Result<LayerOutput> {
    let o = lstm::bilstm(tape, bound, prefix, x_cat, layout.clause_mask, d_model / 2)?;
    Ok(LayerOutput { o, beta: None })
}

#[derive(Debug, Clone)]
pub struct LayerPrediction {
    pub probs: TensorId,
    /// Detached copy of the `[B, S, 2]` distribution.
    pub probs_data: Vec<f64>,
    /// +1 cause / -1 non-cause per live clause, 0 at padding.
    pub hard: Vec<f64>,
}

/// Per-clause 2-way softmax head. Class 0 is non-cause, class 1 is cause;
/// equal probabilities resolve to non-cause.
pub fn layer_predict(
    tape: &mut Tape,
    bound: &impl Bind,
    prefix: &str,
    o: TensorId,
    layout: ClauseLayout,
) -> Result<LayerPrediction> {
    let logits = {
        let l = tape.matmul(o, bound.id(&format!("{prefix}.pred.w")))?;
        tape.add_bias(l, bound.id(&format!("{prefix}.pred.b")))?
    };
    let probs = tape.softmax(logits, None, EmptyRowPolicy::Error)?;
    let probs_data = tape.data(probs).to_vec();
    let (b, s) = (layout.n_docs, layout.n_clauses);
    let mut hard = vec![0.0; b * s];
    for i in 0..b * s {
        if layout.clause_mask[i] != 0.0 {
            hard[i] = if probs_data[2 * i + 1] > probs_data[2 * i] {
                1.0
            } else {
                -1.0
            };
        }
    }
    Ok(LayerPrediction { probs, probs_data, hard })
}

/// Everything one layer leaves behind.
pub struct LayerState {
    pub o: TensorId,
    pub probs: TensorId,
    pub probs_data: Vec<f64>,
    pub hard: Vec<f64>,
    pub beta_data: Option<Vec<f64>>,
}

pub struct ChainResult {
    pub layers: Vec<LayerState>,
}

impl ChainResult {
    pub fn final_layer(&self) -> &LayerState {
        self.layers.last().expect("chain has at least one layer")
    }
}

/// Running mean of the accumulated tensors.
fn mean_tensors(tape: &mut Tape, parts: &[TensorId]) -> Result<TensorId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

/// Drive the full stack. Layer 1 consumes `r ⊕ pos`; afterwards each layer
/// consumes the previous output, concatenated with the mean
/// global-prediction embedding when that channel is on. `gp_override`
/// replaces the argmax labels layer by layer (used by gradient checking to
/// freeze the non-differentiable path).
#[allow(clippy::too_many_arguments)]
pub fn chain_layers(
    tape: &mut Tape,
    bound: &impl Bind,
    spec: &ChainSpec,
    r: TensorId,
    pos: Option<TensorId>,
    layout: ClauseLayout,
    gp_override: Option<&[Vec<f64>]>,
) -> Result<ChainResult> {
    let attn_mask = match spec.kind {
        ClauseEncoderKind::Transformer => Some(attention_mask(
            layout.clause_mask,
            layout.n_docs,
            layout.n_clauses,
            spec.dims.heads,
        )?),
        ClauseEncoderKind::BiLstm => None,
    };

    let mut x_cat = match pos {
        Some(p) => tape.concat_last(r, p)?,
        None => r,
    };
    let mut v_src = r;
    let mut gpe_history: Vec<TensorId> = Vec::new();
    let mut layers = Vec::with_capacity(spec.n_layers);

    for l in 0..spec.n_layers {
        let prefix = format!("clause{l}");
        let out = match spec.kind {
            ClauseEncoderKind::Transformer => transformer_layer(
                tape,
                bound,
                &prefix,
                x_cat,
                v_src,
                attn_mask.as_ref().unwrap(),
                spec.dims,
                spec.double_residual,
            )?,
            ClauseEncoderKind::BiLstm => {
                clause_bilstm_layer(tape, bound, &prefix, x_cat, layout, spec.dims.d_model)?
            }
        };
        let pred = layer_predict(tape, bound, &prefix, out.o, layout)?;
        let beta_data = out.beta.map(|b| tape.data(b).to_vec());
        layers.push(LayerState {
            o: out.o,
            probs: pred.probs,
            probs_data: pred.probs_data,
            hard: pred.hard.clone(),
            beta_data,
        });

        if l + 1 < spec.n_layers {
            if spec.gpe {
                let hard = match gp_override {
                    Some(labels) => &labels[l],
                    None => &pred.hard,
                };
                let gp = embeddings::build_gp(
                    hard,
                    layout.clause_mask,
                    layout.rel_pos,
                    (layout.n_docs, layout.n_clauses),
                    spec.gp_window,
                );
                let g = embeddings::gpe(
                    tape,
                    bound,
                    &gp,
                    (layout.n_docs, layout.n_clauses),
                    spec.gp_window,
                )?;
                gpe_history.push(g);
                let ave = mean_tensors(tape, &gpe_history)?;
                x_cat = tape.concat_last(out.o, ave)?;
            } else {
                x_cat = out.o;
            }
            v_src = out.o;
        }
    }
    Ok(ChainResult { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SliceBind;

    fn full_mask(b: usize, s: usize, h: usize) -> Vec<f64> {
        attention_mask(&vec![1.0; b * s], b, s, h).unwrap()
    }

    #[test]
    fn qkv_projection_zero_input_and_hand_matmul() {
        let mut tape = Tape::new();
        let w = tape
            .leaf(vec![0.5, -1.0, 2.0, 0.25], vec![2, 2], false)
            .unwrap();
        let zero = tape.constant(vec![0.0; 2], vec![1, 1, 2]).unwrap();
        let p = tape.matmul(zero, w).unwrap();
        let q = tape.relu(p).unwrap();
        assert_eq!(tape.data(q), &[0.0, 0.0]);

        // hand case: [1, 2] @ W = [1*0.5 + 2*2, 1*(-1) + 2*0.25] = [4.5, -0.5]
        let x = tape.constant(vec![1.0, 2.0], vec![1, 1, 2]).unwrap();
        let p = tape.matmul(x, w).unwrap();
        let q = tape.relu(p).unwrap();
        assert_eq!(tape.data(q), &[4.5, 0.0]);
        assert!(tape.data(q).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn attention_single_clause_passes_value_through() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.7, 0.1], vec![1, 1, 2]).unwrap();
        let k = tape.constant(vec![-0.3, 0.9], vec![1, 1, 2]).unwrap();
        let v = tape.constant(vec![5.0, -3.0], vec![1, 1, 2]).unwrap();
        let mask = full_mask(1, 1, 2);
        let (z, beta) = multi_head_attention(&mut tape, q, k, v, &mask, 2).unwrap();
        assert_eq!(tape.data(beta), &[1.0, 1.0]);
        assert_eq!(tape.data(z), &[5.0, -3.0]);
    }

    #[test]
    fn attention_identical_keys_split_evenly() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![1.0, 2.0, -1.0, 0.5], vec![1, 2, 2]).unwrap();
        let k = tape.constant(vec![0.4, -0.6, 0.4, -0.6], vec![1, 2, 2]).unwrap();
        let v = tape.constant(vec![2.0, 4.0, 6.0, 8.0], vec![1, 2, 2]).unwrap();
        let mask = full_mask(1, 2, 1);
        let (z, beta) = multi_head_attention(&mut tape, q, k, v, &mask, 1).unwrap();
        assert_eq!(tape.data(beta), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(tape.data(z), &[4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn attention_hand_logits_give_powers_of_two_weights() {
        // q = 1 against keys [0, ln2, ln4] gives weights [1/7, 2/7, 4/7].
        let mut tape = Tape::new();
        let q = tape.constant(vec![1.0; 3], vec![1, 3, 1]).unwrap();
        let k = tape
            .constant(vec![0.0, 2.0_f64.ln(), 4.0_f64.ln()], vec![1, 3, 1])
            .unwrap();
        let v = tape
            .constant(vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0], vec![1, 3, 2])
            .unwrap();
        let mask = full_mask(1, 3, 1);
        let (z, beta) = multi_head_attention(&mut tape, q, k, v, &mask, 1).unwrap();
        let row = &tape.data(beta)[..3];
        for (got, want) in row.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        // z = 1/7*[1,0] + 2/7*[0,1] + 4/7*[2,2]
        let z0 = tape.data(z);
        assert!((z0[0] - 9.0 / 7.0).abs() < 1e-12);
        assert!((z0[1] - 10.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_empty_documents() {
        let err = attention_mask(&[1.0, 1.0, 0.0, 0.0], 2, 2, 1).unwrap_err();
        assert!(err.to_string().contains("no real clauses"));
    }

    #[test]
    fn transformer_layer_zero_everything_is_zero() {
        // All weights and inputs zero, gains 1: attention of zeros is zero
        // (softmax mixes zero values), FFN of zeros is zero, norms of zero
        // rows are zero.
        let names: Vec<(String, Vec<f64>, Vec<usize>)> = vec![
            ("t.p_in".into(), vec![0.0; 4], vec![2, 2]),
            ("t.w_q".into(), vec![0.0; 4], vec![2, 2]),
            ("t.w_k".into(), vec![0.0; 4], vec![2, 2]),
            ("t.w_v".into(), vec![0.0; 4], vec![2, 2]),
            ("t.ffn.w1".into(), vec![0.0; 4], vec![2, 2]),
            ("t.ffn.b1".into(), vec![0.0; 2], vec![2]),
            ("t.ffn.w2".into(), vec![0.0; 4], vec![2, 2]),
            ("t.ffn.b2".into(), vec![0.0; 2], vec![2]),
            ("t.ln1.g".into(), vec![1.0; 2], vec![2]),
            ("t.ln1.b".into(), vec![0.0; 2], vec![2]),
            ("t.ln2.g".into(), vec![1.0; 2], vec![2]),
            ("t.ln2.b".into(), vec![0.0; 2], vec![2]),
        ];
        let mut tape = Tape::new();
        let ids: Vec<(&str, TensorId)> = names
            .iter()
            .map(|(n, d, s)| {
                (
                    n.as_str(),
                    tape.leaf(d.clone(), s.clone(), false).unwrap(),
                )
            })
            .collect();
        let bind = SliceBind { ids: &ids };
        let x = tape.constant(vec![0.0; 4], vec![1, 2, 2]).unwrap();
        let v = tape.constant(vec![0.0; 4], vec![1, 2, 2]).unwrap();
        let mask = full_mask(1, 2, 2);
        let out = transformer_layer(
            &mut tape,
            &bind,
            "t",
            x,
            v,
            &mask,
            LayerDims { d_model: 2, qk_dim: 2, heads: 2, ffn_dim: 2 },
            true,
        )
        .unwrap();
        assert_eq!(tape.data(out.o), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ffn_residual_norm_matches_hand_trace() {
        // d = 2, ffn = 2, one clause. Hand-computed forward:
        //   x_proj = x @ P_in, q/k arbitrary (single clause, beta = 1)
        //   v = relu(v_src @ W_v), a = LN(z + x_proj),
        //   e = relu(a@W1 + b1)@W2 + b2, o = LN(e + a).
        let p_in = [1.0, 0.0, 0.0, 1.0];
        let w_v: [f64; 4] = [0.5, 0.25, -0.5, 1.0];
        let w1 = [1.0, -1.0, 0.5, 0.5];
        let b1 = [0.1, -0.1];
        let w2 = [2.0, 0.0, 1.0, 1.0];
        let b2 = [0.0, 0.3];
        let x = [0.6, -0.2];
        let vs = [1.0, 2.0];

        let hand = {
            let xp = [x[0], x[1]]; // identity projection
            let v = [
                (vs[0] * w_v[0] + vs[1] * w_v[2]).max(0.0),
                (vs[0] * w_v[1] + vs[1] * w_v[3]).max(0.0),
            ];
            let z = v; // single clause: beta = 1
            let pre = [z[0] + xp[0], z[1] + xp[1]];
            let ln = |row: [f64; 2]| {
                let mean = (row[0] + row[1]) / 2.0;
                let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2)) / 2.0;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                [(row[0] - mean) * inv, (row[1] - mean) * inv]
            };
            let a = ln(pre);
            let h = [
                (a[0] * w1[0] + a[1] * w1[2] + b1[0]).max(0.0),
                (a[0] * w1[1] + a[1] * w1[3] + b1[1]).max(0.0),
            ];
            let e = [
                h[0] * w2[0] + h[1] * w2[2] + b2[0],
                h[0] * w2[1] + h[1] * w2[3] + b2[1],
            ];
            ln([e[0] + a[0], e[1] + a[1]])
        };

        let names: Vec<(String, Vec<f64>, Vec<usize>)> = vec![
            ("t.p_in".into(), p_in.to_vec(), vec![2, 2]),
            ("t.w_q".into(), vec![0.3, 0.1, 0.2, 0.4], vec![2, 2]),
            ("t.w_k".into(), vec![0.1, 0.2, 0.3, 0.4], vec![2, 2]),
            ("t.w_v".into(), w_v.to_vec(), vec![2, 2]),
            ("t.ffn.w1".into(), w1.to_vec(), vec![2, 2]),
            ("t.ffn.b1".into(), b1.to_vec(), vec![2]),
            ("t.ffn.w2".into(), w2.to_vec(), vec![2, 2]),
            ("t.ffn.b2".into(), b2.to_vec(), vec![2]),
            ("t.ln1.g".into(), vec![1.0; 2], vec![2]),
            ("t.ln1.b".into(), vec![0.0; 2], vec![2]),
            ("t.ln2.g".into(), vec![1.0; 2], vec![2]),
            ("t.ln2.b".into(), vec![0.0; 2], vec![2]),
        ];
        let mut tape = Tape::new();
        let ids: Vec<(&str, TensorId)> = names
            .iter()
            .map(|(n, d, s)| (n.as_str(), tape.leaf(d.clone(), s.clone(), false).unwrap()))
            .collect();
        let bind = SliceBind { ids: &ids };
        let xt = tape.constant(x.to_vec(), vec![1, 1, 2]).unwrap();
        let vt = tape.constant(vs.to_vec(), vec![1, 1, 2]).unwrap();
        let mask = full_mask(1, 1, 1);
        let out = transformer_layer(
            &mut tape,
            &bind,
            "t",
            xt,
            vt,
            &mask,
            LayerDims { d_model: 2, qk_dim: 2, heads: 1, ffn_dim: 2 },
            true,
        )
        .unwrap();
        for (got, want) in tape.data(out.o).iter().zip(hand) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn layer_predict_argmax_and_tie_break() {
        let names = [
            ("t.pred.w", (vec![1.0, 0.0, 0.0, 1.0], vec![2usize, 2usize])),
            ("t.pred.b", (vec![0.0, 0.0], vec![2usize])),
        ];
        let mut tape = Tape::new();
        let ids: Vec<(&str, TensorId)> = names
            .iter()
            .map(|(n, (d, s))| (*n, tape.leaf(d.clone(), s.clone(), false).unwrap()))
            .collect();
        let bind = SliceBind { ids: &ids };
        // logits come out as the o values directly (identity head):
        // clause 0: [3, -3] (non-cause wins), clause 1: [1, 1] (tie).
        let o = tape
            .constant(vec![3.0, -3.0, 1.0, 1.0], vec![1, 2, 2])
            .unwrap();
        let mask = [1.0, 1.0];
        let rel = [0, 1];
        let layout = ClauseLayout {
            n_docs: 1,
            n_clauses: 2,
            clause_mask: &mask,
            rel_pos: &rel,
        };
        let pred = layer_predict(&mut tape, &bind, "t", o, layout).unwrap();
        assert_eq!(pred.hard, vec![-1.0, -1.0]);
        for row in pred.probs_data.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_tensors_is_arithmetic_mean() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 3.0], vec![2]).unwrap();
        let b = tape.constant(vec![5.0, -1.0], vec![2]).unwrap();
        let m = mean_tensors(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.data(m), &[3.0, 1.0]);
        let single = mean_tensors(&mut tape, &[a]).unwrap();
        assert_eq!(tape.data(single), &[1.0, 3.0]);
    }
}
