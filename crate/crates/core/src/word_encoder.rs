//! Word-level encoders producing one fixed-size vector per clause.
//!
//! The default path runs a masked bidirectional LSTM over each clause's
//! words and pools the hidden states with additive attention against a
//! learned context vector. The alternative path (Transformer word encoder)
//! runs one clause-encoder layer at word granularity and mean-pools the
//! live positions.

use crate::clause_encoder::{self, LayerDims};
use crate::embeddings::masked_mean_time;
use crate::lstm;
use crate::params::{Bind, ParameterStore};
use crate::tensor::{EmptyRowPolicy, Result, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

const INIT_SCALE: f64 = 0.1;

/// BiLSTM + attention parameters under `wenc.*` / `wattn.*`.
pub fn init_word_encoder(
    store: &mut ParameterStore,
    word_dim: usize,
    lstm_hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    lstm::init_bilstm(store, "wenc", word_dim, lstm_hidden, rng);
    let d = 2 * lstm_hidden;
    store.insert_uniform("wattn.w", vec![d, d], INIT_SCALE, rng);
    store.insert_zeros("wattn.b", vec![d]);
    store.insert_uniform("wattn.u", vec![d, 1], INIT_SCALE, rng);
}

/// Transformer word-encoder parameters under `wxf.*`.
pub fn init_word_transformer(
    store: &mut ParameterStore,
    word_dim: usize,
    dims: LayerDims,
    rng: &mut ChaCha8Rng,
) {
    clause_encoder::init_transformer_layer(store, "wxf", word_dim, dims, rng);
    // the prediction head registered for the layer is unused at word level
}

/// Per-word hidden states `[B, S, T, 2H]` from embeddings `[B, S, T, E]`.
pub fn bilstm_encode(
    tape: &mut Tape,
    bound: &impl Bind,
    embeds: TensorId,
    word_mask: &[f64],
    lstm_hidden: usize,
) -> Result<TensorId> {
    let shape = tape.shape(embeds).to_vec();
    let (b, s, t, e) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = tape.reshape(embeds, vec![b * s, t, e])?;
    let h = lstm::bilstm(tape, bound, "wenc", flat, word_mask, lstm_hidden)?;
    tape.reshape(h, vec![b, s, t, 2 * lstm_hidden])
}

/// Additive attention pooling:
/// `alpha = softmax(u · tanh(W h + b))` over live words, `r = Σ alpha h`.
/// Clauses with no live word give zero vectors.
pub fn word_attention(
    tape: &mut Tape,
    bound: &impl Bind,
    hidden: TensorId,
    word_mask: &[f64],
) -> Result<TensorId> {
    let shape = tape.shape(hidden).to_vec();
    let (b, s, t, d) = (shape[0], shape[1], shape[2], shape[3]);
    let u = {
        let p = tape.matmul(hidden, bound.id("wattn.w"))?;
        let p = tape.add_bias(p, bound.id("wattn.b"))?;
        tape.tanh(p)?
    };
    let scores = tape.matmul(u, bound.id("wattn.u"))?;
    let scores = tape.reshape(scores, vec![b * s, t])?;
    let alpha = tape.softmax(scores, Some(word_mask), EmptyRowPolicy::ZeroRow)?;
    let h_flat = tape.reshape(hidden, vec![b * s, t, d])?;
    let r = tape.weighted_sum_time(alpha, h_flat)?;
    tape.reshape(r, vec![b, s, d])
}

/// Full default word encoder: BiLSTM then attention pooling.
pub fn encode_clauses(
    tape: &mut Tape,
    bound: &impl Bind,
    embeds: TensorId,
    word_mask: &[f64],
    lstm_hidden: usize,
) -> Result<TensorId> {
    let h = bilstm_encode(tape, bound, embeds, word_mask, lstm_hidden)?;
    word_attention(tape, bound, h, word_mask)
}

/// One Transformer layer over the words of each clause, masked mean-pooled
/// to `[B, S, E]`.
pub fn transformer_word_encode(
    tape: &mut Tape,
    bound: &impl Bind,
    embeds: TensorId,
    word_mask: &[f64],
    dims: LayerDims,
    double_residual: bool,
) -> Result<TensorId> {
    let shape = tape.shape(embeds).to_vec();
    let (b, s, t, e) = (shape[0], shape[1], shape[2], shape[3]);
    let n = b * s;
    let flat = tape.reshape(embeds, vec![n, t, e])?;
    // Word-level attention mask; fully padded clauses stay all-zero and
    // their softmax rows resolve to zero under the ZeroRow policy.
    let mut attn_mask = vec![0.0; n * dims.heads * t * t];
    for row in 0..n {
        for h in 0..dims.heads {
            for i in 0..t {
                if word_mask[row * t + i] == 0.0 {
                    continue;
                }
                for j in 0..t {
                    attn_mask[((row * dims.heads + h) * t + i) * t + j] = word_mask[row * t + j];
                }
            }
        }
    }
    let out = clause_encoder::transformer_layer(
        tape,
        bound,
        "wxf",
        flat,
        flat,
        &attn_mask,
        dims,
        double_residual,
    )?;
    let pooled = masked_mean_time(tape, out.o, word_mask, (n, t))?;
    tape.reshape(pooled, vec![b, s, e])
}
