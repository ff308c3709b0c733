//! Model assembly: configuration, variants, parameter construction, the
//! full forward pass, and the training loss.
//!
//! Six variants share one contract:
//! - `RTHN`: BiLSTM word encoder, Transformer clause encoder, relative
//!   position concatenated at layer 1, global-prediction feedback after
//!   every layer.
//! - `NoGPE`: global-prediction feedback removed; layer l+1 consumes
//!   o^(l) alone.
//! - `NoRPE`: no position channel at layer 1.
//! - `APE`: absolute clause index embedding replaces the relative one.
//! - `RRHN`: stacked bidirectional LSTM clause encoder, same channels.
//! - `TTHN`: Transformer word encoder (one layer, mean-pooled), rest as
//!   RTHN.

use std::fmt;
use std::str::FromStr;

use crate::clause_encoder::{self, ChainSpec, ClauseEncoderKind, ClauseLayout, LayerDims};
use crate::data::{Batch, Vocabulary, PAD_ID};
use crate::embeddings;
use crate::params::{Bind, BoundParams, ParameterStore};
use crate::tensor::{EmptyRowPolicy, Tape, TensorError, TensorId};
use crate::word_encoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "RTHN")]
    Rthn,
    #[serde(rename = "NoGPE")]
    NoGpe,
    #[serde(rename = "NoRPE")]
    NoRpe,
    #[serde(rename = "APE")]
    Ape,
    #[serde(rename = "RRHN")]
    Rrhn,
    #[serde(rename = "TTHN")]
    Tthn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Rthn,
        Variant::NoGpe,
        Variant::NoRpe,
        Variant::Ape,
        Variant::Rrhn,
        Variant::Tthn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Rthn => "RTHN",
            Variant::NoGpe => "NoGPE",
            Variant::NoRpe => "NoRPE",
            Variant::Ape => "APE",
            Variant::Rrhn => "RRHN",
            Variant::Tthn => "TTHN",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RTHN" => Ok(Variant::Rthn),
            "NOGPE" | "NO-GPE" | "RTHN-NO-GPE" => Ok(Variant::NoGpe),
            "NORPE" | "NO-RPE" | "RTHN-NO-RPE" => Ok(Variant::NoRpe),
            "APE" | "RTHN-APE" => Ok(Variant::Ape),
            "RRHN" => Ok(Variant::Rrhn),
            "TTHN" => Ok(Variant::Tthn),
            other => Err(format!(
                "unknown variant {other}; expected RTHN, NoGPE, NoRPE, APE, RRHN, or TTHN"
            )),
        }
    }
}

/// Flat hyperparameter set; serde defaults mirror the reference protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub word_dim: usize,
    pub rpe_dim: usize,
    pub gpe_dim: usize,
    pub lstm_hidden: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_words: usize,
    pub max_clauses: usize,
    pub gp_window: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub aux_loss_weight: f64,
    pub grad_clip: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub double_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Rthn,
            n_layers: 3,
            word_dim: 200,
            rpe_dim: 50,
            gpe_dim: 50,
            lstm_hidden: 100,
            qk_dim: 250,
            v_dim: 200,
            heads: 5,
            ffn_dim: 800,
            max_words: 75,
            max_clauses: 45,
            gp_window: 10,
            learning_rate: 0.005,
            batch_size: 32,
            l2_lambda: 1e-5,
            aux_loss_weight: 1.0,
            grad_clip: 5.0,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            double_residual: true,
        }
    }
}

impl ModelConfig {
    /// Reference-protocol defaults shrunk for desk-scale runs.
    pub fn small(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            word_dim: 32,
            rpe_dim: 16,
            gpe_dim: 16,
            lstm_hidden: 16,
            qk_dim: 40,
            v_dim: 32,
            heads: 2,
            ffn_dim: 64,
            gp_window: 5,
            max_clauses: 16,
            max_words: 16,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("word_dim", self.word_dim),
            ("gpe_dim", self.gpe_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("qk_dim", self.qk_dim),
            ("v_dim", self.v_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_words", self.max_words),
            ("max_clauses", self.max_clauses),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.variant != Variant::NoRpe && self.rpe_dim == 0 {
            return bad("rpe_dim must be positive".into());
        }
        if self.qk_dim % self.heads != 0 || self.v_dim % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide qk_dim ({}) and v_dim ({})",
                self.heads, self.qk_dim, self.v_dim
            ));
        }
        if self.v_dim != 2 * self.lstm_hidden {
            return bad(format!(
                "v_dim ({}) must equal 2 * lstm_hidden ({}): the clause encoder \
                 consumes the word encoder's output width",
                self.v_dim, self.lstm_hidden
            ));
        }
        if self.variant == Variant::Tthn && self.word_dim != self.v_dim {
            return bad(format!(
                "TTHN needs word_dim ({}) == v_dim ({}): the word-level Transformer \
                 pools to the embedding width",
                self.word_dim, self.v_dim
            ));
        }
        if self.variant == Variant::Rrhn && self.v_dim % 2 != 0 {
            return bad("RRHN needs an even v_dim".into());
        }
        if self.l2_lambda < 0.0 || self.aux_loss_weight < 0.0 {
            return bad("l2_lambda and aux_loss_weight must be non-negative".into());
        }
        if self.n_layers > 5 {
            log::warn!(
                "n_layers = {} exceeds the evaluated range (1-5); proceeding anyway",
                self.n_layers
            );
        }
        Ok(())
    }

    fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.v_dim,
            qk_dim: self.qk_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }

    fn chain_spec(&self) -> ChainSpec {
        ChainSpec {
            n_layers: self.n_layers,
            dims: self.layer_dims(),
            kind: match self.variant {
                Variant::Rrhn => ClauseEncoderKind::BiLstm,
                _ => ClauseEncoderKind::Transformer,
            },
            gpe: self.variant != Variant::NoGpe,
            gpe_dim: self.gpe_dim,
            gp_window: self.gp_window,
            double_residual: self.double_residual,
        }
    }

    fn position_dim(&self) -> usize {
        match self.variant {
            Variant::NoRpe => 0,
            _ => self.rpe_dim,
        }
    }
}

/// A configured variant with its vocabulary and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
}

pub struct ModelOutput {
    /// Final distribution `[B, S, 2]` on the tape.
    pub probs: TensorId,
    /// Detached copy of the final distribution.
    pub probs_data: Vec<f64>,
    /// Per-layer distributions (last entry is the final one).
    pub layer_probs: Vec<TensorId>,
    /// Per-layer hard labels (+1/-1 live, 0 padded).
    pub layer_hard: Vec<Vec<f64>>,
    /// Per-layer attention stacks `[B, H, S, S]`; `None` for recurrent
    /// clause layers.
    pub betas: Vec<Option<Vec<f64>>>,
    pub n_docs: usize,
    pub n_clauses: usize,
}

impl Model {
    /// Fresh parameters from the config seed; `embedding` is the initial
    /// word-embedding matrix from vocabulary construction.
    pub fn new(config: ModelConfig, vocab: Vocabulary, embedding: Vec<f64>) -> Result<Model> {
        config.validate()?;
        assert_eq!(
            embedding.len(),
            vocab.len() * config.word_dim,
            "embedding matrix does not match vocabulary"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x1817));
        let mut params = ParameterStore::new();

        params.insert("word_emb", embedding, vec![vocab.len(), config.word_dim]);
        params.set_frozen_rows("word_emb", PAD_ID + 1);

        match config.variant {
            Variant::NoRpe => {}
            Variant::Ape => {
                params.insert_uniform(
                    "ape",
                    vec![config.max_clauses, config.rpe_dim],
                    0.1,
                    &mut rng,
                );
            }
            _ => {
                params.insert_uniform(
                    "rpe",
                    vec![2 * config.max_clauses - 1, config.rpe_dim],
                    0.1,
                    &mut rng,
                );
            }
        }
        if config.variant != Variant::NoGpe {
            params.insert_uniform(
                "gpe.w",
                vec![2 * config.gp_window + 1, config.gpe_dim],
                0.1,
                &mut rng,
            );
            params.insert_zeros("gpe.b", vec![config.gpe_dim]);
        }

        match config.variant {
            Variant::Tthn => {
                word_encoder::init_word_transformer(
                    &mut params,
                    config.word_dim,
                    config.layer_dims(),
                    &mut rng,
                );
            }
            _ => {
                word_encoder::init_word_encoder(
                    &mut params,
                    config.word_dim,
                    config.lstm_hidden,
                    &mut rng,
                );
            }
        }

        let base_dim = config.v_dim + config.position_dim();
        clause_encoder::init_chain(&mut params, &config.chain_spec(), base_dim, &mut rng);

        Ok(Model { config, vocab, params })
    }

    /// Run the variant end to end on one batch. `gp_override` substitutes
    /// frozen hard labels for the global-prediction channel (one `[B*S]`
    /// buffer per layer), which gradient checking needs to keep the
    /// objective smooth.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        gp_override: Option<&[Vec<f64>]>,
    ) -> Result<(ModelOutput, BoundParams)> {
        let bound = BoundParams::bind(&self.params, tape)?;
        let out = self.forward_bound(tape, &bound, batch, gp_override)?;
        Ok((out, bound))
    }

    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &Batch,
        gp_override: Option<&[Vec<f64>]>,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let (b, s, t) = (batch.n_docs, batch.n_clauses, batch.n_words);
        if s > cfg.max_clauses {
            return Err(ModelError::Config(format!(
                "batch has {s} clause slots but max_clauses is {}",
                cfg.max_clauses
            )));
        }

        let embeds = embeddings::lookup_words(tape, bound.id("word_emb"), &batch.token_ids, (b, s, t))?;

        let r = match cfg.variant {
            Variant::Tthn => word_encoder::transformer_word_encode(
                tape,
                bound,
                embeds,
                &batch.word_mask,
                cfg.layer_dims(),
                cfg.double_residual,
            )?,
            _ => word_encoder::encode_clauses(tape, bound, embeds, &batch.word_mask, cfg.lstm_hidden)?,
        };

        let pos = match cfg.variant {
            Variant::NoRpe => None,
            Variant::Ape => Some(embeddings::lookup_ape(
                tape,
                bound.id("ape"),
                (b, s),
                cfg.max_clauses,
            )?),
            _ => Some(embeddings::lookup_rpe(
                tape,
                bound.id("rpe"),
                &batch.rel_pos,
                (b, s),
                cfg.max_clauses,
            )?),
        };

        let layout = ClauseLayout {
            n_docs: b,
            n_clauses: s,
            clause_mask: &batch.clause_mask,
            rel_pos: &batch.rel_pos,
        };
        let chain = clause_encoder::chain_layers(
            tape,
            bound,
            &cfg.chain_spec(),
            r,
            pos,
            layout,
            gp_override,
        )?;

        let final_state = chain.final_layer();
        Ok(ModelOutput {
            probs: final_state.probs,
            probs_data: final_state.probs_data.clone(),
            layer_probs: chain.layers.iter().map(|l| l.probs).collect(),
            layer_hard: chain.layers.iter().map(|l| l.hard.clone()).collect(),
            betas: chain.layers.iter().map(|l| l.beta_data.clone()).collect(),
            n_docs: b,
            n_clauses: s,
        })
    }

    /// Masked cross-entropy over live clauses plus L2 over every parameter
    /// and the auxiliary mean of the earlier layers' cross-entropies.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        output: &ModelOutput,
        batch: &Batch,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let mut total = masked_cross_entropy(tape, output.probs, batch)?;

        let n = output.layer_probs.len();
        if cfg.aux_loss_weight > 0.0 && n > 1 {
            let mut aux: Option<TensorId> = None;
            for &probs in &output.layer_probs[..n - 1] {
                let ce = masked_cross_entropy(tape, probs, batch)?;
                aux = Some(match aux {
                    Some(a) => tape.add(a, ce)?,
                    None => ce,
                });
            }
            let mean = tape.scale(aux.unwrap(), 1.0 / (n - 1) as f64)?;
            let weighted = tape.scale(mean, cfg.aux_loss_weight)?;
            total = tape.add(total, weighted)?;
        }

        if cfg.l2_lambda > 0.0 {
            let l2 = l2_penalty(tape, bound)?;
            let weighted = tape.scale(l2, cfg.l2_lambda)?;
            total = tape.add(total, weighted)?;
        }
        Ok(total)
    }

    /// JSON checkpoint header: config and vocabulary.
    pub fn header_json(&self) -> String {
        serde_json::json!({
            "config": self.config,
            "vocab": { "tokens": self.vocab.tokens, "dim": self.vocab.dim },
        })
        .to_string()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        self.params.to_bytes(&self.header_json())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Model, String> {
        let (header, params) =
            ParameterStore::load(&mut &bytes[..]).map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&header).map_err(|e| e.to_string())?;
        let config: ModelConfig =
            serde_json::from_value(v["config"].clone()).map_err(|e| e.to_string())?;
        let mut vocab: Vocabulary =
            serde_json::from_value(v["vocab"].clone()).map_err(|e| e.to_string())?;
        vocab.reindex();
        Ok(Model { config, vocab, params })
    }
}

/// `-Σ mask · y · ln(p)` over all clauses of the batch (sum, not mean).
fn masked_cross_entropy(tape: &mut Tape, probs: TensorId, batch: &Batch) -> Result<TensorId> {
    let (b, s) = (batch.n_docs, batch.n_clauses);
    let mut selector = vec![0.0; b * s * 2];
    for i in 0..b * s {
        if batch.clause_mask[i] != 0.0 {
            selector[2 * i + batch.labels[i] as usize] = 1.0;
        }
    }
    let logp = tape.ln(probs)?;
    let picked = tape.mul_const(logp, &selector)?;
    let sum = tape.sum_all(picked)?;
    Ok(tape.scale(sum, -1.0)?)
}

/// `Σ_θ Σ θ²` across every bound parameter.
fn l2_penalty(tape: &mut Tape, bound: &BoundParams) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    let ids: Vec<TensorId> = bound.iter().map(|(_, id)| id).collect();
    for id in ids {
        let sq = tape.mul(id, id)?;
        let sum = tape.sum_all(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sum)?,
            None => sum,
        });
    }
    Ok(acc.expect("parameter store is never empty"))
}

/// Distribution over {non-cause, cause} for each live clause, plus argmax
/// with ties resolved to non-cause. Shared by evaluation and inspection.
pub fn hard_predictions(probs_data: &[f64], clause_mask: &[f64]) -> Vec<Option<bool>> {
    (0..clause_mask.len())
        .map(|i| {
            if clause_mask[i] == 0.0 {
                None
            } else {
                Some(probs_data[2 * i + 1] > probs_data[2 * i])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic, Batch, SyntheticSpec};

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers: 2,
            word_dim: 8,
            rpe_dim: 4,
            gpe_dim: 4,
            lstm_hidden: 4,
            qk_dim: 8,
            v_dim: 8,
            heads: 2,
            ffn_dim: 16,
            max_clauses: 8,
            max_words: 8,
            gp_window: 3,
            seed: 42,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus() -> (Vec<crate::data::Document>, Vocabulary, Vec<f64>) {
        let spec = SyntheticSpec {
            vocab_size: 12,
            clause_range: (3, 5),
            words_range: (2, 4),
            ..SyntheticSpec::default()
        };
        let docs = generate_synthetic(4, 9, &spec).unwrap();
        let (vocab, emb) = build_vocab(&docs, None, 8, 1).unwrap();
        (docs, vocab, emb)
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = tiny_config(Variant::Rthn);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(Variant::Rthn);
        cfg.v_dim = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(Variant::Tthn);
        cfg.word_dim = 10;
        assert!(cfg.validate().is_err());
        assert!(tiny_config(Variant::Rthn).validate().is_ok());
    }

    #[test]
    fn forward_shapes_and_masking() {
        let (docs, vocab, emb) = tiny_corpus();
        for variant in Variant::ALL {
            let model = Model::new(tiny_config(variant), vocab.clone(), emb.clone()).unwrap();
            let refs: Vec<&crate::data::Document> = docs.iter().collect();
            let batch = Batch::from_documents(&refs, &vocab);
            let mut tape = Tape::new();
            let (out, _) = model.forward(&mut tape, &batch, None).unwrap();
            assert_eq!(
                out.probs_data.len(),
                batch.n_docs * batch.n_clauses * 2,
                "{variant}"
            );
            // live rows are distributions
            for i in 0..batch.n_docs * batch.n_clauses {
                if batch.clause_mask[i] != 0.0 {
                    let p = &out.probs_data[2 * i..2 * i + 2];
                    assert!((p[0] + p[1] - 1.0).abs() < 1e-9, "{variant}");
                }
            }
            assert_eq!(out.layer_probs.len(), model.config.n_layers);
        }
    }

    #[test]
    fn loss_is_zero_on_perfect_prediction_and_ln2_on_even_split() {
        let (docs, vocab, emb) = tiny_corpus();
        let model = Model::new(tiny_config(Variant::Rthn), vocab.clone(), emb).unwrap();
        let refs: Vec<&crate::data::Document> = docs[..1].iter().collect();
        let batch = Batch::from_documents(&refs, &vocab);
        let (b, s) = (batch.n_docs, batch.n_clauses);

        // perfect one-hot distribution
        let mut perfect = vec![0.0; b * s * 2];
        for i in 0..b * s {
            perfect[2 * i + batch.labels[i] as usize] = 1.0;
            // keep ln() finite at the unselected slot; the selector zeroes it
            perfect[2 * i + 1 - batch.labels[i] as usize] = 1e-12;
        }
        let mut tape = Tape::new();
        let probs = tape.constant(perfect, vec![b, s, 2]).unwrap();
        let loss = masked_cross_entropy(&mut tape, probs, &batch).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-9);

        // a single live clause at 0.5/0.5 costs exactly ln 2
        let single = crate::data::Document {
            doc_id: "one".into(),
            emotion_index: 0,
            clauses: vec![crate::data::Clause {
                tokens: vec!["a".into()],
                is_cause: true,
            }],
        };
        let sbatch = Batch::from_documents(&[&single], &vocab);
        let mut tape = Tape::new();
        let probs = tape.constant(vec![0.5, 0.5], vec![1, 1, 2]).unwrap();
        let loss = masked_cross_entropy(&mut tape, probs, &sbatch).unwrap();
        assert!((tape.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let _ = model;
    }

    #[test]
    fn l2_of_single_parameter_is_its_squared_norm() {
        let mut store = ParameterStore::new();
        store.insert("theta", vec![2.0], vec![1]);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&store, &mut tape).unwrap();
        let l2 = l2_penalty(&mut tape, &bound).unwrap();
        assert_eq!(tape.data(l2), &[4.0]);
    }

    #[test]
    fn loss_is_non_negative_and_ignores_padding() {
        let (docs, vocab, emb) = tiny_corpus();
        let model = Model::new(tiny_config(Variant::Rthn), vocab.clone(), emb).unwrap();
        // batch of one real document; padding rows belong to the second,
        // shorter document
        let refs: Vec<&crate::data::Document> = docs[..2].iter().collect();
        let batch = Batch::from_documents(&refs, &vocab);
        let mut tape = Tape::new();
        let (out, bound) = model.forward(&mut tape, &batch, None).unwrap();
        let loss = model.loss(&mut tape, &bound, &out, &batch).unwrap();
        assert!(tape.data(loss)[0] >= 0.0);
    }

    #[test]
    fn rthn_and_nogpe_agree_at_one_layer() {
        let (docs, vocab, emb) = tiny_corpus();
        let mut cfg = tiny_config(Variant::Rthn);
        cfg.n_layers = 1;
        let rthn = Model::new(cfg.clone(), vocab.clone(), emb.clone()).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.variant = Variant::NoGpe;
        let mut nogpe = Model::new(cfg2, vocab.clone(), emb).unwrap();
        // identical weights for every shared name
        nogpe.params.copy_shared_from(&rthn.params);

        let refs: Vec<&crate::data::Document> = docs.iter().collect();
        let batch = Batch::from_documents(&refs, &vocab);
        let mut t1 = Tape::new();
        let (o1, _) = rthn.forward(&mut t1, &batch, None).unwrap();
        let mut t2 = Tape::new();
        let (o2, _) = nogpe.forward(&mut t2, &batch, None).unwrap();
        assert_eq!(o1.probs_data, o2.probs_data);
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let (docs, vocab, emb) = tiny_corpus();
        let model = Model::new(tiny_config(Variant::Rthn), vocab.clone(), emb).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let restored = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(restored.config, model.config);

        let refs: Vec<&crate::data::Document> = docs.iter().collect();
        let batch = Batch::from_documents(&refs, &vocab);
        let mut t1 = Tape::new();
        let (o1, _) = model.forward(&mut t1, &batch, None).unwrap();
        let mut t2 = Tape::new();
        let (o2, _) = restored.forward(&mut t2, &batch, None).unwrap();
        assert_eq!(o1.probs_data, o2.probs_data);
    }
}
