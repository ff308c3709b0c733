//! Corpus data model, ingestion, vocabulary, batching, and the
//! deterministic synthetic planted-cause generator.
//!
//! Corpus files are JSON Lines, one document per line:
//! `{"doc_id": str, "emotion_index": int, "clauses": [{"tokens": [str,...], "is_cause": bool}, ...]}`
//! with `emotion_index` 0-based. Clauses are capped at [`MAX_WORDS`] tokens
//! and documents at [`MAX_CLAUSES`] clauses; over-length input is truncated
//! and counted, not rejected.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_WORDS: usize = 75;
pub const MAX_CLAUSES: usize = 45;

/// Reserved vocabulary ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Marker token planted by the lexical synthetic policy.
pub const TRIGGER_TOKEN: &str = "trigger";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed document: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line} (doc {doc_id}): {msg}")]
    Validation {
        line: usize,
        doc_id: String,
        msg: String,
    },
    #[error("pretrained embeddings: line {line}: {msg}")]
    Embedding { line: usize, msg: String },
    #[error("pretrained embedding dimension {found} does not match configured dimension {expected}")]
    EmbeddingDim { found: usize, expected: usize },
    #[error("synthetic generation: {0}")]
    Generation(String),
    #[error("k-fold split needs 2 <= k <= {n} documents, got k = {k}")]
    BadFold { k: usize, n: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Clause {
    pub tokens: Vec<String>,
    pub is_cause: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub emotion_index: usize,
    pub clauses: Vec<Clause>,
}

impl Document {
    /// Signed clause distance from the emotion expression clause.
    pub fn relative_positions(&self) -> Vec<i64> {
        (0..self.clauses.len())
            .map(|i| i as i64 - self.emotion_index as i64)
            .collect()
    }

    pub fn cause_count(&self) -> usize {
        self.clauses.iter().filter(|c| c.is_cause).count()
    }
}

#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    /// Clauses that lost tokens to the per-clause cap.
    pub truncated_clauses: usize,
    /// Documents that lost clauses to the per-document cap.
    pub truncated_documents: usize,
}

fn validate_document(mut doc: Document, line: usize, stats: &mut LoadedCorpus) -> Result<Document> {
    let fail = |msg: String| CorpusError::Validation {
        line,
        doc_id: doc.doc_id.clone(),
        msg,
    };
    if doc.clauses.is_empty() {
        return Err(fail("document has no clauses".into()));
    }
    if doc.emotion_index >= doc.clauses.len() {
        return Err(fail(format!(
            "emotion_index {} out of range for {} clauses",
            doc.emotion_index,
            doc.clauses.len()
        )));
    }
    if doc.clauses.len() > MAX_CLAUSES {
        doc.clauses.truncate(MAX_CLAUSES);
        stats.truncated_documents += 1;
        if doc.emotion_index >= MAX_CLAUSES {
            return Err(fail(format!(
                "emotion_index {} lost to the {MAX_CLAUSES}-clause cap",
                doc.emotion_index
            )));
        }
    }
    for (i, clause) in doc.clauses.iter_mut().enumerate() {
        if clause.tokens.is_empty() {
            return Err(fail(format!("clause {i} has no tokens")));
        }
        if clause.tokens.len() > MAX_WORDS {
            clause.tokens.truncate(MAX_WORDS);
            stats.truncated_clauses += 1;
        }
    }
    if doc.cause_count() == 0 {
        return Err(fail("document has no cause clause".into()));
    }
    Ok(doc)
}

pub fn load_corpus_from_reader<R: BufRead>(reader: R) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|source| CorpusError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&text)
            .map_err(|source| CorpusError::Parse { line: line_no, source })?;
        let doc = validate_document(doc, line_no, &mut out)?;
        out.documents.push(doc);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_corpus_from_reader(BufReader::new(file))
}

pub fn write_corpus<W: Write>(docs: &[Document], w: &mut W) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut *w, doc)?;
        writeln!(w)?;
    }
    Ok(())
}

// ── Vocabulary ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Tokens in id order; `tokens[0]` is `<pad>`, `tokens[1]` is `<unk>`.
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub dim: usize,
}

impl Vocabulary {
    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

#[derive(Debug, Clone)]
pub struct PretrainedEmbeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Text word2vec format: header `<vocab_size> <dim>`, then
/// `<token> <f1> ... <fdim>` per line.
pub fn load_word2vec_text<R: BufRead>(reader: R) -> Result<PretrainedEmbeddings> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(CorpusError::Embedding {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = header.map_err(|e| CorpusError::Embedding {
        line: 1,
        msg: e.to_string(),
    })?;
    let mut parts = header.split_whitespace();
    let _count: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(CorpusError::Embedding {
            line: 1,
            msg: "header must be `<vocab_size> <dim>`".into(),
        })?;
    let dim: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(CorpusError::Embedding {
            line: 1,
            msg: "header must be `<vocab_size> <dim>`".into(),
        })?;
    let mut vectors = HashMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let text = line.map_err(|e| CorpusError::Embedding {
            line: line_no,
            msg: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let values = values.map_err(|e| CorpusError::Embedding {
            line: line_no,
            msg: format!("bad float: {e}"),
        })?;
        if values.len() != dim {
            return Err(CorpusError::Embedding {
                line: line_no,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        vectors.insert(token, values);
    }
    Ok(PretrainedEmbeddings { dim, vectors })
}

/// Builds the token table (first-seen order, after `<pad>`/`<unk>`) and the
/// initial embedding matrix. Tokens found in the pretrained file copy its
/// vector verbatim; others draw uniform[-0.1, 0.1]. The `<pad>` row is zero.
pub fn build_vocab(
    docs: &[Document],
    pretrained: Option<&PretrainedEmbeddings>,
    dim: usize,
    seed: u64,
) -> Result<(Vocabulary, Vec<f64>)> {
    if let Some(pre) = pretrained {
        if pre.dim != dim {
            return Err(CorpusError::EmbeddingDim {
                found: pre.dim,
                expected: dim,
            });
        }
    }
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    let mut index: HashMap<String, usize> =
        tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    for doc in docs {
        for clause in &doc.clauses {
            for tok in &clause.tokens {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok.clone());
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = vec![0.0; tokens.len() * dim];
    for (i, tok) in tokens.iter().enumerate().skip(1) {
        let row = &mut matrix[i * dim..(i + 1) * dim];
        match pretrained.and_then(|p| p.vectors.get(tok)) {
            Some(v) => row.copy_from_slice(v),
            None => {
                for slot in row.iter_mut() {
                    *slot = rng.random_range(-0.1..0.1);
                }
            }
        }
    }
    let vocab = Vocabulary { tokens, index, dim };
    Ok((vocab, matrix))
}

// ── Batching ─────────────────────────────────────────────────────────

/// A padded mini-batch. `n_clauses`/`n_words` are the batch maxima
/// (capped at [`MAX_CLAUSES`]/[`MAX_WORDS`]); masks mark real slots.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n_docs: usize,
    pub n_clauses: usize,
    pub n_words: usize,
    /// `[B, S, T]` vocabulary ids, `<pad>` at padded slots.
    pub token_ids: Vec<usize>,
    /// `[B, S, T]` 1.0 where a real token exists.
    pub word_mask: Vec<f64>,
    /// `[B, S]` 1.0 where a real clause exists.
    pub clause_mask: Vec<f64>,
    /// `[B, S]` clause index minus emotion index; 0 at padded slots.
    pub rel_pos: Vec<i64>,
    /// `[B, S]` 1 for cause clauses.
    pub labels: Vec<u8>,
    pub doc_ids: Vec<String>,
}

impl Batch {
    pub fn from_documents(docs: &[&Document], vocab: &Vocabulary) -> Batch {
        let b = docs.len();
        let s = docs
            .iter()
            .map(|d| d.clauses.len())
            .max()
            .unwrap_or(1)
            .min(MAX_CLAUSES);
        let t = docs
            .iter()
            .flat_map(|d| d.clauses.iter().map(|c| c.tokens.len()))
            .max()
            .unwrap_or(1)
            .min(MAX_WORDS);
        let mut batch = Batch {
            n_docs: b,
            n_clauses: s,
            n_words: t,
            token_ids: vec![PAD_ID; b * s * t],
            word_mask: vec![0.0; b * s * t],
            clause_mask: vec![0.0; b * s],
            rel_pos: vec![0; b * s],
            labels: vec![0; b * s],
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        };
        for (bi, doc) in docs.iter().enumerate() {
            for (si, clause) in doc.clauses.iter().take(s).enumerate() {
                batch.clause_mask[bi * s + si] = 1.0;
                batch.rel_pos[bi * s + si] = si as i64 - doc.emotion_index as i64;
                batch.labels[bi * s + si] = u8::from(clause.is_cause);
                for (ti, tok) in clause.tokens.iter().take(t).enumerate() {
                    batch.token_ids[(bi * s + si) * t + ti] = vocab.id(tok);
                    batch.word_mask[(bi * s + si) * t + ti] = 1.0;
                }
            }
        }
        batch
    }

    /// Expanded mask, 1.0 over all word slots of real clauses aside.
    pub fn real_clause_count(&self) -> usize {
        self.clause_mask.iter().filter(|&&m| m != 0.0).count()
    }
}

/// Seeded shuffle, then fixed-size chunks padded to each chunk's maxima.
pub fn make_batches(docs: &[Document], vocab: &Vocabulary, batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Document> = chunk.iter().map(|&i| &docs[i]).collect();
            Batch::from_documents(&refs, vocab)
        })
        .collect()
}

/// Corpus-order batches for evaluation and inspection.
pub fn batches_in_order(docs: &[Document], vocab: &Vocabulary, batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    docs.chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Document> = chunk.iter().collect();
            Batch::from_documents(&refs, vocab)
        })
        .collect()
}

// ── Synthetic planted-cause corpus ───────────────────────────────────

/// How cause clauses are made identifiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPolicy {
    /// Every cause clause contains [`TRIGGER_TOKEN`]; no other clause does
    /// (unless `distractor_prob` plants a decoy).
    Lexical,
    /// Tokens are uninformative; causes are identifiable only by relative
    /// position.
    Positional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    /// Inclusive range of clauses per document.
    pub clause_range: (usize, usize),
    /// Inclusive range of tokens per clause.
    pub words_range: (usize, usize),
    /// Relative-position weights for cause placement.
    pub cause_positions: Vec<(i64, f64)>,
    pub policy: TriggerPolicy,
    /// Target fraction of cause clauses over all clauses. Documents get one
    /// or two causes; the two-cause probability is solved from this target.
    pub cause_fraction: f64,
    /// Lexical policy only: probability of planting the trigger in one
    /// non-cause clause as well.
    pub distractor_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            clause_range: (4, 8),
            words_range: (3, 8),
            cause_positions: vec![
                (-3, 0.10),
                (-2, 0.25),
                (-1, 0.40),
                (0, 0.05),
                (1, 0.15),
                (2, 0.05),
            ],
            policy: TriggerPolicy::Lexical,
            cause_fraction: 0.18,
            distractor_prob: 0.0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(CorpusError::Generation(msg.to_string()));
        if self.vocab_size == 0 {
            return err("vocab_size must be positive");
        }
        let (cl, ch) = self.clause_range;
        let (wl, wh) = self.words_range;
        if cl == 0 || cl > ch || ch > MAX_CLAUSES {
            return err("clause_range must satisfy 1 <= low <= high <= 45");
        }
        if wl == 0 || wl > wh || wh > MAX_WORDS {
            return err("words_range must satisfy 1 <= low <= high <= 75");
        }
        let live: Vec<_> = self.cause_positions.iter().filter(|(_, w)| *w > 0.0).collect();
        if live.is_empty() {
            return err("cause_positions has no positive-weight entry");
        }
        // A position is reachable if some (emotion_index, n_clauses) pair
        // within the clause range admits it.
        let reachable = live
            .iter()
            .any(|(p, _)| p.unsigned_abs() as usize <= ch - 1);
        if !reachable {
            return err("no cause position is reachable within the clause range");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return err("distractor_prob must be in [0, 1]");
        }
        if self.cause_fraction <= 0.0 || self.cause_fraction >= 1.0 {
            return err("cause_fraction must be in (0, 1)");
        }
        Ok(())
    }

    /// Two-cause probability solving
    /// `(1 + p2) / mean_clauses = cause_fraction` for the default mix of
    /// one- and two-cause documents.
    fn two_cause_prob(&self) -> f64 {
        let mean_clauses = (self.clause_range.0 + self.clause_range.1) as f64 / 2.0;
        (self.cause_fraction * mean_clauses - 1.0).clamp(0.0, 1.0)
    }
}

fn weighted_pick(rng: &mut ChaCha8Rng, options: &[(i64, f64)]) -> i64 {
    let total: f64 = options.iter().map(|(_, w)| w).sum();
    let mut draw = rng.random_range(0.0..total);
    for &(p, w) in options {
        if draw < w {
            return p;
        }
        draw -= w;
    }
    options.last().unwrap().0
}

/// Deterministic corpus: identical `(n_docs, seed, spec)` reproduce the
/// same documents byte for byte.
pub fn generate_synthetic(n_docs: usize, seed: u64, spec: &SyntheticSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p2 = spec.two_cause_prob();
    let mut docs = Vec::with_capacity(n_docs);
    for di in 0..n_docs {
        let n_clauses = rng.random_range(spec.clause_range.0..=spec.clause_range.1);
        let want_causes = if rng.random_range(0.0..1.0) < p2 { 2 } else { 1 };

        // Find an emotion placement that admits at least one cause slot.
        let mut emotion_index = 0;
        let mut feasible: Vec<(i64, f64)> = Vec::new();
        let mut found = false;
        for _ in 0..64 {
            emotion_index = rng.random_range(0..n_clauses);
            feasible = spec
                .cause_positions
                .iter()
                .filter(|&&(p, w)| {
                    w > 0.0 && {
                        let ix = emotion_index as i64 + p;
                        ix >= 0 && (ix as usize) < n_clauses
                    }
                })
                .copied()
                .collect();
            if !feasible.is_empty() {
                found = true;
                break;
            }
        }
        if !found {
            return Err(CorpusError::Generation(format!(
                "document {di}: no feasible cause position for {n_clauses} clauses"
            )));
        }

        let mut cause_indices = Vec::new();
        let mut pool = feasible.clone();
        for _ in 0..want_causes.min(pool.len()) {
            let rp = weighted_pick(&mut rng, &pool);
            pool.retain(|&(p, _)| p != rp);
            cause_indices.push((emotion_index as i64 + rp) as usize);
        }

        let mut clauses: Vec<Clause> = (0..n_clauses)
            .map(|ci| {
                let len = rng.random_range(spec.words_range.0..=spec.words_range.1);
                let tokens = (0..len)
                    .map(|_| format!("w{}", rng.random_range(0..spec.vocab_size)))
                    .collect();
                Clause {
                    tokens,
                    is_cause: cause_indices.contains(&ci),
                }
            })
            .collect();

        if spec.policy == TriggerPolicy::Lexical {
            for &ci in &cause_indices {
                let slot = rng.random_range(0..clauses[ci].tokens.len());
                clauses[ci].tokens[slot] = TRIGGER_TOKEN.to_string();
            }
            if rng.random_range(0.0..1.0) < spec.distractor_prob {
                let non_cause: Vec<usize> = (0..n_clauses)
                    .filter(|ci| !cause_indices.contains(ci))
                    .collect();
                if !non_cause.is_empty() {
                    let ci = non_cause[rng.random_range(0..non_cause.len())];
                    let slot = rng.random_range(0..clauses[ci].tokens.len());
                    clauses[ci].tokens[slot] = TRIGGER_TOKEN.to_string();
                }
            }
        }

        docs.push(Document {
            doc_id: format!("synth-{di:05}"),
            emotion_index,
            clauses,
        });
    }
    Ok(docs)
}

// ── Cross-validation folds ───────────────────────────────────────────

/// Disjoint near-equal test folds covering every document exactly once.
/// Returns `(train_indices, test_indices)` per fold.
pub fn kfold_split(n_docs: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n_docs {
        return Err(CorpusError::BadFold { k, n: n_docs });
    }
    let mut order: Vec<usize> = (0..n_docs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n_docs / k;
    let rem = n_docs % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < rem);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}
