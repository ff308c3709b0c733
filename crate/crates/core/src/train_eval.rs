//! Training loop, Adam optimizer, clause-level metrics, cross-validation,
//! and wall-clock variant timing.
//!
//! Every source of randomness in a run flows from one base seed through
//! [`derived_seed`]: stream 1 seeds vocabulary/embedding initialization,
//! stream 2 (plus a constant inside `Model::new`) seeds parameters, stream
//! 3 the train/validation split, and stream `1000 + epoch` each epoch's
//! shuffle. Cross-validation folds use `base_seed + fold` as their base.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::data::{
    batches_in_order, build_vocab, kfold_split, make_batches, CorpusError, Document,
    PretrainedEmbeddings,
};
use crate::model::{hard_predictions, Model, ModelConfig, ModelError, Variant};
use crate::params::ParameterStore;
use crate::tensor::{Tape, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Documented stream derivation for all run-internal seeds.
pub fn derived_seed(base: u64, stream: u64) -> u64 {
    base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite gradient in parameter {param}")]
    NanGradient { param: String },
    #[error("training diverged (non-finite loss) at epoch {epoch}; last checkpoint attached")]
    Diverged { epoch: usize, last: Box<Model> },
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ── Adam ─────────────────────────────────────────────────────────────

/// Bias-corrected Adam with global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParameterStore) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Apply one update. `grads` aligns with the store's parameter order.
    /// Frozen leading rows keep their values (and contribute nothing to the
    /// clipping norm).
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        mut grads: Vec<Vec<f64>>,
        clip: f64,
    ) -> Result<()> {
        for (p, g) in store.iter().zip(&grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NanGradient { param: p.name.clone() });
            }
        }
        for (p, g) in store.iter().zip(grads.iter_mut()) {
            if p.frozen_rows > 0 {
                let width = p.data.len() / p.shape[0];
                g[..p.frozen_rows * width].fill(0.0);
            }
        }
        if clip > 0.0 {
            let norm: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((param, g), (m, v)) in store
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fne: usize,
    pub tn: usize,
    /// Decision-threshold sweep over [0, 1] in steps of 0.01.
    pub pr_points: Vec<PrPoint>,
    /// Clauses predicted cause, per document, in corpus order.
    pub predicted_causes_per_doc: Vec<usize>,
}

impl EvalReport {
    /// Fraction of documents with two or more predicted causes.
    pub fn multi_cause_rate(&self) -> f64 {
        if self.predicted_causes_per_doc.is_empty() {
            return 0.0;
        }
        let multi = self
            .predicted_causes_per_doc
            .iter()
            .filter(|&&c| c >= 2)
            .count();
        multi as f64 / self.predicted_causes_per_doc.len() as f64
    }
}

/// Precision, recall, F1 over the cause class; zero-predicted-positive
/// gives precision 0 by convention, and F1 is 0 whenever P + R is.
pub fn confusion_to_prf(tp: usize, fp: usize, fne: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fne > 0 {
        tp as f64 / (tp + fne) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Hard predictions from the final distribution; metrics over live clauses.
pub fn evaluate(model: &Model, docs: &[Document]) -> Result<EvalReport> {
    let mut cause_probs: Vec<f64> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut doc_pred_counts: Vec<usize> = Vec::new();

    for batch in batches_in_order(docs, &model.vocab, model.config.batch_size) {
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, &batch, None)?;
        let hard = hard_predictions(&out.probs_data, &batch.clause_mask);
        let s = batch.n_clauses;
        for bi in 0..batch.n_docs {
            let mut pred_count = 0;
            for si in 0..s {
                let ix = bi * s + si;
                if batch.clause_mask[ix] == 0.0 {
                    continue;
                }
                cause_probs.push(out.probs_data[2 * ix + 1]);
                labels.push(batch.labels[ix] == 1);
                if hard[ix] == Some(true) {
                    pred_count += 1;
                }
            }
            doc_pred_counts.push(pred_count);
        }
    }

    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in cause_probs.iter().zip(&labels) {
        let pred = p > 0.5;
        match (pred, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let (precision, recall, f1) = confusion_to_prf(tp, fp, fne);

    let mut pr_points = Vec::with_capacity(101);
    for step in 0..=100 {
        let thr = step as f64 / 100.0;
        let (mut stp, mut sfp, mut sfn) = (0usize, 0usize, 0usize);
        for (&p, &y) in cause_probs.iter().zip(&labels) {
            let pred = p >= thr;
            match (pred, y) {
                (true, true) => stp += 1,
                (true, false) => sfp += 1,
                (false, true) => sfn += 1,
                (false, false) => {}
            }
        }
        let (sp, sr, _) = confusion_to_prf(stp, sfp, sfn);
        pr_points.push(PrPoint {
            threshold: thr,
            precision: sp,
            recall: sr,
        });
    }

    Ok(EvalReport {
        precision,
        recall,
        f1,
        tp,
        fp,
        fne,
        tn,
        pr_points,
        predicted_causes_per_doc: doc_pred_counts,
    })
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy-plus-penalties per live clause.
    pub loss: f64,
    pub train_f1: f64,
    pub val_f1: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_val_f1: Option<f64>,
}

/// Full protocol: seeded shuffles, Adam with clipping, per-epoch train/val
/// F1, early stopping on validation F1 with best-checkpoint restore.
pub fn train(
    config: &ModelConfig,
    docs: &[Document],
    pretrained: Option<&PretrainedEmbeddings>,
) -> Result<TrainOutcome> {
    if docs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    config.validate()?;
    let (vocab, embedding) = build_vocab(
        docs,
        pretrained,
        config.word_dim,
        derived_seed(config.seed, 1),
    )?;
    let mut model = Model::new(config.clone(), vocab, embedding)?;

    // Hold out ~10% for early stopping when the corpus is big enough.
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(config.seed, 3));
    order.shuffle(&mut rng);
    let n_val = if docs.len() >= 10 { docs.len() / 10 } else { 0 };
    let val_docs: Vec<Document> = order[..n_val].iter().map(|&i| docs[i].clone()).collect();
    let train_docs: Vec<Document> = order[n_val..].iter().map(|&i| docs[i].clone()).collect();

    let mut adam = Adam::new(config.learning_rate, &model.params);
    let mut history = Vec::new();
    let mut best: Option<(f64, ParameterStore)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let checkpoint_before = model.params.clone();
        let batches = make_batches(
            &train_docs,
            &model.vocab,
            config.batch_size,
            derived_seed(config.seed, 1000 + epoch as u64),
        );
        let mut loss_sum = 0.0;
        let mut clause_count = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let (out, bound) = model.forward(&mut tape, batch, None)?;
            let loss = model.loss(&mut tape, &bound, &out, batch)?;
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last: Box::new(Model {
                        config: model.config.clone(),
                        vocab: model.vocab.clone(),
                        params: checkpoint_before,
                    }),
                });
            }
            loss_sum += loss_value;
            clause_count += batch.real_clause_count();
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = bound
                .iter()
                .map(|(_, id)| tape.grad(id).expect("bound parameter has a gradient").to_vec())
                .collect();
            adam.step(&mut model.params, grads, config.grad_clip)?;
        }

        let train_f1 = evaluate(&model, &train_docs)?.f1;
        let val_f1 = if val_docs.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_docs)?.f1)
        };
        history.push(EpochStats {
            epoch,
            loss: loss_sum / clause_count.max(1) as f64,
            train_f1,
            val_f1,
            seconds: started.elapsed().as_secs_f64(),
        });

        if let Some(v) = val_f1 {
            let improved = best.as_ref().map_or(true, |(b, _)| v > *b);
            if improved {
                best = Some((v, model.params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= config.patience {
                    break;
                }
            }
        }
    }

    let best_val_f1 = best.as_ref().map(|(v, _)| *v);
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_val_f1,
    })
}

// ── Cross-validation ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Median wall-clock seconds per training epoch.
    pub epoch_seconds: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub variant: String,
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        0.0
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    }
}

/// Worker cap: the explicit request, bounded by `RTHN_NUM_THREADS` when set.
pub fn effective_jobs(requested: usize) -> usize {
    let cap = std::env::var("RTHN_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(usize::MAX);
    requested.clamp(1, cap.max(1))
}

/// Run indexed tasks on up to `jobs` workers; results return in task order
/// no matter which worker finished first.
pub fn run_indexed<T: Send, F: Fn(usize) -> T + Sync>(n_tasks: usize, jobs: usize, task: F) -> Vec<T> {
    let jobs = jobs.clamp(1, n_tasks.max(1));
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n_tasks).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n_tasks {
                    break;
                }
                let out = task(i);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

/// k independent train/evaluate runs over disjoint folds; fold f trains
/// with base seed `config.seed + f` and reports macro-averaged metrics.
pub fn cross_validate(
    config: &ModelConfig,
    docs: &[Document],
    k: usize,
    jobs: usize,
) -> Result<CvReport> {
    config.validate()?;
    let folds = kfold_split(docs.len(), k, config.seed)?;
    let outcomes = run_indexed(k, effective_jobs(jobs), |f| -> Result<FoldReport> {
        let (train_ix, test_ix) = &folds[f];
        let train_docs: Vec<Document> = train_ix.iter().map(|&i| docs[i].clone()).collect();
        let test_docs: Vec<Document> = test_ix.iter().map(|&i| docs[i].clone()).collect();
        let mut fold_config = config.clone();
        fold_config.seed = config.seed + f as u64;
        let outcome = train(&fold_config, &train_docs, None)?;
        let report = evaluate(&outcome.model, &test_docs)?;
        let epoch_times: Vec<f64> = outcome.history.iter().map(|e| e.seconds).collect();
        Ok(FoldReport {
            fold: f,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            epoch_seconds: median(&epoch_times),
            epochs_run: outcome.history.len(),
        })
    });
    let mut folds_out = Vec::with_capacity(k);
    for o in outcomes {
        folds_out.push(o?);
    }
    let precision = mean_std(&folds_out.iter().map(|f| f.precision).collect::<Vec<_>>());
    let recall = mean_std(&folds_out.iter().map(|f| f.recall).collect::<Vec<_>>());
    let f1 = mean_std(&folds_out.iter().map(|f| f.f1).collect::<Vec<_>>());
    Ok(CvReport {
        variant: config.variant.name().to_string(),
        k,
        folds: folds_out,
        precision,
        recall,
        f1,
    })
}

// ── Variant timing ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct VariantTiming {
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub epoch_seconds: f64,
}

/// Identical corpus and epoch budget for every config; early stopping is
/// disabled so the budgets really match.
pub fn time_variants(
    configs: &[ModelConfig],
    train_docs: &[Document],
    eval_docs: &[Document],
    epochs: usize,
) -> Result<Vec<VariantTiming>> {
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let mut cfg = config.clone();
        cfg.max_epochs = epochs;
        cfg.patience = epochs + 1;
        let outcome = train(&cfg, train_docs, None)?;
        let report = evaluate(&outcome.model, eval_docs)?;
        let times: Vec<f64> = outcome.history.iter().map(|e| e.seconds).collect();
        rows.push(VariantTiming {
            variant: cfg.variant.name().to_string(),
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            epoch_seconds: median(&times),
        });
    }
    Ok(rows)
}

// ── Tabular output ───────────────────────────────────────────────────

pub fn metrics_csv(variant: Variant, folds: &[FoldReport]) -> String {
    let mut out = String::from("variant,fold,precision,recall,f1,epoch_seconds\n");
    for f in folds {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.3}\n",
            variant.name(),
            f.fold,
            f.precision,
            f.recall,
            f.f1,
            f.epoch_seconds
        ));
    }
    out
}

pub fn pr_csv(report: &EvalReport) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &report.pr_points {
        out.push_str(&format!(
            "{:.2},{:.6},{:.6}\n",
            p.threshold, p.precision, p.recall
        ));
    }
    out
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_f1,val_f1\n");
    for e in history {
        let val = e
            .val_f1
            .map_or(String::from(""), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            e.epoch, e.loss, e.train_f1, val
        ));
    }
    out
}

pub fn timing_csv(rows: &[VariantTiming]) -> String {
    let mut out = String::from("variant,precision,recall,f1,epoch_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            r.variant, r.precision, r.recall, r.f1, r.epoch_seconds
        ));
    }
    out
}
