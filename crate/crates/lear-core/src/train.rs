//! Adam optimization with linear learning-rate decay, the training loop,
//! finite-difference gradient verification, and few-shot subsampling.

use std::collections::BTreeSet;
use std::io::Write;

use crate::checkpoint;
use crate::config::Config;
use crate::data::{build_vocab, Corpus, LabelFile};
use crate::encoder::{DropoutCtx, Vocab};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::SpanMode;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    build_model, make_label_tokens, prepare_batch, LearModel, Predictor, PreparedText,
};
use crate::params::{Binder, ParamSet};
use crate::tensor::Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, aligned with parameter-store order.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update: `theta -= lr * m_hat / sqrt(v_hat + eps)` with bias
/// correction. `lr_for` supplies the per-parameter learning rate (the
/// two-tier encoder/task split).
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    lr_for: impl Fn(&str) -> f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, (name, tensor)) in params.iter_mut_raw().enumerate() {
        let lr = lr_for(name);
        let grad = tensor.grad.clone().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient in parameter {name} at step {}",
                state.t
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (i, (&g, w)) in grad.iter().zip(tensor.data_mut()).enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat + ADAM_EPS).sqrt();
        }
    }
    params.bump_version();
    Ok(())
}

/// Linear decay to zero: `base * (1 - step/total)`, clamped at zero.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    lr_schedule_warmup(step, total_steps, base_lr, 0.0)
}

/// Linear decay with an optional linear warmup over the first
/// `warmup_frac` of training.
pub fn lr_schedule_warmup(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_frac: f64,
) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup_steps = (total_steps as f64 * warmup_frac).floor() as usize;
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

fn tier_base(name: &str, cfg: &Config) -> f64 {
    if name.starts_with("encoder.") {
        cfg.train.lr_encoder
    } else {
        cfg.train.lr_task
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub best_f1: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Checkpoint bytes of the best-dev-F1 parameters.
    pub best_checkpoint: Vec<u8>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,precision,recall,f1,loss\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                m.epoch, m.precision, m.recall, m.f1, m.loss
            ));
        }
        out
    }
}

// Distinct streams for data shuffling and dropout sampling.
const DATA_STREAM: u64 = 0x9e3779b97f4a7c15;
const DROPOUT_STREAM: u64 = 0x6a09e667f3bcc909;

/// Trains a model from scratch on `train_corpus`, evaluating on
/// `dev_corpus` after every epoch and keeping the best-F1 checkpoint.
/// `target_f1` stops early once the dev F1 reaches it. Per-step lines
/// (step, task lr, L_s, L_e, L_match, total; tab-separated) go to
/// `step_log`.
pub fn train(
    cfg: &Config,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    labels: &LabelFile,
    target_f1: Option<f64>,
    step_log: &mut dyn Write,
) -> Result<(LearModel, Vocab, TrainOutcome)> {
    cfg.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    for record in &train_corpus.records {
        for span in &record.spans {
            if labels.index_of(&span.category).is_none() {
                return Err(Error::data(format!(
                    "corpus category '{}' missing from label file",
                    span.category
                )));
            }
        }
    }

    let vocab = build_vocab(&[train_corpus], labels);
    let mut model = build_model(cfg, &vocab, labels)?;
    let label_tokens = make_label_tokens(
        labels,
        cfg.model.label_source,
        &vocab,
        cfg.model.encoder.max_seq_len,
    )?;
    let weights = cfg.train.loss_weights()?;
    let mode = cfg.train.mode;

    let mut adam = AdamState::new(&model.params);
    let batch = cfg.train.batch_size;
    let steps_per_epoch = train_corpus.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.train.epochs;

    let mut data_rng = Rng::new(cfg.train.seed ^ DATA_STREAM);
    let mut drop_rng = Rng::new(cfg.train.seed ^ DROPOUT_STREAM);

    let mut outcome = TrainOutcome {
        best_f1: -1.0,
        best_epoch: 0,
        epochs_run: 0,
        metrics: Vec::new(),
        best_checkpoint: Vec::new(),
    };
    let mut step = 0usize;
    let gold_dev = dev_corpus.gold_keys();

    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_corpus.len()).collect();
        data_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let records: Vec<&crate::data::Record> =
                chunk.iter().map(|&i| &train_corpus.records[i]).collect();
            let prepared = prepare_batch(
                &records,
                &vocab,
                labels,
                mode,
                cfg.model.encoder.max_seq_len,
            )?;
            let mut g = Graph::new();
            let mut binder = Binder::new();
            let mut ctx = DropoutCtx {
                rng: &mut drop_rng,
                rate: cfg.train.dropout,
            };
            let dropout = (cfg.train.dropout > 0.0).then_some(&mut ctx);
            let (loss, parts) = model.batch_loss(
                &mut g,
                &mut binder,
                &prepared,
                &label_tokens,
                mode,
                &weights,
                dropout,
            )?;
            g.backward(loss)?;
            binder.harvest(&g, &mut model.params)?;
            let lr_task = lr_schedule_warmup(
                step,
                total_steps,
                cfg.train.lr_task,
                cfg.train.warmup_frac,
            );
            adam_step(&mut model.params, &mut adam, |name| {
                lr_schedule_warmup(
                    step,
                    total_steps,
                    tier_base(name, cfg),
                    cfg.train.warmup_frac,
                )
            })?;
            model.params.zero_grads();
            writeln!(
                step_log,
                "{step}\t{lr_task:.8}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                parts.l_s, parts.l_e, parts.l_match, parts.total
            )?;
            epoch_loss += parts.total;
            step += 1;
        }
        let epoch_loss = epoch_loss / steps_per_epoch as f64;

        let report = evaluate_model(&model, &vocab, labels, dev_corpus, cfg, &gold_dev)?;
        outcome.metrics.push(EpochMetrics {
            epoch,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            loss: epoch_loss,
        });
        if report.f1 > outcome.best_f1 {
            outcome.best_f1 = report.f1;
            outcome.best_epoch = epoch;
            outcome.best_checkpoint = checkpoint::to_bytes(&model.params);
        }
        outcome.epochs_run = epoch + 1;
        if let Some(t) = target_f1 {
            if report.f1 >= t {
                break;
            }
        }
    }
    Ok((model, vocab, outcome))
}

fn evaluate_model(
    model: &LearModel,
    vocab: &Vocab,
    labels: &LabelFile,
    corpus: &Corpus,
    cfg: &Config,
    gold: &[(usize, Vec<crate::metrics::SpanKey>)],
) -> Result<EvalReport> {
    let predictor = Predictor::new(model.clone(), vocab.clone(), labels.clone())?;
    let preds = crate::model::predict_corpus(
        &predictor,
        &corpus.records,
        cfg.train.decode,
        cfg.train.threshold,
    )?;
    evaluate(&preds, gold)
}

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tol: f64,
    pub per_tensor: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.per_tensor.iter().all(|(_, e)| *e < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_tensor
            .iter()
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.per_tensor {
            out.push_str(&format!(
                "{:<24} max_rel_err {:>12.3e}  {}\n",
                name,
                err,
                if *err < self.tol { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "gradcheck: {} (tol {:.1e}, worst {:.3e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tol,
            self.max_rel_err()
        ));
        out
    }
}

/// Compares already-harvested analytic gradients in `params` against
/// central finite differences of `loss_fn`, tensor by tensor.
pub fn gradcheck_against(
    params: &ParamSet,
    loss_fn: impl Fn(&ParamSet) -> Result<f64>,
    h: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let mut per_tensor = Vec::new();
    for (name, tensor) in params.iter() {
        let analytic = tensor
            .grad
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("no gradient harvested for {name}")))?;
        let mut worst = 0.0f64;
        for i in 0..tensor.numel() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut q = clone_values(params);
                q.get_mut(name).data_mut()[i] += delta;
                loss_fn(&q)
            };
            let plus = perturbed(h)?;
            let minus = perturbed(-h)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Divergence(
                    "non-finite loss during gradient check".into(),
                ));
            }
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        per_tensor.push((name.to_string(), worst));
    }
    Ok(GradcheckReport { tol, per_tensor })
}

fn clone_values(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        out.insert(
            name,
            crate::tensor::Tensor::from_vec(t.shape().to_vec(), t.data().to_vec())
                .expect("consistent"),
        );
    }
    out
}

/// Full-graph gradient check on a small instance: builds the batch loss,
/// harvests analytic gradients, then verifies every parameter tensor
/// against central finite differences. Dropout is off (evaluation-mode
/// loss) so the objective is deterministic.
pub fn gradcheck(
    model: &LearModel,
    batch: &[PreparedText],
    label_tokens: &crate::encoder::LabelTokens,
    mode: SpanMode,
    weights: &crate::loss::LossWeights,
    h: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let loss_fn = |p: &ParamSet| -> Result<f64> {
        let probe = LearModel {
            config: model.config.clone(),
            params: clone_values(p),
            categories: model.categories,
        };
        let mut g = Graph::new();
        let mut b = Binder::new();
        let (_, parts) = probe.batch_loss(&mut g, &mut b, batch, label_tokens, mode, weights, None)?;
        Ok(parts.total)
    };
    let mut with_grads = clone_values(&model.params);
    {
        let probe = LearModel {
            config: model.config.clone(),
            params: clone_values(&model.params),
            categories: model.categories,
        };
        let mut g = Graph::new();
        let mut b = Binder::new();
        let (loss, _) =
            probe.batch_loss(&mut g, &mut b, batch, label_tokens, mode, weights, None)?;
        g.backward(loss)?;
        b.harvest(&g, &mut with_grads)?;
    }
    gradcheck_against(&with_grads, loss_fn, h, tol)
}

/// The standard small verification instance: a nested-mode model with
/// d=8 over a tiny synthetic corpus (n <= 6 tokens, |C| = 3, m <= 4).
pub fn gradcheck_default(seed: u64, h: f64, tol: f64) -> Result<GradcheckReport> {
    let mut cfg = Config::default();
    cfg.model.encoder.d_model = 8;
    cfg.model.encoder.layers = 2;
    cfg.model.encoder.heads = 2;
    cfg.model.encoder.ffn_mult = 2;
    cfg.model.encoder.max_seq_len = 8;
    cfg.train.mode = SpanMode::Nested;
    cfg.train.decode = crate::decoding::DecodeStrategy::Nested;
    cfg.train.seed = seed;

    let names = vec!["alpha".to_string(), "bravo".to_string(), "charlie".to_string()];
    let annotations = vec![
        "alpha cue word".to_string(),
        "bravo mark token".to_string(),
        "charlie tag".to_string(),
    ];
    let labels = LabelFile::new(
        names
            .iter()
            .zip(&annotations)
            .map(|(n, a)| crate::data::LabelEntry {
                category: n.clone(),
                annotation: a.clone(),
            })
            .collect(),
    )?;
    let records = vec![
        crate::data::Record {
            text_id: 0,
            text: "w1 alpha cue w2 bravo w3".into(),
            spans: vec![
                crate::data::RecordSpan {
                    start: 1,
                    end: 2,
                    category: "alpha".into(),
                },
                crate::data::RecordSpan {
                    start: 1,
                    end: 1,
                    category: "alpha".into(),
                },
                crate::data::RecordSpan {
                    start: 4,
                    end: 4,
                    category: "bravo".into(),
                },
            ],
        },
        crate::data::Record {
            text_id: 1,
            text: "charlie tag w1 w2".into(),
            spans: vec![crate::data::RecordSpan {
                start: 0,
                end: 1,
                category: "charlie".into(),
            }],
        },
    ];
    let corpus = Corpus {
        split: crate::data::Split::Train,
        records,
    };
    let vocab = build_vocab(&[&corpus], &labels);
    let model = build_model(&cfg, &vocab, &labels)?;
    let label_tokens = make_label_tokens(&labels, cfg.model.label_source, &vocab, 8)?;
    let refs: Vec<&crate::data::Record> = corpus.records.iter().collect();
    let batch = prepare_batch(&refs, &vocab, &labels, SpanMode::Nested, 8)?;
    gradcheck(
        &model,
        &batch,
        &label_tokens,
        SpanMode::Nested,
        &cfg.train.loss_weights()?,
        h,
        tol,
    )
}

// ---------------------------------------------------------------------------
// few-shot sampling
// ---------------------------------------------------------------------------

/// Samples `k` sentences per category (a sentence qualifies for a category
/// when it contains at least one gold span of it). A sentence picked for
/// several categories appears once in the output. Deterministic by seed.
pub fn few_shot_sample(
    corpus: &Corpus,
    labels: &LabelFile,
    k: usize,
    seed: u64,
) -> Result<Corpus> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for entry in &labels.entries {
        let mut candidates: Vec<usize> = corpus
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.spans.iter().any(|s| s.category == entry.category))
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < k {
            return Err(Error::InsufficientData {
                category: entry.category.clone(),
                have: candidates.len(),
                need: k,
            });
        }
        rng.shuffle(&mut candidates);
        chosen.extend(candidates.into_iter().take(k));
    }
    Ok(Corpus {
        split: corpus.split,
        records: chosen
            .into_iter()
            .map(|i| corpus.records[i].clone())
            .collect(),
    })
}
