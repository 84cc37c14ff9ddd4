//! Paradigm efficiency benchmark: the same toy encoder driven by three
//! pipeline shapes — traditional (text only), joint question-text encoding
//! (one encoder pass per category), and the label-fusion architecture with
//! cached label encodings — with deterministic multiply-accumulate counts
//! compared against a closed-form cost model.
//!
//! Counting rules are the graph's (see [`crate::graph`]): forward passes
//! only. The backward sweep costs a near-constant multiple of the forward
//! count for every paradigm, so relative comparisons are unchanged; wall
//! time is reported for context but never asserted on.

use std::fmt;
use std::time::Instant;

use crate::config::{Config, ModelConfig};
use crate::encoder::{self, EncoderConfig, LabelTokens};
use crate::error::{Error, Result};
use crate::fusion::LabelFeature;
use crate::graph::{Graph, Var};
use crate::loss::{GoldLabels, SpanMode};
use crate::model::{LearModel, PreparedText};
use crate::params::{Binder, ParamSet};
use crate::scoring::BoundaryVars;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    Traditional,
    Qa,
    Lear,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "traditional" => Ok(Paradigm::Traditional),
            "qa" => Ok(Paradigm::Qa),
            "lear" => Ok(Paradigm::Lear),
            other => Err(Error::Config(format!("unknown paradigm '{other}'"))),
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Traditional => "traditional",
            Paradigm::Qa => "qa",
            Paradigm::Lear => "lear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    TrainEpoch,
    Inference,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::TrainEpoch => "train-epoch",
            Phase::Inference => "inference",
        })
    }
}

#[derive(Debug, Clone)]
pub struct CostRecord {
    pub paradigm: Paradigm,
    pub categories: usize,
    pub n: usize,
    pub m: usize,
    pub phase: Phase,
    pub wall_seconds: f64,
    /// Deterministic multiply-accumulate count per text (inference) or per
    /// epoch (training).
    pub op_count: u64,
}

// ---------------------------------------------------------------------------
// analytic cost model
// ---------------------------------------------------------------------------

/// Closed-form forward multiply-accumulate counts mirroring the graph's
/// counting rules exactly.
pub mod analytic {
    use crate::encoder::EncoderConfig;

    /// One encoder pass over a length-`s` sequence:
    /// per layer `4 s d^2` (QKV + output projections) + `2 s^2 d` (scores and
    /// context) + `H s^2` (probability scaling) + `2 s d f` (feed-forward)
    /// + `4 s d` (two layer norms at two multiplies per element).
    pub fn encoder_pass(cfg: &EncoderConfig, s: usize) -> u64 {
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let per_layer = 4 * s * d * d + 2 * s * s * d + cfg.heads * s * s + 2 * s * d * f + 4 * s * d;
        (cfg.layers * per_layer) as u64
    }

    /// Boundary heads over `n` tokens for `c` categories (start + end).
    pub fn boundary_heads(n: usize, d: usize, c: usize) -> u64 {
        (2 * c * n * d) as u64
    }

    pub fn traditional_inference(cfg: &EncoderConfig, n: usize, c: usize) -> u64 {
        encoder_pass(cfg, n) + boundary_heads(n, cfg.d_model, c)
    }

    /// One joint pass (annotation + separator + text) per category, plus a
    /// single-category boundary head over the text region.
    pub fn qa_inference(cfg: &EncoderConfig, n: usize, m: usize, c: usize) -> u64 {
        c as u64 * (encoder_pass(cfg, n + m + 1) + boundary_heads(n, cfg.d_model, 1))
    }

    /// Cached-label inference: one text encoding, the text-side projection
    /// (`n d^2`), then per category the attention (`2 n m d`), the output
    /// transform (`n d^2`), and the boundary heads.
    pub fn lear_inference_cached(cfg: &EncoderConfig, n: usize, m: usize, c: usize) -> u64 {
        let d = cfg.d_model;
        encoder_pass(cfg, n) as u64
            + (n * d * d) as u64
            + c as u64 * ((2 * n * m * d + n * d * d) as u64)
            + boundary_heads(n, d, c)
    }
}

// ---------------------------------------------------------------------------
// pipelines
// ---------------------------------------------------------------------------

fn zero_gold(categories: usize, n: usize) -> GoldLabels {
    GoldLabels {
        starts: vec![vec![0.0; n]; categories],
        ends: vec![vec![0.0; n]; categories],
        pairs: None,
    }
}

fn boundary_bce(g: &mut Graph, vars: &BoundaryVars, gold: &GoldLabels, n: usize) -> Result<Var> {
    let weights = vec![1.0; n];
    let mut acc: Option<Var> = None;
    for (c, &p) in vars.start.iter().enumerate() {
        let s = g.bce_sum(p, &gold.starts[c], &weights)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    for (c, &p) in vars.end.iter().enumerate() {
        let s = g.bce_sum(p, &gold.ends[c], &weights)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    g.scale(acc.expect("categories"), 1.0 / n as f64)
}

/// Text-only encoder with per-category boundary classifiers; ignores label
/// annotations entirely.
pub struct TraditionalPipeline {
    enc: EncoderConfig,
    params: ParamSet,
    pub encoder_passes: std::cell::Cell<u64>,
}

impl TraditionalPipeline {
    pub fn new(enc: EncoderConfig, categories: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        encoder::init_encoder_params(&mut params, &enc, &mut rng);
        crate::scoring::init_scoring_params(&mut params, enc.d_model, categories, false, &mut rng);
        TraditionalPipeline {
            enc,
            params,
            encoder_passes: std::cell::Cell::new(0),
        }
    }

    fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<BoundaryVars> {
        let mut b = Binder::new();
        let mask = vec![true; ids.len()];
        let h_x = encoder::encode(g, &mut b, &self.params, &self.enc, ids, &mask, None)?;
        self.encoder_passes.set(self.encoder_passes.get() + 1);
        let categories = self.params.get("head.m_s").shape()[0];
        let per_cat: Vec<Var> = vec![h_x; categories];
        crate::scoring::score_boundaries(g, &mut b, &self.params, &per_cat)
    }

    pub fn inference_macs(&self, ids: &[usize]) -> Result<u64> {
        let mut g = Graph::new();
        self.forward(&mut g, ids)?;
        Ok(g.macs())
    }

    pub fn train_epoch_macs(&self, corpus: &[Vec<usize>]) -> Result<u64> {
        let categories = self.params.get("head.m_s").shape()[0];
        let mut total = 0;
        for ids in corpus {
            let mut g = Graph::new();
            let vars = self.forward(&mut g, ids)?;
            let gold = zero_gold(categories, ids.len());
            boundary_bce(&mut g, &vars, &gold, ids.len())?;
            total += g.macs();
        }
        Ok(total)
    }
}

/// Joint encoding: for every category the annotation, a separator and the
/// text are concatenated and encoded together; a shared single-category
/// boundary head reads the text region.
pub struct QaPipeline {
    enc: EncoderConfig,
    params: ParamSet,
    annotations: Vec<Vec<usize>>,
    pub encoder_passes: std::cell::Cell<u64>,
}

impl QaPipeline {
    pub fn new(enc: EncoderConfig, annotations: Vec<Vec<usize>>, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        encoder::init_encoder_params(&mut params, &enc, &mut rng);
        crate::scoring::init_scoring_params(&mut params, enc.d_model, 1, false, &mut rng);
        QaPipeline {
            enc,
            params,
            annotations,
            encoder_passes: std::cell::Cell::new(0),
        }
    }

    /// One joint pass; returns the single-category boundary vars over the
    /// text region.
    fn forward_category(
        &self,
        g: &mut Graph,
        category: usize,
        text_ids: &[usize],
    ) -> Result<BoundaryVars> {
        let mut b = Binder::new();
        let ann = &self.annotations[category];
        let mut joint = Vec::with_capacity(ann.len() + 1 + text_ids.len());
        joint.extend_from_slice(ann);
        joint.push(crate::encoder::SEP_ID);
        joint.extend_from_slice(text_ids);
        let mask = vec![true; joint.len()];
        let h = encoder::encode(g, &mut b, &self.params, &self.enc, &joint, &mask, None)?;
        self.encoder_passes.set(self.encoder_passes.get() + 1);
        let text_region = g.slice_rows(h, ann.len() + 1, text_ids.len())?;
        crate::scoring::score_boundaries(g, &mut b, &self.params, &[text_region])
    }

    pub fn inference_macs(&self, text_ids: &[usize]) -> Result<u64> {
        let mut g = Graph::new();
        for c in 0..self.annotations.len() {
            self.forward_category(&mut g, c, text_ids)?;
        }
        Ok(g.macs())
    }

    pub fn train_epoch_macs(&self, corpus: &[Vec<usize>]) -> Result<u64> {
        let mut total = 0;
        for ids in corpus {
            for c in 0..self.annotations.len() {
                let mut g = Graph::new();
                let vars = self.forward_category(&mut g, c, ids)?;
                let gold = zero_gold(1, ids.len());
                boundary_bce(&mut g, &vars, &gold, ids.len())?;
                total += g.macs();
            }
        }
        Ok(total)
    }
}

/// The full label-fusion model with label features cached at inference.
pub struct LearPipeline {
    model: LearModel,
    label_tokens: LabelTokens,
    cached_feats: Vec<(Tensor, Vec<bool>)>,
    pub label_encoder_passes: std::cell::Cell<u64>,
}

impl LearPipeline {
    pub fn new(enc: EncoderConfig, annotations: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let categories = annotations.len();
        let mc = ModelConfig {
            encoder: enc,
            ..ModelConfig::default()
        };
        let model = LearModel::new(mc, categories, seed)?;
        let width = annotations.iter().map(Vec::len).max().unwrap_or(0);
        let label_tokens = LabelTokens {
            names: (0..categories).map(crate::data::category_name).collect(),
            masks: annotations.iter().map(|a| vec![true; a.len()]).collect(),
            raw: annotations
                .iter()
                .map(|a| a.iter().map(|id| format!("t{id}")).collect())
                .collect(),
            ids: annotations,
            width,
        };
        let mut p = LearPipeline {
            model,
            label_tokens,
            cached_feats: Vec::new(),
            label_encoder_passes: std::cell::Cell::new(0),
        };
        p.warmup()?;
        Ok(p)
    }

    /// Encodes and projects all label annotations once.
    pub fn warmup(&mut self) -> Result<()> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let feats = self
            .model
            .label_features_fresh(&mut g, &mut b, &self.label_tokens, None)?;
        self.cached_feats = feats
            .iter()
            .map(|lf| (g.value(lf.feat).clone(), lf.mask.clone()))
            .collect();
        self.label_encoder_passes
            .set(self.label_encoder_passes.get() + 1);
        Ok(())
    }

    pub fn inference_macs(&self, text_ids: &[usize]) -> Result<u64> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let feats: Vec<LabelFeature> = self
            .cached_feats
            .iter()
            .map(|(t, mask)| LabelFeature {
                feat: g.constant(t.clone()),
                mask: mask.clone(),
            })
            .collect();
        let mask = vec![true; text_ids.len()];
        self.model
            .forward_text(&mut g, &mut b, text_ids, &mask, &feats, false, false, None)?;
        Ok(g.macs())
    }

    pub fn train_epoch_macs(&self, corpus: &[Vec<usize>]) -> Result<u64> {
        // One batch per epoch: labels encoded once, texts share the graph.
        let mut g = Graph::new();
        let mut b = Binder::new();
        let batch: Vec<PreparedText> = corpus
            .iter()
            .map(|ids| PreparedText {
                text_id: 0,
                ids: ids.clone(),
                mask: vec![true; ids.len()],
                n_true: ids.len(),
                gold: zero_gold(self.model.categories, ids.len()),
            })
            .collect();
        self.model.batch_loss(
            &mut g,
            &mut b,
            &batch,
            &self.label_tokens,
            SpanMode::Flat,
            &crate::loss::LossWeights::default(),
            None,
        )?;
        self.label_encoder_passes
            .set(self.label_encoder_passes.get() + 1);
        Ok(g.macs())
    }
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub paradigms: Vec<Paradigm>,
    pub category_counts: Vec<usize>,
    pub n: usize,
    pub m: usize,
    pub texts: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let cfg = Config::default();
        BenchConfig {
            paradigms: vec![Paradigm::Traditional, Paradigm::Qa, Paradigm::Lear],
            category_counts: vec![3, 7, 33],
            n: 64,
            m: 16,
            texts: 3,
            encoder: cfg.model.encoder,
            seed: 17,
        }
    }
}

pub struct SweepReport {
    pub config: BenchConfig,
    pub records: Vec<CostRecord>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("paradigm,categories,n,m,phase,wall_seconds,op_count\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{}\n",
                r.paradigm, r.categories, r.n, r.m, r.phase, r.wall_seconds, r.op_count
            ));
        }
        out
    }

    pub fn op_count(&self, paradigm: Paradigm, categories: usize, phase: Phase) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.paradigm == paradigm && r.categories == categories && r.phase == phase)
            .map(|r| r.op_count)
    }

    /// Human-readable table: absolute and traditional-relative costs plus
    /// the analytic model's prediction and the relative residual.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:<12} {:<12} {:>14} {:>8} {:>14} {:>9} {:>10}\n",
            "|C|", "paradigm", "phase", "op_count", "rel", "analytic", "resid", "wall_s"
        ));
        for &c in &self.config.category_counts {
            for phase in [Phase::Inference, Phase::TrainEpoch] {
                let base = self.op_count(Paradigm::Traditional, c, phase);
                for r in self
                    .records
                    .iter()
                    .filter(|r| r.categories == c && r.phase == phase)
                {
                    let rel = base
                        .map(|b| r.op_count as f64 / b as f64)
                        .map(|x| format!("x{x:.1}"))
                        .unwrap_or_default();
                    let (analytic, resid) = if phase == Phase::Inference {
                        let a = match r.paradigm {
                            Paradigm::Traditional => {
                                analytic::traditional_inference(&self.config.encoder, r.n, c)
                            }
                            Paradigm::Qa => {
                                analytic::qa_inference(&self.config.encoder, r.n, r.m, c)
                            }
                            Paradigm::Lear => {
                                analytic::lear_inference_cached(&self.config.encoder, r.n, r.m, c)
                            }
                        };
                        let resid = (r.op_count as f64 - a as f64) / a as f64;
                        (format!("{a}"), format!("{:+.2}%", resid * 100.0))
                    } else {
                        (String::from("-"), String::from("-"))
                    };
                    out.push_str(&format!(
                        "{:<6} {:<12} {:<12} {:>14} {:>8} {:>14} {:>9} {:>10.4}\n",
                        c, r.paradigm.to_string(), phase.to_string(),
                        r.op_count, rel, analytic, resid, r.wall_seconds
                    ));
                }
            }
        }
        out
    }
}

/// Runs the full grid: every paradigm at every category count, measuring
/// per-text inference and one-epoch training costs on synthetic inputs of
/// exactly `n` text tokens and `m` annotation tokens.
pub fn run_sweep(bc: &BenchConfig) -> Result<SweepReport> {
    if bc.n == 0 || bc.m == 0 || bc.texts == 0 {
        return Err(Error::Config("bench needs positive n, m and texts".into()));
    }
    let mut enc = bc.encoder.clone();
    enc.max_seq_len = enc.max_seq_len.max(bc.n + bc.m + 1);
    let vocab_size = 200;
    enc.vocab_size = vocab_size;
    let mut rng = Rng::new(bc.seed);
    let texts: Vec<Vec<usize>> = (0..bc.texts)
        .map(|_| (0..bc.n).map(|_| 3 + rng.below(vocab_size - 3)).collect())
        .collect();

    let mut records = Vec::new();
    for &c in &bc.category_counts {
        let annotations: Vec<Vec<usize>> = (0..c)
            .map(|_| (0..bc.m).map(|_| 3 + rng.below(vocab_size - 3)).collect())
            .collect();
        for &paradigm in &bc.paradigms {
            let (infer_counts, infer_wall, train_count, train_wall) = match paradigm {
                Paradigm::Traditional => {
                    let p = TraditionalPipeline::new(enc.clone(), c, bc.seed);
                    let t0 = Instant::now();
                    let counts: Vec<u64> = texts
                        .iter()
                        .map(|ids| p.inference_macs(ids))
                        .collect::<Result<_>>()?;
                    let infer_wall = t0.elapsed().as_secs_f64();
                    let t1 = Instant::now();
                    let train_count = p.train_epoch_macs(&texts)?;
                    (counts, infer_wall, train_count, t1.elapsed().as_secs_f64())
                }
                Paradigm::Qa => {
                    let p = QaPipeline::new(enc.clone(), annotations.clone(), bc.seed);
                    let t0 = Instant::now();
                    let counts: Vec<u64> = texts
                        .iter()
                        .map(|ids| p.inference_macs(ids))
                        .collect::<Result<_>>()?;
                    let infer_wall = t0.elapsed().as_secs_f64();
                    let t1 = Instant::now();
                    let train_count = p.train_epoch_macs(&texts)?;
                    (counts, infer_wall, train_count, t1.elapsed().as_secs_f64())
                }
                Paradigm::Lear => {
                    let p = LearPipeline::new(enc.clone(), annotations.clone(), bc.seed)?;
                    let t0 = Instant::now();
                    let counts: Vec<u64> = texts
                        .iter()
                        .map(|ids| p.inference_macs(ids))
                        .collect::<Result<_>>()?;
                    let infer_wall = t0.elapsed().as_secs_f64();
                    let t1 = Instant::now();
                    let train_count = p.train_epoch_macs(&texts)?;
                    (counts, infer_wall, train_count, t1.elapsed().as_secs_f64())
                }
            };
            // Identical shapes give identical per-text counts.
            debug_assert!(infer_counts.windows(2).all(|w| w[0] == w[1]));
            records.push(CostRecord {
                paradigm,
                categories: c,
                n: bc.n,
                m: bc.m,
                phase: Phase::Inference,
                wall_seconds: infer_wall,
                op_count: infer_counts[0],
            });
            records.push(CostRecord {
                paradigm,
                categories: c,
                n: bc.n,
                m: bc.m,
                phase: Phase::TrainEpoch,
                wall_seconds: train_wall,
                op_count: train_count,
            });
        }
    }
    Ok(SweepReport {
        config: BenchConfig {
            encoder: enc,
            ..bc.clone()
        },
        records,
    })
}
