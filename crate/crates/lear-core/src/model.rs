//! Full model assembly: shared encoder, label branch, fusion, scoring heads,
//! and the inference-side predictor with cached label encodings.

use std::cell::Cell;

use crate::config::{Config, LabelEncoderKind, LabelSource, ModelConfig};
use crate::data::{derive_gold, LabelFile, Record};
use crate::decoding::{decode_spans, DecodeStrategy, SpanPrediction};
use crate::encoder::{
    self, encode, encode_labels, tokenize, DropoutCtx, LabelTokens, TokenizedText, Vocab,
};
use crate::error::{Error, Result};
use crate::fusion::{self, label_features, FusedRepresentation, LabelFeature};
use crate::graph::{Graph, Var};
use crate::loss::{
    boundary_loss, match_loss, total_loss, GoldLabels, LossWeights, SpanMode,
};
use crate::params::{Binder, ParamSet};
use crate::scoring::{
    collect_boundary_scores, score_boundaries, score_pairs, BoundaryScores, BoundaryVars,
    PairScores,
};
use crate::tensor::{Rng, Tensor};

#[derive(Clone)]
pub struct LearModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub categories: usize,
}

impl LearModel {
    /// Initializes all parameters in a fixed order so a seed fully
    /// determines the weights.
    pub fn new(config: ModelConfig, categories: usize, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if categories == 0 {
            return Err(Error::Config("model needs at least one category".into()));
        }
        if config.encoder.vocab_size < 3 {
            return Err(Error::Config("vocabulary not set on encoder config".into()));
        }
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        encoder::init_encoder_params(&mut params, &config.encoder, &mut rng);
        fusion::init_fusion_params(&mut params, config.encoder.d_model, &mut rng);
        crate::scoring::init_scoring_params(
            &mut params,
            config.encoder.d_model,
            categories,
            config.pair_per_category,
            &mut rng,
        );
        if config.label_encoder == LabelEncoderKind::StaticEmbedding {
            params.insert(
                "label_embed.table",
                rng.normal_tensor(
                    vec![config.encoder.vocab_size, config.encoder.d_model],
                    0.0,
                    0.02,
                ),
            );
        }
        Ok(LearModel {
            config,
            params,
            categories,
        })
    }

    /// Rebuilds the parameter skeleton and fills it from a checkpoint.
    pub fn from_checkpoint(
        config: ModelConfig,
        categories: usize,
        path: &std::path::Path,
    ) -> Result<Self> {
        let mut model = LearModel::new(config, categories, 0)?;
        crate::checkpoint::load_into(&mut model.params, path)?;
        Ok(model)
    }

    /// Label-branch embeddings per category: the shared encoder, or the
    /// static embedding table in the LEL-style variant.
    pub fn label_branch(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        labels: &LabelTokens,
        mut dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Vec<Var>> {
        match self.config.label_encoder {
            LabelEncoderKind::Shared => encode_labels(
                g,
                b,
                &self.params,
                &self.config.encoder,
                labels,
                dropout.as_deref_mut(),
            ),
            LabelEncoderKind::StaticEmbedding => {
                let table = b.bind(g, &self.params, "label_embed.table");
                labels
                    .ids
                    .iter()
                    .map(|ids| g.embedding(table, ids))
                    .collect()
            }
        }
    }

    /// Projected label features ready for fusion (fresh, in-graph: gradients
    /// flow into the label branch).
    pub fn label_features_fresh(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        labels: &LabelTokens,
        mut dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Vec<LabelFeature>> {
        let h_y = self.label_branch(g, b, labels, dropout.as_deref_mut())?;
        label_features(
            g,
            b,
            &self.params,
            &h_y,
            &labels.masks,
            self.config.fusion_mode,
        )
    }

    /// Encoder + fusion + heads over one (possibly padded) token sequence.
    pub fn forward_text(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        ids: &[usize],
        mask: &[bool],
        feats: &[LabelFeature],
        want_pairs: bool,
        keep_attention: bool,
        mut dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<TextVars> {
        let h_x = encode(
            g,
            b,
            &self.params,
            &self.config.encoder,
            ids,
            mask,
            dropout.as_deref_mut(),
        )?;
        let fused: FusedRepresentation = fusion::fuse(
            g,
            b,
            &self.params,
            h_x,
            feats,
            &self.config.fusion_options(keep_attention),
        )?;
        let boundary = score_boundaries(g, b, &self.params, &fused.h_hat)?;
        let pairs = if want_pairs {
            Some(score_pairs(g, b, &self.params, &fused.h_hat)?)
        } else {
            None
        };
        Ok(TextVars {
            h_hat: fused.h_hat,
            attention: fused.attention,
            boundary,
            pairs,
        })
    }

    /// Mean loss over a prepared batch. Label annotations are encoded once
    /// per batch and shared by every text.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        batch: &[PreparedText],
        labels: &LabelTokens,
        mode: SpanMode,
        weights: &LossWeights,
        mut dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<(Var, LossParts)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty training batch".into()));
        }
        let feats = self.label_features_fresh(g, b, labels, dropout.as_deref_mut())?;
        let mut total: Option<Var> = None;
        let mut parts = LossParts::default();
        for text in batch {
            let tv = self.forward_text(
                g,
                b,
                &text.ids,
                &text.mask,
                &feats,
                mode == SpanMode::Nested,
                false,
                dropout.as_deref_mut(),
            )?;
            let (l_s, l_e) = boundary_loss(g, &tv.boundary, &text.gold, &text.mask)?;
            let l_match = match mode {
                SpanMode::Nested => Some(match_loss(
                    g,
                    tv.pairs.as_ref().expect("pairs computed in nested mode"),
                    &text.gold,
                    self.config.max_span_len,
                    text.n_true,
                )?),
                SpanMode::Flat => None,
            };
            let l = total_loss(g, mode, l_s, l_e, l_match, weights)?;
            parts.l_s += g.data(l_s)[0];
            parts.l_e += g.data(l_e)[0];
            parts.l_match += l_match.map_or(0.0, |v| g.data(v)[0]);
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let scaled = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        let k = batch.len() as f64;
        parts.l_s /= k;
        parts.l_e /= k;
        parts.l_match /= k;
        parts.total = g.data(scaled)[0];
        if !parts.total.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss {}",
                parts.total
            )));
        }
        Ok((scaled, parts))
    }
}

pub struct TextVars {
    pub h_hat: Vec<Var>,
    pub attention: Option<Vec<Tensor>>,
    pub boundary: BoundaryVars,
    pub pairs: Option<Vec<Var>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub l_s: f64,
    pub l_e: f64,
    pub l_match: f64,
    pub total: f64,
}

/// One tokenized, padded training text with its gold indicators.
pub struct PreparedText {
    pub text_id: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub n_true: usize,
    pub gold: GoldLabels,
}

/// Tokenizes a batch, pads to the in-batch maximum length, and derives gold
/// indicators at the padded length. Spans lost to truncation are dropped
/// from supervision.
pub fn prepare_batch(
    records: &[&Record],
    vocab: &Vocab,
    labels: &LabelFile,
    mode: SpanMode,
    max_seq_len: usize,
) -> Result<Vec<PreparedText>> {
    let mut tokenized: Vec<(usize, TokenizedText)> = Vec::with_capacity(records.len());
    for r in records {
        tokenized.push((r.text_id, tokenize(&r.text, vocab, max_seq_len)?));
    }
    let width = tokenized
        .iter()
        .map(|(_, t)| t.ids.len())
        .max()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(records.len());
    for ((text_id, mut tok), record) in tokenized.into_iter().zip(records) {
        let n_true = tok.ids.len();
        tok.pad_to(width);
        let mut record = (*record).clone();
        record.spans.retain(|s| s.end < n_true);
        let gold = derive_gold(&record, labels, width, mode);
        out.push(PreparedText {
            text_id,
            ids: tok.ids,
            mask: tok.mask,
            n_true,
            gold,
        });
    }
    Ok(out)
}

/// Builds the label-branch token sequences according to the label source.
pub fn make_label_tokens(
    labels: &LabelFile,
    source: LabelSource,
    vocab: &Vocab,
    max_len: usize,
) -> Result<LabelTokens> {
    let texts: Vec<String> = labels
        .entries
        .iter()
        .map(|e| match source {
            LabelSource::Annotation => e.annotation.clone(),
            LabelSource::Name => e.category.clone(),
        })
        .collect();
    LabelTokens::from_texts(labels.names(), &texts, vocab, max_len)
}

/// Frozen-parameter inference engine. Label annotations are encoded and
/// projected once at construction; every subsequent prediction reuses the
/// cached features. Any parameter update invalidates the cache.
pub struct Predictor {
    pub model: LearModel,
    pub vocab: Vocab,
    pub labels: LabelFile,
    pub label_tokens: LabelTokens,
    cache_version: u64,
    cached_feats: Vec<(Tensor, Vec<bool>)>,
    cached_h_y: Vec<Tensor>,
    label_encodings: Cell<u64>,
    macs: Cell<u64>,
}

pub struct Prediction {
    pub tokens: TokenizedText,
    pub spans: Vec<SpanPrediction>,
    pub boundary: BoundaryScores,
    pub pairs: Option<PairScores>,
}

impl Predictor {
    pub fn new(model: LearModel, vocab: Vocab, labels: LabelFile) -> Result<Self> {
        let label_tokens = make_label_tokens(
            &labels,
            model.config.label_source,
            &vocab,
            model.config.encoder.max_seq_len,
        )?;
        let mut p = Predictor {
            model,
            vocab,
            labels,
            label_tokens,
            cache_version: 0,
            cached_feats: Vec::new(),
            cached_h_y: Vec::new(),
            label_encodings: Cell::new(0),
            macs: Cell::new(0),
        };
        p.rebuild_cache()?;
        Ok(p)
    }

    fn rebuild_cache(&mut self) -> Result<()> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let feats = self
            .model
            .label_features_fresh(&mut g, &mut b, &self.label_tokens, None)?;
        let h_y = self
            .model
            .label_branch(&mut g, &mut b, &self.label_tokens, None)?;
        self.cached_feats = feats
            .iter()
            .map(|lf| (g.value(lf.feat).clone(), lf.mask.clone()))
            .collect();
        self.cached_h_y = h_y.iter().map(|&v| g.value(v).clone()).collect();
        self.cache_version = self.model.params.version();
        self.label_encodings.set(self.label_encodings.get() + 1);
        Ok(())
    }

    fn check_cache(&self) -> Result<()> {
        if self.model.params.version() != self.cache_version {
            return Err(Error::StaleCache {
                cached: self.cache_version,
                current: self.model.params.version(),
            });
        }
        Ok(())
    }

    /// Number of label-encoding passes performed so far (instrumentation).
    pub fn label_encoding_count(&self) -> u64 {
        self.label_encodings.get()
    }

    /// Multiply-accumulates spent in per-text graphs so far.
    pub fn mac_count(&self) -> u64 {
        self.macs.get()
    }

    pub fn reset_mac_count(&self) {
        self.macs.set(0);
    }

    fn cached_features_in(&self, g: &mut Graph) -> Vec<LabelFeature> {
        self.cached_feats
            .iter()
            .map(|(t, mask)| LabelFeature {
                feat: g.constant(t.clone()),
                mask: mask.clone(),
            })
            .collect()
    }

    /// Predicts spans for one text using the cached label features.
    pub fn predict(
        &self,
        text: &str,
        strategy: DecodeStrategy,
        threshold: f64,
    ) -> Result<Prediction> {
        self.check_cache()?;
        let tokens = tokenize(text, &self.vocab, self.model.config.encoder.max_seq_len)?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let feats = self.cached_features_in(&mut g);
        self.run_decode(&mut g, &mut b, tokens, &feats, strategy, threshold)
    }

    /// Same prediction path but re-encoding the label annotations inside the
    /// per-text graph (for cache-invariance checks and instrumentation).
    pub fn predict_uncached(
        &self,
        text: &str,
        strategy: DecodeStrategy,
        threshold: f64,
    ) -> Result<Prediction> {
        self.check_cache()?;
        let tokens = tokenize(text, &self.vocab, self.model.config.encoder.max_seq_len)?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let feats = self
            .model
            .label_features_fresh(&mut g, &mut b, &self.label_tokens, None)?;
        self.label_encodings.set(self.label_encodings.get() + 1);
        self.run_decode(&mut g, &mut b, tokens, &feats, strategy, threshold)
    }

    fn run_decode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        tokens: TokenizedText,
        feats: &[LabelFeature],
        strategy: DecodeStrategy,
        threshold: f64,
    ) -> Result<Prediction> {
        let want_pairs = strategy == DecodeStrategy::Nested;
        let tv = self.model.forward_text(
            g,
            b,
            &tokens.ids,
            &tokens.mask,
            feats,
            want_pairs,
            false,
            None,
        )?;
        let boundary = collect_boundary_scores(g, &tv.boundary);
        let pairs = tv
            .pairs
            .as_ref()
            .map(|p| PairScores::collect(g, p, self.model.config.max_span_len));
        let spans = decode_spans(
            &boundary,
            pairs.as_ref(),
            &self.labels.names(),
            strategy,
            threshold,
        )?;
        self.macs.set(self.macs.get() + g.macs());
        Ok(Prediction {
            tokens,
            spans,
            boundary,
            pairs,
        })
    }

    /// Per-token attention weights over each category's annotation tokens:
    /// rows of (token, category, annotation_token, weight).
    pub fn inspect_attention(
        &self,
        text: &str,
    ) -> Result<Vec<(String, String, String, f64)>> {
        self.check_cache()?;
        let tokens = tokenize(text, &self.vocab, self.model.config.encoder.max_seq_len)?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let feats = self.cached_features_in(&mut g);
        let tv = self.model.forward_text(
            &mut g,
            &mut b,
            &tokens.ids,
            &tokens.mask,
            &feats,
            false,
            true,
            None,
        )?;
        let attention = tv
            .attention
            .ok_or_else(|| Error::Contract("attention retention was not enabled".into()))?;
        let mut rows = Vec::new();
        for (c, att) in attention.iter().enumerate() {
            let m = att.cols();
            let ann_tokens = &self.label_tokens.raw[c];
            for (i, tok) in tokens.raw.iter().enumerate() {
                for j in 0..m {
                    if !self.label_tokens.masks[c].get(j).copied().unwrap_or(false)
                        && self.model.config.fusion_mode != crate::fusion::FusionMode::SentenceSimilarity
                    {
                        continue;
                    }
                    let ann = if self.model.config.fusion_mode
                        == crate::fusion::FusionMode::SentenceSimilarity
                    {
                        "<sentence>".to_string()
                    } else {
                        ann_tokens.get(j).cloned().unwrap_or_default()
                    };
                    rows.push((
                        tok.clone(),
                        self.labels.entries[c].category.clone(),
                        ann,
                        att.at2(i, j),
                    ));
                }
            }
        }
        Ok(rows)
    }
}

/// Convenience used by training, evaluation and the CLI: predict spans for a
/// whole corpus, returning `(text_id, span keys)` pairs.
pub fn predict_corpus(
    predictor: &Predictor,
    records: &[Record],
    strategy: DecodeStrategy,
    threshold: f64,
) -> Result<Vec<(usize, Vec<crate::metrics::SpanKey>)>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let pred = predictor.predict(&r.text, strategy, threshold)?;
        out.push((
            r.text_id,
            pred.spans
                .iter()
                .map(|s| (s.start, s.end, s.category.clone()))
                .collect(),
        ));
    }
    Ok(out)
}

/// Builds a ready-to-train model sized to a vocabulary and label set.
pub fn build_model(cfg: &Config, vocab: &Vocab, labels: &LabelFile) -> Result<LearModel> {
    let mut mc = cfg.model.clone();
    mc.encoder.vocab_size = vocab.len();
    LearModel::new(mc, labels.categories(), cfg.train.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.encoder.d_model = 16;
        cfg.model.encoder.layers = 1;
        cfg.model.encoder.heads = 2;
        cfg.model.encoder.ffn_mult = 2;
        cfg.model.encoder.max_seq_len = 32;
        cfg
    }

    fn tiny_world() -> (Config, LearModel, Vocab, LabelFile, crate::data::Corpus) {
        let (train, _, _, labels) = synth_corpus(&SynthSpec::default(), 5).unwrap();
        let cfg = tiny_config();
        let vocab = crate::data::build_vocab(&[&train], &labels);
        let model = build_model(&cfg, &vocab, &labels).unwrap();
        (cfg, model, vocab, labels, train)
    }

    #[test]
    fn batch_loss_runs_and_is_finite() {
        let (cfg, model, vocab, labels, train) = tiny_world();
        let refs: Vec<&Record> = train.records.iter().take(3).collect();
        let batch = prepare_batch(
            &refs,
            &vocab,
            &labels,
            SpanMode::Flat,
            cfg.model.encoder.max_seq_len,
        )
        .unwrap();
        let label_tokens =
            make_label_tokens(&labels, LabelSource::Annotation, &vocab, 32).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new();
        let (loss, parts) = model
            .batch_loss(
                &mut g,
                &mut b,
                &batch,
                &label_tokens,
                SpanMode::Flat,
                &LossWeights::default(),
                None,
            )
            .unwrap();
        assert!(g.data(loss)[0].is_finite());
        assert!(parts.l_s > 0.0 && parts.l_e > 0.0);
        assert_eq!(parts.l_match, 0.0);

        g.backward(loss).unwrap();
        let mut model = model;
        b.harvest(&g, &mut model.params).unwrap();
        // Shared encoder: gradient flows into the encoder from both branches.
        let grad = model.params.get("encoder.tok_emb").grad.as_ref().unwrap();
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn static_embedding_label_branch_leaves_encoder_untouched() {
        // Build a loss that depends on the label branch only: fuse constant
        // text features with encoded labels, so any encoder gradient must
        // come through the label branch.
        let (train, _, _, labels) = synth_corpus(&SynthSpec::default(), 6).unwrap();
        let vocab = crate::data::build_vocab(&[&train], &labels);
        let mut cfg = tiny_config();
        let mut encoder_grad_norm = |kind: LabelEncoderKind| -> f64 {
            cfg.model.label_encoder = kind;
            let mut model = build_model(&cfg, &vocab, &labels).unwrap();
            let label_tokens =
                make_label_tokens(&labels, LabelSource::Annotation, &vocab, 32).unwrap();
            let mut g = Graph::new();
            let mut b = Binder::new();
            let feats = model
                .label_features_fresh(&mut g, &mut b, &label_tokens, None)
                .unwrap();
            let d = cfg.model.encoder.d_model;
            let hx = g.constant(Rng::new(9).uniform_tensor(vec![4, d], -1.0, 1.0));
            let fused = crate::fusion::fuse(
                &mut g,
                &mut b,
                &model.params,
                hx,
                &feats,
                &cfg.model.fusion_options(false),
            )
            .unwrap();
            let mut acc = g.sum_all(fused.h_hat[0]);
            for &h in &fused.h_hat[1..] {
                let s = g.sum_all(h);
                acc = g.add(acc, s).unwrap();
            }
            g.backward(acc).unwrap();
            b.harvest(&g, &mut model.params).unwrap();
            model
                .params
                .iter()
                .filter(|(n, _)| n.starts_with("encoder."))
                .flat_map(|(_, t)| t.grad.clone().unwrap_or_default())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        assert!(encoder_grad_norm(LabelEncoderKind::Shared) > 1e-8);
        assert_eq!(encoder_grad_norm(LabelEncoderKind::StaticEmbedding), 0.0);
    }

    #[test]
    fn predictor_cached_equals_uncached_bitwise() {
        let (cfg, model, vocab, labels, train) = tiny_world();
        let _ = cfg;
        let predictor = Predictor::new(model, vocab, labels).unwrap();
        for r in train.records.iter().take(5) {
            let a = predictor
                .predict(&r.text, DecodeStrategy::Heuristic, 0.5)
                .unwrap();
            let b = predictor
                .predict_uncached(&r.text, DecodeStrategy::Heuristic, 0.5)
                .unwrap();
            assert_eq!(a.boundary.start.data(), b.boundary.start.data());
            assert_eq!(a.boundary.end.data(), b.boundary.end.data());
            assert_eq!(a.spans, b.spans);
        }
    }

    #[test]
    fn predictor_encodes_labels_once_for_many_texts() {
        let (_, model, vocab, labels, train) = tiny_world();
        let predictor = Predictor::new(model, vocab, labels).unwrap();
        assert_eq!(predictor.label_encoding_count(), 1);
        for r in train.records.iter().cycle().take(100) {
            predictor
                .predict(&r.text, DecodeStrategy::Heuristic, 0.5)
                .unwrap();
        }
        assert_eq!(predictor.label_encoding_count(), 1);
    }

    #[test]
    fn stale_cache_is_detected_after_update() {
        let (_, model, vocab, labels, train) = tiny_world();
        let mut predictor = Predictor::new(model, vocab, labels).unwrap();
        predictor.model.params.get_mut("fusion.u1").data_mut()[0] += 0.5;
        let err = match predictor.predict(&train.records[0].text, DecodeStrategy::Heuristic, 0.5)
        {
            Err(e) => e,
            Ok(_) => panic!("expected stale-cache error"),
        };
        assert!(matches!(err, Error::StaleCache { .. }));
        predictor.rebuild_cache().unwrap();
        assert!(predictor
            .predict(&train.records[0].text, DecodeStrategy::Heuristic, 0.5)
            .is_ok());
    }

    #[test]
    fn attention_inspection_reports_unmasked_rows() {
        let (_, model, vocab, labels, train) = tiny_world();
        let predictor = Predictor::new(model, vocab, labels).unwrap();
        let rows = predictor.inspect_attention(&train.records[0].text).unwrap();
        assert!(!rows.is_empty());
        // weights over each (token, category) sum to ~1
        let first_tok = rows[0].0.clone();
        let first_cat = rows[0].1.clone();
        let sum: f64 = rows
            .iter()
            .filter(|(t, c, _, _)| *t == first_tok && *c == first_cat)
            .map(|(_, _, _, w)| w)
            .sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nested_prediction_produces_pair_scores() {
        let spec = SynthSpec {
            mode: SpanMode::Nested,
            nested_spans: true,
            ..Default::default()
        };
        let (train, _, _, labels) = synth_corpus(&spec, 8).unwrap();
        let mut cfg = tiny_config();
        cfg.train.mode = SpanMode::Nested;
        cfg.train.decode = DecodeStrategy::Nested;
        let vocab = crate::data::build_vocab(&[&train], &labels);
        let model = build_model(&cfg, &vocab, &labels).unwrap();
        let predictor = Predictor::new(model, vocab, labels).unwrap();
        let pred = predictor
            .predict(&train.records[0].text, DecodeStrategy::Nested, 0.5)
            .unwrap();
        assert!(pred.pairs.is_some());
    }
}
