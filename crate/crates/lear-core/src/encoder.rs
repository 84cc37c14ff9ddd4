//! Tokenizer, vocabulary, and the small transformer encoder whose weights
//! are shared between the text branch and the label-annotation branch.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamSet};
use crate::tensor::{Rng, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Separator between annotation and text in the joint-encoding pipeline.
pub const SEP_TOKEN: &str = "<sep>";

// ---------------------------------------------------------------------------
// vocabulary & tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        v.push(SEP_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Builds a vocabulary from raw texts in first-seen order (min frequency
    /// one). Ids 0/1/2 are always `<pad>`/`<unk>`/`<sep>`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::with_reserved();
        for text in texts {
            for token in split_tokens(text) {
                v.push(&token);
            }
        }
        v
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in std::io::BufReader::new(f).lines() {
            v.push(line?.trim_end());
        }
        if v.tokens.len() < 2 || v.tokens[PAD_ID] != PAD_TOKEN || v.tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::data(
                "vocab file must start with <pad> and <unk> lines",
            ));
        }
        Ok(v)
    }
}

/// Lowercases and splits on whitespace and punctuation boundaries; each
/// punctuation character is its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub raw: Vec<String>,
    pub truncated: bool,
}

impl TokenizedText {
    /// True (unpadded) length.
    pub fn true_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Extends with pad tokens up to `len`; mask is false on the padding.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.mask.push(false);
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedText> {
    let mut raw = split_tokens(text);
    if raw.is_empty() {
        return Err(Error::EmptyInput(format!("no tokens in text {text:?}")));
    }
    let truncated = raw.len() > max_len;
    if truncated {
        raw.truncate(max_len);
    }
    let ids: Vec<usize> = raw.iter().map(|t| vocab.id(t)).collect();
    let mask = vec![true; ids.len()];
    Ok(TokenizedText {
        ids,
        mask,
        raw,
        truncated,
    })
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("layers/max_seq_len/ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: 128,
        }
    }
}

/// Seeded dropout context; absent or rate 0 means evaluation mode.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut Rng,
    pub rate: f64,
}

pub(crate) fn apply_dropout(
    g: &mut Graph,
    x: Var,
    ctx: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let Some(ctx) = ctx.as_deref_mut() else {
        return Ok(x);
    };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.rate;
    let mask: Vec<f64> = (0..g.value(x).numel())
        .map(|_| if ctx.rng.chance(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    g.mul_const(x, mask)
}

/// Registers all encoder parameters. Projection and attention matrices are
/// Glorot-uniform, embeddings N(0, 0.02), biases zero, layer-norm gain one.
pub fn init_encoder_params(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut Rng) {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    params.insert("encoder.tok_emb", rng.normal_tensor(vec![cfg.vocab_size, d], 0.0, 0.02));
    params.insert("encoder.pos_emb", rng.normal_tensor(vec![cfg.max_seq_len, d], 0.0, 0.02));
    for l in 0..cfg.layers {
        let p = format!("encoder.l{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{p}.attn.{name}"), rng.xavier(d, d, vec![d, d]));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{p}.attn.{name}"), Tensor::zeros(vec![d]));
        }
        params.insert(format!("{p}.ln1.gamma"), Tensor::filled(vec![d], 1.0));
        params.insert(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]));
        params.insert(format!("{p}.ffn.w1"), rng.xavier(d, f, vec![d, f]));
        params.insert(format!("{p}.ffn.b1"), Tensor::zeros(vec![f]));
        params.insert(format!("{p}.ffn.w2"), rng.xavier(f, d, vec![f, d]));
        params.insert(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]));
        params.insert(format!("{p}.ln2.gamma"), Tensor::filled(vec![d], 1.0));
        params.insert(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]));
    }
}

/// Runs the encoder over one token sequence: learned token + position
/// embeddings, then `layers` blocks of masked multi-head self-attention and
/// a feed-forward network, each with residual connection and layer norm.
/// Padded positions are masked out as attention keys, so appending padding
/// never changes the embeddings of real tokens.
pub fn encode(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    cfg: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
    mut dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::EmptyInput("encode of an empty sequence".into()));
    }
    if n != mask.len() {
        return Err(Error::Shape {
            op: "encode",
            left: vec![n],
            right: vec![mask.len()],
        });
    }
    if n > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {n} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let tok = b.bind(g, params, "encoder.tok_emb");
    let pos = b.bind(g, params, "encoder.pos_emb");
    let e_tok = g.embedding(tok, ids)?;
    let e_pos = g.slice_rows(pos, 0, n)?;
    let mut h = g.add(e_tok, e_pos)?;
    h = apply_dropout(g, h, &mut dropout)?;

    // Key mask: every query row may attend to unpadded positions only.
    let key_mask: Vec<bool> = (0..n * n).map(|i| mask[i % n]).collect();

    for l in 0..cfg.layers {
        h = encoder_layer(g, b, params, cfg, h, &key_mask, l, &mut dropout)?;
    }
    Ok(h)
}

#[allow(clippy::too_many_arguments)]
fn encoder_layer(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    cfg: &EncoderConfig,
    x: Var,
    key_mask: &[bool],
    layer: usize,
    dropout: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let p = format!("encoder.l{layer}");
    let d = cfg.d_model;
    let dh = d / cfg.heads;

    let mut proj = |g: &mut Graph, w: &str, bias: &str| -> Result<Var> {
        let w = b.bind(g, params, &format!("{p}.attn.{w}"));
        let bias = b.bind(g, params, &format!("{p}.attn.{bias}"));
        let y = g.matmul(x, w)?;
        g.add_row_broadcast(y, bias)
    };
    let q = proj(g, "wq", "bq")?;
    let k = proj(g, "wk", "bk")?;
    let v = proj(g, "wv", "bv")?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for hi in 0..cfg.heads {
        let qh = g.slice_cols(q, hi * dh, dh)?;
        let kh = g.slice_cols(k, hi * dh, dh)?;
        let vh = g.slice_cols(v, hi * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = g.softmax_masked(scores, Some(key_mask))?;
        heads.push(g.matmul(probs, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    let wo = b.bind(g, params, &format!("{p}.attn.wo"));
    let bo = b.bind(g, params, &format!("{p}.attn.bo"));
    let attn = g.matmul(ctx, wo)?;
    let attn = g.add_row_broadcast(attn, bo)?;

    let res1 = g.add(x, attn)?;
    let g1 = b.bind(g, params, &format!("{p}.ln1.gamma"));
    let b1 = b.bind(g, params, &format!("{p}.ln1.beta"));
    let h1 = g.layer_norm(res1, g1, b1, 1e-5)?;

    let w1 = b.bind(g, params, &format!("{p}.ffn.w1"));
    let bf1 = b.bind(g, params, &format!("{p}.ffn.b1"));
    let w2 = b.bind(g, params, &format!("{p}.ffn.w2"));
    let bf2 = b.bind(g, params, &format!("{p}.ffn.b2"));
    let f = g.matmul(h1, w1)?;
    let f = g.add_row_broadcast(f, bf1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w2)?;
    let f = g.add_row_broadcast(f, bf2)?;
    let f = apply_dropout(g, f, dropout)?;

    let res2 = g.add(h1, f)?;
    let g2 = b.bind(g, params, &format!("{p}.ln2.gamma"));
    let b2 = b.bind(g, params, &format!("{p}.ln2.beta"));
    g.layer_norm(res2, g2, b2, 1e-5)
}

/// One tokenized annotation (or name) per category, all padded to a common
/// length.
#[derive(Debug, Clone)]
pub struct LabelTokens {
    pub names: Vec<String>,
    pub ids: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
    pub raw: Vec<Vec<String>>,
    pub width: usize,
}

impl LabelTokens {
    pub fn from_texts(names: Vec<String>, texts: &[String], vocab: &Vocab, max_len: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::data("label set must contain at least one category"));
        }
        let mut toks = Vec::with_capacity(texts.len());
        for text in texts {
            toks.push(tokenize(text, vocab, max_len)?);
        }
        let width = toks.iter().map(|t| t.ids.len()).max().unwrap_or(0);
        for t in &mut toks {
            t.pad_to(width);
        }
        Ok(LabelTokens {
            names,
            ids: toks.iter().map(|t| t.ids.clone()).collect(),
            masks: toks.iter().map(|t| t.mask.clone()).collect(),
            raw: toks.iter().map(|t| t.raw.clone()).collect(),
            width,
        })
    }

    pub fn categories(&self) -> usize {
        self.names.len()
    }
}

/// Applies the identical encoder parameters to each category's annotation
/// independently; the weight sharing with the text branch comes from binding
/// the same parameter names.
pub fn encode_labels(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    cfg: &EncoderConfig,
    labels: &LabelTokens,
    mut dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Vec<Var>> {
    labels
        .ids
        .iter()
        .zip(&labels.masks)
        .map(|(ids, mask)| encode(g, b, params, cfg, ids, mask, dropout.as_deref_mut()))
        .collect()
}

/// Label-annotation embeddings computed once and reused for every inference
/// call while the parameters stay frozen.
pub struct LabelCache {
    version: u64,
    h_y: Vec<Tensor>,
}

impl LabelCache {
    /// Encodes all label annotations once (evaluation mode, no dropout).
    pub fn build(
        params: &ParamSet,
        cfg: &EncoderConfig,
        labels: &LabelTokens,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let vars = encode_labels(&mut g, &mut b, params, cfg, labels, None)?;
        Ok(LabelCache {
            version: params.version(),
            h_y: vars.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Returns the cached embeddings, or a stale-cache error if any
    /// parameter changed since the cache was built.
    pub fn get(&self, params: &ParamSet) -> Result<&[Tensor]> {
        if params.version() != self.version {
            return Err(Error::StaleCache {
                cached: self.version,
                current: params.version(),
            });
        }
        Ok(&self.h_y)
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Mean of the unmasked rows: an `[m, d]` matrix pools to `[1, d]`.
pub fn sentence_feature(g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
    let (rows, cols) = {
        let t = g.value(h);
        (t.rows(), t.cols())
    };
    if mask.len() != rows {
        return Err(Error::Shape {
            op: "sentence_feature",
            left: vec![rows, cols],
            right: vec![mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::DegenerateSlice { slice: 0 });
    }
    let keep: Vec<f64> = (0..rows * cols)
        .map(|i| if mask[i / cols] { 1.0 } else { 0.0 })
        .collect();
    let kept = g.mul_const(h, keep)?;
    let t = g.transpose(kept)?;
    let sums = g.row_sum(t);
    let mean = g.scale(sums, 1.0 / count as f64)?;
    g.reshape(mean, vec![1, cols])
}
