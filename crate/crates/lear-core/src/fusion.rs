//! Semantics-guided fusion of label knowledge into token representations,
//! plus the ablation variants that swap the attention for average pooling or
//! sentence-level similarity.
//!
//! Pipeline per category c: project text and label embeddings into a common
//! space (U1, U2), score every token against every annotation token by dot
//! product, softmax over the annotation axis (no scaling factor unless the
//! option is set), add the attention-weighted label context to the token
//! vector, and squash through `tanh(V·h + b)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamSet};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Token-level semantics-guided attention (the default architecture).
    TokenAttention,
    /// Masked average pooling over annotation tokens, then add.
    AveragePoolingAdd,
    /// Pool each annotation to a single sentence feature first; the
    /// attention degenerates to a similarity against one vector.
    SentenceSimilarity,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-attention" => Ok(FusionMode::TokenAttention),
            "average-pooling-add" => Ok(FusionMode::AveragePoolingAdd),
            "sentence-similarity" => Ok(FusionMode::SentenceSimilarity),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::TokenAttention => "token-attention",
            FusionMode::AveragePoolingAdd => "average-pooling-add",
            FusionMode::SentenceSimilarity => "sentence-similarity",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct FusionOptions {
    pub mode: FusionMode,
    /// Optional 1/sqrt(d) scaling of the attention logits; the architecture
    /// defines the score as a bare dot product, so this defaults to off.
    pub scaled_attention: bool,
    /// Retain attention weights for inspection output.
    pub keep_attention: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            mode: FusionMode::TokenAttention,
            scaled_attention: false,
            keep_attention: false,
        }
    }
}

/// Category-aware token embeddings: one `[n, d]` block per category, plus
/// the attention weights (`[n, m]` per category) when retained.
pub struct FusedRepresentation {
    pub h_hat: Vec<Var>,
    pub attention: Option<Vec<Tensor>>,
}

/// One projected label feature block per category: `[m, d]` for token-level
/// modes, `[1, d]` for sentence-feature mode.
pub struct LabelFeature {
    pub feat: Var,
    pub mask: Vec<bool>,
}

pub fn init_fusion_params(params: &mut ParamSet, d: usize, rng: &mut Rng) {
    params.insert("fusion.u1", rng.xavier(d, d, vec![d, d]));
    params.insert("fusion.u2", rng.xavier(d, d, vec![d, d]));
    params.insert("fusion.v", rng.xavier(d, d, vec![d, d]));
    params.insert("fusion.b", Tensor::zeros(vec![d]));
}

/// Projects token embeddings into the shared feature space (U1, applied per
/// row).
pub fn project_text(g: &mut Graph, b: &mut Binder, params: &ParamSet, h_x: Var) -> Result<Var> {
    let u1 = b.bind(g, params, "fusion.u1");
    g.matmul(h_x, u1)
}

/// Projects per-category label embeddings (U2, applied per row), pooling to a
/// sentence feature first in sentence-similarity mode.
pub fn label_features(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    h_y: &[Var],
    masks: &[Vec<bool>],
    mode: FusionMode,
) -> Result<Vec<LabelFeature>> {
    let u2 = b.bind(g, params, "fusion.u2");
    h_y.iter()
        .zip(masks)
        .map(|(&h, mask)| match mode {
            FusionMode::SentenceSimilarity => {
                let pooled = crate::encoder::sentence_feature(g, h, mask)?;
                let feat = g.matmul(pooled, u2)?;
                Ok(LabelFeature {
                    feat,
                    mask: vec![true],
                })
            }
            _ => {
                let feat = g.matmul(h, u2)?;
                Ok(LabelFeature {
                    feat,
                    mask: mask.clone(),
                })
            }
        })
        .collect()
}

/// Attention of every token over one category's annotation tokens: softmax
/// over the annotation axis of the pairwise dot products, with padded
/// annotation positions masked out.
pub fn attend(
    g: &mut Graph,
    h_x_proj: Var,
    label_feat: Var,
    label_mask: &[bool],
    scaled: bool,
) -> Result<Var> {
    let n = g.value(h_x_proj).rows();
    let d = g.value(h_x_proj).cols();
    let m = g.value(label_feat).rows();
    if g.value(label_feat).cols() != d {
        return Err(Error::Shape {
            op: "attend",
            left: g.value(h_x_proj).shape().to_vec(),
            right: g.value(label_feat).shape().to_vec(),
        });
    }
    if !label_mask.iter().any(|&k| k) {
        return Err(Error::DegenerateSlice { slice: 0 });
    }
    let feat_t = g.transpose(label_feat)?;
    let mut logits = g.matmul(h_x_proj, feat_t)?;
    if scaled {
        logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    }
    let row_mask: Vec<bool> = (0..n * m).map(|i| label_mask[i % m]).collect();
    g.softmax_masked(logits, Some(&row_mask))
}

/// Adds the attention-weighted label context to the projected tokens and
/// applies the output transform: `tanh(V·(h'_x + a·h'_y) + b)`.
pub fn fuse_category(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    h_x_proj: Var,
    label_feat: Var,
    attention: Var,
) -> Result<Var> {
    let context = g.matmul(attention, label_feat)?;
    let summed = g.add(h_x_proj, context)?;
    let v = b.bind(g, params, "fusion.v");
    let bias = b.bind(g, params, "fusion.b");
    let projected = g.matmul(summed, v)?;
    let shifted = g.add_row_broadcast(projected, bias)?;
    Ok(g.tanh(shifted))
}

/// Full fusion over all categories; `feats` comes from [`label_features`]
/// (or from cached constants at inference). Output shape is `[n, d]` per
/// category for every mode.
pub fn fuse(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    h_x: Var,
    feats: &[LabelFeature],
    opts: &FusionOptions,
) -> Result<FusedRepresentation> {
    let h_x_proj = project_text(g, b, params, h_x)?;
    let n = g.value(h_x_proj).rows();
    let mut h_hat = Vec::with_capacity(feats.len());
    let mut kept = opts.keep_attention.then(Vec::new);

    for lf in feats {
        let fused = match opts.mode {
            FusionMode::TokenAttention | FusionMode::SentenceSimilarity => {
                let attn = attend(g, h_x_proj, lf.feat, &lf.mask, opts.scaled_attention)?;
                if let Some(k) = kept.as_mut() {
                    k.push(g.value(attn).clone());
                }
                fuse_category(g, b, params, h_x_proj, lf.feat, attn)?
            }
            FusionMode::AveragePoolingAdd => {
                let valid = lf.mask.iter().filter(|&&k| k).count();
                if valid == 0 {
                    return Err(Error::DegenerateSlice { slice: 0 });
                }
                let m = lf.mask.len();
                // Uniform weights over valid annotation tokens for every row.
                let w: Vec<f64> = (0..n * m)
                    .map(|i| if lf.mask[i % m] { 1.0 / valid as f64 } else { 0.0 })
                    .collect();
                let weights = g.constant(Tensor::from_vec(vec![n, m], w)?);
                if let Some(k) = kept.as_mut() {
                    k.push(g.value(weights).clone());
                }
                fuse_category(g, b, params, h_x_proj, lf.feat, weights)?
            }
        };
        h_hat.push(fused);
    }
    Ok(FusedRepresentation {
        h_hat,
        attention: kept,
    })
}
