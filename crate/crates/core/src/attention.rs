//! Scaled dot-product attention, multi-head wrapping and the decoupled
//! text+image cross-attention, all exposing their attention maps.
//!
//! Maps are always materialized (never fused away) because guidance and
//! inspection both consume them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which attention site a map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Text,
    Image,
    #[serde(rename = "self")]
    SelfAttn,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Text => "text",
            Branch::Image => "image",
            Branch::SelfAttn => "self",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Q, K, V triple for one attention call. `q` and `k` share the head
/// dimension `d`; `k` and `v` share the key count.
#[derive(Debug, Clone)]
pub struct AttentionOperands {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub head_dim: usize,
}

impl AttentionOperands {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        if q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() {
            return Err(Error::ShapeMismatch {
                op: "AttentionOperands (q/k head dim)",
                left: q.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        if v.rank() != 2 || k.rows() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "AttentionOperands (k/v key count)",
                left: k.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let head_dim = q.cols();
        Ok(AttentionOperands { q, k, v, head_dim })
    }
}

/// The row-stochastic softmax weight matrix of one attention site,
/// stacked per head, with its provenance.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// Weights, shape `[heads, Nq, Nkv]`; every (head, query) row sums
    /// to 1 within 1e-6 and every entry lies in [0, 1].
    pub weights: Tensor,
    pub layer_id: String,
    pub step: usize,
    pub branch: Branch,
}

impl AttentionMap {
    pub fn new(weights: Tensor, layer_id: String, step: usize, branch: Branch) -> Result<Self> {
        if weights.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "AttentionMap",
                shape: weights.shape().to_vec(),
                reason: "expects [heads, Nq, Nkv]".into(),
            });
        }
        let nkv = weights.shape()[2];
        for (r, row) in weights.data().chunks(nkv).enumerate() {
            let mut sum = 0.0f64;
            for &w in row {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::logic(format!(
                        "attention map entry {w} outside [0,1] (row {r})"
                    )));
                }
                sum += w as f64;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::logic(format!(
                    "attention map row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AttentionMap {
            weights,
            layer_id,
            step,
            branch,
        })
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// The `[Nq, Nkv]` weight matrix of one head.
    pub fn head(&self, h: usize) -> Result<Tensor> {
        self.weights.index_axis0(h)
    }
}

/// Projection set for plain (single-context) multi-head attention.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
}

/// Projection set for decoupled cross-attention: one shared query
/// projection, separate text and image K/V projections mapping to the
/// same head dimension, and the image-branch weight lambda.
#[derive(Debug, Clone)]
pub struct DecoupledWeights {
    pub w_q: Tensor,
    pub w_k_text: Tensor,
    pub w_v_text: Tensor,
    pub w_k_image: Tensor,
    pub w_v_image: Tensor,
    pub w_out: Tensor,
    pub lambda_image: f32,
    pub heads: usize,
}

/// softmax(QK^T / sqrt(d)) and its product with V for a single head.
/// Returns `(output [Nq, dv], map [Nq, Nkv])`.
pub fn scaled_dot_attention(ops: &AttentionOperands) -> Result<(Tensor, Tensor)> {
    let map = attention_map_2d(&ops.q, &ops.k)?;
    let out = map.matmul(&ops.v)?;
    Ok((out, map))
}

/// The row-stochastic map for already-projected single-head operands.
fn attention_map_2d(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.cols();
    let scale = 1.0 / (d as f32).sqrt();
    let logits = q.matmul(&k.transpose()?)?.scale(scale)?;
    Ok(logits.softmax_rows())
}

/// Splits projected Q and K into `heads` column blocks and computes the
/// per-head maps.
pub(crate) fn head_maps(q: &Tensor, k: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let dim = q.cols();
    if heads == 0 || dim % heads != 0 || k.cols() != dim {
        return Err(Error::InvalidShape {
            op: "head_maps",
            shape: q.shape().to_vec(),
            reason: format!("model dim {dim} not divisible into {heads} heads"),
        });
    }
    let dh = dim / heads;
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.col_block(h * dh, dh)?;
        let kh = k.col_block(h * dh, dh)?;
        maps.push(attention_map_2d(&qh, &kh)?);
    }
    Ok(maps)
}

/// Applies per-head weight matrices to the matching V column blocks and
/// concatenates the head outputs.
pub(crate) fn apply_head_maps(maps: &[Tensor], v: &Tensor, heads: usize) -> Result<Tensor> {
    let dh = v.cols() / heads;
    let mut outs = Vec::with_capacity(heads);
    for (h, map) in maps.iter().enumerate() {
        let vh = v.col_block(h * dh, dh)?;
        outs.push(map.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Tensor::concat(&refs, 1)
}

pub(crate) fn stack_maps(maps: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = maps.iter().collect();
    Tensor::stack(&refs)
}

/// Standard head split/merge around the scaled-dot kernel: project, run
/// per-head attention on the column slices, concatenate, output-project.
/// Returns the output `[Nq, model_dim]` and maps `[heads, Nq, Nkv]`.
pub fn multi_head_attention(
    x_or_q: &Tensor,
    context: &Tensor,
    weights: &AttentionProjections,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let q = x_or_q.matmul(&weights.w_q)?;
    let k = context.matmul(&weights.w_k)?;
    let v = context.matmul(&weights.w_v)?;
    let maps = head_maps(&q, &k, heads)?;
    let merged = apply_head_maps(&maps, &v, heads)?;
    let out = merged.matmul(&weights.w_out)?;
    Ok((out, stack_maps(&maps)?))
}

/// Decoupled cross-attention: one query over two contexts,
/// `out = (Attn(Q, K_text, V_text) + lambda * Attn(Q, K_image, V_image)) * W_out`.
/// The image branch shares the query projection with the text branch;
/// only the K/V projections are separate. Both branch maps are returned.
pub fn decoupled_cross_attention(
    q_input: &Tensor,
    text_ctx: &Tensor,
    image_ctx: &Tensor,
    weights: &DecoupledWeights,
) -> Result<(Tensor, Tensor, Tensor)> {
    if weights.lambda_image < 0.0 {
        return Err(Error::config(format!(
            "lambda_image must be >= 0, got {}",
            weights.lambda_image
        )));
    }
    let q = q_input.matmul(&weights.w_q)?;
    let k_t = text_ctx.matmul(&weights.w_k_text)?;
    let v_t = text_ctx.matmul(&weights.w_v_text)?;
    let k_i = image_ctx.matmul(&weights.w_k_image)?;
    let v_i = image_ctx.matmul(&weights.w_v_image)?;

    let text_maps = head_maps(&q, &k_t, weights.heads)?;
    let image_maps = head_maps(&q, &k_i, weights.heads)?;
    let text_part = apply_head_maps(&text_maps, &v_t, weights.heads)?;
    let image_part = apply_head_maps(&image_maps, &v_i, weights.heads)?;
    let combined = text_part.add(&image_part.scale(weights.lambda_image)?)?;
    let out = combined.matmul(&weights.w_out)?;
    Ok((out, stack_maps(&text_maps)?, stack_maps(&image_maps)?))
}
