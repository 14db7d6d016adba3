//! Condition and mask guidance as composable attention processors.
//!
//! Condition guidance runs batch-2 inference and replaces the target
//! slot's K and V with the reference slot's ("shared KV"), so the target
//! queries the reference's content. Mask guidance thresholds the
//! text-branch cross-attention map into a binary mask and gates which
//! key contributions reach the output. Both are train-free toggles; with
//! everything disabled the pipeline reproduces plain decoupled
//! cross-attention bit-exactly.

use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_head_maps, head_maps, stack_maps, AttentionMap, AttentionProjections, Branch,
    DecoupledWeights,
};
use crate::error::{Error, Result};
use crate::model::{Encoders, StyleImage};
use crate::tensor::Tensor;

/// Reserved token used to pad the shorter prompt of a batch.
pub const PAD_TOKEN: &str = "<pad>";

/// Which prompt occupies batch slot 0 (the KV source / reference role).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Preset,
    User,
}

/// The user prompt, the preset text condition derived from it, and the
/// style image, plus the role assignment for batch slot 0.
#[derive(Debug, Clone)]
pub struct ConditionPair {
    pub user_tokens: Vec<String>,
    pub preset_tokens: Vec<String>,
    pub style_image: StyleImage,
    pub reference: PromptRole,
}

/// Lowercase whitespace tokenizer; the vocabulary is open (tokens are
/// hashed by the text encoder, no asset needed).
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

impl ConditionPair {
    pub fn new(
        user_prompt: &str,
        preset_condition: &str,
        style_image: StyleImage,
        reference: PromptRole,
    ) -> Result<Self> {
        let user_tokens = tokenize(user_prompt);
        let preset_tokens = tokenize(preset_condition);
        if user_tokens.is_empty() {
            return Err(Error::input("user prompt is empty after tokenization"));
        }
        if preset_tokens.is_empty() {
            return Err(Error::input("preset condition is empty after tokenization"));
        }
        Ok(ConditionPair {
            user_tokens,
            preset_tokens,
            style_image,
            reference,
        })
    }

    /// Tokens for the reference role (batch slot 0).
    pub fn reference_tokens(&self) -> &[String] {
        match self.reference {
            PromptRole::Preset => &self.preset_tokens,
            PromptRole::User => &self.user_tokens,
        }
    }

    /// Tokens for the target role (batch slot 1, keeps its Q).
    pub fn target_tokens(&self) -> &[String] {
        match self.reference {
            PromptRole::Preset => &self.user_tokens,
            PromptRole::User => &self.preset_tokens,
        }
    }
}

/// Expands a preset template: `{prompt}` is replaced by the user prompt.
pub fn apply_preset_template(template: &str, user_prompt: &str) -> String {
    template.replace("{prompt}", user_prompt)
}

/// How the threshold mask combines with the attention map and V.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// (A ⊙ M) · V — gate the learned weights, keep their magnitudes.
    #[default]
    Gated,
    /// M · V — the literal threshold-map product, for comparison.
    Hard,
    /// rownorm(A ⊙ M) · V — gate then renormalize each row.
    Renorm,
}

/// All guidance knobs. Mask guidance applies to the text-cross branch
/// only; image-branch and self-attention maps are never masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub kv_share_enabled: bool,
    pub kv_source_index: usize,
    pub kv_target_indices: Vec<usize>,
    pub kv_branches: Vec<Branch>,
    pub mask_enabled: bool,
    /// Threshold in [0,1]; `None` resolves to 1/Nkv (the uniform level)
    /// per map.
    pub tau: Option<f32>,
    pub mask_mode: MaskMode,
    pub lambda_image: f32,
    /// Inclusive step-index window; `None` means every step.
    pub active_steps: Option<(usize, usize)>,
    /// Layer-id allowlist; `None` means every layer.
    pub active_layers: Option<Vec<String>>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            kv_share_enabled: false,
            kv_source_index: 0,
            kv_target_indices: vec![1],
            kv_branches: vec![Branch::Text, Branch::Image],
            mask_enabled: false,
            tau: None,
            mask_mode: MaskMode::Gated,
            lambda_image: 1.0,
            active_steps: None,
            active_layers: None,
        }
    }
}

impl GuidanceConfig {
    /// A config with both mechanisms off (the null-guidance baseline).
    pub fn disabled() -> Self {
        GuidanceConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kv_target_indices.contains(&self.kv_source_index) {
            return Err(Error::config(format!(
                "guidance.kv_source_index {} is also a target",
                self.kv_source_index
            )));
        }
        if let Some(tau) = self.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::config(format!(
                    "guidance.tau must be in [0,1], got {tau}"
                )));
            }
        }
        if !(0.0..=2.0).contains(&self.lambda_image) {
            return Err(Error::config(format!(
                "guidance.lambda_image must be in [0,2], got {}",
                self.lambda_image
            )));
        }
        if let Some((a, b)) = self.active_steps {
            if a > b {
                return Err(Error::config(format!(
                    "guidance.active_steps start {a} > end {b}"
                )));
            }
        }
        Ok(())
    }

    /// Whether guidance applies at this layer and step.
    pub fn is_active(&self, layer_id: &str, step: usize) -> bool {
        let step_ok = match self.active_steps {
            None => true,
            Some((a, b)) => step >= a && step <= b,
        };
        let layer_ok = match &self.active_layers {
            None => true,
            Some(ids) => ids.iter().any(|id| id == layer_id),
        };
        step_ok && layer_ok
    }

    fn shares_branch(&self, branch: Branch) -> bool {
        self.kv_share_enabled && self.kv_branches.contains(&branch)
    }

    /// The threshold for a map with `nkv` keys.
    pub fn resolved_tau(&self, nkv: usize) -> f32 {
        self.tau.unwrap_or(1.0 / nkv as f32)
    }
}

/// Batched contexts for batch-2 inference: one text row set per slot,
/// the image features duplicated across slots.
#[derive(Debug, Clone)]
pub struct BatchedContexts {
    pub text: Vec<Tensor>,
    pub image: Vec<Tensor>,
}

impl BatchedContexts {
    pub fn batch_size(&self) -> usize {
        self.text.len()
    }
}

/// Builds the batch-2 contexts: slot 0 embeds the reference-role prompt,
/// slot 1 the target-role prompt, and the encoded style image is
/// duplicated bit-identically into both slots. Prompts of different
/// length are padded with [`PAD_TOKEN`] to a common token count.
pub fn build_batch(pair: &ConditionPair, enc: &Encoders) -> Result<BatchedContexts> {
    let mut reference: Vec<String> = pair.reference_tokens().to_vec();
    let mut target: Vec<String> = pair.target_tokens().to_vec();
    let len = reference.len().max(target.len());
    reference.resize(len, PAD_TOKEN.to_string());
    target.resize(len, PAD_TOKEN.to_string());

    let text0 = enc.text.encode(&reference)?;
    let text1 = enc.text.encode(&target)?;
    let image = enc.image.encode(&pair.style_image)?;
    Ok(BatchedContexts {
        text: vec![text0, text1],
        image: vec![image.clone(), image],
    })
}

/// Replaces each target slot's K and V with the source slot's. Q and the
/// source slot are never touched; the transform is idempotent.
pub fn share_kv(
    k_batch: &[Tensor],
    v_batch: &[Tensor],
    cfg: &GuidanceConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if !cfg.kv_share_enabled {
        return Err(Error::config("share_kv called with kv_share disabled"));
    }
    cfg.validate()?;
    let batch = k_batch.len();
    if batch < 2 || v_batch.len() != batch {
        return Err(Error::config(format!(
            "share_kv requires batch size >= 2, got {batch} keys / {} values",
            v_batch.len()
        )));
    }
    if cfg.kv_source_index >= batch {
        return Err(Error::config(format!(
            "kv_source_index {} out of range for batch {batch}",
            cfg.kv_source_index
        )));
    }
    let mut k_out = k_batch.to_vec();
    let mut v_out = v_batch.to_vec();
    for &t in &cfg.kv_target_indices {
        if t >= batch {
            return Err(Error::config(format!(
                "kv_target_index {t} out of range for batch {batch}"
            )));
        }
        k_out[t] = k_batch[cfg.kv_source_index].clone();
        v_out[t] = v_batch[cfg.kv_source_index].clone();
    }
    Ok((k_out, v_out))
}

/// Binary mask cut from an attention map at threshold `tau`.
#[derive(Debug, Clone)]
pub struct ThresholdMask {
    /// Same shape as the source map; entries are exactly 0.0 or 1.0.
    pub mask: Tensor,
    pub tau: f32,
    pub source_map_id: String,
}

/// Cuts a binary mask: 1 where the map weight is >= tau (ties keep).
pub fn threshold_map(map: &AttentionMap, tau: f32) -> Result<ThresholdMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config(format!(
            "threshold tau must be in [0,1], got {tau}"
        )));
    }
    let data: Vec<f32> = map
        .weights
        .data()
        .iter()
        .map(|&w| if w >= tau { 1.0 } else { 0.0 })
        .collect();
    Ok(ThresholdMask {
        mask: Tensor::new(map.weights.shape().to_vec(), data)?,
        tau,
        source_map_id: format!("{}:{}:{}", map.layer_id, map.step, map.branch),
    })
}

/// Effective row weights for one head under a mask mode.
///
/// gated: A ⊙ M. hard: M. renorm: rownorm(A ⊙ M), where a fully masked
/// row falls back to the original unmasked row.
pub(crate) fn masked_weights_2d(map: &Tensor, mask: &Tensor, mode: MaskMode) -> Result<Tensor> {
    if map.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_weights",
            left: map.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    match mode {
        MaskMode::Gated => map.mul(mask),
        MaskMode::Hard => Ok(mask.clone()),
        MaskMode::Renorm => {
            let gated = map.mul(mask)?;
            let (m, n) = (gated.rows(), gated.cols());
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = gated.row(i);
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if sum > 0.0 {
                    let inv = 1.0 / sum;
                    data.extend(row.iter().map(|&v| ((v as f64) * inv) as f32));
                } else {
                    data.extend_from_slice(map.row(i));
                }
            }
            Tensor::matrix(m, n, data)
        }
    }
}

/// Applies a threshold mask to an attention map and multiplies by V.
/// Output shape `[heads, Nq, dv]`; every head uses the same V.
pub fn apply_mask(
    map: &AttentionMap,
    mask: &ThresholdMask,
    v: &Tensor,
    mode: MaskMode,
) -> Result<Tensor> {
    if map.weights.shape() != mask.mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: map.weights.shape().to_vec(),
            right: mask.mask.shape().to_vec(),
        });
    }
    if v.rank() != 2 || v.rows() != map.keys() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask (map/v)",
            left: map.weights.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let mut outs = Vec::with_capacity(map.heads());
    for h in 0..map.heads() {
        let w = masked_weights_2d(&map.head(h)?, &mask.mask.index_axis0(h)?, mode)?;
        outs.push(w.matmul(v)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Tensor::stack(&refs)
}

/// Per-slot outputs and maps of one guided cross-attention call.
#[derive(Debug, Clone)]
pub struct GuidedAttention {
    pub outputs: Vec<Tensor>,
    pub text_maps: Vec<AttentionMap>,
    pub image_maps: Vec<AttentionMap>,
}

/// The full guided decoupled cross-attention pipeline for one layer and
/// step: project QKV per slot, share KV into the target slots (when
/// enabled, per branch), compute maps, mask the text-branch map (when
/// enabled), combine branches with lambda, output-project.
///
/// With both mechanisms disabled (or outside the active layer/step
/// window) this is bit-identical to [`decoupled_cross_attention`]
/// applied per slot.
///
/// [`decoupled_cross_attention`]: crate::attention::decoupled_cross_attention
pub fn guided_cross_attention(
    q_batch: &[Tensor],
    contexts: &BatchedContexts,
    weights: &DecoupledWeights,
    cfg: &GuidanceConfig,
    layer_id: &str,
    step: usize,
) -> Result<GuidedAttention> {
    let batch = q_batch.len();
    if contexts.text.len() != batch || contexts.image.len() != batch {
        return Err(Error::config(format!(
            "guided_cross_attention: {batch} query slots vs {} text / {} image contexts",
            contexts.text.len(),
            contexts.image.len()
        )));
    }
    let active = cfg.is_active(layer_id, step);

    let mut q = Vec::with_capacity(batch);
    let mut k_t = Vec::with_capacity(batch);
    let mut v_t = Vec::with_capacity(batch);
    let mut k_i = Vec::with_capacity(batch);
    let mut v_i = Vec::with_capacity(batch);
    for b in 0..batch {
        q.push(q_batch[b].matmul(&weights.w_q)?);
        k_t.push(contexts.text[b].matmul(&weights.w_k_text)?);
        v_t.push(contexts.text[b].matmul(&weights.w_v_text)?);
        k_i.push(contexts.image[b].matmul(&weights.w_k_image)?);
        v_i.push(contexts.image[b].matmul(&weights.w_v_image)?);
    }

    // KV replacement happens at the projected-context level, before the
    // head split; equivalent for whole-slot replacement.
    if active && cfg.shares_branch(Branch::Text) {
        let (k, v) = share_kv(&k_t, &v_t, cfg)?;
        k_t = k;
        v_t = v;
    }
    if active && cfg.shares_branch(Branch::Image) {
        let (k, v) = share_kv(&k_i, &v_i, cfg)?;
        k_i = k;
        v_i = v;
    }

    let mut outputs = Vec::with_capacity(batch);
    let mut text_maps = Vec::with_capacity(batch);
    let mut image_maps = Vec::with_capacity(batch);
    for b in 0..batch {
        let t_maps = head_maps(&q[b], &k_t[b], weights.heads)?;
        let i_maps = head_maps(&q[b], &k_i[b], weights.heads)?;
        let text_map = AttentionMap::new(
            stack_maps(&t_maps)?,
            layer_id.to_string(),
            step,
            Branch::Text,
        )?;
        let image_map = AttentionMap::new(
            stack_maps(&i_maps)?,
            layer_id.to_string(),
            step,
            Branch::Image,
        )?;

        // Mask guidance applies on the text prompt side only.
        let text_part = if active && cfg.mask_enabled {
            let tau = cfg.resolved_tau(text_map.keys());
            let mask = threshold_map(&text_map, tau)?;
            let dh = v_t[b].cols() / weights.heads;
            let mut parts = Vec::with_capacity(weights.heads);
            for (h, m) in t_maps.iter().enumerate() {
                let w = masked_weights_2d(m, &mask.mask.index_axis0(h)?, cfg.mask_mode)?;
                parts.push(w.matmul(&v_t[b].col_block(h * dh, dh)?)?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat(&refs, 1)?
        } else {
            apply_head_maps(&t_maps, &v_t[b], weights.heads)?
        };
        let image_part = apply_head_maps(&i_maps, &v_i[b], weights.heads)?;
        let combined = text_part.add(&image_part.scale(weights.lambda_image)?)?;
        outputs.push(combined.matmul(&weights.w_out)?);
        text_maps.push(text_map);
        image_maps.push(image_map);
    }
    Ok(GuidedAttention {
        outputs,
        text_maps,
        image_maps,
    })
}

/// Per-slot outputs and maps of one (optionally shared-KV) self-attention.
#[derive(Debug, Clone)]
pub struct GuidedSelfAttention {
    pub outputs: Vec<Tensor>,
    pub maps: Vec<AttentionMap>,
}

/// Batched self-attention with optional KV sharing (branch `self`,
/// default off). K and V are projected from each slot's own input; when
/// sharing is active the target slots attend into the source slot's
/// keys and values instead.
pub fn guided_self_attention(
    x_batch: &[Tensor],
    weights: &AttentionProjections,
    heads: usize,
    cfg: &GuidanceConfig,
    layer_id: &str,
    step: usize,
) -> Result<GuidedSelfAttention> {
    let batch = x_batch.len();
    let mut q = Vec::with_capacity(batch);
    let mut k = Vec::with_capacity(batch);
    let mut v = Vec::with_capacity(batch);
    for x in x_batch {
        q.push(x.matmul(&weights.w_q)?);
        k.push(x.matmul(&weights.w_k)?);
        v.push(x.matmul(&weights.w_v)?);
    }
    if cfg.is_active(layer_id, step) && cfg.shares_branch(Branch::SelfAttn) {
        let (ks, vs) = share_kv(&k, &v, cfg)?;
        k = ks;
        v = vs;
    }
    let mut outputs = Vec::with_capacity(batch);
    let mut maps = Vec::with_capacity(batch);
    for b in 0..batch {
        let hm = head_maps(&q[b], &k[b], heads)?;
        let merged = apply_head_maps(&hm, &v[b], heads)?;
        outputs.push(merged.matmul(&weights.w_out)?);
        maps.push(AttentionMap::new(
            stack_maps(&hm)?,
            layer_id.to_string(),
            step,
            Branch::SelfAttn,
        )?);
    }
    Ok(GuidedSelfAttention { outputs, maps })
}
