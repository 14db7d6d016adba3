//! Seeded miniature denoiser with spatial-transformer blocks plus toy
//! text and image encoders: the substrate that makes the guidance
//! mechanisms exercisable end to end.
//!
//! Weights are untrained; every acceptance property is structural, so a
//! seeded init is enough. Weight init depends only on
//! (seed, layer id, tensor role), never on construction order.

use crate::attention::{AttentionProjections, DecoupledWeights};
use crate::detmath;
use crate::error::{Error, Result};
use crate::guidance::{guided_cross_attention, guided_self_attention, BatchedContexts, GuidanceConfig};
use crate::inspect::Sink;
use crate::tensor::{seeded_normal, SeededRng, Tensor};

/// Longest accepted token sequence.
pub const MAX_TOKENS: usize = 77;

/// Relative weight of the sinusoidal position term in text embeddings.
const POS_SCALE: f32 = 0.5;

/// Square RGB style image with pixel values in [0,1].
#[derive(Debug, Clone)]
pub struct StyleImage {
    pub pixels: Tensor,
}

impl StyleImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[2] != 3 || pixels.shape()[0] != pixels.shape()[1] {
            return Err(Error::InvalidShape {
                op: "StyleImage",
                shape: pixels.shape().to_vec(),
                reason: "expects square [H, H, 3]".into(),
            });
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("style image pixels must lie in [0,1]"));
        }
        Ok(StyleImage { pixels })
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Result<Self> {
        StyleImage::new(Tensor::new(vec![h, w, 3], vec![v; h * w * 3])?)
    }

    pub fn load_ppm(path: &std::path::Path) -> Result<Self> {
        StyleImage::new(crate::imageio::load_ppm(path)?)
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Decoded output image with its provenance.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    /// `[H, W, 3]`, clamped to [0,1] at decode.
    pub pixels: Tensor,
    pub run_id: String,
    pub slot: usize,
}

/// Model dimensions and the seed every weight derives from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    /// Latent grid side; the query sequence is latent_size^2 long.
    pub latent_size: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub down_blocks: usize,
    pub up_blocks: usize,
    /// Style/output image side; must be a multiple of latent_size.
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            latent_size: 16,
            channels: 32,
            model_dim: 64,
            heads: 2,
            down_blocks: 2,
            up_blocks: 2,
            image_size: 32,
            patch_size: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.latent_size == 0 || self.channels == 0 {
            return Err(Error::config("latent_size and channels must be positive"));
        }
        if self.image_size == 0 || self.image_size % self.latent_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of latent_size {}",
                self.image_size, self.latent_size
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn queries(&self) -> usize {
        self.latent_size * self.latent_size
    }
}

fn init_weight(root: &SeededRng, layer_id: &str, role: &str, rows: usize, cols: usize) -> Tensor {
    let mut rng = root.derive(&format!("{layer_id}/{role}"));
    // 1/sqrt(fan_in) keeps activations O(1) through the stack.
    seeded_normal(&[rows, cols], &mut rng)
        .expect("positive dims")
        .scale(1.0 / (rows as f32).sqrt())
        .expect("finite scale")
}

/// Deterministic token + image encoders feeding the cross-attention KV.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Encoders {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(cfg.seed);
        Ok(Encoders {
            text: TextEncoder {
                seed: root.derive("encoder.text").seed(),
                dim: cfg.model_dim,
            },
            image: ImageEncoder::new(&root, cfg.patch_size, cfg.model_dim),
        })
    }
}

/// Hash-embedding text encoder: each token maps through a seeded hash to
/// a fixed embedding row, plus a sinusoidal position term. The
/// vocabulary is open; no tokenizer asset exists.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
}

impl TextEncoder {
    pub fn encode(&self, tokens: &[String]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::input("cannot encode an empty token sequence"));
        }
        if tokens.len() > MAX_TOKENS {
            return Err(Error::input(format!(
                "{} tokens exceeds the {MAX_TOKENS}-token limit",
                tokens.len()
            )));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for (pos, token) in tokens.iter().enumerate() {
            let tok_rng = SeededRng::new(self.seed).derive(token);
            for j in 0..self.dim {
                let embed = SeededRng::normal_at(tok_rng.seed(), j as u64);
                data.push(embed + POS_SCALE * position_term(pos, j, self.dim));
            }
        }
        Tensor::new(vec![tokens.len(), self.dim], data)
    }
}

/// Sinusoidal term: even columns sin, odd columns cos, geometric
/// frequency ladder over the half-dimension.
fn position_term(pos: usize, j: usize, dim: usize) -> f32 {
    // 10000^(2i/dim) expressed through the deterministic exp.
    const LN_10000: f64 = 9.210_340_371_976_184;
    let i = (j / 2) as f64;
    let denom = detmath::exp(LN_10000 * 2.0 * i / dim as f64);
    let arg = pos as f64 / denom;
    if j % 2 == 0 {
        detmath::sin(arg) as f32
    } else {
        detmath::cos(arg) as f32
    }
}

/// Seeded patchify-and-project image encoder: non-overlapping patches,
/// flattened row-major, one shared linear projection. No position term,
/// so permuting patches permutes exactly the corresponding rows.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    w: Tensor,
    b: Tensor,
    patch_size: usize,
    dim: usize,
}

impl ImageEncoder {
    fn new(root: &SeededRng, patch_size: usize, dim: usize) -> Self {
        let patch_len = patch_size * patch_size * 3;
        ImageEncoder {
            w: init_weight(root, "encoder.image", "w", patch_len, dim),
            b: init_weight(root, "encoder.image", "b", 1, dim),
            patch_size,
            dim,
        }
    }

    pub fn encode(&self, img: &StyleImage) -> Result<Tensor> {
        let side = img.side();
        let p = self.patch_size;
        if side % p != 0 {
            return Err(Error::InvalidShape {
                op: "encode_image",
                shape: img.pixels.shape().to_vec(),
                reason: format!("side {side} not divisible by patch size {p}"),
            });
        }
        let per_side = side / p;
        let mut rows = Vec::with_capacity(per_side * per_side * p * p * 3);
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            rows.push(img.pixels.data()[(y * side + x) * 3 + c]);
                        }
                    }
                }
            }
        }
        let patches = Tensor::new(vec![per_side * per_side, p * p * 3], rows)?;
        let projected = patches.matmul(&self.w)?;
        // Broadcast-add the bias row.
        let mut data = projected.data().to_vec();
        for row in data.chunks_mut(self.dim) {
            for (v, b) in row.iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![per_side * per_side, self.dim], data)
    }
}

struct Block {
    id: String,
    self_attn: AttentionProjections,
    xattn: DecoupledWeights,
    ff: Tensor,
}

/// The miniature denoiser: an ordered stack of down/mid/up
/// spatial-transformer blocks, each self-attention + decoupled
/// cross-attention + a single linear mix, with sinusoidal-plus-linear
/// timestep conditioning.
pub struct ToyDenoiser {
    config: ModelConfig,
    in_proj: Tensor,
    out_proj: Tensor,
    time_w: Tensor,
    dec_w: Tensor,
    blocks: Vec<Block>,
}

impl ToyDenoiser {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(config.seed);
        let d = config.model_dim;
        let c = config.channels;
        let mut block_ids: Vec<String> = Vec::new();
        for i in 0..config.down_blocks {
            block_ids.push(format!("down{i}"));
        }
        block_ids.push("mid".to_string());
        for i in 0..config.up_blocks {
            block_ids.push(format!("up{i}"));
        }
        let blocks = block_ids
            .iter()
            .map(|id| {
                let self_id = format!("{id}.self");
                let x_id = format!("{id}.xattn");
                Block {
                    id: id.clone(),
                    self_attn: AttentionProjections {
                        w_q: init_weight(&root, &self_id, "w_q", d, d),
                        w_k: init_weight(&root, &self_id, "w_k", d, d),
                        w_v: init_weight(&root, &self_id, "w_v", d, d),
                        w_out: init_weight(&root, &self_id, "w_out", d, d),
                    },
                    xattn: DecoupledWeights {
                        w_q: init_weight(&root, &x_id, "w_q", d, d),
                        w_k_text: init_weight(&root, &x_id, "w_k_text", d, d),
                        w_v_text: init_weight(&root, &x_id, "w_v_text", d, d),
                        w_k_image: init_weight(&root, &x_id, "w_k_image", d, d),
                        w_v_image: init_weight(&root, &x_id, "w_v_image", d, d),
                        w_out: init_weight(&root, &x_id, "w_out", d, d),
                        lambda_image: 1.0,
                        heads: config.heads,
                    },
                    ff: init_weight(&root, id, "ff", d, d),
                }
            })
            .collect();
        let fanout = config.image_size / config.latent_size;
        Ok(ToyDenoiser {
            in_proj: init_weight(&root, "io", "in_proj", c, d),
            out_proj: init_weight(&root, "io", "out_proj", d, c),
            time_w: init_weight(&root, "io", "time_w", d, d),
            dec_w: init_weight(&root, "decoder", "w", c, fanout * fanout * 3),
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stable attention-site ids: `down0.self`, `down0.xattn`, ...,
    /// `mid.self`, `mid.xattn`, ..., in architecture order.
    pub fn layer_ids(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| [format!("{}.self", b.id), format!("{}.xattn", b.id)])
            .collect()
    }

    pub fn block_ids(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.id.clone()).collect()
    }

    fn time_embedding(&self, t: usize) -> Result<Tensor> {
        let d = self.config.model_dim;
        let data: Vec<f32> = (0..d).map(|j| position_term(t, j, d)).collect();
        Tensor::matrix(1, d, data)?.matmul(&self.time_w)
    }

    fn broadcast_add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for r in data.chunks_mut(cols) {
            for (v, b) in r.iter_mut().zip(row.data()) {
                *v += b;
            }
        }
        Tensor::new(x.shape().to_vec(), data)
    }

    /// One denoising forward pass over the whole batch, predicting eps.
    ///
    /// `latents` is `[B, h, w, c]`; the output has the same shape. Every
    /// cross-attention routes through the guided processor and every
    /// self-attention through the (optionally shared-KV) self path; all
    /// attention maps and per-block features go to `sink`.
    pub fn denoise(
        &self,
        latents: &Tensor,
        t: usize,
        step: usize,
        contexts: &BatchedContexts,
        gcfg: &GuidanceConfig,
        sink: &mut dyn Sink,
    ) -> Result<Tensor> {
        let s = self.config.latent_size;
        let c = self.config.channels;
        if latents.rank() != 4 || latents.shape()[1] != s || latents.shape()[2] != s
            || latents.shape()[3] != c
        {
            return Err(Error::InvalidShape {
                op: "denoise",
                shape: latents.shape().to_vec(),
                reason: format!("expects [B, {s}, {s}, {c}]"),
            });
        }
        let batch = latents.shape()[0];
        if gcfg.kv_share_enabled && batch < 2 {
            return Err(Error::config(
                "kv_share requires batch size >= 2 (build the batch first)",
            ));
        }
        if contexts.batch_size() != batch {
            return Err(Error::config(format!(
                "denoise batch {batch} does not match context batch {}",
                contexts.batch_size()
            )));
        }

        let nq = self.config.queries();
        let time_row = self.time_embedding(t)?;
        let mut hidden: Vec<Tensor> = Vec::with_capacity(batch);
        for b in 0..batch {
            let flat = latents.index_axis0(b)?.reshape(vec![nq, c])?;
            let h = flat.matmul(&self.in_proj)?;
            hidden.push(Self::broadcast_add_row(&h, &time_row)?);
        }

        for block in &self.blocks {
            // Self-attention (+ residual) on row-normalized inputs.
            let self_id = format!("{}.self", block.id);
            let normed: Vec<Tensor> = hidden.iter().map(|h| h.row_l2_normalize()).collect();
            let sa = guided_self_attention(
                &normed,
                &block.self_attn,
                self.config.heads,
                gcfg,
                &self_id,
                step,
            )?;
            for b in 0..batch {
                sink.record_map(b, &sa.maps[b])?;
                hidden[b] = hidden[b].add(&sa.outputs[b])?;
            }

            // Guided decoupled cross-attention (+ residual).
            let x_id = format!("{}.xattn", block.id);
            let normed: Vec<Tensor> = hidden.iter().map(|h| h.row_l2_normalize()).collect();
            let xa = guided_cross_attention(&normed, contexts, &block.xattn, gcfg, &x_id, step)?;
            for b in 0..batch {
                sink.record_map(b, &xa.text_maps[b])?;
                sink.record_map(b, &xa.image_maps[b])?;
                hidden[b] = hidden[b].add(&xa.outputs[b])?;
            }

            // Single linear mix (+ residual), then record block features.
            for b in 0..batch {
                let mixed = hidden[b].row_l2_normalize().matmul(&block.ff)?;
                hidden[b] = hidden[b].add(&mixed)?;
                sink.record_feature(b, &block.id, step, &hidden[b])?;
            }
        }

        let mut slots = Vec::with_capacity(batch);
        for h in &hidden {
            let eps = h.matmul(&self.out_proj)?;
            slots.push(eps.reshape(vec![s, s, c])?);
        }
        let refs: Vec<&Tensor> = slots.iter().collect();
        Tensor::stack(&refs)
    }

    /// Baseline forward pass through the plain attention kernels: no
    /// guidance plumbing anywhere in the call path. The guided pass with
    /// a disabled config must reproduce this bit-exactly.
    pub fn denoise_plain(
        &self,
        latents: &Tensor,
        t: usize,
        contexts: &BatchedContexts,
    ) -> Result<Tensor> {
        let s = self.config.latent_size;
        let c = self.config.channels;
        if latents.rank() != 4 || latents.shape()[1] != s || latents.shape()[2] != s
            || latents.shape()[3] != c
        {
            return Err(Error::InvalidShape {
                op: "denoise_plain",
                shape: latents.shape().to_vec(),
                reason: format!("expects [B, {s}, {s}, {c}]"),
            });
        }
        let batch = latents.shape()[0];
        let nq = self.config.queries();
        let time_row = self.time_embedding(t)?;
        let mut hidden: Vec<Tensor> = Vec::with_capacity(batch);
        for b in 0..batch {
            let flat = latents.index_axis0(b)?.reshape(vec![nq, c])?;
            let h = flat.matmul(&self.in_proj)?;
            hidden.push(Self::broadcast_add_row(&h, &time_row)?);
        }
        for block in &self.blocks {
            for b in 0..batch {
                let normed = hidden[b].row_l2_normalize();
                let (sa, _) = crate::attention::multi_head_attention(
                    &normed,
                    &normed,
                    &block.self_attn,
                    self.config.heads,
                )?;
                hidden[b] = hidden[b].add(&sa)?;
            }
            for b in 0..batch {
                let normed = hidden[b].row_l2_normalize();
                let (xa, _, _) = crate::attention::decoupled_cross_attention(
                    &normed,
                    &contexts.text[b],
                    &contexts.image[b],
                    &block.xattn,
                )?;
                hidden[b] = hidden[b].add(&xa)?;
            }
            for b in 0..batch {
                let mixed = hidden[b].row_l2_normalize().matmul(&block.ff)?;
                hidden[b] = hidden[b].add(&mixed)?;
            }
        }
        let mut slots = Vec::with_capacity(batch);
        for h in &hidden {
            let eps = h.matmul(&self.out_proj)?;
            slots.push(eps.reshape(vec![s, s, c])?);
        }
        let refs: Vec<&Tensor> = slots.iter().collect();
        Tensor::stack(&refs)
    }

    /// Deterministic linear un-patchify decode, clamped to [0,1]: each
    /// latent cell expands to a pixel block around mid-gray.
    pub fn decode_latents(
        &self,
        latents: &Tensor,
        run_id: &str,
        slot: usize,
    ) -> Result<GeneratedImage> {
        let s = self.config.latent_size;
        let c = self.config.channels;
        if latents.shape() != [s, s, c] {
            return Err(Error::InvalidShape {
                op: "decode_latents",
                shape: latents.shape().to_vec(),
                reason: format!("expects [{s}, {s}, {c}]"),
            });
        }
        let f = self.config.image_size / s;
        let side = self.config.image_size;
        let cells = latents.reshape(vec![s * s, c])?;
        let blocks = cells.matmul(&self.dec_w)?; // [s*s, f*f*3]
        let mut pixels = vec![0.0f32; side * side * 3];
        for cy in 0..s {
            for cx in 0..s {
                let row = blocks.row(cy * s + cx);
                for dy in 0..f {
                    for dx in 0..f {
                        for ch in 0..3 {
                            let v = 0.5 + 0.25 * row[(dy * f + dx) * 3 + ch];
                            let y = cy * f + dy;
                            let x = cx * f + dx;
                            pixels[(y * side + x) * 3 + ch] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Ok(GeneratedImage {
            pixels: Tensor::new(vec![side, side, 3], pixels)?,
            run_id: run_id.to_string(),
            slot,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{build_batch, ConditionPair, PromptRole};
    use crate::inspect::{NullSink, RunCapture};

    fn small_config() -> ModelConfig {
        ModelConfig {
            seed: 5,
            latent_size: 4,
            channels: 8,
            model_dim: 16,
            heads: 2,
            down_blocks: 1,
            up_blocks: 1,
            image_size: 8,
            patch_size: 4,
            ..ModelConfig::default()
        }
    }

    fn tokens(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn text_encoder_is_deterministic() {
        let enc = Encoders::new(&small_config()).unwrap();
        let a = enc.text.encode(&tokens(&["red", "shoe"])).unwrap();
        let b = enc.text.encode(&tokens(&["red", "shoe"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_token_rows_differ_only_by_position_term() {
        let cfg = small_config();
        let enc = Encoders::new(&cfg).unwrap();
        let rows = enc.text.encode(&tokens(&["lamp", "lamp"])).unwrap();
        let dim = cfg.model_dim;
        for j in 0..dim {
            let diff = rows.at(1, j) - rows.at(0, j);
            let want = POS_SCALE * (position_term(1, j, dim) - position_term(0, j, dim));
            assert!((diff - want).abs() < 1e-6, "col {j}");
        }
    }

    #[test]
    fn text_encoder_rejects_empty_and_oversized() {
        let enc = Encoders::new(&small_config()).unwrap();
        assert!(enc.text.encode(&[]).is_err());
        let too_many: Vec<String> = (0..78).map(|i| format!("t{i}")).collect();
        assert!(enc.text.encode(&too_many).is_err());
        let max: Vec<String> = (0..77).map(|i| format!("t{i}")).collect();
        assert!(enc.text.encode(&max).is_ok());
    }

    #[test]
    fn distinct_tokens_have_low_pairwise_cosine() {
        // Statistical oracle over 1,000 distinct tokens: >= 99% of
        // pairs below 0.5 cosine. Sampled pairs keep the test fast.
        let cfg = ModelConfig::default();
        let enc = Encoders::new(&cfg).unwrap();
        let toks: Vec<String> = (0..1000).map(|i| format!("token{i}")).collect();
        let rows: Vec<Tensor> = toks
            .iter()
            .map(|t| enc.text.encode(&[t.clone()]).unwrap())
            .collect();
        let mut rng = SeededRng::new(123);
        let mut high = 0usize;
        let total = 20_000usize;
        for _ in 0..total {
            let i = (rng.next_u64() % 1000) as usize;
            let mut j = (rng.next_u64() % 1000) as usize;
            if i == j {
                j = (j + 1) % 1000;
            }
            let c = crate::inspect::feature_cosine(&rows[i], &rows[j]).unwrap();
            if c >= 0.5 {
                high += 1;
            }
        }
        assert!(
            (high as f64) < 0.01 * total as f64,
            "{high}/{total} pairs at cosine >= 0.5"
        );
    }

    #[test]
    fn zero_image_gives_equal_patch_features() {
        let cfg = small_config();
        let enc = Encoders::new(&cfg).unwrap();
        let img = StyleImage::constant(8, 8, 0.0).unwrap();
        let feats = enc.image.encode(&img).unwrap();
        assert_eq!(feats.shape(), &[4, cfg.model_dim]);
        for i in 1..4 {
            assert_eq!(feats.row(i), feats.row(0));
        }
    }

    #[test]
    fn default_geometry_gives_sixteen_patches() {
        let cfg = ModelConfig::default();
        let enc = Encoders::new(&cfg).unwrap();
        let img = StyleImage::constant(32, 32, 0.25).unwrap();
        let feats = enc.image.encode(&img).unwrap();
        assert_eq!(feats.shape(), &[16, cfg.model_dim]);
    }

    #[test]
    fn permuting_patches_permutes_feature_rows() {
        let cfg = small_config();
        let enc = Encoders::new(&cfg).unwrap();
        let mut rng = SeededRng::new(9);
        let mut pix = vec![0.0f32; 8 * 8 * 3];
        for v in pix.iter_mut() {
            *v = rng.next_uniform();
        }
        let img = StyleImage::new(Tensor::new(vec![8, 8, 3], pix.clone()).unwrap()).unwrap();
        let feats = enc.image.encode(&img).unwrap();

        // Swap patch (0,0) and patch (1,1) (patch size 4, grid 2x2).
        let mut swapped = pix.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                for c in 0..3 {
                    let a = ((dy) * 8 + dx) * 3 + c;
                    let b = ((4 + dy) * 8 + (4 + dx)) * 3 + c;
                    swapped.swap(a, b);
                }
            }
        }
        let img2 = StyleImage::new(Tensor::new(vec![8, 8, 3], swapped).unwrap()).unwrap();
        let feats2 = enc.image.encode(&img2).unwrap();
        assert_eq!(feats2.row(0), feats.row(3));
        assert_eq!(feats2.row(3), feats.row(0));
        assert_eq!(feats2.row(1), feats.row(1));
        assert_eq!(feats2.row(2), feats.row(2));
    }

    #[test]
    fn image_encoder_rejects_indivisible_dims() {
        let cfg = small_config(); // patch 4
        let enc = Encoders::new(&cfg).unwrap();
        let img = StyleImage::constant(6, 6, 0.1).unwrap();
        assert!(enc.image.encode(&img).is_err());
    }

    fn batch_for(cfg: &ModelConfig, user: &str, preset: &str) -> BatchedContexts {
        let enc = Encoders::new(cfg).unwrap();
        let pair = ConditionPair::new(
            user,
            preset,
            StyleImage::constant(cfg.image_size, cfg.image_size, 0.3).unwrap(),
            PromptRole::Preset,
        )
        .unwrap();
        build_batch(&pair, &enc).unwrap()
    }

    #[test]
    fn build_batch_shapes_and_duplication() {
        let cfg = small_config();
        let ctx = batch_for(&cfg, "red shoe", "studio photo of red shoe");
        assert_eq!(ctx.text.len(), 2);
        assert_eq!(ctx.text[0].shape(), &[5, cfg.model_dim]);
        assert_eq!(ctx.text[1].shape(), &[5, cfg.model_dim], "padded to common Ntok");
        assert_eq!(ctx.image[0], ctx.image[1], "image rows bit-identical");
    }

    #[test]
    fn build_batch_identical_prompts_identical_rows() {
        let cfg = small_config();
        let ctx = batch_for(&cfg, "same words", "same words");
        assert_eq!(ctx.text[0], ctx.text[1]);
    }

    #[test]
    fn denoiser_layer_ids_are_stable() {
        let model = ToyDenoiser::new(small_config()).unwrap();
        assert_eq!(
            model.layer_ids(),
            [
                "down0.self",
                "down0.xattn",
                "mid.self",
                "mid.xattn",
                "up0.self",
                "up0.xattn"
            ]
        );
        let model_default = ToyDenoiser::new(ModelConfig::default()).unwrap();
        assert_eq!(model_default.layer_ids().len(), 10);
        assert!(model_default.layer_ids().contains(&"mid.xattn".to_string()));
    }

    #[test]
    fn weight_init_depends_only_on_seed_and_tags() {
        let a = ToyDenoiser::new(small_config()).unwrap();
        let b = ToyDenoiser::new(small_config()).unwrap();
        assert_eq!(a.blocks[0].self_attn.w_q, b.blocks[0].self_attn.w_q);
        assert_eq!(a.in_proj, b.in_proj);
        let mut cfg = small_config();
        cfg.seed = 6;
        let c = ToyDenoiser::new(cfg).unwrap();
        assert_ne!(a.in_proj, c.in_proj);
    }

    #[test]
    fn denoise_shape_law_and_slot_symmetry() {
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg.clone()).unwrap();
        let ctx = batch_for(&cfg, "same words", "same words");
        let mut rng = SeededRng::new(1);
        let slot = seeded_normal(&[cfg.latent_size, cfg.latent_size, cfg.channels], &mut rng)
            .unwrap();
        let latents = Tensor::stack(&[&slot, &slot]).unwrap();
        let eps = model
            .denoise(&latents, 500, 0, &ctx, &GuidanceConfig::disabled(), &mut NullSink)
            .unwrap();
        assert_eq!(eps.shape(), latents.shape());
        // Identical inputs, disabled guidance: identical slot outputs.
        assert_eq!(eps.index_axis0(0).unwrap(), eps.index_axis0(1).unwrap());
    }

    #[test]
    fn denoise_rejects_single_slot_with_kv_share() {
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg.clone()).unwrap();
        let ctx_two = batch_for(&cfg, "a b", "c d");
        let ctx = BatchedContexts {
            text: vec![ctx_two.text[0].clone()],
            image: vec![ctx_two.image[0].clone()],
        };
        let mut rng = SeededRng::new(2);
        let slot = seeded_normal(&[cfg.latent_size, cfg.latent_size, cfg.channels], &mut rng)
            .unwrap();
        let latents = Tensor::stack(&[&slot]).unwrap();
        let gcfg = GuidanceConfig {
            kv_share_enabled: true,
            ..GuidanceConfig::default()
        };
        assert!(model
            .denoise(&latents, 500, 0, &ctx, &gcfg, &mut NullSink)
            .is_err());
    }

    #[test]
    fn map_count_per_denoise_call() {
        // Counting oracle: per call, distinct (layer, branch) map groups
        // = blocks x (1 self + 2 cross branches); records = groups x slots.
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg.clone()).unwrap();
        let ctx = batch_for(&cfg, "a b", "c d");
        let mut rng = SeededRng::new(3);
        let slot = seeded_normal(&[cfg.latent_size, cfg.latent_size, cfg.channels], &mut rng)
            .unwrap();
        let latents = Tensor::stack(&[&slot, &slot]).unwrap();
        let mut cap = RunCapture::new("count");
        model
            .denoise(&latents, 500, 0, &ctx, &GuidanceConfig::disabled(), &mut cap)
            .unwrap();
        let blocks = 3; // 1 down + 1 mid + 1 up
        let groups: std::collections::HashSet<_> = cap
            .maps
            .iter()
            .map(|r| (r.layer_id().to_string(), r.branch()))
            .collect();
        assert_eq!(groups.len(), blocks * 3);
        assert_eq!(cap.maps.len(), blocks * 3 * 2);
        assert_eq!(cap.features.len(), blocks * 2);
    }

    #[test]
    fn decode_zero_latents_is_constant_mid_gray() {
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg.clone()).unwrap();
        let z = Tensor::zeros(vec![cfg.latent_size, cfg.latent_size, cfg.channels]).unwrap();
        let img = model.decode_latents(&z, "r", 0).unwrap();
        assert!(img.pixels.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_range_is_clamped() {
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg.clone()).unwrap();
        let mut rng = SeededRng::new(4);
        let z = seeded_normal(&[cfg.latent_size, cfg.latent_size, cfg.channels], &mut rng)
            .unwrap()
            .scale(50.0)
            .unwrap();
        let img = model.decode_latents(&z, "r", 0).unwrap();
        assert!(img
            .pixels
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_is_injective_on_fuzzed_latents() {
        // Collision oracle: 100 distinct random latents, no two decode
        // to the same image.
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg.clone()).unwrap();
        let mut rng = SeededRng::new(8);
        let mut seen: Vec<Vec<u32>> = Vec::new();
        for _ in 0..100 {
            let z = seeded_normal(&[cfg.latent_size, cfg.latent_size, cfg.channels], &mut rng)
                .unwrap();
            let img = model.decode_latents(&z, "r", 0).unwrap();
            let bits: Vec<u32> = img.pixels.data().iter().map(|v| v.to_bits()).collect();
            assert!(!seen.contains(&bits), "decode collision");
            seen.push(bits);
        }
    }

    #[test]
    fn decode_rejects_wrong_grid() {
        let cfg = small_config();
        let model = ToyDenoiser::new(cfg).unwrap();
        let z = Tensor::zeros(vec![3, 3, 8]).unwrap();
        assert!(model.decode_latents(&z, "r", 0).is_err());
    }

    #[test]
    fn style_image_validation() {
        assert!(StyleImage::constant(8, 8, 0.5).is_ok());
        let bad = Tensor::new(vec![8, 8, 3], vec![1.5; 192]).unwrap();
        assert!(StyleImage::new(bad).is_err());
        let rect = Tensor::new(vec![4, 8, 3], vec![0.5; 96]).unwrap();
        assert!(StyleImage::new(rect).is_err());
    }
}
