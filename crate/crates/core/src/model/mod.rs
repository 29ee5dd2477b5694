//! The pose-aware retrieval model: a shared image/pose trunk fused by
//! cross-attention, a text encoder, and a cross encoder with matching and
//! masked-token heads.

mod inputs;

pub use inputs::{
    is_special, patchify, rasterize_keypoints, ImageInput, Keypoint, PoseInput, TextInput, CLS, MASK, MAX_TEXT_LEN,
    NUM_JOINTS, NUM_SPECIAL, PAD, SEP,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    multi_head_attention, AttentionParams, CrossBlock, Init, LayerNorm, Linear, MlpHead, TransformerBlock,
};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    /// Heads of the pose fusion cross-attention.
    pub ca_heads: usize,
    pub image_blocks: usize,
    pub text_blocks: usize,
    pub cross_blocks: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub pose_enabled: bool,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            vocab_size: 512,
            dim: 64,
            heads: 4,
            ca_heads: 4,
            image_blocks: 2,
            text_blocks: 2,
            cross_blocks: 2,
            ffn_dim: 256,
            proj_dim: 256,
            tau: 0.07,
            pose_enabled: true,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim", self.dim),
            ("model.heads", self.heads),
            ("model.ca_heads", self.ca_heads),
            ("model.ffn_dim", self.ffn_dim),
            ("model.proj_dim", self.proj_dim),
            ("corpus.image_size", self.image_size),
            ("corpus.patch_size", self.patch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "corpus.patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config("model.heads", format!("{} does not divide dim {}", self.heads, self.dim)));
        }
        if self.dim % self.ca_heads != 0 {
            return Err(Error::config("model.ca_heads", format!("{} does not divide dim {}", self.ca_heads, self.dim)));
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            return Err(Error::config("corpus.vocab_size", "must exceed the number of special tokens"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("model.tau", "must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("model.ln_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    image_stem: Linear,
    pose_stem: Linear,
    image_pos: crate::numerics::ParamId,
    image_blocks: Vec<TransformerBlock>,
    pose_ln: LayerNorm,
    pose_ca: AttentionParams,
    token_embed: crate::numerics::ParamId,
    text_pos: crate::numerics::ParamId,
    text_blocks: Vec<TransformerBlock>,
    cross_blocks: Vec<CrossBlock>,
    image_pool: Linear,
    text_pool: Linear,
    itm_head: MlpHead,
    mlm_head: MlpHead,
}

/// Token-level and pooled features of one image-text pair.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    pub f_image: Var,
    pub f_pose: Option<Var>,
    pub f_ca: Option<Var>,
    pub f_fused: Var,
    pub f_text: Var,
    pub pooled_image: Var,
    pub pooled_text: Var,
}

/// Outputs of the cross encoder.
#[derive(Clone, Copy, Debug)]
pub struct CrossOutput {
    /// `1 × 2`: logits of (no match, match).
    pub itm_logits: Var,
    /// `L_text × |V|`, present when requested.
    pub mlm_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CmpModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

impl<T: Scalar> CmpModel<T> {
    /// Builds a model with weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = {
            let mut init = Init { store: &mut params, rng: &mut rng };
            let c = &config;
            let (d, p) = (c.dim, c.patch_size);
            let eps = c.ln_eps;
            let block = |init: &mut Init<'_, T, ChaCha8Rng>, name: &str| {
                TransformerBlock::new(init, name, d, c.heads, c.ffn_dim, eps)
            };
            Layers {
                image_stem: Linear::new(&mut init, "image.stem", p * p * 3, d, true)?,
                pose_stem: Linear::new(&mut init, "pose.stem", p * p * NUM_JOINTS, d, true)?,
                image_pos: init.normal("image.pos", &[c.num_patches(), d], 0.1)?,
                image_blocks: (0..c.image_blocks)
                    .map(|i| block(&mut init, &format!("image.{i}")))
                    .collect::<Result<_>>()?,
                pose_ln: LayerNorm::new(&mut init, "fusion.pose_ln", d, eps)?,
                pose_ca: AttentionParams::new(&mut init, "fusion.ca", d, c.ca_heads)?,
                token_embed: init.normal("text.embed", &[c.vocab_size, d], 1.0)?,
                text_pos: init.normal("text.pos", &[MAX_TEXT_LEN, d], 0.1)?,
                text_blocks: (0..c.text_blocks)
                    .map(|i| block(&mut init, &format!("text.{i}")))
                    .collect::<Result<_>>()?,
                cross_blocks: (0..c.cross_blocks)
                    .map(|i| CrossBlock::new(&mut init, &format!("cross.{i}"), d, c.heads, c.ffn_dim, eps))
                    .collect::<Result<_>>()?,
                image_pool: Linear::new(&mut init, "pool.image", 2 * d, c.proj_dim, true)?,
                text_pool: Linear::new(&mut init, "pool.text", 2 * d, c.proj_dim, true)?,
                itm_head: MlpHead::new(&mut init, "head.itm", d, 2, eps)?,
                mlm_head: MlpHead::new(&mut init, "head.mlm", d, c.vocab_size, eps)?,
            }
        };
        Ok(Self { config, params, layers })
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Scalar>(&self) -> CmpModel<U> {
        CmpModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::with_params(&self.params)
    }

    /// The fusion cross-attention parameters.
    pub fn pose_attention(&self) -> &AttentionParams {
        &self.layers.pose_ca
    }

    fn trunk(&self, g: &mut Graph<'_, T>, patches: Tensor<T>, stem: &Linear) -> Result<Var> {
        let l = self.config.num_patches();
        if patches.shape()[0] != l {
            return Err(Error::shape("image_trunk", patches.shape(), &[l]));
        }
        let x = g.constant(patches)?;
        let x = stem.forward(g, x)?;
        let pos = g.param(self.layers.image_pos);
        let mut x = g.add(x, pos)?;
        for b in &self.layers.image_blocks {
            x = b.forward(g, x)?;
        }
        let cls = g.mean_rows(x)?;
        g.concat_rows(&[cls, x])
    }

    /// Runs the shared trunk on an already patchified `L × (p²·3)` matrix.
    pub fn encode_image_patches(&self, g: &mut Graph<'_, T>, patches: Tensor<T>) -> Result<Var> {
        self.trunk(g, patches, &self.layers.image_stem)
    }

    pub fn encode_pose_patches(&self, g: &mut Graph<'_, T>, patches: Tensor<T>) -> Result<Var> {
        self.trunk(g, patches, &self.layers.pose_stem)
    }

    /// `(1 + L) × D` image tokens; row 0 is the mean of the patch rows.
    pub fn encode_image(&self, g: &mut Graph<'_, T>, img: &ImageInput) -> Result<Var> {
        self.check_grid("encode_image", img.size())?;
        let patches = patchify(&img.pixels, self.config.patch_size)?;
        self.encode_image_patches(g, patches)
    }

    /// Pose heatmaps through the image trunk, entering via the pose stem.
    pub fn encode_pose(&self, g: &mut Graph<'_, T>, pose: &PoseInput) -> Result<Var> {
        self.check_grid("encode_pose", pose.size())?;
        let patches = patchify(&pose.heatmaps, self.config.patch_size)?;
        self.encode_pose_patches(g, patches)
    }

    fn check_grid(&self, op: &'static str, size: usize) -> Result<()> {
        if size != self.config.image_size {
            return Err(Error::shape(op, &[size, size], &[self.config.image_size, self.config.image_size]));
        }
        Ok(())
    }

    /// `f_CA = CA(q = LN(f_P), k = v = f_I)` and `f_V = f_I + f_CA`.
    pub fn fuse_pose(&self, g: &mut Graph<'_, T>, f_image: Var, f_pose: Var) -> Result<(Var, Var)> {
        if g.shape(f_image) != g.shape(f_pose) {
            return Err(Error::shape("fuse_pose", g.shape(f_image), g.shape(f_pose)));
        }
        let q = self.layers.pose_ln.forward(g, f_pose)?;
        let f_ca = multi_head_attention(g, q, f_image, &self.layers.pose_ca)?;
        let f_v = g.add(f_image, f_ca)?;
        Ok((f_ca, f_v))
    }

    /// Image tokens as seen by the rest of the model: pose-fused when pose is
    /// enabled, the plain trunk output otherwise.
    pub fn encode_visual(&self, g: &mut Graph<'_, T>, img: &ImageInput, pose: &PoseInput) -> Result<Var> {
        Ok(self.encode_visual_parts(g, img, pose)?.2)
    }

    fn encode_visual_parts(
        &self,
        g: &mut Graph<'_, T>,
        img: &ImageInput,
        pose: &PoseInput,
    ) -> Result<(Var, Option<(Var, Var)>, Var)> {
        let f_i = self.encode_image(g, img)?;
        if !self.config.pose_enabled {
            return Ok((f_i, None, f_i));
        }
        let f_p = self.encode_pose(g, pose)?;
        let (f_ca, f_v) = self.fuse_pose(g, f_i, f_p)?;
        Ok((f_i, Some((f_p, f_ca)), f_v))
    }

    /// Same as [`encode_visual`](Self::encode_visual) from patchified inputs.
    pub fn encode_visual_patches(&self, g: &mut Graph<'_, T>, image: Tensor<T>, pose: Tensor<T>) -> Result<Var> {
        let f_i = self.encode_image_patches(g, image)?;
        if !self.config.pose_enabled {
            return Ok(f_i);
        }
        let f_p = self.encode_pose_patches(g, pose)?;
        Ok(self.fuse_pose(g, f_i, f_p)?.1)
    }

    /// `L_text × D` text tokens; row 0 is the CLS embedding.
    pub fn encode_text(&self, g: &mut Graph<'_, T>, txt: &TextInput) -> Result<Var> {
        let v = self.config.vocab_size as u32;
        if let Some(&bad) = txt.tokens().iter().find(|&&t| t >= v) {
            return Err(Error::invalid("encode_text", format!("token id {bad} outside vocabulary of {v}")));
        }
        let ids: Vec<usize> = txt.tokens().iter().map(|&t| t as usize).collect();
        let table = g.param(self.layers.token_embed);
        let x = g.gather_rows(table, &ids)?;
        let pos_table = g.param(self.layers.text_pos);
        let pos = g.slice_rows(pos_table, 0, ids.len())?;
        let mut x = g.add(x, pos)?;
        for b in &self.layers.text_blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    /// `FC([mean of non-CLS rows, CLS row])`, L2-normalized, as a `1 × proj` row.
    pub fn pool(&self, g: &mut Graph<'_, T>, tokens: Var, fc: &Linear) -> Result<Var> {
        let rows = g.shape(tokens)[0];
        if rows < 2 {
            return Err(Error::invalid("pool_global", "need at least one token besides CLS"));
        }
        let cls = g.slice_rows(tokens, 0, 1)?;
        let rest = g.slice_rows(tokens, 1, rows)?;
        let avg = g.mean_rows(rest)?;
        let joined = g.concat_cols(&[avg, cls])?;
        let projected = fc.forward(g, joined)?;
        g.l2_normalize_rows(projected)
    }

    pub fn pool_image(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        self.pool(g, tokens, &self.layers.image_pool)
    }

    pub fn pool_text(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        self.pool(g, tokens, &self.layers.text_pool)
    }

    /// Image pooling layer, exposed for tests that build pooled features by hand.
    pub fn image_pool_layer(&self) -> &Linear {
        &self.layers.image_pool
    }

    /// Cross encoder over precomputed text tokens (queries) and image tokens
    /// (keys and values).
    pub fn cross_encode_features(
        &self,
        g: &mut Graph<'_, T>,
        f_fused: Var,
        f_text: Var,
        with_mlm: bool,
    ) -> Result<CrossOutput> {
        if g.shape(f_fused).get(1) != Some(&self.config.dim) || g.shape(f_text).get(1) != Some(&self.config.dim) {
            return Err(Error::shape("cross_encode", g.shape(f_fused), g.shape(f_text)));
        }
        let mut x = f_text;
        for b in &self.layers.cross_blocks {
            x = b.forward(g, x, f_fused)?;
        }
        let cls = g.slice_rows(x, 0, 1)?;
        let itm_logits = self.layers.itm_head.forward(g, cls)?;
        let mlm_logits = if with_mlm {
            Some(self.layers.mlm_head.forward(g, x)?)
        } else {
            None
        };
        Ok(CrossOutput { itm_logits, mlm_logits })
    }

    pub fn cross_encode(&self, g: &mut Graph<'_, T>, f_fused: Var, text: &TextInput) -> Result<CrossOutput> {
        let f_text = self.encode_text(g, text)?;
        self.cross_encode_features(g, f_fused, f_text, true)
    }

    /// Probability of the "match" class for a logits row.
    pub fn match_probability(&self, g: &mut Graph<'_, T>, itm_logits: Var) -> Result<Var> {
        let p = g.softmax(itm_logits, 1)?;
        g.pick(p, &[1])
    }

    pub fn encode_pair(
        &self,
        g: &mut Graph<'_, T>,
        img: &ImageInput,
        pose: &PoseInput,
        txt: &TextInput,
    ) -> Result<EncodedPair> {
        let (f_image, pose_parts, f_fused) = self.encode_visual_parts(g, img, pose)?;
        let f_text = self.encode_text(g, txt)?;
        let pooled_image = self.pool_image(g, f_fused)?;
        let pooled_text = self.pool_text(g, f_text)?;
        Ok(EncodedPair {
            f_image,
            f_pose: pose_parts.map(|p| p.0),
            f_ca: pose_parts.map(|p| p.1),
            f_fused,
            f_text,
            pooled_image,
            pooled_text,
        })
    }
}
