//! The question encoder.
//!
//! Text tokens go through a pre-norm transformer with learned positions.
//! Each image becomes one visual token via a small convnet, global average
//! pooling and a linear map. In the coordinated variant the visual tokens
//! (no positional encoding) are concatenated in front of the text features
//! and passed through a pre-norm attention fusion stack; the concatenated
//! input is added back to the stack output before masked mean pooling, a
//! linear projection and L2 normalisation. The joint variant instead feeds
//! the visual tokens as a prefix into the text stack itself.

mod checkpoint;
pub mod layers;
mod params;

use candle_core::{DType, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::batch::EncodedBatch;
use crate::error::{bail_arg, Result};
use crate::rng::rng_from_seed;
use layers::{attention_bias, l2_normalize, linear, linear_std, masked_mean, modality_mean, Block, ConvStage, LayerNorm};

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    BatchDependent,
    BatchIndependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Coordinated,
    Joint,
}

impl FusionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Coordinated => "coordinated",
            FusionKind::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which part of the encoder produces the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedPath {
    /// The full encoder (coordinated or joint, per the config).
    Fused,
    /// Text stream only: pooled text features, projected.
    TextOnly,
    /// Visual stream only: mean of the visual tokens, projected.
    ImageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_text_layers: usize,
    pub n_fusion_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// 0 means "take from the vocabulary".
    pub vocab_size: usize,
    /// 0 means "take from the corpus".
    pub max_len: usize,
    pub max_images: usize,
    pub visual_channels: Vec<usize>,
    pub image_size: usize,
    pub norm_style: NormStyle,
    pub fusion: FusionKind,
    /// Ignore images entirely (text-stream-only encoder).
    pub text_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_text_layers: 4,
            n_fusion_layers: 2,
            n_heads: 4,
            ff_mult: 4,
            vocab_size: 0,
            max_len: 0,
            max_images: crate::corpus::DEFAULT_MAX_IMAGES,
            visual_channels: vec![16, 32, 64, 64],
            image_size: 32,
            norm_style: NormStyle::BatchIndependent,
            fusion: FusionKind::Coordinated,
            text_only: false,
        }
    }
}

impl ModelConfig {
    /// Fills vocabulary size and sequence length where left at 0.
    pub fn resolved(&self, vocab_size: usize, max_len: usize) -> Self {
        let mut c = self.clone();
        if c.vocab_size == 0 {
            c.vocab_size = vocab_size;
        }
        if c.max_len == 0 {
            c.max_len = max_len;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_text_layers", self.n_text_layers),
            ("n_heads", self.n_heads),
            ("ff_mult", self.ff_mult),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("max_images", self.max_images),
            ("image_size", self.image_size),
        ] {
            if v == 0 {
                bail_arg!("{name} must be at least 1");
            }
        }
        if self.fusion == FusionKind::Coordinated && self.n_fusion_layers == 0 {
            bail_arg!("coordinated fusion needs n_fusion_layers >= 1");
        }
        if self.d_model % self.n_heads != 0 {
            bail_arg!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if self.visual_channels.is_empty() || self.visual_channels.contains(&0) {
            bail_arg!("visual_channels must be a non-empty list of positive widths");
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TqNet {
    cfg: ModelConfig,
    params: ParamStore,
    tok_emb: Tensor,
    pos_emb: Tensor,
    text_blocks: Vec<Block>,
    text_ln: LayerNorm,
    stages: Vec<ConvStage>,
    visual_proj: Linear,
    visual_ln: LayerNorm,
    fusion_blocks: Vec<Block>,
    fusion_ln: Option<LayerNorm>,
    proj: Linear,
    mlm_head: Linear,
}

impl TqNet {
    /// Builds a model with parameters drawn from a stream seeded by `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut ps = ParamStore::new(dtype);
        let d = cfg.d_model;
        let tok_emb = ps.normal("text.tok_emb", (cfg.vocab_size, d), 0.02, &mut rng)?;
        let pos_emb = ps.normal("text.pos_emb", (cfg.max_len, d), 0.02, &mut rng)?;
        let text_blocks = (0..cfg.n_text_layers)
            .map(|i| Block::new(&mut ps, &format!("text.layers.{i}"), d, cfg.n_heads, cfg.ff_mult, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let text_ln = LayerNorm::new(&mut ps, "text.ln_f", d)?;

        let batch_norm = cfg.norm_style == NormStyle::BatchDependent;
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.visual_channels.iter().enumerate() {
            stages.push(ConvStage::new(&mut ps, &format!("visual.stages.{i}"), c_in, c_out, batch_norm, &mut rng)?);
            c_in = c_out;
        }
        let visual_proj = linear(&mut ps, "visual.proj", c_in, d, &mut rng)?;
        let visual_ln = LayerNorm::new(&mut ps, "visual.ln", d)?;

        let (fusion_blocks, fusion_ln) = match cfg.fusion {
            FusionKind::Coordinated => (
                (0..cfg.n_fusion_layers)
                    .map(|i| Block::new_identity(&mut ps, &format!("fusion.layers.{i}"), d, cfg.n_heads, cfg.ff_mult, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
                Some(LayerNorm::new(&mut ps, "fusion.ln_f", d)?),
            ),
            FusionKind::Joint => (Vec::new(), None),
        };
        let proj = linear(&mut ps, "proj", d, d, &mut rng)?;
        let mlm_head = linear_std(&mut ps, "mlm", d, cfg.vocab_size, 0.02, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            tok_emb,
            pos_emb,
            text_blocks,
            text_ln,
            stages,
            visual_proj,
            visual_ln,
            fusion_blocks,
            fusion_ln,
            proj,
            mlm_head,
        })
    }

    /// A fresh model with identical architecture and parameter values.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = TqNet::new(&self.cfg, 0, self.params.dtype())?;
        copy.params.copy_from(&self.params)?;
        Ok(copy)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        if l > self.cfg.max_len {
            bail_arg!("sequence length {l} exceeds max_len {}", self.cfg.max_len);
        }
        if b * l > 0 {
            let max_id = ids.flatten_all()?.max(0)?.to_scalar::<u32>()?;
            if max_id as usize >= self.cfg.vocab_size {
                bail_arg!("token id {max_id} out of range for vocabulary of {}", self.cfg.vocab_size);
            }
        }
        let tok = self
            .tok_emb
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, self.cfg.d_model))?;
        Ok(tok.broadcast_add(&self.pos_emb.narrow(0, 0, l)?)?)
    }

    fn text_stack(&self, mut x: Tensor, mask: &Tensor) -> Result<Tensor> {
        let bias = attention_bias(mask)?;
        for block in &self.text_blocks {
            x = block.forward(&x, &bias)?;
        }
        self.text_ln.forward(&x)
    }

    /// Contextual token features `(B,L,d)`.
    pub fn encode_text(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.text_stack(self.embed_tokens(ids)?, mask)
    }

    fn visual_tokens(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.forward(&x, &self.params, mode)?;
        }
        let pooled = x.mean((2, 3))?;
        // Same scale as the layer-normed text features.
        self.visual_ln.forward(&self.visual_proj.forward(&pooled)?)
    }

    /// One visual token per image: `(b,C,H,W)` → `(b,d)`.
    pub fn encode_images(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = images.dims()[0];
        if b > self.cfg.max_images {
            bail_arg!("{b} images exceed max_images {}", self.cfg.max_images);
        }
        if b == 0 {
            return Ok(Tensor::zeros((0, self.cfg.d_model), self.dtype(), images.device())?);
        }
        self.visual_tokens(images, mode)
    }

    /// Visual tokens scattered into the `(B,M,d)` slot grid.
    fn slotted_visual(&self, batch: &EncodedBatch, mode: Mode) -> Result<Option<(Tensor, Tensor)>> {
        if self.cfg.text_only {
            return Ok(None);
        }
        let (Some(images), Some(slots), Some(mask)) = (&batch.images, &batch.image_slots, &batch.image_mask) else {
            return Ok(None);
        };
        if let Some(&n) = batch.image_counts.iter().find(|&&n| n > self.cfg.max_images) {
            bail_arg!("question with {n} images exceeds max_images {}", self.cfg.max_images);
        }
        let tokens = self.visual_tokens(images, mode)?;
        let zero = Tensor::zeros((1, self.cfg.d_model), tokens.dtype(), tokens.device())?;
        let table = Tensor::cat(&[&tokens, &zero], 0)?;
        let grid = table
            .index_select(slots, 0)?
            .reshape((batch.len(), batch.max_images, self.cfg.d_model))?;
        Ok(Some((grid, mask.clone())))
    }

    fn check_poolable(mask: &Tensor) -> Result<()> {
        let counts: Vec<f64> = mask.sum(1)?.to_dtype(DType::F64)?.to_vec1()?;
        if counts.iter().any(|&c| c <= 0.0) {
            bail_arg!("item with no text tokens and no images: nothing to pool");
        }
        Ok(())
    }

    fn pool_project(&self, seq: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let pooled = masked_mean(seq, mask)?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }

    /// Pooling for `[visual ∥ text]` sequences: each modality present gets
    /// equal weight, so one or two visual tokens are not swamped by text.
    fn pool_fused(&self, seq: &Tensor, visual_mask: Option<&Tensor>, text_mask: &Tensor) -> Result<Tensor> {
        let Some(vm) = visual_mask else {
            return self.pool_project(seq, text_mask);
        };
        l2_normalize(&self.proj.forward(&modality_mean(seq, vm, text_mask)?)?)
    }

    /// Coordinated fusion of text features with visual tokens.
    ///
    /// `visual` is `(B,M,d)` with its `(B,M)` mask, or `None` for no images.
    pub fn fuse(&self, text: &Tensor, text_mask: &Tensor, visual: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        let Some(ln) = &self.fusion_ln else {
            bail_arg!("fuse called on a joint-fusion model");
        };
        let (seq, mask) = match visual {
            Some((v, vm)) => (Tensor::cat(&[v, text], 1)?, Tensor::cat(&[vm, text_mask], 1)?),
            None => (text.clone(), text_mask.clone()),
        };
        if seq.dims()[2] != self.cfg.d_model {
            bail_arg!("feature width {} differs from d_model {}", seq.dims()[2], self.cfg.d_model);
        }
        Self::check_poolable(&mask)?;
        let bias = attention_bias(&mask)?;
        let mut h = seq.clone();
        for block in &self.fusion_blocks {
            h = block.forward(&h, &bias)?;
        }
        let fused = (ln.forward(&h)? + &seq)?;
        self.pool_fused(&fused, visual.map(|(_, vm)| vm), text_mask)
    }

    /// Coordinated encoder: `(B,d)` unit-norm embeddings.
    pub fn forward(&self, batch: &EncodedBatch, mode: Mode) -> Result<Tensor> {
        match self.cfg.fusion {
            FusionKind::Coordinated => {
                let text = self.encode_text(&batch.ids, &batch.text_mask)?;
                let visual = self.slotted_visual(batch, mode)?;
                self.fuse(&text, &batch.text_mask, visual.as_ref().map(|(v, m)| (v, m)))
            }
            FusionKind::Joint => self.forward_joint(batch, mode),
        }
    }

    /// Joint encoder: visual tokens enter the text stack as a prefix.
    pub fn forward_joint(&self, batch: &EncodedBatch, mode: Mode) -> Result<Tensor> {
        let tokens = self.embed_tokens(&batch.ids)?;
        let visual = self.slotted_visual(batch, mode)?;
        let (seq, mask) = match &visual {
            Some((v, vm)) => (Tensor::cat(&[v, &tokens], 1)?, Tensor::cat(&[vm, &batch.text_mask], 1)?),
            None => (tokens, batch.text_mask.clone()),
        };
        Self::check_poolable(&mask)?;
        let h = self.text_stack(seq, &mask)?;
        self.pool_fused(&h, visual.as_ref().map(|(_, vm)| vm), &batch.text_mask)
    }

    /// Pooled text-stream embedding; images are ignored.
    pub fn embed_text_only(&self, batch: &EncodedBatch) -> Result<Tensor> {
        Self::check_poolable(&batch.text_mask)?;
        let text = self.encode_text(&batch.ids, &batch.text_mask)?;
        self.pool_project(&text, &batch.text_mask)
    }

    /// Mean visual token, projected. Every item must carry an image.
    pub fn embed_image_only(&self, batch: &EncodedBatch, mode: Mode) -> Result<Tensor> {
        if batch.image_counts.contains(&0) {
            bail_arg!("image-only embedding needs at least one image per item");
        }
        let Some((grid, mask)) = self.slotted_visual(batch, mode)? else {
            bail_arg!("image-only embedding on a batch without images");
        };
        self.pool_project(&grid, &mask)
    }

    pub fn embed(&self, batch: &EncodedBatch, mode: Mode, path: EmbedPath) -> Result<Tensor> {
        match path {
            EmbedPath::Fused => self.forward(batch, mode),
            EmbedPath::TextOnly => self.embed_text_only(batch),
            EmbedPath::ImageOnly => self.embed_image_only(batch, mode),
        }
    }

    /// Vocabulary scores for every position: `(B,L,d)` → `(B,L,V)`.
    pub fn mlm_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.mlm_head.forward(features)?)
    }
}
