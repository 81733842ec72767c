//! Vision encoder, text encoder and the caption decoder with learnable query
//! tokens.
//!
//! The decoder reads a condition sequence (image patch features, optionally
//! followed by the web caption's contextual token features) and a block of
//! learnable tokens. In concatenation mode both are fed through shared
//! self-attention under the combination mask: condition tokens see each other,
//! learnable tokens see the whole condition and earlier learnable tokens.

use std::rc::Rc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SeqPart, Var};
use crate::error::{ClipsError, Result};
use crate::nn::{causal_allow, trunc_normal, Block, LayerNorm, Linear, ParamId, ParamStore, SeqMask, Session, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text::TokenSequence;
use crate::training::TrainingBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Condition and learnable tokens share self-attention under the combination mask.
    Concat,
    /// Learnable tokens self-attend causally and cross-attend to the condition.
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    ImageOnly,
    ImageAndText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers_vision: usize,
    pub n_layers_text: usize,
    pub n_layers_decoder: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub input_token_len: usize,
    pub output_token_len: usize,
    pub n_learnable_tokens: usize,
    pub fusion_mode: FusionMode,
    pub condition_mode: ConditionMode,
    pub text_encoder_causal: bool,
    /// Initial value of the similarity scale `1/τ`.
    pub temperature_init: f64,
    /// Upper bound on condition length plus learnable length.
    pub max_decoder_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 128,
            n_layers_vision: 4,
            n_layers_text: 4,
            n_layers_decoder: 2,
            n_heads: 4,
            mlp_ratio: 4,
            vocab_size: crate::text::Vocab::toy().len(),
            input_token_len: 80,
            output_token_len: 128,
            n_learnable_tokens: 128,
            fusion_mode: FusionMode::Concat,
            condition_mode: ConditionMode::ImageAndText,
            text_encoder_causal: false,
            temperature_init: 1.0 / 0.07,
            max_decoder_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClipsError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.n_heads));
        }
        if self.output_token_len != self.n_learnable_tokens {
            return bad(format!(
                "output token length {} must equal learnable token count {}",
                self.output_token_len, self.n_learnable_tokens
            ));
        }
        if self.output_token_len == 0 || self.input_token_len == 0 {
            return bad("token lengths must be positive".into());
        }
        if self.vocab_size < 5 {
            return bad(format!("vocabulary of {} is smaller than the reserved tokens", self.vocab_size));
        }
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            return bad("temperature_init must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Square visibility matrix over `l_cond` condition tokens followed by learnable tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    side: usize,
    l_cond: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn l_cond(&self) -> usize {
        self.l_cond
    }

    /// Zero-indexed query `i`, key `j`.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.side + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.allow.chunks(self.side).map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }
}

/// Builds the combination mask for `l_cond` condition and `l_learn` learnable tokens.
pub fn build_combination_mask(l_cond: usize, l_learn: usize) -> Result<AttentionMask> {
    if l_cond == 0 || l_learn == 0 {
        return Err(ClipsError::invalid(format!("mask lengths must be positive (got {l_cond}, {l_learn})")));
    }
    let side = l_cond + l_learn;
    // condition keys are visible to every query; learnable keys only to
    // themselves and later learnable queries
    let allow = (0..side * side).map(|x| (x % side) < l_cond || (x % side) <= (x / side)).collect();
    Ok(AttentionMask { side, l_cond, allow })
}

/// Encoder outputs for a batch of images.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `batch * n_patches` contextual patch tokens.
    pub patches: Var,
    pub n_patches: usize,
    /// `batch × embed_dim` mean over patches, before projection.
    pub pooled: Var,
    pub batch: usize,
}

/// Encoder outputs for a batch of token sequences.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `batch * seq` contextual token features; `seq` is the longest valid length in the batch.
    pub tokens: Var,
    pub seq: usize,
    pub valid: Vec<usize>,
    /// `batch × embed_dim` mean over valid positions, before projection.
    pub pooled: Var,
}

impl TextFeatures {
    pub fn batch(&self) -> usize {
        self.valid.len()
    }
}

/// Concrete forward results for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<T> {
    pub image_embed: Matrix<T>,
    pub text_embed_orig: Matrix<T>,
    pub text_embed_syn: Matrix<T>,
    /// `(batch * output_token_len) × vocab_size`, example-major.
    pub caption_logits: Matrix<T>,
    pub temperature: T,
}

#[derive(Debug, Clone)]
struct VisionTower {
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct TextTower {
    tok_embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    learnable: ParamId,
    learn_pos: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear,
}

/// The full image-text model, generic over the scalar type.
#[derive(Debug, Clone)]
pub struct ClipsModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    vision: VisionTower,
    text: TextTower,
    decoder: Decoder,
    log_scale: ParamId,
}

/// Upper bound accepted for the learned similarity scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

impl<T: Scalar> ClipsModel<T> {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.embed_dim;
        let h = config.n_heads;
        let mr = config.mlp_ratio;
        let cross = config.fusion_mode == FusionMode::CrossAttention;

        let vision = VisionTower {
            patch_embed: Linear::new(&mut p, "vision.patch_embed", config.patch_dim(), d, true, INIT_STD, &mut rng),
            pos: p.add("vision.pos", trunc_normal(config.n_patches(), d, INIT_STD, &mut rng), true),
            blocks: (0..config.n_layers_vision)
                .map(|i| Block::new(&mut p, &format!("vision.block{i}"), d, h, mr, config.n_layers_vision, false, &mut rng))
                .collect(),
            ln_post: LayerNorm::new(&mut p, "vision.ln_post", d),
            proj: Linear::new(&mut p, "vision.proj", d, d, false, INIT_STD, &mut rng),
        };
        let text = TextTower {
            tok_embed: p.add("text.tok_embed", trunc_normal(config.vocab_size, d, INIT_STD, &mut rng), true),
            pos: p.add("text.pos", trunc_normal(config.input_token_len, d, INIT_STD, &mut rng), true),
            blocks: (0..config.n_layers_text)
                .map(|i| Block::new(&mut p, &format!("text.block{i}"), d, h, mr, config.n_layers_text, false, &mut rng))
                .collect(),
            ln_final: LayerNorm::new(&mut p, "text.ln_final", d),
            proj: Linear::new(&mut p, "text.proj", d, d, false, INIT_STD, &mut rng),
        };
        let decoder = Decoder {
            learnable: p.add("decoder.learnable", trunc_normal(config.n_learnable_tokens, d, INIT_STD, &mut rng), true),
            learn_pos: p.add("decoder.learn_pos", trunc_normal(config.n_learnable_tokens, d, INIT_STD, &mut rng), true),
            blocks: (0..config.n_layers_decoder)
                .map(|i| {
                    Block::new(&mut p, &format!("decoder.block{i}"), d, h, mr, config.n_layers_decoder, cross, &mut rng)
                })
                .collect(),
            ln_final: LayerNorm::new(&mut p, "decoder.ln_final", d),
            head: Linear::new(&mut p, "decoder.head", d, config.vocab_size, true, INIT_STD, &mut rng),
        };
        let log_scale = p.add("logit_scale", Matrix::scalar(T::from_f64_lossy(config.temperature_init.ln())), false);
        Ok(Self { config, params: p, vision, text, decoder, log_scale })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn log_scale_id(&self) -> ParamId {
        self.log_scale
    }

    pub fn learnable_tokens_id(&self) -> ParamId {
        self.decoder.learnable
    }

    /// Current `τ`.
    pub fn temperature(&self) -> T {
        (-self.params.get(self.log_scale).item()).exp()
    }

    /// Keeps the similarity scale within `(0, MAX_LOGIT_SCALE]`.
    pub fn clamp_logit_scale(&mut self) {
        let max = T::from_f64_lossy(MAX_LOGIT_SCALE.ln());
        let v = self.params.get_mut(self.log_scale);
        let cur = v.item();
        if cur > max {
            v.set(0, 0, max);
        }
    }

    /// Switches to a new input resolution, resampling the positional grid bicubically.
    pub fn set_image_size(&mut self, image_size: usize) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.image_size = image_size;
        cfg.validate()?;
        if image_size == self.config.image_size {
            return Ok(());
        }
        let old = self.params.get(self.vision.pos).clone();
        let resized = resize_grid_bicubic(&old, self.config.grid(), cfg.grid());
        *self.params.get_mut(self.vision.pos) = resized;
        self.config = cfg;
        Ok(())
    }

    /// Flattened, normalised patches in raster order: `(batch * n_patches) × (3·p²)`.
    pub fn patchify(&self, images: &[RgbImage]) -> Result<Matrix<T>> {
        let s = self.config.image_size as u32;
        let p = self.config.patch_size;
        let g = self.config.grid();
        let mut out = Matrix::zeros(images.len() * g * g, self.config.patch_dim());
        let half = T::from_f64_lossy(0.5);
        let inv = T::from_f64_lossy(1.0 / 255.0);
        for (b, img) in images.iter().enumerate() {
            if img.dimensions() != (s, s) {
                return Err(ClipsError::config(format!(
                    "image is {}x{}, model expects {s}x{s}",
                    img.width(),
                    img.height()
                )));
            }
            for gy in 0..g {
                for gx in 0..g {
                    let row = out.row_mut(b * g * g + gy * g + gx);
                    for c in 0..3 {
                        for py in 0..p {
                            for px in 0..p {
                                let pix = img.get_pixel((gx * p + px) as u32, (gy * p + py) as u32).0[c];
                                row[(c * p + py) * p + px] = (T::from_f64_lossy(pix as f64) * inv - half) / half;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode_image(&self, s: &mut Session<'_, T>, images: &[RgbImage]) -> Result<ImageFeatures> {
        if images.is_empty() {
            return Err(ClipsError::invalid("empty image batch"));
        }
        let np = self.config.n_patches();
        let patches = s.graph.constant(self.patchify(images)?);
        let x = self.vision.patch_embed.forward(s, patches);
        let pos = s.p(self.vision.pos);
        let mut x = s.graph.add_seq_pos(x, pos, np);
        let valid = vec![np; images.len()];
        let mask = SeqMask { batch: images.len(), q_len: np, k_len: np, allow: None, key_valid: None };
        for blk in &self.vision.blocks {
            x = blk.forward(s, x, &mask);
        }
        let x = self.vision.ln_post.forward(s, x);
        let pooled = s.graph.mean_pool(x, np, &valid);
        Ok(ImageFeatures { patches: x, n_patches: np, pooled, batch: images.len() })
    }

    /// Runs the text encoder. Pad positions are masked as keys and excluded from pooling,
    /// so trailing pads are trimmed before the forward pass.
    pub fn encode_text(&self, s: &mut Session<'_, T>, seqs: &[TokenSequence]) -> Result<TextFeatures> {
        if seqs.is_empty() {
            return Err(ClipsError::invalid("empty text batch"));
        }
        let cap = self.config.input_token_len;
        for q in seqs {
            if q.max_len() != cap {
                return Err(ClipsError::invalid(format!("text sequence padded to {}, expected {cap}", q.max_len())));
            }
            if q.valid_len() == 0 {
                return Err(ClipsError::invalid("all-pad text sequence"));
            }
            q.check_vocab(self.config.vocab_size)?;
        }
        let valid: Vec<usize> = seqs.iter().map(TokenSequence::valid_len).collect();
        let seq = *valid.iter().max().expect("non-empty");
        let ids: Vec<usize> = seqs.iter().flat_map(|q| q.ids()[..seq].iter().map(|&i| i as usize)).collect();
        let table = s.p(self.text.tok_embed);
        let x = s.graph.embedding(table, &ids);
        let pos = s.p(self.text.pos);
        let mut x = s.graph.add_seq_pos(x, pos, seq);
        let mask =
            if self.config.text_encoder_causal { SeqMask::causal_padded(seq, &valid) } else { SeqMask::padded(seq, &valid) };
        for blk in &self.text.blocks {
            x = blk.forward(s, x, &mask);
        }
        let x = self.text.ln_final.forward(s, x);
        let pooled = s.graph.mean_pool(x, seq, &valid);
        Ok(TextFeatures { tokens: x, seq, valid, pooled })
    }

    /// Projected, unit-norm image embeddings.
    pub fn embed_image(&self, s: &mut Session<'_, T>, f: &ImageFeatures) -> Var {
        let y = self.vision.proj.forward(s, f.pooled);
        s.graph.l2_normalize(y)
    }

    /// Projected, unit-norm text embeddings.
    pub fn embed_text(&self, s: &mut Session<'_, T>, f: &TextFeatures) -> Var {
        let y = self.text.proj.forward(s, f.pooled);
        s.graph.l2_normalize(y)
    }

    /// The `1×1` similarity scale `1/τ`.
    pub fn logit_scale(&self, s: &mut Session<'_, T>) -> Var {
        let l = s.p(self.log_scale);
        s.graph.exp(l)
    }

    /// Caption logits, `(batch * output_token_len) × vocab_size`.
    pub fn decode_captions(
        &self,
        s: &mut Session<'_, T>,
        image: &ImageFeatures,
        web: Option<&TextFeatures>,
    ) -> Result<Var> {
        match (self.config.condition_mode, web) {
            (ConditionMode::ImageAndText, None) => {
                return Err(ClipsError::invalid("image_and_text conditioning needs web caption features"))
            }
            (ConditionMode::ImageOnly, Some(_)) => {
                return Err(ClipsError::invalid("image_only conditioning takes no text features"))
            }
            _ => {}
        }
        let batch = image.batch;
        let np = image.n_patches;
        if let Some(w) = web {
            if w.batch() != batch {
                return Err(ClipsError::invalid("image and web caption batch sizes differ"));
            }
        }
        let web_len = web.map_or(0, |w| w.seq);
        let l_cond = np + web_len;
        let l_learn = self.config.n_learnable_tokens;
        if l_cond + l_learn > self.config.max_decoder_len {
            return Err(ClipsError::invalid(format!(
                "decoder length {} exceeds cap {}",
                l_cond + l_learn,
                self.config.max_decoder_len
            )));
        }
        let mut cond_valid = Vec::with_capacity(batch * l_cond);
        for b in 0..batch {
            cond_valid.extend(std::iter::repeat(true).take(np));
            if let Some(w) = web {
                cond_valid.extend((0..web_len).map(|j| j < w.valid[b]));
            }
        }
        let mut cond_parts = vec![SeqPart { var: image.patches, len: np, shared: false }];
        if let Some(w) = web {
            cond_parts.push(SeqPart { var: w.tokens, len: web_len, shared: false });
        }
        let learn = s.p(self.decoder.learnable);
        let lpos = s.p(self.decoder.learn_pos);
        let learn = s.graph.add(learn, lpos);

        let learn_out = match self.config.fusion_mode {
            FusionMode::Concat => {
                let total = l_cond + l_learn;
                let mut parts = cond_parts;
                parts.push(SeqPart { var: learn, len: l_learn, shared: true });
                let mut x = s.graph.concat_seq(&parts, batch);
                let comb = build_combination_mask(l_cond, l_learn)?;
                let mut key_valid = Vec::with_capacity(batch * total);
                for b in 0..batch {
                    key_valid.extend_from_slice(&cond_valid[b * l_cond..(b + 1) * l_cond]);
                    key_valid.extend(std::iter::repeat(true).take(l_learn));
                }
                let mask = SeqMask {
                    batch,
                    q_len: total,
                    k_len: total,
                    allow: Some(Rc::new(comb.allow)),
                    key_valid: Some(Rc::new(key_valid)),
                };
                for blk in &self.decoder.blocks {
                    x = blk.forward(s, x, &mask);
                }
                s.graph.slice_seq(x, total, l_cond, l_learn)
            }
            FusionMode::CrossAttention => {
                let memory = s.graph.concat_seq(&cond_parts, batch);
                let mut x = s.graph.concat_seq(&[SeqPart { var: learn, len: l_learn, shared: true }], batch);
                let self_mask = SeqMask {
                    batch,
                    q_len: l_learn,
                    k_len: l_learn,
                    allow: Some(Rc::new(causal_allow(l_learn))),
                    key_valid: None,
                };
                let mem_mask = SeqMask {
                    batch,
                    q_len: l_learn,
                    k_len: l_cond,
                    allow: None,
                    key_valid: Some(Rc::new(cond_valid)),
                };
                for blk in &self.decoder.blocks {
                    x = blk.forward_with_memory(s, x, &self_mask, Some((memory, &mem_mask)));
                }
                x
            }
        };
        let h = self.decoder.ln_final.forward(s, learn_out);
        Ok(self.decoder.head.forward(s, h))
    }

    /// Evaluation-mode forward over a training batch.
    pub fn forward_train(&self, batch: &TrainingBatch) -> Result<ModelOutputs<T>> {
        batch.validate()?;
        let mut s = Session::eval(&self.params);
        let img = self.encode_image(&mut s, &batch.images)?;
        let web = self.encode_text(&mut s, &batch.web_tokens)?;
        let sub = self.encode_text(&mut s, &batch.sub_tokens)?;
        let ie = self.embed_image(&mut s, &img);
        let we = self.embed_text(&mut s, &web);
        let se = self.embed_text(&mut s, &sub);
        let cond = (self.config.condition_mode == ConditionMode::ImageAndText).then_some(&web);
        let logits = self.decode_captions(&mut s, &img, cond)?;
        Ok(ModelOutputs {
            image_embed: s.graph.value(ie).clone(),
            text_embed_orig: s.graph.value(we).clone(),
            text_embed_syn: s.graph.value(se).clone(),
            caption_logits: s.graph.value(logits).clone(),
            temperature: self.temperature(),
        })
    }

    /// Unit-norm image embeddings, computed in chunks of `chunk` images.
    pub fn image_embeddings(&self, images: &[RgbImage], chunk: usize) -> Result<Matrix<T>> {
        let mut parts = Vec::new();
        for c in images.chunks(chunk.max(1)) {
            let mut s = Session::eval(&self.params);
            let f = self.encode_image(&mut s, c)?;
            let e = self.embed_image(&mut s, &f);
            parts.push(s.graph.value(e).clone());
        }
        Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
    }

    /// Unit-norm text embeddings, computed in chunks of `chunk` sequences.
    pub fn text_embeddings(&self, seqs: &[TokenSequence], chunk: usize) -> Result<Matrix<T>> {
        let mut parts = Vec::new();
        for c in seqs.chunks(chunk.max(1)) {
            let mut s = Session::eval(&self.params);
            let f = self.encode_text(&mut s, c)?;
            let e = self.embed_text(&mut s, &f);
            parts.push(s.graph.value(e).clone());
        }
        Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
    }

    /// Greedy caption ids (argmax per learnable position) for each image/web-caption pair.
    pub fn caption_ids(&self, images: &[RgbImage], web: &[TokenSequence]) -> Result<Vec<Vec<u32>>> {
        let mut s = Session::eval(&self.params);
        let img = self.encode_image(&mut s, images)?;
        let w = match self.config.condition_mode {
            ConditionMode::ImageAndText => Some(self.encode_text(&mut s, web)?),
            ConditionMode::ImageOnly => None,
        };
        let logits = self.decode_captions(&mut s, &img, w.as_ref())?;
        let l = s.graph.value(logits);
        let lo = self.config.output_token_len;
        Ok((0..images.len())
            .map(|b| {
                (0..lo)
                    .map(|t| {
                        let row = l.row(b * lo + t);
                        let mut best = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = i;
                            }
                        }
                        best as u32
                    })
                    .collect()
            })
            .collect())
    }
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resampling of a row-major `old × old` grid of vectors to `new × new`
/// (half-pixel centres, edge clamping).
pub fn resize_grid_bicubic<T: Scalar>(grid: &Matrix<T>, old: usize, new: usize) -> Matrix<T> {
    assert_eq!(grid.rows(), old * old, "grid rows");
    let d = grid.cols();
    let scale = old as f64 / new as f64;
    let taps = |dst: usize| -> [(usize, f64); 4] {
        let src = (dst as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let frac = src - base;
        let mut out = [(0usize, 0.0f64); 4];
        for (k, o) in out.iter_mut().enumerate() {
            let off = k as f64 - 1.0;
            let idx = (base + off).clamp(0.0, (old - 1) as f64) as usize;
            *o = (idx, cubic_weight(off - frac));
        }
        out
    };
    let mut out = Matrix::zeros(new * new, d);
    for y in 0..new {
        let ty = taps(y);
        for x in 0..new {
            let tx = taps(x);
            let row = out.row_mut(y * new + x);
            for &(iy, wy) in &ty {
                for &(ix, wx) in &tx {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let w = T::from_f64_lossy(w);
                    for (o, &v) in row.iter_mut().zip(grid.row(iy * old + ix)) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    out
}
