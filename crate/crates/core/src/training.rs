//! Batch assembly, the optimisation step, and stage-level training runs.

use std::fmt;
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::error::{ClipsError, Result};
use crate::model::{ClipsModel, ConditionMode, FusionMode, ModelConfig};
use crate::nn::Session;
use crate::objectives::{caption_loss_graph, info_nce_graph, multi_positive_graph, total_loss_graph, CaptionReduction};
use crate::optim::{clip_grad_norm, AdamW, LrSchedule};
use crate::scalar::Scalar;
use crate::text::{pad_to_length, Reduction, SentenceSplit, TokenId, TokenSequence, Vocab, BOS_ID, EOS_ID, PAD_ID};
use crate::toy_data::CaptionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl FromStr for Stage {
    type Err = ClipsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            _ => Err(ClipsError::config(format!("unknown stage {s:?} (pretrain|finetune)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
        })
    }
}

/// Which texts the contrastive term pairs with each image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Two positives per image: the web caption and the reduced synthetic caption.
    MultiPositive,
    /// Web caption only.
    Web,
    /// Reduced synthetic caption only.
    Synthetic,
    /// One positive per image, the web caption with probability `web_prob`, else the reduced synthetic caption.
    Mixed,
}

impl FromStr for ContrastiveMode {
    type Err = ClipsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_positive" => Ok(Self::MultiPositive),
            "web" => Ok(Self::Web),
            "synthetic" => Ok(Self::Synthetic),
            "mixed" => Ok(Self::Mixed),
            _ => Err(ClipsError::config(format!("unknown contrastive mode {s:?} (multi_positive|web|synthetic|mixed)"))),
        }
    }
}

/// Everything a training stage needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Square input resolution in pixels.
    pub resolution: usize,
    pub epochs: usize,
    /// Optional hard cap on optimiser steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub contrastive: ContrastiveMode,
    pub web_prob: f64,
    /// Applied to the synthetic caption before the text encoder.
    pub sub_reduction: Reduction,
    pub caption_reduction: CaptionReduction,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            resolution: 32,
            epochs: 1,
            max_steps: None,
            batch_size: 64,
            lr: 3e-4,
            min_lr: 0.0,
            adam_betas: (0.9, 0.95),
            weight_decay: 0.2,
            warmup_steps: 100,
            grad_clip: 1.0,
            alpha: 1.0,
            beta: 2.0,
            seed: 0,
            contrastive: ContrastiveMode::MultiPositive,
            web_prob: 0.5,
            sub_reduction: Reduction::SingleSentence,
            caption_reduction: CaptionReduction::Mean,
            model: ModelConfig::default(),
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "stage",
    "resolution",
    "epochs",
    "max_steps",
    "batch_size",
    "lr",
    "min_lr",
    "adam_beta1",
    "adam_beta2",
    "weight_decay",
    "warmup_steps",
    "grad_clip",
    "alpha",
    "beta",
    "seed",
    "contrastive",
    "web_prob",
    "sub_reduction",
    "caption_reduction",
    "patch_size",
    "embed_dim",
    "n_heads",
    "n_layers_vision",
    "n_layers_text",
    "n_layers_decoder",
    "mlp_ratio",
    "input_token_len",
    "output_token_len",
    "fusion_mode",
    "condition_mode",
    "text_encoder_causal",
    "temperature_init",
    "max_decoder_len",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| ClipsError::config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ClipsError::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| ClipsError::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ClipsError::config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "stage" => self.stage = v.parse()?,
            "resolution" => self.resolution = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "adam_beta1" => self.adam_betas.0 = parse(key, v)?,
            "adam_beta2" => self.adam_betas.1 = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "contrastive" => self.contrastive = v.parse()?,
            "web_prob" => self.web_prob = parse(key, v)?,
            "sub_reduction" => self.sub_reduction = Reduction::parse(v)?,
            "caption_reduction" => self.caption_reduction = v.parse()?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "n_layers_vision" => m.n_layers_vision = parse(key, v)?,
            "n_layers_text" => m.n_layers_text = parse(key, v)?,
            "n_layers_decoder" => m.n_layers_decoder = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "input_token_len" => m.input_token_len = parse(key, v)?,
            "output_token_len" => {
                m.output_token_len = parse(key, v)?;
                m.n_learnable_tokens = m.output_token_len;
            }
            "fusion_mode" => {
                m.fusion_mode = match v {
                    "concat" => FusionMode::Concat,
                    "cross_attention" => FusionMode::CrossAttention,
                    _ => return Err(ClipsError::config(format!("unknown fusion mode {v:?}"))),
                }
            }
            "condition_mode" => {
                m.condition_mode = match v {
                    "image_only" => ConditionMode::ImageOnly,
                    "image_and_text" => ConditionMode::ImageAndText,
                    _ => return Err(ClipsError::config(format!("unknown condition mode {v:?}"))),
                }
            }
            "text_encoder_causal" => m.text_encoder_causal = parse(key, v)?,
            "temperature_init" => m.temperature_init = parse(key, v)?,
            "max_decoder_len" => m.max_decoder_len = parse(key, v)?,
            _ => return Err(ClipsError::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Serialises back to the flat file format.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("stage", self.stage.to_string());
        put("resolution", self.resolution.to_string());
        put("epochs", self.epochs.to_string());
        put("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string()));
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("min_lr", self.min_lr.to_string());
        put("adam_beta1", self.adam_betas.0.to_string());
        put("adam_beta2", self.adam_betas.1.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("seed", self.seed.to_string());
        put("contrastive", serde_plain(&self.contrastive));
        put("web_prob", self.web_prob.to_string());
        put("sub_reduction", self.sub_reduction.to_string());
        put("caption_reduction", serde_plain(&self.caption_reduction));
        put("patch_size", m.patch_size.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("n_heads", m.n_heads.to_string());
        put("n_layers_vision", m.n_layers_vision.to_string());
        put("n_layers_text", m.n_layers_text.to_string());
        put("n_layers_decoder", m.n_layers_decoder.to_string());
        put("mlp_ratio", m.mlp_ratio.to_string());
        put("input_token_len", m.input_token_len.to_string());
        put("output_token_len", m.output_token_len.to_string());
        put("fusion_mode", serde_plain(&m.fusion_mode));
        put("condition_mode", serde_plain(&m.condition_mode));
        put("text_encoder_causal", m.text_encoder_causal.to_string());
        put("temperature_init", m.temperature_init.to_string());
        put("max_decoder_len", m.max_decoder_len.to_string());
        out
    }

    /// Model configuration for this stage's resolution and the given vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig { image_size: self.resolution, vocab_size, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClipsError::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative (got {}, {})", self.alpha, self.beta));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.web_prob) {
            return bad(format!("web_prob {} outside [0, 1]", self.web_prob));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive".into());
        }
        self.model_config(self.model.vocab_size).validate()
    }
}

fn serde_plain<V: Serialize>(v: &V) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_owned)).unwrap_or_default()
}

/// One assembled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub images: Vec<RgbImage>,
    pub web_tokens: Vec<TokenSequence>,
    /// Reduced synthetic captions, padded to the encoder length.
    pub sub_tokens: Vec<TokenSequence>,
    /// BOS + full synthetic caption + EOS, padded to the decoder length.
    pub target_tokens: Vec<TokenSequence>,
    /// Per-example choice for [`ContrastiveMode::Mixed`].
    pub prefer_web: Vec<bool>,
    pub rng_seed: u64,
    /// Dataset indices of the examples.
    pub indices: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if n == 0 {
            return Err(ClipsError::invalid("empty batch"));
        }
        let lens = [self.web_tokens.len(), self.sub_tokens.len(), self.target_tokens.len(), self.prefer_web.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(ClipsError::invalid("batch fields disagree on batch size"));
        }
        let dim = self.images[0].dimensions();
        if self.images.iter().any(|i| i.dimensions() != dim) {
            return Err(ClipsError::invalid("mixed image sizes in batch"));
        }
        Ok(())
    }
}

/// A record tokenised and resized once, ready for repeated sampling.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub image: RgbImage,
    pub web: Vec<TokenId>,
    pub split: SentenceSplit,
    pub full: Vec<TokenId>,
}

pub fn resize_image(img: &RgbImage, size: usize) -> RgbImage {
    let s = size as u32;
    if img.dimensions() == (s, s) {
        img.clone()
    } else {
        image::imageops::resize(img, s, s, FilterType::Triangle)
    }
}

/// Tokenises and resizes; `None` for records lacking either caption.
pub fn prepare_record(rec: &CaptionRecord, vocab: &Vocab, resolution: usize) -> Result<Option<PreparedRecord>> {
    if rec.web_caption.trim().is_empty() || rec.synthetic_caption.trim().is_empty() {
        return Ok(None);
    }
    let split = vocab.split_sentences(&rec.synthetic_caption);
    if split.is_empty() {
        return Ok(None);
    }
    Ok(Some(PreparedRecord {
        image: resize_image(&rec.image.load()?, resolution),
        web: vocab.tokenize(&rec.web_caption),
        full: vocab.tokenize(&rec.synthetic_caption),
        split,
    }))
}

/// Prepares a whole corpus; returns the kept records, their source indices and the skip count.
pub fn prepare_dataset(
    records: &[CaptionRecord],
    vocab: &Vocab,
    resolution: usize,
) -> Result<(Vec<PreparedRecord>, Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut idx = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (i, r) in records.iter().enumerate() {
        match prepare_record(r, vocab, resolution)? {
            Some(p) => {
                out.push(p);
                idx.push(i);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} records with a missing caption");
    }
    Ok((out, idx, skipped))
}

/// BOS-prefixed, EOS-terminated caption padded or cut to `len`.
pub fn caption_target(full: &[TokenId], len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(full.len() + 2);
    ids.push(BOS_ID);
    ids.extend_from_slice(full);
    ids.push(EOS_ID);
    pad_to_length(&ids, len, PAD_ID)
}

/// Samples sub-captions and pads everything for a set of prepared records.
pub fn assemble_batch<R: Rng + ?Sized>(
    records: &[&PreparedRecord],
    indices: Vec<usize>,
    cfg: &TrainConfig,
    rng_seed: u64,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if records.is_empty() {
        return Err(ClipsError::invalid("cannot build an empty batch"));
    }
    let lin = cfg.model.input_token_len;
    let lout = cfg.model.output_token_len;
    let mut b = TrainingBatch {
        images: Vec::with_capacity(records.len()),
        web_tokens: Vec::with_capacity(records.len()),
        sub_tokens: Vec::with_capacity(records.len()),
        target_tokens: Vec::with_capacity(records.len()),
        prefer_web: Vec::with_capacity(records.len()),
        rng_seed,
        indices,
    };
    for r in records {
        if r.image.dimensions() != (cfg.resolution as u32, cfg.resolution as u32) {
            return Err(ClipsError::invalid("prepared image does not match the stage resolution"));
        }
        b.images.push(r.image.clone());
        b.web_tokens.push(pad_to_length(&r.web, lin, PAD_ID));
        b.sub_tokens.push(pad_to_length(&cfg.sub_reduction.apply(&r.split, rng), lin, PAD_ID));
        b.target_tokens.push(caption_target(&r.full, lout));
        b.prefer_web.push(cfg.contrastive == ContrastiveMode::Mixed && rng.gen_bool(cfg.web_prob));
    }
    Ok(b)
}

/// Builds a batch straight from records; the second value counts skipped records.
pub fn make_batch<R: Rng + ?Sized>(
    records: &[CaptionRecord],
    cfg: &TrainConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(TrainingBatch, usize)> {
    let (prepared, idx, skipped) = prepare_dataset(records, vocab, cfg.resolution)?;
    let refs: Vec<_> = prepared.iter().collect();
    let seed = rng.gen();
    Ok((assemble_batch(&refs, idx, cfg, seed, rng)?, skipped))
}

/// Losses recorded onto a session, ready for backward.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Var,
    pub caption: Option<Var>,
}

/// Forward pass plus losses for one batch.
pub fn batch_losses<T: Scalar>(
    model: &ClipsModel<T>,
    s: &mut Session<'_, T>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    batch.validate()?;
    let img = model.encode_image(s, &batch.images)?;
    let ie = model.embed_image(s, &img);
    let scale = model.logit_scale(s);
    let need_web = cfg.contrastive == ContrastiveMode::MultiPositive
        || cfg.contrastive == ContrastiveMode::Web
        || (cfg.beta > 0.0 && model.config().condition_mode == ConditionMode::ImageAndText);
    let web = if need_web { Some(model.encode_text(s, &batch.web_tokens)?) } else { None };
    let contrastive = match cfg.contrastive {
        ContrastiveMode::MultiPositive => {
            let we = model.embed_text(s, web.as_ref().expect("web features"));
            let sub = model.encode_text(s, &batch.sub_tokens)?;
            let se = model.embed_text(s, &sub);
            multi_positive_graph(&mut s.graph, ie, we, se, scale)?
        }
        ContrastiveMode::Web => {
            let we = model.embed_text(s, web.as_ref().expect("web features"));
            info_nce_graph(&mut s.graph, ie, we, scale)?
        }
        ContrastiveMode::Synthetic => {
            let sub = model.encode_text(s, &batch.sub_tokens)?;
            let se = model.embed_text(s, &sub);
            info_nce_graph(&mut s.graph, ie, se, scale)?
        }
        ContrastiveMode::Mixed => {
            let texts: Vec<TokenSequence> = (0..batch.len())
                .map(|i| if batch.prefer_web[i] { batch.web_tokens[i].clone() } else { batch.sub_tokens[i].clone() })
                .collect();
            let f = model.encode_text(s, &texts)?;
            let te = model.embed_text(s, &f);
            info_nce_graph(&mut s.graph, ie, te, scale)?
        }
    };
    let caption = if cfg.beta > 0.0 {
        let cond = match model.config().condition_mode {
            ConditionMode::ImageAndText => web.as_ref(),
            ConditionMode::ImageOnly => None,
        };
        let logits = model.decode_captions(s, &img, cond)?;
        Some(caption_loss_graph(&mut s.graph, logits, &batch.target_tokens, cfg.caption_reduction)?)
    } else {
        None
    };
    let total = total_loss_graph(&mut s.graph, contrastive, caption, cfg.alpha, cfg.beta);
    Ok(LossVars { total, contrastive, caption })
}

/// Metrics for one optimiser step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub contrastive_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caption_loss: Option<f64>,
    pub total_loss: f64,
    pub temperature: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model plus optimiser state.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: ClipsModel<T>,
    pub optimizer: AdamW<T>,
    pub schedule: LrSchedule,
    pub step: u64,
    pub config: TrainConfig,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: ClipsModel<T>, config: TrainConfig, total_steps: u64) -> Self {
        let optimizer = AdamW::new(model.params(), config.adam_betas, config.weight_decay);
        let schedule =
            LrSchedule { peak: config.lr, warmup: config.warmup_steps, total: total_steps, min_lr: config.min_lr };
        Self { model, optimizer, schedule, step: 0, config }
    }
}

/// One forward/backward/update. Fails without touching parameters if the loss or gradients are not finite.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &TrainingBatch, epoch: usize) -> Result<StepMetrics> {
    let res = state.config.resolution as u32;
    if batch.images.first().map(|i| i.dimensions()) != Some((res, res)) {
        return Err(ClipsError::invalid(format!("batch images do not match resolution {res}")));
    }
    let (metrics, mut grads) = {
        let mut s = Session::train(state.model.params());
        let lv = batch_losses(&state.model, &mut s, batch, &state.config)?;
        let total = s.graph.value(lv.total).item().to_f64_lossy();
        let contrastive = s.graph.value(lv.contrastive).item().to_f64_lossy();
        let caption = lv.caption.map(|c| s.graph.value(c).item().to_f64_lossy());
        let non_finite = |detail: String| ClipsError::NonFinite {
            step: state.step as usize,
            batch_seed: batch.rng_seed,
            detail,
        };
        if !total.is_finite() {
            return Err(non_finite(format!("total loss {total} (contrastive {contrastive}, caption {caption:?})")));
        }
        let mut g = s.graph.backward(lv.total);
        let grads = s.param_grads(&mut g);
        if grads.iter().flatten().any(|m| !m.all_finite()) {
            return Err(non_finite("gradient contains non-finite values".into()));
        }
        let m = StepMetrics {
            step: state.step,
            epoch,
            contrastive_loss: contrastive,
            caption_loss: caption,
            total_loss: total,
            temperature: state.model.temperature().to_f64_lossy(),
            lr: state.schedule.at(state.step),
            grad_norm: 0.0,
        };
        (m, grads)
    };
    let mut metrics = metrics;
    metrics.grad_norm = clip_grad_norm(&mut grads, state.config.grad_clip);
    state.optimizer.step(state.model.params_mut(), &grads, metrics.lr);
    state.model.clamp_logit_scale();
    state.step += 1;
    Ok(metrics)
}

/// Seed for the batch drawn at `step`.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batches per epoch; a trailing chunk with fewer than two examples is dropped.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    if n % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

/// Result of a training stage.
#[derive(Debug, Clone)]
pub struct StageOutput<T: Scalar> {
    pub model: ClipsModel<T>,
    pub metrics: Vec<StepMetrics>,
    pub skipped_records: usize,
}

/// Builds the starting model for a stage, validating any init checkpoint.
pub fn init_model<T: Scalar>(cfg: &TrainConfig, vocab: &Vocab, init: Option<&Checkpoint>) -> Result<ClipsModel<T>> {
    let want = cfg.model_config(vocab.len());
    match (cfg.stage, init) {
        (Stage::Finetune, None) => Err(ClipsError::config("finetune stage requires an init checkpoint")),
        (_, None) => ClipsModel::new(want, cfg.seed),
        (stage, Some(ck)) => {
            let have = &ck.header.model;
            if ck.header.vocab != vocab.tokens() {
                return Err(ClipsError::config("checkpoint vocabulary differs from the training vocabulary"));
            }
            let same_arch = ModelConfig { image_size: want.image_size, ..have.clone() } == want;
            if !same_arch {
                return Err(ClipsError::config("model settings differ from the init checkpoint"));
            }
            if stage == Stage::Finetune && cfg.resolution < have.image_size {
                return Err(ClipsError::config(format!(
                    "finetune resolution {} is below the checkpoint resolution {}",
                    cfg.resolution, have.image_size
                )));
            }
            if stage == Stage::Pretrain && cfg.resolution != have.image_size {
                return Err(ClipsError::config("pretrain resolution differs from the init checkpoint"));
            }
            let mut m = ck.to_model::<T>()?;
            m.set_image_size(cfg.resolution)?;
            Ok(m)
        }
    }
}

/// Runs a full stage: shuffled epochs, warmup then cosine decay, one callback per step.
pub fn run_stage<T: Scalar>(
    cfg: &TrainConfig,
    records: &[CaptionRecord],
    vocab: &Vocab,
    init: Option<&Checkpoint>,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<StageOutput<T>> {
    cfg.validate()?;
    let model = init_model::<T>(cfg, vocab, init)?;
    let (prepared, src_idx, skipped) = prepare_dataset(records, vocab, cfg.resolution)?;
    if prepared.len() < 2 {
        return Err(ClipsError::invalid(format!("need at least 2 usable records, found {}", prepared.len())));
    }
    let bs = cfg.batch_size.min(prepared.len());
    let per_epoch = batches_per_epoch(prepared.len(), bs) as u64;
    let mut total = per_epoch * cfg.epochs as u64;
    if let Some(cap) = cfg.max_steps {
        total = if cfg.epochs == 0 { cap } else { total.min(cap) };
    }
    info!("{} stage: {} records, {total} steps at {}px", cfg.stage, prepared.len(), cfg.resolution);
    let mut state = TrainState::new(model, cfg.clone(), total);
    let mut metrics = Vec::with_capacity(total as usize);
    let mut epoch = 0;
    'outer: loop {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
        erng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut erng);
        for chunk in order.chunks(bs) {
            if state.step >= total {
                break 'outer;
            }
            if chunk.len() < 2 {
                continue;
            }
            let seed = batch_seed(cfg.seed, state.step);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<_> = chunk.iter().map(|&i| &prepared[i]).collect();
            let idx = chunk.iter().map(|&i| src_idx[i]).collect();
            let batch = assemble_batch(&refs, idx, cfg, seed, &mut rng)?;
            let m = train_step(&mut state, &batch, epoch)?;
            on_step(&m)?;
            metrics.push(m);
        }
        epoch += 1;
    }
    Ok(StageOutput { model: state.model, metrics, skipped_records: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_data::generate_toy_dataset;

    fn small_cfg() -> TrainConfig {
        let mut c = TrainConfig {
            resolution: 16,
            batch_size: 4,
            warmup_steps: 2,
            lr: 1e-3,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        c.model = ModelConfig {
            patch_size: 8,
            embed_dim: 16,
            n_heads: 2,
            n_layers_vision: 1,
            n_layers_text: 1,
            n_layers_decoder: 1,
            input_token_len: 80,
            output_token_len: 72,
            n_learnable_tokens: 72,
            ..ModelConfig::default()
        };
        c
    }

    #[test]
    fn kv_round_trip_and_overrides() {
        let c = small_cfg();
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut d = TrainConfig::default();
        d.apply_override("beta=0").unwrap();
        assert_eq!(d.beta, 0.0);
        d.apply_override("sub_reduction=subcaption:20").unwrap();
        assert_eq!(d.sub_reduction, Reduction::SubCaption(20));
        assert!(d.apply_override("nope=1").is_err());
        assert!(TrainConfig::from_kv("alpha = -1\n").is_err());
        assert!(TrainConfig::from_kv("lr 0.1\n").is_err());
        for k in CONFIG_KEYS {
            assert!(c.to_kv().contains(&format!("{k} = ")), "{k} missing from to_kv");
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.adam_betas, (0.9, 0.95));
        assert_eq!((c.alpha, c.beta), (1.0, 2.0));
        assert_eq!(c.weight_decay, 0.2);
        assert_eq!(c.lr, 3e-4);
    }

    #[test]
    fn batch_contents() {
        let recs = generate_toy_dataset(8, 3, 0.0).unwrap();
        let vocab = Vocab::toy();
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, skipped) = make_batch(&recs, &cfg, &vocab, &mut rng).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(b.indices, (0..8).collect::<Vec<_>>());
        for i in 0..8 {
            assert_eq!(b.images[i].dimensions(), (16, 16));
            let t = &b.target_tokens[i];
            assert_eq!(t.valid()[0], BOS_ID);
            assert_eq!(*t.valid().last().unwrap(), EOS_ID);
            assert!(b.sub_tokens[i].valid_len() < t.valid_len());
            let full = vocab.tokenize(&recs[i].synthetic_caption);
            let sub = b.sub_tokens[i].valid();
            assert!(full.windows(sub.len()).any(|w| w == sub));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(make_batch(&recs, &cfg, &vocab, &mut rng2).unwrap().0, b);
    }

    #[test]
    fn missing_caption_is_skipped() {
        let mut recs = generate_toy_dataset(3, 0, 0.0).unwrap();
        recs[1].web_caption.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, skipped) = make_batch(&recs, &small_cfg(), &Vocab::toy(), &mut rng).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(b.indices, vec![0, 2]);
    }

    #[test]
    fn target_is_cut_to_capacity() {
        let t = caption_target(&[5; 10], 6);
        assert_eq!(t.valid_len(), 6);
        assert_eq!(t.ids()[0], BOS_ID);
    }

    #[test]
    fn beta_zero_omits_caption_loss() {
        let recs = generate_toy_dataset(8, 1, 0.0).unwrap();
        let mut cfg = small_cfg();
        cfg.beta = 0.0;
        cfg.max_steps = Some(2);
        let out = run_stage::<f32>(&cfg, &recs, &Vocab::toy(), None, |_| Ok(())).unwrap();
        assert_eq!(out.metrics.len(), 2);
        for m in &out.metrics {
            assert!(m.caption_loss.is_none());
            assert_eq!(m.total_loss, m.contrastive_loss);
            assert!(!serde_json::to_string(m).unwrap().contains("caption_loss"));
        }
    }

    #[test]
    fn finetune_requires_init_and_higher_resolution() {
        let recs = generate_toy_dataset(4, 1, 0.0).unwrap();
        let vocab = Vocab::toy();
        let mut cfg = small_cfg();
        cfg.stage = Stage::Finetune;
        assert!(run_stage::<f32>(&cfg, &recs, &vocab, None, |_| Ok(())).is_err());
        let mut pre = small_cfg();
        pre.resolution = 32;
        pre.max_steps = Some(1);
        let out = run_stage::<f32>(&pre, &recs, &vocab, None, |_| Ok(())).unwrap();
        let ck = Checkpoint::from_model(&out.model, &vocab, Stage::Pretrain);
        assert!(matches!(run_stage::<f32>(&cfg, &recs, &vocab, Some(&ck), |_| Ok(())), Err(ClipsError::Config(_))));
    }

    #[test]
    fn batches_per_epoch_drops_singletons() {
        assert_eq!(batches_per_epoch(10, 4), 3);
        assert_eq!(batches_per_epoch(9, 4), 2);
        assert_eq!(batches_per_epoch(8, 4), 2);
    }
}
