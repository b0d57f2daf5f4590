//! Desk-scale joint-attention diffusion transformer and prompt encoder.
//!
//! The denoiser runs a single token stream `[image patches ‖ condition
//! tokens]` through adaptive-norm transformer blocks; conditioning reaches
//! the image only through joint attention. Both networks expose their
//! attention layers to [`RectificationConfig`].

mod denoiser;
mod encoder;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{PromptTokens, MIN_VOCAB, PROMPT_LEN};
use crate::error::{invalid, Error, Result};
use crate::hopfield::RectificationConfig;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use denoiser::{patchify, timestep_features, unpatchify};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_side: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Length of the condition token sequence (the encoder's `max_len`).
    pub cond_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_side: 16,
            patch: 2,
            depth: 6,
            dim: 64,
            heads: 4,
            cond_tokens: PROMPT_LEN,
            mlp_ratio: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(invalid("denoiser config", "image_side must be divisible by patch"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("denoiser config", "dim must be divisible by heads"));
        }
        if self.depth == 0 || self.cond_tokens == 0 || self.mlp_ratio == 0 {
            return Err(invalid("denoiser config", "depth, cond_tokens and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        let g = self.image_side / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// Middle third of the blocks, where image-side rectification is applied
    /// by default (`[2, 4)` at depth 6).
    pub fn middle_blocks(&self) -> (usize, usize) {
        let lo = self.depth / 3;
        (lo, (lo + self.depth.div_ceil(3)).min(self.depth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab: 32,
            depth: 4,
            dim: 32,
            heads: 2,
            max_len: PROMPT_LEN,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("encoder config", "dim must be divisible by heads"));
        }
        if self.vocab < MIN_VOCAB {
            return Err(invalid("encoder config", format!("vocab must be >= {MIN_VOCAB}")));
        }
        if self.max_len == 0 || self.mlp_ratio == 0 {
            return Err(invalid("encoder config", "max_len and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Ordered name → tensor map holding every weight of a [`Model`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: IndexMap::new(),
        }
    }

    /// Inserts a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(invalid("params", format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor as a named leaf.
    pub(crate) fn on_tape(&self, tape: &mut Tape<T>) -> IndexMap<String, Var<T>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
            .collect()
    }
}

/// Where a condition embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Encoder output with standard attention.
    Clean,
    /// Encoder output with temperature-rescaled attention.
    Rectified,
    /// Learned null condition.
    Null,
    /// Annealed mixture with Gaussian noise.
    CadsCorrupted,
}

/// `[L, E]` condition tokens for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding<T> {
    pub tokens: Tensor<T>,
    pub provenance: Provenance,
}

/// The denoiser surface consumed by guidance, sampling and analysis.
pub trait VelocityModel<T: Scalar>: Sync {
    /// Velocity at flow time `t` for `x: [B, 1, S, S]` with one condition per
    /// batch item.
    fn velocity(
        &self,
        x: &Tensor<T>,
        t: T,
        cond: &[ConditionEmbedding<T>],
        rect: &RectificationConfig,
    ) -> Result<Tensor<T>>;

    /// Encodes prompts with encoder queries in blocks `[lo, hi)` scaled by `tau_c`.
    fn encode(&self, prompts: &[PromptTokens], tau_c: f64, lo: usize, hi: usize) -> Result<Vec<ConditionEmbedding<T>>>;

    fn null_condition(&self) -> ConditionEmbedding<T>;

    fn depth(&self) -> usize;

    fn encoder_depth(&self) -> usize;

    fn image_side(&self) -> usize;
}

/// Denoiser plus prompt encoder with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub params: ModelParams<T>,
}

fn init_matrix<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::<T>::randn(&[rows, cols], rng).scale(T::lit(std))
}

impl<T: Scalar> Model<T> {
    /// Seeded random initialization.
    pub fn init(denoiser: DenoiserConfig, encoder: EncoderConfig, seed: u64) -> Result<Self> {
        denoiser.validate()?;
        encoder.validate()?;
        if denoiser.cond_tokens != encoder.max_len {
            return Err(invalid("model config", "denoiser cond_tokens must equal encoder max_len"));
        }
        let mut rng = stream(seed, Domain::Params, 0);
        let mut p = ModelParams::new();
        let (d, e) = (denoiser.dim, encoder.dim);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let zeros = |n: usize| Tensor::<T>::zeros(&[n]);

        // Prompt encoder.
        p.insert("enc.tok", init_matrix(encoder.vocab, e, 1.0, &mut rng))?;
        p.insert("enc.pos", init_matrix(encoder.max_len, e, 0.5, &mut rng))?;
        for i in 0..encoder.depth {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("enc.blk{i}.attn.{w}"), init_matrix(e, e, fan(e), &mut rng))?;
            }
            let h = e * encoder.mlp_ratio;
            p.insert(format!("enc.blk{i}.mlp.w1"), init_matrix(e, h, fan(e), &mut rng))?;
            p.insert(format!("enc.blk{i}.mlp.b1"), zeros(h))?;
            p.insert(format!("enc.blk{i}.mlp.w2"), init_matrix(h, e, fan(h), &mut rng))?;
            p.insert(format!("enc.blk{i}.mlp.b2"), zeros(e))?;
        }
        p.insert("enc.null", init_matrix(encoder.max_len, e, 1.0, &mut rng))?;

        // Denoiser.
        let pd = denoiser.patch_dim();
        p.insert("patch.w", init_matrix(pd, d, fan(pd), &mut rng))?;
        p.insert("patch.b", zeros(d))?;
        p.insert("pos", init_matrix(denoiser.image_tokens(), d, 0.5, &mut rng))?;
        p.insert("time.w1", init_matrix(d, d, fan(d), &mut rng))?;
        p.insert("time.b1", zeros(d))?;
        p.insert("time.w2", init_matrix(d, d, fan(d), &mut rng))?;
        p.insert("time.b2", zeros(d))?;
        p.insert("cond.w", init_matrix(e, d, fan(e), &mut rng))?;
        p.insert("cond.b", zeros(d))?;
        p.insert("cond.pos", init_matrix(denoiser.cond_tokens, d, 0.5, &mut rng))?;
        for i in 0..denoiser.depth {
            p.insert(format!("blk{i}.mod.w"), init_matrix(d, 6 * d, 0.02, &mut rng))?;
            p.insert(format!("blk{i}.mod.b"), zeros(6 * d))?;
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("blk{i}.attn.{w}"), init_matrix(d, d, fan(d), &mut rng))?;
            }
            let h = d * denoiser.mlp_ratio;
            p.insert(format!("blk{i}.mlp.w1"), init_matrix(d, h, fan(d), &mut rng))?;
            p.insert(format!("blk{i}.mlp.b1"), zeros(h))?;
            p.insert(format!("blk{i}.mlp.w2"), init_matrix(h, d, fan(h), &mut rng))?;
            p.insert(format!("blk{i}.mlp.b2"), zeros(d))?;
        }
        p.insert("final.mod.w", init_matrix(d, 2 * d, 0.02, &mut rng))?;
        p.insert("final.mod.b", zeros(2 * d))?;
        p.insert("final.w", init_matrix(d, pd, 0.1 * fan(d), &mut rng))?;
        p.insert("final.b", zeros(pd))?;

        Ok(Model {
            denoiser,
            encoder,
            params: p,
        })
    }

    /// Wraps existing weights, checking every expected tensor is present with
    /// the right shape.
    pub fn from_params(denoiser: DenoiserConfig, encoder: EncoderConfig, params: ModelParams<T>) -> Result<Self> {
        let reference = Model::<T>::init(denoiser.clone(), encoder.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_params",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(invalid("from_params", "unexpected extra parameters"));
        }
        Ok(Model {
            denoiser,
            encoder,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            denoiser: self.denoiser.clone(),
            encoder: self.encoder.clone(),
            params: self.params.cast(),
        }
    }

    /// Stacks per-sample conditions into `[B, L, E]`.
    pub(crate) fn stack_conditions(&self, cond: &[ConditionEmbedding<T>], batch: usize) -> Result<Tensor<T>> {
        let (l, e) = (self.encoder.max_len, self.encoder.dim);
        if cond.len() != batch && cond.len() != 1 {
            return Err(invalid("denoiser_forward", format!("{} conditions for batch {batch}", cond.len())));
        }
        let mut data = Vec::with_capacity(batch * l * e);
        for b in 0..batch {
            let c = &cond[if cond.len() == 1 { 0 } else { b }];
            if c.tokens.shape() != [l, e] {
                return Err(Error::ShapeMismatch {
                    op: "denoiser_forward",
                    lhs: vec![l, e],
                    rhs: c.tokens.shape().to_vec(),
                });
            }
            data.extend_from_slice(c.tokens.data());
        }
        Tensor::new(vec![batch, l, e], data)
    }
}

impl<T: Scalar> VelocityModel<T> for Model<T> {
    fn velocity(
        &self,
        x: &Tensor<T>,
        t: T,
        cond: &[ConditionEmbedding<T>],
        rect: &RectificationConfig,
    ) -> Result<Tensor<T>> {
        denoiser_forward(self, x, t, cond, rect)
    }

    fn encode(&self, prompts: &[PromptTokens], tau_c: f64, lo: usize, hi: usize) -> Result<Vec<ConditionEmbedding<T>>> {
        encoder_forward(self, prompts, tau_c, lo, hi)
    }

    fn null_condition(&self) -> ConditionEmbedding<T> {
        ConditionEmbedding {
            tokens: self.params.get("enc.null").expect("initialized model").clone(),
            provenance: Provenance::Null,
        }
    }

    fn depth(&self) -> usize {
        self.denoiser.depth
    }

    fn encoder_depth(&self) -> usize {
        self.encoder.depth
    }

    fn image_side(&self) -> usize {
        self.denoiser.image_side
    }
}

/// Learned time embedding: sinusoidal features of `t` through a two-layer map.
pub fn time_embedding<T: Scalar>(model: &Model<T>, t: T) -> Result<Tensor<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(invalid("time_embedding", "t must lie in [0, 1]"));
    }
    let mut tape = Tape::inference();
    let pv = model.params.on_tape(&mut tape);
    let emb = denoiser::time_embed(model, &mut tape, &pv, &[t])?;
    emb.into_value().into_shape(&[model.denoiser.dim])
}

/// Encodes prompts; encoder queries in blocks `[lo, hi)` are scaled by
/// `tau_c` (`tau_c = 1` gives the unmodified embedding).
pub fn encoder_forward<T: Scalar>(
    model: &Model<T>,
    prompts: &[PromptTokens],
    tau_c: f64,
    lo: usize,
    hi: usize,
) -> Result<Vec<ConditionEmbedding<T>>> {
    if !(tau_c > 0.0) {
        return Err(invalid("encoder_forward", "tau_c must be positive"));
    }
    if lo > hi || hi > model.encoder.depth {
        return Err(invalid("encoder_forward", format!("block range [{lo}, {hi}) outside encoder depth {}", model.encoder.depth)));
    }
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let rect = RectificationConfig::temperature(tau_c, lo, hi);
    let provenance = if tau_c == 1.0 || lo == hi {
        Provenance::Clean
    } else {
        Provenance::Rectified
    };
    let (l, e) = (model.encoder.max_len, model.encoder.dim);
    let mut out: Vec<Option<ConditionEmbedding<T>>> = vec![None; prompts.len()];
    let mut lengths: Vec<usize> = prompts.iter().map(PromptTokens::len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for len in lengths {
        let idx: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].len() == len).collect();
        let group: Vec<PromptTokens> = idx.iter().map(|&i| prompts[i].clone()).collect();
        let mut tape = Tape::inference();
        let pv = model.params.on_tape(&mut tape);
        let enc = encoder::encode(model, &mut tape, &pv, &group, &rect)?.into_value();
        for (&i, c) in idx.iter().zip(enc.data().chunks(l * e)) {
            out[i] = Some(ConditionEmbedding {
                tokens: Tensor::new(vec![l, e], c.to_vec())?,
                provenance,
            });
        }
    }
    Ok(out.into_iter().map(|c| c.expect("every prompt encoded")).collect())
}

/// Velocity prediction for `x_t: [B, 1, S, S]`; blocks inside the
/// rectification range use rectified attention on the image tokens.
pub fn denoiser_forward<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    t: T,
    cond: &[ConditionEmbedding<T>],
    rect: &RectificationConfig,
) -> Result<Tensor<T>> {
    Ok(denoiser::forward_inference(model, x, t, cond, rect, false)?.0)
}

/// [`denoiser_forward`] that also returns each block's `[B, heads, T, T]`
/// attention probabilities.
pub fn denoiser_forward_with_attention<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    t: T,
    cond: &[ConditionEmbedding<T>],
    rect: &RectificationConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    denoiser::forward_inference(model, x, t, cond, rect, true)
}

pub(crate) use denoiser::{encode_train, forward_train};
