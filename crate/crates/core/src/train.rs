//! Conditional flow-matching training with condition dropout and Adam.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::checkpoint::save_checkpoint;
use crate::data::{PromptTokens, Sample};
use crate::error::{invalid, Error, Result};
use crate::model::{encode_train, forward_train, patchify, DenoiserConfig, EncoderConfig, Model, ModelParams};
use crate::rng::{stream2, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub cond_dropout_prob: f64,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cond_dropout_prob: 0.1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(invalid("train config", "steps and batch must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(invalid("train config", "cond_dropout_prob must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("train config", "invalid optimizer settings"));
        }
        Ok(())
    }

    /// Step of the early checkpoint used by AutoGuidance: `⌈steps/16⌉`.
    pub fn early_step(&self) -> usize {
        self.steps.div_ceil(16)
    }

    /// Sorted steps at which checkpoints are written (excluding the final one
    /// unless it falls on the schedule).
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut s = vec![self.early_step()];
        if self.checkpoint_every > 0 {
            s.extend((1..=self.steps / self.checkpoint_every).map(|i| i * self.checkpoint_every));
        }
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Adam moments mirroring the parameter map.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: IndexMap<_, _> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are left
    /// unchanged.
    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step = T::lit(cfg.lr / c1);
        let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.eps));
        let inv_c2 = T::lit(1.0 / c2);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m.get_mut(name).ok_or_else(|| invalid("adam", format!("no state for `{name}`")))?;
            let v = self.v.get_mut(name).ok_or_else(|| invalid("adam", format!("no state for `{name}`")))?;
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                *pi = *pi - step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `x_t = t·x1 + (1 − t)·x0` and target `u = x1 − x0`.
pub fn fm_interpolate<T: Scalar>(x1: &Tensor<T>, x0: &Tensor<T>, t: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let xt = x1.zip_map(x0, "fm_interpolate", |a, b| t * a + (T::one() - t) * b)?;
    let u = x1.sub(x0)?;
    Ok((xt, u))
}

/// One draw of the probability path for a single data point:
/// `x0 ~ N(0, I)`, `t ~ U[0, 1]`.
pub fn fm_sample_path<T: Scalar, R: Rng + ?Sized>(x1: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, T, Tensor<T>)> {
    let t = T::lit(rng.gen::<f64>());
    let x0 = Tensor::randn(x1.shape(), rng);
    let (xt, u) = fm_interpolate(x1, &x0, t)?;
    Ok((xt, t, u))
}

/// A batch laid out for one loss evaluation.
#[derive(Debug, Clone)]
pub struct PathBatch<T> {
    /// `[B, 1, S, S]`
    pub x_t: Tensor<T>,
    pub t: Vec<T>,
    /// `[B, 1, S, S]`
    pub target: Tensor<T>,
    /// `true` where the condition is replaced by the null condition.
    pub dropped: Vec<bool>,
    pub prompts: Vec<PromptTokens>,
}

/// Draws path points and dropout decisions for `batch`, per sample in the
/// order `t`, dropout coin, noise.
pub fn draw_batch<T: Scalar, R: Rng + ?Sized>(batch: &[&Sample], rng: &mut R, cond_dropout_prob: f64) -> Result<PathBatch<T>> {
    if batch.is_empty() {
        return Err(invalid("fm_loss", "empty batch"));
    }
    let shape = batch[0].image.shape().to_vec();
    let per: usize = shape.iter().product();
    let mut xt = Vec::with_capacity(batch.len() * per);
    let mut target = Vec::with_capacity(batch.len() * per);
    let (mut ts, mut dropped, mut prompts) = (Vec::new(), Vec::new(), Vec::new());
    for s in batch {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "fm_loss",
                lhs: shape.clone(),
                rhs: s.image.shape().to_vec(),
            });
        }
        let t = rng.gen::<f64>();
        dropped.push(rng.gen::<f64>() < cond_dropout_prob);
        let x1: Tensor<T> = s.image.cast();
        let x0 = Tensor::randn(x1.shape(), rng);
        let (a, u) = fm_interpolate(&x1, &x0, T::lit(t))?;
        xt.extend_from_slice(a.data());
        target.extend_from_slice(u.data());
        ts.push(T::lit(t));
        prompts.push(s.prompt.clone());
    }
    let mut full = vec![batch.len()];
    full.extend_from_slice(&shape);
    Ok(PathBatch {
        x_t: Tensor::new(full.clone(), xt)?,
        t: ts,
        target: Tensor::new(full, target)?,
        dropped,
        prompts,
    })
}

/// Mean over the batch of `‖v − u‖²` for an arbitrary velocity predictor
/// `f(x_t, t, dropped)`.
pub fn fm_loss_with<T: Scalar, R, F>(batch: &[&Sample], rng: &mut R, cond_dropout_prob: f64, mut f: F) -> Result<T>
where
    R: Rng + ?Sized,
    F: FnMut(&PathBatch<T>) -> Result<Tensor<T>>,
{
    let pb = draw_batch(batch, rng, cond_dropout_prob)?;
    let v = f(&pb)?;
    let d = v.sub(&pb.target)?;
    Ok(d.sq_norm() / T::lit(batch.len() as f64))
}

/// Loss value, gradients and how many samples used the null condition.
pub struct LossAndGrad<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub null_uses: usize,
}

/// Flow-matching loss of `model` on `batch` with gradients for every
/// parameter. The encoder is trained jointly with the denoiser.
pub fn fm_loss<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    batch: &[&Sample],
    rng: &mut R,
    cond_dropout_prob: f64,
) -> Result<LossAndGrad<T>> {
    let pb = draw_batch::<T, _>(batch, rng, cond_dropout_prob)?;
    let mut tape = Tape::new();
    let vars = model.params.on_tape(&mut tape);
    let on = encode_train(model, &mut tape, &vars, &pb.prompts)?;
    let null = vars.get("enc.null").ok_or_else(|| invalid("fm_loss", "missing null condition"))?;
    let keep: Vec<bool> = pb.dropped.iter().map(|d| !d).collect();
    let cond = tape.select_rows(&on, null, &keep)?;
    let patches = patchify(&pb.x_t, model.denoiser.patch)?;
    let target = tape.constant(patchify(&pb.target, model.denoiser.patch)?);
    let v = forward_train(model, &mut tape, &vars, &patches, &pb.t, &cond)?;
    let d = tape.sub(&v, &target)?;
    let sq = tape.mul(&d, &d)?;
    let total = tape.sum(&sq)?;
    let loss = tape.scale(&total, T::lit(1.0 / batch.len() as f64))?;
    let grads = tape.backward(&loss)?;
    Ok(LossAndGrad {
        loss: loss.value().item()?,
        grads,
        null_uses: pb.dropped.iter().filter(|&&d| d).count(),
    })
}

/// Configs stored next to checkpoints so a run directory is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    /// `(step, path)` in step order.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub losses: Vec<f64>,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.bin")
}

/// The batch of step `step`: indices drawn uniformly with replacement.
fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    stream2(seed, Domain::TrainBatch, step as u64, 0)
}

/// Trains `model` in place for `cfg.steps` Adam steps. Checkpoints go to
/// `out_dir` at `cfg.checkpoint_steps()` and at the end; `model.json`
/// records the architecture.
pub fn train<T: Scalar>(model: &mut Model<T>, cfg: &TrainConfig, dataset: &[Sample], out_dir: &Path) -> Result<TrainOutput> {
    train_with(model, cfg, dataset, out_dir, |_, _| {})
}

/// [`train`] with a per-step `(step, loss)` callback.
pub fn train_with<T: Scalar, F: FnMut(usize, f64)>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    dataset: &[Sample],
    out_dir: &Path,
    mut on_step: F,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("train", "dataset is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mc = ModelConfig {
        denoiser: model.denoiser.clone(),
        encoder: model.encoder.clone(),
    };
    std::fs::write(out_dir.join("model.json"), serde_json::to_vec_pretty(&mc)?)?;

    let schedule = cfg.checkpoint_steps();
    let mut opt = OptimizerState::new(&model.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 0..cfg.steps {
        let mut rng = batch_rng(cfg.seed, step);
        let batch: Vec<&Sample> = (0..cfg.batch).map(|_| &dataset[rng.gen_range(0..dataset.len())]).collect();
        let out = fm_loss(model, &batch, &mut rng, cfg.cond_dropout_prob)?;
        let loss = out.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.apply(&mut model.params, &out.grads, cfg)?;
        losses.push(loss);
        on_step(step, loss);
        let done = step + 1;
        if schedule.binary_search(&done).is_ok() {
            let p = checkpoint_path(out_dir, done);
            save_checkpoint(&model.params, &p)?;
            checkpoints.push((done, p));
        }
    }
    let final_checkpoint = final_checkpoint_path(out_dir);
    save_checkpoint(&model.params, &final_checkpoint)?;
    Ok(TrainOutput {
        final_checkpoint,
        checkpoints,
        losses,
    })
}

/// Loads `model.json` and a checkpoint from a run directory.
pub fn load_model<T: Scalar>(dir: &Path, checkpoint: &Path) -> Result<Model<T>> {
    let mc: ModelConfig = serde_json::from_slice(&std::fs::read(dir.join("model.json"))?)?;
    let params = crate::checkpoint::load_checkpoint(checkpoint)?;
    Model::from_params(mc.denoiser, mc.encoder, params)
}
