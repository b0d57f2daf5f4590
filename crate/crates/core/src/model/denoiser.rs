use super::encoder::{pv, Vars};
use super::{ConditionEmbedding, Model};
use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::hopfield::RectificationConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved `[sin, cos]` pairs of `1000·t` against a geometric frequency
/// ladder from 1 down to 1/10000.
pub fn timestep_features<T: Scalar>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    let scaled = t.as_f64() * 1000.0;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = scaled * freq;
        out[2 * i] = T::lit(arg.sin());
        out[2 * i + 1] = T::lit(arg.cos());
    }
    out
}

/// `[B, 1, S, S] → [B, (S/p)², p²]`, patches in raster order.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] || patch == 0 || s[2] % patch != 0 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![patch],
        });
    }
    let (b, side) = (s[0], s[2]);
    let g = side / patch;
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        let img = &x.data()[bi * side * side..(bi + 1) * side * side];
        for gr in 0..g {
            for gc in 0..g {
                for r in 0..patch {
                    let row = (gr * patch + r) * side + gc * patch;
                    out.extend_from_slice(&img[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(y: &Tensor<T>, side: usize, patch: usize) -> Result<Tensor<T>> {
    let s = y.shape();
    let g = side / patch.max(1);
    if s.len() != 3 || patch == 0 || side % patch != 0 || s[1] != g * g || s[2] != patch * patch {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: s.to_vec(),
            rhs: vec![side, patch],
        });
    }
    let b = s[0];
    let mut out = vec![T::zero(); b * side * side];
    for bi in 0..b {
        for gr in 0..g {
            for gc in 0..g {
                let tok = &y.data()[((bi * g + gr) * g + gc) * patch * patch..][..patch * patch];
                for r in 0..patch {
                    let dst = bi * side * side + (gr * patch + r) * side + gc * patch;
                    out[dst..dst + patch].copy_from_slice(&tok[r * patch..(r + 1) * patch]);
                }
            }
        }
    }
    Tensor::new(vec![b, 1, side, side], out)
}

pub(super) fn time_embed<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>, vars: &Vars<T>, ts: &[T]) -> Result<Var<T>> {
    let d = model.denoiser.dim;
    let feats: Vec<T> = ts.iter().flat_map(|&t| timestep_features(t, d)).collect();
    let f = tape.constant(Tensor::new(vec![ts.len(), d], feats)?);
    let h = tape.linear(&f, pv(vars, "time.w1")?, pv(vars, "time.b1")?)?;
    let h = tape.silu(&h)?;
    tape.linear(&h, pv(vars, "time.w2")?, pv(vars, "time.b2")?)
}

/// `x·(1 + scale) + shift`, with `[B, D]` modulation broadcast over tokens.
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, shift: &Var<T>, scale: &Var<T>) -> Result<Var<T>> {
    let tokens = x.shape()[1];
    let scale = tape.add_scalar(scale, T::one())?;
    let scale = tape.broadcast_tokens(&scale, tokens)?;
    let shift = tape.broadcast_tokens(shift, tokens)?;
    let y = tape.mul(x, &scale)?;
    tape.add(&y, &shift)
}

fn gated<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, gate: &Var<T>, h: &Var<T>) -> Result<Var<T>> {
    let g = tape.broadcast_tokens(gate, x.shape()[1])?;
    let gh = tape.mul(&g, h)?;
    tape.add(x, &gh)
}

/// Shared trunk: patch tokens `[B, Ti, p²]` and condition tokens `[B, L, E]`
/// to patch-space velocity `[B, Ti, p²]`. With `capture`, each block's
/// attention probabilities are returned as well.
fn trunk<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &Vars<T>,
    patches: &Var<T>,
    ts: &[T],
    cond: &Var<T>,
    rect: &RectificationConfig,
    capture: bool,
) -> Result<(Var<T>, Vec<Tensor<T>>)> {
    let cfg = &model.denoiser;
    let (b, d) = (patches.shape()[0], cfg.dim);
    let (ti, l) = (cfg.image_tokens(), cfg.cond_tokens);
    let tokens = ti + l;
    rect.validate(cfg.depth)?;

    let x_img = tape.linear(patches, pv(vars, "patch.w")?, pv(vars, "patch.b")?)?;
    let pos = tape.tile_batch(pv(vars, "pos")?, b)?;
    let x_img = tape.add(&x_img, &pos)?;
    let c = tape.linear(cond, pv(vars, "cond.w")?, pv(vars, "cond.b")?)?;
    let cpos = tape.tile_batch(pv(vars, "cond.pos")?, b)?;
    let c = tape.add(&c, &cpos)?;
    let mut x = tape.concat_tokens(&x_img, &c)?;

    let temb = time_embed(model, tape, vars, ts)?;
    let temb = tape.silu(&temb)?;

    let off = RectificationConfig::off();
    let mut probs = Vec::new();
    for i in 0..cfg.depth {
        let m = tape.linear(&temb, pv(vars, &format!("blk{i}.mod.w"))?, pv(vars, &format!("blk{i}.mod.b"))?)?;
        let chunk = |tape: &mut Tape<T>, k: usize| tape.split_cols(&m, k * d, d);
        let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

        let h = tape.layer_norm(&x)?;
        let h = modulate(tape, &h, &shift1, &scale1)?;
        let q = tape.matmul(&h, pv(vars, &format!("blk{i}.attn.wq"))?)?;
        let k = tape.matmul(&h, pv(vars, &format!("blk{i}.attn.wk"))?)?;
        let v = tape.matmul(&h, pv(vars, &format!("blk{i}.attn.wv"))?)?;
        let layer = if rect.covers(i) { rect } else { &off };
        let (a, p) = tape.attention(&q, &k, &v, cfg.heads, layer, ti)?;
        if capture {
            probs.push(Tensor::new(vec![b, cfg.heads, tokens, tokens], p)?);
        }
        let a = tape.matmul(&a, pv(vars, &format!("blk{i}.attn.wo"))?)?;
        x = gated(tape, &x, &gate1, &a)?;

        let h = tape.layer_norm(&x)?;
        let h = modulate(tape, &h, &shift2, &scale2)?;
        let h = tape.linear(&h, pv(vars, &format!("blk{i}.mlp.w1"))?, pv(vars, &format!("blk{i}.mlp.b1"))?)?;
        let h = tape.gelu(&h)?;
        let h = tape.linear(&h, pv(vars, &format!("blk{i}.mlp.w2"))?, pv(vars, &format!("blk{i}.mlp.b2"))?)?;
        x = gated(tape, &x, &gate2, &h)?;
    }

    let m = tape.linear(&temb, pv(vars, "final.mod.w")?, pv(vars, "final.mod.b")?)?;
    let shift = tape.split_cols(&m, 0, d)?;
    let scale = tape.split_cols(&m, d, d)?;
    let img = tape.slice_tokens(&x, 0, ti)?;
    let h = tape.layer_norm(&img)?;
    let h = modulate(tape, &h, &shift, &scale)?;
    let out = tape.linear(&h, pv(vars, "final.w")?, pv(vars, "final.b")?)?;
    Ok((out, probs))
}

fn check_input<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<()> {
    let s = model.denoiser.image_side;
    if x.rank() != 4 || x.shape()[1..] != [1, s, s] {
        return Err(Error::ShapeMismatch {
            op: "denoiser_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 1, s, s],
        });
    }
    Ok(())
}

pub(super) fn forward_inference<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    t: T,
    cond: &[ConditionEmbedding<T>],
    rect: &RectificationConfig,
    capture: bool,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    check_input(model, x)?;
    let b = x.shape()[0];
    let mut tape = Tape::inference();
    let vars = model.params.on_tape(&mut tape);
    let patches = tape.constant(patchify(x, model.denoiser.patch)?);
    let cond = tape.constant(model.stack_conditions(cond, b)?);
    let ts = vec![t; b];
    let (out, probs) = trunk(model, &mut tape, &vars, &patches, &ts, &cond, rect, capture)?;
    let v = unpatchify(out.value(), model.denoiser.image_side, model.denoiser.patch)?;
    Ok((v.check_finite("denoiser_forward")?, probs))
}

/// Recording forward used by training; returns patch-space velocity.
pub(crate) fn forward_train<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &Vars<T>,
    patches: &Tensor<T>,
    ts: &[T],
    cond: &Var<T>,
) -> Result<Var<T>> {
    if ts.len() != patches.shape()[0] {
        return Err(invalid("forward_train", "one time per batch item is required"));
    }
    let patches = tape.constant(patches.clone());
    let (out, _) = trunk(model, tape, vars, &patches, ts, cond, &RectificationConfig::off(), false)?;
    Ok(out)
}

/// Prompt encoding on a recording tape, for joint training.
pub(crate) fn encode_train<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &Vars<T>,
    prompts: &[crate::data::PromptTokens],
) -> Result<Var<T>> {
    super::encoder::encode(model, tape, vars, prompts, &RectificationConfig::off())
}
