use indexmap::IndexMap;

use super::Model;
use crate::autograd::{Tape, Var};
use crate::data::PromptTokens;
use crate::error::{invalid, Result};
use crate::hopfield::RectificationConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) type Vars<T> = IndexMap<String, Var<T>>;

pub(crate) fn pv<'a, T: Scalar>(vars: &'a Vars<T>, name: &str) -> Result<&'a Var<T>> {
    vars.get(name)
        .ok_or_else(|| invalid("model", format!("missing parameter `{name}`")))
}

/// Pre-norm bidirectional transformer over prompt tokens → `[B, max_len, E]`.
/// Attention runs over the prompt's own tokens only; positions past the
/// prompt length are zero. Every prompt in the batch must have the same
/// length. `rect` selects the blocks whose attention temperature is rescaled.
pub(super) fn encode<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &Vars<T>,
    prompts: &[PromptTokens],
    rect: &RectificationConfig,
) -> Result<Var<T>> {
    let cfg = &model.encoder;
    let b = prompts.len();
    let l = prompts.first().map_or(0, PromptTokens::len);
    if l == 0 {
        return Err(invalid("encoder_forward", "missing prompt"));
    }
    let mut ids = Vec::with_capacity(b * l);
    for p in prompts {
        if p.len() != l {
            return Err(invalid("encoder_forward", "prompts in one batch must share a length"));
        }
        if p.len() > cfg.max_len {
            return Err(invalid("encoder_forward", format!("prompt of length {} exceeds max_len {}", p.len(), cfg.max_len)));
        }
        if let Some(&bad) = p.ids().iter().find(|&&t| t >= cfg.vocab) {
            return Err(invalid("encoder_forward", format!("token id {bad} out of vocab {}", cfg.vocab)));
        }
        ids.extend_from_slice(p.ids());
    }

    let tok = tape.gather(pv(vars, "enc.tok")?, &ids, &[b, l])?;
    let pos = tape.tile_batch(pv(vars, "enc.pos")?, b)?;
    let pos = tape.slice_tokens(&pos, 0, l)?;
    let mut x = tape.add(&tok, &pos)?;
    let off = RectificationConfig::off();
    for i in 0..cfg.depth {
        let layer = if rect.covers(i) { rect } else { &off };
        let h = tape.layer_norm(&x)?;
        let q = tape.matmul(&h, pv(vars, &format!("enc.blk{i}.attn.wq"))?)?;
        let k = tape.matmul(&h, pv(vars, &format!("enc.blk{i}.attn.wk"))?)?;
        let v = tape.matmul(&h, pv(vars, &format!("enc.blk{i}.attn.wv"))?)?;
        let (a, _) = tape.attention(&q, &k, &v, cfg.heads, layer, l)?;
        let a = tape.matmul(&a, pv(vars, &format!("enc.blk{i}.attn.wo"))?)?;
        x = tape.add(&x, &a)?;

        let h = tape.layer_norm(&x)?;
        let m = tape.linear(&h, pv(vars, &format!("enc.blk{i}.mlp.w1"))?, pv(vars, &format!("enc.blk{i}.mlp.b1"))?)?;
        let m = tape.gelu(&m)?;
        let m = tape.linear(&m, pv(vars, &format!("enc.blk{i}.mlp.w2"))?, pv(vars, &format!("enc.blk{i}.mlp.b2"))?)?;
        x = tape.add(&x, &m)?;
    }
    let x = tape.layer_norm(&x)?;
    if l == cfg.max_len {
        return Ok(x);
    }
    let pad = tape.constant(Tensor::zeros(&[b, cfg.max_len - l, cfg.dim]));
    tape.concat_tokens(&x, &pad)
}
