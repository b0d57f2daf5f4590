//! Attention as Hopfield-energy minimization, plus the test-time
//! rectifications used to build weakened predictions.
//!
//! With stored patterns `X` (columns) and state `ξ`, the energy is
//!
//! ```text
//! E(ξ) = ½ ξᵀξ − α · lse_{τβ}(Xᵀξ),     lse_b(x) = b⁻¹ log Σ exp(b·x_i)
//! ∇E(ξ) = ξ − α · X softmax(τβ Xᵀξ)
//! ```
//!
//! A gradient step of size `γ` on `E` is the multi-step attention update
//! `Q ← Q − γ (Q − α softmax(τβ QKᵀ) V)`; with `α = γ = τ = 1` and one step
//! it is ordinary scaled dot-product attention.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{gemm, Scalar, View};
use crate::tensor::{dot, logsumexp, softmax_in_place, Tensor};

/// How a rectified attention layer departs from standard attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RectMode {
    /// Standard attention.
    #[default]
    Off,
    /// Queries rescaled by `tau` (a softmax temperature change), optionally
    /// followed by the multi-step energy update at unit temperature.
    Temperature,
    /// Attention map replaced by the identity (each token attends to itself).
    Identity,
    /// Every query replaced by the token-mean query: the infinite-bandwidth
    /// limit of blurring queries with a Gaussian kernel.
    Smoothing,
}

impl std::str::FromStr for RectMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(RectMode::Off),
            "temperature" => Ok(RectMode::Temperature),
            "identity" => Ok(RectMode::Identity),
            "smoothing" => Ok(RectMode::Smoothing),
            other => Err(format!("unknown rectification mode `{other}`")),
        }
    }
}

/// Test-time knobs of a rectified attention layer and the block range
/// `[layer_lo, layer_hi)` they apply to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectificationConfig {
    /// Pattern-matching weight.
    pub alpha: f64,
    /// Gradient step size.
    pub gamma: f64,
    /// Multiplier on the softmax inverse temperature.
    pub tau: f64,
    /// Number of energy-descent steps.
    pub steps: usize,
    pub mode: RectMode,
    pub layer_lo: usize,
    pub layer_hi: usize,
}

impl Default for RectificationConfig {
    fn default() -> Self {
        Self::off()
    }
}

impl RectificationConfig {
    pub fn off() -> Self {
        RectificationConfig {
            alpha: 1.0,
            gamma: 1.0,
            tau: 1.0,
            steps: 1,
            mode: RectMode::Off,
            layer_lo: 0,
            layer_hi: 0,
        }
    }

    /// Plain temperature rescaling over `[lo, hi)`.
    pub fn temperature(tau: f64, lo: usize, hi: usize) -> Self {
        RectificationConfig {
            tau,
            mode: RectMode::Temperature,
            layer_lo: lo,
            layer_hi: hi,
            ..Self::off()
        }
    }

    pub fn with_mode(mode: RectMode, lo: usize, hi: usize) -> Self {
        RectificationConfig {
            mode,
            layer_lo: lo,
            layer_hi: hi,
            ..Self::off()
        }
    }

    /// Image-side defaults of the text-to-image setting: `τ = 0.01`,
    /// `α = 1`, `γ = 1.5`, one step.
    pub fn image_default(lo: usize, hi: usize) -> Self {
        RectificationConfig {
            alpha: 1.0,
            gamma: 1.5,
            tau: 0.01,
            steps: 1,
            mode: RectMode::Temperature,
            layer_lo: lo,
            layer_hi: hi,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.steps < 1 {
            return Err(invalid("rectification", "steps must be >= 1"));
        }
        if self.mode == RectMode::Temperature && !(self.tau > 0.0) {
            return Err(invalid("rectification", "tau must be > 0 in temperature mode"));
        }
        if !(self.alpha.is_finite() && self.gamma.is_finite() && self.tau.is_finite()) {
            return Err(invalid("rectification", "non-finite hyperparameter"));
        }
        if self.layer_lo > self.layer_hi || self.layer_hi > depth {
            return Err(invalid(
                "rectification",
                format!(
                    "layer range [{}, {}) outside depth {depth}",
                    self.layer_lo, self.layer_hi
                ),
            ));
        }
        Ok(())
    }

    /// Whether block `block` is rectified.
    pub fn covers(&self, block: usize) -> bool {
        self.mode != RectMode::Off && self.layer_lo <= block && block < self.layer_hi
    }

    /// One step with unit weight and unit step size: the update collapses to
    /// a single (temperature-scaled) softmax attention.
    pub fn is_single_softmax(&self) -> bool {
        self.steps == 1 && self.gamma == 1.0 && self.alpha == 1.0
    }
}

/// Projections of one multi-head attention layer (`x·W` convention, all
/// `D × D` with `D = heads · head_dim`).
#[derive(Debug, Clone)]
pub struct AttentionLayerWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> AttentionLayerWeights<T> {
    pub fn new(
        w_q: Tensor<T>,
        w_k: Tensor<T>,
        w_v: Tensor<T>,
        w_out: Tensor<T>,
        heads: usize,
    ) -> Result<Self> {
        let d = w_q.cols();
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention weights", format!("width {d} not divisible by {heads} heads")));
        }
        for w in [&w_q, &w_k, &w_v, &w_out] {
            if w.shape() != [d, d] {
                return Err(Error::ShapeMismatch {
                    op: "attention weights",
                    lhs: vec![d, d],
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(AttentionLayerWeights {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
            head_dim: d / heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Base inverse temperature `1/√d`.
    pub fn beta(&self) -> T {
        base_beta(self.head_dim)
    }
}

pub fn base_beta<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::lit(head_dim as f64).sqrt()
}

/// `½ ξᵀξ − α · lse_{τβ}(Xᵀξ)` with `X` stored as `d × N` (patterns in columns).
pub fn hopfield_energy<T: Scalar>(xi: &Tensor<T>, x: &Tensor<T>, beta: T, tau: T, alpha: T) -> Result<T> {
    let patterns = pattern_rows(xi, x, beta, tau, "hopfield_energy")?;
    let scores: Vec<T> = patterns.chunks(xi.len()).map(|p| dot(p, xi.data())).collect();
    let half = T::lit(0.5);
    Ok(half * xi.sq_norm() - alpha * logsumexp(&scores, tau * beta))
}

/// `ξ − α · X softmax(τβ Xᵀξ)`, the gradient of [`hopfield_energy`].
pub fn energy_gradient<T: Scalar>(xi: &Tensor<T>, x: &Tensor<T>, beta: T, tau: T, alpha: T) -> Result<Tensor<T>> {
    let patterns = pattern_rows(xi, x, beta, tau, "energy_gradient")?;
    let att = attend_row(xi.data(), &patterns, &patterns, xi.len(), tau * beta);
    let g = xi
        .data()
        .iter()
        .zip(&att)
        .map(|(&q, &a)| q - alpha * a)
        .collect();
    Tensor::new(xi.shape().to_vec(), g)
}

fn pattern_rows<T: Scalar>(xi: &Tensor<T>, x: &Tensor<T>, beta: T, tau: T, op: &'static str) -> Result<Vec<T>> {
    if !(beta > T::zero() && tau > T::zero()) {
        return Err(invalid(op, "beta and tau must be positive"));
    }
    if xi.rank() != 1 || x.rank() != 2 || x.shape()[0] != xi.len() || x.shape()[1] == 0 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: xi.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok(x.transpose()?.into_data())
}

/// `Σ_j softmax(scale · q·k_j) v_j` for one query row against row-major
/// keys/values of width `d`.
pub(crate) fn attend_row<T: Scalar>(q: &[T], keys: &[T], values: &[T], d: usize, scale: T) -> Vec<T> {
    let mut p: Vec<T> = keys.chunks(d).map(|k| dot(q, k)).collect();
    softmax_in_place(&mut p, scale);
    let mut out = vec![T::zero(); d];
    for (pj, vj) in p.iter().zip(values.chunks(d)) {
        for (o, &v) in out.iter_mut().zip(vj) {
            *o = *o + *pj * v;
        }
    }
    out
}

/// One multi-step update on a single query row; returns the new row.
fn multistep_row<T: Scalar>(q: &[T], keys: &[T], values: &[T], d: usize, cfg: &RectificationConfig, beta: T) -> Vec<T> {
    let (alpha, gamma, scale) = (T::lit(cfg.alpha), T::lit(cfg.gamma), T::lit(cfg.tau) * beta);
    let mut cur = q.to_vec();
    for _ in 0..cfg.steps {
        let att = attend_row(&cur, keys, values, d, scale);
        cur = cur
            .iter()
            .zip(&att)
            .map(|(&x, &a)| x - gamma * (x - alpha * a))
            .collect();
    }
    cur
}

/// Runs `cfg.steps` energy-descent updates
/// `Q ← Q − γ (Q − α softmax(τβ QKᵀ) V)` and returns the final `Q`.
pub fn multistep_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &RectificationConfig,
    beta: T,
) -> Result<Tensor<T>> {
    if cfg.steps < 1 {
        return Err(invalid("multistep_attention", "steps must be >= 1"));
    }
    let d = q.cols();
    if q.rank() != 2 || k.rank() != 2 || k.shape() != v.shape() || k.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "multistep_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let data = q
        .data()
        .chunks(d)
        .flat_map(|row| multistep_row(row, k.data(), v.data(), d, cfg, beta))
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

/// Result of the head-split attention kernel over a `[B, T, D]` token block.
pub(crate) struct AttentionOutput<T> {
    /// `[B, T, D]` head outputs, before the output projection.
    pub out: Vec<T>,
    /// `[B, heads, T, T]` attention probabilities (first iteration for the
    /// multi-step update).
    pub probs: Vec<T>,
    /// Per-query-row logit scale used by the softmax.
    pub row_scale: Vec<T>,
    /// Whether the forward is plain softmax attention (scaled per row) and
    /// hence has a closed-form backward.
    pub differentiable: bool,
}

/// Shape of a head-split attention call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadLayout {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Multi-head attention kernel. Rows `< rect_rows` of each sequence use
/// `cfg`; the remaining rows always use standard attention.
pub(crate) fn attention_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lay: HeadLayout,
    cfg: &RectificationConfig,
    rect_rows: usize,
) -> AttentionOutput<T> {
    let HeadLayout {
        batch: b,
        tokens: t,
        heads: h,
        head_dim: dh,
    } = lay;
    let d = lay.dim();
    let beta: T = base_beta(dh);
    let rect_rows = rect_rows.min(t);

    let rect_scale = match cfg.mode {
        RectMode::Temperature => T::lit(cfg.tau) * beta,
        _ => beta,
    };
    let row_scale: Vec<T> = (0..t).map(|i| if i < rect_rows { rect_scale } else { beta }).collect();

    let smoothed;
    let q = if cfg.mode == RectMode::Smoothing && rect_rows > 0 {
        smoothed = mean_query(q, b, t, d, rect_rows);
        &smoothed[..]
    } else {
        q
    };

    let mut out = vec![T::zero(); b * t * d];
    let mut probs = vec![T::zero(); b * h * t * t];
    for bi in 0..b {
        for hi in 0..h {
            let base = bi * t * d + hi * dh;
            let p_off = (bi * h + hi) * t * t;
            let p = &mut probs[p_off..p_off + t * t];
            gemm(
                t,
                dh,
                t,
                T::one(),
                q,
                View { offset: base, rs: d, cs: 1 },
                k,
                View { offset: base, rs: 1, cs: d },
                T::zero(),
                p,
                View::row_major(0, t),
            );
            for (row, &s) in p.chunks_mut(t).zip(&row_scale) {
                softmax_in_place(row, s);
            }
            gemm(
                t,
                t,
                dh,
                T::one(),
                p,
                View::row_major(0, t),
                v,
                View { offset: base, rs: d, cs: 1 },
                T::zero(),
                &mut out,
                View { offset: base, rs: d, cs: 1 },
            );
        }
    }

    let differentiable = rect_rows == 0
        || match cfg.mode {
            RectMode::Off => true,
            RectMode::Temperature => cfg.is_single_softmax(),
            RectMode::Identity | RectMode::Smoothing => false,
        };

    match cfg.mode {
        RectMode::Identity => {
            for bi in 0..b {
                for i in 0..rect_rows {
                    let r = (bi * t + i) * d;
                    out[r..r + d].copy_from_slice(&v[r..r + d]);
                    for hi in 0..h {
                        let p_off = ((bi * h + hi) * t + i) * t;
                        let row = &mut probs[p_off..p_off + t];
                        row.fill(T::zero());
                        row[i] = T::one();
                    }
                }
            }
        }
        RectMode::Temperature if !cfg.is_single_softmax() && rect_rows > 0 => {
            // Queries are rescaled once, then descend at unit temperature.
            let tau = T::lit(cfg.tau);
            let unit = RectificationConfig { tau: 1.0, ..cfg.clone() };
            let mut qh = vec![T::zero(); dh];
            let mut kh = vec![T::zero(); t * dh];
            let mut vh = vec![T::zero(); t * dh];
            for bi in 0..b {
                for hi in 0..h {
                    for j in 0..t {
                        let src = (bi * t + j) * d + hi * dh;
                        kh[j * dh..(j + 1) * dh].copy_from_slice(&k[src..src + dh]);
                        vh[j * dh..(j + 1) * dh].copy_from_slice(&v[src..src + dh]);
                    }
                    for i in 0..rect_rows {
                        let src = (bi * t + i) * d + hi * dh;
                        for (o, &x) in qh.iter_mut().zip(&q[src..src + dh]) {
                            *o = tau * x;
                        }
                        let row = multistep_row(&qh, &kh, &vh, dh, &unit, beta);
                        out[src..src + dh].copy_from_slice(&row);
                    }
                }
            }
        }
        _ => {}
    }
    AttentionOutput {
        out,
        probs,
        row_scale,
        differentiable,
    }
}

/// Replaces the first `rows` queries of every sequence by their mean.
fn mean_query<T: Scalar>(q: &[T], b: usize, t: usize, d: usize, rows: usize) -> Vec<T> {
    let mut res = q.to_vec();
    let inv = T::one() / T::lit(rows as f64);
    for bi in 0..b {
        let mut mean = vec![T::zero(); d];
        for i in 0..rows {
            let r = (bi * t + i) * d;
            for (m, &x) in mean.iter_mut().zip(&q[r..r + d]) {
                *m = *m + x;
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
        for i in 0..rows {
            let r = (bi * t + i) * d;
            res[r..r + d].copy_from_slice(&mean);
        }
    }
    res
}

/// Multi-head self-attention over `x: [B, T, D]` with every token rectified
/// according to `cfg.mode` (the layer range is not consulted here).
pub fn rectified_mha<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionLayerWeights<T>,
    cfg: &RectificationConfig,
) -> Result<Tensor<T>> {
    let t = if x.rank() == 3 { x.shape()[1] } else { 0 };
    rectified_mha_joint(x, w, cfg, t)
}

/// Like [`rectified_mha`], but only the first `rect_tokens` tokens of each
/// sequence (the image tokens of a joint sequence) are rectified.
pub fn rectified_mha_joint<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionLayerWeights<T>,
    cfg: &RectificationConfig,
    rect_tokens: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape()[2] != w.dim() {
        return Err(Error::ShapeMismatch {
            op: "rectified_mha",
            lhs: x.shape().to_vec(),
            rhs: vec![w.dim()],
        });
    }
    if cfg.steps < 1 {
        return Err(invalid("rectified_mha", "steps must be >= 1"));
    }
    let lay = HeadLayout {
        batch: x.shape()[0],
        tokens: x.shape()[1],
        heads: w.heads,
        head_dim: w.head_dim,
    };
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    let att = attention_core(q.data(), k.data(), v.data(), lay, cfg, rect_tokens);
    Tensor::new(x.shape().to_vec(), att.out)?
        .matmul(&w.w_out)?
        .check_finite("rectified_mha")
}

/// Head-split attention probabilities `[B, heads, T, T]` of a layer, used for
/// certainty profiling.
pub fn attention_probabilities<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionLayerWeights<T>,
    cfg: &RectificationConfig,
    rect_tokens: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape()[2] != w.dim() {
        return Err(Error::ShapeMismatch {
            op: "attention_probabilities",
            lhs: x.shape().to_vec(),
            rhs: vec![w.dim()],
        });
    }
    let (b, t) = (x.shape()[0], x.shape()[1]);
    let lay = HeadLayout {
        batch: b,
        tokens: t,
        heads: w.heads,
        head_dim: w.head_dim,
    };
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    let att = attention_core(q.data(), k.data(), v.data(), lay, cfg, rect_tokens);
    Tensor::new(vec![b, w.heads, t, t], att.probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, scale: f64) -> Tensor<f64> {
        let s = q.matmul(&k.transpose().unwrap()).unwrap();
        s.softmax_rows(scale).unwrap().matmul(v).unwrap()
    }

    #[test]
    fn energy_examples() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zero = Tensor::zeros(&[2]);
        let (b, tau) = (0.5, 2.0);
        let e0 = hopfield_energy(&zero, &x, b, tau, 1.0).unwrap();
        assert!((e0 + 2f64.ln() / (tau * b)).abs() < 1e-12);

        let xi = Tensor::from_vec(vec![1.0, 0.0]);
        assert_eq!(hopfield_energy(&xi, &x, 1.0, 1.0, 0.0).unwrap(), 0.5);
        let e = hopfield_energy(&xi, &x, 1.0, 1.0, 1.0).unwrap();
        assert!((e - (0.5 - (1f64.exp() + 1.0).ln())).abs() < 1e-12);
        assert!((e + 0.8133).abs() < 1e-4);
    }

    #[test]
    fn energy_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        let xi = Tensor::from_vec(vec![1.0, 0.0]);
        assert!(hopfield_energy(&xi, &x, 1.0, 1.0, 1.0).is_err());
        assert!(energy_gradient(&xi, &x, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let mut r = rng();
        let xi = Tensor::<f64>::randn(&[3], &mut r);
        let x = Tensor::<f64>::randn(&[3, 4], &mut r);
        assert_eq!(energy_gradient(&xi, &x, 0.7, 1.3, 0.0).unwrap(), xi);

        let col = [0.3, -1.2, 2.0];
        let same = Tensor::from_rows(&col.iter().map(|&c| vec![c; 5]).collect::<Vec<_>>());
        let g = energy_gradient(&xi, &same, 0.7, 1.3, 1.0).unwrap();
        for i in 0..3 {
            assert!((g.data()[i] - (xi.data()[i] - col[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = rng();
        let xi = Tensor::<f64>::randn(&[3], &mut r);
        let x = Tensor::<f64>::randn(&[3, 4], &mut r);
        let (b, tau, a) = (0.577, 1.7, 0.8);
        let g = energy_gradient(&xi, &x, b, tau, a).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut p = xi.clone();
            p.data_mut()[i] += h;
            let mut m = xi.clone();
            m.data_mut()[i] -= h;
            let fd = (hopfield_energy(&p, &x, b, tau, a).unwrap() - hopfield_energy(&m, &x, b, tau, a).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn multistep_examples() {
        let mut r = rng();
        let q = Tensor::<f64>::randn(&[5, 4], &mut r);
        let k = Tensor::<f64>::randn(&[6, 4], &mut r);
        let v = Tensor::<f64>::randn(&[6, 4], &mut r);
        let beta = 0.5;
        let plain = RectificationConfig::temperature(1.0, 0, 0);
        let got = multistep_attention(&q, &k, &v, &plain, beta).unwrap();
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v, beta)).unwrap() < 1e-12);

        let frozen = RectificationConfig { gamma: 0.0, steps: 4, ..plain.clone() };
        assert_eq!(multistep_attention(&q, &k, &v, &frozen, beta).unwrap(), q);

        let flat = RectificationConfig::temperature(1e-6, 0, 0);
        let got = multistep_attention(&q, &k, &v, &flat, beta).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| (0..6).map(|j| v.data()[j * 4 + c]).sum::<f64>() / 6.0).collect();
        for row in got.data().chunks(4) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn multistep_rejects_mismatched_keys() {
        let q = Tensor::<f32>::zeros(&[2, 4]);
        let k = Tensor::<f32>::zeros(&[3, 4]);
        let v = Tensor::<f32>::zeros(&[2, 4]);
        let cfg = RectificationConfig::temperature(1.0, 0, 0);
        assert!(multistep_attention(&q, &k, &v, &cfg, 0.5).is_err());
    }

    #[test]
    fn image_default_matches_text_to_image_row() {
        let c = RectificationConfig::image_default(2, 4);
        assert_eq!((c.alpha, c.gamma, c.tau, c.steps), (1.0, 1.5, 0.01, 1));
        assert!(c.validate(6).is_ok());
        assert!(c.validate(3).is_err());
        assert!(c.covers(2) && c.covers(3) && !c.covers(4) && !c.covers(1));
    }

    fn weights(d: usize, heads: usize, r: &mut ChaCha8Rng) -> AttentionLayerWeights<f32> {
        let s = 1.0 / (d as f32).sqrt();
        let mk = |r: &mut ChaCha8Rng| Tensor::<f32>::randn(&[d, d], r).scale(s);
        AttentionLayerWeights::new(mk(r), mk(r), mk(r), mk(r), heads).unwrap()
    }

    #[test]
    fn temperature_mode_at_unit_parameters_is_standard() {
        let mut r = rng();
        let w = weights(8, 2, &mut r);
        let x = Tensor::<f32>::randn(&[2, 5, 8], &mut r);
        let off = rectified_mha(&x, &w, &RectificationConfig::off()).unwrap();
        let t1 = rectified_mha(&x, &w, &RectificationConfig::temperature(1.0, 0, 1)).unwrap();
        assert!(off.max_abs_diff(&t1).unwrap() < 1e-5);
    }

    #[test]
    fn identity_mode_ignores_queries_and_keys() {
        let mut r = rng();
        let w = weights(8, 2, &mut r);
        let x = Tensor::<f32>::randn(&[2, 5, 8], &mut r);
        let cfg = RectificationConfig::with_mode(RectMode::Identity, 0, 1);
        let got = rectified_mha(&x, &w, &cfg).unwrap();
        let expect = x.matmul(&w.w_v).unwrap().matmul(&w.w_out).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-6);

        let mut w2 = w.clone();
        w2.w_q = Tensor::randn(&[8, 8], &mut r);
        w2.w_k = Tensor::randn(&[8, 8], &mut r);
        assert_eq!(rectified_mha(&x, &w2, &cfg).unwrap(), got);
    }

    #[test]
    fn smoothing_mode_makes_token_outputs_equal() {
        let mut r = rng();
        let (b, t, d, h) = (2, 6, 8, 2);
        let x = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let q = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let k = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let v = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let _ = x;
        let lay = HeadLayout { batch: b, tokens: t, heads: h, head_dim: d / h };
        let cfg = RectificationConfig::with_mode(RectMode::Smoothing, 0, 1);
        let att = attention_core(q.data(), k.data(), v.data(), lay, &cfg, t);
        for bi in 0..b {
            let first = &att.out[bi * t * d..bi * t * d + d];
            for i in 1..t {
                let r0 = (bi * t + i) * d;
                assert_eq!(&att.out[r0..r0 + d], first);
            }
        }
        let std = attention_core(q.data(), k.data(), v.data(), lay, &RectificationConfig::off(), t);
        assert_ne!(std.out, att.out);
    }

    #[test]
    fn joint_rectification_leaves_condition_rows_standard() {
        let mut r = rng();
        let (b, t, d, h) = (1, 7, 8, 2);
        let q = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let k = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let v = Tensor::<f32>::randn(&[b, t, d], &mut r);
        let lay = HeadLayout { batch: b, tokens: t, heads: h, head_dim: d / h };
        let std = attention_core(q.data(), k.data(), v.data(), lay, &RectificationConfig::off(), 4);
        for cfg in [
            RectificationConfig::image_default(0, 1),
            RectificationConfig::with_mode(RectMode::Identity, 0, 1),
            RectificationConfig::with_mode(RectMode::Smoothing, 0, 1),
        ] {
            let att = attention_core(q.data(), k.data(), v.data(), lay, &cfg, 4);
            assert_eq!(&att.out[4 * d..], &std.out[4 * d..]);
            assert_ne!(&att.out[..4 * d], &std.out[..4 * d]);
            assert!(!att.differentiable);
        }
    }

    #[test]
    fn multistep_heads_descend_from_rescaled_queries() {
        let mut r = rng();
        let (t, d) = (5, 4);
        let q = Tensor::<f64>::randn(&[t, d], &mut r);
        let k = Tensor::<f64>::randn(&[t, d], &mut r);
        let v = Tensor::<f64>::randn(&[t, d], &mut r);
        let lay = HeadLayout { batch: 1, tokens: t, heads: 1, head_dim: d };
        let beta = 0.5;
        for (tau, steps) in [(0.01, 1), (0.3, 3)] {
            let cfg = RectificationConfig { tau, steps, ..RectificationConfig::image_default(0, 1) };
            let att = attention_core(q.data(), k.data(), v.data(), lay, &cfg, t);
            let unit = RectificationConfig { tau: 1.0, ..cfg.clone() };
            let expect = multistep_attention(&q.scale(tau), &k, &v, &unit, beta).unwrap();
            let got = Tensor::new(vec![t, d], att.out).unwrap();
            assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn query_rescaling_equals_logit_rescaling() {
        let mut r = rng();
        let q = Tensor::<f32>::randn(&[4, 8], &mut r);
        let k = Tensor::<f32>::randn(&[5, 8], &mut r);
        let beta = 1.0 / 8f32.sqrt();
        let kt = k.transpose().unwrap();
        for tau in [0.25f32, 0.5, 4.0] {
            let a = q.scale(tau).matmul(&kt).unwrap().softmax_rows(beta).unwrap();
            let b = q.matmul(&kt).unwrap().softmax_rows(tau * beta).unwrap();
            assert_eq!(a, b, "power-of-two tau must be exact");
        }
        for tau in [0.01f32, 0.3, 1.7] {
            let a = q.scale(tau).matmul(&kt).unwrap().softmax_rows(beta).unwrap();
            let b = q.matmul(&kt).unwrap().softmax_rows(tau * beta).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }
    }
}
