//! Guidance methods: each sampler step combines a positive (conditional)
//! prediction with a weakened negative one.
//!
//! | method         | positive branch          | negative branch                                   |
//! |----------------|--------------------------|---------------------------------------------------|
//! | `none`         | φ_c                      | (none)                                            |
//! | `cfg`          | φ_c                      | null condition                                    |
//! | `erg`          | φ_c                      | φ^τ_c, rectified blocks when `t > κ`              |
//! | `apg`          | φ_c                      | null condition, combined in clean space           |
//! | `erg_apg`      | φ_c                      | ERG negative, combined in clean space             |
//! | `cads`         | annealed φ_c             | null condition                                    |
//! | `erg_cads`     | annealed φ_c             | ERG negative                                      |
//! | `pag`          | φ_c                      | identity attention on the middle blocks           |
//! | `seg`          | φ_c                      | mean-query attention on the middle blocks         |
//! | `autoguidance` | φ_c                      | weak (early) checkpoint                           |

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::PromptTokens;
use crate::error::{invalid, Error, Result};
use crate::hopfield::{RectMode, RectificationConfig};
use crate::model::{ConditionEmbedding, Provenance, VelocityModel};
use crate::rng::{stream2, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Cfg,
    Erg,
    Apg,
    ErgApg,
    Cads,
    ErgCads,
    Pag,
    Seg,
    Autoguidance,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::None,
        Method::Cfg,
        Method::Erg,
        Method::Apg,
        Method::ErgApg,
        Method::Cads,
        Method::ErgCads,
        Method::Pag,
        Method::Seg,
        Method::Autoguidance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Cfg => "cfg",
            Method::Erg => "erg",
            Method::Apg => "apg",
            Method::ErgApg => "erg_apg",
            Method::Cads => "cads",
            Method::ErgCads => "erg_cads",
            Method::Pag => "pag",
            Method::Seg => "seg",
            Method::Autoguidance => "autoguidance",
        }
    }

    pub fn uses_erg(self) -> bool {
        matches!(self, Method::Erg | Method::ErgApg | Method::ErgCads)
    }

    pub fn uses_apg(self) -> bool {
        matches!(self, Method::Apg | Method::ErgApg)
    }

    pub fn uses_cads(self) -> bool {
        matches!(self, Method::Cads | Method::ErgCads)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown guidance method `{s}`"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgParams {
    /// Image-side rectification; its layer range is also where PAG and SEG act.
    pub rect: RectificationConfig,
    /// Kickoff: image-side rectification is active only when `t > kappa`.
    pub kappa: f64,
    /// Encoder attention temperature for the negative condition.
    pub tau_c: f64,
    pub enc_lo: usize,
    pub enc_hi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApgParams {
    /// Norm cap of the guidance difference; `None` means no cap.
    pub r: Option<f64>,
    /// Weight of the component parallel to the conditional estimate.
    pub eta: f64,
    /// Momentum on the running difference (negative values damp it).
    pub momentum: f64,
}

impl Default for ApgParams {
    fn default() -> Self {
        ApgParams {
            r: Some(5.0),
            eta: 0.0,
            momentum: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CadsParams {
    /// Annealing thresholds in diffusion time (noise at 1); mapped to flow
    /// time as `(1 − tau2, 1 − tau1)`.
    pub tau1: f64,
    pub tau2: f64,
    /// Noise scale.
    pub s: f64,
    /// Blend between the raw corrupted tokens (`psi = 1`) and their
    /// moment-restored version (`psi = 0`).
    pub psi: f64,
}

impl Default for CadsParams {
    fn default() -> Self {
        CadsParams {
            tau1: 0.6,
            tau2: 0.9,
            s: 0.25,
            psi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub method: Method,
    pub w: f64,
    pub erg: ErgParams,
    pub apg: ApgParams,
    pub cads: CadsParams,
    #[serde(default)]
    pub weak_ckpt_path: Option<String>,
}

impl GuidanceSpec {
    /// Defaults for a denoiser of `depth` blocks and an encoder of
    /// `enc_depth` blocks: image rectification `τ_i = 0.01, α = 1, γ = 1.5,
    /// K = 1` on the middle third, `κ = 0.4`, `τ_c = 0.01` over every encoder
    /// block.
    pub fn defaults(method: Method, w: f64, depth: usize, enc_depth: usize) -> Self {
        let lo = depth / 3;
        let hi = (lo + depth.div_ceil(3)).min(depth);
        GuidanceSpec {
            method,
            w,
            erg: ErgParams {
                rect: RectificationConfig::image_default(lo, hi),
                kappa: 0.4,
                tau_c: 0.01,
                enc_lo: 0,
                enc_hi: enc_depth,
            },
            apg: ApgParams::default(),
            cads: CadsParams::default(),
            weak_ckpt_path: None,
        }
    }

    pub fn validate(&self, depth: usize, enc_depth: usize) -> Result<()> {
        if !self.w.is_finite() {
            return Err(invalid("guidance", "w must be finite"));
        }
        let e = &self.erg;
        if !(0.0..=1.0).contains(&e.kappa) {
            return Err(invalid("guidance", "kappa must lie in [0, 1]"));
        }
        if !(e.tau_c > 0.0) {
            return Err(invalid("guidance", "tau_c must be positive"));
        }
        if e.enc_lo > e.enc_hi || e.enc_hi > enc_depth {
            return Err(invalid("guidance", format!("encoder range [{}, {}) outside depth {enc_depth}", e.enc_lo, e.enc_hi)));
        }
        e.rect.validate(depth)?;
        let c = &self.cads;
        if !(0.0 <= c.tau1 && c.tau1 <= c.tau2 && c.tau2 <= 1.0) || !(c.s >= 0.0) {
            return Err(invalid("guidance", "cads requires 0 <= tau1 <= tau2 <= 1 and s >= 0"));
        }
        if !(0.0..=1.0).contains(&c.psi) {
            return Err(invalid("guidance", "cads psi must lie in [0, 1]"));
        }
        if let Some(r) = self.apg.r {
            if !(r > 0.0) {
                return Err(invalid("guidance", "apg r must be positive"));
            }
        }
        Ok(())
    }

    /// Rectification used by PAG / SEG: the given mode on the ERG block range.
    fn baseline_rect(&self, mode: RectMode) -> RectificationConfig {
        RectificationConfig::with_mode(mode, self.erg.rect.layer_lo, self.erg.rect.layer_hi)
    }
}

/// `w·pos + (1 − w)·neg`, evaluated as `pos + (w − 1)(pos − neg)` so that
/// `w = 1` or `neg = pos` return `pos` exactly.
pub fn combine_cfg<T: Scalar>(pos: &Tensor<T>, neg: &Tensor<T>, w: T) -> Result<Tensor<T>> {
    let s = w - T::one();
    pos.zip_map(neg, "combine_cfg", |p, n| p + s * (p - n))
}

/// Clean estimate `x̂ = x_t + (1 − t)·v`.
pub fn velocity_to_clean<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    x.axpy(T::one() - t, v)
}

/// Velocity `(x̂ − x_t)/(1 − t)`; singular at `t = 1`.
pub fn clean_to_velocity<T: Scalar>(x: &Tensor<T>, clean: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    if !(t < T::one()) {
        return Err(Error::Singular);
    }
    let inv = T::one() / (T::one() - t);
    clean.zip_map(x, "clean_to_velocity", |c, xv| (c - xv) * inv)
}

/// Running difference of one APG trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ApgState<T> {
    pub momentum: Option<Tensor<T>>,
}

impl<T: Scalar> Default for ApgState<T> {
    fn default() -> Self {
        ApgState { momentum: None }
    }
}

impl<T: Scalar> ApgState<T> {
    pub fn reset(&mut self) {
        self.momentum = None;
    }
}

/// Components of `d` parallel and orthogonal to `reference`. A zero
/// reference yields a zero parallel part.
pub fn project<T: Scalar>(d: &Tensor<T>, reference: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let rr = reference.sq_norm();
    let coef = if rr > T::zero() { d.dot(reference)? / rr } else { T::zero() };
    let par = reference.scale(coef);
    let orth = d.sub(&par)?;
    Ok((par, orth))
}

/// Clean-space guidance offset of APG: momentum, norm cap, then
/// `(w − 1)(orth + η·par)` relative to `pos_clean`.
pub fn apg_offset<T: Scalar>(
    pos_clean: &Tensor<T>,
    neg_clean: &Tensor<T>,
    w: T,
    params: &ApgParams,
    state: &mut ApgState<T>,
) -> Result<Tensor<T>> {
    let mut d = pos_clean.sub(neg_clean)?;
    if let Some(m) = &state.momentum {
        d = d.axpy(T::lit(params.momentum), m)?;
    }
    state.momentum = Some(d.clone());
    if let Some(r) = params.r {
        let n = d.norm();
        let r = T::lit(r);
        if n > r {
            d = d.scale(r / n);
        }
    }
    let (par, orth) = project(&d, pos_clean)?;
    let eta = T::lit(params.eta);
    let s = w - T::one();
    orth.zip_map(&par, "apg_update", |o, p| s * (o + eta * p))
}

/// Guided clean estimate `pos_clean + (w − 1)(orth + η·par)`.
pub fn apg_update<T: Scalar>(
    pos_clean: &Tensor<T>,
    neg_clean: &Tensor<T>,
    w: T,
    params: &ApgParams,
    state: &mut ApgState<T>,
) -> Result<Tensor<T>> {
    let off = apg_offset(pos_clean, neg_clean, w, params, state)?;
    pos_clean.add(&off)
}

/// Annealing coefficient in flow time: 0 up to `1 − tau2`, linear to 1 at
/// `1 − tau1`, 1 afterwards.
pub fn cads_schedule(t: f64, params: &CadsParams) -> f64 {
    let (lo, hi) = (1.0 - params.tau2, 1.0 - params.tau1);
    if t <= lo {
        0.0
    } else if t >= hi {
        1.0
    } else {
        (t - lo) / (hi - lo)
    }
}

/// `ŷ = √g·y + s·√(1 − g)·n`, `n ~ N(0, I)`, optionally blended with a
/// version rescaled back to the mean/std of `y`.
pub fn cads_corrupt<T: Scalar, R: Rng + ?Sized>(
    cond: &ConditionEmbedding<T>,
    t: f64,
    params: &CadsParams,
    rng: &mut R,
) -> ConditionEmbedding<T> {
    let g = cads_schedule(t, params);
    let a = T::lit(g.sqrt());
    let b = T::lit(params.s * (1.0 - g).sqrt());
    let y = &cond.tokens;
    let mut out = y.map(|v| a * v);
    for o in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *o = *o + b * T::lit(n);
    }
    if params.psi < 1.0 {
        let (my, sy) = moments(y.data());
        let (mo, so) = moments(out.data());
        let psi = T::lit(params.psi);
        let ratio = if so > 0.0 { sy / so } else { 1.0 };
        for v in out.data_mut() {
            let rescaled = T::lit((v.as_f64() - mo) * ratio + my);
            *v = psi * *v + (T::one() - psi) * rescaled;
        }
    }
    ConditionEmbedding {
        tokens: out,
        provenance: Provenance::CadsCorrupted,
    }
}

fn moments<T: Scalar>(xs: &[T]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let v = xs.iter().map(|x| (x.as_f64() - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Negative prediction of PAG, SEG or AutoGuidance, under the positive
/// branch's conditioning.
pub fn baseline_negative<T: Scalar, M: VelocityModel<T>>(
    x: &Tensor<T>,
    t: T,
    cond: &[ConditionEmbedding<T>],
    model: &M,
    weak: Option<&M>,
    spec: &GuidanceSpec,
) -> Result<Tensor<T>> {
    match spec.method {
        Method::Pag => model.velocity(x, t, cond, &spec.baseline_rect(RectMode::Identity)),
        Method::Seg => model.velocity(x, t, cond, &spec.baseline_rect(RectMode::Smoothing)),
        Method::Autoguidance => {
            let weak = weak.ok_or_else(|| invalid("autoguidance", "missing weak checkpoint"))?;
            weak.velocity(x, t, cond, &RectificationConfig::off())
        }
        other => Err(invalid("baseline_negative", format!("{other} is not a baseline-negative method"))),
    }
}

/// Velocities produced for one sampler step.
#[derive(Debug, Clone)]
pub struct StepVelocities<T> {
    pub guided: Tensor<T>,
    pub positive: Tensor<T>,
    pub negative: Option<Tensor<T>>,
}

/// Trajectory-local guidance state for a batch: prompt embeddings computed
/// once, per-sample APG momentum, and the CADS noise streams.
pub struct Guide<'a, T: Scalar, M: VelocityModel<T>> {
    model: &'a M,
    weak: Option<&'a M>,
    spec: &'a GuidanceSpec,
    clean: Vec<ConditionEmbedding<T>>,
    rectified: Vec<ConditionEmbedding<T>>,
    null: Vec<ConditionEmbedding<T>>,
    apg: Vec<ApgState<T>>,
    ids: Vec<u64>,
    seed: u64,
}

impl<'a, T: Scalar, M: VelocityModel<T>> Guide<'a, T, M> {
    /// Prepares guidance for prompts `prompts` of samples `ids`.
    pub fn new(
        model: &'a M,
        weak: Option<&'a M>,
        spec: &'a GuidanceSpec,
        prompts: &[PromptTokens],
        ids: &[u64],
        seed: u64,
    ) -> Result<Self> {
        spec.validate(model.depth(), model.encoder_depth())?;
        if prompts.len() != ids.len() {
            return Err(invalid("guidance", "one prompt per sample is required"));
        }
        if spec.method == Method::Autoguidance && weak.is_none() {
            return Err(invalid("autoguidance", "missing weak checkpoint"));
        }
        let clean = model.encode(prompts, 1.0, 0, 0)?;
        let rectified = if spec.method.uses_erg() {
            model.encode(prompts, spec.erg.tau_c, spec.erg.enc_lo, spec.erg.enc_hi)?
        } else {
            Vec::new()
        };
        Ok(Guide {
            model,
            weak,
            spec,
            clean,
            rectified,
            null: vec![model.null_condition(); prompts.len()],
            apg: vec![ApgState::default(); prompts.len()],
            ids: ids.to_vec(),
            seed,
        })
    }

    pub fn batch(&self) -> usize {
        self.ids.len()
    }

    fn positive_condition(&self, t: f64, step: usize) -> Vec<ConditionEmbedding<T>> {
        if !self.spec.method.uses_cads() {
            return self.clean.clone();
        }
        self.clean
            .iter()
            .zip(&self.ids)
            .map(|(c, &id)| {
                let mut rng = stream2(self.seed, Domain::CadsNoise, id, step as u64);
                cads_corrupt(c, t, &self.spec.cads, &mut rng)
            })
            .collect()
    }

    /// Negative branch of ERG: rectified prompt embedding always, image-side
    /// rectification only after the kickoff.
    fn erg_negative(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        let rect = if t.as_f64() > self.spec.erg.kappa {
            self.spec.erg.rect.clone()
        } else {
            RectificationConfig::off()
        };
        self.model.velocity(x, t, &self.rectified, &rect)
    }

    /// Guided velocity at `(x, t)` for sampler step `step`.
    pub fn step(&mut self, x: &Tensor<T>, t: T, step: usize) -> Result<StepVelocities<T>> {
        let spec = self.spec;
        let w = T::lit(spec.w);
        let tf = t.as_f64();
        let pos_cond = self.positive_condition(tf, step);
        let positive = self.model.velocity(x, t, &pos_cond, &RectificationConfig::off())?;
        let off = RectificationConfig::off();
        let negative = match spec.method {
            Method::None => None,
            Method::Cfg | Method::Apg | Method::Cads => Some(self.model.velocity(x, t, &self.null, &off)?),
            Method::Erg | Method::ErgApg | Method::ErgCads => Some(self.erg_negative(x, t)?),
            Method::Pag | Method::Seg | Method::Autoguidance => {
                Some(baseline_negative(x, t, &self.clean, self.model, self.weak, spec)?)
            }
        };
        let guided = match &negative {
            None => positive.clone(),
            Some(neg) if spec.method.uses_apg() => self.apg_velocity(x, t, &positive, neg)?,
            Some(neg) => combine_cfg(&positive, neg, w)?,
        };
        Ok(StepVelocities {
            guided,
            positive,
            negative,
        })
    }

    /// APG in clean space, per sample, mapped back to a velocity as
    /// `v_pos + offset / (1 − t)`.
    fn apg_velocity(&mut self, x: &Tensor<T>, t: T, pos: &Tensor<T>, neg: &Tensor<T>) -> Result<Tensor<T>> {
        if !(t < T::one()) {
            return Err(Error::Singular);
        }
        let w = T::lit(self.spec.w);
        let pos_clean = velocity_to_clean(x, pos, t)?;
        let neg_clean = velocity_to_clean(x, neg, t)?;
        let per = pos.len() / self.batch().max(1);
        let shape = pos.shape()[1..].to_vec();
        let inv = T::one() / (T::one() - t);
        let mut out = pos.clone();
        for (i, state) in self.apg.iter_mut().enumerate() {
            let slice = |v: &Tensor<T>| Tensor::new(shape.clone(), v.data()[i * per..(i + 1) * per].to_vec());
            let off = apg_offset(&slice(&pos_clean)?, &slice(&neg_clean)?, w, &self.spec.apg, state)?;
            for (o, &d) in out.data_mut()[i * per..(i + 1) * per].iter_mut().zip(off.data()) {
                *o = *o + d * inv;
            }
        }
        Ok(out)
    }
}

/// One ERG velocity for a batch at `(x, t)` with freshly encoded prompts.
pub fn erg_velocity<T: Scalar, M: VelocityModel<T>>(
    x: &Tensor<T>,
    t: T,
    prompts: &[PromptTokens],
    model: &M,
    spec: &GuidanceSpec,
) -> Result<Tensor<T>> {
    if !spec.method.uses_erg() {
        return Err(invalid("erg_velocity", format!("method {} is not an ERG variant", spec.method)));
    }
    if prompts.is_empty() {
        return Err(invalid("erg_velocity", "missing prompt"));
    }
    let ids: Vec<u64> = (0..prompts.len() as u64).collect();
    let mut guide = Guide::new(model, None, spec, prompts, &ids, 0)?;
    Ok(guide.step(x, t, 0)?.guided)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[d.len()], d).unwrap()
    }

    #[test]
    fn combine_cfg_examples() {
        let (p, n) = (v(&[2.0, 0.0]), v(&[0.0, 0.0]));
        assert_eq!(combine_cfg(&p, &n, 1.0).unwrap(), p);
        assert_eq!(combine_cfg(&p, &n, 0.0).unwrap(), n);
        assert_eq!(combine_cfg(&p, &n, 3.0).unwrap(), v(&[6.0, 0.0]));
        assert!(combine_cfg(&p, &v(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn clean_velocity_conversions() {
        let x = v(&[0.0, 0.0]);
        assert_eq!(velocity_to_clean(&x, &v(&[2.0, 2.0]), 0.5).unwrap(), v(&[1.0, 1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[6], &mut rng);
        let vel = Tensor::<f64>::randn(&[6], &mut rng);
        let back = clean_to_velocity(&x, &velocity_to_clean(&x, &vel, 0.3).unwrap(), 0.3).unwrap();
        assert!(back.max_abs_diff(&vel).unwrap() < 1e-6);
        assert!(matches!(clean_to_velocity(&x, &vel, 1.0), Err(Error::Singular)));
    }

    #[test]
    fn apg_examples() {
        let no_frills = ApgParams {
            r: None,
            eta: 0.0,
            momentum: 0.0,
        };
        let p = v(&[1.0, 0.0]);
        let mut st = ApgState::default();
        assert_eq!(apg_update(&p, &p, 5.0, &no_frills, &mut st).unwrap(), p);

        let mut st = ApgState::default();
        let out = apg_update(&p, &v(&[0.0, -1.0]), 3.0, &no_frills, &mut st).unwrap();
        assert_eq!(out, v(&[1.0, 2.0]));

        // Norm cap 5 → 1 happens before projection.
        let capped = ApgParams {
            r: Some(1.0),
            eta: 1.0,
            momentum: 0.0,
        };
        let mut st = ApgState::default();
        let pos = v(&[3.0, 4.0]);
        let out = apg_update(&pos, &v(&[0.0, 0.0]), 2.0, &capped, &mut st).unwrap();
        assert!(out.sub(&pos).unwrap().max_abs_diff(&v(&[0.6, 0.8])).unwrap() < 1e-12);
    }

    #[test]
    fn apg_momentum_accumulates() {
        let params = ApgParams {
            r: None,
            eta: 1.0,
            momentum: -0.5,
        };
        let mut st = ApgState::default();
        let (p, n) = (v(&[1.0, 1.0]), v(&[0.0, 1.0]));
        apg_update(&p, &n, 2.0, &params, &mut st).unwrap();
        let out = apg_update(&p, &n, 2.0, &params, &mut st).unwrap();
        // d̃ = d + (−0.5)·d = 0.5·d
        assert!(out.max_abs_diff(&v(&[1.5, 1.0])).unwrap() < 1e-12);
        st.reset();
        assert!(st.momentum.is_none());
    }

    #[test]
    fn apg_reduces_to_cfg_in_clean_space() {
        let params = ApgParams {
            r: None,
            eta: 1.0,
            momentum: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = Tensor::<f32>::randn(&[8], &mut rng);
            let n = Tensor::<f32>::randn(&[8], &mut rng);
            let mut st = ApgState::default();
            let a = apg_update(&p, &n, 4.0, &params, &mut st).unwrap();
            let c = combine_cfg(&p, &n, 4.0).unwrap();
            assert!(a.max_abs_diff(&c).unwrap() < 1e-5);
        }
    }

    #[test]
    fn projection_is_orthogonal_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = Tensor::<f32>::randn(&[16], &mut rng);
            let r = Tensor::<f32>::randn(&[16], &mut rng);
            let (par, orth) = project(&d, &r).unwrap();
            assert!(par.add(&orth).unwrap().max_abs_diff(&d).unwrap() < 1e-5);
            assert!(par.dot(&orth).unwrap().abs() < 1e-5);
        }
        let (par, orth) = project(&v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(par, v(&[0.0, 0.0]));
        assert_eq!(orth, v(&[1.0, 2.0]));
    }

    fn emb(d: &[f64]) -> ConditionEmbedding<f64> {
        ConditionEmbedding {
            tokens: Tensor::from_f64(&[1, d.len()], d).unwrap(),
            provenance: Provenance::Clean,
        }
    }

    #[test]
    fn cads_examples() {
        let y = emb(&[0.5, -1.0, 2.0]);
        let p = CadsParams {
            tau1: 0.7,
            tau2: 0.9,
            s: 0.5,
            psi: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Clean regime: t ≥ 1 − tau1.
        assert_eq!(cads_corrupt(&y, 0.5, &p, &mut rng).tokens, y.tokens);

        // Fully annealed: t ≤ 1 − tau2.
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let got = cads_corrupt(&y, 0.05, &p, &mut r1);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let n: Vec<f64> = (0..3).map(|_| r2.sample::<f64, _>(StandardNormal)).collect();
        for (g, nn) in got.tokens.data().iter().zip(&n) {
            assert_eq!(*g, 0.5 * nn);
        }
        assert_eq!(got.provenance, Provenance::CadsCorrupted);

        // Midpoint of the ramp (flow-time ramp [0.1, 0.3]).
        let mid = CadsParams {
            tau1: 0.7,
            tau2: 0.9,
            s: 1.0,
            psi: 1.0,
        };
        assert!((cads_schedule(0.2, &mid) - 0.5).abs() < 1e-12);
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let got = cads_corrupt(&y, 0.2, &mid, &mut r1);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        for (g, yv) in got.tokens.data().iter().zip(y.tokens.data()) {
            let nn: f64 = r2.sample(StandardNormal);
            let g_ = cads_schedule(0.2, &mid);
            assert!((g - (g_.sqrt() * yv + g_.sqrt() * nn)).abs() < 1e-12);
        }
    }

    #[test]
    fn cads_without_noise_scales_tokens() {
        let y = emb(&[0.5, -1.0, 2.0]);
        let p = CadsParams {
            tau1: 0.6,
            tau2: 1.0,
            s: 0.0,
            psi: 1.0,
        };
        for t in [0.0, 0.1, 0.25, 0.39, 0.5] {
            let g = cads_schedule(t, &p);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let out = cads_corrupt(&y, t, &p, &mut rng);
            let expect = y.tokens.map(|x| g.sqrt() * x);
            assert_eq!(out.tokens, expect);
        }
    }

    #[test]
    fn spec_defaults_and_validation() {
        let s = GuidanceSpec::defaults(Method::Erg, 3.0, 6, 4);
        assert_eq!((s.erg.rect.layer_lo, s.erg.rect.layer_hi), (2, 4));
        assert_eq!((s.erg.kappa, s.erg.tau_c, s.erg.rect.tau, s.erg.rect.gamma), (0.4, 0.01, 0.01, 1.5));
        assert_eq!((s.apg.momentum, s.apg.eta, s.apg.r), (-0.5, 0.0, Some(5.0)));
        assert!(s.validate(6, 4).is_ok());
        let mut bad = s.clone();
        bad.erg.kappa = 1.5;
        assert!(bad.validate(6, 4).is_err());
        let mut bad = s.clone();
        bad.cads.tau1 = 0.95;
        assert!(bad.validate(6, 4).is_err());
        let mut bad = s;
        bad.erg.enc_hi = 9;
        assert!(bad.validate(6, 4).is_err());
        assert_eq!("erg_apg".parse::<Method>().unwrap(), Method::ErgApg);
        assert!("sag".parse::<Method>().is_err());
    }
}
