//! Diagnostics: velocity variance under different negative conditions,
//! parallel/orthogonal decomposition of the guidance difference, and
//! per-block attention certainty.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::PromptTokens;
use crate::error::{invalid, Result};
use crate::guidance::project;
use crate::hopfield::RectificationConfig;
use crate::model::{denoiser_forward_with_attention, ConditionEmbedding, Model, VelocityModel};
use crate::rng::{stream2, Domain};
use crate::sampler::Trajectory;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 50;

/// Uniform bins over `[0, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let hi = values.iter().copied().fold(0.0, f64::max);
        let mut counts = vec![0; bins];
        for &v in values {
            let b = if hi > 0.0 { ((v / hi) * bins as f64) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        Histogram { hi, counts }
    }

    pub fn mass(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Per-location variances and their histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSeries {
    pub values: Vec<f64>,
    pub histogram: Histogram,
}

impl VarianceSeries {
    fn new(values: Vec<f64>) -> Self {
        let histogram = Histogram::of(&values, HISTOGRAM_BINS);
        VarianceSeries { values, histogram }
    }
}

/// Keys of `marginal` and `conditional` are the negative-branch variants:
/// `"null"` (learned null condition) and `"rectified"` (`φ^τ_c`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub locations: usize,
    pub draws: usize,
    pub marginal: IndexMap<String, VarianceSeries>,
    pub conditional: IndexMap<String, VarianceSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudyConfig {
    pub n_seeds: usize,
    pub seed: u64,
    pub tau_c: f64,
    pub enc_lo: usize,
    pub enc_hi: usize,
}

/// Unbiased per-column variance of `rows`.
fn column_variance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    (0..d)
        .map(|j| {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

/// Velocities at `t = 0` over `n_seeds` noise draws per prompt, for the
/// clean condition and both negative variants.
pub fn variance_study<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    prompts: &[PromptTokens],
    cfg: &VarianceStudyConfig,
) -> Result<VarianceReport> {
    if cfg.n_seeds < 2 {
        return Err(invalid("variance_study", "n_seeds must be at least 2"));
    }
    if prompts.is_empty() {
        return Err(invalid("variance_study", "at least one prompt is required"));
    }
    let side = model.image_side();
    let clean = model.encode(prompts, 1.0, 0, 0)?;
    let rect = model.encode(prompts, cfg.tau_c, cfg.enc_lo, cfg.enc_hi)?;
    let null = model.null_condition();
    let off = RectificationConfig::off();
    let t = T::zero();

    let names = ["null", "rectified"];
    let mut neg: [Vec<Vec<f64>>; 2] = Default::default();
    let mut diff: [Vec<Vec<f64>>; 2] = Default::default();
    for (p, (c, r)) in clean.iter().zip(&rect).enumerate() {
        let mut data = Vec::with_capacity(cfg.n_seeds * side * side);
        for s in 0..cfg.n_seeds {
            let mut rng = stream2(cfg.seed, Domain::Variance, p as u64, s as u64);
            data.extend_from_slice(Tensor::<T>::randn(&[1, side, side], &mut rng).data());
        }
        let x = Tensor::new(vec![cfg.n_seeds, 1, side, side], data)?;
        let vc = model.velocity(&x, t, std::slice::from_ref(c), &off)?;
        let negs = [
            model.velocity(&x, t, std::slice::from_ref(&null), &off)?,
            model.velocity(&x, t, std::slice::from_ref(r), &off)?,
        ];
        let per = side * side;
        for (i, vn) in negs.iter().enumerate() {
            for s in 0..cfg.n_seeds {
                let a = &vc.data()[s * per..(s + 1) * per];
                let b = &vn.data()[s * per..(s + 1) * per];
                neg[i].push(b.iter().map(|v| v.as_f64()).collect());
                diff[i].push(a.iter().zip(b).map(|(x, y)| (*x - *y).as_f64()).collect());
            }
        }
    }
    let mut marginal = IndexMap::new();
    let mut conditional = IndexMap::new();
    for (i, name) in names.iter().enumerate() {
        marginal.insert(name.to_string(), VarianceSeries::new(column_variance(&neg[i])));
        conditional.insert(name.to_string(), VarianceSeries::new(column_variance(&diff[i])));
    }
    Ok(VarianceReport {
        locations: side * side,
        draws: neg[0].len(),
        marginal,
        conditional,
    })
}

/// Per-step norms of the parts of `d = v_pos − v_neg` parallel and
/// orthogonal to `v_pos`. Projections are per sample; norms aggregate the
/// batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTrace {
    pub times: Vec<f64>,
    pub parallel: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub difference: Vec<f64>,
    /// Steps where some sample had `v_pos = 0` (parallel part taken as 0).
    pub flagged: Vec<usize>,
}

pub fn decomposition_trace<T: Scalar>(traj: &Trajectory<T>) -> Result<DecompositionTrace> {
    let mut out = DecompositionTrace {
        times: Vec::new(),
        parallel: Vec::new(),
        orthogonal: Vec::new(),
        difference: Vec::new(),
        flagged: Vec::new(),
    };
    for (k, (pos, neg)) in traj.positive.iter().zip(&traj.negative).enumerate() {
        let neg = neg
            .as_ref()
            .ok_or_else(|| invalid("decomposition_trace", "trajectory did not record a negative velocity"))?;
        let b = pos.shape().first().copied().unwrap_or(1).max(1);
        let per = pos.len() / b;
        let (mut p2, mut o2, mut d2, mut flag) = (0.0, 0.0, 0.0, false);
        for i in 0..b {
            let slice = |t: &Tensor<T>| Tensor::new(vec![per], t.data()[i * per..(i + 1) * per].to_vec());
            let vp = slice(pos)?;
            let d = vp.sub(&slice(neg)?)?;
            flag |= vp.sq_norm() == T::zero();
            let (par, orth) = project(&d, &vp)?;
            p2 += par.sq_norm().as_f64();
            o2 += orth.sq_norm().as_f64();
            d2 += d.sq_norm().as_f64();
        }
        out.times.push(traj.times.get(k).map_or(f64::NAN, |t| t.as_f64()));
        out.parallel.push(p2.sqrt());
        out.orthogonal.push(o2.sqrt());
        out.difference.push(d2.sqrt());
        if flag {
            out.flagged.push(k);
        }
    }
    Ok(out)
}

/// Per-block fraction of image-token attention rows whose maximum
/// probability exceeds the threshold, averaged over heads and batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyProfile {
    pub threshold: f64,
    pub per_block: Vec<f64>,
}

/// Certainty of captured `[B, heads, T, T]` probabilities over the first
/// `rows` query rows of each block.
pub fn certainty_from_probs<T: Scalar>(probs: &[Tensor<T>], rows: usize, threshold: f64) -> Result<CertaintyProfile> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid("certainty_profile", "threshold must lie in (0, 1)"));
    }
    let mut per_block = Vec::with_capacity(probs.len());
    for p in probs {
        let s = p.shape();
        if s.len() != 4 || s[2] != s[3] || rows > s[2] {
            return Err(invalid("certainty_profile", format!("bad probability shape {s:?}")));
        }
        let t = s[3];
        let (mut hits, mut total) = (0usize, 0usize);
        for bh in 0..s[0] * s[1] {
            for r in 0..rows {
                let row = &p.data()[(bh * t + r) * t..(bh * t + r + 1) * t];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                hits += usize::from(m.as_f64() > threshold);
                total += 1;
            }
        }
        per_block.push(if total == 0 { 0.0 } else { hits as f64 / total as f64 });
    }
    Ok(CertaintyProfile { threshold, per_block })
}

/// One forward at `(x_t, t)`, capturing attention in every block. `rect`
/// is normally off; other settings inject a modified attention for checks.
pub fn certainty_profile<T: Scalar>(
    model: &Model<T>,
    x_t: &Tensor<T>,
    t: T,
    cond: &[ConditionEmbedding<T>],
    rect: &RectificationConfig,
    threshold: f64,
) -> Result<CertaintyProfile> {
    let (_, probs) = denoiser_forward_with_attention(model, x_t, t, cond, rect)?;
    certainty_from_probs(&probs, model.denoiser.image_tokens(), threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> SeriesSummary {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return SeriesSummary {
            min: f64::NAN,
            median: f64::NAN,
            max: f64::NAN,
        };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    SeriesSummary {
        min: v[0],
        median,
        max: v[n - 1],
    }
}

/// Writes equal-length named columns as CSV and a `{name: {min, median,
/// max}}` JSON summary next to it (`<stem>.csv`, `<stem>.json`).
pub fn export_series(dir: &Path, stem: &str, columns: &[(&str, &[f64])]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != n) {
        return Err(invalid("export_series", "columns differ in length"));
    }
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    w.write_record(columns.iter().map(|c| c.0))?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| format!("{:.6}", c.1[i])))?;
    }
    w.flush()?;
    let summary: IndexMap<&str, SeriesSummary> = columns.iter().map(|c| (c.0, summarize(c.1))).collect();
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

pub fn export_variance(dir: &Path, report: &VarianceReport) -> Result<()> {
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    for (kind, map) in [("marginal", &report.marginal), ("conditional", &report.conditional)] {
        for (name, s) in map {
            cols.push((format!("{kind}_{name}"), s.values.clone()));
        }
    }
    let view: Vec<(&str, &[f64])> = cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    export_series(dir, "variance", &view)?;

    let mut hist: Vec<(String, Vec<f64>)> = Vec::new();
    for (kind, map) in [("marginal", &report.marginal), ("conditional", &report.conditional)] {
        for (name, s) in map {
            let h = &s.histogram;
            let width = h.hi / h.counts.len() as f64;
            hist.push((format!("{kind}_{name}_lo"), (0..h.counts.len()).map(|i| i as f64 * width).collect()));
            hist.push((format!("{kind}_{name}_count"), h.counts.iter().map(|&c| c as f64).collect()));
        }
    }
    let view: Vec<(&str, &[f64])> = hist.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    export_series(dir, "variance_histogram", &view)
}

pub fn export_decomposition(dir: &Path, trace: &DecompositionTrace) -> Result<()> {
    export_series(
        dir,
        "decomposition",
        &[
            ("t", &trace.times),
            ("parallel", &trace.parallel),
            ("orthogonal", &trace.orthogonal),
            ("difference", &trace.difference),
        ],
    )
}

pub fn export_certainty(dir: &Path, profile: &CertaintyProfile) -> Result<()> {
    let blocks: Vec<f64> = (0..profile.per_block.len()).map(|b| b as f64).collect();
    export_series(dir, "certainty", &[("block", &blocks), ("fraction", &profile.per_block)])
}
