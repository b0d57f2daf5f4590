//! Euler integration of the flow ODE from noise (`t = 0`) to data (`t = 1`),
//! plus PGM image I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PromptTokens;
use crate::error::{invalid, Error, Result};
use crate::guidance::{GuidanceSpec, Guide};
use crate::model::VelocityModel;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    /// Samples processed per forward pass; results do not depend on it.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    /// Worker threads over chunks.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_chunk() -> usize {
    64
}

fn default_threads() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            seed: 0,
            chunk: default_chunk(),
            threads: default_threads(),
            record_trajectory: false,
        }
    }
}

/// Per-step record of one batch: `states[k]` is `x` at `times[k]`; `times`
/// and `states` run from `t = 0` to `t = 1`, one longer than the velocity
/// lists.
#[derive(Debug, Clone, Default)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Tensor<T>>,
    pub guided: Vec<Tensor<T>>,
    pub positive: Vec<Tensor<T>>,
    pub negative: Vec<Option<Tensor<T>>>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    /// `[B, 1, S, S]`
    pub samples: Tensor<T>,
    /// One per chunk, in order, when recording was requested.
    pub trajectories: Vec<Trajectory<T>>,
}

/// Left-endpoint grid `t_k = k/N`, `k = 0..N`.
pub fn time_grid<T: Scalar>(steps: usize) -> Vec<T> {
    (0..steps).map(|k| T::lit(k as f64 / steps as f64)).collect()
}

/// `x_{k+1} = x_k + v(x_k, t_k, k)/N`. Aborts with [`Error::Diverged`] on a
/// non-finite state.
pub fn euler_integrate<T: Scalar, F>(x0: Tensor<T>, steps: usize, mut velocity: F) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, T, usize) -> Result<Tensor<T>>,
{
    if steps == 0 {
        return Err(invalid("euler_integrate", "steps must be positive"));
    }
    let dt = T::lit(1.0 / steps as f64);
    let mut x = x0;
    for (k, t) in time_grid::<T>(steps).into_iter().enumerate() {
        let v = velocity(&x, t, k)?;
        x = x.axpy(dt, &v)?;
        if !x.all_finite() {
            return Err(Error::Diverged { step: k });
        }
    }
    Ok(x)
}

/// Initial noise of sample `id`: `[1, S, S]` standard normal.
pub fn initial_noise<T: Scalar>(seed: u64, id: u64, side: usize) -> Tensor<T> {
    let mut rng = stream(seed, Domain::InitialNoise, id);
    Tensor::randn(&[1, side, side], &mut rng)
}

fn sample_chunk<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    weak: Option<&M>,
    spec: &GuidanceSpec,
    prompts: &[PromptTokens],
    ids: &[u64],
    cfg: &SamplerConfig,
) -> Result<(Tensor<T>, Option<Trajectory<T>>)> {
    let side = model.image_side();
    let mut data = Vec::with_capacity(ids.len() * side * side);
    for &id in ids {
        data.extend_from_slice(initial_noise::<T>(cfg.seed, id, side).data());
    }
    let x0 = Tensor::new(vec![ids.len(), 1, side, side], data)?;
    let mut guide = Guide::new(model, weak, spec, prompts, ids, cfg.seed)?;
    let mut traj = cfg.record_trajectory.then(Trajectory::default);
    if let Some(tr) = traj.as_mut() {
        tr.states.push(x0.clone());
    }
    let x = euler_integrate(x0, cfg.steps, |x, t, k| {
        let v = guide.step(x, t, k)?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(t);
            tr.positive.push(v.positive);
            tr.negative.push(v.negative);
            tr.guided.push(v.guided.clone());
            let next = x.axpy(T::lit(1.0 / cfg.steps as f64), &v.guided)?;
            tr.states.push(next);
        }
        Ok(v.guided)
    })?;
    if let Some(tr) = traj.as_mut() {
        tr.times.push(T::one());
    }
    Ok((x, traj))
}

/// Samples `ids.len()` images; sample `ids[i]` is conditioned on
/// `prompts[i]` and draws its noise from its own substream, so the result for
/// a sample never depends on the rest of the batch.
pub fn euler_sample_ids<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    weak: Option<&M>,
    spec: &GuidanceSpec,
    prompts: &[PromptTokens],
    ids: &[u64],
    cfg: &SamplerConfig,
) -> Result<SampleOutput<T>> {
    if prompts.len() != ids.len() {
        return Err(invalid("euler_sample", "one prompt per sample is required"));
    }
    if cfg.steps == 0 || cfg.chunk == 0 {
        return Err(invalid("euler_sample", "steps and chunk must be positive"));
    }
    let side = model.image_side();
    let chunks: Vec<(usize, usize)> = (0..ids.len())
        .step_by(cfg.chunk)
        .map(|s| (s, (s + cfg.chunk).min(ids.len())))
        .collect();
    let run = |&(a, b): &(usize, usize)| sample_chunk(model, weak, spec, &prompts[a..b], &ids[a..b], cfg);

    let threads = cfg.threads.max(1).min(chunks.len().max(1));
    let results: Vec<Result<(Tensor<T>, Option<Trajectory<T>>)>> = if threads <= 1 {
        chunks.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<_>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(threads);
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| scope.spawn(move || group.iter().map(run).collect::<Vec<_>>()))
                .collect();
            let mut i = 0;
            for h in handles {
                for r in h.join().expect("sampler worker panicked") {
                    slots[i] = Some(r);
                    i += 1;
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk ran")).collect()
    };

    let mut data = Vec::with_capacity(ids.len() * side * side);
    let mut trajectories = Vec::new();
    for r in results {
        let (x, traj) = r?;
        data.extend_from_slice(x.data());
        trajectories.extend(traj);
    }
    Ok(SampleOutput {
        samples: Tensor::new(vec![ids.len(), 1, side, side], data)?,
        trajectories,
    })
}

/// [`euler_sample_ids`] for sample ids `0..prompts.len()`.
pub fn euler_sample<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    weak: Option<&M>,
    spec: &GuidanceSpec,
    prompts: &[PromptTokens],
    cfg: &SamplerConfig,
) -> Result<SampleOutput<T>> {
    let ids: Vec<u64> = (0..prompts.len() as u64).collect();
    euler_sample_ids(model, weak, spec, prompts, &ids, cfg)
}

/// 8-bit level of a model-range value: `[-1, 1]` maps to `0..=255`, clamped;
/// NaN maps to 0.
pub fn to_level<T: Scalar>(v: T) -> u8 {
    let p = ((v.as_f64() + 1.0) * 0.5 * 255.0).round();
    if p.is_nan() {
        0
    } else {
        p.clamp(0.0, 255.0) as u8
    }
}

pub fn from_level<T: Scalar>(p: u8, max: usize) -> T {
    T::lit(p as f64 / max as f64 * 2.0 - 1.0)
}

/// The images as they are exported: clamped to `[-1, 1]` and quantized to
/// 8 bits. Scoring this view makes in-memory evaluation agree with
/// evaluating written PGM files.
pub fn exported_view<T: Scalar>(images: &Tensor<T>) -> Tensor<T> {
    images.map(|v| from_level(to_level(v), 255))
}

/// Writes a `[1, S, S]` (or `[S, S]`) image as binary PGM, mapping `[-1, 1]`
/// to `0..=255` with clamping.
pub fn write_pgm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(invalid("write_pgm", format!("expected [1, H, W] image, got {s:?}"))),
    };
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| to_level(v)));
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`] back to `[1, H, W]` in `[-1, 1]`.
pub fn read_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| invalid("read_pgm", format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let px = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let data = px.iter().map(|&p| from_level(p, max)).collect();
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_constant_velocity_is_exact() {
        let x0 = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let x = euler_integrate(x0.clone(), 8, |_, _, _| Ok(v.clone())).unwrap();
        assert!(x.max_abs_diff(&x0.add(&v).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn euler_uses_left_endpoints() {
        let mut seen = Vec::new();
        let x0 = Tensor::<f64>::zeros(&[1]);
        euler_integrate(x0, 4, |x, t, _| {
            seen.push(t);
            Ok(x.clone())
        })
        .unwrap();
        assert_eq!(seen, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn euler_linear_field_matches_closed_form() {
        // v = x·1 → x_N = (1 + 1/N)^N x_0
        let x0 = Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap();
        let x = euler_integrate(x0, 10, |x, _, _| Ok(x.clone())).unwrap();
        assert!((x.data()[0] - 2.0 * 1.1f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn euler_reports_divergence() {
        let x0 = Tensor::<f32>::from_f64(&[1], &[1.0]).unwrap();
        let err = euler_integrate(x0, 5, |x, _, k| Ok(x.scale(if k == 2 { f32::INFINITY } else { 1.0 }))).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 2 }));
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Tensor::<f32>::from_f64(&[1, 2, 3], &[-1.0, 0.0, 1.0, 2.0, -3.0, 0.5]).unwrap();
        write_pgm(&path, &img).unwrap();
        let back: Tensor<f32> = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        let expect = [-1.0, 0.0, 1.0, 1.0, -1.0, 0.5];
        for (b, e) in back.data().iter().zip(expect) {
            assert!((b - e).abs() <= 1.0 / 255.0, "{b} vs {e}");
        }
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n3 2\n255\n"));
        assert!(write_pgm(&path, &Tensor::<f32>::zeros(&[2, 2, 2])).is_err());
        assert_eq!(exported_view(&img), back);
    }
}
