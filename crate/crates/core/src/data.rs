//! Synthetic multi-mode dataset: Gaussian blobs on a ring, each mode with a
//! short attribute "prompt".

use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{stream, Domain};
use crate::sampler::write_pgm;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
const POS_BASE: usize = 2;
const POS_GRID: usize = 4;
const SIZE_BASE: usize = POS_BASE + POS_GRID * POS_GRID;
const SIZE_BUCKETS: usize = 3;
const INTENSITY_BASE: usize = SIZE_BASE + SIZE_BUCKETS;
const INTENSITY_BUCKETS: usize = 4;
/// Smallest vocabulary that covers every prompt token.
pub const MIN_VOCAB: usize = INTENSITY_BASE + INTENSITY_BUCKETS;
/// Prompt length including the leading BOS.
pub const PROMPT_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub id: usize,
    /// Blob center `(x, y)` in pixels, `x` along columns.
    pub center: [f64; 2],
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub modes: Vec<ModeSpec>,
    pub image_side: usize,
    pub samples_per_mode: usize,
    /// Standard deviation of the center jitter, in pixels.
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// 16×16 images, 8 modes on a ring of radius 4.5 px, blob radius 2 px,
    /// alternating intensities, 0.5 px jitter, 512 samples per mode.
    fn default() -> Self {
        let side = 16usize;
        let mid = (side as f64 - 1.0) / 2.0;
        let modes = (0..8)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                ModeSpec {
                    id: i,
                    center: [mid + 4.5 * a.cos(), mid + 4.5 * a.sin()],
                    radius: 2.0,
                    intensity: if i % 2 == 0 { 1.0 } else { 0.75 },
                }
            })
            .collect();
        DatasetSpec {
            modes,
            image_side: side,
            samples_per_mode: 512,
            jitter_std: 0.5,
            seed: 0,
        }
    }
}

/// Token ids describing one mode: `[BOS, position, size, intensity]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens(pub Vec<usize>);

impl PromptTokens {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, S, S]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub mode: usize,
    pub prompt: PromptTokens,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(invalid("dataset", "at least one mode is required"));
        }
        if self.image_side == 0 {
            return Err(invalid("dataset", "image_side must be positive"));
        }
        if !(self.jitter_std >= 0.0) {
            return Err(invalid("dataset", "jitter_std must be >= 0"));
        }
        let hi = (self.image_side - 1) as f64;
        for (k, m) in self.modes.iter().enumerate() {
            if self.modes[..k].iter().any(|o| o.id == m.id) {
                return Err(invalid("dataset", format!("duplicate mode id {}", m.id)));
            }
            if !(0.0..=hi).contains(&m.center[0]) || !(0.0..=hi).contains(&m.center[1]) {
                return Err(invalid("dataset", format!("mode {} center outside the image", m.id)));
            }
            if !(m.intensity > 0.0 && m.intensity <= 1.0) {
                return Err(invalid("dataset", format!("mode {} intensity must lie in (0, 1]", m.id)));
            }
            if !(m.radius > 0.0) {
                return Err(invalid("dataset", format!("mode {} radius must be positive", m.id)));
            }
        }
        Ok(())
    }

    pub fn mode(&self, id: usize) -> Option<&ModeSpec> {
        self.modes.iter().find(|m| m.id == id)
    }

    /// Prompt for mode `id`.
    pub fn prompt(&self, id: usize) -> Result<PromptTokens> {
        let m = self
            .mode(id)
            .ok_or_else(|| invalid("prompt", format!("unknown mode id {id}")))?;
        Ok(prompt_for(m, self.image_side))
    }

    pub fn len(&self) -> usize {
        self.modes.len() * self.samples_per_mode
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn prompt_for(m: &ModeSpec, side: usize) -> PromptTokens {
    let cell = side as f64 / POS_GRID as f64;
    let bucket = |v: f64| ((v / cell).floor().max(0.0) as usize).min(POS_GRID - 1);
    let pos = bucket(m.center[1]) * POS_GRID + bucket(m.center[0]);
    let size = if m.radius < 1.5 {
        0
    } else if m.radius < 2.5 {
        1
    } else {
        2
    };
    let level = ((m.intensity * INTENSITY_BUCKETS as f64 - 1e-9).floor().max(0.0) as usize).min(INTENSITY_BUCKETS - 1);
    PromptTokens(vec![BOS, POS_BASE + pos, SIZE_BASE + size, INTENSITY_BASE + level])
}

/// `2·intensity·exp(−‖p − c‖² / (2 r²)) − 1` at every pixel, row-major.
pub fn render(side: usize, center: [f64; 2], radius: f64, intensity: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(side * side);
    let denom = 2.0 * radius * radius;
    for r in 0..side {
        for c in 0..side {
            let dx = c as f64 - center[0];
            let dy = r as f64 - center[1];
            out.push((2.0 * intensity * (-(dx * dx + dy * dy) / denom).exp() - 1.0) as f32);
        }
    }
    out
}

/// Jitter is Gaussian clamped to this many standard deviations.
const JITTER_CLIP: f64 = 2.0;

/// Renders sample `index` (mode-major order). Pure in `(spec, index)`.
pub fn render_sample(spec: &DatasetSpec, index: usize) -> Sample {
    let m = &spec.modes[index / spec.samples_per_mode];
    let mut rng = stream(spec.seed, Domain::Dataset, index as u64);
    let jx = rng.sample::<f64, _>(StandardNormal).clamp(-JITTER_CLIP, JITTER_CLIP);
    let jy = rng.sample::<f64, _>(StandardNormal).clamp(-JITTER_CLIP, JITTER_CLIP);
    let center = [m.center[0] + spec.jitter_std * jx, m.center[1] + spec.jitter_std * jy];
    let side = spec.image_side;
    Sample {
        image: Tensor::new(vec![1, side, side], render(side, center, m.radius, m.intensity)).expect("side² pixels"),
        mode: m.id,
        prompt: prompt_for(m, side),
    }
}

/// Every sample of the dataset, mode-major.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.len()).map(|i| render_sample(spec, i)).collect())
}

/// Zero-jitter prototype of each mode, flattened, keyed by mode id.
pub fn mode_center_table(spec: &DatasetSpec) -> Result<IndexMap<usize, Vec<f32>>> {
    spec.validate()?;
    Ok(spec
        .modes
        .iter()
        .map(|m| (m.id, render(spec.image_side, m.center, m.radius, m.intensity)))
        .collect())
}

/// One line of a sample directory's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub mode: usize,
    pub tokens: Vec<usize>,
}

/// Reads `index.json` of a sample directory.
pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("index.json"))?)?)
}

/// Writes every sample as `sample_NNNNN.pgm` plus `index.json`.
pub fn dump(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:05}.pgm");
        write_pgm(&dir.join(&file), &s.image)?;
        index.push(IndexEntry {
            file,
            mode: s.mode,
            tokens: s.prompt.0.clone(),
        });
    }
    std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            samples_per_mode: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_jitter_samples_are_identical() {
        let spec = DatasetSpec {
            jitter_std: 0.0,
            ..small()
        };
        let data = generate(&spec).unwrap();
        for chunk in data.chunks(spec.samples_per_mode) {
            assert!(chunk.iter().all(|s| s.image == chunk[0].image));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = DatasetSpec { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn blob_center_pixel_value() {
        let spec = DatasetSpec {
            modes: vec![ModeSpec {
                id: 0,
                center: [5.0, 9.0],
                radius: 2.0,
                intensity: 0.8,
            }],
            jitter_std: 0.0,
            samples_per_mode: 1,
            ..DatasetSpec::default()
        };
        let s = &generate(&spec).unwrap()[0];
        let v = s.image.data()[9 * 16 + 5];
        assert!((v - (2.0 * 0.8 - 1.0)).abs() < 1e-6);
        assert!(s.image.data().iter().all(|&p| (-1.0..=1.0).contains(&p)));
    }

    #[test]
    fn prototypes_are_distinct_and_match_zero_jitter_samples() {
        let spec = DatasetSpec::default();
        let table = mode_center_table(&spec).unwrap();
        assert_eq!(table.len(), 8);
        let protos: Vec<_> = table.values().collect();
        let mut min = f32::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                let d: f32 = protos[i].iter().zip(protos[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);

        let flat = DatasetSpec {
            jitter_std: 0.0,
            samples_per_mode: 1,
            ..spec.clone()
        };
        for s in generate(&flat).unwrap() {
            assert_eq!(s.image.data(), &table[&s.mode][..]);
        }

        let single = DatasetSpec {
            modes: spec.modes[..1].to_vec(),
            ..spec
        };
        assert_eq!(mode_center_table(&single).unwrap().len(), 1);
    }

    #[test]
    fn every_sample_is_nearest_to_its_own_prototype() {
        let spec = DatasetSpec::default();
        assert!(spec.jitter_std <= spec.modes[0].radius / 2.0);
        let table = mode_center_table(&spec).unwrap();
        for s in generate(&spec).unwrap() {
            let nearest = table
                .iter()
                .map(|(&id, p)| {
                    let d: f32 = p.iter().zip(s.image.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, id)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            assert_eq!(nearest, s.mode);
        }
    }

    #[test]
    fn prompts_are_distinct_and_in_vocab() {
        let spec = DatasetSpec::default();
        let prompts: Vec<_> = spec.modes.iter().map(|m| spec.prompt(m.id).unwrap()).collect();
        for (i, p) in prompts.iter().enumerate() {
            assert_eq!(p.len(), PROMPT_LEN);
            assert!(p.ids().iter().all(|&t| t < MIN_VOCAB));
            assert!(prompts[..i].iter().all(|q| q != p));
        }
        assert!(spec.prompt(99).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small();
        spec.modes[0].intensity = 1.5;
        assert!(generate(&spec).is_err());
        let mut spec = small();
        spec.modes[0].center = [-1.0, 3.0];
        assert!(generate(&spec).is_err());
        let mut spec = small();
        spec.modes[1].id = 0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn sample_is_independent_of_generation_order() {
        let spec = small();
        let all = generate(&spec).unwrap();
        for i in [0, 17, 127] {
            assert_eq!(render_sample(&spec, i), all[i]);
        }
    }
}
