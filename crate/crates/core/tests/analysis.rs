use erg_core::analysis::{certainty_profile, variance_study, VarianceReport, VarianceStudyConfig, HISTOGRAM_BINS};
use erg_core::data::{DatasetSpec, PromptTokens};
use erg_core::hopfield::RectificationConfig;
use erg_core::model::{ConditionEmbedding, DenoiserConfig, EncoderConfig, Model, Provenance, VelocityModel};
use erg_core::rng::{stream, Domain};
use erg_core::{Result, Tensor};

/// `v(x) = scale · x`, ignoring time and condition.
struct Linear {
    scale: f64,
    side: usize,
}

impl VelocityModel<f64> for Linear {
    fn velocity(&self, x: &Tensor<f64>, _: f64, _: &[ConditionEmbedding<f64>], _: &RectificationConfig) -> Result<Tensor<f64>> {
        Ok(x.scale(self.scale))
    }

    fn encode(&self, prompts: &[PromptTokens], _: f64, _: usize, _: usize) -> Result<Vec<ConditionEmbedding<f64>>> {
        Ok(prompts.iter().map(|_| self.null_condition()).collect())
    }

    fn null_condition(&self) -> ConditionEmbedding<f64> {
        ConditionEmbedding {
            tokens: Tensor::zeros(&[1, 1]),
            provenance: Provenance::Null,
        }
    }

    fn depth(&self) -> usize {
        1
    }

    fn encoder_depth(&self) -> usize {
        1
    }

    fn image_side(&self) -> usize {
        self.side
    }
}

fn study(n_seeds: usize, tau_c: f64) -> VarianceStudyConfig {
    VarianceStudyConfig {
        n_seeds,
        seed: 3,
        tau_c,
        enc_lo: 0,
        enc_hi: 4,
    }
}

fn prompts(n: usize) -> Vec<PromptTokens> {
    let spec = DatasetSpec::default();
    (0..n).map(|i| spec.prompt(i % 8).unwrap()).collect()
}

fn all_series(r: &VarianceReport) -> impl Iterator<Item = &Vec<f64>> {
    r.marginal.values().chain(r.conditional.values()).map(|s| &s.values)
}

#[test]
fn constant_model_has_no_variance() {
    let r = variance_study(&Linear { scale: 0.0, side: 4 }, &prompts(2), &study(8, 0.01)).unwrap();
    assert!(all_series(&r).flatten().all(|&v| v == 0.0));
    for s in r.marginal.values() {
        assert_eq!(s.histogram.mass(), r.locations);
    }
}

#[test]
fn identity_model_has_unit_marginal_variance() {
    let r = variance_study(&Linear { scale: 1.0, side: 4 }, &prompts(1), &study(10_000, 0.01)).unwrap();
    for s in r.marginal.values() {
        for &v in &s.values {
            assert!((v - 1.0).abs() <= 0.05, "variance {v}");
        }
    }
}

#[test]
fn unit_encoder_temperature_has_no_conditional_variance() {
    let m = Model::<f32>::init(DenoiserConfig::default(), EncoderConfig::default(), 4).unwrap();
    let r = variance_study(&m, &prompts(2), &study(4, 1.0)).unwrap();
    assert!(r.conditional["rectified"].values.iter().all(|&v| v == 0.0));
    assert!(r.conditional["null"].values.iter().any(|&v| v > 0.0));
    assert_eq!(r.conditional["rectified"].histogram.counts.len(), HISTOGRAM_BINS);
}

#[test]
fn doubling_the_seeds_is_consistent() {
    let m = Model::<f32>::init(DenoiserConfig::default(), EncoderConfig::default(), 5).unwrap();
    let n = 32;
    let small = variance_study(&m, &prompts(2), &study(n, 0.01)).unwrap();
    let large = variance_study(&m, &prompts(2), &study(2 * n, 0.01)).unwrap();
    for (a, b) in all_series(&small).zip(all_series(&large)) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // Standard error of a sample variance is about σ²·√(2/(n−1)).
        let se = mean(a) * (2.0 / (n as f64 - 1.0)).sqrt() / (a.len() as f64).sqrt();
        assert!((mean(a) - mean(b)).abs() < 3.0 * se.max(1e-12), "{} vs {} (se {se})", mean(a), mean(b));
    }
}

#[test]
fn too_few_seeds_are_rejected() {
    assert!(variance_study(&Linear { scale: 1.0, side: 4 }, &prompts(1), &study(1, 0.5)).is_err());
}

#[test]
fn certainty_is_a_fraction_per_block_and_batch_permutation_invariant() {
    let m = Model::<f32>::init(DenoiserConfig::default(), EncoderConfig::default(), 6).unwrap();
    let x = Tensor::<f32>::randn(&[3, 1, 16, 16], &mut stream(1, Domain::Analysis, 0));
    let c = m.encode(&prompts(3), 1.0, 0, 0).unwrap();
    let off = RectificationConfig::off();
    let p = certainty_profile(&m, &x, 0.5, &c, &off, 0.2).unwrap();
    assert_eq!(p.per_block.len(), m.denoiser.depth);
    assert!(p.per_block.iter().all(|f| (0.0..=1.0).contains(f)));

    let order = [2, 0, 1];
    let per = 256;
    let xp: Vec<f32> = order.iter().flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec()).collect();
    let xp = Tensor::new(vec![3, 1, 16, 16], xp).unwrap();
    let cp: Vec<_> = order.iter().map(|&i| c[i].clone()).collect();
    let q = certainty_profile(&m, &xp, 0.5, &cp, &off, 0.2).unwrap();
    assert_eq!(p, q);
    assert!(certainty_profile(&m, &x, 0.5, &c, &off, 1.0).is_err());
}
