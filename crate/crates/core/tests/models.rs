use erg_core::data::{DatasetSpec, PromptTokens};
use erg_core::hopfield::{RectMode, RectificationConfig};
use erg_core::model::{
    denoiser_forward, encoder_forward, time_embedding, timestep_features, ConditionEmbedding, DenoiserConfig, EncoderConfig, Model,
    VelocityModel,
};
use erg_core::rng::{stream, Domain};
use erg_core::Tensor;

fn model(seed: u64) -> Model<f32> {
    Model::init(DenoiserConfig::default(), EncoderConfig::default(), seed).unwrap()
}

fn inputs(m: &Model<f32>, b: usize) -> (Tensor<f32>, Vec<ConditionEmbedding<f32>>) {
    let spec = DatasetSpec::default();
    let prompts: Vec<PromptTokens> = (0..b).map(|i| spec.prompt(i % 8).unwrap()).collect();
    let x = Tensor::randn(&[b, 1, 16, 16], &mut stream(4, Domain::Analysis, 0));
    (x, m.encode(&prompts, 1.0, 0, 0).unwrap())
}

fn l2(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.sub(b).unwrap().norm() as f64
}

#[test]
fn raw_time_features_at_zero() {
    let f = timestep_features(0.0f64, 16);
    for pair in f.chunks(2) {
        assert_eq!(pair, [0.0, 1.0]);
    }
}

#[test]
fn time_embedding_is_deterministic_and_separates_times() {
    let m = model(0);
    let a = time_embedding(&m, 0.3f32).unwrap();
    assert_eq!(a, time_embedding(&m, 0.3f32).unwrap());
    assert_eq!(a.shape(), [m.denoiser.dim]);
    assert!(l2(&a, &time_embedding(&m, 0.7f32).unwrap()) > 0.0);
    assert!(time_embedding(&m, 1.5f32).is_err());
}

#[test]
fn unit_encoder_temperature_is_the_plain_embedding() {
    let m = model(1);
    let spec = DatasetSpec::default();
    let prompts: Vec<PromptTokens> = (0..8).map(|i| spec.prompt(i).unwrap()).collect();
    let plain = encoder_forward(&m, &prompts, 1.0, 0, 0).unwrap();
    let hooked = encoder_forward(&m, &prompts, 1.0, 0, m.encoder.depth).unwrap();
    for (a, b) in plain.iter().zip(&hooked) {
        assert!(a.tokens.max_abs_diff(&b.tokens).unwrap() <= 1e-6);
    }
}

#[test]
fn single_token_encoding_ignores_temperature() {
    let m = model(2);
    let p = [PromptTokens(vec![5])];
    let hot = encoder_forward(&m, &p, 1.0, 0, 0).unwrap();
    let cold = encoder_forward(&m, &p, 0.01, 0, m.encoder.depth).unwrap();
    assert!(hot[0].tokens.max_abs_diff(&cold[0].tokens).unwrap() <= 1e-6);
}

#[test]
fn encoder_temperature_changes_longer_prompts() {
    let m = model(2);
    let p = [DatasetSpec::default().prompt(3).unwrap()];
    let hot = encoder_forward(&m, &p, 1.0, 0, 0).unwrap();
    let cold = encoder_forward(&m, &p, 0.01, 0, m.encoder.depth).unwrap();
    assert!(hot[0].tokens.max_abs_diff(&cold[0].tokens).unwrap() > 0.0);
}

#[test]
fn encoder_rejects_out_of_vocab_tokens() {
    let m = model(2);
    assert!(encoder_forward::<f32>(&m, &[PromptTokens(vec![0, 999])], 1.0, 0, 0).is_err());
}

#[test]
fn output_shape_matches_input() {
    let m = model(3);
    let (x, c) = inputs(&m, 3);
    let v = denoiser_forward(&m, &x, 0.4, &c, &RectificationConfig::off()).unwrap();
    assert_eq!(v.shape(), x.shape());
}

#[test]
fn unit_temperature_rectification_matches_standard_forward() {
    let m = model(3);
    let (x, c) = inputs(&m, 2);
    let off = denoiser_forward(&m, &x, 0.4, &c, &RectificationConfig::off()).unwrap();
    let unit = RectificationConfig::temperature(1.0, 0, m.denoiser.depth);
    let on = denoiser_forward(&m, &x, 0.4, &c, &unit).unwrap();
    assert!(off.max_abs_diff(&on).unwrap() <= 1e-5);
}

#[test]
fn identity_attention_changes_the_output() {
    let m = model(3);
    let (x, c) = inputs(&m, 2);
    let off = denoiser_forward(&m, &x, 0.4, &c, &RectificationConfig::off()).unwrap();
    let id = RectificationConfig::with_mode(RectMode::Identity, 0, m.denoiser.depth);
    assert!(l2(&off, &denoiser_forward(&m, &x, 0.4, &c, &id).unwrap()) > 0.0);
}

#[test]
fn empty_range_is_the_standard_forward_bitwise() {
    let m = model(5);
    let (x, c) = inputs(&m, 2);
    let off = denoiser_forward(&m, &x, 0.6, &c, &RectificationConfig::off()).unwrap();
    for mode in [RectMode::Temperature, RectMode::Identity, RectMode::Smoothing] {
        let mut r = RectificationConfig::with_mode(mode, 3, 3);
        r.tau = 0.01;
        assert_eq!(denoiser_forward(&m, &x, 0.6, &c, &r).unwrap(), off, "{mode:?}");
    }
}

#[test]
fn range_beyond_depth_is_rejected() {
    let m = model(5);
    let (x, c) = inputs(&m, 1);
    let r = RectificationConfig::temperature(0.5, 2, m.denoiser.depth + 1);
    assert!(denoiser_forward(&m, &x, 0.5, &c, &r).is_err());
}

#[test]
fn conditioning_reaches_the_image_through_attention() {
    let m = model(6);
    let (x, c) = inputs(&m, 1);
    let base = denoiser_forward(&m, &x, 0.5, &c, &RectificationConfig::off()).unwrap();
    let other = m.encode(&[DatasetSpec::default().prompt(5).unwrap()], 1.0, 0, 0).unwrap();
    let moved = denoiser_forward(&m, &x, 0.5, &other, &RectificationConfig::off()).unwrap();
    assert!(l2(&base, &moved) > 0.0);
    let null = [m.null_condition()];
    assert!(l2(&base, &denoiser_forward(&m, &x, 0.5, &null, &RectificationConfig::off()).unwrap()) > 0.0);
}

#[test]
fn params_survive_a_precision_round_trip() {
    let m = model(7);
    let back: Model<f32> = m.cast::<f64>().cast();
    assert_eq!(back, m);
}
