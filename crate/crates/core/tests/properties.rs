use erg_core::data::{generate, DatasetSpec};
use erg_core::guidance::{project, GuidanceSpec, Method};
use erg_core::hopfield::RectificationConfig;
use erg_core::metrics::{frechet_gaussian, knn_manifold_metrics, pareto_front, rank_table, Orientation};
use erg_core::model::{denoiser_forward, DenoiserConfig, EncoderConfig, Model, VelocityModel};
use erg_core::sampler::{euler_sample_ids, SamplerConfig};
use erg_core::Tensor;
use proptest::prelude::*;

fn points(dim: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((-6i32..=6).prop_map(|v| v as f64 * 0.5), dim), 2..=max)
}

fn brute(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> [f64; 4] {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let kth = |set: &[Vec<f64>], i: usize| {
        let mut ds: Vec<f64> = (0..set.len()).filter(|&j| j != i).map(|j| d2(&set[i], &set[j])).collect();
        ds.sort_by(f64::total_cmp);
        ds[k - 1]
    };
    let rr: Vec<f64> = (0..real.len()).map(|i| kth(real, i)).collect();
    let rf: Vec<f64> = (0..fake.len()).map(|j| kth(fake, j)).collect();
    let hits = |j: usize| (0..real.len()).filter(|&i| d2(&fake[j], &real[i]) <= rr[i]).count();
    let precision = (0..fake.len()).filter(|&j| hits(j) > 0).count() as f64 / fake.len() as f64;
    let density = (0..fake.len()).map(hits).sum::<usize>() as f64 / (k * fake.len()) as f64;
    let coverage = (0..real.len())
        .filter(|&i| (0..fake.len()).any(|j| d2(&fake[j], &real[i]) <= rr[i]))
        .count() as f64
        / real.len() as f64;
    let recall = (0..real.len())
        .filter(|&i| (0..fake.len()).any(|j| d2(&real[i], &fake[j]) <= rf[j]))
        .count() as f64
        / real.len() as f64;
    [precision, recall, density, coverage]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, temp in 0.05f64..5.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn(&[rows, cols], &mut erg_core::rng::stream(seed, erg_core::rng::Domain::Analysis, 0)).scale(4.0);
        let p = x.softmax_rows(temp).unwrap();
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert_eq!(x.softmax_rows(temp).unwrap(), p);
    }

    #[test]
    fn manifold_metrics_match_brute_force(dim in 1usize..=2, k in 1usize..=3, real in points(2, 32), fake in points(2, 32)) {
        let real: Vec<Vec<f64>> = real.into_iter().map(|p| p[..dim].to_vec()).collect();
        let fake: Vec<Vec<f64>> = fake.into_iter().map(|p| p[..dim].to_vec()).collect();
        prop_assume!(real.len() > k && fake.len() > k);
        let m = knn_manifold_metrics(&Tensor::from_rows(&real), &Tensor::from_rows(&fake), k).unwrap();
        prop_assert_eq!([m.precision, m.recall, m.density, m.coverage], brute(&real, &fake, k));
    }

    #[test]
    fn frechet_is_symmetric(a in points(2, 12), b in points(2, 12)) {
        let (ta, tb) = (Tensor::from_rows(&a), Tensor::from_rows(&b));
        let ab = frechet_gaussian(&ta, &tb).unwrap();
        let ba = frechet_gaussian(&tb, &ta).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(ab >= 0.0);
        prop_assert!(frechet_gaussian(&ta, &ta).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn ranks_only_depend_on_order(table in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 1..8), higher in prop::collection::vec(any::<bool>(), 3)) {
        let table: Vec<Vec<f64>> = table.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        let orient: Vec<Orientation> = higher.iter().map(|&h| if h { Orientation::HigherIsBetter } else { Orientation::LowerIsBetter }).collect();
        let base = rank_table(&table, &orient).unwrap();
        let warped: Vec<Vec<f64>> = table.iter().map(|r| vec![r[0].exp(), r[1] * 3.0 - 7.0, r[2].powi(3)]).collect();
        prop_assert_eq!(rank_table(&warped, &orient).unwrap(), base.clone());
        let n = table.len() as f64;
        prop_assert!(base.iter().all(|&s| (1.0..=n).contains(&s)));
        prop_assert!((base.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn pareto_front_ignores_input_order(pts in prop::collection::vec(prop::collection::vec(0i32..4, 3), 1..10), shift in 0usize..10) {
        let pts: Vec<Vec<f64>> = pts.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        let orient = [Orientation::HigherIsBetter, Orientation::LowerIsBetter, Orientation::HigherIsBetter];
        let front = pareto_front(&pts, &orient);
        prop_assert!(!front.is_empty());
        let n = pts.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).rev().collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let mut back: Vec<usize> = pareto_front(&shuffled, &orient).into_iter().map(|j| perm[j]).collect();
        back.sort_unstable();
        prop_assert_eq!(back, front);
    }

    #[test]
    fn projection_splits_orthogonally(d in prop::collection::vec(-3.0f64..3.0, 1..12), seed in any::<u64>()) {
        let n = d.len();
        let r = Tensor::<f64>::randn(&[n], &mut erg_core::rng::stream(seed, erg_core::rng::Domain::Analysis, 1));
        let d = Tensor::from_vec(d);
        let (par, orth) = project(&d, &r).unwrap();
        prop_assert!(par.add(&orth).unwrap().max_abs_diff(&d).unwrap() <= 1e-9);
        prop_assert!(par.dot(&orth).unwrap().abs() <= 1e-9 * (1.0 + d.sq_norm()));
    }
}

fn small_model(seed: u64) -> Model<f32> {
    let denoiser = DenoiserConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        ..DenoiserConfig::default()
    };
    let encoder = EncoderConfig {
        depth: 2,
        dim: 16,
        ..EncoderConfig::default()
    };
    Model::init(denoiser, encoder, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn denoiser_is_batch_equivariant(seed in any::<u64>(), rot in 1usize..4) {
        let m = small_model(seed % 4);
        let spec = DatasetSpec::default();
        let prompts: Vec<_> = (0..4).map(|i| spec.prompt(i * 2).unwrap()).collect();
        let c = m.encode(&prompts, 1.0, 0, 0).unwrap();
        let x = Tensor::<f32>::randn(&[4, 1, 16, 16], &mut erg_core::rng::stream(seed, erg_core::rng::Domain::Analysis, 2));
        let v = denoiser_forward(&m, &x, 0.3, &c, &RectificationConfig::off()).unwrap();
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let per = 256;
        let pick = |t: &Tensor<f32>| Tensor::new(vec![4, 1, 16, 16], perm.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec()).collect()).unwrap();
        let cp: Vec<_> = perm.iter().map(|&i| c[i].clone()).collect();
        let vp = denoiser_forward(&m, &pick(&x), 0.3, &cp, &RectificationConfig::off()).unwrap();
        prop_assert_eq!(vp, pick(&v));
    }

    #[test]
    fn batch_sampling_equals_single_runs(seed in 0u64..1000, method_ix in 0usize..Method::ALL.len(), chunk in 1usize..4) {
        let m = small_model(1);
        let weak = small_model(2);
        let method = Method::ALL[method_ix];
        let g = GuidanceSpec::defaults(method, 2.5, m.depth(), m.encoder_depth());
        let spec = DatasetSpec::default();
        let prompts: Vec<_> = (0..3).map(|i| spec.prompt(i).unwrap()).collect();
        let ids = [7u64, 1, 4];
        let cfg = SamplerConfig { steps: 6, seed, chunk, ..SamplerConfig::default() };
        let batch = euler_sample_ids(&m, Some(&weak), &g, &prompts, &ids, &cfg).unwrap().samples;
        for i in 0..3 {
            let one = euler_sample_ids(&m, Some(&weak), &g, &prompts[i..i + 1], &ids[i..i + 1], &cfg).unwrap().samples;
            prop_assert_eq!(one.data(), &batch.data()[i * 256..(i + 1) * 256], "{} sample {}", method, i);
        }
    }
}

#[test]
fn dataset_is_independent_of_thread_scheduling() {
    let spec = DatasetSpec {
        samples_per_mode: 16,
        ..DatasetSpec::default()
    };
    let base = generate(&spec).unwrap();
    let others: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..3).map(|_| s.spawn(|| generate(&spec).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for o in others {
        assert!(o.iter().zip(&base).all(|(a, b)| a.image == b.image && a.mode == b.mode && a.prompt == b.prompt));
    }
}

#[test]
fn threaded_sampling_matches_sequential() {
    let m = small_model(3);
    let g = GuidanceSpec::defaults(Method::Erg, 3.0, m.depth(), m.encoder_depth());
    let spec = DatasetSpec::default();
    let prompts: Vec<_> = (0..6).map(|i| spec.prompt(i).unwrap()).collect();
    let ids: Vec<u64> = (0..6).collect();
    let seq = SamplerConfig { steps: 5, chunk: 2, ..SamplerConfig::default() };
    let par = SamplerConfig { threads: 3, ..seq.clone() };
    let a = euler_sample_ids(&m, None, &g, &prompts, &ids, &seq).unwrap().samples;
    let b = euler_sample_ids(&m, None, &g, &prompts, &ids, &par).unwrap().samples;
    assert_eq!(a, b);
}
