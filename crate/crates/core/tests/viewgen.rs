use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use viewlab::modelzoo::{generate, grad_check_fn, zoo, BlobSpec, GradCheckOptions, LatentCode, Network};
use viewlab::rng;
use viewlab::viewgen::{self, DistanceSpace, PerturbConfig, TransformConfig, WSearchConfig};
use viewlab_autodiff::Tensor;

fn small_blobs() -> BlobSpec {
    BlobSpec {
        height: 16,
        width: 16,
        ..BlobSpec::default()
    }
}

fn small_encoder(seed: u64) -> Network {
    zoo::toy_encoder(
        [3, 16, 16],
        zoo::EncoderSpec {
            widths: [4, 6, 6],
            hidden: 16,
            embed_dim: 8,
        },
        seed,
    )
    .unwrap()
}

fn randn(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(&[seed, 5150]);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn blob_image(g: &Network, seed: u64) -> Tensor {
    generate(g, &LatentCode(randn(18, seed))).unwrap()
}

#[test]
fn two_views_reach_the_circle_and_spread_apart() {
    let id = zoo::identity(2).unwrap();
    let cfg = WSearchConfig {
        views: 2,
        steps: 4000,
        normalize_embeddings: false,
        ..WSearchConfig::default()
    };
    let out = viewgen::w_search(&Tensor::vector(vec![0.0, 0.0]), &id, &id, &id, &cfg, &mut rng::stream(&[3])).unwrap();
    for r in &out.residuals {
        assert!(r.abs() <= 1e-2, "{:?}", out.residuals);
    }
    assert!(out.mean_pairwise >= 0.5 - 1e-2, "{}", out.mean_pairwise);
    // Latents are the decoded views under the identity generator.
    for (w, img) in &out.views {
        assert_eq!(w.as_slice(), img.data());
    }
}

#[test]
fn latent_space_spread_is_available() {
    let id = zoo::identity(2).unwrap();
    let cfg = WSearchConfig {
        views: 3,
        steps: 4000,
        normalize_embeddings: false,
        uniformity_space: DistanceSpace::W,
        ..WSearchConfig::default()
    };
    let out = viewgen::w_search(&Tensor::vector(vec![0.0, 0.0]), &id, &id, &id, &cfg, &mut rng::stream(&[4])).unwrap();
    assert!(out.mean_pairwise >= 0.5 - 1e-2);
}

#[test]
fn image_scale_search_lowers_the_objective() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let f = small_encoder(1);
    let x0 = blob_image(&g, 2);
    // Anchor inversion is the planted latent itself.
    let w_true = randn(18, 2);
    let cfg = WSearchConfig {
        views: 3,
        steps: 30,
        step_size: 0.5,
        ..WSearchConfig::default()
    };
    let z0 = viewgen::anchor_embedding(&f, &x0, true).unwrap();
    let mut r = rng::stream(&[9]);
    let w0 = Tensor::matrix(
        3,
        18,
        (0..3)
            .flat_map(|_| w_true.iter().map(|v| v + 0.003 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect::<Vec<_>>())
            .collect(),
    );
    let start = {
        let tape = viewlab_autodiff::Tape::new();
        viewgen::search_objective(tape.constant(w0.clone()), &z0, &f, &g, &cfg).item()
    };
    let out = viewgen::w_search_from(&z0, w0, &f, &g, &cfg).unwrap();
    assert!(out.objective < start, "{} vs {start}", out.objective);
    assert_eq!(out.views.len(), 3);
    assert_eq!(out.views[0].1.shape(), &[3, 16, 16]);
}

#[test]
fn search_objective_gradients_match_finite_differences() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let f = small_encoder(2);
    let cfg = WSearchConfig {
        views: 3,
        lambda: 0.5,
        epsilon2: 2.0,
        ..WSearchConfig::default()
    };
    for seed in 0..20 {
        let z0 = viewgen::anchor_embedding(&f, &blob_image(&g, 100 + seed), true).unwrap();
        let w = Tensor::matrix(3, 18, randn(54, 200 + seed));
        let report = grad_check_fn(&w, |v| viewgen::search_objective(v, &z0, &f, &g, &cfg), &GradCheckOptions::default()).unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn zero_sigma_reproduces_the_inverted_image_exactly() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let e = zoo::toy_inverter([3, 16, 16], 18, 4).unwrap();
    let x = blob_image(&g, 5);
    let cfg = PerturbConfig { sigma: 0.0, count: 3 };
    let views = viewgen::w_perturb(&x, &g, &e, &cfg, &mut rng::stream(&[1])).unwrap();
    let w = LatentCode(viewlab::modelzoo::DifferentiableMap::eval(&e, &x.clone().reshape(&[1, 3, 16, 16])).unwrap().into_data());
    let expect = generate(&g, &w).unwrap();
    for v in views {
        assert_eq!(v, expect);
    }
}

#[test]
fn perturbation_statistics_match_sigma() {
    let sigma = 0.2;
    let draws = viewgen::sample_perturbations(1, 100_000, sigma, &mut rng::stream(&[11]));
    let xs: Vec<f64> = draws.into_iter().map(|d| d[0]).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "{mean}");
    assert!((std - sigma).abs() <= 0.02 * sigma, "{std}");
}

#[test]
fn perturbation_views_are_reproducible_per_stream() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let w = LatentCode(randn(18, 1));
    let cfg = PerturbConfig::default();
    let a = viewgen::w_perturb_latent(&w, &g, &cfg, &mut rng::stream(&[1, 2])).unwrap();
    let b = viewgen::w_perturb_latent(&w, &g, &cfg, &mut rng::stream(&[1, 2])).unwrap();
    assert_eq!(a.len(), 8);
    for ((wa, ia), (wb, ib)) in a.iter().zip(&b) {
        assert_eq!(wa, wb);
        assert_eq!(ia, ib);
    }
}

#[test]
fn online_step_moves_every_coordinate_by_exactly_the_step() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let f = small_encoder(3);
    let x0 = blob_image(&g, 7);
    let w = LatentCode(randn(18, 8));
    let step = 0.05;
    let out = viewgen::w_search_online_1step(&x0, &f, &g, &w, &WSearchConfig::default(), step).unwrap();
    for (a, b) in w.as_slice().iter().zip(out.as_slice()) {
        let moved = (b - a).abs();
        assert!((moved - step).abs() < 1e-12 || moved == 0.0, "{moved}");
    }
    assert_ne!(out, w);
}

#[test]
fn identity_transform_calibrates_to_zero() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let f = small_encoder(4);
    let images: Vec<Tensor> = (0..10).map(|s| blob_image(&g, s)).collect();
    let est = viewgen::calibrate_epsilon(&f, &images, &TransformConfig::identity(), 0).unwrap();
    assert_eq!(est.epsilon1, 0.0);
    assert!((est.epsilon2 - 0.2).abs() < 1e-15);
    assert!(viewgen::calibrate_epsilon(&f, &[], &TransformConfig::full(), 0).is_err());
}

#[test]
fn calibration_is_stable_across_disjoint_samples() {
    let g = zoo::blob_generator(small_blobs()).unwrap();
    let f = small_encoder(5);
    let a: Vec<Tensor> = (0..1000).map(|s| blob_image(&g, s)).collect();
    let b: Vec<Tensor> = (1000..2000).map(|s| blob_image(&g, s)).collect();
    let ea = viewgen::calibrate_epsilon(&f, &a, &TransformConfig::full(), 1).unwrap();
    let eb = viewgen::calibrate_epsilon(&f, &b, &TransformConfig::full(), 2).unwrap();
    assert!(ea.epsilon1 > 0.0);
    assert!((ea.epsilon1 - eb.epsilon1).abs() <= 0.1 * ea.epsilon1, "{ea:?} {eb:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn expert_transform_preserves_shape_and_range(seed in 0u64..10_000, weak in any::<bool>(), h in 4usize..20, w in 4usize..20) {
        let mut r = rng::stream(&[seed]);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rand::Rng::random::<f64>(&mut r)).collect();
        let x = Tensor::new(vec![3, h, w], data);
        let cfg = if weak { TransformConfig::weak() } else { TransformConfig::full() };
        let y = viewgen::expert_transform(&x, &cfg, &mut r).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
