use rand_distr::{Distribution, StandardNormal};
use viewlab::inversion::{self, AdversarialTerm, InversionConfig, InversionModels};
use viewlab::modelzoo::{grad_check_leaves, zoo, BlobSpec, DifferentiableMap, GradCheckOptions, LatentCode, Network};
use viewlab::rng;
use viewlab::Error;
use viewlab_autodiff::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(&[seed, 4242]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn mean_row_dist(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    (0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

struct Blobs {
    g: Network,
    d: Network,
    h: Network,
}

fn blob_models(seed: u64) -> Blobs {
    let spec = BlobSpec {
        height: 16,
        width: 16,
        ..BlobSpec::default()
    };
    Blobs {
        g: zoo::blob_generator(spec).unwrap(),
        d: zoo::toy_discriminator([3, 16, 16], seed).unwrap(),
        h: zoo::perceptual_net([3, 16, 16], seed + 1).unwrap(),
    }
}

impl Blobs {
    fn models(&self) -> InversionModels<'_> {
        InversionModels {
            g: &self.g,
            d: &self.d,
            h: &self.h,
        }
    }

    fn images(&self, n: usize, seed: u64) -> Tensor {
        self.g.eval(&randn(&[n, 18], seed)).unwrap()
    }
}

#[test]
fn perfect_reconstruction_has_zero_loss() {
    let id = zoo::identity(6).unwrap();
    let m = InversionModels { g: &id, d: &id, h: &id };
    let cfg = InversionConfig {
        lambda_adv: 0.0,
        ..InversionConfig::default()
    };
    let t = inversion::inversion_loss(&randn(&[4, 6], 1), &id, m, &cfg).unwrap();
    assert_eq!(t.total, 0.0);
}

#[test]
fn zero_weights_leave_the_pixel_term() {
    let b = blob_models(1);
    let e = zoo::toy_inverter([3, 16, 16], 18, 2).unwrap();
    let x = b.images(5, 3);
    let t = inversion::inversion_loss(&x, &e, b.models(), &InversionConfig::reconstruction_only()).unwrap();
    let recon = b.g.eval(&e.eval(&x).unwrap()).unwrap();
    let expect = mean_row_dist(&x.clone().reshape(&[5, 768]), &recon.reshape(&[5, 768]));
    assert!((t.total - expect).abs() < 1e-12);
    assert_eq!(t.perceptual, 0.0);
    assert_eq!(t.adversarial, 0.0);
}

#[test]
fn loss_terms_match_separate_evaluation() {
    let b = blob_models(4);
    let e = zoo::toy_inverter([3, 16, 16], 18, 5).unwrap();
    for (seed, adversarial) in [(6, AdversarialTerm::GeneratorLoss), (7, AdversarialTerm::NegatedSoftplus)] {
        let x = randn(&[3, 3, 16, 16], seed).map(|v| v.abs().min(1.0));
        let cfg = InversionConfig {
            lambda_vgg: 0.3,
            lambda_adv: 0.2,
            adversarial,
            ..InversionConfig::default()
        };
        let t = inversion::inversion_loss(&x, &e, b.models(), &cfg).unwrap();
        let recon = b.g.eval(&e.eval(&x).unwrap()).unwrap();
        let rec = mean_row_dist(&x.clone().reshape(&[3, 768]), &recon.clone().reshape(&[3, 768]));
        let per = mean_row_dist(&b.h.eval(&x).unwrap(), &b.h.eval(&recon).unwrap());
        let logits = b.d.eval(&recon).unwrap();
        let adv = logits.data().iter().map(|l| softplus(-l)).sum::<f64>() / 3.0;
        let sign = if adversarial == AdversarialTerm::GeneratorLoss { 1.0 } else { -1.0 };
        assert!((t.reconstruction - rec).abs() <= 1e-9);
        assert!((t.perceptual - per).abs() <= 1e-9);
        assert!((t.adversarial - adv).abs() <= 1e-9);
        assert!((t.total - (rec + 0.3 * per + sign * 0.2 * adv)).abs() <= 1e-9);
    }
}

#[test]
fn inversion_objective_gradients_match_finite_differences() {
    let b = blob_models(8);
    let small = zoo::toy_inverter([3, 16, 16], 18, 9).unwrap();
    let cfg = InversionConfig::default();
    for seed in 0..20 {
        let x = b.images(2, 100 + seed);
        let w = randn(&[2, 18], 200 + seed);
        let report = grad_check_leaves(
            &[w],
            |v| {
                let xv = v[0].tape().constant(x.clone());
                inversion::latent_objective(xv, v[0], b.models(), &cfg)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "latent seed {seed}: {report:?}");
    }
    // Encoder parameters, sampled coordinates.
    let x = b.images(2, 300);
    let mut leaves = vec![];
    for p in small.params() {
        leaves.push(p.tensor.clone());
    }
    let report = grad_check_leaves(
        &leaves,
        |v| {
            let xv = v[0].tape().constant(x.clone());
            inversion::encoder_objective(xv, &small, v, b.models(), &cfg)
        },
        &GradCheckOptions {
            max_coords: Some(200),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passes(1e-4), "encoder: {report:?}");
}

fn linear_setup(seed: u64) -> (Network, Tensor) {
    let a = randn(&[12, 4], seed);
    (zoo::linear_generator(&a).unwrap(), a)
}

#[test]
fn linear_inverter_learns_the_pseudo_inverse() {
    let (g, a) = linear_setup(10);
    let id = zoo::identity(12).unwrap();
    let m = InversionModels { g: &g, d: &id, h: &id };
    let train = g.eval(&randn(&[512, 4], 11)).unwrap();
    let held = g.eval(&randn(&[64, 4], 12)).unwrap();
    let e = zoo::linear_inverter(12, 4, 13).unwrap();
    let cfg = InversionConfig {
        encoder_steps: 2000,
        encoder_lr: 0.02,
        ..InversionConfig::reconstruction_only()
    };
    let (e, report) = inversion::train_inverter(&train, &held, e, m, &cfg).unwrap();
    assert!(report.final_heldout < report.initial_heldout);
    assert_eq!((report.lambda_vgg, report.lambda_adv), (0.0, 0.0));
    let recon = g.eval(&e.eval(&held).unwrap()).unwrap();
    let mse = recon.data().iter().zip(held.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / held.numel() as f64;
    assert!(mse <= 1e-3, "{mse}");
    // E A is close to the identity.
    let ew = &e.params()[0].tensor;
    for i in 0..4 {
        for j in 0..4 {
            let v: f64 = (0..12).map(|k| ew.data()[i * 12 + k] * a.data()[k * 4 + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 5e-2, "({i},{j}) {v}");
        }
    }
}

#[test]
fn blob_inverter_improves_on_held_out_images() {
    let b = blob_models(14);
    let train = b.images(128, 15);
    let held = b.images(32, 16);
    let d = inversion::train_discriminator(&train, &b.g, b.d.clone(), &InversionConfig { discriminator_steps: 20, ..InversionConfig::default() }).unwrap();
    let m = InversionModels { g: &b.g, d: &d, h: &b.h };
    let e = zoo::toy_inverter([3, 16, 16], 18, 17).unwrap();
    let cfg = InversionConfig {
        encoder_steps: 60,
        encoder_batch: 16,
        eval_every: 20,
        ..InversionConfig::default()
    };
    let (_, report) = inversion::train_inverter(&train, &held, e, m, &cfg).unwrap();
    assert!(report.final_heldout < report.initial_heldout, "{report:?}");
    assert_eq!(report.history.len(), 4);
}

#[test]
fn runaway_training_is_reported_as_divergence() {
    let (g, _) = linear_setup(18);
    let id = zoo::identity(12).unwrap();
    let m = InversionModels { g: &g, d: &id, h: &id };
    let train = g.eval(&randn(&[64, 4], 19)).unwrap();
    let e = zoo::linear_inverter(12, 4, 20).unwrap();
    let cfg = InversionConfig {
        encoder_steps: 200,
        encoder_lr: 1e4,
        eval_every: 5,
        ..InversionConfig::reconstruction_only()
    };
    let err = inversion::train_inverter(&train, &train, e, m, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
}

#[test]
fn zero_steps_returns_the_warm_start() {
    let b = blob_models(21);
    let e = zoo::toy_inverter([3, 16, 16], 18, 22).unwrap();
    let x = b.images(1, 23).unstack().remove(0);
    let cfg = InversionConfig {
        latent_opt_steps: 0,
        ..InversionConfig::default()
    };
    let fit = inversion::optimize_latent(&x, &e, b.models(), &cfg).unwrap();
    let w0 = e.eval(&x.clone().reshape(&[1, 3, 16, 16])).unwrap();
    assert_eq!(fit.latent, LatentCode(w0.into_data()));
    assert_eq!(fit.initial_loss, fit.final_loss);
}

#[test]
fn planted_latents_are_recovered_through_a_linear_generator() {
    let (g, _) = linear_setup(24);
    let id = zoo::identity(12).unwrap();
    let m = InversionModels { g: &g, d: &id, h: &id };
    // An untrained inverter gives a poor warm start; refinement does the rest.
    let e = zoo::linear_inverter(12, 4, 25).unwrap();
    let cfg = InversionConfig {
        latent_opt_steps: 500,
        ..InversionConfig::reconstruction_only()
    };
    for s in 0..10 {
        let w_true = randn(&[1, 4], 26 + s);
        let x = g.eval(&w_true).unwrap().unstack().remove(0);
        let fit = inversion::optimize_latent(&x, &e, m, &cfg).unwrap();
        let recon = g.eval(&fit.latent.to_tensor()).unwrap();
        let mse = recon.data().iter().zip(x.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 12.0;
        assert!(mse <= 1e-3, "{mse}");
    }
}

#[test]
fn refinement_never_increases_the_objective() {
    let b = blob_models(30);
    let e = zoo::toy_inverter([3, 16, 16], 18, 31).unwrap();
    let images = b.images(100, 32);
    let cfg = InversionConfig {
        latent_opt_steps: 5,
        ..InversionConfig::default()
    };
    let fits = inversion::invert_dataset(&images, &e, b.models(), &cfg).unwrap();
    assert_eq!(fits.len(), 100);
    for f in &fits {
        assert!(f.final_loss <= f.initial_loss);
    }
    assert!(fits.iter().any(|f| f.final_loss < f.initial_loss));
}
