//! Generator inversion: a trained image-to-latent encoder plus per-image latent
//! refinement warm-started at the encoder's guess.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::modelzoo::{DifferentiableMap, ImageTensor, LatentCode, Network};
use crate::optim::{self, param_grads, Adam, AdamConfig};
use crate::rng::{self, purpose};

/// How the discriminator enters the inversion objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialTerm {
    /// `+lambda_adv * softplus(-d(g(w)))`: the non-saturating generator loss,
    /// small when the discriminator finds the reconstruction realistic.
    #[default]
    GeneratorLoss,
    /// `-lambda_adv * softplus(-d(g(w)))`, the sign as literally printed.
    NegatedSoftplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub lambda_vgg: f64,
    pub lambda_adv: f64,
    pub adversarial: AdversarialTerm,
    pub encoder_steps: usize,
    pub encoder_batch: usize,
    pub encoder_lr: f64,
    /// Held-out evaluation cadence (encoder steps) for divergence detection.
    pub eval_every: usize,
    pub discriminator_steps: usize,
    pub discriminator_lr: f64,
    pub latent_opt_steps: usize,
    pub latent_step_size: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            lambda_vgg: 0.1,
            lambda_adv: 0.01,
            adversarial: AdversarialTerm::GeneratorLoss,
            encoder_steps: 300,
            encoder_batch: 32,
            encoder_lr: 2e-3,
            eval_every: 25,
            discriminator_steps: 100,
            discriminator_lr: 1e-3,
            latent_opt_steps: 50,
            latent_step_size: 0.05,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_vgg >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::config("inversion loss weights must be non-negative"));
        }
        if self.encoder_batch == 0 || self.eval_every == 0 {
            return Err(Error::config("encoder_batch and eval_every must be positive"));
        }
        if !(self.latent_step_size > 0.0 && self.encoder_lr >= 0.0 && self.discriminator_lr >= 0.0) {
            return Err(Error::config("step sizes must be positive"));
        }
        Ok(())
    }

    /// Pixel reconstruction only.
    pub fn reconstruction_only() -> Self {
        InversionConfig {
            lambda_vgg: 0.0,
            lambda_adv: 0.0,
            ..InversionConfig::default()
        }
    }
}

/// The maps the objective is built from: generator, discriminator, perceptual features.
#[derive(Clone, Copy)]
pub struct InversionModels<'a> {
    pub g: &'a dyn DifferentiableMap,
    pub d: &'a dyn DifferentiableMap,
    pub h: &'a dyn DifferentiableMap,
}

/// Batch means of the three terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionTerms {
    pub reconstruction: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

fn row_norm_mean<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.flatten().sub(b.flatten()).norm_rows().mean()
}

struct Graph<'t> {
    total: Var<'t>,
    reconstruction: Var<'t>,
    perceptual: Option<Var<'t>>,
    adversarial: Option<Var<'t>>,
}

/// `||x - g(w)|| + lambda_vgg ||h(x) - h(g(w))|| +/- lambda_adv softplus(-d(g(w)))`,
/// averaged over the batch; zero-weight terms are not evaluated.
fn objective_graph<'t>(x: Var<'t>, w: Var<'t>, m: InversionModels<'_>, cfg: &InversionConfig) -> Graph<'t> {
    let recon = m.g.apply(w);
    let reconstruction = row_norm_mean(x, recon);
    let mut total = reconstruction;
    let mut perceptual = None;
    let mut adversarial = None;
    if cfg.lambda_vgg > 0.0 {
        let p = row_norm_mean(m.h.apply(x), m.h.apply(recon));
        total = total.add(p.scale(cfg.lambda_vgg));
        perceptual = Some(p);
    }
    if cfg.lambda_adv > 0.0 {
        let a = m.d.apply(recon).flatten().neg().softplus().mean();
        let sign = match cfg.adversarial {
            AdversarialTerm::GeneratorLoss => 1.0,
            AdversarialTerm::NegatedSoftplus => -1.0,
        };
        total = total.add(a.scale(sign * cfg.lambda_adv));
        adversarial = Some(a);
    }
    Graph {
        total,
        reconstruction,
        perceptual,
        adversarial,
    }
}

/// Differentiable objective for latents `w: [B, M]` against images `x`.
pub fn latent_objective<'t>(x: Var<'t>, w: Var<'t>, m: InversionModels<'_>, cfg: &InversionConfig) -> Var<'t> {
    objective_graph(x, w, m, cfg).total
}

/// Differentiable objective with latents `e(x)`, `e`'s parameters bound by the caller.
pub fn encoder_objective<'t>(
    x: Var<'t>,
    e: &dyn DifferentiableMap,
    e_params: &[Var<'t>],
    m: InversionModels<'_>,
    cfg: &InversionConfig,
) -> Var<'t> {
    latent_objective(x, e.forward(x, e_params), m, cfg)
}

fn check_term(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: format!("{name} term of the inversion loss"),
            index: 0,
        })
    }
}

fn terms(g: &Graph<'_>) -> Result<InversionTerms> {
    Ok(InversionTerms {
        reconstruction: check_term("reconstruction", g.reconstruction.item())?,
        perceptual: check_term("perceptual", g.perceptual.map_or(0.0, |v| v.item()))?,
        adversarial: check_term("adversarial", g.adversarial.map_or(0.0, |v| v.item()))?,
        total: check_term("total", g.total.item())?,
    })
}

/// Inversion loss of `e` on a batch of images.
pub fn inversion_loss(
    x: &Tensor,
    e: &dyn DifferentiableMap,
    m: InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<InversionTerms> {
    cfg.validate()?;
    e.check_batch(x)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = e.apply(xv);
    terms(&objective_graph(xv, w, m, cfg))
}

/// Inversion loss for explicit latents.
pub fn latent_loss(x: &Tensor, w: &Tensor, m: InversionModels<'_>, cfg: &InversionConfig) -> Result<InversionTerms> {
    let tape = Tape::new();
    terms(&objective_graph(tape.constant(x.clone()), tape.constant(w.clone()), m, cfg))
}

fn minibatch(x: &Tensor, size: usize, rng: &mut rng::StreamRng) -> Tensor {
    let n = x.rows();
    let k = size.min(n);
    let mut data = Vec::with_capacity(k * x.row_len());
    for _ in 0..k {
        data.extend_from_slice(x.row(rng.random_range(0..n)));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = k;
    Tensor::new(shape, data)
}

/// Trains a discriminator to separate real images from `g(w)`, `w ~ N(0, I)`.
pub fn train_discriminator(
    real: &Tensor,
    g: &dyn DifferentiableMap,
    mut d: Network,
    cfg: &InversionConfig,
) -> Result<Network> {
    cfg.validate()?;
    let m: usize = g.input_shape().iter().product();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.discriminator_lr,
        ..AdamConfig::default()
    });
    for step in 0..cfg.discriminator_steps {
        let mut r = rng::stream(&[cfg.seed, purpose::INVERSION, 1, step as u64]);
        let xr = minibatch(real, cfg.encoder_batch, &mut r);
        let b = xr.rows();
        let w = Tensor::matrix(b, m, (0..b * m).map(|_| StandardNormal.sample(&mut r)).collect());
        let fake = g.eval(&w)?;
        let tape = Tape::new();
        let params = d.bind(&tape);
        let real_logit = d.forward(tape.constant(xr), &params).flatten();
        let fake_logit = d.forward(tape.constant(fake), &params).flatten();
        let loss = real_logit.neg().softplus().mean().add(fake_logit.softplus().mean());
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss".into(),
                index: step,
            });
        }
        let grads = param_grads(&tape.backward(loss), &params);
        opt.step(d.params_mut(), &grads, cfg.discriminator_lr)?;
    }
    Ok(d.freeze())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverterReport {
    pub initial_heldout: f64,
    pub final_heldout: f64,
    /// `(step, held-out loss)` at each evaluation.
    pub history: Vec<(usize, f64)>,
    pub lambda_vgg: f64,
    pub lambda_adv: f64,
}

/// Trains `e` with Adam (cosine-decayed) to minimize the inversion loss on `train`.
///
/// Aborts with [`Error::Diverged`] when the held-out loss exceeds ten times its
/// initial value at three consecutive evaluations.
pub fn train_inverter(
    train: &Tensor,
    heldout: &Tensor,
    mut e: Network,
    m: InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<(Network, InverterReport)> {
    cfg.validate()?;
    let initial = inversion_loss(heldout, &e, m, cfg)?.total;
    let mut history = vec![(0, initial)];
    let mut strikes = 0;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.encoder_lr,
        ..AdamConfig::default()
    });
    for step in 0..cfg.encoder_steps {
        let mut r = rng::stream(&[cfg.seed, purpose::INVERSION, 2, step as u64]);
        let x = minibatch(train, cfg.encoder_batch, &mut r);
        let tape = Tape::new();
        let params = e.bind(&tape);
        let loss = encoder_objective(tape.constant(x), &e, &params, m, cfg);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                what: "inverter training loss".into(),
                index: step,
            });
        }
        let grads = param_grads(&tape.backward(loss), &params);
        let lr = optim::cosine_lr(step, cfg.encoder_steps, cfg.encoder_lr);
        opt.step(e.params_mut(), &grads, lr)?;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.encoder_steps {
            let held = inversion_loss(heldout, &e, m, cfg)?.total;
            history.push((step + 1, held));
            if held > 10.0 * initial.abs() {
                strikes += 1;
                if strikes >= 3 {
                    return Err(Error::Diverged(format!(
                        "inverter held-out loss {held} exceeds ten times its initial value {initial}"
                    )));
                }
            } else {
                strikes = 0;
            }
        }
    }
    let final_heldout = history.last().map_or(initial, |h| h.1);
    Ok((
        e,
        InverterReport {
            initial_heldout: initial,
            final_heldout,
            history,
            lambda_vgg: cfg.lambda_vgg,
            lambda_adv: cfg.lambda_adv,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct LatentFit {
    pub latent: LatentCode,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

fn single(x: &ImageTensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

/// Gradient descent with backtracking on the inversion loss over `w`, starting
/// from `w_init`. Only decreasing steps are accepted.
pub fn refine_latent(
    x: &ImageTensor,
    w_init: LatentCode,
    m: InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<LatentFit> {
    cfg.validate()?;
    let xb = single(x);
    let eval = |w: &Tensor| -> f64 {
        let tape = Tape::new();
        latent_objective(tape.constant(xb.clone()), tape.constant(w.clone()), m, cfg).item()
    };
    let mut w = w_init.to_tensor();
    let initial = eval(&w);
    if !initial.is_finite() {
        return Err(Error::NonFinite {
            what: "warm-start inversion loss".into(),
            index: 0,
        });
    }
    let mut current = initial;
    let mut eta = cfg.latent_step_size;
    let mut steps = 0;
    for step in 0..cfg.latent_opt_steps {
        let tape = Tape::new();
        let wv = tape.var(w.clone());
        let j = latent_objective(tape.constant(xb.clone()), wv, m, cfg);
        let grad = tape.backward(j).wrt(wv);
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "latent gradient".into(),
                index: step,
            });
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = w.clone();
            for (t, gi) in trial.data_mut().iter_mut().zip(grad.data()) {
                *t -= eta * gi;
            }
            let value = eval(&trial);
            if value.is_finite() && value < current {
                w = trial;
                current = value;
                eta *= 1.5;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        steps = step + 1;
        if !accepted {
            break;
        }
    }
    Ok(LatentFit {
        latent: LatentCode::new(w.into_data())?,
        initial_loss: initial,
        final_loss: current,
        steps,
    })
}

/// Inverts one image: `e(x)` refined by [`refine_latent`].
pub fn optimize_latent(
    x: &ImageTensor,
    e: &dyn DifferentiableMap,
    m: InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<LatentFit> {
    let w0 = LatentCode::new(e.eval(&single(x))?.into_data())?;
    refine_latent(x, w0, m, cfg)
}

/// Inverts every image of a batch `[B, ...]`.
pub fn invert_dataset(
    images: &Tensor,
    e: &dyn DifferentiableMap,
    m: InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<Vec<LatentFit>> {
    e.check_batch(images)?;
    images.clone().unstack().iter().map(|x| optimize_latent(x, e, m, cfg)).collect()
}
