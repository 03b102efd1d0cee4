//! Gaussian perturbation of inverted latents.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use viewlab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::modelzoo::{generate_batch, DifferentiableMap, ImageTensor, LatentCode};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Per-coordinate standard deviation.
    pub sigma: f64,
    /// Views per anchor.
    pub count: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { sigma: 0.2, count: 8 }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.count < 1 {
            return Err(Error::config("perturbation count must be at least 1"));
        }
        Ok(())
    }
}

/// `count` i.i.d. draws of `N(0, sigma^2 I)` in `dim` dimensions.
pub fn sample_perturbations(dim: usize, count: usize, sigma: f64, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}

/// `g(w0 + w_p)` for `cfg.count` perturbations of a known latent.
pub fn w_perturb_latent<G: DifferentiableMap + ?Sized>(
    w0: &LatentCode,
    g: &G,
    cfg: &PerturbConfig,
    rng: &mut StreamRng,
) -> Result<Vec<(LatentCode, ImageTensor)>> {
    cfg.validate()?;
    let m = w0.dim();
    if g.input_shape() != [m] {
        return Err(Error::shape("generator latent", g.input_shape(), &[m]));
    }
    let latents: Vec<Vec<f64>> = sample_perturbations(m, cfg.count, cfg.sigma, rng)
        .into_iter()
        .map(|p| w0.as_slice().iter().zip(p).map(|(a, b)| a + b).collect())
        .collect();
    let batch = Tensor::matrix(cfg.count, m, latents.concat());
    let images = generate_batch(g, &batch)?.unstack();
    latents
        .into_iter()
        .zip(images)
        .map(|(w, img)| Ok((LatentCode::new(w)?, img)))
        .collect()
}

/// Inverts `x` with `e` and returns `g(e(x) + w_p)` for each perturbation.
pub fn w_perturb<G, E>(
    x: &ImageTensor,
    g: &G,
    e: &E,
    cfg: &PerturbConfig,
    rng: &mut StreamRng,
) -> Result<Vec<ImageTensor>>
where
    G: DifferentiableMap + ?Sized,
    E: DifferentiableMap + ?Sized,
{
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let w0 = LatentCode::new(e.eval(&x.clone().reshape(&shape))?.into_data())?;
    Ok(w_perturb_latent(&w0, g, cfg, rng)?
        .into_iter()
        .map(|(_, img)| img)
        .collect())
}
