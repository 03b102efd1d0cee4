//! View generators: expert transformations, latent search, latent perturbation,
//! and calibration of the search radius.

mod perturb;
mod search;
mod transform;

pub use perturb::{sample_perturbations, w_perturb, w_perturb_latent, PerturbConfig};
pub use search::{
    anchor_embedding, initial_latents, mean_pairwise_distance, search_objective, sign_gradient_step, w_search,
    w_search_from, w_search_online_1step, BoundaryPenalty, DistanceSpace, InitPolicy, WSearchConfig, WSearchResult,
};
pub use transform::{expert_transform, StrengthPreset, TransformConfig};

use serde::{Deserialize, Serialize};
use viewlab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::modelzoo::{encode_batch, DifferentiableMap, ImageTensor};
use crate::rng::{self, purpose};

/// Offset between the calibrated boundary radius and the default spread target.
pub const EPSILON2_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub samples: usize,
}

impl EpsilonEstimate {
    fn from_mean(epsilon1: f64, samples: usize) -> Self {
        EpsilonEstimate {
            epsilon1,
            epsilon2: epsilon1 + EPSILON2_MARGIN,
            samples,
        }
    }
}

fn transformed_pairs(images: &[ImageTensor], cfg: &TransformConfig, seed: u64) -> Result<(Tensor, Tensor)> {
    if images.is_empty() {
        return Err(Error::config("epsilon calibration needs at least one image"));
    }
    let views = images
        .iter()
        .enumerate()
        .map(|(i, x)| expert_transform(x, cfg, &mut rng::stream(&[seed, purpose::CALIBRATE, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(images), Tensor::stack(&views)))
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    let total: f64 = (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.rows() as f64
}

/// Mean embedding distance `||f(x) - f(t(x))||` between images and expert views of them.
pub fn calibrate_epsilon<F: DifferentiableMap + ?Sized>(
    f: &F,
    images: &[ImageTensor],
    cfg: &TransformConfig,
    seed: u64,
) -> Result<EpsilonEstimate> {
    let (x, t) = transformed_pairs(images, cfg, seed)?;
    let d = mean_row_distance(&encode_batch(f, &x)?, &encode_batch(f, &t)?);
    Ok(EpsilonEstimate::from_mean(d, images.len()))
}

/// Same measurement in latent space, through the inverter `e`.
pub fn calibrate_epsilon_latent<E: DifferentiableMap + ?Sized>(
    e: &E,
    images: &[ImageTensor],
    cfg: &TransformConfig,
    seed: u64,
) -> Result<EpsilonEstimate> {
    let (x, t) = transformed_pairs(images, cfg, seed)?;
    let d = mean_row_distance(&e.eval(&x)?, &e.eval(&t)?);
    Ok(EpsilonEstimate::from_mean(d, images.len()))
}
