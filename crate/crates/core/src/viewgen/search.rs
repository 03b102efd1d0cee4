//! Latent-space search for views at a target embedding distance from the anchor.

use std::rc::Rc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::modelzoo::{DifferentiableMap, ImageTensor, LatentCode};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// `e(x0)` plus Gaussian noise of std `init_noise * epsilon1`.
    InvertedAnchorPlusNoise,
    /// Standard normal latents.
    Random,
}

/// Penalty on the signed residual `d - epsilon1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundaryPenalty {
    Squared,
    /// `delta^2 (sqrt(1 + (r / delta)^2) - 1)`.
    PseudoHuber { delta: f64 },
}

/// Space in which the pairwise spread of the views is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSpace {
    /// Encoder embeddings.
    Z,
    /// Generator latents.
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WSearchConfig {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub lambda: f64,
    /// Views per anchor.
    pub views: usize,
    pub steps: usize,
    pub step_size: f64,
    pub init_policy: InitPolicy,
    /// Stop once the objective changes by less than this between steps.
    pub tol: f64,
    pub penalty: BoundaryPenalty,
    pub uniformity_space: DistanceSpace,
    /// Compare unit-normalized encoder outputs (turn off for raw vector maps).
    pub normalize_embeddings: bool,
    /// Initial noise std as a multiple of `epsilon1`.
    pub init_noise: f64,
}

impl Default for WSearchConfig {
    fn default() -> Self {
        WSearchConfig {
            epsilon1: 0.3,
            epsilon2: 0.5,
            lambda: 0.01,
            views: 8,
            steps: 200,
            step_size: 0.05,
            init_policy: InitPolicy::InvertedAnchorPlusNoise,
            tol: 1e-6,
            penalty: BoundaryPenalty::Squared,
            uniformity_space: DistanceSpace::Z,
            normalize_embeddings: true,
            init_noise: 0.01,
        }
    }
}

impl WSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon1 > 0.0) {
            return Err(Error::config("epsilon1 must be positive"));
        }
        if !(self.epsilon2 >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::config("epsilon2 and lambda must be non-negative"));
        }
        if self.views < 1 {
            return Err(Error::config("w-search needs at least one view"));
        }
        if !(self.step_size > 0.0) || !(self.tol >= 0.0) || !(self.init_noise >= 0.0) {
            return Err(Error::config("step_size must be positive; tol and init_noise non-negative"));
        }
        if let BoundaryPenalty::PseudoHuber { delta } = self.penalty {
            if !(delta > 0.0) {
                return Err(Error::config("pseudo-Huber delta must be positive"));
            }
        }
        if self.epsilon2 < self.epsilon1 {
            log::warn!(
                "epsilon2 ({}) below epsilon1 ({}); the usual choice is epsilon2 >= epsilon1",
                self.epsilon2,
                self.epsilon1
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WSearchResult {
    pub views: Vec<(LatentCode, ImageTensor)>,
    /// `||z_k - z0|| - epsilon1` per view at the returned latents.
    pub residuals: Vec<f64>,
    /// Mean pairwise distance among the views (0 for a single view).
    pub mean_pairwise: f64,
    pub objective: f64,
    pub steps_taken: usize,
}

/// Mean of the distances between all unordered row pairs of `x`.
pub fn mean_pairwise_distance<'t>(x: Var<'t>) -> Option<Var<'t>> {
    let n = x.shape()[0];
    if n < 2 {
        return None;
    }
    let (a, b): (Vec<usize>, Vec<usize>) = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .unzip();
    let d = x.select_rows(Rc::from(a)).sub(x.select_rows(Rc::from(b))).norm_rows();
    Some(d.mean())
}

/// Embeddings of `g(w)` under `f`, optionally normalized.
fn embed<'t, F, G>(w: Var<'t>, f: &F, g: &G, normalize: bool) -> Var<'t>
where
    F: DifferentiableMap + ?Sized,
    G: DifferentiableMap + ?Sized,
{
    let z = f.apply(g.apply(w)).flatten();
    if normalize {
        z.normalize_rows()
    } else {
        z
    }
}

/// The search objective on latents `w: [n, M]` for a fixed anchor embedding `z0: [K]`:
/// `(1/n) sum_k penalty(||z_k - z0|| - epsilon1) + lambda (epsilon2 - mean pairwise distance)^+`.
pub fn search_objective<'t, F, G>(w: Var<'t>, z0: &[f64], f: &F, g: &G, cfg: &WSearchConfig) -> Var<'t>
where
    F: DifferentiableMap + ?Sized,
    G: DifferentiableMap + ?Sized,
{
    let tape = w.tape();
    let z = embed(w, f, g, cfg.normalize_embeddings);
    let anchor = tape.constant(Tensor::vector(z0.to_vec()).map(|v| -v));
    let residual = z.add_row_broadcast(anchor).norm_rows().offset(-cfg.epsilon1);
    let boundary = match cfg.penalty {
        BoundaryPenalty::Squared => residual.square().mean(),
        BoundaryPenalty::PseudoHuber { delta } => residual
            .scale(1.0 / delta)
            .square()
            .offset(1.0)
            .sqrt()
            .offset(-1.0)
            .scale(delta * delta)
            .mean(),
    };
    if cfg.lambda == 0.0 {
        return boundary;
    }
    let spread = match cfg.uniformity_space {
        DistanceSpace::Z => mean_pairwise_distance(z),
        DistanceSpace::W => mean_pairwise_distance(w),
    };
    match spread {
        Some(d) => boundary.add(d.neg().offset(cfg.epsilon2).relu().scale(cfg.lambda)),
        None => boundary,
    }
}

/// Unit (or raw) anchor embedding used as the search centre.
pub fn anchor_embedding<F: DifferentiableMap + ?Sized>(f: &F, x0: &ImageTensor, normalize: bool) -> Result<Vec<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x0.shape());
    let batch = x0.clone().reshape(&shape);
    f.check_batch(&batch)?;
    let tape = Tape::new();
    let z = f.apply(tape.constant(batch)).flatten();
    let z = if normalize { z.normalize_rows() } else { z };
    Ok(z.value().data().to_vec())
}

/// Initial latents `[n, M]` for the search.
pub fn initial_latents<E: DifferentiableMap + ?Sized>(
    x0: &ImageTensor,
    e: &E,
    cfg: &WSearchConfig,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x0.shape());
    let base = e.eval(&x0.clone().reshape(&shape))?.into_data();
    let m = base.len();
    let n = cfg.views;
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        for &b in &base {
            let eps: f64 = StandardNormal.sample(rng);
            data.push(match cfg.init_policy {
                InitPolicy::InvertedAnchorPlusNoise => b + cfg.init_noise * cfg.epsilon1 * eps,
                InitPolicy::Random => eps,
            });
        }
    }
    Ok(Tensor::matrix(n, m, data))
}

/// Runs the search from explicit initial latents `[n, M]`.
pub fn w_search_from<F, G>(z0: &[f64], w0: Tensor, f: &F, g: &G, cfg: &WSearchConfig) -> Result<WSearchResult>
where
    F: DifferentiableMap + ?Sized,
    G: DifferentiableMap + ?Sized,
{
    cfg.validate()?;
    if w0.shape().len() != 2 || w0.rows() != cfg.views {
        return Err(Error::shape("initial latents", &[cfg.views, g.input_shape().iter().product()], w0.shape()));
    }
    let mut w = w0;
    let mut previous = f64::INFINITY;
    let mut steps_taken = 0;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let wv = tape.var(w.clone());
        let j = search_objective(wv, z0, f, g, cfg);
        let value = j.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "w-search objective".into(),
                index: step,
            });
        }
        if (previous - value).abs() < cfg.tol {
            break;
        }
        previous = value;
        let grad = tape.backward(j).wrt(wv);
        if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("w-search gradient at step {step}"),
                index: i,
            });
        }
        for (wi, gi) in w.data_mut().iter_mut().zip(grad.data()) {
            *wi -= cfg.step_size * gi;
        }
        steps_taken = step + 1;
    }
    finish(z0, w, f, g, cfg, steps_taken)
}

fn finish<F, G>(z0: &[f64], w: Tensor, f: &F, g: &G, cfg: &WSearchConfig, steps_taken: usize) -> Result<WSearchResult>
where
    F: DifferentiableMap + ?Sized,
    G: DifferentiableMap + ?Sized,
{
    let tape = Tape::new();
    let wv = tape.constant(w.clone());
    let objective = search_objective(wv, z0, f, g, cfg).item();
    let images = g.apply(wv);
    let z = embed(wv, f, g, cfg.normalize_embeddings);
    let residuals = z
        .value()
        .data()
        .chunks(z0.len())
        .map(|row| row.iter().zip(z0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() - cfg.epsilon1)
        .collect();
    let space = match cfg.uniformity_space {
        DistanceSpace::Z => z,
        DistanceSpace::W => wv,
    };
    let mean_pairwise = mean_pairwise_distance(space).map_or(0.0, |d| d.item());
    let images = images.value().unstack();
    let views = w
        .unstack()
        .into_iter()
        .zip(images)
        .map(|(wk, img)| Ok((LatentCode::new(wk.into_data())?, img)))
        .collect::<Result<Vec<_>>>()?;
    Ok(WSearchResult {
        views,
        residuals,
        mean_pairwise,
        objective,
        steps_taken,
    })
}

/// Finds `cfg.views` latents whose decoded embeddings sit about `epsilon1` away
/// from the anchor's embedding while staying spread apart.
pub fn w_search<F, G, E>(
    x0: &ImageTensor,
    f: &F,
    g: &G,
    e: &E,
    cfg: &WSearchConfig,
    rng: &mut StreamRng,
) -> Result<WSearchResult>
where
    F: DifferentiableMap + ?Sized,
    G: DifferentiableMap + ?Sized,
    E: DifferentiableMap + ?Sized,
{
    cfg.validate()?;
    let z0 = anchor_embedding(f, x0, cfg.normalize_embeddings)?;
    let w0 = initial_latents(x0, e, cfg, rng)?;
    w_search_from(&z0, w0, f, g, cfg)
}

/// One fast-sign-gradient step `w - step * sign(grad)` on an arbitrary objective.
/// Coordinates with zero gradient stay put.
pub fn sign_gradient_step(
    w: &LatentCode,
    step: f64,
    objective: impl for<'t> Fn(Var<'t>) -> Var<'t>,
) -> Result<LatentCode> {
    let tape = Tape::new();
    let wv = tape.var(w.to_tensor());
    let j = objective(wv);
    if !j.item().is_finite() {
        return Err(Error::NonFinite {
            what: "online search objective".into(),
            index: 0,
        });
    }
    let grad = tape.backward(j).wrt(wv);
    let out = w
        .as_slice()
        .iter()
        .zip(grad.data())
        .map(|(&wi, &gi)| {
            if gi > 0.0 {
                wi - step
            } else if gi < 0.0 {
                wi + step
            } else {
                wi
            }
        })
        .collect();
    LatentCode::new(out)
}

/// Single-view online variant of the search: one sign-gradient step on the
/// boundary objective starting from `w_init`.
pub fn w_search_online_1step<F, G>(
    x0: &ImageTensor,
    f: &F,
    g: &G,
    w_init: &LatentCode,
    cfg: &WSearchConfig,
    step: f64,
) -> Result<LatentCode>
where
    F: DifferentiableMap + ?Sized,
    G: DifferentiableMap + ?Sized,
{
    let z0 = anchor_embedding(f, x0, cfg.normalize_embeddings)?;
    let single = WSearchConfig { views: 1, ..*cfg };
    sign_gradient_step(w_init, step, |w| search_objective(w, &z0, f, g, &single))
}
