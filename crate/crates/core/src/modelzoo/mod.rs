//! The differentiable-map contract and the toy networks behind it.

mod blob;
pub mod checkpoint;
mod gradcheck;
mod network;
pub mod zoo;

pub use blob::{render as render_blobs, BlobSpec};
pub use gradcheck::{grad_check, grad_check_fn, grad_check_leaves, Coordinate, GradCheckOptions, GradCheckReport};
pub use network::{Activation, Architecture, DifferentiableMap, Layer, Network, Param};

use viewlab_autodiff::{Tape, Tensor, Var};

use crate::error::{ensure_finite, Error, Result};

/// Images are `[C, H, W]` tensors (batches are `[B, C, H, W]`) with values in `[0, 1]`.
pub type ImageTensor = Tensor;

/// A point on the encoder's unit hypersphere.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    pub const TOLERANCE: f64 = 1e-6;

    /// Wraps an already-normalized vector.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::NotNormalized { row: 0, norm });
        }
        Ok(UnitEmbedding(v))
    }

    /// Normalizes `v`; a zero vector becomes the first basis vector.
    pub fn normalize(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            log::warn!("normalizing a zero embedding; falling back to the first basis vector");
            v.fill(0.0);
            if let Some(first) = v.first_mut() {
                *first = 1.0;
            }
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        UnitEmbedding(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &UnitEmbedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A generator latent (W-space point).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        ensure_finite("latent code", &v)?;
        Ok(LatentCode(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(1, self.0.len(), self.0.clone())
    }
}

fn single(x: &ImageTensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

/// Differentiable `normalize(f(x))` on a batch, with `f`'s parameters bound by the caller.
pub fn encode_var<'t, M: DifferentiableMap + ?Sized>(f: &M, x: Var<'t>, params: &[Var<'t>]) -> Var<'t> {
    f.forward(x, params).flatten().normalize_rows()
}

/// Unit embeddings `[B, K]` for a batch of images.
pub fn encode_batch<M: DifferentiableMap + ?Sized>(f: &M, x: &Tensor) -> Result<Tensor> {
    f.check_batch(x)?;
    ensure_finite("encoder input", x.data())?;
    let tape = Tape::new();
    let z = f.apply(tape.constant(x.clone())).flatten();
    let raw = z.value();
    for i in 0..raw.rows() {
        if raw.row(i).iter().all(|v| *v == 0.0) {
            log::warn!("encoder produced a zero vector for row {i}; using the first basis vector");
        }
    }
    Ok((*z.normalize_rows().value()).clone())
}

/// `f(x) / ||f(x)||` for one image.
pub fn encode<M: DifferentiableMap + ?Sized>(f: &M, x: &ImageTensor) -> Result<UnitEmbedding> {
    let z = encode_batch(f, &single(x))?;
    Ok(UnitEmbedding(z.into_data()))
}

/// Images `[B, C, H, W]` for latents `[B, M]`.
pub fn generate_batch<M: DifferentiableMap + ?Sized>(g: &M, w: &Tensor) -> Result<Tensor> {
    ensure_finite("latent batch", w.data())?;
    let out = g.eval(w)?;
    ensure_finite("generated image", out.data())?;
    Ok(out)
}

pub fn generate<M: DifferentiableMap + ?Sized>(g: &M, w: &LatentCode) -> Result<ImageTensor> {
    let out = generate_batch(g, &w.to_tensor())?;
    Ok(out.unstack().remove(0))
}
