//! Analytic Gaussian-blob renderer used as the toy generator.
//!
//! Each blob takes `3 + channels` latent coordinates: horizontal and
//! vertical position, log-scale, and one color logit per channel. A pixel is
//! `1 - exp(-amplitude * sum_b color_bc * G_b(p))`, so the image always lies
//! in `[0, 1)` and is smooth in the latent.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use viewlab_autodiff::{CustomOp, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub blobs: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Blob radius at zero log-scale, in units of image width.
    pub base_scale: f64,
    /// Maximum offset of a blob centre from the image centre.
    pub position_range: f64,
    pub amplitude: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            blobs: 3,
            channels: 3,
            height: 32,
            width: 32,
            base_scale: 0.12,
            position_range: 0.35,
            amplitude: 2.0,
        }
    }
}

impl BlobSpec {
    pub fn per_blob(&self) -> usize {
        3 + self.channels
    }

    pub fn latent_dim(&self) -> usize {
        self.blobs * self.per_blob()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct BlobParams {
    cx: f64,
    cy: f64,
    scale: f64,
    dcx: f64,
    dcy: f64,
    dscale: f64,
}

impl BlobSpec {
    fn decode(&self, w: &[f64]) -> BlobParams {
        let (t0, t1, t2) = (w[0].tanh(), w[1].tanh(), w[2].tanh());
        let scale = self.base_scale * (0.5 * t2).exp();
        BlobParams {
            cx: 0.5 + self.position_range * t0,
            cy: 0.5 + self.position_range * t1,
            scale,
            dcx: self.position_range * (1.0 - t0 * t0),
            dcy: self.position_range * (1.0 - t1 * t1),
            dscale: scale * 0.5 * (1.0 - t2 * t2),
        }
    }

    fn coords(&self) -> (Vec<f64>, Vec<f64>) {
        let ux = (0..self.width).map(|x| (x as f64 + 0.5) / self.width as f64).collect();
        let uy = (0..self.height).map(|y| (y as f64 + 0.5) / self.height as f64).collect();
        (ux, uy)
    }

    fn gaussian(&self, b: &BlobParams, ux: &[f64], uy: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * b.scale * b.scale);
        let mut g = Vec::with_capacity(self.height * self.width);
        for &y in uy {
            let dy = y - b.cy;
            for &x in ux {
                let dx = x - b.cx;
                g.push((-(dx * dx + dy * dy) * inv).exp());
            }
        }
        g
    }

    /// Renders a batch of latents `[B, latent_dim]` to `[B, C, H, W]`.
    pub fn render_values(&self, latents: &Tensor) -> Tensor {
        let batch = latents.rows();
        let npix = self.height * self.width;
        let (ux, uy) = self.coords();
        let mut out = Vec::with_capacity(batch * self.channels * npix);
        for n in 0..batch {
            let w = latents.row(n);
            let mut act = vec![0.0; self.channels * npix];
            for b in 0..self.blobs {
                let wb = &w[b * self.per_blob()..(b + 1) * self.per_blob()];
                let params = self.decode(wb);
                let g = self.gaussian(&params, &ux, &uy);
                for c in 0..self.channels {
                    let col = self.amplitude * sigmoid(wb[3 + c]);
                    for (a, gv) in act[c * npix..(c + 1) * npix].iter_mut().zip(&g) {
                        *a += col * gv;
                    }
                }
            }
            out.extend(act.into_iter().map(|a| -(-a).exp_m1()));
        }
        Tensor::new(vec![batch, self.channels, self.height, self.width], out)
    }
}

struct RenderOp(BlobSpec);

impl CustomOp for RenderOp {
    fn name(&self) -> &str {
        "blob_render"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let spec = &self.0;
        let latents = inputs[0];
        let npix = spec.height * spec.width;
        let (ux, uy) = spec.coords();
        let mut grad = vec![0.0; latents.numel()];
        for n in 0..latents.rows() {
            let w = latents.row(n);
            let img = output.row(n);
            let go = &grad_output[n * spec.channels * npix..(n + 1) * spec.channels * npix];
            // dL/d(activation) = dL/dy * (1 - y)
            let ga: Vec<f64> = go.iter().zip(img).map(|(g, y)| g * (1.0 - y)).collect();
            let gw = &mut grad[n * spec.latent_dim()..(n + 1) * spec.latent_dim()];
            for b in 0..spec.blobs {
                let off = b * spec.per_blob();
                let wb = &w[off..off + spec.per_blob()];
                let p = spec.decode(wb);
                let g = spec.gaussian(&p, &ux, &uy);
                let cols: Vec<f64> = (0..spec.channels).map(|c| sigmoid(wb[3 + c])).collect();

                let mut g_cx = 0.0;
                let mut g_cy = 0.0;
                let mut g_s = 0.0;
                let inv_s2 = 1.0 / (p.scale * p.scale);
                for (k, &gv) in g.iter().enumerate() {
                    let mut g_g = 0.0;
                    for c in 0..spec.channels {
                        g_g += ga[c * npix + k] * spec.amplitude * cols[c];
                    }
                    let t = g_g * gv;
                    let dx = ux[k % spec.width] - p.cx;
                    let dy = uy[k / spec.width] - p.cy;
                    g_cx += t * dx * inv_s2;
                    g_cy += t * dy * inv_s2;
                    g_s += t * (dx * dx + dy * dy) * inv_s2 / p.scale;
                }
                gw[off] += g_cx * p.dcx;
                gw[off + 1] += g_cy * p.dcy;
                gw[off + 2] += g_s * p.dscale;
                for c in 0..spec.channels {
                    let g_col: f64 = ga[c * npix..(c + 1) * npix]
                        .iter()
                        .zip(&g)
                        .map(|(a, gv)| a * gv)
                        .sum::<f64>()
                        * spec.amplitude;
                    gw[off + 3 + c] += g_col * cols[c] * (1.0 - cols[c]);
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Differentiable rendering of `[B, latent_dim]` latents.
pub fn render<'t>(latents: Var<'t>, spec: &BlobSpec) -> Var<'t> {
    let out = spec.render_values(&latents.value());
    latents.tape().custom(Rc::new(RenderOp(*spec)), &[latents], out)
}
