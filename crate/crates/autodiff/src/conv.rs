//! im2col-based 2-D convolution kernels.

use crate::tensor::gemm;

/// Static geometry of a convolution over `[batch, channels, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let npix = g.out_pixels();
    let patch = g.patch();
    let mut out = vec![0.0; g.batch * g.out_ch * npix];
    let mut cols = vec![0.0; patch * npix];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        let dst = &mut out[n * g.out_ch * npix..(n + 1) * g.out_ch * npix];
        if let Some(bias) = b {
            for (o, chunk) in dst.chunks_mut(npix).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        gemm(g.out_ch, patch, npix, w, false, &cols, false, dst, 1.0);
    }
    out
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let npix = g.out_pixels();
    let patch = g.patch();
    let mut dx = need_x.then(|| vec![0.0; g.batch * g.in_len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut db = need_b.then(|| vec![0.0; g.out_ch]);
    let mut cols = vec![0.0; patch * npix];
    let mut dcols = vec![0.0; patch * npix];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_ch * npix..(n + 1) * g.out_ch * npix];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in go.chunks(npix).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            gemm(g.out_ch, npix, patch, go, false, &cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.out_ch, npix, w, true, go, false, &mut dcols, 0.0);
            col2im(g, &dcols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    (dx, dw, db)
}
