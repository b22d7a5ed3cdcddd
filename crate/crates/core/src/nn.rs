//! Layer primitives with explicit backward passes.
//!
//! Spatial activations are kept channels-last and flattened: a batch of N maps
//! of size H × W with C channels is an `(N·H·W) × C` matrix. Convolutions are
//! 3 × 3 with padding 1 and lower to a single GEMM through im2col, whose
//! columns are ordered `(ky, kx, c)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Spatial geometry of a flattened activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl MapShape {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Output geometry of a 3 × 3, padding 1 convolution.
    pub fn conv_out(&self, stride: usize, out_c: usize) -> MapShape {
        MapShape {
            n: self.n,
            h: (self.h - 1) / stride + 1,
            w: (self.w - 1) / stride + 1,
            c: out_c,
        }
    }
}

/// Unfolds 3 × 3 patches. Returns an `(N·Ho·Wo) × (9·C)` matrix.
pub fn im2col(x: &Array2<f64>, shape: MapShape, stride: usize) -> Array2<f64> {
    let out = shape.conv_out(stride, shape.c);
    let c = shape.c;
    let mut cols = Array2::<f64>::zeros((out.rows(), 9 * c));
    let src = x.as_slice().expect("contiguous activation");
    let dst = cols.as_slice_mut().expect("contiguous cols");
    let k = 9 * c;
    for n in 0..shape.n {
        for oy in 0..out.h {
            for ox in 0..out.w {
                let row = (n * out.h + oy) * out.w + ox;
                let base = row * k;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= shape.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= shape.w as isize {
                            continue;
                        }
                        let s = ((n * shape.h + iy as usize) * shape.w + ix as usize) * c;
                        let d = base + (ky * 3 + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input map.
pub fn col2im(dcols: &Array2<f64>, shape: MapShape, stride: usize) -> Array2<f64> {
    let out = shape.conv_out(stride, shape.c);
    let c = shape.c;
    let mut dx = Array2::<f64>::zeros((shape.rows(), c));
    let dst = dx.as_slice_mut().expect("contiguous");
    let src = dcols.as_slice().expect("contiguous");
    let k = 9 * c;
    for n in 0..shape.n {
        for oy in 0..out.h {
            for ox in 0..out.w {
                let row = (n * out.h + oy) * out.w + ox;
                let base = row * k;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= shape.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= shape.w as isize {
                            continue;
                        }
                        let d = ((n * shape.h + iy as usize) * shape.w + ix as usize) * c;
                        let s = base + (ky * 3 + kx) * c;
                        for (a, b) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Column-wise batch normalization using batch statistics.
pub fn bn_forward_train(
    x: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, BnCache) {
    let rows = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / rows;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &gamma + &beta;
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub fn bn_forward_eval(
    x: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    running_mean: ArrayView1<f64>,
    running_var: ArrayView1<f64>,
) -> Array2<f64> {
    let scale = &gamma / &running_var.mapv(|v| (v + BN_EPS).sqrt());
    let shift = &beta - &(&running_mean * &scale);
    x * &scale + &shift
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(dy: &Array2<f64>, gamma: ArrayView1<f64>, cache: &BnCache) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let rows = dy.nrows() as f64;
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let scale = &gamma * &cache.inv_std / rows;
    let dx = (dy * rows - &dbeta - &(&cache.xhat * &dgamma)) * &scale;
    (dx, dgamma, dbeta)
}

/// Folds the batch statistics of `cache` into running estimates.
pub fn bn_update_running(running_mean: &mut Array1<f64>, running_var: &mut Array1<f64>, cache: &BnCache, rows: usize) {
    let unbias = if rows > 1 {
        rows as f64 / (rows as f64 - 1.0)
    } else {
        1.0
    };
    running_mean.zip_mut_with(&cache.mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
    running_var.zip_mut_with(&cache.var, |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
}

pub fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` where the forward output was clamped.
pub fn relu_backward(dy: &mut Array2<f64>, y: &Array2<f64>) {
    dy.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
}

/// Global average pooling: `(N·H·W) × C` → `N × C`.
pub fn gap_forward(x: &Array2<f64>, shape: MapShape) -> Array2<f64> {
    let hw = shape.h * shape.w;
    let mut out = Array2::<f64>::zeros((shape.n, shape.c));
    for n in 0..shape.n {
        let block = x.slice(ndarray::s![n * hw..(n + 1) * hw, ..]);
        out.row_mut(n).assign(&(block.sum_axis(Axis(0)) / hw as f64));
    }
    out
}

pub fn gap_backward(dy: &Array2<f64>, shape: MapShape) -> Array2<f64> {
    let hw = shape.h * shape.w;
    let mut dx = Array2::<f64>::zeros((shape.rows(), shape.c));
    for n in 0..shape.n {
        let g = dy.row(n).mapv(|v| v / hw as f64);
        for r in n * hw..(n + 1) * hw {
            dx.row_mut(r).assign(&g);
        }
    }
    dx
}

/// `x · W + b` with `W` stored as `in × out`.
pub fn linear_forward(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(dy: &Array2<f64>, x: &Array2<f64>, w: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&w.t()), x.t().dot(dy), dy.sum_axis(Axis(0)))
}
