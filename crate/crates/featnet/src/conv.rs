//! Dense CHW tensors and stride-1 convolutions with circular column padding
//! and replicated row padding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Channel-major `c x h x w` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let p = self.h * self.w;
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let p = self.h * self.w;
        &mut self.data[ch * p..(ch + 1) * p]
    }

    /// Rotates every channel right by `k` columns.
    pub fn rotate_columns(&self, k: isize) -> Tensor {
        let mut out = Tensor::zeros(self.c, self.h, self.w);
        let w = self.w as isize;
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let nx = (x as isize + k).rem_euclid(w) as usize;
                    out.data[(ch * self.h + y) * self.w + nx] = self.data[(ch * self.h + y) * self.w + x];
                }
            }
        }
        out
    }
}

/// Output rows processed per GEMM block, bounding the im2col buffer.
const BLOCK_PIXELS: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// 1 or 3.
    pub kernel: usize,
    pub dilation: usize,
    /// `out_ch x in_ch x kernel x kernel`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(c: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; c.weight.len()],
            bias: vec![0.0; c.bias.len()],
        }
    }
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        Self {
            in_ch,
            out_ch,
            kernel,
            dilation: dilation.max(1),
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// Gaussian init with standard deviation `sqrt(gain / fan_in)`, zero bias.
    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize, gain: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, kernel, dilation);
        let std = (gain / c.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut c.weight {
            *w = normal.sample(rng);
        }
        c
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Fills `cols` (`fan_in x rows*w`) for output rows `y0..y1`.
    fn im2col(&self, x: &Tensor, y0: usize, y1: usize, cols: &mut Vec<f64>) {
        let (h, w) = (x.h, x.w);
        let p = (y1 - y0) * w;
        cols.clear();
        cols.resize(self.fan_in() * p, 0.0);
        let r = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        for ci in 0..self.in_ch {
            let plane = x.plane(ci);
            for ky in 0..self.kernel as isize {
                for kx in 0..self.kernel as isize {
                    let row = (ci * self.taps()) + (ky as usize) * self.kernel + kx as usize;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let dy = (ky - r) * d;
                    let dx = (kx - r) * d;
                    for y in y0..y1 {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let src = &plane[sy * w..(sy + 1) * w];
                        let out = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                        let s = dx.rem_euclid(w as isize) as usize;
                        out[..w - s].copy_from_slice(&src[s..]);
                        out[w - s..].copy_from_slice(&src[..s]);
                    }
                }
            }
        }
    }

    /// Adds `cols` gradients for rows `y0..y1` back onto the input gradient.
    fn col2im(&self, gcols: &[f64], y0: usize, y1: usize, gx: &mut Tensor) {
        let (h, w) = (gx.h, gx.w);
        let p = (y1 - y0) * w;
        let r = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        for ci in 0..self.in_ch {
            for ky in 0..self.kernel as isize {
                for kx in 0..self.kernel as isize {
                    let row = (ci * self.taps()) + (ky as usize) * self.kernel + kx as usize;
                    let src = &gcols[row * p..(row + 1) * p];
                    let dy = (ky - r) * d;
                    let dx = (kx - r) * d;
                    let plane = gx.plane_mut(ci);
                    let s = dx.rem_euclid(w as isize) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let g = &src[(y - y0) * w..(y - y0 + 1) * w];
                        let dst = &mut plane[sy * w..(sy + 1) * w];
                        for (d, v) in dst[s..].iter_mut().zip(&g[..w - s]) {
                            *d += v;
                        }
                        for (d, v) in dst[..s].iter_mut().zip(&g[w - s..]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    fn block_rows(&self, w: usize) -> usize {
        (BLOCK_PIXELS / (w.max(1) * self.kernel)).max(1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(self.out_ch, h, w);
        let k = self.fan_in();
        let hw = h * w;
        let mut cols = Vec::new();
        let mut block = Vec::new();
        let step = self.block_rows(w);
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            let p = (y1 - y0) * w;
            self.im2col(x, y0, y1, &mut cols);
            block.clear();
            block.resize(self.out_ch * p, 0.0);
            // SAFETY: all slices are sized to the dimensions and strides passed.
            unsafe {
                matrixmultiply::dgemm(
                    self.out_ch,
                    k,
                    p,
                    1.0,
                    self.weight.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    block.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            for o in 0..self.out_ch {
                let b = self.bias[o];
                let dst = &mut out.data[o * hw + y0 * w..o * hw + y1 * w];
                for (d, s) in dst.iter_mut().zip(&block[o * p..(o + 1) * p]) {
                    *d = s + b;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, grad: &mut ConvGrad) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let k = self.fan_in();
        let mut gx = Tensor::zeros(self.in_ch, h, w);
        let mut cols = Vec::new();
        let mut gblock = Vec::new();
        let mut gcols = Vec::new();
        for o in 0..self.out_ch {
            grad.bias[o] += gy.plane(o).iter().sum::<f64>();
        }
        let step = self.block_rows(w);
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            let p = (y1 - y0) * w;
            self.im2col(x, y0, y1, &mut cols);
            gblock.clear();
            for o in 0..self.out_ch {
                gblock.extend_from_slice(&gy.data[o * hw + y0 * w..o * hw + y1 * w]);
            }
            gcols.clear();
            gcols.resize(k * p, 0.0);
            // SAFETY: dimensions and strides match the buffers above.
            unsafe {
                // dW += gY · colsᵀ
                matrixmultiply::dgemm(
                    self.out_ch,
                    p,
                    k,
                    1.0,
                    gblock.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    grad.weight.as_mut_ptr(),
                    k as isize,
                    1,
                );
                // dcols = Wᵀ · gY
                matrixmultiply::dgemm(
                    k,
                    self.out_ch,
                    p,
                    1.0,
                    self.weight.as_ptr(),
                    1,
                    k as isize,
                    gblock.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    gcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            self.col2im(&gcols, y0, y1, &mut gx);
        }
        gx
    }
}

/// NaN passes through so corrupted inputs surface in the loss.
pub fn relu_inplace(t: &mut Tensor) {
    for x in &mut t.data {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Masks `g` where the ReLU output `y` was not positive.
pub fn relu_backward(y: &Tensor, g: &mut Tensor) {
    for (gi, yi) in g.data.iter_mut().zip(&y.data) {
        if *yi <= 0.0 {
            *gi = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squared norm below which a descriptor is treated as degenerate.
pub const NORM_EPS: f64 = 1e-24;

/// Per-pixel L2 normalization across channels. A degenerate (all-zero)
/// descriptor becomes the uniform unit vector.
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let hw = x.h * x.w;
    let uniform = 1.0 / (x.c as f64).sqrt();
    let mut out = x.clone();
    for p in 0..hw {
        let n2: f64 = (0..x.c).map(|c| x.data[c * hw + p].powi(2)).sum();
        if n2 < NORM_EPS {
            for c in 0..x.c {
                out.data[c * hw + p] = uniform;
            }
            continue;
        }
        let n = n2.sqrt();
        for c in 0..x.c {
            out.data[c * hw + p] /= n;
        }
    }
    out
}

/// Gradient of [`l2_normalize`] with respect to its input `x`; zero at
/// degenerate pixels.
pub fn l2_normalize_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let hw = x.h * x.w;
    let mut gx = Tensor::zeros(x.c, x.h, x.w);
    for p in 0..hw {
        let n2: f64 = (0..x.c).map(|c| x.data[c * hw + p].powi(2)).sum::<f64>();
        if n2 < NORM_EPS {
            continue;
        }
        let n = n2.sqrt();
        let dot: f64 = (0..x.c).map(|c| x.data[c * hw + p] * gy.data[c * hw + p]).sum();
        for c in 0..x.c {
            let i = c * hw + p;
            gx.data[i] = gy.data[i] / n - x.data[i] * dot / (n2 * n);
        }
    }
    gx
}
