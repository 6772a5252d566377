//! Reconstruction loss and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::ImageBuffer;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;

/// `(1-λ)·L1 + λ·(1-SSIM)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec<T> {
    pub dssim_weight: T,
    pub ssim_window: usize,
}

impl<T: Real> Default for LossSpec<T> {
    fn default() -> Self {
        Self { dssim_weight: T::c(0.2), ssim_window: 11 }
    }
}

impl<T: Real> LossSpec<T> {
    pub fn l1_weight(&self) -> T {
        T::one() - self.dssim_weight
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dssim_weight >= T::zero() && self.dssim_weight <= T::one()) {
            return Err(Error::InvalidParameter("dssim weight must lie in [0,1]".into()));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::InvalidParameter("ssim window must be odd and at least 3".into()));
        }
        Ok(())
    }
}

fn check_shapes<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::InvalidInput(format!(
            "resolution mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn loss<T: Real>(render: &ImageBuffer<T>, gt: &ImageBuffer<T>, spec: &LossSpec<T>) -> Result<T> {
    Ok(evaluate(render, gt, spec, false)?.0)
}

/// Loss value and its gradient with respect to every rendered channel.
pub fn loss_and_grad<T: Real>(render: &ImageBuffer<T>, gt: &ImageBuffer<T>, spec: &LossSpec<T>) -> Result<(T, Vec<[T; 3]>)> {
    evaluate(render, gt, spec, true)
}

fn evaluate<T: Real>(render: &ImageBuffer<T>, gt: &ImageBuffer<T>, spec: &LossSpec<T>, want_grad: bool) -> Result<(T, Vec<[T; 3]>)> {
    check_shapes(render, gt)?;
    spec.validate()?;
    let n = T::from_usize_lossy(render.len() * 3);
    let l1w = spec.l1_weight();
    let mut l1 = T::zero();
    let mut grad = if want_grad { vec![[T::zero(); 3]; render.len()] } else { Vec::new() };
    for (i, (r, g)) in render.pixels.iter().zip(&gt.pixels).enumerate() {
        for ch in 0..3 {
            let d = r[ch] - g[ch];
            l1 += d.abs();
            if want_grad {
                // Subgradient 0 at d = 0.
                let s = if d > T::zero() { T::one() } else if d < T::zero() { -T::one() } else { T::zero() };
                grad[i][ch] = l1w * s / n;
            }
        }
    }
    let mut value = l1w * l1 / n;
    if spec.dssim_weight > T::zero() {
        let eval = ssim_eval(render, gt, spec.ssim_window, want_grad)?;
        value += spec.dssim_weight * (T::one() - eval.value);
        if want_grad {
            for (g, s) in grad.iter_mut().zip(&eval.grad) {
                for ch in 0..3 {
                    g[ch] -= spec.dssim_weight * s[ch];
                }
            }
        }
    }
    Ok((value, grad))
}

/// Peak signal-to-noise ratio for images in [0,1], capped at 100 dB.
pub fn psnr<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<T> {
    check_shapes(a, b)?;
    Ok(psnr_from_mse(mse(a, b)))
}

pub fn mse<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> T {
    let sum: T = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum::<T>())
        .sum();
    sum / T::from_usize_lossy(a.len() * 3)
}

pub fn psnr_from_mse<T: Real>(mse: T) -> T {
    let cap = T::c(PSNR_CAP_DB);
    if mse <= T::zero() {
        return cap;
    }
    (T::c(10.0) * (T::one() / mse).log10()).min(cap)
}

/// Mean SSIM over all fully contained `window × window` uniform windows and
/// the three channels.
pub fn ssim<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, window: usize) -> Result<T> {
    check_shapes(a, b)?;
    Ok(ssim_eval(a, b, window, false)?.value)
}

struct SsimEval<T> {
    value: T,
    /// ∂SSIM/∂a per pixel and channel.
    grad: Vec<[T; 3]>,
}

/// Summed-area table with a zero border row/column.
struct Integral<T> {
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Integral<T> {
    fn new(w: usize, h: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let stride = w + 1;
        let mut data = vec![T::zero(); stride * (h + 1)];
        for y in 0..h {
            let mut row = T::zero();
            for x in 0..w {
                row += f(x, y);
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + row;
            }
        }
        Self { w, data }
    }

    /// Sum over `[x0, x1) × [y0, y1)`.
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> T {
        let s = self.w + 1;
        self.data[y1 * s + x1] - self.data[y0 * s + x1] - self.data[y1 * s + x0] + self.data[y0 * s + x0]
    }
}

fn ssim_eval<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, k: usize, want_grad: bool) -> Result<SsimEval<T>> {
    if k < 1 || k > a.width || k > a.height {
        return Err(Error::InvalidInput(format!("ssim window {k} does not fit a {}x{} image", a.width, a.height)));
    }
    let (w, h) = (a.width, a.height);
    let (nx, ny) = (w - k + 1, h - k + 1);
    let count = T::from_usize_lossy(k * k);
    let inv_n = T::one() / count;
    let total_windows = T::from_usize_lossy(nx * ny * 3);
    let c1 = T::c(SSIM_C1);
    let c2 = T::c(SSIM_C2);
    let two = T::c(2.0);
    let mut value = T::zero();
    let mut grad = if want_grad { vec![[T::zero(); 3]; w * h] } else { Vec::new() };

    for ch in 0..3 {
        let x = |i: usize, j: usize| a.pixels[j * w + i][ch];
        let y = |i: usize, j: usize| b.pixels[j * w + i][ch];
        let sx = Integral::new(w, h, x);
        let sy = Integral::new(w, h, y);
        let sxx = Integral::new(w, h, |i, j| x(i, j) * x(i, j));
        let syy = Integral::new(w, h, |i, j| y(i, j) * y(i, j));
        let sxy = Integral::new(w, h, |i, j| x(i, j) * y(i, j));
        // Per-window coefficients of ∂S/∂x_p = (A + B x_p + C y_p) / N.
        let mut coef = if want_grad { vec![[T::zero(); 3]; nx * ny] } else { Vec::new() };
        for j in 0..ny {
            for i in 0..nx {
                let (i1, j1) = (i + k, j + k);
                let mx = sx.sum(i, j, i1, j1) * inv_n;
                let my = sy.sum(i, j, i1, j1) * inv_n;
                let vx = sxx.sum(i, j, i1, j1) * inv_n - mx * mx;
                let vy = syy.sum(i, j, i1, j1) * inv_n - my * my;
                let cxy = sxy.sum(i, j, i1, j1) * inv_n - mx * my;
                let n1 = two * mx * my + c1;
                let n2 = two * cxy + c2;
                let d1 = mx * mx + my * my + c1;
                let d2 = vx + vy + c2;
                let s = (n1 * n2) / (d1 * d2);
                value += s;
                if want_grad {
                    let d_mx = (two * my * n2) / (d1 * d2) - s * two * mx / d1;
                    let d_vx = -s / d2;
                    let d_cxy = two * n1 / (d1 * d2);
                    let ca = d_mx - two * mx * d_vx - my * d_cxy;
                    coef[j * nx + i] = [ca, two * d_vx, d_cxy];
                }
            }
        }
        if want_grad {
            let ia = Integral::new(nx, ny, |i, j| coef[j * nx + i][0]);
            let ib = Integral::new(nx, ny, |i, j| coef[j * nx + i][1]);
            let ic = Integral::new(nx, ny, |i, j| coef[j * nx + i][2]);
            for py in 0..h {
                let wy0 = (py + 1).saturating_sub(k);
                let wy1 = (py + 1).min(ny);
                if wy0 >= wy1 {
                    continue;
                }
                for px in 0..w {
                    let wx0 = (px + 1).saturating_sub(k);
                    let wx1 = (px + 1).min(nx);
                    if wx0 >= wx1 {
                        continue;
                    }
                    let sa = ia.sum(wx0, wy0, wx1, wy1);
                    let sb = ib.sum(wx0, wy0, wx1, wy1);
                    let sc = ic.sum(wx0, wy0, wx1, wy1);
                    grad[py * w + px][ch] = (sa + sb * x(px, py) + sc * y(px, py)) * inv_n / total_windows;
                }
            }
        }
    }
    Ok(SsimEval { value: value / total_windows, grad })
}
