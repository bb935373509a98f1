//! Raw array kernels shared by the tape ops and by non-differentiable
//! callers (pseudo-label feature upsampling, augmentation).

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Unfolds a `[C, H, W]` plane stack into a `(C·k·k) × (H·W)` matrix for a
/// stride-1 convolution with zero padding `k / 2`.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * hw;
                let out = &mut cols[row..row + hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = sy as usize * w;
                    let dst = y * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    out[dst + x_lo..dst + x_hi]
                        .copy_from_slice(&plane[src + sx0..src + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let base = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[base + sx0..base + sx0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    out
}

/// 2×2 max pooling. Returns the pooled values and, per output element, the
/// flat input index that won (first maximal element in row-major order).
pub(crate) fn maxpool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Interpolation taps for one axis: `(lo, hi, w_lo, w_hi)` per output index.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan(Vec<(usize, usize, f64, f64)>);

impl AxisPlan {
    /// Half-pixel (align-corners-false) bilinear taps from `n_in` to `n_out`.
    fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (math::floor(src) as usize).min(n_in - 1);
                let hi = if lo + 1 < n_in { lo + 1 } else { lo };
                let frac = src - lo as f64;
                (lo, hi, 1.0 - frac, frac)
            })
            .collect();
        AxisPlan(taps)
    }
}

/// Separable bilinear resampling plan between two grid sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    pub(crate) in_hw: (usize, usize),
    pub(crate) out_hw: (usize, usize),
    rows: AxisPlan,
    cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        if in_hw.0 == 0 || in_hw.1 == 0 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::invalid("resize", "zero extent"));
        }
        Ok(Self {
            in_hw,
            out_hw,
            rows: AxisPlan::new(in_hw.0, out_hw.0),
            cols: AxisPlan::new(in_hw.1, out_hw.1),
        })
    }

    pub(crate) fn forward(&self, input: &[f64], c: usize) -> Vec<f64> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            let src = &input[ci * ih * iw..(ci + 1) * ih * iw];
            let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in self.rows.0.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.cols.0.iter().enumerate() {
                    dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * iw + x0] + wx1 * src[y0 * iw + x1])
                        + wy1 * (wx0 * src[y1 * iw + x0] + wx1 * src[y1 * iw + x1]);
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, grad: &[f64], c: usize) -> Vec<f64> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let mut out = vec![0.0; c * ih * iw];
        for ci in 0..c {
            let g = &grad[ci * oh * ow..(ci + 1) * oh * ow];
            let dst = &mut out[ci * ih * iw..(ci + 1) * ih * iw];
            for (oy, &(y0, y1, wy0, wy1)) in self.rows.0.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.cols.0.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    dst[y0 * iw + x0] += wy0 * wx0 * v;
                    dst[y0 * iw + x1] += wy0 * wx1 * v;
                    dst[y1 * iw + x0] += wy1 * wx0 * v;
                    dst[y1 * iw + x1] += wy1 * wx1 * v;
                }
            }
        }
        out
    }
}

/// Bilinear (align-corners-false) resize of a `[C, H, W]` tensor.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plan = ResizePlan::new((h, w), (out_h, out_w))?;
    Tensor::new(&[c, out_h, out_w], plan.forward(input.data(), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_of_constant_is_constant() {
        let t = Tensor::full(&[2, 3, 5], 0.25);
        let up = bilinear_resize(&t, 12, 20).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_by_two_uses_quarter_weights() {
        // [0, 1] upsampled to 4 samples: 0, 0.25, 0.75, 1 (edge clamped).
        let t = Tensor::new(&[1, 1, 2], alloc::vec![0.0, 1.0]).unwrap();
        let up = bilinear_resize(&t, 1, 4).unwrap();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in up.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let cols = im2col(&x, c, h, w, k);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 3 % 13) as f64) * 0.1).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, h, w, k);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
