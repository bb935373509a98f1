//! Dice similarity and 95th-percentile Hausdorff distance.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("binary_mask", &[data.len()], &[height, width]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize) -> bool) -> Self {
        Self {
            height,
            width,
            data: (0..height * width).map(f).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground pixels with at least one 4-neighbour outside the
    /// foreground; the image border counts as outside.
    pub fn boundary(&self) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        let at = |y: isize, x: isize| -> bool {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.data[y as usize * w + x as usize]
        };
        (0..h * w)
            .filter(|&i| {
                if !self.data[i] {
                    return false;
                }
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
            })
            .collect()
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b, "dsc")?;
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas rooted at every sample).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let cross = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest seed pixel, separably
/// along columns then rows.
fn squared_edt(seeds: &[usize], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut grid = vec![FAR; h * w];
    for &s in seeds {
        grid[s] = 0.0;
    }
    let n = h.max(w);
    let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        edt_1d(&line[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&line[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear-interpolation percentile of an unsorted sample (`q` in [0, 100]).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// 95th percentile of the pooled nearest-boundary distances in both
/// directions, in pixels. Both masks empty gives 0; exactly one empty gives
/// the image diagonal.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b, "hd95")?;
    let (h, w) = (a.height, a.width);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(math::sqrt((h * h + w * w) as f64)),
        _ => {}
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let da = squared_edt(&ba, h, w);
    let db = squared_edt(&bb, h, w);
    let mut pooled: Vec<f64> = ba.iter().map(|&i| math::sqrt(db[i])).collect();
    pooled.extend(bb.iter().map(|&i| math::sqrt(da[i])));
    Ok(percentile(&mut pooled, 95.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |i| on.contains(&i))
    }

    #[test]
    fn dsc_closed_forms() {
        let a = mask(3, 3, &[0, 1, 4]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(3, 3, &[8])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(1, 3, &[0, 1]), &mask(1, 3, &[1, 2])).unwrap(), 0.5);
        assert_eq!(dsc(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
        assert!(dsc(&mask(2, 2, &[]), &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn hd95_closed_forms() {
        let a = mask(4, 4, &[5, 6, 9, 10]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        assert_eq!(hd95(&mask(1, 8, &[1]), &mask(1, 8, &[4])).unwrap(), 3.0);
        assert_eq!(hd95(&mask(3, 4, &[]), &mask(3, 4, &[])).unwrap(), 0.0);
        assert_eq!(hd95(&mask(3, 4, &[2]), &mask(3, 4, &[])).unwrap(), 5.0);
        assert!(hd95(&mask(3, 4, &[2]), &mask(4, 3, &[2])).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (7, 9);
        let seeds = [3usize, 20, 44, 62];
        let d = squared_edt(&seeds, h, w);
        for (i, &di) in d.iter().enumerate() {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let want = seeds
                .iter()
                .map(|&s| {
                    let (sy, sx) = ((s / w) as i64, (s % w) as i64);
                    ((y - sy).pow(2) + (x - sx).pow(2)) as f64
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(di, want, "pixel {}", i);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&mut v, 50.0), 3.0);
        assert!((percentile(&mut v, 95.0) - 4.8).abs() < 1e-12);
    }
}
