//! Sparse-label segmentation losses.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{BackwardRule, Tape, Tensor, Var};
use crate::treefilter::mstree_loss;

/// Label value for pixels without annotation.
pub const UNLABELED: u8 = 255;

/// Per-pixel class labels with `UNLABELED` holes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SparseLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("sparse_label", &[labels.len()], &[height, width]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= num_classes) {
            return Err(Error::invalid(
                "sparse_label",
                alloc::format!("label {} out of range for {} classes", bad, num_classes),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![UNLABELED; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    /// Pixel indices of `I_L`.
    pub fn labeled(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != UNLABELED).collect()
    }

    /// Pixel indices of `I_U`.
    pub fn unlabeled_pixels(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == UNLABELED).collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }
}

/// Trade-off coefficients of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatedCrfConfig {
    /// Window radius; the window is `(2r+1)²`.
    pub radius: usize,
    pub sigma_xy: f64,
    pub sigma_rgb: f64,
}

impl Default for GatedCrfConfig {
    fn default() -> Self {
        Self {
            radius: 2,
            sigma_xy: 3.0,
            sigma_rgb: 0.1,
        }
    }
}

const PROB_FLOOR: f64 = 1e-12;

struct PartialCeRule {
    labeled: Vec<(usize, usize)>,
}

impl BackwardRule for PartialCeRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let mut d = vec![0.0; p.len()];
        let scale = -grad[0] / self.labeled.len() as f64;
        for &(idx, _) in &self.labeled {
            let v = p.data()[idx];
            if v > PROB_FLOOR {
                d[idx] += scale / v;
            }
        }
        vec![Some(d)]
    }
}

/// `-(1/|I_L|) Σ_{i∈I_L} log P_i[y_i]`, probabilities floored at 1e-12.
/// Zero when nothing is labeled.
pub fn partial_ce(tape: &mut Tape, p: Var, labels: &SparseLabelMap) -> Result<Var> {
    let pv = tape.value(p);
    let (c, h, w) = pv.dims3()?;
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::shape("partial_ce", pv.shape(), &[labels.height, labels.width]));
    }
    let n = h * w;
    let labeled: Vec<(usize, usize)> = labels
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != UNLABELED)
        .map(|(i, &l)| (l as usize * n + i, l as usize))
        .collect();
    if labeled.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if let Some(&(_, cls)) = labeled.iter().find(|(_, cls)| *cls >= c) {
        return Err(Error::invalid(
            "partial_ce",
            alloc::format!("label {} but only {} classes", cls, c),
        ));
    }
    let total: f64 = labeled
        .iter()
        .map(|&(idx, _)| -math::ln(pv.data()[idx].clamp(PROB_FLOOR, 1.0)))
        .sum();
    let value = Tensor::scalar(total / labeled.len() as f64);
    Ok(tape.custom(&[p], value, Box::new(PartialCeRule { labeled })))
}

/// Kernel weights of every ordered in-window pixel pair `(i, j)`, `j ≠ i`.
/// Pairs whose partner falls outside the image are gated out.
pub fn crf_pairs(image: &Tensor, cfg: &GatedCrfConfig) -> Result<Vec<(u32, u32, f64)>> {
    if cfg.radius == 0 {
        return Err(Error::invalid("gated_crf", "window radius must be at least 1"));
    }
    if !(cfg.sigma_xy > 0.0 && cfg.sigma_rgb > 0.0) {
        return Err(Error::invalid("gated_crf", "kernel bandwidths must be positive"));
    }
    let (c, h, w) = image.dims3()?;
    let n = h * w;
    let r = cfg.radius as isize;
    let d = image.data();
    let inv_xy = 1.0 / (2.0 * cfg.sigma_xy * cfg.sigma_xy);
    let inv_rgb = 1.0 / (2.0 * cfg.sigma_rgb * cfg.sigma_rgb);
    let mut pairs = Vec::with_capacity(n * ((2 * cfg.radius + 1).pow(2) - 1));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y * w as isize + x) as usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let j = (yy * w as isize + xx) as usize;
                    let mut color = 0.0;
                    for ci in 0..c {
                        let diff = d[ci * n + i] - d[ci * n + j];
                        color += diff * diff;
                    }
                    let pos = (dx * dx + dy * dy) as f64;
                    let k = math::exp(-pos * inv_xy - color * inv_rgb);
                    pairs.push((i as u32, j as u32, k));
                }
            }
        }
    }
    Ok(pairs)
}

struct GatedCrfRule {
    pairs: Vec<(u32, u32, f64)>,
    norm: f64,
}

impl BackwardRule for GatedCrfRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let c = p.shape()[0];
        let n = p.len() / c;
        let pd = p.data();
        let scale = -grad[0] / self.norm;
        let mut d = vec![0.0; p.len()];
        for &(i, j, k) in &self.pairs {
            let (i, j) = (i as usize, j as usize);
            let s = scale * k;
            for ci in 0..c {
                d[ci * n + i] += s * pd[ci * n + j];
                d[ci * n + j] += s * pd[ci * n + i];
            }
        }
        vec![Some(d)]
    }
}

/// Gated CRF regularizer: kernel-weighted mean over in-window pixel pairs of
/// the disagreement `1 - Σ_c P_ic P_jc`. Zero when no pair survives the gate.
pub fn gated_crf(tape: &mut Tape, p: Var, image: &Tensor, cfg: &GatedCrfConfig) -> Result<Var> {
    let pairs = crf_pairs(image, cfg)?;
    gated_crf_with_pairs(tape, p, pairs)
}

/// [`gated_crf`] with a precomputed pair list (see [`crf_pairs`]).
pub fn gated_crf_with_pairs(tape: &mut Tape, p: Var, pairs: Vec<(u32, u32, f64)>) -> Result<Var> {
    let pv = tape.value(p);
    let (c, h, w) = pv.dims3()?;
    let n = h * w;
    let norm: f64 = pairs.iter().map(|p| p.2).sum();
    if pairs.is_empty() || norm <= 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = pv.data();
    let mut total = 0.0;
    for &(i, j, k) in &pairs {
        let (i, j) = (i as usize, j as usize);
        if i >= n || j >= n {
            return Err(Error::invalid("gated_crf", "pair outside the probability map"));
        }
        let dot: f64 = (0..c).map(|ci| d[ci * n + i] * d[ci * n + j]).sum();
        total += k * (1.0 - dot);
    }
    let value = Tensor::scalar(total / norm);
    Ok(tape.custom(&[p], value, Box::new(GatedCrfRule { pairs, norm })))
}

/// Individual terms of the local objective, kept on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub pce: Var,
    pub mstree: Option<Var>,
    pub gcrf: Option<Var>,
    pub con: Option<Var>,
}

/// `L_seg = L_pCE + λ1·L_MsTree + λ2·L_gCRF`; absent terms count as zero.
pub fn seg_loss(tape: &mut Tape, pce: Var, mstree: Option<Var>, gcrf: Option<Var>, weights: &LossWeights) -> Result<Var> {
    let mut total = pce;
    if let Some(m) = mstree {
        let m = tape.scale(m, weights.lambda1);
        total = tape.add(total, m)?;
    }
    if let Some(g) = gcrf {
        let g = tape.scale(g, weights.lambda2);
        total = tape.add(total, g)?;
    }
    Ok(total)
}

/// `L = L_seg + λ3·L_con`.
pub fn local_objective(tape: &mut Tape, seg: Var, con: Option<Var>, weights: &LossWeights) -> Result<Var> {
    match con {
        Some(c) => {
            let c = tape.scale(c, weights.lambda3);
            tape.add(seg, c)
        }
        None => Ok(seg),
    }
}

/// Full objective for one image given its prediction and pseudo-label.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let seg = seg_loss(tape, terms.pce, terms.mstree, terms.gcrf, weights)?;
    local_objective(tape, seg, terms.con, weights)
}

/// Builds the tree-energy term for `p` against the detached `target`.
pub fn tree_energy(tape: &mut Tape, p: Var, target: &Tensor, labels: &SparseLabelMap) -> Result<Var> {
    mstree_loss(tape, p, target, &labels.unlabeled_pixels())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_gives_ln2() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[2, 1, 1], 0.5));
        let y = SparseLabelMap::new(1, 1, vec![1], 2).unwrap();
        let l = partial_ce(&mut tape, p, &y).unwrap();
        assert!((tape.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_and_empty_labels_give_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = SparseLabelMap::new(1, 2, vec![0, 1], 2).unwrap();
        let l = partial_ce(&mut tape, p, &y).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let none = SparseLabelMap::unlabeled(1, 2);
        let l = partial_ce(&mut tape, p, &none).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn saturated_probability_is_floored() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
        let y = SparseLabelMap::new(1, 1, vec![1], 2).unwrap();
        let l = partial_ce(&mut tape, p, &y).unwrap();
        assert!((tape.value(l).item() - (-math::ln(1e-12))).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(SparseLabelMap::new(1, 2, vec![0, 3], 3).is_err());
        assert!(SparseLabelMap::new(1, 2, vec![0, UNLABELED], 3).is_ok());
        assert!(SparseLabelMap::new(2, 2, vec![0, 1], 3).is_err());
    }

    #[test]
    fn gcrf_vanishes_for_identical_one_hot() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 1.0 } else { 0.0 }));
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        let l = gated_crf(&mut tape, p, &img, &GatedCrfConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn gcrf_single_pixel_is_empty_sum() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[2, 1, 1], 0.5));
        let img = Tensor::zeros(&[1, 1, 1]);
        let l = gated_crf(&mut tape, p, &img, &GatedCrfConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn gcrf_rejects_zero_radius() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[2, 3, 3], 0.5));
        let img = Tensor::zeros(&[1, 3, 3]);
        let cfg = GatedCrfConfig {
            radius: 0,
            ..Default::default()
        };
        assert!(gated_crf(&mut tape, p, &img, &cfg).is_err());
    }

    #[test]
    fn seg_loss_without_regularizers_is_pce() {
        let mut tape = Tape::new();
        let pce = tape.param(Tensor::scalar(0.7));
        let m = tape.param(Tensor::scalar(0.3));
        let g = tape.param(Tensor::scalar(0.2));
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
        };
        let s = seg_loss(&mut tape, pce, Some(m), Some(g), &w).unwrap();
        assert_eq!(tape.value(s).item(), 0.7);
        let w = LossWeights::default();
        let s = seg_loss(&mut tape, pce, Some(m), Some(g), &w).unwrap();
        assert!((tape.value(s).item() - (0.7 + 0.03 + 0.02)).abs() < 1e-15);
    }

    #[test]
    fn local_objective_arithmetic() {
        let mut tape = Tape::new();
        let seg = tape.param(Tensor::scalar(1.25));
        let con = tape.param(Tensor::scalar(-0.4));
        let zero = LossWeights {
            lambda3: 0.0,
            ..Default::default()
        };
        let l = local_objective(&mut tape, seg, Some(con), &zero).unwrap();
        assert_eq!(tape.value(l).item(), 1.25);
        let l = local_objective(&mut tape, seg, None, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(l).item(), 1.25);
        let w = LossWeights {
            lambda3: 0.5,
            ..Default::default()
        };
        let l = local_objective(&mut tape, seg, Some(con), &w).unwrap();
        assert!((tape.value(l).item() - (1.25 - 0.2)).abs() < 1e-15);
    }
}
