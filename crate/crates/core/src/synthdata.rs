//! Deterministic multi-site synthetic segmentation data.
//!
//! Two tasks are supported: `Nested` (an outer ellipse containing an inner
//! ellipse, three classes) and `Blob` (one star-convex region, two
//! classes). Each site applies its own intensity gain/bias, blur, noise and
//! background texture, and labels its training images with one sparse
//! annotation style.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::{SparseLabelMap, UNLABELED};
use crate::math;
use crate::rng::{self, Purpose, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Outer ellipse (label 1) containing an inner ellipse (label 2).
    Nested,
    /// Single irregular region (label 1).
    Blob,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Nested => 3,
            Task::Blob => 2,
        }
    }

    /// Evaluated structures as `(name, lowest label)`: a pixel belongs to a
    /// structure when its label is at least that value.
    pub fn structures(self) -> &'static [(&'static str, u8)] {
        match self {
            Task::Nested => &[("od", 1), ("oc", 2)],
            Task::Blob => &[("faz", 1)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationType {
    Point,
    Scribble1,
    Scribble2,
    BBox,
    Block,
}

/// Per-site acquisition differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShift {
    pub gain: f64,
    pub bias: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Spatial frequency (cycles per image) of the background texture.
    pub texture_freq: f64,
    pub texture_amp: f64,
    /// Multiplier on object radii.
    pub size_scale: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.03,
            texture_freq: 0.0,
            texture_amp: 0.0,
            size_scale: 1.0,
        }
    }
}

impl DomainShift {
    /// A fixed palette of distinct acquisition conditions, cycled by site.
    pub fn preset(site: usize) -> Self {
        const TABLE: [DomainShift; 5] = [
            DomainShift {
                gain: 1.0,
                bias: 0.0,
                blur_sigma: 0.5,
                noise_sigma: 0.03,
                texture_freq: 0.0,
                texture_amp: 0.0,
                size_scale: 1.0,
            },
            DomainShift {
                gain: 0.6,
                bias: 0.25,
                blur_sigma: 1.0,
                noise_sigma: 0.05,
                texture_freq: 6.0,
                texture_amp: 0.06,
                size_scale: 0.85,
            },
            DomainShift {
                gain: 1.3,
                bias: -0.2,
                blur_sigma: 0.0,
                noise_sigma: 0.06,
                texture_freq: 3.0,
                texture_amp: 0.08,
                size_scale: 1.15,
            },
            DomainShift {
                gain: 0.8,
                bias: 0.1,
                blur_sigma: 1.5,
                noise_sigma: 0.04,
                texture_freq: 9.0,
                texture_amp: 0.05,
                size_scale: 0.95,
            },
            DomainShift {
                gain: -0.9,
                bias: 0.95,
                blur_sigma: 0.7,
                noise_sigma: 0.04,
                texture_freq: 4.0,
                texture_amp: 0.04,
                size_scale: 1.05,
            },
        ];
        TABLE[site % TABLE.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteSpec {
    pub site_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub task: Task,
    pub shift: DomainShift,
    pub annotation: AnnotationType,
    pub seed: u64,
}

impl SiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::InvalidConfig(alloc::format!(
                "site {}: image size {} must be a positive multiple of 16",
                self.site_id,
                self.size
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "site {}: needs at least one train and one test sample",
                self.site_id
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box `[y0, y1) × [x0, x1)` tagged with a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxAnnotation {
    pub class: u8,
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoxAnnotation {
    pub fn is_degenerate(&self) -> bool {
        self.y1 <= self.y0 || self.x1 <= self.x0
    }
}

/// Sparse labels plus how they were obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub labels: SparseLabelMap,
    /// Boxes for `BBox` annotations (empty otherwise).
    pub boxes: Vec<BoxAnnotation>,
    /// Classes whose region was too small and were annotated with a point.
    pub point_fallbacks: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// `[1, H, W]`, intensities in `[0, 1]`.
    pub image: Tensor,
    /// Full ground truth, for evaluation only.
    pub full_mask: Vec<u8>,
    pub annotation: AnnotationType,
    /// Training supervision.
    pub sparse: Annotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteData {
    pub spec: SiteSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

const MAX_TRIES: usize = 100;

fn ellipse_rho(y: f64, x: f64, cy: f64, cx: f64, a: f64, b: f64, angle: f64) -> f64 {
    let (dy, dx) = (y - cy, x - cx);
    let (s, c) = (math::sin(angle), math::cos(angle));
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    math::sqrt((u / a) * (u / a) + (v / b) * (v / b))
}

fn nested_mask(rng: &mut Rng, size: usize, scale: f64) -> Result<Vec<u8>> {
    let n = size as f64;
    for _ in 0..MAX_TRIES {
        let a = rng.random_range(0.18..0.27) * n * scale;
        let b = a * rng.random_range(0.8..1.0);
        let angle = rng.random_range(0.0..PI);
        let margin = a + 2.0;
        if 2.0 * margin >= n {
            continue;
        }
        let cy = rng.random_range(margin..n - margin);
        let cx = rng.random_range(margin..n - margin);
        let ratio = rng.random_range(0.38..0.58);
        let (ia, ib) = (a * ratio, b * ratio * rng.random_range(0.85..1.0));
        let off = 0.12 * a;
        let icy = cy + rng.random_range(-off..off);
        let icx = cx + rng.random_range(-off..off);
        let iangle = angle + rng.random_range(-0.4..0.4);
        let mut mask = vec![0u8; size * size];
        let mut contained = true;
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                let outer = ellipse_rho(fy, fx, cy, cx, a, b, angle) <= 1.0;
                let inner = ellipse_rho(fy, fx, icy, icx, ia, ib, iangle) <= 1.0;
                if inner && !outer {
                    contained = false;
                }
                mask[y * size + x] = if inner {
                    2
                } else if outer {
                    1
                } else {
                    0
                };
            }
        }
        if contained && mask.contains(&2) {
            return Ok(mask);
        }
    }
    Err(Error::GenerationFailed(MAX_TRIES))
}

fn blob_mask(rng: &mut Rng, size: usize, scale: f64) -> Vec<u8> {
    let n = size as f64;
    let r0 = rng.random_range(0.13..0.22) * n * scale;
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let margin = r0 * 1.4 + 1.0;
    let cy = rng.random_range(margin.min(n / 2.0)..(n - margin).max(n / 2.0 + 1e-9));
    let cx = rng.random_range(margin.min(n / 2.0)..(n - margin).max(n / 2.0 + 1e-9));
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let t = math::atan2(dy, dx);
            let r = r0 * (1.0 + harmonics.iter().map(|(k, amp, ph)| amp * math::cos(k * t + ph)).sum::<f64>());
            if math::sqrt(dy * dy + dx * dx) <= r {
                mask[y * size + x] = 1;
            }
        }
    }
    mask
}

fn gaussian_blur(img: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (math::floor(3.0 * sigma) as usize).max(1);
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            math::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * img[y * size + clamp(x as isize + i as isize - radius as isize)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - radius as isize) * size + x])
                .sum::<f64>()
                / norm;
        }
    }
}

fn render(rng: &mut Rng, mask: &[u8], size: usize, task: Task, shift: &DomainShift) -> Tensor {
    let base: &[f64] = match task {
        Task::Nested => &[0.25, 0.55, 0.8],
        Task::Blob => &[0.55, 0.25],
    };
    let (ph1, ph2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let w = 2.0 * PI * shift.texture_freq / size as f64;
            let tex = shift.texture_amp * math::sin(w * x + ph1) * math::sin(w * y + ph2);
            base[mask[i] as usize] + tex
        })
        .collect();
    gaussian_blur(&mut img, size, shift.blur_sigma);
    let noise = Normal::new(0.0, shift.noise_sigma.max(0.0)).expect("finite noise sigma");
    for v in img.iter_mut() {
        *v = (shift.gain * *v + shift.bias + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, size, size], img).expect("consistent extents")
}

/// All samples of one site: `n_train` training then `n_test` test samples,
/// each a pure function of `(spec.seed, site_id, sample index)`.
pub fn generate_site(spec: &SiteSpec) -> Result<SiteData> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.n_train);
    let mut test = Vec::with_capacity(spec.n_test);
    for index in 0..spec.n_train + spec.n_test {
        let mut rng = rng::stream(spec.seed, spec.site_id as u64, index as u64, Purpose::DataGen);
        let mask = match spec.task {
            Task::Nested => nested_mask(&mut rng, spec.size, spec.shift.size_scale)?,
            Task::Blob => blob_mask(&mut rng, spec.size, spec.shift.size_scale),
        };
        let image = render(&mut rng, &mask, spec.size, spec.task, &spec.shift);
        let mut arng = rng::stream(spec.seed, spec.site_id as u64, index as u64, Purpose::Annotation);
        let sparse = sparse_annotate(&mask, spec.size, spec.size, spec.task, spec.annotation, &mut arng)?;
        let sample = Sample {
            index,
            image,
            full_mask: mask,
            annotation: spec.annotation,
            sparse,
        };
        if index < spec.n_train {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    Ok(SiteData {
        spec: spec.clone(),
        train,
        test,
    })
}

fn region(mask: &[u8], class: u8) -> Vec<bool> {
    mask.iter().map(|&m| m == class).collect()
}

/// Binary erosion with a 3×3 square, `steps` times; outside counts as off.
fn erode(set: &[bool], h: usize, w: usize, steps: usize) -> Vec<bool> {
    let mut cur = set.to_vec();
    for _ in 0..steps {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if !prev[y * w + x] {
                    continue;
                }
                let mut keep = true;
                'n: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !prev[yy as usize * w + xx as usize] {
                            keep = false;
                            break 'n;
                        }
                    }
                }
                cur[y * w + x] = keep;
            }
        }
    }
    cur
}

/// Zhang–Suen thinning to a one-pixel-wide skeleton.
fn skeleton(set: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img = set.to_vec();
    let get = |img: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && img[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !img[y as usize * w + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        get(&img, y - 1, x),
                        get(&img, y - 1, x + 1),
                        get(&img, y, x + 1),
                        get(&img, y + 1, x + 1),
                        get(&img, y + 1, x),
                        get(&img, y + 1, x - 1),
                        get(&img, y, x - 1),
                        get(&img, y - 1, x - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let ok = if step == 0 {
                        !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                    } else {
                        !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                    };
                    if ok {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

fn pick(rng: &mut Rng, candidates: &[usize]) -> Option<usize> {
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

fn members(set: &[bool]) -> Vec<usize> {
    (0..set.len()).filter(|&i| set[i]).collect()
}

/// An interior pixel when one exists, else any pixel of the region.
fn interior_point(rng: &mut Rng, set: &[bool], h: usize, w: usize) -> Option<usize> {
    let inner = members(&erode(set, h, w, 1));
    pick(rng, &inner).or_else(|| pick(rng, &members(set)))
}

fn random_walk(rng: &mut Rng, set: &[bool], h: usize, w: usize, steps: usize) -> Vec<usize> {
    let inner = erode(set, h, w, 1);
    let allowed = if inner.iter().any(|&b| b) { inner } else { set.to_vec() };
    let Some(mut cur) = pick(rng, &members(&allowed)) else {
        return Vec::new();
    };
    let dirs: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];
    let mut dir = rng.random_range(0..8);
    let mut path = vec![cur];
    for _ in 0..steps {
        let (y, x) = ((cur / w) as isize, (cur % w) as isize);
        let valid: Vec<usize> = (0..8)
            .filter(|&d| {
                let (yy, xx) = (y + dirs[d].0, x + dirs[d].1);
                yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && allowed[yy as usize * w + xx as usize]
            })
            .collect();
        if valid.is_empty() {
            break;
        }
        if !valid.contains(&dir) || rng.random_bool(0.25) {
            // Turn, preferring small changes of heading.
            let turns: Vec<usize> = valid
                .iter()
                .copied()
                .filter(|&d| {
                    let diff = (d as isize - dir as isize).rem_euclid(8);
                    diff == 1 || diff == 7 || diff == 2 || diff == 6
                })
                .collect();
            dir = pick(rng, &turns).unwrap_or_else(|| valid[rng.random_range(0..valid.len())]);
        }
        let (yy, xx) = (y + dirs[dir].0, x + dirs[dir].1);
        cur = yy as usize * w + xx as usize;
        path.push(cur);
    }
    path
}

fn fit_rectangle(rng: &mut Rng, set: &[bool], h: usize, w: usize, lo: usize, hi: usize) -> Option<BoxAnnotation> {
    // prefix sums for O(1) containment queries
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = set[y * w + x] as u32 + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let inside = |y0: usize, x0: usize, y1: usize, x1: usize| {
        let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
        s as usize == (y1 - y0) * (x1 - x0)
    };
    for _ in 0..400 {
        let bh = rng.random_range(lo..=hi).min(h);
        let bw = rng.random_range(lo..=hi).min(w);
        let y0 = rng.random_range(0..=h - bh);
        let x0 = rng.random_range(0..=w - bw);
        if inside(y0, x0, y0 + bh, x0 + bw) {
            return Some(BoxAnnotation {
                class: 0,
                y0,
                x0,
                y1: y0 + bh,
                x1: x0 + bw,
            });
        }
    }
    None
}

fn bounding_box(set: &[bool], w: usize, class: u8) -> Option<BoxAnnotation> {
    let on = members(set);
    if on.is_empty() {
        return None;
    }
    let ys = on.iter().map(|i| i / w);
    let xs = on.iter().map(|i| i % w);
    Some(BoxAnnotation {
        class,
        y0: ys.clone().min()?,
        y1: ys.max()? + 1,
        x0: xs.clone().min()?,
        x1: xs.max()? + 1,
    })
}

/// Simulates a sparse annotation of `mask` (labels `0..num_classes`).
pub fn sparse_annotate(mask: &[u8], h: usize, w: usize, task: Task, kind: AnnotationType, rng: &mut Rng) -> Result<Annotation> {
    let num_classes = task.num_classes();
    if mask.len() != h * w {
        return Err(Error::shape("sparse_annotate", &[mask.len()], &[h, w]));
    }
    if kind == AnnotationType::BBox {
        let boxes: Vec<BoxAnnotation> = task
            .structures()
            .iter()
            .filter_map(|&(_, lo)| {
                let set: Vec<bool> = mask.iter().map(|&m| m >= lo).collect();
                bounding_box(&set, w, lo)
            })
            .collect();
        let labels = convert_bbox(&boxes, h, w, task)?;
        return Ok(Annotation {
            labels,
            boxes,
            point_fallbacks: Vec::new(),
        });
    }
    let mut labels = vec![UNLABELED; h * w];
    let mut fallbacks = Vec::new();
    for class in 0..num_classes as u8 {
        let set = region(mask, class);
        if !set.iter().any(|&b| b) {
            continue;
        }
        let is_bg = class == 0;
        let marked: Vec<usize> = match kind {
            AnnotationType::Point => interior_point(rng, &set, h, w).into_iter().collect(),
            AnnotationType::Scribble1 => {
                let skel = skeleton(&erode(&set, h, w, 1), h, w);
                let mut px = members(&skel);
                if is_bg {
                    // One arc of the background skeleton: a random half-plane.
                    let side = rng.random_range(0..4);
                    px.retain(|&i| {
                        let (y, x) = (i / w, i % w);
                        match side {
                            0 => 2 * x < w,
                            1 => 2 * x >= w,
                            2 => 2 * y < h,
                            _ => 2 * y >= h,
                        }
                    });
                }
                px
            }
            AnnotationType::Scribble2 => {
                let area = set.iter().filter(|&&b| b).count() as f64;
                let steps = (math::sqrt(area) * if is_bg { 1.0 } else { 1.5 }) as usize;
                random_walk(rng, &set, h, w, steps.clamp(4, 60))
            }
            AnnotationType::Block => {
                let (lo, hi) = if is_bg { (4, 8) } else { (2, 5) };
                let region = if is_bg { erode(&set, h, w, 1) } else { set.clone() };
                match fit_rectangle(rng, &region, h, w, lo, hi) {
                    Some(b) => (b.y0..b.y1).flat_map(|y| (b.x0..b.x1).map(move |x| y * w + x)).collect(),
                    None => Vec::new(),
                }
            }
            AnnotationType::BBox => unreachable!("handled above"),
        };
        let marked = if marked.is_empty() {
            fallbacks.push(class);
            interior_point(rng, &set, h, w).into_iter().collect()
        } else {
            marked
        };
        for i in marked {
            labels[i] = class;
        }
    }
    Ok(Annotation {
        labels: SparseLabelMap::new(h, w, labels, num_classes)?,
        boxes: Vec::new(),
        point_fallbacks: fallbacks,
    })
}

/// Normalized radius band of the inscribed ellipse labelled by a converted box.
pub const BOX_RING: (f64, f64) = (0.55, 0.75);
/// Pixels closer than this to any box are not labelled background.
pub const BOX_MARGIN: usize = 2;
/// Fraction of each box extent removed from every side for block labels.
pub const BOX_SHRINK: f64 = 0.4;

fn box_rho(b: &BoxAnnotation, y: usize, x: usize) -> f64 {
    let cy = (b.y0 + b.y1) as f64 / 2.0 - 0.5;
    let cx = (b.x0 + b.x1) as f64 / 2.0 - 0.5;
    let ry = (b.y1 - b.y0) as f64 / 2.0;
    let rx = (b.x1 - b.x0) as f64 / 2.0;
    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
    math::sqrt(dy * dy + dx * dx)
}

/// Turns boxes into sparse labels: background outside every box (minus a
/// margin); for `Nested`, a ring on each box's inscribed ellipse, skipping
/// pixels inside a higher-class box's ellipse; for `Blob`, the box shrunk
/// by 40% of its extent per side.
pub fn convert_bbox(boxes: &[BoxAnnotation], h: usize, w: usize, task: Task) -> Result<SparseLabelMap> {
    if boxes.iter().any(BoxAnnotation::is_degenerate) {
        return Err(Error::DegenerateBox);
    }
    if boxes.iter().any(|b| b.y1 > h || b.x1 > w) {
        return Err(Error::invalid("convert_bbox", "box outside the image"));
    }
    let mut labels = vec![UNLABELED; h * w];
    let m = BOX_MARGIN;
    for y in 0..h {
        for x in 0..w {
            let near = boxes
                .iter()
                .any(|b| y + m >= b.y0 && y < b.y1 + m && x + m >= b.x0 && x < b.x1 + m);
            if !near {
                labels[y * w + x] = 0;
            }
        }
    }
    let mut ordered = boxes.to_vec();
    ordered.sort_by_key(|b| b.class);
    for b in &ordered {
        match task {
            Task::Nested => {
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        let rho = box_rho(b, y, x);
                        if rho < BOX_RING.0 || rho > BOX_RING.1 {
                            continue;
                        }
                        let covered = ordered
                            .iter()
                            .any(|o| o.class > b.class && box_rho(o, y, x) <= 1.15);
                        if !covered {
                            labels[y * w + x] = b.class;
                        }
                    }
                }
            }
            Task::Blob => {
                let sy = math::floor(BOX_SHRINK * (b.y1 - b.y0) as f64) as usize;
                let sx = math::floor(BOX_SHRINK * (b.x1 - b.x0) as f64) as usize;
                for y in b.y0 + sy..b.y1 - sy {
                    for x in b.x0 + sx..b.x1 - sx {
                        labels[y * w + x] = b.class;
                    }
                }
            }
        }
    }
    SparseLabelMap::new(h, w, labels, task.num_classes())
}

/// Random flips and a rotation in ±45°, applied identically to the image
/// (bilinear, edge-clamped) and labels (nearest, outside becomes unlabeled).
pub fn augment(image: &Tensor, labels: &SparseLabelMap, rng: &mut Rng) -> Result<(Tensor, SparseLabelMap)> {
    let (c, h, w) = image.dims3()?;
    let flip_x = rng.random_bool(0.5);
    let flip_y = rng.random_bool(0.5);
    let angle = if rng.random_bool(0.5) {
        rng.random_range(-PI / 4.0..PI / 4.0)
    } else {
        0.0
    };
    let (s, co) = (math::sin(angle), math::cos(angle));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let n = h * w;
    let mut img = vec![0.0; c * n];
    let mut lab = vec![UNLABELED; n];
    let src = image.data();
    let src_lab = labels.labels();
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel -> source coordinates
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let mut sy = co * dy + s * dx + cy;
            let mut sx = -s * dy + co * dx + cx;
            if flip_y {
                sy = h as f64 - 1.0 - sy;
            }
            if flip_x {
                sx = w as f64 - 1.0 - sx;
            }
            let (ny, nx) = (math::round(sy), math::round(sx));
            if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                lab[y * w + x] = src_lab[ny as usize * w + nx as usize];
            }
            let cyc = sy.clamp(0.0, h as f64 - 1.0);
            let cxc = sx.clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (math::floor(cyc) as usize, math::floor(cxc) as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (cyc - y0 as f64, cxc - x0 as f64);
            for ci in 0..c {
                let p = &src[ci * n..(ci + 1) * n];
                img[ci * n + y * w + x] = (1.0 - fy) * ((1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1])
                    + fy * ((1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
            }
        }
    }
    Ok((
        Tensor::new(&[c, h, w], img)?,
        SparseLabelMap::new(h, w, lab, 256)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task, annotation: AnnotationType) -> SiteSpec {
        SiteSpec {
            site_id: 1,
            n_train: 6,
            n_test: 2,
            size: 48,
            task,
            shift: DomainShift::preset(1),
            annotation,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(Task::Nested, AnnotationType::Scribble1);
        assert_eq!(generate_site(&s).unwrap(), generate_site(&s).unwrap());
    }

    #[test]
    fn nested_inner_is_inside_outer_and_images_in_range() {
        let d = generate_site(&spec(Task::Nested, AnnotationType::Point)).unwrap();
        for s in d.train.iter().chain(&d.test) {
            assert!(s.full_mask.contains(&2));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn point_labels_three_pixels() {
        let d = generate_site(&spec(Task::Nested, AnnotationType::Point)).unwrap();
        for s in &d.train {
            assert_eq!(s.sparse.labels.num_labeled(), 3);
        }
    }

    #[test]
    fn sparse_labels_agree_with_mask() {
        for kind in [AnnotationType::Point, AnnotationType::Scribble1, AnnotationType::Scribble2, AnnotationType::Block] {
            for task in [Task::Nested, Task::Blob] {
                let d = generate_site(&spec(task, kind)).unwrap();
                for s in &d.train {
                    assert!(s.sparse.labels.num_labeled() > 0);
                    for (l, m) in s.sparse.labels.labels().iter().zip(&s.full_mask) {
                        if *l != UNLABELED {
                            assert_eq!(l, m, "{:?} {:?}", kind, task);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn whole_image_box_has_no_background() {
        let b = BoxAnnotation {
            class: 1,
            y0: 0,
            x0: 0,
            y1: 48,
            x1: 48,
        };
        let l = convert_bbox(&[b], 48, 48, Task::Nested).unwrap();
        assert!(!l.labels().contains(&0));
        assert!(l.labels().contains(&1));
    }

    #[test]
    fn blob_box_shrinks_with_floor() {
        let b = BoxAnnotation {
            class: 1,
            y0: 5,
            x0: 7,
            y1: 15,
            x1: 17,
        };
        let l = convert_bbox(&[b], 24, 24, Task::Blob).unwrap();
        let fg: Vec<usize> = (0..576).filter(|&i| l.labels()[i] == 1).collect();
        assert_eq!(fg, vec![9 * 24 + 11, 9 * 24 + 12, 10 * 24 + 11, 10 * 24 + 12]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let b = BoxAnnotation {
            class: 1,
            y0: 3,
            x0: 3,
            y1: 3,
            x1: 8,
        };
        assert_eq!(convert_bbox(&[b], 10, 10, Task::Blob), Err(Error::DegenerateBox));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = spec(Task::Blob, AnnotationType::Point);
        s.size = 40;
        assert!(generate_site(&s).is_err());
        let mut s = spec(Task::Blob, AnnotationType::Point);
        s.n_test = 0;
        assert!(generate_site(&s).is_err());
    }

    #[test]
    fn augmentation_keeps_labels_consistent() {
        let d = generate_site(&spec(Task::Nested, AnnotationType::Block)).unwrap();
        let s = &d.train[0];
        let mut r = rng::stream(1, 0, 0, Purpose::Augment);
        for _ in 0..5 {
            let (img, lab) = augment(&s.image, &s.sparse.labels, &mut r).unwrap();
            assert_eq!(img.shape(), s.image.shape());
            assert!(lab.labels().iter().all(|&l| l == UNLABELED || l < 3));
        }
    }

    #[test]
    fn skeleton_of_bar_is_thin_line() {
        let (h, w) = (7, 12);
        let set: Vec<bool> = (0..h * w).map(|i| (2..5).contains(&(i / w)) && (1..11).contains(&(i % w))).collect();
        let sk = skeleton(&set, h, w);
        let rows: Vec<usize> = (0..h * w).filter(|&i| sk[i]).map(|i| i / w).collect();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|&r| r == 3));
    }
}
