//! Brute-force references and the randomized suites comparing the fast
//! implementations against them.
//!
//! Suites: `grad` (central finite differences for every tape op and every
//! composite loss), `mst` (Kruskal), `treefilter` (all-pairs path sums),
//! `crf` (double loop over pixel pairs), `metrics` (all-pairs boundary
//! distances).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::losses::{self, GatedCrfConfig, LossTerms, LossWeights, SparseLabelMap, UNLABELED};
use crate::math;
use crate::metrics::{self, BinaryMask};
use crate::rng::{self, Purpose, Rng};
use crate::segnet::{self, ForwardOptions, ModelParams, ModelVars, SiteEncoding, UNetConfig};
use crate::tensor::{bilinear_resize, Tape, Tensor, Var};
use crate::treefilter::{self, AffinityConfig, GridGraph};

pub const SUITES: [&str; 5] = ["grad", "mst", "treefilter", "crf", "metrics"];

/// Seeds per randomized check.
pub const SEEDS: u64 = 20;
pub const GRAD_TOL: f64 = 1e-4;
pub const NETWORK_GRAD_TOL: f64 = 1e-3;
pub const FILTER_TOL: f64 = 1e-9;
pub const HD95_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Case {
    pub fn new(name: String, error: f64, tolerance: f64) -> Self {
        Self {
            name,
            error,
            tolerance,
            passed: error <= tolerance,
        }
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<Case>> {
    match name {
        "grad" => grad_suite(seed),
        "mst" => mst_suite(seed),
        "treefilter" => treefilter_suite(seed),
        "crf" => crf_suite(seed),
        "metrics" => metrics_suite(seed),
        other => Err(Error::UnknownSuite(other.into())),
    }
}

// ---------------------------------------------------------------- MST

/// Minimum spanning tree edges `(min endpoint, max endpoint, weight)` by
/// Kruskal under the `(weight, min, max)` order, sorted in that order.
pub fn kruskal(g: &GridGraph) -> Vec<(u32, u32, f64)> {
    let mut edges: Vec<(f64, u32, u32)> = g.edges.iter().map(|e| (e.weight, e.a.min(e.b), e.a.max(e.b))).collect();
    edges.sort_by(|x, y| x.partial_cmp(y).expect("finite weights"));
    let mut parent: Vec<u32> = (0..g.num_vertices() as u32).collect();
    fn root(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            x = parent[x as usize];
        }
        x
    }
    let mut out = Vec::new();
    for (w, a, b) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra != rb {
            parent[ra as usize] = rb;
            out.push((a, b, w));
        }
    }
    out
}

fn canonical(edges: impl Iterator<Item = (u32, u32, f64)>) -> Vec<(u32, u32, f64)> {
    let mut v: Vec<(u32, u32, f64)> = edges.map(|(a, b, w)| (a.min(b), a.max(b), w)).collect();
    v.sort_by(|x, y| (x.2, x.0, x.1).partial_cmp(&(y.2, y.0, y.1)).expect("finite weights"));
    v
}

fn mst_suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for i in 0..50u64 {
        let mut r = rng::stream(seed, 1, i, Purpose::Oracle);
        let (h, w) = (r.random_range(5..=8), r.random_range(5..=8));
        let ties = i % 2 == 1;
        let g = GridGraph::from_fn(h, w, |_, _| {
            if ties {
                r.random_range(0..5) as f64
            } else {
                r.random::<f64>()
            }
        });
        let fast = canonical(treefilter::boruvka_mst(&g)?.edges());
        let slow = kruskal(&g);
        let total = |v: &[(u32, u32, f64)]| v.iter().map(|e| e.2).sum::<f64>();
        let same = fast == slow && total(&fast) == total(&slow);
        let err = if same { 0.0 } else { (total(&fast) - total(&slow)).abs().max(1.0) };
        cases.push(Case::new(format!("mst/{}x{}/{}", h, w, i), err, 0.0));
    }
    Ok(cases)
}

// ---------------------------------------------------------------- tree filter

/// `Σ_j exp(-E_ij/σ) P_j / Σ_j exp(-E_ij/σ)` with the path sums `E_ij`
/// found by a traversal from every pixel, then renormalized across classes.
pub fn tree_filter_all_pairs(p: &Tensor, edges: &[(u32, u32, f64)], sigma: f64) -> Result<Tensor> {
    let (c, h, w) = p.dims3()?;
    let n = h * w;
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(a, b, wt) in edges {
        adj[a as usize].push((b as usize, wt));
        adj[b as usize].push((a as usize, wt));
    }
    let d = p.data();
    let mut out = vec![0.0; c * n];
    let mut dist = vec![f64::NAN; n];
    for i in 0..n {
        dist.iter_mut().for_each(|x| *x = f64::NAN);
        dist[i] = 0.0;
        let mut q = VecDeque::from([i]);
        while let Some(v) = q.pop_front() {
            for &(u, wt) in &adj[v] {
                if dist[u].is_nan() {
                    dist[u] = dist[v] + wt;
                    q.push_back(u);
                }
            }
        }
        let mut z = 0.0;
        let mut acc = vec![0.0; c];
        for j in 0..n {
            let s = math::exp(-dist[j] / sigma);
            z += s;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += s * d[k * n + j];
            }
        }
        let total: f64 = acc.iter().map(|a| a / z).sum();
        for k in 0..c {
            out[k * n + i] = acc[k] / z / total;
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn euclidean_graph(f: &Tensor) -> Result<GridGraph> {
    let (c, h, w) = f.dims3()?;
    let n = h * w;
    let d = f.data();
    Ok(GridGraph::from_fn(h, w, |a, b| {
        math::sqrt((0..c).map(|k| { let t = d[k * n + a] - d[k * n + b]; t * t }).sum())
    }))
}

fn unit_pixels(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let n = h * w;
    let d = f.data();
    let mut out = d.to_vec();
    for i in 0..n {
        let norm = math::sqrt((0..c).map(|k| d[k * n + i] * d[k * n + i]).sum());
        if norm > 0.0 {
            for k in 0..c {
                out[k * n + i] /= norm;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn rand_tensor(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn rand_simplex(r: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
    let raw = rand_tensor(r, &[c, h, w], 0.05, 1.0);
    let n = h * w;
    Tensor::from_fn(&[c, h, w], |i| {
        let p = i % n;
        raw.data()[i] / (0..c).map(|k| raw.data()[k * n + p]).sum::<f64>()
    })
}

fn treefilter_suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for i in 0..25u64 {
        let mut r = rng::stream(seed, 2, i, Purpose::Oracle);
        let (h, w, c) = (8, 8, 3);
        let image = rand_tensor(&mut r, &[1, h, w], 0.0, 1.0);
        let p = rand_simplex(&mut r, c, h, w);
        let sigma = r.random_range(0.2..2.0);

        let tree = treefilter::boruvka_mst(&treefilter::build_grid_graph(&image)?)?;
        let fast = treefilter::tree_filter(&p, &tree, sigma)?;
        let slow = tree_filter_all_pairs(&p, &kruskal(&euclidean_graph(&image)?), sigma)?;
        cases.push(Case::new(format!("single/{}", i), fast.max_abs_diff(&slow), FILTER_TOL));

        let root = r.random_range(0..(h * w) as u32);
        let rerooted = treefilter::tree_filter(&p, &tree.reroot(root)?, sigma)?;
        cases.push(Case::new(format!("reroot/{}", i), fast.max_abs_diff(&rerooted), FILTER_TOL));

        // cascade over image, 1/4- and 1/2-resolution feature trees
        let d2 = rand_tensor(&mut r, &[4, 2, 2], -1.0, 1.0);
        let d3 = rand_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
        let cfg = AffinityConfig {
            low_sigma: (i % 2 == 1).then_some(0.3),
            ..Default::default()
        };
        let fast = treefilter::cascade_pseudo_label(&p, &image, &d2, &d3, cfg)?;
        let mut slow = p.clone();
        for (f, sigma) in [
            image.clone(),
            unit_pixels(&bilinear_resize(&d2, h, w)?)?,
            unit_pixels(&bilinear_resize(&d3, h, w)?)?,
        ]
        .into_iter()
        .zip(cfg.sigmas())
        {
            slow = tree_filter_all_pairs(&slow, &kruskal(&euclidean_graph(&f)?), sigma)?;
        }
        cases.push(Case::new(format!("cascade/{}", i), fast.max_abs_diff(&slow), FILTER_TOL));
    }
    Ok(cases)
}

// ---------------------------------------------------------------- CRF

/// Gated CRF value and gradient by a double loop over all pixel pairs.
pub fn gated_crf_double_loop(p: &Tensor, image: &Tensor, cfg: &GatedCrfConfig) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = p.dims3()?;
    let (ci, _, _) = image.dims3()?;
    let n = h * w;
    let (pd, id) = (p.data(), image.data());
    let r = cfg.radius as isize;
    let (mut num, mut den) = (0.0, 0.0);
    let mut grad = vec![0.0; c * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = ((i / w) as isize - (j / w) as isize, (i % w) as isize - (j % w) as isize);
            if i == j || dy.abs() > r || dx.abs() > r {
                continue;
            }
            let color: f64 = (0..ci).map(|k| { let t = id[k * n + i] - id[k * n + j]; t * t }).sum();
            let kern = math::exp(
                -((dy * dy + dx * dx) as f64) / (2.0 * cfg.sigma_xy * cfg.sigma_xy) - color / (2.0 * cfg.sigma_rgb * cfg.sigma_rgb),
            );
            let dot: f64 = (0..c).map(|k| pd[k * n + i] * pd[k * n + j]).sum();
            num += kern * (1.0 - dot);
            den += kern;
            for k in 0..c {
                grad[k * n + i] -= kern * pd[k * n + j];
                grad[k * n + j] -= kern * pd[k * n + i];
            }
        }
    }
    if den == 0.0 {
        return Ok((0.0, vec![0.0; c * n]));
    }
    Ok((num / den, grad.into_iter().map(|g| g / den).collect()))
}

fn crf_suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for i in 0..SEEDS {
        let mut r = rng::stream(seed, 3, i, Purpose::Oracle);
        let (h, w) = (r.random_range(4..=9), r.random_range(4..=9));
        let cfg = GatedCrfConfig {
            radius: r.random_range(1..=3),
            sigma_xy: r.random_range(1.0..4.0),
            sigma_rgb: r.random_range(0.05..0.5),
        };
        let image = rand_tensor(&mut r, &[1, h, w], 0.0, 1.0);
        let p = rand_simplex(&mut r, 3, h, w);
        let (value, grad) = gated_crf_double_loop(&p, &image, &cfg)?;
        let mut tape = Tape::new();
        let pv = tape.param(p.clone());
        let l = losses::gated_crf(&mut tape, pv, &image, &cfg)?;
        let fast = tape.value(l).item();
        tape.backward(l)?;
        let g = tape.grad(pv);
        let gerr = g.data().iter().zip(&grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        cases.push(Case::new(format!("value/{}", i), (fast - value).abs() / value.abs().max(1e-300), 1e-12));
        cases.push(Case::new(format!("grad/{}", i), gerr, 1e-12));
    }
    Ok(cases)
}

// ---------------------------------------------------------------- metrics

/// HD95 from all boundary-pixel pairs, independent of the distance
/// transform. Conventions match [`metrics::hd95`].
pub fn hd95_all_pairs(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (h, w) = (a.height, a.width);
    let on = |m: &BinaryMask, y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && m.data[y as usize * w + x as usize];
    let edge = |m: &BinaryMask| -> Vec<(isize, isize)> {
        let mut v = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if on(m, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(m, y + dy, x + dx)) {
                    v.push((y, x));
                }
            }
        }
        v
    };
    let (ea, eb) = (edge(a), edge(b));
    match (ea.is_empty(), eb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return math::sqrt((h * h + w * w) as f64),
        _ => {}
    }
    let nearest = |p: &(isize, isize), set: &[(isize, isize)]| {
        set.iter()
            .map(|q| math::sqrt(((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64))
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = ea.iter().map(|p| nearest(p, &eb)).chain(eb.iter().map(|p| nearest(p, &ea))).collect();
    d.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

fn random_mask(r: &mut Rng, h: usize, w: usize) -> BinaryMask {
    match r.random_range(0..3) {
        0 => {
            let p = r.random_range(0.1..0.6);
            BinaryMask::new(h, w, (0..h * w).map(|_| r.random_bool(p)).collect()).expect("sized")
        }
        1 => {
            let (cy, cx, rad) = (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64), r.random_range(1.0..7.0));
            BinaryMask::from_fn(h, w, |i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad
            })
        }
        _ => {
            let rects: Vec<(usize, usize, usize, usize)> = (0..r.random_range(1..4))
                .map(|_| {
                    let y0 = r.random_range(0..h);
                    let x0 = r.random_range(0..w);
                    (y0, x0, r.random_range(y0..h) + 1, r.random_range(x0..w) + 1)
                })
                .collect();
            BinaryMask::from_fn(h, w, |i| {
                let (y, x) = (i / w, i % w);
                rects.iter().any(|&(y0, x0, y1, x1)| y >= y0 && y < y1 && x >= x0 && x < x1)
            })
        }
    }
}

fn metrics_suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for i in 0..50u64 {
        let mut r = rng::stream(seed, 4, i, Purpose::Oracle);
        let a = random_mask(&mut r, 16, 16);
        let b = random_mask(&mut r, 16, 16);
        let fast = metrics::hd95(&a, &b)?;
        let slow = hd95_all_pairs(&a, &b);
        cases.push(Case::new(format!("hd95/{}", i), (fast - slow).abs(), HD95_TOL));
    }
    let m = |on: &[usize]| BinaryMask::from_fn(3, 3, |i| on.contains(&i));
    let closed = [
        (metrics::dsc(&m(&[0, 1, 4]), &m(&[0, 1, 4]))?, 1.0),
        (metrics::dsc(&m(&[0]), &m(&[8]))?, 0.0),
        (metrics::dsc(&m(&[0, 1]), &m(&[1, 2]))?, 0.5),
        (metrics::dsc(&m(&[]), &m(&[]))?, 1.0),
    ];
    for (i, (got, want)) in closed.iter().enumerate() {
        cases.push(Case::new(format!("dsc/closed{}", i), (got - want).abs(), 0.0));
    }
    Ok(cases)
}

// ---------------------------------------------------------------- gradients

/// Element-wise relative discrepancy, with a floor on the denominator so
/// entries where both gradients vanish compare absolutely.
fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Five-point central difference `f'(0)` of `f(delta)`.
fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `Σ R ⊙ f(inputs)` (random fixed `R`) against
/// central differences over every input element.
pub fn gradcheck(r: &mut Rng, inputs: &[Tensor], f: &Build) -> Result<f64> {
    const H: f64 = 1e-4;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights = rand_tensor(r, tape.value(out).shape(), 0.5, 1.5);
    let project = |tape: &mut Tape, out: Var| -> Result<Var> {
        let wv = tape.constant(weights.clone());
        let m = tape.mul(out, wv)?;
        Ok(tape.sum(m))
    };
    let loss = project(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).into_data()).collect();
    let eval = |inp: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inp.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        let l = project(&mut t, o)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for (idx, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            *slot = stencil(H, |delta| {
                let mut work = inputs.to_vec();
                work[idx].data_mut()[e] += delta;
                eval(&work)
            })?;
        }
        worst = worst.max(rel_error(a, &numeric, 1e-6));
    }
    Ok(worst)
}

/// Moves entries out of `(-margin, margin)` so kinks at zero are not probed.
fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|x| if x.abs() < margin { x.signum() * margin + x } else { x }).collect();
    Tensor::new(&shape, data).expect("same length")
}

/// Distinct entries at least 0.02 apart, in random order.
fn spaced_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.02 * i as f64).collect();
    v.shuffle(r);
    Tensor::new(shape, v).expect("sized")
}

fn random_labels(r: &mut Rng, c: usize, h: usize, w: usize, frac: f64) -> SparseLabelMap {
    let labels = (0..h * w)
        .map(|_| if r.random_bool(frac) { r.random_range(0..c) as u8 } else { UNLABELED })
        .collect();
    SparseLabelMap::new(h, w, labels, c).expect("valid labels")
}

/// Finite differences over `samples` randomly chosen parameter entries of a
/// model-level loss.
pub fn param_gradcheck(
    r: &mut Rng,
    params: &ModelParams,
    samples: usize,
    loss: &dyn Fn(&mut Tape, &ModelVars) -> Result<Var>,
) -> Result<f64> {
    const H: f64 = 1e-6;
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, true, true);
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let grads = vars.grads(&mut tape, params)?;
    let eval = |p: &ModelParams| -> Result<f64> {
        let mut t = Tape::new();
        let v = ModelVars::register(&mut t, p, false, false);
        let l = loss(&mut t, &v)?;
        Ok(t.value(l).item())
    };
    let sizes: Vec<(bool, usize, usize)> = params
        .phi
        .iter()
        .enumerate()
        .map(|(i, p)| (true, i, p.value.len()))
        .chain(params.theta.iter().enumerate().map(|(i, p)| (false, i, p.value.len())))
        .collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..samples {
        let &(is_phi, pi, len) = &sizes[r.random_range(0..sizes.len())];
        let e = r.random_range(0..len);
        let nudge = |m: &mut ModelParams, delta: f64| {
            let set = if is_phi { &mut m.phi } else { &mut m.theta };
            set.iter_mut().nth(pi).expect("index").value.data_mut()[e] += delta;
        };
        numeric.push(stencil(H, |delta| {
            let mut work = params.clone();
            nudge(&mut work, delta);
            eval(&work)
        })?);
        let g = if is_phi { &grads.phi } else { &grads.theta };
        analytic.push(g.iter().nth(pi).expect("index").value.data()[e]);
    }
    // the smaller step leaves ~1e-10 of rounding noise in the differences
    Ok(rel_error(&analytic, &numeric, 1e-5))
}

fn tiny_model(r: &mut Rng, classes: usize, sites: usize) -> Result<(UNetConfig, ModelParams)> {
    let cfg = UNetConfig {
        in_channels: 1,
        num_classes: classes,
        level_channels: [2, 3, 4, 5, 6],
        num_sites: sites,
        scr_hidden: 4,
    };
    let mut params = segnet::build_model(&cfg, r.random())?;
    // nonzero biases so every bias gradient path is exercised
    for p in params.phi.iter_mut().chain(params.theta.iter_mut()) {
        if p.name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
    Ok((cfg, params))
}

#[allow(clippy::type_complexity)]
fn op_checks() -> Vec<(&'static str, fn(&mut Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>)> {
    vec![
        (
            "conv2d3x3",
            |r| vec![rand_tensor(r, &[2, 5, 6], -1.0, 1.0), rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], v[2]),
        ),
        (
            "conv2d1x1",
            |r| vec![rand_tensor(r, &[3, 4, 4], -1.0, 1.0), rand_tensor(r, &[2, 3, 1, 1], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], v[2]),
        ),
        ("maxpool2", |r| vec![spaced_tensor(r, &[2, 4, 6])], |t, v| t.maxpool2(v[0])),
        ("resize", |r| vec![rand_tensor(r, &[2, 3, 5], -1.0, 1.0)], |t, v| t.resize(v[0], 7, 4)),
        ("upsample2", |r| vec![rand_tensor(r, &[2, 3, 3], -1.0, 1.0)], |t, v| t.upsample2(v[0])),
        (
            "dense",
            |r| vec![rand_tensor(r, &[5], -1.0, 1.0), rand_tensor(r, &[4, 5], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)],
            |t, v| t.dense(v[0], v[1], v[2]),
        ),
        ("relu", |r| vec![away_from_zero(rand_tensor(r, &[3, 4], -1.0, 1.0), 0.05)], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", |r| vec![rand_tensor(r, &[3, 4], -3.0, 3.0)], |t, v| Ok(t.sigmoid(v[0]))),
        ("softmax", |r| vec![rand_tensor(r, &[3, 2, 3], -2.0, 2.0)], |t, v| t.softmax(v[0])),
        ("abs", |r| vec![away_from_zero(rand_tensor(r, &[3, 4], -1.0, 1.0), 0.05)], |t, v| Ok(t.abs(v[0]))),
        ("add", |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        ("sub", |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        ("mul", |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        ("scale", |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0)], |t, v| Ok(t.scale(v[0], -1.7))),
        (
            "channel_scale",
            |r| vec![rand_tensor(r, &[3, 4, 4], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
            |t, v| t.channel_scale(v[0], v[1]),
        ),
        (
            "concat",
            |r| vec![rand_tensor(r, &[2, 3, 3], -1.0, 1.0), rand_tensor(r, &[1, 3, 3], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]]),
        ),
        ("global_avg_pool", |r| vec![rand_tensor(r, &[3, 4, 5], -1.0, 1.0)], |t, v| t.global_avg_pool(v[0])),
        ("sum", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| Ok(t.sum(v[0]))),
        ("mean", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| Ok(t.mean(v[0]))),
    ]
}

fn grad_suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, make, build) in op_checks() {
        for s in 0..SEEDS {
            let mut r = rng::stream(seed, 5, s, Purpose::Oracle);
            let inputs = make(&mut r);
            let err = gradcheck(&mut r, &inputs, &build)?;
            cases.push(Case::new(format!("{}/{}", name, s), err, GRAD_TOL));
        }
    }
    let weights = LossWeights::default();
    let crf = GatedCrfConfig::default();
    for s in 0..SEEDS {
        let mut r = rng::stream(seed, 6, s, Purpose::Oracle);
        let (c, h, w) = (3, 6, 7);
        let labels = random_labels(&mut r, c, h, w, 0.3);
        let target = rand_simplex(&mut r, c, h, w);
        // keep the L1 term away from its kink
        let logits = loop {
            let z = rand_tensor(&mut r, &[c, h, w], -2.0, 2.0);
            let mut t = Tape::new();
            let zv = t.constant(z.clone());
            let p = t.softmax(zv)?;
            if t.value(p).data().iter().zip(target.data()).all(|(a, b)| (a - b).abs() > 0.02) {
                break z;
            }
        };
        let image = rand_tensor(&mut r, &[1, h, w], 0.0, 1.0);
        let unlabeled = labels.unlabeled_pixels();

        let err = gradcheck(&mut r, core::slice::from_ref(&logits), &|t, v| {
            let p = t.softmax(v[0])?;
            losses::partial_ce(t, p, &labels)
        })?;
        cases.push(Case::new(format!("pce/{}", s), err, GRAD_TOL));

        let err = gradcheck(&mut r, core::slice::from_ref(&logits), &|t, v| {
            let p = t.softmax(v[0])?;
            treefilter::mstree_loss(t, p, &target, &unlabeled)
        })?;
        cases.push(Case::new(format!("mstree/{}", s), err, GRAD_TOL));

        let err = gradcheck(&mut r, core::slice::from_ref(&logits), &|t, v| {
            let p = t.softmax(v[0])?;
            losses::gated_crf(t, p, &image, &crf)
        })?;
        cases.push(Case::new(format!("gcrf/{}", s), err, GRAD_TOL));

        let others: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut r, &[5], 0.0, 1.0)).collect();
        let own = rand_tensor(&mut r, &[5], -2.0, 2.0);
        let err = gradcheck(&mut r, &[own], &|t, v| {
            let a = t.sigmoid(v[0]);
            let os: Vec<Var> = others.iter().map(|o| t.constant(o.clone())).collect();
            segnet::contrastive_loss(t, a, &os)
        })?;
        cases.push(Case::new(format!("con/{}", s), err, GRAD_TOL));

        let att_logits = rand_tensor(&mut r, &[5], -2.0, 2.0);
        let err = gradcheck(&mut r, &[logits.clone(), att_logits], &|t, v| {
            let p = t.softmax(v[0])?;
            let a = t.sigmoid(v[1]);
            let os: Vec<Var> = others.iter().map(|o| t.constant(o.clone())).collect();
            let terms = LossTerms {
                pce: losses::partial_ce(t, p, &labels)?,
                mstree: Some(treefilter::mstree_loss(t, p, &target, &unlabeled)?),
                gcrf: Some(losses::gated_crf(t, p, &image, &crf)?),
                con: Some(segnet::contrastive_loss(t, a, &os)?),
            };
            losses::total_loss(t, &terms, &weights)
        })?;
        cases.push(Case::new(format!("objective/{}", s), err, GRAD_TOL));

        // attention block: gradient of sum(f') including the FC1 weights
        let (mcfg, params) = tiny_model(&mut r, 2, 3)?;
        let feat = rand_tensor(&mut r, &[mcfg.bottleneck_channels(), 2, 2], -1.0, 1.0);
        let site = SiteEncoding::new(s as usize % 3, 3)?;
        let err = param_gradcheck(&mut r, &params, 40, &|t, vars| {
            let f = t.constant(feat.clone());
            let (_, out) = segnet::scr_attention(t, vars, f, site)?;
            Ok(t.sum(out))
        })?;
        cases.push(Case::new(format!("scr/{}", s), err, GRAD_TOL));

        // whole network with every loss term
        let (_, params) = tiny_model(&mut r, 2, 2)?;
        let img = rand_tensor(&mut r, &[1, 16, 16], 0.0, 1.0);
        let lab = random_labels(&mut r, 2, 16, 16, 0.1);
        let site = SiteEncoding::new(s as usize % 2, 2)?;
        // pseudo-label and the other sites' attention vectors are constants
        // of the loss: compute them once
        let (pseudo, others) = {
            let mut t = Tape::new();
            let vars = ModelVars::register(&mut t, &params, false, false);
            let x = t.constant(img.clone());
            let opts = ForwardOptions {
                scr: true,
                all_sites: true,
            };
            let out = segnet::forward(&mut t, &vars, x, site, opts)?;
            let others: Vec<Tensor> = segnet::other_sites(&out, site).iter().map(|&v| t.value(v).clone()).collect();
            let pseudo = treefilter::cascade_pseudo_label(t.value(out.probs), &img, t.value(out.d2), t.value(out.d3), AffinityConfig::default())?;
            (pseudo, others)
        };
        let err = param_gradcheck(&mut r, &params, 40, &|t, vars| {
            let x = t.constant(img.clone());
            let out = segnet::forward(t, vars, x, site, ForwardOptions::default())?;
            let os: Vec<Var> = others.iter().map(|o| t.constant(o.clone())).collect();
            let terms = LossTerms {
                pce: losses::partial_ce(t, out.probs, &lab)?,
                mstree: Some(losses::tree_energy(t, out.probs, &pseudo, &lab)?),
                gcrf: Some(losses::gated_crf(t, out.probs, &img, &crf)?),
                con: Some(segnet::contrastive_loss(t, out.attention.expect("scr on"), &os)?),
            };
            losses::total_loss(t, &terms, &weights)
        })?;
        cases.push(Case::new(format!("network/{}", s), err, NETWORK_GRAD_TOL));
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_lists_names() {
        let e = run_suite("foo", 0).unwrap_err();
        let msg = format!("{}", e);
        for s in SUITES {
            assert!(msg.contains(s), "{}", msg);
        }
    }

    #[test]
    fn kruskal_on_path_graph() {
        let g = GridGraph::from_fn(1, 4, |a, _| a as f64);
        assert_eq!(kruskal(&g).len(), 3);
    }
}
