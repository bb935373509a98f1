//! Minimum spanning trees over 4-connected pixel grids and linear-time
//! filtering along them.
//!
//! A tree filter spreads class probabilities between pixels with weight
//! `exp(-E_ij / sigma)`, where `E_ij` is the summed edge weight on the tree
//! path between `i` and `j`. The filter output is normalized by the total
//! weight. Three cascaded filters over trees built from the image and two
//! decoder feature maps give the pseudo-labels used by the tree energy loss.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{bilinear_resize, BackwardRule, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

impl Edge {
    /// Total order used for minimum selection: weight, then lower endpoint,
    /// then upper endpoint.
    fn key_lt(&self, other: &Edge) -> bool {
        let (a0, a1) = (self.a.min(self.b), self.a.max(self.b));
        let (b0, b1) = (other.a.min(other.b), other.a.max(other.b));
        match self.weight.partial_cmp(&other.weight) {
            Some(core::cmp::Ordering::Less) => true,
            Some(core::cmp::Ordering::Greater) => false,
            _ => (a0, a1) < (b0, b1),
        }
    }
}

/// 4-connected grid with non-negative edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGraph {
    pub height: usize,
    pub width: usize,
    pub edges: Vec<Edge>,
}

impl GridGraph {
    pub fn num_vertices(&self) -> usize {
        self.height * self.width
    }

    /// Grid topology with weights from `weight(a, b)`; horizontal edges are
    /// listed first, then vertical ones, each in row-major order.
    pub fn from_fn(height: usize, width: usize, mut weight: impl FnMut(usize, usize) -> f64) -> Self {
        let mut edges = Vec::with_capacity(height * width.saturating_sub(1) + width * height.saturating_sub(1));
        for y in 0..height {
            for x in 0..width.saturating_sub(1) {
                let a = y * width + x;
                edges.push(Edge {
                    a: a as u32,
                    b: (a + 1) as u32,
                    weight: weight(a, a + 1),
                });
            }
        }
        for y in 0..height.saturating_sub(1) {
            for x in 0..width {
                let a = y * width + x;
                edges.push(Edge {
                    a: a as u32,
                    b: (a + width) as u32,
                    weight: weight(a, a + width),
                });
            }
        }
        Self {
            height,
            width,
            edges,
        }
    }
}

/// Edge weights are Euclidean distances between per-pixel feature vectors.
pub fn build_grid_graph(feature: &Tensor) -> Result<GridGraph> {
    let (c, h, w) = feature.dims3()?;
    if !feature.is_finite() {
        return Err(Error::invalid("build_grid_graph", "non-finite feature"));
    }
    let n = h * w;
    let d = feature.data();
    Ok(GridGraph::from_fn(h, w, |a, b| {
        let mut s = 0.0;
        for ci in 0..c {
            let diff = d[ci * n + a] - d[ci * n + b];
            s += diff * diff;
        }
        math::sqrt(s)
    }))
}

/// Scales each pixel's feature vector to unit L2 norm (zero vectors stay zero).
pub fn l2_normalize_pixels(feature: &Tensor) -> Result<Tensor> {
    let (c, h, w) = feature.dims3()?;
    let n = h * w;
    let mut out = feature.clone();
    let d = out.data_mut();
    for p in 0..n {
        let norm = math::sqrt((0..c).map(|ci| d[ci * n + p] * d[ci * n + p]).sum());
        if norm > 0.0 {
            for ci in 0..c {
                d[ci * n + p] /= norm;
            }
        }
    }
    Ok(out)
}

/// Rooted spanning tree over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanningTree {
    pub height: usize,
    pub width: usize,
    /// Parent of each vertex; the root is its own parent.
    pub parent: Vec<u32>,
    /// Weight of the edge to the parent (0 at the root).
    pub parent_weight: Vec<f64>,
    /// Vertices in breadth-first order from the root.
    pub bfs_order: Vec<u32>,
    pub root: u32,
}

impl SpanningTree {
    pub fn num_vertices(&self) -> usize {
        self.parent.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.parent_weight.iter().sum()
    }

    /// The tree edges as `(child, parent, weight)`.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.bfs_order
            .iter()
            .skip(1)
            .map(|&v| (v, self.parent[v as usize], self.parent_weight[v as usize]))
    }

    /// Same tree re-rooted at `root`.
    pub fn reroot(&self, root: u32) -> Result<SpanningTree> {
        let edges: Vec<Edge> = self
            .edges()
            .map(|(a, b, weight)| Edge { a, b, weight })
            .collect();
        rooted_tree(self.height, self.width, &edges, root)
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if self.rank[ra as usize] < self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[lo as usize] == self.rank[hi as usize] {
            self.rank[hi as usize] += 1;
        }
        true
    }
}

fn rooted_tree(height: usize, width: usize, edges: &[Edge], root: u32) -> Result<SpanningTree> {
    let n = height * width;
    if root as usize >= n {
        return Err(Error::invalid("spanning_tree", "root out of range"));
    }
    let mut adj_start = vec![0usize; n + 1];
    for e in edges {
        adj_start[e.a as usize + 1] += 1;
        adj_start[e.b as usize + 1] += 1;
    }
    for i in 0..n {
        adj_start[i + 1] += adj_start[i];
    }
    let mut fill = adj_start.clone();
    let mut adj = vec![(0u32, 0.0f64); 2 * edges.len()];
    for e in edges {
        adj[fill[e.a as usize]] = (e.b, e.weight);
        fill[e.a as usize] += 1;
        adj[fill[e.b as usize]] = (e.a, e.weight);
        fill[e.b as usize] += 1;
    }
    let mut parent = vec![u32::MAX; n];
    let mut parent_weight = vec![0.0; n];
    let mut bfs_order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    parent[root as usize] = root;
    queue.push_back(root);
    while let Some(v) = queue.pop_front() {
        bfs_order.push(v);
        for &(u, w) in &adj[adj_start[v as usize]..adj_start[v as usize + 1]] {
            if parent[u as usize] == u32::MAX {
                parent[u as usize] = v;
                parent_weight[u as usize] = w;
                queue.push_back(u);
            }
        }
    }
    if bfs_order.len() != n {
        return Err(Error::invalid("spanning_tree", "edges do not connect every vertex"));
    }
    Ok(SpanningTree {
        height,
        width,
        parent,
        parent_weight,
        bfs_order,
        root,
    })
}

/// Minimum spanning tree by Borůvka rounds, rooted at vertex 0.
///
/// Each round every component picks its cheapest outgoing edge under the
/// `(weight, min endpoint, max endpoint)` order; the order is total, so the
/// picked edges never close a cycle and the tree is deterministic.
pub fn boruvka_mst(g: &GridGraph) -> Result<SpanningTree> {
    let n = g.num_vertices();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if let Some(e) = g.edges.iter().find(|e| e.weight.is_nan() || e.weight < 0.0 || !e.weight.is_finite()) {
        return Err(Error::invalid(
            "boruvka_mst",
            alloc::format!("edge ({}, {}) has invalid weight {}", e.a, e.b, e.weight),
        ));
    }
    let mut sets = DisjointSet::new(n);
    let mut chosen: Vec<Edge> = Vec::with_capacity(n - 1);
    let mut cheapest: Vec<Option<usize>> = vec![None; n];
    let mut components = n;
    while components > 1 {
        cheapest.iter_mut().for_each(|c| *c = None);
        for (idx, e) in g.edges.iter().enumerate() {
            let (ra, rb) = (sets.find(e.a), sets.find(e.b));
            if ra == rb {
                continue;
            }
            for r in [ra, rb] {
                let slot = &mut cheapest[r as usize];
                match slot {
                    Some(best) if !e.key_lt(&g.edges[*best]) => {}
                    _ => *slot = Some(idx),
                }
            }
        }
        let mut merged = false;
        for &c in &cheapest {
            if let Some(idx) = c {
                let e = g.edges[idx];
                if sets.union(e.a, e.b) {
                    chosen.push(e);
                    components -= 1;
                    merged = true;
                }
            }
        }
        if !merged {
            return Err(Error::invalid("boruvka_mst", "graph is disconnected"));
        }
    }
    rooted_tree(g.height, g.width, &chosen, 0)
}

/// Un-normalized filter response `Σ_j exp(-E_ij/σ) x_j` for one channel.
fn aggregate(tree: &SpanningTree, decay: &[f64], x: &[f64], up: &mut [f64], out: &mut [f64]) {
    up.copy_from_slice(x);
    for &v in tree.bfs_order.iter().skip(1).rev() {
        let p = tree.parent[v as usize] as usize;
        up[p] += decay[v as usize] * up[v as usize];
    }
    let root = tree.root as usize;
    out[root] = up[root];
    for &v in tree.bfs_order.iter().skip(1) {
        let v = v as usize;
        let p = tree.parent[v] as usize;
        let s = decay[v];
        out[v] = up[v] + s * (out[p] - s * up[v]);
    }
}

/// Tree filter of a `[C, H, W]` probability map with affinity
/// `exp(-E_ij / sigma)`, followed by per-pixel renormalization across
/// classes. Runs in `O(C·N)` with one leaf-to-root and one root-to-leaf pass.
pub fn tree_filter(p: &Tensor, tree: &SpanningTree, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = p.dims3()?;
    if (h, w) != (tree.height, tree.width) {
        return Err(Error::shape("tree_filter", &[h, w], &[tree.height, tree.width]));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid("tree_filter", "sigma must be positive"));
    }
    let n = h * w;
    let decay: Vec<f64> = tree.parent_weight.iter().map(|w| math::exp(-w / sigma)).collect();
    let mut up = vec![0.0; n];
    let mut z = vec![0.0; n];
    aggregate(tree, &decay, &vec![1.0; n], &mut up, &mut z);
    let mut out = vec![0.0; c * n];
    for ci in 0..c {
        let dst = &mut out[ci * n..(ci + 1) * n];
        aggregate(tree, &decay, &p.data()[ci * n..(ci + 1) * n], &mut up, dst);
        for (o, zi) in dst.iter_mut().zip(&z) {
            *o /= zi;
        }
    }
    for i in 0..n {
        let s: f64 = (0..c).map(|ci| out[ci * n + i]).sum();
        if s > 0.0 {
            for ci in 0..c {
                out[ci * n + i] /= s;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Settings for pseudo-label generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityConfig {
    /// Path-distance scale of the affinity `exp(-E/sigma)`.
    pub sigma: f64,
    /// Separate scale for the image tree; `sigma` when unset. Raw
    /// intensities differ far less across a boundary than unit-norm
    /// features do.
    pub low_sigma: Option<f64>,
    /// L2-normalize decoder features per pixel before measuring distances.
    pub normalize_high: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low_sigma: None,
            normalize_high: true,
        }
    }
}

impl AffinityConfig {
    /// Scales for the image tree and the two feature trees, in cascade order.
    pub fn sigmas(&self) -> [f64; 3] {
        [self.low_sigma.unwrap_or(self.sigma), self.sigma, self.sigma]
    }
}

/// The three trees of the cascade: image, upsampled second-stage decoder
/// features, upsampled third-stage decoder features.
pub fn cascade_trees(image: &Tensor, d2: &Tensor, d3: &Tensor, cfg: AffinityConfig) -> Result<[SpanningTree; 3]> {
    let (_, h, w) = image.dims3()?;
    let high = |f: &Tensor| -> Result<SpanningTree> {
        let mut up = bilinear_resize(f, h, w)?;
        if cfg.normalize_high {
            up = l2_normalize_pixels(&up)?;
        }
        boruvka_mst(&build_grid_graph(&up)?)
    };
    Ok([boruvka_mst(&build_grid_graph(image)?)?, high(d2)?, high(d3)?])
}

/// Pseudo-labels `F(F(F(P, low), high1), high2)`. The result is a plain
/// tensor: nothing flows back into `p` through it.
pub fn cascade_pseudo_label(p: &Tensor, image: &Tensor, d2: &Tensor, d3: &Tensor, cfg: AffinityConfig) -> Result<Tensor> {
    let trees = cascade_trees(image, d2, d3, cfg)?;
    let mut y = p.clone();
    for (t, sigma) in trees.iter().zip(cfg.sigmas()) {
        y = tree_filter(&y, t, sigma)?;
    }
    Ok(y)
}

struct MaskedL1Rule {
    target: Tensor,
    unlabeled: Vec<usize>,
}

impl BackwardRule for MaskedL1Rule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let (c, n) = (p.shape()[0], p.len() / p.shape()[0]);
        let scale = grad[0] / self.unlabeled.len() as f64;
        let mut d = vec![0.0; p.len()];
        for &i in &self.unlabeled {
            for ci in 0..c {
                let idx = ci * n + i;
                let diff = p.data()[idx] - self.target.data()[idx];
                d[idx] = if diff > 0.0 {
                    scale
                } else if diff < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
        }
        vec![Some(d)]
    }
}

/// Tree energy loss `(1/|U|) Σ_{i∈U} Σ_c |P_ic - Y_ic|` over the unlabeled
/// pixels `U`, with the pseudo-label `Y` held constant. Zero when `U` is
/// empty.
pub fn mstree_loss(tape: &mut Tape, p: Var, target: &Tensor, unlabeled: &[usize]) -> Result<Var> {
    let pv = tape.value(p);
    if pv.shape() != target.shape() {
        return Err(Error::shape("mstree_loss", pv.shape(), target.shape()));
    }
    if unlabeled.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (c, h, w) = pv.dims3()?;
    let n = h * w;
    if let Some(&bad) = unlabeled.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(
            "mstree_loss",
            alloc::format!("pixel {} outside {}x{}", bad, h, w),
        ));
    }
    let mut total = 0.0;
    for &i in unlabeled {
        for ci in 0..c {
            total += (pv.data()[ci * n + i] - target.data()[ci * n + i]).abs();
        }
    }
    let value = Tensor::scalar(total / unlabeled.len() as f64);
    Ok(tape.custom(
        &[p],
        value,
        Box::new(MaskedL1Rule {
            target: target.clone(),
            unlabeled: unlabeled.to_vec(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, vals: &[f64]) -> Tensor {
        Tensor::new(&[1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn edge_count_and_weights() {
        let g = build_grid_graph(&Tensor::full(&[2, 4, 5], 0.3)).unwrap();
        assert_eq!(g.edges.len(), 4 * 4 + 5 * 3);
        assert!(g.edges.iter().all(|e| e.weight == 0.0));
        let g = build_grid_graph(&image(1, 2, &[0.2, 0.7])).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].weight - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_edge_tree() {
        let g = build_grid_graph(&image(1, 2, &[0.2, 0.7])).unwrap();
        let t = boruvka_mst(&g).unwrap();
        assert!((t.total_weight() - 0.5).abs() < 1e-15);
        assert_eq!(t.edges().count(), 1);
    }

    #[test]
    fn equal_weights_give_any_spanning_tree_weight() {
        let g = GridGraph::from_fn(3, 3, |_, _| 0.25);
        let t = boruvka_mst(&g).unwrap();
        assert_eq!(t.edges().count(), 8);
        assert_eq!(t.total_weight(), 8.0 * 0.25);
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = GridGraph::from_fn(0, 0, |_, _| 0.0);
        assert_eq!(boruvka_mst(&g), Err(Error::EmptyGraph));
    }

    #[test]
    fn zero_weights_average_globally() {
        let g = GridGraph::from_fn(3, 4, |_, _| 0.0);
        let t = boruvka_mst(&g).unwrap();
        let p = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { (i % 5) as f64 / 5.0 } else { 0.0 });
        let mut p = p;
        for i in 0..12 {
            p.data_mut()[12 + i] = 1.0 - p.data()[i];
        }
        let out = tree_filter(&p, &t, 1.0).unwrap();
        let mean0: f64 = p.data()[..12].iter().sum::<f64>() / 12.0;
        for i in 0..12 {
            assert!((out.data()[i] - mean0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_pixel_closed_form() {
        let w = 0.8;
        let g = GridGraph::from_fn(1, 2, |_, _| w);
        let t = boruvka_mst(&g).unwrap();
        let p = Tensor::new(&[2, 1, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let out = tree_filter(&p, &t, 1.0).unwrap();
        let e = math::exp(-w);
        let want0 = (0.9 + e * 0.2) / (1.0 + e);
        assert!((out.data()[0] - want0).abs() < 1e-14);
    }

    #[test]
    fn constant_probabilities_are_a_fixed_point() {
        let g = build_grid_graph(&Tensor::from_fn(&[1, 5, 5], |i| (i as f64 * 0.37) % 1.0)).unwrap();
        let t = boruvka_mst(&g).unwrap();
        let p = Tensor::from_fn(&[3, 5, 5], |i| [0.2, 0.5, 0.3][i / 25]);
        let out = tree_filter(&p, &t, 0.5).unwrap();
        assert!(out.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let t = boruvka_mst(&GridGraph::from_fn(2, 2, |_, _| 1.0)).unwrap();
        assert!(tree_filter(&Tensor::zeros(&[2, 2, 3]), &t, 1.0).is_err());
    }

    #[test]
    fn mstree_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
        let y = Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        let l = mstree_loss(&mut tape, p, &y, &[0]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let same = tape.value(p).clone();
        let l0 = mstree_loss(&mut tape, p, &same, &[0]).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
        let empty = mstree_loss(&mut tape, p, &y, &[]).unwrap();
        assert_eq!(tape.value(empty).item(), 0.0);
    }
}
