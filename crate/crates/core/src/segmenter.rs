//! k-means in embedding space followed by Potts graph-cut smoothing.

use std::collections::VecDeque;

use log::debug;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus_io::LabelMap;
use crate::deep_image::DeepImage;
use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub objective: f64,
    /// Objective after every assignment step.
    pub trace: Vec<f64>,
}

impl ClusterModel {
    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(p: &[f32], c: &[f64]) -> f64 {
    p.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

fn nearest(p: &[f32], centers: &[f64], dim: usize) -> (usize, f64) {
    centers
        .chunks(dim)
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

fn assign(points: &[f32], centers: &[f64], dim: usize) -> (Vec<usize>, Vec<f64>) {
    points
        .par_chunks(dim)
        .map(|p| nearest(p, centers, dim))
        .unzip()
}

/// Lloyd iterations from distance-weighted seeding over `n × dim` points.
pub fn kmeans_points(
    points: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterModel> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values do not form points of dimension {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the {n} points"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = seed::rng_for(seed, &[tag::KMEANS]);

    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend(point(first).iter().map(|&v| v as f64));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers)).collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while best[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend(point(pick).iter().map(|&v| v as f64));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(point(i), &centers[start..]));
        }
    }

    let (mut assignment, dists) = assign(points, &centers, dim);
    let mut trace = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iters {
        centers = update_centers(points, dim, k, &assignment);
        let (next, dists) = assign(points, &centers, dim);
        trace.push(dists.iter().sum());
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let objective = (0..n)
        .map(|i| {
            sq_dist(
                point(i),
                &centers[assignment[i] * dim..(assignment[i] + 1) * dim],
            )
        })
        .sum();
    Ok(ClusterModel {
        k,
        dim,
        centers,
        assignment,
        objective,
        trace,
    })
}

/// Cluster means; an empty cluster takes the point farthest from its own
/// center, lowest index first.
fn update_centers(points: &[f32], dim: usize, k: usize, assignment: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks(dim).zip(assignment) {
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v as f64;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .for_each(|s| *s /= count as f64);
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = points
            .chunks(dim)
            .zip(assignment)
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(i, (p, &a))| (i, sq_dist(p, &sums[a * dim..(a + 1) * dim])))
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0;
        debug!("k-means: re-seeding empty cluster {c} at point {far}");
        taken.push(far);
        for (s, &v) in sums[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&points[far * dim..])
        {
            *s = v as f64;
        }
    }
    sums
}

pub fn kmeans(deep: &DeepImage, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    kmeans_points(&deep.embeddings, deep.dim, k, seed, max_iters)
}

/// Per-pixel label costs plus a Potts penalty on 4-connected neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEnergy {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    /// `height × width × k`, row-major.
    pub data: Vec<f64>,
    pub lambda: f64,
}

impl GridEnergy {
    pub fn new(width: usize, height: usize, k: usize, data: Vec<f64>, lambda: f64) -> Result<Self> {
        if width == 0 || height == 0 || k == 0 {
            return Err(Error::InvalidInput(
                "grid energy needs a non-empty grid and k ≥ 1".into(),
            ));
        }
        if data.len() != width * height * k {
            return Err(Error::Shape(format!(
                "{} data costs for a {width}x{height} grid with {k} labels",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("data costs must be finite and ≥ 0".into()));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::NonFinite(format!("smoothness weight {lambda}")));
        }
        Ok(Self {
            width,
            height,
            k,
            data,
            lambda,
        })
    }

    pub fn cost(&self, pixel: usize, label: usize) -> f64 {
        self.data[pixel * self.k + label]
    }

    fn neighbor_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (w, h) = (self.width, self.height);
        (0..h).flat_map(move |r| {
            (0..w).flat_map(move |c| {
                let p = r * w + c;
                let right = (c + 1 < w).then_some((p, p + 1));
                let down = (r + 1 < h).then_some((p, p + w));
                right.into_iter().chain(down)
            })
        })
    }

    pub fn energy(&self, labels: &[usize]) -> f64 {
        let data: f64 = labels
            .iter()
            .enumerate()
            .map(|(p, &l)| self.cost(p, l))
            .sum();
        let cuts = self
            .neighbor_pairs()
            .filter(|&(p, q)| labels[p] != labels[q])
            .count();
        data + self.lambda * cuts as f64
    }

    /// Per-pixel cheapest label, ties to the lowest id.
    pub fn argmin(&self) -> Vec<usize> {
        self.data
            .chunks(self.k)
            .map(|costs| {
                costs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (l, &c)| if c < costs[best] { l } else { best })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutResult {
    pub labels: Vec<usize>,
    pub energy: f64,
    /// Energy before the first move and after every accepted move.
    pub trace: Vec<f64>,
    /// Largest disagreement between a move's cut value and the energy of
    /// the labeling it induces.
    pub max_flow_mismatch: f64,
}

const FLOW_EPS: f64 = 1e-12;

struct FlowGraph {
    head: Vec<usize>,
    next: Vec<usize>,
    to: Vec<usize>,
    cap: Vec<f64>,
}

const NONE: usize = usize::MAX;

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        Self {
            head: vec![NONE; nodes],
            next: Vec::new(),
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, a: usize, b: usize, forward: f64, backward: f64) {
        for (from, to, cap) in [(a, b, forward), (b, a, backward)] {
            self.next.push(self.head[from]);
            self.head[from] = self.to.len();
            self.to.push(to);
            self.cap.push(cap);
        }
    }

    /// Dinic's algorithm; returns the flow value.
    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let n = self.head.len();
        let mut flow = 0.0;
        let mut level = vec![usize::MAX; n];
        let mut iter = vec![NONE; n];
        let mut path: Vec<usize> = Vec::new();
        loop {
            level.iter_mut().for_each(|l| *l = usize::MAX);
            level[s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                let mut e = self.head[u];
                while e != NONE {
                    let v = self.to[e];
                    if self.cap[e] > FLOW_EPS && level[v] == usize::MAX {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    }
                    e = self.next[e];
                }
            }
            if level[t] == usize::MAX {
                return flow;
            }
            iter.copy_from_slice(&self.head);
            // iterative blocking-flow search; `path` holds edge ids from s
            loop {
                let u = path.last().map_or(s, |&e| self.to[e]);
                if u == t {
                    let push = path
                        .iter()
                        .map(|&e| self.cap[e])
                        .fold(f64::INFINITY, f64::min);
                    for &e in &path {
                        self.cap[e] -= push;
                        self.cap[e ^ 1] += push;
                    }
                    flow += push;
                    let cut = path.iter().position(|&e| self.cap[e] <= FLOW_EPS).unwrap();
                    path.truncate(cut);
                    continue;
                }
                let mut advanced = false;
                while iter[u] != NONE {
                    let e = iter[u];
                    let v = self.to[e];
                    if self.cap[e] > FLOW_EPS && level[v] == level[u] + 1 {
                        path.push(e);
                        advanced = true;
                        break;
                    }
                    iter[u] = self.next[e];
                }
                if !advanced {
                    if u == s {
                        break;
                    }
                    level[u] = usize::MAX;
                    let e = path.pop().unwrap();
                    let from = self.to[e ^ 1];
                    iter[from] = self.next[iter[from]];
                }
            }
        }
    }

    /// Nodes reachable from `s` in the residual graph.
    fn source_side(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.head.len()];
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            let mut e = self.head[u];
            while e != NONE {
                let v = self.to[e];
                if self.cap[e] > FLOW_EPS && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
                e = self.next[e];
            }
        }
        seen
    }
}

/// Best α-expansion of `labels`, with the predicted energy (constant plus
/// cut value).
fn expansion_move(energy: &GridEnergy, labels: &[usize], alpha: usize) -> (Vec<usize>, f64) {
    let n = labels.len();
    let (s, t) = (n, n + 1);
    // cost of keeping the current label (node on the source side) and of
    // switching to α (sink side)
    let mut keep = vec![0.0f64; n];
    let mut switch = vec![0.0f64; n];
    let mut constant = 0.0;
    let mut graph = FlowGraph::new(n + 2);
    let lambda = energy.lambda;
    for p in 0..n {
        if labels[p] == alpha {
            constant += energy.cost(p, alpha);
        } else {
            keep[p] += energy.cost(p, labels[p]);
            switch[p] += energy.cost(p, alpha);
        }
    }
    let potts = |a: usize, b: usize| if a == b { 0.0 } else { lambda };
    for (p, q) in energy.neighbor_pairs() {
        let (fp, fq) = (labels[p], labels[q]);
        match (fp == alpha, fq == alpha) {
            (true, true) => {}
            (true, false) => keep[q] += lambda,
            (false, true) => keep[p] += lambda,
            (false, false) => {
                let a = potts(fp, fq);
                let b = potts(fp, alpha);
                let c = potts(alpha, fq);
                constant += a;
                switch[p] += c - a;
                switch[q] += -c;
                let pair = b + c - a;
                if pair > 0.0 {
                    // paid when p keeps and q switches
                    graph.add_edge(p, q, pair, 0.0);
                }
            }
        }
    }
    for p in 0..n {
        if labels[p] == alpha {
            continue;
        }
        let m = keep[p].min(switch[p]);
        constant += m;
        let (k, sw) = (keep[p] - m, switch[p] - m);
        if sw > 0.0 {
            graph.add_edge(s, p, sw, 0.0);
        }
        if k > 0.0 {
            graph.add_edge(p, t, k, 0.0);
        }
    }
    let flow = graph.max_flow(s, t);
    let source = graph.source_side(s);
    let next = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| if l == alpha || source[p] { l } else { alpha })
        .collect();
    (next, constant + flow)
}

/// α-expansion with exact min cuts, sweeping labels in ascending order until
/// a sweep brings no strict decrease. A zero smoothness weight short-cuts to
/// the per-pixel argmin.
pub fn graph_cut(energy: &GridEnergy, initial: &[usize]) -> Result<CutResult> {
    if initial.len() != energy.width * energy.height {
        return Err(Error::Shape(format!(
            "{} initial labels for a {}x{} grid",
            initial.len(),
            energy.width,
            energy.height
        )));
    }
    if let Some(&l) = initial.iter().find(|&&l| l >= energy.k) {
        return Err(Error::InvalidInput(format!(
            "initial label {l} out of range for k = {}",
            energy.k
        )));
    }
    let mut labels = initial.to_vec();
    let mut current = energy.energy(&labels);
    let mut trace = vec![current];
    if energy.lambda == 0.0 {
        labels = energy.argmin();
        current = energy.energy(&labels);
        trace.push(current);
        return Ok(CutResult {
            labels,
            energy: current,
            trace,
            max_flow_mismatch: 0.0,
        });
    }
    let mut mismatch: f64 = 0.0;
    loop {
        let mut improved = false;
        for alpha in 0..energy.k {
            let (candidate, predicted) = expansion_move(energy, &labels, alpha);
            let e = energy.energy(&candidate);
            mismatch = mismatch.max((predicted - e).abs());
            if e < current - 1e-12 * current.abs().max(1.0) {
                labels = candidate;
                current = e;
                trace.push(e);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(CutResult {
        labels,
        energy: current,
        trace,
        max_flow_mismatch: mismatch,
    })
}

/// Half the median gap between each pixel's two cheapest labels.
pub fn default_lambda(energy_data: &[f64], k: usize) -> f64 {
    if k < 2 || energy_data.is_empty() {
        return 0.0;
    }
    let mut gaps: Vec<f64> = energy_data
        .chunks(k)
        .map(|c| {
            let (mut a, mut b) = (f64::INFINITY, f64::INFINITY);
            for &v in c {
                if v < a {
                    b = a;
                    a = v;
                } else if v < b {
                    b = v;
                }
            }
            b - a
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len();
    let median = if m % 2 == 1 {
        gaps[m / 2]
    } else {
        0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
    };
    0.5 * median
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Labels on the deep image's sampling grid.
    pub labels: LabelMap,
    pub model: ClusterModel,
    pub lambda: f64,
    pub cut: CutResult,
}

/// Cluster a deep image and smooth the assignment with a Potts graph cut.
/// `lambda = None` picks [`default_lambda`].
pub fn segment(deep: &DeepImage, k: usize, lambda: Option<f64>, seed: u64) -> Result<Segmentation> {
    let model = kmeans(deep, k, seed, DEFAULT_MAX_ITERS)?;
    let data: Vec<f64> = deep
        .embeddings
        .par_chunks(deep.dim)
        .flat_map_iter(|p| {
            (0..k)
                .map(|c| sq_dist(p, model.center(c)))
                .collect::<Vec<_>>()
        })
        .collect();
    let lambda = lambda.unwrap_or_else(|| default_lambda(&data, k));
    let energy = GridEnergy::new(deep.grid_width(), deep.grid_height(), k, data, lambda)?;
    let cut = graph_cut(&energy, &model.assignment)?;
    debug!(
        "segment `{}`: k-means objective {:.4}, lambda {:.4}, energy {:.4} -> {:.4}",
        deep.image_id, model.objective, lambda, cut.trace[0], cut.energy
    );
    let labels = LabelMap::new(
        energy.width,
        energy.height,
        cut.labels.iter().map(|&l| l as u32).collect(),
    )?;
    Ok(Segmentation {
        labels,
        model,
        lambda,
        cut,
    })
}

/// Nearest-grid-point upsampling of a strided label grid to full resolution.
pub fn upsample_labels(
    grid: &LabelMap,
    stride: usize,
    width: usize,
    height: usize,
) -> Result<LabelMap> {
    if stride == 0 || width.div_ceil(stride) != grid.width || height.div_ceil(stride) != grid.height
    {
        return Err(Error::Shape(format!(
            "{}x{} grid does not match a {width}x{height} image at stride {stride}",
            grid.width, grid.height
        )));
    }
    let nearest = |i: usize, n: usize| ((i + stride / 2) / stride).min(n - 1);
    let labels = (0..height)
        .flat_map(|r| {
            (0..width).map(move |c| grid.get(nearest(r, grid.height), nearest(c, grid.width)))
        })
        .collect();
    LabelMap::new(width, height, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force(energy: &GridEnergy) -> f64 {
        let n = energy.width * energy.height;
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            best = best.min(energy.energy(&labels));
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                labels[i] += 1;
                if labels[i] < energy.k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn separable_clusters_are_exact() {
        let dim = 4;
        let pts: Vec<f32> = [0.0, 0.0, 10.0, 10.0]
            .iter()
            .flat_map(|&v| std::iter::once(v).chain(std::iter::repeat_n(0.0, dim - 1)))
            .collect();
        let m = kmeans_points(&pts, dim, 2, 1, 100).unwrap();
        assert_eq!(m.objective, 0.0);
        let mut firsts = vec![m.center(0)[0], m.center(1)[0]];
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, vec![0.0, 10.0]);
        assert_eq!(m.assignment[0], m.assignment[1]);
        assert_ne!(m.assignment[0], m.assignment[2]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![1.0f32, 2.0, 3.0, 6.0, 5.0, 1.0];
        let m = kmeans_points(&pts, 2, 1, 0, 100).unwrap();
        let mean = [3.0, 3.0];
        assert_eq!(m.center(0), &mean);
        let total: f64 = pts
            .chunks(2)
            .map(|p| (p[0] as f64 - 3.0).powi(2) + (p[1] as f64 - 3.0).powi(2))
            .sum();
        assert!((m.objective - total).abs() < 1e-12);
    }

    #[test]
    fn kmeans_beats_random_assignments() {
        let mut rng = seed::rng(5);
        let dim = 3;
        let pts: Vec<f32> = (0..50 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = kmeans_points(&pts, dim, 3, 2, 100).unwrap();
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
        for _ in 0..10 {
            let assign: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
            let centers = update_centers(&pts, dim, 3, &assign);
            let obj: f64 = pts
                .chunks(dim)
                .zip(&assign)
                .map(|(p, &a)| sq_dist(p, &centers[a * dim..(a + 1) * dim]))
                .sum();
            assert!(m.objective <= obj);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        assert!(kmeans_points(&[0.0; 6], 2, 4, 0, 10).is_err());
        assert!(kmeans_points(&[0.0; 6], 2, 0, 0, 10).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = vec![1.0f32; 12];
        let m = kmeans_points(&pts, 2, 3, 0, 100).unwrap();
        assert!(m.centers.iter().all(|v| v.is_finite()));
        assert_eq!(m.objective, 0.0);
    }

    #[test]
    fn zero_lambda_is_argmin_with_low_ties() {
        let e = GridEnergy::new(2, 1, 3, vec![1.0, 1.0, 2.0, 3.0, 0.5, 0.5], 0.0).unwrap();
        let cut = graph_cut(&e, &[2, 2]).unwrap();
        assert_eq!(cut.labels, vec![0, 1]);
    }

    #[test]
    fn single_label_costs_the_data_sum() {
        let e = GridEnergy::new(3, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2.0).unwrap();
        let cut = graph_cut(&e, &[0; 6]).unwrap();
        assert_eq!(cut.labels, vec![0; 6]);
        assert_eq!(cut.energy, 21.0);
    }

    #[test]
    fn max_flow_on_a_known_network() {
        // classic 6-node example with max flow 23
        let mut g = FlowGraph::new(6);
        for (a, b, c) in [
            (0, 1, 16.0),
            (0, 2, 13.0),
            (1, 2, 10.0),
            (2, 1, 4.0),
            (1, 3, 12.0),
            (3, 2, 9.0),
            (2, 4, 14.0),
            (4, 3, 7.0),
            (3, 5, 20.0),
            (4, 5, 4.0),
        ] {
            g.add_edge(a, b, c, 0.0);
        }
        assert_eq!(g.max_flow(0, 5), 23.0);
    }

    #[test]
    fn two_halves_segment_cleanly() {
        let (w, h, dim) = (8, 6, 5);
        let mut emb = Vec::new();
        for _ in 0..h {
            for c in 0..w {
                let v = if c < w / 2 {
                    [1.0, 0.0, 0.0, 0.0, 0.0]
                } else {
                    [0.0, 1.0, 0.0, 0.0, 0.0]
                };
                emb.extend_from_slice(&v);
            }
        }
        let deep = DeepImage {
            image_id: "halves".into(),
            width: w,
            height: h,
            stride: 1,
            dim,
            embeddings: emb,
        };
        // separation gap is 2; any smaller weight keeps the halves
        for lambda in [None, Some(0.0), Some(0.5), Some(1.9)] {
            let s = segment(&deep, 2, lambda, 3).unwrap();
            for r in 0..h {
                for c in 0..w {
                    assert_eq!(
                        s.labels.get(r, c),
                        s.labels.get(0, if c < w / 2 { 0 } else { w - 1 })
                    );
                }
            }
            assert_ne!(s.labels.get(0, 0), s.labels.get(0, w - 1));
        }
    }

    #[test]
    fn zero_lambda_segment_is_kmeans() {
        let mut rng = seed::rng(2);
        let deep = DeepImage {
            image_id: "r".into(),
            width: 6,
            height: 5,
            stride: 1,
            dim: 4,
            embeddings: (0..120).map(|_| rng.random::<f32>()).collect(),
        };
        let s = segment(&deep, 3, Some(0.0), 4).unwrap();
        let got: Vec<usize> = s.labels.labels.iter().map(|&l| l as usize).collect();
        assert_eq!(got, s.model.assignment);
    }

    #[test]
    fn upsampling_repeats_grid_points() {
        let grid = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let full = upsample_labels(&grid, 2, 4, 3).unwrap();
        assert_eq!(full.labels, vec![0, 1, 1, 1, 2, 3, 3, 3, 2, 3, 3, 3]);
        assert!(upsample_labels(&grid, 2, 5, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]

        #[test]
        fn expansion_is_within_twice_the_optimum(
            w in 1usize..4,
            h in 1usize..3,
            k in 2usize..4,
            lambda in prop::sample::select(vec![0.0, 1.0, 5.0]),
            seed in any::<u64>(),
        ) {
            let mut rng = seed::rng(seed);
            let n = w * h;
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(0..10) as f64).collect();
            let e = GridEnergy::new(w, h, k, data, lambda).unwrap();
            let init: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let cut = graph_cut(&e, &init).unwrap();
            let opt = brute_force(&e);
            prop_assert!(cut.energy <= 2.0 * opt + 1e-9);
            prop_assert!(cut.trace.windows(2).all(|p| p[1] <= p[0]));
            prop_assert!(cut.max_flow_mismatch < 1e-9);
            prop_assert!((e.energy(&cut.labels) - cut.energy).abs() < 1e-9);
        }
    }
}
