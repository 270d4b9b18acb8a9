//! Latent-space evaluation: kNN graph, Leiden clustering, and the
//! bio-conservation / batch-mixing scores.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::label_indices;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 15;
pub const DEFAULT_RESOLUTION: f64 = 1.0;
/// Randomness of the refinement step.
const REFINE_THETA: f64 = 0.01;

/// Undirected graph as sorted neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for l in &mut adj {
            l.sort_unstable();
            l.dedup();
        }
        Self { adj }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean k-nearest-neighbour graph, union-symmetrized, self excluded,
/// ties broken by index.
pub fn knn_graph(coords: ArrayView2<f64>, k: usize) -> Graph {
    let n = coords.nrows();
    let k = k.min(n.saturating_sub(1));
    let nearest: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(coords.row(i), coords.row(j)), j))
                .collect();
            if k < d.len() {
                d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut adj = vec![Vec::new(); n];
    for (i, nb) in nearest.iter().enumerate() {
        for &j in nb {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    Graph { adj }
}

/// Weighted graph used inside Leiden; `self_w[v]` is the weight of the loop
/// at `v` counted as it appears in the degree.
#[derive(Debug, Clone)]
struct WGraph {
    nbrs: Vec<Vec<(usize, f64)>>,
    self_w: Vec<f64>,
    degree: Vec<f64>,
    total: f64,
}

impl WGraph {
    fn from_graph(g: &Graph) -> Self {
        let nbrs: Vec<Vec<(usize, f64)>> = g.adj.iter().map(|l| l.iter().map(|&j| (j, 1.0)).collect()).collect();
        let degree: Vec<f64> = nbrs.iter().map(|l| l.len() as f64).collect();
        let total = degree.iter().sum();
        Self {
            self_w: vec![0.0; nbrs.len()],
            nbrs,
            degree,
            total,
        }
    }

    fn n(&self) -> usize {
        self.nbrs.len()
    }

    /// Collapses each community of `part` to one node.
    fn aggregate(&self, part: &[usize], n_comm: usize) -> WGraph {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        let mut self_w = vec![0.0; n_comm];
        let mut degree = vec![0.0; n_comm];
        for v in 0..self.n() {
            let cv = part[v];
            degree[cv] += self.degree[v];
            self_w[cv] += self.self_w[v];
            for &(u, w) in &self.nbrs[v] {
                let cu = part[u];
                if cu == cv {
                    self_w[cv] += w;
                } else {
                    *maps[cv].entry(cu).or_insert(0.0) += w;
                }
            }
        }
        WGraph {
            nbrs: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_w,
            degree,
            total: self.total,
        }
    }
}

/// RB modularity `(1/2m) Σ_ij (A_ij − γ k_i k_j / 2m) δ(c_i, c_j)`.
pub fn modularity(g: &Graph, labels: &[usize], resolution: f64) -> f64 {
    let wg = WGraph::from_graph(g);
    quality(&wg, labels, resolution)
}

fn quality(g: &WGraph, part: &[usize], gamma: f64) -> f64 {
    if g.total == 0.0 {
        return 0.0;
    }
    let n_comm = part.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; n_comm];
    let mut tot = vec![0.0; n_comm];
    for v in 0..g.n() {
        tot[part[v]] += g.degree[v];
        internal[part[v]] += g.self_w[v];
        for &(u, w) in &g.nbrs[v] {
            if part[u] == part[v] {
                internal[part[v]] += w;
            }
        }
    }
    let two_m = g.total;
    internal
        .iter()
        .zip(&tot)
        .map(|(e, k)| e - gamma * k * k / two_m)
        .sum::<f64>()
        / two_m
}

fn renumber(part: &mut [usize]) -> usize {
    let mut map: HashMap<usize, usize> = HashMap::new();
    for c in part.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Leiden output with the modularity after each outer iteration.
#[derive(Debug, Clone)]
pub struct LeidenResult {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
    pub modularity_trace: Vec<f64>,
}

/// Community detection maximizing RB modularity with the Leiden scheme
/// (local moving, refinement, aggregation). Labels are numbered by first
/// appearance.
pub fn leiden_cluster(graph: &Graph, resolution: f64, seed: u64) -> Vec<usize> {
    leiden(graph, resolution, seed).labels
}

pub fn leiden(graph: &Graph, resolution: f64, seed: u64) -> LeidenResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = WGraph::from_graph(graph);
    let n = base.n();
    let mut g = base.clone();
    // Membership of each original node in the current aggregate graph.
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut part: Vec<usize> = (0..n).collect();
    let mut trace = vec![quality(&base, &part, resolution)];
    loop {
        move_nodes_fast(&g, &mut part, resolution, &mut rng);
        let n_comm = renumber(&mut part);
        let flat: Vec<usize> = node_of.iter().map(|&v| part[v]).collect();
        let q = quality(&base, &flat, resolution);
        let prev = *trace.last().expect("non-empty");
        assert!(
            q >= prev - 1e-9 * prev.abs().max(1.0),
            "modularity decreased from {prev} to {q}"
        );
        trace.push(q);
        if n_comm == g.n() {
            let mut labels = flat;
            let n_clusters = renumber(&mut labels);
            return LeidenResult {
                labels,
                n_clusters,
                modularity_trace: trace,
            };
        }
        let mut refined = refine(&g, &part, n_comm, resolution, &mut rng);
        let mut n_ref = renumber(&mut refined);
        if n_ref == g.n() {
            // Refinement merged nothing; collapse the unrefined communities.
            refined = part.clone();
            n_ref = n_comm;
        }
        let mut next_part = vec![0; n_ref];
        for v in 0..g.n() {
            next_part[refined[v]] = part[v];
        }
        g = g.aggregate(&refined, n_ref);
        for v in node_of.iter_mut() {
            *v = refined[*v];
        }
        part = next_part;
    }
}

fn move_nodes_fast(g: &WGraph, part: &mut [usize], gamma: f64, rng: &mut ChaCha8Rng) {
    let n = g.n();
    if g.total == 0.0 {
        return;
    }
    let two_m = g.total;
    let n_slots = n.max(part.iter().max().map_or(0, |m| m + 1));
    let mut tot = vec![0.0; n_slots];
    let mut size = vec![0usize; n_slots];
    for v in 0..n {
        tot[part[v]] += g.degree[v];
        size[part[v]] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: std::collections::VecDeque<usize> = order.into_iter().collect();
    let mut queued = vec![true; n];
    let mut empty: Vec<usize> = (0..n_slots).filter(|&c| size[c] == 0).collect();
    let mut w_to: HashMap<usize, f64> = HashMap::new();
    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let old = part[v];
        let kv = g.degree[v];
        w_to.clear();
        for &(u, w) in &g.nbrs[v] {
            *w_to.entry(part[u]).or_insert(0.0) += w;
        }
        tot[old] -= kv;
        size[old] -= 1;
        let gain = |c: usize, w: f64, tot: &[f64]| w - gamma * kv * tot[c] / two_m;
        let mut best = old;
        let mut best_gain = gain(old, w_to.get(&old).copied().unwrap_or(0.0), &tot);
        let mut cands: Vec<(usize, f64)> = w_to.iter().map(|(&c, &w)| (c, w)).collect();
        cands.sort_unstable_by_key(|&(c, _)| c);
        for (c, w) in cands {
            let gn = gain(c, w, &tot);
            if gn > best_gain + 1e-12 {
                best = c;
                best_gain = gn;
            }
        }
        // An empty community is worth 0.
        if best_gain < -1e-12 {
            if size[old] == 0 {
                best = old;
            } else if let Some(c) = empty.pop() {
                best = c;
            }
        }
        tot[best] += kv;
        size[best] += 1;
        if size[old] == 0 && best != old {
            empty.push(old);
        }
        if best != old {
            part[v] = best;
            for &(u, _) in &g.nbrs[v] {
                if !queued[u] && part[u] != best {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
}

fn refine(g: &WGraph, part: &[usize], n_comm: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let two_m = g.total;
    let mut refined: Vec<usize> = (0..n).collect();
    if two_m == 0.0 {
        return refined;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_comm];
    for v in 0..n {
        members[part[v]].push(v);
    }
    let mut tot_c = vec![0.0; n_comm];
    for v in 0..n {
        tot_c[part[v]] += g.degree[v];
    }
    // Per refined community: degree sum, edge weight to the rest of its
    // parent community, and whether it is still a singleton.
    let mut tot_r: Vec<f64> = g.degree.clone();
    let mut ext_r: Vec<f64> = (0..n)
        .map(|v| g.nbrs[v].iter().filter(|(u, _)| part[*u] == part[v]).map(|(_, w)| w).sum())
        .collect();
    let mut size_r = vec![1usize; n];
    for (c, nodes) in members.iter().enumerate() {
        let mut order = nodes.clone();
        order.shuffle(rng);
        for v in order {
            if size_r[refined[v]] != 1 {
                continue;
            }
            let kv = g.degree[v];
            let well_connected = ext_r[refined[v]] >= gamma * kv * (tot_c[c] - kv) / two_m - 1e-12;
            if !well_connected {
                continue;
            }
            let mut w_to: BTreeMap<usize, f64> = BTreeMap::new();
            for &(u, w) in &g.nbrs[v] {
                if part[u] == c {
                    *w_to.entry(refined[u]).or_insert(0.0) += w;
                }
            }
            let own = refined[v];
            let mut cands: Vec<(usize, f64)> = Vec::new();
            for (&r, &w) in &w_to {
                if r == own {
                    continue;
                }
                let wc = ext_r[r] >= gamma * tot_r[r] * (tot_c[c] - tot_r[r]) / two_m - 1e-12;
                if !wc {
                    continue;
                }
                let gain = w - gamma * kv * tot_r[r] / two_m;
                if gain >= 0.0 {
                    cands.push((r, gain));
                }
            }
            if cands.is_empty() {
                continue;
            }
            let max_gain = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = cands.iter().map(|c| ((c.1 - max_gain) / REFINE_THETA).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut target = cands[cands.len() - 1].0;
            for (cand, w) in cands.iter().zip(&weights) {
                if pick < *w {
                    target = cand.0;
                    break;
                }
                pick -= w;
            }
            // Merge v into `target`.
            let w_vt = w_to[&target];
            let w_v_c: f64 = ext_r[own];
            ext_r[target] = ext_r[target] + w_v_c - 2.0 * w_vt;
            tot_r[target] += kv;
            tot_r[own] = 0.0;
            size_r[target] += 1;
            size_r[own] = 0;
            refined[v] = target;
        }
    }
    refined
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0.0; nb]; na];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1.0;
    }
    let rows = t.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..nb).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    (t, rows, cols)
}

fn compact<T: std::hash::Hash + Eq + Clone>(labels: &[T]) -> Vec<usize> {
    let mut map: HashMap<T, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l.clone()).or_insert(next)
        })
        .collect()
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// `2 I(T; C) / (H(T) + H(C))` with natural logarithms.
pub fn nmi<T: std::hash::Hash + Eq + Clone, U: std::hash::Hash + Eq + Clone>(truth: &[T], pred: &[U]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyResult("label"));
    }
    let (t, rows, cols) = contingency(&compact(truth), &compact(pred));
    let n = truth.len() as f64;
    let ht = entropy(&rows, n);
    let hc = entropy(&cols, n);
    if ht == 0.0 && hc == 0.0 {
        return Ok(1.0);
    }
    if ht == 0.0 || hc == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((2.0 * mi / (ht + hc)).clamp(0.0, 1.0))
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the pair-counting contingency form.
pub fn ari<T: std::hash::Hash + Eq + Clone, U: std::hash::Hash + Eq + Clone>(truth: &[T], pred: &[U]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyResult("label"));
    }
    let (t, rows, cols) = contingency(&compact(truth), &compact(pred));
    let n = truth.len() as f64;
    let index: f64 = t.iter().flatten().map(|&v| comb2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| comb2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Per-point silhouettes of `coords[idx]` with respect to `labels` (compact
/// indices aligned with `idx`). Points alone in their class get 0.
fn silhouettes(coords: ArrayView2<f64>, idx: &[usize], labels: &[usize]) -> Vec<f64> {
    let n_cls = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_cls];
    for &l in labels {
        sizes[l] += 1;
    }
    (0..idx.len())
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; n_cls];
            for (j, &l) in labels.iter().enumerate() {
                if j != i {
                    sums[l] += sq_dist(coords.row(idx[i]), coords.row(idx[j])).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_cls)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if !b.is_finite() || denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect()
}

/// Cell-type silhouette, averaged per type then over types, mapped to [0, 1].
pub fn cell_asw<T: std::hash::Hash + Eq + Clone>(coords: ArrayView2<f64>, celltypes: &[T]) -> Result<f64> {
    if coords.nrows() != celltypes.len() {
        return Err(Error::LengthMismatch(coords.nrows(), celltypes.len()));
    }
    let labels = compact(celltypes);
    let n_types = labels.iter().max().map_or(0, |m| m + 1);
    if n_types < 2 {
        return Err(Error::SingleClass(n_types));
    }
    let idx: Vec<usize> = (0..labels.len()).collect();
    let s = silhouettes(coords, &idx, &labels);
    let mut sum = vec![0.0; n_types];
    let mut cnt = vec![0.0; n_types];
    for (&l, &v) in labels.iter().zip(&s) {
        sum[l] += v;
        cnt[l] += 1.0;
    }
    let mean = sum.iter().zip(&cnt).map(|(s, c)| s / c).sum::<f64>() / n_types as f64;
    Ok(0.5 * (1.0 + mean))
}

/// Batch silhouette within each cell type, scored `1 − |s|` and averaged per
/// type, then over types. Types observed in a single batch are skipped.
pub fn batch_asw<T: std::hash::Hash + Eq + Clone, U: std::hash::Hash + Eq + Clone>(
    coords: ArrayView2<f64>,
    batches: &[T],
    celltypes: &[U],
) -> Result<f64> {
    if coords.nrows() != batches.len() {
        return Err(Error::LengthMismatch(coords.nrows(), batches.len()));
    }
    if batches.len() != celltypes.len() {
        return Err(Error::LengthMismatch(batches.len(), celltypes.len()));
    }
    let b = compact(batches);
    let n_batches = b.iter().max().map_or(0, |m| m + 1);
    if n_batches < 2 {
        return Err(Error::SingleClass(n_batches));
    }
    let t = compact(celltypes);
    let n_types = t.iter().max().map_or(0, |m| m + 1);
    let mut scores = Vec::new();
    for ty in 0..n_types {
        let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] == ty).collect();
        let local = compact(&idx.iter().map(|&i| b[i]).collect::<Vec<_>>());
        if local.iter().max().map_or(0, |m| m + 1) < 2 {
            continue;
        }
        let s = silhouettes(coords, &idx, &local);
        scores.push(s.iter().map(|v| 1.0 - v.abs()).sum::<f64>() / s.len() as f64);
    }
    if scores.is_empty() {
        return Err(Error::SingleClass(1));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn lcc_fraction(graph: &Graph, nodes: &[usize]) -> f64 {
    let mut local = HashMap::with_capacity(nodes.len());
    for (i, &v) in nodes.iter().enumerate() {
        local.insert(v, i);
    }
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, &v) in nodes.iter().enumerate() {
        for u in &graph.adj[v] {
            if let Some(&j) = local.get(u) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for i in 0..nodes.len() {
        *sizes.entry(find(&mut parent, i)).or_insert(0) += 1;
    }
    *sizes.values().max().unwrap_or(&0) as f64 / nodes.len() as f64
}

/// Mean over cell types of the largest-connected-component fraction of the
/// type's induced kNN subgraph.
pub fn graph_connectivity<T: std::hash::Hash + Eq + Clone>(coords: ArrayView2<f64>, celltypes: &[T], k: usize) -> Result<f64> {
    if coords.nrows() != celltypes.len() {
        return Err(Error::LengthMismatch(coords.nrows(), celltypes.len()));
    }
    if k == 0 {
        return Err(Error::config("knn", "k must be at least 1"));
    }
    let g = knn_graph(coords, k);
    Ok(graph_connectivity_on(&g, celltypes))
}

pub fn graph_connectivity_on<T: std::hash::Hash + Eq + Clone>(graph: &Graph, celltypes: &[T]) -> f64 {
    let t = compact(celltypes);
    let n_types = t.iter().max().map_or(0, |m| m + 1);
    let total: f64 = (0..n_types)
        .map(|ty| {
            let nodes: Vec<usize> = (0..t.len()).filter(|&i| t[i] == ty).collect();
            lcc_fraction(graph, &nodes)
        })
        .sum();
    total / n_types as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMeta {
    pub resolution: f64,
    pub n_clusters: usize,
    pub knn: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub cell_asw: f64,
    pub batch_asw: f64,
    pub graph_connectivity: f64,
    pub avg_bio: f64,
    pub avg_batch: f64,
    pub clustering_meta: ClusteringMeta,
}

/// All five scores for an embedding (rows = cells).
pub fn evaluate(
    coords: ArrayView2<f64>,
    batches: &[String],
    celltypes: &[String],
    k: usize,
    resolution: f64,
    seed: u64,
) -> Result<MetricsReport> {
    if coords.nrows() != celltypes.len() {
        return Err(Error::LengthMismatch(coords.nrows(), celltypes.len()));
    }
    if !coords.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("embedding has non-finite entries".into()));
    }
    if k == 0 || k >= coords.nrows() {
        return Err(Error::config("knn", format!("k must lie in [1, N), got {k}")));
    }
    let g = knn_graph(coords, k);
    let clusters = leiden(&g, resolution, seed);
    let nmi_v = nmi(celltypes, &clusters.labels)?;
    let ari_v = ari(celltypes, &clusters.labels)?;
    let casw = cell_asw(coords, celltypes)?;
    let basw = batch_asw(coords, batches, celltypes)?;
    let gc = graph_connectivity_on(&g, celltypes);
    Ok(MetricsReport {
        nmi: nmi_v,
        ari: ari_v,
        cell_asw: casw,
        batch_asw: basw,
        graph_connectivity: gc,
        avg_bio: (nmi_v + ari_v + casw) / 3.0,
        avg_batch: (basw + gc) / 2.0,
        clustering_meta: ClusteringMeta {
            resolution,
            n_clusters: clusters.n_clusters,
            knn: k,
            seed,
        },
    })
}

/// Integer codes of string labels, first-appearance order.
pub fn codes(labels: &[String]) -> Vec<usize> {
    label_indices(labels).0
}

/// Embedding rows as an owned matrix (helper for callers holding `Vec`s).
pub fn to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let q = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != q) {
        return Err(Error::ShapeMismatch("ragged embedding rows".into()));
    }
    Ok(Array2::from_shape_fn((rows.len(), q), |(i, j)| rows[i][j]))
}
