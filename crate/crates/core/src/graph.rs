//! Neighborhood structure extraction: complete Euclidean graph, minimum
//! spanning tree, and the sparse similarity matrix derived from the tree.
//!
//! The tree approximates geodesic structure: two observations are similar
//! exactly when they are adjacent in the tree, with similarity equal to the
//! reciprocal edge length. Everything here is a pure function over immutable
//! inputs and safe to call concurrently.

use std::io::Write;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::model::{format_g17, DataMatrix};

/// One undirected weighted edge; endpoints are stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// A weighted undirected graph given as an edge list over `n` nodes.
#[derive(Debug, Clone)]
pub struct EdgeList {
    n: usize,
    edges: Vec<Edge>,
}

impl EdgeList {
    /// Validate and normalize an edge list: no loops, no duplicate pairs,
    /// non-negative finite weights.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut normalized = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (a, b, w) in edges {
            if a == b {
                return Err(Error::InvalidInput(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) has invalid weight {w}"
                )));
            }
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if !seen.insert((i, j)) {
                return Err(Error::InvalidInput(format!("duplicate edge ({i}, {j})")));
            }
            normalized.push(Edge { i, j, weight: w });
        }
        Ok(Self { n, edges: normalized })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }
}

fn euclidean(a: ArrayView2<'_, f64>, i: usize, j: usize) -> f64 {
    let mut sq = 0.0;
    for c in 0..a.ncols() {
        let d = a[[i, c]] - a[[j, c]];
        sq += d * d;
    }
    sq.sqrt()
}

/// Connect every pair of observations with an edge weighted by their
/// Euclidean distance: n(n−1)/2 edges.
pub fn build_complete_graph(data: &DataMatrix) -> Result<EdgeList> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 observations to build a graph, got {n}"
        )));
    }
    let a = data.values().view();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push(Edge {
                i,
                j,
                weight: euclidean(a, i, j),
            });
        }
    }
    Ok(EdgeList { n, edges })
}

/// A minimum spanning tree stored as a symmetric sparse distance matrix:
/// an entry is the tree edge length, zero means not adjacent in the tree.
#[derive(Debug, Clone)]
pub struct MstDistance {
    n: usize,
    edges: Vec<Edge>,
    /// Tree adjacency per node, sorted by neighbor index.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl MstDistance {
    fn from_tree_edges(n: usize, mut edges: Vec<Edge>) -> Self {
        edges.sort_by(|a, b| (a.i, a.j).cmp(&(b.i, b.j)));
        let mut adjacency = vec![Vec::new(); n];
        for e in &edges {
            adjacency[e.i].push((e.j, e.weight));
            adjacency[e.j].push((e.i, e.weight));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
        }
        Self { n, edges, adjacency }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Tree edges with `i < j`, sorted lexicographically.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Entry of the distance matrix; zero when the nodes are not adjacent.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.adjacency[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|pos| self.adjacency[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Debug dump: one `i j weight` triple per line, 0-based, 17 significant
    /// digits.
    pub fn write_edges<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.edges {
            writeln!(out, "{} {} {}", e.i, e.j, format_g17(e.weight))?;
        }
        Ok(())
    }
}

/// Heap candidate for Prim's algorithm. Ordering is (weight, i, j) ascending
/// so equal-weight ties resolve to the lowest lexicographic pair.
#[derive(Debug, PartialEq)]
struct Candidate {
    weight: f64,
    i: usize,
    j: usize,
    /// The node this candidate would attach to the tree.
    attach: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then(self.i.cmp(&other.i))
            .then(self.j.cmp(&other.j))
            // BinaryHeap is a max-heap; flip for a min-heap.
            .reverse()
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Prim's algorithm with a binary heap over an explicit edge list.
///
/// Returns an error naming an unreachable node when the graph is not
/// connected.
pub fn minimum_spanning_tree(graph: &EdgeList) -> Result<MstDistance> {
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::InvalidInput("empty graph".into()));
    }
    let mut adjacency = vec![Vec::new(); n];
    for e in graph.edges() {
        adjacency[e.i].push((e.j, e.weight));
        adjacency[e.j].push((e.i, e.weight));
    }

    let mut in_tree = vec![false; n];
    let mut heap = std::collections::BinaryHeap::new();
    let mut tree_edges = Vec::with_capacity(n.saturating_sub(1));

    in_tree[0] = true;
    for &(nbr, w) in &adjacency[0] {
        heap.push(Candidate {
            weight: w,
            i: 0.min(nbr),
            j: 0.max(nbr),
            attach: nbr,
        });
    }

    while tree_edges.len() + 1 < n {
        let Some(cand) = heap.pop() else {
            let unreachable = in_tree.iter().position(|t| !t).expect("some node unreached");
            return Err(Error::Disconnected(unreachable));
        };
        if in_tree[cand.attach] {
            continue; // stale entry
        }
        in_tree[cand.attach] = true;
        tree_edges.push(Edge {
            i: cand.i,
            j: cand.j,
            weight: cand.weight,
        });
        for &(nbr, w) in &adjacency[cand.attach] {
            if !in_tree[nbr] {
                heap.push(Candidate {
                    weight: w,
                    i: cand.attach.min(nbr),
                    j: cand.attach.max(nbr),
                    attach: nbr,
                });
            }
        }
    }

    Ok(MstDistance::from_tree_edges(n, tree_edges))
}

/// Dense-input Prim over the implicit complete Euclidean graph.
///
/// Produces the same tree as [`build_complete_graph`] followed by
/// [`minimum_spanning_tree`] (including tie-breaks) without materializing
/// the n(n−1)/2 edges.
pub fn mst_of_points(data: &DataMatrix) -> Result<MstDistance> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 observations to build a tree, got {n}"
        )));
    }
    let a = data.values().view();
    let mut in_tree = vec![false; n];
    // Best connection of each outside node to the tree: (distance, tree node).
    let mut best = vec![(f64::INFINITY, usize::MAX); n];
    in_tree[0] = true;
    for v in 1..n {
        best[v] = (euclidean(a, 0, v), 0);
    }
    let mut tree_edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        // Pick the outside node with the minimal (weight, i, j) candidate.
        let mut chosen = usize::MAX;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            if chosen == usize::MAX {
                chosen = v;
                continue;
            }
            let (dv, av) = best[v];
            let (dc, ac) = best[chosen];
            let key_v = (dv, av.min(v), av.max(v));
            let key_c = (dc, ac.min(chosen), ac.max(chosen));
            if key_v.0.total_cmp(&key_c.0).then(key_v.1.cmp(&key_c.1)).then(key_v.2.cmp(&key_c.2))
                == std::cmp::Ordering::Less
            {
                chosen = v;
            }
        }
        let (w, attach) = best[chosen];
        in_tree[chosen] = true;
        tree_edges.push(Edge {
            i: attach.min(chosen),
            j: attach.max(chosen),
            weight: w,
        });
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let d = euclidean(a, chosen, v);
            let (cur_d, cur_a) = best[v];
            // Replace on strictly smaller distance, or on ties when the new
            // pair is lexicographically lower.
            let new_key = (chosen.min(v), chosen.max(v));
            let cur_key = (cur_a.min(v), cur_a.max(v));
            if d < cur_d || (d == cur_d && new_key < cur_key) {
                best[v] = (d, chosen);
            }
        }
    }
    Ok(MstDistance::from_tree_edges(n, tree_edges))
}

/// Symmetric sparse similarity matrix with its degree vector.
///
/// Entries are reciprocal tree-edge lengths; absent entries are zero and the
/// diagonal is zero. The matrix has exactly 2(n−1) stored values.
#[derive(Debug, Clone)]
pub struct SparseSimilarity {
    n: usize,
    /// Per-row (column, value) pairs sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
}

impl SparseSimilarity {
    /// Build from explicit (row, col, value) triplets; used by tests and by
    /// callers that bring their own similarity. Must be symmetric with a zero
    /// diagonal.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!(
                    "triplet ({i}, {j}) out of range for n = {n}"
                )));
            }
            if i == j {
                return Err(Error::InvalidInput("diagonal entries must be zero".into()));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "similarity ({i}, {j}) has invalid value {v}"
                )));
            }
            rows[i].push((j, v));
        }
        for (i, list) in rows.iter_mut().enumerate() {
            list.sort_by_key(|&(j, _)| j);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidInput(format!("duplicate entries in row {i}")));
            }
        }
        for i in 0..n {
            for &(j, v) in &rows[i] {
                let mirrored = rows[j]
                    .binary_search_by_key(&i, |&(c, _)| c)
                    .map(|pos| rows[j][pos].1);
                if mirrored != Ok(v) {
                    return Err(Error::InvalidInput(format!(
                        "similarity not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let degree = rows
            .iter()
            .map(|r| r.iter().map(|&(_, v)| v).sum())
            .collect();
        Ok(Self { n, rows, degree })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Row sums `D_ii = Σ_j S_ij`.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// All stored (row, col, value) entries, row-major.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, v)| (i, j, v)))
    }

    /// Entries whose row lies in `rows` and column lies in `cols`, with
    /// indices shifted to be local to the block.
    pub fn block_triplets(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in rows.clone() {
            let list = &self.rows[i];
            let start = list.partition_point(|&(c, _)| c < cols.start);
            for &(c, v) in &list[start..] {
                if c >= cols.end {
                    break;
                }
                out.push((i - rows.start, c - cols.start, v));
            }
        }
        out
    }
}

/// Ceiling on any single similarity value. Zero-length edges would invert to
/// infinity; they are capped instead (see [`similarity_from_mst`]).
pub const SIMILARITY_CAP_MAX: f64 = 1e12;

fn duplicate_cap(edges: &[Edge]) -> f64 {
    // Duplicates should read as "more similar than any distinct pair":
    // ten times the largest finite similarity, bounded above, and 1.0 when
    // every edge is degenerate.
    let min_positive = edges
        .iter()
        .map(|e| e.weight)
        .filter(|&w| w > 0.0)
        .fold(f64::INFINITY, f64::min);
    if min_positive.is_finite() {
        (10.0 / min_positive).min(SIMILARITY_CAP_MAX)
    } else {
        1.0
    }
}

/// Invert the positive tree distances into similarities.
///
/// Zero-length edges (exact duplicate observations) are mapped to a capped
/// value rather than infinity and a warning is logged.
pub fn similarity_from_mst(mst: &MstDistance) -> SparseSimilarity {
    let n = mst.node_count();
    let cap = duplicate_cap(mst.edges());
    let mut capped = 0usize;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in mst.edges() {
        let s = if e.weight > 0.0 {
            1.0 / e.weight
        } else {
            capped += 1;
            cap
        };
        rows[e.i].push((e.j, s));
        rows[e.j].push((e.i, s));
    }
    if capped > 0 {
        log::warn!(
            "{capped} duplicate observation pair(s) produced zero-length tree edges; \
             similarity capped at {cap:e}"
        );
    }
    for list in &mut rows {
        list.sort_by_key(|&(j, _)| j);
    }
    let degree = rows
        .iter()
        .map(|r| r.iter().map(|&(_, v)| v).sum())
        .collect();
    SparseSimilarity { n, rows, degree }
}

/// Similarity row of one buffer member against the rest of the buffer, via a
/// tree built over the buffer only.
///
/// Returns the full row of length `buffer.nrows()` (the self entry is zero);
/// entry `i` is the reciprocal tree-edge length to buffer row `i` when the
/// two are adjacent in the buffer-local tree.
pub fn local_mst_similarity(buffer: &DataMatrix, newest_index: usize) -> Result<Vec<f64>> {
    let n = buffer.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(
            "buffer holds a single observation; no neighbors to relate it to".into(),
        ));
    }
    if newest_index >= n {
        return Err(Error::InvalidInput(format!(
            "newest index {newest_index} out of range for buffer of {n}"
        )));
    }
    let mst = mst_of_points(buffer)?;
    let sim = similarity_from_mst(&mst);
    let mut row = vec![0.0; n];
    for &(j, v) in sim.row(newest_index) {
        row[j] = v;
    }
    Ok(row)
}
