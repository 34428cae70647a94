//! Offline solver: block-partitioned stochastic gradient descent on the
//! joint objective.
//!
//! `S` (n×n) and `A` (n×p) are tiled into B×B blocks. One gradient step
//! touches an instance set — the blocks {S^{ij}, A^{ik}, A^{jk}} together
//! with the parameter blocks {W^i, W^j, H^k}. Two instance sets whose
//! superscripts are disjoint own disjoint parameters, so they can be
//! processed in either order (or in parallel) with identical results.

use std::mem;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{self, SparseSimilarity};
use crate::model::{
    anomaly_scores, flag_top_n, frob_sq, nsnmf_objective, pairwise_sum, AnomalyReport,
    DataMatrix, FactorPair, HyperParams,
};
use crate::thread_pool;

/// Step-size schedule and run limits for the gradient solver.
#[derive(Debug, Clone)]
pub struct SgdSchedule {
    /// Initial step size; step at round t is `epsilon0 / (1 + t/tau)`.
    pub epsilon0: f64,
    /// Decay horizon of the step size.
    pub tau: f64,
    /// Hard cap on rounds.
    pub max_rounds: usize,
    /// Stop when the relative objective change over a round falls below this.
    pub tol: f64,
    /// Seed for initialization and block sampling.
    pub seed: u64,
    /// Process interchangeable instance sets on the shared thread pool.
    /// Results are bitwise-identical either way.
    pub parallel: bool,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self {
            epsilon0: 1e-3,
            tau: 100.0,
            max_rounds: 500,
            tol: 1e-5,
            seed: 0,
            parallel: true,
        }
    }
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon0 > 0.0 && self.epsilon0.is_finite()) {
            return Err(Error::InvalidInput("epsilon0 must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidInput("tau must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidInput("tol must be non-negative".into()));
        }
        Ok(())
    }

    /// Positive and non-increasing in `round`.
    pub fn step_size(&self, round: usize) -> f64 {
        self.epsilon0 / (1.0 + round as f64 / self.tau)
    }
}

/// Index ranges tiling the similarity matrix (rows × rows) and the data
/// matrix (rows × cols) into B×B blocks. The last block absorbs remainders.
#[derive(Debug, Clone)]
pub struct BlockPartition {
    n: usize,
    p: usize,
    b: usize,
    row_bounds: Vec<(usize, usize)>,
    col_bounds: Vec<(usize, usize)>,
}

fn split_bounds(len: usize, b: usize) -> Vec<(usize, usize)> {
    let base = len / b;
    (0..b)
        .map(|i| {
            let start = i * base;
            let end = if i + 1 == b { len } else { start + base };
            (start, end)
        })
        .collect()
}

/// Tile `n` rows and `p` columns into `b` splits per dimension.
pub fn partition(n: usize, p: usize, b: usize) -> Result<BlockPartition> {
    if b == 0 {
        return Err(Error::InvalidInput("block count must be at least 1".into()));
    }
    if b > n.min(p) {
        return Err(Error::InvalidInput(format!(
            "cannot split a {n}x{p} problem into {b} blocks per dimension"
        )));
    }
    Ok(BlockPartition {
        n,
        p,
        b,
        row_bounds: split_bounds(n, b),
        col_bounds: split_bounds(p, b),
    })
}

impl BlockPartition {
    pub fn blocks(&self) -> usize {
        self.b
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    /// Row range of row-block `i`.
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        let (a, b) = self.row_bounds[i];
        a..b
    }

    /// Column range of column-block `k`.
    pub fn col_range(&self, k: usize) -> std::ops::Range<usize> {
        let (a, b) = self.col_bounds[k];
        a..b
    }
}

/// Block superscripts (i, j, k) selecting {S^{ij}, A^{ik}, A^{jk}} and the
/// parameter blocks {W^i, W^j, H^k}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl InstanceSet {
    /// The distinct superscript values used by this set.
    pub fn superscripts(&self) -> Vec<usize> {
        let mut v = vec![self.i, self.j, self.k];
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Two sets may run concurrently only when they share no superscript value.
pub fn interchangeable(a: &InstanceSet, b: &InstanceSet) -> bool {
    let sa = a.superscripts();
    b.superscripts().iter().all(|x| !sa.contains(x))
}

/// Draw a maximal collection of pairwise-interchangeable instance sets: a
/// random permutation of the block indices chunked into triples, with the
/// remainder folded into one final set.
pub fn sample_interchangeable(part: &BlockPartition, rng: &mut impl Rng) -> Vec<InstanceSet> {
    let b = part.blocks();
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let mut sets = Vec::with_capacity(b / 3 + 1);
    let mut chunks = perm.chunks_exact(3);
    for c in &mut chunks {
        sets.push(InstanceSet {
            i: c[0],
            j: c[1],
            k: c[2],
        });
    }
    match chunks.remainder() {
        [r] => sets.push(InstanceSet { i: *r, j: *r, k: *r }),
        [r, t] => {
            let k = if rng.random_bool(0.5) { *r } else { *t };
            sets.push(InstanceSet { i: *r, j: *t, k });
        }
        _ => {}
    }
    sets
}

/// The data slices an instance set reads: S-block entries (block-local
/// indices) and the two data blocks. For a diagonal set (i = j) both data
/// views are the same block.
#[derive(Debug, Clone, Copy)]
pub struct InstanceViews<'a> {
    pub s_entries: &'a [(usize, usize, f64)],
    pub a_ik: ArrayView2<'a, f64>,
    pub a_jk: ArrayView2<'a, f64>,
}

/// Blockwise loss of one instance set:
/// `‖S^{ij} − W^i W^{jᵀ}‖² + (γ/2B)(‖W^i‖² + ‖W^j‖²)
///  + (α/2)(‖A^{ik} − W^i H^k‖² + ‖A^{jk} − W^j H^k‖²) + (γ/B)‖H^k‖²`.
///
/// Summed over a disjoint cover of all blocks this reproduces the full
/// objective exactly; with B = 1 a single call is the full objective.
pub fn block_loss(
    views: &InstanceViews<'_>,
    wi: &Array2<f64>,
    wj: Option<&Array2<f64>>,
    hk: &Array2<f64>,
    params: &HyperParams,
) -> f64 {
    let wj_eff = wj.unwrap_or(wi);
    let b = params.blocks as f64;

    // ‖S − WiWjᵀ‖² expanded so the dense block product is never formed.
    let s_sq: Vec<f64> = views.s_entries.iter().map(|&(_, _, v)| v * v).collect();
    let cross: Vec<f64> = views
        .s_entries
        .iter()
        .map(|&(r, c, v)| v * wi.row(r).dot(&wj_eff.row(c)))
        .collect();
    let gram_i = wi.t().dot(wi);
    let gram_j = wj_eff.t().dot(wj_eff);
    let prod_sq = gram_i
        .iter()
        .zip(gram_j.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>();
    let sim = pairwise_sum(&s_sq) - 2.0 * pairwise_sum(&cross) + prod_sq;

    let res_ik = &views.a_ik.to_owned() - &wi.dot(hk);
    let res_jk = &views.a_jk.to_owned() - &wj_eff.dot(hk);
    let data = frob_sq(res_ik.view()) + frob_sq(res_jk.view());

    let ridge_w = frob_sq(wi.view()) + frob_sq(wj_eff.view());
    let ridge_h = frob_sq(hk.view());

    sim + (params.gamma / (2.0 * b)) * ridge_w
        + (params.alpha / 2.0) * data
        + (params.gamma / b) * ridge_h
}

/// `S_block · M` for triplet-encoded S (rows × cols block, M has `cols` rows).
fn sparse_dot(entries: &[(usize, usize, f64)], rows: usize, m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((rows, m.ncols()));
    for &(r, c, v) in entries {
        let src = m.row(c);
        let mut dst = out.row_mut(r);
        dst.scaled_add(v, &src);
    }
    out
}

/// `S_blockᵀ · M` for triplet-encoded S.
fn sparse_dot_t(entries: &[(usize, usize, f64)], cols: usize, m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((cols, m.ncols()));
    for &(r, c, v) in entries {
        let src = m.row(r);
        let mut dst = out.row_mut(c);
        dst.scaled_add(v, &src);
    }
    out
}

/// Analytic gradients of [`block_loss`] with respect to W^i, W^j and H^k.
/// For a diagonal set the single combined W gradient is returned in the
/// first slot and the second is `None`.
pub fn block_gradients(
    views: &InstanceViews<'_>,
    wi: &Array2<f64>,
    wj: Option<&Array2<f64>>,
    hk: &Array2<f64>,
    params: &HyperParams,
) -> (Array2<f64>, Option<Array2<f64>>, Array2<f64>) {
    let b = params.blocks as f64;
    let alpha = params.alpha;
    let ridge = params.gamma / b;
    let hh = hk.dot(&hk.t());

    match wj {
        Some(wj) => {
            let gram_i = wi.t().dot(wi);
            let gram_j = wj.t().dot(wj);
            let s_wj = sparse_dot(views.s_entries, wi.nrows(), wj);
            let st_wi = sparse_dot_t(views.s_entries, wj.nrows(), wi);

            let mut g_wi = wi.dot(&gram_j) * 2.0 - &(s_wj * 2.0);
            g_wi += &(wi * ridge);
            g_wi -= &(views.a_ik.dot(&hk.t()) * alpha);
            g_wi += &(wi.dot(&hh) * alpha);

            let mut g_wj = wj.dot(&gram_i) * 2.0 - &(st_wi * 2.0);
            g_wj += &(wj * ridge);
            g_wj -= &(views.a_jk.dot(&hk.t()) * alpha);
            g_wj += &(wj.dot(&hh) * alpha);

            let mut g_hk = (wi.t().dot(&views.a_ik) + wj.t().dot(&views.a_jk)) * (-alpha);
            g_hk += &((gram_i + gram_j).dot(hk) * alpha);
            g_hk += &(hk * (2.0 * ridge));

            (g_wi, Some(g_wj), g_hk)
        }
        None => {
            // Diagonal block: both roles collapse onto one W block, updated
            // once with the combined gradient.
            let gram = wi.t().dot(wi);
            let s_w = sparse_dot(views.s_entries, wi.nrows(), wi);
            let st_w = sparse_dot_t(views.s_entries, wi.nrows(), wi);

            let mut g_w = wi.dot(&gram) * 4.0 - &((s_w + st_w) * 2.0);
            g_w += &(wi * (2.0 * ridge));
            g_w -= &(views.a_ik.dot(&hk.t()) * (2.0 * alpha));
            g_w += &(wi.dot(&hh) * (2.0 * alpha));

            let mut g_hk = wi.t().dot(&views.a_ik) * (-2.0 * alpha);
            g_hk += &(gram.dot(hk) * (2.0 * alpha));
            g_hk += &(hk * (2.0 * ridge));

            (g_w, None, g_hk)
        }
    }
}

/// One gradient step on an instance set followed by the non-negativity
/// projection. Passing `epsilon = 0` leaves the parameters untouched.
pub fn sgd_step(
    set: &InstanceSet,
    views: &InstanceViews<'_>,
    wi: &mut Array2<f64>,
    mut wj: Option<&mut Array2<f64>>,
    hk: &mut Array2<f64>,
    params: &HyperParams,
    epsilon: f64,
) -> Result<()> {
    let (g_wi, g_wj, g_hk) = block_gradients(views, wi, wj.as_deref(), hk, params);
    let finite = g_wi.iter().all(|v| v.is_finite())
        && g_hk.iter().all(|v| v.is_finite())
        && g_wj
            .as_ref()
            .map_or(true, |g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Numerical(format!(
            "non-finite gradient on instance set (i={}, j={}, k={})",
            set.i, set.j, set.k
        )));
    }
    wi.scaled_add(-epsilon, &g_wi);
    wi.mapv_inplace(|v| v.max(0.0));
    if let (Some(wj), Some(g_wj)) = (wj.as_deref_mut(), g_wj) {
        wj.scaled_add(-epsilon, &g_wj);
        wj.mapv_inplace(|v| v.max(0.0));
    }
    hk.scaled_add(-epsilon, &g_hk);
    hk.mapv_inplace(|v| v.max(0.0));
    Ok(())
}

/// Parameter blocks: one W block per row-block, one H block per column-block.
#[derive(Debug, Clone)]
struct BlockedFactors {
    w: Vec<Array2<f64>>,
    h: Vec<Array2<f64>>,
}

impl BlockedFactors {
    fn split(part: &BlockPartition, w: &Array2<f64>, h: &Array2<f64>) -> Self {
        let w_blocks = (0..part.blocks())
            .map(|i| {
                let r = part.row_range(i);
                w.slice(s![r, ..]).to_owned()
            })
            .collect();
        let h_blocks = (0..part.blocks())
            .map(|k| {
                let c = part.col_range(k);
                h.slice(s![.., c]).to_owned()
            })
            .collect();
        Self {
            w: w_blocks,
            h: h_blocks,
        }
    }

    fn assemble(&self) -> (Array2<f64>, Array2<f64>) {
        let w_views: Vec<_> = self.w.iter().map(|w| w.view()).collect();
        let h_views: Vec<_> = self.h.iter().map(|h| h.view()).collect();
        let w = concatenate(Axis(0), &w_views).expect("row blocks tile W");
        let h = concatenate(Axis(1), &h_views).expect("column blocks tile H");
        (w, h)
    }
}

/// A full disjoint cover of one round: every ordered (i, j) pair once, with
/// the column block chosen by a shifted Latin rule so that summing the block
/// losses over the cover equals the full objective.
fn round_cover(b: usize, shift: usize) -> Vec<InstanceSet> {
    let mut sets = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            sets.push(InstanceSet {
                i,
                j,
                k: (i + j + shift) % b,
            });
        }
    }
    sets
}

/// Greedily group sets into collections whose members are pairwise
/// interchangeable. Collections run one after another; members of one
/// collection may run in parallel.
fn pack_interchangeable(sets: &[InstanceSet]) -> Vec<Vec<InstanceSet>> {
    let mut groups: Vec<(Vec<InstanceSet>, Vec<bool>)> = Vec::new();
    let b = sets
        .iter()
        .map(|s| s.i.max(s.j).max(s.k))
        .max()
        .map_or(0, |m| m + 1);
    for &set in sets {
        let ids = set.superscripts();
        match groups
            .iter_mut()
            .find(|(_, used)| ids.iter().all(|&x| !used[x]))
        {
            Some((group, used)) => {
                group.push(set);
                for &x in &ids {
                    used[x] = true;
                }
            }
            None => {
                let mut used = vec![false; b];
                for &x in &ids {
                    used[x] = true;
                }
                groups.push((vec![set], used));
            }
        }
    }
    groups.into_iter().map(|(g, _)| g).collect()
}

struct WorkItem<'a> {
    set: InstanceSet,
    wi: Array2<f64>,
    wj: Option<Array2<f64>>,
    hk: Array2<f64>,
    s_entries: Vec<(usize, usize, f64)>,
    a_ik: ArrayView2<'a, f64>,
    a_jk: ArrayView2<'a, f64>,
}

fn process_collection(
    factors: &mut BlockedFactors,
    part: &BlockPartition,
    data: &Array2<f64>,
    similarity: &SparseSimilarity,
    collection: &[InstanceSet],
    params: &HyperParams,
    epsilon: f64,
    parallel: bool,
) -> Result<()> {
    let empty = || Array2::zeros((0, 0));
    let mut items: Vec<WorkItem<'_>> = collection
        .iter()
        .map(|&set| {
            let wi = mem::replace(&mut factors.w[set.i], empty());
            let wj = (set.j != set.i).then(|| mem::replace(&mut factors.w[set.j], empty()));
            let hk = mem::replace(&mut factors.h[set.k], empty());
            let rows = part.row_range(set.i);
            let cols_j = part.row_range(set.j);
            let cols_k = part.col_range(set.k);
            WorkItem {
                set,
                wi,
                wj,
                hk,
                s_entries: similarity.block_triplets(rows.clone(), cols_j.clone()),
                a_ik: data.slice(s![rows, cols_k.clone()]),
                a_jk: data.slice(s![cols_j, cols_k]),
            }
        })
        .collect();

    let step = |item: &mut WorkItem<'_>| {
        let views = InstanceViews {
            s_entries: &item.s_entries,
            a_ik: item.a_ik,
            a_jk: item.a_jk,
        };
        // Destructure so the borrows of wi/wj/hk are disjoint.
        let WorkItem { set, wi, wj, hk, .. } = item;
        sgd_step(set, &views, wi, wj.as_mut(), hk, params, epsilon)
    };

    let outcome: Result<()> = if parallel && items.len() > 1 {
        thread_pool().install(|| items.par_iter_mut().try_for_each(step))
    } else {
        items.iter_mut().try_for_each(step)
    };

    for item in items {
        factors.w[item.set.i] = item.wi;
        if let Some(wj) = item.wj {
            factors.w[item.set.j] = wj;
        }
        factors.h[item.set.k] = item.hk;
    }
    outcome
}

/// Uniform [0, 1) initialization of both factors from one generator.
fn init_factors(n: usize, p: usize, k: usize, rng: &mut impl Rng) -> (Array2<f64>, Array2<f64>) {
    let w = Array2::from_shape_fn((n, k), |_| rng.random::<f64>());
    let h = Array2::from_shape_fn((k, p), |_| rng.random::<f64>());
    (w, h)
}

/// Fit the joint objective by blockwise SGD.
///
/// Each round processes a full disjoint cover of the blocks in randomized
/// order, grouped into interchangeable collections. Rounds whose objective
/// diverges (non-finite, or growing more than tenfold) are rolled back and
/// retried with a persistently damped step; this keeps the pinned schedule
/// on healthy problems and survives degenerate similarity scales.
pub fn fit_offline(
    data: &DataMatrix,
    similarity: &SparseSimilarity,
    params: &HyperParams,
    schedule: &SgdSchedule,
) -> Result<FactorPair> {
    params.validate()?;
    schedule.validate()?;
    let (n, p) = (data.nrows(), data.ncols());
    if similarity.len() != n {
        return Err(Error::InvalidInput(format!(
            "similarity is {}x{} but data has {} rows",
            similarity.len(),
            similarity.len(),
            n
        )));
    }
    if params.k > n.min(p) {
        return Err(Error::InvalidInput(format!(
            "k = {} exceeds min(n, p) = {}",
            params.k,
            n.min(p)
        )));
    }
    let part = partition(n, p, params.blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let (w0, h0) = init_factors(n, p, params.k, &mut rng);
    let mut factors = BlockedFactors::split(&part, &w0, &h0);

    let objective_of = |factors: &BlockedFactors| -> Result<f64> {
        let (w, h) = factors.assemble();
        let pair = FactorPair::new(w, h)
            .map_err(|e| Error::Numerical(format!("factors left the feasible set: {e}")))?;
        nsnmf_objective(data, similarity, &pair, params)
    };

    let mut prev_obj = objective_of(&factors)?;
    let mut damp = 1.0_f64;

    for round in 0..schedule.max_rounds {
        let shift = rng.random_range(0..part.blocks());
        let mut cover = round_cover(part.blocks(), shift);
        cover.shuffle(&mut rng);
        let collections = pack_interchangeable(&cover);

        let obj = loop {
            let snapshot = factors.clone();
            let epsilon = schedule.step_size(round) * damp;
            let mut failed: Option<Error> = None;
            for collection in &collections {
                if let Err(e) = process_collection(
                    &mut factors,
                    &part,
                    data.values(),
                    similarity,
                    collection,
                    params,
                    epsilon,
                    schedule.parallel,
                ) {
                    failed = Some(e);
                    break;
                }
            }
            let obj = match failed {
                None => objective_of(&factors).ok(),
                Some(_) => None,
            };
            match obj {
                Some(o) if o.is_finite() && o <= prev_obj * 10.0 + 1e-6 => break o,
                _ => {
                    factors = snapshot;
                    damp *= 0.5;
                    if damp < 1e-30 {
                        return Err(Error::Numerical(format!(
                            "round {round}: no stable step size found; the similarity scale may \
                             be degenerate"
                        )));
                    }
                }
            }
        };

        let rel = (prev_obj - obj).abs() / prev_obj.abs().max(1e-300);
        prev_obj = obj;
        if rel < schedule.tol {
            break;
        }
    }

    let (w, h) = factors.assemble();
    FactorPair::new(w, h).map_err(|e| Error::Numerical(format!("final factors invalid: {e}")))
}

/// End-to-end offline detection: tree similarity, fit, scores, top-N flags.
pub fn detect_offline(
    data: &DataMatrix,
    params: &HyperParams,
    schedule: &SgdSchedule,
) -> Result<AnomalyReport> {
    let mst = graph::mst_of_points(data)?;
    let similarity = graph::similarity_from_mst(&mst);
    let factors = fit_offline(data, &similarity, params, schedule)?;
    let scores = anomaly_scores(data, &factors)?;
    flag_top_n(&scores, params.top_n)?.with_row_ids(data.row_ids())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_similarity(n: usize, rng: &mut impl Rng) -> SparseSimilarity {
        // Random path graph similarity: symmetric, zero diagonal.
        let mut triplets = Vec::new();
        for i in 0..n - 1 {
            let v = rng.random::<f64>() + 0.2;
            triplets.push((i, i + 1, v));
            triplets.push((i + 1, i, v));
        }
        SparseSimilarity::from_triplets(n, &triplets).unwrap()
    }

    fn random_data(n: usize, p: usize, rng: &mut impl Rng) -> DataMatrix {
        DataMatrix::new(Array2::from_shape_fn((n, p), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn partition_splits_evenly() {
        let part = partition(100, 100, 5).unwrap();
        for i in 0..5 {
            assert_eq!(part.row_range(i).len(), 20);
            // each S block holds 20×20 = 400 entries
            assert_eq!(part.row_range(i).len() * part.row_range(i).len(), 400);
        }
    }

    #[test]
    fn partition_b1_is_whole_matrix() {
        let part = partition(7, 3, 1).unwrap();
        assert_eq!(part.row_range(0), 0..7);
        assert_eq!(part.col_range(0), 0..3);
    }

    #[test]
    fn partition_remainder_goes_to_last_block() {
        let part = partition(7, 7, 2).unwrap();
        assert_eq!(part.row_range(0).len(), 3);
        assert_eq!(part.row_range(1).len(), 4);
    }

    #[test]
    fn partition_rejects_too_many_blocks() {
        assert!(partition(4, 3, 4).is_err());
    }

    #[test]
    fn sampled_sets_are_pairwise_interchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in 1..=12 {
            let part = partition(b * 4, b * 4, b).unwrap();
            for _ in 0..20 {
                let sets = sample_interchangeable(&part, &mut rng);
                assert!(!sets.is_empty());
                for x in 0..sets.len() {
                    for y in x + 1..sets.len() {
                        assert!(
                            interchangeable(&sets[x], &sets[y]),
                            "sets {:?} and {:?} overlap",
                            sets[x],
                            sets[y]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shared_superscript_is_rejected() {
        // {1,5,3} vs {2,3,4}: 3 repeats, so the pair is not interchangeable.
        let a = InstanceSet { i: 1, j: 5, k: 3 };
        let b = InstanceSet { i: 2, j: 3, k: 4 };
        assert!(!interchangeable(&a, &b));
        // {1,5,3} vs {2,4,6} share nothing.
        let c = InstanceSet { i: 2, j: 4, k: 6 };
        assert!(interchangeable(&a, &c));
    }

    #[test]
    fn single_block_gives_one_instance_set_per_round() {
        let part = partition(5, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sets = sample_interchangeable(&part, &mut rng);
        assert_eq!(sets, vec![InstanceSet { i: 0, j: 0, k: 0 }]);
    }

    #[test]
    fn block_loss_of_zero_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_data(6, 4, &mut rng);
        let sim = toy_similarity(6, &mut rng);
        let part = partition(6, 4, 2).unwrap();
        let set = InstanceSet { i: 0, j: 1, k: 1 };
        let s_entries = sim.block_triplets(part.row_range(0), part.row_range(1));
        let a_ik = data
            .values()
            .slice(s![part.row_range(0), part.col_range(1)]);
        let a_jk = data
            .values()
            .slice(s![part.row_range(1), part.col_range(1)]);
        let views = InstanceViews {
            s_entries: &s_entries,
            a_ik,
            a_jk,
        };
        let k = 2;
        let wi = Array2::zeros((3, k));
        let wj = Array2::zeros((3, k));
        let hk = Array2::zeros((k, a_ik.ncols()));
        let params = HyperParams {
            k,
            alpha: 0.8,
            gamma: 0.0,
            blocks: 2,
            ..Default::default()
        };
        let got = block_loss(&views, &wi, Some(&wj), &hk, &params);
        let want = s_entries.iter().map(|&(_, _, v)| v * v).sum::<f64>()
            + 0.4 * (frob_sq(a_ik) + frob_sq(a_jk));
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        let _ = set;
    }

    /// Sum block losses over a full disjoint cover and compare with the
    /// objective computed by the model module.
    #[test]
    fn cover_sum_equals_full_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(6, 4, &mut rng);
        let sim = toy_similarity(6, &mut rng);
        let params = HyperParams {
            k: 2,
            alpha: 0.8,
            gamma: 0.3,
            blocks: 2,
            ..Default::default()
        };
        let part = partition(6, 4, 2).unwrap();
        let w = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>());
        let h = Array2::from_shape_fn((2, 4), |_| rng.random::<f64>());
        let factors = BlockedFactors::split(&part, &w, &h);

        for shift in 0..2 {
            let mut total = 0.0;
            for set in round_cover(2, shift) {
                let s_entries = sim.block_triplets(part.row_range(set.i), part.row_range(set.j));
                let views = InstanceViews {
                    s_entries: &s_entries,
                    a_ik: data
                        .values()
                        .slice(s![part.row_range(set.i), part.col_range(set.k)]),
                    a_jk: data
                        .values()
                        .slice(s![part.row_range(set.j), part.col_range(set.k)]),
                };
                let wj = (set.i != set.j).then(|| &factors.w[set.j]);
                total += block_loss(&views, &factors.w[set.i], wj, &factors.h[set.k], &params);
            }
            let pair = FactorPair::new(w.clone(), h.clone()).unwrap();
            let want = nsnmf_objective(&data, &sim, &pair, &params).unwrap();
            assert_abs_diff_eq!(total, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_block_loss_is_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_data(5, 3, &mut rng);
        let sim = toy_similarity(5, &mut rng);
        let params = HyperParams {
            k: 2,
            alpha: 0.6,
            gamma: 0.4,
            blocks: 1,
            ..Default::default()
        };
        let w = Array2::from_shape_fn((5, 2), |_| rng.random::<f64>());
        let h = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>());
        let s_entries: Vec<_> = sim.triplets().collect();
        let views = InstanceViews {
            s_entries: &s_entries,
            a_ik: data.values().view(),
            a_jk: data.values().view(),
        };
        let got = block_loss(&views, &w, None, &h, &params);
        let pair = FactorPair::new(w, h).unwrap();
        let want = nsnmf_objective(&data, &sim, &pair, &params).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    fn finite_difference_check(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=12);
        let p = rng.random_range(2..=6);
        let k = rng.random_range(1..=3.min(p));
        let b = rng.random_range(1..=2.min(n / 2).max(1));
        let data = random_data(n, p, &mut rng);
        let sim = toy_similarity(n, &mut rng);
        let part = partition(n, p, b).unwrap();
        let params = HyperParams {
            k,
            alpha: 0.8,
            gamma: 0.2,
            blocks: b,
            ..Default::default()
        };
        let set = if b == 1 {
            InstanceSet { i: 0, j: 0, k: 0 }
        } else {
            InstanceSet { i: 0, j: 1, k: 1 }
        };
        let s_entries = sim.block_triplets(part.row_range(set.i), part.row_range(set.j));
        let a_ik = data
            .values()
            .slice(s![part.row_range(set.i), part.col_range(set.k)]);
        let a_jk = data
            .values()
            .slice(s![part.row_range(set.j), part.col_range(set.k)]);
        let views = InstanceViews {
            s_entries: &s_entries,
            a_ik,
            a_jk,
        };
        let wi = Array2::from_shape_fn((part.row_range(set.i).len(), k), |_| {
            rng.random::<f64>() + 0.1
        });
        let wj_arr = Array2::from_shape_fn((part.row_range(set.j).len(), k), |_| {
            rng.random::<f64>() + 0.1
        });
        let wj = (set.i != set.j).then_some(&wj_arr);
        let hk = Array2::from_shape_fn((k, part.col_range(set.k).len()), |_| {
            rng.random::<f64>() + 0.1
        });

        let (g_wi, g_wj, g_hk) = block_gradients(&views, &wi, wj, &hk, &params);

        let h_step = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h_step);
            let tol = 1e-6 * analytic.abs().max(fd.abs()).max(1.0);
            assert!(
                (analytic - fd).abs() <= tol,
                "gradient mismatch: analytic {analytic} vs fd {fd}"
            );
        };

        for r in 0..wi.nrows() {
            for c in 0..wi.ncols() {
                let mut hi = wi.clone();
                let mut lo = wi.clone();
                hi[[r, c]] += h_step;
                lo[[r, c]] -= h_step;
                check(
                    g_wi[[r, c]],
                    block_loss(&views, &hi, wj, &hk, &params),
                    block_loss(&views, &lo, wj, &hk, &params),
                );
            }
        }
        if let (Some(wj_ref), Some(g_wj)) = (wj, &g_wj) {
            for r in 0..wj_ref.nrows() {
                for c in 0..wj_ref.ncols() {
                    let mut hi = wj_ref.clone();
                    let mut lo = wj_ref.clone();
                    hi[[r, c]] += h_step;
                    lo[[r, c]] -= h_step;
                    check(
                        g_wj[[r, c]],
                        block_loss(&views, &wi, Some(&hi), &hk, &params),
                        block_loss(&views, &wi, Some(&lo), &hk, &params),
                    );
                }
            }
        }
        for r in 0..hk.nrows() {
            for c in 0..hk.ncols() {
                let mut hi = hk.clone();
                let mut lo = hk.clone();
                hi[[r, c]] += h_step;
                lo[[r, c]] -= h_step;
                check(
                    g_hk[[r, c]],
                    block_loss(&views, &wi, wj, &hi, &params),
                    block_loss(&views, &wi, wj, &lo, &params),
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..8 {
            finite_difference_check(seed);
        }
    }

    #[test]
    fn zero_step_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random_data(4, 3, &mut rng);
        let sim = toy_similarity(4, &mut rng);
        let s_entries: Vec<_> = sim.triplets().collect();
        let views = InstanceViews {
            s_entries: &s_entries,
            a_ik: data.values().view(),
            a_jk: data.values().view(),
        };
        let params = HyperParams {
            k: 2,
            blocks: 1,
            ..Default::default()
        };
        let mut w = Array2::from_shape_fn((4, 2), |_| rng.random::<f64>());
        let mut h = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>());
        let (w0, h0) = (w.clone(), h.clone());
        sgd_step(
            &InstanceSet { i: 0, j: 0, k: 0 },
            &views,
            &mut w,
            None,
            &mut h,
            &params,
            0.0,
        )
        .unwrap();
        assert_eq!(w, w0);
        assert_eq!(h, h0);
    }

    #[test]
    fn perfect_factorization_is_stationary() {
        // S = WWᵀ and A = WH with gamma = 0: the gradient vanishes.
        let w = ndarray::array![[0.5, 0.1], [0.2, 0.9], [0.3, 0.3]];
        let h = ndarray::array![[1.0, 0.2], [0.5, 0.7]];
        let s_dense = w.dot(&w.t());
        let mut s_entries = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                s_entries.push((i, j, s_dense[[i, j]]));
            }
        }
        let a = w.dot(&h);
        let views = InstanceViews {
            s_entries: &s_entries,
            a_ik: a.view(),
            a_jk: a.view(),
        };
        let params = HyperParams {
            k: 2,
            alpha: 0.8,
            gamma: 0.0,
            blocks: 1,
            ..Default::default()
        };
        let mut w_run = w.clone();
        let mut h_run = h.clone();
        sgd_step(
            &InstanceSet { i: 0, j: 0, k: 0 },
            &views,
            &mut w_run,
            None,
            &mut h_run,
            &params,
            0.1,
        )
        .unwrap();
        for (a, b) in w_run.iter().zip(w.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in h_run.iter().zip(h.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn disjoint_sets_commute_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 12;
        let p = 8;
        let b = 6;
        let data = random_data(n, p, &mut rng);
        let sim = toy_similarity(n, &mut rng);
        let part = partition(n, p, b).unwrap();
        let params = HyperParams {
            k: 2,
            blocks: b,
            ..Default::default()
        };
        let w = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let h = Array2::from_shape_fn((2, p), |_| rng.random::<f64>());
        let set_a = InstanceSet { i: 0, j: 2, k: 4 };
        let set_b = InstanceSet { i: 1, j: 3, k: 5 };
        assert!(interchangeable(&set_a, &set_b));

        let run = |order: [InstanceSet; 2]| {
            let mut factors = BlockedFactors::split(&part, &w, &h);
            for set in order {
                process_collection(
                    &mut factors,
                    &part,
                    data.values(),
                    &sim,
                    &[set],
                    &params,
                    1e-2,
                    false,
                )
                .unwrap();
            }
            factors.assemble()
        };
        let (w_ab, h_ab) = run([set_a, set_b]);
        let (w_ba, h_ba) = run([set_b, set_a]);
        assert_eq!(w_ab, w_ba);
        assert_eq!(h_ab, h_ba);
    }

    #[test]
    fn fit_reduces_objective_on_planted_factorization() {
        // Exactly rank-2 data from well-spread weight rows and a large basis
        // scale, so the similarity term stays small relative to the initial
        // data mismatch and a long schedule can dig three orders deep.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w_true = Array2::from_shape_fn((12, 2), |(i, c)| {
            if c == 0 {
                0.1 + i as f64 / 12.0
            } else {
                0.1 + ((7 * i + 3) % 12) as f64 / 12.0
            }
        });
        let h_true = Array2::from_shape_fn((2, 4), |_| 10.0 + 40.0 * rng.random::<f64>());
        let data = DataMatrix::new(w_true.dot(&h_true)).unwrap();
        let sim = graph::similarity_from_mst(&graph::mst_of_points(&data).unwrap());
        let params = HyperParams {
            k: 2,
            alpha: 0.8,
            gamma: 0.0,
            blocks: 2,
            ..Default::default()
        };
        let schedule = SgdSchedule {
            epsilon0: 1e-3,
            tau: 5000.0,
            max_rounds: 40_000,
            tol: 0.0,
            seed: 7,
            ..Default::default()
        };
        let initial = {
            let mut init_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
            let (w0, h0) = init_factors(12, 4, 2, &mut init_rng);
            let pair = FactorPair::new(w0, h0).unwrap();
            nsnmf_objective(&data, &sim, &pair, &params).unwrap()
        };
        let fitted = fit_offline(&data, &sim, &params, &schedule).unwrap();
        let final_obj = nsnmf_objective(&data, &sim, &fitted, &params).unwrap();
        assert!(
            final_obj < 1e-3 * initial,
            "objective {final_obj} did not drop below 1e-3 of initial {initial}"
        );
    }

    #[test]
    fn zero_rounds_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_data(6, 4, &mut rng);
        let sim = toy_similarity(6, &mut rng);
        let params = HyperParams {
            k: 2,
            blocks: 2,
            ..Default::default()
        };
        let schedule = SgdSchedule {
            max_rounds: 0,
            seed: 3,
            ..Default::default()
        };
        let fitted = fit_offline(&data, &sim, &params, &schedule).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(3);
        let (w0, h0) = init_factors(6, 4, 2, &mut init_rng);
        assert_eq!(fitted.weights(), &w0);
        assert_eq!(fitted.basis(), &h0);
    }

    #[test]
    fn full_batch_descent_is_monotone_for_small_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = random_data(8, 5, &mut rng);
        let sim = toy_similarity(8, &mut rng);
        let params = HyperParams {
            k: 2,
            blocks: 1,
            ..Default::default()
        };
        let part = partition(8, 5, 1).unwrap();
        let (w0, h0) = init_factors(8, 5, 2, &mut rng);
        let mut factors = BlockedFactors::split(&part, &w0, &h0);
        let s_entries: Vec<_> = sim.triplets().collect();
        let mut prev = {
            let (w, h) = factors.assemble();
            let pair = FactorPair::new(w, h).unwrap();
            nsnmf_objective(&data, &sim, &pair, &params).unwrap()
        };
        for _ in 0..200 {
            let views = InstanceViews {
                s_entries: &s_entries,
                a_ik: data.values().view(),
                a_jk: data.values().view(),
            };
            let mut w = mem::replace(&mut factors.w[0], Array2::zeros((0, 0)));
            let mut h = mem::replace(&mut factors.h[0], Array2::zeros((0, 0)));
            sgd_step(
                &InstanceSet { i: 0, j: 0, k: 0 },
                &views,
                &mut w,
                None,
                &mut h,
                &params,
                1e-4,
            )
            .unwrap();
            factors.w[0] = w;
            factors.h[0] = h;
            let (w, h) = factors.assemble();
            let pair = FactorPair::new(w, h).unwrap();
            let obj = nsnmf_objective(&data, &sim, &pair, &params).unwrap();
            assert!(
                obj <= prev + 1e-9,
                "objective rose from {prev} to {obj} under a small full-batch step"
            );
            prev = obj;
        }
    }

    #[test]
    fn fixed_seed_reproduces_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = random_data(10, 6, &mut rng);
        let sim = toy_similarity(10, &mut rng);
        let params = HyperParams {
            k: 3,
            blocks: 3,
            ..Default::default()
        };
        let schedule = SgdSchedule {
            max_rounds: 30,
            seed: 99,
            ..Default::default()
        };
        let a = fit_offline(&data, &sim, &params, &schedule).unwrap();
        let b = fit_offline(&data, &sim, &params, &schedule).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.basis(), b.basis());
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let data = random_data(18, 12, &mut rng);
        let sim = toy_similarity(18, &mut rng);
        let params = HyperParams {
            k: 3,
            blocks: 6,
            ..Default::default()
        };
        let sequential = fit_offline(
            &data,
            &sim,
            &params,
            &SgdSchedule {
                max_rounds: 20,
                seed: 5,
                parallel: false,
                ..Default::default()
            },
        )
        .unwrap();
        let parallel = fit_offline(
            &data,
            &sim,
            &params,
            &SgdSchedule {
                max_rounds: 20,
                seed: 5,
                parallel: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sequential.weights(), parallel.weights());
        assert_eq!(sequential.basis(), parallel.basis());
    }

    #[test]
    fn parameters_stay_non_negative_through_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let data = random_data(9, 5, &mut rng);
        let sim = toy_similarity(9, &mut rng);
        let params = HyperParams {
            k: 2,
            blocks: 3,
            ..Default::default()
        };
        let schedule = SgdSchedule {
            epsilon0: 0.05,
            max_rounds: 50,
            seed: 21,
            ..Default::default()
        };
        let fitted = fit_offline(&data, &sim, &params, &schedule).unwrap();
        assert!(fitted.weights().iter().all(|&v| v >= 0.0));
        assert!(fitted.basis().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn detect_flags_planted_outlier_among_duplicates() {
        // 50 copies of one point plus a far outlier: the outlier must win.
        let mut rows: Vec<Vec<f64>> = (0..50).map(|_| vec![0.2, 0.2, 0.2]).collect();
        rows.push(vec![0.9, 0.95, 0.85]);
        let data = DataMatrix::from_rows(&rows).unwrap();
        let params = HyperParams {
            k: 2,
            blocks: 1,
            top_n: 1,
            ..Default::default()
        };
        let schedule = SgdSchedule {
            epsilon0: 1e-3,
            max_rounds: 300,
            seed: 2,
            ..Default::default()
        };
        let report = detect_offline(&data, &params, &schedule).unwrap();
        assert_eq!(report.flagged_indices(), vec![50]);
    }

    #[test]
    fn round_cover_touches_every_block_pair_once() {
        for b in 1..=6 {
            for shift in 0..b {
                let cover = round_cover(b, shift);
                assert_eq!(cover.len(), b * b);
                let mut seen_pairs = std::collections::HashSet::new();
                let mut k_per_i = vec![std::collections::HashSet::new(); b];
                for set in &cover {
                    assert!(seen_pairs.insert((set.i, set.j)));
                    k_per_i[set.i].insert(set.k);
                }
                for ks in k_per_i {
                    assert_eq!(ks.len(), b, "column blocks not covered per row block");
                }
            }
        }
    }
}
