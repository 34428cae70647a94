//! Baseline detectors sharing the scoring pipeline: plain NMF with
//! multiplicative updates, graph-regularized NMF over a q-nearest-neighbor
//! Laplacian, and symmetric NMF over a dense Gaussian similarity.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{frob_sq, DataMatrix, FactorPair};
use crate::offline::SgdSchedule;
use crate::online::DENOMINATOR_FLOOR;

/// Settings of the graph-regularized variant.
#[derive(Debug, Clone)]
pub struct GnmfParams {
    /// Weight of the Laplacian smoothness term.
    pub lambda: f64,
    /// Neighborhood size of the 0-1 adjacency.
    pub q: usize,
}

impl Default for GnmfParams {
    fn default() -> Self {
        Self { lambda: 100.0, q: 5 }
    }
}

/// Settings of the symmetric variant.
#[derive(Debug, Clone, Default)]
pub struct SnmfParams {
    /// Gaussian kernel bandwidth; `None` picks the median pairwise distance.
    pub sigma: Option<f64>,
}

/// 0-1 q-nearest-neighbor adjacency with its degree vector and Laplacian
/// `L = D − S̃`.
#[derive(Debug, Clone)]
pub struct LaplacianPair {
    adjacency: Array2<f64>,
    degree: Array1<f64>,
}

impl LaplacianPair {
    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn degree(&self) -> &Array1<f64> {
        &self.degree
    }

    pub fn laplacian(&self) -> Array2<f64> {
        let mut l = -&self.adjacency;
        for i in 0..self.degree.len() {
            l[[i, i]] += self.degree[i];
        }
        l
    }

    /// Symmetric normalization `D^{-1/2} S̃ D^{-1/2}`.
    pub fn normalized_similarity(&self) -> Array2<f64> {
        let n = self.degree.len();
        let inv_sqrt: Vec<f64> = self
            .degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        Array2::from_shape_fn((n, n), |(i, j)| {
            self.adjacency[[i, j]] * inv_sqrt[i] * inv_sqrt[j]
        })
    }
}

fn pairwise_distances(data: &DataMatrix) -> Array2<f64> {
    let a = data.values();
    let n = a.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for c in 0..a.ncols() {
                let diff = a[[i, c]] - a[[j, c]];
                sq += diff * diff;
            }
            let dist = sq.sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    d
}

/// Symmetrized 0-1 q-nearest-neighbor graph: an edge when either endpoint
/// counts the other among its q closest points.
pub fn build_knn_laplacian(data: &DataMatrix, q: usize) -> Result<LaplacianPair> {
    let n = data.nrows();
    if q == 0 {
        return Err(Error::InvalidInput("q must be at least 1".into()));
    }
    if q >= n {
        return Err(Error::InvalidInput(format!(
            "q = {q} must be smaller than the number of observations {n}"
        )));
    }
    let dist = pairwise_distances(data);
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist[[i, a]].total_cmp(&dist[[i, b]]).then(a.cmp(&b)));
        for &j in order.iter().take(q) {
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
    }
    let degree = Array1::from_shape_fn(n, |i| adjacency.row(i).sum());
    Ok(LaplacianPair { adjacency, degree })
}

fn init_factors(n: usize, p: usize, k: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_fn((n, k), |_| rng.random::<f64>());
    let h = Array2::from_shape_fn((k, p), |_| rng.random::<f64>());
    (w, h)
}

fn check_factorization_inputs(data: &DataMatrix, k: usize) -> Result<()> {
    if k == 0 || k > data.nrows().min(data.ncols()) {
        return Err(Error::InvalidInput(format!(
            "k = {k} out of range for a {}x{} matrix",
            data.nrows(),
            data.ncols()
        )));
    }
    Ok(())
}

/// One multiplicative update pass of plain NMF on `‖A − WH‖²`:
/// `H ← H ∘ (WᵀA)/(WᵀWH)`, then `W ← W ∘ (AHᵀ)/(WHHᵀ)`.
pub fn nmf_step(a: &Array2<f64>, w: &mut Array2<f64>, h: &mut Array2<f64>) {
    let wt_a = w.t().dot(a);
    let wt_w_h = w.t().dot(w).dot(&*h);
    for ((r, c), entry) in h.indexed_iter_mut() {
        *entry *= wt_a[[r, c]] / wt_w_h[[r, c]].max(DENOMINATOR_FLOOR);
    }
    let a_ht = a.dot(&h.t());
    let w_h_ht = w.dot(&h.dot(&h.t()));
    for ((r, c), entry) in w.indexed_iter_mut() {
        *entry *= a_ht[[r, c]] / w_h_ht[[r, c]].max(DENOMINATOR_FLOOR);
    }
}

/// Plain-NMF loss `‖A − WH‖²_F`.
pub fn nmf_loss(a: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    frob_sq((a - &w.dot(h)).view())
}

/// Factorize by multiplicative updates; the loss never increases.
pub fn fit_nmf(data: &DataMatrix, k: usize, schedule: &SgdSchedule) -> Result<FactorPair> {
    check_factorization_inputs(data, k)?;
    let a = data.values();
    let (mut w, mut h) = init_factors(a.nrows(), a.ncols(), k, schedule.seed);
    let mut prev = nmf_loss(a, &w, &h);
    for _ in 0..schedule.max_rounds {
        nmf_step(a, &mut w, &mut h);
        let loss = nmf_loss(a, &w, &h);
        if (prev - loss).abs() <= schedule.tol * prev.max(1e-300) {
            break;
        }
        prev = loss;
    }
    FactorPair::new(w, h)
}

/// One multiplicative update pass of the graph-regularized variant:
/// the W update gains `λS̃W` in the numerator and `λDW` in the denominator.
pub fn gnmf_step(
    a: &Array2<f64>,
    graph: &LaplacianPair,
    lambda: f64,
    w: &mut Array2<f64>,
    h: &mut Array2<f64>,
) {
    let wt_a = w.t().dot(a);
    let wt_w_h = w.t().dot(w).dot(&*h);
    for ((r, c), entry) in h.indexed_iter_mut() {
        *entry *= wt_a[[r, c]] / wt_w_h[[r, c]].max(DENOMINATOR_FLOOR);
    }
    let mut numerator = a.dot(&h.t());
    let mut denominator = w.dot(&h.dot(&h.t()));
    if lambda != 0.0 {
        numerator += &(graph.adjacency().dot(&*w) * lambda);
        let dw = Array2::from_shape_fn(w.dim(), |(r, c)| graph.degree()[r] * w[[r, c]]);
        denominator += &(dw * lambda);
    }
    for ((r, c), entry) in w.indexed_iter_mut() {
        *entry *= numerator[[r, c]] / denominator[[r, c]].max(DENOMINATOR_FLOOR);
    }
}

/// Graph-regularized loss `‖A − WH‖²_F + λ·tr(WᵀLW)`.
pub fn gnmf_loss(
    a: &Array2<f64>,
    graph: &LaplacianPair,
    lambda: f64,
    w: &Array2<f64>,
    h: &Array2<f64>,
) -> f64 {
    let smooth = if lambda != 0.0 {
        let lw = graph.laplacian().dot(w);
        w.iter().zip(lw.iter()).map(|(a, b)| a * b).sum::<f64>()
    } else {
        0.0
    };
    nmf_loss(a, w, h) + lambda * smooth
}

/// Fit the graph-regularized variant; with `lambda = 0` the iterates are
/// identical to [`fit_nmf`] from the same seed.
pub fn fit_gnmf(
    data: &DataMatrix,
    k: usize,
    params: &GnmfParams,
    schedule: &SgdSchedule,
) -> Result<FactorPair> {
    check_factorization_inputs(data, k)?;
    if params.lambda < 0.0 {
        return Err(Error::InvalidInput("lambda must be non-negative".into()));
    }
    let graph = build_knn_laplacian(data, params.q)?;
    let a = data.values();
    let (mut w, mut h) = init_factors(a.nrows(), a.ncols(), k, schedule.seed);
    let mut prev = gnmf_loss(a, &graph, params.lambda, &w, &h);
    for _ in 0..schedule.max_rounds {
        gnmf_step(a, &graph, params.lambda, &mut w, &mut h);
        let loss = gnmf_loss(a, &graph, params.lambda, &w, &h);
        if (prev - loss).abs() <= schedule.tol * prev.max(1e-300) {
            break;
        }
        prev = loss;
    }
    FactorPair::new(w, h)
}

/// A fitted symmetric factorization: the weight matrix and the bandwidth
/// that produced its similarity.
#[derive(Debug, Clone)]
pub struct SnmfFit {
    pub w: Array2<f64>,
    pub sigma: f64,
}

/// Dense Gaussian similarity `exp(−‖aᵢ−aⱼ‖²/2σ²)`; the diagonal is 1.
pub fn gaussian_similarity(data: &DataMatrix, sigma: f64) -> Array2<f64> {
    let dist = pairwise_distances(data);
    dist.mapv(|d| (-d * d / (2.0 * sigma * sigma)).exp())
}

/// Median of the positive pairwise distances; 1.0 for degenerate inputs.
pub fn median_pairwise_distance(data: &DataMatrix) -> f64 {
    let dist = pairwise_distances(data);
    let n = dist.nrows();
    let mut positive: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| dist[[i, j]])
        .filter(|&d| d > 0.0)
        .collect();
    if positive.is_empty() {
        return 1.0;
    }
    positive.sort_by(f64::total_cmp);
    positive[positive.len() / 2]
}

/// One projected-gradient step on `‖S − WWᵀ‖²`.
pub fn snmf_step(s: &Array2<f64>, w: &mut Array2<f64>, epsilon: f64) {
    // Gradient −4(S − WWᵀ)W for symmetric S.
    let residual = s - &w.dot(&w.t());
    let gradient = residual.dot(&*w) * -4.0;
    w.scaled_add(-epsilon, &gradient);
    w.mapv_inplace(|v| v.max(0.0));
}

/// Symmetric-factorization loss `‖S − WWᵀ‖²_F`.
pub fn snmf_loss(s: &Array2<f64>, w: &Array2<f64>) -> f64 {
    frob_sq((s - &w.dot(&w.t())).view())
}

/// Fit `S ≈ WWᵀ` by projected gradient descent on the Gaussian similarity.
/// Memory is dense n×n; large inputs get a warning.
pub fn fit_snmf(
    data: &DataMatrix,
    k: usize,
    params: &SnmfParams,
    schedule: &SgdSchedule,
) -> Result<SnmfFit> {
    check_factorization_inputs(data, k)?;
    let n = data.nrows();
    if n > 20_000 {
        log::warn!(
            "dense similarity for {n} observations needs {} GiB",
            (n * n * 8) >> 30
        );
    }
    let sigma = match params.sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => {
            return Err(Error::InvalidInput(format!(
                "sigma must be positive, got {s}"
            )))
        }
        None => median_pairwise_distance(data),
    };
    let s = gaussian_similarity(data, sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut w = Array2::from_shape_fn((n, k), |_| rng.random::<f64>());
    let mut prev = snmf_loss(&s, &w);
    let mut damp = 1.0_f64;
    for round in 0..schedule.max_rounds {
        let snapshot = w.clone();
        snmf_step(&s, &mut w, schedule.step_size(round) * damp);
        let loss = snmf_loss(&s, &w);
        if !loss.is_finite() || loss > prev * 10.0 + 1e-6 {
            w = snapshot;
            damp *= 0.5;
            if damp < 1e-30 {
                return Err(Error::Numerical(
                    "projected gradient found no stable step".into(),
                ));
            }
            continue;
        }
        let rel = (prev - loss).abs() / prev.abs().max(1e-300);
        prev = loss;
        if rel < schedule.tol {
            break;
        }
    }
    Ok(SnmfFit { w, sigma })
}

/// Residual row norms of `S − WWᵀ`; without a basis matrix this is the
/// symmetric variant's only reconstruction handle, so it serves as its
/// anomaly score.
pub fn snmf_scores(data: &DataMatrix, fit: &SnmfFit) -> Result<Vec<f64>> {
    if fit.w.nrows() != data.nrows() {
        return Err(Error::InvalidInput(format!(
            "W has {} rows but data has {}",
            fit.w.nrows(),
            data.nrows()
        )));
    }
    let s = gaussian_similarity(data, fit.sigma);
    let residual = &s - &fit.w.dot(&fit.w.t());
    Ok((0..data.nrows())
        .map(|i| residual.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Both sides of the identity connecting the Laplacian smoothness term with
/// the symmetric-factorization residual, evaluated for a column-orthonormal
/// non-negative `W` against the normalized similarity `S`:
/// `tr(I_K) − 2·tr(WᵀSW) + tr(SᵀS)  =  ‖S − WWᵀ‖²_F`.
#[derive(Debug, Clone, Copy)]
pub struct EquivalenceCheck {
    /// Left side, reached from `tr(WᵀLW)` by adding W-free constants.
    pub laplacian_side: f64,
    /// Right side, the symmetric-factorization residual.
    pub frobenius_side: f64,
    /// `‖WᵀW − I‖_F`; the identity is exact only at zero.
    pub orthonormality_gap: f64,
}

impl EquivalenceCheck {
    pub fn residual(&self) -> f64 {
        (self.laplacian_side - self.frobenius_side).abs()
    }
}

/// Evaluate the equivalence identity. A non-orthonormal `W` is reported, not
/// rejected.
pub fn laplacian_equivalence_check(s: &Array2<f64>, w: &Array2<f64>) -> EquivalenceCheck {
    let k = w.ncols();
    let gram = w.t().dot(w);
    let eye: Array2<f64> = Array2::eye(k);
    let orthonormality_gap = frob_sq((&gram - &eye).view()).sqrt();

    let wsw = w.t().dot(s).dot(w);
    let trace_wsw = (0..k).map(|i| wsw[[i, i]]).sum::<f64>();
    let laplacian_side = k as f64 - 2.0 * trace_wsw + frob_sq(s.view());
    let frobenius_side = frob_sq((s - &w.dot(&w.t())).view());

    EquivalenceCheck {
        laplacian_side,
        frobenius_side,
        orthonormality_gap,
    }
}

/// Random non-negative matrix with orthonormal columns: disjoint row
/// supports per column, each normalized. Useful for exercising the
/// equivalence identity.
pub fn random_orthonormal_nonnegative(n: usize, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    assert!(k <= n, "need at least one row per column");
    let mut assignment: Vec<usize> = (0..n).map(|i| i % k).collect();
    assignment.shuffle(rng);
    let mut w = Array2::zeros((n, k));
    for (row, &col) in assignment.iter().enumerate() {
        w[[row, col]] = rng.random::<f64>() + 0.05;
    }
    for col in 0..k {
        let norm = w.column(col).iter().map(|v| v * v).sum::<f64>().sqrt();
        for row in 0..n {
            w[[row, col]] /= norm;
        }
    }
    w
}
