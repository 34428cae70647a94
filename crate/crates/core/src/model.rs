//! Shared model types: the data matrix, the factor pair, hyperparameters,
//! the joint objective, and reconstruction-error anomaly scoring.
//!
//! The objective fitted by both solvers is
//! `‖S − W·Wᵀ‖²_F + α·‖A − W·H‖²_F + γ·(‖W‖²_F + ‖H‖²_F)`
//! where `S` is the sparse tree-based similarity matrix from [`crate::graph`],
//! `W` holds per-observation cluster weights and `H` holds the basis vectors.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::graph::SparseSimilarity;

/// Sum `f(lo), …, f(hi-1)` by recursive halving.
///
/// Pairwise accumulation keeps the rounding error at O(log n) ulps instead of
/// O(n), which matters for Frobenius norms over matrices with tens of
/// thousands of rows.
pub(crate) fn pairwise_sum_by<F: Fn(usize) -> f64 + Copy>(lo: usize, hi: usize, f: F) -> f64 {
    let len = hi - lo;
    if len <= 32 {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        acc
    } else {
        let mid = lo + len / 2;
        pairwise_sum_by(lo, mid, f) + pairwise_sum_by(mid, hi, f)
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(0, values.len(), |i| values[i])
}

/// Squared Frobenius norm with pairwise accumulation.
pub fn frob_sq(a: ArrayView2<'_, f64>) -> f64 {
    if let Some(s) = a.as_slice_memory_order() {
        pairwise_sum_by(0, s.len(), |i| s[i] * s[i])
    } else {
        let flat: Vec<f64> = a.iter().copied().collect();
        pairwise_sum_by(0, flat.len(), |i| flat[i] * flat[i])
    }
}

/// Format a float with 17 significant digits, enough to round-trip f64.
pub(crate) fn format_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// An n×p matrix of non-negative, finite observations, one row per
/// observation, with optional row labels (ids or timestamps).
#[derive(Debug, Clone)]
pub struct DataMatrix {
    values: Array2<f64>,
    row_ids: Option<Vec<String>>,
}

impl DataMatrix {
    /// Wrap a matrix, rejecting negative or non-finite entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (idx, v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "data matrix entry ({}, {}) is not finite",
                    idx.0, idx.1
                )));
            }
            if *v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "data matrix entry ({}, {}) is negative ({v}); factorization requires non-negative data",
                    idx.0, idx.1
                )));
            }
        }
        Ok(Self {
            values,
            row_ids: None,
        })
    }

    /// Build from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("no rows given".into()));
        }
        let p = rows[0].len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("rows have inconsistent lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), p), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(values)
    }

    /// Attach row labels; one per row.
    pub fn with_row_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.nrows() {
            return Err(Error::InvalidInput(format!(
                "{} row ids for {} rows",
                ids.len(),
                self.nrows()
            )));
        }
        self.row_ids = Some(ids);
        Ok(self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Label of row `i`; falls back to the 0-based index.
    pub fn row_id(&self, i: usize) -> String {
        match &self.row_ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    pub fn row_ids(&self) -> Vec<String> {
        (0..self.nrows()).map(|i| self.row_id(i)).collect()
    }
}

/// The non-negative factor pair: weights `W` (n×K) and basis `H` (K×p).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    w: Array2<f64>,
    h: Array2<f64>,
}

impl FactorPair {
    pub fn new(w: Array2<f64>, h: Array2<f64>) -> Result<Self> {
        if w.ncols() != h.nrows() {
            return Err(Error::InvalidInput(format!(
                "factor shapes disagree: W is {}x{}, H is {}x{}",
                w.nrows(),
                w.ncols(),
                h.nrows(),
                h.ncols()
            )));
        }
        let k = w.ncols();
        if k > w.nrows().min(h.ncols()) {
            return Err(Error::InvalidInput(format!(
                "latent dimension {k} exceeds min(n, p) = {}",
                w.nrows().min(h.ncols())
            )));
        }
        if w.iter().chain(h.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "factor matrices must be non-negative and finite".into(),
            ));
        }
        Ok(Self { w, h })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Hyperparameters shared by the solvers.
///
/// Defaults: `k = 5`, `alpha = 0.8`, `gamma = 0.2`, `buffer = 20`.
#[derive(Debug, Clone)]
pub struct HyperParams {
    /// Number of latent groups K.
    pub k: usize,
    /// Trade-off between the similarity term and the factorization term, in (0, 1].
    pub alpha: f64,
    /// Overfitting regularizer weight, ≥ 0.
    pub gamma: f64,
    /// Splits per dimension for the block partition, ≥ 1.
    pub blocks: usize,
    /// Number of observations to flag.
    pub top_n: usize,
    /// Buffer size for the online solver, ≥ 2.
    pub buffer: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            k: 5,
            alpha: 0.8,
            gamma: 0.2,
            blocks: 1,
            top_n: 1,
            buffer: 20,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.blocks < 1 {
            return Err(Error::InvalidInput("blocks must be at least 1".into()));
        }
        if self.top_n < 1 {
            return Err(Error::InvalidInput("top_n must be at least 1".into()));
        }
        if self.buffer < 2 {
            return Err(Error::InvalidInput("buffer must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-observation anomaly scores with a descending ranking and top-N flags.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    row_ids: Vec<String>,
    scores: Vec<f64>,
    /// 1-based rank of each row; rank 1 is the highest score.
    ranks: Vec<usize>,
    flagged: Vec<bool>,
}

impl AnomalyReport {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn flagged(&self) -> &[bool] {
        &self.flagged
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    /// Indices of flagged rows, most anomalous first.
    pub fn flagged_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).filter(|&i| self.flagged[i]).collect();
        idx.sort_by_key(|&i| self.ranks[i]);
        idx
    }

    pub fn with_row_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.scores.len() {
            return Err(Error::InvalidInput(format!(
                "{} row ids for {} scores",
                ids.len(),
                self.scores.len()
            )));
        }
        self.row_ids = ids;
        Ok(self)
    }

    /// Serialize as `row_id,score,rank,flagged` with 17-digit scores.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row_id,score,rank,flagged")?;
        for i in 0..self.scores.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.row_ids[i],
                format_g17(self.scores[i]),
                self.ranks[i],
                self.flagged[i]
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Rebuild the data matrix from its factors: `W · H`.
pub fn reconstruct(factors: &FactorPair) -> DataMatrix {
    let product = factors.w.dot(&factors.h);
    // A product of non-negative matrices is non-negative; skip re-validation.
    DataMatrix {
        values: product,
        row_ids: None,
    }
}

/// The joint objective: similarity fit plus `alpha`-weighted data fit plus
/// `gamma`-weighted ridge terms. Always non-negative.
pub fn nsnmf_objective(
    data: &DataMatrix,
    similarity: &SparseSimilarity,
    factors: &FactorPair,
    params: &HyperParams,
) -> Result<f64> {
    let a = data.values();
    let w = &factors.w;
    let h = &factors.h;
    let n = a.nrows();
    if similarity.len() != n || w.nrows() != n || h.ncols() != a.ncols() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: A is {}x{}, S is {}x{}, W is {}x{}, H is {}x{}",
            n,
            a.ncols(),
            similarity.len(),
            similarity.len(),
            w.nrows(),
            w.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }

    // ‖S − WWᵀ‖²_F expanded as ‖S‖² − 2⟨S, WWᵀ⟩ + ‖WᵀW‖²; the expansion never
    // materializes the dense n×n product.
    let s_sq: Vec<f64> = similarity
        .triplets()
        .map(|(_, _, v)| v * v)
        .collect();
    let cross: Vec<f64> = similarity
        .triplets()
        .map(|(i, j, v)| v * w.row(i).dot(&w.row(j)))
        .collect();
    let gram = w.t().dot(w);
    let sim_term =
        pairwise_sum(&s_sq) - 2.0 * pairwise_sum(&cross) + frob_sq(gram.view());

    let residual = a - &w.dot(h);
    let data_term = frob_sq(residual.view());

    let ridge = frob_sq(w.view()) + frob_sq(h.view());

    Ok(sim_term + params.alpha * data_term + params.gamma * ridge)
}

/// Reconstruction-error anomaly scores: the Euclidean distance between each
/// observation and its low-rank reconstruction.
pub fn anomaly_scores(data: &DataMatrix, factors: &FactorPair) -> Result<Vec<f64>> {
    let a = data.values();
    if factors.w.nrows() != a.nrows() || factors.h.ncols() != a.ncols() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: A is {}x{} but W·H is {}x{}",
            a.nrows(),
            a.ncols(),
            factors.w.nrows(),
            factors.h.ncols()
        )));
    }
    let residual = a - &factors.w.dot(&factors.h);
    Ok((0..a.nrows())
        .map(|i| {
            let row = residual.row(i);
            pairwise_sum_by(0, row.len(), |j| row[j] * row[j]).sqrt()
        })
        .collect())
}

/// Rank scores descending and flag the top `n`. Ties break toward the lower
/// row index so reports are deterministic.
pub fn flag_top_n(scores: &[f64], n: usize) -> Result<AnomalyReport> {
    if n > scores.len() {
        return Err(Error::InvalidInput(format!(
            "cannot flag top {n} of {} observations",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores compare")
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0usize; scores.len()];
    let mut flagged = vec![false; scores.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
        flagged[idx] = pos < n;
    }
    Ok(AnomalyReport {
        row_ids: (0..scores.len()).map(|i| i.to_string()).collect(),
        scores: scores.to_vec(),
        ranks,
        flagged,
    })
}
