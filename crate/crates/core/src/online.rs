//! Online solver: incremental factorization over a stream.
//!
//! The stream state keeps a ring buffer of the most recent `z` observations
//! and their weight rows, the current basis `H`, and two cumulative sums
//! `U = Σ wᵢᵀwᵢ` (K×K) and `V = Σ wᵢᵀaᵢ` (K×p); memory therefore stays
//! O(z·p + K·p + K²) no matter how long the stream runs. The first `z`
//! arrivals fill the buffer, arrival `z` bootstraps the state with one
//! offline fit over the buffer, and every later arrival gets a weight row
//! from multiplicative updates against a buffer-local tree similarity, an
//! anomaly score, and a slot in the buffer.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::local_mst_similarity;
use crate::model::{flag_top_n, DataMatrix, HyperParams};
use crate::offline::{fit_offline, SgdSchedule};

/// Floor applied to multiplicative-update denominators so a zero entry never
/// divides.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Where the stream currently is: filling the buffer, just bootstrapped, or
/// scoring arrivals one by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OnlinePhase {
    Filling,
    Bootstrap,
    Streaming,
}

/// Settings for the online detector.
#[derive(Debug, Clone)]
pub struct OnlineConfig {
    /// Shared hyperparameters; `buffer` is the window size z.
    pub hyper: HyperParams,
    /// Schedule for the offline fit that bootstraps the state at d = z.
    pub bootstrap: SgdSchedule,
    /// Stop the per-arrival update loop when the weight row moves less than
    /// this (relative).
    pub inner_tol: f64,
    /// Cap on per-arrival update iterations.
    pub inner_max: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            bootstrap: SgdSchedule::default(),
            inner_tol: 1e-4,
            inner_max: 100,
            seed: 0,
        }
    }
}

/// One multiplicative update of the newest observation's weight row:
/// numerator `α·a·Hᵀ + Σᵢ s_d[i]·wᵢ`, denominator `α·w·H·Hᵀ + D_dd·w`,
/// entrywise ratio times the current row.
pub fn update_weight_row(
    w_d: &Array1<f64>,
    a_d: &Array1<f64>,
    s_d: &[f64],
    buffer_w: &[Array1<f64>],
    h: &Array2<f64>,
    alpha: f64,
    degree: f64,
) -> Array1<f64> {
    let k = w_d.len();
    let mut numerator = h.dot(a_d) * alpha;
    for (s, w_i) in s_d.iter().zip(buffer_w) {
        if *s != 0.0 {
            numerator.scaled_add(*s, w_i);
        }
    }
    let hh = h.dot(&h.t());
    let denominator = hh.dot(w_d) * alpha + &(w_d * degree);
    let mut out = Array1::zeros(k);
    for idx in 0..k {
        out[idx] = w_d[idx] * numerator[idx] / denominator[idx].max(DENOMINATOR_FLOOR);
    }
    out
}

/// One multiplicative update of the basis from the cumulative sums:
/// `H_{kj} ← H_{kj} · V_{kj} / (U·H)_{kj}`.
pub fn update_basis(h: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let uh = u.dot(h);
    let mut out = h.clone();
    for ((k, j), entry) in out.indexed_iter_mut() {
        *entry *= v[[k, j]] / uh[[k, j]].max(DENOMINATOR_FLOOR);
    }
    out
}

/// Rank-1 updates of the cumulative sums with a committed weight row.
pub fn accumulate(u: &mut Array2<f64>, v: &mut Array2<f64>, w_d: &Array1<f64>, a_d: &Array1<f64>) {
    for r in 0..w_d.len() {
        let wr = w_d[r];
        for c in 0..w_d.len() {
            u[[r, c]] += wr * w_d[c];
        }
        for c in 0..a_d.len() {
            v[[r, c]] += wr * a_d[c];
        }
    }
}

/// Reconstruction-error score of one observation against the current basis.
pub fn online_score(a_d: &Array1<f64>, w_d: &Array1<f64>, h: &Array2<f64>) -> f64 {
    let recon = w_d.dot(h);
    let mut sq = 0.0;
    for j in 0..a_d.len() {
        let diff = a_d[j] - recon[j];
        sq += diff * diff;
    }
    sq.sqrt()
}

/// Stream state; one writer, strictly serialized ingests.
#[derive(Debug, Clone)]
pub struct StreamState {
    config: OnlineConfig,
    dim: Option<usize>,
    basis: Array2<f64>,
    cum_gram: Array2<f64>,
    cum_cross: Array2<f64>,
    buffer_a: VecDeque<Array1<f64>>,
    buffer_w: VecDeque<Array1<f64>>,
    seen: usize,
    rng: ChaCha8Rng,
}

impl StreamState {
    pub fn new(config: OnlineConfig) -> Result<Self> {
        config.hyper.validate()?;
        config.bootstrap.validate()?;
        if !(config.inner_tol >= 0.0) || config.inner_max == 0 {
            return Err(Error::InvalidInput(
                "inner_tol must be non-negative and inner_max positive".into(),
            ));
        }
        let k = config.hyper.k;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            dim: None,
            basis: Array2::zeros((k, 0)),
            cum_gram: Array2::zeros((k, k)),
            cum_cross: Array2::zeros((k, 0)),
            buffer_a: VecDeque::new(),
            buffer_w: VecDeque::new(),
            seen: 0,
            rng,
        })
    }

    pub fn phase(&self) -> OnlinePhase {
        let z = self.config.hyper.buffer;
        if self.seen < z {
            OnlinePhase::Filling
        } else if self.seen == z {
            OnlinePhase::Bootstrap
        } else {
            OnlinePhase::Streaming
        }
    }

    pub fn observations_seen(&self) -> usize {
        self.seen
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    /// Cumulative `U = Σ wᵢᵀwᵢ`.
    pub fn cumulative_gram(&self) -> &Array2<f64> {
        &self.cum_gram
    }

    /// Cumulative `V = Σ wᵢᵀaᵢ`.
    pub fn cumulative_cross(&self) -> &Array2<f64> {
        &self.cum_cross
    }

    /// Weight rows currently buffered, oldest first.
    pub fn buffer_weights(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.buffer_w.iter()
    }

    /// Observation rows currently buffered, oldest first.
    pub fn buffer_observations(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.buffer_a.iter()
    }

    /// Number of f64 values held by the state; bounded regardless of stream
    /// length.
    pub fn state_float_count(&self) -> usize {
        self.buffer_a.iter().map(Array1::len).sum::<usize>()
            + self.buffer_w.iter().map(Array1::len).sum::<usize>()
            + self.basis.len()
            + self.cum_gram.len()
            + self.cum_cross.len()
    }

    fn validate_row(&mut self, row: &[f64]) -> Result<Array1<f64>> {
        match self.dim {
            None => {
                if row.is_empty() {
                    return Err(Error::InvalidInput("empty observation".into()));
                }
                self.dim = Some(row.len());
            }
            Some(p) if p != row.len() => {
                return Err(Error::InvalidInput(format!(
                    "observation has {} attributes, stream expects {p}",
                    row.len()
                )));
            }
            _ => {}
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "observations must be non-negative and finite".into(),
            ));
        }
        Ok(Array1::from_vec(row.to_vec()))
    }

    fn bootstrap(&mut self) -> Result<()> {
        let p = self.dim.expect("dimension fixed by first ingest");
        let k = self.config.hyper.k;
        let rows: Vec<Vec<f64>> = self.buffer_a.iter().map(|r| r.to_vec()).collect();
        let data = DataMatrix::from_rows(&rows)?;
        let mst = crate::graph::mst_of_points(&data)?;
        let similarity = crate::graph::similarity_from_mst(&mst);
        let params = HyperParams {
            blocks: 1,
            top_n: 1,
            ..self.config.hyper.clone()
        };
        let schedule = SgdSchedule {
            seed: self.rng.random(),
            ..self.config.bootstrap.clone()
        };
        let fitted = fit_offline(&data, &similarity, &params, &schedule)?;
        self.basis = fitted.basis().clone();
        self.cum_gram = Array2::zeros((k, k));
        self.cum_cross = Array2::zeros((k, p));
        for (idx, a_row) in self.buffer_a.iter().enumerate() {
            let w_row = fitted.weights().row(idx).to_owned();
            accumulate(&mut self.cum_gram, &mut self.cum_cross, &w_row, a_row);
            self.buffer_w[idx] = w_row;
        }
        Ok(())
    }

    fn stream_step(&mut self, a_d: Array1<f64>) -> Result<f64> {
        let z = self.config.hyper.buffer;
        let alpha = self.config.hyper.alpha;
        let k = self.config.hyper.k;

        // Buffer-local tree similarity of the newcomer (appended last).
        let mut rows: Vec<Vec<f64>> = self.buffer_a.iter().map(|r| r.to_vec()).collect();
        rows.push(a_d.to_vec());
        let window = DataMatrix::from_rows(&rows)?;
        let s_full = local_mst_similarity(&window, z)?;
        let s_d = &s_full[..z];
        let degree: f64 = s_d.iter().sum();

        let buffer_w: Vec<Array1<f64>> = self.buffer_w.iter().cloned().collect();
        // Warm-start from the previous observation's committed row; a random
        // restart would leave each score at the mercy of the inner tolerance.
        let mut w_d: Array1<f64> = self
            .buffer_w
            .back()
            .cloned()
            .unwrap_or_else(|| Array1::from_shape_fn(k, |_| self.rng.random::<f64>()));

        for _ in 0..self.config.inner_max {
            let w_next = update_weight_row(&w_d, &a_d, s_d, &buffer_w, &self.basis, alpha, degree);
            // Tentative cumulative sums with the current iterate drive the
            // basis update; the commit below uses only the converged row.
            let mut u_t = self.cum_gram.clone();
            let mut v_t = self.cum_cross.clone();
            accumulate(&mut u_t, &mut v_t, &w_next, &a_d);
            self.basis = update_basis(&self.basis, &u_t, &v_t);

            let delta = (&w_next - &w_d).mapv(f64::abs).sum();
            let scale = w_d.mapv(f64::abs).sum().max(DENOMINATOR_FLOOR);
            w_d = w_next;
            if delta / scale < self.config.inner_tol {
                break;
            }
        }
        if w_d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "weight row diverged at observation {}",
                self.seen
            )));
        }

        accumulate(&mut self.cum_gram, &mut self.cum_cross, &w_d, &a_d);
        let score = online_score(&a_d, &w_d, &self.basis);
        self.buffer_a.push_back(a_d);
        self.buffer_w.push_back(w_d);
        self.buffer_a.pop_front();
        self.buffer_w.pop_front();
        Ok(score)
    }

    /// Feed one observation. The first `z` arrivals fill the buffer (the
    /// z-th also bootstraps the state) and return `None`; every later
    /// arrival returns its anomaly score.
    pub fn ingest(&mut self, row: &[f64]) -> Result<Option<f64>> {
        let a_d = self.validate_row(row)?;
        let z = self.config.hyper.buffer;
        self.seen += 1;

        if self.seen <= z {
            let k = self.config.hyper.k;
            let w_d: Array1<f64> = Array1::from_shape_fn(k, |_| self.rng.random::<f64>());
            self.buffer_a.push_back(a_d);
            self.buffer_w.push_back(w_d);
            if self.seen == z {
                self.bootstrap()?;
            }
            return Ok(None);
        }
        self.stream_step(a_d).map(Some)
    }
}

/// Run a whole matrix through the stream in row order; `None` for the
/// buffered prefix.
pub fn score_stream(data: &DataMatrix, config: &OnlineConfig) -> Result<Vec<Option<f64>>> {
    let mut state = StreamState::new(config.clone())?;
    let mut out = Vec::with_capacity(data.nrows());
    for i in 0..data.nrows() {
        let row: Vec<f64> = data.values().row(i).to_vec();
        out.push(state.ingest(&row)?);
    }
    Ok(out)
}

/// Running-quantile threshold for flagging scores on the fly.
#[derive(Debug, Clone)]
pub struct LiveThreshold {
    quantile: f64,
    window: usize,
    warmup: usize,
    recent: VecDeque<f64>,
}

impl LiveThreshold {
    pub fn new(quantile: f64, window: usize) -> Result<Self> {
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(Error::InvalidInput(format!(
                "quantile must lie in (0, 1), got {quantile}"
            )));
        }
        if window < 2 {
            return Err(Error::InvalidInput("window must be at least 2".into()));
        }
        Ok(Self {
            quantile,
            window,
            warmup: 30.min(window),
            recent: VecDeque::new(),
        })
    }

    /// Flag the score against the quantile of previously seen scores, then
    /// absorb it into the window. Nothing is flagged during warm-up.
    pub fn observe(&mut self, score: f64) -> bool {
        let flagged = if self.recent.len() >= self.warmup {
            let mut sorted: Vec<f64> = self.recent.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let idx = ((sorted.len() as f64 - 1.0) * self.quantile).ceil() as usize;
            score > sorted[idx.min(sorted.len() - 1)]
        } else {
            false
        };
        self.recent.push_back(score);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        flagged
    }
}

/// How stream scores turn into flags.
#[derive(Debug, Clone)]
pub enum ThresholdMode {
    /// Collect all scores, then flag the global top N.
    Batch { top_n: usize },
    /// Flag on the fly against a running quantile threshold.
    Live { quantile: f64, window: usize },
}

/// Apply a flagging policy to a finished score sequence.
pub fn threshold_decider(scores: &[f64], mode: &ThresholdMode) -> Result<Vec<bool>> {
    match mode {
        ThresholdMode::Batch { top_n } => Ok(flag_top_n(scores, *top_n)?.flagged().to_vec()),
        ThresholdMode::Live { quantile, window } => {
            let mut threshold = LiveThreshold::new(*quantile, *window)?;
            Ok(scores.iter().map(|&s| threshold.observe(s)).collect())
        }
    }
}
