//! Bayesian adaptive parameter estimation over the Weibull grid.
//!
//! The posterior is a normalized weight per grid cell. After each 2IFC
//! response the weights are multiplied by the likelihood of that response and
//! renormalized. The next separation is the candidate minimizing the expected
//! posterior entropy one trial ahead.
//!
//! For a candidate `x` with cell likelihoods `psi_i = psi_i(x)`, the expected
//! entropy after observing the response is
//!
//! ```text
//! E[H] = H - (h(sum_i w_i psi_i) - sum_i w_i h(psi_i))
//! ```
//!
//! where `h` is the binary entropy. The bracket is the mutual information
//! between the response and the parameters, so only two weighted sums per
//! candidate are needed once `psi_i` and `h(psi_i)` are cached.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psymodel::{weibull_core, CurveSamples, ModelError, ParameterGrid};

/// Unnormalized posterior mass below which an update is refused.
pub const DEGENERATE_MASS: f64 = 1e-300;

/// Expected entropies closer than this (nats) are treated as tied; ties go to
/// the smallest separation.
pub const SELECTION_TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BapeError {
    #[error("posterior mass underflowed ({mass:e}) after update at {separation} mm")]
    DegeneratePosterior { separation: f64, mass: f64 },
    #[error("invalid candidate set: {0}")]
    InvalidCandidates(String),
    #[error("invalid posterior weights: {0}")]
    InvalidWeights(String),
    #[error("separation {0} mm is negative or not finite")]
    InvalidSeparation(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Response outcome of a single 2IFC trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Correct,
    Incorrect,
}

impl From<bool> for Outcome {
    fn from(correct: bool) -> Self {
        if correct {
            Outcome::Correct
        } else {
            Outcome::Incorrect
        }
    }
}

/// The separations the selector may query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CandidateSet {
    separations: Vec<f64>,
}

impl CandidateSet {
    pub fn new(separations: Vec<f64>) -> Result<Self, BapeError> {
        if separations.is_empty() {
            return Err(BapeError::InvalidCandidates("empty".into()));
        }
        if separations.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(BapeError::InvalidCandidates("separations must be positive".into()));
        }
        if separations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BapeError::InvalidCandidates("separations must be strictly increasing".into()));
        }
        Ok(Self { separations })
    }

    pub fn separations(&self) -> &[f64] {
        &self.separations
    }

    pub fn len(&self) -> usize {
        self.separations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.separations.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.separations[0]
    }

    pub fn max(&self) -> f64 {
        self.separations[self.separations.len() - 1]
    }

    /// Index of `x` if it is a member (within 1e-9 mm).
    pub fn index_of(&self, x: f64) -> Option<usize> {
        self.separations.iter().position(|&s| (s - x).abs() < 1e-9)
    }
}

impl Default for CandidateSet {
    fn default() -> Self {
        Self { separations: (1..=18).map(|k| 2.5 * k as f64).collect() }
    }
}

impl TryFrom<Vec<f64>> for CandidateSet {
    type Error = BapeError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<CandidateSet> for Vec<f64> {
    fn from(c: CandidateSet) -> Self {
        c.separations
    }
}

/// Posterior-weighted parameter means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamExpectation {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
}

/// Marginal distributions over each parameter axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub a_values: Vec<f64>,
    pub a_weights: Vec<f64>,
    pub b_values: Vec<f64>,
    pub b_weights: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub gamma_weights: Vec<f64>,
}

/// Pointwise posterior mean curve plus parameter expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Postmean {
    pub params_expectation: ParamExpectation,
    pub curve_samples: CurveSamples,
}

#[inline]
fn likelihood(psi: f64, outcome: Outcome) -> f64 {
    match outcome {
        Outcome::Correct => psi,
        Outcome::Incorrect => 1.0 - psi,
    }
}

/// Binary entropy in nats with `0 ln 0 = 0`.
#[inline]
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Normalized weight field over the parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    grid: Arc<ParameterGrid>,
    weights: Vec<f64>,
    trial_count: usize,
}

impl Posterior {
    pub fn uniform(grid: Arc<ParameterGrid>) -> Self {
        let n = grid.len();
        Self { grid, weights: vec![1.0 / n as f64; n], trial_count: 0 }
    }

    /// Builds a posterior from arbitrary nonnegative weights, normalizing them.
    pub fn from_weights(grid: Arc<ParameterGrid>, weights: Vec<f64>) -> Result<Self, BapeError> {
        if weights.len() != grid.len() {
            return Err(BapeError::InvalidWeights(format!(
                "{} weights for {} cells",
                weights.len(),
                grid.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(BapeError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(BapeError::InvalidWeights("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { grid, weights, trial_count: 0 })
    }

    pub fn point_mass(grid: Arc<ParameterGrid>, cell: usize) -> Self {
        let mut weights = vec![0.0; grid.len()];
        weights[cell] = 1.0;
        Self { grid, weights, trial_count: 0 }
    }

    pub fn grid(&self) -> &Arc<ParameterGrid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn trial_count(&self) -> usize {
        self.trial_count
    }

    /// Bayes update for a response at separation `x`, evaluating every cell's
    /// likelihood directly.
    pub fn update(&self, x: f64, outcome: Outcome) -> Result<Posterior, BapeError> {
        if !(x.is_finite() && x >= 0.0) {
            return Err(BapeError::InvalidSeparation(x));
        }
        let grid = &self.grid;
        let delta = grid.delta();
        let nb = grid.b_values().len();
        let ng = grid.gamma_values().len();
        let mut psi = Vec::with_capacity(grid.len());
        for &a in grid.a_values() {
            for &b in grid.b_values() {
                let core = weibull_core(a, b, x);
                psi.extend(grid.gamma_values().iter().map(|&g| g + (1.0 - delta - g) * core));
            }
        }
        debug_assert_eq!(psi.len(), grid.a_values().len() * nb * ng);
        self.apply_likelihoods(&psi, x, outcome)
    }

    fn apply_likelihoods(&self, psi: &[f64], x: f64, outcome: Outcome) -> Result<Posterior, BapeError> {
        let mut weights: Vec<f64> = self
            .weights
            .iter()
            .zip(psi)
            .map(|(&w, &p)| w * likelihood(p, outcome))
            .collect();
        let mass: f64 = weights.iter().sum();
        if !(mass >= DEGENERATE_MASS) {
            return Err(BapeError::DegeneratePosterior { separation: x, mass });
        }
        for w in &mut weights {
            *w /= mass;
        }
        Ok(Posterior { grid: Arc::clone(&self.grid), weights, trial_count: self.trial_count + 1 })
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.weights.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
    }

    // Per (a, b) pair: sum_g w * gamma and sum_g w * (1 - delta - gamma).
    fn gamma_moments(&self) -> Vec<(f64, f64)> {
        let delta = self.grid.delta();
        let gammas = self.grid.gamma_values();
        self.weights
            .chunks_exact(gammas.len())
            .map(|ws| {
                ws.iter().zip(gammas).fold((0.0, 0.0), |(lo, span), (&w, &g)| {
                    (lo + w * g, span + w * (1.0 - delta - g))
                })
            })
            .collect()
    }

    fn mean_curve_at(&self, moments: &[(f64, f64)], x: f64) -> f64 {
        let nb = self.grid.b_values().len();
        let mut acc = 0.0;
        for (ia, &a) in self.grid.a_values().iter().enumerate() {
            for (ib, &b) in self.grid.b_values().iter().enumerate() {
                let (lo, span) = moments[ia * nb + ib];
                acc += lo + span * weibull_core(a, b, x);
            }
        }
        acc
    }

    /// Posterior predictive probability of a correct response at `x`.
    pub fn predict_correct(&self, x: f64) -> f64 {
        self.mean_curve_at(&self.gamma_moments(), x)
    }

    pub fn expected_params(&self) -> ParamExpectation {
        let m = self.marginals();
        let dot = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        ParamExpectation {
            a: dot(&m.a_values, &m.a_weights),
            b: dot(&m.b_values, &m.b_weights),
            gamma: dot(&m.gamma_values, &m.gamma_weights),
        }
    }

    pub fn marginals(&self) -> Marginals {
        let g = &self.grid;
        let (na, nb, ng) = (g.a_values().len(), g.b_values().len(), g.gamma_values().len());
        let mut a_w = vec![0.0; na];
        let mut b_w = vec![0.0; nb];
        let mut g_w = vec![0.0; ng];
        for (i, &w) in self.weights.iter().enumerate() {
            let (ia, ib, ig) = g.unflatten(i);
            a_w[ia] += w;
            b_w[ib] += w;
            g_w[ig] += w;
        }
        Marginals {
            a_values: g.a_values().to_vec(),
            a_weights: a_w,
            b_values: g.b_values().to_vec(),
            b_weights: b_w,
            gamma_values: g.gamma_values().to_vec(),
            gamma_weights: g_w,
        }
    }

    /// Pointwise posterior mean of the candidate curves on `x_grid`.
    pub fn postmean_curve(&self, x_grid: &[f64]) -> Result<Postmean, BapeError> {
        let moments = self.gamma_moments();
        let ys = x_grid.iter().map(|&x| self.mean_curve_at(&moments, x).clamp(0.0, 1.0)).collect();
        Ok(Postmean {
            params_expectation: self.expected_params(),
            curve_samples: CurveSamples::new(x_grid.to_vec(), ys, None)?,
        })
    }
}

/// Cached `psi_i(x)` and `h(psi_i(x))` for every (candidate, cell) pair.
#[derive(Debug, Clone)]
pub struct LikelihoodTable {
    cells: usize,
    psi: Vec<f64>,
    cell_entropy: Vec<f64>,
}

impl LikelihoodTable {
    pub fn new(grid: &ParameterGrid, candidates: &CandidateSet) -> Self {
        let cells = grid.len();
        let delta = grid.delta();
        let mut psi = Vec::with_capacity(cells * candidates.len());
        for &x in candidates.separations() {
            for &a in grid.a_values() {
                for &b in grid.b_values() {
                    let core = weibull_core(a, b, x);
                    psi.extend(grid.gamma_values().iter().map(|&g| g + (1.0 - delta - g) * core));
                }
            }
        }
        let cell_entropy = psi.iter().map(|&p| binary_entropy(p)).collect();
        Self { cells, psi, cell_entropy }
    }

    pub fn psi(&self, candidate: usize) -> &[f64] {
        &self.psi[candidate * self.cells..(candidate + 1) * self.cells]
    }

    pub fn cell_entropy(&self, candidate: usize) -> &[f64] {
        &self.cell_entropy[candidate * self.cells..(candidate + 1) * self.cells]
    }
}

/// Outcome of a lookahead over all candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub separation: f64,
    pub entropy: f64,
    pub expected_entropy: f64,
    pub expected_entropies: Vec<f64>,
}

/// Grid, candidate set and likelihood cache for one experiment design.
///
/// Shared read-only between sessions that use the same design.
#[derive(Debug, Clone)]
pub struct Bape {
    grid: Arc<ParameterGrid>,
    candidates: CandidateSet,
    table: LikelihoodTable,
}

impl Bape {
    pub fn new(grid: Arc<ParameterGrid>, candidates: CandidateSet) -> Self {
        let table = LikelihoodTable::new(&grid, &candidates);
        Self { grid, candidates, table }
    }

    pub fn grid(&self) -> &Arc<ParameterGrid> {
        &self.grid
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    pub fn table(&self) -> &LikelihoodTable {
        &self.table
    }

    pub fn uniform_posterior(&self) -> Posterior {
        Posterior::uniform(Arc::clone(&self.grid))
    }

    /// Bayes update, using the cache when `x` is a candidate. Bit-identical to
    /// [`Posterior::update`].
    pub fn update(&self, posterior: &Posterior, x: f64, outcome: Outcome) -> Result<Posterior, BapeError> {
        match self.candidates.index_of(x) {
            Some(i) if self.candidates.separations()[i] == x => {
                posterior.apply_likelihoods(self.table.psi(i), x, outcome)
            }
            _ => posterior.update(x, outcome),
        }
    }

    /// Expected posterior entropy after querying each candidate.
    pub fn expected_entropies(&self, posterior: &Posterior) -> Vec<f64> {
        let entropy = posterior.entropy();
        let w = posterior.weights();
        (0..self.candidates.len())
            .map(|c| {
                let (p_correct, mean_cell_entropy) = self
                    .table
                    .psi(c)
                    .iter()
                    .zip(self.table.cell_entropy(c))
                    .zip(w)
                    .fold((0.0, 0.0), |(p, h), ((&psi, &hc), &wi)| (p + wi * psi, h + wi * hc));
                let information = binary_entropy(p_correct.clamp(0.0, 1.0)) - mean_cell_entropy;
                entropy - information
            })
            .collect()
    }

    /// Greedy one-step expected-entropy minimization.
    pub fn select_next(&self, posterior: &Posterior) -> Selection {
        let expected = self.expected_entropies(posterior);
        let index = argmin_with_ties(&expected);
        Selection {
            index,
            separation: self.candidates.separations()[index],
            entropy: posterior.entropy(),
            expected_entropy: expected[index],
            expected_entropies: expected,
        }
    }
}

/// Index of the smallest value; among values within
/// [`SELECTION_TIE_TOLERANCE`] of the minimum, the earliest index wins.
pub fn argmin_with_ties(values: &[f64]) -> usize {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    values.iter().position(|&v| v <= min + SELECTION_TIE_TOLERANCE).unwrap_or(0)
}

/// One-off selection without a shared cache.
pub fn select_next(posterior: &Posterior, candidates: &CandidateSet) -> Selection {
    Bape::new(Arc::clone(posterior.grid()), candidates.clone()).select_next(posterior)
}
