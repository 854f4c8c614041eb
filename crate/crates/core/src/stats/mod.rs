//! Exact binomial test, Student/Welch t-tests, Bonferroni correction and the
//! per-session bias guard.

pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::TrialRecord;
use special::{ln_choose, student_t_two_sided};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Relative slack when deciding whether an outcome is "as extreme" as the
/// observed one.
const BINOMIAL_REL_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("binomial test needs 0 <= k <= n and n >= 1 (got k = {k}, n = {n})")]
    InvalidCounts { k: u64, n: u64 },
    #[error("null probability {0} must be in (0, 1)")]
    InvalidProbability(f64),
    #[error("t-test needs at least 2 samples per group (got {0})")]
    TooFewSamples(usize),
    #[error("samples contain non-finite values")]
    NonFinite,
}

/// Exact two-sided binomial test: total probability of every outcome no more
/// likely than the observed `k`.
pub fn binomial_test(k: u64, n: u64, p0: f64) -> Result<f64, StatsError> {
    if n == 0 || k > n {
        return Err(StatsError::InvalidCounts { k, n });
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(StatsError::InvalidProbability(p0));
    }
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let ln_pmf = |i: u64| ln_choose(n, i) + (i as f64 * lp + (n - i) as f64 * lq);
    let cutoff = ln_pmf(k) + BINOMIAL_REL_TOL.ln_1p();
    let mut p = 0.0;
    let mut all = true;
    for i in 0..=n {
        let l = ln_pmf(i);
        if l <= cutoff {
            p += l.exp();
        } else {
            all = false;
        }
    }
    if all {
        return Ok(1.0);
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Result of a t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Zero variance with a nonzero effect: `t` is infinite and `p = 0`.
    pub degenerate: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn finalize_t(effect: f64, se2: f64, df: f64) -> TTest {
    if se2 == 0.0 {
        return if effect == 0.0 {
            TTest { t: 0.0, df, p: 1.0, degenerate: false }
        } else {
            TTest { t: effect.signum() * f64::INFINITY, df, p: 0.0, degenerate: true }
        };
    }
    let t = effect / se2.sqrt();
    TTest { t, df, p: student_t_two_sided(t, df), degenerate: false }
}

pub fn t_test_one_sample(samples: &[f64], mu0: f64) -> Result<TTest, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples(samples.len()));
    }
    if samples.iter().any(|x| !x.is_finite()) || !mu0.is_finite() {
        return Err(StatsError::NonFinite);
    }
    let n = samples.len() as f64;
    let (mean, var) = mean_var(samples);
    Ok(finalize_t(mean - mu0, var / n, n - 1.0))
}

/// Welch's unequal-variance two-sample t-test.
pub fn t_test_two_sample(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFewSamples(s.len()));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let df = if se2 > 0.0 {
        se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    Ok(finalize_t(ma - mb, se2, df))
}

/// Multiplies each p-value by the number of comparisons, capped at 1.
pub fn bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len() as f64;
    p_values.iter().map(|p| (p * m).min(1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BiasFlag {
    SideBias,
    RtAnomaly,
}

/// Response tallies for the two options of a task. For VT-2PD the first
/// option is "side A first"; for VT-2POD it is "horizontal".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SideCounts {
    pub first: u64,
    pub second: u64,
}

/// Per-separation response breakdown for visual inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub separation_mm: f64,
    pub trials: u64,
    pub first_responses: u64,
    pub second_responses: u64,
    pub accuracy_target_first: Option<f64>,
    pub accuracy_target_second: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub alpha: f64,
    pub side_counts: SideCounts,
    pub binomial_p: f64,
    pub rt_test_p: f64,
    pub rt_test: Option<TTest>,
    pub per_separation_table: Vec<SeparationRow>,
    pub flags: Vec<BiasFlag>,
    pub excluded: bool,
}

impl BiasReport {
    pub fn empty(alpha: f64) -> Self {
        Self {
            alpha,
            side_counts: SideCounts::default(),
            binomial_p: 1.0,
            rt_test_p: 1.0,
            rt_test: None,
            per_separation_table: Vec::new(),
            flags: Vec::new(),
            excluded: false,
        }
    }
}

/// Binomial side test, response-time t-test split by responded side, and the
/// per-separation inspection table.
pub fn run_bias_guard(trials: &[TrialRecord], alpha: f64) -> BiasReport {
    if trials.is_empty() {
        return BiasReport::empty(alpha);
    }
    let mut counts = SideCounts::default();
    let mut rt_first = Vec::new();
    let mut rt_second = Vec::new();
    for t in trials {
        if t.response.is_first_option() {
            counts.first += 1;
            rt_first.push(t.response_time_ms);
        } else {
            counts.second += 1;
            rt_second.push(t.response_time_ms);
        }
    }
    let n = counts.first + counts.second;
    let binomial_p = binomial_test(counts.first, n, 0.5).expect("counts are consistent");
    let rt_test = t_test_two_sample(&rt_first, &rt_second).ok();
    let rt_test_p = rt_test.map_or(1.0, |t| t.p);

    let mut flags = Vec::new();
    if binomial_p < alpha {
        flags.push(BiasFlag::SideBias);
    }
    if rt_test_p < alpha {
        flags.push(BiasFlag::RtAnomaly);
    }
    BiasReport {
        alpha,
        side_counts: counts,
        binomial_p,
        rt_test_p,
        rt_test,
        per_separation_table: separation_table(trials),
        excluded: !flags.is_empty(),
        flags,
    }
}

fn separation_table(trials: &[TrialRecord]) -> Vec<SeparationRow> {
    let mut seps: Vec<f64> = trials.iter().map(|t| t.separation_mm).collect();
    seps.sort_by(f64::total_cmp);
    seps.dedup();
    seps.into_iter()
        .map(|sep| {
            let here: Vec<&TrialRecord> = trials.iter().filter(|t| t.separation_mm == sep).collect();
            let first = here.iter().filter(|t| t.response.is_first_option()).count() as u64;
            let accuracy = |target_first: bool| {
                let group: Vec<_> =
                    here.iter().filter(|t| t.target.is_first_option() == target_first).collect();
                (!group.is_empty())
                    .then(|| group.iter().filter(|t| t.correct).count() as f64 / group.len() as f64)
            };
            SeparationRow {
                separation_mm: sep,
                trials: here.len() as u64,
                first_responses: first,
                second_responses: here.len() as u64 - first,
                accuracy_target_first: accuracy(true),
                accuracy_target_second: accuracy(false),
            }
        })
        .collect()
}
