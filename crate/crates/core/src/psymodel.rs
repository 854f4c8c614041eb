//! Weibull psychometric functions, the discrete parameter grid, and sampled
//! curves.
//!
//! A psychometric function maps a stimulus separation `x` (millimeters) to the
//! probability of a correct 2IFC response:
//!
//! ```text
//! psi(x) = gamma + (1 - delta - gamma) * (1 - 2^(-(x / a)^b))
//! ```
//!
//! `gamma` is the guess rate (lower asymptote), `1 - delta` the upper
//! asymptote, `a` the separation at which the curve is halfway between the
//! two, and `b` the slope.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spacing between recognition-rate samples of exported curves.
pub const EXPORT_STEP_MM: f64 = 0.1;
/// Upper end of the exported curve range.
pub const EXPORT_MAX_MM: f64 = 45.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid Weibull parameters: {0}")]
    InvalidParams(String),
    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),
    #[error("invalid curve samples: {0}")]
    InvalidCurve(String),
    #[error("curve is not monotone nondecreasing at x = {x} mm")]
    NonMonotone { x: f64 },
    #[error("level {0} outside (0, 1)")]
    InvalidLevel(f64),
}

/// One candidate psychometric function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct WeibullParams {
    a: f64,
    b: f64,
    gamma: f64,
    delta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    a: f64,
    b: f64,
    gamma: f64,
    delta: f64,
}

impl TryFrom<RawParams> for WeibullParams {
    type Error = ModelError;

    fn try_from(r: RawParams) -> Result<Self, Self::Error> {
        Self::new(r.a, r.b, r.gamma, r.delta)
    }
}

impl WeibullParams {
    /// Validates `a > 0`, `b > 0`, `0 < gamma < 1` and `0 <= delta < 1`.
    ///
    /// `gamma + delta >= 1` is admitted: the default guess-rate axis runs up
    /// to 0.99 with a lapse of 0.02, so its top columns describe curves that
    /// fall from `gamma` toward `1 - delta`.
    pub fn new(a: f64, b: f64, gamma: f64, delta: f64) -> Result<Self, ModelError> {
        if !(a.is_finite() && a > 0.0) {
            return Err(ModelError::InvalidParams(format!("threshold a = {a} must be > 0")));
        }
        if !(b.is_finite() && b > 0.0) {
            return Err(ModelError::InvalidParams(format!("slope b = {b} must be > 0")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(ModelError::InvalidParams(format!("guess rate {gamma} must be in (0, 1)")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(ModelError::InvalidParams(format!("lapse {delta} must be in [0, 1)")));
        }
        Ok(Self { a, b, gamma, delta })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Upper asymptote `1 - delta`.
    pub fn ceiling(&self) -> f64 {
        1.0 - self.delta
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_weibull(self.a, self.b, self.gamma, self.delta, x)
    }

    /// Smallest `x` in `[0, x_max]` with `psi(x) >= level`.
    pub fn invert(&self, level: f64, x_max: f64) -> Result<Threshold, ModelError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(ModelError::InvalidLevel(level));
        }
        if level <= self.gamma {
            return Ok(Threshold::Reached(0.0));
        }
        let ceiling = self.ceiling();
        if level >= ceiling {
            return Ok(Threshold::NotReached);
        }
        let x = self.a * weibull_log_ratio(self.gamma, self.delta, level).powf(1.0 / self.b);
        if x <= x_max {
            Ok(Threshold::Reached(x))
        } else {
            Ok(Threshold::NotReached)
        }
    }

    /// Samples the curve on `[0, 45]` mm at the export spacing.
    pub fn sample(&self) -> CurveSamples {
        let xs = export_grid();
        let ys = xs.iter().map(|&x| self.eval(x)).collect();
        CurveSamples { x_values: xs, y_values: ys, se_values: None }
    }
}

/// The sigmoid core `1 - 2^(-(x/a)^b)` shared by every guess rate.
#[inline]
pub fn weibull_core(a: f64, b: f64, x: f64) -> f64 {
    1.0 - (-(x / a).powf(b)).exp2()
}

/// Evaluates the Weibull psychometric function for raw parameters.
#[inline]
pub fn eval_weibull(a: f64, b: f64, gamma: f64, delta: f64, x: f64) -> f64 {
    gamma + (1.0 - delta - gamma) * weibull_core(a, b, x)
}

// log2((1 - delta - gamma) / (1 - delta - level)), the value of (x/a)^b at which
// the curve reaches `level`.
fn weibull_log_ratio(gamma: f64, delta: f64, level: f64) -> f64 {
    let span = 1.0 - delta - gamma;
    (span / (span - (level - gamma))).log2()
}

/// Result of inverting a curve at a recognition-rate level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "status", content = "separation_mm")]
pub enum Threshold {
    Reached(f64),
    NotReached,
}

impl Threshold {
    pub fn separation(&self) -> Option<f64> {
        match self {
            Threshold::Reached(x) => Some(*x),
            Threshold::NotReached => None,
        }
    }

    pub fn is_reached(&self) -> bool {
        matches!(self, Threshold::Reached(_))
    }
}

/// How the slope axis is spaced between its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

/// Bounds and point counts for the parameter grid. Counts include both
/// endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub a_min: f64,
    pub a_max: f64,
    pub a_count: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub b_count: usize,
    pub b_spacing: Spacing,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_count: usize,
    pub delta: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            a_min: 2.5,
            a_max: 45.0,
            a_count: 18,
            b_min: 0.01,
            b_max: 10.0,
            b_count: 50,
            b_spacing: Spacing::Linear,
            gamma_min: 0.01,
            gamma_max: 0.99,
            gamma_count: 100,
            delta: 0.02,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let axis = |name: &str, lo: f64, hi: f64, n: usize| -> Result<(), ModelError> {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0) {
                return Err(ModelError::InvalidGrid(format!("{name} bounds must be positive")));
            }
            if lo >= hi {
                return Err(ModelError::InvalidGrid(format!("{name} lower bound {lo} >= upper {hi}")));
            }
            if n < 2 {
                return Err(ModelError::InvalidGrid(format!("{name} count {n} < 2")));
            }
            Ok(())
        };
        axis("a", self.a_min, self.a_max, self.a_count)?;
        axis("b", self.b_min, self.b_max, self.b_count)?;
        axis("gamma", self.gamma_min, self.gamma_max, self.gamma_count)?;
        if self.gamma_max >= 1.0 {
            return Err(ModelError::InvalidGrid(format!(
                "gamma upper bound {} must be < 1",
                self.gamma_max
            )));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(ModelError::InvalidGrid(format!("delta {} must be in [0, 1)", self.delta)));
        }
        Ok(())
    }
}

/// The discrete set of candidate psychometric functions.
///
/// Cells are laid out threshold-major: `index = (ia * |b| + ib) * |gamma| + ig`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    a_values: Vec<f64>,
    b_values: Vec<f64>,
    gamma_values: Vec<f64>,
    delta: f64,
}

impl ParameterGrid {
    pub fn a_values(&self) -> &[f64] {
        &self.a_values
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b_values
    }

    pub fn gamma_values(&self) -> &[f64] {
        &self.gamma_values
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.a_values.len() * self.b_values.len() * self.gamma_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits a flat cell index into `(ia, ib, ig)`.
    #[inline]
    pub fn unflatten(&self, index: usize) -> (usize, usize, usize) {
        let ng = self.gamma_values.len();
        let nb = self.b_values.len();
        (index / (nb * ng), (index / ng) % nb, index % ng)
    }

    #[inline]
    pub fn flatten(&self, ia: usize, ib: usize, ig: usize) -> usize {
        (ia * self.b_values.len() + ib) * self.gamma_values.len() + ig
    }

    pub fn cell(&self, index: usize) -> WeibullParams {
        let (ia, ib, ig) = self.unflatten(index);
        WeibullParams {
            a: self.a_values[ia],
            b: self.b_values[ib],
            gamma: self.gamma_values[ig],
            delta: self.delta,
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = WeibullParams> + '_ {
        (0..self.len()).map(|i| self.cell(i))
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / last })
        .collect()
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => (llo + (lhi - llo) * i as f64 / last).exp(),
        })
        .collect()
}

pub fn build_grid(config: &GridConfig) -> Result<ParameterGrid, ModelError> {
    config.validate()?;
    let b_values = match config.b_spacing {
        Spacing::Linear => linspace(config.b_min, config.b_max, config.b_count),
        Spacing::Log => logspace(config.b_min, config.b_max, config.b_count),
    };
    Ok(ParameterGrid {
        a_values: linspace(config.a_min, config.a_max, config.a_count),
        b_values,
        gamma_values: linspace(config.gamma_min, config.gamma_max, config.gamma_count),
        delta: config.delta,
    })
}

/// `[0, 45]` mm in 0.1 mm steps (451 points).
pub fn export_grid() -> Vec<f64> {
    let per_mm = (1.0 / EXPORT_STEP_MM).round();
    let n = (EXPORT_MAX_MM * per_mm).round() as usize;
    (0..=n).map(|i| i as f64 / per_mm).collect()
}

/// A curve evaluated on a fixed separation grid, optionally with standard
/// errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSamples {
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_values: Option<Vec<f64>>,
}

impl CurveSamples {
    pub fn new(x_values: Vec<f64>, y_values: Vec<f64>, se_values: Option<Vec<f64>>) -> Result<Self, ModelError> {
        if x_values.is_empty() {
            return Err(ModelError::InvalidCurve("no samples".into()));
        }
        if x_values.len() != y_values.len() {
            return Err(ModelError::InvalidCurve(format!(
                "{} x values but {} y values",
                x_values.len(),
                y_values.len()
            )));
        }
        if let Some(se) = &se_values {
            if se.len() != x_values.len() {
                return Err(ModelError::InvalidCurve("standard-error length mismatch".into()));
            }
        }
        if x_values.iter().any(|x| !x.is_finite()) || x_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::InvalidCurve("x values must be finite and strictly increasing".into()));
        }
        if y_values.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(ModelError::InvalidCurve("recognition rates must lie in [0, 1]".into()));
        }
        Ok(Self { x_values, y_values, se_values })
    }

    pub fn len(&self) -> usize {
        self.x_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_values.is_empty()
    }

    /// First x at which the samples decrease, if any.
    pub fn first_decrease(&self) -> Option<f64> {
        self.y_values
            .windows(2)
            .zip(&self.x_values[1..])
            .find(|(w, _)| w[1] < w[0])
            .map(|(_, &x)| x)
    }

    pub fn check_monotone(&self) -> Result<(), ModelError> {
        match self.first_decrease() {
            Some(x) => Err(ModelError::NonMonotone { x }),
            None => Ok(()),
        }
    }

    /// Linear interpolation, clamped to the end samples outside the range and
    /// to `[0, 1]` in value.
    pub fn value_at(&self, x: f64) -> f64 {
        let xs = &self.x_values;
        let ys = &self.y_values;
        if x <= xs[0] {
            return ys[0];
        }
        if x >= xs[xs.len() - 1] {
            return ys[ys.len() - 1];
        }
        let hi = xs.partition_point(|&v| v <= x);
        let lo = hi - 1;
        let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
        (ys[lo] + t * (ys[hi] - ys[lo])).clamp(0.0, 1.0)
    }

    /// Smallest x on the sampled range where the interpolated curve reaches
    /// `level`. Requires nondecreasing samples.
    pub fn invert(&self, level: f64) -> Result<Threshold, ModelError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(ModelError::InvalidLevel(level));
        }
        self.check_monotone()?;
        let ys = &self.y_values;
        let hi = ys.partition_point(|&y| y < level);
        if hi == ys.len() {
            return Ok(Threshold::NotReached);
        }
        if hi == 0 {
            return Ok(Threshold::Reached(self.x_values[0]));
        }
        let lo = hi - 1;
        let (x0, x1) = (self.x_values[lo], self.x_values[hi]);
        let (y0, y1) = (ys[lo], ys[hi]);
        let x = x0 + (level - y0) / (y1 - y0) * (x1 - x0);
        Ok(Threshold::Reached(x.clamp(x0, x1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn illustration() -> WeibullParams {
        WeibullParams::new(15.0, 3.0, 0.25, 0.15).unwrap()
    }

    #[test]
    fn illustrative_curve_values() {
        let p = illustration();
        assert_eq!(p.eval(0.0), 0.25);
        assert!((p.eval(15.0) - 0.55).abs() < 1e-15);
        let far = p.eval(1000.0);
        assert!(far <= 0.85 && far > 0.85 - 1e-12);
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(WeibullParams::new(0.0, 1.0, 0.5, 0.02).is_err());
        assert!(WeibullParams::new(1.0, -1.0, 0.5, 0.02).is_err());
        assert!(WeibullParams::new(1.0, 1.0, 1.0, 0.02).is_err());
        assert!(WeibullParams::new(1.0, 1.0, 0.5, 1.0).is_err());
        assert!(WeibullParams::new(1.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let g = build_grid(&GridConfig::default()).unwrap();
        assert_eq!(g.len(), 90_000);
        let expected: Vec<f64> = (1..=18).map(|k| 2.5 * k as f64).collect();
        assert_eq!(g.a_values(), expected.as_slice());
        assert_eq!(g.b_values()[0], 0.01);
        assert_eq!(g.b_values()[49], 10.0);
        assert_eq!(g.gamma_values()[0], 0.01);
        assert_eq!(g.gamma_values()[99], 0.99);
        assert_eq!(g.delta(), 0.02);
    }

    #[test]
    fn two_point_axes_hit_the_bounds() {
        let cfg = GridConfig {
            a_count: 2,
            b_count: 2,
            gamma_count: 2,
            ..GridConfig::default()
        };
        let g = build_grid(&cfg).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.a_values(), &[2.5, 45.0]);
        assert_eq!(g.b_values(), &[0.01, 10.0]);
        assert_eq!(g.gamma_values(), &[0.01, 0.99]);
    }

    #[test]
    fn log_spacing_is_geometric() {
        let cfg = GridConfig { b_spacing: Spacing::Log, ..GridConfig::default() };
        let g = build_grid(&cfg).unwrap();
        let b = g.b_values();
        assert_eq!(b[0], 0.01);
        assert_eq!(b[49], 10.0);
        let r0 = b[1] / b[0];
        for w in b.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_rejects_bad_bounds() {
        let bad = GridConfig { gamma_max: 1.0, ..GridConfig::default() };
        assert!(matches!(build_grid(&bad), Err(ModelError::InvalidGrid(_))));
        let bad = GridConfig { a_count: 1, ..GridConfig::default() };
        assert!(build_grid(&bad).is_err());
        let bad = GridConfig { b_min: 0.0, ..GridConfig::default() };
        assert!(build_grid(&bad).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let g = build_grid(&GridConfig::default()).unwrap();
        for idx in [0, 1, 99, 100, 4_999, 5_000, 89_999] {
            let (ia, ib, ig) = g.unflatten(idx);
            assert_eq!(g.flatten(ia, ib, ig), idx);
        }
    }

    #[test]
    fn invert_midpoint_is_threshold() {
        let p = WeibullParams::new(20.0, 3.0, 0.5, 0.02).unwrap();
        let mid = 0.5 + (1.0 - 0.02 - 0.5) / 2.0;
        let x = p.invert(mid, 45.0).unwrap().separation().unwrap();
        assert!((x - 20.0).abs() < 1e-12);
    }

    #[test]
    fn invert_below_guess_rate_is_zero() {
        let p = WeibullParams::new(20.0, 3.0, 0.5, 0.02).unwrap();
        assert_eq!(p.invert(0.3, 45.0).unwrap(), Threshold::Reached(0.0));
        assert!(p.invert(0.0, 45.0).is_err());
        assert!(p.invert(1.0, 45.0).is_err());
    }

    #[test]
    fn sampled_inversion() {
        let c = CurveSamples::new(vec![0.0, 10.0, 20.0], vec![0.5, 0.7, 0.9], None).unwrap();
        assert_eq!(c.invert(0.6).unwrap(), Threshold::Reached(5.0));
        assert_eq!(c.invert(0.4).unwrap(), Threshold::Reached(0.0));
        assert_eq!(c.invert(0.95).unwrap(), Threshold::NotReached);
        let bumpy = CurveSamples::new(vec![0.0, 1.0, 2.0], vec![0.5, 0.6, 0.55], None).unwrap();
        assert_eq!(bumpy.invert(0.58), Err(ModelError::NonMonotone { x: 2.0 }));
    }

    #[test]
    fn curve_validation() {
        assert!(CurveSamples::new(vec![0.0, 0.0], vec![0.5, 0.5], None).is_err());
        assert!(CurveSamples::new(vec![0.0, 1.0], vec![0.5, 1.5], None).is_err());
        assert!(CurveSamples::new(vec![0.0, 1.0], vec![0.5], None).is_err());
        assert!(CurveSamples::new(vec![0.0, 1.0], vec![0.5, 0.6], Some(vec![0.1])).is_err());
    }

    #[test]
    fn value_at_interpolates_and_clamps() {
        let c = CurveSamples::new(vec![0.0, 10.0], vec![0.5, 0.9], None).unwrap();
        assert!((c.value_at(5.0) - 0.7).abs() < 1e-15);
        assert_eq!(c.value_at(-1.0), 0.5);
        assert_eq!(c.value_at(11.0), 0.9);
    }

    #[test]
    fn export_grid_has_451_points() {
        let g = export_grid();
        assert_eq!(g.len(), 451);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[450], 45.0);
        assert_eq!(g[207], 20.7);
    }
}
