//! Cohort curves, threshold levels and reference comparison, with CSV export.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psymodel::{export_grid, CurveSamples, ModelError, Threshold, WeibullParams};
use crate::stats::{bonferroni, t_test_one_sample, StatsError};

/// Recognition levels reported by [`extract_thresholds`].
pub const THRESHOLD_LEVELS: [f64; 5] = [0.75, 0.80, 0.85, 0.90, 0.95];

const NOT_REACHED: &str = "NOT_REACHED";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("need at least 2 curves, got {0}")]
    TooFewCurves(usize),
    #[error("curve {index} is sampled on a different grid")]
    MismatchedGrid { index: usize },
    #[error("reference curve must span [{min}, {max}] mm")]
    ReferenceSpan { min: f64, max: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed csv: {0}")]
    Format(String),
}

/// Static-stimulus comparison curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCurve {
    pub label: String,
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    pub provenance: String,
}

impl ReferenceCurve {
    pub const SPAN_MIN_MM: f64 = 2.5;
    pub const SPAN_MAX_MM: f64 = 45.0;

    pub fn new(
        label: impl Into<String>,
        x_values: Vec<f64>,
        y_values: Vec<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self, AnalysisError> {
        let curve = CurveSamples::new(x_values, y_values, None)?;
        curve.check_monotone()?;
        if curve.x_values[0] > Self::SPAN_MIN_MM || curve.x_values[curve.len() - 1] < Self::SPAN_MAX_MM {
            return Err(AnalysisError::ReferenceSpan { min: Self::SPAN_MIN_MM, max: Self::SPAN_MAX_MM });
        }
        Ok(Self { label: label.into(), x_values: curve.x_values, y_values: curve.y_values, provenance: provenance.into() })
    }

    /// Reads a two-column `separation_mm,recognition_rate` CSV.
    pub fn load_csv(path: &Path, label: impl Into<String>, provenance: impl Into<String>) -> Result<Self, AnalysisError> {
        let mut reader = csv::Reader::from_path(path)?;
        expect_headers(reader.headers()?, &["separation_mm", "recognition_rate"])?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for row in reader.records() {
            let row = row?;
            xs.push(parse_f64(&row, 0)?);
            ys.push(parse_f64(&row, 1)?);
        }
        Self::new(label, xs, ys, provenance)
    }

    pub fn as_curve(&self) -> CurveSamples {
        CurveSamples { x_values: self.x_values.clone(), y_values: self.y_values.clone(), se_values: None }
    }

    /// Piecewise-linear interpolation between samples.
    pub fn value_at(&self, x: f64) -> f64 {
        self.as_curve().value_at(x)
    }
}

/// Synthetic stand-in for a digitized static two-point curve: a steep
/// Weibull (gamma 0.5, delta 0.02, b 4) that crosses 0.9 at 20.7 mm, sampled
/// every 0.1 mm. For pipeline checks only; it is not measured data.
pub fn synthetic_reference() -> ReferenceCurve {
    let (gamma, delta, b, anchor) = (0.5, 0.02, 4.0, 20.7);
    let a = solve_scale(gamma, delta, b, anchor, 0.9);
    let truth = WeibullParams::new(a, b, gamma, delta).expect("fixture parameters are valid");
    let xs = export_grid();
    let ys = xs.iter().map(|&x| truth.eval(x)).collect();
    ReferenceCurve::new(
        "synthetic static 2-point reference",
        xs,
        ys,
        "synthetic fixture: Weibull(gamma=0.5, delta=0.02, b=4) with psi(20.7 mm) = 0.9",
    )
    .expect("fixture is a valid reference")
}

/// Scale `a` such that the Weibull reaches `level` at `x`.
pub fn solve_scale(gamma: f64, delta: f64, b: f64, x: f64, level: f64) -> f64 {
    let core = (level - gamma) / (1.0 - delta - gamma);
    x / (-(1.0 - core).log2()).powf(1.0 / b)
}

/// Pointwise mean with standard error `s / sqrt(n)`.
pub fn cohort_mean(curves: &[CurveSamples]) -> Result<CurveSamples, AnalysisError> {
    if curves.len() < 2 {
        return Err(AnalysisError::TooFewCurves(curves.len()));
    }
    let xs = &curves[0].x_values;
    if let Some(index) = curves.iter().position(|c| &c.x_values != xs) {
        return Err(AnalysisError::MismatchedGrid { index });
    }
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(xs.len());
    let mut se = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let m = curves.iter().map(|c| c.y_values[i]).sum::<f64>() / n;
        let var = curves.iter().map(|c| (c.y_values[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean.push(m.clamp(0.0, 1.0));
        se.push((var / n).sqrt());
    }
    Ok(CurveSamples::new(xs.clone(), mean, Some(se))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub levels: Vec<f64>,
    pub thresholds: Vec<Threshold>,
    /// Standard error per level, when every contributing curve reached it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<Vec<Option<f64>>>,
}

pub fn extract_thresholds(curve: &CurveSamples) -> Result<ThresholdReport, AnalysisError> {
    curve.check_monotone()?;
    let thresholds = THRESHOLD_LEVELS.iter().map(|&l| curve.invert(l)).collect::<Result<_, _>>()?;
    Ok(ThresholdReport { levels: THRESHOLD_LEVELS.to_vec(), thresholds, se: None })
}

/// Thresholds of the cohort mean, with the standard error of the individual
/// thresholds at each level all members reached.
pub fn extract_cohort_thresholds(curves: &[CurveSamples]) -> Result<ThresholdReport, AnalysisError> {
    let mean = cohort_mean(curves)?;
    let mut report = extract_thresholds(&mean)?;
    let individual: Vec<ThresholdReport> = curves.iter().map(extract_thresholds).collect::<Result<_, _>>()?;
    let n = curves.len() as f64;
    let se = (0..THRESHOLD_LEVELS.len())
        .map(|i| {
            let xs: Option<Vec<f64>> = individual.iter().map(|r| r.thresholds[i].separation()).collect();
            xs.map(|xs| {
                let m = xs.iter().sum::<f64>() / n;
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            })
        })
        .collect();
    report.se = Some(se);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub x_values: Vec<f64>,
    pub reference_values: Vec<f64>,
    pub cohort_mean: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub p_bonferroni: Vec<f64>,
    pub significant: Vec<bool>,
    /// Zero cohort variance at this x.
    pub degenerate: Vec<bool>,
    pub alpha: f64,
}

/// One-sample t-test of the cohort's curve values against the reference at
/// each x, Bonferroni-corrected over `x_test`.
pub fn compare_to_reference(
    curves: &[CurveSamples],
    reference: &ReferenceCurve,
    x_test: &[f64],
    alpha: f64,
) -> Result<ComparisonReport, AnalysisError> {
    if curves.len() < 2 {
        return Err(AnalysisError::TooFewCurves(curves.len()));
    }
    let mut report = ComparisonReport {
        x_values: x_test.to_vec(),
        reference_values: Vec::new(),
        cohort_mean: Vec::new(),
        t_values: Vec::new(),
        p_values: Vec::new(),
        p_bonferroni: Vec::new(),
        significant: Vec::new(),
        degenerate: Vec::new(),
        alpha,
    };
    for &x in x_test {
        let values: Vec<f64> = curves.iter().map(|c| c.value_at(x)).collect();
        let r = reference.value_at(x);
        let t = t_test_one_sample(&values, r)?;
        report.reference_values.push(r);
        report.cohort_mean.push(values.iter().sum::<f64>() / values.len() as f64);
        report.t_values.push(t.t);
        report.p_values.push(t.p);
        report.degenerate.push(t.degenerate);
    }
    report.p_bonferroni = bonferroni(&report.p_values);
    report.significant = report.p_bonferroni.iter().map(|&p| p < alpha).collect();
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_f64(row: &csv::StringRecord, i: usize) -> Result<f64, AnalysisError> {
    let s = row.get(i).ok_or_else(|| AnalysisError::Format(format!("missing column {i}")))?;
    s.trim().parse().map_err(|_| AnalysisError::Format(format!("not a number: {s:?}")))
}

fn parse_opt(row: &csv::StringRecord, i: usize) -> Result<Option<f64>, AnalysisError> {
    match row.get(i).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => parse_f64(row, i).map(Some),
    }
}

fn parse_bool(row: &csv::StringRecord, i: usize) -> Result<bool, AnalysisError> {
    match row.get(i).map(str::trim) {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(AnalysisError::Format(format!("not a boolean: {other:?}"))),
    }
}

fn expect_headers(headers: &csv::StringRecord, expected: &[&str]) -> Result<(), AnalysisError> {
    if headers.iter().map(str::trim).eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(AnalysisError::Format(format!("expected header {}", expected.join(","))))
    }
}

const CURVE_HEADER: [&str; 3] = ["separation_mm", "recognition_rate", "se"];
const THRESHOLD_HEADER: [&str; 3] = ["level", "separation_mm", "se"];
const COMPARISON_HEADER: [&str; 10] = [
    "separation_mm",
    "reference",
    "cohort_mean",
    "t",
    "p",
    "p_bonferroni",
    "log10_p_bonferroni",
    "significant",
    "degenerate",
    "alpha",
];

pub fn write_curve_csv(curve: &CurveSamples, path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(CURVE_HEADER)?;
    for i in 0..curve.len() {
        let se = curve.se_values.as_ref().map(|s| s[i]);
        w.write_record([curve.x_values[i].to_string(), curve.y_values[i].to_string(), fmt_opt(se)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<CurveSamples, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    expect_headers(r.headers()?, &CURVE_HEADER)?;
    let (mut xs, mut ys, mut se) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.records() {
        let row = row?;
        xs.push(parse_f64(&row, 0)?);
        ys.push(parse_f64(&row, 1)?);
        se.push(parse_opt(&row, 2)?);
    }
    let se = if se.iter().all(Option::is_none) {
        None
    } else {
        Some(se.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| AnalysisError::Format("partial se column".into()))?)
    };
    Ok(CurveSamples::new(xs, ys, se)?)
}

pub fn write_thresholds_csv(report: &ThresholdReport, path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(THRESHOLD_HEADER)?;
    for (i, (level, t)) in report.levels.iter().zip(&report.thresholds).enumerate() {
        let sep = match t {
            Threshold::Reached(x) => x.to_string(),
            Threshold::NotReached => NOT_REACHED.to_string(),
        };
        let se = report.se.as_ref().and_then(|s| s[i]);
        w.write_record([level.to_string(), sep, fmt_opt(se)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_thresholds_csv(path: &Path) -> Result<ThresholdReport, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    expect_headers(r.headers()?, &THRESHOLD_HEADER)?;
    let (mut levels, mut thresholds, mut se) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.records() {
        let row = row?;
        levels.push(parse_f64(&row, 0)?);
        thresholds.push(match row.get(1).map(str::trim) {
            Some(NOT_REACHED) => Threshold::NotReached,
            _ => Threshold::Reached(parse_f64(&row, 1)?),
        });
        se.push(parse_opt(&row, 2)?);
    }
    let se = if se.iter().all(Option::is_none) { None } else { Some(se) };
    Ok(ThresholdReport { levels, thresholds, se })
}

pub fn write_comparison_csv(report: &ComparisonReport, path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(COMPARISON_HEADER)?;
    for i in 0..report.x_values.len() {
        w.write_record([
            report.x_values[i].to_string(),
            report.reference_values[i].to_string(),
            report.cohort_mean[i].to_string(),
            report.t_values[i].to_string(),
            report.p_values[i].to_string(),
            report.p_bonferroni[i].to_string(),
            report.p_bonferroni[i].log10().to_string(),
            report.significant[i].to_string(),
            report.degenerate[i].to_string(),
            report.alpha.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_comparison_csv(path: &Path) -> Result<ComparisonReport, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    expect_headers(r.headers()?, &COMPARISON_HEADER)?;
    let mut out = ComparisonReport {
        x_values: Vec::new(),
        reference_values: Vec::new(),
        cohort_mean: Vec::new(),
        t_values: Vec::new(),
        p_values: Vec::new(),
        p_bonferroni: Vec::new(),
        significant: Vec::new(),
        degenerate: Vec::new(),
        alpha: 0.0,
    };
    for row in r.records() {
        let row = row?;
        out.x_values.push(parse_f64(&row, 0)?);
        out.reference_values.push(parse_f64(&row, 1)?);
        out.cohort_mean.push(parse_f64(&row, 2)?);
        out.t_values.push(parse_f64(&row, 3)?);
        out.p_values.push(parse_f64(&row, 4)?);
        out.p_bonferroni.push(parse_f64(&row, 5)?);
        out.significant.push(parse_bool(&row, 7)?);
        out.degenerate.push(parse_bool(&row, 8)?);
        out.alpha = parse_f64(&row, 9)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> CurveSamples {
        let xs = export_grid();
        let n = xs.len();
        CurveSamples::new(xs, vec![v; n], None).unwrap()
    }

    #[test]
    fn mean_of_identical_curves() {
        let c = synthetic_reference().as_curve();
        let m = cohort_mean(&[c.clone(), c.clone(), c.clone()]).unwrap();
        for (v, y) in m.y_values.iter().zip(&c.y_values) {
            assert!((v - y).abs() < 1e-15);
        }
        assert!(m.se_values.unwrap().iter().all(|&s| s < 1e-15));
    }

    #[test]
    fn mean_of_two_flats() {
        let m = cohort_mean(&[flat(0.5), flat(0.9)]).unwrap();
        // Sample sd is 0.2 * sqrt(2); divided by sqrt(2) gives 0.2.
        let se = 0.2;
        for (y, s) in m.y_values.iter().zip(m.se_values.unwrap()) {
            assert!((y - 0.7).abs() < 1e-12);
            assert!((s - se).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_rejects_bad_input() {
        assert!(matches!(cohort_mean(&[flat(0.5)]), Err(AnalysisError::TooFewCurves(1))));
        let short = CurveSamples::new(vec![0.0, 1.0], vec![0.5, 0.5], None).unwrap();
        assert!(matches!(cohort_mean(&[flat(0.5), short]), Err(AnalysisError::MismatchedGrid { index: 1 })));
    }

    #[test]
    fn reference_fixture_anchor() {
        let r = synthetic_reference();
        assert_eq!(r.x_values.len(), 451);
        let t = extract_thresholds(&r.as_curve()).unwrap();
        let x90 = t.thresholds[3].separation().unwrap();
        assert!((x90 - 20.7).abs() < 1e-9, "{x90}");
    }

    #[test]
    fn flat_curve_reaches_nothing() {
        let t = extract_thresholds(&flat(0.5)).unwrap();
        assert!(t.thresholds.iter().all(|t| *t == Threshold::NotReached));
    }

    #[test]
    fn non_monotone_rejected() {
        let c = CurveSamples::new(vec![0.0, 1.0, 2.0], vec![0.5, 0.7, 0.6], None).unwrap();
        assert!(matches!(extract_thresholds(&c), Err(AnalysisError::Model(ModelError::NonMonotone { .. }))));
    }

    #[test]
    fn reference_span_required() {
        let e = ReferenceCurve::new("x", vec![5.0, 45.0], vec![0.5, 0.9], "");
        assert!(matches!(e, Err(AnalysisError::ReferenceSpan { .. })));
    }

    #[test]
    fn equal_to_reference_is_not_significant() {
        let r = synthetic_reference();
        let base = r.as_curve();
        let up = CurveSamples::new(base.x_values.clone(), base.y_values.iter().map(|y| (y + 0.01).min(1.0)).collect(), None).unwrap();
        let down = CurveSamples::new(base.x_values.clone(), base.y_values.iter().map(|y| y - 0.01).collect(), None).unwrap();
        let x_test: Vec<f64> = (1..=18).map(|k| 2.5 * k as f64).collect();
        let rep = compare_to_reference(&[up, down], &r, &x_test[..17], 0.05).unwrap();
        assert!(rep.significant.iter().all(|s| !s));
    }

    #[test]
    fn bonferroni_factor_is_test_count() {
        let r = synthetic_reference();
        let curves = [flat(0.6), flat(0.7), flat(0.65)];
        let x_test: Vec<f64> = (1..=18).map(|k| 2.5 * k as f64).collect();
        let rep = compare_to_reference(&curves, &r, &x_test, 0.05).unwrap();
        for (p, pb) in rep.p_values.iter().zip(&rep.p_bonferroni) {
            assert_eq!(*pb, (p * 18.0).min(1.0));
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut curve = synthetic_reference().as_curve();
        curve.se_values = Some(curve.y_values.iter().map(|y| y / 7.0).collect());
        let p = dir.path().join("curve.csv");
        write_curve_csv(&curve, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 452);
        assert_eq!(read_curve_csv(&p).unwrap(), curve);

        let mut t = extract_thresholds(&curve).unwrap();
        t.thresholds[4] = Threshold::NotReached;
        t.se = Some(vec![Some(0.1), None, Some(1.0 / 3.0), None, None]);
        let p = dir.path().join("t.csv");
        write_thresholds_csv(&t, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("NOT_REACHED"));
        assert_eq!(read_thresholds_csv(&p).unwrap(), t);

        let x_test: Vec<f64> = (1..=18).map(|k| 2.5 * k as f64).collect();
        let rep = compare_to_reference(&[flat(0.6), flat(0.7), flat(0.6)], &synthetic_reference(), &x_test, 0.05).unwrap();
        let p = dir.path().join("c.csv");
        write_comparison_csv(&rep, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("separation_mm,reference,cohort_mean,t,p,p_bonferroni,log10_p_bonferroni"));
        assert_eq!(read_comparison_csv(&p).unwrap(), rep);
    }

    #[test]
    fn reference_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.csv");
        std::fs::write(&p, "separation_mm,recognition_rate\n0,0.5\n20,0.8\n45,0.97\n").unwrap();
        let r = ReferenceCurve::load_csv(&p, "digitized", "user supplied").unwrap();
        assert!((r.value_at(10.0) - 0.65).abs() < 1e-12);
        std::fs::write(&p, "x,y\n0,0.5\n").unwrap();
        assert!(matches!(ReferenceCurve::load_csv(&p, "d", ""), Err(AnalysisError::Format(_))));
    }

    #[test]
    fn solve_scale_hits_level() {
        let a = solve_scale(0.55, 0.02, 2.0, 36.6, 0.9);
        let w = WeibullParams::new(a, 2.0, 0.55, 0.02).unwrap();
        assert!((w.eval(36.6) - 0.9).abs() < 1e-12);
    }
}
