use std::path::{Path, PathBuf};

use serde::Serialize;
use vibropsi_core::analysis::{
    cohort_mean, compare_to_reference, extract_cohort_thresholds, synthetic_reference, write_comparison_csv,
    write_curve_csv, write_thresholds_csv, ReferenceCurve, ThresholdReport,
};
use vibropsi_core::protocol::{Phase, SessionRecord};
use vibropsi_core::psymodel::CurveSamples;

use crate::{phase_name, CliError, CliResult};

pub const CURVE_CSV: &str = "cohort_curve.csv";
pub const THRESHOLDS_CSV: &str = "thresholds.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const SUMMARY_JSON: &str = "analysis.json";

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    records_found: usize,
    analyzed: Vec<String>,
    excluded: Vec<String>,
    /// Aborted or unfinished sessions.
    skipped: Vec<String>,
    reference_label: String,
    reference_provenance: String,
    alpha: f64,
    thresholds: ThresholdReport,
    significant_separations_mm: Vec<f64>,
}

fn load_records(pattern: &str) -> CliResult<Vec<(PathBuf, SessionRecord)>> {
    let paths = glob::glob(pattern).map_err(|e| CliError::Validation(format!("--records {pattern:?}: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        let p = p.map_err(|e| CliError::Runtime(e.to_string()))?;
        if p.file_name().is_some_and(|n| n == "summary.json" || n == SUMMARY_JSON) {
            continue;
        }
        let record = SessionRecord::load(&p).map_err(|e| CliError::Validation(e.to_string()))?;
        out.push((p, record));
    }
    Ok(out)
}

pub fn run(pattern: &str, reference: Option<&Path>, out: &Path, alpha: f64) -> CliResult<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Validation(format!("--alpha must lie in (0, 1), got {alpha}")));
    }
    let records = load_records(pattern)?;
    let found = records.len();
    let mut curves: Vec<CurveSamples> = Vec::new();
    let (mut analyzed, mut excluded, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    let mut x_test: Option<Vec<f64>> = None;
    for (path, r) in records {
        match (r.phase, &r.postmean) {
            (Phase::Complete, Some(postmean)) => {
                let xs = r.config.candidates.separations().to_vec();
                match &x_test {
                    None => x_test = Some(xs),
                    Some(first) if *first != xs => {
                        return Err(CliError::Validation(format!(
                            "{} uses a different candidate set from the first record",
                            path.display()
                        )))
                    }
                    Some(_) => {}
                }
                curves.push(postmean.curve_samples.clone());
                analyzed.push(r.session_id);
            }
            (Phase::Excluded, _) => {
                eprintln!("warning: skipping EXCLUDED session {} ({})", r.session_id, path.display());
                excluded.push(r.session_id);
            }
            (phase, _) => {
                eprintln!("warning: skipping {} session {} ({})", phase_name(phase), r.session_id, path.display());
                skipped.push(r.session_id);
            }
        }
    }
    if curves.len() < 2 {
        return Err(CliError::Validation(format!(
            "need at least 2 COMPLETE records, found {} ({} excluded, {} skipped, {} matched)",
            curves.len(),
            excluded.len(),
            skipped.len(),
            found
        )));
    }
    let reference = match reference {
        Some(p) => {
            let label = p.file_stem().map_or("reference".into(), |s| s.to_string_lossy().into_owned());
            ReferenceCurve::load_csv(p, label, p.display().to_string()).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => {
            eprintln!("warning: no --reference given; comparing against the built-in synthetic fixture");
            synthetic_reference()
        }
    };
    let x_test = x_test.expect("set with the first analyzed record");
    let runtime = |e: vibropsi_core::analysis::AnalysisError| CliError::Runtime(e.to_string());
    let mean = cohort_mean(&curves).map_err(|e| CliError::Validation(e.to_string()))?;
    let thresholds = extract_cohort_thresholds(&curves).map_err(runtime)?;
    let comparison = compare_to_reference(&curves, &reference, &x_test, alpha).map_err(runtime)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write_curve_csv(&mean, &out.join(CURVE_CSV)).map_err(runtime)?;
    write_thresholds_csv(&thresholds, &out.join(THRESHOLDS_CSV)).map_err(runtime)?;
    write_comparison_csv(&comparison, &out.join(COMPARISON_CSV)).map_err(runtime)?;

    let significant: Vec<f64> =
        comparison.x_values.iter().zip(&comparison.significant).filter(|(_, s)| **s).map(|(x, _)| *x).collect();
    let summary = AnalysisSummary {
        records_found: found,
        analyzed,
        excluded,
        skipped,
        reference_label: reference.label.clone(),
        reference_provenance: reference.provenance.clone(),
        alpha,
        thresholds: thresholds.clone(),
        significant_separations_mm: significant.clone(),
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(out.join(SUMMARY_JSON), text).map_err(|e| CliError::Runtime(e.to_string()))?;

    println!(
        "analyzed {} records ({} excluded, {} skipped) against {:?}",
        summary.analyzed.len(),
        summary.excluded.len(),
        summary.skipped.len(),
        summary.reference_label
    );
    println!("{:>6} {:>14} {:>8}", "level", "separation_mm", "se");
    for (i, level) in thresholds.levels.iter().enumerate() {
        let x = thresholds.thresholds[i].separation().map_or("NOT_REACHED".into(), |x| format!("{x:.2}"));
        let se = thresholds.se.as_ref().and_then(|s| s[i]).map_or("-".into(), |s| format!("{s:.2}"));
        println!("{level:>6.2} {x:>14} {se:>8}");
    }
    if significant.is_empty() {
        println!("no separation differs from the reference after Bonferroni correction");
    } else {
        let xs: Vec<String> = significant.iter().map(|x| format!("{x}")).collect();
        println!("differs from the reference (Bonferroni, alpha {alpha}) at: {} mm", xs.join(", "));
    }
    println!("outputs written to {}", out.display());
    Ok(())
}
