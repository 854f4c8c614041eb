use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use vibropsi_core::apparatus::FaultProfile;
use vibropsi_core::bape::Bape;
use vibropsi_core::observer::ObserverModel;
use vibropsi_core::protocol::{engine_for, Phase, RecordStore, SessionConfig, SessionRecord};
use vibropsi_core::simulation::{run_simulated, session_id};
use vibropsi_core::stats::BiasFlag;

use crate::{load_config, CliError, CliResult};

/// A run is flagged when at least this share of its queries sit at the
/// smallest or largest candidate, the bipolar pattern of a flat observer.
pub const EXTREME_SHARE: f64 = 0.5;

pub struct Args {
    pub config: PathBuf,
    pub count: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub session_id: String,
    pub phase: Option<Phase>,
    pub trials: usize,
    pub e_a: Option<f64>,
    pub e_b: Option<f64>,
    pub e_gamma: Option<f64>,
    pub entropy_initial: Option<f64>,
    pub entropy_final: Option<f64>,
    /// Entropy after each trial, nats.
    pub entropy_trace: Vec<f64>,
    pub extreme_share: f64,
    pub extreme_concentration: bool,
    pub bias_flags: Vec<BiasFlag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub base_seed: u64,
    pub complete: usize,
    pub excluded: usize,
    pub failed: usize,
    pub median_e_a: Option<f64>,
    pub median_e_b: Option<f64>,
    pub median_e_gamma: Option<f64>,
    pub median_entropy_final: Option<f64>,
    pub extreme_concentration_runs: usize,
    pub per_run: Vec<RunSummary>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn summarize(run: usize, seed: u64, id: String, initial_entropy: f64, result: Result<SessionRecord, String>) -> RunSummary {
    let record = match result {
        Ok(r) => r,
        Err(error) => {
            return RunSummary {
                run,
                seed,
                session_id: id,
                phase: None,
                trials: 0,
                e_a: None,
                e_b: None,
                e_gamma: None,
                entropy_initial: None,
                entropy_final: None,
                entropy_trace: Vec::new(),
                extreme_share: 0.0,
                extreme_concentration: false,
                bias_flags: Vec::new(),
                error: Some(error),
            }
        }
    };
    let candidates = record.config.candidates.separations();
    let (lo, hi) = (candidates[0], candidates[candidates.len() - 1]);
    let extremes = record.trials.iter().filter(|t| t.separation_mm == lo || t.separation_mm == hi).count();
    let share = if record.trials.is_empty() { 0.0 } else { extremes as f64 / record.trials.len() as f64 };
    let expectation = record.postmean.as_ref().map(|p| p.params_expectation);
    let trace: Vec<f64> = record.trials.iter().map(|t| t.entropy_after).collect();
    RunSummary {
        run,
        seed,
        session_id: record.session_id.clone(),
        phase: Some(record.phase),
        trials: record.trials.len(),
        e_a: expectation.map(|e| e.a),
        e_b: expectation.map(|e| e.b),
        e_gamma: expectation.map(|e| e.gamma),
        entropy_initial: Some(initial_entropy),
        entropy_final: trace.last().copied(),
        entropy_trace: trace,
        extreme_share: share,
        extreme_concentration: share >= EXTREME_SHARE,
        bias_flags: record.bias_report.map(|b| b.flags).unwrap_or_default(),
        error: None,
    }
}

fn run_all(
    template: &SessionConfig,
    engine: &Arc<Bape>,
    observer: &ObserverModel,
    fault: &FaultProfile,
    base_seed: u64,
    count: usize,
    jobs: usize,
) -> Vec<(u64, String, Result<SessionRecord, String>)> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<(u64, String, Result<SessionRecord, String>)>>> = Mutex::new(vec![None; count]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let seed = base_seed.wrapping_add(i as u64);
                let id = session_id(base_seed, i);
                let config = SessionConfig { seed, ..template.clone() };
                let result = run_simulated(id.clone(), config, engine.clone(), observer.clone(), fault.clone())
                    .map_err(|e| e.to_string());
                slots.lock().expect("result slots poisoned")[i] = Some((seed, id, result));
            });
        }
    });
    slots.into_inner().expect("result slots poisoned").into_iter().map(|s| s.expect("every run reported")).collect()
}

fn fmt_opt(v: Option<f64>, width: usize, prec: usize) -> String {
    match v {
        Some(x) => format!("{x:>width$.prec$}"),
        None => format!("{:>width$}", "-"),
    }
}

fn print_table(summary: &Summary) {
    println!(
        "{:>4} {:>20} {:<9} {:>6} {:>8} {:>7} {:>7} {:>8} {:>8} {:>7}",
        "run", "seed", "phase", "trials", "E[a]", "E[b]", "E[g]", "H0", "H_end", "extreme"
    );
    for r in &summary.per_run {
        let phase = r.phase.map_or("FAILED".to_string(), crate::phase_name);
        let extreme = if r.extreme_concentration { format!("{:.2}*", r.extreme_share) } else { format!("{:.2}", r.extreme_share) };
        println!(
            "{:>4} {:>20} {:<9} {:>6} {} {} {} {} {} {:>7}",
            r.run,
            r.seed,
            phase,
            r.trials,
            fmt_opt(r.e_a, 8, 2),
            fmt_opt(r.e_b, 7, 2),
            fmt_opt(r.e_gamma, 7, 3),
            fmt_opt(r.entropy_initial, 8, 3),
            fmt_opt(r.entropy_final, 8, 3),
            extreme
        );
        if let Some(e) = &r.error {
            println!("     {e}");
        }
    }
    println!();
    println!(
        "runs {}  complete {}  excluded {}  failed {}",
        summary.runs, summary.complete, summary.excluded, summary.failed
    );
    println!(
        "median E[a] {}  E[b] {}  E[g] {}  final entropy {}",
        fmt_opt(summary.median_e_a, 0, 2),
        fmt_opt(summary.median_e_b, 0, 2),
        fmt_opt(summary.median_e_gamma, 0, 3),
        fmt_opt(summary.median_entropy_final, 0, 3)
    );
    if summary.extreme_concentration_runs > 0 {
        println!(
            "* {} of {} runs put at least {:.0}% of queries at the extreme separations",
            summary.extreme_concentration_runs,
            summary.runs,
            EXTREME_SHARE * 100.0
        );
    }
}

pub fn run(args: &Args) -> CliResult<()> {
    if args.count == 0 {
        return Err(CliError::Validation("--count must be at least 1".into()));
    }
    let file = load_config(&args.config)?;
    let template = file.session.ok_or_else(|| CliError::Validation("config has no [session] section".into()))?;
    let observer = file.observer.ok_or_else(|| CliError::Validation("config has no [observer] section".into()))?;
    observer.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    template.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let base_seed = args.seed.unwrap_or(template.seed);
    let out = args.out.clone().unwrap_or(file.service.data_dir);
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);

    let engine = Arc::new(engine_for(&template).map_err(|e| CliError::Validation(e.to_string()))?);
    let initial_entropy = engine.uniform_posterior().entropy();
    let results = run_all(&template, &engine, &observer, &file.fault, base_seed, args.count, jobs);

    let store = RecordStore::new(&out);
    let mut per_run = Vec::with_capacity(results.len());
    for (run, (seed, id, result)) in results.into_iter().enumerate() {
        if let Ok(record) = &result {
            store.save(record).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        per_run.push(summarize(run, seed, id, initial_entropy, result));
    }
    let finished: Vec<&RunSummary> = per_run.iter().filter(|r| r.error.is_none()).collect();
    let summary = Summary {
        runs: per_run.len(),
        base_seed,
        complete: per_run.iter().filter(|r| r.phase == Some(Phase::Complete)).count(),
        excluded: per_run.iter().filter(|r| r.phase == Some(Phase::Excluded)).count(),
        failed: per_run.len() - finished.len(),
        median_e_a: median(finished.iter().filter_map(|r| r.e_a).collect()),
        median_e_b: median(finished.iter().filter_map(|r| r.e_b).collect()),
        median_e_gamma: median(finished.iter().filter_map(|r| r.e_gamma).collect()),
        median_entropy_final: median(finished.iter().filter_map(|r| r.entropy_final).collect()),
        extreme_concentration_runs: per_run.iter().filter(|r| r.extreme_concentration).count(),
        per_run,
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    print_table(&summary);
    println!("records and summary.json written to {}", out.display());
    if summary.failed > 0 {
        return Err(CliError::Runtime(format!("{} of {} runs failed", summary.failed, summary.runs)));
    }
    Ok(())
}
