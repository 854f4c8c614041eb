use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use vibropsi_core::protocol::{
    engine_for, Choice, Phase, PresentedStimulus, ProtocolError, RecordStore, Responder, ResponderError,
    ResponderReply, Session, SessionRecord, Task, PRACTICE_TRIALS,
};
use vibropsi_core::stats::BiasFlag;
use vibropsi_service::{now_stamp, open_apparatus, Backend, BackendRequest};

use crate::{load_config, phase_name, CliError, CliResult};

/// Reads 2IFC answers from a line-oriented terminal.
pub struct TerminalResponder<R, W> {
    input: R,
    output: W,
    task: Task,
    label: String,
    /// Input ended before the session did.
    pub eof: bool,
}

impl<R: BufRead, W: Write> TerminalResponder<R, W> {
    pub fn new(input: R, output: W, task: Task) -> Self {
        Self { input, output, task, label: String::new(), eof: false }
    }

    fn read_line(&mut self) -> Option<String> {
        let mut line = String::new();
        match self.input.read_line(&mut line) {
            Ok(0) | Err(_) => {
                self.eof = true;
                None
            }
            Ok(_) => Some(line.trim().to_ascii_lowercase()),
        }
    }

    fn say(&mut self, text: &str) {
        let _ = writeln!(self.output, "{text}");
        let _ = self.output.flush();
    }

    fn keys(&self) -> &'static str {
        if self.task.is_orientation_task() {
            "[h] horizontal  [v] vertical"
        } else {
            "[1] first side  [2] second side"
        }
    }

    fn parse(&self, key: &str) -> Option<Choice> {
        let choice = match key {
            "1" | "a" => Choice::FirstA,
            "2" | "b" => Choice::FirstB,
            "h" => Choice::Horizontal,
            "v" => Choice::Vertical,
            _ => return None,
        };
        self.task.options().contains(&choice).then_some(choice)
    }

    /// Waits for Enter. `false` when the operator quits or input ends.
    pub fn confirm(&mut self, prompt: &str) -> bool {
        self.say(prompt);
        !matches!(self.read_line().as_deref(), None | Some("q") | Some("quit"))
    }
}

impl<R: BufRead, W: Write> Responder for TerminalResponder<R, W> {
    fn respond(&mut self, _stimulus: &PresentedStimulus) -> Result<ResponderReply, ResponderError> {
        let prompt = format!("{}  {}  (q quits)", self.label, self.keys());
        self.say(&prompt);
        let shown = Instant::now();
        loop {
            let Some(key) = self.read_line() else {
                return Err(ResponderError::Aborted);
            };
            if key == "q" || key == "quit" {
                return Err(ResponderError::Aborted);
            }
            match self.parse(&key) {
                Some(choice) => {
                    return Ok(ResponderReply { choice, response_time_ms: shown.elapsed().as_secs_f64() * 1000.0 })
                }
                None => {
                    let retry = format!("  please answer {}", self.keys());
                    self.say(&retry);
                }
            }
        }
    }
}

/// Latest persisted state, shared with the interrupt handler.
struct Snapshot {
    store: RecordStore,
    record: Option<SessionRecord>,
}

type Shared = Arc<Mutex<Snapshot>>;

fn persist(shared: &Shared, session: &mut Session) -> CliResult<()> {
    if session.phase().is_terminal() && session.timestamps().finished_at.is_none() {
        session.timestamps_mut().finished_at = Some(now_stamp());
    }
    let record = session.to_record();
    let mut snap = shared.lock().map_err(|_| CliError::Runtime("record snapshot poisoned".into()))?;
    snap.store.save(&record).map_err(|e| CliError::Runtime(e.to_string()))?;
    snap.record = Some(record);
    Ok(())
}

// Ctrl-C lands here while the main thread is blocked on input.
fn abort_snapshot(shared: &Shared) {
    let Ok(mut snap) = shared.lock() else { return };
    let Some(mut record) = snap.record.take() else { return };
    if !record.phase.is_terminal() {
        record.phase = Phase::Aborted;
        record.timestamps.finished_at = Some(now_stamp());
        match snap.store.save(&record) {
            Ok(path) => eprintln!("\ninterrupted; session saved as ABORTED at {}", path.display()),
            Err(e) => eprintln!("\ninterrupted; could not save the session: {e}"),
        }
    }
}

// True when the config file sets `session.seed` itself.
fn config_sets_seed(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| t.parse::<toml::Table>().ok())
        .and_then(|t| t.get("session").and_then(|s| s.get("seed")).cloned())
        .is_some()
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

enum Ending {
    Finished,
    Quit,
}

fn drive<R: BufRead, W: Write>(
    session: &mut Session,
    term: &mut TerminalResponder<R, W>,
    shared: &Shared,
    practice: bool,
) -> CliResult<Ending> {
    if practice {
        term.say(&format!("Practice: {PRACTICE_TRIALS} trials. These answers are not scored."));
        for k in 0..PRACTICE_TRIALS {
            term.label = format!("practice {}/{PRACTICE_TRIALS}", k + 1);
            match session.run_practice_trial(term) {
                Ok(()) => {}
                Err(ProtocolError::ResponderAborted) => return Ok(Ending::Quit),
                Err(e) => return Err(CliError::Runtime(e.to_string())),
            }
        }
        persist(shared, session)?;
        if !term.confirm("Practice done. Press Enter to start the scored session (q quits).") {
            return Ok(Ending::Quit);
        }
    }
    let planned = session.planned_trials();
    while !session.is_finished() {
        if session.phase() == Phase::Reorienting {
            let next = session.orientation().toggled();
            let prompt = format!("Block done. Rotate the rig 90 degrees ({next:?} next), then press Enter (q quits).");
            if !term.confirm(&prompt) {
                return Ok(Ending::Quit);
            }
            session.advance_block().map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        term.label = format!("trial {}/{planned}", session.history().len() + 1);
        match session.run_trial(term) {
            Ok(_) => {}
            Err(ProtocolError::ResponderTimeout) => term.say("  too slow; the trial will be repeated"),
            Err(ProtocolError::ResponderAborted) => return Ok(Ending::Quit),
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        }
        persist(shared, session)?;
    }
    session.finalize().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(Ending::Finished)
}

pub fn run(config_path: &Path, seed: Option<u64>, data_dir: Option<PathBuf>, practice: bool) -> CliResult<()> {
    let file = load_config(config_path)?;
    let mut config = file.session.ok_or_else(|| CliError::Validation("config has no [session] section".into()))?;
    let mut service = file.service;
    service.apply_env().map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(d) = data_dir {
        service.data_dir = d;
    }
    config.seed = match seed {
        Some(s) => s,
        None if config_sets_seed(config_path) => config.seed,
        // Each participant gets fresh targets; the seed is kept in the record.
        None => (unix_ms() as u64) ^ u64::from(std::process::id()).rotate_left(32),
    };
    config.validate().map_err(|e| CliError::Validation(e.to_string()))?;

    let backend = match &service.apparatus {
        Backend::Simulator => BackendRequest::Simulator { fault: file.fault.clone() },
        Backend::Bridge(address) => BackendRequest::Bridge { address: address.clone() },
    };
    let engine = Arc::new(engine_for(&config).map_err(|e| CliError::Validation(e.to_string()))?);
    let apparatus = open_apparatus(&config, &backend, service.simulator_real_time)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let id = format!("run-{}", unix_ms());
    let mut session = match Session::start(id, config, engine, apparatus) {
        Ok(s) => s,
        Err(ProtocolError::Apparatus(vibropsi_core::apparatus::ApparatusError::AlignmentFailed(report))) => {
            eprintln!("alignment check failed:");
            eprintln!("{:>10} {:>12} {:>9} {:>6}", "target_mm", "achieved_mm", "force_n", "ok");
            for s in &report.steps {
                let achieved = s.achieved_mm.map_or("-".into(), |v| format!("{v:.2}"));
                let force = s.force_n.map_or("none".into(), |v| format!("{v:.3}"));
                eprintln!("{:>10.1} {:>12} {:>9} {:>6}", s.target_mm, achieved, force, s.within_tolerance);
            }
            return Err(CliError::Runtime("alignment check failed".into()));
        }
        Err(e) => return Err(CliError::Runtime(e.to_string())),
    };
    session.timestamps_mut().created_at = Some(now_stamp());

    let shared: Shared = Arc::new(Mutex::new(Snapshot { store: RecordStore::new(&service.data_dir), record: None }));
    persist(&shared, &mut session)?;
    {
        let shared = shared.clone();
        ctrlc::set_handler(move || {
            abort_snapshot(&shared);
            std::process::exit(2);
        })
        .map_err(|e| CliError::Runtime(format!("installing the interrupt handler: {e}")))?;
    }

    let stdin = std::io::stdin();
    let mut term = TerminalResponder::new(stdin.lock(), std::io::stdout(), session.config().task);
    term.say(&format!(
        "Session {} for {} ({} trials). Alignment passed.",
        session.id(),
        session.config().tsid,
        session.planned_trials()
    ));
    let ending = drive(&mut session, &mut term, &shared, practice);
    if !matches!(ending, Ok(Ending::Finished)) {
        session.abort();
    }
    persist(&shared, &mut session)?;
    let path = RecordStore::new(&service.data_dir)
        .path_for(&session.config().tsid, session.id())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    match ending? {
        Ending::Quit if term.eof => {
            Err(CliError::Runtime(format!("input closed; session saved as ABORTED at {}", path.display())))
        }
        Ending::Quit => {
            println!("session aborted; saved at {}", path.display());
            Ok(())
        }
        Ending::Finished => {
            let record = session.to_record();
            println!("session {}: {} trials, {}", record.session_id, record.trials.len(), phase_name(record.phase));
            if let Some(p) = &record.postmean {
                let e = p.params_expectation;
                println!("E[a] {:.2} mm  E[b] {:.2}  E[gamma] {:.3}", e.a, e.b, e.gamma);
            }
            if let Some(b) = &record.bias_report {
                for flag in &b.flags {
                    match flag {
                        BiasFlag::SideBias => println!("SIDE_BIAS: binomial p = {:.4}", b.binomial_p),
                        BiasFlag::RtAnomaly => println!("RT_ANOMALY: t-test p = {:.4}", b.rt_test_p),
                    }
                }
            }
            println!("saved at {}", path.display());
            Ok(())
        }
    }
}
