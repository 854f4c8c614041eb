//! 2IFC session state machine for VT-2PD, VT-2POD and bidirectional VT-2PD.
//!
//! A [`Session`] owns the posterior, the trial history, the seeded RNG and the
//! rig handle. Transitions:
//!
//! ```text
//! start -> BETWEEN_TRIALS -present-> AWAITING_RESPONSE -submit-> BETWEEN_TRIALS ...
//!                                                      -submit (end of block 1)-> REORIENTING -advance-> BETWEEN_TRIALS
//! BETWEEN_TRIALS (all trials recorded) -finalize-> COMPLETE | EXCLUDED
//! any non-terminal phase -abort-> ABORTED
//! ```
//!
//! RNG draw order per scored trial: target, then the jitter of the first
//! motor, then the jitter of the second motor. For VT-2PD the first motor is
//! A and the second B; for VT-2POD the apex C then its partner. A RANDOM first
//! orientation consumes one draw before the first trial. Practice trials use
//! a separate stream so they never shift the scored transcript.

mod record;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apparatus::{AlignmentReport, Apparatus, ApparatusConfig, ApparatusError, Motor, MotorMask};
use crate::bape::{Bape, BapeError, CandidateSet, Outcome, Posterior, Postmean, Selection};
use crate::psymodel::{build_grid, export_grid, GridConfig};
use crate::stats::{run_bias_guard, BiasReport, DEFAULT_ALPHA};

pub use record::{RecordError, RecordStore, SessionRecord, SessionSummary, Timestamps, SCHEMA_VERSION};

/// Consecutive timeouts tolerated by [`Session::run_to_completion`].
pub const MAX_CONSECUTIVE_VOIDS: usize = 100;
/// Practice trials offered before a scored interactive run.
pub const PRACTICE_TRIALS: usize = 10;

const PRACTICE_STREAM: u64 = 0x5052_4143_5449_4345;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("operation needs phase {expected}, session is {actual:?}")]
    WrongPhase { expected: &'static str, actual: Phase },
    #[error("response {response:?} is not an option of task {task:?}")]
    InvalidResponse { response: Choice, task: Task },
    #[error("responder timed out; trial voided and re-queued")]
    ResponderTimeout,
    #[error("responder aborted the session")]
    ResponderAborted,
    #[error("session incomplete: {recorded} of {planned} trials recorded")]
    Incomplete { recorded: usize, planned: usize },
    #[error("engine grid or candidate set does not match the session config")]
    EngineMismatch,
    #[error(transparent)]
    Apparatus(#[from] ApparatusError),
    #[error(transparent)]
    Bape(#[from] BapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Vt2pd,
    Vt2pod,
    Vt2pdBidirectional,
}

impl Task {
    pub fn blocks(self) -> usize {
        match self {
            Task::Vt2pdBidirectional => 2,
            _ => 1,
        }
    }

    /// VT-2POD asks for the orientation of the vibrating pair.
    pub fn is_orientation_task(self) -> bool {
        self == Task::Vt2pod
    }

    /// The two response options, first option first.
    pub fn options(self) -> [Choice; 2] {
        if self.is_orientation_task() {
            [Choice::Horizontal, Choice::Vertical]
        } else {
            [Choice::FirstA, Choice::FirstB]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

impl Orientation {
    pub fn toggled(self) -> Self {
        match self {
            Orientation::Horizontal => Orientation::Vertical,
            Orientation::Vertical => Orientation::Horizontal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FirstOrientation {
    Horizontal,
    Vertical,
    #[default]
    Random,
}

/// Target and response domain. VT-2PD: which side vibrated first. VT-2POD:
/// which pair vibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Choice {
    FirstA,
    FirstB,
    Horizontal,
    Vertical,
}

impl Choice {
    pub fn is_first_option(self) -> bool {
        matches!(self, Choice::FirstA | Choice::Horizontal)
    }

    pub fn other(self) -> Self {
        match self {
            Choice::FirstA => Choice::FirstB,
            Choice::FirstB => Choice::FirstA,
            Choice::Horizontal => Choice::Vertical,
            Choice::Vertical => Choice::Horizontal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Aligning,
    AwaitingResponse,
    BetweenTrials,
    Reorienting,
    Complete,
    Excluded,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Complete | Phase::Excluded | Phase::Aborted)
    }
}

fn default_trials() -> usize {
    50
}
fn default_mean_duty() -> f64 {
    80.0
}
fn default_jitter_sd() -> f64 {
    3.0
}
fn default_gap() -> f64 {
    500.0
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub task: Task,
    #[serde(default = "default_trials")]
    pub trials_per_block: usize,
    /// Anonymous participant identifier; also the record directory name.
    pub tsid: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub candidates: CandidateSet,
    #[serde(default)]
    pub apparatus: ApparatusConfig,
    #[serde(default)]
    pub first_orientation: FirstOrientation,
    /// Expected PWM duty of every motor, percent.
    #[serde(default = "default_mean_duty")]
    pub mean_duty_pct: f64,
    #[serde(default = "default_jitter_sd")]
    pub duty_jitter_sd_pct: f64,
    /// Gap between the two bursts of a VT-2PD pair.
    #[serde(default = "default_gap")]
    pub inter_stimulus_gap_ms: f64,
    /// Replies slower than this void the trial. Participant-paced when unset.
    #[serde(default)]
    pub response_deadline_ms: Option<f64>,
    #[serde(default)]
    pub reveal_feedback: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl SessionConfig {
    pub fn new(task: Task, tsid: impl Into<String>, seed: u64) -> Self {
        Self {
            task,
            trials_per_block: default_trials(),
            tsid: tsid.into(),
            seed,
            grid: GridConfig::default(),
            candidates: CandidateSet::default(),
            apparatus: ApparatusConfig::default(),
            first_orientation: FirstOrientation::default(),
            mean_duty_pct: default_mean_duty(),
            duty_jitter_sd_pct: default_jitter_sd(),
            inter_stimulus_gap_ms: default_gap(),
            response_deadline_ms: None,
            reveal_feedback: false,
            alpha: default_alpha(),
        }
    }

    pub fn planned_trials(&self) -> usize {
        self.trials_per_block * self.task.blocks()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        if self.trials_per_block == 0 {
            return bad("trials_per_block must be >= 1".into());
        }
        validate_tsid(&self.tsid)?;
        self.grid.validate().map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?;
        self.apparatus.validate().map_err(ProtocolError::InvalidConfig)?;
        if let Some(x) = self.candidates.separations().iter().find(|x| !self.apparatus.in_range(**x)) {
            return bad(format!("candidate {x} mm outside the apparatus range"));
        }
        if !(0.0..=100.0).contains(&self.mean_duty_pct) {
            return bad("mean_duty_pct must be in [0, 100]".into());
        }
        if !(self.duty_jitter_sd_pct.is_finite() && self.duty_jitter_sd_pct >= 0.0) {
            return bad("duty_jitter_sd_pct must be >= 0".into());
        }
        if !(self.inter_stimulus_gap_ms.is_finite() && self.inter_stimulus_gap_ms >= 0.0) {
            return bad("inter_stimulus_gap_ms must be >= 0".into());
        }
        if self.response_deadline_ms.is_some_and(|d| !(d > 0.0)) {
            return bad("response_deadline_ms must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must be in (0, 1)".into());
        }
        Ok(())
    }
}

/// A TSID doubles as a directory name: 1 to 64 characters of `[A-Za-z0-9_-]`.
pub fn validate_tsid(tsid: &str) -> Result<(), ProtocolError> {
    let ok = !tsid.is_empty()
        && tsid.len() <= 64
        && tsid.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(ProtocolError::InvalidConfig(format!("tsid {tsid:?} must be 1-64 characters of [A-Za-z0-9_-]")))
    }
}

/// Draws a motor duty from `Normal(mean, sd)` clamped to `[0, 100]`.
pub fn jittered_duty<R: Rng + ?Sized>(mean_duty: f64, sd: f64, rng: &mut R) -> f64 {
    let draw = if sd > 0.0 {
        Normal::new(mean_duty, sd).expect("finite sd").sample(rng)
    } else {
        mean_duty
    };
    draw.clamp(0.0, 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorDuty {
    pub motor: Motor,
    pub duty_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub block: usize,
    pub orientation: Orientation,
    pub separation_mm: f64,
    pub achieved_separation_mm: f64,
    pub contact_force_n: f64,
    pub target: Choice,
    pub response: Choice,
    pub correct: bool,
    pub response_time_ms: f64,
    pub intensity_duties: Vec<MotorDuty>,
    /// Posterior entropy (nats) after this trial's update.
    pub entropy_after: f64,
    /// Client-reported time of the response, as sent. Informational only;
    /// `response_time_ms` is measured on the server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoidedTrial {
    pub block: usize,
    /// Number of scored trials recorded before the void.
    pub after_trial: usize,
    pub separation_mm: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticeTrial {
    pub separation_mm: f64,
    pub orientation: Orientation,
    pub target: Choice,
    pub response: Choice,
    pub correct: bool,
    pub response_time_ms: f64,
}

/// What a client may know about the trial awaiting a response. Never
/// includes the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub index: usize,
    pub block: usize,
    pub orientation: Orientation,
    pub separation_mm: f64,
    pub options: [Choice; 2],
    pub practice: bool,
}

/// The physical stimulus, as felt by a (simulated) participant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresentedStimulus {
    pub task: Task,
    pub separation_mm: f64,
    pub orientation: Orientation,
    pub target: Choice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponderReply {
    pub choice: Choice,
    pub response_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponderError {
    Timeout,
    Aborted,
}

/// Source of 2IFC answers: a simulated observer or a human at a terminal.
pub trait Responder {
    fn respond(&mut self, stimulus: &PresentedStimulus) -> Result<ResponderReply, ResponderError>;
}

#[derive(Debug, Clone)]
struct PendingTrial {
    block: usize,
    orientation: Orientation,
    separation_mm: f64,
    achieved_mm: f64,
    force_n: f64,
    target: Choice,
    duties: Vec<MotorDuty>,
    practice: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub phase: Phase,
    /// Every planned trial has been recorded.
    pub finished: bool,
}

/// Builds the grid and likelihood cache for a config.
pub fn engine_for(config: &SessionConfig) -> Result<Bape, ProtocolError> {
    let grid = build_grid(&config.grid).map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?;
    Ok(Bape::new(Arc::new(grid), config.candidates.clone()))
}

pub struct Session {
    id: String,
    config: SessionConfig,
    engine: Arc<Bape>,
    apparatus: Box<dyn Apparatus>,
    rng: ChaCha8Rng,
    practice_rng: ChaCha8Rng,
    phase: Phase,
    posterior: Posterior,
    history: Vec<TrialRecord>,
    voided: Vec<VoidedTrial>,
    practice: Vec<PracticeTrial>,
    block: usize,
    first_orientation: Orientation,
    orientation: Orientation,
    next: Selection,
    pending: Option<PendingTrial>,
    alignment: AlignmentReport,
    bias_report: Option<BiasReport>,
    postmean: Option<Postmean>,
    timestamps: Timestamps,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("tsid", &self.config.tsid)
            .field("phase", &self.phase)
            .field("trials", &self.history.len())
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Validates the config, runs the alignment check and selects the first
    /// separation.
    pub fn start(
        id: impl Into<String>,
        config: SessionConfig,
        engine: Arc<Bape>,
        mut apparatus: Box<dyn Apparatus>,
    ) -> Result<Self, ProtocolError> {
        config.validate()?;
        let grid = build_grid(&config.grid).map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?;
        if **engine.grid() != grid || *engine.candidates() != config.candidates {
            return Err(ProtocolError::EngineMismatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let practice_rng = ChaCha8Rng::seed_from_u64(config.seed ^ PRACTICE_STREAM);
        let orientation = match config.first_orientation {
            FirstOrientation::Horizontal => Orientation::Horizontal,
            FirstOrientation::Vertical => Orientation::Vertical,
            FirstOrientation::Random => {
                if rng.random_bool(0.5) {
                    Orientation::Horizontal
                } else {
                    Orientation::Vertical
                }
            }
        };
        let started_ms = apparatus.elapsed_ms();
        let alignment = apparatus.run_alignment_check(&config.candidates)?;
        let posterior = engine.uniform_posterior();
        let next = engine.select_next(&posterior);
        Ok(Self {
            id: id.into(),
            config,
            engine,
            apparatus,
            rng,
            practice_rng,
            phase: Phase::BetweenTrials,
            posterior,
            history: Vec::new(),
            voided: Vec::new(),
            practice: Vec::new(),
            block: 0,
            first_orientation: orientation,
            orientation,
            next,
            pending: None,
            alignment,
            bias_report: None,
            postmean: None,
            timestamps: Timestamps { device_started_ms: started_ms, ..Timestamps::default() },
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn engine(&self) -> &Arc<Bape> {
        &self.engine
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    pub fn history(&self) -> &[TrialRecord] {
        &self.history
    }

    pub fn voided(&self) -> &[VoidedTrial] {
        &self.voided
    }

    pub fn practice_trials(&self) -> &[PracticeTrial] {
        &self.practice
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn first_orientation(&self) -> Orientation {
        self.first_orientation
    }

    /// Lookahead result for the next scored trial.
    pub fn next_selection(&self) -> &Selection {
        &self.next
    }

    pub fn alignment(&self) -> &AlignmentReport {
        &self.alignment
    }

    pub fn bias_report(&self) -> Option<&BiasReport> {
        self.bias_report.as_ref()
    }

    pub fn apparatus(&self) -> &dyn Apparatus {
        self.apparatus.as_ref()
    }

    pub fn timestamps(&self) -> &Timestamps {
        &self.timestamps
    }

    pub fn timestamps_mut(&mut self) -> &mut Timestamps {
        &mut self.timestamps
    }

    pub fn planned_trials(&self) -> usize {
        self.config.planned_trials()
    }

    pub fn is_finished(&self) -> bool {
        self.history.len() == self.planned_trials()
    }

    fn block_done(&self) -> bool {
        self.history.len() >= (self.block + 1) * self.config.trials_per_block
    }

    /// View of the trial awaiting a response, if any.
    pub fn pending_view(&self) -> Option<PendingView> {
        self.pending.as_ref().map(|p| PendingView {
            index: if p.practice { self.practice.len() } else { self.history.len() },
            block: p.block,
            orientation: p.orientation,
            separation_mm: p.separation_mm,
            options: self.config.task.options(),
            practice: p.practice,
        })
    }

    fn expect_phase(&self, phase: Phase, name: &'static str) -> Result<(), ProtocolError> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(ProtocolError::WrongPhase { expected: name, actual: self.phase })
        }
    }

    // Sets the separation, lowers, and fires the stimulus for `target`.
    fn deliver(
        &mut self,
        separation_mm: f64,
        target: Choice,
        duties: (f64, f64),
    ) -> Result<(f64, f64, Vec<MotorDuty>), ProtocolError> {
        let achieved = self.apparatus.set_separation(separation_mm)?;
        let tol = self.apparatus.config().separation_tolerance_mm;
        if !((achieved - separation_mm).abs() < tol) {
            return Err(ApparatusError::SeparationTolerance { target: separation_mm, achieved }.into());
        }
        let force = self.apparatus.lower_to_contact()?;
        let result = self.fire(target, duties);
        if result.is_err() {
            let _ = self.apparatus.raise();
        }
        result.map(|d| (achieved, force, d))
    }

    fn fire(&mut self, target: Choice, (d1, d2): (f64, f64)) -> Result<Vec<MotorDuty>, ProtocolError> {
        if self.config.task.is_orientation_task() {
            // A sits on the rig's horizontal axis; rotating the rig swaps which
            // partner lies horizontally on the skin.
            let partner = match (target, self.orientation) {
                (Choice::Horizontal, Orientation::Horizontal) | (Choice::Vertical, Orientation::Vertical) => Motor::A,
                _ => Motor::B,
            };
            let mut duties = [0.0; 3];
            duties[Motor::C.slot()] = d1;
            duties[partner.slot()] = d2;
            self.apparatus.burst(MotorMask::of(&[Motor::C, partner]), duties)?;
            Ok(vec![MotorDuty { motor: Motor::C, duty_pct: d1 }, MotorDuty { motor: partner, duty_pct: d2 }])
        } else {
            let (first, second) = match target {
                Choice::FirstA => (Motor::A, Motor::B),
                _ => (Motor::B, Motor::A),
            };
            let duties = [d1, d2, 0.0];
            self.apparatus.burst(MotorMask::of(&[first]), duties)?;
            self.apparatus.pause(self.config.inter_stimulus_gap_ms);
            self.apparatus.burst(MotorMask::of(&[second]), duties)?;
            Ok(vec![MotorDuty { motor: Motor::A, duty_pct: d1 }, MotorDuty { motor: Motor::B, duty_pct: d2 }])
        }
    }

    fn draw_trial(rng: &mut ChaCha8Rng, config: &SessionConfig) -> (Choice, (f64, f64)) {
        let options = config.task.options();
        let target = if rng.random_bool(0.5) { options[0] } else { options[1] };
        let d1 = jittered_duty(config.mean_duty_pct, config.duty_jitter_sd_pct, rng);
        let d2 = jittered_duty(config.mean_duty_pct, config.duty_jitter_sd_pct, rng);
        (target, (d1, d2))
    }

    /// Delivers the next scored stimulus and waits for a response.
    pub fn present_trial(&mut self) -> Result<PendingView, ProtocolError> {
        self.expect_phase(Phase::BetweenTrials, "BETWEEN_TRIALS")?;
        if self.is_finished() {
            return Err(ProtocolError::WrongPhase { expected: "trials remaining", actual: self.phase });
        }
        let separation = self.next.separation;
        let (target, duties) = Self::draw_trial(&mut self.rng, &self.config);
        let (achieved, force, duties) = self.deliver(separation, target, duties)?;
        self.pending = Some(PendingTrial {
            block: self.block,
            orientation: self.orientation,
            separation_mm: separation,
            achieved_mm: achieved,
            force_n: force,
            target,
            duties,
            practice: false,
        });
        self.phase = Phase::AwaitingResponse;
        Ok(self.pending_view().expect("pending trial set"))
    }

    /// Delivers a practice stimulus at one of the three largest candidates.
    /// Practice responses never reach the posterior.
    pub fn present_practice(&mut self) -> Result<PendingView, ProtocolError> {
        self.expect_phase(Phase::BetweenTrials, "BETWEEN_TRIALS")?;
        if !self.history.is_empty() {
            return Err(ProtocolError::WrongPhase { expected: "no scored trials yet", actual: self.phase });
        }
        let seps = self.config.candidates.separations();
        let top = seps.len().min(3);
        let separation = seps[seps.len() - 1 - self.practice.len() % top];
        let (target, duties) = Self::draw_trial(&mut self.practice_rng, &self.config);
        let (achieved, force, duties) = self.deliver(separation, target, duties)?;
        self.pending = Some(PendingTrial {
            block: self.block,
            orientation: self.orientation,
            separation_mm: separation,
            achieved_mm: achieved,
            force_n: force,
            target,
            duties,
            practice: true,
        });
        self.phase = Phase::AwaitingResponse;
        Ok(self.pending_view().expect("pending trial set"))
    }

    /// The physical stimulus currently on the skin, for simulated responders.
    pub fn presented_stimulus(&self) -> Option<PresentedStimulus> {
        self.pending.as_ref().map(|p| PresentedStimulus {
            task: self.config.task,
            separation_mm: p.separation_mm,
            orientation: p.orientation,
            target: p.target,
        })
    }

    /// Records the participant's answer to the pending trial.
    pub fn submit_response(&mut self, response: Choice, response_time_ms: f64) -> Result<TrialOutcome, ProtocolError> {
        self.submit_response_with_client_time(response, response_time_ms, None)
    }

    /// [`Session::submit_response`], keeping the client's own timestamp on the
    /// scored record.
    pub fn submit_response_with_client_time(
        &mut self,
        response: Choice,
        response_time_ms: f64,
        client_timestamp: Option<String>,
    ) -> Result<TrialOutcome, ProtocolError> {
        self.expect_phase(Phase::AwaitingResponse, "AWAITING_RESPONSE")?;
        if !self.config.task.options().contains(&response) {
            return Err(ProtocolError::InvalidResponse { response, task: self.config.task });
        }
        let pending = self.pending.take().expect("pending trial in AWAITING_RESPONSE");
        if let Err(e) = self.apparatus.raise() {
            self.pending = Some(pending);
            return Err(e.into());
        }
        let correct = response == pending.target;
        if pending.practice {
            self.practice.push(PracticeTrial {
                separation_mm: pending.separation_mm,
                orientation: pending.orientation,
                target: pending.target,
                response,
                correct,
                response_time_ms,
            });
            self.phase = Phase::BetweenTrials;
            let record = TrialRecord {
                index: self.practice.len() - 1,
                block: pending.block,
                orientation: pending.orientation,
                separation_mm: pending.separation_mm,
                achieved_separation_mm: pending.achieved_mm,
                contact_force_n: pending.force_n,
                target: pending.target,
                response,
                correct,
                response_time_ms,
                intensity_duties: pending.duties,
                entropy_after: self.posterior.entropy(),
                client_timestamp: None,
            };
            return Ok(TrialOutcome { record, phase: self.phase, finished: false });
        }

        self.posterior = self.engine.update(&self.posterior, pending.separation_mm, Outcome::from(correct))?;
        let record = TrialRecord {
            index: self.history.len(),
            block: pending.block,
            orientation: pending.orientation,
            separation_mm: pending.separation_mm,
            achieved_separation_mm: pending.achieved_mm,
            contact_force_n: pending.force_n,
            target: pending.target,
            response,
            correct,
            response_time_ms,
            intensity_duties: pending.duties,
            entropy_after: self.posterior.entropy(),
            client_timestamp,
        };
        self.history.push(record.clone());
        let finished = self.is_finished();
        if !finished {
            self.next = self.engine.select_next(&self.posterior);
        }
        self.phase = if !finished && self.block_done() { Phase::Reorienting } else { Phase::BetweenTrials };
        Ok(TrialOutcome { record, phase: self.phase, finished })
    }

    /// Voids the pending trial. The posterior is untouched and the next
    /// separation is re-selected.
    pub fn void_pending(&mut self, reason: impl Into<String>) -> Result<VoidedTrial, ProtocolError> {
        self.expect_phase(Phase::AwaitingResponse, "AWAITING_RESPONSE")?;
        let pending = self.pending.take().expect("pending trial in AWAITING_RESPONSE");
        self.apparatus.raise()?;
        self.phase = Phase::BetweenTrials;
        if pending.practice {
            return Ok(VoidedTrial {
                block: pending.block,
                after_trial: 0,
                separation_mm: pending.separation_mm,
                reason: reason.into(),
            });
        }
        let void = VoidedTrial {
            block: pending.block,
            after_trial: self.history.len(),
            separation_mm: pending.separation_mm,
            reason: reason.into(),
        };
        self.voided.push(void.clone());
        self.next = self.engine.select_next(&self.posterior);
        Ok(void)
    }

    /// Runs one scored trial against `responder`. A timeout voids the trial
    /// and returns [`ProtocolError::ResponderTimeout`]; the session is left
    /// ready to re-run it.
    pub fn run_trial(&mut self, responder: &mut dyn Responder) -> Result<TrialOutcome, ProtocolError> {
        self.present_trial()?;
        let stimulus = self.presented_stimulus().expect("stimulus on skin");
        match responder.respond(&stimulus) {
            Ok(reply) if self.config.response_deadline_ms.is_some_and(|d| reply.response_time_ms > d) => {
                self.void_pending("response deadline exceeded")?;
                Err(ProtocolError::ResponderTimeout)
            }
            Ok(reply) => self.submit_response(reply.choice, reply.response_time_ms),
            Err(ResponderError::Timeout) => {
                self.void_pending("responder timeout")?;
                Err(ProtocolError::ResponderTimeout)
            }
            Err(ResponderError::Aborted) => {
                self.abort();
                Err(ProtocolError::ResponderAborted)
            }
        }
    }

    /// Runs one practice trial against `responder`.
    pub fn run_practice_trial(&mut self, responder: &mut dyn Responder) -> Result<(), ProtocolError> {
        self.present_practice()?;
        let stimulus = self.presented_stimulus().expect("stimulus on skin");
        match responder.respond(&stimulus) {
            Ok(reply) => self.submit_response(reply.choice, reply.response_time_ms).map(|_| ()),
            Err(ResponderError::Timeout) => self.void_pending("practice timeout").map(|_| ()),
            Err(ResponderError::Aborted) => {
                self.abort();
                Err(ProtocolError::ResponderAborted)
            }
        }
    }

    /// Toggles the orientation after block 1 of a bidirectional session. The
    /// posterior carries over unchanged.
    pub fn advance_block(&mut self) -> Result<Orientation, ProtocolError> {
        self.expect_phase(Phase::Reorienting, "REORIENTING")?;
        let next = self.orientation.toggled();
        self.apparatus.reorient(next)?;
        self.orientation = next;
        self.block += 1;
        self.phase = Phase::BetweenTrials;
        Ok(next)
    }

    /// Runs every remaining trial, advancing blocks as needed, then finalizes.
    pub fn run_to_completion(&mut self, responder: &mut dyn Responder) -> Result<SessionRecord, ProtocolError> {
        let mut voids = 0;
        while !self.is_finished() {
            if self.phase == Phase::Reorienting {
                self.advance_block()?;
            }
            match self.run_trial(responder) {
                Ok(_) => voids = 0,
                Err(ProtocolError::ResponderTimeout) if voids < MAX_CONSECUTIVE_VOIDS => voids += 1,
                Err(e) => return Err(e),
            }
        }
        self.finalize()
    }

    /// Runs the bias guard, computes the postmean and closes the session as
    /// COMPLETE or EXCLUDED.
    pub fn finalize(&mut self) -> Result<SessionRecord, ProtocolError> {
        if !self.is_finished() || self.history.is_empty() {
            return Err(ProtocolError::Incomplete { recorded: self.history.len(), planned: self.planned_trials() });
        }
        self.expect_phase(Phase::BetweenTrials, "BETWEEN_TRIALS")?;
        let report = run_bias_guard(&self.history, self.config.alpha);
        self.phase = if report.excluded { Phase::Excluded } else { Phase::Complete };
        self.bias_report = Some(report);
        self.postmean = Some(self.posterior.postmean_curve(&export_grid())?);
        self.timestamps.device_finished_ms = Some(self.apparatus.elapsed_ms());
        Ok(self.to_record())
    }

    /// Closes the session without analysis. Idempotent on terminal phases.
    pub fn abort(&mut self) {
        if self.phase.is_terminal() {
            return;
        }
        if self.pending.take().is_some() {
            let _ = self.apparatus.raise();
        }
        self.phase = Phase::Aborted;
        self.timestamps.device_finished_ms = Some(self.apparatus.elapsed_ms());
    }

    /// Snapshot of the session as a persistable record. The pending trial's
    /// target is never included.
    pub fn to_record(&self) -> SessionRecord {
        SessionRecord {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            tsid: self.config.tsid.clone(),
            phase: self.phase,
            config: self.config.clone(),
            first_orientation: self.first_orientation,
            alignment: self.alignment.clone(),
            trials: self.history.clone(),
            voided: self.voided.clone(),
            practice: self.practice.clone(),
            postmean: self.postmean.clone(),
            bias_report: self.bias_report.clone(),
            timestamps: self.timestamps.clone(),
        }
    }
}
