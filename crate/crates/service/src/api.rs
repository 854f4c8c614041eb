//! Request and response documents. Every response carries `schema_version`;
//! every request rejects unknown fields.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vibropsi_core::apparatus::{AlignmentReport, ApparatusError, FaultProfile};
use vibropsi_core::bape::{Marginals, ParamExpectation, Postmean};
use vibropsi_core::protocol::{
    Choice, Orientation, PendingView, Phase, ProtocolError, RecordError, SessionRecord, Task, TrialRecord,
};
use vibropsi_core::stats::BiasReport;

pub const API_SCHEMA_VERSION: u32 = 1;

/// Per-request rig selection. Defaults to the service's configured backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum BackendRequest {
    Simulator {
        #[serde(default)]
        fault: FaultProfile,
    },
    Bridge {
        address: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRequest {
    pub response: Choice,
    /// Free-form client clock reading, stored with the trial.
    #[serde(default)]
    pub client_timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub schema_version: u32,
    pub session_id: String,
    pub tsid: String,
    pub task: Task,
    pub created_at: Option<String>,
    pub phase: Phase,
    pub trial_counter: usize,
    pub planned_trials: usize,
}

impl SessionHandle {
    pub fn from_record(r: &SessionRecord) -> Self {
        Self {
            schema_version: API_SCHEMA_VERSION,
            session_id: r.session_id.clone(),
            tsid: r.tsid.clone(),
            task: r.config.task,
            created_at: r.timestamps.created_at.clone(),
            phase: r.phase,
            trial_counter: r.trials.len(),
            planned_trials: r.config.planned_trials(),
        }
    }
}

/// Result of a transition that presents a stimulus: create and advance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub schema_version: u32,
    pub session: SessionHandle,
    pub orientation: Orientation,
    pub pending: Option<PendingView>,
    pub alignment: AlignmentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionList {
    pub schema_version: u32,
    pub total: usize,
    pub offset: usize,
    pub sessions: Vec<SessionHandle>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListQuery {
    pub tsid: Option<String>,
    pub phase: Option<Phase>,
    /// Inclusive lower bound on `created_at`, RFC 3339 or `YYYY-MM-DD`.
    pub since: Option<String>,
    /// Exclusive upper bound on `created_at`.
    pub until: Option<String>,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

/// A scored trial as echoed to the client. `target` and `correct` appear only
/// when the session reveals feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEcho {
    pub index: usize,
    pub block: usize,
    pub orientation: Orientation,
    pub separation_mm: f64,
    pub response: Choice,
    pub response_time_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Choice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl TrialEcho {
    pub fn new(t: &TrialRecord, reveal: bool) -> Self {
        Self {
            index: t.index,
            block: t.block,
            orientation: t.orientation,
            separation_mm: t.separation_mm,
            response: t.response,
            response_time_ms: t.response_time_ms,
            target: reveal.then_some(t.target),
            correct: reveal.then_some(t.correct),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseResult {
    pub schema_version: u32,
    /// `None` when the response arrived after the deadline and the trial was
    /// voided.
    pub trial: Option<TrialEcho>,
    pub voided: bool,
    pub phase: Phase,
    pub finished: bool,
    pub pending: Option<PendingView>,
    pub session: SessionHandle,
}

/// One completed trial in the live view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub index: usize,
    pub block: usize,
    pub separation_mm: f64,
    pub correct: bool,
    pub response: Choice,
    pub response_time_ms: f64,
    pub entropy_after: f64,
}

impl From<&TrialRecord> for HistoryPoint {
    fn from(t: &TrialRecord) -> Self {
        Self {
            index: t.index,
            block: t.block,
            separation_mm: t.separation_mm,
            correct: t.correct,
            response: t.response,
            response_time_ms: t.response_time_ms,
            entropy_after: t.entropy_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveState {
    pub schema_version: u32,
    pub session_id: String,
    pub tsid: String,
    pub task: Task,
    pub phase: Phase,
    pub block: usize,
    pub orientation: Orientation,
    pub trial_counter: usize,
    pub planned_trials: usize,
    /// The trial awaiting a response, without its target.
    pub pending: Option<PendingView>,
    /// Separation queued for the next scored trial.
    pub next_separation_mm: Option<f64>,
    pub history: Vec<HistoryPoint>,
    /// Posterior entropy in nats.
    pub entropy: f64,
    pub expected_params: ParamExpectation,
    pub postmean: Postmean,
    pub marginals: Marginals,
    /// Bias guard over the trials so far.
    pub bias: BiasReport,
    pub voided_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub schema_version: u32,
    pub status: String,
    pub version: String,
    pub apparatus: String,
    pub live_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub schema_version: u32,
    pub error: ErrorBody,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "VALIDATION_ERROR", message)
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("no session {id:?}"))
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing or wrong operator token")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    fn alignment(report: &AlignmentReport) -> Self {
        Self {
            details: serde_json::to_value(report).ok().map(|r| serde_json::json!({ "alignment": r })),
            ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "ALIGNMENT_FAILED", "alignment check failed; see the force table")
        }
    }

    pub fn document(&self) -> ErrorDocument {
        ErrorDocument {
            schema_version: API_SCHEMA_VERSION,
            error: ErrorBody { code: self.code.to_string(), message: self.message.clone(), details: self.details.clone() },
        }
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        match &e {
            ProtocolError::InvalidConfig(_) | ProtocolError::InvalidResponse { .. } => Self::validation(e.to_string()),
            ProtocolError::WrongPhase { actual, .. } => Self {
                details: Some(serde_json::json!({ "phase": actual })),
                ..Self::new(StatusCode::CONFLICT, "WRONG_PHASE", e.to_string())
            },
            ProtocolError::Apparatus(a) => a.clone().into(),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<ApparatusError> for ApiError {
    fn from(e: ApparatusError) -> Self {
        match &e {
            ApparatusError::AlignmentFailed(report) => Self::alignment(report),
            _ => Self::new(StatusCode::BAD_GATEWAY, "APPARATUS_ERROR", e.to_string()),
        }
    }
}

impl From<RecordError> for ApiError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::InvalidId(_) => Self::validation(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, axum::Json(self.document())).into_response()
    }
}
