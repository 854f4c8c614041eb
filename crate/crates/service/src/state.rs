use std::collections::HashMap;
use std::io::BufReader;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use serde_json::Value;
use tokio::sync::broadcast;
use vibropsi_core::apparatus::bridge::LineBridge;
use vibropsi_core::apparatus::{Apparatus, ApparatusError, FaultProfile, SimulatedApparatus};
use vibropsi_core::bape::{Bape, Posterior, Postmean};
use vibropsi_core::protocol::{
    engine_for, Phase, RecordStore, Session, SessionConfig, SessionRecord, MAX_CONSECUTIVE_VOIDS,
};
use vibropsi_core::psymodel::export_grid;
use vibropsi_core::simulation::device_seed;
use vibropsi_core::stats::run_bias_guard;

use crate::api::*;
use crate::config::{Backend, ServiceConfig};

const BRIDGE_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const DEFAULT_PAGE: usize = 100;
const MAX_PAGE: usize = 1000;
const EVENT_BUFFER: usize = 64;

/// Opens the rig for a session: a seeded simulator or a TCP bridge.
pub fn open_apparatus(
    config: &SessionConfig,
    backend: &BackendRequest,
    simulator_real_time: bool,
) -> Result<Box<dyn Apparatus>, ApparatusError> {
    match backend {
        BackendRequest::Simulator { fault } => Ok(Box::new(
            SimulatedApparatus::new(config.apparatus.clone(), device_seed(config.seed))
                .with_fault(fault.clone())
                .with_real_time(simulator_real_time),
        )),
        BackendRequest::Bridge { address } => {
            let unreachable = |e: std::io::Error| ApparatusError::Unreachable(format!("{address}: {e}"));
            let addr = address
                .to_socket_addrs()
                .map_err(unreachable)?
                .next()
                .ok_or_else(|| ApparatusError::Unreachable(format!("{address}: no address")))?;
            let stream = TcpStream::connect_timeout(&addr, BRIDGE_CONNECT_TIMEOUT).map_err(unreachable)?;
            let reader = BufReader::new(stream.try_clone().map_err(unreachable)?);
            Ok(Box::new(LineBridge::new(config.apparatus.clone(), reader, stream)))
        }
    }
}

/// Wall-clock stamp in RFC 3339, UTC, millisecond precision.
pub fn now_stamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Entry {
    session: Session,
    presented_at: Option<Instant>,
    consecutive_voids: usize,
    postmean: Option<(usize, Postmean)>,
}

/// A serialized live document and whether it is the session's last.
#[derive(Clone)]
pub(crate) struct LiveEvent {
    pub doc: Arc<str>,
    pub terminal: bool,
}

pub(crate) struct LiveSession {
    tsid: String,
    entry: Mutex<Entry>,
    events: broadcast::Sender<LiveEvent>,
}

impl LiveSession {
    fn lock(&self) -> Result<MutexGuard<'_, Entry>, ApiError> {
        self.entry.lock().map_err(|_| ApiError::internal("session state poisoned by an earlier failure"))
    }

    pub(crate) fn subscribe(&self) -> broadcast::Receiver<LiveEvent> {
        self.events.subscribe()
    }
}

#[derive(Clone)]
enum Slot {
    Live(Arc<LiveSession>),
    Stored { tsid: String },
}

pub(crate) enum Found {
    Live(Arc<LiveSession>),
    Stored(SessionRecord),
}

/// Shared service state. Each live session sits behind its own mutex, so one
/// mutation runs per session while different sessions proceed independently.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    store: RecordStore,
    engines: Mutex<HashMap<String, Arc<Bape>>>,
    sessions: RwLock<HashMap<String, Slot>>,
}

impl AppState {
    /// Opens the record store. Records left in a non-terminal phase by an
    /// earlier process are rewritten as ABORTED; nothing is resumed.
    pub fn new(config: ServiceConfig) -> Result<Self, ApiError> {
        let store = RecordStore::new(&config.data_dir);
        let mut sessions = HashMap::new();
        for path in store.record_paths()? {
            let mut record = match SessionRecord::load(&path) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!("skipping unreadable record: {e}");
                    continue;
                }
            };
            if !record.phase.is_terminal() {
                tracing::warn!(session = %record.session_id, "marking interrupted session ABORTED");
                record.phase = Phase::Aborted;
                record.timestamps.finished_at = Some(now_stamp());
                store.save(&record)?;
            }
            sessions.insert(record.session_id.clone(), Slot::Stored { tsid: record.tsid.clone() });
        }
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                store,
                engines: Mutex::new(HashMap::new()),
                sessions: RwLock::new(sessions),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &RecordStore {
        &self.inner.store
    }

    pub(crate) fn live_count(&self) -> usize {
        let sessions = self.inner.sessions.read().expect("session index poisoned");
        sessions.values().filter(|s| matches!(s, Slot::Live(_))).count()
    }

    fn engine(&self, config: &SessionConfig) -> Result<Arc<Bape>, ApiError> {
        let key = serde_json::to_string(&(&config.grid, &config.candidates)).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut engines = self.inner.engines.lock().map_err(|_| ApiError::internal("engine cache poisoned"))?;
        if let Some(e) = engines.get(&key) {
            return Ok(e.clone());
        }
        let engine = Arc::new(engine_for(config)?);
        engines.insert(key, engine.clone());
        Ok(engine)
    }

    fn apparatus(&self, config: &SessionConfig, backend: Option<BackendRequest>) -> Result<Box<dyn Apparatus>, ApiError> {
        let backend = backend.unwrap_or(match &self.inner.config.apparatus {
            Backend::Simulator => BackendRequest::Simulator { fault: FaultProfile::None },
            Backend::Bridge(address) => BackendRequest::Bridge { address: address.clone() },
        });
        Ok(open_apparatus(config, &backend, self.inner.config.simulator_real_time)?)
    }

    pub(crate) fn find(&self, id: &str) -> Result<Found, ApiError> {
        let slot = {
            let sessions = self.inner.sessions.read().expect("session index poisoned");
            sessions.get(id).cloned()
        };
        match slot {
            Some(Slot::Live(s)) => Ok(Found::Live(s)),
            Some(Slot::Stored { tsid }) => Ok(Found::Stored(self.inner.store.load(&tsid, id)?)),
            None => Err(ApiError::unknown_session(id)),
        }
    }

    fn tsid_of(&self, id: &str) -> Result<String, ApiError> {
        let sessions = self.inner.sessions.read().expect("session index poisoned");
        match sessions.get(id) {
            Some(Slot::Live(s)) => Ok(s.tsid.clone()),
            Some(Slot::Stored { tsid }) => Ok(tsid.clone()),
            None => Err(ApiError::unknown_session(id)),
        }
    }

    fn persist(&self, live: &LiveSession, entry: &mut Entry) -> Result<(), ApiError> {
        let session = &mut entry.session;
        if session.phase().is_terminal() && session.timestamps().finished_at.is_none() {
            session.timestamps_mut().finished_at = Some(now_stamp());
        }
        self.inner.store.save(&session.to_record())?;
        if live.events.receiver_count() > 0 {
            if let Ok(doc) = live_state(entry).and_then(|d| serde_json::to_string(&d).map_err(|e| ApiError::internal(e.to_string()))) {
                let terminal = entry.session.phase().is_terminal();
                let _ = live.events.send(LiveEvent { doc: Arc::from(doc), terminal });
            }
        }
        Ok(())
    }

    // Presents the next scored trial. An apparatus failure here leaves the
    // session unable to continue, so it is aborted and persisted.
    fn present_next(&self, live: &LiveSession, entry: &mut Entry) -> Result<(), ApiError> {
        match entry.session.present_trial() {
            Ok(_) => {
                entry.presented_at = Some(Instant::now());
                Ok(())
            }
            Err(e) => {
                tracing::error!(session = %entry.session.id(), "presentation failed: {e}");
                entry.session.abort();
                self.persist(live, entry)?;
                Err(e.into())
            }
        }
    }

    /// Starts a session and presents its first stimulus.
    pub fn create_session(&self, body: &[u8]) -> Result<Transition, ApiError> {
        let (config, backend) = parse_create(body)?;
        config.validate()?;
        let engine = self.engine(&config)?;
        let apparatus = self.apparatus(&config, backend)?;
        let id = uuid::Uuid::new_v4().to_string();
        let mut session = Session::start(id.clone(), config, engine, apparatus)?;
        session.timestamps_mut().created_at = Some(now_stamp());
        let (tx, _) = broadcast::channel(EVENT_BUFFER);
        let live = Arc::new(LiveSession {
            tsid: session.config().tsid.clone(),
            entry: Mutex::new(Entry { session, presented_at: None, consecutive_voids: 0, postmean: None }),
            events: tx,
        });
        self.inner.sessions.write().expect("session index poisoned").insert(id.clone(), Slot::Live(live.clone()));
        let mut entry = live.lock()?;
        self.present_next(&live, &mut entry)?;
        self.persist(&live, &mut entry)?;
        tracing::info!(session = %id, tsid = %live.tsid, "session started");
        Ok(transition(&entry.session))
    }

    pub fn submit_response(&self, id: &str, body: &[u8]) -> Result<ResponseResult, ApiError> {
        let req: ResponseRequest = parse_json(body)?;
        let live = match self.find(id)? {
            Found::Live(l) => l,
            Found::Stored(r) => return Err(ApiError::from(vibropsi_core::protocol::ProtocolError::WrongPhase {
                expected: "AWAITING_RESPONSE",
                actual: r.phase,
            })),
        };
        let mut entry = live.lock()?;
        let entry = &mut *entry;
        if entry.session.phase() != Phase::AwaitingResponse {
            return Err(vibropsi_core::protocol::ProtocolError::WrongPhase {
                expected: "AWAITING_RESPONSE",
                actual: entry.session.phase(),
            }
            .into());
        }
        let rt_ms = entry.presented_at.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1000.0);
        let reveal = entry.session.config().reveal_feedback;

        if entry.session.config().response_deadline_ms.is_some_and(|d| rt_ms > d) {
            entry.session.void_pending(format!("response after {rt_ms:.0} ms deadline"))?;
            entry.consecutive_voids += 1;
            if entry.consecutive_voids >= MAX_CONSECUTIVE_VOIDS {
                entry.session.abort();
            } else {
                self.present_next(&live, entry)?;
            }
            self.persist(&live, entry)?;
            return Ok(ResponseResult {
                schema_version: API_SCHEMA_VERSION,
                trial: None,
                voided: true,
                phase: entry.session.phase(),
                finished: false,
                pending: entry.session.pending_view(),
                session: handle(&entry.session),
            });
        }

        let outcome = entry.session.submit_response_with_client_time(req.response, rt_ms, req.client_timestamp)?;
        entry.consecutive_voids = 0;
        entry.presented_at = None;
        if outcome.finished {
            entry.session.finalize()?;
            tracing::info!(session = %id, phase = ?entry.session.phase(), "session finished");
        } else if outcome.phase == Phase::BetweenTrials {
            self.present_next(&live, entry)?;
        }
        self.persist(&live, entry)?;
        Ok(ResponseResult {
            schema_version: API_SCHEMA_VERSION,
            trial: Some(TrialEcho::new(&outcome.record, reveal)),
            voided: false,
            phase: entry.session.phase(),
            finished: outcome.finished,
            pending: entry.session.pending_view(),
            session: handle(&entry.session),
        })
    }

    /// Leaves REORIENTING once the rig has been rotated and presents the first
    /// trial of the next block.
    pub fn advance(&self, id: &str) -> Result<Transition, ApiError> {
        let live = match self.find(id)? {
            Found::Live(l) => l,
            Found::Stored(r) => return Err(vibropsi_core::protocol::ProtocolError::WrongPhase {
                expected: "REORIENTING",
                actual: r.phase,
            }
            .into()),
        };
        let mut entry = live.lock()?;
        entry.session.advance_block()?;
        self.present_next(&live, &mut entry)?;
        self.persist(&live, &mut entry)?;
        Ok(transition(&entry.session))
    }

    pub fn abort(&self, id: &str) -> Result<SessionHandle, ApiError> {
        match self.find(id)? {
            Found::Live(live) => {
                let mut entry = live.lock()?;
                if !entry.session.phase().is_terminal() {
                    entry.session.abort();
                    entry.presented_at = None;
                    self.persist(&live, &mut entry)?;
                    tracing::info!(session = %id, "session aborted");
                }
                Ok(handle(&entry.session))
            }
            Found::Stored(r) => Ok(SessionHandle::from_record(&r)),
        }
    }

    pub fn handle(&self, id: &str) -> Result<SessionHandle, ApiError> {
        match self.find(id)? {
            Found::Live(live) => Ok(handle(&live.lock()?.session)),
            Found::Stored(r) => Ok(SessionHandle::from_record(&r)),
        }
    }

    pub fn live_state(&self, id: &str) -> Result<LiveState, ApiError> {
        match self.find(id)? {
            Found::Live(live) => live_state(&mut *live.lock()?),
            Found::Stored(r) => self.stored_live_state(&r),
        }
    }

    /// The current live document, plus a subscription for later ones unless
    /// the session is already over.
    pub(crate) fn live_json(&self, id: &str) -> Result<(String, Option<broadcast::Receiver<LiveEvent>>), ApiError> {
        let (doc, rx) = match self.find(id)? {
            Found::Live(live) => {
                let mut entry = live.lock()?;
                let doc = live_state(&mut entry)?;
                // Subscribing under the lock means no transition slips between
                // the snapshot and the stream.
                let rx = (!doc.phase.is_terminal()).then(|| live.subscribe());
                (doc, rx)
            }
            Found::Stored(r) => (self.stored_live_state(&r)?, None),
        };
        let text = serde_json::to_string(&doc).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok((text, rx))
    }

    // Finished and recovered sessions are rebuilt by replaying their trials.
    fn stored_live_state(&self, r: &SessionRecord) -> Result<LiveState, ApiError> {
        let engine = self.engine(&r.config)?;
        let mut posterior: Posterior = engine.uniform_posterior();
        for t in &r.trials {
            posterior = engine.update(&posterior, t.separation_mm, t.correct.into()).map_err(vibropsi_core::protocol::ProtocolError::from)?;
        }
        let postmean = match &r.postmean {
            Some(p) => p.clone(),
            None => posterior.postmean_curve(&export_grid()).map_err(vibropsi_core::protocol::ProtocolError::from)?,
        };
        Ok(LiveState {
            schema_version: API_SCHEMA_VERSION,
            session_id: r.session_id.clone(),
            tsid: r.tsid.clone(),
            task: r.config.task,
            phase: r.phase,
            block: r.trials.last().map_or(0, |t| t.block),
            orientation: r.trials.last().map_or(r.first_orientation, |t| t.orientation),
            trial_counter: r.trials.len(),
            planned_trials: r.config.planned_trials(),
            pending: None,
            next_separation_mm: None,
            history: r.trials.iter().map(HistoryPoint::from).collect(),
            entropy: posterior.entropy(),
            expected_params: posterior.expected_params(),
            postmean,
            marginals: posterior.marginals(),
            bias: r.bias_report.clone().unwrap_or_else(|| run_bias_guard(&r.trials, r.config.alpha)),
            voided_count: r.voided.len(),
        })
    }

    /// The persisted file, byte for byte.
    pub fn record_bytes(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        let tsid = self.tsid_of(id)?;
        let path = self.inner.store.path_for(&tsid, id)?;
        std::fs::read(&path).map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR", format!("{}: {e}", path.display())))
    }

    pub fn list(&self, q: &ListQuery) -> Result<SessionList, ApiError> {
        let since = q.since.as_deref().map(parse_instant).transpose()?;
        let until = q.until.as_deref().map(parse_instant).transpose()?;
        if let Some(t) = &q.tsid {
            if vibropsi_core::protocol::validate_tsid(t).is_err() {
                return Ok(SessionList { schema_version: API_SCHEMA_VERSION, total: 0, offset: q.offset, sessions: Vec::new() });
            }
        }
        let ids: Vec<String> = {
            let sessions = self.inner.sessions.read().expect("session index poisoned");
            sessions.keys().cloned().collect()
        };
        let mut handles = Vec::new();
        for id in ids {
            let h = match self.handle(&id) {
                Ok(h) => h,
                Err(e) => {
                    tracing::warn!(session = %id, "listing skipped a session: {}", e.message);
                    continue;
                }
            };
            if q.tsid.as_ref().is_some_and(|t| *t != h.tsid) || q.phase.is_some_and(|p| p != h.phase) {
                continue;
            }
            if since.is_some() || until.is_some() {
                let Some(created) = h.created_at.as_deref().and_then(|c| DateTime::parse_from_rfc3339(c).ok()) else {
                    continue;
                };
                let created = created.with_timezone(&Utc);
                if since.is_some_and(|s| created < s) || until.is_some_and(|u| created >= u) {
                    continue;
                }
            }
            handles.push(h);
        }
        handles.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.session_id.cmp(&b.session_id)));
        let total = handles.len();
        let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
        let sessions = handles.into_iter().skip(q.offset).take(limit).collect();
        Ok(SessionList { schema_version: API_SCHEMA_VERSION, total, offset: q.offset, sessions })
    }
}

fn parse_instant(s: &str) -> Result<DateTime<Utc>, ApiError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc())
        .map_err(|_| ApiError::validation(format!("{s:?} is neither RFC 3339 nor YYYY-MM-DD")))
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("request body: {e}")))
}

// The create body is a session config plus an optional `backend`. A missing
// seed is drawn at random and stored in the record.
fn parse_create(body: &[u8]) -> Result<(SessionConfig, Option<BackendRequest>), ApiError> {
    let mut doc: Value = parse_json(body)?;
    let obj = doc.as_object_mut().ok_or_else(|| ApiError::validation("request body must be a JSON object"))?;
    let backend = obj
        .remove("backend")
        .map(serde_json::from_value::<BackendRequest>)
        .transpose()
        .map_err(|e| ApiError::validation(format!("backend: {e}")))?;
    obj.entry("seed").or_insert_with(|| Value::from(rand::random::<u64>()));
    let config = serde_json::from_value(doc).map_err(|e| ApiError::validation(format!("session config: {e}")))?;
    Ok((config, backend))
}

fn handle(s: &Session) -> SessionHandle {
    SessionHandle {
        schema_version: API_SCHEMA_VERSION,
        session_id: s.id().to_string(),
        tsid: s.config().tsid.clone(),
        task: s.config().task,
        created_at: s.timestamps().created_at.clone(),
        phase: s.phase(),
        trial_counter: s.history().len(),
        planned_trials: s.planned_trials(),
    }
}

fn transition(s: &Session) -> Transition {
    Transition {
        schema_version: API_SCHEMA_VERSION,
        session: handle(s),
        orientation: s.orientation(),
        pending: s.pending_view(),
        alignment: s.alignment().clone(),
    }
}

fn live_state(entry: &mut Entry) -> Result<LiveState, ApiError> {
    let s = &entry.session;
    let n = s.posterior().trial_count();
    let postmean = match &entry.postmean {
        Some((count, p)) if *count == n => p.clone(),
        _ => {
            let p = s.posterior().postmean_curve(&export_grid()).map_err(vibropsi_core::protocol::ProtocolError::from)?;
            entry.postmean = Some((n, p.clone()));
            p
        }
    };
    let s = &entry.session;
    let next = (!s.phase().is_terminal() && !s.is_finished()).then(|| s.next_selection().separation);
    Ok(LiveState {
        schema_version: API_SCHEMA_VERSION,
        session_id: s.id().to_string(),
        tsid: s.config().tsid.clone(),
        task: s.config().task,
        phase: s.phase(),
        block: s.block(),
        orientation: s.orientation(),
        trial_counter: s.history().len(),
        planned_trials: s.planned_trials(),
        pending: s.pending_view(),
        next_separation_mm: next,
        history: s.history().iter().map(HistoryPoint::from).collect(),
        entropy: s.posterior().entropy(),
        expected_params: s.posterior().expected_params(),
        postmean,
        marginals: s.posterior().marginals(),
        bias: run_bias_guard(s.history(), s.config().alpha),
        voided_count: s.voided().len(),
    })
}
