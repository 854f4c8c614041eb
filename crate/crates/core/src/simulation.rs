//! Seeded end-to-end runs against the simulated rig and a simulated observer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apparatus::{FaultProfile, SimulatedApparatus};
use crate::bape::Bape;
use crate::observer::{ObserverError, ObserverModel, SimulatedObserver};
use crate::protocol::{ProtocolError, Session, SessionConfig, SessionRecord};

const OBSERVER_STREAM: u64 = 0x4f42_5345_5256_4552;
const DEVICE_STREAM: u64 = 0x4445_5649_4345_0000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// A batch simulation: session template, observer and optional rig fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub session: SessionConfig,
    pub observer: ObserverModel,
    #[serde(default)]
    pub fault: FaultProfile,
}

pub fn observer_seed(session_seed: u64) -> u64 {
    session_seed ^ OBSERVER_STREAM
}

pub fn device_seed(session_seed: u64) -> u64 {
    session_seed ^ DEVICE_STREAM
}

pub fn session_id(seed: u64, run: usize) -> String {
    format!("sim-{seed}-{run}")
}

/// Starts a session on a fresh simulated rig. The observer and the rig get
/// their own streams derived from `config.seed`.
pub fn start_simulated(
    id: impl Into<String>,
    config: SessionConfig,
    engine: Arc<Bape>,
    observer: ObserverModel,
    fault: FaultProfile,
) -> Result<(Session, SimulatedObserver), SimulationError> {
    let device = SimulatedApparatus::new(config.apparatus.clone(), device_seed(config.seed)).with_fault(fault);
    let responder =
        SimulatedObserver::new(observer, observer_seed(config.seed))?.with_deadline(config.response_deadline_ms);
    let session = Session::start(id, config, engine, Box::new(device))?;
    Ok((session, responder))
}

/// Runs one full session and returns its finalized record.
pub fn run_simulated(
    id: impl Into<String>,
    config: SessionConfig,
    engine: Arc<Bape>,
    observer: ObserverModel,
    fault: FaultProfile,
) -> Result<SessionRecord, SimulationError> {
    let (mut session, mut responder) = start_simulated(id, config, engine, observer, fault)?;
    Ok(session.run_to_completion(&mut responder)?)
}
