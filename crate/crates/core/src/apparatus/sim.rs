use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Apparatus, ApparatusConfig, ApparatusError, MotorMask};
use crate::protocol::Orientation;

// Logical durations of the mechanical moves.
const MOVE_MS: f64 = 400.0;
const LOWER_MS: f64 = 600.0;
const RAISE_MS: f64 = 400.0;

/// Fraction of each tolerance band the nominal simulator draws from, so that
/// achieved values stay strictly inside the bounds.
const NOMINAL_SPREAD: f64 = 0.95;

/// Injected simulator faults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum FaultProfile {
    #[default]
    None,
    /// The contact switch never trips.
    NoContact,
    /// Contact force is off by `drift_pct` percent at separations below
    /// `below_mm`.
    ForceDrift { drift_pct: f64, below_mm: f64 },
    /// The spindle stays at `stuck_mm` regardless of the command.
    SeparationStick { stuck_mm: f64 },
}

impl FaultProfile {
    /// The misalignment profile: 6 % excess force below 15 mm.
    pub fn misaligned() -> Self {
        FaultProfile::ForceDrift { drift_pct: 6.0, below_mm: 15.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TranscriptEntry {
    SetSeparation { at_ms: f64, target_mm: f64, achieved_mm: f64 },
    Lower { at_ms: f64, force_n: Option<f64> },
    Burst { at_ms: f64, mask: MotorMask, duties: [f64; 3], duration_ms: f64 },
    Raise { at_ms: f64 },
    Reorient { at_ms: f64, orientation: Orientation },
}

/// Software rig with a seeded device RNG and a logical clock.
#[derive(Debug, Clone)]
pub struct SimulatedApparatus {
    config: ApparatusConfig,
    fault: FaultProfile,
    rng: ChaCha8Rng,
    separation: Option<f64>,
    in_contact: bool,
    clock_ms: f64,
    real_time: bool,
    transcript: Vec<TranscriptEntry>,
}

impl SimulatedApparatus {
    pub fn new(config: ApparatusConfig, device_seed: u64) -> Self {
        Self {
            config,
            fault: FaultProfile::None,
            rng: ChaCha8Rng::seed_from_u64(device_seed),
            separation: None,
            in_contact: false,
            clock_ms: 0.0,
            real_time: false,
            transcript: Vec::new(),
        }
    }

    pub fn with_fault(mut self, fault: FaultProfile) -> Self {
        self.fault = fault;
        self
    }

    /// Sleep for the true duration of every timed command.
    pub fn with_real_time(mut self, real_time: bool) -> Self {
        self.real_time = real_time;
        self
    }

    pub fn in_contact(&self) -> bool {
        self.in_contact
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEntry> {
        std::mem::take(&mut self.transcript)
    }

    fn advance(&mut self, ms: f64) {
        self.clock_ms += ms;
        if self.real_time && ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(ms / 1000.0));
        }
    }
}

impl Apparatus for SimulatedApparatus {
    fn config(&self) -> &ApparatusConfig {
        &self.config
    }

    fn set_separation(&mut self, target_mm: f64) -> Result<f64, ApparatusError> {
        if !self.config.in_range(target_mm) {
            return Err(ApparatusError::OutOfRange {
                target: target_mm,
                min: self.config.separation_min_mm,
                max: self.config.separation_max_mm,
            });
        }
        let tol = self.config.separation_tolerance_mm * NOMINAL_SPREAD;
        let jitter: f64 = self.rng.random_range(-tol..=tol);
        let achieved = match self.fault {
            FaultProfile::SeparationStick { stuck_mm } => stuck_mm,
            _ => target_mm + jitter,
        };
        self.advance(MOVE_MS);
        self.separation = Some(achieved);
        self.transcript.push(TranscriptEntry::SetSeparation { at_ms: self.clock_ms, target_mm, achieved_mm: achieved });
        Ok(achieved)
    }

    fn lower_to_contact(&mut self) -> Result<f64, ApparatusError> {
        let nominal = self.config.contact_force_n;
        let band = nominal * self.config.force_tolerance_pct / 100.0 * NOMINAL_SPREAD;
        let noise: f64 = self.rng.random_range(-band..=band);
        self.advance(LOWER_MS);
        let force = match self.fault {
            FaultProfile::NoContact => None,
            FaultProfile::ForceDrift { drift_pct, below_mm } if self.separation.is_some_and(|s| s < below_mm) => {
                Some(nominal * (1.0 + drift_pct / 100.0))
            }
            _ => Some(nominal + noise),
        };
        self.transcript.push(TranscriptEntry::Lower { at_ms: self.clock_ms, force_n: force });
        match force {
            Some(f) => {
                self.in_contact = true;
                Ok(f)
            }
            None => Err(ApparatusError::ContactTimeout),
        }
    }

    fn burst(&mut self, mask: MotorMask, duties: [f64; 3]) -> Result<(), ApparatusError> {
        if !self.in_contact {
            return Err(ApparatusError::NotInContact);
        }
        if let Some(&d) = duties.iter().find(|d| !(0.0..=100.0).contains(*d)) {
            return Err(ApparatusError::InvalidDuty(d));
        }
        let duration_ms = self.config.burst_duration_ms;
        self.transcript.push(TranscriptEntry::Burst { at_ms: self.clock_ms, mask, duties, duration_ms });
        self.advance(duration_ms);
        Ok(())
    }

    fn raise(&mut self) -> Result<(), ApparatusError> {
        self.in_contact = false;
        self.advance(RAISE_MS);
        self.transcript.push(TranscriptEntry::Raise { at_ms: self.clock_ms });
        Ok(())
    }

    fn reorient(&mut self, orientation: Orientation) -> Result<(), ApparatusError> {
        self.transcript.push(TranscriptEntry::Reorient { at_ms: self.clock_ms, orientation });
        Ok(())
    }

    fn pause(&mut self, ms: f64) {
        self.advance(ms);
    }

    fn elapsed_ms(&self) -> f64 {
        self.clock_ms
    }

    fn transcript(&self) -> Option<&[TranscriptEntry]> {
        Some(&self.transcript)
    }
}
