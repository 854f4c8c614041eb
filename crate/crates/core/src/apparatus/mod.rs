//! Device boundary for the caliper/lifter rig.
//!
//! Everything the protocol needs from hardware goes through [`Apparatus`]. The
//! [`SimulatedApparatus`] enforces the rig's mechanical tolerances with a
//! logical clock, and [`bridge`] speaks the line protocol a microcontroller
//! port would implement.

pub mod bridge;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bape::CandidateSet;
use crate::protocol::{Orientation, Task};

pub use sim::{FaultProfile, SimulatedApparatus, TranscriptEntry};

/// Number of separations visited by the alignment check.
pub const ALIGNMENT_STEPS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApparatusError {
    #[error("separation {target} mm outside [{min}, {max}] mm")]
    OutOfRange { target: f64, min: f64, max: f64 },
    #[error("achieved separation {achieved} mm deviates from {target} mm beyond tolerance")]
    SeparationTolerance { target: f64, achieved: f64 },
    #[error("no skin contact before timeout")]
    ContactTimeout,
    #[error("burst requested while the tips are raised")]
    NotInContact,
    #[error("duty {0} outside [0, 100]")]
    InvalidDuty(f64),
    #[error("alignment check failed")]
    AlignmentFailed(AlignmentReport),
    #[error("apparatus unreachable: {0}")]
    Unreachable(String),
    #[error("bridge protocol error: {0}")]
    Protocol(String),
}

/// Mechanical and stimulus constants of the rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApparatusConfig {
    pub separation_min_mm: f64,
    pub separation_max_mm: f64,
    /// Achieved separation stays strictly within this distance of the target.
    pub separation_tolerance_mm: f64,
    pub contact_force_n: f64,
    pub force_tolerance_pct: f64,
    pub burst_duration_ms: f64,
    pub nominal_frequency_hz: f64,
    pub tip_diameter_mm: f64,
}

impl Default for ApparatusConfig {
    fn default() -> Self {
        Self {
            separation_min_mm: 2.5,
            separation_max_mm: 60.0,
            separation_tolerance_mm: 0.2,
            contact_force_n: 0.5,
            force_tolerance_pct: 4.0,
            burst_duration_ms: 200.0,
            nominal_frequency_hz: 131.0,
            tip_diameter_mm: 1.5,
        }
    }
}

impl ApparatusConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.separation_min_mm > 0.0 && self.separation_min_mm < self.separation_max_mm) {
            return Err("separation range must satisfy 0 < min < max".into());
        }
        let positive = [
            ("separation_tolerance_mm", self.separation_tolerance_mm),
            ("contact_force_n", self.contact_force_n),
            ("force_tolerance_pct", self.force_tolerance_pct),
            ("burst_duration_ms", self.burst_duration_ms),
            ("nominal_frequency_hz", self.nominal_frequency_hz),
            ("tip_diameter_mm", self.tip_diameter_mm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn in_range(&self, mm: f64) -> bool {
        (self.separation_min_mm..=self.separation_max_mm).contains(&mm)
    }

    pub fn force_within_tolerance(&self, force: f64) -> bool {
        (force - self.contact_force_n).abs() <= self.contact_force_n * self.force_tolerance_pct / 100.0
    }
}

/// One of the three vibration motors.
///
/// VT-2PD uses A and B as the two sides. VT-2POD uses C as the apex `S_c`,
/// A as the horizontal partner `S_h` and B as the vertical partner `S_v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Motor {
    A,
    B,
    C,
}

impl Motor {
    pub const ALL: [Motor; 3] = [Motor::A, Motor::B, Motor::C];

    pub fn bit(self) -> u8 {
        match self {
            Motor::A => 1,
            Motor::B => 2,
            Motor::C => 4,
        }
    }

    pub fn slot(self) -> usize {
        match self {
            Motor::A => 0,
            Motor::B => 1,
            Motor::C => 2,
        }
    }
}

/// Set of motors driven by one burst command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MotorMask(pub u8);

impl MotorMask {
    pub fn of(motors: &[Motor]) -> Self {
        Self(motors.iter().fold(0, |m, x| m | x.bit()))
    }

    pub fn contains(self, motor: Motor) -> bool {
        self.0 & motor.bit() != 0
    }

    pub fn count(self) -> u32 {
        (self.0 & 0b111).count_ones()
    }

    pub fn motors(self) -> Vec<Motor> {
        Motor::ALL.into_iter().filter(|m| self.contains(*m)).collect()
    }
}

/// Tip positions in the skin plane, millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipLayout {
    pub task: Task,
    pub separation_mm: f64,
    pub orientation: Orientation,
    pub positions: Vec<(Motor, [f64; 2])>,
}

impl TipLayout {
    /// VT-2PD: A and B at `(-s/2, 0)` and `(s/2, 0)`.
    /// VT-2POD: right isosceles triangle with the apex C at the origin, A at
    /// `(s, 0)` and B at `(0, s)`.
    /// Vertical orientation rotates the layout by 90 degrees.
    pub fn new(task: Task, separation_mm: f64, orientation: Orientation) -> Self {
        let s = separation_mm;
        let base = if task.is_orientation_task() {
            vec![(Motor::C, [0.0, 0.0]), (Motor::A, [s, 0.0]), (Motor::B, [0.0, s])]
        } else {
            vec![(Motor::A, [-s / 2.0, 0.0]), (Motor::B, [s / 2.0, 0.0])]
        };
        let positions = base
            .into_iter()
            .map(|(m, [x, y])| match orientation {
                Orientation::Horizontal => (m, [x, y]),
                Orientation::Vertical => (m, [-y, x]),
            })
            .collect();
        Self { task, separation_mm, orientation, positions }
    }

    pub fn position(&self, motor: Motor) -> Option<[f64; 2]> {
        self.positions.iter().find(|(m, _)| *m == motor).map(|(_, p)| *p)
    }

    pub fn distance(&self, m1: Motor, m2: Motor) -> Option<f64> {
        let (p, q) = (self.position(m1)?, self.position(m2)?);
        Some(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStep {
    pub target_mm: f64,
    pub achieved_mm: Option<f64>,
    /// `None` when contact was never made.
    pub force_n: Option<f64>,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub steps: Vec<AlignmentStep>,
    pub passed: bool,
}

/// Five separations from the largest candidate to the smallest, each snapped
/// to the nearest candidate (ties toward the smaller one).
pub fn alignment_targets(candidates: &CandidateSet) -> Vec<f64> {
    let (lo, hi) = (candidates.min(), candidates.max());
    let last = (ALIGNMENT_STEPS - 1) as f64;
    (0..ALIGNMENT_STEPS)
        .map(|i| {
            let target = hi - (hi - lo) * i as f64 / last;
            let mut best = candidates.separations()[0];
            for &c in candidates.separations() {
                if (c - target).abs() < (best - target).abs() {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// The rig as seen by the session protocol. Commands are strictly serialized
/// through `&mut self`.
pub trait Apparatus: Send {
    fn config(&self) -> &ApparatusConfig;

    /// Moves the tips to `target_mm`; returns the achieved separation.
    fn set_separation(&mut self, target_mm: f64) -> Result<f64, ApparatusError>;

    /// Lowers until the contact switch trips; returns the applied force (N).
    fn lower_to_contact(&mut self) -> Result<f64, ApparatusError>;

    /// Drives the motors in `mask` for one burst. `duties` is indexed by
    /// [`Motor::slot`]; entries for motors outside the mask are ignored.
    fn burst(&mut self, mask: MotorMask, duties: [f64; 3]) -> Result<(), ApparatusError>;

    fn raise(&mut self) -> Result<(), ApparatusError>;

    /// Acknowledges a 90 degree rotation between blocks.
    fn reorient(&mut self, _orientation: Orientation) -> Result<(), ApparatusError> {
        Ok(())
    }

    /// Idle gap, e.g. between the two intervals of a 2IFC pair.
    fn pause(&mut self, _ms: f64) {}

    /// Milliseconds since the device was created, on the device's clock.
    fn elapsed_ms(&self) -> f64;

    /// Command log, when the backend keeps one.
    fn transcript(&self) -> Option<&[TranscriptEntry]> {
        None
    }

    fn run_alignment_check(&mut self, candidates: &CandidateSet) -> Result<AlignmentReport, ApparatusError> {
        let mut steps = Vec::with_capacity(ALIGNMENT_STEPS);
        for target in alignment_targets(candidates) {
            let achieved = self.set_separation(target)?;
            let force = match self.lower_to_contact() {
                Ok(f) => Some(f),
                Err(ApparatusError::ContactTimeout) => None,
                Err(e) => return Err(e),
            };
            self.raise()?;
            let within_tolerance = force.is_some_and(|f| self.config().force_within_tolerance(f));
            steps.push(AlignmentStep { target_mm: target, achieved_mm: Some(achieved), force_n: force, within_tolerance });
        }
        let passed = steps.iter().all(|s| s.within_tolerance);
        let report = AlignmentReport { steps, passed };
        if passed {
            Ok(report)
        } else {
            Err(ApparatusError::AlignmentFailed(report))
        }
    }
}

impl<A: Apparatus + ?Sized> Apparatus for Box<A> {
    fn config(&self) -> &ApparatusConfig {
        (**self).config()
    }
    fn set_separation(&mut self, target_mm: f64) -> Result<f64, ApparatusError> {
        (**self).set_separation(target_mm)
    }
    fn lower_to_contact(&mut self) -> Result<f64, ApparatusError> {
        (**self).lower_to_contact()
    }
    fn burst(&mut self, mask: MotorMask, duties: [f64; 3]) -> Result<(), ApparatusError> {
        (**self).burst(mask, duties)
    }
    fn raise(&mut self) -> Result<(), ApparatusError> {
        (**self).raise()
    }
    fn reorient(&mut self, orientation: Orientation) -> Result<(), ApparatusError> {
        (**self).reorient(orientation)
    }
    fn pause(&mut self, ms: f64) {
        (**self).pause(ms)
    }
    fn elapsed_ms(&self) -> f64 {
        (**self).elapsed_ms()
    }
    fn transcript(&self) -> Option<&[TranscriptEntry]> {
        (**self).transcript()
    }
    fn run_alignment_check(&mut self, candidates: &CandidateSet) -> Result<AlignmentReport, ApparatusError> {
        (**self).run_alignment_check(candidates)
    }
}
