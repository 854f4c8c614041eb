//! Simulated participants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Choice, PresentedStimulus, Responder, ResponderError, ResponderReply};
use crate::psymodel::{CurveSamples, WeibullParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("flat_rate must be in (0, 1), got {0}")]
    FlatRate(f64),
    #[error("bias_strength must be in [0.5, 1], got {0}")]
    BiasStrength(f64),
    #[error("rt model needs median_ms > 0 and sigma >= 0")]
    RtModel,
    #[error("preferred_rt_shift_ms must be finite")]
    RtShift,
}

/// Response option favored by a side-biased observer. `LEFT` is the first
/// option of the task (FIRST_A, or HORIZONTAL for VT-2POD).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn choice(self, options: [Choice; 2]) -> Choice {
        match self {
            Side::Left => options[0],
            Side::Right => options[1],
        }
    }
}

/// Log-normal response times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtModel {
    pub median_ms: f64,
    pub sigma: f64,
}

impl Default for RtModel {
    fn default() -> Self {
        Self { median_ms: 900.0, sigma: 0.4 }
    }
}

impl RtModel {
    fn validate(&self) -> Result<(), ObserverError> {
        if self.median_ms > 0.0 && self.median_ms.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(ObserverError::RtModel)
        }
    }

    fn sample<R: Rng + ?Sized>(&self, median_ms: f64, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return median_ms;
        }
        LogNormal::new(median_ms.ln(), self.sigma).expect("validated").sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum ObserverKind {
    Ideal {
        truth: WeibullParams,
    },
    Flat {
        flat_rate: f64,
    },
    SideBiased {
        bias_side: Side,
        bias_strength: f64,
        /// Added to the median response time on preferred-side answers.
        #[serde(default)]
        preferred_rt_shift_ms: f64,
    },
    /// Accuracy read off a sampled curve by linear interpolation.
    Custom {
        curve: CurveSamples,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverModel {
    #[serde(flatten)]
    pub kind: ObserverKind,
    #[serde(default)]
    pub rt_model: RtModel,
}

impl ObserverModel {
    pub fn ideal(truth: WeibullParams) -> Self {
        Self { kind: ObserverKind::Ideal { truth }, rt_model: RtModel::default() }
    }

    pub fn flat(flat_rate: f64) -> Self {
        Self { kind: ObserverKind::Flat { flat_rate }, rt_model: RtModel::default() }
    }

    pub fn side_biased(bias_side: Side, bias_strength: f64) -> Self {
        Self {
            kind: ObserverKind::SideBiased { bias_side, bias_strength, preferred_rt_shift_ms: 0.0 },
            rt_model: RtModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ObserverError> {
        self.rt_model.validate()?;
        match self.kind {
            ObserverKind::Flat { flat_rate } if !(flat_rate > 0.0 && flat_rate < 1.0) => {
                Err(ObserverError::FlatRate(flat_rate))
            }
            ObserverKind::SideBiased { bias_strength, .. } if !(0.5..=1.0).contains(&bias_strength) => {
                Err(ObserverError::BiasStrength(bias_strength))
            }
            ObserverKind::SideBiased { preferred_rt_shift_ms, .. } if !preferred_rt_shift_ms.is_finite() => {
                Err(ObserverError::RtShift)
            }
            _ => Ok(()),
        }
    }

    /// Probability of a correct answer at `separation_mm`, where defined.
    pub fn accuracy(&self, separation_mm: f64) -> Option<f64> {
        match &self.kind {
            ObserverKind::Ideal { truth } => Some(truth.eval(separation_mm)),
            ObserverKind::Flat { flat_rate } => Some(*flat_rate),
            ObserverKind::Custom { curve } => Some(curve.value_at(separation_mm)),
            ObserverKind::SideBiased { .. } => None,
        }
    }
}

/// One answer. Draw order: the choice uniform, then the response time.
pub fn respond<R: Rng + ?Sized>(model: &ObserverModel, stimulus: &PresentedStimulus, rng: &mut R) -> ResponderReply {
    let options = stimulus.task.options();
    let u: f64 = rng.random();
    let median = model.rt_model.median_ms;
    let (choice, median) = match &model.kind {
        ObserverKind::SideBiased { bias_side, bias_strength, preferred_rt_shift_ms } => {
            let preferred = bias_side.choice(options);
            if u < *bias_strength {
                (preferred, (median + preferred_rt_shift_ms).max(1.0))
            } else {
                (preferred.other(), median)
            }
        }
        _ => {
            let p = model.accuracy(stimulus.separation_mm).expect("accuracy defined");
            let choice = if u < p { stimulus.target } else { stimulus.target.other() };
            (choice, median)
        }
    };
    ResponderReply { choice, response_time_ms: model.rt_model.sample(median, rng) }
}

/// A seeded observer that answers session trials.
#[derive(Debug, Clone)]
pub struct SimulatedObserver {
    model: ObserverModel,
    rng: ChaCha8Rng,
    deadline_ms: Option<f64>,
}

impl SimulatedObserver {
    pub fn new(model: ObserverModel, seed: u64) -> Result<Self, ObserverError> {
        model.validate()?;
        Ok(Self { model, rng: ChaCha8Rng::seed_from_u64(seed), deadline_ms: None })
    }

    /// Replies slower than `deadline_ms` become timeouts.
    pub fn with_deadline(mut self, deadline_ms: Option<f64>) -> Self {
        self.deadline_ms = deadline_ms;
        self
    }

    pub fn model(&self) -> &ObserverModel {
        &self.model
    }
}

impl Responder for SimulatedObserver {
    fn respond(&mut self, stimulus: &PresentedStimulus) -> Result<ResponderReply, ResponderError> {
        let reply = respond(&self.model, stimulus, &mut self.rng);
        match self.deadline_ms {
            Some(d) if reply.response_time_ms > d => Err(ResponderError::Timeout),
            _ => Ok(reply),
        }
    }
}
