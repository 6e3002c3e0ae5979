//! Episode log records, one JSON object per line.

use serde::{Deserialize, Serialize};

use super::network::Phase;
use super::observation::Observation;
use super::signal::Decision;
use super::JunctionEvents;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEventsRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    pub crossed: u32,
    pub harsh_brakes: u32,
}

impl From<JunctionEvents> for StepEventsRecord {
    fn from(e: JunctionEvents) -> Self {
        Self {
            decision: e.decision,
            crossed: e.crossed,
            harsh_brakes: e.harsh_brakes,
        }
    }
}

/// Observation after a step, with the action that was submitted for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub observation: Observation,
    pub action: Phase,
    pub events: StepEventsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingRecord {
    pub t: f64,
    pub intersection: usize,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub mask: bool,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum EpisodeRecord {
    Step(StepRecord),
    Shaping(ShapingRecord),
}

pub fn parse_episode_log(text: &str) -> Result<Vec<EpisodeRecord>, JsonlError> {
    jsonl::parse(text)
}
