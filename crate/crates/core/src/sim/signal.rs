use serde::{Deserialize, Serialize};

use super::network::{Movement, Phase, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalStage {
    Green,
    Yellow,
    Allred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneSignal {
    Green,
    Yellow,
    Red,
}

/// Signal state of one junction. During yellow and all-red `phase_id` still
/// names the phase being terminated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase_id: Phase,
    pub signal_stage: SignalStage,
    /// Seconds since the current stage began.
    pub elapsed: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SignalController {
    pub phase: Phase,
    pub stage: SignalStage,
    pub elapsed_ticks: u32,
    pub next: Phase,
    green_ticks: u32,
    yellow_ticks: u32,
    allred_ticks: u32,
}

/// What happened at a decision point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Switch,
}

impl SignalController {
    pub fn new(green_ticks: u32, yellow_ticks: u32, allred_ticks: u32) -> Self {
        Self {
            phase: Phase::EwStraight,
            stage: SignalStage::Green,
            elapsed_ticks: 0,
            next: Phase::EwStraight,
            green_ticks,
            yellow_ticks,
            allred_ticks,
        }
    }

    pub fn at_decision_point(&self) -> bool {
        self.stage == SignalStage::Green && self.elapsed_ticks >= self.green_ticks
    }

    /// Consume an action if the junction is at a decision point.
    pub fn apply(&mut self, action: Phase) -> Option<Decision> {
        if !self.at_decision_point() {
            return None;
        }
        self.elapsed_ticks = 0;
        if action == self.phase {
            Some(Decision::Keep)
        } else {
            self.stage = SignalStage::Yellow;
            self.next = action;
            Some(Decision::Switch)
        }
    }

    /// Advance one tick, rolling over yellow -> all-red -> next green.
    pub fn tick(&mut self) {
        self.elapsed_ticks += 1;
        match self.stage {
            SignalStage::Green => {}
            SignalStage::Yellow => {
                if self.elapsed_ticks >= self.yellow_ticks {
                    self.stage = SignalStage::Allred;
                    self.elapsed_ticks = 0;
                }
            }
            SignalStage::Allred => {
                if self.elapsed_ticks >= self.allred_ticks {
                    self.stage = SignalStage::Green;
                    self.phase = self.next;
                    self.elapsed_ticks = 0;
                }
            }
        }
    }

    pub fn lane_signal(&self, side: Side, movement: Movement) -> LaneSignal {
        let served = self.phase.serves(side, movement);
        match self.stage {
            SignalStage::Green if served => LaneSignal::Green,
            SignalStage::Yellow if served => LaneSignal::Yellow,
            _ => LaneSignal::Red,
        }
    }

    pub fn state(&self, dt: f64) -> PhaseState {
        PhaseState {
            phase_id: self.phase,
            signal_stage: self.stage,
            elapsed: self.elapsed_ticks as f64 * dt,
        }
    }
}
