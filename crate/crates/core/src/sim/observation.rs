use serde::{Deserialize, Serialize};

use super::network::Phase;
use super::safety::TTC_CAP;
use super::signal::{PhaseState, SignalStage};

/// Per-junction snapshot. 4-vectors are indexed by arrival side N, E, S, W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub intersection_id: usize,
    #[serde(rename = "t")]
    pub time: f64,
    pub phase: PhaseState,
    /// Halting vehicles (v < 0.1 m/s) per approach.
    pub q: [u32; 4],
    /// Vehicles on the approach minus vehicles on the link its straight movement feeds.
    pub p: [i32; 4],
    /// Mean accumulated delay (s) of vehicles on the approaches.
    pub mean_delay: f64,
    /// Vehicles that crossed the stop lines in the trailing throughput window.
    pub throughput: u32,
    pub ttc_p10: f64,
    pub ttc_p50: f64,
    /// Harsh-brake vehicle-steps on the approaches in the trailing safety window.
    pub h_brake: u32,
    pub rho_red: bool,
    pub v_near: f64,
    pub a_near: f64,
    pub d_stop: f64,
}

impl Observation {
    /// An empty junction at `time`: zero counts and kinematics, TTC at the cap.
    pub fn empty(intersection_id: usize, time: f64, phase: Phase, elapsed: f64) -> Self {
        Self {
            intersection_id,
            time,
            phase: PhaseState {
                phase_id: phase,
                signal_stage: SignalStage::Green,
                elapsed,
            },
            q: [0; 4],
            p: [0; 4],
            mean_delay: 0.0,
            throughput: 0,
            ttc_p10: TTC_CAP,
            ttc_p50: TTC_CAP,
            h_brake: 0,
            rho_red: false,
            v_near: 0.0,
            a_near: 0.0,
            d_stop: 0.0,
        }
    }

    pub fn mean_queue(&self) -> f64 {
        self.q.iter().map(|&x| f64::from(x)).sum::<f64>() / 4.0
    }

    pub fn total_queue(&self) -> u32 {
        self.q.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.time,
            self.phase.elapsed,
            self.mean_delay,
            self.ttc_p10,
            self.ttc_p50,
            self.v_near,
            self.a_near,
            self.d_stop,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}
