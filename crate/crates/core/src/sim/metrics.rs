use serde::{Deserialize, Serialize};

use super::safety::TtcPool;

/// Harsh braking threshold (m/s²): a step with acceleration below this counts as one event.
pub const HARSH_BRAKE: f64 = -3.0;
/// Speed below which a vehicle counts as waiting/queued (m/s).
pub const STOP_SPEED: f64 = 0.1;

/// Running accumulators for one episode; `episode_metrics` reduces them.
#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub horizon_s: f64,
    pub travel_times: Vec<f64>,
    pub wait_times: Vec<f64>,
    /// Sum over steps of (total queued vehicles / junction count).
    pub queue_per_junction_sum: f64,
    pub steps: u64,
    pub ttc: TtcPool,
    pub harsh_brakes: u64,
    pub vehicle_km: f64,
    pub switches: u64,
    pub decision_points: u64,
    pub shaping_steps: u64,
    pub masked_steps: u64,
    pub spawned: u64,
}

impl EpisodeLog {
    pub fn record_mask(&mut self, mask: bool) {
        self.shaping_steps += 1;
        if !mask {
            self.masked_steps += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Mean travel time of completed vehicles (s); `None` when none completed.
    pub att: Option<f64>,
    pub aql: f64,
    pub awt: Option<f64>,
    /// Completed vehicles per hour.
    pub throughput: f64,
    pub ttc_p10: f64,
    pub ttc_p25: f64,
    pub brakes_per_km: f64,
    pub oscillation: f64,
    pub mask_activation_rate: f64,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn episode_metrics(log: &EpisodeLog) -> EpisodeMetrics {
    let ttc = log.ttc.percentiles(&[0.10, 0.25]);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    EpisodeMetrics {
        att: mean(&log.travel_times),
        aql: ratio(log.queue_per_junction_sum, log.steps as f64),
        awt: mean(&log.wait_times),
        throughput: ratio(log.travel_times.len() as f64 * 3600.0, log.horizon_s),
        ttc_p10: ttc[0],
        ttc_p25: ttc[1],
        brakes_per_km: ratio(log.harsh_brakes as f64, log.vehicle_km),
        oscillation: ratio(log.switches as f64, log.decision_points as f64),
        mask_activation_rate: ratio(log.masked_steps as f64, log.shaping_steps as f64),
    }
}

/// Mean of several episodes' metrics; absent ATT/AWT values are skipped.
pub fn average_metrics(all: &[EpisodeMetrics]) -> Option<EpisodeMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let avg = |f: &dyn Fn(&EpisodeMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    let opt = |f: &dyn Fn(&EpisodeMetrics) -> Option<f64>| mean(&all.iter().filter_map(f).collect::<Vec<_>>());
    Some(EpisodeMetrics {
        att: opt(&|m| m.att),
        aql: avg(&|m| m.aql),
        awt: opt(&|m| m.awt),
        throughput: avg(&|m| m.throughput),
        ttc_p10: avg(&|m| m.ttc_p10),
        ttc_p25: avg(&|m| m.ttc_p25),
        brakes_per_km: avg(&|m| m.brakes_per_km),
        oscillation: avg(&|m| m.oscillation),
        mask_activation_rate: avg(&|m| m.mask_activation_rate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn att_is_mean_travel_time() {
        let log = EpisodeLog {
            horizon_s: 600.0,
            travel_times: vec![50.0, 70.0],
            wait_times: vec![10.0, 20.0],
            ..EpisodeLog::default()
        };
        let m = episode_metrics(&log);
        assert_eq!(m.att, Some(60.0));
        assert_eq!(m.awt, Some(15.0));
        assert_eq!(m.throughput, 12.0);
    }

    #[test]
    fn oscillation_is_switch_ratio() {
        let log = EpisodeLog {
            switches: 5,
            decision_points: 10,
            ..EpisodeLog::default()
        };
        assert_eq!(episode_metrics(&log).oscillation, 0.5);
    }

    #[test]
    fn no_brakes_means_zero_rate() {
        let log = EpisodeLog {
            vehicle_km: 12.0,
            ..EpisodeLog::default()
        };
        assert_eq!(episode_metrics(&log).brakes_per_km, 0.0);
    }

    #[test]
    fn no_completions_reports_absent_att() {
        let m = episode_metrics(&EpisodeLog::default());
        assert_eq!(m.att, None);
        assert_eq!(m.awt, None);
        assert_eq!(m.mask_activation_rate, 0.0);
    }
}
