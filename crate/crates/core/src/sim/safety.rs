//! Time-to-collision samples and percentile summaries.

/// Upper bound on reported TTC (s); non-closing pairs report this value.
pub const TTC_CAP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtcSummary {
    pub p10: f64,
    pub p50: f64,
}

/// TTC of a follower closing on a leader `gap` metres ahead.
pub fn time_to_collision(gap: f64, closing_speed: f64) -> f64 {
    if closing_speed > 0.0 {
        (gap.max(0.0) / closing_speed).min(TTC_CAP)
    } else {
        TTC_CAP
    }
}

/// 1-based rank used for the `alpha` percentile of `n` sorted samples
/// (lower interpolation, rank ⌈α·n⌉ clamped to `[1, n]`).
pub fn percentile_rank(alpha: f64, n: usize) -> usize {
    let k = (alpha * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n.max(1))
}

/// Lower-interpolated percentile of an unsorted sample set; `None` when empty.
pub fn percentile(samples: &[f64], alpha: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[percentile_rank(alpha, v.len()) - 1])
}

/// TTC samples stored compactly: values below the cap are kept, capped
/// samples are only counted.
#[derive(Debug, Clone, Default)]
pub struct TtcPool {
    closing: Vec<f64>,
    capped: usize,
}

impl TtcPool {
    pub fn push(&mut self, ttc: f64) {
        if ttc < TTC_CAP {
            self.closing.push(ttc);
        } else {
            self.capped += 1;
        }
    }

    pub fn extend_from(&mut self, other: &TtcPool) {
        self.closing.extend_from_slice(&other.closing);
        self.capped += other.capped;
    }

    pub fn len(&self) -> usize {
        self.closing.len() + self.capped
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.closing.clear();
        self.capped = 0;
    }

    pub fn percentiles(&self, alphas: &[f64]) -> Vec<f64> {
        let n = self.len();
        if n == 0 {
            return vec![TTC_CAP; alphas.len()];
        }
        let mut sorted = self.closing.clone();
        sorted.sort_by(f64::total_cmp);
        alphas
            .iter()
            .map(|&a| {
                let k = percentile_rank(a, n);
                if k <= sorted.len() {
                    sorted[k - 1]
                } else {
                    TTC_CAP
                }
            })
            .collect()
    }

    pub fn summary(&self) -> TtcSummary {
        let p = self.percentiles(&[0.10, 0.50]);
        TtcSummary { p10: p[0], p50: p[1] }
    }
}

/// One follower/leader pair as seen in a lane snapshot.
#[derive(Debug, Clone, Copy)]
pub struct PairSnapshot {
    pub gap: f64,
    pub closing_speed: f64,
}

/// p10/p50 TTC over a set of pair snapshots; an empty set yields the cap.
pub fn ttc_statistics(pairs: &[PairSnapshot]) -> TtcSummary {
    let mut pool = TtcPool::default();
    for p in pairs {
        pool.push(time_to_collision(p.gap, p.closing_speed));
    }
    pool.summary()
}
