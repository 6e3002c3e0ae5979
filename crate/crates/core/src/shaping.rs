//! Safety mask, intrinsic/extrinsic stream mixing and running normalisation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapingConfig {
    pub tau_ttc: f64,
    pub a_max_mask: f64,
    pub kappa_unsafe: f64,
    pub lambda_max: f64,
    pub warmup_iters: u32,
    pub clip_c: f64,
    pub eps: f64,
    /// Weight of mean delay in the external reward.
    pub lambda_delay: f64,
    pub use_intrinsic: bool,
    pub use_mask: bool,
    pub use_norm: bool,
    pub use_schedule: bool,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            tau_ttc: 1.5,
            a_max_mask: 3.0,
            kappa_unsafe: 1.0,
            lambda_max: 0.5,
            warmup_iters: 20,
            clip_c: 5.0,
            eps: 1e-8,
            lambda_delay: 0.1,
            use_intrinsic: true,
            use_mask: true,
            use_norm: true,
            use_schedule: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid shaping config: {0}")]
pub struct ShapingError(pub String);

impl ShapingConfig {
    /// Flags of the external-only baseline.
    pub fn external_only() -> Self {
        Self {
            use_intrinsic: false,
            use_mask: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ShapingError> {
        let err = |m: &str| Err(ShapingError(m.into()));
        if !(self.tau_ttc > 0.0) {
            return err("tau_ttc must be > 0");
        }
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return err("lambda_max must lie in [0, 1]");
        }
        if !(self.clip_c > 0.0) {
            return err("clip_c must be > 0");
        }
        if !(self.kappa_unsafe >= 0.0) {
            return err("kappa_unsafe must be >= 0");
        }
        if !(self.a_max_mask > 0.0 && self.eps > 0.0 && self.lambda_delay >= 0.0) {
            return err("a_max_mask, eps must be > 0 and lambda_delay >= 0");
        }
        Ok(())
    }
}

/// True when the intrinsic reward may be used in `obs`.
pub fn safety_mask(obs: &Observation, cfg: &ShapingConfig) -> bool {
    mask_predicate(obs.ttc_p10, obs.a_near, obs.rho_red, cfg)
}

pub fn mask_predicate(ttc_p10: f64, a_near: f64, rho_red: bool, cfg: &ShapingConfig) -> bool {
    ttc_p10 >= cfg.tau_ttc && a_near.abs() <= cfg.a_max_mask && !rho_red
}

pub fn lambda_schedule(iter: u32, cfg: &ShapingConfig) -> f64 {
    if !cfg.use_schedule || cfg.warmup_iters == 0 {
        return cfg.lambda_max;
    }
    cfg.lambda_max * (f64::from(iter) / f64::from(cfg.warmup_iters)).min(1.0)
}

/// `(r_ext, λ·m·r_φ, -κ·(1-m))` under the ablation flags.
pub fn mixed_streams(r_ext: f64, r_phi: f64, mask: bool, lambda: f64, cfg: &ShapingConfig) -> [f64; 3] {
    let gate = if cfg.use_mask && !mask { 0.0 } else { 1.0 };
    let r2 = if cfg.use_intrinsic { lambda * gate * r_phi } else { 0.0 };
    let r3 = if cfg.use_mask && !mask { -cfg.kappa_unsafe } else { 0.0 };
    [r_ext, r2, r3]
}

/// Welford mean and population variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStat {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamNormalizer {
    pub streams: [RunningStat; 3],
}

/// Normalised streams and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    pub values: [f64; 3],
    pub sum: f64,
}

impl StreamNormalizer {
    /// Update each stream with its new sample, then z-score and clamp it.
    pub fn update_and_normalize(&mut self, raw: [f64; 3], cfg: &ShapingConfig) -> Normalized {
        if !cfg.use_norm {
            return Normalized {
                values: raw,
                sum: raw.iter().sum(),
            };
        }
        let mut values = [0.0; 3];
        for k in 0..3 {
            let s = &mut self.streams[k];
            s.push(raw[k]);
            values[k] = ((raw[k] - s.mean) / (s.std() + cfg.eps)).clamp(-cfg.clip_c, cfg.clip_c);
        }
        Normalized {
            values,
            sum: values.iter().sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_truth_table() {
        let cfg = ShapingConfig::default();
        for ttc_ok in [false, true] {
            for accel_ok in [false, true] {
                for red_ok in [false, true] {
                    let ttc = if ttc_ok { 2.0 } else { 1.2 };
                    let a = if accel_ok { -2.9 } else { -3.5 };
                    let got = mask_predicate(ttc, a, !red_ok, &cfg);
                    assert_eq!(got, ttc_ok && accel_ok && red_ok);
                }
            }
        }
        assert!(mask_predicate(1.5, 3.0, false, &cfg));
    }

    #[test]
    fn schedule() {
        let cfg = ShapingConfig::default();
        assert_eq!(lambda_schedule(0, &cfg), 0.0);
        assert_eq!(lambda_schedule(10, &cfg), 0.25);
        assert_eq!(lambda_schedule(20, &cfg), 0.5);
        assert_eq!(lambda_schedule(99, &cfg), 0.5);
        let flat = ShapingConfig {
            use_schedule: false,
            ..cfg
        };
        assert_eq!(lambda_schedule(0, &flat), 0.5);
    }

    #[test]
    fn streams_under_flags() {
        let cfg = ShapingConfig::default();
        assert_eq!(mixed_streams(-3.0, 2.0, true, 0.5, &cfg), [-3.0, 1.0, 0.0]);
        assert_eq!(mixed_streams(-3.0, 2.0, false, 0.5, &cfg), [-3.0, 0.0, -1.0]);
        let ext = ShapingConfig::external_only();
        assert_eq!(mixed_streams(-3.0, 2.0, false, 0.5, &ext), [-3.0, 0.0, 0.0]);
        let no_mask = ShapingConfig {
            use_mask: false,
            ..cfg
        };
        assert_eq!(mixed_streams(-3.0, 2.0, false, 0.5, &no_mask), [-3.0, 1.0, 0.0]);
    }

    #[test]
    fn welford_by_hand() {
        let cfg = ShapingConfig::default();
        let mut n = StreamNormalizer::default();
        let mut last = None;
        for x in [1.0, 2.0, 3.0] {
            last = Some(n.update_and_normalize([x, 4.0, 0.0], &cfg));
        }
        let out = last.unwrap();
        assert!((n.streams[0].mean - 2.0).abs() < 1e-15);
        assert!((n.streams[0].std() - 0.816_496_580_927_726).abs() < 1e-12);
        assert!((out.values[0] - 1.224_744_871_391_589).abs() < 1e-6);
        assert_eq!(out.values[1], 0.0);
        assert_eq!(out.values[2], 0.0);
    }

    #[test]
    fn clamped() {
        let cfg = ShapingConfig::default();
        let mut n = StreamNormalizer::default();
        for _ in 0..1000 {
            n.update_and_normalize([0.0, 0.0, 0.0], &cfg);
        }
        n.update_and_normalize([0.001, 0.0, 0.0], &cfg);
        let out = n.update_and_normalize([1e6, -1e6, 0.0], &cfg);
        assert_eq!(out.values, [5.0, -5.0, 0.0]);
        assert!(out.sum.abs() <= 3.0 * cfg.clip_c);
    }

    #[test]
    fn bypass() {
        let cfg = ShapingConfig {
            use_norm: false,
            ..ShapingConfig::default()
        };
        let out = StreamNormalizer::default().update_and_normalize([1.0, 2.0, -4.0], &cfg);
        assert_eq!(out.sum, -1.0);
    }

    #[test]
    fn validation() {
        assert!(ShapingConfig::default().validate().is_ok());
        let bad = ShapingConfig {
            lambda_max: 1.5,
            ..ShapingConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
