use super::observation::Observation;

/// Negative intersection pressure: `-Σ_i (n_in,i - n_out,i)`.
pub fn pressure_reward(obs: &Observation) -> f64 {
    f64::from(-obs.p.iter().sum::<i32>())
}

/// Pressure reward minus a weighted local delay penalty.
pub fn external_reward_tl(obs: &Observation, lambda_delay: f64) -> f64 {
    pressure_reward(obs) - lambda_delay * obs.mean_delay
}
