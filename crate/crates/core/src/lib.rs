//! Preference-shaped reinforcement learning for traffic signal control.
//!
//! The crate is organised bottom-up: a grid micro-simulator ([`sim`]),
//! structured captions of its observations ([`caption`]), contrastive pair
//! sampling ([`pairs`]) and judging ([`judge`]), a Bradley–Terry reward model
//! ([`reward_model`]), reward shaping ([`shaping`]), PPO ([`ppo`]) and the
//! experiment harness ([`harness`]).

pub mod caption;
pub mod judge;
pub mod harness;
pub mod jsonl;
pub mod pairs;
pub mod ppo;
pub mod reward_model;
pub mod rng;
pub mod shaping;
pub mod sim;
pub mod stats;
