//! Measure how chat models adapt value-survey answers to who they are
//! talking to.
//!
//! The pipeline has three legs: synthesize profile-anchored career-advice
//! dialogues through a simulator/detector/answerer agent loop, probe a
//! target model with survey questions under explicit-profile and
//! dialogue-history contexts, and quantify adaptation and cross-format
//! consistency with Jensen-Shannon divergences against cohort baselines
//! and earth-mover distances against derangement baselines.

pub mod chart;
pub mod cohorts;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod factory;
pub mod gateway;
pub mod judge;
pub mod metrics;
pub mod mock;
pub mod probe;
pub mod report;
pub mod seed;
pub mod templates;
