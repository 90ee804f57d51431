//! Simulator for reselling reclaimed ("ephemeral") datacenter capacity,
//! with a DQN allocator that mixes ephemeral and stable units and
//! safety-margin baselines to compare against.

pub mod agent;
pub mod baselines;
pub mod config;
pub mod economics;
pub mod env;
pub mod error;
pub mod harness;
pub mod qnet;
pub mod traces;
pub mod volatility;

pub use error::{Error, Result};
