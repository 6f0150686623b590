//! Personalized multi-channel customer-service routing lab.
//!
//! An event-driven capacity simulator ([`env`]), value-based deep Q-learning
//! agents with prioritized replay ([`agents`], [`nn`], [`replay`]), a
//! gradient-boosted tree flow forecaster ([`forecast`]), synthetic data
//! generation ([`datagen`]) and the routing evaluation metrics ([`metrics`]).

pub mod agents;
pub mod cli;
pub mod error;
pub mod config;
pub mod datagen;
pub mod env;
pub mod forecast;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod replay;
pub mod rng;
pub mod user_model;

pub use error::{Error, Result};
