//! Simulation, mediation and evaluation of underspecified multi-turn
//! conversations.

pub mod arms;
pub mod backend;
pub mod baselines;
pub mod domain;
pub mod error;
pub mod mediator;
pub mod metrics;
pub mod refiner;
pub mod simulator;
