//! Deterministic discrete-time queue-based traffic simulator.
//!
//! This is the environment the navigation stack acts in: vehicles are
//! injected from demand (explicit controlled trips plus gravity-model
//! background traffic), move along edges under a point-queue model, and form
//! congestion when queues back up. The simulator asks a
//! [`VehicleController`] for a plan whenever a controlled vehicle departs or
//! exhausts its local plan, and records everything needed downstream:
//! per-vehicle outcomes, per-step region aggregates, edge pass counts for
//! heatmaps, and optional queue traces for training surrogates.
//!
//! Everything is deterministic: one episode is a pure function of the
//! network, demand, controller behavior, seed, and config.

mod demand;
mod engine;
mod types;

pub use demand::{
    demand_to_csv, generate_background_demand, gravity_rate, load_demand, parse_demand,
    save_demand, DemandError, GravityParams,
};
pub use engine::{run_episode, Decision, DecisionRequest, Simulation, VehicleController};
pub use types::{
    EpisodeLog, Incident, RegionAggregate, SimConfig, SimError, Trip, Vehicle, VehicleId,
    VehiclePhase, VehicleRecord,
};
