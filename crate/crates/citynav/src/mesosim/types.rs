//! Simulator domain types: vehicles, trips, configuration, and episode logs.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::netgraph::NodeId;
use crate::partition::RegionId;
use crate::Scalar;

/// Vehicle identifier, unique within an episode.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One origin–destination trip request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: VehicleId,
    pub origin: NodeId,
    pub dest: NodeId,
    /// Departure time in seconds from episode start.
    pub depart_s: Scalar,
    /// Controlled vehicles are routed by the decision layer; background
    /// vehicles follow fixed free-flow shortest paths.
    pub controlled: bool,
}

/// Lifecycle state of a vehicle.
///
/// `Traversing` counts down whole steps of the edge's free-flow time;
/// `Queued` means the vehicle sits in the edge's exit queue waiting to be
/// served onto its next edge (or to its destination). Vehicles that never
/// arrive are reported as unfinished in the episode log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VehiclePhase {
    Pending,
    Traversing {
        edge: usize,
        remaining: u32,
        entered_at: u64,
    },
    Queued {
        edge: usize,
        joined_at: u64,
    },
    Arrived,
}

/// Live per-vehicle simulator state. Edge references are dense indices into
/// the road network's edge table.
#[derive(Clone, Debug)]
pub struct Vehicle {
    pub id: VehicleId,
    pub origin: NodeId,
    pub dest: NodeId,
    pub depart_step: u64,
    pub controlled: bool,
    pub phase: VehiclePhase,
    /// Chosen region sequence (empty for background vehicles and for
    /// controllers that do not plan at the region level).
    pub global_plan: Vec<RegionId>,
    /// Index of the current region within `global_plan`.
    pub global_pos: usize,
    /// Edges still to be entered, front first.
    pub local_queue: VecDeque<usize>,
    /// Edges entered so far, in order.
    pub route: Vec<usize>,
    /// Ticks spent in an exit queue without being served.
    pub n_idle: u64,
    /// Ticks spent blocked at the origin after the departure time.
    pub pending_wait: u64,
    pub injected_step: Option<u64>,
    pub arrive_step: Option<u64>,
    /// Free-flow travel time of the cheapest origin→destination path,
    /// in seconds: the idealized uncongested journey time.
    pub tau_hat_s: Scalar,
    /// Fixed full route for background vehicles (dense edge indices).
    pub fixed_route: Option<Vec<usize>>,
    pub(crate) cur_region: Option<RegionId>,
    pub(crate) region_entered_at: u64,
}

impl Vehicle {
    /// The edge the vehicle currently occupies, if any.
    pub fn current_edge(&self) -> Option<usize> {
        match self.phase {
            VehiclePhase::Traversing { edge, .. } | VehiclePhase::Queued { edge, .. } => {
                Some(edge)
            }
            _ => None,
        }
    }

    /// True while the vehicle occupies an edge.
    pub fn in_network(&self) -> bool {
        self.current_edge().is_some()
    }

    /// Regions not yet fully traversed, current region first. Empty when no
    /// region plan was recorded.
    pub fn remaining_regions(&self) -> &[RegionId] {
        let start = self.global_pos.min(self.global_plan.len());
        &self.global_plan[start..]
    }

    /// Last edge of the current local plan: the tail of the pending edge
    /// queue, or the current edge once the queue is exhausted.
    pub fn plan_terminal_edge(&self) -> Option<usize> {
        self.local_queue.back().copied().or(self.current_edge())
    }
}

/// Simulation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub step_length_s: Scalar,
    pub horizon_s: Scalar,
    /// Edges with congestion at or above this are flagged congested.
    pub congestion_threshold: Scalar,
    /// Trailing window for regional travel-time aggregation.
    pub aggregation_window_s: Scalar,
    /// Root seed echoed into the episode log (episode dynamics are
    /// deterministic; randomness lives in demand generation and policies).
    pub seed: u64,
    /// Record per-step exit-queue lengths for training surrogates.
    pub record_queue_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step_length_s: 1.0,
            horizon_s: 3600.0,
            congestion_threshold: 0.8,
            aggregation_window_s: 300.0,
            seed: 0,
            record_queue_trace: false,
        }
    }
}

impl SimConfig {
    pub fn horizon_steps(&self) -> u64 {
        (self.horizon_s / self.step_length_s).ceil() as u64
    }

    pub fn window_steps(&self) -> u64 {
        ((self.aggregation_window_s / self.step_length_s).round() as u64).max(1)
    }
}

/// Non-fatal anomaly recorded during an episode (rejected decisions,
/// unroutable background trips, policy fallbacks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub step: u64,
    pub vehicle: Option<u64>,
    pub message: String,
}

/// Regional traffic descriptor: capacity-weighted congestion and occupancy
/// over intra-region edges, and mean observed region transit time over the
/// trailing window (free-flow fallback when unobserved).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub cong: Scalar,
    pub occ: Scalar,
    pub tau_bar_s: Scalar,
}

/// Per-vehicle outcome written to the episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u64,
    pub controlled: bool,
    pub origin: u64,
    pub dest: u64,
    pub depart_step: u64,
    pub injected_step: Option<u64>,
    pub arrive_step: Option<u64>,
    pub tau_hat_s: Scalar,
    pub idle_steps: u64,
    pub pending_wait_steps: u64,
    /// Realized route as external edge ids.
    pub route: Vec<u64>,
    /// Planned fixed route for background vehicles.
    pub fixed_route: Option<Vec<u64>>,
    /// Chosen region sequence, when the controller planned one.
    pub global_plan: Vec<usize>,
}

impl VehicleRecord {
    pub fn finished(&self) -> bool {
        self.arrive_step.is_some()
    }
}

/// Complete, serializable record of one simulated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub step_length_s: Scalar,
    pub horizon_steps: u64,
    /// One record per registered vehicle, ascending by id.
    pub vehicles: Vec<VehicleRecord>,
    /// `[step][region]` aggregates sampled at the end of each tick.
    pub region_steps: Vec<Vec<RegionAggregate>>,
    /// Cumulative pass count per external edge id (all edges listed).
    pub edge_passes: BTreeMap<u64, u64>,
    pub incidents: Vec<Incident>,
    /// `[step][dense edge]` exit-queue lengths, when tracing was enabled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub queue_trace: Option<Vec<Vec<u32>>>,
}

impl EpisodeLog {
    /// Canonical serialization; identical inputs yield identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("episode log serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Fatal episode-setup errors. Runtime anomalies become incidents instead.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("vehicle {vehicle}: unknown node {node}")]
    UnknownNode { vehicle: VehicleId, node: NodeId },
    #[error("vehicle {vehicle}: origin equals destination ({node})")]
    DegenerateTrip { vehicle: VehicleId, node: NodeId },
    #[error("vehicle {vehicle}: no route from {origin} to {dest} under free flow")]
    Unroutable {
        vehicle: VehicleId,
        origin: NodeId,
        dest: NodeId,
    },
    #[error("vehicle {vehicle}: departure {depart_s} s is beyond the horizon")]
    DepartBeyondHorizon { vehicle: VehicleId, depart_s: Scalar },
    #[error("duplicate vehicle id {0}")]
    DuplicateVehicle(VehicleId),
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
}
