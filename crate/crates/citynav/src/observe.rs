//! Observation construction for the two decision levels, plus the canonical
//! text serialization consumed by prompt-backed policies.
//!
//! The global observation summarizes the whole network per region —
//! congestion, occupancy, mean transit time, a hotspot share of active
//! vehicle plans, the congested-edge set, and the time index. The local
//! observation describes one region from a vehicle's point of view: per-edge
//! descriptors, demand on the boundary edges toward its next region, and its
//! own position. "Active" always means controlled vehicles currently on the
//! road: background traffic and not-yet-departed vehicles are invisible to
//! the agents.
//!
//! The text serialization is versioned (`obs-v1`): regions and edges sorted
//! by id, floats at two decimals, candidates numbered from 1. Identical
//! observations serialize to identical text, making prompt-based policies
//! reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::mesosim::{RegionAggregate, Simulation, Vehicle, VehicleId, VehiclePhase};
use crate::netgraph::{EdgeId, NodeId};
use crate::partition::RegionId;
use crate::plan::{GlobalRoutePlan, LocalRoutePlan, NextRegion};
use crate::Scalar;

/// Network-wide snapshot for the global (region-allocation) level.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalObservation {
    /// Simulation step the observation was taken at.
    pub step: u64,
    /// Coarse time-of-episode index: step / aggregation window.
    pub bucket: u64,
    /// Per-region congestion/occupancy/mean-transit descriptors, indexed by
    /// region id.
    pub regions: Vec<RegionAggregate>,
    /// Per-region share of active vehicles whose remaining region plan
    /// contains the region; in [0, 1], and 0 everywhere when nothing is
    /// active.
    pub hotspots: Vec<Scalar>,
    /// Edges at or above the congestion threshold, ascending by id.
    pub congested_edges: Vec<EdgeId>,
}

/// One edge as seen by the local (intra-region) level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeObservation {
    pub edge: EdgeId,
    pub cong: Scalar,
    pub occ: Scalar,
    /// Estimated traversal time in seconds (free-flow).
    pub tau_hat_s: Scalar,
}

/// Region-level snapshot for one vehicle's local routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalObservation {
    /// Region being observed: the one the vehicle plans through.
    pub region: RegionId,
    /// Node the vehicle plans from (origin when pending, the head of its
    /// current edge otherwise).
    pub at_node: NodeId,
    /// Edge the vehicle currently occupies, if it is on the road.
    pub current_edge: Option<EdgeId>,
    /// Where the plan should exit to.
    pub next_region: NextRegion,
    /// Descriptors for the region's edges, its boundary edges toward the
    /// next region, and the current edge; ascending by id.
    pub edges: Vec<EdgeObservation>,
    /// Active vehicles whose local plan terminates at each boundary edge
    /// toward the next region, ascending by id; empty for the final region.
    pub boundary_demand: Vec<(EdgeId, u32)>,
}

impl LocalObservation {
    /// Planned demand on one boundary edge (0 when unlisted).
    pub fn demand_on(&self, edge: EdgeId) -> u32 {
        self.boundary_demand
            .iter()
            .find(|(e, _)| *e == edge)
            .map_or(0, |&(_, n)| n)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ObserveError {
    #[error("vehicle {0} is not registered")]
    UnknownVehicle(VehicleId),
    #[error("vehicle {0} has arrived; nothing to observe")]
    NotActive(VehicleId),
    #[error(
        "vehicle {vehicle}: region plan does not cover its position in region {region}; \
         global replanning required"
    )]
    StalePlan {
        vehicle: VehicleId,
        region: RegionId,
    },
    #[error("regions {region} and {next} are not adjacent; global replanning required")]
    NotAdjacent { region: RegionId, next: RegionId },
}

fn is_active(v: &Vehicle) -> bool {
    v.controlled && v.in_network()
}

/// Builds the global observation from the current traffic state.
///
/// Hotspot of region `z` = (active vehicles whose remaining region plan
/// contains `z`) / (all active vehicles), 0 when nothing is active.
pub fn build_global_observation(sim: &Simulation) -> GlobalObservation {
    let k = sim.partition().num_regions();
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for v in sim.vehicles().filter(|v| is_active(v)) {
        total += 1;
        for &z in v.remaining_regions() {
            counts[z] += 1;
        }
    }
    let hotspots = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as Scalar / total as Scalar
            }
        })
        .collect();
    let congested_edges = sim
        .congested_edges()
        .into_iter()
        .map(|ei| sim.net().edge(ei).id)
        .collect();
    GlobalObservation {
        step: sim.t(),
        bucket: sim.t() / sim.config().window_steps(),
        regions: sim.region_aggregates(),
        hotspots,
        congested_edges,
    }
}

/// Builds the local observation for one vehicle given its remaining region
/// plan (current region first; empty means no region-level plan).
///
/// Fails when the plan does not cover the vehicle's position or names a
/// non-adjacent next region — both signal the caller to replan globally.
pub fn build_local_observation(
    sim: &Simulation,
    vehicle: VehicleId,
    global_plan: &[RegionId],
) -> Result<LocalObservation, ObserveError> {
    let v = sim
        .vehicle(vehicle)
        .ok_or(ObserveError::UnknownVehicle(vehicle))?;
    let net = sim.net();
    let partition = sim.partition();
    let (at_node, current_edge) = match v.phase {
        VehiclePhase::Pending => (v.origin, None),
        VehiclePhase::Traversing { edge, .. } | VehiclePhase::Queued { edge, .. } => {
            let e = net.edge(edge);
            (e.to, Some(e.id))
        }
        VehiclePhase::Arrived => return Err(ObserveError::NotActive(vehicle)),
    };
    let region = partition
        .region_of(net, at_node)
        .expect("vehicle positions are validated nodes");
    let dest_region = partition
        .region_of(net, v.dest)
        .expect("destinations are validated nodes");

    let stale = || ObserveError::StalePlan { vehicle, region };
    let next_region = match global_plan.first() {
        Some(&first) if first == region => match global_plan.get(1) {
            Some(&next) => NextRegion::Region(next),
            None if dest_region == region => NextRegion::Final,
            None => return Err(stale()),
        },
        Some(_) => return Err(stale()),
        None if dest_region == region => NextRegion::Final,
        None => return Err(stale()),
    };
    if let NextRegion::Region(next) = next_region {
        if !sim.region_graph().successors(region).contains(&next) {
            return Err(ObserveError::NotAdjacent { region, next });
        }
    }

    // Edge set: the region's internal edges, boundary edges toward the next
    // region, and wherever the vehicle currently sits.
    let mut dense: Vec<usize> = Vec::new();
    for ei in 0..net.num_edges() {
        let (f, t) = net.edge_endpoints(ei);
        if partition.region_of_idx(f) == region && partition.region_of_idx(t) == region {
            dense.push(ei);
        }
    }
    let boundary: &[usize] = match next_region {
        NextRegion::Region(next) => sim.region_graph().boundary_edges(region, next),
        NextRegion::Final => &[],
    };
    dense.extend_from_slice(boundary);
    if let Some(cur) = current_edge {
        dense.push(net.edge_idx(cur).expect("current edge exists"));
    }
    dense.sort_unstable();
    dense.dedup();
    let edges = dense
        .iter()
        .map(|&ei| EdgeObservation {
            edge: net.edge(ei).id,
            cong: sim.cong_idx(ei),
            occ: sim.occ_idx(ei),
            tau_hat_s: net.edge(ei).free_flow_time(),
        })
        .collect();

    let boundary_demand = {
        let mut counts: BTreeMap<usize, u32> = boundary.iter().map(|&ei| (ei, 0)).collect();
        for other in sim.vehicles().filter(|o| is_active(o)) {
            if let Some(term) = other.plan_terminal_edge() {
                if let Some(n) = counts.get_mut(&term) {
                    *n += 1;
                }
            }
        }
        counts
            .into_iter()
            .map(|(ei, n)| (net.edge(ei).id, n))
            .collect()
    };

    Ok(LocalObservation {
        region,
        at_node,
        current_edge,
        next_region,
        edges,
        boundary_demand,
    })
}

fn fmt2(v: Scalar) -> String {
    format!("{v:.2}")
}

fn region_seq(regions: &[RegionId]) -> String {
    regions
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("->")
}

fn edge_seq(edges: &[EdgeId]) -> String {
    edges
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("->")
}

/// Canonical prompt text for a global decision: the observation plus the
/// candidate region sequences, numbered from 1.
pub fn serialize_global_observation(
    obs: &GlobalObservation,
    candidates: &[GlobalRoutePlan],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "obs-v1 global");
    let _ = writeln!(s, "time: step={} bucket={}", obs.step, obs.bucket);
    let _ = writeln!(s, "regions: {}", obs.regions.len());
    for (z, agg) in obs.regions.iter().enumerate() {
        let _ = writeln!(
            s,
            "region {z}: cong={} occ={} avg_transit={}s hotspot={}",
            fmt2(agg.cong),
            fmt2(agg.occ),
            fmt2(agg.tau_bar_s),
            fmt2(obs.hotspots[z]),
        );
    }
    if obs.congested_edges.is_empty() {
        let _ = writeln!(s, "congested edges: none");
    } else {
        let ids = obs
            .congested_edges
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(s, "congested edges: {ids}");
    }
    let _ = writeln!(s, "candidates: {}", candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let _ = writeln!(
            s,
            "option {}: regions {} | est={}s",
            i + 1,
            region_seq(&c.regions),
            fmt2(c.cost_s),
        );
    }
    let _ = write!(
        s,
        "answer with REASONING: <why> then CHOICE: <option number>"
    );
    s
}

/// Canonical prompt text for a local decision: the observation plus the
/// candidate edge paths, numbered from 1.
pub fn serialize_local_observation(
    obs: &LocalObservation,
    candidates: &[LocalRoutePlan],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "obs-v1 local");
    let position = match obs.current_edge {
        Some(e) => format!("on edge {e} at node {}", obs.at_node),
        None => format!("at node {}", obs.at_node),
    };
    let next = match obs.next_region {
        NextRegion::Region(r) => format!("region {r}"),
        NextRegion::Final => "final (destination in this region)".to_string(),
    };
    let _ = writeln!(s, "region {} | {position} | next: {next}", obs.region);
    let _ = writeln!(s, "edges: {}", obs.edges.len());
    for e in &obs.edges {
        let _ = writeln!(
            s,
            "edge {}: cong={} occ={} est_time={}s",
            e.edge,
            fmt2(e.cong),
            fmt2(e.occ),
            fmt2(e.tau_hat_s),
        );
    }
    if obs.boundary_demand.is_empty() {
        let _ = writeln!(s, "boundary demand: none");
    } else {
        let items = obs
            .boundary_demand
            .iter()
            .map(|(e, n)| format!("edge {e}: {n}"))
            .collect::<Vec<_>>()
            .join(" | ");
        let _ = writeln!(s, "boundary demand: {items}");
    }
    let _ = writeln!(s, "candidates: {}", candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let _ = writeln!(
            s,
            "option {}: edges {} | est={}s",
            i + 1,
            edge_seq(&c.edges),
            fmt2(c.free_flow_s),
        );
    }
    let _ = write!(
        s,
        "answer with REASONING: <why> then CHOICE: <option number>"
    );
    s
}
