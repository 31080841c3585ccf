//! The queue-based traffic engine and episode orchestration.
//!
//! Each edge is a point queue: a vehicle entering an edge traverses it for
//! `max(1, ceil(free_flow_time / step))` whole steps, then joins the edge's
//! FIFO exit queue; the queue serves up to `outflow` vehicles per step, each
//! admitted to its next edge only if that edge has spare capacity (the head
//! of the queue blocks those behind it while it waits). A vehicle whose
//! current edge ends at its destination leaves the network when served.
//!
//! Tick order within step `t`: decisions are matched to open decision
//! requests, departures are injected (FIFO by departure step then id, first
//! edge must have spare capacity), traversal timers started before `t` are
//! decremented (finishers join exit queues), queues are served (only
//! vehicles queued before `t`), and finally every vehicle still queued gets
//! an idle tick and every blocked departure a waiting tick. Timers and queue
//! eligibility deliberately exclude same-tick entries so that every edge
//! costs its free-flow steps plus at least one queue-service step, matching
//! the documented vehicle timing. All iteration is in ascending id order,
//! making an episode a pure function of (network, demand, controller, seed,
//! config).

use std::collections::{BTreeMap, VecDeque};

use super::types::{
    EpisodeLog, Incident, RegionAggregate, SimConfig, SimError, Trip, Vehicle, VehicleId,
    VehiclePhase, VehicleRecord,
};
use crate::netgraph::{shortest_path, Edge, EdgeId, RoadNetwork};
use crate::partition::{Partition, RegionGraph, RegionId};
use crate::Scalar;

/// A decision the controller owes the simulator before the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionRequest {
    /// Controlled vehicle at (or past) its departure time with no plan yet:
    /// needs a region sequence and an initial local plan from its origin.
    Depart { vehicle: VehicleId },
    /// Controlled vehicle queued on `edge` (dense index) with an exhausted
    /// local plan: needs the next local plan starting at the edge's head.
    Continue { vehicle: VehicleId, edge: usize },
}

impl DecisionRequest {
    pub fn vehicle(&self) -> VehicleId {
        match *self {
            DecisionRequest::Depart { vehicle } => vehicle,
            DecisionRequest::Continue { vehicle, .. } => vehicle,
        }
    }
}

/// A controller's answer to one [`DecisionRequest`].
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Depart {
        /// Region sequence from the origin region (may be empty for
        /// controllers that do not plan at the region level).
        global_plan: Vec<RegionId>,
        /// Edge path starting at the vehicle's origin node.
        local_plan: Vec<EdgeId>,
    },
    Continue {
        /// Edge path starting at the head node of the vehicle's current edge.
        local_plan: Vec<EdgeId>,
    },
    /// Answer to a continuation request that also replaces the region
    /// sequence — the recovery path when the stored plan no longer covers
    /// the vehicle's position.
    Reroute {
        /// Region sequence starting at the region of the current edge's head.
        global_plan: Vec<RegionId>,
        /// Edge path starting at the head node of the vehicle's current edge.
        local_plan: Vec<EdgeId>,
    },
}

/// Decision layer driven by [`run_episode`]: must answer every request
/// (missing or invalid answers are logged and replaced by a greedy
/// free-flow fallback, so episodes never abort).
pub trait VehicleController {
    fn decide(
        &mut self,
        sim: &Simulation,
        requests: &[DecisionRequest],
    ) -> BTreeMap<VehicleId, Decision>;

    /// Anomalies the controller recorded since the last drain (policy
    /// fallbacks and the like); merged into the episode log.
    fn drain_incidents(&mut self) -> Vec<Incident> {
        Vec::new()
    }
}

/// Per-edge runtime state.
#[derive(Clone, Debug)]
struct EdgeRuntime {
    traversing: u32,
    queue: VecDeque<(VehicleId, u64)>, // (vehicle, tick it joined)
    passes: u64,
    capacity: u32,
    outflow: u32,
    steps: u32,
    /// Region of the edge's from-node: the region a vehicle is "in" while
    /// on this edge, used for region transit timing.
    region_from: RegionId,
}

/// Deterministic queue-based traffic simulator over a fixed network,
/// partition, and region graph.
pub struct Simulation<'a> {
    net: &'a RoadNetwork,
    partition: &'a Partition,
    region_graph: &'a RegionGraph,
    cfg: SimConfig,
    t: u64,
    vehicles: BTreeMap<VehicleId, Vehicle>,
    edges: Vec<EdgeRuntime>,
    /// Region-transit completions (finish tick, duration seconds) inside the
    /// trailing aggregation window, per region.
    completions: Vec<VecDeque<(u64, Scalar)>>,
    /// Strictly intra-region edges (both endpoints inside), per region.
    intra_edges: Vec<Vec<usize>>,
    /// Fallback τ̄ per region: mean free-flow time of its edges.
    freeflow_fallback: Vec<Scalar>,
    incidents: Vec<Incident>,
    queue_trace: Option<Vec<Vec<u32>>>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        net: &'a RoadNetwork,
        partition: &'a Partition,
        region_graph: &'a RegionGraph,
        cfg: SimConfig,
    ) -> Result<Self, SimError> {
        if !(cfg.step_length_s > 0.0) {
            return Err(SimError::BadConfig("step_length_s must be positive".into()));
        }
        if !(cfg.horizon_s > 0.0) {
            return Err(SimError::BadConfig("horizon_s must be positive".into()));
        }
        let k = partition.num_regions();
        let edges: Vec<EdgeRuntime> = (0..net.num_edges())
            .map(|ei| {
                let e = net.edge(ei);
                EdgeRuntime {
                    traversing: 0,
                    queue: VecDeque::new(),
                    passes: 0,
                    capacity: e.capacity,
                    outflow: e.outflow_per_step(cfg.step_length_s),
                    steps: traversal_steps(e, cfg.step_length_s),
                    region_from: partition.region_of_idx(net.edge_endpoints(ei).0),
                }
            })
            .collect();

        let mut intra_edges = vec![Vec::new(); k];
        for ei in 0..net.num_edges() {
            let (f, t) = net.edge_endpoints(ei);
            let (rf, rt) = (partition.region_of_idx(f), partition.region_of_idx(t));
            if rf == rt {
                intra_edges[rf].push(ei);
            }
        }
        let freeflow_fallback = (0..k)
            .map(|r| {
                let strict = &intra_edges[r];
                let pool: Vec<usize> = if strict.is_empty() {
                    // Region with no internal edge: fall back to its
                    // outgoing edges so τ̄ stays positive where possible.
                    (0..net.num_edges())
                        .filter(|&ei| edges[ei].region_from == r)
                        .collect()
                } else {
                    strict.clone()
                };
                if pool.is_empty() {
                    0.0
                } else {
                    pool.iter().map(|&ei| net.edge(ei).free_flow_time()).sum::<Scalar>()
                        / pool.len() as Scalar
                }
            })
            .collect();

        let queue_trace = cfg.record_queue_trace.then(Vec::new);
        Ok(Self {
            net,
            partition,
            region_graph,
            cfg,
            t: 0,
            vehicles: BTreeMap::new(),
            edges,
            completions: vec![VecDeque::new(); k],
            intra_edges,
            freeflow_fallback,
            incidents: Vec::new(),
            queue_trace,
        })
    }

    /// Registers trips before the episode starts. Controlled trips must be
    /// routable under free flow; unroutable background trips are dropped
    /// with an incident. τ̂ is the free-flow shortest-path time.
    pub fn register_trips(&mut self, trips: &[Trip]) -> Result<(), SimError> {
        for trip in trips {
            if self.vehicles.contains_key(&trip.id) {
                return Err(SimError::DuplicateVehicle(trip.id));
            }
            for node in [trip.origin, trip.dest] {
                if self.net.node_idx(node).is_none() {
                    return Err(SimError::UnknownNode {
                        vehicle: trip.id,
                        node,
                    });
                }
            }
            if trip.origin == trip.dest {
                return Err(SimError::DegenerateTrip {
                    vehicle: trip.id,
                    node: trip.origin,
                });
            }
            let depart_step = (trip.depart_s / self.cfg.step_length_s).floor() as u64;
            if depart_step >= self.cfg.horizon_steps() {
                return Err(SimError::DepartBeyondHorizon {
                    vehicle: trip.id,
                    depart_s: trip.depart_s,
                });
            }
            let free_path = shortest_path(self.net, trip.origin, trip.dest, |e: &Edge| {
                e.free_flow_time()
            });
            let Some(free_path) = free_path else {
                if trip.controlled {
                    return Err(SimError::Unroutable {
                        vehicle: trip.id,
                        origin: trip.origin,
                        dest: trip.dest,
                    });
                }
                self.incidents.push(Incident {
                    step: 0,
                    vehicle: Some(trip.id.0),
                    message: format!(
                        "background trip {} -> {} unroutable; dropped",
                        trip.origin, trip.dest
                    ),
                });
                continue;
            };
            let fixed_route: Option<Vec<usize>> = (!trip.controlled).then(|| {
                free_path
                    .edges
                    .iter()
                    .map(|&eid| self.net.edge_idx(eid).expect("path edge exists"))
                    .collect()
            });
            let local_queue: VecDeque<usize> = fixed_route
                .clone()
                .map(VecDeque::from)
                .unwrap_or_default();
            self.vehicles.insert(
                trip.id,
                Vehicle {
                    id: trip.id,
                    origin: trip.origin,
                    dest: trip.dest,
                    depart_step,
                    controlled: trip.controlled,
                    phase: VehiclePhase::Pending,
                    global_plan: Vec::new(),
                    global_pos: 0,
                    local_queue,
                    route: Vec::new(),
                    n_idle: 0,
                    pending_wait: 0,
                    injected_step: None,
                    arrive_step: None,
                    tau_hat_s: free_path.cost,
                    fixed_route,
                    cur_region: None,
                    region_entered_at: 0,
                },
            );
        }
        Ok(())
    }

    pub fn net(&self) -> &RoadNetwork {
        self.net
    }

    pub fn partition(&self) -> &Partition {
        self.partition
    }

    pub fn region_graph(&self) -> &RegionGraph {
        self.region_graph
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Current step index.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn step_length_s(&self) -> Scalar {
        self.cfg.step_length_s
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&Vehicle> {
        self.vehicles.get(&id)
    }

    /// All vehicles, ascending by id.
    pub fn vehicles(&self) -> impl Iterator<Item = &Vehicle> {
        self.vehicles.values()
    }

    /// Vehicles on an edge (traversing + queued), by dense edge index.
    pub fn occupants_idx(&self, edge_idx: usize) -> u32 {
        let e = &self.edges[edge_idx];
        e.traversing + e.queue.len() as u32
    }

    /// Occupancy rate: occupants / capacity. Admission is capacity-gated,
    /// so this stays in [0, 1] during normal operation.
    pub fn occ_idx(&self, edge_idx: usize) -> Scalar {
        self.occupants_idx(edge_idx) as Scalar / self.edges[edge_idx].capacity as Scalar
    }

    /// Congestion level: occupancy clamped to [0, 1].
    pub fn cong_idx(&self, edge_idx: usize) -> Scalar {
        self.occ_idx(edge_idx).min(1.0)
    }

    /// True when the edge's congestion meets the configured threshold.
    pub fn is_congested_idx(&self, edge_idx: usize) -> bool {
        self.cong_idx(edge_idx) >= self.cfg.congestion_threshold
    }

    /// Dense indices of congested edges, ascending.
    pub fn congested_edges(&self) -> Vec<usize> {
        (0..self.edges.len())
            .filter(|&ei| self.is_congested_idx(ei))
            .collect()
    }

    pub fn edge_passes_idx(&self, edge_idx: usize) -> u64 {
        self.edges[edge_idx].passes
    }

    /// Exit-queue length of an edge.
    pub fn queue_len_idx(&self, edge_idx: usize) -> usize {
        self.edges[edge_idx].queue.len()
    }

    /// Traversal duration of an edge in whole steps.
    pub fn traversal_steps_idx(&self, edge_idx: usize) -> u32 {
        self.edges[edge_idx].steps
    }

    /// Exit-queue service rate of an edge in vehicles per step.
    pub fn outflow_idx(&self, edge_idx: usize) -> u32 {
        self.edges[edge_idx].outflow
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    /// Mean free-flow τ̄ fallback for a region (mean over its edges).
    pub fn region_freeflow_fallback(&self, region: RegionId) -> Scalar {
        self.freeflow_fallback[region]
    }

    /// Per-region congestion/occupancy (capacity-weighted over intra-region
    /// edges) and mean region transit time over the trailing window.
    pub fn region_aggregates(&self) -> Vec<RegionAggregate> {
        let window = self.cfg.window_steps();
        (0..self.partition.num_regions())
            .map(|r| {
                let es = &self.intra_edges[r];
                let cap_sum: u64 = es.iter().map(|&ei| self.edges[ei].capacity as u64).sum();
                let (cong, occ) = if cap_sum == 0 {
                    (0.0, 0.0)
                } else {
                    let mut cong = 0.0;
                    let mut occ = 0.0;
                    for &ei in es {
                        let cap = self.edges[ei].capacity as Scalar;
                        cong += self.cong_idx(ei) * cap;
                        occ += self.occ_idx(ei) * cap;
                    }
                    (cong / cap_sum as Scalar, occ / cap_sum as Scalar)
                };
                let recent: Vec<Scalar> = self.completions[r]
                    .iter()
                    .filter(|(finish, _)| finish + window > self.t)
                    .map(|&(_, dur)| dur)
                    .collect();
                let tau_bar_s = if recent.is_empty() {
                    self.freeflow_fallback[r]
                } else {
                    recent.iter().sum::<Scalar>() / recent.len() as Scalar
                };
                RegionAggregate {
                    cong,
                    occ,
                    tau_bar_s,
                }
            })
            .collect()
    }

    /// Decision requests that must be answered before the next [`step`].
    ///
    /// [`step`]: Simulation::step
    pub fn pending_decisions(&self) -> Vec<DecisionRequest> {
        let mut out = Vec::new();
        for v in self.vehicles.values() {
            if !v.controlled {
                continue;
            }
            match v.phase {
                VehiclePhase::Pending
                    if v.depart_step <= self.t && v.local_queue.is_empty() =>
                {
                    out.push(DecisionRequest::Depart { vehicle: v.id });
                }
                VehiclePhase::Queued { edge, .. }
                    if v.local_queue.is_empty()
                        && self.net.edge(edge).to != v.dest =>
                {
                    out.push(DecisionRequest::Continue {
                        vehicle: v.id,
                        edge,
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Advances one tick. `decisions` answers this tick's
    /// [`pending_decisions`]; missing or invalid entries are logged as
    /// incidents and replaced by a free-flow shortest-path fallback.
    ///
    /// [`pending_decisions`]: Simulation::pending_decisions
    pub fn step(&mut self, decisions: &BTreeMap<VehicleId, Decision>) {
        let t = self.t;
        self.apply_decisions(decisions);
        self.inject(t);
        self.advance_timers(t);
        self.serve_queues(t);
        self.account(t);
        if let Some(trace) = &mut self.queue_trace {
            trace.push(self.edges.iter().map(|e| e.queue.len() as u32).collect());
        }
        let window = self.cfg.window_steps();
        for per_region in &mut self.completions {
            while per_region
                .front()
                .is_some_and(|&(finish, _)| finish + window <= t)
            {
                per_region.pop_front();
            }
        }
        self.t = t + 1;
    }

    /// Phase counts (pending, traversing, queued, arrived) for conservation
    /// checks.
    pub fn phase_counts(&self) -> (usize, usize, usize, usize) {
        let mut counts = (0, 0, 0, 0);
        for v in self.vehicles.values() {
            match v.phase {
                VehiclePhase::Pending => counts.0 += 1,
                VehiclePhase::Traversing { .. } => counts.1 += 1,
                VehiclePhase::Queued { .. } => counts.2 += 1,
                VehiclePhase::Arrived => counts.3 += 1,
            }
        }
        counts
    }

    /// Consumes the simulation into a serializable episode log.
    pub fn into_log(self, region_steps: Vec<Vec<RegionAggregate>>) -> EpisodeLog {
        let edge_passes = (0..self.net.num_edges())
            .map(|ei| (self.net.edge(ei).id.0, self.edges[ei].passes))
            .collect();
        let vehicles = self
            .vehicles
            .into_values()
            .map(|v| {
                let to_ids =
                    |es: &[usize]| es.iter().map(|&ei| self.net.edge(ei).id.0).collect();
                VehicleRecord {
                    id: v.id.0,
                    controlled: v.controlled,
                    origin: v.origin.0,
                    dest: v.dest.0,
                    depart_step: v.depart_step,
                    injected_step: v.injected_step,
                    arrive_step: v.arrive_step,
                    tau_hat_s: v.tau_hat_s,
                    idle_steps: v.n_idle,
                    pending_wait_steps: v.pending_wait,
                    route: to_ids(&v.route),
                    fixed_route: v.fixed_route.as_deref().map(to_ids),
                    global_plan: v.global_plan,
                }
            })
            .collect();
        EpisodeLog {
            seed: self.cfg.seed,
            step_length_s: self.cfg.step_length_s,
            horizon_steps: self.cfg.horizon_steps(),
            vehicles,
            region_steps,
            edge_passes,
            incidents: self.incidents,
            queue_trace: self.queue_trace,
        }
    }

    fn incident(&mut self, vehicle: Option<VehicleId>, message: String) {
        self.incidents.push(Incident {
            step: self.t,
            vehicle: vehicle.map(|v| v.0),
            message,
        });
    }

    /// Validates and installs this tick's decisions; requests without a
    /// valid answer fall back to the free-flow shortest path.
    fn apply_decisions(&mut self, decisions: &BTreeMap<VehicleId, Decision>) {
        let requests = self.pending_decisions();
        let mut answered = std::collections::BTreeSet::new();
        for req in requests {
            let vid = req.vehicle();
            answered.insert(vid);
            match (req, decisions.get(&vid)) {
                (DecisionRequest::Depart { .. }, Some(Decision::Depart { global_plan, local_plan })) => {
                    let origin = self.vehicles[&vid].origin;
                    match self.validate_depart(origin, global_plan, local_plan) {
                        Ok(dense) => {
                            let v = self.vehicles.get_mut(&vid).unwrap();
                            v.global_plan = global_plan.clone();
                            v.global_pos = 0;
                            v.local_queue = dense.into();
                        }
                        Err(why) => {
                            self.incident(
                                Some(vid),
                                format!("departure plan rejected ({why}); using free-flow fallback"),
                            );
                            self.fallback_plan(vid);
                        }
                    }
                }
                (DecisionRequest::Continue { edge, .. }, Some(Decision::Continue { local_plan })) => {
                    let expect_from = self.net.edge(edge).to;
                    match self.validate_chain(expect_from, local_plan) {
                        Ok(dense) => {
                            let v = self.vehicles.get_mut(&vid).unwrap();
                            v.local_queue = dense.into();
                        }
                        Err(why) => {
                            self.incident(
                                Some(vid),
                                format!("continuation plan rejected ({why}); using free-flow fallback"),
                            );
                            self.fallback_plan(vid);
                        }
                    }
                }
                (
                    DecisionRequest::Continue { edge, .. },
                    Some(Decision::Reroute { global_plan, local_plan }),
                ) => {
                    let at = self.net.edge(edge).to;
                    match self.validate_depart(at, global_plan, local_plan) {
                        Ok(dense) => {
                            let v = self.vehicles.get_mut(&vid).unwrap();
                            v.global_plan = global_plan.clone();
                            v.global_pos = 0;
                            v.local_queue = dense.into();
                        }
                        Err(why) => {
                            self.incident(
                                Some(vid),
                                format!("reroute plan rejected ({why}); using free-flow fallback"),
                            );
                            self.fallback_plan(vid);
                        }
                    }
                }
                (_, Some(_)) => {
                    self.incident(
                        Some(vid),
                        "decision kind does not match the request; using free-flow fallback"
                            .to_string(),
                    );
                    self.fallback_plan(vid);
                }
                (_, None) => {
                    self.incident(
                        Some(vid),
                        "no decision supplied; using free-flow fallback".to_string(),
                    );
                    self.fallback_plan(vid);
                }
            }
        }
        for vid in decisions.keys() {
            if !answered.contains(vid) {
                self.incident(Some(*vid), "unsolicited decision ignored".to_string());
            }
        }
    }

    fn validate_depart(
        &self,
        start: crate::netgraph::NodeId,
        global_plan: &[RegionId],
        local_plan: &[EdgeId],
    ) -> Result<Vec<usize>, String> {
        if !global_plan.is_empty() {
            let k = self.partition.num_regions();
            if global_plan.iter().any(|&r| r >= k) {
                return Err("region id out of range".into());
            }
            let start_region = self
                .partition
                .region_of(self.net, start)
                .expect("plan start node is part of the network");
            if global_plan[0] != start_region {
                return Err(format!(
                    "region plan starts at {} but the vehicle is in {}",
                    global_plan[0], start_region
                ));
            }
            for w in global_plan.windows(2) {
                if !self.region_graph.successors(w[0]).contains(&w[1]) {
                    return Err(format!("regions {} and {} are not adjacent", w[0], w[1]));
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            if !global_plan.iter().all(|r| seen.insert(r)) {
                return Err("region plan revisits a region".into());
            }
        }
        self.validate_chain(start, local_plan)
    }

    fn validate_chain(
        &self,
        start: crate::netgraph::NodeId,
        plan: &[EdgeId],
    ) -> Result<Vec<usize>, String> {
        if plan.is_empty() {
            return Err("empty edge plan".into());
        }
        let mut dense = Vec::with_capacity(plan.len());
        let mut at = start;
        for eid in plan {
            let Some(ei) = self.net.edge_idx(*eid) else {
                return Err(format!("unknown edge {eid}"));
            };
            let e = self.net.edge(ei);
            if e.from != at {
                return Err(format!(
                    "edge {} departs from {} but the vehicle is at {}",
                    eid, e.from, at
                ));
            }
            at = e.to;
            dense.push(ei);
        }
        Ok(dense)
    }

    /// Free-flow shortest-path plan from the vehicle's current position to
    /// its destination; leaves the vehicle plan-less (and eventually
    /// unfinished) when no such path exists.
    fn fallback_plan(&mut self, vid: VehicleId) {
        let v = &self.vehicles[&vid];
        let from = match v.phase {
            VehiclePhase::Pending => v.origin,
            VehiclePhase::Queued { edge, .. } | VehiclePhase::Traversing { edge, .. } => {
                self.net.edge(edge).to
            }
            VehiclePhase::Arrived => return,
        };
        let dest = v.dest;
        match shortest_path(self.net, from, dest, |e: &Edge| e.free_flow_time()) {
            Some(path) => {
                let dense: Vec<usize> = path
                    .edges
                    .iter()
                    .map(|&eid| self.net.edge_idx(eid).expect("path edge exists"))
                    .collect();
                let regions = self.path_region_sequence(from, &dense);
                let v = self.vehicles.get_mut(&vid).unwrap();
                v.local_queue = dense.into();
                if v.phase == VehiclePhase::Pending {
                    v.global_plan = regions;
                    v.global_pos = 0;
                }
            }
            None => {
                self.incident(
                    Some(vid),
                    format!("no fallback route from {from} to {dest}; vehicle is stuck"),
                );
            }
        }
    }

    /// Region sequence crossed by a dense edge path starting at `from`
    /// (consecutive duplicates collapsed, destination region appended).
    fn path_region_sequence(
        &self,
        from: crate::netgraph::NodeId,
        dense: &[usize],
    ) -> Vec<RegionId> {
        let mut seq = Vec::new();
        let push = |r: RegionId, seq: &mut Vec<RegionId>| {
            if seq.last() != Some(&r) {
                seq.push(r);
            }
        };
        push(
            self.partition.region_of(self.net, from).expect("known node"),
            &mut seq,
        );
        for &ei in dense {
            let (_, to_idx) = self.net.edge_endpoints(ei);
            push(self.partition.region_of_idx(to_idx), &mut seq);
        }
        seq
    }

    /// Phase 1: departures in (depart step, id) order, gated by capacity on
    /// the first planned edge.
    fn inject(&mut self, t: u64) {
        let mut due: Vec<(u64, VehicleId)> = self
            .vehicles
            .values()
            .filter(|v| v.phase == VehiclePhase::Pending && v.depart_step <= t)
            .map(|v| (v.depart_step, v.id))
            .collect();
        due.sort_unstable();
        for (_, vid) in due {
            let Some(&first) = self.vehicles[&vid].local_queue.front() else {
                continue; // plan-less: fallback already failed, stays pending
            };
            if self.occupants_idx(first) < self.edges[first].capacity {
                let steps = self.edges[first].steps;
                {
                    let v = self.vehicles.get_mut(&vid).unwrap();
                    v.local_queue.pop_front();
                    v.phase = VehiclePhase::Traversing {
                        edge: first,
                        remaining: steps,
                        entered_at: t,
                    };
                    v.injected_step = Some(t);
                }
                self.enter_edge(vid, first, t);
            }
        }
    }

    /// Phase 2: timers started before this tick count down; finishers join
    /// their edge's exit queue in ascending vehicle-id order.
    fn advance_timers(&mut self, t: u64) {
        let ids: Vec<VehicleId> = self.vehicles.keys().copied().collect();
        for vid in ids {
            let v = self.vehicles.get_mut(&vid).unwrap();
            if let VehiclePhase::Traversing {
                edge,
                remaining,
                entered_at,
            } = v.phase
            {
                if entered_at == t {
                    continue;
                }
                let remaining = remaining - 1;
                if remaining == 0 {
                    v.phase = VehiclePhase::Queued {
                        edge,
                        joined_at: t,
                    };
                    self.edges[edge].traversing -= 1;
                    self.edges[edge].queue.push_back((vid, t));
                } else {
                    v.phase = VehiclePhase::Traversing {
                        edge,
                        remaining,
                        entered_at,
                    };
                }
            }
        }
    }

    /// Phase 3: serve exit queues in ascending edge order. Only vehicles
    /// queued before this tick are eligible; the queue head blocks followers
    /// while its next edge is full or its plan is undecided.
    fn serve_queues(&mut self, t: u64) {
        for ei in 0..self.edges.len() {
            let outflow = self.edges[ei].outflow;
            let mut served = 0;
            while served < outflow {
                let Some(&(vid, joined_at)) = self.edges[ei].queue.front() else {
                    break;
                };
                if joined_at >= t {
                    break; // joined this tick; eligible from the next one
                }
                let v = &self.vehicles[&vid];
                if self.net.edge(ei).to == v.dest {
                    self.edges[ei].queue.pop_front();
                    let v = self.vehicles.get_mut(&vid).unwrap();
                    v.phase = VehiclePhase::Arrived;
                    v.arrive_step = Some(t);
                    let region = self.edges[ei].region_from;
                    let dur =
                        (t - self.vehicles[&vid].region_entered_at) as Scalar
                            * self.cfg.step_length_s;
                    self.completions[region].push_back((t, dur));
                    served += 1;
                    continue;
                }
                let Some(&next) = v.local_queue.front() else {
                    break; // awaiting a continuation decision
                };
                if self.occupants_idx(next) >= self.edges[next].capacity {
                    break; // head-of-line blocking
                }
                self.edges[ei].queue.pop_front();
                let steps = self.edges[next].steps;
                {
                    let v = self.vehicles.get_mut(&vid).unwrap();
                    v.local_queue.pop_front();
                    v.phase = VehiclePhase::Traversing {
                        edge: next,
                        remaining: steps,
                        entered_at: t,
                    };
                }
                self.enter_edge(vid, next, t);
                served += 1;
            }
        }
    }

    /// Phase 4: queue residents collect an idle tick; blocked departures
    /// collect a waiting tick.
    fn account(&mut self, t: u64) {
        for v in self.vehicles.values_mut() {
            match v.phase {
                VehiclePhase::Queued { .. } => v.n_idle += 1,
                VehiclePhase::Pending if v.depart_step <= t => v.pending_wait += 1,
                _ => {}
            }
        }
    }

    /// Shared bookkeeping for entering an edge: occupancy, pass counts,
    /// realized route, region transit timing, and global-plan progress.
    ///
    /// Plan progress tracks the edge's head node: entering a boundary edge
    /// commits the vehicle to the next region, so observations taken at the
    /// region handoff already see the advanced plan. Transit timing tracks
    /// the tail node instead: the time spent "in" a region is the time on
    /// edges rooted there.
    fn enter_edge(&mut self, vid: VehicleId, edge_idx: usize, t: u64) {
        self.edges[edge_idx].traversing += 1;
        self.edges[edge_idx].passes += 1;
        let region = self.edges[edge_idx].region_from;
        let (_, head_idx) = self.net.edge_endpoints(edge_idx);
        let head_region = self.partition.region_of_idx(head_idx);
        let v = self.vehicles.get_mut(&vid).unwrap();
        v.route.push(edge_idx);
        if v.global_plan.get(v.global_pos + 1) == Some(&head_region) {
            v.global_pos += 1;
        }
        match v.cur_region {
            None => {
                v.cur_region = Some(region);
                v.region_entered_at = t;
            }
            Some(prev) if prev != region => {
                let dur = (t - v.region_entered_at) as Scalar * self.cfg.step_length_s;
                v.cur_region = Some(region);
                v.region_entered_at = t;
                self.completions[prev].push_back((t, dur));
            }
            Some(_) => {}
        }
    }
}

fn traversal_steps(e: &Edge, step_length_s: Scalar) -> u32 {
    ((e.free_flow_time() / step_length_s).ceil() as u32).max(1)
}

#[cfg(test)]
impl Simulation<'_> {
    /// Test-only: pin an edge's traversing count to probe occupancy math.
    pub(crate) fn force_traversing_count(&mut self, edge_idx: usize, n: u32) {
        self.edges[edge_idx].traversing = n;
    }

    /// Test-only: insert a region-transit completion record.
    pub(crate) fn record_completion(&mut self, region: RegionId, finish: u64, dur_s: Scalar) {
        self.completions[region].push_back((finish, dur_s));
    }
}

/// Runs a full episode: registers `trips`, then for each tick collects the
/// open decision requests, asks the controller, and advances the simulator,
/// recording per-step region aggregates. Never aborts on policy errors —
/// they become incidents with greedy fallbacks.
pub fn run_episode(
    net: &RoadNetwork,
    partition: &Partition,
    region_graph: &RegionGraph,
    trips: &[Trip],
    controller: &mut dyn VehicleController,
    cfg: &SimConfig,
) -> Result<EpisodeLog, SimError> {
    let mut sim = Simulation::new(net, partition, region_graph, cfg.clone())?;
    sim.register_trips(trips)?;
    let horizon = cfg.horizon_steps();
    let mut region_steps = Vec::with_capacity(horizon as usize);
    for _ in 0..horizon {
        let requests = sim.pending_decisions();
        let decisions = if requests.is_empty() {
            BTreeMap::new()
        } else {
            controller.decide(&sim, &requests)
        };
        sim.step(&decisions);
        region_steps.push(sim.region_aggregates());
    }
    let mut log = sim.into_log(region_steps);
    log.incidents.extend(controller.drain_incidents());
    log.incidents.sort_by_key(|i| i.step);
    Ok(log)
}
