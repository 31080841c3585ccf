//! Ready-made vehicle controllers: the two-level hierarchical navigator in
//! greedy, softmax and LLM-endpoint variants, a single-level (flat) variant
//! for ablations, and the classical per-vehicle baselines (fixed shortest
//! route, distance-to-go next hop, latency-estimate next hop).
//!
//! A controller answers the engine's decision requests each tick. The
//! hierarchical controller batches all selections of one tick into at most
//! two rounds (region-sequence choices first, then the local legs that
//! depend on them) so endpoint-backed policies can overlap their requests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::mesosim::{
    Decision, DecisionRequest, Incident, Simulation, VehicleController, VehicleId, VehiclePhase,
};
use crate::netgraph::{
    distance_field, k_shortest_paths, DistanceField, Edge, EdgeId, NodeId, RoadNetwork,
};
use crate::observe::{
    build_global_observation, build_local_observation, serialize_global_observation,
    serialize_local_observation, ObserveError,
};
use crate::partition::RegionId;
use crate::plan::{
    candidate_global_routes, candidate_local_routes, dijkstra_route, min_dits_next_hop,
    min_lat_next_hop, GlobalRoutePlan, LatencyPredictor, LocalRoutePlan, NextRegion,
};
use crate::policy::{
    global_features, greedy_select, llm_select_batch, local_features, softmax_select, FeatureVec,
    Level, LlmConfig, LlmError, LlmTransport, PolicyDecision, PolicyParams,
};
use crate::rng::derive_rng;
use crate::Scalar;

/// Default number of region-sequence candidates per global decision.
pub const DEFAULT_GLOBAL_CANDIDATES: usize = 5;
/// Default number of local route candidates per within-region decision.
pub const DEFAULT_LOCAL_CANDIDATES: usize = 10;

/// Navigation method selectable in benchmarks and the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    /// Free-flow shortest route fixed at departure.
    Dijkstra,
    /// Next hop minimizing remaining free-flow distance to the destination.
    MinDits,
    /// Next hop minimizing estimated edge latency plus free-flow remainder.
    MinLat,
    /// Hierarchical navigator, greedy candidate selection.
    GreedyHier,
    /// Hierarchical navigator, sampling from the featurized softmax policy.
    SoftmaxHier,
    /// Hierarchical navigator, candidate selection by an LLM endpoint.
    LlmHier,
}

impl Method {
    /// All methods in their canonical benchmark order.
    pub const ALL: [Method; 6] = [
        Method::Dijkstra,
        Method::MinDits,
        Method::MinLat,
        Method::GreedyHier,
        Method::SoftmaxHier,
        Method::LlmHier,
    ];

    /// The canonical name used in configuration files and output rows.
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dijkstra => "dijkstra",
            Method::MinDits => "mindits",
            Method::MinLat => "minlat",
            Method::GreedyHier => "greedy-hier",
            Method::SoftmaxHier => "softmax-hier",
            Method::LlmHier => "llm-hier",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            format!(
                "unknown method {s:?} (expected one of: dijkstra, mindits, minlat, \
                 greedy-hier, softmax-hier, llm-hier)"
            )
        })
    }
}

/// One recorded candidate selection, kept by the learning-capable
/// controllers so a trainer can replay the decision context.
#[derive(Clone, Debug)]
pub struct DecisionRecord {
    pub vehicle: VehicleId,
    pub step: u64,
    pub level: Level,
    /// Node the vehicle decided from (origin at departure, edge head later).
    pub at_node: NodeId,
    pub features: Vec<FeatureVec>,
    pub est_times_s: Vec<Scalar>,
    pub chosen: usize,
    pub log_prob: Scalar,
    /// Candidate region sequences (global selections only).
    pub global_candidates: Vec<GlobalRoutePlan>,
    /// Candidate local legs (local selections only).
    pub local_candidates: Vec<LocalRoutePlan>,
    /// Remaining region plan the local candidates were built against,
    /// starting at the current region. Empty for global selections and for
    /// flat (single-level) routes.
    pub region_plan: Vec<RegionId>,
    /// Mean regional travel-time estimates at decision time, dense by region.
    pub tau_bar_s: Vec<Scalar>,
}

/// How a learning-capable controller picks among scored candidates.
enum Selector {
    Greedy,
    Softmax(PolicyParams),
    Llm(LlmConfig, Box<dyn LlmTransport>),
}

/// Runs one tick's worth of selections for a controller and accumulates the
/// incidents its fallbacks generate.
struct SelectorEngine {
    selector: Selector,
    rng: ChaCha8Rng,
    incidents: Vec<Incident>,
}

/// One pending candidate selection inside a tick.
struct SelTask {
    vehicle: VehicleId,
    level: Level,
    features: Vec<FeatureVec>,
    est_times_s: Vec<Scalar>,
    /// Serialized observation; built only when an endpoint will read it.
    text: String,
}

impl SelectorEngine {
    fn new(selector: Selector, seed: u64) -> Self {
        SelectorEngine {
            selector,
            rng: derive_rng(seed, "controller-selector"),
            incidents: Vec::new(),
        }
    }

    fn wants_text(&self) -> bool {
        matches!(self.selector, Selector::Llm(..))
    }

    fn note(&mut self, step: u64, vehicle: VehicleId, message: String) {
        self.incidents.push(Incident {
            step,
            vehicle: Some(vehicle.0),
            message,
        });
    }

    /// Resolves every task, in task order. The result is aligned with the
    /// input; a `None` means the selection failed outright, which callers
    /// translate into "no decision" so the engine's free-flow fallback takes
    /// over.
    fn run(&mut self, step: u64, tasks: &[SelTask]) -> Vec<Option<PolicyDecision>> {
        let mut notes: Vec<(VehicleId, String)> = Vec::new();
        let out = match &mut self.selector {
            Selector::Greedy => tasks
                .iter()
                .map(|t| greedy_select(&t.est_times_s).ok())
                .collect(),
            Selector::Softmax(params) => {
                let rng = &mut self.rng;
                tasks
                    .iter()
                    .map(|t| softmax_select(params, t.level, &t.features, rng).ok())
                    .collect()
            }
            Selector::Llm(config, transport) => {
                let items: Vec<(u64, String, Vec<Scalar>)> = tasks
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i as u64, t.text.clone(), t.est_times_s.clone()))
                    .collect();
                let mut keyed = Vec::new();
                let mut decisions =
                    llm_select_batch(transport.as_ref(), config, &items, &mut keyed);
                for (id, message) in keyed {
                    notes.push((tasks[id as usize].vehicle, message));
                }
                (0..tasks.len())
                    .map(|i| decisions.remove(&(i as u64)))
                    .collect()
            }
        };
        for (vehicle, message) in notes {
            self.note(step, vehicle, message);
        }
        out
    }
}

/// The two-level navigator: picks a region sequence at departure (and when
/// the stored plan goes stale), then a local route candidate per region.
pub struct HierarchicalController {
    engine: SelectorEngine,
    m_global: usize,
    k_local: usize,
    trace: Vec<DecisionRecord>,
}

/// What round one of a tick decided to do for one request.
enum RoundOne {
    /// Global selection made at departure; the local leg follows.
    Depart {
        vehicle: VehicleId,
        at: NodeId,
        candidates: Vec<GlobalRoutePlan>,
        task: usize,
    },
    /// Global selection made mid-route to replace a stale plan.
    Reroute {
        vehicle: VehicleId,
        at: NodeId,
        candidates: Vec<GlobalRoutePlan>,
        task: usize,
    },
    /// Local selection continuing a valid plan.
    Continue {
        vehicle: VehicleId,
        candidates: Vec<LocalRoutePlan>,
        region_plan: Vec<RegionId>,
        at: NodeId,
        task: usize,
    },
}

/// A local-leg selection pending after a global choice.
struct RoundTwo {
    vehicle: VehicleId,
    at: NodeId,
    regions: Vec<RegionId>,
    candidates: Vec<LocalRoutePlan>,
    task: usize,
    departing: bool,
}

impl HierarchicalController {
    fn with_selector(selector: Selector, seed: u64, m_global: usize, k_local: usize) -> Self {
        HierarchicalController {
            engine: SelectorEngine::new(selector, seed),
            m_global: m_global.max(1),
            k_local: k_local.max(1),
            trace: Vec::new(),
        }
    }

    /// Greedy variant: always the lowest estimated travel time.
    pub fn greedy(m_global: usize, k_local: usize) -> Self {
        Self::with_selector(Selector::Greedy, 0, m_global, k_local)
    }

    /// Softmax variant sampling with the given parameters; `seed` fixes the
    /// sampling stream.
    pub fn softmax(params: PolicyParams, seed: u64, m_global: usize, k_local: usize) -> Self {
        Self::with_selector(Selector::Softmax(params), seed, m_global, k_local)
    }

    /// Endpoint variant; fails if the transport cannot be constructed.
    pub fn llm(config: LlmConfig, m_global: usize, k_local: usize) -> Result<Self, LlmError> {
        let transport = config.transport()?;
        Ok(Self::with_selector(
            Selector::Llm(config, transport),
            0,
            m_global,
            k_local,
        ))
    }

    /// Endpoint variant with a caller-supplied transport (used in tests).
    pub fn llm_with_transport(
        config: LlmConfig,
        transport: Box<dyn LlmTransport>,
        m_global: usize,
        k_local: usize,
    ) -> Self {
        Self::with_selector(Selector::Llm(config, transport), 0, m_global, k_local)
    }

    /// Every candidate selection recorded so far.
    pub fn trace(&self) -> &[DecisionRecord] {
        &self.trace
    }

    /// Takes ownership of the recorded selections, clearing the buffer.
    pub fn take_trace(&mut self) -> Vec<DecisionRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Region-sequence candidates from `from_region`, keeping only those
    /// whose first local leg is actually constructible from `position`.
    fn feasible_global_candidates(
        &self,
        sim: &Simulation,
        position: NodeId,
        from_region: RegionId,
        dest: NodeId,
        tau_bar: &[Scalar],
    ) -> Vec<GlobalRoutePlan> {
        let Some(to_region) = sim.partition().region_of(sim.net(), dest) else {
            return Vec::new();
        };
        let mut candidates = candidate_global_routes(
            sim.region_graph(),
            Some(tau_bar),
            from_region,
            to_region,
            self.m_global,
        );
        candidates.retain(|c| {
            let next = match c.regions.get(1) {
                Some(&z) => NextRegion::Region(z),
                None => NextRegion::Final,
            };
            !candidate_local_routes(
                sim.net(),
                sim.partition(),
                sim.region_graph(),
                position,
                next,
                dest,
                1,
            )
            .is_empty()
        });
        candidates
    }

    /// Builds the local-leg selection for a freshly chosen region plan.
    fn local_round(
        &mut self,
        sim: &Simulation,
        vehicle: VehicleId,
        at: NodeId,
        regions: Vec<RegionId>,
        departing: bool,
        tasks: &mut Vec<SelTask>,
    ) -> Option<RoundTwo> {
        let dest = sim.vehicle(vehicle)?.dest;
        let next = match regions.get(1) {
            Some(&z) => NextRegion::Region(z),
            None => NextRegion::Final,
        };
        let candidates = candidate_local_routes(
            sim.net(),
            sim.partition(),
            sim.region_graph(),
            at,
            next,
            dest,
            self.k_local,
        );
        if candidates.is_empty() {
            return None;
        }
        let observation = build_local_observation(sim, vehicle, &regions).ok()?;
        let features = local_features(&observation, &candidates);
        let est_times_s: Vec<Scalar> = candidates.iter().map(|c| c.free_flow_s).collect();
        let text = if self.engine.wants_text() {
            serialize_local_observation(&observation, &candidates)
        } else {
            String::new()
        };
        tasks.push(SelTask {
            vehicle,
            level: Level::Local,
            features,
            est_times_s,
            text,
        });
        Some(RoundTwo {
            vehicle,
            at,
            regions,
            candidates,
            task: tasks.len() - 1,
            departing,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        step: u64,
        task: &SelTask,
        decision: &PolicyDecision,
        global_candidates: Vec<GlobalRoutePlan>,
        local_candidates: Vec<LocalRoutePlan>,
        region_plan: Vec<RegionId>,
        at_node: NodeId,
        tau_bar_s: &[Scalar],
    ) {
        self.trace.push(DecisionRecord {
            vehicle: task.vehicle,
            step,
            level: task.level,
            at_node,
            features: task.features.clone(),
            est_times_s: task.est_times_s.clone(),
            chosen: decision.index,
            log_prob: decision.log_prob,
            global_candidates,
            local_candidates,
            region_plan,
            tau_bar_s: tau_bar_s.to_vec(),
        });
    }
}

impl VehicleController for HierarchicalController {
    fn decide(
        &mut self,
        sim: &Simulation,
        requests: &[DecisionRequest],
    ) -> BTreeMap<VehicleId, Decision> {
        let step = sim.t();
        let mut out = BTreeMap::new();
        if requests.is_empty() {
            return out;
        }
        let global_obs = build_global_observation(sim);
        let tau_bar: Vec<Scalar> = global_obs.regions.iter().map(|r| r.tau_bar_s).collect();

        // Round one: a global selection per departure or stale plan, a
        // local selection per valid continuation.
        let mut tasks: Vec<SelTask> = Vec::new();
        let mut staged: Vec<RoundOne> = Vec::new();
        for request in requests {
            match *request {
                DecisionRequest::Depart { vehicle } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let (origin, dest) = (v.origin, v.dest);
                    let Some(z_o) = sim.partition().region_of(sim.net(), origin) else {
                        continue;
                    };
                    let candidates =
                        self.feasible_global_candidates(sim, origin, z_o, dest, &tau_bar);
                    if candidates.is_empty() {
                        self.engine.note(
                            step,
                            vehicle,
                            "no feasible region sequence at departure".to_owned(),
                        );
                        continue;
                    }
                    let features = global_features(&global_obs, &candidates);
                    let est_times_s: Vec<Scalar> = candidates.iter().map(|c| c.cost_s).collect();
                    let text = if self.engine.wants_text() {
                        serialize_global_observation(&global_obs, &candidates)
                    } else {
                        String::new()
                    };
                    tasks.push(SelTask {
                        vehicle,
                        level: Level::Global,
                        features,
                        est_times_s,
                        text,
                    });
                    staged.push(RoundOne::Depart {
                        vehicle,
                        at: origin,
                        candidates,
                        task: tasks.len() - 1,
                    });
                }
                DecisionRequest::Continue { vehicle, edge } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let dest = v.dest;
                    let at = sim.net().edge(edge).to;
                    let remaining: Vec<RegionId> = v.remaining_regions().to_vec();
                    let stale = match build_local_observation(sim, vehicle, &remaining) {
                        Ok(observation) => {
                            let candidates = candidate_local_routes(
                                sim.net(),
                                sim.partition(),
                                sim.region_graph(),
                                at,
                                observation.next_region,
                                dest,
                                self.k_local,
                            );
                            if candidates.is_empty() {
                                // Valid plan, but no way onward from this
                                // node; replan the region sequence.
                                true
                            } else {
                                let features = local_features(&observation, &candidates);
                                let est_times_s: Vec<Scalar> =
                                    candidates.iter().map(|c| c.free_flow_s).collect();
                                let text = if self.engine.wants_text() {
                                    serialize_local_observation(&observation, &candidates)
                                } else {
                                    String::new()
                                };
                                tasks.push(SelTask {
                                    vehicle,
                                    level: Level::Local,
                                    features,
                                    est_times_s,
                                    text,
                                });
                                staged.push(RoundOne::Continue {
                                    vehicle,
                                    candidates,
                                    region_plan: remaining,
                                    at,
                                    task: tasks.len() - 1,
                                });
                                false
                            }
                        }
                        Err(ObserveError::StalePlan { .. } | ObserveError::NotAdjacent { .. }) => {
                            true
                        }
                        Err(_) => continue,
                    };
                    if stale {
                        let Some(z_now) = sim.partition().region_of(sim.net(), at) else {
                            continue;
                        };
                        let candidates =
                            self.feasible_global_candidates(sim, at, z_now, dest, &tau_bar);
                        if candidates.is_empty() {
                            self.engine.note(
                                step,
                                vehicle,
                                "no feasible region sequence for replanning".to_owned(),
                            );
                            continue;
                        }
                        let features = global_features(&global_obs, &candidates);
                        let est_times_s: Vec<Scalar> =
                            candidates.iter().map(|c| c.cost_s).collect();
                        let text = if self.engine.wants_text() {
                            serialize_global_observation(&global_obs, &candidates)
                        } else {
                            String::new()
                        };
                        tasks.push(SelTask {
                            vehicle,
                            level: Level::Global,
                            features,
                            est_times_s,
                            text,
                        });
                        staged.push(RoundOne::Reroute {
                            vehicle,
                            at,
                            candidates,
                            task: tasks.len() - 1,
                        });
                    }
                }
            }
        }

        let picks = self.engine.run(step, &tasks);

        // Round two: local legs for the region plans just chosen.
        let mut tasks2: Vec<SelTask> = Vec::new();
        let mut staged2: Vec<RoundTwo> = Vec::new();
        for stage in staged {
            match stage {
                RoundOne::Continue {
                    vehicle,
                    candidates,
                    region_plan,
                    at,
                    task,
                } => {
                    let Some(pick) = picks[task].as_ref() else { continue };
                    self.record(
                        step,
                        &tasks[task],
                        pick,
                        Vec::new(),
                        candidates.clone(),
                        region_plan,
                        at,
                        &tau_bar,
                    );
                    out.insert(
                        vehicle,
                        Decision::Continue {
                            local_plan: candidates[pick.index].edges.clone(),
                        },
                    );
                }
                RoundOne::Depart {
                    vehicle,
                    at,
                    candidates,
                    task,
                }
                | RoundOne::Reroute {
                    vehicle,
                    at,
                    candidates,
                    task,
                } => {
                    let Some(pick) = picks[task].as_ref() else { continue };
                    let departing = matches!(
                        sim.vehicle(vehicle).map(|v| &v.phase),
                        Some(VehiclePhase::Pending)
                    );
                    let regions = candidates[pick.index].regions.clone();
                    self.record(
                        step,
                        &tasks[task],
                        pick,
                        candidates,
                        Vec::new(),
                        Vec::new(),
                        at,
                        &tau_bar,
                    );
                    match self.local_round(sim, vehicle, at, regions, departing, &mut tasks2) {
                        Some(r) => staged2.push(r),
                        None => self.engine.note(
                            step,
                            vehicle,
                            "chosen region sequence has no local leg".to_owned(),
                        ),
                    }
                }
            }
        }

        let picks2 = self.engine.run(step, &tasks2);
        for stage in staged2 {
            let Some(pick) = picks2[stage.task].as_ref() else { continue };
            self.record(
                step,
                &tasks2[stage.task],
                pick,
                Vec::new(),
                stage.candidates.clone(),
                stage.regions.clone(),
                stage.at,
                &tau_bar,
            );
            let local_plan = stage.candidates[pick.index].edges.clone();
            let decision = if stage.departing {
                Decision::Depart {
                    global_plan: stage.regions,
                    local_plan,
                }
            } else {
                Decision::Reroute {
                    global_plan: stage.regions,
                    local_plan,
                }
            };
            out.insert(stage.vehicle, decision);
        }
        out
    }

    fn drain_incidents(&mut self) -> Vec<Incident> {
        std::mem::take(&mut self.engine.incidents)
    }
}

/// Single-level ablation: scores whole-network route candidates with the
/// local parameter vector and no region structure at all.
pub struct FlatController {
    engine: SelectorEngine,
    k: usize,
    trace: Vec<DecisionRecord>,
}

impl FlatController {
    /// Greedy variant.
    pub fn greedy(k: usize) -> Self {
        FlatController {
            engine: SelectorEngine::new(Selector::Greedy, 0),
            k: k.max(1),
            trace: Vec::new(),
        }
    }

    /// Softmax variant sampling with the given parameters.
    pub fn softmax(params: PolicyParams, seed: u64, k: usize) -> Self {
        FlatController {
            engine: SelectorEngine::new(Selector::Softmax(params), seed),
            k: k.max(1),
            trace: Vec::new(),
        }
    }

    /// Every candidate selection recorded so far.
    pub fn trace(&self) -> &[DecisionRecord] {
        &self.trace
    }

    /// Takes ownership of the recorded selections, clearing the buffer.
    pub fn take_trace(&mut self) -> Vec<DecisionRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Features for whole-network routes: normalized free-flow time, mean
    /// congestion along the route, no contention term, normalized length,
    /// bias.
    fn route_features(&self, sim: &Simulation, candidates: &[LocalRoutePlan]) -> Vec<FeatureVec> {
        let max_t = candidates
            .iter()
            .map(|c| c.free_flow_s)
            .fold(0.0 as Scalar, Scalar::max);
        let max_len = candidates.iter().map(|c| c.edges.len()).max().unwrap_or(0) as Scalar;
        candidates
            .iter()
            .map(|c| {
                let mean_cong = if c.edges.is_empty() {
                    0.0
                } else {
                    c.edges
                        .iter()
                        .map(|&e| {
                            sim.cong_idx(sim.net().edge_idx(e).expect("candidate edge exists"))
                        })
                        .sum::<Scalar>()
                        / c.edges.len() as Scalar
                };
                [
                    if max_t > 0.0 { c.free_flow_s / max_t } else { 0.0 },
                    mean_cong,
                    0.0,
                    if max_len > 0.0 {
                        c.edges.len() as Scalar / max_len
                    } else {
                        0.0
                    },
                    1.0,
                ]
            })
            .collect()
    }

    fn select_route(
        &mut self,
        sim: &Simulation,
        step: u64,
        vehicle: VehicleId,
        from: NodeId,
        dest: NodeId,
    ) -> Option<Vec<EdgeId>> {
        let candidates: Vec<LocalRoutePlan> =
            k_shortest_paths(sim.net(), from, dest, self.k, |e: &Edge| e.free_flow_time())
                .into_iter()
                .map(|p| LocalRoutePlan {
                    edges: p.edges,
                    free_flow_s: p.cost,
                })
                .collect();
        if candidates.is_empty() {
            return None;
        }
        let features = self.route_features(sim, &candidates);
        let est_times_s: Vec<Scalar> = candidates.iter().map(|c| c.free_flow_s).collect();
        let tasks = vec![SelTask {
            vehicle,
            level: Level::Local,
            features,
            est_times_s,
            text: String::new(),
        }];
        let pick = self.engine.run(step, &tasks).remove(0)?;
        self.trace.push(DecisionRecord {
            vehicle,
            step,
            level: Level::Local,
            at_node: from,
            features: tasks[0].features.clone(),
            est_times_s: tasks[0].est_times_s.clone(),
            chosen: pick.index,
            log_prob: pick.log_prob,
            global_candidates: Vec::new(),
            local_candidates: candidates.clone(),
            region_plan: Vec::new(),
            tau_bar_s: Vec::new(),
        });
        Some(candidates[pick.index].edges.clone())
    }
}

impl VehicleController for FlatController {
    fn decide(
        &mut self,
        sim: &Simulation,
        requests: &[DecisionRequest],
    ) -> BTreeMap<VehicleId, Decision> {
        let step = sim.t();
        let mut out = BTreeMap::new();
        for request in requests {
            match *request {
                DecisionRequest::Depart { vehicle } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let (origin, dest) = (v.origin, v.dest);
                    if let Some(edges) = self.select_route(sim, step, vehicle, origin, dest) {
                        out.insert(
                            vehicle,
                            Decision::Depart {
                                global_plan: Vec::new(),
                                local_plan: edges,
                            },
                        );
                    }
                }
                DecisionRequest::Continue { vehicle, edge } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let dest = v.dest;
                    let at = sim.net().edge(edge).to;
                    if let Some(edges) = self.select_route(sim, step, vehicle, at, dest) {
                        out.insert(vehicle, Decision::Continue { local_plan: edges });
                    }
                }
            }
        }
        out
    }

    fn drain_incidents(&mut self) -> Vec<Incident> {
        std::mem::take(&mut self.engine.incidents)
    }
}

/// Fixes the free-flow shortest route at departure and never revises it.
pub struct DijkstraController;

impl VehicleController for DijkstraController {
    fn decide(
        &mut self,
        sim: &Simulation,
        requests: &[DecisionRequest],
    ) -> BTreeMap<VehicleId, Decision> {
        let mut out = BTreeMap::new();
        for request in requests {
            match *request {
                DecisionRequest::Depart { vehicle } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    if let Some(path) = dijkstra_route(sim.net(), v.origin, v.dest) {
                        out.insert(
                            vehicle,
                            Decision::Depart {
                                global_plan: Vec::new(),
                                local_plan: path.edges,
                            },
                        );
                    }
                }
                DecisionRequest::Continue { vehicle, edge } => {
                    // Only reachable after an engine fallback; resume from here.
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let at = sim.net().edge(edge).to;
                    if let Some(path) = dijkstra_route(sim.net(), at, v.dest) {
                        out.insert(vehicle, Decision::Continue { local_plan: path.edges });
                    }
                }
            }
        }
        out
    }
}

/// Per-destination distance fields, shared by the next-hop baselines.
#[derive(Default)]
struct FieldCache {
    fields: BTreeMap<NodeId, DistanceField<Scalar>>,
}

impl FieldCache {
    fn field(&mut self, net: &RoadNetwork, dest: NodeId) -> &DistanceField<Scalar> {
        self.fields
            .entry(dest)
            .or_insert_with(|| distance_field(net, dest, |e| e.free_flow_time()))
    }
}

/// Greedy next-hop rule on remaining free-flow time to the destination.
#[derive(Default)]
pub struct MinDitsController {
    cache: FieldCache,
}

impl MinDitsController {
    pub fn new() -> Self {
        Self::default()
    }

    fn hop(&mut self, sim: &Simulation, from: NodeId, dest: NodeId) -> Option<Vec<EdgeId>> {
        let field = self.cache.field(sim.net(), dest);
        min_dits_next_hop(sim.net(), field, from).map(|edge| vec![edge])
    }
}

impl VehicleController for MinDitsController {
    fn decide(
        &mut self,
        sim: &Simulation,
        requests: &[DecisionRequest],
    ) -> BTreeMap<VehicleId, Decision> {
        let mut out = BTreeMap::new();
        for request in requests {
            match *request {
                DecisionRequest::Depart { vehicle } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let (origin, dest) = (v.origin, v.dest);
                    if let Some(local_plan) = self.hop(sim, origin, dest) {
                        out.insert(
                            vehicle,
                            Decision::Depart {
                                global_plan: Vec::new(),
                                local_plan,
                            },
                        );
                    }
                }
                DecisionRequest::Continue { vehicle, edge } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let at = sim.net().edge(edge).to;
                    if let Some(local_plan) = self.hop(sim, at, v.dest) {
                        out.insert(vehicle, Decision::Continue { local_plan });
                    }
                }
            }
        }
        out
    }
}

/// Next-hop rule on estimated edge latency plus free-flow remainder. Edge
/// latencies are learned online from this controller's own vehicles: a
/// vehicle entering edge `b` after edge `a` reveals how long `a` actually
/// took (traversal plus queueing plus blocked admissions), and that sample
/// updates the estimate for `a`. The final edge of a trip produces no
/// sample because nothing is entered after it.
pub struct MinLatController {
    predictor: LatencyPredictor,
    cache: FieldCache,
    /// Last observed edge entry per vehicle: (dense edge index, entry step).
    last_entry: BTreeMap<VehicleId, (usize, u64)>,
}

impl MinLatController {
    pub fn new(net: &RoadNetwork) -> Self {
        MinLatController {
            predictor: LatencyPredictor::new(net),
            cache: FieldCache::default(),
            last_entry: BTreeMap::new(),
        }
    }

    /// The current latency estimates (exposed for inspection in tests).
    pub fn predictor(&self) -> &LatencyPredictor {
        &self.predictor
    }

    fn hop(&mut self, sim: &Simulation, from: NodeId, dest: NodeId) -> Option<Vec<EdgeId>> {
        let field = self.cache.field(sim.net(), dest);
        min_lat_next_hop(sim.net(), &self.predictor, field, from).map(|edge| vec![edge])
    }
}

impl VehicleController for MinLatController {
    fn decide(
        &mut self,
        sim: &Simulation,
        requests: &[DecisionRequest],
    ) -> BTreeMap<VehicleId, Decision> {
        let mut out = BTreeMap::new();
        for request in requests {
            match *request {
                DecisionRequest::Depart { vehicle } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let (origin, dest) = (v.origin, v.dest);
                    if let Some(local_plan) = self.hop(sim, origin, dest) {
                        out.insert(
                            vehicle,
                            Decision::Depart {
                                global_plan: Vec::new(),
                                local_plan,
                            },
                        );
                    }
                }
                DecisionRequest::Continue { vehicle, edge } => {
                    let Some(v) = sim.vehicle(vehicle) else { continue };
                    let dest = v.dest;
                    // Harvest the previous edge's realized latency: the
                    // entry step of the current edge is its queue-join step
                    // minus its traversal time.
                    if let VehiclePhase::Queued { edge: cur, joined_at } = v.phase {
                        let entered =
                            joined_at.saturating_sub(sim.traversal_steps_idx(cur) as u64);
                        if let Some(&(prev_idx, prev_entered)) = self.last_entry.get(&vehicle) {
                            if prev_idx != cur {
                                let latency = entered.saturating_sub(prev_entered) as Scalar
                                    * sim.step_length_s();
                                self.predictor.observe(prev_idx, latency);
                            }
                        }
                        self.last_entry.insert(vehicle, (cur, entered));
                    }
                    let at = sim.net().edge(edge).to;
                    if let Some(local_plan) = self.hop(sim, at, dest) {
                        out.insert(vehicle, Decision::Continue { local_plan });
                    }
                }
            }
        }
        out
    }
}

/// Builds the controller for a benchmark method. `seed` fixes any sampling
/// stream the controller owns; `params` and `llm` configure the policy-based
/// variants and are ignored by the classical baselines.
pub fn build_controller(
    method: Method,
    net: &RoadNetwork,
    params: &PolicyParams,
    llm: &LlmConfig,
    seed: u64,
    m_global: usize,
    k_local: usize,
) -> Result<Box<dyn VehicleController>, LlmError> {
    Ok(match method {
        Method::Dijkstra => Box::new(DijkstraController),
        Method::MinDits => Box::new(MinDitsController::new()),
        Method::MinLat => Box::new(MinLatController::new(net)),
        Method::GreedyHier => Box::new(HierarchicalController::greedy(m_global, k_local)),
        Method::SoftmaxHier => Box::new(HierarchicalController::softmax(
            params.clone(),
            seed,
            m_global,
            k_local,
        )),
        Method::LlmHier => Box::new(HierarchicalController::llm(llm.clone(), m_global, k_local)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesosim::{run_episode, SimConfig, Trip};
    use crate::netgraph::Node;
    use crate::partition::{build_region_graph, Partition, RegionGraph};
    use crate::policy::StubTransport;

    fn node(id: u64) -> Node {
        Node {
            id: NodeId(id),
            x: id as Scalar * 100.0,
            y: 0.0,
        }
    }

    /// An edge taking `steps` whole one-minute steps under free flow.
    fn edge(id: u64, from: u64, to: u64, steps: u32) -> Edge {
        Edge {
            id: EdgeId(id),
            from: NodeId(from),
            to: NodeId(to),
            length_m: steps as Scalar * 60.0 * 10.0,
            speed_mps: 10.0,
            lanes: 1,
            capacity: 10,
            outflow: Some(1),
        }
    }

    fn cfg(horizon_s: Scalar) -> SimConfig {
        SimConfig {
            step_length_s: 60.0,
            horizon_s,
            seed: 7,
            ..SimConfig::default()
        }
    }

    fn trip(id: u64, o: u64, d: u64, depart_s: Scalar) -> Trip {
        Trip {
            id: VehicleId(id),
            origin: NodeId(o),
            dest: NodeId(d),
            depart_s,
            controlled: true,
        }
    }

    /// Two regions in a line: 1 -e1-> 2 -e2-> 3 -e3-> 4, split {1,2} / {3,4}.
    fn two_region_world() -> (RoadNetwork, Partition, RegionGraph) {
        let net = RoadNetwork::new(
            vec![node(1), node(2), node(3), node(4)],
            vec![edge(1, 1, 2, 1), edge(2, 2, 3, 1), edge(3, 3, 4, 1)],
        )
        .unwrap();
        let part = Partition::from_assignment(&net, &[0, 0, 1, 1]);
        let rg = build_region_graph(&net, &part);
        (net, part, rg)
    }

    /// Two parallel corridors with shared endpoints: the short one via node
    /// 2 (2 steps total) and the long one via node 3 (4 steps total).
    fn two_corridor_world() -> (RoadNetwork, Partition, RegionGraph) {
        let net = RoadNetwork::new(
            vec![node(1), node(2), node(3), node(4)],
            vec![
                edge(1, 1, 2, 1),
                edge(2, 2, 4, 1),
                edge(3, 1, 3, 2),
                edge(4, 3, 4, 2),
            ],
        )
        .unwrap();
        let part = Partition::from_assignment(&net, &[0, 0, 0, 0]);
        let rg = build_region_graph(&net, &part);
        (net, part, rg)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("astar".parse::<Method>().is_err());
        assert_eq!(Method::SoftmaxHier.to_string(), "softmax-hier");
    }

    #[test]
    fn dijkstra_controller_fixes_the_shortest_route() {
        let (net, part, rg) = two_corridor_world();
        let log = run_episode(
            &net,
            &part,
            &rg,
            &[trip(1, 1, 4, 0.0)],
            &mut DijkstraController,
            &cfg(1200.0),
        )
        .unwrap();
        let v = &log.vehicles[0];
        assert!(v.finished());
        assert_eq!(v.route, vec![1, 2]); // the short corridor
        assert!(log.incidents.is_empty());
    }

    #[test]
    fn min_dits_walks_the_distance_field() {
        let (net, part, rg) = two_corridor_world();
        let mut ctl = MinDitsController::new();
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1200.0)).unwrap();
        let v = &log.vehicles[0];
        assert!(v.finished());
        assert_eq!(v.route, vec![1, 2]);
        assert!(log.incidents.is_empty());
    }

    #[test]
    fn min_lat_harvests_edge_latencies_from_entry_steps() {
        // A three-edge line forces two continuation requests; the second one
        // reveals the realized latency of the first edge.
        let net = RoadNetwork::new(
            vec![node(1), node(2), node(3), node(4)],
            vec![edge(1, 1, 2, 3), edge(2, 2, 3, 2), edge(3, 3, 4, 1)],
        )
        .unwrap();
        let part = Partition::from_assignment(&net, &[0, 0, 0, 0]);
        let rg = build_region_graph(&net, &part);
        let mut ctl = MinLatController::new(&net);
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1800.0)).unwrap();
        assert!(log.vehicles[0].finished());
        // Free flow and no queues: edge 1 was entered at step 0 and edge 2
        // at step 4 (one service step after joining the queue at step 3), so
        // the observed latency is 4 minutes against a 3-minute free flow.
        let e1 = net.edge_idx(EdgeId(1)).unwrap();
        let expected = 0.7 * 180.0 + 0.3 * 240.0;
        assert!((ctl.predictor().predicted(e1) - expected).abs() < 1e-9);
    }

    #[test]
    fn hierarchical_greedy_routes_through_regions() {
        let (net, part, rg) = two_region_world();
        let mut ctl = HierarchicalController::greedy(3, 4);
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1200.0)).unwrap();
        let v = &log.vehicles[0];
        assert!(v.finished());
        assert_eq!(v.route, vec![1, 2, 3]);
        assert_eq!(v.global_plan, vec![0, 1]);
        assert!(log.incidents.is_empty());
        // One global and one local selection at departure, one local
        // selection at the region handoff.
        let levels: Vec<Level> = ctl.trace().iter().map(|r| r.level).collect();
        assert_eq!(levels, vec![Level::Global, Level::Local, Level::Local]);
        let depart_local = &ctl.trace()[1];
        assert_eq!(depart_local.region_plan, vec![0, 1]);
        assert_eq!(depart_local.at_node, NodeId(1));
        let handoff = &ctl.trace()[2];
        assert_eq!(handoff.region_plan, vec![1]);
        assert_eq!(handoff.at_node, NodeId(3));
    }

    #[test]
    fn softmax_episodes_are_reproducible_per_seed() {
        let (net, part, rg) = two_corridor_world();
        let trips = [trip(1, 1, 4, 0.0), trip(2, 1, 4, 60.0)];
        let mut params = PolicyParams::default();
        params.theta_local[0] = -0.8; // mild preference for fast routes
        let run = |seed: u64| {
            let mut ctl = HierarchicalController::softmax(params.clone(), seed, 3, 4);
            run_episode(&net, &part, &rg, &trips, &mut ctl, &cfg(1800.0))
                .unwrap()
                .to_json()
        };
        assert_eq!(run(11), run(11));
        // Different sampling seeds may diverge but must stay valid episodes.
        let _ = run(12);
    }

    #[test]
    fn stale_plan_triggers_a_validated_reroute() {
        // Seed the vehicle with a region plan that claims the trip ends in
        // region 0 while the destination is in region 1; the first
        // continuation request must repair it.
        let (net, part, rg) = two_region_world();
        struct FirstWrong {
            inner: HierarchicalController,
            first: bool,
        }
        impl VehicleController for FirstWrong {
            fn decide(
                &mut self,
                sim: &Simulation,
                requests: &[DecisionRequest],
            ) -> BTreeMap<VehicleId, Decision> {
                if self.first && !requests.is_empty() {
                    self.first = false;
                    let mut out = BTreeMap::new();
                    out.insert(
                        requests[0].vehicle(),
                        Decision::Depart {
                            global_plan: vec![0],
                            local_plan: vec![EdgeId(1)],
                        },
                    );
                    return out;
                }
                self.inner.decide(sim, requests)
            }
            fn drain_incidents(&mut self) -> Vec<Incident> {
                self.inner.drain_incidents()
            }
        }
        let mut ctl = FirstWrong {
            inner: HierarchicalController::greedy(3, 4),
            first: true,
        };
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1200.0)).unwrap();
        let v = &log.vehicles[0];
        assert!(v.finished());
        assert_eq!(v.route, vec![1, 2, 3]);
        // The reroute replaced the region plan from the stale position.
        assert_eq!(v.global_plan, vec![0, 1]);
        // Round one of the repair is a global selection.
        assert!(ctl
            .inner
            .trace()
            .iter()
            .any(|r| r.level == Level::Global && r.at_node == NodeId(2)));
    }

    #[test]
    fn flat_controller_routes_without_region_plans() {
        let (net, part, rg) = two_corridor_world();
        let mut ctl = FlatController::greedy(4);
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1200.0)).unwrap();
        let v = &log.vehicles[0];
        assert!(v.finished());
        assert_eq!(v.route, vec![1, 2]);
        assert!(v.global_plan.is_empty());
        let rec = &ctl.trace()[0];
        assert_eq!(rec.level, Level::Local);
        assert_eq!(rec.local_candidates.len(), 2);
        assert!(rec.region_plan.is_empty());
    }

    #[test]
    fn llm_controller_follows_the_stubbed_choice() {
        let (net, part, rg) = two_region_world();
        let config = LlmConfig {
            stub_response: Some("REASONING: shortest.\nCHOICE: 1".to_owned()),
            ..LlmConfig::default()
        };
        let mut ctl = HierarchicalController::llm(config, 3, 4).unwrap();
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1200.0)).unwrap();
        assert!(log.vehicles[0].finished());
        assert!(log.incidents.is_empty());
        // Option 1 is always the greedy pick on this net, so the route
        // matches the greedy controller's.
        assert_eq!(log.vehicles[0].route, vec![1, 2, 3]);
    }

    #[test]
    fn llm_gibberish_falls_back_to_greedy_and_finishes() {
        let (net, part, rg) = two_region_world();
        let config = LlmConfig::default();
        let transport = Box::new(StubTransport::fixed("no idea, sorry"));
        let mut ctl = HierarchicalController::llm_with_transport(config, transport, 3, 4);
        let log = run_episode(&net, &part, &rg, &[trip(1, 1, 4, 0.0)], &mut ctl, &cfg(1200.0)).unwrap();
        // The trip still completes (greedy fallback) and every fallback is
        // visible as an incident.
        assert!(log.vehicles[0].finished());
        assert!(!log.incidents.is_empty());
        assert!(log
            .incidents
            .iter()
            .all(|i| i.message.contains("llm fallback to greedy")));
    }

    #[test]
    fn build_controller_covers_every_method() {
        let (net, _part, _rg) = two_region_world();
        let params = PolicyParams::default();
        let llm = LlmConfig {
            stub_response: Some("CHOICE: 1".to_owned()),
            ..LlmConfig::default()
        };
        for m in Method::ALL {
            assert!(build_controller(m, &net, &params, &llm, 1, 3, 4).is_ok(), "{m}");
        }
    }
}
