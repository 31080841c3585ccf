//! Candidate-route generation at both hierarchy levels, plus the classical
//! shortest-path and next-hop baselines.
//!
//! The global level proposes region sequences over the region graph, scored
//! by the current mean region transit times (hop count when no aggregates
//! are available yet). The local level proposes intra-region edge paths from
//! the vehicle's position to the boundary edges of the next region (or to
//! the destination inside the final region), ranked by free-flow time. Both
//! reuse the loopless k-shortest search from [`crate::netgraph`] on derived
//! networks, so all tie-breaking stays lexicographic and deterministic.

use std::collections::BTreeMap;

use crate::netgraph::{
    k_shortest_paths, DistanceField, Edge, EdgeId, Node, NodeId, Path, RoadNetwork,
};
use crate::partition::{Partition, RegionGraph, RegionId};
use crate::Scalar;

/// Ordered region sequence from the origin region to the destination region.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRoutePlan {
    pub regions: Vec<RegionId>,
    /// Sum of per-region costs (τ̄ or hop fallback) over the sequence.
    pub cost_s: Scalar,
}

/// Ordered edge sequence inside one region, ending at a boundary edge into
/// the next region, or at the destination node inside the final region.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalRoutePlan {
    pub edges: Vec<EdgeId>,
    /// Free-flow traversal time of the edge sequence in seconds.
    pub free_flow_s: Scalar,
}

impl LocalRoutePlan {
    /// Last edge of the plan: the boundary edge it exits through, or the
    /// final approach edge to the destination.
    pub fn terminal_edge(&self) -> EdgeId {
        *self.edges.last().expect("local plans are never empty")
    }
}

/// Where a local plan is headed: into an adjacent region, or to the
/// destination inside the current one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NextRegion {
    Region(RegionId),
    Final,
}

/// Up to `m` best simple region sequences from `z_o` to `z_d`.
///
/// Region costs are the caller's per-region estimates (typically τ̄ from the
/// current aggregates), summed over every region the route traverses; pass
/// `None` to fall back to hop counting. Equal-cost routes come back ordered
/// by lexicographic region sequence.
pub fn candidate_global_routes(
    region_graph: &RegionGraph,
    region_costs: Option<&[Scalar]>,
    z_o: RegionId,
    z_d: RegionId,
    m: usize,
) -> Vec<GlobalRoutePlan> {
    let k = region_graph.num_regions();
    assert!(z_o < k && z_d < k, "origin/destination region out of range");
    assert!(m >= 1, "at least one candidate must be requested");
    if let Some(costs) = region_costs {
        assert_eq!(costs.len(), k, "one cost per region");
    }
    let cost_of = |z: RegionId| -> Scalar {
        match region_costs {
            Some(costs) => costs[z],
            None => 1.0,
        }
    };
    if z_o == z_d {
        return vec![GlobalRoutePlan {
            regions: vec![z_o],
            cost_s: cost_of(z_o),
        }];
    }

    // Abstract the region graph as a road network: one node per region, one
    // edge per ordered adjacency, id a·K + b so lexicographic edge-id order
    // equals lexicographic region-sequence order in the k-shortest pool.
    let nodes = (0..k)
        .map(|z| {
            let (x, y) = region_graph.centroid(z);
            Node {
                id: NodeId(z as u64),
                x,
                y,
            }
        })
        .collect();
    let edges = region_graph
        .pairs()
        .map(|(&(a, b), _)| Edge {
            id: EdgeId((a * k + b) as u64),
            from: NodeId(a as u64),
            to: NodeId(b as u64),
            length_m: 1.0,
            speed_mps: 1.0,
            lanes: 1,
            capacity: 1,
            outflow: Some(1),
        })
        .collect();
    let abstract_net =
        RoadNetwork::new(nodes, edges).expect("region graph abstraction is a valid network");

    // Weight an adjacency a→b by the cost of entering b; the origin region's
    // own cost is a shared constant added back afterwards.
    let paths = k_shortest_paths(
        &abstract_net,
        NodeId(z_o as u64),
        NodeId(z_d as u64),
        m,
        |e: &Edge| cost_of(e.to.0 as RegionId),
    );
    paths
        .into_iter()
        .map(|p| {
            let mut regions = vec![z_o];
            regions.extend(
                p.edges
                    .iter()
                    .map(|eid| (eid.0 as usize % k) as RegionId),
            );
            GlobalRoutePlan {
                regions,
                cost_s: p.cost + cost_of(z_o),
            }
        })
        .collect()
}

/// Up to `k` intra-region paths from `position` toward `next`, ranked by
/// free-flow time (ascending, ties by lexicographic edge ids).
///
/// For `NextRegion::Region(r)` the paths stay inside the region of
/// `position` and terminate with one of its boundary edges into `r`; for
/// `NextRegion::Final` they terminate at `dest`, which must lie inside the
/// region. An empty result signals the caller to replan globally.
pub fn candidate_local_routes(
    net: &RoadNetwork,
    partition: &Partition,
    region_graph: &RegionGraph,
    position: NodeId,
    next: NextRegion,
    dest: NodeId,
    k: usize,
) -> Vec<LocalRoutePlan> {
    let Some(pos_idx) = net.node_idx(position) else {
        return Vec::new();
    };
    if k == 0 {
        return Vec::new();
    }
    let region = partition.region_of_idx(pos_idx);

    // Sub-network: the region's internal edges, plus — when exiting — its
    // boundary edges into the next region, rewired onto a virtual sink so a
    // single k-shortest query ranks exits through every boundary edge.
    let mut keep: Vec<usize> = Vec::new();
    for ei in 0..net.num_edges() {
        let (f, t) = net.edge_endpoints(ei);
        if partition.region_of_idx(f) == region && partition.region_of_idx(t) == region {
            keep.push(ei);
        }
    }
    let boundary: &[usize] = match next {
        NextRegion::Region(r) => region_graph.boundary_edges(region, r),
        NextRegion::Final => &[],
    };
    keep.extend_from_slice(boundary);
    keep.sort_unstable();
    keep.dedup();

    let mut nodes: BTreeMap<NodeId, Node> = BTreeMap::new();
    let include_node = |id: NodeId, nodes: &mut BTreeMap<NodeId, Node>| {
        nodes
            .entry(id)
            .or_insert_with(|| net.node_by_id(id).expect("endpoint exists").clone());
    };
    include_node(position, &mut nodes);
    let mut edges: Vec<Edge> = Vec::with_capacity(keep.len() + 4);
    for &ei in &keep {
        let e = net.edge(ei);
        include_node(e.from, &mut nodes);
        include_node(e.to, &mut nodes);
        edges.push(e.clone());
    }

    let max_node = net.nodes().iter().map(|n| n.id.0).max().unwrap_or(0);
    let max_edge = net.edges().iter().map(|e| e.id.0).max().unwrap_or(0);
    let virtual_cutoff = EdgeId(max_edge + 1);

    let target = match next {
        NextRegion::Final => {
            if partition.region_of(net, dest) != Some(region) {
                return Vec::new();
            }
            include_node(dest, &mut nodes);
            dest
        }
        NextRegion::Region(_) => {
            if boundary.is_empty() {
                return Vec::new();
            }
            // Virtual sink reached by zero-weight edges from every boundary
            // edge's head node.
            let sink = NodeId(max_node + 1);
            nodes.insert(
                sink,
                Node {
                    id: sink,
                    x: 0.0,
                    y: 0.0,
                },
            );
            let mut heads: Vec<NodeId> = boundary.iter().map(|&ei| net.edge(ei).to).collect();
            heads.sort_unstable();
            heads.dedup();
            for (i, head) in heads.into_iter().enumerate() {
                edges.push(Edge {
                    id: EdgeId(virtual_cutoff.0 + i as u64),
                    from: head,
                    to: sink,
                    length_m: 1.0,
                    speed_mps: 1.0,
                    lanes: 1,
                    capacity: 1,
                    outflow: Some(1),
                });
            }
            sink
        }
    };

    let sub = RoadNetwork::new(nodes.into_values().collect(), edges)
        .expect("region sub-network is a valid network");
    let paths = k_shortest_paths(&sub, position, target, k, |e: &Edge| {
        if e.id >= virtual_cutoff {
            0.0
        } else {
            e.free_flow_time()
        }
    });

    paths
        .into_iter()
        .filter_map(|p| {
            let edges: Vec<EdgeId> =
                p.edges.into_iter().filter(|&id| id < virtual_cutoff).collect();
            if edges.is_empty() {
                // position == dest inside the final region: nothing to plan.
                return None;
            }
            let free_flow_s = edges
                .iter()
                .map(|&id| net.edge_by_id(id).expect("real edge").free_flow_time())
                .sum();
            Some(LocalRoutePlan { edges, free_flow_s })
        })
        .collect()
}

/// Free-flow shortest path, computed once at departure: the Dijkstra
/// baseline. `None` means the pair is unroutable.
pub fn dijkstra_route(net: &RoadNetwork, origin: NodeId, dest: NodeId) -> Option<Path<Scalar>> {
    crate::netgraph::shortest_path(net, origin, dest, |e: &Edge| e.free_flow_time())
}

/// Next-hop baseline: the outgoing edge whose head node is closest to the
/// destination under `dist_field`. Ties break toward the smallest edge id;
/// `None` when every successor is unreachable.
pub fn min_dits_next_hop(
    net: &RoadNetwork,
    dist_field: &DistanceField<Scalar>,
    current_node: NodeId,
) -> Option<EdgeId> {
    let u = net.node_idx(current_node)?;
    let mut best: Option<(Scalar, EdgeId)> = None;
    for &ei in net.out_edges(u) {
        let (_, head) = net.edge_endpoints(ei);
        let d = dist_field.cost_idx(head);
        if !d.is_finite() {
            continue;
        }
        // Out-edges come in ascending id order, so strict improvement keeps
        // the smallest id on ties.
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, net.edge(ei).id));
        }
    }
    best.map(|(_, id)| id)
}

/// Per-edge latency estimator: an exponentially weighted moving average of
/// observed traversal latencies, seeded with free-flow times.
#[derive(Clone, Debug)]
pub struct LatencyPredictor {
    alpha: Scalar,
    values: Vec<Scalar>,
}

impl LatencyPredictor {
    pub const DEFAULT_ALPHA: Scalar = 0.3;

    pub fn new(net: &RoadNetwork) -> Self {
        Self::with_alpha(net, Self::DEFAULT_ALPHA)
    }

    pub fn with_alpha(net: &RoadNetwork, alpha: Scalar) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        Self {
            alpha,
            values: net.edges().iter().map(Edge::free_flow_time).collect(),
        }
    }

    /// Current latency estimate for the edge at dense index `edge_idx`.
    pub fn predicted(&self, edge_idx: usize) -> Scalar {
        self.values[edge_idx]
    }

    /// Folds one observed traversal latency (seconds) into the estimate.
    pub fn observe(&mut self, edge_idx: usize, latency_s: Scalar) {
        let v = &mut self.values[edge_idx];
        *v = (1.0 - self.alpha) * *v + self.alpha * latency_s;
    }
}

/// Next-hop baseline with latency prediction: the outgoing edge minimizing
/// predicted edge latency plus the free-flow remainder from its head node,
/// so each greedy step still makes progress toward the destination.
pub fn min_lat_next_hop(
    net: &RoadNetwork,
    predictor: &LatencyPredictor,
    dist_field: &DistanceField<Scalar>,
    current_node: NodeId,
) -> Option<EdgeId> {
    let u = net.node_idx(current_node)?;
    let mut best: Option<(Scalar, EdgeId)> = None;
    for &ei in net.out_edges(u) {
        let (_, head) = net.edge_endpoints(ei);
        let remainder = dist_field.cost_idx(head);
        if !remainder.is_finite() {
            continue;
        }
        let score = predictor.predicted(ei) + remainder;
        if best.map_or(true, |(bs, _)| score < bs) {
            best = Some((score, net.edge(ei).id));
        }
    }
    best.map(|(_, id)| id)
}
