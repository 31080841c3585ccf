//! Brute-force oracles and world builders shared by the integration suite.
//!
//! Everything here is deliberately naive — exhaustive enumeration, direct
//! definitions, quadratic scans — so the optimized library code is checked
//! against an independent implementation instead of against itself.
#![allow(dead_code)]

use citynav::netgraph::{Edge, EdgeId, Node, NodeId, RoadNetwork};
use citynav::partition::{modularity, Partition};
use citynav::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn node(id: u64, x: Scalar, y: Scalar) -> Node {
    Node {
        id: NodeId(id),
        x,
        y,
    }
}

/// Edge with derived capacity and outflow.
pub fn edge(id: u64, from: u64, to: u64, length_m: Scalar, speed_mps: Scalar, lanes: u32) -> Edge {
    Edge {
        id: EdgeId(id),
        from: NodeId(from),
        to: NodeId(to),
        length_m,
        speed_mps,
        lanes,
        capacity: Edge::default_capacity(length_m, lanes),
        outflow: None,
    }
}

/// Edge taking exactly `ff_steps` one-second steps under free flow
/// (10 m per step at 10 m/s), with explicit capacity and service rate.
pub fn flow_edge(id: u64, from: u64, to: u64, ff_steps: u32, capacity: u32, outflow: u32) -> Edge {
    Edge {
        id: EdgeId(id),
        from: NodeId(from),
        to: NodeId(to),
        length_m: ff_steps as Scalar * 10.0,
        speed_mps: 10.0,
        lanes: 1,
        capacity,
        outflow: Some(outflow),
    }
}

/// Random digraph with 2–10 nodes and 1–30 edges. Parallel edges are
/// allowed, self-loops are not; node pairs may be unreachable.
pub fn random_network(rng: &mut ChaCha8Rng) -> RoadNetwork {
    let n: u64 = rng.random_range(2..=10);
    let m: u64 = rng.random_range(1..=30);
    let nodes: Vec<Node> = (0..n)
        .map(|i| node(i, rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)))
        .collect();
    let mut edges = Vec::new();
    for id in 0..m {
        let from = rng.random_range(0..n);
        let mut to = rng.random_range(0..n);
        while to == from {
            to = rng.random_range(0..n);
        }
        edges.push(edge(
            id,
            from,
            to,
            rng.random_range(50.0..500.0),
            rng.random_range(5.0..30.0),
            rng.random_range(1..=3),
        ));
    }
    RoadNetwork::new(nodes, edges).expect("random network is valid")
}

/// Strongly connected random network: a directed ring over all nodes plus
/// random chords, with explicit small capacities and service rates so
/// queueing and blocking actually occur.
pub fn random_connected_network(rng: &mut ChaCha8Rng) -> RoadNetwork {
    let n: u64 = rng.random_range(3..=8);
    let nodes: Vec<Node> = (0..n)
        .map(|i| node(i, rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)))
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push(flow_edge(
            i,
            i,
            (i + 1) % n,
            rng.random_range(1..=4),
            rng.random_range(3..=20),
            rng.random_range(1..=2),
        ));
    }
    let chords: u64 = rng.random_range(0..=10);
    for c in 0..chords {
        let from = rng.random_range(0..n);
        let mut to = rng.random_range(0..n);
        while to == from {
            to = rng.random_range(0..n);
        }
        edges.push(flow_edge(
            n + c,
            from,
            to,
            rng.random_range(1..=4),
            rng.random_range(3..=20),
            rng.random_range(1..=2),
        ));
    }
    RoadNetwork::new(nodes, edges).expect("connected network is valid")
}

/// Costs of every loopless `src` → `dst` path under free-flow time,
/// each folded left to right in path order (the same fold the library
/// uses, so exact float comparison is meaningful). Unsorted.
pub fn all_simple_path_costs(net: &RoadNetwork, src: NodeId, dst: NodeId) -> Vec<Scalar> {
    let (Some(src_idx), Some(dst_idx)) = (net.node_idx(src), net.node_idx(dst)) else {
        return Vec::new();
    };
    let mut costs = Vec::new();
    let mut visited = vec![false; net.num_nodes()];
    visited[src_idx] = true;
    dfs_paths(net, src_idx, dst_idx, 0.0, &mut visited, &mut costs);
    costs
}

fn dfs_paths(
    net: &RoadNetwork,
    at: usize,
    dst: usize,
    cost: Scalar,
    visited: &mut [bool],
    out: &mut Vec<Scalar>,
) {
    for &ei in net.out_edges(at) {
        let e = &net.edges()[ei];
        let head = net.node_idx(e.to).expect("edge head exists");
        let c = cost + e.free_flow_time();
        if head == dst {
            out.push(c);
        } else if !visited[head] {
            visited[head] = true;
            dfs_paths(net, head, dst, c, visited, out);
            visited[head] = false;
        }
    }
}

/// The `k` smallest path costs, ascending. Fewer when the graph has fewer
/// loopless paths.
pub fn top_k_costs(mut costs: Vec<Scalar>, k: usize) -> Vec<Scalar> {
    costs.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    costs.truncate(k);
    costs
}

/// Every set partition of `{0, …, n−1}` as a label vector, via restricted
/// growth strings (label[i] ≤ 1 + max(label[..i])).
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    grow(&mut labels, 1, n, &mut out);
    out
}

fn grow(labels: &mut Vec<usize>, pos: usize, n: usize, out: &mut Vec<Vec<usize>>) {
    if pos == n {
        out.push(labels.clone());
        return;
    }
    let max = labels[..pos].iter().copied().max().unwrap_or(0);
    for lab in 0..=max + 1 {
        labels[pos] = lab;
        grow(labels, pos + 1, n, out);
    }
    labels[pos] = 0;
}

/// Exhaustive maximum Newman modularity over every set partition of the
/// nodes. Only feasible for small graphs (Bell(8) = 4140 partitions).
pub fn best_modularity(net: &RoadNetwork) -> Scalar {
    let n = net.num_nodes();
    let mut best = Scalar::NEG_INFINITY;
    for labels in set_partitions(n) {
        let q = modularity(net, &Partition::from_assignment(net, &labels));
        if q > best {
            best = q;
        }
    }
    best
}
