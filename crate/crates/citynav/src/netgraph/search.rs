//! Path searches: shortest path, Yen k-shortest loopless paths, and reverse
//! distance fields, generic over the scalar type of the weight function.
//!
//! Determinism contract: when several paths tie on total cost, the one whose
//! edge-id sequence is lexicographically smallest wins. This is achieved by
//! searching the reverse graph for a cost-to-destination field and then
//! walking forward greedily, always taking the smallest-id edge that stays on
//! a cheapest path. A path's recorded cost is the left-to-right fold of its
//! edge weights.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use super::types::{Edge, EdgeId, NodeId, Path, RoadNetwork};
use crate::scalar::Real;

/// Total-order key for costs in heaps and candidate pools. Costs here are
/// sums of validated non-NaN weights, so the order is total in practice.
#[derive(Clone, Copy, PartialEq, Debug)]
struct Cost<W>(W);

impl<W: Real> Eq for Cost<W> {}

impl<W: Real> PartialOrd for Cost<W> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<W: Real> Ord for Cost<W> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .partial_cmp(&other.0)
            .expect("path costs are never NaN")
    }
}

/// Single-destination cost field over dense node indices.
#[derive(Clone, Debug)]
pub struct DistanceField<W> {
    dst: NodeId,
    values: Vec<W>,
}

impl<W: Real> DistanceField<W> {
    pub fn dst(&self) -> NodeId {
        self.dst
    }

    /// Cost from the node at dense index `node_idx` to the destination;
    /// infinity when unreachable.
    pub fn cost_idx(&self, node_idx: usize) -> W {
        self.values[node_idx]
    }

    /// Cost from `node` to the destination. Panics if `node` is not in `net`.
    pub fn cost(&self, net: &RoadNetwork, node: NodeId) -> W {
        let idx = net.node_idx(node).expect("node exists in network");
        self.values[idx]
    }

    pub fn is_reachable_idx(&self, node_idx: usize) -> bool {
        self.values[node_idx].is_finite()
    }
}

/// Reverse-graph single-source distances to `dst`: the returned field maps
/// every node to its cheapest cost of reaching `dst`.
pub fn distance_field<W: Real>(
    net: &RoadNetwork,
    dst: NodeId,
    weight: impl Fn(&Edge) -> W,
) -> DistanceField<W> {
    let dst_idx = net.node_idx(dst).expect("destination node exists");
    let values = reverse_dijkstra(net, dst_idx, &weight, &HashSet::new(), None);
    DistanceField { dst, values }
}

/// Cheapest `src` → `dst` path, or `None` when unreachable (or when either
/// endpoint is unknown). Ties broken by lexicographically smallest edge-id
/// sequence. `src == dst` yields the empty path at cost zero.
pub fn shortest_path<W: Real>(
    net: &RoadNetwork,
    src: NodeId,
    dst: NodeId,
    weight: impl Fn(&Edge) -> W,
) -> Option<Path<W>> {
    let src_idx = net.node_idx(src)?;
    let dst_idx = net.node_idx(dst)?;
    let (dense, cost) =
        constrained_shortest_path(net, src_idx, dst_idx, &weight, &HashSet::new(), None)?;
    Some(to_path(net, dense, cost))
}

/// Up to `k` cheapest loopless `src` → `dst` paths via Yen's deviation
/// search, sorted by (cost, lexicographic edge ids), pairwise distinct.
/// Unreachable pairs yield an empty list.
pub fn k_shortest_paths<W: Real>(
    net: &RoadNetwork,
    src: NodeId,
    dst: NodeId,
    k: usize,
    weight: impl Fn(&Edge) -> W,
) -> Vec<Path<W>> {
    let (Some(src_idx), Some(dst_idx)) = (net.node_idx(src), net.node_idx(dst)) else {
        return Vec::new();
    };
    if k == 0 {
        return Vec::new();
    }

    let Some(first) =
        constrained_shortest_path(net, src_idx, dst_idx, &weight, &HashSet::new(), None)
    else {
        return Vec::new();
    };

    let mut accepted: Vec<(Vec<usize>, W)> = vec![first];
    let mut accepted_set: HashSet<Vec<usize>> =
        accepted.iter().map(|(p, _)| p.clone()).collect();
    // Candidate pool ordered by (cost, external edge-id sequence); the dense
    // sequence rides along for reconstruction and never affects the order.
    let mut pool: BTreeSet<(Cost<W>, Vec<EdgeId>, Vec<usize>)> = BTreeSet::new();

    while accepted.len() < k {
        let (prev, _) = accepted.last().expect("accepted is nonempty");
        let prev = prev.clone();
        let prev_nodes = dense_node_seq(net, src_idx, &prev);

        for spur_i in 0..prev.len() {
            let spur_node = prev_nodes[spur_i];
            let root = &prev[..spur_i];

            // Ban the next edge of every accepted path sharing this root, so
            // the spur search cannot rediscover an already-accepted path.
            let mut banned_edges = HashSet::new();
            for (p, _) in &accepted {
                if p.len() > spur_i && p[..spur_i] == *root {
                    banned_edges.insert(p[spur_i]);
                }
            }
            // Ban root nodes before the spur node to keep the result loopless.
            let mut banned_nodes = vec![false; net.num_nodes()];
            for &v in &prev_nodes[..spur_i] {
                banned_nodes[v] = true;
            }

            if let Some((spur, _)) = constrained_shortest_path(
                net,
                spur_node,
                dst_idx,
                &weight,
                &banned_edges,
                Some(&banned_nodes),
            ) {
                let mut full = root.to_vec();
                full.extend(spur);
                if accepted_set.contains(&full) {
                    continue;
                }
                let cost = fold_cost(net, &full, &weight);
                let ext: Vec<EdgeId> = full.iter().map(|&ei| net.edge(ei).id).collect();
                pool.insert((Cost(cost), ext, full));
            }
        }

        match pool.pop_first() {
            Some((cost, _, dense)) => {
                accepted_set.insert(dense.clone());
                accepted.push((dense, cost.0));
            }
            None => break,
        }
    }

    accepted
        .into_iter()
        .map(|(dense, cost)| to_path(net, dense, cost))
        .collect()
}

fn to_path<W: Real>(net: &RoadNetwork, dense: Vec<usize>, cost: W) -> Path<W> {
    Path {
        edges: dense.into_iter().map(|ei| net.edge(ei).id).collect(),
        cost,
    }
}

fn fold_cost<W: Real>(net: &RoadNetwork, dense: &[usize], weight: &impl Fn(&Edge) -> W) -> W {
    dense
        .iter()
        .fold(W::zero(), |acc, &ei| acc + weight(net.edge(ei)))
}

fn dense_node_seq(net: &RoadNetwork, src_idx: usize, dense: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dense.len() + 1);
    out.push(src_idx);
    for &ei in dense {
        out.push(net.edge_endpoints(ei).1);
    }
    out
}

/// Cheapest path avoiding banned edges and nodes, as dense edge indices plus
/// the forward-fold cost. The source and destination are never treated as
/// banned nodes (Yen's spur node sits on the banned root).
fn constrained_shortest_path<W: Real>(
    net: &RoadNetwork,
    src_idx: usize,
    dst_idx: usize,
    weight: &impl Fn(&Edge) -> W,
    banned_edges: &HashSet<usize>,
    banned_nodes: Option<&[bool]>,
) -> Option<(Vec<usize>, W)> {
    if src_idx == dst_idx {
        return Some((Vec::new(), W::zero()));
    }
    let dist = reverse_dijkstra(net, dst_idx, weight, banned_edges, banned_nodes);
    if !dist[src_idx].is_finite() {
        return None;
    }
    let dense = lexicographic_walk(net, src_idx, dst_idx, weight, &dist, banned_edges, banned_nodes)
        .or_else(|| {
            // Zero-weight cycles can starve the greedy walk; fall back to a
            // plain predecessor-tree path, which is still deterministic.
            forward_dijkstra_path(net, src_idx, dst_idx, weight, banned_edges, banned_nodes)
        })?;
    let cost = fold_cost(net, &dense, weight);
    Some((dense, cost))
}

/// Cost-to-`dst_idx` for every node, by Dijkstra over the reverse graph.
fn reverse_dijkstra<W: Real>(
    net: &RoadNetwork,
    dst_idx: usize,
    weight: &impl Fn(&Edge) -> W,
    banned_edges: &HashSet<usize>,
    banned_nodes: Option<&[bool]>,
) -> Vec<W> {
    let n = net.num_nodes();
    let mut dist = vec![W::infinity(); n];
    let mut settled = vec![false; n];
    dist[dst_idx] = W::zero();

    let mut heap = BinaryHeap::new();
    heap.push(Reverse((Cost(W::zero()), dst_idx)));

    while let Some(Reverse((Cost(d), u))) = heap.pop() {
        if settled[u] {
            continue;
        }
        settled[u] = true;
        for &ei in net.in_edges(u) {
            if banned_edges.contains(&ei) {
                continue;
            }
            let (v, _) = net.edge_endpoints(ei);
            if banned_nodes.is_some_and(|b| b[v]) || settled[v] {
                continue;
            }
            let w = weight(net.edge(ei));
            assert!(
                w >= W::zero() && !w.is_nan(),
                "edge weights must be nonnegative, got {w} on edge {}",
                net.edge(ei).id
            );
            let nd = w + d;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((Cost(nd), v)));
            }
        }
    }
    dist
}

/// Follows the cost field forward from `src_idx`, taking at each node the
/// smallest-id outgoing edge `e` with `w(e) + dist[head] == dist[here]`.
/// With strictly positive weights this terminates and yields the
/// lexicographically smallest cheapest path; with zero-weight cycles it can
/// give up (returns `None`) after a step cap.
fn lexicographic_walk<W: Real>(
    net: &RoadNetwork,
    src_idx: usize,
    dst_idx: usize,
    weight: &impl Fn(&Edge) -> W,
    dist: &[W],
    banned_edges: &HashSet<usize>,
    banned_nodes: Option<&[bool]>,
) -> Option<Vec<usize>> {
    let mut edges = Vec::new();
    let mut visited = vec![false; net.num_nodes()];
    let mut u = src_idx;
    visited[u] = true;

    let cap = net.num_nodes() + 1;
    while u != dst_idx {
        if edges.len() >= cap {
            return None;
        }
        let mut first_fresh = None;
        let mut first_any = None;
        for &ei in net.out_edges(u) {
            if banned_edges.contains(&ei) {
                continue;
            }
            let (_, v) = net.edge_endpoints(ei);
            if banned_nodes.is_some_and(|b| b[v]) {
                continue;
            }
            let w = weight(net.edge(ei));
            if w + dist[v] == dist[u] {
                if first_any.is_none() {
                    first_any = Some((ei, v));
                }
                if !visited[v] {
                    first_fresh = Some((ei, v));
                    break;
                }
            }
        }
        let (ei, v) = first_fresh.or(first_any)?;
        edges.push(ei);
        visited[v] = true;
        u = v;
    }
    Some(edges)
}

/// Plain forward Dijkstra with predecessor reconstruction; only used when
/// the lexicographic walk gives up. First-found predecessors under the
/// (cost, node index) pop order make it deterministic.
fn forward_dijkstra_path<W: Real>(
    net: &RoadNetwork,
    src_idx: usize,
    dst_idx: usize,
    weight: &impl Fn(&Edge) -> W,
    banned_edges: &HashSet<usize>,
    banned_nodes: Option<&[bool]>,
) -> Option<Vec<usize>> {
    let n = net.num_nodes();
    let mut dist = vec![W::infinity(); n];
    let mut settled = vec![false; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    dist[src_idx] = W::zero();

    let mut heap = BinaryHeap::new();
    heap.push(Reverse((Cost(W::zero()), src_idx)));

    while let Some(Reverse((Cost(d), u))) = heap.pop() {
        if settled[u] {
            continue;
        }
        settled[u] = true;
        if u == dst_idx {
            break;
        }
        for &ei in net.out_edges(u) {
            if banned_edges.contains(&ei) {
                continue;
            }
            let (_, v) = net.edge_endpoints(ei);
            if banned_nodes.is_some_and(|b| b[v]) || settled[v] {
                continue;
            }
            let nd = weight(net.edge(ei)) + d;
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = Some(ei);
                heap.push(Reverse((Cost(nd), v)));
            }
        }
    }

    if !dist[dst_idx].is_finite() {
        return None;
    }
    let mut edges = Vec::new();
    let mut u = dst_idx;
    while u != src_idx {
        let ei = pred[u].expect("finite distance implies a predecessor");
        edges.push(ei);
        u = net.edge_endpoints(ei).0;
    }
    edges.reverse();
    Some(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::parse_network;
    use crate::Scalar;

    fn ff(e: &Edge) -> Scalar {
        e.free_flow_time()
    }

    /// Triangle: 1→2 (10 s), 2→3 (10 s), 1→3 (25 s) under free flow.
    fn triangle() -> RoadNetwork {
        parse_network(
            "\
nodes: id,x,y
1,0,0
2,100,0
3,200,0
edges: id,from,to,length_m,speed_mps,lanes
1,1,2,100,10,1
2,2,3,100,10,1
3,1,3,250,10,1
",
        )
        .unwrap()
    }

    #[test]
    fn shortest_path_prefers_two_hop_route() {
        let net = triangle();
        let p = shortest_path(&net, NodeId(1), NodeId(3), ff).unwrap();
        assert_eq!(p.edges, vec![EdgeId(1), EdgeId(2)]);
        assert_eq!(p.cost, 20.0);
    }

    #[test]
    fn same_source_and_destination_is_the_empty_path() {
        let net = triangle();
        let p = shortest_path(&net, NodeId(2), NodeId(2), ff).unwrap();
        assert!(p.edges.is_empty());
        assert_eq!(p.cost, 0.0);
    }

    #[test]
    fn unreachable_destination_is_none() {
        let net = parse_network(
            "\
nodes: id,x,y
1,0,0
2,10,0
3,20,0
edges: id,from,to,length_m,speed_mps,lanes
1,1,2,10,10,1
",
        )
        .unwrap();
        assert!(shortest_path(&net, NodeId(1), NodeId(3), ff).is_none());
        // Edges are directed: 2 → 1 has no route either.
        assert!(shortest_path(&net, NodeId(2), NodeId(1), ff).is_none());
    }

    #[test]
    fn equal_cost_ties_resolve_to_smallest_edge_sequence() {
        // Two cost-20 routes from 1 to 3: direct edge 9 and the pair [1, 2].
        let net = parse_network(
            "\
nodes: id,x,y
1,0,0
2,100,0
3,200,0
edges: id,from,to,length_m,speed_mps,lanes
1,1,2,100,10,1
2,2,3,100,10,1
9,1,3,200,10,1
",
        )
        .unwrap();
        let p = shortest_path(&net, NodeId(1), NodeId(3), ff).unwrap();
        assert_eq!(p.edges, vec![EdgeId(1), EdgeId(2)]);

        // Renumber the direct edge below the pair: now it must win.
        let net = parse_network(
            "\
nodes: id,x,y
1,0,0
2,100,0
3,200,0
edges: id,from,to,length_m,speed_mps,lanes
0,1,3,200,10,1
1,1,2,100,10,1
2,2,3,100,10,1
",
        )
        .unwrap();
        let p = shortest_path(&net, NodeId(1), NodeId(3), ff).unwrap();
        assert_eq!(p.edges, vec![EdgeId(0)]);
    }

    #[test]
    fn k_shortest_enumerates_both_triangle_routes() {
        let net = triangle();
        let ps = k_shortest_paths(&net, NodeId(1), NodeId(3), 2, ff);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].cost, 20.0);
        assert_eq!(ps[0].edges, vec![EdgeId(1), EdgeId(2)]);
        assert_eq!(ps[1].cost, 25.0);
        assert_eq!(ps[1].edges, vec![EdgeId(3)]);
    }

    #[test]
    fn k_equal_one_matches_shortest_path() {
        let net = triangle();
        let ps = k_shortest_paths(&net, NodeId(1), NodeId(3), 1, ff);
        let sp = shortest_path(&net, NodeId(1), NodeId(3), ff).unwrap();
        assert_eq!(ps, vec![sp]);
    }

    #[test]
    fn diamond_returns_exactly_its_two_routes_for_large_k() {
        let net = parse_network(
            "\
nodes: id,x,y
1,0,0
2,100,100
3,100,-100
4,200,0
edges: id,from,to,length_m,speed_mps,lanes
1,1,2,100,10,1
2,2,4,100,10,1
3,1,3,120,10,1
4,3,4,120,10,1
",
        )
        .unwrap();
        let ps = k_shortest_paths(&net, NodeId(1), NodeId(4), 5, ff);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].edges, vec![EdgeId(1), EdgeId(2)]);
        assert_eq!(ps[1].edges, vec![EdgeId(3), EdgeId(4)]);
    }

    #[test]
    fn k_shortest_paths_are_loopless_and_chained() {
        // Grid-ish graph with a cycle; make sure deviations never loop.
        let net = parse_network(
            "\
nodes: id,x,y
1,0,0
2,1,0
3,2,0
4,1,1
edges: id,from,to,length_m,speed_mps,lanes
1,1,2,10,10,1
2,2,3,10,10,1
3,2,4,10,10,1
4,4,2,10,10,1
5,4,3,15,10,1
6,1,4,25,10,1
",
        )
        .unwrap();
        let ps = k_shortest_paths(&net, NodeId(1), NodeId(3), 10, ff);
        assert!(!ps.is_empty());
        for p in &ps {
            assert!(p.is_chained(&net));
            let nodes = p.node_seq(&net);
            let distinct: std::collections::HashSet<_> = nodes.iter().collect();
            assert_eq!(distinct.len(), nodes.len(), "loop in {:?}", p.edges);
        }
        // Sorted by cost, then lexicographic edges.
        for w in ps.windows(2) {
            assert!(
                w[0].cost < w[1].cost || (w[0].cost == w[1].cost && w[0].edges < w[1].edges)
            );
        }
    }

    #[test]
    fn distance_field_matches_hand_computation() {
        let net = triangle();
        let field = distance_field(&net, NodeId(3), ff);
        assert_eq!(field.cost(&net, NodeId(3)), 0.0);
        assert_eq!(field.cost(&net, NodeId(2)), 10.0);
        assert_eq!(field.cost(&net, NodeId(1)), 20.0);
    }

    #[test]
    fn distance_field_marks_unreachable_as_infinite() {
        let net = parse_network(
            "\
nodes: id,x,y
1,0,0
2,10,0
3,99,99
edges: id,from,to,length_m,speed_mps,lanes
1,1,2,10,10,1
",
        )
        .unwrap();
        let field = distance_field(&net, NodeId(3), ff);
        assert_eq!(field.cost(&net, NodeId(3)), 0.0);
        assert!(field.cost(&net, NodeId(1)).is_infinite());
        assert!(field.cost(&net, NodeId(2)).is_infinite());
    }

    #[test]
    fn searches_work_in_f32_too() {
        let net = triangle();
        let p = shortest_path(&net, NodeId(1), NodeId(3), |e| {
            e.free_flow_time() as f32
        })
        .unwrap();
        assert_eq!(p.cost, 20.0f32);
    }
}
