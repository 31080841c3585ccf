//! Graph domain types and construction-time validation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Node identifier as written in network files.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Edge identifier as written in network files.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u64);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Intersection with planar coordinates in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub x: Scalar,
    pub y: Scalar,
}

/// Directed road segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    /// Segment length in meters, strictly positive.
    pub length_m: Scalar,
    /// Speed limit in meters per second, strictly positive.
    pub speed_mps: Scalar,
    /// Lane count, at least 1.
    pub lanes: u32,
    /// Maximum simultaneous occupants. When the network file omits the
    /// column this is `ceil(length · lanes / 7.5 m)`, one vehicle per 7.5 m
    /// of jam spacing per lane.
    pub capacity: u32,
    /// Vehicles served from the exit queue per simulation step, when the
    /// file provides it. Otherwise derived from the lane count and step
    /// length at simulation setup via [`Edge::outflow_per_step`].
    pub outflow: Option<u32>,
}

impl Edge {
    /// Traversal time in seconds absent congestion: length / speed limit.
    pub fn free_flow_time(&self) -> Scalar {
        self.length_m / self.speed_mps
    }

    /// Capacity used when the network file has no capacity column.
    pub fn default_capacity(length_m: Scalar, lanes: u32) -> u32 {
        ((length_m * lanes as Scalar / 7.5).ceil() as u32).max(1)
    }

    /// Exit-queue service rate in vehicles per step. Explicit file value
    /// wins; the fallback is half a vehicle per second per lane.
    pub fn outflow_per_step(&self, step_length_s: Scalar) -> u32 {
        match self.outflow {
            Some(v) => v,
            None => ((self.lanes as Scalar * step_length_s * 0.5).floor() as u32).max(1),
        }
    }
}

/// Errors from loading or validating a road network.
#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("network file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid network: {0}")]
    Invalid(String),
}

/// Directed road graph, immutable after construction.
///
/// Nodes and edges are stored sorted by id; adjacency lists hold dense
/// indices into those tables, with outgoing/incoming edges in ascending
/// edge-id order so iteration order is reproducible.
#[derive(Clone, Debug)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    node_index: BTreeMap<NodeId, usize>,
    edge_index: BTreeMap<EdgeId, usize>,
    /// Dense (from, to) node indices per edge, parallel to `edges`.
    endpoints: Vec<(usize, usize)>,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
}

impl RoadNetwork {
    /// Validates and indexes a node/edge table.
    pub fn new(mut nodes: Vec<Node>, mut edges: Vec<Edge>) -> Result<Self, NetError> {
        nodes.sort_by_key(|n| n.id);
        edges.sort_by_key(|e| e.id);

        let mut node_index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if !n.x.is_finite() || !n.y.is_finite() {
                return Err(NetError::Invalid(format!(
                    "node {} has non-finite coordinates",
                    n.id
                )));
            }
            if node_index.insert(n.id, i).is_some() {
                return Err(NetError::Invalid(format!("duplicate node id {}", n.id)));
            }
        }

        let mut edge_index = BTreeMap::new();
        let mut endpoints = Vec::with_capacity(edges.len());
        let mut out_adj = vec![Vec::new(); nodes.len()];
        let mut in_adj = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            if edge_index.insert(e.id, i).is_some() {
                return Err(NetError::Invalid(format!("duplicate edge id {}", e.id)));
            }
            if !(e.length_m > 0.0 && e.length_m.is_finite()) {
                return Err(NetError::Invalid(format!(
                    "edge {} has non-positive length {}",
                    e.id, e.length_m
                )));
            }
            if !(e.speed_mps > 0.0 && e.speed_mps.is_finite()) {
                return Err(NetError::Invalid(format!(
                    "edge {} has non-positive speed limit {}",
                    e.id, e.speed_mps
                )));
            }
            if e.lanes < 1 {
                return Err(NetError::Invalid(format!("edge {} has zero lanes", e.id)));
            }
            if e.capacity < 1 {
                return Err(NetError::Invalid(format!("edge {} has zero capacity", e.id)));
            }
            if e.outflow == Some(0) {
                return Err(NetError::Invalid(format!("edge {} has zero outflow", e.id)));
            }
            if e.from == e.to {
                return Err(NetError::Invalid(format!(
                    "edge {} is a self-loop at node {}",
                    e.id, e.from
                )));
            }
            let fi = *node_index.get(&e.from).ok_or_else(|| {
                NetError::Invalid(format!("edge {} references missing node {}", e.id, e.from))
            })?;
            let ti = *node_index.get(&e.to).ok_or_else(|| {
                NetError::Invalid(format!("edge {} references missing node {}", e.id, e.to))
            })?;
            endpoints.push((fi, ti));
            out_adj[fi].push(i);
            in_adj[ti].push(i);
        }

        Ok(Self {
            nodes,
            edges,
            node_index,
            edge_index,
            endpoints,
            out_adj,
            in_adj,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// All nodes, ascending by id. Positions are the dense node indices.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// All edges, ascending by id. Positions are the dense edge indices.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_idx(&self, id: NodeId) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn edge_idx(&self, id: EdgeId) -> Option<usize> {
        self.edge_index.get(&id).copied()
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn node_by_id(&self, id: NodeId) -> Option<&Node> {
        self.node_idx(id).map(|i| &self.nodes[i])
    }

    pub fn edge_by_id(&self, id: EdgeId) -> Option<&Edge> {
        self.edge_idx(id).map(|i| &self.edges[i])
    }

    /// Dense (from, to) node indices of the edge at dense index `edge_idx`.
    pub fn edge_endpoints(&self, edge_idx: usize) -> (usize, usize) {
        self.endpoints[edge_idx]
    }

    /// Outgoing edges of a node (dense edge indices, ascending edge id).
    pub fn out_edges(&self, node_idx: usize) -> &[usize] {
        &self.out_adj[node_idx]
    }

    /// Incoming edges of a node (dense edge indices, ascending edge id).
    pub fn in_edges(&self, node_idx: usize) -> &[usize] {
        &self.in_adj[node_idx]
    }

    /// Straight-line distance between two nodes in meters.
    pub fn euclidean(&self, a: NodeId, b: NodeId) -> Option<Scalar> {
        let na = self.node_by_id(a)?;
        let nb = self.node_by_id(b)?;
        Some(((na.x - nb.x).powi(2) + (na.y - nb.y).powi(2)).sqrt())
    }
}

/// Edge-id route together with its total cost under the weight function
/// that produced it. Cost is the left-to-right fold of edge weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path<W = Scalar> {
    pub edges: Vec<EdgeId>,
    pub cost: W,
}

impl<W> Path<W> {
    /// Node sequence visited by the path, origin first. Empty for the
    /// zero-edge path (whose endpoints the path itself does not record).
    pub fn node_seq(&self, net: &RoadNetwork) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.edges.len() + 1);
        for (i, eid) in self.edges.iter().enumerate() {
            let e = net.edge_by_id(*eid).expect("path edge exists in network");
            if i == 0 {
                out.push(e.from);
            }
            out.push(e.to);
        }
        out
    }

    /// True when consecutive edges share their intermediate node and all
    /// edge ids resolve in `net`.
    pub fn is_chained(&self, net: &RoadNetwork) -> bool {
        let mut prev_to: Option<NodeId> = None;
        for eid in &self.edges {
            let Some(e) = net.edge_by_id(*eid) else {
                return false;
            };
            if let Some(p) = prev_to {
                if p != e.from {
                    return false;
                }
            }
            prev_to = Some(e.to);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u64, x: Scalar, y: Scalar) -> Node {
        Node {
            id: NodeId(id),
            x,
            y,
        }
    }

    fn edge(id: u64, from: u64, to: u64, length_m: Scalar, speed_mps: Scalar) -> Edge {
        Edge {
            id: EdgeId(id),
            from: NodeId(from),
            to: NodeId(to),
            length_m,
            speed_mps,
            lanes: 1,
            capacity: Edge::default_capacity(length_m, 1),
            outflow: None,
        }
    }

    #[test]
    fn free_flow_time_is_length_over_speed() {
        assert_eq!(edge(1, 1, 2, 100.0, 10.0).free_flow_time(), 10.0);
        assert_eq!(edge(1, 1, 2, 250.0, 12.5).free_flow_time(), 20.0);
    }

    #[test]
    fn doubling_speed_halves_free_flow_time() {
        let slow = edge(1, 1, 2, 480.0, 8.0);
        let fast = Edge {
            speed_mps: 16.0,
            ..slow.clone()
        };
        assert_eq!(fast.free_flow_time() * 2.0, slow.free_flow_time());
    }

    #[test]
    fn capacity_default_uses_jam_spacing() {
        // 100 m single lane: ceil(100 / 7.5) = 14 vehicles.
        assert_eq!(Edge::default_capacity(100.0, 1), 14);
        // Two lanes double the room.
        assert_eq!(Edge::default_capacity(100.0, 2), 27);
        // Tiny stub still admits one vehicle.
        assert_eq!(Edge::default_capacity(3.0, 1), 1);
    }

    #[test]
    fn outflow_default_scales_with_lanes_and_step() {
        let e = edge(1, 1, 2, 100.0, 10.0);
        assert_eq!(e.outflow_per_step(1.0), 1); // floor(1 * 1 * 0.5) = 0 -> clamped
        let wide = Edge { lanes: 4, ..e };
        assert_eq!(wide.outflow_per_step(1.0), 2);
        assert_eq!(wide.outflow_per_step(5.0), 10);
    }

    #[test]
    fn explicit_outflow_wins() {
        let e = Edge {
            outflow: Some(7),
            ..edge(1, 1, 2, 100.0, 10.0)
        };
        assert_eq!(e.outflow_per_step(1.0), 7);
    }

    #[test]
    fn rejects_missing_endpoint_naming_the_edge() {
        let err = RoadNetwork::new(
            vec![node(1, 0.0, 0.0), node(2, 1.0, 0.0)],
            vec![edge(10, 1, 3, 100.0, 10.0)],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("edge 10"), "got: {msg}");
        assert!(msg.contains("missing node 3"), "got: {msg}");
    }

    #[test]
    fn rejects_duplicates_and_self_loops() {
        let dup = RoadNetwork::new(vec![node(1, 0.0, 0.0), node(1, 1.0, 0.0)], vec![]);
        assert!(dup.unwrap_err().to_string().contains("duplicate node id 1"));

        let selfloop = RoadNetwork::new(
            vec![node(1, 0.0, 0.0)],
            vec![edge(5, 1, 1, 10.0, 10.0)],
        );
        assert!(selfloop.unwrap_err().to_string().contains("self-loop"));
    }

    #[test]
    fn adjacency_sorted_by_edge_id() {
        let net = RoadNetwork::new(
            vec![node(1, 0.0, 0.0), node(2, 1.0, 0.0), node(3, 2.0, 0.0)],
            vec![
                edge(9, 1, 3, 10.0, 10.0),
                edge(2, 1, 2, 10.0, 10.0),
                edge(5, 1, 2, 10.0, 10.0),
            ],
        )
        .unwrap();
        let src = net.node_idx(NodeId(1)).unwrap();
        let ids: Vec<u64> = net
            .out_edges(src)
            .iter()
            .map(|&i| net.edge(i).id.0)
            .collect();
        assert_eq!(ids, vec![2, 5, 9]);
    }

    #[test]
    fn path_chaining_detects_breaks() {
        let net = RoadNetwork::new(
            vec![node(1, 0.0, 0.0), node(2, 1.0, 0.0), node(3, 2.0, 0.0)],
            vec![edge(1, 1, 2, 10.0, 10.0), edge(2, 2, 3, 10.0, 10.0)],
        )
        .unwrap();
        let good = Path {
            edges: vec![EdgeId(1), EdgeId(2)],
            cost: 2.0,
        };
        assert!(good.is_chained(&net));
        assert_eq!(
            good.node_seq(&net),
            vec![NodeId(1), NodeId(2), NodeId(3)]
        );
        let bad = Path {
            edges: vec![EdgeId(2), EdgeId(1)],
            cost: 2.0,
        };
        assert!(!bad.is_chained(&net));
    }
}
