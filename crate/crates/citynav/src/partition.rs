//! Region partitioning: Louvain community detection over the undirected
//! projection of the road graph, plus the region abstraction (adjacency and
//! boundary edge sets) consumed by the global planner.
//!
//! Directed edges are projected by merging antiparallel pairs, with the pair
//! weight equal to the number of directed edges between the endpoints.
//! Louvain output is post-processed so every region induces a connected
//! subgraph (disconnected communities are split into components) and region
//! ids are re-indexed by smallest contained node id, making partitions
//! deterministic for a fixed seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::netgraph::{NodeId, RoadNetwork};
use crate::rng::derive_rng;
use crate::Scalar;

/// Region identifier; contiguous `0..K` within a [`Partition`].
pub type RegionId = usize;

/// Assignment of every node to exactly one region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    region_of: Vec<RegionId>,
    members: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds a partition from per-node labels (indexed by dense node
    /// index). Labels may be arbitrary; they are re-indexed so region ids
    /// are contiguous and ordered by smallest contained node id. Regions
    /// are not required to be connected here — only [`louvain_partition`]
    /// guarantees that.
    pub fn from_assignment(net: &RoadNetwork, labels: &[usize]) -> Self {
        assert_eq!(
            labels.len(),
            net.num_nodes(),
            "one label per node required"
        );
        let mut first_node: BTreeMap<usize, usize> = BTreeMap::new();
        for (idx, &lab) in labels.iter().enumerate() {
            first_node.entry(lab).or_insert(idx);
        }
        let mut order: Vec<(usize, usize)> =
            first_node.into_iter().map(|(lab, idx)| (idx, lab)).collect();
        order.sort_unstable();
        let relabel: BTreeMap<usize, RegionId> = order
            .into_iter()
            .enumerate()
            .map(|(new, (_, old))| (old, new))
            .collect();

        let k = relabel.len();
        let mut region_of = Vec::with_capacity(labels.len());
        let mut members = vec![Vec::new(); k];
        for (idx, &lab) in labels.iter().enumerate() {
            let r = relabel[&lab];
            region_of.push(r);
            members[r].push(idx);
        }
        Self { region_of, members }
    }

    pub fn num_regions(&self) -> usize {
        self.members.len()
    }

    /// Region of the node at dense index `node_idx`.
    pub fn region_of_idx(&self, node_idx: usize) -> RegionId {
        self.region_of[node_idx]
    }

    /// Region of a node by external id.
    pub fn region_of(&self, net: &RoadNetwork, node: NodeId) -> Option<RegionId> {
        net.node_idx(node).map(|i| self.region_of[i])
    }

    /// Dense node indices in a region, ascending.
    pub fn members(&self, region: RegionId) -> &[usize] {
        &self.members[region]
    }

    /// CSV serialization `node_id,region_id`, one row per node in id order.
    pub fn to_csv(&self, net: &RoadNetwork) -> String {
        let mut out = String::from("node_id,region_id\n");
        for (idx, node) in net.nodes().iter().enumerate() {
            out.push_str(&format!("{},{}\n", node.id, self.region_of[idx]));
        }
        out
    }
}

/// Louvain community detection with connectivity repair.
///
/// Runs the two-phase modularity-greedy loop (node sweeps until no move
/// improves, then community aggregation) at the given `resolution`, splits
/// any disconnected community into its connected components, and re-indexes
/// regions by smallest contained node id. Sweep order is ascending node
/// order shuffled once per level by a stream derived from `seed`.
pub fn louvain_partition(net: &RoadNetwork, resolution: Scalar, seed: u64) -> Partition {
    let n = net.num_nodes();
    if n == 0 {
        return Partition {
            region_of: Vec::new(),
            members: Vec::new(),
        };
    }

    let mut rng = derive_rng(seed, "louvain");
    let mut graph = LevelGraph::project(net);
    // assign[original node] = node of `graph` currently containing it.
    let mut assign: Vec<usize> = (0..n).collect();

    loop {
        let mut order: Vec<usize> = (0..graph.len()).collect();
        order.shuffle(&mut rng);
        let (labels, moved) = one_level(&graph, resolution, &order);
        if !moved {
            break;
        }
        let (aggregated, compact) = graph.aggregate(&labels);
        for a in assign.iter_mut() {
            *a = compact[&labels[*a]];
        }
        if aggregated.len() == graph.len() {
            break;
        }
        graph = aggregated;
    }

    let repaired = split_disconnected(net, &assign);
    Partition::from_assignment(net, &repaired)
}

/// Newman modularity of `partition` on the undirected projection of `net`,
/// at resolution 1. Zero for edgeless networks.
pub fn modularity(net: &RoadNetwork, partition: &Partition) -> Scalar {
    let graph = LevelGraph::project(net);
    let m = graph.total_weight;
    if m == 0.0 {
        return 0.0;
    }
    let k = partition.num_regions();
    // Internal weight and total degree per region.
    let mut internal = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for u in 0..graph.len() {
        let ru = partition.region_of_idx(u);
        degree[ru] += graph.degree(u);
        for (&v, &w) in &graph.adj[u] {
            if v > u {
                continue; // count each undirected pair once
            }
            if partition.region_of_idx(v) == ru {
                internal[ru] += w;
            }
        }
    }
    (0..k)
        .map(|r| internal[r] / m - (degree[r] / (2.0 * m)).powi(2))
        .sum()
}

/// Region-level abstraction: per-direction adjacency and boundary edge sets.
#[derive(Clone, Debug)]
pub struct RegionGraph {
    k: usize,
    /// Ordered pair (from region, to region) → dense edge indices crossing
    /// it, ascending by edge id.
    boundary: BTreeMap<(RegionId, RegionId), Vec<usize>>,
    /// Successor regions per region, ascending, derived from `boundary`.
    succ: Vec<Vec<RegionId>>,
    /// Mean member-node coordinates per region.
    centroids: Vec<(Scalar, Scalar)>,
}

impl RegionGraph {
    pub fn num_regions(&self) -> usize {
        self.k
    }

    /// Regions reachable from `region` through at least one boundary edge.
    pub fn successors(&self, region: RegionId) -> &[RegionId] {
        &self.succ[region]
    }

    /// Dense indices of edges from `from` into `to` (empty if not adjacent).
    pub fn boundary_edges(&self, from: RegionId, to: RegionId) -> &[usize] {
        self.boundary
            .get(&(from, to))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// All ordered adjacent pairs with their boundary edge sets.
    pub fn pairs(&self) -> impl Iterator<Item = (&(RegionId, RegionId), &Vec<usize>)> {
        self.boundary.iter()
    }

    pub fn centroid(&self, region: RegionId) -> (Scalar, Scalar) {
        self.centroids[region]
    }

    /// JSON-ready summary: K, adjacency pairs, and boundary edge counts.
    pub fn summary(&self) -> RegionGraphSummary {
        RegionGraphSummary {
            k: self.k,
            adjacency: self.boundary.keys().copied().collect(),
            boundary_edge_counts: self
                .boundary
                .iter()
                .map(|((a, b), es)| (format!("{a}->{b}"), es.len()))
                .collect(),
        }
    }
}

/// Serializable summary written by the `partition` CLI subcommand.
#[derive(Debug, Serialize)]
pub struct RegionGraphSummary {
    pub k: usize,
    pub adjacency: Vec<(RegionId, RegionId)>,
    pub boundary_edge_counts: BTreeMap<String, usize>,
}

/// Groups inter-region edges by ordered region pair.
pub fn build_region_graph(net: &RoadNetwork, partition: &Partition) -> RegionGraph {
    let k = partition.num_regions();
    let mut boundary: BTreeMap<(RegionId, RegionId), Vec<usize>> = BTreeMap::new();
    for ei in 0..net.num_edges() {
        let (fi, ti) = net.edge_endpoints(ei);
        let (rf, rt) = (partition.region_of_idx(fi), partition.region_of_idx(ti));
        if rf != rt {
            boundary.entry((rf, rt)).or_default().push(ei);
        }
    }
    let mut succ = vec![Vec::new(); k];
    for &(a, b) in boundary.keys() {
        succ[a].push(b);
    }
    let centroids = (0..k)
        .map(|r| {
            let ms = partition.members(r);
            let (mut sx, mut sy) = (0.0, 0.0);
            for &i in ms {
                sx += net.node(i).x;
                sy += net.node(i).y;
            }
            let n = ms.len() as Scalar;
            (sx / n, sy / n)
        })
        .collect();
    RegionGraph {
        k,
        boundary,
        succ,
        centroids,
    }
}

/// Undirected weighted graph for one Louvain level. Node `u`'s degree counts
/// self-loop weight twice; `total_weight` counts every edge (loops included)
/// once.
struct LevelGraph {
    adj: Vec<BTreeMap<usize, f64>>,
    loops: Vec<f64>,
    total_weight: f64,
}

impl LevelGraph {
    /// Undirected projection of the road graph: pair weight = number of
    /// directed edges between the endpoints.
    fn project(net: &RoadNetwork) -> Self {
        let n = net.num_nodes();
        let mut adj = vec![BTreeMap::new(); n];
        let mut total = 0.0;
        for ei in 0..net.num_edges() {
            let (a, b) = net.edge_endpoints(ei);
            *adj[a].entry(b).or_insert(0.0) += 1.0;
            *adj[b].entry(a).or_insert(0.0) += 1.0;
            total += 1.0;
        }
        Self {
            adj,
            loops: vec![0.0; n],
            total_weight: total,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn degree(&self, u: usize) -> f64 {
        self.adj[u].values().sum::<f64>() + 2.0 * self.loops[u]
    }

    /// Contracts communities into super-nodes. Returns the aggregated graph
    /// and the compaction map from community label to new node index.
    fn aggregate(&self, labels: &[usize]) -> (LevelGraph, BTreeMap<usize, usize>) {
        let mut compact = BTreeMap::new();
        for &lab in labels {
            let next = compact.len();
            compact.entry(lab).or_insert(next);
        }
        let k = compact.len();
        let mut adj = vec![BTreeMap::new(); k];
        let mut loops = vec![0.0; k];
        for u in 0..self.len() {
            let cu = compact[&labels[u]];
            loops[cu] += self.loops[u];
            for (&v, &w) in &self.adj[u] {
                if v > u {
                    continue;
                }
                let cv = compact[&labels[v]];
                if cu == cv {
                    loops[cu] += w;
                } else {
                    *adj[cu].entry(cv).or_insert(0.0) += w;
                    *adj[cv].entry(cu).or_insert(0.0) += w;
                }
            }
        }
        (
            LevelGraph {
                adj,
                loops,
                total_weight: self.total_weight,
            },
            compact,
        )
    }
}

/// One Louvain phase: sweeps nodes in `order`, greedily moving each to the
/// neighboring community with the largest modularity gain, until a full
/// sweep makes no move. Returns per-node community labels and whether any
/// move happened.
fn one_level(g: &LevelGraph, resolution: f64, order: &[usize]) -> (Vec<usize>, bool) {
    let n = g.len();
    let two_m = 2.0 * g.total_weight;
    let mut community: Vec<usize> = (0..n).collect();
    let mut tot: Vec<f64> = (0..n).map(|u| g.degree(u)).collect();
    let mut moved_any = false;

    if two_m == 0.0 {
        return (community, false);
    }

    loop {
        let mut moves = 0usize;
        for &u in order {
            let ku = g.degree(u);
            let c_old = community[u];

            // Weight from u to each neighboring community.
            let mut neigh: BTreeMap<usize, f64> = BTreeMap::new();
            for (&v, &w) in &g.adj[u] {
                *neigh.entry(community[v]).or_insert(0.0) += w;
            }

            tot[c_old] -= ku;
            let gain_of = |c: usize, w_uc: f64| w_uc - resolution * ku * tot[c] / two_m;
            let mut best_c = c_old;
            let mut best_gain = gain_of(c_old, neigh.get(&c_old).copied().unwrap_or(0.0));
            for (&c, &w) in &neigh {
                if c == c_old {
                    continue;
                }
                let gain = gain_of(c, w);
                if gain > best_gain {
                    best_gain = gain;
                    best_c = c;
                }
            }
            tot[best_c] += ku;
            community[u] = best_c;
            if best_c != c_old {
                moves += 1;
                moved_any = true;
            }
        }
        if moves == 0 {
            break;
        }
    }
    (community, moved_any)
}

/// Splits every label class into connected components of the undirected
/// projection, so each resulting class induces a connected subgraph.
fn split_disconnected(net: &RoadNetwork, labels: &[usize]) -> Vec<usize> {
    let n = net.num_nodes();
    let mut out = vec![usize::MAX; n];
    let mut next = 0usize;
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        // Flood the component of `start` within its label class.
        let lab = labels[start];
        let comp = next;
        next += 1;
        let mut stack = vec![start];
        out[start] = comp;
        while let Some(u) = stack.pop() {
            let mut visit = |v: usize| {
                if labels[v] == lab && out[v] == usize::MAX {
                    out[v] = comp;
                    stack.push(v);
                }
            };
            for &ei in net.out_edges(u) {
                visit(net.edge_endpoints(ei).1);
            }
            for &ei in net.in_edges(u) {
                visit(net.edge_endpoints(ei).0);
            }
        }
    }
    out
}
