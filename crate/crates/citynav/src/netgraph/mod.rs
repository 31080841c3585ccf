//! Road-network representation, file ingestion, and path-search primitives.
//!
//! The network is a directed graph loaded from a two-section CSV file and
//! immutable afterward. Searches (shortest path, Yen k-shortest, reverse
//! distance fields) are pure functions over a caller-supplied edge weight,
//! generic over the scalar type, and fully deterministic: cost ties are broken
//! by the lexicographically smallest edge-id sequence.

mod io;
mod search;
mod types;

pub use io::{load_network, network_to_csv, parse_network, save_network};
pub use search::{distance_field, k_shortest_paths, shortest_path, DistanceField};
pub use types::{Edge, EdgeId, NetError, Node, NodeId, Path, RoadNetwork};
