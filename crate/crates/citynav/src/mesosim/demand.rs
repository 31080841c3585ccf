//! Demand: gravity-model background trip generation and the demand CSV
//! format `vehicle_id,origin_node,dest_node,depart_s,controlled`.

use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::types::{Trip, VehicleId};
use crate::netgraph::{NodeId, RoadNetwork};
use crate::partition::{Partition, RegionGraph};
use crate::rng::derive_rng;
use crate::Scalar;

/// Gravity-model parameters for background traffic.
#[derive(Clone, Debug, PartialEq)]
pub struct GravityParams {
    /// Activity intensity per region, length = number of regions.
    pub activities: Vec<Scalar>,
    /// Distance-decay exponent γ ≥ 0.
    pub gamma: Scalar,
    /// Global demand scale θ ≥ 0 (expected trips per region pair per bucket).
    pub theta: Scalar,
    pub horizon_s: Scalar,
    /// Bucket length for demand generation, conventionally 5 minutes.
    pub bucket_s: Scalar,
}

impl Default for GravityParams {
    fn default() -> Self {
        Self {
            activities: Vec::new(),
            gamma: 1.0,
            theta: 1.0,
            horizon_s: 3600.0,
            bucket_s: 300.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemandError {
    #[error("invalid gravity parameters: {0}")]
    BadParams(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("demand file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Expected gravity flow between two distinct regions per bucket:
/// θ · A_i · A_j · d_ij^(−γ), with centroid distance floored at 1 m.
pub fn gravity_rate(
    theta: Scalar,
    gamma: Scalar,
    activity_i: Scalar,
    activity_j: Scalar,
    centroid_distance_m: Scalar,
) -> Scalar {
    let d = centroid_distance_m.max(1.0);
    theta * activity_i * activity_j * d.powf(-gamma)
}

/// Draws background trips for the whole horizon.
///
/// For every 5-minute-style bucket and every ordered region pair i ≠ j, the
/// trip count is Poisson with mean [`gravity_rate`]; origin and destination
/// nodes are uniform within their regions and departure times uniform within
/// the bucket. Trip ids count up from `id_base`. Fully deterministic in
/// `seed`. (Regions always contain at least one node by construction, so the
/// empty-region case cannot arise here.)
pub fn generate_background_demand(
    net: &RoadNetwork,
    partition: &Partition,
    region_graph: &RegionGraph,
    params: &GravityParams,
    seed: u64,
    id_base: u64,
) -> Result<Vec<Trip>, DemandError> {
    let k = partition.num_regions();
    if params.activities.len() != k {
        return Err(DemandError::BadParams(format!(
            "need one activity per region ({} regions, {} activities)",
            k,
            params.activities.len()
        )));
    }
    if params.activities.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(DemandError::BadParams(
            "activities must be finite and nonnegative".into(),
        ));
    }
    if !(params.gamma >= 0.0) {
        return Err(DemandError::BadParams("gamma must be nonnegative".into()));
    }
    if !(params.theta >= 0.0) {
        return Err(DemandError::BadParams("theta must be nonnegative".into()));
    }
    if !(params.horizon_s > 0.0 && params.bucket_s > 0.0) {
        return Err(DemandError::BadParams(
            "horizon and bucket length must be positive".into(),
        ));
    }

    let mut rng = derive_rng(seed, "background-demand");
    let buckets = (params.horizon_s / params.bucket_s).ceil() as u64;
    let mut trips = Vec::new();
    let mut next_id = id_base;

    for b in 0..buckets {
        let start = b as Scalar * params.bucket_s;
        let end = (start + params.bucket_s).min(params.horizon_s);
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let (cx_i, cy_i) = region_graph.centroid(i);
                let (cx_j, cy_j) = region_graph.centroid(j);
                let d = ((cx_i - cx_j).powi(2) + (cy_i - cy_j).powi(2)).sqrt();
                let rate = gravity_rate(
                    params.theta,
                    params.gamma,
                    params.activities[i],
                    params.activities[j],
                    d,
                );
                if rate <= 0.0 {
                    continue;
                }
                let n = Poisson::new(rate)
                    .expect("positive finite rate")
                    .sample(&mut rng) as u64;
                for _ in 0..n {
                    let oi = partition.members(i)[rng.random_range(0..partition.members(i).len())];
                    let di = partition.members(j)[rng.random_range(0..partition.members(j).len())];
                    trips.push(Trip {
                        id: VehicleId(next_id),
                        origin: net.node(oi).id,
                        dest: net.node(di).id,
                        depart_s: rng.random_range(start..end),
                        controlled: false,
                    });
                    next_id += 1;
                }
            }
        }
    }
    Ok(trips)
}

/// Serializes trips to the demand CSV format.
pub fn demand_to_csv(trips: &[Trip]) -> String {
    let mut out = String::from("vehicle_id,origin_node,dest_node,depart_s,controlled\n");
    for t in trips {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.id,
            t.origin,
            t.dest,
            t.depart_s,
            if t.controlled { 1 } else { 0 }
        ));
    }
    out
}

/// Parses the demand CSV format.
pub fn parse_demand(text: &str) -> Result<Vec<Trip>, DemandError> {
    let mut trips = Vec::new();
    let mut saw_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = match raw.find('#') {
            Some(i) => raw[..i].trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != "vehicle_id,origin_node,dest_node,depart_s,controlled" {
                return Err(DemandError::Parse {
                    line: lineno,
                    msg: format!("unexpected header '{line}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(DemandError::Parse {
                line: lineno,
                msg: format!("expected 5 fields, got {}", f.len()),
            });
        }
        let field = |s: &str, what: &str| -> Result<u64, DemandError> {
            s.parse().map_err(|_| DemandError::Parse {
                line: lineno,
                msg: format!("cannot parse {what} from '{s}'"),
            })
        };
        let controlled = match f[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DemandError::Parse {
                    line: lineno,
                    msg: format!("controlled must be 0 or 1, got '{other}'"),
                })
            }
        };
        trips.push(Trip {
            id: VehicleId(field(f[0], "vehicle_id")?),
            origin: NodeId(field(f[1], "origin_node")?),
            dest: NodeId(field(f[2], "dest_node")?),
            depart_s: f[3].parse().map_err(|_| DemandError::Parse {
                line: lineno,
                msg: format!("cannot parse depart_s from '{}'", f[3]),
            })?,
            controlled,
        });
    }
    if !saw_header {
        return Err(DemandError::Parse {
            line: 1,
            msg: "missing demand header".into(),
        });
    }
    Ok(trips)
}

pub fn load_demand(path: impl AsRef<FsPath>) -> Result<Vec<Trip>, DemandError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DemandError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_demand(&text)
}

pub fn save_demand(trips: &[Trip], path: impl AsRef<FsPath>) -> Result<(), DemandError> {
    let path = path.as_ref();
    std::fs::write(path, demand_to_csv(trips)).map_err(|source| DemandError::Io {
        path: path.display().to_string(),
        source,
    })
}
