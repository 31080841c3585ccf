//! Scenario files: the TOML configuration tying a network, partition,
//! demand, simulator settings, policies, and benchmark plan together, plus
//! `KEY=VALUE` override handling and resolution into ready-to-run inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::BenchScenario;
use crate::controller::Method;
use crate::coop_opt::{TrainScenario, TrainerConfig};
use crate::mesosim::{
    generate_background_demand, parse_demand, DemandError, GravityParams, SimConfig, Trip,
    VehicleId,
};
use crate::netgraph::{parse_network, NetError, RoadNetwork};
use crate::partition::{build_region_graph, louvain_partition, Partition, RegionGraph};
use crate::plan::dijkstra_route;
use crate::policy::{LlmConfig, PolicyParams};
use crate::rng::derive_rng;
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("policy params {path}: {source}")]
    Params {
        path: String,
        source: serde_json::Error,
    },
    #[error("override '{key}': {msg}")]
    BadOverride { key: String, msg: String },
}

fn bad(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::BadSpec(msg.into())
}

/// `[network]`: where the road network CSV lives.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub file: String,
}

/// `[partition]`: either a fixed assignment file or community-detection
/// parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSpec {
    /// `node_id,region_id` CSV; computed by community detection when unset.
    pub file: Option<String>,
    pub resolution: Scalar,
    /// Partitioning seed; the scenario root seed when unset.
    pub seed: Option<u64>,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            file: None,
            resolution: 1.0,
            seed: None,
        }
    }
}

/// `[demand.controlled]`: a uniform controlled-fleet generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlledSpec {
    pub count: usize,
    /// Departures are uniform over `[0, window_s)`.
    pub window_s: Scalar,
}

impl Default for ControlledSpec {
    fn default() -> Self {
        Self {
            count: 10,
            window_s: 600.0,
        }
    }
}

/// `[demand.background]`: gravity-model background traffic, regenerated per
/// benchmark seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundSpec {
    /// Per-region activity intensities; must match the region count.
    pub activities: Option<Vec<Scalar>>,
    /// Uniform activity used for every region when `activities` is unset.
    pub activity: Scalar,
    pub gamma: Scalar,
    pub theta: Scalar,
    pub bucket_s: Scalar,
    /// Demand horizon; the simulation horizon when unset.
    pub horizon_s: Option<Scalar>,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            activities: None,
            activity: 1.0,
            gamma: 1.0,
            theta: 1.0,
            bucket_s: 300.0,
            horizon_s: None,
        }
    }
}

/// `[demand]`: fixed trips from a file or a generator, plus the optional
/// background recipe.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandSpec {
    /// Demand CSV (`vehicle_id,origin_node,dest_node,depart_s,controlled`).
    pub file: Option<String>,
    pub controlled: Option<ControlledSpec>,
    pub background: Option<BackgroundSpec>,
}

/// `[policy]`: parameters and candidate-set sizes for the hierarchical
/// policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySpec {
    /// Trained parameter JSON; zero-initialized parameters when unset.
    pub file: Option<String>,
    pub m_global: usize,
    pub k_local: usize,
    /// Train the single-level ablation instead of the hierarchical stack
    /// (used by the train command only).
    pub flat: bool,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            file: None,
            m_global: 5,
            k_local: 10,
            flat: false,
        }
    }
}

/// `[bench]`: the comparison plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            methods: vec![
                "dijkstra".into(),
                "mindits".into(),
                "minlat".into(),
                "greedy-hier".into(),
                "softmax-hier".into(),
            ],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// The scenario file as written: every section optional except the network.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    /// Root seed; per-subsystem streams are derived from it.
    pub seed: u64,
    pub network: NetworkSpec,
    pub partition: PartitionSpec,
    pub demand: DemandSpec,
    pub sim: SimConfig,
    pub policy: PolicySpec,
    pub llm: Option<LlmConfig>,
    pub trainer: TrainerConfig,
    pub bench: BenchSpec,
}

/// Parses one `KEY=VALUE` pair (as given to `--config`) into the dotted key
/// path and the raw value.
pub fn split_override(arg: &str) -> Result<(&str, &str), ScenarioError> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v)),
        _ => Err(ScenarioError::BadOverride {
            key: arg.to_owned(),
            msg: "expected KEY=VALUE".into(),
        }),
    }
}

/// Sets `key` (a dotted path like `sim.horizon_s`) to `raw` inside a parsed
/// TOML document, creating intermediate tables. The value is interpreted as
/// a TOML literal when possible and as a string otherwise.
pub fn apply_override(
    doc: &mut toml::Value,
    key: &str,
    raw: &str,
) -> Result<(), ScenarioError> {
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("literal just inserted"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| ScenarioError::BadOverride {
                key: key.to_owned(),
                msg: format!("'{part}' is not a table"),
            })?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let leaf = parts.last().expect("split yields at least one part");
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| ScenarioError::BadOverride {
            key: key.to_owned(),
            msg: format!("'{leaf}' would index into a non-table"),
        })?;
    table.insert(leaf.to_string(), parsed);
    Ok(())
}

/// Parses scenario TOML text, applying `KEY=VALUE` overrides before
/// deserialization.
pub fn parse_scenario(
    text: &str,
    overrides: &[(String, String)],
) -> Result<ScenarioSpec, ScenarioError> {
    let mut doc: toml::Value = toml::from_str(text)?;
    for (key, value) in overrides {
        apply_override(&mut doc, key, value)?;
    }
    Ok(doc.try_into()?)
}

/// Reads and parses a scenario file with overrides applied.
pub fn load_scenario(
    path: impl AsRef<Path>,
    overrides: &[(String, String)],
) -> Result<ScenarioSpec, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, overrides)
}

/// Parses a `node_id,region_id` partition CSV against a network.
pub fn parse_partition(text: &str, net: &RoadNetwork) -> Result<Partition, ScenarioError> {
    let mut by_node: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("node_id")) {
            continue;
        }
        let (node, region) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("partition line {}: expected node_id,region_id", i + 1)))?;
        let node: u64 = node
            .trim()
            .parse()
            .map_err(|_| bad(format!("partition line {}: bad node id '{node}'", i + 1)))?;
        let region: usize = region
            .trim()
            .parse()
            .map_err(|_| bad(format!("partition line {}: bad region id '{region}'", i + 1)))?;
        if by_node.insert(node, region).is_some() {
            return Err(bad(format!("partition line {}: duplicate node {node}", i + 1)));
        }
    }
    let mut labels = Vec::with_capacity(net.num_nodes());
    for idx in 0..net.num_nodes() {
        let id = net.node(idx).id;
        let label = by_node
            .get(&id.0)
            .ok_or_else(|| bad(format!("partition file misses node {id}")))?;
        labels.push(*label);
    }
    if by_node.len() != net.num_nodes() {
        return Err(bad(format!(
            "partition file lists {} nodes, network has {}",
            by_node.len(),
            net.num_nodes()
        )));
    }
    Ok(Partition::from_assignment(net, &labels))
}

/// A resolved, ready-to-run scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub root_seed: u64,
    pub net: RoadNetwork,
    pub partition: Partition,
    pub region_graph: RegionGraph,
    /// Demand fixed across runs: file trips plus generated controlled trips.
    pub fixed_trips: Vec<Trip>,
    pub background: Option<GravityParams>,
    pub sim: SimConfig,
    pub params: PolicyParams,
    pub llm: LlmConfig,
    pub m_global: usize,
    pub k_local: usize,
    pub flat: bool,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub trainer: TrainerConfig,
    /// (path, sha256 hex) of every input file read during resolution.
    pub input_digests: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_input(
    base: &Path,
    rel: &str,
    digests: &mut Vec<(String, String)>,
) -> Result<String, ScenarioError> {
    let path: PathBuf = if Path::new(rel).is_absolute() {
        rel.into()
    } else {
        base.join(rel)
    };
    let bytes = std::fs::read(&path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    digests.push((rel.to_owned(), sha256_hex(&bytes)));
    String::from_utf8(bytes)
        .map_err(|_| bad(format!("{} is not valid UTF-8", path.display())))
}

/// Draws `count` routable controlled trips with uniform origin/destination
/// nodes and uniform departures over the window.
fn generate_controlled(
    net: &RoadNetwork,
    spec: &ControlledSpec,
    seed: u64,
    id_base: u64,
) -> Result<Vec<Trip>, ScenarioError> {
    use rand::Rng;
    if net.num_nodes() < 2 {
        return Err(bad("controlled demand needs at least two nodes"));
    }
    if !(spec.window_s > 0.0) {
        return Err(bad("demand.controlled.window_s must be positive"));
    }
    let mut rng = derive_rng(seed, "controlled-demand");
    let mut trips = Vec::with_capacity(spec.count);
    let mut attempts = 0usize;
    let budget = spec.count.saturating_mul(100).max(100);
    while trips.len() < spec.count {
        attempts += 1;
        if attempts > budget {
            return Err(bad(
                "could not draw enough routable origin/destination pairs; \
                 is the network connected?",
            ));
        }
        let o = rng.random_range(0..net.num_nodes());
        let d = rng.random_range(0..net.num_nodes());
        if o == d {
            continue;
        }
        let origin = net.node(o).id;
        let dest = net.node(d).id;
        if dijkstra_route(net, origin, dest).is_none() {
            continue;
        }
        trips.push(Trip {
            id: VehicleId(id_base + trips.len() as u64),
            origin,
            dest,
            depart_s: rng.random_range(0.0..spec.window_s),
            controlled: true,
        });
    }
    Ok(trips)
}

impl ScenarioSpec {
    /// Resolves the spec into loaded inputs. Relative paths are taken
    /// against `base_dir` (conventionally the scenario file's directory).
    pub fn resolve(&self, base_dir: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let base = base_dir.as_ref();
        let mut digests = Vec::new();

        if self.network.file.is_empty() {
            return Err(bad("network.file is required"));
        }
        let net_text = read_input(base, &self.network.file, &mut digests)?;
        let net = parse_network(&net_text)?;

        if !(self.partition.resolution > 0.0) {
            return Err(bad("partition.resolution must be positive"));
        }
        let partition = match &self.partition.file {
            Some(rel) => {
                let text = read_input(base, rel, &mut digests)?;
                parse_partition(&text, &net)?
            }
            None => louvain_partition(
                &net,
                self.partition.resolution,
                self.partition.seed.unwrap_or(self.seed),
            ),
        };
        let region_graph = build_region_graph(&net, &partition);

        let mut fixed_trips = Vec::new();
        if let Some(rel) = &self.demand.file {
            let text = read_input(base, rel, &mut digests)?;
            fixed_trips.extend(parse_demand(&text)?);
        }
        if let Some(gen) = &self.demand.controlled {
            let id_base = fixed_trips.iter().map(|t| t.id.0).max().map_or(0, |m| m + 1);
            fixed_trips.extend(generate_controlled(&net, gen, self.seed, id_base)?);
        }

        let background = match &self.demand.background {
            None => None,
            Some(spec) => {
                let k = partition.num_regions();
                let activities = match &spec.activities {
                    Some(a) => {
                        if a.len() != k {
                            return Err(bad(format!(
                                "demand.background.activities has {} entries, \
                                 partition has {} regions",
                                a.len(),
                                k
                            )));
                        }
                        a.clone()
                    }
                    None => vec![spec.activity; k],
                };
                Some(GravityParams {
                    activities,
                    gamma: spec.gamma,
                    theta: spec.theta,
                    horizon_s: spec.horizon_s.unwrap_or(self.sim.horizon_s),
                    bucket_s: spec.bucket_s,
                })
            }
        };

        let params = match &self.policy.file {
            Some(rel) => {
                let text = read_input(base, rel, &mut digests)?;
                PolicyParams::from_json(&text).map_err(|source| ScenarioError::Params {
                    path: rel.clone(),
                    source,
                })?
            }
            None => PolicyParams::default(),
        };

        // Explicit [llm] section wins; otherwise fall back to the
        // environment so `CITYNAV_LLM_URL`/`CITYNAV_LLM_KEY` work without
        // editing the scenario.
        let llm = match &self.llm {
            Some(cfg) => cfg.clone(),
            None => LlmConfig::from_env().unwrap_or_default(),
        };

        let mut methods = Vec::with_capacity(self.bench.methods.len());
        for name in &self.bench.methods {
            methods.push(name.parse::<Method>().map_err(bad)?);
        }

        Ok(Scenario {
            root_seed: self.seed,
            net,
            partition,
            region_graph,
            fixed_trips,
            background,
            sim: self.sim.clone(),
            params,
            llm,
            m_global: self.policy.m_global.max(1),
            k_local: self.policy.k_local.max(1),
            flat: self.policy.flat,
            methods,
            seeds: self.bench.seeds.clone(),
            trainer: self.trainer.clone(),
            input_digests: digests,
        })
    }
}

impl Scenario {
    /// View for the benchmark harness.
    pub fn bench_scenario(&self) -> BenchScenario {
        BenchScenario {
            net: self.net.clone(),
            partition: self.partition.clone(),
            region_graph: self.region_graph.clone(),
            fixed_trips: self.fixed_trips.clone(),
            background: self.background.clone(),
            sim: self.sim.clone(),
            params: self.params.clone(),
            llm: self.llm.clone(),
            m_global: self.m_global,
            k_local: self.k_local,
        }
    }

    /// Fixed demand plus background materialized for one seed.
    pub fn trips_for_seed(&self, seed: u64) -> Result<Vec<Trip>, DemandError> {
        let mut trips = self.fixed_trips.clone();
        if let Some(gravity) = &self.background {
            let id_base = trips.iter().map(|t| t.id.0).max().map_or(0, |m| m + 1);
            trips.extend(generate_background_demand(
                &self.net,
                &self.partition,
                &self.region_graph,
                gravity,
                seed,
                id_base,
            )?);
        }
        Ok(trips)
    }

    /// View for the trainer: demand is materialized once at the root seed
    /// so every training iteration sees the same world.
    pub fn train_scenario(&self) -> Result<TrainScenario, DemandError> {
        Ok(TrainScenario {
            net: self.net.clone(),
            partition: self.partition.clone(),
            region_graph: self.region_graph.clone(),
            trips: self.trips_for_seed(self.root_seed)?,
            sim: self.sim.clone(),
            m_global: self.m_global,
            k_local: self.k_local,
            flat: self.flat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    const NET: &str = "nodes: id,x,y\n\
                       1,0,0\n2,100,0\n3,200,0\n4,300,0\n\
                       edges: id,from,to,length_m,speed_mps,lanes\n\
                       1,1,2,600,10,1\n2,2,3,600,10,1\n3,3,4,600,10,1\n\
                       4,4,3,600,10,1\n5,3,2,600,10,1\n6,2,1,600,10,1\n";

    fn write_file(dir: &Path, name: &str, text: &str) {
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        f.write_all(text.as_bytes()).unwrap();
    }

    fn base_scenario(dir: &Path) -> String {
        write_file(dir, "net.csv", NET);
        "seed = 9\n\
         [network]\nfile = \"net.csv\"\n\
         [demand.controlled]\ncount = 4\nwindow_s = 120.0\n"
            .to_owned()
    }

    #[test]
    fn resolves_a_minimal_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_scenario(dir.path());
        let spec = parse_scenario(&text, &[]).unwrap();
        let sc = spec.resolve(dir.path()).unwrap();
        assert_eq!(sc.fixed_trips.len(), 4);
        assert!(sc.fixed_trips.iter().all(|t| t.controlled));
        assert!(sc.partition.num_regions() >= 1);
        assert_eq!(sc.input_digests.len(), 1);
        assert_eq!(sc.input_digests[0].0, "net.csv");
        assert_eq!(sc.input_digests[0].1.len(), 64);
        // Defaults flow through.
        assert_eq!(sc.m_global, 5);
        assert_eq!(sc.k_local, 10);
        assert_eq!(sc.methods.len(), 5);
    }

    #[test]
    fn generated_demand_is_reproducible_and_routable() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_scenario(dir.path());
        let spec = parse_scenario(&text, &[]).unwrap();
        let a = spec.resolve(dir.path()).unwrap();
        let b = spec.resolve(dir.path()).unwrap();
        let to_tuple = |trips: &[Trip]| -> Vec<(u64, u64, u64)> {
            trips.iter().map(|t| (t.id.0, t.origin.0, t.dest.0)).collect()
        };
        assert_eq!(to_tuple(&a.fixed_trips), to_tuple(&b.fixed_trips));
        for t in &a.fixed_trips {
            assert!(dijkstra_route(&a.net, t.origin, t.dest).is_some());
            assert!(t.depart_s >= 0.0 && t.depart_s < 120.0);
        }
    }

    #[test]
    fn overrides_change_values_and_reject_bad_keys() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_scenario(dir.path());
        let overrides = vec![
            ("sim.horizon_s".to_owned(), "1200".to_owned()),
            ("policy.k_local".to_owned(), "3".to_owned()),
            ("llm.model".to_owned(), "tiny-model".to_owned()),
            ("bench.methods".to_owned(), "[\"dijkstra\"]".to_owned()),
        ];
        let spec = parse_scenario(&text, &overrides).unwrap();
        assert_eq!(spec.sim.horizon_s, 1200.0);
        assert_eq!(spec.policy.k_local, 3);
        assert_eq!(spec.llm.as_ref().unwrap().model, "tiny-model");
        assert_eq!(spec.bench.methods, vec!["dijkstra"]);

        assert!(matches!(
            split_override("nonsense"),
            Err(ScenarioError::BadOverride { .. })
        ));
        // Walking through a scalar is an error.
        let mut doc: toml::Value = toml::from_str("seed = 1").unwrap();
        assert!(matches!(
            apply_override(&mut doc, "seed.deeper", "2"),
            Err(ScenarioError::BadOverride { .. })
        ));
    }

    #[test]
    fn partition_file_and_validation_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = base_scenario(dir.path());
        write_file(
            dir.path(),
            "part.csv",
            "node_id,region_id\n1,0\n2,0\n3,1\n4,1\n",
        );
        text.push_str("[partition]\nfile = \"part.csv\"\n");
        let spec = parse_scenario(&text, &[]).unwrap();
        let sc = spec.resolve(dir.path()).unwrap();
        assert_eq!(sc.partition.num_regions(), 2);
        assert_eq!(sc.input_digests.len(), 2);

        // Missing node rows are rejected.
        write_file(dir.path(), "part.csv", "node_id,region_id\n1,0\n2,0\n3,1\n");
        assert!(matches!(
            spec.resolve(dir.path()),
            Err(ScenarioError::BadSpec(_))
        ));

        // Non-positive resolution is rejected.
        let spec =
            parse_scenario(&base_scenario(dir.path()), &[("partition.resolution".into(),
                "0".into())])
            .unwrap();
        assert!(matches!(
            spec.resolve(dir.path()),
            Err(ScenarioError::BadSpec(_))
        ));
    }

    #[test]
    fn background_activities_must_match_the_region_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = base_scenario(dir.path());
        write_file(
            dir.path(),
            "part.csv",
            "node_id,region_id\n1,0\n2,0\n3,1\n4,1\n",
        );
        text.push_str(
            "[partition]\nfile = \"part.csv\"\n\
             [demand.background]\nactivities = [1.0, 2.0, 3.0]\n",
        );
        let spec = parse_scenario(&text, &[]).unwrap();
        assert!(matches!(
            spec.resolve(dir.path()),
            Err(ScenarioError::BadSpec(_))
        ));

        // Uniform fill sizes itself to the region count.
        let text = text.replace("activities = [1.0, 2.0, 3.0]", "activity = 2.0");
        let spec = parse_scenario(&text, &[]).unwrap();
        let sc = spec.resolve(dir.path()).unwrap();
        let g = sc.background.unwrap();
        assert_eq!(g.activities, vec![2.0, 2.0]);
        assert_eq!(g.horizon_s, sc.sim.horizon_s);
    }

    #[test]
    fn unknown_method_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = base_scenario(dir.path());
        text.push_str("[bench]\nmethods = [\"dijkstra\", \"teleport\"]\n");
        let spec = parse_scenario(&text, &[]).unwrap();
        let err = spec.resolve(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("teleport") && msg.contains("dijkstra"), "{msg}");
    }

    #[test]
    fn demand_file_rows_mix_with_generated_fleet() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = base_scenario(dir.path());
        write_file(
            dir.path(),
            "demand.csv",
            "vehicle_id,origin_node,dest_node,depart_s,controlled\n\
             100,1,4,0,1\n101,4,1,5,0\n",
        );
        text.push_str("[demand]\nfile = \"demand.csv\"\n");
        let spec = parse_scenario(&text, &[]).unwrap();
        let sc = spec.resolve(dir.path()).unwrap();
        // 2 file trips + 4 generated, generated ids start above 101.
        assert_eq!(sc.fixed_trips.len(), 6);
        assert!(sc.fixed_trips[2..].iter().all(|t| t.id.0 >= 102));
        assert_eq!(
            sc.fixed_trips.iter().filter(|t| !t.controlled).count(),
            1
        );
    }

    #[test]
    fn train_scenario_materializes_background_demand() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = base_scenario(dir.path());
        text.push_str("[demand.background]\ntheta = 5.0\n");
        let spec = parse_scenario(&text, &[]).unwrap();
        let sc = spec.resolve(dir.path()).unwrap();
        let train = sc.train_scenario().unwrap();
        assert!(train.trips.len() > sc.fixed_trips.len());
        assert!(train.trips[sc.fixed_trips.len()..]
            .iter()
            .all(|t| !t.controlled));
        // Same seed → same materialization.
        let again = sc.train_scenario().unwrap();
        assert_eq!(train.trips.len(), again.trips.len());
    }
}
