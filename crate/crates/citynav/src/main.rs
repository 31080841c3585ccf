//! Command-line entry point: partitioning, single episodes, training,
//! benchmarks, and demand generation, all reproducible from one root seed.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 runtime
//! incident threshold exceeded, 4 training divergence, 5 benchmark with
//! failed cells. Every command writes `manifest.json` (config snapshot,
//! seed, tool version, input digests) before any other output.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use citynav::bench::{export_heatmap, metrics_csv, run_benchmark, summarize};
use citynav::controller::{build_controller, Method};
use citynav::coop_opt::{history_to_csv, train, CoopError};
use citynav::mesosim::{demand_to_csv, generate_background_demand, run_episode, SimConfig};
use citynav::netgraph::parse_network;
use citynav::partition::{build_region_graph, louvain_partition};
use citynav::scenario::{load_scenario, split_override, Scenario, ScenarioSpec};
use citynav::Scalar;

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_RUNTIME: i32 = 3;
const EXIT_DIVERGED: i32 = 4;
const EXIT_PARTIAL: i32 = 5;

#[derive(Parser)]
#[command(
    name = "citynav",
    version,
    about = "Hierarchical multi-vehicle navigation testbed",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a road network into regions and export the region graph.
    Partition(PartitionArgs),
    /// Run one navigation episode and export its log and metrics.
    Run(RunArgs),
    /// Train the softmax policy on a scenario.
    Train(TrainArgs),
    /// Compare methods across seeds on one scenario.
    Bench(BenchArgs),
    /// Generate gravity-model background demand from a scenario.
    GenDemand(GenDemandArgs),
}

#[derive(Args)]
struct PartitionArgs {
    /// Road network CSV.
    #[arg(long)]
    network: PathBuf,
    /// Modularity resolution (> 0).
    #[arg(long, default_value_t = 1.0)]
    resolution: Scalar,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Scenario overrides, repeatable: --config sim.horizon_s=1200
    #[arg(long = "config", value_name = "KEY=VALUE")]
    config: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ScenarioArgs,
    /// Routing method (dijkstra, mindits, minlat, greedy-hier,
    /// softmax-hier, llm-hier).
    #[arg(long, default_value = "greedy-hier")]
    method: String,
    /// Episode seed; the scenario root seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 3 when the episode logs more than this many
    /// incidents.
    #[arg(long)]
    max_incidents: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ScenarioArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: ScenarioArgs,
    /// Methods to compare; overrides the scenario's list when given.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Comma-separated seeds; overrides the scenario's list when given.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GenDemandArgs {
    #[command(flatten)]
    common: ScenarioArgs,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Partition(args) => cmd_partition(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::GenDemand(args) => cmd_gen_demand(&args),
    };
    std::process::exit(code);
}

/// Prints the error and its source chain, returning the exit code.
fn fail(code: i32, err: &dyn Error) -> i32 {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
    code
}

fn fail_msg(code: i32, msg: &str) -> i32 {
    eprintln!("error: {msg}");
    code
}

/// Reproducibility record written before any other output. Identical
/// inputs and arguments produce identical manifests (no timestamps).
#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    /// Resolved configuration snapshot (credentials redacted).
    config: serde_json::Value,
    overrides: &'a [String],
    /// Input path → SHA-256 digest.
    inputs: BTreeMap<&'a str, &'a str>,
    out_dir: String,
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    overrides: &[String],
    digests: &[(String, String)],
) -> Result<(), std::io::Error> {
    let manifest = RunManifest {
        tool: "citynav",
        version: citynav::VERSION,
        command,
        seed,
        config,
        overrides,
        inputs: digests
            .iter()
            .map(|(p, d)| (p.as_str(), d.as_str()))
            .collect(),
        out_dir: out.display().to_string(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("manifest.json"), text + "\n")
}

fn write_output(out: &Path, name: &str, text: &str) -> Result<(), std::io::Error> {
    std::fs::write(out.join(name), text)
}

/// Scenario snapshot for the manifest with credentials removed.
fn manifest_config(spec: &ScenarioSpec) -> serde_json::Value {
    let mut snapshot = spec.clone();
    if let Some(llm) = snapshot.llm.as_mut() {
        llm.api_key = None;
    }
    serde_json::to_value(&snapshot).expect("scenario spec serializes")
}

/// Loads, overrides, and resolves the scenario behind `args`.
fn resolve_scenario(args: &ScenarioArgs) -> Result<(ScenarioSpec, Scenario), i32> {
    let mut overrides = Vec::with_capacity(args.config.len());
    for raw in &args.config {
        match split_override(raw) {
            Ok((k, v)) => overrides.push((k.to_owned(), v.to_owned())),
            Err(e) => return Err(fail(EXIT_CONFIG, &e)),
        }
    }
    let spec = match load_scenario(&args.scenario, &overrides) {
        Ok(spec) => spec,
        Err(e) => return Err(fail(EXIT_CONFIG, &e)),
    };
    let base = args
        .scenario
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    match spec.resolve(base) {
        Ok(scenario) => Ok((spec, scenario)),
        Err(e) => Err(fail(EXIT_CONFIG, &e)),
    }
}

fn cmd_partition(args: &PartitionArgs) -> i32 {
    if !(args.resolution > 0.0) {
        return fail_msg(
            EXIT_CONFIG,
            "--resolution must be positive (try --resolution 1.0)",
        );
    }
    let bytes = match std::fs::read(&args.network) {
        Ok(b) => b,
        Err(e) => {
            return fail_msg(
                EXIT_CONFIG,
                &format!("failed to read {}: {e}", args.network.display()),
            )
        }
    };
    let text = match String::from_utf8(bytes.clone()) {
        Ok(t) => t,
        Err(_) => return fail_msg(EXIT_CONFIG, "network file is not valid UTF-8"),
    };
    let net = match parse_network(&text) {
        Ok(n) => n,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };

    use sha2::Digest as _;
    let digest: String = sha2::Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let digests = vec![(args.network.display().to_string(), digest)];
    let config = serde_json::json!({
        "network": args.network.display().to_string(),
        "resolution": args.resolution,
    });
    if let Err(e) = write_manifest(&args.out, "partition", args.seed, config, &[], &digests) {
        return fail(EXIT_CONFIG, &e);
    }

    let partition = louvain_partition(&net, args.resolution, args.seed);
    let region_graph = build_region_graph(&net, &partition);
    let summary =
        serde_json::to_string_pretty(&region_graph.summary()).expect("summary serializes");
    if let Err(e) = write_output(&args.out, "partition.csv", &partition.to_csv(&net))
        .and_then(|_| write_output(&args.out, "region_graph.json", &(summary + "\n")))
    {
        return fail(EXIT_CONFIG, &e);
    }
    println!(
        "partitioned {} nodes into {} regions",
        net.num_nodes(),
        partition.num_regions()
    );
    EXIT_OK
}

fn cmd_run(args: &RunArgs) -> i32 {
    let method = match args.method.parse::<Method>() {
        Ok(m) => m,
        Err(msg) => return fail_msg(EXIT_CONFIG, &msg),
    };
    let (spec, scenario) = match resolve_scenario(&args.common) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let seed = args.seed.unwrap_or(scenario.root_seed);
    if let Err(e) = write_manifest(
        &args.common.out,
        "run",
        seed,
        manifest_config(&spec),
        &args.common.config,
        &scenario.input_digests,
    ) {
        return fail(EXIT_CONFIG, &e);
    }

    let trips = match scenario.trips_for_seed(seed) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let mut controller = match build_controller(
        method,
        &scenario.net,
        &scenario.params,
        &scenario.llm,
        seed,
        scenario.m_global,
        scenario.k_local,
    ) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let cfg = SimConfig {
        seed,
        ..scenario.sim.clone()
    };
    let log = match run_episode(
        &scenario.net,
        &scenario.partition,
        &scenario.region_graph,
        &trips,
        controller.as_mut(),
        &cfg,
    ) {
        Ok(log) => log,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };

    let metrics = citynav::bench::compute_metrics(&log);
    let cell = citynav::bench::BenchCell {
        method,
        seed,
        metrics: Some(metrics),
        error: None,
        background_digest: citynav::bench::background_digest(&log),
        incidents: log.incidents.len(),
    };
    let heatmap_name = format!("heatmap_{}.csv", method.name());
    if let Err(e) = write_output(&args.common.out, "episode.json", &log.to_json())
        .and_then(|_| write_output(&args.common.out, "metrics.csv", &metrics_csv(&[cell])))
        .and_then(|_| write_output(&args.common.out, &heatmap_name, &export_heatmap(&log)))
    {
        return fail(EXIT_CONFIG, &e);
    }
    println!(
        "{}: tp {} att {:.1}s awt {:.1}s adt {:.1}s ({} incidents)",
        method.name(),
        metrics.tp,
        metrics.att_s,
        metrics.awt_s,
        metrics.adt_s,
        log.incidents.len()
    );
    if let Some(max) = args.max_incidents {
        if log.incidents.len() as u64 > max {
            return fail_msg(
                EXIT_RUNTIME,
                &format!(
                    "episode logged {} incidents (threshold {max})",
                    log.incidents.len()
                ),
            );
        }
    }
    EXIT_OK
}

fn cmd_train(args: &TrainArgs) -> i32 {
    let (spec, scenario) = match resolve_scenario(&args.common) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if let Err(e) = write_manifest(
        &args.common.out,
        "train",
        scenario.trainer.seed,
        manifest_config(&spec),
        &args.common.config,
        &scenario.input_digests,
    ) {
        return fail(EXIT_CONFIG, &e);
    }
    let train_scenario = match scenario.train_scenario() {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let outcome = match train(&train_scenario, &scenario.trainer) {
        Ok(o) => o,
        Err(e @ CoopError::Diverged { .. }) => return fail(EXIT_DIVERGED, &e),
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    if let Err(e) = write_output(&args.common.out, "params.json", &outcome.params.to_json())
        .and_then(|_| write_output(&args.common.out, "history.csv", &history_to_csv(&outcome.history)))
    {
        return fail(EXIT_CONFIG, &e);
    }
    match outcome.history.last() {
        Some(last) => println!(
            "trained {} iterations: mean combined reward {:.4}, kl {:.5}",
            outcome.history.len(),
            last.mean_combined,
            last.kl
        ),
        None => println!("trained 0 iterations"),
    }
    EXIT_OK
}

fn cmd_bench(args: &BenchArgs) -> i32 {
    let (spec, scenario) = match resolve_scenario(&args.common) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let methods: Vec<Method> = if args.methods.is_empty() {
        scenario.methods.clone()
    } else {
        let mut parsed = Vec::with_capacity(args.methods.len());
        for name in &args.methods {
            match name.parse::<Method>() {
                Ok(m) => parsed.push(m),
                Err(msg) => return fail_msg(EXIT_CONFIG, &msg),
            }
        }
        parsed
    };
    let seeds: Vec<u64> = if args.seeds.is_empty() {
        scenario.seeds.clone()
    } else {
        args.seeds.clone()
    };
    if methods.is_empty() {
        return fail_msg(EXIT_CONFIG, "no methods to benchmark");
    }
    if seeds.is_empty() {
        return fail_msg(EXIT_CONFIG, "no seeds to benchmark");
    }
    if let Err(e) = write_manifest(
        &args.common.out,
        "bench",
        scenario.root_seed,
        manifest_config(&spec),
        &args.common.config,
        &scenario.input_digests,
    ) {
        return fail(EXIT_CONFIG, &e);
    }

    let outcome = match run_benchmark(&scenario.bench_scenario(), &methods, &seeds) {
        Ok(o) => o,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let summary = summarize(&outcome, &seeds);
    let summary_json =
        serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = write_output(&args.common.out, "metrics.csv", &metrics_csv(&outcome.cells))
        .and_then(|_| write_output(&args.common.out, "summary.json", &(summary_json + "\n")))
    {
        return fail(EXIT_CONFIG, &e);
    }
    for (method, log) in &outcome.first_logs {
        let name = format!("heatmap_{method}.csv");
        if let Err(e) = write_output(&args.common.out, &name, &export_heatmap(log)) {
            return fail(EXIT_CONFIG, &e);
        }
    }

    let mut failed = 0usize;
    for cell in &outcome.cells {
        match (&cell.metrics, &cell.error) {
            (Some(m), _) => println!(
                "{} seed {}: tp {} att {:.1}s awt {:.1}s adt {:.1}s",
                cell.method, cell.seed, m.tp, m.att_s, m.awt_s, m.adt_s
            ),
            (None, err) => {
                failed += 1;
                println!(
                    "{} seed {}: FAILED ({})",
                    cell.method,
                    cell.seed,
                    err.as_deref().unwrap_or("unknown")
                );
            }
        }
    }
    if failed > 0 {
        fail_msg(
            EXIT_PARTIAL,
            &format!("{failed} of {} benchmark cells failed", outcome.cells.len()),
        )
    } else {
        EXIT_OK
    }
}

fn cmd_gen_demand(args: &GenDemandArgs) -> i32 {
    let (spec, scenario) = match resolve_scenario(&args.common) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let Some(gravity) = &scenario.background else {
        return fail_msg(
            EXIT_CONFIG,
            "scenario has no [demand.background] section to generate from",
        );
    };
    if let Err(e) = write_manifest(
        &args.common.out,
        "gen-demand",
        scenario.root_seed,
        manifest_config(&spec),
        &args.common.config,
        &scenario.input_digests,
    ) {
        return fail(EXIT_CONFIG, &e);
    }
    let trips = match generate_background_demand(
        &scenario.net,
        &scenario.partition,
        &scenario.region_graph,
        gravity,
        scenario.root_seed,
        0,
    ) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    if let Err(e) = write_output(&args.common.out, "demand.csv", &demand_to_csv(&trips)) {
        return fail(EXIT_CONFIG, &e);
    }
    println!("generated {} background trips", trips.len());
    EXIT_OK
}
