//! Benchmarking: the four trip metrics, arrival-rate statistics, the
//! (method × seed) comparison harness with fair shared demand, and heatmap
//! export.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::controller::{build_controller, Method};
use crate::mesosim::{
    generate_background_demand, run_episode, DemandError, EpisodeLog, GravityParams, SimConfig,
    Trip,
};
use crate::netgraph::RoadNetwork;
use crate::partition::{Partition, RegionGraph};
use crate::policy::{LlmConfig, PolicyParams};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("no methods to benchmark")]
    EmptyMethods,
    #[error("no seeds to benchmark")]
    EmptySeeds,
    #[error(transparent)]
    Demand(#[from] DemandError),
}

/// The four aggregate trip metrics of one episode, over controlled
/// vehicles only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Throughput: controlled vehicles that reached their destination
    /// within the horizon.
    pub tp: u64,
    /// Average travel time: mean completed-trip duration, seconds.
    pub att_s: Scalar,
    /// Average waiting time: mean stationary time (exit-queue idling plus
    /// origin blocking) over departed controlled vehicles, seconds.
    pub awt_s: Scalar,
    /// Average delay time: mean excess over the free-flow plan across
    /// departed controlled vehicles; unfinished trips contribute their
    /// horizon residence (horizon − depart) − planned time.
    pub adt_s: Scalar,
    /// True when no controlled trip completed, in which case the vacuous
    /// means above are reported as 0.
    pub empty: bool,
}

/// Evaluates the four metrics on a finished episode log.
pub fn compute_metrics(log: &EpisodeLog) -> MetricsReport {
    let step = log.step_length_s;
    let departed: Vec<_> = log
        .vehicles
        .iter()
        .filter(|v| v.controlled && v.depart_step < log.horizon_steps)
        .collect();

    let mut tp = 0u64;
    let mut travel_sum = 0.0;
    let mut wait_sum = 0.0;
    let mut delay_sum = 0.0;
    for v in &departed {
        let end = v.arrive_step.unwrap_or(log.horizon_steps);
        let duration_s = (end - v.depart_step) as Scalar * step;
        if let Some(arrive) = v.arrive_step {
            tp += 1;
            travel_sum += (arrive - v.depart_step) as Scalar * step;
        }
        wait_sum += (v.idle_steps + v.pending_wait_steps) as Scalar * step;
        delay_sum += duration_s - v.tau_hat_s;
    }

    let mean = |sum: Scalar, n: usize| if n == 0 { 0.0 } else { sum / n as Scalar };
    MetricsReport {
        tp,
        att_s: mean(travel_sum, tp as usize),
        awt_s: mean(wait_sum, departed.len()),
        adt_s: mean(delay_sum, departed.len()),
        empty: tp == 0,
    }
}

/// Departure-rate statistics over fixed time buckets spanning the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArrivalStats {
    pub buckets: usize,
    /// Mean departures per bucket.
    pub mean: Scalar,
    /// Population standard deviation of the per-bucket counts.
    pub std: Scalar,
    pub max: u64,
    pub min: u64,
}

/// Counts departures per `bucket_s` window over `[0, horizon_s)`; trailing
/// windows without departures count as zero.
pub fn arrival_rate_stats(trips: &[Trip], horizon_s: Scalar, bucket_s: Scalar) -> ArrivalStats {
    let buckets = if horizon_s > 0.0 && bucket_s > 0.0 {
        (horizon_s / bucket_s).ceil() as usize
    } else {
        0
    };
    if buckets == 0 {
        return ArrivalStats {
            buckets: 0,
            mean: 0.0,
            std: 0.0,
            max: 0,
            min: 0,
        };
    }
    let mut counts = vec![0u64; buckets];
    for t in trips {
        if t.depart_s >= 0.0 && t.depart_s < horizon_s {
            let b = ((t.depart_s / bucket_s) as usize).min(buckets - 1);
            counts[b] += 1;
        }
    }
    let n = buckets as Scalar;
    let mean = counts.iter().sum::<u64>() as Scalar / n;
    let var = counts
        .iter()
        .map(|&c| (c as Scalar - mean).powi(2))
        .sum::<Scalar>()
        / n;
    ArrivalStats {
        buckets,
        mean,
        std: var.sqrt(),
        max: counts.iter().copied().max().unwrap_or(0),
        min: counts.iter().copied().min().unwrap_or(0),
    }
}

/// A fully resolved benchmark world: fixed infrastructure and controlled
/// demand, plus a background-traffic recipe that is regenerated per seed so
/// every method sees identical conditions under the same seed.
#[derive(Clone, Debug)]
pub struct BenchScenario {
    pub net: RoadNetwork,
    pub partition: Partition,
    pub region_graph: RegionGraph,
    /// Demand fixed across seeds (typically the controlled fleet, though
    /// files may mix in uncontrolled trips).
    pub fixed_trips: Vec<Trip>,
    /// Gravity recipe for uncontrolled traffic; `None` runs without
    /// background vehicles.
    pub background: Option<GravityParams>,
    pub sim: SimConfig,
    pub params: PolicyParams,
    pub llm: LlmConfig,
    pub m_global: usize,
    pub k_local: usize,
}

impl BenchScenario {
    /// Fixed plus seed-specific background demand. Background ids start
    /// above the largest fixed id.
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
}

/// One (method, seed) benchmark cell.
#[derive(Clone, Debug)]
pub struct BenchCell {
    pub method: Method,
    pub seed: u64,
    /// Metrics of the completed episode; `None` when the cell failed.
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    /// Digest of the background vehicles' realized trajectories; equal
    /// across methods for a fixed seed when the comparison is fair.
    pub background_digest: String,
    pub incidents: usize,
}

/// Full benchmark result: cells in (method, seed) input order plus one
/// retained episode log per method (its first successful seed) for heatmap
/// export.
#[derive(Debug)]
pub struct BenchOutcome {
    pub cells: Vec<BenchCell>,
    pub warnings: Vec<String>,
    pub first_logs: BTreeMap<String, EpisodeLog>,
}

/// Hex digest over the uncontrolled vehicles' ids, departures, arrivals,
/// and realized routes.
pub fn background_digest(log: &EpisodeLog) -> String {
    let mut hasher = Sha256::new();
    for v in log.vehicles.iter().filter(|v| !v.controlled) {
        hasher.update(v.id.to_le_bytes());
        hasher.update(v.depart_step.to_le_bytes());
        hasher.update(v.injected_step.unwrap_or(u64::MAX).to_le_bytes());
        hasher.update(v.arrive_step.unwrap_or(u64::MAX).to_le_bytes());
        for e in &v.route {
            hasher.update(e.to_le_bytes());
        }
        hasher.update([0xff]);
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn run_cell(
    scenario: &BenchScenario,
    method: Method,
    seed: u64,
) -> (BenchCell, Option<EpisodeLog>) {
    let attempt = || -> Result<EpisodeLog, String> {
        let trips = scenario.trips_for_seed(seed).map_err(|e| e.to_string())?;
        let mut controller = build_controller(
            method,
            &scenario.net,
            &scenario.params,
            &scenario.llm,
            seed,
            scenario.m_global,
            scenario.k_local,
        )
        .map_err(|e| e.to_string())?;
        let cfg = SimConfig {
            seed,
            ..scenario.sim.clone()
        };
        run_episode(
            &scenario.net,
            &scenario.partition,
            &scenario.region_graph,
            &trips,
            controller.as_mut(),
            &cfg,
        )
        .map_err(|e| e.to_string())
    };
    match attempt() {
        Ok(log) => {
            let cell = BenchCell {
                method,
                seed,
                metrics: Some(compute_metrics(&log)),
                error: None,
                background_digest: background_digest(&log),
                incidents: log.incidents.len(),
            };
            (cell, Some(log))
        }
        Err(error) => (
            BenchCell {
                method,
                seed,
                metrics: None,
                error: Some(error),
                background_digest: String::new(),
                incidents: 0,
            },
            None,
        ),
    }
}

/// Runs one episode per (method, seed) cell — cells in parallel, each with
/// an isolated simulator — and reduces the results in deterministic input
/// order. Duplicate methods are dropped with a warning; a failing cell is
/// reported in place without stopping the others.
pub fn run_benchmark(
    scenario: &BenchScenario,
    methods: &[Method],
    seeds: &[u64],
) -> Result<BenchOutcome, BenchError> {
    let mut unique: Vec<Method> = Vec::new();
    let mut warnings = Vec::new();
    for &m in methods {
        if unique.contains(&m) {
            warnings.push(format!("duplicate method '{m}' ignored"));
        } else {
            unique.push(m);
        }
    }
    if unique.is_empty() {
        return Err(BenchError::EmptyMethods);
    }
    if seeds.is_empty() {
        return Err(BenchError::EmptySeeds);
    }

    let jobs: Vec<(Method, u64)> = unique
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let mut slots: Vec<Option<(BenchCell, Option<EpisodeLog>)>> =
        (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(jobs.len());
        for &(method, seed) in &jobs {
            handles.push(scope.spawn(move || run_cell(scenario, method, seed)));
        }
        for (slot, handle) in slots.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("benchmark cell panicked"));
        }
    });

    let mut cells = Vec::with_capacity(jobs.len());
    let mut first_logs = BTreeMap::new();
    for slot in slots.into_iter().flatten() {
        let (cell, log) = slot;
        if let Some(log) = log {
            first_logs
                .entry(cell.method.name().to_owned())
                .or_insert(log);
        }
        cells.push(cell);
    }
    Ok(BenchOutcome {
        cells,
        warnings,
        first_logs,
    })
}

/// Sanitizes an error message for a single CSV cell.
fn csv_safe(message: &str) -> String {
    message.replace(['\n', '\r'], " ").replace(',', ";")
}

/// Per-cell metrics table: `method,seed,tp,att_s,awt_s,adt_s,status`.
pub fn metrics_csv(cells: &[BenchCell]) -> String {
    let mut out = String::from("method,seed,tp,att_s,awt_s,adt_s,status\n");
    for c in cells {
        match (&c.metrics, &c.error) {
            (Some(m), _) => out.push_str(&format!(
                "{},{},{},{},{},{},ok\n",
                c.method, c.seed, m.tp, m.att_s, m.awt_s, m.adt_s
            )),
            (None, err) => out.push_str(&format!(
                "{},{},,,,,failed: {}\n",
                c.method,
                c.seed,
                csv_safe(err.as_deref().unwrap_or("unknown"))
            )),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: Scalar,
    pub std: Scalar,
}

fn mean_std(values: &[Scalar]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as Scalar;
    let mean = values.iter().sum::<Scalar>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Per-method aggregate over its successful seeds.
#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub tp: MeanStd,
    pub att_s: MeanStd,
    pub awt_s: MeanStd,
    pub adt_s: MeanStd,
}

/// Whole-benchmark summary, serialized as `summary.json`.
#[derive(Clone, Debug, Serialize)]
pub struct BenchSummary {
    pub methods: Vec<MethodSummary>,
    pub seeds: Vec<u64>,
    /// Background trajectories matched across methods for every seed.
    pub background_consistent: bool,
    /// seed → digest of the (shared) background trajectories.
    pub background_digests: BTreeMap<u64, String>,
    pub warnings: Vec<String>,
}

/// Reduces cells to the per-method mean ± std table plus the cross-method
/// fairness check.
pub fn summarize(outcome: &BenchOutcome, seeds: &[u64]) -> BenchSummary {
    let mut order: Vec<Method> = Vec::new();
    for c in &outcome.cells {
        if !order.contains(&c.method) {
            order.push(c.method);
        }
    }
    let methods = order
        .iter()
        .map(|&m| {
            let ok: Vec<&BenchCell> = outcome
                .cells
                .iter()
                .filter(|c| c.method == m && c.metrics.is_some())
                .collect();
            let failed = outcome
                .cells
                .iter()
                .filter(|c| c.method == m && c.metrics.is_none())
                .count();
            let col = |f: fn(&MetricsReport) -> Scalar| -> MeanStd {
                mean_std(&ok.iter().map(|c| f(c.metrics.as_ref().unwrap())).collect::<Vec<_>>())
            };
            MethodSummary {
                method: m.name().to_owned(),
                seeds_ok: ok.len(),
                seeds_failed: failed,
                tp: col(|r| r.tp as Scalar),
                att_s: col(|r| r.att_s),
                awt_s: col(|r| r.awt_s),
                adt_s: col(|r| r.adt_s),
            }
        })
        .collect();

    let mut background_digests: BTreeMap<u64, String> = BTreeMap::new();
    let mut consistent = true;
    for c in outcome.cells.iter().filter(|c| c.metrics.is_some()) {
        match background_digests.get(&c.seed) {
            Some(d) if *d != c.background_digest => consistent = false,
            Some(_) => {}
            None => {
                background_digests.insert(c.seed, c.background_digest.clone());
            }
        }
    }

    BenchSummary {
        methods,
        seeds: seeds.to_vec(),
        background_consistent: consistent,
        background_digests,
        warnings: outcome.warnings.clone(),
    }
}

/// Edge-usage table `edge_id,pass_count` over every edge (zeros included),
/// ascending by edge id.
pub fn export_heatmap(log: &EpisodeLog) -> String {
    let mut out = String::from("edge_id,pass_count\n");
    for (edge, count) in &log.edge_passes {
        out.push_str(&format!("{edge},{count}\n"));
    }
    out
}
