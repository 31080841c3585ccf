//! Cooperative policy optimization for the two-level navigator: dual
//! individual/shared rewards, group-normalized advantages, a clipped
//! surrogate objective with a KL penalty against the rollout policy, and a
//! trainer that jointly ascends the global and local parameter vectors.
//!
//! Counterfactual groups are built without re-running full multi-vehicle
//! episodes: each recorded decision context is re-sampled N times and every
//! sampled choice is completed by a surrogate walk through the base
//! episode's frozen queue trace (all other vehicles replayed verbatim).
//! This keeps the N samples of a group exactly comparable and the whole
//! iteration deterministic.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::controller::{DecisionRecord, FlatController, HierarchicalController};
use crate::mesosim::{
    run_episode, SimConfig, SimError, Simulation, Trip, VehicleRecord,
};
use crate::netgraph::{NodeId, RoadNetwork};
use crate::partition::{Partition, RegionGraph, RegionId};
use crate::plan::{candidate_local_routes, dijkstra_route, NextRegion};
use crate::policy::{
    candidate_log_probs, score, softmax_select, FeatureVec, Level, PolicyError, PolicyParams,
    FEATURE_DIM,
};
use crate::rng::derive_rng;
use crate::scalar::Real;
use crate::Scalar;

/// Errors from reward evaluation, objective assembly, or training.
#[derive(Debug, thiserror::Error)]
pub enum CoopError {
    #[error("planned free-flow time must be positive")]
    ZeroPlannedTime,
    #[error("invalid trainer config: {0}")]
    BadConfig(String),
    #[error("kl support violation: p[{index}] > 0 where q[{index}] = 0")]
    SupportViolation { index: usize },
    #[error("kl inputs differ in length ({p} vs {q})")]
    LengthMismatch { p: usize, q: usize },
    #[error("training diverged at iteration {iteration}: mean parameter magnitude {mean_abs:.3e}")]
    Diverged { iteration: usize, mean_abs: Scalar },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Direction of the individual reward's travel-time ratio. `Literal` keeps
/// τ/(τ+τ̂) exactly as specified; `Inverted` uses τ̂/(τ+τ̂), which rewards
/// trips that beat their free-flow plan instead of penalizing them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardRatio {
    #[default]
    Literal,
    Inverted,
}

/// Trainer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Mix between individual and shared reward, in [0, 1].
    pub alpha: Scalar,
    /// Idle-step penalty coefficient, ≥ 0.
    pub lambda: Scalar,
    /// Surrogate clip width, in (0, 1).
    pub epsilon: Scalar,
    /// KL penalty weight, ≥ 0.
    pub beta: Scalar,
    /// Samples per decision context, ≥ 2.
    pub group_size: usize,
    pub learning_rate: Scalar,
    pub iterations: usize,
    /// Softmax temperature of the policy being trained, > 0.
    pub temperature: Scalar,
    pub seed: u64,
    /// Baseline = moving average of recent group means instead of each
    /// group's own mean.
    pub moving_average: bool,
    /// Window (in groups, per level) for the moving-average baseline.
    pub moving_average_window: usize,
    pub reward_ratio: RewardRatio,
    /// Scale (seconds) dividing the shared reward before mixing; `None`
    /// uses the scenario's mean regional free-flow traversal time, `Some(1.0)`
    /// reproduces the unscaled sum.
    pub share_scale: Option<Scalar>,
    /// Maximum decision contexts (re)sampled per iteration; the rest of the
    /// trace is skipped under a seeded subsample.
    pub max_contexts: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            alpha: 0.5,
            lambda: 0.1,
            epsilon: 0.2,
            beta: 0.01,
            group_size: 8,
            learning_rate: 0.05,
            iterations: 50,
            temperature: 1.0,
            seed: 0,
            moving_average: false,
            moving_average_window: 10,
            reward_ratio: RewardRatio::Literal,
            share_scale: None,
            max_contexts: 64,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), CoopError> {
        let bad = |m: &str| Err(CoopError::BadConfig(m.to_owned()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must be in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if self.moving_average_window == 0 {
            return bad("moving_average_window must be >= 1");
        }
        if self.max_contexts == 0 {
            return bad("max_contexts must be >= 1");
        }
        if let Some(s) = self.share_scale {
            if !(s > 0.0) {
                return bad("share_scale must be > 0");
            }
        }
        Ok(())
    }
}

/// Per-vehicle efficiency reward: a travel-time ratio minus an idle
/// penalty. `tau_s` is the realized (or surrogate-estimated) trip time,
/// `tau_hat_s` the planned free-flow time.
pub fn individual_reward(
    tau_s: Scalar,
    tau_hat_s: Scalar,
    n_idle: u64,
    lambda: Scalar,
    ratio: RewardRatio,
) -> Result<Scalar, CoopError> {
    if !(tau_hat_s > 0.0) {
        return Err(CoopError::ZeroPlannedTime);
    }
    let numerator = match ratio {
        RewardRatio::Literal => tau_s,
        RewardRatio::Inverted => tau_hat_s,
    };
    Ok(numerator / (tau_s + tau_hat_s) - lambda * n_idle as Scalar)
}

/// Network-coordination reward: negated mean regional travel-time estimate
/// over the plan's regions (0 for an empty plan). `region_avg_times` is
/// dense by region id; unknown regions contribute 0.
pub fn shared_reward(global_plan: &[RegionId], region_avg_times: &[Scalar]) -> Scalar {
    if global_plan.is_empty() {
        return 0.0;
    }
    let total: Scalar = global_plan
        .iter()
        .map(|&z| region_avg_times.get(z).copied().unwrap_or(0.0))
        .sum();
    -total / global_plan.len() as Scalar
}

/// Mixes the two rewards: α·r_ind + (1−α)·(r_share / share_scale).
pub fn combined_reward(
    r_ind: Scalar,
    r_share: Scalar,
    alpha: Scalar,
    share_scale: Scalar,
) -> Scalar {
    alpha * r_ind + (1.0 - alpha) * (r_share / share_scale)
}

/// Group-relative advantages: each reward minus the group mean, or minus
/// `baseline` when a moving-average baseline is supplied.
pub fn group_advantages(rewards: &[Scalar], baseline: Option<Scalar>) -> Vec<Scalar> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let b = baseline
        .unwrap_or_else(|| rewards.iter().sum::<Scalar>() / rewards.len() as Scalar);
    rewards.iter().map(|&r| r - b).collect()
}

/// Pessimistic clipped policy-gradient term:
/// min(ratio·A, clip(ratio, 1−ε, 1+ε)·A).
pub fn clipped_surrogate(ratio: Scalar, advantage: Scalar, epsilon: Scalar) -> Scalar {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    (ratio * advantage).min(clipped)
}

/// KL divergence Σ p ln(p/q) between categorical distributions on the same
/// support. Zero-probability entries of `p` contribute nothing; `q` must be
/// positive wherever `p` is.
pub fn kl_categorical<T: Real>(p: &[T], q: &[T]) -> Result<T, CoopError> {
    if p.len() != q.len() {
        return Err(CoopError::LengthMismatch {
            p: p.len(),
            q: q.len(),
        });
    }
    let mut total = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > T::zero() {
            if !(qi > T::zero()) {
                return Err(CoopError::SupportViolation { index: i });
            }
            total = total + pi * (pi / qi).ln();
        }
    }
    Ok(total)
}

/// One re-sampled choice at a recorded decision context. The level,
/// candidate features, and group id live on the enclosing [`Group`].
#[derive(Clone, Debug)]
pub struct RolloutSample {
    pub chosen: usize,
    /// Log-probability of `chosen` under the policy that generated the
    /// rollout (the per-iteration reference).
    pub behavior_log_prob: Scalar,
    /// Realized or surrogate-estimated trip time, seconds.
    pub tau_s: Scalar,
    /// Planned free-flow trip time, seconds.
    pub tau_hat_s: Scalar,
    /// Estimated idle steps over the realized remainder.
    pub n_idle: u64,
    pub r_ind: Scalar,
    pub r_share: Scalar,
    pub combined: Scalar,
}

/// N samples sharing one decision context (same state, same candidates).
#[derive(Clone, Debug)]
pub struct Group {
    pub level: Level,
    /// Candidate feature matrix shared by every sample.
    pub features: Vec<FeatureVec>,
    pub samples: Vec<RolloutSample>,
    /// Advantage baseline override (the moving average of group means);
    /// `None` uses this group's own mean.
    pub baseline: Option<Scalar>,
}

impl Group {
    pub fn mean_reward(&self) -> Scalar {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.combined).sum::<Scalar>() / self.samples.len() as Scalar
    }
}

/// Gradient over both parameter vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyGradient {
    pub global: FeatureVec,
    pub local: FeatureVec,
}

impl PolicyGradient {
    pub fn zero() -> Self {
        PolicyGradient {
            global: [0.0; FEATURE_DIM],
            local: [0.0; FEATURE_DIM],
        }
    }

    fn level_mut(&mut self, level: Level) -> &mut FeatureVec {
        match level {
            Level::Global => &mut self.global,
            Level::Local => &mut self.local,
        }
    }

    /// Joint Euclidean norm over both vectors.
    pub fn norm(&self) -> Scalar {
        self.global
            .iter()
            .chain(self.local.iter())
            .map(|x| x * x)
            .sum::<Scalar>()
            .sqrt()
    }

    /// Rescales each level's vector to at most `max_norm`.
    pub fn clipped(&self, max_norm: Scalar) -> PolicyGradient {
        let clip = |v: &FeatureVec| {
            let n = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
            if n > max_norm {
                v.map(|x| x * max_norm / n)
            } else {
                *v
            }
        };
        PolicyGradient {
            global: clip(&self.global),
            local: clip(&self.local),
        }
    }
}

/// Objective value, its KL component, and the analytic ascent gradient.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub objective: Scalar,
    /// Sum over levels of the mean per-context KL (without the β weight).
    pub kl: Scalar,
    pub gradient: PolicyGradient,
}

/// Evaluates the clipped-surrogate objective with KL penalty and its
/// analytic gradient over θ_global ⊕ θ_local:
/// Σ_level [ mean_i min(ratio_i·A_i, clip(ratio_i)·A_i) − β·mean-over-contexts KL(π_θ ‖ π_ref) ].
/// The clipped branch is constant in θ, so clip regions contribute zero
/// gradient; exact ties take the unclipped branch so the gradient flows.
pub fn grpo_objective_and_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[Group],
    config: &TrainerConfig,
) -> Result<ObjectiveEval, CoopError> {
    let mut objective = 0.0;
    let mut kl_report = 0.0;
    let mut gradient = PolicyGradient::zero();

    for level in [Level::Global, Level::Local] {
        let level_groups: Vec<&Group> = groups.iter().filter(|g| g.level == level).collect();
        let n_samples: usize = level_groups.iter().map(|g| g.samples.len()).sum();
        if level_groups.is_empty() || n_samples == 0 {
            continue;
        }

        let mut surrogate_sum = 0.0;
        let mut surrogate_grad = [0.0 as Scalar; FEATURE_DIM];
        let mut kl_sum = 0.0;
        let mut kl_grad = [0.0 as Scalar; FEATURE_DIM];

        for g in &level_groups {
            let rewards: Vec<Scalar> = g.samples.iter().map(|s| s.combined).collect();
            let advantages = group_advantages(&rewards, g.baseline);
            let log_probs = candidate_log_probs(params, level, &g.features)?;

            for (s, &a) in g.samples.iter().zip(&advantages) {
                let ratio = (log_probs[s.chosen] - s.behavior_log_prob).exp();
                let unclipped = ratio * a;
                let clipped =
                    ratio.clamp(1.0 - config.epsilon, 1.0 + config.epsilon) * a;
                surrogate_sum += unclipped.min(clipped);
                if unclipped <= clipped {
                    // d(ratio·A)/dθ = A · ratio · ∇ln π(chosen)
                    let sc = score(params, level, &g.features, s.chosen)?;
                    for d in 0..FEATURE_DIM {
                        surrogate_grad[d] += a * ratio * sc[d];
                    }
                }
            }

            // KL(π_θ ‖ π_ref) on this context, plus its gradient
            // Σ_i p_i (ln p_i − ln q_i) ∇ln π(i).
            let lp = candidate_log_probs(params, level, &g.features)?;
            let lq = candidate_log_probs(ref_params, level, &g.features)?;
            let p: Vec<Scalar> = lp.iter().map(|x| x.exp()).collect();
            let q: Vec<Scalar> = lq.iter().map(|x| x.exp()).collect();
            kl_sum += kl_categorical(&p, &q)?;
            for i in 0..p.len() {
                let w = p[i] * (lp[i] - lq[i]);
                if w != 0.0 {
                    let sc = score(params, level, &g.features, i)?;
                    for d in 0..FEATURE_DIM {
                        kl_grad[d] += w * sc[d];
                    }
                }
            }
        }

        let n = n_samples as Scalar;
        let c = level_groups.len() as Scalar;
        let mean_kl = kl_sum / c;
        objective += surrogate_sum / n - config.beta * mean_kl;
        kl_report += mean_kl;
        let gl = gradient.level_mut(level);
        for d in 0..FEATURE_DIM {
            gl[d] = surrogate_grad[d] / n - config.beta * kl_grad[d] / c;
        }
    }

    Ok(ObjectiveEval {
        objective,
        kl: kl_report,
        gradient,
    })
}

/// A reproducible training scenario: fixed world, fixed demand, and the
/// candidate-set sizes the rollout controller uses.
#[derive(Clone, Debug)]
pub struct TrainScenario {
    pub net: RoadNetwork,
    pub partition: Partition,
    pub region_graph: RegionGraph,
    pub trips: Vec<Trip>,
    pub sim: SimConfig,
    pub m_global: usize,
    pub k_local: usize,
    /// Train the single-level (flat) ablation instead of the hierarchical
    /// stack; only θ_local receives samples then.
    pub flat: bool,
}

/// One training-history row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub mean_r_ind: Scalar,
    pub mean_r_share: Scalar,
    pub mean_combined: Scalar,
    /// Objective re-evaluated after the parameter step (it is identically 0
    /// before the step, when θ = θ_ref).
    pub objective: Scalar,
    /// KL component after the parameter step.
    pub kl: Scalar,
    /// Pre-clip joint gradient norm at θ_ref.
    pub grad_norm: Scalar,
}

/// Serializes history rows as CSV.
pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut out =
        String::from("iter,mean_r_ind,mean_r_share,mean_combined,objective,kl,grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, r.mean_r_ind, r.mean_r_share, r.mean_combined, r.objective, r.kl, r.grad_norm
        ));
    }
    out
}

/// Trained parameters plus the per-iteration history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<HistoryRow>,
}

/// Frozen view of one base episode for surrogate scoring: per-edge
/// traversal steps and service rates, plus the recorded end-of-tick queue
/// lengths.
struct FrozenTrace<'a> {
    queues: &'a [Vec<u32>],
    steps: Vec<u32>,
    outflow: Vec<u32>,
    step_length_s: Scalar,
    horizon_steps: u64,
}

impl<'a> FrozenTrace<'a> {
    fn new(net: &RoadNetwork, cfg: &SimConfig, queues: &'a [Vec<u32>]) -> Self {
        let steps = (0..net.num_edges())
            .map(|ei| {
                let e = net.edge(ei);
                ((e.free_flow_time() / cfg.step_length_s).ceil() as u32).max(1)
            })
            .collect();
        let outflow = (0..net.num_edges())
            .map(|ei| net.edge(ei).outflow_per_step(cfg.step_length_s).max(1))
            .collect();
        FrozenTrace {
            queues,
            steps,
            outflow,
            step_length_s: cfg.step_length_s,
            horizon_steps: cfg.horizon_steps(),
        }
    }

    fn queue_at(&self, t: u64, edge: usize) -> u32 {
        if self.queues.is_empty() {
            return 0;
        }
        let row = (t as usize).min(self.queues.len() - 1);
        self.queues[row][edge]
    }

    /// Walks a dense edge path entered at tick `enter_t` as a ghost vehicle:
    /// each edge takes its free-flow steps, then a queue wait of
    /// ceil((q+1)/outflow) ticks against the frozen queue behind which the
    /// ghost lines up. Returns (exit tick of the last edge, idle ticks).
    fn walk(&self, enter_t: u64, path: &[usize]) -> (u64, u64) {
        let mut t = enter_t;
        let mut idle = 0u64;
        for &e in path {
            let joined = t + self.steps[e] as u64;
            let q = self.queue_at(joined, e) as u64;
            let wait = (q + 1).div_ceil(self.outflow[e] as u64);
            idle += wait;
            t = joined + wait;
        }
        (t, idle)
    }
}

/// Greedy realization of a region chain from `at`: one cheapest local leg
/// per region hop, unconstrained shortest path as a fallback when a hop has
/// no leg. Returns dense edge indices or `None` when even the fallback
/// fails.
fn realize_regions(
    scenario: &TrainScenario,
    mut at: NodeId,
    regions: &[RegionId],
    dest: NodeId,
) -> Option<Vec<usize>> {
    let net = &scenario.net;
    let mut dense = Vec::new();
    let mut i = 0;
    while i < regions.len() {
        let next = match regions.get(i + 1) {
            Some(&z) => NextRegion::Region(z),
            None => NextRegion::Final,
        };
        let legs = candidate_local_routes(
            net,
            &scenario.partition,
            &scenario.region_graph,
            at,
            next,
            dest,
            1,
        );
        match legs.first() {
            Some(leg) => {
                for e in &leg.edges {
                    dense.push(net.edge_idx(*e)?);
                }
                if let Some(&last) = dense.last() {
                    at = net.edge(last).to;
                }
                if matches!(next, NextRegion::Final) {
                    return Some(dense);
                }
                i += 1;
            }
            None => {
                let path = dijkstra_route(net, at, dest)?;
                for e in &path.edges {
                    dense.push(net.edge_idx(*e)?);
                }
                return Some(dense);
            }
        }
    }
    Some(dense)
}

/// Realizes candidate `idx` of a recorded decision into a full dense edge
/// path from the decision point to the destination.
fn realize_candidate(
    scenario: &TrainScenario,
    rec: &DecisionRecord,
    dest: NodeId,
    idx: usize,
) -> Option<Vec<usize>> {
    match rec.level {
        Level::Global => {
            realize_regions(scenario, rec.at_node, &rec.global_candidates[idx].regions, dest)
        }
        Level::Local => {
            let net = &scenario.net;
            let cand = &rec.local_candidates[idx];
            let mut dense = Vec::with_capacity(cand.edges.len());
            for e in &cand.edges {
                dense.push(net.edge_idx(*e)?);
            }
            // A final-region or flat candidate already ends at the
            // destination; otherwise realize the remaining regions from the
            // candidate's head.
            if rec.region_plan.len() <= 1 {
                return Some(dense);
            }
            let at = net.edge(*dense.last()?).to;
            let rest = realize_regions(scenario, at, &rec.region_plan[1..], dest)?;
            dense.extend(rest);
            Some(dense)
        }
    }
}

/// Surrogate trip outcome (τ estimate in seconds, idle-step estimate) for
/// candidate `idx` at a recorded decision. Infeasible candidates receive a
/// twice-the-remaining-horizon penalty.
fn score_candidate(
    scenario: &TrainScenario,
    frozen: &FrozenTrace<'_>,
    rec: &DecisionRecord,
    vrec: &VehicleRecord,
    idx: usize,
) -> (Scalar, u64) {
    match realize_candidate(scenario, rec, NodeId(vrec.dest), idx) {
        Some(path) => {
            let (exit_t, idle) = frozen.walk(rec.step, &path);
            let tau =
                exit_t.saturating_sub(vrec.depart_step).max(1) as Scalar * frozen.step_length_s;
            (tau, idle)
        }
        None => {
            let remaining = frozen
                .horizon_steps
                .saturating_sub(vrec.depart_step)
                .max(1);
            (2.0 * remaining as Scalar * frozen.step_length_s, 0)
        }
    }
}

/// Builds the N-sample group for one recorded decision context: the
/// realized choice first, then N−1 fresh draws from the reference policy,
/// every one scored by the frozen-trace surrogate.
#[allow(clippy::too_many_arguments)]
fn build_group(
    scenario: &TrainScenario,
    frozen: &FrozenTrace<'_>,
    rec: &DecisionRecord,
    vrec: &VehicleRecord,
    ref_params: &PolicyParams,
    config: &TrainerConfig,
    share_scale: Scalar,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<Group> {
    if rec.features.is_empty() {
        return None;
    }
    let mut picks: Vec<(usize, Scalar)> = vec![(rec.chosen, rec.log_prob)];
    for _ in 1..config.group_size {
        let d = softmax_select(ref_params, rec.level, &rec.features, rng).ok()?;
        picks.push((d.index, d.log_prob));
    }

    let mut outcome_cache: BTreeMap<usize, (Scalar, u64)> = BTreeMap::new();
    let mut samples = Vec::with_capacity(picks.len());
    for (idx, behavior_log_prob) in picks {
        let (tau_s, n_idle) = *outcome_cache
            .entry(idx)
            .or_insert_with(|| score_candidate(scenario, frozen, rec, vrec, idx));
        let plan: &[RegionId] = match rec.level {
            Level::Global => &rec.global_candidates[idx].regions,
            Level::Local => &rec.region_plan,
        };
        let r_ind =
            individual_reward(tau_s, vrec.tau_hat_s, n_idle, config.lambda, config.reward_ratio)
                .ok()?;
        let r_share = shared_reward(plan, &rec.tau_bar_s);
        let combined = combined_reward(r_ind, r_share, config.alpha, share_scale);
        samples.push(RolloutSample {
            chosen: idx,
            behavior_log_prob,
            tau_s,
            tau_hat_s: vrec.tau_hat_s,
            n_idle,
            r_ind,
            r_share,
            combined,
        });
    }
    Some(Group {
        level: rec.level,
        features: rec.features.clone(),
        samples,
        baseline: None,
    })
}

/// Mean regional free-flow traversal time, the default shared-reward scale.
fn default_share_scale(scenario: &TrainScenario) -> Result<Scalar, CoopError> {
    let sim = Simulation::new(
        &scenario.net,
        &scenario.partition,
        &scenario.region_graph,
        scenario.sim.clone(),
    )?;
    let k = scenario.partition.num_regions().max(1);
    let mean = (0..k)
        .map(|r| sim.region_freeflow_fallback(r))
        .sum::<Scalar>()
        / k as Scalar;
    Ok(if mean > 0.0 { mean } else { 1.0 })
}

/// Trains the softmax policy on the scenario: per iteration, one rollout
/// episode under the frozen reference parameters, N-sample counterfactual
/// groups at (a subsample of) its decision contexts, then one clipped
/// gradient-ascent step per level. History rows record the batch's reward
/// means, the post-step objective and KL, and the pre-clip gradient norm.
pub fn train(scenario: &TrainScenario, config: &TrainerConfig) -> Result<TrainOutcome, CoopError> {
    config.validate()?;
    let share_scale = match config.share_scale {
        Some(s) => s,
        None => default_share_scale(scenario)?,
    };
    let mut params = PolicyParams {
        temperature: config.temperature,
        ..PolicyParams::default()
    };
    let mut sim_cfg = scenario.sim.clone();
    sim_cfg.record_queue_trace = true;

    let mut history = Vec::with_capacity(config.iterations);
    // Moving-average baseline state: recent group means per level.
    let mut recent: BTreeMap<&'static str, VecDeque<Scalar>> = BTreeMap::new();

    for iter in 0..config.iterations {
        let ref_params = params.clone();
        let episode_seed: u64 =
            rand::Rng::random(&mut derive_rng(config.seed, &format!("episode-{iter}")));

        let (log, trace) = if scenario.flat {
            let mut ctl =
                FlatController::softmax(ref_params.clone(), episode_seed, scenario.k_local);
            let log = run_episode(
                &scenario.net,
                &scenario.partition,
                &scenario.region_graph,
                &scenario.trips,
                &mut ctl,
                &sim_cfg,
            )?;
            (log, ctl.take_trace())
        } else {
            let mut ctl = HierarchicalController::softmax(
                ref_params.clone(),
                episode_seed,
                scenario.m_global,
                scenario.k_local,
            );
            let log = run_episode(
                &scenario.net,
                &scenario.partition,
                &scenario.region_graph,
                &scenario.trips,
                &mut ctl,
                &sim_cfg,
            )?;
            (log, ctl.take_trace())
        };

        // Deterministic context subsample.
        let mut context_ids: Vec<usize> = (0..trace.len()).collect();
        if context_ids.len() > config.max_contexts {
            let mut rng = derive_rng(config.seed, &format!("contexts-{iter}"));
            for i in 0..config.max_contexts {
                let j = rand::Rng::random_range(&mut rng, i..context_ids.len());
                context_ids.swap(i, j);
            }
            context_ids.truncate(config.max_contexts);
            context_ids.sort_unstable();
        }

        let frozen = FrozenTrace::new(&scenario.net, &sim_cfg, log.queue_trace.as_deref()
            .unwrap_or(&[]));
        let by_id: BTreeMap<u64, &VehicleRecord> =
            log.vehicles.iter().map(|v| (v.id, v)).collect();
        let mut sample_rng = derive_rng(config.seed, &format!("samples-{iter}"));

        let mut groups: Vec<Group> = Vec::new();
        for &ci in &context_ids {
            let rec = &trace[ci];
            let Some(vrec) = by_id.get(&rec.vehicle.0) else { continue };
            if let Some(mut g) = build_group(
                scenario,
                &frozen,
                rec,
                vrec,
                &ref_params,
                config,
                share_scale,
                &mut sample_rng,
            ) {
                if config.moving_average {
                    let key = match g.level {
                        Level::Global => "global",
                        Level::Local => "local",
                    };
                    let window = recent.entry(key).or_default();
                    window.push_back(g.mean_reward());
                    while window.len() > config.moving_average_window {
                        window.pop_front();
                    }
                    g.baseline =
                        Some(window.iter().sum::<Scalar>() / window.len() as Scalar);
                }
                groups.push(g);
            }
        }

        if groups.is_empty() {
            history.push(HistoryRow {
                iter,
                mean_r_ind: 0.0,
                mean_r_share: 0.0,
                mean_combined: 0.0,
                objective: 0.0,
                kl: 0.0,
                grad_norm: 0.0,
            });
            continue;
        }

        let eval = grpo_objective_and_gradient(&params, &ref_params, &groups, config)?;
        let grad_norm = eval.gradient.norm();
        let step = eval.gradient.clipped(1.0);
        for d in 0..FEATURE_DIM {
            params.theta_global[d] += config.learning_rate * step.global[d];
            params.theta_local[d] += config.learning_rate * step.local[d];
        }

        let mean_abs = params
            .theta_global
            .iter()
            .chain(params.theta_local.iter())
            .map(|x| x.abs())
            .sum::<Scalar>()
            / (2 * FEATURE_DIM) as Scalar;
        if mean_abs > 1e3 {
            return Err(CoopError::Diverged {
                iteration: iter,
                mean_abs,
            });
        }

        let post = grpo_objective_and_gradient(&params, &ref_params, &groups, config)?;
        let n: usize = groups.iter().map(|g| g.samples.len()).sum();
        let sum = |f: fn(&RolloutSample) -> Scalar| -> Scalar {
            groups
                .iter()
                .flat_map(|g| g.samples.iter())
                .map(f)
                .sum::<Scalar>()
                / n as Scalar
        };
        history.push(HistoryRow {
            iter,
            mean_r_ind: sum(|s| s.r_ind),
            mean_r_share: sum(|s| s.r_share),
            mean_combined: sum(|s| s.combined),
            objective: post.objective,
            kl: post.kl,
            grad_norm,
        });
    }

    Ok(TrainOutcome { params, history })
}
