//! Candidate-selection policies for both decision levels: a greedy
//! heuristic, a featurized softmax (the training target), and an
//! LLM-endpoint selector with a deterministic fallback chain.
//!
//! Every candidate is summarized as a fixed 5-component feature vector,
//! normalized within its candidate set so logits stay scale-free across
//! scenarios. The softmax policy scores candidates with `θ·φ / T` and keeps
//! exact log-probabilities, which the cooperative trainer consumes. The LLM
//! selector serializes the observation (see [`crate::observe`]), sends it to
//! an HTTP chat-completion endpoint (or a built-in stub for offline runs),
//! parses a 1-based `CHOICE: <n>` answer, and falls back to the greedy rule
//! after one retry — so every decision point yields a valid index even
//! against a permanently failing endpoint.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use num_traits::real::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::observe::{GlobalObservation, LocalObservation};
use crate::plan::{GlobalRoutePlan, LocalRoutePlan};
use crate::Scalar;

/// Number of per-candidate features at each level.
pub const FEATURE_DIM: usize = 5;

/// Per-candidate feature vector: `[estimated time, mean congestion,
/// contention, length, bias]`, each in [0, 1] (bias fixed at 1).
pub type FeatureVec = [Scalar; FEATURE_DIM];

/// Decision level a policy acts at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Region-sequence allocation over the region graph.
    Global,
    /// Intra-region routing to a boundary edge or the destination.
    Local,
}

/// Trainable parameters of the softmax policy: one weight vector per level
/// plus a shared sampling temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta_global: FeatureVec,
    pub theta_local: FeatureVec,
    /// Softmax temperature, > 0.
    pub temperature: Scalar,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            theta_global: [0.0; FEATURE_DIM],
            theta_local: [0.0; FEATURE_DIM],
            temperature: 1.0,
        }
    }
}

impl PolicyParams {
    pub fn theta(&self, level: Level) -> &FeatureVec {
        match level {
            Level::Global => &self.theta_global,
            Level::Local => &self.theta_local,
        }
    }

    pub fn theta_mut(&mut self, level: Level) -> &mut FeatureVec {
        match level {
            Level::Global => &mut self.theta_global,
            Level::Local => &mut self.theta_local,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Which rule produced a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Greedy,
    Softmax,
    Llm,
}

/// Outcome of one candidate selection.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDecision {
    /// Index into the candidate set.
    pub index: usize,
    /// Log-probability of the choice under the acting policy; 0 for
    /// deterministic policies.
    pub log_prob: Scalar,
    /// Free-text justification, when the acting policy produced one.
    pub reasoning: Option<String>,
    /// The rule that actually made the choice (fallbacks report the
    /// fallback rule).
    pub policy: PolicyKind,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("cannot select from an empty candidate set")]
    EmptyCandidates,
    #[error("softmax temperature must be > 0, got {0}")]
    InvalidTemperature(Scalar),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

fn set_max(values: impl Iterator<Item = Scalar>) -> Scalar {
    values.fold(0.0, Scalar::max)
}

fn norm(value: Scalar, max: Scalar) -> Scalar {
    if max > 0.0 {
        value / max
    } else {
        0.0
    }
}

fn mean(values: impl ExactSizeIterator<Item = Scalar>) -> Scalar {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<Scalar>() / n as Scalar
    }
}

/// Features for region-sequence candidates: `[estimated travel time,
/// mean region congestion along the sequence, mean hotspot share along the
/// sequence, length in regions, 1.0]`, the first and fourth normalized by
/// the candidate-set maximum.
pub fn global_features(obs: &GlobalObservation, candidates: &[GlobalRoutePlan]) -> Vec<FeatureVec> {
    let max_cost = set_max(candidates.iter().map(|c| c.cost_s));
    let max_len = set_max(candidates.iter().map(|c| c.regions.len() as Scalar));
    candidates
        .iter()
        .map(|c| {
            let cong = mean(c.regions.iter().map(|&z| obs.regions[z].cong));
            let hot = mean(c.regions.iter().map(|&z| obs.hotspots[z]));
            [
                norm(c.cost_s, max_cost),
                cong,
                hot,
                norm(c.regions.len() as Scalar, max_len),
                1.0,
            ]
        })
        .collect()
}

/// Features for intra-region route candidates: `[free-flow time, mean edge
/// congestion along the route, active demand on the terminal boundary edge,
/// length in edges, 1.0]`, with time, demand, and length normalized by the
/// candidate-set maximum.
pub fn local_features(obs: &LocalObservation, candidates: &[LocalRoutePlan]) -> Vec<FeatureVec> {
    let cong_of: BTreeMap<_, _> = obs.edges.iter().map(|e| (e.edge, e.cong)).collect();
    let max_time = set_max(candidates.iter().map(|c| c.free_flow_s));
    let max_len = set_max(candidates.iter().map(|c| c.edges.len() as Scalar));
    let demands: Vec<Scalar> = candidates
        .iter()
        .map(|c| obs.demand_on(c.terminal_edge()) as Scalar)
        .collect();
    let max_demand = set_max(demands.iter().copied());
    candidates
        .iter()
        .zip(&demands)
        .map(|(c, &demand)| {
            let cong = mean(
                c.edges
                    .iter()
                    .map(|e| cong_of.get(e).copied().unwrap_or(0.0)),
            );
            [
                norm(c.free_flow_s, max_time),
                cong,
                norm(demand, max_demand),
                norm(c.edges.len() as Scalar, max_len),
                1.0,
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Greedy and softmax policies
// ---------------------------------------------------------------------------

/// Picks the candidate with the lowest estimated travel time; ties go to the
/// lowest index.
pub fn greedy_select(est_times_s: &[Scalar]) -> Result<PolicyDecision, PolicyError> {
    let mut best = match est_times_s.first() {
        Some(&t) => (0usize, t),
        None => return Err(PolicyError::EmptyCandidates),
    };
    for (i, &t) in est_times_s.iter().enumerate().skip(1) {
        if t < best.1 {
            best = (i, t);
        }
    }
    Ok(PolicyDecision {
        index: best.0,
        log_prob: 0.0,
        reasoning: None,
        policy: PolicyKind::Greedy,
    })
}

/// Numerically stable log-softmax: `x_i − (m + ln Σ exp(x_j − m))` with
/// `m = max_j x_j`. Empty input gives an empty result.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let Some(m) = logits
        .iter()
        .copied()
        .reduce(|a, b| if b > a { b } else { a })
    else {
        return Vec::new();
    };
    let sum = logits
        .iter()
        .map(|&x| (x - m).exp())
        .fold(T::zero(), |a, b| a + b);
    let lse = m + sum.ln();
    logits.iter().map(|&x| x - lse).collect()
}

fn feature_logits(theta: &FeatureVec, temperature: Scalar, features: &[FeatureVec]) -> Vec<Scalar> {
    features
        .iter()
        .map(|phi| {
            theta
                .iter()
                .zip(phi)
                .map(|(w, x)| w * x)
                .sum::<Scalar>()
                / temperature
        })
        .collect()
}

/// Exact log-probability of every candidate under the level's softmax.
pub fn candidate_log_probs(
    params: &PolicyParams,
    level: Level,
    features: &[FeatureVec],
) -> Result<Vec<Scalar>, PolicyError> {
    if features.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    if !(params.temperature > 0.0) {
        return Err(PolicyError::InvalidTemperature(params.temperature));
    }
    Ok(log_softmax(&feature_logits(
        params.theta(level),
        params.temperature,
        features,
    )))
}

/// Exact log-probability of one candidate under the level's softmax.
pub fn log_prob(
    params: &PolicyParams,
    level: Level,
    features: &[FeatureVec],
    index: usize,
) -> Result<Scalar, PolicyError> {
    Ok(candidate_log_probs(params, level, features)?[index])
}

/// Score function of the categorical softmax: `∇_θ ln π(index)` equals
/// `(φ_index − Σ_j p_j φ_j) / T`. The cooperative trainer builds its
/// analytic gradients from this.
pub fn score(
    params: &PolicyParams,
    level: Level,
    features: &[FeatureVec],
    index: usize,
) -> Result<FeatureVec, PolicyError> {
    let probs: Vec<Scalar> = candidate_log_probs(params, level, features)?
        .iter()
        .map(|lp| lp.exp())
        .collect();
    let mut expected = [0.0; FEATURE_DIM];
    for (phi, &p) in features.iter().zip(&probs) {
        for (e, x) in expected.iter_mut().zip(phi) {
            *e += p * x;
        }
    }
    let mut g = [0.0; FEATURE_DIM];
    for d in 0..FEATURE_DIM {
        g[d] = (features[index][d] - expected[d]) / params.temperature;
    }
    Ok(g)
}

/// Samples a candidate from the softmax distribution and records its exact
/// log-probability.
pub fn softmax_select(
    params: &PolicyParams,
    level: Level,
    features: &[FeatureVec],
    rng: &mut impl Rng,
) -> Result<PolicyDecision, PolicyError> {
    let log_probs = candidate_log_probs(params, level, features)?;
    let u: Scalar = rng.random();
    let mut acc = 0.0;
    let mut index = log_probs.len() - 1;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            index = i;
            break;
        }
    }
    Ok(PolicyDecision {
        index,
        log_prob: log_probs[index],
        reasoning: None,
        policy: PolicyKind::Softmax,
    })
}

// ---------------------------------------------------------------------------
// LLM endpoint policy
// ---------------------------------------------------------------------------

/// Endpoint and decoding configuration for the LLM policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Chat-completion endpoint URL.
    pub url: String,
    /// Bearer credential; sent as `Authorization: Bearer <key>` when set.
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: Scalar,
    pub top_p: Scalar,
    /// Per-request timeout in seconds.
    pub timeout_s: u64,
    /// Maximum concurrent in-flight requests for batched decisions.
    pub max_inflight: usize,
    /// Dot-separated path to the completion text inside the response JSON;
    /// numeric components index arrays.
    pub response_path: String,
    /// When true, ask for the reasoning and the choice in two separate
    /// requests instead of one combined completion.
    pub two_request: bool,
    /// Offline stub: when set, no HTTP is performed and every request
    /// returns this text verbatim.
    pub stub_response: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            model: "gpt-4o-mini".to_owned(),
            temperature: 0.1,
            top_p: 1.0,
            timeout_s: 30,
            max_inflight: 4,
            response_path: "choices.0.message.content".to_owned(),
            two_request: false,
            stub_response: None,
        }
    }
}

impl LlmConfig {
    /// Reads the endpoint URL from `CITYNAV_LLM_URL` (required) and the
    /// credential from `CITYNAV_LLM_KEY` (optional); everything else keeps
    /// its default.
    pub fn from_env() -> Result<Self, PolicyError> {
        let url =
            std::env::var("CITYNAV_LLM_URL").map_err(|_| PolicyError::MissingEnv("CITYNAV_LLM_URL"))?;
        Ok(Self {
            url,
            api_key: std::env::var("CITYNAV_LLM_KEY").ok(),
            ..Self::default()
        })
    }

    /// The transport this configuration calls for: the stub when
    /// `stub_response` is set, HTTP otherwise.
    pub fn transport(&self) -> Result<Box<dyn LlmTransport>, LlmError> {
        match &self.stub_response {
            Some(text) => Ok(Box::new(StubTransport::fixed(text))),
            None => Ok(Box::new(HttpTransport::new(self)?)),
        }
    }
}

/// One chat message in a completion request.
#[derive(Clone, Debug, Serialize)]
pub struct LlmMessage {
    pub role: &'static str,
    pub content: String,
}

impl LlmMessage {
    fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system",
            content: content.into(),
        }
    }

    fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user",
            content: content.into(),
        }
    }

    fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant",
            content: content.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP status {0}")]
    Status(u16),
    #[error("no completion text at response path `{0}`")]
    MalformedResponse(String),
    #[error("stub response script exhausted")]
    Exhausted,
}

/// A completion backend. Implementations must be shareable across the
/// bounded worker threads used for batched decisions.
pub trait LlmTransport: Send + Sync {
    fn complete(&self, config: &LlmConfig, messages: &[LlmMessage]) -> Result<String, LlmError>;
}

/// Blocking HTTP chat-completion client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(config: &LlmConfig) -> Result<Self, LlmError> {
        if config.url.is_empty() {
            return Err(LlmError::Transport(
                "no completion endpoint configured (set CITYNAV_LLM_URL or the llm url)".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl LlmTransport for HttpTransport {
    fn complete(&self, config: &LlmConfig, messages: &[LlmMessage]) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": config.model,
            "messages": messages,
            "temperature": config.temperature,
            "top_p": config.top_p,
        });
        let mut request = self.client.post(&config.url).json(&body);
        if let Some(key) = &config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(LlmError::Status(status.as_u16()));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        extract_path(&value, &config.response_path)
            .map(str::to_owned)
            .ok_or_else(|| LlmError::MalformedResponse(config.response_path.clone()))
    }
}

/// Walks a dot-separated path through a JSON value; numeric components index
/// arrays, everything else indexes objects.
pub fn extract_path<'v>(value: &'v serde_json::Value, path: &str) -> Option<&'v str> {
    let mut cur = value;
    for part in path.split('.') {
        cur = match part.parse::<usize>() {
            Ok(i) => cur.get(i)?,
            Err(_) => cur.get(part)?,
        };
    }
    cur.as_str()
}

/// Offline transport with fixed, scripted, or echoing responses.
pub struct StubTransport {
    mode: StubMode,
}

enum StubMode {
    Fixed(String),
    Scripted(Mutex<std::collections::VecDeque<String>>),
    /// Returns the last user message back; used to test request/response
    /// id matching.
    Echo,
}

impl StubTransport {
    /// Always answers with the same text.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            mode: StubMode::Fixed(text.into()),
        }
    }

    /// Answers with each text once, in order; further requests fail.
    pub fn scripted(responses: impl IntoIterator<Item = String>) -> Self {
        Self {
            mode: StubMode::Scripted(Mutex::new(responses.into_iter().collect())),
        }
    }

    /// Answers every request with its own last user message.
    pub fn echo() -> Self {
        Self {
            mode: StubMode::Echo,
        }
    }
}

impl LlmTransport for StubTransport {
    fn complete(&self, _config: &LlmConfig, messages: &[LlmMessage]) -> Result<String, LlmError> {
        match &self.mode {
            StubMode::Fixed(text) => Ok(text.clone()),
            StubMode::Scripted(queue) => queue
                .lock()
                .expect("stub script lock")
                .pop_front()
                .ok_or(LlmError::Exhausted),
            StubMode::Echo => messages
                .iter()
                .rev()
                .find(|m| m.role == "user")
                .map(|m| m.content.clone())
                .ok_or_else(|| LlmError::Transport("echo stub saw no user message".into())),
        }
    }
}

/// Runs many completions with at most `max_inflight` requests in flight at
/// once. Results are keyed by the caller's request id, never by arrival
/// order.
pub fn complete_many(
    transport: &dyn LlmTransport,
    config: &LlmConfig,
    requests: &[(u64, Vec<LlmMessage>)],
) -> BTreeMap<u64, Result<String, LlmError>> {
    let mut out = BTreeMap::new();
    for chunk in requests.chunks(config.max_inflight.max(1)) {
        let results: Vec<(u64, Result<String, LlmError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(id, messages)| {
                    let id = *id;
                    s.spawn(move || (id, transport.complete(config, messages)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("completion worker panicked"))
                .collect()
        });
        out.extend(results);
    }
    out
}

const SYSTEM_PROMPT: &str = "You coordinate vehicles in a city road network. Read the \
     observation, compare the numbered options, and answer in the exact format requested.";

/// Byte offset of the first ASCII-case-insensitive match; matches start at
/// an ASCII byte, so offsets are always char boundaries.
fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack
        .as_bytes()
        .windows(needle.len())
        .position(|w| w.eq_ignore_ascii_case(needle.as_bytes()))
}

fn rfind_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack
        .as_bytes()
        .windows(needle.len())
        .rposition(|w| w.eq_ignore_ascii_case(needle.as_bytes()))
}

/// Extracts a 1-based `CHOICE: <n>` answer (returned 0-based) and the text
/// after `REASONING:`, case-insensitively; `None` when no in-bounds choice
/// is present. The last `CHOICE:` in the text wins, so restated options in
/// the reasoning don't shadow the final answer.
pub fn parse_choice(text: &str, n_candidates: usize) -> Option<(usize, Option<String>)> {
    let at = rfind_ci(text, "choice:")?;
    let after = &text[at + "choice:".len()..];
    let digits: String = after
        .trim_start()
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    let n: usize = digits.parse().ok()?;
    if n < 1 || n > n_candidates {
        return None;
    }
    let reasoning = find_ci(text, "reasoning:").map(|r| {
        let body = &text[r + "reasoning:".len()..];
        // End at the winning (last) answer marker, so a choice restated
        // mid-reasoning stays part of the reasoning.
        let end = rfind_ci(body, "choice:").unwrap_or(body.len());
        body[..end].trim().to_owned()
    });
    Some((n - 1, reasoning))
}

/// One batched attempt: sends every item's request(s) with bounded
/// concurrency and parses the answers. Two-request mode runs a reasoning
/// round and then a choice round.
fn batch_attempt(
    transport: &dyn LlmTransport,
    config: &LlmConfig,
    items: &[(u64, &str, usize)],
) -> BTreeMap<u64, Result<(usize, Option<String>), String>> {
    let mut out = BTreeMap::new();
    if !config.two_request {
        let requests: Vec<(u64, Vec<LlmMessage>)> = items
            .iter()
            .map(|&(id, obs, _)| {
                (
                    id,
                    vec![
                        LlmMessage::system(SYSTEM_PROMPT),
                        LlmMessage::user(obs.to_owned()),
                    ],
                )
            })
            .collect();
        let responses = complete_many(transport, config, &requests);
        for &(id, _, n) in items {
            let outcome = match &responses[&id] {
                Ok(answer) => parse_choice(answer, n)
                    .ok_or_else(|| format!("unparseable choice: {answer:?}")),
                Err(e) => Err(e.to_string()),
            };
            out.insert(id, outcome);
        }
        return out;
    }

    // Round 1: reasoning only.
    let reason_requests: Vec<(u64, Vec<LlmMessage>)> = items
        .iter()
        .map(|&(id, obs, _)| {
            (
                id,
                vec![
                    LlmMessage::system(SYSTEM_PROMPT),
                    LlmMessage::user(format!("{obs}\nfirst reply with REASONING: <why> only")),
                ],
            )
        })
        .collect();
    let reasonings = complete_many(transport, config, &reason_requests);

    // Round 2: the choice, with the reasoning replayed as an assistant turn.
    let mut choice_requests = Vec::new();
    for &(id, obs, _) in items {
        match &reasonings[&id] {
            Ok(reasoning) => choice_requests.push((
                id,
                vec![
                    LlmMessage::system(SYSTEM_PROMPT),
                    LlmMessage::user(obs.to_owned()),
                    LlmMessage::assistant(reasoning.clone()),
                    LlmMessage::user("now reply with CHOICE: <option number> only".to_owned()),
                ],
            )),
            Err(e) => {
                out.insert(id, Err(e.to_string()));
            }
        }
    }
    let answers = complete_many(transport, config, &choice_requests);
    for &(id, _, n) in items {
        if out.contains_key(&id) {
            continue;
        }
        let outcome = match &answers[&id] {
            Ok(answer) => parse_choice(answer, n)
                .map(|(index, _)| {
                    let reasoning = reasonings[&id].as_ref().unwrap().trim().to_owned();
                    (index, Some(reasoning))
                })
                .ok_or_else(|| format!("unparseable choice: {answer:?}")),
            Err(e) => Err(e.to_string()),
        };
        out.insert(id, outcome);
    }
    out
}

/// Batched candidate selection over many decision points: every item gets
/// one retry, requests run with bounded concurrency, and items that still
/// fail fall back to the greedy rule with an incident line keyed by item id.
/// Items with an empty candidate set are skipped (also with an incident).
pub fn llm_select_batch(
    transport: &dyn LlmTransport,
    config: &LlmConfig,
    items: &[(u64, String, Vec<Scalar>)],
    incidents: &mut Vec<(u64, String)>,
) -> BTreeMap<u64, PolicyDecision> {
    let mut decisions = BTreeMap::new();
    let mut live: Vec<(u64, &str, usize)> = Vec::new();
    for (id, obs, est) in items {
        if est.is_empty() {
            incidents.push((*id, "llm selection skipped: empty candidate set".to_owned()));
        } else {
            live.push((*id, obs.as_str(), est.len()));
        }
    }
    let est_of = |id: u64| -> &[Scalar] {
        &items.iter().find(|(i, _, _)| *i == id).expect("known id").2
    };

    let mut failures: BTreeMap<u64, String> = BTreeMap::new();
    for round in 0..2 {
        if live.is_empty() {
            break;
        }
        let results = batch_attempt(transport, config, &live);
        let mut still: Vec<(u64, &str, usize)> = Vec::new();
        for item in live {
            match &results[&item.0] {
                Ok((index, reasoning)) => {
                    decisions.insert(
                        item.0,
                        PolicyDecision {
                            index: *index,
                            log_prob: 0.0,
                            reasoning: reasoning.clone(),
                            policy: PolicyKind::Llm,
                        },
                    );
                }
                Err(reason) => {
                    failures.insert(item.0, reason.clone());
                    if round == 0 {
                        still.push(item);
                    }
                }
            }
        }
        live = still;
    }
    for (id, reason) in failures {
        if decisions.contains_key(&id) {
            continue;
        }
        incidents.push((id, format!("llm fallback to greedy after retry: {reason}")));
        if let Ok(d) = greedy_select(est_of(id)) {
            decisions.insert(id, d);
        }
    }
    decisions
}

/// Asks the endpoint to pick a candidate from the serialized observation.
/// Malformed or failed responses are retried once; after that the greedy
/// rule decides and an incident line records why.
pub fn llm_select(
    transport: &dyn LlmTransport,
    config: &LlmConfig,
    observation: &str,
    est_times_s: &[Scalar],
    incidents: &mut Vec<String>,
) -> Result<PolicyDecision, PolicyError> {
    if est_times_s.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let items = [(0u64, observation.to_owned(), est_times_s.to_vec())];
    let mut keyed = Vec::new();
    let mut decisions = llm_select_batch(transport, config, &items, &mut keyed);
    incidents.extend(keyed.into_iter().map(|(_, m)| m));
    Ok(decisions.remove(&0).expect("single live item always resolves"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observe::{EdgeObservation, LocalObservation};
    use crate::netgraph::{EdgeId, NodeId};
    use crate::plan::NextRegion;
    use crate::rng::derive_rng;
    use approx::assert_relative_eq;

    fn params(theta: FeatureVec, temperature: Scalar) -> PolicyParams {
        PolicyParams {
            theta_global: theta,
            theta_local: theta,
            temperature,
        }
    }

    fn random_features(rng: &mut impl Rng, n: usize) -> Vec<FeatureVec> {
        (0..n)
            .map(|_| {
                let mut phi = [0.0; FEATURE_DIM];
                for x in phi.iter_mut().take(FEATURE_DIM - 1) {
                    *x = rng.random::<Scalar>();
                }
                phi[FEATURE_DIM - 1] = 1.0;
                phi
            })
            .collect()
    }

    fn random_theta(rng: &mut impl Rng) -> FeatureVec {
        let mut theta = [0.0; FEATURE_DIM];
        for w in theta.iter_mut() {
            *w = rng.random::<Scalar>() * 2.0 - 1.0;
        }
        theta
    }

    #[test]
    fn greedy_picks_minimum_time_with_low_index_ties() {
        assert_eq!(greedy_select(&[30.0, 20.0, 25.0]).unwrap().index, 1);
        assert_eq!(greedy_select(&[42.0]).unwrap().index, 0);
        assert_eq!(greedy_select(&[20.0, 20.0]).unwrap().index, 0);
        let d = greedy_select(&[5.0, 4.0]).unwrap();
        assert_eq!(d.log_prob, 0.0);
        assert_eq!(d.policy, PolicyKind::Greedy);
        assert!(matches!(
            greedy_select(&[]),
            Err(PolicyError::EmptyCandidates)
        ));
    }

    #[test]
    fn single_candidate_is_certain() {
        let p = params([0.3, -0.2, 0.0, 0.1, 0.0], 1.0);
        let phi = vec![[0.5, 0.5, 0.5, 0.5, 1.0]];
        let mut rng = derive_rng(1, "single");
        let d = softmax_select(&p, Level::Global, &phi, &mut rng).unwrap();
        assert_eq!(d.index, 0);
        assert_eq!(d.log_prob, 0.0);
        assert_eq!(log_prob(&p, Level::Global, &phi, 0).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_sample_uniformly() {
        let p = params([0.0; FEATURE_DIM], 1.0);
        let mut rng = derive_rng(7, "uniform-draws");
        let phi = random_features(&mut rng, 4);
        let mut counts = [0u32; 4];
        for _ in 0..10_000 {
            counts[softmax_select(&p, Level::Local, &phi, &mut rng).unwrap().index] += 1;
        }
        for &c in &counts {
            assert_relative_eq!(c as Scalar / 10_000.0, 0.25, epsilon = 0.02);
        }
    }

    #[test]
    fn two_candidate_logit_gap_matches_closed_form() {
        // θ·φ = [1, 0] at T = 1 → P(first) = e / (e + 1).
        let p = params([1.0, 0.0, 0.0, 0.0, 0.0], 1.0);
        let phi = vec![
            [1.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let expected = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert_relative_eq!(
            log_prob(&p, Level::Global, &phi, 0).unwrap().exp(),
            expected,
            epsilon = 1e-12
        );
        let mut rng = derive_rng(11, "closed-form-draws");
        let mut hits = 0u32;
        for _ in 0..10_000 {
            if softmax_select(&p, Level::Global, &phi, &mut rng).unwrap().index == 0 {
                hits += 1;
            }
        }
        assert_relative_eq!(hits as Scalar / 10_000.0, expected, epsilon = 0.02);
    }

    #[test]
    fn log_probs_are_exact_categorical_values() {
        let p = params([0.0; FEATURE_DIM], 1.0);
        let mut rng = derive_rng(3, "uniform-logprob");
        let phi = random_features(&mut rng, 4);
        // Zero weights: uniform over 4 regardless of features.
        assert_relative_eq!(
            log_prob(&p, Level::Global, &phi, 2).unwrap(),
            (1.0f64 / 4.0).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn probabilities_normalize_within_tolerance() {
        let mut rng = derive_rng(13, "normalization");
        for _ in 0..50 {
            let p = params(random_theta(&mut rng), 0.25 + rng.random::<Scalar>());
            let n = 1 + (rng.random::<u32>() % 8) as usize;
            let phi = random_features(&mut rng, n);
            let total: Scalar = candidate_log_probs(&p, Level::Local, &phi)
                .unwrap()
                .iter()
                .map(|lp| lp.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }

    #[test]
    fn sampled_log_probs_match_log_prob_exactly() {
        let mut rng = derive_rng(17, "crosscheck");
        for _ in 0..100 {
            let p = params(random_theta(&mut rng), 0.5 + rng.random::<Scalar>());
            let n = 1 + (rng.random::<u32>() % 6) as usize;
            let phi = random_features(&mut rng, n);
            let d = softmax_select(&p, Level::Global, &phi, &mut rng).unwrap();
            let lp = log_prob(&p, Level::Global, &phi, d.index).unwrap();
            assert_eq!(d.log_prob, lp);
            assert!(d.log_prob <= 0.0);
        }
    }

    #[test]
    fn near_zero_temperature_concentrates_on_the_argmax() {
        let mut rng = derive_rng(19, "argmax");
        for _ in 0..100 {
            let theta = random_theta(&mut rng);
            let p = params(theta, 1e-3);
            let n = 2 + (rng.random::<u32>() % 6) as usize;
            let phi = random_features(&mut rng, n);
            let scores: Vec<Scalar> = phi
                .iter()
                .map(|f| f.iter().zip(&theta).map(|(x, w)| x * w).sum())
                .collect();
            let argmax = (0..n)
                .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
                .unwrap();
            let lps = candidate_log_probs(&p, Level::Local, &phi).unwrap();
            let mode = (0..n)
                .max_by(|&a, &b| lps[a].partial_cmp(&lps[b]).unwrap())
                .unwrap();
            assert_eq!(mode, argmax);
        }
    }

    #[test]
    fn score_matches_finite_differences_and_centers() {
        let mut rng = derive_rng(23, "score-fd");
        for _ in 0..20 {
            let theta = random_theta(&mut rng);
            let p = params(theta, 0.5 + rng.random::<Scalar>());
            let n = 2 + (rng.random::<u32>() % 4) as usize;
            let phi = random_features(&mut rng, n);
            let idx = (rng.random::<u32>() as usize) % n;
            let g = score(&p, Level::Global, &phi, idx).unwrap();
            let h = 1e-6;
            for d in 0..FEATURE_DIM {
                let mut plus = p.clone();
                plus.theta_global[d] += h;
                let mut minus = p.clone();
                minus.theta_global[d] -= h;
                let fd = (log_prob(&plus, Level::Global, &phi, idx).unwrap()
                    - log_prob(&minus, Level::Global, &phi, idx).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(g[d], fd, epsilon = 1e-6, max_relative = 1e-4);
            }
            // E_π[score] = 0: the expected score over the distribution vanishes.
            let lps = candidate_log_probs(&p, Level::Global, &phi).unwrap();
            let mut mean_score = [0.0; FEATURE_DIM];
            for (i, lp) in lps.iter().enumerate() {
                let gi = score(&p, Level::Global, &phi, i).unwrap();
                for d in 0..FEATURE_DIM {
                    mean_score[d] += lp.exp() * gi[d];
                }
            }
            for v in mean_score {
                assert!(v.abs() < 1e-10, "uncentered score {v}");
            }
        }
    }

    #[test]
    fn invalid_temperature_is_rejected() {
        let p = params([0.0; FEATURE_DIM], 0.0);
        let phi = vec![[0.0, 0.0, 0.0, 0.0, 1.0]];
        assert!(matches!(
            candidate_log_probs(&p, Level::Global, &phi),
            Err(PolicyError::InvalidTemperature(_))
        ));
        assert!(matches!(
            candidate_log_probs(&PolicyParams::default(), Level::Global, &[]),
            Err(PolicyError::EmptyCandidates)
        ));
    }

    fn toy_local_obs() -> LocalObservation {
        LocalObservation {
            region: 0,
            at_node: NodeId(1),
            current_edge: None,
            next_region: NextRegion::Region(1),
            edges: vec![
                EdgeObservation {
                    edge: EdgeId(1),
                    cong: 0.4,
                    occ: 0.4,
                    tau_hat_s: 10.0,
                },
                EdgeObservation {
                    edge: EdgeId(2),
                    cong: 0.8,
                    occ: 0.8,
                    tau_hat_s: 20.0,
                },
                EdgeObservation {
                    edge: EdgeId(3),
                    cong: 0.0,
                    occ: 0.0,
                    tau_hat_s: 15.0,
                },
            ],
            boundary_demand: vec![(EdgeId(2), 4), (EdgeId(3), 1)],
        }
    }

    #[test]
    fn local_features_normalize_within_the_candidate_set() {
        let obs = toy_local_obs();
        let candidates = vec![
            LocalRoutePlan {
                edges: vec![EdgeId(1), EdgeId(2)],
                free_flow_s: 30.0,
            },
            LocalRoutePlan {
                edges: vec![EdgeId(3)],
                free_flow_s: 15.0,
            },
        ];
        let phi = local_features(&obs, &candidates);
        assert_eq!(phi.len(), 2);
        // Longest/slowest candidate pins the normalized maxima at 1.
        assert_relative_eq!(phi[0][0], 1.0);
        assert_relative_eq!(phi[0][1], 0.6); // mean(0.4, 0.8)
        assert_relative_eq!(phi[0][2], 1.0); // demand 4 is the set max
        assert_relative_eq!(phi[0][3], 1.0);
        assert_relative_eq!(phi[1][0], 0.5);
        assert_relative_eq!(phi[1][1], 0.0);
        assert_relative_eq!(phi[1][2], 0.25); // demand 1 / max 4
        assert_relative_eq!(phi[1][3], 0.5);
        for f in &phi {
            assert_eq!(f[4], 1.0);
            assert!(f.iter().all(|x| (0.0..=1.0).contains(x) && x.is_finite()));
        }
    }

    #[test]
    fn global_features_average_region_signals_along_the_plan() {
        use crate::mesosim::RegionAggregate;
        let obs = GlobalObservation {
            step: 0,
            bucket: 0,
            regions: vec![
                RegionAggregate { cong: 0.2, occ: 0.2, tau_bar_s: 10.0 },
                RegionAggregate { cong: 0.6, occ: 0.6, tau_bar_s: 20.0 },
                RegionAggregate { cong: 1.0, occ: 1.0, tau_bar_s: 30.0 },
            ],
            hotspots: vec![0.5, 0.25, 1.0],
            congested_edges: vec![],
        };
        let candidates = vec![
            GlobalRoutePlan { regions: vec![0, 1], cost_s: 30.0 },
            GlobalRoutePlan { regions: vec![0, 2], cost_s: 40.0 },
        ];
        let phi = global_features(&obs, &candidates);
        assert_relative_eq!(phi[0][0], 0.75);
        assert_relative_eq!(phi[0][1], 0.4); // mean(0.2, 0.6)
        assert_relative_eq!(phi[0][2], 0.375); // mean(0.5, 0.25)
        assert_relative_eq!(phi[0][3], 1.0);
        assert_relative_eq!(phi[1][0], 1.0);
        assert_relative_eq!(phi[1][1], 0.6); // mean(0.2, 1.0)
        assert_relative_eq!(phi[1][2], 0.75); // mean(0.5, 1.0)
        assert_eq!(phi[1][4], 1.0);
    }

    #[test]
    fn choice_parsing_handles_format_variants() {
        assert_eq!(parse_choice("CHOICE: 2", 3), Some((1, None)));
        assert_eq!(parse_choice("choice: 3", 3), Some((2, None)));
        assert_eq!(parse_choice("CHOICE: 7", 3), None);
        assert_eq!(parse_choice("CHOICE: 0", 3), None);
        assert_eq!(parse_choice("no answer here", 3), None);
        assert_eq!(parse_choice("CHOICE: abc", 3), None);
        let (i, why) = parse_choice(
            "REASONING: option 2 avoids the congested corridor\nCHOICE: 2",
            3,
        )
        .unwrap();
        assert_eq!(i, 1);
        assert_eq!(
            why.as_deref(),
            Some("option 2 avoids the congested corridor")
        );
        // The final answer wins over restated choices in the reasoning.
        assert_eq!(
            parse_choice("REASONING: CHOICE: 1 looked good, but CHOICE: 3", 3),
            Some((2, Some("CHOICE: 1 looked good, but".to_owned())))
        );
        // Non-ASCII reasoning must not break offset arithmetic.
        assert_eq!(
            parse_choice("REASONING: İstanbul boulevard is clear → CHOICE: 1", 2),
            Some((0, Some("İstanbul boulevard is clear →".to_owned())))
        );
    }

    #[test]
    fn stub_llm_choice_is_used_verbatim() {
        let cfg = LlmConfig::default();
        let stub = StubTransport::fixed("REASONING: shorter and clear CHOICE: 2");
        let mut incidents = Vec::new();
        let d = llm_select(&stub, &cfg, "obs", &[30.0, 20.0, 25.0], &mut incidents).unwrap();
        assert_eq!(d.index, 1);
        assert_eq!(d.policy, PolicyKind::Llm);
        assert_eq!(d.log_prob, 0.0);
        assert_eq!(d.reasoning.as_deref(), Some("shorter and clear"));
        assert!(incidents.is_empty());
    }

    #[test]
    fn malformed_response_is_retried_once() {
        let cfg = LlmConfig::default();
        let stub = StubTransport::scripted(["garbage".to_owned(), "CHOICE: 3".to_owned()]);
        let mut incidents = Vec::new();
        let d = llm_select(&stub, &cfg, "obs", &[30.0, 20.0, 25.0], &mut incidents).unwrap();
        assert_eq!(d.index, 2);
        assert_eq!(d.policy, PolicyKind::Llm);
        assert!(incidents.is_empty());
    }

    #[test]
    fn out_of_bounds_choice_falls_back_to_greedy() {
        let cfg = LlmConfig::default();
        let stub = StubTransport::fixed("CHOICE: 7");
        let mut incidents = Vec::new();
        let d = llm_select(&stub, &cfg, "obs", &[30.0, 20.0, 25.0], &mut incidents).unwrap();
        assert_eq!(d.index, 1); // argmin est time
        assert_eq!(d.policy, PolicyKind::Greedy);
        assert_eq!(incidents.len(), 1);
        assert!(incidents[0].contains("fallback"));
    }

    #[test]
    fn dead_endpoint_falls_back_to_greedy() {
        let cfg = LlmConfig::default();
        let stub = StubTransport::scripted(Vec::<String>::new());
        let mut incidents = Vec::new();
        let d = llm_select(&stub, &cfg, "obs", &[5.0, 9.0], &mut incidents).unwrap();
        assert_eq!(d.index, 0);
        assert_eq!(d.policy, PolicyKind::Greedy);
        assert_eq!(incidents.len(), 1);
        assert!(
            llm_select(&stub, &cfg, "obs", &[], &mut incidents).is_err(),
            "empty candidate set must error, not fall back"
        );
    }

    #[test]
    fn two_request_mode_keeps_the_first_reply_as_reasoning() {
        let cfg = LlmConfig {
            two_request: true,
            ..LlmConfig::default()
        };
        let stub = StubTransport::scripted([
            "the corridor through region 1 is clear".to_owned(),
            "CHOICE: 1".to_owned(),
        ]);
        let mut incidents = Vec::new();
        let d = llm_select(&stub, &cfg, "obs", &[30.0, 20.0], &mut incidents).unwrap();
        assert_eq!(d.index, 0);
        assert_eq!(
            d.reasoning.as_deref(),
            Some("the corridor through region 1 is clear")
        );
        assert!(incidents.is_empty());
    }

    #[test]
    fn batched_completions_match_responses_by_request_id() {
        let cfg = LlmConfig {
            max_inflight: 3,
            ..LlmConfig::default()
        };
        let stub = StubTransport::echo();
        let requests: Vec<(u64, Vec<LlmMessage>)> = (0..8)
            .map(|i| {
                (
                    100 + i,
                    vec![
                        LlmMessage::system(SYSTEM_PROMPT),
                        LlmMessage::user(format!("prompt-{i}")),
                    ],
                )
            })
            .collect();
        let results = complete_many(&stub, &cfg, &requests);
        assert_eq!(results.len(), 8);
        for i in 0..8u64 {
            assert_eq!(
                results[&(100 + i)].as_deref().unwrap(),
                format!("prompt-{i}")
            );
        }
    }

    #[test]
    fn response_path_walks_objects_and_arrays() {
        let v: serde_json::Value = serde_json::json!({
            "choices": [{"message": {"content": "CHOICE: 1"}}]
        });
        assert_eq!(
            extract_path(&v, "choices.0.message.content"),
            Some("CHOICE: 1")
        );
        assert_eq!(extract_path(&v, "choices.1.message.content"), None);
        assert_eq!(extract_path(&v, "missing"), None);
    }

    #[test]
    fn missing_url_env_is_an_error() {
        // The variable is unset in the test environment.
        std::env::remove_var("CITYNAV_LLM_URL");
        assert!(matches!(
            LlmConfig::from_env(),
            Err(PolicyError::MissingEnv("CITYNAV_LLM_URL"))
        ));
    }

    /// Minimal single-shot HTTP server: accepts one connection, captures the
    /// request, replies with the given JSON, and hands the request back.
    fn serve_once(response_json: &'static str) -> (String, std::thread::JoinHandle<String>) {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let (head_end, content_length) = loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    let head = String::from_utf8_lossy(&buf[..pos]).to_string();
                    let len = head
                        .lines()
                        .find_map(|l| {
                            let (name, value) = l.split_once(':')?;
                            name.eq_ignore_ascii_case("content-length")
                                .then(|| value.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    break (pos + 4, len);
                }
            };
            while buf.len() < head_end + content_length {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
            }
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                response_json.len(),
                response_json
            );
            stream.write_all(reply.as_bytes()).unwrap();
            String::from_utf8_lossy(&buf).to_string()
        });
        (url, handle)
    }

    #[test]
    fn http_transport_speaks_the_chat_completion_wire_format() {
        let (url, server) = serve_once(
            r#"{"choices":[{"message":{"content":"REASONING: loopback CHOICE: 2"}}]}"#,
        );
        let cfg = LlmConfig {
            url,
            api_key: Some("sekret".to_owned()),
            ..LlmConfig::default()
        };
        let transport = HttpTransport::new(&cfg).unwrap();
        let mut incidents = Vec::new();
        let d = llm_select(&transport, &cfg, "the observation", &[9.0, 8.0], &mut incidents)
            .unwrap();
        assert_eq!(d.index, 1);
        assert_eq!(d.reasoning.as_deref(), Some("loopback"));
        assert!(incidents.is_empty());

        let request = server.join().unwrap();
        assert!(request.contains("authorization: Bearer sekret") ||
                request.contains("Authorization: Bearer sekret"));
        let body = &request[request.find("\r\n\r\n").unwrap() + 4..];
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "gpt-4o-mini");
        assert_eq!(v["temperature"], 0.1);
        assert_eq!(v["top_p"], 1.0);
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["role"], "user");
        assert_eq!(v["messages"][1]["content"], "the observation");
    }
}
