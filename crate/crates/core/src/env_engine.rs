//! Episode engine: arrivals, policies, per-slot outcomes and episode metrics.
//!
//! [`Environment`] owns one episode and advances it one slot per
//! [`Environment::step`]. [`run_episode`] drives it with an in-process policy;
//! the bridge drives the same type with decoded external actions, so both
//! paths execute identical slot logic.
//!
//! Per slot: tasks arrive, the policy picks an [`OffloadProfile`], powers and
//! CPU shares are solved, and each edge is rewarded with its potential
//! contribution `r_e = r - r(without e)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{realize_slot, UplinkSet};
use crate::domain::{place_edges, stream_rng, EdgeNode, Point, ScenarioConfig, Stream, TaskSpec};
use crate::mobility::{build_coverage, CoverageIndex, SlotCoverage, TrajectorySet};
use crate::offload_game::{
    edge_distances, BrdOutcome, BrdParams, BrdTraceRow, GameError, OffloadProfile, SlotGame, SlotInstance,
};
use crate::power_alloc::PowerSolverParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("episode finished")]
    Done,
    #[error("expected actions for {expected} edges, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("edge {edge}: action width {got}, expected {expected}")]
    ActionWidth { edge: usize, expected: usize, got: usize },
    #[error(transparent)]
    Profile(#[from] GameError),
}

/// In-process offloading policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Best-response dynamics from the better of the two baselines.
    Game,
    /// Always migrate, to the least loaded foreign edge per unit CPU.
    Orm,
    /// Always execute at the origin edge.
    Orl,
    /// Uniform random target per task.
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [Self::Game, Self::Orm, Self::Orl, Self::Random];
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Game => "game",
            Self::Orm => "orm",
            Self::Orl => "orl",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown policy `{0}` (expected game, orm, orl or random)")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "game" => Ok(Self::Game),
            "orm" => Ok(Self::Orm),
            "orl" => Ok(Self::Orl),
            "random" => Ok(Self::Random),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

/// Solver settings used inside an episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvParams {
    pub power: PowerSolverParams,
    pub brd: BrdParams,
}

/// Tasks of one slot. Each covered vehicle spawns a task with probability
/// `arrival_prob`.
///
/// Every covered vehicle draws its arrival, size and deadline variates from
/// its own `(seed, slot, vehicle)` stream whether or not it spawns, so
/// raising `arrival_prob` only adds tasks.
pub fn arrivals(slot: usize, cov: &SlotCoverage, cfg: &ScenarioConfig, seed: u64) -> Vec<TaskSpec> {
    let [lo, hi] = cfg.task_size_bits_range;
    let [dlo, dhi] = cfg.deadline_s_range;
    let mut tasks = Vec::new();
    for (i, &v) in cov.vehicles.iter().enumerate() {
        let Some(origin) = cov.upload_edge[i] else { continue };
        let mut rng = stream_rng(seed, Stream::Arrivals, ((slot as u64) << 32) | v as u64);
        let (u_arrive, u_size, u_deadline): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        if u_arrive < cfg.arrival_prob {
            tasks.push(TaskSpec {
                id: tasks.len(),
                vehicle: v,
                birth_slot: slot,
                size_bits: lo + u_size * (hi - lo),
                cycles_per_bit: cfg.cycles_per_bit,
                deadline_s: dlo + u_deadline * (dhi - dlo),
                origin_edge: origin,
            });
        }
    }
    tasks
}

/// Fixed-width local observation of one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `[edge id, slot, (distance m, size bits, cycles, deadline s) * obs_cap]`.
    pub values: Vec<f64>,
    /// Which of the `obs_cap` task rows hold a real task.
    pub mask: Vec<bool>,
}

pub fn observation_width(obs_cap: usize) -> usize {
    2 + 4 * obs_cap
}

/// One slot's world state before any decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub slot: usize,
    pub tasks: Vec<TaskSpec>,
    /// Distance of each task's vehicle to its origin edge (m).
    pub task_distance: Vec<f64>,
    pub num_edges: usize,
}

impl Snapshot {
    pub fn new(slot: usize, cov: &SlotCoverage, cfg: &ScenarioConfig, seed: u64) -> Self {
        let tasks = arrivals(slot, cov, cfg, seed);
        let task_distance = tasks
            .iter()
            .map(|t| {
                let i = cov.vehicles.binary_search(&t.vehicle).expect("task vehicle is present");
                cov.dist[i][t.origin_edge]
            })
            .collect();
        Self {
            slot,
            tasks,
            task_distance,
            num_edges: cfg.num_edges,
        }
    }

    /// Task indices per origin edge, ascending.
    pub fn tasks_by_origin(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_edges];
        for (k, t) in self.tasks.iter().enumerate() {
            out[t.origin_edge].push(k);
        }
        out
    }

    pub fn observations(&self, obs_cap: usize) -> Vec<Observation> {
        self.tasks_by_origin()
            .iter()
            .enumerate()
            .map(|(e, list)| {
                let mut values = vec![0.0; observation_width(obs_cap)];
                values[0] = e as f64;
                values[1] = self.slot as f64;
                let mut mask = vec![false; obs_cap];
                for (i, &k) in list.iter().take(obs_cap).enumerate() {
                    let t = &self.tasks[k];
                    values[2 + 4 * i..6 + 4 * i].copy_from_slice(&[
                        self.task_distance[k],
                        t.size_bits,
                        t.cycles(),
                        t.deadline_s,
                    ]);
                    mask[i] = true;
                }
                Observation { values, mask }
            })
            .collect()
    }

    /// Decodes per-edge logits (`obs_cap` rows of `num_edges`) into a
    /// profile by per-task argmax, ties to the lowest edge id. Tasks beyond
    /// `obs_cap` run locally. Returns the profile and the overflow count.
    pub fn decode_actions(&self, actions: &[Vec<f64>], obs_cap: usize) -> Result<(OffloadProfile, usize), EnvError> {
        let ne = self.num_edges;
        if actions.len() != ne {
            return Err(EnvError::ActionCount {
                expected: ne,
                got: actions.len(),
            });
        }
        let width = obs_cap * ne;
        if let Some((edge, a)) = actions.iter().enumerate().find(|(_, a)| a.len() != width) {
            return Err(EnvError::ActionWidth {
                edge,
                expected: width,
                got: a.len(),
            });
        }
        let mut profile = OffloadProfile::local(&self.tasks);
        let mut overflow = 0;
        for (e, list) in self.tasks_by_origin().iter().enumerate() {
            for (i, &k) in list.iter().enumerate() {
                if i >= obs_cap {
                    overflow += 1;
                    continue;
                }
                profile.assign[k] = argmax(&actions[e][i * ne..(i + 1) * ne]);
            }
        }
        Ok((profile, overflow))
    }
}

/// Index of the largest value; ties and NaNs resolve to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] || row[best].is_nan() && !x.is_nan() {
            best = i;
        }
    }
    best
}

/// Baseline: every task migrates to the foreign edge with the largest
/// `c_e / (tasks already sent there + 1)`, ties to the lower id. With one
/// edge, tasks stay local.
pub fn baseline_orm(tasks: &[TaskSpec], cpu_hz: &[f64]) -> OffloadProfile {
    let ne = cpu_hz.len();
    let mut load = vec![0usize; ne];
    let assign = tasks
        .iter()
        .map(|t| {
            let target = (0..ne)
                .filter(|&e| e != t.origin_edge || ne == 1)
                .fold(None, |best: Option<usize>, e| match best {
                    Some(b) if cpu_hz[b] / (load[b] + 1) as f64 >= cpu_hz[e] / (load[e] + 1) as f64 => Some(b),
                    _ => Some(e),
                })
                .unwrap_or(t.origin_edge);
            load[target] += 1;
            target
        })
        .collect();
    OffloadProfile::new(assign)
}

pub fn baseline_orl(tasks: &[TaskSpec]) -> OffloadProfile {
    OffloadProfile::local(tasks)
}

pub fn baseline_random(tasks: &[TaskSpec], num_edges: usize, seed: u64, slot: usize) -> OffloadProfile {
    let mut rng = stream_rng(seed, Stream::RandomPolicy, slot as u64);
    OffloadProfile::new(tasks.iter().map(|_| rng.random_range(0..num_edges)).collect())
}

/// Runs `policy` on one slot. The game policy starts from whichever of the
/// ORL and ORM profiles has the higher utility (ORL on ties).
pub fn choose_profile(
    policy: PolicyKind,
    game: &SlotGame,
    seed: u64,
    brd: &BrdParams,
) -> (OffloadProfile, Option<BrdOutcome>) {
    let tasks = game.tasks();
    let inst = game.instance();
    match policy {
        PolicyKind::Orl => (baseline_orl(tasks), None),
        PolicyKind::Orm => (baseline_orm(tasks, &inst.cpu_hz), None),
        PolicyKind::Random => (baseline_random(tasks, inst.num_edges(), seed, inst.slot), None),
        PolicyKind::Game => {
            let orl = baseline_orl(tasks);
            let orm = baseline_orm(tasks, &inst.cpu_hz);
            let init = if game.utility(&orm.assign) > game.utility(&orl.assign) {
                orm
            } else {
                orl
            };
            let out = game.best_response_dynamics(&init, brd);
            (out.profile.clone(), Some(out))
        }
    }
}

/// Outcome of one executed slot. Task vectors follow the slot's task list,
/// edge vectors the edge ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub slot: usize,
    pub task_origin: Vec<usize>,
    pub task_target: Vec<usize>,
    /// Upload time `m` (s).
    pub upload_s: Vec<f64>,
    /// Processing time `n` (s), wired migration included.
    pub processing_s: Vec<f64>,
    /// Service time `psi = m + n` (s).
    pub service_s: Vec<f64>,
    pub served: Vec<bool>,
    /// Service ratio `Psi_e`.
    pub edge_ratio: Vec<f64>,
    /// `r_e = r - reward_without[e]`.
    pub edge_reward: Vec<f64>,
    /// System reward with edge `e` voided.
    pub reward_without: Vec<f64>,
    /// System reward `r = sum_e Psi_e`.
    pub reward: f64,
    pub k_total: usize,
    pub k_local: usize,
    pub k_migrated: usize,
    pub k_serviced: usize,
    /// Tasks beyond the observation cap, forced local by action decoding.
    pub overflow: usize,
}

/// Builds the game instance of a slot from the world state.
pub fn slot_instance(
    snapshot: &Snapshot,
    cov: &SlotCoverage,
    edges: &[EdgeNode],
    edge_dist: &[Vec<f64>],
    cfg: &ScenarioConfig,
    seed: u64,
) -> SlotInstance {
    let chan = realize_slot(cov, cfg, seed, snapshot.slot);
    let tasks = snapshot.tasks.clone();
    let uplinks = UplinkSet {
        vehicle: tasks.iter().map(|t| t.vehicle).collect(),
        origin: tasks.iter().map(|t| t.origin_edge).collect(),
        gain2: tasks
            .iter()
            .map(|t| {
                let i = chan.vehicles.binary_search(&t.vehicle).expect("task vehicle is present");
                chan.gain2[i].clone()
            })
            .collect(),
        max_power_mw: edges.iter().map(|e| e.max_power_mw).collect(),
        bandwidth_hz: cfg.bandwidth_hz,
        noise_mw: cfg.noise_mw,
    };
    SlotInstance {
        slot: snapshot.slot,
        tasks,
        uplinks,
        cpu_hz: edges.iter().map(|e| e.cpu_hz).collect(),
        edge_dist: edge_dist.to_vec(),
        discount_per_m: cfg.distance_discount_per_m,
        wired_rate_bps: cfg.wired_rate_bps,
    }
}

/// Executes `profile` on a solved slot.
pub fn execute_slot(game: &SlotGame, profile: &OffloadProfile, overflow: usize) -> Result<SlotOutcome, EnvError> {
    game.validate(profile)?;
    let eval = game.evaluate(profile);
    let tasks = game.tasks();
    let k_local = tasks
        .iter()
        .zip(&profile.assign)
        .filter(|(t, &to)| t.origin_edge == to)
        .count();
    Ok(SlotOutcome {
        slot: game.instance().slot,
        task_origin: tasks.iter().map(|t| t.origin_edge).collect(),
        task_target: profile.assign.clone(),
        upload_s: eval.times.upload_s,
        processing_s: eval.times.processing_s,
        service_s: eval.times.service_s,
        k_serviced: eval.times.served.iter().filter(|&&s| s).count(),
        served: eval.times.served,
        edge_ratio: eval.per_edge_ratio,
        edge_reward: eval.per_edge_potential_gain,
        reward_without: eval.void_utility,
        reward: eval.utility,
        k_total: tasks.len(),
        k_local,
        k_migrated: tasks.len() - k_local,
        overflow,
    })
}

/// Aggregate metrics of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub slots: usize,
    /// Mean `Psi_e` over (slot, edge) pairs with at least one request.
    pub asr: f64,
    /// Cumulative reward `sum_t r^t`.
    pub cr: f64,
    /// `(1/E) sum_t sum_e r_e^t`.
    pub aap: f64,
    /// Mean service time over all tasks (s).
    pub ast: f64,
    /// Mean processing time over all tasks (s).
    pub apt: f64,
    pub p_local: f64,
    pub p_migrated: f64,
    pub k_total: usize,
    pub k_serviced: usize,
    /// No task arrived; `asr` is reported as 1.
    pub no_arrivals: bool,
    /// Count of edge rewards below zero.
    pub negative_rewards: usize,
    pub min_edge_reward: f64,
    /// The episode stopped before its horizon.
    pub aborted: bool,
}

pub fn episode_metrics(outcomes: &[SlotOutcome], num_edges: usize, aborted: bool) -> EpisodeMetrics {
    let mut ratio_sum = 0.0;
    let mut ratio_pairs = 0usize;
    let mut cr = 0.0;
    let mut reward_sum = 0.0;
    let mut negative_rewards = 0;
    let mut min_edge_reward = f64::INFINITY;
    let (mut service, mut processing) = (0.0, 0.0);
    let (mut k_total, mut k_local, mut k_serviced) = (0, 0, 0);
    for o in outcomes {
        let mut requests = vec![0usize; num_edges];
        for &e in &o.task_origin {
            requests[e] += 1;
        }
        for e in 0..num_edges {
            if requests[e] > 0 {
                ratio_sum += o.edge_ratio[e];
                ratio_pairs += 1;
            }
        }
        cr += o.reward;
        for &r in &o.edge_reward {
            reward_sum += r;
            min_edge_reward = min_edge_reward.min(r);
            if r < 0.0 {
                negative_rewards += 1;
            }
        }
        service += o.service_s.iter().sum::<f64>();
        processing += o.processing_s.iter().sum::<f64>();
        k_total += o.k_total;
        k_local += o.k_local;
        k_serviced += o.k_serviced;
    }
    let per_task = |sum: f64| if k_total > 0 { sum / k_total as f64 } else { 0.0 };
    let p_local = if k_total > 0 { k_local as f64 / k_total as f64 } else { 0.0 };
    EpisodeMetrics {
        slots: outcomes.len(),
        asr: if ratio_pairs > 0 {
            ratio_sum / ratio_pairs as f64
        } else {
            1.0
        },
        cr,
        aap: reward_sum / num_edges as f64,
        ast: per_task(service),
        apt: per_task(processing),
        p_local,
        p_migrated: if k_total > 0 { 1.0 - p_local } else { 0.0 },
        k_total,
        k_serviced,
        no_arrivals: k_total == 0,
        negative_rewards,
        min_edge_reward: if min_edge_reward.is_finite() { min_edge_reward } else { 0.0 },
        aborted,
    }
}

/// One episode over a fixed trajectory set.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: ScenarioConfig,
    params: EnvParams,
    seed: u64,
    edges: Vec<EdgeNode>,
    edge_dist: Vec<Vec<f64>>,
    coverage: CoverageIndex,
    horizon: usize,
    slot: usize,
    snapshot: Option<Snapshot>,
    game: Option<SlotGame>,
    outcomes: Vec<SlotOutcome>,
}

impl Environment {
    /// Episode over `traj` with edge CPUs, fading, arrivals and random
    /// choices all derived from `seed`.
    pub fn new(cfg: &ScenarioConfig, traj: &TrajectorySet, seed: u64, params: EnvParams) -> Self {
        let edges = place_edges(cfg, seed);
        let locations: Vec<Point> = edges.iter().map(|e| e.location).collect();
        let coverage = build_coverage(traj, &edges);
        let horizon = cfg.horizon_slots.min(traj.slot_count);
        let mut env = Self {
            cfg: cfg.clone(),
            params,
            seed,
            edge_dist: edge_distances(&locations),
            edges,
            coverage,
            horizon,
            slot: 0,
            snapshot: None,
            game: None,
            outcomes: Vec::new(),
        };
        env.reset();
        env
    }

    /// Restarts the episode at slot 0 and returns its observations.
    pub fn reset(&mut self) -> Vec<Observation> {
        self.slot = 0;
        self.outcomes.clear();
        self.load_slot();
        self.observations()
    }

    fn load_slot(&mut self) {
        self.game = None;
        self.snapshot = self
            .coverage
            .slot(self.slot)
            .filter(|_| self.slot < self.horizon)
            .map(|cov| Snapshot::new(self.slot, cov, &self.cfg, self.seed));
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn edges(&self) -> &[EdgeNode] {
        &self.edges
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Index of the next slot to run.
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn done(&self) -> bool {
        self.snapshot.is_none()
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    /// Observations of the next slot; empty once the episode is done.
    pub fn observations(&self) -> Vec<Observation> {
        self.snapshot
            .as_ref()
            .map(|s| s.observations(self.cfg.obs_cap))
            .unwrap_or_default()
    }

    /// The solved game of the next slot.
    pub fn game(&mut self) -> Result<&SlotGame, EnvError> {
        if self.game.is_none() {
            let snap = self.snapshot.as_ref().ok_or(EnvError::Done)?;
            let cov = self.coverage.slot(self.slot).ok_or(EnvError::Done)?;
            let inst = slot_instance(snap, cov, &self.edges, &self.edge_dist, &self.cfg, self.seed);
            self.game = Some(SlotGame::new(inst, &self.params.power));
        }
        Ok(self.game.as_ref().expect("game was just built"))
    }

    /// Executes `profile` on the next slot and advances.
    pub fn step(&mut self, profile: &OffloadProfile) -> Result<SlotOutcome, EnvError> {
        self.step_with_overflow(profile, 0)
    }

    /// Decodes external logits and executes them on the next slot.
    pub fn step_actions(&mut self, actions: &[Vec<f64>]) -> Result<SlotOutcome, EnvError> {
        let snap = self.snapshot.as_ref().ok_or(EnvError::Done)?;
        let (profile, overflow) = snap.decode_actions(actions, self.cfg.obs_cap)?;
        if overflow > 0 {
            log::info!("slot {}: {overflow} tasks beyond the observation cap run locally", self.slot);
        }
        self.step_with_overflow(&profile, overflow)
    }

    fn step_with_overflow(&mut self, profile: &OffloadProfile, overflow: usize) -> Result<SlotOutcome, EnvError> {
        let outcome = execute_slot(self.game()?, profile, overflow)?;
        self.outcomes.push(outcome.clone());
        self.slot += 1;
        self.load_slot();
        Ok(outcome)
    }

    pub fn outcomes(&self) -> &[SlotOutcome] {
        &self.outcomes
    }

    /// Metrics over the slots run so far; flagged as aborted before the end.
    pub fn metrics(&self) -> EpisodeMetrics {
        episode_metrics(&self.outcomes, self.edges.len(), !self.done())
    }
}

/// A finished episode with its slot stream and dynamics trace.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub metrics: EpisodeMetrics,
    pub outcomes: Vec<SlotOutcome>,
    /// `(slot, row)` for every edge turn of the game policy's dynamics.
    pub trace: Vec<(usize, BrdTraceRow)>,
}

pub fn run_episode(policy: PolicyKind, cfg: &ScenarioConfig, traj: &TrajectorySet, seed: u64, params: &EnvParams) -> EpisodeRun {
    let mut env = Environment::new(cfg, traj, seed, params.clone());
    let mut trace = Vec::new();
    while !env.done() {
        let slot = env.slot();
        let game = env.game().expect("episode is running");
        let (profile, brd) = choose_profile(policy, game, seed, &params.brd);
        if let Some(out) = brd {
            trace.extend(out.trace.into_iter().map(|row| (slot, row)));
        }
        env.step(&profile).expect("policy profiles are valid");
    }
    EpisodeRun {
        metrics: env.metrics(),
        outcomes: env.outcomes().to_vec(),
        trace,
    }
}

pub const METRICS_SCHEMA: &str = "# vecsim metrics v1";

#[derive(Debug, Error)]
pub enum MetricsCsvError {
    #[error("missing schema header `{METRICS_SCHEMA}`")]
    Schema,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
}

/// One line of the metrics CSV: `kind` is `slot` or `summary`; the columns
/// of the other kind stay empty. Vectors are `;`-joined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct MetricsRow {
    kind: String,
    slot: Option<usize>,
    reward: Option<f64>,
    k_total: Option<usize>,
    k_local: Option<usize>,
    k_migrated: Option<usize>,
    k_serviced: Option<usize>,
    overflow: Option<usize>,
    edge_ratio: String,
    edge_reward: String,
    reward_without: String,
    task_origin: String,
    task_target: String,
    task_upload_s: String,
    task_processing_s: String,
    task_service_s: String,
    task_served: String,
    slots: Option<usize>,
    asr: Option<f64>,
    cr: Option<f64>,
    aap: Option<f64>,
    ast: Option<f64>,
    apt: Option<f64>,
    p_local: Option<f64>,
    p_migrated: Option<f64>,
    no_arrivals: Option<bool>,
    negative_rewards: Option<usize>,
    min_edge_reward: Option<f64>,
    aborted: Option<bool>,
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn split<T: FromStr>(s: &str, row: usize, col: &str) -> Result<Vec<T>, MetricsCsvError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| {
            x.parse().map_err(|_| MetricsCsvError::Malformed {
                row,
                reason: format!("{col}: cannot parse `{x}`"),
            })
        })
        .collect()
}

/// Renders one episode as CSV: a schema comment, one row per slot and a
/// summary row. Floats use the shortest text that parses back exactly.
pub fn write_metrics_csv(outcomes: &[SlotOutcome], metrics: &EpisodeMetrics) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for o in outcomes {
        w.serialize(MetricsRow {
            kind: "slot".into(),
            slot: Some(o.slot),
            reward: Some(o.reward),
            k_total: Some(o.k_total),
            k_local: Some(o.k_local),
            k_migrated: Some(o.k_migrated),
            k_serviced: Some(o.k_serviced),
            overflow: Some(o.overflow),
            edge_ratio: join(&o.edge_ratio),
            edge_reward: join(&o.edge_reward),
            reward_without: join(&o.reward_without),
            task_origin: join(&o.task_origin),
            task_target: join(&o.task_target),
            task_upload_s: join(&o.upload_s),
            task_processing_s: join(&o.processing_s),
            task_service_s: join(&o.service_s),
            task_served: join(&o.served),
            ..MetricsRow::default()
        })
        .expect("writing to memory");
    }
    let m = metrics;
    w.serialize(MetricsRow {
        kind: "summary".into(),
        slots: Some(m.slots),
        asr: Some(m.asr),
        cr: Some(m.cr),
        aap: Some(m.aap),
        ast: Some(m.ast),
        apt: Some(m.apt),
        p_local: Some(m.p_local),
        p_migrated: Some(m.p_migrated),
        k_total: Some(m.k_total),
        k_serviced: Some(m.k_serviced),
        no_arrivals: Some(m.no_arrivals),
        negative_rewards: Some(m.negative_rewards),
        min_edge_reward: Some(m.min_edge_reward),
        aborted: Some(m.aborted),
        ..MetricsRow::default()
    })
    .expect("writing to memory");
    let body = String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8");
    format!("{METRICS_SCHEMA}\n{body}")
}

/// Parses what [`write_metrics_csv`] wrote.
pub fn read_metrics_csv(text: &str) -> Result<(Vec<SlotOutcome>, EpisodeMetrics), MetricsCsvError> {
    if text.lines().next() != Some(METRICS_SCHEMA) {
        return Err(MetricsCsvError::Schema);
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut outcomes = Vec::new();
    let mut summary = None;
    for (i, row) in reader.deserialize::<MetricsRow>().enumerate() {
        let r = row?;
        let missing = |col: &str| MetricsCsvError::Malformed {
            row: i,
            reason: format!("missing {col}"),
        };
        match r.kind.as_str() {
            "slot" => outcomes.push(SlotOutcome {
                slot: r.slot.ok_or_else(|| missing("slot"))?,
                task_origin: split(&r.task_origin, i, "task_origin")?,
                task_target: split(&r.task_target, i, "task_target")?,
                upload_s: split(&r.task_upload_s, i, "task_upload_s")?,
                processing_s: split(&r.task_processing_s, i, "task_processing_s")?,
                service_s: split(&r.task_service_s, i, "task_service_s")?,
                served: split(&r.task_served, i, "task_served")?,
                edge_ratio: split(&r.edge_ratio, i, "edge_ratio")?,
                edge_reward: split(&r.edge_reward, i, "edge_reward")?,
                reward_without: split(&r.reward_without, i, "reward_without")?,
                reward: r.reward.ok_or_else(|| missing("reward"))?,
                k_total: r.k_total.ok_or_else(|| missing("k_total"))?,
                k_local: r.k_local.ok_or_else(|| missing("k_local"))?,
                k_migrated: r.k_migrated.ok_or_else(|| missing("k_migrated"))?,
                k_serviced: r.k_serviced.ok_or_else(|| missing("k_serviced"))?,
                overflow: r.overflow.ok_or_else(|| missing("overflow"))?,
            }),
            "summary" => {
                summary = Some(EpisodeMetrics {
                    slots: r.slots.ok_or_else(|| missing("slots"))?,
                    asr: r.asr.ok_or_else(|| missing("asr"))?,
                    cr: r.cr.ok_or_else(|| missing("cr"))?,
                    aap: r.aap.ok_or_else(|| missing("aap"))?,
                    ast: r.ast.ok_or_else(|| missing("ast"))?,
                    apt: r.apt.ok_or_else(|| missing("apt"))?,
                    p_local: r.p_local.ok_or_else(|| missing("p_local"))?,
                    p_migrated: r.p_migrated.ok_or_else(|| missing("p_migrated"))?,
                    k_total: r.k_total.ok_or_else(|| missing("k_total"))?,
                    k_serviced: r.k_serviced.ok_or_else(|| missing("k_serviced"))?,
                    no_arrivals: r.no_arrivals.ok_or_else(|| missing("no_arrivals"))?,
                    negative_rewards: r.negative_rewards.ok_or_else(|| missing("negative_rewards"))?,
                    min_edge_reward: r.min_edge_reward.ok_or_else(|| missing("min_edge_reward"))?,
                    aborted: r.aborted.ok_or_else(|| missing("aborted"))?,
                })
            }
            other => {
                return Err(MetricsCsvError::Malformed {
                    row: i,
                    reason: format!("unknown kind `{other}`"),
                })
            }
        }
    }
    let summary = summary.ok_or(MetricsCsvError::Malformed {
        row: outcomes.len(),
        reason: "no summary row".into(),
    })?;
    Ok((outcomes, summary))
}

/// Dynamics trace of an episode as CSV.
pub fn write_trace_csv(trace: &[(usize, BrdTraceRow)]) -> String {
    let mut out = format!("slot,{}\n", crate::offload_game::BRD_TRACE_HEADER);
    for (slot, row) in trace {
        out.push_str(&format!("{slot},{}\n", row.to_csv_line()));
    }
    out
}

/// Parses what [`write_trace_csv`] wrote.
pub fn read_trace_csv(text: &str) -> Result<Vec<(usize, BrdTraceRow)>, MetricsCsvError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<(usize, usize, usize, bool, f64, f64)>()
        .map(|row| {
            let (slot, sweep, edge, moved, u_before, u_after) = row?;
            Ok((
                slot,
                BrdTraceRow {
                    sweep,
                    edge,
                    moved,
                    u_before,
                    u_after,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::synth_trace;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            horizon_slots: 12,
            num_vehicles: 20,
            ..ScenarioConfig::default().with_grid(2, 2)
        }
    }

    fn world(cfg: &ScenarioConfig, seed: u64) -> TrajectorySet {
        synth_trace(cfg, cfg.num_vehicles, seed)
    }

    fn coverage_slot(vehicles: usize) -> SlotCoverage {
        SlotCoverage {
            vehicles: (0..vehicles).collect(),
            positions: vec![Point::new(0.0, 0.0); vehicles],
            dist: vec![vec![100.0]; vehicles],
            covered: vec![(0..vehicles).collect()],
            upload_edge: vec![Some(0); vehicles],
        }
    }

    #[test]
    fn arrival_extremes() {
        let cov = coverage_slot(5);
        let never = ScenarioConfig {
            arrival_prob: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(arrivals(0, &cov, &never, 1).is_empty());
        let always = ScenarioConfig {
            arrival_prob: 1.0,
            ..ScenarioConfig::default()
        };
        let tasks = arrivals(0, &cov, &always, 1);
        assert_eq!(tasks.len(), 5);
        for t in &tasks {
            assert!((8e4..=4e7).contains(&t.size_bits));
            assert!((5.0..=10.0).contains(&t.deadline_s));
        }
    }

    #[test]
    fn arrival_rate_is_binomial() {
        let cov = coverage_slot(100);
        let cfg = ScenarioConfig::default();
        let count: usize = (0..100).map(|t| arrivals(t, &cov, &cfg, 42).len()).sum();
        // 10,000 trials at p = 0.5: sigma = 50.
        assert!((count as f64 - 5000.0).abs() <= 150.0, "{count}");
    }

    #[test]
    fn arrivals_are_nested_in_probability() {
        let cov = coverage_slot(50);
        let lo = ScenarioConfig {
            arrival_prob: 0.3,
            ..ScenarioConfig::default()
        };
        let hi = ScenarioConfig {
            arrival_prob: 0.7,
            ..ScenarioConfig::default()
        };
        let a: Vec<(usize, f64)> = arrivals(3, &cov, &lo, 9).iter().map(|t| (t.vehicle, t.size_bits)).collect();
        let b: Vec<(usize, f64)> = arrivals(3, &cov, &hi, 9).iter().map(|t| (t.vehicle, t.size_bits)).collect();
        assert!(a.iter().all(|x| b.contains(x)));
    }

    #[test]
    fn observation_layout_and_decode() {
        let cfg = ScenarioConfig {
            arrival_prob: 1.0,
            ..ScenarioConfig::default().with_grid(1, 1)
        };
        let snap = Snapshot::new(4, &coverage_slot(12), &cfg, 0);
        let obs = snap.observations(10);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].values.len(), observation_width(10));
        assert_eq!(obs[0].values[..2], [0.0, 4.0]);
        assert_eq!(obs[0].values[2], 100.0);
        assert!(obs[0].mask.iter().all(|&m| m));

        let (profile, overflow) = snap.decode_actions(&[vec![0.0; 10]], 10).unwrap();
        assert_eq!(overflow, 2);
        assert!(profile.assign.iter().all(|&e| e == 0));
        assert!(matches!(
            snap.decode_actions(&[vec![0.0; 9]], 10),
            Err(EnvError::ActionWidth { edge: 0, expected: 10, got: 9 })
        ));
        assert!(matches!(snap.decode_actions(&[], 10), Err(EnvError::ActionCount { .. })));
    }

    #[test]
    fn masked_rows_are_zero() {
        let cfg = ScenarioConfig {
            arrival_prob: 1.0,
            ..ScenarioConfig::default().with_grid(1, 1)
        };
        let snap = Snapshot::new(0, &coverage_slot(3), &cfg, 0);
        let obs = &snap.observations(10)[0];
        assert_eq!(obs.mask.iter().filter(|&&m| m).count(), 3);
        assert!(obs.values[2 + 4 * 3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[f64::NAN, -1.0]), 1);
    }

    #[test]
    fn orm_prefers_capacity_and_never_stays() {
        let task = |origin_edge| TaskSpec {
            id: 0,
            vehicle: 0,
            birth_slot: 0,
            size_bits: 1e6,
            cycles_per_bit: 500.0,
            deadline_s: 5.0,
            origin_edge,
        };
        let tasks = vec![task(0), task(0), task(0), task(2)];
        let p = baseline_orm(&tasks, &[9e9, 6e9, 4e9]);
        // 6/1 > 4/1, then 4/1 > 6/2, then 6/2 > 4/2; edge 2 goes to 0.
        assert_eq!(p.assign, vec![1, 2, 1, 0]);
        assert_eq!(baseline_orm(&[task(0)], &[1e9]).assign, vec![0]);
    }

    #[test]
    fn policy_names() {
        for p in PolicyKind::ALL {
            assert_eq!(p.to_string().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("d4pg".parse::<PolicyKind>().unwrap_err().to_string().contains("unknown policy"));
    }

    #[test]
    fn zero_arrivals_report_vacuous_ratio() {
        let cfg = ScenarioConfig {
            arrival_prob: 0.0,
            ..small_cfg()
        };
        let run = run_episode(PolicyKind::Game, &cfg, &world(&cfg, 1), 1, &EnvParams::default());
        assert_eq!(run.metrics.asr, 1.0);
        assert!(run.metrics.no_arrivals);
        assert_eq!(run.metrics.cr, 4.0 * 12.0);
    }

    #[test]
    fn single_edge_game_matches_local() {
        let cfg = ScenarioConfig {
            horizon_slots: 8,
            ..ScenarioConfig::default().with_grid(1, 1)
        };
        let traj = world(&cfg, 2);
        let game = run_episode(PolicyKind::Game, &cfg, &traj, 2, &EnvParams::default());
        let orl = run_episode(PolicyKind::Orl, &cfg, &traj, 2, &EnvParams::default());
        assert_eq!(game.metrics, orl.metrics);
        assert_eq!(game.outcomes, orl.outcomes);
    }

    #[test]
    fn slot_outcome_invariants() {
        let cfg = small_cfg();
        let run = run_episode(PolicyKind::Random, &cfg, &world(&cfg, 4), 4, &EnvParams::default());
        assert_eq!(run.outcomes.len(), 12);
        for o in &run.outcomes {
            assert_eq!(o.k_local + o.k_migrated, o.k_total);
            assert_eq!(o.reward, o.edge_ratio.iter().sum::<f64>());
            for e in 0..4 {
                assert_eq!(o.edge_reward[e], o.reward - o.reward_without[e]);
            }
            for k in 0..o.k_total {
                assert_eq!(o.service_s[k], o.upload_s[k] + o.processing_s[k]);
            }
        }
        let m = &run.metrics;
        assert!(!m.aborted);
        assert!((m.p_local + m.p_migrated - 1.0).abs() < 1e-12);
        let cr: f64 = run.outcomes.iter().map(|o| o.reward).sum();
        assert_eq!(m.cr, cr);
    }

    #[test]
    fn environment_flags_partial_episodes() {
        let cfg = small_cfg();
        let mut env = Environment::new(&cfg, &world(&cfg, 5), 5, EnvParams::default());
        let tasks = env.snapshot().unwrap().tasks.clone();
        env.step(&OffloadProfile::local(&tasks)).unwrap();
        assert!(env.metrics().aborted);
        assert_eq!(env.slot(), 1);
        env.reset();
        assert_eq!(env.slot(), 0);
        assert!(env.outcomes().is_empty());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let cfg = small_cfg();
        let run = run_episode(PolicyKind::Orm, &cfg, &world(&cfg, 6), 6, &EnvParams::default());
        let text = write_metrics_csv(&run.outcomes, &run.metrics);
        assert!(text.starts_with(METRICS_SCHEMA));
        let (outcomes, metrics) = read_metrics_csv(&text).unwrap();
        assert_eq!(outcomes, run.outcomes);
        assert_eq!(metrics, run.metrics);
        assert!(matches!(read_metrics_csv("kind\n"), Err(MetricsCsvError::Schema)));
    }

    #[test]
    fn trace_csv_round_trip() {
        let cfg = small_cfg();
        let run = run_episode(PolicyKind::Game, &cfg, &world(&cfg, 7), 7, &EnvParams::default());
        assert!(!run.trace.is_empty());
        assert_eq!(read_trace_csv(&write_trace_csv(&run.trace)).unwrap(), run.trace);
    }
}
