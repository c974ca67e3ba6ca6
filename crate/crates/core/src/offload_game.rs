//! Offloading as an exact potential game.
//!
//! Every edge is a player whose strategy is the execution target of each task
//! that originates at it. All players share one utility, the system sum of
//! per-edge service ratios `U = sum_e Psi_e`, and edge `e`'s potential
//! contribution is `F_e = U(S) - U(S with e voided)`.
//!
//! Voiding edge `e` means: its origin tasks are unserved, its vehicles stop
//! transmitting (powers are re-solved without them), and it still executes
//! tasks migrated to it. The voided utility does not depend on `e`'s own
//! strategy, so any unilateral deviation by `e` changes `F_e` exactly as much
//! as it changes `U`.
//!
//! Uplink powers depend only on who transmits, never on where tasks execute.
//! A [`SlotGame`] therefore solves powers once for the full slot and once per
//! voided edge, and every profile evaluation after that is a cheap pass over
//! the tasks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{all_sinr, path_gain2, upload_time, DecodeOrder, UplinkSet, INTERFERENCE_RANGE_FACTOR};
use crate::compute_alloc::{allocate_slot, wired_time, ComputeAssignment};
use crate::domain::{place_edges, Point, ScenarioConfig, TaskSpec};
use crate::power_alloc::{solve_power_masked, PowerAssignment, PowerSolverParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GameError {
    #[error("not a unilateral deviation (task {task} does not originate at edge {edge})")]
    NotUnilateral { task: usize, edge: usize },
    #[error("instance too large for enumeration ({tasks} tasks, {edges} edges)")]
    TooLarge { tasks: usize, edges: usize },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

/// Target edge of every task of a slot, indexed like the slot's task list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OffloadProfile {
    pub assign: Vec<usize>,
}

impl OffloadProfile {
    pub fn new(assign: Vec<usize>) -> Self {
        Self { assign }
    }

    /// Every task runs at its origin edge.
    pub fn local(tasks: &[TaskSpec]) -> Self {
        Self::new(tasks.iter().map(|t| t.origin_edge).collect())
    }
}

impl fmt::Display for OffloadProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.assign.iter().map(|e| e.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Everything one slot's game needs: tasks, their uplinks and the edge side.
///
/// Transmitter `k` of `uplinks` carries task `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotInstance {
    pub slot: usize,
    pub tasks: Vec<TaskSpec>,
    pub uplinks: UplinkSet,
    pub cpu_hz: Vec<f64>,
    /// Wired distance between edges (m).
    pub edge_dist: Vec<Vec<f64>>,
    pub discount_per_m: f64,
    pub wired_rate_bps: f64,
}

impl SlotInstance {
    pub fn num_edges(&self) -> usize {
        self.cpu_hz.len()
    }
}

/// Pairwise distances between edge locations.
pub fn edge_distances(locations: &[Point]) -> Vec<Vec<f64>> {
    locations
        .iter()
        .map(|a| locations.iter().map(|b| a.distance(b)).collect())
        .collect()
}

/// Per-task times under one profile; `NaN` for tasks that are not executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTimes {
    pub upload_s: Vec<f64>,
    pub processing_s: Vec<f64>,
    pub service_s: Vec<f64>,
    pub served: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEval {
    pub utility: f64,
    pub per_edge_ratio: Vec<f64>,
    /// `F_e = U - U_void(e)`.
    pub per_edge_potential_gain: Vec<f64>,
    /// `U_void(e)` per edge.
    pub void_utility: Vec<f64>,
    pub times: TaskTimes,
    pub compute: ComputeAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrdParams {
    pub epsilon: f64,
    pub max_sweeps: usize,
    /// Largest number of origin tasks searched jointly; above it an edge only
    /// tries single-task moves.
    pub exhaustive_cap: usize,
}

impl Default for BrdParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_sweeps: 100,
            exhaustive_cap: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Certificate {
    /// A full sweep found no deviation gaining more than epsilon, with every
    /// edge searched exhaustively.
    EpsilonEquilibrium,
    /// A full sweep found no improving move, but some edge only tried
    /// single-task moves.
    CoordinateStable,
    /// Stopped at `max_sweeps` while still moving.
    SweepLimit,
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EpsilonEquilibrium => "epsilon_equilibrium",
            Self::CoordinateStable => "coordinate_stable",
            Self::SweepLimit => "sweep_limit",
        })
    }
}

/// One edge turn of the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrdTraceRow {
    pub sweep: usize,
    pub edge: usize,
    pub moved: bool,
    pub u_before: f64,
    pub u_after: f64,
}

pub const BRD_TRACE_HEADER: &str = "sweep,edge,moved,u_before,u_after";

impl BrdTraceRow {
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.sweep, self.edge, self.moved, self.u_before, self.u_after)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrdOutcome {
    pub profile: OffloadProfile,
    pub certificate: Certificate,
    pub sweeps: usize,
    pub trace: Vec<BrdTraceRow>,
    /// Utility at the start and after every adopted move.
    pub utility_path: Vec<f64>,
}

/// A slot with its powers solved, ready to evaluate offloading profiles.
#[derive(Debug, Clone)]
pub struct SlotGame {
    inst: SlotInstance,
    power: PowerAssignment,
    upload: Vec<f64>,
    /// Upload times with edge `e` voided; `None` when `e` has no tasks.
    void_upload: Vec<Option<Vec<f64>>>,
    root: Vec<f64>,
    wired: Vec<Vec<f64>>,
    by_origin: Vec<Vec<usize>>,
}

fn upload_times(up: &UplinkSet, tasks: &[TaskSpec], p: &[f64]) -> Vec<f64> {
    let ord = DecodeOrder::new(up);
    all_sinr(p, up, &ord)
        .into_iter()
        .zip(tasks)
        .map(|(s, t)| upload_time(t.size_bits, s, up.bandwidth_hz))
        .collect()
}

impl SlotGame {
    pub fn new(inst: SlotInstance, params: &PowerSolverParams) -> Self {
        let ne = inst.num_edges();
        let n = inst.tasks.len();
        let mut by_origin = vec![Vec::new(); ne];
        for (k, t) in inst.tasks.iter().enumerate() {
            by_origin[t.origin_edge].push(k);
        }
        let power = solve_power_masked(&inst.uplinks, &vec![true; n], params, None);
        let upload = upload_times(&inst.uplinks, &inst.tasks, &power.p);
        let void_upload = (0..ne)
            .map(|e| {
                if by_origin[e].is_empty() {
                    return None;
                }
                let active: Vec<bool> = inst.tasks.iter().map(|t| t.origin_edge != e).collect();
                let a = solve_power_masked(&inst.uplinks, &active, params, None);
                Some(upload_times(&inst.uplinks, &inst.tasks, &a.p))
            })
            .collect();
        let root = inst.tasks.iter().map(|t| t.cycles().sqrt()).collect();
        let wired = inst
            .tasks
            .iter()
            .map(|t| {
                (0..ne)
                    .map(|f| {
                        let from = t.origin_edge;
                        wired_time(t.size_bits, from, f, inst.edge_dist[from][f], inst.discount_per_m, inst.wired_rate_bps)
                    })
                    .collect()
            })
            .collect();
        Self {
            inst,
            power,
            upload,
            void_upload,
            root,
            wired,
            by_origin,
        }
    }

    pub fn instance(&self) -> &SlotInstance {
        &self.inst
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.inst.tasks
    }

    pub fn num_edges(&self) -> usize {
        self.inst.num_edges()
    }

    pub fn power(&self) -> &PowerAssignment {
        &self.power
    }

    /// Upload time of every task when all tasks transmit.
    pub fn upload(&self) -> &[f64] {
        &self.upload
    }

    /// Tasks originating at `e`, ascending.
    pub fn origin_tasks(&self, e: usize) -> &[usize] {
        &self.by_origin[e]
    }

    pub fn validate(&self, profile: &OffloadProfile) -> Result<(), GameError> {
        if profile.assign.len() != self.inst.tasks.len() {
            return Err(GameError::InvalidProfile(format!(
                "{} targets for {} tasks",
                profile.assign.len(),
                self.inst.tasks.len()
            )));
        }
        if let Some(&bad) = profile.assign.iter().find(|&&e| e >= self.num_edges()) {
            return Err(GameError::InvalidProfile(format!("target edge {bad} out of range")));
        }
        Ok(())
    }

    /// Service ratios of every edge, optionally with one edge voided.
    fn ratios(&self, assign: &[usize], void: Option<usize>) -> Vec<f64> {
        let ne = self.num_edges();
        let upload = match void {
            Some(e) => self.void_upload[e].as_deref().unwrap_or(&self.upload),
            None => &self.upload,
        };
        let mut load = vec![0.0; ne];
        for (k, t) in self.inst.tasks.iter().enumerate() {
            if Some(t.origin_edge) != void {
                load[assign[k]] += self.root[k];
            }
        }
        let mut served = vec![0usize; ne];
        for (k, t) in self.inst.tasks.iter().enumerate() {
            let o = t.origin_edge;
            if Some(o) == void {
                continue;
            }
            let to = assign[k];
            let service = upload[k] + self.wired[k][to] + self.root[k] * load[to] / self.inst.cpu_hz[to];
            if service <= t.deadline_s {
                served[o] += 1;
            }
        }
        (0..ne)
            .map(|e| {
                let total = self.by_origin[e].len();
                if total == 0 {
                    1.0
                } else {
                    served[e] as f64 / total as f64
                }
            })
            .collect()
    }

    /// System utility `U` of a target vector.
    pub fn utility(&self, assign: &[usize]) -> f64 {
        self.ratios(assign, None).iter().sum()
    }

    /// Utility with edge `e`'s strategy voided.
    pub fn void_utility(&self, assign: &[usize], e: usize) -> f64 {
        self.ratios(assign, Some(e)).iter().sum()
    }

    pub fn null_contribution_eval(&self, profile: &OffloadProfile, e: usize) -> f64 {
        self.void_utility(&profile.assign, e)
    }

    /// `F_e = U - U_void(e)`.
    pub fn potential_gain(&self, assign: &[usize], e: usize) -> f64 {
        self.utility(assign) - self.void_utility(assign, e)
    }

    /// Full evaluation of a profile, including CPU shares and task times.
    pub fn evaluate(&self, profile: &OffloadProfile) -> GameEval {
        let assign = &profile.assign;
        let per_edge_ratio = self.ratios(assign, None);
        let utility: f64 = per_edge_ratio.iter().sum();
        let void_utility: Vec<f64> = (0..self.num_edges()).map(|e| self.void_utility(assign, e)).collect();
        let per_edge_potential_gain = void_utility.iter().map(|v| utility - v).collect();

        let target: Vec<Option<usize>> = assign.iter().map(|&e| Some(e)).collect();
        let compute = allocate_slot(
            &self.inst.tasks,
            &target,
            &self.inst.cpu_hz,
            &self.inst.edge_dist,
            self.inst.discount_per_m,
            self.inst.wired_rate_bps,
        );
        let mut load = vec![0.0; self.num_edges()];
        for (k, &to) in assign.iter().enumerate() {
            load[to] += self.root[k];
        }
        let n = self.inst.tasks.len();
        let mut times = TaskTimes {
            upload_s: self.upload.clone(),
            processing_s: vec![0.0; n],
            service_s: vec![0.0; n],
            served: vec![false; n],
        };
        for (k, t) in self.inst.tasks.iter().enumerate() {
            let to = assign[k];
            // Same expression as the ratio pass, so `served` agrees with it.
            let processing = self.wired[k][to] + self.root[k] * load[to] / self.inst.cpu_hz[to];
            times.processing_s[k] = processing;
            times.service_s[k] = self.upload[k] + processing;
            times.served[k] = self.upload[k] + self.wired[k][to] + self.root[k] * load[to] / self.inst.cpu_hz[to] <= t.deadline_s;
        }
        GameEval {
            utility,
            per_edge_ratio,
            per_edge_potential_gain,
            void_utility,
            times,
            compute,
        }
    }

    /// `(U(alt) - U(profile), F_e(alt) - F_e(profile))` for a deviation by `e`.
    pub fn unilateral_deviation_check(
        &self,
        profile: &OffloadProfile,
        e: usize,
        alt: &OffloadProfile,
    ) -> Result<(f64, f64), GameError> {
        self.validate(profile)?;
        self.validate(alt)?;
        for (k, t) in self.inst.tasks.iter().enumerate() {
            if profile.assign[k] != alt.assign[k] && t.origin_edge != e {
                return Err(GameError::NotUnilateral { task: k, edge: e });
            }
        }
        let du = self.utility(&alt.assign) - self.utility(&profile.assign);
        let df = self.potential_gain(&alt.assign, e) - self.potential_gain(&profile.assign, e);
        Ok((du, df))
    }

    /// Best strategy of edge `e` against the rest of `assign`, by exhaustive
    /// search over its origin tasks. Returns the best utility and targets;
    /// ties keep the earliest candidate, with the current strategy first.
    fn best_joint(&self, assign: &mut [usize], e: usize) -> (f64, Vec<usize>) {
        let idx = &self.by_origin[e];
        let ne = self.num_edges();
        let current: Vec<usize> = idx.iter().map(|&k| assign[k]).collect();
        let mut best_u = self.utility(assign);
        let mut best = current.clone();
        let mut digits = vec![0usize; idx.len()];
        loop {
            for (&k, &d) in idx.iter().zip(&digits) {
                assign[k] = d;
            }
            if digits != current {
                let u = self.utility(assign);
                if u > best_u {
                    best_u = u;
                    best.clone_from(&digits);
                }
            }
            // Mixed-radix increment, first task least significant.
            let mut i = 0;
            while i < digits.len() {
                digits[i] += 1;
                if digits[i] < ne {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == digits.len() {
                break;
            }
        }
        for (&k, &d) in idx.iter().zip(&current) {
            assign[k] = d;
        }
        (best_u, best)
    }

    /// Best single-task move of edge `e`.
    fn best_coordinate(&self, assign: &mut [usize], e: usize) -> (f64, Vec<usize>) {
        let idx = &self.by_origin[e];
        let current: Vec<usize> = idx.iter().map(|&k| assign[k]).collect();
        let mut best_u = self.utility(assign);
        let mut best = current.clone();
        for (i, &k) in idx.iter().enumerate() {
            for f in 0..self.num_edges() {
                if f == current[i] {
                    continue;
                }
                assign[k] = f;
                let u = self.utility(assign);
                if u > best_u {
                    best_u = u;
                    best.clone_from(&current);
                    best[i] = f;
                }
            }
            assign[k] = current[i];
        }
        (best_u, best)
    }

    /// Round-robin epsilon-improvement dynamics from `init`.
    pub fn best_response_dynamics(&self, init: &OffloadProfile, params: &BrdParams) -> BrdOutcome {
        let mut assign = init.assign.clone();
        let mut u = self.utility(&assign);
        let mut trace = Vec::new();
        let mut utility_path = vec![u];
        let all_exhaustive = self.by_origin.iter().all(|t| t.len() <= params.exhaustive_cap);

        for sweep in 1..=params.max_sweeps {
            let mut moved_any = false;
            for e in 0..self.num_edges() {
                let idx = &self.by_origin[e];
                if idx.is_empty() {
                    continue;
                }
                let (best_u, best) = if idx.len() <= params.exhaustive_cap {
                    self.best_joint(&mut assign, e)
                } else {
                    self.best_coordinate(&mut assign, e)
                };
                let moved = best_u > u + params.epsilon;
                let before = u;
                if moved {
                    for (&k, &d) in idx.iter().zip(&best) {
                        assign[k] = d;
                    }
                    u = best_u;
                    utility_path.push(u);
                    moved_any = true;
                }
                trace.push(BrdTraceRow {
                    sweep,
                    edge: e,
                    moved,
                    u_before: before,
                    u_after: u,
                });
            }
            if !moved_any {
                let certificate = if all_exhaustive {
                    Certificate::EpsilonEquilibrium
                } else {
                    Certificate::CoordinateStable
                };
                return BrdOutcome {
                    profile: OffloadProfile::new(assign),
                    certificate,
                    sweeps: sweep,
                    trace,
                    utility_path,
                };
            }
        }
        log::debug!("slot {}: dynamics hit the sweep limit", self.inst.slot);
        BrdOutcome {
            profile: OffloadProfile::new(assign),
            certificate: Certificate::SweepLimit,
            sweeps: params.max_sweeps,
            trace,
            utility_path,
        }
    }

    /// Every profile in enumeration order (task 0 least significant) with its
    /// utility.
    pub fn enumerate_profiles(&self) -> Result<Vec<(OffloadProfile, f64)>, GameError> {
        let n = self.inst.tasks.len();
        let ne = self.num_edges();
        if n > 6 || ne > 3 {
            return Err(GameError::TooLarge { tasks: n, edges: ne });
        }
        let count = ne.pow(n as u32);
        Ok((0..count)
            .map(|code| {
                let assign = decode_profile(code, n, ne);
                let u = self.utility(&assign);
                (OffloadProfile::new(assign), u)
            })
            .collect())
    }

    /// All profiles from which no edge can gain more than `epsilon` in `U` by
    /// changing its own strategy.
    pub fn brute_force_equilibria(&self, epsilon: f64) -> Result<Vec<OffloadProfile>, GameError> {
        let table = self.enumerate_profiles()?;
        let ne = self.num_edges();
        let stride: Vec<usize> = (0..self.inst.tasks.len()).map(|k| ne.pow(k as u32)).collect();
        let mut out = Vec::new();
        for (code, (profile, u)) in table.iter().enumerate() {
            let stable = (0..ne).all(|e| {
                let idx = &self.by_origin[e];
                // Code with e's digits cleared, then every digit combination.
                let base = idx.iter().fold(code, |c, &k| c - profile.assign[k] * stride[k]);
                (0..ne.pow(idx.len() as u32)).all(|combo| {
                    let alt = decode_profile(combo, idx.len(), ne)
                        .iter()
                        .zip(idx)
                        .fold(base, |c, (&d, &k)| c + d * stride[k]);
                    table[alt].1 <= u + epsilon
                })
            });
            if stable {
                out.push(profile.clone());
            }
        }
        Ok(out)
    }
}

/// Mixed-radix digits of `code`, least significant first.
fn decode_profile(mut code: usize, n: usize, ne: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let d = code % ne;
            code /= ne;
            d
        })
        .collect()
}

/// A small random slot for property tests: `num_edges` edges on a row, and
/// `num_tasks` vehicles dropped inside the range of a random edge, each with
/// one task drawn from the configured ranges.
pub fn random_instance(cfg: &ScenarioConfig, num_edges: usize, num_tasks: usize, seed: u64) -> SlotInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = cfg.clone().with_grid(1, num_edges);
    let edges = place_edges(&grid, seed);
    let horizon = INTERFERENCE_RANGE_FACTOR * cfg.comm_range_m;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut gain2 = Vec::with_capacity(num_tasks);
    for v in 0..num_tasks {
        let home = rng.random_range(0..num_edges);
        let r = cfg.comm_range_m * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let c = edges[home].location;
        let pos = Point::new(c.x + r * theta.cos(), c.y + r * theta.sin());
        let dist: Vec<f64> = edges.iter().map(|e| pos.distance(&e.location)).collect();
        let origin = (0..num_edges)
            .filter(|&e| dist[e] <= cfg.comm_range_m)
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
            .unwrap_or(home);
        gain2.push(
            dist.iter()
                .map(|&d| {
                    let x: f64 = Exp1.sample(&mut rng);
                    if d <= horizon {
                        path_gain2(x, d, cfg.path_loss_exp)
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let [lo, hi] = cfg.task_size_bits_range;
        let [dlo, dhi] = cfg.deadline_s_range;
        tasks.push(TaskSpec {
            id: v,
            vehicle: v,
            birth_slot: 0,
            size_bits: lo + rng.random::<f64>() * (hi - lo),
            cycles_per_bit: cfg.cycles_per_bit,
            deadline_s: dlo + rng.random::<f64>() * (dhi - dlo),
            origin_edge: origin,
        });
    }
    let uplinks = UplinkSet {
        vehicle: (0..num_tasks).collect(),
        origin: tasks.iter().map(|t| t.origin_edge).collect(),
        gain2,
        max_power_mw: edges.iter().map(|e| e.max_power_mw).collect(),
        bandwidth_hz: cfg.bandwidth_hz,
        noise_mw: cfg.noise_mw,
    };
    let locations: Vec<Point> = edges.iter().map(|e| e.location).collect();
    SlotInstance {
        slot: 0,
        tasks,
        uplinks,
        cpu_hz: edges.iter().map(|e| e.cpu_hz).collect(),
        edge_dist: edge_distances(&locations),
        discount_per_m: cfg.distance_discount_per_m,
        wired_rate_bps: cfg.wired_rate_bps,
    }
}
