//! Seeded property suites behind `vecsim verify`.
//!
//! Each suite runs a fixed batch of random instances and reports one line per
//! property with its worst observed value.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::DecodeOrder;
use crate::compute_alloc::{kkt_allocate, total_exec_time};
use crate::domain::ScenarioConfig;
use crate::offload_game::{random_instance, BrdParams, Certificate, OffloadProfile, SlotGame};
use crate::power_alloc::{edge_power_sums, equal_split, sca_coefficients, solve_power, sum_rate, PowerSolverParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Epg,
    Allocators,
    Dynamics,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epg" => Ok(Self::Epg),
            "allocators" => Ok(Self::Allocators),
            "dynamics" => Ok(Self::Dynamics),
            "all" => Ok(Self::All),
            _ => Err(format!("unknown suite `{s}` (expected epg, allocators, dynamics or all)")),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Epg => "epg",
            Self::Allocators => "allocators",
            Self::Dynamics => "dynamics",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Epg | Suite::All) {
        checks.extend(epg_checks(seed));
    }
    if matches!(suite, Suite::Allocators | Suite::All) {
        checks.extend(allocator_checks(seed));
    }
    if matches!(suite, Suite::Dynamics | Suite::All) {
        checks.extend(dynamics_checks(seed));
    }
    VerifyReport {
        suite,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn small_game(rng: &mut ChaCha8Rng, max_tasks: usize) -> SlotGame {
    let ne = rng.random_range(2..=3);
    let n = rng.random_range(1..=max_tasks);
    let inst = random_instance(&ScenarioConfig::default(), ne, n, rng.random());
    SlotGame::new(inst, &PowerSolverParams::default())
}

fn random_profile(rng: &mut ChaCha8Rng, game: &SlotGame) -> OffloadProfile {
    OffloadProfile::new(game.tasks().iter().map(|_| rng.random_range(0..game.num_edges())).collect())
}

fn epg_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut deviations = 0;
    let mut set_mismatch = 0;
    for i in 0..60 {
        let game = small_game(&mut rng, 6);
        for _ in 0..5 {
            let p = random_profile(&mut rng, &game);
            let e = game.tasks()[rng.random_range(0..game.tasks().len())].origin_edge;
            let mut alt = p.clone();
            for &k in game.origin_tasks(e) {
                alt.assign[k] = rng.random_range(0..game.num_edges());
            }
            let (du, df) = game.unilateral_deviation_check(&p, e, &alt).expect("deviation is unilateral");
            worst = worst.max((du - df).abs());
            deviations += 1;
        }
        if i < 20 {
            let by_u = game.brute_force_equilibria(1e-6).expect("instance is enumerable");
            let by_f = potential_stable_set(&game, 1e-6);
            if by_u != by_f {
                set_mismatch += 1;
            }
        }
    }
    vec![
        check(
            "epg_identity",
            worst <= 1e-9,
            format!("{deviations} deviations, max |dU - dF| = {worst:e}"),
        ),
        check(
            "equilibrium_sets_coincide",
            set_mismatch == 0,
            format!("{set_mismatch} of 20 instances differ"),
        ),
    ]
}

/// Profiles where no edge raises its own potential gain by more than
/// `epsilon`.
fn potential_stable_set(game: &SlotGame, epsilon: f64) -> Vec<OffloadProfile> {
    let table = game.enumerate_profiles().expect("instance is enumerable");
    table
        .iter()
        .filter(|(p, _)| {
            (0..game.num_edges()).all(|e| {
                let f = game.potential_gain(&p.assign, e);
                table.iter().all(|(q, _)| {
                    let unilateral = (0..p.assign.len())
                        .all(|k| p.assign[k] == q.assign[k] || game.tasks()[k].origin_edge == e);
                    !unilateral || game.potential_gain(&q.assign, e) <= f + epsilon
                })
            })
        })
        .map(|(p, _)| p.clone())
        .collect()
}

fn allocator_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa110c);
    let mut budget_gap: f64 = 0.0;
    let mut beaten = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let cycles: Vec<f64> = (0..n).map(|_| rng.random_range(4e7..2e10)).collect();
        let c_e = rng.random_range(3e9..1e10);
        let c = kkt_allocate(&cycles, c_e);
        budget_gap = budget_gap.max((c.iter().sum::<f64>() - c_e).abs() / c_e);
        let best = total_exec_time(&cycles, &c);
        for _ in 0..200 {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
            let total: f64 = w.iter().sum();
            let alt: Vec<f64> = w.iter().map(|x| c_e * x / total).collect();
            if total_exec_time(&cycles, &alt) < best {
                beaten += 1;
            }
        }
    }

    let params = PowerSolverParams::default();
    let (mut infeasible, mut worse, mut tight_gap) = (0, 0, 0.0f64);
    for i in 0..40 {
        let inst = random_instance(&ScenarioConfig::default(), rng.random_range(2..=4), rng.random_range(2..=12), seed + i);
        let up = &inst.uplinks;
        let ord = DecodeOrder::new(up);
        let a = solve_power(up, &params);
        let sums = edge_power_sums(&a.p, up);
        infeasible += sums.iter().zip(&up.max_power_mw).filter(|(s, p)| **s > **p + params.tol_feas).count();
        if sum_rate(&a.p, up, &ord) < sum_rate(&equal_split(up), up, &ord) {
            worse += 1;
        }
        for s in crate::channel::all_sinr(&a.p, up, &ord) {
            let c = sca_coefficients(s).expect("positive SINR");
            let exact = s.ln_1p() / std::f64::consts::LN_2;
            tight_gap = tight_gap.max((c.bound(s) - exact).abs() / exact);
        }
    }
    vec![
        check("kkt_budget_tight", budget_gap <= 1e-9, format!("max relative gap {budget_gap:e}")),
        check("kkt_beats_random", beaten == 0, format!("{beaten} of 20000 random allocations did better")),
        check("power_feasible", infeasible == 0, format!("{infeasible} edges over budget")),
        check("power_bound_tight", tight_gap <= 1e-9, format!("max relative gap {tight_gap:e}")),
        check(
            "power_beats_equal_split",
            worse <= 2,
            format!("{worse} of 40 instances below the equal split"),
        ),
    ]
}

fn dynamics_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let params = BrdParams::default();
    let (mut outside, mut limit, mut not_increasing, mut empty) = (0, 0, 0, 0);
    for _ in 0..30 {
        let game = small_game(&mut rng, 6);
        let init = random_profile(&mut rng, &game);
        let out = game.best_response_dynamics(&init, &params);
        if out.certificate == Certificate::SweepLimit {
            limit += 1;
        }
        if out.utility_path.windows(2).any(|w| w[1] <= w[0] + params.epsilon) {
            not_increasing += 1;
        }
        let eq = game.brute_force_equilibria(params.epsilon).expect("instance is enumerable");
        if eq.is_empty() {
            empty += 1;
        }
        if !eq.contains(&out.profile) {
            outside += 1;
        }
    }
    vec![
        check("equilibrium_exists", empty == 0, format!("{empty} of 30 instances without one")),
        check("dynamics_terminate", limit == 0, format!("{limit} of 30 runs hit the sweep limit")),
        check("dynamics_path_increasing", not_increasing == 0, format!("{not_increasing} non-increasing paths")),
        check("endpoint_is_equilibrium", outside == 0, format!("{outside} of 30 endpoints not stable")),
    ]
}
