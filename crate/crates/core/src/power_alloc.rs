//! Uplink power allocation by successive convex approximation.
//!
//! Each edge maximizes the sum rate of its own uplinks under its power
//! budget. The non-concave rate `log2(1 + SINR)` is replaced, around a
//! reference SINR `S`, by the tight lower bound `xi * log2(SINR) + omega` with
//!
//! ```text
//! xi    = S / (1 + S)
//! omega = log2(1 + S) - xi * log2(S)
//! ```
//!
//! which is concave in log-power. The relaxed problem is solved by Lagrange
//! duality over the system sum (so every transmitter accounts for the
//! interference it causes at other edges): a fixed-point sweep updates the
//! powers for the current multipliers, then a projected gradient step updates each edge's
//! multiplier. A handful of outer rounds re-linearize around the new powers.
//!
//! Multipliers are expressed per unit of bandwidth (the objective is divided
//! by `b`), so `lambda` has units of 1/mW.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{all_interference, all_sinr, interference, rate_bps, DecodeOrder, UplinkSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerError {
    #[error("reference SINR must be positive (got {0})")]
    NonPositiveReference(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSolverParams {
    pub sca_rounds: usize,
    pub dual_iters: usize,
    /// Damping of the line-searched dual step (1 takes the full step).
    pub dual_step: f64,
    pub p_min_mw: f64,
    pub tol_obj: f64,
    pub tol_feas: f64,
}

impl Default for PowerSolverParams {
    fn default() -> Self {
        Self {
            sca_rounds: 10,
            dual_iters: 50,
            dual_step: 1.0,
            p_min_mw: 1e-6,
            tol_obj: 1e-6,
            tol_feas: 1e-6,
        }
    }
}

/// Linearization coefficients around one reference SINR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaCoefficients {
    pub xi: f64,
    pub omega: f64,
}

impl ScaCoefficients {
    /// Lower bound on `log2(1 + sinr)`.
    pub fn bound(&self, sinr: f64) -> f64 {
        self.xi * sinr.log2() + self.omega
    }
}

pub fn sca_coefficients(sinr_bar: f64) -> Result<ScaCoefficients, PowerError> {
    if !(sinr_bar > 0.0) {
        return Err(PowerError::NonPositiveReference(sinr_bar));
    }
    let xi = sinr_bar / (1.0 + sinr_bar);
    let omega = sinr_bar.ln_1p() / std::f64::consts::LN_2 - xi * sinr_bar.log2();
    Ok(ScaCoefficients { xi, omega })
}

/// Projected dual gradient step `max(0, lambda + step * (sum_p - p_e))`.
pub fn dual_update(lambda: f64, powers_sum: f64, p_e: f64, step: f64) -> f64 {
    (lambda + step * (powers_sum - p_e)).max(0.0)
}

/// Stationary point of the Lagrangian in transmitter `k`'s log-power, holding
/// every other power at the current iterate:
///
/// ```text
/// p_k = xi_k / (lambda_e + sum_{u hurt by k} xi_u * g_{k,e_u} / I_u)
/// ```
///
/// where `I_u` is the interference-plus-noise of `u` at the current iterate.
/// `k` hurts the better-channel transmitters of its own edge and every
/// transmitter of another edge. The result is clamped to `[p_min, p_e]`.
pub fn fixed_point_power(
    k: usize,
    lambda: f64,
    coeffs: &[ScaCoefficients],
    powers: &[f64],
    up: &UplinkSet,
    ord: &DecodeOrder,
    p_min: f64,
) -> f64 {
    let e = up.origin[k];
    let hurt = |u: usize| coeffs[u].xi * up.gain2[k][up.origin[u]] / interference(u, powers, up, ord);
    let intra: f64 = ord.better_than(k, e).iter().map(|&u| hurt(u)).sum();
    let inter: f64 = (0..up.len()).filter(|&u| up.origin[u] != e).map(hurt).sum();
    let denom = lambda + intra + inter;
    clamp_power(coeffs[k].xi / denom, p_min, up.max_power_mw[e])
}

fn clamp_power(p: f64, p_min: f64, p_max: f64) -> f64 {
    if p.is_nan() {
        p_max
    } else {
        p.clamp(p_min, p_max)
    }
}

/// Interference penalty `sum_{u hurt by k} xi_u * g_{k,e_u} / I_u` of every
/// transmitter at the current iterate; the fixed point is
/// `p_k = xi_k / (lambda_e + penalty_k)`.
pub fn interference_penalties(coeffs: &[ScaCoefficients], powers: &[f64], up: &UplinkSet, ord: &DecodeOrder) -> Vec<f64> {
    let interf = all_interference(powers, up, ord);
    // weight[e] = sum over transmitters u of edge e of xi_u / I_u.
    let mut weight = vec![0.0; up.num_edges()];
    for (k, &e) in up.origin.iter().enumerate() {
        weight[e] += coeffs[k].xi / interf[k];
    }
    let mut out = vec![0.0; up.len()];
    for (e, list) in ord.per_edge.iter().enumerate() {
        let mut better = 0.0;
        for &k in list {
            let inter: f64 = (0..weight.len())
                .filter(|&f| f != e)
                .map(|f| up.gain2[k][f] * weight[f])
                .sum();
            out[k] = up.gain2[k][e] * better + inter;
            better += coeffs[k].xi / interf[k];
        }
    }
    out
}

fn powers_for(lambda: &[f64], coeffs: &[ScaCoefficients], penalty: &[f64], up: &UplinkSet, p_min: f64) -> Vec<f64> {
    (0..up.len())
        .map(|k| {
            let e = up.origin[k];
            clamp_power(coeffs[k].xi / (lambda[e] + penalty[k]), p_min, up.max_power_mw[e])
        })
        .collect()
}

/// One Jacobi sweep of [`fixed_point_power`] over every transmitter; all
/// updates read the same iterate.
pub fn fixed_point_sweep(
    lambda: &[f64],
    coeffs: &[ScaCoefficients],
    powers: &[f64],
    up: &UplinkSet,
    ord: &DecodeOrder,
    p_min: f64,
) -> Vec<f64> {
    let penalty = interference_penalties(coeffs, powers, up, ord);
    powers_for(lambda, coeffs, &penalty, up, p_min)
}

/// Multiplier at which edge `members` exactly spend `p_e` with the penalties
/// held fixed, or zero when the budget is slack even without a price.
/// Bisection on the monotone budget function.
fn budget_multiplier(members: &[usize], coeffs: &[ScaCoefficients], penalty: &[f64], p_min: f64, p_e: f64) -> f64 {
    let spend = |lambda: f64| -> f64 {
        members
            .iter()
            .map(|&k| clamp_power(coeffs[k].xi / (lambda + penalty[k]), p_min, p_e))
            .sum()
    };
    if spend(0.0) <= p_e {
        return 0.0;
    }
    let mut hi = members.iter().map(|&k| coeffs[k].xi).sum::<f64>() / p_e;
    while spend(hi) > p_e {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if spend(mid) > p_e {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

const BISECTION_STEPS: usize = 64;

/// Relaxed objective `sum_k b (xi_k log2 SINR_k + omega_k)` (bits/s).
pub fn surrogate_objective(powers: &[f64], coeffs: &[ScaCoefficients], up: &UplinkSet, ord: &DecodeOrder) -> f64 {
    all_sinr(powers, up, ord)
        .iter()
        .zip(coeffs)
        .map(|(&s, c)| up.bandwidth_hz * c.bound(s))
        .sum()
}

/// True sum rate `sum_k b log2(1 + SINR_k)` (bits/s).
pub fn sum_rate(powers: &[f64], up: &UplinkSet, ord: &DecodeOrder) -> f64 {
    all_sinr(powers, up, ord)
        .iter()
        .map(|&s| rate_bps(s, up.bandwidth_hz))
        .sum()
}

/// Per-edge sum of granted powers.
pub fn edge_power_sums(powers: &[f64], up: &UplinkSet) -> Vec<f64> {
    let mut sums = vec![0.0; up.num_edges()];
    for (k, &p) in powers.iter().enumerate() {
        sums[up.origin[k]] += p;
    }
    sums
}

/// Every edge splits its budget equally among its transmitters.
pub fn equal_split(up: &UplinkSet) -> Vec<f64> {
    let mut counts = vec![0usize; up.num_edges()];
    for &e in &up.origin {
        counts[e] += 1;
    }
    up.origin
        .iter()
        .map(|&e| up.max_power_mw[e] / counts[e] as f64)
        .collect()
}

/// Scales down any edge whose grant exceeds its budget.
fn project_feasible(powers: &mut [f64], up: &UplinkSet) {
    let sums = edge_power_sums(powers, up);
    for (k, p) in powers.iter_mut().enumerate() {
        let e = up.origin[k];
        if sums[e] > up.max_power_mw[e] {
            *p *= up.max_power_mw[e] / sums[e];
        }
    }
}

/// One row of the optional solver trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTraceRow {
    pub round: usize,
    pub edge: usize,
    pub lambda: f64,
    pub power_sum: f64,
    pub lb_objective: f64,
}

pub fn write_power_trace(rows: &[PowerTraceRow]) -> String {
    let mut out = String::from("round,edge,lambda,power_sum,lb_objective\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.round, r.edge, r.lambda, r.power_sum, r.lb_objective));
    }
    out
}

/// Result of the relaxed solve for fixed coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSolution {
    pub powers: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Per edge, whether the last dual steps settled (see [`PowerAssignment`]).
    pub converged: Vec<bool>,
}

/// Solves the relaxed (concave, log-power) problem for fixed coefficients by
/// alternating fixed-point sweeps and dual steps, starting from `powers` and
/// `lambda`.
///
/// Each dual step is the projected gradient step of [`dual_update`] with its
/// length chosen by exact line search: the multiplier moves to where the edge
/// would exactly spend its budget under the current interference, scaled by
/// `dual_step`. The damping halves whenever an edge's budget gap changes
/// sign.
pub fn solve_surrogate(
    up: &UplinkSet,
    ord: &DecodeOrder,
    coeffs: &[ScaCoefficients],
    mut powers: Vec<f64>,
    mut lambda: Vec<f64>,
    params: &PowerSolverParams,
) -> SurrogateSolution {
    let ne = up.num_edges();
    let mut damping = vec![params.dual_step; ne];
    let mut last_gap = vec![0.0f64; ne];
    let mut last_move = vec![f64::INFINITY; ne];

    for _ in 0..params.dual_iters {
        let penalty = interference_penalties(coeffs, &powers, up, ord);
        powers = powers_for(&lambda, coeffs, &penalty, up, params.p_min_mw);
        let sums = edge_power_sums(&powers, up);
        // The next sweep sees the interference of the powers just set.
        let penalty = interference_penalties(coeffs, &powers, up, ord);
        for e in 0..ne {
            let members = &ord.per_edge[e];
            if members.is_empty() {
                continue;
            }
            let p_e = up.max_power_mw[e];
            let gap = sums[e] - p_e;
            if gap * last_gap[e] < 0.0 {
                damping[e] *= 0.5;
            }
            last_gap[e] = gap;
            let target = budget_multiplier(members, coeffs, &penalty, params.p_min_mw, p_e);
            let step = if gap == 0.0 { 0.0 } else { damping[e] * (target - lambda[e]) / gap };
            let next = dual_update(lambda[e], sums[e], p_e, step.max(0.0)) + 0.0;
            last_move[e] = (next - lambda[e]).abs();
            lambda[e] = next;
        }
    }

    let converged = (0..ne)
        .map(|e| ord.per_edge[e].is_empty() || last_move[e] <= SETTLED * lambda[e])
        .collect();
    project_feasible(&mut powers, up);
    SurrogateSolution {
        powers,
        lambda,
        converged,
    }
}

/// Relative multiplier change below which an edge counts as settled.
const SETTLED: f64 = 1e-5;

/// Final power grant of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAssignment {
    /// Power per transmitter (mW); zero for inactive transmitters.
    pub p: Vec<f64>,
    /// Multiplier per edge (1/mW, per unit bandwidth).
    pub lambda: Vec<f64>,
    /// Relaxed objective at `p` with the last round's coefficients (bits/s).
    pub lb_objective: f64,
    /// Edges whose multiplier and budget gap settled in the last round.
    pub converged: Vec<bool>,
    /// True sum rate after the initial split and after each round (bits/s).
    pub round_sum_rates: Vec<f64>,
}

impl PowerAssignment {
    fn empty(up: &UplinkSet) -> Self {
        Self {
            p: vec![0.0; up.len()],
            lambda: vec![0.0; up.num_edges()],
            lb_objective: 0.0,
            converged: vec![true; up.num_edges()],
            round_sum_rates: Vec::new(),
        }
    }
}

/// Solves the slot's power allocation for every transmitter.
pub fn solve_power(up: &UplinkSet, params: &PowerSolverParams) -> PowerAssignment {
    solve_power_masked(up, &vec![true; up.len()], params, None)
}

/// Solves the power allocation with only the `active` transmitters on the
/// air; inactive ones get zero power and cause no interference.
///
/// Starts from an equal split of each edge's budget, then runs
/// `sca_rounds` rounds of {freeze reference SINR, compute coefficients, solve
/// the relaxed problem}. Edges are coupled through inter-edge interference
/// and always read the latest global iterate (Jacobi across edges).
pub fn solve_power_masked(
    up: &UplinkSet,
    active: &[bool],
    params: &PowerSolverParams,
    mut trace: Option<&mut Vec<PowerTraceRow>>,
) -> PowerAssignment {
    let idx: Vec<usize> = (0..up.len()).filter(|&k| active[k]).collect();
    if idx.is_empty() {
        return PowerAssignment::empty(up);
    }
    let sub = UplinkSet {
        vehicle: idx.iter().map(|&k| up.vehicle[k]).collect(),
        origin: idx.iter().map(|&k| up.origin[k]).collect(),
        gain2: idx.iter().map(|&k| up.gain2[k].clone()).collect(),
        max_power_mw: up.max_power_mw.clone(),
        bandwidth_hz: up.bandwidth_hz,
        noise_mw: up.noise_mw,
    };
    let ord = DecodeOrder::new(&sub);
    let ne = sub.num_edges();

    let mut powers = equal_split(&sub);
    let mut lambda = vec![0.0; ne];
    let mut coeffs = Vec::new();
    let mut converged = vec![true; ne];
    let mut round_sum_rates = vec![sum_rate(&powers, &sub, &ord)];

    for round in 0..params.sca_rounds {
        coeffs = all_sinr(&powers, &sub, &ord)
            .into_iter()
            .map(|s| sca_coefficients(s.max(f64::MIN_POSITIVE)).expect("reference SINR is positive"))
            .collect();
        // Warm-start multipliers; an edge without one starts at sum(xi) / p_e,
        // where the unpenalized fixed point exactly spends the budget.
        for e in 0..ne {
            if lambda[e] == 0.0 {
                let xi_sum: f64 = ord.per_edge[e].iter().map(|&k| coeffs[k].xi).sum();
                lambda[e] = xi_sum / sub.max_power_mw[e];
            }
        }
        let sol = solve_surrogate(&sub, &ord, &coeffs, powers, lambda, params);
        powers = sol.powers;
        lambda = sol.lambda;
        converged = sol.converged;
        round_sum_rates.push(sum_rate(&powers, &sub, &ord));

        if let Some(rows) = trace.as_deref_mut() {
            let sums = edge_power_sums(&powers, &sub);
            let sinrs = all_sinr(&powers, &sub, &ord);
            for e in 0..ne {
                let lb: f64 = ord.per_edge[e]
                    .iter()
                    .map(|&k| sub.bandwidth_hz * coeffs[k].bound(sinrs[k]))
                    .sum();
                rows.push(PowerTraceRow {
                    round,
                    edge: e,
                    lambda: lambda[e],
                    power_sum: sums[e],
                    lb_objective: lb,
                });
            }
        }
    }

    let lb_objective = if coeffs.is_empty() {
        sum_rate(&powers, &sub, &ord)
    } else {
        surrogate_objective(&powers, &coeffs, &sub, &ord)
    };
    let mut p = vec![0.0; up.len()];
    for (i, &k) in idx.iter().enumerate() {
        p[k] = powers[i];
    }
    PowerAssignment {
        p,
        lambda,
        lb_objective,
        converged,
        round_sum_rates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uplink(origin: Vec<usize>, gain2: Vec<Vec<f64>>, ne: usize) -> UplinkSet {
        UplinkSet {
            vehicle: (0..origin.len()).collect(),
            origin,
            gain2,
            max_power_mw: vec![1000.0; ne],
            bandwidth_hz: 2.0e7,
            noise_mw: 1.0e-9,
        }
    }

    #[test]
    fn coefficient_examples() {
        let c = sca_coefficients(1.0).unwrap();
        assert_eq!(c.xi, 0.5);
        assert_eq!(c.omega, 1.0);

        let c = sca_coefficients(3.0).unwrap();
        assert_eq!(c.xi, 0.75);
        // 2 - 0.75 * log2(3), log2(3) = 1.584962500721156
        assert!((c.omega - (2.0 - 0.75 * 1.584_962_500_721_156)).abs() < 1e-14);
        assert!((c.omega - 0.81128).abs() < 1e-5);

        assert!(sca_coefficients(1e12).unwrap().xi > 1.0 - 1e-11);
        assert_eq!(sca_coefficients(0.0), Err(PowerError::NonPositiveReference(0.0)));
        assert!(sca_coefficients(-1.0).unwrap_err().to_string().contains("must be positive"));
    }

    #[test]
    fn bound_is_tight_at_reference() {
        for s in [1e-4, 0.3, 1.0, 7.5, 1e3, 1e6] {
            let c = sca_coefficients(s).unwrap();
            let exact = (1.0 + s).log2();
            assert!((c.bound(s) - exact).abs() <= 1e-12 * exact.max(1.0));
            // And a lower bound elsewhere.
            for f in [0.1, 0.5, 2.0, 10.0] {
                assert!(c.bound(s * f) <= (1.0 + s * f).log2() + 1e-12);
            }
        }
    }

    #[test]
    fn dual_update_examples() {
        assert_eq!(dual_update(0.0, 500.0, 1000.0, 0.01), 0.0);
        assert_eq!(dual_update(1.0, 1100.0, 1000.0, 0.01), 2.0);
        assert_eq!(dual_update(0.05, 1000.0, 1000.0, 0.01), 0.05);
    }

    #[test]
    fn fixed_point_examples() {
        let up = uplink(vec![0], vec![vec![1e-8]], 1);
        let ord = DecodeOrder::new(&up);
        let coeffs = [sca_coefficients(1.0).unwrap()];
        // No better-channel vehicles: denominator is lambda alone.
        let p = fixed_point_power(0, 0.5, &coeffs, &[10.0], &up, &ord, 1e-6);
        assert_eq!(p, 1.0);
        let p = fixed_point_power(0, 1e12, &coeffs, &[10.0], &up, &ord, 1e-6);
        assert_eq!(p, 1e-6);
        let p = fixed_point_power(0, 0.0, &coeffs, &[10.0], &up, &ord, 1e-6);
        assert_eq!(p, 1000.0);
    }

    #[test]
    fn sweep_matches_single_updates() {
        let up = uplink(
            vec![0, 0, 1, 0, 1],
            vec![
                vec![3e-8, 1e-10],
                vec![1e-8, 2e-10],
                vec![4e-10, 5e-8],
                vec![2e-9, 1e-11],
                vec![1e-10, 7e-9],
            ],
            2,
        );
        let ord = DecodeOrder::new(&up);
        let powers = [100.0, 200.0, 300.0, 50.0, 10.0];
        let coeffs: Vec<_> = all_sinr(&powers, &up, &ord)
            .into_iter()
            .map(|s| sca_coefficients(s).unwrap())
            .collect();
        let lambda = [1e-3, 2e-3];
        let sweep = fixed_point_sweep(&lambda, &coeffs, &powers, &up, &ord, 1e-6);
        for k in 0..up.len() {
            let single = fixed_point_power(k, lambda[up.origin[k]], &coeffs, &powers, &up, &ord, 1e-6);
            assert!((sweep[k] - single).abs() <= 1e-12 * single, "{k}: {} vs {single}", sweep[k]);
        }
    }

    #[test]
    fn single_uplink_takes_whole_budget() {
        let up = uplink(vec![0], vec![vec![1e-9]], 1);
        let a = solve_power(&up, &PowerSolverParams::default());
        assert!((a.p[0] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn empty_and_masked() {
        let up = uplink(vec![], vec![], 2);
        let a = solve_power(&up, &PowerSolverParams::default());
        assert!(a.p.is_empty());

        let up = uplink(vec![0, 1], vec![vec![1e-8, 1e-10], vec![1e-10, 1e-8]], 2);
        let a = solve_power_masked(&up, &[true, false], &PowerSolverParams::default(), None);
        assert_eq!(a.p[1], 0.0);
        assert!((a.p[0] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn trace_has_one_row_per_round_and_edge() {
        let up = uplink(vec![0, 1, 1], vec![vec![1e-8, 1e-10], vec![1e-10, 1e-8], vec![1e-11, 2e-9]], 2);
        let params = PowerSolverParams::default();
        let mut rows = Vec::new();
        let a = solve_power_masked(&up, &[true; 3], &params, Some(&mut rows));
        assert_eq!(rows.len(), params.sca_rounds * 2);
        assert_eq!(write_power_trace(&rows).lines().count(), rows.len() + 1);
        assert_eq!(a.round_sum_rates.len(), params.sca_rounds + 1);
    }
}
