//! Edge CPU allocation and task processing time.
//!
//! Minimizing the total execution time `sum_k d_k c_k / c_k'` under the
//! budget `sum_k c_k' <= c_e` has the closed form
//!
//! ```text
//! c_k' = c_e * sqrt(d_k c_k) / sum_j sqrt(d_j c_j)
//! ```
//!
//! so each task's execution time is `sqrt(d_k c_k) * sum_j sqrt(d_j c_j) / c_e`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::TaskSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComputeError {
    #[error("task unallocated (task {0})")]
    Unallocated(usize),
}

/// CPU share per task for one edge, in the order of `cycles`.
pub fn kkt_allocate(cycles: &[f64], c_e: f64) -> Vec<f64> {
    let roots: Vec<f64> = cycles.iter().map(|c| c.sqrt()).collect();
    let total: f64 = roots.iter().sum();
    roots.iter().map(|r| c_e * r / total).collect()
}

/// Sum of execution times `sum_k cycles_k / share_k`.
pub fn total_exec_time(cycles: &[f64], shares: &[f64]) -> f64 {
    cycles.iter().zip(shares).map(|(c, s)| c / s).sum()
}

/// Wired migration delay `d_k * dist * zeta / z`; zero for local execution.
pub fn wired_time(size_bits: f64, from: usize, to: usize, dist_m: f64, discount_per_m: f64, wired_rate_bps: f64) -> f64 {
    if from == to {
        0.0
    } else {
        size_bits * dist_m * discount_per_m / wired_rate_bps
    }
}

/// Per-task allocation of one slot. Indices follow the slot's task list.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComputeAssignment {
    /// CPU share (Hz); `None` for tasks that are not executed.
    pub c: Vec<Option<f64>>,
    pub exec_time: Vec<f64>,
    pub wired_time: Vec<f64>,
    pub processing_time: Vec<f64>,
}

/// Allocates every edge's CPU among the tasks sent to it.
///
/// `target[k]` is the executing edge of task `k`, or `None` when the task is
/// not executed. `edge_dist[e][f]` is the wired distance between edges.
pub fn allocate_slot(
    tasks: &[TaskSpec],
    target: &[Option<usize>],
    cpu_hz: &[f64],
    edge_dist: &[Vec<f64>],
    discount_per_m: f64,
    wired_rate_bps: f64,
) -> ComputeAssignment {
    let n = tasks.len();
    let mut out = ComputeAssignment {
        c: vec![None; n],
        exec_time: vec![f64::NAN; n],
        wired_time: vec![f64::NAN; n],
        processing_time: vec![f64::NAN; n],
    };
    for (e, &c_e) in cpu_hz.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&k| target[k] == Some(e)).collect();
        let cycles: Vec<f64> = members.iter().map(|&k| tasks[k].cycles()).collect();
        for (&k, share) in members.iter().zip(kkt_allocate(&cycles, c_e)) {
            out.c[k] = Some(share);
        }
    }
    for (k, task) in tasks.iter().enumerate() {
        if let Some(to) = target[k] {
            let from = task.origin_edge;
            out.wired_time[k] = wired_time(task.size_bits, from, to, edge_dist[from][to], discount_per_m, wired_rate_bps);
            if let Ok(p) = processing_time(task, k, out.wired_time[k], &out) {
                out.exec_time[k] = p - out.wired_time[k];
                out.processing_time[k] = p;
            }
        }
    }
    out
}

/// `n_k = wired + d_k c_k / c_k'` for task index `k` of an assignment.
pub fn processing_time(task: &TaskSpec, k: usize, wired_s: f64, assignment: &ComputeAssignment) -> Result<f64, ComputeError> {
    match assignment.c.get(k).copied().flatten() {
        Some(share) if share > 0.0 => Ok(wired_s + task.cycles() / share),
        _ => Err(ComputeError::Unallocated(task.id)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn task(id: usize, size_bits: f64, origin_edge: usize) -> TaskSpec {
        TaskSpec {
            id,
            vehicle: id,
            birth_slot: 0,
            size_bits,
            cycles_per_bit: 500.0,
            deadline_s: 5.0,
            origin_edge,
        }
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(kkt_allocate(&[7e9], 3e9), vec![3e9]);
        assert!(kkt_allocate(&[], 3e9).is_empty());

        let c = kkt_allocate(&[4e9, 1e9], 3e9);
        assert!((c[0] - 2e9).abs() < 1e-3 && (c[1] - 1e9).abs() < 1e-3);
        assert!((4e9 / c[0] - 2.0).abs() < 1e-12);
        assert!((1e9 / c[1] - 1.0).abs() < 1e-12);

        for c in kkt_allocate(&[5e8; 4], 8e9) {
            assert!((c - 2e9).abs() < 1e-3);
        }
    }

    #[test]
    fn wired_examples() {
        assert_eq!(wired_time(8e6, 2, 2, 1000.0, 6.667e-4, 5e7), 0.0);
        // 8e6 * 1000 * 6.667e-4 / 5e7
        assert!((wired_time(8e6, 0, 1, 1000.0, 6.667e-4, 5e7) - 0.106_672).abs() < 1e-12);
        assert_eq!(wired_time(8e6, 0, 1, 0.0, 6.667e-4, 5e7), 0.0);
    }

    #[test]
    fn processing_examples() {
        let tasks = [task(0, 8e6, 0), task(1, 2e6, 1)];
        let dist = vec![vec![0.0, 1000.0], vec![1000.0, 0.0]];
        let a = allocate_slot(&tasks, &[Some(0), Some(0)], &[3e9, 5e9], &dist, 6.667e-4, 5e7);
        // cycles 4e9 and 1e9 on 3 GHz: shares 2 and 1 GHz.
        assert!((a.processing_time[0] - 2.0).abs() < 1e-12);
        let wired = 2e6 * 1000.0 * 6.667e-4 / 5e7;
        assert!((a.processing_time[1] - (1.0 + wired)).abs() < 1e-12);
        assert_eq!(a.wired_time[1], wired);

        let a = allocate_slot(&tasks, &[Some(0), None], &[3e9, 5e9], &dist, 6.667e-4, 5e7);
        assert!(a.processing_time[1].is_nan());
        let err = processing_time(&tasks[1], 1, 0.0, &a).unwrap_err();
        assert_eq!(err.to_string(), "task unallocated (task 1)");
    }

    #[test]
    fn processing_sum_is_objective_value() {
        let tasks = [task(0, 3e6, 0), task(1, 1e6, 0), task(2, 9e6, 0)];
        let a = allocate_slot(&tasks, &[Some(0); 3], &[6e9], &[vec![0.0]], 6.667e-4, 5e7);
        let shares: Vec<f64> = a.c.iter().map(|c| c.unwrap()).collect();
        let cycles: Vec<f64> = tasks.iter().map(|t| t.cycles()).collect();
        let sum: f64 = a.processing_time.iter().sum();
        let objective = total_exec_time(&cycles, &shares);
        assert!((sum - objective).abs() <= 1e-12 * objective);
        // (sum sqrt(dc))^2 / c_e
        let closed = cycles.iter().map(|c| c.sqrt()).sum::<f64>().powi(2) / 6e9;
        assert!((objective - closed).abs() <= 1e-12 * closed);
    }

    proptest! {
        #[test]
        fn budget_is_tight(cycles in proptest::collection::vec(1e6f64..2e10, 1..12), c_e in 1e9f64..1e10) {
            let sum: f64 = kkt_allocate(&cycles, c_e).iter().sum();
            prop_assert!((sum - c_e).abs() <= 1e-9 * c_e);
        }

        #[test]
        fn fractions_are_scale_equivariant(
            cycles in proptest::collection::vec(1e6f64..2e10, 1..12), alpha in 1e-3f64..1e3
        ) {
            let a = kkt_allocate(&cycles, 1.0);
            let scaled: Vec<f64> = cycles.iter().map(|c| c * alpha).collect();
            let b = kkt_allocate(&scaled, 1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn no_perturbation_helps(
            cycles in proptest::collection::vec(1e6f64..2e10, 2..8), i in 0usize..8, j in 0usize..8, f in 0.001f64..0.5
        ) {
            let (i, j) = (i % cycles.len(), j % cycles.len());
            prop_assume!(i != j);
            let c = kkt_allocate(&cycles, 5e9);
            let mut moved = c.clone();
            let delta = f * moved[i];
            moved[i] -= delta;
            moved[j] += delta;
            prop_assert!(total_exec_time(&cycles, &c) <= total_exec_time(&cycles, &moved));
        }
    }
}
