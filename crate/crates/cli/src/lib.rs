//! Plumbing behind the `vecsim` binary: scenario resolution and parameter
//! sweeps with their aggregate table.

use std::path::Path;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vecsim::domain::{ghz_to_hz, validate_config, ScenarioConfig};
use vecsim::env_engine::{run_episode, EnvParams, EpisodeMetrics, PolicyKind};
use vecsim::mobility::{load_trace, synth_trace, TrajectorySet};

/// Defaults, then the config file, then flag overrides.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.rng_seed = seed;
    }
    Ok(cfg)
}

/// Trajectories from a trace file, or synthesized from the episode seed.
pub fn resolve_mobility(path: Option<&Path>, cfg: &ScenarioConfig, seed: u64) -> anyhow::Result<TrajectorySet> {
    match path {
        Some(p) => load_trace(p, cfg).with_context(|| format!("loading mobility trace {}", p.display())),
        None => Ok(synth_trace(cfg, cfg.num_vehicles, seed)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Per-vehicle task probability per slot.
    ArrivalProb,
    /// Lower bound of the edge CPU range in GHz; the upper bound is kept.
    CpuRange,
}

impl SweepAxis {
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> anyhow::Result<ScenarioConfig> {
        let mut cfg = base.clone();
        match self {
            Self::ArrivalProb => cfg.arrival_prob = value,
            Self::CpuRange => cfg.cpu_range_hz[0] = ghz_to_hz(value),
        }
        if let Err(errs) = validate_config(&cfg) {
            let msg: Vec<String> = errs.iter().map(ToString::to_string).collect();
            bail!("{self:?} = {value}: {}", msg.join("; "));
        }
        Ok(cfg)
    }
}

/// Mean metrics over seeds for one (value, policy) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub policy: PolicyKind,
    pub seeds: usize,
    pub asr: f64,
    pub cr: f64,
    pub aap: f64,
    pub ast: f64,
    pub apt: f64,
    pub p_local: f64,
    pub p_migrated: f64,
}

impl SweepRow {
    fn mean_of(axis: SweepAxis, value: f64, policy: PolicyKind, runs: &[EpisodeMetrics]) -> Self {
        let n = runs.len() as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            axis,
            value,
            policy,
            seeds: runs.len(),
            asr: mean(|m| m.asr),
            cr: mean(|m| m.cr),
            aap: mean(|m| m.aap),
            ast: mean(|m| m.ast),
            apt: mean(|m| m.apt),
            p_local: mean(|m| m.p_local),
            p_migrated: mean(|m| m.p_migrated),
        }
    }
}

/// Runs the full cross product in parallel. Rows come out ordered by value,
/// then policy in the order given; each episode is seeded on its own, so the
/// table does not depend on scheduling.
pub fn run_sweep(
    base: &ScenarioConfig,
    axis: SweepAxis,
    values: &[f64],
    policies: &[PolicyKind],
    seeds: &[u64],
    params: &EnvParams,
) -> anyhow::Result<Vec<SweepRow>> {
    if values.is_empty() || policies.is_empty() || seeds.is_empty() {
        bail!("sweep needs at least one value, policy and seed");
    }
    let cfgs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize, u64)> = (0..values.len())
        .flat_map(|i| (0..policies.len()).flat_map(move |j| seeds.iter().map(move |&s| (i, j, s))))
        .collect();
    let metrics: Vec<EpisodeMetrics> = jobs
        .par_iter()
        .map(|&(i, j, seed)| {
            let cfg = &cfgs[i];
            let traj = synth_trace(cfg, cfg.num_vehicles, seed);
            log::debug!("{axis:?}={} {} seed {seed}", values[i], policies[j]);
            run_episode(policies[j], cfg, &traj, seed, params).metrics
        })
        .collect();
    Ok(metrics
        .chunks(seeds.len())
        .enumerate()
        .map(|(cell, runs)| {
            let (i, j) = (cell / policies.len(), cell % policies.len());
            SweepRow::mean_of(axis, values[i], policies[j], runs)
        })
        .collect())
}

pub fn write_sweep_csv(rows: &[SweepRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn read_sweep_csv(text: &str) -> anyhow::Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
