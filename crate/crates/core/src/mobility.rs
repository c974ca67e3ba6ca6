//! Vehicle trajectories (ingested from CSV or generated by random waypoint)
//! and the per-slot coverage index derived from them.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{stream_rng, EdgeNode, Point, ScenarioConfig, Stream, VehicleState};

/// Header line of the trace CSV format.
pub const TRACE_HEADER: &str = "vehicle_id,slot,x_m,y_m";

/// Positions of every vehicle over `slot_count` slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    /// Sorted by vehicle id.
    pub vehicles: Vec<VehicleState>,
    pub slot_count: usize,
}

impl TrajectorySet {
    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    /// Writes the set in the trace CSV format, one row per present (vehicle, slot).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for v in &self.vehicles {
            for (slot, pos) in v.positions.iter().enumerate() {
                if let Some(p) = pos {
                    out.push_str(&format!("{},{},{},{}\n", v.id, slot, p.x, p.y));
                }
            }
        }
        out
    }

    /// Mean per-slot displacement speed over all consecutive present pairs (m/s).
    pub fn mean_speed(&self, slot_duration_s: f64) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for v in &self.vehicles {
            for w in v.positions.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    total += a.distance(&b) / slot_duration_s;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed row: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: coordinate out of area ({x}, {y})")]
    OutOfArea { line: usize, x: f64, y: f64 },
    #[error("line {line}: slot {slot} outside horizon of {horizon} slots")]
    OutsideHorizon {
        line: usize,
        slot: usize,
        horizon: usize,
    },
    #[error("line {line}: duplicate row for vehicle {vehicle} at slot {slot}")]
    Duplicate {
        line: usize,
        vehicle: usize,
        slot: usize,
    },
}

pub fn load_trace(path: impl AsRef<Path>, cfg: &ScenarioConfig) -> Result<TrajectorySet, TraceError> {
    let file = std::fs::File::open(path)?;
    parse_trace(file, cfg)
}

/// Parses trace CSV. The header line is optional; positions outside the map
/// are rejected rather than clipped, and vehicles are absent in any slot
/// without a row.
pub fn parse_trace(reader: impl Read, cfg: &ScenarioConfig) -> Result<TrajectorySet, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut rows: BTreeMap<usize, BTreeMap<usize, Point>> = BTreeMap::new();
    let mut max_slot: Option<usize> = None;
    for (i, record) in rdr.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| TraceError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        if line == 1 && record.iter().collect::<Vec<_>>().join(",") == TRACE_HEADER {
            continue;
        }
        if record.len() != 4 {
            return Err(TraceError::Malformed {
                line,
                reason: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let bad = |field: &str| TraceError::Malformed {
            line,
            reason: format!("invalid {field}"),
        };
        let vehicle: usize = record[0].parse().map_err(|_| bad("vehicle_id"))?;
        let slot: usize = record[1].parse().map_err(|_| bad("slot"))?;
        let x: f64 = record[2].parse().map_err(|_| bad("x_m"))?;
        let y: f64 = record[3].parse().map_err(|_| bad("y_m"))?;
        let side = cfg.area_side_m;
        if !(0.0..=side).contains(&x) || !(0.0..=side).contains(&y) {
            return Err(TraceError::OutOfArea { line, x, y });
        }
        if slot >= cfg.horizon_slots {
            return Err(TraceError::OutsideHorizon {
                line,
                slot,
                horizon: cfg.horizon_slots,
            });
        }
        if rows.entry(vehicle).or_default().insert(slot, Point::new(x, y)).is_some() {
            return Err(TraceError::Duplicate { line, vehicle, slot });
        }
        max_slot = Some(max_slot.map_or(slot, |m| m.max(slot)));
    }

    let slot_count = max_slot.map_or(0, |m| m + 1);
    let vehicles = rows
        .into_iter()
        .map(|(id, pts)| {
            let mut positions = vec![None; slot_count];
            for (slot, p) in pts {
                positions[slot] = Some(p);
            }
            VehicleState { id, positions }
        })
        .collect();
    Ok(TrajectorySet { vehicles, slot_count })
}

/// Random-waypoint trace over the square map for `cfg.horizon_slots` slots.
///
/// Each vehicle draws a constant speed from `Normal(speed_mean, speed_var)`
/// clamped to at least 0.1 m/s, and a fresh uniform waypoint whenever it
/// reaches the current one. Vehicle `v` uses its own random stream, so traces
/// for different fleet sizes share their common prefix.
pub fn synth_trace(cfg: &ScenarioConfig, n_vehicles: usize, seed: u64) -> TrajectorySet {
    if n_vehicles == 0 {
        return TrajectorySet::default();
    }
    let side = cfg.area_side_m;
    let dt = cfg.slot_duration_s;
    let speed_dist =
        Normal::new(cfg.speed_mean_mps, cfg.speed_var.sqrt()).expect("speed variance is finite");
    let vehicles = (0..n_vehicles)
        .map(|id| {
            let mut rng = stream_rng(seed, Stream::Mobility, id as u64);
            let uniform_point =
                |rng: &mut rand_chacha::ChaCha8Rng| Point::new(rng.random::<f64>() * side, rng.random::<f64>() * side);
            let speed = speed_dist.sample(&mut rng).max(0.1);
            let mut pos = uniform_point(&mut rng);
            let mut target = uniform_point(&mut rng);
            let mut positions = Vec::with_capacity(cfg.horizon_slots);
            for _ in 0..cfg.horizon_slots {
                positions.push(Some(pos));
                let mut budget = speed * dt;
                loop {
                    let d = pos.distance(&target);
                    if d > budget {
                        let f = budget / d;
                        pos = Point::new(pos.x + (target.x - pos.x) * f, pos.y + (target.y - pos.y) * f);
                        break;
                    }
                    budget -= d;
                    pos = target;
                    target = uniform_point(&mut rng);
                }
            }
            VehicleState { id, positions }
        })
        .collect();
    TrajectorySet {
        vehicles,
        slot_count: cfg.horizon_slots,
    }
}

/// Coverage of one slot. Vehicle-local indices refer to `vehicles`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotCoverage {
    /// Ids of vehicles present in this slot, ascending.
    pub vehicles: Vec<usize>,
    pub positions: Vec<Point>,
    /// `dist[i][e]`: distance of vehicle `vehicles[i]` to edge `e` (m).
    pub dist: Vec<Vec<f64>>,
    /// Per edge, the ids of the vehicles within its range (`V_e^t`).
    pub covered: Vec<Vec<usize>>,
    /// Per vehicle, the edge it uploads through: the nearest covering edge,
    /// ties to the lower edge id.
    pub upload_edge: Vec<Option<usize>>,
}

impl SlotCoverage {
    fn index_of(&self, vehicle: usize) -> Option<usize> {
        self.vehicles.binary_search(&vehicle).ok()
    }
}

/// Per-slot coverage sets `V_e^t` and vehicle-edge distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageIndex {
    pub slots: Vec<SlotCoverage>,
    pub num_edges: usize,
}

impl CoverageIndex {
    pub fn slot(&self, t: usize) -> Option<&SlotCoverage> {
        self.slots.get(t)
    }

    pub fn covered(&self, e: usize, t: usize) -> &[usize] {
        self.slots.get(t).map_or(&[], |s| s.covered[e].as_slice())
    }

    pub fn distance(&self, vehicle: usize, e: usize, t: usize) -> Option<f64> {
        let s = self.slots.get(t)?;
        s.index_of(vehicle).map(|i| s.dist[i][e])
    }

    pub fn upload_edge(&self, vehicle: usize, t: usize) -> Option<usize> {
        let s = self.slots.get(t)?;
        s.index_of(vehicle).and_then(|i| s.upload_edge[i])
    }
}

pub fn build_coverage(traj: &TrajectorySet, edges: &[EdgeNode]) -> CoverageIndex {
    let slots = (0..traj.slot_count)
        .map(|t| {
            let mut cov = SlotCoverage {
                vehicles: Vec::new(),
                positions: Vec::new(),
                dist: Vec::new(),
                covered: vec![Vec::new(); edges.len()],
                upload_edge: Vec::new(),
            };
            for v in &traj.vehicles {
                let Some(pos) = v.position(t) else { continue };
                let dist: Vec<f64> = edges.iter().map(|e| pos.distance(&e.location)).collect();
                let mut nearest: Option<usize> = None;
                for (e, edge) in edges.iter().enumerate() {
                    if dist[e] <= edge.comm_range_m {
                        cov.covered[e].push(v.id);
                        if nearest.is_none_or(|n| dist[e] < dist[n]) {
                            nearest = Some(e);
                        }
                    }
                }
                cov.vehicles.push(v.id);
                cov.positions.push(pos);
                cov.dist.push(dist);
                cov.upload_edge.push(nearest);
            }
            cov
        })
        .collect();
    CoverageIndex {
        slots,
        num_edges: edges.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge_at(id: usize, x: f64, y: f64) -> EdgeNode {
        EdgeNode {
            id,
            location: Point::new(x, y),
            cpu_hz: 5.0e9,
            max_power_mw: 1000.0,
            comm_range_m: 500.0,
        }
    }

    fn single(x: f64, y: f64) -> TrajectorySet {
        TrajectorySet {
            vehicles: vec![VehicleState {
                id: 0,
                positions: vec![Some(Point::new(x, y))],
            }],
            slot_count: 1,
        }
    }

    #[test]
    fn parse_single_row() {
        let cfg = ScenarioConfig::default();
        let t = parse_trace("0,0,1500.0,1500.0\n".as_bytes(), &cfg).unwrap();
        assert_eq!(t.slot_count, 1);
        assert_eq!(t.vehicles.len(), 1);
        assert_eq!(t.vehicles[0].position(0), Some(Point::new(1500.0, 1500.0)));

        let with_header = format!("{TRACE_HEADER}\n0,0,1500.0,1500.0\n");
        assert_eq!(parse_trace(with_header.as_bytes(), &cfg).unwrap(), t);
    }

    #[test]
    fn parse_rejects_out_of_area() {
        let cfg = ScenarioConfig::default();
        let err = parse_trace("0,0,-5,10\n".as_bytes(), &cfg).unwrap_err();
        assert!(matches!(err, TraceError::OutOfArea { line: 1, .. }));
        assert!(err.to_string().contains("coordinate out of area"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cfg = ScenarioConfig::default();
        let text = format!("{TRACE_HEADER}\n0,0,1,1\n0,1,abc,1\n");
        match parse_trace(text.as_bytes(), &cfg).unwrap_err() {
            TraceError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let late = format!("0,{},1,1\n", cfg.horizon_slots);
        assert!(matches!(
            parse_trace(late.as_bytes(), &cfg).unwrap_err(),
            TraceError::OutsideHorizon { .. }
        ));
        assert!(matches!(
            parse_trace("3,0,1,1\n3,0,2,2\n".as_bytes(), &cfg).unwrap_err(),
            TraceError::Duplicate { line: 2, .. }
        ));
    }

    #[test]
    fn parse_empty_and_gaps() {
        let cfg = ScenarioConfig::default();
        let t = parse_trace("".as_bytes(), &cfg).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.slot_count, 0);

        let t = parse_trace("7,0,1,1\n7,2,3,3\n".as_bytes(), &cfg).unwrap();
        assert_eq!(t.slot_count, 3);
        assert_eq!(t.vehicles[0].id, 7);
        assert_eq!(t.vehicles[0].position(1), None);
        assert_eq!(t.vehicles[0].position(2), Some(Point::new(3.0, 3.0)));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ScenarioConfig {
            horizon_slots: 20,
            ..Default::default()
        };
        let t = synth_trace(&cfg, 5, 4);
        let back = parse_trace(t.to_csv().as_bytes(), &cfg).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = ScenarioConfig {
            horizon_slots: 50,
            ..Default::default()
        };
        assert!(synth_trace(&cfg, 0, 1).is_empty());
        let a = synth_trace(&cfg, 12, 99);
        assert_eq!(a, synth_trace(&cfg, 12, 99));
        assert_ne!(a, synth_trace(&cfg, 12, 100));
        for v in &a.vehicles {
            for p in v.positions.iter().flatten() {
                assert!((0.0..=cfg.area_side_m).contains(&p.x));
                assert!((0.0..=cfg.area_side_m).contains(&p.y));
            }
        }
    }

    #[test]
    fn coverage_boundary_is_inclusive() {
        let edges = [edge_at(0, 300.0, 400.0)];
        let cov = build_coverage(&single(0.0, 0.0), &edges);
        assert_eq!(cov.distance(0, 0, 0), Some(500.0));
        assert_eq!(cov.covered(0, 0), &[0]);
        assert_eq!(cov.upload_edge(0, 0), Some(0));

        let edges = [edge_at(0, 300.0, 400.1)];
        let cov = build_coverage(&single(0.0, 0.0), &edges);
        assert!(cov.covered(0, 0).is_empty());
        assert_eq!(cov.upload_edge(0, 0), None);
    }

    #[test]
    fn overlapping_coverage_and_nearest_upload() {
        let edges = [edge_at(0, 0.0, 0.0), edge_at(1, 600.0, 0.0)];
        let cov = build_coverage(&single(350.0, 0.0), &edges);
        assert_eq!(cov.covered(0, 0), &[0]);
        assert_eq!(cov.covered(1, 0), &[0]);
        assert_eq!(cov.upload_edge(0, 0), Some(1));

        // Equidistant: lower edge id wins.
        let cov = build_coverage(&single(300.0, 0.0), &edges);
        assert_eq!(cov.upload_edge(0, 0), Some(0));
    }

    #[test]
    fn coverage_is_pure() {
        let cfg = ScenarioConfig {
            horizon_slots: 10,
            ..Default::default()
        };
        let edges = crate::domain::place_edges(&cfg, 0);
        let t = synth_trace(&cfg, 30, 5);
        assert_eq!(build_coverage(&t, &edges), build_coverage(&t, &edges));
    }
}
