//! Scenario configuration, unit helpers and the value types shared by every
//! other module.
//!
//! All stored quantities use base units: bits, Hz, mW, metres and seconds.
//! Conversions (dBm, MB, GHz) happen only at the edges, through the helpers
//! in this module.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bits in one (decimal) megabyte.
pub const BITS_PER_MB: f64 = 8.0e6;

pub fn mb_to_bits(mb: f64) -> f64 {
    mb * BITS_PER_MB
}

pub fn ghz_to_hz(ghz: f64) -> f64 {
    ghz * 1.0e9
}

/// Converts a power level in dBm to milliwatts.
///
/// Integral multiples of 10 dBm are computed from an exact power of ten so that
/// e.g. `-90 dBm` maps to exactly `1e-9` mW.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    let tenths = dbm / 10.0;
    if tenths.fract() == 0.0 && tenths.abs() <= 22.0 {
        let mag = 10f64.powi(tenths.abs() as i32);
        if tenths < 0.0 {
            1.0 / mag
        } else {
            mag
        }
    } else {
        10f64.powf(tenths)
    }
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// A position on the simulated map, in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Full description of one simulated scenario.
///
/// The defaults reproduce the reference system-model parameters: a 3 km x 3 km
/// map with nine edge nodes on a uniform 3x3 grid, 20 MHz of shared V2I
/// bandwidth, 1 W of uplink power per edge, a 500 m radio range, a 50 Mbps wired
/// backhaul, -90 dBm noise and a path-loss exponent of 3. Tasks carry
/// 0.01-5 MB of data at 500 cycles/bit with 5-10 s deadlines; edge CPUs are
/// drawn from 3-10 GHz.
///
/// The on-disk form is a flat TOML document whose keys are exactly the field
/// names below; ranges are two-element arrays `[low, high]` and unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_edges: usize,
    /// Grid placement `[rows, cols]`; edges sit at the cell centres.
    pub edge_grid: [usize; 2],
    pub area_side_m: f64,
    pub slot_duration_s: f64,
    pub horizon_slots: usize,
    pub bandwidth_hz: f64,
    pub max_power_mw: f64,
    pub cpu_range_hz: [f64; 2],
    pub comm_range_m: f64,
    pub wired_rate_bps: f64,
    pub distance_discount_per_m: f64,
    pub noise_mw: f64,
    pub path_loss_exp: f64,
    pub task_size_bits_range: [f64; 2],
    pub cycles_per_bit: f64,
    pub deadline_s_range: [f64; 2],
    pub arrival_prob: f64,
    pub rng_seed: u64,
    /// Fleet size of the synthetic mobility generator.
    pub num_vehicles: usize,
    /// Mean of the synthetic per-vehicle speed distribution (m/s).
    pub speed_mean_mps: f64,
    /// Variance of the synthetic per-vehicle speed distribution ((m/s)^2).
    pub speed_var: f64,
    /// Tasks per edge per slot exposed in an observation.
    pub obs_cap: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_edges: 9,
            edge_grid: [3, 3],
            area_side_m: 3000.0,
            slot_duration_s: 1.0,
            horizon_slots: 300,
            bandwidth_hz: 20.0e6,
            max_power_mw: 1.0e3,
            cpu_range_hz: [ghz_to_hz(3.0), ghz_to_hz(10.0)],
            comm_range_m: 500.0,
            wired_rate_bps: 50.0e6,
            distance_discount_per_m: 6.667e-4,
            noise_mw: dbm_to_mw(-90.0),
            path_loss_exp: 3.0,
            task_size_bits_range: [mb_to_bits(0.01), mb_to_bits(5.0)],
            cycles_per_bit: 500.0,
            deadline_s_range: [5.0, 10.0],
            arrival_prob: 0.5,
            rng_seed: 0,
            num_vehicles: 60,
            speed_mean_mps: 5.22,
            speed_var: 2.61,
            obs_cap: 10,
        }
    }
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field}: range inverted (low {low} > high {high})")]
    RangeInverted {
        field: &'static str,
        low: f64,
        high: f64,
    },
    #[error("{field} must be strictly positive (got {value})")]
    NotPositive { field: &'static str, value: f64 },
    #[error("arrival_prob out of [0,1] (got {0})")]
    ArrivalProb(f64),
    #[error("num_edges = {num_edges} does not match edge_grid {rows}x{cols}")]
    GridMismatch {
        num_edges: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{field} must be at least 1")]
    ZeroCount { field: &'static str },
}

/// Failure to read a configuration document.
#[derive(Debug, Error)]
pub enum ConfigLoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {}", join_errors(.0))]
    Invalid(Vec<ConfigError>),
}

fn join_errors(errs: &[ConfigError]) -> String {
    errs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigLoadError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        validate_config(&cfg).map_err(ConfigLoadError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigLoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    /// Same scenario with a differently sized grid of edges.
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.edge_grid = [rows, cols];
        self.num_edges = rows * cols;
        self
    }
}

/// Checks every invariant of `cfg` and reports all violations at once.
pub fn validate_config(cfg: &ScenarioConfig) -> Result<(), Vec<ConfigError>> {
    let mut errs = Vec::new();

    let positive = [
        ("area_side_m", cfg.area_side_m),
        ("slot_duration_s", cfg.slot_duration_s),
        ("bandwidth_hz", cfg.bandwidth_hz),
        ("max_power_mw", cfg.max_power_mw),
        ("comm_range_m", cfg.comm_range_m),
        ("wired_rate_bps", cfg.wired_rate_bps),
        ("distance_discount_per_m", cfg.distance_discount_per_m),
        ("noise_mw", cfg.noise_mw),
        ("path_loss_exp", cfg.path_loss_exp),
        ("cycles_per_bit", cfg.cycles_per_bit),
        ("speed_mean_mps", cfg.speed_mean_mps),
    ];
    for (field, value) in positive {
        // `!(v > 0)` also catches NaN.
        if !(value > 0.0) {
            errs.push(ConfigError::NotPositive { field, value });
        }
    }
    if !(cfg.speed_var >= 0.0) {
        errs.push(ConfigError::NotPositive {
            field: "speed_var",
            value: cfg.speed_var,
        });
    }

    let ranges = [
        ("cpu_range_hz", cfg.cpu_range_hz),
        ("task_size_bits_range", cfg.task_size_bits_range),
        ("deadline_s_range", cfg.deadline_s_range),
    ];
    for (field, [low, high]) in ranges {
        if !(low > 0.0) {
            errs.push(ConfigError::NotPositive { field, value: low });
        }
        if low > high {
            errs.push(ConfigError::RangeInverted { field, low, high });
        }
    }

    if !(0.0..=1.0).contains(&cfg.arrival_prob) {
        errs.push(ConfigError::ArrivalProb(cfg.arrival_prob));
    }
    if cfg.num_edges == 0 {
        errs.push(ConfigError::ZeroCount { field: "num_edges" });
    }
    if cfg.obs_cap == 0 {
        errs.push(ConfigError::ZeroCount { field: "obs_cap" });
    }
    let [rows, cols] = cfg.edge_grid;
    if rows * cols != cfg.num_edges {
        errs.push(ConfigError::GridMismatch {
            num_edges: cfg.num_edges,
            rows,
            cols,
        });
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// An edge node: a roadside unit or base station with a co-located CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNode {
    pub id: usize,
    pub location: Point,
    pub cpu_hz: f64,
    pub max_power_mw: f64,
    pub comm_range_m: f64,
}

/// Places the edges at the cell centres of the configured grid and draws each
/// CPU frequency uniformly from `cpu_range_hz`.
///
/// The uniform variate of edge `i` depends only on `(seed, i)`, so sweeping the
/// CPU range with a fixed seed moves every edge monotonically.
pub fn place_edges(cfg: &ScenarioConfig, seed: u64) -> Vec<EdgeNode> {
    let [rows, cols] = cfg.edge_grid;
    let cell_w = cfg.area_side_m / cols as f64;
    let cell_h = cfg.area_side_m / rows as f64;
    let mut rng = stream_rng(seed, Stream::EdgeCpu, 0);
    let [lo, hi] = cfg.cpu_range_hz;
    (0..rows * cols)
        .map(|id| {
            let (r, c) = (id / cols, id % cols);
            let u: f64 = rng.random();
            EdgeNode {
                id,
                location: Point::new((c as f64 + 0.5) * cell_w, (r as f64 + 0.5) * cell_h),
                cpu_hz: lo + u * (hi - lo),
                max_power_mw: cfg.max_power_mw,
                comm_range_m: cfg.comm_range_m,
            }
        })
        .collect()
}

/// A computation task `(d_k, c_k, t_k)` requested by a vehicle in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub vehicle: usize,
    pub birth_slot: usize,
    pub size_bits: f64,
    pub cycles_per_bit: f64,
    pub deadline_s: f64,
    /// Edge the vehicle uploads through at birth.
    pub origin_edge: usize,
}

impl TaskSpec {
    /// Total CPU cycles needed, `d_k * c_k`.
    pub fn cycles(&self) -> f64 {
        self.size_bits * self.cycles_per_bit
    }
}

/// Per-slot positions of one vehicle; `None` marks slots outside its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub positions: Vec<Option<Point>>,
}

impl VehicleState {
    pub fn position(&self, slot: usize) -> Option<Point> {
        self.positions.get(slot).copied().flatten()
    }
}

/// Independent random streams derived from one episode seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stream {
    EdgeCpu = 1,
    Mobility = 2,
    Fading = 3,
    Arrivals = 4,
    RandomPolicy = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

pub(crate) fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, index))
}
