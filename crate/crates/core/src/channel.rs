//! Rayleigh block-fading uplink channel, NOMA decoding order and the SINR /
//! upload-time model.
//!
//! Each edge decodes its own uplinks with successive interference
//! cancellation: stronger channels first, so a vehicle only sees intra-edge
//! interference from same-edge vehicles with a strictly worse channel. Every
//! vehicle transmitting to another edge is inter-edge interference.

use rand_distr::{Distribution, Exp1};

use crate::domain::{stream_rng, ScenarioConfig, Stream};
use crate::mobility::{CoverageIndex, SlotCoverage};

/// Pairs farther than this many radio ranges from an edge are treated as
/// contributing no interference there.
pub const INTERFERENCE_RANGE_FACTOR: f64 = 3.0;

/// Distances are floored to this many metres before applying path loss.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// `|h|^2` for one pair: small-scale power `fading2 ~ Exp(1)` over
/// `dist^path_loss_exp`.
pub fn path_gain2(fading2: f64, dist_m: f64, path_loss_exp: f64) -> f64 {
    fading2 / dist_m.max(MIN_DISTANCE_M).powf(path_loss_exp)
}

/// Channel gains of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotChannel {
    /// Ids of the present vehicles, in the order of the coverage slot.
    pub vehicles: Vec<usize>,
    /// `gain2[i][e]`; zero marks a pair outside the interference horizon.
    pub gain2: Vec<Vec<f64>>,
}

/// Gains `|h_{v,e}^t|^2` for every slot of a coverage index.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub slots: Vec<SlotChannel>,
    pub seed: u64,
}

impl ChannelRealization {
    pub fn gain2(&self, vehicle: usize, e: usize, t: usize) -> Option<f64> {
        let s = self.slots.get(t)?;
        let i = s.vehicles.binary_search(&vehicle).ok()?;
        Some(s.gain2[i][e])
    }
}

/// Draws the fading of one slot. Fading is i.i.d. per slot and per
/// (vehicle, edge); each vehicle's draws come from a stream keyed by
/// `(seed, slot, vehicle)`, so they do not depend on who else is present.
pub fn realize_slot(cov: &SlotCoverage, cfg: &ScenarioConfig, seed: u64, slot: usize) -> SlotChannel {
    let horizon = INTERFERENCE_RANGE_FACTOR * cfg.comm_range_m;
    let gain2 = cov
        .vehicles
        .iter()
        .zip(&cov.dist)
        .map(|(&v, dist)| {
            let mut rng = stream_rng(seed, Stream::Fading, ((slot as u64) << 32) | v as u64);
            dist.iter()
                .map(|&d| {
                    let x: f64 = Exp1.sample(&mut rng);
                    if d <= horizon {
                        path_gain2(x, d, cfg.path_loss_exp)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    SlotChannel {
        vehicles: cov.vehicles.clone(),
        gain2,
    }
}

pub fn realize_channel(cov: &CoverageIndex, cfg: &ScenarioConfig, seed: u64) -> ChannelRealization {
    ChannelRealization {
        slots: cov
            .slots
            .iter()
            .enumerate()
            .map(|(t, s)| realize_slot(s, cfg, seed, t))
            .collect(),
        seed,
    }
}

/// The uplink transmitters of one slot together with the radio parameters
/// the interference model needs. Transmitter `k` sends to `origin[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkSet {
    /// Vehicle id per transmitter (decoding tie-break).
    pub vehicle: Vec<usize>,
    pub origin: Vec<usize>,
    /// `gain2[k][e]` from transmitter `k` to edge `e`.
    pub gain2: Vec<Vec<f64>>,
    /// Uplink power budget `p_e` per edge (mW).
    pub max_power_mw: Vec<f64>,
    pub bandwidth_hz: f64,
    pub noise_mw: f64,
}

impl UplinkSet {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.max_power_mw.len()
    }

    /// Transmitter's gain to its own edge.
    pub fn own_gain2(&self, k: usize) -> f64 {
        self.gain2[k][self.origin[k]]
    }
}

/// SIC decoding order at every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOrder {
    /// Per edge, its transmitters from best to worst channel.
    pub per_edge: Vec<Vec<usize>>,
    /// Position of each transmitter in its edge's order.
    pub rank: Vec<usize>,
}

impl DecodeOrder {
    /// Sorts by own-edge gain, descending; equal gains put the lower vehicle
    /// id first (treated as the better channel).
    pub fn new(up: &UplinkSet) -> Self {
        let mut per_edge = vec![Vec::new(); up.num_edges()];
        for k in 0..up.len() {
            per_edge[up.origin[k]].push(k);
        }
        let mut rank = vec![0; up.len()];
        for list in &mut per_edge {
            list.sort_by(|&a, &b| {
                up.own_gain2(b)
                    .total_cmp(&up.own_gain2(a))
                    .then(up.vehicle[a].cmp(&up.vehicle[b]))
            });
            for (r, &k) in list.iter().enumerate() {
                rank[k] = r;
            }
        }
        Self { per_edge, rank }
    }

    /// `V_h`: same-edge transmitters with a worse channel than `k`.
    pub fn worse_than(&self, k: usize, origin: usize) -> &[usize] {
        &self.per_edge[origin][self.rank[k] + 1..]
    }

    /// Same-edge transmitters with a better channel than `k`.
    pub fn better_than(&self, k: usize, origin: usize) -> &[usize] {
        &self.per_edge[origin][..self.rank[k]]
    }
}

/// Interference-plus-noise seen by transmitter `k` at its own edge.
pub fn interference(k: usize, powers: &[f64], up: &UplinkSet, ord: &DecodeOrder) -> f64 {
    let e = up.origin[k];
    let intra: f64 = ord
        .worse_than(k, e)
        .iter()
        .map(|&j| up.gain2[j][e] * powers[j])
        .sum();
    let inter: f64 = (0..up.len())
        .filter(|&j| up.origin[j] != e)
        .map(|j| up.gain2[j][e] * powers[j])
        .sum();
    intra + inter + up.noise_mw
}

/// SINR of transmitter `k` at its own edge under the full power vector.
pub fn sinr(k: usize, powers: &[f64], up: &UplinkSet, ord: &DecodeOrder) -> f64 {
    up.own_gain2(k) * powers[k] / interference(k, powers, up, ord)
}

/// Interference-plus-noise of every transmitter, in `O(N * E)`.
pub fn all_interference(powers: &[f64], up: &UplinkSet, ord: &DecodeOrder) -> Vec<f64> {
    let ne = up.num_edges();
    let mut foreign = vec![0.0; ne];
    for (k, row) in up.gain2.iter().enumerate() {
        for (e, acc) in foreign.iter_mut().enumerate() {
            if up.origin[k] != e {
                *acc += row[e] * powers[k];
            }
        }
    }
    let mut out = vec![0.0; up.len()];
    for (e, list) in ord.per_edge.iter().enumerate() {
        // Walk from the worst channel up, accumulating the intra-edge term.
        let mut own = 0.0;
        for &k in list.iter().rev() {
            out[k] = own + foreign[e] + up.noise_mw;
            own += up.gain2[k][e] * powers[k];
        }
    }
    out
}

pub fn all_sinr(powers: &[f64], up: &UplinkSet, ord: &DecodeOrder) -> Vec<f64> {
    all_interference(powers, up, ord)
        .into_iter()
        .enumerate()
        .map(|(k, i)| up.own_gain2(k) * powers[k] / i)
        .collect()
}

/// Shannon rate `b * log2(1 + SINR)` in bits/s.
pub fn rate_bps(sinr: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * sinr.ln_1p() / std::f64::consts::LN_2
}

/// Upload time `d_k / (b log2(1 + SINR))`; infinite when the SINR is zero.
pub fn upload_time(size_bits: f64, sinr: f64, bandwidth_hz: f64) -> f64 {
    if sinr <= 0.0 {
        return f64::INFINITY;
    }
    size_bits / rate_bps(sinr, bandwidth_hz)
}
