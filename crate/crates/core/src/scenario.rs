//! Synthetic deployments: PPP-placed SBSs, UEs scattered every slot and
//! attached to one of their nearest SBSs, indoor path loss, and several
//! task arrival processes.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{downlink_rate, SlotState};

/// RNG sub-streams of one replication.
const STREAM_TOPOLOGY: u64 = 0;
const STREAM_SLOTS: u64 = 1;
const STREAM_GRID: u64 = 2;
const STREAM_UE_STATE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Side of the square deployment area, meters.
    pub side: f64,
    pub sbs_positions: Vec<Point>,
    /// How many times the PPP draw was repeated because it came up empty.
    pub redraws: u32,
}

impl Topology {
    pub fn n_sbs(&self) -> usize {
        self.sbs_positions.len()
    }

    /// Indices of the `k` SBSs closest to `p`, nearest first.
    pub fn nearest(&self, p: &Point, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_sbs()).collect();
        idx.sort_by(|&a, &b| {
            p.distance(&self.sbs_positions[a])
                .total_cmp(&p.distance(&self.sbs_positions[b]))
                .then(a.cmp(&b))
        });
        idx.truncate(k.max(1));
        idx
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Homogeneous PPP on a `side`×`side` square. An empty draw is repeated on
/// the next sub-stream.
pub fn generate_topology(side: f64, density: f64, seed: u64) -> Result<Topology> {
    if !(side > 0.0 && density > 0.0) {
        return Err(Error::Parameter(format!("area side {side} and density {density} must be positive")));
    }
    let mean = density * side * side;
    let poisson = Poisson::new(mean).map_err(|e| Error::Parameter(format!("PPP mean {mean}: {e}")))?;
    let mut rng = rng_for(seed, STREAM_TOPOLOGY);
    let mut redraws = 0;
    loop {
        let count = poisson.sample(&mut rng) as usize;
        if count > 0 {
            let sbs_positions = (0..count)
                .map(|_| Point {
                    x: rng.random_range(0.0..side),
                    y: rng.random_range(0.0..side),
                })
                .collect();
            return Ok(Topology {
                side,
                sbs_positions,
                redraws,
            });
        }
        redraws += 1;
        if redraws > 10_000 {
            return Err(Error::Parameter(format!("PPP with mean {mean} keeps coming up empty")));
        }
    }
}

/// UE positions and their serving SBS for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct UeAssignment {
    pub positions: Vec<Point>,
    pub serving: Vec<usize>,
}

/// Scatters `n_ues` UEs uniformly and attaches each to one of its `k`
/// nearest SBSs, chosen uniformly.
pub fn scatter_and_assign_ues<R: Rng>(topology: &Topology, n_ues: usize, k: usize, rng: &mut R) -> UeAssignment {
    let mut positions = Vec::with_capacity(n_ues);
    let mut serving = Vec::with_capacity(n_ues);
    for _ in 0..n_ues {
        let p = Point {
            x: rng.random_range(0.0..topology.side),
            y: rng.random_range(0.0..topology.side),
        };
        let near = topology.nearest(&p, k.min(topology.n_sbs()));
        serving.push(near[rng.random_range(0..near.len())]);
        positions.push(p);
    }
    UeAssignment { positions, serving }
}

/// Indoor path loss L = 20·log10(f[MHz]) + N_L·log10(d[m]) − 28 dB as a
/// linear power gain. Distances under 1 m count as 1 m.
pub fn channel_gain(distance: f64, freq_mhz: f64, path_loss_coeff: f64) -> f64 {
    let d = distance.max(1.0);
    let loss_db = 20.0 * freq_mhz.log10() + path_loss_coeff * d.log10() - 28.0;
    10f64.powf(-loss_db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioParams {
    pub bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
    pub ue_power_dbm: f64,
    pub sbs_power_dbm: f64,
    pub freq_mhz: f64,
    pub path_loss_coeff: f64,
    /// Input data per task, bits.
    pub task_bits: f64,
    /// Upper end of the per-UE downlink volume per slot, bits.
    pub downlink_bits_max: f64,
    /// Multiplies downlink energy in joules per slot to get the energy unit
    /// used by the deficit queues.
    pub tx_energy_scale: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 20e6,
            noise_dbm_per_hz: -174.0,
            ue_power_dbm: 10.0,
            sbs_power_dbm: 20.0,
            freq_mhz: 900.0,
            path_loss_coeff: 20.0,
            task_bits: 0.2e6,
            downlink_bits_max: 1e6,
            tx_energy_scale: 1.0 / 60.0,
        }
    }
}

impl RadioParams {
    fn noise_watts(&self) -> f64 {
        dbm_to_watts(self.noise_dbm_per_hz) * self.bandwidth_hz
    }
}

/// How UEs generate tasks. Rates are tasks/sec per UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalModel {
    /// π_m ~ U[0, π_max], fresh every slot.
    IidUniform,
    /// A `cells`×`cells` grid of means drawn once per run from
    /// N(10, (σ_fraction·σ_max)²), clipped to [0, 20] and scaled by
    /// (π_max/2)/10 so that σ = 0 matches the i.i.d. mean. A UE's rate is
    /// its cell's value.
    Grid {
        sigma_fraction: f64,
        sigma_max: f64,
        cells: usize,
    },
    /// Each UE alternates `on_slots` at π_max and `off_slots` at π_max/8,
    /// with its own phase.
    Bursty { on_slots: usize, off_slots: usize },
    /// Each UE runs a two-state chain over {low, high}·π_max and stays put
    /// with probability `stay`.
    Markov { low: f64, high: f64, stay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub area_side: f64,
    pub density: f64,
    pub ue_min: usize,
    pub ue_max: usize,
    pub pi_max: f64,
    pub k_nearest: usize,
    pub arrival: ArrivalModel,
    pub radio: RadioParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            area_side: 100.0,
            density: 1e-3,
            ue_min: 200,
            ue_max: 600,
            pi_max: 4.0,
            k_nearest: 3,
            arrival: ArrivalModel::IidUniform,
            radio: RadioParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.area_side > 0.0 && self.density > 0.0) {
            return bad("area side and density must be positive".into());
        }
        if self.ue_min > self.ue_max {
            return bad(format!("UE range [{}, {}] is empty", self.ue_min, self.ue_max));
        }
        if !(self.pi_max >= 0.0 && self.pi_max.is_finite()) {
            return bad(format!("pi_max {} must be finite and non-negative", self.pi_max));
        }
        if self.k_nearest == 0 {
            return bad("k_nearest must be at least 1".into());
        }
        match &self.arrival {
            ArrivalModel::Grid {
                sigma_fraction,
                sigma_max,
                cells,
            } => {
                if !(*sigma_fraction >= 0.0 && *sigma_max >= 0.0 && *cells >= 1) {
                    return bad("grid needs sigma_fraction, sigma_max >= 0 and cells >= 1".into());
                }
            }
            ArrivalModel::Bursty { on_slots, off_slots } => {
                if on_slots + off_slots == 0 {
                    return bad("bursty period must be positive".into());
                }
            }
            ArrivalModel::Markov { low, high, stay } => {
                if !(0.0..=1.0).contains(stay) || !(0.0..=1.0).contains(low) || !(0.0..=1.0).contains(high) {
                    return bad("markov low/high are fractions of pi_max and stay a probability".into());
                }
            }
            ArrivalModel::IidUniform => {}
        }
        let r = &self.radio;
        if !(r.bandwidth_hz > 0.0 && r.freq_mhz > 0.0 && r.task_bits >= 0.0 && r.downlink_bits_max >= 0.0) {
            return bad("radio parameters must be positive".into());
        }
        Ok(())
    }
}

/// Per-SBS uplink delay cost D^u_i = Σ_m s·π_m/r^u_im and downlink energy
/// E^tx_i = Σ_m P^d·w_m/r^d_im over the UEs it serves. UEs whose rate
/// underflows to zero are skipped and counted.
pub fn slot_link_costs(
    topology: &Topology,
    assignment: &UeAssignment,
    rates: &[f64],
    downlink_bits: &[f64],
    radio: &RadioParams,
) -> (Vec<f64>, Vec<f64>, usize) {
    let n = topology.n_sbs();
    let mut uplink = vec![0.0; n];
    let mut energy = vec![0.0; n];
    let mut skipped = 0;
    let noise = radio.noise_watts();
    let (pu, pd) = (dbm_to_watts(radio.ue_power_dbm), dbm_to_watts(radio.sbs_power_dbm));
    for (m, &i) in assignment.serving.iter().enumerate() {
        let d = assignment.positions[m].distance(&topology.sbs_positions[i]);
        let gain = channel_gain(d, radio.freq_mhz, radio.path_loss_coeff);
        let (Ok(ru), Ok(rd)) = (
            downlink_rate(pu, gain, noise, radio.bandwidth_hz),
            downlink_rate(pd, gain, noise, radio.bandwidth_hz),
        ) else {
            skipped += 1;
            continue;
        };
        if !(ru > 0.0 && rd > 0.0) {
            skipped += 1;
            continue;
        }
        uplink[i] += radio.task_bits * rates[m] / ru;
        energy[i] += pd * downlink_bits[m] / rd * radio.tx_energy_scale;
    }
    (uplink, energy, skipped)
}

/// Deterministic per-replication slot generator.
#[derive(Debug, Clone)]
pub struct ScenarioStream {
    cfg: ScenarioConfig,
    topology: Topology,
    rng: ChaCha8Rng,
    grid_means: Vec<f64>,
    /// Per-UE-slot persistent state: burst phase or Markov state.
    ue_state: Vec<usize>,
    ue_rng: ChaCha8Rng,
    slot: usize,
    skipped_links: usize,
}

impl ScenarioStream {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let topology = generate_topology(cfg.area_side, cfg.density, seed)?;
        Self::with_topology(cfg, topology, seed)
    }

    pub fn with_topology(cfg: &ScenarioConfig, topology: Topology, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut grid_rng = rng_for(seed, STREAM_GRID);
        let grid_means = match &cfg.arrival {
            ArrivalModel::Grid {
                sigma_fraction,
                sigma_max,
                cells,
            } => {
                let sigma = sigma_fraction * sigma_max;
                let normal = Normal::new(10.0, sigma).map_err(|e| Error::Config(format!("grid sigma {sigma}: {e}")))?;
                let scale = cfg.pi_max / 2.0 / 10.0;
                (0..cells * cells).map(|_| normal.sample(&mut grid_rng).clamp(0.0, 20.0) * scale).collect()
            }
            _ => Vec::new(),
        };
        let mut ue_rng = rng_for(seed, STREAM_UE_STATE);
        let ue_state = match &cfg.arrival {
            ArrivalModel::Bursty { on_slots, off_slots } => {
                (0..cfg.ue_max).map(|_| ue_rng.random_range(0..on_slots + off_slots)).collect()
            }
            ArrivalModel::Markov { .. } => (0..cfg.ue_max).map(|_| ue_rng.random_range(0..2usize)).collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            topology,
            rng: rng_for(seed, STREAM_SLOTS),
            grid_means,
            ue_state,
            ue_rng,
            slot: 0,
            skipped_links: 0,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn n_sbs(&self) -> usize {
        self.topology.n_sbs()
    }

    pub fn grid_means(&self) -> &[f64] {
        &self.grid_means
    }

    /// UEs dropped from link-cost accounting because their rate underflowed.
    pub fn skipped_links(&self) -> usize {
        self.skipped_links
    }

    fn rate_for(&mut self, m: usize, p: &Point) -> f64 {
        let pi_max = self.cfg.pi_max;
        match self.cfg.arrival {
            ArrivalModel::IidUniform => self.rng.random::<f64>() * pi_max,
            ArrivalModel::Grid { cells, .. } => {
                let cell = |v: f64| ((v / self.topology.side * cells as f64) as usize).min(cells - 1);
                self.grid_means[cell(p.y) * cells + cell(p.x)].clamp(0.0, pi_max)
            }
            ArrivalModel::Bursty { on_slots, off_slots } => {
                let phase = (self.ue_state[m] + self.slot) % (on_slots + off_slots);
                if phase < on_slots {
                    pi_max
                } else {
                    pi_max / 8.0
                }
            }
            ArrivalModel::Markov { low, high, .. } => {
                if self.ue_state[m] == 0 {
                    low * pi_max
                } else {
                    high * pi_max
                }
            }
        }
    }

    fn advance_ue_state(&mut self) {
        if let ArrivalModel::Markov { stay, .. } = self.cfg.arrival {
            for s in self.ue_state.iter_mut() {
                if !self.ue_rng.random_bool(stay) {
                    *s = 1 - *s;
                }
            }
        }
    }

    /// Next slot with its UE-level detail.
    pub fn next_slot(&mut self) -> (SlotState, UeAssignment, Vec<f64>) {
        let n_ues = self.rng.random_range(self.cfg.ue_min..=self.cfg.ue_max);
        let assignment = scatter_and_assign_ues(&self.topology, n_ues, self.cfg.k_nearest, &mut self.rng);
        let rates: Vec<f64> = (0..n_ues).map(|m| self.rate_for(m, &assignment.positions[m].clone())).collect();
        let downlink: Vec<f64> =
            (0..n_ues).map(|_| self.rng.random::<f64>() * self.cfg.radio.downlink_bits_max).collect();
        let (uplink, tx, skipped) = slot_link_costs(&self.topology, &assignment, &rates, &downlink, &self.cfg.radio);
        self.skipped_links += skipped;
        let mut arrivals = vec![0.0; self.n_sbs()];
        for (m, &i) in assignment.serving.iter().enumerate() {
            arrivals[i] += rates[m];
        }
        let st = SlotState {
            arrivals,
            uplink_delay: uplink,
            tx_energy: tx,
            queues: vec![0.0; self.n_sbs()],
            slot_index: self.slot,
        };
        self.slot += 1;
        self.advance_ue_state();
        (st, assignment, rates)
    }
}

impl Iterator for ScenarioStream {
    type Item = SlotState;

    fn next(&mut self) -> Option<SlotState> {
        Some(self.next_slot().0)
    }
}

/// Writes slot states one JSON object per line.
pub fn write_replay<W: Write>(out: &mut W, states: &[SlotState]) -> std::io::Result<()> {
    for st in states {
        serde_json::to_writer(&mut *out, st)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads slot states written by [`write_replay`].
pub fn read_replay<R: BufRead>(input: R) -> Result<Vec<SlotState>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(k, line)| {
            let line = line.map_err(|e| Error::Io {
                path: format!("replay line {}", k + 1),
                source: e,
            })?;
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("replay line {}: {e}", k + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_loss_reference_points() {
        let l1 = -10.0 * channel_gain(1.0, 900.0, 20.0).log10();
        assert!((l1 - (20.0 * 900f64.log10() - 28.0)).abs() < 1e-9);
        assert!((l1 - 31.0849).abs() < 1e-3);
        let l10 = -10.0 * channel_gain(10.0, 900.0, 20.0).log10();
        assert!((l10 - l1 - 20.0).abs() < 1e-9);
        assert_eq!(channel_gain(0.0, 900.0, 20.0), channel_gain(1.0, 900.0, 20.0));
    }

    #[test]
    fn gain_ratio_follows_power_law() {
        let (d1, d2) = (3.0, 17.0);
        let ratio = channel_gain(d2, 900.0, 35.0) / channel_gain(d1, 900.0, 35.0);
        assert!((ratio - (d1 / d2).powf(3.5)).abs() < 1e-12 * ratio);
    }

    #[test]
    fn topology_is_deterministic_and_nonempty() {
        let a = generate_topology(100.0, 1e-3, 7).unwrap();
        let b = generate_topology(100.0, 1e-3, 7).unwrap();
        assert_eq!(a, b);
        let tiny = generate_topology(100.0, 1e-6, 7).unwrap();
        assert!(tiny.n_sbs() >= 1);
        assert!(tiny.redraws > 0);
    }

    #[test]
    fn ppp_mean_count() {
        let total: usize = (0..2000).map(|s| generate_topology(100.0, 1e-3, s).unwrap().n_sbs()).sum();
        let mean = total as f64 / 2000.0;
        // Poisson(10): standard error of the mean is √(10/2000) ≈ 0.07.
        assert!((mean - 10.0).abs() < 0.3, "{mean}");
    }

    #[test]
    fn single_sbs_takes_every_ue() {
        let topo = Topology {
            side: 100.0,
            sbs_positions: vec![Point { x: 50.0, y: 50.0 }],
            redraws: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = scatter_and_assign_ues(&topo, 50, 3, &mut rng);
        assert!(a.serving.iter().all(|&i| i == 0));
        let empty = scatter_and_assign_ues(&topo, 0, 3, &mut rng);
        assert!(empty.serving.is_empty());
    }

    #[test]
    fn link_costs_single_ue_by_hand() {
        let topo = Topology {
            side: 100.0,
            sbs_positions: vec![Point { x: 0.0, y: 0.0 }],
            redraws: 0,
        };
        let a = UeAssignment {
            positions: vec![Point { x: 30.0, y: 40.0 }],
            serving: vec![0],
        };
        let radio = RadioParams {
            tx_energy_scale: 1.0,
            ..RadioParams::default()
        };
        let (u, e, skipped) = slot_link_costs(&topo, &a, &[2.0], &[5e5], &radio);
        assert_eq!(skipped, 0);
        // d = 50 m: L = 20·log10(900) + 20·log10(50) − 28 dB.
        let loss_db = 20.0 * 900f64.log10() + 20.0 * 50f64.log10() - 28.0;
        let gain = 10f64.powf(-loss_db / 10.0);
        let noise = 10f64.powf((-174.0 - 30.0) / 10.0) * 20e6;
        let ru = 20e6 * (1.0 + 0.01 * gain / noise).log2();
        let rd = 20e6 * (1.0 + 0.1 * gain / noise).log2();
        assert!((u[0] - 0.2e6 * 2.0 / ru).abs() < 1e-15);
        assert!((e[0] - 0.1 * 5e5 / rd).abs() < 1e-15);
        let (u2, _, _) = slot_link_costs(&topo, &a, &[4.0], &[5e5], &radio);
        assert!((u2[0] - 2.0 * u[0]).abs() < 1e-15);
        let none = UeAssignment {
            positions: vec![],
            serving: vec![],
        };
        assert_eq!(slot_link_costs(&topo, &none, &[], &[], &radio).0, vec![0.0]);
    }

    #[test]
    fn iid_total_arrival_mean() {
        let cfg = ScenarioConfig::default();
        let mut s = ScenarioStream::new(&cfg, 3).unwrap();
        let slots = 4000;
        let total: f64 = (0..slots).map(|_| s.next().unwrap().total_arrivals()).sum();
        let mean = total / slots as f64;
        // Σφ has mean 400·2 = 800 and variance E[M]·Var(π) + Var(M)·E[π]² ≈ 400·4/3 + 13467·4.
        let sd = ((400.0 * 16.0 / 12.0 + 13467.0 * 4.0) / slots as f64).sqrt();
        assert!((mean - 800.0).abs() < 3.0 * sd, "{mean}");
    }

    #[test]
    fn flat_grid_is_homogeneous() {
        let cfg = ScenarioConfig {
            arrival: ArrivalModel::Grid {
                sigma_fraction: 0.0,
                sigma_max: 10.0,
                cells: 4,
            },
            ..ScenarioConfig::default()
        };
        let s = ScenarioStream::new(&cfg, 3).unwrap();
        assert!(s.grid_means().iter().all(|&m| m == 2.0));
    }

    #[test]
    fn markov_with_equal_states_is_constant() {
        let cfg = ScenarioConfig {
            arrival: ArrivalModel::Markov {
                low: 0.5,
                high: 0.5,
                stay: 0.9,
            },
            ..ScenarioConfig::default()
        };
        let mut s = ScenarioStream::new(&cfg, 4).unwrap();
        for _ in 0..5 {
            let (_, _, rates) = s.next_slot();
            assert!(rates.iter().all(|&r| r == 2.0));
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let cfg = ScenarioConfig {
            arrival: ArrivalModel::Bursty {
                on_slots: 3,
                off_slots: 12,
            },
            ..ScenarioConfig::default()
        };
        let a: Vec<SlotState> = ScenarioStream::new(&cfg, 9).unwrap().take(20).collect();
        let b: Vec<SlotState> = ScenarioStream::new(&cfg, 9).unwrap().take(20).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn replay_round_trip() {
        let cfg = ScenarioConfig::default();
        let states: Vec<SlotState> = ScenarioStream::new(&cfg, 5).unwrap().take(4).collect();
        let mut buf = Vec::new();
        write_replay(&mut buf, &states).unwrap();
        let back = read_replay(&buf[..]).unwrap();
        assert_eq!(states, back);
    }
}
