//! System model: configuration, per-slot state, offloading profiles and the
//! closed-form M/M/1 delay and energy functions every solver builds on.
//!
//! Units: arrival and service rates are tasks/sec, delays are seconds of
//! aggregate task delay, and energies are whatever unit `energy_per_task` is
//! expressed in, multiplied by `slot_scale` (the number of seconds of
//! sustained load the per-slot energy figure integrates).

use crate::error::{Error, FeasibilityViolation, Result};
use serde::{Deserialize, Serialize};

/// Default fraction of capacity kept free at every M/M/1 queue.
pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-4;

const REL_TOL: f64 = 1e-9;
const ABS_TOL: f64 = 1e-12;

/// Relative comparison with an absolute floor.
pub fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= ABS_TOL.max(REL_TOL * a.abs().max(b.abs()))
}

fn tolerance(scale: f64) -> f64 {
    ABS_TOL.max(REL_TOL * scale.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// μ_i, tasks/sec.
    pub service_rates: Vec<f64>,
    /// τ, seconds per task on an idle LAN.
    pub lan_delay: f64,
    /// κ, energy per processed task.
    pub energy_per_task: f64,
    /// Ē_i, per-slot energy budget of each SBS.
    pub energy_budgets: Vec<f64>,
    /// E_max, checked after the fact.
    pub per_slot_energy_cap: f64,
    /// D_max, checked after the fact.
    pub per_slot_delay_cap: f64,
    /// V, the delay weight of the drift-plus-penalty objective.
    pub control_v: f64,
    /// Seconds of load integrated into one slot's computation energy.
    pub slot_scale: f64,
    /// ε_stab: no queue is ever loaded above (1 - ε_stab) of its capacity.
    pub stability_margin: f64,
}

impl NetworkConfig {
    /// `n` identical SBSs with loose per-slot caps (10× the budget).
    pub fn homogeneous(n: usize, mu: f64, tau: f64, kappa: f64, budget: f64, v: f64) -> Self {
        Self {
            service_rates: vec![mu; n],
            lan_delay: tau,
            energy_per_task: kappa,
            energy_budgets: vec![budget; n],
            per_slot_energy_cap: 10.0 * budget,
            per_slot_delay_cap: f64::INFINITY,
            control_v: v,
            slot_scale: 1.0,
            stability_margin: DEFAULT_STABILITY_MARGIN,
        }
    }

    pub fn n_sbs(&self) -> usize {
        self.service_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sbs();
        if n == 0 {
            return Err(Error::Parameter("at least one SBS is required".into()));
        }
        if self.energy_budgets.len() != n {
            return Err(Error::Parameter(format!(
                "{} energy budgets for {} SBSs",
                self.energy_budgets.len(),
                n
            )));
        }
        if let Some(i) = self.service_rates.iter().position(|&mu| !(mu > 0.0 && mu.is_finite())) {
            return Err(Error::Parameter(format!("service rate of SBS {i} must be positive")));
        }
        if !(self.lan_delay > 0.0 && self.lan_delay.is_finite()) {
            return Err(Error::Parameter("LAN delay must be positive".into()));
        }
        if !(self.energy_per_task > 0.0) {
            return Err(Error::Parameter("energy per task must be positive".into()));
        }
        if !(self.control_v >= 0.0) {
            return Err(Error::Parameter("V must be non-negative".into()));
        }
        if !(self.slot_scale > 0.0) {
            return Err(Error::Parameter("slot scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.stability_margin) {
            return Err(Error::Parameter("stability margin must lie in [0, 1)".into()));
        }
        if let Some(i) = self
            .energy_budgets
            .iter()
            .position(|&b| b.is_nan() || b > self.per_slot_energy_cap)
        {
            return Err(Error::Parameter(format!(
                "energy budget of SBS {i} exceeds the per-slot cap"
            )));
        }
        Ok(())
    }

    /// Largest post-offloading workload SBS `i` may be assigned.
    pub fn workload_cap(&self, i: usize) -> f64 {
        (1.0 - self.stability_margin) * self.service_rates[i]
    }

    /// Largest admissible total LAN traffic.
    pub fn lan_cap(&self) -> f64 {
        (1.0 - self.stability_margin) / self.lan_delay
    }

    /// Per-slot energy of processing one task/sec for a slot.
    pub fn energy_per_rate(&self) -> f64 {
        self.energy_per_task * self.slot_scale
    }

    /// κ·q_i·slot_scale: the deficit-weighted marginal energy cost.
    pub fn energy_weight(&self, queue: f64) -> f64 {
        queue * self.energy_per_rate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    /// φ_i, pre-offloading arrivals in tasks/sec.
    pub arrivals: Vec<f64>,
    /// D^u_i, UE-to-SBS transmission delay cost.
    pub uplink_delay: Vec<f64>,
    /// E^tx_i, downlink transmission energy.
    pub tx_energy: Vec<f64>,
    /// q_i, energy deficit queues.
    pub queues: Vec<f64>,
    pub slot_index: usize,
}

impl SlotState {
    /// A state with the given arrivals and every other per-SBS field zero.
    pub fn from_arrivals(arrivals: Vec<f64>) -> Self {
        let n = arrivals.len();
        Self {
            arrivals,
            uplink_delay: vec![0.0; n],
            tx_energy: vec![0.0; n],
            queues: vec![0.0; n],
            slot_index: 0,
        }
    }

    pub fn with_queues(mut self, queues: Vec<f64>) -> Self {
        self.queues = queues;
        self
    }

    pub fn n_sbs(&self) -> usize {
        self.arrivals.len()
    }

    pub fn total_arrivals(&self) -> f64 {
        self.arrivals.iter().sum()
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        let n = cfg.n_sbs();
        for (name, v) in [
            ("arrivals", &self.arrivals),
            ("uplink delays", &self.uplink_delay),
            ("transmission energies", &self.tx_energy),
            ("deficit queues", &self.queues),
        ] {
            if v.len() != n {
                return Err(Error::Parameter(format!("{} {name} for {n} SBSs", v.len())));
            }
            if let Some(i) = v.iter().position(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Parameter(format!("{name}[{i}] must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// The N×N routing matrix β; row i is how SBS i splits its own arrivals.
#[derive(Debug, Clone, PartialEq)]
pub struct OffloadProfile {
    n: usize,
    beta: Vec<f64>,
}

impl OffloadProfile {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            beta: vec![0.0; n * n],
        }
    }

    /// β = diag(φ).
    pub fn no_offload(arrivals: &[f64]) -> Self {
        let mut p = Self::zeros(arrivals.len());
        for (i, &phi) in arrivals.iter().enumerate() {
            p.set(i, i, phi);
        }
        p
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::infeasible(FeasibilityViolation::Shape, "profile is not square"));
        }
        Ok(Self {
            n,
            beta: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.beta[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.beta[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.beta[i * self.n..(i + 1) * self.n]
    }

    pub fn set_row(&mut self, i: usize, row: &[f64]) {
        self.beta[i * self.n..(i + 1) * self.n].copy_from_slice(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.beta.chunks(self.n.max(1))
    }

    /// ω_j = Σ_k β_kj.
    pub fn post_workload(&self, j: usize) -> f64 {
        (0..self.n).map(|k| self.get(k, j)).sum()
    }

    pub fn post_workloads(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.post_workload(j)).collect()
    }

    /// λ_i = Σ_{j≠i} β_ij.
    pub fn outbound(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| b)
            .sum()
    }

    /// λ = Σ_i λ_i.
    pub fn lan_traffic(&self) -> f64 {
        (0..self.n).map(|i| self.outbound(i)).sum()
    }

    /// Checks positivity, per-row conservation, queue stability with the
    /// configured margin, and LAN stability.
    pub fn check_feasible(&self, cfg: &NetworkConfig, st: &SlotState) -> Result<()> {
        let n = cfg.n_sbs();
        if self.n != n || st.n_sbs() != n {
            return Err(Error::infeasible(
                FeasibilityViolation::Shape,
                format!("profile is {}×{}, system has {n} SBSs", self.n, self.n),
            ));
        }
        if let Some(k) = self.beta.iter().position(|&b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::infeasible(
                FeasibilityViolation::Positivity,
                format!("beta[{}][{}] = {}", k / n, k % n, self.beta[k]),
            ));
        }
        for i in 0..n {
            let sent: f64 = self.row(i).iter().sum();
            let phi = st.arrivals[i];
            if (sent - phi).abs() > tolerance(phi.max(sent)) {
                return Err(Error::infeasible(
                    FeasibilityViolation::Conservation,
                    format!("row {i} routes {sent} of {phi} arrivals"),
                ));
            }
        }
        for j in 0..n {
            let omega = self.post_workload(j);
            let cap = cfg.workload_cap(j);
            if omega > cap + tolerance(cap) {
                return Err(Error::infeasible(
                    FeasibilityViolation::Stability,
                    format!("SBS {j} carries {omega} above its cap {cap}"),
                ));
            }
        }
        let lambda = self.lan_traffic();
        let cap = cfg.lan_cap();
        if lambda > cap + tolerance(cap) {
            return Err(Error::infeasible(
                FeasibilityViolation::LanStability,
                format!("LAN traffic {lambda} above its cap {cap}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    Source,
    Neutral,
    Sink,
}

/// Post-offloading workloads and LAN traffic, the reduced decision space.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub post_workloads: Vec<f64>,
    pub lan_traffic: f64,
    pub categories: Vec<Category>,
}

impl Allocation {
    pub fn no_offload(st: &SlotState) -> Self {
        Self {
            post_workloads: st.arrivals.clone(),
            lan_traffic: 0.0,
            categories: vec![Category::Neutral; st.n_sbs()],
        }
    }

    /// Builds an allocation from workloads, deriving λ and categories.
    pub fn from_workloads(st: &SlotState, post_workloads: Vec<f64>) -> Self {
        let categories = post_workloads
            .iter()
            .zip(&st.arrivals)
            .map(|(&w, &phi)| {
                if approx_eq(w, phi) {
                    Category::Neutral
                } else if w < phi {
                    Category::Source
                } else {
                    Category::Sink
                }
            })
            .collect();
        let lan_traffic = post_workloads
            .iter()
            .zip(&st.arrivals)
            .map(|(&w, &phi)| (phi - w).max(0.0))
            .sum();
        Self {
            post_workloads,
            lan_traffic,
            categories,
        }
    }
}

/// The three parts of an SBS's delay cost.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DelayBreakdown {
    pub computation: f64,
    pub congestion: f64,
    pub communication: f64,
}

impl DelayBreakdown {
    pub fn total(&self) -> f64 {
        self.computation + self.congestion + self.communication
    }
}

impl std::ops::AddAssign for DelayBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.computation += rhs.computation;
        self.congestion += rhs.congestion;
        self.communication += rhs.communication;
    }
}

/// Shannon rate W·log2(1 + P·H/σ²) in bits/sec.
pub fn downlink_rate(tx_power: f64, channel_gain: f64, noise_power: f64, bandwidth: f64) -> Result<f64> {
    if !(tx_power > 0.0 && channel_gain > 0.0 && noise_power > 0.0 && bandwidth > 0.0) {
        return Err(Error::Parameter(format!(
            "rate inputs must be positive (P={tx_power}, H={channel_gain}, σ²={noise_power}, W={bandwidth})"
        )));
    }
    Ok(bandwidth * (tx_power * channel_gain / noise_power).ln_1p() / std::f64::consts::LN_2)
}

fn check_lan(lambda: f64, tau: f64) -> Result<()> {
    if !(lambda >= 0.0 && tau * lambda < 1.0) {
        return Err(Error::Domain(format!("LAN traffic {lambda} outside [0, {})", 1.0 / tau)));
    }
    Ok(())
}

fn check_queue(omega: f64, mu: f64) -> Result<()> {
    if !(omega >= 0.0 && omega < mu) {
        return Err(Error::Domain(format!("workload {omega} outside [0, {mu})")));
    }
    Ok(())
}

/// Expected LAN delay per task, τ/(1 − τλ).
pub fn congestion_delay(lambda: f64, tau: f64) -> Result<f64> {
    check_lan(lambda, tau)?;
    Ok(tau / (1.0 - tau * lambda))
}

/// Expected sojourn time per task, 1/(μ − ω).
pub fn computation_delay(omega: f64, mu: f64) -> Result<f64> {
    check_queue(omega, mu)?;
    Ok(1.0 / (mu - omega))
}

/// d(ω) = μ/(μ − ω)², the derivative of ω/(μ − ω).
pub fn marginal_comp_delay(omega: f64, mu: f64) -> Result<f64> {
    check_queue(omega, mu)?;
    let slack = mu - omega;
    Ok(mu / (slack * slack))
}

/// d⁻¹(y) = μ − sqrt(μ/y), defined for y ≥ 1/μ.
pub fn inverse_marginal_comp_delay(y: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Parameter(format!("service rate {mu} must be positive")));
    }
    if y.is_nan() || y * mu < 1.0 - 1e-12 {
        return Err(Error::Domain(format!("marginal {y} below idle value {}", 1.0 / mu)));
    }
    Ok((mu - (mu / y).sqrt()).max(0.0))
}

/// g(λ) = τ/(1 − τλ)², the derivative of λ·τ/(1 − τλ).
pub fn marginal_congestion_delay(lambda: f64, tau: f64) -> Result<f64> {
    check_lan(lambda, tau)?;
    let slack = 1.0 - tau * lambda;
    Ok(tau / (slack * slack))
}

fn check_index(i: usize, cfg: &NetworkConfig) -> Result<()> {
    if i >= cfg.n_sbs() {
        return Err(Error::Parameter(format!("SBS index {i} out of range")));
    }
    Ok(())
}

/// Delay cost of SBS `i` split into its three parts. Assumes `beta` is feasible.
pub(crate) fn delay_breakdown_unchecked(
    i: usize,
    beta: &OffloadProfile,
    workloads: &[f64],
    lan_traffic: f64,
    cfg: &NetworkConfig,
    st: &SlotState,
) -> Result<DelayBreakdown> {
    let mut computation = 0.0;
    for (j, &b) in beta.row(i).iter().enumerate() {
        if b > 0.0 {
            computation += b * computation_delay(workloads[j], cfg.service_rates[j])?;
        }
    }
    let outbound = beta.outbound(i);
    let congestion = if outbound > 0.0 {
        outbound * congestion_delay(lan_traffic, cfg.lan_delay)?
    } else {
        0.0
    };
    Ok(DelayBreakdown {
        computation,
        congestion,
        communication: st.uplink_delay[i],
    })
}

/// D_i(β): computation, congestion and uplink delay cost of SBS `i`'s tasks.
pub fn sbs_delay_breakdown(
    i: usize,
    beta: &OffloadProfile,
    cfg: &NetworkConfig,
    st: &SlotState,
) -> Result<DelayBreakdown> {
    check_index(i, cfg)?;
    beta.check_feasible(cfg, st)?;
    let workloads = beta.post_workloads();
    delay_breakdown_unchecked(i, beta, &workloads, beta.lan_traffic(), cfg, st)
}

pub fn sbs_delay_cost(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Result<f64> {
    sbs_delay_breakdown(i, beta, cfg, st).map(|d| d.total())
}

/// E_i(β) = E^tx_i + κ·ω_i·slot_scale.
pub fn sbs_energy(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Result<f64> {
    check_index(i, cfg)?;
    beta.check_feasible(cfg, st)?;
    Ok(energy_of_workload(i, beta.post_workload(i), cfg, st))
}

pub fn energy_of_workload(i: usize, omega: f64, cfg: &NetworkConfig, st: &SlotState) -> f64 {
    st.tx_energy[i] + cfg.energy_per_rate() * omega
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    fn two_sbs() -> (NetworkConfig, SlotState) {
        let mut cfg = NetworkConfig::homogeneous(2, 75.0, 0.2, 9e-5, 22.0, 50.0);
        cfg.service_rates = vec![75.0, 60.0];
        let mut st = SlotState::from_arrivals(vec![50.0, 20.0]);
        st.uplink_delay = vec![0.3, 0.1];
        st.tx_energy = vec![0.01, 0.02];
        (cfg, st)
    }

    #[test]
    fn shannon_rate_trivial_points() {
        assert!(rel_close(downlink_rate(1.0, 1.0, 1.0, 20e6).unwrap(), 20e6, 1e-12));
        assert!(rel_close(downlink_rate(3.0, 1.0, 1.0, 1.0).unwrap(), 2.0, 1e-12));
        assert!(downlink_rate(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(downlink_rate(1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn shannon_rate_increases_with_power_and_gain() {
        let base = downlink_rate(1.0, 1e-5, 1e-9, 1e6).unwrap();
        assert!(downlink_rate(2.0, 1e-5, 1e-9, 1e6).unwrap() > base);
        assert!(downlink_rate(1.0, 2e-5, 1e-9, 1e6).unwrap() > base);
    }

    #[test]
    fn congestion_delay_points() {
        assert!(rel_close(congestion_delay(0.0, 0.2).unwrap(), 0.2, 1e-12));
        assert!(rel_close(congestion_delay(2.5, 0.2).unwrap(), 0.4, 1e-12));
        assert!(rel_close(congestion_delay(4.0, 0.2).unwrap(), 1.0, 1e-12));
        assert!(matches!(congestion_delay(5.0, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn computation_delay_points() {
        // μ = f/h = 3e9 / 40e6.
        let mu = 3e9 / 40e6;
        assert!(rel_close(mu, 75.0, 1e-12));
        assert!(rel_close(computation_delay(0.0, mu).unwrap(), 1.0 / 75.0, 1e-12));
        assert!(rel_close(computation_delay(mu / 2.0, mu).unwrap(), 2.0 / mu, 1e-12));
        assert!(rel_close(computation_delay(74.0, 75.0).unwrap(), 1.0, 1e-12));
        assert!(computation_delay(75.0, 75.0).is_err());
    }

    #[test]
    fn marginal_points() {
        let mu = 75.0;
        assert!(rel_close(marginal_comp_delay(0.0, mu).unwrap(), 1.0 / mu, 1e-12));
        assert!(rel_close(marginal_comp_delay(mu / 2.0, mu).unwrap(), 4.0 / mu, 1e-12));
        assert!(rel_close(marginal_congestion_delay(0.0, 0.2).unwrap(), 0.2, 1e-12));
        assert!(rel_close(marginal_congestion_delay(2.5, 0.2).unwrap(), 0.8, 1e-12));
        assert_eq!(inverse_marginal_comp_delay(1.0 / mu, mu).unwrap(), 0.0);
        assert!(rel_close(inverse_marginal_comp_delay(4.0 / mu, mu).unwrap(), mu / 2.0, 1e-12));
        assert!(matches!(inverse_marginal_comp_delay(0.5 / mu, mu), Err(Error::Domain(_))));
    }

    #[test]
    fn no_offload_delay_is_local_queue_plus_uplink() {
        let (cfg, st) = two_sbs();
        let beta = OffloadProfile::no_offload(&st.arrivals);
        for i in 0..2 {
            let (phi, mu) = (st.arrivals[i], cfg.service_rates[i]);
            let expected = phi / (mu - phi) + st.uplink_delay[i];
            assert!(rel_close(sbs_delay_cost(i, &beta, &cfg, &st).unwrap(), expected, 1e-12));
        }
    }

    #[test]
    fn single_sbs_reduces_to_local_queue() {
        let cfg = NetworkConfig::homogeneous(1, 10.0, 0.2, 1.0, 5.0, 1.0);
        let st = SlotState::from_arrivals(vec![7.0]);
        let beta = OffloadProfile::no_offload(&st.arrivals);
        assert!(rel_close(sbs_delay_cost(0, &beta, &cfg, &st).unwrap(), 7.0 / 3.0, 1e-12));
    }

    #[test]
    fn two_sbs_delay_matches_term_by_term_expansion() {
        let (cfg, st) = two_sbs();
        let beta = OffloadProfile::from_rows(&[vec![46.0, 4.0], vec![0.0, 20.0]]).unwrap();
        // ω = (46, 24), λ = 4, τ = 0.2.
        let d_f = [1.0 / (75.0 - 46.0), 1.0 / (60.0 - 24.0)];
        let d_g = 0.2 / (1.0 - 0.2 * 4.0);
        let d0 = 46.0 * d_f[0] + 4.0 * d_f[1] + 4.0 * d_g + 0.3;
        let d1 = 20.0 * d_f[1] + 0.1;
        assert!(rel_close(sbs_delay_cost(0, &beta, &cfg, &st).unwrap(), d0, 1e-12));
        assert!(rel_close(sbs_delay_cost(1, &beta, &cfg, &st).unwrap(), d1, 1e-12));
        let parts = sbs_delay_breakdown(0, &beta, &cfg, &st).unwrap();
        assert!(rel_close(parts.congestion, 4.0 * d_g, 1e-12));
    }

    #[test]
    fn energy_accounting() {
        let (mut cfg, st) = two_sbs();
        let idle = SlotState {
            arrivals: vec![0.0, 0.0],
            ..st.clone()
        };
        let beta0 = OffloadProfile::no_offload(&idle.arrivals);
        assert_eq!(sbs_energy(0, &beta0, &cfg, &idle).unwrap(), 0.01);

        // κ in Wh/task with a 60 s slot: 75 tasks/s sustained.
        cfg.service_rates = vec![80.0, 80.0];
        cfg.slot_scale = 60.0;
        let st75 = SlotState {
            arrivals: vec![75.0, 0.0],
            ..st.clone()
        };
        let beta = OffloadProfile::no_offload(&st75.arrivals);
        let e = sbs_energy(0, &beta, &cfg, &st75).unwrap();
        assert!(rel_close(e, 0.01 + 9e-5 * 75.0 * 60.0, 1e-12));
    }

    #[test]
    fn computation_energy_is_invariant_under_rerouting() {
        let (cfg, st) = two_sbs();
        let a = OffloadProfile::no_offload(&st.arrivals);
        let b = OffloadProfile::from_rows(&[vec![47.0, 3.0], vec![1.0, 19.0]]).unwrap();
        let total = |p: &OffloadProfile| -> f64 {
            (0..2).map(|i| sbs_energy(i, p, &cfg, &st).unwrap()).sum()
        };
        assert!(rel_close(total(&a), total(&b), 1e-12));
    }

    #[test]
    fn feasibility_reports_violated_condition() {
        let (cfg, st) = two_sbs();
        let cond = |rows: &[Vec<f64>]| match OffloadProfile::from_rows(rows).unwrap().check_feasible(&cfg, &st) {
            Err(Error::Feasibility { condition, .. }) => Some(condition),
            _ => None,
        };
        assert_eq!(cond(&[vec![51.0, -1.0], vec![0.0, 20.0]]), Some(FeasibilityViolation::Positivity));
        assert_eq!(cond(&[vec![49.0, 0.0], vec![0.0, 20.0]]), Some(FeasibilityViolation::Conservation));
        assert_eq!(cond(&[vec![10.0, 40.0], vec![0.0, 20.0]]), Some(FeasibilityViolation::Stability));
        assert_eq!(cond(&[vec![45.0, 5.0], vec![0.0, 20.0]]), Some(FeasibilityViolation::LanStability));
        assert_eq!(cond(&[vec![46.0, 4.0], vec![0.0, 20.0]]), None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::homogeneous(3, 75.0, 0.2, 0.3, 22.0, 50.0);
        assert!(cfg.validate().is_ok());
        cfg.service_rates[1] = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::homogeneous(3, 75.0, 0.2, 0.3, 22.0, 50.0);
        cfg.energy_budgets[0] = 1e9;
        assert!(cfg.validate().is_err());
    }
}
