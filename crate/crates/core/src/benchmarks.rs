//! Comparison policies: no peer offloading, pure delay minimization, and
//! delay minimization under a hard per-slot energy cap.

use crate::central::{realize_profile, solve_with_caps, DEFAULT_FLOW_TOLERANCE, DEFAULT_MAX_ITERATIONS};
use crate::error::Result;
use crate::lyapunov::{admit, clamp_arrivals, stability_caps, SlotDecision};
use crate::model::{NetworkConfig, OffloadProfile, SlotState};

/// Every SBS processes its own arrivals, dropping whatever exceeds its
/// stability cap.
pub fn nop_profile(cfg: &NetworkConfig, st: &SlotState) -> SlotDecision {
    let (state, dropped) = clamp_arrivals(st, &stability_caps(cfg));
    SlotDecision::admitted(OffloadProfile::no_offload(&state.arrivals), state, dropped)
}

fn solve_delay_only(cfg: &NetworkConfig, st: &SlotState, caps: &[f64]) -> Result<SlotDecision> {
    let (state, dropped) = admit(st, caps, cfg.lan_cap());
    let mut zeroed = state.clone();
    zeroed.queues = vec![0.0; st.n_sbs()];
    let sol = solve_with_caps(cfg, &zeroed, caps, DEFAULT_FLOW_TOLERANCE, DEFAULT_MAX_ITERATIONS)?;
    let profile = realize_profile(&sol.allocation, &state)?;
    Ok(SlotDecision::admitted(profile, state, dropped))
}

/// Minimum total delay regardless of energy: the centralized solver with
/// every deficit queue treated as empty.
pub fn delay_optimal_profile(cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
    solve_delay_only(cfg, st, &stability_caps(cfg))
}

/// Workload caps ω̄_i = max(0, (Ē_i − E^tx_i)/(κ·slot_scale)) that keep each
/// SBS within its budget this slot, tightened to the stability caps.
pub fn ssc_caps(cfg: &NetworkConfig, st: &SlotState) -> Vec<f64> {
    (0..cfg.n_sbs())
        .map(|i| {
            let energy_cap = ((cfg.energy_budgets[i] - st.tx_energy[i]) / cfg.energy_per_rate()).max(0.0);
            energy_cap.min(cfg.workload_cap(i))
        })
        .collect()
}

/// Minimum total delay with every SBS held to its energy budget in this
/// slot. When the capped network cannot absorb the arrivals, every SBS
/// keeps up to its cap and drops the rest.
pub fn ssc_profile(cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
    solve_delay_only(cfg, st, &ssc_caps(cfg, st))
}
