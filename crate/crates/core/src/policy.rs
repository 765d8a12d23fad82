//! The five per-slot policies behind one interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::benchmarks::{delay_optimal_profile, nop_profile, ssc_profile};
use crate::central::{realize_profile, solve_per_slot_centralized, DEFAULT_FLOW_TOLERANCE};
use crate::error::{Error, Result};
use crate::game::{measure_poa, round_robin_ne, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS};
use crate::lyapunov::{admit, stability_caps, SlotDecision, SlotPolicy};
use crate::model::{NetworkConfig, SlotState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    OpenC,
    OpenA,
    Nop,
    DOptimal,
    Ssc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [Self::OpenC, Self::OpenA, Self::Nop, Self::DOptimal, Self::Ssc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::OpenC => "open_c",
            Self::OpenA => "open_a",
            Self::Nop => "nop",
            Self::DOptimal => "d_optimal",
            Self::Ssc => "ssc",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy '{s}' (expected open_c, open_a, nop, d_optimal or ssc)")))
    }
}

/// Centralized drift-plus-penalty minimization.
#[derive(Debug, Clone)]
pub struct OpenCentralized {
    pub flow_tolerance: f64,
}

impl Default for OpenCentralized {
    fn default() -> Self {
        Self {
            flow_tolerance: DEFAULT_FLOW_TOLERANCE,
        }
    }
}

fn admit_stable(cfg: &NetworkConfig, st: &SlotState) -> (SlotState, Vec<f64>) {
    admit(st, &stability_caps(cfg), cfg.lan_cap())
}

impl SlotPolicy for OpenCentralized {
    fn name(&self) -> &str {
        "open_c"
    }

    fn decide(&mut self, cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
        let (state, dropped) = admit_stable(cfg, st);
        let alloc = solve_per_slot_centralized(cfg, &state, self.flow_tolerance)?;
        Ok(SlotDecision::admitted(realize_profile(&alloc, &state)?, state, dropped))
    }
}

/// Round-robin best responses to a Nash equilibrium, optionally measuring
/// the price of anarchy against the centralized optimum of the same slot.
#[derive(Debug, Clone)]
pub struct OpenAutonomous {
    pub rel_tolerance: f64,
    pub max_rounds: usize,
    pub measure_poa: bool,
}

impl Default for OpenAutonomous {
    fn default() -> Self {
        Self {
            rel_tolerance: DEFAULT_CONVERGENCE_TOLERANCE,
            max_rounds: DEFAULT_MAX_ROUNDS,
            measure_poa: true,
        }
    }
}

impl SlotPolicy for OpenAutonomous {
    fn name(&self) -> &str {
        "open_a"
    }

    fn decide(&mut self, cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
        let (state, dropped) = admit_stable(cfg, st);
        let game = round_robin_ne(cfg, &state, self.rel_tolerance, self.max_rounds)?;
        let mut d = SlotDecision::admitted(game.profile, state, dropped);
        if self.measure_poa {
            let star = solve_per_slot_centralized(cfg, &d.state, DEFAULT_FLOW_TOLERANCE)
                .and_then(|a| realize_profile(&a, &d.state));
            match star.and_then(|s| measure_poa(&d.profile, &s, cfg, &d.state)) {
                Ok(p) => d.poa = Some(p),
                Err(e) => d.note = Some(format!("poa: {e}")),
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Default)]
pub struct NoPeer;

impl SlotPolicy for NoPeer {
    fn name(&self) -> &str {
        "nop"
    }

    fn decide(&mut self, cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
        Ok(nop_profile(cfg, st))
    }
}

#[derive(Debug, Clone, Default)]
pub struct DelayOptimal;

impl SlotPolicy for DelayOptimal {
    fn name(&self) -> &str {
        "d_optimal"
    }

    fn decide(&mut self, cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
        delay_optimal_profile(cfg, st)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SingleSlotCap;

impl SlotPolicy for SingleSlotCap {
    fn name(&self) -> &str {
        "ssc"
    }

    fn decide(&mut self, cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
        ssc_profile(cfg, st)
    }
}

pub fn make_policy(kind: PolicyKind) -> Box<dyn SlotPolicy + Send> {
    match kind {
        PolicyKind::OpenC => Box::new(OpenCentralized::default()),
        PolicyKind::OpenA => Box::new(OpenAutonomous::default()),
        PolicyKind::Nop => Box::new(NoPeer),
        PolicyKind::DOptimal => Box::new(DelayOptimal),
        PolicyKind::Ssc => Box::new(SingleSlotCap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.as_str().parse::<PolicyKind>().unwrap(), p);
            assert_eq!(make_policy(p).name(), p.as_str());
        }
        assert!("open_b".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn overloaded_slot_drops_only_the_excess() {
        let cfg = NetworkConfig::homogeneous(2, 75.0, 0.2, 0.324, 22.0, 50.0);
        let st = SlotState::from_arrivals(vec![90.0, 20.0]);
        for p in PolicyKind::ALL {
            let d = make_policy(p).decide(&cfg, &st).unwrap();
            d.profile.check_feasible(&cfg, &d.state).unwrap();
            assert!(d.dropped[0] > 0.0, "{p}");
            assert_eq!(d.dropped[1], 0.0, "{p}");
        }
    }
}
