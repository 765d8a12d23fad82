//! Energy-deficit virtual queues, the per-slot drift-plus-penalty objective
//! and the online outer loop that drives any per-slot policy.

use crate::error::{Error, Result};
use crate::model::{
    congestion_delay, delay_breakdown_unchecked, energy_of_workload, DelayBreakdown, NetworkConfig,
    OffloadProfile, SlotState,
};
use std::time::Instant;

/// q(t+1) = max(q(t) + E − Ē, 0).
pub fn update_deficit(queue: f64, energy_used: f64, budget: f64) -> f64 {
    (queue + energy_used - budget).max(0.0)
}

/// Deficit queues, starting empty, with an optional per-slot trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DeficitQueues {
    queues: Vec<f64>,
    history: Option<Vec<Vec<f64>>>,
}

impl DeficitQueues {
    pub fn new(n: usize) -> Self {
        Self {
            queues: vec![0.0; n],
            history: None,
        }
    }

    pub fn with_history(n: usize) -> Self {
        Self {
            queues: vec![0.0; n],
            history: Some(vec![vec![0.0; n]]),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.queues
    }

    pub fn total(&self) -> f64 {
        self.queues.iter().sum()
    }

    pub fn history(&self) -> Option<&[Vec<f64>]> {
        self.history.as_deref()
    }

    /// Advances every queue by one slot.
    pub fn update(&mut self, energy_used: &[f64], budgets: &[f64]) {
        for ((q, &e), &b) in self.queues.iter_mut().zip(energy_used).zip(budgets) {
            *q = update_deficit(*q, e, b);
        }
        if let Some(h) = &mut self.history {
            h.push(self.queues.clone());
        }
    }
}

/// Value of Σ_i (V·D_i + q_i·E_i) split into the part the decision can
/// change and the part it cannot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerSlotObjective {
    pub value: f64,
    pub decision_dependent: f64,
    pub decision_independent: f64,
}

/// Σ_i [V·ω_i/(μ_i−ω_i) + κ·q_i·ω_i·slot_scale] + V·τλ/(1−τλ).
pub fn decision_dependent_objective(
    workloads: &[f64],
    lan_traffic: f64,
    cfg: &NetworkConfig,
    st: &SlotState,
) -> Result<f64> {
    let v = cfg.control_v;
    let mut total = 0.0;
    for (i, &w) in workloads.iter().enumerate() {
        let mu = cfg.service_rates[i];
        if !(w >= 0.0 && w < mu) {
            return Err(Error::Domain(format!("workload {w} of SBS {i} outside [0, {mu})")));
        }
        total += v * w / (mu - w) + cfg.energy_weight(st.queues[i]) * w;
    }
    if lan_traffic > 0.0 {
        total += v * lan_traffic * congestion_delay(lan_traffic, cfg.lan_delay)?;
    }
    Ok(total)
}

/// Σ_i (V·D^u_i + q_i·E^tx_i).
pub fn decision_independent_objective(cfg: &NetworkConfig, st: &SlotState) -> f64 {
    (0..st.n_sbs())
        .map(|i| cfg.control_v * st.uplink_delay[i] + st.queues[i] * st.tx_energy[i])
        .sum()
}

/// The drift-plus-penalty objective of a feasible profile. `value` is the
/// direct per-SBS sum; the two parts use the regrouped form.
pub fn per_slot_objective(beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Result<PerSlotObjective> {
    beta.check_feasible(cfg, st)?;
    let workloads = beta.post_workloads();
    let lambda = beta.lan_traffic();
    let mut value = 0.0;
    for i in 0..cfg.n_sbs() {
        let delay = delay_breakdown_unchecked(i, beta, &workloads, lambda, cfg, st)?.total();
        let energy = energy_of_workload(i, workloads[i], cfg, st);
        value += cfg.control_v * delay + st.queues[i] * energy;
    }
    Ok(PerSlotObjective {
        value,
        decision_dependent: decision_dependent_objective(&workloads, lambda, cfg, st)?,
        decision_independent: decision_independent_objective(cfg, st),
    })
}

/// Whether some allocation keeps every queue within `caps` and the LAN
/// within `lan_cap`.
pub fn instance_feasible(st: &SlotState, caps: &[f64], lan_cap: f64) -> bool {
    let total: f64 = st.arrivals.iter().sum();
    let capacity: f64 = caps.iter().sum();
    let excess: f64 = st
        .arrivals
        .iter()
        .zip(caps)
        .map(|(&phi, &cap)| (phi - cap).max(0.0))
        .sum();
    total <= capacity && excess <= lan_cap
}

/// Infeasible-slot fallback: each SBS keeps at most its cap and the rest is
/// dropped. Returns the clamped state and the dropped rate per SBS.
pub fn clamp_arrivals(st: &SlotState, caps: &[f64]) -> (SlotState, Vec<f64>) {
    let mut clamped = st.clone();
    let mut dropped = vec![0.0; st.n_sbs()];
    for (i, (phi, &cap)) in clamped.arrivals.iter_mut().zip(caps).enumerate() {
        let cap = cap.max(0.0);
        if *phi > cap {
            dropped[i] = *phi - cap;
            *phi = cap;
        }
    }
    (clamped, dropped)
}

/// Local processing of the clamped arrivals, with the clamped-off excess
/// recorded as dropped.
pub fn clamped_local(st: &SlotState, caps: &[f64], note: String) -> SlotDecision {
    let (clamped, dropped) = clamp_arrivals(st, caps);
    let mut d = SlotDecision::new(OffloadProfile::no_offload(&clamped.arrivals), clamped);
    d.dropped = dropped;
    d.note = Some(note);
    d
}

/// Infeasible-slot admission: when no allocation keeps every SBS within
/// `caps` and the LAN within `lan_cap`, each SBS retains at most its cap and
/// the rest is dropped. The clamped state is always feasible.
pub fn admit(st: &SlotState, caps: &[f64], lan_cap: f64) -> (SlotState, Vec<f64>) {
    if instance_feasible(st, caps, lan_cap) {
        return (st.clone(), vec![0.0; st.n_sbs()]);
    }
    clamp_arrivals(st, caps)
}

/// Workload caps (1 − ε_stab)·μ_i for every SBS.
pub fn stability_caps(cfg: &NetworkConfig) -> Vec<f64> {
    (0..cfg.n_sbs()).map(|i| cfg.workload_cap(i)).collect()
}

/// What a policy hands back for one slot.
#[derive(Debug, Clone)]
pub struct SlotDecision {
    pub profile: OffloadProfile,
    /// The state `profile` is feasible for; differs from the observed one
    /// only in arrivals, when workload had to be dropped.
    pub state: SlotState,
    pub dropped: Vec<f64>,
    pub note: Option<String>,
    /// Price of anarchy against the centralized optimum, when measured.
    pub poa: Option<f64>,
}

impl SlotDecision {
    /// A decision on admitted arrivals, noting the slot when anything was
    /// dropped.
    pub fn admitted(profile: OffloadProfile, state: SlotState, dropped: Vec<f64>) -> Self {
        let mut d = Self::new(profile, state);
        if dropped.iter().any(|&x| x > 0.0) {
            d.note = Some(format!("infeasible slot, dropped {}", dropped.iter().sum::<f64>()));
        }
        d.dropped = dropped;
        d
    }

    pub fn new(profile: OffloadProfile, state: SlotState) -> Self {
        let n = state.n_sbs();
        Self {
            profile,
            state,
            dropped: vec![0.0; n],
            note: None,
            poa: None,
        }
    }
}

/// A per-slot offloading rule driven by the online loop.
pub trait SlotPolicy {
    fn name(&self) -> &str;
    fn decide(&mut self, cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision>;
}

/// What `run_open` does when a policy fails on a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FallbackPolicy {
    /// Clamp to stable arrivals, process locally and carry on.
    #[default]
    ClampNoOffload,
    /// Propagate the error.
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbsSlotMetrics {
    pub arrivals: f64,
    pub workload: f64,
    pub dropped: f64,
    pub energy: f64,
    pub budget: f64,
    /// Deficit queue at the start of the slot.
    pub queue: f64,
    pub delay: DelayBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotMetrics {
    pub slot: usize,
    pub sbs: Vec<SbsSlotMetrics>,
    pub lan_traffic: f64,
    pub delay: DelayBreakdown,
    pub energy: f64,
    /// Σ_i q_i at the start of the slot.
    pub queue_total: f64,
    pub objective: PerSlotObjective,
    pub poa: Option<f64>,
    pub energy_cap_violations: usize,
    pub delay_cap_violations: usize,
    /// Dropped workload or the error behind a fallback.
    pub note: Option<String>,
    /// The policy failed and the slot was clamped and served locally.
    pub fallback: bool,
    /// Wall-clock time spent in the policy, microseconds.
    pub solve_micros: u64,
}

impl SlotMetrics {
    pub fn total_delay(&self) -> f64 {
        self.delay.total()
    }

    pub fn total_dropped(&self) -> f64 {
        self.sbs.iter().map(|s| s.dropped).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub horizon: usize,
    pub fallback: FallbackPolicy,
}

/// Evaluates a decision and produces its metrics record.
pub fn slot_metrics(cfg: &NetworkConfig, decision: &SlotDecision, observed: &SlotState) -> Result<SlotMetrics> {
    let st = &decision.state;
    let beta = &decision.profile;
    let objective = per_slot_objective(beta, cfg, st)?;
    let workloads = beta.post_workloads();
    let lambda = beta.lan_traffic();
    let mut sbs = Vec::with_capacity(cfg.n_sbs());
    let mut delay = DelayBreakdown::default();
    let mut energy_total = 0.0;
    let (mut e_viol, mut d_viol) = (0, 0);
    for i in 0..cfg.n_sbs() {
        let d = delay_breakdown_unchecked(i, beta, &workloads, lambda, cfg, st)?;
        let e = energy_of_workload(i, workloads[i], cfg, st);
        if e > cfg.per_slot_energy_cap {
            e_viol += 1;
        }
        if d.total() > cfg.per_slot_delay_cap {
            d_viol += 1;
        }
        delay += d;
        energy_total += e;
        sbs.push(SbsSlotMetrics {
            arrivals: observed.arrivals[i],
            workload: workloads[i],
            dropped: decision.dropped[i],
            energy: e,
            budget: cfg.energy_budgets[i],
            queue: st.queues[i],
            delay: d,
        });
    }
    Ok(SlotMetrics {
        slot: st.slot_index,
        sbs,
        lan_traffic: lambda,
        delay,
        energy: energy_total,
        queue_total: st.queues.iter().sum(),
        objective,
        poa: decision.poa,
        energy_cap_violations: e_viol,
        delay_cap_violations: d_viol,
        note: decision.note.clone(),
        fallback: false,
        solve_micros: 0,
    })
}

/// The online loop: observe, solve the per-slot problem, record, and update
/// the deficit queues with the realized energy.
pub fn run_open<P, S>(policy: &mut P, scenario: S, cfg: &NetworkConfig, options: RunOptions) -> Result<Vec<SlotMetrics>>
where
    P: SlotPolicy + ?Sized,
    S: IntoIterator<Item = SlotState>,
{
    if options.horizon == 0 {
        return Err(Error::Parameter("horizon must be at least one slot".into()));
    }
    cfg.validate()?;
    let mut queues = DeficitQueues::new(cfg.n_sbs());
    let mut stream = scenario.into_iter();
    let mut out = Vec::with_capacity(options.horizon);
    for t in 0..options.horizon {
        let mut st = stream
            .next()
            .ok_or_else(|| Error::Parameter(format!("scenario stream exhausted after {t} slots")))?;
        st.queues = queues.values().to_vec();
        st.slot_index = t;
        st.validate(cfg)?;

        let started = Instant::now();
        let outcome = policy.decide(cfg, &st);
        let micros = started.elapsed().as_micros() as u64;
        let (decision, fallback) = match outcome {
            Ok(d) => (d, false),
            Err(e) if options.fallback == FallbackPolicy::ClampNoOffload => {
                (clamped_local(&st, &stability_caps(cfg), format!("{}: {e}", policy.name())), true)
            }
            Err(e) => return Err(e),
        };
        let mut metrics = slot_metrics(cfg, &decision, &st)?;
        metrics.fallback = fallback;
        metrics.solve_micros = micros;
        let energies: Vec<f64> = metrics.sbs.iter().map(|s| s.energy).collect();
        queues.update(&energies, &cfg.energy_budgets);
        out.push(metrics);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn deficit_update_examples() {
        assert_eq!(update_deficit(5.0, 30.0, 22.0), 13.0);
        assert_eq!(update_deficit(0.0, 10.0, 22.0), 0.0);
        assert_eq!(update_deficit(7.5, 22.0, 22.0), 7.5);
    }

    fn instance() -> (NetworkConfig, SlotState) {
        let mut cfg = NetworkConfig::homogeneous(2, 75.0, 0.2, 0.324, 22.0, 50.0);
        cfg.service_rates = vec![75.0, 70.0];
        let st = SlotState {
            arrivals: vec![60.0, 30.0],
            uplink_delay: vec![0.2, 0.05],
            tx_energy: vec![0.4, 0.7],
            queues: vec![3.0, 11.0],
            slot_index: 0,
        };
        (cfg, st)
    }

    #[test]
    fn zero_queues_reduce_objective_to_weighted_delay() {
        let (cfg, mut st) = instance();
        st.queues = vec![0.0, 0.0];
        let beta = OffloadProfile::no_offload(&st.arrivals);
        let obj = per_slot_objective(&beta, &cfg, &st).unwrap();
        let delay: f64 = (0..2).map(|i| crate::model::sbs_delay_cost(i, &beta, &cfg, &st).unwrap()).sum();
        assert!(rel_close(obj.value, 50.0 * delay, 1e-12));
    }

    #[test]
    fn direct_and_regrouped_objectives_agree() {
        let (cfg, st) = instance();
        let beta = OffloadProfile::from_rows(&[vec![57.0, 3.0], vec![0.5, 29.5]]).unwrap();
        let obj = per_slot_objective(&beta, &cfg, &st).unwrap();
        assert!(rel_close(obj.value, obj.decision_dependent + obj.decision_independent, 1e-9));
    }

    #[test]
    fn independent_part_does_not_depend_on_routing() {
        let (cfg, st) = instance();
        let a = per_slot_objective(&OffloadProfile::no_offload(&st.arrivals), &cfg, &st).unwrap();
        let b = OffloadProfile::from_rows(&[vec![56.0, 4.0], vec![0.0, 30.0]]).unwrap();
        let b = per_slot_objective(&b, &cfg, &st).unwrap();
        assert_eq!(a.decision_independent, b.decision_independent);
        let expected = 50.0 * 0.25 + 3.0 * 0.4 + 11.0 * 0.7;
        assert!(rel_close(a.decision_independent, expected, 1e-12));
    }

    #[test]
    fn larger_queue_raises_objective_when_loaded() {
        let (cfg, st) = instance();
        let beta = OffloadProfile::no_offload(&st.arrivals);
        let base = per_slot_objective(&beta, &cfg, &st).unwrap().value;
        let mut bumped = st.clone();
        bumped.queues[1] += 1.0;
        assert!(per_slot_objective(&beta, &cfg, &bumped).unwrap().value > base);
    }

    struct Local;

    impl SlotPolicy for Local {
        fn name(&self) -> &str {
            "local"
        }
        fn decide(&mut self, _cfg: &NetworkConfig, st: &SlotState) -> Result<SlotDecision> {
            Ok(SlotDecision::new(OffloadProfile::no_offload(&st.arrivals), st.clone()))
        }
    }

    #[test]
    fn single_sbs_queue_follows_hand_recursion() {
        let mut cfg = NetworkConfig::homogeneous(1, 75.0, 0.2, 0.5, 22.0, 10.0);
        cfg.per_slot_energy_cap = 1e3;
        // E = 0.5·50 = 25 > 22 for odd slots, 0.5·30 = 15 for even ones.
        let stream: Vec<SlotState> = (0..10)
            .map(|t| SlotState::from_arrivals(vec![if t % 2 == 0 { 50.0 } else { 30.0 }]))
            .collect();
        let metrics = run_open(
            &mut Local,
            stream.clone(),
            &cfg,
            RunOptions {
                horizon: 10,
                fallback: FallbackPolicy::Abort,
            },
        )
        .unwrap();
        let mut q = 0.0_f64;
        for (t, m) in metrics.iter().enumerate() {
            assert_eq!(m.sbs[0].queue, q);
            let e = 0.5 * stream[t].arrivals[0];
            q = (q + e - 22.0).max(0.0);
        }
        // Hand iteration: 3, 0, 3, 0, ...
        assert_eq!(metrics[1].sbs[0].queue, 3.0);
        assert_eq!(metrics[2].sbs[0].queue, 0.0);
    }

    #[test]
    fn first_slot_sees_empty_queues() {
        let cfg = NetworkConfig::homogeneous(2, 75.0, 0.2, 0.3, 22.0, 10.0);
        let mut st = SlotState::from_arrivals(vec![10.0, 20.0]);
        st.queues = vec![99.0, 99.0];
        let metrics = run_open(
            &mut Local,
            vec![st],
            &cfg,
            RunOptions {
                horizon: 1,
                fallback: FallbackPolicy::Abort,
            },
        )
        .unwrap();
        assert_eq!(metrics[0].queue_total, 0.0);
    }

    #[test]
    fn exhausted_stream_is_an_error() {
        let cfg = NetworkConfig::homogeneous(1, 75.0, 0.2, 0.3, 22.0, 10.0);
        let r = run_open(
            &mut Local,
            vec![SlotState::from_arrivals(vec![1.0])],
            &cfg,
            RunOptions {
                horizon: 2,
                fallback: FallbackPolicy::Abort,
            },
        );
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn clamping_drops_only_the_excess() {
        let st = SlotState::from_arrivals(vec![80.0, 10.0]);
        let (c, dropped) = clamp_arrivals(&st, &[74.0, 74.0]);
        assert_eq!(c.arrivals, vec![74.0, 10.0]);
        assert_eq!(dropped, vec![6.0, 0.0]);
        assert!(!instance_feasible(&st, &[74.0, 74.0], 4.0));
        assert!(instance_feasible(&st, &[74.0, 74.0], 6.0));
    }

    #[test]
    fn admission_clamps_only_infeasible_slots() {
        let caps = [74.0, 74.0];
        let st = SlotState::from_arrivals(vec![77.0, 10.0]);
        assert_eq!(admit(&st, &caps, 4.0), (st.clone(), vec![0.0, 0.0]));
        let st = SlotState::from_arrivals(vec![80.0, 10.0]);
        let (s, dropped) = admit(&st, &caps, 4.0);
        assert_eq!(s.arrivals, vec![74.0, 10.0]);
        assert_eq!(dropped, vec![6.0, 0.0]);
        assert!(instance_feasible(&s, &caps, 0.0));
    }

    #[test]
    fn queue_lower_bound_recursion() {
        let mut q = DeficitQueues::with_history(2);
        let budgets = [22.0, 22.0];
        for e in [[30.0, 10.0], [5.0, 40.0], [22.0, 22.0]] {
            let before = q.values().to_vec();
            q.update(&e, &budgets);
            for i in 0..2 {
                assert!(q.values()[i] >= before[i] + e[i] - budgets[i]);
                assert!(q.values()[i] >= 0.0);
            }
        }
        assert_eq!(q.history().unwrap().len(), 4);
    }
}
