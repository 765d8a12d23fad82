//! Centralized per-slot solver.
//!
//! The per-slot problem is convex in the post-offloading workloads ω and the
//! LAN traffic λ. Its KKT conditions split SBSs into sinks, neutrals and
//! sources around a common multiplier α: sinks are filled until their
//! marginal computation cost V·d_i(ω_i) + κq_i equals α, sources shed load
//! until theirs equals α + V·g(λ). A bisection on α closes the flow balance
//! between what sinks absorb and what sources send.

use crate::error::{Error, FeasibilityViolation, Result};
use crate::lyapunov::{instance_feasible, stability_caps};
use crate::model::{
    approx_eq, inverse_marginal_comp_delay, marginal_comp_delay, marginal_congestion_delay, Allocation,
    Category, NetworkConfig, OffloadProfile, SlotState,
};

pub const DEFAULT_FLOW_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;

/// Pre-offloading marginal computation costs ξ_i; `+∞` marks an SBS whose
/// arrivals alone saturate it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaccVector(pub Vec<f64>);

impl MaccVector {
    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// ξ_i = V·μ_i/(μ_i − φ_i)² + κ·q_i·slot_scale.
pub fn pre_offloading_macc(cfg: &NetworkConfig, st: &SlotState) -> MaccVector {
    MaccVector(
        (0..cfg.n_sbs())
            .map(|i| {
                let (phi, mu) = (st.arrivals[i], cfg.service_rates[i]);
                if phi >= mu {
                    f64::INFINITY
                } else {
                    cfg.control_v * mu / ((mu - phi) * (mu - phi)) + cfg.energy_weight(st.queues[i])
                }
            })
            .collect(),
    )
}

/// Categorization and flows at one value of the multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBalanceState {
    pub alpha: f64,
    pub sinks: Vec<usize>,
    pub sources: Vec<usize>,
    pub neutrals: Vec<usize>,
    /// λ_S, inbound to sinks.
    pub sink_inflow: f64,
    /// λ_R, outbound from sources.
    pub source_outflow: f64,
    /// Workload each SBS would carry at this α.
    pub workloads: Vec<f64>,
}

impl FlowBalanceState {
    pub fn category(&self, i: usize) -> Category {
        if self.sinks.contains(&i) {
            Category::Sink
        } else if self.sources.contains(&i) {
            Category::Source
        } else {
            Category::Neutral
        }
    }
}

/// Per-slot problem data shared by the bisection and the certificate check.
#[derive(Debug, Clone)]
pub(crate) struct CentralProblem<'a> {
    cfg: &'a NetworkConfig,
    st: &'a SlotState,
    caps: Vec<f64>,
    weights: Vec<f64>,
    macc: Vec<f64>,
}

impl<'a> CentralProblem<'a> {
    pub(crate) fn new(cfg: &'a NetworkConfig, st: &'a SlotState, caps: Vec<f64>) -> Self {
        let weights = st.queues.iter().map(|&q| cfg.energy_weight(q)).collect();
        let mut macc = pre_offloading_macc(cfg, st).0;
        for (i, x) in macc.iter_mut().enumerate() {
            if st.arrivals[i] > caps[i] {
                *x = f64::INFINITY;
            }
        }
        Self {
            cfg,
            st,
            caps,
            weights,
            macc,
        }
    }

    fn forced(&self, i: usize) -> bool {
        self.st.arrivals[i] > self.caps[i]
    }

    /// V·d_i(ω) + κq_i.
    fn marginal_cost(&self, i: usize, omega: f64) -> f64 {
        let mu = self.cfg.service_rates[i];
        self.cfg.control_v * mu / ((mu - omega) * (mu - omega)) + self.weights[i]
    }

    /// Workload at which SBS `i`'s marginal cost reaches `level`, clamped to
    /// [0, cap_i].
    fn workload_at_level(&self, i: usize, level: f64) -> f64 {
        let mu = self.cfg.service_rates[i];
        let y = (level - self.weights[i]) / self.cfg.control_v;
        let omega = if y.is_nan() || y * mu <= 1.0 {
            0.0
        } else if y.is_infinite() {
            mu
        } else {
            inverse_marginal_comp_delay(y, mu).unwrap_or(0.0)
        };
        omega.min(self.caps[i])
    }

    fn congestion_marginal(&self, lambda: f64) -> f64 {
        if lambda > self.cfg.lan_cap() {
            f64::INFINITY
        } else {
            marginal_congestion_delay(lambda, self.cfg.lan_delay).unwrap_or(f64::INFINITY)
        }
    }

    fn sink_inflow(&self, alpha: f64) -> f64 {
        (0..self.st.n_sbs())
            .filter(|&i| !self.forced(i) && self.macc[i] < alpha)
            .map(|i| (self.workload_at_level(i, alpha) - self.st.arrivals[i]).max(0.0))
            .sum()
    }

    pub(crate) fn categorize(&self, alpha: f64, lambda_guess: f64) -> FlowBalanceState {
        self.categorize_at(alpha, alpha + self.cfg.control_v * self.congestion_marginal(lambda_guess))
    }

    /// Sinks filled to `alpha`, sources drained down to `source_level`.
    fn categorize_at(&self, alpha: f64, source_level: f64) -> FlowBalanceState {
        let n = self.st.n_sbs();
        let mut out = FlowBalanceState {
            alpha,
            sinks: Vec::new(),
            sources: Vec::new(),
            neutrals: Vec::new(),
            sink_inflow: 0.0,
            source_outflow: 0.0,
            workloads: self.st.arrivals.clone(),
        };
        for i in 0..n {
            let phi = self.st.arrivals[i];
            let xi = self.macc[i];
            if !self.forced(i) && xi < alpha {
                let omega = self.workload_at_level(i, alpha);
                if omega > phi {
                    out.workloads[i] = omega;
                    out.sink_inflow += omega - phi;
                    out.sinks.push(i);
                } else {
                    // α − κq_i below the idle marginal: nothing flows in.
                    out.neutrals.push(i);
                }
            } else if xi > source_level || self.forced(i) {
                let omega = self.workload_at_level(i, source_level).min(phi);
                out.workloads[i] = omega;
                out.source_outflow += phi - omega;
                out.sources.push(i);
            } else {
                out.neutrals.push(i);
            }
        }
        out
    }

    /// With the LAN full at multiplier `alpha`, raises the sources' level
    /// until they send exactly what the sinks take. Returns the state and the
    /// sources' marginal cost level.
    fn lan_bound(&self, alpha: f64) -> (FlowBalanceState, f64) {
        let inflow = self.sink_inflow(alpha);
        let base = alpha + self.cfg.control_v * self.congestion_marginal(inflow);
        let mut lo = base;
        let mut hi = (0..self.st.n_sbs())
            .map(|i| self.marginal_cost(i, self.st.arrivals[i].min(self.caps[i])))
            .fold(base, f64::max);
        // Keep the closest state whose sinks take at least what the sources
        // send, so reconciliation never pushes the LAN past its cap.
        let mut best = (self.categorize_at(alpha, hi), hi);
        for _ in 0..DEFAULT_MAX_ITERATIONS {
            let level = 0.5 * (lo + hi);
            if level <= lo || level >= hi {
                break;
            }
            let state = self.categorize_at(alpha, level);
            let gap = state.sink_inflow - state.source_outflow;
            if gap >= 0.0 {
                hi = level;
                best = (state, level);
            } else {
                lo = level;
            }
            if gap == 0.0 {
                break;
            }
        }
        best
    }

    /// α at which every unforced SBS would be filled to its cap and every
    /// forced one would shed only its excess over the cap.
    fn alpha_upper(&self) -> f64 {
        let mut upper = self.macc.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..self.st.n_sbs() {
            upper = upper.max(self.marginal_cost(i, self.caps[i]));
        }
        upper * (1.0 + 1e-12) + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralSolution {
    pub allocation: Allocation,
    pub alpha: f64,
    pub iterations: usize,
    /// |λ_S − λ_R| before reconciliation.
    pub flow_gap: f64,
    /// Multiplier of the LAN cap; zero unless the LAN is full.
    pub lan_price: f64,
}

/// Solves the per-slot problem with the default stability caps.
pub fn solve_per_slot_centralized(cfg: &NetworkConfig, st: &SlotState, flow_tolerance: f64) -> Result<Allocation> {
    solve_with_caps(cfg, st, &stability_caps(cfg), flow_tolerance, DEFAULT_MAX_ITERATIONS).map(|s| s.allocation)
}

/// Solves the per-slot problem with per-SBS workload caps `caps[i] ≤ (1 − ε)μ_i`.
pub fn solve_with_caps(
    cfg: &NetworkConfig,
    st: &SlotState,
    caps: &[f64],
    flow_tolerance: f64,
    max_iterations: usize,
) -> Result<CentralSolution> {
    cfg.validate()?;
    st.validate(cfg)?;
    let n = cfg.n_sbs();
    if caps.len() != n {
        return Err(Error::Parameter(format!("{} caps for {n} SBSs", caps.len())));
    }
    let caps: Vec<f64> = caps.iter().enumerate().map(|(i, &c)| c.clamp(0.0, cfg.workload_cap(i))).collect();
    if !instance_feasible(st, &caps, cfg.lan_cap()) {
        return Err(Error::infeasible(
            FeasibilityViolation::Stability,
            format!("arrivals {:?} admit no stable allocation", st.arrivals),
        ));
    }
    let problem = CentralProblem::new(cfg, st, caps);
    let any_forced = (0..n).any(|i| problem.forced(i));
    let xi = MaccVector(problem.macc.clone());
    let no_offload = || CentralSolution {
        allocation: Allocation::no_offload(st),
        alpha: xi.min(),
        iterations: 0,
        flow_gap: 0.0,
        lan_price: 0.0,
    };
    if !any_forced {
        let g0 = marginal_congestion_delay(0.0, cfg.lan_delay)?;
        if xi.min() + cfg.control_v * g0 >= xi.max() {
            return Ok(no_offload());
        }
    }
    if cfg.control_v == 0.0 {
        return Err(Error::Parameter(
            "V = 0 makes the allocation a linear program; the marginal-cost bisection needs V > 0".into(),
        ));
    }

    let mut lo = xi.min().min(problem.alpha_upper());
    let mut hi = problem.alpha_upper();
    // Bisect until the bracket collapses; ε̃ is the acceptance threshold on
    // the best state seen. λ_S − λ_R must grow with α, so each new gap has to
    // fall between the gaps at the bracket ends.
    let (mut gap_lo, mut gap_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best: Option<(FlowBalanceState, usize)> = None;
    let mut iter = 0;
    while iter < max_iterations {
        iter += 1;
        let alpha = 0.5 * (lo + hi);
        let inflow = problem.sink_inflow(alpha);
        let state = problem.categorize(alpha, inflow);
        let gap = state.sink_inflow - state.source_outflow;
        let slack = 1e-9 * (state.sink_inflow + state.source_outflow).max(1.0);
        if gap < gap_lo - slack || gap > gap_hi + slack {
            return Err(Error::Internal(format!(
                "flow gap {gap} at alpha={alpha} outside bracket gaps [{gap_lo}, {gap_hi}]"
            )));
        }
        if gap > 0.0 {
            hi = alpha;
            gap_hi = gap;
        } else {
            lo = alpha;
            gap_lo = gap;
        }
        let improves = best
            .as_ref()
            .is_none_or(|(b, _)| gap.abs() < (b.sink_inflow - b.source_outflow).abs());
        if improves {
            best = Some((state, iter));
        }
        let mid = 0.5 * (lo + hi);
        if gap == 0.0 || mid <= lo || mid >= hi {
            break;
        }
    }
    let (mut state, at) = best.expect("at least one iteration");
    let mut source_level = None;
    let collapsed = 0.5 * (lo + hi) <= lo || 0.5 * (lo + hi) >= hi;
    if collapsed && problem.sink_inflow(hi) > cfg.lan_cap() && problem.sink_inflow(lo) <= cfg.lan_cap() {
        // The balance jumps where the LAN fills up: the cap binds.
        let (s, level) = problem.lan_bound(lo);
        state = s;
        source_level = Some(level);
    }
    let residual = (state.sink_inflow - state.source_outflow).abs();
    // Near the LAN cap one ulp of α can move the balance by more than ε̃;
    // once the bracket has collapsed, accept a residual at float resolution.
    let resolution = 1e-6 * (state.sink_inflow + state.source_outflow);
    if residual < flow_tolerance || (collapsed && residual <= resolution) {
        let mut sol = finish(&problem, state, at);
        if let Some(level) = source_level {
            let g = cfg.control_v * problem.congestion_marginal(sol.allocation.lan_traffic);
            sol.lan_price = (level - sol.alpha - g).max(0.0);
        }
        return Ok(sol);
    }
    Err(Error::NonConvergence {
        iterations: iter,
        detail: format!(
            "alpha={} in [{lo}, {hi}], inflow={} outflow={}",
            state.alpha, state.sink_inflow, state.source_outflow
        ),
    })
}

/// Removes the residual flow mismatch so that mass is conserved exactly.
fn finish(problem: &CentralProblem<'_>, state: FlowBalanceState, iterations: usize) -> CentralSolution {
    let st = problem.st;
    let mut workloads = state.workloads.clone();
    let gap = state.sink_inflow - state.source_outflow;
    if gap > 0.0 {
        let scale = state.source_outflow / state.sink_inflow;
        for &i in &state.sinks {
            workloads[i] = st.arrivals[i] + (workloads[i] - st.arrivals[i]) * scale;
        }
    } else if gap < 0.0 {
        // Sinks take the leftover first; a source whose retained load sits at
        // zero has a marginal cost above theirs.
        let mut excess = -gap;
        let room: Vec<(usize, f64)> = state
            .sinks
            .iter()
            .map(|&i| (i, (problem.caps[i] - workloads[i]).max(0.0)))
            .collect();
        let total_room: f64 = room.iter().map(|r| r.1).sum();
        if total_room > 0.0 {
            let take = excess.min(total_room);
            for &(i, r) in &room {
                workloads[i] += take * r / total_room;
            }
            excess -= take;
        }
        if excess > 0.0 {
            let room: Vec<(usize, f64)> = state
                .sources
                .iter()
                .map(|&i| (i, (st.arrivals[i].min(problem.caps[i]) - workloads[i]).max(0.0)))
                .collect();
            let total_room: f64 = room.iter().map(|r| r.1).sum();
            if total_room > 0.0 {
                for &(i, r) in &room {
                    workloads[i] += excess * r / total_room;
                }
            }
        }
    }
    let mut allocation = Allocation::from_workloads(st, workloads);
    for &i in &state.sinks {
        allocation.categories[i] = Category::Sink;
    }
    for &i in &state.sources {
        allocation.categories[i] = Category::Source;
    }
    for &i in &state.neutrals {
        allocation.categories[i] = Category::Neutral;
    }
    CentralSolution {
        allocation,
        alpha: state.alpha,
        iterations,
        flow_gap: gap.abs(),
        lan_price: 0.0,
    }
}

/// Classifies SBSs at multiplier `alpha` with the LAN traffic guess used for
/// the source threshold, and reports the resulting flows.
pub fn categorize(
    alpha: f64,
    lambda_guess: f64,
    xi: &MaccVector,
    cfg: &NetworkConfig,
    st: &SlotState,
) -> Result<FlowBalanceState> {
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!("multiplier {alpha} must be positive")));
    }
    if !(lambda_guess >= 0.0 && lambda_guess * cfg.lan_delay < 1.0) {
        return Err(Error::Domain(format!("LAN traffic guess {lambda_guess} outside [0, 1/τ)")));
    }
    let mut problem = CentralProblem::new(cfg, st, stability_caps(cfg));
    for (m, &x) in problem.macc.iter_mut().zip(&xi.0) {
        *m = if m.is_infinite() { *m } else { x };
    }
    Ok(problem.categorize(alpha, lambda_guess))
}

/// Worst violation of the optimality conditions of an allocation, relative
/// to the multiplier scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub sink_residual: f64,
    pub source_residual: f64,
    pub neutral_residual: f64,
    pub flow_gap: f64,
    /// Positive LAN price with spare LAN capacity, relative to the price.
    pub lan_residual: f64,
}

impl KktReport {
    pub fn worst(&self) -> f64 {
        self.sink_residual.max(self.source_residual).max(self.neutral_residual).max(self.lan_residual)
    }
}

/// Checks the marginal-cost equalization conditions of a centralized
/// solution: sinks at α, interior sources at α + V·g(λ) plus the LAN price,
/// neutrals between.
pub fn kkt_certificate(cfg: &NetworkConfig, st: &SlotState, caps: &[f64], sol: &CentralSolution) -> KktReport {
    let problem = CentralProblem::new(cfg, st, caps.to_vec());
    let alloc = &sol.allocation;
    let alpha = sol.alpha;
    let g = cfg.control_v * problem.congestion_marginal(alloc.lan_traffic) + sol.lan_price;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    let mut report = KktReport {
        sink_residual: 0.0,
        source_residual: 0.0,
        neutral_residual: 0.0,
        flow_gap: sol.flow_gap,
        lan_residual: 0.0,
    };
    if sol.lan_price > 0.0 {
        report.lan_residual = (cfg.lan_cap() - alloc.lan_traffic).max(0.0) / cfg.lan_cap();
    }
    for i in 0..cfg.n_sbs() {
        let w = alloc.post_workloads[i];
        let at_cap = w >= problem.caps[i] * (1.0 - 1e-9);
        match alloc.categories[i] {
            Category::Sink if !at_cap => {
                report.sink_residual = report.sink_residual.max(rel(problem.marginal_cost(i, w), alpha));
            }
            Category::Source if w > 0.0 && !at_cap => {
                report.source_residual = report.source_residual.max(rel(problem.marginal_cost(i, w), alpha + g));
            }
            Category::Neutral if sol.iterations > 0 => {
                let xi = problem.macc[i];
                let below = (alpha - xi).max(0.0) / alpha;
                let above = (xi - alpha - g).max(0.0) / (alpha + g);
                report.neutral_residual = report.neutral_residual.max(below.max(above));
            }
            _ => {}
        }
    }
    report
}

/// Realizes an allocation as a routing matrix: sources sorted by surplus and
/// sinks by deficit, both descending, matched greedily largest to largest.
pub fn realize_profile(alloc: &Allocation, st: &SlotState) -> Result<OffloadProfile> {
    let n = st.n_sbs();
    if alloc.post_workloads.len() != n {
        return Err(Error::Internal(format!("allocation for {} SBSs, state has {n}", alloc.post_workloads.len())));
    }
    let mut beta = OffloadProfile::zeros(n);
    let mut surplus = Vec::new();
    let mut deficit = Vec::new();
    for i in 0..n {
        let (phi, w) = (st.arrivals[i], alloc.post_workloads[i]);
        beta.set(i, i, phi.min(w));
        if phi > w {
            surplus.push((i, phi - w));
        } else if w > phi {
            deficit.push((i, w - phi));
        }
    }
    let total_out: f64 = surplus.iter().map(|s| s.1).sum();
    let total_in: f64 = deficit.iter().map(|s| s.1).sum();
    if (total_out - total_in).abs() > 1e-9 * total_out.max(total_in).max(1.0) {
        return Err(Error::Internal(format!(
            "sources send {total_out} but sinks absorb {total_in}"
        )));
    }
    let by_size_desc = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    surplus.sort_by(by_size_desc);
    deficit.sort_by(by_size_desc);

    let (mut s, mut d) = (0, 0);
    while s < surplus.len() && d < deficit.len() {
        let amount = surplus[s].1.min(deficit[d].1);
        let (src, dst) = (surplus[s].0, deficit[d].0);
        beta.set(src, dst, beta.get(src, dst) + amount);
        surplus[s].1 -= amount;
        deficit[d].1 -= amount;
        if surplus[s].1 <= deficit[d].1 {
            s += 1;
        } else {
            d += 1;
        }
    }
    // Rounding leftovers stay with whichever side still has mass.
    for &(src, rest) in &surplus[s.min(surplus.len())..] {
        if rest > 0.0 {
            let dst = deficit.last().map(|x| x.0).unwrap_or(src);
            beta.set(src, dst, beta.get(src, dst) + rest);
        }
    }
    Ok(beta)
}

/// Post-offloading MaCC of SBS `i` at workload `omega`.
pub fn post_offloading_macc(cfg: &NetworkConfig, st: &SlotState, i: usize, omega: f64) -> Result<f64> {
    Ok(cfg.control_v * marginal_comp_delay(omega, cfg.service_rates[i])? + cfg.energy_weight(st.queues[i]))
}

/// Whether two allocations match entry by entry.
pub fn allocations_match(a: &Allocation, b: &Allocation, abs_tol: f64) -> bool {
    a.post_workloads.len() == b.post_workloads.len()
        && a.post_workloads
            .iter()
            .zip(&b.post_workloads)
            .all(|(x, y)| (x - y).abs() <= abs_tol || approx_eq(*x, *y))
}
