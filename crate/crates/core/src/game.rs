//! Non-cooperative peer offloading.
//!
//! Each SBS picks its own routing row to minimize its own cost, taking the
//! other rows as given. SBS i sees peer j through the residual capacity
//! μ_ij = μ_j − Σ_{k≠i} β_kj and the LAN through Λ_{−i} = 1 − τ·Σ_{k≠i} λ_k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::central::realize_profile;
use crate::central::solve_per_slot_centralized;
use crate::central::DEFAULT_FLOW_TOLERANCE;
use crate::error::{Error, Result};
use crate::lyapunov::per_slot_objective;
use crate::model::{Category, NetworkConfig, OffloadProfile, SlotState};

pub const DEFAULT_CONVERGENCE_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ROUNDS: usize = 500;
const MAX_BISECTION: usize = 200;

/// Pre-offloading pair-specific MaCC ξ_ij of one SBS against every SBS.
/// Peers SBS i cannot send to are `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMaccVector(pub Vec<f64>);

/// What SBS `i` sees of everyone else.
#[derive(Debug, Clone)]
struct View {
    i: usize,
    phi: f64,
    v: f64,
    weight: f64,
    tau: f64,
    /// μ_ij for every j.
    residual_mu: Vec<f64>,
    /// How much more SBS j can take before hitting its stability cap.
    room: Vec<f64>,
    lan_room: f64,
    big_lambda: f64,
}

impl View {
    fn new(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Self {
        let n = cfg.n_sbs();
        let mut inbound = vec![0.0; n];
        let mut others_lan = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            for (j, x) in inbound.iter_mut().enumerate() {
                *x += beta.get(k, j);
            }
            others_lan += beta.outbound(k);
        }
        let residual_mu = (0..n).map(|j| cfg.service_rates[j] - inbound[j]).collect();
        let room = (0..n).map(|j| cfg.workload_cap(j) - inbound[j]).collect();
        Self {
            i,
            phi: st.arrivals[i],
            v: cfg.control_v,
            weight: cfg.energy_weight(st.queues[i]),
            tau: cfg.lan_delay,
            residual_mu,
            room,
            lan_room: cfg.lan_cap() - others_lan,
            big_lambda: 1.0 - cfg.lan_delay * others_lan,
        }
    }

    fn eligible(&self, j: usize) -> bool {
        j != self.i && self.room[j] > 0.0 && self.lan_room > 0.0
    }

    fn forced(&self) -> bool {
        self.phi > self.room[self.i]
    }

    fn d(&self, j: usize, x: f64) -> f64 {
        let m = self.residual_mu[j];
        m / ((m - x) * (m - x))
    }

    fn g(&self, lambda: f64) -> f64 {
        if lambda > self.lan_room {
            return f64::INFINITY;
        }
        let l = self.big_lambda;
        self.tau * l / ((l - self.tau * lambda) * (l - self.tau * lambda))
    }

    /// Largest x ≥ 0 with d_ij(x) ≤ y, clamped to `upper`.
    fn d_inverse(&self, j: usize, y: f64, upper: f64) -> f64 {
        let m = self.residual_mu[j];
        let x = if y.is_infinite() {
            m
        } else if y * m <= 1.0 {
            0.0
        } else {
            m - (m / y).sqrt()
        };
        x.clamp(0.0, upper.max(0.0))
    }

    fn pmacc(&self) -> PairMaccVector {
        PairMaccVector(
            (0..self.residual_mu.len())
                .map(|j| {
                    if j == self.i {
                        if self.forced() {
                            f64::INFINITY
                        } else {
                            self.v * self.d(j, self.phi) + self.weight
                        }
                    } else if self.eligible(j) {
                        self.v / self.residual_mu[j]
                    } else {
                        f64::INFINITY
                    }
                })
                .collect(),
        )
    }

    fn sink_flows(&self, alpha: f64, xi: &PairMaccVector) -> Vec<f64> {
        (0..xi.0.len())
            .map(|j| {
                if j != self.i && xi.0[j] < alpha {
                    self.d_inverse(j, alpha / self.v, self.room[j])
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn retained(&self, alpha: f64, lambda_s: f64) -> f64 {
        let level = alpha + self.v * self.g(lambda_s);
        let y = (level - self.weight) / self.v;
        self.d_inverse(self.i, y, self.phi.min(self.room[self.i]))
    }
}

/// C_i: Σ_j β_ij·c_ij with c_ij = V/(μ_j − ω_j) + Vτ/(1 − τλ) for j ≠ i and
/// c_ii = V/(μ_i − ω_i) + κq_i.
pub fn sbs_cost(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Result<f64> {
    beta.check_feasible(cfg, st)?;
    Ok(sbs_cost_unchecked(i, beta, cfg, st))
}

fn sbs_cost_unchecked(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> f64 {
    let v = cfg.control_v;
    let lambda = beta.lan_traffic();
    let lan = v * cfg.lan_delay / (1.0 - cfg.lan_delay * lambda);
    (0..cfg.n_sbs())
        .map(|j| {
            let b = beta.get(i, j);
            if b == 0.0 {
                return 0.0;
            }
            let comp = v / (cfg.service_rates[j] - beta.post_workload(j));
            if j == i {
                b * (comp + cfg.energy_weight(st.queues[i]))
            } else {
                b * (comp + lan)
            }
        })
        .sum()
}

/// K_i = C_i + V·D^u_i + q_i·E^tx_i + q_i·κ·(ω_i − β_ii). The last term
/// charges SBS i for energy spent on work it receives, so Σ_i K_i is the
/// per-slot objective.
pub fn sbs_full_cost(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Result<f64> {
    beta.check_feasible(cfg, st)?;
    Ok(full_cost_unchecked(i, beta, cfg, st))
}

fn full_cost_unchecked(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> f64 {
    let w = cfg.energy_weight(st.queues[i]);
    sbs_cost_unchecked(i, beta, cfg, st)
        + cfg.control_v * st.uplink_delay[i]
        + st.queues[i] * st.tx_energy[i]
        + w * (beta.post_workload(i) - beta.get(i, i))
}

fn total_cost(beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> f64 {
    (0..cfg.n_sbs()).map(|i| full_cost_unchecked(i, beta, cfg, st)).sum()
}

/// ξ_ij for SBS `i` against the other rows of `beta`.
pub fn pair_macc(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> PairMaccVector {
    View::new(i, beta, cfg, st).pmacc()
}

/// d_ij(β_ij) = μ_ij/(μ_ij − β_ij)² and g_i(λ_i) = τΛ_{−i}/(Λ_{−i} − τλ_i)²,
/// with the other rows of `beta` held fixed.
pub fn pair_marginals(
    i: usize,
    j: usize,
    beta_ij: f64,
    lambda_i: f64,
    beta: &OffloadProfile,
    cfg: &NetworkConfig,
) -> Result<(f64, f64)> {
    let st = SlotState::from_arrivals(vec![0.0; cfg.n_sbs()]);
    let view = View::new(i, beta, cfg, &st);
    let m = view.residual_mu[j];
    if m <= 0.0 || beta_ij >= m {
        return Err(Error::Domain(format!("residual capacity {m} of SBS {j} cannot take {beta_ij}")));
    }
    let l = view.big_lambda;
    if l <= 0.0 || cfg.lan_delay * lambda_i >= l {
        return Err(Error::Domain(format!("LAN saturated: Λ = {l}, λ_i = {lambda_i}")));
    }
    let g = cfg.lan_delay * l / ((l - cfg.lan_delay * lambda_i) * (l - cfg.lan_delay * lambda_i));
    Ok((view.d(j, beta_ij), g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub row: Vec<f64>,
    pub alpha: f64,
    pub category: Category,
    pub iterations: usize,
    /// |λ_S − λ_R| before reconciliation.
    pub flow_gap: f64,
    /// Multiplier of the LAN cap; zero unless SBS i fills the LAN.
    pub lan_price: f64,
}

/// Best response of SBS `i` to the other rows of `beta`.
pub fn best_response(
    i: usize,
    beta: &OffloadProfile,
    cfg: &NetworkConfig,
    st: &SlotState,
    flow_tolerance: f64,
) -> Result<BestResponse> {
    let n = cfg.n_sbs();
    let view = View::new(i, beta, cfg, st);
    let xi = view.pmacc();
    let keep_all = || {
        let mut row = vec![0.0; n];
        row[i] = view.phi;
        row
    };
    let peers: Vec<usize> = (0..n).filter(|&j| view.eligible(j)).collect();
    let xi_min = peers.iter().map(|&j| xi.0[j]).fold(f64::INFINITY, f64::min);
    if !view.forced() && (peers.is_empty() || xi_min + cfg.control_v * view.g(0.0) >= xi.0[i]) {
        return Ok(BestResponse {
            row: keep_all(),
            alpha: xi.0[i],
            category: Category::Neutral,
            iterations: 0,
            flow_gap: 0.0,
            lan_price: 0.0,
        });
    }
    if peers.is_empty() {
        return Err(Error::Internal(format!("SBS {i} is overloaded and has no peer to offload to")));
    }
    if cfg.control_v == 0.0 {
        return Err(Error::Parameter("best response needs V > 0".into()));
    }

    let evaluate = |alpha: f64| {
        let sinks = view.sink_flows(alpha, &xi);
        let inflow: f64 = sinks.iter().sum();
        let retained = view.retained(alpha, inflow);
        (sinks, inflow, retained)
    };
    let mut hi = peers
        .iter()
        .map(|&j| cfg.control_v * view.d(j, view.room[j]))
        .fold(if view.forced() { f64::NEG_INFINITY } else { xi.0[i] }, f64::max);
    hi = hi * (1.0 + 1e-12) + 1e-12;
    let mut lo = xi_min;

    let (sinks, inflow, retained) = evaluate(hi);
    if inflow < view.phi - retained {
        // Even with every peer filled, SBS i would still like to send more.
        return Ok(finish(&view, sinks, inflow, retained, hi, 0));
    }
    let mut best: Option<(Vec<f64>, f64, f64, f64, usize)> = None;
    let mut iter = 0;
    while iter < MAX_BISECTION {
        iter += 1;
        let alpha = 0.5 * (lo + hi);
        let (sinks, inflow, retained) = evaluate(alpha);
        let gap = inflow - (view.phi - retained);
        if gap > 0.0 {
            hi = alpha;
        } else {
            lo = alpha;
        }
        if best.as_ref().is_none_or(|b| gap.abs() < (b.1 - (view.phi - b.2)).abs()) {
            best = Some((sinks, inflow, retained, alpha, iter));
        }
        let mid = 0.5 * (lo + hi);
        if gap == 0.0 || mid <= lo || mid >= hi {
            break;
        }
    }
    let (sinks, inflow, retained, alpha, at) = best.expect("at least one iteration");
    let gap = inflow - (view.phi - retained);
    let collapsed = 0.5 * (lo + hi) <= lo || 0.5 * (lo + hi) >= hi;
    if collapsed && evaluate(hi).1 > view.lan_room {
        let (sinks, inflow, _) = evaluate(lo);
        if inflow <= view.lan_room && view.phi - inflow <= view.phi.min(view.room[i]) {
            // The LAN fills up before the balance closes: the cap binds.
            let kept = view.phi - inflow;
            let marginal = view.v * view.d(i, kept) + view.weight;
            let mut br = finish(&view, sinks, inflow, kept, lo, at);
            br.lan_price = (marginal - lo - view.v * view.g(inflow)).max(0.0);
            return Ok(br);
        }
    }
    if gap.abs() < flow_tolerance || (collapsed && gap.abs() <= 1e-6 * (inflow + view.phi - retained)) {
        return Ok(finish(&view, sinks, inflow, retained, alpha, at));
    }
    Err(Error::NonConvergence {
        iterations: iter,
        detail: format!("SBS {i}: alpha in [{lo}, {hi}], gap {gap}"),
    })
}

fn finish(view: &View, mut sinks: Vec<f64>, inflow: f64, retained: f64, alpha: f64, iterations: usize) -> BestResponse {
    let i = view.i;
    let outflow = view.phi - retained;
    let gap = inflow - outflow;
    if gap > 0.0 {
        let scale = outflow / inflow;
        for x in sinks.iter_mut() {
            *x *= scale;
        }
    } else if gap < 0.0 {
        // Peers take the leftover first; whatever does not fit stays home.
        let rooms: Vec<f64> = (0..sinks.len())
            .map(|j| if view.eligible(j) && sinks[j] > 0.0 { (view.room[j] - sinks[j]).max(0.0) } else { 0.0 })
            .collect();
        let total: f64 = rooms.iter().sum();
        if total > 0.0 {
            let take = (-gap).min(total);
            for (x, r) in sinks.iter_mut().zip(&rooms) {
                *x += take * r / total;
            }
        }
    }
    sinks[i] = 0.0;
    let mut sent: f64 = sinks.iter().sum();
    if sent > view.phi {
        // Rounding can leave the sends a few ulps above φ_i.
        for x in sinks.iter_mut() {
            *x *= view.phi / sent;
        }
        sent = view.phi;
    }
    sinks[i] = (view.phi - sent).max(0.0);
    let category = if sent > 0.0 { Category::Source } else { Category::Neutral };
    BestResponse {
        row: sinks,
        alpha,
        category,
        iterations,
        flow_gap: gap.abs(),
        lan_price: 0.0,
    }
}

/// Worst relative violation of the best-response optimality conditions for
/// row `i` of `beta`: every uncapped receiving peer at α_i and an interior
/// retained load at α_i + V·g_i(λ_i) plus the LAN price.
pub fn best_response_certificate(
    i: usize,
    beta: &OffloadProfile,
    br: &BestResponse,
    cfg: &NetworkConfig,
    st: &SlotState,
) -> f64 {
    let view = View::new(i, beta, cfg, st);
    if br.iterations == 0 {
        return 0.0;
    }
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    let lambda_i: f64 = (0..br.row.len()).filter(|&j| j != i).map(|j| br.row[j]).sum();
    let mut worst: f64 = 0.0;
    for j in (0..br.row.len()).filter(|&j| j != i) {
        let b = br.row[j];
        if b > 0.0 && b < view.room[j] * (1.0 - 1e-9) {
            worst = worst.max(rel(cfg.control_v * view.d(j, b), br.alpha));
        }
    }
    let kept = br.row[i];
    if kept > 0.0 && kept < view.phi.min(view.room[i]) * (1.0 - 1e-9) {
        let target = br.alpha + cfg.control_v * view.g(lambda_i) + br.lan_price;
        worst = worst.max(rel(cfg.control_v * view.d(i, kept) + view.weight, target));
    }
    if br.lan_price > 0.0 {
        worst = worst.max((view.lan_room - lambda_i).max(0.0) / view.lan_room.max(1e-12));
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    pub profile: OffloadProfile,
    pub rounds: usize,
    pub last_total_cost_change: f64,
    /// C_i at the final profile.
    pub costs: Vec<f64>,
    /// K_i at the final profile.
    pub full_costs: Vec<f64>,
}

/// Runs best responses in ascending SBS order until, over a round, both the
/// total cost and every SBS's own best-response gain change by less than
/// `rel_tolerance` times the initial total cost.
pub fn round_robin_ne(
    cfg: &NetworkConfig,
    st: &SlotState,
    rel_tolerance: f64,
    max_rounds: usize,
) -> Result<GameState> {
    cfg.validate()?;
    st.validate(cfg)?;
    let n = cfg.n_sbs();
    let mut beta = OffloadProfile::no_offload(&st.arrivals);
    if beta.check_feasible(cfg, st).is_err() {
        let alloc = solve_per_slot_centralized(cfg, st, DEFAULT_FLOW_TOLERANCE)?;
        beta = realize_profile(&alloc, st)?;
    }
    let eps = rel_tolerance * total_cost(&beta, cfg, st).abs();
    let mut total = total_cost(&beta, cfg, st);
    let mut history = vec![total];
    for round in 1..=max_rounds {
        let mut max_gain: f64 = 0.0;
        for i in 0..n {
            let before = sbs_cost_unchecked(i, &beta, cfg, st);
            let br = best_response(i, &beta, cfg, st, DEFAULT_FLOW_TOLERANCE)?;
            let mut next = beta.clone();
            next.set_row(i, &br.row);
            let after = sbs_cost_unchecked(i, &next, cfg, st);
            if after > before + 1e-9 * before.abs().max(1.0) {
                return Err(Error::Internal(format!(
                    "best response of SBS {i} raised its cost from {before} to {after}"
                )));
            }
            if after <= before {
                max_gain = max_gain.max(before - after);
                next.check_feasible(cfg, st)?;
                beta = next;
            }
        }
        let now = total_cost(&beta, cfg, st);
        let change = (now - total).abs();
        total = now;
        history.push(now);
        if (change < eps && max_gain < eps) || (change == 0.0 && max_gain == 0.0) {
            return Ok(GameState {
                costs: (0..n).map(|i| sbs_cost_unchecked(i, &beta, cfg, st)).collect(),
                full_costs: (0..n).map(|i| full_cost_unchecked(i, &beta, cfg, st)).collect(),
                profile: beta,
                rounds: round,
                last_total_cost_change: change,
            });
        }
    }
    let tail: Vec<f64> = history.iter().rev().take(2).copied().collect();
    Err(Error::NonConvergence {
        iterations: max_rounds,
        detail: format!("total cost over the last two rounds: {tail:?}"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeVerdict {
    pub is_ne: bool,
    /// Largest cost reduction any SBS can obtain alone.
    pub worst_improvement: f64,
    pub worst_sbs: Option<usize>,
    /// Most negative ⟨∇C_i, β' − β_i⟩ over probe rows, normalized by C_i.
    pub worst_vi: f64,
}

/// Gradient of C_i with respect to row i.
fn row_gradient(i: usize, beta: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Vec<f64> {
    let view = View::new(i, beta, cfg, st);
    let lambda_i = beta.outbound(i);
    (0..cfg.n_sbs())
        .map(|j| {
            let b = beta.get(i, j);
            if j == i {
                cfg.control_v * view.d(i, b) + view.weight
            } else {
                cfg.control_v * (view.d(j, b) + view.g(lambda_i))
            }
        })
        .collect()
}

/// Checks that no SBS can lower its cost alone: compares each row with its
/// best response, with every single-target row and with `probes` random rows.
pub fn verify_ne(
    beta: &OffloadProfile,
    cfg: &NetworkConfig,
    st: &SlotState,
    tol: f64,
    probes: usize,
    seed: u64,
) -> Result<NeVerdict> {
    beta.check_feasible(cfg, st)?;
    let n = cfg.n_sbs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verdict = NeVerdict {
        is_ne: true,
        worst_improvement: 0.0,
        worst_sbs: None,
        worst_vi: 0.0,
    };
    for i in 0..n {
        let current = sbs_cost_unchecked(i, beta, cfg, st);
        let grad = row_gradient(i, beta, cfg, st);
        let phi = st.arrivals[i];
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        candidates.push(best_response(i, beta, cfg, st, DEFAULT_FLOW_TOLERANCE)?.row);
        for j in 0..n {
            let mut row = vec![0.0; n];
            row[j] = phi;
            candidates.push(row);
        }
        for _ in 0..probes {
            let mut w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x *= phi / s);
            candidates.push(w);
        }
        for row in candidates {
            let mut probe = beta.clone();
            probe.set_row(i, &row);
            if probe.check_feasible(cfg, st).is_err() {
                continue;
            }
            let gain = current - sbs_cost_unchecked(i, &probe, cfg, st);
            if gain > verdict.worst_improvement {
                verdict.worst_improvement = gain;
                verdict.worst_sbs = Some(i);
            }
            let inner: f64 = (0..n).map(|j| grad[j] * (row[j] - beta.get(i, j))).sum();
            verdict.worst_vi = verdict.worst_vi.min(inner / current.abs().max(1e-12));
        }
    }
    verdict.is_ne = verdict.worst_improvement <= tol;
    Ok(verdict)
}

/// Σ_i K_i(β_ne) / Σ_i K_i(β*), decision-independent parts included.
pub fn measure_poa(ne: &OffloadProfile, star: &OffloadProfile, cfg: &NetworkConfig, st: &SlotState) -> Result<f64> {
    let num = per_slot_objective(ne, cfg, st)?.value;
    let den = per_slot_objective(star, cfg, st)?.value;
    if den <= 0.0 {
        return Ok(if num <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let poa = num / den;
    if poa < 1.0 - 1e-9 {
        return Err(Error::Internal(format!(
            "equilibrium cost {num} below the centralized optimum {den}"
        )));
    }
    Ok(poa)
}

fn random_feasible_profile(rng: &mut ChaCha8Rng, cfg: &NetworkConfig, st: &SlotState) -> Option<OffloadProfile> {
    let n = cfg.n_sbs();
    for _ in 0..100 {
        let mut beta = OffloadProfile::zeros(n);
        for i in 0..n {
            // Mostly local, a random fraction spread over peers.
            let share: f64 = rng.random::<f64>() * 0.2;
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| w[j]).sum();
            for j in 0..n {
                let x = if j == i {
                    st.arrivals[i] * (1.0 - share)
                } else if s > 0.0 {
                    st.arrivals[i] * share * w[j] / s
                } else {
                    0.0
                };
                beta.set(i, j, x);
            }
            if n == 1 {
                beta.set(0, 0, st.arrivals[0]);
            }
        }
        if beta.check_feasible(cfg, st).is_ok() {
            return Some(beta);
        }
    }
    None
}

/// Sampled lower estimate of the PoA slope ρ: the supremum, over random
/// profile pairs (β, β̂) and destinations j, of
/// Σ_i [(c̃_ij(β) − c_ij(β̂))·β̂_ij + (c_ij(β) − c̃_ij(β))·β_ij] / Σ_i β_ij·c_ij(β),
/// where c̃_ij is the marginal cost ∂C_i/∂β_ij.
pub fn sampled_rho(cfg: &NetworkConfig, st: &SlotState, samples: usize, seed: u64) -> f64 {
    let n = cfg.n_sbs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_costs = |beta: &OffloadProfile| -> Vec<Vec<f64>> {
        let v = cfg.control_v;
        let lan = v * cfg.lan_delay / (1.0 - cfg.lan_delay * beta.lan_traffic());
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let comp = v / (cfg.service_rates[j] - beta.post_workload(j));
                        if i == j {
                            comp + cfg.energy_weight(st.queues[i])
                        } else {
                            comp + lan
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let mut rho = f64::NEG_INFINITY;
    for _ in 0..samples {
        let (Some(b), Some(h)) = (random_feasible_profile(&mut rng, cfg, st), random_feasible_profile(&mut rng, cfg, st))
        else {
            continue;
        };
        let cb = unit_costs(&b);
        let ch = unit_costs(&h);
        let marg: Vec<Vec<f64>> = (0..n).map(|i| row_gradient(i, &b, cfg, st)).collect();
        for j in 0..n {
            let den: f64 = (0..n).map(|i| b.get(i, j) * cb[i][j]).sum();
            if den <= 0.0 {
                continue;
            }
            let num: f64 = (0..n)
                .map(|i| (marg[i][j] - ch[i][j]) * h.get(i, j) + (cb[i][j] - marg[i][j]) * b.get(i, j))
                .sum();
            rho = rho.max(num / den);
        }
    }
    rho
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::per_slot_objective;

    fn cfg(n: usize) -> NetworkConfig {
        NetworkConfig::homogeneous(n, 75.0, 0.2, 0.324, 22.0, 50.0)
    }

    #[test]
    fn no_offload_cost_is_local_term_only() {
        let c = cfg(2);
        let st = SlotState::from_arrivals(vec![40.0, 20.0]).with_queues(vec![3.0, 0.0]);
        let b = OffloadProfile::no_offload(&st.arrivals);
        let got = sbs_cost(0, &b, &c, &st).unwrap();
        let want = 40.0 * (50.0 / 35.0 + 0.324 * 3.0);
        assert!((got - want).abs() < 1e-12);
        let got = sbs_cost(1, &b, &c, &st).unwrap();
        assert!((got - 50.0 * 20.0 / 55.0).abs() < 1e-12);
    }

    #[test]
    fn full_costs_sum_to_objective() {
        let c = cfg(3);
        let mut st = SlotState::from_arrivals(vec![50.0, 20.0, 30.0]).with_queues(vec![1.0, 4.0, 2.0]);
        st.uplink_delay = vec![0.3, 0.1, 0.2];
        st.tx_energy = vec![1.0, 2.0, 0.5];
        let b = OffloadProfile::from_rows(&[vec![46.0, 3.0, 1.0], vec![0.0, 20.0, 0.0], vec![0.0, 0.5, 29.5]]).unwrap();
        let k: f64 = (0..3).map(|i| sbs_full_cost(i, &b, &c, &st).unwrap()).sum();
        let obj = per_slot_objective(&b, &c, &st).unwrap().value;
        assert!((k - obj).abs() <= 1e-10 * obj);
    }

    #[test]
    fn marginals_reduce_to_system_ones_when_others_idle() {
        let c = cfg(2);
        let b = OffloadProfile::no_offload(&[30.0, 10.0]);
        let (d, g) = pair_marginals(0, 1, 0.0, 0.0, &b, &c).unwrap();
        assert!((d - 1.0 / (75.0 - 10.0)).abs() < 1e-15);
        assert!((g - 0.2).abs() < 1e-15);
    }

    #[test]
    fn marginals_match_finite_differences() {
        let c = cfg(3);
        let b = OffloadProfile::from_rows(&[vec![30.0, 1.0, 0.0], vec![0.0, 20.0, 0.0], vec![0.5, 0.5, 40.0]]).unwrap();
        let view = View::new(0, &b, &c, &SlotState::from_arrivals(vec![31.0, 20.0, 41.0]));
        let (x, lam) = (2.0, 1.5);
        let (d, g) = pair_marginals(0, 1, x, lam, &b, &c).unwrap();
        let m = view.residual_mu[1];
        let f = |x: f64| x / (m - x);
        let h = 1e-5;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        assert!((fd - d).abs() / d < 1e-6);
        let l = view.big_lambda;
        let cg = |y: f64| y * 0.2 / (l - 0.2 * y);
        let fd = (cg(lam + h) - cg(lam - h)) / (2.0 * h);
        assert!((fd - g).abs() / g < 1e-6);
    }

    #[test]
    fn saturated_peers_mean_keep_everything() {
        let c = cfg(3);
        let st = SlotState::from_arrivals(vec![60.0, 74.99, 74.99]);
        let b = OffloadProfile::no_offload(&st.arrivals);
        let br = best_response(0, &b, &c, &st, 1e-9).unwrap();
        assert_eq!(br.row, vec![60.0, 0.0, 0.0]);
    }

    #[test]
    fn overloaded_sbs_offloads_with_certificate() {
        let c = NetworkConfig {
            service_rates: vec![75.0, 150.0],
            ..cfg(2)
        };
        let st = SlotState::from_arrivals(vec![72.0, 5.0]).with_queues(vec![2.0, 0.0]);
        let b = OffloadProfile::no_offload(&st.arrivals);
        let br = best_response(0, &b, &c, &st, 1e-10).unwrap();
        assert!(br.row[1] > 0.0);
        assert!(best_response_certificate(0, &b, &br, &c, &st) < 1e-8);
        assert!((br.row.iter().sum::<f64>() - 72.0).abs() < 1e-12);
    }

    #[test]
    fn best_response_beats_random_deviations() {
        let c = cfg(3);
        let st = SlotState::from_arrivals(vec![70.0, 10.0, 30.0]).with_queues(vec![0.5, 0.0, 1.0]);
        let b = OffloadProfile::no_offload(&st.arrivals);
        let br = best_response(0, &b, &c, &st, 1e-10).unwrap();
        let mut with_br = b.clone();
        with_br.set_row(0, &br.row);
        let best = sbs_cost(0, &with_br, &c, &st).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            let row: Vec<f64> = w.iter().map(|x| 70.0 * x / s).collect();
            let mut p = b.clone();
            p.set_row(0, &row);
            if let Ok(cost) = sbs_cost(0, &p, &c, &st) {
                assert!(cost >= best - 1e-9 * best);
            }
        }
    }

    #[test]
    fn single_sbs_game_is_trivial() {
        let c = cfg(1);
        let st = SlotState::from_arrivals(vec![40.0]);
        let g = round_robin_ne(&c, &st, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS).unwrap();
        assert_eq!(g.rounds, 1);
        assert_eq!(g.profile.get(0, 0), 40.0);
        assert!(verify_ne(&g.profile, &c, &st, 1e-9, 10, 0).unwrap().is_ne);
        assert_eq!(measure_poa(&g.profile, &g.profile, &c, &st).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_game_stays_local() {
        let c = cfg(3);
        let st = SlotState::from_arrivals(vec![40.0; 3]);
        let g = round_robin_ne(&c, &st, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS).unwrap();
        assert_eq!(g.profile, OffloadProfile::no_offload(&st.arrivals));
    }

    #[test]
    fn equilibrium_verifies_and_perturbation_is_flagged() {
        let c = cfg(3);
        let st = SlotState::from_arrivals(vec![73.0, 5.0, 20.0]).with_queues(vec![1.0, 0.0, 0.0]);
        let g = round_robin_ne(&c, &st, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS).unwrap();
        let eps = 1e-6 * g.full_costs.iter().sum::<f64>();
        let v = verify_ne(&g.profile, &c, &st, eps, 200, 1).unwrap();
        assert!(v.is_ne, "{v:?}");
        let mut bad = g.profile.clone();
        let moved = 0.1 * bad.get(0, 1);
        assert!(moved > 0.0);
        bad.set(0, 1, bad.get(0, 1) - moved);
        bad.set(0, 0, bad.get(0, 0) + moved);
        assert!(!verify_ne(&bad, &c, &st, eps, 200, 1).unwrap().is_ne);
    }

    #[test]
    fn equilibrium_costs_at_least_the_optimum() {
        let c = cfg(4);
        let st = SlotState::from_arrivals(vec![72.0, 5.0, 20.0, 60.0]).with_queues(vec![1.0, 0.0, 3.0, 0.0]);
        let g = round_robin_ne(&c, &st, DEFAULT_CONVERGENCE_TOLERANCE, DEFAULT_MAX_ROUNDS).unwrap();
        let star = realize_profile(&solve_per_slot_centralized(&c, &st, 1e-9).unwrap(), &st).unwrap();
        let poa = measure_poa(&g.profile, &star, &c, &st).unwrap();
        assert!(poa >= 1.0);
        let rho = sampled_rho(&c, &st, 200, 5);
        assert!(rho.is_finite());
    }

    #[test]
    fn best_response_stops_at_a_full_lan() {
        let mut c = cfg(2);
        c.control_v = 1.0;
        let st = SlotState::from_arrivals(vec![60.0, 0.0]).with_queues(vec![1e9, 0.0]);
        let beta = OffloadProfile::no_offload(&st.arrivals);
        let br = best_response(0, &beta, &c, &st, DEFAULT_FLOW_TOLERANCE).unwrap();
        assert!(br.lan_price > 0.0);
        assert!(br.row[1] <= c.lan_cap() && br.row[1] > c.lan_cap() * (1.0 - 1e-9));
        assert!((br.row[0] + br.row[1] - 60.0).abs() < 1e-9);
        assert!(best_response_certificate(0, &beta, &br, &c, &st) < 1e-6);
    }
}
