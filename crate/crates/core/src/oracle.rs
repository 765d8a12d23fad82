//! Reference minimizers for the per-slot problem on small instances.
//!
//! They do not use the marginal-cost categorization at all. Every split of
//! the SBSs into givers (ω_i ≤ φ_i) and receivers (ω_i ≥ φ_i) turns the
//! problem into a smooth convex program over a box intersected with the
//! conservation hyperplane; each one is solved by projected gradient descent
//! followed by pairwise golden-section moves, and the best split wins.

use crate::error::{Error, Result};
use crate::lyapunov::stability_caps;
use crate::model::{NetworkConfig, SlotState};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub workloads: Vec<f64>,
    pub lan_traffic: f64,
    /// Decision-dependent part of the per-slot objective.
    pub objective: f64,
}

struct Split<'a> {
    cfg: &'a NetworkConfig,
    phi: &'a [f64],
    weights: Vec<f64>,
    giver: Vec<bool>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    lan_cap: f64,
}

impl Split<'_> {
    fn lan(&self, w: &[f64]) -> f64 {
        (0..w.len()).filter(|&i| self.giver[i]).map(|i| (self.phi[i] - w[i]).max(0.0)).sum()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let v = self.cfg.control_v;
        let tau = self.cfg.lan_delay;
        let lambda = self.lan(w);
        if lambda > self.lan_cap {
            return f64::INFINITY;
        }
        let mut f = v * tau * lambda / (1.0 - tau * lambda);
        for (i, &x) in w.iter().enumerate() {
            let mu = self.cfg.service_rates[i];
            if x >= mu {
                return f64::INFINITY;
            }
            f += v * x / (mu - x) + self.weights[i] * x;
        }
        f
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let v = self.cfg.control_v;
        let tau = self.cfg.lan_delay;
        let lambda = self.lan(w);
        let g = tau / ((1.0 - tau * lambda) * (1.0 - tau * lambda));
        (0..w.len())
            .map(|i| {
                let mu = self.cfg.service_rates[i];
                let d = mu / ((mu - w[i]) * (mu - w[i]));
                v * d + self.weights[i] - if self.giver[i] { v * g } else { 0.0 }
            })
            .collect()
    }

    /// Euclidean projection onto the box intersected with Σw = total.
    fn project(&self, x: &[f64], total: f64) -> Vec<f64> {
        let at = |s: f64| -> f64 { (0..x.len()).map(|i| (x[i] - s).clamp(self.lo[i], self.hi[i])).sum() };
        let spread = x.iter().copied().fold(0.0f64, |m, v| m.max(v.abs())) + total + 1.0;
        let (mut a, mut b) = (-spread - 1.0, spread + 1.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if at(m) > total {
                a = m;
            } else {
                b = m;
            }
        }
        let s = 0.5 * (a + b);
        (0..x.len()).map(|i| (x[i] - s).clamp(self.lo[i], self.hi[i])).collect()
    }

    fn start(&self, total: f64) -> Option<Vec<f64>> {
        let n = self.phi.len();
        let mut w: Vec<f64> = (0..n).map(|i| if self.giver[i] { self.hi[i] } else { self.lo[i] }).collect();
        let need = total - w.iter().sum::<f64>();
        let room: f64 = (0..n).filter(|&i| !self.giver[i]).map(|i| self.hi[i] - self.lo[i]).sum();
        if need > room * (1.0 + 1e-12) || self.lan(&w) >= self.lan_cap {
            return None;
        }
        if need > 0.0 && room > 0.0 {
            for i in (0..n).filter(|&i| !self.giver[i]) {
                w[i] += need * (self.hi[i] - self.lo[i]) / room;
            }
        }
        if self.value(&w).is_finite() {
            Some(w)
        } else {
            None
        }
    }

    fn solve(&self, total: f64) -> Option<(Vec<f64>, f64)> {
        let mut w = self.start(total)?;
        let mut f = self.value(&w);
        let mut step = 1.0;
        for _ in 0..20_000 {
            let grad = self.gradient(&w);
            let mut accepted = false;
            let mut t = step * 4.0;
            for _ in 0..80 {
                let trial: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x - t * g).collect();
                let cand = self.project(&trial, total);
                let decrease: f64 = grad.iter().zip(cand.iter().zip(&w)).map(|(g, (c, x))| g * (c - x)).sum();
                let fc = self.value(&cand);
                if fc.is_finite() && fc <= f + 1e-4 * decrease {
                    let moved = cand.iter().zip(&w).map(|(c, x)| (c - x).abs()).fold(0.0, f64::max);
                    w = cand;
                    let improvement = f - fc;
                    f = fc;
                    step = t;
                    accepted = moved > 1e-14 && improvement > 1e-15 * f.abs().max(1.0);
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        self.polish(&mut w, &mut f);
        Some((w, f))
    }

    /// Golden-section search on mass moved between every ordered pair.
    fn polish(&self, w: &mut [f64], f: &mut f64) {
        let n = w.len();
        for _ in 0..200 {
            let before = *f;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let max_move = (w[i] - self.lo[i]).min(self.hi[j] - w[j]);
                    if max_move <= 0.0 {
                        continue;
                    }
                    let base = w.to_vec();
                    let eval = |d: f64| {
                        let mut x = base.clone();
                        x[i] -= d;
                        x[j] += d;
                        self.value(&x)
                    };
                    let d = golden_section(0.0, max_move, eval);
                    let fd = eval(d);
                    if fd < *f {
                        w[i] -= d;
                        w[j] += d;
                        *f = fd;
                    }
                }
            }
            if before - *f <= 1e-15 * f.abs().max(1.0) {
                break;
            }
        }
    }
}

fn golden_section(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()).max(1e-300) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let mut best = (0.5 * (a + b), f(0.5 * (a + b)));
    for x in [a, b, 0.0] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best.0
}

/// Minimizes the per-slot objective under the default stability caps by
/// enumerating all giver/receiver splits. Exponential in N; intended for
/// N ≤ 10.
pub fn brute_force_oracle(cfg: &NetworkConfig, st: &SlotState) -> Result<OracleSolution> {
    brute_force_oracle_with_caps(cfg, st, &stability_caps(cfg))
}

/// As [`brute_force_oracle`], with per-SBS workload caps.
pub fn brute_force_oracle_with_caps(cfg: &NetworkConfig, st: &SlotState, caps: &[f64]) -> Result<OracleSolution> {
    cfg.validate()?;
    st.validate(cfg)?;
    let n = cfg.n_sbs();
    if n > 16 {
        return Err(Error::Parameter(format!("oracle enumerates 2^N splits; N = {n} is too large")));
    }
    let total = st.total_arrivals();
    let weights: Vec<f64> = st.queues.iter().map(|&q| cfg.energy_weight(q)).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << n) {
        let giver: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        if (0..n).any(|i| !giver[i] && st.arrivals[i] > caps[i]) {
            continue;
        }
        let lo = (0..n).map(|i| if giver[i] { 0.0 } else { st.arrivals[i] }).collect();
        let hi = (0..n).map(|i| if giver[i] { st.arrivals[i].min(caps[i]) } else { caps[i] }).collect();
        let split = Split {
            cfg,
            phi: &st.arrivals,
            weights: weights.clone(),
            giver,
            lo,
            hi,
            lan_cap: cfg.lan_cap(),
        };
        if let Some((w, f)) = split.solve(total) {
            if best.as_ref().is_none_or(|b| f < b.1) {
                best = Some((w, f));
            }
        }
    }
    let (workloads, objective) =
        best.ok_or_else(|| Error::Internal("no giver/receiver split admits a stable allocation".into()))?;
    let lan_traffic = workloads.iter().zip(&st.arrivals).map(|(w, p)| (p - w).max(0.0)).sum();
    Ok(OracleSolution {
        workloads,
        lan_traffic,
        objective,
    })
}

/// Two-SBS reference: a uniform grid over ω_0 with step 10⁻³·Σφ, refined by
/// golden section around the best cell.
pub fn grid_oracle_two(cfg: &NetworkConfig, st: &SlotState) -> Result<OracleSolution> {
    cfg.validate()?;
    st.validate(cfg)?;
    if cfg.n_sbs() != 2 {
        return Err(Error::Parameter("grid oracle needs exactly two SBSs".into()));
    }
    let total = st.total_arrivals();
    let caps = stability_caps(cfg);
    let v = cfg.control_v;
    let tau = cfg.lan_delay;
    let w: Vec<f64> = st.queues.iter().map(|&q| cfg.energy_weight(q)).collect();
    let f = |x: f64| -> f64 {
        let y = total - x;
        if x < 0.0 || y < 0.0 || x > caps[0] || y > caps[1] {
            return f64::INFINITY;
        }
        let lambda = (st.arrivals[0] - x).abs();
        if lambda > cfg.lan_cap() {
            return f64::INFINITY;
        }
        let (m0, m1) = (cfg.service_rates[0], cfg.service_rates[1]);
        v * x / (m0 - x) + w[0] * x + v * y / (m1 - y) + w[1] * y + v * tau * lambda / (1.0 - tau * lambda)
    };
    if total == 0.0 {
        return Ok(OracleSolution {
            workloads: vec![0.0, 0.0],
            lan_traffic: 0.0,
            objective: 0.0,
        });
    }
    let h = 1e-3 * total;
    let mut best = (f64::NAN, f64::INFINITY);
    for k in 0..=1000 {
        let x = (k as f64 * h).min(total);
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Internal("grid holds no stable allocation".into()));
    }
    // The objective has a kink at x = φ_0, so refine each side separately.
    let (a, b) = ((best.0 - h).max(0.0), (best.0 + h).min(total));
    let kink = st.arrivals[0];
    let mut candidates = vec![best.0];
    if a < kink && kink < b {
        candidates.push(golden_section(a, kink, &f));
        candidates.push(golden_section(kink, b, &f));
        candidates.push(kink);
    } else {
        candidates.push(golden_section(a, b, &f));
    }
    let x = candidates.into_iter().min_by(|p, q| f(*p).total_cmp(&f(*q))).unwrap();
    let workloads = vec![x, total - x];
    Ok(OracleSolution {
        lan_traffic: (st.arrivals[0] - x).abs(),
        objective: f(x),
        workloads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> NetworkConfig {
        NetworkConfig::homogeneous(n, 75.0, 0.2, 0.324, 22.0, 50.0)
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section(-3.0, 5.0, |x| (x - 1.25) * (x - 1.25));
        assert!((x - 1.25).abs() < 1e-7);
    }

    #[test]
    fn projection_lands_on_hyperplane_within_box() {
        let c = cfg(3);
        let phi = [10.0, 20.0, 30.0];
        let s = Split {
            cfg: &c,
            phi: &phi,
            weights: vec![0.0; 3],
            giver: vec![true, false, false],
            lo: vec![0.0, 20.0, 30.0],
            hi: vec![10.0, 70.0, 70.0],
            lan_cap: c.lan_cap(),
        };
        let p = s.project(&[100.0, -5.0, 40.0], 60.0);
        assert!((p.iter().sum::<f64>() - 60.0).abs() < 1e-9);
        for i in 0..3 {
            assert!(p[i] >= s.lo[i] - 1e-12 && p[i] <= s.hi[i] + 1e-12);
        }
    }

    #[test]
    fn oracles_agree_on_two_sbs() {
        let c = cfg(2);
        let st = SlotState::from_arrivals(vec![70.0, 12.0]).with_queues(vec![1.0, 3.0]);
        let a = brute_force_oracle(&c, &st).unwrap();
        let b = grid_oracle_two(&c, &st).unwrap();
        assert!((a.objective - b.objective).abs() <= 1e-9 * b.objective);
        assert!(a.lan_traffic > 0.0);
    }

    #[test]
    fn balanced_instance_stays_put() {
        let c = cfg(3);
        let st = SlotState::from_arrivals(vec![30.0; 3]);
        let a = brute_force_oracle(&c, &st).unwrap();
        for w in a.workloads {
            assert!((w - 30.0).abs() < 1e-6);
        }
    }
}
