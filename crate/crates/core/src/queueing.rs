//! Abandonment in a two-sided FIFO queue with exponential patience: the
//! exact birth-death chain, the thickness thresholds it implies, a
//! discrete-event simulator, and the EDF approximations used by the
//! envy-free variant.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default truncation tolerance for the stationary series.
pub const DEFAULT_TAIL_TOL: f64 = 1e-14;
/// Largest number of states per side the chain may use.
pub const STATE_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueParams {
    /// Buyer arrival rate.
    pub lambda: f64,
    /// Seller arrival rate.
    pub mu: f64,
    /// Buyer patience rate.
    pub kappa: f64,
    /// Seller patience rate.
    pub gamma: f64,
    /// Target abandonment probability.
    pub eta: f64,
}

impl QueueParams {
    pub fn new(lambda: f64, mu: f64, kappa: f64, gamma: f64, eta: f64) -> Result<QueueParams> {
        let p = QueueParams { lambda, mu, kappa, gamma, eta };
        p.validate()?;
        Ok(p)
    }

    /// Balanced market with equal patience.
    pub fn balanced(rate: f64, patience: f64, eta: f64) -> Result<QueueParams> {
        QueueParams::new(rate, rate, patience, patience, eta)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("kappa", self.kappa), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        check_eta(self.eta)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Domain(format!("eta must lie in (0, 1), got {eta}")));
    }
    Ok(())
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

/// Truncated stationary distribution of the queue-length chain.
///
/// State `b(n)` has `n` buyers waiting, `s(n)` has `n` sellers waiting.
/// `b(n) -> b(n+1)` at rate `λ`, `b(n) -> b(n-1)` at `μ + nκ`; the seller
/// side mirrors this with `μ`, `λ + nγ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stationary {
    pub params: QueueParams,
    /// Probability of the empty state.
    pub q0: f64,
    /// `buyers[n-1] = P(b(n))`.
    pub buyers: Vec<f64>,
    /// `sellers[n-1] = P(s(n))`.
    pub sellers: Vec<f64>,
    /// Bound on the probability mass beyond the truncation.
    pub tail_error: f64,
}

impl Stationary {
    /// Long-run abandonment rate over total arrival rate `λ + μ`.
    pub fn abandonment_probability(&self) -> f64 {
        let p = &self.params;
        let rate: f64 = self.buyers.iter().enumerate().map(|(i, b)| (i + 1) as f64 * p.kappa * b).sum::<f64>()
            + self.sellers.iter().enumerate().map(|(i, s)| (i + 1) as f64 * p.gamma * s).sum::<f64>();
        rate / (p.lambda + p.mu)
    }

    pub fn total_mass(&self) -> f64 {
        self.q0 + self.buyers.iter().sum::<f64>() + self.sellers.iter().sum::<f64>()
    }

    /// Largest detailed-balance residual over adjacent state pairs.
    pub fn detailed_balance_residual(&self) -> f64 {
        let p = &self.params;
        let side = |probs: &[f64], up: f64, down: f64, patience: f64| {
            let mut prev = self.q0;
            let mut worst: f64 = 0.0;
            for (i, &cur) in probs.iter().enumerate() {
                let n = (i + 1) as f64;
                worst = worst.max((prev * up - cur * (down + n * patience)).abs());
                prev = cur;
            }
            worst
        };
        side(&self.buyers, p.lambda, p.mu, p.kappa).max(side(&self.sellers, p.mu, p.lambda, p.gamma))
    }
}

/// Unnormalized weights `w_n = Π_{k<=n} up / (down + k·patience)` until the
/// remaining tail is below `tol` relative to the running sum. Returns the
/// weights and the tail bound, both relative to `w_0 = 1`.
fn side_weights(up: f64, down: f64, patience: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    let mut weights = Vec::new();
    let mut w = 1.0f64;
    let mut sum = 1.0f64;
    for n in 1..=STATE_CAP {
        let ratio = up / (down + n as f64 * patience);
        w *= ratio;
        if !w.is_finite() {
            return Err(Error::Truncation(format!("queue weights overflow at state {n}")));
        }
        weights.push(w);
        sum += w;
        // Later ratios are smaller still, so the tail is at most geometric.
        let next = up / (down + (n + 1) as f64 * patience);
        if next < 1.0 {
            let tail = w * next / (1.0 - next);
            if tail < tol * sum {
                return Ok((weights, tail));
            }
        }
    }
    Err(Error::Truncation(format!("series did not reach tolerance {tol:e} within {STATE_CAP} states")))
}

/// Stationary distribution truncated once the neglected mass falls below
/// `tail_tol` (relative).
pub fn stationary(params: &QueueParams, tail_tol: f64) -> Result<Stationary> {
    params.validate()?;
    if !(tail_tol > 0.0) {
        return Err(Error::Domain(format!("tail tolerance must be positive, got {tail_tol}")));
    }
    let (b, b_tail) = side_weights(params.lambda, params.mu, params.kappa, tail_tol)?;
    let (s, s_tail) = side_weights(params.mu, params.lambda, params.gamma, tail_tol)?;
    let z = 1.0 + b.iter().sum::<f64>() + s.iter().sum::<f64>();
    Ok(Stationary {
        params: *params,
        q0: 1.0 / z,
        buyers: b.into_iter().map(|w| w / z).collect(),
        sellers: s.into_iter().map(|w| w / z).collect(),
        tail_error: (b_tail + s_tail) / z,
    })
}

/// Long-run fraction of arriving agents who abandon. For `λ = μ` this is
/// the empty-queue probability `q₀`.
pub fn abandonment_probability(params: &QueueParams, tail_tol: f64) -> Result<f64> {
    Ok(stationary(params, tail_tol)?.abandonment_probability())
}

/// `q₀` for `λ = μ` straight from the series
/// `1/q₀ = 1 + Σ_n [Π_j 1/(1+jγ/λ) + Π_j 1/(1+jκ/λ)]`.
pub fn q0_series(lambda: f64, kappa: f64, gamma: f64, tail_tol: f64) -> Result<f64> {
    check_rate("lambda", lambda)?;
    check_rate("kappa", kappa)?;
    check_rate("gamma", gamma)?;
    let (b, _) = side_weights(lambda, lambda, kappa, tail_tol)?;
    let (s, _) = side_weights(lambda, lambda, gamma, tail_tol)?;
    Ok(1.0 / (1.0 + b.iter().sum::<f64>() + s.iter().sum::<f64>()))
}

/// Balanced arrival rate that guarantees abandonment at most `η`:
/// `(3/2) · min(γ, κ) / η²`.
pub fn flow_lower_bound(kappa: f64, gamma: f64, eta: f64) -> Result<f64> {
    check_rate("kappa", kappa)?;
    check_rate("gamma", gamma)?;
    check_eta(eta)?;
    Ok(1.5 * kappa.min(gamma) / (eta * eta))
}

/// Conditions any policy with abandonment at most `η` must meet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NecessaryBound {
    /// Lower bound on `min(λ, μ)`.
    pub min_rate: f64,
    /// Allowed range of `λ/μ`.
    pub balance_window: (f64, f64),
}

/// `min(λ, μ) >= min(γ, κ) / (14000 η²)` and `λ/μ ∈ [1-η, 1+η]`, valid for
/// `η <= 1/6`.
pub fn necessary_bound(kappa: f64, gamma: f64, eta: f64) -> Result<NecessaryBound> {
    check_rate("kappa", kappa)?;
    check_rate("gamma", gamma)?;
    check_eta(eta)?;
    if eta > 1.0 / 6.0 {
        return Err(Error::Domain(format!("the necessary conditions are stated for eta <= 1/6, got {eta}")));
    }
    Ok(NecessaryBound { min_rate: kappa.min(gamma) / (14000.0 * eta * eta), balance_window: (1.0 - eta, 1.0 + eta) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sandwich {
    pub c: f64,
    /// `√c / 7`.
    pub lower: f64,
    pub exact: f64,
    /// `min(1, √(3c/2))`.
    pub upper: f64,
}

impl Sandwich {
    pub fn holds(&self) -> bool {
        self.lower <= self.exact && self.exact <= self.upper
    }
}

/// Brackets the exact `q₀` of a balanced queue with `γ = κ = cλ`.
pub fn sandwich_check(c: f64) -> Result<Sandwich> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain(format!("c must lie in (0, 1], got {c}")));
    }
    let exact = q0_series(1.0, c, c, DEFAULT_TAIL_TOL)?;
    Ok(Sandwich { c, lower: c.sqrt() / 7.0, exact, upper: (1.5 * c).sqrt().min(1.0) })
}

/// Monte-Carlo estimate across replications.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationReport {
    pub params: QueueParams,
    pub horizon: f64,
    /// Untallied start-up time preceding the horizon.
    pub burn_in: f64,
    pub seed: u64,
    /// Abandoned over arrived, per replication.
    pub fractions: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean across replications (0 for one run).
    pub stderr: f64,
    pub arrived: u64,
    pub abandoned: u64,
}

/// Simulates the FIFO two-sided queue for `horizon` time units after a
/// burn-in of `min(10 / min(κ, γ), horizon / 10)`, counting abandonments
/// and arrivals inside the window. Replication `r` draws from stream `r`
/// of a generator seeded with `seed`.
pub fn simulate_fifo(params: &QueueParams, horizon: f64, replications: usize, seed: u64) -> Result<SimulationReport> {
    params.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if replications == 0 {
        return Err(Error::Domain("need at least one replication".into()));
    }
    let burn_in = (10.0 / params.kappa.min(params.gamma)).min(horizon / 10.0);
    let runs: Vec<(u64, u64)> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            run_fifo(params, burn_in, burn_in + horizon, &mut rng)
        })
        .collect();
    let fractions: Vec<f64> = runs.iter().map(|&(arr, ab)| if arr == 0 { 0.0 } else { ab as f64 / arr as f64 }).collect();
    let k = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / k;
    let stderr = if fractions.len() > 1 {
        (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(SimulationReport {
        params: *params,
        horizon,
        burn_in,
        seed,
        fractions,
        mean,
        stderr,
        arrived: runs.iter().map(|r| r.0).sum(),
        abandoned: runs.iter().map(|r| r.1).sum(),
    })
}

/// One replication; returns `(arrived, abandoned)` inside `[start, end)`.
fn run_fifo(p: &QueueParams, start: f64, end: f64, rng: &mut ChaCha8Rng) -> (u64, u64) {
    let buyer_gap = Exp::new(p.lambda).expect("validated rate");
    let seller_gap = Exp::new(p.mu).expect("validated rate");
    let buyer_patience = Exp::new(p.kappa).expect("validated rate");
    let seller_patience = Exp::new(p.gamma).expect("validated rate");

    // Only one side can be waiting at a time. FIFO order lives in `queue`;
    // deadlines in a min-heap. Both hold agent ids, `gone` marks agents
    // already matched or abandoned.
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut deadlines: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    let mut gone: Vec<bool> = Vec::new();
    let mut waiting_buyers = true;
    let mut waiting = 0usize;

    let mut next_buyer = buyer_gap.sample(rng);
    let mut next_seller = seller_gap.sample(rng);
    let (mut arrived, mut abandoned) = (0u64, 0u64);
    let key = |t: f64| t.to_bits();

    loop {
        let next_deadline = loop {
            match deadlines.peek() {
                Some(&Reverse((_, id))) if gone[id] => {
                    deadlines.pop();
                }
                Some(&Reverse((bits, _))) => break f64::from_bits(bits),
                None => break f64::INFINITY,
            }
        };
        let t = next_buyer.min(next_seller).min(next_deadline);
        if t >= end {
            return (arrived, abandoned);
        }
        if t == next_deadline {
            let Reverse((_, id)) = deadlines.pop().expect("peeked");
            gone[id] = true;
            waiting -= 1;
            if t >= start {
                abandoned += 1;
            }
            continue;
        }
        let is_buyer = t == next_buyer;
        if is_buyer {
            next_buyer = t + buyer_gap.sample(rng);
        } else {
            next_seller = t + seller_gap.sample(rng);
        }
        if t >= start {
            arrived += 1;
        }
        if waiting > 0 && waiting_buyers != is_buyer {
            // Match with the longest-waiting agent on the other side.
            while let Some(id) = queue.pop_front() {
                if !gone[id] {
                    gone[id] = true;
                    waiting -= 1;
                    break;
                }
            }
        } else {
            waiting_buyers = is_buyer;
            let patience = if is_buyer { buyer_patience.sample(rng) } else { seller_patience.sample(rng) };
            let id = gone.len();
            gone.push(false);
            queue.push_back(id);
            deadlines.push(Reverse((key(t + patience), id)));
            waiting += 1;
        }
        if waiting == 0 {
            queue.clear();
            deadlines.clear();
        }
        // Keep the id table from growing without bound.
        if waiting == 0 && gone.len() > 1 << 20 {
            gone.clear();
        }
    }
}

/// Approximate EDF abandonment at a balanced facility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdfBound {
    /// `2 / (2 + λD̄ + λS̄)`.
    pub combined: f64,
    /// `1 / (1 + λD̄)`.
    pub buyers: f64,
    /// `1 / (1 + λS̄)`.
    pub sellers: f64,
}

pub fn edf_abandonment_bound(lambda: f64, dbar: f64, sbar: f64) -> Result<EdfBound> {
    check_rate("lambda", lambda)?;
    check_rate("mean buyer deadline", dbar)?;
    check_rate("mean seller deadline", sbar)?;
    Ok(EdfBound {
        combined: 2.0 / (2.0 + lambda * dbar + lambda * sbar),
        buyers: 1.0 / (1.0 + lambda * dbar),
        sellers: 1.0 / (1.0 + lambda * sbar),
    })
}

/// Weighted-flow lower bound `2/η` making EDF abandonment at most `η`.
pub fn edf_weight_lower_bound(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(2.0 / eta)
}

/// Analytics for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueReport {
    pub params: QueueParams,
    pub exact: f64,
    pub tail_error: f64,
    /// States kept per side `(buyers, sellers)`.
    pub truncation: (usize, usize),
    pub sufficient_rate: f64,
    /// `None` outside the `η <= 1/6` regime.
    pub necessary: Option<NecessaryBound>,
    pub edf_weight_bound: f64,
    pub simulation: Option<SimulationReport>,
}

impl QueueReport {
    pub fn new(params: &QueueParams, tail_tol: f64) -> Result<QueueReport> {
        let st = stationary(params, tail_tol)?;
        Ok(QueueReport {
            params: *params,
            exact: st.abandonment_probability(),
            tail_error: st.tail_error,
            truncation: (st.buyers.len(), st.sellers.len()),
            sufficient_rate: flow_lower_bound(params.kappa, params.gamma, params.eta)?,
            necessary: necessary_bound(params.kappa, params.gamma, params.eta).ok(),
            edf_weight_bound: edf_weight_lower_bound(params.eta)?,
            simulation: None,
        })
    }

    /// Whether the parameters meet the sufficient thickness condition.
    pub fn meets_sufficient(&self) -> bool {
        self.params.lambda.min(self.params.mu) >= self.sufficient_rate
            && (self.params.lambda - self.params.mu).abs() <= 1e-12 * self.params.lambda
    }
}

impl fmt::Display for QueueReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        writeln!(f, "lambda: {:?}", p.lambda)?;
        writeln!(f, "mu: {:?}", p.mu)?;
        writeln!(f, "kappa: {:?}", p.kappa)?;
        writeln!(f, "gamma: {:?}", p.gamma)?;
        writeln!(f, "eta: {:?}", p.eta)?;
        writeln!(f, "abandonment_exact: {:?}", self.exact)?;
        writeln!(f, "tail_error: {:e}", self.tail_error)?;
        writeln!(f, "truncation_buyers: {}", self.truncation.0)?;
        writeln!(f, "truncation_sellers: {}", self.truncation.1)?;
        writeln!(f, "sufficient_rate: {:?}", self.sufficient_rate)?;
        writeln!(f, "meets_sufficient: {}", self.meets_sufficient())?;
        match &self.necessary {
            Some(n) => {
                writeln!(f, "necessary_rate: {:?}", n.min_rate)?;
                writeln!(f, "balance_window: [{:?}, {:?}]", n.balance_window.0, n.balance_window.1)?;
            }
            None => writeln!(f, "necessary_rate: n/a (eta above 1/6)")?,
        }
        write!(f, "edf_weight_bound: {:?}", self.edf_weight_bound)?;
        if let Some(sim) = &self.simulation {
            write!(
                f,
                "\nsimulated_abandonment: {:?}\nsimulated_stderr: {:?}\nreplications: {}\nhorizon: {:?}\narrived: {}\nabandoned: {}",
                sim.mean,
                sim.stderr,
                sim.fractions.len(),
                sim.horizon,
                sim.arrived,
                sim.abandoned
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_rates_match_closed_form() {
        let p = QueueParams::balanced(1.0, 1.0, 0.1).unwrap();
        let q = abandonment_probability(&p, DEFAULT_TAIL_TOL).unwrap();
        let closed = 1.0 / (2.0 * std::f64::consts::E - 3.0);
        assert!((q - closed).abs() < 1e-12);
        assert!((q0_series(1.0, 1.0, 1.0, DEFAULT_TAIL_TOL).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn stationary_is_consistent() {
        for p in [
            QueueParams::new(3.0, 2.0, 0.5, 1.5, 0.1).unwrap(),
            QueueParams::new(150.0, 120.0, 1.0, 1.0, 0.1).unwrap(),
            QueueParams::balanced(40.0, 2.0, 0.1).unwrap(),
        ] {
            let st = stationary(&p, DEFAULT_TAIL_TOL).unwrap();
            assert!((st.total_mass() - 1.0).abs() < 1e-12);
            assert!(st.detailed_balance_residual() < 1e-10);
        }
    }

    #[test]
    fn balanced_abandonment_is_q0_and_decreasing() {
        let mut prev = 1.0;
        for lambda in [0.5, 1.0, 2.0, 5.0, 20.0, 150.0, 1000.0] {
            let p = QueueParams::new(lambda, lambda, 1.0, 2.0, 0.1).unwrap();
            let st = stationary(&p, DEFAULT_TAIL_TOL).unwrap();
            assert!((st.abandonment_probability() - st.q0).abs() < 1e-12);
            assert!(st.q0 < prev);
            prev = st.q0;
        }
        let p = QueueParams::balanced(150.0, 1.0, 0.1).unwrap();
        assert!(abandonment_probability(&p, DEFAULT_TAIL_TOL).unwrap() <= 0.1);
    }

    #[test]
    fn bounds() {
        assert!((flow_lower_bound(1.0, 1.0, 0.1).unwrap() - 150.0).abs() < 1e-9);
        assert!((flow_lower_bound(2.0, 1.0, 0.1).unwrap() - 150.0).abs() < 1e-9);
        assert!((flow_lower_bound(1.0, 1.0, 1.0 / 6.0).unwrap() - 54.0).abs() < 1e-9);
        let n = necessary_bound(1.0, 1.0, 0.1).unwrap();
        assert!((n.min_rate - 1.0 / 140.0).abs() < 1e-15);
        assert_eq!(n.balance_window, (0.9, 1.1));
        assert!(necessary_bound(1.0, 1.0, 0.2).is_err());
        assert!(flow_lower_bound(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn sandwich() {
        let s = sandwich_check(1.0).unwrap();
        assert!(s.holds() && (s.exact - 1.0 / (2.0 * std::f64::consts::E - 3.0)).abs() < 1e-12 && s.upper == 1.0);
        let s = sandwich_check(0.01).unwrap();
        assert!(s.holds());
        assert!((s.lower - 0.0142857).abs() < 1e-6 && (s.upper - 0.1224745).abs() < 1e-6);
        assert!(sandwich_check(0.0).is_err());
    }

    #[test]
    fn edf() {
        let b = edf_abandonment_bound(100.0, 1.0, 1.0).unwrap();
        assert!((b.combined - 2.0 / 202.0).abs() < 1e-15);
        assert!((b.combined - b.buyers).abs() < 1e-15 && b.buyers == b.sellers);
        assert!(edf_abandonment_bound(1e-9, 1e-9, 1e-9).unwrap().combined > 0.999);
        assert_eq!(edf_weight_lower_bound(0.1).unwrap(), 20.0);
        assert!((edf_weight_lower_bound(0.01).unwrap() - 200.0).abs() < 1e-9);
    }

    #[test]
    fn simulation_is_reproducible_and_close() {
        let p = QueueParams::balanced(1.0, 1.0, 0.1).unwrap();
        let a = simulate_fifo(&p, 2000.0, 4, 11).unwrap();
        let b = simulate_fifo(&p, 2000.0, 4, 11).unwrap();
        assert_eq!(a, b);
        let exact = 1.0 / (2.0 * std::f64::consts::E - 3.0);
        assert!((a.mean - exact).abs() < 0.03, "{} vs {exact}", a.mean);
    }
}
