//! Feedback liquidation speed extracted from a solved field, and Euler-Maruyama
//! simulation of the controlled position/revenue dynamics
//!
//! ```text
//! dX = -ξ dt,    dR = X σ dB + b X dt - f(ξ) dt
//! ```
//!
//! with the finite-fuel constraint `X_T = 0` enforced by a deterministic ramp
//! over the last `fuel_window` of the horizon.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ConvexCost, CostError};
use crate::model::MarketModel;
use crate::solver::{SolverError, ValueField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy evaluated outside the grid at tau={tau}, x={x}, r={r}")]
    Extrapolation { tau: f64, x: f64, r: f64 },
    #[error("w_r = {s:e} <= 0 at slice {k}, node ({i},{j})")]
    Degenerate { k: usize, i: usize, j: usize, s: f64 },
    #[error("invalid simulation input: {0}")]
    Input(String),
    #[error("market must have one asset for simulation, got {0}")]
    Dimension(usize),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Liquidation speed as a function of elapsed time `t`, position and revenue.
pub trait TradingRule: Sync {
    fn speed(&self, t: f64, x: f64, r: f64) -> Result<f64, PolicyError>;
}

/// `ξ̂(τ, x, r) = ∇f*(-w_x / w_r)` read off a [`ValueField`]. The ratio
/// `-w_x / w_r` is formed from centred differences at every node of every stored
/// slice, interpolated bilinearly in `(x, r)` and linearly in remaining time.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy<'a> {
    field: &'a ValueField,
    cost: &'a ConvexCost,
    horizon: f64,
    ratios: Vec<f64>,
}

/// Builds the feedback policy; every node must have `w_r > 0`.
pub fn extract_policy<'a>(field: &'a ValueField, cost: &'a ConvexCost) -> Result<FeedbackPolicy<'a>, PolicyError> {
    let g = &field.grid;
    let n = g.nodes();
    let mut ratios = vec![0.0; field.n_slices() * n];
    ratios
        .par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(k, out)| {
            for i in 0..g.n_x {
                for j in 0..g.n_r {
                    let (p, s) = field.node_gradient(k, i, j);
                    if !(s > 0.0) {
                        return Err(PolicyError::Degenerate { k, i, j, s });
                    }
                    out[i * g.n_r + j] = -p / s;
                }
            }
            Ok(())
        })?;
    Ok(FeedbackPolicy {
        field,
        cost,
        horizon: g.horizon,
        ratios,
    })
}

impl<'a> FeedbackPolicy<'a> {
    pub fn field(&self) -> &ValueField {
        self.field
    }

    /// Stored ratio `-w_x / w_r` at node `(i, j)` of slice `k`.
    pub fn node_ratio(&self, k: usize, i: usize, j: usize) -> f64 {
        let g = &self.field.grid;
        self.ratios[k * g.nodes() + i * g.n_r + j]
    }

    fn slice_ratio(&self, k: usize, x: f64, r: f64) -> f64 {
        let g = &self.field.grid;
        let fx = ((x - g.x_min) / g.dx()).min((g.n_x - 1) as f64);
        let fr = ((r - g.r_min) / g.dr()).min((g.n_r - 1) as f64);
        let i = (fx.floor() as usize).min(g.n_x - 2);
        let j = (fr.floor() as usize).min(g.n_r - 2);
        let (wx, wr) = (fx - i as f64, fr - j as f64);
        let a = self.node_ratio(k, i, j);
        let b = self.node_ratio(k, i + 1, j);
        let c = self.node_ratio(k, i, j + 1);
        let d = self.node_ratio(k, i + 1, j + 1);
        (1.0 - wx) * ((1.0 - wr) * a + wr * c) + wx * ((1.0 - wr) * b + wr * d)
    }

    /// Interpolated `-w_x / w_r` at remaining time `tau`.
    pub fn ratio(&self, tau: f64, x: f64, r: f64) -> Result<f64, PolicyError> {
        if !self.field.grid.contains(x, r) {
            return Err(PolicyError::Extrapolation { tau, x, r });
        }
        let (k, tw) = self
            .field
            .time_bracket(tau)
            .map_err(|_| PolicyError::Extrapolation { tau, x, r })?;
        let v0 = self.slice_ratio(k, x, r);
        if tw == 0.0 {
            return Ok(v0);
        }
        Ok((1.0 - tw) * v0 + tw * self.slice_ratio(k + 1, x, r))
    }

    /// Feedback speed at remaining time `tau`.
    pub fn speed_at(&self, tau: f64, x: f64, r: f64) -> Result<f64, PolicyError> {
        Ok(self.cost.grad_conjugate(self.ratio(tau, x, r)?))
    }
}

impl TradingRule for FeedbackPolicy<'_> {
    fn speed(&self, t: f64, x: f64, r: f64) -> Result<f64, PolicyError> {
        self.speed_at(self.horizon - t, x, r)
    }
}

/// Constant speed `x₀ / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraightLine {
    pub x0: f64,
    pub horizon: f64,
}

impl TradingRule for StraightLine {
    fn speed(&self, _t: f64, _x: f64, _r: f64) -> Result<f64, PolicyError> {
        Ok(self.x0 / self.horizon)
    }
}

/// Never trades; combined with a one-step fuel window it dumps the position at the end.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Hold;

impl TradingRule for Hold {
    fn speed(&self, _t: f64, _x: f64, _r: f64) -> Result<f64, PolicyError> {
        Ok(0.0)
    }
}

/// Optimal feedback for CARA utility with quadratic cost and no drift,
/// `ξ = κ coth(κ τ) x` with `κ = √(AΣ/(2η))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqFeedback {
    pub kappa: f64,
    pub horizon: f64,
}

impl TradingRule for LqFeedback {
    fn speed(&self, t: f64, x: f64, _r: f64) -> Result<f64, PolicyError> {
        let tau = self.horizon - t;
        if self.kappa == 0.0 {
            return Ok(x / tau);
        }
        Ok(self.kappa * x / (self.kappa * tau).tanh())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    /// Speed applied on `[t_k, t_{k+1})`; one entry per step.
    pub xi: Vec<f64>,
    pub seed: u64,
    /// First step index driven by the terminal ramp.
    pub terminal_liquidation_start: usize,
    /// Step at which the state left the grid; the ramp takes over from there.
    pub truncated_at: Option<usize>,
}

impl PathRecord {
    pub fn is_truncated(&self) -> bool {
        self.truncated_at.is_some()
    }

    pub fn n_steps(&self) -> usize {
        self.xi.len()
    }
}

/// Terminal revenue `R_T`.
pub fn revenue(path: &PathRecord) -> f64 {
    *path.r.last().expect("path has at least one point")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub horizon: f64,
    pub n_steps: usize,
    /// Length of the terminal window driven by the ramp `ξ = X / (T - t)`.
    pub fuel_window: f64,
}

impl SimSettings {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.n_steps < 2 {
            return Err(PolicyError::Input(format!("n_steps must be >= 2, got {}", self.n_steps)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(PolicyError::Input(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if !(self.fuel_window >= 0.0 && self.fuel_window < self.horizon) {
            return Err(PolicyError::Input(format!(
                "fuel window must lie in [0, T), got {}",
                self.fuel_window
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// First step whose start time lies in the terminal window (always ≤ n_steps - 1).
    pub fn ramp_start(&self) -> usize {
        let dt = self.dt();
        let start = self.horizon - self.fuel_window;
        let k = ((start / dt) - 1e-9).ceil().max(0.0) as usize;
        k.min(self.n_steps - 1)
    }

    /// Step index of time `t` on the simulation grid, if it is a grid time.
    pub fn step_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt()).round();
        ((k * self.dt() - t).abs() <= 1e-9 * self.horizon && k >= 0.0).then_some(k as usize)
    }
}

/// Gaussian increments `ΔB_k ~ N(0, Δt)` of the path with this seed.
pub fn brownian_increments(seed: u64, n_steps: usize, dt: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = dt.sqrt();
    (0..n_steps)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect()
}

/// Simulates one path to `T` (`X_T = 0` exactly).
pub fn simulate_path(
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    x0: f64,
    r0: f64,
    settings: &SimSettings,
    seed: u64,
) -> Result<PathRecord, PolicyError> {
    run_path(rule, market, cost, x0, r0, settings, seed, settings.n_steps)
}

/// Simulates one path up to step `k_stop` (no terminal ramp is reached when
/// `k_stop ≤ ramp_start`).
pub fn simulate_prefix(
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    x0: f64,
    r0: f64,
    settings: &SimSettings,
    seed: u64,
    k_stop: usize,
) -> Result<PathRecord, PolicyError> {
    if k_stop > settings.n_steps {
        return Err(PolicyError::Input(format!(
            "stop index {k_stop} beyond n_steps = {}",
            settings.n_steps
        )));
    }
    run_path(rule, market, cost, x0, r0, settings, seed, k_stop)
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    x0: f64,
    r0: f64,
    settings: &SimSettings,
    seed: u64,
    k_stop: usize,
) -> Result<PathRecord, PolicyError> {
    settings.validate()?;
    let (b, cov) = market.scalar_params().ok_or(PolicyError::Dimension(market.dim()))?;
    let sigma = cov.sqrt();
    let n = settings.n_steps;
    let dt = settings.dt();
    let ramp = settings.ramp_start();
    let increments = brownian_increments(seed, n, dt);
    let mut path = PathRecord {
        times: (0..=k_stop).map(|k| k as f64 * dt).collect(),
        x: Vec::with_capacity(k_stop + 1),
        r: Vec::with_capacity(k_stop + 1),
        xi: Vec::with_capacity(k_stop),
        seed,
        terminal_liquidation_start: ramp,
        truncated_at: None,
    };
    let (mut x, mut r) = (x0, r0);
    path.x.push(x);
    path.r.push(r);
    for (k, db) in increments.iter().enumerate().take(k_stop) {
        let t = k as f64 * dt;
        let xi = if k >= ramp || path.truncated_at.is_some() {
            x / ((n - k) as f64 * dt)
        } else {
            match rule.speed(t, x, r) {
                Ok(v) => v,
                Err(PolicyError::Extrapolation { .. }) => {
                    path.truncated_at = Some(k);
                    x / ((n - k) as f64 * dt)
                }
                Err(e) => return Err(e),
            }
        };
        r += x * sigma * db + b * x * dt - cost.eval(xi)? * dt;
        x = if k + 1 == n { 0.0 } else { x - xi * dt };
        path.xi.push(xi);
        path.x.push(x);
        path.r.push(r);
    }
    Ok(path)
}

/// Paths with seeds `seed0, seed0 + 1, ...`, simulated in parallel.
pub fn simulate_batch(
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    x0: f64,
    r0: f64,
    settings: &SimSettings,
    seed0: u64,
    n_paths: usize,
) -> Result<Vec<PathRecord>, PolicyError> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|k| simulate_path(rule, market, cost, x0, r0, settings, seed0.wrapping_add(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn settings(n_steps: usize) -> SimSettings {
        SimSettings {
            horizon: 1.0,
            n_steps,
            fuel_window: 0.05,
        }
    }

    #[test]
    fn zero_position_without_noise_stays_put() {
        let m = MarketModel::scalar(0.0, 0.0).unwrap();
        let c = ConvexCost::quadratic(1.0).unwrap();
        let p = simulate_path(&Hold, &m, &c, 0.0, 0.7, &settings(50), 3).unwrap();
        assert!(p.x.iter().all(|&x| x == 0.0));
        assert!(p.r.iter().all(|&r| r == 0.7));
        assert_eq!(revenue(&p), 0.7);
    }

    #[test]
    fn straight_line_revenue_without_noise() {
        let m = MarketModel::scalar(0.0, 0.0).unwrap();
        let c = ConvexCost::power(2.5, 0.3).unwrap();
        let s = settings(200);
        let p = simulate_path(&StraightLine { x0: 1.5, horizon: 1.0 }, &m, &c, 1.5, 0.2, &s, 9).unwrap();
        let expected = 0.2 - c.eval(1.5).unwrap();
        assert_abs_diff_eq!(revenue(&p), expected, epsilon = 1e-12);
        assert_eq!(*p.x.last().unwrap(), 0.0);
    }

    #[test]
    fn path_invariants() {
        let m = MarketModel::scalar(0.4, 0.1).unwrap();
        let c = ConvexCost::quadratic(0.5).unwrap();
        let s = settings(100);
        let rule = LqFeedback { kappa: 0.6, horizon: 1.0 };
        let p = simulate_path(&rule, &m, &c, 1.0, 0.0, &s, 42).unwrap();
        assert_eq!(p.x[0], 1.0);
        assert_eq!(p.r[0], 0.0);
        assert_eq!(*p.x.last().unwrap(), 0.0);
        assert_eq!(p.times.len(), 101);
        let dt = s.dt();
        for k in 0..p.n_steps() {
            assert_abs_diff_eq!(p.x[k + 1], p.x[k] - p.xi[k] * dt, epsilon = 1e-14);
        }
        // the ramp is a straight line to zero
        let k0 = p.terminal_liquidation_start;
        assert_eq!(k0, 95);
        for k in k0..100 {
            assert_abs_diff_eq!(p.xi[k], p.xi[k0], epsilon = 1e-12);
        }
        // independent recomputation of R_T
        let db = brownian_increments(42, 100, dt);
        let mut r = 0.0;
        for k in 0..100 {
            r += p.x[k] * 0.4 * db[k] + 0.1 * p.x[k] * dt - 0.5 * p.xi[k] * p.xi[k] * dt;
        }
        assert_abs_diff_eq!(r, revenue(&p), epsilon = 1e-12);
    }

    #[test]
    fn reproducible_per_seed() {
        let m = MarketModel::scalar(0.5, 0.0).unwrap();
        let c = ConvexCost::quadratic(1.0).unwrap();
        let rule = LqFeedback { kappa: 0.35, horizon: 1.0 };
        let a = simulate_batch(&rule, &m, &c, 1.0, 0.0, &settings(64), 11, 8).unwrap();
        let b = simulate_batch(&rule, &m, &c, 1.0, 0.0, &settings(64), 11, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].r, a[1].r);
        assert_eq!(a[3].seed, 14);
    }

    #[test]
    fn deterministic_path_converges_under_step_refinement() {
        // σ = 0: Euler on ẋ = -κ coth(κ(T-t)) x; Richardson against the exact
        // ODE solution x₀ sinh(κ(T-t))/sinh(κT) before the ramp
        let m = MarketModel::scalar(0.0, 0.0).unwrap();
        let c = ConvexCost::quadratic(1.0).unwrap();
        let kappa = 0.8;
        let rule = LqFeedback { kappa, horizon: 1.0 };
        let exact = |t: f64| (kappa * (1.0 - t)).sinh() / kappa.sinh();
        let run = |n: usize| {
            simulate_path(&rule, &m, &c, 1.0, 0.0, &SimSettings { fuel_window: 0.25, ..settings(n) }, 1).unwrap()
        };
        let (coarse, fine) = (run(4000), run(8000));
        for k in (0..=3000).step_by(250) {
            let t = k as f64 / 4000.0;
            let rich = 2.0 * fine.x[2 * k] - coarse.x[k];
            assert!((rich - exact(t)).abs() <= 1e-6, "t={t}: {rich} vs {}", exact(t));
        }
    }

    #[test]
    fn ramp_start_and_validation() {
        assert_eq!(settings(100).ramp_start(), 95);
        let s = SimSettings {
            fuel_window: 0.01,
            ..settings(100)
        };
        assert_eq!(s.ramp_start(), 99);
        let s = SimSettings {
            fuel_window: 0.0,
            ..settings(100)
        };
        assert_eq!(s.ramp_start(), 99);
        assert!(settings(1).validate().is_err());
        assert!(SimSettings {
            fuel_window: 1.0,
            ..settings(10)
        }
        .validate()
        .is_err());
        assert_eq!(settings(100).step_of(0.25), Some(25));
        assert_eq!(settings(100).step_of(0.255), None);
    }
}
