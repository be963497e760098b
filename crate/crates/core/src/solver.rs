//! Explicit monotone finite-difference solver for the liquidation HJB equation.
//!
//! In remaining time `τ` the value function `w(τ, x, r)` satisfies
//!
//! ```text
//! w_τ = β w + (xᵀΣx/2) w_rr + (b·x) w_r + sup_ξ ( -ξ w_x - f(ξ) w_r )
//!     = β w + (xᵀΣx/2) w_rr + (b·x) w_r + w_r f*(-w_x / w_r)
//! ```
//!
//! with `ξ = -dX/dt` the liquidation speed. At `τ = 0` the data is `u(r)` on
//! `x = 0` and `-∞` elsewhere; the march starts at `τ = δ` from the value of
//! straight-line liquidation over `[0, δ]`, which is an admissible strategy
//! and converges to the singular data as `δ → 0`.
//!
//! Two monotone numerical Hamiltonians are available:
//!
//! * [`Scheme::Upwind`] splits the sup over selling (`ξ ≥ 0`) and buying
//!   (`ξ ≤ 0`) and differences each branch against its characteristic
//!   direction. Its numerical diffusion scales with the local speed.
//! * [`Scheme::LaxFriedrichs`] evaluates the Hamiltonian on centred
//!   differences and adds global dissipation `α_x`, `α_r`.
//!
//! Both are monotone under
//! `Δt (max xᵀΣx/Δr² + α_x/Δx + α_r/Δr) ≤ cfl` as long as `α_x` bounds the
//! speeds and `α_r` bounds `f(ξ) + |b·x|` seen during the march; the solver
//! checks this after every step. One step is
//! `w ← (1 + βΔt)(w + Δt H_num(w))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ConvexCost, CostError};
use crate::model::{MarketModel, Utility};
use crate::oracle::{bracket, CaraEnvelope, OracleError};

/// Gauss-Hermite nodes for the initial slice.
const HERMITE_NODES: usize = 32;
/// Margin applied to speed bounds estimated from the initial slice.
const SPEED_MARGIN: f64 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("CFL violated: {0}")]
    Cfl(String),
    #[error("w_r <= 0 at tau={tau:.6}, x={x:.6}, r={r:.6} (node {i},{j})")]
    PositivityLoss { tau: f64, x: f64, r: f64, i: usize, j: usize },
    #[error("degenerate jet: w_r = {s:e} <= 0")]
    DegenerateJet { s: f64 },
    #[error("point (tau={tau}, x={x}, r={r}) is outside the grid")]
    OutsideGrid { tau: f64, x: f64, r: f64 },
    #[error("market must have one asset for the PDE grid, got {0}")]
    Dimension(usize),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Uniform grid in position, revenue and remaining time on `[δ, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub n_r: usize,
    /// Regularization horizon δ.
    pub t_init: f64,
    /// Final horizon T.
    pub horizon: f64,
    /// Time steps from δ to T; 0 picks the smallest count meeting the CFL bound.
    pub n_t: usize,
}

impl Grid {
    pub fn validate(&self) -> Result<(), SolverError> {
        let finite = [self.x_min, self.x_max, self.r_min, self.r_max, self.t_init, self.horizon]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(SolverError::Grid("non-finite bound".into()));
        }
        if self.n_x < 3 || self.n_r < 3 {
            return Err(SolverError::Grid(format!(
                "n_x and n_r must be >= 3 (got {} and {})",
                self.n_x, self.n_r
            )));
        }
        if !(self.x_min < self.x_max) || !(self.x_min <= 0.0 && 0.0 <= self.x_max) {
            return Err(SolverError::Grid(format!(
                "need x_min < x_max with 0 in [x_min, x_max] (got [{}, {}])",
                self.x_min, self.x_max
            )));
        }
        if !(self.r_min < self.r_max) {
            return Err(SolverError::Grid("need r_min < r_max".into()));
        }
        if !(self.t_init > 0.0) {
            return Err(SolverError::Grid(format!("delta must be > 0 (got {})", self.t_init)));
        }
        if !(self.t_init <= self.horizon) {
            return Err(SolverError::Grid(format!(
                "delta must be < T (got delta={}, T={})",
                self.t_init, self.horizon
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / (self.n_r - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + self.dx() * i as f64
    }

    pub fn r(&self, j: usize) -> f64 {
        self.r_min + self.dr() * j as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_x).map(|i| self.x(i)).collect()
    }

    pub fn rs(&self) -> Vec<f64> {
        (0..self.n_r).map(|j| self.r(j)).collect()
    }

    pub fn nodes(&self) -> usize {
        self.n_x * self.n_r
    }

    pub fn contains(&self, x: f64, r: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.r_min..=self.r_max).contains(&r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Upwind,
    LaxFriedrichs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid: Grid,
    pub cfl: f64,
    /// Damping coefficient β ≤ 0 of the transformed equation.
    pub beta: f64,
    pub scheme: Scheme,
    /// Speed bound in x; estimated from the initial slice when `None`.
    pub lf_alpha_x: Option<f64>,
    /// Bound on `f(ξ) + |b·x|`; estimated from the initial slice when `None`.
    pub lf_alpha_r: Option<f64>,
    /// Floor standing in for `-∞`; 10× the most negative `V₂` at `δ` when `None`.
    pub floor_m: Option<f64>,
    /// Largest |ξ| scanned by brute-force Hamiltonian checks.
    pub xi_cap: f64,
    /// Stored slices: this many uniform in τ plus this many geometric in τ.
    pub n_slices: usize,
    /// Clamp boundary nodes into `[V₂, V₁]` after each step.
    pub clamp_boundary: bool,
}

impl SolverConfig {
    pub fn new(grid: Grid) -> Self {
        Self {
            grid,
            cfl: 0.9,
            beta: 0.0,
            scheme: Scheme::Upwind,
            lf_alpha_x: None,
            lf_alpha_r: None,
            floor_m: None,
            xi_cap: 100.0,
            n_slices: 64,
            clamp_boundary: true,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        self.grid.validate()?;
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(SolverError::Config(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.beta <= 0.0 && self.beta.is_finite()) {
            return Err(SolverError::Config(format!("beta must be <= 0, got {}", self.beta)));
        }
        if !(self.xi_cap > 0.0) {
            return Err(SolverError::Config("xi_cap must be > 0".into()));
        }
        for (name, a) in [("lf_alpha_x", self.lf_alpha_x), ("lf_alpha_r", self.lf_alpha_r)] {
            if let Some(a) = a {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(SolverError::Config(format!("{name} must be > 0, got {a}")));
                }
            }
        }
        if self.n_slices < 1 {
            return Err(SolverError::Config("n_slices must be >= 1".into()));
        }
        Ok(())
    }
}

/// First- and second-order jet of `w` at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    /// `w_x`
    pub p: f64,
    /// `w_r`
    pub s: f64,
    /// `w_rr`
    pub m: f64,
}

/// `sup_ξ(-ξ p - s f(ξ)) + (xᵀΣx/2) m + (b·x) s`, evaluated through the conjugate
/// as `s f*(-p/s) + ...`.
pub fn hamiltonian(x: f64, jet: Jet, market: &MarketModel, cost: &ConvexCost) -> Result<f64, SolverError> {
    let (b, cov) = market.scalar_params().ok_or(SolverError::Dimension(market.dim()))?;
    if !(jet.s > 0.0) {
        return Err(SolverError::DegenerateJet { s: jet.s });
    }
    Ok(jet.s * cost.conjugate(-jet.p / jet.s) + 0.5 * x * x * cov * jet.m + b * x * jet.s)
}

/// Liquidation speed attaining the sup in [`hamiltonian`], `∇f*(-p/s)`.
pub fn optimal_speed(jet: Jet, cost: &ConvexCost) -> Result<f64, SolverError> {
    if !(jet.s > 0.0) {
        return Err(SolverError::DegenerateJet { s: jet.s });
    }
    Ok(cost.grad_conjugate(-jet.p / jet.s))
}

/// Gauss-Hermite nodes and weights for `∫ g(t) e^{-t²} dt` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = off;
        jac[(k - 1, k)] = off;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Expected utility of straight-line liquidation of `x` over `[0, δ]`, scaled by `e^{βδ}`.
pub fn initial_condition(
    grid: &Grid,
    beta: f64,
    floor_m: f64,
    market: &MarketModel,
    utility: &Utility,
    cost: &ConvexCost,
) -> Result<Vec<f64>, SolverError> {
    grid.validate()?;
    let (b, cov) = market.scalar_params().ok_or(SolverError::Dimension(market.dim()))?;
    let delta = grid.t_init;
    let (nodes, weights) = gauss_hermite(HERMITE_NODES);
    let norm = std::f64::consts::PI.sqrt();
    let scale = (beta * delta).exp();
    let mut out = vec![0.0; grid.nodes()];
    for i in 0..grid.n_x {
        let x = grid.x(i);
        let speed_cost = delta * cost.eval(x / delta)?;
        // revenue ~ N(r - δ f(x/δ) + b x δ/2, Σ x² δ/3)
        let shift = b * x * delta / 2.0 - speed_cost;
        let sd = (cov * x * x * delta / 3.0).sqrt();
        for j in 0..grid.n_r {
            let mean = grid.r(j) + shift;
            let eu = if sd == 0.0 {
                utility.eval(mean)
            } else {
                nodes
                    .iter()
                    .zip(&weights)
                    .map(|(t, w)| w * utility.eval(mean + std::f64::consts::SQRT_2 * sd * t))
                    .sum::<f64>()
                    / norm
            };
            out[i * grid.n_r + j] = (scale * eu).max(floor_m);
        }
    }
    Ok(out)
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Largest |ξ| used by the numerical Hamiltonian.
    pub max_speed: f64,
    /// Largest `f(ξ) + |b·x|`.
    pub max_r_speed: f64,
}

impl StepStats {
    fn merge(self, o: Self) -> Self {
        Self {
            max_speed: self.max_speed.max(o.max_speed),
            max_r_speed: self.max_r_speed.max(o.max_r_speed),
        }
    }
}

/// One explicit time step with fixed `Δt`, speed bounds and boundary envelope.
pub struct Stepper<'a> {
    grid: Grid,
    dt: f64,
    beta: f64,
    scheme: Scheme,
    alpha_x: f64,
    alpha_r: f64,
    cost: &'a ConvexCost,
    envelope: Option<&'a CaraEnvelope>,
    u_sup: f64,
    xs: Vec<f64>,
    diffusion: Vec<f64>,
    drift: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        config: &SolverConfig,
        dt: f64,
        alpha_x: f64,
        alpha_r: f64,
        market: &MarketModel,
        utility: &Utility,
        cost: &'a ConvexCost,
        envelope: Option<&'a CaraEnvelope>,
    ) -> Result<Self, SolverError> {
        config.validate()?;
        let (b, cov) = market.scalar_params().ok_or(SolverError::Dimension(market.dim()))?;
        let grid = config.grid;
        let xs = grid.xs();
        let diffusion: Vec<f64> = xs.iter().map(|x| 0.5 * x * x * cov).collect();
        let drift = xs.iter().map(|x| b * x).collect();
        let load = cfl_load(&grid, cov, alpha_x, alpha_r);
        if dt * load > config.cfl * (1.0 + 1e-12) {
            return Err(SolverError::Cfl(format!(
                "dt={dt:e} gives dt*(max xΣx/dr² + alpha_x/dx + alpha_r/dr) = {:.4} > cfl = {}",
                dt * load,
                config.cfl
            )));
        }
        Ok(Self {
            grid,
            dt,
            beta: config.beta,
            scheme: config.scheme,
            alpha_x,
            alpha_r,
            cost,
            envelope,
            u_sup: utility.supremum(),
            xs,
            diffusion,
            drift,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `w` from remaining time `tau` to `tau + Δt`.
    pub fn step(&self, w: &[f64], tau: f64) -> Result<(Vec<f64>, StepStats), SolverError> {
        let (nx, nr) = (self.grid.n_x, self.grid.n_r);
        let mut out = vec![0.0; w.len()];
        let stats = out
            .par_chunks_mut(nr)
            .enumerate()
            .map(|(i, row)| self.update_row(w, i, tau, row))
            .try_reduce(StepStats::default, |a, b| Ok(a.merge(b)))?;
        if stats.max_speed > self.alpha_x * (1.0 + 1e-9) || stats.max_r_speed > self.alpha_r * (1.0 + 1e-9) {
            return Err(SolverError::Cfl(format!(
                "at tau={tau:.5} speeds (|ξ|={:.4}, f+|bx|={:.4}) exceed bounds (alpha_x={:.4}, alpha_r={:.4})",
                stats.max_speed, stats.max_r_speed, self.alpha_x, self.alpha_r
            )));
        }
        let tau_next = tau + self.dt;
        let shift = self.u_sup * (self.beta * tau_next).exp();
        for i in 0..nx {
            extrapolate_row(&mut out[i * nr..(i + 1) * nr], shift);
        }
        if let Some(env) = self.envelope {
            self.clamp_boundary(&mut out, tau_next, env);
        }
        check_positivity(&self.grid, &out, tau_next)?;
        Ok((out, stats))
    }

    fn update_row(&self, w: &[f64], i: usize, tau: f64, row: &mut [f64]) -> Result<StepStats, SolverError> {
        let (nx, nr) = (self.grid.n_x, self.grid.n_r);
        let (dx, dr) = (self.grid.dx(), self.grid.dr());
        let shift = self.u_sup * (self.beta * tau).exp();
        let cur = &w[i * nr..(i + 1) * nr];
        let left = (i > 0).then(|| &w[(i - 1) * nr..i * nr]);
        let right = (i + 1 < nx).then(|| &w[(i + 1) * nr..(i + 2) * nr]);
        let (q, bx) = (self.diffusion[i], self.drift[i]);
        let growth = 1.0 + self.beta * self.dt;
        let fit = self.scheme == Scheme::Upwind;
        let mut stats = StepStats::default();
        for j in 1..nr - 1 {
            let c = cur[j];
            let v = c - shift;
            let back = |prev: f64| one_sided(prev - shift, v, fit, true);
            let fwd = |next: f64| one_sided(v, next - shift, fit, false);
            let p_minus = left.map(|l| back(l[j]));
            let p_plus = right.map(|r| fwd(r[j]));
            let (pm, pp) = match (p_minus, p_plus) {
                (Some(a), Some(b)) => (a, b),
                (None, Some(b)) => (b, b),
                (Some(a), None) => (a, a),
                (None, None) => unreachable!("grid has at least 3 x nodes"),
            };
            let (pm, pp) = ((pm.0 / dx, pm.1), (pp.0 / dx, pp.1));
            let sm = back(cur[j - 1]);
            let sp = fwd(cur[j + 1]);
            let (s_minus, s_plus) = (sm.0 / dr, sp.0 / dr);
            let m = (cur[j + 1] - 2.0 * c + cur[j - 1]) / (dr * dr);
            let (h, x_speed, r_speed) = match self.scheme {
                Scheme::Upwind => {
                    if !(s_minus > 0.0) {
                        return Err(SolverError::DegenerateJet { s: s_minus });
                    }
                    let (ctrl, speed) = self.upwind_control(pm.0, pp.0, s_minus);
                    let x_gain = if speed > 0.0 { pm.1 } else { pp.1 };
                    let (drift, d_gain) = if bx > 0.0 { (bx * s_plus, sp.1) } else { (bx * s_minus, sm.1) };
                    let r_speed = self.cost.eval(speed)? * sm.1 + bx.abs() * d_gain;
                    (ctrl + drift + q * m, speed.abs() * x_gain, r_speed)
                }
                Scheme::LaxFriedrichs => {
                    let (p, s) = (0.5 * (pm.0 + pp.0), 0.5 * (s_minus + s_plus));
                    if !(s > 0.0) {
                        return Err(SolverError::DegenerateJet { s });
                    }
                    let z = -p / s;
                    let ctrl = s * self.cost.conjugate(z);
                    let speed = self.cost.grad_conjugate(z);
                    let dissipation = 0.5 * self.alpha_x * (pp.0 - pm.0) + 0.5 * self.alpha_r * (s_plus - s_minus);
                    let r_speed = self.cost.eval(speed)? + bx.abs();
                    (ctrl + bx * s + q * m + dissipation, speed.abs(), r_speed)
                }
            };
            stats.max_speed = stats.max_speed.max(x_speed);
            stats.max_r_speed = stats.max_r_speed.max(r_speed);
            row[j] = growth * (c + self.dt * h);
        }
        Ok(stats)
    }

    /// Upwind sup over selling (backward x-difference) and buying (forward).
    fn upwind_control(&self, p_minus: f64, p_plus: f64, s: f64) -> (f64, f64) {
        let sell_z = -p_minus / s;
        let sell_v = self.cost.grad_conjugate(sell_z);
        let sell = if sell_v > 0.0 {
            (s * self.cost.conjugate(sell_z), sell_v)
        } else {
            (0.0, 0.0)
        };
        let buy_z = -p_plus / s;
        let buy_v = self.cost.grad_conjugate(buy_z);
        let buy = if buy_v < 0.0 {
            (s * self.cost.conjugate(buy_z), buy_v)
        } else {
            (0.0, 0.0)
        };
        if buy.0 > sell.0 {
            buy
        } else {
            sell
        }
    }

    fn clamp_boundary(&self, w: &mut [f64], tau: f64, env: &CaraEnvelope) {
        let (nx, nr) = (self.grid.n_x, self.grid.n_r);
        let rs = self.grid.rs();
        for i in 0..nx {
            let x = self.xs[i];
            let (c1, c2) = (env.min_cost(true, tau, x), env.min_cost(false, tau, x));
            let (a1, a2) = env.risk_aversions();
            let scale = (self.beta * tau).exp();
            let mut clamp = |j: usize| {
                let lo = scale * crate::model::lower_envelope(a2, rs[j] - c2);
                let hi = scale * crate::model::upper_envelope(a1, rs[j] - c1);
                let v = &mut w[i * nr + j];
                if lo <= hi {
                    *v = v.clamp(lo, hi);
                }
            };
            if i == 0 || i == nx - 1 {
                (0..nr).for_each(&mut clamp);
            } else {
                clamp(0);
                clamp(nr - 1);
            }
        }
    }
}

/// Closes a revenue line at both ends, extrapolating `w - shift` geometrically
/// when the neighbours share a sign (exact for exponential profiles) and
/// linearly otherwise.
fn extrapolate_row(row: &mut [f64], shift: f64) {
    let n = row.len();
    let extend = |near: f64, far: f64| {
        let (a, b) = (near - shift, far - shift);
        if a * b > 0.0 {
            shift + a * (a / b)
        } else {
            2.0 * near - far
        }
    };
    row[0] = extend(row[1], row[2]);
    row[n - 1] = extend(row[n - 2], row[n - 3]);
}

/// Undivided difference `b - a` taken at a node holding `at`, fitted to an
/// exponential when all three values are negative.
fn fitted_diff(a: f64, at: f64, b: f64) -> f64 {
    if a < 0.0 && at < 0.0 && b < 0.0 {
        at * (b / a).ln()
    } else {
        b - a
    }
}

/// Undivided one-sided difference between neighbouring values `a` (lower node)
/// and `b` (upper node), taken at the upper node when `at_upper`. With `fit`
/// and both values negative it is fitted to `-e^g` with linear `g`, giving
/// `b ln(b/a)` or `a ln(b/a)`. The second component bounds the derivative of
/// the difference with respect to the value at the evaluation node.
fn one_sided(a: f64, b: f64, fit: bool, at_upper: bool) -> (f64, f64) {
    if fit && a < 0.0 && b < 0.0 {
        let l = (b / a).ln();
        if at_upper {
            (b * l, (1.0 + l).abs())
        } else {
            (a * l, (l - 1.0).abs())
        }
    } else {
        (b - a, 1.0)
    }
}

fn check_positivity(grid: &Grid, w: &[f64], tau: f64) -> Result<(), SolverError> {
    let nr = grid.n_r;
    for i in 0..grid.n_x {
        for j in 0..nr - 1 {
            let (a, b) = (w[i * nr + j], w[i * nr + j + 1]);
            if !(b > a) {
                return Err(SolverError::PositivityLoss {
                    tau,
                    x: grid.x(i),
                    r: grid.r(j),
                    i,
                    j,
                });
            }
        }
    }
    Ok(())
}

fn cfl_load(grid: &Grid, cov: f64, alpha_x: f64, alpha_r: f64) -> f64 {
    let xmax = grid.x_min.abs().max(grid.x_max.abs());
    let dr = grid.dr();
    xmax * xmax * cov / (dr * dr) + alpha_x / grid.dx() + alpha_r / dr
}

/// Largest effective speeds the numerical Hamiltonian of `config` would use on
/// slice `w` at remaining time `tau`.
pub fn slice_speeds(
    config: &SolverConfig,
    w: &[f64],
    tau: f64,
    market: &MarketModel,
    utility: &Utility,
    cost: &ConvexCost,
) -> Result<StepStats, SolverError> {
    let probe = Stepper::new(config, 0.0, 1.0, 1.0, market, utility, cost, None)?;
    let nr = config.grid.n_r;
    let mut scratch = vec![0.0; nr];
    let mut stats = StepStats::default();
    for i in 0..config.grid.n_x {
        stats = stats.merge(probe.update_row(w, i, tau, &mut scratch)?);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    /// Time steps taken.
    pub n_t: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    /// Largest speed bounds used.
    pub alpha_x: f64,
    pub alpha_r: f64,
    pub floor_m: f64,
    /// Largest effective speeds met during the march.
    pub max_speed: f64,
    pub max_r_speed: f64,
    /// Steps repeated because the speeds outgrew their bounds.
    pub retries: usize,
}

/// Value function on stored time slices of a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub grid: Grid,
    pub beta: f64,
    /// `sup u`; fitted differences act on `w - e^{βτ} sup u`.
    pub u_sup: f64,
    /// Remaining times of the stored slices, increasing from δ to T.
    pub times: Vec<f64>,
    /// `times.len() × n_x × n_r`, slice-major then x-major.
    pub values: Vec<f64>,
    pub stats: SolveStats,
}

impl ValueField {
    pub fn n_slices(&self) -> usize {
        self.times.len()
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.slice(k)[i * self.grid.n_r + j]
    }

    /// Relative local time-stepping tolerance of the first-order march: the largest `Δt`.
    pub fn step_tolerance(&self) -> f64 {
        self.stats.dt_max
    }

    fn locate(&self, tau: f64, x: f64, r: f64) -> Result<(usize, f64, usize, f64, usize, f64), SolverError> {
        let g = &self.grid;
        let eps = 1e-12 * (1.0 + g.horizon);
        let first = self.times[0];
        let last = *self.times.last().expect("field has slices");
        if !(tau >= first - eps && tau <= last + eps) || !g.contains(x, r) {
            return Err(SolverError::OutsideGrid { tau, x, r });
        }
        let (k, tw) = if self.times.len() == 1 {
            (0, 0.0)
        } else {
            bracket(&self.times, tau.clamp(first, last))
        };
        let fx = ((x - g.x_min) / g.dx()).min((g.n_x - 1) as f64);
        let fr = ((r - g.r_min) / g.dr()).min((g.n_r - 1) as f64);
        let i = (fx.floor() as usize).min(g.n_x - 2);
        let j = (fr.floor() as usize).min(g.n_r - 2);
        Ok((k, tw, i, fx - i as f64, j, fr - j as f64))
    }

    fn bilinear(&self, k: usize, i: usize, wx: f64, j: usize, wr: f64) -> f64 {
        let a = self.at(k, i, j);
        let b = self.at(k, i + 1, j);
        let c = self.at(k, i, j + 1);
        let d = self.at(k, i + 1, j + 1);
        (1.0 - wx) * ((1.0 - wr) * a + wr * c) + wx * ((1.0 - wr) * b + wr * d)
    }

    /// Bilinear in `(x, r)`, linear in τ between stored slices.
    pub fn interpolate(&self, tau: f64, x: f64, r: f64) -> Result<f64, SolverError> {
        let (k, tw, i, wx, j, wr) = self.locate(tau, x, r)?;
        let v0 = self.bilinear(k, i, wx, j, wr);
        if tw == 0.0 {
            return Ok(v0);
        }
        Ok((1.0 - tw) * v0 + tw * self.bilinear(k + 1, i, wx, j, wr))
    }

    /// `(w_x, w_r)` at node `(i, j)` of slice `k` from centred differences,
    /// one-sided on the boundary, fitted like the march.
    pub fn node_gradient(&self, k: usize, i: usize, j: usize) -> (f64, f64) {
        let g = &self.grid;
        let shift = self.u_sup * (self.beta * self.times[k]).exp();
        let v = |a: usize, b: usize| self.at(k, a, b) - shift;
        let (i0, i1) = (i.saturating_sub(1), (i + 1).min(g.n_x - 1));
        let (j0, j1) = (j.saturating_sub(1), (j + 1).min(g.n_r - 1));
        let p = fitted_diff(v(i0, j), v(i, j), v(i1, j)) / (g.dx() * (i1 - i0) as f64);
        let s = fitted_diff(v(i, j0), v(i, j), v(i, j1)) / (g.dr() * (j1 - j0) as f64);
        (p, s)
    }

    /// Bilinearly interpolated centred-difference gradient on slice `k`.
    pub fn slice_gradient(&self, k: usize, x: f64, r: f64) -> Result<(f64, f64), SolverError> {
        let (_, _, i, wx, j, wr) = self.locate(self.times[k], x, r)?;
        let corner = |a: usize, b: usize| self.node_gradient(k, a, b);
        let (p00, s00) = corner(i, j);
        let (p10, s10) = corner(i + 1, j);
        let (p01, s01) = corner(i, j + 1);
        let (p11, s11) = corner(i + 1, j + 1);
        let lerp = |a: f64, b: f64, c: f64, d: f64| (1.0 - wx) * ((1.0 - wr) * a + wr * c) + wx * ((1.0 - wr) * b + wr * d);
        Ok((lerp(p00, p10, p01, p11), lerp(s00, s10, s01, s11)))
    }

    /// Stored slice index at or just below `tau` with its interpolation weight.
    pub fn time_bracket(&self, tau: f64) -> Result<(usize, f64), SolverError> {
        let first = self.times[0];
        let last = *self.times.last().expect("field has slices");
        let eps = 1e-12 * (1.0 + self.grid.horizon);
        if !(tau >= first - eps && tau <= last + eps) {
            return Err(SolverError::OutsideGrid {
                tau,
                x: f64::NAN,
                r: f64::NAN,
            });
        }
        if self.times.len() == 1 {
            return Ok((0, 0.0));
        }
        Ok(bracket(&self.times, tau.clamp(first, last)))
    }
}

/// Remaining times to store: uniform and geometric in τ, including both ends.
fn stored_times(grid: &Grid, n_slices: usize) -> Vec<f64> {
    let span = grid.horizon - grid.t_init;
    let ratio = grid.horizon / grid.t_init;
    let mut times: Vec<f64> = (0..=n_slices)
        .map(|k| grid.t_init + span * k as f64 / n_slices as f64)
        .chain((0..=n_slices).map(|k| grid.t_init * ratio.powf(k as f64 / n_slices as f64)))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * grid.horizon);
    times
}

/// Marches the HJB equation from `δ` to `T`.
///
/// With `grid.n_t == 0` and no user speed bounds, the step adapts: each step
/// takes the bounds as a margin over the speeds of the previous slice and the
/// largest `Δt` meeting the CFL bound without passing the next stored time,
/// and is repeated with larger bounds if the speeds of the current slice exceed
/// them. Otherwise `Δt` is uniform.
pub fn solve(
    config: &SolverConfig,
    market: &MarketModel,
    utility: &Utility,
    cost: &ConvexCost,
) -> Result<ValueField, SolverError> {
    config.validate()?;
    let grid = config.grid;
    let (_, cov) = market.scalar_params().ok_or(SolverError::Dimension(market.dim()))?;
    let envelope = CaraEnvelope::new(utility, market, cost, grid.t_init, grid.horizon, &grid.xs())?;

    let floor_m = match config.floor_m {
        Some(f) => f,
        None => default_floor(&grid, &envelope),
    };
    let min_v2 = min_lower_envelope(&grid, &envelope);
    if !(floor_m < min_v2) {
        return Err(SolverError::Config(format!(
            "floor_M = {floor_m:e} must lie below min V2 at delta = {min_v2:e}"
        )));
    }
    let init = initial_condition(&grid, config.beta, floor_m, market, utility, cost)?;
    check_positivity(&grid, &init, grid.t_init)?;

    let est = slice_speeds(config, &init, grid.t_init, market, utility, cost)?;
    let bound = |v: f64| SPEED_MARGIN * v.max(1e-3);
    let span = grid.horizon - grid.t_init;
    let adaptive = grid.n_t == 0 && config.lf_alpha_x.is_none() && config.lf_alpha_r.is_none();
    let mut alpha_x = config.lf_alpha_x.unwrap_or(bound(est.max_speed));
    let mut alpha_r = config.lf_alpha_r.unwrap_or(bound(est.max_r_speed));
    let uniform_dt = if adaptive || span == 0.0 {
        None
    } else if grid.n_t > 0 {
        Some(span / grid.n_t as f64)
    } else {
        let n = (span * cfl_load(&grid, cov, alpha_x, alpha_r) / config.cfl).ceil().max(1.0);
        Some(span / n)
    };

    let mut stats = SolveStats {
        n_t: 0,
        dt_min: f64::INFINITY,
        dt_max: 0.0,
        alpha_x,
        alpha_r,
        floor_m,
        max_speed: est.max_speed,
        max_r_speed: est.max_r_speed,
        retries: 0,
    };
    let env = config.clamp_boundary.then_some(&envelope);
    let targets = stored_times(&grid, config.n_slices);
    let mut times = vec![grid.t_init];
    let mut values = init.clone();
    let mut next_target = 1;
    let mut w = init;
    let mut tau = grid.t_init;
    let mut last_speeds = est;
    let eps = 1e-12 * grid.horizon;
    while tau < grid.horizon - eps {
        if adaptive {
            alpha_x = bound(last_speeds.max_speed);
            alpha_r = bound(last_speeds.max_r_speed);
        }
        let (next, st, dt) = loop {
            let dt = match uniform_dt {
                Some(dt) => dt,
                None => (config.cfl / cfl_load(&grid, cov, alpha_x, alpha_r)).min(targets[next_target] - tau),
            };
            let stepper = Stepper::new(config, dt, alpha_x, alpha_r, market, utility, cost, env)?;
            match stepper.step(&w, tau) {
                Ok((next, st)) => break (next, st, dt),
                Err(SolverError::Cfl(msg)) if adaptive && stats.retries < 10_000 => {
                    let probe = slice_speeds(config, &w, tau, market, utility, cost)?;
                    if probe.max_speed <= alpha_x && probe.max_r_speed <= alpha_r {
                        return Err(SolverError::Cfl(msg));
                    }
                    alpha_x = alpha_x.max(bound(probe.max_speed));
                    alpha_r = alpha_r.max(bound(probe.max_r_speed));
                    stats.retries += 1;
                }
                Err(e) => return Err(e),
            }
        };
        tau = if uniform_dt.is_none() && targets[next_target] - (tau + dt) <= eps {
            targets[next_target]
        } else if grid.horizon - (tau + dt) <= eps {
            grid.horizon
        } else {
            tau + dt
        };
        w = next;
        last_speeds = st;
        stats.n_t += 1;
        stats.dt_min = stats.dt_min.min(dt);
        stats.dt_max = stats.dt_max.max(dt);
        stats.alpha_x = stats.alpha_x.max(alpha_x);
        stats.alpha_r = stats.alpha_r.max(alpha_r);
        stats.max_speed = stats.max_speed.max(st.max_speed);
        stats.max_r_speed = stats.max_r_speed.max(st.max_r_speed);
        if next_target < targets.len() && tau >= targets[next_target] - eps || tau == grid.horizon {
            while next_target < targets.len() && targets[next_target] <= tau + eps {
                next_target += 1;
            }
            times.push(tau);
            values.extend_from_slice(&w);
        }
    }
    if stats.n_t == 0 {
        stats.dt_min = 0.0;
    }
    Ok(ValueField {
        grid: Grid { n_t: stats.n_t, ..grid },
        beta: config.beta,
        u_sup: utility.supremum(),
        times,
        values,
        stats,
    })
}

fn min_lower_envelope(grid: &Grid, env: &CaraEnvelope) -> f64 {
    let mut lo = f64::INFINITY;
    for i in 0..grid.n_x {
        for j in 0..grid.n_r {
            lo = lo.min(env.lower(grid.t_init, grid.x(i), grid.r(j)));
        }
    }
    lo
}

/// Ten times the most negative `V₂` node at `δ`.
pub fn default_floor(grid: &Grid, env: &CaraEnvelope) -> f64 {
    let lo = min_lower_envelope(grid, env);
    10.0 * lo.min(-1.0)
}

/// Centred-difference jet of a stored field at an interior node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeJet {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub tau: f64,
    pub x: f64,
    pub r: f64,
    pub w: f64,
    /// `-w_τ`
    pub q: f64,
    pub jet: Jet,
}

/// Jets at all interior nodes of interior stored slices; time derivatives use
/// the three-point formula on the (non-uniform) stored times.
pub fn field_jets(field: &ValueField) -> Vec<NodeJet> {
    let g = &field.grid;
    let (dx, dr) = (g.dx(), g.dr());
    let mut out = Vec::new();
    for k in 1..field.n_slices().saturating_sub(1) {
        let (t0, t1, t2) = (field.times[k - 1], field.times[k], field.times[k + 1]);
        let (h1, h2) = (t1 - t0, t2 - t1);
        for i in 1..g.n_x - 1 {
            for j in 1..g.n_r - 1 {
                let w = field.at(k, i, j);
                let (wm, wp) = (field.at(k - 1, i, j), field.at(k + 1, i, j));
                let w_tau = (h1 * h1 * wp - h2 * h2 * wm + (h2 * h2 - h1 * h1) * w) / (h1 * h2 * (h1 + h2));
                let p = (field.at(k, i + 1, j) - field.at(k, i - 1, j)) / (2.0 * dx);
                let s = (field.at(k, i, j + 1) - field.at(k, i, j - 1)) / (2.0 * dr);
                let m = (field.at(k, i, j + 1) - 2.0 * w + field.at(k, i, j - 1)) / (dr * dr);
                out.push(NodeJet {
                    k,
                    i,
                    j,
                    tau: t1,
                    x: g.x(i),
                    r: g.r(j),
                    w,
                    q: -w_tau,
                    jet: Jet { p, s, m },
                });
            }
        }
    }
    out
}

/// PDE residual `-w_τ + βw + H` at one node together with its natural scale
/// `|w_τ| + |βw| + |H terms| + |w|/T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeResidual {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub scale: f64,
}

impl NodeResidual {
    pub fn relative(&self) -> f64 {
        self.value.abs() / self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub nodes: Vec<NodeResidual>,
    /// Nodes where the centred `w_r` is not positive.
    pub degenerate: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub max_relative: f64,
    pub mean_relative: f64,
}

/// Evaluates the residual of a jet with an optional source term subtracted.
pub fn jet_residual(
    nj: &NodeJet,
    beta: f64,
    horizon: f64,
    market: &MarketModel,
    cost: &ConvexCost,
) -> Result<(f64, f64), SolverError> {
    let (b, cov) = market.scalar_params().ok_or(SolverError::Dimension(market.dim()))?;
    if !(nj.jet.s > 0.0) {
        return Err(SolverError::DegenerateJet { s: nj.jet.s });
    }
    let ctrl = nj.jet.s * cost.conjugate(-nj.jet.p / nj.jet.s);
    let diff = 0.5 * nj.x * nj.x * cov * nj.jet.m;
    let drift = b * nj.x * nj.jet.s;
    let value = nj.q + beta * nj.w + ctrl + diff + drift;
    let scale = nj.q.abs() + (beta * nj.w).abs() + ctrl.abs() + diff.abs() + drift.abs() + nj.w.abs() / horizon;
    Ok((value, scale))
}

/// Interior-node residuals of a solved field.
pub fn residual(field: &ValueField, market: &MarketModel, cost: &ConvexCost) -> Result<ResidualReport, SolverError> {
    let mut nodes = Vec::new();
    let mut degenerate = 0;
    for nj in field_jets(field) {
        match jet_residual(&nj, field.beta, field.grid.horizon, market, cost) {
            Ok((value, scale)) => nodes.push(NodeResidual {
                k: nj.k,
                i: nj.i,
                j: nj.j,
                value,
                scale,
            }),
            Err(SolverError::DegenerateJet { .. }) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    let n = nodes.len().max(1) as f64;
    Ok(ResidualReport {
        max_abs: nodes.iter().map(|r| r.value.abs()).fold(0.0, f64::max),
        mean_abs: nodes.iter().map(|r| r.value.abs()).sum::<f64>() / n,
        max_relative: nodes.iter().map(NodeResidual::relative).fold(0.0, f64::max),
        mean_relative: nodes.iter().map(NodeResidual::relative).sum::<f64>() / n,
        nodes,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bench_market() -> (MarketModel, Utility, ConvexCost) {
        (
            MarketModel::scalar(0.5, 0.0).unwrap(),
            Utility::cara(1.0).unwrap(),
            ConvexCost::quadratic(1.0).unwrap(),
        )
    }

    fn small_grid() -> Grid {
        Grid {
            x_min: -0.25,
            x_max: 1.25,
            n_x: 25,
            r_min: -3.0,
            r_max: 1.0,
            n_r: 41,
            t_init: 0.1,
            horizon: 0.4,
            n_t: 0,
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let (m, _, c) = bench_market();
        let zero = Jet { p: 0.0, s: 3.0, m: 0.0 };
        assert_eq!(hamiltonian(0.0, zero, &m, &c).unwrap(), 0.0);
        let j = Jet { p: 2.0, s: 2.0, m: 0.0 };
        assert_abs_diff_eq!(hamiltonian(0.0, j, &m, &c).unwrap(), 0.5, epsilon = 1e-15);
        assert!(matches!(
            hamiltonian(0.0, Jet { p: 1.0, s: 0.0, m: 0.0 }, &m, &c),
            Err(SolverError::DegenerateJet { .. })
        ));
    }

    #[test]
    fn hamiltonian_matches_brute_force_sup() {
        let m = MarketModel::scalar(0.7, 0.2).unwrap();
        let xi_cap = 100.0;
        for c in [ConvexCost::quadratic(0.8).unwrap(), ConvexCost::power(2.6, 0.5).unwrap()] {
            for &(x, p, s, mm) in &[(0.4, -1.3, 0.9, -0.4), (-0.7, 2.2, 1.7, 0.3), (1.1, 0.05, 0.2, -2.0)] {
                let linear = 0.5 * x * x * 0.49 * mm + 0.2 * x * s;
                let brute = (0..=10_000)
                    .map(|k| -xi_cap + 2.0 * xi_cap * k as f64 / 10_000.0)
                    .map(|xi| -xi * p - s * c.eval(xi).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                // refine around the grid maximizer
                let fine = {
                    let h = 2.0 * xi_cap / 10_000.0;
                    let best = (0..=10_000)
                        .map(|k| -xi_cap + h * k as f64)
                        .max_by(|a, b| {
                            (-a * p - s * c.eval(*a).unwrap()).total_cmp(&(-b * p - s * c.eval(*b).unwrap()))
                        })
                        .unwrap();
                    (0..=20_000)
                        .map(|k| best - h + 2.0 * h * k as f64 / 20_000.0)
                        .map(|xi| -xi * p - s * c.eval(xi).unwrap())
                        .fold(brute, f64::max)
                };
                let h = hamiltonian(x, Jet { p, s, m: mm }, &m, &c).unwrap();
                assert_abs_diff_eq!(h, fine + linear, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gauss_hermite_integrates_gaussians() {
        let (t, w) = gauss_hermite(HERMITE_NODES);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), std::f64::consts::PI.sqrt(), epsilon = 1e-12);
        let m2: f64 = t.iter().zip(&w).map(|(t, w)| w * t * t).sum();
        assert_abs_diff_eq!(m2, std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn initial_condition_examples() {
        let (m, u, c) = bench_market();
        let mut g = small_grid();
        g.x_min = -1.0;
        g.x_max = 1.0;
        g.n_x = 21;
        g.r_min = -1.0;
        g.r_max = 1.0;
        g.n_r = 21;
        g.t_init = 0.1;
        let w = initial_condition(&g, 0.0, -1e300, &m, &u, &c).unwrap();
        // x = 0, r = 0
        assert_abs_diff_eq!(w[10 * 21 + 10], -1.0, epsilon = 1e-14);
        // x = 1, δ = 0.1: C = δ f(x/δ) + (A/2) Σ x² δ/3
        let cc = 0.1 * 100.0 + 0.5 * 0.25 * 0.1 / 3.0;
        for j in [0, 7, 20] {
            let r = g.r(j);
            assert_abs_diff_eq!(w[20 * 21 + j] / (-(-(r - cc)).exp()), 1.0, epsilon = 1e-12);
        }
        // δ → 0 sends unliquidated positions to -∞
        let mut prev = 0.0;
        for delta in [0.1, 0.03, 0.01, 0.003] {
            g.t_init = delta;
            let w = initial_condition(&g, 0.0, f64::MIN, &m, &u, &c).unwrap();
            let v = w[15 * 21 + 10];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < -1e30);
    }

    #[test]
    fn initial_condition_quadrature_matches_closed_form_for_mixture() {
        let m = MarketModel::scalar(0.8, 0.1).unwrap();
        let u = Utility::mixture(0.4, 0.7, 1.9).unwrap();
        let c = ConvexCost::power(2.5, 0.5).unwrap();
        let g = small_grid();
        let w = initial_condition(&g, 0.0, f64::MIN, &m, &u, &c).unwrap();
        for i in [0, 5, 24] {
            let x = g.x(i);
            for j in [0, 20, 40] {
                let mean = g.r(j) - g.t_init * c.eval(x / g.t_init).unwrap() + 0.1 * x * g.t_init / 2.0;
                let var = 0.64 * x * x * g.t_init / 3.0;
                let exact = u.gaussian_expectation(mean, var);
                assert!((w[i * g.n_r + j] - exact).abs() <= 1e-10 * exact.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_position_row_is_stationary() {
        let (m, u, c) = bench_market();
        let mut g = small_grid();
        g.n_t = 0;
        let cfg = SolverConfig::new(g);
        let w = initial_condition(&g, 0.0, -1e300, &m, &u, &c).unwrap();
        let est = slice_speeds(&cfg, &w, g.t_init, &m, &u, &c).unwrap();
        let (ax, ar) = (1.2 * est.max_speed, 1.2 * est.max_r_speed);
        let dt = 0.9 / cfl_load(&g, 0.25, ax, ar);
        let stepper = Stepper::new(&cfg, dt, ax, ar, &m, &u, &c, None).unwrap();
        let (next, _) = stepper.step(&w, g.t_init).unwrap();
        let i0 = 4; // x = 0
        assert_eq!(g.x(i0), 0.0);
        for j in 0..g.n_r {
            assert!((next[i0 * g.n_r + j] - w[i0 * g.n_r + j]).abs() <= 1e-14 * w[i0 * g.n_r + j].abs());
        }
        // a too-large Δt is rejected
        assert!(matches!(
            Stepper::new(&cfg, 2.0 * dt / 0.9, ax, ar, &m, &u, &c, None),
            Err(SolverError::Cfl(_))
        ));
    }

    #[test]
    fn pure_damping_on_a_flat_in_x_field() {
        // w depends on r only and x ≡ 0 terms vanish when Σ = 0, b = 0
        let m = MarketModel::scalar(0.0, 0.0).unwrap();
        let (u, c) = (Utility::cara(1.0).unwrap(), ConvexCost::quadratic(1.0).unwrap());
        let g = small_grid();
        let mut cfg = SolverConfig::new(g);
        cfg.beta = -0.5;
        let w: Vec<f64> = (0..g.n_x).flat_map(|_| (0..g.n_r).map(|j| 0.3 * g.r(j) - 2.0)).collect();
        let dt = 1e-3;
        let stepper = Stepper::new(&cfg, dt, 1.0, 1.0, &m, &u, &c, None).unwrap();
        let (next, _) = stepper.step(&w, g.t_init).unwrap();
        for i in 0..g.n_x {
            for j in 1..g.n_r - 1 {
                let k = i * g.n_r + j;
                assert_abs_diff_eq!(next[k], w[k] * (1.0 - 0.5 * dt), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_step_tracks_straight_line_values() {
        // with Σ = 0 the straight-line value is the exact value of its own
        // strategy; one step from δ must land close to the δ+Δt slice
        let m = MarketModel::scalar(0.0, 0.0).unwrap();
        let (u, c) = (Utility::cara(1.0).unwrap(), ConvexCost::quadratic(1.0).unwrap());
        let g = Grid {
            x_min: -0.5,
            x_max: 0.5,
            n_x: 201,
            r_min: -2.0,
            r_max: 1.0,
            n_r: 301,
            t_init: 0.5,
            horizon: 1.0,
            n_t: 0,
        };
        let cfg = SolverConfig::new(g);
        let w = initial_condition(&g, 0.0, f64::MIN, &m, &u, &c).unwrap();
        let est = slice_speeds(&cfg, &w, g.t_init, &m, &u, &c).unwrap();
        let (ax, ar) = (1.2 * est.max_speed, 1.2 * est.max_r_speed);
        let dt = 0.9 / cfl_load(&g, 0.0, ax, ar);
        let stepper = Stepper::new(&cfg, dt, ax, ar, &m, &u, &c, None).unwrap();
        let (next, _) = stepper.step(&w, g.t_init).unwrap();
        let later = initial_condition(&Grid { t_init: g.t_init + dt, ..g }, 0.0, f64::MIN, &m, &u, &c).unwrap();
        let allowance = dt * dt + g.dx() + g.dr();
        for i in (20..180).step_by(20) {
            for j in (20..280).step_by(40) {
                let k = i * g.n_r + j;
                let rel = ((next[k] - later[k]) / later[k]).abs();
                assert!(rel <= allowance * dt, "node ({i},{j}): rel {rel:e}");
            }
        }
    }

    #[test]
    fn scheme_is_monotone_under_perturbation() {
        use rand::{Rng, SeedableRng};
        let (m, u, c) = bench_market();
        let m_drift = MarketModel::scalar(0.5, 0.3).unwrap();
        let g = small_grid();
        for (scheme, market) in [(Scheme::Upwind, &m), (Scheme::LaxFriedrichs, &m), (Scheme::Upwind, &m_drift)] {
            let mut cfg = SolverConfig::new(g);
            cfg.scheme = scheme;
            let w = initial_condition(&g, 0.0, f64::MIN, market, &u, &c).unwrap();
            let est = slice_speeds(&cfg, &w, g.t_init, market, &u, &c).unwrap();
            let (ax, ar) = (1.5 * est.max_speed, 1.5 * est.max_r_speed);
            let (_, cov) = market.scalar_params().unwrap();
            let dt = 0.9 / cfl_load(&g, cov, ax, ar);
            let stepper = Stepper::new(&cfg, dt, ax, ar, market, &u, &c, None).unwrap();
            let (base, _) = stepper.step(&w, g.t_init).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            for _ in 0..100 {
                let i = rng.gen_range(2..g.n_x - 2);
                let j = rng.gen_range(2..g.n_r - 2);
                let (di, dj) = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)][rng.gen_range(0..4)];
                let (ni, nj) = ((i as i64 + di) as usize, (j as i64 + dj) as usize);
                let mut bumped = w.clone();
                let node = ni * g.n_r + nj;
                let eps = 1e-7 * w[node].abs().max(1.0);
                bumped[node] += eps;
                if stepper.step(&bumped, g.t_init).is_err() {
                    continue;
                }
                let (after, _) = stepper.step(&bumped, g.t_init).unwrap();
                let k = i * g.n_r + j;
                assert!(
                    after[k] >= base[k] - 1e-13 * base[k].abs(),
                    "{scheme:?}: node ({i},{j}) decreased when ({ni},{nj}) increased"
                );
            }
        }
    }

    #[test]
    fn solve_trivial_horizon_returns_initial_slice() {
        let (m, u, c) = bench_market();
        let g = Grid {
            horizon: 0.1,
            ..small_grid()
        };
        let f = solve(&SolverConfig::new(g), &m, &u, &c).unwrap();
        assert_eq!(f.n_slices(), 1);
        let init = initial_condition(&g, 0.0, f.stats.floor_m, &m, &u, &c).unwrap();
        assert_eq!(f.values, init);
    }

    #[test]
    fn solve_is_monotone_in_revenue_and_converges() {
        let (m, u, c) = bench_market();
        let gap = |n_x: usize, n_r: usize| {
            let g = Grid { n_x, n_r, ..small_grid() };
            let f = solve(&SolverConfig::new(g), &m, &u, &c).unwrap();
            for k in 0..f.n_slices() {
                for i in 0..g.n_x {
                    for j in 0..g.n_r - 1 {
                        assert!(f.at(k, i, j + 1) > f.at(k, i, j));
                    }
                }
            }
            assert_eq!(*f.times.last().unwrap(), g.horizon);
            let x = 0.375;
            let exact = -(-(0.0 - crate::oracle::lq_min_cost(1.0, g.horizon, x, 1.0, 0.25))).exp();
            let got = f.interpolate(g.horizon, x, 0.0).unwrap();
            ((got - exact) / exact).abs()
        };
        let (coarse, fine) = (gap(25, 41), gap(49, 81));
        assert!(fine < 0.6 * coarse, "{coarse} -> {fine}");
        assert!(fine < 0.06, "{fine}");
    }

    #[test]
    fn rejects_bad_configuration() {
        let mut g = small_grid();
        g.t_init = 0.5;
        assert!(SolverConfig::new(g).validate().is_err());
        let mut g = small_grid();
        g.n_x = 2;
        assert!(g.validate().is_err());
        let mut cfg = SolverConfig::new(small_grid());
        cfg.cfl = 1.5;
        assert!(cfg.validate().is_err());
        cfg.cfl = 0.5;
        cfg.beta = 0.1;
        assert!(cfg.validate().is_err());
        let (m, u, c) = bench_market();
        let mut cfg = SolverConfig::new(small_grid());
        cfg.floor_m = Some(-1.0);
        assert!(matches!(solve(&cfg, &m, &u, &c), Err(SolverError::Config(_))));
    }

    #[test]
    fn residual_of_constant_field_at_zero_position() {
        let (m, _, c) = bench_market();
        let g = small_grid();
        let nj = NodeJet {
            k: 1,
            i: 5,
            j: 3,
            tau: 0.2,
            x: 0.0,
            r: g.r(3),
            w: -2.0,
            q: 0.0,
            jet: Jet { p: 0.0, s: 1.0, m: 0.0 },
        };
        let (v, _) = jet_residual(&nj, 0.0, 1.0, &m, &c).unwrap();
        assert_eq!(v, 0.0);
    }
}
