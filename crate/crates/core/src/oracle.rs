//! Deterministic CARA oracle.
//!
//! For a deterministic liquidation path `X` the revenue is Gaussian, so
//! exponential utility has the closed-form expectation
//!
//! ```text
//! E[-exp(-A R_T)] = -exp(-A (r₀ - C_A(X)))
//! C_A(X) = ∫₀^T f(ξ_t) - b·X_t + (A/2) X_tᵀ Σ X_t dt,   ξ = -dX/dt
//! ```
//!
//! and maximizing expected utility over deterministic strategies becomes the
//! convex problem of minimizing `C_A`. Paths are piecewise linear on uniform
//! knots; the speed cost is exact per interval and the potential terms use the
//! trapezoid rule, which keeps the discrete functional convex with an exact
//! gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ConvexCost, CostError};
use crate::model::{lower_envelope, upper_envelope, MarketModel, Utility};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("need at least 2 intervals, got {0}")]
    TooFewKnots(usize),
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("position has dimension {got}, market has {want}")]
    Dimension { got: usize, want: usize },
    #[error("optimizer did not converge in {iters} iterations (gradient sup-norm {grad_norm:e})")]
    NotConverged { iters: usize, grad_norm: f64 },
    #[error("closed form needs zero drift, one asset and quadratic cost")]
    Unsupported,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Piecewise-linear deterministic liquidation path on uniform knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub horizon: f64,
    pub dim: usize,
    /// `(N+1)·dim` positions, knot-major.
    pub positions: Vec<f64>,
}

impl Trajectory {
    /// Straight-line liquidation of `x0` over `[0, horizon]`.
    pub fn straight_line(horizon: f64, x0: &[f64], intervals: usize) -> Self {
        let positions = (0..=intervals)
            .flat_map(|k| {
                let frac = 1.0 - k as f64 / intervals as f64;
                x0.iter().map(move |x| x * frac)
            })
            .collect();
        Self {
            horizon,
            dim: x0.len(),
            positions,
        }
    }

    pub fn intervals(&self) -> usize {
        self.positions.len() / self.dim - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let n = self.intervals();
        (0..=n).map(|k| self.horizon * k as f64 / n as f64).collect()
    }

    pub fn knot(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    /// Speed on interval `k`, `(X_k - X_{k+1}) / Δt`.
    pub fn speed(&self, k: usize) -> Vec<f64> {
        let dt = self.dt();
        self.knot(k)
            .iter()
            .zip(self.knot(k + 1))
            .map(|(a, b)| (a - b) / dt)
            .collect()
    }

    /// First coordinate at every knot.
    pub fn first_coordinate(&self) -> Vec<f64> {
        self.positions.iter().step_by(self.dim).copied().collect()
    }

    /// Sup-norm distance between two trajectories on the same knots.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.positions
            .iter()
            .zip(&other.positions)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(∫ f(ξ) - b·X dt, ∫ XᵀΣX dt)` with the same quadrature as [`cara_cost_functional`].
    pub fn cost_and_variance(&self, market: &MarketModel, cost: &ConvexCost) -> Result<(f64, f64), OracleError> {
        let (c0, var) = split_functional(self, market, cost)?;
        Ok((c0, var))
    }
}

fn check_traj(traj: &Trajectory, market: &MarketModel) -> Result<(), OracleError> {
    if traj.dim != market.dim() {
        return Err(OracleError::Dimension {
            got: traj.dim,
            want: market.dim(),
        });
    }
    if traj.intervals() < 1 {
        return Err(OracleError::TooFewKnots(traj.intervals()));
    }
    Ok(())
}

fn split_functional(traj: &Trajectory, market: &MarketModel, cost: &ConvexCost) -> Result<(f64, f64), OracleError> {
    check_traj(traj, market)?;
    let n = traj.intervals();
    let dt = traj.dt();
    let mut speed_cost = 0.0;
    for k in 0..n {
        speed_cost += cost.eval_vec(&traj.speed(k))? * dt;
    }
    let (mut drift, mut quad) = (0.0, 0.0);
    for k in 0..=n {
        let w = if k == 0 || k == n { 0.5 } else { 1.0 } * dt;
        let x = traj.knot(k);
        drift += w * market.drift_dot(x);
        quad += w * market.quad_form(x);
    }
    Ok((speed_cost - drift, quad))
}

/// Discrete `C_A(X)`.
pub fn cara_cost_functional(
    traj: &Trajectory,
    a: f64,
    market: &MarketModel,
    cost: &ConvexCost,
) -> Result<f64, OracleError> {
    let (c0, quad) = split_functional(traj, market, cost)?;
    Ok(c0 + 0.5 * a * quad)
}

/// Gradient of [`cara_cost_functional`] with respect to the interior knots
/// (endpoint entries are zero).
pub fn cara_cost_gradient(
    traj: &Trajectory,
    a: f64,
    market: &MarketModel,
    cost: &ConvexCost,
) -> Result<Vec<f64>, OracleError> {
    check_traj(traj, market)?;
    let (n, d) = (traj.intervals(), traj.dim);
    let dt = traj.dt();
    let mut grad = vec![0.0; (n + 1) * d];
    let mut gf = vec![0.0; d];
    for k in 0..n {
        cost.grad_vec(&traj.speed(k), &mut gf)?;
        // ξ_k = (X_k - X_{k+1})/Δt, Δt f(ξ_k) differentiates to ±∇f(ξ_k)
        for i in 0..d {
            grad[k * d + i] += gf[i];
            grad[(k + 1) * d + i] -= gf[i];
        }
    }
    let cov = market.covariance();
    let b = market.drift();
    for k in 1..n {
        let x = traj.knot(k);
        for i in 0..d {
            let sx: f64 = (0..d).map(|j| cov[i * d + j] * x[j]).sum();
            grad[k * d + i] += dt * (a * sx - b[i]);
        }
    }
    grad[..d].iter_mut().for_each(|g| *g = 0.0);
    grad[n * d..].iter_mut().for_each(|g| *g = 0.0);
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Converged once `‖∇C‖_∞ ≤ grad_tol · (1 + |C|)`.
    pub grad_tol: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedTrajectory {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Minimizes `C_A` over the interior knots with endpoints pinned at `x0` and 0.
///
/// Descent directions are gradients preconditioned by the discrete
/// second-difference operator (an `H¹` metric), which removes the `N²`
/// conditioning of plain gradient steps; step lengths come from Armijo
/// backtracking. Projection onto the constraint set is just resetting the
/// endpoint entries of the direction.
pub fn optimize_trajectory(
    a: f64,
    horizon: f64,
    x0: &[f64],
    intervals: usize,
    market: &MarketModel,
    cost: &ConvexCost,
    settings: OptimizerSettings,
) -> Result<OptimizedTrajectory, OracleError> {
    if intervals < 2 {
        return Err(OracleError::TooFewKnots(intervals));
    }
    if !(horizon > 0.0) {
        return Err(OracleError::Horizon(horizon));
    }
    if x0.len() != market.dim() {
        return Err(OracleError::Dimension {
            got: x0.len(),
            want: market.dim(),
        });
    }
    let d = x0.len();
    let mut traj = Trajectory::straight_line(horizon, x0, intervals);
    let dt = traj.dt();

    let cov_scale = market.covariance().iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let shift = dt * a.abs() * cov_scale;
    let mut curv = vec![0.0; intervals];
    let mut last = vec![f64::NAN; intervals];

    let mut value = cara_cost_functional(&traj, a, market, cost)?;
    let mut grad = cara_cost_gradient(&traj, a, market, cost)?;
    let mut step: f64 = 1.0;
    let mut dir = vec![0.0; grad.len()];
    let mut trial = traj.clone();
    let mut checkpoint = (value, f64::INFINITY);
    for iter in 0..settings.max_iters {
        let gnorm = sup_norm(&grad);
        if gnorm <= settings.grad_tol * (1.0 + value.abs()) {
            return Ok(OptimizedTrajectory {
                trajectory: traj,
                cost: value,
                iterations: iter,
                grad_norm: gnorm,
            });
        }
        // Newton-like preconditioner from the cost curvature on each interval:
        // secant across the last move where there was one, since tabulated
        // costs have curvature jumps at the knots
        for (k, (c, prev)) in curv.iter_mut().zip(last.iter_mut()).enumerate() {
            let s = radial(&traj.speed(k));
            *c = local_curvature(cost, s, *prev);
            *prev = s;
        }
        for i in 0..d {
            solve_tridiagonal_interior(&grad, &mut dir, i, d, &curv, dt, shift);
        }
        dir.iter_mut().for_each(|v| *v = -*v);
        let slope: f64 = grad.iter().zip(&dir).map(|(g, p)| g * p).sum();
        if slope >= 0.0 {
            // preconditioner is SPD, so this only happens at round-off level
            dir.iter_mut().zip(&grad).for_each(|(p, g)| *p = -g);
        }
        let slope: f64 = grad.iter().zip(&dir).map(|(g, p)| g * p).sum();
        // the curvature model is Newton-like, so the unit step is the natural cap
        step = (step * 2.0).min(1.0);
        let mut accepted = false;
        for _ in 0..80 {
            trial
                .positions
                .iter_mut()
                .zip(traj.positions.iter().zip(&dir))
                .for_each(|(t, (x, p))| *t = x + step * p);
            match cara_cost_functional(&trial, a, market, cost) {
                Ok(v) if v <= value + 1e-4 * step * slope => {
                    accepted = true;
                    value = v;
                    break;
                }
                // the decrease is below round-off in C, so judge by the gradient instead
                Ok(v) if (v - value).abs() <= 1e-13 * (1.0 + value.abs())
                    && sup_norm(&cara_cost_gradient(&trial, a, market, cost)?) < 0.5 * gnorm =>
                {
                    accepted = true;
                    value = v.min(value);
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            // no further decrease representable
            return settle(traj, value, iter, sup_norm(&grad), settings);
        }
        std::mem::swap(&mut traj, &mut trial);
        grad = cara_cost_gradient(&traj, a, market, cost)?;
        // no progress in C or in the gradient over a stretch of iterations is a stall too
        if (iter + 1) % STALL_WINDOW == 0 {
            let gnorm = sup_norm(&grad);
            if checkpoint.0 - value <= 1e-14 * (1.0 + value.abs()) && gnorm > 0.5 * checkpoint.1 {
                return settle(traj, value, iter + 1, gnorm, settings);
            }
            checkpoint = (value, gnorm);
        }
    }
    Err(OracleError::NotConverged {
        iters: settings.max_iters,
        grad_norm: sup_norm(&grad),
    })
}

/// Iterations between stall checks of the optimizer.
const STALL_WINDOW: usize = 100;

/// Accepts a stalled iterate if its gradient is small relative to the
/// functional's scale.
fn settle(
    trajectory: Trajectory,
    cost: f64,
    iterations: usize,
    grad_norm: f64,
    settings: OptimizerSettings,
) -> Result<OptimizedTrajectory, OracleError> {
    if grad_norm <= 1e3 * settings.grad_tol * (1.0 + cost.abs()) {
        Ok(OptimizedTrajectory {
            trajectory,
            cost,
            iterations,
            grad_norm,
        })
    } else {
        Err(OracleError::NotConverged {
            iters: iterations,
            grad_norm,
        })
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the tridiagonal Hessian model on interior knots of coordinate `i`.
fn solve_tridiagonal_interior(
    rhs: &[f64],
    out: &mut [f64],
    i: usize,
    d: usize,
    curv: &[f64],
    dt: f64,
    shift: f64,
) {
    // interior knot k couples through intervals k-1 and k
    let n = curv.len();
    let m = n - 1;
    let mut c = vec![0.0; m];
    let mut y = vec![0.0; m];
    for k in 0..m {
        let r = rhs[(k + 1) * d + i];
        let diag = (curv[k] + curv[k + 1]) / dt + shift;
        if k == 0 {
            c[k] = -curv[k + 1] / dt / diag;
            y[k] = r / diag;
        } else {
            let lower = -curv[k] / dt;
            let denom = diag - lower * c[k - 1];
            c[k] = -curv[k + 1] / dt / denom;
            y[k] = (r - lower * y[k - 1]) / denom;
        }
    }
    for k in (0..m).rev() {
        if k + 1 < m {
            y[k] -= c[k] * y[k + 1];
        }
        out[(k + 1) * d + i] = y[k];
    }
    out[i] = 0.0;
    out[n * d + i] = 0.0;
}

/// Signed speed in one dimension, its norm otherwise.
fn radial(v: &[f64]) -> f64 {
    match v {
        [x] => *x,
        _ => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Cost curvature at `s`: the secant from `prev` when the two are apart,
/// a central difference otherwise. Clamped to keep the preconditioner SPD.
fn local_curvature(cost: &ConvexCost, s: f64, prev: f64) -> f64 {
    let h = 1e-5 * (1.0 + s.abs());
    let (lo, hi) = if (s - prev).abs() > 1e-9 * (1.0 + s.abs()) {
        (s.min(prev), s.max(prev))
    } else {
        (s - h, s + h)
    };
    let c = match (cost.grad(hi), cost.grad(lo)) {
        (Ok(p), Ok(m)) => (p - m) / (hi - lo),
        _ => 1.0,
    };
    if c.is_finite() {
        c.clamp(1e-8, 1e8)
    } else {
        1.0
    }
}

/// `κ = √(AΣ/(2η))` for the linear-quadratic problem.
pub fn lq_rate(a: f64, eta: f64, cov: f64) -> f64 {
    (a * cov / (2.0 * eta)).max(0.0).sqrt()
}

/// Sinh liquidation curve `x₀ sinh(κ(T-t)) / sinh(κT)` for quadratic cost and zero drift.
pub fn lq_closed_form(
    a: f64,
    horizon: f64,
    x0: f64,
    market: &MarketModel,
    cost: &ConvexCost,
    intervals: usize,
) -> Result<Trajectory, OracleError> {
    let (eta, cov) = lq_params(market, cost)?;
    let kappa = lq_rate(a, eta, cov);
    let positions = (0..=intervals)
        .map(|k| {
            let t = horizon * k as f64 / intervals as f64;
            x0 * sinh_ratio(kappa, horizon - t, horizon)
        })
        .collect();
    Ok(Trajectory {
        horizon,
        dim: 1,
        positions,
    })
}

fn lq_params(market: &MarketModel, cost: &ConvexCost) -> Result<(f64, f64), OracleError> {
    match (market.scalar_params(), cost) {
        (Some((b, cov)), ConvexCost::Quadratic { eta }) if b == 0.0 => Ok((*eta, cov)),
        _ => Err(OracleError::Unsupported),
    }
}

/// `sinh(κ s) / sinh(κ T)`, continuous at κ = 0.
fn sinh_ratio(kappa: f64, s: f64, horizon: f64) -> f64 {
    if kappa * horizon < 1e-8 {
        s / horizon
    } else {
        (kappa * s).sinh() / (kappa * horizon).sinh()
    }
}

/// Optimal LQ cost `η κ coth(κ τ) x²`.
pub fn lq_min_cost(a: f64, tau: f64, x: f64, eta: f64, cov: f64) -> f64 {
    let kt = lq_rate(a, eta, cov) * tau;
    let kt_coth = if kt < 1e-4 {
        1.0 + kt * kt / 3.0
    } else {
        kt / kt.tanh()
    };
    eta * x * x * kt_coth / tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub a: f64,
    pub min_cost: f64,
    pub value: f64,
    pub iterations: usize,
    pub trajectory: Trajectory,
}

/// `-exp(-A(r₀ - C*_A))` from the optimized deterministic path.
pub fn cara_value(
    a: f64,
    horizon: f64,
    x0: &[f64],
    r0: f64,
    market: &MarketModel,
    cost: &ConvexCost,
    intervals: usize,
) -> Result<OracleSummary, OracleError> {
    let opt = optimize_trajectory(a, horizon, x0, intervals, market, cost, OptimizerSettings::default())?;
    Ok(OracleSummary {
        a,
        min_cost: opt.cost,
        value: lower_envelope(a, r0 - opt.cost),
        iterations: opt.iterations,
        trajectory: opt.trajectory,
    })
}

/// Same optimum, valued with the shifted upper utility `1/A - exp(-A x)`.
pub fn cara_upper_value(summary: &OracleSummary, r0: f64) -> f64 {
    upper_envelope(summary.a, r0 - summary.min_cost)
}

/// CARA value functions `V₁`, `V₂` bracketing the value of a bounded-AP utility,
/// for one asset as functions of remaining time, position and revenue.
#[derive(Debug, Clone)]
pub struct CaraEnvelope {
    a1: f64,
    a2: f64,
    source: EnvelopeSource,
}

#[derive(Debug, Clone)]
enum EnvelopeSource {
    ClosedForm { eta: f64, cov: f64 },
    /// `τ·C*_A(τ, x)` tabulated on geometric τ knots and x nodes, one table per A.
    Table {
        taus: Vec<f64>,
        xs: Vec<f64>,
        scaled: [Vec<f64>; 2],
    },
}

/// Knot count per oracle solve when tabulating the envelope.
const ENVELOPE_INTERVALS: usize = 64;
const ENVELOPE_TAUS: usize = 24;

impl CaraEnvelope {
    /// Uses the LQ closed form when available, else tabulates optimized costs
    /// on `[tau_min, tau_max] × xs`.
    pub fn new(
        utility: &Utility,
        market: &MarketModel,
        cost: &ConvexCost,
        tau_min: f64,
        tau_max: f64,
        xs: &[f64],
    ) -> Result<Self, OracleError> {
        let (a1, a2) = utility.bounds();
        if let Ok((eta, cov)) = lq_params(market, cost) {
            return Ok(Self {
                a1,
                a2,
                source: EnvelopeSource::ClosedForm { eta, cov },
            });
        }
        if market.dim() != 1 {
            return Err(OracleError::Dimension {
                got: market.dim(),
                want: 1,
            });
        }
        let n_tau = if tau_max > tau_min { ENVELOPE_TAUS } else { 1 };
        let taus: Vec<f64> = (0..n_tau)
            .map(|k| {
                if n_tau == 1 {
                    tau_min
                } else {
                    tau_min * (tau_max / tau_min).powf(k as f64 / (n_tau - 1) as f64)
                }
            })
            .collect();
        let table_for = |a: f64| -> Result<Vec<f64>, OracleError> {
            let jobs: Vec<(f64, f64)> = taus.iter().flat_map(|&t| xs.iter().map(move |&x| (t, x))).collect();
            jobs.par_iter()
                .map(|&(tau, x)| {
                    let opt = optimize_trajectory(
                        a,
                        tau,
                        &[x],
                        ENVELOPE_INTERVALS,
                        market,
                        cost,
                        OptimizerSettings {
                            grad_tol: 1e-10,
                            ..OptimizerSettings::default()
                        },
                    )?;
                    Ok(tau * opt.cost)
                })
                .collect()
        };
        let scaled = [table_for(a1)?, table_for(a2)?];
        Ok(Self {
            a1,
            a2,
            source: EnvelopeSource::Table {
                taus,
                xs: xs.to_vec(),
                scaled,
            },
        })
    }

    pub fn risk_aversions(&self) -> (f64, f64) {
        (self.a1, self.a2)
    }

    /// Minimal deterministic CARA cost `C*_A(τ, x)` for `A ∈ {A₁, A₂}` (`upper` selects A₁).
    pub fn min_cost(&self, upper: bool, tau: f64, x: f64) -> f64 {
        let a = if upper { self.a1 } else { self.a2 };
        match &self.source {
            EnvelopeSource::ClosedForm { eta, cov } => lq_min_cost(a, tau, x, *eta, *cov),
            EnvelopeSource::Table { taus, xs, scaled } => {
                let table = &scaled[usize::from(!upper)];
                let (ti, tw) = bracket(taus, tau);
                let (xi, xw) = bracket(xs, x);
                let nx = xs.len();
                let at = |t: usize, xk: usize| table[t * nx + xk];
                let lerp_x = |t: usize| at(t, xi) * (1.0 - xw) + at(t, (xi + 1).min(nx - 1)) * xw;
                let v = lerp_x(ti) * (1.0 - tw) + lerp_x((ti + 1).min(taus.len() - 1)) * tw;
                v / tau
            }
        }
    }

    /// `V₁(τ,x,r) = 1/A₁ - exp(-A₁(r - C*_{A₁}))`.
    pub fn upper(&self, tau: f64, x: f64, r: f64) -> f64 {
        upper_envelope(self.a1, r - self.min_cost(true, tau, x))
    }

    /// `V₂(τ,x,r) = -exp(-A₂(r - C*_{A₂}))`.
    pub fn lower(&self, tau: f64, x: f64, r: f64) -> f64 {
        lower_envelope(self.a2, r - self.min_cost(false, tau, x))
    }
}

/// Index and weight of the interval containing `x` (clamped).
pub(crate) fn bracket(knots: &[f64], x: f64) -> (usize, f64) {
    let n = knots.len();
    if n == 1 || x <= knots[0] {
        return (0, 0.0);
    }
    if x >= knots[n - 1] {
        return (n - 2, 1.0);
    }
    let k = knots.partition_point(|&s| s <= x).saturating_sub(1).min(n - 2);
    (k, (x - knots[k]) / (knots[k + 1] - knots[k]))
}
