//! Structural checks on solved fields and simulated paths.
//!
//! Every check returns a [`CheckReport`] whose `pass` flag is exactly
//! `statistic <= tolerance`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ConvexCost, CostError};
use crate::model::{MarketModel, Utility};
use crate::oracle::{CaraEnvelope, OracleError, Trajectory};
use crate::policy::{revenue, FeedbackPolicy, simulate_batch, simulate_prefix, PathRecord, PolicyError, SimSettings, TradingRule};
use crate::solver::{field_jets, hamiltonian, jet_residual, Jet, SolverError, ValueField};

/// Fraction of truncated paths above which estimates carry a warning.
pub const TRUNCATION_WARNING: f64 = 0.01;
/// Relative slack `1e-6 (1 + |V₂|)` of the sandwich check.
pub const SANDWICH_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("invalid check input: {0}")]
    Input(String),
    #[error("no usable paths ({truncated} of {total} truncated)")]
    NoPaths { truncated: usize, total: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub statistic: f64,
    pub tolerance: f64,
    pub details: Vec<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, statistic: f64, tolerance: f64, details: Vec<String>) -> Self {
        Self {
            name: name.into(),
            pass: statistic <= tolerance,
            statistic,
            tolerance,
            details,
        }
    }
}

/// Sample mean and standard error over usable paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub used: usize,
    pub truncated: usize,
    pub warning: Option<String>,
}

/// Mean and standard error of `values`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // shifted by the first sample so that constant samples are reproduced exactly
    let v0 = values[0];
    let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn estimate(values: Vec<f64>, truncated: usize) -> Result<McEstimate, VerifyError> {
    let total = values.len() + truncated;
    if values.is_empty() {
        return Err(VerifyError::NoPaths { truncated, total });
    }
    let (mean, stderr) = mean_stderr(&values);
    let frac = truncated as f64 / total as f64;
    let warning = (frac > TRUNCATION_WARNING).then(|| {
        format!(
            "{truncated} of {total} paths ({:.2}%) left the grid; estimate may be unreliable",
            100.0 * frac
        )
    });
    Ok(McEstimate {
        mean,
        stderr,
        used: values.len(),
        truncated,
        warning,
    })
}

/// `E[u(R_T)]` under `rule`, excluding truncated paths.
#[allow(clippy::too_many_arguments)]
pub fn mc_expected_utility(
    rule: &dyn TradingRule,
    market: &MarketModel,
    utility: &Utility,
    cost: &ConvexCost,
    x0: f64,
    r0: f64,
    settings: &SimSettings,
    n_paths: usize,
    seed0: u64,
) -> Result<McEstimate, VerifyError> {
    if n_paths < 2 {
        return Err(VerifyError::Input(format!("n_paths must be >= 2, got {n_paths}")));
    }
    let paths = simulate_batch(rule, market, cost, x0, r0, settings, seed0, n_paths)?;
    utility_estimate(&paths, utility)
}

/// `E[u(R_T)]` over already simulated paths.
pub fn utility_estimate(paths: &[PathRecord], utility: &Utility) -> Result<McEstimate, VerifyError> {
    let truncated = paths.iter().filter(|p| p.is_truncated()).count();
    let values = paths
        .iter()
        .filter(|p| !p.is_truncated())
        .map(|p| utility.eval(revenue(p)))
        .collect();
    estimate(values, truncated)
}

/// Inputs of the dynamic-programming check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DppSetup {
    pub x0: f64,
    pub r0: f64,
    /// Elapsed time at which the field is sampled.
    pub t_bar: f64,
    pub settings: SimSettings,
    pub n_paths: usize,
    pub seed0: u64,
}

/// Default discretization allowance `(Δx + Δr)·|w(T, x₀, r₀)|`.
pub fn grid_allowance(field: &ValueField, w0: f64) -> f64 {
    (field.grid.dx() + field.grid.dr()) * w0.abs()
}

/// Monte-Carlo estimate of `E[w(T - t̄, X_t̄, R_t̄)]` under `rule`, and `w(T, x₀, r₀)`.
fn dpp_estimate(
    field: &ValueField,
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    setup: &DppSetup,
) -> Result<(McEstimate, f64), VerifyError> {
    let horizon = field.grid.horizon;
    let s = &setup.settings;
    if (s.horizon - horizon).abs() > 1e-12 * horizon {
        return Err(VerifyError::Input(format!(
            "simulation horizon {} differs from the field horizon {horizon}",
            s.horizon
        )));
    }
    if !(setup.t_bar >= 0.0 && setup.t_bar < horizon - field.grid.t_init) {
        return Err(VerifyError::Input(format!(
            "t_bar = {} must lie in [0, T - delta)",
            setup.t_bar
        )));
    }
    let k_stop = s
        .step_of(setup.t_bar)
        .ok_or_else(|| VerifyError::Input(format!("t_bar = {} is not a simulation grid time", setup.t_bar)))?;
    let w0 = field.interpolate(horizon, setup.x0, setup.r0)?;
    let tau = horizon - setup.t_bar;
    let results: Vec<Result<Option<f64>, VerifyError>> = {
        use rayon::prelude::*;
        (0..setup.n_paths as u64)
            .into_par_iter()
            .map(|k| {
                let p = simulate_prefix(
                    rule,
                    market,
                    cost,
                    setup.x0,
                    setup.r0,
                    s,
                    setup.seed0.wrapping_add(k),
                    k_stop,
                )?;
                if p.is_truncated() {
                    return Ok(None);
                }
                let (x, r) = (p.x[k_stop], p.r[k_stop]);
                match field.interpolate(tau, x, r) {
                    Ok(v) => Ok(Some(v)),
                    Err(SolverError::OutsideGrid { .. }) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            })
            .collect()
    };
    let mut values = Vec::with_capacity(setup.n_paths);
    let mut truncated = 0;
    for r in results {
        match r? {
            Some(v) => values.push(v),
            None => truncated += 1,
        }
    }
    Ok((estimate(values, truncated)?, w0))
}

/// Bellman principle: `|E[w(T - t̄, X_t̄, R_t̄)] - w(T, x₀, r₀)| / (3·stderr + allowance)`.
pub fn dpp_check(
    field: &ValueField,
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    setup: &DppSetup,
    allowance: Option<f64>,
) -> Result<CheckReport, VerifyError> {
    let (est, w0) = dpp_estimate(field, rule, market, cost, setup)?;
    let allowance = allowance.unwrap_or_else(|| grid_allowance(field, w0));
    let stat = (est.mean - w0).abs() / (3.0 * est.stderr + allowance);
    Ok(CheckReport::new(
        format!("dpp_t{}", setup.t_bar),
        stat,
        1.0,
        dpp_details(&est, w0, allowance, setup),
    ))
}

/// Bellman inequality for an arbitrary rule: `E[w(T - t̄, ·)] ≤ w(T, x₀, r₀)`,
/// statistic `max(E - w₀, 0) / (3·stderr + allowance)`.
pub fn dpp_upper_check(
    field: &ValueField,
    rule: &dyn TradingRule,
    market: &MarketModel,
    cost: &ConvexCost,
    setup: &DppSetup,
    allowance: Option<f64>,
) -> Result<CheckReport, VerifyError> {
    let (est, w0) = dpp_estimate(field, rule, market, cost, setup)?;
    let allowance = allowance.unwrap_or_else(|| grid_allowance(field, w0));
    let stat = (est.mean - w0).max(0.0) / (3.0 * est.stderr + allowance);
    Ok(CheckReport::new(
        format!("dpp_upper_t{}", setup.t_bar),
        stat,
        1.0,
        dpp_details(&est, w0, allowance, setup),
    ))
}

fn dpp_details(est: &McEstimate, w0: f64, allowance: f64, setup: &DppSetup) -> Vec<String> {
    let mut d = vec![
        format!("estimate={:.8e}", est.mean),
        format!("stderr={:.3e}", est.stderr),
        format!("w0={w0:.8e}"),
        format!("allowance={allowance:.3e}"),
        format!("paths_used={}", est.used),
        format!("paths_excluded={}", est.truncated),
        format!("seed0={}", setup.seed0),
    ];
    d.extend(est.warning.clone());
    d
}

/// Feedback consistency `∇f(ξ̂)·w_r + w_x = 0` away from the nodes: at the
/// centre of every interior cell of every stored slice, `ξ̂` comes from the
/// interpolated policy and `(w_x, w_r)` from the interpolated field gradient.
/// The statistic is the largest `|residual| / ((Δx + Δr)(|w_x| + |w_r|))`.
pub fn feedback_consistency_check(
    field: &ValueField,
    policy: &FeedbackPolicy<'_>,
    cost: &ConvexCost,
    factor: f64,
) -> Result<CheckReport, VerifyError> {
    use rayon::prelude::*;
    let g = &field.grid;
    let h = g.dx() + g.dr();
    let worst = (0..field.n_slices())
        .into_par_iter()
        .map(|k| -> Result<(f64, usize, f64, f64), VerifyError> {
            let tau = field.times[k];
            let mut best = (0.0, k, f64::NAN, f64::NAN);
            for i in 1..g.n_x - 2 {
                let x = g.x(i) + 0.5 * g.dx();
                for j in 1..g.n_r - 2 {
                    let r = g.r(j) + 0.5 * g.dr();
                    let xi = policy.speed_at(tau, x, r)?;
                    let (p, s) = field.slice_gradient(k, x, r)?;
                    let rel = (cost.grad(xi)? * s + p).abs() / (h * (p.abs() + s.abs()));
                    if !(rel <= best.0) {
                        best = (rel, k, x, r);
                    }
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold((0.0, 0, f64::NAN, f64::NAN), |a, b| if !(b.0 <= a.0) { b } else { a });
    let details = vec![
        format!("cells_per_slice={}", (g.n_x - 3) * (g.n_r - 3)),
        format!("slices={}", field.n_slices()),
        format!("worst slice={} tau={:.6} x={:.6} r={:.6}", worst.1, field.times[worst.1], worst.2, worst.3),
    ];
    Ok(CheckReport::new("feedback_consistency", worst.0, factor, details))
}

/// β-transform commutation: `other` solved with damping β' must equal
/// `e^{(β' - β)τ}·base` at every stored node. The statistic is the largest
/// nodewise mismatch relative to the distance below the discounted `sup u`
/// (the value itself can cross zero when `sup u > 0`); the tolerance is
/// `factor` times the larger of the two step tolerances.
pub fn beta_commutation_check(base: &ValueField, other: &ValueField, factor: f64) -> Result<CheckReport, VerifyError> {
    if base.grid != other.grid || base.times != other.times || base.u_sup != other.u_sup {
        return Err(VerifyError::Input("fields differ in grid, stored times or utility".into()));
    }
    let n = base.grid.nodes();
    let mut worst = (0.0, 0, 0);
    for (k, &tau) in base.times.iter().enumerate() {
        let scale = ((other.beta - base.beta) * tau).exp();
        let top = other.u_sup * (other.beta * tau).exp();
        for node in 0..n {
            let a = scale * base.values[k * n + node];
            let b = other.values[k * n + node];
            let rel = (a - b).abs() / (top - a).abs().max(f64::MIN_POSITIVE);
            if !(rel <= worst.0) {
                worst = (rel, k, node);
            }
        }
    }
    let step = base.step_tolerance().max(other.step_tolerance());
    let g = &base.grid;
    let details = vec![
        format!("beta_base={} beta_other={}", base.beta, other.beta),
        format!("step_tolerance={step:.6e}"),
        format!(
            "worst node slice={} i={} j={} tau={:.6}",
            worst.1,
            worst.2 / g.n_r,
            worst.2 % g.n_r,
            base.times[worst.1]
        ),
    ];
    Ok(CheckReport::new("beta_commutation", worst.0, factor * step, details))
}

/// Sandwich `V₂ ≤ w ≤ V₁` at every stored node. The statistic is the largest
/// violation relative to the nodewise slack `1e-6 (1 + |V₂|) + rel_tol·|V₂|`;
/// the tolerance is 1.
pub fn sandwich_check(field: &ValueField, envelope: &CaraEnvelope, rel_tol: f64) -> CheckReport {
    let g = &field.grid;
    let mut worst = (0.0, 0.0, None);
    for k in 0..field.n_slices() {
        let tau = field.times[k];
        let scale = (field.beta * tau).exp();
        for i in 0..g.n_x {
            let x = g.x(i);
            for j in 0..g.n_r {
                let r = g.r(j);
                let w = field.at(k, i, j);
                let v1 = scale * envelope.upper(tau, x, r);
                let v2 = scale * envelope.lower(tau, x, r);
                let excess = (v2 - w).max(w - v1);
                let slack = SANDWICH_SLACK * (1.0 + v2.abs()) + rel_tol * v2.abs();
                let ratio = excess / slack;
                if ratio > worst.0 || worst.2.is_none() {
                    worst = (ratio, excess, Some((k, i, j, tau, x, r, w, v1, v2)));
                }
            }
        }
    }
    let mut details = vec![format!("max_excess={:.6e}", worst.1), format!("rel_tol={rel_tol:e}")];
    if let Some((k, i, j, tau, x, r, w, v1, v2)) = worst.2 {
        details.push(format!(
            "worst node slice={k} i={i} j={j} tau={tau:.6} x={x:.6} r={r:.6} w={w:.8e} V1={v1:.8e} V2={v2:.8e}"
        ));
    }
    CheckReport::new("sandwich", worst.0, 1.0, details)
}

/// `E[exp(-θ R_T)]` of a deterministic trajectory: `R_T` is Gaussian with mean
/// `r₀ - C₀(X)` and variance `∫XᵀΣX dt`.
pub fn deterministic_moment(
    traj: &Trajectory,
    theta: f64,
    r0: f64,
    market: &MarketModel,
    cost: &ConvexCost,
) -> Result<f64, VerifyError> {
    let (c0, var) = traj.cost_and_variance(market, cost)?;
    Ok((-theta * (r0 - c0) + 0.5 * theta * theta * var).exp())
}

/// Admissibility moment bound `E[exp(-2A₂ R_T)] ≤ reference`; the statistic is
/// the estimate minus three standard errors.
pub fn admissibility_check(paths: &[PathRecord], a2: f64, bound_reference: f64) -> CheckReport {
    let used: Vec<&PathRecord> = paths.iter().filter(|p| !p.is_truncated()).collect();
    let values: Vec<f64> = used.iter().map(|p| (-2.0 * a2 * revenue(p)).exp()).collect();
    let mut details = vec![
        format!("bound_reference={bound_reference:.6e} (proxy: moment of the deterministic CARA optimum plus 1)"),
        format!("paths_used={}", used.len()),
        format!("paths_excluded={}", paths.len() - used.len()),
    ];
    if values.is_empty() {
        details.push("no usable paths".into());
        return CheckReport::new("admissibility", f64::INFINITY, bound_reference, details);
    }
    if values.iter().any(|v| !v.is_finite()) {
        details.push("exp(-2 A2 R_T) overflowed: unbounded moment".into());
        return CheckReport::new("admissibility", f64::INFINITY, bound_reference, details);
    }
    let (mean, stderr) = mean_stderr(&values);
    details.push(format!("estimate={mean:.6e}"));
    details.push(format!("stderr={stderr:.3e}"));
    CheckReport::new("admissibility", mean - 3.0 * stderr, bound_reference, details)
}

/// `w(τ, x, r) = e^{βτ}·(-exp(-A r + A k(τ) x²))` with `k(τ) = κ coth(κτ)`,
/// the CARA value for unit quadratic cost when `κ = √(AΣ/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Manufactured {
    pub a: f64,
    pub kappa: f64,
    pub beta: f64,
}

impl Manufactured {
    fn k(&self, tau: f64) -> (f64, f64) {
        if self.kappa < 1e-8 {
            return (1.0 / tau, -1.0 / (tau * tau));
        }
        let s = (self.kappa * tau).sinh();
        (self.kappa / (self.kappa * tau).tanh(), -self.kappa * self.kappa / (s * s))
    }

    pub fn value(&self, tau: f64, x: f64, r: f64) -> f64 {
        let (k, _) = self.k(tau);
        -(self.beta * tau - self.a * r + self.a * k * x * x).exp()
    }

    /// Exact `(-w_τ, Jet)`.
    pub fn jet(&self, tau: f64, x: f64, r: f64) -> (f64, Jet) {
        let w = self.value(tau, x, r);
        let (k, dk) = self.k(tau);
        let w_tau = self.beta * w + w * self.a * dk * x * x;
        let jet = Jet {
            p: w * 2.0 * self.a * k * x,
            s: -self.a * w,
            m: self.a * self.a * w,
        };
        (-w_tau, jet)
    }

    /// `-w_τ + βw + H` of the exact function (the source that makes it a solution).
    pub fn source(&self, tau: f64, x: f64, r: f64, market: &MarketModel, cost: &ConvexCost) -> Result<f64, SolverError> {
        let (q, jet) = self.jet(tau, x, r);
        Ok(q + self.beta * self.value(tau, x, r) + hamiltonian(x, jet, market, cost)?)
    }

    /// The manufactured function sampled on the grid and stored times of `like`.
    pub fn sample(&self, like: &ValueField) -> ValueField {
        let g = &like.grid;
        let mut out = like.clone();
        out.beta = self.beta;
        out.u_sup = 0.0;
        let n = g.nodes();
        for (k, &tau) in like.times.iter().enumerate() {
            for i in 0..g.n_x {
                for j in 0..g.n_r {
                    out.values[k * n + i * g.n_r + j] = self.value(tau, g.x(i), g.r(j));
                }
            }
        }
        out
    }
}

/// Local consistency scale `max(Δτ₋, Δτ₊) + Δx + Δr` of stored slice `k`.
pub fn jet_spacing(field: &ValueField, k: usize) -> f64 {
    let t = &field.times;
    (t[k + 1] - t[k]).max(t[k] - t[k - 1]) + field.grid.dx() + field.grid.dr()
}

/// Calibrates the jet-consistency constant `c`: the largest normalized
/// residual error `|G_fd - G_exact| / scale / spacing` over interior nodes when
/// the finite-difference jets are taken from a manufactured exact function
/// sampled on the same grid and stored times as `field`.
pub fn calibrate_jet_constant(
    field: &ValueField,
    manufactured: &Manufactured,
    market: &MarketModel,
    cost: &ConvexCost,
) -> Result<f64, VerifyError> {
    let sampled = manufactured.sample(field);
    let horizon = field.grid.horizon;
    let mut c: f64 = 0.0;
    for nj in field_jets(&sampled) {
        let (g_fd, scale) = match jet_residual(&nj, sampled.beta, horizon, market, cost) {
            Ok(v) => v,
            Err(SolverError::DegenerateJet { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let exact = manufactured.source(nj.tau, nj.x, nj.r, market, cost)?;
        c = c.max((g_fd - exact).abs() / scale / jet_spacing(&sampled, nj.k));
    }
    Ok(c)
}

/// Interior node whose jet residual exceeded the consistency tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JetViolation {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub ratio: f64,
}

/// Jet-check outcome with the offending nodes, worst first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JetCheck {
    pub report: CheckReport,
    pub violations: Vec<JetViolation>,
    pub degenerate: usize,
    pub nodes: usize,
}

/// Viscosity jet consistency: at every interior node of the interior stored
/// slices, `G = q + βw + (xᵀΣx/2)m + (b·x)s + s f*(-p/s)` from centred jets
/// must satisfy `|G| / scale ≤ c·(Δτ + Δx + Δr)`. The statistic is the fraction
/// of nodes violating it (nodes with `s ≤ 0` count as violations and are
/// reported separately); the tolerance is `max_fraction`.
pub fn viscosity_jet_check(
    field: &ValueField,
    market: &MarketModel,
    cost: &ConvexCost,
    c: f64,
    max_fraction: f64,
) -> Result<JetCheck, VerifyError> {
    let horizon = field.grid.horizon;
    let mut violations = Vec::new();
    let mut degenerate = 0;
    let mut nodes = 0;
    for nj in field_jets(field) {
        nodes += 1;
        match jet_residual(&nj, field.beta, horizon, market, cost) {
            Ok((g, scale)) => {
                let ratio = g.abs() / scale / (c * jet_spacing(field, nj.k));
                if !(ratio <= 1.0) {
                    violations.push(JetViolation {
                        k: nj.k,
                        i: nj.i,
                        j: nj.j,
                        ratio,
                    });
                }
            }
            Err(SolverError::DegenerateJet { .. }) => degenerate += 1,
            Err(e) => return Err(e.into()),
        }
    }
    violations.sort_by(|a, b| b.ratio.total_cmp(&a.ratio));
    let frac = (violations.len() + degenerate) as f64 / nodes.max(1) as f64;
    let mut details = vec![
        format!("c={c:.6}"),
        format!("interior_nodes={nodes}"),
        format!("violations={}", violations.len()),
        format!("degenerate_s_nonpositive={degenerate}"),
    ];
    for v in violations.iter().take(10) {
        details.push(format!("slice={} i={} j={} |G|/tau_v={:.3}", v.k, v.i, v.j, v.ratio));
    }
    Ok(JetCheck {
        report: CheckReport::new("viscosity_jets", frac, max_fraction, details),
        violations,
        degenerate,
        nodes,
    })
}
