//! Market parameters and utility functions with bounded Arrow-Pratt coefficient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `‖(I - ΣΣ⁺) b‖`.
pub const DRIFT_KERNEL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("volatility matrix has {len} entries, expected {d}x{m}")]
    Shape { len: usize, d: usize, m: usize },
    #[error("drift has length {got}, expected {d}")]
    DriftLength { got: usize, d: usize },
    #[error("drift is not orthogonal to ker(Σ): residual ‖(I - ΣΣ⁺)b‖ = {residual:e}")]
    DriftInKernel { residual: f64 },
    #[error("invalid utility: {0}")]
    Utility(String),
    #[error("non-finite market parameter")]
    NonFinite,
}

/// Drift `b`, volatility `σ` (d×m, row-major) and covariance `Σ = σσᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    d: usize,
    m: usize,
    b: Vec<f64>,
    sigma: Vec<f64>,
    cov: Vec<f64>,
}

impl MarketModel {
    /// Validates the drift against the kernel of the covariance.
    pub fn new(d: usize, m: usize, sigma: Vec<f64>, b: Vec<f64>) -> Result<Self, ModelError> {
        if sigma.len() != d * m || d == 0 || m == 0 {
            return Err(ModelError::Shape { len: sigma.len(), d, m });
        }
        if b.len() != d {
            return Err(ModelError::DriftLength { got: b.len(), d });
        }
        if sigma.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let s = DMatrix::from_row_slice(d, m, &sigma);
        let cov_m = &s * s.transpose();
        let residual = kernel_residual(&cov_m, &b);
        if residual > DRIFT_KERNEL_TOL {
            return Err(ModelError::DriftInKernel { residual });
        }
        let cov = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| cov_m[(i, j)])
            .collect();
        Ok(Self { d, m, b, sigma, cov })
    }

    /// One asset driven by one Brownian motion.
    pub fn scalar(sigma: f64, b: f64) -> Result<Self, ModelError> {
        Self::new(1, 1, vec![sigma], vec![b])
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn drift(&self) -> &[f64] {
        &self.b
    }

    /// Row-major `d×m` volatility.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Row-major `d×d` covariance.
    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    /// `xᵀΣx`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let d = self.d;
        (0..d)
            .map(|i| x[i] * (0..d).map(|j| self.cov[i * d + j] * x[j]).sum::<f64>())
            .sum()
    }

    /// `b·x`.
    pub fn drift_dot(&self, x: &[f64]) -> f64 {
        self.b.iter().zip(x).map(|(b, x)| b * x).sum()
    }

    /// Scalar drift and covariance for the one-asset case.
    pub fn scalar_params(&self) -> Option<(f64, f64)> {
        (self.d == 1).then(|| (self.b[0], self.cov[0]))
    }

    /// `xᵀσ` (length `m`) for a position `x`.
    pub fn exposure(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|k| (0..self.d).map(|i| x[i] * self.sigma[i * self.m + k]).sum())
            .collect()
    }
}

fn kernel_residual(cov: &DMatrix<f64>, b: &[f64]) -> f64 {
    let bv = DVector::from_column_slice(b);
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    let pinv = cov
        .clone()
        .pseudo_inverse(1e-12 * scale)
        .expect("pseudo-inverse with nonnegative epsilon");
    let proj = cov * pinv * &bv;
    (bv - proj).norm()
}

/// Utility with `A₁ ≤ -u''/u' ≤ A₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Utility {
    /// `u(x) = -exp(-A x)`
    Cara { a: f64 },
    /// `u = λ u₁ + (1-λ) u₂` with `u₁(x) = 1/A₁ - exp(-A₁x)` and `u₂(x) = -exp(-A₂x)`.
    Mixture { lambda: f64, a1: f64, a2: f64 },
}

impl Utility {
    pub fn cara(a: f64) -> Result<Self, ModelError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(ModelError::Utility(format!("risk aversion must be > 0, got {a}")));
        }
        Ok(Self::Cara { a })
    }

    pub fn mixture(lambda: f64, a1: f64, a2: f64) -> Result<Self, ModelError> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(ModelError::Utility(format!("lambda must lie in (0,1), got {lambda}")));
        }
        if !(a1 > 0.0 && a1 <= a2 && a2.is_finite()) {
            return Err(ModelError::Utility(format!("need 0 < A1 <= A2, got A1={a1}, A2={a2}")));
        }
        Ok(Self::Mixture { lambda, a1, a2 })
    }

    /// Lower and upper Arrow-Pratt bounds `(A₁, A₂)`.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Self::Cara { a } => (a, a),
            Self::Mixture { a1, a2, .. } => (a1, a2),
        }
    }

    /// `sup u`, approached as `x → ∞` and never attained.
    pub fn supremum(&self) -> f64 {
        match *self {
            Self::Cara { .. } => 0.0,
            Self::Mixture { lambda, a1, .. } => lambda / a1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Cara { a } => -(-a * x).exp(),
            Self::Mixture { lambda, a1, a2 } => {
                lambda * upper_envelope(a1, x) + (1.0 - lambda) * lower_envelope(a2, x)
            }
        }
    }

    pub fn prime(&self, x: f64) -> f64 {
        match *self {
            Self::Cara { a } => a * (-a * x).exp(),
            Self::Mixture { lambda, a1, a2 } => {
                lambda * a1 * (-a1 * x).exp() + (1.0 - lambda) * a2 * (-a2 * x).exp()
            }
        }
    }

    pub fn second(&self, x: f64) -> f64 {
        match *self {
            Self::Cara { a } => -a * a * (-a * x).exp(),
            Self::Mixture { lambda, a1, a2 } => {
                -lambda * a1 * a1 * (-a1 * x).exp() - (1.0 - lambda) * a2 * a2 * (-a2 * x).exp()
            }
        }
    }

    /// `-u''(x)/u'(x)`.
    pub fn arrow_pratt(&self, x: f64) -> f64 {
        match *self {
            Self::Cara { a } => a,
            Self::Mixture { lambda, a1, a2 } => {
                // factor out the dominant exponential to stay finite for large |x|
                let (e1, e2) = (-a1 * x, -a2 * x);
                let shift = e1.max(e2);
                let w1 = lambda * a1 * (e1 - shift).exp();
                let w2 = (1.0 - lambda) * a2 * (e2 - shift).exp();
                (a1 * w1 + a2 * w2) / (w1 + w2)
            }
        }
    }

    /// Upper CARA bound `u₁(x) = 1/A₁ - exp(-A₁x)`.
    pub fn upper_bound(&self, x: f64) -> f64 {
        upper_envelope(self.bounds().0, x)
    }

    /// Lower CARA bound `u₂(x) = -exp(-A₂x)`.
    pub fn lower_bound(&self, x: f64) -> f64 {
        lower_envelope(self.bounds().1, x)
    }

    /// `E[u(R)]` for Gaussian `R ~ N(mean, var)`, exact for this family.
    pub fn gaussian_expectation(&self, mean: f64, var: f64) -> f64 {
        let mgf = |a: f64| -(-a * mean + 0.5 * a * a * var).exp();
        match *self {
            Self::Cara { a } => mgf(a),
            Self::Mixture { lambda, a1, a2 } => lambda * (1.0 / a1 + mgf(a1)) + (1.0 - lambda) * mgf(a2),
        }
    }
}

pub(crate) fn upper_envelope(a1: f64, x: f64) -> f64 {
    1.0 / a1 - (-a1 * x).exp()
}

pub(crate) fn lower_envelope(a2: f64, x: f64) -> f64 {
    -(-a2 * x).exp()
}
