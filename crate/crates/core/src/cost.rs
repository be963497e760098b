//! Temporary-impact cost functions.
//!
//! A [`ConvexCost`] is a nonnegative, strictly convex, superlinear cost rate
//! `f(v)` with `f(0) = 0`, together with its Fenchel-Legendre conjugate
//!
//! ```text
//! f*(z) = sup_v ( v·z - f(v) )
//! ```
//!
//! and the inverse gradient `∇f* = (∇f)⁻¹`. The Hamiltonian of the control
//! problem is written through `f*`, and the feedback speed through `∇f*`.
//!
//! Quadratic and power costs have closed forms in any dimension (the power
//! cost is taken in the Euclidean norm). Tabulated costs are one-dimensional
//! and use monotone cubic (Fritsch-Carlson) interpolation between samples.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Golden-section tolerance (in `v`) for the tabulated conjugate.
const GOLDEN_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid cost parameter: {0}")]
    InvalidParameter(String),
    #[error("speed {v} outside tabulated domain [{lo}, {hi}]")]
    OutOfDomain { v: f64, lo: f64, hi: f64 },
    #[error("invalid cost table: {0}")]
    InvalidTable(String),
    #[error("tabulated costs are one-dimensional, got dimension {0}")]
    Dimension(usize),
    #[error("reading cost table {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Sampled cost on a symmetric interval, interpolated by monotone cubics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    v: Vec<f64>,
    f: Vec<f64>,
    slopes: Vec<f64>,
}

impl CostTable {
    pub fn new(v: Vec<f64>, f: Vec<f64>) -> Result<Self, CostError> {
        if v.len() != f.len() {
            return Err(CostError::InvalidTable("v and f lengths differ".into()));
        }
        if v.len() < 3 {
            return Err(CostError::InvalidTable("need at least 3 samples".into()));
        }
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CostError::InvalidTable("v must be strictly increasing".into()));
        }
        if v.iter().chain(f.iter()).any(|x| !x.is_finite()) {
            return Err(CostError::InvalidTable("non-finite sample".into()));
        }
        let (lo, hi) = (v[0], v[v.len() - 1]);
        if lo >= 0.0 || hi <= 0.0 || (lo + hi).abs() > 1e-9 * hi.max(1.0) {
            return Err(CostError::InvalidTable(format!(
                "domain [{lo}, {hi}] must be symmetric around 0"
            )));
        }
        if f.iter().any(|&y| y < 0.0) {
            return Err(CostError::InvalidTable("f must be nonnegative".into()));
        }
        let secants: Vec<f64> = v
            .windows(2)
            .zip(f.windows(2))
            .map(|(vw, fw)| (fw[1] - fw[0]) / (vw[1] - vw[0]))
            .collect();
        if secants.windows(2).any(|s| s[1] <= s[0]) {
            return Err(CostError::InvalidTable(
                "samples are not strictly convex (secant slopes must increase)".into(),
            ));
        }
        let slopes = pchip_slopes(&v, &secants);
        let table = Self { v, f, slopes };
        let f0 = table.eval(0.0)?;
        if f0.abs() > 1e-10 {
            return Err(CostError::InvalidTable(format!("f(0) = {f0}, expected 0")));
        }
        // superlinear growth at the sample points
        let ratio = |x: f64, y: f64| y / x.abs();
        let n = table.v.len();
        let (small_i, _) = table
            .v
            .iter()
            .enumerate()
            .filter(|(_, x)| x.abs() > 0.0)
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("table has nonzero samples");
        let big = ratio(table.v[0], table.f[0]).min(ratio(table.v[n - 1], table.f[n - 1]));
        if big <= ratio(table.v[small_i], table.f[small_i]) {
            return Err(CostError::InvalidTable("f(v)/|v| does not grow".into()));
        }
        Ok(table)
    }

    /// Reads a `v,f` CSV (header optional).
    pub fn from_csv(path: &Path) -> Result<Self, CostError> {
        let io_err = |msg: String| CostError::Io {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io_err(e.to_string()))?;
        let mut v = Vec::new();
        let mut f = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = match (cols.next(), cols.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(io_err(format!("line {}: expected `v,f`", lineno + 1))),
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    v.push(x);
                    f.push(y);
                }
                _ if lineno == 0 => continue,
                _ => return Err(io_err(format!("line {}: not numeric", lineno + 1))),
            }
        }
        Self::new(v, f)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.v[0], self.v[self.v.len() - 1])
    }

    pub fn samples(&self) -> (&[f64], &[f64]) {
        (&self.v, &self.f)
    }

    fn locate(&self, x: f64) -> Result<usize, CostError> {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&x) {
            return Err(CostError::OutOfDomain { v: x, lo, hi });
        }
        let k = self.v.partition_point(|&s| s <= x);
        Ok(k.saturating_sub(1).min(self.v.len() - 2))
    }

    pub fn eval(&self, x: f64) -> Result<f64, CostError> {
        let k = self.locate(x)?;
        let h = self.v[k + 1] - self.v[k];
        let t = (x - self.v[k]) / h;
        let (h00, h10, h01, h11) = hermite_basis(t);
        Ok(h00 * self.f[k] + h10 * h * self.slopes[k] + h01 * self.f[k + 1] + h11 * h * self.slopes[k + 1])
    }

    pub fn derivative(&self, x: f64) -> Result<f64, CostError> {
        let k = self.locate(x)?;
        let h = self.v[k + 1] - self.v[k];
        let t = (x - self.v[k]) / h;
        let d00 = 6.0 * t * t - 6.0 * t;
        let d10 = 3.0 * t * t - 4.0 * t + 1.0;
        let d01 = -d00;
        let d11 = 3.0 * t * t - 2.0 * t;
        Ok((d00 * self.f[k] + d01 * self.f[k + 1]) / h + d10 * self.slopes[k] + d11 * self.slopes[k + 1])
    }

    fn conjugate(&self, z: f64) -> f64 {
        let objective = |x: f64| x * z - self.eval(x).unwrap_or(f64::INFINITY);
        let (k_best, _) = self
            .v
            .iter()
            .zip(&self.f)
            .map(|(x, y)| x * z - y)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, g)| if g > acc.1 { (k, g) } else { acc });
        let lo = self.v[k_best.saturating_sub(1)];
        let hi = self.v[(k_best + 1).min(self.v.len() - 1)];
        let x = golden_section_max(objective, lo, hi, GOLDEN_TOL);
        objective(x).max(self.v[k_best] * z - self.f[k_best])
    }
}

fn hermite_basis(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    )
}

/// Fritsch-Carlson monotone slopes.
fn pchip_slopes(v: &[f64], secants: &[f64]) -> Vec<f64> {
    let n = v.len();
    let h: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (s0, s1) = (secants[k - 1], secants[k]);
        if s0 * s1 > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / s0 + w2 / s1);
        }
    }
    let end = |h0: f64, h1: f64, s0: f64, s1: f64| {
        let mut dd = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
        if dd * s0 <= 0.0 {
            dd = 0.0;
        } else if s0 * s1 <= 0.0 && dd.abs() > 3.0 * s0.abs() {
            dd = 3.0 * s0;
        }
        dd
    };
    d[0] = end(h[0], h[1], secants[0], secants[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], secants[n - 2], secants[n - 3]);
    d
}

/// Maximizes a unimodal function on `[lo, hi]`.
pub(crate) fn golden_section_max<F: Fn(f64) -> f64>(g: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut ga, mut gb) = (g(a), g(b));
    while hi - lo > tol {
        if ga < gb {
            lo = a;
            a = b;
            ga = gb;
            b = lo + inv_phi * (hi - lo);
            gb = g(b);
        } else {
            hi = b;
            b = a;
            gb = ga;
            a = hi - inv_phi * (hi - lo);
            ga = g(a);
        }
    }
    0.5 * (lo + hi)
}

/// Strictly convex, superlinear temporary-impact cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConvexCost {
    /// `f(v) = η |v|²`
    Quadratic { eta: f64 },
    /// `f(v) = η |v|^p`, `p > 1`
    Power { p: f64, eta: f64 },
    Tabulated(CostTable),
}

impl ConvexCost {
    pub fn quadratic(eta: f64) -> Result<Self, CostError> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(CostError::InvalidParameter(format!("eta must be > 0, got {eta}")));
        }
        Ok(Self::Quadratic { eta })
    }

    pub fn power(p: f64, eta: f64) -> Result<Self, CostError> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(CostError::InvalidParameter(format!("p must be > 1, got {p}")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(CostError::InvalidParameter(format!("eta must be > 0, got {eta}")));
        }
        Ok(Self::Power { p, eta })
    }

    pub fn tabulated(v: Vec<f64>, f: Vec<f64>) -> Result<Self, CostError> {
        CostTable::new(v, f).map(Self::Tabulated)
    }

    pub fn has_closed_form(&self) -> bool {
        !matches!(self, Self::Tabulated(_))
    }

    /// Scalar cost rate `f(v)`.
    pub fn eval(&self, v: f64) -> Result<f64, CostError> {
        match self {
            Self::Quadratic { eta } => Ok(eta * v * v),
            Self::Power { p, eta } => Ok(eta * v.abs().powf(*p)),
            Self::Tabulated(t) => t.eval(v),
        }
    }

    /// Scalar `f'(v)`.
    pub fn grad(&self, v: f64) -> Result<f64, CostError> {
        match self {
            Self::Quadratic { eta } => Ok(2.0 * eta * v),
            Self::Power { p, eta } => Ok(p * eta * v.abs().powf(p - 1.0) * v.signum()),
            Self::Tabulated(t) => t.derivative(v),
        }
    }

    /// Scalar conjugate `f*(z)`.
    pub fn conjugate(&self, z: f64) -> f64 {
        match self {
            Self::Quadratic { eta } => z * z / (4.0 * eta),
            Self::Power { p, eta } => {
                let a = z.abs();
                (1.0 - 1.0 / p) * a * (a / (p * eta)).powf(1.0 / (p - 1.0))
            }
            Self::Tabulated(t) => t.conjugate(z),
        }
    }

    /// Scalar `(f*)'(z)`, the speed whose marginal cost equals `z`.
    pub fn grad_conjugate(&self, z: f64) -> f64 {
        match self {
            Self::Quadratic { eta } => z / (2.0 * eta),
            Self::Power { p, eta } => (z.abs() / (p * eta)).powf(1.0 / (p - 1.0)) * z.signum(),
            Self::Tabulated(t) => {
                let h = 1e-5 * (1.0 + z.abs());
                (t.conjugate(z + h) - t.conjugate(z - h)) / (2.0 * h)
            }
        }
    }

    /// `f(v)` for a speed vector.
    pub fn eval_vec(&self, v: &[f64]) -> Result<f64, CostError> {
        match self {
            Self::Tabulated(_) if v.len() != 1 => Err(CostError::Dimension(v.len())),
            Self::Tabulated(t) => t.eval(v[0]),
            Self::Quadratic { eta } => Ok(eta * norm_sq(v)),
            Self::Power { p, eta } => Ok(eta * norm_sq(v).sqrt().powf(*p)),
        }
    }

    /// `∇f(v)` written into `out`.
    pub fn grad_vec(&self, v: &[f64], out: &mut [f64]) -> Result<(), CostError> {
        match self {
            Self::Tabulated(_) if v.len() != 1 => return Err(CostError::Dimension(v.len())),
            Self::Tabulated(t) => out[0] = t.derivative(v[0])?,
            Self::Quadratic { eta } => out.iter_mut().zip(v).for_each(|(o, x)| *o = 2.0 * eta * x),
            Self::Power { p, eta } => {
                let n = norm_sq(v).sqrt();
                let scale = if n > 0.0 { p * eta * n.powf(p - 2.0) } else { 0.0 };
                out.iter_mut().zip(v).for_each(|(o, x)| *o = scale * x);
            }
        }
        Ok(())
    }

    pub fn conjugate_vec(&self, z: &[f64]) -> Result<f64, CostError> {
        match self {
            Self::Tabulated(_) if z.len() != 1 => Err(CostError::Dimension(z.len())),
            Self::Tabulated(_) => Ok(self.conjugate(z[0])),
            _ => Ok(self.conjugate(norm_sq(z).sqrt())),
        }
    }

    pub fn grad_conjugate_vec(&self, z: &[f64], out: &mut [f64]) -> Result<(), CostError> {
        match self {
            Self::Tabulated(_) if z.len() != 1 => return Err(CostError::Dimension(z.len())),
            Self::Tabulated(_) => out[0] = self.grad_conjugate(z[0]),
            Self::Quadratic { eta } => out.iter_mut().zip(z).for_each(|(o, x)| *o = x / (2.0 * eta)),
            Self::Power { .. } => {
                let n = norm_sq(z).sqrt();
                let scale = if n > 0.0 { self.grad_conjugate(n) / n } else { 0.0 };
                out.iter_mut().zip(z).for_each(|(o, x)| *o = scale * x);
            }
        }
        Ok(())
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn brute_conjugate(f: impl Fn(f64) -> f64, z: f64, lo: f64, hi: f64, n: usize) -> f64 {
        (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .map(|v| v * z - f(v))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn bisect_grad_inverse(cost: &ConvexCost, z: f64) -> f64 {
        let (mut lo, mut hi) = (-100.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cost.grad(mid).unwrap() < z {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn square_table() -> ConvexCost {
        let v: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.02).collect();
        let f = v.iter().map(|x| x * x).collect();
        ConvexCost::tabulated(v, f).unwrap()
    }

    #[test]
    fn eval_examples() {
        let q = ConvexCost::quadratic(1.0).unwrap();
        assert_eq!(q.eval(0.0).unwrap(), 0.0);
        assert_eq!(q.eval(2.0).unwrap(), 4.0);
        let p = ConvexCost::power(3.0, 1.0 / 3.0).unwrap();
        assert_abs_diff_eq!(p.eval(-2.0).unwrap(), 8.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn conjugate_examples() {
        let q = ConvexCost::quadratic(1.0).unwrap();
        assert_eq!(q.conjugate(2.0), 1.0);
        for c in [q, ConvexCost::power(3.0, 1.0 / 3.0).unwrap(), square_table()] {
            assert_eq!(c.conjugate(0.0), 0.0);
        }
        // brute force over a fine grid: sup_v (v - v²) = 0.25
        let oracle = brute_conjugate(|v| v * v, 1.0, -4.0, 4.0, 400_000);
        assert_abs_diff_eq!(oracle, 0.25, epsilon = 1e-9);
        assert_abs_diff_eq!(square_table().conjugate(1.0), oracle, epsilon = 1e-6);
    }

    #[test]
    fn power_conjugate_matches_brute_force() {
        let c = ConvexCost::power(1.5, 0.7).unwrap();
        for z in [-2.0, -0.3, 0.4, 1.7] {
            let oracle = brute_conjugate(|v| 0.7 * v.abs().powf(1.5), z, -20.0, 20.0, 2_000_000);
            assert_abs_diff_eq!(c.conjugate(z), oracle, epsilon = 1e-6);
        }
    }

    #[test]
    fn grad_conjugate_examples() {
        let q = ConvexCost::quadratic(1.0).unwrap();
        assert_eq!(q.grad_conjugate(2.0), 1.0);
        let q2 = ConvexCost::quadratic(2.0).unwrap();
        assert_abs_diff_eq!(q2.grad_conjugate(q2.grad(0.7).unwrap()), 0.7, epsilon = 1e-15);
        let p = ConvexCost::power(3.0, 1.0 / 3.0).unwrap();
        let oracle = bisect_grad_inverse(&p, 3.0);
        assert_abs_diff_eq!(oracle, 3f64.sqrt(), epsilon = 1e-10);
        assert_abs_diff_eq!(p.grad_conjugate(3.0), oracle, epsilon = 1e-10);
    }

    #[test]
    fn tabulated_out_of_domain() {
        let t = square_table();
        assert!(matches!(t.eval(4.5), Err(CostError::OutOfDomain { .. })));
        assert!(t.eval(-4.0).is_ok());
    }

    #[test]
    fn tabulated_grad_conjugate_inverts_derivative() {
        let t = square_table();
        for v in [-1.3, -0.2, 0.0, 0.45, 1.9] {
            let z = t.grad(v).unwrap();
            assert_abs_diff_eq!(t.grad_conjugate(z), v, epsilon = 1e-4);
        }
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(ConvexCost::tabulated(vec![-2.0, -1.0, 0.0, 1.0, 2.0], vec![4.0, 1.0, 0.0, 0.5, 3.0]).is_ok());
        let v = vec![-1.0, 0.0, 1.0];
        assert!(ConvexCost::tabulated(v.clone(), vec![1.0, 0.1, 1.0]).is_err());
        assert!(ConvexCost::tabulated(v.clone(), vec![1.0, 0.0, 0.0]).is_err());
        assert!(ConvexCost::tabulated(vec![-1.0, 0.0, 2.0], vec![1.0, 0.0, 4.0]).is_err());
        assert!(ConvexCost::tabulated(vec![0.0, -1.0, 1.0], vec![0.0, 1.0, 1.0]).is_err());
        let v: Vec<f64> = (-4..=4).map(f64::from).collect();
        let f: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        assert!(ConvexCost::tabulated(v, f).is_err());
        assert!(ConvexCost::quadratic(0.0).is_err());
        assert!(ConvexCost::power(1.0, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("fuelhjb-cost-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.csv");
        std::fs::write(&path, "v,f\n-2,4\n-1,1\n0,0\n1,1\n2,4\n").unwrap();
        let c = CostTable::from_csv(&path).unwrap();
        assert_eq!(c.domain(), (-2.0, 2.0));
        assert_abs_diff_eq!(c.eval(1.0).unwrap(), 1.0, epsilon = 1e-14);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn vector_forms_reduce_to_scalar() {
        let p = ConvexCost::power(2.5, 0.4).unwrap();
        let v = [0.3, -0.4];
        assert_abs_diff_eq!(p.eval_vec(&v).unwrap(), p.eval(0.5).unwrap(), epsilon = 1e-14);
        let mut g = [0.0; 2];
        p.grad_vec(&v, &mut g).unwrap();
        let mut back = [0.0; 2];
        p.grad_conjugate_vec(&g, &mut back).unwrap();
        assert_abs_diff_eq!(back[0], v[0], epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], v[1], epsilon = 1e-12);
        assert!(square_table().eval_vec(&v).is_err());
    }
}
