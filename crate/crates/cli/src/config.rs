//! Run configuration: parsing (TOML or JSON), defaults, validation and
//! dotted-key overrides used by sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_label")]
    pub label: String,
    /// Run directory; `--out` overrides it. Not part of the config hash.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub market: MarketSection,
    pub utility: UtilitySection,
    pub cost: CostSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_label() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Scalar or flat row-major list.
fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flat {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match Flat::deserialize(d)? {
        Flat::One(v) => vec![v],
        Flat::Many(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    #[serde(deserialize_with = "one_or_many")]
    pub sigma: Vec<f64>,
    #[serde(deserialize_with = "one_or_many", default = "zero_drift")]
    pub b: Vec<f64>,
}

fn zero_drift() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Cara,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    pub kind: UtilityKind,
    #[serde(rename = "A", default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(rename = "A1", default)]
    pub a1: Option<f64>,
    #[serde(rename = "A2", default)]
    pub a2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Quadratic,
    Power,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub kind: CostKind,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    /// CSV with `v,f` rows; relative paths resolve against the config file.
    #[serde(default)]
    pub table_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub n_r: usize,
    /// 0 selects adaptive steps.
    pub n_t: usize,
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub cfl: f64,
    pub beta: f64,
    pub scheme: fuelhjb_core::Scheme,
    pub lf_alpha_x: Option<f64>,
    pub lf_alpha_r: Option<f64>,
    #[serde(rename = "floor_M")]
    pub floor_m: Option<f64>,
    pub n_slices: usize,
    /// Number of stored slices written as CSV (always including τ = T).
    pub write_slices: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            x_min: -0.25,
            x_max: 1.25,
            n_x: 481,
            r_min: -4.0,
            r_max: 2.0,
            n_r: 201,
            n_t: 0,
            delta: 0.05,
            horizon: 1.0,
            cfl: 0.9,
            beta: 0.0,
            scheme: fuelhjb_core::Scheme::Upwind,
            lf_alpha_x: None,
            lf_alpha_r: None,
            floor_m: None,
            n_slices: 64,
            write_slices: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub x0: f64,
    pub r0: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed0: u64,
    /// Terminal window of forced liquidation; `delta` when unset.
    pub fuel_window: Option<f64>,
    /// Paths written as CSV.
    pub dump_paths: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            x0: 1.0,
            r0: 0.0,
            n_paths: 10_000,
            n_steps: 400,
            seed0: 0,
            fuel_window: None,
            dump_paths: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Elapsed times of the dynamic-programming checks; `[T/4, T/2]` when unset.
    pub dpp_times: Option<Vec<f64>>,
    /// Paths per dynamic-programming check; `sim.n_paths` when unset.
    pub dpp_paths: Option<usize>,
    pub oracle_intervals: usize,
    pub oracle_rel_tol: f64,
    pub sandwich_rel_tol: f64,
    pub consistency_factor: f64,
    pub jet_max_fraction: f64,
    /// Second damping coefficient for the β-commutation check.
    pub beta_check: Option<f64>,
    pub beta_factor: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            dpp_times: None,
            dpp_paths: None,
            oracle_intervals: 400,
            oracle_rel_tol: 0.02,
            sandwich_rel_tol: 0.02,
            consistency_factor: 5.0,
            jet_max_fraction: 0.01,
            beta_check: None,
            beta_factor: 10.0,
        }
    }
}

impl RunConfig {
    /// Reads a `.json` file as JSON and anything else as TOML, resolves the cost
    /// table path and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, path.extension().is_some_and(|e| e == "json"))?;
        if let Some(t) = &cfg.cost.table_path {
            if t.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.cost.table_path = Some(base.join(t));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        if json {
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
        }
    }

    /// Checks every range before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        let s = &self.solver;
        if self.market.sigma.len() != 1 || self.market.b.len() != 1 {
            return bad(format!(
                "market.sigma and market.b must describe one asset driven by one noise (got {} and {} entries)",
                self.market.sigma.len(),
                self.market.b.len()
            ));
        }
        if !self.market.sigma[0].is_finite() || !self.market.b[0].is_finite() {
            return bad("market.sigma and market.b must be finite".into());
        }
        match self.utility.kind {
            UtilityKind::Cara => {
                if !self.utility.a.is_some_and(|a| a > 0.0 && a.is_finite()) {
                    return bad("utility.A must be > 0 for kind = \"cara\"".into());
                }
            }
            UtilityKind::Mixture => {
                let (Some(l), Some(a1), Some(a2)) = (self.utility.lambda, self.utility.a1, self.utility.a2) else {
                    return bad("utility.lambda, utility.A1 and utility.A2 are required for kind = \"mixture\"".into());
                };
                if !(l > 0.0 && l < 1.0) {
                    return bad(format!("utility.lambda must lie in (0, 1), got {l}"));
                }
                if !(a1 > 0.0 && a1 <= a2 && a2.is_finite()) {
                    return bad(format!("need 0 < utility.A1 <= utility.A2, got A1 = {a1}, A2 = {a2}"));
                }
            }
        }
        let positive = |name: &str, v: Option<f64>| -> Result<(), CliError> {
            match v {
                Some(v) if v > 0.0 && v.is_finite() => Ok(()),
                _ => Err(CliError::Validation(format!("{name} must be > 0"))),
            }
        };
        match self.cost.kind {
            CostKind::Quadratic => positive("cost.eta", self.cost.eta)?,
            CostKind::Power => {
                positive("cost.eta", self.cost.eta)?;
                if !self.cost.p.is_some_and(|p| p > 1.0 && p.is_finite()) {
                    return bad("cost.p must be > 1".into());
                }
            }
            CostKind::Tabulated => match &self.cost.table_path {
                Some(p) if p.is_file() => {}
                Some(p) => return bad(format!("cost.table_path {} does not exist", p.display())),
                None => return bad("cost.table_path is required for kind = \"tabulated\"".into()),
            },
        }
        if !(s.delta > 0.0) {
            return bad(format!("solver.delta must be > 0, got {}", s.delta));
        }
        if !(s.delta < s.horizon) {
            return bad(format!(
                "solver.delta must be smaller than solver.T (delta < T), got delta = {}, T = {}",
                s.delta, s.horizon
            ));
        }
        if s.n_x < 3 || s.n_r < 3 {
            return bad(format!("solver.n_x and solver.n_r must be >= 3, got {} and {}", s.n_x, s.n_r));
        }
        if !(s.x_min < s.x_max && s.x_min <= 0.0 && s.x_max >= 0.0) {
            return bad("need solver.x_min <= 0 <= solver.x_max with x_min < x_max".into());
        }
        if !(s.r_min < s.r_max) {
            return bad("need solver.r_min < solver.r_max".into());
        }
        if !(s.cfl > 0.0 && s.cfl <= 1.0) {
            return bad(format!("solver.cfl must lie in (0, 1], got {}", s.cfl));
        }
        if !(s.beta <= 0.0 && s.beta.is_finite()) {
            return bad(format!("solver.beta must be <= 0, got {}", s.beta));
        }
        if let Some(b) = self.verify.beta_check {
            if !(b <= 0.0 && b.is_finite()) {
                return bad(format!("verify.beta_check must be <= 0, got {b}"));
            }
        }
        for (name, v) in [
            ("solver.lf_alpha_x", s.lf_alpha_x),
            ("solver.lf_alpha_r", s.lf_alpha_r),
        ] {
            if v.is_some() {
                positive(name, v)?;
            }
        }
        if s.floor_m.is_some_and(|f| !(f < 0.0 && f.is_finite())) {
            return bad("solver.floor_M must be negative".into());
        }
        if s.n_slices < 1 || s.write_slices < 1 {
            return bad("solver.n_slices and solver.write_slices must be >= 1".into());
        }
        let sim = &self.sim;
        if !(sim.x0 >= s.x_min && sim.x0 <= s.x_max && sim.r0 >= s.r_min && sim.r0 <= s.r_max) {
            return bad(format!(
                "initial state (sim.x0, sim.r0) = ({}, {}) lies outside the solver grid",
                sim.x0, sim.r0
            ));
        }
        if sim.n_paths < 2 {
            return bad(format!("sim.n_paths must be >= 2, got {}", sim.n_paths));
        }
        if sim.n_steps < 1 {
            return bad("sim.n_steps must be >= 1".into());
        }
        if let Some(w) = sim.fuel_window {
            if !(w >= 0.0 && w <= s.horizon) {
                return bad(format!("sim.fuel_window must lie in [0, T], got {w}"));
            }
        }
        let dt = s.horizon / sim.n_steps as f64;
        for t in self.dpp_times() {
            if !(t > 0.0 && t < s.horizon - s.delta) {
                return bad(format!("verify.dpp_times entry {t} must lie in (0, T - delta)"));
            }
            let k = t / dt;
            if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                return bad(format!("verify.dpp_times entry {t} is not a multiple of T / sim.n_steps"));
            }
        }
        if self.verify.dpp_paths.is_some_and(|n| n < 2) {
            return bad("verify.dpp_paths must be >= 2".into());
        }
        if self.verify.oracle_intervals < 2 {
            return bad("verify.oracle_intervals must be >= 2".into());
        }
        for (name, v) in [
            ("verify.oracle_rel_tol", self.verify.oracle_rel_tol),
            ("verify.sandwich_rel_tol", self.verify.sandwich_rel_tol),
            ("verify.consistency_factor", self.verify.consistency_factor),
            ("verify.jet_max_fraction", self.verify.jet_max_fraction),
            ("verify.beta_factor", self.verify.beta_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn dpp_times(&self) -> Vec<f64> {
        self.verify
            .dpp_times
            .clone()
            .unwrap_or_else(|| vec![0.25 * self.solver.horizon, 0.5 * self.solver.horizon])
    }

    pub fn fuel_window(&self) -> f64 {
        self.sim.fuel_window.unwrap_or(self.solver.delta)
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.canonical()).expect("config serializes"));
        if let Some(p) = &self.cost.table_path {
            // the table contents, not its location, define the run
            if let Ok(bytes) = std::fs::read(p) {
                h.update(&bytes);
            }
        }
        format!("{:x}", h.finalize())
    }

    /// The config as recorded in manifests: no output directory.
    pub fn canonical(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        v
    }

    /// Copy with the numeric key `key` (dotted, e.g. `solver.n_x`) set to `value`.
    pub fn with_value(&self, key: &str, value: &str) -> Result<Self, CliError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut v;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| CliError::Validation(format!("unknown config key {key:?}")))?;
        }
        if !(slot.is_number() || slot.is_null()) {
            return Err(CliError::Validation(format!("config key {key:?} is not numeric")));
        }
        *slot = parse_number(value)
            .ok_or_else(|| CliError::Validation(format!("value {value:?} for {key} is not a number")))?;
        let cfg: Self =
            serde_json::from_value(v).map_err(|e| CliError::Validation(format!("{key} = {value}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_number(s: &str) -> Option<serde_json::Value> {
    let s = s.trim();
    if let Ok(i) = s.parse::<i64>() {
        return Some(i.into());
    }
    s.parse::<f64>().ok().and_then(serde_json::Number::from_f64).map(Into::into)
}
