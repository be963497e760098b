//! Staged solve → extract → simulate → verify pipeline writing one run directory.

use std::collections::BTreeMap;

use fuelhjb_core::oracle::{cara_upper_value, cara_value, lq_closed_form, lq_rate};
use fuelhjb_core::policy::{extract_policy, simulate_batch, StraightLine};
use fuelhjb_core::solver::{residual, solve, Grid, SolverConfig};
use fuelhjb_core::verify::{
    admissibility_check, beta_commutation_check, calibrate_jet_constant, deterministic_moment, dpp_check,
    dpp_upper_check, feedback_consistency_check, grid_allowance, sandwich_check, utility_estimate,
    viscosity_jet_check, DppSetup, Manufactured,
};
use fuelhjb_core::{
    CaraEnvelope, CheckReport, ConvexCost, CostTable, FeedbackPolicy, MarketModel, OracleSummary, PathRecord,
    SimSettings, Utility, ValueField,
};
use serde::Serialize;

use crate::artifacts::{ArtifactSink, Csv};
use crate::config::{CostKind, RunConfig, UtilityKind};
use crate::CliError;

/// How far a command runs; each stage includes the previous ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Solve,
    Simulate,
    Verify,
    Run,
}

/// Market, utility and cost built from a validated config.
#[derive(Debug, Clone)]
pub struct Model {
    pub market: MarketModel,
    pub utility: Utility,
    pub cost: ConvexCost,
}

impl Model {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        let invalid = |e: String| CliError::Validation(e);
        let market =
            MarketModel::scalar(cfg.market.sigma[0], cfg.market.b[0]).map_err(|e| invalid(e.to_string()))?;
        let u = &cfg.utility;
        let utility = match u.kind {
            UtilityKind::Cara => Utility::cara(u.a.unwrap_or(f64::NAN)),
            UtilityKind::Mixture => Utility::mixture(
                u.lambda.unwrap_or(f64::NAN),
                u.a1.unwrap_or(f64::NAN),
                u.a2.unwrap_or(f64::NAN),
            ),
        }
        .map_err(|e| invalid(e.to_string()))?;
        let c = &cfg.cost;
        let cost = match c.kind {
            CostKind::Quadratic => ConvexCost::quadratic(c.eta.unwrap_or(f64::NAN)),
            CostKind::Power => ConvexCost::power(c.p.unwrap_or(f64::NAN), c.eta.unwrap_or(f64::NAN)),
            CostKind::Tabulated => {
                let path = c.table_path.as_deref().ok_or_else(|| invalid("cost.table_path missing".into()))?;
                CostTable::from_csv(path).map(ConvexCost::Tabulated)
            }
        }
        .map_err(|e| invalid(e.to_string()))?;
        Ok(Self { market, utility, cost })
    }

    /// Effective quadratic coefficient used for the manufactured jet calibration.
    fn eta(&self) -> f64 {
        match self.cost {
            ConvexCost::Quadratic { eta } | ConvexCost::Power { eta, .. } => eta,
            ConvexCost::Tabulated(_) => 1.0,
        }
    }
}

pub fn solver_config(cfg: &RunConfig) -> SolverConfig {
    let s = &cfg.solver;
    let mut sc = SolverConfig::new(Grid {
        x_min: s.x_min,
        x_max: s.x_max,
        n_x: s.n_x,
        r_min: s.r_min,
        r_max: s.r_max,
        n_r: s.n_r,
        t_init: s.delta,
        horizon: s.horizon,
        n_t: s.n_t,
    });
    sc.cfl = s.cfl;
    sc.beta = s.beta;
    sc.scheme = s.scheme;
    sc.lf_alpha_x = s.lf_alpha_x;
    sc.lf_alpha_r = s.lf_alpha_r;
    sc.floor_m = s.floor_m;
    sc.n_slices = s.n_slices;
    sc
}

pub fn sim_settings(cfg: &RunConfig) -> SimSettings {
    SimSettings {
        horizon: cfg.solver.horizon,
        n_steps: cfg.sim.n_steps,
        fuel_window: cfg.fuel_window(),
    }
}

/// Seed of the `idx`-th dynamic-programming check; disjoint from the main batch.
pub fn dpp_seed(seed0: u64, idx: usize) -> u64 {
    seed0.wrapping_add((idx as u64 + 1) << 32)
}

#[derive(Debug, Clone, Serialize)]
struct StageRecord {
    stage: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct SolveSummary {
    field_value: f64,
    n_t: usize,
    dt_min: f64,
    dt_max: f64,
    floor_m: f64,
    alpha_x: f64,
    alpha_r: f64,
    retries: usize,
    stored_slices: usize,
    residual_mean_relative: f64,
    residual_max_relative: f64,
    residual_degenerate: usize,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest {
    format: u32,
    label: String,
    command: Stage,
    config_hash: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    versions: BTreeMap<&'static str, &'static str>,
    stages: Vec<StageRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solve: Option<SolveSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checks_passed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checks_total: Option<usize>,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
struct Report<'a> {
    label: &'a str,
    config_hash: &'a str,
    seeds: &'a BTreeMap<String, u64>,
    all_pass: bool,
    checks: &'a [CheckReport],
}

#[derive(Debug, Clone, Serialize)]
struct OracleEntry {
    a: f64,
    min_cost: f64,
    value: f64,
    upper_value: f64,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_sup_distance: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct OracleFile {
    x0: f64,
    r0: f64,
    horizon: f64,
    field_value: f64,
    envelope_lower: f64,
    envelope_upper: f64,
    cara: Vec<OracleEntry>,
}

/// What a run produced, for callers that aggregate runs.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub field_value: Option<f64>,
    /// `V₂(T, x₀, r₀)`: the CARA value itself for CARA utilities.
    pub oracle_value: Option<f64>,
    pub oracle_upper: Option<f64>,
    pub reports: Vec<CheckReport>,
    pub config_hash: String,
}

impl RunOutcome {
    pub fn passed(&self) -> usize {
        self.reports.iter().filter(|r| r.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }
}

struct State<'a> {
    cfg: &'a RunConfig,
    model: &'a Model,
    sink: ArtifactSink,
    seeds: BTreeMap<String, u64>,
    summary: Option<SolveSummary>,
    reports: Vec<CheckReport>,
    oracle: Option<(f64, f64)>,
}

/// Validates, then runs the pipeline up to `stage` into `cfg.output_dir`.
/// A failing stage is recorded in the manifest and returned as a compute error;
/// failing checks are not errors here (see [`RunOutcome::all_pass`]).
pub fn execute(cfg: &RunConfig, stage: Stage) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let model = Model::from_config(cfg)?;
    let sink = ArtifactSink::create(&cfg.output_dir)?;
    let mut st = State {
        cfg,
        model: &model,
        sink,
        seeds: BTreeMap::from([("sim.seed0".to_string(), cfg.sim.seed0)]),
        summary: None,
        reports: Vec::new(),
        oracle: None,
    };
    let mut stages = Vec::new();
    let mut failure = None;
    let mut record = |name: &'static str, res: Result<(), CliError>, failure: &mut Option<CliError>| {
        let error = res.err();
        stages.push(StageRecord {
            stage: name,
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.as_ref().map(|e| e.to_string()),
        });
        if let Some(e) = error {
            *failure = Some(e);
        }
    };

    let field = match solve(&solver_config(cfg), &model.market, &model.utility, &model.cost) {
        Ok(f) => Some(f),
        Err(e) => {
            record("solve", Err(CliError::Compute(e.to_string())), &mut failure);
            None
        }
    };
    if let Some(field) = &field {
        let policy = extract_policy(field, &model.cost).map_err(|e| CliError::Compute(e.to_string()));
        let res = policy.as_ref().map_err(Clone::clone).and_then(|p| stage_solve(&mut st, field, p));
        record("solve", res, &mut failure);
        if let (Ok(policy), None) = (&policy, &failure) {
            let mut paths = None;
            if stage >= Stage::Simulate {
                let res = simulate_batch(
                    policy,
                    &model.market,
                    &model.cost,
                    cfg.sim.x0,
                    cfg.sim.r0,
                    &sim_settings(cfg),
                    cfg.sim.seed0,
                    cfg.sim.n_paths,
                )
                .map_err(|e| CliError::Compute(e.to_string()))
                .and_then(|p| {
                    stage_simulate(&mut st, &p)?;
                    Ok(p)
                });
                match res {
                    Ok(p) => {
                        paths = Some(p);
                        record("simulate", Ok(()), &mut failure);
                    }
                    Err(e) => record("simulate", Err(e), &mut failure),
                }
            }
            if let (Some(paths), true, None) = (&paths, stage >= Stage::Verify, &failure) {
                let res = stage_verify(&mut st, field, policy, paths);
                record("verify", res, &mut failure);
            }
            if stage == Stage::Run && failure.is_none() {
                let res = stage_extras(&mut st, field);
                record("artifacts", res, &mut failure);
            }
        }
    }

    let hash = cfg.hash();
    let manifest = Manifest {
        format: 1,
        label: cfg.label.clone(),
        command: stage,
        config_hash: hash.clone(),
        config: cfg.canonical(),
        seeds: st.seeds.clone(),
        versions: BTreeMap::from([
            ("fuelhjb-core", fuelhjb_core::VERSION),
            ("fuelhjb-cli", env!("CARGO_PKG_VERSION")),
        ]),
        stages,
        solve: st.summary.clone(),
        checks_passed: (stage >= Stage::Verify).then(|| st.reports.iter().filter(|r| r.pass).count()),
        checks_total: (stage >= Stage::Verify).then_some(st.reports.len()),
        files: st.sink.files().clone(),
    };
    st.sink.write_json("manifest.json", &manifest)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunOutcome {
        field_value: st.summary.as_ref().map(|s| s.field_value),
        oracle_value: st.oracle.map(|o| o.0),
        oracle_upper: st.oracle.map(|o| o.1),
        reports: st.reports,
        config_hash: hash,
    })
}

fn compute<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Compute(e.to_string())
}

/// Indices of the stored slices written to CSV: evenly spread, last one is τ = T.
fn written_slices(field: &ValueField, count: usize) -> Vec<usize> {
    let n = field.n_slices();
    let mut ks: Vec<usize> = if count <= 1 {
        vec![n - 1]
    } else {
        (0..count).map(|l| (l * (n - 1) + (count - 1) / 2) / (count - 1)).collect()
    };
    ks.dedup();
    ks
}

fn stage_solve(st: &mut State<'_>, field: &ValueField, policy: &FeedbackPolicy<'_>) -> Result<(), CliError> {
    let cfg = st.cfg;
    let g = &field.grid;
    let field_value = field.interpolate(g.horizon, cfg.sim.x0, cfg.sim.r0).map_err(compute)?;
    let res = residual(field, &st.model.market, &st.model.cost).map_err(compute)?;
    st.summary = Some(SolveSummary {
        field_value,
        n_t: field.stats.n_t,
        dt_min: field.stats.dt_min,
        dt_max: field.stats.dt_max,
        floor_m: field.stats.floor_m,
        alpha_x: field.stats.alpha_x,
        alpha_r: field.stats.alpha_r,
        retries: field.stats.retries,
        stored_slices: field.n_slices(),
        residual_mean_relative: res.mean_relative,
        residual_max_relative: res.max_relative,
        residual_degenerate: res.degenerate,
    });
    let mut pol = Csv::new(&["t", "x", "r", "xi"]);
    for k in written_slices(field, cfg.solver.write_slices) {
        let tau = field.times[k];
        let mut csv = Csv::new(&["t", "x", "r", "w"]);
        for i in 0..g.n_x {
            for j in 0..g.n_r {
                csv.row(&[tau, g.x(i), g.r(j), field.at(k, i, j)]);
                let xi = st.model.cost.grad_conjugate(policy.node_ratio(k, i, j));
                pol.row(&[tau, g.x(i), g.r(j), xi]);
            }
        }
        st.sink.write_csv(&format!("value_slice_{k:03}.csv"), csv)?;
    }
    st.sink.write_csv("policy_field.csv", pol)
}

#[derive(Debug, Clone, Serialize)]
struct BatchSummary {
    seed0: u64,
    n_paths: usize,
    n_steps: usize,
    fuel_window: f64,
    truncated: usize,
    truncated_seeds: Vec<u64>,
    dumped: usize,
}

fn stage_simulate(st: &mut State<'_>, paths: &[PathRecord]) -> Result<(), CliError> {
    let cfg = st.cfg;
    let dumped = cfg.sim.dump_paths.min(paths.len());
    for p in &paths[..dumped] {
        let mut csv = Csv::new(&["k", "t", "x", "r", "xi"]);
        for k in 0..p.times.len() {
            // no trading after the last step
            let xi = p.xi.get(k).copied().unwrap_or(0.0);
            csv.row(&[k as f64, p.times[k], p.x[k], p.r[k], xi]);
        }
        st.sink.write_csv(&format!("paths/path_{:06}.csv", p.seed - cfg.sim.seed0), csv)?;
    }
    let truncated_seeds: Vec<u64> = paths.iter().filter(|p| p.is_truncated()).map(|p| p.seed).collect();
    let summary = BatchSummary {
        seed0: cfg.sim.seed0,
        n_paths: paths.len(),
        n_steps: cfg.sim.n_steps,
        fuel_window: cfg.fuel_window(),
        truncated: truncated_seeds.len(),
        truncated_seeds,
        dumped,
    };
    st.sink.write_json("simulation.json", &summary)
}

/// CARA optima for every distinct risk aversion bounding the utility.
fn oracles(st: &State<'_>) -> Result<Vec<OracleSummary>, CliError> {
    let cfg = st.cfg;
    let (a1, a2) = st.model.utility.bounds();
    let mut aas = vec![a1];
    if a2 != a1 {
        aas.push(a2);
    }
    aas.iter()
        .map(|&a| {
            cara_value(
                a,
                cfg.solver.horizon,
                &[cfg.sim.x0],
                cfg.sim.r0,
                &st.model.market,
                &st.model.cost,
                cfg.verify.oracle_intervals,
            )
            .map_err(compute)
        })
        .collect()
}

fn stage_verify(
    st: &mut State<'_>,
    field: &ValueField,
    policy: &FeedbackPolicy<'_>,
    paths: &[PathRecord],
) -> Result<(), CliError> {
    let cfg = st.cfg;
    let m = st.model;
    let g = field.grid;
    let (a1, a2) = m.utility.bounds();
    let w0 = field.interpolate(g.horizon, cfg.sim.x0, cfg.sim.r0).map_err(compute)?;
    let mut reports = Vec::new();

    let envelope =
        CaraEnvelope::new(&m.utility, &m.market, &m.cost, g.t_init, g.horizon, &g.xs()).map_err(compute)?;
    let env_scale = (field.beta * g.horizon).exp();
    st.oracle = Some((
        env_scale * envelope.lower(g.horizon, cfg.sim.x0, cfg.sim.r0),
        env_scale * envelope.upper(g.horizon, cfg.sim.x0, cfg.sim.r0),
    ));
    let opt = oracles(st)?;
    let opt_a2 = opt.last().expect("at least one oracle");
    if a1 == a2 {
        let exact = env_scale * opt_a2.value;
        let gap = (w0 - exact).abs() / exact.abs();
        reports.push(CheckReport::new(
            "oracle_gap",
            gap,
            cfg.verify.oracle_rel_tol,
            vec![
                format!("field_value={w0:.10e}"),
                format!("oracle_value={exact:.10e}"),
                format!("oracle_iterations={}", opt_a2.iterations),
            ],
        ));
    }
    reports.push(sandwich_check(field, &envelope, cfg.verify.sandwich_rel_tol));
    reports.push(feedback_consistency_check(field, policy, &m.cost, cfg.verify.consistency_factor).map_err(compute)?);

    let (_, cov) = m.market.scalar_params().expect("scalar market");
    let mf = Manufactured {
        a: a2,
        kappa: lq_rate(a2, m.eta(), cov),
        beta: field.beta,
    };
    let c_v = calibrate_jet_constant(field, &mf, &m.market, &m.cost).map_err(compute)?;
    let jets = viscosity_jet_check(field, &m.market, &m.cost, c_v, cfg.verify.jet_max_fraction).map_err(compute)?;
    reports.push(jets.report);

    let not_liquidated = paths.iter().filter(|p| p.x.last() != Some(&0.0)).count();
    reports.push(CheckReport::new(
        "fuel_constraint",
        not_liquidated as f64 / paths.len() as f64,
        0.0,
        vec![format!("paths={}", paths.len()), format!("nonzero_terminal_position={not_liquidated}")],
    ));

    let est = utility_estimate(paths, &m.utility).map_err(compute)?;
    let allowance = grid_allowance(field, w0);
    let mut details = vec![
        format!("estimate={:.8e}", est.mean),
        format!("stderr={:.3e}", est.stderr),
        format!("w0={w0:.8e}"),
        format!("allowance={allowance:.3e}"),
        format!("paths_used={}", est.used),
        format!("paths_excluded={}", est.truncated),
    ];
    details.extend(est.warning.clone());
    // with β ≠ 0 the field is e^{βT} times the expected utility
    let target = w0 * (-field.beta * g.horizon).exp();
    reports.push(CheckReport::new(
        "mc_value",
        (est.mean - target).abs() / (3.0 * est.stderr + allowance * (-field.beta * g.horizon).exp()),
        1.0,
        details,
    ));

    if field.beta == 0.0 {
        let straight = StraightLine {
            x0: cfg.sim.x0,
            horizon: g.horizon,
        };
        for (idx, t_bar) in cfg.dpp_times().into_iter().enumerate() {
            let seed = dpp_seed(cfg.sim.seed0, idx);
            st.seeds.insert(format!("dpp_t{t_bar}"), seed);
            let setup = DppSetup {
                x0: cfg.sim.x0,
                r0: cfg.sim.r0,
                t_bar,
                settings: sim_settings(cfg),
                n_paths: cfg.verify.dpp_paths.unwrap_or(cfg.sim.n_paths),
                seed0: seed,
            };
            reports.push(dpp_check(field, policy, &m.market, &m.cost, &setup, None).map_err(compute)?);
            reports.push(dpp_upper_check(field, &straight, &m.market, &m.cost, &setup, None).map_err(compute)?);
        }

        let bound = deterministic_moment(&opt_a2.trajectory, 2.0 * a2, cfg.sim.r0, &m.market, &m.cost)
            .map_err(compute)?
            + 1.0;
        reports.push(admissibility_check(paths, a2, bound));
    }

    if let Some(beta) = cfg.verify.beta_check {
        let mut sc = solver_config(cfg);
        sc.beta = beta;
        let other = solve(&sc, &m.market, &m.utility, &m.cost).map_err(compute)?;
        reports.push(beta_commutation_check(field, &other, cfg.verify.beta_factor).map_err(compute)?);
    }

    let all_pass = reports.iter().all(|r| r.pass);
    st.sink.write_json(
        "report.json",
        &Report {
            label: &cfg.label,
            config_hash: &cfg.hash(),
            seeds: &st.seeds,
            all_pass,
            checks: &reports,
        },
    )?;
    st.reports = reports;
    Ok(())
}

fn stage_extras(st: &mut State<'_>, field: &ValueField) -> Result<(), CliError> {
    let cfg = st.cfg;
    let m = st.model;
    let g = field.grid;
    let field_value = field.interpolate(g.horizon, cfg.sim.x0, cfg.sim.r0).map_err(compute)?;
    let mut entries = Vec::new();
    for o in oracles(st)? {
        let closed = lq_closed_form(o.a, g.horizon, cfg.sim.x0, &m.market, &m.cost, o.trajectory.intervals()).ok();
        let mut csv = Csv::new(&["t", "x"]);
        for (t, x) in o.trajectory.times().iter().zip(o.trajectory.first_coordinate()) {
            csv.row(&[*t, x]);
        }
        st.sink.write_csv(&format!("trajectory_A{}.csv", o.a), csv)?;
        entries.push(OracleEntry {
            a: o.a,
            min_cost: o.min_cost,
            value: o.value,
            upper_value: cara_upper_value(&o, cfg.sim.r0),
            iterations: o.iterations,
            closed_form_sup_distance: closed.map(|c| c.sup_distance(&o.trajectory)),
        });
    }
    let (lower, upper) = match st.oracle {
        Some(o) => o,
        None => {
            let env = CaraEnvelope::new(&m.utility, &m.market, &m.cost, g.t_init, g.horizon, &g.xs())
                .map_err(compute)?;
            let scale = (field.beta * g.horizon).exp();
            (
                scale * env.lower(g.horizon, cfg.sim.x0, cfg.sim.r0),
                scale * env.upper(g.horizon, cfg.sim.x0, cfg.sim.r0),
            )
        }
    };
    st.oracle = Some((lower, upper));
    st.sink.write_json(
        "oracle.json",
        &OracleFile {
            x0: cfg.sim.x0,
            r0: cfg.sim.r0,
            horizon: g.horizon,
            field_value,
            envelope_lower: lower,
            envelope_upper: upper,
            cara: entries,
        },
    )?;

    let mut csv = Csv::new(&["v", "f"]);
    match &m.cost {
        ConvexCost::Tabulated(t) => {
            let (v, f) = t.samples();
            for (a, b) in v.iter().zip(f) {
                csv.row(&[*a, *b]);
            }
        }
        c => {
            let v_max = field.stats.max_speed.max(1.0).ceil();
            for k in 0..=200 {
                let v = -v_max + 2.0 * v_max * k as f64 / 200.0;
                csv.row(&[v, c.eval(v).map_err(compute)?]);
            }
        }
    }
    st.sink.write_csv("cost_table.csv", csv)
}
