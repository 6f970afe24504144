//! The experiment pipeline behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;
use wave_plate_core::dynamics::{
    continuous_dependence_check, gronwall_check, simulate, truncation_consistency_check, Scheme, SimulateOptions,
    State, Termination, Trace, TraceRecord,
};
use wave_plate_core::potentialwell::{
    classify, depth_estimate, well_invariance_check, DepthEstimate, InvarianceStatus,
};
use wave_plate_core::{assemble, DiscreteOperators, DynamicsError, GridSpec, SourceSpec, WellError};

use crate::config::{ConfigError, ExperimentConfig, SweepCell};
use crate::initial::initial_state;
use crate::output::{
    trace_csv_string, AnalysisResult, BlowUp, RunSummary, Status, WellSummary, WorstResiduals, SCHEMA_ID,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_BLOW_UP: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Mesh and operator failures on a validated geometry are configuration
/// problems (too coarse, wrong dimension, singular assembly).
pub fn build_operators(spec: &GridSpec) -> Result<DiscreteOperators, ConfigError> {
    let (c, p) = spec
        .build()
        .map_err(|e| ConfigError::Invalid(format!("geometry: {e}")))?;
    assemble(&c, &p).map_err(|e| ConfigError::Invalid(format!("geometry: {e}")))
}

/// Result of one run: the summary plus the in-memory artifacts.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: RunSummary,
    pub records: Vec<TraceRecord>,
    pub final_state: Option<State>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }

    pub fn trace_csv(&self) -> String {
        trace_csv_string(&self.records)
    }

    /// Writes the trace CSV, the summary JSON and the final state into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if !self.records.is_empty() {
            let p = dir.join(&cfg.output.trace);
            fs::write(&p, self.trace_csv()).map_err(io_err(&p))?;
        }
        let p = dir.join(&cfg.output.summary);
        fs::write(&p, self.summary.to_json()).map_err(io_err(&p))?;
        if let Some(x) = &self.final_state {
            let p = dir.join(&cfg.output.final_state);
            let text = serde_json::to_string(x).expect("serializable state");
            fs::write(&p, text).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

fn source_json(cfg: &ExperimentConfig, s: &SourceSpec) -> serde_json::Value {
    json!({
        "name": s.name(),
        "params": cfg.source.params,
        "theta": s.theta(),
        "linear_growth_c": s.linear_growth_c(),
    })
}

fn base_summary(cfg: &ExperimentConfig, s: &SourceSpec, command: &str) -> RunSummary {
    RunSummary {
        schema: SCHEMA_ID,
        command: command.to_string(),
        seed: cfg.seed,
        geometry: serde_json::to_value(cfg.geometry.spec().expect("validated geometry")).expect("serializable"),
        source: source_json(cfg, s),
        scheme: None,
        dt: None,
        horizon: None,
        exit_code: EXIT_OK,
        analyses: BTreeMap::new(),
        worst_residuals: None,
        well: None,
        blow_up: None,
        error: None,
        steps: 0,
        nonlinear_iterations: 0,
        wall_clock_seconds: 0.0,
    }
}

fn well_error(e: WellError) -> PipelineError {
    match e {
        WellError::Parameter(m) => ConfigError::Invalid(format!("well: {m}")).into(),
        other => ConfigError::Invalid(format!("well: {other}")).into(),
    }
}

fn estimate_depth(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    cfg: &ExperimentConfig,
) -> Result<Option<DepthEstimate>, PipelineError> {
    if !cfg.well.enabled {
        return Ok(None);
    }
    depth_estimate(ops, s, &cfg.well.options(cfg.seed))
        .map(Some)
        .map_err(well_error)
}

fn well_summary(d: &DepthEstimate, s: &SourceSpec, initial_region: Option<String>) -> WellSummary {
    WellSummary {
        d_hat: d.d_hat,
        lambda_star: d.lambda_star,
        budget_exhausted: d.budget_exhausted,
        evaluations: d.evaluations,
        certificate: d.certificate.clone(),
        initial_region,
        energy_bound: s.theta().map(|th| d.energy_bound(th)),
    }
}

/// `well-depth`: the depth estimate alone.
pub fn run_depth(ops: &DiscreteOperators, cfg: &ExperimentConfig) -> Result<Outcome, PipelineError> {
    let clock = Instant::now();
    let s = cfg.source.build()?;
    let mut summary = base_summary(cfg, &s, "well-depth");
    let opts = cfg.well.options(cfg.seed);
    let d = depth_estimate(ops, &s, &opts).map_err(well_error)?;
    summary.well = Some(well_summary(&d, &s, None));
    summary.wall_clock_seconds = clock.elapsed().as_secs_f64();
    Ok(Outcome {
        summary,
        records: Vec::new(),
        final_state: None,
    })
}

fn dynamics_error(e: DynamicsError) -> Result<String, PipelineError> {
    match e {
        DynamicsError::Config(m) => Err(ConfigError::Invalid(format!("integrator: {m}")).into()),
        DynamicsError::InvalidState(m) => Err(ConfigError::Invalid(format!("initial: {m}")).into()),
        other => Ok(other.to_string()),
    }
}

fn energy_identity(trace: &Trace, scheme: Scheme, tol: f64) -> AnalysisResult {
    let e0 = trace.records.first().map_or(0.0, |r| r.energy.e);
    let scale = e0.max(1.0);
    let scheme_res = trace.max_abs_scheme_residual() / scale;
    let drift = trace.max_abs_cal_e_drift() / scale;
    // the discrete gradient scheme also conserves the total energy
    let measured = if scheme == Scheme::DiscreteGradient {
        scheme_res.max(drift)
    } else {
        scheme_res
    };
    let margin = tol - measured;
    AnalysisResult::judged(
        margin >= 0.0,
        margin,
        json!({
            "tolerance": tol,
            "scale": scale,
            "max_relative_scheme_residual": scheme_res,
            "max_relative_calE_drift": drift,
            "max_abs_identity_residual": trace.max_abs_identity_residual(),
        }),
    )
}

fn failed_with(error: String) -> AnalysisResult {
    AnalysisResult {
        status: Status::Failed,
        margin: f64::NEG_INFINITY,
        details: json!({ "error": error }),
    }
}

/// `simulate`: depth estimate, trajectory and every enabled analysis.
pub fn run_simulation(ops: &DiscreteOperators, cfg: &ExperimentConfig) -> Result<Outcome, PipelineError> {
    let clock = Instant::now();
    let s = cfg.source.build()?;
    let x0 = initial_state(ops, &cfg.initial, cfg.seed)?;
    let integ = cfg.integrator.integrator();
    integ.validate(ops).map_err(|e| match dynamics_error(e) {
        Err(c) => c,
        Ok(m) => ConfigError::Invalid(m).into(),
    })?;
    let mut summary = base_summary(cfg, &s, "simulate");
    summary.scheme = Some(integ.scheme.name().to_string());
    summary.dt = Some(integ.dt);
    summary.horizon = Some(cfg.integrator.horizon);

    let depth = estimate_depth(ops, &s, cfg)?;
    if let Some(d) = &depth {
        let region = classify(ops, &s, &x0, d.d_hat).map_err(well_error)?.region;
        summary.well = Some(well_summary(d, &s, Some(region.as_str().to_string())));
    }
    let opts = SimulateOptions {
        stride: cfg.integrator.stride,
        d_hat: depth.as_ref().map(|d| d.d_hat),
        keep_states: false,
    };
    let trace = match simulate(ops, s.clone(), &x0, &integ, cfg.integrator.horizon, &opts) {
        Ok(t) => t,
        Err(e) => {
            summary.error = Some(dynamics_error(e)?);
            summary.exit_code = EXIT_CHECK_FAILED;
            summary.wall_clock_seconds = clock.elapsed().as_secs_f64();
            return Ok(Outcome {
                summary,
                records: Vec::new(),
                final_state: None,
            });
        }
    };
    summary.steps = trace.steps;
    summary.nonlinear_iterations = trace.nonlinear_iterations;
    summary.worst_residuals = Some(WorstResiduals {
        identity_residual: trace.max_abs_identity_residual(),
        cal_e_drift: trace.max_abs_cal_e_drift(),
        scheme_residual: trace.max_abs_scheme_residual(),
    });
    if let Termination::BlowUpSuspect { t, energy, reason } = &trace.termination {
        summary.blow_up = Some(BlowUp {
            t: *t,
            energy: *energy,
            reason: reason.clone(),
        });
    }

    let a = &cfg.analyses;
    let blew_up = trace.blew_up();
    if a.energy_identity {
        let r = energy_identity(&trace, integ.scheme, a.energy_tolerance(integ.scheme));
        summary.analyses.insert("energy_identity".into(), r);
    }
    if a.gronwall {
        let c = s.linear_growth_c().expect("validated linear growth");
        let g = gronwall_check(&trace.records, c, ops.constants());
        let passed = g.passed && !blew_up;
        summary
            .analyses
            .insert("gronwall".into(), AnalysisResult::judged(passed, g.margin, &g));
    }
    if a.well_invariance {
        let d = depth.as_ref().expect("validated: well enabled");
        // with h ≡ 0 there is no AR exponent and every bound is +∞ for any θ > 2
        let theta = s.theta().unwrap_or(4.0);
        let r = well_invariance_check(&trace.records, theta, d.d_hat, a.invariance_tolerance(integ.scheme));
        let first = &trace.records[0].energy;
        let margin = [
            d.d_hat - first.cal_e,
            r.energy_bound - r.max_energy,
            r.source_potential_bound - r.max_source_potential,
            a.invariance_tolerance(integ.scheme) - r.max_relative_drift,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        let status = match r.status {
            InvarianceStatus::Exploratory => Status::Exploratory,
            InvarianceStatus::Passed if !blew_up => Status::Passed,
            _ => Status::Failed,
        };
        summary.analyses.insert(
            "well_invariance".into(),
            AnalysisResult {
                status,
                margin,
                details: serde_json::to_value(&r).expect("serializable"),
            },
        );
    }
    if let Some(cd) = &a.continuous_dependence {
        let r = match continuous_dependence_check(ops, &s, &x0, cd.epsilon, cfg.seed, &integ, None) {
            Ok(r) => AnalysisResult::judged(r.passed(), 1.0 - r.ratio, &r),
            Err(e) => failed_with(dynamics_error(e)?),
        };
        summary.analyses.insert("continuous_dependence".into(), r);
    }
    if a.truncation_consistency {
        let r = match truncation_consistency_check(ops, &s, &x0, &integ) {
            Ok(r) => {
                let margin = (wave_plate_core::dynamics::TruncationReport::TOL - r.max_sup_difference)
                    .min(0.5 * r.k * r.k - r.max_energy);
                AnalysisResult::judged(r.passed, margin, &r)
            }
            Err(e) => failed_with(dynamics_error(e)?),
        };
        summary.analyses.insert("truncation_consistency".into(), r);
    }

    summary.exit_code = if blew_up {
        EXIT_BLOW_UP
    } else if summary.analyses.values().any(|r| r.status == Status::Failed) {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    };
    summary.wall_clock_seconds = clock.elapsed().as_secs_f64();
    Ok(Outcome {
        summary,
        records: trace.records,
        final_state: Some(trace.final_state),
    })
}

/// Outcome of one sweep cell.
#[derive(Debug)]
pub struct CellOutcome {
    pub cell: SweepCell,
    pub dir: PathBuf,
    pub result: Result<Outcome, PipelineError>,
}

impl CellOutcome {
    pub fn exit_code(&self) -> i32 {
        match &self.result {
            Ok(o) => o.exit_code(),
            Err(e) => e.exit_code(),
        }
    }
}

/// Runs every cell in parallel; operators are assembled once per distinct
/// geometry and shared read-only. Each cell writes into `out/cell_NNNN`.
pub fn run_sweep(cells: Vec<SweepCell>, out: &Path) -> Result<Vec<CellOutcome>, PipelineError> {
    let mut specs: Vec<GridSpec> = Vec::new();
    for c in &cells {
        let g = c.config.geometry.spec()?;
        if !specs.contains(&g) {
            specs.push(g);
        }
    }
    let built: Vec<DiscreteOperators> = specs.par_iter().map(build_operators).collect::<Result<_, _>>()?;
    let outcomes: Vec<CellOutcome> = cells
        .into_par_iter()
        .map(|cell| {
            let g = cell.config.geometry.spec().expect("validated geometry");
            let ops = &built[specs.iter().position(|s| *s == g).expect("assembled geometry")];
            let dir = out.join(format!("cell_{:04}", cell.index));
            let result = run_simulation(ops, &cell.config).and_then(|o| {
                o.write(&dir, &cell.config)?;
                Ok(o)
            });
            CellOutcome { cell, dir, result }
        })
        .collect();
    let index: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            let assignments: BTreeMap<&str, &toml::Value> =
                o.cell.assignments.iter().map(|(k, v)| (k.as_str(), v)).collect();
            json!({
                "cell": o.cell.index,
                "dir": o.dir.file_name().map(|n| n.to_string_lossy().into_owned()),
                "assignments": assignments,
                "exit_code": o.exit_code(),
                "error": o.result.as_ref().err().map(|e| e.to_string()),
            })
        })
        .collect();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join("sweep.json");
    let text = serde_json::to_string_pretty(&json!({ "cells": index })).expect("serializable") + "\n";
    fs::write(&p, text).map_err(io_err(&p))?;
    Ok(outcomes)
}

/// Worst exit code over a sweep: config error, then blow-up, then failure.
pub fn combined_exit_code(codes: impl IntoIterator<Item = i32>) -> i32 {
    codes.into_iter().fold(EXIT_OK, |acc, c| {
        let rank = |c: i32| match c {
            EXIT_CONFIG => 3,
            EXIT_BLOW_UP => 2,
            EXIT_CHECK_FAILED => 1,
            _ => 0,
        };
        if rank(c) > rank(acc) {
            c
        } else {
            acc
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        let text = format!(
            "seed = 1\n[geometry]\ndim = 2\nn = 12\n[integrator]\nscheme = \"implicit_midpoint\"\ndt = 0.01\nhorizon = 0.2\n{extra}"
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn zero_run_passes_every_check_with_tiny_residuals() {
        let c = cfg("[analyses]\nenergy_identity = true\ngronwall = true\nwell_invariance = true\ntruncation_consistency = true\ncontinuous_dependence = { epsilon = 1e-6 }\n");
        let ops = build_operators(&c.geometry.spec().unwrap()).unwrap();
        let o = run_simulation(&ops, &c).unwrap();
        assert_eq!(o.exit_code(), EXIT_OK, "{}", o.summary.to_json());
        assert_eq!(o.summary.analyses.len(), 5);
        let w = o.summary.worst_residuals.as_ref().unwrap();
        assert!(w.identity_residual <= 1e-10 && w.cal_e_drift <= 1e-10 && w.scheme_residual <= 1e-10);
        assert_eq!(o.records.len(), 21);
    }

    #[test]
    fn exit_code_precedence() {
        assert_eq!(combined_exit_code([0, 2, 0]), 2);
        assert_eq!(combined_exit_code([2, 3, 0]), 3);
        assert_eq!(combined_exit_code([3, 4, 2]), 4);
        assert_eq!(combined_exit_code([]), 0);
    }

    #[test]
    fn leapfrog_beyond_stability_is_a_config_error() {
        let c = cfg("").clone();
        let mut c = c;
        c.integrator.scheme = Scheme::Leapfrog;
        let ops = build_operators(&c.geometry.spec().unwrap()).unwrap();
        assert!(matches!(run_simulation(&ops, &c), Err(PipelineError::Config(_))));
    }
}
