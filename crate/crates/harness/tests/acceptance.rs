//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use wave_plate::config::{Component, InitialData, Preset};
use wave_plate::initial::initial_state;
use wave_plate::output::Status;
use wave_plate::{build_operators, run_simulation, ExperimentConfig};
use wave_plate_core::dynamics::{
    continuous_dependence_check, energy, gronwall_check, simulate, truncation_consistency_check, IntegratorConfig,
    Scheme, SimulateOptions, State,
};
use wave_plate_core::operators::adjointness_report;
use wave_plate_core::potentialwell::{
    depth_estimate, functional_j, nehari_scaling, nehari_value, DepthEstimate, DepthOptions,
};
use wave_plate_core::{DiscreteOperators, GridFunction, GridSpec, SourceSpec};

type Outcome = Result<String, String>;

fn ops(dim: usize, n: usize) -> DiscreteOperators {
    build_operators(&GridSpec::uniform(dim, n)).expect("assembly")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mode_state(o: &DiscreteOperators, field: Component, amplitude: f64) -> State {
    let init = InitialData {
        preset: Preset::SingleMode,
        amplitude: Some(amplitude),
        field: Some(field),
        ..Default::default()
    };
    initial_state(o, &init, 0).expect("initial state")
}

fn random_state(o: &DiscreteOperators, seed: u64, scale: f64) -> State {
    let init = InitialData {
        preset: Preset::Random,
        seed: Some(seed),
        scale: Some(scale),
        ..Default::default()
    };
    initial_state(o, &init, 0).expect("initial state")
}

fn adjointness() -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (dim, n) in [(2, 64), (3, 16)] {
        let r = adjointness_report(&ops(dim, n), 100, 7);
        parts.push(format!("{dim}D n={n}: {:.2e}", r.max_defect));
        worst = worst.max(r.max_defect);
    }
    check(
        worst <= 1e-10,
        format!("max relative defect over 100 pairs {} (tol 1e-10)", parts.join(", ")),
    )
}

fn linear_conservation() -> Outcome {
    let o = ops(2, 32);
    let x0 = random_state(&o, 11, 1.0);
    let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, 1e-2);
    let tr =
        simulate(&o, SourceSpec::zero(), &x0, &cfg, 10.0, &SimulateOptions::default()).map_err(|e| e.to_string())?;
    let e0 = tr.records[0].energy.e;
    let drift = tr.records.iter().map(|r| (r.energy.e - e0).abs()).fold(0.0, f64::max) / e0;
    check(
        tr.steps == 1000 && drift <= 1e-10,
        format!("{} steps, relative E drift {drift:.2e} (tol 1e-10)", tr.steps),
    )
}

fn energy_identity() -> Outcome {
    let o = ops(2, 32);
    let s = SourceSpec::power(3.0).unwrap();
    let mut x0 = mode_state(&o, Component::W0, 1.0);
    x0.w_t = mode_state(&o, Component::W1, 5.0).w_t;
    let horizon = 0.5;
    let mut res = Vec::new();
    for dt in [2e-2, 1e-2, 5e-3] {
        let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, dt);
        let tr = simulate(&o, s.clone(), &x0, &cfg, horizon, &SimulateOptions::default()).map_err(|e| e.to_string())?;
        res.push(tr.max_abs_identity_residual());
    }
    let orders: Vec<f64> = res.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let midpoint_ok = orders.iter().all(|p| (1.8..=2.2).contains(p));

    let cfg = IntegratorConfig::new(Scheme::DiscreteGradient, 1e-2);
    let tr = simulate(&o, s, &x0, &cfg, horizon, &SimulateOptions::default()).map_err(|e| e.to_string())?;
    let drift = tr.max_abs_cal_e_drift();
    let allowed = 10.0 * cfg.nonlinear_tol * tr.steps as f64;
    check(
        midpoint_ok && drift <= allowed,
        format!(
            "implicit_midpoint residuals {:.2e}/{:.2e}/{:.2e}, orders {:.3}, {:.3} (want [1.8, 2.2]); discrete_gradient |calE_drift| {drift:.2e} <= {allowed:.1e}",
            res[0], res[1], res[2], orders[0], orders[1]
        ),
    )
}

fn truncation() -> Outcome {
    let o = ops(2, 32);
    let s = SourceSpec::power(3.0).unwrap();
    let mut x0 = mode_state(&o, Component::W0, 1.0);
    x0.w_t = mode_state(&o, Component::W1, 5.0).w_t;
    let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, 1e-4);
    let r = truncation_consistency_check(&o, &s, &x0, &cfg).map_err(|e| e.to_string())?;
    check(
        r.passed,
        format!(
            "K = {:.4}, T0 = {:.3e}: sup difference {:.2e} (tol 1e-12), max E {:.4} <= K^2/2 = {:.4}",
            r.k,
            r.t0,
            r.max_sup_difference,
            r.max_energy,
            0.5 * r.k * r.k
        ),
    )
}

fn gronwall() -> Outcome {
    let o = ops(2, 32);
    let s = SourceSpec::linear(1.0).unwrap();
    let x0 = random_state(&o, 5, 1.0);
    let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, 1e-2);
    let tr = simulate(&o, s.clone(), &x0, &cfg, 10.0, &SimulateOptions::default()).map_err(|e| e.to_string())?;
    let g = gronwall_check(&tr.records, s.linear_growth_c().unwrap(), o.constants());
    check(
        g.passed && g.margin > 0.0 && !tr.blew_up(),
        format!(
            "C = {}, min margin {:.3e}, blow-up suspect: {}",
            g.envelope_constant,
            g.margin,
            tr.blew_up()
        ),
    )
}

fn continuous_dependence() -> Outcome {
    let o = ops(2, 32);
    let s = SourceSpec::power(3.0).unwrap();
    let mut x0 = mode_state(&o, Component::W0, 1.0);
    x0.w_t = mode_state(&o, Component::W1, 5.0).w_t;
    let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, 1e-4);
    let r = continuous_dependence_check(&o, &s, &x0, 1e-6, 3, &cfg, None).map_err(|e| e.to_string())?;
    check(
        r.passed(),
        format!(
            "eps = 1e-6, T0 = {:.3e}, C(K) = {:.3e}, ratio {:.4} (want <= 1)",
            r.t0, r.c_k, r.ratio
        ),
    )
}

fn witness(d: &DepthEstimate) -> (GridFunction, GridFunction) {
    let lam = d.lambda_star.expect("finite depth");
    (
        d.direction_u.as_ref().unwrap().scaled(lam),
        d.direction_w.as_ref().unwrap().scaled(lam),
    )
}

fn closed_form_cubic_scaling(o: &DiscreteOperators, u: &GridFunction, w: &GridFunction) -> f64 {
    let uu = o.gather_chamber(u).unwrap();
    let ww = o.gather_plate(w).unwrap();
    let n = o.grad_sq(&uu) + o.lap_sq(&ww);
    let q: f64 = ww.iter().zip(o.plate_mass().iter()).map(|(x, m)| m * x.powi(4)).sum();
    (n / q).sqrt()
}

fn depth() -> Outcome {
    let s = SourceSpec::power(3.0).unwrap();
    let coarse = ops(2, 64);
    let fine = ops(2, 128);
    let opts = |modes| DepthOptions {
        modes,
        restarts: 8,
        sweeps: 40,
        seed: 1,
        full: false,
    };
    let est = |o: &DiscreteOperators, m| depth_estimate(o, &s, &opts(m)).map_err(|e| e.to_string());
    let d8 = est(&coarse, 8)?;
    let d16 = est(&coarse, 16)?;
    let d16_fine = est(&fine, 16)?;
    let basis_change = (d16.d_hat - d8.d_hat).abs() / d8.d_hat;
    let grid_change = (d16_fine.d_hat - d16.d_hat).abs() / d16.d_hat;

    let mut worst_nehari = 0.0f64;
    let mut worst_lambda = 0.0f64;
    for (o, d) in [(&coarse, &d8), (&coarse, &d16), (&fine, &d16_fine)] {
        let (u, w) = witness(d);
        let norm_sq = {
            let uu = o.gather_chamber(&u).unwrap();
            let ww = o.gather_plate(&w).unwrap();
            o.grad_sq(&uu) + o.lap_sq(&ww)
        };
        worst_nehari = worst_nehari.max(nehari_value(o, &s, &u, &w).unwrap().abs() / norm_sq);
        let j = functional_j(o, &s, &u, &w).unwrap();
        if (j - d.d_hat).abs() > 1e-10 * d.d_hat {
            return Err(format!("J at the witness {j} differs from d_hat {}", d.d_hat));
        }
    }
    // closed-form scaling on the witness and on a spread of mode directions
    for k in 0..6 {
        let mode = &coarse.plate_modes()[k].values;
        let bump = coarse.plate_modes()[0].values.map(|x| x * x);
        let w = coarse.scatter_plate(&(mode + bump * 0.3));
        let u = coarse.chamber().zeros();
        let got = nehari_scaling(&coarse, &s, &u, &w).unwrap();
        let want = closed_form_cubic_scaling(&coarse, &u, &w);
        worst_lambda = worst_lambda.max((got - want).abs() / want);
    }
    let (u, w) = (d16.direction_u.clone().unwrap(), d16.direction_w.clone().unwrap());
    let got = nehari_scaling(&coarse, &s, &u, &w).unwrap();
    let want = closed_form_cubic_scaling(&coarse, &u, &w);
    worst_lambda = worst_lambda.max((got - want).abs() / want);

    check(
        d8.d_hat > 0.0
            && d16.d_hat > 0.0
            && d16_fine.d_hat > 0.0
            && basis_change <= 0.05
            && grid_change <= 0.05
            && worst_nehari <= 1e-10
            && worst_lambda <= 1e-10,
        format!(
            "d_hat {:.6e} (8 modes), {:.6e} (16 modes), {:.6e} (n=128); basis change {:.2}%, grid change {:.2}% (tol 5%); relative Nehari residual {:.1e}; closed-form lambda* error {:.1e} (tol 1e-10)",
            d8.d_hat,
            d16.d_hat,
            d16_fine.d_hat,
            100.0 * basis_change,
            100.0 * grid_change,
            worst_nehari,
            worst_lambda
        ),
    )
}

const WELL_RUN: &str = r#"
seed = 17
[geometry]
dim = 2
n = 32
[source]
name = "power"
params = { p = 3.0 }
[initial]
preset = "modes"
w0 = [2.0, -1.0, 0.5]
w1 = [10.0]
u1 = [1.0, 0.5]
[integrator]
scheme = "discrete_gradient"
dt = 0.01
horizon = 20.0
stride = 10
[analyses]
energy_identity = true
well_invariance = true
[well]
modes = 8
restarts = 4
sweeps = 30
"#;

fn well_invariance() -> Outcome {
    let cfg = ExperimentConfig::parse(WELL_RUN).map_err(|e| e.to_string())?;
    let o = build_operators(&cfg.geometry.spec().unwrap()).map_err(|e| e.to_string())?;
    let x0 = initial_state(&o, &cfg.initial, cfg.seed).map_err(|e| e.to_string())?;
    let s = cfg.source.build().unwrap();
    let e0 = energy(&o, &s, &x0).map_err(|e| e.to_string())?;
    let out = run_simulation(&o, &cfg).map_err(|e| e.to_string())?;
    let well = out.summary.well.as_ref().ok_or("no depth estimate")?;
    let inv = &out.summary.analyses["well_invariance"];
    let all_w1 = out
        .records
        .iter()
        .all(|r| r.well.as_ref().map(|w| w.region.as_str()) == Some("W1"));
    let d = &inv.details;
    check(
        inv.status == Status::Passed && all_w1 && e0.cal_e < well.d_hat && out.exit_code() == 0,
        format!(
            "calE(0) = {:.4} < d_hat = {:.4}; {} samples all W1: {all_w1}; max relative calE drift {:.2e} (tol 1e-8); max E {:.4} < {:.4}; max int H {:.4} < {:.4}",
            e0.cal_e,
            well.d_hat,
            out.records.len(),
            d["max_relative_drift"].as_f64().unwrap_or(f64::NAN),
            d["max_energy"].as_f64().unwrap_or(f64::NAN),
            d["energy_bound"].as_f64().unwrap_or(f64::NAN),
            d["max_source_potential"].as_f64().unwrap_or(f64::NAN),
            d["source_potential_bound"].as_f64().unwrap_or(f64::NAN),
        ),
    )
}

const RANDOM_RUN: &str = r#"
seed = 99
[geometry]
dim = 2
n = 24
[source]
name = "exp_power"
params = { p = 1.0, q = 1.0 }
[initial]
preset = "random"
scale = 0.3
[integrator]
scheme = "implicit_midpoint"
dt = 0.005
horizon = 1.0
stride = 4
[analyses]
energy_identity = true
"#;

fn cli_trace(config: &str, dir: &Path, tag: &str) -> Result<Vec<u8>, String> {
    let cfg_path = dir.join(format!("{tag}.toml"));
    std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;
    let out = dir.join(tag);
    let status = Command::new(env!("CARGO_BIN_EXE_wave-plate"))
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{tag}: exit {:?}", status.status.code()));
    }
    std::fs::read(out.join("trace.csv")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let mut checked = Vec::new();
    for (name, text) in [("well", WELL_RUN), ("random", RANDOM_RUN)] {
        let cfg = ExperimentConfig::parse(text).map_err(|e| e.to_string())?;
        let o = build_operators(&cfg.geometry.spec().unwrap()).map_err(|e| e.to_string())?;
        let a = run_simulation(&o, &cfg).map_err(|e| e.to_string())?.trace_csv();
        let b = run_simulation(&o, &cfg).map_err(|e| e.to_string())?.trace_csv();
        if a != b {
            return Err(format!("{name}: in-process reruns differ"));
        }
        checked.push(format!("{name} ({} bytes)", a.len()));
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = cli_trace(RANDOM_RUN, tmp.path(), "first")?;
    let b = cli_trace(RANDOM_RUN, tmp.path(), "second")?;
    check(
        a == b && !a.is_empty(),
        format!(
            "byte-identical trace CSV on rerun: {}, CLI rerun ({} bytes)",
            checked.join(", "),
            a.len()
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("operator adjointness", adjointness),
        ("linear conservation", linear_conservation),
        ("energy identity", energy_identity),
        ("truncation consistency", truncation),
        ("Gronwall bound", gronwall),
        ("continuous dependence", continuous_dependence),
        ("depth positivity and stability", depth),
        ("well invariance", well_invariance),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {}. {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {}. {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
