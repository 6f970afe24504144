use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use wave_plate::config::{expand_sweep, ConfigError, ExperimentConfig};
use wave_plate::pipeline::{combined_exit_code, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK};
use wave_plate::{build_operators, run_depth, run_simulation, run_sweep, PipelineError};
use wave_plate_core::dynamics::State;
use wave_plate_core::operators::{verify_operators, OperatorChecks, OperatorMatrix};
use wave_plate_core::potentialwell::{classify, depth_estimate};
use wave_plate_core::GridSpec;

/// Numerical experiments on an acoustic chamber coupled to a clamped plate.
///
/// Log verbosity is read from `WAVE_PLATE_LOG` (e.g. `info`, `debug`).
#[derive(Parser)]
#[command(name = "wave-plate", version)]
struct Cli {
    /// Worker threads for parallel sweeps and depth restarts (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: depth estimate, trajectory, enabled analyses.
    Simulate(Common),
    /// Depth estimate only.
    WellDepth(Common),
    /// One-shot well analysis of a state file (JSON, as written by `simulate`).
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        state: PathBuf,
        /// Use this depth instead of estimating it.
        #[arg(long)]
        d_hat: Option<f64>,
    },
    /// Adjointness, symmetry and positivity checks of the assembled operators.
    VerifyOperators {
        /// Take the geometry from a config file instead of `--dim/--n`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the matrices as COO text files into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Cartesian product over the `[sweep]` axes, one summary per cell.
    Sweep(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, toml::Value), ConfigError> {
    let (mut cfg, mut raw) = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        if let Some(t) = raw.as_table_mut() {
            t.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok((cfg, raw))
}

fn fail(e: impl std::fmt::Display, code: i32) -> i32 {
    eprintln!("error: {e}");
    code
}

fn simulate(common: &Common) -> Result<i32, PipelineError> {
    let (cfg, _) = load(common)?;
    if cfg.sweep.is_some() {
        warn!("ignoring the [sweep] section; use the `sweep` subcommand to expand it");
    }
    let ops = build_operators(&cfg.geometry.spec()?)?;
    let outcome = run_simulation(&ops, &cfg)?;
    outcome.write(&cfg.output.dir, &cfg)?;
    let s = &outcome.summary;
    for (name, r) in &s.analyses {
        println!("{name}: {:?} (margin {:e})", r.status, r.margin);
    }
    if let Some(w) = &s.well {
        println!("d_hat: {:e}", w.d_hat);
    }
    if let Some(b) = &s.blow_up {
        println!("blow-up suspect at t = {}: {}", b.t, b.reason);
    }
    if let Some(e) = &s.error {
        println!("numerical failure: {e}");
    }
    println!("exit code {}; artifacts in {}", s.exit_code, cfg.output.dir.display());
    Ok(s.exit_code)
}

fn well_depth(common: &Common) -> Result<i32, PipelineError> {
    let (cfg, _) = load(common)?;
    let ops = build_operators(&cfg.geometry.spec()?)?;
    let outcome = run_depth(&ops, &cfg)?;
    outcome.write(&cfg.output.dir, &cfg)?;
    let w = outcome.summary.well.as_ref().expect("depth summary");
    println!("d_hat: {:e}", w.d_hat);
    if let Some(c) = &w.certificate {
        println!(
            "certificate: lower bound {:e} (c0 = {:e}, theta = {}), holds: {}",
            c.lower_bound, c.c0, c.theta, c.holds
        );
    }
    if w.budget_exhausted {
        println!("search budget exhausted: d_hat is a budget-limited upper estimate");
    }
    Ok(EXIT_OK)
}

fn classify_state(common: &Common, state: &Path, d_hat: Option<f64>) -> Result<i32, PipelineError> {
    let (cfg, _) = load(common)?;
    let ops = build_operators(&cfg.geometry.spec()?)?;
    let s = cfg.source.build()?;
    let text = fs::read_to_string(state).map_err(|source| PipelineError::Io {
        path: state.to_path_buf(),
        source,
    })?;
    let x: State = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("state file: {e}")))?;
    x.validate(&ops)
        .map_err(|e| ConfigError::Invalid(format!("state file: {e}")))?;
    let d = match d_hat {
        Some(d) => d,
        None => {
            depth_estimate(&ops, &s, &cfg.well.options(cfg.seed))
                .map_err(|e| ConfigError::Invalid(format!("well: {e}")))?
                .d_hat
        }
    };
    let a = classify(&ops, &s, &x, d).map_err(|e| ConfigError::Invalid(format!("classify: {e}")))?;
    println!("{}", serde_json::to_string_pretty(&a).expect("serializable"));
    Ok(EXIT_OK)
}

fn verify(
    config: Option<&Path>,
    dim: usize,
    n: usize,
    trials: usize,
    seed: u64,
    dump: Option<&Path>,
) -> Result<i32, PipelineError> {
    let spec = match config {
        Some(p) => ExperimentConfig::load(p)?.0.geometry.spec()?,
        None => GridSpec::uniform(dim, n),
    };
    let ops = build_operators(&spec)?;
    let r = verify_operators(&ops, trials, seed);
    println!(
        "max adjointness defect: {:e} over {} pairs (seed {}, tolerance {:e})",
        r.adjointness.max_defect,
        r.adjointness.trials,
        r.adjointness.seed,
        OperatorChecks::ADJOINTNESS_TOL
    );
    println!("chamber symmetry defect: {:e}", r.chamber_symmetry);
    println!("plate symmetry defect: {:e}", r.plate_symmetry);
    println!("plate min Rayleigh quotient: {:e}", r.plate_min_rayleigh);
    let c = &r.constants;
    println!(
        "constants: |Gamma| = {}, C_P(chamber) = {:e}, C_P(plate) = {:e}, C_emb = {:e}, leapfrog dt_max = {:e}",
        c.gamma_measure, c.poincare_chamber, c.poincare_plate, c.embedding, c.leapfrog_dt_max
    );
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (which, name) in [
            (OperatorMatrix::ChamberStiffness, "chamber_stiffness.coo"),
            (OperatorMatrix::ChamberMass, "chamber_mass.coo"),
            (OperatorMatrix::PlateStiffness, "plate_stiffness.coo"),
            (OperatorMatrix::PlateMass, "plate_mass.coo"),
            (OperatorMatrix::Trace, "trace.coo"),
        ] {
            let p = dir.join(name);
            let io = |source| PipelineError::Io {
                path: p.clone(),
                source,
            };
            let f = fs::File::create(&p).map_err(io)?;
            ops.write_coo(which, std::io::BufWriter::new(f)).map_err(io)?;
        }
        println!("matrices written to {}", dir.display());
    }
    Ok(if r.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn sweep(common: &Common) -> Result<i32, PipelineError> {
    let (cfg, raw) = load(common)?;
    let cells = expand_sweep(&raw)?;
    info!("sweep over {} cells", cells.len());
    let outcomes = run_sweep(cells, &cfg.output.dir)?;
    for o in &outcomes {
        let assignments: Vec<String> = o.cell.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
        match &o.result {
            Ok(r) => {
                let status: Vec<String> = r
                    .summary
                    .analyses
                    .iter()
                    .map(|(k, a)| format!("{k}={:?}", a.status))
                    .collect();
                let region = r
                    .summary
                    .well
                    .as_ref()
                    .and_then(|w| w.initial_region.clone())
                    .unwrap_or_else(|| "-".into());
                println!(
                    "cell {} [{}]: exit {}, initial region {}, {}",
                    o.cell.index,
                    assignments.join(", "),
                    r.exit_code(),
                    region,
                    status.join(" ")
                );
            }
            Err(e) => println!("cell {} [{}]: error: {e}", o.cell.index, assignments.join(", ")),
        }
    }
    Ok(combined_exit_code(outcomes.iter().map(|o| o.exit_code())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAVE_PLATE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return ExitCode::from(fail(e, EXIT_CONFIG) as u8);
        }
    }
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::WellDepth(c) => well_depth(c),
        Command::Classify { common, state, d_hat } => classify_state(common, state, *d_hat),
        Command::VerifyOperators {
            config,
            dim,
            n,
            trials,
            seed,
            dump,
        } => verify(config.as_deref(), *dim, *n, *trials, *seed, dump.as_deref()),
        Command::Sweep(c) => sweep(c),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => fail(&e, e.exit_code()),
    };
    ExitCode::from(code as u8)
}
