//! Time integration of the semi-discrete wave-plate system and energy
//! bookkeeping.
//!
//! On free nodes the system reads
//!
//! ```text
//! u' = y                  M_Ω y' = -K_Ω u + Trᵀ M_Γ z
//! w' = z                  M_Γ z' = -K_Γ w - M_Γ Tr y + M_Γ f(w)
//! ```
//!
//! The `Trᵀ M_Γ z` term is the Neumann datum `∂ν u = w_t` imposed on the
//! wall; `-Tr y` is its exact adjoint, so the coupling exchanges energy
//! without creating any.
//!
//! The implicit schemes eliminate the chamber velocity through a Schur
//! complement on the plate unknowns, which keeps the coupling monolithic.

use std::f64::consts::LN_2;

use nalgebra::Dyn;
use nalgebra::{DMatrix, DVector, LU};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DynamicsError, SourceError};
use crate::mesh::GridFunction;
use crate::operators::{DiscreteOperators, GridConstants};
use crate::potentialwell::{self, WellAnalysis};
use crate::sources::{SourceSpec, TruncatedSource};

/// `(u, w, u_t, w_t)` at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub u: GridFunction,
    pub w: GridFunction,
    pub u_t: GridFunction,
    pub w_t: GridFunction,
    pub t: f64,
}

impl State {
    pub fn zeros(ops: &DiscreteOperators) -> Self {
        Self {
            u: ops.chamber().zeros(),
            w: ops.plate().zeros(),
            u_t: ops.chamber().zeros(),
            w_t: ops.plate().zeros(),
            t: 0.0,
        }
    }

    /// Checks grids, finiteness and the homogeneous boundary values.
    pub fn validate(&self, ops: &DiscreteOperators) -> Result<(), DynamicsError> {
        ops.gather_chamber(&self.u)?;
        ops.gather_chamber(&self.u_t)?;
        ops.gather_plate(&self.w)?;
        ops.gather_plate(&self.w_t)?;
        if !(self.t.is_finite()
            && self.u.is_finite()
            && self.w.is_finite()
            && self.u_t.is_finite()
            && self.w_t.is_finite())
        {
            return Err(DynamicsError::InvalidState("non-finite values".into()));
        }
        for (name, f) in [("u", &self.u), ("u_t", &self.u_t)] {
            for i in 0..f.len() {
                if ops.chamber().is_constrained(i) && f.values[i] != 0.0 {
                    return Err(DynamicsError::InvalidState(format!(
                        "{name} is nonzero on the rigid wall at node {i}"
                    )));
                }
            }
        }
        for (name, f) in [("w", &self.w), ("w_t", &self.w_t)] {
            for i in 0..f.len() {
                if ops.plate().is_constrained(i) && f.values[i] != 0.0 {
                    return Err(DynamicsError::InvalidState(format!(
                        "{name} is nonzero on the clamped edge at node {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn to_free(&self, ops: &DiscreteOperators) -> Result<FreeState, DynamicsError> {
        self.validate(ops)?;
        Ok(FreeState {
            u: ops.gather_chamber(&self.u)?,
            w: ops.gather_plate(&self.w)?,
            y: ops.gather_chamber(&self.u_t)?,
            z: ops.gather_plate(&self.w_t)?,
            t: self.t,
        })
    }
}

/// State restricted to free nodes.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FreeState {
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub t: f64,
}

impl FreeState {
    pub fn to_state(&self, ops: &DiscreteOperators) -> State {
        State {
            u: ops.scatter_chamber(&self.u),
            w: ops.scatter_plate(&self.w),
            u_t: ops.scatter_chamber(&self.y),
            w_t: ops.scatter_plate(&self.z),
            t: self.t,
        }
    }

    fn sup_distance(&self, other: &Self) -> f64 {
        [
            (&self.u - &other.u).amax(),
            (&self.w - &other.w).amax(),
            (&self.y - &other.y).amax(),
            (&self.z - &other.z).amax(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn is_finite(&self) -> bool {
        [&self.u, &self.w, &self.y, &self.z]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// The plate forcing: a plain source or its truncation `h^K`.
#[derive(Clone, Debug)]
pub enum Forcing {
    Plain(SourceSpec),
    Truncated(TruncatedSource),
}

impl From<SourceSpec> for Forcing {
    fn from(s: SourceSpec) -> Self {
        Forcing::Plain(s)
    }
}

impl From<TruncatedSource> for Forcing {
    fn from(t: TruncatedSource) -> Self {
        Forcing::Truncated(t)
    }
}

impl Forcing {
    pub fn base(&self) -> &SourceSpec {
        match self {
            Forcing::Plain(s) => s,
            Forcing::Truncated(t) => &t.base,
        }
    }

    fn is_zero(&self) -> bool {
        self.base().is_zero()
    }

    /// Forcing values and pointwise slopes at `w` (slopes only if asked).
    fn eval(
        &self,
        ops: &DiscreteOperators,
        w: &DVector<f64>,
        slopes: bool,
    ) -> Result<(DVector<f64>, Option<DVector<f64>>), SourceError> {
        let (arg, factor) = match self {
            Forcing::Plain(_) => (None, 1.0),
            Forcing::Truncated(t) => {
                let f = t.factor(ops.lap_sq(w).sqrt());
                if f == 1.0 {
                    (None, 1.0)
                } else {
                    (Some(w * f), f)
                }
            }
        };
        let arg = arg.as_ref().unwrap_or(w);
        let s = self.base();
        let mut out = DVector::zeros(w.len());
        s.apply(arg.as_slice(), out.as_mut_slice())?;
        let d = slopes.then(|| arg.map(|x| factor * s.h_prime(x)));
        Ok((out, d))
    }

    fn inside_ball(&self, ops: &DiscreteOperators, w: &DVector<f64>) -> bool {
        match self {
            Forcing::Plain(_) => true,
            Forcing::Truncated(t) => ops.lap_sq(w).sqrt() <= t.k,
        }
    }
}

/// Time-stepping method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ImplicitMidpoint,
    DiscreteGradient,
    Leapfrog,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ImplicitMidpoint => "implicit_midpoint",
            Scheme::DiscreteGradient => "discrete_gradient",
            Scheme::Leapfrog => "leapfrog",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub nonlinear_tol: f64,
    pub max_nonlinear_iters: usize,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, dt: f64) -> Self {
        Self {
            scheme,
            dt,
            nonlinear_tol: 1e-12,
            max_nonlinear_iters: 100,
        }
    }

    pub fn validate(&self, ops: &DiscreteOperators) -> Result<(), DynamicsError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DynamicsError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.nonlinear_tol.is_finite() && self.nonlinear_tol > 0.0) {
            return Err(DynamicsError::Config("nonlinear_tol must be positive".into()));
        }
        if self.max_nonlinear_iters == 0 {
            return Err(DynamicsError::Config("max_nonlinear_iters must be at least 1".into()));
        }
        let limit = ops.constants().leapfrog_dt_max;
        if self.scheme == Scheme::Leapfrog && self.dt > limit {
            return Err(DynamicsError::Config(format!(
                "leapfrog dt = {} exceeds the stability limit {limit:e}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Energies at one instant, plus the integrator's running accounts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub t: f64,
    /// Quadratic energy.
    #[serde(rename = "E")]
    pub e: f64,
    /// Potential energy functional.
    #[serde(rename = "J")]
    pub j: f64,
    /// Total energy `E - ∫H(w)`.
    #[serde(rename = "calE")]
    pub cal_e: f64,
    /// `∫_Γ H(w)`.
    pub source_potential: f64,
    /// `∫₀ᵗ (h(w), w_t)_Γ`, trapezoid rule in time.
    pub source_work: f64,
    /// `E(t) - E(0) - source_work`.
    pub identity_residual: f64,
    #[serde(rename = "calE_drift")]
    pub cal_e_drift: f64,
    /// Work as the scheme itself exchanges it (`Σ dt (w̄_t, f̄)`).
    pub scheme_work: f64,
    /// `E(t) - E(0) - scheme_work`: solver and round-off error only for
    /// the implicit schemes.
    pub scheme_residual: f64,
}

/// Quadratic energy parts on free values.
/// Eight-point Gauss-Legendre rule on [0, 1] as (node, weight).
const GAUSS_8: [(f64, f64); 8] = {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    [
        (0.5 - 0.5 * X[3], 0.5 * W[3]),
        (0.5 - 0.5 * X[2], 0.5 * W[2]),
        (0.5 - 0.5 * X[1], 0.5 * W[1]),
        (0.5 - 0.5 * X[0], 0.5 * W[0]),
        (0.5 + 0.5 * X[0], 0.5 * W[0]),
        (0.5 + 0.5 * X[1], 0.5 * W[1]),
        (0.5 + 0.5 * X[2], 0.5 * W[2]),
        (0.5 + 0.5 * X[3], 0.5 * W[3]),
    ]
};

pub(crate) fn quadratic_energy(ops: &DiscreteOperators, x: &FreeState) -> f64 {
    0.5 * (ops.chamber_dot(&x.y, &x.y) + ops.grad_sq(&x.u) + ops.plate_dot(&x.z, &x.z) + ops.w_stiffness_energy(&x.w))
}

impl DiscreteOperators {
    fn w_stiffness_energy(&self, w: &DVector<f64>) -> f64 {
        w.dot(&self.stiffness_plate_mul(w))
    }
}

pub(crate) fn source_potential(ops: &DiscreteOperators, s: &SourceSpec, w: &DVector<f64>) -> f64 {
    if s.is_zero() {
        return 0.0;
    }
    w.iter()
        .zip(ops.plate_mass().iter())
        .map(|(&x, m)| m * s.antiderivative(x))
        .sum()
}

/// Instantaneous energies of a state (running accounts are zero).
pub fn energy(ops: &DiscreteOperators, s: &SourceSpec, x: &State) -> Result<EnergyReport, DynamicsError> {
    let f = x.to_free(ops)?;
    Ok(instant_report(ops, s, &f))
}

fn instant_report(ops: &DiscreteOperators, s: &SourceSpec, x: &FreeState) -> EnergyReport {
    let e = quadratic_energy(ops, x);
    let pot = source_potential(ops, s, &x.w);
    let elastic = 0.5 * (ops.grad_sq(&x.u) + ops.w_stiffness_energy(&x.w));
    EnergyReport {
        t: x.t,
        e,
        j: elastic - pot,
        cal_e: e - pot,
        source_potential: pot,
        ..Default::default()
    }
}

/// Factorizations for one (signed) step size of the implicit schemes.
struct ImplicitSystem {
    dt2: f64,
    chamber: CscCholesky<f64>,
    schur: LU<f64, Dyn, Dyn>,
    schur_matrix: DMatrix<f64>,
}

impl ImplicitSystem {
    fn new(ops: &DiscreteOperators, dt: f64) -> Result<Self, DynamicsError> {
        let nc = ops.chamber_dofs();
        let np = ops.plate_dofs();
        let half = 0.5 * dt * dt;
        let k = ops.chamber_stiffness();
        let mut coo = CooMatrix::new(nc, nc);
        for (r, row) in k.row_iter().enumerate() {
            for (&c, &v) in row.col_indices().iter().zip(row.values()) {
                coo.push(r, c, half * v);
            }
        }
        for (i, m) in ops.chamber_mass().iter().enumerate() {
            coo.push(i, i, 2.0 * m);
        }
        let chamber = CscCholesky::factor(&CscMatrix::from(&coo))
            .map_err(|e| DynamicsError::Config(format!("chamber step matrix: {e:?}")))?;
        let mut rhs = DMatrix::zeros(nc, np);
        let mp = ops.plate_mass();
        for (j, &c) in ops.trace_map().iter().enumerate() {
            rhs[(c, j)] = mp[j];
        }
        let z = chamber.solve(&rhs);
        let mut s = ops.plate_stiffness() * half;
        for j in 0..np {
            s[(j, j)] += 2.0 * mp[j];
        }
        let tw = ops.trace_weights();
        for (j, &c) in ops.trace_map().iter().enumerate() {
            let a = dt * dt * mp[j] * tw[j];
            for kcol in 0..np {
                s[(j, kcol)] += a * z[(c, kcol)];
            }
        }
        let lu = s.clone().lu();
        if !lu.is_invertible() {
            return Err(DynamicsError::Config("singular plate Schur complement".into()));
        }
        Ok(Self {
            dt2: dt * dt,
            chamber,
            schur: lu,
            schur_matrix: s,
        })
    }

    fn solve_chamber(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chamber.solve(b).column(0).into_owned()
    }
}

/// Result of a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// `dt (w̄_t, f̄)_Γ`, the work exchanged by the scheme.
    pub scheme_work: f64,
    pub nonlinear_iterations: usize,
}

/// Stateful stepper that caches factorizations for its step size.
pub struct Integrator<'a> {
    ops: &'a DiscreteOperators,
    forcing: Forcing,
    cfg: IntegratorConfig,
    system: Option<ImplicitSystem>,
}

impl<'a> Integrator<'a> {
    pub fn new(
        ops: &'a DiscreteOperators,
        forcing: impl Into<Forcing>,
        cfg: &IntegratorConfig,
    ) -> Result<Self, DynamicsError> {
        cfg.validate(ops)?;
        let system = match cfg.scheme {
            Scheme::Leapfrog => None,
            _ => Some(ImplicitSystem::new(ops, cfg.dt)?),
        };
        Ok(Self {
            ops,
            forcing: forcing.into(),
            cfg: cfg.clone(),
            system,
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }

    /// Advances a public state by one step.
    pub fn step(&self, x: &State) -> Result<State, DynamicsError> {
        let mut f = x.to_free(self.ops)?;
        self.advance(&mut f, self.cfg.dt)?;
        Ok(f.to_state(self.ops))
    }

    /// Steps backward by `dt` (the implicit schemes are symmetric).
    pub fn step_back(&self, x: &State) -> Result<State, DynamicsError> {
        let mut f = x.to_free(self.ops)?;
        self.advance(&mut f, -self.cfg.dt)?;
        Ok(f.to_state(self.ops))
    }

    pub(crate) fn advance(&self, x: &mut FreeState, dt: f64) -> Result<StepInfo, DynamicsError> {
        let t0 = x.t;
        let info = match self.cfg.scheme {
            Scheme::Leapfrog => self.leapfrog(x, dt)?,
            _ => self.implicit(x, dt)?,
        };
        x.t = t0 + dt;
        if !x.is_finite() {
            return Err(self.blow_up(x, t0 + dt, "non-finite state after step".into()));
        }
        Ok(info)
    }

    fn blow_up(&self, x: &FreeState, t: f64, reason: String) -> DynamicsError {
        let e = quadratic_energy(self.ops, x);
        DynamicsError::BlowUpSuspect { t, energy: e, reason }
    }

    fn source_failure(&self, x: &FreeState, e: SourceError) -> DynamicsError {
        match e {
            SourceError::NonFinite { node, input, value } => self.blow_up(
                x,
                x.t,
                format!("source overflow at plate dof {node}: h({input:e}) = {value}"),
            ),
            other => DynamicsError::Source(other),
        }
    }

    /// Forcing `f̄` at the implicit unknown `z̄` for the configured scheme,
    /// with `∂f̄/∂z̄` on request.
    fn implicit_forcing(
        &self,
        w: &DVector<f64>,
        zb: &DVector<f64>,
        dt: f64,
        slopes: bool,
    ) -> Result<(DVector<f64>, Option<DVector<f64>>), SourceError> {
        let ops = self.ops;
        let midpoint = |w: &DVector<f64>| -> Result<(DVector<f64>, Option<DVector<f64>>), SourceError> {
            let wm = w + zb * (0.5 * dt);
            let (f, d) = self.forcing.eval(ops, &wm, slopes)?;
            Ok((f, d.map(|d| d * (0.5 * dt))))
        };
        if self.cfg.scheme == Scheme::ImplicitMidpoint {
            return midpoint(w);
        }
        let wp = w + zb * dt;
        if !(self.forcing.inside_ball(ops, w) && self.forcing.inside_ball(ops, &wp)) {
            return midpoint(w);
        }
        let s = self.forcing.base();
        let n = w.len();
        let mut g = DVector::zeros(n);
        let mut d = slopes.then(|| DVector::zeros(n));
        for i in 0..n {
            let (a, b) = (w[i], wp[i]);
            let delta = b - a;
            let (val, slope) = if delta.abs() <= 0.05 * a.abs().max(b.abs()).max(1.0) {
                // short interval: the antiderivative difference cancels badly,
                // so integrate h and s h'(a + s δ) over [0, 1] directly
                GAUSS_8.iter().fold((0.0, 0.0), |(v, sl), &(node, weight)| {
                    let c = a + node * delta;
                    (v + weight * s.h(c), sl + weight * node * s.h_prime(c))
                })
            } else {
                let q = (s.antiderivative(b) - s.antiderivative(a)) / delta;
                (q, (s.h(b) - q) / delta)
            };
            if !val.is_finite() {
                return Err(SourceError::NonFinite {
                    node: i,
                    input: b,
                    value: val,
                });
            }
            g[i] = val;
            if let Some(d) = d.as_mut() {
                d[i] = slope * dt;
            }
        }
        Ok((g, d))
    }

    fn implicit(&self, x: &mut FreeState, dt: f64) -> Result<StepInfo, DynamicsError> {
        let ops = self.ops;
        let sys = self.system.as_ref().expect("implicit scheme has a factorization");
        debug_assert!((sys.dt2 - dt * dt).abs() <= 1e-14 * sys.dt2);
        let mm = ops.chamber_mass();
        let mp = ops.plate_mass();
        let r_omega = x.y.component_mul(mm) * 2.0 - ops.stiffness_chamber_mul(&x.u) * dt;
        let r_gamma = x.z.component_mul(mp) * 2.0 - ops.stiffness_plate_mul(&x.w) * dt;
        let y0 = sys.solve_chamber(&r_omega);
        let b = r_gamma - ops.trace_free(&y0).component_mul(mp) * dt;

        let solve_s = |rhs: &DVector<f64>| sys.schur.solve(rhs).expect("Schur complement is invertible");
        let mut iterations = 0;
        let (zb, fbar) = if self.forcing.is_zero() {
            (solve_s(&b), None)
        } else {
            let tol = self.cfg.nonlinear_tol;
            let max = self.cfg.max_nonlinear_iters;
            let mut trace = Vec::new();
            let mut zb = x.z.clone();
            let mut converged = false;
            let mut prev = f64::INFINITY;
            let mut growth = 0;
            for _ in 0..max {
                iterations += 1;
                let (f, _) = self
                    .implicit_forcing(&x.w, &zb, dt, false)
                    .map_err(|e| self.source_failure(x, e))?;
                let next = solve_s(&(&b + f.component_mul(mp) * dt));
                let inc = (&next - &zb).amax();
                let scale = next.amax();
                trace.push(if scale > 0.0 { inc / scale } else { inc });
                zb = next;
                if !scale.is_finite() || scale > 1e150 {
                    return Err(self.blow_up(x, x.t, format!("nonlinear iterate exploded (|z̄| = {scale:e})")));
                }
                if inc <= tol * scale {
                    converged = true;
                    break;
                }
                growth = if inc > prev { growth + 1 } else { 0 };
                prev = inc;
                if growth >= 3 {
                    break;
                }
            }
            if !converged {
                // Damped Newton on F(z̄) = S z̄ - b - dt M_Γ f̄(z̄), restarted from
                // the current velocity since the diverged fixed-point iterate is useless.
                let residual = |zb: &DVector<f64>| -> Result<(DVector<f64>, Option<DVector<f64>>), SourceError> {
                    let (f, d) = self.implicit_forcing(&x.w, zb, dt, true)?;
                    Ok((&sys.schur_matrix * zb - &b - f.component_mul(mp) * dt, d))
                };
                zb = x.z.clone();
                let (mut resid, mut d) = residual(&zb).map_err(|e| self.source_failure(x, e))?;
                for _ in 0..max {
                    iterations += 1;
                    let mut jac = sys.schur_matrix.clone();
                    let slopes = d.take().expect("slopes requested");
                    for i in 0..zb.len() {
                        jac[(i, i)] -= dt * mp[i] * slopes[i];
                    }
                    let delta = jac
                        .lu()
                        .solve(&resid)
                        .ok_or_else(|| DynamicsError::NonlinearDivergence {
                            t: x.t,
                            iterations,
                            trace: trace.clone(),
                        })?;
                    let norm = resid.norm();
                    let mut alpha = 1.0;
                    let (mut cand, mut cand_eval);
                    loop {
                        cand = &zb - &delta * alpha;
                        cand_eval = residual(&cand);
                        let better = matches!(&cand_eval, Ok((r, _)) if r.norm() <= (1.0 - 1e-4 * alpha) * norm);
                        if better || alpha < 1e-6 {
                            break;
                        }
                        alpha *= 0.5;
                    }
                    let (r, dd) = cand_eval.map_err(|e| self.source_failure(x, e))?;
                    let inc = (&cand - &zb).amax();
                    zb = cand;
                    resid = r;
                    d = dd;
                    let scale = zb.amax();
                    trace.push(if scale > 0.0 { inc / scale } else { inc });
                    if !scale.is_finite() || scale > 1e150 {
                        return Err(self.blow_up(x, x.t, format!("Newton iterate exploded (|z̄| = {scale:e})")));
                    }
                    if alpha == 1.0 && inc <= tol * scale {
                        converged = true;
                        break;
                    }
                }
            }
            if !converged {
                return Err(DynamicsError::NonlinearDivergence {
                    t: x.t,
                    iterations,
                    trace,
                });
            }
            let (f, _) = self
                .implicit_forcing(&x.w, &zb, dt, false)
                .map_err(|e| self.source_failure(x, e))?;
            (zb, Some(f))
        };

        let yb = sys.solve_chamber(&(&r_omega + ops.trace_transpose_mass(&zb) * dt));
        let scheme_work = fbar.map_or(0.0, |f| dt * ops.plate_dot(&zb, &f));
        x.w += &zb * dt;
        x.z = &zb * 2.0 - &x.z;
        x.u += &yb * dt;
        x.y = &yb * 2.0 - &x.y;
        Ok(StepInfo {
            scheme_work,
            nonlinear_iterations: iterations,
        })
    }

    fn leapfrog(&self, x: &mut FreeState, dt: f64) -> Result<StepInfo, DynamicsError> {
        let ops = self.ops;
        let mm = ops.chamber_mass();
        let mp = ops.plate_mass();
        let h = 0.5 * dt;
        let f0 = if self.forcing.is_zero() {
            DVector::zeros(x.w.len())
        } else {
            self.forcing
                .eval(ops, &x.w, false)
                .map_err(|e| self.source_failure(x, e))?
                .0
        };
        let mut yh = &x.y - ops.stiffness_chamber_mul(&x.u).component_div(mm) * h;
        let b = &x.z - ops.stiffness_plate_mul(&x.w).component_div(mp) * h + &f0 * h;
        let mut zh = b.clone();
        let tw = ops.trace_weights();
        // the velocity coupling is local: one chamber dof per plate dof
        for (j, &c) in ops.trace_map().iter().enumerate() {
            let alpha = h * mp[j] / mm[c];
            let beta = h * tw[j];
            let a = yh[c];
            yh[c] = (a + alpha * b[j]) / (1.0 + alpha * beta);
            zh[j] = b[j] - beta * yh[c];
        }
        x.u += &yh * dt;
        x.w += &zh * dt;
        let f1 = if self.forcing.is_zero() {
            DVector::zeros(x.w.len())
        } else {
            self.forcing
                .eval(ops, &x.w, false)
                .map_err(|e| self.source_failure(x, e))?
                .0
        };
        let coupling = ops.trace_transpose_mass(&zh).component_div(mm);
        x.y = &yh + (coupling - ops.stiffness_chamber_mul(&x.u).component_div(mm)) * h;
        x.z = &zh + (&f1 - ops.stiffness_plate_mul(&x.w).component_div(mp) - ops.trace_free(&yh)) * h;
        let scheme_work = h * (ops.plate_dot(&zh, &f0) + ops.plate_dot(&zh, &f1));
        Ok(StepInfo {
            scheme_work,
            nonlinear_iterations: 0,
        })
    }
}

/// One step from `x` with a freshly factorized integrator.
pub fn step(
    ops: &DiscreteOperators,
    s: impl Into<Forcing>,
    x: &State,
    cfg: &IntegratorConfig,
) -> Result<State, DynamicsError> {
    Integrator::new(ops, s, cfg)?.step(x)
}

/// Sampling options for [`simulate`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulateOptions {
    /// Record every `stride` steps (0 is treated as 1); the final state is always recorded.
    pub stride: usize,
    /// Classify each record against this depth estimate.
    pub d_hat: Option<f64>,
    /// Keep the state of every record.
    pub keep_states: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub energy: EnergyReport,
    pub norm_v: f64,
    pub nehari: f64,
    pub well: Option<WellAnalysis>,
}

impl TraceRecord {
    pub fn t(&self) -> f64 {
        self.energy.t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    BlowUpSuspect { t: f64, energy: f64, reason: String },
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub states: Vec<State>,
    pub final_state: State,
    pub termination: Termination,
    pub steps: usize,
    pub nonlinear_iterations: usize,
}

impl Trace {
    pub fn blew_up(&self) -> bool {
        matches!(self.termination, Termination::BlowUpSuspect { .. })
    }

    pub fn max_abs_identity_residual(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.energy.identity_residual.abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_cal_e_drift(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.energy.cal_e_drift.abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_scheme_residual(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.energy.scheme_residual.abs())
            .fold(0.0, f64::max)
    }
}

/// Running energy accounts along one trajectory.
struct Accounts {
    e0: f64,
    cal_e0: f64,
    source_work: f64,
    scheme_work: f64,
    power: f64,
}

impl Accounts {
    fn new(ops: &DiscreteOperators, forcing: &Forcing, x: &FreeState) -> Result<Self, SourceError> {
        let r = instant_report(ops, forcing.base(), x);
        Ok(Self {
            e0: r.e,
            cal_e0: r.cal_e,
            source_work: 0.0,
            scheme_work: 0.0,
            power: source_power(ops, forcing, x)?,
        })
    }

    fn after_step(
        &mut self,
        ops: &DiscreteOperators,
        forcing: &Forcing,
        x: &FreeState,
        dt: f64,
        info: &StepInfo,
    ) -> Result<(), SourceError> {
        let p = source_power(ops, forcing, x)?;
        self.source_work += 0.5 * dt * (self.power + p);
        self.power = p;
        self.scheme_work += info.scheme_work;
        Ok(())
    }

    fn report(&self, ops: &DiscreteOperators, forcing: &Forcing, x: &FreeState) -> EnergyReport {
        let mut r = instant_report(ops, forcing.base(), x);
        r.source_work = self.source_work;
        r.identity_residual = r.e - self.e0 - self.source_work;
        r.cal_e_drift = r.cal_e - self.cal_e0;
        r.scheme_work = self.scheme_work;
        r.scheme_residual = r.e - self.e0 - self.scheme_work;
        r
    }
}

/// `(f(w), w_t)_Γ`.
fn source_power(ops: &DiscreteOperators, forcing: &Forcing, x: &FreeState) -> Result<f64, SourceError> {
    if forcing.is_zero() {
        return Ok(0.0);
    }
    let (f, _) = forcing.eval(ops, &x.w, false)?;
    Ok(ops.plate_dot(&f, &x.z))
}

fn record(
    ops: &DiscreteOperators,
    forcing: &Forcing,
    acc: &Accounts,
    x: &FreeState,
    step: usize,
    d_hat: Option<f64>,
) -> TraceRecord {
    let energy = acc.report(ops, forcing, x);
    let s = forcing.base();
    let norm_sq = ops.grad_sq(&x.u) + ops.lap_sq(&x.w);
    let nehari = potentialwell::nehari_free(ops, s, &x.u, &x.w);
    let well = d_hat.map(|d| {
        let region = potentialwell::region_of(energy.j, nehari, norm_sq, d);
        WellAnalysis {
            j: energy.j,
            nehari,
            region,
            d_hat: d,
            bound: s.theta().map(|th| th * d / (th - 2.0)),
        }
    });
    TraceRecord {
        step,
        energy,
        norm_v: norm_sq.sqrt(),
        nehari,
        well,
    }
}

/// Number of full steps and the trailing partial step for a horizon.
pub fn step_plan(horizon: f64, dt: f64) -> (usize, f64) {
    let n = (horizon / dt + 1e-9).floor() as usize;
    let rest = horizon - n as f64 * dt;
    (n, if rest > 1e-9 * dt { rest } else { 0.0 })
}

/// Integrates to `horizon`, recording energies every `stride` steps.
///
/// A blow-up suspect ends the run early and is reported in
/// [`Trace::termination`]; other step failures are returned as errors.
pub fn simulate(
    ops: &DiscreteOperators,
    s: impl Into<Forcing>,
    x0: &State,
    cfg: &IntegratorConfig,
    horizon: f64,
    opts: &SimulateOptions,
) -> Result<Trace, DynamicsError> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(DynamicsError::Config(format!("horizon must be >= 0, got {horizon}")));
    }
    let forcing = s.into();
    let integ = Integrator::new(ops, forcing.clone(), cfg)?;
    let mut x = x0.to_free(ops)?;
    let t_start = x.t;
    let mut acc = match Accounts::new(ops, &forcing, &x) {
        Ok(a) => a,
        Err(e) => return Err(integ.source_failure(&x, e)),
    };
    let stride = opts.stride.max(1);
    let mut records = vec![record(ops, &forcing, &acc, &x, 0, opts.d_hat)];
    let mut states = Vec::new();
    if opts.keep_states {
        states.push(x.to_state(ops));
    }
    let (n, rest) = step_plan(horizon, cfg.dt);
    let mut tail: Option<Integrator> = None;
    if rest > 0.0 {
        let mut c = cfg.clone();
        c.dt = rest;
        tail = Some(Integrator::new(ops, forcing.clone(), &c)?);
    }
    let total = n + usize::from(tail.is_some());
    let mut iterations = 0;
    let mut termination = Termination::Completed;
    let mut done = 0;
    for k in 1..=total {
        let (stepper, dt) = if k <= n {
            (&integ, cfg.dt)
        } else {
            (tail.as_ref().expect("tail stepper"), rest)
        };
        let before = x.clone();
        let result = stepper.advance(&mut x, dt).and_then(|info| {
            acc.after_step(ops, &forcing, &x, dt, &info)
                .map_err(|e| stepper.source_failure(&x, e))?;
            Ok(info)
        });
        match result {
            Ok(info) => iterations += info.nonlinear_iterations,
            Err(DynamicsError::BlowUpSuspect { t, energy, reason }) => {
                x = before;
                termination = Termination::BlowUpSuspect { t, energy, reason };
                break;
            }
            Err(e) => return Err(e),
        }
        // exact grid times for full steps
        x.t = if k <= n {
            t_start + k as f64 * cfg.dt
        } else {
            t_start + horizon
        };
        done = k;
        if k % stride == 0 || k == total {
            records.push(record(ops, &forcing, &acc, &x, k, opts.d_hat));
            if opts.keep_states {
                states.push(x.to_state(ops));
            }
        }
    }
    if matches!(termination, Termination::BlowUpSuspect { .. }) && records.last().map(|r| r.step) != Some(done) {
        records.push(record(ops, &forcing, &acc, &x, done, opts.d_hat));
        if opts.keep_states {
            states.push(x.to_state(ops));
        }
    }
    Ok(Trace {
        records,
        states,
        final_state: x.to_state(ops),
        termination,
        steps: done,
        nonlinear_iterations: iterations,
    })
}

/// Constants of the local existence argument.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalExistence {
    /// Radius of the `|Δw|₂` ball, `K = sqrt(4 E0 + 1)`.
    pub k: f64,
    pub t0: f64,
    /// `|h(0)|² |Γ|`.
    pub c0: f64,
    /// `max{2 L_K², 1}`.
    pub c1: f64,
    /// `max_{|s| ≤ C_emb K} |h'(s)|`.
    pub lipschitz: f64,
}

pub fn local_existence_time(
    s: &SourceSpec,
    e0: f64,
    constants: &GridConstants,
) -> Result<LocalExistence, DynamicsError> {
    if !(e0.is_finite() && e0 >= 0.0) {
        return Err(DynamicsError::Config(format!("initial energy must be >= 0, got {e0}")));
    }
    let k = (4.0 * e0 + 1.0).sqrt();
    let lipschitz = s.max_abs_derivative(constants.embedding * k);
    let h0 = s.h(0.0);
    let c0 = h0 * h0 * constants.gamma_measure;
    let c1 = (2.0 * lipschitz * lipschitz).max(1.0);
    // C₀ = 0 makes the first bound vacuous
    let first = if c0 == 0.0 { f64::INFINITY } else { 1.0 / (4.0 * c0) };
    Ok(LocalExistence {
        k,
        t0: first.min(LN_2 / c1),
        c0,
        c1,
        lipschitz,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GronwallReport {
    pub c: f64,
    /// Envelope constant `max{c² |Γ|, 2 c² C_P² + 1}`.
    pub envelope_constant: f64,
    pub passed: bool,
    /// `min_t (envelope(t) - E(t))` over records with `t > 0`.
    pub margin: f64,
    pub first_violation_t: Option<f64>,
}

/// The envelope constant obtained by retracing the Hölder/Young/Poincaré
/// steps: `½|h(w)|² ≤ c²|Γ| + 2c² C_P² E` and `½|w_t|² ≤ E`.
pub fn gronwall_constant(c: f64, constants: &GridConstants) -> f64 {
    let cp = constants.poincare_plate;
    (c * c * constants.gamma_measure).max(2.0 * c * c * cp * cp + 1.0)
}

pub fn gronwall_check(records: &[TraceRecord], c: f64, constants: &GridConstants) -> GronwallReport {
    let big_c = gronwall_constant(c, constants);
    let e0 = records.first().map_or(0.0, |r| r.energy.e);
    let t0 = records.first().map_or(0.0, |r| r.t());
    let mut margin = f64::INFINITY;
    let mut first = None;
    for r in records {
        let t = r.t() - t0;
        let env = (e0 + big_c * t) * (big_c * t).exp();
        let m = env - r.energy.e;
        if m < 0.0 && first.is_none() {
            first = Some(r.t());
        }
        if t > 0.0 {
            margin = margin.min(m);
        }
    }
    GronwallReport {
        c,
        envelope_constant: big_c,
        passed: first.is_none() && margin > 0.0,
        margin,
        first_violation_t: first,
    }
}

/// Energy of the difference of two states.
fn difference_energy(ops: &DiscreteOperators, a: &FreeState, b: &FreeState) -> f64 {
    let d = FreeState {
        u: &a.u - &b.u,
        w: &a.w - &b.w,
        y: &a.y - &b.y,
        z: &a.z - &b.z,
        t: a.t,
    };
    quadratic_energy(ops, &d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuousDependenceReport {
    pub epsilon: f64,
    pub t0: f64,
    /// `C(K)` used in the bound.
    pub c_k: f64,
    pub initial_difference_energy: f64,
    pub max_difference_energy: f64,
    /// `sup Ẽ(t) / (Ẽ(0) e^{C(K) T₀})`; 0 when `Ẽ(0) = 0`.
    pub ratio: f64,
    pub steps: usize,
}

impl ContinuousDependenceReport {
    pub fn passed(&self) -> bool {
        self.ratio <= 1.0
    }
}

/// A seeded perturbation of all four free components, each scaled by `epsilon`.
pub fn perturbed(ops: &DiscreteOperators, x: &State, epsilon: f64, seed: u64) -> Result<State, DynamicsError> {
    let mut f = x.to_free(ops)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in [&mut f.u, &mut f.w, &mut f.y, &mut f.z] {
        for e in v.iter_mut() {
            *e += epsilon * rng.gen_range(-1.0..1.0);
        }
    }
    Ok(f.to_state(ops))
}

/// Paired runs from `x0` and a seeded `ε`-perturbation over `[0, T₀]`.
///
/// `C(K) = max{C₁, L_K C_P}`: the retraced bound
/// `|(h(w) - h(ŵ), z_t)| ≤ L_K C_P |Δz| |z_t| ≤ L_K C_P Ẽ`, taken no smaller
/// than the local-existence constant `C₁`.
#[allow(clippy::too_many_arguments)]
pub fn continuous_dependence_check(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    x0: &State,
    epsilon: f64,
    seed: u64,
    cfg: &IntegratorConfig,
    t0: Option<f64>,
) -> Result<ContinuousDependenceReport, DynamicsError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(DynamicsError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let xp = perturbed(ops, x0, epsilon, seed)?;
    let e_a = energy(ops, s, x0)?.e;
    let e_b = energy(ops, s, &xp)?.e;
    let le = local_existence_time(s, e_a.max(e_b), ops.constants())?;
    let horizon = t0.unwrap_or(le.t0);
    let c_k = le.c1.max(le.lipschitz * ops.constants().poincare_plate);

    let integ = Integrator::new(ops, s.clone(), cfg)?;
    let mut a = x0.to_free(ops)?;
    let mut b = xp.to_free(ops)?;
    let d0 = difference_energy(ops, &a, &b);
    let mut dmax = d0;
    let (n, rest) = step_plan(horizon, cfg.dt);
    let tail = if rest > 0.0 {
        let mut c = cfg.clone();
        c.dt = rest;
        Some(Integrator::new(ops, s.clone(), &c)?)
    } else {
        None
    };
    for k in 0..n + usize::from(tail.is_some()) {
        let (stepper, dt) = if k < n {
            (&integ, cfg.dt)
        } else {
            (tail.as_ref().unwrap(), rest)
        };
        stepper.advance(&mut a, dt)?;
        stepper.advance(&mut b, dt)?;
        dmax = dmax.max(difference_energy(ops, &a, &b));
    }
    let ratio = if d0 == 0.0 {
        0.0
    } else {
        dmax / (d0 * (c_k * horizon).exp())
    };
    Ok(ContinuousDependenceReport {
        epsilon,
        t0: horizon,
        c_k,
        initial_difference_energy: d0,
        max_difference_energy: dmax,
        ratio,
        steps: n + usize::from(tail.is_some()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationReport {
    pub k: f64,
    pub t0: f64,
    /// Largest sup-norm distance between the two trajectories.
    pub max_sup_difference: f64,
    /// Largest `|Δ_h w|₂` seen on the plain trajectory.
    pub max_plate_norm: f64,
    pub max_energy: f64,
    pub passed: bool,
}

impl TruncationReport {
    pub const TOL: f64 = 1e-12;
}

/// Compares trajectories under `h` and `h^K` on `[0, T₀]`, `K² = 4E(0) + 1`.
pub fn truncation_consistency_check(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    x0: &State,
    cfg: &IntegratorConfig,
) -> Result<TruncationReport, DynamicsError> {
    let e0 = energy(ops, s, x0)?.e;
    let le = local_existence_time(s, e0, ops.constants())?;
    let trunc = TruncatedSource::new(s.clone(), le.k)?;
    let plain = Integrator::new(ops, s.clone(), cfg)?;
    let cut = Integrator::new(ops, trunc, cfg)?;
    let (n, rest) = step_plan(le.t0, cfg.dt);
    let tails = if rest > 0.0 {
        let mut c = cfg.clone();
        c.dt = rest;
        Some((
            Integrator::new(ops, s.clone(), &c)?,
            Integrator::new(ops, TruncatedSource::new(s.clone(), le.k)?, &c)?,
        ))
    } else {
        None
    };
    let mut a = x0.to_free(ops)?;
    let mut b = a.clone();
    let mut max_diff = 0.0f64;
    let mut max_norm = ops.lap_sq(&a.w).sqrt();
    let mut max_energy = e0;
    for k in 0..n + usize::from(tails.is_some()) {
        let (p, c, dt) = if k < n {
            (&plain, &cut, cfg.dt)
        } else {
            let t = tails.as_ref().unwrap();
            (&t.0, &t.1, rest)
        };
        p.advance(&mut a, dt)?;
        c.advance(&mut b, dt)?;
        max_diff = max_diff.max(a.sup_distance(&b));
        max_norm = max_norm.max(ops.lap_sq(&a.w).sqrt());
        max_energy = max_energy.max(quadratic_energy(ops, &a));
    }
    Ok(TruncationReport {
        k: le.k,
        t0: le.t0,
        max_sup_difference: max_diff,
        max_plate_norm: max_norm,
        max_energy,
        passed: max_diff <= TruncationReport::TOL && max_energy <= 0.5 * le.k * le.k,
    })
}
