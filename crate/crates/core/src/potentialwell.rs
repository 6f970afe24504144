//! Potential-well quantities: the functional `J`, the Nehari functional, the
//! well depth `d = inf_N J`, region classification, and the invariance check
//! for trajectories that start in the stable set.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{source_potential, State, TraceRecord};
use crate::error::WellError;
use crate::mesh::GridFunction;
use crate::operators::DiscreteOperators;
use crate::sources::SourceSpec;

/// Position of a state relative to the potential well.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    W1,
    W2,
    #[serde(rename = "on_N")]
    OnN,
    #[serde(rename = "outside_W")]
    OutsideW,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::W1 => "W1",
            Region::W2 => "W2",
            Region::OnN => "on_N",
            Region::OutsideW => "outside_W",
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WellAnalysis {
    #[serde(rename = "J")]
    pub j: f64,
    pub nehari: f64,
    pub region: Region,
    pub d_hat: f64,
    /// `θ d̂ / (θ - 2)` when the source has an AR exponent.
    pub bound: Option<f64>,
}

/// Relative half-width of the band classified as on the Nehari manifold.
pub const ON_N_TOL: f64 = 1e-8;

/// Classification rule shared by [`classify`] and trace observers.
///
/// `norm_sq` is `‖(u,w)‖²_V`; the band `|nehari| ≤ 1e-8 ‖(u,w)‖²_V` is purely
/// relative so it scales with the state.
pub fn region_of(j: f64, nehari: f64, norm_sq: f64, d_hat: f64) -> Region {
    if norm_sq == 0.0 {
        Region::W1
    } else if j >= d_hat {
        Region::OutsideW
    } else if nehari.abs() <= ON_N_TOL * norm_sq {
        Region::OnN
    } else if nehari > 0.0 {
        Region::W1
    } else {
        Region::W2
    }
}

/// `∫_Γ h(w) w` on free values.
fn source_pairing(ops: &DiscreteOperators, s: &SourceSpec, w: &DVector<f64>) -> f64 {
    if s.is_zero() {
        return 0.0;
    }
    w.iter()
        .zip(ops.plate_mass().iter())
        .map(|(&x, m)| m * s.h(x) * x)
        .sum()
}

pub(crate) fn nehari_free(ops: &DiscreteOperators, s: &SourceSpec, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
    ops.grad_sq(u) + ops.lap_sq(w) - source_pairing(ops, s, w)
}

fn j_free(ops: &DiscreteOperators, s: &SourceSpec, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
    0.5 * (ops.grad_sq(u) + ops.lap_sq(w)) - source_potential(ops, s, w)
}

/// `J(u,w) = ½‖(u,w)‖²_V - ∫_Γ H(w)`.
pub fn functional_j(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    u: &GridFunction,
    w: &GridFunction,
) -> Result<f64, WellError> {
    Ok(j_free(ops, s, &ops.gather_chamber(u)?, &ops.gather_plate(w)?))
}

/// `‖∇u‖² + |Δw|² - ∫_Γ h(w) w`.
pub fn nehari_value(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    u: &GridFunction,
    w: &GridFunction,
) -> Result<f64, WellError> {
    Ok(nehari_free(ops, s, &ops.gather_chamber(u)?, &ops.gather_plate(w)?))
}

/// Scale `λ* > 0` at which the ray through `(u, w)` meets the Nehari manifold.
pub fn nehari_scaling(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    u: &GridFunction,
    w: &GridFunction,
) -> Result<f64, WellError> {
    let u = ops.gather_chamber(u)?;
    let w = ops.gather_plate(w)?;
    let n = ops.grad_sq(&u) + ops.lap_sq(&w);
    ray_root(ops, s, n, &w)
}

const MAX_EXPANSIONS: usize = 200;

/// Root of `g(λ) = λ² N - ∫ h(λw) λw` by geometric bracketing and bisection.
///
/// Overflowing source values count as `g < 0` (the source has won).
fn ray_root(ops: &DiscreteOperators, s: &SourceSpec, n: f64, w: &DVector<f64>) -> Result<f64, WellError> {
    if w.iter().all(|&x| x == 0.0) {
        return Err(WellError::ZeroPlateComponent);
    }
    let g_sign = |lam: f64| -> f64 {
        let scaled = w * lam;
        let p = source_pairing(ops, s, &scaled);
        let g = lam * lam * n - p;
        if g.is_nan() || !p.is_finite() {
            -1.0
        } else {
            g
        }
    };
    let g1 = g_sign(1.0);
    if g1 == 0.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi);
    if g1 > 0.0 {
        lo = 1.0;
        hi = 2.0;
        let mut k = 0;
        while g_sign(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
            k += 1;
            if k >= MAX_EXPANSIONS || !hi.is_finite() {
                return Err(WellError::NoCrossing);
            }
        }
    } else {
        hi = 1.0;
        lo = 0.5;
        let mut k = 0;
        while g_sign(lo) <= 0.0 {
            hi = lo;
            lo *= 0.5;
            k += 1;
            if k >= MAX_EXPANSIONS || lo == 0.0 {
                return Err(WellError::NoCrossing);
            }
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = g_sign(mid);
        if g == 0.0 {
            return Ok(mid);
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // the endpoint with the smaller |g|
    let (gl, gh) = (g_sign(lo).abs(), g_sign(hi).abs());
    Ok(if gl <= gh { lo } else { hi })
}

/// Budget and basis of the depth search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthOptions {
    /// Number of lowest plate (and, with `full`, chamber) eigenmodes.
    pub modes: usize,
    pub restarts: usize,
    /// Coordinate-descent sweeps per restart.
    pub sweeps: usize,
    pub seed: u64,
    /// Search over `(u, w)` instead of `u = 0` directions.
    pub full: bool,
}

impl Default for DepthOptions {
    fn default() -> Self {
        Self {
            modes: 16,
            restarts: 8,
            sweeps: 40,
            seed: 0,
            full: false,
        }
    }
}

/// Lower-bound structure behind `d > 0`.
///
/// On the Nehari manifold `J ≥ (½ - 1/θ)‖(u,w)‖²_V`, and every point of it
/// satisfies `‖(u,w)‖_V ≥ c₀`, where `c₀` is the smallest `y > 0` with
/// `|Γ| C_emb y h(C_emb y) ≥ y²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthCertificate {
    pub theta: f64,
    pub c0: f64,
    /// `(½ - 1/θ) c₀²`.
    pub lower_bound: f64,
    /// Smallest `λ* ‖v‖_V` over all evaluated directions.
    pub observed_min_radius: f64,
    /// `d̂ ≥ lower_bound`.
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DepthEstimate {
    /// Upper estimate of the depth; `+∞` when the Nehari manifold was never met.
    pub d_hat: f64,
    /// Witness direction (unit `V`-norm) and its scaling `λ*`.
    pub direction_u: Option<GridFunction>,
    pub direction_w: Option<GridFunction>,
    pub lambda_star: Option<f64>,
    pub certificate: Option<DepthCertificate>,
    /// The last sweep still improved: `d̂` is a budget-limited upper bound.
    pub budget_exhausted: bool,
    pub evaluations: usize,
    pub options: DepthOptions,
}

impl DepthEstimate {
    /// `θ d̂ / (θ - 2)`.
    pub fn energy_bound(&self, theta: f64) -> f64 {
        theta * self.d_hat / (theta - 2.0)
    }
}

struct Basis<'a> {
    ops: &'a DiscreteOperators,
    /// Chamber modes (full search only) then plate modes.
    chamber: Vec<(f64, &'a DVector<f64>)>,
    plate: Vec<(f64, &'a DVector<f64>)>,
}

impl Basis<'_> {
    fn dim(&self) -> usize {
        self.chamber.len() + self.plate.len()
    }

    /// Rescales coefficients to unit `V`-norm; `None` when the plate part vanishes.
    fn normalize(&self, c: &mut [f64]) -> Option<()> {
        let nc = self.chamber.len();
        let plate_sq: f64 = self.plate.iter().zip(&c[nc..]).map(|((l, _), a)| l * a * a).sum();
        if plate_sq == 0.0 {
            return None;
        }
        let sq: f64 = plate_sq
            + self
                .chamber
                .iter()
                .zip(&c[..nc])
                .map(|((l, _), a)| l * a * a)
                .sum::<f64>();
        let f = 1.0 / sq.sqrt();
        c.iter_mut().for_each(|a| *a *= f);
        Some(())
    }

    fn fields(&self, c: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let nc = self.chamber.len();
        let mut u = DVector::zeros(self.ops.chamber_dofs());
        for ((_, v), a) in self.chamber.iter().zip(&c[..nc]) {
            u.axpy(*a, v, 1.0);
        }
        let mut w = DVector::zeros(self.ops.plate_dofs());
        for ((_, v), a) in self.plate.iter().zip(&c[nc..]) {
            w.axpy(*a, v, 1.0);
        }
        (u, w)
    }
}

/// `J(λ* v)` and `λ*` for unit coefficients `c`.
fn ray_value(basis: &Basis, s: &SourceSpec, c: &[f64]) -> Option<(f64, f64, f64)> {
    let (u, w) = basis.fields(c);
    let n = basis.ops.grad_sq(&u) + basis.ops.lap_sq(&w);
    let lam = ray_root(basis.ops, s, n, &w).ok()?;
    let j = j_free(basis.ops, s, &(&u * lam), &(&w * lam));
    j.is_finite().then_some((j, lam, lam * n.sqrt()))
}

struct RestartResult {
    value: f64,
    coeffs: Vec<f64>,
    lambda: f64,
    min_radius: f64,
    evaluations: usize,
    still_improving: bool,
}

fn descend(basis: &Basis, s: &SourceSpec, mut c: Vec<f64>, sweeps: usize) -> Option<RestartResult> {
    basis.normalize(&mut c)?;
    let mut evaluations = 1;
    let (mut best, mut lambda, mut min_radius) =
        ray_value(basis, s, &c).unwrap_or((f64::INFINITY, f64::NAN, f64::INFINITY));
    let mut step = 0.5;
    let mut still_improving = false;
    for _ in 0..sweeps {
        let mut improved = false;
        for k in 0..basis.dim() {
            for sign in [1.0, -1.0] {
                let mut trial = c.clone();
                trial[k] += sign * step * (1.0 / basis_scale(basis, k));
                if basis.normalize(&mut trial).is_none() {
                    continue;
                }
                evaluations += 1;
                if let Some((v, lam, radius)) = ray_value(basis, s, &trial) {
                    min_radius = min_radius.min(radius);
                    if v < best {
                        best = v;
                        lambda = lam;
                        c = trial;
                        improved = true;
                        break;
                    }
                }
            }
        }
        still_improving = improved;
        if !improved {
            step *= 0.5;
            if step < 1e-8 {
                break;
            }
        }
    }
    best.is_finite().then_some(RestartResult {
        value: best,
        coeffs: c,
        lambda,
        min_radius,
        evaluations,
        still_improving,
    })
}

/// Coefficient scale of basis entry `k` (unit `V`-norm of that mode alone).
fn basis_scale(basis: &Basis, k: usize) -> f64 {
    let nc = basis.chamber.len();
    let l = if k < nc {
        basis.chamber[k].0
    } else {
        basis.plate[k - nc].0
    };
    l.sqrt()
}

/// `c₀`: the first `y > 0` with `|Γ| C_emb y h(C_emb y) ≥ y²`.
fn nehari_radius_bound(ops: &DiscreteOperators, s: &SourceSpec) -> Option<f64> {
    let c = ops.constants();
    let reached = |y: f64| {
        let a = c.embedding * y;
        let lhs = c.gamma_measure * a * s.h(a);
        !lhs.is_finite() || lhs >= y * y
    };
    let mut hi = 1e-6;
    let mut k = 0;
    while !reached(hi) {
        hi *= 2.0;
        k += 1;
        if k > 400 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if reached(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Upper estimate of `d = inf_N J` over a reduced eigenmode basis.
///
/// Restart 0 starts from the fundamental plate mode, restart `i > 0` from
/// Gaussian coefficients seeded with `seed + i`. Restarts run in parallel
/// and the reduction is deterministic, so `d̂` depends only on the options and
/// never increases when `restarts` or `sweeps` grow.
pub fn depth_estimate(
    ops: &DiscreteOperators,
    s: &SourceSpec,
    opts: &DepthOptions,
) -> Result<DepthEstimate, WellError> {
    if opts.modes == 0 || opts.restarts == 0 {
        return Err(WellError::Parameter("modes and restarts must be at least 1".into()));
    }
    let m = opts.modes.min(ops.plate_dofs());
    let chamber_modes = if opts.full {
        ops.chamber_modes(opts.modes)
    } else {
        Vec::new()
    };
    let basis = Basis {
        ops,
        chamber: chamber_modes.iter().map(|md| (md.eigenvalue, &md.values)).collect(),
        plate: ops.plate_modes()[..m]
            .iter()
            .map(|md| (md.eigenvalue, &md.values))
            .collect(),
    };
    let empty = || DepthEstimate {
        d_hat: f64::INFINITY,
        direction_u: None,
        direction_w: None,
        lambda_star: None,
        certificate: None,
        budget_exhausted: false,
        evaluations: 0,
        options: opts.clone(),
    };
    if s.is_zero() {
        return Ok(empty());
    }
    let dim = basis.dim();
    let nc = basis.chamber.len();
    let results: Vec<Option<RestartResult>> = (0..opts.restarts)
        .into_par_iter()
        .map(|i| {
            let mut c = vec![0.0; dim];
            if i == 0 {
                c[nc] = 1.0;
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
                for (k, a) in c.iter_mut().enumerate() {
                    *a = rng.sample::<f64, _>(StandardNormal) / basis_scale(&basis, k);
                }
            }
            descend(&basis, s, c, opts.sweeps)
        })
        .collect();
    let evaluations = results.iter().flatten().map(|r| r.evaluations).sum();
    let best = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)));
    let Some((_, best)) = best else {
        let mut e = empty();
        e.evaluations = evaluations;
        return Ok(e);
    };
    let min_radius = results
        .iter()
        .flatten()
        .map(|r| r.min_radius)
        .fold(f64::INFINITY, f64::min);
    let (u, w) = basis.fields(&best.coeffs);
    let certificate = s.theta().and_then(|theta| {
        nehari_radius_bound(ops, s).map(|c0| {
            let lower_bound = (0.5 - 1.0 / theta) * c0 * c0;
            DepthCertificate {
                theta,
                c0,
                lower_bound,
                observed_min_radius: min_radius,
                holds: best.value >= lower_bound && lower_bound > 0.0,
            }
        })
    });
    Ok(DepthEstimate {
        d_hat: best.value,
        direction_u: Some(ops.scatter_chamber(&u)),
        direction_w: Some(ops.scatter_plate(&w)),
        lambda_star: Some(best.lambda),
        certificate,
        budget_exhausted: best.still_improving,
        evaluations,
        options: opts.clone(),
    })
}

/// `J`, the Nehari value and the region of a state's position `(u, w)`.
pub fn classify(ops: &DiscreteOperators, s: &SourceSpec, x: &State, d_hat: f64) -> Result<WellAnalysis, WellError> {
    if d_hat.is_nan() || d_hat <= 0.0 {
        return Err(WellError::Parameter(format!(
            "depth estimate must be positive, got {d_hat}"
        )));
    }
    let u = ops.gather_chamber(&x.u)?;
    let w = ops.gather_plate(&x.w)?;
    let norm_sq = ops.grad_sq(&u) + ops.lap_sq(&w);
    let j = j_free(ops, s, &u, &w);
    let nehari = nehari_free(ops, s, &u, &w);
    Ok(WellAnalysis {
        j,
        nehari,
        region: region_of(j, nehari, norm_sq, d_hat),
        d_hat,
        bound: s.theta().map(|th| th * d_hat / (th - 2.0)),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceStatus {
    Passed,
    Failed,
    /// The initial state is not in the stable set below the depth.
    Exploratory,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceViolation {
    pub t: f64,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WellInvarianceReport {
    pub status: InvarianceStatus,
    pub d_hat: f64,
    pub first_violation: Option<InvarianceViolation>,
    /// `max |ℰ(t) - ℰ(0)| / max(|ℰ(0)|, E(0))`.
    pub max_relative_drift: f64,
    pub max_energy: f64,
    pub energy_bound: f64,
    pub max_source_potential: f64,
    pub source_potential_bound: f64,
}

/// Checks that a trajectory starting in `W1` with `ℰ(0) < d̂` stays there,
/// with `J ≤ ℰ(t) = ℰ(0) < d̂`, `E < θd̂/(θ-2)` and `∫H(w) < 2d̂/(θ-2)`.
///
/// `tol` is the relative tolerance granted to the conservation of `ℰ`.
pub fn well_invariance_check(records: &[TraceRecord], theta: f64, d_hat: f64, tol: f64) -> WellInvarianceReport {
    let energy_bound = theta * d_hat / (theta - 2.0);
    let source_potential_bound = 2.0 * d_hat / (theta - 2.0);
    let mut report = WellInvarianceReport {
        status: InvarianceStatus::Passed,
        d_hat,
        first_violation: None,
        max_relative_drift: 0.0,
        max_energy: 0.0,
        energy_bound,
        max_source_potential: 0.0,
        source_potential_bound,
    };
    let Some(first) = records.first() else {
        report.status = InvarianceStatus::Exploratory;
        return report;
    };
    let region0 = first.well.as_ref().map(|w| w.region);
    if region0 != Some(Region::W1) || first.energy.cal_e >= d_hat {
        report.status = InvarianceStatus::Exploratory;
    }
    let cal_e0 = first.energy.cal_e;
    let scale = cal_e0.abs().max(first.energy.e).max(f64::MIN_POSITIVE);
    let slack = tol * scale;
    for r in records {
        let e = &r.energy;
        let drift = (e.cal_e - cal_e0).abs() / scale;
        report.max_relative_drift = report.max_relative_drift.max(drift);
        report.max_energy = report.max_energy.max(e.e);
        report.max_source_potential = report.max_source_potential.max(e.source_potential);
        let checks: [(bool, &str); 6] = [
            (
                r.well.as_ref().map(|w| w.region) == Some(Region::W1),
                "region is not W1",
            ),
            (e.j <= e.cal_e + slack, "J exceeds the total energy"),
            (drift <= tol, "total energy drifted beyond tolerance"),
            (e.cal_e < d_hat, "total energy reached the depth"),
            (e.e < energy_bound, "quadratic energy reached θd/(θ-2)"),
            (e.source_potential < source_potential_bound, "∫H(w) reached 2d/(θ-2)"),
        ];
        if let Some((_, what)) = checks.iter().find(|(ok, _)| !ok) {
            if report.first_violation.is_none() {
                report.first_violation = Some(InvarianceViolation {
                    t: e.t,
                    condition: what.to_string(),
                });
            }
        }
    }
    if report.status == InvarianceStatus::Passed && report.first_violation.is_some() {
        report.status = InvarianceStatus::Failed;
    }
    report
}
