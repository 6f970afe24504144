//! Discrete counterparts of the Dirichlet-Neumann Laplacian, the clamped
//! biharmonic, the trace and the Neumann lift.
//!
//! Everything is assembled from quadratic forms so that the operators are
//! symmetric in the trapezoid inner products of [`crate::mesh`]:
//!
//! * chamber stiffness `K_Ω` sums `c_e (u_a - u_b)²` over grid edges, with
//!   `c_e` the product of transverse trapezoid weights over the edge length;
//!   `L = M_Ω⁻¹ K_Ω` reproduces the 5/7-point stencil with ghost elimination
//!   on the Neumann face;
//! * plate stiffness `K_Γ = Dᵀ W D`, where `D` is the clamped 2nd-difference
//!   Laplacian (ghost reflection `w_{-1} = w_1`) evaluated at every plate node
//!   and `W` the trapezoid weights; `B = M_Γ⁻¹ K_Γ` is the 5-point (beam) or
//!   13-point (plate) fourth-difference stencil;
//! * the lift solves `K_Ω q = Trᵀ M_Γ p`, which makes
//!   `⟨A·Lift p, φ⟩ = (p, Tr φ)_Γ` hold up to solver round-off.
//!
//! All vectors handed to the linear algebra are indexed by *free* nodes.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MeshError, OperatorError};
use crate::mesh::{ChamberGrid, GridFunction, GridKind, PlateGrid};

/// Grid-dependent constants measured once at assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConstants {
    /// `|Γ|`.
    pub gamma_measure: f64,
    /// Smallest `C` with `‖u‖₂ ≤ C ‖∇_h u‖₂`.
    pub poincare_chamber: f64,
    /// Smallest `C` with `|w|₂ ≤ C |Δ_h w|₂`.
    pub poincare_plate: f64,
    /// Smallest `C` with `|w|_∞ ≤ C |Δ_h w|₂`.
    pub embedding: f64,
    /// Largest eigenvalue of `M_Ω⁻¹ K_Ω`.
    pub chamber_spectral_radius: f64,
    /// Largest eigenvalue of `M_Γ⁻¹ K_Γ`.
    pub plate_spectral_radius: f64,
    /// Leapfrog stability limit (with a 0.9 safety factor).
    pub leapfrog_dt_max: f64,
}

/// Mass-normalized eigenvector on free nodes.
#[derive(Clone, Debug)]
pub struct Mode {
    pub eigenvalue: f64,
    pub values: DVector<f64>,
}

/// Matrices that [`DiscreteOperators::write_coo`] can export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorMatrix {
    ChamberStiffness,
    ChamberMass,
    PlateStiffness,
    PlateMass,
    Trace,
}

const LEAPFROG_SAFETY: f64 = 0.9;

#[derive(Clone)]
pub struct DiscreteOperators {
    chamber: ChamberGrid,
    plate: PlateGrid,
    chamber_free: Vec<usize>,
    chamber_slot: Vec<Option<usize>>,
    plate_free: Vec<usize>,
    plate_slot: Vec<Option<usize>>,
    chamber_mass: DVector<f64>,
    plate_mass: DVector<f64>,
    chamber_stiffness: CsrMatrix<f64>,
    plate_laplacian: CsrMatrix<f64>,
    plate_node_weights: Vec<f64>,
    plate_stiffness: DMatrix<f64>,
    trace: Vec<usize>,
    trace_weight: Vec<f64>,
    chamber_factor: Arc<CscCholesky<f64>>,
    lift_fault: Option<(usize, usize, f64)>,
    plate_modes: Arc<Vec<Mode>>,
    constants: GridConstants,
}

impl std::fmt::Debug for DiscreteOperators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteOperators")
            .field("chamber", &self.chamber.cells())
            .field("chamber_dofs", &self.chamber_free.len())
            .field("plate_dofs", &self.plate_free.len())
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

fn free_maps(count: usize, constrained: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut free = Vec::new();
    let mut slot = vec![None; count];
    for (i, s) in slot.iter_mut().enumerate() {
        if !constrained(i) {
            *s = Some(free.len());
            free.push(i);
        }
    }
    (free, slot)
}

pub(crate) fn csr_mul(a: &CsrMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let offsets = a.row_offsets();
    let cols = a.col_indices();
    let vals = a.values();
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in offsets[r]..offsets[r + 1] {
            acc += vals[k] * x[cols[k]];
        }
        *o = acc;
    }
}

/// Assembles all discrete operators for an aligned chamber/plate pair.
pub fn assemble(chamber: &ChamberGrid, plate: &PlateGrid) -> Result<DiscreteOperators, OperatorError> {
    plate.check_alignment(chamber)?;
    let dim = chamber.dim();
    let (chamber_free, chamber_slot) = free_maps(chamber.node_count(), |i| chamber.is_constrained(i));
    let (plate_free, plate_slot) = free_maps(plate.node_count(), |i| plate.is_constrained(i));
    let nc = chamber_free.len();
    let np = plate_free.len();

    let chamber_mass = DVector::from_iterator(nc, chamber_free.iter().map(|&i| chamber.weight(i)));
    let plate_mass = DVector::from_iterator(np, plate_free.iter().map(|&i| plate.weight(i)));

    // Chamber stiffness from edge differences.
    let mut coo = CooMatrix::new(nc, nc);
    let cells = chamber.cells().to_vec();
    let h = chamber.spacing().to_vec();
    for node in 0..chamber.node_count() {
        let c = chamber.coords(node);
        for a in 0..dim {
            if c[a] == cells[a] {
                continue;
            }
            let mut nb = c.clone();
            nb[a] += 1;
            let other = chamber.index(&nb);
            let transverse: f64 = (0..dim)
                .filter(|&b| b != a)
                .map(|b| crate::mesh::trapezoid_weight(c[b], cells[b], h[b]))
                .product();
            let coef = transverse / h[a];
            let (i, j) = (chamber_slot[node], chamber_slot[other]);
            if let Some(i) = i {
                coo.push(i, i, coef);
            }
            if let Some(j) = j {
                coo.push(j, j, coef);
            }
            if let (Some(i), Some(j)) = (i, j) {
                coo.push(i, j, -coef);
                coo.push(j, i, -coef);
            }
        }
    }
    let chamber_stiffness = CsrMatrix::from(&coo);

    // Clamped plate Laplacian at every plate node, acting on free values.
    let pdim = plate.dim();
    let pcells = plate.cells().to_vec();
    let ph = plate.spacing().to_vec();
    let mut dcoo = CooMatrix::new(plate.node_count(), np);
    for node in 0..plate.node_count() {
        let c = plate.coords(node);
        for a in 0..pdim {
            let inv = 1.0 / (ph[a] * ph[a]);
            // ghost reflection across the clamped edge encodes ∂ν w = 0
            let left = if c[a] == 0 { 1 } else { c[a] - 1 };
            let right = if c[a] == pcells[a] { pcells[a] - 1 } else { c[a] + 1 };
            for k in [left, right] {
                let mut nb = c.clone();
                nb[a] = k;
                if let Some(j) = plate_slot[plate.index(&nb)] {
                    dcoo.push(node, j, inv);
                }
            }
            if let Some(j) = plate_slot[node] {
                dcoo.push(node, j, -2.0 * inv);
            }
        }
    }
    let plate_laplacian = CsrMatrix::from(&dcoo);
    let plate_node_weights = plate.weights();
    let d_dense = DMatrix::from(&dcoo);
    let mut wd = d_dense.clone();
    for (r, mut row) in wd.row_iter_mut().enumerate() {
        row *= plate_node_weights[r];
    }
    let kp = d_dense.transpose() * wd;
    let plate_stiffness = (&kp + kp.transpose()) * 0.5;

    let trace: Vec<usize> = plate_free
        .iter()
        .map(|&p| {
            let c = plate.chamber_nodes()[p];
            chamber_slot[c].expect("free plate node maps onto a free chamber node")
        })
        .collect();
    let trace_weight = vec![1.0; np];

    let csc = CscMatrix::from(&coo);
    let chamber_factor = CscCholesky::factor(&csc).map_err(|e| OperatorError::Factorization(format!("{e:?}")))?;

    // Plate generalized eigenproblem K v = λ M v via the symmetric scaling M^{-1/2}.
    let inv_sqrt_m = plate_mass.map(|m| 1.0 / m.sqrt());
    let mut scaled = plate_stiffness.clone();
    for i in 0..np {
        for j in 0..np {
            scaled[(i, j)] *= inv_sqrt_m[i] * inv_sqrt_m[j];
        }
    }
    let scaled = (&scaled + scaled.transpose()) * 0.5;
    let eig = SymmetricEigen::new(scaled);
    let mut order: Vec<usize> = (0..np).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let plate_modes: Vec<Mode> = order
        .iter()
        .map(|&k| {
            let mut v = eig.eigenvectors.column(k).component_mul(&inv_sqrt_m);
            orient(&mut v);
            Mode {
                eigenvalue: eig.eigenvalues[k],
                values: v,
            }
        })
        .collect();
    if plate_modes.first().is_none_or(|m| m.eigenvalue <= 0.0) {
        return Err(OperatorError::Dense("plate stiffness is not positive definite"));
    }

    // (K_Γ⁻¹)_ii = Σ_k φ_k(i)² / λ_k for mass-normalized modes.
    let mut diag_inv = vec![0.0; np];
    for m in &plate_modes {
        for (i, d) in diag_inv.iter_mut().enumerate() {
            *d += m.values[i] * m.values[i] / m.eigenvalue;
        }
    }
    let embedding = diag_inv.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();

    let (chamber_min, chamber_max) = chamber_extreme_eigenvalues(chamber);
    let plate_min = plate_modes[0].eigenvalue;
    let plate_max = plate_modes[np - 1].eigenvalue;
    let leapfrog_dt_max = LEAPFROG_SAFETY * (2.0 / plate_max.sqrt()).min(2.0 / chamber_max.sqrt());

    let constants = GridConstants {
        gamma_measure: plate.measure(),
        poincare_chamber: 1.0 / chamber_min.sqrt(),
        poincare_plate: 1.0 / plate_min.sqrt(),
        embedding,
        chamber_spectral_radius: chamber_max,
        plate_spectral_radius: plate_max,
        leapfrog_dt_max,
    };

    Ok(DiscreteOperators {
        chamber: chamber.clone(),
        plate: plate.clone(),
        chamber_free,
        chamber_slot,
        plate_free,
        plate_slot,
        chamber_mass,
        plate_mass,
        chamber_stiffness,
        plate_laplacian,
        plate_node_weights,
        plate_stiffness,
        trace,
        trace_weight,
        chamber_factor: Arc::new(chamber_factor),
        lift_fault: None,
        plate_modes: Arc::new(plate_modes),
        constants,
    })
}

/// Makes the largest-magnitude entry positive so mode signs are reproducible.
fn orient(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() * (1.0 + 1e-9) {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// 1D eigenpairs of the tensor factors of `M_Ω⁻¹ K_Ω`.
///
/// Horizontal axes carry Dirichlet ends: `sin(kπx)`, `k = 1..n-1`.
/// The normal axis is Dirichlet at `z = 0` and Neumann at `z = 1`:
/// `sin((l - ½)πz)`, `l = 1..n`. Both are exact discrete eigenvectors.
fn axis_eigenvalue(n: usize, normal: bool, k: usize) -> f64 {
    let h = 1.0 / n as f64;
    let freq = if normal { k as f64 - 0.5 } else { k as f64 };
    let s = (freq * PI * h / 2.0).sin();
    4.0 * s * s / (h * h)
}

fn axis_mode_count(n: usize, normal: bool) -> usize {
    if normal {
        n
    } else {
        n - 1
    }
}

fn chamber_extreme_eigenvalues(chamber: &ChamberGrid) -> (f64, f64) {
    let dim = chamber.dim();
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (a, &n) in chamber.cells().iter().enumerate() {
        let normal = a == dim - 1;
        lo += axis_eigenvalue(n, normal, 1);
        hi += axis_eigenvalue(n, normal, axis_mode_count(n, normal));
    }
    (lo, hi)
}

impl DiscreteOperators {
    pub fn chamber(&self) -> &ChamberGrid {
        &self.chamber
    }

    pub fn plate(&self) -> &PlateGrid {
        &self.plate
    }

    pub fn constants(&self) -> &GridConstants {
        &self.constants
    }

    pub fn chamber_dofs(&self) -> usize {
        self.chamber_free.len()
    }

    pub fn plate_dofs(&self) -> usize {
        self.plate_free.len()
    }

    pub fn chamber_mass(&self) -> &DVector<f64> {
        &self.chamber_mass
    }

    pub fn plate_mass(&self) -> &DVector<f64> {
        &self.plate_mass
    }

    pub fn chamber_stiffness(&self) -> &CsrMatrix<f64> {
        &self.chamber_stiffness
    }

    pub fn plate_stiffness(&self) -> &DMatrix<f64> {
        &self.plate_stiffness
    }

    /// Chamber free index of each plate free node.
    pub fn trace_map(&self) -> &[usize] {
        &self.trace
    }

    /// Plate-side coupling weights (all one unless corrupted).
    pub fn trace_weights(&self) -> &[f64] {
        &self.trace_weight
    }

    pub fn plate_modes(&self) -> &[Mode] {
        &self.plate_modes
    }

    /// Gathers free-node values of a chamber function.
    pub fn gather_chamber(&self, f: &GridFunction) -> Result<DVector<f64>, MeshError> {
        self.check(f, GridKind::Chamber)?;
        Ok(DVector::from_iterator(
            self.chamber_free.len(),
            self.chamber_free.iter().map(|&i| f.values[i]),
        ))
    }

    pub fn gather_plate(&self, f: &GridFunction) -> Result<DVector<f64>, MeshError> {
        self.check(f, GridKind::Plate)?;
        Ok(DVector::from_iterator(
            self.plate_free.len(),
            self.plate_free.iter().map(|&i| f.values[i]),
        ))
    }

    pub fn scatter_chamber(&self, v: &DVector<f64>) -> GridFunction {
        let mut f = self.chamber.zeros();
        for (k, &i) in self.chamber_free.iter().enumerate() {
            f.values[i] = v[k];
        }
        f
    }

    pub fn scatter_plate(&self, v: &DVector<f64>) -> GridFunction {
        let mut f = self.plate.zeros();
        for (k, &i) in self.plate_free.iter().enumerate() {
            f.values[i] = v[k];
        }
        f
    }

    fn check(&self, f: &GridFunction, kind: GridKind) -> Result<(), MeshError> {
        let expected = match kind {
            GridKind::Chamber => self.chamber.id(),
            GridKind::Plate => self.plate.id(),
        };
        if f.grid != expected {
            return Err(MeshError::GridMismatch {
                expected,
                got: f.grid.clone(),
            });
        }
        let nodes = match kind {
            GridKind::Chamber => self.chamber.node_count(),
            GridKind::Plate => self.plate.node_count(),
        };
        if f.values.len() != nodes {
            return Err(MeshError::ValueCount {
                expected: nodes,
                got: f.values.len(),
            });
        }
        Ok(())
    }

    /// Plate free index of a chamber free index, if that node is on the wall.
    pub fn chamber_slot(&self, node: usize) -> Option<usize> {
        self.chamber_slot[node]
    }

    pub fn plate_slot(&self, node: usize) -> Option<usize> {
        self.plate_slot[node]
    }

    pub fn stiffness_chamber_mul(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        csr_mul(&self.chamber_stiffness, u.as_slice(), out.as_mut_slice());
        out
    }

    pub fn stiffness_plate_mul(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.plate_stiffness * w
    }

    /// `‖∇_h u‖²` for free-node values.
    pub fn grad_sq(&self, u: &DVector<f64>) -> f64 {
        u.dot(&self.stiffness_chamber_mul(u))
    }

    /// `|Δ_h w|²` for free-node values.
    pub fn lap_sq(&self, w: &DVector<f64>) -> f64 {
        let lap = self.plate_laplacian_values(w);
        lap.iter().zip(&self.plate_node_weights).map(|(l, wt)| wt * l * l).sum()
    }

    /// `Δ_h w` at every plate node (including the clamped edge).
    pub fn plate_laplacian_values(&self, w: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.plate.node_count()];
        csr_mul(&self.plate_laplacian, w.as_slice(), &mut out);
        out
    }

    /// `|Δ_h w|₂` of a plate grid function.
    pub fn plate_h2_seminorm(&self, w: &GridFunction) -> Result<f64, MeshError> {
        Ok(self.lap_sq(&self.gather_plate(w)?).sqrt())
    }

    /// Weighted plate inner product on free values.
    pub fn plate_dot(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.plate_mass.iter())
            .map(|((x, y), m)| m * x * y)
            .sum()
    }

    pub fn chamber_dot(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.chamber_mass.iter())
            .map(|((x, y), m)| m * x * y)
            .sum()
    }

    /// `L u = M_Ω⁻¹ K_Ω u`: discrete `-Δ` with `u = 0` on Γ₀ and `∂ν u = 0` on Γ.
    pub fn apply_l(&self, u: &GridFunction) -> Result<GridFunction, MeshError> {
        let v = self.gather_chamber(u)?;
        let k = self.stiffness_chamber_mul(&v);
        Ok(self.scatter_chamber(&k.component_div(&self.chamber_mass)))
    }

    /// Discrete `-Δ u` with Neumann data `∂ν u = g` imposed on Γ.
    pub fn apply_l_neumann(&self, u: &GridFunction, g: &GridFunction) -> Result<GridFunction, MeshError> {
        let v = self.gather_chamber(u)?;
        let gp = self.gather_plate(g)?;
        let mut k = self.stiffness_chamber_mul(&v);
        k -= self.trace_transpose_mass(&gp);
        Ok(self.scatter_chamber(&k.component_div(&self.chamber_mass)))
    }

    /// `B w = M_Γ⁻¹ K_Γ w`: clamped discrete `Δ²`.
    pub fn apply_b(&self, w: &GridFunction) -> Result<GridFunction, MeshError> {
        let v = self.gather_plate(w)?;
        let k = self.stiffness_plate_mul(&v);
        Ok(self.scatter_plate(&k.component_div(&self.plate_mass)))
    }

    /// Trace of a chamber function: node-value copy onto the wall.
    pub fn trace(&self, u: &GridFunction) -> Result<GridFunction, MeshError> {
        self.check(u, GridKind::Chamber)?;
        let mut out = self.plate.zeros();
        for (p, &c) in self.plate.chamber_nodes().iter().enumerate() {
            if !self.plate.is_constrained(p) {
                out.values[p] = u.values[c];
            }
        }
        Ok(out)
    }

    /// `Trᵀ M_Γ p` on chamber free nodes.
    pub fn trace_transpose_mass(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.chamber_free.len());
        for (j, &c) in self.trace.iter().enumerate() {
            out[c] += self.plate_mass[j] * p[j];
        }
        out
    }

    /// Plate-side trace of chamber free values, with the coupling weights.
    pub fn trace_free(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.trace.len(),
            self.trace.iter().zip(&self.trace_weight).map(|(&c, &wt)| wt * y[c]),
        )
    }

    /// Solves `K_Ω x = b` with the cached sparse Cholesky factor.
    pub fn solve_chamber(&self, b: &DVector<f64>) -> DVector<f64> {
        let sol = self.chamber_factor.solve(b);
        sol.column(0).into_owned()
    }

    /// Discrete Dirichlet-Neumann map on free values.
    pub fn lift_free(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut q = self.solve_chamber(&self.trace_transpose_mass(p));
        if let Some((row, col, delta)) = self.lift_fault {
            q[row] += delta * p[col];
        }
        q
    }

    /// Returns a copy whose lift has `delta` added to matrix entry `(row, col)`.
    ///
    /// Fault injection for negative-control runs of [`adjointness_report`].
    pub fn with_corrupted_lift(&self, row: usize, col: usize, delta: f64) -> Result<Self, OperatorError> {
        if row >= self.chamber_dofs() {
            return Err(OperatorError::OutOfRange {
                index: row,
                len: self.chamber_dofs(),
            });
        }
        if col >= self.plate_dofs() {
            return Err(OperatorError::OutOfRange {
                index: col,
                len: self.plate_dofs(),
            });
        }
        let mut out = self.clone();
        out.lift_fault = Some((row, col, delta));
        Ok(out)
    }

    /// Returns a copy whose plate-side trace at `plate_dof` is scaled by `factor`.
    ///
    /// Breaks the skew symmetry of the wave-plate coupling; used as a
    /// negative control for energy conservation.
    pub fn with_corrupted_trace(&self, plate_dof: usize, factor: f64) -> Result<Self, OperatorError> {
        if plate_dof >= self.plate_dofs() {
            return Err(OperatorError::OutOfRange {
                index: plate_dof,
                len: self.plate_dofs(),
            });
        }
        let mut out = self.clone();
        out.trace_weight[plate_dof] *= factor;
        Ok(out)
    }

    /// Lowest `m` chamber eigenmodes of `K_Ω v = λ M_Ω v`, in closed form.
    pub fn chamber_modes(&self, m: usize) -> Vec<Mode> {
        let dim = self.chamber.dim();
        let cells = self.chamber.cells();
        let limits: Vec<usize> = (0..dim)
            .map(|a| axis_mode_count(cells[a], a == dim - 1).min(m.max(1)))
            .collect();
        let mut tuples: Vec<(f64, Vec<usize>)> = Vec::new();
        let mut idx = vec![1usize; dim];
        loop {
            let lambda: f64 = (0..dim).map(|a| axis_eigenvalue(cells[a], a == dim - 1, idx[a])).sum();
            tuples.push((lambda, idx.clone()));
            let mut a = 0;
            loop {
                if a == dim {
                    break;
                }
                idx[a] += 1;
                if idx[a] <= limits[a] {
                    break;
                }
                idx[a] = 1;
                a += 1;
            }
            if a == dim {
                break;
            }
        }
        tuples.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
        tuples.truncate(m);
        tuples
            .into_iter()
            .map(|(lambda, k)| {
                let mut v = DVector::from_iterator(
                    self.chamber_free.len(),
                    self.chamber_free.iter().map(|&node| {
                        let x = self.chamber.position(node);
                        (0..dim)
                            .map(|a| {
                                let freq = if a == dim - 1 { k[a] as f64 - 0.5 } else { k[a] as f64 };
                                (freq * PI * x[a]).sin()
                            })
                            .product::<f64>()
                    }),
                );
                let norm = self.chamber_dot(&v, &v).sqrt();
                v /= norm;
                Mode {
                    eigenvalue: lambda,
                    values: v,
                }
            })
            .collect()
    }

    /// Writes a matrix as `row col value` lines (0-based, free-node indices).
    pub fn write_coo(&self, which: OperatorMatrix, mut out: impl Write) -> io::Result<()> {
        match which {
            OperatorMatrix::ChamberStiffness => {
                for (r, row) in self.chamber_stiffness.row_iter().enumerate() {
                    for (&c, &v) in row.col_indices().iter().zip(row.values()) {
                        writeln!(out, "{r} {c} {v:e}")?;
                    }
                }
            }
            OperatorMatrix::PlateStiffness => {
                for r in 0..self.plate_stiffness.nrows() {
                    for c in 0..self.plate_stiffness.ncols() {
                        let v = self.plate_stiffness[(r, c)];
                        if v != 0.0 {
                            writeln!(out, "{r} {c} {v:e}")?;
                        }
                    }
                }
            }
            OperatorMatrix::ChamberMass => {
                for (i, v) in self.chamber_mass.iter().enumerate() {
                    writeln!(out, "{i} {i} {v:e}")?;
                }
            }
            OperatorMatrix::PlateMass => {
                for (i, v) in self.plate_mass.iter().enumerate() {
                    writeln!(out, "{i} {i} {v:e}")?;
                }
            }
            OperatorMatrix::Trace => {
                for (j, (&c, &wt)) in self.trace.iter().zip(&self.trace_weight).enumerate() {
                    writeln!(out, "{j} {c} {wt:e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Relative defect of `⟨A·Lift p, φ⟩ = (p, Tr φ)_Γ` for one pair.
///
/// Normalized by `‖∇ Lift p‖ ‖∇ φ‖`, the Cauchy-Schwarz bound of the left side.
pub fn adjointness_defect(ops: &DiscreteOperators, p: &DVector<f64>, phi: &DVector<f64>) -> f64 {
    let q = ops.lift_free(p);
    let kq = ops.stiffness_chamber_mul(&q);
    let lhs = phi.dot(&kq);
    let rhs: f64 = ops
        .trace
        .iter()
        .enumerate()
        .map(|(j, &c)| ops.plate_mass[j] * p[j] * phi[c])
        .sum();
    let scale = q.dot(&kq).max(0.0).sqrt() * ops.grad_sq(phi).max(0.0).sqrt();
    let diff = (lhs - rhs).abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointnessReport {
    pub trials: usize,
    pub seed: u64,
    pub max_defect: f64,
}

/// Worst adjointness defect over `trials` pseudorandom pairs.
pub fn adjointness_report(ops: &DiscreteOperators, trials: usize, seed: u64) -> AdjointnessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials.max(1) {
        let p = DVector::from_fn(ops.plate_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        let phi = DVector::from_fn(ops.chamber_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        worst = worst.max(adjointness_defect(ops, &p, &phi));
    }
    AdjointnessReport {
        trials: trials.max(1),
        seed,
        max_defect: worst,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorChecks {
    pub adjointness: AdjointnessReport,
    /// `max |(L f, g) - (f, L g)| / (‖f‖_K ‖g‖_K)`.
    pub chamber_symmetry: f64,
    /// Same for the plate operator.
    pub plate_symmetry: f64,
    /// Smallest Rayleigh quotient `(B w, w) / |w|²` seen over the samples.
    pub plate_min_rayleigh: f64,
    pub constants: GridConstants,
}

impl OperatorChecks {
    pub const ADJOINTNESS_TOL: f64 = 1e-10;
    pub const SYMMETRY_TOL: f64 = 1e-12;

    pub fn passed(&self) -> bool {
        self.adjointness.max_defect <= Self::ADJOINTNESS_TOL
            && self.chamber_symmetry <= Self::SYMMETRY_TOL
            && self.plate_symmetry <= Self::SYMMETRY_TOL
            && self.plate_min_rayleigh > 0.0
    }
}

/// Adjointness, symmetry and positivity checks on pseudorandom samples.
pub fn verify_operators(ops: &DiscreteOperators, trials: usize, seed: u64) -> OperatorChecks {
    let adjointness = adjointness_report(ops, trials, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut chamber_symmetry = 0.0f64;
    let mut plate_symmetry = 0.0f64;
    let mut plate_min_rayleigh = f64::INFINITY;
    let sym = |kf: f64, kg: f64, a: f64, b: f64| {
        let scale = (a * b).sqrt();
        if scale > 0.0 {
            (kf - kg).abs() / scale
        } else {
            0.0
        }
    };
    for _ in 0..trials.max(1) {
        let f = DVector::from_fn(ops.chamber_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        let g = DVector::from_fn(ops.chamber_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        let kf = ops.stiffness_chamber_mul(&f);
        let kg = ops.stiffness_chamber_mul(&g);
        chamber_symmetry = chamber_symmetry.max(sym(g.dot(&kf), f.dot(&kg), f.dot(&kf), g.dot(&kg)));

        let f = DVector::from_fn(ops.plate_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        let g = DVector::from_fn(ops.plate_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        let kf = ops.stiffness_plate_mul(&f);
        let kg = ops.stiffness_plate_mul(&g);
        plate_symmetry = plate_symmetry.max(sym(g.dot(&kf), f.dot(&kg), f.dot(&kf), g.dot(&kg)));
        plate_min_rayleigh = plate_min_rayleigh.min(f.dot(&kf) / ops.plate_dot(&f, &f));
    }
    // constant-interior field
    let ones = DVector::from_element(ops.plate_dofs(), 1.0);
    let k1 = ops.stiffness_plate_mul(&ones);
    plate_min_rayleigh = plate_min_rayleigh.min(ones.dot(&k1) / ops.plate_dot(&ones, &ones));
    OperatorChecks {
        adjointness,
        chamber_symmetry,
        plate_symmetry,
        plate_min_rayleigh,
        constants: ops.constants().clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::GridSpec;

    fn ops(dim: usize, n: usize) -> DiscreteOperators {
        let (c, p) = GridSpec::uniform(dim, n).build().unwrap();
        assemble(&c, &p).unwrap()
    }

    #[test]
    fn l_of_zero_is_zero() {
        let o = ops(2, 8);
        let z = o.chamber().zeros();
        assert!(o.apply_l(&z).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_in_normal_coordinate_is_discretely_harmonic() {
        let o = ops(2, 16);
        let c = o.chamber();
        let u = c.sample(|x| x[1]);
        let lu = o.apply_l(&u).unwrap();
        for node in 0..c.node_count() {
            let k = c.coords(node);
            // away from the side walls (Dirichlet truncation) and the Neumann face
            if k[0] >= 2 && k[0] <= 14 && k[1] >= 1 && k[1] <= 15 {
                assert!(lu.values[node].abs() < 1e-9, "{k:?} {}", lu.values[node]);
            }
        }
    }

    #[test]
    fn chamber_stencil_matches_ghost_elimination() {
        // Independent 5-point stencil with the Neumann ghost u_{n+1} = u_{n-1} + 2h g.
        let n = 10;
        let o = ops(2, n);
        let c = o.chamber();
        let h = 1.0 / n as f64;
        let u = c.sample(|x| (3.0 * x[0]).sin() * (1.0 + x[1] * x[1]) + x[0] * x[1]);
        let g = o.plate().sample(|x| (2.0 * x[0]).cos());
        let lu = o.apply_l_neumann(&u, &g).unwrap();
        let at = |i: usize, j: usize| u.values[c.index(&[i, j])];
        for i in 1..n {
            for j in 1..=n {
                let center = at(i, j);
                let below = at(i, j - 1);
                let above = if j == n {
                    below + 2.0 * h * g.values[i]
                } else {
                    at(i, j + 1)
                };
                let expect = (4.0 * center - at(i - 1, j) - at(i + 1, j) - below - above) / (h * h);
                let got = lu.values[c.index(&[i, j])];
                assert!(
                    (got - expect).abs() < 1e-9 * (1.0 + expect.abs()),
                    "({i},{j}) {got} {expect}"
                );
            }
        }
    }

    #[test]
    fn neumann_form_equals_lift_form() {
        // A(u - R g) equals -Δ_h u with ∂ν u = g imposed.
        let o = ops(2, 12);
        let u = o.chamber().sample(|x| x[0] * (1.0 - x[0]) * x[1].powi(2));
        let g = o.plate().sample(|x| (5.0 * x[0]).sin());
        let direct = o.apply_l_neumann(&u, &g).unwrap();
        let uf = o.gather_chamber(&u).unwrap();
        let q = o.lift_free(&o.gather_plate(&g).unwrap());
        let diff = &uf - &q;
        let via_lift = o.stiffness_chamber_mul(&diff).component_div(o.chamber_mass());
        let direct = o.gather_chamber(&direct).unwrap();
        let err = (&via_lift - &direct).amax();
        assert!(err < 1e-8 * direct.amax(), "{err}");
    }

    #[test]
    fn beam_stencil_is_clamped_fourth_difference() {
        let n = 12;
        let o = ops(2, n);
        let h = 1.0 / n as f64;
        let w = o.plate().sample(|x| (x[0] * 7.0).sin() + x[0]);
        let bw = o.apply_b(&w).unwrap();
        // ghost reflection w_{-1} = w_1 and w_0 = 0
        let val = |i: isize| -> f64 {
            let i = if i < 0 {
                -i
            } else if i > n as isize {
                2 * n as isize - i
            } else {
                i
            };
            if i == 0 || i == n as isize {
                0.0
            } else {
                w.values[i as usize]
            }
        };
        for i in 1..n as isize {
            let expect = (val(i - 2) - 4.0 * val(i - 1) + 6.0 * val(i) - 4.0 * val(i + 1) + val(i + 2)) / h.powi(4);
            let got = bw.values[i as usize];
            assert!(
                (got - expect).abs() < 1e-9 * expect.abs().max(1.0),
                "{i} {got} {expect}"
            );
        }
    }

    #[test]
    fn plate_stencil_is_thirteen_point_biharmonic_in_the_interior() {
        let n = 10;
        let o = ops(3, n);
        let p = o.plate();
        let h = 1.0 / n as f64;
        let w = p.sample(|x| (2.0 * x[0]).sin() * (3.0 * x[1]).cos() + x[0] * x[1]);
        let bw = o.apply_b(&w).unwrap();
        let at = |i: usize, j: usize| w.values[p.index(&[i, j])];
        for i in 2..=n - 2 {
            for j in 2..=n - 2 {
                let expect = (20.0 * at(i, j) - 8.0 * (at(i + 1, j) + at(i - 1, j) + at(i, j + 1) + at(i, j - 1))
                    + 2.0 * (at(i + 1, j + 1) + at(i + 1, j - 1) + at(i - 1, j + 1) + at(i - 1, j - 1))
                    + at(i + 2, j)
                    + at(i - 2, j)
                    + at(i, j + 2)
                    + at(i, j - 2))
                    / h.powi(4);
                let got = bw.values[p.index(&[i, j])];
                assert!(
                    (got - expect).abs() < 1e-8 * expect.abs().max(1.0),
                    "({i},{j}) {got} {expect}"
                );
            }
        }
    }

    #[test]
    fn clamped_beam_fundamental_eigenvalue() {
        // Dense eigensolve of the assembled operator, independent of the
        // eigen path used at assembly (it goes through M⁻¹K directly).
        let o = ops(2, 64);
        let k = o.plate_stiffness();
        let m = o.plate_mass();
        let np = m.len();
        let a = DMatrix::from_fn(np, np, |i, j| k[(i, j)] / m[i]);
        let ev = a.complex_eigenvalues();
        let lowest = ev.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let kappa = 4.730_040_744_862_704f64.powi(4);
        assert!((lowest - kappa).abs() / kappa < 0.01, "{lowest} vs {kappa}");
        assert!((o.plate_modes()[0].eigenvalue - lowest).abs() < 1e-8 * lowest);
    }

    #[test]
    fn closed_form_chamber_modes_are_eigenvectors() {
        for (dim, n) in [(2, 12), (3, 6)] {
            let o = ops(dim, n);
            for mode in o.chamber_modes(10) {
                let kv = o.stiffness_chamber_mul(&mode.values);
                let mv = mode.values.component_mul(o.chamber_mass()) * mode.eigenvalue;
                let res = (&kv - &mv).amax();
                assert!(res < 1e-10 * mv.amax(), "{res}");
                assert!((o.chamber_dot(&mode.values, &mode.values) - 1.0).abs() < 1e-12);
            }
            let ev: Vec<f64> = o.chamber_modes(10).iter().map(|m| m.eigenvalue).collect();
            assert!(ev.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn lift_of_zero_is_zero() {
        let o = ops(2, 8);
        let q = o.lift_free(&DVector::zeros(o.plate_dofs()));
        assert_eq!(q.amax(), 0.0);
    }

    #[test]
    fn lift_matches_harmonic_extension_of_a_sine() {
        // Δq = 0, q = 0 on the rigid walls, ∂z q = sin(πx) on top:
        // q = sin(πx) sinh(πz) / (π cosh π).
        let err = |n: usize| {
            let o = ops(2, n);
            let p = o.plate().sample(|x| (PI * x[0]).sin());
            let q = o.scatter_chamber(&o.lift_free(&o.gather_plate(&p).unwrap()));
            let c = o.chamber();
            (0..c.node_count())
                .map(|i| {
                    let x = c.position(i);
                    let exact = (PI * x[0]).sin() * (PI * x[1]).sinh() / (PI * PI.cosh());
                    (q.values[i] - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e16, e32) = (err(16), err(32));
        assert!(e32 < 2e-3, "{e32}");
        let rate = (e16 / e32).log2();
        assert!((rate - 2.0).abs() < 0.2, "rate {rate}");
    }

    #[test]
    fn adjointness_is_exact_and_detects_corruption() {
        let o = ops(2, 32);
        let z = adjointness_defect(
            &o,
            &DVector::zeros(o.plate_dofs()),
            &DVector::from_element(o.chamber_dofs(), 1.0),
        );
        assert_eq!(z, 0.0);
        let r = adjointness_report(&o, 100, 7);
        assert!(r.max_defect <= 1e-10, "{}", r.max_defect);
        let row = o.trace_map()[o.plate_dofs() / 2];
        let bad = o.with_corrupted_lift(row, o.plate_dofs() / 2, 1e-2).unwrap();
        let rb = adjointness_report(&bad, 100, 7);
        assert!(rb.max_defect > 1e-6, "{}", rb.max_defect);
        assert!(o.with_corrupted_lift(o.chamber_dofs(), 0, 1.0).is_err());
    }

    #[test]
    fn adjointness_in_three_dimensions() {
        let o = ops(3, 8);
        assert!(adjointness_report(&o, 20, 3).max_defect <= 1e-10);
    }

    #[test]
    fn symmetry_positivity_and_constants() {
        for (dim, n) in [(2, 32), (3, 8)] {
            let o = ops(dim, n);
            let chk = verify_operators(&o, 20, 11);
            assert!(chk.passed(), "{chk:?}");
            let c = o.constants();
            assert!(c.poincare_chamber > 0.0 && c.poincare_plate > 0.0 && c.embedding > 0.0);
            assert!(c.leapfrog_dt_max > 0.0);
        }
    }

    #[test]
    fn poincare_constants_bound_random_fields() {
        let o = ops(2, 16);
        let c = o.constants().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let u = DVector::from_fn(o.chamber_dofs(), |_, _| rng.gen_range(-1.0..1.0));
            assert!(o.chamber_dot(&u, &u).sqrt() <= c.poincare_chamber * o.grad_sq(&u).sqrt() * (1.0 + 1e-12));
            let w = DVector::from_fn(o.plate_dofs(), |_, _| rng.gen_range(-1.0..1.0));
            let lap = o.lap_sq(&w).sqrt();
            assert!(o.plate_dot(&w, &w).sqrt() <= c.poincare_plate * lap * (1.0 + 1e-12));
            assert!(w.amax() <= c.embedding * lap * (1.0 + 1e-12));
        }
    }

    #[test]
    fn plate_stiffness_is_the_laplacian_quadratic_form() {
        let o = ops(2, 10);
        let w = DVector::from_fn(o.plate_dofs(), |i, _| (i as f64 * 0.7).sin());
        let a = w.dot(&o.stiffness_plate_mul(&w));
        let b = o.lap_sq(&w);
        assert!((a - b).abs() < 1e-12 * b);
    }

    #[test]
    fn misaligned_grids_fail_assembly() {
        let c = ChamberGrid::uniform(2, 8).unwrap();
        let other = ChamberGrid::uniform(2, 10).unwrap();
        let p = PlateGrid::on_top_of(&other);
        assert!(matches!(
            assemble(&c, &p),
            Err(OperatorError::Mesh(MeshError::Misaligned))
        ));
    }

    #[test]
    fn coo_dump_lists_entries() {
        let o = ops(2, 4);
        let mut buf = Vec::new();
        o.write_coo(OperatorMatrix::ChamberStiffness, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), o.chamber_stiffness().nnz());
        assert_eq!(lines[0].split_whitespace().count(), 3);
    }
}
