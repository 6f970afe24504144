//! Structured tensor grids for the chamber and the elastic wall.
//!
//! The chamber is the unit box `(0,1)^dim` with axes ordered `(x, [y,] z)`;
//! the last axis is the wall normal and the elastic wall is the flat face
//! `z = 1`. Every other boundary face is rigid. The plate grid is the top
//! face of the chamber grid, node for node.
//!
//! Grid functions store a value at *every* node. Nodes carrying a homogeneous
//! Dirichlet condition (the rigid wall for the chamber, the clamped edge for
//! the plate) are expected to hold zero; the discrete operators only read
//! the free nodes.

use serde::{Deserialize, Serialize};

use crate::error::MeshError;
use crate::operators::DiscreteOperators;

/// Which family of grid a function lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Chamber,
    Plate,
}

/// Structural identity of a grid. Two grids with equal ids are interchangeable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridId {
    pub kind: GridKind,
    /// Cells per axis.
    pub cells: Vec<usize>,
}

/// Boundary role of a chamber node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Interior,
    /// Rigid wall.
    Gamma0,
    /// Elastic wall (the full top face).
    Gamma,
}

/// Serializable grid description used by experiment configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub n_per_axis: Vec<usize>,
}

impl GridSpec {
    pub fn uniform(dim: usize, n: usize) -> Self {
        Self {
            dim,
            n_per_axis: vec![n; dim],
        }
    }

    pub fn build(&self) -> Result<(ChamberGrid, PlateGrid), MeshError> {
        let chamber = ChamberGrid::new(self.dim, &self.n_per_axis)?;
        let plate = PlateGrid::on_top_of(&chamber);
        Ok((chamber, plate))
    }
}

/// 1D trapezoid weight of node `i` on an axis with `n` cells of width `h`.
#[inline]
pub fn trapezoid_weight(i: usize, n: usize, h: f64) -> f64 {
    if i == 0 || i == n {
        0.5 * h
    } else {
        h
    }
}

/// Shared tensor-grid indexing; axis 0 varies fastest.
#[derive(Clone, Debug, PartialEq)]
struct Tensor {
    cells: Vec<usize>,
    spacing: Vec<f64>,
}

impl Tensor {
    fn new(cells: &[usize]) -> Self {
        Self {
            cells: cells.to_vec(),
            spacing: cells.iter().map(|&n| 1.0 / n as f64).collect(),
        }
    }

    fn node_count(&self) -> usize {
        self.cells.iter().map(|n| n + 1).product()
    }

    fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut c = Vec::with_capacity(self.cells.len());
        for &n in &self.cells {
            c.push(index % (n + 1));
            index /= n + 1;
        }
        c
    }

    fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (a, &n) in self.cells.iter().enumerate() {
            idx += coords[a] * stride;
            stride *= n + 1;
        }
        idx
    }

    fn weight(&self, coords: &[usize]) -> f64 {
        coords
            .iter()
            .zip(self.cells.iter().zip(&self.spacing))
            .map(|(&i, (&n, &h))| trapezoid_weight(i, n, h))
            .product()
    }

    fn position(&self, coords: &[usize]) -> Vec<f64> {
        coords.iter().zip(&self.spacing).map(|(&i, &h)| i as f64 * h).collect()
    }
}

/// Uniform grid of the chamber `(0,1)^dim`, `dim` in {2, 3}.
#[derive(Clone, Debug, PartialEq)]
pub struct ChamberGrid {
    grid: Tensor,
    roles: Vec<NodeRole>,
}

impl ChamberGrid {
    pub fn new(dim: usize, n_per_axis: &[usize]) -> Result<Self, MeshError> {
        if !(2..=3).contains(&dim) {
            return Err(MeshError::Dimension(dim));
        }
        if n_per_axis.len() != dim {
            return Err(MeshError::AxisCount {
                dim,
                got: n_per_axis.len(),
            });
        }
        // Two cells per axis is the least that leaves a free interior node.
        if let Some(&n) = n_per_axis.iter().find(|&&n| n < 2) {
            return Err(MeshError::TooCoarse(n));
        }
        let grid = Tensor::new(n_per_axis);
        let normal = dim - 1;
        let roles = (0..grid.node_count())
            .map(|idx| {
                let c = grid.coords(idx);
                let on_boundary = c.iter().zip(&grid.cells).any(|(&i, &n)| i == 0 || i == n);
                if c[normal] == grid.cells[normal] {
                    NodeRole::Gamma
                } else if on_boundary {
                    NodeRole::Gamma0
                } else {
                    NodeRole::Interior
                }
            })
            .collect();
        Ok(Self { grid, roles })
    }

    pub fn uniform(dim: usize, n: usize) -> Result<Self, MeshError> {
        Self::new(dim, &vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.grid.cells.len()
    }

    pub fn cells(&self) -> &[usize] {
        &self.grid.cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.grid.spacing
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    pub fn id(&self) -> GridId {
        GridId {
            kind: GridKind::Chamber,
            cells: self.grid.cells.clone(),
        }
    }

    pub fn role(&self, node: usize) -> NodeRole {
        self.roles[node]
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn coords(&self, node: usize) -> Vec<usize> {
        self.grid.coords(node)
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        self.grid.index(coords)
    }

    pub fn position(&self, node: usize) -> Vec<f64> {
        self.grid.position(&self.grid.coords(node))
    }

    /// Trapezoid quadrature weight of a node.
    pub fn weight(&self, node: usize) -> f64 {
        self.grid.weight(&self.grid.coords(node))
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.weight(i)).collect()
    }

    /// Whether `u = 0` is imposed at the node.
    ///
    /// This is every node on the closure of the rigid wall, so the two
    /// (or four edges of) top-face nodes that touch a side face are
    /// constrained even though they are tagged [`NodeRole::Gamma`].
    pub fn is_constrained(&self, node: usize) -> bool {
        let c = self.grid.coords(node);
        let normal = self.dim() - 1;
        c[normal] == 0
            || c[..normal]
                .iter()
                .zip(&self.grid.cells)
                .any(|(&i, &n)| i == 0 || i == n)
    }

    pub fn measure(&self) -> f64 {
        1.0
    }

    pub fn zeros(&self) -> GridFunction {
        GridFunction::zeros(self.id(), self.node_count())
    }

    /// Samples `f(position)` at every node, writing zero on constrained nodes.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> GridFunction {
        let values = (0..self.node_count())
            .map(|i| {
                if self.is_constrained(i) {
                    0.0
                } else {
                    f(&self.position(i))
                }
            })
            .collect();
        GridFunction {
            grid: self.id(),
            values,
        }
    }
}

/// Grid of the elastic wall, aligned node-for-node with the chamber top face.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateGrid {
    grid: Tensor,
    chamber_nodes: Vec<usize>,
}

impl PlateGrid {
    pub fn on_top_of(chamber: &ChamberGrid) -> Self {
        let dim = chamber.dim();
        let cells = &chamber.cells()[..dim - 1];
        let grid = Tensor::new(cells);
        let top = chamber.cells()[dim - 1];
        let chamber_nodes = (0..grid.node_count())
            .map(|p| {
                let mut c = grid.coords(p);
                c.push(top);
                chamber.index(&c)
            })
            .collect();
        Self { grid, chamber_nodes }
    }

    pub fn dim(&self) -> usize {
        self.grid.cells.len()
    }

    pub fn cells(&self) -> &[usize] {
        &self.grid.cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.grid.spacing
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    pub fn id(&self) -> GridId {
        GridId {
            kind: GridKind::Plate,
            cells: self.grid.cells.clone(),
        }
    }

    pub fn coords(&self, node: usize) -> Vec<usize> {
        self.grid.coords(node)
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        self.grid.index(coords)
    }

    pub fn position(&self, node: usize) -> Vec<f64> {
        self.grid.position(&self.grid.coords(node))
    }

    pub fn weight(&self, node: usize) -> f64 {
        self.grid.weight(&self.grid.coords(node))
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.weight(i)).collect()
    }

    /// Chamber node index of each plate node.
    pub fn chamber_nodes(&self) -> &[usize] {
        &self.chamber_nodes
    }

    /// Nodes on the clamped edge, where `w = 0`.
    pub fn is_constrained(&self, node: usize) -> bool {
        self.grid
            .coords(node)
            .iter()
            .zip(&self.grid.cells)
            .any(|(&i, &n)| i == 0 || i == n)
    }

    /// Area (or length) of the elastic wall.
    pub fn measure(&self) -> f64 {
        1.0
    }

    pub fn zeros(&self) -> GridFunction {
        GridFunction::zeros(self.id(), self.node_count())
    }

    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> GridFunction {
        let values = (0..self.node_count())
            .map(|i| {
                if self.is_constrained(i) {
                    0.0
                } else {
                    f(&self.position(i))
                }
            })
            .collect();
        GridFunction {
            grid: self.id(),
            values,
        }
    }

    /// Checks that this plate grid is the top face of `chamber`.
    pub fn check_alignment(&self, chamber: &ChamberGrid) -> Result<(), MeshError> {
        let dim = chamber.dim();
        if self.dim() + 1 != dim || self.cells() != &chamber.cells()[..dim - 1] {
            return Err(MeshError::Misaligned);
        }
        for (p, &c) in self.chamber_nodes.iter().enumerate() {
            if chamber.role(c) != NodeRole::Gamma || self.is_constrained(p) != chamber.is_constrained(c) {
                return Err(MeshError::Misaligned);
            }
        }
        Ok(())
    }
}

/// Nodal values on a chamber or plate grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: GridId,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: GridId, nodes: usize) -> Self {
        Self {
            grid,
            values: vec![0.0; nodes],
        }
    }

    pub fn from_values(grid: GridId, values: Vec<f64>, nodes: usize) -> Result<Self, MeshError> {
        if values.len() != nodes {
            return Err(MeshError::ValueCount {
                expected: nodes,
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Integration region for [`inner_product_l2`].
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    Omega(&'a ChamberGrid),
    Gamma(&'a PlateGrid),
}

impl Region<'_> {
    fn id(&self) -> GridId {
        match self {
            Region::Omega(g) => g.id(),
            Region::Gamma(g) => g.id(),
        }
    }

    fn weight(&self, node: usize) -> f64 {
        match self {
            Region::Omega(g) => g.weight(node),
            Region::Gamma(g) => g.weight(node),
        }
    }
}

/// Trapezoid approximation of `∫ f g` over the region.
pub fn inner_product_l2(f: &GridFunction, g: &GridFunction, region: Region<'_>) -> Result<f64, MeshError> {
    let id = region.id();
    for h in [f, g] {
        if h.grid != id {
            return Err(MeshError::GridMismatch {
                expected: id.clone(),
                got: h.grid.clone(),
            });
        }
    }
    if f.len() != g.len() {
        return Err(MeshError::ValueCount {
            expected: f.len(),
            got: g.len(),
        });
    }
    Ok(f.values
        .iter()
        .zip(&g.values)
        .enumerate()
        .map(|(i, (a, b))| region.weight(i) * a * b)
        .sum())
}

/// `‖(u,w)‖_V = sqrt(‖∇_h u‖² + |Δ_h w|²)`.
///
/// Only free-node values enter; constrained entries are ignored.
pub fn norm_v(ops: &DiscreteOperators, u: &GridFunction, w: &GridFunction) -> Result<f64, MeshError> {
    let u = ops.gather_chamber(u)?;
    let w = ops.gather_plate(w)?;
    Ok((ops.grad_sq(&u) + ops.lap_sq(&w)).sqrt())
}
