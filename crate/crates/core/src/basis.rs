//! Box domain, Dirichlet sine basis and the tensor quadrature grid.
//!
//! Each axis `i` of the box `[0, L_i]` is split into `M_i` uniform intervals.
//! Only the `M_i - 1` interior nodes carry quadrature weight: the basis
//! functions vanish on the boundary, so the trapezoid rule reduces to a
//! uniform weight `h_1 ... h_n` per interior node. On this grid the discrete
//! sine transform is exactly orthogonal for mode numbers below `M_i`.
//!
//! Modes and nodes are flattened lexicographically with the first axis
//! varying slowest.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry, particle count and time horizon of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Edge lengths `L_i`; the dimension is `lengths.len()`.
    pub lengths: Vec<f64>,
    /// Grid intervals `M_i` per axis (even, at least 4).
    pub grid_points: Vec<usize>,
    /// Number of single-particle orbitals `N`.
    pub particles: usize,
    /// Final time `T`.
    pub horizon: f64,
    /// Number of uniform time steps on `[0, T]`.
    pub steps: usize,
}

impl DomainSpec {
    pub fn new(
        lengths: Vec<f64>,
        grid_points: Vec<usize>,
        particles: usize,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let spec = Self {
            lengths,
            grid_points,
            particles,
            horizon,
            steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit box `[0,1]^n` with `points` intervals per axis.
    pub fn unit(dimension: usize, points: usize, particles: usize, horizon: f64, steps: usize) -> Result<Self> {
        Self::new(vec![1.0; dimension], vec![points; dimension], particles, horizon, steps)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lengths.len();
        if !(1..=3).contains(&n) {
            return Err(Error::Domain(format!("dimension must be 1, 2 or 3, got {n}")));
        }
        if self.grid_points.len() != n {
            return Err(Error::Domain(format!(
                "{} grid sizes given for a {n}-dimensional box",
                self.grid_points.len()
            )));
        }
        for (i, &l) in self.lengths.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Domain(format!("edge length L_{i} = {l} must be positive")));
            }
        }
        for (i, &m) in self.grid_points.iter().enumerate() {
            if m < 4 || m % 2 != 0 {
                return Err(Error::Domain(format!("grid size M_{i} = {m} must be even and at least 4")));
            }
        }
        if self.particles == 0 {
            return Err(Error::Domain("particle count must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Domain(format!("horizon T = {} must be positive", self.horizon)));
        }
        if self.steps == 0 {
            return Err(Error::Domain("time step count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.lengths.len()
    }

    pub fn time_step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Uniform time grid `t_s = s T / S`, `s = 0..=S`.
    pub fn times(&self) -> Vec<f64> {
        let dt = self.time_step();
        (0..=self.steps).map(|s| s as f64 * dt).collect()
    }
}

/// Galerkin coefficients `d[k, j]`: mode `k`, particle `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientState(Array2<C64>);

impl CoefficientState {
    pub fn new(data: Array2<C64>) -> Self {
        Self(data)
    }

    pub fn zeros(modes: usize, particles: usize) -> Self {
        Self(Array2::zeros((modes, particles)))
    }

    /// Unit amplitude in one `(mode, particle)` slot.
    pub fn unit(modes: usize, particles: usize, mode: usize, particle: usize) -> Self {
        let mut s = Self::zeros(modes, particles);
        s.0[[mode, particle]] = C64::new(1.0, 0.0);
        s
    }

    pub fn modes(&self) -> usize {
        self.0.nrows()
    }

    pub fn particles(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<C64> {
        &self.0
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<C64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<C64> {
        self.0
    }

    /// Frobenius norm, equal to the L² norm of the represented function.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Complex inner product `Σ a conj(b)` (linear in the first argument).
    pub fn inner(&self, other: &Self) -> C64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a * b.conj())
            .sum()
    }

    /// Real pairing `Re⟨a, b⟩`.
    pub fn real_inner(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self(self.0.mapv(|z| z * factor))
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: C64, other: &Self) {
        self.0.zip_mut_with(&other.0, |a, b| *a += factor * b);
    }

    /// Embed into a larger (or equal) mode count by zero padding, assuming the
    /// smaller basis is a leading subset of the larger one.
    pub fn zero_padded(&self, modes: usize) -> Self {
        let mut out = Self::zeros(modes, self.particles());
        let keep = self.modes().min(modes);
        out.0
            .slice_mut(ndarray::s![..keep, ..])
            .assign(&self.0.slice(ndarray::s![..keep, ..]));
        out
    }

    fn check_same_shape(&self, other: &Self) {
        assert_eq!(self.0.dim(), other.0.dim(), "coefficient shapes differ");
    }
}

impl Add for &CoefficientState {
    type Output = CoefficientState;
    fn add(self, rhs: Self) -> CoefficientState {
        self.check_same_shape(rhs);
        CoefficientState(&self.0 + &rhs.0)
    }
}

impl Sub for &CoefficientState {
    type Output = CoefficientState;
    fn sub(self, rhs: Self) -> CoefficientState {
        self.check_same_shape(rhs);
        CoefficientState(&self.0 - &rhs.0)
    }
}

impl Mul<C64> for &CoefficientState {
    type Output = CoefficientState;
    fn mul(self, rhs: C64) -> CoefficientState {
        self.scaled(rhs)
    }
}

impl Mul<f64> for &CoefficientState {
    type Output = CoefficientState;
    fn mul(self, rhs: f64) -> CoefficientState {
        CoefficientState(self.0.mapv(|z| z * rhs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Real,
    Complex,
}

/// Samples of a (possibly multi-channel) function at the interior grid nodes;
/// rows are nodes, columns are particle channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    values: Array2<C64>,
    kind: FieldKind,
}

impl GridField {
    pub fn complex(values: Array2<C64>) -> Self {
        Self {
            values,
            kind: FieldKind::Complex,
        }
    }

    /// Real-valued field; any imaginary part in `values` is discarded.
    pub fn real(values: Array2<f64>) -> Self {
        Self {
            values: values.mapv(|x| C64::new(x, 0.0)),
            kind: FieldKind::Real,
        }
    }

    pub fn zeros(nodes: usize, channels: usize) -> Self {
        Self::complex(Array2::zeros((nodes, channels)))
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<C64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<C64> {
        self.kind = FieldKind::Complex;
        &mut self.values
    }

    pub fn into_values(self) -> Array2<C64> {
        self.values
    }

    /// Pointwise Euclidean norm over channels, `|Ψ(x_q)|_{ℂ^N}`.
    pub fn pointwise_norm(&self) -> Array1<f64> {
        self.values
            .map_axis(Axis(1), |row| row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
    }

    /// `max_q |Ψ(x_q)|_{ℂ^N}`.
    pub fn sup_norm(&self) -> f64 {
        self.pointwise_norm().fold(0.0, |m, &x| m.max(x))
    }

    /// `max_{q,j} |ψ_j(x_q)|`, the componentwise sup norm.
    pub fn sup_component(&self) -> f64 {
        self.values.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    /// Multiply every channel by a real scalar field.
    pub fn scaled_by(&self, field: &ScalarField) -> GridField {
        let mut out = self.values.clone();
        for (mut row, &v) in out.axis_iter_mut(Axis(0)).zip(field.iter()) {
            row.mapv_inplace(|z| z * v);
        }
        GridField::complex(out)
    }
}

/// Real scalar samples at the interior grid nodes (densities, potentials).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField(pub Array1<f64>);

impl ScalarField {
    pub fn zeros(nodes: usize) -> Self {
        Self(Array1::zeros(nodes))
    }

    pub fn constant(nodes: usize, value: f64) -> Self {
        Self(Array1::from_elem(nodes, value))
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Deref for ScalarField {
    type Target = Array1<f64>;
    fn deref(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Tensor-product Dirichlet sine basis with its quadrature grid.
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    lengths: Vec<f64>,
    grid_points: Vec<usize>,
    modes_per_axis: Vec<usize>,
    particles: usize,
    indices: Vec<Vec<usize>>,
    eigenvalues: Array1<f64>,
    coords: Array2<f64>,
    weight: f64,
    /// `table[[k, q]] = φ_k(x_q)`.
    table: Array2<f64>,
}

impl SpectralBasis {
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn grid_points(&self) -> &[usize] {
        &self.grid_points
    }

    pub fn modes_per_axis(&self) -> &[usize] {
        &self.modes_per_axis
    }

    pub fn dimension(&self) -> usize {
        self.lengths.len()
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    /// Total mode count `m`.
    pub fn mode_count(&self) -> usize {
        self.indices.len()
    }

    /// Number of interior quadrature nodes.
    pub fn node_count(&self) -> usize {
        self.coords.nrows()
    }

    /// 1-based multi-index of each flattened mode.
    pub fn mode_indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    /// Dirichlet Laplacian eigenvalues `λ_k = Σ_i (k_i π / L_i)²`.
    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    /// Node coordinates, one row per node.
    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    /// Uniform quadrature weight `Π h_i`.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.lengths
            .iter()
            .zip(&self.grid_points)
            .map(|(l, &m)| l / m as f64)
            .collect()
    }

    /// Tabulated basis values, `table[[k, q]] = φ_k(x_q)`.
    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn zero_state(&self) -> CoefficientState {
        CoefficientState::zeros(self.mode_count(), self.particles)
    }

    fn check_state(&self, state: &CoefficientState) -> Result<()> {
        if state.modes() != self.mode_count() {
            return Err(Error::Shape(format!(
                "state has {} modes, basis has {}",
                state.modes(),
                self.mode_count()
            )));
        }
        Ok(())
    }

    fn check_field(&self, field: &GridField) -> Result<()> {
        if field.nodes() != self.node_count() {
            return Err(Error::Shape(format!(
                "field has {} nodes, grid has {}",
                field.nodes(),
                self.node_count()
            )));
        }
        Ok(())
    }

    /// Grid values `ψ_j(x_q) = Σ_k d[k, j] φ_k(x_q)`.
    pub fn synthesize(&self, state: &CoefficientState) -> Result<GridField> {
        self.check_state(state)?;
        let d = state.as_array();
        let re = self.table.t().dot(&d.mapv(|z| z.re));
        let im = self.table.t().dot(&d.mapv(|z| z.im));
        Ok(GridField::complex(ndarray::Zip::from(&re).and(&im).map_collect(|&a, &b| C64::new(a, b))))
    }

    /// Quadrature projection `d[k, j] = Σ_q w ψ_j(x_q) φ_k(x_q)`.
    pub fn project(&self, field: &GridField) -> Result<CoefficientState> {
        self.check_field(field)?;
        let v = field.values();
        let re = self.table.dot(&v.mapv(|z| z.re)) * self.weight;
        let im = self.table.dot(&v.mapv(|z| z.im)) * self.weight;
        Ok(CoefficientState::new(
            ndarray::Zip::from(&re).and(&im).map_collect(|&a, &b| C64::new(a, b)),
        ))
    }

    /// `(‖Ψ‖_{L²}, ‖Ψ‖_{H¹})` from the coefficients.
    pub fn norms(&self, state: &CoefficientState) -> (f64, f64) {
        let (l2, h1) = self.norms_sqr(state);
        (l2.sqrt(), h1.sqrt())
    }

    /// Squared norms `(Σ|d|², Σ(1+λ_k)|d_kj|²)`.
    pub fn norms_sqr(&self, state: &CoefficientState) -> (f64, f64) {
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for (row, &lam) in state.as_array().axis_iter(Axis(0)).zip(self.eigenvalues.iter()) {
            let s: f64 = row.iter().map(|z| z.norm_sqr()).sum();
            l2 += s;
            h1 += (1.0 + lam) * s;
        }
        (l2, h1)
    }

    /// `⟨∇Ψ, ∇Φ⟩ = Σ λ_k d_kj conj(e_kj)`.
    pub fn gradient_inner(&self, psi: &CoefficientState, phi: &CoefficientState) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for ((a, b), &lam) in psi
            .as_array()
            .axis_iter(Axis(0))
            .zip(phi.as_array().axis_iter(Axis(0)))
            .zip(self.eigenvalues.iter())
        {
            let s: C64 = a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum();
            acc += s * lam;
        }
        acc
    }

    /// Quadrature inner product of two grid fields, `Σ_q w Σ_j a conj(b)`.
    pub fn grid_inner(&self, a: &GridField, b: &GridField) -> C64 {
        let s: C64 = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(x, y)| x * y.conj())
            .sum();
        s * self.weight
    }

    /// Quadrature integral of a scalar field.
    pub fn integrate(&self, field: &ScalarField) -> f64 {
        field.sum() * self.weight
    }

    /// Quadrature L² norm of a grid field.
    pub fn grid_norm(&self, field: &GridField) -> f64 {
        self.grid_inner(field, field).re.max(0.0).sqrt()
    }

    /// Sample an analytic function of position into a real scalar field.
    pub fn sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> ScalarField {
        ScalarField(
            self.coords
                .axis_iter(Axis(0))
                .map(|x| f(x.as_slice().expect("contiguous coordinates")))
                .collect(),
        )
    }

    /// Index of the mode with the given 1-based multi-index.
    pub fn mode_position(&self, index: &[usize]) -> Option<usize> {
        self.indices.iter().position(|k| k.as_slice() == index)
    }
}

/// Build the sine basis with `modes_per_axis[i]` modes along axis `i`.
pub fn build_basis(spec: &DomainSpec, modes_per_axis: &[usize]) -> Result<SpectralBasis> {
    spec.validate()?;
    let n = spec.dimension();
    if modes_per_axis.len() != n {
        return Err(Error::Domain(format!(
            "{} mode counts given for a {n}-dimensional box",
            modes_per_axis.len()
        )));
    }
    for (axis, (&k, &m)) in modes_per_axis.iter().zip(&spec.grid_points).enumerate() {
        if k == 0 || k > m / 2 {
            return Err(Error::Unresolvable {
                axis,
                modes: k,
                points: m,
                limit: m / 2,
            });
        }
    }

    // Per-axis interior nodes and 1-D sine tables.
    let axis_nodes: Vec<Vec<f64>> = spec
        .lengths
        .iter()
        .zip(&spec.grid_points)
        .map(|(&l, &m)| (1..m).map(|j| j as f64 * l / m as f64).collect())
        .collect();
    let axis_tables: Vec<Array2<f64>> = (0..n)
        .map(|i| {
            let l = spec.lengths[i];
            let norm = (2.0 / l).sqrt();
            Array2::from_shape_fn((modes_per_axis[i], axis_nodes[i].len()), |(k, j)| {
                norm * ((k + 1) as f64 * PI * axis_nodes[i][j] / l).sin()
            })
        })
        .collect();

    let indices = multi_indices(modes_per_axis);
    let node_index = multi_indices(&axis_nodes.iter().map(Vec::len).collect::<Vec<_>>());

    let eigenvalues = indices
        .iter()
        .map(|k| {
            k.iter()
                .zip(&spec.lengths)
                .map(|(&ki, &l)| (ki as f64 * PI / l).powi(2))
                .sum()
        })
        .collect();

    let coords = Array2::from_shape_fn((node_index.len(), n), |(q, i)| axis_nodes[i][node_index[q][i] - 1]);

    let table = Array2::from_shape_fn((indices.len(), node_index.len()), |(k, q)| {
        (0..n)
            .map(|i| axis_tables[i][[indices[k][i] - 1, node_index[q][i] - 1]])
            .product()
    });

    let weight = spec
        .lengths
        .iter()
        .zip(&spec.grid_points)
        .map(|(l, &m)| l / m as f64)
        .product();

    Ok(SpectralBasis {
        lengths: spec.lengths.clone(),
        grid_points: spec.grid_points.clone(),
        modes_per_axis: modes_per_axis.to_vec(),
        particles: spec.particles,
        indices,
        eigenvalues,
        coords,
        weight,
        table,
    })
}

/// All 1-based multi-indices in `[1, counts_0] x ... x [1, counts_{n-1}]`,
/// first axis slowest.
fn multi_indices(counts: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = counts.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut current = vec![1usize; counts.len()];
    for _ in 0..total {
        out.push(current.clone());
        for axis in (0..counts.len()).rev() {
            if current[axis] < counts[axis] {
                current[axis] += 1;
                break;
            }
            current[axis] = 1;
        }
    }
    out
}
