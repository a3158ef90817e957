//! Density, Hartree / exchange / correlation potentials and the external field.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::basis::{CoefficientState, GridField, ScalarField, SpectralBasis};
use crate::error::{Error, Result};

/// Electron density `ρ(x_q) = Σ_j |ψ_j(x_q)|²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Density(pub ScalarField);

impl Density {
    pub fn from_grid(field: &GridField) -> Self {
        Density(ScalarField(
            field
                .values()
                .map_axis(Axis(1), |row| row.iter().map(|z| z.norm_sqr()).sum()),
        ))
    }

    pub fn field(&self) -> &ScalarField {
        &self.0
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0 .0
    }

    pub fn max(&self) -> f64 {
        self.values().fold(0.0, |m, &x| m.max(x))
    }
}

pub fn density(basis: &SpectralBasis, state: &CoefficientState) -> Result<Density> {
    Ok(Density::from_grid(&basis.synthesize(state)?))
}

/// Analytic field presets for `V₀` and `V_u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldPreset {
    Zero,
    Constant {
        value: f64,
    },
    /// `½ ω² |x − center|²`; the center defaults to the box midpoint.
    Harmonic {
        omega: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// Zero inside the centred box of relative `width`, `depth` outside.
    Well {
        depth: f64,
        width: f64,
    },
    /// Linear ramp `strength (x_axis − L_axis / 2)`.
    Dipole {
        #[serde(default)]
        axis: usize,
        #[serde(default = "one")]
        strength: f64,
    },
    /// `height · exp(−|x − center|² / (2 width²))`; the center defaults to
    /// the box midpoint.
    Gaussian {
        height: f64,
        width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// Node values in grid order.
    Samples {
        values: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

fn resolve_center(center: &Option<Vec<f64>>, lengths: &[f64]) -> Result<Vec<f64>> {
    match center {
        Some(c) if c.len() != lengths.len() => Err(Error::Potential(format!(
            "center has {} components for a {}-dimensional box",
            c.len(),
            lengths.len()
        ))),
        Some(c) => Ok(c.clone()),
        None => Ok(lengths.iter().map(|l| l / 2.0).collect()),
    }
}

fn dist_sqr(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum()
}

impl FieldPreset {
    pub fn sample(&self, basis: &SpectralBasis) -> Result<ScalarField> {
        let lengths = basis.lengths().to_vec();
        let n = lengths.len();
        let field = match self {
            FieldPreset::Zero => ScalarField::zeros(basis.node_count()),
            FieldPreset::Constant { value } => ScalarField::constant(basis.node_count(), *value),
            FieldPreset::Harmonic { omega, center } => {
                let c = resolve_center(center, &lengths)?;
                let w2 = omega * omega;
                basis.sample(|x| 0.5 * w2 * dist_sqr(x, &c))
            }
            FieldPreset::Gaussian { height, width, center } => {
                if !(*width > 0.0) {
                    return Err(Error::Potential(format!("gaussian width {width} must be positive")));
                }
                let c = resolve_center(center, &lengths)?;
                basis.sample(|x| height * (-dist_sqr(x, &c) / (2.0 * width * width)).exp())
            }
            FieldPreset::Well { depth, width } => {
                if !(*width > 0.0 && *width <= 1.0) {
                    return Err(Error::Potential(format!("well width {width} must lie in (0, 1]")));
                }
                basis.sample(|x| {
                    let inside = x
                        .iter()
                        .zip(&lengths)
                        .all(|(xi, l)| (xi - l / 2.0).abs() <= 0.5 * width * l);
                    if inside {
                        0.0
                    } else {
                        *depth
                    }
                })
            }
            FieldPreset::Dipole { axis, strength } => {
                if *axis >= n {
                    return Err(Error::Potential(format!("dipole axis {axis} outside a {n}-dimensional box")));
                }
                let half = lengths[*axis] / 2.0;
                basis.sample(|x| strength * (x[*axis] - half))
            }
            FieldPreset::Samples { values } => {
                if values.len() != basis.node_count() {
                    return Err(Error::Potential(format!(
                        "{} samples given for {} grid nodes",
                        values.len(),
                        basis.node_count()
                    )));
                }
                ScalarField(Array1::from(values.clone()))
            }
        };
        if !field.is_finite() {
            return Err(Error::Potential("field has non-finite values".into()));
        }
        Ok(field)
    }
}

/// Softening used in one dimension when none is configured.
pub const DEFAULT_SOFTENING_1D: f64 = 0.1;

/// Serializable potential parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialSpec {
    pub hartree: bool,
    pub exchange: bool,
    pub correlation: bool,
    /// Exchange prefactor `c < 0` in `V_x = c ρ^β`.
    pub exchange_c: f64,
    pub exchange_beta: f64,
    /// Wigner parameters in `V_c = −a / (r_s + b)`.
    pub correlation_a: f64,
    pub correlation_b: f64,
    /// Coulomb softening length; `None` resolves to the exact kernel for
    /// n ≥ 2 and to `DEFAULT_SOFTENING_1D` for n = 1.
    pub softening: Option<f64>,
    pub v0: FieldPreset,
    pub vu: FieldPreset,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self {
            hartree: true,
            exchange: true,
            correlation: true,
            exchange_c: -(3.0 / PI).cbrt(),
            exchange_beta: 1.0 / 3.0,
            correlation_a: 0.44,
            correlation_b: 7.8,
            softening: None,
            v0: FieldPreset::Zero,
            vu: FieldPreset::Dipole { axis: 0, strength: 1.0 },
        }
    }
}

impl PotentialSpec {
    /// Linear problem: every density-dependent term switched off.
    pub fn linear(v0: FieldPreset, vu: FieldPreset) -> Self {
        Self {
            hartree: false,
            exchange: false,
            correlation: false,
            v0,
            vu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.exchange_c < 0.0) {
            return Err(Error::Potential(format!(
                "exchange constant c = {} must be a negative constant",
                self.exchange_c
            )));
        }
        if !(self.exchange_beta > 0.0 && self.exchange_beta < 1.0) {
            return Err(Error::Potential(format!(
                "exchange exponent beta = {} must lie in (0, 1)",
                self.exchange_beta
            )));
        }
        if !(self.correlation_a > 0.0 && self.correlation_b > 0.0) {
            return Err(Error::Potential(format!(
                "correlation parameters a = {}, b = {} must be positive so that V_c stays bounded",
                self.correlation_a, self.correlation_b
            )));
        }
        if let Some(a) = self.softening {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Potential(format!("softening {a} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn resolved_softening(&self, dimension: usize) -> Result<f64> {
        match (self.softening, dimension) {
            (Some(a), 1) if a <= 0.0 && self.hartree => Err(Error::Potential(
                "the 1/|x| kernel is not integrable in one dimension; set a positive softening".into(),
            )),
            (Some(a), _) => Ok(a),
            (None, 1) => Ok(DEFAULT_SOFTENING_1D),
            (None, _) => Ok(0.0),
        }
    }
}

/// Potential parameters with `V₀` and `V_u` sampled on the grid.
#[derive(Clone, Debug)]
pub struct PotentialConfig {
    pub spec: PotentialSpec,
    pub dimension: usize,
    pub v0: ScalarField,
    pub vu: ScalarField,
}

impl PotentialConfig {
    pub fn new(spec: PotentialSpec, basis: &SpectralBasis) -> Result<Self> {
        spec.validate()?;
        let v0 = spec.v0.sample(basis)?;
        let vu = spec.vu.sample(basis)?;
        Ok(Self {
            dimension: basis.dimension(),
            spec,
            v0,
            vu,
        })
    }

    pub fn is_nonlinear(&self) -> bool {
        self.spec.hartree || self.spec.exchange || self.spec.correlation
    }

    /// Ball-volume constant `ω_n` with `|B_r| = ω_n rⁿ`.
    fn ball_constant(&self) -> f64 {
        match self.dimension {
            1 => 2.0,
            2 => PI,
            _ => 4.0 * PI / 3.0,
        }
    }

    /// Wigner-Seitz radius `r_s = (ω_n ρ)^{-1/n}`, infinite at ρ = 0.
    pub fn wigner_seitz(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            f64::INFINITY
        } else {
            (1.0 / (self.ball_constant() * rho)).powf(1.0 / self.dimension as f64)
        }
    }

    pub fn exchange_value(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            0.0
        } else {
            self.spec.exchange_c * rho.powf(self.spec.exchange_beta)
        }
    }

    pub fn correlation_value(&self, rho: f64) -> f64 {
        let rs = self.wigner_seitz(rho);
        if rs.is_infinite() {
            0.0
        } else {
            -self.spec.correlation_a / (rs + self.spec.correlation_b)
        }
    }

    /// `∂(V_x + V_c)/∂ρ` for the enabled terms; zero at ρ = 0 where the
    /// product with ρ vanishes.
    pub fn vxc_derivative_value(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            return 0.0;
        }
        let mut d = 0.0;
        if self.spec.exchange {
            d += self.spec.exchange_c * self.spec.exchange_beta * rho.powf(self.spec.exchange_beta - 1.0);
        }
        if self.spec.correlation {
            let rs = self.wigner_seitz(rho);
            let b = self.spec.correlation_b;
            d -= self.spec.correlation_a * rs / (self.dimension as f64 * rho * (rs + b) * (rs + b));
        }
        d
    }
}

pub fn exchange(config: &PotentialConfig, rho: &Density) -> ScalarField {
    ScalarField(rho.values().mapv(|r| config.exchange_value(r)))
}

/// `V_x ψ_j` for every particle channel.
pub fn exchange_apply(config: &PotentialConfig, rho: &Density, psi: &GridField) -> GridField {
    psi.scaled_by(&exchange(config, rho))
}

pub fn correlation(config: &PotentialConfig, rho: &Density) -> ScalarField {
    ScalarField(rho.values().mapv(|r| config.correlation_value(r)))
}

pub fn vxc_rho_derivative(config: &PotentialConfig, rho: &Density) -> ScalarField {
    ScalarField(rho.values().mapv(|r| config.vxc_derivative_value(r)))
}

/// `V₀ + u V_u`.
pub fn external(config: &PotentialConfig, u: f64) -> ScalarField {
    ScalarField(&config.v0.0 + &(&config.vu.0 * u))
}

/// Dense discrete Coulomb operator `K[q, r] ≈ w(x_q − x_r) · h^n`.
#[derive(Clone, Debug)]
pub struct CouplingMatrix(Array2<f64>);

#[derive(Clone, Debug)]
pub struct CoulombKernel {
    matrix: CouplingMatrix,
    softening: f64,
    row_sum: f64,
}

impl CoulombKernel {
    pub fn new(basis: &SpectralBasis, softening: f64) -> Result<Self> {
        let n = basis.dimension();
        if n == 1 && softening <= 0.0 {
            return Err(Error::Potential(
                "the 1/|x| kernel is not integrable in one dimension; set a positive softening".into(),
            ));
        }
        let h = basis.spacing();
        let weight = basis.weight();
        let diag = cell_integral(&h, softening);
        let coords = basis.coords();
        let q = basis.node_count();
        let mut k = Array2::<f64>::zeros((q, q));
        for a in 0..q {
            k[[a, a]] = diag;
            for b in (a + 1)..q {
                let r2: f64 = (0..n).map(|i| (coords[[a, i]] - coords[[b, i]]).powi(2)).sum();
                let v = weight / (r2 + softening * softening).sqrt();
                k[[a, b]] = v;
                k[[b, a]] = v;
            }
        }
        let row_sum = k
            .axis_iter(Axis(0))
            .map(|row| row.sum())
            .fold(0.0, f64::max);
        Ok(Self {
            matrix: CouplingMatrix(k),
            softening,
            row_sum,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix.0
    }

    pub fn softening(&self) -> f64 {
        self.softening
    }

    /// Maximum row sum, the discrete surrogate of `‖w‖_{L¹}` in Young's
    /// inequality.
    pub fn l1_norm(&self) -> f64 {
        self.row_sum
    }

    pub fn node_count(&self) -> usize {
        self.matrix.0.nrows()
    }

    /// Discrete convolution `Σ_r K[q, r] f(x_r)`.
    pub fn convolve(&self, f: &Array1<f64>) -> Result<ScalarField> {
        if f.len() != self.node_count() {
            return Err(Error::Shape(format!(
                "kernel built for {} nodes, density has {}",
                self.node_count(),
                f.len()
            )));
        }
        Ok(ScalarField(self.matrix.0.dot(f)))
    }
}

pub fn hartree(kernel: &CoulombKernel, rho: &Density) -> Result<ScalarField> {
    kernel.convolve(rho.values())
}

/// Exact integral of `1/|x|` (or the softened kernel) over the grid cell
/// centred at the origin.
pub fn cell_integral(h: &[f64], softening: f64) -> f64 {
    match (h.len(), softening > 0.0) {
        (1, _) => 2.0 * (h[0] / (2.0 * softening)).asinh(),
        (2, false) => {
            let (a, b) = (h[0] / 2.0, h[1] / 2.0);
            4.0 * (a * (b / a).asinh() + b * (a / b).asinh())
        }
        (3, false) => 8.0 * octant_integral(h[0] / 2.0, h[1] / 2.0, h[2] / 2.0),
        (_, true) => softened_cell_integral(h, softening),
        _ => unreachable!("dimension validated by DomainSpec"),
    }
}

/// `∫_{[0,a]×[0,b]×[0,c]} 1/|x| dx` via the divergence theorem on `x/|x|`.
pub fn octant_integral(a: f64, b: f64, c: f64) -> f64 {
    0.5 * (a * face_integral(b, c, a) + b * face_integral(a, c, b) + c * face_integral(a, b, c))
}

/// `∫_0^A ∫_0^B (y² + z² + d²)^{-1/2} dy dz`.
fn face_integral(a: f64, b: f64, d: f64) -> f64 {
    let r = (a * a + b * b + d * d).sqrt();
    a * (b / (a * a + d * d).sqrt()).asinh() + b * (a / (b * b + d * d).sqrt()).asinh()
        - d * (a * b / (d * r)).atan()
}

fn softened_cell_integral(h: &[f64], softening: f64) -> f64 {
    const PANELS: usize = 8;
    let (nodes, weights) = gauss_legendre(8);
    let axis_rule = |len: f64| -> Vec<(f64, f64)> {
        let panel = len / PANELS as f64;
        let mut pts = Vec::with_capacity(PANELS * nodes.len());
        for p in 0..PANELS {
            let mid = -len / 2.0 + (p as f64 + 0.5) * panel;
            for (x, w) in nodes.iter().zip(&weights) {
                pts.push((mid + 0.5 * panel * x, 0.5 * panel * w));
            }
        }
        pts
    };
    let rules: Vec<Vec<(f64, f64)>> = h.iter().map(|&l| axis_rule(l)).collect();
    let a2 = softening * softening;
    match rules.len() {
        2 => {
            let mut s = 0.0;
            for (x, wx) in &rules[0] {
                for (y, wy) in &rules[1] {
                    s += wx * wy / (x * x + y * y + a2).sqrt();
                }
            }
            s
        }
        _ => {
            let mut s = 0.0;
            for (x, wx) in &rules[0] {
                for (y, wy) in &rules[1] {
                    for (z, wz) in &rules[2] {
                        s += wx * wy * wz / (x * x + y * y + z * z + a2).sqrt();
                    }
                }
            }
            s
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Kohn-Sham potential `V = V_H + V_x + V_c` for the enabled terms.
pub fn ks_potential(config: &PotentialConfig, kernel: Option<&CoulombKernel>, rho: &Density) -> Result<ScalarField> {
    let mut v = Array1::<f64>::zeros(rho.values().len());
    if config.spec.hartree {
        let k = kernel.ok_or_else(|| Error::Potential("Hartree term enabled without a Coulomb kernel".into()))?;
        v += &hartree(k, rho)?.0;
    }
    if config.spec.exchange {
        v += &exchange(config, rho).0;
    }
    if config.spec.correlation {
        v += &correlation(config, rho).0;
    }
    Ok(ScalarField(v))
}

/// Pointwise real pairing `Re⟨Ψ, Λ⟩_{ℂ^N} = Σ_j Re(ψ_j conj(λ_j))`.
pub fn real_pairing(psi: &GridField, lambda: &GridField) -> Array1<f64> {
    ndarray::Zip::from(psi.values().rows())
        .and(lambda.values().rows())
        .map_collect(|a, b| a.iter().zip(b.iter()).map(|(x, y)| (x * y.conj()).re).sum())
}
