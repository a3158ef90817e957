//! Right-hand side of the coefficient ODE for the forward (α = 1) and adjoint
//! (α = 0) systems, plus direct evaluation of the forms `B` and `D`.
//!
//! All potential terms are evaluated pseudo-spectrally: synthesize on the
//! grid, multiply pointwise, project back.

use std::sync::Arc;

use ndarray::Array1;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::basis::{CoefficientState, GridField, ScalarField, SpectralBasis};
use crate::error::{Error, Result};
use crate::potentials::{self, CoulombKernel, Density, PotentialConfig};
use crate::propagator::{ControlSignal, Trajectory};

/// Which instance of the unified system is solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// α = 1: the Kohn-Sham system itself.
    Forward,
    /// α = 0: the linearization around a stored forward trajectory.
    Adjoint,
}

impl Mode {
    pub fn alpha(self) -> f64 {
        match self {
            Mode::Forward => 1.0,
            Mode::Adjoint => 0.0,
        }
    }
}

/// Inhomogeneity `F(t)` in coefficient space.
#[derive(Clone, Debug, Default)]
pub enum Source {
    #[default]
    Zero,
    Constant(CoefficientState),
    /// Piecewise-linear in time between the given nodes.
    Nodal {
        times: Vec<f64>,
        values: Vec<CoefficientState>,
    },
}

impl Source {
    pub fn from_grid(basis: &SpectralBasis, field: &GridField) -> Result<Self> {
        Ok(Source::Constant(basis.project(field)?))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Zero)
    }

    /// `F(t)`, or `None` for the zero provider.
    pub fn at(&self, t: f64) -> Result<Option<CoefficientState>> {
        match self {
            Source::Zero => Ok(None),
            Source::Constant(f) => Ok(Some(f.clone())),
            Source::Nodal { times, values } => {
                let (i, theta) = locate(times, t)?;
                if theta == 0.0 {
                    return Ok(Some(values[i].clone()));
                }
                let mut f = &values[i] * (1.0 - theta);
                f.axpy(C64::new(theta, 0.0), &values[i + 1]);
                Ok(Some(f))
            }
        }
    }

    /// `‖F(t)‖²` (zero for the zero provider).
    pub fn norm_sqr_at(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.map_or(0.0, |f| f.norm_sqr()))
    }
}

/// Index `i` and weight `θ ∈ [0, 1)` with `t = (1 − θ) t_i + θ t_{i+1}`.
pub(crate) fn locate(times: &[f64], t: f64) -> Result<(usize, f64)> {
    let n = times.len();
    if n == 0 {
        return Err(Error::TimeGrid("empty time grid".into()));
    }
    let (t0, t1) = (times[0], times[n - 1]);
    let slack = 1e-9 * (t1 - t0).abs().max(1.0);
    if t < t0 - slack || t > t1 + slack {
        return Err(Error::TimeGrid(format!("t = {t} outside [{t0}, {t1}]")));
    }
    if n == 1 || t >= t1 {
        return Ok((n - 1, 0.0));
    }
    let i = match times.binary_search_by(|x| x.total_cmp(&t)) {
        Ok(i) => return Ok((i, 0.0)),
        Err(0) => return Ok((0, 0.0)),
        Err(i) => i - 1,
    };
    let theta = (t - times[i]) / (times[i + 1] - times[i]);
    Ok((i, theta))
}

/// Everything the right-hand side needs besides `(t, d)`.
#[derive(Clone, Debug)]
pub struct SystemContext {
    pub basis: Arc<SpectralBasis>,
    pub potential: Arc<PotentialConfig>,
    pub kernel: Option<Arc<CoulombKernel>>,
    pub mode: Mode,
    /// Forward trajectory `Λ`; required for the adjoint.
    pub lambda: Option<Arc<Trajectory>>,
    pub source: Source,
    pub control: ControlSignal,
}

/// Frozen linearization at a state `Λ`: the operator
/// `δ ↦ P[(V_ext + V(ρ_Λ)) δ + (V_H(2 Re⟨δ,Λ⟩) + 2 V_xc'(ρ_Λ) Re⟨δ,Λ⟩) Λ]`,
/// optionally without the KS and D parts.
#[derive(Clone, Debug)]
pub struct Linearization {
    lambda: GridField,
    potential: ScalarField,
    dvxc: Option<ScalarField>,
    hartree: bool,
}

impl SystemContext {
    pub fn new(
        basis: Arc<SpectralBasis>,
        potential: Arc<PotentialConfig>,
        kernel: Option<Arc<CoulombKernel>>,
        control: ControlSignal,
    ) -> Result<Self> {
        if potential.spec.hartree && kernel.is_none() {
            return Err(Error::Potential("Hartree term enabled without a Coulomb kernel".into()));
        }
        if let Some(k) = &kernel {
            if k.node_count() != basis.node_count() {
                return Err(Error::Shape("kernel and basis grids differ".into()));
            }
        }
        if potential.v0.len() != basis.node_count() {
            return Err(Error::Shape("potential fields and basis grid differ".into()));
        }
        Ok(Self {
            basis,
            potential,
            kernel,
            mode: Mode::Forward,
            lambda: None,
            source: Source::Zero,
            control,
        })
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn with_control(mut self, control: ControlSignal) -> Self {
        self.control = control;
        self
    }

    /// Switch to the adjoint instance around the forward trajectory `lambda`.
    pub fn adjoint(mut self, lambda: Arc<Trajectory>) -> Self {
        self.mode = Mode::Adjoint;
        self.lambda = Some(lambda);
        self
    }

    pub fn forward(mut self) -> Self {
        self.mode = Mode::Forward;
        self.lambda = None;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.mode.alpha()
    }

    pub fn kernel(&self) -> Option<&CoulombKernel> {
        self.kernel.as_deref()
    }

    fn lambda_traj(&self) -> Result<&Trajectory> {
        self.lambda.as_deref().ok_or(Error::MissingForward)
    }

    /// `Λ(t)` from the stored forward trajectory.
    pub fn lambda_at(&self, t: f64) -> Result<CoefficientState> {
        self.lambda_traj()?.state_at(&self.basis, t)
    }

    pub fn external(&self, t: f64) -> ScalarField {
        potentials::external(&self.potential, self.control.value(t))
    }

    pub fn ks_potential(&self, rho: &Density) -> Result<ScalarField> {
        potentials::ks_potential(&self.potential, self.kernel(), rho)
    }

    /// `P[V ψ]` for a real potential field.
    pub fn apply_potential(&self, v: &ScalarField, d: &CoefficientState) -> Result<CoefficientState> {
        let psi = self.basis.synthesize(d)?;
        self.basis.project(&psi.scaled_by(v))
    }

    /// `P[(V_ext(t) + V(ρ(d))) ψ(d)]`, the forward potential term.
    pub fn forward_potential(&self, t: f64, d: &CoefficientState) -> Result<CoefficientState> {
        let psi = self.basis.synthesize(d)?;
        let mut v = self.external(t);
        if self.potential.is_nonlinear() {
            let rho = Density::from_grid(&psi);
            v.0 += &self.ks_potential(&rho)?.0;
        }
        self.basis.project(&psi.scaled_by(&v))
    }

    /// Freeze the adjoint operator at `lambda` with the control value of time `t`.
    pub fn linearize(&self, t: f64, lambda: &CoefficientState) -> Result<Linearization> {
        let grid = self.basis.synthesize(lambda)?;
        let mut v = self.external(t);
        let mut dvxc = None;
        if self.potential.is_nonlinear() {
            let rho = Density::from_grid(&grid);
            v.0 += &self.ks_potential(&rho)?.0;
            if self.potential.spec.exchange || self.potential.spec.correlation {
                dvxc = Some(potentials::vxc_rho_derivative(&self.potential, &rho));
            }
        }
        Ok(Linearization {
            lambda: grid,
            potential: v,
            dvxc,
            hartree: self.potential.spec.hartree,
        })
    }

    /// The adjoint operator at time `t`, with `Λ(t)` interpolated from the
    /// stored trajectory.
    pub fn adjoint_operator(&self, t: f64) -> Result<Linearization> {
        let lambda = self.lambda_at(t)?;
        self.linearize(t, &lambda)
    }

    /// Projection of the inhomogeneity at `t`.
    pub fn project_f(&self, t: f64) -> Result<CoefficientState> {
        Ok(self.source.at(t)?.unwrap_or_else(|| self.basis.zero_state()))
    }

    /// `G(d) = P[V(ρ(d)) ψ(d)]`, the nonlinear KS term alone.
    pub fn nonlinear_g(&self, d: &CoefficientState) -> Result<CoefficientState> {
        let psi = self.basis.synthesize(d)?;
        let rho = Density::from_grid(&psi);
        let v = self.ks_potential(&rho)?;
        self.basis.project(&psi.scaled_by(&v))
    }

    /// `d'` with `i d' = T d + W_ext d + (1 − α)(W_{KS}(Λ) d + D_Λ d) + f + α G(d)`.
    pub fn rhs(&self, t: f64, d: &CoefficientState) -> Result<CoefficientState> {
        if !d.is_finite() {
            return Err(Error::NonFinite {
                time: t,
                what: "rhs input".into(),
            });
        }
        let mut out = match self.mode {
            Mode::Forward => self.forward_potential(t, d)?,
            Mode::Adjoint => self.adjoint_operator(t)?.apply(self, d)?,
        };
        add_kinetic(&self.basis, d, &mut out);
        if let Some(f) = self.source.at(t)? {
            out.axpy(C64::new(1.0, 0.0), &f);
        }
        Ok(&out * C64::new(0.0, -1.0))
    }

    /// `(D_H(Ψ, Φ), D_xc(Ψ, Φ))` at time `t`.
    pub fn adjoint_d(&self, t: f64, psi: &CoefficientState, phi: &CoefficientState) -> Result<(C64, C64)> {
        let lambda = self.lambda_at(t)?;
        self.adjoint_d_at(&lambda, psi, phi)
    }

    /// `D` split as `(D_H, D_xc)` with an explicit `Λ`.
    pub fn adjoint_d_at(
        &self,
        lambda: &CoefficientState,
        psi: &CoefficientState,
        phi: &CoefficientState,
    ) -> Result<(C64, C64)> {
        let lam = self.basis.synthesize(lambda)?;
        let psi_g = self.basis.synthesize(psi)?;
        let phi_g = self.basis.synthesize(phi)?;
        let pairing = potentials::real_pairing(&psi_g, &lam);
        let rho = Density::from_grid(&lam);
        let dh = if self.potential.spec.hartree {
            let k = self.kernel().ok_or(Error::Potential("missing Coulomb kernel".into()))?;
            let vh = k.convolve(&(&pairing * 2.0))?;
            self.basis.grid_inner(&lam.scaled_by(&vh), &phi_g)
        } else {
            C64::new(0.0, 0.0)
        };
        let dxc = if self.potential.spec.exchange || self.potential.spec.correlation {
            let dv = potentials::vxc_rho_derivative(&self.potential, &rho);
            let w = ScalarField(&dv.0 * &pairing * 2.0);
            self.basis.grid_inner(&lam.scaled_by(&w), &phi_g)
        } else {
            C64::new(0.0, 0.0)
        };
        Ok((dh, dxc))
    }

    /// `B(Ψ, Φ; u)` at time `t`.
    pub fn bilinear_b(&self, t: f64, psi: &CoefficientState, phi: &CoefficientState) -> Result<C64> {
        match self.mode {
            Mode::Forward => self.bilinear_b_frozen(t, None, psi, phi),
            Mode::Adjoint => {
                let lambda = self.lambda_at(t)?;
                self.bilinear_b_frozen(t, Some(&lambda), psi, phi)
            }
        }
    }

    /// `B` with an explicit `Λ` (ignored in forward mode).
    pub fn bilinear_b_frozen(
        &self,
        t: f64,
        lambda: Option<&CoefficientState>,
        psi: &CoefficientState,
        phi: &CoefficientState,
    ) -> Result<C64> {
        let psi_g = self.basis.synthesize(psi)?;
        let phi_g = self.basis.synthesize(phi)?;
        let mut b = self.basis.gradient_inner(psi, phi);
        b += self.basis.grid_inner(&psi_g.scaled_by(&self.external(t)), &phi_g);
        if self.mode == Mode::Adjoint {
            let lambda = lambda.ok_or(Error::MissingForward)?;
            let lam = self.basis.synthesize(lambda)?;
            if self.potential.is_nonlinear() {
                let v = self.ks_potential(&Density::from_grid(&lam))?;
                b += self.basis.grid_inner(&psi_g.scaled_by(&v), &phi_g);
            }
            let (dh, dxc) = self.adjoint_d_at(lambda, psi, phi)?;
            b += dh + dxc;
        }
        Ok(b)
    }

    /// `⟨V(Ψ)Ψ, Ψ⟩`, the KS energy pairing (real).
    pub fn potential_pairing(&self, d: &CoefficientState) -> Result<f64> {
        if !self.potential.is_nonlinear() {
            return Ok(0.0);
        }
        Ok(self.nonlinear_g(d)?.inner(d).re)
    }
}

impl Linearization {
    pub fn lambda(&self) -> &GridField {
        &self.lambda
    }

    /// Apply the frozen operator (without the kinetic part) to `d`.
    pub fn apply(&self, ctx: &SystemContext, d: &CoefficientState) -> Result<CoefficientState> {
        let basis = &ctx.basis;
        let psi = basis.synthesize(d)?;
        let mut out = psi.scaled_by(&self.potential).into_values();
        if self.hartree || self.dvxc.is_some() {
            let pairing = potentials::real_pairing(&psi, &self.lambda);
            let mut w = Array1::<f64>::zeros(pairing.len());
            if self.hartree {
                let k = ctx.kernel().ok_or(Error::Potential("missing Coulomb kernel".into()))?;
                w += &k.convolve(&(&pairing * 2.0))?.0;
            }
            if let Some(dv) = &self.dvxc {
                w += &(&dv.0 * &pairing * 2.0);
            }
            out += self.lambda.scaled_by(&ScalarField(w)).values();
        }
        basis.project(&GridField::complex(out))
    }
}

/// `out += Λ d` with the diagonal kinetic operator `λ_k`.
pub fn add_kinetic(basis: &SpectralBasis, d: &CoefficientState, out: &mut CoefficientState) {
    let lam = basis.eigenvalues();
    for ((mut o, row), &l) in out
        .as_array_mut()
        .rows_mut()
        .into_iter()
        .zip(d.as_array().rows())
        .zip(lam.iter())
    {
        o.zip_mut_with(&row, |a, b| *a += b * l);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, DomainSpec};
    use crate::estimates::form_constants;
    use crate::potentials::{FieldPreset, PotentialSpec};
    use crate::propagator::solve_forward;
    use crate::random::random_state;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn context(spec: PotentialSpec, n: usize, points: usize, modes: usize, particles: usize) -> SystemContext {
        let domain = DomainSpec::unit(n, points, particles, 0.5, 50).unwrap();
        let basis = Arc::new(build_basis(&domain, &vec![modes; n]).unwrap());
        let soft = spec.resolved_softening(n).unwrap_or(0.1);
        let pot = Arc::new(PotentialConfig::new(spec, &basis).unwrap());
        let kernel = Arc::new(CoulombKernel::new(&basis, soft).unwrap());
        let control = ControlSignal::from_fn(0.5, 50, |t| 0.3 * (4.0 * t).sin());
        SystemContext::new(basis, pot, Some(kernel), control).unwrap()
    }

    fn nonlinear() -> PotentialSpec {
        PotentialSpec {
            softening: Some(0.1),
            v0: FieldPreset::Harmonic { omega: 4.0, center: None },
            ..PotentialSpec::default()
        }
    }

    fn adjoint_context(particles: usize) -> SystemContext {
        let ctx = context(nonlinear(), 1, 16, 4, particles);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi0 = random_state(&mut rng, ctx.basis.mode_count(), particles, 1.0);
        let traj = solve_forward(&ctx, &psi0).unwrap();
        ctx.adjoint(Arc::new(traj))
    }

    #[test]
    fn free_single_mode_rhs() {
        let ctx = context(PotentialSpec::linear(FieldPreset::Zero, FieldPreset::Zero), 1, 16, 6, 1);
        let d = CoefficientState::unit(6, 1, 2, 0);
        let r = ctx.rhs(0.1, &d).unwrap();
        let lam = ctx.basis.eigenvalues()[2];
        let expected = &d * C64::new(0.0, -lam);
        assert!((&r - &expected).max_abs() < 1e-10 * lam);
    }

    #[test]
    fn zero_state_has_zero_rhs() {
        let ctx = context(nonlinear(), 1, 16, 6, 2);
        let r = ctx.rhs(0.2, &ctx.basis.zero_state()).unwrap();
        assert_eq!(r.max_abs(), 0.0);
    }

    #[test]
    fn rhs_rejects_nonfinite_and_missing_lambda() {
        let ctx = context(nonlinear(), 1, 16, 6, 1);
        let mut d = ctx.basis.zero_state();
        d.as_array_mut()[[0, 0]] = C64::new(f64::NAN, 0.0);
        assert!(matches!(ctx.rhs(0.0, &d), Err(Error::NonFinite { .. })));
        let mut adj = ctx.clone();
        adj.mode = Mode::Adjoint;
        assert!(matches!(adj.rhs(0.0, &adj.basis.zero_state()), Err(Error::MissingForward)));
    }

    #[test]
    fn b_of_unit_mode_is_eigenvalue() {
        let ctx = context(PotentialSpec::linear(FieldPreset::Zero, FieldPreset::Zero), 2, 8, 3, 1);
        let m = ctx.basis.mode_count();
        let phi = CoefficientState::unit(m, 1, 0, 0);
        let b = ctx.bilinear_b(0.0, &phi, &phi).unwrap();
        assert!((b - C64::new(2.0 * std::f64::consts::PI.powi(2), 0.0)).norm() < 1e-10);
        assert_eq!(ctx.bilinear_b(0.0, &ctx.basis.zero_state(), &phi).unwrap(), C64::new(0.0, 0.0));
    }

    #[test]
    fn d_vanishes_for_imaginary_multiple_and_zero_lambda() {
        let ctx = adjoint_context(2);
        let t = 0.25;
        let lambda = ctx.lambda_at(t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = random_state(&mut rng, ctx.basis.mode_count(), 2, 1.0);
        let (dh, dxc) = ctx.adjoint_d_at(&lambda, &(&lambda * C64::new(0.0, 2.5)), &phi).unwrap();
        assert!(dh.norm() < 1e-12 && dxc.norm() < 1e-12);
        let zero = ctx.basis.zero_state();
        let psi = random_state(&mut rng, ctx.basis.mode_count(), 2, 1.0);
        let (dh, dxc) = ctx.adjoint_d_at(&zero, &psi, &phi).unwrap();
        assert_eq!((dh.norm(), dxc.norm()), (0.0, 0.0));
    }

    #[test]
    fn d_bounded_by_c0() {
        let ctx = adjoint_context(2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for step in [0usize, 10, 25, 50] {
            let t = ctx.lambda.as_ref().unwrap().times[step];
            let c = form_constants(&ctx, t).unwrap();
            let lambda = ctx.lambda_at(t).unwrap();
            for _ in 0..25 {
                let psi = random_state(&mut rng, ctx.basis.mode_count(), 2, 1.0);
                let phi = random_state(&mut rng, ctx.basis.mode_count(), 2, 1.0);
                let (dh, dxc) = ctx.adjoint_d_at(&lambda, &psi, &phi).unwrap();
                assert!((dh + dxc).norm() <= c.c0 * psi.norm() * phi.norm());
            }
        }
    }

    #[test]
    fn g_zero_and_correlation_bound() {
        let spec = PotentialSpec {
            hartree: false,
            exchange: false,
            ..nonlinear()
        };
        let ctx = context(spec, 1, 16, 6, 1);
        assert_eq!(ctx.nonlinear_g(&ctx.basis.zero_state()).unwrap().max_abs(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bound = ctx.potential.spec.correlation_a / ctx.potential.spec.correlation_b;
        for _ in 0..50 {
            let d = random_state(&mut rng, 6, 1, 1e-3);
            assert!(ctx.nonlinear_g(&d).unwrap().norm() <= bound * d.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn project_f_examples() {
        let ctx = context(nonlinear(), 1, 16, 6, 1);
        assert_eq!(ctx.project_f(0.3).unwrap().max_abs(), 0.0);
        let phi3 = GridField::real(ctx.basis.table().row(2).to_owned().insert_axis(ndarray::Axis(1)));
        let source = Source::from_grid(&ctx.basis, &phi3).unwrap();
        let ctx = ctx.with_source(source);
        let f = ctx.project_f(0.1).unwrap();
        assert!((&f - &CoefficientState::unit(6, 1, 2, 0)).max_abs() < 1e-10);
    }

    #[test]
    fn nodal_source_interpolates() {
        let a = CoefficientState::unit(2, 1, 0, 0);
        let b = CoefficientState::unit(2, 1, 1, 0);
        let s = Source::Nodal {
            times: vec![0.0, 1.0],
            values: vec![a.clone(), b.clone()],
        };
        let mid = s.at(0.25).unwrap().unwrap();
        assert!((mid.as_array()[[0, 0]].re - 0.75).abs() < 1e-15);
        assert!((mid.as_array()[[1, 0]].re - 0.25).abs() < 1e-15);
        assert!(s.at(1.5).is_err());
    }

    #[test]
    fn nonlinearity_locally_lipschitz() {
        // Ratios stay bounded inside a ball and the bound grows with its radius.
        let ctx = context(nonlinear(), 1, 32, 8, 2);
        let m = ctx.basis.mode_count();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut lmax = Vec::new();
        for radius in [0.5, 2.0, 8.0] {
            let mut l: f64 = 0.0;
            for _ in 0..100 {
                let d1 = random_state(&mut rng, m, 2, radius);
                let d2 = &d1 + &random_state(&mut rng, m, 2, 1e-3 * radius);
                let num = (&ctx.nonlinear_g(&d1).unwrap() - &ctx.nonlinear_g(&d2).unwrap()).norm();
                l = l.max(num / (&d1 - &d2).norm());
            }
            assert!(l.is_finite());
            lmax.push(l);
        }
        assert!(lmax[0] < lmax[1] && lmax[1] < lmax[2], "{lmax:?}");
    }

    #[test]
    fn dense_d_table_matches_matrix_free() {
        // ẽ^{kl}: columns of the real-linear D map on basis states and on i × basis states.
        let ctx = adjoint_context(1);
        let t = 0.2;
        let lambda = ctx.lambda_at(t).unwrap();
        let op = ctx.linearize(t, &lambda).unwrap();
        let m = ctx.basis.mode_count();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_state(&mut rng, m, 1, 1.0);
        let direct = op.apply(&ctx, &d).unwrap();
        let mut dense = ctx.basis.zero_state();
        for l in 0..m {
            let z = d.as_array()[[l, 0]];
            let re = op.apply(&ctx, &CoefficientState::unit(m, 1, l, 0)).unwrap();
            let im = op.apply(&ctx, &CoefficientState::unit(m, 1, l, 0).scaled(C64::i())).unwrap();
            dense.axpy(C64::new(z.re, 0.0), &re);
            dense.axpy(C64::new(z.im, 0.0), &im);
        }
        assert!((&dense - &direct).max_abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn forward_norm_derivative_vanishes(seed in 0u64..200, particles in 1usize..3) {
            let ctx = context(nonlinear(), 1, 16, 6, particles);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_state(&mut rng, 6, particles, 1.5);
            let r = ctx.rhs(0.13, &d).unwrap();
            // d/dt ‖d‖² = 2 Re⟨d', d⟩
            proptest::prop_assert!((2.0 * r.real_inner(&d)).abs() < 1e-10);
        }

        #[test]
        fn b_sesquilinear(seed in 0u64..100, ar in -2.0f64..2.0, ai in -2.0f64..2.0) {
            let ctx = context(nonlinear(), 1, 16, 4, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p1, p2, f) = (random_state(&mut rng, 4, 1, 1.0), random_state(&mut rng, 4, 1, 1.0), random_state(&mut rng, 4, 1, 1.0));
            let a = C64::new(ar, ai);
            let lhs = ctx.bilinear_b(0.1, &p1.scaled(a), &f).unwrap();
            let rhs = ctx.bilinear_b(0.1, &p1, &f).unwrap() * a;
            proptest::prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
            let sum = ctx.bilinear_b(0.1, &(&p1 + &p2), &f).unwrap();
            let parts = ctx.bilinear_b(0.1, &p1, &f).unwrap() + ctx.bilinear_b(0.1, &p2, &f).unwrap();
            proptest::prop_assert!((sum - parts).norm() <= 1e-12 * (1.0 + parts.norm()));
        }

        #[test]
        fn forward_b_is_real(seed in 0u64..200) {
            let ctx = context(nonlinear(), 1, 16, 6, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_state(&mut rng, 6, 2, 2.0);
            proptest::prop_assert!(ctx.bilinear_b(0.3, &d, &d).unwrap().im.abs() < 1e-10);
        }
    }
}
