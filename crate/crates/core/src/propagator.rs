//! Time stepping for the forward system and its adjoint.
//!
//! One step of size `h` from `t` is the symmetric composition
//!
//! 1. half source kick `−i (h/2) F(t)`,
//! 2. exact kinetic half step `e^{−iλh/2}`,
//! 3. implicit midpoint step for the potential part, solved by fixed-point
//!    iteration on the midpoint `y_m = y − i (h/2) N(t + h/2, y_m)`,
//! 4. exact kinetic half step,
//! 5. half source kick `−i (h/2) F(t + h)`.
//!
//! The projected potential is Hermitian, so step 3 conserves the norm up to
//! the fixed-point tolerance; the whole map is second order. The adjoint is
//! integrated backward in time with the same composition run in reverse. With
//! the linearization frozen at the stored forward midpoints this is the exact
//! discrete adjoint of the forward map, which makes reduced gradients agree
//! with finite differences of the discrete objective.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::basis::{CoefficientState, SpectralBasis};
use crate::error::{Error, Result};
use crate::galerkin::{locate, Mode, SystemContext};

/// Uniform samples `u_s = u(s T / S)`, `s = 0..=S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    horizon: f64,
    samples: Vec<f64>,
}

impl ControlSignal {
    pub fn new(horizon: f64, samples: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Control(format!("horizon {horizon} must be positive")));
        }
        if samples.len() < 2 {
            return Err(Error::Control("at least two samples are required".into()));
        }
        if let Some(s) = samples.iter().position(|u| !u.is_finite()) {
            return Err(Error::Control(format!("sample {s} is not finite")));
        }
        Ok(Self { horizon, samples })
    }

    pub fn zeros(horizon: f64, steps: usize) -> Self {
        Self::from_fn(horizon, steps, |_| 0.0)
    }

    pub fn from_fn<F: Fn(f64) -> f64>(horizon: f64, steps: usize, f: F) -> Self {
        let dt = horizon / steps as f64;
        Self {
            horizon,
            samples: (0..=steps).map(|s| f(s as f64 * dt)).collect(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.samples.len()).map(|s| s as f64 * dt).collect()
    }

    /// Linear-interpolation weights: `u(t) = Σ w u_s` over at most two samples.
    pub fn weights(&self, t: f64) -> [(usize, f64); 2] {
        let dt = self.dt();
        let x = (t / dt).clamp(0.0, self.steps() as f64);
        let i = (x.floor() as usize).min(self.steps() - 1);
        let theta = x - i as f64;
        [(i, 1.0 - theta), (i + 1, theta)]
    }

    pub fn value(&self, t: f64) -> f64 {
        self.weights(t).iter().map(|&(i, w)| w * self.samples[i]).sum()
    }

    /// Trapezoid weight of sample `s`.
    pub fn trapezoid_weight(&self, s: usize) -> f64 {
        if s == 0 || s == self.steps() {
            0.5
        } else {
            1.0
        }
    }

    pub fn l2_norm_sqr(&self) -> f64 {
        let dt = self.dt();
        self.samples
            .iter()
            .enumerate()
            .map(|(s, u)| dt * self.trapezoid_weight(s) * u * u)
            .sum()
    }

    /// `‖u'‖²` from forward differences.
    pub fn seminorm_sqr(&self) -> f64 {
        let dt = self.dt();
        self.samples.windows(2).map(|w| (w[1] - w[0]).powi(2) / dt).sum()
    }

    pub fn h1_norm_sqr(&self) -> f64 {
        self.l2_norm_sqr() + self.seminorm_sqr()
    }

    pub fn sup_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, u| m.max(u.abs()))
    }

    /// Resample onto `steps` uniform intervals by linear interpolation.
    pub fn resampled(&self, steps: usize) -> Self {
        Self::from_fn(self.horizon, steps, |t| self.value(t))
    }
}

/// Integrator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSettings {
    /// Relative tolerance of the midpoint fixed-point iteration.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Abort when a norm exceeds this multiple of its initial value.
    pub blowup_factor: f64,
    /// Adjoint time steps per forward step.
    pub adjoint_refinement: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 50,
            blowup_factor: 1e6,
            adjoint_refinement: 1,
        }
    }
}

impl IntegratorSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1e-3) {
            return Err(Error::TimeGrid(format!("fixed-point tolerance {} must lie in (0, 1e-3)", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::TimeGrid("at least one fixed-point iteration is required".into()));
        }
        if !(self.blowup_factor > 1.0) {
            return Err(Error::TimeGrid("blow-up factor must exceed 1".into()));
        }
        if self.adjoint_refinement == 0 {
            return Err(Error::TimeGrid("adjoint refinement must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-node diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub t: f64,
    pub l2: f64,
    pub h1: f64,
    pub re_b: f64,
    pub im_b: f64,
}

/// Snapshots on a uniform time grid, always indexed in physical time.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub mode: Mode,
    pub times: Vec<f64>,
    pub states: Vec<CoefficientState>,
    /// Step midpoints: the forward potential midpoint `y_m`, or the adjoint
    /// midpoint `ζ` of the implicit stage. `midpoints[n]` belongs to
    /// `[t_n, t_{n+1}]`.
    pub midpoints: Vec<CoefficientState>,
    pub diagnostics: Vec<Diagnostics>,
    /// Largest fixed-point iteration count over all steps.
    pub max_iterations: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }

    pub fn initial(&self) -> &CoefficientState {
        &self.states[0]
    }

    pub fn terminal(&self) -> &CoefficientState {
        self.states.last().expect("non-empty trajectory")
    }

    /// State at an arbitrary time, interpolated in the interaction picture:
    /// `(1 − θ) K(t − t_n) Λ_n + θ K(t − t_{n+1}) Λ_{n+1}` with the free
    /// propagator `K(s) = e^{−iλ s}`. Exact for free evolution.
    pub fn state_at(&self, basis: &SpectralBasis, t: f64) -> Result<CoefficientState> {
        let (i, theta) = locate(&self.times, t)?;
        if theta == 0.0 {
            return Ok(self.states[i].clone());
        }
        let mut a = kinetic(basis, &self.states[i], t - self.times[i]);
        let b = kinetic(basis, &self.states[i + 1], t - self.times[i + 1]);
        a = &a * (1.0 - theta);
        a.axpy(C64::new(theta, 0.0), &b);
        Ok(a)
    }

    pub fn max_l2(&self) -> f64 {
        self.diagnostics.iter().fold(0.0, |m, d| m.max(d.l2))
    }

    pub fn max_h1(&self) -> f64 {
        self.diagnostics.iter().fold(0.0, |m, d| m.max(d.h1))
    }

    /// `max_t |‖Ψ(t)‖² − ‖Ψ₀‖²| / ‖Ψ₀‖²`.
    pub fn max_relative_drift(&self) -> f64 {
        let n0 = self.diagnostics[0].l2.powi(2);
        let worst = self
            .diagnostics
            .iter()
            .fold(0.0, |m: f64, d| m.max((d.l2 * d.l2 - n0).abs()));
        if n0 > 0.0 {
            worst / n0
        } else {
            worst
        }
    }
}

/// `e^{−iλ s} d`.
pub fn kinetic(basis: &SpectralBasis, d: &CoefficientState, s: f64) -> CoefficientState {
    let mut out = d.clone();
    for (mut row, &lam) in out.as_array_mut().rows_mut().into_iter().zip(basis.eigenvalues().iter()) {
        let phase = C64::from_polar(1.0, -lam * s);
        row.mapv_inplace(|z| z * phase);
    }
    out
}

fn kick(ctx: &SystemContext, d: &mut CoefficientState, t: f64, factor: C64) -> Result<()> {
    if let Some(f) = ctx.source.at(t)? {
        d.axpy(factor, &f);
    }
    Ok(())
}

/// Solve `y = b + c · A(y)` by fixed-point iteration.
fn fixed_point<F>(
    settings: &IntegratorSettings,
    t: f64,
    b: &CoefficientState,
    c: C64,
    apply: F,
) -> Result<(CoefficientState, usize)>
where
    F: Fn(&CoefficientState) -> Result<CoefficientState>,
{
    let scale = b.norm();
    if scale == 0.0 {
        // The operators are homogeneous; zero is the fixed point.
        return Ok((CoefficientState::zeros(b.modes(), b.particles()), 0));
    }
    let mut y = b.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=settings.max_iterations {
        let mut next = b.clone();
        next.axpy(c, &apply(&y)?);
        residual = (&next - &y).norm();
        y = next;
        if !y.is_finite() {
            return Err(Error::NonFinite {
                time: t,
                what: "fixed-point iterate".into(),
            });
        }
        if residual <= settings.tolerance * scale {
            return Ok((y, it));
        }
    }
    Err(Error::FixedPoint {
        time: t,
        iterations: settings.max_iterations,
        residual: residual / scale,
    })
}

/// One forward step; returns `(y_{n+1}, midpoint, iterations)`.
pub fn step_forward(
    ctx: &SystemContext,
    settings: &IntegratorSettings,
    t: f64,
    dt: f64,
    d: &CoefficientState,
) -> Result<(CoefficientState, CoefficientState, usize)> {
    if !(dt > 0.0) {
        return Err(Error::TimeGrid(format!("step size {dt} must be positive")));
    }
    let half = C64::new(0.0, -0.5 * dt);
    let mut a = d.clone();
    kick(ctx, &mut a, t, half)?;
    let b = kinetic(&ctx.basis, &a, 0.5 * dt);
    let tm = t + 0.5 * dt;
    let (ym, iters) = fixed_point(settings, tm, &b, half, |y| ctx.forward_potential(tm, y))?;
    let mut c = &ym * 2.0;
    c.axpy(C64::new(-1.0, 0.0), &b);
    let mut e = kinetic(&ctx.basis, &c, 0.5 * dt);
    kick(ctx, &mut e, t + dt, half)?;
    Ok((e, ym, iters))
}

/// One step of the forward map with default settings (`d ↦ d_next`).
pub fn step(ctx: &SystemContext, t: f64, dt: f64, d: &CoefficientState) -> Result<CoefficientState> {
    Ok(step_forward(ctx, &IntegratorSettings::default(), t, dt, d)?.0)
}

/// One backward adjoint step from `t + dt` to `t` around the forward midpoint
/// `lambda_m`; returns `(Φ_n, ζ, iterations)`.
pub fn step_adjoint(
    ctx: &SystemContext,
    settings: &IntegratorSettings,
    t: f64,
    dt: f64,
    lambda_m: &CoefficientState,
    phi_next: &CoefficientState,
) -> Result<(CoefficientState, CoefficientState, usize)> {
    let half = C64::new(0.0, 0.5 * dt);
    let mut a = phi_next.clone();
    kick(ctx, &mut a, t + dt, half)?;
    let b = kinetic(&ctx.basis, &a, -0.5 * dt);
    let tm = t + 0.5 * dt;
    let op = ctx.linearize(tm, lambda_m)?;
    let (zeta, iters) = fixed_point(settings, tm, &b, half, |y| op.apply(ctx, y))?;
    let mut c = &zeta * 2.0;
    c.axpy(C64::new(-1.0, 0.0), &b);
    let mut e = kinetic(&ctx.basis, &c, -0.5 * dt);
    kick(ctx, &mut e, t, half)?;
    Ok((e, zeta, iters))
}

fn diagnostics(ctx: &SystemContext, t: f64, d: &CoefficientState, lambda: Option<&CoefficientState>) -> Result<Diagnostics> {
    let (l2, h1) = ctx.basis.norms(d);
    let b = ctx.bilinear_b_frozen(t, lambda, d, d)?;
    Ok(Diagnostics {
        t,
        l2,
        h1,
        re_b: b.re,
        im_b: b.im,
    })
}

struct BlowUpGuard {
    l2_limit: f64,
    h1_limit: f64,
}

impl BlowUpGuard {
    fn new(settings: &IntegratorSettings, first: &Diagnostics) -> Self {
        Self {
            l2_limit: settings.blowup_factor * first.l2.max(1.0),
            h1_limit: settings.blowup_factor * first.h1.max(1.0),
        }
    }

    fn check(&self, step: usize, d: &Diagnostics, state: &CoefficientState) -> Result<()> {
        if !state.is_finite() {
            return Err(Error::NonFinite {
                time: d.t,
                what: format!("state after step {step}; last good step {}", step.saturating_sub(1)),
            });
        }
        if d.l2 > self.l2_limit {
            return Err(Error::BlowUp {
                step,
                time: d.t,
                norm: d.l2,
                limit: self.l2_limit,
            });
        }
        if d.h1 > self.h1_limit {
            return Err(Error::BlowUp {
                step,
                time: d.t,
                norm: d.h1,
                limit: self.h1_limit,
            });
        }
        Ok(())
    }
}

/// Integrate the forward system (α = 1) from `psi0` over the control's time grid.
pub fn solve_forward(ctx: &SystemContext, psi0: &CoefficientState) -> Result<Trajectory> {
    solve_forward_with(ctx, &IntegratorSettings::default(), psi0)
}

pub fn solve_forward_with(ctx: &SystemContext, settings: &IntegratorSettings, psi0: &CoefficientState) -> Result<Trajectory> {
    settings.validate()?;
    if ctx.mode != Mode::Forward {
        return Err(Error::TimeGrid("solve_forward needs a forward-mode context".into()));
    }
    if psi0.modes() != ctx.basis.mode_count() || psi0.particles() != ctx.basis.particles() {
        return Err(Error::Shape(format!(
            "initial state is {}x{}, basis expects {}x{}",
            psi0.modes(),
            psi0.particles(),
            ctx.basis.mode_count(),
            ctx.basis.particles()
        )));
    }
    if !psi0.is_finite() {
        return Err(Error::NonFinite {
            time: 0.0,
            what: "initial state".into(),
        });
    }
    let times = ctx.control.times();
    let dt = ctx.control.dt();
    let steps = times.len() - 1;
    let mut states = Vec::with_capacity(steps + 1);
    let mut midpoints = Vec::with_capacity(steps);
    let mut diags = Vec::with_capacity(steps + 1);
    let first = diagnostics(ctx, 0.0, psi0, None)?;
    let guard = BlowUpGuard::new(settings, &first);
    diags.push(first);
    states.push(psi0.clone());
    let mut max_iterations = 0;
    for n in 0..steps {
        let (next, mid, iters) = step_forward(ctx, settings, times[n], dt, &states[n])?;
        max_iterations = max_iterations.max(iters);
        if !next.is_finite() {
            return Err(Error::NonFinite {
                time: times[n + 1],
                what: format!("forward state; last good step {n}"),
            });
        }
        let diag = diagnostics(ctx, times[n + 1], &next, None)?;
        guard.check(n + 1, &diag, &next)?;
        diags.push(diag);
        states.push(next);
        midpoints.push(mid);
    }
    Ok(Trajectory {
        mode: Mode::Forward,
        times,
        states,
        midpoints,
        diagnostics: diags,
        max_iterations,
    })
}

/// Integrate the adjoint system (α = 0) backward from `terminal` at `T`.
///
/// `ctx` must be in adjoint mode; its `Λ` supplies the linearization. With
/// `adjoint_refinement = 1` the stored forward midpoints are used directly;
/// for an integer refinement `r > 1` the adjoint runs on `r S` steps with `Λ`
/// interpolated between snapshots.
pub fn solve_adjoint(ctx: &SystemContext, terminal: &CoefficientState) -> Result<Trajectory> {
    solve_adjoint_with(ctx, &IntegratorSettings::default(), terminal)
}

pub fn solve_adjoint_with(ctx: &SystemContext, settings: &IntegratorSettings, terminal: &CoefficientState) -> Result<Trajectory> {
    settings.validate()?;
    if ctx.mode != Mode::Adjoint {
        return Err(Error::TimeGrid("solve_adjoint needs an adjoint-mode context".into()));
    }
    let lambda: Arc<crate::propagator::Trajectory> = ctx.lambda.clone().ok_or(Error::MissingForward)?;
    if terminal.modes() != ctx.basis.mode_count() || terminal.particles() != ctx.basis.particles() {
        return Err(Error::Shape("terminal state does not match the basis".into()));
    }
    let r = settings.adjoint_refinement;
    let fwd_steps = lambda.steps();
    let horizon = lambda.horizon();
    if (horizon - ctx.control.horizon()).abs() > 1e-12 * horizon {
        return Err(Error::TimeGrid(format!(
            "forward horizon {horizon} differs from control horizon {}",
            ctx.control.horizon()
        )));
    }
    if lambda.midpoints.len() != fwd_steps {
        return Err(Error::TimeGrid("forward trajectory lacks step midpoints".into()));
    }
    let steps = fwd_steps * r;
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|s| s as f64 * dt).collect();
    // Check the forward grid is uniform and aligned with ours.
    for (n, &t) in lambda.times.iter().enumerate() {
        if (t - times[n * r]).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::TimeGrid(format!("forward time {t} not on the adjoint grid")));
        }
    }

    let mut states = vec![ctx.basis.zero_state(); steps + 1];
    let mut midpoints = vec![ctx.basis.zero_state(); steps];
    let mut diags = vec![
        Diagnostics {
            t: 0.0,
            l2: 0.0,
            h1: 0.0,
            re_b: 0.0,
            im_b: 0.0
        };
        steps + 1
    ];
    let lambda_node = |s: usize| -> Result<CoefficientState> {
        if s % r == 0 {
            Ok(lambda.states[s / r].clone())
        } else {
            lambda.state_at(&ctx.basis, times[s])
        }
    };
    states[steps] = terminal.clone();
    diags[steps] = diagnostics(ctx, times[steps], terminal, Some(&lambda_node(steps)?))?;
    let guard = BlowUpGuard::new(settings, &diags[steps]);
    let mut max_iterations = 0;
    for n in (0..steps).rev() {
        let tm = times[n] + 0.5 * dt;
        let lambda_m = if r == 1 {
            lambda.midpoints[n].clone()
        } else {
            lambda.state_at(&ctx.basis, tm)?
        };
        let (prev, zeta, iters) = step_adjoint(ctx, settings, times[n], dt, &lambda_m, &states[n + 1])?;
        max_iterations = max_iterations.max(iters);
        if !prev.is_finite() {
            return Err(Error::NonFinite {
                time: times[n],
                what: format!("adjoint state; last good step {}", n + 1),
            });
        }
        let diag = diagnostics(ctx, times[n], &prev, Some(&lambda_node(n)?))?;
        guard.check(steps - n, &diag, &prev)?;
        diags[n] = diag;
        states[n] = prev;
        midpoints[n] = zeta;
    }
    Ok(Trajectory {
        mode: Mode::Adjoint,
        times,
        states,
        midpoints,
        diagnostics: diags,
        max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, DomainSpec};
    use crate::galerkin::Source;
    use crate::potentials::{CoulombKernel, FieldPreset, PotentialConfig, PotentialSpec};
    use crate::random::random_state;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx_with(spec: PotentialSpec, points: usize, modes: usize, particles: usize, horizon: f64, steps: usize, control: ControlSignal) -> SystemContext {
        let domain = DomainSpec::unit(1, points, particles, horizon, steps).unwrap();
        let basis = Arc::new(build_basis(&domain, &[modes]).unwrap());
        let kernel = if spec.hartree {
            Some(Arc::new(CoulombKernel::new(&basis, spec.softening.unwrap()).unwrap()))
        } else {
            None
        };
        let pot = Arc::new(PotentialConfig::new(spec, &basis).unwrap());
        SystemContext::new(basis, pot, kernel, control).unwrap()
    }

    fn free(horizon: f64, steps: usize, modes: usize) -> SystemContext {
        ctx_with(
            PotentialSpec::linear(FieldPreset::Zero, FieldPreset::Zero),
            2 * modes + 4,
            modes,
            1,
            horizon,
            steps,
            ControlSignal::zeros(horizon, steps),
        )
    }

    fn nonlinear_spec() -> PotentialSpec {
        PotentialSpec {
            softening: Some(0.1),
            v0: FieldPreset::Harmonic { omega: 5.0, center: None },
            ..PotentialSpec::default()
        }
    }

    #[test]
    fn control_norms_of_ramp() {
        let u = ControlSignal::from_fn(1.0, 1000, |t| t);
        // ∫ t² = 1/3 plus the trapezoid error h²/6; ∫ 1 = 1.
        assert!((u.l2_norm_sqr() - (1.0 / 3.0 + 1e-6 / 6.0)).abs() < 1e-14);
        assert!((u.seminorm_sqr() - 1.0).abs() < 1e-12);
        assert!((u.value(0.3333) - 0.3333).abs() < 1e-14);
        assert!(ControlSignal::new(1.0, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn free_mode_phase() {
        let ctx = free(1.0, 100, 6);
        let k = 3;
        let psi0 = CoefficientState::unit(6, 1, k, 0);
        let traj = solve_forward(&ctx, &psi0).unwrap();
        let lam = ctx.basis.eigenvalues()[k];
        let exact = C64::from_polar(1.0, -lam);
        assert!((traj.terminal().as_array()[[k, 0]] - exact).norm() < 1e-8);
    }

    #[test]
    fn zero_initial_state_stays_zero() {
        let ctx = ctx_with(nonlinear_spec(), 16, 6, 2, 0.5, 50, ControlSignal::from_fn(0.5, 50, |t| t));
        let traj = solve_forward(&ctx, &ctx.basis.zero_state()).unwrap();
        assert!(traj.states.iter().all(|s| s.max_abs() == 0.0));
    }

    #[test]
    fn nonlinear_norm_conserved() {
        let ctx = ctx_with(nonlinear_spec(), 32, 8, 2, 1.0, 400, ControlSignal::from_fn(1.0, 400, |t| (3.0 * t).sin()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi0 = random_state(&mut rng, 8, 2, 1.0);
        let traj = solve_forward(&ctx, &psi0).unwrap();
        assert!(traj.max_relative_drift() < 1e-10, "{}", traj.max_relative_drift());
    }

    #[test]
    fn step_is_continuous_at_zero() {
        let ctx = ctx_with(nonlinear_spec(), 16, 6, 1, 1.0, 10, ControlSignal::zeros(1.0, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_state(&mut rng, 6, 1, 1.0);
        let e1 = (&step(&ctx, 0.0, 1e-4, &d).unwrap() - &d).norm();
        let e2 = (&step(&ctx, 0.0, 5e-5, &d).unwrap() - &d).norm();
        assert!((e1 / e2 - 2.0).abs() < 0.01, "{}", e1 / e2);
        assert!(step(&ctx, 0.0, 0.0, &d).is_err());
    }

    /// `e^{-iHT}` by symmetric eigendecomposition of a real symmetric matrix.
    fn expm_oracle(h: &DMatrix<f64>, t: f64, v: &[C64]) -> Vec<C64> {
        let eig = h.clone().symmetric_eigen();
        let q = &eig.eigenvectors;
        let n = v.len();
        let mut coef = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for i in 0..n {
                s += v[i] * q[(i, j)];
            }
            coef[j] = s * C64::from_polar(1.0, -eig.eigenvalues[j] * t);
        }
        (0..n).map(|i| (0..n).map(|j| coef[j] * q[(i, j)]).sum()).collect()
    }

    fn hamiltonian(ctx: &SystemContext) -> DMatrix<f64> {
        let m = ctx.basis.mode_count();
        let mut h = DMatrix::<f64>::zeros(m, m);
        for l in 0..m {
            let col = ctx.apply_potential(&ctx.potential.v0, &CoefficientState::unit(m, 1, l, 0)).unwrap();
            for k in 0..m {
                h[(k, l)] = col.as_array()[[k, 0]].re;
            }
            h[(l, l)] += ctx.basis.eigenvalues()[l];
        }
        h
    }

    #[test]
    fn constant_potential_matches_exponential() {
        let ctx = ctx_with(
            PotentialSpec::linear(FieldPreset::Constant { value: 0.25 }, FieldPreset::Zero),
            20,
            8,
            1,
            1.0,
            1000,
            ControlSignal::zeros(1.0, 1000),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let psi0 = random_state(&mut rng, 8, 1, 1.0);
        let traj = solve_forward(&ctx, &psi0).unwrap();
        let v: Vec<C64> = psi0.as_array().column(0).to_vec();
        let exact = expm_oracle(&hamiltonian(&ctx), 1.0, &v);
        let err: f64 = exact
            .iter()
            .zip(traj.terminal().as_array().column(0).iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn harmonic_potential_second_order() {
        let make = |steps| {
            ctx_with(
                PotentialSpec::linear(FieldPreset::Harmonic { omega: 6.0, center: None }, FieldPreset::Zero),
                20,
                8,
                1,
                0.5,
                steps,
                ControlSignal::zeros(0.5, steps),
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let psi0 = random_state(&mut rng, 8, 1, 1.0);
        let v: Vec<C64> = psi0.as_array().column(0).to_vec();
        let exact = expm_oracle(&hamiltonian(&make(10)), 0.5, &v);
        let err = |steps| {
            let traj = solve_forward(&make(steps), &psi0).unwrap();
            exact
                .iter()
                .zip(traj.terminal().as_array().column(0).iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let ratio = err(100) / err(200);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn linear_adjoint_inverts_forward() {
        // Without density terms the backward sweep is the exact inverse map.
        let spec = PotentialSpec::linear(FieldPreset::Harmonic { omega: 4.0, center: None }, FieldPreset::Dipole { axis: 0, strength: 1.0 });
        let ctx = ctx_with(spec, 20, 8, 2, 0.5, 100, ControlSignal::from_fn(0.5, 100, |t| (5.0 * t).cos()));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi0 = random_state(&mut rng, 8, 2, 1.0);
        let fwd = Arc::new(solve_forward(&ctx, &psi0).unwrap());
        let adj_ctx = ctx.clone().adjoint(fwd.clone());
        let back = solve_adjoint(&adj_ctx, fwd.terminal()).unwrap();
        for (a, b) in back.states.iter().zip(&fwd.states) {
            assert!((a - b).max_abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_zero_terminal_is_zero() {
        let ctx = ctx_with(nonlinear_spec(), 16, 6, 1, 0.5, 40, ControlSignal::from_fn(0.5, 40, |t| t));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fwd = Arc::new(solve_forward(&ctx, &random_state(&mut rng, 6, 1, 1.0)).unwrap());
        let adj = solve_adjoint(&ctx.clone().adjoint(fwd), &ctx.basis.zero_state()).unwrap();
        assert!(adj.states.iter().all(|s| s.max_abs() == 0.0));
    }

    #[test]
    fn adjoint_with_zero_lambda_is_linear_flow() {
        // Λ ≡ 0 collapses the adjoint to the external-potential flow, which
        // conserves the norm when F ≡ 0.
        let ctx = ctx_with(nonlinear_spec(), 16, 6, 1, 0.5, 40, ControlSignal::from_fn(0.5, 40, |t| t));
        let fwd = Arc::new(solve_forward(&ctx, &ctx.basis.zero_state()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let terminal = random_state(&mut rng, 6, 1, 1.0);
        let adj = solve_adjoint(&ctx.clone().adjoint(fwd), &terminal).unwrap();
        assert!(adj.max_relative_drift() < 1e-10);
    }

    #[test]
    fn adjoint_refinement_converges() {
        let ctx = ctx_with(nonlinear_spec(), 16, 6, 1, 0.5, 50, ControlSignal::from_fn(0.5, 50, |t| t));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fwd = Arc::new(solve_forward(&ctx, &random_state(&mut rng, 6, 1, 2.0)).unwrap());
        let adj_ctx = ctx.clone().adjoint(fwd);
        let terminal = random_state(&mut rng, 6, 1, 1.0);
        let mut finals = Vec::new();
        for r in [1, 2, 4] {
            let settings = IntegratorSettings {
                adjoint_refinement: r,
                ..IntegratorSettings::default()
            };
            let adj = solve_adjoint_with(&adj_ctx, &settings, &terminal).unwrap();
            assert_eq!(adj.steps(), 50 * r);
            finals.push(adj.initial().clone());
        }
        let d1 = (&finals[0] - &finals[1]).norm();
        let d2 = (&finals[1] - &finals[2]).norm();
        assert!(d2 < d1, "{d1} {d2}");
    }

    #[test]
    fn adjoint_requires_lambda() {
        let ctx = ctx_with(nonlinear_spec(), 16, 6, 1, 0.5, 10, ControlSignal::zeros(0.5, 10));
        let mut adj = ctx.clone();
        adj.mode = Mode::Adjoint;
        assert!(matches!(solve_adjoint(&adj, &ctx.basis.zero_state()), Err(Error::MissingForward)));
    }

    #[test]
    fn blow_up_is_reported() {
        // A huge constant source drives the norm past the guard.
        let ctx = free(1.0, 50, 4);
        let big = &CoefficientState::unit(4, 1, 0, 0) * 1e9;
        let ctx = ctx.with_source(Source::Constant(big));
        let err = solve_forward(&ctx, &CoefficientState::unit(4, 1, 0, 0)).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    }

    #[test]
    fn interaction_picture_interpolation_exact_for_free_flow() {
        let ctx = free(1.0, 20, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi0 = random_state(&mut rng, 6, 1, 1.0);
        let traj = solve_forward(&ctx, &psi0).unwrap();
        let t = 0.3337;
        let exact = kinetic(&ctx.basis, &psi0, t);
        assert!((&traj.state_at(&ctx.basis, t).unwrap() - &exact).max_abs() < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn forward_conservation_property(seed in 0u64..1000, particles in 1usize..3, amp in 0.1f64..3.0) {
            let ctx = ctx_with(nonlinear_spec(), 16, 6, particles, 0.2, 40, ControlSignal::from_fn(0.2, 40, |t| (7.0 * t).sin()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi0 = random_state(&mut rng, 6, particles, amp);
            let traj = solve_forward(&ctx, &psi0).unwrap();
            proptest::prop_assert!(traj.max_relative_drift() <= 1e-6);
        }
    }
}
