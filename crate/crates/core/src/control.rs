//! Optimal control: objective, adjoint data, reduced gradient, finite-difference
//! validation and Armijo gradient descent.
//!
//! The discrete objective is
//! `J(u) = Σ_n h w_n ‖y_n − Ψ_d(t_n)‖² + ‖y_S − Ψ_T‖² + ν ‖u‖²_{H¹}` with
//! trapezoid weights `w_n`, and the gradient is the exact derivative of that
//! discrete functional through the midpoint integrator.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::CoefficientState;
use crate::error::{Error, Result};
use crate::estimates::EstimateReport;
use crate::galerkin::{Mode, Source, SystemContext};
use crate::propagator::{solve_adjoint_with, solve_forward_with, ControlSignal, IntegratorSettings, Trajectory};

/// Desired state for trajectory tracking.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    State(CoefficientState),
    /// One state per time node.
    Trajectory(Vec<CoefficientState>),
}

impl Target {
    fn at(&self, n: usize) -> &CoefficientState {
        match self {
            Target::State(s) => s,
            Target::Trajectory(v) => &v[n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    /// `∫₀ᵀ ‖Ψ − Ψ_d‖² dt`, or none.
    pub tracking: Option<Target>,
    /// `‖Ψ(T) − Ψ_T‖²`, or none.
    pub terminal: Option<CoefficientState>,
    pub nu: f64,
}

impl ObjectiveSpec {
    pub fn regularization_only(nu: f64) -> Self {
        Self {
            tracking: None,
            terminal: None,
            nu,
        }
    }

    pub fn validate(&self, ctx: &SystemContext) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Objective(format!("weight nu = {} must be positive", self.nu)));
        }
        let (m, n) = (ctx.basis.mode_count(), ctx.basis.particles());
        let fits = |s: &CoefficientState| s.modes() == m && s.particles() == n && s.is_finite();
        match &self.tracking {
            Some(Target::State(s)) if !fits(s) => {
                return Err(Error::Objective("tracking target does not match the basis".into()))
            }
            Some(Target::Trajectory(v)) => {
                if v.len() != ctx.control.steps() + 1 {
                    return Err(Error::Objective(format!(
                        "tracking target has {} states, the time grid {}",
                        v.len(),
                        ctx.control.steps() + 1
                    )));
                }
                if !v.iter().all(fits) {
                    return Err(Error::Objective("tracking target does not match the basis".into()));
                }
            }
            _ => {}
        }
        if let Some(s) = &self.terminal {
            if !fits(s) {
                return Err(Error::Objective("terminal target does not match the basis".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub tracking: f64,
    pub terminal: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Discrete `‖u‖²_{H¹}` gradient with respect to the samples.
fn regularization_gradient(u: &ControlSignal) -> Vec<f64> {
    let dt = u.dt();
    let s = u.samples();
    let last = s.len() - 1;
    (0..=last)
        .map(|k| {
            let mut g = 2.0 * dt * u.trapezoid_weight(k) * s[k];
            if k > 0 {
                g += 2.0 * (s[k] - s[k - 1]) / dt;
            }
            if k < last {
                g -= 2.0 * (s[k + 1] - s[k]) / dt;
            }
            g
        })
        .collect()
}

/// Solve `(M + K) x = g` where `M` is the lumped trapezoid mass and `K` the
/// linear-element stiffness with natural boundary conditions.
pub fn h1_riesz(u: &ControlSignal, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let dt = u.dt();
    let k = 1.0 / dt;
    let diag: Vec<f64> = (0..n)
        .map(|s| {
            let neighbours = if s == 0 || s == n - 1 { 1.0 } else { 2.0 };
            dt * u.trapezoid_weight(s) + neighbours * k
        })
        .collect();
    // Thomas algorithm; the off-diagonals are all −k.
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = -k / diag[0];
    d[0] = g[0] / diag[0];
    for s in 1..n {
        let m = diag[s] + k * c[s - 1];
        c[s] = -k / m;
        d[s] = (g[s] + k * d[s - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for s in (0..n - 1).rev() {
        x[s] = d[s] - c[s] * x[s + 1];
    }
    x
}

/// Derivative of `J` with respect to the control samples, and its Riesz
/// representatives.
#[derive(Clone, Debug)]
pub struct ReducedGradient {
    pub objective: ObjectiveValue,
    /// `∂J/∂u_s`.
    pub samples: Vec<f64>,
    /// L² representative `∂J/∂u_s / (h w_s)`.
    pub l2: ControlSignal,
    /// H¹ representative, the steepest-descent direction in the control space.
    pub h1: ControlSignal,
    /// `‖∇J‖_{H¹}`.
    pub norm: f64,
}

/// The forward model, initial state and objective together.
#[derive(Clone, Debug)]
pub struct ControlProblem {
    pub context: SystemContext,
    pub settings: IntegratorSettings,
    pub initial: CoefficientState,
    pub objective: ObjectiveSpec,
}

impl ControlProblem {
    pub fn new(context: SystemContext, settings: IntegratorSettings, initial: CoefficientState, objective: ObjectiveSpec) -> Result<Self> {
        if context.mode != Mode::Forward {
            return Err(Error::Objective("the control problem needs a forward context".into()));
        }
        if !context.source.is_zero() {
            return Err(Error::Objective("the controlled forward system has no inhomogeneity".into()));
        }
        objective.validate(&context)?;
        settings.validate()?;
        Ok(Self {
            context,
            settings,
            initial,
            objective,
        })
    }

    fn check_control(&self, u: &ControlSignal) -> Result<()> {
        let c = &self.context.control;
        if u.steps() != c.steps() || (u.horizon() - c.horizon()).abs() > 1e-12 * c.horizon() {
            return Err(Error::Control(format!(
                "control has {} steps on [0, {}], the model {} on [0, {}]",
                u.steps(),
                u.horizon(),
                c.steps(),
                c.horizon()
            )));
        }
        Ok(())
    }

    pub fn solve(&self, u: &ControlSignal) -> Result<Trajectory> {
        self.check_control(u)?;
        let ctx = self.context.clone().with_control(u.clone());
        solve_forward_with(&ctx, &self.settings, &self.initial)
    }

    /// `J` on a given forward trajectory.
    pub fn objective_on(&self, traj: &Trajectory, u: &ControlSignal) -> ObjectiveValue {
        let dt = u.dt();
        let tracking = self.objective.tracking.as_ref().map_or(0.0, |target| {
            traj.states
                .iter()
                .enumerate()
                .map(|(n, y)| dt * u.trapezoid_weight(n) * (y - target.at(n)).norm_sqr())
                .sum()
        });
        let terminal = self
            .objective
            .terminal
            .as_ref()
            .map_or(0.0, |target| (traj.terminal() - target).norm_sqr());
        let regularization = self.objective.nu * u.h1_norm_sqr();
        ObjectiveValue {
            tracking,
            terminal,
            regularization,
            total: tracking + terminal + regularization,
        }
    }

    pub fn evaluate(&self, u: &ControlSignal) -> Result<ObjectiveValue> {
        let traj = self.solve(u)?;
        Ok(self.objective_on(&traj, u))
    }

    /// Terminal datum and inhomogeneity of the adjoint system for the forward
    /// trajectory `lambda`: `Φ(T) = 2i(Λ(T) − Ψ_T)` and `F = 2(Λ − Ψ_d)`.
    ///
    /// The factor `i` maps the real-pairing Lagrange multiplier onto the
    /// adjoint variable of the time-reversed equation.
    pub fn adjoint_sources(&self, lambda: &Trajectory) -> (CoefficientState, Source) {
        let terminal = match &self.objective.terminal {
            Some(target) => &(lambda.terminal() - target) * C64::new(0.0, 2.0),
            None => self.context.basis.zero_state(),
        };
        let source = match &self.objective.tracking {
            Some(target) => Source::Nodal {
                times: lambda.times.clone(),
                values: lambda
                    .states
                    .iter()
                    .enumerate()
                    .map(|(n, y)| &(y - target.at(n)) * 2.0)
                    .collect(),
            },
            None => Source::Zero,
        };
        (terminal, source)
    }

    /// One forward and one adjoint solve.
    pub fn gradient(&self, u: &ControlSignal) -> Result<ReducedGradient> {
        if self.settings.adjoint_refinement != 1 {
            return Err(Error::Control("the reduced gradient needs the adjoint on the forward grid".into()));
        }
        let traj = Arc::new(self.solve(u)?);
        let objective = self.objective_on(&traj, u);
        let mut samples = regularization_gradient(u);
        for g in samples.iter_mut() {
            *g *= self.objective.nu;
        }
        let (terminal, source) = self.adjoint_sources(&traj);
        if self.objective.tracking.is_some() || self.objective.terminal.is_some() {
            let ctx = self.context.clone().with_control(u.clone());
            let adj_ctx = ctx.clone().adjoint(traj.clone()).with_source(source);
            let adj = solve_adjoint_with(&adj_ctx, &self.settings, &terminal)?;
            let dt = u.dt();
            let vu = &ctx.potential.vu;
            let coupling: Vec<f64> = traj
                .midpoints
                .par_iter()
                .zip(adj.midpoints.par_iter())
                .map(|(y, z)| Ok(dt * ctx.apply_potential(vu, y)?.real_inner(z)))
                .collect::<Result<_>>()?;
            for (n, c) in coupling.iter().enumerate() {
                for (s, w) in u.weights(traj.times[n] + 0.5 * dt) {
                    samples[s] += w * c;
                }
            }
        }
        let dt = u.dt();
        let l2: Vec<f64> = samples
            .iter()
            .enumerate()
            .map(|(s, g)| g / (dt * u.trapezoid_weight(s)))
            .collect();
        let h1 = h1_riesz(u, &samples);
        let norm = samples.iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();
        Ok(ReducedGradient {
            objective,
            samples,
            l2: ControlSignal::new(u.horizon(), l2)?,
            h1: ControlSignal::new(u.horizon(), h1)?,
            norm,
        })
    }

    /// Compare `∂J/∂u_s` at `count` random sample indices with central
    /// differences. For each index the step is chosen from `steps` where two
    /// consecutive estimates agree best.
    pub fn finite_difference_check(
        &self,
        u: &ControlSignal,
        count: usize,
        steps: &[f64],
        seed: u64,
    ) -> Result<FiniteDifferenceCheck> {
        if steps.len() < 2 {
            return Err(Error::Check("at least two difference steps are needed".into()));
        }
        let grad = self.gradient(u)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = sample(&mut rng, u.samples().len(), count.min(u.samples().len())).into_vec();
        indices.sort_unstable();
        let jobs: Vec<(usize, usize)> = indices
            .iter()
            .flat_map(|&s| (0..steps.len()).map(move |k| (s, k)))
            .collect();
        let diffs: Vec<f64> = jobs
            .par_iter()
            .map(|&(s, k)| {
                let eps = steps[k];
                let mut plus = u.clone();
                plus.samples_mut()[s] += eps;
                let mut minus = u.clone();
                minus.samples_mut()[s] -= eps;
                Ok((self.evaluate(&plus)?.total - self.evaluate(&minus)?.total) / (2.0 * eps))
            })
            .collect::<Result<_>>()?;
        let mut entries = Vec::new();
        for (i, &s) in indices.iter().enumerate() {
            let row = &diffs[i * steps.len()..(i + 1) * steps.len()];
            let k = (0..steps.len() - 1)
                .min_by(|&a, &b| {
                    let da = (row[a] - row[a + 1]).abs();
                    let db = (row[b] - row[b + 1]).abs();
                    da.total_cmp(&db)
                })
                .expect("two steps");
            entries.push(FiniteDifferenceEntry {
                index: s,
                adjoint: grad.samples[s],
                difference: row[k],
                step: steps[k],
            });
        }
        let num: f64 = entries.iter().map(|e| (e.adjoint - e.difference).powi(2)).sum::<f64>().sqrt();
        let den: f64 = entries.iter().map(|e| e.difference.powi(2)).sum::<f64>().sqrt();
        let relative_error = if den > 0.0 { num / den } else { num };
        Ok(FiniteDifferenceCheck {
            entries,
            relative_error,
        })
    }

    /// Steepest descent in H¹ with Armijo backtracking.
    pub fn optimize(&self, u0: &ControlSignal, rule: &DescentRule) -> Result<(ControlSignal, Vec<HistoryEntry>)> {
        rule.validate()?;
        let mut u = u0.clone();
        let mut grad = self.gradient(&u)?;
        let mut history = vec![HistoryEntry {
            iteration: 0,
            objective: grad.objective.total,
            gradient_norm: grad.norm,
            step: 0.0,
        }];
        let mut tau = rule.initial_step;
        for it in 1..=rule.iterations {
            if grad.norm <= rule.gradient_tolerance {
                break;
            }
            let slope = grad.norm * grad.norm;
            let j0 = grad.objective.total;
            let mut accepted = None;
            for _ in 0..=rule.max_halvings {
                let mut trial = u.clone();
                for (a, g) in trial.samples_mut().iter_mut().zip(grad.h1.samples()) {
                    *a -= tau * g;
                }
                // A trial control that breaks the forward solve is just too long a step.
                if let Ok(j) = self.evaluate(&trial) {
                    if j.total <= j0 - rule.armijo * tau * slope && j.total < j0 {
                        accepted = Some(trial);
                        break;
                    }
                }
                tau *= 0.5;
            }
            let next = accepted.ok_or(Error::LineSearch(rule.max_halvings))?;
            u = next;
            grad = self.gradient(&u)?;
            history.push(HistoryEntry {
                iteration: it,
                objective: grad.objective.total,
                gradient_norm: grad.norm,
                step: tau,
            });
            tau = (tau * rule.growth).min(rule.max_step);
        }
        Ok((u, history))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceEntry {
    pub index: usize,
    pub adjoint: f64,
    pub difference: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceCheck {
    pub entries: Vec<FiniteDifferenceEntry>,
    /// `‖g_adj − g_fd‖ / ‖g_fd‖` over the probed indices.
    pub relative_error: f64,
}

impl FiniteDifferenceCheck {
    pub fn report(&self, name: &str, tolerance: f64) -> EstimateReport {
        let mut r = EstimateReport::bounded(
            name,
            "adjoint gradient matches central differences at the plateau step",
            self.relative_error,
            tolerance,
            0.0,
        )
        .constant("‖g_adj − g_fd‖ / ‖g_fd‖ over the probed sample indices")
        .samples(self.entries.len());
        for e in &self.entries {
            r = r.ingredient(&format!("index_{:05}_step", e.index), e.step);
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentRule {
    pub iterations: usize,
    pub initial_step: f64,
    pub max_step: f64,
    /// Factor applied to the accepted step before the next line search.
    pub growth: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    pub gradient_tolerance: f64,
}

impl Default for DescentRule {
    fn default() -> Self {
        Self {
            iterations: 20,
            initial_step: 1.0,
            max_step: 1e3,
            growth: 2.0,
            armijo: 1e-4,
            max_halvings: 30,
            gradient_tolerance: 1e-10,
        }
    }
}

impl DescentRule {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Control("at least one iteration is required".into()));
        }
        if !(self.initial_step > 0.0 && self.max_step >= self.initial_step) {
            return Err(Error::Control("steps must satisfy 0 < initial_step <= max_step".into()));
        }
        if !(self.growth >= 1.0) || !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Control("need growth >= 1 and 0 < armijo < 1".into()));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::Control("gradient tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, DomainSpec};
    use crate::potentials::{CoulombKernel, FieldPreset, PotentialConfig, PotentialSpec};
    use crate::random::random_smooth_state;
    use proptest::prelude::*;
    use rand::Rng;

    fn context(spec: PotentialSpec, modes: usize, particles: usize, steps: usize) -> SystemContext {
        let domain = DomainSpec::unit(1, 32, particles, 1.0, steps).unwrap();
        let basis = Arc::new(build_basis(&domain, &[modes]).unwrap());
        let kernel = Some(Arc::new(CoulombKernel::new(&basis, 0.1).unwrap()));
        let pot = Arc::new(PotentialConfig::new(spec, &basis).unwrap());
        SystemContext::new(basis, pot, kernel, ControlSignal::zeros(1.0, steps)).unwrap()
    }

    fn nonlinear() -> PotentialSpec {
        PotentialSpec {
            v0: FieldPreset::Harmonic { omega: 4.0, center: None },
            ..PotentialSpec::default()
        }
    }

    fn tracking_problem(steps: usize, seed: u64) -> ControlProblem {
        let ctx = context(nonlinear(), 8, 2, steps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi0 = random_smooth_state(&mut rng, &ctx.basis, 1.0);
        let objective = ObjectiveSpec {
            tracking: Some(Target::State(random_smooth_state(&mut rng, &ctx.basis, 1.0))),
            terminal: Some(random_smooth_state(&mut rng, &ctx.basis, 1.0)),
            nu: 1e-2,
        };
        ControlProblem::new(ctx, IntegratorSettings::default(), psi0, objective).unwrap()
    }

    #[test]
    fn regularization_examples() {
        let ctx = context(nonlinear(), 8, 1, 1000);
        let psi0 = CoefficientState::unit(8, 1, 0, 0);
        let p = ControlProblem::new(ctx, IntegratorSettings::default(), psi0, ObjectiveSpec::regularization_only(1.0)).unwrap();
        let zero = ControlSignal::zeros(1.0, 1000);
        assert_eq!(p.evaluate(&zero).unwrap().total, 0.0);
        let ramp = ControlSignal::from_fn(1.0, 1000, |t| t);
        assert!((p.evaluate(&ramp).unwrap().total - 4.0 / 3.0).abs() < 1e-6);
        let g = p.gradient(&zero).unwrap();
        assert_eq!(g.norm, 0.0);
    }

    #[test]
    fn self_target_leaves_regularization() {
        let mut p = tracking_problem(50, 2);
        let u = ControlSignal::from_fn(1.0, 50, |t| (3.0 * t).sin());
        let traj = p.solve(&u).unwrap();
        p.objective.tracking = Some(Target::Trajectory(traj.states.clone()));
        p.objective.terminal = Some(traj.terminal().clone());
        let j = p.evaluate(&u).unwrap();
        assert_eq!(j.tracking + j.terminal, 0.0);
        assert_eq!(j.total, p.objective.nu * u.h1_norm_sqr());
        let (terminal, _) = p.adjoint_sources(&traj);
        assert_eq!(terminal.max_abs(), 0.0);
    }

    #[test]
    fn h1_riesz_of_regularization_is_two_nu_u() {
        let u = ControlSignal::from_fn(1.0, 64, |t| (5.0 * t).cos() + t);
        let g = regularization_gradient(&u);
        let x = h1_riesz(&u, &g);
        for (a, b) in x.iter().zip(u.samples()) {
            assert!((a - 2.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn regularization_gradient_matches_differences() {
        let u = ControlSignal::from_fn(1.0, 20, |t| t * t - 0.3);
        let g = regularization_gradient(&u);
        for s in [0, 7, 20] {
            let eps = 1e-6;
            let mut a = u.clone();
            a.samples_mut()[s] += eps;
            let mut b = u.clone();
            b.samples_mut()[s] -= eps;
            let fd = (a.h1_norm_sqr() - b.h1_norm_sqr()) / (2.0 * eps);
            assert!((fd - g[s]).abs() < 1e-6 * g[s].abs().max(1.0));
        }
    }

    #[test]
    fn terminal_derivative_matches_real_pairing() {
        let p = tracking_problem(20, 4);
        let u = ControlSignal::zeros(1.0, 20);
        let traj = p.solve(&u).unwrap();
        let (terminal, _) = p.adjoint_sources(&traj);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = random_smooth_state(&mut rng, &p.context.basis, 1.0);
        let target = p.objective.terminal.as_ref().unwrap();
        let j2 = |y: &CoefficientState| (y - target).norm_sqr();
        let eps = 1e-7;
        let mut y = traj.terminal().clone();
        y.axpy(C64::new(eps, 0.0), &delta);
        let fd = (j2(&y) - j2(traj.terminal())) / eps;
        // The terminal datum is i times the real gradient.
        let exact = (&terminal * C64::new(0.0, -1.0)).real_inner(&delta);
        assert!((fd - exact).abs() < 1e-5 * exact.abs().max(1.0), "{fd} {exact}");
    }

    #[test]
    fn adjoint_source_matches_grid_quadrature() {
        let p = tracking_problem(10, 5);
        let u = ControlSignal::zeros(1.0, 10);
        let traj = p.solve(&u).unwrap();
        let (_, source) = p.adjoint_sources(&traj);
        let Some(Target::State(target)) = &p.objective.tracking else { unreachable!() };
        let basis = &p.context.basis;
        for n in [0, 4, 10] {
            let f = source.at(traj.times[n]).unwrap().unwrap();
            let grid_f = basis.synthesize(&f).unwrap();
            let direct = basis.synthesize(&traj.states[n]).unwrap();
            let goal = basis.synthesize(target).unwrap();
            let expected = (direct.values() - goal.values()) * 2.0;
            let diff = (grid_f.values() - &expected).iter().fold(0.0f64, |m, z| m.max(z.norm()));
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = tracking_problem(100, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phase: f64 = rng.gen_range(0.0..6.0);
        let u = ControlSignal::from_fn(1.0, 100, |t| 0.5 * (4.0 * t + phase).sin());
        let check = p.finite_difference_check(&u, 5, &[1e-3, 1e-4, 1e-5, 1e-6], 11).unwrap();
        assert!(check.relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_gradient_start_does_not_move() {
        let ctx = context(nonlinear(), 8, 1, 50);
        let psi0 = CoefficientState::unit(8, 1, 0, 0);
        let p = ControlProblem::new(ctx, IntegratorSettings::default(), psi0, ObjectiveSpec::regularization_only(1.0)).unwrap();
        let zero = ControlSignal::zeros(1.0, 50);
        let (u, history) = p.optimize(&zero, &DescentRule::default()).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(u, zero);
    }

    #[test]
    fn pure_regularization_goes_to_zero() {
        let ctx = context(nonlinear(), 8, 1, 50);
        let psi0 = CoefficientState::unit(8, 1, 0, 0);
        let p = ControlProblem::new(ctx, IntegratorSettings::default(), psi0, ObjectiveSpec::regularization_only(0.3)).unwrap();
        let u0 = ControlSignal::from_fn(1.0, 50, |t| 1.0 + t);
        let rule = DescentRule {
            initial_step: 0.1,
            growth: 1.0,
            iterations: 10,
            ..DescentRule::default()
        };
        let (u, history) = p.optimize(&u0, &rule).unwrap();
        // Each step multiplies u by 1 − 2ντ = 0.94.
        for w in history.windows(2) {
            assert!(w[1].objective < w[0].objective);
            assert!((w[1].objective / w[0].objective - 0.94f64.powi(2)).abs() < 1e-10);
        }
        assert!((u.samples()[7] - (1.0 + 7.0 / 50.0) * 0.94f64.powi(10)).abs() < 1e-10);
    }

    #[test]
    fn tracking_descent_decreases() {
        let p = tracking_problem(100, 13);
        let u0 = ControlSignal::zeros(1.0, 100);
        let rule = DescentRule {
            iterations: 5,
            ..DescentRule::default()
        };
        let (_, history) = p.optimize(&u0, &rule).unwrap();
        for w in history.windows(2) {
            assert!(w[1].objective < w[0].objective);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ctx = context(nonlinear(), 8, 1, 10);
        let psi0 = CoefficientState::unit(8, 1, 0, 0);
        assert!(ControlProblem::new(ctx.clone(), IntegratorSettings::default(), psi0.clone(), ObjectiveSpec::regularization_only(0.0)).is_err());
        let bad = ObjectiveSpec {
            terminal: Some(CoefficientState::unit(4, 1, 0, 0)),
            ..ObjectiveSpec::regularization_only(1.0)
        };
        assert!(ControlProblem::new(ctx.clone(), IntegratorSettings::default(), psi0.clone(), bad).is_err());
        let p = ControlProblem::new(ctx, IntegratorSettings::default(), psi0, ObjectiveSpec::regularization_only(1.0)).unwrap();
        assert!(p.evaluate(&ControlSignal::zeros(1.0, 11)).is_err());
        let rule = DescentRule {
            iterations: 0,
            ..DescentRule::default()
        };
        assert!(p.optimize(&ControlSignal::zeros(1.0, 10), &rule).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn riesz_solve_is_exact(vals in proptest::collection::vec(-3.0f64..3.0, 3..40)) {
            let u = ControlSignal::new(2.0, vec![0.0; vals.len()]).unwrap();
            let x = h1_riesz(&u, &vals);
            let dt = u.dt();
            let n = vals.len();
            for s in 0..n {
                let mut r = dt * u.trapezoid_weight(s) * x[s];
                if s > 0 { r += (x[s] - x[s - 1]) / dt; }
                if s + 1 < n { r -= (x[s + 1] - x[s]) / dt; }
                prop_assert!((r - vals[s]).abs() < 1e-9);
            }
        }
    }
}
