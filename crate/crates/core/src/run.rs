//! Subcommand orchestration and artifact emission.
//!
//! Every subcommand builds its artifacts in memory; `write_artifacts` then
//! moves them into the output directory from a sibling temporary directory,
//! so a failed run leaves nothing behind.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::basis::{build_basis, CoefficientState, DomainSpec, SpectralBasis};
use crate::config::{transfer, RunConfig, Setup};
use crate::control::{ControlProblem, HistoryEntry};
use crate::error::{Error, Result};
use crate::estimates::{self, EstimateReport};
use crate::galerkin::{Mode, SystemContext};
use crate::potentials::{self, PotentialConfig, PotentialSpec};
use crate::propagator::{solve_adjoint_with, solve_forward_with, ControlSignal, Trajectory};
use crate::random::random_smooth_state;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Adjoint,
    Verify,
    Converge,
    Optimize,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Adjoint => "adjoint",
            Command::Verify => "verify",
            Command::Converge => "converge",
            Command::Optimize => "optimize",
        }
    }
}

/// Files of one run, keyed by name, plus the reports that decide the exit code.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: BTreeMap<String, Vec<u8>>,
    pub reports: Vec<EstimateReport>,
}

impl Artifacts {
    pub fn failures(&self) -> Vec<&EstimateReport> {
        self.reports.iter().filter(|r| r.is_failure()).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }
}

pub fn execute(command: Command, config: &RunConfig) -> Result<Artifacts> {
    let resolved = config.resolved()?;
    let setup = resolved.build()?;
    let (mut artifacts, extra) = match (command, resolved.mode) {
        (Command::Simulate, Mode::Forward) => simulate(&resolved, &setup)?,
        (Command::Simulate, Mode::Adjoint) | (Command::Adjoint, _) => adjoint(&resolved, &setup)?,
        (Command::Verify, _) => verify(&resolved, &setup)?,
        (Command::Converge, _) => converge(&resolved)?,
        (Command::Optimize, _) => optimize(&resolved, &setup)?,
    };
    let failures: Vec<&str> = artifacts.failures().iter().map(|r| r.name.as_str()).collect();
    // The destination does not affect any result; leaving it out keeps reports
    // from identical runs byte-identical wherever they are written.
    let mut echoed = serde_json::to_value(&resolved)?;
    if let Some(out) = echoed.get_mut("output").and_then(|o| o.as_object_mut()) {
        out.remove("directory");
    }
    let report = json!({
        "command": command.name(),
        "seed": resolved.seed,
        "passed": failures.is_empty(),
        "failures": failures,
        "summary": extra,
        "reports": artifacts.reports,
        "config": echoed,
    });
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    artifacts.add("report.json", bytes);
    Ok(artifacts)
}

/// Move the artifacts into `dir`, creating it if needed. Files are first
/// written to a temporary sibling directory.
pub fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => Path::new(".").to_path_buf(),
    };
    std::fs::create_dir_all(&parent)?;
    let staging = tempfile::Builder::new().prefix(".tdks-staging-").tempdir_in(&parent)?;
    for (name, bytes) in &artifacts.files {
        std::fs::write(staging.path().join(name), bytes)?;
    }
    if !dir.exists() {
        let path = staging.keep();
        if let Err(e) = std::fs::rename(&path, dir) {
            let _ = std::fs::remove_dir_all(&path);
            return Err(e.into());
        }
        return Ok(());
    }
    for name in artifacts.files.keys() {
        std::fs::rename(staging.path().join(name), dir.join(name))?;
    }
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn diagnostics_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let header: Vec<String> = ["t", "l2", "h1", "re_b", "im_b"].iter().map(|s| s.to_string()).collect();
    csv_bytes(
        &header,
        traj.diagnostics.iter().map(|d| vec![d.t, d.l2, d.h1, d.re_b, d.im_b]),
    )
}

/// Columns `t`, then `re`/`im` of every coefficient, mode-major in basis order.
fn trajectory_csv(traj: &Trajectory, stride: usize) -> Result<Vec<u8>> {
    let first = traj.initial();
    let mut header = vec!["t".to_string()];
    for k in 0..first.modes() {
        for j in 0..first.particles() {
            header.push(format!("re_k{k}_p{j}"));
            header.push(format!("im_k{k}_p{j}"));
        }
    }
    let last = traj.steps();
    let rows = (0..=last)
        .filter(|n| n % stride == 0 || *n == last)
        .map(|n| {
            let mut row = vec![traj.times[n]];
            for z in traj.states[n].as_array().iter() {
                row.push(z.re);
                row.push(z.im);
            }
            row
        });
    csv_bytes(&header, rows)
}

/// Node coordinates and the density at each requested time.
fn density_csv(basis: &SpectralBasis, traj: &Trajectory, times: &[f64]) -> Result<Vec<u8>> {
    let n = basis.dimension();
    let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let mut columns = Vec::new();
    for &t in times {
        header.push(format!("rho_t{t}"));
        let state = traj.state_at(basis, t)?;
        columns.push(potentials::density(basis, &state)?);
    }
    let coords = basis.coords();
    csv_bytes(
        &header,
        (0..basis.node_count()).map(|q| {
            let mut row: Vec<f64> = coords.row(q).to_vec();
            row.extend(columns.iter().map(|c| c.values()[q]));
            row
        }),
    )
}

fn drift_report(traj: &Trajectory) -> EstimateReport {
    EstimateReport::bounded(
        "norm_drift",
        "max_t |‖Ψ(t)‖ − ‖Ψ(0)‖| / ‖Ψ(0)‖ ≤ 1e-6 for the forward system without inhomogeneity",
        traj.max_relative_drift(),
        1e-6,
        0.0,
    )
    .constant("conservation of the L² norm")
    .samples(traj.steps() + 1)
}

fn simulate(config: &RunConfig, setup: &Setup) -> Result<(Artifacts, serde_json::Value)> {
    let traj = solve_forward_with(&setup.context, &setup.settings, &setup.initial)?;
    let mut a = Artifacts::default();
    a.add("diagnostics.csv", diagnostics_csv(&traj)?);
    a.add("trajectory.csv", trajectory_csv(&traj, config.output.trajectory_stride)?);
    a.add("density.csv", density_csv(&setup.basis, &traj, &config.output.density_times)?);
    a.reports.push(drift_report(&traj));
    a.reports.extend(estimates::check_energy_estimates(&traj, &setup.context, config.verify.tolerance)?);
    let summary = json!({
        "max_relative_drift": traj.max_relative_drift(),
        "max_l2": traj.max_l2(),
        "max_h1": traj.max_h1(),
        "max_fixed_point_iterations": traj.max_iterations,
    });
    Ok((a, summary))
}

/// Adjoint context and terminal datum for the forward trajectory `traj`.
fn adjoint_problem(setup: &Setup, traj: Arc<Trajectory>) -> Result<(SystemContext, CoefficientState)> {
    let (terminal, source) = match (&setup.adjoint_terminal, &setup.adjoint_source) {
        (Some(t), Some(s)) => (t.clone(), s.clone()),
        _ => {
            let problem = ControlProblem::new(
                setup.context.clone(),
                setup.settings.clone(),
                setup.initial.clone(),
                setup.objective.clone(),
            )?;
            problem.adjoint_sources(&traj)
        }
    };
    Ok((setup.context.clone().adjoint(traj).with_source(source), terminal))
}

fn adjoint(config: &RunConfig, setup: &Setup) -> Result<(Artifacts, serde_json::Value)> {
    let forward = Arc::new(solve_forward_with(&setup.context, &setup.settings, &setup.initial)?);
    let (ctx, terminal) = adjoint_problem(setup, forward.clone())?;
    let back = solve_adjoint_with(&ctx, &setup.settings, &terminal)?;
    let mut a = Artifacts::default();
    a.add("forward_diagnostics.csv", diagnostics_csv(&forward)?);
    a.add("diagnostics.csv", diagnostics_csv(&back)?);
    a.add("trajectory.csv", trajectory_csv(&back, config.output.trajectory_stride)?);
    a.reports.extend(estimates::check_energy_estimates(&back, &ctx, config.verify.tolerance)?);
    let summary = json!({
        "terminal_norm": terminal.norm(),
        "initial_norm": back.initial().norm(),
        "max_l2": back.max_l2(),
        "max_h1": back.max_h1(),
        "max_fixed_point_iterations": back.max_iterations,
    });
    Ok((a, summary))
}

fn convergence_reports(config: &RunConfig, setup: &Setup) -> Result<Vec<EstimateReport>> {
    let list = config
        .verify
        .convergence_modes
        .clone()
        .ok_or_else(|| Error::Check("convergence modes unresolved".into()))?;
    let build = |modes: &[usize]| -> Result<(SystemContext, CoefficientState)> {
        let member = config.build_model(modes)?;
        let psi0 = transfer(&setup.basis, &member.basis, &setup.initial);
        Ok((member, psi0))
    };
    estimates::check_galerkin_convergence(build, &list, &setup.settings, "configured")
}

fn converge(config: &RunConfig) -> Result<(Artifacts, serde_json::Value)> {
    let setup = config.build()?;
    let reports = convergence_reports(config, &setup)?;
    let list = config.verify.convergence_modes.clone().unwrap_or_default();
    let increments: Vec<f64> = (0..list.len() - 1)
        .map(|i| reports[0].ingredients[&format!("increment_{i}")])
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["coarse_modes", "fine_modes", "increment_y"])?;
    for (i, inc) in increments.iter().enumerate() {
        let fmt = |m: &Vec<usize>| m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
        w.write_record([fmt(&list[i]), fmt(&list[i + 1]), inc.to_string()])?;
    }
    let mut a = Artifacts::default();
    a.add("converge.csv", w.into_inner().map_err(|e| Error::Io(e.into_error()))?);
    a.reports = reports;
    Ok((a, json!({ "increments": increments })))
}

fn optimize(config: &RunConfig, setup: &Setup) -> Result<(Artifacts, serde_json::Value)> {
    let problem = ControlProblem::new(
        setup.context.clone(),
        setup.settings.clone(),
        setup.initial.clone(),
        setup.objective.clone(),
    )?;
    let (u, history) = problem.optimize(&setup.control, &config.optimize)?;
    let mut a = Artifacts::default();
    let header: Vec<String> = ["iteration", "objective", "gradient_norm", "step"].iter().map(|s| s.to_string()).collect();
    a.add(
        "history.csv",
        csv_bytes(
            &header,
            history.iter().map(|h| vec![h.iteration as f64, h.objective, h.gradient_norm, h.step]),
        )?,
    );
    a.add(
        "control.csv",
        csv_bytes(
            &["t".to_string(), "u".to_string()],
            u.times().into_iter().zip(u.samples()).map(|(t, v)| vec![t, *v]),
        )?,
    );
    a.reports.push(descent_report(&history));
    let first = history[0].objective;
    let last = history.last().expect("non-empty").objective;
    Ok((
        a,
        json!({
            "iterations": history.len() - 1,
            "initial_objective": first,
            "final_objective": last,
            "relative_decrease": if first > 0.0 { 1.0 - last / first } else { 0.0 },
        }),
    ))
}

fn descent_report(history: &[HistoryEntry]) -> EstimateReport {
    let increases = history.windows(2).filter(|w| !(w[1].objective < w[0].objective)).count();
    let first = history[0].objective;
    let last = history.last().expect("non-empty").objective;
    EstimateReport::bounded(
        "descent_monotone",
        "every accepted step strictly decreases J",
        if first > 0.0 { last / first } else { 0.0 },
        1.0,
        0.0,
    )
    .constant("ratio of final to initial objective")
    .samples(history.len())
    .violations(increases)
}

/// Single free mode against `e^{−iλ_k T}`.
fn free_phase_report(domain: &DomainSpec, modes: &[usize]) -> Result<EstimateReport> {
    let basis = Arc::new(build_basis(domain, modes)?);
    let spec = PotentialSpec::linear(crate::potentials::FieldPreset::Zero, crate::potentials::FieldPreset::Zero);
    let pot = Arc::new(PotentialConfig::new(spec, &basis)?);
    let control = ControlSignal::zeros(domain.horizon, domain.steps);
    let ctx = SystemContext::new(basis.clone(), pot, None, control)?;
    let k = basis.mode_count() - 1;
    let psi0 = CoefficientState::unit(basis.mode_count(), basis.particles(), k, 0);
    let traj = solve_forward_with(&ctx, &Default::default(), &psi0)?;
    let exact = C64::from_polar(1.0, -basis.eigenvalues()[k] * domain.horizon);
    let err = (traj.terminal().as_array()[[k, 0]] - exact).norm();
    Ok(EstimateReport::bounded(
        "free_mode_phase",
        "a single free mode evolves as e^{−iλ_k t}",
        err,
        1e-8,
        0.0,
    )
    .constant("|d_k(T) − e^{−iλ_k T}|")
    .ingredient("lambda_k", basis.eigenvalues()[k]))
}

enum Job<'a> {
    Dynamics,
    Gronwall,
    Convergence,
    Lipschitz,
    Coulomb(&'a crate::config::CoulombCase),
    Gradient,
    FreePhase,
}

fn verify(config: &RunConfig, setup: &Setup) -> Result<(Artifacts, serde_json::Value)> {
    let v = &config.verify;
    let mut jobs = vec![
        Job::Dynamics,
        Job::Gronwall,
        Job::Convergence,
        Job::Lipschitz,
        Job::Gradient,
        Job::FreePhase,
    ];
    jobs.extend(v.coulomb.iter().map(Job::Coulomb));
    let seed = config.seed;
    let results: Vec<Vec<EstimateReport>> = jobs
        .par_iter()
        .map(|job| -> Result<Vec<EstimateReport>> {
            match job {
                Job::Dynamics => {
                    let forward = Arc::new(solve_forward_with(&setup.context, &setup.settings, &setup.initial)?);
                    let mut out = vec![drift_report(&forward)];
                    out.extend(estimates::check_energy_estimates(&forward, &setup.context, v.tolerance)?);
                    out.extend(estimates::check_form_bounds(&setup.context, v.form_samples, seed)?);
                    let (ctx, terminal) = adjoint_problem(setup, forward)?;
                    let back = solve_adjoint_with(&ctx, &setup.settings, &terminal)?;
                    out.extend(estimates::check_energy_estimates(&back, &ctx, v.tolerance)?);
                    out.extend(estimates::check_form_bounds(&ctx, v.form_samples, seed.wrapping_add(1))?);
                    Ok(out)
                }
                Job::Gronwall => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
                    let direction = random_smooth_state(&mut rng, &setup.basis, 1.0);
                    estimates::check_uniqueness_gronwall(
                        &setup.context,
                        &setup.settings,
                        &setup.initial,
                        &direction,
                        &v.gronwall_eps,
                    )
                }
                Job::Convergence => convergence_reports(config, setup),
                Job::Lipschitz => {
                    let mut out = Vec::new();
                    if setup.context.kernel().is_some() {
                        out.push(estimates::check_hartree_lipschitz(
                            &setup.context,
                            v.lipschitz_samples,
                            seed.wrapping_add(3),
                        )?);
                    }
                    if setup.context.potential.is_nonlinear() {
                        out.push(estimates::check_nonlinear_lipschitz(
                            &setup.context,
                            v.lipschitz_radius,
                            v.lipschitz_samples,
                            seed.wrapping_add(4),
                        )?);
                        out.push(estimates::check_potential_continuity(
                            &setup.context,
                            v.continuity_levels,
                            seed.wrapping_add(5),
                        )?);
                    }
                    Ok(out)
                }
                Job::Coulomb(case) => Ok(vec![estimates::check_coulomb_lp(
                    case.dimension,
                    case.p,
                    case.radius,
                    case.resolution,
                )?]),
                Job::Gradient => {
                    let problem = ControlProblem::new(
                        setup.context.clone(),
                        setup.settings.clone(),
                        setup.initial.clone(),
                        setup.objective.clone(),
                    )?;
                    let check = problem.finite_difference_check(
                        &setup.control,
                        v.gradient_probes,
                        &v.gradient_steps,
                        seed.wrapping_add(6),
                    )?;
                    Ok(vec![check.report("gradient_finite_difference", v.gradient_tolerance)])
                }
                Job::FreePhase => Ok(vec![free_phase_report(&config.domain, &config.modes)?]),
            }
        })
        .collect::<Result<_>>()?;
    let mut a = Artifacts::default();
    a.reports = results.into_iter().flatten().collect();
    let summary = summary_table(&a.reports);
    Ok((a, summary))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    name: &'a str,
    passed: bool,
    asserted: bool,
    measured: f64,
    bound: Option<f64>,
}

fn summary_table(reports: &[EstimateReport]) -> serde_json::Value {
    let rows: Vec<SummaryRow> = reports
        .iter()
        .map(|r| SummaryRow {
            name: &r.name,
            passed: r.passed,
            asserted: r.asserted,
            measured: r.measured,
            bound: r.bound,
        })
        .collect();
    json!({ "checks": rows })
}

/// One line per report for the terminal.
pub fn format_report(r: &EstimateReport) -> String {
    let status = match (r.asserted, r.passed) {
        (true, true) => "PASS",
        (true, false) => "FAIL",
        (false, true) => "info",
        (false, false) => "warn",
    };
    match r.bound {
        Some(b) => format!("{status} {:<44} {:.4e} <= {:.4e}", r.name, r.measured, b),
        None => format!("{status} {:<44} {:.4e}", r.name, r.measured),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.domain.grid_points = vec![32];
        c.domain.steps = 100;
        c.modes = vec![8];
        c.verify.form_samples = 20;
        c.verify.lipschitz_samples = 30;
        c.verify.gradient_probes = 2;
        c
    }

    #[test]
    fn simulate_writes_all_series() {
        let a = execute(Command::Simulate, &small()).unwrap();
        let names: Vec<&str> = a.files.keys().map(|s| s.as_str()).collect();
        assert_eq!(names, ["density.csv", "diagnostics.csv", "report.json", "trajectory.csv"]);
        let diag = String::from_utf8(a.files["diagnostics.csv"].clone()).unwrap();
        assert!(diag.starts_with("t,l2,h1,re_b,im_b\n"));
        assert_eq!(diag.lines().count(), 102);
        let traj = String::from_utf8(a.files["trajectory.csv"].clone()).unwrap();
        assert_eq!(traj.lines().next().unwrap().split(',').count(), 1 + 2 * 8 * 2);
        assert!(a.passed(), "{:?}", a.failures());
    }

    #[test]
    fn verify_is_deterministic() {
        let c = small();
        let a = execute(Command::Verify, &c).unwrap();
        let mut elsewhere = c.clone();
        elsewhere.output.directory = "somewhere/else".into();
        let b = execute(Command::Verify, &elsewhere).unwrap();
        assert_eq!(a.files["report.json"], b.files["report.json"]);
        // A 32-point grid caps the refinement ladder at 4, 8, 16 modes, which
        // is still pre-asymptotic; every other check must pass.
        let failed: Vec<&str> = a.failures().iter().map(|r| r.name.as_str()).collect();
        assert_eq!(failed, ["galerkin_final_increment_configured"], "{:#?}", a.failures());
    }

    #[test]
    fn artifacts_written_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut a = Artifacts::default();
        a.add("x.txt", b"1".to_vec());
        write_artifacts(&out, &a).unwrap();
        assert_eq!(std::fs::read(out.join("x.txt")).unwrap(), b"1");
        a.add("x.txt", b"2".to_vec());
        write_artifacts(&out, &a).unwrap();
        assert_eq!(std::fs::read(out.join("x.txt")).unwrap(), b"2");
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
