//! Run configuration: JSON schema, defaults, validation with key paths, and
//! construction of the solver objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, CoefficientState, DomainSpec, GridField, SpectralBasis};
use crate::control::{DescentRule, ObjectiveSpec, Target};
use crate::error::{Error, Result};
use crate::galerkin::{Mode, Source, SystemContext};
use crate::potentials::{CoulombKernel, FieldPreset, PotentialConfig, PotentialSpec};
use crate::propagator::{ControlSignal, IntegratorSettings};
use crate::random::{random_smooth_state, random_state};

/// Initial-state and target presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialPreset {
    /// Particle `j` in the basis function with flat index `j + offset`.
    Modes {
        #[serde(default)]
        offset: usize,
    },
    /// Particle `j` ∝ `(x₀ − c₀)^j exp(−|x − c|²/(2w²))`, projected and
    /// normalized; the center defaults to the box midpoint.
    Gaussian {
        width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// Seeded complex Gaussian coefficients with total L² norm `norm`,
    /// optionally damped by `1/(1 + λ_k)`.
    Random {
        #[serde(default = "one")]
        norm: f64,
        #[serde(default = "yes")]
        smooth: bool,
    },
    /// Explicit coefficients, `values[k][j] = [re, im]`.
    Coefficients { values: Vec<Vec<[f64; 2]>> },
    /// Coefficients read from a JSON file in the `coefficients` layout.
    File { path: PathBuf },
}

/// Control presets on the uniform time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase", deny_unknown_fields)]
pub enum ControlPreset {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude · sin(2π frequency t + phase)`.
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    Ramp {
        slope: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Uniform samples on `[0, T]`, linearly resampled onto the time grid.
    Samples {
        values: Vec<f64>,
    },
    /// CSV with a header and columns `t,u` (as written by `optimize`),
    /// uniform in `t`.
    File {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Target `Ψ_d` of the trajectory term; `null` disables it.
    pub tracking: Option<InitialPreset>,
    /// Target `Ψ_T` of the terminal term; `null` disables it.
    pub terminal: Option<InitialPreset>,
    pub nu: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tracking: Some(InitialPreset::Modes { offset: 1 }),
            terminal: Some(InitialPreset::Modes { offset: 1 }),
            nu: 1e-2,
        }
    }
}

/// Data of the standalone adjoint solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AdjointData {
    /// Terminal datum and inhomogeneity from the objective.
    Objective,
    /// Explicit terminal state and a time-independent source
    /// `amplitude · field` in every channel.
    Explicit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        terminal: Option<InitialPreset>,
        field: FieldPreset,
        amplitude: [f64; 2],
    },
}

impl Default for AdjointData {
    fn default() -> Self {
        AdjointData::Objective
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoulombCase {
    pub dimension: usize,
    pub p: f64,
    #[serde(default = "one")]
    pub radius: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Relative slack on the energy envelopes.
    pub tolerance: f64,
    pub form_samples: usize,
    pub lipschitz_samples: usize,
    /// Ball radius for the Galerkin nonlinearity probe.
    pub lipschitz_radius: f64,
    pub continuity_levels: usize,
    pub gronwall_eps: Vec<f64>,
    /// Nested mode counts; `null` resolves to `k/4, k/2, k` per axis with
    /// `k = min(2m, M/2)`.
    pub convergence_modes: Option<Vec<Vec<usize>>>,
    pub coulomb: Vec<CoulombCase>,
    pub gradient_probes: usize,
    pub gradient_steps: Vec<f64>,
    pub gradient_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.05,
            form_samples: 100,
            lipschitz_samples: 100,
            lipschitz_radius: 2.0,
            continuity_levels: 30,
            gronwall_eps: vec![1e-2, 1e-3, 1e-4],
            convergence_modes: None,
            coulomb: vec![
                CoulombCase {
                    dimension: 3,
                    p: 2.0,
                    radius: 1.0,
                    resolution: 7,
                },
                CoulombCase {
                    dimension: 3,
                    p: 3.0,
                    radius: 1.0,
                    resolution: 7,
                },
            ],
            gradient_probes: 5,
            gradient_steps: vec![1e-3, 1e-4, 1e-5, 1e-6],
            gradient_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write every `trajectory_stride`-th state to the trajectory CSV.
    pub trajectory_stride: usize,
    /// Times of the density snapshots; empty means `0` and `T`.
    pub density_times: Vec<f64>,
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trajectory_stride: 1,
            density_times: Vec::new(),
            directory: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub domain: DomainSpec,
    /// Sine modes per axis.
    pub modes: Vec<usize>,
    pub potential: PotentialSpec,
    pub integrator: IntegratorSettings,
    /// Which trajectory `simulate` writes.
    pub mode: Mode,
    pub initial: InitialPreset,
    pub control: ControlPreset,
    pub objective: ObjectiveConfig,
    pub adjoint: AdjointData,
    pub verify: VerifyConfig,
    pub optimize: DescentRule,
    pub output: OutputConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domain: DomainSpec {
                lengths: vec![1.0],
                grid_points: vec![64],
                particles: 2,
                horizon: 1.0,
                steps: 2000,
            },
            modes: vec![16],
            potential: PotentialSpec {
                v0: FieldPreset::Harmonic {
                    omega: 10.0,
                    center: None,
                },
                ..PotentialSpec::default()
            },
            integrator: IntegratorSettings::default(),
            mode: Mode::Forward,
            initial: InitialPreset::Modes { offset: 0 },
            control: ControlPreset::Sine {
                amplitude: 0.5,
                frequency: 1.0,
                phase: 0.0,
            },
            objective: ObjectiveConfig::default(),
            adjoint: AdjointData::Objective,
            verify: VerifyConfig::default(),
            optimize: DescentRule::default(),
            output: OutputConfig::default(),
            seed: 0,
        }
    }
}

fn at(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Config {
        path: path.into(),
        message: e.to_string(),
    }
}

/// Parse and validate; schema errors carry the offending key path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        at(if path.is_empty() { "." } else { &path }, e.into_inner())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| at(&path.display().to_string(), e))?;
    parse_config(&text)
}

pub fn emit_config(config: &RunConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

impl RunConfig {
    /// Every optional default filled in: softening, convergence modes and
    /// density times.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let n = self.domain.dimension();
        c.potential.softening = Some(self.potential.resolved_softening(n).map_err(|e| at("potential.softening", e))?);
        if c.verify.convergence_modes.is_none() {
            // The coarsest member must already be in the asymptotic regime,
            // so the ladder reaches one doubling past the configured basis
            // when the grid allows it.
            let top: Vec<usize> = self
                .modes
                .iter()
                .zip(&self.domain.grid_points)
                .map(|(m, points)| (2 * m).min(points / 2))
                .collect();
            c.verify.convergence_modes = Some(
                [4, 2, 1]
                    .iter()
                    .map(|d| top.iter().map(|m| (m / d).max(1)).collect())
                    .collect(),
            );
        }
        if c.output.density_times.is_empty() {
            c.output.density_times = vec![0.0, self.domain.horizon];
        }
        Ok(c)
    }

    /// Cheap structural and physical checks; `build` performs the rest.
    pub fn validate(&self) -> Result<()> {
        self.domain.validate().map_err(|e| at("domain", e))?;
        let n = self.domain.dimension();
        if self.modes.len() != n {
            return Err(at("modes", format!("{} entries for a {n}-dimensional box", self.modes.len())));
        }
        for (i, (&m, &points)) in self.modes.iter().zip(&self.domain.grid_points).enumerate() {
            if m == 0 || m > points / 2 {
                return Err(at(&format!("modes[{i}]"), format!("{m} modes need 1 ≤ m ≤ M/2 = {}", points / 2)));
            }
        }
        let p = &self.potential;
        if let Err(e) = p.validate() {
            let key = if !(p.exchange_c < 0.0) {
                "potential.exchange_c"
            } else if !(p.exchange_beta > 0.0 && p.exchange_beta < 1.0) {
                "potential.exchange_beta"
            } else if !(p.correlation_a > 0.0 && p.correlation_b > 0.0) {
                "potential.correlation_a"
            } else {
                "potential.softening"
            };
            return Err(at(key, e));
        }
        p.resolved_softening(n).map_err(|e| at("potential.softening", e))?;
        self.integrator.validate().map_err(|e| at("integrator", e))?;
        let mode_count: usize = self.modes.iter().product();
        let particles = self.domain.particles;
        for (key, preset) in [
            ("initial", Some(&self.initial)),
            ("objective.tracking", self.objective.tracking.as_ref()),
            ("objective.terminal", self.objective.terminal.as_ref()),
        ] {
            if let Some(preset) = preset {
                check_preset(preset, mode_count, particles, n).map_err(|e| at(key, e))?;
            }
        }
        if let AdjointData::Explicit { terminal: Some(t), amplitude, .. } = &self.adjoint {
            check_preset(t, mode_count, particles, n).map_err(|e| at("adjoint.terminal", e))?;
            if !amplitude.iter().all(|a| a.is_finite()) {
                return Err(at("adjoint.amplitude", "must be finite"));
            }
        }
        if !(self.objective.nu > 0.0 && self.objective.nu.is_finite()) {
            return Err(at("objective.nu", format!("weight nu = {} must be positive", self.objective.nu)));
        }
        self.check_control()?;
        self.optimize.validate().map_err(|e| at("optimize", e))?;
        let v = &self.verify;
        if !(v.tolerance >= 0.0) {
            return Err(at("verify.tolerance", "must be non-negative"));
        }
        if v.lipschitz_samples < 30 {
            return Err(at("verify.lipschitz_samples", "at least 30 pairs are needed"));
        }
        if !(v.lipschitz_radius > 0.0) {
            return Err(at("verify.lipschitz_radius", "must be positive"));
        }
        if v.continuity_levels == 0 || v.form_samples == 0 || v.gradient_probes == 0 {
            return Err(at("verify", "sample counts must be positive"));
        }
        if v.gradient_steps.len() < 2 || v.gradient_steps.iter().any(|e| !(*e > 0.0)) {
            return Err(at("verify.gradient_steps", "need at least two positive steps"));
        }
        if let Some(list) = &v.convergence_modes {
            if list.len() < 3 {
                return Err(at("verify.convergence_modes", "at least three mode counts are needed"));
            }
            for (i, modes) in list.iter().enumerate() {
                if modes.len() != n {
                    return Err(at(&format!("verify.convergence_modes[{i}]"), "wrong dimension"));
                }
                for (&m, &points) in modes.iter().zip(&self.domain.grid_points) {
                    if m == 0 || m > points / 2 {
                        return Err(at(&format!("verify.convergence_modes[{i}]"), format!("{m} modes exceed M/2")));
                    }
                }
            }
        }
        for (i, c) in v.coulomb.iter().enumerate() {
            if !(1..=3).contains(&c.dimension) || c.resolution < 5 || !(c.radius > 0.0) || !(c.p >= 0.0) {
                return Err(at(
                    &format!("verify.coulomb[{i}]"),
                    "need dimension 1..=3, resolution ≥ 5, radius > 0, p ≥ 0",
                ));
            }
        }
        if self.output.trajectory_stride == 0 {
            return Err(at("output.trajectory_stride", "must be at least 1"));
        }
        for (i, &t) in self.output.density_times.iter().enumerate() {
            if !(0.0..=self.domain.horizon).contains(&t) {
                return Err(at(&format!("output.density_times[{i}]"), format!("{t} outside [0, T]")));
            }
        }
        Ok(())
    }

    fn check_control(&self) -> Result<()> {
        let bad = |m: &str| Err(at("control", m));
        match &self.control {
            ControlPreset::Constant { value } if !value.is_finite() => bad("value must be finite"),
            ControlPreset::Sine {
                amplitude,
                frequency,
                phase,
            } if ![amplitude, frequency, phase].iter().all(|v| v.is_finite()) => bad("parameters must be finite"),
            ControlPreset::Ramp { slope, offset } if !(slope.is_finite() && offset.is_finite()) => {
                bad("parameters must be finite")
            }
            ControlPreset::Samples { values } if values.len() < 2 || values.iter().any(|v| !v.is_finite()) => {
                bad("need at least two finite samples")
            }
            _ => Ok(()),
        }
    }

    /// Construct the basis, model and data. Errors carry key paths.
    pub fn build(&self) -> Result<Setup> {
        self.validate()?;
        let basis = Arc::new(build_basis(&self.domain, &self.modes).map_err(|e| at("modes", e))?);
        self.build_on(basis)
    }

    /// The model alone (no initial state or targets) on a different mode
    /// count over the same grid.
    pub fn build_model(&self, modes: &[usize]) -> Result<SystemContext> {
        let basis = Arc::new(build_basis(&self.domain, modes).map_err(|e| at("verify.convergence_modes", e))?);
        self.model(basis)
    }

    fn model(&self, basis: Arc<SpectralBasis>) -> Result<SystemContext> {
        let n = self.domain.dimension();
        let potential = Arc::new(PotentialConfig::new(self.potential.clone(), &basis).map_err(|e| at("potential", e))?);
        let kernel = if self.potential.hartree {
            let a = self.potential.resolved_softening(n).map_err(|e| at("potential.softening", e))?;
            Some(Arc::new(CoulombKernel::new(&basis, a).map_err(|e| at("potential.softening", e))?))
        } else {
            None
        };
        let control = build_control(&self.control, self.domain.horizon, self.domain.steps).map_err(|e| at("control", e))?;
        SystemContext::new(basis, potential, kernel, control).map_err(|e| at("potential", e))
    }

    fn build_on(&self, basis: Arc<SpectralBasis>) -> Result<Setup> {
        let context = self.model(basis.clone())?;
        let control = context.control.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let initial = build_state(&self.initial, &basis, &mut rng).map_err(|e| at("initial", e))?;
        let target = |key: &str, p: &Option<InitialPreset>, rng: &mut ChaCha8Rng| -> Result<Option<CoefficientState>> {
            p.as_ref().map(|p| build_state(p, &basis, rng).map_err(|e| at(key, e))).transpose()
        };
        let tracking = target("objective.tracking", &self.objective.tracking, &mut rng)?;
        let terminal = target("objective.terminal", &self.objective.terminal, &mut rng)?;
        let objective = ObjectiveSpec {
            tracking: tracking.map(Target::State),
            terminal,
            nu: self.objective.nu,
        };
        let (adjoint_terminal, adjoint_source) = match &self.adjoint {
            AdjointData::Objective => (None, None),
            AdjointData::Explicit {
                terminal,
                field,
                amplitude,
            } => {
                let t = match terminal {
                    Some(p) => build_state(p, &basis, &mut rng).map_err(|e| at("adjoint.terminal", e))?,
                    None => basis.zero_state(),
                };
                let f = field.sample(&basis).map_err(|e| at("adjoint.field", e))?;
                let amp = C64::new(amplitude[0], amplitude[1]);
                let values = ndarray::Array2::from_shape_fn((basis.node_count(), basis.particles()), |(q, _)| amp * f[q]);
                let source = Source::from_grid(&basis, &GridField::complex(values))?;
                (Some(t), Some(source))
            }
        };
        Ok(Setup {
            basis,
            context,
            settings: self.integrator.clone(),
            initial,
            control,
            objective,
            adjoint_terminal,
            adjoint_source,
        })
    }
}

/// Everything a run needs, built from a validated config.
#[derive(Clone, Debug)]
pub struct Setup {
    pub basis: Arc<SpectralBasis>,
    /// Forward context carrying the configured control.
    pub context: SystemContext,
    pub settings: IntegratorSettings,
    pub initial: CoefficientState,
    pub control: ControlSignal,
    pub objective: ObjectiveSpec,
    /// Explicit adjoint data; `None` means "from the objective".
    pub adjoint_terminal: Option<CoefficientState>,
    pub adjoint_source: Option<Source>,
}

fn check_preset(p: &InitialPreset, modes: usize, particles: usize, dim: usize) -> Result<()> {
    match p {
        InitialPreset::Modes { offset } if particles + offset > modes => Err(Error::Domain(format!(
            "{particles} particles from mode offset {offset} need at least {} modes, have {modes}",
            particles + offset
        ))),
        InitialPreset::Gaussian { width, center } => {
            if !(*width > 0.0) {
                return Err(Error::Domain(format!("width {width} must be positive")));
            }
            match center {
                Some(c) if c.len() != dim => Err(Error::Domain(format!("center has {} entries, need {dim}", c.len()))),
                _ => Ok(()),
            }
        }
        InitialPreset::Random { norm, .. } if !(*norm >= 0.0 && norm.is_finite()) => {
            Err(Error::Domain(format!("norm {norm} must be non-negative")))
        }
        InitialPreset::Coefficients { values } => coefficients(values, modes, particles).map(|_| ()),
        _ => Ok(()),
    }
}

fn coefficients(values: &[Vec<[f64; 2]>], modes: usize, particles: usize) -> Result<CoefficientState> {
    if values.len() != modes || values.iter().any(|row| row.len() != particles) {
        return Err(Error::Shape(format!("coefficients must be {modes} rows of {particles} [re, im] pairs")));
    }
    let data = ndarray::Array2::from_shape_fn((modes, particles), |(k, j)| C64::new(values[k][j][0], values[k][j][1]));
    let d = CoefficientState::new(data);
    if !d.is_finite() {
        return Err(Error::Shape("coefficients must be finite".into()));
    }
    Ok(d)
}

/// Coefficients as `[[re, im], …]` rows, the layout of the `coefficients` preset.
pub fn coefficient_rows(d: &CoefficientState) -> Vec<Vec<[f64; 2]>> {
    d.as_array()
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|z| [z.re, z.im]).collect())
        .collect()
}

pub fn build_state(p: &InitialPreset, basis: &SpectralBasis, rng: &mut ChaCha8Rng) -> Result<CoefficientState> {
    let (m, n) = (basis.mode_count(), basis.particles());
    check_preset(p, m, n, basis.dimension())?;
    match p {
        InitialPreset::Modes { offset } => {
            let mut d = basis.zero_state();
            for j in 0..n {
                d.as_array_mut()[[j + offset, j]] = C64::new(1.0, 0.0);
            }
            Ok(d)
        }
        InitialPreset::Gaussian { width, center } => {
            let c: Vec<f64> = match center {
                Some(c) => c.clone(),
                None => basis.lengths().iter().map(|l| l / 2.0).collect(),
            };
            let env = basis.sample(|x| {
                let r2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                (-r2 / (2.0 * width * width)).exp()
            });
            let mut values = ndarray::Array2::<C64>::zeros((basis.node_count(), n));
            for (q, x) in basis.coords().rows().into_iter().enumerate() {
                for j in 0..n {
                    values[[q, j]] = C64::new(env[q] * (x[0] - c[0]).powi(j as i32), 0.0);
                }
            }
            let mut d = basis.project(&GridField::complex(values))?;
            for mut col in d.as_array_mut().columns_mut() {
                let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Domain("gaussian orbital vanishes in the basis".into()));
                }
                col.mapv_inplace(|z| z / norm);
            }
            Ok(d)
        }
        InitialPreset::Random { norm, smooth } => Ok(if *smooth {
            random_smooth_state(rng, basis, *norm)
        } else {
            random_state(rng, m, n, *norm)
        }),
        InitialPreset::Coefficients { values } => coefficients(values, m, n),
        InitialPreset::File { path } => {
            let text = std::fs::read_to_string(path)?;
            let values: Vec<Vec<[f64; 2]>> = serde_json::from_str(&text)?;
            coefficients(&values, m, n)
        }
    }
}

pub fn build_control(p: &ControlPreset, horizon: f64, steps: usize) -> Result<ControlSignal> {
    let u = match p {
        ControlPreset::Zero => ControlSignal::zeros(horizon, steps),
        ControlPreset::Constant { value } => ControlSignal::from_fn(horizon, steps, |_| *value),
        ControlPreset::Sine {
            amplitude,
            frequency,
            phase,
        } => ControlSignal::from_fn(horizon, steps, |t| {
            amplitude * (2.0 * std::f64::consts::PI * frequency * t + phase).sin()
        }),
        ControlPreset::Ramp { slope, offset } => ControlSignal::from_fn(horizon, steps, |t| offset + slope * t),
        ControlPreset::Samples { values } => ControlSignal::new(horizon, values.clone())?.resampled(steps),
        ControlPreset::File { path } => read_control(path, horizon)?.resampled(steps),
    };
    ControlSignal::new(horizon, u.samples().to_vec())
}

fn read_control(path: &Path, horizon: f64) -> Result<ControlSignal> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for record in reader.deserialize() {
        let (t, u): (f64, f64) = record?;
        times.push(t);
        values.push(u);
    }
    if values.len() < 2 {
        return Err(Error::Control(format!("{} holds fewer than two samples", path.display())));
    }
    let dt = horizon / (values.len() - 1) as f64;
    for (s, t) in times.iter().enumerate() {
        if (t - s as f64 * dt).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Control(format!(
                "{}: sample {s} at t = {t} is not on the uniform grid over [0, {horizon}]",
                path.display()
            )));
        }
    }
    ControlSignal::new(horizon, values)
}

/// Copy coefficients between bases by mode multi-index; modes missing from
/// `to` are dropped and new ones start at zero.
pub fn transfer(from: &SpectralBasis, to: &SpectralBasis, d: &CoefficientState) -> CoefficientState {
    let mut out = to.zero_state();
    for (k, idx) in to.mode_indices().iter().enumerate() {
        if let Some(src) = from.mode_position(idx) {
            out.as_array_mut().row_mut(k).assign(&d.as_array().row(src));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_echoes_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let r = c.resolved().unwrap();
        assert_eq!(r.potential.softening, Some(0.1));
        assert_eq!(r.verify.convergence_modes, Some(vec![vec![8], vec![16], vec![32]]));
        assert_eq!(r.output.density_times, vec![0.0, 1.0]);
        let text = emit_config(&r);
        for key in ["exchange_c", "softening", "tolerance", "gronwall_eps", "nu", "seed", "trajectory_stride"] {
            assert!(text.contains(key), "{key}");
        }
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.initial = InitialPreset::Random { norm: 2.0, smooth: false };
        c.control = ControlPreset::Samples {
            values: vec![0.0, 1.0, 0.5],
        };
        c.adjoint = AdjointData::Explicit {
            terminal: Some(InitialPreset::Gaussian {
                width: 0.1,
                center: Some(vec![0.3]),
            }),
            field: FieldPreset::Constant { value: 1.0 },
            amplitude: [0.5, -0.5],
        };
        c.objective.tracking = None;
        c.seed = 99;
        let back = parse_config(&emit_config(&c)).unwrap();
        assert_eq!(back, c);
        let resolved = c.resolved().unwrap();
        assert_eq!(parse_config(&emit_config(&resolved)).unwrap(), resolved);
    }

    #[test]
    fn positive_exchange_constant_rejected() {
        let e = parse_config(r#"{"potential": {"exchange_c": 1.0}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("negative constant") && msg.contains("potential.exchange_c"), "{msg}");
        let e = parse_config(r#"{"potential": {"exchange_beta": 1.5}}"#).unwrap_err();
        assert!(e.to_string().contains("potential.exchange_beta"));
        let e = parse_config(r#"{"objective": {"nu": 0.0}}"#).unwrap_err();
        assert!(e.to_string().contains("objective.nu"));
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let e = parse_config(r#"{"potential": {"hartre": true}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("potential") && msg.contains("hartre"), "{msg}");
        let e = parse_config(r#"{"bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = parse_config(r#"{"initial": {"preset": "modes", "offst": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("initial"), "{e}");
        assert!(parse_config("{").is_err());
    }

    #[test]
    fn structural_errors_name_keys() {
        let e = parse_config(r#"{"modes": [40]}"#).unwrap_err();
        assert!(e.to_string().contains("modes[0]"));
        let e = parse_config(r#"{"domain": {"lengths": [1.0], "grid_points": [6], "particles": 2, "horizon": 1.0, "steps": 10}, "modes": [2], "initial": {"preset": "modes", "offset": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("initial"), "{e}");
        let e = parse_config(r#"{"potential": {"softening": 0.0}}"#).unwrap_err();
        assert!(e.to_string().contains("potential.softening"), "{e}");
    }

    #[test]
    fn build_presets() {
        let mut c = RunConfig::default();
        c.domain.steps = 10;
        let s = c.build().unwrap();
        assert_eq!(s.initial, {
            let mut d = s.basis.zero_state();
            d.as_array_mut()[[0, 0]] = C64::new(1.0, 0.0);
            d.as_array_mut()[[1, 1]] = C64::new(1.0, 0.0);
            d
        });
        assert_eq!(s.control.steps(), 10);
        assert!((s.control.value(0.3) - 0.5 * (0.6 * std::f64::consts::PI).sin()).abs() < 1e-12);
        c.initial = InitialPreset::Gaussian { width: 0.1, center: None };
        let g = c.build().unwrap().initial;
        for col in g.as_array().columns() {
            assert!((col.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Odd and even orbitals about the midpoint.
        assert!(g.as_array()[[1, 0]].norm() < 1e-12 && g.as_array()[[0, 1]].norm() < 1e-12);
    }

    #[test]
    fn random_preset_is_seeded() {
        let mut c = RunConfig::default();
        c.domain.steps = 10;
        c.initial = InitialPreset::Random { norm: 1.0, smooth: true };
        let a = c.build().unwrap().initial;
        assert_eq!(a, c.build().unwrap().initial);
        c.seed = 1;
        assert_ne!(a, c.build().unwrap().initial);
    }

    #[test]
    fn control_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        std::fs::write(&path, "t,u\n0,0\n0.5,1\n1,0\n").unwrap();
        let u = build_control(&ControlPreset::File { path: path.clone() }, 1.0, 4).unwrap();
        assert_eq!(u.samples(), &[0.0, 0.5, 1.0, 0.5, 0.0]);
        std::fs::write(&path, "t,u\n0,0\n0.3,1\n1,0\n").unwrap();
        assert!(build_control(&ControlPreset::File { path }, 1.0, 4).is_err());
    }

    #[test]
    fn transfer_keeps_shared_modes() {
        let spec = DomainSpec::unit(1, 16, 1, 1.0, 1).unwrap();
        let big = build_basis(&spec, &[8]).unwrap();
        let small = build_basis(&spec, &[3]).unwrap();
        let d = CoefficientState::unit(8, 1, 2, 0);
        assert_eq!(transfer(&big, &small, &d), CoefficientState::unit(3, 1, 2, 0));
        assert_eq!(transfer(&big, &small, &CoefficientState::unit(8, 1, 5, 0)).max_abs(), 0.0);
    }
}
