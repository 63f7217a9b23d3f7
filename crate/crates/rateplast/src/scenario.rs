//! Experiment drivers: configuration, time profiles, the 1D bar and 2D
//! plate-with-hole runs, the mesh-refinement convergence study, and the
//! CSV/VTK exporters they share.
//!
//! Both canned experiments drive the solid with the same smooth [`bump`]
//! pulse: the bar through antisymmetric end displacements, the plate through
//! a vertical traction on its top and bottom edges. A run advances the
//! coupled mechanical step, the post-hoc displacement/temperature solves and
//! the energy audit in lockstep, and writes CSV series, VTK snapshots and a
//! JSON run log into the configured output directory.
//!
//! The 2D defaults reproduce the plate figures (yield stress 60 Pa; the
//! accompanying prose says 1 Pa, but every figure is generated with 60 Pa,
//! so that is what ships).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constitutive::{
    ncomp, Density, MaterialParams, RegularizationConfig, RegularizationVariant,
};
use crate::energy::{audit_step, EnergyReport, StabilityAccumulator, StabilityReport};
use crate::error::{Error, Result};
use crate::mechanics::{
    check_tau_h_condition, gate_field, gate_fraction, solve_step_with_rescue, Loads, MechState,
    NewtonOptions, SemiImplicitSolver, StepDiagnostics, TauHCheck, TimeGrid,
};
use crate::mesh::{
    build_interval_mesh, build_plate_with_hole, estimate_inverse_constants, EigenOptions, Mesh,
};
use crate::spaces::{deviatoric, strain, strain_on_cell, sym_inner, DirichletBc, NodalField, StressField};
use crate::thermal::{plastic_heating_source, step_displacement, ThermalSolver, ThermoState};

/// Smooth bump profile: `amplitude * exp(1 + 1/(4 t (t - 1)))` on (0, 1),
/// zero elsewhere. All one-sided limits at t = 0 and t = 1 vanish, so the
/// profile is C^infinity on the whole line. Peaks at `amplitude` at t = 1/2.
pub fn bump(t: f64, amplitude: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let z = 1.0 + 1.0 / (4.0 * t * (t - 1.0));
    if z < -745.0 {
        // exp underflows; avoid 0 * inf in downstream derivative factors
        return 0.0;
    }
    amplitude * z.exp()
}

/// Time derivative of [`bump`].
pub fn bump_dot(t: f64, amplitude: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let w = 4.0 * t * (t - 1.0);
    let z = 1.0 + 1.0 / w;
    if z < -745.0 {
        return 0.0;
    }
    // d/dt [1/w] = -(8t - 4)/w^2
    amplitude * z.exp() * (4.0 - 8.0 * t) / (w * w)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Bar1d,
    Plate2d,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Implicit,
    SemiImplicit,
}

/// Mesh parameters; `n_cells`/`length` drive the bar, the rest the plate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSettings {
    pub n_cells: usize,
    pub length: f64,
    pub refinement: u32,
    pub plate_width: f64,
    pub plate_height: f64,
    pub hole_a: f64,
    pub hole_b: f64,
}

impl Default for MeshSettings {
    fn default() -> Self {
        MeshSettings {
            n_cells: 256,
            length: 1.0,
            refinement: 4,
            plate_width: 1.0,
            plate_height: 1.0,
            hole_a: 0.3,
            hole_b: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialSettings {
    pub e_modulus: f64,
    pub nu: f64,
    pub kappa_star: f64,
    pub rho_star: f64,
    pub c_v: f64,
    pub kappa_th: f64,
}

impl Default for MaterialSettings {
    fn default() -> Self {
        MaterialSettings {
            e_modulus: 1e4,
            nu: 0.3,
            kappa_star: 80.0,
            rho_star: 1.0,
            c_v: 1.0,
            kappa_th: 1.0,
        }
    }
}

impl MaterialSettings {
    pub fn to_params(&self, dim: usize) -> MaterialParams {
        let mut p = MaterialParams::new(dim, self.e_modulus, self.nu, self.kappa_star);
        p.rho_star = Density::Constant(self.rho_star);
        p.c_v = self.c_v;
        p.kappa_th = self.kappa_th;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegSettings {
    pub variant: RegularizationVariant,
    pub epsilon: f64,
    pub eta: f64,
}

impl Default for RegSettings {
    fn default() -> Self {
        RegSettings { variant: RegularizationVariant::Sqrt, epsilon: 10.0, eta: 0.0 }
    }
}

impl RegSettings {
    pub fn to_config(&self) -> RegularizationConfig {
        RegularizationConfig { variant: self.variant, epsilon: self.epsilon, eta: self.eta }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSettings {
    pub tau: f64,
    pub t_end: f64,
}

impl Default for TimeSettings {
    fn default() -> Self {
        TimeSettings { tau: 5e-4, t_end: 1.0 }
    }
}

impl TimeSettings {
    pub fn to_grid(&self) -> Result<TimeGrid> {
        if !(self.t_end > 0.0) {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        let n = (self.t_end / self.tau).round();
        if !(n >= 1.0) || !n.is_finite() {
            return Err(Error::Config(format!(
                "tau = {} and t_end = {} give no steps",
                self.tau, self.t_end
            )));
        }
        TimeGrid::new(self.tau, n as usize)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadSettings {
    /// Pulse amplitude: end displacement for the bar (default 0.1 m),
    /// traction magnitude for the plate (default 20 Pa).
    pub amplitude: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    /// Output directory; no files are written when absent.
    pub dir: Option<String>,
    /// Field-export cadence in steps.
    pub every: usize,
    /// Probe position for the bar's stress-strain series.
    pub probe_x: f64,
    /// Deformed-configuration magnification factor.
    pub magnification: f64,
    /// Times at which fields are always exported.
    pub snapshots: Vec<f64>,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings {
            dir: None,
            every: 25,
            probe_x: 0.75,
            magnification: 15.0,
            snapshots: vec![0.0, 0.25, 0.375, 0.5, 0.54, 1.0],
        }
    }
}

/// Full description of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub mesh: MeshSettings,
    #[serde(default)]
    pub material: MaterialSettings,
    #[serde(default)]
    pub regularization: RegSettings,
    #[serde(default)]
    pub time: TimeSettings,
    #[serde(default)]
    pub loading: LoadSettings,
    #[serde(default)]
    pub output: OutputSettings,
    #[serde(default)]
    pub scheme: Scheme,
    /// Abort instead of warn when the tau/h admissibility bound is violated.
    #[serde(default)]
    pub strict: bool,
}

impl ScenarioConfig {
    /// The 1D bar with its defaults (yield stress 80 Pa, width 10).
    pub fn bar1d() -> Self {
        let mut cfg = ScenarioConfig {
            scenario: ScenarioKind::Bar1d,
            mesh: MeshSettings::default(),
            material: MaterialSettings::default(),
            regularization: RegSettings::default(),
            time: TimeSettings::default(),
            loading: LoadSettings::default(),
            output: OutputSettings::default(),
            scheme: Scheme::Implicit,
            strict: false,
        };
        cfg.material.nu = 0.0;
        cfg
    }

    /// The traction-driven plate with an elliptical hole (yield stress
    /// 60 Pa, gate width 100).
    pub fn plate2d() -> Self {
        let mut cfg = ScenarioConfig {
            scenario: ScenarioKind::Plate2d,
            ..Self::bar1d()
        };
        cfg.material.nu = 0.3;
        cfg.material.kappa_star = 60.0;
        cfg.regularization.epsilon = 100.0;
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Pulse amplitude with the scenario-specific default applied.
    pub fn amplitude(&self) -> f64 {
        self.loading.amplitude.unwrap_or(match self.scenario {
            ScenarioKind::Bar1d => 0.1,
            ScenarioKind::Plate2d => 20.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.time.to_grid()?;
        let reg = self.regularization.to_config();
        reg.validate()?;
        let dim = match self.scenario {
            ScenarioKind::Bar1d => 1,
            ScenarioKind::Plate2d => 2,
        };
        self.material.to_params(dim).validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.material.c_v > 0.0) || !(self.material.kappa_th >= 0.0) {
            return Err(Error::Config(format!(
                "thermal parameters must satisfy c_v > 0 and kappa_th >= 0, got {} and {}",
                self.material.c_v, self.material.kappa_th
            )));
        }
        if self.output.every == 0 {
            return Err(Error::Config("output.every must be at least 1".into()));
        }
        if !self.amplitude().is_finite() {
            return Err(Error::Config("loading amplitude must be finite".into()));
        }
        match self.scenario {
            ScenarioKind::Bar1d => {
                if self.mesh.n_cells == 0 {
                    return Err(Error::Config("the bar needs at least one cell".into()));
                }
                if !(self.mesh.length > 0.0) {
                    return Err(Error::Config(format!(
                        "bar length must be positive, got {}",
                        self.mesh.length
                    )));
                }
                let x = self.output.probe_x;
                if !(x > 0.0 && x < self.mesh.length) {
                    return Err(Error::Config(format!(
                        "probe_x = {x} lies outside the bar (0, {})",
                        self.mesh.length
                    )));
                }
            }
            ScenarioKind::Plate2d => {
                // delegate the geometric checks to the mesh builder
                build_plate_with_hole(
                    self.mesh.plate_width,
                    self.mesh.plate_height,
                    self.mesh.hole_a,
                    self.mesh.hole_b,
                    0,
                )?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run artifacts
// ---------------------------------------------------------------------------

/// One probe record of the bar run (strain and stress at the probe cell).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProbeRecord {
    pub k: usize,
    pub t: f64,
    /// Strain of the accumulated displacement on the probe cell.
    pub strain: f64,
    pub stress: f64,
    /// `max_K |sigma|` (1D) or `max_K |dev T|` (2D) over the whole mesh.
    pub max_abs_stress: f64,
}

/// Integrated plastic heating per step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct HeatRecord {
    pub k: usize,
    pub t: f64,
    /// `int_Omega q` at this step.
    pub total: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

/// Everything a run leaves behind (also serialized to `run_log.json`;
/// the bulky per-step series go to the CSV files instead).
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub scheme: Scheme,
    pub n_cells: usize,
    pub n_vertices: usize,
    pub mech_dofs: usize,
    pub thermo_dofs: usize,
    pub tau: f64,
    pub n_steps: usize,
    pub tau_h: TauHCheck,
    pub mesh_warnings: Vec<String>,
    /// Peak over time of the per-cell stress measure (|sigma| in 1D,
    /// |dev T| in 2D) and when it was attained.
    pub peak_max_abs_stress: f64,
    pub t_at_peak: f64,
    pub final_max_abs_stress: f64,
    /// `max_K |eps(u)|` at the final time.
    pub final_max_strain: f64,
    pub min_temperature: f64,
    pub max_temperature: f64,
    /// Peak of `E_kin + E_int + E_th` over the run.
    pub peak_total_energy: f64,
    /// Max over steps of |balance residual| relative to the run's peak
    /// energy per unit time.
    pub max_balance_ratio: f64,
    /// Same ratio taken against the running (causal) energy peak; dominated
    /// by the start-up steps where the pulse is below solver tolerance.
    pub max_balance_ratio_running: f64,
    pub total_newton_iterations: usize,
    pub max_step_iterations: usize,
    pub stability: StabilityReport,
    /// Gate-width multipliers of the continuation rescue ladder.
    pub epsilon_rescue_multipliers: Vec<f64>,
    /// Steps where no sharp-gate solution was reachable and the solver
    /// accepted the step with a residual loading-gate width instead.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eta_accepted_steps: Vec<usize>,
    /// Largest residual loading-gate width among the accepted steps.
    #[serde(skip_serializing_if = "is_zero")]
    pub max_eta_accepted: f64,
    #[serde(skip)]
    pub probe: Vec<ProbeRecord>,
    #[serde(skip)]
    pub energy: Vec<EnergyReport>,
    #[serde(skip)]
    pub heat_source: Vec<HeatRecord>,
    /// Per-cell maximum of the gate value over the loading phase
    /// (t <= 1/2).
    #[serde(skip)]
    pub max_gate_loading: Vec<f64>,
    #[serde(skip)]
    pub final_temperature: Vec<f64>,
}

#[derive(Serialize)]
struct RunLog<'a> {
    config: &'a ScenarioConfig,
    summary: &'a RunSummary,
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

fn bar_velocity_bc(amplitude: f64, mid: f64) -> DirichletBc {
    DirichletBc::new(move |t, x, out| {
        let sign = if x[0] < mid { -1.0 } else { 1.0 };
        out[0] = sign * bump_dot(t, amplitude);
    })
}

fn bar_displacement_bc(amplitude: f64, mid: f64) -> DirichletBc {
    DirichletBc::new(move |t, x, out| {
        let sign = if x[0] < mid { -1.0 } else { 1.0 };
        out[0] = sign * bump(t, amplitude);
    })
}

/// Max over cells of the scalar stress measure: |sigma| in 1D, the Frobenius
/// norm of the deviator in 2D.
fn max_stress_measure(mesh: &Mesh, stress: &StressField) -> f64 {
    let d = mesh.dim;
    let mut dev = [0.0_f64; 3];
    let mut best = 0.0_f64;
    for k in 0..mesh.n_cells() {
        let s = stress.cell(k);
        let m = if d == 1 {
            s[0].abs()
        } else {
            deviatoric(s, d, &mut dev);
            sym_inner(&dev, &dev, d).sqrt()
        };
        best = best.max(m);
    }
    best
}

fn frobenius_field(mesh: &Mesh, field: &StressField) -> Vec<f64> {
    (0..mesh.n_cells())
        .map(|k| {
            let s = field.cell(k);
            sym_inner(s, s, mesh.dim).sqrt()
        })
        .collect()
}

fn dev_norm_field(mesh: &Mesh, stress: &StressField) -> Vec<f64> {
    let d = mesh.dim;
    let mut dev = [0.0_f64; 3];
    (0..mesh.n_cells())
        .map(|k| {
            if d == 1 {
                stress.cell(k)[0].abs()
            } else {
                deviatoric(stress.cell(k), d, &mut dev);
                sym_inner(&dev, &dev, d).sqrt()
            }
        })
        .collect()
}

struct ScenarioSetup {
    mesh: Mesh,
    p: MaterialParams,
    reg: RegularizationConfig,
    loads: Loads,
    displacement_bc: Option<DirichletBc>,
    grid: TimeGrid,
    scheme: Scheme,
    strict: bool,
    probe_cell: Option<usize>,
    out_dir: Option<PathBuf>,
    every: usize,
    snapshots: Vec<f64>,
    magnification: f64,
    scenario_name: String,
}

/// Drive the bump-loaded bar; see [`ScenarioConfig::bar1d`] for defaults.
pub fn run_1d_bar(cfg: &ScenarioConfig) -> Result<RunSummary> {
    if cfg.scenario != ScenarioKind::Bar1d {
        return Err(Error::Config("run_1d_bar needs scenario = \"bar1d\"".into()));
    }
    cfg.validate()?;
    let mesh = build_interval_mesh(cfg.mesh.n_cells, 0.0, cfg.mesh.length)?;
    let amplitude = cfg.amplitude();
    let mid = 0.5 * cfg.mesh.length;
    let probe_cell = mesh
        .locate_cell(&[cfg.output.probe_x])
        .ok_or_else(|| Error::Config(format!("probe {} not in the mesh", cfg.output.probe_x)))?;
    let setup = ScenarioSetup {
        p: cfg.material.to_params(1),
        reg: cfg.regularization.to_config(),
        loads: Loads::free().with_dirichlet(bar_velocity_bc(amplitude, mid)),
        displacement_bc: Some(bar_displacement_bc(amplitude, mid)),
        grid: cfg.time.to_grid()?,
        scheme: cfg.scheme,
        strict: cfg.strict,
        probe_cell: Some(probe_cell),
        out_dir: cfg.output.dir.as_ref().map(PathBuf::from),
        every: cfg.output.every,
        snapshots: cfg.output.snapshots.clone(),
        magnification: cfg.output.magnification,
        scenario_name: "bar1d".into(),
        mesh,
    };
    let summary = run_core(setup)?;
    write_run_log(cfg, &summary)?;
    Ok(summary)
}

/// Drive the traction-loaded plate with an elliptical hole; see
/// [`ScenarioConfig::plate2d`] for defaults.
pub fn run_2d_plate(cfg: &ScenarioConfig) -> Result<RunSummary> {
    if cfg.scenario != ScenarioKind::Plate2d {
        return Err(Error::Config("run_2d_plate needs scenario = \"plate2d\"".into()));
    }
    cfg.validate()?;
    let mesh = build_plate_with_hole(
        cfg.mesh.plate_width,
        cfg.mesh.plate_height,
        cfg.mesh.hole_a,
        cfg.mesh.hole_b,
        cfg.mesh.refinement,
    )?;
    let amplitude = cfg.amplitude();
    let setup = ScenarioSetup {
        p: cfg.material.to_params(2),
        reg: cfg.regularization.to_config(),
        loads: Loads::free().with_traction(move |t, x, out| {
            let sign = if x[1] > 0.0 { 1.0 } else { -1.0 };
            out[0] = 0.0;
            out[1] = sign * bump(t, amplitude);
        }),
        displacement_bc: None,
        grid: cfg.time.to_grid()?,
        scheme: cfg.scheme,
        strict: cfg.strict,
        probe_cell: None,
        out_dir: cfg.output.dir.as_ref().map(PathBuf::from),
        every: cfg.output.every,
        snapshots: cfg.output.snapshots.clone(),
        magnification: cfg.output.magnification,
        scenario_name: "plate2d".into(),
        mesh,
    };
    let summary = run_core(setup)?;
    write_run_log(cfg, &summary)?;
    Ok(summary)
}

/// Dispatch on the configured scenario.
pub fn run(cfg: &ScenarioConfig) -> Result<RunSummary> {
    match cfg.scenario {
        ScenarioKind::Bar1d => run_1d_bar(cfg),
        ScenarioKind::Plate2d => run_2d_plate(cfg),
    }
}

const RESCUE_MULTIPLIERS: [f64; 5] = [16.0, 8.0, 4.0, 2.0, 1.0];

fn run_core(setup: ScenarioSetup) -> Result<RunSummary> {
    let ScenarioSetup {
        mesh,
        p,
        reg,
        loads,
        displacement_bc,
        grid,
        scheme,
        strict,
        probe_cell,
        out_dir,
        every,
        snapshots,
        magnification,
        scenario_name,
    } = setup;
    let d = mesh.dim;
    let tau = grid.tau;

    // The default eigensolve tolerance is unreachable on meshes with
    // near-degenerate cells (the tangent plate); a looser tolerance is plenty
    // for a diagnostic bound.
    let eig = EigenOptions { tol: 1e-8, max_iter: 200_000, ..Default::default() };
    let (tau_h, mut mesh_warnings) = match estimate_inverse_constants(&mesh, &eig) {
        Ok(constants) => {
            let warnings = constants.warnings.clone();
            (check_tau_h_condition(&p, &constants, tau)?, warnings)
        }
        Err(e) => {
            let msg = format!("tau/h admissibility could not be certified: {e}");
            if strict {
                return Err(Error::Config(msg));
            }
            let nan = f64::NAN;
            (TauHCheck { bound: nan, ratio: nan, admissible: false, margin: nan }, vec![msg])
        }
    };
    if tau_h.bound.is_finite() && !tau_h.admissible {
        let msg = format!(
            "tau/h = {:.3e} violates the admissibility bound {:.3e}",
            tau_h.ratio, tau_h.bound
        );
        if strict {
            return Err(Error::Config(msg));
        }
        mesh_warnings.push(msg);
    }

    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let export_steps: BTreeSet<usize> = {
        let mut set: BTreeSet<usize> = (0..=grid.n_steps).step_by(every).collect();
        set.insert(grid.n_steps);
        for &t in &snapshots {
            let k = (t / tau).round();
            if k >= 0.0 && k <= grid.n_steps as f64 {
                set.insert(k as usize);
            }
        }
        set
    };

    let thermal = ThermalSolver::new(&mesh, &p, tau)?;
    let semi = match scheme {
        Scheme::SemiImplicit => Some(SemiImplicitSolver::new(&mesh, &p, &loads, tau)?),
        Scheme::Implicit => None,
    };
    let newton = NewtonOptions { tol_abs: 1e-9, ..Default::default() };

    let mut mech = MechState::zeros(&mesh);
    let mut thermo = ThermoState::zeros(&mesh);
    let mut stability = StabilityAccumulator::new();
    stability.push_initial(&mech, &p, &mesh);

    let mut probe = Vec::new();
    let mut energy = Vec::new();
    let mut heat_source = Vec::new();
    let mut diagnostics_csv = String::from(
        "k,t,iterations,residual_norm,halvings,epsilon_reached,eta_reached,gate_fraction\n",
    );
    let mut max_gate_loading = vec![0.0_f64; mesh.n_cells()];

    let mut peak_stress = 0.0_f64;
    let mut t_at_peak = 0.0_f64;
    let mut min_temp = 0.0_f64;
    let mut max_temp = 0.0_f64;
    let mut peak_energy = 0.0_f64;
    let mut running_peak_energy = 0.0_f64;
    let mut balance_hist: Vec<(f64, f64)> = Vec::new(); // |balance|, running peak
    let mut total_iters = 0usize;
    let mut max_iters = 0usize;
    let mut eta_accepted_steps: Vec<usize> = Vec::new();
    let mut max_eta_accepted = 0.0_f64;

    let record_probe = |mech: &MechState, thermo: &ThermoState, probe: &mut Vec<ProbeRecord>| {
        if let Some(cell) = probe_cell {
            let mut eps = [0.0_f64; 3];
            strain_on_cell(&mesh, &thermo.displacement, cell, &mut eps[..ncomp(d)]);
            probe.push(ProbeRecord {
                k: mech.k,
                t: mech.t,
                strain: eps[0],
                stress: mech.stress.cell(cell)[0],
                max_abs_stress: max_stress_measure(&mesh, &mech.stress),
            });
        }
    };
    record_probe(&mech, &thermo, &mut probe);

    if export_steps.contains(&0) {
        export_fields(
            &out_dir,
            &mesh,
            &p,
            &reg,
            &mech,
            &thermo,
            &vec![0.0; mesh.n_cells()],
            magnification,
        )?;
    }

    for k in 1..=grid.n_steps {
        let (next, diag) = match (&semi, scheme) {
            (Some(solver), Scheme::SemiImplicit) => {
                let next = solver.step(&mech, &p, &reg, &loads, &mesh).map_err(|e| {
                    Error::Numerical(format!("step {k} (t = {}): {e}", grid.time(k)))
                })?;
                let diag = StepDiagnostics {
                    iterations: 0,
                    residual_norm: 0.0,
                    halvings: 0,
                    epsilon_reached: reg.epsilon,
                    eta_reached: reg.eta,
                    gate_fraction: gate_fraction(&mesh, &p, &reg, &next),
                };
                (next, diag)
            }
            _ => solve_step_with_rescue(&mech, &p, &reg, &loads, &mesh, tau, &newton)
                .map_err(|e| Error::Numerical(format!("step {k} (t = {}): {e}", grid.time(k))))?,
        };
        total_iters += diag.iterations;
        max_iters = max_iters.max(diag.iterations);
        if diag.eta_reached > reg.eta {
            eta_accepted_steps.push(k);
            max_eta_accepted = max_eta_accepted.max(diag.eta_reached);
        }

        let q = plastic_heating_source(&next.stress, &next.velocity, &p, &reg, &mesh);
        let next_thermo = ThermoState {
            k: next.k,
            t: next.t,
            displacement: step_displacement(
                &thermo,
                &next.velocity,
                tau,
                &mesh,
                displacement_bc.as_ref(),
            )?,
            temperature: thermal.step(&thermo.temperature, &q, &p, &mesh)?,
        };

        // Audit against the system the step actually solved: on the rare
        // steps where only a smoothed loading gate admits a solution, the
        // balance identity is exact at that width, not at zero.
        let reg_audit = RegularizationConfig { eta: diag.eta_reached, ..reg };
        let mut report =
            audit_step(&mech, &next, Some((&thermo, &next_thermo)), &loads, &p, &reg_audit, &mesh)?;
        stability.push_step(&mech, &next, &p, &loads, &mesh);
        let stab = stability.report();
        report.stability_lhs = stab.lhs;
        report.stability_rhs = stab.rhs;

        let total_energy = report.e_kin + report.e_int + report.e_th;
        running_peak_energy = running_peak_energy.max(total_energy);
        peak_energy = peak_energy.max(total_energy);
        balance_hist.push((report.balance_residual.abs(), running_peak_energy));
        energy.push(report);

        let q_total: f64 =
            q.iter().enumerate().map(|(c, &v)| v * mesh.cell_volume(c)).sum();
        heat_source.push(HeatRecord { k, t: next.t, total: q_total });

        let stress_now = max_stress_measure(&mesh, &next.stress);
        if stress_now > peak_stress {
            peak_stress = stress_now;
            t_at_peak = next.t;
        }
        for v in 0..mesh.n_vertices() {
            let th = next_thermo.temperature.value(v, 0);
            min_temp = min_temp.min(th);
            max_temp = max_temp.max(th);
        }
        if next.t <= 0.5 + 0.5 * tau {
            for (cell, g) in gate_field(&mesh, &p, &reg, &next).into_iter().enumerate() {
                if g > max_gate_loading[cell] {
                    max_gate_loading[cell] = g;
                }
            }
        }

        let _ = writeln!(
            diagnostics_csv,
            "{},{},{},{},{},{},{},{}",
            k,
            next.t,
            diag.iterations,
            diag.residual_norm,
            diag.halvings,
            diag.epsilon_reached,
            diag.eta_reached,
            diag.gate_fraction
        );

        mech = next;
        thermo = next_thermo;
        record_probe(&mech, &thermo, &mut probe);
        if export_steps.contains(&k) {
            export_fields(&out_dir, &mesh, &p, &reg, &mech, &thermo, &q, magnification)?;
        }
    }

    let final_strain = strain(&mesh, &thermo.displacement)?;
    let final_max_strain =
        frobenius_field(&mesh, &final_strain).into_iter().fold(0.0_f64, f64::max);
    let final_temperature: Vec<f64> =
        (0..mesh.n_vertices()).map(|v| thermo.temperature.value(v, 0)).collect();

    let energy_floor = (peak_energy / tau).max(f64::MIN_POSITIVE);
    let max_balance_ratio = balance_hist
        .iter()
        .map(|(b, _)| b / energy_floor)
        .fold(0.0_f64, f64::max);
    let max_balance_ratio_running = balance_hist
        .iter()
        .map(|(b, peak)| if *peak > 0.0 { b / (peak / tau) } else { 0.0 })
        .fold(0.0_f64, f64::max);

    let summary = RunSummary {
        scenario: scenario_name,
        scheme,
        n_cells: mesh.n_cells(),
        n_vertices: mesh.n_vertices(),
        mech_dofs: ncomp(d) * mesh.n_cells() + d * mesh.n_vertices(),
        thermo_dofs: (d + 1) * mesh.n_vertices(),
        tau,
        n_steps: grid.n_steps,
        tau_h,
        mesh_warnings,
        peak_max_abs_stress: peak_stress,
        t_at_peak,
        final_max_abs_stress: max_stress_measure(&mesh, &mech.stress),
        final_max_strain,
        min_temperature: min_temp,
        max_temperature: max_temp,
        peak_total_energy: peak_energy,
        max_balance_ratio,
        max_balance_ratio_running,
        total_newton_iterations: total_iters,
        max_step_iterations: max_iters,
        stability: stability.report(),
        epsilon_rescue_multipliers: RESCUE_MULTIPLIERS.to_vec(),
        eta_accepted_steps,
        max_eta_accepted,
        probe,
        energy,
        heat_source,
        max_gate_loading,
        final_temperature,
    };

    if let Some(dir) = &out_dir {
        let mut probe_csv = String::from("t,strain,stress,max_abs_stress\n");
        for r in &summary.probe {
            let _ = writeln!(probe_csv, "{},{},{},{}", r.t, r.strain, r.stress, r.max_abs_stress);
        }
        if probe_cell.is_some() {
            std::fs::write(dir.join("probe.csv"), probe_csv)?;
        }
        let mut energy_csv = String::from(EnergyReport::csv_header());
        energy_csv.push('\n');
        for r in &summary.energy {
            energy_csv.push_str(&r.csv_row());
            energy_csv.push('\n');
        }
        std::fs::write(dir.join("energy.csv"), energy_csv)?;
        std::fs::write(dir.join("diagnostics.csv"), diagnostics_csv)?;
        let mut heat_csv = String::from("k,t,total\n");
        for r in &summary.heat_source {
            let _ = writeln!(heat_csv, "{},{},{}", r.k, r.t, r.total);
        }
        std::fs::write(dir.join("heat_source.csv"), heat_csv)?;
    }
    Ok(summary)
}

fn write_run_log(cfg: &ScenarioConfig, summary: &RunSummary) -> Result<()> {
    if let Some(dir) = &cfg.output.dir {
        let log = RunLog { config: cfg, summary };
        let text = serde_json::to_string_pretty(&log)
            .map_err(|e| Error::Numerical(format!("run log serialization failed: {e}")))?;
        std::fs::write(Path::new(dir).join("run_log.json"), text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Field export (VTK legacy ASCII)
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn export_fields(
    out_dir: &Option<PathBuf>,
    mesh: &Mesh,
    p: &MaterialParams,
    reg: &RegularizationConfig,
    mech: &MechState,
    thermo: &ThermoState,
    heating: &[f64],
    magnification: f64,
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    let d = mesh.dim;
    let nc = ncomp(d);
    let strain_u = strain(mesh, &thermo.displacement)?;
    let strain_norm = frobenius_field(mesh, &strain_u);
    let dev_norm = dev_norm_field(mesh, &mech.stress);
    let gate = gate_field(mesh, p, reg, mech);
    let comp_names: &[&str] = if d == 1 {
        &["stress"]
    } else {
        &["stress_xx", "stress_yy", "stress_xy"]
    };
    let mut comps: Vec<Vec<f64>> = vec![Vec::with_capacity(mesh.n_cells()); nc];
    for k in 0..mesh.n_cells() {
        let s = mech.stress.cell(k);
        for m in 0..nc {
            comps[m].push(s[m]);
        }
    }
    let mut cell_scalars: Vec<(&str, &[f64])> = Vec::new();
    for (m, name) in comp_names.iter().copied().enumerate() {
        cell_scalars.push((name, &comps[m]));
    }
    cell_scalars.push(("dev_norm", &dev_norm));
    cell_scalars.push(("strain_norm", &strain_norm));
    cell_scalars.push(("gate", &gate));
    cell_scalars.push(("heating", heating));

    let point_vectors: Vec<(&str, &NodalField)> =
        vec![("velocity", &mech.velocity), ("displacement", &thermo.displacement)];
    let point_scalars: Vec<(&str, &NodalField)> = vec![("temperature", &thermo.temperature)];

    let reference: Vec<f64> = (0..mesh.n_vertices())
        .flat_map(|v| mesh.vertex(v).to_vec())
        .collect();
    write_vtk(
        &dir.join(format!("fields_{:06}.vtk", mech.k)),
        mesh,
        &reference,
        mech.t,
        &cell_scalars,
        &point_vectors,
        &point_scalars,
    )?;
    if d == 2 {
        let deformed: Vec<f64> = (0..mesh.n_vertices())
            .flat_map(|v| {
                let x = mesh.vertex(v);
                (0..d).map(move |j| x[j] + magnification * thermo.displacement.value(v, j))
            })
            .collect();
        write_vtk(
            &dir.join(format!("deformed_{:06}.vtk", mech.k)),
            mesh,
            &deformed,
            mech.t,
            &cell_scalars,
            &point_vectors,
            &point_scalars,
        )?;
    }
    Ok(())
}

/// Write an unstructured-grid legacy VTK file with the given point
/// coordinates (flat, `dim` entries per vertex) and attached data.
pub fn write_vtk(
    path: &Path,
    mesh: &Mesh,
    points: &[f64],
    t: f64,
    cell_scalars: &[(&str, &[f64])],
    point_vectors: &[(&str, &NodalField)],
    point_scalars: &[(&str, &NodalField)],
) -> Result<()> {
    let d = mesh.dim;
    let np = mesh.n_vertices();
    let nk = mesh.n_cells();
    if points.len() != np * d {
        return Err(Error::invalid("point array does not match the mesh"));
    }
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "rateplast fields at t = {t}");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {np} double");
    for v in 0..np {
        let x = points[v * d];
        let y = if d > 1 { points[v * d + 1] } else { 0.0 };
        let _ = writeln!(s, "{x} {y} 0");
    }
    let nv = d + 1;
    let _ = writeln!(s, "CELLS {nk} {}", nk * (nv + 1));
    for k in 0..nk {
        let c = mesh.cell(k);
        let _ = write!(s, "{nv}");
        for &v in c {
            let _ = write!(s, " {v}");
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "CELL_TYPES {nk}");
    let vtk_type = if d == 1 { 3 } else { 5 };
    for _ in 0..nk {
        let _ = writeln!(s, "{vtk_type}");
    }
    if !cell_scalars.is_empty() {
        let _ = writeln!(s, "CELL_DATA {nk}");
        for (name, values) in cell_scalars {
            if values.len() != nk {
                return Err(Error::invalid(format!("cell field {name} has the wrong length")));
            }
            let _ = writeln!(s, "SCALARS {name} double 1");
            let _ = writeln!(s, "LOOKUP_TABLE default");
            for v in *values {
                let _ = writeln!(s, "{v}");
            }
        }
    }
    if !point_vectors.is_empty() || !point_scalars.is_empty() {
        let _ = writeln!(s, "POINT_DATA {np}");
        for (name, field) in point_vectors {
            let _ = writeln!(s, "VECTORS {name} double");
            for v in 0..np {
                let x = field.value(v, 0);
                let y = if field.ncomp > 1 { field.value(v, 1) } else { 0.0 };
                let _ = writeln!(s, "{x} {y} 0");
            }
        }
        for (name, field) in point_scalars {
            let _ = writeln!(s, "SCALARS {name} double 1");
            let _ = writeln!(s, "LOOKUP_TABLE default");
            for v in 0..np {
                let _ = writeln!(s, "{}", field.value(v, 0));
            }
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

/// Nested-refinement study on the 1D bar: level `l` uses
/// `base_space * 2^(l-1)` cells and `base_time * 2^(l-1)` steps; the
/// reference lives at `reference_level` of the same family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub base_space: usize,
    pub base_time: usize,
    pub levels: usize,
    pub reference_level: usize,
    pub t_end: f64,
    pub amplitude: f64,
    pub length: f64,
    pub material: MaterialSettings,
    pub regularization: RegSettings,
    pub out_dir: Option<String>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        let mut material = MaterialSettings::default();
        material.nu = 0.0;
        material.kappa_star = 70.0;
        let mut regularization = RegSettings::default();
        regularization.epsilon = 200.0;
        ConvergenceConfig {
            base_space: 64,
            base_time: 40,
            levels: 4,
            reference_level: 7,
            t_end: 1.0,
            amplitude: 0.1,
            length: 1.0,
            material,
            regularization,
            out_dir: None,
        }
    }
}

impl ConvergenceConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ConvergenceConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_space == 0 || self.base_time == 0 {
            return Err(Error::invalid("levels and base sizes must be positive"));
        }
        if self.reference_level < self.levels {
            return Err(Error::invalid(format!(
                "reference level {} must be at least the finest level {} so the grids nest",
                self.reference_level, self.levels
            )));
        }
        if !(self.t_end > 0.0) || !(self.length > 0.0) {
            return Err(Error::invalid("t_end and length must be positive"));
        }
        Ok(())
    }

    fn n_space(&self, level: usize) -> usize {
        self.base_space << (level - 1)
    }

    fn n_time(&self, level: usize) -> usize {
        self.base_time << (level - 1)
    }
}

/// Errors against the reference, per level, with observed rates.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorTable {
    pub levels: Vec<usize>,
    pub n_space: Vec<usize>,
    pub n_time: Vec<usize>,
    /// `sup_t ||sigma^l - sigma*||_{L2}` per level.
    pub err_stress: Vec<f64>,
    /// `sup_t ||v^l - v*||_{L2}` per level.
    pub err_velocity: Vec<f64>,
    /// `log2(E^l / E^{l+1})`, one entry per consecutive pair.
    pub rate_stress: Vec<f64>,
    pub rate_velocity: Vec<f64>,
}

impl ErrorTable {
    pub fn csv(&self) -> String {
        let mut s =
            String::from("level,n_space,n_time,err_stress,err_velocity,rate_stress,rate_velocity\n");
        for i in 0..self.levels.len() {
            let (rs, rv) = if i == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (self.rate_stress[i - 1], self.rate_velocity[i - 1])
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{rs},{rv}",
                self.levels[i],
                self.n_space[i],
                self.n_time[i],
                self.err_stress[i],
                self.err_velocity[i]
            );
        }
        s
    }
}

struct Trajectory {
    stress: Vec<Vec<f64>>,
    velocity: Vec<Vec<f64>>,
}

fn run_bar_lean(
    n_cells: usize,
    length: f64,
    p: &MaterialParams,
    reg: &RegularizationConfig,
    grid: TimeGrid,
    amplitude: f64,
    mut on_step: impl FnMut(usize, &MechState),
) -> Result<()> {
    let mesh = build_interval_mesh(n_cells, 0.0, length)?;
    let loads = Loads::free().with_dirichlet(bar_velocity_bc(amplitude, 0.5 * length));
    let newton = NewtonOptions { tol_abs: 1e-9, ..Default::default() };
    let mut state = MechState::zeros(&mesh);
    for k in 1..=grid.n_steps {
        let (next, _) = solve_step_with_rescue(&state, p, reg, &loads, &mesh, grid.tau, &newton)
            .map_err(|e| Error::Numerical(format!("step {k} of a {n_cells}-cell level: {e}")))?;
        state = next;
        on_step(k, &state);
    }
    Ok(())
}

/// Run the nested study and return the error table. Spatial norms are the
/// plain (unweighted) L2 norms; the supremum over time is exact for the
/// piecewise-constant-in-time interpolants because the time grids nest.
pub fn convergence_study(cfg: &ConvergenceConfig) -> Result<ErrorTable> {
    cfg.validate()?;
    let p = cfg.material.to_params(1);
    let reg = cfg.regularization.to_config();

    // store the coarse-level trajectories
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(cfg.levels);
    for level in 1..=cfg.levels {
        let n_x = cfg.n_space(level);
        let n_t = cfg.n_time(level);
        let grid = TimeGrid::new(cfg.t_end / n_t as f64, n_t)?;
        let mut traj = Trajectory {
            stress: Vec::with_capacity(n_t),
            velocity: Vec::with_capacity(n_t),
        };
        run_bar_lean(n_x, cfg.length, &p, &reg, grid, cfg.amplitude, |_, state| {
            traj.stress.push((0..n_x).map(|c| state.stress.cell(c)[0]).collect());
            traj.velocity.push((0..=n_x).map(|v| state.velocity.value(v, 0)).collect());
        })?;
        trajectories.push(traj);
    }

    // stream the reference, updating the sup-norm errors of every level
    let n_x_ref = cfg.n_space(cfg.reference_level);
    let n_t_ref = cfg.n_time(cfg.reference_level);
    let h_ref = cfg.length / n_x_ref as f64;
    let grid_ref = TimeGrid::new(cfg.t_end / n_t_ref as f64, n_t_ref)?;
    let mut err_stress = vec![0.0_f64; cfg.levels];
    let mut err_velocity = vec![0.0_f64; cfg.levels];
    run_bar_lean(n_x_ref, cfg.length, &p, &reg, grid_ref, cfg.amplitude, |m, state| {
        for level in 1..=cfg.levels {
            let traj = &trajectories[level - 1];
            let ratio_t = n_t_ref / cfg.n_time(level);
            let ratio_x = n_x_ref / cfg.n_space(level);
            let k = (m + ratio_t - 1) / ratio_t; // coarse step covering t_m
            let sigma_l = &traj.stress[k - 1];
            let v_l = &traj.velocity[k - 1];

            let mut s2 = 0.0;
            for j in 0..n_x_ref {
                let diff = sigma_l[j / ratio_x] - state.stress.cell(j)[0];
                s2 += h_ref * diff * diff;
            }
            err_stress[level - 1] = err_stress[level - 1].max(s2.sqrt());

            // P1 transfer is exact on nested grids: vertex i sits at
            // fraction (i mod ratio)/ratio of coarse cell i/ratio
            let interp = |i: usize| -> f64 {
                if i == n_x_ref {
                    v_l[v_l.len() - 1]
                } else {
                    let c = i / ratio_x;
                    let lam = (i % ratio_x) as f64 / ratio_x as f64;
                    (1.0 - lam) * v_l[c] + lam * v_l[c + 1]
                }
            };
            let mut v2 = 0.0;
            let mut left = interp(0) - state.velocity.value(0, 0);
            for j in 0..n_x_ref {
                let right = interp(j + 1) - state.velocity.value(j + 1, 0);
                v2 += h_ref * (left * left + left * right + right * right) / 3.0;
                left = right;
            }
            err_velocity[level - 1] = err_velocity[level - 1].max(v2.sqrt());
        }
    })?;

    let rate = |e: &[f64]| -> Vec<f64> {
        e.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
    };
    let table = ErrorTable {
        levels: (1..=cfg.levels).collect(),
        n_space: (1..=cfg.levels).map(|l| cfg.n_space(l)).collect(),
        n_time: (1..=cfg.levels).map(|l| cfg.n_time(l)).collect(),
        rate_stress: rate(&err_stress),
        rate_velocity: rate(&err_velocity),
        err_stress,
        err_velocity,
    };
    if let Some(dir) = &cfg.out_dir {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("errors.csv"), table.csv())?;
        let log = serde_json::json!({ "config": cfg, "table": &table });
        let text = serde_json::to_string_pretty(&log)
            .map_err(|e| Error::Numerical(format!("log serialization failed: {e}")))?;
        std::fs::write(dir.join("convergence_log.json"), text)?;
    }
    Ok(table)
}
