//! Experiment configuration files and the pipeline they describe: car
//! parameters, track, mode table, path model, grid and kernels.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, KernelSet};
use crate::kernel::{
    analytic_memory_bytes, disc_kernel_modified, fraction, viability_kernel, DisturbanceModel,
    KernelKind, KernelResult, PathDynamics, SafeInputTable, UnionRule,
};
use crate::ppmodel::{PPConfig, PathModel};
use crate::sim::{run, Controller, RunReport, SimConfig, SimContext};
use crate::track::Track;
use crate::vehicle::{
    build_mode_table, CarParams, ModeGrid, TransitionAutomaton, VelocityTolerance,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathModelConfig {
    pub t_pp: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Transition time of the automaton; `t_pp` when absent.
    #[serde(default)]
    pub t_transition: Option<f64>,
    #[serde(default)]
    pub tolerance: VelocityTolerance,
}

fn default_samples() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_phi: usize,
    /// Extra padding around the track bounds.
    #[serde(default)]
    pub pad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub margin: f64,
    pub disturbance: DisturbanceModel,
    pub union_rule: UnionRule,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Discriminating,
            margin: crate::kernel::DEFAULT_MARGIN,
            disturbance: DisturbanceModel::default(),
            union_rule: UnionRule::default(),
        }
    }
}

/// A complete experiment description. Relative paths resolve against the
/// directory of the file they were read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Car parameter file; built-in parameters when absent.
    #[serde(default)]
    pub car: Option<PathBuf>,
    pub track: PathBuf,
    pub modes: ModeGrid,
    pub path_model: PathModelConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

impl Scenario {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut s: Scenario = toml::from_str(text)?;
        s.car = s.car.map(|p| base.join(p));
        s.track = base.join(&s.track);
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&std::fs::read_to_string(path)?, base)
    }

    pub fn params(&self) -> Result<CarParams> {
        match &self.car {
            Some(p) => CarParams::load(p),
            None => Ok(CarParams::default()),
        }
    }
}

/// Everything a kernel computation or a simulation needs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub params: CarParams,
    pub track: Track,
    pub model: PathModel,
    pub spec: GridSpec,
    pub kernel: KernelConfig,
}

impl Setup {
    pub fn build(scenario: &Scenario) -> Result<Self> {
        Self::with_track(scenario, Track::load(&scenario.track)?)
    }

    pub fn with_track(scenario: &Scenario, track: Track) -> Result<Self> {
        let params = scenario.params()?;
        params.validate()?;
        let pm = &scenario.path_model;
        let config = PPConfig {
            t_pp: pm.t_pp,
            n_samples: pm.n_samples,
        };
        config.validate()?;
        let (table, report) = build_mode_table(&params, &scenario.modes, pm.t_pp)?;
        if !report.failed.is_empty() {
            log::warn!(
                "{} mode grid points have no stationary solution",
                report.failed.len()
            );
        }
        if table.is_empty() {
            return Err(Error::InvalidParams("mode grid produced no modes".into()));
        }
        let automaton = TransitionAutomaton::build(
            &params,
            &table,
            pm.t_transition.unwrap_or(pm.t_pp),
            pm.tolerance,
        );
        let model = PathModel::new(table, automaton, config)?;
        let spec = grid_for(
            &track,
            scenario.grid.n_phi,
            scenario.grid.pad,
            model.n_modes(),
        )?;
        Ok(Self {
            params,
            track,
            model,
            spec,
            kernel: scenario.kernel.clone(),
        })
    }

    /// Constraint set of the track at the configured margin.
    pub fn k_h(&self) -> Result<KernelSet> {
        self.track.build_k(&self.spec, self.kernel.margin)
    }

    pub fn dynamics(&self) -> Result<PathDynamics> {
        PathDynamics::new(
            &self.model,
            &self.track,
            &self.spec,
            self.kernel.margin,
            self.kernel.disturbance,
        )
    }

    pub fn compute(&self, kind: KernelKind) -> Result<KernelResult> {
        let k_h = self.k_h()?;
        let dynamics = self.dynamics()?;
        Ok(match kind {
            KernelKind::Viability => viability_kernel(&k_h, &dynamics),
            KernelKind::Discriminating => {
                disc_kernel_modified(&k_h, &dynamics, self.kernel.union_rule)
            }
        })
    }

    /// Checks that a loaded kernel was computed on this setup's grid.
    pub fn check_kernel(&self, kernel: &KernelSet) -> Result<()> {
        if kernel.spec() != &self.spec {
            return Err(Error::Mismatch(
                "kernel grid differs from the scenario grid".into(),
            ));
        }
        Ok(())
    }

    pub fn simulate(
        &self,
        sim: &SimConfig,
        kernel: Option<(&KernelSet, &SafeInputTable)>,
    ) -> Result<RunReport> {
        if let Some((k, _)) = kernel {
            self.check_kernel(k)?;
        }
        let ctx = SimContext {
            params: &self.params,
            model: &self.model,
            track: &self.track,
            kernel,
        };
        run(&ctx, sim)
    }
}

/// Grid over the track bounds, which already include the half-width.
pub fn grid_for(track: &Track, n_phi: usize, pad: f64, n_modes: usize) -> Result<GridSpec> {
    let (lo, hi) = track.bounds();
    GridSpec::covering(
        [lo[0] - pad, lo[1] - pad],
        [hi[0] + pad, hi[1] + pad],
        n_phi,
        n_modes,
    )
}

/// A named mode grid of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedModes {
    pub name: String,
    #[serde(flatten)]
    pub grid: ModeGrid,
}

/// Planner constraint of a sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKernel {
    Viability,
    Discriminating,
    /// Track-only planner.
    None,
}

impl SweepKernel {
    pub fn kind(self) -> Option<KernelKind> {
        match self {
            SweepKernel::Viability => Some(KernelKind::Viability),
            SweepKernel::Discriminating => Some(KernelKind::Discriminating),
            SweepKernel::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepKernel::Viability => "viability",
            SweepKernel::Discriminating => "discriminating",
            SweepKernel::None => "none",
        }
    }
}

/// Cartesian product of parameter lists applied to a base scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepMatrix {
    pub kernels: Vec<SweepKernel>,
    pub n_phi: Vec<usize>,
    pub t_pp: Vec<f64>,
    pub n_s: Vec<usize>,
    /// Mode grids; the base scenario's grid when empty.
    #[serde(default)]
    pub modes: Vec<NamedModes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kernel: SweepKernel,
    pub n_phi: usize,
    pub t_pp: f64,
    pub n_s: usize,
    pub modes: NamedModes,
}

impl SweepMatrix {
    pub fn rows(&self, base: &Scenario) -> Vec<SweepRow> {
        let modes = if self.modes.is_empty() {
            vec![NamedModes {
                name: "base".into(),
                grid: base.modes.clone(),
            }]
        } else {
            self.modes.clone()
        };
        let mut rows = Vec::new();
        for m in &modes {
            for &t_pp in &self.t_pp {
                for &n_phi in &self.n_phi {
                    for &kernel in &self.kernels {
                        for &n_s in &self.n_s {
                            rows.push(SweepRow {
                                kernel,
                                n_phi,
                                t_pp,
                                n_s,
                                modes: m.clone(),
                            });
                        }
                    }
                }
            }
        }
        rows
    }
}

/// Result of one sweep row; `error` is set when the row failed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub kernel: String,
    pub modes: String,
    pub n_modes: usize,
    pub n_phi: usize,
    pub grid_points: usize,
    pub t_pp: f64,
    pub n_s: usize,
    pub kernel_fraction: Option<f64>,
    pub kernel_iterations: Option<usize>,
    pub memory_mb: Option<f64>,
    pub laps: Option<usize>,
    pub mean_lap_time: Option<f64>,
    pub median_lap_time: Option<f64>,
    pub violations: Option<usize>,
    pub emergency_stops: Option<usize>,
    pub infeasible_replans: Option<usize>,
    pub mean_nodes: Option<f64>,
    pub kernel_seconds: Option<f64>,
    pub planner_ms_median: Option<f64>,
    pub planner_ms_max: Option<f64>,
    pub error: Option<String>,
}

fn run_row(base: &Scenario, track: &Track, row: &SweepRow, out: &mut SweepResult) -> Result<()> {
    let mut sc = base.clone();
    sc.modes = row.modes.grid.clone();
    sc.path_model.t_pp = row.t_pp;
    sc.path_model.t_transition = None;
    sc.grid.n_phi = row.n_phi;
    sc.sim.n_s = row.n_s;
    let setup = Setup::with_track(&sc, track.clone())?;
    out.n_modes = setup.model.n_modes();
    out.grid_points = setup.spec.len();
    let mut sim = sc.sim.clone();
    let report = match row.kernel.kind() {
        Some(kind) => {
            let t0 = Instant::now();
            let k_h = setup.k_h()?;
            let result = setup.compute(kind)?;
            out.kernel_seconds = Some(t0.elapsed().as_secs_f64());
            out.kernel_fraction = Some(fraction(&result.kernel, &k_h)?);
            out.kernel_iterations = Some(result.iterations);
            out.memory_mb = Some(analytic_memory_bytes(&setup.spec) as f64 / 1e6);
            sim.controller = Controller::KernelPlanner;
            setup.simulate(&sim, Some((&result.kernel, &result.safe)))?
        }
        None => {
            sim.controller = Controller::NaivePlanner;
            setup.simulate(&sim, None)?
        }
    };
    out.laps = Some(report.laps);
    out.mean_lap_time = report.mean_lap_time;
    out.median_lap_time = report.median_lap_time;
    out.violations = Some(report.violations);
    out.emergency_stops = Some(report.emergency_stops);
    out.infeasible_replans = Some(report.infeasible_replans);
    out.mean_nodes = Some(report.node_count_total as f64 / report.replans.max(1) as f64);
    out.planner_ms_median = Some(report.timing.planner_ms_median);
    out.planner_ms_max = Some(report.timing.planner_ms_max);
    Ok(())
}

/// Runs every row in parallel. Failures are recorded in the row's `error`
/// column and do not stop the sweep.
pub fn sweep(base: &Scenario, track: &Track, rows: &[SweepRow]) -> Vec<SweepResult> {
    rows.par_iter()
        .map(|row| {
            let mut out = SweepResult {
                kernel: row.kernel.name().into(),
                modes: row.modes.name.clone(),
                n_phi: row.n_phi,
                t_pp: row.t_pp,
                n_s: row.n_s,
                ..SweepResult::default()
            };
            if let Err(e) = run_row(base, track, row, &mut out) {
                out.error = Some(e.to_string());
            }
            out
        })
        .collect()
}

pub const SWEEP_COLUMNS: [&str; 21] = [
    "kernel",
    "modes",
    "n_modes",
    "n_phi",
    "grid_points",
    "t_pp",
    "n_s",
    "kernel_fraction",
    "kernel_iterations",
    "memory_mb",
    "laps",
    "mean_lap_time",
    "median_lap_time",
    "violations",
    "emergency_stops",
    "infeasible_replans",
    "mean_nodes",
    "kernel_seconds",
    "planner_ms_median",
    "planner_ms_max",
    "error",
];

pub fn write_sweep_csv(results: &[SweepResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
