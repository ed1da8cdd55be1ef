//! `viab`: mode tables, kernels, slices, plans, closed-loop runs and sweeps
//! from a scenario file.
//!
//! Every subcommand writes its artifacts to `--out` together with a
//! `summary.json`, and prints the summary on stdout. Failures print one JSON
//! line `{"error": ..., "message": ...}` on stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use viability_core::grid::KernelSet;
use viability_core::kernel::{
    analytic_memory_bytes, compare, fraction, load_kernel, slice, write_slice_csv, write_slice_pgm,
    KernelKind, SafeInputTable,
};
use viability_core::planner::{plan_kernel, plan_naive, write_plan_csv};
use viability_core::ppmodel::PPState;
use viability_core::scenario::{sweep, write_sweep_csv, Scenario, Setup, SweepMatrix};
use viability_core::sim::{write_trajectory_csv, Controller, Plant};
use viability_core::Error;

#[derive(Parser)]
#[command(
    name = "viab",
    version,
    about = "Viability-kernel path planning for miniature race cars"
)]
struct Cli {
    /// Worker threads for kernel sweeps and parameter sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mode table and transition automaton.
    Modes(Common),
    /// Compute a kernel and its safe inputs.
    Kernel(Common),
    /// Compare two kernel files on the scenario's constraint set.
    Compare {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
    /// Export the X-Y slice of a kernel nearest to a heading.
    Slice {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        phi: f64,
        /// Mode id, 0-based.
        #[arg(long)]
        mode: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Plan one receding-horizon step from a state.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Kernel file; the track-only planner is used when absent.
        #[arg(long)]
        kernel: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, allow_hyphen_values = true)]
        y: f64,
        #[arg(long, allow_hyphen_values = true)]
        phi: f64,
        /// Current mode id, 0-based.
        #[arg(long)]
        mode: usize,
    },
    /// Run the closed loop.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Kernel file; computed from the scenario when absent.
        #[arg(long)]
        kernel: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long, value_enum)]
        plant: Option<PlantArg>,
    },
    /// Run a parameter matrix and write one CSV row per configuration.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        matrix: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Viability,
    Discriminating,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    KernelPlanner,
    NaivePlanner,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantArg {
    Full,
    PathModel,
}

/// Scenario file plus overrides. A flag that conflicts with a value set in
/// the file is ignored with a warning.
#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    track: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    n_phi: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    t_pp: Option<f64>,
    #[arg(long)]
    n_s: Option<usize>,
    #[arg(long)]
    disturbance: Option<String>,
    #[arg(long)]
    union_rule: Option<String>,
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::OutsideGrid | Error::InvalidIndex(_) | Error::InvalidMode(_) => "invalid-state",
            Error::InvalidGrid(_) | Error::InvalidParams(_) | Error::InvalidTrack(_) => {
                "invalid-input"
            }
            Error::Format(_) | Error::Csv(_) | Error::Toml(_) | Error::Json(_) => "format",
            Error::Mismatch(_) => "mismatch",
            Error::Io(_) => "io",
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        kind: "usage",
        message: message.into(),
    }
}

type CliResult<T> = Result<T, CliError>;

fn warn(message: String) {
    eprintln!("{}", json!({ "warning": message }));
}

/// Sets `table[section][key]` unless the file already has a different value.
fn merge(doc: &mut toml::Table, section: Option<&str>, key: &str, value: toml::Value) {
    let table = match section {
        Some(s) => match doc
            .entry(s)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return,
        },
        None => doc,
    };
    match table.get(key) {
        Some(existing) if *existing != value => {
            let name = section.map_or(key.to_string(), |s| format!("{s}.{key}"));
            warn(format!(
                "--{} ignored: scenario file sets {name} = {existing}",
                key.replace('_', "-")
            ));
        }
        Some(_) => {}
        None => {
            table.insert(key.into(), value);
        }
    }
}

impl Common {
    fn scenario(&self) -> CliResult<Scenario> {
        let text = std::fs::read_to_string(&self.scenario)
            .map_err(|e| usage(format!("cannot read {}: {e}", self.scenario.display())))?;
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::from(Error::Toml(e)))?;
        if let Some(t) = &self.track {
            let abs = std::path::absolute(t)?;
            merge(
                &mut doc,
                None,
                "track",
                toml::Value::String(abs.to_string_lossy().into_owned()),
            );
        }
        if let Some(k) = self.kind {
            let name = match k {
                KindArg::Viability => "viability",
                KindArg::Discriminating => "discriminating",
            };
            merge(
                &mut doc,
                Some("kernel"),
                "kind",
                toml::Value::String(name.into()),
            );
        }
        if let Some(n) = self.n_phi {
            merge(
                &mut doc,
                Some("grid"),
                "n_phi",
                toml::Value::Integer(n as i64),
            );
        }
        if let Some(m) = self.margin {
            merge(&mut doc, Some("kernel"), "margin", toml::Value::Float(m));
        }
        if let Some(t) = self.t_pp {
            merge(&mut doc, Some("path_model"), "t_pp", toml::Value::Float(t));
        }
        if let Some(n) = self.n_s {
            merge(&mut doc, Some("sim"), "n_s", toml::Value::Integer(n as i64));
        }
        if let Some(d) = &self.disturbance {
            merge(
                &mut doc,
                Some("kernel"),
                "disturbance",
                toml::Value::String(d.clone()),
            );
        }
        if let Some(u) = &self.union_rule {
            merge(
                &mut doc,
                Some("kernel"),
                "union_rule",
                toml::Value::String(u.clone()),
            );
        }
        let base = self.scenario.parent().unwrap_or(Path::new("."));
        Ok(Scenario::parse(
            &toml::to_string(&doc).expect("table serializes"),
            base,
        )?)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        prepare_out(&self.out)
    }
}

fn prepare_out(out: &Path) -> CliResult<&Path> {
    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write_summary(out: &Path, summary: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| CliError::from(Error::Json(e)))?;
    std::fs::write(out.join("summary.json"), format!("{text}\n"))?;
    println!(
        "{}",
        serde_json::to_string(summary).map_err(|e| CliError::from(Error::Json(e)))?
    );
    Ok(())
}

fn read_kernel(path: &Path) -> CliResult<(KernelSet, SafeInputTable)> {
    load_kernel(path).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn kind_name(kind: KernelKind) -> &'static str {
    match kind {
        KernelKind::Viability => "viability",
        KernelKind::Discriminating => "discriminating",
    }
}

fn cmd_modes(c: &Common) -> CliResult<()> {
    let out = c.out_dir()?;
    let sc = c.scenario()?;
    let t0 = Instant::now();
    let setup = Setup::build(&sc)?;
    setup.model.modes.write_csv(out.join("modes.csv"))?;
    setup.model.automaton.write_csv(out.join("automaton.csv"))?;
    let transitions: usize = (0..setup.model.n_modes())
        .map(|q| setup.model.automaton.successors(q).count())
        .sum();
    write_summary(
        out,
        &json!({
            "command": "modes",
            "n_modes": setup.model.n_modes(),
            "transitions": transitions,
            "t_pp": sc.path_model.t_pp,
            "timing": { "wall_seconds": t0.elapsed().as_secs_f64() },
        }),
    )
}

fn cmd_kernel(c: &Common) -> CliResult<()> {
    let out = c.out_dir()?;
    let sc = c.scenario()?;
    let setup = Setup::build(&sc)?;
    let k_h = setup.k_h()?;
    let t0 = Instant::now();
    let result = setup.compute(sc.kernel.kind)?;
    let seconds = t0.elapsed().as_secs_f64();
    let name = kind_name(sc.kernel.kind);
    result.save(out.join(format!("{name}.viak")))?;
    let memory = analytic_memory_bytes(&setup.spec);
    write_summary(
        out,
        &json!({
            "command": "kernel",
            "kind": name,
            "grid_counts": setup.spec.counts,
            "n_modes": setup.spec.n_modes,
            "grid_points": setup.spec.len(),
            "constraint_points": k_h.count(),
            "kernel_points": result.kernel.count(),
            "fraction": fraction(&result.kernel, &k_h)?,
            "iterations": result.iterations,
            "points_per_sweep": result.trace,
            "memory_bytes": memory,
            "memory_mb": memory as f64 / 1e6,
            "timing": { "wall_seconds": seconds },
        }),
    )
}

fn cmd_compare(c: &Common, a: &Path, b: &Path) -> CliResult<()> {
    let out = c.out_dir()?;
    let sc = c.scenario()?;
    let setup = Setup::build(&sc)?;
    let (ka, _) = read_kernel(a)?;
    let (kb, _) = read_kernel(b)?;
    setup.check_kernel(&ka)?;
    setup.check_kernel(&kb)?;
    let k_h = setup.k_h()?;
    let cmp = compare(&ka, &kb, &k_h)?;
    write_summary(
        out,
        &json!({
            "command": "compare",
            "a": a.display().to_string(),
            "b": b.display().to_string(),
            "count_a": cmp.count_a,
            "count_b": cmp.count_b,
            "fraction_a": cmp.fraction_a,
            "fraction_b": cmp.fraction_b,
            "a_not_in_b": cmp.a_not_in_b,
            "b_not_in_a": cmp.b_not_in_a,
            "a_subset_of_b": cmp.a_subset_of_b,
        }),
    )
}

fn cmd_slice(kernel: &Path, phi: f64, mode: usize, out: &Path) -> CliResult<()> {
    let out = prepare_out(out)?;
    let (k, _) = read_kernel(kernel)?;
    let raster = slice(&k, phi, mode)?;
    write_slice_pgm(&raster, out.join("slice.pgm"))?;
    write_slice_csv(&raster, out.join("slice.csv"))?;
    write_summary(
        out,
        &json!({
            "command": "slice",
            "width": raster.width,
            "height": raster.height,
            "i_phi": raster.i_phi,
            "mode": mode,
            "members": raster.count(),
        }),
    )
}

fn cmd_plan(c: &Common, kernel: Option<&Path>, x: PPState) -> CliResult<()> {
    let out = c.out_dir()?;
    let sc = c.scenario()?;
    let setup = Setup::build(&sc)?;
    let t0 = Instant::now();
    let outcome = match kernel {
        Some(path) => {
            let (k, safe) = read_kernel(path)?;
            setup.check_kernel(&k)?;
            plan_kernel(&x, &setup.model, &setup.track, &k, &safe, sc.sim.n_s)?
        }
        None => plan_naive(
            &x,
            &setup.model,
            &setup.track,
            sc.sim.n_s,
            sc.sim.naive_margin,
        )?,
    };
    let seconds = t0.elapsed().as_secs_f64();
    let plan = outcome.plan();
    if let Some(p) = plan {
        write_plan_csv(p, &setup.track, out.join("plan.csv"))?;
    }
    write_summary(
        out,
        &json!({
            "command": "plan",
            "feasible": plan.is_some(),
            "modes": plan.map(|p| p.modes.clone()),
            "progress": plan.map(|p| p.progress),
            "objective": plan.map(|p| p.objective),
            "node_count": outcome.node_count(),
            "pruned": outcome.pruned(),
            "timing": { "wall_seconds": seconds },
        }),
    )
}

fn cmd_simulate(
    c: &Common,
    kernel: Option<&Path>,
    steps: Option<usize>,
    controller: Option<ControllerArg>,
    plant: Option<PlantArg>,
) -> CliResult<()> {
    let out = c.out_dir()?;
    let sc = c.scenario()?;
    let setup = Setup::build(&sc)?;
    let mut sim = sc.sim.clone();
    sim.log_trajectory = true;
    if let Some(s) = steps {
        sim.steps = s;
    }
    if let Some(ctl) = controller {
        sim.controller = match ctl {
            ControllerArg::KernelPlanner => Controller::KernelPlanner,
            ControllerArg::NaivePlanner => Controller::NaivePlanner,
        };
    }
    if let Some(p) = plant {
        sim.plant = match p {
            PlantArg::Full => Plant::Full,
            PlantArg::PathModel => Plant::PathModel,
        };
    }
    let t0 = Instant::now();
    let loaded = match (sim.controller, kernel) {
        (Controller::NaivePlanner, _) => None,
        (Controller::KernelPlanner, Some(path)) => Some(read_kernel(path)?),
        (Controller::KernelPlanner, None) => {
            let r = setup.compute(sc.kernel.kind)?;
            Some((r.kernel, r.safe))
        }
    };
    let report = setup.simulate(&sim, loaded.as_ref().map(|(k, s)| (k, s)))?;
    write_trajectory_csv(&report.trajectory, out.join("trajectory.csv"))?;
    let mut summary = serde_json::to_value(&report).map_err(|e| CliError::from(Error::Json(e)))?;
    summary["command"] = json!("simulate");
    summary["timing"]["wall_seconds"] = json!(t0.elapsed().as_secs_f64());
    write_summary(out, &summary)
}

fn cmd_sweep(c: &Common, matrix: &Path) -> CliResult<()> {
    let out = c.out_dir()?;
    let sc = c.scenario()?;
    let text = std::fs::read_to_string(matrix)
        .map_err(|e| usage(format!("cannot read {}: {e}", matrix.display())))?;
    let m: SweepMatrix = toml::from_str(&text).map_err(|e| CliError::from(Error::Toml(e)))?;
    let track = viability_core::track::Track::load(&sc.track)?;
    let rows = m.rows(&sc);
    let t0 = Instant::now();
    let results = sweep(&sc, &track, &rows);
    write_sweep_csv(&results, out.join("sweep.csv"))?;
    write_summary(
        out,
        &json!({
            "command": "sweep",
            "rows": results.len(),
            "failed_rows": results.iter().filter(|r| r.error.is_some()).count(),
            "timing": { "wall_seconds": t0.elapsed().as_secs_f64() },
        }),
    )
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot set thread count: {e}")))?;
    }
    match &cli.command {
        Command::Modes(c) => cmd_modes(c),
        Command::Kernel(c) => cmd_kernel(c),
        Command::Compare { common, a, b } => cmd_compare(common, a, b),
        Command::Slice {
            kernel,
            phi,
            mode,
            out,
        } => cmd_slice(kernel, *phi, *mode, out),
        Command::Plan {
            common,
            kernel,
            x,
            y,
            phi,
            mode,
        } => cmd_plan(common, kernel.as_deref(), PPState::new(*x, *y, *phi, *mode)),
        Command::Simulate {
            common,
            kernel,
            steps,
            controller,
            plant,
        } => cmd_simulate(common, kernel.as_deref(), *steps, *controller, *plant),
        Command::Sweep { common, matrix } => cmd_sweep(common, matrix),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::FAILURE;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind, "message": e.message }));
            ExitCode::FAILURE
        }
    }
}
