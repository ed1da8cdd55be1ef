//! Closed-loop simulation: receding-horizon planner, tracking regulator,
//! input quantization and either the full bicycle model or the path-planning
//! model as plant.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{track_follow_control, LqrWeights, RefPoint};
use crate::error::{Error, Result};
use crate::grid::KernelSet;
use crate::kernel::SafeInputTable;
use crate::planner::{plan_kernel, plan_naive, recover, state_safe_inputs, PlanOutcome, Recovery};
use crate::ppmodel::{advance, PPState, PathModel};
use crate::track::{LapCounter, Track};
use crate::vehicle::{CarParams, FullState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    KernelPlanner,
    NaivePlanner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Plant {
    /// Bicycle model with Pacejka tires.
    Full,
    /// The path-planning model itself; no model mismatch.
    PathModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt_control: f64,
    pub steps: usize,
    /// Round inputs to 256 levels over their bounds.
    pub quantize: bool,
    pub controller: Controller,
    pub plant: Plant,
    pub n_s: usize,
    /// A step counts as a violation when the clearance is below this.
    pub violation_margin: f64,
    /// Clearance required by the track-only planner.
    pub naive_margin: f64,
    pub substeps: usize,
    pub lqr: LqrWeights,
    /// Scales the plant's drivetrain gains to create model mismatch.
    pub drive_scale: f64,
    /// Arclength of the start position.
    pub start_progress: f64,
    /// Also run the track-only planner at every replan of the kernel
    /// planner and record both node counts.
    pub compare_nodes: bool,
    pub log_trajectory: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_control: 0.02,
            steps: 10_000,
            quantize: true,
            controller: Controller::KernelPlanner,
            plant: Plant::Full,
            n_s: 3,
            violation_margin: 0.005,
            naive_margin: crate::planner::NAIVE_MARGIN,
            substeps: 4,
            lqr: LqrWeights::default(),
            drive_scale: 1.0,
            start_progress: 0.0,
            compare_nodes: false,
            log_trajectory: false,
        }
    }
}

impl SimConfig {
    /// Control periods per planning segment.
    pub fn period_ratio(&self, t_pp: f64) -> Result<usize> {
        if !(self.dt_control > 0.0) || self.substeps == 0 {
            return Err(Error::InvalidParams(
                "need dt_control > 0 and at least one substep".into(),
            ));
        }
        let k = (t_pp / self.dt_control).round();
        if k < 1.0 || (k * self.dt_control - t_pp).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "T_pp = {t_pp} is not an integer multiple of dt_control = {}",
                self.dt_control
            )));
        }
        Ok(k as usize)
    }
}

/// Planner and kernel inputs of a run.
#[derive(Clone, Copy)]
pub struct SimContext<'a> {
    pub params: &'a CarParams,
    pub model: &'a PathModel,
    pub track: &'a Track,
    pub kernel: Option<(&'a KernelSet, &'a SafeInputTable)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub state: FullState,
    pub delta: f64,
    pub duty: f64,
    pub progress: f64,
}

/// Node counts of the kernel planner and the track-only planner from the
/// same state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeComparison {
    pub kernel: usize,
    pub naive: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub planner_ms_median: f64,
    pub planner_ms_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: usize,
    pub laps: usize,
    pub lap_times: Vec<f64>,
    pub mean_lap_time: Option<f64>,
    pub median_lap_time: Option<f64>,
    pub violations: usize,
    pub min_clearance: f64,
    pub replans: usize,
    pub infeasible_replans: usize,
    pub recoveries: usize,
    pub emergency_stops: usize,
    pub stopped_steps: usize,
    pub node_count_total: usize,
    pub node_comparisons: Vec<NodeComparison>,
    pub final_progress: f64,
    /// Wall-clock figures; the only fields that vary between identical runs.
    pub timing: Timing,
    #[serde(skip)]
    pub trajectory: Vec<LogRow>,
}

/// Rounds to the nearest of 256 evenly spaced levels over `[lo, hi]`.
pub fn quantize(v: f64, lo: f64, hi: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    lo + (t * 255.0).round() / 255.0 * (hi - lo)
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Start mode: among modes whose cell at the start pose is usable, the one
/// turning least, then the fastest, then the lowest id.
fn start_mode(ctx: &SimContext, cfg: &SimConfig, pose: [f64; 3]) -> Option<usize> {
    let n = ctx.model.n_modes();
    let usable = |q: usize| match (cfg.controller, ctx.kernel) {
        (Controller::KernelPlanner, Some((k, safe))) => {
            !state_safe_inputs(&PPState::new(pose[0], pose[1], pose[2], q), k, safe).is_empty()
        }
        _ => ctx.track.inside([pose[0], pose[1]], cfg.naive_margin),
    };
    let modes = &ctx.model.modes.modes;
    (0..n).filter(|&q| usable(q)).min_by(|&a, &b| {
        let (ma, mb) = (&modes[a], &modes[b]);
        ma.omega
            .abs()
            .total_cmp(&mb.omega.abs())
            .then(mb.v_x.total_cmp(&ma.v_x))
            .then(a.cmp(&b))
    })
}

/// Reference samples every `dt` along the mode sequence from `pose`.
fn build_reference(
    model: &PathModel,
    pose: [f64; 3],
    modes: &[usize],
    per_segment: usize,
    dt: f64,
) -> Vec<RefPoint> {
    let mut out = Vec::with_capacity(modes.len() * per_segment + 1);
    let mut start = pose;
    for &u in modes {
        let m = &model.modes.modes[u];
        for j in 0..per_segment {
            let p = advance(start, m.v_x, m.v_y, m.omega, j as f64 * dt);
            out.push(RefPoint {
                state: FullState {
                    x: p[0],
                    y: p[1],
                    phi: p[2],
                    v_x: m.v_x,
                    v_y: m.v_y,
                    omega: m.omega,
                },
                input: [m.delta, m.duty],
            });
        }
        start = advance(start, m.v_x, m.v_y, m.omega, per_segment as f64 * dt);
    }
    let last = modes.last().map(|&u| &model.modes.modes[u]);
    let (vel, input) = last.map_or(([0.0; 3], [0.0; 2]), |m| {
        ([m.v_x, m.v_y, m.omega], [m.delta, m.duty])
    });
    out.push(RefPoint {
        state: FullState {
            x: start[0],
            y: start[1],
            phi: start[2],
            v_x: vel[0],
            v_y: vel[1],
            omega: vel[2],
        },
        input,
    });
    out
}

/// Runs the closed loop for `cfg.steps` control periods.
pub fn run(ctx: &SimContext, cfg: &SimConfig) -> Result<RunReport> {
    let mut report = RunReport {
        min_clearance: f64::INFINITY,
        ..RunReport::default()
    };
    if cfg.steps == 0 {
        report.min_clearance = 0.0;
        return Ok(report);
    }
    let t_pp = ctx.model.config.t_pp;
    let per_segment = cfg.period_ratio(t_pp)?;
    if cfg.controller == Controller::KernelPlanner && ctx.kernel.is_none() {
        return Err(Error::InvalidParams(
            "the kernel planner needs a kernel".into(),
        ));
    }
    if let Some((k, _)) = ctx.kernel {
        if k.spec().n_modes != ctx.model.n_modes() {
            return Err(Error::Mismatch(
                "kernel and mode table disagree on the mode count".into(),
            ));
        }
    }
    let p = ctx.params;
    let mut plant_params = p.clone();
    plant_params.cm1 *= cfg.drive_scale;
    plant_params.cm2 *= cfg.drive_scale;

    let s0 = cfg.start_progress.rem_euclid(ctx.track.total_length());
    let xy = ctx.track.point_at(s0);
    let pose = [
        xy[0],
        xy[1],
        crate::ppmodel::wrap_angle(ctx.track.heading_at(s0)),
    ];
    let q0 = start_mode(ctx, cfg, pose)
        .ok_or_else(|| Error::InvalidParams("no usable mode at the start pose".into()))?;
    let m0 = &ctx.model.modes.modes[q0];
    let mut state = FullState {
        x: pose[0],
        y: pose[1],
        phi: pose[2],
        v_x: m0.v_x,
        v_y: m0.v_y,
        omega: m0.omega,
    };
    let mut q = q0;
    let mut u_prev = [m0.delta, m0.duty];
    let mut reference: Vec<RefPoint> = Vec::new();
    let mut stopped = false;
    let mut seg_start = PPState::new(pose[0], pose[1], pose[2], q0);
    let mut seg_mode = q0;
    let mut laps = LapCounter::new(ctx.track.total_length());
    laps.update(ctx.track.progress(xy));
    let mut last_lap_t = 0.0;
    let mut plan_ms = Vec::new();

    for k in 0..cfg.steps {
        let j = k % per_segment;
        if j == 0 {
            report.replans += 1;
            let x = PPState::new(state.x, state.y, state.phi, q);
            let t0 = Instant::now();
            let outcome = plan_step(ctx, cfg, &x, &mut report)?;
            plan_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            if cfg.compare_nodes && cfg.controller == Controller::KernelPlanner {
                let naive = plan_naive(&x, ctx.model, ctx.track, cfg.n_s, cfg.naive_margin)?;
                report.node_comparisons.push(NodeComparison {
                    kernel: outcome.as_ref().map_or(0, |o| o.node_count()),
                    naive: naive.node_count(),
                    pruned: outcome.as_ref().map_or(0, |o| o.pruned()),
                });
            }
            match outcome.as_ref().and_then(|o| o.plan()) {
                Some(plan) if !plan.modes.is_empty() => {
                    report.node_count_total += plan.node_count;
                    stopped = false;
                    q = plan.modes[0];
                    // after a recovery the plan starts at the surrogate state
                    reference = build_reference(
                        ctx.model,
                        plan.states[0].pose(),
                        &plan.modes,
                        per_segment,
                        cfg.dt_control,
                    );
                    seg_start = x;
                    seg_mode = q;
                }
                _ => {
                    report.node_count_total += outcome.as_ref().map_or(0, |o| o.node_count());
                    if !stopped {
                        report.emergency_stops += 1;
                    }
                    stopped = true;
                    reference.clear();
                }
            }
        }

        let (delta, duty) = if stopped {
            report.stopped_steps += 1;
            p.clamp_inputs(0.0, 0.0)
        } else {
            let r = &reference[j..];
            let u =
                track_follow_control(p, &state, u_prev, r, cfg.dt_control, cfg.substeps, &cfg.lqr);
            (u[0], u[1])
        };
        let (delta, duty) = if cfg.quantize {
            (
                quantize(delta, p.delta_min, p.delta_max),
                quantize(duty, p.duty_min, p.duty_max),
            )
        } else {
            (delta, duty)
        };
        u_prev = [delta, duty];

        state = match cfg.plant {
            Plant::Full => crate::control::plant_step(
                &plant_params,
                &state,
                [delta, duty],
                cfg.dt_control,
                cfg.substeps,
            ),
            Plant::PathModel => {
                if stopped {
                    return Err(Error::InvalidParams("path-model plant cannot stop".into()));
                }
                let m = &ctx.model.modes.modes[seg_mode];
                let pos = if j + 1 == per_segment {
                    ctx.model.step(&seg_start, seg_mode)?.pose()
                } else {
                    advance(
                        seg_start.pose(),
                        m.v_x,
                        m.v_y,
                        m.omega,
                        (j + 1) as f64 * cfg.dt_control,
                    )
                };
                FullState {
                    x: pos[0],
                    y: pos[1],
                    phi: pos[2],
                    v_x: m.v_x,
                    v_y: m.v_y,
                    omega: m.omega,
                }
            }
        };
        if !state.is_finite() {
            return Err(Error::InvalidParams(format!(
                "plant state diverged at step {k}"
            )));
        }
        state.phi = crate::ppmodel::wrap_angle(state.phi);

        let t = (k + 1) as f64 * cfg.dt_control;
        let clearance = ctx.track.boundary_clearance([state.x, state.y]);
        report.min_clearance = report.min_clearance.min(clearance);
        if clearance < cfg.violation_margin {
            report.violations += 1;
        }
        let s = ctx.track.progress([state.x, state.y]);
        if laps.update(s) {
            report.lap_times.push(t - last_lap_t);
            last_lap_t = t;
        }
        report.final_progress = s;
        if cfg.log_trajectory {
            report.trajectory.push(LogRow {
                t,
                state,
                delta,
                duty,
                progress: s,
            });
        }
    }
    report.steps = cfg.steps;
    report.laps = laps.laps();
    if !report.lap_times.is_empty() {
        report.mean_lap_time =
            Some(report.lap_times.iter().sum::<f64>() / report.lap_times.len() as f64);
        report.median_lap_time = median(&mut report.lap_times.clone());
    }
    report.timing = Timing {
        planner_ms_median: median(&mut plan_ms.clone()).unwrap_or(0.0),
        planner_ms_max: plan_ms.iter().copied().fold(0.0, f64::max),
    };
    Ok(report)
}

/// One replan including recovery; `None` means emergency stop.
fn plan_step(
    ctx: &SimContext,
    cfg: &SimConfig,
    x: &PPState,
    report: &mut RunReport,
) -> Result<Option<PlanOutcome>> {
    match (cfg.controller, ctx.kernel) {
        (Controller::KernelPlanner, Some((kernel, safe))) => {
            let out = plan_kernel(x, ctx.model, ctx.track, kernel, safe, cfg.n_s)?;
            if out.plan().is_some() {
                return Ok(Some(out));
            }
            report.infeasible_replans += 1;
            match recover(x, kernel, safe) {
                Recovery::Surrogate(s) => {
                    report.recoveries += 1;
                    let retry = plan_kernel(&s, ctx.model, ctx.track, kernel, safe, cfg.n_s)?;
                    Ok(retry.plan().is_some().then_some(retry))
                }
                Recovery::Viable | Recovery::EmergencyStop => Ok(None),
            }
        }
        _ => {
            let out = plan_naive(x, ctx.model, ctx.track, cfg.n_s, cfg.naive_margin)?;
            if out.plan().is_none() {
                report.infeasible_replans += 1;
                return Ok(None);
            }
            Ok(Some(out))
        }
    }
}

/// Trajectory log as CSV: time, full state, inputs and progress.
pub fn write_trajectory_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,x,y,phi,v_x,v_y,omega,delta,duty,progress")?;
    for r in rows {
        let s = r.state;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t, s.x, s.y, s.phi, s.v_x, s.v_y, s.omega, r.delta, r.duty, r.progress
        )?;
    }
    out.flush()?;
    Ok(())
}
