//! Receding-horizon planning over mode sequences: depth-first enumeration of
//! `N_S` segments that maximizes progress along the track, either pruned by a
//! kernel or checked against the track only.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{GridIndex, KernelSet, ModeMask};
use crate::kernel::SafeInputTable;
use crate::ppmodel::{PPState, PathModel};
use crate::track::Track;

/// Default clearance for the track-only planner.
pub const NAIVE_MARGIN: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Mode ids (0-based) of the segments.
    pub modes: Vec<usize>,
    /// Start state followed by the state after each segment.
    pub states: Vec<PPState>,
    /// Progress of the final position.
    pub progress: f64,
    /// Progress gained over the plan plus terminal cost, the maximized value.
    pub objective: f64,
    pub node_count: usize,
    /// Admissible children never generated or never expanded because of the
    /// constraints. Rejected final states save no work and are not counted.
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutcome {
    Feasible(Plan),
    Infeasible { node_count: usize, pruned: usize },
}

impl PlanOutcome {
    pub fn plan(&self) -> Option<&Plan> {
        match self {
            PlanOutcome::Feasible(p) => Some(p),
            PlanOutcome::Infeasible { .. } => None,
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            PlanOutcome::Feasible(p) => p.node_count,
            PlanOutcome::Infeasible { node_count, .. } => *node_count,
        }
    }

    pub fn pruned(&self) -> usize {
        match self {
            PlanOutcome::Feasible(p) => p.pruned,
            PlanOutcome::Infeasible { pruned, .. } => *pruned,
        }
    }
}

/// Value added to the progress of complete sequences; zero by default.
pub type TerminalCost<'a> = &'a (dyn Fn(&PPState) -> f64 + Sync);

fn zero_terminal(_: &PPState) -> f64 {
    0.0
}

struct Search<'a, C, K> {
    model: &'a PathModel,
    track: &'a Track,
    n_s: usize,
    terminal: TerminalCost<'a>,
    candidates: C,
    keep: K,
    /// Skip the subtree of a rejected child instead of enumerating it.
    prune: bool,
    nodes: usize,
    pruned: usize,
    modes: Vec<usize>,
    states: Vec<PPState>,
    best: Option<(f64, Vec<usize>, Vec<PPState>)>,
}

impl<C, K> Search<'_, C, K>
where
    C: Fn(&PPState) -> ModeMask,
    K: Fn(&PPState, &PPState, usize) -> bool,
{
    fn run(&mut self, gain: f64, feasible: bool) -> Result<()> {
        let x = *self.states.last().expect("start state");
        if self.modes.len() == self.n_s {
            let value = gain + (self.terminal)(&x);
            if feasible && self.best.as_ref().is_none_or(|(b, _, _)| value > *b) {
                self.best = Some((value, self.modes.clone(), self.states.clone()));
            }
            return Ok(());
        }
        let s0 = self.track.progress([x.x, x.y]);
        let candidates = (self.candidates)(&x);
        self.pruned += self.model.admissible(x.q)?.len() - candidates.len();
        let leaf = self.modes.len() + 1 == self.n_s;
        for u in candidates.iter() {
            let child = self.model.step(&x, u)?;
            self.nodes += 1;
            let kept = (self.keep)(&x, &child, u);
            if !kept && self.prune {
                self.pruned += usize::from(!leaf);
                continue;
            }
            let d = self
                .track
                .progress_delta(s0, self.track.progress([child.x, child.y]));
            self.modes.push(u);
            self.states.push(child);
            self.run(gain + d, feasible && kept)?;
            self.modes.pop();
            self.states.pop();
        }
        Ok(())
    }

    fn finish(self) -> PlanOutcome {
        match self.best {
            Some((objective, modes, states)) => {
                let last = states.last().expect("start state");
                PlanOutcome::Feasible(Plan {
                    progress: self.track.progress([last.x, last.y]),
                    modes,
                    states,
                    objective,
                    node_count: self.nodes,
                    pruned: self.pruned,
                })
            }
            None => PlanOutcome::Infeasible {
                node_count: self.nodes,
                pruned: self.pruned,
            },
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn search<C, K>(
    x: &PPState,
    model: &PathModel,
    track: &Track,
    n_s: usize,
    terminal: TerminalCost<'_>,
    candidates: C,
    keep: K,
    prune: bool,
) -> Result<PlanOutcome>
where
    C: Fn(&PPState) -> ModeMask,
    K: Fn(&PPState, &PPState, usize) -> bool,
{
    model.admissible(x.q)?;
    let mut s = Search {
        model,
        track,
        n_s,
        terminal,
        candidates,
        keep,
        prune,
        nodes: 0,
        pruned: 0,
        modes: Vec::with_capacity(n_s),
        states: vec![*x],
        best: None,
    };
    s.run(0.0, true)?;
    Ok(s.finish())
}

/// Union of the stored safe inputs over every grid cell containing `x`.
pub fn state_safe_inputs(x: &PPState, kernel: &KernelSet, safe: &SafeInputTable) -> ModeMask {
    let spec = kernel.spec();
    match spec.snap(x.pose(), x.q) {
        Ok(cells) => cells
            .into_iter()
            .filter(|i| kernel.contains(*i))
            .fold(ModeMask::EMPTY, |m, i| m.union(safe.mask(i))),
        Err(_) => ModeMask::EMPTY,
    }
}

/// Whether every grid point within `r` of the state lies in the kernel.
pub fn ball_in_kernel(x: &PPState, kernel: &KernelSet) -> bool {
    let spec = kernel.spec();
    match spec.ball_indices(x.pose(), x.q, spec.r) {
        Ok(ball) => !ball.is_empty() && ball.iter().all(|i| kernel.contains(*i)),
        Err(_) => false,
    }
}

/// Best progress over sequences whose every intermediate state keeps its
/// successor ball inside the kernel; inputs come from the safe table.
pub fn plan_kernel(
    x: &PPState,
    model: &PathModel,
    track: &Track,
    kernel: &KernelSet,
    safe: &SafeInputTable,
    n_s: usize,
) -> Result<PlanOutcome> {
    plan_kernel_with(x, model, track, kernel, safe, n_s, &zero_terminal)
}

pub fn plan_kernel_with(
    x: &PPState,
    model: &PathModel,
    track: &Track,
    kernel: &KernelSet,
    safe: &SafeInputTable,
    n_s: usize,
    terminal: TerminalCost<'_>,
) -> Result<PlanOutcome> {
    search(
        x,
        model,
        track,
        n_s,
        terminal,
        |s| state_safe_inputs(s, kernel, safe),
        |_, child, _| ball_in_kernel(child, kernel),
        true,
    )
}

/// Best progress over sequences whose sampled paths stay `margin` inside the
/// track. Every admissible sequence is enumerated; violating ones are
/// discarded only once complete.
pub fn plan_naive(
    x: &PPState,
    model: &PathModel,
    track: &Track,
    n_s: usize,
    margin: f64,
) -> Result<PlanOutcome> {
    if !track.inside([x.x, x.y], margin) {
        return Ok(PlanOutcome::Infeasible {
            node_count: 0,
            pruned: 0,
        });
    }
    let adm = |s: &PPState| model.admissible(s.q).unwrap_or_default();
    let keep = |from: &PPState, _: &PPState, u: usize| {
        model
            .sample_path(from, u)
            .is_ok_and(|pts| pts.iter().all(|p| track.inside(*p, margin)))
    };
    search(x, model, track, n_s, &zero_terminal, adm, keep, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recovery {
    /// The state already lies in a cell with stored safe inputs.
    Viable,
    /// Plan from this neighbouring grid point instead.
    Surrogate(PPState),
    EmergencyStop,
}

/// Nearest grid point, within one cell of the cells containing `x`, that
/// has stored safe inputs. Ties go to the smallest linear index.
pub fn recover(x: &PPState, kernel: &KernelSet, safe: &SafeInputTable) -> Recovery {
    let spec = kernel.spec();
    let Ok(cells) = spec.snap(x.pose(), x.q) else {
        return Recovery::EmergencyStop;
    };
    if cells
        .iter()
        .any(|i| !crate::kernel::safe_inputs(*i, kernel, safe).is_empty())
    {
        return Recovery::Viable;
    }
    let Ok(ring) = spec.ball_indices(x.pose(), x.q, 3.0 * spec.r) else {
        return Recovery::EmergencyStop;
    };
    let mut best: Option<(f64, GridIndex)> = None;
    for idx in ring {
        if crate::kernel::safe_inputs(idx, kernel, safe).is_empty() {
            continue;
        }
        let c = spec.cell_center(idx.cell());
        let d = spec.distance(&c, &x.pose());
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, idx));
        }
    }
    match best {
        Some((_, idx)) => {
            let c = spec.cell_center(idx.cell());
            Recovery::Surrogate(PPState::new(c[0], c[1], c[2], idx.q))
        }
        None => Recovery::EmergencyStop,
    }
}

/// One row per state: segment index, mode id (1-based, empty for the start),
/// pose and progress.
pub fn write_plan_csv(plan: &Plan, track: &Track, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "segment,mode,x,y,phi,progress")?;
    for (k, s) in plan.states.iter().enumerate() {
        let mode = if k == 0 {
            String::new()
        } else {
            (plan.modes[k - 1] + 1).to_string()
        };
        writeln!(
            out,
            "{k},{mode},{},{},{},{}",
            s.x,
            s.y,
            s.phi,
            track.progress([s.x, s.y])
        )?;
    }
    out.flush()?;
    Ok(())
}
