use serde::{Deserialize, Serialize};

use super::{
    ball_inside, ball_meets, contained_ranges, fixed_point, safe_layers, sweep, GridDynamics,
    KernelKind, KernelResult,
};
use crate::grid::{AxisRange, GridSpec, KernelSet, ModeMask};

/// How the boxes of several inputs at one disturbance grid point are merged
/// into a single box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnionRule {
    /// The largest box; ties go to the smallest input id.
    #[default]
    MaxVolume,
    /// The common part of all boxes.
    Intersection,
}

/// Axis-aligned box in disturbance space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl VBox {
    pub fn is_empty(&self) -> bool {
        (0..3).any(|j| self.lower[j] > self.upper[j])
    }

    pub fn contains(&self, v: &[f64; 3]) -> bool {
        (0..3).all(|j| self.lower[j] <= v[j] && v[j] <= self.upper[j])
    }

    /// Product of side lengths over the listed axes.
    pub fn volume(&self, axes: &[bool; 3]) -> f64 {
        (0..3)
            .filter(|&j| axes[j])
            .map(|j| (self.upper[j] - self.lower[j]).max(0.0))
            .product()
    }

    pub fn intersect(&self, other: &VBox) -> VBox {
        VBox {
            lower: std::array::from_fn(|j| self.lower[j].max(other.lower[j])),
            upper: std::array::from_fn(|j| self.upper[j].min(other.upper[j])),
        }
    }
}

/// Disturbance box `[-rho, rho]` with its grid: `ceil(rho_j / r) + 1` evenly
/// spaced points per axis including both faces, or the single point 0 when
/// `rho_j = 0`. Neighbouring points are at most `2r` apart.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceGrid {
    pub radius: [f64; 3],
    pub points: [Vec<f64>; 3],
}

impl DisturbanceGrid {
    pub fn new(radius: [f64; 3], r: f64) -> Self {
        let points = std::array::from_fn(|j| {
            let rho = radius[j];
            if rho <= 0.0 {
                return vec![0.0];
            }
            let m = (rho / r).ceil() as usize + 1;
            (0..m)
                .map(|k| {
                    if k + 1 == m {
                        rho
                    } else {
                        -rho + 2.0 * rho * k as f64 / (m - 1) as f64
                    }
                })
                .collect()
        });
        Self { radius, points }
    }

    pub fn counts(&self) -> [usize; 3] {
        std::array::from_fn(|j| self.points[j].len())
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Axes with a nonzero extent.
    pub fn active(&self) -> [bool; 3] {
        std::array::from_fn(|j| self.points[j].len() > 1)
    }

    /// Point `k` in row-major order, first axis fastest.
    pub fn point(&self, k: usize) -> [f64; 3] {
        let [a, b, _] = self.counts();
        let idx = [k % a, (k / a) % b, k / (a * b)];
        std::array::from_fn(|j| self.points[j][idx[j]])
    }

    fn linear(&self, idx: [usize; 3]) -> usize {
        let [a, b, _] = self.counts();
        (idx[2] * b + idx[1]) * a + idx[0]
    }
}

/// Disturbances `v` that keep the successor ball of radius `r` inside the
/// grid points enumerated by `ranges`, given that `ranges` came from the
/// ball of radius `r + eta` around `f + v_h`. Bounds use unwrapped grid
/// coordinates and are clamped to `[-rho, rho]`.
pub fn input_box(
    spec: &GridSpec,
    f: &[f64; 3],
    ranges: &[AxisRange; 3],
    eta: [f64; 3],
    rho: [f64; 3],
) -> VBox {
    let h = spec.spacing();
    let r = spec.r;
    let mut b = VBox {
        lower: [0.0; 3],
        upper: [0.0; 3],
    };
    for j in 0..3 {
        if spec.wrap[j] && ranges[j].len >= spec.counts[j] {
            b.lower[j] = -rho[j];
            b.upper[j] = rho[j];
            continue;
        }
        let c_lo = spec.lo[j] + ranges[j].start as f64 * h;
        let c_hi = c_lo + (ranges[j].len - 1) as f64 * h;
        b.lower[j] = (c_lo - r - f[j] + eta[j]).max(-rho[j]);
        b.upper[j] = (c_hi + r - f[j] - eta[j]).min(rho[j]);
    }
    b
}

/// Slack for boxes that touch: neighbouring grid cells give boxes whose
/// shared face is computed from different grid coordinates.
pub const TOUCH_TOL: f64 = 1e-9;

/// Whether the boxes, one per disturbance grid point, jointly cover the
/// disturbance box. Each box must contain its own grid point. Every cell of
/// the disturbance grid is covered by the boxes at its corners when, along
/// each axis, every box from the upper face starts no later than every box
/// from the lower face ends.
pub fn covers(grid: &DisturbanceGrid, boxes: &[Option<VBox>]) -> bool {
    let counts = grid.counts();
    if boxes.len() != grid.len() {
        return false;
    }
    for (k, b) in boxes.iter().enumerate() {
        let Some(b) = b else { return false };
        if !b.contains(&grid.point(k)) {
            return false;
        }
    }
    let active = grid.active();
    let cells: [usize; 3] = std::array::from_fn(|j| counts[j].saturating_sub(1).max(1));
    for c2 in 0..cells[2] {
        for c1 in 0..cells[1] {
            for c0 in 0..cells[0] {
                let base = [c0, c1, c2];
                for j in (0..3).filter(|&j| active[j]) {
                    let mut hi_lower = f64::NEG_INFINITY;
                    let mut lo_upper = f64::INFINITY;
                    for corner in 0..8usize {
                        if (0..3).any(|a| !active[a] && corner >> a & 1 == 1) {
                            continue;
                        }
                        let idx = std::array::from_fn(|a| base[a] + (corner >> a & 1));
                        let b = boxes[grid.linear(idx)].expect("checked above");
                        if corner >> j & 1 == 1 {
                            hi_lower = hi_lower.max(b.lower[j]);
                        } else {
                            lo_upper = lo_upper.min(b.upper[j]);
                        }
                    }
                    if hi_lower > lo_upper + TOUCH_TOL {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Per-cell evaluation of one input against the current set.
struct InputEval {
    robust: bool,
    boxes: Vec<Option<VBox>>,
}

fn evaluate_input(
    dynamics: &dyn GridDynamics,
    current: &KernelSet,
    f: &[f64; 3],
    u: usize,
    grid: &DisturbanceGrid,
) -> InputEval {
    let spec = dynamics.spec();
    let eta = dynamics.input_spread(u);
    let r = spec.r;
    let outer: [f64; 3] = std::array::from_fn(|j| grid.radius[j] + r + eta[j]);
    if contained_ranges(spec, f, outer).is_some_and(|rg| ball_inside(current, &rg, u)) {
        return InputEval {
            robust: true,
            boxes: Vec::new(),
        };
    }
    let radius: [f64; 3] = std::array::from_fn(|j| r + eta[j]);
    let boxes = (0..grid.len())
        .map(|k| {
            let v = grid.point(k);
            let p: [f64; 3] = std::array::from_fn(|j| f[j] + v[j]);
            let ranges = contained_ranges(spec, &p, radius)?;
            ball_inside(current, &ranges, u).then(|| input_box(spec, f, &ranges, eta, grid.radius))
        })
        .collect();
    InputEval {
        robust: false,
        boxes,
    }
}

/// Decides one grid point given the cached per-input evaluations.
fn point_survives(evals: &[(usize, &InputEval)], grid: &DisturbanceGrid, rule: UnionRule) -> bool {
    if evals.iter().any(|(_, e)| e.robust) {
        return true;
    }
    if evals
        .iter()
        .any(|(_, e)| e.boxes.iter().all(Option::is_some) && covers(grid, &e.boxes))
    {
        return true;
    }
    let active = grid.active();
    let merged: Vec<Option<VBox>> = (0..grid.len())
        .map(|k| {
            let mut acc: Option<VBox> = None;
            let mut best = f64::NEG_INFINITY;
            for (_, e) in evals {
                let Some(b) = e.boxes[k] else { continue };
                match rule {
                    UnionRule::MaxVolume => {
                        let vol = b.volume(&active);
                        if vol > best {
                            best = vol;
                            acc = Some(b);
                        }
                    }
                    UnionRule::Intersection => acc = Some(acc.map_or(b, |a| a.intersect(&b))),
                }
            }
            acc.filter(|b| !b.is_empty())
        })
        .collect();
    covers(grid, &merged)
}

/// Modified discriminating kernel: a point survives when, for every
/// disturbance in the box of its mode, some admissible input keeps the
/// successor ball inside the current set. Continuous disturbances are
/// handled through the boxes of disturbances that share a successor set.
pub fn disc_kernel_modified(
    k_h: &KernelSet,
    dynamics: &dyn GridDynamics,
    rule: UnionRule,
) -> KernelResult {
    let spec = dynamics.spec();
    let n = spec.n_modes;
    let grids: Vec<DisturbanceGrid> = (0..n)
        .map(|q| DisturbanceGrid::new(dynamics.disturbance_radius(q), spec.r))
        .collect();
    let step = |current: &KernelSet| {
        sweep(current, |cell, alive| {
            let successors: Vec<Option<[f64; 3]>> =
                (0..n).map(|u| dynamics.successor(cell, u)).collect();
            // evaluations depend on the disturbance radius only, so modes
            // sharing a radius share them
            let mut cache: Vec<([f64; 3], Vec<Option<InputEval>>)> = Vec::new();
            alive
                .iter()
                .filter(|&q| {
                    let grid = &grids[q];
                    let slot = match cache.iter().position(|(rho, _)| *rho == grid.radius) {
                        Some(s) => s,
                        None => {
                            cache.push((grid.radius, (0..n).map(|_| None).collect()));
                            cache.len() - 1
                        }
                    };
                    let evals = &mut cache[slot].1;
                    let adm: Vec<usize> = dynamics
                        .admissible(q)
                        .iter()
                        .filter(|&u| successors[u].is_some())
                        .collect();
                    for &u in &adm {
                        if evals[u].is_none() {
                            let f = successors[u].expect("filtered");
                            let e = evaluate_input(dynamics, current, &f, u, grid);
                            let robust = e.robust;
                            evals[u] = Some(e);
                            if robust {
                                return true;
                            }
                        } else if evals[u].as_ref().is_some_and(|e| e.robust) {
                            return true;
                        }
                    }
                    let view: Vec<(usize, &InputEval)> = adm
                        .iter()
                        .map(|&u| (u, evals[u].as_ref().expect("evaluated")))
                        .collect();
                    point_survives(&view, grid, rule)
                })
                .collect()
        })
    };
    let (kernel, iterations, trace) = fixed_point(k_h, step);
    let safe = safe_layers(&kernel, |cell, q| {
        let rho = dynamics.disturbance_radius(q);
        dynamics
            .admissible(q)
            .iter()
            .filter(|&u| {
                let eta = dynamics.input_spread(u);
                let radius = std::array::from_fn(|j| rho[j] + spec.r + eta[j]);
                dynamics
                    .successor(cell, u)
                    .and_then(|f| spec.ball_ranges(&f, radius))
                    .is_some_and(|rg| ball_meets(&kernel, &rg, u))
            })
            .collect::<ModeMask>()
    });
    KernelResult {
        kind: KernelKind::Discriminating,
        kernel,
        safe,
        iterations,
        trace,
    }
}
