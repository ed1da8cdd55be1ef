use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ModeMask};
use crate::ppmodel::{advance, PPState, PathModel};
use crate::track::Track;

/// Finite dynamics over a grid, as seen by the kernel algorithms.
///
/// Inputs are mode ids: applying input `u` moves the state into mode slice
/// `u`. The continuous successor of a cell center must not depend on the
/// current mode, which only restricts the admissible inputs.
pub trait GridDynamics: Sync {
    fn spec(&self) -> &GridSpec;

    /// Inputs allowed from mode `q`.
    fn admissible(&self, q: usize) -> ModeMask;

    /// Successor of the center of `cell` under input `u`, or `None` when the
    /// intermediate trajectory violates the constraints.
    fn successor(&self, cell: [usize; 3], u: usize) -> Option<[f64; 3]>;

    /// Half-widths of the additive disturbance box for states in mode `q`.
    fn disturbance_radius(&self, q: usize) -> [f64; 3];

    /// Extra radius, per axis, by which the successor of input `u` may move
    /// independently of the common disturbance. Zero for purely additive
    /// uncertainty.
    fn input_spread(&self, _u: usize) -> [f64; 3] {
        [0.0; 3]
    }
}

/// How discretization error enters the discriminating kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceModel {
    /// Additive box of radius `L r` on every axis, `L` the largest Lipschitz
    /// constant among the inputs admissible in the current mode.
    Lipschitz,
    /// The cell offset itself (radius `r`) is the common disturbance; each
    /// input additionally rotates its own displacement `D_u`, spreading its
    /// successor by `|D_u| r` in `X` and `Y`.
    #[default]
    CellOffset,
}

/// The path-planning model restricted to a track, with per-cell successor
/// tables precomputed.
#[derive(Debug, Clone)]
pub struct PathDynamics {
    spec: GridSpec,
    n_inputs: usize,
    adm: Vec<ModeMask>,
    /// World-frame `(dX, dY, phi')` per heading plane and input.
    moves: Vec<[f64; 3]>,
    /// Per input, one bit per cell: intermediate samples stay inside.
    path_ok: Vec<Vec<u64>>,
    radius: Vec<[f64; 3]>,
    spread: Vec<[f64; 3]>,
    margin: f64,
}

impl PathDynamics {
    pub fn new(
        model: &PathModel,
        track: &Track,
        spec: &GridSpec,
        margin: f64,
        disturbance: DisturbanceModel,
    ) -> Result<Self> {
        let n = model.n_modes();
        if spec.n_modes != n {
            return Err(Error::Mismatch(format!(
                "grid has {} modes, model has {n}",
                spec.n_modes
            )));
        }
        if spec.wrap != [false, false, true] {
            return Err(Error::InvalidGrid(
                "expected bounded X/Y and wrapping heading".into(),
            ));
        }
        if (spec.period(2) - std::f64::consts::TAU).abs() > 1e-9 {
            return Err(Error::InvalidGrid("heading axis must span 2pi".into()));
        }
        let adm: Vec<ModeMask> = (0..n).map(|q| model.admissible(q)).collect::<Result<_>>()?;
        let t = model.config.t_pp;
        let n_phi = spec.counts[2];
        let mut moves = Vec::with_capacity(n_phi * n);
        for ip in 0..n_phi {
            let phi = spec.axis_center(2, ip);
            for m in &model.modes.modes {
                let p = advance([0.0, 0.0, phi], m.v_x, m.v_y, m.omega, t);
                moves.push(p);
            }
        }
        let cells = spec.cells();
        let words = cells.div_ceil(64);
        let path_ok = (0..n)
            .into_par_iter()
            .map(|u| {
                let mut bits = vec![0u64; words];
                for k in 0..cells {
                    let c = spec.cell_center(spec.cell_from_linear(k));
                    let x = PPState {
                        x: c[0],
                        y: c[1],
                        phi: c[2],
                        q: u,
                    };
                    let ok = model
                        .sample_path(&x, u)
                        .map(|pts| pts.iter().all(|p| track.inside(*p, margin)))
                        .unwrap_or(false);
                    if ok {
                        bits[k >> 6] |= 1 << (k & 63);
                    }
                }
                bits
            })
            .collect();
        let r = spec.r;
        let (radius, spread) = match disturbance {
            DisturbanceModel::Lipschitz => {
                let radius = adm
                    .iter()
                    .map(|mask| {
                        let l = mask
                            .iter()
                            .map(|u| model.modes.modes[u].lipschitz)
                            .fold(1.0f64, f64::max);
                        [l * r; 3]
                    })
                    .collect();
                (radius, vec![[0.0; 3]; n])
            }
            DisturbanceModel::CellOffset => {
                let spread = model
                    .modes
                    .modes
                    .iter()
                    .map(|m| {
                        let e = (m.lipschitz - 1.0) * r;
                        [e, e, 0.0]
                    })
                    .collect();
                (vec![[r; 3]; n], spread)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            n_inputs: n,
            adm,
            moves,
            path_ok,
            radius,
            spread,
            margin,
        })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn path_ok(&self, cell: [usize; 3], u: usize) -> bool {
        let k = self.spec.cell_linear(cell);
        self.path_ok[u][k >> 6] >> (k & 63) & 1 == 1
    }

    /// Displacement table entry for heading plane `i_phi` and input `u`.
    pub fn displacement(&self, i_phi: usize, u: usize) -> [f64; 3] {
        self.moves[i_phi * self.n_inputs + u]
    }
}

impl GridDynamics for PathDynamics {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn admissible(&self, q: usize) -> ModeMask {
        self.adm[q]
    }

    fn successor(&self, cell: [usize; 3], u: usize) -> Option<[f64; 3]> {
        if !self.path_ok(cell, u) {
            return None;
        }
        let d = self.displacement(cell[2], u);
        Some([
            self.spec.axis_center(0, cell[0]) + d[0],
            self.spec.axis_center(1, cell[1]) + d[1],
            d[2],
        ])
    }

    fn disturbance_radius(&self, q: usize) -> [f64; 3] {
        self.radius[q]
    }

    fn input_spread(&self, u: usize) -> [f64; 3] {
        self.spread[u]
    }
}
