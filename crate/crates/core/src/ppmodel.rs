//! Discrete-time path-planning model: each segment holds one mode's body
//! velocities constant for `T_pp` seconds, so the pose follows a straight
//! line or a circular arc in closed form.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ModeMask;
use crate::vehicle::{Mode, ModeTable, TransitionAutomaton};

/// Below this `|omega * T|` the arc terms use their Taylor expansion.
const SMALL_TURN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PPState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub q: usize,
}

impl PPState {
    pub fn new(x: f64, y: f64, phi: f64, q: usize) -> Self {
        Self {
            x,
            y,
            phi: wrap_angle(phi),
            q,
        }
    }

    pub fn pose(&self) -> [f64; 3] {
        [self.x, self.y, self.phi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PPConfig {
    pub t_pp: f64,
    pub n_samples: usize,
}

impl PPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_pp > 0.0) || self.n_samples < 2 {
            return Err(Error::InvalidParams(
                "need T_pp > 0 and at least two path samples".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PPConfig {
    fn default() -> Self {
        Self {
            t_pp: 0.16,
            n_samples: 9,
        }
    }
}

/// Maps an angle into `[0, 2pi)`.
pub fn wrap_angle(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Body-frame displacement `(dx, dy)` and heading change after driving with
/// constant body velocities for `t` seconds.
pub fn body_displacement(v_x: f64, v_y: f64, omega: f64, t: f64) -> [f64; 3] {
    let a = omega * t;
    // s = sin(a) / omega, c = (1 - cos(a)) / omega = 2 sin^2(a / 2) / omega
    let (s, c) = if a.abs() < SMALL_TURN {
        let a2 = a * a;
        (
            t * (1.0 - a2 / 6.0 + a2 * a2 / 120.0),
            t * a * (0.5 - a2 / 24.0),
        )
    } else {
        let h = (0.5 * a).sin();
        (a.sin() / omega, 2.0 * h * h / omega)
    };
    [v_x * s - v_y * c, v_x * c + v_y * s, a]
}

/// Pose after `t` seconds in a mode, heading wrapped into `[0, 2pi)`.
pub fn advance(pose: [f64; 3], v_x: f64, v_y: f64, omega: f64, t: f64) -> [f64; 3] {
    let [dx, dy, dphi] = body_displacement(v_x, v_y, omega, t);
    let (s, c) = pose[2].sin_cos();
    [
        pose[0] + c * dx - s * dy,
        pose[1] + s * dx + c * dy,
        wrap_angle(pose[2] + dphi),
    ]
}

/// Infinity-norm Lipschitz bound `1 + |D|` of the one-step pose map, where
/// `D` is the body displacement over `t`. Position and heading enter with
/// unit slope; the heading additionally rotates `D`, and
/// `max_phi |d/dphi (R(phi) D)_i| = |D|`.
pub fn lipschitz_of(v_x: f64, v_y: f64, omega: f64, t: f64) -> f64 {
    let [dx, dy, _] = body_displacement(v_x, v_y, omega, t);
    1.0 + dx.hypot(dy)
}

/// Mode table, automaton and timing bundled as one discrete-time model.
#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    pub modes: ModeTable,
    pub automaton: TransitionAutomaton,
    pub config: PPConfig,
    adm: Vec<ModeMask>,
}

impl PathModel {
    pub fn new(modes: ModeTable, automaton: TransitionAutomaton, config: PPConfig) -> Result<Self> {
        config.validate()?;
        if modes.is_empty() {
            return Err(Error::InvalidParams("empty mode table".into()));
        }
        if automaton.len() != modes.len() {
            return Err(Error::Mismatch(format!(
                "automaton has {} modes, table has {}",
                automaton.len(),
                modes.len()
            )));
        }
        if modes.len() > crate::grid::MAX_MODES {
            return Err(Error::InvalidParams("too many modes".into()));
        }
        automaton.validate()?;
        let modes = modes.with_segment_time(config.t_pp);
        let adm = (0..modes.len())
            .map(|q| automaton.successors(q).collect())
            .collect();
        Ok(Self {
            modes,
            automaton,
            config,
            adm,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn mode(&self, u: usize) -> Result<&Mode> {
        self.modes.get(u)
    }

    /// Inputs reachable from the current mode.
    pub fn admissible(&self, q: usize) -> Result<ModeMask> {
        self.adm.get(q).copied().ok_or(Error::InvalidMode(q))
    }

    pub fn lipschitz(&self, u: usize) -> Result<f64> {
        Ok(self.mode(u)?.lipschitz)
    }

    /// One segment of duration `t` in mode `u`.
    pub fn step_for(&self, x: &PPState, u: usize, t: f64) -> Result<PPState> {
        let m = self.mode(u)?;
        let p = advance(x.pose(), m.v_x, m.v_y, m.omega, t);
        Ok(PPState {
            x: p[0],
            y: p[1],
            phi: p[2],
            q: u,
        })
    }

    pub fn step(&self, x: &PPState, u: usize) -> Result<PPState> {
        self.step_for(x, u, self.config.t_pp)
    }

    /// `n` equally time-spaced positions of the segment including both ends.
    pub fn sample_path_for(
        &self,
        x: &PPState,
        u: usize,
        t: f64,
        n: usize,
    ) -> Result<Vec<[f64; 2]>> {
        let m = self.mode(u)?;
        if n < 2 {
            return Err(Error::InvalidParams("need at least two samples".into()));
        }
        Ok((0..n)
            .map(|k| {
                let p = advance(
                    x.pose(),
                    m.v_x,
                    m.v_y,
                    m.omega,
                    t * k as f64 / (n - 1) as f64,
                );
                [p[0], p[1]]
            })
            .collect())
    }

    pub fn sample_path(&self, x: &PPState, u: usize) -> Result<Vec<[f64; 2]>> {
        self.sample_path_for(x, u, self.config.t_pp, self.config.n_samples)
    }
}
