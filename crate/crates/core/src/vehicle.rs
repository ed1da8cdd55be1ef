//! Nonlinear bicycle model with Pacejka lateral tire forces, the stationary
//! velocity manifold and mode-transition feasibility.
//!
//! State is `(X, Y, phi, v_x, v_y, omega)`, inputs are steering angle `delta`
//! and motor duty cycle `d`. Modes are stationary points of the velocity
//! sub-dynamics: `(v_x, v_y, omega)` with inputs `(delta, d)` such that all
//! three accelerations vanish.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppmodel;

/// Physical parameters of the car.
///
/// Stored on disk as a flat key-value TOML file, one key per field.
/// The drivetrain force is `F_rx = (cm1 - cm2 * v_x) * d - cr0 - cr2 * v_x^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub inertia_z: f64,
    /// CoG to front axle, m
    pub l_f: f64,
    /// CoG to rear axle, m
    pub l_r: f64,
    pub front_b: f64,
    pub front_c: f64,
    pub front_d: f64,
    pub rear_b: f64,
    pub rear_c: f64,
    pub rear_d: f64,
    pub cm1: f64,
    pub cm2: f64,
    pub cr0: f64,
    pub cr2: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub duty_min: f64,
    pub duty_max: f64,
}

impl Default for CarParams {
    /// A 1:43 scale RC car.
    fn default() -> Self {
        Self {
            mass: 0.041,
            inertia_z: 27.8e-6,
            l_f: 0.029,
            l_r: 0.033,
            front_b: 2.579,
            front_c: 1.2,
            front_d: 0.192,
            rear_b: 3.3852,
            rear_c: 1.2691,
            rear_d: 0.1737,
            cm1: 0.287,
            cm2: 0.0545,
            cr0: 0.0518,
            cr2: 0.00035,
            delta_min: -0.35,
            delta_max: 0.35,
            duty_min: 0.0,
            duty_max: 1.0,
        }
    }
}

impl CarParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("inertia_z", self.inertia_z),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.front_d < 0.0 || self.rear_d < 0.0 {
            return Err(Error::InvalidParams("tire peak D must be >= 0".into()));
        }
        if !(self.delta_min < self.delta_max) || !(self.duty_min < self.duty_max) {
            return Err(Error::InvalidParams("empty input bounds".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let params: CarParams = toml::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Longitudinal drivetrain force at the rear wheel.
    pub fn drive_force(&self, v_x: f64, duty: f64) -> f64 {
        (self.cm1 - self.cm2 * v_x) * duty - self.cr0 - self.cr2 * v_x * v_x
    }

    /// Duty cycle that balances drag at constant `v_x` (straight driving).
    pub fn cruise_duty(&self, v_x: f64) -> f64 {
        (self.cr0 + self.cr2 * v_x * v_x) / (self.cm1 - self.cm2 * v_x)
    }

    pub fn front_slip(&self, v_x: f64, v_y: f64, omega: f64, delta: f64) -> f64 {
        delta - (omega * self.l_f + v_y).atan2(v_x)
    }

    pub fn rear_slip(&self, v_x: f64, v_y: f64, omega: f64) -> f64 {
        (omega * self.l_r - v_y).atan2(v_x)
    }

    pub fn front_lateral_force(&self, alpha: f64) -> f64 {
        self.front_d * (self.front_c * (self.front_b * alpha).atan()).sin()
    }

    pub fn rear_lateral_force(&self, alpha: f64) -> f64 {
        self.rear_d * (self.rear_c * (self.rear_b * alpha).atan()).sin()
    }

    pub fn clamp_inputs(&self, delta: f64, duty: f64) -> (f64, f64) {
        (
            delta.clamp(self.delta_min, self.delta_max),
            duty.clamp(self.duty_min, self.duty_max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FullState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

impl FullState {
    pub fn to_array(self) -> [f64; 6] {
        [self.x, self.y, self.phi, self.v_x, self.v_y, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            phi: a[2],
            v_x: a[3],
            v_y: a[4],
            omega: a[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    fn axpy(self, h: f64, k: FullState) -> FullState {
        let (a, b) = (self.to_array(), k.to_array());
        FullState::from_array(std::array::from_fn(|i| a[i] + h * b[i]))
    }
}

/// Accelerations `(dv_x, dv_y, domega)` of the velocity sub-dynamics.
pub fn velocity_derivative(
    p: &CarParams,
    v_x: f64,
    v_y: f64,
    omega: f64,
    delta: f64,
    duty: f64,
) -> [f64; 3] {
    let f_fy = p.front_lateral_force(p.front_slip(v_x, v_y, omega, delta));
    let f_ry = p.rear_lateral_force(p.rear_slip(v_x, v_y, omega));
    let f_rx = p.drive_force(v_x, duty);
    let (s, c) = delta.sin_cos();
    [
        (f_rx - f_fy * s + p.mass * v_y * omega) / p.mass,
        (f_ry + f_fy * c - p.mass * v_x * omega) / p.mass,
        (f_fy * p.l_f * c - f_ry * p.l_r) / p.inertia_z,
    ]
}

/// Time derivative of the full state.
pub fn derivative(p: &CarParams, s: &FullState, delta: f64, duty: f64) -> FullState {
    let (sin_phi, cos_phi) = s.phi.sin_cos();
    let [a_x, a_y, a_w] = velocity_derivative(p, s.v_x, s.v_y, s.omega, delta, duty);
    FullState {
        x: s.v_x * cos_phi - s.v_y * sin_phi,
        y: s.v_x * sin_phi + s.v_y * cos_phi,
        phi: s.omega,
        v_x: a_x,
        v_y: a_y,
        omega: a_w,
    }
}

/// One classical RK4 step with inputs held constant.
pub fn integrate(p: &CarParams, s: &FullState, delta: f64, duty: f64, dt: f64) -> FullState {
    let k1 = derivative(p, s, delta, duty);
    let k2 = derivative(p, &s.axpy(0.5 * dt, k1), delta, duty);
    let k3 = derivative(p, &s.axpy(0.5 * dt, k2), delta, duty);
    let k4 = derivative(p, &s.axpy(dt, k3), delta, duty);
    let (s0, a, b, c, d) = (
        s.to_array(),
        k1.to_array(),
        k2.to_array(),
        k3.to_array(),
        k4.to_array(),
    );
    FullState::from_array(std::array::from_fn(|i| {
        s0[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i])
    }))
}

/// Velocity sub-state `(v_x, v_y, omega)` integrated with RK4 over `horizon`
/// in `steps` equal substeps.
pub fn integrate_velocity(
    p: &CarParams,
    v: [f64; 3],
    delta: f64,
    duty: f64,
    horizon: f64,
    steps: usize,
) -> [f64; 3] {
    let h = horizon / steps as f64;
    let f = |v: [f64; 3]| velocity_derivative(p, v[0], v[1], v[2], delta, duty);
    let add =
        |a: [f64; 3], s: f64, b: [f64; 3]| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let mut v = v;
    for _ in 0..steps {
        let k1 = f(v);
        let k2 = f(add(v, 0.5 * h, k1));
        let k3 = f(add(v, 0.5 * h, k2));
        let k4 = f(add(v, h, k3));
        v = std::array::from_fn(|i| v[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    v
}

/// Residual bound on the stationary accelerations.
pub const EQUILIBRIUM_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 50;

/// Stationary `(v_y, omega, d)` for fixed `v_x` and steering `delta`, or `None`
/// when damped Newton does not converge or the required duty is out of bounds.
pub fn stationary_point(p: &CarParams, v_x: f64, delta: f64) -> Option<(f64, f64, f64)> {
    if !(v_x > 0.0) {
        return None;
    }
    let seed = [0.0, v_x * delta / p.wheelbase(), p.cruise_duty(v_x)];
    stationary_from(p, v_x, delta, seed)
}

/// Damped Newton on the three velocity equations from an explicit seed
/// `(v_y, omega, d)`.
pub fn stationary_from(
    p: &CarParams,
    v_x: f64,
    delta: f64,
    seed: [f64; 3],
) -> Option<(f64, f64, f64)> {
    let residual = |z: &[f64; 3]| velocity_derivative(p, v_x, z[0], z[1], delta, z[2]);
    let norm = |r: &[f64; 3]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut z = seed;
    let mut r = residual(&z);
    for _ in 0..NEWTON_MAX_ITER {
        if norm(&r) < 1e-3 * EQUILIBRIUM_TOL {
            break;
        }
        let jac = newton_jacobian(&residual, &z);
        let step = solve3(&jac, &r)?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: [f64; 3] = std::array::from_fn(|i| z[i] - scale * step[i]);
            let rt = residual(&trial);
            if rt.iter().all(|v| v.is_finite()) && norm(&rt) < norm(&r) {
                z = trial;
                r = rt;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let duty_ok = z[2] >= p.duty_min - 1e-12 && z[2] <= p.duty_max + 1e-12;
    (norm(&r) < EQUILIBRIUM_TOL && duty_ok).then_some((z[0], z[1], z[2]))
}

fn newton_jacobian(f: &impl Fn(&[f64; 3]) -> [f64; 3], z: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let h = 1e-7 * (1.0 + z[j].abs());
        let mut zp = *z;
        let mut zm = *z;
        zp[j] += h;
        zm[j] -= h;
        let (fp, fm) = (f(&zp), f(&zm));
        for i in 0..3 {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let m = nalgebra::Matrix3::from_fn(|i, j| a[i][j]);
    let x = m.lu().solve(&nalgebra::Vector3::new(b[0], b[1], b[2]))?;
    x.iter().all(|v| v.is_finite()).then(|| [x[0], x[1], x[2]])
}

/// A stationary velocity point together with the inputs that hold it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    /// Dense id starting at 1; the grid mode axis uses `id - 1`.
    pub id: usize,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
    pub delta: f64,
    pub duty: f64,
    /// Infinity-norm Lipschitz constant of the one-step map for this mode.
    pub lipschitz: f64,
    #[serde(default)]
    pub drift: bool,
}

impl Mode {
    pub fn velocities(&self) -> [f64; 3] {
        [self.v_x, self.v_y, self.omega]
    }

    pub fn residual(&self, p: &CarParams) -> f64 {
        velocity_derivative(p, self.v_x, self.v_y, self.omega, self.delta, self.duty)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Drift points on the high-slip branch of the stationary manifold, given as
/// explicit `(v_x, delta)` pairs for a left turn. Every converged point is also
/// added mirrored, so `n` points give up to `2n` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftGrid {
    pub points: Vec<[f64; 2]>,
    /// Smallest accepted side-slip angle `|atan(v_y / v_x)|`, rad.
    pub min_slip: f64,
}

impl DriftGrid {
    /// Twelve drift points (mirrored to 24 modes) beyond the normal steering
    /// range of the default car.
    pub fn standard() -> Self {
        Self {
            points: vec![
                [1.5, 0.30],
                [1.5, 0.35],
                [1.75, 0.25],
                [1.75, 0.30],
                [2.0, 0.20],
                [2.0, 0.25],
                [2.25, 0.15],
                [2.25, 0.20],
                [2.5, 0.15],
                [2.5, 0.20],
                [2.75, 0.10],
                [2.75, 0.15],
            ],
            min_slip: 0.1,
        }
    }
}

/// Gridding of the stationary velocity manifold in `(v_x, delta)`.
///
/// For each `v_x` the steering angle is gridded symmetrically over the normal
/// driving region `|delta| <= min(delta_limit, wheelbase * lat_accel / v_x^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeGrid {
    pub v_min: f64,
    pub v_max: f64,
    pub v_step: f64,
    pub n_delta: usize,
    pub delta_limit: f64,
    pub lat_accel: f64,
    #[serde(default)]
    pub drift: Option<DriftGrid>,
}

impl ModeGrid {
    /// A row of the standard mode-count table.
    pub fn table_row(v_min: f64, v_max: f64, v_step: f64, n_delta: usize) -> Self {
        Self {
            v_min,
            v_max,
            v_step,
            n_delta,
            delta_limit: 0.3,
            lat_accel: 6.0,
            drift: Some(DriftGrid::standard()),
        }
    }

    pub fn speeds(&self) -> Vec<f64> {
        if self.v_step <= 0.0 {
            return vec![self.v_min];
        }
        let n = ((self.v_max - self.v_min) / self.v_step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| self.v_min + i as f64 * self.v_step)
            .collect()
    }

    pub fn deltas(&self, p: &CarParams, v_x: f64) -> Vec<f64> {
        if self.n_delta <= 1 {
            return vec![0.0];
        }
        let bound = self
            .delta_limit
            .min(p.wheelbase() * self.lat_accel / (v_x * v_x))
            .min(p.delta_max)
            .min(-p.delta_min);
        let n = self.n_delta;
        (0..n)
            .map(|i| -bound + 2.0 * bound * i as f64 / (n - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTable {
    pub modes: Vec<Mode>,
    /// Path-planning segment duration the Lipschitz constants refer to.
    pub t_pp: f64,
}

/// Grid combinations whose stationary point could not be found.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModeBuildReport {
    pub failed: Vec<(f64, f64)>,
    pub drift_failed: Vec<(f64, f64)>,
}

/// Builds one mode per converged `(v_x, delta)` combination plus the mirrored
/// drift modes. Ids are dense from 1 in `(v_x, delta)` order, drift modes last.
pub fn build_mode_table(
    p: &CarParams,
    grid: &ModeGrid,
    t_pp: f64,
) -> Result<(ModeTable, ModeBuildReport)> {
    p.validate()?;
    if !(t_pp > 0.0) || grid.v_min <= 0.0 || grid.v_max < grid.v_min {
        return Err(Error::InvalidParams("bad mode grid".into()));
    }
    let combos: Vec<(f64, f64)> = grid
        .speeds()
        .into_iter()
        .flat_map(|v| grid.deltas(p, v).into_iter().map(move |d| (v, d)))
        .collect();
    let solved: Vec<_> = combos
        .par_iter()
        .map(|&(v, d)| stationary_point(p, v, d))
        .collect();

    let mut report = ModeBuildReport::default();
    let mut raw = Vec::new();
    for (&(v_x, delta), sol) in combos.iter().zip(solved) {
        match sol {
            Some((v_y, omega, duty)) => raw.push((v_x, v_y, omega, delta, duty, false)),
            None => report.failed.push((v_x, delta)),
        }
    }

    if let Some(drift) = &grid.drift {
        let found: Vec<_> = drift
            .points
            .par_iter()
            .map(|&[v, d]| drift_point(p, v, d, drift.min_slip))
            .collect();
        for (&[v_x, delta], sol) in drift.points.iter().zip(found) {
            match sol {
                Some((v_y, omega, duty)) => {
                    raw.push((v_x, v_y, omega, delta, duty, true));
                    raw.push((v_x, -v_y, -omega, -delta, duty, true));
                }
                None => report.drift_failed.push((v_x, delta)),
            }
        }
    }

    let modes = raw
        .into_iter()
        .enumerate()
        .map(|(i, (v_x, v_y, omega, delta, duty, drift))| Mode {
            id: i + 1,
            v_x,
            v_y,
            omega,
            delta,
            duty,
            lipschitz: ppmodel::lipschitz_of(v_x, v_y, omega, t_pp),
            drift,
        })
        .collect();
    Ok((ModeTable { modes, t_pp }, report))
}

/// Left-turning high-slip equilibrium at `v_x` with steering `delta.abs()`.
///
/// Multi-start damped Newton over side-slip and yaw-rate seeds; among the
/// converged roots with slip at least `min_slip` the one with the largest
/// side slip is returned.
pub fn drift_point(p: &CarParams, v_x: f64, delta: f64, min_slip: f64) -> Option<(f64, f64, f64)> {
    if !(v_x > 0.0) {
        return None;
    }
    let delta = delta.abs();
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..25 {
        let v_y = -2.0 * v_x * i as f64 / 24.0;
        for j in 0..20 {
            let omega = 0.2 + 8.0 * j as f64 / 19.0;
            for duty in [0.5, 0.8, 1.0] {
                let Some(s) = stationary_from(p, v_x, delta, [v_y, omega, duty]) else {
                    continue;
                };
                let slip_ok = s.1 > 0.0 && (s.0 / v_x).atan() <= -min_slip;
                if slip_ok && best.is_none_or(|b| s.0 < b.0) {
                    best = Some(s);
                }
            }
        }
    }
    best
}

impl ModeTable {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn get(&self, q: usize) -> Result<&Mode> {
        self.modes.get(q).ok_or(Error::InvalidMode(q))
    }

    /// Recomputes the per-mode Lipschitz constants for another segment duration.
    pub fn with_segment_time(&self, t_pp: f64) -> ModeTable {
        let modes = self
            .modes
            .iter()
            .map(|m| Mode {
                lipschitz: ppmodel::lipschitz_of(m.v_x, m.v_y, m.omega, t_pp),
                ..*m
            })
            .collect();
        ModeTable { modes, t_pp }
    }

    /// Index of the mode whose velocities are closest to `v` (weighted
    /// infinity norm with yaw rate scaled by the wheelbase).
    pub fn nearest(&self, v: [f64; 3], wheelbase: f64) -> usize {
        let dist = |m: &Mode| {
            (m.v_x - v[0])
                .abs()
                .max((m.v_y - v[1]).abs())
                .max(((m.omega - v[2]) * wheelbase).abs())
        };
        (0..self.modes.len())
            .min_by(|&a, &b| dist(&self.modes[a]).total_cmp(&dist(&self.modes[b])))
            .unwrap_or(0)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "v_x", "v_y", "omega", "delta", "d", "L_q", "drift"])?;
        for m in &self.modes {
            w.write_record([
                m.id.to_string(),
                format!("{:.17e}", m.v_x),
                format!("{:.17e}", m.v_y),
                format!("{:.17e}", m.omega),
                format!("{:.17e}", m.delta),
                format!("{:.17e}", m.duty),
                format!("{:.17e}", m.lipschitz),
                u8::from(m.drift).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, t_pp: f64) -> Result<ModeTable> {
        let mut r = csv::Reader::from_path(path)?;
        let mut modes = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Format("short mode row".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("mode table: {e}")))
            };
            let id = f(0)? as usize;
            if id != modes.len() + 1 {
                return Err(Error::Format(format!(
                    "mode ids must be dense from 1, got {id}"
                )));
            }
            let (v_x, v_y, omega) = (f(1)?, f(2)?, f(3)?);
            modes.push(Mode {
                id,
                v_x,
                v_y,
                omega,
                delta: f(4)?,
                duty: f(5)?,
                lipschitz: ppmodel::lipschitz_of(v_x, v_y, omega, t_pp),
                drift: rec.get(7).map(|s| s.trim() == "1").unwrap_or(false),
            });
        }
        Ok(ModeTable { modes, t_pp })
    }
}

/// Per-component tolerances for reaching a target velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityTolerance {
    pub v: f64,
    pub omega: f64,
}

impl Default for VelocityTolerance {
    fn default() -> Self {
        Self {
            v: 0.05,
            omega: 0.1,
        }
    }
}

/// Side length of the constant-input search grid over `(delta, d)`.
pub const TRANSITION_GRID: usize = 15;

/// Whether some constant input pair drives the velocities of `a` to those of
/// `b` within `t_t` seconds.
pub fn transition_feasible(
    p: &CarParams,
    a: &Mode,
    b: &Mode,
    t_t: f64,
    tol: VelocityTolerance,
) -> bool {
    let reaches = |delta: f64, duty: f64| {
        let v = integrate_velocity(p, a.velocities(), delta, duty, t_t, 40);
        (v[0] - b.v_x).abs() <= tol.v
            && (v[1] - b.v_y).abs() <= tol.v
            && (v[2] - b.omega).abs() <= tol.omega
    };
    if reaches(a.delta, a.duty) || reaches(b.delta, b.duty) {
        return true;
    }
    let n = TRANSITION_GRID;
    (0..n).any(|i| {
        let delta = p.delta_min + (p.delta_max - p.delta_min) * i as f64 / (n - 1) as f64;
        (0..n).any(|j| {
            let duty = p.duty_min + (p.duty_max - p.duty_min) * j as f64 / (n - 1) as f64;
            reaches(delta, duty)
        })
    })
}

/// Which mode may follow which: `allowed[a][b]` permits switching from `a` to `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionAutomaton {
    pub allowed: Vec<Vec<bool>>,
    pub t_t: f64,
}

impl TransitionAutomaton {
    pub fn build(p: &CarParams, table: &ModeTable, t_t: f64, tol: VelocityTolerance) -> Self {
        let n = table.len();
        let allowed = (0..n)
            .into_par_iter()
            .map(|a| {
                (0..n)
                    .map(|b| transition_feasible(p, &table.modes[a], &table.modes[b], t_t, tol))
                    .collect()
            })
            .collect();
        Self { allowed, t_t }
    }

    pub fn full(n: usize) -> Self {
        Self {
            allowed: vec![vec![true; n]; n],
            t_t: 0.0,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            allowed: (0..n).map(|a| (0..n).map(|b| a == b).collect()).collect(),
            t_t: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn successors(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.allowed[q]
            .iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .map(|(b, _)| b)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.allowed.len();
        for (a, row) in self.allowed.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Format("automaton must be square".into()));
            }
            if !row.iter().any(|&b| b) {
                return Err(Error::InvalidParams(format!(
                    "mode {} has no successor",
                    a + 1
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        for row in &self.allowed {
            w.write_record(row.iter().map(|&b| if b { "1" } else { "0" }))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        let mut allowed = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| match s.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::Format(format!("automaton entry {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            allowed.push(row);
        }
        let a = Self { allowed, t_t: 0.0 };
        a.validate()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CarParams {
        CarParams::default()
    }

    #[test]
    fn equilibrium_at_rest() {
        let p = params();
        let duty = p.cr0 / p.cm1;
        let s = FullState {
            x: 1.0,
            y: 2.0,
            phi: 0.3,
            ..Default::default()
        };
        let ds = derivative(&p, &s, 0.0, duty);
        for v in ds.to_array() {
            assert!(v.abs() < 1e-15, "{ds:?}");
        }
    }

    #[test]
    fn straight_driving_symmetry() {
        let p = params();
        let s = FullState {
            phi: 0.7,
            v_x: 1.3,
            ..Default::default()
        };
        let ds = derivative(&p, &s, 0.0, 0.4);
        assert!((ds.y - 1.3 * 0.7f64.sin()).abs() < 1e-15);
        assert_eq!(ds.v_y, 0.0);
        assert_eq!(ds.omega, 0.0);
    }

    #[test]
    fn rk4_equilibrium_and_straight() {
        let p = params();
        let duty = p.cr0 / p.cm1;
        let s = FullState {
            x: 0.5,
            ..Default::default()
        };
        assert_eq!(integrate(&p, &s, 0.0, duty, 0.02), s);

        let v = 2.0;
        let s = FullState {
            v_x: v,
            ..Default::default()
        };
        let next = integrate(&p, &s, 0.0, p.cruise_duty(v), 0.02);
        assert!((next.x - v * 0.02).abs() < 1e-12);
        assert!(next.y.abs() < 1e-15);
    }

    #[test]
    fn stationary_straight_is_symmetric() {
        let p = params();
        let (vy, w, d) = stationary_point(&p, 2.0, 0.0).unwrap();
        assert_eq!(vy, 0.0);
        assert_eq!(w, 0.0);
        assert!(p.drive_force(2.0, d).abs() < 1e-8 * p.mass);
    }

    #[test]
    fn stationary_mirror() {
        let p = params();
        for &(v, delta) in &[(1.0, 0.1), (2.0, 0.05), (3.0, 0.02)] {
            let (vy, w, d) = stationary_point(&p, v, delta).unwrap();
            let (vy2, w2, d2) = stationary_point(&p, v, -delta).unwrap();
            assert!((vy + vy2).abs() < 1e-9 && (w + w2).abs() < 1e-9 && (d - d2).abs() < 1e-9);
            assert!(w * delta > 0.0);
        }
    }

    #[test]
    fn single_combination_single_mode() {
        let p = params();
        let grid = ModeGrid {
            v_min: 1.5,
            v_max: 1.5,
            v_step: 0.25,
            n_delta: 1,
            delta_limit: 0.3,
            lat_accel: 6.0,
            drift: None,
        };
        let (table, report) = build_mode_table(&p, &grid, 0.16).unwrap();
        assert_eq!(table.len(), 1);
        assert!(report.failed.is_empty());
        assert_eq!(table.modes[0].id, 1);
    }

    #[test]
    fn self_transition_always_feasible() {
        let p = params();
        let grid = ModeGrid {
            v_min: 1.0,
            v_max: 2.0,
            v_step: 0.5,
            n_delta: 3,
            delta_limit: 0.3,
            lat_accel: 6.0,
            drift: None,
        };
        let (table, _) = build_mode_table(&p, &grid, 0.16).unwrap();
        let aut = TransitionAutomaton::build(&p, &table, 0.08, VelocityTolerance::default());
        for q in 0..table.len() {
            assert!(aut.allowed[q][q]);
        }
        aut.validate().unwrap();
    }

    #[test]
    fn params_roundtrip_flat_toml() {
        let p = params();
        let text = p.to_toml();
        assert!(text.contains("mass = 0.041"));
        let back: CarParams = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(toml::from_str::<CarParams>("mass = 1.0").is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = CarParams {
            mass: -1.0,
            ..params()
        };
        assert!(p.validate().is_err());
    }
}
