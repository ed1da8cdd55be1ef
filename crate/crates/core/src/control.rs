//! Time-varying LQR tracking of a reference trajectory for the bicycle model.
//!
//! The model is linearized around each reference point and discretized with a
//! zero-order hold. The regulator state is the tracking error augmented with
//! the previous input deviation, and the decision variable is the input rate,
//! so the cost penalizes state error and input changes.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::ppmodel::wrap_angle;
use crate::vehicle::{integrate, CarParams, FullState};

pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat6x2 = SMatrix<f64, 6, 2>;
type Mat8 = SMatrix<f64, 8, 8>;
type Mat8x2 = SMatrix<f64, 8, 2>;
type Mat2 = SMatrix<f64, 2, 2>;
pub type Gain = SMatrix<f64, 2, 8>;

/// Derivative of the lateral Pacejka force with respect to slip.
fn pacejka_slope(b: f64, c: f64, d: f64, alpha: f64) -> f64 {
    let ba = b * alpha;
    d * (c * ba.atan()).cos() * c * b / (1.0 + ba * ba)
}

/// Continuous-time Jacobians `(df/ds, df/du)` of the full model with inputs
/// `(delta, d)`.
pub fn continuous_jacobian(p: &CarParams, s: &FullState, delta: f64, duty: f64) -> (Mat6, Mat6x2) {
    let (vx, vy, w) = (s.v_x, s.v_y, s.omega);
    let (sp, cp) = s.phi.sin_cos();
    let (sd, cd) = delta.sin_cos();
    let m = p.mass;
    let mut a = Mat6::zeros();
    let mut b = Mat6x2::zeros();

    a[(0, 2)] = -vx * sp - vy * cp;
    a[(0, 3)] = cp;
    a[(0, 4)] = -sp;
    a[(1, 2)] = vx * cp - vy * sp;
    a[(1, 3)] = sp;
    a[(1, 4)] = cp;
    a[(2, 5)] = 1.0;

    let (af_num, rr) = (w * p.l_f + vy, w * p.l_r - vy);
    let nf = af_num * af_num + vx * vx;
    let nr = rr * rr + vx * vx;
    // slip partials with respect to (v_x, v_y, omega)
    let daf = [af_num / nf, -vx / nf, -p.l_f * vx / nf];
    let dar = [-rr / nr, -vx / nr, p.l_r * vx / nr];
    let alpha_f = p.front_slip(vx, vy, w, delta);
    let alpha_r = p.rear_slip(vx, vy, w);
    let f_fy = p.front_lateral_force(alpha_f);
    let kf = pacejka_slope(p.front_b, p.front_c, p.front_d, alpha_f);
    let kr = pacejka_slope(p.rear_b, p.rear_c, p.rear_d, alpha_r);
    let drx_dvx = -p.cm2 * duty - 2.0 * p.cr2 * vx;

    for j in 0..3 {
        let dff = kf * daf[j];
        let dfr = kr * dar[j];
        a[(3, 3 + j)] = -dff * sd / m;
        a[(4, 3 + j)] = (dfr + dff * cd) / m;
        a[(5, 3 + j)] = (dff * p.l_f * cd - dfr * p.l_r) / p.inertia_z;
    }
    a[(3, 3)] += drx_dvx / m;
    a[(3, 4)] += w;
    a[(3, 5)] += vy;
    a[(4, 3)] -= w;
    a[(4, 5)] -= vx;

    b[(3, 0)] = (-kf * sd - f_fy * cd) / m;
    b[(3, 1)] = (p.cm1 - p.cm2 * vx) / m;
    b[(4, 0)] = (kf * cd - f_fy * sd) / m;
    b[(5, 0)] = (kf * p.l_f * cd - f_fy * p.l_f * sd) / p.inertia_z;
    (a, b)
}

/// Zero-order-hold discretization through the exponential of the block
/// matrix `[[A, B], [0, 0]] dt`.
pub fn discretize(a: &Mat6, b: &Mat6x2, dt: f64) -> (Mat6, Mat6x2) {
    let mut m = Mat8::zeros();
    m.fixed_view_mut::<6, 6>(0, 0).copy_from(&(a * dt));
    m.fixed_view_mut::<6, 2>(0, 6).copy_from(&(b * dt));
    let e = m.exp();
    (
        e.fixed_view::<6, 6>(0, 0).into_owned(),
        e.fixed_view::<6, 2>(0, 6).into_owned(),
    )
}

/// Cost weights of the tracking regulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrWeights {
    /// Tracking error weights on `(X, Y, phi, v_x, v_y, omega)`.
    pub state: [f64; 6],
    /// Weights on the input rate `(d delta, d duty)` per step.
    pub rate: [f64; 2],
    /// Small weights on the deviation from the reference input.
    pub input: [f64; 2],
    /// Multiplier of the state weights at the end of the horizon.
    pub terminal: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            state: [400.0, 400.0, 20.0, 2.0, 0.1, 0.1],
            rate: [2.0, 2.0],
            input: [0.05, 0.05],
            terminal: 4.0,
        }
    }
}

/// One reference sample: the state to be at and the input applied from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefPoint {
    pub state: FullState,
    pub input: [f64; 2],
}

/// Linearized, discretized dynamics along a reference.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub a: Vec<Mat6>,
    pub b: Vec<Mat6x2>,
    /// Mismatch `F(s_k, u_k) - s_{k+1}` of the reference under the plant.
    pub residual: Vec<SVector<f64, 6>>,
}

fn state_error(s: &FullState, r: &FullState) -> SVector<f64, 6> {
    let (a, b) = (s.to_array(), r.to_array());
    let mut e = SVector::<f64, 6>::from_fn(|i, _| a[i] - b[i]);
    e[2] = wrap_pi(e[2]);
    e
}

fn wrap_pi(a: f64) -> f64 {
    let w = wrap_angle(a + std::f64::consts::PI) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + std::f64::consts::TAU
    } else {
        w
    }
}

/// Plant map over one control period: RK4 in `substeps` equal steps.
pub fn plant_step(
    p: &CarParams,
    s: &FullState,
    input: [f64; 2],
    dt: f64,
    substeps: usize,
) -> FullState {
    let h = dt / substeps as f64;
    (0..substeps).fold(*s, |x, _| integrate(p, &x, input[0], input[1], h))
}

/// Linearizes with the analytic Jacobian; `jacobian` lets callers supply an
/// alternative linearization of the continuous model.
pub fn linearize_with(
    p: &CarParams,
    reference: &[RefPoint],
    dt: f64,
    substeps: usize,
    jacobian: impl Fn(&FullState, [f64; 2]) -> (Mat6, Mat6x2),
) -> Linearization {
    let n = reference.len().saturating_sub(1);
    let mut lin = Linearization {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        residual: Vec::with_capacity(n),
    };
    for k in 0..n {
        let r = &reference[k];
        let (ac, bc) = jacobian(&r.state, r.input);
        let (ad, bd) = discretize(&ac, &bc, dt);
        lin.a.push(ad);
        lin.b.push(bd);
        let next = plant_step(p, &r.state, r.input, dt, substeps);
        lin.residual
            .push(state_error(&next, &reference[k + 1].state));
    }
    lin
}

pub fn linearize(p: &CarParams, reference: &[RefPoint], dt: f64, substeps: usize) -> Linearization {
    linearize_with(p, reference, dt, substeps, |s, u| {
        continuous_jacobian(p, s, u[0], u[1])
    })
}

/// Feedback law `mu_k = -K_k xi_k - k_k` for the augmented state
/// `xi = (e, u_{k-1} - u_ref_{k-1})` and input rate `mu = u_k - u_{k-1}`.
#[derive(Debug, Clone)]
pub struct TrackingLaw {
    pub gains: Vec<Gain>,
    pub feedforward: Vec<SVector<f64, 2>>,
}

/// Backward Riccati recursion with affine terms over the reference.
pub fn riccati(lin: &Linearization, reference: &[RefPoint], w: &LqrWeights) -> TrackingLaw {
    let n = lin.a.len();
    let mut q = Mat8::zeros();
    for i in 0..6 {
        q[(i, i)] = w.state[i];
    }
    for i in 0..2 {
        q[(6 + i, 6 + i)] = w.input[i];
    }
    let r = Mat2::from_diagonal(&SVector::<f64, 2>::from(w.rate));
    let mut p_mat = q * w.terminal;
    let mut p_vec = SVector::<f64, 8>::zeros();
    let mut gains = vec![Gain::zeros(); n];
    let mut ff = vec![SVector::<f64, 2>::zeros(); n];
    for k in (0..n).rev() {
        let (a, b) = (&lin.a[k], &lin.b[k]);
        let mut aa = Mat8::zeros();
        aa.fixed_view_mut::<6, 6>(0, 0).copy_from(a);
        aa.fixed_view_mut::<6, 2>(0, 6).copy_from(b);
        aa.fixed_view_mut::<2, 2>(6, 6).fill_with_identity();
        let mut bb = Mat8x2::zeros();
        bb.fixed_view_mut::<6, 2>(0, 0).copy_from(b);
        bb.fixed_view_mut::<2, 2>(6, 0).fill_with_identity();
        // reference input change shifts the deviation coordinate
        let prev = if k == 0 {
            reference[0].input
        } else {
            reference[k - 1].input
        };
        let dr = SVector::<f64, 2>::new(
            reference[k].input[0] - prev[0],
            reference[k].input[1] - prev[1],
        );
        let mut g = SVector::<f64, 8>::zeros();
        g.fixed_rows_mut::<6>(0)
            .copy_from(&(lin.residual[k] - b * dr));
        g.fixed_rows_mut::<2>(6).copy_from(&(-dr));
        let h = r + bb.transpose() * p_mat * bb;
        let gmat = bb.transpose() * p_mat * aa;
        let lin_term = p_mat * g + p_vec;
        let hvec = bb.transpose() * lin_term;
        let h_inv = h
            .try_inverse()
            .expect("input-rate weights are positive definite");
        let kk = h_inv * gmat;
        let kf = h_inv * hvec;
        p_vec = aa.transpose() * lin_term - gmat.transpose() * kf;
        p_mat = q + aa.transpose() * p_mat * aa - gmat.transpose() * kk;
        p_mat = 0.5 * (p_mat + p_mat.transpose());
        gains[k] = kk;
        ff[k] = kf;
    }
    TrackingLaw {
        gains,
        feedforward: ff,
    }
}

/// First input of the tracking law from state `s`, given the input applied
/// in the previous period. Saturated to the input bounds.
pub fn track_follow_control(
    p: &CarParams,
    s: &FullState,
    u_prev: [f64; 2],
    reference: &[RefPoint],
    dt: f64,
    substeps: usize,
    weights: &LqrWeights,
) -> [f64; 2] {
    if reference.len() < 2 {
        let u = reference.first().map_or(u_prev, |r| r.input);
        let (d, t) = p.clamp_inputs(u[0], u[1]);
        return [d, t];
    }
    let lin = linearize(p, reference, dt, substeps);
    let law = riccati(&lin, reference, weights);
    first_input(p, s, u_prev, reference, &law)
}

/// Applies step 0 of a tracking law.
pub fn first_input(
    p: &CarParams,
    s: &FullState,
    u_prev: [f64; 2],
    reference: &[RefPoint],
    law: &TrackingLaw,
) -> [f64; 2] {
    let e = state_error(s, &reference[0].state);
    let r0 = reference[0].input;
    let mut xi = SVector::<f64, 8>::zeros();
    xi.fixed_rows_mut::<6>(0).copy_from(&e);
    xi[6] = u_prev[0] - r0[0];
    xi[7] = u_prev[1] - r0[1];
    let mu = -law.gains[0] * xi - law.feedforward[0];
    let (d, t) = p.clamp_inputs(u_prev[0] + mu[0], u_prev[1] + mu[1]);
    [d, t]
}
