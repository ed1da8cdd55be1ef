mod common;

use std::f64::consts::TAU;

use approx::assert_relative_eq;
use proptest::prelude::*;
use viability_core::control::{continuous_jacobian, track_follow_control, LqrWeights, RefPoint};
use viability_core::ppmodel::{advance, body_displacement, lipschitz_of, wrap_angle, PPState};
use viability_core::vehicle::{derivative, CarParams, FullState, Mode};

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(std::f64::consts::TAU - d)
}

fn velocities() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.5f64..2.0, -0.3f64..0.3, -4.0f64..4.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segments_compose((vx, vy, w) in velocities(), t1 in 0.0f64..0.3, t2 in 0.0f64..0.3,
                        pose in prop::array::uniform3(-5.0f64..5.0)) {
        let pose = [pose[0], pose[1], wrap_angle(pose[2])];
        let two = advance(advance(pose, vx, vy, w, t1), vx, vy, w, t2);
        let one = advance(pose, vx, vy, w, t1 + t2);
        prop_assert!((two[0] - one[0]).abs() < 1e-9);
        prop_assert!((two[1] - one[1]).abs() < 1e-9);
        prop_assert!(angle_diff(two[2], one[2]) < 1e-9);
    }

    #[test]
    fn motion_is_rigid((vx, vy, w) in velocities(), t in 0.0f64..0.3,
                       pose in prop::array::uniform3(-5.0f64..5.0),
                       shift in prop::array::uniform2(-3.0f64..3.0), turn in 0.0f64..TAU) {
        // translating and rotating the start moves the end the same way
        let a = advance(pose, vx, vy, w, t);
        let (s, c) = turn.sin_cos();
        let moved = [
            c * pose[0] - s * pose[1] + shift[0],
            s * pose[0] + c * pose[1] + shift[1],
            pose[2] + turn,
        ];
        let b = advance(moved, vx, vy, w, t);
        prop_assert!((b[0] - (c * a[0] - s * a[1] + shift[0])).abs() < 1e-9);
        prop_assert!((b[1] - (s * a[0] + c * a[1] + shift[1])).abs() < 1e-9);
        prop_assert!(angle_diff(b[2], a[2] + turn) < 1e-9);
    }

    #[test]
    fn arcs_keep_constant_radius((vx, vy, w) in velocities(), t in 0.01f64..0.3) {
        prop_assume!(w.abs() > 0.05);
        // turning centre in body coordinates: (-v_y / w, v_x / w)
        let centre = [-vy / w, vx / w];
        let radius = vx.hypot(vy) / w.abs();
        for k in 0..=8 {
            let p = advance([0.0, 0.0, 0.0], vx, vy, w, t * k as f64 / 8.0);
            let d = (p[0] - centre[0]).hypot(p[1] - centre[1]);
            prop_assert!((d - radius).abs() < 1e-9 * radius.max(1.0));
        }
    }

    #[test]
    fn lipschitz_bounds_finite_differences((vx, vy, w) in velocities(), t in 0.01f64..0.3,
                                           phi in 0.0f64..TAU, dphi in -0.2f64..0.2) {
        // |Delta pose|_inf <= L |Delta phi| for a pure heading perturbation
        let l = lipschitz_of(vx, vy, w, t);
        let a = advance([0.0, 0.0, phi], vx, vy, w, t);
        let b = advance([0.0, 0.0, phi + dphi], vx, vy, w, t);
        let dx = (a[0] - b[0]).abs().max((a[1] - b[1]).abs()).max(angle_diff(a[2], b[2]));
        prop_assert!(dx <= l * dphi.abs() + 1e-12);
    }

    #[test]
    fn small_turns_match_half_angle_form(vx in 0.5f64..2.0, vy in -0.3f64..0.3, t in 0.01f64..0.3,
                                         a in 1e-9f64..1e-4, sign in prop::bool::ANY) {
        let a = if sign { a } else { -a };
        let w = a / t;
        let got = body_displacement(vx, vy, w, t);
        // sin(a) = 2 sin(a/2) cos(a/2), 1 - cos(a) = 2 sin^2(a/2): no cancellation
        let (sh, ch) = (a / 2.0).sin_cos();
        let s = 2.0 * sh * ch / w;
        let c = 2.0 * sh * sh / w;
        let want = [vx * s - vy * c, vx * c + vy * s, a];
        for j in 0..3 {
            prop_assert!((got[j] - want[j]).abs() <= 1e-12 * (1.0 + want[j].abs()));
        }
    }
}

#[test]
fn straight_mode_moves_along_heading() {
    let setup = common::reference_setup();
    let model = &setup.model;
    let (u, m) = model
        .modes
        .modes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.omega.abs().total_cmp(&b.1.omega.abs()))
        .unwrap();
    assert!(m.omega.abs() < 1e-9);
    let x = PPState::new(1.0, 2.0, 0.5, u);
    let y = model.step(&x, u).unwrap();
    let d = m.v_x * model.config.t_pp;
    assert_relative_eq!(y.x, 1.0 + d * 0.5f64.cos(), epsilon = 1e-12);
    assert_relative_eq!(y.y, 2.0 + d * 0.5f64.sin(), epsilon = 1e-12);
    let samples = model.sample_path(&x, u).unwrap();
    assert_eq!(samples.len(), model.config.n_samples);
    assert_relative_eq!(samples[0][0], x.x);
    assert_relative_eq!(samples.last().unwrap()[1], y.y, epsilon = 1e-12);
}

fn car() -> CarParams {
    common::reference().params().unwrap()
}

#[test]
fn jacobian_matches_central_differences() {
    let p = car();
    let cases = [
        (
            FullState {
                x: 0.3,
                y: -0.2,
                phi: 0.4,
                v_x: 1.2,
                v_y: 0.05,
                omega: 1.1,
            },
            0.1,
            0.2,
        ),
        (
            FullState {
                x: 1.0,
                y: 2.0,
                phi: 5.0,
                v_x: 0.9,
                v_y: -0.1,
                omega: -2.0,
            },
            -0.25,
            0.12,
        ),
    ];
    let f = |s: &FullState, d: f64, t: f64| derivative(&p, s, d, t).to_array();
    for (s, delta, duty) in cases {
        let (a, b) = continuous_jacobian(&p, &s, delta, duty);
        let h = 1e-6;
        for j in 0..6 {
            let mut hi = s.to_array();
            let mut lo = s.to_array();
            hi[j] += h;
            lo[j] -= h;
            let (fh, fl) = (
                f(&FullState::from_array(hi), delta, duty),
                f(&FullState::from_array(lo), delta, duty),
            );
            for i in 0..6 {
                let fd = (fh[i] - fl[i]) / (2.0 * h);
                assert!(
                    (a[(i, j)] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "A[{i},{j}]"
                );
            }
        }
        for (k, (dd, dt)) in [(h, 0.0), (0.0, h)].into_iter().enumerate() {
            let fh = f(&s, delta + dd, duty + dt);
            let fl = f(&s, delta - dd, duty - dt);
            for i in 0..6 {
                let fd = (fh[i] - fl[i]) / (2.0 * h);
                assert!(
                    (b[(i, k)] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "B[{i},{k}]"
                );
            }
        }
    }
}

/// Reference holding one mode for `n` control periods.
fn reference_of(m: &Mode, start: [f64; 3], n: usize, dt: f64) -> Vec<RefPoint> {
    (0..=n)
        .map(|k| {
            let p = advance(start, m.v_x, m.v_y, m.omega, k as f64 * dt);
            RefPoint {
                state: FullState {
                    x: p[0],
                    y: p[1],
                    phi: p[2],
                    v_x: m.v_x,
                    v_y: m.v_y,
                    omega: m.omega,
                },
                input: [m.delta, m.duty],
            }
        })
        .collect()
}

#[test]
fn no_correction_on_the_reference() {
    let setup = common::reference_setup();
    let p = &setup.params;
    let dt = 0.02;
    for m in setup.model.modes.modes.iter().step_by(3) {
        let r = reference_of(m, [0.5, -0.5, 1.0], 24, dt);
        let u = track_follow_control(
            p,
            &r[0].state,
            r[0].input,
            &r,
            dt,
            4,
            &LqrWeights::default(),
        );
        assert!((u[0] - m.delta).abs() < 1e-3, "mode {}: {u:?}", m.id);
        assert!((u[1] - m.duty).abs() < 1e-3, "mode {}: {u:?}", m.id);
    }
}

#[test]
fn steering_opposes_lateral_offset() {
    let setup = common::reference_setup();
    let p = &setup.params;
    let m = setup
        .model
        .modes
        .modes
        .iter()
        .min_by(|a, b| a.omega.abs().total_cmp(&b.omega.abs()))
        .unwrap();
    let dt = 0.02;
    let r = reference_of(m, [0.0, 0.0, 0.0], 24, dt);
    for offset in [0.05, -0.05] {
        let mut s = r[0].state;
        s.y += offset;
        let u = track_follow_control(p, &s, r[0].input, &r, dt, 4, &LqrWeights::default());
        // left of the path (positive y) calls for steering right
        assert!((u[0] - m.delta) * offset < 0.0, "offset {offset}: {u:?}");
    }
}
