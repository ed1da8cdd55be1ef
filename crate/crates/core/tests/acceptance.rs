//! Acceptance suite on the shipped reference configuration. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::f64::consts::TAU;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use viability_core::grid::{GridSpec, KernelSet, ModeMask};
use viability_core::kernel::{
    disc_kernel_modified, fraction, viability_kernel, GridDynamics, KernelKind, KernelResult,
    UnionRule,
};
use viability_core::ppmodel::{wrap_angle, PPState};
use viability_core::scenario::Setup;
use viability_core::sim::{Controller, Plant, SimConfig};
use viability_core::track::Track;

use common::{ball_in, reference, reference_setup, Ring};

/// Plain-language tolerance pins.
const MAX_KERNEL_SECONDS: f64 = 600.0;
const MIN_ROBUSTNESS_SAMPLES: usize = 1000;
const DENSE_DISTURBANCE_SAMPLES: usize = 32 * 32;
const STEP_ORACLE_TOL: f64 = 1e-8;
const STEP_ORACLE_STATES: usize = 1000;
const LIPSCHITZ_PAIRS: usize = 10_000;
const CLOSED_LOOP_STEPS: usize = 10_000;
const MIN_LAPS: usize = 5;
const CONTROL_PERIOD_MS: f64 = 20.0;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Fixture {
    setup: Setup,
    viab: KernelResult,
    viab_seconds: f64,
    disc: KernelResult,
}

impl Fixture {
    fn new() -> Self {
        let setup = reference_setup();
        let t0 = Instant::now();
        let viab = setup.compute(KernelKind::Viability).unwrap();
        let viab_seconds = t0.elapsed().as_secs_f64();
        let disc = setup.compute(KernelKind::Discriminating).unwrap();
        Self {
            setup,
            viab,
            viab_seconds,
            disc,
        }
    }
}

/// Inputs from `q` whose sampled path from the center of `idx` stays inside
/// the track at the kernel margin, recomputed from the model.
fn feasible_successors(setup: &Setup, cell: [usize; 3], q: usize) -> Vec<(usize, PPState)> {
    let c = setup.spec.cell_center(cell);
    let x = PPState::new(c[0], c[1], c[2], q);
    let margin = setup.kernel.margin;
    setup
        .model
        .admissible(q)
        .unwrap()
        .iter()
        .filter(|&u| {
            let pts = setup.model.sample_path(&x, u).unwrap();
            pts.iter().all(|p| setup.track.inside(*p, margin))
        })
        .map(|u| (u, setup.model.step(&x, u).unwrap()))
        .collect()
}

fn criterion_1(f: &Fixture) -> Outcome {
    let spec = &f.setup.spec;
    let kernel = &f.viab.kernel;
    let members: Vec<_> = kernel.iter().collect();
    // (no witness at all, witness only by intersection)
    let (fail, meet_only) = members
        .par_iter()
        .map(|idx| {
            let mut inside = false;
            let mut meets = false;
            for (u, next) in feasible_successors(&f.setup, idx.cell(), idx.q) {
                let ball = spec
                    .ball_indices(next.pose(), u, spec.r)
                    .unwrap_or_default();
                let hit = ball.iter().filter(|i| kernel.contains(**i)).count();
                if !ball.is_empty() && hit == ball.len() {
                    inside = true;
                    break;
                }
                meets |= hit > 0;
            }
            match (inside, meets) {
                (true, _) => (0, 0),
                (false, true) => (0, 1),
                (false, false) => (1, 0),
            }
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let points = spec.len();
    Outcome {
        pass: fail == 0
            && meet_only == 0
            && f.viab_seconds <= MAX_KERNEL_SECONDS
            && points >= 500_000,
        detail: format!(
            "{points} grid points, {} in kernel, {fail} without a witness, {meet_only} only \
             touching the kernel, {:.1} s",
            members.len(),
            f.viab_seconds
        ),
    }
}

fn criterion_2(f: &Fixture) -> Outcome {
    let outside = f.disc.kernel.count_outside(&f.viab.kernel).unwrap();
    let mut ratios = Vec::new();
    let mut detail = format!("{outside} Disc bits outside Viab; Disc/Viab ratio per n_phi:");
    let mut sc = reference();
    for n_phi in [36, 51, 72] {
        sc.grid.n_phi = n_phi;
        let setup = Setup::with_track(&sc, f.setup.track.clone()).unwrap();
        let k_h = setup.k_h().unwrap();
        let v = setup.compute(KernelKind::Viability).unwrap();
        let d = setup.compute(KernelKind::Discriminating).unwrap();
        let (fv, fd) = (
            fraction(&v.kernel, &k_h).unwrap(),
            fraction(&d.kernel, &k_h).unwrap(),
        );
        let sub = d.kernel.is_subset_of(&v.kernel).unwrap();
        let ratio = if fv > 0.0 { fd / fv } else { 0.0 };
        detail += &format!(" {n_phi}: {fd:.4}/{fv:.4} = {ratio:.4} (subset {sub});");
        ratios.push((ratio, sub));
    }
    let trend = ratios.windows(2).all(|w| w[1].0 >= w[0].0);
    Outcome {
        pass: outside == 0 && trend && ratios.iter().all(|r| r.1) && ratios[0].0 > 0.0,
        detail,
    }
}

fn criterion_3(f: &Fixture) -> Outcome {
    let spec = &f.setup.spec;
    let kernel = &f.disc.kernel;
    let members: Vec<_> = kernel.iter().collect();
    if members.is_empty() {
        return Outcome {
            pass: false,
            detail: "discriminating kernel is empty".into(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = MIN_ROBUSTNESS_SAMPLES * 2;
    let mut failures = 0;
    for _ in 0..n {
        let idx = members[rng.gen_range(0..members.len())];
        let c = spec.cell_center(idx.cell());
        let p: [f64; 3] = std::array::from_fn(|a| c[a] + rng.gen_range(-spec.r..=spec.r));
        let x = PPState::new(p[0], p[1], wrap_angle(p[2]), idx.q);
        let ok = f.setup.model.admissible(idx.q).unwrap().iter().any(|u| {
            let next = f.setup.model.step(&x, u).unwrap();
            let ball = spec
                .ball_indices(next.pose(), u, spec.r)
                .unwrap_or_default();
            !ball.is_empty() && ball.iter().all(|i| kernel.contains(*i))
        });
        failures += usize::from(!ok);
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{n} in-cell samples, {failures} without a robust input"),
    }
}

/// Semi-finite discriminating kernel of the ring toy: the disturbance is
/// sampled densely instead of on the coarse grid.
fn semi_finite(ring: &Ring, side: usize) -> KernelSet {
    let spec = ring.spec.clone();
    let step = 2.0 * ring.rho / (side - 1) as f64;
    let mut s = ring.k_h();
    loop {
        let mut next = s.clone();
        for idx in s.iter() {
            let c = spec.cell_center(idx.cell());
            let survives = (0..side * side).all(|k| {
                let v = [
                    -ring.rho + step * (k % side) as f64,
                    -ring.rho + step * (k / side) as f64,
                ];
                (0..2).any(|u| {
                    let p = ring.flow(c, u);
                    ball_in(&s, [p[0] + v[0], p[1] + v[1], p[2]], u)
                })
            });
            if !survives {
                next.set(idx, false).unwrap();
            }
        }
        if next == s {
            return s;
        }
        s = next;
    }
}

/// One-dimensional system: from the probe point two inputs land just right
/// and just left of a hole; every other point stays where it is.
struct TwoValue {
    spec: GridSpec,
}

impl TwoValue {
    const PROBE: usize = 0;

    fn new() -> Self {
        Self {
            spec: GridSpec::new([0.0; 3], [11, 1, 1], 0.5, 3, [false; 3]).unwrap(),
        }
    }

    fn k_h(&self) -> KernelSet {
        let mut k = KernelSet::empty(&self.spec);
        k.set_linear(0, Self::PROBE, true);
        for u in 1..3 {
            for i in 1..11 {
                k.set_linear(u, i, i != 5);
            }
        }
        k
    }
}

impl GridDynamics for TwoValue {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn admissible(&self, q: usize) -> ModeMask {
        if q == 0 {
            ModeMask::single(1).union(ModeMask::single(2))
        } else {
            ModeMask::single(q)
        }
    }

    fn successor(&self, cell: [usize; 3], u: usize) -> Option<[f64; 3]> {
        let x = cell[0] as f64;
        Some(match (cell[0], u) {
            (Self::PROBE, 1) => [5.2, 0.0, 0.0],
            (Self::PROBE, 2) => [4.8, 0.0, 0.0],
            _ => [x, 0.0, 0.0],
        })
    }

    fn disturbance_radius(&self, q: usize) -> [f64; 3] {
        if q == 0 {
            [0.5, 0.0, 0.0]
        } else {
            [0.0; 3]
        }
    }
}

fn criterion_4(_: &Fixture) -> Outcome {
    let ring = Ring::new(0.4);
    let k_h = ring.k_h();
    let disc = disc_kernel_modified(&k_h, &ring, UnionRule::MaxVolume);
    let oracle = semi_finite(&ring, (DENSE_DISTURBANCE_SAMPLES as f64).sqrt() as usize);
    let inner = disc.kernel.is_subset_of(&oracle).unwrap();
    let nontrivial = disc.kernel.count() > 0 && oracle.count() < k_h.count();

    let toy = TwoValue::new();
    let k = toy.k_h();
    let result = disc_kernel_modified(&k, &toy, UnionRule::MaxVolume);
    let probe = toy.spec.from_linear(TwoValue::PROBE);
    // checking only the two grid disturbances would keep the probe
    let finite_accepts = [-0.5, 0.5].iter().all(|v| {
        [1, 2].iter().any(|&u| {
            let s = toy.successor(probe.cell(), u).unwrap();
            ball_in(&k, [s[0] + v, 0.0, 0.0], u)
        })
    });
    let rejected = !result.kernel.contains(probe);
    Outcome {
        pass: inner && nontrivial && finite_accepts && rejected,
        detail: format!(
            "toy with {} points: Disc {} subset of semi-finite {} ({inner}), K_h {}; two-value \
             probe rejected {rejected}, grid-only check would accept {finite_accepts}",
            ring.spec.len(),
            disc.kernel.count(),
            oracle.count(),
            k_h.count()
        ),
    }
}

fn criterion_5(f: &Fixture) -> Outcome {
    let base = SimConfig {
        steps: CLOSED_LOOP_STEPS,
        plant: Plant::PathModel,
        compare_nodes: true,
        ..reference().sim
    };
    let mut pass = true;
    let mut detail = String::new();
    for (name, k) in [("Disc", &f.disc), ("Viab", &f.viab)] {
        let r = f.setup.simulate(&base, Some((&k.kernel, &k.safe))).unwrap();
        let pruning: Vec<_> = r.node_comparisons.iter().filter(|c| c.pruned > 0).collect();
        let not_more = pruning.iter().filter(|c| c.naive <= c.kernel).count();
        let ok = r.infeasible_replans == 0
            && r.violations == 0
            && r.emergency_stops == 0
            && not_more == 0;
        pass &= ok && !pruning.is_empty();
        detail += &format!(
            "{name}: {} replans, {} infeasible, {} violations, {} laps; naive expanded more \
             nodes in {}/{} replans with pruning; ",
            r.replans,
            r.infeasible_replans,
            r.violations,
            r.laps,
            pruning.len() - not_more,
            pruning.len()
        );
    }
    let naive = SimConfig {
        controller: Controller::NaivePlanner,
        compare_nodes: false,
        ..base
    };
    let r = f.setup.simulate(&naive, None).unwrap();
    detail += &format!(
        "naive loop: {} violations, {} infeasible replans",
        r.violations, r.infeasible_replans
    );
    Outcome { pass, detail }
}

/// Fine-step RK4 of the constant-velocity kinematics.
fn rk4_pose(pose: [f64; 3], v: [f64; 3], t: f64, dt: f64) -> [f64; 3] {
    let rhs = |s: [f64; 3]| {
        let (sn, cs) = s[2].sin_cos();
        [v[0] * cs - v[1] * sn, v[0] * sn + v[1] * cs, v[2]]
    };
    let n = (t / dt).round() as usize;
    let h = t / n as f64;
    let mut s = pose;
    for _ in 0..n {
        let k1 = rhs(s);
        let k2 = rhs(std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]));
        let k3 = rhs(std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]));
        let k4 = rhs(std::array::from_fn(|i| s[i] + h * k3[i]));
        s = std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    s
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn criterion_6(f: &Fixture) -> Outcome {
    let model = &f.setup.model;
    let t = model.config.t_pp;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut max_err = 0.0f64;
    let mut exceptions = 0;
    let mut worst_ratio = 0.0f64;
    for (u, m) in model.modes.modes.iter().enumerate() {
        for _ in 0..STEP_ORACLE_STATES {
            let x = PPState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.0..TAU),
                u,
            );
            let got = model.step(&x, u).unwrap();
            let want = rk4_pose(x.pose(), [m.v_x, m.v_y, m.omega], t, 1e-4);
            let err = (got.x - want[0])
                .abs()
                .max((got.y - want[1]).abs())
                .max(angle_gap(got.phi, want[2]));
            max_err = max_err.max(err);
        }
        for _ in 0..LIPSCHITZ_PAIRS {
            let a = PPState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.0..TAU),
                u,
            );
            let s = 10f64.powf(rng.gen_range(-6.0..-0.5));
            let d: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-s..s));
            let b = PPState::new(a.x + d[0], a.y + d[1], wrap_angle(a.phi + d[2]), u);
            let (fa, fb) = (model.step(&a, u).unwrap(), model.step(&b, u).unwrap());
            let num = (fa.x - fb.x)
                .abs()
                .max((fa.y - fb.y).abs())
                .max(angle_gap(fa.phi, fb.phi));
            let den = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let ratio = num / den;
            worst_ratio = worst_ratio.max(ratio / m.lipschitz);
            exceptions += usize::from(ratio > m.lipschitz * (1.0 + 1e-9));
        }
    }
    Outcome {
        pass: max_err < STEP_ORACLE_TOL && exceptions == 0,
        detail: format!(
            "{} modes: max step error {max_err:.2e}; {exceptions} Lipschitz exceptions, largest \
             sampled/analytic ratio {worst_ratio:.4}",
            model.n_modes()
        ),
    }
}

fn criterion_7(f: &Fixture) -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for layout in ["easy", "hard", "blocking"] {
        let track =
            Track::load(common::data_dir().join(format!("tracks/s_curve_{layout}.toml"))).unwrap();
        let setup = Setup {
            track,
            ..f.setup.clone()
        };
        let k_h = setup.k_h().unwrap();
        let dynamics = setup.dynamics().unwrap();
        let v = viability_kernel(&k_h, &dynamics).kernel;
        let d = disc_kernel_modified(&k_h, &dynamics, setup.kernel.union_rule).kernel;
        let mono =
            v.is_subset_of(&f.viab.kernel).unwrap() && d.is_subset_of(&f.disc.kernel).unwrap();
        let strict = d.is_subset_of(&v).unwrap() && d.count() < v.count();
        let ok = match layout {
            "hard" => mono && strict,
            "blocking" => mono && v.is_empty() && d.is_empty(),
            _ => mono,
        };
        pass &= ok;
        detail += &format!(
            "{layout}: Viab {} (of {}), Disc {} (of {}), monotone {mono}; ",
            v.count(),
            f.viab.kernel.count(),
            d.count(),
            f.disc.kernel.count()
        );
    }
    Outcome { pass, detail }
}

fn criterion_8(f: &Fixture) -> Outcome {
    let cfg = SimConfig {
        steps: CLOSED_LOOP_STEPS,
        plant: Plant::Full,
        ..reference().sim
    };
    let r = f
        .setup
        .simulate(&cfg, Some((&f.disc.kernel, &f.disc.safe)))
        .unwrap();
    Outcome {
        pass: r.laps >= MIN_LAPS
            && r.emergency_stops == 0
            && r.timing.planner_ms_median < CONTROL_PERIOD_MS,
        detail: format!(
            "{} laps, mean lap {:.2} s, {} emergency stops, {} violations, {} recoveries, \
             planner median {:.3} ms max {:.3} ms",
            r.laps,
            r.mean_lap_time.unwrap_or(f64::NAN),
            r.emergency_stops,
            r.violations,
            r.recoveries,
            r.timing.planner_ms_median,
            r.timing.planner_ms_max
        ),
    }
}

type Criterion = (&'static str, fn(&Fixture) -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let t0 = Instant::now();
    let fixture = Fixture::new();
    let criteria: [Criterion; 8] = [
        ("viability fixed point", criterion_1),
        ("inclusion and refinement trend", criterion_2),
        ("cell robustness", criterion_3),
        ("inner approximation oracle", criterion_4),
        ("recursive feasibility", criterion_5),
        ("closed-form step and Lipschitz bound", criterion_6),
        ("obstacle monotonicity", criterion_7),
        ("full-plant demo", criterion_8),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion_{}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let out = check(&fixture);
        let status = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "{id} {status} {name} ({:.1} s): {}",
            t.elapsed().as_secs_f64(),
            out.detail
        );
        failed += usize::from(!out.pass);
    }
    println!(
        "acceptance: {failed} failed, {:.1} s total",
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
