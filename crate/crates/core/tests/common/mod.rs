#![allow(dead_code)]

use std::path::PathBuf;

use viability_core::grid::{GridSpec, KernelSet, ModeMask};
use viability_core::kernel::GridDynamics;
use viability_core::scenario::{Scenario, Setup};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn reference() -> Scenario {
    Scenario::load(data_dir().join("reference.toml")).expect("reference scenario")
}

pub fn reference_setup() -> Setup {
    Setup::build(&reference()).expect("reference setup")
}

const POTHOLES: [(usize, usize); 4] = [(6, 2), (2, 6), (11, 5), (7, 9)];

/// Two modes circulating counter-clockwise around a rectangular ring on a
/// flat grid. Mode 0 moves one spacing per step, mode 1 a bit more.
pub struct Ring {
    pub spec: GridSpec,
    pub rho: f64,
    pub speeds: [f64; 2],
}

impl Ring {
    pub fn new(rho: f64) -> Self {
        let spec = GridSpec::new([0.0; 3], [14, 12, 1], 0.5, 2, [false; 3]).unwrap();
        Self {
            spec,
            rho,
            speeds: [1.0, 1.3],
        }
    }

    pub fn k_h(&self) -> KernelSet {
        let mut k = KernelSet::empty(&self.spec);
        for q in 0..2 {
            for j in 1..11 {
                for i in 1..13 {
                    let hole =
                        (4..10).contains(&i) && (4..8).contains(&j) || POTHOLES.contains(&(i, j));
                    if !hole {
                        k.set_linear(q, self.spec.cell_linear([i, j, 0]), true);
                    }
                }
            }
        }
        k
    }

    pub fn flow(&self, c: [f64; 3], u: usize) -> [f64; 3] {
        let (x, y) = (c[0], c[1]);
        let (tx, ty) = if x < 3.5 && y > 3.5 {
            (0.0, -1.0)
        } else if y < 3.5 && x < 9.5 {
            (1.0, 0.0)
        } else if x > 9.5 && y < 7.5 {
            (0.0, 1.0)
        } else {
            (-1.0, 0.0)
        };
        let s = self.speeds[u];
        [x + s * tx, y + s * ty, 0.0]
    }
}

impl GridDynamics for Ring {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn admissible(&self, _q: usize) -> ModeMask {
        ModeMask::all(2)
    }

    fn successor(&self, cell: [usize; 3], u: usize) -> Option<[f64; 3]> {
        Some(self.flow(self.spec.cell_center(cell), u))
    }

    fn disturbance_radius(&self, _q: usize) -> [f64; 3] {
        [self.rho, self.rho, 0.0]
    }
}

/// Lattice indices within `radius` of `v` on an unbounded axis through the
/// grid; `None` if one of them lies outside the grid.
pub fn lattice_run(spec: &GridSpec, axis: usize, v: f64, radius: f64) -> Option<Vec<usize>> {
    let h = 2.0 * spec.r;
    let t = (v - spec.lo[axis]) / h;
    let lo = ((t - radius / h) - 1e-12).ceil() as i64;
    let hi = ((t + radius / h) + 1e-12).floor() as i64;
    let mut out = Vec::new();
    for k in lo..=hi {
        if k < 0 || k >= spec.counts[axis] as i64 {
            return None;
        }
        out.push(k as usize);
    }
    Some(out)
}

/// Every lattice point within `r` of `p` is in `set[u]` (and at least one
/// exists). Flat axes only.
pub fn ball_in(set: &KernelSet, p: [f64; 3], u: usize) -> bool {
    let spec = set.spec();
    let runs: Option<Vec<Vec<usize>>> =
        (0..3).map(|a| lattice_run(spec, a, p[a], spec.r)).collect();
    let Some(runs) = runs else { return false };
    if runs.iter().any(|r| r.is_empty()) {
        return false;
    }
    runs[0].iter().all(|&i| {
        runs[1]
            .iter()
            .all(|&j| runs[2].iter().all(|&k| set.get_cell([i, j, k], u)))
    })
}
