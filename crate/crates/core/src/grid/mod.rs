//! Square grid over `(X, Y, phi)` with an exact mode axis `q`.
//!
//! Grid points are spaced `2r` apart on every continuous axis and each point
//! owns the closed infinity-norm cell of radius `r` around it, so neighbouring
//! cells share their faces. A wrapping axis has period `count * 2r`.

mod io;
mod set;

pub use io::{read_kernel_file, write_kernel_file, KERNEL_FORMAT_VERSION, KERNEL_MAGIC};
pub use set::{KernelSet, ModeMask, MAX_MODES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when enumerating candidate indices; the final
/// membership test is always the exact distance comparison.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub r: f64,
    pub counts: [usize; 3],
    pub n_modes: usize,
    pub wrap: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub i_x: usize,
    pub i_y: usize,
    pub i_phi: usize,
    pub q: usize,
}

impl GridIndex {
    pub fn new(i_x: usize, i_y: usize, i_phi: usize, q: usize) -> Self {
        Self { i_x, i_y, i_phi, q }
    }

    pub fn cell(&self) -> [usize; 3] {
        [self.i_x, self.i_y, self.i_phi]
    }

    pub fn from_cell(cell: [usize; 3], q: usize) -> Self {
        Self::new(cell[0], cell[1], cell[2], q)
    }
}

/// Inclusive run of axis indices `start..start + len`, taken modulo the axis
/// count on wrapping axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisRange {
    pub start: isize,
    pub len: usize,
}

impl GridSpec {
    /// Builds a grid from lower bounds, point counts, cell radius and wrap flags.
    pub fn new(
        lo: [f64; 3],
        counts: [usize; 3],
        r: f64,
        n_modes: usize,
        wrap: [bool; 3],
    ) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell radius must be > 0, got {r}"
            )));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidGrid(
                "every axis needs at least one point".into(),
            ));
        }
        if n_modes == 0 || n_modes > MAX_MODES {
            return Err(Error::InvalidGrid(format!(
                "mode count must be in 1..={MAX_MODES}"
            )));
        }
        if lo.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite bounds".into()));
        }
        let hi = std::array::from_fn(|a| lo[a] + (counts[a] - 1) as f64 * 2.0 * r);
        Ok(Self {
            lo,
            hi,
            r,
            counts,
            n_modes,
            wrap,
        })
    }

    /// The usual race-track grid: `X` and `Y` bounded, heading wrapping over
    /// `[0, 2pi)` with `n_phi` planes. The cell radius is `pi / n_phi` so the
    /// spacing is the same on all three axes.
    pub fn track(
        lo_xy: [f64; 2],
        counts_xy: [usize; 2],
        n_phi: usize,
        n_modes: usize,
    ) -> Result<Self> {
        if n_phi < 2 {
            return Err(Error::InvalidGrid(
                "need at least two heading planes".into(),
            ));
        }
        let r = std::f64::consts::PI / n_phi as f64;
        Self::new(
            [lo_xy[0], lo_xy[1], 0.0],
            [counts_xy[0], counts_xy[1], n_phi],
            r,
            n_modes,
            [false, false, true],
        )
    }

    /// Smallest track grid whose covered box contains `[min, max]` in `X`/`Y`.
    pub fn covering(min: [f64; 2], max: [f64; 2], n_phi: usize, n_modes: usize) -> Result<Self> {
        let r = std::f64::consts::PI / n_phi as f64;
        let count = |a: usize| ((max[a] - min[a]) / (2.0 * r)).ceil().max(0.0) as usize + 1;
        let counts = [count(0), count(1)];
        let lo = std::array::from_fn(|a| {
            let span = (counts[a] - 1) as f64 * 2.0 * r;
            0.5 * (min[a] + max[a]) - 0.5 * span
        });
        Self::track(lo, counts, n_phi, n_modes)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.r
    }

    pub fn period(&self, axis: usize) -> f64 {
        self.counts[axis] as f64 * self.spacing()
    }

    /// Points per mode slice.
    pub fn cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn len(&self) -> usize {
        self.cells() * self.n_modes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.counts == other.counts
            && self.n_modes == other.n_modes
            && self.wrap == other.wrap
            && self.r.to_bits() == other.r.to_bits()
            && self
                .lo
                .iter()
                .zip(&other.lo)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn validate_index(&self, idx: GridIndex) -> Result<()> {
        let ok = idx.i_x < self.counts[0]
            && idx.i_y < self.counts[1]
            && idx.i_phi < self.counts[2]
            && idx.q < self.n_modes;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIndex(idx))
        }
    }

    /// Position of a cell within one mode slice, `i_x` fastest.
    pub fn cell_linear(&self, cell: [usize; 3]) -> usize {
        (cell[2] * self.counts[1] + cell[1]) * self.counts[0] + cell[0]
    }

    pub fn cell_from_linear(&self, lin: usize) -> [usize; 3] {
        let i_x = lin % self.counts[0];
        let rest = lin / self.counts[0];
        [i_x, rest % self.counts[1], rest / self.counts[1]]
    }

    /// Row-major position in `(q, i_phi, i_y, i_x)` order.
    pub fn linear(&self, idx: GridIndex) -> usize {
        idx.q * self.cells() + self.cell_linear(idx.cell())
    }

    pub fn from_linear(&self, lin: usize) -> GridIndex {
        GridIndex::from_cell(
            self.cell_from_linear(lin % self.cells()),
            lin / self.cells(),
        )
    }

    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + i as f64 * self.spacing()
    }

    pub fn cell_center(&self, cell: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.axis_center(a, cell[a]))
    }

    pub fn center(&self, idx: GridIndex) -> Result<([f64; 3], usize)> {
        self.validate_index(idx)?;
        Ok((self.cell_center(idx.cell()), idx.q))
    }

    /// Signed offset `a - b` along an axis; on wrapping axes reduced to the
    /// half-open interval `[-period/2, period/2)`.
    pub fn axis_offset(&self, axis: usize, a: f64, b: f64) -> f64 {
        let d = a - b;
        if self.wrap[axis] {
            let p = self.period(axis);
            (d + 0.5 * p).rem_euclid(p) - 0.5 * p
        } else {
            d
        }
    }

    pub fn axis_distance(&self, axis: usize, a: f64, b: f64) -> f64 {
        self.axis_offset(axis, a, b).abs()
    }

    /// Infinity-norm distance between continuous points, wrapping where needed.
    pub fn distance(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        (0..3).fold(0.0f64, |m, k| m.max(self.axis_distance(k, a[k], b[k])))
    }

    /// Maps a wrapping coordinate into `[lo, lo + period)`; other axes unchanged.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| {
            if self.wrap[a] {
                let per = self.period(a);
                let v = self.lo[a] + (p[a] - self.lo[a]).rem_euclid(per);
                if v >= self.lo[a] + per {
                    self.lo[a]
                } else {
                    v
                }
            } else {
                p[a]
            }
        })
    }

    /// Whether the point lies in the covered box `[lo - r, hi + r]` on every
    /// bounded axis.
    pub fn in_box(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| {
            p[a].is_finite()
                && (self.wrap[a] || (p[a] >= self.lo[a] - self.r && p[a] <= self.hi[a] + self.r))
        })
    }

    /// Indices along one axis within distance `radius` of `v`. On bounded axes
    /// the run is clipped to the grid; `None` when nothing remains.
    pub fn axis_range(&self, axis: usize, v: f64, radius: f64) -> Option<AxisRange> {
        let h = self.spacing();
        let t = (v - self.lo[axis]) / h;
        let w = radius / h;
        let slack = RANGE_SLACK * (1.0 + t.abs());
        let mut a = (t - w - slack).ceil() as isize;
        let mut b = (t + w + slack).floor() as isize;
        let n = self.counts[axis] as isize;
        if self.wrap[axis] {
            if b - a + 1 >= n {
                return Some(AxisRange {
                    start: 0,
                    len: n as usize,
                });
            }
            // trim slack-only candidates with the exact distance test
            while a <= b
                && self.axis_distance(axis, v, self.axis_center(axis, a.rem_euclid(n) as usize))
                    > radius
            {
                a += 1;
            }
            while b >= a
                && self.axis_distance(axis, v, self.axis_center(axis, b.rem_euclid(n) as usize))
                    > radius
            {
                b -= 1;
            }
        } else {
            a = a.max(0);
            b = b.min(n - 1);
            while a <= b && (v - self.axis_center(axis, a as usize)).abs() > radius {
                a += 1;
            }
            while b >= a && (v - self.axis_center(axis, b as usize)).abs() > radius {
                b -= 1;
            }
        }
        (a <= b).then(|| AxisRange {
            start: a,
            len: (b - a + 1) as usize,
        })
    }

    pub fn range_index(&self, axis: usize, range: AxisRange, k: usize) -> usize {
        let i = range.start + k as isize;
        if self.wrap[axis] {
            i.rem_euclid(self.counts[axis] as isize) as usize
        } else {
            i as usize
        }
    }

    /// Per-axis index runs of the ball of `radius` around `p`, or `None` when
    /// the point is outside the covered box or the ball misses the grid.
    pub fn ball_ranges(&self, p: &[f64; 3], radius: [f64; 3]) -> Option<[AxisRange; 3]> {
        if !self.in_box(p) {
            return None;
        }
        Some([
            self.axis_range(0, p[0], radius[0])?,
            self.axis_range(1, p[1], radius[1])?,
            self.axis_range(2, p[2], radius[2])?,
        ])
    }

    /// Calls `f` with every cell in the product of the ranges; stops early
    /// and returns `false` as soon as `f` does.
    pub fn for_each_cell(
        &self,
        ranges: &[AxisRange; 3],
        mut f: impl FnMut([usize; 3]) -> bool,
    ) -> bool {
        for k2 in 0..ranges[2].len {
            let i2 = self.range_index(2, ranges[2], k2);
            for k1 in 0..ranges[1].len {
                let i1 = self.range_index(1, ranges[1], k1);
                for k0 in 0..ranges[0].len {
                    if !f([self.range_index(0, ranges[0], k0), i1, i2]) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn checked_point(&self, p: &[f64; 3], q: usize) -> Result<()> {
        if q >= self.n_modes {
            return Err(Error::InvalidMode(q));
        }
        if !self.in_box(p) {
            return Err(Error::OutsideGrid);
        }
        Ok(())
    }

    /// All grid indices whose cell contains `p`, sorted by linear index.
    pub fn snap(&self, p: [f64; 3], q: usize) -> Result<Vec<GridIndex>> {
        self.ball_indices(p, q, self.r)
    }

    /// All grid indices within infinity distance `radius` of `p` in mode `q`,
    /// sorted by linear index.
    pub fn ball_indices(&self, p: [f64; 3], q: usize, radius: f64) -> Result<Vec<GridIndex>> {
        self.checked_point(&p, q)?;
        let mut out = Vec::new();
        if let Some(ranges) = self.ball_ranges(&p, [radius; 3]) {
            self.for_each_cell(&ranges, |c| {
                out.push(GridIndex::from_cell(c, q));
                true
            });
        }
        out.sort_by_key(|i| self.linear(*i));
        out.dedup();
        Ok(out)
    }
}
