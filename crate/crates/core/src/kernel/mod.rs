//! Finite viability and discriminating kernels over a [`GridSpec`], safe-input
//! tables and comparison/export helpers.

mod discriminating;
mod dynamics;
mod export;
mod viability;

pub use discriminating::{
    covers, disc_kernel_modified, input_box, DisturbanceGrid, UnionRule, VBox,
};
pub use dynamics::{DisturbanceModel, GridDynamics, PathDynamics};
pub use export::{read_slice_csv, slice, write_slice_csv, write_slice_pgm, Raster};
pub use viability::viability_kernel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_kernel_file, write_kernel_file, GridIndex, GridSpec, KernelSet, ModeMask};

/// Default clearance of the constraint set from the track boundary.
pub const DEFAULT_MARGIN: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Viability,
    Discriminating,
}

/// Per grid index, the inputs under which the index stays in its kernel.
/// Stored as one membership layer per input.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeInputTable {
    layers: Vec<KernelSet>,
}

impl SafeInputTable {
    pub fn new(layers: Vec<KernelSet>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::InvalidParams("no safe-input layers".into()));
        };
        if layers.len() != first.spec().n_modes
            || layers.iter().any(|l| !l.spec().same_shape(first.spec()))
        {
            return Err(Error::Mismatch(
                "one safe-input layer per mode over one grid required".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[KernelSet] {
        &self.layers
    }

    pub fn mask_cell(&self, cell: [usize; 3], q: usize) -> ModeMask {
        let mut m = ModeMask::EMPTY;
        for (u, layer) in self.layers.iter().enumerate() {
            if layer.get_cell(cell, q) {
                m.insert(u);
            }
        }
        m
    }

    /// Stored mask, empty for indices outside the grid.
    pub fn mask(&self, idx: GridIndex) -> ModeMask {
        match self.layers[0].spec().validate_index(idx) {
            Ok(()) => self.mask_cell(idx.cell(), idx.q),
            Err(_) => ModeMask::EMPTY,
        }
    }

    /// Bytes of table storage.
    pub fn memory_bytes(&self) -> usize {
        self.layers.iter().map(KernelSet::memory_bytes).sum()
    }
}

/// Output of a kernel computation.
#[derive(Debug, Clone)]
pub struct KernelResult {
    pub kind: KernelKind,
    pub kernel: KernelSet,
    pub safe: SafeInputTable,
    /// Sweeps that removed at least one point.
    pub iterations: usize,
    /// Member count after each sweep, starting with the constraint set.
    pub trace: Vec<usize>,
}

impl KernelResult {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        write_kernel_file(path, &self.kernel, Some(self.safe.layers()))
    }
}

/// Kernel and safe-input table read back from a kernel file.
pub fn load_kernel(path: impl AsRef<std::path::Path>) -> Result<(KernelSet, SafeInputTable)> {
    let (kernel, layers) = read_kernel_file(path)?;
    if layers.is_empty() {
        return Err(Error::Format(
            "kernel file carries no safe-input table".into(),
        ));
    }
    Ok((kernel, SafeInputTable::new(layers)?))
}

/// Stored safe inputs for `idx`; empty outside the kernel.
pub fn safe_inputs(idx: GridIndex, kernel: &KernelSet, table: &SafeInputTable) -> ModeMask {
    if kernel.contains(idx) {
        table.mask(idx)
    } else {
        ModeMask::EMPTY
    }
}

/// Share of constraint-set points that belong to the kernel; zero for an empty
/// constraint set.
pub fn fraction(kernel: &KernelSet, k_h: &KernelSet) -> Result<f64> {
    if !kernel.spec().same_shape(k_h.spec()) {
        return Err(Error::Mismatch(
            "kernel and constraint set over different grids".into(),
        ));
    }
    let total = k_h.count();
    Ok(if total == 0 {
        0.0
    } else {
        kernel.count() as f64 / total as f64
    })
}

/// Pairwise comparison of two kernels over the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub count_a: usize,
    pub count_b: usize,
    pub fraction_a: f64,
    pub fraction_b: f64,
    /// Members of `a` missing from `b`.
    pub a_not_in_b: usize,
    pub b_not_in_a: usize,
    pub a_subset_of_b: bool,
}

pub fn compare(a: &KernelSet, b: &KernelSet, k_h: &KernelSet) -> Result<Comparison> {
    let a_not_in_b = a.count_outside(b)?;
    Ok(Comparison {
        count_a: a.count(),
        count_b: b.count(),
        fraction_a: fraction(a, k_h)?,
        fraction_b: fraction(b, k_h)?,
        a_not_in_b,
        b_not_in_a: b.count_outside(a)?,
        a_subset_of_b: a_not_in_b == 0,
    })
}

/// Analytic memory of kernel plus safe-input table: one bit per grid index,
/// plus one bit per grid index and input.
pub fn analytic_memory_bytes(spec: &GridSpec) -> usize {
    spec.len().div_ceil(8) * (1 + spec.n_modes)
}

/// Runs a synchronous sweep. `keep(cell, alive)` receives the mode mask of a
/// cell alive in `current` and returns the modes that survive; cells are
/// evaluated independently so the result does not depend on scheduling.
pub(crate) fn sweep<F>(current: &KernelSet, keep: F) -> KernelSet
where
    F: Fn([usize; 3], ModeMask) -> ModeMask + Sync,
{
    let spec = current.spec();
    let cells = spec.cells();
    let n_modes = spec.n_modes;
    let words = current.slice_words();
    let per_word: Vec<Vec<u64>> = (0..words)
        .into_par_iter()
        .map(|w| {
            let mut out = vec![0u64; n_modes];
            let mut any = 0u64;
            for q in 0..n_modes {
                any |= current.slice(q)[w];
            }
            while any != 0 {
                let b = any.trailing_zeros() as usize;
                any &= any - 1;
                let k = w * 64 + b;
                if k >= cells {
                    break;
                }
                let alive: ModeMask = (0..n_modes)
                    .filter(|&q| current.slice(q)[w] >> b & 1 == 1)
                    .collect();
                let kept = keep(spec.cell_from_linear(k), alive);
                for q in kept.iter() {
                    out[q] |= 1 << b;
                }
            }
            out
        })
        .collect();
    let mut next = KernelSet::empty(spec);
    for (w, out) in per_word.into_iter().enumerate() {
        for (q, bits) in out.into_iter().enumerate() {
            next.slice_mut(q)[w] = bits & current.slice(q)[w];
        }
    }
    next
}

/// Iterates `step` from `k_h` until nothing changes.
pub(crate) fn fixed_point(
    k_h: &KernelSet,
    mut step: impl FnMut(&KernelSet) -> KernelSet,
) -> (KernelSet, usize, Vec<usize>) {
    let mut current = k_h.clone();
    let mut trace = vec![current.count()];
    let mut iterations = 0;
    if current.is_empty() {
        return (current, 0, trace);
    }
    loop {
        let next = step(&current);
        let count = next.count();
        trace.push(count);
        if next == current {
            return (current, iterations, trace);
        }
        iterations += 1;
        log::debug!("sweep {iterations}: {count} points");
        current = next;
    }
}

/// Builds one safe-input layer per input from a per-cell mask function.
pub(crate) fn safe_layers<F>(kernel: &KernelSet, mask: F) -> SafeInputTable
where
    F: Fn([usize; 3], usize) -> ModeMask + Sync,
{
    let spec = kernel.spec();
    let members: Vec<GridIndex> = kernel.iter().collect();
    let masks: Vec<ModeMask> = members.par_iter().map(|i| mask(i.cell(), i.q)).collect();
    let mut layers = vec![KernelSet::empty(spec); spec.n_modes];
    for (idx, m) in members.iter().zip(masks) {
        let k = spec.cell_linear(idx.cell());
        for u in m.iter() {
            layers[u].set_linear(idx.q, k, true);
        }
    }
    SafeInputTable { layers }
}

/// Whether every grid point in the product of ranges is in mode slice `u`.
pub(crate) fn ball_inside(set: &KernelSet, ranges: &[crate::grid::AxisRange; 3], u: usize) -> bool {
    set.spec().for_each_cell(ranges, |c| set.get_cell(c, u))
}

/// Whether some grid point in the product of ranges is in mode slice `u`.
pub(crate) fn ball_meets(set: &KernelSet, ranges: &[crate::grid::AxisRange; 3], u: usize) -> bool {
    !set.spec().for_each_cell(ranges, |c| !set.get_cell(c, u))
}

/// Ball ranges around `p` that lie wholly within the covered grid box.
pub(crate) fn contained_ranges(
    spec: &GridSpec,
    p: &[f64; 3],
    radius: [f64; 3],
) -> Option<[crate::grid::AxisRange; 3]> {
    for a in 0..3 {
        if !spec.wrap[a]
            && (p[a] - radius[a] < spec.lo[a] - spec.r || p[a] + radius[a] > spec.hi[a] + spec.r)
        {
            return None;
        }
    }
    spec.ball_ranges(p, radius)
}
