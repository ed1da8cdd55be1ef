use serde::{Deserialize, Serialize};

use super::{GridIndex, GridSpec};
use crate::error::{Error, Result};

/// Upper bound on modes per grid, fixed by the width of [`ModeMask`].
pub const MAX_MODES: usize = 256;

/// Fixed-width bit mask over mode ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModeMask(pub [u64; 4]);

impl ModeMask {
    pub const EMPTY: ModeMask = ModeMask([0; 4]);

    pub fn all(n: usize) -> Self {
        let mut m = Self::EMPTY;
        for u in 0..n {
            m.insert(u);
        }
        m
    }

    pub fn single(u: usize) -> Self {
        let mut m = Self::EMPTY;
        m.insert(u);
        m
    }

    pub fn insert(&mut self, u: usize) {
        self.0[u >> 6] |= 1 << (u & 63);
    }

    pub fn remove(&mut self, u: usize) {
        self.0[u >> 6] &= !(1 << (u & 63));
    }

    pub fn contains(&self, u: usize) -> bool {
        u < MAX_MODES && self.0[u >> 6] >> (u & 63) & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union(self, other: ModeMask) -> ModeMask {
        ModeMask(std::array::from_fn(|i| self.0[i] | other.0[i]))
    }

    pub fn intersect(self, other: ModeMask) -> ModeMask {
        ModeMask(std::array::from_fn(|i| self.0[i] & other.0[i]))
    }

    /// Members in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                (w != 0).then(|| {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    k * 64 + b
                })
            })
        })
    }
}

impl FromIterator<usize> for ModeMask {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut m = ModeMask::EMPTY;
        for u in iter {
            m.insert(u);
        }
        m
    }
}

/// One membership bit per grid index.
///
/// Each mode slice starts on a fresh 64-bit word; inside a slice bit `k`
/// belongs to the cell with linear position `k` (`i_x` fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    spec: GridSpec,
    slice_words: usize,
    bits: Vec<u64>,
}

impl KernelSet {
    pub fn empty(spec: &GridSpec) -> Self {
        let slice_words = spec.cells().div_ceil(64);
        Self {
            spec: spec.clone(),
            slice_words,
            bits: vec![0; slice_words * spec.n_modes],
        }
    }

    pub fn full(spec: &GridSpec) -> Self {
        let mut s = Self::empty(spec);
        for q in 0..spec.n_modes {
            s.fill_slice(q, true);
        }
        s
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn slice_words(&self) -> usize {
        self.slice_words
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.bits
    }

    /// Words of one mode slice.
    pub fn slice(&self, q: usize) -> &[u64] {
        &self.bits[q * self.slice_words..(q + 1) * self.slice_words]
    }

    pub fn slice_mut(&mut self, q: usize) -> &mut [u64] {
        &mut self.bits[q * self.slice_words..(q + 1) * self.slice_words]
    }

    fn fill_slice(&mut self, q: usize, value: bool) {
        let cells = self.spec.cells();
        let words = self.slice_mut(q);
        words.fill(if value { u64::MAX } else { 0 });
        if value && !cells.is_multiple_of(64) {
            *words.last_mut().expect("slice has words") = (1u64 << (cells % 64)) - 1;
        }
    }

    #[inline]
    pub fn get_cell(&self, cell: [usize; 3], q: usize) -> bool {
        let k = self.spec.cell_linear(cell);
        self.bits[q * self.slice_words + (k >> 6)] >> (k & 63) & 1 == 1
    }

    #[inline]
    pub fn get_linear(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.slice_words + (k >> 6)] >> (k & 63) & 1 == 1
    }

    pub fn set_linear(&mut self, q: usize, k: usize, value: bool) {
        let w = &mut self.bits[q * self.slice_words + (k >> 6)];
        if value {
            *w |= 1 << (k & 63);
        } else {
            *w &= !(1 << (k & 63));
        }
    }

    pub fn contains(&self, idx: GridIndex) -> bool {
        self.spec.validate_index(idx).is_ok() && self.get_cell(idx.cell(), idx.q)
    }

    pub fn set(&mut self, idx: GridIndex, value: bool) -> Result<()> {
        self.spec.validate_index(idx)?;
        let k = self.spec.cell_linear(idx.cell());
        self.set_linear(idx.q, k, value);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_mode(&self, q: usize) -> usize {
        self.slice(q).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    fn check_shape(&self, other: &KernelSet) -> Result<()> {
        if self.spec.same_shape(&other.spec) {
            Ok(())
        } else {
            Err(Error::Mismatch("kernel sets over different grids".into()))
        }
    }

    pub fn is_subset_of(&self, other: &KernelSet) -> Result<bool> {
        self.check_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0))
    }

    /// Number of members of `self` missing from `other`.
    pub fn count_outside(&self, other: &KernelSet) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & !b).count_ones() as usize)
            .sum())
    }

    pub fn intersect_with(&mut self, other: &KernelSet) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= b;
        }
        Ok(())
    }

    /// Member indices in increasing linear order.
    pub fn iter(&self) -> impl Iterator<Item = GridIndex> + '_ {
        let cells = self.spec.cells();
        (0..self.spec.n_modes).flat_map(move |q| {
            self.slice(q).iter().enumerate().flat_map(move |(wi, &w)| {
                let mut w = w;
                std::iter::from_fn(move || {
                    (w != 0).then(|| {
                        let b = w.trailing_zeros() as usize;
                        w &= w - 1;
                        wi * 64 + b
                    })
                })
                .filter(move |&k| k < cells)
                .map(move |k| GridIndex::from_cell(self.spec.cell_from_linear(k), q))
            })
        })
    }

    /// Heap bytes of the bit storage.
    pub fn memory_bytes(&self) -> usize {
        self.bits.len() * 8
    }

    pub(crate) fn from_words(spec: &GridSpec, bits: Vec<u64>) -> Result<Self> {
        let s = Self::empty(spec);
        if bits.len() != s.bits.len() {
            return Err(Error::Format("bit payload size mismatch".into()));
        }
        Ok(Self { bits, ..s })
    }
}
