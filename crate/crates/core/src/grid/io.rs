//! Binary kernel files.
//!
//! Layout, all numbers little-endian:
//!
//! ```text
//! magic      4 bytes  "VIAK"
//! version    u32
//! lo[3]      f64 x 3
//! hi[3]      f64 x 3
//! r          f64
//! counts[3]  u64 x 3
//! n_modes    u64
//! wrap       u64      bit a set when axis a wraps
//! membership n_modes slices of ceil(cells / 8) bytes, bit k of a slice is
//!            the cell with linear position k (i_x fastest)
//! layers     u64      0 or n_modes
//! layer u    same shape as membership: bit set where input u is safe
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GridSpec, KernelSet};
use crate::error::{Error, Result};

pub const KERNEL_MAGIC: &[u8; 4] = b"VIAK";
pub const KERNEL_FORMAT_VERSION: u32 = 1;

fn write_bits(w: &mut impl Write, set: &KernelSet) -> Result<()> {
    let spec = set.spec();
    let slice_bytes = spec.cells().div_ceil(8);
    for q in 0..spec.n_modes {
        let bytes: Vec<u8> = set
            .slice(q)
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(slice_bytes)
            .collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_bits(r: &mut impl Read, spec: &GridSpec) -> Result<KernelSet> {
    let cells = spec.cells();
    let slice_bytes = cells.div_ceil(8);
    let slice_words = cells.div_ceil(64);
    let mut words = Vec::with_capacity(slice_words * spec.n_modes);
    let mut buf = vec![0u8; slice_bytes];
    for _ in 0..spec.n_modes {
        r.read_exact(&mut buf)?;
        let start = words.len();
        for chunk in buf.chunks(8) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            words.push(u64::from_le_bytes(b));
        }
        if !cells.is_multiple_of(64) {
            let last = &mut words[start + slice_words - 1];
            if *last >> (cells % 64) != 0 {
                return Err(Error::Format("padding bits set".into()));
            }
        }
    }
    KernelSet::from_words(spec, words)
}

/// Writes a kernel and optionally one safe-input layer per mode.
pub fn write_kernel_file(
    path: impl AsRef<Path>,
    kernel: &KernelSet,
    layers: Option<&[KernelSet]>,
) -> Result<()> {
    let spec = kernel.spec();
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(KERNEL_MAGIC)?;
    w.write_all(&KERNEL_FORMAT_VERSION.to_le_bytes())?;
    for v in spec
        .lo
        .iter()
        .chain(&spec.hi)
        .chain(std::iter::once(&spec.r))
    {
        w.write_all(&v.to_le_bytes())?;
    }
    for c in spec.counts.iter().chain(std::iter::once(&spec.n_modes)) {
        w.write_all(&(*c as u64).to_le_bytes())?;
    }
    let wrap = spec
        .wrap
        .iter()
        .enumerate()
        .fold(0u64, |m, (a, &b)| m | (u64::from(b) << a));
    w.write_all(&wrap.to_le_bytes())?;
    write_bits(&mut w, kernel)?;
    let layers = layers.unwrap_or(&[]);
    if !layers.is_empty() && layers.len() != spec.n_modes {
        return Err(Error::Mismatch(
            "one safe-input layer per mode required".into(),
        ));
    }
    w.write_all(&(layers.len() as u64).to_le_bytes())?;
    for layer in layers {
        if !layer.spec().same_shape(spec) {
            return Err(Error::Mismatch(
                "safe-input layer grid differs from kernel grid".into(),
            ));
        }
        write_bits(&mut w, layer)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Reads a kernel file back; the layer list is empty when none were stored.
pub fn read_kernel_file(path: impl AsRef<Path>) -> Result<(KernelSet, Vec<KernelSet>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != KERNEL_MAGIC {
        return Err(Error::Format("not a kernel file".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != KERNEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported kernel format version {version}"
        )));
    }
    let mut f = [0.0; 7];
    for x in &mut f {
        *x = read_f64(&mut r)?;
    }
    let mut c = [0usize; 4];
    for x in &mut c {
        *x = usize::try_from(read_u64(&mut r)?)
            .map_err(|_| Error::Format("count overflow".into()))?;
    }
    let wrap_bits = read_u64(&mut r)?;
    let wrap = std::array::from_fn(|a| wrap_bits >> a & 1 == 1);
    let spec = GridSpec::new([f[0], f[1], f[2]], [c[0], c[1], c[2]], f[6], c[3], wrap)?;
    let hi = [f[3], f[4], f[5]];
    if spec
        .hi
        .iter()
        .zip(&hi)
        .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
    {
        return Err(Error::Format("grid bounds inconsistent with counts".into()));
    }
    let kernel = read_bits(&mut r, &spec)?;
    let n_layers = read_u64(&mut r)? as usize;
    if n_layers != 0 && n_layers != spec.n_modes {
        return Err(Error::Format(format!(
            "expected 0 or {} layers, found {n_layers}",
            spec.n_modes
        )));
    }
    let layers = (0..n_layers)
        .map(|_| read_bits(&mut r, &spec))
        .collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok((kernel, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridIndex;

    #[test]
    fn roundtrip_with_layers() {
        let spec = GridSpec::track([-1.0, 2.0], [9, 5], 6, 3).unwrap();
        let mut k = KernelSet::empty(&spec);
        k.set(GridIndex::new(8, 4, 5, 2), true).unwrap();
        k.set(GridIndex::new(0, 0, 0, 0), true).unwrap();
        let mut layer = KernelSet::empty(&spec);
        layer.set(GridIndex::new(8, 4, 5, 2), true).unwrap();
        let layers = vec![layer.clone(), KernelSet::empty(&spec), layer];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.viak");
        write_kernel_file(&path, &k, Some(&layers)).unwrap();
        let (k2, l2) = read_kernel_file(&path).unwrap();
        assert_eq!(k2, k);
        assert_eq!(l2, layers);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"VIAK");
        let slice_bytes = spec.cells().div_ceil(8);
        assert_eq!(
            bytes.len(),
            4 + 4 + 7 * 8 + 5 * 8 + 3 * slice_bytes + 8 + 3 * 3 * slice_bytes
        );
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(matches!(read_kernel_file(&path), Err(Error::Format(_))));
    }
}
