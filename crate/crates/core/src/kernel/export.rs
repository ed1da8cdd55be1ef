use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::KernelSet;

/// `X`-`Y` membership raster of one heading plane and mode. Row `j` holds
/// `i_y = j`, column `i` holds `i_x = i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub i_phi: usize,
    pub q: usize,
    pub bits: Vec<bool>,
}

impl Raster {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.width + i]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Slice through the kernel at the heading plane nearest to `phi`.
pub fn slice(kernel: &KernelSet, phi: f64, q: usize) -> Result<Raster> {
    let spec = kernel.spec();
    if q >= spec.n_modes {
        return Err(Error::InvalidMode(q));
    }
    if !phi.is_finite() {
        return Err(Error::InvalidParams("heading must be finite".into()));
    }
    let n_phi = spec.counts[2];
    let t = (spec.normalize([0.0, 0.0, phi])[2] - spec.lo[2]) / spec.spacing();
    let i_phi = (t.round() as usize) % n_phi;
    let (w, h) = (spec.counts[0], spec.counts[1]);
    let base = i_phi * w * h;
    let bits = (0..w * h).map(|k| kernel.get_linear(q, base + k)).collect();
    Ok(Raster {
        width: w,
        height: h,
        i_phi,
        q,
        bits,
    })
}

/// Binary portable graymap, `Y` increasing upwards; members are white.
pub fn write_slice_pgm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", raster.width, raster.height)?;
    for j in (0..raster.height).rev() {
        let row: Vec<u8> = (0..raster.width)
            .map(|i| if raster.get(i, j) { 255 } else { 0 })
            .collect();
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One `i_x,i_y,member` row per raster cell.
pub fn write_slice_csv(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i_x", "i_y", "member"])?;
    for j in 0..raster.height {
        for i in 0..raster.width {
            w.write_record([
                i.to_string(),
                j.to_string(),
                u8::from(raster.get(i, j)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the members listed by [`write_slice_csv`] into a `width` by
/// `height` mask.
pub fn read_slice_csv(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Vec<bool>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut bits = vec![false; width * height];
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad slice row {rec:?}")))
        };
        let (i, j, m) = (field(0)?, field(1)?, field(2)?);
        if i >= width || j >= height || m > 1 {
            return Err(Error::Format(format!("slice row out of range: {rec:?}")));
        }
        bits[j * width + i] = m == 1;
    }
    Ok(bits)
}
