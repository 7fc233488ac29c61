//! Binary grid files, CSV tables and netpbm image dumps.
//!
//! Grid files are a 16-byte header (`b"SSGR"`, then `h`, `w`, `c` as
//! little-endian `u32`) followed by `h * w * c` little-endian `f64` values in
//! row-major, channel-innermost order.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{Grid, ImageGrid, Mask, ScalarGrid};

pub const GRID_MAGIC: &[u8; 4] = b"SSGR";

pub(crate) fn write_header(out: &mut impl Write, magic: &[u8; 4], dims: [u32; 3]) -> Result<()> {
    out.write_all(magic)?;
    for d in dims {
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_header(input: &mut impl Read, magic: &[u8; 4]) -> Result<[u32; 3]> {
    let mut buf = [0u8; 16];
    input.read_exact(&mut buf)?;
    if &buf[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let word = |k: usize| u32::from_le_bytes(buf[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    Ok([word(0), word(1), word(2)])
}

pub(crate) fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds u32")))
}

pub fn write_grid(out: &mut impl Write, grid: &Grid) -> Result<()> {
    write_header(out, GRID_MAGIC, [dim(grid.h())?, dim(grid.w())?, dim(grid.c())?])?;
    write_f64s(out, grid.data())
}

pub fn read_grid(input: &mut impl Read) -> Result<Grid> {
    let [h, w, c] = read_header(input, GRID_MAGIC)?;
    let (h, w, c) = (h as usize, w as usize, c as usize);
    let data = read_f64s(input, h * w * c)?;
    Grid::new(h, w, c, data)
}

/// Scalar grids are stored as one-channel grids.
pub fn write_scalar_grid(out: &mut impl Write, grid: &ScalarGrid) -> Result<()> {
    write_grid(out, &grid.to_grid())
}

pub fn read_scalar_grid(input: &mut impl Read) -> Result<ScalarGrid> {
    let g = read_grid(input)?;
    if g.c() != 1 {
        return Err(Error::Format(format!("expected 1 channel, found {}", g.c())));
    }
    Ok(g.channel(0))
}

/// One CSV row per grid row, values in shortest round-trip form.
pub fn scalar_grid_csv(grid: &ScalarGrid) -> String {
    let mut s = String::new();
    for i in 0..grid.h() {
        let row: Vec<String> = (0..grid.w()).map(|j| format!("{}", grid.get(i, j))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Image channels as consecutive CSV blocks, each preceded by `# channel N`.
pub fn image_csv(image: &ImageGrid) -> String {
    let mut s = String::new();
    for ch in 0..image.c() {
        let _ = writeln!(s, "# channel {ch}");
        s.push_str(&scalar_grid_csv(&image.channel(ch)));
    }
    s
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6). Values in `[-1, 1]` map linearly onto `0..=255`.
pub fn write_ppm(out: &mut impl Write, image: &ImageGrid) -> Result<()> {
    if image.c() != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM needs 3 channels, image has {}",
            image.c()
        )));
    }
    write!(out, "P6\n{} {}\n255\n", image.w(), image.h())?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte((v + 1.0) / 2.0)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

fn write_pgm_bytes(out: &mut impl Write, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(bytes)?;
    Ok(())
}

/// Binary PGM (P5) of a mask: 255 where `active`, 0 elsewhere.
pub fn write_mask_pgm(out: &mut impl Write, active: &Mask) -> Result<()> {
    let bytes: Vec<u8> = active.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm_bytes(out, active.h(), active.w(), &bytes)
}

/// Binary PGM heatmap with a linear ramp normalized to the map's maximum.
/// An all-zero map renders black.
pub fn write_heatmap_pgm(out: &mut impl Write, map: &ScalarGrid) -> Result<()> {
    let max = map.max();
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if max > 0.0 { to_byte(v / max) } else { 0 })
        .collect();
    write_pgm_bytes(out, map.h(), map.w(), &bytes)
}
