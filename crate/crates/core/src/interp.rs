//! Corner-aligned bilinear upsampling and residual accumulation.
//!
//! Output row `i` of an `h`-row target samples source row
//! `i * (h_src - 1) / (h - 1)` (row 0 when `h == 1`), the same for columns.
//! Sample offsets are derived with integer arithmetic so that resizing to
//! the source resolution is an exact copy.

use crate::error::{invalid_arg, Result};
use crate::grid::{Grid, ScalarGrid};

/// One axis of the corner-aligned sampling: `(lower index, upper index, fraction)`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return Tap { lo: 0, hi: 0, t: 0.0 };
            }
            let num = i * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let rem = num % den;
            Tap {
                lo,
                hi: (lo + 1).min(src - 1),
                t: rem as f64 / den as f64,
            }
        })
        .collect()
}

/// `a + t (b - a)`, kept inside `[min(a, b), max(a, b)]`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

fn check_dims(src: (usize, usize), dst: (usize, usize)) -> Result<()> {
    if src.0 == 0 || src.1 == 0 {
        return invalid_arg("cannot interpolate an empty grid");
    }
    if dst.0 == 0 || dst.1 == 0 {
        return invalid_arg("interpolation target must be nonempty");
    }
    if dst.0 < src.0 || dst.1 < src.1 {
        return invalid_arg(format!(
            "interpolation only upsamples: {}x{} -> {}x{}",
            src.0, src.1, dst.0, dst.1
        ));
    }
    Ok(())
}

/// Bilinear upsampling of a scalar map to `h x w`.
pub fn interpolate_scalar(src: &ScalarGrid, h: usize, w: usize) -> Result<ScalarGrid> {
    check_dims((src.h(), src.w()), (h, w))?;
    if (h, w) == (src.h(), src.w()) {
        return Ok(src.clone());
    }
    let rows = taps(src.h(), h);
    let cols = taps(src.w(), w);
    ScalarGrid::from_fn(h, w, |i, j| {
        let (r, c) = (rows[i], cols[j]);
        let top = lerp(src.get(r.lo, c.lo), src.get(r.lo, c.hi), c.t);
        if r.t == 0.0 {
            return top;
        }
        let bottom = lerp(src.get(r.hi, c.lo), src.get(r.hi, c.hi), c.t);
        lerp(top, bottom, r.t)
    })
}

/// Channel-wise bilinear upsampling of a feature or logits grid.
pub fn interpolate_channels(src: &Grid, h: usize, w: usize) -> Result<Grid> {
    check_dims((src.h(), src.w()), (h, w))?;
    if (h, w) == (src.h(), src.w()) {
        return Ok(src.clone());
    }
    let rows = taps(src.h(), h);
    let cols = taps(src.w(), w);
    let c = src.c();
    let mut out = Grid::zeros(h, w, c);
    for (i, r) in rows.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            let (a, b) = (src.at(r.lo, col.lo), src.at(r.lo, col.hi));
            let (d, e) = (src.at(r.hi, col.lo), src.at(r.hi, col.hi));
            let dst = out.at_mut(i, j);
            for ch in 0..c {
                let top = lerp(a[ch], b[ch], col.t);
                dst[ch] = if r.t == 0.0 {
                    top
                } else {
                    lerp(top, lerp(d[ch], e[ch], col.t), r.t)
                };
            }
        }
    }
    Ok(out)
}

/// `interpolate(prev) + residual`, at the residual's resolution.
pub fn accumulate(prev: &Grid, residual: &Grid) -> Result<Grid> {
    if prev.c() != residual.c() {
        return invalid_arg(format!(
            "channel mismatch: accumulated map has {}, residual has {}",
            prev.c(),
            residual.c()
        ));
    }
    let up = interpolate_channels(prev, residual.h(), residual.w())?;
    let data = up.data().iter().zip(residual.data()).map(|(a, b)| a + b).collect();
    Grid::new(residual.h(), residual.w(), residual.c(), data)
}
