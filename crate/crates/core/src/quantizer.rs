//! Codebook lookup from logits to residual features, and the toy decoder
//! from accumulated features to pixels.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{FeatureGrid, Grid, ImageGrid, LogitsGrid, Mask};
use crate::io::{read_f64s, read_header, write_f64s, write_header};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"SSCB";

/// `v x c` table of unit-norm residual vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    v: usize,
    c: usize,
    table: Vec<f64>,
}

impl Codebook {
    /// Rows are normalized to unit L2 norm; an all-zero row is rejected.
    pub fn new(v: usize, c: usize, mut table: Vec<f64>) -> Result<Self> {
        if v == 0 || c == 0 || table.len() != v * c {
            return invalid_arg(format!("codebook table must be {v}x{c} and nonempty"));
        }
        if table.iter().any(|x| !x.is_finite()) {
            return invalid_arg("codebook contains non-finite values");
        }
        for row in table.chunks_exact_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return invalid_arg("codebook row has zero norm");
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self { v, c, table })
    }

    /// Gaussian rows from a ChaCha8 stream, then normalized.
    pub fn seeded(v: usize, c: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..v * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(v, c, table)
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.table[idx * self.c..(idx + 1) * self.c]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        write_header(out, CODEBOOK_MAGIC, [self.v as u32, self.c as u32, 0])?;
        write_f64s(out, &self.table)
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let [v, c, reserved] = read_header(input, CODEBOOK_MAGIC)?;
        if reserved != 0 {
            return Err(Error::Format("nonzero reserved codebook header field".into()));
        }
        let (v, c) = (v as usize, c as usize);
        let table = read_f64s(input, v * c)?;
        if v == 0 || c == 0 || table.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("empty or non-finite codebook".into()));
        }
        for row in table.chunks_exact(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("codebook row norm {norm} is not 1")));
            }
        }
        Ok(Self { v, c, table })
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy codebook lookup at `active` positions; zero vectors elsewhere.
pub fn quantize_lookup(logits: &LogitsGrid, cb: &Codebook, active: &Mask) -> Result<FeatureGrid> {
    if logits.c() != cb.v {
        return invalid_arg(format!("logits have vocabulary {}, codebook has {}", logits.c(), cb.v));
    }
    if (active.h(), active.w()) != (logits.h(), logits.w()) {
        return invalid_arg("active mask does not match the logits grid");
    }
    let mut out = Grid::zeros(logits.h(), logits.w(), cb.c);
    for (i, j) in active.positions() {
        let idx = argmax(logits.at(i, j));
        out.at_mut(i, j).copy_from_slice(cb.row(idx));
    }
    Ok(out)
}

/// Per-token linear projection to RGB followed by `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder {
    c: usize,
    /// `c x 3`, row-major.
    projection: Vec<f64>,
}

impl ToyDecoder {
    /// Standard deviation of the seeded projection entries.
    pub const GAIN: f64 = 0.6;

    pub fn new(c: usize, projection: Vec<f64>) -> Result<Self> {
        if c == 0 || projection.len() != c * 3 {
            return invalid_arg(format!("decoder projection must be {c}x3"));
        }
        if projection.iter().any(|x| !x.is_finite()) {
            return invalid_arg("decoder projection contains non-finite values");
        }
        Ok(Self { c, projection })
    }

    pub fn seeded(c: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0_de00);
        let projection = (0..c * 3)
            .map(|_| Self::GAIN * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(c, projection)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn decode_token(&self, r: &[f64]) -> [f64; 3] {
        let mut px = [0.0; 3];
        for (x, row) in r.iter().zip(self.projection.chunks_exact(3)) {
            for (p, w) in px.iter_mut().zip(row) {
                *p += x * w;
            }
        }
        px.map(f64::tanh)
    }

    pub fn decode(&self, r: &FeatureGrid) -> Result<ImageGrid> {
        if r.c() != self.c {
            return invalid_arg(format!(
                "feature map has {} channels, decoder expects {}",
                r.c(),
                self.c
            ));
        }
        Grid::from_fn(r.h(), r.w(), 3, |i, j| self.decode_token(r.at(i, j)).to_vec())
    }
}
