use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sparsevar::io::{write_heatmap_pgm, write_mask_pgm, write_ppm};
use sparsevar::{ImageGrid, Mask, ScalarGrid};

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn with_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut f = create(path)?;
    body(&mut f)?;
    f.flush().with_context(|| format!("cannot write {}", path.display()))
}

pub fn text(path: &Path, body: &str) -> anyhow::Result<()> {
    with_file(path, |f| Ok(f.write_all(body.as_bytes())?))
}

pub fn json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    text(path, &body)
}

pub fn ppm(path: &Path, image: &ImageGrid) -> anyhow::Result<()> {
    with_file(path, |f| Ok(write_ppm(f, image)?))
}

pub fn mask(path: &Path, m: &Mask) -> anyhow::Result<()> {
    with_file(path, |f| Ok(write_mask_pgm(f, m)?))
}

pub fn heatmap(path: &Path, map: &ScalarGrid) -> anyhow::Result<()> {
    with_file(path, |f| Ok(write_heatmap_pgm(f, map)?))
}
