//! Criterion benchmarks for the sparsevar pipeline live under `benches/`.

pub use sparsevar;
