//! Criterion benchmarks for `qproj-core` live under `benches/`.
