//! Criterion benchmarks for the learning loops live under `benches/`.
