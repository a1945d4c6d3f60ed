//! Criterion benchmarks for the structure builder; see `benches/`.
