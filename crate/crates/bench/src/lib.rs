//! Criterion benchmarks for the walkpose pipeline; see `benches/`.
