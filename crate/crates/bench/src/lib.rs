//! Criterion benchmarks for the core hot paths; see `benches/`.
