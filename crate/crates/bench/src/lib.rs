//! Criterion benchmarks for `cqb-core`; see `benches/`.
