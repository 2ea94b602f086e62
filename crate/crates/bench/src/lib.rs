//! Criterion benchmarks for the weight solver, the jackknife and the full
//! pipeline; see `benches/pipeline.rs`.
