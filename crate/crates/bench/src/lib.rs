//! Criterion benchmarks for the mdc-core kernels; see `benches/kernels.rs`.
