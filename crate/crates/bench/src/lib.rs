//! Criterion benchmarks for the tensor kernels and the desk model; see `benches/`.
