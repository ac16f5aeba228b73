//! Criterion benchmarks for the decoding kernels live in `benches/`.
