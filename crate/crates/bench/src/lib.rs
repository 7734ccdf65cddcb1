//! Criterion benchmarks for the synthaug kernels live under `benches/`.
