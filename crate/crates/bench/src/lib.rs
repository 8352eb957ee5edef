//! Benchmarks for sdeldp; see `benches/`.
