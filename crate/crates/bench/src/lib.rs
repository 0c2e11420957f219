//! Criterion benchmarks for the tensor kernels, the toy network and the
//! rasterizer live under `benches/`; run them with `cargo bench -p damd-bench`.
