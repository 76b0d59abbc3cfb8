//! Benchmarks live in `benches/`; run them with `cargo bench -p a2d-bench`.
