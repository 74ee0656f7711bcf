//! Criterion benchmarks for the `roofseg` crate. Run with `cargo bench -p roofseg-bench`.
