//! Benchmarks for the HGV model live in `benches/`; run them with `cargo bench -p hgv-bench`.
