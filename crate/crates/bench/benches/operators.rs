use criterion::{criterion_group, criterion_main};

criterion_group!(benches, compound_forms_bench::benchmarks);
criterion_main!(benches);
