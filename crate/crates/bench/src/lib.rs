//! Benchmark fixtures.

use std::hint::black_box;
use std::sync::Arc;

use compound_forms::checks::random_mixed;
use compound_forms::{
    almost_complex_spec, apply_p, d_nabla, gradient, random_j, wedge_bilinear, BVForm, BilinearMap, BundleSpec,
    FiberTensor, GridManifold, MixedForm, OperatorSpec,
};
use criterion::{BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn torus(dim: usize, n: usize) -> Arc<GridManifold> {
    Arc::new(GridManifold::cube(dim, n).expect("resolution at least 4"))
}

/// Almost-complex spec and a seeded structure on `T^dim`.
pub fn structure(dim: usize, n: usize) -> (OperatorSpec, BVForm) {
    let m = torus(dim, n);
    let spec = almost_complex_spec(&m).expect("even dimension");
    (spec, random_j(&m, 1, 0.3).expect("small amplitude").into_form())
}

pub fn benchmarks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut g = c.benchmark_group("d");
    for n in [8, 16] {
        let m = torus(4, n);
        let t = Arc::new(BundleSpec::tangent(&m));
        let alpha = BVForm::random(&m, &t, 1, &mut rng);
        g.bench_with_input(BenchmarkId::new("T4 tangent 1-form", n), &alpha, |b, a| {
            b.iter(|| d_nabla(black_box(a)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("wedge");
    let m = torus(4, 8);
    let e = Arc::new(BundleSpec::trivial(&m, "E", 2).expect("rank 2"));
    let f = Arc::new(BundleSpec::trivial(&m, "F", 3).expect("rank 3"));
    let values: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let map = BilinearMap::new(e.clone(), f, FiberTensor::dense(2, 2, 3, &values).expect("shape")).expect("bundles");
    for (k, l) in [(1, 1), (1, 2), (2, 2)] {
        let a = BVForm::random(&m, &e, k, &mut rng);
        let b = BVForm::random(&m, &e, l, &mut rng);
        g.bench_function(BenchmarkId::new("T4 N=8", format!("{k}+{l}")), |bch| {
            bch.iter(|| wedge_bilinear(black_box(&a), black_box(&b), &map))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("apply_p");
    g.sample_size(20);
    for (dim, n) in [(2, 32), (4, 8)] {
        let (spec, j) = structure(dim, n);
        g.bench_function(BenchmarkId::new(format!("T{dim}"), n), |b| {
            b.iter(|| apply_p(&spec, black_box(&j)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("gradient");
    g.sample_size(10);
    for (dim, n) in [(2, 16), (4, 8)] {
        let (spec, j) = structure(dim, n);
        let mut gamma = MixedForm::from_form(j);
        gamma
            .axpy(1.0, &random_mixed(&spec, &mut rng, 0.1))
            .expect("same bundle");
        g.bench_function(BenchmarkId::new(format!("T{dim}"), n), |b| {
            b.iter(|| gradient(&spec, black_box(&gamma)))
        });
    }
    g.finish();
}
