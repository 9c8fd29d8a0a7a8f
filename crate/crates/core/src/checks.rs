//! Invariant suites with measured error against a pinned tolerance.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::accomplex::{run_corpus, CorpusEntry, Verdict};
use crate::bundle::{ActionSpec, BilinearMap, BundleSpec, FiberTensor};
use crate::calculus::{d_truncated, delta_truncated, TruncationList};
use crate::forms::{wedge_bilinear, BVForm, MixedForm};
use crate::geometry::GridManifold;
use crate::multiindex::{binomial, elements, Basis};
use crate::operator::{functional, gradient, OperatorSpec};

pub const ADJOINT_TOLERANCE: f64 = 1e-12;
pub const STAR_TOLERANCE: f64 = 1e-12;
pub const WEDGE_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Central-difference step of the gradient check.
pub const FD_STEP: f64 = 1e-4;

/// Deliberate defects for exercising the failure paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// `δ` scaled by `1 + 1e−6`.
    BrokenAdjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub label: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Measurement {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub measurements: Vec<Measurement>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            measurements: Vec::new(),
        }
    }

    fn push(&mut self, label: String, error: f64, tolerance: f64) {
        self.measurements.push(Measurement {
            label,
            error,
            tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        !self.measurements.is_empty() && self.measurements.iter().all(Measurement::passed)
    }

    pub fn worst(&self) -> f64 {
        self.measurements
            .iter()
            .map(|m| m.error / m.tolerance.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}] {}", if self.passed() { "pass" } else { "FAIL" }, self.name)?;
        for m in &self.measurements {
            writeln!(
                f,
                "  {} {:<48} error {:.3e}  tolerance {:.1e}",
                if m.passed() { "ok  " } else { "FAIL" },
                m.label,
                m.error,
                m.tolerance
            )?;
        }
        Ok(())
    }
}

/// The truncation lists `[]`, `[k]` and `[k, k+2]` that fit in dimension `n`.
pub fn truncation_family(k: usize, n: usize) -> Vec<TruncationList> {
    let mut out = vec![TruncationList::empty()];
    if k <= n {
        out.push(TruncationList::new(vec![k]).expect("single degree"));
    }
    if k + 2 <= n {
        out.push(TruncationList::new(vec![k, k + 2]).expect("increasing"));
    }
    out
}

/// `|⟨⟨dα, β⟩⟩ − ⟨⟨α, δβ⟩⟩| / (‖α‖‖β‖)` for every degree and truncation.
pub fn adjointness_suite(
    bundle: &Arc<BundleSpec>,
    manifold: &Arc<GridManifold>,
    k: usize,
    seed: u64,
    fault: Fault,
) -> SuiteReport {
    let mut report = SuiteReport::new("adjointness of d and delta");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = manifold.dim();
    for trunc in truncation_family(k, n) {
        for i in 0..n {
            let alpha = BVForm::random(manifold, bundle, i, &mut rng);
            let beta = BVForm::random(manifold, bundle, i + 1, &mut rng);
            let lhs = d_truncated(&alpha, &trunc).l2_inner(&beta).unwrap_or(f64::NAN);
            let mut db = delta_truncated(&beta, &trunc).expect("degree at least 1");
            if fault == Fault::BrokenAdjoint {
                db = db.scale(1.0 + 1e-6);
            }
            let rhs = alpha.l2_inner(&db).unwrap_or(f64::NAN);
            let error = (lhs - rhs).abs() / (alpha.l2_norm() * beta.l2_norm());
            report.push(
                format!("degree {i}, truncation {:?}", trunc.degrees()),
                error,
                ADJOINT_TOLERANCE,
            );
        }
    }
    report
}

/// `⋆⋆ = (−1)^{k(n−k)}` and `α ∧_h ⋆α′ = ⟨α, α′⟩ vol` pointwise.
pub fn star_suite(bundle: &Arc<BundleSpec>, manifold: &Arc<GridManifold>, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("Hodge star contract");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = manifold.dim();
    let vol = manifold.volume_density();
    for k in 0..=n {
        let a = BVForm::random(manifold, bundle, k, &mut rng);
        let b = BVForm::random(manifold, bundle, k, &mut rng);
        let sign = if (k * (n - k)).is_multiple_of(2) { 1.0 } else { -1.0 };
        let error = match a.hodge_star().and_then(|s| s.hodge_star()) {
            Ok(ss) => {
                ss.coefficients()
                    .iter()
                    .zip(a.coefficients())
                    .map(|(x, y)| (x - sign * y).abs())
                    .fold(0.0, f64::max)
                    / a.max_abs().max(1.0)
            }
            Err(_) => f64::NAN,
        };
        report.push(format!("star star on degree {k}"), error, STAR_TOLERANCE);
        let error = match (a.hodge_star().and_then(|s| b.wedge_h(&s)), a.pointwise_inner(&b)) {
            (Ok(top), Ok(inner)) => top
                .coefficients()
                .iter()
                .zip(&inner)
                .map(|(t, i)| (t - i * vol).abs())
                .fold(0.0, f64::max),
            _ => f64::NAN,
        };
        report.push(format!("defining property on degree {k}"), error, STAR_TOLERANCE);
    }
    report
}

/// All permutations of `0..m` with their signs.
fn permutations(m: usize) -> Vec<(Vec<usize>, f64)> {
    if m == 0 {
        return vec![(Vec::new(), 1.0)];
    }
    let mut out = Vec::new();
    for (perm, sign) in permutations(m - 1) {
        // insert m-1 at position j: moves it past m-1-j entries
        for j in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(j, m - 1);
            let s = if (m - 1 - j).is_multiple_of(2) { sign } else { -sign };
            out.push((p, s));
        }
    }
    out
}

/// `(α∧β)(e_L) = 1/(k! l!) Σ_σ sgn σ · B(α(e_{σ(1..k)}), β(e_{σ(k+1..)}))`
/// evaluated directly from antisymmetric evaluation of the factors.
pub fn permutation_wedge(alpha: &BVForm, beta: &BVForm, map: &BilinearMap, p: usize, tuple: &[usize]) -> Vec<f64> {
    let (k, l) = (alpha.degree(), beta.degree());
    let (ma, mb, mz) = map.tensor().shape();
    let dense = map.tensor().to_dense();
    let fact = |m: usize| (1..=m).map(|v| v as f64).product::<f64>();
    let mut out = vec![0.0; mz];
    for (perm, sign) in permutations(k + l) {
        let first: Vec<usize> = perm[..k].iter().map(|&i| tuple[i]).collect();
        let second: Vec<usize> = perm[k..].iter().map(|&i| tuple[i]).collect();
        for u in 0..ma {
            let au = alpha.eval(p, &first, u);
            if au == 0.0 {
                continue;
            }
            for v in 0..mb {
                let bv = beta.eval(p, &second, v);
                for (w, o) in out.iter_mut().enumerate() {
                    *o += sign * dense[(u * mb + v) * mz + w] * au * bv;
                }
            }
        }
    }
    let norm = fact(k) * fact(l);
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Shuffle wedge against [`permutation_wedge`] for all `k + l ≤ n`.
pub fn wedge_suite(manifold: &Arc<GridManifold>, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("wedge against permutation sum");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = manifold.dim();
    let e = Arc::new(BundleSpec::trivial(manifold, "E", 2).expect("rank 2"));
    let f = Arc::new(BundleSpec::trivial(manifold, "F", 3).expect("rank 3"));
    let values: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.91 + 0.3).sin()).collect();
    let map = BilinearMap::new(e.clone(), f, FiberTensor::dense(2, 2, 3, &values).expect("shape")).expect("bundles");
    let basis = Basis::get(n);
    let points = manifold.num_points().min(8);
    for k in 0..=n {
        for l in 0..=(n - k) {
            let a = BVForm::random(manifold, &e, k, &mut rng);
            let b = BVForm::random(manifold, &e, l, &mut rng);
            let error = match wedge_bilinear(&a, &b, &map) {
                Ok(w) => {
                    let mut worst: f64 = 0.0;
                    for p in 0..points {
                        for &mask in basis.masks(k + l) {
                            let tuple = elements(mask);
                            let oracle = permutation_wedge(&a, &b, &map, p, &tuple);
                            for (c, o) in oracle.iter().enumerate() {
                                worst = worst.max((w.get(p, mask, c) - o).abs());
                            }
                        }
                    }
                    worst
                }
                Err(_) => f64::NAN,
            };
            report.push(
                format!("degrees ({k}, {l}), {} components", binomial(n, k + l)),
                error,
                WEDGE_TOLERANCE,
            );
        }
    }
    report
}

/// Random mixed form with every degree present, scaled by `scale`.
pub fn random_mixed(spec: &OperatorSpec, rng: &mut ChaCha8Rng, scale: f64) -> MixedForm {
    let (m, e) = (spec.manifold(), spec.bundle());
    let mut out = MixedForm::new(m, e);
    for d in 0..=m.dim() {
        out.add_part(BVForm::random(m, e, d, rng).scale(scale))
            .expect("same bundle");
    }
    out
}

/// Relative error of `⟨⟨grad, β⟩⟩` against a central difference of the
/// functional along `β`.
pub fn gradient_fd_error(spec: &OperatorSpec, gamma: &MixedForm, beta: &MixedForm) -> f64 {
    let run = || -> Result<f64, crate::operator::OperatorError> {
        let analytic = gradient(spec, gamma)?.l2_inner(beta)?;
        let mut plus = gamma.clone();
        plus.axpy(FD_STEP, beta)?;
        let mut minus = gamma.clone();
        minus.axpy(-FD_STEP, beta)?;
        let fd = (functional(spec, &plus)? - functional(spec, &minus)?) / (2.0 * FD_STEP);
        Ok((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(f64::MIN_POSITIVE))
    };
    run().unwrap_or(f64::NAN)
}

pub fn gradient_suite(spec: &OperatorSpec, seed: u64, samples: usize) -> SuiteReport {
    let mut report = SuiteReport::new("gradient against finite differences");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..samples {
        let gamma = random_mixed(spec, &mut rng, 1.0);
        let beta = random_mixed(spec, &mut rng, 1.0);
        report.push(
            format!("sample {s}"),
            gradient_fd_error(spec, &gamma, &beta),
            GRADIENT_TOLERANCE,
        );
    }
    report
}

/// Disagreements between the operator and the Nijenhuis oracle over
/// `seeds` on `T^dims` for each entry of `dims`.
pub fn oracle_suite(dims: &[usize], resolution: usize, seeds: u64, amplitude: f64) -> SuiteReport {
    let mut report = SuiteReport::new("operator against Nijenhuis oracle");
    for &d in dims {
        let entries: Vec<CorpusEntry> = (0..seeds)
            .map(|seed| CorpusEntry {
                seed,
                amplitude,
                dims: d,
                resolution,
            })
            .collect();
        let error = match run_corpus(&entries) {
            Ok(rows) => rows.iter().filter(|r| r.verdict == Verdict::Disagree).count() as f64,
            Err(_) => f64::NAN,
        };
        report.push(
            format!("T^{d}, N={resolution}, {seeds} fields: disagreements"),
            error,
            0.0,
        );
    }
    report
}

/// Operator with every term active: fiberwise actions on a rank-2 bundle,
/// `k = 0`, so `q₁(l) = 5l+1` and `q₂(l) = q₃(l) = 3l+1`.
pub fn bilinear_example_spec(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>) -> OperatorSpec {
    let m = bundle.rank();
    let e1 = Arc::new(BundleSpec::trivial(manifold, "E'", 2).expect("rank 2"));
    let e2 = Arc::new(BundleSpec::trivial(manifold, "E''", 3).expect("rank 3"));
    let vals = |len: usize, s: f64| (0..len).map(|i| ((i as f64 + 1.0) * s).sin()).collect::<Vec<_>>();
    let phi = BilinearMap::new(
        bundle.clone(),
        e1.clone(),
        FiberTensor::dense(m, m, 2, &vals(m * m * 2, 0.7)).expect("shape"),
    )
    .expect("bundles");
    let psi = BilinearMap::new(
        bundle.clone(),
        e2.clone(),
        FiberTensor::dense(m, m, 3, &vals(m * m * 3, 1.3)).expect("shape"),
    )
    .expect("bundles");
    let left = ActionSpec::fiberwise(e1, FiberTensor::dense(2, m, m, &vals(2 * m * m, 2.1)).expect("shape"));
    let right = ActionSpec::fiberwise(e2, FiberTensor::dense(m, 3, m, &vals(3 * m * m, 0.4)).expect("shape"));
    OperatorSpec::builder(manifold, bundle, 0)
        .coefficients([0.7, -1.1, 0.9, 1.3])
        .trunc(TruncationList::new(vec![0]).expect("single degree"))
        .phi(phi, left)
        .psi(psi, right)
        .build()
        .expect("consistent bundles")
}
