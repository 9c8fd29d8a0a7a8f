//! Almost-complex structures on flat tori, the integrability operator and a
//! Nijenhuis-tensor oracle.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{polyvector_bundle, polyvector_wedge, ActionSpec, BundleError, BundleSpec};
use crate::forms::{BVForm, FormsError};
use crate::geometry::{GeometryError, GridManifold};
use crate::multiindex::Basis;
use crate::operator::{
    apply_p, apply_p_alpha, default_truncation, matrix_of, write_matrix, OperatorError, OperatorSpec,
};

/// Pointwise tolerance on `J² + I`, relative to `max(1, |J|²)`.
pub const AC_TOLERANCE: f64 = 1e-12;
/// Torsion above this is rejected by [`integrability_residual`].
pub const TORSION_TOLERANCE: f64 = 1e-12;
/// Smallest floor a verdict may use.
pub const FLOOR_MINIMUM: f64 = 1e-12;
/// Seed of the integrable field that calibrates the floors.
pub const CALIBRATION_SEED: u64 = 0x5eed_ca1b;

#[derive(Debug, Error)]
pub enum AcError {
    #[error("almost-complex structures need even dimension, got {0}")]
    OddDimension(usize),
    #[error("J² + I reaches {defect:e} at grid point {point}")]
    NotAlmostComplex { point: usize, defect: f64 },
    #[error("expected a T_M-valued 1-form")]
    NotTangentOneForm,
    #[error("amplitude must be a finite non-negative number, got {0}")]
    Amplitude(f64),
    #[error("connection has torsion {0:e}")]
    Torsion(f64),
    #[error("constant conjugation matrix is singular or has the wrong size")]
    Conjugation,
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Forms(#[from] FormsError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `J ∈ Ω¹(M, T_M)` with `J² = −Id` at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ACStructure {
    j: BVForm,
}

impl ACStructure {
    pub fn new(j: BVForm) -> Result<Self, AcError> {
        let n = j.manifold().dim();
        if !n.is_multiple_of(2) {
            return Err(AcError::OddDimension(n));
        }
        if j.degree() != 1 || !j.bundle().is_tangent() {
            return Err(AcError::NotTangentOneForm);
        }
        let out = Self { j };
        if let Some((point, defect)) = out.worst_defect() {
            return Err(AcError::NotAlmostComplex { point, defect });
        }
        Ok(out)
    }

    fn worst_defect(&self) -> Option<(usize, f64)> {
        let n = self.dim();
        self.j
            .coefficients()
            .chunks(n * n)
            .enumerate()
            .map(|(p, block)| {
                let m = matrix_of(block, n);
                let scale = m.amax().powi(2).max(1.0);
                (p, (&m * &m + DMatrix::identity(n, n)).amax(), scale)
            })
            .find(|&(_, d, scale)| d.is_nan() || d > AC_TOLERANCE * scale)
            .map(|(p, d, _)| (p, d))
    }

    pub fn dim(&self) -> usize {
        self.j.manifold().dim()
    }

    pub fn manifold(&self) -> &Arc<GridManifold> {
        self.j.manifold()
    }

    pub fn form(&self) -> &BVForm {
        &self.j
    }

    pub fn into_form(self) -> BVForm {
        self.j
    }

    /// `J(x)` at grid point `p`, with `J(∂_i) = Σ_a J[a][i] ∂_a`.
    pub fn matrix(&self, p: usize) -> DMatrix<f64> {
        let n = self.dim();
        matrix_of(&self.j.coefficients()[p * n * n..(p + 1) * n * n], n)
    }

    /// `max_x ‖J(x)² + I‖_max`.
    pub fn defect(&self) -> f64 {
        let n = self.dim();
        self.j
            .coefficients()
            .chunks(n * n)
            .map(|b| {
                let m = matrix_of(b, n);
                (&m * &m + DMatrix::identity(n, n)).amax()
            })
            .fold(0.0, f64::max)
    }

    /// `Q J Q⁻¹` for a constant invertible `Q`.
    pub fn conjugate(&self, q: &DMatrix<f64>) -> Result<Self, AcError> {
        let n = self.dim();
        if q.nrows() != n || q.ncols() != n {
            return Err(AcError::Conjugation);
        }
        let qi = q.clone().try_inverse().ok_or(AcError::Conjugation)?;
        let mut j = self.j.clone();
        j.coefficients_mut().par_chunks_mut(n * n).for_each(|block| {
            let m = q * matrix_of(block, n) * &qi;
            write_matrix(&m, block, n);
        });
        Self::new(j)
    }
}

fn tangent(manifold: &GridManifold) -> Arc<BundleSpec> {
    Arc::new(BundleSpec::tangent(manifold))
}

fn standard_block(n: usize) -> DMatrix<f64> {
    let mut j0 = DMatrix::zeros(n, n);
    for b in 0..n / 2 {
        j0[(2 * b + 1, 2 * b)] = 1.0;
        j0[(2 * b, 2 * b + 1)] = -1.0;
    }
    j0
}

fn from_matrices(
    manifold: &Arc<GridManifold>,
    f: impl Fn(&[f64]) -> DMatrix<f64> + Sync,
) -> Result<ACStructure, AcError> {
    let n = manifold.dim();
    if !n.is_multiple_of(2) {
        return Err(AcError::OddDimension(n));
    }
    let mut j = BVForm::zeros(manifold, &tangent(manifold), 1);
    j.coefficients_mut()
        .par_chunks_mut(n * n)
        .enumerate()
        .for_each(|(p, block)| {
            write_matrix(&f(&manifold.coordinates(p)), block, n);
        });
    ACStructure::new(j)
}

/// Constant block-diagonal `J₀` with blocks `[[0,−1],[1,0]]`.
pub fn standard_j(manifold: &Arc<GridManifold>) -> Result<ACStructure, AcError> {
    let j0 = standard_block(manifold.dim());
    from_matrices(manifold, |_| j0.clone())
}

/// One trigonometric mode of a random matrix field.
#[derive(Debug, Clone)]
struct Mode {
    wave: Vec<i32>,
    cos: DMatrix<f64>,
    sin: DMatrix<f64>,
}

/// Low-frequency modes on the listed axes: each axis alone plus sums and
/// differences of axis pairs; `m²` modes for `m` axes.
/// Each coefficient is uniform in `[−scale, scale)`.
fn random_modes(rng: &mut ChaCha8Rng, dim: usize, axes: &[usize], size: usize, scale: f64) -> Vec<Mode> {
    let mut waves = Vec::new();
    for (ia, &a) in axes.iter().enumerate() {
        let mut w = vec![0; dim];
        w[a] = 1;
        waves.push(w);
        for &b in &axes[ia + 1..] {
            for s in [1, -1] {
                let mut w = vec![0; dim];
                w[a] = 1;
                w[b] = s;
                waves.push(w);
            }
        }
    }
    let draw = |rng: &mut ChaCha8Rng| DMatrix::from_fn(size, size, |_, _| scale * rng.random_range(-1.0..1.0));
    waves
        .into_iter()
        .map(|wave| Mode {
            wave,
            cos: draw(rng),
            sin: draw(rng),
        })
        .collect()
}

/// Per-mode scale of an `n`-dimensional field, `1/√(n²)`, shared by the
/// product fields so calibration and corpus have comparable spectra.
fn mode_scale(n: usize) -> f64 {
    1.0 / n as f64
}

fn eval_modes(modes: &[Mode], x: &[f64], lengths: &[f64], size: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(size, size);
    for m in modes {
        let theta: f64 = m
            .wave
            .iter()
            .zip(x.iter().zip(lengths))
            .map(|(&k, (&xi, &l))| std::f64::consts::TAU * f64::from(k) * xi / l)
            .sum();
        s += &m.cos * theta.cos() + &m.sin * theta.sin();
    }
    s
}

fn check_amplitude(amplitude: f64) -> Result<(), AcError> {
    if amplitude.is_finite() && amplitude >= 0.0 {
        Ok(())
    } else {
        Err(AcError::Amplitude(amplitude))
    }
}

/// `J(x) = Q(x) J₀ Q(x)⁻¹` with `Q = exp(amplitude · S(x))` and `S` a seeded
/// low-frequency periodic matrix field.
pub fn random_j(manifold: &Arc<GridManifold>, seed: u64, amplitude: f64) -> Result<ACStructure, AcError> {
    check_amplitude(amplitude)?;
    let n = manifold.dim();
    if !n.is_multiple_of(2) {
        return Err(AcError::OddDimension(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes: Vec<usize> = (0..n).collect();
    let modes = random_modes(&mut rng, n, &axes, n, mode_scale(n));
    let j0 = standard_block(n);
    let lengths = manifold.side_lengths().to_vec();
    from_matrices(manifold, |x| {
        let s = eval_modes(&modes, x, &lengths, n) * amplitude;
        let q = s.clone().exp();
        let qi = (-s).exp();
        q * &j0 * qi
    })
}

/// Integrable product structure: block `b` is a random surface structure in
/// the coordinates `(x_{2b}, x_{2b+1})` alone.
pub fn product_j(manifold: &Arc<GridManifold>, seed: u64, amplitude: f64) -> Result<ACStructure, AcError> {
    check_amplitude(amplitude)?;
    let n = manifold.dim();
    if !n.is_multiple_of(2) {
        return Err(AcError::OddDimension(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<Vec<Mode>> = (0..n / 2)
        .map(|b| random_modes(&mut rng, n, &[2 * b, 2 * b + 1], 2, mode_scale(n)))
        .collect();
    let j0 = standard_block(2);
    let lengths = manifold.side_lengths().to_vec();
    from_matrices(manifold, |x| {
        let mut out = DMatrix::zeros(n, n);
        for (b, modes) in blocks.iter().enumerate() {
            let s = eval_modes(modes, x, &lengths, 2) * amplitude;
            let blk = s.clone().exp() * &j0 * (-s).exp();
            out.view_mut((2 * b, 2 * b), (2, 2)).copy_from(&blk);
        }
        out
    })
}

/// `N(∂_i, ∂_j) = [J∂_i, J∂_j] − J[J∂_i, ∂_j] − J[∂_i, J∂_j]` as a
/// `T_M`-valued 2-form, with derivatives from `partial_derivative`.
pub fn nijenhuis(j: &ACStructure) -> Result<BVForm, AcError> {
    let manifold = j.manifold();
    let n = manifold.dim();
    let w = n * n;
    let coeffs = j.form().coefficients();
    let derivs: Vec<Vec<f64>> = (0..n)
        .map(|axis| manifold.partial_derivative(coeffs, w, axis))
        .collect::<Result<_, _>>()?;
    let basis = Basis::get(n);
    let masks = basis.masks(2);
    let mut out = BVForm::zeros(manifold, j.form().bundle(), 2);
    out.coefficients_mut()
        .par_chunks_mut(masks.len() * n)
        .enumerate()
        .for_each(|(p, dst)| {
            let jm = |a: usize, i: usize| coeffs[p * w + i * n + a];
            let dj = |axis: usize, a: usize, i: usize| derivs[axis][p * w + i * n + a];
            for (pos, &mask) in masks.iter().enumerate() {
                let i = mask.trailing_zeros() as usize;
                let k = 7 - (mask.leading_zeros() as usize);
                for c in 0..n {
                    let mut v = 0.0;
                    for a in 0..n {
                        v += jm(a, i) * dj(a, c, k) - jm(a, k) * dj(a, c, i);
                        v += jm(c, a) * dj(k, a, i) - jm(c, a) * dj(i, a, k);
                    }
                    dst[pos * n + c] = v;
                }
            }
        });
    Ok(out)
}

/// `a = (0,0,1,−1)`, `k = 1`, `ψ` the polyvector wedge, insertion right
/// action, over `bundle` (the tangent bundle with a chosen connection).
pub fn almost_complex_spec_on(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>) -> Result<OperatorSpec, AcError> {
    if !bundle.is_tangent() {
        return Err(AcError::NotTangentOneForm);
    }
    let pv = Arc::new(polyvector_bundle(manifold));
    let psi = polyvector_wedge(bundle.clone(), pv.clone())?;
    Ok(OperatorSpec::builder(manifold, bundle, 1)
        .coefficients([0.0, 0.0, 1.0, -1.0])
        .trunc(default_truncation(1, None, manifold.dim()))
        .psi(psi, ActionSpec::insertion(pv))
        .build()?)
}

/// The almost-complex spec with the flat connection.
pub fn almost_complex_spec(manifold: &Arc<GridManifold>) -> Result<OperatorSpec, AcError> {
    almost_complex_spec_on(manifold, &tangent(manifold))
}

/// The almost-complex spec with a closed scalar form `alpha` and truncation
/// `[k, 2p+k+2]`.
pub fn alpha_spec(manifold: &Arc<GridManifold>, alpha: BVForm) -> Result<OperatorSpec, AcError> {
    let p = alpha.degree();
    let base = almost_complex_spec(manifold)?;
    let bundle = base.bundle().clone();
    let right = base.right().expect("psi present").clone();
    Ok(OperatorSpec::builder(manifold, &bundle, 1)
        .coefficients(base.a())
        .trunc(default_truncation(1, Some(p), manifold.dim()))
        .psi(right.map, right.action)
        .alpha(alpha)
        .build()?)
}

/// `(‖P(J)‖, ‖N_J‖)` for the almost-complex spec over `connection`.
pub fn integrability_residual(j: &ACStructure, connection: &Arc<BundleSpec>) -> Result<(f64, f64), AcError> {
    let torsion = connection.torsion_check()?;
    if torsion > TORSION_TOLERANCE {
        return Err(AcError::Torsion(torsion));
    }
    let spec = almost_complex_spec_on(j.manifold(), connection)?;
    let p = apply_p(&spec, &j.form().with_bundle(connection)?)?;
    Ok((p.l2_norm(), nijenhuis(j)?.l2_norm()))
}

/// `‖α ∧ P(J)‖` for the almost-complex spec.
pub fn alpha_residual(j: &ACStructure, alpha: &BVForm) -> Result<f64, AcError> {
    let spec = alpha_spec(j.manifold(), alpha.clone())?;
    Ok(apply_p_alpha(&spec, j.form())?.l2_norm())
}

/// Residuals of a known-integrable, non-constant field at the same resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub p_norm: f64,
    pub n_norm: f64,
}

impl Calibration {
    pub fn p_floor(&self) -> f64 {
        (10.0 * self.p_norm).max(FLOOR_MINIMUM)
    }

    pub fn n_floor(&self) -> f64 {
        (10.0 * self.n_norm).max(FLOOR_MINIMUM)
    }
}

/// On a surface any field is integrable, so another seeded field is used;
/// otherwise a product of surface structures.
pub fn calibrate(manifold: &Arc<GridManifold>, amplitude: f64) -> Result<Calibration, AcError> {
    let j = if manifold.dim() == 2 {
        random_j(manifold, CALIBRATION_SEED, amplitude)?
    } else {
        product_j(manifold, CALIBRATION_SEED, amplitude)?
    };
    let (p_norm, n_norm) = integrability_residual(&j, &tangent(manifold))?;
    Ok(Calibration { p_norm, n_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Integrable,
    NonIntegrable,
    /// The two oracles disagree.
    Disagree,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Integrable => "integrable",
            Verdict::NonIntegrable => "non-integrable",
            Verdict::Disagree => "disagree",
        })
    }
}

pub fn verdict(p_norm: f64, n_norm: f64, calibration: &Calibration) -> Verdict {
    let p_zero = p_norm <= calibration.p_floor();
    let n_zero = n_norm <= calibration.n_floor();
    match (p_zero, n_zero) {
        (true, true) => Verdict::Integrable,
        (false, false) => Verdict::NonIntegrable,
        _ => Verdict::Disagree,
    }
}

/// One entry of a corpus manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub seed: u64,
    pub amplitude: f64,
    pub dims: usize,
    pub resolution: usize,
}

/// One row of a residual report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRow {
    pub seed: u64,
    pub resolution: usize,
    #[serde(rename = "P_norm")]
    pub p_norm: f64,
    #[serde(rename = "N_norm")]
    pub n_norm: f64,
    pub verdict: Verdict,
}

/// Runs every corpus entry on the unit torus of its dimension and
/// resolution; calibrations are shared per `(dims, resolution, amplitude)`.
pub fn run_corpus(entries: &[CorpusEntry]) -> Result<Vec<ResidualRow>, AcError> {
    let mut keys: Vec<(usize, usize, f64)> = Vec::new();
    for e in entries {
        let key = (e.dims, e.resolution, e.amplitude);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let calibrations: Vec<Calibration> = keys
        .par_iter()
        .map(|&(dims, resolution, amplitude)| calibrate(&Arc::new(GridManifold::cube(dims, resolution)?), amplitude))
        .collect::<Result<_, _>>()?;
    entries
        .par_iter()
        .map(|e| {
            let manifold = Arc::new(GridManifold::cube(e.dims, e.resolution)?);
            let at = keys
                .iter()
                .position(|k| *k == (e.dims, e.resolution, e.amplitude))
                .expect("collected");
            let calibration = calibrations[at];
            let j = random_j(&manifold, e.seed, e.amplitude)?;
            let (p_norm, n_norm) = integrability_residual(&j, &tangent(&manifold))?;
            Ok(ResidualRow {
                seed: e.seed,
                resolution: e.resolution,
                p_norm,
                n_norm,
                verdict: verdict(p_norm, n_norm, &calibration),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::PointField;

    fn torus(n: usize, res: usize) -> Arc<GridManifold> {
        Arc::new(GridManifold::cube(n, res).unwrap())
    }

    #[test]
    fn standard_structure_on_a_surface() {
        let m = torus(2, 4);
        let j = standard_j(&m).unwrap();
        for p in 0..m.num_points() {
            assert_eq!(j.matrix(p), DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        }
        assert_eq!(j.defect(), 0.0);
        assert_eq!(nijenhuis(&j).unwrap().max_abs(), 0.0);
        assert_eq!(integrability_residual(&j, &tangent(&m)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn odd_dimension_rejected() {
        let m = torus(3, 4);
        assert!(matches!(standard_j(&m), Err(AcError::OddDimension(3))));
        assert!(matches!(random_j(&m, 0, 0.1), Err(AcError::OddDimension(3))));
    }

    #[test]
    fn non_structures_rejected() {
        let m = torus(2, 4);
        let t = tangent(&m);
        let id = BVForm::from_fn(&m, &t, 1, |_, mask, a| if mask == 1 << a { 1.0 } else { 0.0 });
        assert!(matches!(
            ACStructure::new(id),
            Err(AcError::NotAlmostComplex { point: 0, .. })
        ));
        assert!(matches!(random_j(&m, 0, -1.0), Err(AcError::Amplitude(_))));
    }

    #[test]
    fn random_fields_are_structures() {
        let m = torus(4, 6);
        assert_eq!(random_j(&m, 5, 0.0).unwrap(), standard_j(&m).unwrap());
        let a = random_j(&m, 5, 0.3).unwrap();
        assert_eq!(a, random_j(&m, 5, 0.3).unwrap());
        assert!(a.form().sub(random_j(&m, 6, 0.3).unwrap().form()).unwrap().max_abs() > 0.0);
        for seed in 0..4 {
            for amp in [0.3, 0.6] {
                assert!(random_j(&m, seed, amp).unwrap().defect() <= 1e-12);
                assert!(random_j(&torus(2, 8), seed, amp).unwrap().defect() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_conjugation_keeps_zero() {
        let m = torus(4, 4);
        let q = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.3, 0.0, 0.2, 0.0, 1.0, 0.4, 0.0, 0.1, 0.0, 1.0, 0.3, 0.0, 0.2, 0.0, 1.0,
            ],
        );
        let j = standard_j(&m).unwrap().conjugate(&q).unwrap();
        assert!(j.defect() < 1e-14);
        assert_eq!(integrability_residual(&j, &tangent(&m)).unwrap(), (0.0, 0.0));
        assert!(matches!(
            standard_j(&m).unwrap().conjugate(&DMatrix::zeros(4, 4)),
            Err(AcError::Conjugation)
        ));
    }

    #[test]
    fn torsion_rejected() {
        let m = torus(2, 4);
        // Γ[0][0][1] = 1, Γ[1][0][0] = 0
        let mut gamma = vec![0.0; 8];
        gamma[1] = 1.0;
        let twisted = Arc::new(
            BundleSpec::tangent(&m)
                .with_connection(&m, PointField::Constant(gamma))
                .unwrap(),
        );
        let j = standard_j(&m).unwrap();
        assert!(matches!(integrability_residual(&j, &twisted), Err(AcError::Torsion(_))));
    }

    #[test]
    fn surface_operator_vanishes_identically() {
        // J∧_ψJ = det J · ∂₁∧∂₂ on a surface, so P(J) = dJ − dJ
        for res in [8, 16] {
            let m = torus(2, res);
            let (p, n) = integrability_residual(&random_j(&m, 1, 0.5).unwrap(), &tangent(&m)).unwrap();
            assert!(p < 1e-13, "{p:e}");
            assert!(n > 1e-3);
        }
    }

    #[test]
    fn nijenhuis_converges_on_surfaces() {
        let norms: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&res| nijenhuis(&random_j(&torus(2, res), 2, 0.3).unwrap()).unwrap().l2_norm())
            .collect();
        for w in norms.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.2..=4.8).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn product_fields_are_integrable() {
        let m = torus(4, 8);
        let (p, n) = integrability_residual(&product_j(&m, 4, 0.3).unwrap(), &tangent(&m)).unwrap();
        assert!(p < 1e-12, "{p:e}");
        let c = calibrate(&m, 0.3).unwrap();
        assert!(n < c.n_floor());
    }

    #[test]
    fn alpha_residual_bounds() {
        let m = torus(4, 8);
        let scalar = Arc::new(BundleSpec::scalar(&m));
        let alpha = BVForm::from_fn(&m, &scalar, 1, |_, mask, _| if mask == 1 { 1.0 } else { 0.0 });
        assert_eq!(alpha_residual(&standard_j(&m).unwrap(), &alpha).unwrap(), 0.0);
        let j = random_j(&m, 3, 0.3).unwrap();
        let (p, _) = integrability_residual(&j, &tangent(&m)).unwrap();
        let a = alpha_residual(&j, &alpha).unwrap();
        // |dx¹ ∧ β| ≤ |β| pointwise for the unit metric
        assert!(a <= p * (1.0 + 1e-12));
        // for p = 1 the α-residual vanishes only with P(J)
        assert!(a > 0.5 * p);
        let open = BVForm::from_fn(&m, &scalar, 1, |x, mask, _| if mask == 1 { x[1].sin() } else { 0.0 });
        assert!(matches!(
            alpha_residual(&j, &open),
            Err(AcError::Operator(OperatorError::Invalid(_)))
        ));
    }

    #[test]
    fn verdicts() {
        let c = Calibration {
            p_norm: 1e-15,
            n_norm: 0.1,
        };
        assert_eq!(verdict(1e-14, 0.5, &c), Verdict::Integrable);
        assert_eq!(verdict(3.0, 5.0, &c), Verdict::NonIntegrable);
        assert_eq!(verdict(3.0, 0.5, &c), Verdict::Disagree);
        assert_eq!(Verdict::NonIntegrable.to_string(), "non-integrable");
    }

    #[test]
    fn small_corpus_agrees() {
        let entries: Vec<CorpusEntry> = (0..3)
            .flat_map(|seed| {
                [(2, 8), (4, 6)].map(|(dims, resolution)| CorpusEntry {
                    seed,
                    amplitude: 0.3,
                    dims,
                    resolution,
                })
            })
            .collect();
        let rows = run_corpus(&entries).unwrap();
        for (row, e) in rows.iter().zip(&entries) {
            let expected = if e.dims == 2 {
                Verdict::Integrable
            } else {
                Verdict::NonIntegrable
            };
            assert_eq!(row.verdict, expected, "{row:?}");
        }
    }
}
