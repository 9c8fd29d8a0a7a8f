//! Exterior covariant derivative on the grid, its truncated variants, and
//! adjoints with respect to the L² product.
//!
//! `δ` is the exact transpose of the discrete `d` in the weighted inner
//! product (`δ = M_k⁻¹ dᵀ M_{k+1}`), so integration by parts holds to
//! roundoff rather than to truncation order.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleSpec, Connection};
use crate::forms::BVForm;
use crate::geometry::GridManifold;
use crate::multiindex::{binomial, shuffle_sign, Basis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalculusError {
    #[error("truncation degrees must be strictly increasing, got {0:?}")]
    NotIncreasing(Vec<usize>),
    #[error("truncation degree {degree} exceeds the dimension {dim}")]
    TooLarge { degree: usize, dim: usize },
    #[error("dimension mismatch: expected a degree-{expected} form over `{bundle}`, got degree {got}")]
    Dimension {
        expected: usize,
        got: usize,
        bundle: String,
    },
    #[error("dense adjoint refused: {0} unknowns is too many")]
    TooLargeForDense(usize),
}

/// Degrees `m_1 < … < m_s` at which `d[m_1, …, m_s]` lands on zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TruncationList(Vec<usize>);

impl TruncationList {
    pub fn new(degrees: Vec<usize>) -> Result<Self, CalculusError> {
        if degrees.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalculusError::NotIncreasing(degrees));
        }
        Ok(Self(degrees))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn degrees(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, degree: usize) -> bool {
        self.0.binary_search(&degree).is_ok()
    }

    /// Whether `d` is switched off on degree `i` forms (`i + 1` listed).
    pub fn kills_d(&self, i: usize) -> bool {
        self.contains(i + 1)
    }

    /// Whether `δ` is switched off on degree `i` forms (`i` listed).
    pub fn kills_delta(&self, i: usize) -> bool {
        self.contains(i)
    }

    pub fn check_dim(&self, dim: usize) -> Result<(), CalculusError> {
        match self.0.iter().find(|&&d| d > dim) {
            Some(&degree) => Err(CalculusError::TooLarge { degree, dim }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for TruncationList {
    type Error = CalculusError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TruncationList> for Vec<usize> {
    fn from(t: TruncationList) -> Self {
        t.0
    }
}

/// For one axis `i`: `(position of I, position of I ∪ {i}, sign(i, I))`.
fn scatter_plan(n: usize, k: usize, axis: usize) -> Vec<(usize, usize, f64)> {
    let basis = Basis::get(n);
    let bit = 1u8 << axis;
    basis
        .masks(k)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m & bit == 0)
        .map(|(i, &m)| (i, basis.position(m | bit), shuffle_sign(bit, m)))
        .collect()
}

/// `d^∇` on a raw degree-`k` coefficient array:
/// `(dα)_{K,a} = Σ_{i∉I, K = I∪{i}} sign(i, I) (∂_i α_{I,a} + Γ_i[a][b] α_{I,b})`.
pub(crate) fn d_raw(manifold: &GridManifold, bundle: &BundleSpec, k: usize, x: &[f64]) -> Vec<f64> {
    let n = manifold.dim();
    let m = bundle.rank();
    let w_in = binomial(n, k) * m;
    let w_out = binomial(n, k + 1) * m;
    let mut out = vec![0.0; manifold.num_points() * w_out];
    if k >= n || w_in == 0 {
        return out;
    }
    let mut di = vec![0.0; x.len()];
    for axis in 0..n {
        di.iter_mut().for_each(|v| *v = 0.0);
        manifold.central_difference_into(x, w_in, axis, 1.0, &mut di);
        if let Connection::Coefficients(_) = bundle.connection() {
            di.par_chunks_mut(w_in).enumerate().for_each(|(p, dst)| {
                let src = &x[p * w_in..(p + 1) * w_in];
                for (j, block) in dst.chunks_mut(m).enumerate() {
                    for (a, v) in block.iter_mut().enumerate() {
                        for b in 0..m {
                            *v += bundle.gamma(p, axis, a, b) * src[j * m + b];
                        }
                    }
                }
            });
        }
        let plan = scatter_plan(n, k, axis);
        out.par_chunks_mut(w_out).enumerate().for_each(|(p, dst)| {
            let src = &di[p * w_in..(p + 1) * w_in];
            for &(i, kk, sign) in &plan {
                for a in 0..m {
                    dst[kk * m + a] += sign * src[i * m + a];
                }
            }
        });
    }
    out
}

/// Euclidean transpose of [`d_raw`]: degree `k + 1` cotangent to degree `k`.
pub(crate) fn d_transpose_raw(manifold: &GridManifold, bundle: &BundleSpec, k: usize, ybar: &[f64]) -> Vec<f64> {
    let n = manifold.dim();
    let m = bundle.rank();
    let w_in = binomial(n, k) * m;
    let w_out = binomial(n, k + 1) * m;
    let mut xbar = vec![0.0; manifold.num_points() * w_in];
    if k >= n || w_in == 0 {
        return xbar;
    }
    let mut gathered = vec![0.0; xbar.len()];
    for axis in 0..n {
        let plan = scatter_plan(n, k, axis);
        gathered.par_chunks_mut(w_in).enumerate().for_each(|(p, dst)| {
            dst.iter_mut().for_each(|v| *v = 0.0);
            let src = &ybar[p * w_out..(p + 1) * w_out];
            for &(i, kk, sign) in &plan {
                for a in 0..m {
                    dst[i * m + a] = sign * src[kk * m + a];
                }
            }
        });
        // the periodic central difference is antisymmetric
        manifold.central_difference_into(&gathered, w_in, axis, -1.0, &mut xbar);
        if let Connection::Coefficients(_) = bundle.connection() {
            xbar.par_chunks_mut(w_in).enumerate().for_each(|(p, dst)| {
                let src = &gathered[p * w_in..(p + 1) * w_in];
                for (j, block) in dst.chunks_mut(m).enumerate() {
                    for (b, v) in block.iter_mut().enumerate() {
                        for a in 0..m {
                            *v += bundle.gamma(p, axis, a, b) * src[j * m + a];
                        }
                    }
                }
            });
        }
    }
    xbar
}

/// `d^∇ α`; the zero `(n+1)`-form for top-degree input.
pub fn d_nabla(alpha: &BVForm) -> BVForm {
    let k = alpha.degree();
    let coeffs = d_raw(alpha.manifold(), alpha.bundle(), k, alpha.coefficients());
    alpha.with_coefficients(k + 1, coeffs)
}

/// `d^∇[m_1, …, m_s] α`: zero when `deg α + 1` is listed.
pub fn d_truncated(alpha: &BVForm, trunc: &TruncationList) -> BVForm {
    if trunc.kills_d(alpha.degree()) {
        return BVForm::zeros(alpha.manifold(), alpha.bundle(), alpha.degree() + 1);
    }
    d_nabla(alpha)
}

/// Formal adjoint of `d^∇`; `None` stands for the zero form in degree −1.
pub fn delta(beta: &BVForm) -> Option<BVForm> {
    let k = beta.degree().checked_sub(1)?;
    let lowered = beta.lowered();
    let xbar = d_transpose_raw(beta.manifold(), beta.bundle(), k, &lowered);
    Some(BVForm::raised(beta.manifold(), beta.bundle(), k, &xbar))
}

/// Adjoint of `d^∇[m_1, …, m_s]`: zero on listed degrees.
pub fn delta_truncated(beta: &BVForm, trunc: &TruncationList) -> Option<BVForm> {
    let k = beta.degree().checked_sub(1)?;
    if trunc.kills_delta(beta.degree()) {
        return Some(BVForm::zeros(beta.manifold(), beta.bundle(), k));
    }
    delta(beta)
}

/// Coefficient space `Ω^k(M, E)` of a grid.
#[derive(Debug, Clone)]
pub struct FormSpace {
    pub manifold: Arc<GridManifold>,
    pub bundle: Arc<BundleSpec>,
    pub degree: usize,
}

impl FormSpace {
    pub fn new(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>, degree: usize) -> Self {
        Self {
            manifold: manifold.clone(),
            bundle: bundle.clone(),
            degree,
        }
    }

    pub fn of(form: &BVForm) -> Self {
        Self::new(form.manifold(), form.bundle(), form.degree())
    }

    pub fn zeros(&self) -> BVForm {
        BVForm::zeros(&self.manifold, &self.bundle, self.degree)
    }

    /// Number of real unknowns.
    pub fn len(&self) -> usize {
        self.manifold.num_points() * binomial(self.manifold.dim(), self.degree) * self.bundle.rank()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, form: &BVForm) -> Result<(), CalculusError> {
        if form.degree() != self.degree
            || !form.bundle().compatible(&self.bundle)
            || **form.manifold() != *self.manifold
        {
            return Err(CalculusError::Dimension {
                expected: self.degree,
                got: form.degree(),
                bundle: self.bundle.id().to_owned(),
            });
        }
        Ok(())
    }
}

/// A linear map between homogeneous form spaces together with its adjoint
/// for the L² product: `⟨⟨L x, y⟩⟩ = ⟨⟨x, L* y⟩⟩`.
pub trait LinearFormMap {
    fn domain(&self) -> FormSpace;
    fn codomain(&self) -> FormSpace;
    fn apply(&self, x: &BVForm) -> BVForm;
    fn adjoint(&self, y: &BVForm) -> BVForm;
}

/// `L*` as a map in its own right.
pub struct Adjoint<M>(pub M);

impl<M: LinearFormMap> LinearFormMap for Adjoint<M> {
    fn domain(&self) -> FormSpace {
        self.0.codomain()
    }

    fn codomain(&self) -> FormSpace {
        self.0.domain()
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        self.0.adjoint(x)
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        self.0.apply(y)
    }
}

/// The adjoint of `map`, realized by its closed-form contraction.
pub fn linear_adjoint<M: LinearFormMap>(map: M) -> Adjoint<M> {
    Adjoint(map)
}

impl<M: LinearFormMap + ?Sized> LinearFormMap for &M {
    fn domain(&self) -> FormSpace {
        (**self).domain()
    }

    fn codomain(&self) -> FormSpace {
        (**self).codomain()
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        (**self).apply(x)
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        (**self).adjoint(y)
    }
}

/// `x ↦ c x` on one space.
pub struct ScaledIdentity {
    pub space: FormSpace,
    pub factor: f64,
}

impl LinearFormMap for ScaledIdentity {
    fn domain(&self) -> FormSpace {
        self.space.clone()
    }

    fn codomain(&self) -> FormSpace {
        self.space.clone()
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        x.scale(self.factor)
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        y.scale(self.factor)
    }
}

/// `d^∇[trunc]` restricted to one degree.
pub struct TruncatedDerivative {
    pub space: FormSpace,
    pub trunc: TruncationList,
}

impl LinearFormMap for TruncatedDerivative {
    fn domain(&self) -> FormSpace {
        self.space.clone()
    }

    fn codomain(&self) -> FormSpace {
        FormSpace {
            degree: self.space.degree + 1,
            ..self.space.clone()
        }
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        d_truncated(x, &self.trunc)
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        delta_truncated(y, &self.trunc).expect("codomain degree is at least 1")
    }
}

/// Same matrix applied to the coefficient block of every grid point.
pub struct PointwiseLinearMap {
    pub domain: FormSpace,
    pub codomain: FormSpace,
    /// Row-major `codomain width × domain width`.
    pub matrix: Vec<f64>,
}

impl PointwiseLinearMap {
    fn widths(&self) -> (usize, usize) {
        let w = |s: &FormSpace| binomial(s.manifold.dim(), s.degree) * s.bundle.rank();
        (w(&self.domain), w(&self.codomain))
    }
}

impl LinearFormMap for PointwiseLinearMap {
    fn domain(&self) -> FormSpace {
        self.domain.clone()
    }

    fn codomain(&self) -> FormSpace {
        self.codomain.clone()
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        let (wi, wo) = self.widths();
        let mut out = self.codomain.zeros();
        out.coefficients_mut()
            .par_chunks_mut(wo)
            .zip(x.coefficients().par_chunks(wi))
            .for_each(|(dst, src)| {
                for (r, d) in dst.iter_mut().enumerate() {
                    *d = (0..wi).map(|c| self.matrix[r * wi + c] * src[c]).sum();
                }
            });
        out
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        let (wi, wo) = self.widths();
        let lowered = y.lowered();
        let mut xbar = vec![0.0; self.domain.len()];
        xbar.par_chunks_mut(wi)
            .zip(lowered.par_chunks(wo))
            .for_each(|(dst, src)| {
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = (0..wo).map(|r| self.matrix[r * wi + c] * src[r]).sum();
                }
            });
        BVForm::raised(&self.domain.manifold, &self.domain.bundle, self.domain.degree, &xbar)
    }
}

/// Largest problem [`dense_adjoint`] will assemble.
pub const DENSE_LIMIT: usize = 4096;

/// Adjoint assembled as `M_x⁻¹ Aᵀ M_z` from the dense matrix of `map`.
/// Meant for checking closed-form adjoints on small grids.
pub fn dense_adjoint<M: LinearFormMap>(map: &M) -> Result<DenseMap, CalculusError> {
    let (dom, cod) = (map.domain(), map.codomain());
    let (nx, nz) = (dom.len(), cod.len());
    if nx.max(nz) > DENSE_LIMIT {
        return Err(CalculusError::TooLargeForDense(nx.max(nz)));
    }
    let a = dense_matrix(map);
    let mx = dense_metric(&dom);
    let mz = dense_metric(&cod);
    let mx_inv = mx.try_inverse().expect("metric matrices are SPD");
    Ok(DenseMap {
        domain: cod,
        codomain: dom,
        matrix: mx_inv * a.transpose() * mz,
    })
}

/// Column `j` is `map` applied to the `j`-th unit coefficient vector.
pub fn dense_matrix<M: LinearFormMap>(map: &M) -> DMatrix<f64> {
    let (dom, cod) = (map.domain(), map.codomain());
    let mut a = DMatrix::zeros(cod.len(), dom.len());
    let mut e = dom.zeros();
    for j in 0..dom.len() {
        e.coefficients_mut()[j] = 1.0;
        let col = map.apply(&e);
        for (i, v) in col.coefficients().iter().enumerate() {
            a[(i, j)] = *v;
        }
        e.coefficients_mut()[j] = 0.0;
    }
    a
}

/// Gram matrix of the L² product on a coefficient space.
pub fn dense_metric(space: &FormSpace) -> DMatrix<f64> {
    let len = space.len();
    let mut m = DMatrix::zeros(len, len);
    let mut e = space.zeros();
    for j in 0..len {
        e.coefficients_mut()[j] = 1.0;
        for (i, v) in e.lowered().iter().enumerate() {
            m[(i, j)] = *v;
        }
        e.coefficients_mut()[j] = 0.0;
    }
    m
}

/// A linear map stored as an explicit matrix on coefficient vectors.
pub struct DenseMap {
    domain: FormSpace,
    codomain: FormSpace,
    matrix: DMatrix<f64>,
}

impl DenseMap {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, x: &BVForm) -> BVForm {
        let v = nalgebra::DVector::from_column_slice(x.coefficients());
        let out = &self.matrix * v;
        BVForm::from_coefficients(
            &self.codomain.manifold,
            &self.codomain.bundle,
            self.codomain.degree,
            out.as_slice().to_vec(),
        )
        .expect("dense map output has the codomain shape")
    }

    pub fn domain(&self) -> &FormSpace {
        &self.domain
    }

    pub fn codomain(&self) -> &FormSpace {
        &self.codomain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::PointField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn torus(n: usize, res: usize) -> Arc<GridManifold> {
        Arc::new(GridManifold::cube(n, res).unwrap())
    }

    fn connected_bundle(m: &GridManifold, rank: usize, rng: &mut ChaCha8Rng) -> Arc<BundleSpec> {
        let n = m.dim();
        let per = n * rank * rank;
        let values = (0..per * m.num_points()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let h: Vec<f64> = (0..rank * rank)
            .map(|i| if i % (rank + 1) == 0 { 2.0 } else { 0.3 })
            .collect();
        let b = BundleSpec::new(m, "E", rank, PointField::Constant(h), Connection::Flat, None).unwrap();
        Arc::new(
            b.with_connection(m, PointField::PerPoint { values, stride: per })
                .unwrap(),
        )
    }

    #[test]
    fn truncation_list_validation() {
        assert!(TruncationList::new(vec![1, 3]).is_ok());
        assert!(TruncationList::new(vec![3, 1]).is_err());
        assert!(TruncationList::new(vec![1, 1]).is_err());
        let t: TruncationList = serde_json::from_str("[0, 2]").unwrap();
        assert!(t.contains(2) && !t.contains(1));
        assert!(serde_json::from_str::<TruncationList>("[2, 0]").is_err());
        assert!(TruncationList::new(vec![5]).unwrap().check_dim(4).is_err());
    }

    #[test]
    fn constant_form_is_parallel() {
        let m = torus(3, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let a = BVForm::from_fn(&m, &e, 1, |_, mask, f| mask as f64 + f as f64);
        assert_eq!(d_nabla(&a).max_abs(), 0.0);
    }

    #[test]
    fn derivative_of_sine_one_form() {
        // α = sin(x₂) dx¹ ⇒ dα = −cos(x₂) dx¹∧dx²
        let m = torus(2, 64);
        let e = Arc::new(BundleSpec::scalar(&m));
        let a = BVForm::from_fn(&m, &e, 1, |x, mask, _| if mask == 0b01 { x[1].sin() } else { 0.0 });
        let da = d_nabla(&a);
        let h = m.spacing(1);
        let mut err = 0.0f64;
        for p in 0..m.num_points() {
            let x = m.coordinates(p);
            err = err.max((da.get(p, 0b11, 0) + x[1].cos()).abs());
        }
        assert!(err < h * h, "err={err}");
        assert!(err > 0.1 * h * h);
    }

    #[test]
    fn top_degree_derivative_is_zero() {
        let m = torus(2, 4);
        let e = Arc::new(BundleSpec::scalar(&m));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = BVForm::random(&m, &e, 2, &mut rng);
        let da = d_nabla(&a);
        assert_eq!(da.degree(), 3);
        assert!(da.coefficients().is_empty());
    }

    #[test]
    fn d_squared_vanishes_for_flat() {
        let m = torus(4, 5);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..3 {
            let a = BVForm::random(&m, &e, k, &mut rng);
            assert!(d_nabla(&d_nabla(&a)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn adjointness_with_connection_and_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = nalgebra::DMatrix::from_row_slice(3, 3, &[1.5, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 0.8]);
        let m = Arc::new(GridManifold::new(vec![4, 5, 6], vec![1.0, 2.0, 3.0], g).unwrap());
        let e = connected_bundle(&m, 2, &mut rng);
        for trunc in [vec![], vec![1], vec![1, 3]] {
            let t = TruncationList::new(trunc).unwrap();
            for k in 0..3 {
                let a = BVForm::random(&m, &e, k, &mut rng);
                let b = BVForm::random(&m, &e, k + 1, &mut rng);
                let lhs = d_truncated(&a, &t).l2_inner(&b).unwrap();
                let rhs = a.l2_inner(&delta_truncated(&b, &t).unwrap()).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * a.l2_norm() * b.l2_norm(), "k={k}");
            }
        }
    }

    #[test]
    fn truncation_kills_listed_degrees() {
        let m = torus(3, 4);
        let e = Arc::new(BundleSpec::scalar(&m));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = TruncationList::new(vec![1]).unwrap();
        let a0 = BVForm::random(&m, &e, 0, &mut rng);
        let a1 = BVForm::random(&m, &e, 1, &mut rng);
        assert_eq!(d_truncated(&a0, &t).max_abs(), 0.0);
        assert_eq!(d_truncated(&a1, &t), d_nabla(&a1));
        assert_eq!(delta_truncated(&a1, &t).unwrap().max_abs(), 0.0);
        assert!(delta_truncated(&a0, &t).is_none());
        let t2 = TruncationList::new(vec![1, 3]).unwrap();
        let a2 = BVForm::random(&m, &e, 2, &mut rng);
        assert_eq!(d_truncated(&a2, &t2).max_abs(), 0.0);
        assert_eq!(d_truncated(&a1, &t2), d_nabla(&a1));
    }

    #[test]
    fn identity_and_scaling_adjoints() {
        let m = torus(2, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = BVForm::random(&m, &e, 1, &mut rng);
        let id = ScaledIdentity {
            space: FormSpace::of(&y),
            factor: 1.0,
        };
        assert_eq!(linear_adjoint(&id).apply(&y), y);
        let s = ScaledIdentity {
            space: FormSpace::of(&y),
            factor: -2.5,
        };
        assert_eq!(linear_adjoint(&s).apply(&y), y.scale(-2.5));
    }

    #[test]
    fn pointwise_adjoint_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = nalgebra::DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.9]);
        let m = Arc::new(GridManifold::new(vec![4, 4], vec![6.0, 5.0], g).unwrap());
        let h = vec![1.5, 0.2, 0.2, 0.7];
        let e = Arc::new(BundleSpec::new(&m, "E", 2, PointField::Constant(h), Connection::Flat, None).unwrap());
        let (dom, cod) = (FormSpace::new(&m, &e, 1), FormSpace::new(&m, &e, 2));
        let matrix = (0..2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = PointwiseLinearMap {
            domain: dom,
            codomain: cod,
            matrix,
        };
        let dense = dense_adjoint(&map).unwrap();
        let y = BVForm::random(&m, &e, 2, &mut rng);
        let diff = map.adjoint(&y).sub(&dense.apply(&y)).unwrap().max_abs();
        assert!(diff < 1e-12, "diff={diff}");
    }

    #[test]
    fn delta_matches_dense_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = torus(2, 4);
        let e = connected_bundle(&m, 2, &mut rng);
        let map = TruncatedDerivative {
            space: FormSpace::new(&m, &e, 0),
            trunc: TruncationList::empty(),
        };
        let dense = dense_adjoint(&map).unwrap();
        let y = BVForm::random(&m, &e, 1, &mut rng);
        assert!(map.adjoint(&y).sub(&dense.apply(&y)).unwrap().max_abs() < 1e-12);
    }
}
