//! Bundle-valued forms on the grid and the algebra built on them: induced
//! wedge products, module actions, the bundle Hodge star and the L² product.
//!
//! Coefficients are stored point-major: the value for grid point `p`,
//! increasing multi-index at position `I` and fiber index `a` lives at
//! `(p · C(n,k) + I) · m + a`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{ActionKind, ActionSpec, BilinearMap, BundleError, BundleSpec, FiberTensor, Side};
use crate::geometry::{GeometryError, GridManifold};
use crate::multiindex::{binomial, shuffle_sign, sort_tuple, Basis, Mask};
use crate::products::{self, ProductTable};

#[derive(Debug, Error)]
pub enum FormsError {
    #[error("forms live on different grids")]
    ManifoldMismatch,
    #[error("bundle mismatch: expected `{expected}`, got `{got}`")]
    BundleMismatch { expected: String, got: String },
    #[error("degree {degree} mismatch: expected {expected}")]
    DegreeMismatch { degree: usize, expected: usize },
    #[error("degree {degree} is outside 0..={dim}")]
    Degree { degree: usize, dim: usize },
    #[error("expected {expected} coefficients, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite coefficient at index {0}")]
    NonFinite(usize),
    #[error("scalar-form operation needs a rank-1 bundle, got rank {0}")]
    NotScalar(usize),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("malformed form data: {0}")]
    Decode(String),
}

/// Homogeneous degree-`k` form with values in a bundle `E`.
#[derive(Debug, Clone)]
pub struct BVForm {
    manifold: Arc<GridManifold>,
    bundle: Arc<BundleSpec>,
    degree: usize,
    coeffs: Vec<f64>,
}

impl PartialEq for BVForm {
    fn eq(&self, other: &Self) -> bool {
        self.degree == other.degree
            && self.coeffs == other.coeffs
            && *self.manifold == *other.manifold
            && *self.bundle == *other.bundle
    }
}

impl BVForm {
    /// Zero form. Degrees above `n` give the (empty) zero form of that degree.
    pub fn zeros(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>, degree: usize) -> Self {
        let len = manifold.num_points() * binomial(manifold.dim(), degree) * bundle.rank();
        Self {
            manifold: manifold.clone(),
            bundle: bundle.clone(),
            degree,
            coeffs: vec![0.0; len],
        }
    }

    pub fn from_coefficients(
        manifold: &Arc<GridManifold>,
        bundle: &Arc<BundleSpec>,
        degree: usize,
        coeffs: Vec<f64>,
    ) -> Result<Self, FormsError> {
        let n = manifold.dim();
        if degree > n {
            return Err(FormsError::Degree { degree, dim: n });
        }
        if bundle.base_dim() != n {
            return Err(FormsError::ManifoldMismatch);
        }
        let expected = manifold.num_points() * binomial(n, degree) * bundle.rank();
        if coeffs.len() != expected {
            return Err(FormsError::Shape {
                expected,
                got: coeffs.len(),
            });
        }
        if let Some(i) = coeffs.iter().position(|v| !v.is_finite()) {
            return Err(FormsError::NonFinite(i));
        }
        Ok(Self {
            manifold: manifold.clone(),
            bundle: bundle.clone(),
            degree,
            coeffs,
        })
    }

    /// Samples `f(x, I, a)` at every grid point.
    pub fn from_fn(
        manifold: &Arc<GridManifold>,
        bundle: &Arc<BundleSpec>,
        degree: usize,
        f: impl Fn(&[f64], Mask, usize) -> f64 + Sync,
    ) -> Self {
        let mut out = Self::zeros(manifold, bundle, degree);
        let masks = Basis::get(manifold.dim()).masks(degree);
        let m = bundle.rank();
        let width = out.width();
        if width > 0 {
            out.coeffs.par_chunks_mut(width).enumerate().for_each(|(p, chunk)| {
                let x = manifold.coordinates(p);
                for (i, &mask) in masks.iter().enumerate() {
                    for a in 0..m {
                        chunk[i * m + a] = f(&x, mask, a);
                    }
                }
            });
        }
        out
    }

    /// Independent uniform coefficients in `[-1, 1)`.
    pub fn random(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>, degree: usize, rng: &mut impl Rng) -> Self {
        let mut out = Self::zeros(manifold, bundle, degree);
        for v in &mut out.coeffs {
            *v = rng.random_range(-1.0..1.0);
        }
        out
    }

    pub fn manifold(&self) -> &Arc<GridManifold> {
        &self.manifold
    }

    pub fn bundle(&self) -> &Arc<BundleSpec> {
        &self.bundle
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coeffs
    }

    /// Coefficients per grid point, `C(n,k) · m`.
    pub fn width(&self) -> usize {
        binomial(self.manifold.dim(), self.degree) * self.bundle.rank()
    }

    /// Stored coefficient for the increasing multi-index `mask`.
    pub fn get(&self, p: usize, mask: Mask, a: usize) -> f64 {
        let basis = Basis::get(self.manifold.dim());
        self.coeffs[p * self.width() + basis.position(mask) * self.bundle.rank() + a]
    }

    pub fn set(&mut self, p: usize, mask: Mask, a: usize, value: f64) {
        let basis = Basis::get(self.manifold.dim());
        let w = self.width();
        self.coeffs[p * w + basis.position(mask) * self.bundle.rank() + a] = value;
    }

    /// `α(∂_{t_1}, …, ∂_{t_k})_a` for an arbitrary index tuple.
    pub fn eval(&self, p: usize, tuple: &[usize], a: usize) -> f64 {
        assert_eq!(tuple.len(), self.degree, "tuple length must equal the degree");
        match sort_tuple(tuple) {
            Some((sign, mask)) => sign * self.get(p, mask, a),
            None => 0.0,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &BVForm) -> Result<(), FormsError> {
        self.check_same_space(other)?;
        if self.degree != other.degree {
            return Err(FormsError::DegreeMismatch {
                degree: other.degree,
                expected: self.degree,
            });
        }
        self.coeffs.iter_mut().zip(&other.coeffs).for_each(|(a, b)| *a += c * b);
        Ok(())
    }

    pub fn add(&self, other: &BVForm) -> Result<Self, FormsError> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &BVForm) -> Result<Self, FormsError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub(crate) fn check_same_space(&self, other: &BVForm) -> Result<(), FormsError> {
        if *self.manifold != *other.manifold {
            return Err(FormsError::ManifoldMismatch);
        }
        if !self.bundle.compatible(&other.bundle) {
            return Err(FormsError::BundleMismatch {
                expected: self.bundle.id().to_owned(),
                got: other.bundle.id().to_owned(),
            });
        }
        Ok(())
    }

    /// `⟨α, α′⟩_{h_E}` at every grid point.
    pub fn pointwise_inner(&self, other: &BVForm) -> Result<Vec<f64>, FormsError> {
        self.check_same_space(other)?;
        if self.degree != other.degree {
            return Err(FormsError::DegreeMismatch {
                degree: other.degree,
                expected: self.degree,
            });
        }
        let lowered = lower_pointwise(
            self.manifold.as_ref(),
            self.bundle.as_ref(),
            self.degree,
            &other.coeffs,
            1.0,
        );
        let w = self.width();
        if w == 0 {
            return Ok(vec![0.0; self.manifold.num_points()]);
        }
        Ok(self
            .coeffs
            .par_chunks(w)
            .zip(lowered.par_chunks(w))
            .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `⟨α, α′⟩_k = ∫ ⟨α, α′⟩_{h_E} vol_g`.
    pub fn l2_inner(&self, other: &BVForm) -> Result<f64, FormsError> {
        let field = self.pointwise_inner(other)?;
        Ok(self.manifold.integrate(&field)?)
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).map(f64::sqrt).unwrap_or(f64::NAN)
    }

    /// Euclidean gradient of `x ↦ ⟨⟨x, self⟩⟩` on the coefficient vector.
    pub(crate) fn lowered(&self) -> Vec<f64> {
        lower_pointwise(
            self.manifold.as_ref(),
            self.bundle.as_ref(),
            self.degree,
            &self.coeffs,
            self.manifold.cell_volume(),
        )
    }

    /// Inverse of [`BVForm::lowered`]: the form whose lowering is `v`.
    pub(crate) fn raised(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>, degree: usize, v: &[f64]) -> BVForm {
        let coeffs = raise_pointwise(
            manifold.as_ref(),
            bundle.as_ref(),
            degree,
            v,
            1.0 / manifold.cell_volume(),
        );
        BVForm {
            manifold: manifold.clone(),
            bundle: bundle.clone(),
            degree,
            coeffs,
        }
    }

    /// The same coefficients over a compatible bundle, e.g. another connection.
    pub fn with_bundle(&self, bundle: &Arc<BundleSpec>) -> Result<BVForm, FormsError> {
        if !bundle.compatible(&self.bundle) {
            return Err(FormsError::BundleMismatch {
                expected: self.bundle.id().to_owned(),
                got: bundle.id().to_owned(),
            });
        }
        Ok(BVForm {
            manifold: self.manifold.clone(),
            bundle: bundle.clone(),
            degree: self.degree,
            coeffs: self.coeffs.clone(),
        })
    }

    pub(crate) fn with_coefficients(&self, degree: usize, coeffs: Vec<f64>) -> BVForm {
        BVForm {
            manifold: self.manifold.clone(),
            bundle: self.bundle.clone(),
            degree,
            coeffs,
        }
    }

    /// `⋆_{h_E}`, acting on the form part only.
    pub fn hodge_star(&self) -> Result<BVForm, FormsError> {
        let n = self.manifold.dim();
        if self.degree > n {
            return Err(FormsError::Degree {
                degree: self.degree,
                dim: n,
            });
        }
        let k = self.degree;
        let basis = Basis::get(n);
        let full = basis.full();
        let gram = gram_matrix(self.manifold.inverse_metric(), n, k);
        let c = basis.count(k);
        let m = self.bundle.rank();
        let vol = self.manifold.volume_density();
        // (⋆β)_{J^c} = √det g · sign(J, J^c) · Σ_I G[I][J] β_I
        let targets: Vec<(usize, f64)> = basis
            .masks(k)
            .iter()
            .map(|&j| {
                let comp = full & !j;
                (basis.position(comp), vol * shuffle_sign(j, comp))
            })
            .collect();
        let mut out = BVForm::zeros(&self.manifold, &self.bundle, n - k);
        let w = c * m;
        if w == 0 {
            return Ok(out);
        }
        out.coeffs
            .par_chunks_mut(w)
            .zip(self.coeffs.par_chunks(w))
            .for_each(|(dst, src)| {
                for (jpos, &(tpos, factor)) in targets.iter().enumerate() {
                    for ipos in 0..c {
                        let g = gram[ipos * c + jpos];
                        if g == 0.0 {
                            continue;
                        }
                        for a in 0..m {
                            dst[tpos * m + a] += factor * g * src[ipos * m + a];
                        }
                    }
                }
            });
        Ok(out)
    }

    /// `α ∧_{h_E} β`, the scalar `(k + l)`-form `Σ a_i ∧ b_j h_E(ε_i, ε_j)`.
    pub fn wedge_h(&self, other: &BVForm) -> Result<BVForm, FormsError> {
        self.check_same_space(other)?;
        let n = self.manifold.dim();
        let m = self.bundle.rank();
        let scalar = Arc::new(BundleSpec::scalar(&self.manifold));
        let mut out = BVForm::zeros(&self.manifold, &scalar, self.degree + other.degree);
        let Some(table) = products::shuffle(
            n,
            self.degree,
            other.degree,
            &FiberTensor::from_entries(m, m, 1, (0..m).map(|a| (a, a, 0, 1.0)).collect()),
        ) else {
            return Ok(out);
        };
        let lowered = lower_fiber(self.bundle.as_ref(), &other.coeffs, other.width());
        table.forward(&self.coeffs, &lowered, &mut out.coeffs);
        Ok(out)
    }
}

/// `G_k[I][J] = det(g⁻¹[I, J])`, the metric induced on `Λ^k` (row-major).
pub(crate) fn gram_matrix(inverse_metric: &nalgebra::DMatrix<f64>, n: usize, k: usize) -> Vec<f64> {
    let masks = Basis::get(n).masks(k);
    let mut out = Vec::with_capacity(masks.len() * masks.len());
    for &a in masks {
        for &b in masks {
            out.push(crate::bundle::gram_determinant(inverse_metric, a, b));
        }
    }
    out
}

/// `scale · (G_k ⊗ H_E) x` pointwise.
fn lower_pointwise(manifold: &GridManifold, bundle: &BundleSpec, k: usize, x: &[f64], scale: f64) -> Vec<f64> {
    let gram = gram_matrix(manifold.inverse_metric(), manifold.dim(), k);
    apply_kron(&gram, bundle.fiber_metric(), bundle.rank(), x, scale)
}

/// `scale · (G_k ⊗ H_E)⁻¹ x` pointwise.
fn raise_pointwise(manifold: &GridManifold, bundle: &BundleSpec, k: usize, x: &[f64], scale: f64) -> Vec<f64> {
    // the inverse of the induced metric on Λ^k g⁻¹ is the one induced by g
    let gram = gram_matrix(manifold.metric(), manifold.dim(), k);
    apply_kron(&gram, bundle.inverse_fiber_metric(), bundle.rank(), x, scale)
}

fn apply_kron(gram: &[f64], fiber: &crate::bundle::PointField, m: usize, x: &[f64], scale: f64) -> Vec<f64> {
    let c = (gram.len() as f64).sqrt().round() as usize;
    let w = c * m;
    let mut out = vec![0.0; x.len()];
    if w == 0 {
        return out;
    }
    out.par_chunks_mut(w)
        .zip(x.par_chunks(w))
        .enumerate()
        .for_each(|(p, (dst, src))| {
            let h = fiber.at(p);
            // fiber contraction first, then the multi-index one
            let mut tmp = vec![0.0; w];
            for j in 0..c {
                for a in 0..m {
                    let mut s = 0.0;
                    for b in 0..m {
                        s += h[a * m + b] * src[j * m + b];
                    }
                    tmp[j * m + a] = s;
                }
            }
            for i in 0..c {
                for j in 0..c {
                    let g = gram[i * c + j];
                    if g == 0.0 {
                        continue;
                    }
                    for a in 0..m {
                        dst[i * m + a] += scale * g * tmp[j * m + a];
                    }
                }
            }
        });
    out
}

/// `H_E x` on the fiber index only.
fn lower_fiber(bundle: &BundleSpec, x: &[f64], width: usize) -> Vec<f64> {
    let m = bundle.rank();
    let mut out = vec![0.0; x.len()];
    if width == 0 {
        return out;
    }
    out.par_chunks_mut(width)
        .zip(x.par_chunks(width))
        .enumerate()
        .for_each(|(p, (dst, src))| {
            let h = bundle.fiber_metric().at(p);
            for j in 0..width / m {
                for a in 0..m {
                    let mut s = 0.0;
                    for b in 0..m {
                        s += h[a * m + b] * src[j * m + b];
                    }
                    dst[j * m + a] = s;
                }
            }
        });
    out
}

/// `α ∧_φ β` via shuffle splits; the zero form of degree `k + l` when that
/// exceeds `n`.
pub fn wedge_bilinear(alpha: &BVForm, beta: &BVForm, map: &BilinearMap) -> Result<BVForm, FormsError> {
    alpha.check_same_space(beta)?;
    if !alpha.bundle.compatible(map.source()) {
        return Err(FormsError::BundleMismatch {
            expected: map.source().id().to_owned(),
            got: alpha.bundle.id().to_owned(),
        });
    }
    let mut out = BVForm::zeros(&alpha.manifold, map.target(), alpha.degree + beta.degree);
    if let Some(table) = products::shuffle(alpha.manifold.dim(), alpha.degree, beta.degree, map.tensor()) {
        table.forward(&alpha.coeffs, &beta.coeffs, &mut out.coeffs);
    }
    Ok(out)
}

/// `α ∧ β` for a scalar form `α`.
pub fn wedge_scalar(alpha: &BVForm, beta: &BVForm) -> Result<BVForm, FormsError> {
    if alpha.bundle.rank() != 1 {
        return Err(FormsError::NotScalar(alpha.bundle.rank()));
    }
    if *alpha.manifold != *beta.manifold {
        return Err(FormsError::ManifoldMismatch);
    }
    let mut out = BVForm::zeros(&beta.manifold, &beta.bundle, alpha.degree + beta.degree);
    if let Some(table) = scalar_table(alpha, beta.degree, beta.bundle.rank()) {
        table.forward(&alpha.coeffs, &beta.coeffs, &mut out.coeffs);
    }
    Ok(out)
}

pub(crate) fn scalar_table(alpha: &BVForm, degree: usize, rank: usize) -> Option<ProductTable> {
    products::shuffle(
        alpha.manifold.dim(),
        alpha.degree,
        degree,
        &FiberTensor::scalar_left(rank),
    )
}

/// Tables for an action: `x` is the acting form for a left action and the
/// `E`-valued form for a right one. Insertion yields one table per grade.
pub(crate) fn action_tables(
    action: &ActionSpec,
    side: Side,
    n: usize,
    e_degree: usize,
    acting_degree: usize,
    grades: Option<&[usize]>,
) -> Vec<ProductTable> {
    match action.kind() {
        ActionKind::FiberwiseBilinear(tensor) => {
            let (kx, ky) = match side {
                Side::Left => (acting_degree, e_degree),
                Side::Right => (e_degree, acting_degree),
            };
            products::shuffle(n, kx, ky, tensor).into_iter().collect()
        }
        ActionKind::Insertion => {
            let all: Vec<usize> = (0..=n).collect();
            grades
                .unwrap_or(&all)
                .iter()
                .filter_map(|&j| products::insertion(n, e_degree, acting_degree, j))
                .filter(|t| !t.is_empty())
                .collect()
        }
    }
}

/// `γ ∧ ρ` (left) or `ρ ∧ γ` (right) for `ρ` over `E` and `γ` over the
/// acting bundle.
pub fn act(rho: &BVForm, gamma: &BVForm, action: &ActionSpec, side: Side) -> Result<MixedForm, FormsError> {
    act_graded(rho, gamma, action, side, None)
}

pub(crate) fn act_graded(
    rho: &BVForm,
    gamma: &BVForm,
    action: &ActionSpec,
    side: Side,
    grades: Option<&[usize]>,
) -> Result<MixedForm, FormsError> {
    if *rho.manifold != *gamma.manifold {
        return Err(FormsError::ManifoldMismatch);
    }
    if !gamma.bundle.compatible(action.acting()) {
        return Err(FormsError::BundleMismatch {
            expected: action.acting().id().to_owned(),
            got: gamma.bundle.id().to_owned(),
        });
    }
    action.check(&rho.bundle, side)?;
    let n = rho.manifold.dim();
    let mut out = MixedForm::new(&rho.manifold, &rho.bundle);
    for table in action_tables(action, side, n, rho.degree, gamma.degree, grades) {
        let mut part = BVForm::zeros(&rho.manifold, &rho.bundle, table.out_degree);
        match side {
            Side::Left => table.forward(&gamma.coeffs, &rho.coeffs, &mut part.coeffs),
            Side::Right => table.forward(&rho.coeffs, &gamma.coeffs, &mut part.coeffs),
        }
        out.add_part(part)?;
    }
    Ok(out)
}

/// Graded sum of homogeneous forms over one bundle; absent degrees are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedForm {
    manifold: Arc<GridManifold>,
    bundle: Arc<BundleSpec>,
    parts: BTreeMap<usize, BVForm>,
}

impl MixedForm {
    pub fn new(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>) -> Self {
        Self {
            manifold: manifold.clone(),
            bundle: bundle.clone(),
            parts: BTreeMap::new(),
        }
    }

    pub fn from_parts(
        manifold: &Arc<GridManifold>,
        bundle: &Arc<BundleSpec>,
        parts: impl IntoIterator<Item = BVForm>,
    ) -> Result<Self, FormsError> {
        let mut out = Self::new(manifold, bundle);
        for p in parts {
            out.add_part(p)?;
        }
        Ok(out)
    }

    pub fn from_form(form: BVForm) -> Self {
        let mut out = Self::new(&form.manifold, &form.bundle);
        if form.degree <= form.manifold.dim() {
            out.parts.insert(form.degree, form);
        }
        out
    }

    pub fn manifold(&self) -> &Arc<GridManifold> {
        &self.manifold
    }

    pub fn bundle(&self) -> &Arc<BundleSpec> {
        &self.bundle
    }

    /// Adds `form` into its degree slot; parts above degree `n` vanish.
    pub fn add_part(&mut self, form: BVForm) -> Result<(), FormsError> {
        if *form.manifold != *self.manifold {
            return Err(FormsError::ManifoldMismatch);
        }
        if !form.bundle.compatible(&self.bundle) {
            return Err(FormsError::BundleMismatch {
                expected: self.bundle.id().to_owned(),
                got: form.bundle.id().to_owned(),
            });
        }
        if form.degree > self.manifold.dim() {
            return Ok(());
        }
        match self.parts.get_mut(&form.degree) {
            Some(existing) => existing.axpy(1.0, &form)?,
            None => {
                self.parts.insert(form.degree, form);
            }
        }
        Ok(())
    }

    /// Replaces the degree slot of `form`.
    pub fn set_part(&mut self, form: BVForm) -> Result<(), FormsError> {
        self.parts.remove(&form.degree);
        self.add_part(form)
    }

    pub fn remove(&mut self, k: usize) -> Option<BVForm> {
        self.parts.remove(&k)
    }

    pub fn part(&self, k: usize) -> Option<&BVForm> {
        self.parts.get(&k)
    }

    pub fn part_mut(&mut self, k: usize) -> Option<&mut BVForm> {
        self.parts.get_mut(&k)
    }

    /// `p_k(ρ) = ρ_k`, the zero form when the degree is absent.
    pub fn project(&self, k: usize) -> Result<BVForm, FormsError> {
        let n = self.manifold.dim();
        if k > n {
            return Err(FormsError::Degree { degree: k, dim: n });
        }
        Ok(self
            .parts
            .get(&k)
            .cloned()
            .unwrap_or_else(|| BVForm::zeros(&self.manifold, &self.bundle, k)))
    }

    pub fn degrees(&self) -> impl Iterator<Item = usize> + '_ {
        self.parts.keys().copied()
    }

    pub fn parts(&self) -> impl Iterator<Item = &BVForm> {
        self.parts.values()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.parts
            .values_mut()
            .for_each(|p| p.coeffs.iter_mut().for_each(|v| *v *= c));
        out
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &MixedForm) -> Result<(), FormsError> {
        for part in other.parts.values() {
            self.add_part(part.scale(c))?;
        }
        Ok(())
    }

    pub fn add(&self, other: &MixedForm) -> Result<Self, FormsError> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &MixedForm) -> Result<Self, FormsError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn l2_inner(&self, other: &MixedForm) -> Result<f64, FormsError> {
        l2_inner(self, other)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_inner(self, self).map(f64::sqrt).unwrap_or(f64::NAN)
    }

    pub fn max_abs(&self) -> f64 {
        self.parts.values().fold(0.0, |acc, p| acc.max(p.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.parts.values().all(BVForm::is_finite)
    }
}

/// `⟨⟨A, B⟩⟩ = Σ_k ⟨A_k, B_k⟩_k`.
pub fn l2_inner(a: &MixedForm, b: &MixedForm) -> Result<f64, FormsError> {
    if *a.manifold != *b.manifold {
        return Err(FormsError::ManifoldMismatch);
    }
    if !a.bundle.compatible(&b.bundle) {
        return Err(FormsError::BundleMismatch {
            expected: a.bundle.id().to_owned(),
            got: b.bundle.id().to_owned(),
        });
    }
    let mut total = 0.0;
    for (k, pa) in &a.parts {
        if let Some(pb) = b.parts.get(k) {
            total += pa.l2_inner(pb)?;
        }
    }
    Ok(total)
}

/// On-disk form: header plus the flat coefficient array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormRecord {
    pub degree: usize,
    pub bundle: String,
    pub rank: usize,
    pub resolution: Vec<usize>,
    pub coefficients: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"CFRM";

impl BVForm {
    pub fn to_record(&self) -> FormRecord {
        FormRecord {
            degree: self.degree,
            bundle: self.bundle.id().to_owned(),
            rank: self.bundle.rank(),
            resolution: self.manifold.resolution().to_vec(),
            coefficients: self.coeffs.clone(),
        }
    }

    pub fn from_record(
        manifold: &Arc<GridManifold>,
        bundle: &Arc<BundleSpec>,
        record: FormRecord,
    ) -> Result<Self, FormsError> {
        if record.resolution != manifold.resolution() {
            return Err(FormsError::ManifoldMismatch);
        }
        if record.bundle != bundle.id() || record.rank != bundle.rank() {
            return Err(FormsError::BundleMismatch {
                expected: bundle.id().to_owned(),
                got: record.bundle,
            });
        }
        Self::from_coefficients(manifold, bundle, record.degree, record.coefficients)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("records serialize")
    }

    pub fn from_json(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>, text: &str) -> Result<Self, FormsError> {
        let record: FormRecord = serde_json::from_str(text).map_err(|e| FormsError::Decode(e.to_string()))?;
        Self::from_record(manifold, bundle, record)
    }

    /// Little-endian binary layout: magic, degree, rank, dim, resolution,
    /// bundle id (length-prefixed), coefficients.
    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.bundle.id().as_bytes();
        let mut out = Vec::with_capacity(32 + id.len() + 8 * self.coeffs.len());
        out.extend_from_slice(MAGIC);
        for v in [self.degree, self.bundle.rank(), self.manifold.dim()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &r in self.manifold.resolution() {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        for v in &self.coeffs {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(
        manifold: &Arc<GridManifold>,
        bundle: &Arc<BundleSpec>,
        bytes: &[u8],
    ) -> Result<Self, FormsError> {
        let mut r = ByteReader(bytes);
        if r.take(4)? != MAGIC {
            return Err(FormsError::Decode("bad magic".into()));
        }
        let degree = r.word()?;
        let rank = r.word()?;
        let dim = r.word()?;
        let resolution = (0..dim).map(|_| r.word()).collect::<Result<Vec<_>, _>>()?;
        let id_len = r.word()?;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|e| FormsError::Decode(e.to_string()))?;
        if r.0.len() % 8 != 0 {
            return Err(FormsError::Decode(
                "coefficient block is not a whole number of f64".into(),
            ));
        }
        let coefficients =
            r.0.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        Self::from_record(
            manifold,
            bundle,
            FormRecord {
                degree,
                bundle: id,
                rank,
                resolution,
                coefficients,
            },
        )
    }
}

struct ByteReader<'a>(&'a [u8]);

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], FormsError> {
        if self.0.len() < len {
            return Err(FormsError::Decode("truncated input".into()));
        }
        let (head, tail) = self.0.split_at(len);
        self.0 = tail;
        Ok(head)
    }

    fn word(&mut self) -> Result<usize, FormsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
