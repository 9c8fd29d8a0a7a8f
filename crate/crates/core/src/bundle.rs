//! Vector bundles over a grid torus: fiber metrics, connection coefficients,
//! bilinear bundle maps and the two supported module actions.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::geometry::{is_spd, GridManifold};
use crate::multiindex::{binomial, shuffle_sign, Basis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("bundle rank must be at least 1")]
    ZeroRank,
    #[error("expected {expected} values for {what}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("fiber metric is not symmetric positive definite at point {0}")]
    FiberMetric(usize),
    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("grading {grading:?} does not sum to rank {rank}")]
    Grading { grading: Vec<usize>, rank: usize },
    #[error("torsion check needs the tangent bundle (rank {dim}), got rank {rank}")]
    NotTangent { rank: usize, dim: usize },
    #[error("tensor shape {got:?} does not match bundle ranks {expected:?}")]
    TensorShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("insertion action needs a tangent-valued form and a polyvector acting bundle")]
    Insertion,
}

/// Data that is either constant over the grid or given at every point.
#[derive(Debug, Clone, PartialEq)]
pub enum PointField {
    Constant(Vec<f64>),
    PerPoint { values: Vec<f64>, stride: usize },
}

impl PointField {
    #[inline]
    pub fn at(&self, p: usize) -> &[f64] {
        match self {
            PointField::Constant(v) => v,
            PointField::PerPoint { values, stride } => &values[p * stride..(p + 1) * stride],
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, PointField::Constant(_))
    }

    fn points(&self) -> usize {
        match self {
            PointField::Constant(_) => 1,
            PointField::PerPoint { values, stride } => values.len() / stride,
        }
    }

    fn map_points(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> PointField {
        match self {
            PointField::Constant(v) => PointField::Constant(f(v)),
            PointField::PerPoint { values, stride } => {
                let out: Vec<f64> = values.chunks(*stride).flat_map(f).collect();
                let stride = out.len() / (values.len() / stride).max(1);
                PointField::PerPoint { values: out, stride }
            }
        }
    }
}

/// Linear connection `∇_i s = ∂_i s + Γ_i s` in coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Connection {
    Flat,
    /// `Γ[i][a][b]` row-major, `n · rank · rank` values per point.
    Coefficients(PointField),
}

/// A real vector bundle `E → M` of rank `m` with fiber metric and connection.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleSpec {
    id: String,
    rank: usize,
    dim: usize,
    fiber_metric: PointField,
    inverse_fiber_metric: PointField,
    connection: Connection,
    grading: Option<Vec<usize>>,
}

impl BundleSpec {
    pub fn new(
        manifold: &GridManifold,
        id: impl Into<String>,
        rank: usize,
        fiber_metric: PointField,
        connection: Connection,
        grading: Option<Vec<usize>>,
    ) -> Result<Self, BundleError> {
        if rank == 0 {
            return Err(BundleError::ZeroRank);
        }
        let n = manifold.dim();
        check_field(manifold, &fiber_metric, rank * rank, "fiber metric")?;
        let mut inverse = Vec::new();
        for p in 0..fiber_metric.points() {
            let h = DMatrix::from_row_slice(rank, rank, fiber_metric.at(p));
            if !is_spd(&h) {
                return Err(BundleError::FiberMetric(p));
            }
            let inv = h.try_inverse().ok_or(BundleError::FiberMetric(p))?;
            inverse.extend(row_major(&inv));
        }
        let inverse_fiber_metric = match fiber_metric {
            PointField::Constant(_) => PointField::Constant(inverse),
            PointField::PerPoint { .. } => PointField::PerPoint {
                values: inverse,
                stride: rank * rank,
            },
        };
        if let Connection::Coefficients(field) = &connection {
            check_field(manifold, field, n * rank * rank, "connection")?;
        }
        if let Some(g) = &grading {
            if g.iter().sum::<usize>() != rank {
                return Err(BundleError::Grading {
                    grading: g.clone(),
                    rank,
                });
            }
        }
        Ok(Self {
            id: id.into(),
            rank,
            dim: n,
            fiber_metric,
            inverse_fiber_metric,
            connection,
            grading,
        })
    }

    /// Rank-`rank` bundle with the identity fiber metric and `Γ ≡ 0`.
    pub fn trivial(manifold: &GridManifold, id: impl Into<String>, rank: usize) -> Result<Self, BundleError> {
        Self::new(
            manifold,
            id,
            rank,
            PointField::Constant(row_major(&DMatrix::identity(rank, rank))),
            Connection::Flat,
            None,
        )
    }

    /// Trivial line bundle; forms valued in it are ordinary scalar forms.
    pub fn scalar(manifold: &GridManifold) -> Self {
        Self::trivial(manifold, "R", 1).expect("rank 1 identity metric is valid")
    }

    /// `T_M` with fiber metric `g` and the (flat) Levi-Civita connection.
    pub fn tangent(manifold: &GridManifold) -> Self {
        let n = manifold.dim();
        Self::new(
            manifold,
            "T_M",
            n,
            PointField::Constant(row_major(manifold.metric())),
            Connection::Flat,
            None,
        )
        .expect("metric was validated by the manifold")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Dimension of the base torus.
    pub fn base_dim(&self) -> usize {
        self.dim
    }

    pub fn fiber_metric(&self) -> &PointField {
        &self.fiber_metric
    }

    pub fn inverse_fiber_metric(&self) -> &PointField {
        &self.inverse_fiber_metric
    }

    pub fn connection(&self) -> &Connection {
        &self.connection
    }

    pub fn grading(&self) -> Option<&[usize]> {
        self.grading.as_deref()
    }

    /// First fiber index of grade `j` in a graded bundle.
    pub fn grade_offset(&self, j: usize) -> Option<usize> {
        let g = self.grading.as_ref()?;
        (j < g.len()).then(|| g[..j].iter().sum())
    }

    pub fn is_tangent(&self) -> bool {
        self.rank == self.dim && self.grading.is_none()
    }

    /// Same bundle with `Γ ≡ 0`.
    pub fn flat_connection(&self) -> Self {
        Self {
            connection: Connection::Flat,
            ..self.clone()
        }
    }

    pub fn with_connection(&self, manifold: &GridManifold, coefficients: PointField) -> Result<Self, BundleError> {
        check_field(manifold, &coefficients, self.dim * self.rank * self.rank, "connection")?;
        Ok(Self {
            connection: Connection::Coefficients(coefficients),
            ..self.clone()
        })
    }

    /// `Γ[i][a][b]` at point `p`, zero for a flat connection.
    #[inline]
    pub fn gamma(&self, p: usize, i: usize, a: usize, b: usize) -> f64 {
        match &self.connection {
            Connection::Flat => 0.0,
            Connection::Coefficients(f) => f.at(p)[(i * self.rank + a) * self.rank + b],
        }
    }

    /// Largest `|Γ[i][a][b] − Γ[b][a][i]|` over the grid; zero means torsion free.
    pub fn torsion_check(&self) -> Result<f64, BundleError> {
        if self.rank != self.dim {
            return Err(BundleError::NotTangent {
                rank: self.rank,
                dim: self.dim,
            });
        }
        let field = match &self.connection {
            Connection::Flat => return Ok(0.0),
            Connection::Coefficients(f) => f,
        };
        let n = self.dim;
        let mut worst = 0.0f64;
        for p in 0..field.points() {
            let g = field.at(p);
            for i in 0..n {
                for a in 0..n {
                    for b in 0..n {
                        let t = g[(i * n + a) * n + b] - g[(b * n + a) * n + i];
                        worst = worst.max(t.abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    /// Whether forms over `self` and `other` may be combined.
    pub fn compatible(&self, other: &BundleSpec) -> bool {
        self.id == other.id && self.rank == other.rank
    }
}

fn check_field(
    manifold: &GridManifold,
    field: &PointField,
    per_point: usize,
    what: &'static str,
) -> Result<(), BundleError> {
    let (expected, got) = match field {
        PointField::Constant(v) => (per_point, v.len()),
        PointField::PerPoint { values, stride } => {
            if *stride != per_point {
                return Err(BundleError::Shape {
                    what,
                    expected: per_point,
                    got: *stride,
                });
            }
            (per_point * manifold.num_points(), values.len())
        }
    };
    if expected != got {
        return Err(BundleError::Shape { what, expected, got });
    }
    let values = match field {
        PointField::Constant(v) => v,
        PointField::PerPoint { values, .. } => values,
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BundleError::NonFinite(what));
    }
    Ok(())
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Graded bundle `Λ•T_M` with grades of rank `C(n, j)`, the fiber metric
/// induced by `g` on each grade (grades mutually orthogonal) and `Γ ≡ 0`.
pub fn polyvector_bundle(manifold: &GridManifold) -> BundleSpec {
    let n = manifold.dim();
    let basis = Basis::get(n);
    let rank = 1usize << n;
    let g = manifold.metric();
    let mut h = DMatrix::zeros(rank, rank);
    let mut offset = 0;
    for j in 0..=n {
        let masks = basis.masks(j);
        for (r, &a) in masks.iter().enumerate() {
            for (c, &b) in masks.iter().enumerate() {
                h[(offset + r, offset + c)] = gram_determinant(g, a, b);
            }
        }
        offset += masks.len();
    }
    BundleSpec::new(
        manifold,
        "Lambda T_M",
        rank,
        PointField::Constant(row_major(&h)),
        Connection::Flat,
        Some((0..=n).map(|j| binomial(n, j)).collect()),
    )
    .expect("Gram determinants of an SPD metric are SPD")
}

/// `det(m[rows(a), cols(b)])` for equal-size multi-indices.
pub(crate) fn gram_determinant(m: &DMatrix<f64>, a: u8, b: u8) -> f64 {
    let ra = crate::multiindex::elements(a);
    let rb = crate::multiindex::elements(b);
    debug_assert_eq!(ra.len(), rb.len());
    if ra.is_empty() {
        return 1.0;
    }
    DMatrix::from_fn(ra.len(), rb.len(), |i, j| m[(ra[i], rb[j])]).determinant()
}

/// Sparse constant tensor `c[a][b][t]` for a fiberwise bilinear product
/// `(ζ · η)_t = Σ_{a,b} c[a][b][t] ζ_a η_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberTensor {
    left_rank: usize,
    right_rank: usize,
    target_rank: usize,
    entries: Vec<(usize, usize, usize, f64)>,
}

impl FiberTensor {
    /// From a dense row-major `c[a][b][t]` array.
    pub fn dense(left_rank: usize, right_rank: usize, target_rank: usize, values: &[f64]) -> Result<Self, BundleError> {
        let expected = left_rank * right_rank * target_rank;
        if values.len() != expected {
            return Err(BundleError::Shape {
                what: "bilinear tensor",
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BundleError::NonFinite("bilinear tensor"));
        }
        let mut entries = Vec::new();
        for a in 0..left_rank {
            for b in 0..right_rank {
                for t in 0..target_rank {
                    let v = values[(a * right_rank + b) * target_rank + t];
                    if v != 0.0 {
                        entries.push((a, b, t, v));
                    }
                }
            }
        }
        Ok(Self {
            left_rank,
            right_rank,
            target_rank,
            entries,
        })
    }

    pub fn from_entries(
        left_rank: usize,
        right_rank: usize,
        target_rank: usize,
        entries: Vec<(usize, usize, usize, f64)>,
    ) -> Self {
        let entries = entries.into_iter().filter(|e| e.3 != 0.0).collect();
        Self {
            left_rank,
            right_rank,
            target_rank,
            entries,
        }
    }

    /// `c[u][a][b] = δ_{ab}` for `u = 0`: the rank-1 scalar acting on a rank-`m` fiber.
    pub fn scalar_left(rank: usize) -> Self {
        Self::from_entries(1, rank, rank, (0..rank).map(|a| (0, a, a, 1.0)).collect())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left_rank, self.right_rank, self.target_rank)
    }

    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn eval(&self, zeta: &[f64], eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.target_rank];
        for &(a, b, t, c) in &self.entries {
            out[t] += c * zeta[a] * eta[b];
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.left_rank * self.right_rank * self.target_rank];
        for &(a, b, t, c) in &self.entries {
            out[(a * self.right_rank + b) * self.target_rank + t] += c;
        }
        out
    }
}

/// Bilinear bundle map `E ⊕ E → F`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearMap {
    source: Arc<BundleSpec>,
    target: Arc<BundleSpec>,
    tensor: FiberTensor,
}

impl BilinearMap {
    pub fn new(source: Arc<BundleSpec>, target: Arc<BundleSpec>, tensor: FiberTensor) -> Result<Self, BundleError> {
        let expected = (source.rank(), source.rank(), target.rank());
        if tensor.shape() != expected {
            return Err(BundleError::TensorShape {
                expected,
                got: tensor.shape(),
            });
        }
        Ok(Self { source, target, tensor })
    }

    pub fn source(&self) -> &Arc<BundleSpec> {
        &self.source
    }

    pub fn target(&self) -> &Arc<BundleSpec> {
        &self.target
    }

    pub fn tensor(&self) -> &FiberTensor {
        &self.tensor
    }

    /// `ζ ·_φ η`.
    pub fn eval(&self, zeta: &[f64], eta: &[f64]) -> Vec<f64> {
        self.tensor.eval(zeta, eta)
    }

    /// Grades of a graded target that the map can reach.
    pub fn target_grades(&self) -> Vec<usize> {
        let Some(grading) = self.target.grading() else {
            return Vec::new();
        };
        let mut bounds = Vec::with_capacity(grading.len());
        let mut acc = 0;
        for &g in grading {
            bounds.push(acc..acc + g);
            acc += g;
        }
        let mut grades: Vec<usize> = self
            .tensor
            .entries()
            .iter()
            .filter_map(|&(_, _, t, _)| bounds.iter().position(|r| r.contains(&t)))
            .collect();
        grades.sort_unstable();
        grades.dedup();
        grades
    }
}

/// `(u, v) ↦ u ∧ v ∈ Λ²T_M`, the polyvector wedge of two tangent vectors.
pub fn polyvector_wedge(tangent: Arc<BundleSpec>, polyvectors: Arc<BundleSpec>) -> Result<BilinearMap, BundleError> {
    let n = tangent.rank();
    if polyvectors.grading().map(<[usize]>::len) != Some(n + 1) || polyvectors.rank() != 1 << n {
        return Err(BundleError::Insertion);
    }
    let basis = Basis::get(n);
    let offset = polyvectors.grade_offset(2).unwrap_or(0);
    let mut entries = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let mask = (1u8 << a) | (1u8 << b);
            let sign = shuffle_sign(1 << a, 1 << b);
            entries.push((a, b, offset + basis.position(mask), sign));
        }
    }
    BilinearMap::new(tangent, polyvectors, FiberTensor::from_entries(n, n, 1 << n, entries))
}

/// Full exterior product `Λ•T_M ⊗ Λ•T_M → Λ•T_M`.
pub fn polyvector_wedge_full(polyvectors: Arc<BundleSpec>) -> Result<BilinearMap, BundleError> {
    let grading = polyvectors.grading().ok_or(BundleError::Insertion)?.to_vec();
    let n = grading.len() - 1;
    let basis = Basis::get(n);
    let index = |m: u8| polyvectors.grade_offset(m.count_ones() as usize).unwrap() + basis.position(m);
    let rank = polyvectors.rank();
    let mut entries = Vec::new();
    for a in 0..(1u16 << n) {
        for b in 0..(1u16 << n) {
            let (a, b) = (a as u8, b as u8);
            if a & b == 0 {
                entries.push((index(a), index(b), index(a | b), shuffle_sign(a, b)));
            }
        }
    }
    BilinearMap::new(
        polyvectors.clone(),
        polyvectors,
        FiberTensor::from_entries(rank, rank, rank, entries),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// How the acting bundle's forms act on `E`-valued forms.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    /// Degree-additive shuffle wedge through a fiber tensor. For a left action
    /// the tensor is `c[u][a][b]` (acting × E → E); for a right action it is
    /// `c[a][u][b]` (E × acting → E).
    FiberwiseBilinear(FiberTensor),
    /// Right action of `Λ•T_M`-valued forms on `T_M`-valued forms: grade-`j`
    /// polyvectors are plugged into the last `j` slots, taking an `s`-form to
    /// an `(s − j + i)`-form and annihilating it when `s < j`.
    Insertion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    acting: Arc<BundleSpec>,
    kind: ActionKind,
}

impl ActionSpec {
    pub fn fiberwise(acting: Arc<BundleSpec>, tensor: FiberTensor) -> Self {
        Self {
            acting,
            kind: ActionKind::FiberwiseBilinear(tensor),
        }
    }

    pub fn insertion(polyvectors: Arc<BundleSpec>) -> Self {
        Self {
            acting: polyvectors,
            kind: ActionKind::Insertion,
        }
    }

    pub fn acting(&self) -> &Arc<BundleSpec> {
        &self.acting
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    /// Checks the action against the bundle `E` it acts on.
    pub fn check(&self, bundle: &BundleSpec, side: Side) -> Result<(), BundleError> {
        match &self.kind {
            ActionKind::FiberwiseBilinear(t) => {
                let (m, u) = (bundle.rank(), self.acting.rank());
                let expected = match side {
                    Side::Left => (u, m, m),
                    Side::Right => (m, u, m),
                };
                if t.shape() != expected {
                    return Err(BundleError::TensorShape {
                        expected,
                        got: t.shape(),
                    });
                }
                Ok(())
            }
            ActionKind::Insertion => {
                let n = bundle.base_dim();
                let ok = side == Side::Right
                    && bundle.is_tangent()
                    && self.acting.rank() == 1 << n
                    && self.acting.grading().map(<[usize]>::len) == Some(n + 1);
                if ok {
                    Ok(())
                } else {
                    Err(BundleError::Insertion)
                }
            }
        }
    }

    /// Output degree when an `s`-form is acted on by an `i`-form whose values
    /// lie in grade `grade` (ignored for fiberwise actions); `None` when the
    /// result is annihilated.
    pub fn output_degree(&self, s: usize, i: usize, grade: usize, n: usize) -> Option<usize> {
        let d = match self.kind {
            ActionKind::FiberwiseBilinear(_) => s + i,
            ActionKind::Insertion => {
                if s < grade {
                    return None;
                }
                s - grade + i
            }
        };
        (d <= n).then_some(d)
    }
}

/// Converts a constant matrix into a per-point field by repetition.
pub fn repeat_constant(values: &[f64], points: usize) -> PointField {
    PointField::PerPoint {
        values: values.repeat(points),
        stride: values.len(),
    }
}

impl PointField {
    /// Applies `f` to every point's values.
    pub fn transform(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> PointField {
        self.map_points(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2() -> GridManifold {
        GridManifold::cube(2, 4).unwrap()
    }

    #[test]
    fn flat_connection_zeroes_gamma() {
        let m = t2();
        let coeffs = vec![1.0; 2 * 2 * 2];
        let b = BundleSpec::trivial(&m, "E", 2)
            .unwrap()
            .with_connection(&m, PointField::Constant(coeffs))
            .unwrap();
        let flat = b.flat_connection();
        let mut zeros = 0;
        for p in 0..m.num_points() {
            for i in 0..2 {
                for a in 0..2 {
                    for c in 0..2 {
                        assert_eq!(flat.gamma(p, i, a, c), 0.0);
                        zeros += 1;
                    }
                }
            }
        }
        assert_eq!(zeros, 8 * m.num_points());
    }

    #[test]
    fn polyvector_gradings() {
        let m2 = t2();
        let b = polyvector_bundle(&m2);
        assert_eq!(b.grading(), Some(&[1, 2, 1][..]));
        assert_eq!(b.rank(), 4);
        let m4 = GridManifold::cube(4, 4).unwrap();
        let b = polyvector_bundle(&m4);
        assert_eq!(b.grading(), Some(&[1, 4, 6, 4, 1][..]));
        assert_eq!(b.rank(), 16);
    }

    #[test]
    fn polyvector_wedge_is_antisymmetric_unit() {
        let m = GridManifold::cube(3, 4).unwrap();
        let t = Arc::new(BundleSpec::tangent(&m));
        let pv = Arc::new(polyvector_bundle(&m));
        let psi = polyvector_wedge(t, pv.clone()).unwrap();
        let dense = psi.tensor().to_dense();
        let off = pv.grade_offset(2).unwrap();
        let basis = Basis::get(3);
        // enumerate e_a ∧ e_b directly
        for a in 0..3 {
            for b in 0..3 {
                for (pos, &mask) in basis.masks(2).iter().enumerate() {
                    let v = dense[(a * 3 + b) * 8 + off + pos];
                    let expected = if mask == (1 << a) | (1 << b) && a != b {
                        if a < b {
                            1.0
                        } else {
                            -1.0
                        }
                    } else {
                        0.0
                    };
                    assert_eq!(v, expected, "a={a} b={b} mask={mask:b}");
                }
            }
        }
        assert_eq!(psi.target_grades(), vec![2]);
    }

    #[test]
    fn full_wedge_is_graded_commutative() {
        let m = GridManifold::cube(4, 4).unwrap();
        let pv = Arc::new(polyvector_bundle(&m));
        let w = polyvector_wedge_full(pv.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grading = pv.grading().unwrap().to_vec();
        for j in 0..=4 {
            for jj in 0..=4 {
                let mut u = vec![0.0; 16];
                let mut v = vec![0.0; 16];
                let (oj, ojj) = (pv.grade_offset(j).unwrap(), pv.grade_offset(jj).unwrap());
                for x in &mut u[oj..oj + grading[j]] {
                    *x = rng.random_range(-1.0..1.0);
                }
                for x in &mut v[ojj..ojj + grading[jj]] {
                    *x = rng.random_range(-1.0..1.0);
                }
                let uv = w.eval(&u, &v);
                let vu = w.eval(&v, &u);
                let sign = if (j * jj) % 2 == 0 { 1.0 } else { -1.0 };
                for (a, b) in uv.iter().zip(&vu) {
                    assert!((a - sign * b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn bilinear_eval_is_bilinear() {
        let m = t2();
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let f = Arc::new(BundleSpec::trivial(&m, "F", 3).unwrap());
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let phi = BilinearMap::new(e, f, FiberTensor::dense(2, 2, 3, &vals).unwrap()).unwrap();
        let (z1, z2, eta) = ([0.3, -1.2], [2.0, 0.5], [1.1, -0.4]);
        let t = 2.5;
        let lhs = phi.eval(&[z1[0] + t * z2[0], z1[1] + t * z2[1]], &eta);
        let a = phi.eval(&z1, &eta);
        let b = phi.eval(&z2, &eta);
        for i in 0..3 {
            assert!((lhs[i] - (a[i] + t * b[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn torsion_of_flat_is_zero() {
        let m = GridManifold::cube(4, 4).unwrap();
        assert_eq!(BundleSpec::tangent(&m).torsion_check().unwrap(), 0.0);
    }

    #[test]
    fn torsion_reads_asymmetry() {
        let m = t2();
        let mut g = vec![0.0; 8];
        // Γ[0][0][1] = 1 (the 1-based Γ[1][1][2])
        g[1] = 1.0;
        let b = BundleSpec::tangent(&m)
            .with_connection(&m, PointField::Constant(g))
            .unwrap();
        assert_eq!(b.torsion_check().unwrap(), 1.0);
    }

    #[test]
    fn symmetric_connection_is_torsion_free() {
        let m = GridManifold::cube(3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3;
        let mut values = Vec::new();
        for _ in 0..m.num_points() {
            let mut g = vec![0.0; n * n * n];
            for i in 0..n {
                for a in 0..n {
                    for b in i..n {
                        let v = rng.random_range(-1.0..1.0);
                        g[(i * n + a) * n + b] = v;
                        g[(b * n + a) * n + i] = v;
                    }
                }
            }
            values.extend(g);
        }
        let b = BundleSpec::tangent(&m)
            .with_connection(&m, PointField::PerPoint { values, stride: 27 })
            .unwrap();
        assert_eq!(b.torsion_check().unwrap(), 0.0);
    }

    #[test]
    fn torsion_needs_tangent_rank() {
        let m = t2();
        let b = BundleSpec::trivial(&m, "E", 3).unwrap();
        assert!(matches!(b.torsion_check(), Err(BundleError::NotTangent { .. })));
    }

    #[test]
    fn rejects_indefinite_fiber_metric() {
        let m = t2();
        let err = BundleSpec::new(
            &m,
            "E",
            2,
            PointField::Constant(vec![1.0, 0.0, 0.0, -1.0]),
            Connection::Flat,
            None,
        )
        .unwrap_err();
        assert_eq!(err, BundleError::FiberMetric(0));
    }

    #[test]
    fn insertion_requires_polyvectors_on_tangent() {
        let m = t2();
        let t = BundleSpec::tangent(&m);
        let pv = Arc::new(polyvector_bundle(&m));
        let act = ActionSpec::insertion(pv);
        assert!(act.check(&t, Side::Right).is_ok());
        assert!(act.check(&t, Side::Left).is_err());
        let e = BundleSpec::trivial(&m, "E", 3).unwrap();
        assert!(act.check(&e, Side::Right).is_err());
        assert_eq!(act.output_degree(1, 2, 2, 2), None);
        assert_eq!(act.output_degree(2, 2, 2, 4), Some(2));
    }
}
