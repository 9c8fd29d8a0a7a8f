//! The compound-structure operator `P`, its α-variant, the functional
//! `γ ↦ ⟨⟨𝐏(γ), γ⟩⟩`, its gradient assembled from explicit term adjoints,
//! intermediary sub-domains and the explicit Euler gradient flow.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::bundle::{ActionKind, ActionSpec, BilinearMap, BundleSpec, Side};
use crate::calculus::{
    d_nabla, d_truncated, delta, delta_truncated, CalculusError, FormSpace, LinearFormMap, TruncationList,
};
use crate::forms::{
    act_graded, action_tables, scalar_table, wedge_bilinear, wedge_scalar, BVForm, FormsError, MixedForm,
};
use crate::geometry::{GeometryError, GridManifold};
use crate::multiindex::binomial;
use crate::products::{self, ProductTable};

/// Tolerance on `max |dα|` (relative to `max(1, max |α|)`) for closedness.
pub const CLOSEDNESS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("operator spec is invalid:\n{0}")]
    Invalid(ValidationReport),
    #[error("malformed operator spec: {0}")]
    Structure(String),
    #[error("this operation needs an α-spec")]
    AlphaMissing,
    #[error("sub-domain may not constrain the structure degree {0}")]
    ConstrainsStructureDegree(usize),
    #[error("conjugate gradient stalled after {iterations} iterations at relative residual {residual:e}")]
    CgStalled { iterations: usize, residual: f64 },
    #[error("cannot retract onto J² = −Id at grid point {0}: real eigenvalue")]
    Retraction(usize),
    #[error("non-finite values after step {step}")]
    BlowUp { step: usize },
    #[error(transparent)]
    Forms(#[from] FormsError),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
}

/// Output degree of a composite term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum QDegree {
    /// The term's coefficient is zero and its maps are absent.
    Unused,
    /// Degree arithmetic leaves `[0, n]` or insertion grade exceeds the form degree.
    Annihilated,
    Degree(usize),
    /// Several grades land in different degrees.
    Mixed(Vec<usize>),
}

impl QDegree {
    fn from_set(set: BTreeSet<usize>) -> Self {
        match set.len() {
            0 => QDegree::Annihilated,
            1 => QDegree::Degree(*set.iter().next().unwrap()),
            _ => QDegree::Mixed(set.into_iter().collect()),
        }
    }

    pub fn contains(&self, d: usize) -> bool {
        match self {
            QDegree::Degree(x) => *x == d,
            QDegree::Mixed(v) => v.contains(&d),
            _ => false,
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        match self {
            QDegree::Degree(x) => vec![*x],
            QDegree::Mixed(v) => v.clone(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for QDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QDegree::Unused => write!(f, "unused"),
            QDegree::Annihilated => write!(f, "annihilated"),
            QDegree::Degree(d) => write!(f, "{d}"),
            QDegree::Mixed(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    /// `q_{a_i}(l) = k`.
    DegreeClash {
        i: usize,
        l: usize,
    },
    /// `q_{a_i}(k) ≠ k + 1`.
    NotDegreeOne {
        i: usize,
        q: QDegree,
    },
    TruncationTooLarge {
        degree: usize,
    },
    /// The functional needs the structure degree among the truncations.
    TruncationMissesStructureDegree,
    AlphaNotScalar {
        rank: usize,
    },
    AlphaDegree {
        p: usize,
    },
    AlphaZero,
    AlphaNotClosed {
        residual: f64,
    },
    /// `p = k − q_{a_i}(l)`.
    AlphaDegreeClash {
        i: usize,
        l: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DegreeClash { i, l } => write!(f, "q_{i}({l}) equals the structure degree (i={i}, l={l})"),
            Violation::NotDegreeOne { i, q } => write!(f, "q_{i}(k) = {q}, expected k+1 (i={i})"),
            Violation::TruncationTooLarge { degree } => write!(f, "truncation degree {degree} exceeds n"),
            Violation::TruncationMissesStructureDegree => write!(f, "truncation list does not contain k"),
            Violation::AlphaNotScalar { rank } => write!(f, "alpha must be scalar, has rank {rank}"),
            Violation::AlphaDegree { p } => write!(f, "alpha degree p={p} outside 1..=n-k-1"),
            Violation::AlphaZero => write!(f, "alpha is identically zero"),
            Violation::AlphaNotClosed { residual } => write!(f, "alpha is not closed: max |d alpha| = {residual:e}"),
            Violation::AlphaDegreeClash { i, l } => write!(f, "p = k - q_{i}({l}) (i={i}, l={l})"),
        }
    }
}

/// Outcome of checking a spec against every constraint for every `l`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<(String, bool)>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn record(&mut self, label: String, violation: Option<Violation>) {
        self.checks.push((label, violation.is_none()));
        if let Some(v) = violation {
            self.violations.push(v);
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (label, ok) in &self.checks {
            writeln!(f, "{} {label}", if *ok { "pass" } else { "FAIL" })?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

/// Bilinear map into `E′` paired with the left action of `E′`-forms on `E`.
#[derive(Debug, Clone)]
pub struct LeftFactor {
    pub map: BilinearMap,
    pub action: ActionSpec,
}

/// Bilinear map into `E″` paired with the right action of `E″`-forms on `E`.
#[derive(Debug, Clone)]
pub struct RightFactor {
    pub map: BilinearMap,
    pub action: ActionSpec,
}

/// Coefficients, maps, actions, structure degree, truncations and optional α.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    manifold: Arc<GridManifold>,
    bundle: Arc<BundleSpec>,
    a: [f64; 4],
    k: usize,
    trunc: TruncationList,
    left: Option<LeftFactor>,
    right: Option<RightFactor>,
    alpha: Option<BVForm>,
    report: ValidationReport,
}

pub struct OperatorBuilder {
    manifold: Arc<GridManifold>,
    bundle: Arc<BundleSpec>,
    a: [f64; 4],
    k: usize,
    trunc: Option<TruncationList>,
    left: Option<LeftFactor>,
    right: Option<RightFactor>,
    alpha: Option<BVForm>,
}

impl OperatorBuilder {
    pub fn coefficients(mut self, a: [f64; 4]) -> Self {
        self.a = a;
        self
    }

    pub fn trunc(mut self, trunc: TruncationList) -> Self {
        self.trunc = Some(trunc);
        self
    }

    pub fn phi(mut self, map: BilinearMap, left_action: ActionSpec) -> Self {
        self.left = Some(LeftFactor {
            map,
            action: left_action,
        });
        self
    }

    pub fn psi(mut self, map: BilinearMap, right_action: ActionSpec) -> Self {
        self.right = Some(RightFactor {
            map,
            action: right_action,
        });
        self
    }

    pub fn alpha(mut self, alpha: BVForm) -> Self {
        self.alpha = Some(alpha);
        self
    }

    /// Checks shapes and bundles; constraint violations end up in the
    /// report instead of failing the build.
    pub fn build(self) -> Result<OperatorSpec, OperatorError> {
        let e = &self.bundle;
        if e.base_dim() != self.manifold.dim() {
            return Err(OperatorError::Structure("bundle and manifold dimensions differ".into()));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(OperatorError::Structure("non-finite coefficient".into()));
        }
        if self.k > self.manifold.dim() {
            return Err(OperatorError::Structure(format!(
                "structure degree {} exceeds n",
                self.k
            )));
        }
        if let Some(l) = &self.left {
            if !l.map.source().compatible(e) {
                return Err(OperatorError::Structure("phi source is not E".into()));
            }
            if !l.action.acting().compatible(l.map.target()) {
                return Err(OperatorError::Structure(
                    "left action bundle is not phi's target".into(),
                ));
            }
            l.action
                .check(e, Side::Left)
                .map_err(|err| OperatorError::Structure(format!("left action: {err}")))?;
        } else if self.a[0] != 0.0 || self.a[1] != 0.0 {
            return Err(OperatorError::Structure("a1 or a2 is nonzero but phi is absent".into()));
        }
        if let Some(r) = &self.right {
            if !r.map.source().compatible(e) {
                return Err(OperatorError::Structure("psi source is not E".into()));
            }
            if !r.action.acting().compatible(r.map.target()) {
                return Err(OperatorError::Structure(
                    "right action bundle is not psi's target".into(),
                ));
            }
            r.action
                .check(e, Side::Right)
                .map_err(|err| OperatorError::Structure(format!("right action: {err}")))?;
        } else if self.a[0] != 0.0 || self.a[2] != 0.0 {
            return Err(OperatorError::Structure("a1 or a3 is nonzero but psi is absent".into()));
        }
        if let Some(alpha) = &self.alpha {
            if **alpha.manifold() != *self.manifold {
                return Err(OperatorError::Structure("alpha lives on another grid".into()));
            }
        }
        let p = self.alpha.as_ref().map(BVForm::degree);
        let trunc = self
            .trunc
            .unwrap_or_else(|| default_truncation(self.k, p, self.manifold.dim()));
        let mut spec = OperatorSpec {
            manifold: self.manifold,
            bundle: self.bundle,
            a: self.a,
            k: self.k,
            trunc,
            left: self.left,
            right: self.right,
            alpha: self.alpha,
            report: ValidationReport::default(),
        };
        spec.report = spec.compute_report();
        Ok(spec)
    }
}

/// `[k, k+2]`, or `[k, 2p+k+2]` for an α-spec, dropping entries above `n`.
pub fn default_truncation(k: usize, p: Option<usize>, n: usize) -> TruncationList {
    let second = match p {
        Some(p) => 2 * p + k + 2,
        None => k + 2,
    };
    let mut v = vec![k];
    if second <= n {
        v.push(second);
    }
    TruncationList::new(v).expect("increasing")
}

impl OperatorSpec {
    pub fn builder(manifold: &Arc<GridManifold>, bundle: &Arc<BundleSpec>, k: usize) -> OperatorBuilder {
        OperatorBuilder {
            manifold: manifold.clone(),
            bundle: bundle.clone(),
            a: [0.0; 4],
            k,
            trunc: None,
            left: None,
            right: None,
            alpha: None,
        }
    }

    pub fn manifold(&self) -> &Arc<GridManifold> {
        &self.manifold
    }

    pub fn bundle(&self) -> &Arc<BundleSpec> {
        &self.bundle
    }

    pub fn a(&self) -> [f64; 4] {
        self.a
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn trunc(&self) -> &TruncationList {
        &self.trunc
    }

    pub fn left(&self) -> Option<&LeftFactor> {
        self.left.as_ref()
    }

    pub fn right(&self) -> Option<&RightFactor> {
        self.right.as_ref()
    }

    pub fn alpha(&self) -> Option<&BVForm> {
        self.alpha.as_ref()
    }

    /// Degree `p` of α.
    pub fn p(&self) -> Option<usize> {
        self.alpha.as_ref().map(BVForm::degree)
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    pub fn is_valid(&self) -> bool {
        self.report.is_valid()
    }

    /// The same spec with another truncation list.
    pub fn with_trunc(&self, trunc: TruncationList) -> Self {
        let mut out = self.clone();
        out.trunc = trunc;
        out.report = out.compute_report();
        out
    }

    /// The same spec without α.
    pub fn without_alpha(&self) -> Self {
        let mut out = self.clone();
        out.alpha = None;
        out.report = out.compute_report();
        out
    }

    fn ensure_valid(&self) -> Result<(), OperatorError> {
        if self.report.is_valid() {
            Ok(())
        } else {
            Err(OperatorError::Invalid(self.report.clone()))
        }
    }

    fn n(&self) -> usize {
        self.manifold.dim()
    }

    fn psi_grades(&self) -> Option<Vec<usize>> {
        let r = self.right.as_ref()?;
        match r.action.kind() {
            ActionKind::Insertion => Some(r.map.target_grades()),
            ActionKind::FiberwiseBilinear(_) => None,
        }
    }

    fn phi_grades(&self) -> Option<Vec<usize>> {
        let l = self.left.as_ref()?;
        match l.action.kind() {
            ActionKind::Insertion => Some(l.map.target_grades()),
            ActionKind::FiberwiseBilinear(_) => None,
        }
    }

    /// Output degrees of a left action on an `E` form of degree `s` by an
    /// `E′` form of degree `i`.
    fn left_degrees(&self, s: usize, i: usize) -> BTreeSet<usize> {
        action_degrees(self.left.as_ref().map(|l| &l.action), self.phi_grades(), s, i, self.n())
    }

    fn right_degrees(&self, s: usize, i: usize) -> BTreeSet<usize> {
        action_degrees(
            self.right.as_ref().map(|r| &r.action),
            self.psi_grades(),
            s,
            i,
            self.n(),
        )
    }

    /// `(q_{a_1}(l), q_{a_2}(l), q_{a_3}(l))`.
    pub fn q_degrees(&self, l: usize) -> [QDegree; 3] {
        let n = self.n();
        let dl = l + 1;
        let pair = 2 * l;
        let usable = dl <= n && pair <= n;
        let q1 = if self.left.is_none() || self.right.is_none() {
            QDegree::Unused
        } else if !usable {
            QDegree::Annihilated
        } else {
            let mut set = BTreeSet::new();
            for u in self.left_degrees(dl, pair) {
                set.extend(self.right_degrees(u, pair));
            }
            QDegree::from_set(set)
        };
        let q2 = if self.left.is_none() {
            QDegree::Unused
        } else if !usable {
            QDegree::Annihilated
        } else {
            QDegree::from_set(self.left_degrees(dl, pair))
        };
        let q3 = if self.right.is_none() {
            QDegree::Unused
        } else if !usable {
            QDegree::Annihilated
        } else {
            QDegree::from_set(self.right_degrees(dl, pair))
        };
        [q1, q2, q3]
    }

    fn compute_report(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n = self.n();
        let k = self.k;
        for i in 1..=3 {
            if self.a[i - 1] == 0.0 {
                continue;
            }
            for l in 0..=n {
                let q = &self.q_degrees(l)[i - 1];
                let bad = q.contains(k);
                report.record(
                    format!("q_{i}({l}) = {q} differs from k = {k}"),
                    bad.then_some(Violation::DegreeClash { i, l }),
                );
            }
            let qk = self.q_degrees(k)[i - 1].clone();
            let ok = qk == QDegree::Degree(k + 1);
            report.record(
                format!("q_{i}(k) = {qk} equals k+1 = {}", k + 1),
                (!ok).then_some(Violation::NotDegreeOne { i, q: qk }),
            );
        }
        let too_large = self.trunc.degrees().iter().find(|&&d| d > n).copied();
        report.record(
            format!("truncation {:?} within 0..={n}", self.trunc.degrees()),
            too_large.map(|degree| Violation::TruncationTooLarge { degree }),
        );
        report.record(
            format!("truncation {:?} contains k = {k}", self.trunc.degrees()),
            (!self.trunc.contains(k)).then_some(Violation::TruncationMissesStructureDegree),
        );
        if let Some(alpha) = &self.alpha {
            let rank = alpha.bundle().rank();
            report.record(
                format!("alpha is scalar (rank {rank})"),
                (rank != 1).then_some(Violation::AlphaNotScalar { rank }),
            );
            let p = alpha.degree();
            let in_range = p >= 1 && p + k < n;
            report.record(
                format!("1 <= p = {p} <= n-k-1"),
                (!in_range).then_some(Violation::AlphaDegree { p }),
            );
            let size = alpha.max_abs();
            report.record("alpha is nonzero".into(), (size == 0.0).then_some(Violation::AlphaZero));
            let residual = d_nabla(alpha).max_abs();
            let closed = residual <= CLOSEDNESS_TOLERANCE * size.max(1.0);
            report.record(
                format!("d alpha = 0 (max |d alpha| = {residual:.3e})"),
                (!closed).then_some(Violation::AlphaNotClosed { residual }),
            );
            for i in 1..=3 {
                if self.a[i - 1] == 0.0 {
                    continue;
                }
                for l in 0..=n {
                    let clash = self.q_degrees(l)[i - 1].degrees().iter().any(|&q| q + p == k);
                    report.record(
                        format!("p != k - q_{i}({l})"),
                        clash.then_some(Violation::AlphaDegreeClash { i, l }),
                    );
                }
            }
        }
        report
    }
}

fn action_degrees(
    action: Option<&ActionSpec>,
    grades: Option<Vec<usize>>,
    s: usize,
    i: usize,
    n: usize,
) -> BTreeSet<usize> {
    let Some(action) = action else {
        return BTreeSet::new();
    };
    match action.kind() {
        ActionKind::FiberwiseBilinear(_) => action.output_degree(s, i, 0, n).into_iter().collect(),
        ActionKind::Insertion => grades
            .unwrap_or_else(|| (0..=n).collect())
            .into_iter()
            .filter_map(|j| action.output_degree(s, i, j, n))
            .collect(),
    }
}

/// Checks every constraint of `spec` for all `l`.
pub fn validate(spec: &OperatorSpec) -> ValidationReport {
    spec.compute_report()
}

pub fn q_degrees(spec: &OperatorSpec, l: usize) -> [QDegree; 3] {
    spec.q_degrees(l)
}

/// Intermediate products for one homogeneous part `ρ = γ_r`.
struct Context<'a> {
    spec: &'a OperatorSpec,
    rho: &'a BVForm,
    d: BVForm,
    phi_rr: Option<BVForm>,
    psi_rr: Option<BVForm>,
    /// `(ρ ∧_φ ρ) ∧ d ρ`.
    u: Option<MixedForm>,
}

impl<'a> Context<'a> {
    fn new(spec: &'a OperatorSpec, rho: &'a BVForm) -> Result<Self, OperatorError> {
        let [a1, a2, a3, _] = spec.a;
        let d = d_truncated(rho, &spec.trunc);
        let phi_rr = match &spec.left {
            Some(l) if a1 != 0.0 || a2 != 0.0 => Some(wedge_bilinear(rho, rho, &l.map)?),
            _ => None,
        };
        let psi_rr = match &spec.right {
            Some(r) if a1 != 0.0 || a3 != 0.0 => Some(wedge_bilinear(rho, rho, &r.map)?),
            _ => None,
        };
        let u = match &phi_rr {
            Some(f) => Some(spec.left_act(f, &d)?),
            None => None,
        };
        Ok(Self {
            spec,
            rho,
            d,
            phi_rr,
            psi_rr,
            u,
        })
    }

    /// `P(ρ)` by terms.
    fn evaluate(&self) -> Result<MixedForm, OperatorError> {
        let spec = self.spec;
        let [a1, a2, a3, a4] = spec.a;
        let mut out = MixedForm::new(&spec.manifold, &spec.bundle);
        if a1 != 0.0 {
            let psi = self.psi_rr.as_ref().unwrap();
            for part in self.u.as_ref().unwrap().parts() {
                out.axpy(a1, &spec.right_act(part, psi)?)?;
            }
        }
        if a2 != 0.0 {
            out.axpy(a2, self.u.as_ref().unwrap())?;
        }
        if a3 != 0.0 {
            out.axpy(a3, &spec.right_act(&self.d, self.psi_rr.as_ref().unwrap())?)?;
        }
        if a4 != 0.0 {
            out.add_part(self.d.scale(a4))?;
        }
        Ok(out)
    }
}

impl OperatorSpec {
    fn left_act(&self, acting: &BVForm, e: &BVForm) -> Result<MixedForm, OperatorError> {
        let l = self.left.as_ref().expect("left factor present");
        Ok(act_graded(
            e,
            acting,
            &l.action,
            Side::Left,
            self.phi_grades().as_deref(),
        )?)
    }

    fn right_act(&self, e: &BVForm, acting: &BVForm) -> Result<MixedForm, OperatorError> {
        let r = self.right.as_ref().expect("right factor present");
        Ok(act_graded(
            e,
            acting,
            &r.action,
            Side::Right,
            self.psi_grades().as_deref(),
        )?)
    }

    fn left_tables(&self, acting_degree: usize, e_degree: usize) -> Vec<ProductTable> {
        let l = self.left.as_ref().expect("left factor present");
        action_tables(
            &l.action,
            Side::Left,
            self.n(),
            e_degree,
            acting_degree,
            self.phi_grades().as_deref(),
        )
    }

    fn right_tables(&self, e_degree: usize, acting_degree: usize) -> Vec<ProductTable> {
        let r = self.right.as_ref().expect("right factor present");
        action_tables(
            &r.action,
            Side::Right,
            self.n(),
            e_degree,
            acting_degree,
            self.psi_grades().as_deref(),
        )
    }

    fn check_form(&self, rho: &BVForm) -> Result<(), OperatorError> {
        if **rho.manifold() != *self.manifold || !rho.bundle().compatible(&self.bundle) {
            return Err(OperatorError::Forms(FormsError::BundleMismatch {
                expected: self.bundle.id().to_owned(),
                got: rho.bundle().id().to_owned(),
            }));
        }
        Ok(())
    }
}

/// `P(ρ) = a₁(ρ∧_φρ)∧dρ∧(ρ∧_ψρ) + a₂(ρ∧_φρ)∧dρ + a₃ dρ∧(ρ∧_ψρ) + a₄ dρ`
/// with the truncated derivative.
pub fn apply_p(spec: &OperatorSpec, rho: &BVForm) -> Result<MixedForm, OperatorError> {
    spec.ensure_valid()?;
    spec.check_form(rho)?;
    Context::new(spec, rho)?.evaluate()
}

/// `α ∧ P(ρ)`.
pub fn apply_p_alpha(spec: &OperatorSpec, rho: &BVForm) -> Result<MixedForm, OperatorError> {
    let alpha = spec.alpha.as_ref().ok_or(OperatorError::AlphaMissing)?;
    let p = apply_p(spec, rho)?;
    alpha_wedge_mixed(alpha, &p)
}

fn alpha_wedge_mixed(alpha: &BVForm, form: &MixedForm) -> Result<MixedForm, OperatorError> {
    let mut out = MixedForm::new(form.manifold(), form.bundle());
    for part in form.parts() {
        out.add_part(wedge_scalar(alpha, part)?)?;
    }
    Ok(out)
}

/// `P(γ_k)`, or `α ∧ P(γ_k)` for an α-spec: the structure residual.
pub fn structure_residual(spec: &OperatorSpec, gamma: &MixedForm) -> Result<MixedForm, OperatorError> {
    let gk = gamma.project(spec.k)?;
    if spec.alpha.is_some() {
        apply_p_alpha(spec, &gk)
    } else {
        apply_p(spec, &gk)
    }
}

/// `𝐏(γ) = Σ_r P(γ_r)` (each term wedged with α for an α-spec).
pub fn bold_p(spec: &OperatorSpec, gamma: &MixedForm) -> Result<MixedForm, OperatorError> {
    spec.ensure_valid()?;
    let mut out = MixedForm::new(&spec.manifold, &spec.bundle);
    for part in gamma.parts() {
        spec.check_form(part)?;
        let p = Context::new(spec, part)?.evaluate()?;
        match &spec.alpha {
            Some(alpha) => out.axpy(1.0, &alpha_wedge_mixed(alpha, &p)?)?,
            None => out.axpy(1.0, &p)?,
        }
    }
    Ok(out)
}

/// `⟨⟨𝐏(γ), γ⟩⟩`.
pub fn functional(spec: &OperatorSpec, gamma: &MixedForm) -> Result<f64, OperatorError> {
    Ok(bold_p(spec, gamma)?.l2_inner(gamma)?)
}

/// The seven linear maps of the first variation, at `γ_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    /// `b ↦ a₁(b∧_φγ + γ∧_φb) ∧ dγ ∧ (γ∧_ψγ)`
    L1,
    /// `B ↦ a₁(γ∧_φγ) ∧ B ∧ (γ∧_ψγ)`
    L1Prime,
    /// `b ↦ a₁(γ∧_φγ) ∧ dγ ∧ (b∧_ψγ + γ∧_ψb)`
    L1Double,
    /// `b ↦ a₂(b∧_φγ + γ∧_φb) ∧ dγ`
    L2,
    /// `B ↦ a₂(γ∧_φγ) ∧ B`
    L2Prime,
    /// `B ↦ a₃ B ∧ (γ∧_ψγ)`
    L3,
    /// `b ↦ a₃ dγ ∧ (b∧_ψγ + γ∧_ψb)`
    L3Prime,
}

impl TermKind {
    pub const ALL: [TermKind; 7] = [
        TermKind::L1,
        TermKind::L1Prime,
        TermKind::L1Double,
        TermKind::L2,
        TermKind::L2Prime,
        TermKind::L3,
        TermKind::L3Prime,
    ];

    /// Which `a_i` the term carries (1-based).
    pub fn coefficient(self) -> usize {
        match self {
            TermKind::L1 | TermKind::L1Prime | TermKind::L1Double => 1,
            TermKind::L2 | TermKind::L2Prime => 2,
            TermKind::L3 | TermKind::L3Prime => 3,
        }
    }

    /// Whether the argument is `d[k]β_r` (degree `r + 1`) rather than `β_r`.
    pub fn takes_derivative(self) -> bool {
        matches!(self, TermKind::L1Prime | TermKind::L2Prime | TermKind::L3)
    }
}

/// One term map `L_{·,γ_r}` restricted to a single output degree `q`, composed
/// with `α∧` for an α-spec.
pub struct TermMap<'a> {
    ctx: Context<'a>,
    kind: TermKind,
    q: usize,
}

impl<'a> TermMap<'a> {
    pub fn new(spec: &'a OperatorSpec, gamma_r: &'a BVForm, kind: TermKind, q: usize) -> Result<Self, OperatorError> {
        spec.ensure_valid()?;
        spec.check_form(gamma_r)?;
        let needs_left = matches!(kind.coefficient(), 1 | 2);
        let needs_right = matches!(kind.coefficient(), 1 | 3);
        if (needs_left && spec.left.is_none()) || (needs_right && spec.right.is_none()) {
            return Err(OperatorError::Structure(format!("{kind:?} needs maps that are absent")));
        }
        Ok(Self {
            ctx: Context::new(spec, gamma_r)?,
            kind,
            q,
        })
    }

    fn spec(&self) -> &OperatorSpec {
        self.ctx.spec
    }

    fn r(&self) -> usize {
        self.ctx.rho.degree()
    }

    fn coefficient(&self) -> f64 {
        self.spec().a[self.kind.coefficient() - 1]
    }

    fn phi_lin(&self, b: &BVForm) -> Result<BVForm, OperatorError> {
        let map = &self.spec().left.as_ref().unwrap().map;
        Ok(wedge_bilinear(b, self.ctx.rho, map)?.add(&wedge_bilinear(self.ctx.rho, b, map)?)?)
    }

    fn psi_lin(&self, b: &BVForm) -> Result<BVForm, OperatorError> {
        let map = &self.spec().right.as_ref().unwrap().map;
        Ok(wedge_bilinear(b, self.ctx.rho, map)?.add(&wedge_bilinear(self.ctx.rho, b, map)?)?)
    }

    fn forward(&self, x: &BVForm) -> Result<MixedForm, OperatorError> {
        let spec = self.spec();
        let ctx = &self.ctx;
        let c = self.coefficient();
        let mut out = MixedForm::new(&spec.manifold, &spec.bundle);
        match self.kind {
            TermKind::L1 | TermKind::L1Prime => {
                let (acting, e) = match self.kind {
                    TermKind::L1 => (self.phi_lin(x)?, ctx.d.clone()),
                    _ => (ctx.phi_rr.clone().unwrap(), x.clone()),
                };
                let u = spec.left_act(&acting, &e)?;
                for part in u.parts() {
                    out.axpy(c, &spec.right_act(part, ctx.psi_rr.as_ref().unwrap())?)?;
                }
            }
            TermKind::L1Double => {
                let w = self.psi_lin(x)?;
                for part in ctx.u.as_ref().unwrap().parts() {
                    out.axpy(c, &spec.right_act(part, &w)?)?;
                }
            }
            TermKind::L2 => out.axpy(c, &spec.left_act(&self.phi_lin(x)?, &ctx.d)?)?,
            TermKind::L2Prime => out.axpy(c, &spec.left_act(ctx.phi_rr.as_ref().unwrap(), x)?)?,
            TermKind::L3 => out.axpy(c, &spec.right_act(x, ctx.psi_rr.as_ref().unwrap())?)?,
            TermKind::L3Prime => out.axpy(c, &spec.right_act(&ctx.d, &self.psi_lin(x)?)?)?,
        }
        Ok(out)
    }

    /// `Σ_tables T_x(y, z̄)` over the tables of `tables` landing in degree `q`.
    fn pull_x(tables: &[ProductTable], q: usize, y: &[f64], zbar: &[f64], len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for t in tables.iter().filter(|t| t.out_degree == q) {
            t.transpose_x(y, zbar, &mut out);
        }
        out
    }

    fn pull_y(tables: &[ProductTable], q: usize, x: &[f64], zbar: &[f64], len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for t in tables.iter().filter(|t| t.out_degree == q) {
            t.transpose_y(x, zbar, &mut out);
        }
        out
    }

    fn len(&self, bundle: &BundleSpec, degree: usize) -> usize {
        let m = &self.spec().manifold;
        m.num_points() * binomial(m.dim(), degree) * bundle.rank()
    }

    /// Transpose of `b ↦ b∧γ + γ∧b` through a bilinear map.
    fn pull_bilinear(&self, map: &BilinearMap, wbar: &[f64]) -> Vec<f64> {
        let r = self.r();
        let rho = self.ctx.rho.coefficients();
        let mut out = vec![0.0; rho.len()];
        if let Some(t) = products::shuffle(self.spec().n(), r, r, map.tensor()) {
            t.transpose_x(rho, wbar, &mut out);
            t.transpose_y(rho, wbar, &mut out);
        }
        out
    }

    /// Euclidean transpose on a degree-`q` cotangent.
    fn backward(&self, zbar: &[f64]) -> Vec<f64> {
        let spec = self.spec();
        let ctx = &self.ctx;
        let c = self.coefficient();
        let r = self.r();
        let q = self.q;
        let pair = 2 * r;
        let scaled = |v: Vec<f64>| v.into_iter().map(|x| c * x).collect::<Vec<_>>();
        match self.kind {
            TermKind::L3 => {
                let psi = ctx.psi_rr.as_ref().unwrap();
                let len = ctx.d.coefficients().len();
                scaled(Self::pull_x(
                    &spec.right_tables(r + 1, pair),
                    q,
                    psi.coefficients(),
                    zbar,
                    len,
                ))
            }
            TermKind::L3Prime => {
                let right = spec.right.as_ref().unwrap();
                let len = self.len(right.map.target(), pair);
                let wbar = Self::pull_y(&spec.right_tables(r + 1, pair), q, ctx.d.coefficients(), zbar, len);
                scaled(self.pull_bilinear(&right.map, &wbar))
            }
            TermKind::L2Prime => {
                let phi = ctx.phi_rr.as_ref().unwrap();
                let len = ctx.d.coefficients().len();
                scaled(Self::pull_y(
                    &spec.left_tables(pair, r + 1),
                    q,
                    phi.coefficients(),
                    zbar,
                    len,
                ))
            }
            TermKind::L2 => {
                let left = spec.left.as_ref().unwrap();
                let len = self.len(left.map.target(), pair);
                let vbar = Self::pull_x(&spec.left_tables(pair, r + 1), q, ctx.d.coefficients(), zbar, len);
                scaled(self.pull_bilinear(&left.map, &vbar))
            }
            TermKind::L1 | TermKind::L1Prime => {
                let left = spec.left.as_ref().unwrap();
                let psi = ctx.psi_rr.as_ref().unwrap();
                let phi = ctx.phi_rr.as_ref().unwrap();
                let mut acc = vec![
                    0.0;
                    if self.kind == TermKind::L1 {
                        ctx.rho.coefficients().len()
                    } else {
                        ctx.d.coefficients().len()
                    }
                ];
                for u in spec.left_degrees(r + 1, pair) {
                    let ulen = self.len(&spec.bundle, u);
                    let ubar = Self::pull_x(&spec.right_tables(u, pair), q, psi.coefficients(), zbar, ulen);
                    let part = if self.kind == TermKind::L1 {
                        let vlen = self.len(left.map.target(), pair);
                        let vbar = Self::pull_x(&spec.left_tables(pair, r + 1), u, ctx.d.coefficients(), &ubar, vlen);
                        self.pull_bilinear(&left.map, &vbar)
                    } else {
                        Self::pull_y(&spec.left_tables(pair, r + 1), u, phi.coefficients(), &ubar, acc.len())
                    };
                    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
                scaled(acc)
            }
            TermKind::L1Double => {
                let right = spec.right.as_ref().unwrap();
                let wlen = self.len(right.map.target(), pair);
                let mut wbar = vec![0.0; wlen];
                for part in ctx.u.as_ref().unwrap().parts() {
                    let tables = spec.right_tables(part.degree(), pair);
                    let contrib = Self::pull_y(&tables, q, part.coefficients(), zbar, wlen);
                    wbar.iter_mut().zip(contrib).for_each(|(a, b)| *a += b);
                }
                scaled(self.pull_bilinear(&right.map, &wbar))
            }
        }
    }

    fn alpha_degree(&self) -> usize {
        self.spec().p().unwrap_or(0)
    }
}

impl LinearFormMap for TermMap<'_> {
    fn domain(&self) -> FormSpace {
        let degree = self.r() + usize::from(self.kind.takes_derivative());
        FormSpace::new(&self.spec().manifold, &self.spec().bundle, degree)
    }

    fn codomain(&self) -> FormSpace {
        FormSpace::new(&self.spec().manifold, &self.spec().bundle, self.q + self.alpha_degree())
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        let out = self.forward(x).expect("term forward on a checked spec").project(self.q);
        let out = out.unwrap_or_else(|_| BVForm::zeros(&self.spec().manifold, &self.spec().bundle, self.q));
        match &self.spec().alpha {
            Some(alpha) => wedge_scalar(alpha, &out).expect("alpha is scalar"),
            None => out,
        }
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        let spec = self.spec();
        let mut zbar = y.lowered();
        if let Some(alpha) = &spec.alpha {
            zbar = alpha_transpose(
                alpha,
                self.q,
                spec.bundle.rank(),
                &zbar,
                FormSpace::new(&spec.manifold, &spec.bundle, self.q).len(),
            );
        }
        let xbar = self.backward(&zbar);
        let dom = self.domain();
        BVForm::raised(&dom.manifold, &dom.bundle, dom.degree, &xbar)
    }
}

/// Euclidean transpose of `x ↦ α ∧ x` from degree `q + p` back to degree `q`.
fn alpha_transpose(alpha: &BVForm, q: usize, rank: usize, zbar: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    if let Some(t) = scalar_table(alpha, q, rank) {
        t.transpose_y(alpha.coefficients(), zbar, &mut out);
    }
    out
}

/// `x ↦ α ∧ x` on one degree, with its adjoint `(α∧)*`.
pub struct AlphaWedge<'a> {
    pub alpha: &'a BVForm,
    pub space: FormSpace,
}

impl LinearFormMap for AlphaWedge<'_> {
    fn domain(&self) -> FormSpace {
        self.space.clone()
    }

    fn codomain(&self) -> FormSpace {
        FormSpace {
            degree: self.space.degree + self.alpha.degree(),
            ..self.space.clone()
        }
    }

    fn apply(&self, x: &BVForm) -> BVForm {
        wedge_scalar(self.alpha, x).expect("alpha is scalar")
    }

    fn adjoint(&self, y: &BVForm) -> BVForm {
        let s = &self.space;
        let xbar = alpha_transpose(self.alpha, s.degree, s.bundle.rank(), &y.lowered(), s.len());
        BVForm::raised(&s.manifold, &s.bundle, s.degree, &xbar)
    }
}

/// `grad 𝒫(γ)`: for every `r`, the seven term adjoints applied to the parts
/// of `γ` in their output degrees (through `δ[trunc]` for the three terms that
/// see `d[trunc]β_r`), then `a₄ δ[trunc] γ_{r+1}` — for an α-spec
/// `δ[trunc]((α∧)* a₄ γ_{r+1+p})` — and finally `𝐏(γ)`.
pub fn gradient(spec: &OperatorSpec, gamma: &MixedForm) -> Result<MixedForm, OperatorError> {
    spec.ensure_valid()?;
    let n = spec.n();
    let p = spec.p().unwrap_or(0);
    let mut grad = bold_p(spec, gamma)?;
    for r in 0..=n {
        if let Some(gr) = gamma.part(r) {
            for kind in TermKind::ALL {
                if spec.a[kind.coefficient() - 1] == 0.0 {
                    continue;
                }
                let qs = spec.q_degrees(r)[kind.coefficient() - 1].degrees();
                for q in qs {
                    let Some(y) = gamma.part(q + p) else { continue };
                    let map = TermMap::new(spec, gr, kind, q)?;
                    let mut contrib = map.adjoint(y);
                    if kind.takes_derivative() {
                        contrib = delta_truncated(&contrib, &spec.trunc).expect("degree r+1 >= 1");
                    }
                    grad.add_part(contrib)?;
                }
            }
        }
        let a4 = spec.a[3];
        if a4 == 0.0 || r + 1 > n {
            continue;
        }
        let Some(y) = gamma.part(r + 1 + p) else { continue };
        let pulled = match &spec.alpha {
            Some(alpha) => AlphaWedge {
                alpha,
                space: FormSpace::new(&spec.manifold, &spec.bundle, r + 1),
            }
            .adjoint(y),
            None => y.clone(),
        };
        let contrib = delta_truncated(&pulled.scale(a4), &spec.trunc).expect("degree r+1 >= 1");
        grad.add_part(contrib)?;
    }
    Ok(grad)
}

/// Pointwise constraint defining `U ⊂ Ω^k(M, E)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Membership {
    /// `J² = −Id` for a `T_M`-valued 1-form.
    AlmostComplex,
}

/// Intermediary sub-domain: zeroed degrees, coclosed degrees, and `γ_k ∈ U`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SubdomainSpec {
    pub zero_degrees: BTreeSet<usize>,
    pub coclosed_degrees: BTreeSet<usize>,
    pub membership: Option<Membership>,
    pub structure_degree: usize,
    pub cg_max_iterations: usize,
}

/// Relative residual at which the coclosed projection's CG stops.
pub const CG_TOLERANCE: f64 = 1e-10;

impl SubdomainSpec {
    pub fn unconstrained(k: usize) -> Self {
        Self {
            structure_degree: k,
            cg_max_iterations: 5000,
            ..Self::default()
        }
    }

    fn zero_set(spec: &OperatorSpec) -> BTreeSet<usize> {
        let n = spec.n();
        let k = spec.k;
        let p = spec.p().unwrap_or(0);
        let first = k + 1 + p;
        let mut set = BTreeSet::new();
        if first <= n {
            set.insert(first);
            for (i, q) in spec.q_degrees(first).iter().enumerate() {
                if spec.a[i] == 0.0 {
                    continue;
                }
                for d in q.degrees() {
                    if d + p <= n {
                        set.insert(d + p);
                    }
                }
            }
        }
        set
    }

    /// Zero constraints only, matching the `[k, k+2]` (`[k, 2p+k+2]`) functionals.
    pub fn relaxed(spec: &OperatorSpec) -> Result<Self, OperatorError> {
        Self {
            zero_degrees: Self::zero_set(spec),
            ..Self::unconstrained(spec.k)
        }
        .checked()
    }

    /// Zero constraints plus `δγ_{k+2} = 0` (`δγ_{2p+k+2} = 0`).
    pub fn with_coclosed(spec: &OperatorSpec) -> Result<Self, OperatorError> {
        let p = spec.p().unwrap_or(0);
        let c = 2 * p + spec.k + 2;
        let mut out = Self::relaxed(spec)?;
        if c <= spec.n() {
            out.coclosed_degrees.insert(c);
        }
        out.checked()
    }

    pub fn with_membership(mut self, membership: Membership) -> Self {
        self.membership = Some(membership);
        self
    }

    pub fn checked(self) -> Result<Self, OperatorError> {
        let k = self.structure_degree;
        if self.zero_degrees.contains(&k) || self.coclosed_degrees.contains(&k) {
            return Err(OperatorError::ConstrainsStructureDegree(k));
        }
        Ok(self)
    }

    /// Drops the zeroed degrees from a tangent vector.
    pub fn tangent(&self, v: &MixedForm) -> MixedForm {
        let mut out = v.clone();
        for d in &self.zero_degrees {
            out.remove(*d);
        }
        out
    }
}

/// Projects `γ` onto the sub-domain: zeroing, removal of the exact part in
/// coclosed degrees, and pointwise retraction of `γ_k` onto `U`.
pub fn project_subdomain(gamma: &MixedForm, sub: &SubdomainSpec) -> Result<MixedForm, OperatorError> {
    let sub = sub.clone().checked()?;
    let mut out = gamma.clone();
    for d in &sub.zero_degrees {
        out.remove(*d);
    }
    for &j in &sub.coclosed_degrees {
        if j == 0 {
            continue;
        }
        if let Some(part) = out.part(j).cloned() {
            let x = solve_exact_part(&part, sub.cg_max_iterations)?;
            out.set_part(part.sub(&d_nabla(&x))?)?;
        }
    }
    if let Some(Membership::AlmostComplex) = sub.membership {
        if let Some(part) = out.part(sub.structure_degree).cloned() {
            out.set_part(retract_almost_complex(&part)?)?;
        }
    }
    Ok(out)
}

/// Least-squares `x` with `d x ≈ β` via CG on `δ d x = δ β`.
fn solve_exact_part(beta: &BVForm, max_iterations: usize) -> Result<BVForm, OperatorError> {
    let b = delta(beta).expect("degree at least 1");
    let manifold = beta.manifold();
    let h_min = (0..manifold.dim())
        .map(|i| manifold.spacing(i))
        .fold(f64::INFINITY, f64::min);
    // an already coclosed β leaves only roundoff in δβ, which need not lie in
    // the range of δd
    let target = CG_TOLERANCE * b.l2_norm().max(beta.l2_norm() / h_min);
    let b_norm = b.l2_norm();
    let mut x = BVForm::zeros(manifold, beta.bundle(), beta.degree() - 1);
    if b_norm <= target {
        return Ok(x);
    }
    let apply = |v: &BVForm| delta(&d_nabla(v)).expect("degree at least 1");
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.l2_inner(&r)?;
    for it in 0..max_iterations {
        if rr.sqrt() <= target {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = p.l2_inner(&ap)?;
        if pap <= 0.0 {
            return Err(OperatorError::CgStalled {
                iterations: it,
                residual: rr.sqrt() / b_norm,
            });
        }
        let step = rr / pap;
        x.axpy(step, &p)?;
        r.axpy(-step, &ap)?;
        let rr_new = r.l2_inner(&r)?;
        p = r.add(&p.scale(rr_new / rr))?;
        rr = rr_new;
    }
    if rr.sqrt() <= target {
        return Ok(x);
    }
    Err(OperatorError::CgStalled {
        iterations: max_iterations,
        residual: rr.sqrt() / b_norm,
    })
}

/// Pointwise `J ↦ J(−J²)^{−1/2}` via the Newton iteration `X ← (X − X⁻¹)/2`.
pub fn retract_almost_complex(j: &BVForm) -> Result<BVForm, OperatorError> {
    let n = j.manifold().dim();
    if j.degree() != 1 || j.bundle().rank() != n {
        return Err(OperatorError::Structure("retraction needs a T_M-valued 1-form".into()));
    }
    let mut out = j.clone();
    let w = n * n;
    for (p, chunk) in out.coefficients_mut().chunks_mut(w).enumerate() {
        let mut x = matrix_of(chunk, n);
        let mut converged = false;
        for _ in 0..100 {
            let inv = x.clone().try_inverse().ok_or(OperatorError::Retraction(p))?;
            let next = (&x - inv) * 0.5;
            let change = (&next - &x).amax();
            x = next;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(OperatorError::Retraction(p));
            }
            if change <= 1e-15 * x.amax().max(1.0) {
                converged = true;
                break;
            }
        }
        let defect = (&x * &x + DMatrix::identity(n, n)).amax();
        if !converged && defect > 1e-12 {
            return Err(OperatorError::Retraction(p));
        }
        write_matrix(&x, chunk, n);
    }
    Ok(out)
}

/// `J[a][i]` from the coefficient block `(dx^i, ∂_a)` of one point.
pub(crate) fn matrix_of(block: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, i| block[i * n + a])
}

pub(crate) fn write_matrix(m: &DMatrix<f64>, block: &mut [f64], n: usize) {
    for i in 0..n {
        for a in 0..n {
            block[i * n + a] = m[(a, i)];
        }
    }
}

/// One row of the flow history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowRecord {
    pub step: usize,
    pub time: f64,
    pub energy: f64,
    pub grad_norm: f64,
    pub p_residual: f64,
}

/// State of the explicit Euler gradient flow.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub gamma: MixedForm,
    pub step: f64,
    pub time: f64,
    pub history: Vec<FlowRecord>,
    /// Gradient at `gamma`, reused by the next step.
    grad: MixedForm,
}

/// Default Euler step: `min(1e-3, 1e-3 / ‖grad γ₀‖)`.
pub fn default_step(grad_norm: f64) -> f64 {
    if grad_norm > 0.0 {
        (1e-3f64).min(1e-3 / grad_norm)
    } else {
        1e-3
    }
}

impl FlowState {
    /// Projects `gamma` onto the sub-domain and records the initial row.
    /// `step = None` picks [`default_step`].
    pub fn start(
        spec: &OperatorSpec,
        sub: &SubdomainSpec,
        gamma: MixedForm,
        step: Option<f64>,
    ) -> Result<Self, OperatorError> {
        let gamma = project_subdomain(&gamma, sub)?;
        let grad = gradient(spec, &gamma)?;
        let grad_norm = sub.tangent(&grad).l2_norm();
        let record = FlowRecord {
            step: 0,
            time: 0.0,
            energy: functional(spec, &gamma)?,
            grad_norm,
            p_residual: structure_residual(spec, &gamma)?.l2_norm(),
        };
        if !(record.energy.is_finite() && record.grad_norm.is_finite()) {
            return Err(OperatorError::BlowUp { step: 0 });
        }
        let step = step.unwrap_or_else(|| default_step(grad_norm));
        if !(step >= 0.0 && step.is_finite()) {
            return Err(OperatorError::Structure(format!(
                "step size {step} is not a non-negative number"
            )));
        }
        Ok(Self {
            gamma,
            step,
            time: 0.0,
            history: vec![record],
            grad,
        })
    }

    pub fn gradient(&self) -> &MixedForm {
        &self.grad
    }

    pub fn last(&self) -> &FlowRecord {
        self.history.last().expect("history starts with the initial row")
    }
}

/// `γ ← project(γ − step · grad γ)`, then records the new state.
pub fn flow_step(state: &FlowState, spec: &OperatorSpec, sub: &SubdomainSpec) -> Result<FlowState, OperatorError> {
    let step_index = state.last().step + 1;
    let mut moved = state.gamma.clone();
    moved.axpy(-state.step, &state.grad)?;
    if !moved.is_finite() {
        return Err(OperatorError::BlowUp { step: step_index });
    }
    let blow_up = |e: OperatorError| match e {
        OperatorError::Forms(FormsError::NonFinite(_) | FormsError::Geometry(GeometryError::NonFinite { .. })) => {
            OperatorError::BlowUp { step: step_index }
        }
        other => other,
    };
    let gamma = project_subdomain(&moved, sub)?;
    let grad = gradient(spec, &gamma).map_err(blow_up)?;
    let record = FlowRecord {
        step: step_index,
        time: state.time + state.step,
        energy: functional(spec, &gamma).map_err(blow_up)?,
        grad_norm: sub.tangent(&grad).l2_norm(),
        p_residual: structure_residual(spec, &gamma).map_err(blow_up)?.l2_norm(),
    };
    if !(record.energy.is_finite() && record.grad_norm.is_finite() && record.p_residual.is_finite()) {
        return Err(OperatorError::BlowUp { step: step_index });
    }
    let mut history = state.history.clone();
    history.push(record);
    Ok(FlowState {
        gamma,
        step: state.step,
        time: record.time,
        history,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accomplex::{almost_complex_spec, alpha_spec, random_j, standard_j};
    use crate::bundle::FiberTensor;
    use crate::calculus::dense_adjoint;
    use crate::checks::{bilinear_example_spec, gradient_fd_error, random_mixed};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn torus(n: usize, res: usize) -> Arc<GridManifold> {
        Arc::new(GridManifold::cube(n, res).unwrap())
    }

    fn scalar_form(m: &Arc<GridManifold>, degree: usize, f: impl Fn(&[f64], u8) -> f64 + Sync) -> BVForm {
        BVForm::from_fn(m, &Arc::new(BundleSpec::scalar(m)), degree, |x, mask, _| f(x, mask))
    }

    #[test]
    fn almost_complex_degrees() {
        for n in [2, 4] {
            let spec = almost_complex_spec(&torus(n, 4)).unwrap();
            let [q1, q2, q3] = spec.q_degrees(1);
            assert_eq!((q1, q2), (QDegree::Unused, QDegree::Unused));
            assert_eq!(q3, QDegree::Degree(2));
            assert_eq!(spec.q_degrees(0)[2], QDegree::Annihilated);
            assert!(spec.is_valid(), "{}", spec.report());
        }
        let spec = almost_complex_spec(&torus(4, 4)).unwrap();
        // q₃(l) = 3l − 1
        assert_eq!(spec.q_degrees(2)[2], QDegree::Annihilated);
        assert_eq!(spec.trunc().degrees(), &[1, 3]);
    }

    #[test]
    fn fiberwise_right_action_clashes_at_zero() {
        let m = torus(4, 4);
        let t = Arc::new(BundleSpec::tangent(&m));
        let e2 = Arc::new(BundleSpec::trivial(&m, "E''", 1).unwrap());
        let psi = BilinearMap::new(t.clone(), e2.clone(), FiberTensor::dense(4, 4, 1, &[1.0; 16]).unwrap()).unwrap();
        let right = ActionSpec::fiberwise(e2, FiberTensor::dense(4, 1, 4, &[1.0; 16]).unwrap());
        let spec = OperatorSpec::builder(&m, &t, 1)
            .coefficients([0.0, 0.0, 1.0, -1.0])
            .psi(psi, right)
            .build()
            .unwrap();
        assert!(!spec.is_valid());
        // q₃(l) = 3l + 1 hits k = 1 at l = 0
        assert!(spec
            .report()
            .violations
            .contains(&Violation::DegreeClash { i: 3, l: 0 }));
        assert!(matches!(
            apply_p(&spec, &BVForm::zeros(&m, &t, 1)),
            Err(OperatorError::Invalid(_))
        ));
    }

    #[test]
    fn missing_map_is_structural() {
        let m = torus(2, 4);
        let t = Arc::new(BundleSpec::tangent(&m));
        let err = OperatorSpec::builder(&m, &t, 1)
            .coefficients([0.0, 0.0, 1.0, 0.0])
            .build();
        assert!(matches!(err, Err(OperatorError::Structure(_))));
    }

    #[test]
    fn alpha_constraints() {
        let m = torus(4, 4);
        let closed = scalar_form(&m, 1, |_, mask| if mask == 1 { 1.0 } else { 0.0 });
        assert!(alpha_spec(&m, closed).unwrap().is_valid());

        let open = scalar_form(&m, 1, |x, mask| if mask == 1 { x[1].sin() } else { 0.0 });
        let spec = alpha_spec(&m, open).unwrap();
        assert!(spec
            .report()
            .violations
            .iter()
            .any(|v| matches!(v, Violation::AlphaNotClosed { .. })));

        let zero = scalar_form(&m, 1, |_, _| 0.0);
        assert!(alpha_spec(&m, zero)
            .unwrap()
            .report()
            .violations
            .contains(&Violation::AlphaZero));

        let high = scalar_form(&m, 3, |_, _| 1.0);
        assert!(alpha_spec(&m, high)
            .unwrap()
            .report()
            .violations
            .contains(&Violation::AlphaDegree { p: 3 }));
    }

    #[test]
    fn alpha_degree_clash_detected() {
        // k = 2 with fiberwise actions: q₃(0) = 1 and p = 1 = k − q₃(0)
        let m = torus(4, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 1).unwrap());
        let base = bilinear_example_spec(&m, &e);
        let right = base.right().unwrap().clone();
        let alpha = scalar_form(&m, 1, |_, mask| if mask == 2 { 1.0 } else { 0.0 });
        let spec = OperatorSpec::builder(&m, &e, 2)
            .coefficients([0.0, 0.0, 1.0, 1.0])
            .psi(right.map, right.action)
            .alpha(alpha)
            .build()
            .unwrap();
        assert!(spec
            .report()
            .violations
            .contains(&Violation::AlphaDegreeClash { i: 3, l: 0 }));
    }

    #[test]
    fn standard_structure_is_a_zero() {
        let m = torus(4, 6);
        let spec = almost_complex_spec(&m).unwrap();
        let j0 = standard_j(&m).unwrap();
        assert_eq!(apply_p(&spec, j0.form()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn alpha_variant_is_alpha_wedge() {
        let m = torus(4, 4);
        let alpha = scalar_form(&m, 1, |_, mask| match mask {
            1 => 1.0,
            4 => -0.5,
            _ => 0.0,
        });
        let spec = alpha_spec(&m, alpha.clone()).unwrap();
        let j = random_j(&m, 3, 0.3).unwrap();
        let lhs = apply_p_alpha(&spec, j.form()).unwrap();
        let rhs = apply_p(&spec.without_alpha(), j.form()).unwrap();
        for part in rhs.parts() {
            let expected = wedge_scalar(&alpha, part).unwrap();
            let got = lhs.project(expected.degree()).unwrap();
            assert_eq!(got.coefficients(), expected.coefficients());
        }
    }

    #[test]
    fn term_adjoints_match_dense_oracle() {
        let m = torus(2, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let spec = bilinear_example_spec(&m, &e);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g0 = BVForm::random(&m, &e, 0, &mut rng);
        for kind in TermKind::ALL {
            let map = TermMap::new(&spec, &g0, kind, 1).unwrap();
            let dense = dense_adjoint(&map).unwrap();
            let y = BVForm::random(&m, &e, 1, &mut rng);
            let a = map.adjoint(&y);
            let b = dense.apply(&y);
            let err = a.sub(&b).unwrap().max_abs() / b.max_abs().max(1.0);
            assert!(err < 1e-10, "{kind:?}: {err:e}");
        }
    }

    #[test]
    fn insertion_term_adjoints_match_dense_oracle() {
        let m = torus(2, 4);
        let spec = almost_complex_spec(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g1 = BVForm::random(&m, spec.bundle(), 1, &mut rng);
        for kind in [TermKind::L3, TermKind::L3Prime] {
            let map = TermMap::new(&spec, &g1, kind, 2).unwrap();
            let dense = dense_adjoint(&map).unwrap();
            let y = BVForm::random(&m, spec.bundle(), 2, &mut rng);
            let err = map.adjoint(&y).sub(&dense.apply(&y)).unwrap().max_abs();
            assert!(err < 1e-10, "{kind:?}: {err:e}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = torus(4, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let general = bilinear_example_spec(&m, &e);
        let ac = almost_complex_spec(&torus(2, 8)).unwrap();
        for spec in [&general, &ac] {
            let g = random_mixed(spec, &mut rng, 0.5);
            let b = random_mixed(spec, &mut rng, 1.0);
            let err = gradient_fd_error(spec, &g, &b);
            assert!(err < 1e-6, "{err:e}");
        }
    }

    #[test]
    fn alpha_a4_term_order() {
        // P = d, k = 2, p = 1 on T⁴: the paper's order δ[k]γ₂ vanishes, the
        // derivative of the functional does not
        let m = torus(4, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 1).unwrap());
        let alpha = scalar_form(&m, 1, |_, mask| if mask == 1 { 1.0 } else { 0.0 });
        let spec = OperatorSpec::builder(&m, &e, 2)
            .coefficients([0.0, 0.0, 0.0, 1.0])
            .alpha(alpha.clone())
            .build()
            .unwrap();
        assert!(spec.is_valid(), "{}", spec.report());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g2 = BVForm::random(&m, &e, 2, &mut rng);
        let paper = delta_truncated(&g2, spec.trunc()).unwrap();
        assert_eq!(paper.max_abs(), 0.0);
        let pulled = AlphaWedge {
            alpha: &alpha,
            space: FormSpace::new(&m, &e, 1),
        }
        .adjoint(&g2);
        let actual = delta_truncated(&pulled, spec.trunc()).unwrap();
        assert!(actual.l2_norm() > 1e-3);
        let gamma = random_mixed(&spec, &mut rng, 1.0);
        let beta = random_mixed(&spec, &mut rng, 1.0);
        assert!(gradient_fd_error(&spec, &gamma, &beta) < 1e-9);
    }

    #[test]
    fn subdomain_rejects_structure_degree() {
        let spec = almost_complex_spec(&torus(2, 4)).unwrap();
        let mut sub = SubdomainSpec::relaxed(&spec).unwrap();
        assert_eq!(sub.zero_degrees.iter().copied().collect::<Vec<_>>(), vec![2]);
        sub.zero_degrees.insert(1);
        assert!(matches!(
            sub.checked(),
            Err(OperatorError::ConstrainsStructureDegree(1))
        ));
    }

    #[test]
    fn projection_enforces_constraints() {
        let m = torus(4, 6);
        let spec = almost_complex_spec(&m).unwrap();
        let sub = SubdomainSpec::with_coclosed(&spec)
            .unwrap()
            .with_membership(Membership::AlmostComplex);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut gamma = random_mixed(&spec, &mut rng, 0.1);
        gamma.set_part(random_j(&m, 1, 0.3).unwrap().form().clone()).unwrap();
        gamma
            .part_mut(1)
            .unwrap()
            .axpy(0.02, &BVForm::random(&m, spec.bundle(), 1, &mut rng))
            .unwrap();
        let out = project_subdomain(&gamma, &sub).unwrap();
        assert!(out.part(2).is_none());
        let before = delta(gamma.part(3).unwrap()).unwrap().l2_norm();
        let after = delta(out.part(3).unwrap()).unwrap().l2_norm();
        assert!(after < 1e-9 * before, "{after:e} vs {before:e}");
        let j = out.part(1).unwrap();
        let n = 4;
        for block in j.coefficients().chunks(n * n) {
            let x = matrix_of(block, n);
            assert!((&x * &x + DMatrix::identity(n, n)).amax() < 1e-12);
        }
        // idempotent
        let again = project_subdomain(&out, &sub).unwrap();
        assert!(again.sub(&out).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn retraction_fails_on_real_eigenvalues() {
        let m = torus(2, 4);
        let t = Arc::new(BundleSpec::tangent(&m));
        let id = BVForm::from_fn(&m, &t, 1, |_, mask, a| if mask == 1 << a { 1.0 } else { 0.0 });
        assert!(matches!(retract_almost_complex(&id), Err(OperatorError::Retraction(0))));
    }

    #[test]
    fn zero_step_keeps_state() {
        let m = torus(2, 8);
        let spec = almost_complex_spec(&m).unwrap();
        let sub = SubdomainSpec::unconstrained(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gamma = random_mixed(&spec, &mut rng, 0.5);
        let state = FlowState::start(&spec, &sub, gamma, Some(0.0)).unwrap();
        let next = flow_step(&state, &spec, &sub).unwrap();
        assert_eq!(next.gamma, state.gamma);
        assert_eq!(next.history.len(), 2);
        assert_eq!(next.history[1].energy, next.history[0].energy);
    }

    #[test]
    fn large_steps_blow_up() {
        let m = torus(2, 4);
        let e = Arc::new(BundleSpec::trivial(&m, "E", 2).unwrap());
        let spec = bilinear_example_spec(&m, &e);
        let sub = SubdomainSpec::unconstrained(0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut state = FlowState::start(&spec, &sub, random_mixed(&spec, &mut rng, 1.0), Some(1e3)).unwrap();
        let mut outcome = None;
        for _ in 0..100 {
            match flow_step(&state, &spec, &sub) {
                Ok(next) => state = next,
                Err(e) => {
                    outcome = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(outcome, Some(OperatorError::BlowUp { .. })), "{outcome:?}");
    }

    #[test]
    fn default_step_scales_with_gradient() {
        assert_eq!(default_step(0.0), 1e-3);
        assert_eq!(default_step(0.5), 1e-3);
        assert_eq!(default_step(100.0), 1e-5);
    }
}
