//! Run configuration: JSON on disk or one of the builtin names.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use compound_forms::accomplex::{almost_complex_spec_on, standard_j, CorpusEntry};
use compound_forms::bundle::{polyvector_bundle, polyvector_wedge};
use compound_forms::checks::random_mixed;
use compound_forms::multiindex::Basis;
use compound_forms::operator::default_truncation;
use compound_forms::{
    random_j, ActionSpec, BVForm, BilinearMap, BundleSpec, Connection, FiberTensor, GridManifold, ManifoldDescriptor,
    Membership, MixedForm, OperatorSpec, PointField, SubdomainSpec, TruncationList,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const BUILTIN_NAMES: [&str; 3] = ["almost-complex-T2", "almost-complex-T4", "alpha-T4"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifold: ManifoldDescriptor,
    #[serde(default)]
    pub bundle: BundleDescriptor,
    pub operator: OperatorDescriptor,
    #[serde(default)]
    pub initial: InitialData,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BundleDescriptor {
    Named(NamedBundle),
    Explicit(ExplicitBundle),
}

impl Default for BundleDescriptor {
    fn default() -> Self {
        Self::Named(NamedBundle::Tangent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedBundle {
    Tangent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitBundle {
    pub rank: usize,
    /// Row-major `rank × rank`; identity when absent.
    #[serde(default)]
    pub fiber_metric: Option<Vec<f64>>,
    #[serde(default)]
    pub connection: ConnectionDescriptor,
    #[serde(default)]
    pub grading: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConnectionDescriptor {
    Flat(FlatTag),
    /// `Γ[i][a][b]` row-major, either once (constant) or once per grid point.
    Coefficients(Vec<f64>),
}

impl Default for ConnectionDescriptor {
    fn default() -> Self {
        Self::Flat(FlatTag::Flat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatTag {
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OperatorDescriptor {
    Named(NamedOperator),
    Explicit(Box<ExplicitOperator>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedOperator {
    /// `a = (0,0,1,−1)`, `k = 1`, polyvector wedge with insertion.
    AlmostComplex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitOperator {
    pub a: [f64; 4],
    pub k: usize,
    #[serde(default)]
    pub trunc: Option<Vec<usize>>,
    #[serde(default)]
    pub phi: Option<MapDescriptor>,
    #[serde(default)]
    pub psi: Option<MapDescriptor>,
    #[serde(default)]
    pub left_action: Option<ActionDescriptor>,
    #[serde(default)]
    pub right_action: Option<ActionDescriptor>,
    #[serde(default)]
    pub alpha: Option<AlphaDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapDescriptor {
    Named(NamedMap),
    /// `E × E → F` with `F` trivial of rank `target_rank`; values indexed
    /// `[(u·m + v)·target_rank + w]`.
    Dense {
        target_rank: usize,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedMap {
    PolyvectorWedge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionDescriptor {
    Named(NamedAction),
    /// Fiberwise tensor; shape `(F, E, E)` on the left, `(E, F, E)` on the right.
    Fiberwise {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedAction {
    Insertion,
}

/// Constant scalar `p`-form, components in lexicographic multi-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaDescriptor {
    pub degree: usize,
    pub constant: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialData {
    /// `J₀` in degree `k`, nothing elsewhere.
    #[default]
    StandardJ,
    RandomJ {
        amplitude: f64,
    },
    /// `J₀` plus seeded noise of size `noise` in every degree.
    PerturbedJ {
        noise: f64,
    },
    Random {
        scale: f64,
    },
    /// JSON array of form records, one per degree.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Overrides the gradient check tolerance.
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub subdomain: SubdomainDescriptor,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Seeds per dimension in the oracle suite.
    #[serde(default = "default_oracle_seeds")]
    pub oracle_seeds: u64,
    #[serde(default = "default_amplitude")]
    pub oracle_amplitude: f64,
    #[serde(default)]
    pub corpus: Vec<CorpusEntry>,
}

fn default_steps() -> usize {
    100
}

fn default_samples() -> usize {
    20
}

fn default_oracle_seeds() -> u64 {
    20
}

fn default_amplitude() -> f64 {
    0.3
}

impl Default for Params {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            step_size: None,
            tolerance: None,
            samples: default_samples(),
            subdomain: SubdomainDescriptor::default(),
            out: None,
            oracle_seeds: default_oracle_seeds(),
            oracle_amplitude: default_amplitude(),
            corpus: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubdomainDescriptor {
    #[serde(default)]
    pub kind: SubdomainKind,
    /// Explicit zeroed degrees; replaces the ones implied by `kind`.
    #[serde(default)]
    pub zero_degrees: Option<Vec<usize>>,
    #[serde(default)]
    pub membership: Option<MembershipName>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubdomainKind {
    #[default]
    Unconstrained,
    Relaxed,
    Coclosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MembershipName {
    AlmostComplex,
}

fn torus(dim: usize, n: usize) -> ManifoldDescriptor {
    ManifoldDescriptor {
        dim,
        resolution: vec![n; dim],
        side_lengths: None,
        metric: None,
    }
}

impl RunConfig {
    pub fn builtin(name: &str) -> Option<Self> {
        let almost_complex = OperatorDescriptor::Named(NamedOperator::AlmostComplex);
        let cfg = match name {
            "almost-complex-T2" => Self {
                manifold: torus(2, 8),
                bundle: BundleDescriptor::default(),
                operator: almost_complex,
                initial: InitialData::PerturbedJ { noise: 0.1 },
                params: Params {
                    steps: 50,
                    step_size: Some(1e-4),
                    ..Params::default()
                },
                seed: 7,
            },
            "almost-complex-T4" => Self {
                manifold: torus(4, 8),
                bundle: BundleDescriptor::default(),
                operator: almost_complex,
                initial: InitialData::RandomJ { amplitude: 0.3 },
                params: Params {
                    steps: 20,
                    subdomain: SubdomainDescriptor {
                        kind: SubdomainKind::Unconstrained,
                        zero_degrees: None,
                        membership: Some(MembershipName::AlmostComplex),
                    },
                    samples: 5,
                    oracle_seeds: 5,
                    ..Params::default()
                },
                seed: 7,
            },
            "alpha-T4" => Self {
                manifold: torus(4, 8),
                bundle: BundleDescriptor::default(),
                operator: OperatorDescriptor::Explicit(Box::new(ExplicitOperator {
                    a: [0.0, 0.0, 1.0, -1.0],
                    k: 1,
                    trunc: None,
                    phi: None,
                    psi: Some(MapDescriptor::Named(NamedMap::PolyvectorWedge)),
                    left_action: None,
                    right_action: Some(ActionDescriptor::Named(NamedAction::Insertion)),
                    alpha: Some(AlphaDescriptor {
                        degree: 1,
                        constant: vec![1.0, 0.0, 0.0, 0.0],
                    }),
                })),
                initial: InitialData::RandomJ { amplitude: 0.3 },
                params: Params {
                    steps: 20,
                    samples: 5,
                    oracle_seeds: 5,
                    ..Params::default()
                },
                seed: 7,
            },
            _ => return None,
        };
        Some(cfg)
    }

    /// A builtin name or a path to a JSON file.
    pub fn load(source: &str) -> Result<Self, CliError> {
        if let Some(cfg) = Self::builtin(source) {
            return Ok(cfg);
        }
        let text = std::fs::read_to_string(source).map_err(|e| CliError::Config(format!("{source}: {e}")))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{source}: {msg}")),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// Manifold, bundle and operator; structural errors only, constraint
    /// violations stay in the spec's report.
    pub fn build(&self) -> Result<Setup, CliError> {
        let manifold = Arc::new(GridManifold::from_descriptor(&self.manifold).map_err(config)?);
        let bundle = Arc::new(build_bundle(&manifold, &self.bundle)?);
        let (spec, almost_complex) = match &self.operator {
            OperatorDescriptor::Named(NamedOperator::AlmostComplex) => {
                (almost_complex_spec_on(&manifold, &bundle).map_err(config)?, true)
            }
            OperatorDescriptor::Explicit(op) => {
                let spec = build_operator(&manifold, &bundle, op)?;
                let ac = op.a == [0.0, 0.0, 1.0, -1.0]
                    && op.k == 1
                    && op.phi.is_none()
                    && op.psi == Some(MapDescriptor::Named(NamedMap::PolyvectorWedge))
                    && op.right_action == Some(ActionDescriptor::Named(NamedAction::Insertion));
                (spec, ac)
            }
        };
        Ok(Setup {
            manifold,
            bundle,
            spec,
            almost_complex,
        })
    }
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn build_bundle(m: &Arc<GridManifold>, desc: &BundleDescriptor) -> Result<BundleSpec, CliError> {
    let explicit = match desc {
        BundleDescriptor::Named(NamedBundle::Tangent) => return Ok(BundleSpec::tangent(m)),
        BundleDescriptor::Explicit(e) => e,
    };
    let r = explicit.rank;
    let metric = match &explicit.fiber_metric {
        Some(h) => h.clone(),
        None => (0..r * r).map(|i| if i % (r + 1) == 0 { 1.0 } else { 0.0 }).collect(),
    };
    let connection = match &explicit.connection {
        ConnectionDescriptor::Flat(_) => Connection::Flat,
        ConnectionDescriptor::Coefficients(values) => {
            let stride = m.dim() * r * r;
            if values.len() == stride {
                Connection::Coefficients(PointField::Constant(values.clone()))
            } else {
                Connection::Coefficients(PointField::PerPoint {
                    values: values.clone(),
                    stride,
                })
            }
        }
    };
    BundleSpec::new(
        m,
        "E",
        r,
        PointField::Constant(metric),
        connection,
        explicit.grading.clone(),
    )
    .map_err(config)
}

fn build_map(
    m: &Arc<GridManifold>,
    bundle: &Arc<BundleSpec>,
    desc: &MapDescriptor,
    target_id: &str,
) -> Result<BilinearMap, CliError> {
    match desc {
        MapDescriptor::Named(NamedMap::PolyvectorWedge) => {
            polyvector_wedge(bundle.clone(), Arc::new(polyvector_bundle(m))).map_err(config)
        }
        MapDescriptor::Dense { target_rank, values } => {
            let r = bundle.rank();
            let target = Arc::new(BundleSpec::trivial(m, target_id, *target_rank).map_err(config)?);
            let tensor = FiberTensor::dense(r, r, *target_rank, values).map_err(config)?;
            BilinearMap::new(bundle.clone(), target, tensor).map_err(config)
        }
    }
}

fn build_action(
    map: &BilinearMap,
    bundle: &BundleSpec,
    desc: &ActionDescriptor,
    left: bool,
) -> Result<ActionSpec, CliError> {
    let acting = map.target().clone();
    match desc {
        ActionDescriptor::Named(NamedAction::Insertion) => Ok(ActionSpec::insertion(acting)),
        ActionDescriptor::Fiberwise { values } => {
            let (r, f) = (bundle.rank(), acting.rank());
            let tensor = if left {
                FiberTensor::dense(f, r, r, values)
            } else {
                FiberTensor::dense(r, f, r, values)
            }
            .map_err(config)?;
            Ok(ActionSpec::fiberwise(acting, tensor))
        }
    }
}

fn build_operator(
    m: &Arc<GridManifold>,
    bundle: &Arc<BundleSpec>,
    op: &ExplicitOperator,
) -> Result<OperatorSpec, CliError> {
    let mut builder = OperatorSpec::builder(m, bundle, op.k).coefficients(op.a);
    let alpha = op.alpha.as_ref().map(|a| constant_scalar_form(m, a)).transpose()?;
    let trunc = match &op.trunc {
        Some(t) => TruncationList::new(t.clone()).map_err(config)?,
        None => default_truncation(op.k, alpha.as_ref().map(BVForm::degree), m.dim()),
    };
    builder = builder.trunc(trunc);
    match (&op.phi, &op.left_action) {
        (Some(phi), Some(action)) => {
            let map = build_map(m, bundle, phi, "E'")?;
            let action = build_action(&map, bundle, action, true)?;
            builder = builder.phi(map, action);
        }
        (None, None) => {}
        _ => return Err(CliError::Config("phi and left_action must be given together".into())),
    }
    match (&op.psi, &op.right_action) {
        (Some(psi), Some(action)) => {
            let map = build_map(m, bundle, psi, "E''")?;
            let action = build_action(&map, bundle, action, false)?;
            builder = builder.psi(map, action);
        }
        (None, None) => {}
        _ => return Err(CliError::Config("psi and right_action must be given together".into())),
    }
    if let Some(alpha) = alpha {
        builder = builder.alpha(alpha);
    }
    builder.build().map_err(config)
}

fn constant_scalar_form(m: &Arc<GridManifold>, desc: &AlphaDescriptor) -> Result<BVForm, CliError> {
    let n = m.dim();
    if desc.degree > n {
        return Err(CliError::Config(format!(
            "alpha degree {} exceeds dimension {n}",
            desc.degree
        )));
    }
    let masks = Basis::get(n).masks(desc.degree).to_vec();
    if desc.constant.len() != masks.len() {
        return Err(CliError::Config(format!(
            "alpha of degree {} needs {} components, got {}",
            desc.degree,
            masks.len(),
            desc.constant.len()
        )));
    }
    let values = desc.constant.clone();
    let scalar = Arc::new(BundleSpec::scalar(m));
    Ok(BVForm::from_fn(m, &scalar, desc.degree, move |_, mask, _| {
        masks.iter().position(|&b| b == mask).map_or(0.0, |i| values[i])
    }))
}

/// Everything a command needs, resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub manifold: Arc<GridManifold>,
    pub bundle: Arc<BundleSpec>,
    pub spec: OperatorSpec,
    /// The operator is the almost-complex example, so Nijenhuis oracles apply.
    pub almost_complex: bool,
}

impl Setup {
    pub fn initial(&self, data: &InitialData, seed: u64) -> Result<MixedForm, CliError> {
        let (m, e, k) = (&self.manifold, &self.bundle, self.spec.k());
        let needs_ac = |what: &str| {
            if self.almost_complex {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "initial data `{what}` needs the almost-complex operator"
                )))
            }
        };
        match data {
            InitialData::StandardJ => {
                needs_ac("standard-j")?;
                Ok(MixedForm::from_form(standard_j(m).map_err(config)?.into_form()))
            }
            InitialData::RandomJ { amplitude } => {
                needs_ac("random-j")?;
                Ok(MixedForm::from_form(
                    random_j(m, seed, *amplitude).map_err(config)?.into_form(),
                ))
            }
            InitialData::PerturbedJ { noise } => {
                needs_ac("perturbed-j")?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut gamma = MixedForm::from_form(standard_j(m).map_err(config)?.into_form());
                gamma
                    .axpy(1.0, &random_mixed(&self.spec, &mut rng, *noise))
                    .map_err(config)?;
                Ok(gamma)
            }
            InitialData::Random { scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(random_mixed(&self.spec, &mut rng, *scale))
            }
            InitialData::File { path } => read_forms(m, e, path, k),
        }
    }

    pub fn subdomain(&self, desc: &SubdomainDescriptor) -> Result<SubdomainSpec, CliError> {
        let spec = &self.spec;
        let mut sub = match desc.kind {
            SubdomainKind::Unconstrained => SubdomainSpec::unconstrained(spec.k()),
            SubdomainKind::Relaxed => SubdomainSpec::relaxed(spec).map_err(config)?,
            SubdomainKind::Coclosed => SubdomainSpec::with_coclosed(spec).map_err(config)?,
        };
        if let Some(z) = &desc.zero_degrees {
            sub.zero_degrees = z.iter().copied().collect();
        }
        if desc.membership == Some(MembershipName::AlmostComplex) {
            if !self.almost_complex {
                return Err(CliError::Config(
                    "almost-complex membership needs the almost-complex operator".into(),
                ));
            }
            sub = sub.with_membership(Membership::AlmostComplex);
        }
        sub.checked().map_err(config)
    }

    /// Degrees an explicit zero list must contain for the relaxed functional.
    pub fn required_zero_degrees(&self) -> BTreeSet<usize> {
        SubdomainSpec::relaxed(&self.spec)
            .map(|s| s.zero_degrees)
            .unwrap_or_default()
    }
}

fn read_forms(m: &Arc<GridManifold>, e: &Arc<BundleSpec>, path: &Path, k: usize) -> Result<MixedForm, CliError> {
    let text = std::fs::read_to_string(path).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
    let records: Vec<compound_forms::forms::FormRecord> =
        serde_json::from_str(&text).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
    let mut out = MixedForm::new(m, e);
    for r in records {
        out.add_part(BVForm::from_record(m, e, r).map_err(config)?)
            .map_err(config)?;
    }
    if out.part(k).is_none() {
        return Err(CliError::Config(format!(
            "{}: no form of the structure degree {k}",
            path.display()
        )));
    }
    Ok(out)
}
