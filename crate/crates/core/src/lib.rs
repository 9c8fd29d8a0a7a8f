//! Bundle-valued differential forms on flat tori.

pub mod accomplex;
pub mod bundle;
pub mod calculus;
pub mod checks;
pub mod forms;
pub mod geometry;
pub mod multiindex;
pub mod operator;
mod products;

pub use accomplex::{
    almost_complex_spec, alpha_residual, alpha_spec, integrability_residual, nijenhuis, random_j, standard_j,
    ACStructure, AcError,
};
pub use bundle::{
    ActionKind, ActionSpec, BilinearMap, BundleError, BundleSpec, Connection, FiberTensor, PointField, Side,
};
pub use calculus::{
    d_nabla, d_truncated, delta, delta_truncated, CalculusError, FormSpace, LinearFormMap, TruncationList,
};
pub use forms::{act, l2_inner, wedge_bilinear, wedge_scalar, BVForm, FormsError, MixedForm};
pub use geometry::{GeometryError, GridManifold, ManifoldDescriptor};
pub use operator::{
    apply_p, apply_p_alpha, bold_p, flow_step, functional, gradient, project_subdomain, q_degrees, validate,
    FlowRecord, FlowState, Membership, OperatorError, OperatorSpec, QDegree, SubdomainSpec, ValidationReport,
    Violation,
};
