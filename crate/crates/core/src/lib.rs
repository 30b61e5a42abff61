//! Potential weights, implicit designs and implicit estimands of linear
//! regressions, with the closed forms, diagnostics and IPW remedies built on
//! top of them.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats and the command-line driver live in the `idw`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod catalog;
pub mod diagnostics;
pub mod error;
pub mod estimand;
pub mod estimators;
pub mod gram;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod solver;
pub mod weights;

pub use catalog::{CatalogMode, CatalogResult, EstimandForm};
pub use diagnostics::{outcome_by_design_profile, run_design_checklist, ChecklistOptions, DiagnosticsReport};
pub use error::{Error, Result};
pub use estimand::{contamination_decomposition, implicit_estimand, twfe_weights, ImplicitEstimand};
pub use estimators::{ipw_estimate, patch_design, patched_estimate, trimmed_ate, PatchPolicy, PatchedDesign};
pub use gram::{fwl_residualize, population_gram, reparametrize, sample_gram, GramMatrix, GramSource};
pub use model::{
    build_template, validate_population, Design, DesignKind, Population, PotentialOutcomeTable, RegressionSpec,
    TemplateOptions, TreatmentSet, ValidationReport,
};
pub use oracle::{consistency_harness, evaluate_estimand, level_irrelevance_test, simulate_assignment, JointDesign};
pub use solver::{
    binary_closed_form, check_candidate_design, solve_implicit_design, ImplicitDesignReport, SolverTolerances,
    UnitSolveStatus, UnitStatus, Verdict,
};
pub use weights::{estimator_weights, identification_strength, potential_weights, PotentialWeightSet, WeightMode};
