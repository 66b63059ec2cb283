//! Stratified random sampling (SRS) and stratified random sampling with
//! quotas (SRSQ) for recruiting sites into randomized trials.
//!
//! The crate is organised bottom-up:
//!
//! - [`population`]: finite school populations, CSV ingestion,
//!   standardization, per-group partitioning and a synthetic generator.
//! - [`design`]: strata, proportional targets, quota bins and caps, and the
//!   six assignments of variables to roles.
//! - [`recruitment`]: recruitment ordering and the paired SRS/SRSQ walk.
//! - [`metrics`]: bias, variance, MSE and stage-count summaries.
//! - [`experiment`]: config-driven orchestration and output artifacts.

pub mod design;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod population;
pub mod recruitment;

pub use design::{
    build_design, enumerate_role_permutations, proportional_targets, quantile_bins, BinRule,
    DesignParams, Role, RoleAssignment, SamplingDesign,
};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ExperimentResults};
pub use metrics::{
    average_over_permutations, compare, stability_check, summarize, ComparisonReport, DiffReport,
    MethodSummary,
};
pub use population::{
    generate_synthetic, load_population, partition_by_group, standardize, Marginal,
    PopulationFrame, SchoolRecord, SyntheticSpec, Variable,
};
pub use recruitment::{
    recruitment_order, run_replication, run_srs, run_srsq, Method, OrderedRoster,
    ReplicationOutcome, StageCounts,
};
