//! Quantum double models on 2D lattices, simulated in the doubled Hilbert
//! space.
//!
//! A density operator ρ on the spin lattice is held as a pure vector
//! |ρ⟩ ∝ Σ ρ_ij |i⟩|j⟩ with a ket and a bra layer; channels acting on ρ
//! become ordinary linear maps on |ρ⟩. The crate builds ground states of
//! the model by a finite-depth sequence of local averaging channels,
//! certifies them with commuting projector families, and moves anyons with
//! string operators to reproduce braiding statistics — including the
//! non-abelian flux commutators that distinguish e.g. the S3 model from any
//! abelian theory.
//!
//! Numeric work is generic over the floating-point scalar via [`Scalar`];
//! the `*64` aliases fix `f64` for everyday use.

pub mod dense;
pub mod experiments;
pub mod group;
pub mod lattice;
pub mod ops;
pub mod scalar;
pub mod state;
pub mod strings;

pub use experiments::{
    abelian_braiding, commutator_census, default_abelian_geometry, default_deformed_loop,
    default_elongation_setup, default_nonabelian_setup, default_restricted_ops, elongation_check,
    experiment_info, nonabelian_braiding, prepare_verify, purification_report, restricted_demo,
    un_check, AbelianGeometry, BraidSetup, CommutatorCensus, DemoOp, ElongationSetup,
    ExperimentError, ExperimentInfo, ExperimentReport, Quantity, Tolerances, EXPERIMENTS,
};
pub use group::{FiniteGroup, GroupElement, GroupError};
pub use lattice::{CheckedString, Lattice, LatticeError, Sign, StringSpec, Tooth, ToothSide};
pub use scalar::{Amplitude, Scalar};
pub use ops::{
    ancilla_detect, apply_channel_ev, apply_map_doubled, apply_map_layer, apply_projector,
    build_abelian_ops, expectation_in_rho, flux_of, gauge_apply, gauge_apply_diag,
    prepare_ground_state, projector_expectation_pure, purification_check, AbelianOps, ConfigMap,
    FluxProbe, LinearOp, OpsError, ProjectorSpec,
};
pub use state::{ConfigPacker, Context, Layer, SparseState, StateError};
pub use strings::{
    apply_comb_doubled, closed_loop_action_defect, comb_commutation_defect,
    elongation_identity_defect, pin_side_convention, un_closed_form, un_recursion_defect,
    un_recursive, CombOperator, CommutationProbe, ElongationOperator, SideConvention, StringError,
};

/// Complex amplitude over `f64`.
pub type Complex64 = num_complex::Complex<f64>;
/// Complex amplitude over `f32`.
pub type Complex32 = num_complex::Complex<f32>;
/// Sparse doubled-space state over `f64`.
pub type SparseState64 = state::SparseState<f64>;
/// Sparse doubled-space state over `f32`.
pub type SparseState32 = state::SparseState<f32>;
