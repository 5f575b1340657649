//! # sinkdiv
//!
//! Entropic optimal transport between weighted point clouds, with the
//! debiased Sinkhorn divergence, the Hausdorff divergence and kernel MMD
//! losses, their analytic gradients, and a particle gradient-flow simulator.
//!
//! | Loss | Definition |
//! |------|------------|
//! | [`divergence::ot_eps`] | OT_ε(α,β) = min ⟨π,C⟩ + ε KL(π ‖ α⊗β) |
//! | [`divergence::sinkhorn_divergence`] | S_ε = OT_ε(α,β) − ½OT_ε(α,α) − ½OT_ε(β,β) |
//! | [`divergence::hausdorff_divergence`] | H_ε = ½⟨α−β, ∇F_ε(α) − ∇F_ε(β)⟩, F_ε = −½OT_ε(·,·) |
//! | [`divergence::mmd`] | L_k = ½⟨α−β, k ⋆ (α−β)⟩ |
//!
//! The regularized cost is sometimes written W_ε; it is the same quantity as
//! OT_ε here.
//!
//! All pairwise reductions go through [`reduce`], which never materializes a
//! cost matrix in streaming mode: memory stays linear in the number of atoms.
//!
//! ```
//! use sinkdiv::{CostSpec, DiscreteMeasure, SolverParams};
//! use sinkdiv::divergence::sinkhorn_divergence;
//!
//! let a = DiscreteMeasure::from_arrays(&[1.0], &[vec![0.0]]).unwrap();
//! let b = DiscreteMeasure::from_arrays(&[1.0], &[vec![1.0]]).unwrap();
//! let params = SolverParams::new(CostSpec::new(1.0, 0.1).unwrap());
//! let s = sinkhorn_divergence(&a, &b, &params).unwrap();
//! assert!((s.value - 1.0).abs() < 1e-12);
//! ```

pub mod alloc;
pub mod cli;
pub mod cost;
pub mod divergence;
pub mod error;
pub mod flow;
pub mod measure;
pub mod oracles;
pub mod reduce;
pub mod solver;

pub use cost::{CostSpec, MmdKernel, MmdKernelSpec};
pub use divergence::{Loss, LossGradient, LossValue};
pub use error::{Error, Result};
pub use measure::DiscreteMeasure;
pub use reduce::{EngineConfig, ReductionMode, ReductionPlan};
pub use solver::{DualState, SolverParams, SymmetricDual};
