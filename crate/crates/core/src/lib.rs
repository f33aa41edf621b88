//! Multiple operator-valued kernel learning for regression with functional
//! responses.
//!
//! Curves live on discretized `L²` grids ([`funcspace`]). Operator-valued
//! kernels of the separable form `K(w, z) = Σ_k d_k G_k(w, z) T_k` are built
//! from scalar kernels and structured output operators ([`kernels`]). The
//! block ridge system `(𝐊 + λI)α = y` is solved densely, by Kronecker
//! eigendecomposition, by a diagonal-plus-low-rank factorization, or by block
//! Gauss-Seidel with variable splitting ([`linsolve`]); [`learn`] alternates that solve with the closed-form
//! `ℓr` weight update. [`eval`] carries metrics and leave-one-curve-out
//! cross-validation and [`synth`] generates latency-shifted benchmark data.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod funcspace;
pub mod kernels;
pub mod learn;
pub mod linsolve;
pub mod synth;

mod math;

pub use nalgebra;

pub use error::{Error, Result};
pub use eval::{lcr, loo_cv, rsse, CvOutcome, CvRow, CvSpec, LooProblem};
pub use funcspace::{l2_inner, l2_norm_sq, vec_inner, Curve, CurveVec, Grid};
pub use kernels::{
    assemble_gram, gram_apply, op_apply, op_shifted_solve, op_spectrum, scalar_eval, BlockGram,
    KernelStack, OperatorKind, OutputOperator, OvKernelTerm, ScalarKernel, Spectrum, TermSpec,
};
pub use learn::{
    fk_norm_sq, krr_fit, movkl_fit, predict, predict_many, weight_update, FitConfig, MovklModel,
    SolverChoice,
};
pub use linsolve::{
    dense_solve, gauss_seidel_solve, kron_solve, split_block_solve, woodbury_solve, SolveConfig,
    SolveReport, SolverKind,
};
pub use synth::{generate_synthetic, ChannelFilter, CurveDataset, SynthSpec};
