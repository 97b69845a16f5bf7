//! Numerical lab for gradient descent on one-layer softmax attention trained
//! for in-context linear regression over orthonormal feature tokens.
//!
//! The crate is organized bottom-up:
//!
//! - [`features`]: bases, token distributions, count vectors, events
//! - [`attention`]: the forward pass and bilinear weights `A_k`, `B_{k,n}`
//! - [`gradient`]: population gradients (exact, truncated, Monte Carlo)
//! - [`trainer`]: gradient descent from zero initialization
//! - [`analysis`]: loss bounds, phase detection, concentration, unseen tasks
//! - [`harness`]: config files and the `simulate`/`verify`/`sweep`/`report` commands

pub mod analysis;
pub mod attention;
pub mod error;
pub mod features;
pub mod gradient;
pub mod harness;
pub mod report;
pub mod trainer;

pub use analysis::{
    attention_concentration, detect_phases_balanced, detect_phases_imbalanced, icl_test,
    loss_report, LossReport, PhaseReport, PhaseThresholds,
};
pub use attention::{attention_profile, embed, forward, lift, reduce, ReducedWeights};
pub use error::{Error, Result};
pub use features::{
    BasisMode, FeatureBasis, Prompt, PromptCounts, Regime, TokenDistribution,
};
pub use gradient::{Estimator, EstimatorKind, Evaluator, GradientReport};
pub use trainer::{dual_mode_run, gd_run, gd_step, TrainConfig, TrainMode, TrajectoryRecord};
