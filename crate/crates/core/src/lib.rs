#![doc = include_str!("../README.md")]

pub mod error;
pub mod gating;
pub mod heart;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod poisson;
pub mod rng;
pub mod sem;
pub mod simulation;
pub mod study;
pub mod table;
pub mod tuning;

pub use error::{FmpreError, Result};
pub use model::{
    complete_loglik, observed_loglik, AssignmentRule, Coefficients, CoefficientsRecord, Dataset,
    EstimateSelection, FitResult, Method, PartitionState, SemOptions, TuningParams,
};
pub use poisson::{LtSign, PenaltyKind, SolverSettings};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/sem.md")]
    mod sem {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/studies.md")]
    mod studies {}
    #[doc = include_str!("../../../book/src/heart.md")]
    mod heart {}
}
