//! Dialog flows compiled into a learned, masked recurrent dialog policy.
//!
//! The pipeline: parse a rule-based [`flow::DialogFlow`], enumerate its walks
//! into training dialogs ([`compile`]), train an [`hcn`] policy on them, improve
//! it from corrected conversation logs ([`teach`]) and compare dialog managers
//! by replaying transcripts ([`regress`]).

pub mod compile;
pub mod entity;
pub mod flow;
pub mod hcn;
pub mod regress;
pub mod samples;
pub mod scalar;
pub mod teach;

pub use scalar::Scalar;

/// The policy in double precision, the default everywhere.
pub type Policy = hcn::PolicyModel<f64>;
pub type PolicyF32 = hcn::PolicyModel<f32>;
pub type State = hcn::DialogState<f64>;
