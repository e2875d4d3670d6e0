//! Auditing the gap between on-policy and off-policy evaluation of a
//! response policy over finite prompt/response alphabets.
//!
//! A deployed model induces the joint law `P = rho ⊗ pi` over prompts and
//! responses, while a fixed preference corpus induces `Q = rho ⊗ q`. For any
//! bounded loss the two risks can differ by at most `2 · L_max · TV(P, Q)`,
//! and a sign witness attains that worst case. This crate computes all of
//! these quantities exactly on desk-scale alphabets, estimates them from
//! samples, builds synthetic scenarios where the gap is large, and audits
//! preference corpora for principle consensus, conflict and indifference.
//!
//! Module map:
//!
//! - [`measure`]: labels, distributions, kernels, joint laws, total variation
//! - [`risk`]: bounded losses, risks, gap bounds and witness losses
//! - [`estimation`]: seeded sampling, Hoeffding risk estimates, plug-in TV
//! - [`scenario`]: behavior-mode policies, suppressed corpora, rollouts
//! - [`discretion`]: principle judges and the consensus/conflict/indifference partition
//! - [`corpus_io`]: JSON Lines corpus and law formats, off-policy joint construction
//! - [`report`]: deterministic text and structured reports

pub mod corpus_io;
pub mod discretion;
pub mod estimation;
pub mod measure;
pub mod report;
pub mod risk;
pub mod scenario;

pub use measure::{Distribution, JointLaw, Kernel, Label, Normalization, Regime};
pub use risk::{BoundedLoss, GapReport, LossClass};
