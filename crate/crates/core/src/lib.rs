//! Line-level fault localization without tests.
//!
//! Per-line state vectors from a frozen left-to-right encoder are re-encoded
//! by a small bidirectional Transformer adapter that emits one bugginess
//! probability per line. The crate covers the whole pipeline: labeling lines
//! from bug-fixing diffs ([`corpus`]), producing and persisting state matrices
//! ([`states`]), windowing ([`windowing`]), the adapter itself ([`adapter`]),
//! optimization and cross-validation ([`training`]), ranking metrics
//! ([`eval`]) and an Ochiai spectrum-based baseline ([`sbfl`]).
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod adapter;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod par;
pub mod sbfl;
pub mod states;
pub mod synth;
pub mod training;
pub mod windowing;

pub use error::{Error, ErrorCategory, Result};
