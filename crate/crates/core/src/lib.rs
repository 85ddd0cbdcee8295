//! Tool retrieval evaluation and preference-data generation for rewriting
//! vague user instructions into retriever-friendly ones.
//!
//! The crate is organised bottom-up: [`textproc`] and [`corpus`] load data,
//! [`retrieval`] ranks tools, [`metrics`] scores rankings, [`rewriter`]
//! produces candidate rewrites, [`preference`] turns scored candidates into
//! chosen/rejected pairs, [`dpo`] trains a small tabular policy on them, and
//! [`harness`] runs whole experiments. The `toolbridge` binary in
//! [`cli`] exposes every stage.

pub mod cli;
pub mod corpus;
pub mod dpo;
pub mod error;
pub mod harness;
pub mod jsonl;
pub mod metrics;
pub mod preference;
pub mod retrieval;
pub mod rewriter;
pub mod textproc;

pub use error::{Error, Result};
