//! Learnable feature-map resizing (DynOPool) trained end to end.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! resizing operator itself ([`dynopool`]), a GMACs complexity regularizer
//! ([`complexity`]), a declarative CNN builder ([`network`]), synthetic
//! datasets ([`datagen`]), and an SGD trainer with checkpointing
//! ([`trainer`], [`checkpoint`]). [`gradcheck`] holds the finite-difference
//! self-test suite used by the `dynopool gradcheck` command.

pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod datagen;
pub mod dynopool;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
