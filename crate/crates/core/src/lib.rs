//! Resource-aware differentiable architecture search.
//!
//! A supernet of mixed operations is trained with alternating first-order
//! updates: network weights on a training split, architecture logits on a
//! validation split against cross-entropy plus `Σ λ_m · C_m`, where each
//! `C_m` is the softmax-expected resource cost (parameters, MACs, or a
//! latency table) summed over every mixed-operation instance.

pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod primitives;
pub mod rng;
pub mod search;
pub mod supernet;

pub use error::{Error, Result};
