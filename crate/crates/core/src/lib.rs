//! Core library for a small adversarial-robustness laboratory.
//!
//! The crate trains multilayer perceptrons on synthetic datasets with
//! standard adversarial training and with an additional mutual-information
//! regularizer that disentangles what a model's logits carry about the
//! clean input from what they carry about the adversarial perturbation.
//! Alongside the training side it ships exact discrete information
//! measures used to check the additive decomposition the regularizer is
//! built on, neural MI estimation with Donsker-Varadhan bounds, Linf/L2
//! attack crafting, and deterministic CSV/SVG reporting.
//!
//! Everything is reproducible at the bit level: one root seed determines
//! all streams, reductions run in fixed order, and the parallel kernels
//! (enabled by the default `parallel` feature) are bitwise identical to
//! their serial fallbacks.

pub mod attack;
pub mod config;
pub mod container;
pub mod datasets;
pub mod defense;
pub mod error;
pub mod harness;
pub mod info;
pub mod mi;
pub mod plot;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
