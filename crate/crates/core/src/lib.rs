//! Adversarial-training laboratory.
//!
//! A small reverse-mode autodiff engine ([`tape`]) drives MLP and CNN
//! classifiers ([`models`]), ℓ∞ PGD attacks ([`attacks`]), SGD-based natural,
//! adversarial and TRADES training ([`trainers`]), and batch hooks that act on
//! small-loss training examples ([`rofg`]): factor ablation, opposite-direction
//! perturbation injection, attack-strength adjustment and augmentation retry.
//! [`harness`] wires everything into reproducible experiments that write
//! per-epoch learning curves and best/last checkpoints.

pub mod array;
pub mod attacks;
pub mod augment;
pub mod data_io;
pub mod error;
pub mod harness;
pub mod models;
pub mod rng;
pub mod rofg;
pub mod scalar;
pub mod tape;
pub mod trainers;

pub use array::{project_linf, Array, DenseArray};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{finite_diff_grad, Gradients, NodeId, Tape};
