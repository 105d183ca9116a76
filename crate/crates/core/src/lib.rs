//! Concept contrastive pre-training for dense prediction.
//!
//! The crate is `no_std` (with `alloc`) and free of IO: everything here is a
//! pure function of its inputs and explicit seeds. Image files, checkpoints,
//! configuration and the command-line driver live in the `concl` crate.
//!
//! Module map:
//!
//! - [`tensor`]: dense arrays and the reverse-mode tape.
//! - [`image`]: image patches, label maps and the synthetic texture dataset.
//! - [`geometry`]: view-pair sampling, augmentation and mask restoration.
//! - [`concepts`]: grid, graph-segmentation and k-means concept generators.
//! - [`encoder`]: the staged convolutional encoder and its momentum copy.
//! - [`loss`]: InfoNCE, concept loss and the negative queues.
//! - [`trainer`]: configuration, state and the training step.
//! - [`probe`]: frozen-feature evaluation.
//! - [`gradcheck`]: the finite-difference suite over every operation.
#![no_std]

extern crate alloc;

pub mod concepts;
pub mod encoder;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Tensor, TensorError, Var};
