//! Transductive zero-shot semantic segmentation on synthetic scenes.
//!
//! A small fully convolutional network projects pixels into a semantic
//! embedding space shared by seen and unseen classes. Source images train it
//! with cross-entropy; unlabeled target images pull their pixels toward the
//! unseen classes through the bias-rectification loss, optionally followed by
//! self-training on confident pseudo labels.

pub mod cli;
pub mod dataio;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod transduce;

pub use error::{Error, Result};
