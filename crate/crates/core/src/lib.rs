//! Late-to-early training laboratory.
//!
//! A larger decoder-only language model is pretrained while the hidden state
//! of one of its early layers is pulled toward the last-layer hidden state of
//! a smaller, frozen, already-trained model. The pull is weighted by a
//! coefficient that decays linearly to zero, after which training is plain
//! next-token prediction.

pub mod alignment;
pub mod checks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod seeding;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
