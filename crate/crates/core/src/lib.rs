//! Learned sanitization filters for collaborative user/provider privacy.
//!
//! A sanitizer maps an image onto the same image space so that a fixed
//! utility classifier still recognizes the subject while a privacy classifier
//! sees only the attribute prior.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod service;
pub mod training;

pub use error::{Error, Result};
