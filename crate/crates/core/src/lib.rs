//! Cross-task acoustic scene classification on a small reverse-mode
//! autodiff core.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense tensors, the gradient tape and finite-difference checks
//! - [`dsp`]: WAV decoding, resampling and 64-bin log-mel features
//! - [`attention`]: multi-head (cross-)attention blocks and attention pooling
//! - [`models`]: the Base, VFM, JRM and CMAM architectures, the event
//!   embedder and the ASCM model file format
//! - [`training`]: losses, distillation, Adam with warmup, folds and metrics
//! - [`manifest`]: the `path,scene,fold` dataset manifest

pub mod attention;
pub mod dsp;
pub mod manifest;
pub mod models;
pub mod tensor;
pub mod training;
