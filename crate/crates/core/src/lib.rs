//! One-shot conditional audio filtering.
//!
//! Given a mixture and a short sample of the wanted sound, a FiLM-conditioned
//! wave-to-wave U-Net produces the isolated target. Everything needed to train
//! and evaluate the model on a CPU lives here, including the small
//! reverse-mode autodiff engine in [`tensor`].

pub mod tensor;
pub mod audio;
pub mod datagen;
pub mod objective;
pub mod model;
pub mod trainer;
pub mod cli;
