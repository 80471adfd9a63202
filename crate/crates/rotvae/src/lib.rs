//! Rotation-robust targeted-output VAE.
//!
//! A small, fully deterministic stack: an f64 autodiff engine with the
//! handful of ops a convolutional VAE needs ([`tensor`]), the MNIST
//! pipeline with seeded rotation ([`dataset`]), the model and its losses
//! ([`vae`]), Adam training and checkpoints ([`trainer`]), and the latent
//! diagnostics — embeddings, decode grids, exact t-SNE, neighbourhood
//! census, k-NN purity ([`analysis`]) — plus the on-disk CSV/PGM formats
//! ([`output`]).
//!
//! The central idea under test: swap the VAE's reconstruction target from
//! the input itself to a fixed per-class reference image. Trained on
//! randomly rotated digits, the standard VAE organises its latent space by
//! appearance (rotation angle dominates); the targeted variant has to
//! answer "which digit is this, whatever its pose", and its latent space
//! separates by class.

pub mod analysis;
pub mod dataset;
pub mod output;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vae;
