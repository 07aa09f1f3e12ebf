//! End-to-end pipeline for aligning ECG representations with multi-view
//! echocardiography study embeddings in a shared latent space.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`synth`]: paired synthetic data (ECG waveform + frozen view encoder).
//! - [`signal`]: ECG preprocessing (baseline removal, resampling, normalization,
//!   augmentation).
//! - [`tensor`] / [`autodiff`]: dense f64 tensors and a reverse-mode tape
//!   covering the operator set the model needs.
//! - [`model`]: transformer ECG encoder, view projection, study-level
//!   aggregators and projection heads.
//! - [`loss`]: the bidirectional temperature-scaled contrastive objective.
//! - [`train`]: Adam loop, validation tracking, ablation driver.
//! - [`eval`]: kNN phenotype classification with bootstrap CIs and
//!   phenotype-aware cross-modal retrieval.
//! - [`formats`]: the on-disk file formats (datasets, checkpoints, embedding
//!   stores, config files, run manifests).

pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod formats;
pub mod loss;
pub mod model;
pub mod seeds;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
