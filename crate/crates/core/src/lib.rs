//! Entropy-guided molecular patching and dynamic-query connectors.
//!
//! The crate is organised bottom-up:
//!
//! - [`smiles`]: atom-only SMILES tokenizer, heavy-atom graph reader, and the
//!   position-to-node map.
//! - [`numeric`]: dense kernels, a small reverse-mode tape, AdamW, and a
//!   finite-difference gradient checker.
//! - [`nap`]: the next-atom predictor (a tiny causal transformer), its
//!   training loop and the per-transition surprisal trace.
//! - [`patching`]: peak detection with prominence and non-maximum
//!   suppression, segmentation, pooling into dynamic tokens, and the uniform
//!   and random baselines.
//! - [`dqt`]: the dynamic query transformer that fuses learnable anchors and
//!   dynamic tokens against node embeddings.
//! - [`objectives`]: contrastive, modality-matching and masked-reconstruction
//!   losses plus a toy pretraining driver.
//! - [`eval`]: fragmentation agreement (NMI), trace export and segment
//!   statistics.
//! - [`persistence`]: the `EDTW` checkpoint container.

pub mod dqt;
pub mod error;
pub mod eval;
pub mod nap;
pub mod numeric;
pub mod objectives;
pub mod patching;
pub mod persistence;
pub mod rng;
pub mod smiles;

pub use error::{Error, Result};
