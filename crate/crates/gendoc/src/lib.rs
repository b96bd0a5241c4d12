//! GenDoc: a desk-scale multimodal encoder-decoder for document
//! understanding.
//!
//! The model fuses three modalities — OCR text, image patches, and 2-D
//! layout — in a transformer encoder with disentangled content-to-layout
//! attention, and decodes through modality-expert feed-forward blocks. It is
//! pre-trained with unified masking (text infilling, masked image token
//! prediction, masked coordinate prediction) and fine-tuned for question
//! answering, layout detection, token labeling, and classification on a
//! deterministic synthetic corpus.
//!
//! Module map:
//! - [`numerics`]: tensor + reverse-mode autodiff substrate and the
//!   finite-difference gradient oracle
//! - [`vocab`]: shared token space (subwords, specials, visual, layout,
//!   class blocks)
//! - [`vqvae`]: discrete image tokenizer providing visual targets
//! - [`input`]: encoder input assembly (text, patches, layout embeddings)
//! - [`model`]: encoder with disentangled attention, decoder with
//!   modality experts
//! - [`pretrain`]: the three masking tasks and the unified training step
//! - [`downstream`]: beam search plus the four task heads
//! - [`metrics`]: ANLS, IoU/mAP, entity F1, accuracy
//! - [`data`]: synthetic corpus generator and OCR-JSON ingestion
//! - [`config`], [`checkpoint`], [`optim`], [`train`]: run orchestration

pub mod data;
pub mod error;
pub mod input;
pub mod model;
pub mod numerics;
pub mod vocab;

pub use error::{Error, Result};
