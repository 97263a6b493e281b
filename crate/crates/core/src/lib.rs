//! Contrastive vocal-similarity representation learning.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`audio`] and [`mel`]: 16 kHz mono buffers, the vocal activity gate and
//!   the 64-band log-mel frontend.
//! * [`corpus`]: stem tracks, mixtures, a deterministic synthetic generator,
//!   stem-directory ingestion and artist-disjoint splits.
//! * [`sampler`]: contrastive pair strategies (segment-level, mixture/vocal,
//!   artificial mixtures, hybrid, finetune schedule and artist-level).
//! * [`encoder`]: a depthwise-separable convolutional encoder with a
//!   projection head and bilinear similarity, all with hand-written
//!   gradients.
//! * [`train`]: the batch contrastive loss, Adam, plateau learning-rate
//!   halving and the pre-training / finetuning loops.
//! * [`eval`]: clip embeddings, linear probes, EER/MNR retrieval metrics,
//!   cluster metrics and the downstream protocols.
//! * [`retrieval`]: cosine retrieval index, listening-test trials, the
//!   response log and winrate / agreement matrices.

pub mod audio;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mel;
pub mod retrieval;
pub mod sampler;
pub mod seeding;
pub mod train;

pub use audio::AudioBuffer;
pub use corpus::{Corpus, Gender, Partition, StemTrack};
pub use encoder::{EncoderConfig, ModelState};
pub use error::{Error, Result};
pub use mel::MelFrameMatrix;
