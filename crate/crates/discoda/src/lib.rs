//! Adversarial domain adaptation for discourse relation classification over
//! sequence pairs.
//!
//! The system classifies a pair of token sequences (two discourse arguments)
//! into one of `K` relation classes, and transfers a classifier trained on a
//! labeled source domain to an unlabeled target domain in three stages:
//!
//! 1. **Pretrain** a source encoder and classifier on labeled source pairs
//!    (cross-entropy with optional label smoothing).
//! 2. **Adapt** a target encoder initialized from the source encoder by
//!    alternating discriminator updates, inverted-label generator updates
//!    (with spectral normalization of the discriminator), and a
//!    reconstruction step that anchors target features to the frozen source
//!    encoder. An optional supervised step consumes a small labeled target
//!    subset.
//! 3. **Classify** target pairs with the adapted encoder and the frozen
//!    source classifier.
//!
//! A joint gradient-reversal baseline ([`dann`]), a synthetic two-domain
//! corpus generator ([`data::generate`]), evaluation/reporting ([`eval`]), a
//! labeled-subset sweep ([`sweep`]), and a CLI ([`cli`]) round out the crate.
//!
//! Model math is generic over the scalar type via `discoda_ad::Scalar`; the
//! aliases at this crate root pin the default `f64` precision used by the
//! CLI and the test suite.

pub mod checkpoint;
pub mod cli;
pub mod dann;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod pipeline;
pub mod sweep;
#[cfg(test)]
pub(crate) mod testkit;
pub mod train;

pub use discoda_ad as ad;
pub use error::{Error, Result};

/// Default-precision tensor.
pub type Tensor = ad::Tensor<f64>;
/// Default-precision tape.
pub type Tape = ad::Tape<f64>;
/// Default-precision embedding table.
pub type EmbeddingTable = data::EmbeddingTable<f64>;
/// Default-precision encoder parameters.
pub type EncoderParams = encoder::EncoderParams<f64>;
/// Default-precision classifier head.
pub type ClassifierParams = heads::ClassifierParams<f64>;
/// Default-precision discriminator head.
pub type DiscriminatorParams = heads::DiscriminatorParams<f64>;
/// Default-precision reconstructor head.
pub type ReconstructorParams = heads::ReconstructorParams<f64>;
/// Default-precision pretraining state.
pub type PretrainState = train::PretrainState<f64>;
/// Default-precision adaptation state.
pub type AdaptState = train::AdaptState<f64>;
