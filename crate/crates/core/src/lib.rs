//! Feature-level laboratory for interpretable kNN-VC speaker anonymization.
//!
//! The crate works on synthetic "speech features" (frame matrices) instead of
//! audio. Every operator of the anonymization pipeline is implemented at that
//! level, together with the privacy evaluation protocol used to attack it:
//!
//! ```text
//! source ──► phone labels ──► durations (blend w) ──► resample ──► kNN / codebook ──► anonymized
//!                                                          ▲
//!                                  target pool ── select ──┘
//! ```
//!
//! * [`corpus`] synthetic corpora with switchable identity channels and the
//!   `PKVC` binary container.
//! * [`phonelab`] prototype phone classifier, run-length transcripts, ACC/PER.
//! * [`quantize`] per-phone k-means codebooks.
//! * [`duration`] duration table, blending, rounding and frame resampling.
//! * [`convert`] kNN conversion, codebook conversion and the full pipeline.
//! * [`select`] target selection strategies.
//! * [`privacy`] semi-informed attacker, EER protocol and utility proxies.
//! * [`experiment`] config-driven runs and sweeps.

pub mod convert;
pub mod corpus;
pub mod duration;
pub mod error;
pub mod experiment;
pub mod phonelab;
pub mod privacy;
pub mod quantize;
pub mod seed;
pub mod select;
pub(crate) mod vector;

pub use convert::{anonymize_utterance, AnonConfig, SearchMode, TargetAssets};
pub use corpus::{Corpus, CorpusSpec, FeatureMatrix, Gender, PhoneId, Split, Utterance};
pub use duration::DurationModel;
pub use error::{Error, Result};
pub use phonelab::{PhoneClassifier, Transcript};
pub use privacy::{AttackerModel, PrivacyReport};
pub use quantize::QuantizedPool;
pub use select::SelectionStrategy;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
