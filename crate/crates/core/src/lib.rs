//! Prompt-aided fact verification.
//!
//! A desk-scale implementation of a two-stage claim classifier:
//!
//! * a small transformer encoder trained from scratch with masked language
//!   modelling ([`mlm`]),
//! * a cloze-template refute filter that reads the MLM head at a mask slot
//!   through a verbalizer ([`prompt`]),
//! * supervised finetuning under stratified k-fold cross-validation with
//!   out-of-fold prediction collection ([`pipeline`]),
//! * snapshot, mean and stacking ensembles ([`ensemble`]),
//! * confusion-matrix based F1 reporting ([`metrics`]).
//!
//! Every stochastic component takes an explicit seed; identical inputs give
//! bit-identical outputs.

pub mod corpus;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod mlm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use corpus::{Dataset, FoldAssignment, Instance, Label, Split};
pub use encoder::{EncoderConfig, EncoderParams, HiddenStates};
pub use error::{Error, Result};
pub use optim::{AdamWHyper, AdamWState, ScheduleConfig, ScheduleKind};
pub use tokenizer::{TokenSequence, Vocabulary};
pub use ensemble::{SnapshotSet, StackerParams};
pub use metrics::ConfusionMatrix;
pub use pipeline::{ClassifierModel, OofMatrix, PredictionVector};
pub use prompt::{BinaryPrediction, FilterModel, PromptTemplate, Verbalizer};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
