//! Referent resolution in multi-party conversation from two aligned channels:
//! dialogue transcripts and per-player pose keypoints.
//!
//! Three classification tasks share one model: speaking target identification
//! (who is being addressed), pronoun coreference resolution (who a third-person
//! pronoun refers to), and mentioned player prediction (who a masked name
//! mention refers to). The model encodes speaker body motion and player
//! positions on the visual side, a masked conversation window on the language
//! side, and fuses both with a small transformer.
//!
//! The crate is self-contained: it ships its own reverse-mode tensor engine
//! (checked against finite differences), a synthetic game-session generator
//! that produces fully labeled corpora, and a training/evaluation harness.

pub mod corpus;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod language;
pub mod presets;
pub mod rng;
pub mod tensorcore;
pub mod visual;

pub use datamodel::{
    Keypoints17, Label, Permutation, PlayerTrack, Session, TaskInstance, TaskKind, Utterance,
};
pub use error::Error;
pub use presets::{ModelDims, Preset};
pub use tensorcore::{Graph, ParamStore, TensorRef};
