//! Environment-adversarial training of speaker embeddings.

pub mod checkpoint;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod num;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use corpus::{Manifest, Split, TrialKind, TrialList, TripletSpec, UtteranceRef};
pub use dsp::{DspConfig, FeatureKind, FeatureSegment};
pub use error::{Error, Result};
pub use nets::{Arch, Model, PoolKind, TrunkConfig};
pub use synthgen::SynthSpec;
