//! Deterministic synthetic two-speaker corpus.
//!
//! Every random draw is seeded from `(master seed, item id)`, so the output
//! does not depend on generation order.

mod build;
mod manifest;
mod mixture;
mod speaker;
mod synth;

pub use build::{build_corpus, Corpus, CorpusConfig, MANIFEST_FILE};
pub use manifest::{
    CorpusManifest, MixtureRecord, SpeakerRecord, Split, UtteranceRecord, MANIFEST_VERSION,
};
pub use mixture::{make_mixture, MixtureParts, MixtureSample};
pub use speaker::{make_speaker, Resonance, SpeakerProfile, F0_RANGE};
pub use synth::{synth_utterance, MIN_DURATION_S};
