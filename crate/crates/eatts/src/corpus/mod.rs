//! Dataset construction: synthetic toy speech, corpus builders for the
//! extractor and TTS datasets, manifests, and GE2E batch sampling.

pub mod batch;
pub mod build;
pub mod manifest;
pub mod voice;

pub use batch::{sample_ge2e_batch, FeatureStore, Ge2eBatch};
pub use build::{
    build_extractor_corpus, build_tts_corpus, corpus_dir_of, desk_env_spec, env_by_id,
    load_environments, synth_environment, Environment, PairingPlan,
};
pub use manifest::{GroupBy, Manifest, Split, UtteranceRecord, MANIFEST_HEADER};
pub use voice::{synth_toy_utterance, SpeakerVoiceSpec, FRAME_HOP, VOCAB_SIZE};
