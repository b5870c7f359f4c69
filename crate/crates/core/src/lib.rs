//! Multilingual, multispeaker text-to-spectrogram synthesis at desk scale.

pub mod corpus;
pub mod evalsuite;
pub mod parallel;
pub mod textfront;
pub mod synthesizer;
pub mod trainer;
