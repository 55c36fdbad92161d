//! Run-time conversion and the evaluation toolkit around it: waveform
//! inversion, mel-cepstral distortion, the domain-invariance probe, and the
//! 2-D representation projection.

pub mod invert;
pub mod mcc;
pub mod mcd;
pub mod probe;
pub mod project;

use std::path::{Path, PathBuf};

use crate::audio::mel::{mel_spectrogram, MelSpectrogram, SAMPLE_RATE};
use crate::audio::{load_waveform, resample};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, CheckpointMeta};
use crate::model::{ContentSample, Model};

pub use invert::{invert_to_waveform, GRIFFIN_LIM_ITERATIONS};
pub use mcc::{extract_mcc, mcc_from_mel, MccSequence, MCC_DIM};
pub use mcd::{mcd, McdDetail};
pub use probe::{
    collect_probe_vectors, domain_probe, probe_report, ProbeKind, ProbeReport, ProbeVector,
};
pub use project::{project_vectors, write_projection_csv, Projection, ProjectionPoint};

/// Clean/noisy condition of the source and target utterances. Metadata only:
/// the conversion pipeline is identical in all four cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    ScTc,
    ScTn,
    SnTc,
    SnTn,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::ScTc, Scenario::ScTn, Scenario::SnTc, Scenario::SnTn];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::ScTc => "SC-TC",
            Scenario::ScTn => "SC-TN",
            Scenario::SnTc => "SN-TC",
            Scenario::SnTn => "SN-TN",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.tag() == s)
            .ok_or_else(|| Error::Usage(format!("unknown scenario `{s}` (SC-TC, SC-TN, SN-TC, SN-TN)")))
    }
}

#[derive(Debug, Clone)]
pub struct ConversionRequest {
    pub source_audio: PathBuf,
    pub target_audio: PathBuf,
    pub scenario: Scenario,
    pub checkpoint: PathBuf,
}

pub struct ConversionOutcome {
    pub mel: MelSpectrogram,
    pub meta: CheckpointMeta,
}

/// Loads a WAV, resamples to 16 kHz when needed, and extracts its log-mel
/// spectrogram.
pub fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    let w = load_waveform(path)?;
    let w = if w.sample_rate == SAMPLE_RATE { w } else { resample(&w, SAMPLE_RATE)? };
    mel_spectrogram(&w)
}

/// Converts the source utterance to the target speaker's voice: content from
/// the source, speaker embedding from the target, deterministic content path
/// (the posterior mean), decoding in the model's inference mode. The output
/// frame count equals the source frame count.
pub fn convert_with_model(
    model: &Model,
    source: &MelSpectrogram,
    target: &MelSpectrogram,
) -> Result<MelSpectrogram> {
    let z_s = model.speaker_encode(&target.frames.view())?;
    let post = model.content_encode(&source.frames.view())?;
    let z_c = ContentSample { values: post.mean };
    let frames = model.decode(&z_s, &z_c, None)?;
    Ok(MelSpectrogram { frames })
}

pub fn convert(req: &ConversionRequest) -> Result<ConversionOutcome> {
    let (model, meta) = load_checkpoint(&req.checkpoint)?;
    let source = load_mel(&req.source_audio)?;
    let target = load_mel(&req.target_audio)?;
    let mel = convert_with_model(&model, &source, &target)?;
    Ok(ConversionOutcome { mel, meta })
}
