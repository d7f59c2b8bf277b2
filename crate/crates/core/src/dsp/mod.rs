//! Log-Mel spectrogram and frame-aligned prosody tracks.
//!
//! All tracks share one framing: frame `n` covers samples
//! `[n * hop, n * hop + window_len)` and there are
//! `1 + (len - window_len) / hop` frames.

mod features;
mod mel;
mod pitch;
mod stft;
mod vad;

pub use features::{read_taif, write_features_csv, write_taif, Frontend, FrontendConfig, UtteranceFeatures};
pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, LogMelSpectrogram, MelConfig, MelFilterbank};
pub use pitch::{normalize_pitch, pitch_track, PitchConfig, PitchTrack};
pub use stft::{stft, Spectrogram, StftConfig};
pub use vad::{frame_rms_db, pause_probability, VadConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("audio has {len} samples, at least {needed} required")]
    AudioTooShort { len: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("waveform is sampled at {got} Hz, frontend expects {expected} Hz")]
    SampleRateMismatch { got: u32, expected: u32 },
    #[error("feature file: {0}")]
    BadFeatureFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-frame voice prosody aligned with a spectrogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyTrack {
    /// z-scored log-f0 over voiced frames, 0 where unvoiced.
    pub pitch_norm: Vec<f64>,
    /// Probability that the frame is a pause, in [0, 1].
    pub pause_prob: Vec<f64>,
    pub voiced_mask: Vec<bool>,
}

impl ProsodyTrack {
    pub fn frames(&self) -> usize {
        self.pause_prob.len()
    }
}

pub(crate) fn frame_count(len: usize, cfg: &StftConfig) -> Result<usize, DspError> {
    if len < cfg.window_len {
        return Err(DspError::AudioTooShort { len, needed: cfg.window_len });
    }
    Ok(1 + (len - cfg.window_len) / cfg.hop_len)
}

/// Iterates over the analysis frames of `w`.
pub(crate) fn frames<'a>(w: &'a Waveform, cfg: &'a StftConfig) -> Result<impl Iterator<Item = &'a [f64]> + 'a, DspError> {
    let n = frame_count(w.len(), cfg)?;
    let s = w.samples();
    Ok((0..n).map(move |i| &s[i * cfg.hop_len..i * cfg.hop_len + cfg.window_len]))
}
