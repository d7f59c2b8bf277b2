//! Waveform decoding, resampling and the dataset manifest.

mod manifest;
mod resample;
mod wav;

pub use manifest::{load_manifest, write_manifest, ManifestEntry, ManifestError};
pub use resample::resample;
pub use wav::{load_wav, write_wav_i16};

use thiserror::Error;

/// Rate every input is brought to before feature extraction.
pub const CANONICAL_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono signal with amplitudes nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|s| s * gain).collect(), sample_rate: self.sample_rate }
    }
}

/// Decodes a WAV file and brings it to [`CANONICAL_RATE`].
pub fn load_canonical(path: &std::path::Path) -> Result<Waveform, AudioError> {
    let w = load_wav(path)?;
    Ok(resample(&w, CANONICAL_RATE))
}
