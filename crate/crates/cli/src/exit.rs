//! Process exit codes and the mapping from library errors.

use std::fmt::Display;

use tai_speech::audio::{AudioError, ManifestError};
use tai_speech::config::ConfigError;
use tai_speech::dsp::DspError;
use tai_speech::metrics::MetricsError;
use tai_speech::model::ModelError;
use tai_speech::synth::SynthError;
use tai_speech::train::TrainError;

pub const VERIFY_FAILED: u8 = 1;
pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const AUDIO: u8 = 4;
pub const CLASS_PRESENCE: u8 = 5;
pub const PARAMS: u8 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Display) -> Self {
        Self { code, message: message.to_string() }
    }

    /// Same code, with `context: ` in front of the message.
    pub fn context(self, context: impl Display) -> Self {
        Self { code: self.code, message: format!("{context}: {}", self.message) }
    }
}

pub fn io(e: impl Display) -> CliError {
    CliError::new(IO, e)
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Read { .. } => IO,
            _ => CONFIG,
        };
        Self::new(code, e)
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        let code = match e {
            ManifestError::Io(_) => IO,
            _ => CONFIG,
        };
        Self::new(code, e)
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        let code = match e {
            AudioError::Io(_) => IO,
            _ => AUDIO,
        };
        Self::new(code, e)
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        let code = match e {
            DspError::Io(_) => IO,
            DspError::InvalidConfig(_) => CONFIG,
            _ => AUDIO,
        };
        Self::new(code, e)
    }
}

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::OneClassOnly(_) | MetricsError::TooFewExamples { .. } | MetricsError::Empty => CLASS_PRESENCE,
        MetricsError::Invalid(_) => CONFIG,
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::new(metrics_code(&e), e)
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io(_) => IO,
        ModelError::VersionMismatch { .. } | ModelError::CorruptFile(_) | ModelError::ParamMismatch(_) => PARAMS,
        _ => CONFIG,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_code(&e), e)
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Model(m) => model_code(m),
        TrainError::Metrics(m) => metrics_code(m),
        TrainError::Fold { source, .. } => train_code(source),
        TrainError::Io(_) => IO,
        TrainError::ShapeMismatch { .. } | TrainError::InvalidConfig(_) => CONFIG,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::new(train_code(&e), e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => Self::new(CONFIG, e),
            SynthError::Audio(a) => a.into(),
            SynthError::Manifest(m) => m.into(),
            SynthError::Io(_) => Self::new(IO, e),
        }
    }
}
