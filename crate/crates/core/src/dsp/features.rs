use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    log_mel, mel_filterbank, normalize_pitch, pause_probability, pitch_track, stft, DspError, LogMelSpectrogram, MelConfig, MelFilterbank,
    PitchConfig, ProsodyTrack, StftConfig, VadConfig,
};
use crate::audio::{Waveform, CANONICAL_RATE};

const TAIF_MAGIC: &[u8; 4] = b"TAIF";
const TAIF_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub vad: VadConfig,
}

/// Model-ready features of one utterance, stored as f32 so that values read
/// back from a feature file are identical to freshly extracted ones.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub frames: usize,
    pub n_mels: usize,
    /// `frames x n_mels`, row-major.
    pub log_mel: Vec<f32>,
    pub pitch_norm: Vec<f32>,
    pub pause_prob: Vec<f32>,
}

impl UtteranceFeatures {
    pub fn new(frames: usize, n_mels: usize, log_mel: Vec<f32>, pitch_norm: Vec<f32>, pause_prob: Vec<f32>) -> Result<Self, DspError> {
        if frames == 0 || log_mel.len() != frames * n_mels || pitch_norm.len() != frames || pause_prob.len() != frames {
            return Err(DspError::ShapeMismatch(format!(
                "features: {frames} frames x {n_mels} mels but S has {}, pitch {}, pause {} values",
                log_mel.len(),
                pitch_norm.len(),
                pause_prob.len()
            )));
        }
        Ok(Self { frames, n_mels, log_mel, pitch_norm, pause_prob })
    }

    pub fn from_parts(s: &LogMelSpectrogram, p: &ProsodyTrack) -> Result<Self, DspError> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        Self::new(s.frames, s.n_mels, f(&s.values), f(&p.pitch_norm), f(&p.pause_prob))
    }
}

/// Holds a validated configuration and its filterbank.
#[derive(Clone, Debug)]
pub struct Frontend {
    cfg: FrontendConfig,
    fb: MelFilterbank,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self, DspError> {
        cfg.stft.validate()?;
        cfg.pitch.validate()?;
        cfg.vad.validate()?;
        if cfg.mel.eps_floor.is_nan() || cfg.mel.eps_floor <= 0.0 {
            return Err(DspError::InvalidConfig("eps_floor must be positive".into()));
        }
        let fb = mel_filterbank(cfg.mel.n_mels, cfg.stft.n_fft, CANONICAL_RATE, cfg.mel.f_min, cfg.mel.f_max)?;
        Ok(Self { cfg, fb })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.fb
    }

    /// Log-Mel spectrogram and prosody tracks on a shared framing.
    pub fn analyze(&self, w: &Waveform) -> Result<(LogMelSpectrogram, ProsodyTrack), DspError> {
        if w.sample_rate() != self.fb.sample_rate {
            return Err(DspError::SampleRateMismatch { got: w.sample_rate(), expected: self.fb.sample_rate });
        }
        let s = log_mel(&stft(w, &self.cfg.stft)?, &self.fb, self.cfg.mel.eps_floor)?;
        let pitch = pitch_track(w, &self.cfg.stft, &self.cfg.pitch)?;
        let pause_prob = pause_probability(w, &self.cfg.stft, &self.cfg.vad)?;
        let prosody = ProsodyTrack { pitch_norm: normalize_pitch(&pitch.f0, &pitch.voiced), pause_prob, voiced_mask: pitch.voiced };
        debug_assert_eq!(s.frames, prosody.frames());
        Ok((s, prosody))
    }

    pub fn extract(&self, w: &Waveform) -> Result<UtteranceFeatures, DspError> {
        let (s, p) = self.analyze(w)?;
        UtteranceFeatures::from_parts(&s, &p)
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Binary feature file: magic, version, T, n_mels, then S, pitch, pause as
/// little-endian f32.
pub fn write_taif(path: &Path, f: &UtteranceFeatures) -> Result<(), DspError> {
    let mut buf = Vec::with_capacity(16 + 4 * (f.log_mel.len() + 2 * f.frames));
    buf.extend_from_slice(TAIF_MAGIC);
    buf.extend_from_slice(&TAIF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(f.n_mels as u32).to_le_bytes());
    put_f32s(&mut buf, &f.log_mel);
    put_f32s(&mut buf, &f.pitch_norm);
    put_f32s(&mut buf, &f.pause_prob);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_taif(path: &Path) -> Result<UtteranceFeatures, DspError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != TAIF_MAGIC {
        return Err(DspError::BadFeatureFile(format!("{}: not a TAIF file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != TAIF_VERSION {
        return Err(DspError::BadFeatureFile(format!("{}: version {version}, expected {TAIF_VERSION}", path.display())));
    }
    let (t, m) = (word(8) as usize, word(12) as usize);
    let expected = t.checked_mul(m).and_then(|tm| tm.checked_add(2 * t)).and_then(|n| n.checked_mul(4)).map(|n| n + 16);
    if expected != Some(bytes.len()) {
        return Err(DspError::BadFeatureFile(format!("{}: size does not match T={t}, n_mels={m}", path.display())));
    }
    let mut vals = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let log_mel: Vec<f32> = vals.by_ref().take(t * m).collect();
    let pitch_norm: Vec<f32> = vals.by_ref().take(t).collect();
    let pause_prob: Vec<f32> = vals.collect();
    UtteranceFeatures::new(t, m, log_mel, pitch_norm, pause_prob).map_err(|e| DspError::BadFeatureFile(e.to_string()))
}

/// Human-readable mirror: one row per frame, `frame,pitch_norm,pause_prob,mel0..`.
pub fn write_features_csv(path: &Path, f: &UtteranceFeatures) -> Result<(), DspError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DspError::Io(e.into()))?;
    let mut header = vec!["frame".to_string(), "pitch_norm".into(), "pause_prob".into()];
    header.extend((0..f.n_mels).map(|m| format!("mel{m}")));
    w.write_record(&header).map_err(|e| DspError::Io(e.into()))?;
    for n in 0..f.frames {
        let mut row = vec![n.to_string(), f.pitch_norm[n].to_string(), f.pause_prob[n].to_string()];
        row.extend(f.log_mel[n * f.n_mels..(n + 1) * f.n_mels].iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| DspError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
