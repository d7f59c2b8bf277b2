//! Two-class synthetic corpus of speech-like utterances.
//!
//! An utterance is a chain of voiced "syllables" (harmonic bursts shaped by
//! two fixed resonators) separated by short gaps and, now and then, longer
//! pauses. The classes differ in syllable rate, pause rate, pause length and
//! how much f0 wanders from syllable to syllable.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, ManifestEntry, ManifestError, Waveform};
use crate::train::derive_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Timing and pitch statistics of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub syllable_rate_hz: f64,
    pub pause_rate_hz: f64,
    pub pause_len_ms: f64,
    pub pitch_jitter_cents: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub f0_hz: f64,
    pub formants_hz: [f64; 2],
    pub formant_bandwidth_hz: f64,
    pub noise_db: f64,
    /// Control class.
    pub class0: ClassProfile,
    /// Dementia class.
    pub class1: ClassProfile,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            duration_s: 2.5,
            sample_rate: audio::CANONICAL_RATE,
            f0_hz: 180.0,
            formants_hz: [700.0, 1200.0],
            formant_bandwidth_hz: 90.0,
            noise_db: -40.0,
            class0: ClassProfile { syllable_rate_hz: 4.0, pause_rate_hz: 0.3, pause_len_ms: 250.0, pitch_jitter_cents: 40.0 },
            class1: ClassProfile { syllable_rate_hz: 3.0, pause_rate_hz: 0.8, pause_len_ms: 600.0, pitch_jitter_cents: 130.0 },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive".into());
        }
        if !pos(self.duration_s) || self.sample_rate == 0 || !pos(self.f0_hz) || !pos(self.formant_bandwidth_hz) {
            return bad("duration, sample rate, f0 and bandwidth must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.formants_hz.iter().any(|&f| !pos(f) || f >= nyquist) || self.f0_hz >= nyquist {
            return bad(format!("formants and f0 must lie in (0, {nyquist}) Hz"));
        }
        if !self.noise_db.is_finite() || self.noise_db >= 0.0 {
            return bad(format!("noise_db must be negative, got {}", self.noise_db));
        }
        for (i, c) in [self.class0, self.class1].iter().enumerate() {
            if !(pos(c.syllable_rate_hz) && pos(c.pause_rate_hz) && pos(c.pause_len_ms) && pos(c.pitch_jitter_cents)) {
                return bad(format!("class {i}: every rate, length and jitter must be positive"));
            }
            if c.pause_rate_hz > c.syllable_rate_hz {
                return bad(format!("class {i}: pause rate cannot exceed the syllable rate"));
            }
        }
        if self.class1.pause_rate_hz < self.class0.pause_rate_hz {
            return bad("class 1 must pause at least as often as class 0".into());
        }
        Ok(())
    }

    pub fn profile(&self, class_id: u8) -> &ClassProfile {
        if class_id == 1 {
            &self.class1
        } else {
            &self.class0
        }
    }
}

/// Two-pole resonator run in place.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, sr: f64) {
    let r = (-PI * bandwidth / sr).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / sr).cos();
    let a2 = -r * r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = (1.0 - r) * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Harmonic burst at `f0` with a raised-cosine attack and release.
fn syllable(out: &mut [f64], f0: f64, sr: f64) {
    let n = out.len();
    let attack = ((0.015 * sr) as usize).min(n / 2).max(1);
    let release = ((0.030 * sr) as usize).min(n / 2).max(1);
    let n_harm = ((4000.0 / f0) as usize).max(1);
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for k in 1..=n_harm {
            s += (2.0 * PI * k as f64 * f0 * t).sin() / k as f64;
        }
        let env = if i < attack {
            0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()
        } else if n - i <= release {
            0.5 - 0.5 * (PI * (n - i) as f64 / release as f64).cos()
        } else {
            1.0
        };
        *v = s * env;
    }
}

fn scale_to_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        let g = peak / m;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// One utterance of `cfg.duration_s` seconds for `class_id`, peak 0.5.
pub fn synth_utterance<R: Rng>(class_id: u8, cfg: &SynthConfig, rng: &mut R) -> Waveform {
    let p = cfg.profile(class_id);
    let sr = cfg.sample_rate as f64;
    let total = (cfg.duration_s * sr).round() as usize;
    let mut x = vec![0.0; total];
    // per-utterance tempo variation
    let rate = p.syllable_rate_hz * rng.random_range(0.85..1.15);
    let pause_p = (p.pause_rate_hz * rng.random_range(0.7..1.3) / rate).min(1.0);
    let jitter = Normal::new(0.0, p.pitch_jitter_cents).expect("positive jitter");
    let period = (sr / rate) as usize;

    let mut pos = 0;
    while pos < total {
        let len = ((period as f64) * 0.7 * rng.random_range(0.8..1.2)) as usize;
        let end = (pos + len).min(total);
        let f0 = cfg.f0_hz * 2f64.powf(jitter.sample(rng) / 1200.0);
        syllable(&mut x[pos..end], f0, sr);
        let gap = (period as f64 * 0.3 * rng.random_range(0.8..1.2)) as usize;
        pos = end + gap;
        if rng.random::<f64>() < pause_p {
            pos += (p.pause_len_ms / 1000.0 * rng.random_range(0.7..1.3) * sr) as usize;
        }
    }
    for &f in &cfg.formants_hz {
        resonate(&mut x, f, cfg.formant_bandwidth_hz, sr);
    }
    scale_to_peak(&mut x, 0.5);
    let noise = Normal::new(0.0, 0.5 * 10f64.powf(cfg.noise_db / 20.0)).expect("finite noise level");
    x.iter_mut().for_each(|v| *v += noise.sample(rng));
    scale_to_peak(&mut x, 0.5);
    Waveform::new(x, cfg.sample_rate).expect("finite synthetic samples")
}

/// Rows of the corpus in manifest order: `(file stem, label, subject_id)`.
/// Each subject contributes two utterances of its class.
pub fn corpus_layout(cfg: &SynthConfig) -> Vec<(String, u8, String)> {
    let mut rows = Vec::with_capacity(2 * cfg.n_per_class);
    for class in 0..2u8 {
        for i in 0..cfg.n_per_class {
            let subject = format!("syn{class}-{:04}", i / 2);
            rows.push((format!("{subject}-{}", i % 2), class, subject));
        }
    }
    rows
}

/// Writes `wav/<stem>.wav` for every utterance and `manifest.csv` under
/// `out_dir`. Every file depends only on the config.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    cfg.validate()?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir)?;
    let layout = corpus_layout(cfg);
    let entries: Vec<ManifestEntry> = layout
        .par_iter()
        .enumerate()
        .map(|(i, (stem, label, subject))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
            let w = synth_utterance(*label, cfg, &mut rng);
            let path = wav_dir.join(format!("{stem}.wav"));
            audio::write_wav_i16(&path, &w)?;
            Ok(ManifestEntry { audio_path: path, label: *label, subject_id: subject.clone(), split_hint: None })
        })
        .collect::<Result<_, SynthError>>()?;
    audio::write_manifest(&out_dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}
