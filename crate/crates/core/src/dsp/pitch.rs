use serde::{Deserialize, Serialize};

use super::{frames, DspError, StftConfig};
use crate::audio::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum normalized autocorrelation at the chosen lag.
    pub voicing_threshold: f64,
    /// Frames quieter than this fraction of the utterance RMS are unvoiced.
    pub rms_gate: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { f0_min: 60.0, f0_max: 400.0, voicing_threshold: 0.45, rms_gate: 0.01 }
    }
}

impl PitchConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if !(0.0 < self.f0_min && self.f0_min < self.f0_max) {
            return Err(DspError::InvalidConfig(format!("need 0 < f0_min ({}) < f0_max ({})", self.f0_min, self.f0_max)));
        }
        if !(0.0..=1.0).contains(&self.voicing_threshold) || self.rms_gate < 0.0 {
            return Err(DspError::InvalidConfig("voicing_threshold must lie in [0, 1] and rms_gate be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack {
    /// Hz, 0 where unvoiced.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    /// Normalized autocorrelation at the selected lag.
    pub strength: Vec<f64>,
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Normalized cross-correlation of `x[..n-lag]` with `x[lag..]`.
fn ncc(x: &[f64], lag: usize) -> f64 {
    let (a, b) = (&x[..x.len() - lag], &x[lag..]);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        ab += p * q;
        aa += p * p;
        bb += q * q;
    }
    let d = (aa * bb).sqrt();
    if d <= 1e-20 {
        0.0
    } else {
        ab / d
    }
}

/// Returns (fractional lag, correlation) or None if no local maximum exists.
fn best_lag(frame: &[f64], lag_lo: usize, lag_hi: usize) -> Option<(f64, f64)> {
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    // one extra lag on each side so the endpoints can be local maxima
    let lo = lag_lo.saturating_sub(1).max(1);
    let hi = (lag_hi + 1).min(x.len() - 2);
    if hi <= lo + 1 {
        return None;
    }
    let r: Vec<f64> = (lo..=hi).map(|l| ncc(&x, l)).collect();
    let peaks: Vec<usize> =
        (1..r.len() - 1).filter(|&i| r[i] > r[i - 1] && r[i] >= r[i + 1] && (lag_lo..=lag_hi).contains(&(lo + i))).collect();
    let global = peaks.iter().map(|&i| r[i]).fold(f64::NEG_INFINITY, f64::max);
    if global.is_nan() || global <= 0.0 {
        return None;
    }
    // smallest lag whose peak is close to the best one, to avoid sub-octave picks
    let i = *peaks.iter().find(|&&i| r[i] >= 0.9 * global)?;
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let peak = b - 0.25 * (a - c) * shift;
    Some(((lo + i) as f64 + shift, peak.min(1.0)))
}

/// Per-frame f0 by normalized autocorrelation with parabolic lag
/// interpolation, on the STFT framing.
pub fn pitch_track(w: &Waveform, stft: &StftConfig, cfg: &PitchConfig) -> Result<PitchTrack, DspError> {
    cfg.validate()?;
    let sr = w.sample_rate() as f64;
    let lag_lo = (sr / cfg.f0_max).floor().max(2.0) as usize;
    let lag_hi = (sr / cfg.f0_min).ceil() as usize;
    if lag_hi + 3 >= stft.window_len {
        return Err(DspError::InvalidConfig(format!("window of {} samples is too short for f0_min {} Hz", stft.window_len, cfg.f0_min)));
    }
    let gate = cfg.rms_gate * rms(w.samples());
    let mut out = PitchTrack { f0: Vec::new(), voiced: Vec::new(), strength: Vec::new() };
    for frame in frames(w, stft)? {
        let (f0, voiced, strength) = match best_lag(frame, lag_lo, lag_hi) {
            Some((lag, r)) => {
                let voiced = r >= cfg.voicing_threshold && rms(frame) >= gate && rms(frame) > 0.0;
                (if voiced { sr / lag } else { 0.0 }, voiced, r)
            }
            None => (0.0, false, 0.0),
        };
        out.f0.push(f0);
        out.voiced.push(voiced);
        out.strength.push(strength);
    }
    Ok(out)
}

/// z-scores `ln f0` over voiced frames; unvoiced frames are 0, and so is
/// everything when fewer than two frames are voiced.
pub fn normalize_pitch(f0: &[f64], voiced: &[bool]) -> Vec<f64> {
    assert_eq!(f0.len(), voiced.len(), "f0 and voiced mask lengths differ");
    let logs: Vec<f64> = f0.iter().zip(voiced).filter(|(_, &v)| v).map(|(f, _)| f.ln()).collect();
    if logs.len() < 2 {
        return vec![0.0; f0.len()];
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let std = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
    f0.iter().zip(voiced).map(|(f, &v)| if v { (f.ln() - mean) / std } else { 0.0 }).collect()
}
