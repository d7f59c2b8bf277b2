use serde::{Deserialize, Serialize};

use super::{frames, DspError, StftConfig};
use crate::audio::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    /// Percentile of frame energies (in dB) taken as the noise reference.
    pub percentile: f64,
    pub offset_db: f64,
    /// Logistic temperature in dB.
    pub tau_db: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self { percentile: 20.0, offset_db: 15.0, tau_db: 3.0 }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if !(0.0..=100.0).contains(&self.percentile) || self.tau_db.is_nan() || self.tau_db <= 0.0 || !self.offset_db.is_finite() {
            return Err(DspError::InvalidConfig("vad needs percentile in [0, 100], tau_db > 0 and a finite offset".into()));
        }
        Ok(())
    }
}

/// `20 log10(max(rms, 1e-10))` per frame.
pub fn frame_rms_db(w: &Waveform, stft: &StftConfig) -> Result<Vec<f64>, DspError> {
    Ok(frames(w, stft)?
        .map(|f| {
            let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
            20.0 * rms.max(1e-10).log10()
        })
        .collect())
}

/// Linear-interpolated percentile, `p` in [0, 100].
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// `q(n) = logistic((theta - E_dB(n)) / tau)` with `theta` the utterance's
/// energy percentile plus an offset.
pub fn pause_probability(w: &Waveform, stft: &StftConfig, cfg: &VadConfig) -> Result<Vec<f64>, DspError> {
    cfg.validate()?;
    let e = frame_rms_db(w, stft)?;
    let theta = percentile(&e, cfg.percentile) + cfg.offset_db;
    Ok(e.iter().map(|&x| 1.0 / (1.0 + (-(theta - x) / cfg.tau_db).exp())).collect())
}
