use serde::{Deserialize, Serialize};

use super::{DspError, Spectrogram};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Power floor applied before the natural log.
    pub eps_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { n_mels: 64, f_min: 50.0, f_max: 8000.0, eps_floor: 1e-10 }
    }
}

/// Triangular filters, `n_mels x (n_fft/2 + 1)`, rows ordered by centre.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub sample_rate: u32,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Builds `n_mels` triangular filters whose edges and centres are uniformly
/// spaced on the mel scale between `f_min` and `f_max`; each filter peaks at 1
/// at its centre frequency.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sr: u32, f_min: f64, f_max: f64) -> Result<MelFilterbank, DspError> {
    if n_mels < 2 {
        return Err(DspError::InvalidConfig(format!("n_mels must be >= 2, got {n_mels}")));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= sr as f64 / 2.0) {
        return Err(DspError::InvalidConfig(format!("need 0 <= f_min ({f_min}) < f_max ({f_max}) <= sr/2")));
    }
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sr as f64 / n_fft as f64;
            let w = ((f - l) / (c - l)).min((r - f) / (r - c));
            if w > 0.0 {
                weights[m * n_bins + k] = w;
            }
        }
    }
    let fb = MelFilterbank { weights, n_mels, n_bins, sample_rate: sr, centers_hz: edges[1..=n_mels].to_vec() };
    if let Some(m) = (0..n_mels).find(|&m| fb.row(m).iter().all(|&w| w == 0.0)) {
        return Err(DspError::InvalidConfig(format!("mel filter {m} covers no FFT bin; lower n_mels or raise n_fft")));
    }
    Ok(fb)
}

/// Frames x mel bins, natural-log power.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub values: Vec<f64>,
    pub hop_seconds: f64,
    pub origin_seconds: f64,
}

impl LogMelSpectrogram {
    pub fn frame(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_mels..(n + 1) * self.n_mels]
    }
}

/// `S(m, n) = ln(max(sum_k |X(k, n)|^2 H_m(k), eps_floor))`.
pub fn log_mel(x: &Spectrogram, fb: &MelFilterbank, eps_floor: f64) -> Result<LogMelSpectrogram, DspError> {
    if x.bins != fb.n_bins {
        return Err(DspError::ShapeMismatch(format!("spectrogram has {} bins, filterbank {}", x.bins, fb.n_bins)));
    }
    let mut values = Vec::with_capacity(x.frames * fb.n_mels);
    for n in 0..x.frames {
        let power: Vec<f64> = x.frame(n).iter().map(|c| c.norm_sqr()).collect();
        for m in 0..fb.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(h, p)| h * p).sum();
            values.push(e.max(eps_floor).ln());
        }
    }
    Ok(LogMelSpectrogram { frames: x.frames, n_mels: fb.n_mels, values, hop_seconds: x.hop_seconds, origin_seconds: x.origin_seconds })
}
