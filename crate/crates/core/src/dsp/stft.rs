use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{frame_count, frames, DspError};
use crate::audio::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
}

impl Default for StftConfig {
    /// 25 ms Hann window, 10 ms hop, 512-point FFT at 16 kHz.
    fn default() -> Self {
        Self { window_len: 400, hop_len: 160, n_fft: 512 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if !(0 < self.hop_len && self.hop_len <= self.window_len && self.window_len <= self.n_fft) {
            return Err(DspError::InvalidConfig(format!(
                "need 0 < hop_len ({}) <= window_len ({}) <= n_fft ({})",
                self.hop_len, self.window_len, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(DspError::InvalidConfig(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Periodic Hann window of `window_len` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()).collect()
    }
}

/// One-sided STFT, `frames x (n_fft/2 + 1)` complex values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
    pub hop_seconds: f64,
    /// Centre time of frame 0.
    pub origin_seconds: f64,
}

impl Spectrogram {
    pub fn frame(&self, n: usize) -> &[Complex<f64>] {
        &self.data[n * self.bins..(n + 1) * self.bins]
    }
}

/// Hann-windowed, zero-padded STFT without centring.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram, DspError> {
    cfg.validate()?;
    let n_frames = frame_count(w.len(), cfg)?;
    let window = cfg.window();
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.bins();
    let mut data = Vec::with_capacity(n_frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for frame in frames(w, cfg)? {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, (&s, &h)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            b.re = s * h;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    let sr = w.sample_rate() as f64;
    Ok(Spectrogram { frames: n_frames, bins, data, hop_seconds: cfg.hop_len as f64 / sr, origin_seconds: cfg.window_len as f64 / 2.0 / sr })
}
