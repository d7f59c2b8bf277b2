//! Band-limited rational resampling with a Kaiser-windowed sinc kernel.

use super::Waveform;

const TAPS: usize = 64;
const HALF: f64 = (TAPS / 2) as f64;
const KAISER_BETA: f64 = 8.0;
/// Cutoff as a fraction of the lower of the two Nyquist rates.
const ROLLOFF: f64 = 0.95;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Taps for one fractional phase; tap `j` weights input sample `base + j - 31`.
fn phase_kernel(frac: f64, cutoff: f64, i0_beta: f64) -> [f64; TAPS] {
    let mut h = [0.0; TAPS];
    for (j, tap) in h.iter_mut().enumerate() {
        let x = (j as f64 - (HALF - 1.0)) - frac;
        let r = x / HALF;
        if r.abs() >= 1.0 {
            continue;
        }
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
        *tap = 2.0 * cutoff * sinc(2.0 * cutoff * x) * window;
    }
    let total: f64 = h.iter().sum();
    if total.abs() > 1e-12 {
        h.iter_mut().for_each(|t| *t /= total);
    }
    h
}

/// Resamples to `target_rate` with a 64-tap Kaiser-windowed sinc per output
/// phase. Output length is `round(len * target / source)`; equal rates return
/// the input unchanged.
///
/// Panics if `target_rate` is zero.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    let source_rate = w.sample_rate();
    if source_rate == target_rate {
        return w.clone();
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let input = w.samples();
    let out_len = ((input.len() as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    let cutoff = 0.5 * ROLLOFF * (up as f64 / down as f64).min(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);

    let mut kernels: Vec<Option<Box<[f64; TAPS]>>> = vec![None; up as usize];
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as isize;
        let phase = (pos % up) as usize;
        let kernel = kernels[phase].get_or_insert_with(|| Box::new(phase_kernel(phase as f64 / up as f64, cutoff, i0_beta)));
        let mut acc = 0.0;
        for (j, &h) in kernel.iter().enumerate() {
            let idx = base + j as isize - (TAPS as isize / 2 - 1);
            if idx >= 0 && (idx as usize) < input.len() {
                acc += h * input[idx as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate).expect("resampled output is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    #[test]
    fn equal_rates_are_identity() {
        let w = Waveform::new((0..1000).map(|i| (i as f64 * 0.37).sin()).collect(), 16000).unwrap();
        let r = resample(&w, 16000);
        assert_eq!(
            r.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn length_follows_rate_ratio() {
        let w = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        let r = resample(&w, 16000);
        assert!((r.len() as i64 - 16000).abs() <= 1);
        let w = Waveform::new(vec![0.1; 44101], 44100).unwrap();
        assert_eq!(resample(&w, 16000).len(), (44101.0f64 * 16000.0 / 44100.0).round() as usize);
    }

    #[test]
    fn sine_peak_survives_44100_to_16000() {
        let sr = 44100.0;
        let w = Waveform::new((0..44100).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr).sin()).collect(), 44100).unwrap();
        let r = resample(&w, 16000);
        assert_eq!(r.len(), 16000);
        let p = power_spectrum(r.samples());
        let peak = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        // 16000-point FFT at 16 kHz: one bin per Hz
        assert!((peak as f64 - 440.0).abs() <= 1.0, "peak at {peak} Hz");
    }

    #[test]
    fn round_trip_through_double_rate_keeps_passband_energy() {
        let r = 8000u32;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Waveform::new((0..8000).map(|_| rng.random_range(-0.5..0.5)).collect(), r).unwrap();
        let back = resample(&resample(&w, 2 * r), r);
        assert_eq!(back.len(), w.len());
        // skip the kernel's edge transient
        let trim = 64;
        let a = power_spectrum(&w.samples()[trim..w.len() - trim]);
        let b = power_spectrum(&back.samples()[trim..back.len() - trim]);
        let n = w.len() - 2 * trim;
        let limit = (0.4 * r as f64 / r as f64 * n as f64) as usize;
        let bands = 8;
        for band in 0..bands {
            let (lo, hi) = (1 + band * limit / bands, 1 + (band + 1) * limit / bands);
            let ea: f64 = a[lo..hi].iter().sum();
            let eb: f64 = b[lo..hi].iter().sum();
            let db = 10.0 * (eb / ea).log10();
            assert!(db.abs() < 1.0, "band {band}: {db:.3} dB");
        }
    }

    #[test]
    fn bessel_matches_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) and I0(8)
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-12);
        assert!((bessel_i0(8.0) - 427.56411572180474).abs() < 1e-9);
    }
}
