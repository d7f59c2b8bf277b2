use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioError, Waveform};

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        // the file is already open, so read failures mean a short or broken RIFF structure
        hound::Error::IoError(io) => AudioError::MalformedHeader(io.to_string()),
        hound::Error::FormatError(msg) => AudioError::MalformedHeader(msg.into()),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("only PCM integer and 32-bit float WAV are supported".into()),
        hound::Error::TooWide => AudioError::UnsupportedEncoding("sample width above 32 bits".into()),
        hound::Error::InvalidSampleFormat => AudioError::UnsupportedEncoding("invalid sample format".into()),
        hound::Error::UnfinishedSample => AudioError::MalformedHeader("data chunk ends mid-sample".into()),
    }
}

fn map_write(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => map_hound(other),
    }
}

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float) into a mono
/// waveform. Channels are averaged per frame; integers are scaled by
/// `2^(bits-1)`.
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let file = File::open(path)?;
    let reader = WavReader::new(BufReader::new(file)).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::MalformedHeader("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f64 * scale)).collect::<Result<_, _>>().map_err(map_hound)?
        }
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(map_hound)?,
        (fmt, bits) => return Err(AudioError::UnsupportedEncoding(format!("{fmt:?} with {bits} bits"))),
    };
    if interleaved.len() < channels {
        return Err(AudioError::EmptyAudio);
    }
    let mono: Vec<f64> = interleaved.chunks_exact(channels).map(|frame| frame.iter().sum::<f64>() / channels as f64).collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV. Samples are scaled by 32768, rounded and
/// clipped, so decoding a file written from decoded 16-bit data is exact.
pub fn write_wav_i16(path: &Path, w: &Waveform) -> Result<(), AudioError> {
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut writer = WavWriter::create(path, spec).map_err(map_write)?;
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(map_write)?;
    }
    writer.finalize().map_err(map_write)
}
