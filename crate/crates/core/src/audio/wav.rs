use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a mono 16 kHz WAV file stored as 16-bit PCM or 32-bit float.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let name = path.display();
    let reader = WavReader::open(path).map_err(|e| Error::Input(format!("{name}: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!("{name}: {} channels, only mono is supported", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "{name}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>(),
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::Input(format!(
                "{name}: {bits}-bit {fmt:?} samples, expected 16-bit PCM or 32-bit float"
            )))
        }
    }
    .map_err(|e| Error::Input(format!("{name}: {e}")))?;
    Waveform::new(samples, SAMPLE_RATE)
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: bits, sample_format: fmt };
    let fail = |e: hound::Error| Error::Input(format!("{}: {e}", path.display()));
    let mut w = WavWriter::create(path, spec).map_err(fail)?;
    for &s in &wave.samples {
        match encoding {
            WavEncoding::Pcm16 => w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16),
            WavEncoding::Float32 => w.write_sample(s),
        }
        .map_err(fail)?;
    }
    w.finalize().map_err(fail)
}
