//! Mono WAV input/output. Sample-rate mismatches are errors; nothing is resampled.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Pcm16,
    Float32,
}

/// Reads a mono 16-bit PCM or 32-bit float file recorded at `sample_rate`.
pub fn read_wav(path: impl AsRef<Path>, sample_rate: u32) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != sample_rate {
        return Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {sample_rate} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0).map_err(Error::from))
            .collect(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map_err(Error::from))
            .collect(),
        (fmt, bits) => Err(Error::Format(format!(
            "{}: unsupported encoding {fmt:?} {bits}-bit",
            path.display()
        ))),
    }
}

pub fn write_wav(
    path: impl AsRef<Path>,
    samples: &[f32],
    sample_rate: u32,
    encoding: WavEncoding,
) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        match encoding {
            WavEncoding::Pcm16 => {
                w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?
            }
            WavEncoding::Float32 => w.write_sample(s)?,
        }
    }
    w.finalize()?;
    Ok(())
}
