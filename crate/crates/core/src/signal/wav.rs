use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Reads a PCM WAV file (16-bit integer or 32-bit float).
///
/// Multi-channel files keep only the first channel.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    if channels > 1 {
        log::warn!(
            "{}: {channels} channels, keeping the first one",
            path.display()
        );
    }

    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{bits}-bit {format:?} samples"),
            })
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::MalformedWav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes mono 32-bit float PCM.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in w.samples() {
        writer
            .write_sample(s as f32)
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(reason) => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        },
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "unsupported WAV format".into(),
        },
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}
