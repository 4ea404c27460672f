use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// On-disk PCM encoding for [`save_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    #[default]
    Int16,
    Float32,
}

const I16_SCALE: f64 = 32768.0;

/// Read a 16-bit integer or 32-bit float WAV file. Multichannel input is
/// downmixed by channel mean.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedEncoding("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / I16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.len() < channels {
        return Err(Error::invalid(format!("{}: zero-length audio", path.display())));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Write a mono WAV. The file appears atomically: data goes to a sibling
/// temporary file that is renamed on success.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    if w.is_empty() {
        return Err(Error::invalid("refusing to write an empty waveform"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Int16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Int16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(&tmp, spec).map_err(wav_err)?;
    for &s in w.samples() {
        match encoding {
            WavEncoding::Int16 => {
                let q = (s * I16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}
