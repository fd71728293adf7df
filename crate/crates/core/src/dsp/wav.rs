use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultichannelWave;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Pcm16,
    #[default]
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelWave> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported sample format {fmt:?} with {bits} bits"),
            })
        }
    };
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            out[c].push(v);
        }
    }
    MultichannelWave::new(out, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &MultichannelWave, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: wave.channel_count() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Pcm16 => hound::SampleFormat::Int,
            SampleFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for n in 0..wave.len() {
        for c in 0..wave.channel_count() {
            let v = wave.channel(c)[n];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(wav_err)?;
                }
                SampleFormat::Float32 => writer.write_sample(v as f32).map_err(wav_err)?,
            }
        }
    }
    writer.finalize().map_err(wav_err)
}
