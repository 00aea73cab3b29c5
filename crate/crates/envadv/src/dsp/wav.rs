//! WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::StereoPolicy;
use crate::error::{Error, Result};

/// Decoded audio: mono float samples in [−1, 1] at a known rate.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a WAV file as mono float samples at `target_rate_hz`.
///
/// Integer PCM of any depth up to 32 bits and 32-bit float files are
/// accepted. Multichannel input is averaged to mono or rejected per
/// `stereo`; a differing sample rate is fixed by linear-interpolation
/// resampling.
pub fn load_waveform(path: &Path, stereo: StereoPolicy, target_rate_hz: u32) -> Result<Waveform> {
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: "file declares zero channels".into(),
        });
    }
    if channels > 1 && stereo == StereoPolicy::Error {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: format!("expected mono, found {channels} channels (stereo policy: error)"),
        });
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                message: format!("unsupported sample format {fmt:?} at {bits} bits"),
            })
        }
    };

    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };

    let samples = if spec.sample_rate == target_rate_hz {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, target_rate_hz)
    };
    Ok(Waveform {
        samples,
        sample_rate_hz: target_rate_hz,
    })
}

/// Duration in seconds from the WAV header alone, without decoding samples.
pub fn wav_duration_s(path: &Path) -> Result<f64> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    Ok(f64::from(reader.duration()) / f64::from(spec.sample_rate))
}

/// Writes mono samples as 16-bit PCM, clamping to [−1, 1].
pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate_hz: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

fn resample_linear(x: &[f32], src_hz: u32, dst_hz: u32) -> Vec<f32> {
    if x.is_empty() || src_hz == dst_hz {
        return x.to_vec();
    }
    let n_out = ((x.len() as u64 * u64::from(dst_hz) + u64::from(src_hz) / 2)
        / u64::from(src_hz)) as usize;
    let step = f64::from(src_hz) / f64::from(dst_hz);
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = (pos.floor() as usize).min(x.len() - 1);
            let i1 = (i0 + 1).min(x.len() - 1);
            let frac = (pos - i0 as f64) as f32;
            x[i0] + (x[i1] - x[i0]) * frac
        })
        .collect()
}
