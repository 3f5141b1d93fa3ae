use std::path::Path;

use super::DspError;

/// Decodes a PCM16 WAV file to mono samples in `[-1, 1]`.
///
/// Integer samples are scaled by `1/32768`, so `0x7FFF` maps just below
/// one and `0x8000` to exactly `-1`. Multi-channel frames are averaged.
pub fn decode_wav(path: &Path) -> Result<(Vec<f32>, u32), DspError> {
    let decode_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => DspError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => DspError::Unsupported {
            path: path.to_path_buf(),
            detail: "codec not supported".into(),
        },
        other => DspError::Decode {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut reader = hound::WavReader::open(path).map_err(decode_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::Unsupported {
            path: path.to_path_buf(),
            detail: format!("{:?} with {} bits per sample", spec.sample_format, spec.bits_per_sample),
        });
    }
    let channels = usize::from(spec.channels.max(1));
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(decode_err)?;
    if raw.len() < channels {
        return Err(DspError::Empty {
            path: path.to_path_buf(),
        });
    }
    let scale = 1.0 / (32768.0 * channels as f32);
    let mono = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| f32::from(s)).sum::<f32>() * scale)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes mono samples as 16-bit PCM, clamping to full scale.
pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), DspError> {
    let io = |e: hound::Error| DspError::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// Linear-interpolation resampler. Returns the input unchanged when the
/// rates match.
pub fn resample_linear(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    assert!(from_hz > 0 && to_hz > 0, "sample rates must be positive");
    if from_hz == to_hz || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = f64::from(from_hz) / f64::from(to_hz);
    let out_len = ((samples.len() as f64) / ratio).floor().max(1.0) as usize;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let left = (pos.floor() as usize).min(last);
            let right = (left + 1).min(last);
            let frac = (pos - left as f64) as f32;
            samples[left] + (samples[right] - samples[left]) * frac
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rates_are_identity() {
        let x = vec![0.1, -0.2, 0.3];
        assert_eq!(resample_linear(&x, 16_000, 16_000), x);
    }

    #[test]
    fn constant_signal_stays_constant() {
        let x = vec![0.25f32; 4800];
        let y = resample_linear(&x, 48_000, 16_000);
        assert_eq!(y.len(), 1600);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let up = resample_linear(&x, 16_000, 44_100);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn downsampled_sine_tracks_analytic_sine() {
        let from = 48_000u32;
        let to = 16_000u32;
        let f = 1000.0f64;
        let x: Vec<f32> = (0..from as usize)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / f64::from(from)).sin() as f32)
            .collect();
        let y = resample_linear(&x, from, to);
        let reference: Vec<f64> = (0..y.len())
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / f64::from(to)).sin())
            .collect();
        let dot: f64 = y.iter().zip(&reference).map(|(&a, &b)| f64::from(a) * b).sum();
        let ny: f64 = y.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
        let nr: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(dot / (ny * nr) > 0.999);
    }

    #[test]
    fn full_scale_square_wave_decodes_to_unit_magnitude() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("square.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..8 {
            w.write_sample(if i % 2 == 0 { i16::MAX } else { i16::MIN }).unwrap();
        }
        w.finalize().unwrap();
        let (x, sr) = decode_wav(&path).unwrap();
        assert_eq!(sr, 8000);
        for (i, v) in x.iter().enumerate() {
            if i % 2 == 0 {
                assert!((v - 1.0).abs() < 1e-4);
            } else {
                assert_eq!(*v, -1.0);
            }
        }
    }

    #[test]
    fn stereo_is_averaged_and_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for &(l, r) in &[(1000i16, 3000i16), (-400, 400), (0, -32768)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let (x, _) = decode_wav(&path).unwrap();
        assert_eq!(x, vec![2000.0 / 32768.0, 0.0, -0.5]);
    }

    #[test]
    fn rejects_24_bit_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(decode_wav(&path), Err(DspError::Unsupported { .. })));

        let empty = dir.path().join("empty.wav");
        write_wav_pcm16(&empty, &[], 16000).unwrap();
        assert!(matches!(decode_wav(&empty), Err(DspError::Empty { .. })));

        let missing = dir.path().join("missing.wav");
        assert!(matches!(decode_wav(&missing), Err(DspError::Io { .. })));
    }
}
