use std::path::PathBuf;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::DspError;
use crate::tensor::Tensor;

/// Front-end parameters. Defaults give 64 log-mel bins from 25 ms Hann
/// frames every 10 ms at 16 kHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogMelConfig {
    pub sample_rate_hz: u32,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Upper band edge; Nyquist when absent.
    pub fmax_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            fmin_hz: 0.0,
            fmax_hz: None,
            log_floor: 1e-10,
        }
    }
}

impl LogMelConfig {
    pub fn frame_samples(&self) -> usize {
        (f64::from(self.sample_rate_hz) * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (f64::from(self.sample_rate_hz) * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.frame_samples().next_power_of_two()
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size() / 2 + 1
    }

    pub fn fmax(&self) -> f64 {
        self.fmax_hz.unwrap_or(f64::from(self.sample_rate_hz) / 2.0)
    }

    /// Frames produced for a signal of `num_samples`.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        let frame = self.frame_samples();
        if num_samples < frame {
            0
        } else {
            1 + (num_samples - frame) / self.hop_samples()
        }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::Config(m));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.hop_samples() == 0 || self.frame_samples() == 0 {
            return bad("frame and hop must each span at least one sample".into());
        }
        if self.hop_ms > self.frame_len_ms {
            return bad(format!("hop {} ms exceeds frame {} ms", self.hop_ms, self.frame_len_ms));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax() && self.fmax() <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got {} and {}",
                self.fmin_hz,
                self.fmax()
            ));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the canonical text form.
    pub fn digest(&self) -> u64 {
        let text = toml::to_string(self).unwrap_or_default();
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Log-mel energies of one clip, `[T, n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor<f32>,
    pub source: Option<PathBuf>,
    pub config_hash: u64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed power spectra `|FFT|²`, shape `[T, fft_size/2 + 1]`.
pub fn stft_power(samples: &[f32], config: &LogMelConfig) -> Result<Tensor<f64>, DspError> {
    config.validate()?;
    let frame = config.frame_samples();
    let hop = config.hop_samples();
    let n_fft = config.fft_size();
    let bins = config.n_bins();
    let t = config.frame_count(samples.len());
    if t == 0 {
        return Err(DspError::TooShort {
            needed: frame,
            got: samples.len(),
        });
    }
    let window = hann_window(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(t * bins);
    for f in 0..t {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < frame {
                Complex::new(f64::from(samples[start + i]) * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Tensor::new(&[t, bins], out).expect("frame count and bin count agree"))
}

/// Filter centre frequencies in Hz, uniformly spaced on the mel scale.
pub fn mel_center_frequencies(config: &LogMelConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin_hz);
    let hi = hz_to_mel(config.fmax());
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    (1..=config.n_mels)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Triangular mel filters, shape `[fft_size/2 + 1, n_mels]`.
pub fn mel_filterbank(config: &LogMelConfig) -> Result<Tensor<f64>, DspError> {
    config.validate()?;
    let lo = hz_to_mel(config.fmin_hz);
    let hi = hz_to_mel(config.fmax());
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let bins = config.n_bins();
    let bin_hz = f64::from(config.sample_rate_hz) / config.fft_size() as f64;
    let mut weights = vec![0.0; bins * config.n_mels];
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut mass = 0.0;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f < center {
                (f - left) / (center - left)
            } else if f >= center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            weights[k * config.n_mels + m] = w;
            mass += w;
        }
        if mass <= 0.0 {
            return Err(DspError::EmptyFilter { index: m });
        }
    }
    Ok(Tensor::new(&[bins, config.n_mels], weights).expect("filterbank dims"))
}

/// `log(max(power · filterbank, log_floor))`, shape `[T, n_mels]`.
pub fn log_mel(samples: &[f32], config: &LogMelConfig) -> Result<FeatureMatrix, DspError> {
    let power = stft_power(samples, config)?;
    let bank = mel_filterbank(config)?;
    let t = power.shape()[0];
    let n_mels = config.n_mels;
    let mut out = Vec::with_capacity(t * n_mels);
    for f in 0..t {
        let row = power.row(f);
        for m in 0..n_mels {
            let energy: f64 = row
                .iter()
                .zip(bank.data()[m..].iter().step_by(n_mels))
                .map(|(p, w)| p * w)
                .sum();
            out.push(energy.max(config.log_floor).ln() as f32);
        }
    }
    Ok(FeatureMatrix {
        frames: Tensor::new(&[t, n_mels], out).expect("feature dims"),
        source: None,
        config_hash: config.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_front_end_geometry() {
        let c = LogMelConfig::default();
        assert_eq!(c.frame_samples(), 400);
        assert_eq!(c.hop_samples(), 160);
        assert_eq!(c.fft_size(), 512);
        assert_eq!(c.n_bins(), 257);
        assert_eq!(c.frame_count(16_000), 98);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = LogMelConfig {
            hop_ms: 30.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.hop_ms = 10.0;
        c.fmax_hz = Some(9000.0);
        assert!(c.validate().is_err());
        c.fmax_hz = None;
        c.n_mels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn too_many_mels_leaves_an_empty_filter() {
        let c = LogMelConfig {
            n_mels: 256,
            ..Default::default()
        };
        assert!(matches!(mel_filterbank(&c), Err(DspError::EmptyFilter { .. })));
    }

    #[test]
    fn short_signal_is_rejected() {
        let c = LogMelConfig::default();
        assert!(matches!(
            stft_power(&[0.0; 399], &c),
            Err(DspError::TooShort { needed: 400, got: 399 })
        ));
    }
}
