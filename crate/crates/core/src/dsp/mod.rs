//! Audio front end: PCM16 WAV decoding, linear resampling and 64-bin
//! log-mel energies.

mod cache;
mod mel;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache};
pub use mel::{
    hann_window, hz_to_mel, log_mel, mel_center_frequencies, mel_filterbank, mel_to_hz,
    stft_power, FeatureMatrix, LogMelConfig,
};
pub use wav::{decode_wav, resample_linear, write_wav_pcm16};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("unsupported audio format in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("{path} contains no samples")]
    Empty { path: PathBuf },
    #[error("signal has {got} samples, one frame needs {needed}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("mel filter {index} covers no FFT bin; lower n_mels or raise fft resolution")]
    EmptyFilter { index: usize },
    #[error("bad feature cache {path}: {detail}")]
    Cache { path: PathBuf, detail: String },
}
