//! Seeded synthetic scene corpus.
//!
//! Every scene owns three "events": two tone chords and one band-limited
//! noise burst at scene-specific frequencies. A clip is a shared
//! broadband background plus each of its scene's events at random offsets,
//! and half the time a quieter event borrowed from another scene.

use std::path::{Path, PathBuf};

use crosstask_core::dsp::write_wav_pcm16;
use crosstask_core::manifest::{DatasetManifest, ManifestRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

const SCENE_NAMES: [&str; 10] = [
    "airport", "bus", "metro", "park", "shopping_mall", "street", "tram", "beach", "library", "office",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_scenes: usize,
    pub clips_per_scene: usize,
    pub seed: u64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub folds: u32,
    pub sample_rate: u32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_scenes: 3,
            clips_per_scene: 40,
            seed: 0,
            min_seconds: 1.0,
            max_seconds: 10.0,
            folds: 4,
            sample_rate: 16_000,
        }
    }
}

#[derive(Debug, Clone)]
enum Event {
    Chord { freqs: Vec<f64> },
    NoiseBand { lo: f64, hi: f64 },
}

fn scene_name(i: usize) -> String {
    SCENE_NAMES
        .get(i)
        .map_or_else(|| format!("scene_{i:02}"), |s| s.to_string())
}

/// Frequency slots a fifth of an octave apart from 150 Hz. Scenes draw
/// their event frequencies from a shuffled pool of slots so that no two
/// scenes share one until the pool runs out.
fn slot_hz(slot: usize) -> f64 {
    150.0 * 2f64.powf(slot as f64 / 5.0)
}

const N_SLOTS: usize = 24;

fn scene_events(rng: &mut ChaCha8Rng, slots: &mut Vec<usize>) -> Vec<Event> {
    let mut next = |rng: &mut ChaCha8Rng| {
        if slots.is_empty() {
            slots.extend(0..N_SLOTS);
            slots.shuffle(rng);
        }
        slots.pop().expect("refilled above")
    };
    let mut events = Vec::new();
    for _ in 0..2 {
        let root = slot_hz(next(rng));
        let ratios = [1.0, 1.25, 1.5, 2.0];
        let n = rng.random_range(2..=3);
        events.push(Event::Chord {
            freqs: ratios[..n].iter().map(|r| root * r).collect(),
        });
    }
    let center = slot_hz(next(rng)) * 1.5;
    let width = center * rng.random_range(0.15..0.3);
    events.push(Event::NoiseBand {
        lo: center - width / 2.0,
        hi: center + width / 2.0,
    });
    events
}

/// Sum of random-phase sinusoids spread over `[lo, hi]`.
fn band_noise(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize, sr: f64) -> Vec<f32> {
    let partials: Vec<(f64, f64)> = (0..24)
        .map(|_| (rng.random_range(lo..hi), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let norm = 1.0 / (partials.len() as f64).sqrt();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let v: f64 = partials
                .iter()
                .map(|(f, p)| (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            (v * norm) as f32
        })
        .collect()
}

fn render_event(rng: &mut ChaCha8Rng, event: &Event, n: usize, sr: f64) -> Vec<f32> {
    match event {
        Event::Chord { freqs } => {
            let detune = rng.random_range(0.98..1.02);
            let phases: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let norm = 1.0 / freqs.len() as f64;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let v: f64 = freqs
                        .iter()
                        .zip(&phases)
                        .map(|(f, p)| (std::f64::consts::TAU * f * detune * t + p).sin())
                        .sum();
                    (v * norm) as f32
                })
                .collect()
        }
        Event::NoiseBand { lo, hi } => band_noise(rng, *lo, *hi, n, sr),
    }
}

/// Adds `event` into `clip` at a random offset under a short fade envelope.
fn place(rng: &mut ChaCha8Rng, clip: &mut [f32], event: &Event, gain: f32, sr: f64) {
    let len = ((rng.random_range(0.3..1.0) * sr) as usize).min(clip.len());
    let start = rng.random_range(0..=clip.len() - len);
    let wave = render_event(rng, event, len, sr);
    let fade = ((0.02 * sr) as usize).max(1).min(len / 2).max(1);
    for (i, v) in wave.iter().enumerate() {
        let env = (i.min(len - 1 - i) as f32 / fade as f32).min(1.0);
        clip[start + i] += gain * env * v;
    }
}

fn render_clip(rng: &mut ChaCha8Rng, scenes: &[Vec<Event>], scene: usize, opts: &SynthOptions) -> Vec<f32> {
    let sr = f64::from(opts.sample_rate);
    let seconds = if opts.max_seconds > opts.min_seconds {
        rng.random_range(opts.min_seconds..opts.max_seconds)
    } else {
        opts.min_seconds
    };
    let n = ((seconds * sr) as usize).max(1);
    let mut clip = band_noise(rng, 60.0, 0.45 * sr, n, sr);
    let bg = rng.random_range(0.03..0.08f32);
    clip.iter_mut().for_each(|v| *v *= bg);
    for e in &scenes[scene] {
        for _ in 0..rng.random_range(1..=(seconds.ceil() as usize).max(1)) {
            let gain = rng.random_range(0.15..0.35);
            place(rng, &mut clip, e, gain, sr);
        }
    }
    if scenes.len() > 1 && rng.random_bool(0.5) {
        let other = (scene + rng.random_range(1..scenes.len())) % scenes.len();
        let e = &scenes[other][rng.random_range(0..scenes[other].len())];
        let gain = rng.random_range(0.03..0.1);
        place(rng, &mut clip, e, gain, sr);
    }
    clip.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    clip
}

/// Writes `scene/scene_NNN.wav` files and `manifest.csv` under `out_dir`.
/// Folds are assigned round-robin within each scene.
pub fn cmd_synth(out_dir: &Path, opts: &SynthOptions) -> Result<DatasetManifest, CliError> {
    if opts.n_scenes < 2 || opts.clips_per_scene == 0 || opts.folds == 0 {
        return Err(CliError::Usage(
            "synth needs at least 2 scenes, 1 clip per scene and 1 fold".into(),
        ));
    }
    if !(opts.min_seconds > 0.0 && opts.max_seconds >= opts.min_seconds) {
        return Err(CliError::Usage("clip durations must satisfy 0 < min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut slots = Vec::new();
    let scenes: Vec<Vec<Event>> = (0..opts.n_scenes)
        .map(|_| scene_events(&mut rng, &mut slots))
        .collect();
    let mut records = Vec::new();
    for (s, _) in scenes.iter().enumerate() {
        let name = scene_name(s);
        std::fs::create_dir_all(out_dir.join(&name)).map_err(|e| CliError::io(out_dir, e))?;
        for i in 0..opts.clips_per_scene {
            let rel = PathBuf::from(&name).join(format!("{name}_{i:03}.wav"));
            let mut clip_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let clip = render_clip(&mut clip_rng, &scenes, s, opts);
            let path = out_dir.join(&rel);
            write_wav_pcm16(&path, &clip, opts.sample_rate).map_err(|e| CliError::Data(e.to_string()))?;
            records.push(ManifestRecord {
                path: rel,
                scene: name.clone(),
                fold: (i as u32 % opts.folds) + 1,
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    manifest
        .write(&out_dir.join("manifest.csv"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(manifest)
}
