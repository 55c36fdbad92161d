//! Shared fixtures for integration tests: a deterministic synthetic corpus
//! of two "speakers" (distinct fundamentals and harmonic colors) plus two
//! synthetic noise types, written as 16 kHz mono WAV files.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use nrvc::audio::{save_waveform, Waveform};
use nrvc::rng::derive_rng;

pub const SAMPLE_RATE: u32 = 16000;

/// Harmonic-stack utterance with vibrato, a slow amplitude arc and short
/// pauses, so frames vary the way speech frames do.
pub fn synth_utterance(f0: f64, seed: u64, label: &str, secs: f64) -> Waveform {
    let mut rng = derive_rng(seed, label);
    let len = (secs * f64::from(SAMPLE_RATE)) as usize;
    let f0 = f0 * rng.random_range(0.96..1.04);
    let vibrato_rate = rng.random_range(2.0..3.5);
    let amps: Vec<f64> = (1..=6).map(|h| rng.random_range(0.4..1.0) / f64::from(h)).collect();
    // Two short pauses at random positions.
    let pauses: Vec<(usize, usize)> = (0..2)
        .map(|_| {
            let start = rng.random_range(0..len.saturating_sub(1200).max(1));
            (start, start + rng.random_range(500..1100))
        })
        .collect();
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / f64::from(SAMPLE_RATE);
        let freq = f0 * (1.0 + 0.02 * (2.0 * PI * vibrato_rate * t).sin());
        phase += freq / f64::from(SAMPLE_RATE);
        let mut v = 0.0;
        for (h, amp) in amps.iter().enumerate() {
            v += amp * (2.0 * PI * (h + 1) as f64 * phase).sin();
        }
        let arc = (PI * (i as f64 + 0.5) / len as f64).sin().sqrt();
        let gate = if pauses.iter().any(|&(a, b)| i >= a && i < b) { 0.03 } else { 1.0 };
        samples.push(v * arc * gate);
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    let samples = samples.into_iter().map(|v| (0.5 * v / peak) as f32).collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

/// "rumble": brown noise under a deep 4 Hz tremolo.
/// "crackle": dense ringing impulses over a faint brown-noise floor.
///
/// Both kinds shift per-channel feature statistics, and both keep a bursty
/// local-energy envelope that survives per-channel statistics normalization,
/// so every representation retains a detectable trace of either kind until
/// training removes it.
pub fn synth_noise(kind: &str, seed: u64, secs: f64) -> Waveform {
    let mut rng = derive_rng(seed, &format!("noise/{kind}"));
    let len = (secs * f64::from(SAMPLE_RATE)) as usize;
    let mut samples = Vec::with_capacity(len);
    match kind {
        "rumble" => {
            let sr = f64::from(SAMPLE_RATE);
            let mut brown = 0.0f64;
            for i in 0..len {
                brown = 0.995 * brown + 0.2 * rng.random_range(-1.0..1.0);
                let am = 1.0 + 0.9 * (2.0 * PI * 4.0 * i as f64 / sr).sin();
                samples.push(brown * am);
            }
        }
        "crackle" => {
            let sr = f64::from(SAMPLE_RATE);
            let mut brown = 0.0f64;
            let mut ring = 0.0f64;
            let mut phase = 0.0f64;
            let mut freq = 2000.0f64;
            let mut decay = 0.999f64;
            for _ in 0..len {
                brown = 0.99 * brown + 0.03 * rng.random_range(-1.0..1.0);
                if rng.random_range(0.0..1.0) < 60.0 / sr {
                    let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                    ring = sign * rng.random_range(0.5..1.0);
                    freq = rng.random_range(1200.0..3400.0);
                    decay = (-1.0 / (sr * rng.random_range(0.002..0.008))).exp();
                    phase = 0.0;
                }
                phase += 2.0 * PI * freq / sr;
                samples.push(0.6 * brown + ring * phase.sin());
                ring *= decay;
            }
        }
        other => panic!("unknown noise kind {other}"),
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    let samples = samples.into_iter().map(|v| (0.5 * v / peak) as f32).collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

pub struct ToyCorpus {
    pub clean_dir: PathBuf,
    pub noise_dir: PathBuf,
}

/// Writes `clean/spka`, `clean/spkb` (fundamentals 120 / 230 Hz) and two
/// noise files under `root`.
pub fn build_toy_corpus(root: &Path, utts_per_speaker: usize, secs: f64, seed: u64) -> ToyCorpus {
    let clean_dir = root.join("clean");
    let noise_dir = root.join("noise");
    for (name, f0) in [("spka", 120.0), ("spkb", 230.0)] {
        let dir = clean_dir.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..utts_per_speaker {
            let w = synth_utterance(f0, seed, &format!("utt/{name}/{i}"), secs);
            save_waveform(&dir.join(format!("utt{i:02}.wav")), &w).unwrap();
        }
    }
    std::fs::create_dir_all(&noise_dir).unwrap();
    for kind in ["rumble", "crackle"] {
        let w = synth_noise(kind, seed, 2.0);
        save_waveform(&noise_dir.join(format!("{kind}.wav")), &w).unwrap();
    }
    ToyCorpus { clean_dir, noise_dir }
}
