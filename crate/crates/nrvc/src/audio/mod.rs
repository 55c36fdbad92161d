//! Waveform I/O, resampling and SNR-controlled noise mixing.

pub mod manifest;
pub mod mel;

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean squared sample value over the full segment.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
        sum / self.samples.len() as f64
    }
}

/// Reads a mono 16-bit PCM WAV file, normalizing samples to [-1, 1].
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav { path: path.into(), message: other.to_string() },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            message: format!("{} channels", spec.channels),
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            message: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav { path: path.into(), message: e.to_string() })?;
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Writes a waveform as mono 16-bit PCM. Values outside [-1, 1] saturate.
pub fn save_waveform(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Wav { path: path.into(), message: e.to_string() })?;
    for &s in &w.samples {
        let q = (f64::from(s) * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Wav { path: path.into(), message: e.to_string() })?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Wav { path: path.into(), message: e.to_string() })?;
    Ok(())
}

/// Sample-rate conversion with a Hann-windowed sinc kernel, 32 zero crossings
/// per side. Kernel weights are renormalized per output sample so constant
/// signals pass through exactly.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Audio("resample target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let in_rate = f64::from(w.sample_rate);
    let out_rate = f64::from(target_rate);
    let out_len = (w.samples.len() as f64 * out_rate / in_rate).round() as usize;
    // Cutoff at the lower Nyquist; when downsampling the kernel stretches by 1/c.
    let c = (out_rate / in_rate).min(1.0);
    let zeros = 32.0;
    let half_width = zeros / c;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 * in_rate / out_rate;
        let lo = (t - half_width).ceil() as i64;
        let hi = (t + half_width).floor() as i64;
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for k in lo..=hi {
            let u = t - k as f64;
            let win = 0.5 * (1.0 + (std::f64::consts::PI * u / half_width).cos());
            let h = c * sinc(c * u) * win;
            norm += h;
            if k >= 0 && (k as usize) < w.samples.len() {
                acc += f64::from(w.samples[k as usize]) * h;
            }
        }
        out.push(if norm.abs() > 1e-12 { (acc / norm) as f32 } else { 0.0 });
    }
    Ok(Waveform { samples: out, sample_rate: target_rate })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Outcome of [`mix_at_snr_detailed`]: the mixture plus the quantities needed
/// to reconstruct it from its parts.
#[derive(Debug, Clone)]
pub struct MixResult {
    pub waveform: Waveform,
    /// Gain applied to the noise segment.
    pub gain: f64,
    /// Offset into the noise clip when it was longer than the clean signal.
    pub noise_offset: usize,
    /// Number of samples clipped to [-1, 1] after summation.
    pub clipped: usize,
}

/// Adds noise to a clean signal at an exact SNR.
///
/// The gain is g = sqrt(P_clean / (P_noise · 10^(snr/10))) with P the mean
/// squared value over the full segment. Longer noise is cropped at a random
/// offset drawn from `rng`; shorter noise is tiled with wraparound. The sum is
/// clipped to [-1, 1] (a warning is logged when that happens) so the clean and
/// noisy signals stay sample-aligned.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    mix_at_snr_detailed(clean, noise, snr_db, rng).map(|m| m.waveform)
}

/// [`mix_at_snr`] variant exposing gain, offset and clip count.
pub fn mix_at_snr_detailed(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<MixResult> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Audio(format!(
            "sample rate mismatch: clean {} Hz vs noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if clean.is_empty() {
        return Err(Error::Audio("clean signal is empty".into()));
    }
    let noise_offset = if noise.len() > clean.len() {
        rng.random_range(0..=noise.len() - clean.len())
    } else {
        0
    };
    let segment: Vec<f32> = (0..clean.len())
        .map(|i| {
            if noise.is_empty() {
                0.0
            } else {
                noise.samples[(noise_offset + i) % noise.len()]
            }
        })
        .collect();
    let seg = Waveform { samples: segment, sample_rate: clean.sample_rate };
    let p_clean = clean.power();
    let p_noise = seg.power();
    if p_noise <= 0.0 {
        return Err(Error::Audio("noise segment has zero power".into()));
    }
    if p_clean <= 0.0 {
        return Err(Error::Audio("clean signal has zero power".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut clipped = 0usize;
    let samples: Vec<f32> = clean
        .samples
        .iter()
        .zip(&seg.samples)
        .map(|(&c, &n)| {
            let v = c + (gain * f64::from(n)) as f32;
            if v > 1.0 {
                clipped += 1;
                1.0
            } else if v < -1.0 {
                clipped += 1;
                -1.0
            } else {
                v
            }
        })
        .collect();
    if clipped > 0 {
        log::warn!("mix_at_snr clipped {clipped} samples at snr {snr_db} dB");
    }
    Ok(MixResult {
        waveform: Waveform { samples, sample_rate: clean.sample_rate },
        gain,
        noise_offset,
        clipped,
    })
}
