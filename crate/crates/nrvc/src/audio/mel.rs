//! Log-mel spectrogram extraction and the binary feature cache.
//!
//! Fixed analysis setup: 16 kHz input, 50 ms window (800 samples), 12.5 ms hop
//! (200 samples), 1024-point FFT, periodic Hann window, center padding with
//! reflection, 256 triangular mel filters spanning 0-8000 Hz, natural-log
//! compression floored at 1e-10.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;
pub const WIN_LENGTH: usize = 800;
pub const HOP_LENGTH: usize = 200;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 256;
pub const FMIN: f64 = 0.0;
pub const FMAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Log-mel energies, one row per frame, 256 columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Frame count under center padding: 1 + floor(len / hop).
pub fn frame_count(num_samples: usize) -> usize {
    1 + num_samples / HOP_LENGTH
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter bank (N_MELS, N_FFT/2 + 1), HTK mel scale, no area norm.
pub fn mel_filterbank() -> Array2<f32> {
    let n_bins = N_FFT / 2 + 1;
    let mel_lo = hz_to_mel(FMIN);
    let mel_hi = hz_to_mel(FMAX);
    let points: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut bank = Array2::<f32>::zeros((N_MELS, n_bins));
    for m in 0..N_MELS {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * f64::from(SAMPLE_RATE) / N_FFT as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            bank[[m, k]] = w as f32;
        }
    }
    bank
}

/// Reflected sample index for center padding; bounces until in range.
pub(crate) fn reflect(mut i: i64, len: i64) -> usize {
    debug_assert!(len >= 2);
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * len - 2 - i;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Magnitude-squared STFT, shape (frames, N_FFT/2 + 1).
pub(crate) fn power_spectrogram(w: &Waveform) -> Array2<f64> {
    let len = w.samples.len() as i64;
    let pad = (WIN_LENGTH / 2) as i64;
    let n_frames = frame_count(w.samples.len());
    let n_bins = N_FFT / 2 + 1;
    let window = hann_window(WIN_LENGTH);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut power = Array2::<f64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..n_frames {
        let start = t as i64 * HOP_LENGTH as i64 - pad;
        for n in 0..WIN_LENGTH {
            let s = f64::from(w.samples[reflect(start + n as i64, len)]);
            buf[n] = Complex::new(s * window[n], 0.0);
        }
        for slot in buf.iter_mut().skip(WIN_LENGTH) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (k, row) in power.row_mut(t).iter_mut().enumerate() {
            *row = buf[k].norm_sqr();
        }
    }
    power
}

/// Extracts the (F, 256) log-mel spectrogram; F = 1 + floor(len / hop).
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "mel extraction expects {SAMPLE_RATE} Hz input, got {} Hz (resample first)",
            w.sample_rate
        )));
    }
    if w.samples.len() < HOP_LENGTH {
        return Err(Error::Audio(format!(
            "waveform of {} samples is shorter than one hop ({HOP_LENGTH})",
            w.samples.len()
        )));
    }
    let power = power_spectrogram(w);
    let bank = mel_filterbank();
    let n_frames = power.nrows();
    let mut mel = Array2::<f32>::zeros((n_frames, N_MELS));
    for t in 0..n_frames {
        let p = power.row(t);
        for m in 0..N_MELS {
            let row = bank.row(m);
            let mut e = 0.0f64;
            for (k, &w_mk) in row.iter().enumerate() {
                if w_mk != 0.0 {
                    e += f64::from(w_mk) * p[k];
                }
            }
            mel[[t, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(MelSpectrogram { frames: mel })
}

/// Writes the cache format: two little-endian u32 dims then row-major f32.
pub fn write_feature_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut out = Vec::with_capacity(8 + mel.frames.len() * 4);
    out.extend_from_slice(&(mel.frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames.ncols() as u32).to_le_bytes());
    for &v in mel.frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Audio(format!("feature cache {} truncated", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Audio(format!(
            "feature cache {}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Audio(format!("feature cache {}: {e}", path.display())))?;
    Ok(MelSpectrogram { frames })
}
