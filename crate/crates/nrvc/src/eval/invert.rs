//! Spectrogram-to-waveform inversion.
//!
//! Log-mel energies are mapped back to linear power through the ridge
//! pseudo-inverse of the mel filter bank, then iterative phase reconstruction
//! (Griffin-Lim) recovers a waveform through the same STFT framing the
//! extractor uses. Output length is (T - 1) * hop samples, within one hop of
//! T * hop.

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::mel::{
    frame_count, hann_window, mel_filterbank, reflect, MelSpectrogram, HOP_LENGTH, N_FFT, N_MELS,
    SAMPLE_RATE, WIN_LENGTH,
};
use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const GRIFFIN_LIM_ITERATIONS: usize = 60;

const N_BINS: usize = N_FFT / 2 + 1;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, j]] = s.max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    l
}

/// Solves L Lᵀ x = b given the Cholesky factor L.
fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Minimum-norm mel inversion: power = Mᵀ (M Mᵀ + ridge I)⁻¹ mel_power,
/// clamped to non-negative. The ridge keeps the Gram matrix invertible even
/// though the lowest filter has no bin support.
struct MelInverter {
    bank: Array2<f64>,
    chol: Array2<f64>,
}

impl MelInverter {
    fn new() -> Self {
        let bank = mel_filterbank().mapv(f64::from);
        let mut gram = bank.dot(&bank.t());
        let ridge = 1e-8 * gram.diag().sum().max(1.0) / N_MELS as f64;
        for i in 0..N_MELS {
            gram[[i, i]] += ridge;
        }
        let chol = cholesky(&gram);
        MelInverter { bank, chol }
    }

    fn linear_power(&self, mel_power: &Array1<f64>) -> Array1<f64> {
        let u = chol_solve(&self.chol, mel_power);
        let mut p = self.bank.t().dot(&u);
        p.mapv_inplace(|v| v.max(0.0));
        p
    }
}

struct Stft {
    window: Vec<f64>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Stft {
    fn new() -> Self {
        let mut planner = FftPlanner::<f64>::new();
        Stft {
            window: hann_window(WIN_LENGTH),
            fwd: planner.plan_fft_forward(N_FFT),
            inv: planner.plan_fft_inverse(N_FFT),
        }
    }

    /// Complex STFT with the extractor's framing (center padding, reflection).
    fn analyze(&self, samples: &[f64]) -> Array2<Complex<f64>> {
        let len = samples.len() as i64;
        let pad = (WIN_LENGTH / 2) as i64;
        let n_frames = frame_count(samples.len());
        let mut spec = Array2::zeros((n_frames, N_BINS));
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for t in 0..n_frames {
            let start = t as i64 * HOP_LENGTH as i64 - pad;
            for (n, slot) in buf.iter_mut().enumerate().take(WIN_LENGTH) {
                let s = samples[reflect(start + n as i64, len)];
                *slot = Complex::new(s * self.window[n], 0.0);
            }
            for slot in buf.iter_mut().skip(WIN_LENGTH) {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..N_BINS {
                spec[[t, k]] = buf[k];
            }
        }
        spec
    }

    /// Weighted overlap-add inverse; returns (T - 1) * hop samples.
    fn synthesize(&self, spec: &Array2<Complex<f64>>) -> Vec<f64> {
        let t_frames = spec.nrows();
        let pad = WIN_LENGTH / 2;
        let out_len = (t_frames - 1) * HOP_LENGTH;
        let buf_len = out_len + WIN_LENGTH;
        let mut acc = vec![0.0f64; buf_len];
        let mut wsq = vec![0.0f64; buf_len];
        let mut frame = vec![Complex::new(0.0, 0.0); N_FFT];
        for t in 0..t_frames {
            for k in 0..N_BINS {
                frame[k] = spec[[t, k]];
            }
            for k in N_BINS..N_FFT {
                frame[k] = spec[[t, N_FFT - k]].conj();
            }
            self.inv.process(&mut frame);
            let base = t * HOP_LENGTH;
            for n in 0..WIN_LENGTH {
                let v = frame[n].re / N_FFT as f64;
                acc[base + n] += v * self.window[n];
                wsq[base + n] += self.window[n] * self.window[n];
            }
        }
        (0..out_len)
            .map(|i| {
                let j = i + pad;
                if wsq[j] > 1e-9 {
                    acc[j] / wsq[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Reconstructs a 16 kHz waveform from a log-mel spectrogram. Deterministic:
/// the phase is initialized to zero, not sampled.
pub fn invert_to_waveform(mel: &MelSpectrogram) -> Result<Waveform> {
    if mel.frames.ncols() != N_MELS {
        return Err(Error::ShapeMismatch(format!(
            "expected {N_MELS} mel channels, got {}",
            mel.frames.ncols()
        )));
    }
    if mel.frames.nrows() < 2 {
        return Err(Error::Eval(format!(
            "inversion needs at least 2 frames, got {}",
            mel.frames.nrows()
        )));
    }
    if mel.frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mel spectrogram".into()));
    }
    let t_frames = mel.frames.nrows();
    let inverter = MelInverter::new();
    let mut magnitude = Array2::<f64>::zeros((t_frames, N_BINS));
    for (t, row) in mel.frames.rows().into_iter().enumerate() {
        let mel_power = row.mapv(f64::from).mapv(f64::exp);
        let p = inverter.linear_power(&mel_power);
        for k in 0..N_BINS {
            magnitude[[t, k]] = p[k].sqrt();
        }
    }
    let stft = Stft::new();
    let mut spec = magnitude.mapv(|m| Complex::new(m, 0.0));
    for _ in 0..GRIFFIN_LIM_ITERATIONS {
        let x = stft.synthesize(&spec);
        let re = stft.analyze(&x);
        for ((t, k), s) in spec.indexed_iter_mut() {
            let norm = re[[t, k]].norm();
            *s = if norm > 1e-12 {
                re[[t, k]] * (magnitude[[t, k]] / norm)
            } else {
                Complex::new(magnitude[[t, k]], 0.0)
            };
        }
    }
    let samples = stft
        .synthesize(&spec)
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Waveform { samples, sample_rate: SAMPLE_RATE })
}
