//! Mel-cepstral coefficient extraction.
//!
//! Orthonormal type-II DCT of the log-mel energies, keeping coefficients
//! 1..=40. The 0th (energy) coefficient is dropped, and the transform runs
//! over the channels whose filter actually collects energy, so the result is
//! invariant to global waveform gain: a gain shifts every live log-mel entry
//! by the same constant, which only the excluded 0th coefficient sees.

use ndarray::Array2;

use crate::audio::mel::{mel_filterbank, mel_spectrogram, MelSpectrogram, N_MELS};
use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const MCC_DIM: usize = 40;

/// Mel-cepstral coefficients, one row per frame, 40 columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MccSequence {
    pub frames: Array2<f64>,
}

impl MccSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Indices of mel channels with non-zero filter response. The lowest filter
/// falls between DC and the first FFT bin and never collects energy; its
/// log value is pinned to the floor and would break gain invariance.
fn active_channels() -> Vec<usize> {
    let bank = mel_filterbank();
    (0..N_MELS).filter(|&m| bank.row(m).iter().any(|&w| w != 0.0)).collect()
}

/// DCT-II basis restricted to rows 1..=40, orthonormal scaling.
fn dct_basis(n: usize) -> Array2<f64> {
    let scale = (2.0 / n as f64).sqrt();
    Array2::from_shape_fn((MCC_DIM, n), |(k, i)| {
        let kk = (k + 1) as f64;
        scale * (std::f64::consts::PI * kk * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    })
}

pub fn mcc_from_mel(mel: &MelSpectrogram) -> Result<MccSequence> {
    if mel.frames.ncols() != N_MELS {
        return Err(Error::ShapeMismatch(format!(
            "expected {N_MELS} mel channels, got {}",
            mel.frames.ncols()
        )));
    }
    if mel.frames.nrows() == 0 {
        return Err(Error::Eval("empty mel spectrogram".into()));
    }
    if mel.frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mel spectrogram".into()));
    }
    let channels = active_channels();
    let basis = dct_basis(channels.len());
    let t_frames = mel.frames.nrows();
    let mut out = Array2::<f64>::zeros((t_frames, MCC_DIM));
    for t in 0..t_frames {
        let row = mel.frames.row(t);
        for k in 0..MCC_DIM {
            let mut acc = 0.0;
            for (i, &m) in channels.iter().enumerate() {
                acc += basis[[k, i]] * f64::from(row[m]);
            }
            out[[t, k]] = acc;
        }
    }
    Ok(MccSequence { frames: out })
}

/// Extracts MCCs from a waveform with the same framing as the mel extractor.
pub fn extract_mcc(w: &Waveform) -> Result<MccSequence> {
    mcc_from_mel(&mel_spectrogram(w)?)
}
