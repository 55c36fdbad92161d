//! Mel-cepstral distortion between two coefficient sequences.
//!
//! Frames are aligned by dynamic time warping under the Euclidean local
//! distance; the reported value is the mean over the warping path of
//! (10 / ln 10) * sqrt(2 * sum of squared per-dimension differences).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::eval::mcc::{MccSequence, MCC_DIM};

pub const DB_FACTOR: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Debug, Clone, PartialEq)]
pub struct McdDetail {
    pub mcd_db: f64,
    /// Number of aligned frame pairs on the warping path.
    pub path_length: usize,
    /// Total accumulated Euclidean distance along the path.
    pub path_cost: f64,
}

fn local_distances(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ta, tb) = (a.nrows(), b.nrows());
    Array2::from_shape_fn((ta, tb), |(i, j)| {
        let mut s = 0.0;
        for k in 0..a.ncols() {
            let d = a[[i, k]] - b[[j, k]];
            s += d * d;
        }
        s.sqrt()
    })
}

/// Minimum-cost monotone alignment and its total cost. Backtracking prefers
/// diagonal, then the first-sequence step, then the second, on exact ties.
pub(crate) fn dtw_path(dist: &Array2<f64>) -> (Vec<(usize, usize)>, f64) {
    let (ta, tb) = dist.dim();
    let mut acc = Array2::<f64>::zeros((ta, tb));
    for i in 0..ta {
        for j in 0..tb {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[[0, j - 1]],
                (_, 0) => acc[[i - 1, 0]],
                _ => acc[[i - 1, j - 1]].min(acc[[i - 1, j]]).min(acc[[i, j - 1]]),
            };
            acc[[i, j]] = dist[[i, j]] + best;
        }
    }
    let mut path = Vec::with_capacity(ta + tb);
    let (mut i, mut j) = (ta - 1, tb - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        let (ni, nj) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[[i - 1, j - 1]];
            let up = acc[[i - 1, j]];
            let left = acc[[i, j - 1]];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    let total = acc[[ta - 1, tb - 1]];
    (path, total)
}

pub fn mcd(conv: &MccSequence, targ: &MccSequence) -> Result<McdDetail> {
    for (name, s) in [("converted", conv), ("target", targ)] {
        if s.frames.nrows() == 0 {
            return Err(Error::Eval(format!("{name} MCC sequence is empty")));
        }
        if s.frames.ncols() != MCC_DIM {
            return Err(Error::ShapeMismatch(format!(
                "{name} MCC sequence has {} dims, expected {MCC_DIM}",
                s.frames.ncols()
            )));
        }
    }
    let dist = local_distances(&conv.frames, &targ.frames);
    let (path, _) = dtw_path(&dist);
    let mut cost = 0.0;
    for &(i, j) in &path {
        cost += dist[[i, j]];
    }
    let mcd_db = DB_FACTOR * std::f64::consts::SQRT_2 * cost / path.len() as f64;
    Ok(McdDetail { mcd_db, path_length: path.len(), path_cost: cost })
}
