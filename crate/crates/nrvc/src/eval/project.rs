//! Plot-ready 2-D projection of representation vectors onto their top two
//! principal components.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::audio::manifest::DomainLabel;
use crate::error::{Error, Result};
use crate::eval::probe::ProbeVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPoint {
    pub x: f64,
    pub y: f64,
    pub domain: DomainLabel,
    pub speaker: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectionPoint>,
    /// Fraction of total variance captured by the two components.
    pub variance_captured: f64,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
pub(crate) fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::<f64>::eye(n);
    let fro: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[[p, q]] * a[[p, q]])
            .sum();
        if off <= 1e-24 * fro.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[[row, i]];
        }
    }
    (values, vectors)
}

/// Flips an eigenvector so its largest-magnitude component is positive,
/// making the projection orientation deterministic.
fn canonical_sign(v: &mut Array1<f64>) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

pub fn project_vectors(vectors: &[ProbeVector]) -> Result<Projection> {
    if vectors.len() < 3 {
        return Err(Error::Usage(format!(
            "projection needs at least 3 vectors, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].features.len();
    if dim == 0 || vectors.iter().any(|v| v.features.len() != dim) {
        return Err(Error::ShapeMismatch("projection vectors have mixed dimensions".into()));
    }
    let n = vectors.len();
    let mut x = Array2::<f64>::zeros((n, dim));
    for (i, v) in vectors.iter().enumerate() {
        for (j, &f) in v.features.iter().enumerate() {
            x[[i, j]] = f64::from(f);
        }
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    for mut row in x.rows_mut() {
        row -= &mean;
    }
    let cov = x.t().dot(&x) / (n as f64 - 1.0);
    let total: f64 = cov.diag().sum();
    if total <= 1e-24 {
        return Err(Error::Eval("rank-0 data: all vectors identical".into()));
    }
    let (values, vecs) = jacobi_eigen(cov);
    let mut v1 = vecs.column(0).to_owned();
    canonical_sign(&mut v1);
    let mut v2 = if dim > 1 { vecs.column(1).to_owned() } else { Array1::zeros(dim) };
    canonical_sign(&mut v2);
    let lam1 = values[0].max(0.0);
    let lam2 = if dim > 1 { values[1].max(0.0) } else { 0.0 };
    let points = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| ProjectionPoint {
            x: x.row(i).dot(&v1),
            y: x.row(i).dot(&v2),
            domain: v.domain,
            speaker: v.speaker.clone(),
        })
        .collect();
    Ok(Projection { points, variance_captured: (lam1 + lam2) / total })
}

/// Writes the table with header x,y,domain,speaker.
pub fn write_projection_csv(path: &Path, projection: &Projection) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Eval(e.to_string()))?;
    writer
        .write_record(["x", "y", "domain", "speaker"])
        .map_err(|e| Error::Eval(e.to_string()))?;
    for p in &projection.points {
        writer
            .write_record([
                format!("{}", p.x),
                format!("{}", p.y),
                p.domain.to_string(),
                p.speaker.clone(),
            ])
            .map_err(|e| Error::Eval(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
