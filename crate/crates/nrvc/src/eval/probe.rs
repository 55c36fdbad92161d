//! Linear domain probe.
//!
//! Measures how linearly separable the clean/noisy domain label is in a
//! chosen representation. All kinds are sampled over the same sliding
//! windows: speaker embeddings of each window, content posterior means
//! averaged over each window, or raw mel averages. A logistic classifier
//! with deliberately minimal capacity is trained on an 80/20 split grouped by
//! source utterance, so noisy renders never share a side with their clean
//! counterpart. Accuracy near 0.5 certifies domain invariance; accuracy near
//! 1.0 certifies leakage.

use std::collections::BTreeMap;

use ndarray::s;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::audio::manifest::{DomainLabel, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::derive_rng;
use crate::train::FeatureStore;

pub const PROBE_WINDOW: usize = 32;
pub const PROBE_STRIDE: usize = 16;
pub const MIN_UTTERANCES_PER_DOMAIN: usize = 10;
const GD_ITERATIONS: usize = 400;
const GD_LEARNING_RATE: f64 = 0.5;
const GD_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Speaker,
    Content,
    Mel,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Speaker => "speaker",
            ProbeKind::Content => "content",
            ProbeKind::Mel => "mel",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(ProbeKind::Speaker),
            "content" => Ok(ProbeKind::Content),
            "mel" => Ok(ProbeKind::Mel),
            other => {
                Err(Error::Usage(format!("unknown probe kind `{other}` (speaker, content, mel)")))
            }
        }
    }
}

/// One representation sample with the labels the probe and the projection
/// export need.
#[derive(Debug, Clone)]
pub struct ProbeVector {
    pub features: Vec<f32>,
    pub domain: DomainLabel,
    /// Split-group key; all renders of one source utterance share it.
    pub group: String,
    pub speaker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub kind: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

fn window_starts(frames: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = PROBE_STRIDE;
    while s + PROBE_WINDOW <= frames {
        starts.push(s);
        s += PROBE_STRIDE;
    }
    starts
}

/// Extracts the representation vectors for every manifest entry. `model` may
/// be `None` only for the raw-mel kind.
pub fn collect_probe_vectors(
    model: Option<&Model>,
    entries: &[ManifestEntry],
    features: &FeatureStore,
    kind: ProbeKind,
) -> Result<Vec<ProbeVector>> {
    if model.is_none() && kind != ProbeKind::Mel {
        return Err(Error::Probe(format!("{} probe requires a model checkpoint", kind.name())));
    }
    let mut out = Vec::new();
    for e in entries {
        let mel = features
            .get(&e.utterance_id)
            .ok_or_else(|| Error::Probe(format!("no features for {}", e.utterance_id)))?;
        let frames = mel.nrows();
        let push = |out: &mut Vec<ProbeVector>, features: Vec<f32>| {
            out.push(ProbeVector {
                features,
                domain: e.domain,
                group: e.clean_pair_id.clone(),
                speaker: e.speaker_id.clone(),
            });
        };
        match kind {
            ProbeKind::Speaker => {
                let model = model.unwrap();
                for s0 in window_starts(frames) {
                    let end = (s0 + PROBE_WINDOW).min(frames);
                    let win = mel.slice(s![s0..end, ..]);
                    let emb = model.speaker_encode(&win)?;
                    push(&mut out, emb.vector.to_vec());
                }
            }
            ProbeKind::Content => {
                let model = model.unwrap();
                let post = model.content_encode(&mel.view())?;
                for s0 in window_starts(frames) {
                    let end = (s0 + PROBE_WINDOW).min(frames);
                    let win = post.mean.slice(s![s0..end, ..]);
                    let n = (end - s0) as f32;
                    let mean: Vec<f32> =
                        (0..win.ncols()).map(|c| win.column(c).sum() / n).collect();
                    push(&mut out, mean);
                }
            }
            ProbeKind::Mel => {
                for s0 in window_starts(frames) {
                    let end = (s0 + PROBE_WINDOW).min(frames);
                    let win = mel.slice(s![s0..end, ..]);
                    let n = (end - s0) as f32;
                    let mean: Vec<f32> =
                        (0..mel.ncols()).map(|c| win.column(c).sum() / n).collect();
                    push(&mut out, mean);
                }
            }
        }
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-30.0, 30.0)).exp())
}

fn accuracy(xs: &[Vec<f64>], ys: &[f64], w: &[f64], b: f64) -> f64 {
    let mut hits = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        let pred = if sigmoid(z) > 0.5 { 1.0 } else { 0.0 };
        if pred == y {
            hits += 1;
        }
    }
    hits as f64 / xs.len() as f64
}

/// Splits by group, balances classes, standardizes on the train side, fits a
/// logistic classifier by full-batch gradient descent, and reports accuracy.
pub fn probe_report(vectors: &[ProbeVector], kind_name: &str, seed: u64) -> Result<ProbeReport> {
    if vectors.is_empty() {
        return Err(Error::Probe("no probe vectors".into()));
    }
    let dim = vectors[0].features.len();
    if vectors.iter().any(|v| v.features.len() != dim) {
        return Err(Error::ShapeMismatch("probe vectors have mixed dimensions".into()));
    }

    // Group inventory: which domains each group contributes.
    let mut groups: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for v in vectors {
        let g = groups.entry(v.group.as_str()).or_insert((false, false));
        match v.domain {
            DomainLabel::Clean => g.0 = true,
            DomainLabel::Noisy => g.1 = true,
        }
    }
    // Stratified group shuffle: mixed groups already carry both domains;
    // single-domain groups are split per domain so both sides keep both.
    let mut test_groups: Vec<&str> = Vec::new();
    let buckets: [(&str, fn((bool, bool)) -> bool); 3] = [
        ("mixed", |d| d.0 && d.1),
        ("clean", |d| d.0 && !d.1),
        ("noisy", |d| !d.0 && d.1),
    ];
    for (label, keep) in buckets {
        let mut bucket: Vec<&str> =
            groups.iter().filter(|(_, &d)| keep(d)).map(|(&g, _)| g).collect();
        if bucket.is_empty() {
            continue;
        }
        bucket.shuffle(&mut derive_rng(seed, &format!("probe/split/{label}")));
        let n_test = bucket.len().div_ceil(5);
        test_groups.extend(&bucket[..n_test]);
    }

    let is_test = |v: &ProbeVector| test_groups.contains(&v.group.as_str());
    let mut sides: [Vec<&ProbeVector>; 2] = [Vec::new(), Vec::new()];
    for v in vectors {
        sides[usize::from(is_test(v))].push(v);
    }

    // Class-balance each side by subsampling the majority domain.
    let mut balanced: [Vec<&ProbeVector>; 2] = [Vec::new(), Vec::new()];
    for (side, name) in [(0, "train"), (1, "test")] {
        let mut by_class: [Vec<&ProbeVector>; 2] = [Vec::new(), Vec::new()];
        for &v in &sides[side] {
            by_class[v.domain.index()].push(v);
        }
        let target = by_class[0].len().min(by_class[1].len());
        if target == 0 {
            return Err(Error::Probe(format!(
                "{name} split lacks one domain entirely; need paired clean/noisy groups"
            )));
        }
        for class in &mut by_class {
            class.shuffle(&mut derive_rng(seed, &format!("probe/balance/{name}")));
            class.truncate(target);
            balanced[side].extend(class.iter().copied());
        }
    }

    // Standardize with train statistics.
    let train_n = balanced[0].len() as f64;
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for v in &balanced[0] {
        for (m, &x) in mean.iter_mut().zip(&v.features) {
            *m += f64::from(x);
        }
    }
    for m in &mut mean {
        *m /= train_n;
    }
    for v in &balanced[0] {
        for ((s, m), &x) in var.iter_mut().zip(&mean).zip(&v.features) {
            let d = f64::from(x) - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / train_n).sqrt().max(1e-6)).collect();
    let standardize = |vs: &[&ProbeVector]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs = vs
            .iter()
            .map(|v| {
                v.features
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (f64::from(x) - mean[i]) / std[i])
                    .collect()
            })
            .collect();
        let ys = vs.iter().map(|v| v.domain.index() as f64).collect();
        (xs, ys)
    };
    let (train_x, train_y) = standardize(&balanced[0]);
    let (test_x, test_y) = standardize(&balanced[1]);

    // Full-batch logistic regression from zero init; deterministic.
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let n = train_x.len() as f64;
    for _ in 0..GD_ITERATIONS {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for (x, &y) in train_x.iter().zip(&train_y) {
            let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let r = sigmoid(z) - y;
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
            gb += r;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= GD_LEARNING_RATE * (g / n + GD_L2 * *wi);
        }
        b -= GD_LEARNING_RATE * gb / n;
    }

    Ok(ProbeReport {
        kind: kind_name.to_string(),
        train_accuracy: accuracy(&train_x, &train_y, &w, b),
        test_accuracy: accuracy(&test_x, &test_y, &w, b),
        train_samples: train_x.len(),
        test_samples: test_x.len(),
    })
}

/// End-to-end probe over a manifest: representation extraction, grouped
/// split, linear classification.
pub fn domain_probe(
    model: Option<&Model>,
    entries: &[ManifestEntry],
    features: &FeatureStore,
    kind: ProbeKind,
    seed: u64,
) -> Result<ProbeReport> {
    for domain in [DomainLabel::Clean, DomainLabel::Noisy] {
        let count = entries.iter().filter(|e| e.domain == domain).count();
        if count < MIN_UTTERANCES_PER_DOMAIN {
            return Err(Error::Probe(format!(
                "{count} {domain} utterances; the probe needs at least {MIN_UTTERANCES_PER_DOMAIN} per domain"
            )));
        }
    }
    let vectors = collect_probe_vectors(model, entries, features, kind)?;
    probe_report(&vectors, kind.name(), seed)
}
