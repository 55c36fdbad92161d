//! Corpus manifest: the single source of truth for domain labels and
//! clean/noisy pairing. One JSON record per line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, mix_at_snr_detailed, save_waveform};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    Clean,
    Noisy,
}

impl DomainLabel {
    /// Class index used by classifiers and probes: clean = 0, noisy = 1.
    pub fn index(self) -> usize {
        match self {
            DomainLabel::Clean => 0,
            DomainLabel::Noisy => 1,
        }
    }
}

impl std::fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainLabel::Clean => write!(f, "clean"),
            DomainLabel::Noisy => write!(f, "noisy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub audio_path: String,
    pub speaker_id: String,
    pub domain: DomainLabel,
    /// Utterance id of the clean counterpart; self for clean entries.
    pub clean_pair_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

/// Checks the structural invariants: noisy ⟺ noise fields present, and every
/// clean_pair_id resolves to a clean entry.
pub fn validate_manifest(entries: &[ManifestEntry]) -> Result<()> {
    let by_id: BTreeMap<&str, &ManifestEntry> =
        entries.iter().map(|e| (e.utterance_id.as_str(), e)).collect();
    if by_id.len() != entries.len() {
        return Err(Error::Manifest("duplicate utterance_id".into()));
    }
    for e in entries {
        let has_noise = e.noise_type.is_some() && e.snr_db.is_some();
        let partial = e.noise_type.is_some() != e.snr_db.is_some();
        if partial {
            return Err(Error::Manifest(format!(
                "{}: noise_type and snr_db must be both present or both absent",
                e.utterance_id
            )));
        }
        match e.domain {
            DomainLabel::Noisy if !has_noise => {
                return Err(Error::Manifest(format!(
                    "{}: noisy entry without noise_type/snr_db",
                    e.utterance_id
                )))
            }
            DomainLabel::Clean if has_noise => {
                return Err(Error::Manifest(format!(
                    "{}: clean entry carries noise fields",
                    e.utterance_id
                )))
            }
            _ => {}
        }
        match by_id.get(e.clean_pair_id.as_str()) {
            Some(pair) if pair.domain == DomainLabel::Clean => {}
            Some(_) => {
                return Err(Error::Manifest(format!(
                    "{}: clean_pair_id {} is not a clean entry",
                    e.utterance_id, e.clean_pair_id
                )))
            }
            None => {
                return Err(Error::Manifest(format!(
                    "{}: clean_pair_id {} does not resolve",
                    e.utterance_id, e.clean_pair_id
                )))
            }
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)
            .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    validate_manifest(&entries)?;
    Ok(entries)
}

/// Settings for [`build_manifest`].
#[derive(Debug, Clone)]
pub struct BuildManifestConfig {
    /// Uniform SNR draw range in dB, low ≤ high.
    pub snr_range: (f64, f64),
    /// Fraction of noise files assigned to the augmentation (train) pool; the
    /// remainder is held out for building evaluation manifests with unseen
    /// noise. 1.0 uses every noise file.
    pub noise_train_fraction: f64,
    /// Noisy variants generated per clean utterance.
    pub augmentations: usize,
    pub seed: u64,
}

impl Default for BuildManifestConfig {
    fn default() -> Self {
        BuildManifestConfig {
            snr_range: (5.0, 20.0),
            noise_train_fraction: 1.0,
            augmentations: 1,
            seed: 0,
        }
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Speaker id convention: parent directory name when the utterance sits in a
/// subdirectory of the corpus root, otherwise the filename-stem prefix before
/// the first underscore.
fn speaker_of(path: &Path, root: &Path) -> String {
    let parent = path.parent().unwrap_or(root);
    if parent != root {
        if let Some(name) = parent.file_name() {
            return name.to_string_lossy().into_owned();
        }
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    stem.split('_').next().unwrap_or("unknown").to_string()
}

fn utterance_id_of(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    let no_ext = rel.with_extension("");
    no_ext
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("-")
}

/// Scans `clean_dir`, synthesizes noisy variants into `out_dir/noisy/`, and
/// returns one clean entry per utterance plus `augmentations` noisy entries,
/// each mixed with a sampled noise type at an SNR drawn from `snr_range`.
/// Deterministic given the seed.
pub fn build_manifest(
    clean_dir: &Path,
    noise_dir: &Path,
    out_dir: &Path,
    cfg: &BuildManifestConfig,
) -> Result<Vec<ManifestEntry>> {
    if cfg.snr_range.0 > cfg.snr_range.1 {
        return Err(Error::Config(format!(
            "snr range low {} exceeds high {}",
            cfg.snr_range.0, cfg.snr_range.1
        )));
    }
    let clean_files = wav_files(clean_dir)?;
    if clean_files.is_empty() {
        return Err(Error::Manifest(format!("no wav files under {}", clean_dir.display())));
    }
    let noise_files = wav_files(noise_dir)?;
    if noise_files.is_empty() && cfg.augmentations > 0 {
        return Err(Error::Manifest(format!("no wav files under {}", noise_dir.display())));
    }

    // Seeded split of noise files into train pool / held-out remainder.
    let mut pool: Vec<PathBuf> = noise_files.clone();
    pool.shuffle(&mut derive_rng(cfg.seed, "manifest/noise-split"));
    let train_count = ((pool.len() as f64) * cfg.noise_train_fraction).ceil() as usize;
    let pool = &pool[..train_count.clamp(usize::from(cfg.augmentations > 0), pool.len())];

    let noisy_dir = out_dir.join("noisy");
    if cfg.augmentations > 0 {
        std::fs::create_dir_all(&noisy_dir).map_err(|e| Error::io(&noisy_dir, e))?;
    }

    let noises: Vec<(String, crate::audio::Waveform)> = pool
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            load_waveform(p).map(|w| (name, w))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for file in &clean_files {
        let utt = utterance_id_of(file, clean_dir);
        let speaker = speaker_of(file, clean_dir);
        entries.push(ManifestEntry {
            utterance_id: utt.clone(),
            audio_path: file.to_string_lossy().into_owned(),
            speaker_id: speaker.clone(),
            domain: DomainLabel::Clean,
            clean_pair_id: utt.clone(),
            noise_type: None,
            snr_db: None,
        });
        if cfg.augmentations == 0 {
            continue;
        }
        let clean = load_waveform(file)?;
        let mut rng = derive_rng(cfg.seed, &format!("manifest/aug/{utt}"));
        // Without replacement while types last, so one utterance is not paired
        // with the same noise type twice.
        let mut order: Vec<usize> = (0..noises.len()).collect();
        order.shuffle(&mut rng);
        for a in 0..cfg.augmentations {
            let ni = if a < order.len() { order[a] } else { rng.random_range(0..noises.len()) };
            let (noise_name, noise) = &noises[ni];
            let snr = rng.random_range(cfg.snr_range.0..=cfg.snr_range.1);
            let mix = mix_at_snr_detailed(&clean, noise, snr, &mut rng)?;
            let noisy_id = format!("{utt}-{noise_name}-a{a}");
            let out_path = noisy_dir.join(format!("{noisy_id}.wav"));
            save_waveform(&out_path, &mix.waveform)?;
            entries.push(ManifestEntry {
                utterance_id: noisy_id,
                audio_path: out_path.to_string_lossy().into_owned(),
                speaker_id: speaker.clone(),
                domain: DomainLabel::Noisy,
                clean_pair_id: utt.clone(),
                noise_type: Some(noise_name.clone()),
                snr_db: Some(snr),
            });
        }
    }
    validate_manifest(&entries)?;
    Ok(entries)
}
