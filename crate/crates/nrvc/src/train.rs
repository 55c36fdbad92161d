//! Training loop: uniform manifest sampling into fixed-length segment
//! batches, one joint Adam step per batch over all five submodules, JSONL
//! step logging and periodic checkpoints.
//!
//! Every random draw is derived from (seed, step index), so a run resumed
//! from a checkpoint consumes exactly the random stream an uninterrupted run
//! would have, and step records match bit for bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::audio::manifest::{validate_manifest, DomainLabel, ManifestEntry};
use crate::audio::mel::{mel_spectrogram, SAMPLE_RATE};
use crate::audio::{load_waveform, resample};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::model::{BatchItemRef, Model, ModelConfig};
use crate::nn::{adam_step, AdamConfig};
use crate::objectives::LossWeights;
use crate::rng::derive_rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub segment_frames: usize,
    /// Absolute step target: training stops once this many optimizer steps
    /// have been taken in total, so a resumed run continues toward it.
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            segment_frames: 128,
            max_steps: 1000,
            seed: 0,
            checkpoint_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !self.adam_epsilon.is_finite() || self.adam_epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "adam_epsilon must be positive, got {}",
                self.adam_epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.segment_frames == 0 {
            return Err(Error::Config("segment_frames must be at least 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reads a TOML training configuration; missing keys fall back to defaults,
/// unknown keys are rejected.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Mel features keyed by utterance id.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    feats: BTreeMap<String, Array2<f32>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, frames: Array2<f32>) {
        self.feats.insert(id.into(), frames);
    }

    pub fn get(&self, id: &str) -> Option<&Array2<f32>> {
        self.feats.get(id)
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    /// Loads audio for every entry and computes its spectrogram. Relative
    /// audio paths resolve against `base`.
    pub fn load(base: &Path, entries: &[ManifestEntry]) -> Result<Self> {
        let mut store = FeatureStore::new();
        for e in entries {
            let p = PathBuf::from(&e.audio_path);
            let p = if p.is_absolute() { p } else { base.join(p) };
            let wav = load_waveform(&p)?;
            let wav =
                if wav.sample_rate == SAMPLE_RATE { wav } else { resample(&wav, SAMPLE_RATE)? };
            let mel = mel_spectrogram(&wav)?;
            store.insert(e.utterance_id.clone(), mel.frames);
        }
        Ok(store)
    }
}

/// One logged optimizer step; `step` is the 1-based completed-step count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub dat_zc: f64,
    pub dat_zs: f64,
    pub total: f64,
    pub acc_zs: f64,
    pub acc_zc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub steps_run: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<StepRecord>,
}

struct BatchItem {
    input: Array2<f32>,
    target: Array2<f32>,
    domain: DomainLabel,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    entries: Vec<ManifestEntry>,
    features: FeatureStore,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, entries: Vec<ManifestEntry>, features: FeatureStore) -> Result<Self> {
        cfg.validate()?;
        Self::validate_inputs(&cfg, &entries, &features)?;
        let model = Model::new(&cfg.model, cfg.seed)?;
        Ok(Trainer { model, cfg, step: 0, entries, features })
    }

    /// Restores model weights, optimizer moments, configuration and step
    /// count from a checkpoint; training continues from there.
    pub fn from_checkpoint(
        path: &Path,
        entries: Vec<ManifestEntry>,
        features: FeatureStore,
    ) -> Result<Self> {
        Self::from_checkpoint_with(path, None, entries, features)
    }

    /// [`Trainer::from_checkpoint`] with an optional replacement config, so a
    /// resumed run can extend `max_steps` or change schedule settings. The
    /// model shape must match the checkpoint.
    pub fn from_checkpoint_with(
        path: &Path,
        override_cfg: Option<TrainConfig>,
        entries: Vec<ManifestEntry>,
        features: FeatureStore,
    ) -> Result<Self> {
        let (model, meta) = load_checkpoint(path)?;
        let cfg = match override_cfg {
            Some(c) => {
                c.validate()?;
                if c.model != meta.config.model {
                    return Err(Error::Checkpoint {
                        path: path.into(),
                        message: "replacement config changes the model shape".into(),
                    });
                }
                c
            }
            None => meta.config,
        };
        Self::validate_inputs(&cfg, &entries, &features)?;
        Ok(Trainer { model, cfg, step: meta.step, entries, features })
    }

    fn validate_inputs(
        cfg: &TrainConfig,
        entries: &[ManifestEntry],
        features: &FeatureStore,
    ) -> Result<()> {
        if entries.is_empty() {
            return Err(Error::Manifest("empty manifest".into()));
        }
        validate_manifest(entries)?;
        for e in entries {
            let feat = features.get(&e.utterance_id).ok_or_else(|| {
                Error::Manifest(format!("no features for utterance {}", e.utterance_id))
            })?;
            if feat.ncols() != cfg.model.num_mels {
                return Err(Error::Manifest(format!(
                    "utterance {}: {} mel channels, model expects {}",
                    e.utterance_id,
                    feat.ncols(),
                    cfg.model.num_mels
                )));
            }
            if feat.nrows() == 0 {
                return Err(Error::Manifest(format!("utterance {} has no frames", e.utterance_id)));
            }
            let pair = features.get(&e.clean_pair_id).ok_or_else(|| {
                Error::Manifest(format!("no features for clean pair {}", e.clean_pair_id))
            })?;
            if pair.nrows() != feat.nrows() {
                return Err(Error::Manifest(format!(
                    "utterance {}: {} frames but clean pair {} has {}",
                    e.utterance_id,
                    feat.nrows(),
                    e.clean_pair_id,
                    pair.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Uniformly samples entries and cuts aligned input/target segments.
    /// Short utterances are tiled (row i % frames); long ones get a random
    /// crop offset shared by input and target.
    fn make_batch(&self, rng: &mut ChaCha12Rng) -> Result<Vec<BatchItem>> {
        use rand::Rng;
        let seg = self.cfg.segment_frames;
        let mut items = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let e = &self.entries[rng.random_range(0..self.entries.len())];
            let input = self.features.get(&e.utterance_id).expect("validated");
            let target = self.features.get(&e.clean_pair_id).expect("validated");
            let frames = input.nrows();
            let (input, target) = if frames >= seg {
                let off = rng.random_range(0..=frames - seg);
                (
                    input.slice(s![off..off + seg, ..]).to_owned(),
                    target.slice(s![off..off + seg, ..]).to_owned(),
                )
            } else {
                let mut inp = Array2::zeros((seg, input.ncols()));
                let mut tgt = Array2::zeros((seg, target.ncols()));
                for i in 0..seg {
                    inp.row_mut(i).assign(&input.row(i % frames));
                    tgt.row_mut(i).assign(&target.row(i % frames));
                }
                (inp, tgt)
            };
            items.push(BatchItem { input, target, domain: e.domain });
        }
        Ok(items)
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let idx = self.step;
        let mut batch_rng = derive_rng(self.cfg.seed, &format!("batch/{idx}"));
        let mut eps_rng = derive_rng(self.cfg.seed, &format!("eps/{idx}"));
        let batch = self.make_batch(&mut batch_rng)?;
        let refs: Vec<BatchItemRef<'_>> = batch
            .iter()
            .map(|b| BatchItemRef { input: &b.input, target: &b.target, domain: b.domain })
            .collect();
        self.model.zero_grads();
        let stats =
            self.model.accumulate_step(&refs, &self.cfg.weights, Some(&mut eps_rng), idx)?;
        let adam = AdamConfig {
            lr: self.cfg.learning_rate as f32,
            beta1: self.cfg.adam_beta1 as f32,
            beta2: self.cfg.adam_beta2 as f32,
            eps: self.cfg.adam_epsilon as f32,
        };
        let t = idx + 1;
        self.model.for_each_param(&mut |_, p| adam_step(p, &adam, t));
        self.step = t;
        Ok(StepRecord {
            step: t,
            recon: stats.losses.recon,
            kl: stats.losses.kl,
            dat_zc: stats.losses.dat_zc,
            dat_zs: stats.losses.dat_zs,
            total: stats.losses.total,
            acc_zs: stats.acc_zs,
            acc_zc: stats.acc_zc,
        })
    }

    pub fn save_checkpoint_file(&mut self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            step: self.step,
            seed: self.cfg.seed,
            config: self.cfg.clone(),
        };
        save_checkpoint(path, &mut self.model, &meta)
    }

    fn checkpoint_name(&self) -> String {
        format!("checkpoint_{:06}.ckpt", self.step)
    }

    /// Runs until `max_steps`, appending one JSON line per step to
    /// `loss_log.jsonl` and checkpointing at the configured interval and at
    /// termination. With nothing left to run it still writes a checkpoint of
    /// the current state.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunSummary> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let run_meta = serde_json::json!({
            "config": self.cfg,
            "start_step": self.step,
            "manifest_entries": self.entries.len(),
        });
        let meta_path = out_dir.join("run_meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&run_meta).expect("serializable") + "\n",
        )
        .map_err(|e| Error::io(&meta_path, e))?;

        let log_path = out_dir.join("loss_log.jsonl");
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        let start = self.step;
        let mut last = None;
        let mut checkpoint = out_dir.join(self.checkpoint_name());
        if self.step >= self.cfg.max_steps {
            self.save_checkpoint_file(&checkpoint)?;
        }
        while self.step < self.cfg.max_steps {
            let rec = self.train_step()?;
            let line = serde_json::to_string(&rec).expect("serializable");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if self.step % self.cfg.checkpoint_interval == 0 || self.step >= self.cfg.max_steps {
                checkpoint = out_dir.join(self.checkpoint_name());
                self.save_checkpoint_file(&checkpoint)?;
            }
            if rec.step % 50 == 0 {
                log::info!(
                    "step {}: total {:.4} recon {:.4} acc_zs {:.2} acc_zc {:.2}",
                    rec.step,
                    rec.total,
                    rec.recon,
                    rec.acc_zs,
                    rec.acc_zc
                );
            }
            last = Some(rec);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        Ok(RunSummary {
            start_step: start,
            final_step: self.step,
            steps_run: self.step - start,
            checkpoint,
            log: log_path,
            last,
        })
    }
}
