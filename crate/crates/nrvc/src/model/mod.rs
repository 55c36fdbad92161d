//! Model assembly: speaker encoder, content encoder, decoder and two
//! domain classifier heads joined by gradient reversal, plus the batched
//! forward/backward pass that routes each loss term to its submodules.
//!
//! Gradient routing contract:
//! - decoder parameters see only the reconstruction term,
//! - the speaker encoder sees reconstruction plus the reversed speaker-domain
//!   term,
//! - the content encoder sees reconstruction, the posterior KL and the
//!   reversed content-domain term,
//! - each classifier head sees only its own domain term, un-reversed.

pub mod checkpoint;
mod content;
mod decoder;
mod speaker;

pub use content::{ContentCache, ContentEncoder, LOG_VAR_CLAMP};
pub use decoder::{Decoder, DecoderCache};
pub use speaker::SpeakerEncoder;

use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::manifest::DomainLabel;
use crate::error::{Error, Result};
use crate::nn::{argmax_accuracy, grl, grl_backward, softmax_ce, Dense, Param};
use crate::objectives::{kl_loss, recon_loss, total_loss, LossBreakdown, LossWeights};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_mels: usize,
    pub speaker_dim: usize,
    pub content_dim: usize,
    /// Scale applied to gradients flowing back through the reversal layer.
    pub grl_lambda: f64,
    pub bank_channels: usize,
    pub speaker_channels: usize,
    pub content_channels: usize,
    pub decoder_channels: usize,
    /// When false the decoder cell sees zero previous-frame input instead of
    /// the shifted target, and inference is fully parallel.
    pub autoregressive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_mels: crate::audio::mel::N_MELS,
            speaker_dim: 128,
            content_dim: 128,
            grl_lambda: 0.1,
            bank_channels: 8,
            speaker_channels: 64,
            content_channels: 64,
            decoder_channels: 64,
            autoregressive: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_mels", self.num_mels),
            ("speaker_dim", self.speaker_dim),
            ("content_dim", self.content_dim),
            ("bank_channels", self.bank_channels),
            ("speaker_channels", self.speaker_channels),
            ("content_channels", self.content_channels),
            ("decoder_channels", self.decoder_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.grl_lambda.is_finite() || self.grl_lambda < 0.0 {
            return Err(Error::Config(format!(
                "grl_lambda must be finite and non-negative, got {}",
                self.grl_lambda
            )));
        }
        Ok(())
    }
}

/// Utterance-level speaker representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Array1<f32>,
}

/// Per-frame diagonal Gaussian over the content code; both arrays are
/// (frames, content_dim) and the log variance is already clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentPosterior {
    pub mean: Array2<f32>,
    pub log_variance: Array2<f32>,
}

/// A draw from the content posterior, (frames, content_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct ContentSample {
    pub values: Array2<f32>,
}

/// Two-class domain logits, one row per classified unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLogits {
    pub logits: Array2<f32>,
}

/// values = mean + exp(log_variance / 2) * eps, elementwise.
pub fn sample_content(post: &ContentPosterior, eps: &Array2<f32>) -> Result<ContentSample> {
    if post.mean.dim() != post.log_variance.dim() || post.mean.dim() != eps.dim() {
        return Err(Error::ShapeMismatch(format!(
            "posterior mean {:?}, log variance {:?} and eps {:?} must agree",
            post.mean.dim(),
            post.log_variance.dim(),
            eps.dim()
        )));
    }
    let mut values = post.mean.clone();
    Zip::from(&mut values).and(&post.log_variance).and(eps).for_each(|v, &lv, &e| {
        *v += (0.5 * lv).exp() * e;
    });
    Ok(ContentSample { values })
}

/// Single dense layer producing two domain logits.
#[derive(Debug, Clone)]
pub struct DomainHead {
    pub fc: Dense,
}

impl DomainHead {
    pub fn new(in_dim: usize, rng: &mut impl Rng) -> Self {
        DomainHead { fc: Dense::new(in_dim, 2, rng) }
    }

    pub fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        self.fc.forward(x)
    }

    pub fn backward(&mut self, x: &ArrayView2<f32>, gy: &ArrayView2<f32>) -> Array2<f32> {
        self.fc.backward(x, gy)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc.visit_params(&format!("{prefix}.fc"), f);
    }
}

/// One training example: an input spectrogram (possibly noise-augmented), the
/// clean target it must reconstruct, and the domain label of the input.
pub struct BatchItemRef<'a> {
    pub input: &'a Array2<f32>,
    pub target: &'a Array2<f32>,
    pub domain: DomainLabel,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub losses: LossBreakdown,
    /// Speaker-domain classifier accuracy over the batch.
    pub acc_zs: f64,
    /// Content-domain classifier accuracy, frame level, averaged over items.
    pub acc_zc: f64,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub speaker: SpeakerEncoder,
    pub content: ContentEncoder,
    pub decoder: Decoder,
    pub cls_speaker: DomainHead,
    pub cls_content: DomainHead,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let speaker = SpeakerEncoder::new(
            cfg.num_mels,
            cfg.bank_channels,
            cfg.speaker_channels,
            cfg.speaker_dim,
            &mut derive_rng(seed, "init/speaker"),
        );
        let content = ContentEncoder::new(
            cfg.num_mels,
            cfg.content_channels,
            cfg.content_dim,
            &mut derive_rng(seed, "init/content"),
        );
        let decoder = Decoder::new(
            cfg.speaker_dim,
            cfg.content_dim,
            cfg.num_mels,
            cfg.decoder_channels,
            cfg.autoregressive,
            &mut derive_rng(seed, "init/decoder"),
        );
        let cls_speaker = DomainHead::new(cfg.speaker_dim, &mut derive_rng(seed, "init/cls_speaker"));
        let cls_content = DomainHead::new(cfg.content_dim, &mut derive_rng(seed, "init/cls_content"));
        Ok(Model { cfg: cfg.clone(), speaker, content, decoder, cls_speaker, cls_content })
    }

    fn check_mel(&self, mel: &ArrayView2<f32>) -> Result<()> {
        if mel.ncols() != self.cfg.num_mels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} mel channels, got {}",
                self.cfg.num_mels,
                mel.ncols()
            )));
        }
        if mel.nrows() == 0 {
            return Err(Error::ShapeMismatch("empty spectrogram".into()));
        }
        Ok(())
    }

    pub fn speaker_encode(&self, mel: &ArrayView2<f32>) -> Result<SpeakerEmbedding> {
        self.check_mel(mel)?;
        let (z, _) = self.speaker.forward(mel);
        Ok(SpeakerEmbedding { vector: z.row(0).to_owned() })
    }

    pub fn content_encode(&self, mel: &ArrayView2<f32>) -> Result<ContentPosterior> {
        self.check_mel(mel)?;
        let (mean, log_variance, _) = self.content.forward(mel);
        Ok(ContentPosterior { mean, log_variance })
    }

    pub fn classify_speaker_domain(&self, emb: &SpeakerEmbedding) -> Result<DomainLogits> {
        if emb.vector.len() != self.cfg.speaker_dim {
            return Err(Error::ShapeMismatch(format!(
                "speaker embedding dim {} != {}",
                emb.vector.len(),
                self.cfg.speaker_dim
            )));
        }
        let x = emb.vector.view().insert_axis(ndarray::Axis(0)).to_owned();
        let x = grl(&x, self.cfg.grl_lambda as f32);
        Ok(DomainLogits { logits: self.cls_speaker.forward(&x.view()) })
    }

    pub fn classify_content_domain(&self, sample: &ContentSample) -> Result<DomainLogits> {
        if sample.values.ncols() != self.cfg.content_dim {
            return Err(Error::ShapeMismatch(format!(
                "content dim {} != {}",
                sample.values.ncols(),
                self.cfg.content_dim
            )));
        }
        let x = grl(&sample.values, self.cfg.grl_lambda as f32);
        Ok(DomainLogits { logits: self.cls_content.forward(&x.view()) })
    }

    /// Synthesizes a spectrogram. With a teacher the cell is teacher-forced;
    /// without one it runs in inference mode.
    pub fn decode(
        &self,
        emb: &SpeakerEmbedding,
        content: &ContentSample,
        teacher: Option<&ArrayView2<f32>>,
    ) -> Result<Array2<f32>> {
        if emb.vector.len() != self.cfg.speaker_dim {
            return Err(Error::ShapeMismatch(format!(
                "speaker embedding dim {} != {}",
                emb.vector.len(),
                self.cfg.speaker_dim
            )));
        }
        if sample_dim_mismatch(content, self.cfg.content_dim) {
            return Err(Error::ShapeMismatch(format!(
                "content dim {} != {}",
                content.values.ncols(),
                self.cfg.content_dim
            )));
        }
        let zs = emb.vector.view().insert_axis(ndarray::Axis(0)).to_owned();
        if let Some(t) = teacher {
            if t.dim() != (content.values.nrows(), self.cfg.num_mels) {
                return Err(Error::ShapeMismatch(format!(
                    "teacher shape {:?} != {:?}",
                    t.dim(),
                    (content.values.nrows(), self.cfg.num_mels)
                )));
            }
            Ok(self.decoder.forward(&zs.view(), &content.values.view(), Some(t)).0)
        } else {
            Ok(self.decoder.infer(&zs.view(), &content.values.view()))
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.speaker.visit_params("speaker", f);
        self.content.visit_params("content", f);
        self.decoder.visit_params("decoder", f);
        self.cls_speaker.visit_params("cls_speaker", f);
        self.cls_content.visit_params("cls_content", f);
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }

    /// Forward and backward over one batch, accumulating parameter gradients
    /// (call `zero_grads` first). Loss reductions are means, so every
    /// upstream gradient carries the matching 1/batch (and per-frame 1/T)
    /// factor. With `eps_rng` absent the posterior mean is used directly.
    pub fn accumulate_step(
        &mut self,
        items: &[BatchItemRef<'_>],
        weights: &LossWeights,
        mut eps_rng: Option<&mut ChaCha12Rng>,
        step: u64,
    ) -> Result<TrainStats> {
        if items.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        for (i, it) in items.iter().enumerate() {
            if it.input.ncols() != self.cfg.num_mels || it.target.ncols() != self.cfg.num_mels {
                return Err(Error::ShapeMismatch(format!(
                    "batch item {i}: expected {} mel channels, got input {} / target {}",
                    self.cfg.num_mels,
                    it.input.ncols(),
                    it.target.ncols()
                )));
            }
            if it.input.nrows() == 0 || it.input.nrows() != it.target.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "batch item {i}: input frames {} vs target frames {}",
                    it.input.nrows(),
                    it.target.nrows()
                )));
            }
        }

        let b = items.len();
        let lambda = self.cfg.grl_lambda as f32;

        struct ItemState {
            zs: Array2<f32>,
            sp_cache: speaker::SpeakerCache,
            ct_cache: ContentCache,
            post: ContentPosterior,
            sigma: Array2<f32>,
            eps: Array2<f32>,
            zc: Array2<f32>,
            dec_cache: DecoderCache,
            y: Array2<f32>,
            g_logits_c: Array2<f32>,
            dat_zc: f64,
            acc_zc: f64,
        }

        let mut states: Vec<ItemState> = Vec::with_capacity(b);
        let mut zs_stack = Array2::<f32>::zeros((b, self.cfg.speaker_dim));
        let mut logits_s_stack = Array2::<f32>::zeros((b, 2));
        let labels: Vec<usize> = items.iter().map(|it| it.domain.index()).collect();
        let mut recon_sum = 0.0f64;
        let mut kl_sum = 0.0f64;

        for (i, it) in items.iter().enumerate() {
            let input = it.input.view();
            let (zs, sp_cache) = self.speaker.forward(&input);
            let (mean, log_variance, ct_cache) = self.content.forward(&input);
            let post = ContentPosterior { mean, log_variance };
            let sigma = post.log_variance.mapv(|v| (0.5 * v).exp());
            let eps = match eps_rng.as_deref_mut() {
                Some(rng) => Array2::from_shape_simple_fn(post.mean.raw_dim(), || {
                    rng.sample::<f32, _>(StandardNormal)
                }),
                None => Array2::zeros(post.mean.raw_dim()),
            };
            let zc = &post.mean + &(&sigma * &eps);
            let teacher_view = it.target.view();
            let teacher = self.cfg.autoregressive.then_some(&teacher_view);
            let (y, dec_cache) = self.decoder.forward(&zs.view(), &zc.view(), teacher);

            recon_sum += recon_loss(&y.view(), &it.target.view())?;
            kl_sum += kl_loss(&post)?;

            let zs_grl = grl(&zs, lambda);
            logits_s_stack.row_mut(i).assign(&self.cls_speaker.forward(&zs_grl.view()).row(0));
            zs_stack.row_mut(i).assign(&zs_grl.row(0));

            let zc_grl = grl(&zc, lambda);
            let logits_c = self.cls_content.forward(&zc_grl.view());
            let frame_labels = vec![labels[i]; zc.nrows()];
            let (dat_zc, g_logits_c) = softmax_ce(&logits_c.view(), &frame_labels);
            let acc_zc = argmax_accuracy(&logits_c.view(), &frame_labels);

            states.push(ItemState {
                zs,
                sp_cache,
                ct_cache,
                post,
                sigma,
                eps,
                zc,
                dec_cache,
                y,
                g_logits_c,
                dat_zc,
                acc_zc,
            });
        }

        let (dat_zs, g_logits_s) = softmax_ce(&logits_s_stack.view(), &labels);
        let acc_zs = argmax_accuracy(&logits_s_stack.view(), &labels);
        let recon = recon_sum / b as f64;
        let kl = kl_sum / b as f64;
        let dat_zc = states.iter().map(|s| s.dat_zc).sum::<f64>() / b as f64;
        let acc_zc = states.iter().map(|s| s.acc_zc).sum::<f64>() / b as f64;
        for (term, value) in
            [("recon", recon), ("kl", kl), ("dat_zc", dat_zc), ("dat_zs", dat_zs)]
        {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, step });
            }
        }
        let losses = total_loss(recon, kl, dat_zc, dat_zs, weights);
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { term: "total", step });
        }

        // Speaker-domain head trains on all embeddings at once; the per-item
        // reversed gradient is carved out of the returned rows below.
        let gy_s = g_logits_s.mapv(|v| v * weights.gamma as f32);
        let gx_s = self.cls_speaker.backward(&zs_stack.view(), &gy_s.view());

        for (i, st) in states.iter().enumerate() {
            let frames = st.post.mean.nrows() as f64;
            let cells = frames * self.cfg.num_mels as f64;
            let recon_scale = (weights.alpha / (b as f64 * cells)) as f32;
            let mut g_y = Array2::<f32>::zeros(st.y.raw_dim());
            Zip::from(&mut g_y).and(&st.y).and(items[i].target).for_each(|g, &y, &t| {
                *g = if y > t {
                    recon_scale
                } else if y < t {
                    -recon_scale
                } else {
                    0.0
                };
            });
            let (g_zs_dec, g_zc_dec) =
                self.decoder.backward(&st.dec_cache, &st.zs.view(), &st.zc.view(), &g_y.view());

            let gy_c = st.g_logits_c.mapv(|v| v * (weights.tau / b as f64) as f32);
            let gx_c = self.cls_content.backward(&st.zc.view(), &gy_c.view());
            let g_zc_adv = grl_backward(&gx_c, lambda);
            let g_zc_total = &g_zc_dec + &g_zc_adv;

            let kl_scale = (weights.beta / (b as f64 * frames)) as f32;
            let mut g_mean = g_zc_total.clone();
            Zip::from(&mut g_mean).and(&st.post.mean).for_each(|g, &m| *g += kl_scale * m);
            let mut g_lv = &g_zc_total * &(&st.sigma * &st.eps);
            g_lv.mapv_inplace(|v| 0.5 * v);
            Zip::from(&mut g_lv).and(&st.post.log_variance).for_each(|g, &lv| {
                *g += kl_scale * 0.5 * (lv.exp() - 1.0);
            });
            self.content.backward(&st.ct_cache, &g_mean.view(), &g_lv.view());

            let g_zs_adv = grl_backward(&gx_s.slice(s![i..i + 1, ..]).to_owned(), lambda);
            let g_zs_total = &g_zs_dec + &g_zs_adv;
            self.speaker.backward(&st.sp_cache, &g_zs_total.view());
        }

        Ok(TrainStats { losses, acc_zs, acc_zc })
    }
}

fn sample_dim_mismatch(sample: &ContentSample, content_dim: usize) -> bool {
    sample.values.ncols() != content_dim || sample.values.nrows() == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_mels: 10,
            speaker_dim: 6,
            content_dim: 5,
            grl_lambda: 0.2,
            bank_channels: 3,
            speaker_channels: 8,
            content_channels: 6,
            decoder_channels: 8,
            autoregressive: true,
        }
    }

    fn randn(shape: (usize, usize), label: &str) -> Array2<f32> {
        let mut rng = derive_rng(5, label);
        Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    fn read_param(m: &mut Model, name: &str, idx: (usize, usize)) -> (f32, f32) {
        let mut out = None;
        m.for_each_param(&mut |n, p| {
            if n == name {
                out = Some((p.v[idx], p.g[idx]));
            }
        });
        out.unwrap_or_else(|| panic!("no param named {name}"))
    }

    fn write_param(m: &mut Model, name: &str, idx: (usize, usize), val: f32) {
        m.for_each_param(&mut |n, p| {
            if n == name {
                p.v[idx] = val;
            }
        });
    }

    #[test]
    fn default_config_matches_recipe() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.num_mels, 256);
        assert_eq!(cfg.speaker_dim, 128);
        assert_eq!(cfg.content_dim, 128);
        assert_abs_diff_eq!(cfg.grl_lambda, 0.1);
        assert!(cfg.autoregressive);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.speaker_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.grl_lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.grl_lambda = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_outputs() {
        let cfg = small_cfg();
        let m1 = Model::new(&cfg, 42).unwrap();
        let m2 = Model::new(&cfg, 42).unwrap();
        let m3 = Model::new(&cfg, 43).unwrap();
        let mel = randn((12, cfg.num_mels), "det-mel");
        let e1 = m1.speaker_encode(&mel.view()).unwrap();
        let e2 = m2.speaker_encode(&mel.view()).unwrap();
        let e3 = m3.speaker_encode(&mel.view()).unwrap();
        assert_eq!(e1.vector, e2.vector);
        assert_ne!(e1.vector, e3.vector);
        let p1 = m1.content_encode(&mel.view()).unwrap();
        let p2 = m2.content_encode(&mel.view()).unwrap();
        assert_eq!(p1.mean, p2.mean);
        assert_eq!(p1.log_variance, p2.log_variance);
        assert_eq!(p1.mean.dim(), (12, cfg.content_dim));
    }

    #[test]
    fn embedding_size_is_fixed_across_lengths() {
        let cfg = small_cfg();
        let m = Model::new(&cfg, 1).unwrap();
        for t in [3usize, 30, 81] {
            let mel = randn((t, cfg.num_mels), "len-mel");
            let e = m.speaker_encode(&mel.view()).unwrap();
            assert_eq!(e.vector.len(), cfg.speaker_dim);
        }
    }

    #[test]
    fn sampler_algebra() {
        let mean = randn((4, 3), "samp-mean");
        // eps = 0 reproduces the mean exactly.
        let post = ContentPosterior {
            mean: mean.clone(),
            log_variance: randn((4, 3), "samp-lv"),
        };
        let z = sample_content(&post, &Array2::zeros((4, 3))).unwrap();
        assert_eq!(z.values, post.mean);
        // Unit variance, eps = 1 shifts by one.
        let post = ContentPosterior { mean: mean.clone(), log_variance: Array2::zeros((4, 3)) };
        let z = sample_content(&post, &Array2::ones((4, 3))).unwrap();
        for (v, m) in z.values.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(*v, m + 1.0, epsilon = 1e-6);
        }
        // Zero mean, variance 4, eps = e gives 2e.
        let lv = Array2::from_elem((2, 2), 4.0f32.ln());
        let post = ContentPosterior { mean: Array2::zeros((2, 2)), log_variance: lv };
        let eps = Array2::from_elem((2, 2), std::f32::consts::E);
        let z = sample_content(&post, &eps).unwrap();
        for &v in z.values.iter() {
            assert_abs_diff_eq!(v, 2.0 * std::f32::consts::E, epsilon = 1e-5);
        }
        // Shape mismatch is an error.
        assert!(sample_content(&post, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn domain_head_linear_arithmetic() {
        let mut head = DomainHead::new(2, &mut derive_rng(0, "head"));
        head.fc.w.v = ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]);
        head.fc.b.v = ndarray::arr2(&[[0.5, -0.5]]);
        let x = ndarray::arr2(&[[3.0f32, 1.0]]);
        let y = head.forward(&x.view());
        assert_abs_diff_eq!(y[[0, 0]], 3.5);
        assert_abs_diff_eq!(y[[0, 1]], 1.5);
        assert_eq!(argmax_accuracy(&y.view(), &[0]), 1.0);
        assert_eq!(argmax_accuracy(&y.view(), &[1]), 0.0);
    }

    #[test]
    fn content_normalization_keeps_unit_stats() {
        let cfg = small_cfg();
        let m = Model::new(&cfg, 9).unwrap();
        let mel = randn((40, cfg.num_mels), "in-stats") * 4.0 + 2.0;
        let (_, _, cache) = m.content.forward(&mel.view());
        for xhat in ContentEncoder::normalized_activations(&cache) {
            for c in 0..xhat.ncols() {
                let col: Vec<f32> = (0..xhat.nrows()).map(|t| xhat[[t, c]]).collect();
                let mean = col.iter().sum::<f32>() / col.len() as f32;
                let var =
                    col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / col.len() as f32;
                assert!(mean.abs() < 1e-4, "channel mean {mean}");
                assert!((var - 1.0).abs() < 1e-2, "channel var {var}");
            }
        }
    }

    fn batch_fixtures(cfg: &ModelConfig) -> Vec<(Array2<f32>, Array2<f32>, DomainLabel)> {
        let clean = randn((7, cfg.num_mels), "fix-clean");
        let noisy_in = randn((7, cfg.num_mels), "fix-noisy-in");
        let noisy_tgt = randn((7, cfg.num_mels), "fix-noisy-tgt");
        vec![
            (clean.clone(), clean, DomainLabel::Clean),
            (noisy_in, noisy_tgt, DomainLabel::Noisy),
        ]
    }

    fn as_refs(fix: &[(Array2<f32>, Array2<f32>, DomainLabel)]) -> Vec<BatchItemRef<'_>> {
        fix.iter()
            .map(|(input, target, domain)| BatchItemRef { input, target, domain: *domain })
            .collect()
    }

    #[test]
    fn accumulate_step_is_deterministic() {
        let cfg = small_cfg();
        let fix = batch_fixtures(&cfg);
        let run = || {
            let mut m = Model::new(&cfg, 77).unwrap();
            m.zero_grads();
            let mut eps = derive_rng(3, "eps/0");
            let stats = m
                .accumulate_step(&as_refs(&fix), &LossWeights::default(), Some(&mut eps), 0)
                .unwrap();
            let mut probe = Vec::new();
            m.for_each_param(&mut |_, p| probe.extend(p.g.iter().copied()));
            (stats, probe)
        };
        let (s1, g1) = run();
        let (s2, g2) = run();
        assert_eq!(s1.losses.total.to_bits(), s2.losses.total.to_bits());
        assert_eq!(s1.losses.recon.to_bits(), s2.losses.recon.to_bits());
        assert_eq!(g1, g2);
        assert!(s1.losses.total.is_finite());
    }

    #[test]
    fn gradients_flow_everywhere_with_default_weights() {
        let cfg = small_cfg();
        let fix = batch_fixtures(&cfg);
        let mut m = Model::new(&cfg, 13).unwrap();
        m.zero_grads();
        let mut eps = derive_rng(4, "eps");
        m.accumulate_step(&as_refs(&fix), &LossWeights::default(), Some(&mut eps), 0).unwrap();
        let mut groups: std::collections::BTreeMap<String, f32> = Default::default();
        m.for_each_param(&mut |name, p| {
            let group = name.split('.').next().unwrap().to_string();
            let mx = p.g.iter().fold(0.0f32, |a, &g| a.max(g.abs()));
            let e = groups.entry(group).or_insert(0.0);
            *e = e.max(mx);
        });
        for (group, mx) in &groups {
            assert!(mx.is_finite() && *mx > 0.0, "group {group} has max |g| {mx}");
        }
        assert_eq!(groups.len(), 5);
    }

    #[test]
    fn zero_weights_zero_gradients() {
        let cfg = small_cfg();
        let fix = batch_fixtures(&cfg);
        let mut m = Model::new(&cfg, 21).unwrap();
        m.zero_grads();
        let w = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, tau: 0.0 };
        m.accumulate_step(&as_refs(&fix), &w, None, 0).unwrap();
        m.for_each_param(&mut |name, p| {
            let mx = p.g.iter().fold(0.0f32, |a, &g| a.max(g.abs()));
            assert_eq!(mx, 0.0, "param {name} got gradient with all-zero weights");
        });
    }

    #[test]
    fn reconstruction_only_leaves_heads_untouched() {
        let cfg = small_cfg();
        let fix = batch_fixtures(&cfg);
        let mut m = Model::new(&cfg, 22).unwrap();
        m.zero_grads();
        let w = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0, tau: 0.0 };
        m.accumulate_step(&as_refs(&fix), &w, None, 0).unwrap();
        m.for_each_param(&mut |name, p| {
            let mx = p.g.iter().fold(0.0f32, |a, &g| a.max(g.abs()));
            if name.starts_with("cls_") {
                assert_eq!(mx, 0.0, "head {name} must not see the reconstruction term");
            }
        });
        let (_, g) = read_param(&mut m, "decoder.out.w", (0, 0));
        assert!(g != 0.0);
    }

    #[test]
    fn lambda_changes_encoder_but_not_head_gradients() {
        let fix = batch_fixtures(&small_cfg());
        let grads_for = |lambda: f64| {
            let mut cfg = small_cfg();
            cfg.grl_lambda = lambda;
            let mut m = Model::new(&cfg, 31).unwrap();
            m.zero_grads();
            m.accumulate_step(&as_refs(&fix), &LossWeights::default(), None, 0).unwrap();
            let mut heads = Vec::new();
            let mut content = Vec::new();
            m.for_each_param(&mut |name, p| {
                if name.starts_with("cls_") {
                    heads.extend(p.g.iter().copied());
                } else if name.starts_with("content.") {
                    content.extend(p.g.iter().copied());
                }
            });
            (heads, content)
        };
        let (h0, c0) = grads_for(0.0);
        let (h1, c1) = grads_for(0.5);
        assert_eq!(h0, h1, "reversal scale must not alter classifier gradients");
        assert_ne!(c0, c1, "reversal scale must alter encoder gradients");
    }

    /// Finite-difference check of the full step. Each parameter group
    /// minimizes its own effective objective: the reversal layer multiplies
    /// the domain terms by -lambda before they reach the encoders.
    #[test]
    fn step_gradients_match_per_group_objectives() {
        let cfg = small_cfg();
        let fix = batch_fixtures(&cfg);
        let weights = LossWeights { alpha: 2.0, beta: 0.5, gamma: 0.4, tau: 0.3 };
        let lambda = cfg.grl_lambda;
        let mut m = Model::new(&cfg, 55).unwrap();
        m.zero_grads();
        m.accumulate_step(&as_refs(&fix), &weights, None, 0).unwrap();

        let eval = |m: &mut Model| -> LossBreakdown {
            m.accumulate_step(&as_refs(&fix), &weights, None, 0).unwrap().losses
        };
        let objective = |l: &LossBreakdown, group: &str| -> f64 {
            match group {
                "decoder" => weights.alpha * l.recon,
                "cls_speaker" => weights.gamma * l.dat_zs,
                "cls_content" => weights.tau * l.dat_zc,
                "speaker" => weights.alpha * l.recon - lambda * weights.gamma * l.dat_zs,
                "content" => {
                    weights.alpha * l.recon + weights.beta * l.kl
                        - lambda * weights.tau * l.dat_zc
                }
                _ => unreachable!(),
            }
        };
        let cases = [
            ("speaker.fc2.w", (1usize, 2usize)),
            ("speaker.bank3.w", (0, 4)),
            ("content.block1.w", (2, 7)),
            ("content.head_lv.w", (1, 3)),
            ("decoder.cond1.w", (3, 2)),
            ("decoder.ar_p.w", (2, 5)),
            ("decoder.out.w", (4, 1)),
            ("cls_speaker.fc.w", (1, 4)),
            ("cls_content.fc.w", (0, 2)),
        ];
        // Snapshot every analytic gradient before any finite-difference
        // evaluation: accumulate_step keeps adding to the gradient buffers.
        let analytics: Vec<f32> =
            cases.iter().map(|&(name, idx)| read_param(&mut m, name, idx).1).collect();
        let h = 1e-2f32;
        for (&(name, idx), &analytic) in cases.iter().zip(&analytics) {
            let group = name.split('.').next().unwrap();
            let (orig, _) = read_param(&mut m, name, idx);
            write_param(&mut m, name, idx, orig + h);
            let up = objective(&eval(&mut m), group);
            write_param(&mut m, name, idx, orig - h);
            let down = objective(&eval(&mut m), group);
            write_param(&mut m, name, idx, orig);
            let numeric = (up - down) / (2.0 * f64::from(h));
            let diff = (f64::from(analytic) - numeric).abs();
            let scale = numeric.abs().max(f64::from(analytic.abs())).max(0.05);
            assert!(
                diff / scale < 5e-2,
                "{name}: analytic {analytic} vs fd {numeric}"
            );
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let cfg = small_cfg();
        let mut m = Model::new(&cfg, 1).unwrap();
        assert!(m.accumulate_step(&[], &LossWeights::default(), None, 0).is_err());
        let a = randn((4, cfg.num_mels), "bad-a");
        let b = randn((5, cfg.num_mels), "bad-b");
        let items = [BatchItemRef { input: &a, target: &b, domain: DomainLabel::Clean }];
        assert!(m.accumulate_step(&items, &LossWeights::default(), None, 0).is_err());
        let c = randn((4, cfg.num_mels + 1), "bad-c");
        let items = [BatchItemRef { input: &c, target: &c, domain: DomainLabel::Clean }];
        assert!(m.accumulate_step(&items, &LossWeights::default(), None, 0).is_err());
    }

    #[test]
    fn decode_roundtrip_shapes() {
        let cfg = small_cfg();
        let m = Model::new(&cfg, 8).unwrap();
        let mel = randn((9, cfg.num_mels), "dec-mel");
        let emb = m.speaker_encode(&mel.view()).unwrap();
        let post = m.content_encode(&mel.view()).unwrap();
        let z = sample_content(&post, &Array2::zeros(post.mean.raw_dim())).unwrap();
        let y = m.decode(&emb, &z, None).unwrap();
        assert_eq!(y.dim(), (9, cfg.num_mels));
        let y_tf = m.decode(&emb, &z, Some(&mel.view())).unwrap();
        assert_eq!(y_tf.dim(), (9, cfg.num_mels));
        let logits = m.classify_speaker_domain(&emb).unwrap();
        assert_eq!(logits.logits.dim(), (1, 2));
        let logits = m.classify_content_domain(&z).unwrap();
        assert_eq!(logits.logits.dim(), (9, 2));
    }
}
