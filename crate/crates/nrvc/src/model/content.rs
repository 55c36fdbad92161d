//! Content encoder: 3 conv blocks, each followed by instance normalization
//! with no learned affine (so channel statistics carrying noise or speaker
//! coloration are actually removed), then parallel 1x1 conv heads emitting the
//! per-frame posterior mean and log-variance.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::nn::{
    instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, Conv1d, InCache, Param,
};

/// Log-variance clamp bound applied before any exponentiation.
pub const LOG_VAR_CLAMP: f32 = 7.0;

#[derive(Debug, Clone)]
pub struct ContentEncoder {
    pub blocks: Vec<Conv1d>,
    pub head_mean: Conv1d,
    pub head_lv: Conv1d,
}

pub struct ContentCache {
    blocks: Vec<BlockCache>,
    mean_col: Array2<f32>,
    lv_col: Array2<f32>,
    lv_pre: Array2<f32>,
}

struct BlockCache {
    col: Array2<f32>,
    in_cache: InCache,
}

impl ContentEncoder {
    pub fn new(num_mels: usize, channels: usize, content_dim: usize, rng: &mut impl Rng) -> Self {
        ContentEncoder {
            blocks: vec![
                Conv1d::new(num_mels, channels, 5, rng),
                Conv1d::new(channels, channels, 5, rng),
                Conv1d::new(channels, channels, 5, rng),
            ],
            head_mean: Conv1d::new(channels, content_dim, 1, rng),
            head_lv: Conv1d::new(channels, content_dim, 1, rng),
        }
    }

    /// x: (T, num_mels) -> (mean (T, content_dim), log_variance clamped, cache).
    pub fn forward(&self, x: &ArrayView2<f32>) -> (Array2<f32>, Array2<f32>, ContentCache) {
        let mut h = x.to_owned();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let (pre, col) = conv.forward(&h.view());
            let (normed, in_cache) = instance_norm(&pre.view());
            h = leaky_relu(&normed);
            blocks.push(BlockCache { col, in_cache });
        }
        let (mean, mean_col) = self.head_mean.forward(&h.view());
        let (lv_pre, lv_col) = self.head_lv.forward(&h.view());
        let lv = lv_pre.mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
        (mean, lv, ContentCache { blocks, mean_col, lv_col, lv_pre })
    }

    /// Per-block activations right after the normalization sublayer.
    pub fn normalized_activations(cache: &ContentCache) -> Vec<&Array2<f32>> {
        cache.blocks.iter().map(|b| &b.in_cache.xhat).collect()
    }

    pub fn backward(
        &mut self,
        cache: &ContentCache,
        g_mean: &ArrayView2<f32>,
        g_lv: &ArrayView2<f32>,
    ) {
        // Clamp saturates: zero gradient outside the open interval.
        let mut g_lv_pre = g_lv.to_owned();
        ndarray::Zip::from(&mut g_lv_pre).and(&cache.lv_pre).for_each(|g, &pre| {
            if pre.abs() >= LOG_VAR_CLAMP {
                *g = 0.0;
            }
        });
        let g_from_mean =
            self.head_mean.backward(&cache.mean_col, g_mean, true).expect("gx requested");
        let g_from_lv =
            self.head_lv.backward(&cache.lv_col, &g_lv_pre.view(), true).expect("gx requested");
        let mut g_h = g_from_mean + g_from_lv;
        for (i, (conv, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            let g_normed = leaky_relu_backward(&bc.in_cache.xhat, &g_h.view());
            let g_pre = instance_norm_backward(&bc.in_cache, &g_normed.view());
            match conv.backward(&bc.col, &g_pre.view(), i > 0) {
                Some(gx) => g_h = gx,
                None => debug_assert_eq!(i, 0),
            }
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, conv) in self.blocks.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.block{i}"), f);
        }
        self.head_mean.visit_params(&format!("{prefix}.head_mean"), f);
        self.head_lv.visit_params(&format!("{prefix}.head_lv"), f);
    }
}
