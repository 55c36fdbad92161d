//! Speaker encoder: ConvBank (kernels 1..8) -> 3 residual conv blocks ->
//! average pooling over time -> 2 dense layers. Output is one fixed-length
//! embedding per utterance regardless of frame count.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{leaky_relu, leaky_relu_backward, Conv1d, Dense, Param};

pub const BANK_KERNELS: std::ops::RangeInclusive<usize> = 1..=8;

#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub bank: Vec<Conv1d>,
    pub proj: Conv1d,
    pub res: Vec<(Conv1d, Conv1d)>,
    pub fc1: Dense,
    pub fc2: Dense,
}

pub struct SpeakerCache {
    t_len: usize,
    bank_cols: Vec<Array2<f32>>,
    bank_pre: Array2<f32>,
    proj_col: Array2<f32>,
    proj_pre: Array2<f32>,
    blocks: Vec<ResBlockCache>,
    pooled: Array2<f32>,
    fc1_pre: Array2<f32>,
    fc1_act: Array2<f32>,
}

struct ResBlockCache {
    c1_col: Array2<f32>,
    c1_pre: Array2<f32>,
    c2_col: Array2<f32>,
    sum_pre: Array2<f32>,
}

impl SpeakerEncoder {
    pub fn new(
        num_mels: usize,
        bank_channels: usize,
        channels: usize,
        speaker_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bank =
            BANK_KERNELS.map(|k| Conv1d::new(num_mels, bank_channels, k, rng)).collect::<Vec<_>>();
        let bank_width = bank_channels * bank.len();
        SpeakerEncoder {
            bank,
            proj: Conv1d::new(bank_width, channels, 3, rng),
            res: (0..3)
                .map(|_| (Conv1d::new(channels, channels, 3, rng), Conv1d::new(channels, channels, 3, rng)))
                .collect(),
            fc1: Dense::new(channels, channels, rng),
            fc2: Dense::new(channels, speaker_dim, rng),
        }
    }

    /// x: (T, num_mels) -> (1, speaker_dim) embedding row.
    pub fn forward(&self, x: &ArrayView2<f32>) -> (Array2<f32>, SpeakerCache) {
        let t_len = x.nrows();
        let mut bank_cols = Vec::with_capacity(self.bank.len());
        let mut parts = Vec::with_capacity(self.bank.len());
        for conv in &self.bank {
            let (y, col) = conv.forward(x);
            bank_cols.push(col);
            parts.push(y);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let bank_pre = ndarray::concatenate(Axis(1), &views).expect("bank widths align");
        let bank_act = leaky_relu(&bank_pre);
        let (proj_pre, proj_col) = self.proj.forward(&bank_act.view());
        let mut h = leaky_relu(&proj_pre);
        let mut blocks = Vec::with_capacity(self.res.len());
        for (c1, c2) in &self.res {
            let (c1_pre, c1_col) = c1.forward(&h.view());
            let c1_act = leaky_relu(&c1_pre);
            let (c2_pre, c2_col) = c2.forward(&c1_act.view());
            let sum_pre = &h + &c2_pre;
            let h_out = leaky_relu(&sum_pre);
            blocks.push(ResBlockCache { c1_col, c1_pre, c2_col, sum_pre });
            h = h_out;
        }
        let pooled = h.mean_axis(Axis(0)).expect("non-empty input").insert_axis(Axis(0));
        let fc1_pre = self.fc1.forward(&pooled.view());
        let fc1_act = leaky_relu(&fc1_pre);
        let z = self.fc2.forward(&fc1_act.view());
        let cache = SpeakerCache {
            t_len,
            bank_cols,
            bank_pre,
            proj_col,
            proj_pre,
            blocks,
            pooled,
            fc1_pre,
            fc1_act,
        };
        (z, cache)
    }

    /// Accumulates parameter gradients from dL/dz; the input gradient is not
    /// materialized (the input is data).
    pub fn backward(&mut self, cache: &SpeakerCache, g_z: &ArrayView2<f32>) {
        let g_fc1_act = self.fc2.backward(&cache.fc1_act.view(), g_z);
        let g_fc1_pre = leaky_relu_backward(&cache.fc1_pre, &g_fc1_act.view());
        let g_pooled = self.fc1.backward(&cache.pooled.view(), &g_fc1_pre.view());
        let scale = 1.0 / cache.t_len as f32;
        let g_row = g_pooled.row(0).mapv(|v| v * scale);
        let mut g_h = Array2::from_shape_fn((cache.t_len, g_row.len()), |(_, c)| g_row[c]);
        for ((c1, c2), bc) in self.res.iter_mut().zip(&cache.blocks).rev() {
            let g_sum_pre = leaky_relu_backward(&bc.sum_pre, &g_h.view());
            let g_c1_act = c2.backward(&bc.c2_col, &g_sum_pre.view(), true).expect("gx requested");
            let g_c1_pre = leaky_relu_backward(&bc.c1_pre, &g_c1_act.view());
            let g_res_in = c1.backward(&bc.c1_col, &g_c1_pre.view(), true).expect("gx requested");
            g_h = g_sum_pre + g_res_in;
        }
        let g_proj_pre = leaky_relu_backward(&cache.proj_pre, &g_h.view());
        let g_bank_act =
            self.proj.backward(&cache.proj_col, &g_proj_pre.view(), true).expect("gx requested");
        let g_bank_pre = leaky_relu_backward(&cache.bank_pre, &g_bank_act.view());
        let width = self.bank[0].c_out();
        for (i, conv) in self.bank.iter_mut().enumerate() {
            let chunk = g_bank_pre.slice(ndarray::s![.., i * width..(i + 1) * width]);
            conv.backward(&cache.bank_cols[i], &chunk, false);
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (conv, k) in self.bank.iter_mut().zip(BANK_KERNELS) {
            conv.visit_params(&format!("{prefix}.bank{k}"), f);
        }
        self.proj.visit_params(&format!("{prefix}.proj"), f);
        for (i, (c1, c2)) in self.res.iter_mut().enumerate() {
            c1.visit_params(&format!("{prefix}.res{i}.c1"), f);
            c2.visit_params(&format!("{prefix}.res{i}.c2"), f);
        }
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
    }
}
