//! Mel decoder: a convolutional trunk over the content sequence whose
//! per-block activations are modulated by the speaker embedding (scale and
//! shift applied after instance normalization), followed by a frame-level
//! autoregressive output cell.
//!
//! During training the cell is fully teacher-forced, so the whole sequence is
//! computed in parallel and backward needs no unrolling through time. During
//! inference the cell consumes its own previous output frame.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::nn::{
    instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, Conv1d, Dense, InCache,
    Param,
};

const N_BLOCKS: usize = 3;

pub struct Decoder {
    /// Speaker conditioning MLP; its output is split into per-block
    /// (scale, shift) rows.
    pub cond1: Dense,
    pub cond2: Dense,
    /// Lifts content frames into the trunk width.
    pub pre: Dense,
    pub convs: Vec<Conv1d>,
    /// Autoregressive cell: u = act(ar_h(trunk) + ar_p(previous frame)).
    pub ar_h: Dense,
    pub ar_p: Dense,
    pub out: Dense,
    pub autoregressive: bool,
}

pub struct DecoderCache {
    c1_pre: Array2<f32>,
    c1_act: Array2<f32>,
    pre_pre: Array2<f32>,
    blocks: Vec<DecBlockCache>,
    h_final: Array2<f32>,
    p: Array2<f32>,
    u_pre: Array2<f32>,
    u: Array2<f32>,
}

struct DecBlockCache {
    col: Array2<f32>,
    in_cache: InCache,
    /// Pre-activation after the scale/shift modulation.
    styled: Array2<f32>,
    /// (1, channels) row of 1 + scale for this block.
    scale_plus1: Array2<f32>,
}

impl Decoder {
    pub fn new(
        speaker_dim: usize,
        content_dim: usize,
        num_mels: usize,
        channels: usize,
        autoregressive: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Decoder {
            cond1: Dense::new(speaker_dim, channels, rng),
            cond2: Dense::new(channels, N_BLOCKS * 2 * channels, rng),
            pre: Dense::new(content_dim, channels, rng),
            convs: (0..N_BLOCKS).map(|_| Conv1d::new(channels, channels, 3, rng)).collect(),
            ar_h: Dense::new(channels, channels, rng),
            ar_p: Dense::new(num_mels, channels, rng),
            out: Dense::new(channels, num_mels, rng),
            autoregressive,
        }
    }

    pub fn num_mels(&self) -> usize {
        self.out.out_dim()
    }

    fn channels(&self) -> usize {
        self.pre.out_dim()
    }

    /// Previous-frame inputs for the teacher-forced cell: row t holds
    /// teacher frame t-1, zeros at t = 0. Without a teacher the cell sees
    /// zeros everywhere.
    fn prev_frames(&self, t_len: usize, teacher: Option<&ArrayView2<f32>>) -> Array2<f32> {
        let mut p = Array2::<f32>::zeros((t_len, self.num_mels()));
        if let Some(teacher) = teacher {
            for t in 1..t_len {
                p.row_mut(t).assign(&teacher.row(t - 1));
            }
        }
        p
    }

    /// zs: (1, speaker_dim), zc: (T, content_dim) -> ((T, num_mels), cache).
    pub fn forward(
        &self,
        zs: &ArrayView2<f32>,
        zc: &ArrayView2<f32>,
        teacher: Option<&ArrayView2<f32>>,
    ) -> (Array2<f32>, DecoderCache) {
        let ch = self.channels();
        let c1_pre = self.cond1.forward(zs);
        let c1_act = leaky_relu(&c1_pre);
        let cond_out = self.cond2.forward(&c1_act.view());

        let pre_pre = self.pre.forward(zc);
        let mut h = leaky_relu(&pre_pre);
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        for (i, conv) in self.convs.iter().enumerate() {
            let (conv_out, col) = conv.forward(&h.view());
            let (normed, in_cache) = instance_norm(&conv_out.view());
            let base = i * 2 * ch;
            let scale_plus1 =
                cond_out.slice(s![0..1, base..base + ch]).to_owned().mapv(|v| 1.0 + v);
            let shift = cond_out.slice(s![0..1, base + ch..base + 2 * ch]);
            let mut styled = normed;
            for mut row in styled.rows_mut() {
                for c in 0..ch {
                    row[c] = row[c] * scale_plus1[[0, c]] + shift[[0, c]];
                }
            }
            let act = leaky_relu(&styled);
            h += &act;
            blocks.push(DecBlockCache { col, in_cache, styled, scale_plus1 });
        }

        let p = self.prev_frames(zc.nrows(), teacher);
        let u_pre = self.ar_h.forward(&h.view()) + self.ar_p.forward(&p.view());
        let u = leaky_relu(&u_pre);
        let y = self.out.forward(&u.view());
        let cache =
            DecoderCache { c1_pre, c1_act, pre_pre, blocks, h_final: h, p, u_pre, u };
        (y, cache)
    }

    /// Inference path. The autoregressive cell runs frame by frame on its own
    /// previous output; the trunk is unchanged from the teacher-forced path.
    pub fn infer(&self, zs: &ArrayView2<f32>, zc: &ArrayView2<f32>) -> Array2<f32> {
        if !self.autoregressive {
            return self.forward(zs, zc, None).0;
        }
        let (_, cache) = self.forward(zs, zc, None);
        let h = cache.h_final;
        let t_len = h.nrows();
        let mut y = Array2::<f32>::zeros((t_len, self.num_mels()));
        let mut prev = Array2::<f32>::zeros((1, self.num_mels()));
        for t in 0..t_len {
            let h_row = h.slice(s![t..t + 1, ..]);
            let u_pre = self.ar_h.forward(&h_row) + self.ar_p.forward(&prev.view());
            let u = leaky_relu(&u_pre);
            let y_row = self.out.forward(&u.view());
            y.row_mut(t).assign(&y_row.row(0));
            prev = y_row;
        }
        y
    }

    /// Accumulates parameter gradients and returns (dL/dzs, dL/dzc).
    /// Previous-frame inputs are data, so no gradient flows through them.
    pub fn backward(
        &mut self,
        cache: &DecoderCache,
        zs: &ArrayView2<f32>,
        zc: &ArrayView2<f32>,
        gy: &ArrayView2<f32>,
    ) -> (Array2<f32>, Array2<f32>) {
        let ch = self.channels();
        let g_u = self.out.backward(&cache.u.view(), gy);
        let g_u_pre = leaky_relu_backward(&cache.u_pre, &g_u.view());
        let mut g_h = self.ar_h.backward(&cache.h_final.view(), &g_u_pre.view());
        let _ = self.ar_p.backward(&cache.p.view(), &g_u_pre.view());

        let mut g_cond = Array2::<f32>::zeros((1, N_BLOCKS * 2 * ch));
        for (i, (conv, bc)) in self.convs.iter_mut().zip(&cache.blocks).enumerate().rev() {
            // Residual: the block output is h_in + act(styled), so g_h feeds
            // both the modulated path and the skip connection.
            let g_styled = leaky_relu_backward(&bc.styled, &g_h.view());
            let normed = &bc.in_cache.xhat;
            let base = i * 2 * ch;
            for c in 0..ch {
                let mut g_scale = 0.0f32;
                let mut g_shift = 0.0f32;
                for t in 0..g_styled.nrows() {
                    g_scale += g_styled[[t, c]] * normed[[t, c]];
                    g_shift += g_styled[[t, c]];
                }
                g_cond[[0, base + c]] = g_scale;
                g_cond[[0, base + ch + c]] = g_shift;
            }
            let mut g_normed = g_styled;
            for mut row in g_normed.rows_mut() {
                for c in 0..ch {
                    row[c] *= bc.scale_plus1[[0, c]];
                }
            }
            let g_conv_out = instance_norm_backward(&bc.in_cache, &g_normed.view());
            let g_in = conv.backward(&bc.col, &g_conv_out.view(), true).expect("gx requested");
            g_h += &g_in;
        }

        let g_pre_pre = leaky_relu_backward(&cache.pre_pre, &g_h.view());
        let g_zc = self.pre.backward(zc, &g_pre_pre.view());

        let g_c1_act = self.cond2.backward(&cache.c1_act.view(), &g_cond.view());
        let g_c1_pre = leaky_relu_backward(&cache.c1_pre, &g_c1_act.view());
        let g_zs = self.cond1.backward(zs, &g_c1_pre.view());
        (g_zs, g_zc)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.cond1.visit_params(&format!("{prefix}.cond1"), f);
        self.cond2.visit_params(&format!("{prefix}.cond2"), f);
        self.pre.visit_params(&format!("{prefix}.pre"), f);
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.conv{i}"), f);
        }
        self.ar_h.visit_params(&format!("{prefix}.ar_h"), f);
        self.ar_p.visit_params(&format!("{prefix}.ar_p"), f);
        self.out.visit_params(&format!("{prefix}.out"), f);
    }
}
