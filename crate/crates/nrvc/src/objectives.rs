//! Loss terms and their weighted combination. All reductions accumulate in
//! f64 regardless of the f32 inputs.

use serde::{Deserialize, Serialize};

use crate::audio::manifest::DomainLabel;
use crate::error::{Error, Result};
use crate::model::{ContentPosterior, DomainLogits};
use crate::nn::softmax_ce;
use ndarray::ArrayView2;

/// Weights on the four loss terms: alpha scales reconstruction, beta the
/// posterior KL, gamma the speaker-domain term, tau the content-domain term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 10.0, beta: 0.5, gamma: 0.1, tau: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("tau", self.tau),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub dat_zc: f64,
    pub dat_zs: f64,
    pub total: f64,
}

/// Mean absolute error over all spectrogram cells.
pub fn recon_loss(pred: &ArrayView2<f32>, target: &ArrayView2<f32>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("empty reconstruction".into()));
    }
    let sum: f64 =
        pred.iter().zip(target.iter()).map(|(&p, &t)| f64::from(p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// KL divergence of the per-frame diagonal Gaussian posterior from the unit
/// Gaussian, summed over dimensions and averaged over frames:
/// mean_t 0.5 * sum_d (mu^2 + exp(lv) - 1 - lv).
pub fn kl_loss(post: &ContentPosterior) -> Result<f64> {
    if post.mean.dim() != post.log_variance.dim() {
        return Err(Error::ShapeMismatch(format!(
            "posterior mean {:?} vs log variance {:?}",
            post.mean.dim(),
            post.log_variance.dim()
        )));
    }
    if post.mean.nrows() == 0 {
        return Err(Error::ShapeMismatch("empty posterior".into()));
    }
    let sum: f64 = post
        .mean
        .iter()
        .zip(post.log_variance.iter())
        .map(|(&m, &lv)| {
            let (m, lv) = (f64::from(m), f64::from(lv));
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    Ok(sum / post.mean.nrows() as f64)
}

/// Softmax cross-entropy of the logits against one shared domain label,
/// averaged over rows.
pub fn domain_loss(logits: &DomainLogits, label: DomainLabel) -> Result<f64> {
    if logits.logits.nrows() == 0 {
        return Err(Error::ShapeMismatch("no logit rows".into()));
    }
    let labels = vec![label.index(); logits.logits.nrows()];
    Ok(softmax_ce(&logits.logits.view(), &labels).0)
}

/// total = alpha * recon + beta * kl + tau * dat_zc + gamma * dat_zs.
pub fn total_loss(
    recon: f64,
    kl: f64,
    dat_zc: f64,
    dat_zs: f64,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        recon,
        kl,
        dat_zc,
        dat_zs,
        total: w.alpha * recon + w.beta * kl + w.tau * dat_zc + w.gamma * dat_zs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma, w.tau), (10.0, 0.5, 0.1, 0.1));
        w.validate().unwrap();
        assert!(LossWeights { alpha: -1.0, ..w }.validate().is_err());
        assert!(LossWeights { beta: f64::NAN, ..w }.validate().is_err());
    }

    #[test]
    fn recon_hand_value() {
        let pred = arr2(&[[0.0f32, 1.0], [2.0, 3.0]]);
        let target = Array2::ones((2, 2));
        // |0-1| + |1-1| + |2-1| + |3-1| = 4, over 4 cells.
        assert_abs_diff_eq!(recon_loss(&pred.view(), &target.view()).unwrap(), 1.0);
        assert_abs_diff_eq!(recon_loss(&target.view(), &target.view()).unwrap(), 0.0);
        assert!(recon_loss(&pred.view(), &Array2::ones((1, 2)).view()).is_err());
    }

    #[test]
    fn recon_is_symmetric_and_scales() {
        let a = arr2(&[[0.3f32, -0.7], [1.2, 0.0]]);
        let b = arr2(&[[0.1f32, 0.4], [-0.2, 0.9]]);
        let ab = recon_loss(&a.view(), &b.view()).unwrap();
        let ba = recon_loss(&b.view(), &a.view()).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        let post = ContentPosterior {
            mean: Array2::zeros((3, 4)),
            log_variance: Array2::zeros((3, 4)),
        };
        assert_abs_diff_eq!(kl_loss(&post).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        // Unit mean, unit variance, one dim: 0.5 * (1 + 1 - 1 - 0) = 0.5.
        let post = ContentPosterior {
            mean: Array2::ones((1, 1)),
            log_variance: Array2::zeros((1, 1)),
        };
        assert_abs_diff_eq!(kl_loss(&post).unwrap(), 0.5, epsilon = 1e-7);

        // mu = [0.5, -1], lv = [0.2, -0.4], one frame.
        let post = ContentPosterior {
            mean: arr2(&[[0.5f32, -1.0]]),
            log_variance: arr2(&[[0.2f32, -0.4]]),
        };
        assert_abs_diff_eq!(kl_loss(&post).unwrap(), 0.6708614020979047, epsilon = 1e-6);

        // mu = 0, lv = ln 4, one dim: 0.5 * (4 - 1 - ln 4) = 0.80685...
        let post = ContentPosterior {
            mean: Array2::zeros((1, 1)),
            log_variance: arr2(&[[4.0f32.ln()]]),
        };
        assert_abs_diff_eq!(kl_loss(&post).unwrap(), 0.8068528194400547, epsilon = 1e-5);

        // Frame averaging: appending a standard-normal frame halves it.
        let post = ContentPosterior {
            mean: arr2(&[[0.5f32, -1.0], [0.0, 0.0]]),
            log_variance: arr2(&[[0.2f32, -0.4], [0.0, 0.0]]),
        };
        assert_abs_diff_eq!(kl_loss(&post).unwrap(), 0.33543070104895234, epsilon = 1e-6);
    }

    #[test]
    fn kl_gradient_matches_finite_difference() {
        let mut mean = arr2(&[[0.5f32, -1.0]]);
        let lv = arr2(&[[0.2f32, -0.4]]);
        // d/dmu = mu / frames, d/dlv = 0.5 (e^lv - 1) / frames.
        let analytic_mu = f64::from(mean[[0, 0]]);
        let analytic_lv = 0.5 * (f64::from(lv[[0, 1]]).exp() - 1.0);
        let h = 1e-3f32;
        let at = |mean: &Array2<f32>, lv: &Array2<f32>| {
            kl_loss(&ContentPosterior { mean: mean.clone(), log_variance: lv.clone() }).unwrap()
        };
        mean[[0, 0]] += h;
        let up = at(&mean, &lv);
        mean[[0, 0]] -= 2.0 * h;
        let down = at(&mean, &lv);
        mean[[0, 0]] += h;
        assert_abs_diff_eq!((up - down) / (2.0 * f64::from(h)), analytic_mu, epsilon = 1e-4);
        let mut lv2 = lv.clone();
        lv2[[0, 1]] += h;
        let up = at(&mean, &lv2);
        lv2[[0, 1]] -= 2.0 * h;
        let down = at(&mean, &lv2);
        assert_abs_diff_eq!((up - down) / (2.0 * f64::from(h)), analytic_lv, epsilon = 1e-4);
    }

    #[test]
    fn domain_loss_hand_values() {
        // Uninformative logits cost ln 2 for either label.
        let logits = DomainLogits { logits: arr2(&[[0.0f32, 0.0]]) };
        assert_abs_diff_eq!(
            domain_loss(&logits, DomainLabel::Clean).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            domain_loss(&logits, DomainLabel::Noisy).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );

        // Confidently correct is nearly free; confidently wrong is not.
        let logits = DomainLogits { logits: arr2(&[[20.0f32, -20.0]]) };
        assert!(domain_loss(&logits, DomainLabel::Clean).unwrap() < 1e-8);
        assert!(domain_loss(&logits, DomainLabel::Noisy).unwrap() > 39.0);

        // Logits (1, 0) against the noisy label: ln(1 + e).
        let logits = DomainLogits { logits: arr2(&[[1.0f32, 0.0]]) };
        assert_abs_diff_eq!(
            domain_loss(&logits, DomainLabel::Noisy).unwrap(),
            1.3132616875182228,
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(
            domain_loss(&logits, DomainLabel::Clean).unwrap(),
            0.3132616875182228,
            epsilon = 1e-7
        );
    }

    #[test]
    fn domain_loss_is_shift_invariant() {
        let base = arr2(&[[0.7f32, -0.4], [0.1, 0.2], [-1.0, 0.5]]);
        let shifted = base.mapv(|v| v + 3.25);
        let a = domain_loss(&DomainLogits { logits: base }, DomainLabel::Noisy).unwrap();
        let b = domain_loss(&DomainLogits { logits: shifted }, DomainLabel::Noisy).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }

    #[test]
    fn total_combination_is_exact() {
        let w = LossWeights::default();
        let l = total_loss(1.0, 2.0, 3.0, 4.0, &w);
        // Same-expression equality in f64, then the decimal value.
        assert_eq!(l.total.to_bits(), (10.0f64 * 1.0 + 0.5 * 2.0 + 0.1 * 3.0 + 0.1 * 4.0).to_bits());
        assert!((l.total - 11.7).abs() < 1e-6);
        assert_eq!((l.recon, l.kl, l.dat_zc, l.dat_zs), (1.0, 2.0, 3.0, 4.0));

        // tau multiplies the content term, gamma the speaker term.
        let w = LossWeights { alpha: 0.0, beta: 0.0, gamma: 2.0, tau: 5.0 };
        let l = total_loss(0.0, 0.0, 1.0, 1.0, &w);
        assert_abs_diff_eq!(l.total, 7.0);
        let l = total_loss(0.0, 0.0, 1.0, 0.0, &w);
        assert_abs_diff_eq!(l.total, 5.0);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-3.0f32..3.0, 8),
            lv in proptest::collection::vec(-5.0f32..5.0, 8),
        ) {
            let mean = Array2::from_shape_vec((2, 4), mu).unwrap();
            let log_variance = Array2::from_shape_vec((2, 4), lv).unwrap();
            let kl = kl_loss(&ContentPosterior { mean, log_variance }).unwrap();
            prop_assert!(kl >= -1e-9, "kl {kl}");
        }

        #[test]
        fn recon_nonnegative_and_zero_iff_equal(
            vals in proptest::collection::vec(-10.0f32..10.0, 6),
        ) {
            let a = Array2::from_shape_vec((2, 3), vals).unwrap();
            let l = recon_loss(&a.view(), &a.view()).unwrap();
            prop_assert!(l == 0.0);
            let b = a.mapv(|v| v + 1.0);
            let l = recon_loss(&a.view(), &b.view()).unwrap();
            prop_assert!((l - 1.0).abs() < 1e-6);
        }
    }
}
