//! Alpha-balanced focal loss.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the positive class; negatives get `1 - alpha`.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.75, gamma: 2.0 }
    }
}

impl LossConfig {
    fn alpha_t(&self, label: Label) -> f64 {
        if label == Label::Pos {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// `-alpha_t (1 - p_t)^gamma ln p_t` for one position.
pub fn focal_term(p_t: f64, label: Label, lc: &LossConfig) -> f64 {
    -lc.alpha_t(label) * (1.0 - p_t).powf(lc.gamma) * p_t.ln()
}

/// Mean focal loss over the non-pad positions; 0 when every position is pad.
pub fn focal_loss(probs: &[[f64; 2]], labels: &[Label], lc: &LossConfig) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &l) in probs.iter().zip(labels) {
        if l.is_pad() {
            continue;
        }
        let p_t = if l == Label::Pos { p[1] } else { p[0] };
        sum += focal_term(p_t, l, lc);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal term and its gradient with respect to the logit pair `(z0, z1)`,
/// computed from logits for numerical stability.
pub(crate) fn focal_from_logits(z: [f64; 2], label: Label, lc: &LossConfig) -> (f64, [f64; 2]) {
    let t = usize::from(label == Label::Pos);
    let m = z[1 - t] - z[t];
    let log_pt = -softplus(m);
    let pt = log_pt.exp();
    // 1 - p_t = sigmoid(m), without cancellation.
    let q = (-softplus(-m)).exp();
    let a = lc.alpha_t(label);
    let qg = q.powf(lc.gamma);
    let loss = -a * qg * log_pt;
    let dzt = a * (lc.gamma * pt * qg * log_pt - qg * q);
    let mut dz = [0.0; 2];
    dz[t] = dzt;
    dz[1 - t] = -dzt;
    (loss, dz)
}

/// `(p0, p1)` from a logit pair.
pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let p1 = (-softplus(z[0] - z[1])).exp();
    let p0 = (-softplus(z[1] - z[0])).exp();
    [p0, p1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_value() {
        let lc = LossConfig { alpha: 0.75, gamma: 2.0 };
        let got = focal_loss(&[[0.1, 0.9]], &[Label::Pos], &lc);
        let hand = 0.75 * 0.01 * -(0.9f64).ln();
        assert!((got - hand).abs() < 1e-15);
        assert!((got - 7.9020386743e-4).abs() < 1e-14);
    }

    #[test]
    fn logit_gradient_matches_differences() {
        let lc = LossConfig::default();
        for (z, l) in [([0.3, -1.2], Label::Pos), ([2.0, 0.5], Label::Neg), ([-0.4, 0.1], Label::Neg)] {
            let (_, g) = focal_from_logits(z, l, &lc);
            for i in 0..2 {
                let h = 1e-6;
                let mut zp = z;
                zp[i] += h;
                let mut zm = z;
                zm[i] -= h;
                let fd = (focal_from_logits(zp, l, &lc).0 - focal_from_logits(zm, l, &lc).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn logits_agree_with_probabilities() {
        let lc = LossConfig::default();
        let z = [0.7, -0.2];
        let p = softmax2(z);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        let (l, _) = focal_from_logits(z, Label::Neg, &lc);
        assert!((l - focal_term(p[0], Label::Neg, &lc)).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_gradient_is_scaled_cross_entropy() {
        for alpha in [0.5, 0.75] {
            let lc = LossConfig { alpha, gamma: 0.0 };
            for (z, l) in [([0.3, -1.2], Label::Pos), ([2.0, 0.5], Label::Neg)] {
                let p = softmax2(z);
                let t = usize::from(l == Label::Pos);
                let a = if t == 1 { alpha } else { 1.0 - alpha };
                let (_, g) = focal_from_logits(z, l, &lc);
                for c in 0..2 {
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    assert!((g[c] - a * (p[c] - onehot)).abs() < 1e-15);
                }
            }
        }
    }
}
