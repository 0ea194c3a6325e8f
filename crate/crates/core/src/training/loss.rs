//! Classification and segmentation losses with their derivatives with
//! respect to the anomaly probabilities.

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// Binary cross-entropy of an anomaly probability against an image label.
pub fn cross_entropy_loss(anomaly_prob: f64, label: bool) -> f64 {
    let (p, _) = clamp_prob(anomaly_prob);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d CE / d p`; zero where the clamp is active.
pub(crate) fn cross_entropy_grad(anomaly_prob: f64, label: bool) -> f64 {
    let (p, clamped) = clamp_prob(anomaly_prob);
    if clamped {
        0.0
    } else if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

fn check_shapes(prob: &Grid, mask: &Mask) -> Result<()> {
    if prob.height != mask.height || prob.width != mask.width {
        return Err(Error::Shape(format!(
            "probability map {}x{} vs mask {}x{}",
            prob.height, prob.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// Mean over pixels of `-alpha (1 - p_t)^gamma ln p_t`, where `p_t` is the
/// probability assigned to the pixel's true class.
pub fn focal_loss(prob: &Grid, mask: &Mask, gamma: f64, alpha: f64) -> Result<f64> {
    check_shapes(prob, mask)?;
    Ok(focal_terms(&prob.data, &mask.data, gamma, alpha).0)
}

/// Loss value and `d loss / d p_i` for every pixel.
pub(crate) fn focal_terms(prob: &[f64], mask: &[bool], gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let n = prob.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(prob.len());
    for (&p, &m) in prob.iter().zip(mask) {
        let raw_pt = if m { p } else { 1.0 - p };
        let (pt, clamped) = clamp_prob(raw_pt);
        let q = 1.0 - pt;
        loss += -alpha * q.powf(gamma) * pt.ln();
        let d_pt = if clamped {
            0.0
        } else {
            // d/dpt [-a q^g ln pt] = a (g q^(g-1) ln pt - q^g / pt)
            let qg1 = if gamma == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0)
            };
            alpha * (qg1 * pt.ln() - q.powf(gamma) / pt)
        };
        grad.push(if m { d_pt } else { -d_pt } / n);
    }
    (loss / n, grad)
}

/// Soft Dice: `1 - (2 sum(p m) + s) / (sum(p) + sum(m) + s)`.
pub fn dice_loss(prob: &Grid, mask: &Mask, smooth: f64) -> Result<f64> {
    check_shapes(prob, mask)?;
    Ok(dice_terms(&prob.data, &mask.data, smooth).0)
}

pub(crate) fn dice_terms(prob: &[f64], mask: &[bool], smooth: f64) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_m = 0.0;
    for (&p, &m) in prob.iter().zip(mask) {
        sum_p += p;
        if m {
            inter += p;
            sum_m += 1.0;
        }
    }
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_m + smooth;
    if den == 0.0 {
        return (0.0, vec![0.0; prob.len()]);
    }
    let loss = 1.0 - num / den;
    let grad = mask
        .iter()
        .map(|&m| {
            let dnum = if m { 2.0 } else { 0.0 };
            -(dnum * den - num) / (den * den)
        })
        .collect();
    (loss, grad)
}
