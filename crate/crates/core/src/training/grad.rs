//! Closed-form gradients of the training objective with respect to every
//! weight entry, chained through cosine normalization and the temperature
//! softmax. Features are frozen and receive no gradient.

use rayon::prelude::*;

use super::loss::{cross_entropy_grad, cross_entropy_loss, dice_terms, focal_terms};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{anomaly_probability, norm_f32, FeatureStack, HeadWeights, WeightBank};
use crate::raster::Mask;

/// Features of one training image with its mask max-pooled onto each
/// layer's patch grid.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub id: String,
    pub features: FeatureStack,
    pub layer_masks: Vec<Mask>,
    pub label: bool,
}

impl GradSample {
    pub fn new(
        id: impl Into<String>,
        features: FeatureStack,
        image_mask: &Mask,
        label: bool,
    ) -> Result<Self> {
        let layer_masks = features
            .layers
            .iter()
            .map(|l| image_mask.resize_max_pool(l.grid_h, l.grid_w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.into(),
            features,
            layer_masks,
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            normal: vec![0.0; dim],
            anomaly: vec![0.0; dim],
        }
    }

    fn add_scaled(&mut self, other: &HeadGrad, scale: f64) {
        for (a, b) in self.normal.iter_mut().zip(&other.normal) {
            *a += scale * b;
        }
        for (a, b) in self.anomaly.iter_mut().zip(&other.anomaly) {
            *a += scale * b;
        }
    }

    pub fn add(&mut self, other: &HeadGrad) {
        self.add_scaled(other, 1.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.normal
            .iter()
            .chain(&self.anomaly)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub cls: HeadGrad,
    pub seg: HeadGrad,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.ce += scale * other.ce;
        self.focal += scale * other.focal;
        self.dice += scale * other.dice;
        self.total += scale * other.total;
    }
}

/// Gradient of the batch-mean loss, shaped like the weight bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub loss: LossBreakdown,
}

/// Normalized head columns plus their original norms.
struct HeadGeometry {
    unit_n: Vec<f64>,
    unit_a: Vec<f64>,
    norm_n: f64,
    norm_a: f64,
}

impl HeadGeometry {
    fn new(head: &HeadWeights) -> Result<Self> {
        head.validate()?;
        let norm_n = norm_f32(&head.normal);
        let norm_a = norm_f32(&head.anomaly);
        Ok(Self {
            unit_n: head.normal.iter().map(|&x| x as f64 / norm_n).collect(),
            unit_a: head.anomaly.iter().map(|&x| x as f64 / norm_a).collect(),
            norm_n,
            norm_a,
        })
    }

    /// Unit token and its cosines `(s_n, s_a)`.
    fn project(&self, token: &[f32], id: &str) -> Result<(Vec<f64>, f64, f64)> {
        let n = norm_f32(token);
        if n == 0.0 {
            return Err(Error::Numeric(format!("sample {id}: zero-norm token")));
        }
        let unit: Vec<f64> = token.iter().map(|&t| t as f64 / n).collect();
        let sn = unit.iter().zip(&self.unit_n).map(|(a, b)| a * b).sum();
        let sa = unit.iter().zip(&self.unit_a).map(|(a, b)| a * b).sum();
        Ok((unit, sn, sa))
    }

    /// Adds `dz * d z / d w` with `z = (s_a - s_n) / tau` folded into `dz`.
    fn accumulate(&self, grad: &mut HeadGrad, unit: &[f64], sn: f64, sa: f64, dz: f64) {
        let ca = dz / self.norm_a;
        let cn = dz / self.norm_n;
        for k in 0..unit.len() {
            grad.anomaly[k] += ca * (unit[k] - sa * self.unit_a[k]);
            grad.normal[k] -= cn * (unit[k] - sn * self.unit_n[k]);
        }
    }
}

fn sample_gradient(
    sample: &GradSample,
    weights: &WeightBank,
    cfg: &TrainConfig,
) -> Result<(Vec<LayerGrad>, LossBreakdown)> {
    weights.check_compatible(&sample.features)?;
    let tau = weights.tau as f64;
    let lw = cfg.loss_weights;
    let mut loss = LossBreakdown::default();
    let mut grads = Vec::with_capacity(weights.layers.len());
    for ((layer, w), mask) in sample
        .features
        .layers
        .iter()
        .zip(&weights.layers)
        .zip(&sample.layer_masks)
    {
        let cls = HeadGeometry::new(&w.cls)?;
        let seg = HeadGeometry::new(&w.seg)?;
        let mut g = LayerGrad {
            cls: HeadGrad::zeros(layer.dim),
            seg: HeadGrad::zeros(layer.dim),
        };

        let (unit, sn, sa) = cls.project(&layer.global_token, &sample.id)?;
        let p = anomaly_probability(sn, sa, tau);
        let ce = cross_entropy_loss(p, sample.label);
        loss.ce += ce;
        if lw.ce != 0.0 {
            let dz = lw.ce * cross_entropy_grad(p, sample.label) * p * (1.0 - p) / tau;
            cls.accumulate(&mut g.cls, &unit, sn, sa, dz);
        }

        let cells = layer.cells();
        let mut units = Vec::with_capacity(cells);
        let mut probs = Vec::with_capacity(cells);
        for c in 0..cells {
            let (u, sn, sa) = seg.project(layer.cell(c), &sample.id)?;
            probs.push(anomaly_probability(sn, sa, tau));
            units.push((u, sn, sa));
        }
        let (focal, dfocal) = focal_terms(&probs, &mask.data, cfg.focal_gamma, cfg.focal_alpha);
        let (dice, ddice) = dice_terms(&probs, &mask.data, cfg.dice_smooth);
        loss.focal += focal;
        loss.dice += dice;
        if lw.focal != 0.0 || lw.dice != 0.0 {
            for (c, (u, sn, sa)) in units.iter().enumerate() {
                let p = probs[c];
                let dp = lw.focal * dfocal[c] + lw.dice * ddice[c];
                let dz = dp * p * (1.0 - p) / tau;
                seg.accumulate(&mut g.seg, u, *sn, *sa, dz);
            }
        }
        grads.push(g);
    }
    loss.total = lw.ce * loss.ce + lw.focal * loss.focal + lw.dice * loss.dice;
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("sample {}: non-finite loss", sample.id)));
    }
    Ok((grads, loss))
}

/// Gradient of the batch-mean of the per-sample loss
/// `sum_layers (w_ce CE + w_focal Focal + w_dice Dice)`.
pub fn compute_gradients(batch: &[GradSample], weights: &WeightBank, cfg: &TrainConfig) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let per_sample = batch
        .par_iter()
        .map(|s| sample_gradient(s, weights, cfg))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut layers: Vec<LayerGrad> = weights
        .layers
        .iter()
        .map(|w| LayerGrad {
            cls: HeadGrad::zeros(w.dim()),
            seg: HeadGrad::zeros(w.dim()),
        })
        .collect();
    let mut loss = LossBreakdown::default();
    // fixed summation order keeps results independent of thread count
    for (g, l) in &per_sample {
        for (acc, lg) in layers.iter_mut().zip(g) {
            acc.cls.add_scaled(&lg.cls, scale);
            acc.seg.add_scaled(&lg.seg, scale);
        }
        loss.add_scaled(l, scale);
    }
    Ok(Gradients { layers, loss })
}

/// Batch-mean loss without gradients.
pub fn batch_loss(batch: &[GradSample], weights: &WeightBank, cfg: &TrainConfig) -> Result<LossBreakdown> {
    Ok(compute_gradients(batch, weights, cfg)?.loss)
}
