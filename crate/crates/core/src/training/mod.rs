//! Learning the per-layer classification and segmentation heads from an
//! auxiliary labeled dataset.

pub mod augment;
pub mod grad;
pub mod loss;

use std::fmt::Write as _;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub use augment::{grid_crop, grid_crop_with_cell, grid_mosaic, TrainSample};
pub use grad::{batch_loss, compute_gradients, GradSample, Gradients, HeadGrad, LayerGrad, LossBreakdown};
pub use loss::{cross_entropy_loss, dice_loss, focal_loss};

use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::io::pnm::{read_image, read_mask_sized};
use crate::io::provider::FeatureProvider;
use crate::model::{
    FeatureStack, HeadWeights, LayerWeights, Provenance, WeightBank, DEFAULT_LAMBDA_F, DEFAULT_LAMBDA_P,
    DEFAULT_TAU,
};
use crate::raster::Mask;
use crate::rng::derived_rng;

pub const BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Optimizer::Adam { .. } => "adam",
            Optimizer::Sgd => "sgd",
        }
    }
}

/// Switches mirroring the ablation table: decoupled classification and
/// segmentation heads, per-layer heads, and class-aware augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub decouple_cls_seg: bool,
    pub decouple_layers: bool,
    pub use_caa: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            decouple_cls_seg: true,
            decouple_layers: true,
            use_caa: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            focal: 1.0,
            dice: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub optimizer: Optimizer,
    pub caa_probability: f64,
    pub caa_grids: Vec<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub loss_weights: LossWeights,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 0.001,
            tau: DEFAULT_TAU as f64,
            lambda_p: DEFAULT_LAMBDA_P as f64,
            lambda_f: DEFAULT_LAMBDA_F as f64,
            optimizer: Optimizer::adam(),
            caa_probability: 0.5,
            caa_grids: vec![2, 3],
            seed: 0,
            ablation: Ablation::default(),
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            dice_smooth: 1.0,
            loss_weights: LossWeights::default(),
            batch_size: BATCH_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.caa_probability) {
            return Err(Error::Config(format!(
                "CAA probability must lie in [0, 1], got {}",
                self.caa_probability
            )));
        }
        if self.caa_grids.is_empty() || self.caa_grids.contains(&0) {
            return Err(Error::Config(
                "CAA grid sizes must be a non-empty set of integers >= 1".into(),
            ));
        }
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_f", self.lambda_f)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,total,ce,focal,dice\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{:.8},{:.8},{:.8},{:.8}",
            e.epoch, e.loss.total, e.loss.ce, e.loss.focal, e.loss.dice
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: WeightBank,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy)]
enum Head {
    Cls = 0,
    Seg = 1,
}

/// Which independent parameter set each (layer, head) reads, given the
/// ablation switches.
struct Tying {
    layers: usize,
    ablation: Ablation,
}

impl Tying {
    fn groups(&self) -> usize {
        let per_layer = if self.ablation.decouple_cls_seg { 2 } else { 1 };
        let layers = if self.ablation.decouple_layers {
            self.layers
        } else {
            1
        };
        per_layer * layers
    }

    fn group(&self, layer: usize, head: Head) -> usize {
        let h = if self.ablation.decouple_cls_seg {
            head as usize
        } else {
            0
        };
        let per_layer = if self.ablation.decouple_cls_seg { 2 } else { 1 };
        let l = if self.ablation.decouple_layers { layer } else { 0 };
        l * per_layer + h
    }
}

/// One independent two-column weight matrix, `[normal | anomaly]`.
#[derive(Clone)]
struct Param {
    values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn head(&self) -> HeadWeights {
        let d = self.values.len() / 2;
        HeadWeights {
            normal: self.values[..d].iter().map(|&x| x as f32).collect(),
            anomaly: self.values[d..].iter().map(|&x| x as f32).collect(),
        }
    }

    fn step(&mut self, grad: &[f64], opt: Optimizer, lr: f64, t: i32) {
        match opt {
            Optimizer::Sgd => {
                for (w, g) in self.values.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..self.values.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    self.values[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            // round through f32 so the stored bank equals the master copy
            return v.iter().map(|x| (x / n) as f32 as f64).collect();
        }
    }
}

fn assemble(
    params: &[Param],
    tying: &Tying,
    blocks: &[u16],
    cfg: &TrainConfig,
    meta: &Provenance,
) -> WeightBank {
    WeightBank {
        layers: blocks
            .iter()
            .enumerate()
            .map(|(l, &block_index)| LayerWeights {
                block_index,
                cls: params[tying.group(l, Head::Cls)].head(),
                seg: params[tying.group(l, Head::Seg)].head(),
            })
            .collect(),
        tau: cfg.tau as f32,
        lambda_p: cfg.lambda_p as f32,
        lambda_f: cfg.lambda_f as f32,
        metadata: meta.clone(),
    }
}

/// Seeded unit-norm Gaussian initialization for the given `(block, dim)`
/// layout, honouring the tying implied by the ablation switches.
pub fn init_weights(layout: &[(u16, usize)], cfg: &TrainConfig) -> Result<WeightBank> {
    let (params, tying) = init_params(layout, cfg)?;
    let blocks: Vec<u16> = layout.iter().map(|l| l.0).collect();
    Ok(assemble(&params, &tying, &blocks, cfg, &Provenance::default()))
}

fn init_params(layout: &[(u16, usize)], cfg: &TrainConfig) -> Result<(Vec<Param>, Tying)> {
    if layout.is_empty() {
        return Err(Error::Config("no layers to train".into()));
    }
    if !cfg.ablation.decouple_layers && layout.iter().any(|l| l.1 != layout[0].1) {
        return Err(Error::Config(
            "sharing weights across layers needs equal token dims".into(),
        ));
    }
    let tying = Tying {
        layers: layout.len(),
        ablation: cfg.ablation,
    };
    // Both heads of a layer start from the same draw, so switching
    // decoupling on or off changes only how the heads are updated.
    let layers = if cfg.ablation.decouple_layers {
        layout.len()
    } else {
        1
    };
    let heads = if cfg.ablation.decouple_cls_seg { 2 } else { 1 };
    let mut params = Vec::with_capacity(tying.groups());
    for (l, &(_, d)) in layout.iter().take(layers).enumerate() {
        let mut rng = derived_rng(cfg.seed, &[0x1417, l as u64]);
        let mut values = unit_gaussian(&mut rng, d);
        values.extend(unit_gaussian(&mut rng, d));
        for _ in 0..heads {
            params.push(Param::new(values.clone()));
        }
    }
    Ok((params, tying))
}

/// A loaded training image: cached features, its full-resolution mask and,
/// when the provider can re-extract, the raster for augmentation.
struct Prepared {
    entry: ManifestEntry,
    features: FeatureStack,
    mask: Mask,
    sample: Option<TrainSample>,
}

fn prepare(entry: &ManifestEntry, provider: &dyn FeatureProvider) -> Result<Prepared> {
    let features = provider.features_for(entry)?;
    let (h, w) = (features.image_height, features.image_width);
    let mask = match &entry.mask_path {
        Some(p) => read_mask_sized(p, h, w)?,
        None if entry.is_anomaly() => {
            return Err(Error::Config(format!(
                "{}: anomalous training entry without mask",
                entry.id
            )))
        }
        None => Mask::empty(h, w),
    };
    if mask.any() != entry.is_anomaly() {
        return Err(Error::Validation(format!(
            "{}: label {} disagrees with a mask of {} anomalous pixels",
            entry.id,
            entry.label,
            mask.count()
        )));
    }
    let sample = match (&entry.image_path, provider.supports_rasters()) {
        (Some(path), true) => Some(TrainSample::new(
            entry.id.clone(),
            read_image(path)?,
            mask.clone(),
            entry.is_anomaly(),
            entry.class_name.clone(),
        )?),
        _ => None,
    };
    Ok(Prepared {
        entry: entry.clone(),
        features,
        mask,
        sample,
    })
}

fn augmented_or_cached(
    idx: usize,
    prepared: &[Prepared],
    pool: &[&TrainSample],
    provider: &dyn FeatureProvider,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<GradSample> {
    let p = &prepared[idx];
    let mut rng = derived_rng(cfg.seed, &[0xCAA, epoch as u64, idx as u64]);
    if let (true, Some(sample)) = (cfg.ablation.use_caa, &p.sample) {
        if rng.gen_bool(cfg.caa_probability) {
            let n = cfg.caa_grids[rng.gen_range(0..cfg.caa_grids.len())];
            let aug = if rng.gen_bool(0.5) {
                grid_mosaic(sample, pool, n, &mut rng)?
            } else {
                grid_crop(sample, n, &mut rng)?
            };
            let features = provider.extract(&aug.image, &aug.id)?;
            return GradSample::new(aug.id, features, &aug.mask, aug.label);
        }
    }
    GradSample::new(
        p.entry.id.clone(),
        p.features.clone(),
        &p.mask,
        p.entry.is_anomaly(),
    )
}

/// Trains on the manifest's train split.
pub fn train(
    manifest: &DatasetManifest,
    provider: &dyn FeatureProvider,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    let anomalies = entries.iter().filter(|e| e.is_anomaly()).count();
    if anomalies == 0 || anomalies == entries.len() {
        return Err(Error::Config(format!(
            "training split needs both normal and anomalous images ({} of {} anomalous)",
            anomalies,
            entries.len()
        )));
    }
    let prepared = entries
        .par_iter()
        .map(|e| prepare(e, provider))
        .collect::<Result<Vec<_>>>()?;
    let layout: Vec<(u16, usize)> = prepared[0]
        .features
        .layers
        .iter()
        .map(|l| (l.block_index, l.dim))
        .collect();
    for p in &prepared {
        let other: Vec<(u16, usize)> = p.features.layers.iter().map(|l| (l.block_index, l.dim)).collect();
        if other != layout {
            return Err(Error::Config(format!(
                "{}: layer layout {:?} differs from {:?}",
                p.entry.id, other, layout
            )));
        }
    }
    if cfg.ablation.use_caa && prepared.iter().all(|p| p.sample.is_none()) {
        warn!(
            "provider {} cannot re-extract rasters; augmentation disabled",
            provider.describe()
        );
    }

    let meta = Provenance {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        optimizer: cfg.optimizer.name().into(),
        caa_probability: cfg.caa_probability,
        caa_grids: cfg.caa_grids.clone(),
        decouple_cls_seg: cfg.ablation.decouple_cls_seg,
        decouple_layers: cfg.ablation.decouple_layers,
        use_caa: cfg.ablation.use_caa,
        provider: provider.describe(),
        train_samples: prepared.len(),
    };
    let blocks: Vec<u16> = layout.iter().map(|l| l.0).collect();
    let (mut params, tying) = init_params(&layout, cfg)?;
    let mut bank = assemble(&params, &tying, &blocks, cfg, &meta);
    let pool: Vec<&TrainSample> = prepared.iter().filter_map(|p| p.sample.as_ref()).collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, &[0x5AFF, epoch as u64]));
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .par_iter()
                .map(|&i| augmented_or_cached(i, &prepared, &pool, provider, cfg, epoch))
                .collect::<Result<Vec<_>>>()?;
            let grads = compute_gradients(&batch, &bank, cfg)?;
            let mut tied: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            for (l, lg) in grads.layers.iter().enumerate() {
                for (head, hg) in [(Head::Cls, &lg.cls), (Head::Seg, &lg.seg)] {
                    let g = &mut tied[tying.group(l, head)];
                    let d = hg.normal.len();
                    for k in 0..d {
                        g[k] += hg.normal[k];
                        g[d + k] += hg.anomaly[k];
                    }
                }
            }
            step += 1;
            for (p, g) in params.iter_mut().zip(&tied) {
                p.step(g, cfg.optimizer, cfg.learning_rate, step);
            }
            bank = assemble(&params, &tying, &blocks, cfg, &meta);
            let w = chunk.len() as f64 / prepared.len() as f64;
            epoch_loss.ce += w * grads.loss.ce;
            epoch_loss.focal += w * grads.loss.focal;
            epoch_loss.dice += w * grads.loss.dice;
            epoch_loss.total += w * grads.loss.total;
        }
        debug!("epoch {epoch}: loss {:.5}", epoch_loss.total);
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: epoch_loss,
        });
    }
    bank.validate()?;
    Ok(TrainOutcome { weights: bank, log })
}
