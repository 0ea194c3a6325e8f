//! Data model and zero-shot scoring: cosine similarity against per-layer
//! two-class weights, temperature softmax, cross-layer averaging and the
//! fusion of the image probability with the map maximum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{upsample_map, Grid};

pub const DEFAULT_TAU: f32 = 0.07;
pub const DEFAULT_LAMBDA_P: f32 = 0.5;
pub const DEFAULT_LAMBDA_F: f32 = 0.5;

/// Tokens one transformer block emits for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub block_index: u16,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub global_token: Vec<f32>,
    /// `[grid_h][grid_w][dim]`, row-major.
    pub patch_tokens: Vec<f32>,
}

impl LayerFeatures {
    pub fn new(
        block_index: u16,
        grid_h: usize,
        grid_w: usize,
        global_token: Vec<f32>,
        patch_tokens: Vec<f32>,
    ) -> Result<Self> {
        let dim = global_token.len();
        if dim == 0 {
            return Err(Error::Shape(format!("block {block_index}: empty global token")));
        }
        if grid_h * grid_w == 0 {
            return Err(Error::Shape(format!("block {block_index}: empty patch grid")));
        }
        if patch_tokens.len() != grid_h * grid_w * dim {
            return Err(Error::Shape(format!(
                "block {block_index}: expected {grid_h}x{grid_w}x{dim} patch values, got {}",
                patch_tokens.len()
            )));
        }
        let layer = Self {
            block_index,
            dim,
            grid_h,
            grid_w,
            global_token,
            patch_tokens,
        };
        layer.check_finite()?;
        Ok(layer)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(k) = self.global_token.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "block {}: non-finite global token value at component {k}",
                self.block_index
            )));
        }
        if let Some(k) = self.patch_tokens.iter().position(|v| !v.is_finite()) {
            let cell = k / self.dim;
            return Err(Error::Validation(format!(
                "block {}: non-finite patch token at cell ({}, {}) component {}",
                self.block_index,
                cell / self.grid_w,
                cell % self.grid_w,
                k % self.dim
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        self.cell(row * self.grid_w + col)
    }

    #[inline]
    pub fn cell(&self, index: usize) -> &[f32] {
        &self.patch_tokens[index * self.dim..(index + 1) * self.dim]
    }
}

/// Frozen multi-level representation of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<LayerFeatures>,
    pub image_height: usize,
    pub image_width: usize,
    pub source_id: String,
}

impl FeatureStack {
    pub fn new(
        layers: Vec<LayerFeatures>,
        image_height: usize,
        image_width: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("feature stack has no layers".into()));
        }
        if layers.windows(2).any(|w| w[0].block_index >= w[1].block_index) {
            return Err(Error::Validation(
                "layers must be ordered by strictly ascending block index".into(),
            ));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::Shape("image size must be positive".into()));
        }
        Ok(Self {
            layers,
            image_height,
            image_width,
            source_id: source_id.into(),
        })
    }

    pub fn block_indices(&self) -> Vec<u16> {
        self.layers.iter().map(|l| l.block_index).collect()
    }

    /// Keeps only the listed blocks, in ascending order.
    pub fn select_blocks(&self, blocks: &[u16]) -> Result<FeatureStack> {
        let mut layers = Vec::with_capacity(blocks.len());
        let mut wanted = blocks.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        for b in wanted {
            let layer = self.layers.iter().find(|l| l.block_index == b).ok_or_else(|| {
                Error::Config(format!("block {b} not present in features of {}", self.source_id))
            })?;
            layers.push(layer.clone());
        }
        FeatureStack::new(
            layers,
            self.image_height,
            self.image_width,
            self.source_id.clone(),
        )
    }
}

/// A two-class weight matrix `[d x 2]` stored as its two columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub normal: Vec<f32>,
    pub anomaly: Vec<f32>,
}

impl HeadWeights {
    pub fn new(normal: Vec<f32>, anomaly: Vec<f32>) -> Result<Self> {
        let head = Self { normal, anomaly };
        head.validate()?;
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal.len() != self.anomaly.len() || self.normal.is_empty() {
            return Err(Error::Shape(format!(
                "weight columns have lengths {} and {}",
                self.normal.len(),
                self.anomaly.len()
            )));
        }
        for (name, col) in [("normal", &self.normal), ("anomaly", &self.anomaly)] {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} column has non-finite entries")));
            }
            if norm_f32(col) == 0.0 {
                return Err(Error::Domain(format!("{name} column is the zero vector")));
            }
        }
        Ok(())
    }

    /// Exchanges the normal and anomaly columns.
    pub fn swapped(&self) -> HeadWeights {
        HeadWeights {
            normal: self.anomaly.clone(),
            anomaly: self.normal.clone(),
        }
    }
}

/// Decoupled classification and segmentation heads of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub block_index: u16,
    pub cls: HeadWeights,
    pub seg: HeadWeights,
}

impl LayerWeights {
    pub fn dim(&self) -> usize {
        self.cls.dim()
    }
}

/// Training provenance stored next to the learned weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: String,
    pub caa_probability: f64,
    pub caa_grids: Vec<usize>,
    pub decouple_cls_seg: bool,
    pub decouple_layers: bool,
    pub use_caa: bool,
    pub provider: String,
    pub train_samples: usize,
}

/// The learned artifact: per-layer heads plus the scoring constants.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    pub layers: Vec<LayerWeights>,
    pub tau: f32,
    pub lambda_p: f32,
    pub lambda_f: f32,
    pub metadata: Provenance,
}

impl WeightBank {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("weight bank has no layers".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Domain(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_f", self.lambda_f)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for layer in &self.layers {
            layer.cls.validate()?;
            layer.seg.validate()?;
            if layer.cls.dim() != layer.seg.dim() {
                return Err(Error::Shape(format!(
                    "block {}: cls dim {} != seg dim {}",
                    layer.block_index,
                    layer.cls.dim(),
                    layer.seg.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn block_indices(&self) -> Vec<u16> {
        self.layers.iter().map(|l| l.block_index).collect()
    }

    /// Fails unless `features` carries exactly this bank's blocks with matching dims.
    pub fn check_compatible(&self, features: &FeatureStack) -> Result<()> {
        if self.layers.len() != features.layers.len() {
            return Err(Error::Config(format!(
                "weights cover blocks {:?} but features of {} carry {:?}",
                self.block_indices(),
                features.source_id,
                features.block_indices()
            )));
        }
        for (w, f) in self.layers.iter().zip(&features.layers) {
            if w.block_index != f.block_index {
                return Err(Error::Config(format!(
                    "block order mismatch: weights {:?}, features {:?}",
                    self.block_indices(),
                    features.block_indices()
                )));
            }
            if w.dim() != f.dim {
                return Err(Error::Config(format!(
                    "block {}: weight dim {} != feature dim {}",
                    w.block_index,
                    w.dim(),
                    f.dim
                )));
            }
        }
        Ok(())
    }
}

/// Output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyPrediction {
    /// Full-resolution anomaly map in `[0, 1]`.
    pub map: Grid,
    pub score: f64,
    pub layer_maps: Vec<Grid>,
    pub layer_scores: Vec<f64>,
}

pub(crate) fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anomaly-class probability of `softmax([s_n, s_a] / tau)`.
pub fn two_class_softmax(sim_normal: f64, sim_anomaly: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    Ok(anomaly_probability(sim_normal, sim_anomaly, tau))
}

#[inline]
pub(crate) fn anomaly_probability(sim_normal: f64, sim_anomaly: f64, tau: f64) -> f64 {
    let zn = sim_normal / tau;
    let za = sim_anomaly / tau;
    let m = zn.max(za);
    let en = (zn - m).exp();
    let ea = (za - m).exp();
    ea / (en + ea)
}

/// A head with its columns normalized once, so per-token scoring is two dots.
pub(crate) struct UnitHead {
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

impl UnitHead {
    pub fn new(head: &HeadWeights) -> Result<Self> {
        head.validate()?;
        let unit = |col: &[f32]| {
            let n = norm_f32(col);
            col.iter().map(|&x| x as f64 / n).collect::<Vec<f64>>()
        };
        Ok(Self {
            normal: unit(&head.normal),
            anomaly: unit(&head.anomaly),
        })
    }

    /// Cosine similarities `(s_n, s_a)` of a token against both columns.
    #[inline]
    pub fn similarities(&self, token: &[f32]) -> Result<(f64, f64)> {
        let n = norm_f32(token);
        if n == 0.0 {
            return Err(Error::Domain("cosine similarity of a zero token".into()));
        }
        let mut dn = 0.0;
        let mut da = 0.0;
        for ((&t, wn), wa) in token.iter().zip(&self.normal).zip(&self.anomaly) {
            let t = t as f64;
            dn += t * wn;
            da += t * wa;
        }
        Ok(((dn / n).clamp(-1.0, 1.0), (da / n).clamp(-1.0, 1.0)))
    }

    #[inline]
    pub fn probability(&self, token: &[f32], tau: f64) -> Result<f64> {
        let (sn, sa) = self.similarities(token)?;
        Ok(anomaly_probability(sn, sa, tau))
    }
}

/// Per-layer zero-shot map over the patch grid and image probability from
/// the global token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScore {
    pub map: Grid,
    pub score: f64,
}

fn score_with_heads(
    features: &LayerFeatures,
    cls: &HeadWeights,
    seg: &HeadWeights,
    tau: f64,
) -> Result<LayerScore> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if cls.dim() != features.dim || seg.dim() != features.dim {
        return Err(Error::Shape(format!(
            "block {}: feature dim {} vs weight dims {}/{}",
            features.block_index,
            features.dim,
            cls.dim(),
            seg.dim()
        )));
    }
    let cls = UnitHead::new(cls)?;
    let seg = UnitHead::new(seg)?;
    let data = (0..features.cells())
        .map(|k| seg.probability(features.cell(k), tau))
        .collect::<Result<Vec<f64>>>()?;
    let score = cls.probability(&features.global_token, tau)?;
    Ok(LayerScore {
        map: Grid::new(features.grid_h, features.grid_w, data)?,
        score,
    })
}

pub fn score_layer(features: &LayerFeatures, weights: &LayerWeights, tau: f64) -> Result<LayerScore> {
    score_with_heads(features, &weights.cls, &weights.seg, tau)
}

/// Baseline scoring where one matrix serves both the global and the patch head.
pub fn score_layer_shared(features: &LayerFeatures, shared: &HeadWeights, tau: f64) -> Result<LayerScore> {
    score_with_heads(features, shared, shared, tau)
}

/// Resamples every map onto the finest grid present, then averages maps
/// elementwise and scores arithmetically.
pub fn aggregate_layers(maps: &[Grid], scores: &[f64]) -> Result<(Grid, f64)> {
    if maps.is_empty() || scores.is_empty() {
        return Err(Error::Usage("aggregate_layers needs at least one layer".into()));
    }
    let common = average_maps(maps)?;
    let score = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((common, score))
}

pub(crate) fn average_maps(maps: &[Grid]) -> Result<Grid> {
    let finest = maps
        .iter()
        .max_by_key(|g| g.len())
        .ok_or_else(|| Error::Usage("no maps to average".into()))?;
    let (h, w) = (finest.height, finest.width);
    let mut acc = vec![0.0; h * w];
    for m in maps {
        let r = upsample_map(m, h, w)?;
        for (a, v) in acc.iter_mut().zip(&r.data) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Grid::new(h, w, acc.into_iter().map(|v| v / n).collect())
}

/// Zero-shot layer outputs plus their aggregate on the common grid, before
/// upsampling. Shared with the few-shot path.
pub(crate) struct ZeroShotParts {
    pub layer_maps: Vec<Grid>,
    pub layer_scores: Vec<f64>,
    pub map: Grid,
    pub score: f64,
}

pub(crate) fn zero_shot_parts(features: &FeatureStack, weights: &WeightBank) -> Result<ZeroShotParts> {
    weights.check_compatible(features)?;
    let tau = weights.tau as f64;
    let mut layer_maps = Vec::with_capacity(features.layers.len());
    let mut layer_scores = Vec::with_capacity(features.layers.len());
    for (f, w) in features.layers.iter().zip(&weights.layers) {
        let s = score_layer(f, w, tau)?;
        layer_maps.push(s.map);
        layer_scores.push(s.score);
    }
    let (map, score) = aggregate_layers(&layer_maps, &layer_scores)?;
    Ok(ZeroShotParts {
        layer_maps,
        layer_scores,
        map,
        score,
    })
}

/// `(1 - lambda) * image_prob + lambda * max(map)`, clamped to `[0, 1]`.
pub fn fuse_score(image_prob: f64, map_max: f64, lambda: f64) -> f64 {
    ((1.0 - lambda) * image_prob + lambda * map_max).clamp(0.0, 1.0)
}

pub fn predict_zero_shot(features: &FeatureStack, weights: &WeightBank) -> Result<AnomalyPrediction> {
    let parts = zero_shot_parts(features, weights)?;
    let map =
        upsample_map(&parts.map, features.image_height, features.image_width)?.map(|v| v.clamp(0.0, 1.0));
    let score = fuse_score(parts.score, map.max(), weights.lambda_p as f64);
    Ok(AnomalyPrediction {
        map,
        score,
        layer_maps: parts.layer_maps,
        layer_scores: parts.layer_scores,
    })
}
