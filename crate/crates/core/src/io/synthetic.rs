//! Deterministic toy feature extractor.
//!
//! Each layer maps local patch statistics of the raster through a fixed,
//! seeded random projection around a layer bias. Pixels painted in the
//! defect colour push their patch token along a seeded per-layer anomaly
//! direction, and the global token along a separate direction. In conflict
//! mode the global direction is the negated patch direction, so a single
//! shared weight matrix cannot separate both token kinds at once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::provider::FeatureProvider;
use crate::error::{Error, Result};
use crate::model::{FeatureStack, LayerFeatures};
use crate::raster::{cell_bounds, Raster};
use crate::rng::mix_seed;

pub const DEFAULT_BLOCKS: [u16; 5] = [12, 15, 18, 21, 24];
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_GRID: usize = 8;

const DESCRIPTOR_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayerSpec {
    pub block: u16,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub layers: Vec<SyntheticLayerSpec>,
    pub geometry_seed: u64,
    pub conflict: bool,
    /// Length of the patch-token shift for a fully defective patch.
    pub patch_gain: f64,
    /// Length of the global-token shift for an image with a defect.
    pub global_gain: f64,
    /// Scale of the projected patch statistics.
    pub texture_gain: f64,
}

impl SyntheticConfig {
    pub fn default_layers(geometry_seed: u64) -> Self {
        Self {
            layers: DEFAULT_BLOCKS
                .iter()
                .map(|&block| SyntheticLayerSpec {
                    block,
                    dim: DEFAULT_DIM,
                    grid_h: DEFAULT_GRID,
                    grid_w: DEFAULT_GRID,
                })
                .collect(),
            geometry_seed,
            conflict: false,
            patch_gain: 1.2,
            global_gain: 1.2,
            texture_gain: 1.0,
        }
    }

    pub fn with_blocks(mut self, blocks: &[u16]) -> Result<Self> {
        for b in blocks {
            if !self.layers.iter().any(|l| l.block == *b) {
                return Err(Error::Config(format!(
                    "synthetic provider has no block {b} (available: {:?})",
                    self.layers.iter().map(|l| l.block).collect::<Vec<_>>()
                )));
            }
        }
        self.layers.retain(|l| blocks.contains(&l.block));
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(
                "synthetic provider needs at least one layer".into(),
            ));
        }
        if self.layers.windows(2).any(|w| w[0].block >= w[1].block) {
            return Err(Error::Config(
                "synthetic layers must have ascending blocks".into(),
            ));
        }
        for l in &self.layers {
            if l.dim < 2 || l.grid_h == 0 || l.grid_w == 0 {
                return Err(Error::Config(format!("block {}: invalid layer spec", l.block)));
            }
        }
        Ok(())
    }
}

struct LayerGeometry {
    spec: SyntheticLayerSpec,
    bias: Vec<f64>,
    /// `[dim x DESCRIPTOR_LEN]`, row-major.
    projection: Vec<f64>,
    anomaly_dir: Vec<f64>,
    global_dir: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl LayerGeometry {
    fn new(spec: &SyntheticLayerSpec, cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.geometry_seed, &[spec.block as u64]));
        let d = spec.dim;
        let bias = unit(gaussian(&mut rng, d));
        let scale = cfg.texture_gain / (DESCRIPTOR_LEN as f64).sqrt();
        let projection = gaussian(&mut rng, d * DESCRIPTOR_LEN)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        let anomaly_dir = unit(gaussian(&mut rng, d));
        let independent = unit(gaussian(&mut rng, d));
        let global_dir = if cfg.conflict {
            anomaly_dir.iter().map(|x| -x).collect()
        } else {
            independent
        };
        Self {
            spec: spec.clone(),
            bias,
            projection,
            anomaly_dir,
            global_dir,
        }
    }

    fn project(&self, desc: &[f64; DESCRIPTOR_LEN], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.projection[k * DESCRIPTOR_LEN..(k + 1) * DESCRIPTOR_LEN];
            *o = self.bias[k] + row.iter().zip(desc).map(|(p, x)| p * x).sum::<f64>();
        }
    }
}

/// Per-pixel defect evidence: how strongly red dominates green and blue.
pub fn defect_intensity(pixel: &[f32]) -> f64 {
    if pixel.len() < 3 {
        return 0.0;
    }
    let redness = pixel[0] as f64 - (pixel[1] as f64 + pixel[2] as f64) / 2.0;
    ((redness - 0.3) / 0.4).clamp(0.0, 1.0)
}

/// Colour statistics of a window plus its 2x2 sub-block intensities, and
/// the window's mean defect intensity.
fn describe_window(r: &Raster, r0: usize, r1: usize, c0: usize, c1: usize) -> ([f64; DESCRIPTOR_LEN], f64) {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut quad = [0.0f64; 4];
    let mut quad_n = [0usize; 4];
    let mut defect = 0.0;
    let rm = (r0 + r1) / 2;
    let cm = (c0 + c1) / 2;
    for row in r0..r1 {
        for col in c0..c1 {
            let px = r.pixel(row, col);
            let mut intensity = 0.0;
            for ch in 0..3 {
                let v = px[ch.min(px.len() - 1)] as f64;
                sum[ch] += v;
                sq[ch] += v * v;
                intensity += v / 3.0;
            }
            let q = (row >= rm) as usize * 2 + (col >= cm) as usize;
            quad[q] += intensity;
            quad_n[q] += 1;
            defect += defect_intensity(px);
        }
    }
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let mut desc = [0.0; DESCRIPTOR_LEN];
    for ch in 0..3 {
        let mean = sum[ch] / n;
        desc[ch] = mean - 0.5;
        desc[3 + ch] = 4.0 * (sq[ch] / n - mean * mean).max(0.0).sqrt();
    }
    for q in 0..4 {
        let m = if quad_n[q] > 0 {
            quad[q] / quad_n[q] as f64
        } else {
            0.0
        };
        desc[6 + q] = m - 0.5;
    }
    (desc, defect / n)
}

/// Saturating response to the defective fraction of a patch.
fn defect_response(fraction: f64) -> f64 {
    (3.0 * fraction).min(1.0)
}

pub struct SyntheticProvider {
    cfg: SyntheticConfig,
    geometry: Vec<LayerGeometry>,
}

impl SyntheticProvider {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let geometry = cfg.layers.iter().map(|l| LayerGeometry::new(l, &cfg)).collect();
        Ok(Self { cfg, geometry })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// The seeded patch-token anomaly direction of each layer.
    pub fn anomaly_directions(&self) -> Vec<Vec<f64>> {
        self.geometry.iter().map(|g| g.anomaly_dir.clone()).collect()
    }

    pub fn global_directions(&self) -> Vec<Vec<f64>> {
        self.geometry.iter().map(|g| g.global_dir.clone()).collect()
    }

    fn layer(&self, g: &LayerGeometry, raster: &Raster) -> Result<LayerFeatures> {
        let spec = &g.spec;
        if spec.grid_h > raster.height || spec.grid_w > raster.width {
            return Err(Error::Config(format!(
                "block {}: grid {}x{} is finer than the {}x{} raster",
                spec.block, spec.grid_h, spec.grid_w, raster.height, raster.width
            )));
        }
        let d = spec.dim;
        let rows = cell_bounds(raster.height, spec.grid_h);
        let cols = cell_bounds(raster.width, spec.grid_w);
        let mut patches = Vec::with_capacity(spec.grid_h * spec.grid_w * d);
        let mut base_sum = vec![0.0; d];
        let mut strongest: f64 = 0.0;
        let mut base = vec![0.0; d];
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let (desc, defect) = describe_window(raster, r0, r1, c0, c1);
                g.project(&desc, &mut base);
                let shift = self.cfg.patch_gain * defect_response(defect);
                strongest = strongest.max(defect_response(defect));
                for k in 0..d {
                    base_sum[k] += base[k];
                    patches.push((base[k] + shift * g.anomaly_dir[k]) as f32);
                }
            }
        }
        let cells = (spec.grid_h * spec.grid_w) as f64;
        let global: Vec<f32> = (0..d)
            .map(|k| (base_sum[k] / cells + self.cfg.global_gain * strongest * g.global_dir[k]) as f32)
            .collect();
        LayerFeatures::new(spec.block, spec.grid_h, spec.grid_w, global, patches)
    }
}

impl FeatureProvider for SyntheticProvider {
    fn describe(&self) -> String {
        format!(
            "synthetic{}(seed={}, blocks={:?})",
            if self.cfg.conflict { "-conflict" } else { "" },
            self.cfg.geometry_seed,
            self.cfg.layers.iter().map(|l| l.block).collect::<Vec<_>>()
        )
    }

    fn supports_rasters(&self) -> bool {
        true
    }

    fn extract(&self, raster: &Raster, source_id: &str) -> Result<FeatureStack> {
        let layers = self
            .geometry
            .iter()
            .map(|g| self.layer(g, raster))
            .collect::<Result<Vec<_>>>()?;
        FeatureStack::new(layers, raster.height, raster.width, source_id)
    }
}
