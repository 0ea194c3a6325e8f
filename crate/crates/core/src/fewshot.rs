//! Training-free few-shot extension. Patch tokens of K normal reference
//! images are stored per layer; a query patch's evidence is its cosine
//! distance to the nearest stored token, averaged over layers and fused
//! with the zero-shot prediction.

use crate::error::{Error, Result};
use crate::model::{
    average_maps, fuse_score, norm_f32, zero_shot_parts, AnomalyPrediction, FeatureStack, LayerFeatures,
    WeightBank,
};
use crate::raster::{upsample_map, Grid};

/// Divisor mapping raw cosine distances from `[0, 2]` into `[0, 1]`.
pub const DEFAULT_DISTANCE_SCALE: f64 = 0.5;

/// Unit-normalized normal patch tokens of one block, `[rows x dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStore {
    pub block_index: u16,
    pub dim: usize,
    pub tokens: Vec<f32>,
}

impl TokenStore {
    pub fn rows(&self) -> usize {
        self.tokens.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f32] {
        &self.tokens[k * self.dim..(k + 1) * self.dim]
    }

    /// Appends a token, normalizing it first.
    pub fn push_token(&mut self, token: &[f32]) -> Result<()> {
        if token.len() != self.dim {
            return Err(Error::Shape(format!(
                "block {}: token dim {} != store dim {}",
                self.block_index,
                token.len(),
                self.dim
            )));
        }
        let n = norm_f32(token);
        if n == 0.0 {
            return Err(Error::Domain("cannot store a zero-norm token".into()));
        }
        self.tokens.extend(token.iter().map(|&x| (x as f64 / n) as f32));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub layers: Vec<TokenStore>,
    pub shots: usize,
    pub source_ids: Vec<String>,
}

impl MemoryBank {
    pub fn block_indices(&self) -> Vec<u16> {
        self.layers.iter().map(|l| l.block_index).collect()
    }

    fn check_compatible(&self, features: &FeatureStack) -> Result<()> {
        if self.block_indices() != features.block_indices() {
            return Err(Error::Config(format!(
                "memory bank covers blocks {:?}, features carry {:?}",
                self.block_indices(),
                features.block_indices()
            )));
        }
        for (s, f) in self.layers.iter().zip(&features.layers) {
            if s.dim != f.dim {
                return Err(Error::Config(format!(
                    "block {}: bank dim {} != feature dim {}",
                    s.block_index, s.dim, f.dim
                )));
            }
        }
        Ok(())
    }
}

/// Flattens the references' patch tokens per layer in reference order,
/// then row-major within each grid.
pub fn build_bank(references: &[FeatureStack]) -> Result<MemoryBank> {
    let first = references
        .first()
        .ok_or_else(|| Error::Usage("memory bank needs at least one reference".into()))?;
    let mut layers: Vec<TokenStore> = first
        .layers
        .iter()
        .map(|l| TokenStore {
            block_index: l.block_index,
            dim: l.dim,
            tokens: Vec::with_capacity(references.len() * l.cells() * l.dim),
        })
        .collect();
    for r in references {
        if r.block_indices() != first.block_indices()
            || r.layers.iter().zip(&first.layers).any(|(a, b)| a.dim != b.dim)
        {
            return Err(Error::Config(format!(
                "reference {} has a different layer structure than {}",
                r.source_id, first.source_id
            )));
        }
        for (store, layer) in layers.iter_mut().zip(&r.layers) {
            for k in 0..layer.cells() {
                store.push_token(layer.cell(k))?;
            }
        }
    }
    Ok(MemoryBank {
        layers,
        shots: references.len(),
        source_ids: references.iter().map(|r| r.source_id.clone()).collect(),
    })
}

/// Exact nearest-neighbour cosine distance, `min_k (1 - <q, m_k>)`, for
/// every cell of the query grid. Values lie in `[0, 2]`.
pub fn query_layer(query: &LayerFeatures, store: &TokenStore) -> Result<Grid> {
    if store.rows() == 0 {
        return Err(Error::Usage(format!(
            "memory bank layer for block {} is empty",
            store.block_index
        )));
    }
    if query.dim != store.dim {
        return Err(Error::Shape(format!(
            "query dim {} != bank dim {}",
            query.dim, store.dim
        )));
    }
    let mut out = Vec::with_capacity(query.cells());
    let mut unit = vec![0.0f64; query.dim];
    for c in 0..query.cells() {
        let token = query.cell(c);
        let n = norm_f32(token);
        if n == 0.0 {
            return Err(Error::Domain("query token has zero norm".into()));
        }
        for (u, &t) in unit.iter_mut().zip(token) {
            *u = t as f64 / n;
        }
        let mut best = f64::NEG_INFINITY;
        for k in 0..store.rows() {
            let sim: f64 = unit.iter().zip(store.row(k)).map(|(&u, &m)| u * m as f64).sum();
            if sim > best {
                best = sim;
            }
        }
        out.push((1.0 - best).clamp(0.0, 2.0));
    }
    Grid::new(query.grid_h, query.grid_w, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotOptions {
    /// Multiplier applied to the layer-averaged distance map before fusion.
    pub distance_scale: f64,
}

impl Default for FewShotOptions {
    fn default() -> Self {
        Self {
            distance_scale: DEFAULT_DISTANCE_SCALE,
        }
    }
}

/// Per-layer distance maps averaged on the finest grid and rescaled.
pub fn few_shot_map(features: &FeatureStack, bank: &MemoryBank, opts: FewShotOptions) -> Result<Grid> {
    bank.check_compatible(features)?;
    let maps = features
        .layers
        .iter()
        .zip(&bank.layers)
        .map(|(f, s)| query_layer(f, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_maps(&maps)?.map(|v| (v * opts.distance_scale).clamp(0.0, 1.0)))
}

pub fn predict_few_shot(
    features: &FeatureStack,
    weights: &WeightBank,
    bank: &MemoryBank,
    opts: FewShotOptions,
) -> Result<AnomalyPrediction> {
    let zero = zero_shot_parts(features, weights)?;
    let few = few_shot_map(features, bank, opts)?;
    let few = upsample_map(&few, zero.map.height, zero.map.width)?;
    let lambda_f = weights.lambda_f as f64;
    let fused = Grid::new(
        zero.map.height,
        zero.map.width,
        zero.map
            .data
            .iter()
            .zip(&few.data)
            .map(|(&z, &f)| (1.0 - lambda_f) * z + lambda_f * f)
            .collect(),
    )?;
    let map = upsample_map(&fused, features.image_height, features.image_width)?.map(|v| v.clamp(0.0, 1.0));
    let score = fuse_score(zero.score, map.max(), weights.lambda_p as f64);
    Ok(AnomalyPrediction {
        map,
        score,
        layer_maps: zero.layer_maps,
        layer_scores: zero.layer_scores,
    })
}
