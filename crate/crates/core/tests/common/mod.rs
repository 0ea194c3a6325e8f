//! Seeded instance generators and brute-force reference implementations
//! shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use uniadet::fewshot::TokenStore;
use uniadet::model::{FeatureStack, HeadWeights, LayerFeatures, LayerWeights, Provenance, WeightBank};
use uniadet::raster::{Grid, Mask};
use uniadet::training::{GradSample, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_f32(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_layer(rng: &mut ChaCha8Rng, block: u16, dim: usize, gh: usize, gw: usize) -> LayerFeatures {
    let global = gaussian_f32(rng, dim);
    let patches = gaussian_f32(rng, gh * gw * dim);
    LayerFeatures::new(block, gh, gw, global, patches).unwrap()
}

/// Layout `(block, dim, grid_h, grid_w)` with at most `max_dim` and
/// `max_grid` per side.
pub fn random_layout(
    rng: &mut ChaCha8Rng,
    layers: usize,
    max_dim: usize,
    max_grid: usize,
) -> Vec<(u16, usize, usize, usize)> {
    (0..layers)
        .map(|l| {
            (
                (l * 3 + 1) as u16,
                rng.gen_range(2..=max_dim),
                rng.gen_range(1..=max_grid),
                rng.gen_range(1..=max_grid),
            )
        })
        .collect()
}

pub fn random_stack(
    rng: &mut ChaCha8Rng,
    layout: &[(u16, usize, usize, usize)],
    height: usize,
    width: usize,
    id: &str,
) -> FeatureStack {
    let layers = layout
        .iter()
        .map(|&(b, d, gh, gw)| random_layer(rng, b, d, gh, gw))
        .collect();
    FeatureStack::new(layers, height, width, id).unwrap()
}

pub fn random_head(rng: &mut ChaCha8Rng, dim: usize) -> HeadWeights {
    let scale_n: f32 = rng.gen_range(0.5..2.0);
    let scale_a: f32 = rng.gen_range(0.5..2.0);
    let n = gaussian_f32(rng, dim).into_iter().map(|x| x * scale_n).collect();
    let a = gaussian_f32(rng, dim).into_iter().map(|x| x * scale_a).collect();
    HeadWeights::new(n, a).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, layout: &[(u16, usize, usize, usize)], tau: f32) -> WeightBank {
    WeightBank {
        layers: layout
            .iter()
            .map(|&(b, d, _, _)| LayerWeights {
                block_index: b,
                cls: random_head(rng, d),
                seg: random_head(rng, d),
            })
            .collect(),
        tau,
        lambda_p: 0.5,
        lambda_f: 0.5,
        metadata: Provenance::default(),
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect()).unwrap()
}

/// Random blobs: up to `regions` filled rectangles.
pub fn random_regions(rng: &mut ChaCha8Rng, h: usize, w: usize, regions: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for _ in 0..regions {
        let rh = rng.gen_range(1..=(h / 3).max(1));
        let rw = rng.gen_range(1..=(w / 3).max(1));
        let r0 = rng.gen_range(0..=h - rh);
        let c0 = rng.gen_range(0..=w - rw);
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                m.set(r, c, true);
            }
        }
    }
    m
}

// ---------------------------------------------------------------------
// Training objective, written out directly in f64.

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

pub fn prob(token: &[f64], normal: &[f64], anomaly: &[f64], tau: f64) -> f64 {
    let zn = cos(token, normal) / tau;
    let za = cos(token, anomaly) / tau;
    1.0 / (1.0 + (zn - za).exp())
}

const EPS: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Whether image pixel `i` (of `len`) overlaps grid cell `k` (of `cells`).
pub fn overlaps(i: usize, len: usize, k: usize, cells: usize) -> bool {
    // pixel [i, i+1) vs cell [k*len/cells, (k+1)*len/cells)
    i * cells < (k + 1) * len && (i + 1) * cells > k * len
}

pub fn pool_mask(mask: &Mask, gh: usize, gw: usize) -> Vec<bool> {
    let mut out = vec![false; gh * gw];
    for i in 0..mask.height {
        for j in 0..mask.width {
            if !mask.get(i, j) {
                continue;
            }
            for r in 0..gh {
                for c in 0..gw {
                    if overlaps(i, mask.height, r, gh) && overlaps(j, mask.width, c, gw) {
                        out[r * gw + c] = true;
                    }
                }
            }
        }
    }
    out
}

/// Per-layer parameters as plain f64: `[cls_n, cls_a, seg_n, seg_a]`.
pub type Params = Vec<[Vec<f64>; 4]>;

pub fn params_of(w: &WeightBank) -> Params {
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    w.layers
        .iter()
        .map(|l| {
            [
                f(&l.cls.normal),
                f(&l.cls.anomaly),
                f(&l.seg.normal),
                f(&l.seg.anomaly),
            ]
        })
        .collect()
}

pub struct OracleSample {
    pub stack: FeatureStack,
    pub mask: Mask,
    pub label: bool,
}

/// Batch-mean of `sum_layers w_ce CE + w_f Focal + w_d Dice`.
pub fn oracle_loss(batch: &[OracleSample], params: &Params, tau: f64, cfg: &TrainConfig) -> f64 {
    let mut total = 0.0;
    for s in batch {
        for (layer, p) in s.stack.layers.iter().zip(params) {
            let g: Vec<f64> = layer.global_token.iter().map(|&x| x as f64).collect();
            let pg = clamp(prob(&g, &p[0], &p[1], tau));
            total += cfg.loss_weights.ce * if s.label { -pg.ln() } else { -(1.0 - pg).ln() };

            let m = pool_mask(&s.mask, layer.grid_h, layer.grid_w);
            let probs: Vec<f64> = (0..layer.cells())
                .map(|c| {
                    let t: Vec<f64> = layer.cell(c).iter().map(|&x| x as f64).collect();
                    prob(&t, &p[2], &p[3], tau)
                })
                .collect();
            let n = probs.len() as f64;
            let mut focal = 0.0;
            for (&pc, &mc) in probs.iter().zip(&m) {
                let pt = clamp(if mc { pc } else { 1.0 - pc });
                focal += -cfg.focal_alpha * (1.0 - pt).powf(cfg.focal_gamma) * pt.ln();
            }
            total += cfg.loss_weights.focal * focal / n;
            let inter: f64 = probs.iter().zip(&m).filter(|(_, &mc)| mc).map(|(p, _)| p).sum();
            let sp: f64 = probs.iter().sum();
            let sm = m.iter().filter(|&&x| x).count() as f64;
            total +=
                cfg.loss_weights.dice * (1.0 - (2.0 * inter + cfg.dice_smooth) / (sp + sm + cfg.dice_smooth));
        }
    }
    total / batch.len() as f64
}

pub struct GradInstance {
    pub batch: Vec<OracleSample>,
    pub weights: WeightBank,
}

impl GradInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let layers = r.gen_range(1..=3);
        let layout = random_layout(&mut r, layers, 8, 3);
        let tau = [0.07f32, 0.1, 0.2, 0.5][r.gen_range(0..4)];
        let weights = random_weights(&mut r, &layout, tau);
        let samples = r.gen_range(1..=3);
        let batch = (0..samples)
            .map(|i| {
                let h = r.gen_range(3..=9);
                let w = r.gen_range(3..=9);
                let stack = random_stack(&mut r, &layout, h, w, &format!("s{i}"));
                let label = r.gen_bool(0.5);
                let mask = if label {
                    let mut m = random_mask(&mut r, h, w, 0.2);
                    m.set(r.gen_range(0..h), r.gen_range(0..w), true);
                    m
                } else {
                    Mask::empty(h, w)
                };
                OracleSample { stack, mask, label }
            })
            .collect();
        Self { batch, weights }
    }

    pub fn grad_samples(&self) -> Vec<GradSample> {
        self.batch
            .iter()
            .map(|s| GradSample::new(s.stack.source_id.clone(), s.stack.clone(), &s.mask, s.label).unwrap())
            .collect()
    }
}

/// Central finite differences of [`oracle_loss`] for every parameter.
pub fn finite_difference(inst: &GradInstance, cfg: &TrainConfig, step: f64) -> Params {
    let base = params_of(&inst.weights);
    let tau = inst.weights.tau as f64;
    let mut out = base.clone();
    for l in 0..base.len() {
        for h in 0..4 {
            for k in 0..base[l][h].len() {
                let mut plus = base.clone();
                plus[l][h][k] += step;
                let mut minus = base.clone();
                minus[l][h][k] -= step;
                let lp = oracle_loss(&inst.batch, &plus, tau, cfg);
                let lm = oracle_loss(&inst.batch, &minus, tau, cfg);
                out[l][h][k] = (lp - lm) / (2.0 * step);
            }
        }
    }
    out
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf)` over all parameters.
pub fn relative_error(a: &Params, b: &Params) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (la, lb) in a.iter().zip(b) {
        for (ha, hb) in la.iter().zip(lb) {
            for (x, y) in ha.iter().zip(hb) {
                diff = diff.max((x - y).abs());
                scale = scale.max(x.abs()).max(y.abs());
            }
        }
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------
// Ranking metrics by exhaustive threshold sweeps.

pub fn unique_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= t {
            if l {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

pub fn brute_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in unique_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let recall = tp / p;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

pub fn brute_f1max(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut best: f64 = 0.0;
    for t in unique_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let precision = tp / (tp + fp);
        let recall = tp / p;
        if tp > 0.0 {
            best = best.max(2.0 * precision * recall / (precision + recall));
        }
    }
    best
}

/// Connected components by repeated relabelling to the neighbourhood
/// minimum until nothing changes.
pub fn brute_regions(mask: &Mask) -> Vec<Option<usize>> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut label: Vec<Option<usize>> = (0..mask.data.len())
        .map(|i| if mask.data[i] { Some(i) } else { None })
        .collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                let i = (r * w + c) as usize;
                let Some(mut best) = label[i] else { continue };
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= h || cc >= w {
                            continue;
                        }
                        if let Some(o) = label[(rr * w + cc) as usize] {
                            best = best.min(o);
                        }
                    }
                }
                if Some(best) != label[i] {
                    label[i] = Some(best);
                    changed = true;
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

pub fn brute_aupro(maps: &[Grid], masks: &[Mask], limit: f64) -> f64 {
    let mut regions: Vec<Vec<f64>> = Vec::new();
    let mut normals: Vec<f64> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let labels = brute_regions(mask);
        let mut ids: Vec<usize> = labels.iter().flatten().copied().collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            regions.push(
                labels
                    .iter()
                    .zip(&map.data)
                    .filter(|(l, _)| **l == Some(id))
                    .map(|(_, &s)| s)
                    .collect(),
            );
        }
        normals.extend(
            labels
                .iter()
                .zip(&map.data)
                .filter(|(l, _)| l.is_none())
                .map(|(_, &s)| s),
        );
    }
    let all: Vec<f64> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    let mut curve = Vec::new();
    for t in unique_desc(&all) {
        let fpr = normals.iter().filter(|&&s| s >= t).count() as f64 / normals.len() as f64;
        let pro = regions
            .iter()
            .map(|r| r.iter().filter(|&&s| s >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }
    // trapezoids on [first fpr, limit], interpolating at the limit
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let lo = x0.min(limit);
        let hi = x1.min(limit);
        if hi <= lo {
            continue;
        }
        let y_hi = if x1 > limit {
            y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        } else {
            y1
        };
        area += (hi - lo) * (y0 + y_hi) / 2.0;
    }
    area / limit
}

// ---------------------------------------------------------------------
// Nearest-neighbour search by double loop.

/// Reference-token normalization as stored in a memory bank.
pub fn stored_unit(token: &[f32]) -> Vec<f32> {
    let n = token.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    token.iter().map(|&x| (x as f64 / n) as f32).collect()
}

pub fn brute_knn(query: &LayerFeatures, refs: &[&LayerFeatures]) -> Vec<f64> {
    let bank: Vec<Vec<f32>> = refs
        .iter()
        .flat_map(|r| (0..r.cells()).map(move |c| stored_unit(r.cell(c))))
        .collect();
    (0..query.cells())
        .map(|c| {
            let q = query.cell(c);
            let n = q.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            let unit: Vec<f64> = q.iter().map(|&x| x as f64 / n).collect();
            let mut best = f64::INFINITY;
            for m in &bank {
                let mut dot = 0.0;
                for k in 0..unit.len() {
                    dot += unit[k] * m[k] as f64;
                }
                best = best.min(1.0 - dot);
            }
            best.clamp(0.0, 2.0)
        })
        .collect()
}

pub fn store_from(refs: &[&LayerFeatures]) -> TokenStore {
    let mut s = TokenStore {
        block_index: refs[0].block_index,
        dim: refs[0].dim,
        tokens: Vec::new(),
    };
    for r in refs {
        for c in 0..r.cells() {
            s.push_token(r.cell(c)).unwrap();
        }
    }
    s
}

// ---------------------------------------------------------------------
// Resampling.

/// Corner-aligned bilinear sample of `map` at output pixel `(y, x)`.
pub fn bilinear_at(map: &Grid, out_h: usize, out_w: usize, y: usize, x: usize) -> f64 {
    let pos = |o: usize, out: usize, inp: usize| -> f64 {
        if out == 1 {
            (inp as f64 - 1.0) / 2.0
        } else {
            o as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
        }
    };
    let py = pos(y, out_h, map.height);
    let px = pos(x, out_w, map.width);
    let y0 = py.floor() as usize;
    let x0 = px.floor() as usize;
    let y1 = (y0 + 1).min(map.height - 1);
    let x1 = (x0 + 1).min(map.width - 1);
    let fy = py - y0 as f64;
    let fx = px - x0 as f64;
    let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
    let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}
