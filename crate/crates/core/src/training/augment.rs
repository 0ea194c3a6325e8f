//! Class-aware augmentation on rasters: Grid Mosaic tiles same-class images
//! into an `n x n` grid, Grid Cropping zooms into one grid cell. Both keep
//! the image label and keep masks consistent with it.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{cell_bounds, Mask, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub image: Raster,
    pub mask: Mask,
    pub label: bool,
    pub class_name: String,
}

impl TrainSample {
    pub fn new(
        id: impl Into<String>,
        image: Raster,
        mask: Mask,
        label: bool,
        class_name: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        if image.height != mask.height || image.width != mask.width {
            return Err(Error::Shape(format!(
                "{id}: image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        let sample = Self {
            id,
            image,
            mask,
            label,
            class_name: class_name.into(),
        };
        sample.check_consistent()?;
        Ok(sample)
    }

    /// Label is anomalous exactly when the mask has an anomalous pixel.
    pub fn check_consistent(&self) -> Result<()> {
        if self.label != self.mask.any() {
            return Err(Error::Contract(format!(
                "{}: label {} but mask has {} anomalous pixels",
                self.id,
                self.label as u8,
                self.mask.count()
            )));
        }
        Ok(())
    }

    fn resized(&self, h: usize, w: usize) -> Result<(Raster, Mask)> {
        if self.image.height == h && self.image.width == w {
            return Ok((self.image.clone(), self.mask.clone()));
        }
        Ok((
            self.image.resize_bilinear(h, w)?,
            self.mask.resize_max_pool(h, w)?,
        ))
    }
}

/// Tiles the candidate with `n^2 - 1` same-class images. A normal candidate
/// only draws normal tiles; an anomalous one draws from the whole class.
/// Tiles are drawn without replacement while the pool suffices, otherwise
/// with replacement. An empty pool returns the candidate unchanged.
pub fn grid_mosaic<R: Rng + ?Sized>(
    candidate: &TrainSample,
    pool: &[&TrainSample],
    n: usize,
    rng: &mut R,
) -> Result<TrainSample> {
    if n == 0 {
        return Err(Error::Usage("mosaic grid size must be at least 1".into()));
    }
    if n == 1 {
        return Ok(candidate.clone());
    }
    let (h, w) = (candidate.image.height, candidate.image.width);
    if n > h.min(w) {
        return Err(Error::Usage(format!(
            "mosaic grid {n} exceeds image size {h}x{w}"
        )));
    }
    let eligible: Vec<&TrainSample> = pool
        .iter()
        .copied()
        .filter(|s| {
            s.class_name == candidate.class_name
                && s.id != candidate.id
                && (candidate.label || !s.label)
                && s.image.channels == candidate.image.channels
        })
        .collect();
    if eligible.is_empty() {
        debug!("mosaic skipped for {}: no eligible tiles", candidate.id);
        return Ok(candidate.clone());
    }
    let needed = n * n - 1;
    let tiles: Vec<&TrainSample> = if eligible.len() >= needed {
        eligible.choose_multiple(rng, needed).copied().collect()
    } else {
        (0..needed)
            .map(|_| eligible[rng.gen_range(0..eligible.len())])
            .collect()
    };
    let slot = rng.gen_range(0..n * n);

    let rows = cell_bounds(h, n);
    let cols = cell_bounds(w, n);
    let mut image = Raster::zeros(h, w, candidate.image.channels);
    let mut mask = Mask::empty(h, w);
    let mut others = tiles.into_iter();
    for cell in 0..n * n {
        let source = if cell == slot {
            candidate
        } else {
            others.next().expect("n^2 - 1 tiles drawn")
        };
        let (r0, r1) = rows[cell / n];
        let (c0, c1) = cols[cell % n];
        let (img, msk) = source.resized(h, w)?;
        image.paste(&img.resize_bilinear(r1 - r0, c1 - c0)?, r0, c0);
        mask.paste(&msk.resize_max_pool(r1 - r0, c1 - c0)?, r0, c0);
    }
    let out = TrainSample {
        id: format!("{}#mosaic{n}", candidate.id),
        image,
        mask,
        label: candidate.label,
        class_name: candidate.class_name.clone(),
    };
    out.check_consistent()?;
    Ok(out)
}

/// Grid cells (row-major index) containing at least one anomalous pixel.
pub fn anomalous_cells(mask: &Mask, n: usize) -> Vec<usize> {
    let rows = cell_bounds(mask.height, n);
    let cols = cell_bounds(mask.width, n);
    (0..n * n)
        .filter(|&k| {
            let (r0, r1) = rows[k / n];
            let (c0, c1) = cols[k % n];
            mask.any_in(r0, r1, c0, c1)
        })
        .collect()
}

/// Picks one `n x n` cell (any cell for normal samples, an anomalous one
/// otherwise) and scales it back to full size. Returns the augmented sample
/// and the chosen cell index.
pub fn grid_crop_with_cell<R: Rng + ?Sized>(
    candidate: &TrainSample,
    n: usize,
    rng: &mut R,
) -> Result<(TrainSample, usize)> {
    let (h, w) = (candidate.image.height, candidate.image.width);
    if n == 0 || n > h.min(w) {
        return Err(Error::Usage(format!("crop grid {n} invalid for image {h}x{w}")));
    }
    if n == 1 {
        return Ok((candidate.clone(), 0));
    }
    let cell = if candidate.label {
        let cells = anomalous_cells(&candidate.mask, n);
        if cells.is_empty() {
            return Err(Error::Contract(format!(
                "{}: anomalous sample with an empty mask",
                candidate.id
            )));
        }
        cells[rng.gen_range(0..cells.len())]
    } else {
        rng.gen_range(0..n * n)
    };
    let (r0, r1) = cell_bounds(h, n)[cell / n];
    let (c0, c1) = cell_bounds(w, n)[cell % n];
    let image = candidate.image.crop(r0, r1, c0, c1).resize_bilinear(h, w)?;
    let mask = candidate.mask.crop(r0, r1, c0, c1).resize_nearest(h, w)?;
    let out = TrainSample {
        id: format!("{}#crop{n}.{cell}", candidate.id),
        image,
        mask,
        label: candidate.label,
        class_name: candidate.class_name.clone(),
    };
    out.check_consistent()?;
    Ok((out, cell))
}

pub fn grid_crop<R: Rng + ?Sized>(candidate: &TrainSample, n: usize, rng: &mut R) -> Result<TrainSample> {
    grid_crop_with_cell(candidate, n, rng).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, class: &str, h: usize, w: usize, anomaly_at: Option<(usize, usize)>) -> TrainSample {
        let data = (0..h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut mask = Mask::empty(h, w);
        if let Some((r, c)) = anomaly_at {
            mask.set(r, c, true);
        }
        TrainSample::new(
            id,
            Raster::new(h, w, 3, data).unwrap(),
            mask,
            anomaly_at.is_some(),
            class,
        )
        .unwrap()
    }

    #[test]
    fn inconsistent_sample_rejected() {
        let img = Raster::zeros(4, 4, 1);
        assert!(TrainSample::new("x", img.clone(), Mask::empty(4, 4), true, "c").is_err());
        let mut m = Mask::empty(4, 4);
        m.set(0, 0, true);
        assert!(TrainSample::new("x", img, m, false, "c").is_err());
    }

    #[test]
    fn n_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample("a", "c", 8, 8, Some((3, 3)));
        let other = sample("b", "c", 8, 8, None);
        assert_eq!(grid_mosaic(&s, &[&other], 1, &mut rng).unwrap(), s);
        assert_eq!(grid_crop(&s, 1, &mut rng).unwrap(), s);
    }

    #[test]
    fn normal_mosaic_ignores_anomalous_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample("a", "c", 8, 8, None);
        let normals: Vec<TrainSample> = (0..3)
            .map(|i| sample(&format!("n{i}"), "c", 8, 8, None))
            .collect();
        let bad = sample("z", "c", 8, 8, Some((1, 1)));
        let other_class = sample("q", "d", 8, 8, None);
        let mut pool: Vec<&TrainSample> = normals.iter().collect();
        pool.push(&bad);
        pool.push(&other_class);
        for _ in 0..50 {
            let out = grid_mosaic(&s, &pool, 2, &mut rng).unwrap();
            assert!(!out.label);
            assert!(!out.mask.any());
        }
    }

    #[test]
    fn empty_pool_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample("a", "c", 8, 8, None);
        assert_eq!(grid_mosaic(&s, &[], 2, &mut rng).unwrap(), s);
    }

    #[test]
    fn crop_picks_the_only_anomalous_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample("a", "c", 8, 8, Some((6, 1)));
        for _ in 0..20 {
            let (out, cell) = grid_crop_with_cell(&s, 2, &mut rng).unwrap();
            assert_eq!(cell, 2);
            assert!(out.mask.any());
        }
    }

    #[test]
    fn crop_rejects_oversized_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample("a", "c", 3, 8, None);
        assert!(matches!(grid_crop(&s, 4, &mut rng), Err(Error::Usage(_))));
    }
}
