//! Dense 2-D containers: real-valued score grids, multi-channel images and
//! binary masks, plus the resampling kernels shared by scoring and
//! augmentation.

use crate::error::{Error, Result};

/// Single-channel real grid, row-major, top-left origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest value; `-inf` for an empty grid.
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Multi-channel image with interleaved channels (`[row][col][channel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("raster needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite raster value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let at = (row * self.width + col) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    /// Copies the half-open window `[r0, r1) x [c0, c1)`.
    pub fn crop(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Raster {
        let mut out = Raster::zeros(r1 - r0, c1 - c0, self.channels);
        for r in r0..r1 {
            for c in c0..c1 {
                out.pixel_mut(r - r0, c - c0).copy_from_slice(self.pixel(r, c));
            }
        }
        out
    }

    /// Pastes `tile` with its top-left corner at (`row`, `col`).
    pub fn paste(&mut self, tile: &Raster, row: usize, col: usize) {
        for r in 0..tile.height {
            for c in 0..tile.width {
                self.pixel_mut(row + r, col + c).copy_from_slice(tile.pixel(r, c));
            }
        }
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Raster> {
        check_target(out_h, out_w)?;
        let ys = corner_aligned_taps(self.height, out_h);
        let xs = corner_aligned_taps(self.width, out_w);
        let mut out = Raster::zeros(out_h, out_w, self.channels);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for ch in 0..self.channels {
                    let v00 = self.pixel(y0, x0)[ch] as f64;
                    let v01 = self.pixel(y0, x1)[ch] as f64;
                    let v10 = self.pixel(y1, x0)[ch] as f64;
                    let v11 = self.pixel(y1, x1)[ch] as f64;
                    let top = v00 + (v01 - v00) * fx;
                    let bottom = v10 + (v11 - v10) * fx;
                    out.pixel_mut(oy, ox)[ch] = (top + (bottom - top) * fy) as f32;
                }
            }
        }
        Ok(out)
    }
}

/// Binary mask, `true` marks an anomalous pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn crop(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mask {
        let mut out = Mask::empty(r1 - r0, c1 - c0);
        for r in r0..r1 {
            for c in c0..c1 {
                out.set(r - r0, c - c0, self.get(r, c));
            }
        }
        out
    }

    pub fn paste(&mut self, tile: &Mask, row: usize, col: usize) {
        for r in 0..tile.height {
            for c in 0..tile.width {
                self.set(row + r, col + c, tile.get(r, c));
            }
        }
    }

    pub fn any_in(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> bool {
        (r0..r1).any(|r| (c0..c1).any(|c| self.get(r, c)))
    }

    /// Each output pixel is anomalous if any source pixel in its footprint is.
    /// The footprint of output row `y` spans source rows
    /// `[floor(y*H/h), ceil((y+1)*H/h))`, so every source pixel lands in at
    /// least one output pixel.
    pub fn resize_max_pool(&self, out_h: usize, out_w: usize) -> Result<Mask> {
        check_target(out_h, out_w)?;
        let rows = pool_spans(self.height, out_h);
        let cols = pool_spans(self.width, out_w);
        let mut out = Mask::empty(out_h, out_w);
        for (oy, &(r0, r1)) in rows.iter().enumerate() {
            for (ox, &(c0, c1)) in cols.iter().enumerate() {
                out.set(oy, ox, self.any_in(r0, r1, c0, c1));
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour resampling with `src = floor(dst * in / out)`.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Mask> {
        check_target(out_h, out_w)?;
        let mut out = Mask::empty(out_h, out_w);
        for oy in 0..out_h {
            let sy = oy * self.height / out_h;
            for ox in 0..out_w {
                let sx = ox * self.width / out_w;
                out.set(oy, ox, self.get(sy, sx));
            }
        }
        Ok(out)
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Usage(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

/// For each output index: the two source neighbours and the blend factor,
/// with the first and last samples aligned to the source corners.
fn corner_aligned_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let pos = if out_len == 1 {
                (in_len as f64 - 1.0) / 2.0
            } else {
                o as f64 * (in_len as f64 - 1.0) / (out_len as f64 - 1.0)
            };
            let lo = (pos.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn pool_spans(in_len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|o| {
            let lo = o * in_len / out_len;
            let hi = ((o + 1) * in_len).div_ceil(out_len).max(lo + 1);
            (lo, hi.min(in_len))
        })
        .collect()
}

/// Bilinear, corner-aligned resampling of a score grid. No smoothing is
/// applied, so output values stay inside the input's `[min, max]`.
pub fn upsample_map(map: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    check_target(out_h, out_w)?;
    if map.is_empty() {
        return Err(Error::Usage("cannot resample an empty grid".into()));
    }
    if map.height == out_h && map.width == out_w {
        return Ok(map.clone());
    }
    let ys = corner_aligned_taps(map.height, out_h);
    let xs = corner_aligned_taps(map.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = map.get(y0, x0);
            let v01 = map.get(y0, x1);
            let v10 = map.get(y1, x0);
            let v11 = map.get(y1, x1);
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            let v = top + (bottom - top) * fy;
            // convex combination; clamp away rounding excursions
            let lo = v00.min(v01).min(v10).min(v11);
            let hi = v00.max(v01).max(v10).max(v11);
            data.push(v.clamp(lo, hi));
        }
    }
    Ok(Grid {
        height: out_h,
        width: out_w,
        data,
    })
}

/// Spans of an `n x n` partition of a `len`-long axis: cell `k` covers
/// `[k*len/n, (k+1)*len/n)`.
pub fn cell_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|k| (k * len / n, (k + 1) * len / n)).collect()
}
