//! Per-region overlap integrated over the false-positive rate.

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

pub const DEFAULT_AUPRO_FPR_LIMIT: f64 = 0.3;

/// Labels 8-connected anomalous components. Returns per-pixel labels
/// (`None` for normal pixels) and each component's pixel count.
pub fn label_regions(mask: &Mask) -> (Vec<Option<usize>>, Vec<usize>) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![None; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start].is_some() {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        labels[start] = Some(id);
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.data[q] && labels[q].is_none() {
                        labels[q] = Some(id);
                        stack.push(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Area under the (FPR, mean per-region overlap) curve for FPR in
/// `[0, fpr_limit]`, divided by `fpr_limit`.
///
/// Operating points are taken at every unique map value. The curve is
/// integrated by trapezoids between consecutive operating points and
/// linearly interpolated at `fpr_limit`. Below the lowest operating FPR the
/// curve contributes nothing.
pub fn aupro(maps: &[Grid], masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Usage(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    // (score, region) per pixel, with regions numbered globally
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.height != mask.height || map.width != mask.width {
            return Err(Error::Shape(format!(
                "image {i}: map {}x{} vs mask {}x{}",
                map.height, map.width, mask.height, mask.width
            )));
        }
        if let Some(k) = map.data.iter().position(|v| v.is_nan()) {
            return Err(Error::Validation(format!(
                "image {i}: NaN map value at pixel {k}"
            )));
        }
        let (labels, sizes) = label_regions(mask);
        let offset = region_sizes.len();
        region_sizes.extend(sizes);
        pixels.extend(
            map.data
                .iter()
                .zip(labels)
                .map(|(&s, l)| (s, l.map(|id| id + offset))),
        );
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric(
            "AUPRO needs at least one anomalous region".into(),
        ));
    }
    let negatives = pixels.iter().filter(|(_, r)| r.is_none()).count();
    if negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUPRO needs normal pixels for the FPR axis".into(),
        ));
    }

    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let regions = region_sizes.len() as f64;
    let mut curve = Vec::new();
    let mut fp = 0usize;
    let mut pro_sum = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                Some(r) => pro_sum += 1.0 / region_sizes[r] as f64,
                None => fp += 1,
            }
            i += 1;
        }
        curve.push((fp as f64 / negatives as f64, pro_sum / regions));
    }
    Ok(integrate_to_limit(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoidal area of a curve with non-decreasing x, clipped at `limit`.
pub(crate) fn integrate_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_at) / 2.0;
            break;
        }
    }
    area
}
