//! Seeded desk-scale corpus: striped class textures with blob- and
//! scratch-shaped defects painted in a reserved red colour.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::manifest::{write_manifest, DatasetManifest, ManifestEntry, Split};
use crate::io::pnm::{write_image, write_mask};
use crate::raster::{Mask, Raster};
use crate::rng::derived_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub anomaly_fraction: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            images_per_class: 40,
            anomaly_fraction: 0.5,
            seed: 7,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub class_name: String,
    pub split: Split,
    pub image: Raster,
    pub mask: Mask,
}

impl SynthImage {
    pub fn label(&self) -> bool {
        self.mask.any()
    }
}

struct Texture {
    base: [f64; 3],
    freq: (f64, f64),
    amplitude: f64,
}

impl Texture {
    fn for_class(seed: u64, class: usize) -> Self {
        let mut rng = derived_rng(seed, &[0xC1A55, class as u64]);
        let g = rng.gen_range(0.35..0.65);
        let b = rng.gen_range(0.35..0.65);
        let r = (g + b) / 2.0 - rng.gen_range(0.05..0.2);
        Self {
            base: [r, g, b],
            freq: (rng.gen_range(1..4) as f64, rng.gen_range(0..3) as f64),
            amplitude: rng.gen_range(0.08..0.15),
        }
    }

    fn paint(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let noise = Normal::new(0.0, 0.03).expect("valid sigma");
        let mut img = Raster::zeros(h, w, 3);
        for row in 0..h {
            for col in 0..w {
                let t = std::f64::consts::TAU
                    * (self.freq.0 * col as f64 / w as f64 + self.freq.1 * row as f64 / h as f64)
                    + phase;
                let wave = self.amplitude * t.sin();
                let px = img.pixel_mut(row, col);
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = (self.base[ch] + wave + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    }
}

fn paint_defect(rng: &mut ChaCha8Rng, img: &mut Raster, mask: &mut Mask) {
    let (h, w) = (img.height as f64, img.width as f64);
    let blob = rng.gen_bool(0.5);
    let cy = rng.gen_range(0.12 * h..0.88 * h);
    let cx = rng.gen_range(0.12 * w..0.88 * w);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let scale = h.min(w) / 64.0;
    let inside: Box<dyn Fn(f64, f64) -> bool> = if blob {
        let ra = rng.gen_range(3.0..8.0) * scale;
        let rb = rng.gen_range(3.0..8.0) * scale;
        Box::new(move |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
        })
    } else {
        let half_len = rng.gen_range(6.0..15.0) * scale;
        let half_thick = rng.gen_range(1.0..1.8) * scale;
        Box::new(move |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let along = dx * cos + dy * sin;
            let across = -dx * sin + dy * cos;
            along.abs() <= half_len && across.abs() <= half_thick
        })
    };
    for row in 0..img.height {
        for col in 0..img.width {
            if inside(row as f64 + 0.5, col as f64 + 0.5) {
                let px = img.pixel_mut(row, col);
                px[0] = rng.gen_range(0.85..0.97);
                px[1] = rng.gen_range(0.08..0.2);
                px[2] = rng.gen_range(0.08..0.2);
                mask.set(row, col, true);
            }
        }
    }
}

pub fn class_name(class: usize) -> String {
    format!("class{class:02}")
}

/// Generates the corpus in memory. Per class, `round(images * fraction)`
/// images are anomalous; normal and anomalous images each alternate between
/// the train and test splits.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    if !(0.0..=1.0).contains(&cfg.anomaly_fraction) {
        return Err(Error::Usage(format!(
            "anomaly fraction must lie in [0, 1], got {}",
            cfg.anomaly_fraction
        )));
    }
    if cfg.classes == 0 || cfg.images_per_class == 0 {
        return Err(Error::Usage(
            "synthetic corpus needs at least one class and one image per class".into(),
        ));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::Usage("synthetic images must be at least 8x8".into()));
    }
    let mut out = Vec::with_capacity(cfg.classes * cfg.images_per_class);
    for class in 0..cfg.classes {
        let texture = Texture::for_class(cfg.seed, class);
        let anomalies = (cfg.images_per_class as f64 * cfg.anomaly_fraction).round() as usize;
        let mut is_anomaly = vec![false; cfg.images_per_class];
        is_anomaly[..anomalies].iter_mut().for_each(|a| *a = true);
        is_anomaly.shuffle(&mut derived_rng(cfg.seed, &[0x5EED, class as u64]));
        let (mut normals_seen, mut anomalies_seen) = (0usize, 0usize);
        for (idx, &anomalous) in is_anomaly.iter().enumerate() {
            let mut rng = derived_rng(cfg.seed, &[class as u64, idx as u64]);
            let mut image = texture.paint(&mut rng, cfg.height, cfg.width);
            let mut mask = Mask::empty(cfg.height, cfg.width);
            let counter = if anomalous {
                let defects = rng.gen_range(1..=2);
                for _ in 0..defects {
                    paint_defect(&mut rng, &mut image, &mut mask);
                }
                while !mask.any() {
                    paint_defect(&mut rng, &mut image, &mut mask);
                }
                &mut anomalies_seen
            } else {
                &mut normals_seen
            };
            let split = if *counter % 2 == 0 {
                Split::Train
            } else {
                Split::Test
            };
            *counter += 1;
            out.push(SynthImage {
                id: format!("{}_{:04}", class_name(class), idx),
                class_name: class_name(class),
                split,
                image,
                mask,
            });
        }
    }
    Ok(out)
}

/// Writes images (`images/*.ppm`), masks of anomalous images
/// (`masks/*.pgm`) and `manifest.json` under `out_dir`.
pub fn write_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let images = generate(cfg)?;
    let mut entries = Vec::with_capacity(images.len());
    for img in &images {
        let image_rel = PathBuf::from("images").join(format!("{}.ppm", img.id));
        write_image(&img.image, &out_dir.join(&image_rel))?;
        let mask_path = if img.label() {
            let rel = PathBuf::from("masks").join(format!("{}.pgm", img.id));
            write_mask(&img.mask, &out_dir.join(&rel))?;
            Some(rel)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id: img.id.clone(),
            class_name: img.class_name.clone(),
            split: img.split,
            label: img.label() as u8,
            image_path: Some(image_rel),
            feature_path: None,
            mask_path,
        });
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        entries,
    };
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
