use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{aupr, aupro, auroc, f1_max, ScoredSet};
use crate::error::{Error, Result};
use crate::model::Provenance;
use crate::raster::{Grid, Mask};

pub const METRIC_COLUMNS: [&str; 7] = [
    "I-AUROC", "I-AUPR", "I-F1max", "P-AUROC", "P-AUPR", "P-F1max", "P-AUPRO",
];

/// One class's metric values. `None` when a metric is undefined for the
/// class (for example pixel metrics without any anomalous pixel).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub i_auroc: Option<f64>,
    pub i_aupr: Option<f64>,
    pub i_f1max: Option<f64>,
    pub p_auroc: Option<f64>,
    pub p_aupr: Option<f64>,
    pub p_f1max: Option<f64>,
    pub p_aupro: Option<f64>,
}

impl MetricValues {
    pub fn as_array(&self) -> [Option<f64>; 7] {
        [
            self.i_auroc,
            self.i_aupr,
            self.i_f1max,
            self.p_auroc,
            self.p_aupr,
            self.p_f1max,
            self.p_aupro,
        ]
    }

    pub fn from_array(v: [Option<f64>; 7]) -> Self {
        Self {
            i_auroc: v[0],
            i_aupr: v[1],
            i_f1max: v[2],
            p_auroc: v[3],
            p_aupr: v[4],
            p_f1max: v[5],
            p_aupro: v[6],
        }
    }
}

/// Scored image handed to [`evaluate_images`].
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub score: f64,
    pub label: bool,
    pub map: Grid,
    /// Absent masks count as all-normal.
    pub mask: Option<Mask>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Image and pixel metrics for one class.
pub fn evaluate_images(items: &[EvalItem], aupro_fpr_limit: f64) -> Result<MetricValues> {
    let mut image = ScoredSet::default();
    let mut pixel = ScoredSet::default();
    let mut maps = Vec::with_capacity(items.len());
    let mut masks = Vec::with_capacity(items.len());
    for item in items {
        image.push(item.score, item.label);
        let mask = match &item.mask {
            Some(m) => {
                if m.height != item.map.height || m.width != item.map.width {
                    return Err(Error::Shape(format!(
                        "map {}x{} vs mask {}x{}",
                        item.map.height, item.map.width, m.height, m.width
                    )));
                }
                m.clone()
            }
            None => Mask::empty(item.map.height, item.map.width),
        };
        pixel.scores.extend_from_slice(&item.map.data);
        pixel.labels.extend_from_slice(&mask.data);
        maps.push(item.map.clone());
        masks.push(mask);
    }
    Ok(MetricValues {
        i_auroc: defined(auroc(&image))?,
        i_aupr: defined(aupr(&image))?,
        i_f1max: defined(f1_max(&image))?,
        p_auroc: defined(auroc(&pixel))?,
        p_aupr: defined(aupr(&pixel))?,
        p_f1max: defined(f1_max(&pixel))?,
        p_aupro: defined(aupro(&maps, &masks, aupro_fpr_limit))?,
    })
}

/// Per-metric mean and population standard deviation over repeats.
pub fn mean_and_std(values: &[MetricValues]) -> (MetricValues, MetricValues) {
    let mut mean = [None; 7];
    let mut std = [None; 7];
    for k in 0..7 {
        let xs: Vec<f64> = values.iter().filter_map(|v| v.as_array()[k]).collect();
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        // identical repeats must report exactly their value and zero spread
        let m = if xs.iter().all(|&x| x == xs[0]) {
            xs[0]
        } else {
            xs.iter().sum::<f64>() / n
        };
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean[k] = Some(m);
        std[k] = Some(var.sqrt());
    }
    (MetricValues::from_array(mean), MetricValues::from_array(std))
}

fn class_mean(rows: &[MetricValues]) -> MetricValues {
    mean_and_std(rows).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub category: String,
    pub mean: MetricValues,
    pub std: MetricValues,
    pub images: usize,
    pub anomalies: usize,
}

/// Which normal references a repeat drew for a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDraw {
    pub repeat: usize,
    pub category: String,
    pub ids: Vec<String>,
}

/// Everything needed to reproduce a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub tau: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub aupro_fpr_limit: f64,
    pub distance_scale: f64,
    pub shots: usize,
    pub repeats: usize,
    pub seed: u64,
    pub blocks: Vec<u16>,
    pub std_convention: String,
    pub training: Provenance,
    pub reference_draws: Vec<ReferenceDraw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    /// Dataset mean row: per repeat the arithmetic mean over classes, then
    /// mean and deviation over repeats.
    pub mean: ClassReport,
    pub config: ReportConfig,
}

impl MetricsReport {
    /// `per_repeat[r]` maps class name to that repeat's values.
    pub fn from_repeats(
        per_repeat: &[BTreeMap<String, MetricValues>],
        counts: &BTreeMap<String, (usize, usize)>,
        config: ReportConfig,
    ) -> Result<Self> {
        if per_repeat.is_empty() {
            return Err(Error::Usage("report needs at least one repeat".into()));
        }
        let mut classes = Vec::new();
        for (category, &(images, anomalies)) in counts {
            let runs: Vec<MetricValues> = per_repeat
                .iter()
                .filter_map(|r| r.get(category).copied())
                .collect();
            let (mean, std) = mean_and_std(&runs);
            classes.push(ClassReport {
                category: category.clone(),
                mean,
                std,
                images,
                anomalies,
            });
        }
        let dataset_runs: Vec<MetricValues> = per_repeat
            .iter()
            .map(|r| class_mean(&r.values().copied().collect::<Vec<_>>()))
            .collect();
        let (mean, std) = mean_and_std(&dataset_runs);
        let mean = ClassReport {
            category: "Mean".into(),
            mean,
            std,
            images: counts.values().map(|c| c.0).sum(),
            anomalies: counts.values().map(|c| c.1).sum(),
        };
        Ok(Self {
            classes,
            mean,
            config,
        })
    }

    /// Table-shaped CSV. Deviation columns are appended when more than one
    /// repeat was run.
    pub fn to_csv(&self) -> String {
        let with_std = self.config.repeats > 1;
        let mut out = String::from("category");
        for c in METRIC_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        if with_std {
            for c in METRIC_COLUMNS {
                let _ = write!(out, ",{c}-std");
            }
        }
        out.push('\n');
        for row in self.classes.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&csv_field(&row.category));
            for v in row.mean.as_array() {
                out.push(',');
                out.push_str(&fmt_opt(v));
            }
            if with_std {
                for v in row.std.as_array() {
                    out.push(',');
                    out.push_str(&fmt_opt(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
