//! Subcommand implementations behind the `uniadet` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fewshot::{build_bank, predict_few_shot, FewShotOptions, MemoryBank, DEFAULT_DISTANCE_SCALE};
use crate::io::formats::{
    read_bank_file, read_feature_file, read_weight_file, write_bank_file, write_file, write_weight_file,
};
use crate::io::manifest::{load_manifest, DatasetManifest, ManifestEntry, ManifestOptions, Split};
use crate::io::pnm::{read_image, read_mask_sized, write_map};
use crate::io::provider::{FeatureProvider, ProviderKind, ProviderSpec};
use crate::metrics::report::{
    evaluate_images, EvalItem, MetricValues, MetricsReport, ReferenceDraw, ReportConfig, METRIC_COLUMNS,
};
use crate::metrics::DEFAULT_AUPRO_FPR_LIMIT;
use crate::model::{predict_zero_shot, AnomalyPrediction, FeatureStack, WeightBank};
use crate::raster::Mask;
use crate::rng::{derived_rng, name_key};
use crate::synth::{write_corpus, SynthConfig};
use crate::training::{train, training_log_csv, Ablation, TrainConfig, TrainOutcome};

/// Runs `f` on a dedicated pool of `threads` workers (`None`: all cores).
/// Results never depend on the pool size.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

pub fn cmd_synth(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let m = write_corpus(out_dir, cfg)?;
    info!("wrote {} entries to {}", m.entries.len(), out_dir.display());
    Ok(m)
}

fn load_checked(path: &Path, pixel_eval: bool) -> Result<DatasetManifest> {
    load_manifest(
        path,
        ManifestOptions {
            pixel_eval,
            check_masks: false,
            strict: true,
        },
    )
}

/// Path of the per-epoch loss log written next to a weight file.
pub fn training_log_path(weights: &Path) -> PathBuf {
    weights.with_extension("train.csv")
}

pub fn cmd_train(
    manifest: &Path,
    provider: &ProviderSpec,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome> {
    let manifest = load_checked(manifest, false)?;
    let provider = provider.build()?;
    let outcome = train(&manifest, provider.as_ref(), cfg)?;
    write_weight_file(&outcome.weights, out)?;
    write_file(&training_log_path(out), training_log_csv(&outcome.log).as_bytes())?;
    if let Some(last) = outcome.log.last() {
        info!("trained {} epochs, final loss {:.5}", last.epoch, last.loss.total);
    }
    Ok(outcome)
}

/// Values overriding those stored in a weight file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FusionOverrides {
    pub tau: Option<f64>,
    pub lambda_p: Option<f64>,
    pub lambda_f: Option<f64>,
}

impl FusionOverrides {
    pub fn apply(&self, weights: &mut WeightBank) -> Result<()> {
        if let Some(t) = self.tau {
            weights.tau = t as f32;
        }
        if let Some(l) = self.lambda_p {
            weights.lambda_p = l as f32;
        }
        if let Some(l) = self.lambda_f {
            weights.lambda_f = l as f32;
        }
        weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub shots: usize,
    pub repeats: usize,
    pub seed: u64,
    pub aupro_fpr_limit: f64,
    pub distance_scale: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            shots: 0,
            repeats: 1,
            seed: 0,
            aupro_fpr_limit: DEFAULT_AUPRO_FPR_LIMIT,
            distance_scale: DEFAULT_DISTANCE_SCALE,
        }
    }
}

impl EvalOptions {
    fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Usage("--repeat must be at least 1".into()));
        }
        if !(self.aupro_fpr_limit > 0.0 && self.aupro_fpr_limit <= 1.0) {
            return Err(Error::Usage(format!(
                "AUPRO FPR limit must lie in (0, 1], got {}",
                self.aupro_fpr_limit
            )));
        }
        if !(self.distance_scale > 0.0) {
            return Err(Error::Usage("distance scale must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded draw of `shots` normal train-split references for one class,
/// uniform without replacement.
pub fn draw_references<'a>(
    manifest: &'a DatasetManifest,
    class: &str,
    shots: usize,
    seed: u64,
    repeat: usize,
) -> Result<Vec<&'a ManifestEntry>> {
    let pool: Vec<&ManifestEntry> = manifest
        .split(Split::Train)
        .filter(|e| e.class_name == class && !e.is_anomaly())
        .collect();
    if pool.len() < shots {
        return Err(Error::Validation(format!(
            "class {class}: {shots} references requested but only {} normal train images",
            pool.len()
        )));
    }
    let mut rng = derived_rng(seed, &[repeat as u64, name_key(class)]);
    Ok(pool.choose_multiple(&mut rng, shots).copied().collect())
}

struct TestImage<'a> {
    entry: &'a ManifestEntry,
    features: FeatureStack,
    mask: Option<Mask>,
}

fn load_test_images<'a>(
    entries: &[&'a ManifestEntry],
    provider: &dyn FeatureProvider,
) -> Result<Vec<TestImage<'a>>> {
    entries
        .par_iter()
        .map(|&entry| {
            let features = provider.features_for(entry)?;
            let mask = match &entry.mask_path {
                Some(p) => Some(read_mask_sized(p, features.image_height, features.image_width)?),
                None => None,
            };
            Ok(TestImage {
                entry,
                features,
                mask,
            })
        })
        .collect()
}

fn score_class(
    images: &[TestImage<'_>],
    weights: &WeightBank,
    bank: Option<&MemoryBank>,
    opts: &EvalOptions,
) -> Result<MetricValues> {
    let few = FewShotOptions {
        distance_scale: opts.distance_scale,
    };
    let items = images
        .par_iter()
        .map(|t| {
            let pred = match bank {
                Some(b) => predict_few_shot(&t.features, weights, b, few),
                None => predict_zero_shot(&t.features, weights),
            }?;
            Ok(EvalItem {
                score: pred.score,
                label: t.entry.is_anomaly(),
                map: pred.map,
                mask: t.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_images(&items, opts.aupro_fpr_limit)
}

/// Scores the test split class by class. With `shots > 0`, every repeat
/// draws fresh references per class and builds that class's memory bank.
pub fn evaluate(
    manifest: &DatasetManifest,
    provider: &dyn FeatureProvider,
    weights: &WeightBank,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    opts.validate()?;
    weights.validate()?;
    let by_class = manifest.by_class(Split::Test);
    if by_class.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    if opts.shots > 0 {
        let short: Vec<String> = by_class
            .keys()
            .filter_map(|c| draw_references(manifest, c, opts.shots, opts.seed, 0).err())
            .map(|e| e.to_string())
            .collect();
        if !short.is_empty() {
            return Err(Error::Validation(short.join("; ")));
        }
    }

    let mut counts = BTreeMap::new();
    let mut tests = BTreeMap::new();
    for (class, entries) in &by_class {
        counts.insert(
            class.clone(),
            (entries.len(), entries.iter().filter(|e| e.is_anomaly()).count()),
        );
        let images = load_test_images(entries, provider)?;
        for t in &images {
            weights.check_compatible(&t.features)?;
        }
        tests.insert(class.clone(), images);
    }

    let mut per_repeat = Vec::with_capacity(opts.repeats);
    let mut draws = Vec::new();
    if opts.shots == 0 {
        let mut row = BTreeMap::new();
        for (class, images) in &tests {
            row.insert(class.clone(), score_class(images, weights, None, opts)?);
        }
        per_repeat = vec![row; opts.repeats];
    } else {
        for repeat in 0..opts.repeats {
            let mut row = BTreeMap::new();
            for (class, images) in &tests {
                let refs = draw_references(manifest, class, opts.shots, opts.seed, repeat)?;
                let stacks = refs
                    .par_iter()
                    .map(|e| provider.features_for(e))
                    .collect::<Result<Vec<_>>>()?;
                let bank = build_bank(&stacks)?;
                draws.push(ReferenceDraw {
                    repeat,
                    category: class.clone(),
                    ids: bank.source_ids.clone(),
                });
                row.insert(class.clone(), score_class(images, weights, Some(&bank), opts)?);
            }
            per_repeat.push(row);
        }
    }

    let config = ReportConfig {
        tau: weights.tau as f64,
        lambda_p: weights.lambda_p as f64,
        lambda_f: weights.lambda_f as f64,
        aupro_fpr_limit: opts.aupro_fpr_limit,
        distance_scale: opts.distance_scale,
        shots: opts.shots,
        repeats: opts.repeats,
        seed: opts.seed,
        blocks: weights.block_indices(),
        std_convention: "population".into(),
        training: weights.metadata.clone(),
        reference_draws: draws,
    };
    MetricsReport::from_repeats(&per_repeat, &counts, config)
}

pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    write_file(&out_dir.join("report.csv"), report.to_csv().as_bytes())?;
    let mut json = report.to_json()?;
    json.push('\n');
    write_file(&out_dir.join("report.json"), json.as_bytes())
}

pub fn cmd_eval(
    manifest: &Path,
    provider: &ProviderSpec,
    weights: &Path,
    overrides: FusionOverrides,
    opts: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let manifest = load_checked(manifest, true)?;
    let provider = provider.build()?;
    let mut weights = read_weight_file(weights)?;
    overrides.apply(&mut weights)?;
    let report = evaluate(&manifest, provider.as_ref(), &weights, opts)?;
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Input of a single prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictInput {
    Features(PathBuf),
    Image(PathBuf),
}

#[derive(Debug, Clone, Serialize)]
struct PredictionSummary<'a> {
    source: &'a str,
    score: f64,
    height: usize,
    width: usize,
    few_shot: bool,
    layer_scores: &'a [f64],
    blocks: Vec<u16>,
}

/// Path of the JSON score written next to a predicted map.
pub fn prediction_json_path(map_out: &Path) -> PathBuf {
    map_out.with_extension("json")
}

pub fn cmd_predict(
    input: &PredictInput,
    provider: &ProviderSpec,
    weights: &Path,
    overrides: FusionOverrides,
    bank: Option<&Path>,
    distance_scale: f64,
    map_out: &Path,
) -> Result<AnomalyPrediction> {
    let mut weights = read_weight_file(weights)?;
    overrides.apply(&mut weights)?;
    let features = match input {
        PredictInput::Features(p) => {
            let stack = read_feature_file(p)?;
            match &provider.blocks {
                Some(b) => stack.select_blocks(b)?,
                None => stack,
            }
        }
        PredictInput::Image(p) => {
            if provider.kind == ProviderKind::Files {
                return Err(Error::Usage(
                    "predicting from an image needs a raster provider".into(),
                ));
            }
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            provider.build()?.extract(&read_image(p)?, &id)?
        }
    };
    let bank = bank.map(read_bank_file).transpose()?;
    let pred = match &bank {
        Some(b) => predict_few_shot(&features, &weights, b, FewShotOptions { distance_scale })?,
        None => predict_zero_shot(&features, &weights)?,
    };
    write_map(&pred.map, map_out)?;
    let summary = PredictionSummary {
        source: &features.source_id,
        score: pred.score,
        height: pred.map.height,
        width: pred.map.width,
        few_shot: bank.is_some(),
        layer_scores: &pred.layer_scores,
        blocks: features.block_indices(),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&prediction_json_path(map_out), json.as_bytes())?;
    Ok(pred)
}

/// Builds a memory bank from `shots` seeded normal references of `class`
/// (the same draw as repeat 0 of `eval`).
pub fn cmd_bank(
    manifest: &Path,
    provider: &ProviderSpec,
    class: Option<&str>,
    shots: usize,
    seed: u64,
    out: &Path,
) -> Result<MemoryBank> {
    if shots == 0 {
        return Err(Error::Usage("a memory bank needs --shots >= 1".into()));
    }
    let manifest = load_checked(manifest, false)?;
    let class = match class {
        Some(c) => c.to_string(),
        None => {
            let classes = manifest.classes();
            match classes.as_slice() {
                [only] => only.clone(),
                _ => {
                    return Err(Error::Usage(format!(
                        "manifest has classes {classes:?}; pick one with --class"
                    )))
                }
            }
        }
    };
    let provider = provider.build()?;
    let refs = draw_references(&manifest, &class, shots, seed, 0)?;
    let stacks = refs
        .par_iter()
        .map(|e| provider.features_for(e))
        .collect::<Result<Vec<_>>>()?;
    let bank = build_bank(&stacks)?;
    write_bank_file(&bank, out)?;
    Ok(bank)
}

/// One trained-and-evaluated configuration of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub blocks: Vec<u16>,
    pub shots: usize,
    pub metrics: MetricValues,
}

impl AblationRow {
    /// Mean of image and pixel AUROC.
    pub fn auroc_mean(&self) -> Option<f64> {
        Some((self.metrics.i_auroc? + self.metrics.p_auroc?) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSuite {
    /// Component lines: shared weights, +DCS, +DHF, +CAA, and the full model
    /// with one shot.
    pub components: bool,
    /// Full model on the last 1..=5 blocks.
    pub layers: bool,
}

impl Default for AblationSuite {
    fn default() -> Self {
        Self {
            components: true,
            layers: true,
        }
    }
}

fn ablation(dcs: bool, dhf: bool, caa: bool) -> Ablation {
    Ablation {
        decouple_cls_seg: dcs,
        decouple_layers: dhf,
        use_caa: caa,
    }
}

/// Trains and evaluates each configuration. Training uses the manifest's
/// train split, evaluation its test split.
pub fn run_ablation(
    manifest: &DatasetManifest,
    provider: &ProviderSpec,
    base: &TrainConfig,
    eval: &EvalOptions,
    suite: AblationSuite,
) -> Result<Vec<AblationRow>> {
    let full = provider.build()?;
    let first = manifest
        .entries
        .first()
        .ok_or_else(|| Error::Validation("manifest has no entries".into()))?;
    let all_blocks = full.features_for(first)?.block_indices();

    let mut jobs: Vec<(String, Ablation, Vec<u16>, usize)> = Vec::new();
    if suite.components {
        jobs.push((
            "shared".into(),
            ablation(false, false, false),
            all_blocks.clone(),
            0,
        ));
        jobs.push(("dcs".into(), ablation(true, false, false), all_blocks.clone(), 0));
        jobs.push((
            "dcs-dhf".into(),
            ablation(true, true, false),
            all_blocks.clone(),
            0,
        ));
        jobs.push((
            "dcs-dhf-caa".into(),
            ablation(true, true, true),
            all_blocks.clone(),
            0,
        ));
        jobs.push((
            "dcs-dhf-caa-1shot".into(),
            ablation(true, true, true),
            all_blocks.clone(),
            1,
        ));
    }
    if suite.layers {
        for k in 1..=all_blocks.len().min(5) {
            let blocks = all_blocks[all_blocks.len() - k..].to_vec();
            jobs.push((format!("last{k}"), ablation(true, true, true), blocks, 0));
        }
    }

    let mut trained: Vec<(Ablation, Vec<u16>, WeightBank)> = Vec::new();
    let mut rows = Vec::with_capacity(jobs.len());
    for (name, abl, blocks, shots) in jobs {
        let spec = ProviderSpec {
            blocks: Some(blocks.clone()),
            ..provider.clone()
        };
        let p = spec.build()?;
        let cached = trained
            .iter()
            .find(|t| t.0 == abl && t.1 == blocks)
            .map(|t| t.2.clone());
        let weights = match cached {
            Some(w) => w,
            None => {
                let cfg = TrainConfig {
                    ablation: abl,
                    ..base.clone()
                };
                let w = train(manifest, p.as_ref(), &cfg)?.weights;
                trained.push((abl, blocks.clone(), w.clone()));
                w
            }
        };
        let opts = EvalOptions {
            shots,
            ..eval.clone()
        };
        let report = evaluate(manifest, p.as_ref(), &weights, &opts)?;
        info!("{name}: {:?}", report.mean.mean);
        rows.push(AblationRow {
            name,
            ablation: abl,
            blocks,
            shots,
            metrics: report.mean.mean,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,dcs,dhf,caa,blocks,shots");
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        let blocks: Vec<String> = r.blocks.iter().map(|b| b.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.name,
            r.ablation.decouple_cls_seg as u8,
            r.ablation.decouple_layers as u8,
            r.ablation.use_caa as u8,
            blocks.join(" "),
            r.shots
        ));
        for v in r.metrics.as_array() {
            out.push(',');
            if let Some(x) = v {
                out.push_str(&format!("{x:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(
    manifest: &Path,
    provider: &ProviderSpec,
    base: &TrainConfig,
    eval: &EvalOptions,
    suite: AblationSuite,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let manifest = load_checked(manifest, true)?;
    let rows = run_ablation(&manifest, provider, base, eval, suite)?;
    write_file(out, ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}
