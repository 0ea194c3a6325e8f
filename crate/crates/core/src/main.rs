use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uniadet::harness::{self, AblationSuite, EvalOptions, FusionOverrides, PredictInput};
use uniadet::io::{ProviderKind, ProviderSpec};
use uniadet::metrics::DEFAULT_AUPRO_FPR_LIMIT;
use uniadet::synth::SynthConfig;
use uniadet::training::{Ablation, Optimizer, TrainConfig};
use uniadet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "uniadet",
    version,
    about = "Zero-/few-shot anomaly detection on frozen features"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (images, masks, manifest).
    Synth(SynthArgs),
    /// Train the per-layer heads on a manifest's train split.
    Train(TrainArgs),
    /// Score a manifest's test split and write CSV/JSON reports.
    Eval(EvalArgs),
    /// Predict one image or feature file.
    Predict(PredictArgs),
    /// Build a few-shot memory bank from normal train images of one class.
    Bank(BankArgs),
    /// Train and evaluate the ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    images_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    anomaly_fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Clone)]
struct ProviderArgs {
    /// files, synthetic or synthetic-conflict.
    #[arg(long, default_value = "files")]
    provider: String,
    /// Directory of `<id>.ufst` files for entries without feature_path.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Comma-separated block indices to use.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u16>>,
    /// Seed of the synthetic provider's projections.
    #[arg(long, default_value_t = 0)]
    geometry_seed: u64,
}

impl ProviderArgs {
    fn spec(&self) -> Result<ProviderSpec> {
        Ok(ProviderSpec {
            kind: self.provider.parse::<ProviderKind>()?,
            blocks: self.layers.clone(),
            features_dir: self.features_dir.clone(),
            geometry_seed: self.geometry_seed,
        })
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long = "lambda-p", default_value_t = 0.5)]
    lambda_p: f64,
    #[arg(long = "lambda-f", default_value_t = 0.5)]
    lambda_f: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share one weight matrix between classification and segmentation.
    #[arg(long)]
    no_dcs: bool,
    /// Share one weight pair across layers.
    #[arg(long)]
    no_dhf: bool,
    /// Disable class-aware augmentation.
    #[arg(long)]
    no_caa: bool,
    /// Plain gradient descent instead of Adam.
    #[arg(long)]
    sgd: bool,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            tau: self.tau,
            lambda_p: self.lambda_p,
            lambda_f: self.lambda_f,
            seed: self.seed,
            optimizer: if self.sgd {
                Optimizer::Sgd
            } else {
                Optimizer::adam()
            },
            ablation: Ablation {
                decouple_cls_seg: !self.no_dcs,
                decouple_layers: !self.no_dhf,
                use_caa: !self.no_caa,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Clone)]
struct FusionArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "lambda-p")]
    lambda_p: Option<f64>,
    #[arg(long = "lambda-f")]
    lambda_f: Option<f64>,
}

impl FusionArgs {
    fn overrides(&self) -> FusionOverrides {
        FusionOverrides {
            tau: self.tau,
            lambda_p: self.lambda_p,
            lambda_f: self.lambda_f,
        }
    }
}

#[derive(Args, Clone)]
struct EvalFlags {
    #[arg(long, default_value_t = 0)]
    shots: usize,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "aupro-fpr", default_value_t = DEFAULT_AUPRO_FPR_LIMIT)]
    aupro_fpr: f64,
    /// Multiplier on few-shot distances before fusion.
    #[arg(long, default_value_t = 0.5)]
    distance_scale: f64,
}

impl EvalFlags {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            shots: self.shots,
            repeats: self.repeat,
            seed: self.seed,
            aupro_fpr_limit: self.aupro_fpr,
            distance_scale: self.distance_scale,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Directory for report.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    eval: EvalFlags,
    #[command(flatten)]
    fusion: FusionArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// UFST feature file.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    features: Option<PathBuf>,
    /// PPM/PGM image, read through a raster provider.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Optional UFSB memory bank for few-shot prediction.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Output map (PGM); the score goes to the same path with `.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    distance_scale: f64,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    fusion: FusionArgs,
}

#[derive(Args)]
struct BankArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Class to draw references from (required with several classes).
    #[arg(long)]
    class: Option<String>,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long = "aupro-fpr", default_value_t = DEFAULT_AUPRO_FPR_LIMIT)]
    aupro_fpr: f64,
    /// Skip the component lines.
    #[arg(long)]
    no_components: bool,
    /// Skip the layer-subset sweep.
    #[arg(long)]
    no_layer_sweep: bool,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                classes: a.classes,
                images_per_class: a.images_per_class,
                anomaly_fraction: a.anomaly_fraction,
                seed: a.seed,
                height: a.size,
                width: a.size,
            };
            harness::cmd_synth(&a.out, &cfg)?;
        }
        Command::Train(a) => {
            let spec = a.provider.spec()?;
            harness::with_threads(cli.threads, || {
                harness::cmd_train(&a.manifest, &spec, &a.train.config(), &a.out)
            })?;
        }
        Command::Eval(a) => {
            let spec = a.provider.spec()?;
            let report = harness::with_threads(cli.threads, || {
                harness::cmd_eval(
                    &a.manifest,
                    &spec,
                    &a.weights,
                    a.fusion.overrides(),
                    &a.eval.options(),
                    a.out.as_deref(),
                )
            })?;
            print!("{}", report.to_csv());
        }
        Command::Predict(a) => {
            let spec = a.provider.spec()?;
            let input = match (a.features, a.image) {
                (Some(f), _) => PredictInput::Features(f),
                (None, Some(i)) => PredictInput::Image(i),
                (None, None) => return Err(Error::Usage("give --features or --image".into())),
            };
            let pred = harness::with_threads(cli.threads, || {
                harness::cmd_predict(
                    &input,
                    &spec,
                    &a.weights,
                    a.fusion.overrides(),
                    a.bank.as_deref(),
                    a.distance_scale,
                    &a.out,
                )
            })?;
            println!("{:.6}", pred.score);
        }
        Command::Bank(a) => {
            let spec = a.provider.spec()?;
            let bank = harness::with_threads(cli.threads, || {
                harness::cmd_bank(&a.manifest, &spec, a.class.as_deref(), a.shots, a.seed, &a.out)
            })?;
            println!("{} references: {}", bank.shots, bank.source_ids.join(" "));
        }
        Command::Ablate(a) => {
            let spec = a.provider.spec()?;
            let eval = EvalOptions {
                seed: a.train.seed,
                aupro_fpr_limit: a.aupro_fpr,
                ..EvalOptions::default()
            };
            let suite = AblationSuite {
                components: !a.no_components,
                layers: !a.no_layer_sweep,
            };
            let rows = harness::with_threads(cli.threads, || {
                harness::cmd_ablate(&a.manifest, &spec, &a.train.config(), &eval, suite, &a.out)
            })?;
            print!("{}", harness::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNIADET_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
