//! `eqgan` command-line runner.
//!
//! Outputs go under `$EQGAN_OUTPUT_ROOT` (default `runs/`) unless `--out` is given. Exit codes:
//! 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use burn::prelude::Device;
use clap::{Args, Parser, Subcommand};
use eqgan::data::synthetic::{write_dataset, SyntheticSpec};
use eqgan::data::{split_unseen, write_split_manifest, Dataset, Partition, SplitManifestRow};
use eqgan::eval::{
    augment_classification, dump_feature_maps, eval_generation, generate_images, shot_sweep,
    unseen_parts, write_evaluation, write_image_grid, write_sweep, AugmentOptions, EvalOptions,
    RandomConvEmbedder, DEFAULT_SHOTS,
};
use eqgan::trainer::{load_generator, resolve_checkpoint, RunConfig, Trainer};
use eqgan::{Error, CODE_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OUTPUT_ROOT_VAR: &str = "EQGAN_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "eqgan", version, about = "Few-shot image generation with feature equalization fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Generate images for unseen categories from a checkpoint.
    Generate(GenerateArgs),
    /// FID / LPIPS evaluation on the unseen categories.
    Eval(EvalArgs),
    /// FID across shot counts, one checkpoint per K.
    Sweep(SweepArgs),
    /// Classifier training with and without generated images.
    Classify(ClassifyArgs),
    /// Per-block channel-mean heat maps of the encoder.
    DumpFeatures(DumpArgs),
    /// Write the built-in synthetic dataset as PNG folders.
    MakeSynthetic(SyntheticArgs),
}

/// One optional flag per config key; `--lambda-rec 0.7` sets `lambda_rec`.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    lambda_cls_g: Option<String>,
    #[arg(long)]
    lambda_rec: Option<String>,
    #[arg(long)]
    lambda_con: Option<String>,
    #[arg(long)]
    lambda_cls_d: Option<String>,
    #[arg(long)]
    texture_skips: Option<String>,
    #[arg(long)]
    structure_skips: Option<String>,
    #[arg(long)]
    consistency_loss: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    branch_channels: Option<String>,
    #[arg(long)]
    disc_channels: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_root: Option<String>,
    #[arg(long)]
    synthetic_categories: Option<String>,
    #[arg(long)]
    synthetic_images: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields = [
            ("iterations", &self.iterations),
            ("batch_size", &self.batch_size),
            ("k", &self.k),
            ("lr", &self.lr),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("lambda_cls_g", &self.lambda_cls_g),
            ("lambda_rec", &self.lambda_rec),
            ("lambda_con", &self.lambda_con),
            ("lambda_cls_d", &self.lambda_cls_d),
            ("texture_skips", &self.texture_skips),
            ("structure_skips", &self.structure_skips),
            ("consistency_loss", &self.consistency_loss),
            ("seed", &self.seed),
            ("checkpoint_every", &self.checkpoint_every),
            ("log_every", &self.log_every),
            ("image_size", &self.image_size),
            ("channels", &self.channels),
            ("branch_channels", &self.branch_channels),
            ("disc_channels", &self.disc_channels),
            ("dataset", &self.dataset),
            ("data_root", &self.data_root),
            ("synthetic_categories", &self.synthetic_categories),
            ("synthetic_images", &self.synthetic_images),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale synthetic preset instead of the full-scale defaults.
    #[arg(long)]
    smoke: bool,
    /// Continue from a checkpoint or run directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total iterations (the schedule still spans `iterations`).
    #[arg(long)]
    stop_at: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint or run directory; `last` means the newest checkpoint of the default train run.
    #[arg(long, default_value = "last")]
    checkpoint: String,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Images per unseen category.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 128)]
    per_category: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// `K=PATH` pairs; shots without a checkpoint are reported as gaps.
    #[arg(long = "checkpoint", value_parser = parse_shot_checkpoint)]
    checkpoints: Vec<(usize, PathBuf)>,
    /// Shot counts to report.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SHOTS)]
    k_values: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    per_category: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_shot_checkpoint(s: &str) -> Result<(usize, PathBuf), String> {
    let (k, p) = s.split_once('=').ok_or("expected K=PATH")?;
    Ok((k.parse().map_err(|_| format!("bad shot count '{k}'"))?, PathBuf::from(p)))
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// `flower` (10:15:15, 30 generated per category) or `hundred` (30:35:35, 50).
    #[arg(long, default_value = "flower")]
    protocol: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Image files to visualize; defaults to the first image of each unseen category.
    #[arg(long = "image")]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 10)]
    categories: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn out_dir(explicit: &Option<PathBuf>, command: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(command))
}

fn checkpoint_path(arg: &CheckpointArg) -> PathBuf {
    if arg.checkpoint == "last" {
        output_root().join("train").join("checkpoints")
    } else {
        PathBuf::from(&arg.checkpoint)
    }
}

/// `manifest.txt`: command line, code version and the resolved settings.
fn write_manifest(dir: &Path, settings: &str) -> eqgan::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    let args: Vec<String> = std::env::args().collect();
    let _ = writeln!(text, "command = {}", args.join(" "));
    let _ = writeln!(text, "code_version = {CODE_VERSION}");
    text.push_str(settings);
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn eval_context(checkpoint: &CheckpointArg) -> eqgan::Result<(eqgan::generator::Generator, RunConfig, Dataset, Device)> {
    let device = Device::flex();
    let dir = resolve_checkpoint(&checkpoint_path(checkpoint))?;
    let (generator, config, _) = load_generator(&dir, &device)?;
    let dataset = config.load_dataset()?;
    Ok((generator, config, dataset, device))
}

fn unseen_split(dataset: &Dataset, seed: u64) -> eqgan::Result<eqgan::data::UnseenSplit> {
    let first = dataset.partition(Partition::Unseen)[0];
    split_unseen(dataset, unseen_parts(dataset.images_in(first)), seed)
}

fn run(cli: Cli) -> eqgan::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let out = out_dir(&a.out, "train");
            let mut trainer = match &a.resume {
                Some(ckpt) => {
                    let dir = resolve_checkpoint(ckpt)?;
                    let (_, config) = eqgan::trainer::read_manifest(&dir)?;
                    Trainer::resume(&dir, config.load_dataset()?, &Device::flex().autodiff())?
                }
                None => {
                    let mut config = match (&a.config, a.smoke) {
                        (Some(p), _) => RunConfig::load(Some(p), &[])?,
                        (None, true) => RunConfig::smoke(),
                        (None, false) => RunConfig::default(),
                    };
                    for (k, v) in a.overrides.pairs() {
                        config.set(&k, &v)?;
                    }
                    config.validate()?;
                    let dataset = config.load_dataset()?;
                    Trainer::new(config, dataset, &Device::flex().autodiff())?
                }
            };
            write_manifest(&out, &trainer.config().serialize())?;
            let ckpt = trainer.run(&out, a.stop_at)?;
            println!("{}", ckpt.display());
        }
        Command::Generate(a) => {
            let (generator, config, dataset, device) = eval_context(&a.checkpoint)?;
            let out = out_dir(&a.out, "generate");
            let k = a.k.unwrap_or(config.k);
            write_manifest(&out, &format!("checkpoint = {}\ncount = {}\nk = {k}\nseed = {}\n", a.checkpoint.checkpoint, a.count, a.seed))?;
            let split = unseen_split(&dataset, a.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            for (&cat, pool) in &split.conditioning {
                let images = generate_images(&generator, &dataset, cat, pool, a.count, k, 16, &mut rng, &device)?;
                let name = dataset.category(cat).name.clone();
                let dir = out.join(&name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (i, im) in images.iter().enumerate() {
                    let path = dir.join(format!("{i:04}.png"));
                    eqgan::data::chw_to_rgb(im, dataset.image_size)
                        .save(&path)
                        .map_err(|source| Error::Image { path, source })?;
                }
                let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
                write_image_grid(&out.join(format!("grid_{name}.png")), &refs, dataset.image_size, 8)?;
            }
        }
        Command::Eval(a) => {
            let (generator, _, dataset, device) = eval_context(&a.checkpoint)?;
            let out = out_dir(&a.out, "eval");
            let options = EvalOptions {
                per_category: a.per_category,
                k: a.k,
                seed: a.seed,
                ..Default::default()
            };
            write_manifest(&out, &format!("checkpoint = {}\nper_category = {}\nk = {}\nseed = {}\n", a.checkpoint.checkpoint, a.per_category, a.k, a.seed))?;
            let split = unseen_split(&dataset, a.seed)?;
            let mut rows = SplitManifestRow::rows(&dataset, "conditioning", &split.conditioning);
            rows.extend(SplitManifestRow::rows(&dataset, "reference", &split.reference));
            write_split_manifest(&out.join("split.csv"), &rows)?;
            let eval = eval_generation(&generator, &dataset, &split, &options, &RandomConvEmbedder::default(), &device)?;
            write_evaluation(&eval, &dataset, &out)?;
            println!("FID {:.4}  LPIPS {:.4}", eval.report.fid, eval.report.lpips);
        }
        Command::Sweep(a) => {
            let out = out_dir(&a.out, "sweep");
            let entries: Vec<(usize, Option<PathBuf>)> = a
                .k_values
                .iter()
                .map(|&k| (k, a.checkpoints.iter().find(|(ck, _)| *ck == k).map(|(_, p)| p.clone())))
                .collect();
            let first = entries
                .iter()
                .find_map(|(_, p)| p.as_ref().filter(|p| p.exists()))
                .ok_or_else(|| Error::Usage("sweep needs at least one existing --checkpoint K=PATH".into()))?;
            let (_, config, _) = load_generator(first, &Device::flex())?;
            let dataset = config.load_dataset()?;
            let split = unseen_split(&dataset, a.seed)?;
            write_manifest(&out, &format!("k_values = {:?}\nper_category = {}\nseed = {}\n", a.k_values, a.per_category, a.seed))?;
            let options = EvalOptions {
                per_category: a.per_category,
                seed: a.seed,
                ..Default::default()
            };
            let rows = shot_sweep(&entries, &dataset, &split, &options, &RandomConvEmbedder::default(), &Device::flex())?;
            write_sweep(&rows, &out)?;
            for r in rows {
                println!("K={} FID={}", r.k, r.fid.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()));
            }
        }
        Command::Classify(a) => {
            let (generator, _, dataset, device) = eval_context(&a.checkpoint)?;
            let out = out_dir(&a.out, "classify");
            let mut options = match a.protocol.as_str() {
                "flower" => AugmentOptions::flower(),
                "hundred" => AugmentOptions::hundred_image(),
                other => return Err(Error::Usage(format!("unknown protocol '{other}' (flower or hundred)"))),
            };
            options.seed = a.seed;
            if let Some(e) = a.epochs {
                options.classifier.epochs = e;
            }
            if let Some(e) = a.pretrain_epochs {
                options.classifier.pretrain_epochs = e;
            }
            write_manifest(&out, &format!("{options:?}\n"))?;
            let result = augment_classification(&generator, &dataset, &options, &device.autodiff())?;
            let text = format!(
                "base_accuracy = {}\naugmented_accuracy = {}\nbase_val = {}\naugmented_val = {}\n",
                result.base_accuracy, result.augmented_accuracy, result.base_val, result.augmented_val
            );
            let path = out.join("accuracy.txt");
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            print!("{text}");
        }
        Command::DumpFeatures(a) => {
            let (generator, _, dataset, device) = eval_context(&a.checkpoint)?;
            let out = out_dir(&a.out, "features");
            write_manifest(&out, &format!("checkpoint = {}\n", a.checkpoint.checkpoint))?;
            let images: Vec<(String, Vec<f32>)> = if a.images.is_empty() {
                dataset
                    .partition(Partition::Unseen)
                    .iter()
                    .map(|&c| {
                        let cat = dataset.category(c);
                        (cat.name.clone(), cat.images[0].pixels.clone())
                    })
                    .collect()
            } else {
                a.images
                    .iter()
                    .map(|p| {
                        let img = image::open(p)
                            .map_err(|source| Error::Image { path: p.clone(), source })?
                            .to_rgb8();
                        let s = dataset.image_size as u32;
                        let img = image::imageops::resize(&img, s, s, image::imageops::FilterType::Triangle);
                        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        Ok((name, eqgan::data::rgb_to_chw(&img)))
                    })
                    .collect::<eqgan::Result<_>>()?
            };
            let written = dump_feature_maps(&generator, &images, &out, &device)?;
            println!("wrote {} maps to {}", written.len(), out.display());
        }
        Command::MakeSynthetic(a) => {
            let out = out_dir(&a.out, "synthetic");
            let dataset = SyntheticSpec::new(a.categories, a.images, a.size).with_seed(a.seed).build()?;
            write_dataset(&dataset, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
