//! Alternating adversarial training with checkpoints and a CSV loss log.

mod checkpoint;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use burn::module::Module;
use burn::optim::{AdamConfig, GradientsParams, ModuleOptimizer};
use burn::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    checkpoint_name, config_hash, read_manifest, resolve_checkpoint, CheckpointManifest,
    CONFIG_FILE, DISCRIMINATOR_FILE, D_OPTIM_FILE, GENERATOR_FILE, G_OPTIM_FILE, LAST_POINTER,
    MANIFEST_FILE,
};
pub use config::{DatasetKind, RunConfig, CONFIG_KEYS};

use crate::data::{sample_task, Dataset, ImageBatch, Partition, CHANNELS};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::fusion::FusionPlan;
use crate::generator::{GenerateOptions, Generator};
use crate::layers::{gradient_norm, param_hash, scalar, sync_running_stats};
use crate::losses::{
    classification_loss, hinge_d_loss, hinge_g_loss, l1_mean, replay_target, total_d_loss,
    total_g_loss, DiscriminatorLosses, GeneratorLosses,
};

/// Learning rate at `iteration`: `base` for the first half of the run, then linear decay to 0
/// at `iterations`.
pub fn lr_at(iteration: usize, iterations: usize, base: f64) -> Result<f64> {
    if iteration > iterations {
        return Err(Error::Validation(format!(
            "iteration {iteration} outside the {iterations}-step schedule"
        )));
    }
    let half = iterations as f64 / 2.0;
    let t = iteration as f64;
    if t <= half {
        Ok(base)
    } else {
        Ok(base * ((iterations as f64 - t) / (iterations as f64 - half)))
    }
}

/// Loss values and gradient norms of one step. `g_con` is `None` when the consistency term
/// is ablated.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub iteration: usize,
    pub lr: f64,
    pub d_total: f32,
    pub d_adv: f32,
    pub d_cls: f32,
    pub g_total: f32,
    pub g_adv: f32,
    pub g_cls: f32,
    pub g_rec: f32,
    pub g_con: Option<f32>,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
}

pub const LOG_HEADER: [&str; 12] = [
    "iteration",
    "lr",
    "d_total",
    "d_adv",
    "d_cls",
    "g_total",
    "g_adv",
    "g_cls",
    "g_rec",
    "g_con",
    "d_grad_norm",
    "g_grad_norm",
];

impl StepLosses {
    fn record(&self) -> [String; 12] {
        [
            self.iteration.to_string(),
            self.lr.to_string(),
            self.d_total.to_string(),
            self.d_adv.to_string(),
            self.d_cls.to_string(),
            self.g_total.to_string(),
            self.g_adv.to_string(),
            self.g_cls.to_string(),
            self.g_rec.to_string(),
            self.g_con.map(|v| v.to_string()).unwrap_or_default(),
            self.d_grad_norm.to_string(),
            self.g_grad_norm.to_string(),
        ]
    }
}

/// Mean of `values[i + 1 - window ..= i]` for every `i >= window - 1`.
pub fn moving_average(values: &[f32], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() + 1 - window);
    let mut sum: f64 = values[..window].iter().map(|&v| v as f64).sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] as f64 - values[i - window] as f64;
        out.push(sum / window as f64);
    }
    out
}

fn adam(config: &RunConfig) -> ModuleOptimizer {
    AdamConfig::new()
        .with_beta_1(config.beta1 as f32)
        .with_beta_2(config.beta2 as f32)
        .init()
}

fn record_error(what: &str, path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{what} {}: {e}", path.display()))
}

/// Loads a checkpoint's generator onto `device` (plain devices run batch norm on its
/// running statistics).
pub fn load_generator(checkpoint: &Path, device: &Device) -> Result<(Generator, RunConfig, CheckpointManifest)> {
    let dir = resolve_checkpoint(checkpoint)?;
    let (manifest, config) = read_manifest(&dir)?;
    let path = dir.join(GENERATOR_FILE);
    let generator = config
        .generator_config()
        .init(device)?
        .try_load_file(&path)
        .map_err(|e| record_error("cannot load", &path, e))?;
    Ok((generator, config, manifest))
}

/// Training state: both networks, their optimizers, the task RNG and the loss history.
pub struct Trainer {
    config: RunConfig,
    dataset: Dataset,
    device: Device,
    generator: Generator,
    discriminator: Discriminator,
    g_optim: ModuleOptimizer,
    d_optim: ModuleOptimizer,
    rng: ChaCha8Rng,
    iteration: usize,
    history: Vec<StepLosses>,
}

impl Trainer {
    /// Fresh state on `device`, which must support autodiff.
    pub fn new(config: RunConfig, dataset: Dataset, device: &Device) -> Result<Self> {
        config.validate()?;
        if dataset.image_size != config.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}px but the run expects {}px",
                dataset.image_size, config.image_size
            )));
        }
        let classes = dataset.partition(Partition::Seen).len();
        let generator = config.generator_config().init(device)?;
        let discriminator = config.discriminator_config(classes).init(device)?;
        if !config.texture_skips && !config.structure_skips && config.consistency_loss {
            log::warn!(
                "all equalized skips disabled with the consistency loss on: F_eq is a projection of zeros"
            );
        }
        Ok(Self {
            g_optim: adam(&config),
            d_optim: adam(&config),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            dataset,
            device: device.clone(),
            generator,
            discriminator,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Restores the state saved in `checkpoint` (a checkpoint or run directory).
    pub fn resume(checkpoint: &Path, dataset: Dataset, device: &Device) -> Result<Self> {
        let dir = resolve_checkpoint(checkpoint)?;
        let (manifest, config) = read_manifest(&dir)?;
        let mut t = Self::new(config, dataset, device)?;
        let load = |name: &str| dir.join(name);
        let p = load(GENERATOR_FILE);
        t.generator = t.generator.try_load_file(&p).map_err(|e| record_error("cannot load", &p, e))?;
        let p = load(DISCRIMINATOR_FILE);
        t.discriminator = t.discriminator.try_load_file(&p).map_err(|e| record_error("cannot load", &p, e))?;
        let p = load(G_OPTIM_FILE);
        t.g_optim = t.g_optim.load(&p).map_err(|e| record_error("cannot load", &p, e))?;
        let p = load(D_OPTIM_FILE);
        t.d_optim = t.d_optim.load(&p).map_err(|e| record_error("cannot load", &p, e))?;
        t.rng = manifest.rng();
        t.iteration = manifest.iteration;
        if param_hash(&t.generator) != manifest.generator_hash
            || param_hash(&t.discriminator) != manifest.discriminator_hash
        {
            return Err(Error::Checkpoint(format!(
                "weights in {} do not match the manifest hashes",
                dir.display()
            )));
        }
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[StepLosses] {
        &self.history
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Hash over both networks' parameters.
    pub fn param_hash(&self) -> String {
        format!("{}{}", param_hash(&self.generator), param_hash(&self.discriminator))
    }

    fn sample_tasks(&mut self) -> Result<(Vec<ImageBatch>, Vec<FusionPlan>)> {
        let mut tasks = Vec::with_capacity(self.config.batch_size);
        let mut plans = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            tasks.push(sample_task(&self.dataset, Partition::Seen, self.config.k, &mut self.rng)?);
            plans.push(FusionPlan::sample(self.config.k, &mut self.rng)?);
        }
        Ok((tasks, plans))
    }

    /// One discriminator update on real task images and detached fakes, then one generator
    /// update against the updated discriminator.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let cfg = self.config.clone();
        let lr = lr_at(self.iteration, cfg.iterations, cfg.lr)?;
        let (tasks, plans) = self.sample_tasks()?;
        let s = cfg.image_size;
        let k = cfg.k;
        let b = tasks.len();

        let host: Vec<f32> = tasks.iter().flat_map(|t| t.images.iter().copied()).collect();
        let images = Tensor::<4>::from_data(TensorData::new(host, [b * k, CHANNELS, s, s]), &self.device);
        let task_labels = tasks
            .iter()
            .map(|t| {
                self.dataset
                    .seen_index(t.label)
                    .ok_or_else(|| Error::Sampling(format!("category {} is not seen", t.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        let real_labels: Vec<usize> = task_labels.iter().flat_map(|&l| std::iter::repeat_n(l, k)).collect();

        let out = self
            .generator
            .generate_tasks(images.clone(), &plans, GenerateOptions::default())?;

        // Discriminator update.
        let real = self.discriminator.discriminate(images)?;
        let fake = self.discriminator.discriminate(out.images.clone().detach())?;
        let d_parts = DiscriminatorLosses {
            adv: hinge_d_loss(real.realness, fake.realness),
            cls: classification_loss(real.class_logits, &real_labels)?,
        };
        let d_total = total_d_loss(&d_parts, &cfg.weights)?;
        let (d_total_v, d_adv_v, d_cls_v) = (scalar(&d_total), scalar(&d_parts.adv), scalar(&d_parts.cls));
        if !(d_total_v.is_finite()) {
            return Err(self.non_finite(&format!(
                "L_D = {d_total_v} (adv {d_adv_v}, cls {d_cls_v})"
            )));
        }
        let mut grads = d_total.backward();
        let d_grads = GradientsParams::from_module(&mut grads, &self.discriminator);
        let leaked = GradientsParams::from_module(&mut grads, &self.generator);
        if !leaked.is_empty() {
            return Err(Error::Validation(format!(
                "discriminator loss produced {} generator gradients",
                leaked.len()
            )));
        }
        let d_grad_norm = gradient_norm(&self.discriminator, &d_grads);
        self.discriminator = self.d_optim.step(lr, self.discriminator.clone(), d_grads);

        // Generator update.
        let fake = self.discriminator.discriminate(out.images.clone())?;
        let mut targets = Vec::with_capacity(b * CHANNELS * s * s);
        for (task, plan) in tasks.iter().zip(&out.plans) {
            targets.extend(replay_target(&task.images, s, plan)?);
        }
        let targets = Tensor::<4>::from_data(TensorData::new(targets, [b, CHANNELS, s, s]), &self.device);
        let g_parts = GeneratorLosses {
            adv: hinge_g_loss(fake.realness),
            cls: classification_loss(fake.class_logits, &task_labels)?,
            rec: l1_mean(out.images.clone(), targets)?,
            con: if cfg.consistency_loss {
                Some(l1_mean(out.equalized.f_eq.clone(), out.decoder_intermediate.clone())?)
            } else {
                None
            },
        };
        let g_total = total_g_loss(&g_parts, &cfg.weights)?;
        let g_total_v = scalar(&g_total);
        let (g_adv_v, g_cls_v, g_rec_v) = (scalar(&g_parts.adv), scalar(&g_parts.cls), scalar(&g_parts.rec));
        let g_con_v = g_parts.con.as_ref().map(scalar);
        if !g_total_v.is_finite() {
            return Err(self.non_finite(&format!(
                "L_G = {g_total_v} (adv {g_adv_v}, cls {g_cls_v}, rec {g_rec_v}, con {g_con_v:?}); \
                 D grad norm {d_grad_norm}"
            )));
        }
        let mut grads = g_total.backward();
        let g_grads = GradientsParams::from_module(&mut grads, &self.generator);
        let g_grad_norm = gradient_norm(&self.generator, &g_grads);
        self.generator = self.g_optim.step(lr, self.generator.clone(), g_grads);

        let losses = StepLosses {
            iteration: self.iteration,
            lr,
            d_total: d_total_v,
            d_adv: d_adv_v,
            d_cls: d_cls_v,
            g_total: g_total_v,
            g_adv: g_adv_v,
            g_cls: g_cls_v,
            g_rec: g_rec_v,
            g_con: g_con_v,
            d_grad_norm,
            g_grad_norm,
        };
        self.iteration += 1;
        self.history.push(losses.clone());
        Ok(losses)
    }

    fn non_finite(&self, detail: &str) -> Error {
        let last = self
            .history
            .last()
            .map(|l| format!("; previous grad norms D {} G {}", l.d_grad_norm, l.g_grad_norm))
            .unwrap_or_default();
        Error::NonFinite(format!("iteration {}: {detail}{last}", self.iteration))
    }

    /// Writes a checkpoint of the current state under `root` and points `LAST` at it.
    pub fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        sync_running_stats(&self.generator);
        let (rng_seed, rng_stream, rng_word_pos) = CheckpointManifest::capture_rng(&self.rng);
        let manifest = CheckpointManifest {
            iteration: self.iteration,
            config_hash: config_hash(&self.config),
            rng_seed,
            rng_stream,
            rng_word_pos,
            generator_hash: param_hash(&self.generator),
            discriminator_hash: param_hash(&self.discriminator),
            code_version: crate::CODE_VERSION.to_string(),
        };
        checkpoint::write_atomic(root, &checkpoint_name(self.iteration), |dir| {
            let p = dir.join(GENERATOR_FILE);
            self.generator.clone().save_file(&p).map_err(|e| record_error("cannot write", &p, e))?;
            let p = dir.join(DISCRIMINATOR_FILE);
            self.discriminator.clone().save_file(&p).map_err(|e| record_error("cannot write", &p, e))?;
            let p = dir.join(G_OPTIM_FILE);
            self.g_optim.save(&p).map_err(|e| record_error("cannot write", &p, e))?;
            let p = dir.join(D_OPTIM_FILE);
            self.d_optim.save(&p).map_err(|e| record_error("cannot write", &p, e))?;
            let p = dir.join(CONFIG_FILE);
            fs::write(&p, self.config.serialize()).map_err(|e| Error::io(&p, e))?;
            let p = dir.join(MANIFEST_FILE);
            fs::write(&p, manifest.to_text()).map_err(|e| Error::io(&p, e))
        })
    }

    /// Trains until `stop_at` (at most the configured iterations), appending every
    /// `log_every`-th step to `out_dir/losses.csv` and checkpointing every `checkpoint_every`
    /// steps and at the end.
    pub fn run(&mut self, out_dir: &Path, stop_at: Option<usize>) -> Result<PathBuf> {
        let end = stop_at.unwrap_or(self.config.iterations).min(self.config.iterations);
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("losses.csv");
        let fresh = !log_path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            log.write_record(LOG_HEADER)?;
        }
        let ckpt_root = out_dir.join("checkpoints");
        let mut last = None;
        while self.iteration < end {
            let losses = self.train_step()?;
            let done = self.iteration;
            if done % self.config.log_every == 0 {
                log.write_record(losses.record())?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                log::info!(
                    "step {}: L_D {:.4} L_G {:.4} rec {:.4}",
                    losses.iteration,
                    losses.d_total,
                    losses.g_total,
                    losses.g_rec
                );
            }
            if done % self.config.checkpoint_every == 0 {
                last = Some(self.save_checkpoint(&ckpt_root)?);
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        match last {
            Some(p) if p.ends_with(checkpoint_name(self.iteration)) => Ok(p),
            _ => self.save_checkpoint(&ckpt_root),
        }
    }
}

/// Trains a fresh run described by `config` into `out_dir`.
pub fn train(config: RunConfig, out_dir: &Path, device: &Device) -> Result<(PathBuf, Vec<StepLosses>)> {
    let dataset = config.load_dataset()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = out_dir.join("run_config.cfg");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(config.serialize().as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    let mut trainer = Trainer::new(config, dataset, device)?;
    let ckpt = trainer.run(out_dir, None)?;
    Ok((ckpt, trainer.history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let lr = |i| lr_at(i, 100_000, 1e-4).unwrap();
        assert_eq!(lr(0), 1e-4);
        assert_eq!(lr(50_000), 1e-4);
        assert_eq!(lr(75_000), 5e-5);
        assert_eq!(lr(100_000), 0.0);
        assert!(lr_at(100_001, 100_000, 1e-4).is_err());
    }

    #[test]
    fn schedule_is_monotone_and_continuous() {
        assert!((lr_at(501, 1000, 1.0).unwrap() - lr_at(500, 1000, 1.0).unwrap()).abs() < 3e-3);
        for w in (0..=1000).collect::<Vec<_>>().windows(2) {
            assert!(lr_at(w[1], 1000, 1.0).unwrap() <= lr_at(w[0], 1000, 1.0).unwrap());
        }
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
