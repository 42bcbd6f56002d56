use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::synthetic::SyntheticSpec;
use crate::data::{load_dataset, Dataset, DatasetSpec};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Flower,
    AnimalFaces,
    VggFace,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "flower" => Ok(Self::Flower),
            "animal_faces" => Ok(Self::AnimalFaces),
            "vggface" => Ok(Self::VggFace),
            _ => Err(Error::Config(format!(
                "unknown dataset '{s}' (expected synthetic, flower, animal_faces or vggface)"
            ))),
        }
    }
}

impl DatasetKind {
    fn name(&self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Flower => "flower",
            Self::AnimalFaces => "animal_faces",
            Self::VggFace => "vggface",
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub texture_skips: bool,
    pub structure_skips: bool,
    pub consistency_loss: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub branch_channels: usize,
    pub disc_channels: Vec<usize>,
    pub dataset: DatasetKind,
    pub data_root: PathBuf,
    pub synthetic_categories: usize,
    pub synthetic_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_size: 8,
            k: 3,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            texture_skips: true,
            structure_skips: true,
            consistency_loss: true,
            seed: 0,
            checkpoint_every: 5000,
            log_every: 100,
            image_size: 128,
            channels: vec![32, 64, 128, 256, 512],
            branch_channels: 64,
            disc_channels: vec![32, 64, 128, 256, 512],
            dataset: DatasetKind::Synthetic,
            data_root: PathBuf::new(),
            synthetic_categories: 10,
            synthetic_images: 20,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "k",
    "lr",
    "beta1",
    "beta2",
    "lambda_cls_g",
    "lambda_rec",
    "lambda_con",
    "lambda_cls_d",
    "texture_skips",
    "structure_skips",
    "consistency_loss",
    "seed",
    "checkpoint_every",
    "log_every",
    "image_size",
    "channels",
    "branch_channels",
    "disc_channels",
    "dataset",
    "data_root",
    "synthetic_categories",
    "synthetic_images",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale settings for the built-in synthetic dataset at 32x32.
    pub fn smoke() -> Self {
        Self {
            iterations: 2000,
            image_size: 32,
            channels: vec![16, 32, 64, 64, 64],
            branch_channels: 32,
            disc_channels: vec![16, 32, 64, 64, 64],
            checkpoint_every: 1000,
            ..Self::default()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "lambda_cls_g" => self.weights.cls_g = parse_value(key, value)?,
            "lambda_rec" => self.weights.rec = parse_value(key, value)?,
            "lambda_con" => self.weights.con = parse_value(key, value)?,
            "lambda_cls_d" => self.weights.cls_d = parse_value(key, value)?,
            "texture_skips" => self.texture_skips = parse_value(key, value)?,
            "structure_skips" => self.structure_skips = parse_value(key, value)?,
            "consistency_loss" => self.consistency_loss = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "branch_channels" => self.branch_channels = parse_value(key, value)?,
            "disc_channels" => self.disc_channels = parse_list(key, value)?,
            "dataset" => self.dataset = value.parse()?,
            "data_root" => self.data_root = PathBuf::from(value),
            "synthetic_categories" => self.synthetic_categories = parse_value(key, value)?,
            "synthetic_images" => self.synthetic_images = parse_value(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}'; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses flat `key = value` text over the defaults. Blank lines and `#` comments are
    /// ignored; a repeated key keeps its last value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1))
            })?;
            config.set(key.trim(), value)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (if given), then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("iterations", self.iterations.to_string());
        line("batch_size", self.batch_size.to_string());
        line("k", self.k.to_string());
        line("lr", self.lr.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("lambda_cls_g", self.weights.cls_g.to_string());
        line("lambda_rec", self.weights.rec.to_string());
        line("lambda_con", self.weights.con.to_string());
        line("lambda_cls_d", self.weights.cls_d.to_string());
        line("texture_skips", self.texture_skips.to_string());
        line("structure_skips", self.structure_skips.to_string());
        line("consistency_loss", self.consistency_loss.to_string());
        line("seed", self.seed.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        line("log_every", self.log_every.to_string());
        line("image_size", self.image_size.to_string());
        line("channels", join(&self.channels));
        line("branch_channels", self.branch_channels.to_string());
        line("disc_channels", join(&self.disc_channels));
        line("dataset", self.dataset.name().to_string());
        line("data_root", self.data_root.display().to_string());
        line("synthetic_categories", self.synthetic_categories.to_string());
        line("synthetic_images", self.synthetic_images.to_string());
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.serialize()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.generator_config().validate()?;
        if self.disc_channels.len() != self.channels.len() || self.disc_channels.contains(&0) {
            return Err(Error::Config(format!(
                "disc_channels needs {} positive entries",
                self.channels.len()
            )));
        }
        if self.dataset == DatasetKind::Synthetic
            && (self.synthetic_categories < 2 || self.synthetic_images < self.k)
        {
            return Err(Error::Config(
                "synthetic dataset needs at least 2 categories and k images per category".into(),
            ));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            channels: self.channels.clone(),
            branch_channels: self.branch_channels,
            image_size: self.image_size,
            texture_skips: self.texture_skips,
            structure_skips: self.structure_skips,
            seed: self.seed,
        }
    }

    pub fn discriminator_config(&self, num_classes: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: self.disc_channels.clone(),
            image_size: self.image_size,
            num_classes,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec::new(self.synthetic_categories, self.synthetic_images, self.image_size)
            .with_seed(self.seed)
    }

    pub fn dataset_spec(&self) -> Option<DatasetSpec> {
        let spec = match self.dataset {
            DatasetKind::Synthetic => return None,
            DatasetKind::Flower => DatasetSpec::flower(&self.data_root),
            DatasetKind::AnimalFaces => DatasetSpec::animal_faces(&self.data_root),
            DatasetKind::VggFace => DatasetSpec::vggface(&self.data_root),
        };
        Some(DatasetSpec {
            image_size: self.image_size,
            ..spec
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset_spec() {
            None => self.synthetic_spec().build(),
            Some(spec) => load_dataset(&spec, self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.iterations, c.batch_size, c.k, c.lr), (100_000, 8, 3, 1e-4));
        assert_eq!(c.weights.rec, 0.5);
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::load(None, &[("lambda_rec".into(), "0.7".into())]).unwrap();
        assert_eq!(c.weights.rec, 0.7);
        let c = RunConfig::parse("k = 5\n# comment\nlr=2e-4  # trailing").unwrap();
        assert_eq!((c.k, c.lr), (5, 2e-4));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse("batchsize = 4").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("batch_size") && msg.contains("lambda_rec"), "{msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("k = 1").is_err());
        assert!(RunConfig::parse("image_size = 100").is_err());
        assert!(RunConfig::parse("lambda_con = -1").is_err());
        assert!(RunConfig::parse("channels = 1,2,3").is_err());
        assert!(RunConfig::parse("texture_skips = maybe").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn smoke_config_is_valid() {
        RunConfig::smoke().validate().unwrap();
    }

    proptest! {
        #[test]
        fn serialize_round_trip(
            iterations in 1usize..1_000_000,
            k in 2usize..10,
            lr in 0.0f64..1.0,
            rec in 0.0f64..10.0,
            flags in any::<[bool; 3]>(),
            seed in any::<u64>(),
        ) {
            let mut c = RunConfig::smoke();
            c.iterations = iterations;
            c.k = k;
            c.lr = lr;
            c.weights.rec = rec;
            c.texture_skips = flags[0];
            c.structure_skips = flags[1];
            c.consistency_loss = flags[2];
            c.seed = seed;
            c.synthetic_images = 20;
            let back = RunConfig::parse(&c.serialize()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
