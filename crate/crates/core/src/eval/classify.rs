use burn::nn::conv::Conv2d;
use burn::nn::{BatchNorm, Linear};
use burn::optim::{AdamConfig, GradientsParams};
use burn::prelude::*;
use burn::tensor::activation::relu;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generate_images;
use crate::data::{classification_splits, Dataset, Partition, CHANNELS};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::layers::{to_vec, ParamInit};
use crate::losses::classification_loss;

#[derive(Module, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, init: &mut ParamInit) -> Self {
        Self {
            conv1: init.conv2d([cin, cout], 3, stride, 1, false),
            bn1: init.batch_norm(cout),
            conv2: init.conv2d([cout, cout], 3, 1, 1, false),
            bn2: init.batch_norm(cout),
            shortcut: (stride != 1 || cin != cout).then(|| init.conv2d([cin, cout], 1, stride, 0, false)),
        }
    }

    fn forward(&self, x: Tensor<4>) -> Tensor<4> {
        let y = relu(self.bn1.forward(self.conv1.forward(x.clone())));
        let y = self.bn2.forward(self.conv2.forward(y));
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x),
            None => x,
        };
        relu(y + skip)
    }
}

/// Small residual classifier: a stem, `blocks_per_stage` basic blocks per width (stride 2
/// between stages), global average pooling and a linear head.
#[derive(Module, Debug)]
pub struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

impl ResNet {
    pub fn forward(&self, x: Tensor<4>) -> Tensor<2> {
        let mut x = relu(self.stem_bn.forward(self.stem.forward(x)));
        for block in &self.blocks {
            x = block.forward(x);
        }
        let [n, c, _, _] = x.dims();
        self.head.forward(x.mean_dim(3).mean_dim(2).reshape([n, c]))
    }

    fn with_head(self, classes: usize, init: &mut ParamInit) -> Self {
        let width = self.head.weight.dims()[0];
        Self {
            head: init.linear(width, classes),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs of training on the seen categories before the unseen head is fitted.
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            pretrain_epochs: 0,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn init(&self, classes: usize, init: &mut ParamInit) -> Result<ResNet> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::Config("classifier needs positive widths and blocks".into()));
        }
        if classes == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier needs classes, epochs and a batch size".into()));
        }
        let mut blocks = Vec::new();
        let mut cin = self.widths[0];
        for (stage, &w) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, w, stride, init));
                cin = w;
            }
        }
        Ok(ResNet {
            stem: init.conv2d([CHANNELS, self.widths[0]], 3, 1, 1, false),
            stem_bn: init.batch_norm(self.widths[0]),
            blocks,
            head: init.linear(cin, classes),
        })
    }
}

type Sample<'a> = (&'a [f32], usize);

fn stack(samples: &[Sample], size: usize, device: &Device) -> Tensor<4> {
    let data: Vec<f32> = samples.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    Tensor::from_data(TensorData::new(data, [samples.len(), CHANNELS, size, size]), device)
}

/// Top-1 accuracy with batch norm on running statistics.
pub fn accuracy(model: &ResNet, samples: &[Sample], size: usize) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let model = model.valid();
    let device = Device::flex();
    let mut correct = 0;
    for chunk in samples.chunks(64) {
        let logits = model.forward(stack(chunk, size, &device));
        let classes = logits.dims()[1];
        let v = to_vec(&logits);
        for (row, (_, label)) in v.chunks(classes).zip(chunk) {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == *label);
        }
    }
    correct as f64 / samples.len() as f64
}

/// Trains with Adam; returns the epoch with the best validation accuracy (the last epoch when
/// there is no validation set) and that accuracy.
fn fit(
    mut model: ResNet,
    config: &ClassifierConfig,
    epochs: usize,
    train: &[Sample],
    val: &[Sample],
    size: usize,
    device: &Device,
) -> Result<(ResNet, f64)> {
    let mut optim = AdamConfig::new().init();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1A5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    // BatchNorm running stats are shared between clones, so the best epoch is kept as a record.
    let mut best: Option<(burn::store::ModuleRecord, f64)> = None;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.1).collect();
            let loss = classification_loss(model.forward(stack(&batch, size, device)), &labels)?;
            let grads = GradientsParams::from_grads(loss.backward(), &model);
            model = optim.step(config.lr, model, grads);
        }
        if !val.is_empty() {
            let acc = accuracy(&model, val, size);
            if best.as_ref().is_none_or(|(_, b)| acc > *b) {
                best = Some((model.clone().into_record(), acc));
            }
        }
    }
    Ok(match best {
        Some((record, acc)) => (model.load_record(record), acc),
        None => (model, f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOptions {
    /// Train/val/test images per unseen category.
    pub splits: [usize; 3],
    /// Generated images added per category.
    pub per_category_aug: usize,
    pub k: usize,
    pub seed: u64,
    pub tasks_per_forward: usize,
    pub classifier: ClassifierConfig,
}

impl AugmentOptions {
    pub fn flower() -> Self {
        Self {
            splits: [10, 15, 15],
            per_category_aug: 30,
            k: 3,
            seed: 0,
            tasks_per_forward: 16,
            classifier: ClassifierConfig::default(),
        }
    }

    /// Animal Faces and VGGFace.
    pub fn hundred_image() -> Self {
        Self {
            splits: [30, 35, 35],
            per_category_aug: 50,
            ..Self::flower()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentResult {
    pub base_accuracy: f64,
    pub augmented_accuracy: f64,
    pub base_val: f64,
    pub augmented_val: f64,
}

/// Trains the classifier on the unseen categories' training images ("Base"), then again with
/// generated images added, selecting each on the validation images and scoring on the test
/// images.
pub fn augment_classification(
    generator: &Generator,
    dataset: &Dataset,
    options: &AugmentOptions,
    device: &Device,
) -> Result<AugmentResult> {
    let size = dataset.image_size;
    if generator.image_size() != size {
        return Err(Error::Config(format!(
            "generator makes {}px images but the dataset has {size}px",
            generator.image_size()
        )));
    }
    if options.k > options.splits[0] {
        return Err(Error::Validation(format!(
            "cannot condition {}-shot on {} training images",
            options.k, options.splits[0]
        )));
    }
    let splits = classification_splits(dataset, options.splits, options.seed)?;
    let unseen = dataset.partition(Partition::Unseen);
    let collect = |sets: &std::collections::BTreeMap<usize, Vec<usize>>| -> Vec<Sample> {
        unseen
            .iter()
            .enumerate()
            .flat_map(|(label, cat)| {
                sets[cat]
                    .iter()
                    .map(move |&i| (dataset.category(*cat).images[i].pixels.as_slice(), label))
            })
            .collect()
    };
    let (train, val, test) = (collect(&splits.train), collect(&splits.val), collect(&splits.test));

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(17));
    let mut generated: Vec<(Vec<f32>, usize)> = Vec::new();
    for (label, &cat) in unseen.iter().enumerate() {
        let images = generate_images(
            generator,
            dataset,
            cat,
            &splits.train[&cat],
            options.per_category_aug,
            options.k,
            options.tasks_per_forward,
            &mut rng,
            &generator_device(generator),
        )?;
        generated.extend(images.into_iter().map(|im| (im, label)));
    }
    let mut augmented = train.clone();
    augmented.extend(generated.iter().map(|(im, l)| (im.as_slice(), *l)));

    let train_device = device.clone();
    let cfg = ClassifierConfig {
        seed: options.seed ^ options.classifier.seed,
        ..options.classifier.clone()
    };
    let fresh = || -> Result<ResNet> {
        let mut init = ParamInit::new(cfg.seed, &train_device);
        if cfg.pretrain_epochs == 0 {
            return cfg.init(unseen.len(), &mut init);
        }
        let seen = dataset.partition(Partition::Seen);
        let seen_samples: Vec<Sample> = seen
            .iter()
            .enumerate()
            .flat_map(|(label, &cat)| {
                dataset
                    .category(cat)
                    .images
                    .iter()
                    .map(move |im| (im.pixels.as_slice(), label))
            })
            .collect();
        let model = cfg.init(seen.len(), &mut init)?;
        let (model, _) = fit(model, &cfg, cfg.pretrain_epochs, &seen_samples, &[], size, &train_device)?;
        Ok(model.with_head(unseen.len(), &mut init))
    };
    let (base, base_val) = fit(fresh()?, &cfg, cfg.epochs, &train, &val, size, &train_device)?;
    let (aug, augmented_val) = fit(fresh()?, &cfg, cfg.epochs, &augmented, &val, size, &train_device)?;
    Ok(AugmentResult {
        base_accuracy: accuracy(&base, &test, size),
        augmented_accuracy: accuracy(&aug, &test, size),
        base_val,
        augmented_val,
    })
}

fn generator_device(generator: &Generator) -> Device {
    generator
        .devices()
        .into_iter()
        .next()
        .unwrap_or_else(Device::flex)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet_shapes() {
        let device = Device::flex();
        let cfg = ClassifierConfig {
            widths: vec![4, 8],
            ..Default::default()
        };
        let model = cfg.init(5, &mut ParamInit::new(0, &device)).unwrap();
        let logits = model.forward(Tensor::zeros([3, 3, 16, 16], &device));
        assert_eq!(logits.dims(), [3, 5]);
        assert!(ClassifierConfig { widths: vec![], ..cfg }.init(5, &mut ParamInit::new(0, &device)).is_err());
    }

    #[test]
    fn learns_separable_colors() {
        // Two classes: red-ish vs blue-ish flat images.
        let device = Device::flex().autodiff();
        let size = 8;
        let images: Vec<(Vec<f32>, usize)> = (0..24)
            .map(|i| {
                let label = i % 2;
                let shade = (i as f32 / 24.0) * 0.4;
                let rgb = if label == 0 { [0.8 - shade, -0.6, -0.6] } else { [-0.6, -0.6, 0.8 - shade] };
                let px = rgb.iter().flat_map(|&c| std::iter::repeat_n(c, size * size)).collect();
                (px, label)
            })
            .collect();
        let samples: Vec<Sample> = images.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
        let cfg = ClassifierConfig {
            widths: vec![4, 8],
            epochs: 15,
            batch_size: 8,
            lr: 3e-3,
            ..Default::default()
        };
        let model = cfg.init(2, &mut ParamInit::new(1, &device)).unwrap();
        let (model, val) = fit(model, &cfg, cfg.epochs, &samples, &samples, size, &device).unwrap();
        assert_eq!(val, 1.0);
        assert_eq!(accuracy(&model, &samples, size), 1.0);
    }
}
