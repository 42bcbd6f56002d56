//! Mutual encoder-decoder generator.
//!
//! Five stride-2 encoder blocks, the fusion module, and five upsampling decoder blocks. Decoder
//! block `i + 1` reads the previous decoder output concatenated with the base image's encoding
//! at the matching level plus the equalized features for that level. The deepest decoder input
//! is the locally fused level-5 feature (plus its equalized term).

use burn::nn::conv::Conv2d;
use burn::nn::BatchNorm;
use burn::prelude::*;

use crate::data::{ImageBatch, CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{
    local_fuse, EqualizedFeatures, FeatureEqualizationFusion, FeaturePyramid, FusionPlan,
    SemanticFusion, PYRAMID_LEVELS,
};
use crate::layers::{leaky_relu, resize_nearest, ParamInit};

/// Each encoder block halves the resolution, so images must divide by 2^5.
pub const SIZE_MULTIPLE: usize = 1 << PYRAMID_LEVELS;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub channels: Vec<usize>,
    pub branch_channels: usize,
    pub image_size: usize,
    pub texture_skips: bool,
    pub structure_skips: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            branch_channels: 64,
            image_size: 128,
            texture_skips: true,
            structure_skips: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != PYRAMID_LEVELS {
            return Err(Error::Config(format!(
                "channel plan needs {PYRAMID_LEVELS} entries, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.branch_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn init(&self, device: &Device) -> Result<Generator> {
        self.validate()?;
        let mut init = ParamInit::new(self.seed, device);
        let c = &self.channels;
        let mut encoder = Vec::new();
        let mut cin = CHANNELS;
        for &cout in c {
            encoder.push(ConvBlock {
                conv: init.conv2d([cin, cout], 3, 2, 1, false),
                norm: init.batch_norm(cout),
            });
            cin = cout;
        }
        let fusion = FeatureEqualizationFusion::new(
            c,
            self.branch_channels,
            self.texture_skips,
            self.structure_skips,
            &mut init,
        );
        // H_1 reads the bottleneck; later blocks read [previous output, skip].
        let mut decoder = Vec::new();
        for level in (0..PYRAMID_LEVELS - 1).rev() {
            let cin = if level == PYRAMID_LEVELS - 2 {
                c[PYRAMID_LEVELS - 1]
            } else {
                2 * c[level + 1]
            };
            decoder.push(ConvBlock {
                conv: init.conv2d([cin, c[level]], 3, 1, 1, false),
                norm: init.batch_norm(c[level]),
            });
        }
        let output = init.conv2d([2 * c[0], CHANNELS], 3, 1, 1, true);
        Ok(Generator {
            encoder,
            fusion,
            decoder,
            output,
            image_size: self.image_size,
        })
    }
}

#[derive(Module, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: BatchNorm,
}

impl ConvBlock {
    fn forward(&self, x: Tensor<4>) -> Tensor<4> {
        leaky_relu(self.norm.forward(self.conv.forward(x)))
    }
}

/// Diagnostic switches for probing the skip wiring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Replace the base image's encoder features in every skip with zeros.
    pub zero_base_skips: bool,
    /// Replace every equalized per-level term with zeros.
    pub zero_eq_blocks: bool,
}

/// One generated image per task.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Tensor<3>,
    pub fusion_plan: FusionPlan,
    pub equalized: EqualizedFeatures,
    pub decoder_intermediate: Option<Tensor<3>>,
}

impl GeneratorOutput {
    /// Third decoder block output (F_H3), aligned with `equalized.f_eq`.
    pub fn decoder_intermediate(&self) -> Result<Tensor<3>> {
        self.decoder_intermediate
            .clone()
            .ok_or_else(|| Error::Usage("no decoder intermediate: run a forward pass first".into()))
    }
}

/// Output of a forward pass over B tasks.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `B x 3 x H x W` in `[-1, 1]`.
    pub images: Tensor<4>,
    /// `B x c_eq x h x w`.
    pub decoder_intermediate: Tensor<4>,
    pub equalized: EqualizedFeatures,
    /// Bottleneck plans with their level-5 matches, one per task.
    pub plans: Vec<FusionPlan>,
    pub branch_fusion: Vec<SemanticFusion>,
}

impl BatchOutput {
    pub fn task(&self, t: usize) -> GeneratorOutput {
        let pick = |x: &Tensor<4>| x.clone().narrow(0, t, 1).squeeze_dim::<3>(0);
        GeneratorOutput {
            image: pick(&self.images),
            fusion_plan: self.plans[t].clone(),
            equalized: EqualizedFeatures {
                f_eq: self.equalized.f_eq.clone().narrow(0, t, 1),
                per_level: self
                    .equalized
                    .per_level
                    .iter()
                    .map(|l| l.clone().narrow(0, t, 1))
                    .collect(),
            },
            decoder_intermediate: Some(pick(&self.decoder_intermediate)),
        }
    }
}

#[derive(Module, Debug)]
pub struct Generator {
    encoder: Vec<ConvBlock>,
    fusion: FeatureEqualizationFusion,
    decoder: Vec<ConvBlock>,
    output: Conv2d,
    image_size: usize,
}

impl Generator {
    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn fusion(&self) -> &FeatureEqualizationFusion {
        &self.fusion
    }

    /// Encoder pyramid for an `N x 3 x S x S` stack.
    pub fn encode(&self, images: Tensor<4>) -> Result<FeaturePyramid> {
        let [_, c, h, w] = images.dims();
        if c != CHANNELS || h != self.image_size || w != self.image_size {
            return Err(Error::Config(format!(
                "generator expects {CHANNELS}x{s}x{s} images, got {c}x{h}x{w}",
                s = self.image_size
            )));
        }
        let mut x = images;
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for block in &self.encoder {
            x = block.forward(x);
            levels.push(x.clone());
        }
        FeaturePyramid::new(levels)
    }

    pub fn encode_batch(&self, batch: &ImageBatch, device: &Device) -> Result<FeaturePyramid> {
        batch.validate()?;
        self.encode(batch.to_tensor(device))
    }

    /// Generates one image from a K-shot task.
    pub fn generate(&self, batch: &ImageBatch, plan: &FusionPlan, device: &Device) -> Result<GeneratorOutput> {
        batch.validate()?;
        let out = self.generate_tasks(batch.to_tensor(device), std::slice::from_ref(plan), GenerateOptions::default())?;
        Ok(out.task(0))
    }

    /// Forward pass over `plans.len()` tasks stacked along the batch axis, K images each.
    pub fn generate_tasks(
        &self,
        images: Tensor<4>,
        plans: &[FusionPlan],
        options: GenerateOptions,
    ) -> Result<BatchOutput> {
        let n = images.dims()[0];
        if plans.is_empty() || n % plans.len() != 0 {
            return Err(Error::Shape(format!(
                "{n} images cannot be split into {} tasks",
                plans.len()
            )));
        }
        let k = n / plans.len();
        for plan in plans {
            if k < 2 {
                return Err(Error::Validation(format!("a task needs K >= 2 images, got {k}")));
            }
            plan.validate(k)?;
        }
        let device = images.device();
        let pyramid = self.encode(images)?;
        let (equalized, branch_fusion) = self.fusion.forward_tasks(&pyramid, plans)?;

        let deepest = PYRAMID_LEVELS - 1;
        let mut fused = Vec::with_capacity(plans.len());
        let mut plans_out = Vec::with_capacity(plans.len());
        for (t, plan) in plans.iter().enumerate() {
            let (f, p) = local_fuse(&pyramid.levels[deepest].clone().narrow(0, t * k, k), plan)?;
            fused.push(f);
            plans_out.push(p);
        }
        let base_rows: Vec<i64> = plans
            .iter()
            .enumerate()
            .map(|(t, p)| (t * k + p.base_index) as i64)
            .collect();
        let base_rows = Tensor::<1, Int>::from_data(TensorData::new(base_rows, [plans.len()]), &device);

        let eq_term = |level: usize| {
            let e = equalized.per_level[level].clone();
            if options.zero_eq_blocks {
                Tensor::zeros(e.dims(), &device)
            } else {
                e
            }
        };
        let mut x = Tensor::stack(fused, 0) + eq_term(deepest);
        let mut f_h3 = None;
        for (i, block) in self.decoder.iter().enumerate() {
            let [_, _, h, w] = x.dims();
            x = block.forward(resize_nearest(x, [2 * h, 2 * w]));
            if i == 2 {
                f_h3 = Some(x.clone());
            }
            let level = deepest - 1 - i;
            let base = pyramid.levels[level].clone().select(0, base_rows.clone());
            let base = if options.zero_base_skips {
                Tensor::zeros(base.dims(), &device)
            } else {
                base
            };
            x = Tensor::cat(vec![x, base + eq_term(level)], 1);
        }
        let [_, _, h, w] = x.dims();
        let images = self
            .output
            .forward(resize_nearest(x, [2 * h, 2 * w]))
            .tanh();
        Ok(BatchOutput {
            images,
            decoder_intermediate: f_h3.expect("decoder has more than three blocks"),
            equalized,
            plans: plans_out,
            branch_fusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::to_vec;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            channels: vec![4, 6, 8, 8, 8],
            branch_channels: 4,
            image_size: 32,
            ..Default::default()
        }
    }

    fn images(n: usize, size: usize, device: &Device) -> Tensor<4> {
        let len = n * 3 * size * size;
        let v: Vec<f32> = (0..len).map(|i| ((i * 7919) % 200) as f32 / 100.0 - 1.0).collect();
        Tensor::from_data(TensorData::new(v, [n, 3, size, size]), device)
    }

    #[test]
    fn default_pyramid_shapes() {
        // Each block halves the size: 128 -> 64, 32, 16, 8, 4.
        let device = Device::flex();
        let g = GeneratorConfig::default().init(&device).unwrap();
        let p = g.encode(images(3, 128, &device)).unwrap();
        let expected = [[3, 32, 64, 64], [3, 64, 32, 32], [3, 128, 16, 16], [3, 256, 8, 8], [3, 512, 4, 4]];
        for (l, e) in p.levels.iter().zip(expected) {
            assert_eq!(l.dims(), e);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let device = Device::flex();
        let cfg = GeneratorConfig {
            image_size: 127,
            ..small_config()
        };
        assert!(matches!(cfg.init(&device), Err(Error::Config(_))));
        let g = small_config().init(&device).unwrap();
        assert!(matches!(g.encode(images(2, 64, &device)), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            channels: vec![4, 4, 4, 4],
            ..small_config()
        };
        assert!(cfg.init(&device).is_err());
    }

    #[test]
    fn output_contract_and_determinism() {
        let device = Device::flex();
        let g = small_config().init(&device).unwrap();
        let plan = FusionPlan::new(vec![0.2, 0.5, 0.3], 1).unwrap();
        let x = images(3, 32, &device);
        let a = g.generate_tasks(x.clone(), &[plan.clone()], GenerateOptions::default()).unwrap();
        let b = g.generate_tasks(x, &[plan], GenerateOptions::default()).unwrap();
        assert_eq!(a.images.dims(), [1, 3, 32, 32]);
        let va = to_vec(&a.images);
        assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(va, to_vec(&b.images));
        let out = a.task(0);
        let f_h3 = out.decoder_intermediate().unwrap();
        assert_eq!(f_h3.dims()[1..], out.equalized.f_eq.dims()[2..]);
        assert_eq!(f_h3.dims()[0], out.equalized.f_eq.dims()[1]);
    }

    #[test]
    fn intermediate_before_forward_is_usage_error() {
        let device = Device::flex();
        let out = GeneratorOutput {
            image: Tensor::zeros([3, 4, 4], &device),
            fusion_plan: FusionPlan::one_hot(2, 0).unwrap(),
            equalized: EqualizedFeatures {
                f_eq: Tensor::zeros([1, 1, 1, 1], &device),
                per_level: vec![],
            },
            decoder_intermediate: None,
        };
        assert!(matches!(out.decoder_intermediate(), Err(Error::Usage(_))));
    }

    #[test]
    fn skip_paths_are_live() {
        let device = Device::flex();
        let g = small_config().init(&device).unwrap();
        let plan = FusionPlan::new(vec![0.3, 0.3, 0.4], 0).unwrap();
        let x = images(3, 32, &device);
        let run = |o| to_vec(&g.generate_tasks(x.clone(), &[plan.clone()], o).unwrap().images);
        let full = run(GenerateOptions::default());
        let no_base = run(GenerateOptions {
            zero_base_skips: true,
            ..Default::default()
        });
        let no_eq = run(GenerateOptions {
            zero_eq_blocks: true,
            ..Default::default()
        });
        assert_ne!(full, no_base);
        assert_ne!(full, no_eq);

        let off = GeneratorConfig {
            texture_skips: false,
            structure_skips: false,
            ..small_config()
        }
        .init(&device)
        .unwrap();
        let run_off = |o| to_vec(&off.generate_tasks(x.clone(), &[plan.clone()], o).unwrap().images);
        assert_eq!(
            run_off(GenerateOptions::default()),
            run_off(GenerateOptions {
                zero_eq_blocks: true,
                ..Default::default()
            })
        );
    }
}
