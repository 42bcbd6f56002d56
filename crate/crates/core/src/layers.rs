//! Layer construction with seeded initialization, plus module-level utilities shared by the
//! generator, discriminator and classifier.

use burn::module::{ModuleVisitor, Param};
use burn::nn::conv::Conv2d;
use burn::nn::{BatchNorm, BatchNormConfig, Linear, PaddingConfig2d};
use burn::optim::GradientsParams;
use burn::prelude::*;
use burn::tensor::module::interpolate;
use burn::tensor::ops::{InterpolateMode, InterpolateOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Negative slope of every LeakyReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Seeded parameter factory.
///
/// Weight values come from a per-model ChaCha stream rather than the backend's global RNG,
/// so models built concurrently (e.g. by parallel tests) are reproducible.
pub struct ParamInit {
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamInit {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Kaiming-uniform for a LeakyReLU fan-in.
    fn uniform<const D: usize>(&mut self, shape: [usize; D], fan_in: usize) -> Param<Tensor<D>> {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = (gain * (3.0 / fan_in as f64).sqrt()) as f32;
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Param::from_data(TensorData::new(values, shape), &self.device)
    }

    fn zeros(&self, n: usize) -> Param<Tensor<1>> {
        Param::from_data(TensorData::new(vec![0.0f32; n], [n]), &self.device)
    }

    /// Square-kernel convolution; `padding` is applied on all four sides.
    pub fn conv2d(
        &mut self,
        channels: [usize; 2],
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv2d {
        let [cin, cout] = channels;
        Conv2d {
            weight: self.uniform([cout, cin, kernel, kernel], cin * kernel * kernel),
            bias: bias.then(|| self.zeros(cout)),
            stride: [stride, stride],
            kernel_size: [kernel, kernel],
            dilation: [1, 1],
            groups: 1,
            padding: PaddingConfig2d::Explicit(padding, padding, padding, padding),
        }
    }

    /// Raw `[out, in * k * k]`-shaped conv weight and zero bias, for layers that
    /// reparameterize their weights.
    pub fn conv_weight(&mut self, channels: [usize; 2], kernel: usize) -> (Param<Tensor<4>>, Param<Tensor<1>>) {
        let [cin, cout] = channels;
        (
            self.uniform([cout, cin, kernel, kernel], cin * kernel * kernel),
            self.zeros(cout),
        )
    }

    /// `[d_in, d_out]` weight and zero bias.
    pub fn linear_weight(&mut self, d_in: usize, d_out: usize) -> (Param<Tensor<2>>, Param<Tensor<1>>) {
        (self.uniform([d_in, d_out], d_in), self.zeros(d_out))
    }

    pub fn linear(&mut self, d_in: usize, d_out: usize) -> Linear {
        let (weight, bias) = self.linear_weight(d_in, d_out);
        Linear {
            weight,
            bias: Some(bias),
        }
    }

    pub fn batch_norm(&self, channels: usize) -> BatchNorm {
        BatchNormConfig::new(channels).init(&self.device)
    }
}

pub fn leaky_relu<const D: usize>(x: Tensor<D>) -> Tensor<D> {
    burn::tensor::activation::leaky_relu(x, LEAKY_SLOPE)
}

/// Nearest-neighbor resampling to `size`; a no-op when the size already matches.
pub fn resize_nearest(x: Tensor<4>, size: [usize; 2]) -> Tensor<4> {
    let [_, _, h, w] = x.dims();
    if [h, w] == size {
        return x;
    }
    interpolate(
        x,
        InterpolateOptions::new(InterpolateMode::Nearest).with_output_size(size),
    )
}

/// Commits pending batch-norm running-stat updates. Burn keeps the latest update aside until
/// the next forward, and visitors (saving, hashing) only see the committed value.
pub fn sync_running_stats<M: Module>(module: &M) {
    // `valid` synchronizes the running states it copies; they are shared with `module`.
    let _ = module.valid();
}

/// SHA-256 over every float parameter (visit order, little-endian f32 bytes).
pub fn param_hash<M: Module>(module: &M) -> String {
    sync_running_stats(module);
    struct Hasher(Sha256);
    impl ModuleVisitor for Hasher {
        fn visit_float<const D: usize>(&mut self, param: &Param<Tensor<D>>) {
            let data = param.val().to_data();
            for v in data.iter::<f32>() {
                self.0.update(v.to_le_bytes());
            }
        }
    }
    let mut h = Hasher(Sha256::new());
    module.visit(&mut h);
    hex::encode(h.0.finalize())
}

/// Trainable float parameters of a module that received a finite gradient. `zero` counts the
/// covered ones whose gradient is exactly zero everywhere (e.g. a bias under a balanced hinge).
/// Running statistics are not trainable and are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientCoverage {
    pub covered: usize,
    pub zero: usize,
    pub total: usize,
}

impl GradientCoverage {
    pub fn is_complete(&self) -> bool {
        self.covered == self.total
    }
}

pub fn gradient_coverage<M: Module>(module: &M, grads: &GradientsParams) -> GradientCoverage {
    struct Visitor<'a> {
        grads: &'a GradientsParams,
        cov: GradientCoverage,
    }
    impl ModuleVisitor for Visitor<'_> {
        fn visit_float<const D: usize>(&mut self, param: &Param<Tensor<D>>) {
            if !param.val().is_require_grad() {
                return;
            }
            self.cov.total += 1;
            if let Some(g) = self.grads.get::<D>(param.id) {
                let max = g.abs().max().into_scalar::<f32>();
                if max.is_finite() {
                    self.cov.covered += 1;
                    self.cov.zero += usize::from(max == 0.0);
                }
            }
        }
    }
    let mut v = Visitor {
        grads,
        cov: GradientCoverage {
            covered: 0,
            zero: 0,
            total: 0,
        },
    };
    module.visit(&mut v);
    v.cov
}

/// L2 norm over all gradients that belong to `module`.
pub fn gradient_norm<M: Module>(module: &M, grads: &GradientsParams) -> f64 {
    struct Visitor<'a> {
        grads: &'a GradientsParams,
        sum: f64,
    }
    impl ModuleVisitor for Visitor<'_> {
        fn visit_float<const D: usize>(&mut self, param: &Param<Tensor<D>>) {
            if let Some(g) = self.grads.get::<D>(param.id) {
                self.sum += g.powi_scalar(2).sum().into_scalar::<f32>() as f64;
            }
        }
    }
    let mut v = Visitor { grads, sum: 0.0 };
    module.visit(&mut v);
    v.sum.sqrt()
}

/// Host copy of a float tensor.
pub fn to_vec<const D: usize>(x: &Tensor<D>) -> Vec<f32> {
    x.to_data().iter::<f32>().collect()
}

pub fn scalar(x: &Tensor<1>) -> f32 {
    x.to_data().iter::<f32>().next().unwrap_or(f32::NAN)
}
