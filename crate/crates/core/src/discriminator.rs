//! Hinge-loss critic with an auxiliary classifier over the seen categories.
//!
//! Every weight is spectrally normalized. The largest singular value is estimated on each
//! forward pass by power iteration from a fixed start vector, so the layer carries no state
//! besides its parameters and the forward pass is a pure function of them.

use burn::module::Param;
use burn::prelude::*;
use burn::tensor::module::conv2d;
use burn::tensor::ops::ConvOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::layers::{leaky_relu, to_vec, ParamInit};

const POWER_ITERATIONS: usize = 50;
const POWER_TOLERANCE: f64 = 1e-7;

/// Leading singular vectors `(u, v)` of a row-major `rows x cols` matrix.
pub fn leading_singular_vectors(w: &[f32], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut u);
    let mut v = vec![0.0f64; cols];
    let mut sigma = 0.0f64;
    for _ in 0..POWER_ITERATIONS {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in u.iter().enumerate() {
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += ur * wv as f64;
            }
        }
        normalize(&mut v);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(&a, b)| a as f64 * b)
                .sum();
        }
        let next = normalize(&mut u);
        if (next - sigma).abs() <= POWER_TOLERANCE * next.max(1e-12) {
            break;
        }
        sigma = next;
    }
    (u, v)
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// `w / sigma(w)` for a weight viewed as `rows x cols`. The singular vectors are constants;
/// `sigma = u^T W v` is differentiated through `w`.
fn spectral_normalize<const D: usize>(w: Tensor<D>, rows: usize) -> Tensor<D> {
    let shape = w.dims();
    let cols = shape.iter().product::<usize>() / rows;
    let (u, v) = leading_singular_vectors(&to_vec(&w.clone().detach()), rows, cols);
    let outer: Vec<f32> = u
        .iter()
        .flat_map(|&a| v.iter().map(move |&b| (a * b) as f32))
        .collect();
    let device = w.device();
    let outer = Tensor::<D>::from_data(TensorData::new(outer, shape), &device);
    let sigma = (w.clone() * outer).sum();
    w / sigma.reshape([1; D])
}

#[derive(Module, Debug)]
pub struct SpectralConv2d {
    weight: Param<Tensor<4>>,
    bias: Param<Tensor<1>>,
    stride: usize,
    padding: usize,
}

impl SpectralConv2d {
    pub fn new(channels: [usize; 2], kernel: usize, stride: usize, init: &mut ParamInit) -> Self {
        let (weight, bias) = init.conv_weight(channels, kernel);
        Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn normalized_weight(&self) -> Tensor<4> {
        let w = self.weight.val();
        let rows = w.dims()[0];
        spectral_normalize(w, rows)
    }

    pub fn forward(&self, x: Tensor<4>) -> Tensor<4> {
        conv2d(
            x,
            self.normalized_weight(),
            Some(self.bias.val()),
            ConvOptions::new([self.stride; 2], [self.padding; 2], [1, 1], 1),
        )
    }
}

/// Linear layer with a `[d_in, d_out]` spectrally normalized weight.
#[derive(Module, Debug)]
pub struct SpectralLinear {
    weight: Param<Tensor<2>>,
    bias: Param<Tensor<1>>,
}

impl SpectralLinear {
    pub fn new(d_in: usize, d_out: usize, init: &mut ParamInit) -> Self {
        let (weight, bias) = init.linear_weight(d_in, d_out);
        Self { weight, bias }
    }

    pub fn normalized_weight(&self) -> Tensor<2> {
        let w = self.weight.val();
        let rows = w.dims()[0];
        spectral_normalize(w, rows)
    }

    pub fn forward(&self, x: Tensor<2>) -> Tensor<2> {
        x.matmul(self.normalized_weight()) + self.bias.val().unsqueeze_dim(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl DiscriminatorConfig {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            image_size,
            num_classes,
            seed: 1,
        }
    }

    pub fn init(&self, device: &Device) -> Result<Discriminator> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator channels must be non-empty and positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("discriminator needs at least one class".into()));
        }
        if self.image_size == 0 || self.image_size % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "image size {} does not survive {} stride-2 blocks",
                self.image_size,
                self.channels.len()
            )));
        }
        let mut init = ParamInit::new(self.seed, device);
        let mut blocks = Vec::new();
        let mut cin = CHANNELS;
        for &cout in &self.channels {
            blocks.push(SpectralConv2d::new([cin, cout], 3, 2, &mut init));
            cin = cout;
        }
        Ok(Discriminator {
            blocks,
            realness: SpectralLinear::new(cin, 1, &mut init),
            classifier: SpectralLinear::new(cin, self.num_classes, &mut init),
            image_size: self.image_size,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// One unbounded score per image.
    pub realness: Tensor<1>,
    /// `N x num_classes` raw logits.
    pub class_logits: Tensor<2>,
}

#[derive(Module, Debug)]
pub struct Discriminator {
    blocks: Vec<SpectralConv2d>,
    realness: SpectralLinear,
    classifier: SpectralLinear,
    image_size: usize,
}

impl Discriminator {
    pub fn num_classes(&self) -> usize {
        self.classifier.bias.dims()[0]
    }

    pub fn discriminate(&self, images: Tensor<4>) -> Result<DiscriminatorOutput> {
        let [n, c, h, w] = images.dims();
        if c != CHANNELS || h != self.image_size || w != self.image_size {
            return Err(Error::Validation(format!(
                "discriminator expects N x {CHANNELS} x {s} x {s}, got {n} x {c} x {h} x {w}",
                s = self.image_size
            )));
        }
        let mut x = images;
        for block in &self.blocks {
            x = leaky_relu(block.forward(x));
        }
        let [n, c, _, _] = x.dims();
        let pooled = x.sum_dim(3).sum_dim(2).reshape([n, c]);
        Ok(DiscriminatorOutput {
            realness: self.realness.forward(pooled.clone()).reshape([n]),
            class_logits: self.classifier.forward(pooled),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_finds_top_singular_value() {
        // diag(3, 1) rotated: singular values are 3 and 1.
        let (c, s) = (0.6f32, 0.8f32);
        let w = [3.0 * c, -s, 3.0 * s, c];
        let (u, v) = leading_singular_vectors(&w, 2, 2);
        let mut sigma = 0.0;
        for r in 0..2 {
            for k in 0..2 {
                sigma += u[r] * w[r * 2 + k] as f64 * v[k];
            }
        }
        assert!((sigma.abs() - 3.0).abs() < 1e-6, "{sigma}");
    }

    #[test]
    fn normalized_weights_have_unit_spectral_norm() {
        let device = Device::flex();
        let conv = SpectralConv2d::new([4, 6], 3, 2, &mut ParamInit::new(3, &device));
        let w = to_vec(&conv.normalized_weight());
        let (u, v) = leading_singular_vectors(&w, 6, 36);
        let sigma: f64 = (0..6)
            .map(|r| (0..36).map(|k| u[r] * w[r * 36 + k] as f64 * v[k]).sum::<f64>())
            .sum();
        assert!((sigma - 1.0).abs() < 1e-4, "{sigma}");
    }

    #[test]
    fn output_shapes_and_validation() {
        let device = Device::flex();
        let d = DiscriminatorConfig {
            channels: vec![4, 4, 8, 8, 8],
            ..DiscriminatorConfig::new(32, 5)
        }
        .init(&device)
        .unwrap();
        let out = d.discriminate(Tensor::zeros([8, 3, 32, 32], &device)).unwrap();
        assert_eq!(out.realness.dims(), [8]);
        assert_eq!(out.class_logits.dims(), [8, 5]);
        assert!(matches!(
            d.discriminate(Tensor::zeros([8, 1, 32, 32], &device)),
            Err(Error::Validation(_))
        ));
        let x = Tensor::<4>::ones([2, 3, 32, 32], &device);
        assert_eq!(
            to_vec(&d.discriminate(x.clone()).unwrap().class_logits),
            to_vec(&d.discriminate(x).unwrap().class_logits)
        );
    }
}
