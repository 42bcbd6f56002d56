use burn::nn::conv::Conv2d;
use burn::prelude::*;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::layers::{leaky_relu, to_vec, ParamInit};

/// One layer's activations for one image, channel-major (`channels x positions`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub positions: usize,
    pub values: Vec<f32>,
}

/// Image feature extractor behind the FID and LPIPS computations.
///
/// Images are CHW slices of side `size` with values in `[-1, 1]`.
pub trait Embedder {
    /// Per-image, per-layer activations.
    fn feature_maps(&self, images: &[&[f32]], size: usize) -> Result<Vec<Vec<FeatureMap>>>;

    /// Per-image embedding vectors (default: per-layer channel means, concatenated).
    fn embed(&self, images: &[&[f32]], size: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .feature_maps(images, size)?
            .into_iter()
            .map(|layers| {
                layers
                    .iter()
                    .flat_map(|m| {
                        (0..m.channels).map(move |c| {
                            let row = &m.values[c * m.positions..(c + 1) * m.positions];
                            row.iter().sum::<f32>() / m.positions as f32
                        })
                    })
                    .collect()
            })
            .collect())
    }
}

/// Deterministic random convolutional embedder for hermetic evaluation.
#[derive(Module, Debug)]
pub struct RandomConvEmbedder {
    convs: Vec<Conv2d>,
}

const EMBED_CHANNELS: [usize; 3] = [16, 32, 64];
const CHUNK: usize = 64;

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> Self {
        let device = Device::flex();
        let mut init = ParamInit::new(seed, &device);
        let mut cin = CHANNELS;
        let convs = EMBED_CHANNELS
            .iter()
            .map(|&cout| {
                let conv = init.conv2d([cin, cout], 3, 2, 1, false);
                cin = cout;
                conv
            })
            .collect();
        Self { convs }
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(0xFEED)
    }
}

impl Embedder for RandomConvEmbedder {
    fn feature_maps(&self, images: &[&[f32]], size: usize) -> Result<Vec<Vec<FeatureMap>>> {
        let n = CHANNELS * size * size;
        if let Some(bad) = images.iter().find(|im| im.len() != n) {
            return Err(Error::Shape(format!(
                "embedder expected {n} values per image, got {}",
                bad.len()
            )));
        }
        let device = Device::flex();
        let mut out: Vec<Vec<FeatureMap>> = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let data: Vec<f32> = chunk.iter().flat_map(|im| im.iter().copied()).collect();
            let mut x = Tensor::<4>::from_data(TensorData::new(data, [chunk.len(), CHANNELS, size, size]), &device);
            let mut per_image: Vec<Vec<FeatureMap>> = vec![Vec::new(); chunk.len()];
            for conv in &self.convs {
                x = leaky_relu(conv.forward(x));
                let [_, c, h, w] = x.dims();
                let host = to_vec(&x);
                let per = c * h * w;
                for (i, maps) in per_image.iter_mut().enumerate() {
                    maps.push(FeatureMap {
                        channels: c,
                        positions: h * w,
                        values: host[i * per..(i + 1) * per].to_vec(),
                    });
                }
            }
            out.extend(per_image);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let e = RandomConvEmbedder::default();
        let img: Vec<f32> = (0..3 * 16 * 16).map(|i| (i % 7) as f32 / 7.0).collect();
        let a = e.embed(&[&img, &img], 16).unwrap();
        assert_eq!(a[0].len(), EMBED_CHANNELS.iter().sum::<usize>());
        assert_eq!(a[0], a[1]);
        assert_eq!(a, RandomConvEmbedder::default().embed(&[&img, &img], 16).unwrap());
        let maps = e.feature_maps(&[&img], 16).unwrap();
        assert_eq!(maps[0][0].positions, 64);
        assert!(e.embed(&[&img[..10]], 16).is_err());
    }
}
