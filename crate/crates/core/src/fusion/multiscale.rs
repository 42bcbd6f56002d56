use burn::nn::conv::Conv2d;
use burn::prelude::*;

use crate::layers::{leaky_relu, ParamInit};

/// Kernel size of each parallel stream.
pub const STREAM_KERNELS: [usize; 3] = [3, 5, 7];
/// Convolutions per stream.
pub const STREAM_DEPTH: usize = 5;

#[derive(Module, Debug)]
struct Stream {
    convs: Vec<Conv2d>,
}

impl Stream {
    fn forward(&self, mut x: Tensor<4>) -> Tensor<4> {
        for conv in &self.convs {
            x = leaky_relu(conv.forward(x));
        }
        x
    }
}

/// Three parallel same-kernel streams, concatenated and projected back to the input width.
///
/// Convolutions use `k / 2` zero padding, so any spatial size (including maps smaller than
/// the 7x7 kernel) is preserved.
#[derive(Module, Debug)]
pub struct MultiScale {
    streams: Vec<Stream>,
    project: Conv2d,
    channels: usize,
}

impl MultiScale {
    pub fn new(channels: usize, init: &mut ParamInit) -> Self {
        let streams = STREAM_KERNELS
            .iter()
            .map(|&k| Stream {
                convs: (0..STREAM_DEPTH)
                    .map(|_| init.conv2d([channels, channels], k, 1, k / 2, true))
                    .collect(),
            })
            .collect();
        let project = init.conv2d([channels * STREAM_KERNELS.len(), channels], 1, 1, 0, true);
        Self {
            streams,
            project,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Convolutions of each stream, in [`STREAM_KERNELS`] order.
    pub fn stream_convs(&self) -> Vec<&[Conv2d]> {
        self.streams.iter().map(|s| s.convs.as_slice()).collect()
    }

    pub fn projection(&self) -> &Conv2d {
        &self.project
    }

    pub fn forward(&self, x: Tensor<4>) -> Tensor<4> {
        let outs = self.streams.iter().map(|s| s.forward(x.clone())).collect();
        self.project.forward(Tensor::cat(outs, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_shape_including_small_maps() {
        let device = Device::flex();
        let ms = MultiScale::new(4, &mut ParamInit::new(0, &device));
        for hw in [1, 2, 4, 16] {
            let x = Tensor::<4>::ones([3, 4, hw, hw], &device);
            assert_eq!(ms.forward(x).dims(), [3, 4, hw, hw]);
        }
    }

    #[test]
    fn parameter_count_matches_layer_plan() {
        // Oracle: count every conv separately from the layer plan.
        let c = 8usize;
        let mut expected = 0;
        for k in STREAM_KERNELS {
            for _ in 0..STREAM_DEPTH {
                expected += c * c * k * k + c;
            }
        }
        expected += 3 * c * c + c;
        let ms = MultiScale::new(c, &mut ParamInit::new(0, &Device::flex()));
        assert_eq!(ms.num_params(), expected);
        assert_eq!(expected, 26_880);
        assert_eq!(ms.streams.len(), 3);
        assert!(ms.streams.iter().all(|s| s.convs.len() == STREAM_DEPTH));
    }
}
