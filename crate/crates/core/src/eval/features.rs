use std::fs;
use std::path::{Path, PathBuf};

use burn::prelude::*;
use image::GrayImage;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::layers::to_vec;

/// Channel-mean heat map of every encoder block for one CHW image, min-max scaled to 8 bits.
pub fn channel_mean_maps(generator: &Generator, image: &[f32], device: &Device) -> Result<Vec<GrayImage>> {
    let s = generator.image_size();
    if image.len() != CHANNELS * s * s {
        return Err(Error::Shape(format!(
            "expected a {CHANNELS}x{s}x{s} image, got {} values",
            image.len()
        )));
    }
    let x = Tensor::<4>::from_data(TensorData::new(image.to_vec(), [1, CHANNELS, s, s]), device);
    let pyramid = generator.encode(x)?;
    Ok(pyramid
        .levels
        .iter()
        .map(|level| {
            let [_, _, h, w] = level.dims();
            let mean = to_vec(&level.clone().mean_dim(1));
            let lo = mean.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = mean.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let range = if hi - lo > 0.0 { hi - lo } else { 1.0 };
            let px: Vec<u8> = mean.iter().map(|v| ((v - lo) / range * 255.0).round() as u8).collect();
            GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches map size")
        })
        .collect())
}

/// Writes `<name>_B0.png` .. `<name>_B4.png` for every named input image.
pub fn dump_feature_maps(
    generator: &Generator,
    images: &[(String, Vec<f32>)],
    out_dir: &Path,
    device: &Device,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, pixels) in images {
        for (b, map) in channel_mean_maps(generator, pixels, device)?.into_iter().enumerate() {
            let path = out_dir.join(format!("{name}_B{b}.png"));
            map.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    #[test]
    fn five_maps_following_the_pyramid() {
        let device = Device::flex();
        let g = GeneratorConfig {
            channels: vec![4, 4, 4, 4, 4],
            branch_channels: 4,
            image_size: 64,
            ..Default::default()
        }
        .init(&device)
        .unwrap();
        let img: Vec<f32> = (0..3 * 64 * 64).map(|i| ((i * 13) % 29) as f32 / 14.5 - 1.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_feature_maps(&g, &[("x".into(), img.clone())], dir.path(), &device).unwrap();
        assert_eq!(paths.len(), 5);
        let maps = channel_mean_maps(&g, &img, &device).unwrap();
        let sizes: Vec<u32> = maps.iter().map(|m| m.width()).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        assert_eq!(maps, channel_mean_maps(&g, &img, &device).unwrap());
        assert!(paths[4].ends_with("x_B4.png"));
    }
}
