//! Procedural dataset of colored geometric shapes.
//!
//! Every category pairs one shape with one hue, so categories are separable from mean color
//! alone while instances vary in position, scale and brightness.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{chw_to_rgb, rgb_to_chw, Category, Dataset, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Diamond,
    Ring,
}

impl Shape {
    fn for_category(c: usize) -> Self {
        [Shape::Disc, Shape::Square, Shape::Diamond, Shape::Ring][c % 4]
    }

    /// `dx`, `dy` are offsets from the center in units of the radius.
    fn contains(self, dx: f32, dy: f32) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= 1.0,
            Shape::Square => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            Shape::Diamond => dx.abs() + dy.abs() <= 1.1,
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub categories: usize,
    pub seen_count: usize,
    pub images_per_category: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Roughly 80% of the categories are seen.
    pub fn new(categories: usize, images_per_category: usize, image_size: usize) -> Self {
        let seen_count = ((categories * 4) / 5).clamp(1, categories.saturating_sub(1).max(1));
        Self {
            categories,
            seen_count,
            images_per_category,
            image_size,
            seed: 0,
        }
    }

    pub fn with_seen_count(mut self, seen_count: usize) -> Self {
        self.seen_count = seen_count;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Validation(
                "synthetic dataset needs at least 2 categories".into(),
            ));
        }
        if self.image_size < 4 {
            return Err(Error::Validation("synthetic image_size must be >= 4".into()));
        }
        if self.images_per_category < 2 {
            return Err(Error::Validation(
                "synthetic images_per_category must be >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Dataset> {
        self.validate()?;
        let categories = (0..self.categories)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(c as u64));
                let images = (0..self.images_per_category)
                    .map(|i| Image {
                        name: format!("{i:04}.png"),
                        pixels: rgb_to_chw(&self.render(c, &mut rng)),
                    })
                    .collect();
                Category {
                    id: c,
                    name: format!("shape_{c:03}"),
                    images,
                }
            })
            .collect();
        Dataset::from_categories(categories, self.image_size, self.seen_count, self.seed)
    }

    fn render(&self, category: usize, rng: &mut ChaCha8Rng) -> image::RgbImage {
        let size = self.image_size as f32;
        let shape = Shape::for_category(category);
        let base = hue_to_rgb(category as f32 / self.categories as f32);
        let brightness = rng.random_range(0.8..1.0f32);
        let radius = size * rng.random_range(0.22..0.34f32);
        let cx = size / 2.0 + rng.random_range(-0.12..0.12f32) * size;
        let cy = size / 2.0 + rng.random_range(-0.12..0.12f32) * size;
        let background = rng.random_range(10..40u8);
        image::RgbImage::from_fn(self.image_size as u32, self.image_size as u32, |x, y| {
            let dx = (x as f32 + 0.5 - cx) / radius;
            let dy = (y as f32 + 0.5 - cy) / radius;
            if shape.contains(dx, dy) {
                image::Rgb(base.map(|v| (v * brightness * 255.0).round() as u8))
            } else {
                image::Rgb([background; 3])
            }
        })
    }
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    match h6 as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Writes a dataset as `root/<category>/<image>.png`, the layout `load_dataset` reads.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for cat in &dataset.categories {
        let dir = root.join(&cat.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for im in &cat.images {
            let path = dir.join(&im.name);
            chw_to_rgb(&im.pixels, dataset.image_size)
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}
