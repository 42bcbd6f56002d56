//! Dataset ingestion, seen/unseen category splitting and episodic task sampling.
//!
//! A dataset root holds one directory per category; the category id is the rank of the
//! directory name in sorted order. Pixels are kept in memory as `[-1, 1]` floats in CHW
//! layout.

mod splits;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use burn::prelude::*;
use image::imageops::FilterType;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use splits::{
    classification_splits, split_unseen, write_split_manifest, ClassificationSplits,
    SplitManifestRow, UnseenSplit,
};

/// Image channels; everything in this crate is RGB.
pub const CHANNELS: usize = 3;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub total_categories: usize,
    pub seen_count: usize,
    pub unseen_count: usize,
    pub images_per_category: usize,
    pub image_size: usize,
}

impl DatasetSpec {
    pub fn flower(root: impl Into<PathBuf>) -> Self {
        Self::with_counts(root, 102, 85, 17, 40)
    }

    pub fn animal_faces(root: impl Into<PathBuf>) -> Self {
        Self::with_counts(root, 149, 119, 30, 100)
    }

    pub fn vggface(root: impl Into<PathBuf>) -> Self {
        Self::with_counts(root, 2354, 1802, 552, 100)
    }

    fn with_counts(
        root: impl Into<PathBuf>,
        total: usize,
        seen: usize,
        unseen: usize,
        per_category: usize,
    ) -> Self {
        Self {
            root_path: root.into(),
            total_categories: total,
            seen_count: seen,
            unseen_count: unseen,
            images_per_category: per_category,
            image_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen_count + self.unseen_count != self.total_categories {
            return Err(Error::Validation(format!(
                "seen ({}) + unseen ({}) categories must equal total ({})",
                self.seen_count, self.unseen_count, self.total_categories
            )));
        }
        if self.seen_count == 0 || self.unseen_count == 0 {
            return Err(Error::Validation(
                "both seen and unseen partitions need at least one category".into(),
            ));
        }
        if self.images_per_category < 2 {
            return Err(Error::Validation(
                "images_per_category must be at least 2".into(),
            ));
        }
        if self.image_size == 0 {
            return Err(Error::Validation("image_size must be positive".into()));
        }
        Ok(())
    }
}

/// One decoded image, CHW, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub name: String,
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Seen,
    Unseen,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub categories: Vec<Category>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from already-decoded categories. The seen/unseen assignment is a seeded
    /// shuffle of the category ids (which are expected to be `0..categories.len()`).
    pub fn from_categories(
        categories: Vec<Category>,
        image_size: usize,
        seen_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if seen_count == 0 || seen_count >= categories.len() {
            return Err(Error::Validation(format!(
                "seen_count {seen_count} must lie in 1..{}",
                categories.len()
            )));
        }
        let expected = CHANNELS * image_size * image_size;
        for cat in &categories {
            if let Some(bad) = cat.images.iter().find(|im| im.pixels.len() != expected) {
                return Err(Error::Validation(format!(
                    "image {} in category {} has {} values, expected {expected}",
                    bad.name,
                    cat.name,
                    bad.pixels.len()
                )));
            }
        }
        let mut ids: Vec<usize> = (0..categories.len()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = ids[..seen_count].to_vec();
        let mut unseen = ids[seen_count..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();
        Ok(Self {
            image_size,
            categories,
            seen,
            unseen,
        })
    }

    /// Category ids of a partition, ascending.
    pub fn partition(&self, partition: Partition) -> &[usize] {
        match partition {
            Partition::Seen => &self.seen,
            Partition::Unseen => &self.unseen,
        }
    }

    /// Position of `category` within the seen partition; this is the auxiliary classifier's
    /// class index.
    pub fn seen_index(&self, category: usize) -> Option<usize> {
        self.seen.binary_search(&category).ok()
    }

    pub fn category(&self, id: usize) -> &Category {
        &self.categories[id]
    }

    pub fn images_in(&self, category: usize) -> usize {
        self.categories[category].images.len()
    }

    pub fn pixels_per_image(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    /// Gathers the given images of one category into an [`ImageBatch`].
    pub fn batch(&self, category: usize, image_indices: &[usize]) -> ImageBatch {
        let cat = &self.categories[category];
        let mut images = Vec::with_capacity(image_indices.len() * self.pixels_per_image());
        for &i in image_indices {
            images.extend_from_slice(&cat.images[i].pixels);
        }
        ImageBatch {
            images,
            k: image_indices.len(),
            image_size: self.image_size,
            label: category,
            image_indices: image_indices.to_vec(),
        }
    }
}

/// K same-category images conditioning one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `K x 3 x H x W`, row-major, values in `[-1, 1]`.
    pub images: Vec<f32>,
    pub k: usize,
    pub image_size: usize,
    /// Dataset category id shared by all images.
    pub label: usize,
    /// Indices of the images within their category.
    pub image_indices: Vec<usize>,
}

impl ImageBatch {
    pub fn shape(&self) -> [usize; 4] {
        [self.k, CHANNELS, self.image_size, self.image_size]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = CHANNELS * self.image_size * self.image_size;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn to_tensor(&self, device: &Device) -> Tensor<4> {
        Tensor::from_data(TensorData::new(self.images.clone(), self.shape()), device)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Validation(format!(
                "a task needs K >= 2 images, got {}",
                self.k
            )));
        }
        let expected = self.k * CHANNELS * self.image_size * self.image_size;
        if self.images.len() != expected {
            return Err(Error::Shape(format!(
                "batch holds {} values, expected {expected}",
                self.images.len()
            )));
        }
        Ok(())
    }
}

/// 8-bit channel value to `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`], clamping out-of-range values.
pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// RGB8 pixels (HWC) to normalized CHW floats.
pub fn rgb_to_chw(rgb: &image::RgbImage) -> Vec<f32> {
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = vec![0.0; CHANNELS * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..CHANNELS {
            out[c * h * w + y as usize * w + x as usize] = normalize_u8(p[c]);
        }
    }
    out
}

/// Normalized CHW floats back to an RGB8 image.
pub fn chw_to_rgb(pixels: &[f32], size: usize) -> image::RgbImage {
    let plane = size * size;
    image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        image::Rgb([
            denormalize(pixels[i]),
            denormalize(pixels[plane + i]),
            denormalize(pixels[2 * plane + i]),
        ])
    })
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn read_sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn decode_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = decoded.to_rgb8();
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(rgb_to_chw(&rgb))
}

/// Loads `root/<category>/<image>` into memory.
///
/// Each category keeps the first `images_per_category` images in sorted file-name order.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let dirs: Vec<PathBuf> = read_sorted_dir(&spec.root_path)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if dirs.len() != spec.total_categories {
        return Err(Error::Validation(format!(
            "{} holds {} category directories, expected {}",
            spec.root_path.display(),
            dirs.len(),
            spec.total_categories
        )));
    }

    let mut categories = Vec::with_capacity(dirs.len());
    for (id, dir) in dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = read_sorted_dir(dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.len() < spec.images_per_category {
            return Err(Error::Validation(format!(
                "category '{name}' has {} images, need {}",
                files.len(),
                spec.images_per_category
            )));
        }
        let images = files[..spec.images_per_category]
            .iter()
            .map(|path| {
                Ok(Image {
                    name: path
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    pixels: decode_image(path, spec.image_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        categories.push(Category { id, name, images });
    }
    Dataset::from_categories(categories, spec.image_size, spec.seen_count, seed)
}

/// Draws one category uniformly from `partition`, then `k` distinct images uniformly without
/// replacement.
pub fn sample_task<R: Rng + ?Sized>(
    dataset: &Dataset,
    partition: Partition,
    k: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    let ids = dataset.partition(partition);
    if ids.is_empty() {
        return Err(Error::Sampling("partition has no categories".into()));
    }
    let category = ids[rng.random_range(0..ids.len())];
    let pool: Vec<usize> = (0..dataset.images_in(category)).collect();
    sample_from_pool(dataset, category, &pool, k, rng)
}

/// Draws `k` distinct images of `category`, restricted to the image indices in `pool`.
pub fn sample_from_pool<R: Rng + ?Sized>(
    dataset: &Dataset,
    category: usize,
    pool: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    if k < 2 {
        return Err(Error::Sampling(format!("K must be at least 2, got {k}")));
    }
    if k > pool.len() {
        return Err(Error::Sampling(format!(
            "K = {k} exceeds the {} images available in category '{}'",
            pool.len(),
            dataset.category(category).name
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(dataset.batch(category, &chosen))
}
