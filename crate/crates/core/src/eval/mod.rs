//! Generation quality (FID, LPIPS diversity), the shot sweep, classifier augmentation and
//! encoder feature dumps.

mod classify;
mod embedder;
mod features;
mod fid;
mod lpips;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use burn::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use classify::{augment_classification, AugmentOptions, AugmentResult, ClassifierConfig, ResNet};
pub use embedder::{Embedder, FeatureMap, RandomConvEmbedder};
pub use features::{channel_mean_maps, dump_feature_maps};
pub use fid::{fid, frechet_distance, Gaussian};
pub use lpips::{lpips_diversity, pair_indices, perceptual_distance, Pairing};
pub use report::{image_grid, line_plot_svg, write_image_grid, CategoryMetrics, MetricReport};

use crate::data::{sample_from_pool, Dataset, UnseenSplit, CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::FusionPlan;
use crate::generator::{GenerateOptions, Generator};
use crate::layers::to_vec;
use crate::trainer::load_generator;

pub const DEFAULT_SHOTS: [usize; 5] = [2, 3, 5, 7, 9];

/// Conditioning/reference split of an unseen category with `n` images: 10:30 for 40 images,
/// 30:70 for 100, otherwise 30% conditioning.
pub fn unseen_parts(n: usize) -> [usize; 2] {
    match n {
        40 => [10, 30],
        100 => [30, 70],
        n => {
            let a = ((n as f64 * 0.3).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            [a, n - a]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub per_category: usize,
    pub k: usize,
    pub seed: u64,
    /// Tasks generated per forward pass.
    pub tasks_per_forward: usize,
    pub pairing: Pairing,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            per_category: 128,
            k: 3,
            seed: 0,
            tasks_per_forward: 16,
            pairing: Pairing::Exhaustive,
        }
    }
}

/// Generates `count` images for `category`, each from `k` images drawn from `pool` and a
/// fresh fusion plan.
#[allow(clippy::too_many_arguments)]
pub fn generate_images<R: Rng + ?Sized>(
    generator: &Generator,
    dataset: &Dataset,
    category: usize,
    pool: &[usize],
    count: usize,
    k: usize,
    tasks_per_forward: usize,
    rng: &mut R,
    device: &Device,
) -> Result<Vec<Vec<f32>>> {
    let s = dataset.image_size;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = tasks_per_forward.max(1).min(count - out.len());
        let mut host = Vec::with_capacity(n * k * CHANNELS * s * s);
        let mut plans = Vec::with_capacity(n);
        for _ in 0..n {
            host.extend(sample_from_pool(dataset, category, pool, k, rng)?.images);
            plans.push(FusionPlan::sample(k, rng)?);
        }
        let images = Tensor::<4>::from_data(TensorData::new(host, [n * k, CHANNELS, s, s]), device);
        let generated = to_vec(&generator.generate_tasks(images, &plans, GenerateOptions::default())?.images);
        let per = CHANNELS * s * s;
        out.extend(generated.chunks(per).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Uniform noise images in `[-1, 1]`.
pub fn noise_images(count: usize, size: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..CHANNELS * size * size).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

pub fn check_disjoint(split: &UnseenSplit) -> Result<()> {
    for (cat, cond) in &split.conditioning {
        let reference: BTreeSet<usize> = split.reference.get(cat).into_iter().flatten().copied().collect();
        if cond.iter().any(|i| reference.contains(i)) {
            return Err(Error::Validation(format!(
                "conditioning and reference images overlap in category {cat}"
            )));
        }
    }
    Ok(())
}

fn refs<'a>(v: &'a [Vec<f32>]) -> Vec<&'a [f32]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Result of [`eval_generation`]: the report plus the generated images per category.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub generated: BTreeMap<usize, Vec<Vec<f32>>>,
}

/// For every unseen category, generates `per_category` images conditioned on its conditioning
/// images, then scores FID against its reference images and LPIPS diversity of the generated
/// set.
pub fn eval_generation(
    generator: &Generator,
    dataset: &Dataset,
    split: &UnseenSplit,
    options: &EvalOptions,
    embedder: &dyn Embedder,
    device: &Device,
) -> Result<Evaluation> {
    if options.per_category < 2 {
        return Err(Error::Validation(format!(
            "per_category must be at least 2, got {}",
            options.per_category
        )));
    }
    check_disjoint(split)?;
    let s = dataset.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut rows = Vec::new();
    let mut generated = BTreeMap::new();
    for (&cat, cond) in &split.conditioning {
        let images = generate_images(
            generator,
            dataset,
            cat,
            cond,
            options.per_category,
            options.k,
            options.tasks_per_forward,
            &mut rng,
            device,
        )?;
        let reference: Vec<&[f32]> = split.reference[&cat]
            .iter()
            .map(|&i| dataset.category(cat).images[i].pixels.as_slice())
            .collect();
        let gen_refs = refs(&images);
        let fid_value = fid(&embedder.embed(&gen_refs, s)?, &embedder.embed(&reference, s)?)?;
        let lpips = lpips_diversity(&gen_refs, s, embedder, options.pairing)?;
        rows.push(CategoryMetrics {
            category: cat,
            name: dataset.category(cat).name.clone(),
            fid: fid_value,
            lpips,
            generated: images.len(),
            reference: reference.len(),
        });
        generated.insert(cat, images);
    }
    let metadata = BTreeMap::from([
        ("k".to_string(), options.k.to_string()),
        ("per_category".to_string(), options.per_category.to_string()),
        ("seed".to_string(), options.seed.to_string()),
        ("generator_hash".to_string(), crate::layers::param_hash(generator)),
    ]);
    Ok(Evaluation {
        report: MetricReport::new(rows, metadata)?,
        generated,
    })
}

/// Writes `metrics.csv`, `metrics_meta.txt` and one `grid_<category>.png` per category.
pub fn write_evaluation(eval: &Evaluation, dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    eval.report.write_csv(&dir.join("metrics.csv"))?;
    eval.report.write_metadata(&dir.join("metrics_meta.txt"))?;
    for (&cat, images) in &eval.generated {
        let shown: Vec<&[f32]> = images.iter().take(64).map(Vec::as_slice).collect();
        let name = sanitize(&dataset.category(cat).name);
        write_image_grid(&dir.join(format!("grid_{name}.png")), &shown, dataset.image_size, 8)?;
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub note: String,
}

/// FID per shot count, one checkpoint per K. Missing checkpoints become gaps.
pub fn shot_sweep(
    checkpoints: &[(usize, Option<PathBuf>)],
    dataset: &Dataset,
    split: &UnseenSplit,
    options: &EvalOptions,
    embedder: &dyn Embedder,
    device: &Device,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (k, path) in checkpoints {
        let row = match path {
            Some(p) if p.exists() => {
                let (generator, _, _) = load_generator(p, device)?;
                let opts = EvalOptions {
                    k: *k,
                    ..options.clone()
                };
                let eval = eval_generation(&generator, dataset, split, &opts, embedder, device)?;
                SweepRow {
                    k: *k,
                    fid: Some(eval.report.fid),
                    lpips: Some(eval.report.lpips),
                    note: p.display().to_string(),
                }
            }
            other => {
                log::warn!("no checkpoint for K = {k}; leaving a gap");
                SweepRow {
                    k: *k,
                    fid: None,
                    lpips: None,
                    note: match other {
                        Some(p) => format!("missing {}", p.display()),
                        None => "missing".to_string(),
                    },
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// `sweep.csv` (one row per K, empty cells for gaps) and `sweep.svg`.
pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["k", "fid", "lpips", "note"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([r.k.to_string(), opt(r.fid), opt(r.lpips), r.note.clone()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let points: Vec<(f64, Option<f64>)> = rows.iter().map(|r| (r.k as f64, r.fid)).collect();
    let path = dir.join("sweep.svg");
    fs::write(&path, line_plot_svg("FID under different shots", "K", "FID", &points))
        .map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unseen_split_sizes() {
        assert_eq!(unseen_parts(40), [10, 30]);
        assert_eq!(unseen_parts(100), [30, 70]);
        assert_eq!(unseen_parts(20), [6, 14]);
    }

    #[test]
    fn overlap_detected() {
        let split = UnseenSplit {
            conditioning: BTreeMap::from([(1, vec![0, 1])]),
            reference: BTreeMap::from([(1, vec![1, 2])]),
        };
        assert!(check_disjoint(&split).is_err());
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let a = noise_images(2, 4, 7);
        assert_eq!(a, noise_images(2, 4, 7));
        assert!(a.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }
}
