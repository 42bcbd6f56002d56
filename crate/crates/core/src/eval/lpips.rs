use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::embedder::{Embedder, FeatureMap};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-10;

/// Which image pairs enter the diversity average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Every unordered pair.
    Exhaustive,
    /// `count` pairs of distinct images drawn with replacement from a seeded stream.
    Sampled { count: usize, seed: u64 },
}

pub fn pair_indices(n: usize, pairing: Pairing) -> Vec<(usize, usize)> {
    match pairing {
        Pairing::Exhaustive => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        Pairing::Sampled { count, seed } => {
            if n < 2 {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let mut j = rng.random_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    (i.min(j), i.max(j))
                })
                .collect()
        }
    }
}

fn unit_normalized(m: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0f64; m.values.len()];
    for p in 0..m.positions {
        let norm = (0..m.channels)
            .map(|c| (m.values[c * m.positions + p] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            + NORM_EPS;
        for c in 0..m.channels {
            out[c * m.positions + p] = m.values[c * m.positions + p] as f64 / norm;
        }
    }
    out
}

/// Perceptual distance: per layer, channel vectors are unit-normalized at every position, and
/// the squared differences are summed over channels, averaged over positions and summed over
/// layers.
pub fn perceptual_distance(a: &[FeatureMap], b: &[FeatureMap]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(ma, mb)| {
            let (na, nb) = (unit_normalized(ma), unit_normalized(mb));
            let sq: f64 = na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum();
            sq / ma.positions as f64
        })
        .sum()
}

/// Mean pairwise perceptual distance over a set of generated images (higher is more diverse).
pub fn lpips_diversity(
    images: &[&[f32]],
    size: usize,
    embedder: &dyn Embedder,
    pairing: Pairing,
) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Validation(format!(
            "diversity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let maps = embedder.feature_maps(images, size)?;
    let pairs = pair_indices(images.len(), pairing);
    if pairs.is_empty() {
        return Err(Error::Validation("no image pairs to compare".into()));
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| perceptual_distance(&maps[i], &maps[j]))
        .sum();
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::embedder::RandomConvEmbedder;

    #[test]
    fn pair_counts() {
        for n in 0..8 {
            assert_eq!(pair_indices(n, Pairing::Exhaustive).len(), n * n.saturating_sub(1) / 2);
        }
        let p = pair_indices(5, Pairing::Sampled { count: 30, seed: 1 });
        assert_eq!(p.len(), 30);
        assert!(p.iter().all(|&(i, j)| i < j && j < 5));
        assert_eq!(p, pair_indices(5, Pairing::Sampled { count: 30, seed: 1 }));
    }

    #[test]
    fn identical_images_have_zero_diversity() {
        let e = RandomConvEmbedder::default();
        let img: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i * 31) % 17) as f32 / 8.5 - 1.0).collect();
        let v = lpips_diversity(&[&img, &img, &img], 16, &e, Pairing::Exhaustive).unwrap();
        assert_eq!(v, 0.0);
        assert!(lpips_diversity(&[&img], 16, &e, Pairing::Exhaustive).is_err());
    }

    #[test]
    fn order_invariant_and_positive() {
        let e = RandomConvEmbedder::default();
        let imgs: Vec<Vec<f32>> = (0..4)
            .map(|s| (0..3 * 16 * 16).map(|i| (((i + 1) * (s + 3) * 7) % 23) as f32 / 11.5 - 1.0).collect())
            .collect();
        let fwd: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let rev: Vec<&[f32]> = imgs.iter().rev().map(|v| v.as_slice()).collect();
        let a = lpips_diversity(&fwd, 16, &e, Pairing::Exhaustive).unwrap();
        let b = lpips_diversity(&rev, 16, &e, Pairing::Exhaustive).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-9);
    }
}
