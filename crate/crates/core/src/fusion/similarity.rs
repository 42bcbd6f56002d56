use burn::prelude::*;

use crate::error::{Error, Result};
use crate::layers::to_vec;

/// Norm floor in the cosine similarity denominator.
pub const SIMILARITY_EPS: f64 = 1e-8;

/// Dense `positions x positions` similarity between base and reference positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub positions: usize,
    /// Row-major: entry `(i, j)` at `i * positions + j`.
    pub values: Vec<f32>,
}

impl SimilarityMap {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.positions + j]
    }

    pub fn best_matches(&self) -> Vec<usize> {
        best_matches(&self.values, self.positions)
    }
}

/// Cosine similarity between every base position `i` and reference position `j`, with
/// channel-major inputs (`channels x positions`). Norms below [`SIMILARITY_EPS`] are clamped.
pub fn cosine_similarity_map(
    base: &[f32],
    reference: &[f32],
    channels: usize,
    positions: usize,
) -> Vec<f32> {
    let norms = |x: &[f32]| -> Vec<f64> {
        let mut n = vec![0.0f64; positions];
        for c in 0..channels {
            for (p, acc) in n.iter_mut().enumerate() {
                let v = x[c * positions + p] as f64;
                *acc += v * v;
            }
        }
        n.into_iter().map(|s| s.sqrt().max(SIMILARITY_EPS)).collect()
    };
    let base_norm = norms(base);
    let ref_norm = norms(reference);

    let mut dot = vec![0.0f64; positions * positions];
    for c in 0..channels {
        let b = &base[c * positions..(c + 1) * positions];
        let r = &reference[c * positions..(c + 1) * positions];
        for (i, &bi) in b.iter().enumerate() {
            let bi = bi as f64;
            let row = &mut dot[i * positions..(i + 1) * positions];
            for (acc, &rj) in row.iter_mut().zip(r) {
                *acc += bi * rj as f64;
            }
        }
    }
    dot.iter()
        .enumerate()
        .map(|(idx, &d)| {
            let (i, j) = (idx / positions, idx % positions);
            (d / (base_norm[i] * ref_norm[j])).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Row-wise argmax; ties go to the lowest index.
pub fn best_matches(similarity: &[f32], positions: usize) -> Vec<usize> {
    similarity
        .chunks(positions)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Similarity map between two `c x h x w` feature maps.
pub fn similarity_map(f_base: &Tensor<3>, f_ref: &Tensor<3>) -> Result<SimilarityMap> {
    let [c, h, w] = f_base.dims();
    if f_ref.dims() != [c, h, w] {
        return Err(Error::Shape(format!(
            "similarity inputs differ: {:?} vs {:?}",
            f_base.dims(),
            f_ref.dims()
        )));
    }
    Ok(SimilarityMap {
        positions: h * w,
        values: cosine_similarity_map(&to_vec(f_base), &to_vec(f_ref), c, h * w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_unit_diagonal() {
        let x = [1.0, -2.0, 0.5, 3.0, 0.1, 4.0, -1.0, 2.0];
        let sim = cosine_similarity_map(&x, &x, 2, 4);
        for i in 0..4 {
            assert!((sim[i * 4 + i] - 1.0).abs() < 1e-6);
        }
        assert!(sim.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        // channel-major: position 0 = (1, 0), position 1 = (0, 1)
        let base = [1.0, 0.0, 0.0, 1.0];
        let sim = cosine_similarity_map(&base, &base, 2, 2);
        assert_eq!(sim[1], 0.0);
        assert_eq!(sim[2], 0.0);
    }

    #[test]
    fn zero_vectors_do_not_produce_nan() {
        let base = [0.0, 0.0, 0.0, 0.0];
        let sim = cosine_similarity_map(&base, &[1.0, 2.0, 3.0, 4.0], 2, 2);
        assert!(sim.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(best_matches(&[0.5, 0.9, 0.9, 0.1, 0.3, 0.3], 3), vec![1, 1]);
    }
}
