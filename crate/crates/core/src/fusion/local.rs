use burn::prelude::*;

use super::plan::FusionPlan;
use super::similarity::{best_matches, cosine_similarity_map};
use crate::error::{Error, Result};
use crate::layers::to_vec;

/// Fuses the K features of one task into the base feature.
///
/// Each base position is matched to its most similar position in every reference, and the
/// matched vectors are mixed with the plan's weights. The returned plan carries the matches.
/// Matching is hard, so gradients flow through the gathered values only.
pub fn local_fuse(features: &Tensor<4>, plan: &FusionPlan) -> Result<(Tensor<3>, FusionPlan)> {
    let [k, c, h, w] = features.dims();
    check(k, plan)?;
    let positions = h * w;
    let host = to_vec(&features.clone().detach());
    let slice = |i: usize| &host[i * c * positions..(i + 1) * c * positions];
    let base = slice(plan.base_index);
    let matches: Vec<Vec<usize>> = plan
        .references()
        .map(|r| best_matches(&cosine_similarity_map(base, slice(r), c, positions), positions))
        .collect();
    let plan_out = plan.with_matches(matches, [h, w]);
    let fused = local_fuse_with_matches(features, &plan_out)?;
    Ok((fused, plan_out))
}

/// Replays a plan's recorded matches on `features` (K x c x h x w).
///
/// Computed as `base + sum_r alpha_r (ref_r[match] - base)`, which equals the convex mix and
/// returns the base bit-exactly when no weight falls on a reference vector that differs from it.
pub fn local_fuse_with_matches(features: &Tensor<4>, plan: &FusionPlan) -> Result<Tensor<3>> {
    let [k, c, h, w] = features.dims();
    check(k, plan)?;
    let matches = plan
        .match_indices
        .as_ref()
        .ok_or_else(|| Error::Usage("fusion plan has no recorded matches".into()))?;
    if plan.grid != Some([h, w]) || matches.len() != k - 1 {
        return Err(Error::Shape(format!(
            "plan matches {:?} x {} references do not fit features {:?}",
            plan.grid,
            matches.len(),
            features.dims()
        )));
    }
    let positions = h * w;
    let device = features.device();
    let flat = |i: usize| {
        features
            .clone()
            .narrow(0, i, 1)
            .reshape([c, positions])
    };
    let base = flat(plan.base_index);
    let mut fused = base.clone();
    for (r, idx) in plan.references().zip(matches) {
        let a = plan.alpha[r];
        if a == 0.0 {
            continue;
        }
        if idx.len() != positions || idx.iter().any(|&j| j >= positions) {
            return Err(Error::Validation(format!(
                "match indices for reference {r} must be {positions} positions below {positions}"
            )));
        }
        let idx: Vec<i64> = idx.iter().map(|&j| j as i64).collect();
        let idx = Tensor::<1, Int>::from_data(TensorData::new(idx, [positions]), &device);
        let gathered = flat(r).select(1, idx);
        fused = fused + (gathered - base.clone()).mul_scalar(a);
    }
    Ok(fused.reshape([c, h, w]))
}

fn check(k: usize, plan: &FusionPlan) -> Result<()> {
    if k < 2 {
        return Err(Error::Validation(format!("fusion needs K >= 2, got {k}")));
    }
    plan.validate(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn device() -> Device {
        Device::flex()
    }

    fn random_features(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> (Vec<f32>, Tensor<4>) {
        let n = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_data(TensorData::new(v.clone(), shape), &device());
        (v, t)
    }

    #[test]
    fn one_hot_plan_returns_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (v, t) = random_features(&mut rng, [3, 4, 3, 3]);
        let plan = FusionPlan::one_hot(3, 1).unwrap();
        let (fused, out) = local_fuse(&t, &plan).unwrap();
        assert_eq!(to_vec(&fused), v[36..72].to_vec());
        assert_eq!(out.match_indices.unwrap().len(), 2);
    }

    #[test]
    fn rejects_invalid_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, t) = random_features(&mut rng, [3, 2, 2, 2]);
        let bad = FusionPlan {
            alpha: vec![0.5, 0.5, 0.5],
            base_index: 0,
            match_indices: None,
            grid: None,
        };
        assert!(matches!(local_fuse(&t, &bad), Err(Error::Validation(_))));
        let two = FusionPlan::one_hot(2, 0).unwrap();
        assert!(local_fuse(&t, &two).is_err());
        let (_, single) = random_features(&mut rng, [1, 2, 2, 2]);
        assert!(local_fuse(&single, &FusionPlan::one_hot(1, 0).unwrap()).is_err());
    }

    #[test]
    fn replay_without_matches_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, t) = random_features(&mut rng, [2, 2, 2, 2]);
        let plan = FusionPlan::one_hot(2, 0).unwrap();
        assert!(matches!(
            local_fuse_with_matches(&t, &plan),
            Err(Error::Usage(_))
        ));
    }
}
