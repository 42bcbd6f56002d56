//! Training objectives. Every L1 distance is a mean over elements.

use burn::prelude::*;
use burn::tensor::activation::{log_softmax, relu};

use crate::data::{ImageBatch, CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::FusionPlan;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls_g: f64,
    pub rec: f64,
    pub con: f64,
    pub cls_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls_g: 1.0,
            rec: 0.5,
            con: 1.0,
            cls_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_cls_g", self.cls_g),
            ("lambda_rec", self.rec),
            ("lambda_con", self.con),
            ("lambda_cls_d", self.cls_d),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} must be a finite non-negative weight, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference of two same-shaped tensors.
pub fn l1_mean<const D: usize>(a: Tensor<D>, b: Tensor<D>) -> Result<Tensor<1>> {
    if a.dims() != b.dims() {
        return Err(Error::Validation(format!(
            "L1 operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b).abs().mean())
}

/// L1 between the equalized features and the third decoder block's output.
pub fn consistent_equalization_loss<const D: usize>(f_eq: Tensor<D>, f_h3: Tensor<D>) -> Result<Tensor<1>> {
    l1_mean(f_eq, f_h3)
}

/// Replays a plan's feature-level matches on the task images.
///
/// `images` holds K CHW images of side `size`. Each feature cell covers a `size / grid` pixel
/// block; a base pixel takes the pixel at the same offset inside the matched block of every
/// reference, mixed with the plan's weights.
pub fn replay_target(images: &[f32], size: usize, plan: &FusionPlan) -> Result<Vec<f32>> {
    let k = plan.k();
    let n = CHANNELS * size * size;
    if images.len() != k * n {
        return Err(Error::Shape(format!(
            "{} values do not hold {k} images of side {size}",
            images.len()
        )));
    }
    plan.validate(k)?;
    let (matches, [gh, gw]) = match (&plan.match_indices, plan.grid) {
        (Some(m), Some(g)) => (m, g),
        _ => {
            return Err(Error::Usage(
                "reconstruction target needs a plan with recorded matches".into(),
            ))
        }
    };
    if gh == 0 || gw == 0 || size % gh != 0 || size % gw != 0 || matches.len() + 1 != k {
        return Err(Error::Shape(format!(
            "match grid {gh}x{gw} with {} references does not tile {size}x{size} images of a {k}-shot task",
            matches.len()
        )));
    }
    let (bh, bw) = (size / gh, size / gw);
    let plane = size * size;
    let base = &images[plan.base_index * n..(plan.base_index + 1) * n];
    let mut target = base.to_vec();
    for (r, m) in plan.references().zip(matches) {
        let a = plan.alpha[r];
        if a == 0.0 {
            continue;
        }
        if m.len() != gh * gw || m.iter().any(|&j| j >= gh * gw) {
            return Err(Error::Validation(format!("bad match indices for reference {r}")));
        }
        let reference = &images[r * n..(r + 1) * n];
        for y in 0..size {
            for x in 0..size {
                let j = m[(y / bh) * gw + x / bw];
                let src = ((j / gw) * bh + y % bh) * size + (j % gw) * bw + x % bw;
                for c in 0..CHANNELS {
                    let p = c * plane + y * size + x;
                    target[p] += a * (reference[c * plane + src] - base[p]);
                }
            }
        }
    }
    Ok(target)
}

/// L1 between a generated image (`3 x H x W`) and the replayed fusion of its task images.
pub fn local_reconstruction_loss(
    generated: Tensor<3>,
    batch: &ImageBatch,
    plan: &FusionPlan,
) -> Result<Tensor<1>> {
    let target = replay_target(&batch.images, batch.image_size, plan)?;
    let s = batch.image_size;
    let target = Tensor::from_data(TensorData::new(target, [CHANNELS, s, s]), &generated.device());
    l1_mean(generated, target)
}

/// `mean(max(0, 1 - D(x))) + mean(max(0, 1 + D(x_hat)))`.
pub fn hinge_d_loss(real_scores: Tensor<1>, fake_scores: Tensor<1>) -> Tensor<1> {
    relu(real_scores.neg().add_scalar(1.0)).mean() + relu(fake_scores.add_scalar(1.0)).mean()
}

/// `-mean(D(x_hat))`.
pub fn hinge_g_loss(fake_scores: Tensor<1>) -> Tensor<1> {
    fake_scores.mean().neg()
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits` (`N x C`).
pub fn classification_loss(logits: Tensor<2>, labels: &[usize]) -> Result<Tensor<1>> {
    let [n, c] = logits.dims();
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let idx: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    let idx = Tensor::<2, Int>::from_data(TensorData::new(idx, [n, 1]), &logits.device());
    Ok(log_softmax(logits, 1).gather(1, idx).mean().neg())
}

/// Generator loss terms. `con` is absent when the consistency term is ablated.
#[derive(Debug, Clone)]
pub struct GeneratorLosses {
    pub adv: Tensor<1>,
    pub cls: Tensor<1>,
    pub rec: Tensor<1>,
    pub con: Option<Tensor<1>>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLosses {
    pub adv: Tensor<1>,
    pub cls: Tensor<1>,
}

pub fn total_g_loss(parts: &GeneratorLosses, weights: &LossWeights) -> Result<Tensor<1>> {
    weights.validate()?;
    let mut total = parts.adv.clone()
        + parts.cls.clone().mul_scalar(weights.cls_g)
        + parts.rec.clone().mul_scalar(weights.rec);
    if let Some(con) = &parts.con {
        total = total + con.clone().mul_scalar(weights.con);
    }
    Ok(total)
}

pub fn total_d_loss(parts: &DiscriminatorLosses, weights: &LossWeights) -> Result<Tensor<1>> {
    weights.validate()?;
    Ok(parts.adv.clone() + parts.cls.clone().mul_scalar(weights.cls_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::scalar;

    fn t1(v: &[f32]) -> Tensor<1> {
        Tensor::from_data(TensorData::new(v.to_vec(), [v.len()]), &Device::flex())
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.cls_g, w.rec, w.con, w.cls_d), (1.0, 0.5, 1.0, 1.0));
        assert!(LossWeights { rec: -0.1, ..w }.validate().is_err());
    }

    #[test]
    fn l1_shape_mismatch() {
        let d = Device::flex();
        assert!(matches!(
            consistent_equalization_loss(Tensor::<2>::zeros([2, 2], &d), Tensor::zeros([2, 3], &d)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn label_validation() {
        let logits = Tensor::<2>::zeros([2, 3], &Device::flex());
        assert!(classification_loss(logits.clone(), &[0, 3]).is_err());
        assert!(classification_loss(logits, &[0]).is_err());
    }

    #[test]
    fn ablated_consistency_term_is_excluded() {
        let parts = GeneratorLosses {
            adv: t1(&[1.0]),
            cls: t1(&[2.0]),
            rec: t1(&[4.0]),
            con: None,
        };
        assert_eq!(scalar(&total_g_loss(&parts, &LossWeights::default()).unwrap()), 5.0);
    }

    #[test]
    fn replay_requires_matches() {
        let plan = FusionPlan::one_hot(2, 0).unwrap();
        let images = vec![0.0; 2 * 3 * 4 * 4];
        assert!(matches!(replay_target(&images, 4, &plan), Err(Error::Usage(_))));
    }

    #[test]
    fn replay_moves_matched_blocks() {
        // 2 images of side 2 on a 2x2 grid: base pixel i takes reference pixel m[i].
        let base: Vec<f32> = vec![0.0; 12];
        let reference: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let images = [base, reference].concat();
        let plan = FusionPlan::new(vec![0.0, 1.0], 0)
            .unwrap()
            .with_matches(vec![vec![3, 2, 1, 0]], [2, 2]);
        let t = replay_target(&images, 2, &plan).unwrap();
        assert_eq!(t, vec![3.0, 2.0, 1.0, 0.0, 7.0, 6.0, 5.0, 4.0, 11.0, 10.0, 9.0, 8.0]);
    }
}
