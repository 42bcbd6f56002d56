use std::ops::Range;

use burn::nn::conv::Conv2d;
use burn::prelude::*;

use super::local::local_fuse;
use super::multiscale::MultiScale;
use super::plan::FusionPlan;
use crate::error::{Error, Result};
use crate::layers::{resize_nearest, ParamInit};

pub const PYRAMID_LEVELS: usize = 5;
pub const TEXTURE_LEVELS: Range<usize> = 0..3;
pub const STRUCTURE_LEVELS: Range<usize> = 3..5;

/// Texture levels are resampled down to the level-3 scale.
const DOWN_FACTORS: [usize; 3] = [4, 2, 1];
/// Structure levels are resampled up to the level-4 scale.
const UP_FACTORS: [usize; 2] = [1, 2];
/// The equalized map lives at the level-2 scale, which is also the third decoder block's.
const EQ_LEVEL: usize = 1;

/// Encoder outputs E_1..E_5 for a stack of images, shallow first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor<4>>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor<4>>) -> Result<Self> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(Error::Shape(format!(
                "feature pyramid needs {PYRAMID_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        let k = levels[0].dims()[0];
        for pair in levels.windows(2) {
            let [ka, _, ha, wa] = pair[0].dims();
            let [kb, _, hb, wb] = pair[1].dims();
            if ka != k || kb != k {
                return Err(Error::Shape("pyramid levels disagree on K".into()));
            }
            if hb >= ha || wb >= wa {
                return Err(Error::Shape(format!(
                    "pyramid spatial size must shrink with depth: {ha}x{wa} then {hb}x{wb}"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn k(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn level_sizes(&self) -> Vec<[usize; 2]> {
        self.levels
            .iter()
            .map(|l| {
                let [_, _, h, w] = l.dims();
                [h, w]
            })
            .collect()
    }

    /// Images `start..start + len` of every level.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.clone().narrow(0, start, len)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub texture: Tensor<4>,
    pub structure: Tensor<4>,
}

/// Fused texture and structure of one task, with the plans (and matches) that produced them.
#[derive(Debug, Clone)]
pub struct SemanticFusion {
    pub texture: Tensor<3>,
    pub structure: Tensor<3>,
    pub texture_plan: FusionPlan,
    pub structure_plan: FusionPlan,
}

/// `f_eq` is `B x c_eq x h x w`; `per_level[i]` matches encoder level `i` in size and width.
#[derive(Debug, Clone)]
pub struct EqualizedFeatures {
    pub f_eq: Tensor<4>,
    pub per_level: Vec<Tensor<4>>,
}

/// Learned resampling of the pyramid into the two branches.
#[derive(Module, Debug)]
pub struct Reorganize {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
}

impl Reorganize {
    pub fn new(channels: &[usize], branch: usize, init: &mut ParamInit) -> Self {
        let down = TEXTURE_LEVELS
            .zip(DOWN_FACTORS)
            .map(|(l, f)| match f {
                1 => init.conv2d([channels[l], branch], 3, 1, 1, true),
                f => init.conv2d([channels[l], branch], f, f, 0, true),
            })
            .collect();
        let up = STRUCTURE_LEVELS
            .map(|l| init.conv2d([channels[l], branch], 3, 1, 1, true))
            .collect();
        Self { down, up }
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<BranchFeatures> {
        let texture = TEXTURE_LEVELS
            .zip(&self.down)
            .map(|(l, conv)| conv.forward(pyramid.levels[l].clone()));
        let structure = STRUCTURE_LEVELS
            .zip(UP_FACTORS)
            .zip(&self.up)
            .map(|((l, f), conv)| {
                let x = pyramid.levels[l].clone();
                let [_, _, h, w] = x.dims();
                conv.forward(resize_nearest(x, [h * f, w * f]))
            });
        Ok(BranchFeatures {
            texture: sum_same_shape(texture, "texture")?,
            structure: sum_same_shape(structure, "structure")?,
        })
    }
}

fn sum_same_shape(terms: impl Iterator<Item = Tensor<4>>, branch: &str) -> Result<Tensor<4>> {
    let mut acc: Option<Tensor<4>> = None;
    for t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) if a.dims() == t.dims() => a + t,
            Some(a) => {
                return Err(Error::Shape(format!(
                    "{branch} terms disagree after resampling: {:?} vs {:?}",
                    a.dims(),
                    t.dims()
                )))
            }
        });
    }
    acc.ok_or_else(|| Error::Shape(format!("empty {branch} branch")))
}

/// 1x1 merge of the fused branches and per-level 1x1 projections of the result.
#[derive(Module, Debug)]
pub struct Equalizer {
    project: Conv2d,
    per_level: Vec<Conv2d>,
}

impl Equalizer {
    pub fn new(channels: &[usize], branch: usize, init: &mut ParamInit) -> Self {
        let eq = channels[EQ_LEVEL];
        Self {
            project: init.conv2d([2 * branch, eq], 1, 1, 0, true),
            per_level: channels
                .iter()
                .map(|&c| init.conv2d([eq, c], 1, 1, 0, true))
                .collect(),
        }
    }

    /// `texture` and `structure` are `B x branch x h x w` at their branch scales.
    /// With `levels_live` false the per-level outputs are zero tensors.
    pub fn forward(
        &self,
        texture: Tensor<4>,
        structure: Tensor<4>,
        level_sizes: &[[usize; 2]],
        levels_live: bool,
    ) -> Result<EqualizedFeatures> {
        if level_sizes.len() != PYRAMID_LEVELS {
            return Err(Error::Shape(format!(
                "equalization needs {PYRAMID_LEVELS} level sizes"
            )));
        }
        let target = level_sizes[EQ_LEVEL];
        let merged = Tensor::cat(
            vec![
                resize_nearest(texture, target),
                resize_nearest(structure, target),
            ],
            1,
        );
        let f_eq = self.project.forward(merged);
        let per_level = self
            .per_level
            .iter()
            .zip(level_sizes)
            .map(|(conv, &size)| {
                let y = conv.forward(resize_nearest(f_eq.clone(), size));
                if levels_live {
                    y
                } else {
                    Tensor::zeros(y.dims(), &y.device())
                }
            })
            .collect();
        Ok(EqualizedFeatures { f_eq, per_level })
    }
}

/// Reorganization, multi-scale representation, semantic fusion and equalization.
#[derive(Module, Debug)]
pub struct FeatureEqualizationFusion {
    reorganize: Reorganize,
    texture_ms: MultiScale,
    structure_ms: MultiScale,
    equalizer: Equalizer,
    texture_skips: bool,
    structure_skips: bool,
}

impl FeatureEqualizationFusion {
    pub fn new(
        channels: &[usize],
        branch: usize,
        texture_skips: bool,
        structure_skips: bool,
        init: &mut ParamInit,
    ) -> Self {
        Self {
            reorganize: Reorganize::new(channels, branch, init),
            texture_ms: MultiScale::new(branch, init),
            structure_ms: MultiScale::new(branch, init),
            equalizer: Equalizer::new(channels, branch, init),
            texture_skips,
            structure_skips,
        }
    }

    pub fn reorganize(&self, pyramid: &FeaturePyramid) -> Result<BranchFeatures> {
        self.reorganize.forward(pyramid)
    }

    /// Texture and structure multi-scale modules.
    pub fn multi_scale_modules(&self) -> (&MultiScale, &MultiScale) {
        (&self.texture_ms, &self.structure_ms)
    }

    pub fn multi_scale(&self, branches: &BranchFeatures) -> BranchFeatures {
        BranchFeatures {
            texture: self.texture_ms.forward(branches.texture.clone()),
            structure: self.structure_ms.forward(branches.structure.clone()),
        }
    }

    /// Multi-scale representation of both branches of one task, then local fusion of each with
    /// the shared plan.
    pub fn semantic_fuse(&self, branches: &BranchFeatures, plan: &FusionPlan) -> Result<SemanticFusion> {
        fuse_branches(&self.multi_scale(branches), plan)
    }

    /// Batched merge of fused branches (`B x branch x h x w`), honoring the ablation flags.
    pub fn equalize(
        &self,
        texture: Tensor<4>,
        structure: Tensor<4>,
        level_sizes: &[[usize; 2]],
    ) -> Result<EqualizedFeatures> {
        let texture = if self.texture_skips {
            texture
        } else {
            Tensor::zeros(texture.dims(), &texture.device())
        };
        let structure = if self.structure_skips {
            structure
        } else {
            Tensor::zeros(structure.dims(), &structure.device())
        };
        self.equalizer.forward(
            texture,
            structure,
            level_sizes,
            self.texture_skips || self.structure_skips,
        )
    }

    /// Runs the whole module on a pyramid holding `plans.len()` consecutive tasks of K images.
    pub fn forward_tasks(
        &self,
        pyramid: &FeaturePyramid,
        plans: &[FusionPlan],
    ) -> Result<(EqualizedFeatures, Vec<SemanticFusion>)> {
        let n = pyramid.k();
        if plans.is_empty() || n % plans.len() != 0 {
            return Err(Error::Shape(format!(
                "{n} images cannot be split into {} tasks",
                plans.len()
            )));
        }
        let k = n / plans.len();
        let ms = self.multi_scale(&self.reorganize(pyramid)?);
        let fused = plans
            .iter()
            .enumerate()
            .map(|(t, plan)| {
                let task = BranchFeatures {
                    texture: ms.texture.clone().narrow(0, t * k, k),
                    structure: ms.structure.clone().narrow(0, t * k, k),
                };
                fuse_branches(&task, plan)
            })
            .collect::<Result<Vec<_>>>()?;
        let texture = Tensor::stack(fused.iter().map(|f| f.texture.clone()).collect(), 0);
        let structure = Tensor::stack(fused.iter().map(|f| f.structure.clone()).collect(), 0);
        let eq = self.equalize(texture, structure, &pyramid.level_sizes())?;
        Ok((eq, fused))
    }
}

fn fuse_branches(ms: &BranchFeatures, plan: &FusionPlan) -> Result<SemanticFusion> {
    let (texture, texture_plan) = local_fuse(&ms.texture, plan)?;
    let (structure, structure_plan) = local_fuse(&ms.structure, plan)?;
    Ok(SemanticFusion {
        texture,
        structure,
        texture_plan,
        structure_plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: [usize; 5] = [32, 64, 128, 256, 512];

    fn pyramid(k: usize, size: usize, channels: &[usize], device: &Device) -> FeaturePyramid {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = size >> (i + 1);
                Tensor::<4>::ones([k, c, s, s], device)
            })
            .collect();
        FeaturePyramid::new(levels).unwrap()
    }

    #[test]
    fn branch_shapes_follow_scale_plan() {
        // Oracle by shape propagation: level i of a 128 input is 128 / 2^(i+1); the texture
        // target is the level-3 scale (16), the structure target the level-4 scale (8).
        let device = Device::flex();
        let p = pyramid(3, 128, &PLAN, &device);
        let sizes: Vec<usize> = (0..5).map(|i| 128 / 2usize.pow(i + 1)).collect();
        assert_eq!(p.level_sizes(), sizes.iter().map(|&s| [s, s]).collect::<Vec<_>>());
        let fusion = FeatureEqualizationFusion::new(&PLAN, 16, true, true, &mut ParamInit::new(0, &device));
        let b = fusion.reorganize(&p).unwrap();
        assert_eq!(b.texture.dims(), [3, 16, sizes[2], sizes[2]]);
        assert_eq!(b.structure.dims(), [3, 16, sizes[3], sizes[3]]);
    }

    #[test]
    fn malformed_pyramids_rejected() {
        let device = Device::flex();
        let p = pyramid(2, 64, &[4, 4, 4, 4, 4], &device);
        assert!(FeaturePyramid::new(p.levels[..4].to_vec()).is_err());
        let mut flat = p.levels.clone();
        flat[2] = flat[1].clone();
        assert!(FeaturePyramid::new(flat).is_err());
    }

    #[test]
    fn equalized_shapes() {
        let device = Device::flex();
        let channels = [4, 6, 8, 10, 12];
        let p = pyramid(6, 64, &channels, &device);
        let fusion = FeatureEqualizationFusion::new(&channels, 5, true, true, &mut ParamInit::new(1, &device));
        let plans = vec![FusionPlan::one_hot(3, 0).unwrap(), FusionPlan::one_hot(3, 2).unwrap()];
        let (eq, fused) = fusion.forward_tasks(&p, &plans).unwrap();
        // decoder block 3 output scale is 64 / 4
        assert_eq!(eq.f_eq.dims(), [2, 6, 16, 16]);
        for (l, (t, size)) in eq.per_level.iter().zip(p.level_sizes()).enumerate() {
            assert_eq!(t.dims(), [2, channels[l], size[0], size[1]]);
        }
        assert_eq!(fused[0].texture.dims(), [5, 8, 8]);
        assert_eq!(fused[0].structure.dims(), [5, 4, 4]);
    }
}
