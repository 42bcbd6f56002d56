use burn::prelude::*;
use eqgan::data::synthetic::{write_dataset, SyntheticSpec};
use eqgan::data::{load_dataset, DatasetSpec, Partition};
use eqgan::discriminator::DiscriminatorConfig;
use eqgan::fusion::{local_fuse, BranchFeatures, FeatureEqualizationFusion, FusionPlan};
use eqgan::generator::GeneratorConfig;
use eqgan::layers::{to_vec, ParamInit};
use eqgan::Error;

#[test]
fn discriminator_scores_a_full_size_batch() {
    let device = Device::flex();
    let d = DiscriminatorConfig::new(128, 85).init(&device).unwrap();
    let x = Tensor::<4>::random([8, 3, 128, 128], burn::tensor::Distribution::Uniform(-1.0, 1.0), &device);
    let out = d.discriminate(x).unwrap();
    assert_eq!(out.realness.dims(), [8]);
    assert_eq!(out.class_logits.dims(), [8, 85]);
    assert!(to_vec(&out.class_logits).iter().all(|v| v.is_finite()));
    let wrong = Tensor::<4>::zeros([2, 3, 64, 64], &device);
    assert!(matches!(d.discriminate(wrong), Err(Error::Validation(_))));
}

#[test]
fn semantic_fuse_is_multi_scale_then_local_fuse() {
    let device = Device::flex();
    let fusion = FeatureEqualizationFusion::new(&[4; 5], 6, true, true, &mut ParamInit::new(3, &device));
    let branches = BranchFeatures {
        texture: Tensor::random([3, 6, 4, 4], burn::tensor::Distribution::Default, &device),
        structure: Tensor::random([3, 6, 2, 2], burn::tensor::Distribution::Default, &device),
    };
    let plan = FusionPlan::new(vec![0.2, 0.5, 0.3], 1).unwrap();
    let got = fusion.semantic_fuse(&branches, &plan).unwrap();

    let (te_ms, st_ms) = fusion.multi_scale_modules();
    let (te, te_plan) = local_fuse(&te_ms.forward(branches.texture.clone()), &plan).unwrap();
    let (st, st_plan) = local_fuse(&st_ms.forward(branches.structure.clone()), &plan).unwrap();
    assert_eq!(to_vec(&got.texture), to_vec(&te));
    assert_eq!(to_vec(&got.structure), to_vec(&st));
    assert_eq!(got.texture_plan, te_plan);
    assert_eq!(got.structure_plan, st_plan);
}

#[test]
fn generation_depends_on_every_reference_with_weight() {
    let device = Device::flex();
    let g = GeneratorConfig {
        channels: vec![8, 8, 16, 16, 16],
        branch_channels: 8,
        image_size: 32,
        ..Default::default()
    }
    .init(&device)
    .unwrap();
    let ds = SyntheticSpec::new(3, 5, 32).build().unwrap();
    let batch = ds.batch(0, &[0, 1, 2]);
    let base_only = g.generate(&batch, &FusionPlan::one_hot(3, 0).unwrap(), &device).unwrap();
    let mixed = g.generate(&batch, &FusionPlan::new(vec![0.4, 0.3, 0.3], 0).unwrap(), &device).unwrap();
    assert_eq!(base_only.image.dims(), [3, 32, 32]);
    assert_ne!(to_vec(&base_only.image), to_vec(&mixed.image));
    assert!(to_vec(&mixed.image).iter().all(|v| (-1.0..=1.0).contains(v)));
    let plan = &mixed.fusion_plan;
    assert_eq!(plan.grid, Some([1, 1]));
    assert_eq!(plan.match_indices.as_ref().unwrap().len(), 2);
}

#[test]
fn folder_datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let source = SyntheticSpec::new(5, 6, 16).build().unwrap();
    write_dataset(&source, dir.path()).unwrap();

    let spec = DatasetSpec {
        root_path: dir.path().to_path_buf(),
        total_categories: 5,
        seen_count: 4,
        unseen_count: 1,
        images_per_category: 6,
        image_size: 16,
    };
    let a = load_dataset(&spec, 9).unwrap();
    let b = load_dataset(&spec, 9).unwrap();
    assert_eq!(a.partition(Partition::Seen), b.partition(Partition::Seen));
    assert_eq!(a.partition(Partition::Seen).len(), 4);
    assert_eq!(a.partition(Partition::Unseen).len(), 1);

    let short = DatasetSpec { images_per_category: 7, ..spec.clone() };
    let err = load_dataset(&short, 9).unwrap_err().to_string();
    assert!(err.contains("shape_"), "{err}");
    let inconsistent = DatasetSpec { seen_count: 3, ..spec };
    assert!(load_dataset(&inconsistent, 9).is_err());
}
