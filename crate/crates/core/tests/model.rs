use amped::data::Image;
use amped::model::{load_checkpoint, save_checkpoint, PruneMode, SedConfig, SedModel, Upsample};
use amped::train::gradcheck_config;
use amped::Matrix;

fn random_heads(model: &mut SedModel<f32>) {
    let c = model.config().channels;
    for s in 0..model.config().schedule.len() {
        let id = model.params().id(&format!("heads.{s}.weight")).unwrap();
        let w = Matrix::from_fn(c, 1, |r, _| ((r * 7 + s * 3) % 5) as f32 * 0.3 - 0.6);
        *model.params_mut().get_mut(id) = w;
    }
}

#[test]
fn construction_and_forward_are_deterministic() {
    let cfg = SedConfig::micro();
    let a = SedModel::<f32>::new(cfg.clone(), 4).unwrap();
    let b = SedModel::<f32>::new(cfg.clone(), 4).unwrap();
    let c = SedModel::<f32>::new(cfg.clone(), 5).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    let img = Image::random(64, 64, 1, 9);
    let (ma, ta) = a.forward(&img, &PruneMode::Schedule).unwrap();
    let (mb, tb) = b.forward(&img, &PruneMode::Schedule).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ta.macs, tb.macs);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let mut model = SedModel::<f32>::new(SedConfig::micro_three_stage(), 2).unwrap();
    random_heads(&mut model);
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.params(), model.params());
    let img = Image::random(64, 64, 1, 1);
    assert_eq!(
        model.forward(&img, &PruneMode::Schedule).unwrap().0,
        loaded.forward(&img, &PruneMode::Schedule).unwrap().0
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&SedModel::<f32>::new(SedConfig::micro(), 2).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn aggressive_pruning_keeps_the_output_contract() {
    let mut model = SedModel::<f32>::new(SedConfig::micro(), 3).unwrap();
    random_heads(&mut model);
    let img = Image::random(64, 64, 1, 3);
    let (map, trace) = model.forward(&img, &PruneMode::Thresholds(vec![1.0, 1.0])).unwrap();
    assert_eq!((map.height(), map.width()), (64, 64));
    assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(trace.token_counts, vec![64, 1, 1, 1, 1, 1]);
    for (_, seq) in &trace.recovered {
        assert_eq!(seq.tokens(), 64);
    }
}

#[test]
fn pruning_changes_only_what_it_must() {
    let mut model = SedModel::<f32>::new(SedConfig::micro(), 6).unwrap();
    random_heads(&mut model);
    let img = Image::random(64, 64, 1, 6);
    let (_, full) = model.forward(&img, &PruneMode::Disabled).unwrap();
    let (_, pruned) = model.forward(&img, &PruneMode::Schedule).unwrap();
    assert!(pruned.macs < full.macs);
    // Scores of the first stage depend only on layers before any pruning.
    assert_eq!(full.stages[0].scores, pruned.stages[0].scores);
    let acc = &pruned.stages.last().unwrap().accumulated;
    assert_eq!(acc.popcount(), *pruned.token_counts.last().unwrap());
}

#[test]
fn precision_variants_agree() {
    let cfg = gradcheck_config();
    let single = SedModel::<f32>::new(cfg.clone(), 1).unwrap();
    let double: SedModel<f64> = single.cast();
    let img = Image::random(16, 16, cfg.in_channels, 2);
    let (a, _) = single.forward(&img, &PruneMode::Disabled).unwrap();
    let (b, _) = double.forward(&img, &PruneMode::Disabled).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
}

#[test]
fn bilinear_decoder_also_runs() {
    let cfg = SedConfig {
        upsample: Upsample::Bilinear,
        ..SedConfig::micro()
    };
    let model = SedModel::<f32>::new(cfg, 8).unwrap();
    let (map, _) = model.forward(&Image::random(64, 64, 1, 8), &PruneMode::Schedule).unwrap();
    assert_eq!((map.height(), map.width()), (64, 64));
}

#[test]
fn invalid_configurations_are_rejected() {
    let bad_heads = SedConfig {
        heads: 3,
        ..SedConfig::micro()
    };
    assert!(SedModel::<f32>::new(bad_heads, 1).is_err());
    let bad_patch = SedConfig {
        patch_size: 7,
        ..SedConfig::micro()
    };
    assert!(SedModel::<f32>::new(bad_patch, 1).is_err());
    let model = SedModel::<f32>::new(SedConfig::micro(), 1).unwrap();
    assert!(model.forward(&Image::random(32, 32, 1, 1), &PruneMode::Schedule).is_err());
    assert!(model
        .forward(&Image::random(64, 64, 1, 1), &PruneMode::Thresholds(vec![0.6, 0.2]))
        .is_err());
}
