use amped::data::{generate, SynthSpec};
use amped::model::{PruneMode, SedModel};
use amped::train::{
    class_balanced_bce, gradcheck_config, loss_and_gradients, patch_labels, train, LossReport,
    NoObserver, OptimizerKind, TrainConfig, TrainObserver,
};

fn tiny_data(count: usize) -> Vec<amped::data::Sample> {
    generate(&SynthSpec {
        count,
        image_size: (16, 16),
        shapes_per_image: (1, 2),
        ..SynthSpec::default()
    })
    .unwrap()
}

fn short(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(8);
    let run = || {
        let mut m = SedModel::<f32>::new(gradcheck_config(), 3).unwrap();
        let h = train(&short(15), &data, &mut m, &mut NoObserver).unwrap();
        (h, m.params().clone())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn fitting_one_batch_lowers_both_loss_terms() {
    let data = tiny_data(2);
    let mut m = SedModel::<f32>::new(gradcheck_config(), 1).unwrap();
    let cfg = TrainConfig {
        flip: false,
        ..short(200)
    };
    let h = train(&cfg, &data, &mut m, &mut NoObserver).unwrap();
    let mean = |r: &[LossReport], f: fn(&LossReport) -> f64| r.iter().map(f).sum::<f64>() / r.len() as f64;
    let head = |r: &LossReport| r.head_terms.iter().sum::<f64>();
    assert!(mean(&h[190..], |r| r.final_term) < mean(&h[..10], |r| r.final_term));
    assert!(mean(&h[190..], head) < mean(&h[..10], head));
}

#[test]
fn pruned_training_reports_retention() {
    let data = tiny_data(4);
    let mut m = SedModel::<f32>::new(gradcheck_config(), 2).unwrap();
    let cfg = TrainConfig {
        prune_during_training: true,
        optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
        ..short(5)
    };
    let h = train(&cfg, &data, &mut m, &mut NoObserver).unwrap();
    for r in &h {
        assert_eq!(r.retained_fraction.len(), 2);
        assert!(r.retained_fraction.iter().all(|f| (0.0..=1.0).contains(f)));
        assert!(r.total.is_finite() && r.grad_norm.is_finite());
    }
}

#[test]
fn observer_sees_every_step() {
    struct Count(usize);
    impl TrainObserver for Count {
        fn on_step(&mut self, r: &LossReport, _: &SedModel<f32>) -> amped::Result<()> {
            assert_eq!(r.iteration, self.0);
            self.0 += 1;
            Ok(())
        }
    }
    let mut c = Count(0);
    let mut m = SedModel::<f32>::new(gradcheck_config(), 2).unwrap();
    train(&short(7), &tiny_data(3), &mut m, &mut c).unwrap();
    assert_eq!(c.0, 7);
}

#[test]
fn divergence_and_bad_configs_are_errors() {
    let data = tiny_data(2);
    let mut m = SedModel::<f32>::new(gradcheck_config(), 2).unwrap();
    let wild = TrainConfig {
        learning_rate: 1e30,
        optimizer: OptimizerKind::SgdMomentum { momentum: 0.0 },
        ..short(20)
    };
    let err = train(&wild, &data, &mut m, &mut NoObserver).unwrap_err();
    assert!(err.to_string().contains("diverged"), "{err}");
    let zero_batch = TrainConfig {
        batch_size: 0,
        ..short(1)
    };
    assert!(train(&zero_batch, &data, &mut m, &mut NoObserver).is_err());
    assert!(train(&short(1), &[], &mut m, &mut NoObserver).is_err());
}

#[test]
fn tape_loss_matches_the_reference_loss() {
    let sample = &tiny_data(1)[0];
    let model = SedModel::<f64>::new(gradcheck_config(), 4).unwrap();
    let cfg = TrainConfig {
        lambda_heads: 0.0,
        ..TrainConfig::default()
    };
    let (parts, _, _) = loss_and_gradients(&model, sample, &PruneMode::Disabled, &cfg).unwrap();
    let (map, _) = model.forward(&sample.image, &PruneMode::Disabled).unwrap();
    let labels = sample.gt.union().bits().to_vec();
    let reference = class_balanced_bce(map.values(), &labels).unwrap();
    assert!((parts.final_term - reference).abs() < 1e-9 * reference.max(1.0));
    assert_eq!(parts.total, parts.final_term);
}

#[test]
fn patch_labels_mark_any_edge_pixel() {
    let sample = &tiny_data(1)[0];
    let gt = sample.gt.union();
    let labels = patch_labels(&gt, 4);
    assert_eq!(labels.len(), 16);
    for (k, &l) in labels.iter().enumerate() {
        let (py, px) = (k / 4, k % 4);
        let any = (0..4).any(|dy| (0..4).any(|dx| gt.get(py * 4 + dy, px * 4 + dx)));
        assert_eq!(l, any);
    }
}
