use stabprune::dataio::{synth_dataset, Dataset};
use stabprune::nn::{AuxForm, LayerParams, LayerSpec, ModelGraph};
use stabprune::pruner::{prune, Criterion, PruneHooks, PruneSchedule};
use stabprune::trainer::{finetune, sgd_step, train, LossMode, TrainConfig, TrainHooks};
use stabprune::{zoo, Architecture, Error, Tensor};

fn small_cnn() -> Architecture {
    Architecture::new(
        [1, 16, 16],
        vec![
            LayerSpec::conv(6, 3, 1, 1),
            LayerSpec::ReLU,
            LayerSpec::pool(2, 2),
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::bn(8),
            LayerSpec::ReLU,
            LayerSpec::pool(2, 2),
            LayerSpec::Flatten,
            LayerSpec::linear(8 * 4 * 4, 10),
        ],
    )
    .unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.02,
        lr_schedule: vec![],
        batch_size: 32,
        ..TrainConfig::baseline(epochs, seed)
    }
}

fn data() -> (Dataset, Dataset) {
    (synth_dataset(600, 10, 1).unwrap(), synth_dataset(300, 10, 2).unwrap())
}

#[test]
fn sgd_two_steps_on_square() {
    // f(w) = w^2, grad 2w, lr 0.1, momentum 0.9
    let mut w = Tensor::<f64>::from_vec([1], vec![1.0]).unwrap();
    let mut v = vec![Tensor::<f64>::zeros([1]).unwrap()];
    let mut trace = vec![];
    for _ in 0..2 {
        let g = Tensor::from_vec([1], vec![2.0 * w.data()[0]]).unwrap();
        sgd_step(&mut [&mut w], &[&g], &mut v, 0.1, 0.9, 0.0).unwrap();
        trace.push((w.data()[0], v[0].data()[0]));
    }
    assert!((trace[0].0 - 0.8).abs() < 1e-12);
    assert!((trace[1].1 - 3.4).abs() < 1e-12);
    assert!((trace[1].0 - 0.46).abs() < 1e-12);
}

#[test]
fn tiny_net_learns_synthetic_blobs() {
    let (tr, te) = data();
    let m = ModelGraph::<f32>::init(small_cnn(), 7).unwrap();
    let (m, report) = train(m, &tr, Some(&te), &quick(3, 7), LossMode::Actual).unwrap();
    assert_eq!(report.epochs.len(), 3);
    let acc = m.accuracy(&te).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    assert_eq!(report.epochs[2].test_accuracy, Some(acc));
    assert_eq!(report.checksum, m.checksum());
    assert!(report.epochs[2].train_loss < report.epochs[0].train_loss);
}

#[test]
fn training_is_deterministic() {
    let (tr, _) = data();
    let run = |seed| {
        let m = ModelGraph::<f32>::init(small_cnn(), 1).unwrap();
        train(m, &tr, None, &quick(1, seed), LossMode::Actual).unwrap().1.checksum
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn zero_lr_only_moves_running_stats() {
    let (tr, _) = data();
    let m0 = ModelGraph::<f32>::init(small_cnn(), 2).unwrap();
    let cfg = TrainConfig { lr: 0.0, ..quick(1, 0) };
    let (m1, _) = train(m0.clone(), &tr, None, &cfg, LossMode::Actual).unwrap();
    for (i, (a, b)) in m0.params().iter().zip(m1.params()).enumerate() {
        match (a, b) {
            (
                LayerParams::BatchNorm { gain, shift, running_mean, .. },
                LayerParams::BatchNorm { gain: g1, shift: s1, running_mean: rm1, .. },
            ) => {
                assert_eq!((gain, shift), (g1, s1));
                assert_ne!(running_mean, rm1, "layer {i}");
            }
            _ => assert_eq!(a, b, "layer {i}"),
        }
    }
}

#[test]
fn loss_modes() {
    let (tr, _) = data();
    let m = ModelGraph::<f32>::init(small_cnn(), 3).unwrap();
    let cfg = TrainConfig { lambda: 0.0, ..quick(1, 0) };
    assert!(train(m.clone(), &tr, None, &cfg, LossMode::Total).is_err());

    // fine-tuning ignores lambda entirely
    let heavy = TrainConfig { lambda: 10.0, ..quick(1, 0) };
    let a = finetune(m.clone(), &tr, None, &heavy).unwrap().1.checksum;
    let b = train(m.clone(), &tr, None, &cfg, LossMode::Actual).unwrap().1.checksum;
    assert_eq!(a, b);

    // a strong auxiliary term pulls conv weights toward +-1
    let before = m.auxiliary_loss(AuxForm::Abs).unwrap().total;
    let pull = TrainConfig { lambda: 0.05, ..quick(1, 0) };
    let (pulled, _) = train(m, &tr, None, &pull, LossMode::Total).unwrap();
    assert!(pulled.auxiliary_loss(AuxForm::Abs).unwrap().total < before);
}

#[test]
fn divergence_is_reported() {
    let (tr, _) = data();
    let m = ModelGraph::<f32>::init(small_cnn(), 3).unwrap();
    let cfg = TrainConfig { lr: 1e30, ..quick(1, 0) };
    match train(m, &tr, None, &cfg, LossMode::Actual) {
        Err(Error::Divergence { epoch: 0, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
    }
}

/// Skips training so that schedules can be checked on full-size LeNet.
struct NoTraining;

impl PruneHooks<f32> for NoTraining {
    fn aux_train(&mut self, m: ModelGraph<f32>, _: usize, _: usize, _: f64) -> stabprune::Result<ModelGraph<f32>> {
        Ok(m)
    }
    fn finetune(&mut self, m: ModelGraph<f32>, _: usize, _: usize) -> stabprune::Result<ModelGraph<f32>> {
        Ok(m)
    }
}

#[test]
fn empty_schedule_is_identity() {
    let m = ModelGraph::<f32>::init(zoo::lenet5(), 1).unwrap();
    let (out, recs) = prune(m.clone(), &PruneSchedule::from_counts(vec![]), Criterion::Stability, &mut NoTraining).unwrap();
    assert!(recs.is_empty());
    assert_eq!(out.checksum(), m.checksum());
}

#[test]
fn lenet_schedule_reaches_target_widths() {
    let m = ModelGraph::<f32>::init(zoo::lenet5(), 1).unwrap();
    let schedule = PruneSchedule::default_toward(&[20, 50], &[4, 14]).unwrap();
    assert_eq!(schedule.totals(2), vec![16, 36]);
    for criterion in [Criterion::Stability, Criterion::L1, Criterion::Random] {
        let (out, recs) = prune(m.clone(), &schedule, criterion, &mut NoTraining).unwrap();
        assert_eq!(out.conv_widths(), vec![4, 14]);
        let mut params = m.num_scalars();
        for r in &recs {
            let after = stabprune::analyzer::param_count(&zoo::lenet5_with(r.widths_after[0], r.widths_after[1])).unwrap();
            assert!((after as usize) < params);
            params = after as usize;
        }
    }
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let (tr, te) = data();
    let (base, _) = train(ModelGraph::<f32>::init(small_cnn(), 4).unwrap(), &tr, None, &quick(3, 4), LossMode::Actual).unwrap();
    let schedule = PruneSchedule {
        finetune_epochs: 2,
        ..PruneSchedule::from_counts(vec![vec![1, 2], vec![1, 2]])
    };
    let mut hooks = TrainHooks::new(&tr, Some(&te), TrainConfig::aux(9), TrainConfig { lr: 0.02, lr_schedule: vec![], ..TrainConfig::finetune(2, 9) });
    let (out, recs) = prune(base.clone(), &schedule, Criterion::Stability, &mut hooks).unwrap();
    assert_eq!(out.conv_widths(), vec![4, 4]);
    assert_eq!(recs.len(), 2);
    assert_eq!(hooks.phases.len(), 4);
    assert!(recs.iter().all(|r| r.importance.layers[0].filters.iter().all(|f| f.score.is_finite() && f.score > 0.0)));
    assert!(out.accuracy(&te).unwrap() > 0.9);
}
