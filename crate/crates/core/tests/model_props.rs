mod support;

use proptest::prelude::*;
use rand::Rng;
use stabprune::dataio::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, Dataset, Split};
use stabprune::nn::{cross_entropy, AuxForm, LayerParams, Mode, ModelGraph};
use stabprune::{zoo, Tensor};
use support::*;

fn meta(seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        epoch: 3,
        seed,
        config_hash: "abc".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let arch = random_arch(&mut rng(seed));
        let model = random_model::<f32>(arch.clone(), seed);
        let bytes = encode_checkpoint(&model, &meta(seed));
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(&back.model, &model);
        prop_assert_eq!(&back.meta, &meta(seed));
        prop_assert_eq!(encode_checkpoint(&back.model, &back.meta), bytes);
        let x = random_batch::<f32>(&arch, 3, seed);
        let (a, b) = (model.logits(&x).unwrap(), back.model.logits(&x).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn aux_loss_ignores_filter_order(seed in any::<u64>()) {
        let arch = random_arch(&mut rng(seed));
        let model = random_model::<f64>(arch, seed);
        let mut shuffled = model.clone();
        let mut r = rng(seed ^ 1);
        for i in model.arch().conv_indices() {
            if let LayerParams::Conv { weight, .. } = shuffled.layer_params_mut(i) {
                let n = weight.shape()[0];
                let per = weight.len() / n;
                let mut rows: Vec<Vec<f64>> = weight.data().chunks(per).map(<[f64]>::to_vec).collect();
                for k in (1..n).rev() {
                    rows.swap(k, r.random_range(0..=k));
                }
                weight.data_mut().copy_from_slice(&rows.concat());
            }
        }
        let (a, b) = (model.auxiliary_loss(AuxForm::Abs).unwrap(), shuffled.auxiliary_loss(AuxForm::Abs).unwrap());
        prop_assert!((a.total - b.total).abs() <= 1e-9 * a.total.max(1.0));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sfpk");
    let mut model = random_model::<f32>(zoo::lenet5(), 1);
    // make running statistics non-trivial
    let x = random_batch::<f32>(model.arch(), 4, 2);
    model.forward(&x, Mode::Train).unwrap();
    save_checkpoint(&model, &meta(1), &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.model, model);
    save_checkpoint(&loaded.model, &loaded.meta, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let mut bad = first.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn forward_is_deterministic_and_lambda_zero_is_exact() {
    let arch = random_arch(&mut rng(4));
    let model = random_model::<f32>(arch.clone(), 4);
    let x = random_batch::<f32>(&arch, 5, 4);
    let a = model.logits(&x).unwrap();
    let b = model.clone().logits(&x).unwrap();
    assert_eq!(a, b);
    let labels = random_labels(&mut rng(5), 5, arch.num_classes().unwrap());
    let ce = cross_entropy(&model.logits(&x).unwrap(), &labels).unwrap();
    let total = model.total_loss(&x, &labels, 0.0, AuxForm::Abs, Mode::Eval).unwrap();
    assert_eq!(total.to_bits(), ce.to_bits());
    let s = model.auxiliary_loss(AuxForm::Abs).unwrap();
    let with = model.total_loss(&x, &labels, 1e-5, AuxForm::Abs, Mode::Eval).unwrap();
    assert!((with - (ce + 1e-5 * s.total)).abs() < 1e-12);
    assert!((s.per_layer.iter().sum::<f64>() - s.total).abs() < 1e-9);
}

#[test]
fn aux_loss_vanishes_at_unit_weights() {
    let mut model = random_model::<f64>(zoo::lenet5(), 2);
    for i in model.arch().conv_indices() {
        if let LayerParams::Conv { weight, .. } = model.layer_params_mut(i) {
            weight.data_mut().iter_mut().for_each(|v| *v = if *v < 0.0 { -1.0 } else { 1.0 });
        }
    }
    assert_eq!(model.auxiliary_loss(AuxForm::Abs).unwrap().total, 0.0);
}

#[test]
fn untrained_net_is_near_chance_on_random_labels() {
    let mut r = rng(77);
    let images = Tensor::<f32>::from_vec(
        [1000, 1, 28, 28],
        (0..1000 * 784).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let labels = (0..1000).map(|_| r.random_range(0..10)).collect();
    let data = Dataset::new(images, labels, 10, Split::Test).unwrap();
    let model = ModelGraph::<f32>::init(zoo::lenet5(), 77).unwrap();
    let acc = model.accuracy(&data).unwrap();
    assert!((0.05..=0.20).contains(&acc), "{acc}");
    assert_eq!(acc, model.clone().accuracy(&data).unwrap());
}

#[test]
fn single_sample_accuracy() {
    let model = random_model::<f32>(zoo::lenet5(), 3);
    let x = Tensor::<f32>::full([1, 1, 28, 28], 0.5).unwrap();
    let pred = model.predict(&x).unwrap()[0];
    let data = Dataset::new(x, vec![pred], 10, Split::Test).unwrap();
    assert_eq!(model.accuracy(&data).unwrap(), 1.0);
}
