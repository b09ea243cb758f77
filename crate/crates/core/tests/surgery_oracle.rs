mod support;

use proptest::prelude::*;
use stabprune::analyzer::flops_total;
use stabprune::nn::{LayerParams, ModelGraph};
use stabprune::pruner::{rank_filters, rank_l1, select_filters, surgery, ImportanceReport, PrunedSet};
use stabprune::{zoo, Tensor};
use support::*;

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn pruned_logits_equal_masked_logits() {
    let mut r = rng(21);
    let mut nonempty = 0;
    for case in 0..60u64 {
        let arch = random_arch(&mut r);
        let model = random_model::<f32>(arch.clone(), 1000 + case);
        let set = random_prune_set(&mut r, &model.conv_widths());
        nonempty += usize::from(!set.is_empty());
        let pruned = surgery(&model, &set).unwrap();
        let masked = mask(&model, &set);
        let x = random_batch::<f32>(&arch, 16, 2000 + case);
        let d = max_abs_diff(&pruned.logits(&x).unwrap(), &masked.logits(&x).unwrap());
        assert!(d <= 1e-5, "case {case}: |pruned - masked| = {d}\n{arch}");
    }
    assert!(nonempty >= 40);
}

/// Every surviving filter, bias and consumer slice is a bit-identical copy.
#[test]
fn survivors_are_exact_copies() {
    let mut r = rng(22);
    for case in 0..20u64 {
        let arch = random_arch(&mut r);
        let model = random_model::<f32>(arch, case);
        let set = random_prune_set(&mut r, &model.conv_widths());
        let pruned = surgery(&model, &set).unwrap();
        let convs = model.arch().conv_indices();
        for (ci, &li) in convs.iter().enumerate() {
            let n = model.conv_widths()[ci];
            let keep: Vec<usize> = (0..n).filter(|j| !set.layers[ci].contains(j)).collect();
            assert_eq!(pruned.conv_widths()[ci], keep.len());
            let (LayerParams::Conv { bias: b0, .. }, LayerParams::Conv { bias: b1, .. }) =
                (&model.params()[li], &pruned.params()[li])
            else {
                unreachable!()
            };
            for (new_j, &old_j) in keep.iter().enumerate() {
                assert_eq!(b1.data()[new_j].to_bits(), b0.data()[old_j].to_bits());
                let f_old = model.conv_filter(li, old_j).unwrap();
                let f_new = pruned.conv_filter(li, new_j).unwrap();
                // the input slice may have shrunk; compare the kept input channels
                let prev_keep: Vec<usize> = if ci == 0 {
                    (0..model.arch().input[0]).collect()
                } else {
                    let pn = model.conv_widths()[ci - 1];
                    (0..pn).filter(|j| !set.layers[ci - 1].contains(j)).collect()
                };
                let plane = f_old.len() / model.params()[li].named()[0].1.shape()[1];
                for (nc, &oc) in prev_keep.iter().enumerate() {
                    assert_eq!(
                        &f_new[nc * plane..(nc + 1) * plane],
                        &f_old[oc * plane..(oc + 1) * plane],
                        "case {case} conv {ci} filter {old_j} channel {oc}"
                    );
                }
            }
        }
    }
}

#[test]
fn surgery_strictly_reduces_flops() {
    let mut r = rng(23);
    for case in 0..30u64 {
        let arch = random_arch(&mut r);
        let model = random_model::<f32>(arch.clone(), case);
        let set = random_prune_set(&mut r, &model.conv_widths());
        let after = surgery(&model, &set).unwrap();
        let (f0, f1) = (flops_total(&arch, 1).unwrap(), flops_total(after.arch(), 1).unwrap());
        if set.is_empty() {
            assert_eq!(f0, f1);
            assert_eq!(after, model);
        } else {
            assert!(f1 < f0, "case {case}: {f0} -> {f1}");
        }
    }
}

#[test]
fn lenet_consumer_shapes() {
    let m = ModelGraph::<f32>::init(zoo::lenet5(), 3).unwrap();
    let c1 = surgery(&m, &PrunedSet { layers: vec![(4..20).collect(), vec![]] }).unwrap();
    assert_eq!(c1.params()[3].named()[0].1.shape(), &[50, 4, 5, 5]);
    let c2 = surgery(&m, &PrunedSet { layers: vec![vec![], (14..50).collect()] }).unwrap();
    let fc1 = c2.params().iter().find_map(|p| match p {
        LayerParams::Linear { weight, .. } => Some(weight.shape().to_vec()),
        _ => None,
    });
    assert_eq!(fc1, Some(vec![500, 224]));
}

#[test]
fn ratio_examples() {
    let m = ModelGraph::<f32>::init(zoo::lenet5(), 4).unwrap();
    let same = rank_filters(&m, &m).unwrap();
    assert!(same.layers.iter().flat_map(|l| &l.filters).all(|f| f.score == 1.0));

    // filter 0 of conv1 scaled so that its abs-sum goes 2.0 -> 3.0; filter 1 zeroed before
    let mut before = m.clone();
    let mut after = m.clone();
    for (model, f0, f1) in [(&mut before, 2.0f32, 0.0f32), (&mut after, 3.0, 1.0)] {
        if let LayerParams::Conv { weight, .. } = model.layer_params_mut(0) {
            let per = weight.len() / weight.shape()[0];
            weight.data_mut()[..per].fill(f0 / per as f32);
            weight.data_mut()[per..2 * per].fill(f1);
        }
    }
    let r = rank_filters(&before, &after).unwrap();
    let f = &r.layers[0].filters;
    assert!((f[0].score - 1.5).abs() < 1e-6);
    assert_eq!(f[1].score, f64::INFINITY);
    // untouched filters keep ratio exactly 1
    assert!(f[2..].iter().all(|x| x.score == 1.0));
    assert!(r.layers[1].filters.iter().all(|x| x.score == 1.0));
    assert_eq!(select_filters(&r, &[1, 0]).unwrap().layers[0], vec![1]);

    let other = ModelGraph::<f32>::init(zoo::lenet5_with(4, 14), 4).unwrap();
    assert!(rank_filters(&m, &other).is_err());
}

fn l1_report(sums: &[f64]) -> ImportanceReport {
    let m = ModelGraph::<f32>::init(zoo::lenet5_with(sums.len(), 2), 0).unwrap();
    let mut r = rank_l1(&m);
    for (f, &s) in r.layers[0].filters.iter_mut().zip(sums) {
        f.score = s;
    }
    r
}

#[test]
fn l1_examples() {
    assert_eq!(select_filters(&l1_report(&[5.0, 1.0, 3.0]), &[1, 0]).unwrap().layers[0], vec![1]);
    assert_eq!(select_filters(&l1_report(&[2.0, 2.0, 2.0]), &[1, 0]).unwrap().layers[0], vec![0]);
    let m = ModelGraph::<f32>::init(zoo::lenet5(), 8).unwrap();
    let mut doubled = m.clone();
    for t in doubled.trainable_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let counts = [7, 19];
    assert_eq!(
        select_filters(&rank_l1(&m), &counts).unwrap(),
        select_filters(&rank_l1(&doubled), &counts).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Permuting the filters permutes the selection the same way.
    #[test]
    fn selection_is_permutation_equivariant(
        scores in prop::collection::vec(0u32..1000, 2..24),
        perm_seed in any::<u64>(),
        p_frac in 0.0f64..1.0,
    ) {
        // distinct scores so that the tie-break does not depend on position
        let scores: Vec<f64> = scores.iter().enumerate().map(|(i, &s)| s as f64 + i as f64 * 1e-3).collect();
        let n = scores.len();
        let p = ((n as f64) * p_frac) as usize;
        let base = select_filters(&l1_report(&scores), &[p, 0]).unwrap().layers[0].clone();
        prop_assert_eq!(base.len(), p);

        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = rng(perm_seed);
        for i in (1..n).rev() {
            use rand::Rng;
            perm.swap(i, r.random_range(0..=i));
        }
        // new position k holds old filter perm[k]
        let permuted: Vec<f64> = perm.iter().map(|&o| scores[o]).collect();
        let sel = select_filters(&l1_report(&permuted), &[p, 0]).unwrap().layers[0].clone();
        let mut mapped: Vec<usize> = sel.iter().map(|&k| perm[k]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, base);
    }
}
