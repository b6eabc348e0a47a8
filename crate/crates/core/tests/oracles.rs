//! Library results against independent re-implementations.

use std::collections::BTreeMap;

use proptest::prelude::*;
use protorefine::data::{Pairing, Pattern, PatternDataset, Role};
use protorefine::metrics::{self, pattern_diff, pca_2d, KL_EPSILON};
use protorefine::nn::{ClassifierModel, LayerSpec, Param, RefinerArch, RefinerModel};
use protorefine::par::Parallelism;
use protorefine::proto::{
    compute_prototypes, cross_entropy_loss, proto_nll_loss, reg_loss, refiner_loss, update_prototypes, LossTerms,
    LossWeights, PNorm, PrototypeSet, RefineMode, RefinerLossInputs,
};
use protorefine::tensor::{Tape, Tensor};
use protorefine::train::{balanced_batch, optimizer_step, OptimizerKind, OptimizerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEQ: Parallelism = Parallelism::Sequential;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

// Optimizers.

fn adam_reference(x0: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        x -= lr * mhat / (vhat.sqrt() + eps);
    }
    x
}

fn rmsprop_reference(x0: f64, grads: &[f64], lr: f64) -> f64 {
    let (rho, eps) = (0.9, 1e-8);
    let (mut x, mut s) = (x0, 0.0);
    for &g in grads {
        s = rho * s + (1.0 - rho) * g * g;
        x -= lr * g / (s.sqrt() + eps);
    }
    x
}

/// Runs the library optimizer over per-step gradients for a vector parameter.
fn run_optimizer(kind: OptimizerKind, x0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let mut p = Param {
        name: "w".into(),
        value: Tensor::from_vec(x0.to_vec()).trainable(),
    };
    let mut state = OptimizerState::new(kind, lr);
    for g in grads {
        p.value.set_grad(g.clone()).unwrap();
        optimizer_step(&mut [&mut p], &mut state).unwrap();
    }
    assert_eq!(state.step, grads.len() as u64);
    p.value.data().to_vec()
}

#[test]
fn optimizers_match_scalar_references_over_ten_steps() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x0: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..10).map(|_| (0..5).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        for (kind, lr) in [(OptimizerKind::Adam, 1e-3), (OptimizerKind::RmsProp, 1e-2)] {
            let got = run_optimizer(kind, &x0, &grads, lr);
            for i in 0..5 {
                let g: Vec<f64> = grads.iter().map(|s| s[i]).collect();
                let want = match kind {
                    OptimizerKind::Adam => adam_reference(x0[i], &g, lr),
                    OptimizerKind::RmsProp => rmsprop_reference(x0[i], &g, lr),
                };
                assert!((got[i] - want).abs() < 1e-12, "{kind} seed {seed}: {} vs {want}", got[i]);
            }
        }
    }
}

proptest! {
    #[test]
    fn optimizer_recurrences_hold_for_any_sequence(
        x0 in -10.0f64..10.0,
        grads in prop::collection::vec(-100.0f64..100.0, 1..40),
        lr in 1e-5f64..0.1,
    ) {
        let seq: Vec<Vec<f64>> = grads.iter().map(|&g| vec![g]).collect();
        let adam = run_optimizer(OptimizerKind::Adam, &[x0], &seq, lr)[0];
        let rms = run_optimizer(OptimizerKind::RmsProp, &[x0], &seq, lr)[0];
        prop_assert!((adam - adam_reference(x0, &grads, lr)).abs() < 1e-12);
        prop_assert!((rms - rmsprop_reference(x0, &grads, lr)).abs() < 1e-12);
    }
}

// Prototypes and losses.

#[test]
fn prototypes_match_per_class_accumulation() {
    let mut r = rng(3);
    let (n, l, m) = (50, 3, 4);
    let e = matrix(&mut r, n, m, -2.0, 2.0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % l).collect();
    for i in (1..n).rev() {
        labels.swap(i, r.random_range(0..=i));
    }
    let protos = compute_prototypes(&e, &labels, l).unwrap();
    for k in 0..l {
        let members: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == k).map(|i| e.row(i)).collect();
        for j in 0..m {
            let want = members.iter().map(|row| row[j]).sum::<f64>() / members.len() as f64;
            assert!((protos.prototype(k)[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn prototype_update_matches_the_formula() {
    let mut r = rng(4);
    let (l, m, nc) = (3, 5, 4);
    let prev = PrototypeSet::new(matrix(&mut r, l, m, -1.0, 1.0)).unwrap();
    let labels: Vec<usize> = (0..l * nc).map(|i| (i * 7) % l).collect();
    let e = matrix(&mut r, l * nc, m, -1.0, 1.0);
    let next = update_prototypes(&prev, &e, &labels, nc).unwrap();
    for k in 0..l {
        for j in 0..m {
            let mut sum = prev.prototype(k)[j];
            for i in 0..labels.len() {
                if labels[i] == k {
                    sum += e.row(i)[j];
                }
            }
            assert!((next.prototype(k)[j] - sum / (nc as f64 + 1.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn closed_form_loss_values() {
    let mut tape = Tape::new();
    let e = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let c = tape.constant(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap());
    let nll = proto_nll_loss(&mut tape, e, c, &[0]).unwrap();
    let want = -(1.0f64 / (1.0 + (-4.0f64).exp())).ln();
    assert!((tape.value(nll).item() - want).abs() < 1e-14);

    let z = tape.constant(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.0]).unwrap());
    let ce = cross_entropy_loss(&mut tape, z, &[1]).unwrap();
    let e1 = 1f64.exp();
    let e2 = 2f64.exp();
    let want = -(e2 / (e1 + e2 + 1.0)).ln();
    assert!((tape.value(ce).item() - want).abs() < 1e-14);
}

#[test]
fn l2_reg_matches_summation_oracle() {
    let mut r = rng(5);
    let a = matrix(&mut r, 4, 7, 0.0, 1.0);
    let b = matrix(&mut r, 4, 7, 0.0, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(&a), tape.constant(&b));
    let reg = reg_loss(&mut tape, va, vb, PNorm::L2).unwrap();
    let want = a
        .rows()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum::<f64>()
        / 4.0;
    assert!((tape.value(reg).item() - want).abs() < 1e-14);
}

#[test]
fn refiner_loss_is_the_sum_of_its_parts() {
    for mode in [RefineMode::Targeted, RefineMode::NonTargeted] {
        for seed in 0..10 {
            let mut r = rng(seed);
            let raw = matrix(&mut r, 5, 8, 0.0, 1.0);
            let refined = matrix(&mut r, 5, 8, 0.0, 1.0);
            let emb = matrix(&mut r, 5, 3, -1.0, 1.0);
            let logits = matrix(&mut r, 5, 4, -3.0, 3.0);
            let protos = matrix(&mut r, 4, 3, -1.0, 1.0);
            let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
            let weights = LossWeights {
                alpha: r.random_range(0.0..2.0),
                beta: r.random_range(0.0..2.0),
                ..LossWeights::default()
            };

            let mut tape = Tape::new();
            let inputs = RefinerLossInputs {
                refined: tape.constant(&refined),
                raw: tape.constant(&raw),
                embeddings: tape.constant(&emb),
                logits: tape.constant(&logits),
                prototypes: tape.constant(&protos),
            };
            let loss = refiner_loss(&mut tape, inputs, Some(&labels), &weights, mode, LossTerms::default()).unwrap();
            let total = tape.value(loss.total).item();

            let mut t2 = Tape::new();
            let z = t2.constant(&logits);
            let e = t2.constant(&emb);
            let c = t2.constant(&protos);
            let (pred, proto) = match mode {
                RefineMode::Targeted => (
                    cross_entropy_loss(&mut t2, z, &labels).unwrap(),
                    proto_nll_loss(&mut t2, e, c, &labels).unwrap(),
                ),
                RefineMode::NonTargeted => (
                    protorefine::proto::prediction_entropy_loss(&mut t2, z).unwrap(),
                    protorefine::proto::proto_entropy_loss(&mut t2, e, c).unwrap(),
                ),
            };
            let (rf, rw) = (t2.constant(&refined), t2.constant(&raw));
            let reg = reg_loss(&mut t2, rf, rw, PNorm::L1).unwrap();
            let want =
                t2.value(pred).item() + weights.alpha * t2.value(reg).item() + weights.beta * t2.value(proto).item();
            assert!((total - want).abs() < 1e-12, "{mode:?} seed {seed}");
        }
    }
}

// Batching.

fn labelled_dataset(sizes: &[usize], length: usize, seed: u64) -> PatternDataset {
    let mut r = rng(seed);
    let patterns = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| (0..n).map(move |_| k))
        .map(|k| Pattern {
            values: (0..length).map(|_| r.random_range(0.0..1.0)).collect(),
            label: Some(k),
        })
        .collect();
    PatternDataset::new(length, sizes.len(), Role::Ideal, patterns).unwrap()
}

#[test]
fn balanced_batch_label_histogram_is_uniform() {
    let ds = labelled_dataset(&[30, 4, 12, 9, 50, 2, 17], 4, 1);
    let mut r = rng(9);
    let mut histogram = [0usize; 7];
    let batches = 1000;
    for _ in 0..batches {
        let (x, labels) = balanced_batch(&ds, 5, &mut r).unwrap();
        assert_eq!(x.shape(), &[35, 4]);
        for y in labels {
            histogram[y] += 1;
        }
    }
    let expected = (batches * 5) as f64;
    for (k, &count) in histogram.iter().enumerate() {
        assert!(((count as f64 - expected) / expected).abs() <= 0.01, "class {k}: {count}");
    }
}

proptest! {
    #[test]
    fn balance_holds_for_any_batch_size(nc in 1usize..20, seed in 0u64..500) {
        let ds = labelled_dataset(&[3, 11, 6], 2, 2);
        let mut r = rng(seed);
        for per_class in [nc, 2 * nc] {
            let (_, labels) = balanced_batch(&ds, per_class, &mut r).unwrap();
            for k in 0..3 {
                prop_assert_eq!(labels.iter().filter(|&&y| y == k).count(), per_class);
            }
        }
    }
}

// Metrics.

struct Direct {
    l1: f64,
    l2: f64,
    kl: f64,
    ncc: f64,
}

fn direct_diff(a: &[f64], b: &[f64]) -> Direct {
    let n = a.len();
    let mut l1 = 0.0;
    let mut sq = 0.0;
    for i in 0..n {
        l1 += (a[i] - b[i]).abs();
        sq += (a[i] - b[i]).powi(2);
    }
    let sa: f64 = a.iter().sum::<f64>() + n as f64 * KL_EPSILON;
    let sb: f64 = b.iter().sum::<f64>() + n as f64 * KL_EPSILON;
    let mut kl = 0.0;
    for i in 0..n {
        let p = (a[i] + KL_EPSILON) / sa;
        let q = (b[i] + KL_EPSILON) / sb;
        kl += p * p.ln() - p * q.ln();
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let cov: f64 = (0..n).map(|i| (a[i] - ma) * (b[i] - mb)).sum();
    let va: f64 = (0..n).map(|i| (a[i] - ma).powi(2)).sum();
    let vb: f64 = (0..n).map(|i| (b[i] - mb).powi(2)).sum();
    Direct {
        l1,
        l2: sq.sqrt(),
        kl,
        ncc: cov / (va * vb).sqrt(),
    }
}

proptest! {
    #[test]
    fn diffs_match_direct_summation(
        pair in (2usize..300).prop_flat_map(|d| (
            prop::collection::vec(0.0f64..1.0, d),
            prop::collection::vec(0.0f64..1.0, d),
        ))
    ) {
        let (a, b) = pair;
        let got = pattern_diff(&a, &b).unwrap();
        let want = direct_diff(&a, &b);
        prop_assert!((got.l1 - want.l1).abs() < 1e-10);
        prop_assert!((got.l2 - want.l2).abs() < 1e-10);
        prop_assert!((got.kl - want.kl).abs() < 1e-10);
        prop_assert!((got.ncc - want.ncc).abs() < 1e-10);
    }

    #[test]
    fn diff_metric_properties(
        pair in (2usize..100).prop_flat_map(|d| (
            prop::collection::vec(0.0f64..1.0, d),
            prop::collection::vec(0.0f64..1.0, d),
        )),
        scale in 0.1f64..10.0,
        offset in -5.0f64..5.0,
    ) {
        let (a, b) = pair;
        let ab = pattern_diff(&a, &b).unwrap();
        let ba = pattern_diff(&b, &a).unwrap();
        prop_assert_eq!(ab.l1, ba.l1);
        prop_assert!((ab.l2 - ba.l2).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&ab.ncc));
        prop_assert!(ab.kl >= 0.0);
        let same = pattern_diff(&a, &a).unwrap();
        prop_assert_eq!((same.l1, same.l2, same.kl, same.ncc), (0.0, 0.0, 0.0, 1.0));
        let moved: Vec<f64> = b.iter().map(|v| scale * v + offset).collect();
        let affine = pattern_diff(&a, &moved).unwrap();
        prop_assert!((affine.ncc - ab.ncc).abs() < 1e-9);
    }

    #[test]
    fn median_matches_counting_oracle(values in prop::collection::vec(-100.0f64..100.0, 1..60)) {
        let got = metrics::median(&values).unwrap();
        let k = (values.len() - 1) / 2;
        let below = values.iter().filter(|&&v| v < got).count();
        let at_or_below = values.iter().filter(|&&v| v <= got).count();
        prop_assert!(below <= k && k < at_or_below);
        prop_assert!(values.contains(&got));
    }
}

#[test]
fn kl_is_not_symmetric() {
    let a = [0.9, 0.05, 0.05];
    let b = [0.3, 0.3, 0.4];
    assert!((pattern_diff(&a, &b).unwrap().kl - pattern_diff(&b, &a).unwrap().kl).abs() > 1e-3);
}

/// Classifier whose embeddings and logits both equal its input.
fn passthrough_classifier(width: usize, swap: bool) -> ClassifierModel {
    let mut model =
        ClassifierModel::from_layers(width, width, vec![LayerSpec::dense(width, width)], vec![
            LayerSpec::dense(width, width),
        ])
        .unwrap();
    for (n, p) in model.params_mut().enumerate() {
        if p.value.rank() == 2 {
            let data = p.value.data_mut();
            for i in 0..width {
                let j = if swap && n > 0 { width - 1 - i } else { i };
                data[i * width + j] = 1.0;
            }
        }
    }
    model
}

#[test]
fn accuracy_matches_a_counting_loop() {
    let mut r = rng(11);
    let x = matrix(&mut r, 200, 4, 0.0, 1.0);
    let labels: Vec<usize> = (0..200).map(|_| r.random_range(0..4)).collect();
    let model = passthrough_classifier(4, false);
    let mut correct = 0;
    for (row, &y) in x.rows().zip(&labels) {
        let best = (0..4).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        correct += usize::from(best == y);
    }
    let acc = metrics::accuracy(&model, &x, &labels, SEQ).unwrap();
    assert_eq!(acc, correct as f64 / 200.0);
    assert!(metrics::accuracy(&model, &Tensor::zeros(&[0, 4]), &[], SEQ).is_err());
}

#[test]
fn perfect_and_swapped_two_class_accuracy() {
    let x = Tensor::new(vec![4, 2], vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).unwrap();
    let labels = [0, 1, 0, 1];
    assert_eq!(metrics::accuracy(&passthrough_classifier(2, false), &x, &labels, SEQ).unwrap(), 1.0);
    assert_eq!(metrics::accuracy(&passthrough_classifier(2, true), &x, &labels, SEQ).unwrap(), 0.0);
    let swapped: Vec<usize> = labels.iter().map(|y| 1 - y).collect();
    assert_eq!(metrics::accuracy(&passthrough_classifier(2, false), &x, &swapped, SEQ).unwrap(), 0.0);
}

#[test]
fn nearest_prototype_accuracy_matches_brute_force() {
    let mut r = rng(12);
    let x = matrix(&mut r, 100, 3, 0.0, 1.0);
    let labels: Vec<usize> = (0..100).map(|_| r.random_range(0..3)).collect();
    let protos = PrototypeSet::new(matrix(&mut r, 3, 3, 0.0, 1.0)).unwrap();
    let model = passthrough_classifier(3, false);
    let mut correct = 0;
    for (row, &y) in x.rows().zip(&labels) {
        let dist = |k: usize| (0..3).map(|j| (row[j] - protos.prototype(k)[j]).powi(2)).sum::<f64>();
        let best = (0..3).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
        correct += usize::from(best == y);
    }
    let acc = metrics::nearest_prototype_accuracy(&model, &protos, &x, &labels, SEQ).unwrap();
    assert_eq!(acc, correct as f64 / 100.0);
}

fn paired_dataset(n: usize, d: usize, seed: u64) -> PatternDataset {
    let mut r = rng(seed);
    let gt: Vec<Pattern> = (0..n)
        .map(|i| Pattern {
            values: (0..d).map(|_| r.random_range(0.0..1.0)).collect(),
            label: Some(i % 2),
        })
        .collect();
    let raw: Vec<Pattern> = gt
        .iter()
        .map(|p| Pattern {
            values: p.values.iter().map(|v| (v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect(),
            label: p.label,
        })
        .collect();
    PatternDataset {
        length: d,
        classes: 2,
        role: Role::Imperfect,
        patterns: raw,
        pairing: Some(Pairing {
            index: (0..n).rev().collect(),
            patterns: gt.into_iter().rev().collect(),
        }),
        manifest: BTreeMap::new(),
    }
}

#[test]
fn identity_refiner_leaves_aggregates_unchanged() {
    let ds = paired_dataset(41, 16, 1);
    ds.validate().unwrap();
    let refiner = RefinerModel::new(&RefinerArch::new(16), 3).unwrap();
    let classifier = passthrough_classifier(16, false);
    let report = metrics::evaluate_refinement(&refiner, &classifier, &ds.without_labels(), SEQ).unwrap();
    let q = report.quality.unwrap();
    assert_eq!(q.raw, q.refined);
    assert_eq!(q.l1_improved, 0.0);
    assert_eq!(report.raw_entropy, report.refined_entropy);
    assert_eq!(report.raw_accuracy, None);
}

#[test]
fn ground_truth_outputs_score_perfectly() {
    let ds = paired_dataset(20, 16, 2);
    let gt: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.ground_truth(i).unwrap().values.clone()).collect();
    let refined = Tensor::from_rows(&gt, 16).unwrap();
    let classifier = passthrough_classifier(16, false);
    let report = metrics::evaluate_outputs(&classifier, &ds, &refined, SEQ).unwrap();
    let q = report.quality.unwrap();
    for s in &q.samples {
        assert_eq!((s.refined.l1, s.refined.l2, s.refined.kl, s.refined.ncc), (0.0, 0.0, 0.0, 1.0));
    }
    assert_eq!(q.l1_improved, 1.0);

    let mut l1: Vec<f64> = q.samples.iter().map(|s| s.raw.l1).collect();
    l1.sort_by(f64::total_cmp);
    assert_eq!(q.raw.median.l1, l1[(l1.len() - 1) / 2]);
    let mean = q.samples.iter().map(|s| s.raw.kl).sum::<f64>() / q.samples.len() as f64;
    assert!((q.raw.mean.kl - mean).abs() < 1e-12);
}

#[test]
fn evaluation_agrees_across_parallelism() {
    let ds = paired_dataset(70, 16, 3);
    let refiner = RefinerModel::new(&RefinerArch::new(16), 3).unwrap();
    let classifier = passthrough_classifier(16, false);
    let a = metrics::evaluate_refinement(&refiner, &classifier, &ds, SEQ).unwrap();
    let b = metrics::evaluate_refinement(&refiner, &classifier, &ds, Parallelism::Threads(Some(3))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pca_reconstructs_rank_two_data() {
    let mut r = rng(13);
    let m = 9;
    let center: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| {
            let (a, b) = (r.random_range(-3.0..3.0), r.random_range(-1.0..1.0));
            (0..m).map(|j| center[j] + a * u[j] + b * v[j]).collect()
        })
        .collect();
    let points = Tensor::from_rows(&rows, m).unwrap();
    let proj = pca_2d(&points).unwrap();
    assert!(proj.variances[0] >= proj.variances[1]);
    for (row, c) in rows.iter().zip(&proj.coords) {
        for (x, y) in row.iter().zip(proj.reconstruct(*c)) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}

#[test]
fn refiner_edit_l1_equals_reg_loss() {
    let mut refiner = RefinerModel::new(&RefinerArch::new(16), 5).unwrap();
    let mut r = rng(14);
    for p in refiner.params_mut() {
        for x in p.value.data_mut() {
            *x += r.random_range(-0.1..0.1);
        }
    }
    let x = matrix(&mut r, 6, 16, 0.0, 1.0);
    let y = refiner.forward(&x).unwrap();
    let direct = x
        .rows()
        .zip(y.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum::<f64>()
        / 6.0;
    assert!(direct.is_finite() && direct > 0.0);
    let mut tape = Tape::new();
    let (vy, vx) = (tape.constant(&y), tape.constant(&x));
    let reg = reg_loss(&mut tape, vy, vx, PNorm::L1).unwrap();
    assert!((tape.value(reg).item() - direct).abs() < 1e-12);
}

/// Brute-force oracle checks for prototypes, optimizers, diff metrics and
/// median aggregation, for test targets that include this file as a module.
#[allow(dead_code)]
pub const ORACLE_CHECKS: &[(&str, fn())] = &[
    ("prototypes_match_per_class_accumulation", prototypes_match_per_class_accumulation),
    ("prototype_update_matches_the_formula", prototype_update_matches_the_formula),
    ("optimizers_match_scalar_references_over_ten_steps", optimizers_match_scalar_references_over_ten_steps),
    ("optimizer_recurrences_hold_for_any_sequence", optimizer_recurrences_hold_for_any_sequence),
    ("diffs_match_direct_summation", diffs_match_direct_summation),
    ("diff_metric_properties", diff_metric_properties),
    ("kl_is_not_symmetric", kl_is_not_symmetric),
    ("median_matches_counting_oracle", median_matches_counting_oracle),
];
