//! Tape gradients against central differences (h = 1e-5), twenty random
//! instances per operation, layer and loss composition.

use protorefine::nn::{ClassifierArch, ClassifierModel, Feature, LayerSpec, RefinerArch, RefinerModel, Stack};
use protorefine::proto::{
    cross_entropy_loss, prediction_entropy_loss, proto_entropy_loss, proto_nll_loss, reg_loss, refiner_loss,
    LossTerms, LossWeights, PNorm, RefineMode, RefinerLossInputs,
};
use protorefine::tensor::gradcheck::{max_relative_error, Probe};
use protorefine::tensor::{Padding, Tape, Tensor, Var};
use protorefine::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.05, 2)` and random sign, away from kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn check(
    name: &str,
    probe: Probe,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
) {
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(instance * 7919 + name.len() as u64);
        let inputs = make(&mut rng);
        let err = max_relative_error(&inputs, H, probe, instance, f).unwrap();
        assert!(err < TOL, "{name}: instance {instance} relative error {err:e}");
    }
}

#[test]
fn elementwise_binary() {
    let make = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)];
    check("add", Probe::Coordinates, make, |t, v| t.add(v[0], v[1]));
    check("sub", Probe::Coordinates, make, |t, v| t.sub(v[0], v[1]));
    check("mul", Probe::Coordinates, make, |t, v| t.mul(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    let wide = |r: &mut ChaCha8Rng| vec![uniform(r, &[2, 5], -2.0, 2.0)];
    let positive = |r: &mut ChaCha8Rng| vec![uniform(r, &[2, 5], 0.2, 3.0)];
    let kinked = |r: &mut ChaCha8Rng| vec![off_zero(r, &[2, 5])];
    check("neg", Probe::Coordinates, wide, |t, v| t.neg(v[0]));
    check("exp", Probe::Coordinates, wide, |t, v| t.exp(v[0]));
    check("square", Probe::Coordinates, wide, |t, v| t.square(v[0]));
    check("scale", Probe::Coordinates, wide, |t, v| t.scale(v[0], -1.7));
    check("add_scalar", Probe::Coordinates, wide, |t, v| t.add_scalar(v[0], 0.3));
    check("log", Probe::Coordinates, positive, |t, v| t.log(v[0]));
    check("sqrt", Probe::Coordinates, positive, |t, v| t.sqrt(v[0]));
    check("relu", Probe::Coordinates, kinked, |t, v| t.relu(v[0]));
    check("abs", Probe::Coordinates, kinked, |t, v| t.abs(v[0]));
    check(
        "clamp01",
        Probe::Coordinates,
        |r| {
            let data = (0..10)
                .map(|_| loop {
                    let x: f64 = r.random_range(-0.5..1.5);
                    if (x.abs() > 0.05) && ((x - 1.0).abs() > 0.05) {
                        break x;
                    }
                })
                .collect();
            vec![Tensor::new(vec![2, 5], data).unwrap()]
        },
        |t, v| t.clamp01(v[0]),
    );
}

#[test]
fn linear_algebra() {
    check(
        "matmul",
        Probe::Coordinates,
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
        |t, v| t.matmul(v[0], v[1]),
    );
    check(
        "linear",
        Probe::Coordinates,
        |r| {
            vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ]
        },
        |t, v| t.linear(v[0], v[1], v[2]),
    );
    check(
        "sq_distances",
        Probe::Coordinates,
        |r| vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[5, 3], -1.0, 1.0)],
        |t, v| t.sq_distances(v[0], v[1]),
    );
}

#[test]
fn reductions_and_indexing() {
    let make = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4, 2], -2.0, 2.0)];
    check("sum", Probe::Coordinates, make, |t, v| t.sum(v[0]));
    check("mean", Probe::Coordinates, make, |t, v| t.mean(v[0]));
    check("sum_axis0", Probe::Coordinates, make, |t, v| t.sum_axis(v[0], 0));
    check("sum_axis1", Probe::Coordinates, make, |t, v| t.sum_axis(v[0], 1));
    check("sum_axis2", Probe::Coordinates, make, |t, v| t.sum_axis(v[0], 2));
    check("mean_axis1", Probe::Coordinates, make, |t, v| t.mean_axis(v[0], 1));
    check("max_all", Probe::Coordinates, make, |t, v| Ok(t.max_with_index(v[0], None)?.0));
    check("max_axis1", Probe::Coordinates, make, |t, v| Ok(t.max_with_index(v[0], Some(1))?.0));
    check("reshape", Probe::Coordinates, make, |t, v| t.reshape(v[0], vec![6, 4]));
    let matrix = |r: &mut ChaCha8Rng| vec![uniform(r, &[4, 5], -3.0, 3.0)];
    check("log_softmax", Probe::Coordinates, matrix, |t, v| t.log_softmax(v[0]));
    check("gather_rows", Probe::Coordinates, matrix, |t, v| t.gather_rows(v[0], &[4, 0, 2, 2]));
}

#[test]
fn signal_ops() {
    for (stride, padding) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Same), (2, Padding::Valid)] {
        check(
            "conv1d",
            Probe::Coordinates,
            |r| {
                vec![
                    uniform(r, &[2, 3, 9], -1.0, 1.0),
                    uniform(r, &[4, 3, 3], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            move |t, v| t.conv1d(v[0], v[1], Some(v[2]), stride, padding),
        );
    }
    check(
        "conv1d_unbatched_no_bias",
        Probe::Coordinates,
        |r| vec![uniform(r, &[2, 7], -1.0, 1.0), uniform(r, &[3, 2, 4], -1.0, 1.0)],
        |t, v| t.conv1d(v[0], v[1], None, 1, Padding::Same),
    );
    let signal = |r: &mut ChaCha8Rng| vec![uniform(r, &[2, 3, 8], -2.0, 2.0)];
    check("maxpool1d", Probe::Coordinates, signal, |t, v| t.maxpool1d(v[0], 2));
    check("maxpool1d_remainder", Probe::Coordinates, |r| vec![uniform(r, &[1, 2, 7], -2.0, 2.0)], |t, v| {
        t.maxpool1d(v[0], 3)
    });
    check("upsample1d", Probe::Coordinates, signal, |t, v| t.upsample1d(v[0], 3));
    check(
        "concat_channels",
        Probe::Coordinates,
        |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 1, 4], -1.0, 1.0)],
        |t, v| t.concat_channels(v[0], v[1]),
    );
}

fn random_stack(layers: Vec<LayerSpec>, input: Feature, seed: u64) -> Stack {
    let mut stack = Stack::new("s", layers, input).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in stack.params_mut() {
        for x in p.value.data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    stack
}

/// Gradient of a stack with respect to its input and, in turn, each parameter.
fn check_stack(name: &str, layers: Vec<LayerSpec>, input: Feature, input_shape: &[usize]) {
    for instance in 0..INSTANCES {
        let stack = random_stack(layers.clone(), input, instance);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let x = uniform(&mut rng, input_shape, -1.0, 1.0);
        let mut tensors = vec![x];
        tensors.extend(stack.params().iter().map(|p| p.value.clone()));
        let err = max_relative_error(&tensors, H, Probe::Coordinates, instance, |t, v| {
            stack.forward(t, v[0], &v[1..])
        })
        .unwrap();
        assert!(err < TOL, "{name}: instance {instance} relative error {err:e}");
    }
}

#[test]
fn layers() {
    check_stack("dense", vec![LayerSpec::dense(5, 3)], Feature::Flat(5), &[4, 5]);
    check_stack(
        "conv",
        vec![LayerSpec::conv(2, 3, 3)],
        Feature::Signal { channels: 2, length: 8 },
        &[2, 2, 8],
    );
    check_stack(
        "conv_relu_pool_dense",
        vec![
            LayerSpec::conv(1, 3, 3),
            LayerSpec::Relu,
            LayerSpec::MaxPool1d { width: 2 },
            LayerSpec::dense(12, 4),
        ],
        Feature::Signal { channels: 1, length: 8 },
        &[3, 1, 8],
    );
    check_stack(
        "skip_block",
        vec![
            LayerSpec::conv(1, 2, 3),
            LayerSpec::Relu,
            LayerSpec::MaxPool1d { width: 2 },
            LayerSpec::conv(2, 2, 3),
            LayerSpec::Upsample1d { factor: 2 },
            LayerSpec::SkipConcat { from: 1 },
            LayerSpec::conv(4, 1, 1),
        ],
        Feature::Signal { channels: 1, length: 8 },
        &[2, 1, 8],
    );
}

#[test]
fn losses() {
    let logits = |r: &mut ChaCha8Rng| vec![uniform(r, &[5, 4], -3.0, 3.0)];
    check("cross_entropy", Probe::Coordinates, logits, |t, v| {
        cross_entropy_loss(t, v[0], &[0, 3, 1, 1, 2])
    });
    check("prediction_entropy", Probe::Coordinates, logits, |t, v| prediction_entropy_loss(t, v[0]));
    let emb = |r: &mut ChaCha8Rng| vec![uniform(r, &[5, 3], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)];
    check("proto_nll", Probe::Coordinates, emb, |t, v| proto_nll_loss(t, v[0], v[1], &[2, 0, 3, 1, 0]));
    check("proto_entropy", Probe::Coordinates, emb, |t, v| proto_entropy_loss(t, v[0], v[1]));
    for norm in [PNorm::L1, PNorm::L2] {
        check(
            "reg",
            Probe::Coordinates,
            |r| {
                let raw = uniform(r, &[3, 6], 0.0, 1.0);
                let delta = off_zero(r, &[3, 6]);
                let refined: Vec<f64> = raw.data().iter().zip(delta.data()).map(|(a, d)| a + 0.2 * d).collect();
                vec![Tensor::new(vec![3, 6], refined).unwrap(), raw]
            },
            move |t, v| reg_loss(t, v[0], v[1], norm),
        );
    }
}

fn small_classifier(seed: u64) -> ClassifierModel {
    let arch = ClassifierArch {
        input_length: 32,
        classes: 4,
        conv_channels: vec![3, 4],
        kernel: 3,
        pool: 2,
        hidden: 8,
        embedding_dim: 5,
    };
    let mut model = ClassifierModel::new(&arch, seed).unwrap();
    jitter(model.params_mut().map(|p| &mut p.value), seed);
    model
}

/// Moves every parameter off zero so no activation sits exactly on a ReLU kink.
fn jitter<'a>(params: impl Iterator<Item = &'a mut Tensor>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in params {
        for x in t.data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
}

/// Smallest distance of any ReLU input from zero, and of any positive
/// max-pool winner from its runner-up, when `stack` runs on `x`.
fn kink_margin(stack: &Stack, x: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    let layers = stack.layers();
    for (k, layer) in layers.iter().enumerate() {
        if !matches!(layer, LayerSpec::Relu | LayerSpec::MaxPool1d { .. }) {
            continue;
        }
        let mut prefix = Stack::new("s", layers[..k].to_vec(), stack.input()).unwrap();
        for (dst, src) in prefix.params_mut().iter_mut().zip(stack.params()) {
            dst.value = src.value.clone();
        }
        let mut tape = Tape::new();
        let vars = prefix.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = prefix.forward(&mut tape, xv, &vars).unwrap();
        let values = tape.value(out);
        match *layer {
            LayerSpec::Relu => {
                margin = margin.min(values.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
            }
            LayerSpec::MaxPool1d { width } => {
                let len = *values.shape().last().unwrap();
                for row in values.data().chunks(len) {
                    for window in row.chunks_exact(width) {
                        let mut sorted = window.to_vec();
                        sorted.sort_by(|a, b| b.total_cmp(a));
                        if sorted[0] > 0.0 {
                            margin = margin.min(sorted[0] - sorted[1]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    margin
}

fn as_signal(x: &Tensor) -> Tensor {
    x.reshaped(vec![x.shape()[0], 1, x.shape()[1]]).unwrap()
}

/// Instances closer than this to a non-differentiable point are redrawn.
const MARGIN: f64 = 1e-4;

#[test]
fn classifier_objective() {
    let mut accepted = 0;
    for instance in 0..10 * INSTANCES {
        let model = small_classifier(instance);
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let x = uniform(&mut rng, &[6, 32], 0.0, 1.0);
        if kink_margin(model.embed_stack(), &as_signal(&x)) < MARGIN {
            continue;
        }
        let protos = uniform(&mut rng, &[4, 5], -0.5, 0.5);
        let y = labels(&mut rng, 6, 4);
        let mut tensors = vec![protos];
        tensors.extend(model.params().map(|p| p.value.clone()));
        let lambda = 0.7;
        let err = max_relative_error(&tensors, H, Probe::Directions(4), instance, |t, v| {
            let xv = t.constant(&x);
            let (e, logits) = forward_with(&model, t, &v[1..], xv)?;
            let ce = cross_entropy_loss(t, logits, &y)?;
            let nll = proto_nll_loss(t, e, v[0], &y)?;
            let w = t.scale(nll, lambda)?;
            t.add(ce, w)
        })
        .unwrap();
        assert!(err < TOL, "classifier objective: instance {instance} relative error {err:e}");
        accepted += 1;
        if accepted == INSTANCES {
            return;
        }
    }
    panic!("only {accepted} instances cleared the kink margin");
}

/// Runs the classifier with parameters taken from `params` instead of its bound copy.
fn forward_with(model: &ClassifierModel, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Var)> {
    let n_embed = model.embed_stack().params().len();
    let n = tape.shape(x)[0];
    let signal = tape.reshape(x, vec![n, 1, model.input_length()])?;
    let e = model.embed_stack().forward(tape, signal, &params[..n_embed])?;
    let logits = model.head_stack().forward(tape, e, &params[n_embed..])?;
    Ok((e, logits))
}

fn random_refiner(seed: u64) -> RefinerModel {
    let arch = RefinerArch {
        base_channels: 4,
        ..RefinerArch::new(32)
    };
    let mut refiner = RefinerModel::new(&arch, seed).unwrap();
    jitter(refiner.params_mut().iter_mut().map(|p| &mut p.value), seed);
    refiner
}

/// Kink margin of the whole refiner objective: network activations, the
/// clamp, the L1 edit penalty and the classifier applied to the output.
fn refiner_margin(refiner: &RefinerModel, classifier: &ClassifierModel, x: &Tensor) -> f64 {
    let stack = refiner.stack();
    let mut tape = Tape::new();
    let vars = stack.bind(&mut tape, false);
    let xv = tape.constant(&as_signal(x));
    let delta = stack.forward(&mut tape, xv, &vars).unwrap();
    let mut margin = kink_margin(stack, &as_signal(x));
    for (d, raw) in tape.value(delta).data().iter().zip(x.data()) {
        let pre = raw + d;
        margin = margin.min(d.abs()).min(pre.abs()).min((1.0 - pre).abs());
    }
    let refined = refiner.forward(x).unwrap();
    margin.min(kink_margin(classifier.embed_stack(), &as_signal(&refined)))
}

fn check_refiner_objective(mode: RefineMode) {
    let mut accepted = 0;
    for instance in 0..10 * INSTANCES {
        let classifier = small_classifier(100 + instance);
        let refiner = random_refiner(instance);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + instance);
        let x = uniform(&mut rng, &[3, 32], 0.2, 0.8);
        if refiner_margin(&refiner, &classifier, &x) < MARGIN {
            continue;
        }
        let protos = uniform(&mut rng, &[4, 5], -0.5, 0.5);
        let y = labels(&mut rng, 3, 4);
        let weights = LossWeights {
            alpha: 0.3,
            beta: 0.8,
            ..LossWeights::default()
        };
        let tensors: Vec<Tensor> = refiner.params().iter().map(|p| p.value.clone()).collect();
        let err = max_relative_error(&tensors, H, Probe::Directions(4), instance, |t, v| {
            let raw = t.constant(&x);
            let r = refiner.forward_on(t, v, raw)?;
            let frozen = classifier.bind(t, false);
            let (e, logits) = classifier.forward_on(t, &frozen, r)?;
            let c = t.constant(&protos);
            let inputs = RefinerLossInputs {
                refined: r,
                raw,
                embeddings: e,
                logits,
                prototypes: c,
            };
            let labels = (mode == RefineMode::Targeted).then_some(y.as_slice());
            Ok(refiner_loss(t, inputs, labels, &weights, mode, LossTerms::default())?.total)
        })
        .unwrap();
        assert!(err < TOL, "{mode:?} refiner objective: instance {instance} relative error {err:e}");
        accepted += 1;
        if accepted == INSTANCES {
            return;
        }
    }
    panic!("only {accepted} instances cleared the kink margin");
}

#[test]
fn refiner_objective_targeted() {
    check_refiner_objective(RefineMode::Targeted);
}

#[test]
fn refiner_objective_non_targeted() {
    check_refiner_objective(RefineMode::NonTargeted);
}

#[test]
fn matmul_is_tight() {
    check_tol(
        "matmul",
        1e-6,
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
        |t, v| t.matmul(v[0], v[1]),
    );
}

fn check_tol(
    name: &str,
    tol: f64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
) {
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let err = max_relative_error(&make(&mut rng), H, Probe::Coordinates, instance, f).unwrap();
        assert!(err < tol, "{name}: instance {instance} relative error {err:e}");
    }
}

/// One smooth, shape-preserving step applied to a `[2 × 3]` value.
fn chain_step(t: &mut Tape, x: Var, op: usize, mix: Var) -> Result<Var> {
    match op {
        0 => {
            let s = t.scale(x, 0.5)?;
            t.exp(s)
        }
        1 => t.square(x),
        2 => t.log_softmax(x),
        3 => t.matmul(x, mix),
        4 => {
            let sq = t.square(x)?;
            let shifted = t.add_scalar(sq, 1.0)?;
            t.sqrt(shifted)
        }
        _ => {
            let e = t.exp(x)?;
            let shifted = t.add_scalar(e, 1.0)?;
            t.log(shifted)
        }
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

    #[test]
    fn random_chains_match_differences(
        x in proptest::collection::vec(-1.0f64..1.0, 6),
        mix in proptest::collection::vec(-1.0f64..1.0, 9),
        ops in proptest::collection::vec(0usize..6, 1..6),
        seed in 0u64..1000,
    ) {
        let inputs = vec![
            Tensor::new(vec![2, 3], x).unwrap(),
            Tensor::new(vec![3, 3], mix).unwrap(),
        ];
        let err = max_relative_error(&inputs, H, Probe::Coordinates, seed, |t, v| {
            let mut y = v[0];
            for &op in &ops {
                y = chain_step(t, y, op, v[1])?;
            }
            Ok(y)
        })
        .unwrap();
        proptest::prop_assert!(err < TOL, "ops {:?}: relative error {:e}", ops, err);
    }
}

/// Every check in this file, for test targets that include it as a module.
#[allow(dead_code)]
pub const ALL_CHECKS: &[(&str, fn())] = &[
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("linear_algebra", linear_algebra),
    ("reductions_and_indexing", reductions_and_indexing),
    ("signal_ops", signal_ops),
    ("layers", layers),
    ("losses", losses),
    ("classifier_objective", classifier_objective),
    ("refiner_objective_targeted", refiner_objective_targeted),
    ("refiner_objective_non_targeted", refiner_objective_non_targeted),
    ("matmul_is_tight", matmul_is_tight),
    ("random_chains_match_differences", random_chains_match_differences),
];
