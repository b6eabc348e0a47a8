//! Optimizers and the two training loops: the prototypical classifier on
//! ideal data, and the refiner on imperfect data with the classifier frozen.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatternDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{argmax, seeded_rng, ClassifierArch, ClassifierModel, Param, RefinerArch, RefinerModel};
use crate::par::{self, Parallelism};
use crate::proto::{
    cross_entropy_loss, proto_nll_loss, refiner_loss, update_prototypes, update_prototypes_by_class_size,
    LossTerms, LossWeights, PrototypeSet, RefineMode, RefinerLossInputs,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::config(format!("unknown optimizer {other:?} (adam | rmsprop)"))),
        }
    }
}

/// Moment buffers and hyperparameters of one optimizer. Buffers are sized
/// on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// First-moment buffers (adam only).
    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    /// Second-moment (adam) or mean-square (rmsprop) buffers.
    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// Applies one update to every parameter from its stored gradient, then
/// clears the gradients.
pub fn optimizer_step(params: &mut [&mut Param], state: &mut OptimizerState) -> Result<()> {
    for p in params.iter() {
        if p.value.grad().is_none() {
            return Err(Error::MissingGradient(p.name.clone()));
        }
    }
    if state.step == 0 {
        state.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.second = state.first.clone();
    } else if state.second.len() != params.len()
        || state.second.iter().zip(params.iter()).any(|(b, p)| b.len() != p.value.len())
    {
        return Err(Error::shape("optimizer_step", "parameters changed shape between steps"));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.learning_rate;
    for (k, p) in params.iter_mut().enumerate() {
        let g = p.value.grad().expect("checked above").to_vec();
        let v2 = &mut state.second[k];
        match state.kind {
            OptimizerKind::Adam => {
                let m = &mut state.first[k];
                let c1 = 1.0 - state.beta1.powi(t);
                let c2 = 1.0 - state.beta2.powi(t);
                let data = p.value.data_mut();
                for i in 0..g.len() {
                    m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                    v2[i] = state.beta2 * v2[i] + (1.0 - state.beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v2[i] / c2;
                    data[i] -= lr * mhat / (vhat.sqrt() + state.epsilon);
                }
            }
            OptimizerKind::RmsProp => {
                let data = p.value.data_mut();
                for i in 0..g.len() {
                    v2[i] = state.decay * v2[i] + (1.0 - state.decay) * g[i] * g[i];
                    data[i] -= lr * g[i] / (v2[i].sqrt() + state.epsilon);
                }
            }
        }
        p.value.clear_grad();
    }
    Ok(())
}

/// How prototypes absorb each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeRule {
    /// `(previous + batch sum) / (N_c + 1)`.
    Batch,
    /// `(previous + batch sum) / (|class| + 1)`.
    ClassSize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batches per epoch; `None` means one pass over the data.
    pub batches_per_epoch: Option<usize>,
    /// Samples per class in a classifier batch, and the refiner batch size.
    pub per_class: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mode: RefineMode,
    pub terms: LossTerms,
    pub freeze_prototypes: bool,
    pub prototype_rule: PrototypeRule,
}

impl TrainConfig {
    pub fn classifier() -> Self {
        Self {
            epochs: 50,
            batches_per_epoch: Some(25),
            per_class: 8,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            mode: RefineMode::Targeted,
            terms: LossTerms::default(),
            freeze_prototypes: false,
            prototype_rule: PrototypeRule::Batch,
        }
    }

    pub fn refiner() -> Self {
        Self {
            epochs: 30,
            batches_per_epoch: None,
            per_class: 16,
            ..Self::classifier()
        }
    }

    /// Refiner preset for unlabeled data. The entropy terms are far smaller
    /// than cross-entropy, so the edit penalty is rescaled.
    pub fn refiner_non_targeted() -> Self {
        let mut config = Self::refiner();
        config.mode = RefineMode::NonTargeted;
        config.weights.alpha = 1e-3;
        config
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.batches_per_epoch == Some(0) {
            return Err(Error::config("batch counts and per-class sizes must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        self.weights.validate()
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState::new(self.optimizer, self.learning_rate)
    }
}

/// `N_c` indices per class in shuffled order, drawn without replacement
/// when the class is large enough and with replacement otherwise.
pub fn balanced_batch(
    dataset: &PatternDataset,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let idx = balanced_indices(&dataset.class_indices()?, per_class, rng)?;
    let labels = idx.iter().map(|&i| dataset.patterns[i].label.expect("labelled")).collect();
    Ok((dataset.batch(&idx), labels))
}

fn balanced_indices(classes: &[Vec<usize>], per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(classes.len() * per_class);
    for (k, members) in classes.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass(k));
        }
        if members.len() >= per_class {
            idx.extend(members.choose_multiple(rng, per_class).copied());
        } else {
            idx.extend((0..per_class).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    idx.shuffle(rng);
    Ok(idx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub proto_nll: f64,
    /// Head accuracy on the training batches, measured before each step.
    pub accuracy: f64,
}

impl ClassifierEpochStats {
    pub const CSV_HEADER: &'static str = "epoch,loss,cross_entropy,proto_nll,accuracy";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.loss, self.cross_entropy, self.proto_nll, self.accuracy
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinerEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub pred: f64,
    pub reg: f64,
    pub proto: f64,
}

impl RefinerEpochStats {
    pub const CSV_HEADER: &'static str = "epoch,loss,pred,reg,proto";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.loss, self.pred, self.reg, self.proto)
    }
}

/// One epoch of prototypical classifier training: `T` balanced batches,
/// each minimizing `L_C + λ·L_F` for the network and then folding the
/// batch embeddings into the prototypes.
pub fn train_classifier_epoch(
    model: &mut ClassifierModel,
    protos: &mut PrototypeSet,
    optimizer: &mut OptimizerState,
    dataset: &PatternDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<ClassifierEpochStats> {
    check_classifier_data(model, protos, dataset)?;
    let classes = dataset.class_indices()?;
    let class_sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    let batches = config.batches_per_epoch.unwrap_or_else(|| {
        let rows = classes.len() * config.per_class;
        dataset.len().div_ceil(rows).max(1)
    });
    let mut sums = [0.0; 4];
    for _ in 0..batches {
        let idx = balanced_indices(&classes, config.per_class, rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.patterns[i].label.expect("labelled")).collect();
        let batch = dataset.batch(&idx);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(&batch);
        let (emb, logits) = model.forward_on(&mut tape, &bound, x)?;
        let c = protos.bind(&mut tape);
        let ce = cross_entropy_loss(&mut tape, logits, &labels)?;
        let nll = proto_nll_loss(&mut tape, emb, c, &labels)?;
        let weighted = tape.scale(nll, config.weights.lambda)?;
        let loss = tape.add(ce, weighted)?;

        let correct = tape
            .value(logits)
            .rows()
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        sums[0] += tape.value(loss).item();
        sums[1] += tape.value(ce).item();
        sums[2] += tape.value(nll).item();
        sums[3] += correct as f64 / labels.len() as f64;
        let embeddings = tape.value(emb).clone();

        let vars: Vec<_> = bound.vars().collect();
        let grads = tape.backward(loss)?;
        let mut params: Vec<&mut Param> = model.params_mut().collect();
        for (p, v) in params.iter_mut().zip(&vars) {
            let g = grads.get(*v).ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            p.value.set_grad(g.to_vec())?;
        }
        optimizer_step(&mut params, optimizer)?;

        if !config.freeze_prototypes {
            *protos = match config.prototype_rule {
                PrototypeRule::Batch => update_prototypes(protos, &embeddings, &labels, config.per_class)?,
                PrototypeRule::ClassSize => {
                    update_prototypes_by_class_size(protos, &embeddings, &labels, config.per_class, &class_sizes)?
                }
            };
        }
    }
    let n = batches as f64;
    Ok(ClassifierEpochStats {
        epoch,
        loss: sums[0] / n,
        cross_entropy: sums[1] / n,
        proto_nll: sums[2] / n,
        accuracy: sums[3] / n,
    })
}

fn check_classifier_data(model: &ClassifierModel, protos: &PrototypeSet, dataset: &PatternDataset) -> Result<()> {
    if dataset.length != model.input_length() {
        return Err(Error::shape(
            "train",
            format!("dataset length {} for model input {}", dataset.length, model.input_length()),
        ));
    }
    if dataset.classes != model.classes() || protos.class_count() != model.classes() {
        return Err(Error::shape("train", "class counts of dataset, model and prototypes differ"));
    }
    if protos.dim() != model.embedding_dim() {
        return Err(Error::shape("train", "prototype and embedding dimensions differ"));
    }
    Ok(())
}

/// One epoch of refiner training over shuffled batches. The classifier and
/// prototypes enter the tape as constants: gradients pass through them to
/// the refiner but nothing about them changes.
#[allow(clippy::too_many_arguments)]
pub fn train_refiner_epoch(
    refiner: &mut RefinerModel,
    classifier: &ClassifierModel,
    protos: &PrototypeSet,
    optimizer: &mut OptimizerState,
    dataset: &PatternDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<RefinerEpochStats> {
    check_classifier_data(classifier, protos, dataset)?;
    if refiner.input_length() != classifier.input_length() {
        return Err(Error::shape(
            "train_refiner",
            format!(
                "refiner input {} for classifier input {}",
                refiner.input_length(),
                classifier.input_length()
            ),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("refiner training"));
    }
    let labels = match config.mode {
        RefineMode::Targeted => Some(dataset.labels()?),
        RefineMode::NonTargeted => None,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut batches: Vec<&[usize]> = order.chunks(config.per_class).collect();
    if let Some(cap) = config.batches_per_epoch {
        batches.truncate(cap);
    }
    let mut sums = [0.0; 4];
    for idx in &batches {
        let batch = dataset.batch(idx);
        let batch_labels: Option<Vec<usize>> = labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());

        let mut tape = Tape::new();
        let vars = refiner.bind(&mut tape, true);
        let x = tape.constant(&batch);
        let r = refiner.forward_on(&mut tape, &vars, x)?;
        let frozen = classifier.bind(&mut tape, false);
        let (emb, logits) = classifier.forward_on(&mut tape, &frozen, r)?;
        let c = protos.bind(&mut tape);
        let inputs = RefinerLossInputs {
            refined: r,
            raw: x,
            embeddings: emb,
            logits,
            prototypes: c,
        };
        let loss = refiner_loss(
            &mut tape,
            inputs,
            batch_labels.as_deref(),
            &config.weights,
            config.mode,
            config.terms,
        )?;
        sums[0] += tape.value(loss.total).item();
        sums[1] += tape.value(loss.pred).item();
        sums[2] += tape.value(loss.reg).item();
        sums[3] += tape.value(loss.proto).item();

        let grads = tape.backward(loss.total)?;
        let mut params: Vec<&mut Param> = refiner.params_mut().iter_mut().collect();
        for (p, v) in params.iter_mut().zip(&vars) {
            let g = grads.get(*v).ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            p.value.set_grad(g.to_vec())?;
        }
        optimizer_step(&mut params, optimizer)?;
    }
    let n = batches.len() as f64;
    Ok(RefinerEpochStats {
        epoch,
        loss: sums[0] / n,
        pred: sums[1] / n,
        reg: sums[2] / n,
        proto: sums[3] / n,
    })
}

/// Fresh classifier and prototypes trained for `config.epochs` epochs;
/// `on_epoch` sees each epoch's stats and the current state.
pub fn train_classifier(
    arch: &ClassifierArch,
    dataset: &PatternDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&ClassifierEpochStats, &ClassifierModel, &PrototypeSet) -> Result<()>,
) -> Result<(ClassifierModel, PrototypeSet, Vec<ClassifierEpochStats>)> {
    config.validate()?;
    let mut model = ClassifierModel::new(arch, config.seed)?;
    let mut protos = PrototypeSet::random(model.classes(), model.embedding_dim(), config.seed.wrapping_add(1));
    let mut optimizer = config.optimizer_state();
    let mut rng = seeded_rng(config.seed.wrapping_add(2));
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let stats = train_classifier_epoch(&mut model, &mut protos, &mut optimizer, dataset, config, &mut rng, epoch)?;
        on_epoch(&stats, &model, &protos)?;
        history.push(stats);
    }
    Ok((model, protos, history))
}

/// Fresh refiner trained against a frozen classifier.
pub fn train_refiner(
    arch: &RefinerArch,
    classifier: &ClassifierModel,
    protos: &PrototypeSet,
    dataset: &PatternDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&RefinerEpochStats, &RefinerModel) -> Result<()>,
) -> Result<(RefinerModel, Vec<RefinerEpochStats>)> {
    config.validate()?;
    let mut refiner = RefinerModel::new(arch, config.seed)?;
    let mut optimizer = config.optimizer_state();
    let mut rng = seeded_rng(config.seed.wrapping_add(3));
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let stats = train_refiner_epoch(
            &mut refiner,
            classifier,
            protos,
            &mut optimizer,
            dataset,
            config,
            &mut rng,
            epoch,
        )?;
        on_epoch(&stats, &refiner)?;
        history.push(stats);
    }
    Ok((refiner, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub terms: LossTerms,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seed: u64,
    pub raw_accuracy: f64,
    pub rows: Vec<AblationRow>,
}

/// Loss-term combinations in report order: prototype only, prediction only, both.
pub const ABLATION_TERMS: [LossTerms; 3] = [
    LossTerms { pred: false, proto: true },
    LossTerms { pred: true, proto: false },
    LossTerms { pred: true, proto: true },
];

fn flag(b: bool) -> &'static str {
    if b {
        "Y"
    } else {
        "N"
    }
}

impl AblationReport {
    /// Index of the row with both terms.
    pub const FULL_ROW: usize = 2;

    pub fn table(&self) -> String {
        let mut s = format!("seed {}  raw accuracy {:.4}\n", self.seed, self.raw_accuracy);
        s.push_str("proto  pred  reg  accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<7}{:<6}{:<5}{:.4}\n",
                flag(r.terms.proto),
                flag(r.terms.pred),
                "Y",
                r.accuracy
            ));
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("seed,proto,pred,reg,accuracy,raw_accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},Y,{},{}\n",
                self.seed,
                flag(r.terms.proto),
                flag(r.terms.pred),
                r.accuracy,
                self.raw_accuracy
            ));
        }
        s
    }
}

/// Trains the three ablation refiners for every seed (in parallel) and
/// scores each on `test`.
pub fn run_ablation(
    arch: &RefinerArch,
    classifier: &ClassifierModel,
    protos: &PrototypeSet,
    train: &PatternDataset,
    test: &PatternDataset,
    base: &TrainConfig,
    seeds: &[u64],
    p: Parallelism,
) -> Result<Vec<AblationReport>> {
    let labels = test.labels()?;
    let test_x = test.all();
    let raw_accuracy = metrics::accuracy(classifier, &test_x, &labels, p)?;
    let jobs: Vec<(u64, LossTerms)> = seeds
        .iter()
        .flat_map(|&s| ABLATION_TERMS.iter().map(move |&t| (s, t)))
        .collect();
    let results = par::map(&jobs, p, |&(seed, terms)| -> Result<f64> {
        let config = TrainConfig {
            seed,
            terms,
            ..base.clone()
        };
        let (refiner, _) = train_refiner(arch, classifier, protos, train, &config, |_, _| Ok(()))?;
        let refined = metrics::refine(&refiner, &test_x, Parallelism::Sequential)?;
        metrics::accuracy(classifier, &refined, &labels, Parallelism::Sequential)
    });
    let mut results = results.into_iter();
    seeds
        .iter()
        .map(|&seed| {
            let rows = ABLATION_TERMS
                .iter()
                .map(|&terms| {
                    Ok(AblationRow {
                        terms,
                        accuracy: results.next().expect("one result per job")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationReport {
                seed,
                raw_accuracy,
                rows,
            })
        })
        .collect()
}
