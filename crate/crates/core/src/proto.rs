//! Class prototypes and every training loss.
//!
//! The distance between an embedding and a prototype is the squared Euclidean
//! distance. A softmax over negated distances gives a class distribution in
//! embedding space; the prototype losses are its negative log-likelihood
//! (labels known) or its entropy (labels unknown). The prediction losses are
//! the same pair over the classifier head's softmax.
//!
//! All losses are means over the samples of a batch and are recorded on a
//! [`Tape`], so they can be differentiated with respect to whatever fed them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::{Tape, Tensor, Var};

/// One prototype per class, stored as the rows of an `l × m` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    prototypes: Tensor,
}

impl PrototypeSet {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.shape()[0] == 0 || prototypes.shape()[1] == 0 {
            return Err(Error::shape("prototypes", format!("expected l × m, got {:?}", prototypes.shape())));
        }
        let mut prototypes = prototypes;
        prototypes.set_requires_grad(false);
        prototypes.clear_grad();
        Ok(Self { prototypes })
    }

    /// Standard-normal entries scaled by 0.01.
    pub fn random(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let data = (0..classes * dim)
            .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            prototypes: Tensor::from_parts(vec![classes, dim], data),
        }
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    /// Places the prototypes on `tape` as a constant.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.constant(&self.prototypes)
    }

    /// Index of the nearest prototype for each embedding row.
    pub fn nearest(&self, embeddings: &Tensor) -> Result<Vec<usize>> {
        let d = distance_table(embeddings, self)?;
        Ok(d.rows().map(argmin).collect())
    }
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::InvalidLabel { label, classes }),
        None => Ok(()),
    }
}

fn check_rows(embeddings: &Tensor, labels: &[usize]) -> Result<usize> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::shape(
            "prototypes",
            format!("{} labels for embeddings {:?}", labels.len(), embeddings.shape()),
        ));
    }
    Ok(embeddings.shape()[1])
}

/// Per-class mean of `embeddings`; every class in `0..classes` must occur.
pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<PrototypeSet> {
    let m = check_rows(embeddings, labels)?;
    check_labels(labels, classes)?;
    let mut sums = vec![0.0; classes * m];
    let mut counts = vec![0usize; classes];
    for (row, &y) in embeddings.rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y * m..(y + 1) * m].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    for (k, &c) in counts.iter().enumerate() {
        sums[k * m..(k + 1) * m].iter_mut().for_each(|s| *s /= c as f64);
    }
    PrototypeSet::new(Tensor::new(vec![classes, m], sums)?)
}

fn batch_sums(prev: &PrototypeSet, embeddings: &Tensor, labels: &[usize], per_class: usize) -> Result<Vec<f64>> {
    let m = check_rows(embeddings, labels)?;
    let classes = prev.class_count();
    if m != prev.dim() {
        return Err(Error::shape("update_prototypes", format!("embedding dim {m} vs prototype dim {}", prev.dim())));
    }
    check_labels(labels, classes)?;
    let mut counts = vec![0usize; classes];
    let mut sums = prev.prototypes.data().to_vec();
    for (row, &y) in embeddings.rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y * m..(y + 1) * m].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some((class, &actual)) = counts.iter().enumerate().find(|(_, &c)| c != per_class) {
        return Err(Error::UnbalancedBatch {
            class,
            expected: per_class,
            actual,
        });
    }
    Ok(sums)
}

/// `c_k ← (c_k + Σ_{batch, y = k} e) / (N_c + 1)` for a batch holding exactly
/// `per_class` samples of every class.
pub fn update_prototypes(prev: &PrototypeSet, embeddings: &Tensor, labels: &[usize], per_class: usize) -> Result<PrototypeSet> {
    let mut sums = batch_sums(prev, embeddings, labels, per_class)?;
    let denom = (per_class + 1) as f64;
    sums.iter_mut().for_each(|s| *s /= denom);
    PrototypeSet::new(Tensor::new(prev.prototypes.shape().to_vec(), sums)?)
}

/// Same batch sum as [`update_prototypes`] but divided by `|D_k| + 1`, the
/// full class size, as the update rule is literally written.
pub fn update_prototypes_by_class_size(
    prev: &PrototypeSet,
    embeddings: &Tensor,
    labels: &[usize],
    per_class: usize,
    class_sizes: &[usize],
) -> Result<PrototypeSet> {
    if class_sizes.len() != prev.class_count() {
        return Err(Error::shape("update_prototypes", "one class size per prototype"));
    }
    let mut sums = batch_sums(prev, embeddings, labels, per_class)?;
    let m = prev.dim();
    for (k, &size) in class_sizes.iter().enumerate() {
        sums[k * m..(k + 1) * m].iter_mut().for_each(|s| *s /= (size + 1) as f64);
    }
    PrototypeSet::new(Tensor::new(prev.prototypes.shape().to_vec(), sums)?)
}

/// Squared distances `[n × l]` between embeddings and prototypes, on the tape.
pub fn sq_distances(tape: &mut Tape, embeddings: Var, prototypes: Var) -> Result<Var> {
    tape.sq_distances(embeddings, prototypes)
}

/// Plain distance table for inference.
pub fn distance_table(embeddings: &Tensor, protos: &PrototypeSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings);
    let c = protos.bind(&mut tape);
    let d = tape.sq_distances(e, c)?;
    Ok(tape.value(d).clone())
}

fn mean_nll(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.gather_rows(log_probs, labels)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

fn mean_entropy(tape: &mut Tape, log_probs: Var) -> Result<Var> {
    let n = tape.shape(log_probs)[0];
    if n == 0 {
        return Err(Error::shape("entropy", "empty batch"));
    }
    let p = tape.exp(log_probs)?;
    let plogp = tape.mul(p, log_probs)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / n as f64)
}

fn distance_log_probs(tape: &mut Tape, embeddings: Var, prototypes: Var) -> Result<Var> {
    let d = tape.sq_distances(embeddings, prototypes)?;
    let neg = tape.neg(d)?;
    tape.log_softmax(neg)
}

/// Mean over samples of `-log softmax(-d(e_i, c_·))[y_i]`.
pub fn proto_nll_loss(tape: &mut Tape, embeddings: Var, prototypes: Var, labels: &[usize]) -> Result<Var> {
    let lp = distance_log_probs(tape, embeddings, prototypes)?;
    mean_nll(tape, lp, labels)
}

/// Mean over samples of the entropy of the distance softmax.
pub fn proto_entropy_loss(tape: &mut Tape, embeddings: Var, prototypes: Var) -> Result<Var> {
    let lp = distance_log_probs(tape, embeddings, prototypes)?;
    mean_entropy(tape, lp)
}

/// Mean cross-entropy of the head's softmax against `labels`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    mean_nll(tape, lp, labels)
}

/// Mean Shannon entropy (natural log) of the head's softmax.
pub fn prediction_entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    mean_entropy(tape, lp)
}

/// Norm used by the edit penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PNorm {
    L1,
    L2,
}

impl PNorm {
    pub fn from_order(p: u32) -> Result<Self> {
        match p {
            1 => Ok(PNorm::L1),
            2 => Ok(PNorm::L2),
            other => Err(Error::config(format!("p-norm must be 1 or 2, got {other}"))),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            PNorm::L1 => 1,
            PNorm::L2 => 2,
        }
    }
}

/// Mean over samples of `‖refined_i − raw_i‖_p`.
pub fn reg_loss(tape: &mut Tape, refined: Var, raw: Var, norm: PNorm) -> Result<Var> {
    let shape = tape.shape(refined).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("reg_loss", format!("expected non-empty n × d, got {shape:?}")));
    }
    let diff = tape.sub(refined, raw)?;
    let per_sample = match norm {
        PNorm::L1 => {
            let a = tape.abs(diff)?;
            tape.sum_axis(a, 1)?
        }
        PNorm::L2 => {
            let sq = tape.square(diff)?;
            let s = tape.sum_axis(sq, 1)?;
            tape.sqrt(s)?
        }
    };
    tape.mean(per_sample)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the prototype loss while training the classifier.
    pub lambda: f64,
    /// Weight of the edit penalty while training the refiner.
    pub alpha: f64,
    /// Weight of the prototype loss while training the refiner.
    pub beta: f64,
    pub p_norm: PNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.1,
            beta: 1.0,
            p_norm: PNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    /// Labels known: cross-entropy and prototype NLL.
    Targeted,
    /// Labels unknown: both terms become entropies.
    NonTargeted,
}

/// Which classifier-derived terms enter the refiner loss. The edit penalty is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub pred: bool,
    pub proto: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self { pred: true, proto: true }
    }
}

/// Tape handles for each part of the refiner objective.
#[derive(Clone, Copy, Debug)]
pub struct RefinerLoss {
    pub total: Var,
    pub pred: Var,
    pub reg: Var,
    pub proto: Var,
}

/// Everything the refiner objective reads, already on one tape.
#[derive(Clone, Copy, Debug)]
pub struct RefinerLossInputs {
    pub refined: Var,
    pub raw: Var,
    pub embeddings: Var,
    pub logits: Var,
    pub prototypes: Var,
}

/// `ℓ_pred + α·ℓ_reg + β·ℓ_proto` with mode-appropriate prediction and prototype terms.
pub fn refiner_loss(
    tape: &mut Tape,
    inputs: RefinerLossInputs,
    labels: Option<&[usize]>,
    weights: &LossWeights,
    mode: RefineMode,
    terms: LossTerms,
) -> Result<RefinerLoss> {
    let (pred, proto) = match mode {
        RefineMode::Targeted => {
            let labels = labels.ok_or(Error::MissingLabels)?;
            (
                cross_entropy_loss(tape, inputs.logits, labels)?,
                proto_nll_loss(tape, inputs.embeddings, inputs.prototypes, labels)?,
            )
        }
        RefineMode::NonTargeted => (
            prediction_entropy_loss(tape, inputs.logits)?,
            proto_entropy_loss(tape, inputs.embeddings, inputs.prototypes)?,
        ),
    };
    let reg = reg_loss(tape, inputs.refined, inputs.raw, weights.p_norm)?;
    let w_pred = if terms.pred { 1.0 } else { 0.0 };
    let w_proto = if terms.proto { weights.beta } else { 0.0 };
    let a = tape.scale(pred, w_pred)?;
    let b = tape.scale(reg, weights.alpha)?;
    let c = tape.scale(proto, w_proto)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(RefinerLoss { total, pred, reg, proto })
}
