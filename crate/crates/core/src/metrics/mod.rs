//! Accuracy, pattern differences against ground truth, and embedding
//! projections.

mod pca;
mod report;

pub use pca::{export_embeddings_2d, pca_2d, Projection};
pub use report::{parse_samples_csv, samples_csv, summary_csv, table, write_report};

use crate::data::PatternDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, ClassifierModel, RefinerModel};
use crate::par::{self, Parallelism};
use crate::proto::PrototypeSet;
use crate::tensor::Tensor;

/// Smoothing added to both patterns before the KL divergence.
pub const KL_EPSILON: f64 = 1e-8;
const CHUNK_ROWS: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PatternDiff {
    pub l1: f64,
    pub l2: f64,
    pub kl: f64,
    pub ncc: f64,
}

/// ℓ1, ℓ2, KL(a‖b) and zero-normalized cross-correlation of two patterns.
pub fn pattern_diff(a: &[f64], b: &[f64]) -> Result<PatternDiff> {
    if a.len() != b.len() {
        return Err(Error::shape("pattern_diff", format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("pattern_diff"));
    }
    let mut l1 = 0.0;
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        l1 += (x - y).abs();
        sq += (x - y) * (x - y);
    }
    Ok(PatternDiff {
        l1,
        l2: sq.sqrt(),
        kl: kl_divergence(a, b),
        ncc: ncc(a, b),
    })
}

fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    let za: f64 = a.iter().map(|x| x + KL_EPSILON).sum();
    let zb: f64 = b.iter().map(|y| y + KL_EPSILON).sum();
    let kl: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let p = (x + KL_EPSILON) / za;
            let q = (y + KL_EPSILON) / zb;
            p * (p / q).ln()
        })
        .sum();
    kl.max(0.0)
}

/// Pearson correlation; a constant pattern correlates 1 with an identical
/// pattern and 0 with anything else.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Median taking the lower middle element for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Applies `f` to row chunks of `x` in parallel and restacks the outputs.
fn chunked(x: &Tensor, p: Parallelism, f: impl Fn(&Tensor) -> Result<Tensor> + Sync + Send) -> Result<Tensor> {
    let n = x.shape()[0];
    let width = if n == 0 { 0 } else { x.len() / n };
    let chunks: Vec<Tensor> = x
        .data()
        .chunks(CHUNK_ROWS * width.max(1))
        .map(|c| Tensor::from_parts(vec![c.len() / width.max(1), width], c.to_vec()))
        .collect();
    let outs = par::map(&chunks, p, |c| f(c)).into_iter().collect::<Result<Vec<_>>>()?;
    let cols = outs.first().map_or(0, |o| o.shape()[1]);
    let data: Vec<f64> = outs.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::from_parts(vec![n, cols], data))
}

pub fn logits(classifier: &ClassifierModel, x: &Tensor, p: Parallelism) -> Result<Tensor> {
    chunked(x, p, |c| classifier.forward(c).map(|(_, l)| l))
}

pub fn embeddings(classifier: &ClassifierModel, x: &Tensor, p: Parallelism) -> Result<Tensor> {
    chunked(x, p, |c| classifier.forward(c).map(|(e, _)| e))
}

pub fn refine(refiner: &RefinerModel, x: &Tensor, p: Parallelism) -> Result<Tensor> {
    chunked(x, p, |c| refiner.forward(c))
}

fn hits(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let correct = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of rows whose softmax argmax equals the label.
pub fn accuracy(classifier: &ClassifierModel, patterns: &Tensor, labels: &[usize], p: Parallelism) -> Result<f64> {
    let l = logits(classifier, patterns, p)?;
    let predicted: Vec<usize> = l.rows().map(argmax).collect();
    hits(&predicted, labels)
}

/// Fraction of rows whose nearest prototype is the labelled class.
pub fn nearest_prototype_accuracy(
    classifier: &ClassifierModel,
    protos: &PrototypeSet,
    patterns: &Tensor,
    labels: &[usize],
    p: Parallelism,
) -> Result<f64> {
    let e = embeddings(classifier, patterns, p)?;
    hits(&protos.nearest(&e)?, labels)
}

/// Mean Shannon entropy of the softmax of each logit row.
pub fn mean_prediction_entropy(logits: &Tensor) -> Result<f64> {
    let cols = logits.shape().get(1).copied().unwrap_or(0);
    let per_row: Vec<f64> = logits
        .rows()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            -row.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>()
        })
        .collect();
    if cols == 0 {
        return Err(Error::Empty("mean_prediction_entropy"));
    }
    mean(&per_row).ok_or(Error::Empty("mean_prediction_entropy"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub raw: PatternDiff,
    pub refined: PatternDiff,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregates {
    pub mean: PatternDiff,
    pub median: PatternDiff,
}

impl Aggregates {
    pub fn from_diffs(diffs: &[PatternDiff]) -> Option<Self> {
        let col = |f: fn(&PatternDiff) -> f64| diffs.iter().map(f).collect::<Vec<f64>>();
        let (l1, l2, kl, ncc) = (col(|d| d.l1), col(|d| d.l2), col(|d| d.kl), col(|d| d.ncc));
        Some(Self {
            mean: PatternDiff {
                l1: mean(&l1)?,
                l2: mean(&l2)?,
                kl: mean(&kl)?,
                ncc: mean(&ncc)?,
            },
            median: PatternDiff {
                l1: median(&l1)?,
                l2: median(&l2)?,
                kl: median(&kl)?,
                ncc: median(&ncc)?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quality {
    pub samples: Vec<SampleRecord>,
    pub raw: Aggregates,
    pub refined: Aggregates,
    /// Fractions of samples whose refined pattern is strictly closer to the ground truth.
    pub l1_improved: f64,
    pub kl_improved: f64,
}

impl Quality {
    pub fn from_samples(samples: Vec<SampleRecord>) -> Result<Self> {
        let raw: Vec<PatternDiff> = samples.iter().map(|s| s.raw).collect();
        let refined: Vec<PatternDiff> = samples.iter().map(|s| s.refined).collect();
        let n = samples.len() as f64;
        let better = |f: fn(&SampleRecord) -> bool| samples.iter().filter(|s| f(s)).count() as f64 / n;
        Ok(Self {
            raw: Aggregates::from_diffs(&raw).ok_or(Error::Empty("quality report"))?,
            refined: Aggregates::from_diffs(&refined).ok_or(Error::Empty("quality report"))?,
            l1_improved: better(|s| s.refined.l1 < s.raw.l1),
            kl_improved: better(|s| s.refined.kl < s.raw.kl),
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub count: usize,
    /// Present when the dataset is labelled.
    pub raw_accuracy: Option<f64>,
    pub refined_accuracy: Option<f64>,
    pub raw_entropy: f64,
    pub refined_entropy: f64,
    /// Present when the dataset carries ground-truth pairing.
    pub quality: Option<Quality>,
}

/// Scores already-refined patterns against the raw ones.
pub fn evaluate_outputs(
    classifier: &ClassifierModel,
    dataset: &PatternDataset,
    refined: &Tensor,
    p: Parallelism,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation"));
    }
    let raw = dataset.all();
    if refined.shape() != raw.shape() {
        return Err(Error::shape("evaluate", format!("refined {:?} for raw {:?}", refined.shape(), raw.shape())));
    }
    let raw_logits = logits(classifier, &raw, p)?;
    let refined_logits = logits(classifier, refined, p)?;
    let (raw_accuracy, refined_accuracy) = match dataset.labels() {
        Ok(labels) => {
            let pr: Vec<usize> = raw_logits.rows().map(argmax).collect();
            let pf: Vec<usize> = refined_logits.rows().map(argmax).collect();
            (Some(hits(&pr, &labels)?), Some(hits(&pf, &labels)?))
        }
        Err(_) => (None, None),
    };
    let quality = match &dataset.pairing {
        None => None,
        Some(_) => {
            let ids: Vec<usize> = (0..dataset.len()).collect();
            let samples = par::map(&ids, p, |&i| -> Result<SampleRecord> {
                let gt = &dataset.ground_truth(i).ok_or(Error::MissingPairing)?.values;
                Ok(SampleRecord {
                    id: i,
                    raw: pattern_diff(raw.row(i), gt)?,
                    refined: pattern_diff(refined.row(i), gt)?,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            Some(Quality::from_samples(samples)?)
        }
    };
    Ok(MetricsReport {
        count: dataset.len(),
        raw_accuracy,
        refined_accuracy,
        raw_entropy: mean_prediction_entropy(&raw_logits)?,
        refined_entropy: mean_prediction_entropy(&refined_logits)?,
        quality,
    })
}

/// Full evaluation of a refiner on a paired imperfect test set.
pub fn evaluate_refinement(
    refiner: &RefinerModel,
    classifier: &ClassifierModel,
    dataset: &PatternDataset,
    p: Parallelism,
) -> Result<MetricsReport> {
    if dataset.pairing.is_none() {
        return Err(Error::MissingPairing);
    }
    let refined = refine(refiner, &dataset.all(), p)?;
    evaluate_outputs(classifier, dataset, &refined, p)
}
