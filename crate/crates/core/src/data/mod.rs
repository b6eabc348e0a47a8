//! Synthetic 1-D patterns: ideal class templates made of Gaussian peaks,
//! corrupted copies standing in for experimental data, and their pairing to
//! the clean sources (used only for evaluation).

mod corrupt;
mod file;
mod generate;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

pub use corrupt::{corrupt, CorruptionSpec};
pub use file::{export_csv, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use generate::{gen_ideal, IdealSpec, Peak, TemplateBank};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Ideal,
    Imperfect,
    GroundTruth,
    Refined,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Ideal => 0,
            Role::Imperfect => 1,
            Role::GroundTruth => 2,
            Role::Refined => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Role::Ideal,
            1 => Role::Imperfect,
            2 => Role::GroundTruth,
            3 => Role::Refined,
            other => return Err(Error::format(format!("unknown dataset role {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Ideal => "ideal",
            Role::Imperfect => "imperfect",
            Role::GroundTruth => "ground-truth",
            Role::Refined => "refined",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub values: Vec<f64>,
    pub label: Option<usize>,
}

/// Clean counterparts of a dataset's patterns: `index[i]` is the position in
/// `patterns` of pattern `i`'s source.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairing {
    pub patterns: Vec<Pattern>,
    pub index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternDataset {
    pub length: usize,
    pub classes: usize,
    pub role: Role,
    pub patterns: Vec<Pattern>,
    pub pairing: Option<Pairing>,
    /// Generation parameters, as ordered `key=value` entries.
    pub manifest: BTreeMap<String, String>,
}

impl PatternDataset {
    pub fn new(length: usize, classes: usize, role: Role, patterns: Vec<Pattern>) -> Result<Self> {
        let ds = Self {
            length,
            classes,
            role,
            patterns,
            pairing: None,
            manifest: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > 255 {
            return Err(Error::config("at most 255 classes fit the dataset format"));
        }
        let check = |p: &Pattern, what: &str| -> Result<()> {
            if p.values.len() != self.length {
                return Err(Error::shape(
                    "dataset",
                    format!("{what} has length {}, expected {}", p.values.len(), self.length),
                ));
            }
            if let Some(bad) = p.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::config(format!("{what} has value {bad} outside [0, 1]")));
            }
            if let Some(y) = p.label.filter(|&y| y >= self.classes) {
                return Err(Error::InvalidLabel {
                    label: y,
                    classes: self.classes,
                });
            }
            Ok(())
        };
        for (i, p) in self.patterns.iter().enumerate() {
            check(p, &format!("pattern {i}"))?;
        }
        if let Some(pairing) = &self.pairing {
            if pairing.index.len() != self.patterns.len() {
                return Err(Error::config("pairing must cover every pattern"));
            }
            for (i, &j) in pairing.index.iter().enumerate() {
                let gt = pairing
                    .patterns
                    .get(j)
                    .ok_or_else(|| Error::config(format!("pattern {i} pairs with missing source {j}")))?;
                check(gt, &format!("ground truth {j}"))?;
                if let (Some(a), Some(b)) = (self.patterns[i].label, gt.label) {
                    if a != b {
                        return Err(Error::config(format!("pattern {i} and its source disagree on label")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.patterns.iter().all(|p| p.label.is_some())
    }

    /// Labels of every pattern; errors if any is missing.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.patterns.iter().map(|p| p.label.ok_or(Error::MissingLabels)).collect()
    }

    /// Indices of the patterns of each class.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, y) in self.labels()?.into_iter().enumerate() {
            out[y].push(i);
        }
        Ok(out)
    }

    /// Stacks the patterns at `indices` into an `n × d` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.length);
        for &i in indices {
            data.extend_from_slice(&self.patterns[i].values);
        }
        Tensor::from_parts(vec![indices.len(), self.length], data)
    }

    pub fn all(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn ground_truth(&self, i: usize) -> Option<&Pattern> {
        let p = self.pairing.as_ref()?;
        p.patterns.get(p.index[i])
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        out.patterns.iter_mut().for_each(|p| p.label = None);
        out
    }

    /// Same patterns with new values, e.g. the refiner's output.
    pub fn with_values(&self, role: Role, values: &Tensor) -> Result<Self> {
        if values.shape() != [self.len(), self.length] {
            return Err(Error::shape("with_values", format!("{:?} for {} patterns", values.shape(), self.len())));
        }
        let mut out = self.clone();
        out.role = role;
        for (p, row) in out.patterns.iter_mut().zip(values.rows()) {
            p.values = row.to_vec();
        }
        out.validate()?;
        Ok(out)
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let patterns = indices.iter().map(|&i| self.patterns[i].clone()).collect();
        let pairing = self.pairing.as_ref().map(|p| Pairing {
            patterns: indices.iter().map(|&i| p.patterns[p.index[i]].clone()).collect(),
            index: (0..indices.len()).collect(),
        });
        Self {
            length: self.length,
            classes: self.classes,
            role: self.role,
            patterns,
            pairing,
            manifest: self.manifest.clone(),
        }
    }
}

/// Stratified, seeded split into `(train, test)`; each class contributes
/// `round(fraction × count)` patterns to the training side.
pub fn split(dataset: &PatternDataset, train_fraction: f64, seed: u64) -> Result<(PatternDataset, PatternDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in dataset.class_indices()?.into_iter().enumerate() {
        let take = (train_fraction * members.len() as f64).round() as usize;
        if take == 0 || take == members.len() {
            return Err(Error::config(format!(
                "class {class} has {} patterns, too few to appear in both splits",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..take]);
        test.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let mut a = dataset.subset(&train);
    let mut b = dataset.subset(&test);
    a.manifest.insert("split".into(), format!("train fraction={train_fraction} seed={seed}"));
    b.manifest.insert("split".into(), format!("test fraction={train_fraction} seed={seed}"));
    Ok((a, b))
}
