use rand::seq::index::sample;
use rand::Rng;

use super::{Pattern, PatternDataset, Role};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

/// One template of Gaussian peaks per class.
///
/// Peak positions come from a shared pool, so classes overlap in some peaks
/// and differ in others; no two classes use the same set of positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    pub length: usize,
    pub templates: Vec<Vec<Peak>>,
}

const PEAKS_PER_CLASS: usize = 5;

impl TemplateBank {
    pub fn generate(classes: usize, length: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        if length < 64 {
            return Err(Error::config(format!("pattern length must be at least 64, got {length}")));
        }
        let mut rng = seeded_rng(seed ^ 0x7e3a_91c5_0d4b_2f68);
        let pool_size = (2 * PEAKS_PER_CLASS + classes).min(length / 8);
        let lo = 0.06 * length as f64;
        let span = 0.88 * length as f64;
        // Evenly spread pool positions with a little jitter keep peaks separable.
        let pool: Vec<f64> = (0..pool_size)
            .map(|i| lo + span * (i as f64 + 0.5 + rng.random_range(-0.25..0.25)) / pool_size as f64)
            .collect();
        let scale = length as f64 / 256.0;
        let mut templates: Vec<Vec<Peak>> = Vec::with_capacity(classes);
        while templates.len() < classes {
            let mut picks = sample(&mut rng, pool_size, PEAKS_PER_CLASS).into_vec();
            picks.sort_unstable();
            let mut peaks: Vec<Peak> = picks
                .iter()
                .map(|&j| Peak {
                    center: pool[j],
                    width: scale * rng.random_range(1.5..3.5),
                    height: rng.random_range(0.25..1.0),
                })
                .collect();
            let top = rng.random_range(0..PEAKS_PER_CLASS);
            peaks[top].height = 1.0;
            let same_positions = templates
                .iter()
                .any(|t| t.iter().map(|p| p.center).eq(peaks.iter().map(|p| p.center)));
            if !same_positions {
                templates.push(peaks);
            }
        }
        Ok(Self { length, templates })
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    /// Renders peaks into a pattern normalized to a maximum of 1.
    pub fn render(&self, peaks: &[Peak]) -> Vec<f64> {
        let mut values = vec![0.0; self.length];
        for p in peaks {
            let reach = (6.0 * p.width).ceil() as isize;
            let c = p.center.round() as isize;
            for i in (c - reach).max(0)..(c + reach + 1).min(self.length as isize) {
                let z = (i as f64 - p.center) / p.width;
                values[i as usize] += p.height * (-0.5 * z * z).exp();
            }
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v = (*v / max).min(1.0));
        }
        values
    }

    pub fn template(&self, class: usize) -> Vec<f64> {
        self.render(&self.templates[class])
    }

    /// `per_class` samples of every class with peak heights scaled by
    /// `1 + height_jitter · U(-1, 1)`, in class-major order.
    pub fn sample(&self, per_class: usize, height_jitter: f64, seed: u64) -> Vec<Pattern> {
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(per_class * self.classes());
        for (class, template) in self.templates.iter().enumerate() {
            for _ in 0..per_class {
                let peaks: Vec<Peak> = template
                    .iter()
                    .map(|p| {
                        let factor = if height_jitter > 0.0 {
                            1.0 + height_jitter * rng.random_range(-1.0..1.0)
                        } else {
                            1.0
                        };
                        Peak {
                            height: p.height * factor,
                            ..*p
                        }
                    })
                    .collect();
                out.push(Pattern {
                    values: self.render(&peaks),
                    label: Some(class),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdealSpec {
    pub classes: usize,
    pub per_class: usize,
    pub length: usize,
    pub seed: u64,
    pub height_jitter: f64,
    /// Selects an independent sample stream over the same templates.
    pub stream: u64,
}

impl IdealSpec {
    pub fn new(classes: usize, per_class: usize, length: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            length,
            seed,
            height_jitter: 0.15,
            stream: 0,
        }
    }
}

/// Ideal dataset drawn from the template bank for `spec.seed`.
pub fn gen_ideal(spec: &IdealSpec) -> Result<PatternDataset> {
    if spec.per_class == 0 {
        return Err(Error::config("need at least one pattern per class"));
    }
    if !(spec.height_jitter >= 0.0 && spec.height_jitter < 1.0) {
        return Err(Error::config("height jitter must lie in [0, 1)"));
    }
    let bank = TemplateBank::generate(spec.classes, spec.length, spec.seed)?;
    let sample_seed = spec.seed.wrapping_add(1).wrapping_add(spec.stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let patterns = bank.sample(spec.per_class, spec.height_jitter, sample_seed);
    let mut ds = PatternDataset::new(spec.length, spec.classes, Role::Ideal, patterns)?;
    ds.manifest.insert("generator".into(), "gaussian-peaks".into());
    ds.manifest.insert("seed".into(), spec.seed.to_string());
    ds.manifest.insert("per_class".into(), spec.per_class.to_string());
    ds.manifest.insert("height_jitter".into(), spec.height_jitter.to_string());
    ds.manifest.insert("stream".into(), spec.stream.to_string());
    Ok(ds)
}
