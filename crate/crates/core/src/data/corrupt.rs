use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Pairing, Pattern, PatternDataset, Role};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// Artifact model turning ideal patterns into imperfect ones.
///
/// Steps run in a fixed order: peak split, peak shift, amplitude jitter,
/// baseline drift, additive noise, clamp to `[0, 1]`. A zero parameter
/// skips its step entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub noise_std: f64,
    pub drift_amplitude: f64,
    /// Largest displacement, in positions, of the smooth axis warp.
    pub shift_max: f64,
    /// Chance that a detected peak is replaced by three dimmer ones.
    pub split_probability: f64,
    /// Gain curve amplitude: values are scaled by a smooth factor in `[1 - j, 1 + j]`.
    pub amplitude_jitter: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            drift_amplitude: 0.4,
            shift_max: 3.0,
            split_probability: 0.2,
            amplitude_jitter: 0.3,
            seed: 17,
        }
    }
}

impl CorruptionSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            noise_std: 0.0,
            drift_amplitude: 0.0,
            shift_max: 0.0,
            split_probability: 0.0,
            amplitude_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            ("noise_std", self.noise_std),
            ("drift_amplitude", self.drift_amplitude),
            ("shift_max", self.shift_max),
            ("amplitude_jitter", self.amplitude_jitter),
        ];
        for (name, v) in magnitudes {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.split_probability) {
            return Err(Error::config(format!(
                "split_probability must lie in [0, 1], got {}",
                self.split_probability
            )));
        }
        Ok(())
    }

    pub(crate) fn manifest_entries(&self) -> [(&'static str, String); 6] {
        [
            ("corruption.noise_std", self.noise_std.to_string()),
            ("corruption.drift_amplitude", self.drift_amplitude.to_string()),
            ("corruption.shift_max", self.shift_max.to_string()),
            ("corruption.split_probability", self.split_probability.to_string()),
            ("corruption.amplitude_jitter", self.amplitude_jitter.to_string()),
            ("corruption.seed", self.seed.to_string()),
        ]
    }
}

/// Corrupts every pattern of `ideal`, keeping labels and recording the
/// source of each output as its ground truth.
pub fn corrupt(ideal: &PatternDataset, spec: &CorruptionSpec) -> Result<PatternDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let patterns: Vec<Pattern> = ideal
        .patterns
        .iter()
        .map(|p| Pattern {
            values: corrupt_one(&p.values, spec, &mut rng),
            label: p.label,
        })
        .collect();
    let mut manifest = ideal.manifest.clone();
    for (k, v) in spec.manifest_entries() {
        manifest.insert(k.into(), v);
    }
    let out = PatternDataset {
        length: ideal.length,
        classes: ideal.classes,
        role: Role::Imperfect,
        pairing: Some(Pairing {
            patterns: ideal.patterns.clone(),
            index: (0..ideal.len()).collect(),
        }),
        patterns,
        manifest,
    };
    out.validate()?;
    Ok(out)
}

fn corrupt_one(x: &[f64], spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = x.len();
    let mut v = x.to_vec();
    if spec.split_probability > 0.0 {
        v = split_peaks(&v, spec.split_probability, rng);
    }
    if spec.shift_max > 0.0 {
        let curve = smooth_curve(d, rng);
        let shifted: Vec<f64> = (0..d)
            .map(|i| sample_linear(&v, i as f64 + spec.shift_max * (2.0 * curve[i] - 1.0)))
            .collect();
        v = shifted;
    }
    if spec.amplitude_jitter > 0.0 {
        let curve = smooth_curve(d, rng);
        for (vi, c) in v.iter_mut().zip(curve) {
            *vi *= 1.0 + spec.amplitude_jitter * (2.0 * c - 1.0);
        }
    }
    if spec.drift_amplitude > 0.0 {
        let curve = smooth_curve(d, rng);
        for (vi, c) in v.iter_mut().zip(curve) {
            *vi += spec.drift_amplitude * c;
        }
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated stddev");
        for vi in v.iter_mut() {
            *vi += normal.sample(rng);
        }
    }
    v.iter_mut().for_each(|vi| *vi = vi.clamp(0.0, 1.0));
    v
}

/// Random low-frequency curve rescaled to `[0, 1]`.
fn smooth_curve(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.1..1.0),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..d)
        .map(|i| {
            let t = i as f64 / d as f64;
            waves
                .iter()
                .map(|(a, f, phase)| a * (std::f64::consts::TAU * f * t + phase).cos())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    raw.into_iter()
        .map(|r| if span > 0.0 { (r - lo) / span } else { 0.5 })
        .collect()
}

fn sample_linear(v: &[f64], pos: f64) -> f64 {
    if pos < 0.0 || pos > (v.len() - 1) as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= v.len() {
        return v[i];
    }
    v[i] * (1.0 - frac) + v[i + 1] * frac
}

/// Replaces selected local maxima by three dimmer copies spread around the
/// original position.
fn split_peaks(v: &[f64], probability: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = v.len();
    let half = (d / 40).max(3);
    let sep = (half as f64 * 0.75).round() as isize;
    let peaks: Vec<usize> = (0..d)
        .filter(|&i| {
            v[i] > 0.15 && {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(d - 1);
                (lo..=hi).all(|j| v[j] < v[i] || (v[j] == v[i] && j >= i))
            }
        })
        .collect();
    let mut out = v.to_vec();
    for c in peaks {
        if rng.random::<f64>() >= probability {
            continue;
        }
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(d - 1);
        let bump: Vec<(isize, f64)> = (lo..=hi).map(|j| (j as isize, v[j])).collect();
        for &(j, b) in &bump {
            out[j as usize] -= b;
        }
        for (offset, weight) in [(-sep, 0.45), (0, 0.3), (sep, 0.45)] {
            for &(j, b) in &bump {
                let t = j + offset;
                if (0..d as isize).contains(&t) {
                    out[t as usize] += weight * b;
                }
            }
        }
    }
    out
}
