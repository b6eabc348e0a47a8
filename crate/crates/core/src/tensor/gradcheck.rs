//! Central finite-difference checks of tape gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// Which perturbations to compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// Every coordinate of every input.
    Coordinates,
    /// This many random unit directions per input.
    Directions(usize),
}

/// Worst norm-wise relative error between the tape gradient and central
/// differences with step `h`, over all inputs.
///
/// Non-scalar outputs are reduced with a fixed random weighting, so every
/// output element contributes to the check.
pub fn max_relative_error(
    inputs: &[Tensor],
    h: f64,
    probe: Probe,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(tape.shape(out).to_vec(), w)?
    };
    let eval = |xs: &[Tensor], track: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| if track { tape.leaf(&t.clone().trainable()) } else { tape.constant(t) })
            .collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.constant(&weights);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        Ok((tape, vars, loss))
    };
    let value = |xs: &[Tensor]| -> Result<f64> {
        let (tape, _, loss) = eval(xs, false)?;
        Ok(tape.value(loss).item())
    };

    let (tape, vars, loss) = eval(inputs, true)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (j, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[j])
            .ok_or_else(|| Error::MissingGradient(format!("input {j}")))?
            .to_vec();
        let directions: Vec<Vec<f64>> = match probe {
            Probe::Coordinates => (0..input.len())
                .map(|i| (0..input.len()).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
                .collect(),
            Probe::Directions(count) => (0..count)
                .map(|_| {
                    let mut v: Vec<f64> = (0..input.len()).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|x| *x /= norm);
                    v
                })
                .collect(),
        };
        let mut a = Vec::with_capacity(directions.len());
        let mut n = Vec::with_capacity(directions.len());
        for v in &directions {
            let shifted = |sign: f64| -> Result<f64> {
                let mut xs = inputs.to_vec();
                let data: Vec<f64> = input.data().iter().zip(v).map(|(x, d)| x + sign * h * d).collect();
                xs[j] = Tensor::new(input.shape().to_vec(), data)?;
                value(&xs)
            };
            n.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * h));
            a.push(analytic.iter().zip(v).map(|(g, d)| g * d).sum::<f64>());
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_ops_pass() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = max_relative_error(&[x.clone()], 1e-5, Probe::Coordinates, 0, |t, v| t.square(v[0])).unwrap();
        assert!(err < 1e-8);
        let e =max_relative_error(&[x], 1e-5, Probe::Directions(3), 1, |t, v| {
            let c = t.constant(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
            let d = t.mul(v[0], c)?;
            t.exp(d)
        })
        .unwrap();
        assert!(e < 1e-6);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }
}
