//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CnnParams;
use crate::error::{Error, Result};
use crate::matrix::softmax_in_place;

/// A differentiable classifier with a flat parameter vector.
pub trait GradCheckable: Clone {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    fn loss(&self, input: &[f64], label: usize) -> Result<f64>;
    fn gradient(&self, input: &[f64], label: usize) -> Result<Vec<f64>>;
    /// Discrete state of the piecewise-linear units; empty for smooth models.
    fn pattern(&self, _input: &[f64]) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }
}

impl GradCheckable for CnnParams {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn param(&self, i: usize) -> f64 {
        self.theta[i]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        self.theta[i] = v;
    }

    fn loss(&self, input: &[f64], label: usize) -> Result<f64> {
        CnnParams::loss(self, input, label)
    }

    fn gradient(&self, input: &[f64], label: usize) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.theta.len()];
        self.backward(input, label, 1.0, &mut g)?;
        Ok(g)
    }

    fn pattern(&self, input: &[f64]) -> Result<Vec<usize>> {
        self.activation_pattern(input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose ±epsilon perturbation crossed a rectifier or pooling
    /// boundary, where the loss is not differentiable.
    pub skipped: usize,
}

pub const DEFAULT_CHECK_SAMPLES: usize = 200;

/// Compares central differences against the analytic gradient on up to
/// `samples` randomly chosen parameters; the relative error of one parameter
/// is `|fd - bp| / max(|fd|, |bp|, 1e-8)`.
pub fn gradient_check<M: GradCheckable>(
    model: &M,
    input: &[f64],
    label: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Range(format!("epsilon {epsilon} must be positive")));
    }
    let analytic = model.gradient(input, label)?;
    let base = model.pattern(input)?;
    let mut order: Vec<usize> = (0..model.num_params()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in order {
        if report.checked == samples {
            break;
        }
        let orig = model.param(i);
        probe.set_param(i, orig + epsilon);
        let (lp, pp) = (probe.loss(input, label)?, probe.pattern(input)?);
        probe.set_param(i, orig - epsilon);
        let (lm, pm) = (probe.loss(input, label)?, probe.pattern(input)?);
        probe.set_param(i, orig);
        if pp != base || pm != base {
            report.skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * epsilon);
        let bp = analytic[i];
        let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-8);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Single linear layer with softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    dim: usize,
    classes: usize,
    /// `[classes][dim]` weights followed by `classes` biases.
    theta: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / dim.max(1) as f64).sqrt();
        let mut theta: Vec<f64> = (0..classes * dim).map(|_| rng.random_range(-bound..bound)).collect();
        theta.extend(std::iter::repeat_n(0.0, classes));
        Self { dim, classes, theta }
    }

    pub fn probabilities(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.dim {
            return Err(Error::dim("softmax regression input", self.dim, input.len()));
        }
        let mut z: Vec<f64> = (0..self.classes)
            .map(|c| {
                self.theta[self.classes * self.dim + c]
                    + self.theta[c * self.dim..(c + 1) * self.dim]
                        .iter()
                        .zip(input)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        let p = self.probabilities(input)?;
        Ok((0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0))
    }

    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn fit(&mut self, data: &[(Vec<f64>, usize)], learning_rate: f64, steps: usize) -> Result<f64> {
        let mut loss = f64::NAN;
        for _ in 0..steps {
            let mut grad = vec![0.0; self.theta.len()];
            loss = 0.0;
            for (x, y) in data {
                loss += self.loss(x, *y)?;
                grad.iter_mut().zip(self.gradient(x, *y)?).for_each(|(a, b)| *a += b);
            }
            let n = data.len() as f64;
            for (p, g) in self.theta.iter_mut().zip(&grad) {
                *p -= learning_rate * g / n;
            }
            loss /= n;
        }
        Ok(loss)
    }
}

impl GradCheckable for SoftmaxRegression {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn param(&self, i: usize) -> f64 {
        self.theta[i]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        self.theta[i] = v;
    }

    fn loss(&self, input: &[f64], label: usize) -> Result<f64> {
        Ok(-self.probabilities(input)?[label].ln())
    }

    fn gradient(&self, input: &[f64], label: usize) -> Result<Vec<f64>> {
        let mut p = self.probabilities(input)?;
        p[label] -= 1.0;
        let mut g = vec![0.0; self.theta.len()];
        for c in 0..self.classes {
            for (j, x) in input.iter().enumerate() {
                g[c * self.dim + j] = p[c] * x;
            }
            g[self.classes * self.dim + c] = p[c];
        }
        Ok(g)
    }
}
