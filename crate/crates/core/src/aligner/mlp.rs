//! One-hidden-layer rectifier network with softmax output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedder::layers::{dense_backward, dense_forward};
use crate::error::{Error, Result};
use crate::matrix::softmax_in_place;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

const CHUNK: usize = 16;
const SCALE_FLOOR: f64 = 1e-6;

/// Inputs are standardized with the training mean and deviation before the
/// first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    inputs: usize,
    hidden: usize,
    outputs: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `W1 [hidden][inputs]`, `b1`, `W2 [outputs][hidden]`, `b2`.
    theta: Vec<f64>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(hidden * inputs + hidden + outputs * hidden + outputs);
        let b1 = (6.0 / inputs as f64).sqrt();
        theta.extend((0..hidden * inputs).map(|_| rng.random_range(-b1..b1)));
        theta.extend(std::iter::repeat_n(0.0, hidden));
        let b2 = (6.0 / hidden as f64).sqrt();
        theta.extend((0..outputs * hidden).map(|_| rng.random_range(-b2..b2)));
        theta.extend(std::iter::repeat_n(0.0, outputs));
        Self {
            inputs,
            hidden,
            outputs,
            mean: vec![0.0; inputs],
            scale: vec![1.0; inputs],
            theta,
        }
    }

    pub(crate) fn from_parts(
        (inputs, hidden, outputs): (usize, usize, usize),
        mean: Vec<f64>,
        scale: Vec<f64>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let m = Self::new(inputs, hidden, outputs, 0);
        if mean.len() != inputs || scale.len() != inputs || theta.len() != m.theta.len() {
            return Err(Error::format("mlp", "parameter block sizes do not match the layer sizes"));
        }
        Ok(Self {
            mean,
            scale,
            theta,
            ..m
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub(crate) fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub(crate) fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.theta.split_at(self.hidden * self.inputs);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.outputs * self.hidden);
        (w1, b1, w2, b2)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::dim("network input", self.inputs, x.len()));
        }
        let (w1, b1, w2, b2) = self.split();
        let mut h = dense_forward(&self.standardize(x), w1, b1);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = dense_forward(&h, w2, b2);
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Adds the cross-entropy gradient of one example to `grad`; returns its loss.
    fn accumulate(&self, x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let (w1, b1, w2, b2) = self.split();
        let xs = self.standardize(x);
        let pre = dense_forward(&xs, w1, b1);
        let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut p = dense_forward(&h, w2, b2);
        softmax_in_place(&mut p);
        let loss = -p[label].max(f64::MIN_POSITIVE).ln();
        p[label] -= 1.0;
        let n1 = self.hidden * self.inputs;
        let n2 = n1 + self.hidden;
        let n3 = n2 + self.outputs * self.hidden;
        let mut gh = dense_backward(&p, &h, w2, grad, n2..n3, n3..n3 + self.outputs);
        gh.iter_mut().zip(&pre).for_each(|(g, &z)| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        dense_backward(&gh, &xs, w1, grad, 0..n1, n1..n2);
        loss
    }

    /// Mini-batch SGD on the mean cross-entropy after fitting the input
    /// standardization to `data`; returns the mean loss of each epoch.
    pub fn fit(&mut self, data: &[(&[f64], usize)], config: &MlpConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyRequest("network training needs examples".into()));
        }
        if let Some((x, _)) = data.iter().find(|(x, _)| x.len() != self.inputs) {
            return Err(Error::dim("network input", self.inputs, x.len()));
        }
        if let Some((_, y)) = data.iter().find(|(_, y)| *y >= self.outputs) {
            return Err(Error::Range(format!("label {y} outside 0..{}", self.outputs)));
        }
        let n = data.len() as f64;
        for d in 0..self.inputs {
            let m = data.iter().map(|(x, _)| x[d]).sum::<f64>() / n;
            let v = data.iter().map(|(x, _)| (x[d] - m).powi(2)).sum::<f64>() / n;
            self.mean[d] = m;
            self.scale[d] = v.sqrt().max(SCALE_FLOOR);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size.max(1)) {
                let parts: Vec<(Vec<f64>, f64)> = batch
                    .par_chunks(CHUNK)
                    .map(|chunk| {
                        let mut g = vec![0.0; self.theta.len()];
                        let l = chunk.iter().map(|&i| self.accumulate(data[i].0, data[i].1, &mut g)).sum();
                        (g, l)
                    })
                    .collect();
                let scale = config.learning_rate / batch.len() as f64;
                for (g, l) in parts {
                    total += l;
                    self.theta.iter_mut().zip(&g).for_each(|(p, g)| *p -= scale * g);
                }
            }
            let loss = total / n;
            if !loss.is_finite() || self.theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { loss });
            }
            losses.push(loss);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_are_normalized() {
        let m = Mlp::new(3, 5, 4, 1);
        let p = m.probabilities(&[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.probabilities(&[1.0]).is_err());
    }

    #[test]
    fn learns_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<(Vec<f64>, usize)> = (0..300)
            .map(|i| {
                let c = i % 3;
                let x = vec![c as f64 * 4.0 + rng.random_range(-1.0..1.0), 100.0 + rng.random_range(-1.0..1.0)];
                (x, c)
            })
            .collect();
        let data: Vec<(&[f64], usize)> = xs.iter().map(|(x, c)| (x.as_slice(), *c)).collect();
        let mut m = Mlp::new(2, 16, 3, 0);
        let losses = m.fit(&data, &MlpConfig { epochs: 30, ..MlpConfig::default() }).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let correct = xs
            .iter()
            .filter(|(x, c)| {
                let p = m.probabilities(x).unwrap();
                (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap() == *c
            })
            .count();
        assert!(correct >= 290, "{correct}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = Mlp::new(4, 6, 3, 2);
        m.mean = vec![0.1, -0.2, 0.0, 0.5];
        m.scale = vec![1.0, 2.0, 0.5, 1.5];
        let x = [0.7, -1.3, 0.4, 2.0];
        let mut g = vec![0.0; m.theta.len()];
        m.accumulate(&x, 1, &mut g);
        let loss = |m: &Mlp| -m.probabilities(&x).unwrap()[1].ln();
        let eps = 1e-6;
        for i in 0..m.theta.len() {
            let mut p = m.clone();
            p.theta[i] += eps;
            let mut q = m.clone();
            q.theta[i] -= eps;
            let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", g[i]);
        }
    }
}
