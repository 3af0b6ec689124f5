//! Diagonal-covariance Gaussian mixtures with EM accumulators.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, Matrix};

/// Relative perturbation of a split component's mean, in standard deviations.
pub const SPLIT_PERTURBATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
    /// Per component: `ln w - 0.5 * (D ln 2π + Σ ln σ²)`.
    log_consts: Vec<f64>,
}

impl DiagGmm {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        if means.rows() != k || variances.rows() != k || means.cols() != variances.cols() {
            return Err(Error::dim("mixture parameters", k, means.rows().min(variances.rows())));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!("mixture weights sum to {total}")));
        }
        if variances.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) || !means.is_finite() {
            return Err(Error::Validation("mixture variances must be positive and finite".into()));
        }
        let d = means.cols() as f64;
        let log_consts = (0..k)
            .map(|c| {
                let logdet: f64 = variances.row(c).iter().map(|v| v.ln()).sum();
                weights[c].ln() - 0.5 * (d * (2.0 * PI).ln() + logdet)
            })
            .collect();
        Ok(Self {
            weights,
            means,
            variances,
            log_consts,
        })
    }

    pub fn single(mean: &[f64], variance: &[f64]) -> Result<Self> {
        Self::new(
            vec![1.0],
            Matrix::from_vec(1, mean.len(), mean.to_vec())?,
            Matrix::from_vec(1, variance.len(), variance.to_vec())?,
        )
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &Matrix {
        &self.variances
    }

    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((xi, m), v) in x.iter().zip(self.means.row(c)).zip(self.variances.row(c)) {
            let d = xi - m;
            q += d * d / v;
        }
        self.log_consts[c] - 0.5 * q
    }

    /// Weighted component log-densities `ln w_k + ln N(x; μ_k, Σ_k)`.
    pub fn component_log_likelihoods(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_components()).map(|c| self.component_log_density(c, x)));
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        if self.num_components() == 1 {
            return self.component_log_density(0, x);
        }
        let mut buf = Vec::with_capacity(self.num_components());
        self.component_log_likelihoods(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Splits the heaviest components until `target` components exist (at
    /// most doubling). Children share the parent variance, take half its
    /// weight, and shift the mean by ±0.2σ.
    pub fn split(&self, target: usize) -> DiagGmm {
        let k = self.num_components();
        let target = target.min(2 * k);
        if target <= k {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        let d = self.dim();
        let mut weights = self.weights.clone();
        let mut means = self.means.as_slice().to_vec();
        let mut vars = self.variances.as_slice().to_vec();
        for &c in &order[..target - k] {
            weights[c] /= 2.0;
            weights.push(weights[c]);
            let var = self.variances.row(c).to_vec();
            let mut child = self.means.row(c).to_vec();
            for j in 0..d {
                let delta = SPLIT_PERTURBATION * var[j].sqrt();
                means[c * d + j] += delta;
                child[j] -= delta;
            }
            means.extend(child);
            vars.extend(var);
        }
        let n = weights.len();
        DiagGmm::new(
            weights,
            Matrix::from_vec(n, d, means).expect("sizes"),
            Matrix::from_vec(n, d, vars).expect("sizes"),
        )
        .expect("split preserves validity")
    }
}

/// Zeroth, first and second-order statistics per component.
#[derive(Debug, Clone)]
pub struct GmmStats {
    pub occupancy: Vec<f64>,
    pub sum: Matrix,
    pub sum_sq: Matrix,
}

impl GmmStats {
    pub fn new(components: usize, dim: usize) -> Self {
        Self {
            occupancy: vec![0.0; components],
            sum: Matrix::zeros(components, dim),
            sum_sq: Matrix::zeros(components, dim),
        }
    }

    pub fn total(&self) -> f64 {
        self.occupancy.iter().sum()
    }

    /// Adds frame `x` with state posterior `gamma`, split across components
    /// by their posterior under `gmm`.
    pub fn accumulate(&mut self, gmm: &DiagGmm, x: &[f64], gamma: f64, scratch: &mut Vec<f64>) {
        let k = gmm.num_components();
        if k == 1 {
            self.add(0, x, gamma);
            return;
        }
        gmm.component_log_likelihoods(x, scratch);
        let norm = log_sum_exp(scratch);
        for c in 0..k {
            let g = gamma * (scratch[c] - norm).exp();
            if g > 0.0 {
                self.add(c, x, g);
            }
        }
    }

    pub fn add(&mut self, c: usize, x: &[f64], g: f64) {
        self.occupancy[c] += g;
        for ((s, q), xi) in self.sum.row_mut(c).iter_mut().zip(self.sum_sq.row_mut(c)).zip(x) {
            *s += g * xi;
            *q += g * xi * xi;
        }
    }

    pub fn merge(&mut self, other: &GmmStats) {
        for (a, b) in self.occupancy.iter_mut().zip(&other.occupancy) {
            *a += b;
        }
        for (a, b) in self.sum.as_mut_slice().iter_mut().zip(other.sum.as_slice()) {
            *a += b;
        }
        for (a, b) in self.sum_sq.as_mut_slice().iter_mut().zip(other.sum_sq.as_slice()) {
            *a += b;
        }
    }

    /// Maximum-likelihood update. Components without occupancy keep their
    /// mean and variance at zero weight; `None` when nothing was observed.
    pub fn estimate(&self, previous: &DiagGmm, var_floor: &[f64]) -> Option<DiagGmm> {
        let total = self.total();
        if !(total > 0.0) {
            return None;
        }
        let k = self.occupancy.len();
        let d = previous.dim();
        let mut means = Matrix::zeros(k, d);
        let mut vars = Matrix::zeros(k, d);
        let mut weights = vec![0.0; k];
        for c in 0..k {
            let n = self.occupancy[c];
            if n <= total * 1e-12 {
                means.row_mut(c).copy_from_slice(previous.means.row(c));
                vars.row_mut(c).copy_from_slice(previous.variances.row(c));
                continue;
            }
            weights[c] = n / total;
            for j in 0..d {
                let m = self.sum.get(c, j) / n;
                let v = self.sum_sq.get(c, j) / n - m * m;
                means.set(c, j, m);
                vars.set(c, j, v.max(var_floor[j]));
            }
        }
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        DiagGmm::new(weights, means, vars).ok()
    }
}

/// Per-dimension mean and population variance over all rows.
pub fn global_moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut n = 0usize;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for r in rows {
        n += 1;
        for j in 0..dim {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    if n == 0 {
        return None;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0))
        .collect();
    Some((mean, var))
}
