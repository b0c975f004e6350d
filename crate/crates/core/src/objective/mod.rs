//! Convex objectives with exact gradients and known curvature constants.
//!
//! Two families are provided: quadratics `½xᵀHx + Aᵀx + B`, whose optimum,
//! smoothness `L` and strong convexity `μ` are known in closed form, and
//! ridge-regularized logistic regression on a synthetic dataset sharded
//! across workers.

mod oracle;
pub mod spectral;

pub use oracle::{GradientOracle, NoiseModel, OracleCalibration};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::CompensatedSum;
use crate::quant::{GradientVector, NormOrder};
use crate::rng::{stream, Domain};

/// Smoothness and strong-convexity constants.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub smoothness: f64,
    pub strong_convexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Hessian {
    Isotropic { lambda: f64, dim: usize },
    Dense(DMatrix<f64>),
}

impl Hessian {
    pub fn dim(&self) -> usize {
        match self {
            Hessian::Isotropic { dim, .. } => *dim,
            Hessian::Dense(m) => m.nrows(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Hessian::Isotropic { lambda, .. } => x.iter().map(|v| lambda * v).collect(),
            Hessian::Dense(m) => (m * DVector::from_column_slice(x)).as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Hessian::Isotropic { lambda, dim } => DMatrix::from_diagonal_element(*dim, *dim, *lambda),
            Hessian::Dense(m) => m.clone(),
        }
    }
}

/// `F(x) = ½ xᵀ H x + Aᵀ x + B` with symmetric positive-definite `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    hessian: Hessian,
    linear: Vec<f64>,
    constant: f64,
}

impl QuadraticObjective {
    pub fn isotropic(dim: usize, lambda: f64) -> Result<Self> {
        Self::new(Hessian::Isotropic { lambda, dim }, vec![0.0; dim], 0.0)
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
        Self::new(Hessian::Dense(m), vec![0.0; diag.len()], 0.0)
    }

    pub fn new(hessian: Hessian, linear: Vec<f64>, constant: f64) -> Result<Self> {
        let dim = hessian.dim();
        if dim == 0 {
            return Err(Error::InvalidInput("objective dimension must be at least 1".into()));
        }
        check_dim(dim, linear.len())?;
        match &hessian {
            Hessian::Isotropic { lambda, .. } => {
                if !(*lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::NotPositiveDefinite(format!("isotropic curvature {lambda}")));
                }
            }
            Hessian::Dense(m) => {
                if !m.is_square() {
                    return Err(Error::InvalidInput("Hessian must be square".into()));
                }
                let scale = m.amax().max(f64::MIN_POSITIVE);
                if (m - m.transpose()).amax() > 1e-12 * scale {
                    return Err(Error::InvalidInput("Hessian must be symmetric".into()));
                }
                if m.clone().cholesky().is_none() {
                    return Err(Error::NotPositiveDefinite("Cholesky factorization failed".into()));
                }
            }
        }
        Ok(Self { hessian, linear, constant })
    }

    pub fn hessian(&self) -> &Hessian {
        &self.hessian
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn dim(&self) -> usize {
        self.hessian.dim()
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let hx = self.hessian.apply(x);
        let mut acc = CompensatedSum::new();
        for j in 0..x.len() {
            acc.add(0.5 * x[j] * hx[j] + self.linear[j] * x[j]);
        }
        Ok(acc.value() + self.constant)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut g = self.hessian.apply(x);
        for (gj, aj) in g.iter_mut().zip(&self.linear) {
            *gj += aj;
        }
        Ok(g)
    }

    /// Extreme eigenvalues of `H`: power iteration for `L`, inverse
    /// iteration through a Cholesky factor for `μ`.
    pub fn constants(&self) -> Result<Constants> {
        match &self.hessian {
            Hessian::Isotropic { lambda, .. } => {
                Ok(Constants { smoothness: *lambda, strong_convexity: *lambda })
            }
            Hessian::Dense(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
                let d = m.nrows();
                let l = spectral::largest_eigenvalue(d, |v| (m * DVector::from_column_slice(v)).as_slice().to_vec());
                let inv_mu = spectral::largest_eigenvalue(d, |v| {
                    chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec()
                });
                if !(inv_mu > 0.0) {
                    return Err(Error::NotPositiveDefinite("smallest eigenvalue is not positive".into()));
                }
                Ok(Constants { smoothness: l, strong_convexity: inv_mu.recip() })
            }
        }
    }

    /// `x* = -H⁻¹A`, `F(x*) = B + ½Aᵀx*`.
    pub fn optimum(&self) -> Result<Optimum> {
        let x = match &self.hessian {
            Hessian::Isotropic { lambda, .. } => self.linear.iter().map(|a| -a / lambda).collect::<Vec<_>>(),
            Hessian::Dense(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
                let sol = chol.solve(&DVector::from_column_slice(&self.linear));
                sol.iter().map(|v| -v).collect()
            }
        };
        let half_ax: f64 = self.linear.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() * 0.5;
        Ok(Optimum { loss: self.constant + half_ax, x })
    }
}

/// Synthetic binary classification data: standard-normal features, labels
/// from a noisy linear rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: usize,
    pub dim: usize,
    /// Row-major `samples × dim`.
    pub features: Vec<f64>,
    /// ±1 per sample.
    pub labels: Vec<f64>,
}

impl SyntheticDataset {
    /// Labels are `sign(wᵀa + label_noise·z)` for a hidden `w ~ N(0, I/d)`.
    pub fn generate(samples: usize, dim: usize, label_noise: f64, seed: u64) -> Result<Self> {
        if samples == 0 || dim == 0 {
            return Err(Error::InvalidInput("dataset needs at least one sample and one feature".into()));
        }
        let mut rng = stream(seed, Domain::Data, 0, 0);
        let scale = (dim as f64).sqrt().recip();
        let w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        let mut features = Vec::with_capacity(samples * dim);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let margin: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + label_noise * rng.sample::<f64, _>(StandardNormal);
            labels.push(if margin >= 0.0 { 1.0 } else { -1.0 });
            features.extend(row);
        }
        Ok(Self { samples, dim, features, labels })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean logistic loss plus `½ λ_r ‖x‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticObjective {
    data: SyntheticDataset,
    ridge: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticObjective {
    pub fn new(data: SyntheticDataset, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidInput(format!("ridge must be finite and nonnegative, got {ridge}")));
        }
        Ok(Self { data, ridge })
    }

    pub fn data(&self) -> &SyntheticDataset {
        &self.data
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.data.dim
    }

    pub fn sample_loss(&self, i: usize, x: &[f64]) -> f64 {
        let m: f64 = self.data.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        softplus(-self.data.labels[i] * m)
    }

    fn ridge_term(&self, x: &[f64]) -> f64 {
        0.5 * self.ridge * x.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut acc = CompensatedSum::new();
        for i in 0..self.data.samples {
            acc.add(self.sample_loss(i, x));
        }
        Ok(acc.value() / self.data.samples as f64 + self.ridge_term(x))
    }

    /// Gradient of the mean loss over `indices` plus the ridge term.
    pub fn batch_gradient(&self, x: &[f64], indices: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        let mut count = 0usize;
        for i in indices {
            let row = self.data.row(i);
            let y = self.data.labels[i];
            let m: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            let coef = -y * sigmoid(-y * m);
            for (gj, aj) in g.iter_mut().zip(row) {
                *gj += coef * aj;
            }
            count += 1;
        }
        let inv = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj = *gj * inv + self.ridge * xj;
        }
        g
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.batch_gradient(x, 0..self.data.samples))
    }

    /// `L = ‖X‖²_op / (4n) + λ_r`, `μ = λ_r`.
    pub fn constants(&self) -> Result<Constants> {
        let d = self.dim();
        let op_sq = spectral::largest_eigenvalue(d, |v| {
            let mut out = vec![0.0; d];
            for i in 0..self.data.samples {
                let row = self.data.row(i);
                let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                for (o, a) in out.iter_mut().zip(row) {
                    *o += dot * a;
                }
            }
            out
        });
        Ok(Constants {
            smoothness: op_sq / (4.0 * self.data.samples as f64) + self.ridge,
            strong_convexity: self.ridge,
        })
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.data.samples as f64;
        let mut h = DMatrix::from_diagonal_element(d, d, self.ridge);
        for i in 0..self.data.samples {
            let row = self.data.row(i);
            let m: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            let s = sigmoid(m);
            let w = s * (1.0 - s) / n;
            for r in 0..d {
                let wr = w * row[r];
                for c in 0..d {
                    h[(r, c)] += wr * row[c];
                }
            }
        }
        h
    }

    /// Minimizer by damped Newton iteration.
    pub fn optimum(&self) -> Result<Optimum> {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let mut f = self.loss(&x)?;
        for _ in 0..100 {
            let g = self.gradient(&x)?;
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-13 {
                break;
            }
            let h = self.hessian(&x);
            let step = match h.cholesky() {
                Some(c) => c.solve(&DVector::from_column_slice(&g)),
                None => {
                    return Err(Error::NotPositiveDefinite(
                        "logistic Hessian is singular; add a ridge term".into(),
                    ))
                }
            };
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                let fc = self.loss(&cand)?;
                if fc <= f || t < 1e-10 {
                    x = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
        }
        Ok(Optimum { x, loss: f })
    }

    /// Contiguous, near-equal shard of sample indices for each worker.
    pub fn shards(&self, workers: usize) -> Vec<std::ops::Range<usize>> {
        let n = self.data.samples;
        let base = n / workers;
        let extra = n % workers;
        let mut start = 0;
        (0..workers)
            .map(|w| {
                let len = base + usize::from(w < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }
}

/// One of the supported objectives.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Logistic(LogisticObjective),
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic(q) => q.dim(),
            Objective::Logistic(l) => l.dim(),
        }
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        match self {
            Objective::Quadratic(q) => q.loss(x),
            Objective::Logistic(l) => l.loss(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Objective::Quadratic(q) => q.gradient(x),
            Objective::Logistic(l) => l.gradient(x),
        }
    }

    /// Exact gradient as a [`GradientVector`] with ℓ_p norm cached.
    pub fn full_gradient(&self, x: &[f64], p: NormOrder) -> Result<GradientVector> {
        GradientVector::new(self.gradient(x)?, p)
    }

    pub fn constants(&self) -> Result<Constants> {
        match self {
            Objective::Quadratic(q) => q.constants(),
            Objective::Logistic(l) => l.constants(),
        }
    }

    pub fn optimum(&self) -> Result<Optimum> {
        match self {
            Objective::Quadratic(q) => q.optimum(),
            Objective::Logistic(l) => l.optimum(),
        }
    }
}

#[cfg(test)]
mod tests;
