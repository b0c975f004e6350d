//! Stochastic gradient oracles.

use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::error::{Error, Result};
use crate::quant::{GradientVector, NormOrder};
use crate::rng::{stream, Domain};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// Noiseless: every worker sees the exact gradient.
    Exact,
    /// Exact gradient plus `ε ~ N(0, (σ²/d) I)`, so `E‖ε‖² = σ²`.
    Gaussian { sigma: f64 },
    /// Mean gradient of `batch` samples drawn without replacement from the
    /// worker's shard. Only defined for finite-sum objectives.
    Minibatch { batch: usize },
}

/// Per-worker gradient source for a fixed objective.
#[derive(Clone, Debug)]
pub struct GradientOracle {
    noise: NoiseModel,
    shards: Vec<Range<usize>>,
    workers: usize,
}

/// Measured `E‖g − ∇F(x)‖²` per worker at a calibration point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCalibration {
    pub per_worker_variance: Vec<f64>,
    pub per_worker_standard_error: Vec<f64>,
    /// Square root of the largest per-worker variance.
    pub measured_sigma: f64,
    pub draws: usize,
}

impl GradientOracle {
    pub fn new(objective: &Objective, noise: NoiseModel, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidInput("at least one worker is required".into()));
        }
        let shards = match (&noise, objective) {
            (NoiseModel::Minibatch { batch }, Objective::Logistic(l)) => {
                if *batch == 0 {
                    return Err(Error::InvalidInput("minibatch size must be positive".into()));
                }
                let shards = l.shards(workers);
                if let Some(w) = shards.iter().position(|s| s.is_empty()) {
                    return Err(Error::EmptyShard(w));
                }
                shards
            }
            (NoiseModel::Minibatch { .. }, Objective::Quadratic(_)) => {
                return Err(Error::InvalidInput("minibatch noise needs a finite-sum objective".into()))
            }
            (NoiseModel::Gaussian { sigma }, _) if !(*sigma >= 0.0) || !sigma.is_finite() => {
                return Err(Error::InvalidInput(format!("sigma must be finite and nonnegative, got {sigma}")))
            }
            _ => Vec::new(),
        };
        Ok(Self { noise, shards, workers })
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn shard(&self, worker: usize) -> Option<Range<usize>> {
        self.shards.get(worker).cloned()
    }

    /// The variance bound the oracle guarantees by construction, if any.
    pub fn nominal_sigma(&self) -> Option<f64> {
        match self.noise {
            NoiseModel::Exact => Some(0.0),
            NoiseModel::Gaussian { sigma } => Some(sigma),
            NoiseModel::Minibatch { .. } => None,
        }
    }

    /// One unbiased stochastic gradient for `worker` at `x`.
    pub fn sample_gradient<R: Rng + ?Sized>(
        &self,
        objective: &Objective,
        worker: usize,
        x: &[f64],
        p: NormOrder,
        rng: &mut R,
    ) -> Result<GradientVector> {
        if worker >= self.workers {
            return Err(Error::InvalidInput(format!("worker {worker} out of range (W = {})", self.workers)));
        }
        let values = match self.noise {
            NoiseModel::Exact => objective.gradient(x)?,
            NoiseModel::Gaussian { sigma } => {
                let mut g = objective.gradient(x)?;
                if sigma > 0.0 {
                    let scale = sigma / (g.len() as f64).sqrt();
                    for gj in &mut g {
                        *gj += scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                g
            }
            NoiseModel::Minibatch { batch } => {
                let Objective::Logistic(l) = objective else {
                    return Err(Error::InvalidInput("minibatch noise needs a finite-sum objective".into()));
                };
                crate::error::check_dim(l.dim(), x.len())?;
                let shard = self.shards[worker].clone();
                if shard.is_empty() {
                    return Err(Error::EmptyShard(worker));
                }
                if batch >= shard.len() {
                    l.batch_gradient(x, shard)
                } else {
                    let picks = index::sample(rng, shard.len(), batch);
                    l.batch_gradient(x, picks.into_iter().map(|i| shard.start + i))
                }
            }
        };
        GradientVector::new(values, p)
    }

    /// Estimates each worker's `E‖g − ∇F(x)‖²` from `draws` samples.
    pub fn calibrate(&self, objective: &Objective, x: &[f64], draws: usize, seed: u64) -> Result<OracleCalibration> {
        if draws < 2 {
            return Err(Error::InvalidInput("calibration needs at least two draws".into()));
        }
        let exact = objective.gradient(x)?;
        let mut per_worker_variance = Vec::with_capacity(self.workers);
        let mut per_worker_standard_error = Vec::with_capacity(self.workers);
        for w in 0..self.workers {
            let mut rng = stream(seed, Domain::Calibration, w as u64, 0);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..draws {
                let g = self.sample_gradient(objective, w, x, NormOrder::L2, &mut rng)?;
                let e: f64 = g.values().iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum();
                sum += e;
                sum_sq += e * e;
            }
            let n = draws as f64;
            let mean = sum / n;
            let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
            per_worker_variance.push(mean);
            per_worker_standard_error.push((var / n).sqrt());
        }
        let measured_sigma = per_worker_variance.iter().fold(0.0f64, |m, v| m.max(*v)).sqrt();
        Ok(OracleCalibration { per_worker_variance, per_worker_standard_error, measured_sigma, draws })
    }
}
