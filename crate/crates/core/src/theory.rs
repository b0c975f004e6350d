//! Closed-form convergence bounds and their Monte Carlo checks.
//!
//! For L-smooth, μ-strongly convex objectives with step `η` and contraction
//! `α = 1 − 2μη + Lμη²`, the expected gap after `u` rounds is bounded by
//!
//! ```text
//! α^u·gap + (Lη²σ²/2W)·(1−α^u)/(1−α) + (Ldη²/8W)·Σ_{t<u} α^(u−1−t)·Ḡ_t²/s_t²
//! ```
//!
//! On quadratics the perturbed recursion `x_{t+1} = x_t − η∇F(x_t) − ηε_t`
//! has an exact expected gap, computed here in the Hessian eigenbasis.

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::objective::QuadraticObjective;
use crate::quant::{compress, continuous_levels, dequantize, GradientVector, QuantizerConfig, VarianceBudget};
use crate::rng::{stream, Domain};
use crate::schedule::alpha_closed_form;

/// Inputs shared by every horizon of the optimality-gap bound.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// `F(x_0) − F(x*)`
    pub gap: f64,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub learning_rate: f64,
    pub sigma: f64,
    pub workers: usize,
    pub dim: usize,
}

impl BoundParams {
    pub fn alpha(&self) -> f64 {
        alpha_closed_form(self.learning_rate, self.smoothness, self.strong_convexity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSeries {
    /// Bound at horizons `0..=T`.
    pub values: Vec<f64>,
    pub alpha: f64,
    /// `false` when `α ∉ [0, 1)`; the series is still filled in.
    pub contractive: bool,
}

/// Upper bound on `E[F(x_u)] − F(x*)` for every `u ≤ T`.
///
/// `bits` may hold `+∞` to drop a round's quantization term.
pub fn theorem1_bound(params: &BoundParams, gbar: &[f64], bits: &[f64]) -> Result<BoundSeries> {
    check_dim(gbar.len(), bits.len())?;
    let alpha = params.alpha();
    let (l, eta, w, d) = (params.smoothness, params.learning_rate, params.workers as f64, params.dim as f64);
    let sampling = l * eta * eta * params.sigma * params.sigma / (2.0 * w);
    let quant_scale = l * d * eta * eta / (8.0 * w);
    let q: Vec<f64> = gbar
        .iter()
        .zip(bits)
        .map(|(&g, &b)| {
            let s = continuous_levels(b);
            if s.is_infinite() || g == 0.0 {
                0.0
            } else {
                g * g / (s * s)
            }
        })
        .collect();
    let geometric = |u: usize| -> f64 {
        if alpha == 1.0 {
            u as f64
        } else {
            (1.0 - alpha.powi(u as i32)) / (1.0 - alpha)
        }
    };
    let values = (0..=gbar.len())
        .map(|u| {
            let weighted: f64 = (0..u).map(|t| alpha.powi((u - 1 - t) as i32) * q[t]).sum();
            alpha.powi(u as i32) * params.gap + sampling * geometric(u) + quant_scale * weighted
        })
        .collect();
    Ok(BoundSeries { values, alpha, contractive: (0.0..1.0).contains(&alpha) })
}

/// `(1 − α^T) / (T(1 − α))`, the mean of `α^0, …, α^(T−1)`.
pub fn am(alpha: f64, iterations: usize) -> f64 {
    let t = iterations as f64;
    if alpha == 1.0 {
        1.0
    } else {
        (1.0 - alpha.powf(t)) / (t * (1.0 - alpha))
    }
}

/// `α^((T−1)/2)`, the geometric mean of `α^0, …, α^(T−1)`.
pub fn gm(alpha: f64, iterations: usize) -> f64 {
    alpha.powf((iterations as f64 - 1.0) / 2.0)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBoundParams {
    pub workers: usize,
    pub dim: usize,
    pub iterations: usize,
    pub smoothness: f64,
    pub gap: f64,
    pub sigma: f64,
    pub eps_hat: f64,
    pub alpha: f64,
    pub b_pre: u32,
}

fn cost_bound(p: &CostBoundParams, mean: f64) -> f64 {
    let (w, d, t) = (p.workers as f64, p.dim as f64, p.iterations as f64);
    let lead = (t * (2.0 * p.smoothness * p.gap + p.sigma * p.sigma) / p.eps_hat).sqrt().log2();
    w * d * t * lead + w * t * p.b_pre as f64 + w * t * d + w * t * d / 2.0 * mean.log2()
}

/// Total-bit bound for the dynamic schedule.
pub fn dq_total_cost_bound(p: &CostBoundParams) -> f64 {
    cost_bound(p, gm(p.alpha, p.iterations))
}

/// Total-bit bound for the best constant-width schedule.
pub fn fixed_total_cost_bound(p: &CostBoundParams) -> f64 {
    cost_bound(p, am(p.alpha, p.iterations))
}

/// `Tr Σ_t` when the aggregated gradient noise sits at its second-moment ceiling:
/// `σ²/W + d·Ḡ_t²/(4W s_t²)`.
pub fn quantization_noise_covariance_trace(sigma: f64, workers: usize, dim: usize, gbar: f64, bits: f64) -> f64 {
    VarianceBudget::new(sigma, workers, dim, gbar, bits).total()
}

struct Eigenbasis {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

fn eigenbasis(q: &QuadraticObjective) -> Eigenbasis {
    let e = q.hessian().to_matrix().symmetric_eigen();
    Eigenbasis { values: e.eigenvalues.iter().copied().collect(), vectors: e.eigenvectors }
}

/// Per-component noise loading of a round, `diag(Qᵀ Σ_t Q)`.
pub enum NoiseSchedule<'a> {
    /// Covariance `(Tr_t / d)·I` given by its trace per round.
    Isotropic(&'a [f64]),
    Dense(&'a [DMatrix<f64>]),
}

impl NoiseSchedule<'_> {
    fn len(&self) -> usize {
        match self {
            NoiseSchedule::Isotropic(t) => t.len(),
            NoiseSchedule::Dense(m) => m.len(),
        }
    }
}

/// Exact `E[F(x_u)] − F(x*)` for `u = 0..=T` under the perturbed recursion
/// with noise covariance `Σ_t` at round `t`.
pub fn theorem3_exact_series(
    q: &QuadraticObjective,
    x0: &[f64],
    learning_rate: f64,
    noise: NoiseSchedule<'_>,
) -> Result<Vec<f64>> {
    let d = q.dim();
    check_dim(d, x0.len())?;
    let basis = eigenbasis(q);
    let opt = q.optimum()?;
    let offset = DVector::from_iterator(d, x0.iter().zip(&opt.x).map(|(a, b)| a - b));
    let z = basis.vectors.transpose() * offset;
    let r2: Vec<f64> = basis.values.iter().map(|l| (1.0 - learning_rate * l).powi(2)).collect();

    let mut det: Vec<f64> = (0..d).map(|i| 0.5 * basis.values[i] * z[i] * z[i]).collect();
    let mut acc = vec![0.0; d];
    let mut series = Vec::with_capacity(noise.len() + 1);
    series.push(det.iter().sum());
    for t in 0..noise.len() {
        let loading: Vec<f64> = match &noise {
            NoiseSchedule::Isotropic(traces) => vec![traces[t] / d as f64; d],
            NoiseSchedule::Dense(m) => {
                let sigma = &m[t];
                if sigma.nrows() != d || sigma.ncols() != d {
                    return Err(Error::DimensionMismatch { expected: d, actual: sigma.nrows() });
                }
                (0..d)
                    .map(|i| {
                        let v = basis.vectors.column(i);
                        (v.transpose() * sigma * v)[0]
                    })
                    .collect()
            }
        };
        for i in 0..d {
            det[i] *= r2[i];
            acc[i] = r2[i] * acc[i] + loading[i];
        }
        let noise_part: f64 = (0..d).map(|i| basis.values[i] * acc[i]).sum();
        series.push(det.iter().sum::<f64>() + 0.5 * learning_rate * learning_rate * noise_part);
    }
    Ok(series)
}

/// Expected gap at the final horizon only.
pub fn theorem3_exact_general(
    q: &QuadraticObjective,
    x0: &[f64],
    learning_rate: f64,
    noise: NoiseSchedule<'_>,
) -> Result<f64> {
    Ok(*theorem3_exact_series(q, x0, learning_rate, noise)?.last().expect("series is never empty"))
}

/// The `H = λI` specialization: `β^u·gap + (λη²/2)·Σ_{t<u} β^(u−1−t)·Tr Σ_t`
/// with `β = (1 − ηλ)²`.
pub fn theorem3_isotropic_series(lambda: f64, gap: f64, learning_rate: f64, traces: &[f64]) -> Vec<f64> {
    let beta = 1.0 - 2.0 * learning_rate * lambda + learning_rate * learning_rate * lambda * lambda;
    (0..=traces.len())
        .map(|u| {
            let noise: f64 = (0..u).map(|t| beta.powi((u - 1 - t) as i32) * traces[t]).sum();
            beta.powi(u as i32) * gap + lambda * learning_rate * learning_rate / 2.0 * noise
        })
        .collect()
}

/// Monte Carlo mean and standard error of `F(x_T) − F(x*)` under the
/// perturbed recursion with isotropic Gaussian noise of the given traces.
pub fn perturbed_dynamics_gap(
    q: &QuadraticObjective,
    x0: &[f64],
    learning_rate: f64,
    traces: &[f64],
    seeds: usize,
    master: u64,
) -> Result<(f64, f64)> {
    let d = q.dim();
    check_dim(d, x0.len())?;
    if seeds < 2 {
        return Err(Error::InvalidInput("need at least two seeds".into()));
    }
    let opt = q.optimum()?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for seed in 0..seeds {
        let mut rng = stream(master, Domain::MonteCarlo, seed as u64, 0);
        let mut x = x0.to_vec();
        for &tr in traces {
            let g = q.gradient(&x)?;
            let scale = (tr / d as f64).sqrt();
            for (xj, gj) in x.iter_mut().zip(&g) {
                let eps: f64 = rng.sample(StandardNormal);
                *xj -= learning_rate * (gj + scale * eps);
            }
        }
        let gap = q.loss(&x)? - opt.loss;
        sum += gap;
        sum_sq += gap * gap;
    }
    let n = seeds as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}

/// Outcome of a Monte Carlo check of the aggregated quantizer's first two moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub draws: usize,
    pub workers: usize,
    pub dim: usize,
    pub bits: u8,
    /// Largest `|mean_j − avg_j| / SE_j` over coordinates.
    pub max_mean_z: f64,
    pub mean_passed: bool,
    pub second_moment: f64,
    pub second_moment_se: f64,
    /// `‖avg‖² + d Ḡ²/(4W s²)`
    pub bound: f64,
    /// `bound − second_moment`, in units of its standard error.
    pub bound_margin_se: f64,
    pub bound_passed: bool,
}

impl Lemma1Report {
    pub fn passed(&self) -> bool {
        self.mean_passed && self.bound_passed
    }
}

/// Quantizes fixed worker gradients `draws` times and checks unbiasedness
/// (5 SE per coordinate) and the second-moment bound (within 5 SE).
pub fn lemma1_mc_check(gs: &[GradientVector], cfg: &QuantizerConfig, draws: usize, seed: u64) -> Result<Lemma1Report> {
    let w = gs.len();
    if w == 0 {
        return Err(Error::InvalidInput("no worker gradients".into()));
    }
    if draws < 2 {
        return Err(Error::InvalidInput("need at least two draws".into()));
    }
    let d = gs[0].dim();
    for g in gs {
        check_dim(d, g.dim())?;
    }
    let avg: Vec<f64> = (0..d).map(|j| gs.iter().map(|g| g.values()[j]).sum::<f64>() / w as f64).collect();
    let avg_sq: f64 = avg.iter().map(|a| a * a).sum();

    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut norm_sum = 0.0;
    let mut norm_sq_sum = 0.0;
    let mut agg = vec![0.0; d];
    let min_bits = cfg.codec.bits();
    for n in 0..draws {
        agg.iter_mut().for_each(|a| *a = 0.0);
        for (i, g) in gs.iter().enumerate() {
            let mut rng = stream(seed, Domain::MonteCarlo, i as u64, n as u64);
            let frame = compress(g, cfg, &mut rng)?;
            for (a, v) in agg.iter_mut().zip(dequantize(&frame)) {
                *a += v;
            }
        }
        let mut sq = 0.0;
        for j in 0..d {
            let v = agg[j] / w as f64;
            // Accumulate around the known mean so tiny variances survive.
            let dev = v - avg[j];
            sum[j] += dev;
            sum_sq[j] += dev * dev;
            sq += v * v;
        }
        let e = sq - avg_sq;
        norm_sum += e;
        norm_sq_sum += e * e;
    }
    // Exact per-coordinate variance of the aggregate. When an up-step is
    // rare the sample variance can be zero, so it serves as a floor.
    let s = crate::quant::level_count(min_bits) as f64;
    let mut exact_var = vec![0.0; d];
    for g in gs {
        let norm = cfg.precision.round_up(g.norm_at(cfg.p));
        if norm == 0.0 {
            continue;
        }
        for (ev, &v) in exact_var.iter_mut().zip(g.values()) {
            let scaled = (s * v.abs() / norm).min(s);
            let frac = scaled - scaled.floor();
            *ev += (norm / (w as f64 * s)).powi(2) * frac * (1.0 - frac);
        }
    }
    let nf = draws as f64;
    let mut max_z: f64 = 0.0;
    let mut mean_passed = true;
    for j in 0..d {
        let mean_dev = sum[j] / nf;
        let var = ((sum_sq[j] - nf * mean_dev * mean_dev) / (nf - 1.0)).max(exact_var[j]);
        let se = (var / nf).sqrt();
        let diff = mean_dev.abs();
        let floor = 1e-12 * avg[j].abs().max(f64::MIN_POSITIVE);
        if diff > floor {
            let z = if se > 0.0 { diff / se } else { f64::INFINITY };
            max_z = max_z.max(z);
            if z > 5.0 {
                mean_passed = false;
            }
        }
    }
    let mean_excess = norm_sum / nf;
    let second_var = ((norm_sq_sum - nf * mean_excess * mean_excess) / (nf - 1.0)).max(0.0);
    let second_moment_se = (second_var / nf).sqrt();
    let second_moment = avg_sq + mean_excess;

    let gbar = crate::quant::rms_norm(gs.iter().map(|g| g.norm_at(cfg.p)));
    // The inputs are fixed, so the sampling term is zero.
    let bound = avg_sq + VarianceBudget::new(0.0, w, d, gbar, min_bits as f64).total();
    let excess = second_moment - bound;
    let tol = 5.0 * second_moment_se + 1e-12 * bound.abs();
    let bound_margin_se = if second_moment_se > 0.0 { -excess / second_moment_se } else { f64::INFINITY };
    Ok(Lemma1Report {
        draws,
        workers: w,
        dim: d,
        bits: min_bits,
        max_mean_z: max_z,
        mean_passed,
        second_moment,
        second_moment_se,
        bound,
        bound_margin_se,
        bound_passed: excess <= tol,
    })
}

/// Bounds attached to a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// `None` when a round used the sign baseline, which has no EWU variance term.
    pub theorem1_bound_series: Option<Vec<f64>>,
    pub theorem3_exact_series: Option<Vec<f64>>,
    pub dq_cost_bound: f64,
    pub fixed_cost_bound: f64,
    pub am: f64,
    pub gm: f64,
    pub alpha: f64,
    pub contractive: bool,
}
