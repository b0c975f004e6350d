//! Self-contained verification suites.
//!
//! Each suite builds its own instances from fixed seeds, so results do not
//! depend on any input files.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{VerifySpec, VerifyTarget};
use crate::error::Result;
use crate::numeric::compensated_sum;
use crate::objective::{NoiseModel, QuadraticObjective};
use crate::quant::{GradientVector, NormOrder, NormPrecision, QuantizerConfig};
use crate::rng::{stream, Domain};
use crate::schedule::{
    alpha_closed_form, alpha_estimate, bits_monotonicity_class, budget_satisfaction, budget_satisfaction_continuous,
    dq_bits_continuous, AlphaSource, DynamicParams, Monotonicity, ProblemSize, ScheduleKind, SchedulerState,
};
use crate::sim::{run, ObjectiveSpec, RunConfig, RunTrace};
use crate::theory::{
    am, gm, lemma1_mc_check, perturbed_dynamics_gap, quantization_noise_covariance_trace, theorem1_bound,
    theorem3_exact_series, theorem3_isotropic_series, BoundParams, Lemma1Report, NoiseSchedule,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub target: VerifyTarget,
    pub checks: Vec<Check>,
    pub elapsed_secs: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        out
    }
}

pub fn run_suite(spec: &VerifySpec, master: u64) -> Result<VerifyReport> {
    let start = Instant::now();
    let checks = match spec.target {
        VerifyTarget::Lemma1 => lemma1_suite(spec.draws, master)?,
        VerifyTarget::Theorem1 => theorem1_suite(spec.run_seeds, master)?,
        VerifyTarget::Theorem3 => theorem3_suite(spec.replicates, master)?,
        VerifyTarget::Theorem2 => theorem2_suite(spec.run_seeds, master)?,
        VerifyTarget::Schedule => schedule_suite(100, master),
    };
    Ok(VerifyReport { target: spec.target, checks, elapsed_secs: start.elapsed().as_secs_f64() })
}

/// Worker gradients sharing a common direction plus per-worker spread.
pub fn random_worker_gradients(dim: usize, workers: usize, seed: u64) -> Vec<GradientVector> {
    let mut rng = stream(seed, Domain::Data, dim as u64, workers as u64);
    let common: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (0..workers)
        .map(|_| {
            let scale: f64 = rng.random_range(0.25..4.0);
            let v = common.iter().map(|c| scale * (c + 0.7 * rng.sample::<f64, _>(StandardNormal))).collect();
            GradientVector::l2(v).expect("nonempty")
        })
        .collect()
}

/// Monte Carlo moments of the aggregated quantizer over a `(d, W, b)` grid.
pub fn lemma1_grid(dims: &[usize], workers: &[usize], bits: &[u8], draws: usize, master: u64) -> Result<Vec<Lemma1Report>> {
    let mut out = Vec::new();
    for &d in dims {
        for &w in workers {
            let gs = random_worker_gradients(d, w, master);
            for &b in bits {
                out.push(lemma1_mc_check(&gs, &QuantizerConfig::ewu(b)?, draws, master)?);
            }
        }
    }
    Ok(out)
}

fn lemma1_suite(draws: usize, master: u64) -> Result<Vec<Check>> {
    let reports = lemma1_grid(&[1, 16, 256], &[1, 8], &[2, 4, 8], draws, master)?;
    Ok(reports
        .iter()
        .map(|r| {
            Check::new(
                format!("lemma1 d={} W={} b={}", r.dim, r.workers, r.bits),
                r.passed(),
                format!(
                    "max mean z {:.2} (limit 5), E|g|^2 {:.6e} vs bound {:.6e}, margin {:.1} SE",
                    r.max_mean_z, r.second_moment, r.bound, r.bound_margin_se
                ),
            )
        })
        .collect())
}

/// The anisotropic quadratic used by the bound-dominance checks: `L = 4`,
/// `μ = 0.5`, `η = 0.1`, so `α = 0.92`.
pub fn theorem1_reference() -> RunConfig {
    let diagonal: Vec<f64> = (1..=8).map(|i| 0.5 * i as f64).collect();
    let linear: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect();
    RunConfig {
        objective: ObjectiveSpec::QuadraticDiagonal { diagonal, linear: Some(linear), constant: 0.0 },
        noise: NoiseModel::Gaussian { sigma: 1.0 },
        workers: 4,
        iterations: 200,
        learning_rate: 0.1,
        x0: vec![2.0; 8],
        schedule: ScheduleKind::Dynamic,
        dynamic: DynamicParams {
            epsilon: 0.01,
            gamma: 0.5,
            tau: 10,
            b_min: 2,
            b_max: 32,
            initial_bits: 8,
            alpha: AlphaSource::ClosedForm,
        },
        p: NormOrder::L2,
        precision: NormPrecision::F32,
        seed: 0,
        calibration_draws: 1000,
        record_iterates: false,
    }
}

pub fn bound_params(cfg: &RunConfig, trace: &RunTrace) -> BoundParams {
    BoundParams {
        gap: trace.initial_loss - trace.optimum_loss,
        smoothness: trace.constants.smoothness,
        strong_convexity: trace.constants.strong_convexity,
        learning_rate: cfg.learning_rate,
        sigma: trace.sigma,
        workers: trace.workers,
        dim: trace.dim,
    }
}

/// The optimality-gap bound series for a finished EWU run.
pub fn trace_bound(cfg: &RunConfig, trace: &RunTrace) -> Result<Vec<f64>> {
    let bits: Vec<f64> = trace.bits().iter().map(|&b| b as f64).collect();
    Ok(theorem1_bound(&bound_params(cfg, trace), &trace.gbar(), &bits)?.values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub schedule: String,
    pub horizon: usize,
    pub mean_gap: f64,
    pub gap_se: f64,
    pub mean_bound: f64,
    pub passed: bool,
}

/// Seed-averaged measured gap against the seed-averaged gap bound.
pub fn theorem1_dominance(
    base: &RunConfig,
    kinds: &[ScheduleKind],
    horizons: &[usize],
    seeds: usize,
    master: u64,
) -> Result<Vec<DominanceRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let mut gaps = vec![Vec::with_capacity(seeds); horizons.len()];
        let mut bounds = vec![Vec::with_capacity(seeds); horizons.len()];
        for s in 0..seeds {
            let mut cfg = base.clone();
            cfg.schedule = kind;
            cfg.seed = master.wrapping_add(s as u64);
            let trace = run(&cfg)?;
            let bound = trace_bound(&cfg, &trace)?;
            for (h, &u) in horizons.iter().enumerate() {
                gaps[h].push(trace.gap_at(u).expect("horizon within run"));
                bounds[h].push(bound[u]);
            }
        }
        for (h, &u) in horizons.iter().enumerate() {
            let (mean_gap, gap_se) = mean_se(&gaps[h]);
            let mean_bound = compensated_sum(bounds[h].iter().copied()) / seeds as f64;
            rows.push(DominanceRow {
                schedule: kind.label(),
                horizon: u,
                mean_gap,
                gap_se,
                mean_bound,
                passed: mean_gap <= mean_bound + 3.0 * gap_se,
            });
        }
    }
    Ok(rows)
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean).powi(2))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Largest relative gap between the exact recursion at the noise ceiling and the gap bound on an isotropic quadratic.
pub fn tightness_gap(lambda: f64, dim: usize, workers: usize, eta: f64, sigma: f64, gbar: &[f64], bits: &[f64], x0: &[f64]) -> Result<f64> {
    let q = QuadraticObjective::isotropic(dim, lambda)?;
    let gap = q.loss(x0)? - q.optimum()?.loss;
    let traces: Vec<f64> =
        gbar.iter().zip(bits).map(|(&g, &b)| quantization_noise_covariance_trace(sigma, workers, dim, g, b)).collect();
    let exact = theorem3_exact_series(&q, x0, eta, NoiseSchedule::Isotropic(&traces))?;
    let params = BoundParams { gap, smoothness: lambda, strong_convexity: lambda, learning_rate: eta, sigma, workers, dim };
    let bound = theorem1_bound(&params, gbar, bits)?;
    Ok(exact
        .iter()
        .zip(&bound.values)
        .map(|(a, b)| if *b == 0.0 { (a - b).abs() } else { ((a - b) / b).abs() })
        .fold(0.0, f64::max))
}

/// A decaying `Ḡ` trace and cycling widths for the tightness and exact-recursion checks.
pub fn synthetic_noise_inputs(iterations: usize) -> (Vec<f64>, Vec<f64>) {
    let gbar = (0..iterations).map(|t| 0.3 + 2.0 * 0.98f64.powi(t as i32)).collect();
    let bits = (0..iterations).map(|t| (2 + t % 5) as f64).collect();
    (gbar, bits)
}

fn theorem1_suite(seeds: usize, master: u64) -> Result<Vec<Check>> {
    let kinds = [ScheduleKind::Fixed { bits: 2 }, ScheduleKind::Fixed { bits: 4 }, ScheduleKind::Fixed { bits: 8 }, ScheduleKind::Dynamic];
    let rows = theorem1_dominance(&theorem1_reference(), &kinds, &[10, 50, 100, 200], seeds, master)?;
    let mut checks: Vec<Check> = rows
        .iter()
        .map(|r| {
            Check::new(
                format!("theorem1 dominance {} u={}", r.schedule, r.horizon),
                r.passed,
                format!("gap {:.6e} ± {:.2e} vs bound {:.6e}", r.mean_gap, r.gap_se, r.mean_bound),
            )
        })
        .collect();
    let (gbar, bits) = synthetic_noise_inputs(200);
    let err = tightness_gap(1.0, 4, 8, 0.1, 0.5, &gbar, &bits, &[1.0, -1.0, 0.5, 2.0])?;
    checks.push(Check::new("theorem1 tightness (isotropic)", err <= 1e-9, format!("max relative difference {err:.3e} (limit 1e-9)")));
    Ok(checks)
}

/// Monte Carlo of the perturbed dynamics against the closed form on
/// `d = 4`, `λ = 1`, `η = 0.1`, `T = 200` with ceiling covariance.
/// Returns `(exact, mc_mean, mc_se)`.
pub fn theorem3_monte_carlo(replicates: usize, master: u64) -> Result<(f64, f64, f64)> {
    let (d, lambda, eta, t, w, sigma) = (4, 1.0, 0.1, 200, 8, 0.5);
    let q = QuadraticObjective::isotropic(d, lambda)?;
    let x0 = [1.0, -1.0, 0.5, 2.0];
    let (gbar, bits) = synthetic_noise_inputs(t);
    let traces: Vec<f64> =
        gbar.iter().zip(&bits).map(|(&g, &b)| quantization_noise_covariance_trace(sigma, w, d, g, b)).collect();
    let exact = *theorem3_exact_series(&q, &x0, eta, NoiseSchedule::Isotropic(&traces))?.last().unwrap();
    let (mean, se) = perturbed_dynamics_gap(&q, &x0, eta, &traces, replicates, master)?;
    Ok((exact, mean, se))
}

fn theorem3_suite(replicates: usize, master: u64) -> Result<Vec<Check>> {
    let (exact, mean, se) = theorem3_monte_carlo(replicates, master)?;
    let z = (mean - exact).abs() / se;
    let mut checks = vec![Check::new(
        "theorem3 monte carlo",
        z <= 4.0,
        format!("closed form {exact:.6e}, simulated {mean:.6e} ± {se:.2e} ({z:.2} SE, limit 4)"),
    )];

    let (lambda, eta) = (1.3, 0.12);
    let q = QuadraticObjective::isotropic(5, lambda)?;
    let x0 = [0.5, 1.0, -2.0, 0.0, 1.5];
    let gap = q.loss(&x0)? - q.optimum()?.loss;
    let traces: Vec<f64> = (0..150).map(|t| 0.2 + 0.1 * (t % 7) as f64).collect();
    let general = theorem3_exact_series(&q, &x0, eta, NoiseSchedule::Isotropic(&traces))?;
    let iso = theorem3_isotropic_series(lambda, gap, eta, &traces);
    let err = general.iter().zip(&iso).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    checks.push(Check::new("theorem3 general vs isotropic", err <= 1e-12, format!("max relative difference {err:.3e} (limit 1e-12)")));
    Ok(checks)
}

/// Isotropic quadratic with `α ≈ 0.81` used by the paired-cost check.
pub fn theorem2_reference() -> RunConfig {
    RunConfig {
        objective: ObjectiveSpec::QuadraticIsotropic { dim: 10, lambda: 1.0, linear: None, constant: 0.0 },
        noise: NoiseModel::Gaussian { sigma: 0.5 },
        workers: 8,
        iterations: 200,
        learning_rate: 0.1,
        x0: vec![1.0; 10],
        schedule: ScheduleKind::Dynamic,
        dynamic: DynamicParams {
            epsilon: 1e-3,
            gamma: 0.5,
            tau: 10,
            b_min: 2,
            b_max: 32,
            initial_bits: 8,
            alpha: AlphaSource::ClosedForm,
        },
        p: NormOrder::L2,
        precision: NormPrecision::F32,
        seed: 0,
        calibration_draws: 1000,
        record_iterates: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub seed: u64,
    pub dq_bits: u64,
    pub fixed_bits: u64,
    pub fixed_width: u8,
    pub dq_budget: f64,
    pub fixed_budget: f64,
}

/// Runs the dynamic schedule, then the narrowest fixed width whose own
/// quantization budget is no larger than the dynamic run's.
pub fn paired_budget_run(base: &RunConfig, seed: u64) -> Result<PairedOutcome> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.schedule = ScheduleKind::Dynamic;
    let dq = run(&cfg)?;
    let problem = ProblemSize {
        iterations: cfg.iterations,
        workers: cfg.workers,
        dim: dq.dim,
        learning_rate: cfg.learning_rate,
        constants: dq.constants,
    };
    let alpha = SchedulerState::new(&cfg.dynamic, &problem, dq.initial_loss)?.alpha;
    let dq_budget = budget_satisfaction(&dq.bit_schedule(ScheduleKind::Dynamic), &dq.gbar(), alpha);

    let gbar = dq.gbar();
    let mut width = (2..=32u8)
        .find(|&b| {
            let bits = vec![b as f64; gbar.len()];
            budget_satisfaction_continuous(&bits, &gbar, alpha) <= dq_budget
        })
        .unwrap_or(32);
    loop {
        cfg.schedule = ScheduleKind::Fixed { bits: width };
        let fixed = run(&cfg)?;
        let kind = cfg.schedule;
        let fixed_budget = budget_satisfaction(&fixed.bit_schedule(kind), &fixed.gbar(), alpha);
        if fixed_budget <= dq_budget || width == 32 {
            return Ok(PairedOutcome {
                seed,
                dq_bits: dq.cumulative_bits(),
                fixed_bits: fixed.cumulative_bits(),
                fixed_width: width,
                dq_budget,
                fixed_budget,
            });
        }
        width += 1;
    }
}

pub fn am_gm_grid() -> Vec<(f64, usize, f64, f64)> {
    let mut out = Vec::with_capacity(100);
    for i in 0..10 {
        let alpha = 0.05 + 0.0949 * i as f64;
        for t in [2usize, 3, 5, 10, 20, 50, 100, 500, 1000, 10_000] {
            out.push((alpha, t, gm(alpha, t), am(alpha, t)));
        }
    }
    out
}

fn theorem2_suite(seeds: usize, master: u64) -> Result<Vec<Check>> {
    let grid = am_gm_grid();
    let violations = grid.iter().filter(|(_, _, g, a)| !(g < a)).count();
    let mut checks = vec![Check::new(
        "theorem2 GM < AM grid",
        violations == 0,
        format!("{} points, {violations} violations", grid.len()),
    )];
    let base = theorem2_reference();
    let mut wins = 0;
    let mut dq_total = 0u64;
    let mut fixed_total = 0u64;
    for s in 0..seeds {
        let o = paired_budget_run(&base, master.wrapping_add(s as u64))?;
        if o.dq_bits <= o.fixed_bits {
            wins += 1;
        }
        dq_total += o.dq_bits;
        fixed_total += o.fixed_bits;
    }
    let share = wins as f64 / seeds as f64;
    checks.push(Check::new(
        "theorem2 paired cost",
        share >= 0.95,
        format!(
            "dynamic used no more bits in {wins}/{seeds} seeds ({:.1}%, need 95%); mean ratio {:.4}",
            100.0 * share,
            dq_total as f64 / fixed_total as f64
        ),
    ));
    Ok(checks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub iterations: usize,
    pub alpha: f64,
    pub eps_hat: f64,
    /// Continuous-bits sum relative to `ε̂_Q`, minus one.
    pub continuous_error: f64,
    /// Integer-schedule sum divided by `ε̂_Q`.
    pub rounded_factor: f64,
}

/// A random instance of the budget audit whose continuous widths all lie
/// in `[2, 31.5]`, away from both clamps.
pub fn budget_audit_instance(seed: u64) -> BudgetAudit {
    let mut rng = stream(seed, Domain::MonteCarlo, 0xb0d9e7, 0);
    loop {
        let t_total: usize = rng.random_range(2..=400);
        let alpha: f64 = rng.random_range(0.9..0.9999);
        let mut g: f64 = rng.random_range(0.5..5.0);
        let gbar: Vec<f64> = (0..t_total)
            .map(|_| {
                g *= rng.random_range(0.97..1.02);
                g
            })
            .collect();
        let g_min = gbar.iter().cloned().fold(f64::INFINITY, f64::min);
        let u: f64 = 10f64.powf(rng.random_range(-3.0..0.0));
        let eps_hat = t_total as f64 * alpha.powi(t_total as i32 - 1) * g_min * g_min * u;
        let cont: Vec<f64> = (0..t_total).map(|t| dq_bits_continuous(t_total, eps_hat, alpha, t, gbar[t])).collect();
        if cont.iter().any(|b| *b > 31.5) {
            continue;
        }
        let state = SchedulerState {
            iterations: t_total,
            workers: 1,
            dim: 1,
            learning_rate: 1.0,
            smoothness: 1.0,
            strong_convexity: 1.0,
            epsilon: 1.0,
            gamma: 0.0,
            eps_q: eps_hat,
            eps_hat,
            alpha,
            alpha_source: AlphaSource::Given(alpha),
            gbar_history: Vec::new(),
            tau: 1,
            b_min: 2,
            b_max: 32,
            initial_loss: 1.0,
        };
        let rounded: Vec<f64> = (0..t_total).map(|t| state.dq_bits(t, gbar[t]) as f64).collect();
        let continuous_error = budget_satisfaction_continuous(&cont, &gbar, alpha) / eps_hat - 1.0;
        let rounded_factor = budget_satisfaction_continuous(&rounded, &gbar, alpha) / eps_hat;
        return BudgetAudit { iterations: t_total, alpha, eps_hat, continuous_error, rounded_factor };
    }
}

/// `alpha_estimate` after `t` steps of exact gradient descent on `λI`,
/// relative to the closed form.
pub fn alpha_estimate_error(lambda: f64, eta: f64, dim: usize, t: usize) -> Result<f64> {
    let q = QuadraticObjective::isotropic(dim, lambda)?;
    let mut x: Vec<f64> = (0..dim).map(|i| 1.0 + 0.5 * i as f64).collect();
    let f0 = q.loss(&x)?;
    for _ in 0..t {
        let g = q.gradient(&x)?;
        x.iter_mut().zip(&g).for_each(|(xj, gj)| *xj -= eta * gj);
    }
    let est = alpha_estimate(f0, q.loss(&x)?, t)?;
    let exact = alpha_closed_form(eta, lambda, lambda);
    Ok(((est - exact) / exact).abs())
}

fn schedule_suite(instances: usize, master: u64) -> Vec<Check> {
    let audits: Vec<BudgetAudit> = (0..instances).map(|i| budget_audit_instance(master.wrapping_add(i as u64))).collect();
    let worst_cont = audits.iter().map(|a| a.continuous_error.abs()).fold(0.0, f64::max);
    let (lo, hi) = audits.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), a| (lo.min(a.rounded_factor), hi.max(a.rounded_factor)));
    let mut checks = vec![
        Check::new(
            "schedule continuous budget",
            worst_cont <= 1e-9,
            format!("{instances} instances, worst relative error {worst_cont:.3e} (limit 1e-9)"),
        ),
        Check::new(
            "schedule rounded budget",
            lo >= 0.25 && hi <= 4.0,
            format!("realized/target in [{lo:.3}, {hi:.3}] (limit [0.25, 4])"),
        ),
    ];

    let mut rng = stream(master, Domain::MonteCarlo, 0x5c4e, 1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let alpha: f64 = rng.random_range(0.01..0.999);
        let ratio: f64 = rng.random_range(0.05..1.5);
        let g: f64 = rng.random_range(0.1..10.0);
        let t = rng.random_range(0..99);
        let diff = dq_bits_continuous(100, 1.0, alpha, t + 1, g * ratio) - dq_bits_continuous(100, 1.0, alpha, t, g);
        let class = bits_monotonicity_class(alpha, g, g * ratio).expect("positive gbar");
        let expected = if diff < 0.0 { Monotonicity::Decreasing } else if diff > 0.0 { Monotonicity::Increasing } else { Monotonicity::Flat };
        if class != expected && diff.abs() > 1e-12 {
            mismatches += 1;
        }
    }
    checks.push(Check::new("schedule monotonicity class", mismatches == 0, format!("{mismatches} mismatches in 1000 pairs")));

    match alpha_estimate_error(1.0, 0.1, 4, 50) {
        Ok(err) => checks.push(Check::new("schedule alpha estimate", err <= 0.01, format!("relative error {err:.3e} at t = 50 (limit 1e-2)"))),
        Err(e) => checks.push(Check::new("schedule alpha estimate", false, e.to_string())),
    }
    checks
}
