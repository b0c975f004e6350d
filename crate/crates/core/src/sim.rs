//! Synchronous parameter-server loop with exact communication accounting.
//!
//! Every round each worker draws a stochastic gradient at the current
//! iterate, quantizes it with the round's bit width and encodes the frame.
//! The server decodes the frames, takes `Ḡ_t` from the transmitted norms,
//! averages the reconstructions and steps `x ← x − η·ĝ`. Bits are charged
//! from the frames themselves.
//!
//! Worker `i` in round `t` draws from its own stream seeded by
//! `(master, i, t)`, and reconstructions are summed in a fixed pairwise tree,
//! so the trace does not depend on the order workers are evaluated in.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::format_sig17;
use crate::objective::{
    Constants, GradientOracle, Hessian, LogisticObjective, NoiseModel, Objective, QuadraticObjective, SyntheticDataset,
};
use crate::quant::{
    compress, decode, dequantize, encode, rms_norm, GradientVector, NormOrder, NormPrecision, QuantizedGradient,
    QuantizerConfig,
};
use crate::rng::{stream, Domain};
use crate::schedule::{BitSchedule, DynamicParams, ProblemSize, ScheduleKind, Scheduler};

/// Blow-up factor on the optimality gap that aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObjectiveSpec {
    QuadraticIsotropic { dim: usize, lambda: f64, linear: Option<Vec<f64>>, constant: f64 },
    QuadraticDiagonal { diagonal: Vec<f64>, linear: Option<Vec<f64>>, constant: f64 },
    /// Row-major `dim × dim` Hessian.
    QuadraticDense { dim: usize, hessian: Vec<f64>, linear: Option<Vec<f64>>, constant: f64 },
    Logistic { samples: usize, dim: usize, ridge: f64, label_noise: f64, data_seed: u64 },
}

impl ObjectiveSpec {
    pub fn dim(&self) -> usize {
        match self {
            ObjectiveSpec::QuadraticIsotropic { dim, .. }
            | ObjectiveSpec::QuadraticDense { dim, .. }
            | ObjectiveSpec::Logistic { dim, .. } => *dim,
            ObjectiveSpec::QuadraticDiagonal { diagonal, .. } => diagonal.len(),
        }
    }

    pub fn build(&self) -> Result<Objective> {
        let quadratic = |h: Hessian, linear: &Option<Vec<f64>>, constant: f64, dim: usize| {
            let a = linear.clone().unwrap_or_else(|| vec![0.0; dim]);
            QuadraticObjective::new(h, a, constant).map(Objective::Quadratic)
        };
        match self {
            ObjectiveSpec::QuadraticIsotropic { dim, lambda, linear, constant } => {
                quadratic(Hessian::Isotropic { lambda: *lambda, dim: *dim }, linear, *constant, *dim)
            }
            ObjectiveSpec::QuadraticDiagonal { diagonal, linear, constant } => {
                let h = Hessian::Dense(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diagonal)));
                quadratic(h, linear, *constant, diagonal.len())
            }
            ObjectiveSpec::QuadraticDense { dim, hessian, linear, constant } => {
                if hessian.len() != dim * dim {
                    return Err(Error::DimensionMismatch { expected: dim * dim, actual: hessian.len() });
                }
                quadratic(Hessian::Dense(DMatrix::from_row_slice(*dim, *dim, hessian)), linear, *constant, *dim)
            }
            ObjectiveSpec::Logistic { samples, dim, ridge, label_noise, data_seed } => {
                let data = SyntheticDataset::generate(*samples, *dim, *label_noise, *data_seed)?;
                Ok(Objective::Logistic(LogisticObjective::new(data, *ridge)?))
            }
        }
    }
}

/// Everything a run depends on. Two equal configs give bit-identical traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub objective: ObjectiveSpec,
    pub noise: NoiseModel,
    pub workers: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub x0: Vec<f64>,
    pub schedule: ScheduleKind,
    pub dynamic: DynamicParams,
    pub p: NormOrder,
    pub precision: NormPrecision,
    pub seed: u64,
    /// Samples per worker when the oracle's variance has to be measured.
    pub calibration_draws: usize,
    pub record_iterates: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.x0.len() != self.objective.dim() {
            return Err(Error::Config(format!(
                "x0 has {} coordinates but the objective has dimension {}",
                self.x0.len(),
                self.objective.dim()
            )));
        }
        if self.schedule == ScheduleKind::Dynamic {
            self.dynamic.validate()?;
        }
        Ok(())
    }

    fn quantizer(&self, bits: u8) -> Result<QuantizerConfig> {
        Ok(if bits == 1 {
            QuantizerConfig::sign_only().with_precision(self.precision)
        } else {
            QuantizerConfig::ewu(bits)?.with_p(self.p).with_precision(self.precision)
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// `F(x_t)`
    pub loss: f64,
    /// `‖∇F(x_t)‖₂`
    pub grad_norm: f64,
    pub gbar: f64,
    pub bits: u8,
    pub round_bits: u64,
    pub cum_bits: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTrace {
    pub schedule: String,
    pub records: Vec<IterationRecord>,
    pub final_x: Vec<f64>,
    /// `F(x_T)`
    pub final_loss: f64,
    pub initial_loss: f64,
    pub optimum_loss: f64,
    pub constants: Constants,
    /// `σ` used by the bounds: nominal for synthetic noise, measured otherwise.
    pub sigma: f64,
    pub per_worker_sigma: Option<Vec<f64>>,
    pub dim: usize,
    pub workers: usize,
    pub b_pre: u32,
    pub iterates: Option<Vec<Vec<f64>>>,
    pub wall_time_secs: f64,
}

impl RunTrace {
    /// `F(x_u)` for `u ≤ T`.
    pub fn loss_at(&self, u: usize) -> Option<f64> {
        if u == self.records.len() {
            Some(self.final_loss)
        } else {
            self.records.get(u).map(|r| r.loss)
        }
    }

    pub fn gap_at(&self, u: usize) -> Option<f64> {
        self.loss_at(u).map(|l| l - self.optimum_loss)
    }

    pub fn final_gap(&self) -> f64 {
        self.final_loss - self.optimum_loss
    }

    pub fn bits(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.bits).collect()
    }

    pub fn gbar(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.gbar).collect()
    }

    pub fn cumulative_bits(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_bits)
    }

    pub fn bit_schedule(&self, kind: ScheduleKind) -> BitSchedule {
        BitSchedule { kind, realized: self.bits() }
    }

    /// `Σ_t W·(d·b_t + b_pre)` recomputed from the recorded widths.
    pub fn formula_bits(&self) -> u64 {
        let (w, d, pre) = (self.workers as u64, self.dim as u64, self.b_pre as u64);
        self.records.iter().map(|r| w * (d * r.bits as u64 + pre)).sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"t,loss,grad_norm,gbar,bits,round_bits,cum_bits\n")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t,
                format_sig17(r.loss),
                format_sig17(r.grad_norm),
                format_sig17(r.gbar),
                r.bits,
                r.round_bits,
                r.cum_bits
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }
}

/// Coordinate-wise mean of the reconstructed frames.
pub fn aggregate(frames: &[QuantizedGradient]) -> Result<GradientVector> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidInput("nothing to aggregate".into()));
    };
    let d = first.dim();
    for f in frames {
        check_dim(d, f.dim())?;
    }
    let parts: Vec<Vec<f64>> = frames.iter().map(dequantize).collect();
    let mut sum = tree_sum(&parts);
    let w = frames.len() as f64;
    sum.iter_mut().for_each(|v| *v /= w);
    GradientVector::l2(sum)
}

fn tree_sum(parts: &[Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        1 => parts[0].clone(),
        n => {
            let (left, right) = parts.split_at(n / 2);
            let mut a = tree_sum(left);
            let b = tree_sum(right);
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunTrace> {
    let order: Vec<usize> = (0..cfg.workers).collect();
    run_with_order(cfg, &order)
}

/// Runs with workers evaluated in `order` each round; the trace is the same
/// for every permutation.
pub fn run_with_order(cfg: &RunConfig, order: &[usize]) -> Result<RunTrace> {
    cfg.validate()?;
    let mut seen = vec![false; cfg.workers];
    for &i in order {
        if i >= cfg.workers || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidInput("worker order must be a permutation".into()));
        }
    }
    if order.len() != cfg.workers {
        return Err(Error::InvalidInput("worker order must be a permutation".into()));
    }

    let start = Instant::now();
    let objective = cfg.objective.build()?;
    let oracle = GradientOracle::new(&objective, cfg.noise, cfg.workers)?;
    let constants = objective.constants()?;
    let optimum_loss = objective.optimum()?.loss;
    let d = objective.dim();
    let mut x = cfg.x0.clone();
    let initial_loss = objective.loss(&x)?;

    let (sigma, per_worker_sigma) = match oracle.nominal_sigma() {
        Some(s) => (s, None),
        None => {
            let cal = oracle.calibrate(&objective, &x, cfg.calibration_draws, cfg.seed)?;
            let per: Vec<f64> = cal.per_worker_variance.iter().map(|v| v.sqrt()).collect();
            (cal.measured_sigma, Some(per))
        }
    };

    let problem = ProblemSize {
        iterations: cfg.iterations,
        workers: cfg.workers,
        dim: d,
        learning_rate: cfg.learning_rate,
        constants,
    };
    let mut scheduler = Scheduler::new(cfg.schedule, &cfg.dynamic, &problem, initial_loss)?;
    let b_pre = cfg.precision.bits();
    let threshold = DIVERGENCE_FACTOR * (initial_loss - optimum_loss).max(initial_loss.abs()).max(1.0);

    let mut trace = RunTrace {
        schedule: cfg.schedule.label(),
        records: Vec::with_capacity(cfg.iterations),
        final_x: Vec::new(),
        final_loss: initial_loss,
        initial_loss,
        optimum_loss,
        constants,
        sigma,
        per_worker_sigma,
        dim: d,
        workers: cfg.workers,
        b_pre,
        iterates: cfg.record_iterates.then(Vec::new),
        wall_time_secs: 0.0,
    };

    let mut loss = initial_loss;
    let mut cum_bits = 0u64;
    let mut wire: Vec<Vec<u8>> = vec![Vec::new(); cfg.workers];
    for t in 0..cfg.iterations {
        let bits = scheduler.current_bits();
        let qcfg = cfg.quantizer(bits)?;
        let grad_norm = objective.full_gradient(&x, NormOrder::L2)?.norm();
        if let Some(it) = trace.iterates.as_mut() {
            it.push(x.clone());
        }

        for &i in order {
            let mut rng = stream(cfg.seed, Domain::Round, i as u64, t as u64);
            let g = oracle.sample_gradient(&objective, i, &x, cfg.p, &mut rng)?;
            let frame = compress(&g, &qcfg, &mut rng)?;
            wire[i] = encode(&frame)?;
        }

        let mut frames = Vec::with_capacity(cfg.workers);
        let mut round_bits = 0u64;
        for bytes in &wire {
            let frame = decode(bytes, d, &qcfg)?;
            round_bits += frame.encoded_bits();
            frames.push(frame);
        }
        cum_bits += round_bits;
        let gbar = rms_norm(frames.iter().map(|f| f.norm));
        let update = aggregate(&frames)?;
        for (xj, gj) in x.iter_mut().zip(update.values()) {
            *xj -= cfg.learning_rate * gj;
        }

        trace.records.push(IterationRecord { t, loss, grad_norm, gbar, bits, round_bits, cum_bits });
        loss = objective.loss(&x)?;
        if !loss.is_finite() || loss - optimum_loss > threshold {
            trace.final_x = x;
            trace.final_loss = loss;
            trace.wall_time_secs = start.elapsed().as_secs_f64();
            return Err(Error::Diverged { iteration: t + 1, loss, trace: Box::new(trace) });
        }
        scheduler.advance(t, gbar, loss)?;
    }

    trace.final_x = x;
    trace.final_loss = loss;
    trace.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Re-runs `cfg` and checks that every recorded field matches `trace` bit
/// for bit. Wall time is ignored.
pub fn replay(trace: &RunTrace, cfg: &RunConfig) -> Result<RunTrace> {
    let again = run(cfg)?;
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    let n = trace.records.len().min(again.records.len());
    for t in 0..n {
        let (a, b) = (&trace.records[t], &again.records[t]);
        let field = if a.t != b.t {
            Some("t")
        } else if !same(a.loss, b.loss) {
            Some("loss")
        } else if !same(a.grad_norm, b.grad_norm) {
            Some("grad_norm")
        } else if !same(a.gbar, b.gbar) {
            Some("gbar")
        } else if a.bits != b.bits {
            Some("bits")
        } else if a.round_bits != b.round_bits {
            Some("round_bits")
        } else if a.cum_bits != b.cum_bits {
            Some("cum_bits")
        } else {
            None
        };
        if let Some(field) = field {
            return Err(Error::ReplayMismatch { iteration: t, field });
        }
    }
    if trace.records.len() != again.records.len() {
        return Err(Error::ReplayMismatch { iteration: n, field: "records" });
    }
    let end = trace.records.len();
    if !same(trace.final_loss, again.final_loss) {
        return Err(Error::ReplayMismatch { iteration: end, field: "final_loss" });
    }
    if trace.final_x.len() != again.final_x.len() || trace.final_x.iter().zip(&again.final_x).any(|(a, b)| !same(*a, *b)) {
        return Err(Error::ReplayMismatch { iteration: end, field: "final_x" });
    }
    if !same(trace.sigma, again.sigma) {
        return Err(Error::ReplayMismatch { iteration: 0, field: "sigma" });
    }
    Ok(again)
}
