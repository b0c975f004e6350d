//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use dqsgd::config::SeedRange;
use dqsgd::experiment::compare;
use dqsgd::objective::NoiseModel;
use dqsgd::quant::{
    compress, decode, encode, encoded_bits, Codec, GradientVector, NormOrder, NormPrecision, QuantizedGradient,
    QuantizerConfig,
};
use dqsgd::rng::{stream, Domain};
use dqsgd::schedule::{AlphaSource, ScheduleKind};
use dqsgd::sim::{replay, run, ObjectiveSpec, RunConfig};
use dqsgd::verify::{
    alpha_estimate_error, am_gm_grid, budget_audit_instance, lemma1_grid, paired_budget_run, synthetic_noise_inputs,
    theorem1_dominance, theorem1_reference, theorem2_reference, theorem3_monte_carlo, tightness_gap,
};
use rand::Rng;

const MASTER: u64 = 20_240_601;

// Pinned tolerances.
const LEMMA1_DRAWS: usize = 100_000;
const LEMMA1_Z: f64 = 5.0;
const LEMMA1_SECS: f64 = 120.0;
const THEOREM3_REPLICATES: usize = 10_000;
const THEOREM3_Z: f64 = 4.0;
const THEOREM3_SECS: f64 = 300.0;
const THEOREM1_SEEDS: usize = 200;
const THEOREM1_Z: f64 = 3.0;
const TIGHTNESS_REL: f64 = 1e-9;
const AUDIT_INSTANCES: usize = 100;
const AUDIT_REL: f64 = 1e-9;
const AUDIT_FACTOR: f64 = 4.0;
const PAIRED_SEEDS: usize = 50;
const PAIRED_SHARE: f64 = 0.95;
const LOGISTIC_SEEDS: u64 = 50;
const CODEC_FRAMES: usize = 1_000_000;
const ALPHA_REL: f64 = 0.01;
const ALPHA_STEPS: usize = 50;

type Outcome = Result<(bool, String), String>;

fn lemma1() -> Outcome {
    let start = Instant::now();
    let reports = lemma1_grid(&[1, 16, 256], &[1, 8], &[2, 4, 8], LEMMA1_DRAWS, MASTER).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> =
        reports.iter().filter(|r| !r.passed()).map(|r| format!("d={} W={} b={}", r.dim, r.workers, r.bits)).collect();
    let worst_z = reports.iter().map(|r| r.max_mean_z).fold(0.0, f64::max);
    let worst_margin = reports.iter().map(|r| r.bound_margin_se).fold(f64::INFINITY, f64::min);
    Ok((
        failed.is_empty() && secs <= LEMMA1_SECS,
        format!(
            "{} cells x {LEMMA1_DRAWS} draws, worst mean z {worst_z:.2} (limit {LEMMA1_Z}), tightest bound margin {worst_margin:.1} SE (limit -{LEMMA1_Z}), {secs:.1} s (limit {LEMMA1_SECS} s){}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!(", failed {}", failed.join(" ")) }
        ),
    ))
}

fn theorem3() -> Outcome {
    let start = Instant::now();
    let (exact, mean, se) = theorem3_monte_carlo(THEOREM3_REPLICATES, MASTER).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let z = (mean - exact).abs() / se;
    Ok((
        z <= THEOREM3_Z && secs <= THEOREM3_SECS,
        format!(
            "exact {exact:.6e}, mean of {THEOREM3_REPLICATES} seeds {mean:.6e} ± {se:.2e}, {z:.2} SE (limit {THEOREM3_Z}), {secs:.1} s (limit {THEOREM3_SECS} s)"
        ),
    ))
}

fn theorem1() -> Outcome {
    let kinds = [ScheduleKind::Fixed { bits: 2 }, ScheduleKind::Fixed { bits: 4 }, ScheduleKind::Fixed { bits: 8 }, ScheduleKind::Dynamic];
    let rows = theorem1_dominance(&theorem1_reference(), &kinds, &[10, 50, 100, 200], THEOREM1_SEEDS, MASTER)
        .map_err(|e| e.to_string())?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| format!("{}@{}", r.schedule, r.horizon)).collect();
    let worst = rows
        .iter()
        .map(|r| (r.mean_gap - r.mean_bound) / r.gap_se.max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    let (gbar, bits) = synthetic_noise_inputs(200);
    let tight = tightness_gap(1.0, 4, 8, 0.1, 0.5, &gbar, &bits, &[1.0, -1.0, 0.5, 2.0]).map_err(|e| e.to_string())?;
    Ok((
        failed.is_empty() && tight <= TIGHTNESS_REL,
        format!(
            "(a) {} schedule/horizon pairs over {THEOREM1_SEEDS} seeds, worst (gap - bound)/SE {worst:.1} (limit {THEOREM1_Z}){}; (b) max relative difference {tight:.2e} (limit {TIGHTNESS_REL:e})",
            rows.len(),
            if failed.is_empty() { String::new() } else { format!(", failed {}", failed.join(" ")) }
        ),
    ))
}

fn budget_audit() -> Outcome {
    let audits: Vec<_> = (0..AUDIT_INSTANCES).map(|i| budget_audit_instance(MASTER + i as u64)).collect();
    let worst = audits.iter().map(|a| a.continuous_error.abs()).fold(0.0, f64::max);
    let lo = audits.iter().map(|a| a.rounded_factor).fold(f64::INFINITY, f64::min);
    let hi = audits.iter().map(|a| a.rounded_factor).fold(0.0, f64::max);
    Ok((
        worst <= AUDIT_REL && lo >= 1.0 / AUDIT_FACTOR && hi <= AUDIT_FACTOR,
        format!(
            "{AUDIT_INSTANCES} instances, continuous relative error {worst:.2e} (limit {AUDIT_REL:e}), rounded/target in [{lo:.3}, {hi:.3}] (limit factor {AUDIT_FACTOR})"
        ),
    ))
}

fn theorem2() -> Outcome {
    let grid = am_gm_grid();
    let violations = grid.iter().filter(|(_, _, g, a)| !(g < a)).count();
    let base = theorem2_reference();
    let mut wins = 0;
    let mut ratio = 0.0;
    for s in 0..PAIRED_SEEDS {
        let o = paired_budget_run(&base, MASTER + s as u64).map_err(|e| e.to_string())?;
        wins += (o.dq_bits <= o.fixed_bits) as usize;
        ratio += o.dq_bits as f64 / o.fixed_bits as f64 / PAIRED_SEEDS as f64;
    }
    let share = wins as f64 / PAIRED_SEEDS as f64;
    Ok((
        violations == 0 && share >= PAIRED_SHARE,
        format!(
            "(a) {} grid points, {violations} with GM >= AM; (b) dynamic <= fixed bits in {wins}/{PAIRED_SEEDS} seeds (limit {:.0}%), mean bit ratio {ratio:.3}",
            grid.len(),
            100.0 * PAIRED_SHARE
        ),
    ))
}

fn logistic_reference() -> RunConfig {
    let mut cfg = theorem2_reference();
    cfg.objective = ObjectiveSpec::Logistic { samples: 2000, dim: 50, ridge: 0.01, label_noise: 0.5, data_seed: 0 };
    cfg.noise = NoiseModel::Minibatch { batch: 16 };
    cfg.workers = 8;
    cfg.iterations = 1000;
    cfg.learning_rate = 1.0;
    cfg.x0 = vec![1.0; 50];
    cfg.dynamic.epsilon = 0.3;
    cfg.dynamic.tau = 100;
    cfg.dynamic.alpha = AlphaSource::Estimated;
    cfg
}

fn logistic() -> Outcome {
    let (c, _, _) = compare(&logistic_reference(), 6, SeedRange { start: 0, end: LOGISTIC_SEEDS }).map_err(|e| e.to_string())?;
    Ok((
        c.passed(),
        format!(
            "final loss {:.6} ± {:.1e} vs fixed-6 {:.6} ± {:.1e} (within 3 SE: {}); bits 95% CI [{:.0}, {:.0}] vs [{:.0}, {:.0}] (disjoint and lower: {}); saving {:.1}%",
            c.dynamic.final_loss.mean,
            c.dynamic.final_loss.se,
            c.baseline.final_loss.mean,
            c.baseline.final_loss.se,
            c.reaches_baseline_loss,
            c.dynamic.cum_bits.ci_low,
            c.dynamic.cum_bits.ci_high,
            c.baseline.cum_bits.ci_low,
            c.baseline.cum_bits.ci_high,
            c.fewer_bits,
            100.0 * c.bit_saving
        ),
    ))
}

fn random_frame(rng: &mut impl Rng) -> (QuantizedGradient, QuantizerConfig) {
    let dim = rng.random_range(1..=64);
    let precision = if rng.random_bool(0.5) { NormPrecision::F32 } else { NormPrecision::F64 };
    let codec_pick = rng.random_range(0..=31u8);
    let cfg = if codec_pick == 0 {
        QuantizerConfig::sign_only()
    } else {
        QuantizerConfig::ewu(codec_pick + 1).unwrap()
    }
    .with_precision(precision)
    .with_p(if rng.random_bool(0.5) { NormOrder::L2 } else { NormOrder::INF });
    let scale = 10f64.powf(rng.random_range(-6.0..6.0));
    let values = (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let g = GradientVector::new(values, cfg.p).unwrap();
    (compress(&g, &cfg, rng).unwrap(), cfg)
}

fn determinism_and_codec() -> Outcome {
    let mut rng = stream(MASTER, Domain::MonteCarlo, 7, 0);
    let mut round_trip_failures = 0usize;
    let mut size_failures = 0usize;
    for _ in 0..CODEC_FRAMES {
        let (q, cfg) = random_frame(&mut rng);
        let bytes = encode(&q).map_err(|e| e.to_string())?;
        let bits = encoded_bits(q.dim(), q.codec, q.precision);
        let b = match q.codec {
            Codec::Ewu { bits } => bits as u64,
            Codec::SignOnly => 1,
        };
        if bits != q.dim() as u64 * b + q.precision.bits() as u64 || bytes.len() as u64 != bits.div_ceil(8) {
            size_failures += 1;
        }
        match decode(&bytes, q.dim(), &cfg) {
            Ok(back) if back == q => {}
            _ => round_trip_failures += 1,
        }
    }

    let mut replays = Vec::new();
    let mut cfgs = vec![
        (ScheduleKind::Dynamic, logistic_reference()),
        (ScheduleKind::Dynamic, theorem1_reference()),
        (ScheduleKind::Ternary, theorem2_reference()),
        (ScheduleKind::Sign, theorem2_reference()),
        (ScheduleKind::Fixed { bits: 32 }, theorem2_reference()),
    ];
    for (kind, cfg) in cfgs.iter_mut() {
        cfg.schedule = *kind;
        cfg.iterations = cfg.iterations.min(300);
        cfg.seed = 17;
        let trace = run(cfg).map_err(|e| e.to_string())?;
        let accounted = trace.cumulative_bits() == trace.formula_bits();
        replays.push((kind.label(), replay(&trace, cfg).is_ok() && accounted));
    }
    let replay_failed: Vec<&str> = replays.iter().filter(|(_, ok)| !ok).map(|(l, _)| l.as_str()).collect();
    Ok((
        round_trip_failures == 0 && size_failures == 0 && replay_failed.is_empty(),
        format!(
            "{CODEC_FRAMES} frames: {round_trip_failures} round-trip and {size_failures} size mismatches; {} replays bit-identical{}",
            replays.len() - replay_failed.len(),
            if replay_failed.is_empty() { String::new() } else { format!(", failed {}", replay_failed.join(" ")) }
        ),
    ))
}

fn alpha_estimator() -> Outcome {
    let cases = [(1.0, 0.1, 4), (2.0, 0.2, 10), (0.5, 0.5, 3)];
    let mut worst: f64 = 0.0;
    for (lambda, eta, dim) in cases {
        worst = worst.max(alpha_estimate_error(lambda, eta, dim, ALPHA_STEPS).map_err(|e| e.to_string())?);
    }
    Ok((worst <= ALPHA_REL, format!("worst relative error at t = {ALPHA_STEPS}: {worst:.2e} over {} quadratics (limit {ALPHA_REL})", cases.len())))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 lemma1 monte carlo", lemma1),
        ("2 theorem3 exactness", theorem3),
        ("3 theorem1 dominance and tightness", theorem1),
        ("4 scheduler budget audit", budget_audit),
        ("5 theorem2 ordering", theorem2),
        ("6 logistic paired comparison", logistic),
        ("7 determinism and codec", determinism_and_codec),
        ("8 alpha estimator", alpha_estimator),
    ];
    let mut all = true;
    for (name, check) in criteria {
        let (ok, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        all &= ok;
        println!("{} criterion {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
