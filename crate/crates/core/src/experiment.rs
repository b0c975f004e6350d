//! Experiment orchestration: multi-seed runs, paired comparisons, sweeps,
//! summaries and on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{to_config_string, ExperimentSpec, Format, Mode, SeedRange};
use crate::error::{Error, Result};
use crate::numeric::format_sig17;
use crate::objective::Objective;
use crate::schedule::{alpha_closed_form, quantization_budget, ScheduleKind};
use crate::sim::{run, RunConfig, RunTrace};
use crate::theory::{
    am, dq_total_cost_bound, fixed_total_cost_bound, gm, quantization_noise_covariance_trace, theorem1_bound,
    theorem3_exact_series, BoundParams, CostBoundParams, NoiseSchedule, TheoryReport,
};
use crate::verify::{run_suite, VerifyReport};

pub const TOOL_NAME: &str = "dqsgd";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Names of the files written into every artifact directory.
pub const CONFIG_COPY: &str = "experiment.cfg";
pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";

pub fn theory_report(cfg: &RunConfig, trace: &RunTrace) -> Result<TheoryReport> {
    let c = trace.constants;
    let alpha = alpha_closed_form(cfg.learning_rate, c.smoothness, c.strong_convexity);
    let gap = trace.initial_loss - trace.optimum_loss;
    let gbar = trace.gbar();
    let has_sign = trace.records.iter().any(|r| r.bits < 2);
    let bits: Vec<f64> = trace.bits().iter().map(|&b| b as f64).collect();

    let params = BoundParams {
        gap,
        smoothness: c.smoothness,
        strong_convexity: c.strong_convexity,
        learning_rate: cfg.learning_rate,
        sigma: trace.sigma,
        workers: trace.workers,
        dim: trace.dim,
    };
    let (theorem1_bound_series, contractive) = if has_sign {
        (None, alpha > 0.0 && alpha < 1.0)
    } else {
        let s = theorem1_bound(&params, &gbar, &bits)?;
        (Some(s.values), s.contractive)
    };

    let theorem3 = match (cfg.objective.build()?, has_sign) {
        (Objective::Quadratic(q), false) => {
            let traces: Vec<f64> = gbar
                .iter()
                .zip(&bits)
                .map(|(&g, &b)| quantization_noise_covariance_trace(trace.sigma, trace.workers, trace.dim, g, b))
                .collect();
            Some(theorem3_exact_series(&q, &cfg.x0, cfg.learning_rate, NoiseSchedule::Isotropic(&traces))?)
        }
        _ => None,
    };

    let d = &cfg.dynamic;
    let (_, eps_hat) = quantization_budget(d.epsilon, d.gamma, trace.workers, c.smoothness, trace.dim, cfg.learning_rate);
    let cost = CostBoundParams {
        workers: trace.workers,
        dim: trace.dim,
        iterations: cfg.iterations,
        smoothness: c.smoothness,
        gap,
        sigma: trace.sigma,
        eps_hat,
        alpha,
        b_pre: trace.b_pre,
    };
    Ok(TheoryReport {
        theorem1_bound_series,
        theorem3_exact_series: theorem3,
        dq_cost_bound: dq_total_cost_bound(&cost),
        fixed_cost_bound: fixed_total_cost_bound(&cost),
        am: am(alpha, cfg.iterations),
        gm: gm(alpha, cfg.iterations),
        alpha,
        contractive,
    })
}

/// One row of the summary table. Values are means over the seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schedule: String,
    pub final_loss: f64,
    pub final_gap: f64,
    pub cum_bits: f64,
    pub bits_vs_32bit_ratio: f64,
}

/// Bits a 32-bit fixed schedule would spend over the same run.
pub fn full_precision_bits(trace: &RunTrace) -> u64 {
    trace.records.len() as u64 * trace.workers as u64 * (32 * trace.dim as u64 + trace.b_pre as u64)
}

pub fn summary_row(traces: &[RunTrace]) -> Option<SummaryRow> {
    let first = traces.first()?;
    let n = traces.len() as f64;
    let mean = |f: &dyn Fn(&RunTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    Some(SummaryRow {
        schedule: first.schedule.clone(),
        final_loss: mean(&|t| t.final_loss),
        final_gap: mean(&|t| t.final_gap()),
        cum_bits: mean(&|t| t.cumulative_bits() as f64),
        bits_vs_32bit_ratio: mean(&|t| t.cumulative_bits() as f64 / full_precision_bits(t) as f64),
    })
}

pub fn emit_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from("schedule,final_loss,final_gap,cum_bits,bits_vs_32bit_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.schedule,
            format_sig17(r.final_loss),
            format_sig17(r.final_gap),
            format_sig17(r.cum_bits),
            format_sig17(r.bits_vs_32bit_ratio)
        ));
    }
    out
}

/// Mean, standard error and normal 95% interval of a sample.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SeedStats {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, se) = crate::verify::mean_se(xs);
        Self { n: xs.len(), mean, se, ci_low: mean - 1.96 * se, ci_high: mean + 1.96 * se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub schedule: String,
    pub final_loss: SeedStats,
    pub final_gap: SeedStats,
    pub cum_bits: SeedStats,
}

impl ScheduleStats {
    pub fn of(traces: &[RunTrace]) -> Self {
        let col = |f: fn(&RunTrace) -> f64| SeedStats::of(&traces.iter().map(f).collect::<Vec<_>>());
        Self {
            schedule: traces.first().map(|t| t.schedule.clone()).unwrap_or_default(),
            final_loss: col(|t| t.final_loss),
            final_gap: col(|t| t.final_gap()),
            cum_bits: col(|t| t.cumulative_bits() as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dynamic: ScheduleStats,
    pub baseline: ScheduleStats,
    /// Dynamic mean final loss is no worse than the baseline's plus three
    /// standard errors of the difference.
    pub reaches_baseline_loss: bool,
    /// The dynamic 95% interval for cumulative bits lies strictly below the baseline's.
    pub fewer_bits: bool,
    /// `1 − dynamic / baseline` mean cumulative bits.
    pub bit_saving: f64,
}

impl Comparison {
    pub fn new(dynamic: &[RunTrace], baseline: &[RunTrace]) -> Self {
        let dynamic = ScheduleStats::of(dynamic);
        let baseline = ScheduleStats::of(baseline);
        let se = dynamic.final_loss.se.hypot(baseline.final_loss.se);
        Self {
            reaches_baseline_loss: dynamic.final_loss.mean <= baseline.final_loss.mean + 3.0 * se,
            fewer_bits: dynamic.cum_bits.ci_high < baseline.cum_bits.ci_low,
            bit_saving: 1.0 - dynamic.cum_bits.mean / baseline.cum_bits.mean,
            dynamic,
            baseline,
        }
    }

    pub fn passed(&self) -> bool {
        self.reaches_baseline_loss && self.fewer_bits
    }
}

pub fn run_seeds(base: &RunConfig, kind: ScheduleKind, seeds: SeedRange) -> Result<Vec<RunTrace>> {
    seeds
        .iter()
        .map(|seed| {
            let mut cfg = base.clone();
            cfg.schedule = kind;
            cfg.seed = seed;
            run(&cfg)
        })
        .collect()
}

pub fn compare(base: &RunConfig, baseline_bits: u8, seeds: SeedRange) -> Result<(Comparison, Vec<RunTrace>, Vec<RunTrace>)> {
    let dynamic = run_seeds(base, ScheduleKind::Dynamic, seeds)?;
    let baseline = run_seeds(base, ScheduleKind::Fixed { bits: baseline_bits }, seeds)?;
    Ok((Comparison::new(&dynamic, &baseline), dynamic, baseline))
}

/// Schedules covered by a spec's mode.
pub fn schedules_for(spec: &ExperimentSpec) -> Vec<ScheduleKind> {
    match spec.mode {
        Mode::Run => vec![spec.run.schedule],
        Mode::Compare => vec![ScheduleKind::Dynamic, ScheduleKind::Fixed { bits: spec.baseline_bits }],
        Mode::Sweep if !spec.sweep_kinds.is_empty() => spec.sweep_kinds.clone(),
        Mode::Sweep => spec.sweep_bits.iter().map(|&b| ScheduleKind::Fixed { bits: b }).collect(),
        Mode::Verify => Vec::new(),
    }
}

#[derive(Clone, Debug)]
pub enum Outcome {
    Runs { summary: Vec<SummaryRow>, comparison: Option<Comparison> },
    Verified(VerifyReport),
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    mode: &'a str,
    seeds: String,
    schedules: Vec<String>,
    verify_target: Option<&'a str>,
}

#[derive(Serialize)]
struct TraceArtifact<'a> {
    config: &'a RunConfig,
    trace: &'a RunTrace,
    theory: &'a TheoryReport,
}

pub fn entry_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(label).join(format!("seed-{seed}"))
}

fn write_entry(dir: &Path, cfg: &RunConfig, trace: &RunTrace, formats: &[Format]) -> Result<()> {
    fs::create_dir_all(dir)?;
    if formats.contains(&Format::Csv) {
        trace.save_csv(&dir.join("trace.csv"))?;
    }
    if formats.contains(&Format::Json) {
        let theory = theory_report(cfg, trace)?;
        let body = serde_json::to_string_pretty(&TraceArtifact { config: cfg, trace, theory: &theory })?;
        fs::write(dir.join("trace.json"), body)?;
    }
    Ok(())
}

/// Runs a parsed spec and writes its artifacts under `out`.
///
/// `source` is the configuration text as given; it is copied verbatim next
/// to the fully resolved form. A divergent run writes its partial trace to
/// `diverged.csv` in its entry directory before the error is returned.
pub fn run_experiment(spec: &ExperimentSpec, source: &str, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_COPY), source)?;
    fs::write(out.join(RESOLVED_CONFIG), to_config_string(spec))?;
    let schedules = schedules_for(spec);
    let manifest = Manifest {
        tool: TOOL_NAME,
        version: TOOL_VERSION,
        mode: spec.mode.name(),
        seeds: spec.seeds.to_string(),
        schedules: schedules.iter().map(|k| k.label()).collect(),
        verify_target: (spec.mode == Mode::Verify).then(|| spec.verify.target.name()),
    };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;

    if spec.mode == Mode::Verify {
        let report = run_suite(&spec.verify, spec.seeds.start)?;
        fs::write(out.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(out.join("verify.txt"), report.render())?;
        return Ok(Outcome::Verified(report));
    }

    let mut groups = Vec::with_capacity(schedules.len());
    for &kind in &schedules {
        let mut traces = Vec::with_capacity(spec.seeds.len());
        for seed in spec.seeds.iter() {
            let mut cfg = spec.run.clone();
            cfg.schedule = kind;
            cfg.seed = seed;
            let dir = entry_dir(out, &kind.label(), seed);
            match run(&cfg) {
                Ok(trace) => {
                    write_entry(&dir, &cfg, &trace, &spec.formats)?;
                    traces.push(trace);
                }
                Err(Error::Diverged { iteration, loss, trace }) => {
                    fs::create_dir_all(&dir)?;
                    trace.save_csv(&dir.join("diverged.csv"))?;
                    return Err(Error::Diverged { iteration, loss, trace });
                }
                Err(e) => return Err(e),
            }
        }
        groups.push(traces);
    }

    let summary: Vec<SummaryRow> = groups.iter().filter_map(|g| summary_row(g)).collect();
    fs::write(out.join(SUMMARY), emit_summary(&summary))?;
    let comparison = (spec.mode == Mode::Compare).then(|| Comparison::new(&groups[0], &groups[1]));
    if let Some(c) = &comparison {
        fs::write(out.join("comparison.json"), serde_json::to_string_pretty(c)?)?;
    }
    Ok(Outcome::Runs { summary, comparison })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::objective::NoiseModel;
    use crate::sim::ObjectiveSpec;

    fn quadratic(kind: ScheduleKind, iterations: usize) -> RunConfig {
        let mut cfg = crate::verify::theorem2_reference();
        cfg.schedule = kind;
        cfg.iterations = iterations;
        cfg
    }

    #[test]
    fn full_precision_ratio_is_one() {
        let t = run(&quadratic(ScheduleKind::Fixed { bits: 32 }, 20)).unwrap();
        assert_eq!(summary_row(&[t]).unwrap().bits_vs_32bit_ratio, 1.0);
    }

    #[test]
    fn four_bit_ratio_follows_frame_size() {
        let t = run(&quadratic(ScheduleKind::Fixed { bits: 4 }, 20)).unwrap();
        let r = summary_row(&[t]).unwrap().bits_vs_32bit_ratio;
        assert_eq!(r, (4.0 * 10.0 + 32.0) / (32.0 * 10.0 + 32.0));
    }

    #[test]
    fn dynamic_ratio_sits_between_sign_and_full_precision() {
        let spec = parse_config("[objective]\nkind = \"quadratic-isotropic\"\n").unwrap();
        let ratio = |kind| {
            let mut cfg = spec.run.clone();
            cfg.schedule = kind;
            summary_row(&[run(&cfg).unwrap()]).unwrap().bits_vs_32bit_ratio
        };
        let dq = ratio(ScheduleKind::Dynamic);
        assert!(ratio(ScheduleKind::Sign) < dq && dq < 1.0, "{dq}");
    }

    #[test]
    fn summary_csv_layout() {
        let rows = [SummaryRow { schedule: "fixed-4".into(), final_loss: 0.5, final_gap: 0.25, cum_bits: 576.0, bits_vs_32bit_ratio: 0.125 }];
        assert_eq!(
            emit_summary(&rows),
            "schedule,final_loss,final_gap,cum_bits,bits_vs_32bit_ratio\nfixed-4,0.50000000000000000,0.25000000000000000,576.00000000000000,0.12500000000000000\n"
        );
    }

    #[test]
    fn theory_report_spans_the_run() {
        let cfg = quadratic(ScheduleKind::Dynamic, 50);
        let t = run(&cfg).unwrap();
        let r = theory_report(&cfg, &t).unwrap();
        assert_eq!(r.theorem1_bound_series.as_ref().unwrap().len(), 51);
        assert_eq!(r.theorem3_exact_series.as_ref().unwrap().len(), 51);
        assert!(r.gm < r.am);
        assert!(r.dq_cost_bound < r.fixed_cost_bound);
        // Ceiling covariance on an isotropic quadratic: both series agree.
        let a = r.theorem1_bound_series.unwrap();
        let b = r.theorem3_exact_series.unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(((x - y) / x).abs() < 1e-9);
        }
        let sign = quadratic(ScheduleKind::Sign, 10);
        assert!(theory_report(&sign, &run(&sign).unwrap()).unwrap().theorem1_bound_series.is_none());
    }

    #[test]
    fn paired_quadratic_comparison_saves_bits() {
        let mut base = quadratic(ScheduleKind::Dynamic, 200);
        base.dynamic.epsilon = 1e-3;
        let (c, _, _) = compare(&base, 6, SeedRange { start: 0, end: 50 }).unwrap();
        assert!(c.passed(), "{c:#?}");
    }

    #[test]
    fn sweep_writes_one_trace_per_setting() {
        let text = "[experiment]\nmode = \"sweep\"\nseeds = \"0..2\"\n[run]\niterations = 15\n[sweep]\nbits = [2, 3, 4, 5, 6, 7, 8]\n";
        let spec = parse_config(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let Outcome::Runs { summary, .. } = run_experiment(&spec, text, dir.path()).unwrap() else { panic!() };
        assert_eq!(summary.len(), 7);
        for b in 2..=8 {
            for s in 0..2 {
                let d = entry_dir(dir.path(), &format!("fixed-{b}"), s);
                assert!(d.join("trace.csv").is_file() && d.join("trace.json").is_file());
            }
        }
        assert_eq!(fs::read_to_string(dir.path().join(CONFIG_COPY)).unwrap(), text);
        let resolved = parse_config(&fs::read_to_string(dir.path().join(RESOLVED_CONFIG)).unwrap()).unwrap();
        assert_eq!(resolved, spec);
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest["version"], TOOL_VERSION);
        assert_eq!(manifest["seeds"], "0..2");
    }

    #[test]
    fn divergence_leaves_a_diagnostic_trace() {
        let mut spec = parse_config("[run]\nlearning_rate = 5.0\niterations = 200\n").unwrap();
        spec.run.objective = ObjectiveSpec::QuadraticIsotropic { dim: 3, lambda: 1.0, linear: None, constant: 0.0 };
        spec.run.x0 = vec![1.0; 3];
        spec.run.noise = NoiseModel::Exact;
        spec.run.schedule = ScheduleKind::Fixed { bits: 8 };
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&spec, "", dir.path()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert!(entry_dir(dir.path(), "fixed-8", 0).join("diverged.csv").is_file());
    }
}
