use dqsgd::config::parse_config;
use dqsgd::quant::{compress, decode, encode, GradientVector, NormPrecision, QuantizerConfig};
use dqsgd::rng::{stream, Domain};
use dqsgd::sim::{replay, run};
use proptest::prelude::*;

const CONFIG: &str = r#"
# noisy quadratic, dynamic widths
[objective]
kind = "quadratic-diagonal"
diagonal = [0.5, 1.0, 2.0, 4.0]
[oracle]
noise = "gaussian"
sigma = 0.4
[run]
workers = 3
iterations = 120
learning_rate = 0.2
[schedule]
tau = 20
epsilon = 0.05
"#;

#[test]
fn config_to_replayable_run() {
    let spec = parse_config(CONFIG).unwrap();
    let trace = run(&spec.run).unwrap();
    assert_eq!(trace.records.len(), 120);
    assert_eq!(trace.cumulative_bits(), trace.formula_bits());
    assert!(trace.final_gap() < trace.initial_loss - trace.optimum_loss);
    replay(&trace, &spec.run).unwrap();
    // Widths only change on refresh rounds.
    let bits = trace.bits();
    for t in 1..bits.len() {
        if t % 20 != 0 {
            assert_eq!(bits[t], bits[t - 1], "t = {t}");
        }
    }
}

#[test]
fn different_seeds_give_different_traces() {
    let mut spec = parse_config(CONFIG).unwrap();
    let a = run(&spec.run).unwrap();
    spec.run.seed += 1;
    let b = run(&spec.run).unwrap();
    assert_ne!(a.final_x, b.final_x);
}

proptest! {
    #[test]
    fn wire_round_trip(values in prop::collection::vec(-1e3f64..1e3, 1..40), bits in 2u8..=32, wide in any::<bool>(), seed in any::<u64>()) {
        let precision = if wide { NormPrecision::F64 } else { NormPrecision::F32 };
        let cfg = QuantizerConfig::ewu(bits).unwrap().with_precision(precision);
        let g = GradientVector::l2(values).unwrap();
        let q = compress(&g, &cfg, &mut stream(seed, Domain::MonteCarlo, 0, 0)).unwrap();
        let bytes = encode(&q).unwrap();
        prop_assert_eq!(bytes.len() as u64, q.encoded_bits().div_ceil(8));
        prop_assert_eq!(decode(&bytes, g.dim(), &cfg).unwrap(), q);
    }
}
