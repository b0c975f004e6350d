use super::*;
use crate::rng::{stream, Domain};
use proptest::prelude::*;

fn five_points() -> SyntheticDataset {
    SyntheticDataset {
        samples: 5,
        dim: 2,
        features: vec![1.0, 0.0, 0.0, 1.0, -1.0, 2.0, 0.5, -0.5, 3.0, 1.0],
        labels: vec![1.0, -1.0, 1.0, 1.0, -1.0],
    }
}

fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, Domain::MonteCarlo, 0, 0);
    let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut h = &m * m.transpose() / d as f64;
    for i in 0..d {
        h[(i, i)] += 0.1;
    }
    h
}

fn random_vec(d: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    (0..d).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

#[test]
fn quadratic_loss_examples() {
    let q = QuadraticObjective::isotropic(2, 1.0).unwrap();
    assert_eq!(q.loss(&[0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(q.loss(&[1.0, 1.0]).unwrap(), 1.0);
    assert!(matches!(q.loss(&[1.0]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn quadratic_gradient_examples() {
    let q = QuadraticObjective::isotropic(2, 2.0).unwrap();
    assert_eq!(q.gradient(&[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
    let h = random_spd(4, 3);
    let q = QuadraticObjective::new(Hessian::Dense(h), vec![1.0, -2.0, 0.5, 0.0], 3.0).unwrap();
    let opt = q.optimum().unwrap();
    let g = q.gradient(&opt.x).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    assert!((q.loss(&opt.x).unwrap() - opt.loss).abs() < 1e-12);
}

fn finite_difference_check(objective: &Objective, x: &[f64]) {
    let g = objective.gradient(x).unwrap();
    let h = 1e-6;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fd = (objective.loss(&xp).unwrap() - objective.loss(&xm).unwrap()) / (2.0 * h);
        assert!((fd - g[j]).abs() <= 1e-5 * scale, "coord {j}: fd {fd} vs {}", g[j]);
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = stream(8, Domain::MonteCarlo, 0, 0);
    let q = QuadraticObjective::new(Hessian::Dense(random_spd(5, 9)), random_vec(5, &mut rng, 1.0), 0.0).unwrap();
    let lg = LogisticObjective::new(SyntheticDataset::generate(200, 6, 0.3, 4).unwrap(), 0.05).unwrap();
    for _ in 0..5 {
        finite_difference_check(&Objective::Quadratic(q.clone()), &random_vec(5, &mut rng, 2.0));
        finite_difference_check(&Objective::Logistic(lg.clone()), &random_vec(6, &mut rng, 2.0));
    }
}

#[test]
fn logistic_loss_matches_direct_sum() {
    let data = five_points();
    let obj = LogisticObjective::new(data.clone(), 0.1).unwrap();
    let x = [0.3, -0.7];
    let mut total = 0.0;
    for i in 0..5 {
        let m = data.features[2 * i] * x[0] + data.features[2 * i + 1] * x[1];
        total += (1.0 + (-data.labels[i] * m).exp()).ln();
    }
    let oracle = total / 5.0 + 0.05 * (x[0] * x[0] + x[1] * x[1]);
    assert!((obj.loss(&x).unwrap() - oracle).abs() < 1e-14);
}

#[test]
fn constants_examples() {
    let q = QuadraticObjective::diagonal(&[1.0, 4.0]).unwrap();
    let c = q.constants().unwrap();
    assert!((c.smoothness - 4.0).abs() < 1e-12 && (c.strong_convexity - 1.0).abs() < 1e-12, "{c:?}");
    let iso = QuadraticObjective::isotropic(3, 2.5).unwrap().constants().unwrap();
    assert_eq!((iso.smoothness, iso.strong_convexity), (2.5, 2.5));
}

#[test]
fn power_iteration_agrees_with_dense_eigendecomposition() {
    for (d, seed) in [(2, 1), (5, 2), (8, 3), (16, 4), (30, 5)] {
        let h = random_spd(d, seed);
        let eig = h.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        let c = QuadraticObjective::new(Hessian::Dense(h), vec![0.0; d], 0.0).unwrap().constants().unwrap();
        assert!((c.smoothness - lmax).abs() <= 1e-8 * lmax, "d={d}: {} vs {lmax}", c.smoothness);
        assert!((c.strong_convexity - lmin).abs() <= 1e-8 * lmin, "d={d}: {} vs {lmin}", c.strong_convexity);
    }
}

#[test]
fn logistic_constants_use_operator_norm() {
    let data = SyntheticDataset::generate(100, 4, 0.1, 1).unwrap();
    let x = DMatrix::from_row_slice(100, 4, &data.features);
    let op_sq = (x.transpose() * &x).symmetric_eigen().eigenvalues.max();
    let c = LogisticObjective::new(data, 0.2).unwrap().constants().unwrap();
    assert!((c.smoothness - (op_sq / 400.0 + 0.2)).abs() < 1e-10);
    assert_eq!(c.strong_convexity, 0.2);
}

#[test]
fn non_positive_definite_hessians_are_rejected() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(
        QuadraticObjective::new(Hessian::Dense(m), vec![0.0; 2], 0.0),
        Err(Error::NotPositiveDefinite(_))
    ));
    assert!(QuadraticObjective::isotropic(2, 0.0).is_err());
    assert!(QuadraticObjective::isotropic(2, -1.0).is_err());
    let asym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
    assert!(QuadraticObjective::new(Hessian::Dense(asym), vec![0.0; 2], 0.0).is_err());
}

#[test]
fn logistic_optimum_is_stationary() {
    let lg = LogisticObjective::new(SyntheticDataset::generate(300, 5, 0.5, 2).unwrap(), 0.01).unwrap();
    let opt = lg.optimum().unwrap();
    let g = lg.gradient(&opt.x).unwrap();
    assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
    assert!(opt.loss < lg.loss(&vec![0.0; 5]).unwrap());
}

#[test]
fn shards_are_contiguous_and_cover_the_data() {
    let lg = LogisticObjective::new(SyntheticDataset::generate(10, 2, 0.1, 0).unwrap(), 0.0).unwrap();
    let shards = lg.shards(3);
    assert_eq!(shards, vec![0..4, 4..7, 7..10]);
}

#[test]
fn gaussian_oracle_without_noise_is_exact() {
    let obj = Objective::Quadratic(QuadraticObjective::diagonal(&[1.0, 2.0, 3.0]).unwrap());
    let oracle = GradientOracle::new(&obj, NoiseModel::Gaussian { sigma: 0.0 }, 2).unwrap();
    let mut rng = stream(0, Domain::Round, 0, 0);
    let x = [1.0, -1.0, 0.5];
    let g = oracle.sample_gradient(&obj, 1, &x, NormOrder::L2, &mut rng).unwrap();
    assert_eq!(g.values(), obj.gradient(&x).unwrap().as_slice());
    assert!(oracle.sample_gradient(&obj, 2, &x, NormOrder::L2, &mut rng).is_err());
}

#[test]
fn gaussian_oracle_is_unbiased() {
    let obj = Objective::Quadratic(QuadraticObjective::diagonal(&[1.0, 2.0, 3.0, 4.0]).unwrap());
    let sigma = 0.8;
    let oracle = GradientOracle::new(&obj, NoiseModel::Gaussian { sigma }, 1).unwrap();
    let x = [0.5, -0.25, 1.0, 2.0];
    let exact = obj.gradient(&x).unwrap();
    let n = 100_000;
    let mut rng = stream(11, Domain::MonteCarlo, 0, 0);
    let mut sum = vec![0.0; 4];
    for _ in 0..n {
        let g = oracle.sample_gradient(&obj, 0, &x, NormOrder::L2, &mut rng).unwrap();
        for j in 0..4 {
            sum[j] += g.values()[j];
        }
    }
    let se = sigma / 2.0 / (n as f64).sqrt();
    for j in 0..4 {
        assert!((sum[j] / n as f64 - exact[j]).abs() < 5.0 * se);
    }
}

#[test]
fn full_shard_minibatch_is_deterministic() {
    let mut data = five_points();
    let copy = data.clone();
    data.features.extend(copy.features);
    data.labels.extend(copy.labels);
    data.samples = 10;
    let lg = LogisticObjective::new(data, 0.0).unwrap();
    let obj = Objective::Logistic(lg.clone());
    let oracle = GradientOracle::new(&obj, NoiseModel::Minibatch { batch: 5 }, 2).unwrap();
    let x = [0.2, 0.1];
    let full = obj.gradient(&x).unwrap();
    for w in 0..2 {
        let mut rng = stream(w as u64, Domain::Round, 0, 0);
        let g = oracle.sample_gradient(&obj, w, &x, NormOrder::L2, &mut rng).unwrap();
        for (a, b) in g.values().iter().zip(&full) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn minibatch_requires_finite_sum_and_nonempty_shards() {
    let quad = Objective::Quadratic(QuadraticObjective::isotropic(2, 1.0).unwrap());
    assert!(GradientOracle::new(&quad, NoiseModel::Minibatch { batch: 2 }, 1).is_err());
    let lg = Objective::Logistic(LogisticObjective::new(five_points(), 0.0).unwrap());
    assert!(matches!(GradientOracle::new(&lg, NoiseModel::Minibatch { batch: 2 }, 6), Err(Error::EmptyShard(5))));
}

#[test]
fn calibration_respects_sigma_bound() {
    let mut rng = stream(21, Domain::MonteCarlo, 0, 0);
    let obj = Objective::Quadratic(QuadraticObjective::new(Hessian::Dense(random_spd(6, 1)), vec![0.0; 6], 0.0).unwrap());
    let sigma = 0.5;
    let oracle = GradientOracle::new(&obj, NoiseModel::Gaussian { sigma }, 3).unwrap();
    for k in 0..3 {
        let x = random_vec(6, &mut rng, 3.0);
        let cal = oracle.calibrate(&obj, &x, 20_000, k).unwrap();
        for (v, se) in cal.per_worker_variance.iter().zip(&cal.per_worker_standard_error) {
            assert!(*v <= sigma * sigma + 5.0 * se, "{v}");
        }
    }

    // minibatch: the sigma measured at x is re-confirmed by an independent pass
    let lg = Objective::Logistic(LogisticObjective::new(SyntheticDataset::generate(400, 5, 0.2, 3).unwrap(), 0.01).unwrap());
    let oracle = GradientOracle::new(&lg, NoiseModel::Minibatch { batch: 8 }, 4).unwrap();
    for k in 0..3 {
        let x = random_vec(5, &mut rng, 1.0);
        let cal = oracle.calibrate(&lg, &x, 4_000, 100 + k).unwrap();
        let check = oracle.calibrate(&lg, &x, 4_000, 200 + k).unwrap();
        let sigma_sq = cal.measured_sigma.powi(2);
        for (v, se) in check.per_worker_variance.iter().zip(&check.per_worker_standard_error) {
            let se_cal = cal.per_worker_standard_error.iter().fold(0.0f64, |m, s| m.max(*s));
            assert!(*v <= sigma_sq + 5.0 * (se * se + se_cal * se_cal).sqrt());
        }
    }
}

fn quadratic_strategy() -> impl Strategy<Value = (QuadraticObjective, u64)> {
    (1usize..6, any::<u64>()).prop_map(|(d, seed)| {
        let mut rng = stream(seed, Domain::MonteCarlo, 1, 0);
        let a = random_vec(d, &mut rng, 1.0);
        (QuadraticObjective::new(Hessian::Dense(random_spd(d, seed)), a, 0.3).unwrap(), seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn smoothness_inequality_holds((q, seed) in quadratic_strategy()) {
        let c = q.constants().unwrap();
        let lg = LogisticObjective::new(SyntheticDataset::generate(50, q.dim(), 0.3, seed).unwrap(), 0.05).unwrap();
        let cl = lg.constants().unwrap();
        let mut rng = stream(seed, Domain::MonteCarlo, 2, 0);
        let d = q.dim();
        for _ in 0..1000 / 16 + 1 {
            let x = random_vec(d, &mut rng, 3.0);
            let y = random_vec(d, &mut rng, 3.0);
            for (f, l) in [(Objective::Quadratic(q.clone()), c.smoothness), (Objective::Logistic(lg.clone()), cl.smoothness)] {
                let fx = f.loss(&x).unwrap();
                let gx = f.gradient(&x).unwrap();
                let lin: f64 = gx.iter().zip(x.iter().zip(&y)).map(|(g, (a, b))| g * (b - a)).sum();
                let dist2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
                let rhs = fx + lin + 0.5 * l * dist2;
                prop_assert!(f.loss(&y).unwrap() <= rhs + 1e-10 * rhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradient_norm_sandwich_for_quadratics((q, seed) in quadratic_strategy()) {
        let c = q.constants().unwrap();
        let opt = q.optimum().unwrap();
        let mut rng = stream(seed, Domain::MonteCarlo, 3, 0);
        for _ in 0..50 {
            let x = random_vec(q.dim(), &mut rng, 3.0);
            let gap = q.loss(&x).unwrap() - opt.loss;
            let g2: f64 = q.gradient(&x).unwrap().iter().map(|v| v * v).sum();
            let tol = 1e-9 * g2.max(gap).max(1e-12);
            prop_assert!(2.0 * c.strong_convexity * gap <= g2 + tol);
            prop_assert!(g2 <= 2.0 * c.smoothness * gap + tol);
        }
    }
}
