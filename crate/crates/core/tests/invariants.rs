//! Randomized invariants of the sampler, models, estimators and data tools.

use jarzmle::baselines::{run_baseline, BaselineConfig};
use jarzmle::cloud::ParticleCloud;
use jarzmle::data::{gen_linreg_data, gen_poly_data, two_moons, ErrorKind, Standardization};
use jarzmle::engine::{estimate_gradient, run_jala_em, JalaEm};
use jarzmle::evaluation::{lppd, Classifier};
use jarzmle::jarzynski::{ess, kernel_step, log_mean_exp, normalized_weights, resample_cloud, systematic_resample};
use jarzmle::model::{check_gradients, LatentModel};
use jarzmle::models::{
    BayesianLogistic, ConjugateGaussian, GaussianLinReg, PolynomialReg, StudentTLinReg, TinyBnn,
};
use jarzmle::nalgebra::{DMatrix, DVector, SymmetricEigen};
use jarzmle::optim::{power_iteration, OptimizerSpec, ThetaState};
use jarzmle::rng::{standard_normal_vec, substream, tag, uniform01};
use jarzmle::selection::{gaussian_evidence, is_evidence_student_t};
use jarzmle::{OptimizerSpec as Opt, RunConfig};
use proptest::prelude::*;

fn linreg_model(seed: u64) -> GaussianLinReg {
    let d = gen_linreg_data(20, 3, 1.0, 1.0, ErrorKind::Gaussian, seed);
    GaussianLinReg::new(d.x, d.y).unwrap()
}

fn student_model(seed: u64) -> StudentTLinReg {
    let d = gen_linreg_data(20, 3, 1.0, 1.0, ErrorKind::StudentT { nu: 4.0 }, seed);
    StudentTLinReg::new(d.x, d.y).unwrap()
}

fn poly_model(seed: u64) -> PolynomialReg {
    let d = gen_poly_data(20, 3, 1.0, 1.0, seed);
    PolynomialReg::new(&d.x, d.y, 3).unwrap()
}

fn blr_model(seed: u64) -> BayesianLogistic {
    let d = two_moons(30, 0.2, seed);
    BayesianLogistic::new(d.features, d.targets, 5.0).unwrap()
}

fn bnn_model(seed: u64) -> TinyBnn {
    let d = two_moons(20, 0.2, seed);
    let labels = d.class_labels();
    TinyBnn::new(d.features, labels, 4, 2).unwrap()
}

fn assert_gradients<M: LatentModel>(m: &M, theta: &[f64], x: &[f64]) -> Result<(), TestCaseError> {
    let r = check_gradients(m, theta, x, 1e-5).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(r.max() < 1e-4, "{r:?} at θ={theta:?}");
    Ok(())
}

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conjugate_gradients(theta in -5.0f64..5.0, x in -5.0f64..5.0, y in -5.0f64..5.0) {
        assert_gradients(&ConjugateGaussian::new(y), &[theta], &[x])?;
    }

    #[test]
    fn linreg_gradients(theta in vec_in(2, -1.5, 1.5), x in vec_in(3, -2.0, 2.0)) {
        assert_gradients(&linreg_model(1), &theta, &x)?;
    }

    #[test]
    fn student_t_gradients(t in vec_in(2, -1.5, 1.5), log_nu in 0.2f64.ln() + 1e-3..5f64.ln() - 1e-3, x in vec_in(3, -2.0, 2.0)) {
        assert_gradients(&student_model(2), &[t[0], t[1], log_nu], &x)?;
    }

    #[test]
    fn polynomial_gradients(theta in vec_in(2, -1.0, 1.5), x in vec_in(4, -1.0, 1.0)) {
        assert_gradients(&poly_model(3), &theta, &x)?;
    }

    #[test]
    fn logistic_gradients(theta in -2.0f64..2.0, x in vec_in(2, -3.0, 3.0)) {
        assert_gradients(&blr_model(4), &[theta], &x)?;
    }

    #[test]
    fn bnn_gradients(theta in vec_in(2, -1.0, 1.0), seed in 0u64..1000) {
        let m = bnn_model(5);
        let x = standard_normal_vec(&mut substream(seed, tag::PROBE, 0, 0), m.dim_x());
        assert_gradients(&m, &theta, &x)?;
    }

    #[test]
    fn cloud_csv_round_trip_is_bit_exact(
        pos in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40),
        logw_seed in 0u64..1000,
    ) {
        let mut cloud = ParticleCloud::new(1, pos.clone()).unwrap();
        let mut rng = substream(logw_seed, tag::PROBE, 0, 0);
        cloud.log_weights = standard_normal_vec(&mut rng, pos.len()).iter().map(|v| v * 30.0).collect();
        cloud.evidence_segments = standard_normal_vec(&mut rng, 3);
        let mut buf = Vec::new();
        cloud.write_csv(&mut buf, &["c".into()]).unwrap();
        let back = ParticleCloud::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(
            back.positions().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cloud.positions().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(
            back.log_weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cloud.log_weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(
            back.evidence_segments.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cloud.evidence_segments.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn weights_are_shift_invariant(a in vec_in(1, -50.0, 50.0).prop_flat_map(|_| vec_in(20, -50.0, 50.0)), c in -1e3f64..1e3) {
        let w = normalized_weights(&a).unwrap();
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        let ws = normalized_weights(&shifted).unwrap();
        for (x, y) in w.iter().zip(&ws) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ess_is_bounded(a in proptest::collection::vec(-20.0f64..20.0, 1..60)) {
        let w = normalized_weights(&a).unwrap();
        let e = ess(&w);
        let n = w.len() as f64;
        prop_assert!(e >= 1.0 - 1e-9 && e <= n + 1e-9);
        let uniform = vec![1.0 / n; w.len()];
        prop_assert!((ess(&uniform) - n).abs() < 1e-9 * n);
        if a.iter().any(|v| *v != a[0]) {
            prop_assert!(e < n);
        }
    }

    #[test]
    fn gradient_estimate_ignores_weight_shift(c in -500.0f64..500.0, seed in 0u64..1000) {
        let m = ConjugateGaussian::new(2.0);
        let mut rng = substream(seed, tag::PROBE, 0, 0);
        let mut cloud = ParticleCloud::new(1, standard_normal_vec(&mut rng, 30)).unwrap();
        cloud.log_weights = standard_normal_vec(&mut rng, 30);
        let g = estimate_gradient(&cloud, &m, &[0.4]).unwrap();
        let e = ess(&cloud.weights().unwrap());
        cloud.log_weights.iter_mut().for_each(|a| *a += c);
        let gs = estimate_gradient(&cloud, &m, &[0.4]).unwrap();
        prop_assert!((g[0] - gs[0]).abs() < 1e-12);
        let es = ess(&cloud.weights().unwrap());
        prop_assert!((e - es).abs() < 1e-9);
        let theta: Vec<f64> = [0.4].iter().zip(&g).map(|(t, g)| t - 0.1 * g).collect();
        let theta_s: Vec<f64> = [0.4].iter().zip(&gs).map(|(t, g)| t - 0.1 * g).collect();
        prop_assert!((theta[0] - theta_s[0]).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_ignores_gradient_scale(g in vec_in(3, -5.0, 5.0), c in 0.1f64..10.0) {
        prop_assume!(g.iter().all(|v| v.abs() > 1e-3));
        let spec = OptimizerSpec::adam(0.01);
        let mut a = ThetaState::new(vec![0.0; 3], &spec);
        let mut b = ThetaState::new(vec![0.0; 3], &spec);
        a.step(&g, &spec);
        b.step(&g.iter().map(|v| v * c).collect::<Vec<_>>(), &spec);
        for (x, y) in a.theta.iter().zip(&b.theta) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn evidence_ignores_row_order(seed in 0u64..1000, log_s2 in -1.0f64..1.0, log_a in -1.0f64..1.0) {
        let d = gen_linreg_data(15, 3, 1.0, 1.0, ErrorKind::Gaussian, seed);
        let mut perm: Vec<usize> = (0..15).collect();
        let mut rng = substream(seed, tag::PROBE, 1, 0);
        for i in (1..15).rev() {
            let j = (uniform01(&mut rng) * (i + 1) as f64) as usize;
            perm.swap(i, j);
        }
        let xp = DMatrix::from_fn(15, 3, |i, j| d.x[(perm[i], j)]);
        let yp = DVector::from_fn(15, |i, _| d.y[perm[i]]);
        let a = gaussian_evidence(&d.x, &d.y, log_s2.exp(), log_a.exp()).unwrap();
        let b = gaussian_evidence(&xp, &yp, log_s2.exp(), log_a.exp()).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn standardization_inverts(seed in 0u64..1000, scale in 0.01f64..100.0, shift in -100.0f64..100.0) {
        let mut rng = substream(seed, tag::PROBE, 2, 0);
        let raw = DMatrix::from_vec(25, 4, standard_normal_vec(&mut rng, 100)).map(|v| v * scale + shift);
        let s = Standardization::fit(&raw);
        let z = s.apply(&raw);
        for j in 0..4 {
            let col = z.column(j);
            prop_assert!(col.mean().abs() < 1e-9);
        }
        let back = s.invert(&z);
        for (a, b) in raw.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() < 1e-10 * scale.max(shift.abs()).max(1.0));
        }
    }

    #[test]
    fn generators_are_deterministic(seed in 0u64..10_000) {
        let a = gen_linreg_data(10, 2, 1.0, 1.0, ErrorKind::StudentT { nu: 4.0 }, seed);
        let b = gen_linreg_data(10, 2, 1.0, 1.0, ErrorKind::StudentT { nu: 4.0 }, seed);
        prop_assert_eq!(a.x, b.x);
        prop_assert_eq!(a.y, b.y);
        let p = gen_poly_data(10, 3, 1.0, 7.5, seed);
        let q = gen_poly_data(10, 3, 1.0, 7.5, seed);
        prop_assert_eq!(p.x, q.x);
        prop_assert_eq!(p.y, q.y);
        prop_assert_eq!(two_moons(10, 0.1, seed).features, two_moons(10, 0.1, seed).features);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn systematic_counts_stay_within_one(a in proptest::collection::vec(-5.0f64..5.0, 1..30), u in 0.0f64..1.0) {
        let w = normalized_weights(&a).unwrap();
        let idx = systematic_resample(&w, u).unwrap();
        let n = w.len();
        prop_assert_eq!(idx.len(), n);
        let mut counts = vec![0usize; n];
        for i in idx {
            counts[i] += 1;
        }
        for (c, wi) in counts.iter().zip(&w) {
            let target = n as f64 * wi;
            prop_assert!((*c as f64) >= target.floor() - 1e-9 && (*c as f64) <= target.ceil() + 1e-9,
                "count {c} for N·w = {target}");
        }
    }
}

/// Mock classifier whose single latent coordinate is the probability of class 1.
struct Coin;

impl Classifier for Coin {
    fn n_classes(&self) -> usize {
        2
    }
    fn predict(&self, p: &[f64], features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), 2, |i, c| {
            let q = (p[0] + 0.1 * features[(i, 0)]).clamp(0.0, 1.0);
            if c == 1 {
                q
            } else {
                1.0 - q
            }
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lppd_ignores_order_and_duplication(
        probs in proptest::collection::vec(0.0f64..1.0, 1..12),
        raw_w in proptest::collection::vec(0.01f64..1.0, 12),
        rotate in 0usize..12,
    ) {
        let n = probs.len();
        let w: Vec<f64> = raw_w[..n].to_vec();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / total).collect();
        let feats = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, -1.0, 0.5]);
        let labels = [1, 0, 1, 1];
        let base = lppd(&Coin, &probs, 1, Some(&w), &feats, &labels);
        let r = rotate % n;
        let mut p2 = probs.clone();
        p2.rotate_left(r);
        let mut w2 = w.clone();
        w2.rotate_left(r);
        prop_assert!((base - lppd(&Coin, &p2, 1, Some(&w2), &feats, &labels)).abs() < 1e-12);
        let p3: Vec<f64> = probs.iter().chain(&probs).copied().collect();
        let w3: Vec<f64> = w.iter().chain(&w).map(|v| v / 2.0).collect();
        prop_assert!((base - lppd(&Coin, &p3, 1, Some(&w3), &feats, &labels)).abs() < 1e-12);
        let uniform = lppd(&Coin, &probs, 1, None, &feats, &labels);
        prop_assert!((uniform - lppd(&Coin, &p3, 1, None, &feats, &labels)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn jala_em_runs_are_bit_identical(seed in 0u64..u64::MAX, n in 1usize..40) {
        let m = ConjugateGaussian::new(1.5);
        let cfg = RunConfig::new(n, 30, 0.1, Opt::adam(0.05), vec![0.0]).with_seed(seed);
        let a = run_jala_em(&m, cfg.clone(), 0.0).unwrap();
        let b = run_jala_em(&m, cfg, 0.0).unwrap();
        prop_assert_eq!(a.theta_final[0].to_bits(), b.theta_final[0].to_bits());
        prop_assert_eq!(&a.trajectory, &b.trajectory);
        prop_assert_eq!(&a.cloud, &b.cloud);
    }

    #[test]
    fn evidence_without_resampling_is_z0_times_mean_weight(seed in 0u64..u64::MAX, log_z0 in -10.0f64..10.0) {
        let m = ConjugateGaussian::new(2.0);
        let cfg = RunConfig::new(25, 40, 0.2, Opt::sgd(0.1), vec![0.0]).with_ess_threshold(0.0).with_seed(seed);
        let fit = run_jala_em(&m, cfg, log_z0).unwrap();
        prop_assert!(fit.cloud.evidence_segments.is_empty());
        let expected = log_z0 + log_mean_exp(&fit.cloud.log_weights);
        prop_assert!((fit.log_evidence_final - expected).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver(seed in 0u64..u64::MAX) {
        let mut rng = substream(seed, tag::PROBE, 3, 0);
        let b = DMatrix::from_vec(9, 9, standard_normal_vec(&mut rng, 81));
        let a = &b * b.transpose() + DMatrix::identity(9, 9) * 0.1;
        let dense = SymmetricEigen::new(a.clone()).eigenvalues.max();
        let pi = power_iteration(&a, 100_000, 1e-14, &mut rng).unwrap();
        prop_assert!((pi.eigenvalue - dense).abs() < 1e-6 * dense, "{} vs {dense}", pi.eigenvalue);
    }
}

#[test]
fn power_iteration_hundred_random_psd_matrices() {
    for t in 0..100 {
        let mut rng = substream(t, tag::PROBE, 4, 0);
        let b = DMatrix::from_vec(9, 9, standard_normal_vec(&mut rng, 81));
        let a = &b * b.transpose();
        let dense = SymmetricEigen::new(a.clone()).eigenvalues.max();
        let pi = power_iteration(&a, 100_000, 1e-14, &mut rng).unwrap();
        assert!((pi.eigenvalue - dense).abs() < 1e-6 * dense, "trial {t}: {} vs {dense}", pi.eigenvalue);
    }
}

#[test]
fn oracle_converges_inside_the_envelope() {
    let m = ConjugateGaussian::new(2.0);
    let mut sq = 0.0;
    for s in 0..50 {
        let cfg = RunConfig::new(400, 500, 0.1, Opt::sgd(0.1), vec![0.0]).with_seed(s);
        let fit = run_jala_em(&m, cfg, 0.0).unwrap();
        sq += (fit.theta_final[0] - 2.0).powi(2) / 50.0;
    }
    assert!(sq < 0.01, "{sq}");
}

/// Runs the weighted sampler along a fixed θ schedule, optionally resampling,
/// and returns the estimate of `Z_K / Z_0`.
fn scheduled_evidence_ratio(seed: u64, resample: bool) -> f64 {
    let m = ConjugateGaussian::new(2.0);
    let schedule: Vec<f64> = (0..=40).map(|k| k as f64 * 0.025).collect();
    let n = 50;
    let mut rng = substream(seed, tag::INIT, 0, 0);
    let init = m.init_particles(&[schedule[0]], n, &mut rng).unwrap();
    let mut cloud = ParticleCloud::new(1, init).unwrap();
    let mut noise = substream(seed, tag::PARTICLE, 0, 0);
    for k in 0..schedule.len() - 1 {
        for i in 0..n {
            let x = cloud.particle(i).to_vec();
            let r = kernel_step(&m, &[schedule[k]], &[schedule[k + 1]], &x, cloud.log_weights[i], 0.2, &mut noise).unwrap();
            cloud.positions_mut()[i] = r.new_position[0];
            cloud.log_weights[i] = r.new_log_weight;
        }
        if resample && ess(&cloud.weights().unwrap()) < 0.5 * n as f64 {
            resample_cloud(&mut cloud, &mut substream(seed, tag::RESAMPLE, k as u64, 0)).unwrap();
        }
    }
    cloud.log_evidence(0.0).exp()
}

#[test]
fn resampling_leaves_the_evidence_unbiased() {
    let m = ConjugateGaussian::new(2.0);
    let exact = (m.log_marginal(1.0) - m.log_marginal(0.0)).exp();
    let trials = 400;
    for resample in [false, true] {
        let est: Vec<f64> = (0..trials).map(|s| scheduled_evidence_ratio(s, resample)).collect();
        let mean = est.iter().sum::<f64>() / trials as f64;
        let var = est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se + 1e-3, "resample={resample}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn all_algorithms_agree_on_the_oracle() {
    let m = ConjugateGaussian::new(2.0);
    let seeds = 50u64;
    let mean = |f: &dyn Fn(u64) -> f64| (0..seeds).map(f).sum::<f64>() / seeds as f64;
    let jala = mean(&|s| {
        let cfg = RunConfig::new(100, 300, 0.1, Opt::sgd(0.1), vec![0.0]).with_seed(s);
        run_jala_em(&m, cfg, 0.0).unwrap().theta_final[0]
    });
    let baselines = [
        BaselineConfig::pgd(0.1, 100, 300, vec![0.0]),
        BaselineConfig::ipla(0.1, 100, 300, vec![0.0]),
        BaselineConfig::sfla(0.05, 1e3, 0.1, 2000, vec![0.0]),
        BaselineConfig::soul(0.1, 0.1, 50, 300, vec![0.0]),
    ];
    for b in baselines {
        let est = mean(&|s| run_baseline(&m, &b.clone().with_seed(s)).unwrap().theta_final[0]);
        assert!((est - jala).abs() < 0.2, "{:?}: {est} vs JALA-EM {jala}", b.kind);
        assert!((est - 2.0).abs() < 0.2, "{:?}: {est}", b.kind);
    }
    assert!((jala - 2.0).abs() < 0.2);
}

#[test]
fn frozen_theta_evidence_matches_closed_form_for_linear_regression() {
    let d = gen_linreg_data(50, 2, 1.0, 1.0, ErrorKind::Gaussian, 11);
    let m = GaussianLinReg::new(d.x.clone(), d.y.clone()).unwrap();
    let theta = vec![0.0, 0.0];
    let exact = gaussian_evidence(&d.x, &d.y, 1.0, 1.0).unwrap();
    let h = 0.05 / m.max_curvature(&theta);
    let cfg = RunConfig::new(50, 250, h, Opt::sgd(0.0), theta.clone()).with_seed(2);
    let fit = JalaEm::new(&m, cfg, exact).run().unwrap();
    assert!((fit.log_evidence_final - exact).abs() < 0.1, "{} vs {exact}", fit.log_evidence_final);
}

#[test]
fn importance_sampling_error_shrinks_with_samples() {
    let m = student_model(21);
    let theta = [0.0, 0.0, 4f64.ln()];
    let spread = |samples: usize| {
        let est: Vec<f64> = (0..50)
            .map(|r| {
                is_evidence_student_t(&m, &theta, samples, &mut substream(r, tag::IMPORTANCE, samples as u64, 0))
                    .unwrap()
                    .log_z
            })
            .collect();
        let mean = est.iter().sum::<f64>() / 50.0;
        (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0).sqrt()
    };
    let (small, large) = (spread(500), spread(5000));
    assert!(large / small < 0.5, "{large} / {small}");
}
