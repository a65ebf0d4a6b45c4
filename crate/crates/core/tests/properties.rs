//! Property and cross-module invariant tests.

use approx::assert_abs_diff_eq;
use mamba_icl::analysis::{
    b_coeffs, cosine_similarity, fit_feature_model, hermite_bound, kernel_ridge_predict,
    predict_gamma_star_exact, predict_gamma_star_mc,
};
use mamba_icl::embedding::{embed_prompt, embedding_dim, phi, psi};
use mamba_icl::experiment::{read_results, results_to_string, ResultRow};
use mamba_icl::hermite::{
    gauss_hermite_inner, generative_exponent, he, information_exponent, mc_inner, Estimator,
    QUADRATURE_ZERO_TOL,
};
use mamba_icl::predictor::{mlp_forward, predict, test_error, EvalSpec, LinkOracle};
use mamba_icl::pretrain::{
    relu_features, ridge_solve, stage1_gradient, stage1_loss, stage2_fit, ReadoutBatch,
};
use mamba_icl::sampler::TaskSampler;
use mamba_icl::ssm::{
    closed_form_outputs, gating_weights, mamba_scalar, recurrence_forward, GeneralMambaParams,
};
use mamba_icl::{
    EmbeddedPrompt, ExperimentConfig, FeatureMap, FeatureSpace, GatingConstants, Lambda2,
    LinkFunction, MambaParams, Metric, MlpParams, RngStream,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_embedded(seed: u64, d: usize, n: usize) -> EmbeddedPrompt {
    let space = FeatureSpace::leading(d, d.min(2)).unwrap();
    let g = LinkFunction::hermite_mode(3).unwrap();
    let sampler = TaskSampler::new(&space, &g, 0.1);
    let task = RngStream::new(seed).child(0);
    let beta = sampler.beta(&task);
    embed_prompt(&sampler.prompt(&task, &beta, 0, n), FeatureMap::Quadratic)
}

fn random_general(seed: u64, rows: usize, dh: usize) -> GeneralMambaParams {
    let mut rng = RngStream::new(seed).child(99).rng();
    let scale = 1.0 / (rows as f64).sqrt();
    let mut mat = |r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    };
    let w_b = mat(dh, rows);
    let w_c = mat(dh, rows);
    let w = mat(rows, 1).as_slice().to_vec();
    GeneralMambaParams {
        w_b,
        w_c,
        w,
        b: -2.0,
    }
}

// ---------------------------------------------------------------- hermite

fn explicit_he(k: usize, z: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => z,
        2 => z * z - 1.0,
        3 => z.powi(3) - 3.0 * z,
        4 => z.powi(4) - 6.0 * z * z + 3.0,
        _ => unreachable!(),
    }
}

proptest! {
    #[test]
    fn hermite_recurrence_matches_explicit_formulas(z in -6.0f64..6.0) {
        for k in 0..=4 {
            let want = explicit_he(k, z);
            prop_assert!((he(k, z).unwrap() - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn mc_inner_agrees_with_quadrature() {
    let h = |z: f64| z.powi(3) - 0.5 * z * z + 0.3;
    let mut inside = 0;
    for k in 0..=3 {
        let exact = gauss_hermite_inner(h, k, 10).unwrap();
        for trial in 0..25u64 {
            let est = mc_inner(h, k, 4000, &RngStream::new(trial).child(k as u64)).unwrap();
            if (est.estimate - exact).abs() < 4.0 * est.std_error {
                inside += 1;
            }
        }
    }
    assert!(inside >= 95, "{inside}/100 trials within 4 standard errors");
}

#[test]
fn generative_exponent_never_exceeds_information_exponent() {
    for spec in [
        "he1",
        "he2",
        "he3",
        "he4",
        "he5",
        "he6",
        "coeffs:0,0,1,0,1",
        "coeffs:0,0,0,1,1",
        "coeffs:0,1,0,1",
    ] {
        let g = LinkFunction::parse(spec).unwrap();
        let ie = information_exponent(&g, QUADRATURE_ZERO_TOL).unwrap();
        assert!(
            generative_exponent(&g, QUADRATURE_ZERO_TOL) as usize <= ie,
            "{spec}"
        );
    }
}

proptest! {
    #[test]
    fn b_coeffs_obey_cauchy_schwarz(a0 in -1.0f64..1.0, a1 in -1.0f64..1.0, a2 in -1.0f64..1.0, k in 1usize..5) {
        let g = LinkFunction::hermite_mode(k).unwrap();
        let b = b_coeffs(&g, [a0, a1, a2], 0.3, 4, &Estimator::Quadrature { nodes: 200 }).unwrap();
        for p in 0..=4 {
            prop_assert!(b.coeffs[p].abs() <= hermite_bound(&g, p) + 1e-9);
        }
    }
}

// ---------------------------------------------------------------- sampler

#[test]
fn prompts_share_beta_within_task_and_differ_across_tasks() {
    let space = FeatureSpace::leading(6, 3).unwrap();
    let g = LinkFunction::hermite_mode(3).unwrap();
    let sampler = TaskSampler::new(&space, &g, 0.1);
    let root = RngStream::new(4);
    let a = sampler.prompts(&root.child(0), 5, 4).unwrap();
    let b = sampler.prompts(&root.child(1), 5, 4).unwrap();
    assert!(a.iter().all(|p| p.beta == a[0].beta));
    assert!(b.iter().all(|p| p.beta == b[0].beta));
    assert_ne!(a[0].beta, b[0].beta);
    assert_ne!(a[0].xs, a[1].xs);
}

fn pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn datasets_do_not_depend_on_worker_count() {
    let space = FeatureSpace::leading(5, 2).unwrap();
    let g = LinkFunction::hermite_mode(3).unwrap();
    let gc = GatingConstants::default();
    let make = || {
        ReadoutBatch::sample(
            &space,
            &g,
            gc,
            FeatureMap::Quadratic,
            30,
            40,
            &RngStream::new(8),
        )
    };
    let one = pool(1, make);
    let four = pool(4, make);
    assert_eq!(one, four);
}

// ---------------------------------------------------------------- embedding

#[test]
fn features_are_orthonormal_under_gaussian_inputs() {
    let d = 3;
    let dim = embedding_dim(d);
    let mut rng = RngStream::new(21).rng();
    let samples = 200_000;
    let mut second = vec![0.0; dim * dim];
    for _ in 0..samples {
        let f = phi(&normals(&mut rng, d));
        for i in 0..dim {
            for j in 0..dim {
                second[i * dim + j] += f[i] * f[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..dim {
            let want = if i == j { 1.0 } else { 0.0 };
            let got = second[i * dim + j] / samples as f64;
            assert!((got - want).abs() < 0.03, "E[phi_{i} phi_{j}] = {got}");
        }
    }
}

proptest! {
    #[test]
    fn phi_minus_psi_is_a_constant_shift_on_squares(x in prop::collection::vec(-3.0f64..3.0, 1..6)) {
        let d = x.len();
        let diff: Vec<f64> = phi(&x).iter().zip(psi(&x, 1.0, 1.0, 1.0)).map(|(a, b)| a - b).collect();
        for (k, v) in diff.iter().enumerate() {
            let want = if (d + 1..=2 * d).contains(&k) { -std::f64::consts::FRAC_1_SQRT_2 } else { 0.0 };
            prop_assert!((v - want).abs() < 1e-12);
        }
    }
}

// ---------------------------------------------------------------- ssm

#[test]
fn recurrence_matches_closed_form_on_grid() {
    let mut instances = 0;
    let mut worst = 0.0f64;
    for d in [2, 4] {
        for n in [1, 4, 16] {
            for dh in [2, 6] {
                for rep in 0..5u64 {
                    let seed = 1000 * d as u64 + 10 * n as u64 + dh as u64 + 7919 * rep;
                    let z = random_embedded(seed, d, n);
                    let p = random_general(seed, z.d_tilde() + 1, dh);
                    let a = recurrence_forward(&z, &p).unwrap();
                    let b = closed_form_outputs(&z, &p).unwrap();
                    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                        worst = worst.max((x - y).abs());
                    }
                    instances += 1;
                }
            }
        }
    }
    assert!(instances >= 50);
    assert!(worst < 1e-10, "{worst}");
}

proptest! {
    #[test]
    fn gating_partition_of_unity(seed in any::<u64>(), n in 1usize..40, rho in 0.2f64..4.0, b in -10.0f64..3.0) {
        let z = random_embedded(seed, 3, n);
        let gw = gating_weights(&z, GatingConstants { rho, b, tau: 0.1 });
        prop_assert!(gw.partition_defect() <= 1e-12);
    }

    #[test]
    fn outputs_are_causal(seed in any::<u64>(), n in 2usize..12, cut in 0usize..11) {
        let cut = cut % n;
        let z = random_embedded(seed, 3, n);
        let p = random_general(seed ^ 0xABCD, z.d_tilde() + 1, 3);
        let before = recurrence_forward(&z, &p).unwrap();
        let mut cols: Vec<Vec<f64>> = z.columns().map(|c| c.to_vec()).collect();
        for c in cols.iter_mut().skip(cut + 1) {
            c.iter_mut().for_each(|v| *v = 3.0 * *v + 1.0);
        }
        let after = recurrence_forward(&EmbeddedPrompt::from_columns(&cols), &p).unwrap();
        for l in 0..=cut {
            prop_assert_eq!(&before[l], &after[l]);
        }
    }

    #[test]
    fn scalar_is_linear_in_gamma(seed in any::<u64>(), n in 1usize..20, s in -3.0f64..3.0, t in -3.0f64..3.0) {
        let z = random_embedded(seed, 3, n);
        let mut rng = RngStream::new(seed).child(5).rng();
        let g1 = normals(&mut rng, z.d_tilde());
        let g2 = normals(&mut rng, z.d_tilde());
        let gc = GatingConstants::default();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| s * a + t * b).collect();
        let f = |g: &[f64]| mamba_scalar(&z, &MambaParams::new(g.to_vec(), gc).unwrap());
        let lhs = f(&mix);
        let rhs = s * f(&g1) + t * f(&g2);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }
}

// ---------------------------------------------------------------- predictor

#[test]
fn predictor_is_continuous_across_head_kinks() {
    let hp = MlpParams::new(
        vec![0.5, -1.2, 0.8],
        vec![1.0, -1.0, 1.0],
        vec![0.2, 0.4, -0.7],
    )
    .unwrap();
    for kink in [-0.2, 0.4, 0.7] {
        for eps in [1e-6, 1e-9] {
            assert!(
                (mlp_forward(kink - eps, &hp) - mlp_forward(kink + eps, &hp)).abs() < 10.0 * eps
            );
        }
    }
    let z = random_embedded(3, 3, 5);
    let mp = MambaParams::new(vec![0.3; z.d_tilde()], GatingConstants::default()).unwrap();
    let s = mamba_scalar(&z, &mp) / 5.0;
    assert_abs_diff_eq!(predict(&z, &mp, &hp), mlp_forward(s, &hp), epsilon = 1e-15);
}

#[test]
fn test_error_does_not_depend_on_scheduling() {
    let space = FeatureSpace::leading(4, 2).unwrap();
    let g = LinkFunction::hermite_mode(3).unwrap();
    let spec = EvalSpec {
        space: &space,
        g: &g,
        tau: 0.3,
        n: 4,
        tasks: 16,
        prompts_per_task: 8,
        metric: Metric::Sq,
    };
    let oracle = LinkOracle(g.clone());
    let one = pool(1, || {
        test_error(&oracle, &spec, &RngStream::new(2)).unwrap()
    });
    let four = pool(4, || {
        test_error(&oracle, &spec, &RngStream::new(2)).unwrap()
    });
    assert_eq!(one, four);
    let reversed: f64 = one.per_task.iter().rev().sum::<f64>() / one.per_task.len() as f64;
    assert_abs_diff_eq!(reversed, one.mean, epsilon = 1e-15);
    // squared residual is exactly tau^2
    assert_abs_diff_eq!(one.mean, 0.09, epsilon = 1e-12);
}

// ---------------------------------------------------------------- pretrain

fn random_batch(seed: u64, t: usize, dim: usize) -> ReadoutBatch {
    let mut rng = RngStream::new(seed).rng();
    let readouts = (0..t).map(|_| normals(&mut rng, dim)).collect();
    let labels = normals(&mut rng, t);
    ReadoutBatch { readouts, labels }
}

#[test]
fn stage1_gradient_matches_finite_differences() {
    let hp = MlpParams::new(
        vec![0.6, -0.3, 0.9, 0.2],
        vec![1.0, -1.0, 1.0, -1.0],
        vec![0.1, 0.5, -0.4, 0.0],
    )
    .unwrap();
    let h = 1e-6;
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 60 {
        seed += 1;
        let batch = random_batch(seed, 6, 4);
        let mut rng = RngStream::new(seed).child(1).rng();
        let gamma = normals(&mut rng, 4);
        // stay away from kinks: every pre-activation at least 1e-3 from zero
        let s = batch.scalars(&gamma);
        let near = s.iter().any(|s| {
            hp.v.iter()
                .zip(&hp.a)
                .any(|(v, a)| (v * s + a).abs() < 1e-3)
        });
        if near {
            continue;
        }
        let grad = stage1_gradient(&batch, &gamma, &hp).gradient;
        for k in 0..4 {
            let (mut lo, mut hi) = (gamma.clone(), gamma.clone());
            lo[k] -= h;
            hi[k] += h;
            let fd = (stage1_loss(&batch, &hi, &hp) - stage1_loss(&batch, &lo, &hp)) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / grad[k].abs().max(1e-2);
            assert!(
                rel < 1e-5,
                "seed {seed} coord {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ridge_is_optimal_and_norms_shrink(seed in any::<u64>(), t in 20usize..120, m in 2usize..24) {
        let mut rng = RngStream::new(seed).rng();
        let s = normals(&mut rng, t);
        let y: Vec<f64> = s.iter().map(|x| x.powi(3) - 3.0 * x + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let v: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let fit = stage2_fit(&s, &y, v, a, &Lambda2::Grid(vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0])).unwrap();
        prop_assert!(fit.kkt_residual < 1e-8);
        for w in fit.path.windows(2) {
            prop_assert!(w[1].u_norm <= w[0].u_norm * (1.0 + 1e-10));
        }
    }

    #[test]
    fn wider_heads_never_raise_the_ridge_objective(seed in any::<u64>(), m in 2usize..16) {
        let mut rng = RngStream::new(seed).rng();
        let s = normals(&mut rng, 80);
        let y: Vec<f64> = s.iter().map(|x| x * x - 1.0).collect();
        let v: Vec<f64> = (0..2 * m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let a: Vec<f64> = (0..2 * m).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let lam = 1e-2;
        let objective = |k: usize| {
            let phi = relu_features(&s, &v[..k], &a[..k]);
            let sol = ridge_solve(&phi, &y, lam).unwrap();
            sol.train_loss + 0.5 * lam * sol.u.iter().map(|u| u * u).sum::<f64>()
        };
        prop_assert!(objective(2 * m) <= objective(m) + 1e-12);
    }
}

// ---------------------------------------------------------------- analysis

proptest! {
    #[test]
    fn feature_fit_recovers_exact_models(p1 in -2.0f64..2.0, p2 in -2.0f64..2.0, ge in 1u8..3, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed).rng();
        let t: Vec<f64> = (0..50).map(|_| rng.sample::<f64, _>(StandardNormal).powi(ge as i32)).collect();
        let s: Vec<f64> = t.iter().map(|t| p1 + p2 * t).collect();
        let fit = fit_feature_model(&s, &t, ge).unwrap();
        prop_assert!((fit.p1 - p1).abs() < 1e-8 && (fit.p2 - p2).abs() < 1e-8);
        prop_assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_ridge_is_continuous_in_the_query(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = RngStream::new(seed).rng();
        let xs: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, 3)).collect();
        let ys = normals(&mut rng, n);
        let q = normals(&mut rng, 3);
        let base = kernel_ridge_predict(&xs, &ys, &q, None, 1.0, 1.0).unwrap();
        for eps in [1e-4, 1e-7] {
            let mut qq = q.clone();
            qq[0] += eps;
            let moved = kernel_ridge_predict(&xs, &ys, &qq, None, 1.0, 1.0).unwrap();
            prop_assert!((moved - base).abs() < 10.0 * eps * (1.0 + ys.iter().map(|y| y.abs()).sum::<f64>()));
        }
    }

    #[test]
    fn gamma_prediction_is_linear_in_eta(eta in 0.01f64..10.0, a0 in -1.0f64..1.0, b0 in -1.0f64..1.0) {
        let space = FeatureSpace::leading(5, 3).unwrap();
        let (a, b) = ([a0, 0.4, -0.2], [b0, 0.3, 0.6]);
        let unit = predict_gamma_star_exact(a, b, &space, FeatureMap::Quadratic, 1.0);
        let scaled = predict_gamma_star_exact(a, b, &space, FeatureMap::Quadratic, eta);
        for (u, s) in unit.iter().zip(&scaled) {
            prop_assert!((s - eta * u).abs() <= 1e-14 * (1.0 + s.abs()));
        }
        prop_assert!((scaled[0] - 2.0 * eta * a0 * b0).abs() <= 1e-15 * (1.0 + scaled[0].abs()));
    }
}

#[test]
fn kernel_ridge_two_point_hand_solve() {
    // k(x1,x2) = exp(-1/2), (K + I) alpha = y solved by hand
    let xs = vec![vec![0.0], vec![1.0]];
    let ys = [1.0, -2.0];
    let k = (-0.5f64).exp();
    let det = 4.0 - k * k;
    let alpha = [
        (2.0 * ys[0] - k * ys[1]) / det,
        (2.0 * ys[1] - k * ys[0]) / det,
    ];
    let q = [0.3];
    let want = alpha[0] * (-0.045f64).exp() + alpha[1] * (-0.245f64).exp();
    let got = kernel_ridge_predict(&xs, &ys, &q, None, 1.0, 1.0).unwrap();
    assert_abs_diff_eq!(got, want, epsilon = 1e-10);
}

#[test]
fn sampled_gamma_prediction_converges_to_the_exact_one() {
    let space = FeatureSpace::new(5, vec![0, 2, 4]).unwrap();
    let (a, b) = ([0.2, 0.5, -0.3], [-0.1, 0.7, 0.4]);
    let exact = predict_gamma_star_exact(a, b, &space, FeatureMap::Quadratic, 1.5);
    let mc = predict_gamma_star_mc(a, b, &space, 1.5, 200_000, &RngStream::new(6)).unwrap();
    // the constant slot does not depend on beta at all
    assert_abs_diff_eq!(mc[0], exact[0], epsilon = 1e-12);
    assert!(cosine_similarity(&mc, &exact) > 0.999);
    let worst = mc
        .iter()
        .zip(&exact)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < 5e-3, "{worst}");
}

// ---------------------------------------------------------------- experiment artifacts

fn row_strategy() -> impl Strategy<Value = ResultRow> {
    (
        prop::sample::select(vec!["mamba_mlp", "krr_full", "krr_intrinsic", "zero"]),
        1usize..100,
        1usize..64,
        1usize..64,
        0u64..1000,
        0.0f64..10.0,
        0.0f64..1.0,
        prop::sample::select(vec!["abs", "sq"]),
    )
        .prop_map(|(m, n, d, r, seed, mean, se, metric)| ResultRow {
            model: m.into(),
            n_context: n,
            d,
            r,
            seed,
            mean_err: mean,
            std_err: se,
            metric: metric.into(),
        })
}

proptest! {
    #[test]
    fn result_csv_round_trips(rows in prop::collection::vec(row_strategy(), 0..20)) {
        let text = results_to_string(&rows).unwrap();
        prop_assert!(text.starts_with("model,n_context,d,r,seed,mean_err,std_err,metric\n"));
        prop_assert_eq!(read_results(&text).unwrap(), rows);
    }

    #[test]
    fn config_echo_round_trips(
        d in 2usize..30,
        r_frac in 0.0f64..1.0,
        tau in 0.0f64..1.0,
        rho in 0.1f64..5.0,
        b in -10.0f64..2.0,
        seed in 0u64..(i64::MAX as u64),
        grid in prop::collection::vec(1usize..100, 1..10),
    ) {
        let mut cfg = ExperimentConfig::default();
        let r = 1 + ((d - 1) as f64 * r_frac) as usize;
        cfg.space = FeatureSpace::leading(d, r).unwrap();
        cfg.train.gc = GatingConstants { rho, b, tau };
        cfg.set_seed(seed).unwrap();
        cfg.eval.n_grid = grid;
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
