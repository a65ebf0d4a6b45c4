//! Fast built-in invariant checks, run by the `selftest` command.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::EmbeddedPrompt;
use crate::hermite::{
    factorial, gauss_hermite_inner, generative_exponent, he, information_exponent, GatingConstants,
    LinkFunction, QUADRATURE_ZERO_TOL,
};
use crate::predictor::MlpParams;
use crate::pretrain::{
    relu_features, ridge_solve, sample_inner_layer, stage1_gradient, stage1_loss, ReadoutBatch,
};
use crate::rng::RngStream;
use crate::ssm::{closed_form_outputs, gating_weights, recurrence_forward, GeneralMambaParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> SelfCheck {
    SelfCheck {
        name,
        passed: worst < tol,
        detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
    }
}

fn random_prompt<R: Rng>(rng: &mut R, rows: usize, tokens: usize) -> EmbeddedPrompt {
    let cols: Vec<Vec<f64>> = (0..tokens)
        .map(|_| {
            (0..rows)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    EmbeddedPrompt::from_columns(&cols)
}

fn recurrence_matches_closed_form() -> SelfCheck {
    let mut rng = RngStream::new(0xC0FFEE).rng();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let rows = rng.random_range(2..8);
        let tokens = rng.random_range(1..12);
        let dh = rng.random_range(1..6);
        let z = random_prompt(&mut rng, rows, tokens);
        let mut normal = |r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = GeneralMambaParams {
            w_b: normal(dh, rows),
            w_c: normal(dh, rows),
            w: normal(rows, 1).as_slice().to_vec(),
            b: -1.0,
        };
        let (Ok(a), Ok(b)) = (recurrence_forward(&z, &p), closed_form_outputs(&z, &p)) else {
            return SelfCheck {
                name: "recurrence = closed form",
                passed: false,
                detail: "evaluation failed".into(),
            };
        };
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    check("recurrence = closed form", worst, 1e-10)
}

fn gating_partition() -> SelfCheck {
    let mut rng = RngStream::new(7).rng();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let tokens = rng.random_range(1..30);
        let z = random_prompt(&mut rng, 3, tokens);
        let gc = GatingConstants {
            rho: rng.random_range(0.5..3.0),
            b: rng.random_range(-6.0..2.0),
            tau: 0.1,
        };
        worst = worst.max(gating_weights(&z, gc).partition_defect());
    }
    check("gating partition of unity", worst, 1e-12)
}

fn hermite_orthogonality() -> SelfCheck {
    let mut worst = 0.0f64;
    for i in 0..=8 {
        for j in 0..=8 {
            let Ok(v) = gauss_hermite_inner(|z| he(j, z).unwrap_or(f64::NAN), i, 12) else {
                return SelfCheck {
                    name: "Hermite orthogonality",
                    passed: false,
                    detail: "quadrature failed".into(),
                };
            };
            let want = if i == j { factorial(i) } else { 0.0 };
            worst = worst.max((v - want).abs());
        }
    }
    check("Hermite orthogonality", worst, 1e-8)
}

fn exponent_classifiers() -> SelfCheck {
    let cases: [(&str, usize, u8); 5] = [
        ("he1", 1, 1),
        ("he2", 2, 2),
        ("he3", 3, 1),
        ("he4", 4, 2),
        ("coeffs:0,0,1,1", 2, 1),
    ];
    let mut bad = Vec::new();
    for (spec, ie, ge) in cases {
        let Ok(g) = LinkFunction::parse(spec) else {
            bad.push(spec);
            continue;
        };
        let got_ie = information_exponent(&g, QUADRATURE_ZERO_TOL).ok();
        if got_ie != Some(ie) || generative_exponent(&g, QUADRATURE_ZERO_TOL) != ge {
            bad.push(spec);
        }
    }
    SelfCheck {
        name: "exponent classifiers",
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "5/5 links".into()
        } else {
            format!("wrong on {}", bad.join(", "))
        },
    }
}

fn stage1_gradient_finite_differences() -> SelfCheck {
    let mut rng = RngStream::new(11).rng();
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..10 {
        let dim = rng.random_range(2..6);
        let readouts: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let labels: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let batch = ReadoutBatch { readouts, labels };
        let gamma: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let hp = MlpParams {
            u: vec![0.7, -0.4, 0.2],
            v: vec![1.0, -1.0, 1.0],
            a: vec![0.3, 0.1, -0.2],
        };
        let grad = stage1_gradient(&batch, &gamma, &hp).gradient;
        for k in 0..dim {
            let (mut lo, mut hi) = (gamma.clone(), gamma.clone());
            lo[k] -= h;
            hi[k] += h;
            let fd = (stage1_loss(&batch, &hi, &hp) - stage1_loss(&batch, &lo, &hp)) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / grad[k].abs().max(1e-3));
        }
    }
    check("stage I gradient vs finite differences", worst, 1e-5)
}

fn ridge_kkt() -> SelfCheck {
    let mut rng = RngStream::new(5).rng();
    let s: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = s.iter().map(|x| x * x - 1.0).collect();
    let (v, a) = sample_inner_layer(32, &RngStream::new(5).child(1));
    let phi = relu_features(&s, &v, &a);
    let mut worst = 0.0f64;
    for lam in [1e-4, 1e-2, 1.0] {
        match ridge_solve(&phi, &y, lam) {
            Ok(sol) => worst = worst.max(sol.kkt_residual),
            Err(_) => worst = f64::INFINITY,
        }
    }
    check("ridge KKT residual", worst, 1e-8)
}

fn stream_determinism() -> SelfCheck {
    let draw = || {
        let mut r = RngStream::new(3).child(9).rng();
        (0..8).map(|_| r.random::<u64>()).collect::<Vec<_>>()
    };
    SelfCheck {
        name: "random stream determinism",
        passed: draw() == draw(),
        detail: "same identity, same draws".into(),
    }
}

/// Run every check; none panics.
pub fn run_selftest() -> Vec<SelfCheck> {
    vec![
        recurrence_matches_closed_form(),
        gating_partition(),
        hermite_orthogonality(),
        exponent_classifiers(),
        stage1_gradient_finite_differences(),
        ridge_kkt(),
        stream_determinism(),
    ]
}
