//! Mechanism diagnostics: test-time feature fit, `gamma*` alignment with
//! the intrinsic coordinates, the analytic `gamma*` oracle, exponent
//! reduction by gating, and the kernel ridge baseline.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::embedding::{embed_prompt, psi, slot_layout, FeatureMap, Slot};
use crate::error::{Error, Result};
use crate::hermite::{
    a_coeffs, factorial, gated_link, generative_exponent, information_exponent, Estimator,
    GatingConstants, HermiteExpansion, LinkFunction, McEstimate, MC_SIGNIFICANCE,
    QUADRATURE_ZERO_TOL,
};
use crate::predictor::Predictor;
use crate::rng::RngStream;
use crate::sampler::{dot, sample_feature, FeatureSpace, Prompt};
use crate::ssm::{mamba_scalar, MambaParams};

/// Least-squares fit of `s = P1 + P2 t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFitReport {
    pub ge_used: u8,
    pub p1: f64,
    pub p2: f64,
    pub r_squared: f64,
    pub residual_rms: f64,
    /// In-sample R^2 of the constant-only fit, which is zero by construction.
    pub baseline_r_squared: f64,
    pub samples: usize,
}

impl FeatureFitReport {
    pub fn margin(&self) -> f64 {
        self.r_squared - self.baseline_r_squared
    }
}

/// Fit `s_t` against `{1, t_t}` by ordinary least squares.
pub fn fit_feature_model(s: &[f64], t: &[f64], ge_used: u8) -> Result<FeatureFitReport> {
    if s.len() != t.len() || s.len() < 2 {
        return Err(Error::invalid(
            "feature fit needs at least two paired samples",
        ));
    }
    let n = s.len() as f64;
    let (ms, mt) = (s.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
    let stt: f64 = t.iter().map(|x| (x - mt).powi(2)).sum();
    let sst: f64 = s.iter().map(|x| (x - ms).powi(2)).sum();
    let sts: f64 = t.iter().zip(s).map(|(a, b)| (a - mt) * (b - ms)).sum();
    if !(stt > 1e-300 * n) {
        return Err(Error::numerical(
            "feature fit design is singular: the regressor is constant",
        ));
    }
    let p2 = sts / stt;
    let p1 = ms - p2 * mt;
    let ssr: f64 = s
        .iter()
        .zip(t)
        .map(|(s, t)| (s - p1 - p2 * t).powi(2))
        .sum();
    let r_squared = if sst > 0.0 {
        (1.0 - ssr / sst).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(FeatureFitReport {
        ge_used,
        p1,
        p2,
        r_squared,
        residual_rms: (ssr / n).sqrt(),
        baseline_r_squared: 0.0,
        samples: s.len(),
    })
}

/// Fit `mamba_scalar / N` against `(<beta, query> / r)^ge` over prompts that
/// carry their `beta`.
pub fn feature_learning_fit(
    mp: &MambaParams,
    map: FeatureMap,
    prompts: &[Prompt],
    r: usize,
    ge: u8,
) -> Result<FeatureFitReport> {
    if !(ge == 1 || ge == 2) {
        return Err(Error::invalid(format!(
            "feature fit exponent must be 1 or 2, got {ge}"
        )));
    }
    if prompts.iter().any(|p| p.n() == 0) {
        return Err(Error::invalid(
            "feature fit needs prompts with at least one context example",
        ));
    }
    let (s, t): (Vec<f64>, Vec<f64>) = prompts
        .par_iter()
        .map(|p| {
            let s = mamba_scalar(&embed_prompt(p, map), mp) / p.n() as f64;
            (s, (p.query_projection() / r as f64).powi(ge as i32))
        })
        .unzip();
    fit_feature_model(&s, &t, ge)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub mass_on_feature_slots: f64,
    pub uniform_share: f64,
    pub ratio: f64,
}

/// Share of `|gamma|` on slots whose coordinates all lie in the index set,
/// compared with the share such slots would get under a flat `gamma`. The
/// constant slot is excluded from both counts.
pub fn gamma_alignment(
    gamma: &[f64],
    map: FeatureMap,
    space: &FeatureSpace,
) -> Result<AlignmentReport> {
    let slots: Vec<Slot> = match map {
        FeatureMap::Quadratic => slot_layout(space.d()),
        FeatureMap::Identity => (0..space.d()).map(Slot::Linear).collect(),
    };
    if slots.len() != gamma.len() {
        return Err(Error::invalid(format!(
            "gamma has {} entries, the embedding has {}",
            gamma.len(),
            slots.len()
        )));
    }
    let (mut on, mut total, mut count_on, mut count) = (0.0, 0.0, 0usize, 0usize);
    for (slot, g) in slots.iter().zip(gamma) {
        if *slot == Slot::Constant {
            continue;
        }
        count += 1;
        total += g.abs();
        if slot.touches_only(|i| space.contains(i)) {
            count_on += 1;
            on += g.abs();
        }
    }
    let mass = if total > 0.0 { on / total } else { 0.0 };
    let uniform_share = count_on as f64 / count as f64;
    Ok(AlignmentReport {
        mass_on_feature_slots: mass,
        uniform_share,
        ratio: mass / uniform_share,
    })
}

/// `g(z) 1[c0 + c1 z + c2 He_2(z) > 0]`.
pub fn indicator_link(g: &LinkFunction, c: [f64; 3]) -> impl Fn(f64) -> f64 + Sync + '_ {
    move |z| {
        if c[0] + c[1] * z + c[2] * (z * z - 1.0) > 0.0 {
            g.eval(z)
        } else {
            0.0
        }
    }
}

/// Hermite coefficients of `B(z) = g(z) 1[a0 s^2 + a1 z + a2 s He_2(z) > 0]`
/// with `s` the initial quadratic-slot scale.
pub fn b_coeffs(
    g: &LinkFunction,
    a: [f64; 3],
    gamma0_scale: f64,
    p_max: usize,
    est: &Estimator,
) -> Result<HermiteExpansion> {
    b_coeffs_weighted(g, a, gamma0_scale, 1.0, p_max, est)
}

/// As [`b_coeffs`] with the `He_2` term of the indicator scaled by
/// `he2_weight`. A weight of 1/2 is what `<psi(beta, a), gamma0 * phi(x)>`
/// evaluates to for a unit `beta`.
pub fn b_coeffs_weighted(
    g: &LinkFunction,
    a: [f64; 3],
    gamma0_scale: f64,
    he2_weight: f64,
    p_max: usize,
    est: &Estimator,
) -> Result<HermiteExpansion> {
    let s = gamma0_scale;
    est.expansion(
        indicator_link(g, [a[0] * s * s, a[1], he2_weight * a[2] * s]),
        p_max,
    )
}

/// `2 eta E_beta[psi(beta, a) * psi(beta, b)]` from sphere moments:
/// `E[beta_i^2] = 1/r`, `E[beta_i^4] = 3/(r(r+2))`, `E[beta_i^2 beta_j^2] = 1/(r(r+2))`.
pub fn predict_gamma_star_exact(
    a: [f64; 3],
    b: [f64; 3],
    space: &FeatureSpace,
    map: FeatureMap,
    eta: f64,
) -> Vec<f64> {
    let r = space.r() as f64;
    let quad = 1.0 / (r * (r + 2.0));
    let scale = 2.0 * eta;
    let linear = |i: usize| {
        if space.contains(i) {
            scale * a[1] * b[1] / r
        } else {
            0.0
        }
    };
    match map {
        FeatureMap::Identity => (0..space.d()).map(linear).collect(),
        FeatureMap::Quadratic => slot_layout(space.d())
            .into_iter()
            .map(|s| match s {
                Slot::Constant => scale * a[0] * b[0],
                Slot::Linear(i) => linear(i),
                Slot::Square(i) if space.contains(i) => scale * a[2] * b[2] * 1.5 * quad,
                Slot::Cross(i, j) if space.contains(i) && space.contains(j) => {
                    scale * a[2] * b[2] * quad
                }
                _ => 0.0,
            })
            .collect(),
    }
}

/// Monte-Carlo version of [`predict_gamma_star_exact`]; sample `k` draws
/// `beta` from `stream.child(k)`.
pub fn predict_gamma_star_mc(
    a: [f64; 3],
    b: [f64; 3],
    space: &FeatureSpace,
    eta: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    const BLOCK: usize = 4096;
    if samples == 0 {
        return Err(Error::invalid("need at least one beta sample"));
    }
    let dim = crate::embedding::embedding_dim(space.d());
    // per-block partial sums, combined in block order
    let blocks: Vec<Vec<f64>> = (0..samples.div_ceil(BLOCK))
        .into_par_iter()
        .map(|blk| {
            let mut acc = vec![0.0; dim];
            for k in blk * BLOCK..((blk + 1) * BLOCK).min(samples) {
                let beta = sample_feature(space, &mut stream.child(k as u64).rng());
                let pa = psi(&beta, a[0], a[1], a[2]);
                let pb = psi(&beta, b[0], b[1], b[2]);
                acc.iter_mut()
                    .zip(pa.iter().zip(&pb))
                    .for_each(|(o, (x, y))| *o += x * y);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; dim];
    for blk in &blocks {
        out.iter_mut().zip(blk).for_each(|(o, v)| *o += v);
    }
    let scale = 2.0 * eta / samples as f64;
    out.iter_mut().for_each(|o| *o *= scale);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaStarOracle {
    pub a: HermiteExpansion,
    pub b: HermiteExpansion,
    pub prediction: Vec<f64>,
}

/// Knobs of the analytic `gamma*` prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub gamma0_scale: f64,
    /// Weight on the `He_2` term of the indicator argument.
    pub he2_weight: f64,
    pub eta: f64,
    /// Monte-Carlo draws for the indicator coefficients.
    pub samples: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            gamma0_scale: 0.1,
            he2_weight: 1.0,
            eta: 1.0,
            samples: 1_000_000,
        }
    }
}

/// Full analytic pipeline: `a_p` by quadrature, `b_p` by Monte Carlo, then
/// the sphere-moment prediction.
pub fn gamma_star_oracle(
    g: &LinkFunction,
    gc: GatingConstants,
    space: &FeatureSpace,
    map: FeatureMap,
    settings: &OracleSettings,
    stream: &RngStream,
) -> Result<GammaStarOracle> {
    let a = a_coeffs(g, gc, None, 2, &Estimator::Quadrature { nodes: 160 })?;
    let a3 = [a.coeffs[0], a.coeffs[1], a.coeffs[2]];
    let est = Estimator::MonteCarlo {
        samples: settings.samples,
        stream: stream.clone(),
    };
    let b = b_coeffs_weighted(g, a3, settings.gamma0_scale, settings.he2_weight, 2, &est)?;
    let b3 = [b.coeffs[0], b.coeffs[1], b.coeffs[2]];
    Ok(GammaStarOracle {
        prediction: predict_gamma_star_exact(a3, b3, space, map, settings.eta),
        a,
        b,
    })
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> f64 {
    let n = (dot(x, x) * dot(y, y)).sqrt();
    if n > 0.0 {
        dot(x, y) / n
    } else {
        0.0
    }
}

/// Kernel ridge prediction with `k(x, x') = exp(-|x - x'|^2 / (2 h^2))`,
/// optionally restricted to a subset of coordinates.
pub fn kernel_ridge_predict(
    xs: &[Vec<f64>],
    ys: &[f64],
    query: &[f64],
    coords: Option<&[usize]>,
    bandwidth: f64,
    ridge: f64,
) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid(
            "kernel ridge needs at least one context pair",
        ));
    }
    if !(bandwidth > 0.0) || !(ridge >= 0.0) {
        return Err(Error::invalid(
            "kernel ridge needs bandwidth > 0 and ridge >= 0",
        ));
    }
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        match coords {
            Some(c) => c.iter().map(|&i| (a[i] - b[i]).powi(2)).sum(),
            None => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
        }
    };
    let k = |a: &[f64], b: &[f64]| (-dist2(a, b) / (2.0 * bandwidth * bandwidth)).exp();
    let n = xs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        k(&xs[i], &xs[j]) + if i == j { ridge } else { 0.0 }
    });
    let y = DVector::from_column_slice(ys);
    let alpha = if ridge > 0.0 {
        Cholesky::new(gram)
            .ok_or_else(|| Error::numerical("kernel matrix plus ridge is not positive definite"))?
            .solve(&y)
    } else {
        let lu = gram.clone().lu();
        let alpha = lu
            .solve(&y)
            .ok_or_else(|| Error::numerical("kernel matrix is singular with ridge = 0"))?;
        let resid = (&gram * &alpha - &y).amax();
        if !(resid <= 1e-6 * (1.0 + y.amax())) || alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "kernel matrix is ill-conditioned with ridge = 0",
            ));
        }
        alpha
    };
    Ok(xs
        .iter()
        .zip(alpha.iter())
        .map(|(x, a)| a * k(x, query))
        .sum())
}

/// Kernel ridge regression run independently inside each prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRidge {
    /// Restrict distances to these coordinates (the intrinsic space).
    pub coords: Option<Vec<usize>>,
    pub bandwidth: f64,
    pub ridge: f64,
}

impl KernelRidge {
    pub fn full(bandwidth: f64, ridge: f64) -> Self {
        Self {
            coords: None,
            bandwidth,
            ridge,
        }
    }

    pub fn intrinsic(space: &FeatureSpace, bandwidth: f64, ridge: f64) -> Self {
        Self {
            coords: Some(space.index_set().to_vec()),
            bandwidth,
            ridge,
        }
    }
}

impl Predictor for KernelRidge {
    fn name(&self) -> &str {
        if self.coords.is_some() {
            "krr_intrinsic"
        } else {
            "krr_full"
        }
    }

    /// Solver failures surface as `NaN`, which the error estimator rejects.
    fn predict_prompt(&self, p: &Prompt) -> f64 {
        kernel_ridge_predict(
            &p.xs,
            &p.ys,
            &p.query,
            self.coords.as_deref(),
            self.bandwidth,
            self.ridge,
        )
        .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentReductionReport {
    pub information_exponent: usize,
    pub generative_exponent: u8,
    /// `H(g sigma(g/rho + b), p)` for `p = 0..=information_exponent`.
    pub coefficients: Vec<McEstimate>,
    /// First `p >= 1` significant at [`MC_SIGNIFICANCE`] standard errors;
    /// `None` when nothing is significant (inconclusive).
    pub first_significant: Option<usize>,
}

impl ExponentReductionReport {
    pub fn conclusive(&self) -> bool {
        self.first_significant.is_some()
    }

    pub fn matches_generative_exponent(&self) -> bool {
        self.first_significant == Some(self.generative_exponent as usize)
    }
}

pub fn exponent_reduction_report(
    g: &LinkFunction,
    gc: GatingConstants,
    samples: usize,
    stream: &RngStream,
) -> Result<ExponentReductionReport> {
    let ie = information_exponent(g, QUADRATURE_ZERO_TOL)?;
    let ge = generative_exponent(g, QUADRATURE_ZERO_TOL);
    let est = Estimator::MonteCarlo {
        samples,
        stream: stream.clone(),
    };
    let exp = est.expansion(gated_link(g, gc), ie)?;
    let coefficients: Vec<McEstimate> = (0..=ie).map(|p| exp.estimate(p)).collect();
    let first_significant = (1..=ie).find(|&p| coefficients[p].is_significant(MC_SIGNIFICANCE));
    Ok(ExponentReductionReport {
        information_exponent: ie,
        generative_exponent: ge,
        coefficients,
        first_significant,
    })
}

/// `sqrt(p! E[g^2])`, the Cauchy-Schwarz bound on `|H(g 1[.], p)|`.
pub fn hermite_bound(g: &LinkFunction, p: usize) -> f64 {
    let second_moment: f64 = g.coeffs().iter().map(|c| c * c).sum();
    (factorial(p) * second_moment).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_feature_model_is_recovered() {
        let t: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let s: Vec<f64> = t.iter().map(|t| 0.3 + 0.5 * t).collect();
        let r = fit_feature_model(&s, &t, 2).unwrap();
        assert_abs_diff_eq!(r.p1, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p2, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.r_squared, 1.0, epsilon = 1e-12);
        assert!(fit_feature_model(&s, &vec![1.0; 50], 1).is_err());
    }

    #[test]
    fn alignment_examples() {
        let space = FeatureSpace::leading(4, 2).unwrap();
        let slots = slot_layout(4);
        let only_i: Vec<f64> = slots
            .iter()
            .map(|s| if s.touches_only(|i| i < 2) { 1.0 } else { 0.0 })
            .collect();
        let r = gamma_alignment(&only_i, FeatureMap::Quadratic, &space).unwrap();
        assert_eq!(r.mass_on_feature_slots, 1.0);
        let flat = vec![0.7; slots.len()];
        let r = gamma_alignment(&flat, FeatureMap::Quadratic, &space).unwrap();
        assert_abs_diff_eq!(r.mass_on_feature_slots, r.uniform_share, epsilon = 1e-15);
        assert_abs_diff_eq!(r.ratio, 1.0, epsilon = 1e-12);
        // I = {0,1}: 2 linear, 2 square, 1 cross out of 4 + 4 + 6
        assert_abs_diff_eq!(r.uniform_share, 5.0 / 14.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_star_prediction_examples() {
        let space = FeatureSpace::leading(5, 3).unwrap();
        let v = predict_gamma_star_exact(
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            &space,
            FeatureMap::Quadratic,
            0.5,
        );
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|x| *x == 0.0));
        let v = predict_gamma_star_exact(
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            &space,
            FeatureMap::Quadratic,
            0.5,
        );
        assert_eq!(&v[1..6], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
    }

    #[test]
    fn indicator_extremes() {
        let g = LinkFunction::hermite_mode(3).unwrap();
        let est = Estimator::Quadrature { nodes: 60 };
        let on = b_coeffs(&g, [1e9, 0.0, 0.0], 1.0, 4, &est).unwrap();
        assert_abs_diff_eq!(on.coeffs[3], 6f64.sqrt(), epsilon = 1e-10);
        let off = b_coeffs(&g, [-1e9, 0.0, 0.0], 1.0, 4, &est).unwrap();
        assert!(off.coeffs.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn kernel_ridge_examples() {
        let x = vec![vec![0.3, -0.2]];
        assert_abs_diff_eq!(
            kernel_ridge_predict(&x, &[1.4], &x[0], None, 1.0, 1.0).unwrap(),
            0.7,
            epsilon = 1e-15
        );
        let xs = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.7, 2.0]];
        let ys = [0.2, -1.0, 3.0];
        for (x, y) in xs.iter().zip(ys) {
            assert_abs_diff_eq!(
                kernel_ridge_predict(&xs, &ys, x, None, 1.0, 0.0).unwrap(),
                y,
                epsilon = 1e-10
            );
        }
        // coordinate restriction ignores the other axes
        let a = kernel_ridge_predict(&xs, &ys, &[0.1, 9.0], Some(&[0]), 1.0, 1.0).unwrap();
        let b = kernel_ridge_predict(&xs, &ys, &[0.1, -9.0], Some(&[0]), 1.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_link_reduces_immediately() {
        let g = LinkFunction::hermite_mode(1).unwrap();
        let r =
            exponent_reduction_report(&g, GatingConstants::default(), 20_000, &RngStream::new(2))
                .unwrap();
        assert_eq!(r.first_significant, Some(1));
        assert!(r.matches_generative_exponent());
    }
}
