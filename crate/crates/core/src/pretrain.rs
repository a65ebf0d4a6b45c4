//! Two-stage pretraining: one full-batch gradient step on `gamma`, then a
//! ridge fit of the MLP's outer layer over freshly drawn inner weights.
//!
//! Both stages only touch prompts through their readout direction
//! `r_t = readout_direction(Z_t) / N`, since `mamba_scalar / N = <r_t, gamma>`.
//! The Stage I loss is `L1 = (1/T) sum_t (f_t - y_t)^2`, and the Stage II
//! loss has the same form with the outer weights `u` as the free variable.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::embedding::{embed_prompt, slot_layout, EmbeddedPrompt, FeatureMap, Slot};
use crate::error::{Error, Result};
use crate::hermite::{GatingConstants, LinkFunction};
use crate::predictor::{mlp_derivative, mlp_forward, relu, MlpParams, TrainedModel};
use crate::rng::{role, stage, RngStream};
use crate::sampler::{FeatureSpace, TaskSampler};
use crate::ssm::{readout_direction, MambaParams};

/// Default validation grid for the ridge strength.
pub const DEFAULT_LAMBDA2_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Share of Stage II tasks held out when selecting the ridge strength.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Pre-activations closer to zero than this are flagged as near the kink.
pub const KINK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum EtaMode {
    Fixed(f64),
    /// Choose `eta` so that `max |gamma*| = 1`.
    AutoScale,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lambda2 {
    Fixed(f64),
    /// Select on held-out tasks, then refit on all tasks.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: EtaMode,
    /// `None` means `1/eta`.
    pub lambda1: Option<f64>,
    pub lambda2: Lambda2,
    pub n_pt: usize,
    pub t1: usize,
    pub t2: usize,
    pub m: usize,
    pub gamma0_scale: f64,
    pub gc: GatingConstants,
    pub map: FeatureMap,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: EtaMode::AutoScale,
            lambda1: None,
            lambda2: Lambda2::Grid(DEFAULT_LAMBDA2_GRID.to_vec()),
            n_pt: 200,
            t1: 500,
            t2: 500,
            m: 64,
            gamma0_scale: 0.1,
            gc: GatingConstants::default(),
            map: FeatureMap::Quadratic,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every problem found, with `train.*` / `gating.*` field names.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match self.eta {
            EtaMode::Fixed(eta) if !(eta >= 0.0 && eta.is_finite()) => {
                errs.push(format!("train.eta must be nonnegative and finite, got {eta}"))
            }
            EtaMode::Fixed(eta) if eta == 0.0 && self.lambda1.is_none() => errs
                .push("train.eta = 0 needs an explicit train.lambda1 (the default is 1/eta)".into()),
            EtaMode::AutoScale if self.lambda1.is_some() => errs.push(
                "train.lambda1 cannot be set with auto-scaled eta (auto-scaling assumes lambda1 = 1/eta)"
                    .into(),
            ),
            _ => {}
        }
        if let Some(l1) = self.lambda1 {
            if !(l1 >= 0.0 && l1.is_finite()) {
                errs.push(format!(
                    "train.lambda1 must be nonnegative and finite, got {l1}"
                ));
            }
        }
        match &self.lambda2 {
            Lambda2::Fixed(l) if !pos(*l) => errs.push(format!(
                "train.lambda2 must be positive and finite, got {l}"
            )),
            Lambda2::Grid(g) if g.is_empty() => errs.push("train.lambda2_grid is empty".into()),
            Lambda2::Grid(g) if !g.iter().all(|l| pos(*l)) => {
                errs.push("train.lambda2_grid entries must be positive and finite".into())
            }
            Lambda2::Grid(g) if g.len() > 1 && self.t2 < 2 => {
                errs.push("train.t2 must be at least 2 to select lambda2 on held-out tasks".into())
            }
            _ => {}
        }
        for (name, v) in [
            ("train.n_pt", self.n_pt),
            ("train.t1", self.t1),
            ("train.t2", self.t2),
            ("train.m", self.m),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if !pos(self.gamma0_scale) {
            errs.push(format!(
                "train.gamma0_scale must be positive and finite, got {}",
                self.gamma0_scale
            ));
        }
        if let Err(Error::Validation(v)) = self.gc.validate() {
            errs.extend(v);
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Initial `gamma`: `scale^2` on the constant slot, 1 on the linear slots and
/// `scale` on every quadratic slot. The identity map has only linear slots.
pub fn initial_gamma(map: FeatureMap, d: usize, scale: f64) -> Vec<f64> {
    match map {
        FeatureMap::Identity => vec![1.0; d],
        FeatureMap::Quadratic => slot_layout(d)
            .into_iter()
            .map(|s| match s {
                Slot::Constant => scale * scale,
                Slot::Linear(_) => 1.0,
                Slot::Square(_) | Slot::Cross(..) => scale,
            })
            .collect(),
    }
}

pub fn init_params(cfg: &TrainConfig, d: usize) -> (MambaParams, MlpParams) {
    let mp = MambaParams {
        gamma: initial_gamma(cfg.map, d, cfg.gamma0_scale),
        gc: cfg.gc,
    };
    (mp, MlpParams::relu_init(cfg.m))
}

/// Readout directions and query labels of a set of prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutBatch {
    /// Row `t` is `readout_direction(Z_t) / N_t`.
    pub readouts: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl ReadoutBatch {
    pub fn from_prompts(prompts: &[EmbeddedPrompt], labels: &[f64], gc: GatingConstants) -> Self {
        assert_eq!(prompts.len(), labels.len());
        let readouts = prompts
            .par_iter()
            .map(|z| {
                let n = z.n() as f64;
                let mut r = readout_direction(z, gc);
                r.iter_mut().for_each(|x| *x /= n);
                r
            })
            .collect();
        Self {
            readouts,
            labels: labels.to_vec(),
        }
    }

    /// `T` tasks with one prompt of length `n` each; task `t` draws from
    /// `stream.child(t)`.
    pub fn sample(
        space: &FeatureSpace,
        g: &LinkFunction,
        gc: GatingConstants,
        map: FeatureMap,
        n: usize,
        tasks: usize,
        stream: &RngStream,
    ) -> Self {
        let sampler = TaskSampler::new(space, g, gc.tau);
        let (readouts, labels) = (0..tasks as u64)
            .into_par_iter()
            .map(|t| {
                let task = stream.child(t);
                let beta = sampler.beta(&task);
                let p = sampler.prompt(&task, &beta, 0, n);
                let mut r = readout_direction(&embed_prompt(&p, map), gc);
                r.iter_mut().for_each(|x| *x /= n as f64);
                (r, p.query_label)
            })
            .unzip();
        Self { readouts, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Normalized scalar outputs `<r_t, gamma>`.
    pub fn scalars(&self, gamma: &[f64]) -> Vec<f64> {
        self.readouts
            .iter()
            .map(|r| r.iter().zip(gamma).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// `L1(gamma) = (1/T) sum_t (MLP(<r_t, gamma>) - y_t)^2`.
pub fn stage1_loss(batch: &ReadoutBatch, gamma: &[f64], hp: &MlpParams) -> f64 {
    let s = batch.scalars(gamma);
    s.iter()
        .zip(&batch.labels)
        .map(|(s, y)| (mlp_forward(*s, hp) - y).powi(2))
        .sum::<f64>()
        / batch.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Gradient {
    pub gradient: Vec<f64>,
    /// Share of tasks whose head pre-activation is on the active side.
    pub active_rate: f64,
    /// Tasks with a pre-activation within [`KINK_EPS`] of a kink.
    pub near_kink: Vec<usize>,
}

/// Full-batch `grad L1 = (2/T) sum_t (f_t - y_t) MLP'(s_t) r_t`.
pub fn stage1_gradient(batch: &ReadoutBatch, gamma0: &[f64], hp: &MlpParams) -> Stage1Gradient {
    let s = batch.scalars(gamma0);
    let coef: Vec<f64> = s
        .iter()
        .zip(&batch.labels)
        .map(|(s, y)| (mlp_forward(*s, hp) - y) * mlp_derivative(*s, hp))
        .collect();
    let scale = 2.0 / batch.len() as f64;
    let mut gradient = vec![0.0; gamma0.len()];
    for (c, r) in coef.iter().zip(&batch.readouts) {
        if *c != 0.0 {
            for (g, x) in gradient.iter_mut().zip(r) {
                *g += scale * c * x;
            }
        }
    }
    let pre = |s: f64| hp.v.iter().zip(&hp.a).map(move |(v, a)| v * s + a);
    let active = s.iter().filter(|s| pre(**s).any(|p| p > 0.0)).count();
    let near_kink = s
        .iter()
        .enumerate()
        .filter(|(_, s)| pre(**s).any(|p| p.abs() <= KINK_EPS))
        .map(|(t, _)| t)
        .collect();
    Stage1Gradient {
        gradient,
        active_rate: active as f64 / batch.len() as f64,
        near_kink,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Result {
    pub gamma_star: Vec<f64>,
    pub raw_gradient: Vec<f64>,
    pub eta: f64,
    pub lambda1: f64,
    pub active_rate: f64,
    pub near_kink: usize,
}

/// `gamma* = gamma0 - eta (grad + lambda1 gamma0)`; with `lambda1 = 1/eta`
/// this is `-eta grad` and is evaluated in that form.
pub fn stage1_update(
    cfg: &TrainConfig,
    grad: &Stage1Gradient,
    gamma0: &[f64],
) -> Result<Stage1Result> {
    let g = &grad.gradient;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("stage I gradient is not finite"));
    }
    let (eta, lambda1, gamma_star) = match (&cfg.eta, cfg.lambda1) {
        (EtaMode::AutoScale, Some(_)) => {
            return Err(Error::invalid(
                "an explicit lambda1 cannot be combined with auto-scaled eta",
            ))
        }
        (EtaMode::AutoScale, None) => {
            let peak = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if peak == 0.0 {
                return Err(Error::numerical(format!(
                    "stage I gradient is identically zero ({:.1}% of tasks active), cannot auto-scale eta",
                    100.0 * grad.active_rate
                )));
            }
            let eta = 1.0 / peak;
            (eta, peak, g.iter().map(|x| -x / peak).collect())
        }
        (EtaMode::Fixed(eta), None) => (*eta, 1.0 / eta, g.iter().map(|x| -eta * x).collect()),
        (EtaMode::Fixed(eta), Some(l1)) => (
            *eta,
            l1,
            gamma0
                .iter()
                .zip(g)
                .map(|(g0, x)| g0 - eta * (x + l1 * g0))
                .collect(),
        ),
    };
    Ok(Stage1Result {
        gamma_star,
        raw_gradient: g.clone(),
        eta,
        lambda1,
        active_rate: grad.active_rate,
        near_kink: grad.near_kink.len(),
    })
}

/// `v ~ Unif{+-1}^m`, `a ~ Unif[-1, 1]^m`.
pub fn sample_inner_layer(m: usize, stream: &RngStream) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream.rng();
    let v = (0..m)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let a = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
    (v, a)
}

/// `Phi[t, k] = ReLU(v_k s_t + a_k)`.
pub fn relu_features(s: &[f64], v: &[f64], a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), v.len(), |t, k| relu(v[k] * s[t] + a[k]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    pub u: Vec<f64>,
    pub kkt_residual: f64,
    /// Squared ratio of extreme Cholesky pivots; a lower bound on the
    /// condition number of the normal matrix.
    pub condition_estimate: f64,
    pub train_loss: f64,
}

/// Minimize `(1/T)||Phi u - y||^2 + (lambda/2)||u||^2` via the normal
/// equations `((2/T) Phi^T Phi + lambda I) u = (2/T) Phi^T y`, with one step
/// of iterative refinement.
pub fn ridge_solve(phi: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeSolution> {
    let t = phi.nrows() as f64;
    let m = phi.ncols();
    let yv = DVector::from_column_slice(y);
    let normal = phi.tr_mul(phi) * (2.0 / t) + DMatrix::identity(m, m) * lambda;
    let rhs = phi.tr_mul(&yv) * (2.0 / t);
    let chol = Cholesky::new(normal.clone()).ok_or_else(|| {
        Error::numerical(format!(
            "ridge normal matrix is not positive definite (lambda2 = {lambda})"
        ))
    })?;
    let mut u = chol.solve(&rhs);
    let r = &rhs - &normal * &u;
    u += chol.solve(&r);
    let pivots = chol.l_dirty().diagonal();
    let (lo, hi) = pivots.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
        (lo.min(p.abs()), hi.max(p.abs()))
    });
    let resid = phi * &u - &yv;
    let kkt = phi.tr_mul(&resid) * (2.0 / t) + &u * lambda;
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(format!(
            "ridge solution is not finite (lambda2 = {lambda})"
        )));
    }
    Ok(RidgeSolution {
        u: u.as_slice().to_vec(),
        kkt_residual: kkt.norm(),
        condition_estimate: (hi / lo).powi(2),
        train_loss: resid.norm_squared() / t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgePathPoint {
    pub lambda2: f64,
    /// Held-out loss of the fit on the training split (`NaN` without a split).
    pub validation_loss: f64,
    /// `||u*||` of the fit on all tasks.
    pub u_norm: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Result {
    pub u_star: Vec<f64>,
    pub v_star: Vec<f64>,
    pub a_star: Vec<f64>,
    pub train_loss: f64,
    /// Largest KKT residual over every ridge solve performed.
    pub kkt_residual: f64,
    pub condition_estimate: f64,
    pub chosen_lambda2: f64,
    pub path: Vec<RidgePathPoint>,
}

/// Ridge fit of the outer layer on scalars `s` with fixed inner weights.
pub fn stage2_fit(
    s: &[f64],
    y: &[f64],
    v: Vec<f64>,
    a: Vec<f64>,
    lambda2: &Lambda2,
) -> Result<Stage2Result> {
    if s.is_empty() || s.len() != y.len() {
        return Err(Error::invalid(
            "stage II needs at least one task and matching labels",
        ));
    }
    let phi = relu_features(s, &v, &a);
    let grid: Vec<f64> = match lambda2 {
        Lambda2::Fixed(l) => vec![*l],
        Lambda2::Grid(g) => g.clone(),
    };
    let t = s.len();
    let split = grid.len() > 1 && t >= 2;
    let n_val = if split {
        ((t as f64 * VALIDATION_FRACTION).ceil() as usize).clamp(1, t - 1)
    } else {
        0
    };
    let mut kkt_max = 0.0f64;
    let mut path = Vec::with_capacity(grid.len());
    let mut fits = Vec::with_capacity(grid.len());
    for &lam in &grid {
        let full = ridge_solve(&phi, y, lam)?;
        kkt_max = kkt_max.max(full.kkt_residual);
        let validation_loss = if split {
            let n_tr = t - n_val;
            let fit = ridge_solve(&phi.rows(0, n_tr).into_owned(), &y[..n_tr], lam)?;
            kkt_max = kkt_max.max(fit.kkt_residual);
            let u = DVector::from_column_slice(&fit.u);
            let pred = phi.rows(n_tr, n_val) * u;
            pred.iter()
                .zip(&y[n_tr..])
                .map(|(p, y)| (p - y).powi(2))
                .sum::<f64>()
                / n_val as f64
        } else {
            f64::NAN
        };
        path.push(RidgePathPoint {
            lambda2: lam,
            validation_loss,
            u_norm: full.u.iter().map(|x| x * x).sum::<f64>().sqrt(),
            kkt_residual: full.kkt_residual,
        });
        fits.push(full);
    }
    let best = if split {
        // first minimum in grid order
        (0..grid.len()).fold(0, |b, i| {
            if path[i].validation_loss < path[b].validation_loss {
                i
            } else {
                b
            }
        })
    } else {
        0
    };
    let chosen = fits.swap_remove(best);
    Ok(Stage2Result {
        u_star: chosen.u,
        v_star: v,
        a_star: a,
        train_loss: chosen.train_loss,
        kkt_residual: kkt_max,
        condition_estimate: chosen.condition_estimate,
        chosen_lambda2: grid[best],
        path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub model: TrainedModel,
    pub gamma0: Vec<f64>,
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
}

/// Stream layout of a pretraining run: Stage I tasks under
/// `seed/STAGE1/t`, Stage II tasks under `seed/STAGE2/t`, inner MLP weights
/// under `seed/INIT/MLP_INIT`.
pub fn pretrain(
    cfg: &TrainConfig,
    space: &FeatureSpace,
    g: &LinkFunction,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if cfg.map == FeatureMap::Identity && g.is_even(crate::hermite::QUADRATURE_ZERO_TOL) {
        return Err(Error::invalid(
            "the identity embedding cannot learn an even link function",
        ));
    }
    let root = RngStream::new(cfg.seed);
    let (mp0, hp0) = init_params(cfg, space.d());
    let batch1 = ReadoutBatch::sample(
        space,
        g,
        cfg.gc,
        cfg.map,
        cfg.n_pt,
        cfg.t1,
        &root.child(stage::STAGE1),
    );
    let grad = stage1_gradient(&batch1, &mp0.gamma, &hp0);
    let stage1 = stage1_update(cfg, &grad, &mp0.gamma)?;
    drop(batch1);

    let batch2 = ReadoutBatch::sample(
        space,
        g,
        cfg.gc,
        cfg.map,
        cfg.n_pt,
        cfg.t2,
        &root.child(stage::STAGE2),
    );
    let s = batch2.scalars(&stage1.gamma_star);
    let (v, a) = sample_inner_layer(cfg.m, &root.child(stage::INIT).child(role::MLP_INIT));
    let stage2 = stage2_fit(&s, &batch2.labels, v, a, &cfg.lambda2)?;
    let model = TrainedModel {
        mamba: MambaParams::new(stage1.gamma_star.clone(), cfg.gc)?,
        mlp: MlpParams::new(
            stage2.u_star.clone(),
            stage2.v_star.clone(),
            stage2.a_star.clone(),
        )?,
        map: cfg.map,
    };
    Ok(PretrainOutput {
        model,
        gamma0: mp0.gamma,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> ReadoutBatch {
        ReadoutBatch {
            readouts: rows,
            labels,
        }
    }

    #[test]
    fn initial_gamma_layout() {
        assert_eq!(
            initial_gamma(FeatureMap::Quadratic, 2, 0.5),
            vec![0.25, 1.0, 1.0, 0.5, 0.5, 0.5]
        );
        assert!(initial_gamma(FeatureMap::Quadratic, 3, 1.0)
            .iter()
            .all(|x| *x == 1.0));
        let (_, hp) = init_params(
            &TrainConfig {
                m: 5,
                ..Default::default()
            },
            3,
        );
        assert_eq!(hp, MlpParams::relu_init(5));
    }

    #[test]
    fn zero_labels_give_zero_gradient() {
        let z = EmbeddedPrompt::from_columns(&[
            vec![1.0, 0.4, -0.3, 0.0],
            vec![1.0, -1.2, 0.8, 0.0],
            vec![1.0, 0.5, 0.5, 0.0],
        ]);
        let b = ReadoutBatch::from_prompts(&[z], &[0.0], GatingConstants::default());
        let g = stage1_gradient(&b, &[1.0, 1.0, 1.0], &MlpParams::relu_init(2));
        assert_eq!(g.gradient, vec![0.0; 3]);
    }

    #[test]
    fn dead_region_gradient_is_zero() {
        let b = batch(vec![vec![-1.0, 0.3]], vec![2.0]);
        let g = stage1_gradient(&b, &[1.0, 1.0], &MlpParams::relu_init(4));
        assert_eq!(g.gradient, vec![0.0, 0.0]);
        assert_eq!(g.active_rate, 0.0);
    }

    #[test]
    fn kink_tasks_are_flagged() {
        let b = batch(vec![vec![1.0, -1.0], vec![1.0, 1.0]], vec![0.5, 0.5]);
        let g = stage1_gradient(&b, &[1.0, 1.0], &MlpParams::relu_init(1));
        assert_eq!(g.near_kink, vec![0]);
    }

    #[test]
    fn update_modes() {
        let grad = Stage1Gradient {
            gradient: vec![0.5, -2.0],
            active_rate: 1.0,
            near_kink: vec![],
        };
        let g0 = [0.3, 0.7];
        let fixed = TrainConfig {
            eta: EtaMode::Fixed(0.1),
            ..Default::default()
        };
        let r = stage1_update(&fixed, &grad, &g0).unwrap();
        assert_eq!(r.gamma_star, vec![-0.05, 0.2]);
        let frozen = TrainConfig {
            eta: EtaMode::Fixed(0.0),
            lambda1: Some(0.0),
            ..Default::default()
        };
        assert_eq!(
            stage1_update(&frozen, &grad, &g0).unwrap().gamma_star,
            g0.to_vec()
        );
        let auto = stage1_update(&TrainConfig::default(), &grad, &g0).unwrap();
        assert_eq!(
            auto.gamma_star.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            1.0
        );
        let zero = Stage1Gradient {
            gradient: vec![0.0, 0.0],
            active_rate: 0.0,
            near_kink: vec![],
        };
        assert!(matches!(
            stage1_update(&TrainConfig::default(), &zero, &g0),
            Err(Error::Numerical(_))
        ));
        let clash = TrainConfig {
            lambda1: Some(1.0),
            ..Default::default()
        };
        assert!(clash.validate().is_err());
    }

    #[test]
    fn scalar_ridge_closed_form() {
        let s = [0.4, -0.3, 1.2, 0.7];
        let y = [0.1, 0.5, 1.0, -0.2];
        let r = stage2_fit(&s, &y, vec![1.0], vec![0.0], &Lambda2::Fixed(0.05)).unwrap();
        let t = s.len() as f64;
        let num: f64 = 2.0 / t * s.iter().zip(&y).map(|(s, y)| relu(*s) * y).sum::<f64>();
        let den: f64 = 2.0 / t * s.iter().map(|s| relu(*s).powi(2)).sum::<f64>() + 0.05;
        assert_abs_diff_eq!(r.u_star[0], num / den, epsilon = 1e-14);
        assert!(r.kkt_residual < 1e-12);
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let s = [0.4, 0.9, 1.2];
        let r = stage2_fit(
            &s,
            &[1.0, 2.0, 3.0],
            vec![1.0, -1.0],
            vec![0.1, 0.9],
            &Lambda2::Fixed(1e12),
        )
        .unwrap();
        assert!(r.u_star.iter().all(|u| u.abs() < 1e-10));
    }

    #[test]
    fn grid_path_norms_decrease() {
        let mut rng = RngStream::new(5).rng();
        let s: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = s
            .iter()
            .map(|x: &f64| x.powi(3) + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        let (v, a) = sample_inner_layer(16, &RngStream::new(6));
        let r = stage2_fit(&s, &y, v, a, &Lambda2::Grid(DEFAULT_LAMBDA2_GRID.to_vec())).unwrap();
        assert_eq!(r.path.len(), 5);
        assert!(r.path.windows(2).all(|w| w[1].u_norm <= w[0].u_norm));
        assert!(r.kkt_residual < 1e-8);
        assert!(DEFAULT_LAMBDA2_GRID.contains(&r.chosen_lambda2));
    }
}
