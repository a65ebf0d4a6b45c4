//! ReLU-MLP head, the full prediction map and the in-context test error.

use rayon::prelude::*;

use crate::embedding::{embed_prompt, EmbeddedPrompt, FeatureMap};
use crate::error::{Error, Result};
use crate::hermite::LinkFunction;
use crate::rng::RngStream;
use crate::sampler::{FeatureSpace, Prompt, TaskSampler};
use crate::ssm::{mamba_scalar, MambaParams};

/// `MLP(z) = sum_k u_k ReLU(v_k z + a_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

impl MlpParams {
    pub fn new(u: Vec<f64>, v: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() || u.len() != a.len() {
            return Err(Error::invalid(format!(
                "mlp vectors disagree in length: u {}, v {}, a {}",
                u.len(),
                v.len(),
                a.len()
            )));
        }
        if u.is_empty() {
            return Err(Error::invalid("mlp width must be positive"));
        }
        if u.iter().chain(&v).chain(&a).any(|x| !x.is_finite()) {
            return Err(Error::invalid("mlp parameters must be finite"));
        }
        Ok(Self { u, v, a })
    }

    /// `u = 1/m`, `v = 1`, `a = 0`: the head is exactly `ReLU`.
    pub fn relu_init(m: usize) -> Self {
        Self {
            u: vec![1.0 / m as f64; m],
            v: vec![1.0; m],
            a: vec![0.0; m],
        }
    }

    pub fn width(&self) -> usize {
        self.u.len()
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn mlp_forward(z: f64, p: &MlpParams) -> f64 {
    p.u.iter()
        .zip(&p.v)
        .zip(&p.a)
        .map(|((u, v), a)| u * relu(v * z + a))
        .sum()
}

/// Derivative in `z`, taking the ReLU slope at its kink to be 0.
pub fn mlp_derivative(z: f64, p: &MlpParams) -> f64 {
    p.u.iter()
        .zip(&p.v)
        .zip(&p.a)
        .filter(|((_, v), a)| *v * z + **a > 0.0)
        .map(|((u, v), _)| u * v)
        .sum()
}

/// `MLP(mamba_scalar / N)`. Requires `N >= 1`.
pub fn predict(z: &EmbeddedPrompt, mp: &MambaParams, hp: &MlpParams) -> f64 {
    assert!(z.n() >= 1, "prediction needs at least one context example");
    mlp_forward(mamba_scalar(z, mp) / z.n() as f64, hp)
}

/// Anything that maps a prompt to a prediction of its query label.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict_prompt(&self, p: &Prompt) -> f64;
}

/// The pretrained Mamba + MLP model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub mamba: MambaParams,
    pub mlp: MlpParams,
    pub map: FeatureMap,
}

impl Predictor for TrainedModel {
    fn name(&self) -> &str {
        "mamba_mlp"
    }

    fn predict_prompt(&self, p: &Prompt) -> f64 {
        predict(&embed_prompt(p, self.map), &self.mamba, &self.mlp)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn name(&self) -> &str {
        "zero"
    }

    fn predict_prompt(&self, _: &Prompt) -> f64 {
        0.0
    }
}

/// Predicts `g(<beta, query>)` using the prompt's true direction.
#[derive(Debug, Clone)]
pub struct LinkOracle(pub LinkFunction);

impl Predictor for LinkOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict_prompt(&self, p: &Prompt) -> f64 {
        self.0.eval(p.query_projection())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Abs,
    Sq,
}

impl Metric {
    pub fn loss(self, pred: f64, y: f64) -> f64 {
        match self {
            Metric::Abs => (pred - y).abs(),
            Metric::Sq => (pred - y) * (pred - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Abs => "abs",
            Metric::Sq => "sq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "abs" => Some(Metric::Abs),
            "sq" => Some(Metric::Sq),
            _ => None,
        }
    }
}

/// How the evaluation tasks are drawn.
#[derive(Debug, Clone)]
pub struct EvalSpec<'a> {
    pub space: &'a FeatureSpace,
    pub g: &'a LinkFunction,
    pub tau: f64,
    pub n: usize,
    pub tasks: usize,
    pub prompts_per_task: usize,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSummary {
    pub mean: f64,
    /// Sample standard deviation of the per-task means (0 for one task).
    pub std: f64,
    pub per_task: Vec<f64>,
}

impl ErrorSummary {
    pub fn from_per_task(per_task: Vec<f64>) -> Self {
        let k = per_task.len() as f64;
        let mean = per_task.iter().sum::<f64>() / k;
        let std = if per_task.len() > 1 {
            (per_task
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / (k - 1.0))
                .sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            per_task,
        }
    }

    /// Standard error of the mean across tasks.
    pub fn std_err(&self) -> f64 {
        self.std / (self.per_task.len() as f64).sqrt()
    }
}

/// Monte-Carlo test error. Task `t` draws from `stream.child(t)`; the prompt
/// streams do not depend on `n`, so sweeps over `n` share their randomness.
pub fn test_error(
    model: &dyn Predictor,
    spec: &EvalSpec,
    stream: &RngStream,
) -> Result<ErrorSummary> {
    if spec.n == 0 || spec.tasks == 0 || spec.prompts_per_task == 0 {
        return Err(Error::invalid(
            "test error needs positive n, tasks and prompts per task",
        ));
    }
    let sampler = TaskSampler::new(spec.space, spec.g, spec.tau);
    let per_task: Vec<f64> = (0..spec.tasks as u64)
        .into_par_iter()
        .map(|t| {
            let task = stream.child(t);
            let beta = sampler.beta(&task);
            let total: f64 = (0..spec.prompts_per_task as u64)
                .map(|i| {
                    let p = sampler.prompt(&task, &beta, i, spec.n);
                    spec.metric.loss(model.predict_prompt(&p), p.query_label)
                })
                .sum();
            total / spec.prompts_per_task as f64
        })
        .collect();
    if let Some(t) = per_task.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite test error on task {t}"
        )));
    }
    Ok(ErrorSummary::from_per_task(per_task))
}
