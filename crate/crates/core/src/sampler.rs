//! Sampling of feature directions, single-index examples and ICL prompts.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hermite::LinkFunction;
use crate::rng::{role, RngStream};

/// Ambient dimension `d`, intrinsic dimension `r` and the (0-based) index set
/// on which feature directions are supported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpace {
    d: usize,
    index_set: Vec<usize>,
}

impl FeatureSpace {
    pub fn new(d: usize, mut index_set: Vec<usize>) -> Result<Self> {
        index_set.sort_unstable();
        let mut errs = Vec::new();
        if d == 0 {
            errs.push("data.d must be at least 1".to_string());
        }
        if index_set.is_empty() {
            errs.push("data.index_set must contain at least one coordinate".to_string());
        }
        if index_set.len() > d {
            errs.push(format!("data.r = {} exceeds data.d = {d}", index_set.len()));
        }
        if index_set.windows(2).any(|w| w[0] == w[1]) {
            errs.push("data.index_set has duplicate coordinates".to_string());
        }
        if let Some(&i) = index_set.iter().find(|&&i| i >= d) {
            errs.push(format!("data.index_set coordinate {i} out of range 0..{d}"));
        }
        if errs.is_empty() {
            Ok(Self { d, index_set })
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// The first `r` coordinates.
    pub fn leading(d: usize, r: usize) -> Result<Self> {
        if r > d {
            return Err(Error::invalid(format!("data.r = {r} exceeds data.d = {d}")));
        }
        Self::new(d, (0..r).collect())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.index_set.len()
    }

    pub fn index_set(&self) -> &[usize] {
        &self.index_set
    }

    pub fn contains(&self, i: usize) -> bool {
        self.index_set.binary_search(&i).is_ok()
    }
}

/// A context of `n` labelled examples plus a query, all drawn for one `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub query: Vec<f64>,
    pub query_label: f64,
    pub beta: Vec<f64>,
}

impl Prompt {
    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn d(&self) -> usize {
        self.query.len()
    }

    /// `<beta, query>`.
    pub fn query_projection(&self) -> f64 {
        dot(&self.beta, &self.query)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `beta ~ Unif(S_r)`: Gaussian draws on the index set, normalized.
pub fn sample_feature<R: Rng + ?Sized>(space: &FeatureSpace, rng: &mut R) -> Vec<f64> {
    loop {
        let mut beta = vec![0.0; space.d()];
        for &i in space.index_set() {
            beta[i] = rng.sample(StandardNormal);
        }
        let norm = dot(&beta, &beta).sqrt();
        if norm > 0.0 {
            beta.iter_mut().for_each(|b| *b /= norm);
            return beta;
        }
    }
}

/// One `(x, y)` pair with `x ~ N(0, I_d)` and `y = g(<beta, x>) + zeta`,
/// `zeta` a fair `+-tau` coin.
pub fn sample_example<R: Rng + ?Sized>(
    beta: &[f64],
    g: &LinkFunction,
    tau: f64,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let x: Vec<f64> = (0..beta.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let zeta = if rng.random::<bool>() { tau } else { -tau };
    let y = g.eval(dot(beta, &x)) + zeta;
    (x, y)
}

/// `n + 1` examples for a fixed `beta`; the last becomes the query.
pub fn sample_prompt_for<R: Rng + ?Sized>(
    beta: &[f64],
    g: &LinkFunction,
    tau: f64,
    n: usize,
    rng: &mut R,
) -> Prompt {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = sample_example(beta, g, tau, rng);
        xs.push(x);
        ys.push(y);
    }
    let (query, query_label) = sample_example(beta, g, tau, rng);
    Prompt {
        xs,
        ys,
        query,
        query_label,
        beta: beta.to_vec(),
    }
}

/// A prompt with its own freshly drawn `beta`.
pub fn sample_prompt<R: Rng + ?Sized>(
    space: &FeatureSpace,
    g: &LinkFunction,
    tau: f64,
    n: usize,
    rng: &mut R,
) -> Result<Prompt> {
    if n == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    let beta = sample_feature(space, rng);
    Ok(sample_prompt_for(&beta, g, tau, n, rng))
}

/// Draws for one task: `beta` from `task.child(BETA)`, prompt `i` from
/// `task.child(PROMPT).child(i)`.
#[derive(Debug, Clone)]
pub struct TaskSampler<'a> {
    pub space: &'a FeatureSpace,
    pub g: &'a LinkFunction,
    pub tau: f64,
}

impl<'a> TaskSampler<'a> {
    pub fn new(space: &'a FeatureSpace, g: &'a LinkFunction, tau: f64) -> Self {
        Self { space, g, tau }
    }

    pub fn beta(&self, task: &RngStream) -> Vec<f64> {
        sample_feature(self.space, &mut task.child(role::BETA).rng())
    }

    pub fn prompt(&self, task: &RngStream, beta: &[f64], index: u64, n: usize) -> Prompt {
        let mut rng = task.child(role::PROMPT).child(index).rng();
        sample_prompt_for(beta, self.g, self.tau, n, &mut rng)
    }

    /// `count` prompts sharing the task's `beta`.
    pub fn prompts(&self, task: &RngStream, n: usize, count: usize) -> Result<Vec<Prompt>> {
        if n == 0 {
            return Err(Error::invalid("context length must be at least 1"));
        }
        let beta = self.beta(task);
        Ok((0..count as u64)
            .map(|i| self.prompt(task, &beta, i, n))
            .collect())
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Dataset dump header. One record per prompt, tab-separated; vector cells are
/// space-separated numbers and `xs` rows are separated by `;`.
pub const DATASET_HEADER: &str = "task_id\tbeta\txs\tys\tquery\tquery_label";

pub fn write_dataset<W: Write>(out: &mut W, records: &[(u64, Prompt)]) -> Result<()> {
    writeln!(out, "{DATASET_HEADER}")?;
    for (task, p) in records {
        let xs: Vec<String> = p.xs.iter().map(|x| join(x)).collect();
        writeln!(
            out,
            "{task}\t{}\t{}\t{}\t{}\t{:?}",
            join(&p.beta),
            xs.join(";"),
            join(&p.ys),
            join(&p.query),
            p.query_label
        )?;
    }
    Ok(())
}

pub fn read_dataset(text: &str) -> Result<Vec<(u64, Prompt)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DATASET_HEADER => {}
        _ => return Err(Error::Parse("dataset header missing or malformed".into())),
    }
    let nums = |s: &str, line: usize| -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", line + 1)))
            })
            .collect()
    };
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Parse(format!("line {}: expected 6 columns", ln + 1)));
        }
        let task = cols[0]
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
        let xs = if cols[2].is_empty() {
            Vec::new()
        } else {
            cols[2]
                .split(';')
                .map(|r| nums(r, ln))
                .collect::<Result<Vec<_>>>()?
        };
        let ql = nums(cols[5], ln)?;
        if ql.len() != 1 {
            return Err(Error::Parse(format!("line {}: bad query_label", ln + 1)));
        }
        out.push((
            task,
            Prompt {
                beta: nums(cols[1], ln)?,
                xs,
                ys: nums(cols[3], ln)?,
                query: nums(cols[4], ln)?,
                query_label: ql[0],
            },
        ));
    }
    Ok(out)
}
