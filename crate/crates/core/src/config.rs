//! Experiment configuration: a TOML file with `[data]`, `[gating]`,
//! `[train]`, `[eval]`, `[diagnose]` and `[run]` sections.
//!
//! Every field has a default, unknown keys are rejected, and validation
//! reports every offending field at once. [`ExperimentConfig::to_toml`]
//! writes the canonical form, which parses back to an equal config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::embedding::FeatureMap;
use crate::error::{Error, Result};
use crate::hermite::{GatingConstants, LinkFunction, QUADRATURE_ZERO_TOL};
use crate::predictor::Metric;
use crate::pretrain::{EtaMode, Lambda2, TrainConfig, DEFAULT_LAMBDA2_GRID};
use crate::sampler::FeatureSpace;

/// Environment variable that overrides `run.out_dir`.
pub const OUT_DIR_ENV: &str = "MAMBA_ICL_OUT";

/// Models a sweep can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    MambaMlp,
    KrrFull,
    KrrIntrinsic,
    Zero,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::MambaMlp,
        ModelKind::KrrFull,
        ModelKind::KrrIntrinsic,
        ModelKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MambaMlp => "mamba_mlp",
            ModelKind::KrrFull => "krr_full",
            ModelKind::KrrIntrinsic => "krr_intrinsic",
            ModelKind::Zero => "zero",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_grid: Vec<usize>,
    pub tasks: usize,
    pub prompts_per_task: usize,
    pub metric: Metric,
    pub models: Vec<ModelKind>,
    pub krr_bandwidth: f64,
    pub krr_ridge: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_grid: (1..=40).collect(),
            tasks: 128,
            prompts_per_task: 256,
            metric: Metric::Abs,
            models: ModelKind::ALL.to_vec(),
            krr_bandwidth: 1.0,
            krr_ridge: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    /// Prompts (one per task) used by the feature fit.
    pub prompts: usize,
    /// Context length of those prompts; `None` means `train.n_pt`.
    pub n: Option<usize>,
    /// Samples for the gating exponent-reduction estimate.
    pub mc_samples: usize,
    /// Samples for the indicator coefficients of the `gamma*` oracle.
    pub oracle_samples: usize,
    pub he2_weight: f64,
    /// `None` means the generative exponent of the link.
    pub feature_exponent: Option<u8>,
    pub r2_margin: f64,
    pub alignment_ratio: f64,
    pub cosine: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            prompts: 400,
            n: None,
            mc_samples: 1_000_000,
            oracle_samples: 1_000_000,
            he2_weight: 1.0,
            feature_exponent: None,
            r2_margin: 0.5,
            alignment_ratio: 2.0,
            cosine: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub link: LinkFunction,
    pub space: FeatureSpace,
    /// Training settings; `train.gc.tau` is the label noise and `train.seed`
    /// the master seed of the whole experiment.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnose: DiagnoseConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale experiment: `He_3` link, `d = 16`, `r = 8`.
    fn default() -> Self {
        Self {
            link: LinkFunction::hermite_mode(3).expect("He_3 is a valid link"),
            space: FeatureSpace::leading(16, 8).expect("8 <= 16"),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diagnose: DiagnoseConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn tau(&self) -> f64 {
        self.train.gc.tau
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        if seed > i64::MAX as u64 {
            return Err(Error::invalid(format!(
                "run.seed must be at most {}, got {seed}",
                i64::MAX
            )));
        }
        self.train.seed = seed;
        Ok(())
    }

    /// Context length used by the diagnostics.
    pub fn diagnose_n(&self) -> usize {
        self.diagnose.n.unwrap_or(self.train.n_pt)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Parse(format!("config is not valid TOML: {e}")))?;
        let mut r = Fields::flatten(&table)?;
        let def = ExperimentConfig::default();

        let link_spec = r.string("data.link");
        let d = r.usize("data.d").unwrap_or(def.space.d());
        let rr = r.usize("data.r");
        let index_set = r.usize_list("data.index_set");
        let tau = r.f64("data.tau").unwrap_or(def.train.gc.tau);

        let rho = r.f64("gating.rho").unwrap_or(def.train.gc.rho);
        let b = r.f64("gating.b").unwrap_or(def.train.gc.b);

        let eta = match r.take("train.eta") {
            None => def.train.eta.clone(),
            Some(toml::Value::String(s)) if s == "auto" => EtaMode::AutoScale,
            Some(v) => match as_f64(&v) {
                Some(x) => EtaMode::Fixed(x),
                None => {
                    r.errs
                        .push(format!("train.eta must be \"auto\" or a number, got {v}"));
                    def.train.eta.clone()
                }
            },
        };
        let lambda1 = r.f64("train.lambda1");
        let grid = r.f64_list("train.lambda2_grid");
        let lambda2 = match r.take("train.lambda2") {
            None => Lambda2::Grid(grid.unwrap_or_else(|| DEFAULT_LAMBDA2_GRID.to_vec())),
            Some(toml::Value::String(s)) if s == "grid" => {
                Lambda2::Grid(grid.unwrap_or_else(|| DEFAULT_LAMBDA2_GRID.to_vec()))
            }
            Some(v) => {
                if grid.is_some() {
                    r.errs.push(
                        "train.lambda2_grid is only used with train.lambda2 = \"grid\"".into(),
                    );
                }
                match as_f64(&v) {
                    Some(x) => Lambda2::Fixed(x),
                    None => {
                        r.errs.push(format!(
                            "train.lambda2 must be \"grid\" or a number, got {v}"
                        ));
                        def.train.lambda2.clone()
                    }
                }
            }
        };
        let map = match r.string("train.embedding") {
            None => def.train.map,
            Some(s) => FeatureMap::parse(&s).unwrap_or_else(|| {
                r.errs.push(format!(
                    "train.embedding must be \"quadratic\" or \"identity\", got \"{s}\""
                ));
                def.train.map
            }),
        };
        let train = TrainConfig {
            eta,
            lambda1,
            lambda2,
            n_pt: r.usize("train.n_pt").unwrap_or(def.train.n_pt),
            t1: r.usize("train.t1").unwrap_or(def.train.t1),
            t2: r.usize("train.t2").unwrap_or(def.train.t2),
            m: r.usize("train.m").unwrap_or(def.train.m),
            gamma0_scale: r
                .f64("train.gamma0_scale")
                .unwrap_or(def.train.gamma0_scale),
            gc: GatingConstants { rho, b, tau },
            map,
            seed: r.seed("run.seed").unwrap_or(0),
        };

        let n_grid = match r.take("eval.n_grid") {
            None => def.eval.n_grid.clone(),
            Some(v) => parse_grid(&v).unwrap_or_else(|msg| {
                r.errs.push(format!("eval.n_grid {msg}"));
                def.eval.n_grid.clone()
            }),
        };
        let metric = match r.string("eval.metric") {
            None => def.eval.metric,
            Some(s) => Metric::parse(&s).unwrap_or_else(|| {
                r.errs.push(format!(
                    "eval.metric must be \"abs\" or \"sq\", got \"{s}\""
                ));
                def.eval.metric
            }),
        };
        let models = match r.string_list("eval.models") {
            None => def.eval.models.clone(),
            Some(names) => {
                let mut out = Vec::new();
                for s in names {
                    match ModelKind::parse(&s) {
                        Some(m) if out.contains(&m) => r.errs.push(format!("eval.models lists \"{s}\" twice")),
                        Some(m) => out.push(m),
                        None => r.errs.push(format!(
                            "eval.models: unknown model \"{s}\" (expected mamba_mlp, krr_full, krr_intrinsic or zero)"
                        )),
                    }
                }
                out
            }
        };
        let eval = EvalConfig {
            n_grid,
            tasks: r.usize("eval.tasks").unwrap_or(def.eval.tasks),
            prompts_per_task: r
                .usize("eval.prompts_per_task")
                .unwrap_or(def.eval.prompts_per_task),
            metric,
            models,
            krr_bandwidth: r
                .f64("eval.krr_bandwidth")
                .unwrap_or(def.eval.krr_bandwidth),
            krr_ridge: r.f64("eval.krr_ridge").unwrap_or(def.eval.krr_ridge),
        };

        let dd = &def.diagnose;
        let feature_exponent = match r.take("diagnose.feature_exponent") {
            None => dd.feature_exponent,
            Some(toml::Value::String(s)) if s == "auto" => None,
            Some(toml::Value::Integer(k)) if k == 1 || k == 2 => Some(k as u8),
            Some(v) => {
                r.errs.push(format!(
                    "diagnose.feature_exponent must be \"auto\", 1 or 2, got {v}"
                ));
                dd.feature_exponent
            }
        };
        let diagnose = DiagnoseConfig {
            prompts: r.usize("diagnose.prompts").unwrap_or(dd.prompts),
            n: r.usize("diagnose.n"),
            mc_samples: r.usize("diagnose.mc_samples").unwrap_or(dd.mc_samples),
            oracle_samples: r
                .usize("diagnose.oracle_samples")
                .unwrap_or(dd.oracle_samples),
            he2_weight: r.f64("diagnose.he2_weight").unwrap_or(dd.he2_weight),
            feature_exponent,
            r2_margin: r.f64("diagnose.r2_margin").unwrap_or(dd.r2_margin),
            alignment_ratio: r
                .f64("diagnose.alignment_ratio")
                .unwrap_or(dd.alignment_ratio),
            cosine: r.f64("diagnose.cosine").unwrap_or(dd.cosine),
        };
        let out_dir = r
            .string("run.out_dir")
            .map_or(def.out_dir.clone(), PathBuf::from);

        for key in r.values.keys() {
            r.errs.push(format!("unknown key `{key}`"));
        }
        let mut errs = r.errs;

        let link = match link_spec {
            None => Some(def.link.clone()),
            Some(s) => match LinkFunction::parse(&s) {
                Ok(l) => Some(l),
                Err(e) => {
                    errs.push(format!("data.link: {}", flatten_error(e)));
                    None
                }
            },
        };
        let space = match (index_set, rr) {
            (Some(set), r_opt) => {
                if let Some(rv) = r_opt.filter(|rv| *rv != set.len()) {
                    errs.push(format!(
                        "data.r = {rv} disagrees with data.index_set of length {}",
                        set.len()
                    ));
                }
                FeatureSpace::new(d, set)
            }
            (None, r_opt) => FeatureSpace::leading(d, r_opt.unwrap_or(def.space.r())),
        };
        let space = match space {
            Ok(s) => Some(s),
            Err(e) => {
                errs.push(format!("data: {}", flatten_error(e)));
                None
            }
        };

        // placeholders keep the remaining checks running; they add no
        // problems of their own (the default link is odd)
        let link_ok = link.is_some() && space.is_some();
        let cfg = ExperimentConfig {
            link: link.unwrap_or(def.link),
            space: space.unwrap_or(def.space),
            train,
            eval,
            diagnose,
            out_dir,
        };
        errs.extend(cfg.problems());
        if errs.is_empty() && link_ok {
            Ok(cfg)
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Every semantic problem, with dotted field names.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = self.train.problems();
        if self.train.seed > i64::MAX as u64 {
            errs.push(format!("run.seed must be at most {}", i64::MAX));
        }
        if self.train.map == FeatureMap::Identity && self.link.is_even(QUADRATURE_ZERO_TOL) {
            errs.push(
                "train.embedding = \"identity\" cannot represent an even link function".into(),
            );
        }
        let e = &self.eval;
        if e.n_grid.is_empty() {
            errs.push("eval.n_grid is empty".into());
        }
        if e.n_grid.contains(&0) {
            errs.push("eval.n_grid entries must be at least 1".into());
        }
        for (name, v) in [
            ("eval.tasks", e.tasks),
            ("eval.prompts_per_task", e.prompts_per_task),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if e.models.is_empty() {
            errs.push("eval.models is empty".into());
        }
        if !(e.krr_bandwidth > 0.0 && e.krr_bandwidth.is_finite()) {
            errs.push(format!(
                "eval.krr_bandwidth must be positive and finite, got {}",
                e.krr_bandwidth
            ));
        }
        if !(e.krr_ridge >= 0.0 && e.krr_ridge.is_finite()) {
            errs.push(format!(
                "eval.krr_ridge must be nonnegative and finite, got {}",
                e.krr_ridge
            ));
        }
        let g = &self.diagnose;
        if g.prompts < 2 {
            errs.push("diagnose.prompts must be at least 2".into());
        }
        if g.n == Some(0) {
            errs.push("diagnose.n must be at least 1".into());
        }
        for (name, v) in [
            ("diagnose.mc_samples", g.mc_samples),
            ("diagnose.oracle_samples", g.oracle_samples),
        ] {
            if v < 2 {
                errs.push(format!("{name} must be at least 2"));
            }
        }
        for (name, v) in [
            ("diagnose.he2_weight", g.he2_weight),
            ("diagnose.r2_margin", g.r2_margin),
            ("diagnose.alignment_ratio", g.alignment_ratio),
            ("diagnose.cosine", g.cosine),
        ] {
            if !v.is_finite() {
                errs.push(format!("{name} must be finite, got {v}"));
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            errs.push("run.out_dir is empty".into());
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

    /// Canonical TOML form. Parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let f = fmt_f64;
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "link = \"{}\"", self.link.to_spec());
        let _ = writeln!(s, "d = {}", self.space.d());
        let _ = writeln!(s, "r = {}", self.space.r());
        let _ = writeln!(
            s,
            "index_set = {}",
            list(self.space.index_set(), |v| v.to_string())
        );
        let _ = writeln!(s, "tau = {}", f(t.gc.tau));
        let _ = writeln!(s, "\n[gating]");
        let _ = writeln!(s, "rho = {}", f(t.gc.rho));
        let _ = writeln!(s, "b = {}", f(t.gc.b));
        let _ = writeln!(s, "\n[train]");
        match t.eta {
            EtaMode::AutoScale => s.push_str("eta = \"auto\"\n"),
            EtaMode::Fixed(e) => {
                let _ = writeln!(s, "eta = {}", f(e));
            }
        }
        if let Some(l1) = t.lambda1 {
            let _ = writeln!(s, "lambda1 = {}", f(l1));
        }
        match &t.lambda2 {
            Lambda2::Fixed(l) => {
                let _ = writeln!(s, "lambda2 = {}", f(*l));
            }
            Lambda2::Grid(g) => {
                s.push_str("lambda2 = \"grid\"\n");
                let _ = writeln!(s, "lambda2_grid = {}", list(g, |v| f(*v)));
            }
        }
        let _ = writeln!(s, "n_pt = {}", t.n_pt);
        let _ = writeln!(s, "t1 = {}", t.t1);
        let _ = writeln!(s, "t2 = {}", t.t2);
        let _ = writeln!(s, "m = {}", t.m);
        let _ = writeln!(s, "gamma0_scale = {}", f(t.gamma0_scale));
        let _ = writeln!(s, "embedding = \"{}\"", t.map.name());
        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "n_grid = {}", list(&e.n_grid, |v| v.to_string()));
        let _ = writeln!(s, "tasks = {}", e.tasks);
        let _ = writeln!(s, "prompts_per_task = {}", e.prompts_per_task);
        let _ = writeln!(s, "metric = \"{}\"", e.metric.name());
        let _ = writeln!(
            s,
            "models = {}",
            list(&e.models, |m| format!("\"{}\"", m.name()))
        );
        let _ = writeln!(s, "krr_bandwidth = {}", f(e.krr_bandwidth));
        let _ = writeln!(s, "krr_ridge = {}", f(e.krr_ridge));
        let g = &self.diagnose;
        let _ = writeln!(s, "\n[diagnose]");
        let _ = writeln!(s, "prompts = {}", g.prompts);
        if let Some(n) = g.n {
            let _ = writeln!(s, "n = {n}");
        }
        let _ = writeln!(s, "mc_samples = {}", g.mc_samples);
        let _ = writeln!(s, "oracle_samples = {}", g.oracle_samples);
        let _ = writeln!(s, "he2_weight = {}", f(g.he2_weight));
        match g.feature_exponent {
            None => s.push_str("feature_exponent = \"auto\"\n"),
            Some(k) => {
                let _ = writeln!(s, "feature_exponent = {k}");
            }
        }
        let _ = writeln!(s, "r2_margin = {}", f(g.r2_margin));
        let _ = writeln!(s, "alignment_ratio = {}", f(g.alignment_ratio));
        let _ = writeln!(s, "cosine = {}", f(g.cosine));
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(
            s,
            "out_dir = {}",
            toml::Value::String(self.out_dir.display().to_string())
        );
        s
    }
}

/// Shortest round-tripping float literal that TOML accepts.
pub(crate) fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:?}")
    }
}

fn list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    format!("[{}]", items.iter().map(f).collect::<Vec<_>>().join(", "))
}

fn flatten_error(e: Error) -> String {
    match e {
        Error::Validation(v) => v.join("; "),
        other => other.to_string(),
    }
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(x) => Some(*x),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

/// `[1, 2, 5]` or an inclusive range string `"1..40"`.
fn parse_grid(v: &toml::Value) -> std::result::Result<Vec<usize>, String> {
    match v {
        toml::Value::String(s) => {
            let (lo, hi) = s
                .split_once("..")
                .ok_or_else(|| format!("range must look like \"1..40\", got \"{s}\""))?;
            let lo: usize = lo
                .trim()
                .parse()
                .map_err(|_| format!("bad range start in \"{s}\""))?;
            let hi: usize = hi
                .trim()
                .parse()
                .map_err(|_| format!("bad range end in \"{s}\""))?;
            if lo > hi {
                return Err(format!("range \"{s}\" is empty"));
            }
            Ok((lo..=hi).collect())
        }
        toml::Value::Array(items) => items
            .iter()
            .map(|x| match x {
                toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                other => Err(format!("entries must be nonnegative integers, got {other}")),
            })
            .collect(),
        other => Err(format!(
            "must be an integer array or a \"lo..hi\" range, got {other}"
        )),
    }
}

/// Dotted-key view of a two-level TOML table that records every problem.
struct Fields {
    values: BTreeMap<String, toml::Value>,
    errs: Vec<String>,
}

impl Fields {
    const SECTIONS: [&'static str; 6] = ["data", "gating", "train", "eval", "diagnose", "run"];

    fn flatten(table: &toml::Table) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut errs = Vec::new();
        for (section, body) in table {
            match body {
                toml::Value::Table(t) if Self::SECTIONS.contains(&section.as_str()) => {
                    for (k, v) in t {
                        values.insert(format!("{section}.{k}"), v.clone());
                    }
                }
                toml::Value::Table(_) => errs.push(format!("unknown section `[{section}]`")),
                _ => errs.push(format!("top-level key `{section}` must live in a section")),
            }
        }
        Ok(Self { values, errs })
    }

    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.values.remove(key)
    }

    fn usize(&mut self, key: &str) -> Option<usize> {
        match self.take(key)? {
            toml::Value::Integer(i) if i >= 0 => Some(i as usize),
            v => {
                self.errs
                    .push(format!("{key} must be a nonnegative integer, got {v}"));
                None
            }
        }
    }

    fn seed(&mut self, key: &str) -> Option<u64> {
        match self.take(key)? {
            toml::Value::Integer(i) if i >= 0 => Some(i as u64),
            v => {
                self.errs.push(format!(
                    "{key} must be an integer in 0..={}, got {v}",
                    i64::MAX
                ));
                None
            }
        }
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        let v = self.take(key)?;
        let x = as_f64(&v);
        if x.is_none() {
            self.errs.push(format!("{key} must be a number, got {v}"));
        }
        x
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.take(key)? {
            toml::Value::String(s) => Some(s),
            v => {
                self.errs.push(format!("{key} must be a string, got {v}"));
                None
            }
        }
    }

    fn array(&mut self, key: &str) -> Option<Vec<toml::Value>> {
        match self.take(key)? {
            toml::Value::Array(a) => Some(a),
            v => {
                self.errs.push(format!("{key} must be an array, got {v}"));
                None
            }
        }
    }

    fn usize_list(&mut self, key: &str) -> Option<Vec<usize>> {
        let items = self.array(key)?;
        let out: Option<Vec<usize>> = items
            .iter()
            .map(|v| match v {
                toml::Value::Integer(i) if *i >= 0 => Some(*i as usize),
                _ => None,
            })
            .collect();
        if out.is_none() {
            self.errs
                .push(format!("{key} entries must be nonnegative integers"));
        }
        out
    }

    fn f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        let items = self.array(key)?;
        let out: Option<Vec<f64>> = items.iter().map(as_f64).collect();
        if out.is_none() {
            self.errs.push(format!("{key} entries must be numbers"));
        }
        out
    }

    fn string_list(&mut self, key: &str) -> Option<Vec<String>> {
        let items = self.array(key)?;
        let out: Option<Vec<String>> = items
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect();
        if out.is_none() {
            self.errs.push(format!("{key} entries must be strings"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn messages(r: Result<ExperimentConfig>) -> Vec<String> {
        match r {
            Err(Error::Validation(v)) => v,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_the_default_experiment() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn canonical_form_round_trips() {
        let mut cfg = ExperimentConfig {
            link: LinkFunction::parse("coeffs:0,0.3,0.2,1").unwrap(),
            ..Default::default()
        };
        cfg.train.eta = EtaMode::Fixed(0.37);
        cfg.train.lambda1 = Some(0.01);
        cfg.train.lambda2 = Lambda2::Fixed(1e-3);
        cfg.eval.models = vec![ModelKind::Zero, ModelKind::KrrIntrinsic];
        cfg.diagnose.n = Some(77);
        cfg.diagnose.feature_exponent = Some(2);
        cfg.space = FeatureSpace::new(16, vec![3, 9, 1]).unwrap();
        cfg.set_seed(123).unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn every_problem_is_reported() {
        let errs = messages(ExperimentConfig::parse(
            "[data]\nd = 4\nr = 6\ntau = -1\n[train]\nm = 0\nbogus = 1\n[eval]\nn_grid = []\nmetric = \"l3\"\n",
        ));
        let joined = errs.join("\n");
        for needle in [
            "train.bogus",
            "data.tau",
            "train.m",
            "eval.n_grid",
            "eval.metric",
            "data:",
        ] {
            assert!(joined.contains(needle), "missing {needle} in\n{joined}");
        }
    }

    #[test]
    fn grid_accepts_ranges() {
        let cfg = ExperimentConfig::parse("[eval]\nn_grid = \"3..5\"\n").unwrap();
        assert_eq!(cfg.eval.n_grid, vec![3, 4, 5]);
        assert!(ExperimentConfig::parse("[eval]\nn_grid = \"5..3\"\n").is_err());
    }

    #[test]
    fn identity_embedding_rejects_even_links() {
        let errs = messages(ExperimentConfig::parse(
            "[data]\nlink = \"he2\"\n[train]\nembedding = \"identity\"\n",
        ));
        assert!(errs.iter().any(|e| e.contains("identity")));
    }

    #[test]
    fn auto_eta_with_lambda1_is_rejected() {
        assert!(ExperimentConfig::parse("[train]\nlambda1 = 0.5\n").is_err());
        assert!(ExperimentConfig::parse("[train]\neta = 0.5\nlambda1 = 0.5\n").is_ok());
    }

    #[test]
    fn stray_sections_and_keys() {
        let errs = messages(ExperimentConfig::parse("seed = 3\n[model]\nx = 1\n"));
        assert_eq!(errs.len(), 2);
    }
}
