//! Experiment pipelines and their artifacts: checkpoints, run manifests,
//! sweep result CSVs and diagnostics reports.
//!
//! Every artifact except the manifest is a pure function of the config and
//! seed, so reruns produce identical bytes regardless of worker count.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cosine_similarity, exponent_reduction_report, feature_learning_fit, gamma_alignment,
    gamma_star_oracle, AlignmentReport, ExponentReductionReport, FeatureFitReport, GammaStarOracle,
    KernelRidge, OracleSettings,
};
use crate::config::{fmt_f64, ExperimentConfig, ModelKind};
use crate::embedding::FeatureMap;
use crate::error::{Error, Result};
use crate::hermite::{generative_exponent, GatingConstants, QUADRATURE_ZERO_TOL};
use crate::predictor::{test_error, EvalSpec, MlpParams, Predictor, TrainedModel, ZeroPredictor};
use crate::pretrain::{initial_gamma, pretrain, PretrainOutput};
use crate::rng::{role, stage, RngStream};
use crate::sampler::{Prompt, TaskSampler};
use crate::ssm::MambaParams;

pub const CHECKPOINT_FORMAT: &str = "mamba-icl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header of sweep result files.
pub const RESULT_HEADER: [&str; 8] = [
    "model",
    "n_context",
    "d",
    "r",
    "seed",
    "mean_err",
    "std_err",
    "metric",
];

/// Header of diagnostics report files.
pub const REPORT_HEADER: [&str; 3] = ["report", "field", "value"];

// ---------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub link: String,
    pub d: usize,
    pub r: usize,
    pub index_set: Vec<usize>,
    pub embedding: String,
    pub seed: u64,
    pub gating: GatingRecord,
    pub training: TrainingRecord,
    pub model: ModelRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingRecord {
    pub rho: f64,
    pub b: f64,
    pub tau: f64,
}

/// How the stored parameters were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub n_pt: usize,
    pub t1: usize,
    pub t2: usize,
    pub m: usize,
    pub gamma0_scale: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub stage1_active_rate: f64,
    pub stage1_near_kink: usize,
    pub stage2_train_loss: f64,
    pub stage2_kkt_residual: f64,
    pub stage1_stream: String,
    pub stage2_stream: String,
    pub mlp_init_stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub gamma: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

impl Checkpoint {
    pub fn from_run(cfg: &ExperimentConfig, out: &PretrainOutput) -> Self {
        let root = RngStream::new(cfg.seed());
        let gc = out.model.mamba.gc;
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            link: cfg.link.to_spec(),
            d: cfg.space.d(),
            r: cfg.space.r(),
            index_set: cfg.space.index_set().to_vec(),
            embedding: out.model.map.name().into(),
            seed: cfg.seed(),
            gating: GatingRecord {
                rho: gc.rho,
                b: gc.b,
                tau: gc.tau,
            },
            training: TrainingRecord {
                n_pt: cfg.train.n_pt,
                t1: cfg.train.t1,
                t2: cfg.train.t2,
                m: cfg.train.m,
                gamma0_scale: cfg.train.gamma0_scale,
                eta: out.stage1.eta,
                lambda1: out.stage1.lambda1,
                lambda2: out.stage2.chosen_lambda2,
                stage1_active_rate: out.stage1.active_rate,
                stage1_near_kink: out.stage1.near_kink,
                stage2_train_loss: out.stage2.train_loss,
                stage2_kkt_residual: out.stage2.kkt_residual,
                stage1_stream: root.child(stage::STAGE1).describe(),
                stage2_stream: root.child(stage::STAGE2).describe(),
                mlp_init_stream: root.child(stage::INIT).child(role::MLP_INIT).describe(),
            },
            model: ModelRecord {
                gamma: out.model.mamba.gamma.clone(),
                u: out.model.mlp.u.clone(),
                v: out.model.mlp.v.clone(),
                a: out.model.mlp.a.clone(),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            toml::from_str(text).map_err(|e| Error::Parse(format!("bad checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "not a version {CHECKPOINT_VERSION} checkpoint (format `{}`, version {})",
                ck.format, ck.version
            )));
        }
        ck.model()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml()?.as_bytes())
    }

    pub fn map(&self) -> Result<FeatureMap> {
        FeatureMap::parse(&self.embedding).ok_or_else(|| {
            Error::Parse(format!(
                "unknown embedding `{}` in checkpoint",
                self.embedding
            ))
        })
    }

    pub fn gating(&self) -> GatingConstants {
        GatingConstants {
            rho: self.gating.rho,
            b: self.gating.b,
            tau: self.gating.tau,
        }
    }

    pub fn model(&self) -> Result<TrainedModel> {
        let map = self.map()?;
        if self.model.gamma.len() != map.dim(self.d) {
            return Err(Error::Parse(format!(
                "checkpoint gamma has {} entries, a {} embedding of d = {} has {}",
                self.model.gamma.len(),
                self.embedding,
                self.d,
                map.dim(self.d)
            )));
        }
        let m = &self.model;
        Ok(TrainedModel {
            mamba: MambaParams::new(m.gamma.clone(), self.gating())?,
            mlp: MlpParams::new(m.u.clone(), m.v.clone(), m.a.clone())?,
            map,
        })
    }

    /// Every way this checkpoint disagrees with the config's dimensions.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mut errs = Vec::new();
        if self.d != cfg.space.d() {
            errs.push(format!(
                "checkpoint has d = {}, config has data.d = {}",
                self.d,
                cfg.space.d()
            ));
        }
        if self.index_set != cfg.space.index_set() {
            errs.push(format!(
                "checkpoint index set {:?} differs from config data.index_set {:?}",
                self.index_set,
                cfg.space.index_set()
            ));
        }
        if self.embedding != cfg.train.map.name() {
            errs.push(format!(
                "checkpoint embedding `{}` differs from config train.embedding `{}`",
                self.embedding,
                cfg.train.map.name()
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

// ---------------------------------------------------------------- manifest

/// Run manifest: config echo, timing and diagnostics. Unlike every other
/// artifact it records wall time, so it is not byte-stable.
pub fn write_manifest(
    path: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    workers: usize,
    wall_seconds: f64,
    diagnostics: toml::Table,
) -> Result<()> {
    let mut run = toml::Table::new();
    run.insert("command".into(), command.into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    run.insert("workers".into(), (workers as i64).into());
    run.insert("wall_time_seconds".into(), wall_seconds.into());
    run.insert(
        "evaluation_scale".into(),
        format!(
            "{} tasks x {} prompts per context length",
            cfg.eval.tasks, cfg.eval.prompts_per_task
        )
        .into(),
    );
    let config: toml::Table = cfg
        .to_toml()
        .parse()
        .map_err(|e| Error::Parse(format!("config echo is not valid TOML: {e}")))?;
    let mut doc = toml::Table::new();
    doc.insert("run".into(), run.into());
    doc.insert("diagnostics".into(), diagnostics.into());
    doc.insert("config".into(), config.into());
    let text = toml::to_string(&doc)
        .map_err(|e| Error::Parse(format!("cannot serialize manifest: {e}")))?;
    write_file(path, text.as_bytes())
}

/// Training diagnostics for the manifest.
pub fn pretrain_diagnostics(out: &PretrainOutput) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("stage1_eta".into(), out.stage1.eta.into());
    t.insert("stage1_lambda1".into(), out.stage1.lambda1.into());
    t.insert("stage1_active_rate".into(), out.stage1.active_rate.into());
    t.insert(
        "stage1_near_kink".into(),
        (out.stage1.near_kink as i64).into(),
    );
    t.insert(
        "stage2_chosen_lambda2".into(),
        out.stage2.chosen_lambda2.into(),
    );
    t.insert("stage2_train_loss".into(), out.stage2.train_loss.into());
    t.insert("stage2_kkt_residual".into(), out.stage2.kkt_residual.into());
    t.insert(
        "stage2_condition_estimate".into(),
        out.stage2.condition_estimate.into(),
    );
    let path = &out.stage2.path;
    let col = |f: fn(&crate::pretrain::RidgePathPoint) -> f64| -> toml::Value {
        toml::Value::Array(path.iter().map(|p| f(p).into()).collect())
    };
    t.insert("ridge_path_lambda2".into(), col(|p| p.lambda2));
    t.insert(
        "ridge_path_validation_loss".into(),
        col(|p| p.validation_loss),
    );
    t.insert("ridge_path_u_norm".into(), col(|p| p.u_norm));
    t.insert("ridge_path_kkt_residual".into(), col(|p| p.kkt_residual));
    t
}

/// Sweep summary for the manifest.
pub fn sweep_diagnostics(rows: &[ResultRow], checkpoint: Option<&Path>) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("rows".into(), (rows.len() as i64).into());
    if let Some(p) = checkpoint {
        t.insert("checkpoint".into(), p.display().to_string().into());
    }
    t
}

// ---------------------------------------------------------------- results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub n_context: usize,
    pub d: usize,
    pub r: usize,
    pub seed: u64,
    pub mean_err: f64,
    /// Standard error of the mean across tasks.
    pub std_err: f64,
    pub metric: String,
}

pub fn write_results<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn results_to_string(rows: &[ResultRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_results(&mut buf, rows)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

/// Parse a result file, naming the line of the first malformed record.
pub fn read_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("line 1: {e}")))?
        .clone();
    if header.iter().ne(RESULT_HEADER) {
        return Err(Error::Parse(format!(
            "line 1: expected header `{}`, found `{}`",
            RESULT_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: ResultRow = rec
            .deserialize(Some(&header))
            .map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        if !(row.mean_err >= 0.0) || !(row.std_err >= 0.0) {
            return Err(Error::Parse(format!(
                "line {line}: mean_err and std_err must be nonnegative numbers"
            )));
        }
        if crate::predictor::Metric::parse(&row.metric).is_none() {
            return Err(Error::Parse(format!(
                "line {line}: unknown metric `{}`",
                row.metric
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

// ---------------------------------------------------------------- pipelines

pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    pretrain(&cfg.train, &cfg.space, &cfg.link)
}

/// Evaluate every configured model at every context length. Rows come out
/// model by model in config order, each over the grid in config order. All
/// models share the evaluation stream, so they see the same prompts.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let trained = match checkpoint {
        Some(ck) => {
            ck.check_compatible(cfg)?;
            Some(ck.model()?)
        }
        None if cfg.eval.models.contains(&ModelKind::MambaMlp) => {
            return Err(Error::invalid(
                "eval.models includes mamba_mlp but no checkpoint was given",
            ))
        }
        None => None,
    };
    let stream = RngStream::new(cfg.seed()).child(stage::EVAL);
    let mut rows = Vec::with_capacity(cfg.eval.models.len() * cfg.eval.n_grid.len());
    for kind in &cfg.eval.models {
        let model: Box<dyn Predictor> = match kind {
            ModelKind::MambaMlp => Box::new(trained.clone().expect("checked above")),
            ModelKind::KrrFull => Box::new(KernelRidge::full(
                cfg.eval.krr_bandwidth,
                cfg.eval.krr_ridge,
            )),
            ModelKind::KrrIntrinsic => Box::new(KernelRidge::intrinsic(
                &cfg.space,
                cfg.eval.krr_bandwidth,
                cfg.eval.krr_ridge,
            )),
            ModelKind::Zero => Box::new(ZeroPredictor),
        };
        for &n in &cfg.eval.n_grid {
            let spec = EvalSpec {
                space: &cfg.space,
                g: &cfg.link,
                tau: cfg.tau(),
                n,
                tasks: cfg.eval.tasks,
                prompts_per_task: cfg.eval.prompts_per_task,
                metric: cfg.eval.metric,
            };
            let summary = test_error(model.as_ref(), &spec, &stream)
                .map_err(|e| Error::numerical(format!("{} at n = {n}: {e}", kind.name())))?;
            rows.push(ResultRow {
                model: kind.name().into(),
                n_context: n,
                d: cfg.space.d(),
                r: cfg.space.r(),
                seed: cfg.seed(),
                mean_err: summary.mean,
                std_err: summary.std_err(),
                metric: cfg.eval.metric.name().into(),
            });
        }
    }
    Ok(rows)
}

/// A named check against a configured threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Fit against the configured exponent.
    pub feature_fit: FeatureFitReport,
    /// Fit against the other exponent, for comparison.
    pub feature_fit_alt: FeatureFitReport,
    pub alignment: AlignmentReport,
    /// Alignment of the untrained `gamma`.
    pub alignment_init: AlignmentReport,
    pub exponent: ExponentReductionReport,
    pub oracle: GammaStarOracle,
    /// Cosine between `gamma*/eta` and the oracle prediction at `eta = 1`.
    pub oracle_cosine: f64,
    pub checks: Vec<Check>,
}

/// Prompts for the feature fit: one per task under `seed/DIAGNOSE/t`.
pub fn diagnostic_prompts(cfg: &ExperimentConfig, count: usize, n: usize) -> Vec<Prompt> {
    let root = RngStream::new(cfg.seed()).child(stage::DIAGNOSE);
    let sampler = TaskSampler::new(&cfg.space, &cfg.link, cfg.tau());
    (0..count as u64)
        .into_par_iter()
        .map(|t| {
            let task = root.child(t);
            let beta = sampler.beta(&task);
            sampler.prompt(&task, &beta, 0, n)
        })
        .collect()
}

pub fn run_diagnose(cfg: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<Diagnostics> {
    cfg.validate()?;
    checkpoint.check_compatible(cfg)?;
    let model = checkpoint.model()?;
    let dc = &cfg.diagnose;
    let ge = dc
        .feature_exponent
        .unwrap_or_else(|| generative_exponent(&cfg.link, QUADRATURE_ZERO_TOL));
    let prompts = diagnostic_prompts(cfg, dc.prompts, cfg.diagnose_n());
    let r = cfg.space.r();
    let feature_fit = feature_learning_fit(&model.mamba, model.map, &prompts, r, ge)?;
    let feature_fit_alt = feature_learning_fit(&model.mamba, model.map, &prompts, r, 3 - ge)?;
    let alignment = gamma_alignment(&model.mamba.gamma, model.map, &cfg.space)?;
    let gamma0 = initial_gamma(model.map, cfg.space.d(), checkpoint.training.gamma0_scale);
    let alignment_init = gamma_alignment(&gamma0, model.map, &cfg.space)?;

    let mc = RngStream::new(cfg.seed()).child(stage::MONTE_CARLO);
    let gc = model.mamba.gc;
    let exponent = exponent_reduction_report(&cfg.link, gc, dc.mc_samples, &mc.child(0))?;
    let settings = OracleSettings {
        gamma0_scale: checkpoint.training.gamma0_scale,
        he2_weight: dc.he2_weight,
        eta: 1.0,
        samples: dc.oracle_samples,
    };
    let oracle = gamma_star_oracle(
        &cfg.link,
        gc,
        &cfg.space,
        model.map,
        &settings,
        &mc.child(1),
    )?;
    let eta = checkpoint.training.eta;
    let scaled: Vec<f64> = model.mamba.gamma.iter().map(|g| g / eta).collect();
    let oracle_cosine = cosine_similarity(&scaled, &oracle.prediction);

    let checks = vec![
        Check {
            name: "feature_fit_margin".into(),
            value: feature_fit.margin(),
            threshold: dc.r2_margin,
            passed: feature_fit.margin() >= dc.r2_margin,
        },
        Check {
            name: "alignment_ratio".into(),
            value: alignment.ratio,
            threshold: dc.alignment_ratio,
            passed: alignment.ratio > dc.alignment_ratio,
        },
        Check {
            name: "oracle_cosine".into(),
            value: oracle_cosine,
            threshold: dc.cosine,
            passed: oracle_cosine > dc.cosine,
        },
        Check {
            name: "exponent_reduction".into(),
            value: exponent.first_significant.map_or(f64::NAN, |p| p as f64),
            threshold: exponent.generative_exponent as f64,
            passed: exponent.matches_generative_exponent(),
        },
    ];
    Ok(Diagnostics {
        feature_fit,
        feature_fit_alt,
        alignment,
        alignment_init,
        exponent,
        oracle,
        oracle_cosine,
        checks,
    })
}

// ---------------------------------------------------------------- reports

/// One `report,field,value` line of a diagnostics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub report: String,
    pub field: String,
    pub value: String,
}

impl ReportRecord {
    fn new(report: &str, field: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            report: report.into(),
            field: field.into(),
            value: value.into(),
        }
    }

    fn num(report: &str, field: impl Into<String>, value: f64) -> Self {
        Self::new(report, field, fmt_f64(value))
    }

    /// The value as a float (`nan`, `inf` allowed).
    pub fn as_f64(&self) -> Option<f64> {
        self.value.parse().ok()
    }
}

impl Diagnostics {
    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out = Vec::new();
        for (name, fit) in [
            ("feature_fit", &self.feature_fit),
            ("feature_fit_alt", &self.feature_fit_alt),
        ] {
            out.push(ReportRecord::new(name, "ge_used", fit.ge_used.to_string()));
            out.push(ReportRecord::num(name, "p1", fit.p1));
            out.push(ReportRecord::num(name, "p2", fit.p2));
            out.push(ReportRecord::num(name, "r_squared", fit.r_squared));
            out.push(ReportRecord::num(
                name,
                "baseline_r_squared",
                fit.baseline_r_squared,
            ));
            out.push(ReportRecord::num(name, "residual_rms", fit.residual_rms));
            out.push(ReportRecord::new(name, "samples", fit.samples.to_string()));
        }
        for (name, a) in [
            ("alignment", &self.alignment),
            ("alignment_init", &self.alignment_init),
        ] {
            out.push(ReportRecord::num(
                name,
                "mass_on_feature_slots",
                a.mass_on_feature_slots,
            ));
            out.push(ReportRecord::num(name, "uniform_share", a.uniform_share));
            out.push(ReportRecord::num(name, "ratio", a.ratio));
        }
        let e = &self.exponent;
        out.push(ReportRecord::new(
            "exponent_reduction",
            "information_exponent",
            e.information_exponent.to_string(),
        ));
        out.push(ReportRecord::new(
            "exponent_reduction",
            "generative_exponent",
            e.generative_exponent.to_string(),
        ));
        for (p, c) in e.coefficients.iter().enumerate() {
            out.push(ReportRecord::num(
                "exponent_reduction",
                format!("coeff_{p}"),
                c.estimate,
            ));
            out.push(ReportRecord::num(
                "exponent_reduction",
                format!("coeff_{p}_std_error"),
                c.std_error,
            ));
        }
        out.push(ReportRecord::new(
            "exponent_reduction",
            "first_significant",
            e.first_significant.map_or("none".into(), |p| p.to_string()),
        ));
        let o = &self.oracle;
        for p in 0..=2 {
            out.push(ReportRecord::num(
                "gamma_oracle",
                format!("a_{p}"),
                o.a.coeffs[p],
            ));
        }
        for p in 0..=2 {
            out.push(ReportRecord::num(
                "gamma_oracle",
                format!("b_{p}"),
                o.b.coeffs[p],
            ));
            out.push(ReportRecord::num(
                "gamma_oracle",
                format!("b_{p}_std_error"),
                o.b.estimator_error[p],
            ));
        }
        out.push(ReportRecord::num(
            "gamma_oracle",
            "cosine",
            self.oracle_cosine,
        ));
        for c in &self.checks {
            out.push(ReportRecord::num(
                "check",
                format!("{}.value", c.name),
                c.value,
            ));
            out.push(ReportRecord::num(
                "check",
                format!("{}.threshold", c.name),
                c.threshold,
            ));
            out.push(ReportRecord::new(
                "check",
                format!("{}.passed", c.name),
                c.passed.to_string(),
            ));
        }
        out
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn write_report<W: Write>(out: W, records: &[ReportRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(text: &str) -> Result<Vec<ReportRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("line 1: {e}")))?
        .clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Parse(format!(
            "line 1: expected header `{}`",
            REPORT_HEADER.join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Parse(format!("line {line}: {e}"))
            })
        })
        .collect()
}

// ---------------------------------------------------------------- files

/// Write via a temporary sibling and rename, so readers never see a torn file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
