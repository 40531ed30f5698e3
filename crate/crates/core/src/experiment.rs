//! Experiment configuration and the stages behind the command line tool.
//!
//! Every stage writes into its own directory under the run root together with
//! a `run.json` holding the resolved config, the tool version and the seeds
//! used, so each output directory can be interpreted on its own.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::dpt::{pretrain, DptConfig, DptError, Ensemble, SlipPrediction, TrainConfig, TrainHistory};
use crate::mission::{self, MissionConfig, MissionError, MissionRun, MetricsReport, SweepEntry};
use crate::riskplan::PlannerConfig;
use crate::terraingen::{build_dataset, derive_seed, load_dataset, save_dataset, Dataset, DatasetConfig, Subset, TerrainError, TerrainInstance};

pub const TOOL: &str = "slipnav";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {path}: {hint}")]
    Missing { path: String, hint: String },
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Dpt(#[from] DptError),
    #[error(transparent)]
    Mission(#[from] MissionError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ExperimentError {
    /// True for problems with the config or the command line rather than
    /// with running the experiment.
    pub fn is_usage(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Missing { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: DptConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: DptConfig::default(), train: TrainConfig { epochs: 12, ..TrainConfig::default() } }
    }
}

/// Before/after adaptation error study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub subsets: Vec<Subset>,
    /// Maps per subset, taken in index order.
    pub maps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { subsets: vec![Subset::InDomain, Subset::Ua, Subset::Uga], maps: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub subset: Subset,
    pub lambdas: Vec<f64>,
    /// Maps taken in index order; 0 means the whole subset.
    pub maps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { subset: Subset::Uga, lambdas: mission::default_lambdas(), maps: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; the training and mission seeds are derived from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub mission: MissionConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            mission: MissionConfig { adaptation: AdaptConfig { lr: 1e-4, ..AdaptConfig::default() }, ..MissionConfig::default() },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|_| ExperimentError::Missing {
            path: path.display().to_string(),
            hint: "config file not found".into(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.dataset.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.model.arch.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let t = &self.model.train;
        if t.members == 0 || t.batch_maps == 0 || t.window < 2 || t.val_window < 2 || !(t.lr > 0.0) {
            return Err(ExperimentError::Config(
                "model.train: members and batch_maps must be positive, windows at least 2, lr positive".into(),
            ));
        }
        self.mission.planner.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let a = &self.mission.adaptation;
        if !(a.lr > 0.0) {
            return Err(ExperimentError::Config("mission.adaptation.lr must be positive".into()));
        }
        for (name, (r, c)) in [("start", self.mission.start), ("goal", self.mission.goal)] {
            if r >= self.dataset.height || c >= self.dataset.width {
                return Err(ExperimentError::Config(format!("mission.{name} ({r}, {c}) lies outside the dataset maps")));
            }
        }
        if self.mission.start == self.mission.goal {
            return Err(ExperimentError::Config("mission.start and mission.goal coincide".into()));
        }
        if self.eval.subsets.iter().chain([&self.sweep.subset]).any(|s| matches!(s, Subset::Train | Subset::Val)) {
            return Err(ExperimentError::Config("eval.subsets and sweep.subset must be test subsets".into()));
        }
        if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(ExperimentError::Config("sweep.lambdas must be non-empty, finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x7452])
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x1417])
    }

    /// Copy with every derived seed filled in, as written next to outputs.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.model.train.seed = self.train_seed();
        c.mission.seed = derive_seed(self.seed, &[0x3155]);
        c
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    init_seed: u64,
    train_seed: u64,
    config: ExperimentConfig,
}

/// Creates `dir` and writes its `run.json`.
pub fn prepare_dir(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let info = RunInfo {
        tool: TOOL,
        version: VERSION,
        command,
        seed: cfg.seed,
        init_seed: cfg.init_seed(),
        train_seed: cfg.train_seed(),
        config: cfg.resolved(),
    };
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&info).expect("run info serializes")).map_err(io_err(&p))
}

fn create(path: &Path) -> Result<fs::File, ExperimentError> {
    fs::File::create(path).map_err(io_err(path))
}

pub fn dataset_dir(root: &Path) -> PathBuf {
    root.join("dataset")
}

pub fn model_dir(root: &Path) -> PathBuf {
    root.join("model")
}

pub fn build_dataset_stage(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset, ExperimentError> {
    let dir = dataset_dir(root);
    prepare_dir(&dir, cfg, "dataset")?;
    let ds = build_dataset(&cfg.dataset, cfg.seed)?;
    save_dataset(&ds, &dir)?;
    Ok(ds)
}

pub fn open_dataset(root: &Path) -> Result<Dataset, ExperimentError> {
    let dir = dataset_dir(root);
    if !dir.join("manifest.json").is_file() {
        return Err(ExperimentError::Missing {
            path: dir.join("manifest.json").display().to_string(),
            hint: "run the `dataset` command first".into(),
        });
    }
    Ok(load_dataset(&dir)?)
}

pub fn train_stage(cfg: &ExperimentConfig, ds: &Dataset, root: &Path) -> Result<(Ensemble, TrainHistory), ExperimentError> {
    let dir = model_dir(root);
    prepare_dir(&dir, cfg, "train")?;
    let mut ens = Ensemble::new(&cfg.model.arch, cfg.model.train.members, cfg.init_seed())?;
    let tc = TrainConfig { seed: cfg.train_seed(), ..cfg.model.train.clone() };
    let hist = pretrain(&mut ens, &ds.split(Subset::Train), &ds.split(Subset::Val), &tc)?;
    ens.save(&dir)?;
    let p = dir.join("history.csv");
    let mut w = csv::Writer::from_writer(create(&p)?);
    w.write_record(["member", "epoch", "train_nll", "val_nll", "kept"])?;
    for (k, h) in hist.members.iter().enumerate() {
        for e in 0..h.train_nll.len() {
            let val = h.val_nll.get(e).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([k.to_string(), e.to_string(), h.train_nll[e].to_string(), val, (e == h.best_epoch).to_string()])?;
        }
    }
    w.flush().map_err(io_err(&p))?;
    Ok((ens, hist))
}

pub fn open_model(root: &Path) -> Result<Ensemble, ExperimentError> {
    let dir = model_dir(root);
    if !dir.join("ensemble.json").is_file() {
        return Err(ExperimentError::Missing {
            path: dir.join("ensemble.json").display().to_string(),
            hint: "run the `train` command first".into(),
        });
    }
    Ok(Ensemble::load(&dir)?)
}

/// Maps of `subset`, the first `limit` of them (all for 0).
pub fn pick<'a>(ds: &'a Dataset, subset: Subset, limit: usize) -> Vec<&'a TerrainInstance> {
    let maps = ds.split(subset);
    let n = if limit == 0 { maps.len() } else { limit.min(maps.len()) };
    maps.into_iter().take(n).collect()
}

/// Per-edge prediction table: one row per valid edge slot.
pub fn write_prediction_csv<W: std::io::Write>(pred: &SlipPrediction, labels: &[f32], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["edge".to_string(), "label".into(), "mean".into(), "aleatoric".into(), "epistemic".into(), "total".into()];
    for k in 0..pred.members() {
        header.push(format!("mu_{k}"));
        header.push(format!("var_{k}"));
    }
    w.write_record(&header)?;
    for i in 0..pred.slots {
        if !pred.mean[i].is_finite() {
            continue;
        }
        let mut row = vec![i.to_string(), labels[i].to_string(), pred.mean[i].to_string(), pred.aleatoric[i].to_string(), pred.epistemic[i].to_string(), pred.total[i].to_string()];
        for k in 0..pred.members() {
            row.push(pred.mu[k][i].to_string());
            row.push(pred.var[k][i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: "prediction csv".into(), source })
}

pub fn predict_stage(cfg: &ExperimentConfig, ens: &Ensemble, ds: &Dataset, subset: Subset, root: &Path) -> Result<PathBuf, ExperimentError> {
    let dir = root.join("predict").join(subset.name());
    prepare_dir(&dir, cfg, &format!("predict --split {}", subset.name()))?;
    for m in ds.split(subset) {
        let pred = ens.predict_instance(m, false)?;
        let p = dir.join(format!("{}.csv", m.stem()));
        write_prediction_csv(&pred, &m.slip, create(&p)?)?;
    }
    Ok(dir)
}

fn lambda_tag(lambda: f64) -> String {
    format!("lambda{lambda}")
}

/// One subset under one planner weight, with or without adaptation. Writes
/// per-mission rows, the aggregate metrics and one trace per mission.
pub fn mission_stage(
    cfg: &ExperimentConfig,
    ens: &Ensemble,
    ds: &Dataset,
    subset: Subset,
    lambda: f64,
    adapt: bool,
    root: &Path,
) -> Result<(MetricsReport, Vec<MissionRun>), ExperimentError> {
    let tag = format!("{}-{}-{}", subset.name(), lambda_tag(lambda), if adapt { "da" } else { "noda" });
    let dir = root.join("mission").join(&tag);
    let adapt_flag = if adapt { "on" } else { "off" };
    prepare_dir(&dir, cfg, &format!("mission --split {} --lambda {lambda} --adapt {adapt_flag}", subset.name()))?;
    let mcfg = MissionConfig { planner: PlannerConfig { lambda, ..cfg.mission.planner.clone() }, adapt, ..cfg.mission.clone() };
    let maps = ds.split(subset);
    let runs = mission::run_missions(&maps, ens, &mcfg)?;
    let rows: Vec<_> = runs.iter().map(|r| r.outcome.clone()).collect();
    let report = mission::aggregate_metrics(&rows)?;
    mission::write_rows_csv(&rows, create(&dir.join("rows.csv"))?)?;
    write_metrics_csv(&report, create(&dir.join("metrics.csv"))?)?;
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;
    for r in &runs {
        r.log.write_csv(create(&traces.join(format!("{}.csv", r.outcome.map)))?)?;
    }
    Ok((report, runs))
}

pub fn write_metrics_csv<W: std::io::Write>(report: &MetricsReport, out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    for (k, v) in report.metric_pairs() {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: "metrics csv".into(), source })
}

pub fn sweep_stage(cfg: &ExperimentConfig, ens: &Ensemble, ds: &Dataset, root: &Path) -> Result<Vec<SweepEntry>, ExperimentError> {
    let subset = cfg.sweep.subset;
    let dir = root.join("sweep").join(subset.name());
    prepare_dir(&dir, cfg, &format!("sweep --split {}", subset.name()))?;
    let maps = pick(ds, subset, cfg.sweep.maps);
    let base = MissionConfig { adapt: false, ..cfg.mission.clone() };
    let sweep = mission::lambda_sweep(&maps, ens, &cfg.sweep.lambdas, &base)?;
    mission::write_sweep_csv(&sweep, create(&dir.join("sweep.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("rows.csv"))?);
    w.write_record(["lambda", "map", "solved", "success", "cause", "total_time_s", "s_max", "steps"])?;
    for s in &sweep {
        for r in &s.report.rows {
            w.write_record([
                s.lambda.to_string(),
                r.map.clone(),
                r.solved.to_string(),
                r.success.to_string(),
                r.cause.name().to_string(),
                r.total_time.map(|t| t.to_string()).unwrap_or_default(),
                r.s_max.map(|t| t.to_string()).unwrap_or_default(),
                r.steps.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&dir))?;
    Ok(sweep)
}

/// Average ranks (ties share the mean rank), 0-based.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant or the
/// lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(c / (va * vb).sqrt())
}

/// Rank correlation between per-edge absolute error and predicted total
/// standard deviation over the labeled edges of one map.
pub fn error_uncertainty_correlation(pred: &SlipPrediction, labels: &[f32]) -> Option<f64> {
    let mut err = Vec::new();
    let mut sd = Vec::new();
    for i in 0..pred.slots {
        if labels[i].is_finite() && pred.mean[i].is_finite() {
            err.push((pred.mean[i] - labels[i] as f64).abs());
            sd.push(pred.total[i].sqrt());
        }
    }
    spearman(&err, &sd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subset: Subset,
    pub map: String,
    pub steps: usize,
    pub cause: String,
    pub mae_before: f64,
    pub mae_after: f64,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub subset: Subset,
    pub maps: usize,
    pub mae_before: f64,
    pub mae_before_std: f64,
    pub mae_after: f64,
    pub mae_after_std: f64,
    /// Relative change of the mean MAE in percent (negative is better).
    pub change_pct: f64,
    pub spearman: Option<f64>,
}

pub fn summarize_eval(rows: &[EvalRow], subset: Subset) -> Option<EvalSummary> {
    let r: Vec<&EvalRow> = rows.iter().filter(|r| r.subset == subset).collect();
    if r.is_empty() {
        return None;
    }
    let before = mission::Summary::of(&r.iter().map(|x| x.mae_before).collect::<Vec<_>>())?;
    let after = mission::Summary::of(&r.iter().map(|x| x.mae_after).collect::<Vec<_>>())?;
    let rho: Vec<f64> = r.iter().filter_map(|x| x.spearman).collect();
    Some(EvalSummary {
        subset,
        maps: r.len(),
        mae_before: before.mean,
        mae_before_std: before.std,
        mae_after: after.mean,
        mae_after_std: after.std,
        change_pct: 100.0 * (after.mean - before.mean) / before.mean,
        spearman: (!rho.is_empty()).then(|| rho.iter().sum::<f64>() / rho.len() as f64),
    })
}

/// Whole-map error before adaptation and after the last in-mission
/// adaptation step, plus the error/uncertainty rank correlation of the
/// initial prediction.
pub fn eval_stage(cfg: &ExperimentConfig, ens: &Ensemble, ds: &Dataset, root: &Path) -> Result<Vec<EvalSummary>, ExperimentError> {
    let dir = root.join("eval");
    prepare_dir(&dir, cfg, "eval")?;
    let mcfg = MissionConfig { adapt: true, ..cfg.mission.clone() };
    let mut rows = Vec::new();
    for &subset in &cfg.eval.subsets {
        let maps = pick(ds, subset, cfg.eval.maps);
        let part: Vec<Result<EvalRow, ExperimentError>> = maps
            .par_iter()
            .map(|m| {
                let pred = ens.predict_instance(m, false)?;
                let run = mission::run_mission(m, ens, &mcfg)?;
                Ok(EvalRow {
                    subset,
                    map: m.stem(),
                    steps: run.outcome.steps,
                    cause: run.outcome.cause.name().into(),
                    mae_before: run.mae_before,
                    mae_after: run.mae_after,
                    spearman: error_uncertainty_correlation(&pred, &m.slip),
                })
            })
            .collect();
        for r in part {
            rows.push(r?);
        }
    }
    let mut w = csv::Writer::from_writer(create(&dir.join("rows.csv"))?);
    w.write_record(["subset", "map", "steps", "cause", "mae_before", "mae_after", "spearman"])?;
    for r in &rows {
        w.write_record([
            r.subset.name().to_string(),
            r.map.clone(),
            r.steps.to_string(),
            r.cause.clone(),
            r.mae_before.to_string(),
            r.mae_after.to_string(),
            r.spearman.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(&dir))?;
    let summaries: Vec<EvalSummary> = cfg.eval.subsets.iter().filter_map(|&s| summarize_eval(&rows, s)).collect();
    let mut w = csv::Writer::from_writer(create(&dir.join("mae.csv"))?);
    w.write_record(["subset", "maps", "mae_before", "mae_before_std", "mae_after", "mae_after_std", "change_pct", "spearman"])?;
    for s in &summaries {
        w.write_record([
            s.subset.name().to_string(),
            s.maps.to_string(),
            s.mae_before.to_string(),
            s.mae_before_std.to_string(),
            s.mae_after.to_string(),
            s.mae_after_std.to_string(),
            s.change_pct.to_string(),
            s.spearman.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(&dir))?;
    Ok(summaries)
}

/// Everything one full run produces in memory.
pub struct PipelineOutput {
    pub history: TrainHistory,
    pub eval: Vec<EvalSummary>,
    pub sweep: Vec<SweepEntry>,
}

/// Dataset, training, adaptation study and planner sweep, in that order.
pub fn run_pipeline(cfg: &ExperimentConfig, root: &Path) -> Result<PipelineOutput, ExperimentError> {
    cfg.validate()?;
    prepare_dir(root, cfg, "pipeline")?;
    let ds = build_dataset_stage(cfg, root)?;
    let (ens, history) = train_stage(cfg, &ds, root)?;
    let eval = eval_stage(cfg, &ens, &ds, root)?;
    let sweep = sweep_stage(cfg, &ens, &ds, root)?;
    Ok(PipelineOutput { history, eval, sweep })
}

/// Relative paths of the metrics tables a pipeline run writes.
pub fn metrics_files(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let sweep = Path::new("sweep").join(cfg.sweep.subset.name());
    vec![
        PathBuf::from("model/history.csv"),
        PathBuf::from("eval/mae.csv"),
        PathBuf::from("eval/rows.csv"),
        sweep.join("sweep.csv"),
        sweep.join("rows.csv"),
    ]
}
