//! Mission execution against ground-truth slips, the plan/execute/adapt/replan
//! loop, and the aggregate metrics.
//!
//! The rover observes the stored per-edge label, never the latent slip curve.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adaptation_step, AdaptConfig, AdaptError, AdaptTrace, Observation, ObservationBuffer};
use crate::dpt::{abs_error_sum, DptError, Ensemble, SlipPrediction};
use crate::gridworld::{EdgeId, GridGraph};
use crate::riskplan::{a_star, build_cost_field, slip_to_velocity, PlanResult, PlannerConfig, RiskError};
use crate::terraingen::TerrainInstance;

#[derive(Debug, thiserror::Error)]
pub enum MissionError {
    #[error("invalid mission config: {0}")]
    Config(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Dpt(#[from] DptError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("edge {edge} does not leave node {node}")]
    NotOutgoing { edge: usize, node: usize },
    #[error("no mission outcomes to aggregate")]
    Empty,
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionConfig {
    /// `(row, col)` of the start node.
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub planner: PlannerConfig,
    pub adapt: bool,
    pub adaptation: AdaptConfig,
    /// Replan after every step even without adaptation. Predictions do not
    /// change then, so this only matters for ablations.
    pub replan_every_step: bool,
    pub seed: u64,
}

impl Default for MissionConfig {
    fn default() -> Self {
        MissionConfig {
            start: (8, 8),
            goal: (40, 40),
            planner: PlannerConfig::default(),
            adapt: false,
            adaptation: AdaptConfig::default(),
            replan_every_step: false,
            seed: 0,
        }
    }
}

impl MissionConfig {
    pub fn validate(&self, graph: &GridGraph) -> Result<(usize, usize), MissionError> {
        self.planner.validate()?;
        for (name, (r, c)) in [("start", self.start), ("goal", self.goal)] {
            if r >= graph.height() || c >= graph.width() {
                return Err(MissionError::Config(format!(
                    "{name} ({r}, {c}) is outside the {}x{} grid",
                    graph.height(),
                    graph.width()
                )));
            }
        }
        if self.start == self.goal {
            return Err(MissionError::Config("start and goal coincide".into()));
        }
        Ok((graph.node(self.start.0, self.start.1), graph.node(self.goal.0, self.goal.1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ReachedGoal,
    Immobilized,
    Dyscontrol,
    NoPlan,
    /// Replanning kept the rover moving for more steps than the grid has
    /// edge slots.
    StepLimit,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::ReachedGoal => "reached-goal",
            Termination::Immobilized => "immobilized",
            Termination::Dyscontrol => "dyscontrol",
            Termination::NoPlan => "no-plan",
            Termination::StepLimit => "step-limit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraverseStep {
    pub edge: EdgeId,
    pub source: usize,
    pub target: usize,
    pub pitch: f64,
    pub slip: f64,
    /// Seconds; absent when the rover failed on this edge.
    pub time: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraverseLog {
    pub steps: Vec<TraverseStep>,
    pub total_time: f64,
    pub cause: Option<Termination>,
}

impl TraverseLog {
    /// Columns `step,edge,source,target,pitch,slip,time,elapsed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MissionError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "edge", "source", "target", "pitch", "slip", "time", "elapsed"])?;
        let mut elapsed = 0.0;
        for (i, s) in self.steps.iter().enumerate() {
            elapsed += s.time.unwrap_or(0.0);
            w.write_record([
                i.to_string(),
                s.edge.slot().to_string(),
                s.source.to_string(),
                s.target.to_string(),
                s.pitch.to_string(),
                s.slip.to_string(),
                s.time.map(|t| t.to_string()).unwrap_or_default(),
                elapsed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Position and clock of the rover.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoverState {
    pub node: usize,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub step: TraverseStep,
    pub state: RoverState,
    /// Set when the rover failed on this edge.
    pub failure: Option<Termination>,
}

/// Drives over `edge` and observes its stored slip label.
pub fn execute_step(state: RoverState, edge: EdgeId, map: &TerrainInstance, graph: &GridGraph, u_ref: f64) -> Result<StepResult, MissionError> {
    let target = match graph.target(edge) {
        Some(t) if edge.source() == state.node => t,
        _ => return Err(MissionError::NotOutgoing { edge: edge.slot(), node: state.node }),
    };
    let slip = map.slip[edge.slot()] as f64;
    let step = |time| TraverseStep { edge, source: state.node, target, pitch: graph.pitch(edge), slip, time };
    let failure = if slip >= 1.0 {
        Some(Termination::Immobilized)
    } else if slip <= -1.0 {
        Some(Termination::Dyscontrol)
    } else {
        None
    };
    if failure.is_some() {
        return Ok(StepResult { step: step(None), state, failure });
    }
    let t = graph.length(edge) / slip_to_velocity(slip, u_ref)?;
    Ok(StepResult { step: step(Some(t)), state: RoverState { node: target, time: state.time + t }, failure: None })
}

/// Per-instance result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionOutcome {
    pub map: String,
    /// An initial plan existed.
    pub solved: bool,
    pub success: bool,
    pub cause: Termination,
    /// Seconds, successful missions only.
    pub total_time: Option<f64>,
    /// Largest observed slip, absent when no edge was driven.
    pub s_max: Option<f64>,
    pub steps: usize,
    pub replans: usize,
}

#[derive(Clone, Debug)]
pub struct MissionRun {
    pub outcome: MissionOutcome,
    pub log: TraverseLog,
    pub initial_plan: PlanResult,
    /// Adaptation traces, one entry per step.
    pub adaptation: Vec<Vec<AdaptTrace>>,
    /// Whole-map MAE (x100) of the prediction the mission started with.
    pub mae_before: f64,
    /// Whole-map MAE (x100) of the last prediction made during the mission.
    pub mae_after: f64,
}

pub fn prediction_mae(pred: &SlipPrediction, map: &TerrainInstance) -> f64 {
    let (s, n) = abs_error_sum(pred, &map.slip);
    if n == 0 {
        0.0
    } else {
        100.0 * s / n as f64
    }
}

/// Runs one mission. With adaptation on, a private copy of the ensemble is
/// wrapped (if needed), reset, and adapted after every step; the rover then
/// replans from where it stands.
pub fn run_mission(map: &TerrainInstance, ensemble: &Ensemble, cfg: &MissionConfig) -> Result<MissionRun, MissionError> {
    let graph = map.graph();
    let colors = map.colors_f32();
    let pred = ensemble.predict_map(&colors, &graph, true)?;
    if !cfg.adapt {
        return run_with_prediction(map, &graph, &pred, cfg);
    }
    let (start, goal) = cfg.validate(&graph)?;
    let mut ens = ensemble.clone();
    if !ens.members.iter().all(|m| m.is_wrapped()) {
        ens.wrap_with_adaptation()?;
    }
    ens.reset_adaptation();
    let mae_before = prediction_mae(&pred, map);
    let mut mae_after = mae_before;
    let field = build_cost_field(&pred, &graph, &cfg.planner)?;
    let initial_plan = a_star(&graph, &field, start, goal)?;
    let mut run = Loop::new(map, initial_plan.clone());
    let mut buffer = ObservationBuffer::new();
    let mut traces = Vec::new();
    if initial_plan.solved {
        let mut plan = initial_plan.path.clone();
        let mut i = 0;
        let limit = graph.slot_count();
        loop {
            let edge = graph.edge_between(plan[i], plan[i + 1]).expect("plans follow grid edges");
            if run.drive(edge, &graph, cfg)? {
                break;
            }
            let last = run.log.steps.last().unwrap();
            buffer.push(Observation { edge, pitch: last.pitch, slip: last.slip, map: map.stem(), step: run.log.steps.len() - 1 })?;
            traces.push(adaptation_step(&mut ens, &buffer, &colors, &graph, &cfg.adaptation)?);
            let pred = ens.predict_map(&colors, &graph, true)?;
            mae_after = prediction_mae(&pred, map);
            let field = build_cost_field(&pred, &graph, &cfg.planner)?;
            let replan = a_star(&graph, &field, run.state.node, goal)?;
            run.replans += 1;
            if !replan.solved {
                run.log.cause = Some(Termination::NoPlan);
                break;
            }
            if run.log.steps.len() >= limit {
                run.log.cause = Some(Termination::StepLimit);
                break;
            }
            plan = replan.path;
            i = 0;
        }
    }
    Ok(MissionRun { outcome: run.outcome(), log: run.log, initial_plan, adaptation: traces, mae_before, mae_after })
}

struct Loop<'a> {
    map: &'a TerrainInstance,
    state: RoverState,
    log: TraverseLog,
    goal: Option<usize>,
    solved: bool,
    replans: usize,
}

impl<'a> Loop<'a> {
    fn new(map: &'a TerrainInstance, plan: PlanResult) -> Self {
        let start = plan.path.first().copied().unwrap_or(0);
        let mut log = TraverseLog::default();
        if !plan.solved {
            log.cause = Some(Termination::NoPlan);
        }
        Loop { map, state: RoverState { node: start, time: 0.0 }, log, goal: plan.path.last().copied(), solved: plan.solved, replans: 0 }
    }

    /// Drives one edge; true when the mission ended.
    fn drive(&mut self, edge: EdgeId, graph: &GridGraph, cfg: &MissionConfig) -> Result<bool, MissionError> {
        let r = execute_step(self.state, edge, self.map, graph, cfg.planner.u_ref)?;
        self.log.steps.push(r.step);
        self.state = r.state;
        self.log.total_time = r.state.time;
        if let Some(f) = r.failure {
            self.log.cause = Some(f);
            return Ok(true);
        }
        if Some(self.state.node) == self.goal {
            self.log.cause = Some(Termination::ReachedGoal);
            return Ok(true);
        }
        Ok(false)
    }

    fn outcome(&self) -> MissionOutcome {
        let cause = self.log.cause.unwrap_or(Termination::NoPlan);
        let success = cause == Termination::ReachedGoal;
        let s_max = self.log.steps.iter().map(|s| s.slip).reduce(f64::max);
        MissionOutcome {
            map: self.map.stem(),
            solved: self.solved,
            success,
            cause,
            total_time: success.then_some(self.log.total_time),
            s_max,
            steps: self.log.steps.len(),
            replans: self.replans,
        }
    }
}

/// Mission without adaptation on a precomputed prediction (which must carry
/// the zero-pitch query). The initial plan is followed to the end unless
/// `replan_every_step` is set.
pub fn run_with_prediction(map: &TerrainInstance, graph: &GridGraph, pred: &SlipPrediction, cfg: &MissionConfig) -> Result<MissionRun, MissionError> {
    let (start, goal) = cfg.validate(graph)?;
    let field = build_cost_field(pred, graph, &cfg.planner)?;
    let initial_plan = a_star(graph, &field, start, goal)?;
    let mut run = Loop::new(map, initial_plan.clone());
    if initial_plan.solved {
        let mut plan = initial_plan.path.clone();
        let mut i = 0;
        loop {
            let edge = graph.edge_between(plan[i], plan[i + 1]).expect("plans follow grid edges");
            if run.drive(edge, graph, cfg)? {
                break;
            }
            if cfg.replan_every_step {
                let r = a_star(graph, &field, run.state.node, goal)?;
                run.replans += 1;
                if !r.solved {
                    run.log.cause = Some(Termination::NoPlan);
                    break;
                }
                plan = r.path;
                i = 0;
            } else {
                i += 1;
            }
        }
    }
    let mae = prediction_mae(pred, map);
    Ok(MissionRun { outcome: run.outcome(), log: run.log, initial_plan, adaptation: Vec::new(), mae_before: mae, mae_after: mae })
}

/// Mean and spread of a metric; `std` is the population form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 { sorted[m / 2] } else { (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0 };
        Some(Summary { mean, std, median })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub solved: usize,
    pub succeeded: usize,
    /// Percent of instances reaching the goal.
    pub suc: f64,
    /// Percent of instances with an initial plan.
    pub sol: f64,
    /// Percent of solved instances that succeeded.
    pub sol_suc: Option<f64>,
    /// Minutes, successful missions only.
    pub t_total: Option<Summary>,
    /// Percent; over every mission that drove at least one edge, failures
    /// included.
    pub s_max: Option<Summary>,
    pub rows: Vec<MissionOutcome>,
}

pub fn aggregate_metrics(outcomes: &[MissionOutcome]) -> Result<MetricsReport, MissionError> {
    if outcomes.is_empty() {
        return Err(MissionError::Empty);
    }
    let n = outcomes.len();
    let solved = outcomes.iter().filter(|o| o.solved).count();
    let succeeded = outcomes.iter().filter(|o| o.success).count();
    let times: Vec<f64> = outcomes.iter().filter_map(|o| o.total_time).map(|t| t / 60.0).collect();
    let slips: Vec<f64> = outcomes.iter().filter_map(|o| o.s_max).map(|s| 100.0 * s).collect();
    Ok(MetricsReport {
        instances: n,
        solved,
        succeeded,
        suc: 100.0 * succeeded as f64 / n as f64,
        sol: 100.0 * solved as f64 / n as f64,
        sol_suc: (solved > 0).then(|| 100.0 * succeeded as f64 / solved as f64),
        t_total: Summary::of(&times),
        s_max: Summary::of(&slips),
        rows: outcomes.to_vec(),
    })
}

impl MetricsReport {
    /// `(metric, value)` pairs in a fixed order; absent values are omitted.
    pub fn metric_pairs(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("sol", self.sol), ("suc", self.suc)];
        v.extend(self.sol_suc.map(|x| ("sol_suc", x)));
        if let Some(t) = self.t_total {
            v.extend([("t_total_mean_min", t.mean), ("t_total_std_min", t.std), ("t_total_median_min", t.median)]);
        }
        if let Some(s) = self.s_max {
            v.extend([("s_max_mean_pct", s.mean), ("s_max_std_pct", s.std)]);
        }
        v
    }
}

/// Columns `map,solved,success,cause,total_time_s,s_max,steps,replans`.
pub fn write_rows_csv<W: Write>(rows: &[MissionOutcome], out: W) -> Result<(), MissionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["map", "solved", "success", "cause", "total_time_s", "s_max", "steps", "replans"])?;
    for o in rows {
        w.write_record([
            o.map.clone(),
            o.solved.to_string(),
            o.success.to_string(),
            o.cause.name().to_string(),
            o.total_time.map(|t| t.to_string()).unwrap_or_default(),
            o.s_max.map(|t| t.to_string()).unwrap_or_default(),
            o.steps.to_string(),
            o.replans.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_rows_csv`].
pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<MissionOutcome>, MissionError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |f: &str| MissionError::Config(format!("malformed {f} in mission row {:?}", rec.position().map(|p| p.line())));
        let opt = |s: &str| -> Result<Option<f64>, MissionError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("number"))
            }
        };
        let cause = match &rec[3] {
            "reached-goal" => Termination::ReachedGoal,
            "immobilized" => Termination::Immobilized,
            "dyscontrol" => Termination::Dyscontrol,
            "no-plan" => Termination::NoPlan,
            "step-limit" => Termination::StepLimit,
            _ => return Err(bad("cause")),
        };
        rows.push(MissionOutcome {
            map: rec[0].to_string(),
            solved: rec[1].parse().map_err(|_| bad("solved"))?,
            success: rec[2].parse().map_err(|_| bad("success"))?,
            cause,
            total_time: opt(&rec[4])?,
            s_max: opt(&rec[5])?,
            steps: rec[6].parse().map_err(|_| bad("steps"))?,
            replans: rec[7].parse().map_err(|_| bad("replans"))?,
        });
    }
    Ok(rows)
}

/// The risk weights of the parameter study.
pub fn default_lambdas() -> Vec<f64> {
    (0..7).map(|k| 0.5 * k as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub report: MetricsReport,
}

/// One evaluation per risk weight, without adaptation. Each map is predicted
/// once and replanned for every weight.
pub fn lambda_sweep(maps: &[&TerrainInstance], ensemble: &Ensemble, lambdas: &[f64], base: &MissionConfig) -> Result<Vec<SweepEntry>, MissionError> {
    let per_map: Vec<Vec<MissionOutcome>> = maps
        .par_iter()
        .map(|m| {
            let graph = m.graph();
            let pred = ensemble.predict_map(&m.colors_f32(), &graph, true)?;
            lambdas
                .iter()
                .map(|&l| {
                    let cfg = MissionConfig { adapt: false, planner: PlannerConfig { lambda: l, ..base.planner.clone() }, ..base.clone() };
                    Ok(run_with_prediction(m, &graph, &pred, &cfg)?.outcome)
                })
                .collect::<Result<Vec<_>, MissionError>>()
        })
        .collect::<Result<_, _>>()?;
    lambdas
        .iter()
        .enumerate()
        .map(|(k, &lambda)| {
            let rows: Vec<MissionOutcome> = per_map.iter().map(|o| o[k].clone()).collect();
            Ok(SweepEntry { lambda, report: aggregate_metrics(&rows)? })
        })
        .collect()
}

/// Columns `lambda,metric,value`.
pub fn write_sweep_csv<W: Write>(entries: &[SweepEntry], out: W) -> Result<(), MissionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "metric", "value"])?;
    for e in entries {
        for (name, v) in e.report.metric_pairs() {
            w.write_record([e.lambda.to_string(), name.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every map with the same config, in parallel.
pub fn run_missions(maps: &[&TerrainInstance], ensemble: &Ensemble, cfg: &MissionConfig) -> Result<Vec<MissionRun>, MissionError> {
    maps.par_iter().map(|m| run_mission(m, ensemble, cfg)).collect()
}
