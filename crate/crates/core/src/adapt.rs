//! Test-time adaptation: with every base weight frozen, tune the per-channel
//! scale/shift layers of each member on slips observed during the current
//! mission.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor};
use crate::dpt::{DptError, DptNetwork, EdgeBatch, Ensemble};
use crate::gridworld::{EdgeId, GridGraph};

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error(transparent)]
    Dpt(#[from] DptError),
    #[error("ensemble must be wrapped with adaptation layers before adapting")]
    NotWrapped,
    #[error("step {step} of map {map} is already in the buffer")]
    Duplicate { map: String, step: usize },
    #[error("edge slot {0} does not exist in the map")]
    InvalidEdge(usize),
}

/// One traversed edge and the slip measured on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub edge: EdgeId,
    pub pitch: f64,
    /// Kept as measured, even beyond +-1.
    pub slip: f64,
    pub map: String,
    /// Index of the traversal step within the mission.
    pub step: usize,
}

/// Insertion-ordered observations of the current mission.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationBuffer {
    records: Vec<Observation>,
}

impl ObservationBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, obs: Observation) -> Result<(), AdaptError> {
        if self.records.iter().any(|r| r.step == obs.step && r.map == obs.map) {
            return Err(AdaptError::Duplicate { map: obs.map, step: obs.step });
        }
        self.records.push(obs);
        Ok(())
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { iters: 10, lr: 1e-3 }
    }
}

/// Buffer losses of one member: index 0 is the state before the call, index
/// `i` the state after `i` optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub member: usize,
    pub losses: Vec<f64>,
    /// Index into `losses` of the state that was kept.
    pub kept: usize,
}

/// Buffer edges in the form the network consumes.
struct BufferBatch {
    src: Vec<u32>,
    dst: Vec<u32>,
    pitch: Vec<f64>,
    target: Vec<f32>,
}

impl BufferBatch {
    fn new(buffer: &ObservationBuffer, graph: &GridGraph) -> Result<Self, AdaptError> {
        let mut b = BufferBatch { src: Vec::new(), dst: Vec::new(), pitch: Vec::new(), target: Vec::new() };
        for r in buffer.records() {
            let t = graph.target(r.edge).ok_or(AdaptError::InvalidEdge(r.edge.slot()))?;
            b.src.push(r.edge.source() as u32);
            b.dst.push(t as u32);
            b.pitch.push(r.pitch);
            b.target.push(r.slip as f32);
        }
        Ok(b)
    }
}

/// Mean NLL of one member on the buffer.
pub fn buffer_loss(net: &DptNetwork, buffer: &ObservationBuffer, colors: &[f32], graph: &GridGraph) -> Result<f64, AdaptError> {
    let b = BufferBatch::new(buffer, graph)?;
    let mut tape = Tape::new();
    let p = [&b.pitch[..]];
    let batch = edge_batch(&b, colors, graph, &p);
    let loss = net.nll(&mut tape, &batch, &b.target)?;
    Ok(tape.value(loss).map_err(DptError::from)?.item().map_err(DptError::from)? as f64)
}

fn edge_batch<'a>(b: &'a BufferBatch, colors: &'a [f32], graph: &GridGraph, pitches: &'a [&'a [f64]]) -> EdgeBatch<'a> {
    EdgeBatch { colors, height: graph.height(), width: graph.width(), src: &b.src, dst: &b.dst, pitches, restrict: true }
}

fn adapt_member(net: &mut DptNetwork, member: usize, b: &BufferBatch, colors: &[f32], graph: &GridGraph, cfg: &AdaptConfig) -> Result<AdaptTrace, AdaptError> {
    let adam = Adam::new(cfg.lr);
    net.store_mut().zero_grad();
    net.store_mut().reset_optimizer();
    let p = [&b.pitch[..]];
    let batch = edge_batch(b, colors, graph, &p);
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(cfg.iters + 1);
    let mut best: (f64, usize, Vec<Tensor<f32>>) = (f64::INFINITY, 0, Vec::new());
    for i in 0..=cfg.iters {
        let loss = net.nll(&mut tape, &batch, &b.target)?;
        let v = tape.value(loss).map_err(DptError::from)?.item().map_err(DptError::from)? as f64;
        losses.push(v);
        if v < best.0 {
            best = (v, i, net.adaptation_snapshot());
        }
        if i == cfg.iters {
            tape.reset();
            break;
        }
        tape.backward(loss, net.store_mut()).map_err(DptError::from)?;
        adam.step(net.store_mut());
    }
    net.restore_adaptation(&best.2);
    net.store_mut().reset_optimizer();
    Ok(AdaptTrace { member, losses, kept: best.1 })
}

/// Runs `cfg.iters` Adam steps per member on the buffer NLL and keeps each
/// member's lowest-loss scale/shift values, the starting values included.
/// Optimizer state starts fresh on every call. An empty buffer is a no-op.
pub fn adaptation_step(
    ensemble: &mut Ensemble,
    buffer: &ObservationBuffer,
    colors: &[f32],
    graph: &GridGraph,
    cfg: &AdaptConfig,
) -> Result<Vec<AdaptTrace>, AdaptError> {
    if ensemble.members.iter().any(|m| !m.is_wrapped()) {
        return Err(AdaptError::NotWrapped);
    }
    if buffer.is_empty() {
        return Ok(Vec::new());
    }
    let b = BufferBatch::new(buffer, graph)?;
    ensemble
        .members
        .par_iter_mut()
        .enumerate()
        .map(|(k, net)| adapt_member(net, k, &b, colors, graph, cfg))
        .collect()
}

/// Restores the identity scale/shift on every member and clears the buffer.
pub fn reset_adaptation(ensemble: &mut Ensemble, buffer: &mut ObservationBuffer) {
    ensemble.reset_adaptation();
    buffer.clear();
}
