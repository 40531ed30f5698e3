use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DptError, DptNetwork, EdgeBatch, Ensemble};
use crate::autodiff::{Adam, Tape};
use crate::gridworld::{Direction, EdgeId, GridGraph};
use crate::terraingen::{derive_seed, TerrainInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub members: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Maps per Adam step.
    pub batch_maps: usize,
    /// Side of the random node window drawn from each training map per step.
    pub window: usize,
    /// Side of the fixed centered window used for validation.
    pub val_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { members: 5, epochs: 30, lr: 1e-3, batch_maps: 8, window: 16, val_window: 24, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MemberHistory {
    /// Edge-weighted NLL on the fixed training windows, index 0 before training.
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub members: Vec<MemberHistory>,
}

struct MapData<'a> {
    colors: Vec<f32>,
    graph: GridGraph,
    labels: &'a [f32],
}

struct Window {
    src: Vec<u32>,
    dst: Vec<u32>,
    pitch: Vec<f64>,
    target: Vec<f32>,
}

impl MapData<'_> {
    fn window(&self, r0: usize, c0: usize, side: usize) -> Window {
        let g = &self.graph;
        let mut w = Window { src: Vec::new(), dst: Vec::new(), pitch: Vec::new(), target: Vec::new() };
        for r in r0..(r0 + side).min(g.height()) {
            for c in c0..(c0 + side).min(g.width()) {
                let v = g.node(r, c);
                for d in Direction::ALL {
                    let e = EdgeId::new(v, d);
                    let (Some(t), l) = (g.target(e), self.labels[e.slot()]) else { continue };
                    if !l.is_finite() {
                        continue;
                    }
                    w.src.push(v as u32);
                    w.dst.push(t as u32);
                    w.pitch.push(g.pitch(e));
                    w.target.push(l);
                }
            }
        }
        w
    }

    fn centered(&self, side: usize) -> Window {
        let r0 = self.graph.height().saturating_sub(side) / 2;
        let c0 = self.graph.width().saturating_sub(side) / 2;
        self.window(r0, c0, side)
    }

    fn random(&self, side: usize, rng: &mut ChaCha8Rng) -> Window {
        let r0 = rng.gen_range(0..=self.graph.height().saturating_sub(side));
        let c0 = rng.gen_range(0..=self.graph.width().saturating_sub(side));
        self.window(r0, c0, side)
    }
}

fn prepare<'a>(maps: &[&'a TerrainInstance]) -> Vec<MapData<'a>> {
    maps.par_iter().map(|m| MapData { colors: m.colors_f32(), graph: m.graph(), labels: &m.slip }).collect()
}

fn batch_of<'a>(map: &'a MapData, w: &'a Window, pitches: &'a [&'a [f64]]) -> EdgeBatch<'a> {
    EdgeBatch {
        colors: &map.colors,
        height: map.graph.height(),
        width: map.graph.width(),
        src: &w.src,
        dst: &w.dst,
        pitches,
        restrict: true,
    }
}

/// Edge-weighted mean NLL over fixed windows.
fn eval_nll(net: &DptNetwork, data: &[(&MapData, Window)]) -> Result<f64, DptError> {
    let mut tape = Tape::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (map, w) in data {
        if w.target.is_empty() {
            continue;
        }
        let p = [&w.pitch[..]];
        let loss = net.nll(&mut tape, &batch_of(map, w, &p), &w.target)?;
        sum += tape.value(loss)?.item()? as f64 * w.target.len() as f64;
        n += w.target.len();
        tape.reset();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn train_member(
    net: &mut DptNetwork,
    member: usize,
    train: &[MapData],
    val: &[MapData],
    cfg: &TrainConfig,
) -> Result<MemberHistory, DptError> {
    let diverged = |epoch: usize, e: DptError| DptError::Diverged { member, epoch, detail: e.to_string() };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[member as u64, 1]));
    let probe: Vec<(&MapData, Window)> = train.iter().take(16).map(|m| (m, m.centered(cfg.val_window))).collect();
    let val_windows: Vec<(&MapData, Window)> = val.iter().map(|m| (m, m.centered(cfg.val_window))).collect();
    // Without validation maps, selection falls back to the training probe.
    let select = |net: &DptNetwork| if val_windows.is_empty() { eval_nll(net, &probe) } else { eval_nll(net, &val_windows) };
    let adam = Adam::new(cfg.lr);
    let mut hist = MemberHistory::default();
    hist.train_nll.push(eval_nll(net, &probe).map_err(|e| diverged(0, e))?);
    let v0 = select(net).map_err(|e| diverged(0, e))?;
    hist.val_nll.push(v0);
    let mut best = (v0, 0usize, net.store().snapshot());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_maps.max(1)) {
            let windows: Vec<Window> = chunk.iter().map(|&i| train[i].random(cfg.window, &mut rng)).collect();
            let total: usize = windows.iter().map(|w| w.target.len()).sum();
            if total == 0 {
                continue;
            }
            for (&i, w) in chunk.iter().zip(&windows) {
                if w.target.is_empty() {
                    continue;
                }
                let p = [&w.pitch[..]];
                let step = (|| {
                    let loss = net.nll(&mut tape, &batch_of(&train[i], w, &p), &w.target)?;
                    let scaled = tape.mul_scalar(loss, w.target.len() as f64 / total as f64)?;
                    tape.backward(scaled, net.store_mut())?;
                    Ok::<_, DptError>(())
                })();
                if let Err(e) = step {
                    tape.reset();
                    return Err(diverged(epoch, e));
                }
            }
            adam.step(net.store_mut());
        }
        hist.train_nll.push(eval_nll(net, &probe).map_err(|e| diverged(epoch, e))?);
        let v = select(net).map_err(|e| diverged(epoch, e))?;
        hist.val_nll.push(v);
        if v < best.0 {
            best = (v, epoch, net.store().snapshot());
        }
    }
    net.store_mut().restore(&best.2)?;
    net.store_mut().reset_optimizer();
    hist.best_epoch = best.1;
    Ok(hist)
}

/// Trains every member independently on random windows of the training maps,
/// keeping each member's weights from its lowest validation-NLL epoch
/// (epoch 0 is the initialization).
pub fn pretrain(ensemble: &mut Ensemble, train: &[&TerrainInstance], val: &[&TerrainInstance], cfg: &TrainConfig) -> Result<TrainHistory, DptError> {
    if train.is_empty() {
        return Err(DptError::Input("no training maps".into()));
    }
    let train_data = prepare(train);
    let val_data = prepare(val);
    let results: Vec<Result<MemberHistory, DptError>> = ensemble
        .members
        .par_iter_mut()
        .enumerate()
        .map(|(k, net)| train_member(net, k, &train_data, &val_data, cfg))
        .collect();
    let mut hist = TrainHistory::default();
    for (k, r) in results.into_iter().enumerate() {
        let h = r?;
        ensemble.best_epoch[k] = Some(h.best_epoch);
        hist.members.push(h);
    }
    Ok(hist)
}
