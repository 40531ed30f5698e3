//! Deep probabilistic traversability: an ensemble of networks that map a
//! color image and an edge pitch to a Gaussian over slip, combined into a
//! mixture whose variance splits into aleatoric and epistemic parts.

mod network;
mod train;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use network::{slope_embedding, DptConfig, DptNetwork, EdgeBatch, EdgeOutputs, VAR_FLOOR};
pub use train::{pretrain, MemberHistory, TrainConfig, TrainHistory};

use crate::autodiff::{checkpoint, AutodiffError};
use crate::gridworld::{EdgeId, GridGraph};
use crate::terraingen::{derive_seed, TerrainInstance};

#[derive(Debug, thiserror::Error)]
pub enum DptError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("network is already wrapped with adaptation layers")]
    AlreadyWrapped,
    #[error("member {member} diverged in epoch {epoch}: {detail}")]
    Diverged { member: usize, epoch: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed ensemble manifest {path}: {source}")]
    Manifest { path: String, source: serde_json::Error },
}

/// Mixture moments of equally weighted Gaussians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    /// Mean of member variances.
    pub aleatoric: f64,
    /// Variance of member means (population form).
    pub epistemic: f64,
    pub total: f64,
}

pub fn mixture_moments(mu: &[f64], var: &[f64]) -> Moments {
    let m = mu.len() as f64;
    let mean = mu.iter().sum::<f64>() / m;
    let aleatoric = var.iter().sum::<f64>() / m;
    let epistemic = mu.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    Moments { mean, aleatoric, epistemic, total: aleatoric + epistemic }
}

/// Ensemble output for every edge slot of one map. Slots that leave the grid
/// hold NaN.
#[derive(Clone, Debug)]
pub struct SlipPrediction {
    pub slots: usize,
    /// Per member, per slot.
    pub mu: Vec<Vec<f32>>,
    pub var: Vec<Vec<f32>>,
    pub mean: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
    /// Mixture mean of the same edge queried at zero pitch.
    pub flat_mean: Option<Vec<f64>>,
}

impl SlipPrediction {
    pub fn members(&self) -> usize {
        self.mu.len()
    }

    pub fn moments(&self, e: EdgeId) -> Moments {
        let s = e.slot();
        Moments { mean: self.mean[s], aleatoric: self.aleatoric[s], epistemic: self.epistemic[s], total: self.total[s] }
    }

    fn from_members(slots: usize, valid: &[usize], per_member: Vec<Vec<(Vec<f32>, Vec<f32>)>>) -> Self {
        let m = per_member.len();
        let mut mu = vec![vec![f32::NAN; slots]; m];
        let mut var = vec![vec![f32::NAN; slots]; m];
        let with_flat = per_member.first().is_some_and(|p| p.len() > 1);
        let mut flat = with_flat.then(|| vec![f64::NAN; slots]);
        for (k, outs) in per_member.iter().enumerate() {
            for (i, &s) in valid.iter().enumerate() {
                mu[k][s] = outs[0].0[i];
                var[k][s] = outs[0].1[i];
            }
        }
        let mut mean = vec![f64::NAN; slots];
        let mut alea = vec![f64::NAN; slots];
        let mut epi = vec![f64::NAN; slots];
        let mut total = vec![f64::NAN; slots];
        let mut mus = vec![0.0; m];
        let mut vars = vec![0.0; m];
        for (i, &s) in valid.iter().enumerate() {
            for k in 0..m {
                mus[k] = mu[k][s] as f64;
                vars[k] = var[k][s] as f64;
            }
            let mo = mixture_moments(&mus, &vars);
            mean[s] = mo.mean;
            alea[s] = mo.aleatoric;
            epi[s] = mo.epistemic;
            total[s] = mo.total;
            if let Some(f) = flat.as_mut() {
                f[s] = per_member.iter().map(|o| o[1].0[i] as f64).sum::<f64>() / m as f64;
            }
        }
        SlipPrediction { slots, mu, var, mean, aleatoric: alea, epistemic: epi, total, flat_mean: flat }
    }
}

/// Every valid edge of `graph` in slot order as `(slots, src, dst, pitch)`.
pub fn edge_lists(graph: &GridGraph) -> (Vec<usize>, Vec<u32>, Vec<u32>, Vec<f64>) {
    let mut slots = Vec::new();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut pitch = Vec::new();
    for e in graph.edges() {
        slots.push(e.id.slot());
        src.push(e.source as u32);
        dst.push(e.target as u32);
        pitch.push(e.pitch);
    }
    (slots, src, dst, pitch)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MemberRecord {
    index: usize,
    seed: u64,
    best_epoch: Option<usize>,
    stem: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnsembleManifest {
    format: u32,
    config: DptConfig,
    members: Vec<MemberRecord>,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<DptNetwork>,
    /// Epoch whose weights were kept, per member, once trained.
    pub best_epoch: Vec<Option<usize>>,
}

impl Ensemble {
    /// `m` freshly initialized members with seeds derived from `seed`.
    pub fn new(config: &DptConfig, m: usize, seed: u64) -> Result<Self, DptError> {
        if m == 0 {
            return Err(DptError::Config("ensemble needs at least one member".into()));
        }
        let members = (0..m).map(|k| DptNetwork::new(config, derive_seed(seed, &[k as u64]))).collect::<Result<Vec<_>, _>>()?;
        Ok(Ensemble { members, best_epoch: vec![None; m] })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn config(&self) -> &DptConfig {
        self.members[0].config()
    }

    /// Predictions for every edge of the map. With `with_flat`, each edge is
    /// also queried at zero pitch.
    pub fn predict_map(&self, colors: &[f32], graph: &GridGraph, with_flat: bool) -> Result<SlipPrediction, DptError> {
        let (valid, src, dst, pitch) = edge_lists(graph);
        let zeros = vec![0.0; pitch.len()];
        let pitches: Vec<&[f64]> = if with_flat { vec![&pitch, &zeros] } else { vec![&pitch] };
        let batch = EdgeBatch { colors, height: graph.height(), width: graph.width(), src: &src, dst: &dst, pitches: &pitches, restrict: false };
        let per_member = self.members.par_iter().map(|n| n.predict(&batch)).collect::<Result<Vec<_>, _>>()?;
        Ok(SlipPrediction::from_members(graph.slot_count(), &valid, per_member))
    }

    pub fn predict_instance(&self, map: &TerrainInstance, with_flat: bool) -> Result<SlipPrediction, DptError> {
        self.predict_map(&map.colors_f32(), &map.graph(), with_flat)
    }

    pub fn wrap_with_adaptation(&mut self) -> Result<(), DptError> {
        self.members.iter_mut().try_for_each(|m| m.wrap_with_adaptation())
    }

    pub fn reset_adaptation(&mut self) {
        self.members.iter_mut().for_each(|m| m.reset_adaptation());
    }

    pub fn save(&self, dir: &Path) -> Result<(), DptError> {
        fs::create_dir_all(dir).map_err(|source| DptError::Io { path: dir.display().to_string(), source })?;
        let mut records = Vec::new();
        for (k, m) in self.members.iter().enumerate() {
            let stem = format!("member-{k}");
            checkpoint::save(m.store(), dir, &stem)?;
            records.push(MemberRecord { index: k, seed: m.seed(), best_epoch: self.best_epoch[k], stem });
        }
        let manifest = EnsembleManifest { format: 1, config: self.config().clone(), members: records };
        let p = dir.join("ensemble.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
            .map_err(|source| DptError::Io { path: p.display().to_string(), source })
    }

    pub fn load(dir: &Path) -> Result<Self, DptError> {
        let p = dir.join("ensemble.json");
        let text = fs::read_to_string(&p).map_err(|source| DptError::Io { path: p.display().to_string(), source })?;
        let manifest: EnsembleManifest =
            serde_json::from_str(&text).map_err(|source| DptError::Manifest { path: p.display().to_string(), source })?;
        let mut members = Vec::new();
        let mut best_epoch = Vec::new();
        for r in &manifest.members {
            let mut net = DptNetwork::new(&manifest.config, r.seed)?;
            checkpoint::load_into(net.store_mut(), dir, &r.stem)?;
            members.push(net);
            best_epoch.push(r.best_epoch);
        }
        if members.is_empty() {
            return Err(DptError::Config(format!("{} lists no members", p.display())));
        }
        Ok(Ensemble { members, best_epoch })
    }
}

/// Sum of absolute errors of the mixture mean against finite labels, and the
/// number of labels used.
pub fn abs_error_sum(pred: &SlipPrediction, labels: &[f32]) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for (m, &l) in pred.mean.iter().zip(labels) {
        if l.is_finite() && m.is_finite() {
            s += (m - l as f64).abs();
            n += 1;
        }
    }
    (s, n)
}

/// Mean absolute error of the mixture mean over all labeled edges of `maps`,
/// times 100.
pub fn evaluate_mae(ensemble: &Ensemble, maps: &[&TerrainInstance]) -> Result<f64, DptError> {
    let mut s = 0.0;
    let mut n = 0;
    for m in maps {
        let pred = ensemble.predict_instance(m, false)?;
        let (a, b) = abs_error_sum(&pred, &m.slip);
        s += a;
        n += b;
    }
    Ok(if n == 0 { 0.0 } else { 100.0 * s / n as f64 })
}

#[cfg(test)]
mod tests;
