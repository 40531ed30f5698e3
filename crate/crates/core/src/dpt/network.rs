use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DptError;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

/// Floor added to the softplus variance head.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DptConfig {
    /// Output channels of each conv layer; the last is the feature width.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Number of sin/cos frequency pairs in the slope embedding.
    pub embed_freqs: usize,
    /// Widths of the hidden MLP layers.
    pub hidden: Vec<usize>,
}

impl Default for DptConfig {
    fn default() -> Self {
        DptConfig { conv_channels: vec![16, 16, 16], kernel: 3, embed_freqs: 4, hidden: vec![32, 32] }
    }
}

impl DptConfig {
    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&3)
    }

    pub fn embed_dim(&self) -> usize {
        1 + 2 * self.embed_freqs
    }

    pub fn validate(&self) -> Result<(), DptError> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(DptError::Config("model.conv_channels must be non-empty and positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(DptError::Config("model.kernel must be odd".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(DptError::Config("model.hidden must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// `[phi, sin(2^k phi), cos(2^k phi) for k < freqs]`.
pub fn slope_embedding(phi: f64, freqs: usize, out: &mut Vec<f32>) {
    out.push(phi as f32);
    for k in 0..freqs {
        let a = phi * (1u64 << k) as f64;
        out.push(a.sin() as f32);
        out.push(a.cos() as f32);
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FirstLayer {
    w_src: ParamId,
    w_dst: ParamId,
    w_phi: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// One ensemble member: a conv feature extractor and an edge MLP.
///
/// The first MLP layer acting on `[F_src | F_dst | embed(phi)]` is stored as
/// three weight blocks so node projections can be computed once and gathered
/// per edge. Every conv and linear layer owns a per-channel scale and shift
/// that stay out of the forward pass until [`DptNetwork::wrap_with_adaptation`].
#[derive(Clone, Debug)]
pub struct DptNetwork {
    config: DptConfig,
    store: ParamStore<f32>,
    conv: Vec<Layer>,
    first: FirstLayer,
    mlp: Vec<Layer>,
    wrapped: bool,
    seed: u64,
}

/// Edge batch for one map.
pub struct EdgeBatch<'a> {
    /// `H x W x 3` colors in `[0, 1]`.
    pub colors: &'a [f32],
    pub height: usize,
    pub width: usize,
    pub src: &'a [u32],
    pub dst: &'a [u32],
    /// One pitch list per query; each has one entry per edge.
    pub pitches: &'a [&'a [f64]],
    /// Compute features only where the edges need them.
    pub restrict: bool,
}

pub struct EdgeOutputs {
    pub mu: Var,
    pub var: Var,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl DptNetwork {
    pub fn new(config: &DptConfig, seed: u64) -> Result<Self, DptError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel;
        let mut conv = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            let w = store.add(format!("conv{i}.w"), he_uniform(&mut rng, &[c, k, k, c_in], k * k * c_in))?;
            let b = store.add(format!("conv{i}.b"), Tensor::zeros(&[c]))?;
            let (gamma, beta) = Self::adapt_params(&mut store, &format!("conv{i}"), c)?;
            conv.push(Layer { w, b, gamma, beta });
            c_in = c;
        }
        let d = config.feature_dim();
        let e = config.embed_dim();
        let h0 = config.hidden[0];
        let fan = 2 * d + e;
        let w_src = store.add("fc0.w_src", he_uniform(&mut rng, &[h0, d], fan))?;
        let w_dst = store.add("fc0.w_dst", he_uniform(&mut rng, &[h0, d], fan))?;
        let w_phi = store.add("fc0.w_phi", he_uniform(&mut rng, &[h0, e], fan))?;
        let b = store.add("fc0.b", Tensor::zeros(&[h0]))?;
        let (gamma, beta) = Self::adapt_params(&mut store, "fc0", h0)?;
        let first = FirstLayer { w_src, w_dst, w_phi, b, gamma, beta };
        let mut mlp = Vec::new();
        let mut widths = config.hidden.clone();
        widths.push(2);
        for i in 1..widths.len() {
            let (d_in, d_out) = (widths[i - 1], widths[i]);
            let last = i + 1 == widths.len();
            let w = if last { Tensor::zeros(&[d_out, d_in]) } else { he_uniform(&mut rng, &[d_out, d_in], d_in) };
            let w = store.add(format!("fc{i}.w"), w)?;
            let b = store.add(format!("fc{i}.b"), Tensor::zeros(&[d_out]))?;
            let (gamma, beta) = Self::adapt_params(&mut store, &format!("fc{i}"), d_out)?;
            mlp.push(Layer { w, b, gamma, beta });
        }
        Ok(DptNetwork { config: config.clone(), store, conv, first, mlp, wrapped: false, seed })
    }

    fn adapt_params(store: &mut ParamStore<f32>, prefix: &str, c: usize) -> Result<(ParamId, ParamId), DptError> {
        let g = store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0))?;
        let b = store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]))?;
        store.get_mut(g).frozen = true;
        store.get_mut(b).frozen = true;
        Ok((g, b))
    }

    pub fn config(&self) -> &DptConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn is_wrapped(&self) -> bool {
        self.wrapped
    }

    fn adaptation_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.conv.iter().chain(&self.mlp) {
            ids.extend([l.gamma, l.beta]);
        }
        ids.extend([self.first.gamma, self.first.beta]);
        ids
    }

    /// Ids of every non-adaptation parameter.
    pub fn base_ids(&self) -> Vec<ParamId> {
        let adapt = self.adaptation_ids();
        self.store.iter().map(|(id, _)| id).filter(|id| !adapt.contains(id)).collect()
    }

    /// Activates the scale/shift layers, freezes every base weight, and
    /// leaves only the adaptation parameters trainable.
    pub fn wrap_with_adaptation(&mut self) -> Result<(), DptError> {
        if self.wrapped {
            return Err(DptError::AlreadyWrapped);
        }
        let adapt = self.adaptation_ids();
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.get_mut(id).frozen = !adapt.contains(&id);
        }
        self.store.reset_optimizer();
        self.wrapped = true;
        Ok(())
    }

    /// Restores `gamma = 1`, `beta = 0` and clears optimizer state.
    pub fn reset_adaptation(&mut self) {
        let pairs: Vec<(ParamId, ParamId)> = self
            .conv
            .iter()
            .chain(&self.mlp)
            .map(|l| (l.gamma, l.beta))
            .chain([(self.first.gamma, self.first.beta)])
            .collect();
        for (g, b) in pairs {
            self.store.get_mut(g).value.fill(1.0);
            self.store.get_mut(b).value.fill(0.0);
        }
        self.store.zero_grad();
        self.store.reset_optimizer();
    }

    /// Current values of the adaptation parameters, in a fixed order.
    pub fn adaptation_snapshot(&self) -> Vec<Tensor<f32>> {
        self.adaptation_ids().iter().map(|&id| self.store.get(id).value.clone()).collect()
    }

    pub fn restore_adaptation(&mut self, snap: &[Tensor<f32>]) {
        for (id, v) in self.adaptation_ids().into_iter().zip(snap) {
            self.store.get_mut(id).value = v.clone();
        }
    }

    pub fn adaptation_param_count(&self) -> usize {
        self.adaptation_ids().iter().map(|&id| self.store.get(id).value.len()).sum()
    }

    pub fn base_param_count(&self) -> usize {
        self.base_ids().iter().map(|&id| self.store.get(id).value.len()).sum()
    }

    fn maybe_adapt(&self, tape: &mut Tape<f32>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var, DptError> {
        if !self.wrapped {
            return Ok(x);
        }
        let g = tape.param(&self.store, gamma)?;
        let b = tape.param(&self.store, beta)?;
        Ok(tape.scale_shift(x, g, b)?)
    }

    /// Per-node feature map `[H * W, D]`. With `needed` set, only the listed
    /// nodes (and what they depend on) are computed; other rows are garbage.
    pub fn features(&self, tape: &mut Tape<f32>, colors: &[f32], height: usize, width: usize, needed: Option<&[u32]>) -> Result<Var, DptError> {
        if colors.len() != height * width * 3 {
            return Err(DptError::Input(format!("expected {} color values, got {}", height * width * 3, colors.len())));
        }
        let actives = needed.map(|n| receptive_sets(n, height, width, self.config.kernel / 2, self.conv.len()));
        let mut x = tape.constant(Tensor::new(vec![height, width, 3], colors.to_vec())?)?;
        for (i, l) in self.conv.iter().enumerate() {
            let w = tape.param(&self.store, l.w)?;
            let b = tape.param(&self.store, l.b)?;
            let active = actives.as_ref().map(|a| a[i].clone());
            let h = tape.conv2d(x, w, Some(b), active)?;
            let h = self.maybe_adapt(tape, h, l.gamma, l.beta)?;
            x = tape.relu(h)?;
        }
        Ok(tape.reshape(x, vec![height * width, self.config.feature_dim()])?)
    }

    /// Gaussian parameters for every edge of `batch`, once per pitch list.
    pub fn forward(&self, tape: &mut Tape<f32>, batch: &EdgeBatch) -> Result<Vec<EdgeOutputs>, DptError> {
        let n_edges = batch.src.len();
        if batch.dst.len() != n_edges || batch.pitches.iter().any(|p| p.len() != n_edges) {
            return Err(DptError::Input("edge lists differ in length".into()));
        }
        let n_nodes = batch.height * batch.width;
        if batch.src.iter().chain(batch.dst).any(|&v| v as usize >= n_nodes) {
            return Err(DptError::Input("edge endpoint outside the map".into()));
        }
        // Compact node list and local indices.
        let mut local = vec![u32::MAX; n_nodes];
        let mut nodes: Vec<u32> = Vec::new();
        for &v in batch.src.iter().chain(batch.dst) {
            if local[v as usize] == u32::MAX {
                local[v as usize] = 0;
                nodes.push(v);
            }
        }
        nodes.sort_unstable();
        for (i, &v) in nodes.iter().enumerate() {
            local[v as usize] = i as u32;
        }
        let feats = self.features(tape, batch.colors, batch.height, batch.width, batch.restrict.then_some(&nodes[..]))?;
        let fu = tape.gather_rows(feats, nodes.into())?;
        let w_src = tape.param(&self.store, self.first.w_src)?;
        let w_dst = tape.param(&self.store, self.first.w_dst)?;
        let p_src = tape.linear(fu, w_src, None)?;
        let p_dst = tape.linear(fu, w_dst, None)?;
        let src_local: Arc<[u32]> = batch.src.iter().map(|&v| local[v as usize]).collect();
        let dst_local: Arc<[u32]> = batch.dst.iter().map(|&v| local[v as usize]).collect();
        let a = tape.gather_rows(p_src, src_local)?;
        let b = tape.gather_rows(p_dst, dst_local)?;
        let ab = tape.add(a, b)?;
        let e_dim = self.config.embed_dim();
        let mut outs = Vec::with_capacity(batch.pitches.len());
        for phis in batch.pitches {
            let mut emb = Vec::with_capacity(n_edges * e_dim);
            for &phi in phis.iter() {
                slope_embedding(phi, self.config.embed_freqs, &mut emb);
            }
            let emb = tape.constant(Tensor::new(vec![n_edges, e_dim], emb)?)?;
            let w_phi = tape.param(&self.store, self.first.w_phi)?;
            let b0 = tape.param(&self.store, self.first.b)?;
            let pe = tape.linear(emb, w_phi, Some(b0))?;
            let h = tape.add(ab, pe)?;
            let h = self.maybe_adapt(tape, h, self.first.gamma, self.first.beta)?;
            let mut h = tape.relu(h)?;
            for (i, l) in self.mlp.iter().enumerate() {
                let w = tape.param(&self.store, l.w)?;
                let b = tape.param(&self.store, l.b)?;
                let z = tape.linear(h, w, Some(b))?;
                let z = self.maybe_adapt(tape, z, l.gamma, l.beta)?;
                h = if i + 1 == self.mlp.len() { z } else { tape.relu(z)? };
            }
            let mu = tape.column(h, 0)?;
            let raw = tape.column(h, 1)?;
            let sp = tape.softplus(raw)?;
            let var = tape.add_scalar(sp, VAR_FLOOR)?;
            outs.push(EdgeOutputs { mu, var });
        }
        Ok(outs)
    }

    /// Mean NLL of `targets` on one batch.
    pub fn nll(&self, tape: &mut Tape<f32>, batch: &EdgeBatch, targets: &[f32]) -> Result<Var, DptError> {
        let out = self.forward(tape, batch)?;
        let t = tape.constant(Tensor::new(vec![targets.len()], targets.to_vec())?)?;
        Ok(tape.gaussian_nll(out[0].mu, out[0].var, t)?)
    }

    /// Forward pass without gradients; returns `(mu, var)` per pitch list.
    pub fn predict(&self, batch: &EdgeBatch) -> Result<Vec<(Vec<f32>, Vec<f32>)>, DptError> {
        let mut tape = Tape::new();
        let outs = self.forward(&mut tape, batch)?;
        let res = outs
            .iter()
            .map(|o| Ok((tape.value(o.mu)?.data().to_vec(), tape.value(o.var)?.data().to_vec())))
            .collect::<Result<Vec<_>, DptError>>()?;
        tape.reset();
        Ok(res)
    }
}

/// Active pixel lists per conv layer so that the last layer is exact on
/// `nodes`: layer `i` needs layer `i + 1`'s set dilated by `radius`.
fn receptive_sets(nodes: &[u32], height: usize, width: usize, radius: usize, layers: usize) -> Vec<Arc<[u32]>> {
    let mut mask = vec![false; height * width];
    for &v in nodes {
        mask[v as usize] = true;
    }
    let mut sets: Vec<Arc<[u32]>> = Vec::with_capacity(layers);
    for layer in 0..layers {
        if layer > 0 {
            mask = dilate(&mask, height, width, radius);
        }
        sets.push(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i as u32).collect());
    }
    sets.reverse();
    sets
}

fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            for rr in r.saturating_sub(radius)..=(r + radius).min(height - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(width - 1) {
                    out[rr * width + cc] = true;
                }
            }
        }
    }
    out
}
