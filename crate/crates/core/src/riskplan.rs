//! Risk-aware travel-time costs from slip distributions, and A* search over
//! them.
//!
//! Descents are scored by reflecting the predicted slip about the same edge's
//! flat-ground prediction, so a steep downhill that the model expects to brake
//! hard counts as risky rather than fast.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dpt::{Moments, SlipPrediction};
use crate::gridworld::{EdgeId, GridGraph};

#[derive(Debug, thiserror::Error)]
pub enum RiskError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("slip {0} is at or below -1; clamp before converting to a speed")]
    Dyscontrol(f64),
    #[error("prediction lacks the zero-pitch query needed for descent risk")]
    MissingFlatQuery,
    #[error("prediction covers {got} edge slots, graph has {expected}")]
    Coverage { expected: usize, got: usize },
    #[error("node {node} is outside the {height}x{width} grid")]
    OutOfGrid { node: usize, height: usize, width: usize },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Weight on the predicted standard deviation.
    pub lambda: f64,
    /// Commanded speed in m/s.
    pub u_ref: f64,
    /// Edges whose risk-adjusted slip reaches this are removed.
    pub s_block: f64,
    /// Lower clamp applied before the slip is turned into a speed.
    pub s_floor: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { lambda: 2.0, u_ref: 0.1, s_block: 1.0, s_floor: -0.99 }
    }
}

impl PlannerConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        PlannerConfig { lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        let bad = |m: String| Err(RiskError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.u_ref > 0.0 && self.u_ref.is_finite()) {
            return bad(format!("u_ref must be positive, got {}", self.u_ref));
        }
        if !(self.s_floor > -1.0) {
            return bad(format!("s_floor must exceed -1, got {}", self.s_floor));
        }
        if !(self.s_block <= 1.0 && self.s_block > self.s_floor) {
            return bad(format!("s_block must lie in (s_floor, 1], got {}", self.s_block));
        }
        Ok(())
    }
}

/// Mean and variance of the slip treated as a risk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskMoments {
    pub mean: f64,
    pub var: f64,
}

/// Ascents keep their moments; descents reflect the mean about the flat-ground
/// mean. Reflection leaves the variance unchanged.
pub fn slip_as_risk_moments(m: &Moments, pitch: f64, flat_mean: f64) -> RiskMoments {
    let mean = if pitch >= 0.0 { m.mean } else { 2.0 * flat_mean - m.mean };
    RiskMoments { mean, var: m.total }
}

/// `E[S_risk] + lambda * sd`, clamped below at `s_floor`.
pub fn uncertainty_adjusted_slip(r: &RiskMoments, lambda: f64, s_floor: f64) -> f64 {
    (r.mean + lambda * r.var.max(0.0).sqrt()).max(s_floor)
}

/// Speed over ground for slip `s` at commanded speed `u_ref`. Slip at or above
/// one gives zero.
pub fn slip_to_velocity(s: f64, u_ref: f64) -> Result<f64, RiskError> {
    if s.is_nan() || s <= -1.0 {
        return Err(RiskError::Dyscontrol(s));
    }
    Ok(if s >= 0.0 { ((1.0 - s) * u_ref).max(0.0) } else { u_ref / (1.0 + s) })
}

/// Per edge slot; slots that leave the grid are blocked with NaN slip.
#[derive(Clone, Debug)]
pub struct CostField {
    pub slip_risk: Vec<f64>,
    pub speed: Vec<f64>,
    /// Seconds; infinite when blocked.
    pub cost: Vec<f64>,
    pub blocked: Vec<bool>,
}

impl CostField {
    /// Costs from a risk-adjusted slip per slot (NaN or unused for invalid
    /// slots).
    pub fn from_slip_risk(graph: &GridGraph, slip_risk: &[f64], cfg: &PlannerConfig) -> Result<Self, RiskError> {
        cfg.validate()?;
        let n = graph.slot_count();
        if slip_risk.len() != n {
            return Err(RiskError::Coverage { expected: n, got: slip_risk.len() });
        }
        let mut f = CostField {
            slip_risk: vec![f64::NAN; n],
            speed: vec![0.0; n],
            cost: vec![f64::INFINITY; n],
            blocked: vec![true; n],
        };
        for e in graph.edges() {
            let slot = e.id.slot();
            let raw = slip_risk[slot];
            if raw.is_nan() {
                continue;
            }
            let s = raw.max(cfg.s_floor);
            f.slip_risk[slot] = s;
            if s >= cfg.s_block {
                continue;
            }
            let u = slip_to_velocity(s, cfg.u_ref)?;
            f.blocked[slot] = false;
            f.speed[slot] = u;
            f.cost[slot] = e.length / u;
        }
        Ok(f)
    }

    /// Cost of an unblocked edge.
    pub fn edge_cost(&self, e: EdgeId) -> Option<f64> {
        let s = e.slot();
        (s < self.cost.len() && !self.blocked[s]).then(|| self.cost[s])
    }

    /// Largest speed over unblocked edges.
    pub fn max_speed(&self) -> f64 {
        self.speed.iter().zip(&self.blocked).filter(|(_, &b)| !b).map(|(&u, _)| u).fold(0.0, f64::max)
    }

    /// Sum of edge costs along a node path, `None` if a step is not an
    /// unblocked edge.
    pub fn path_cost(&self, graph: &GridGraph, path: &[usize]) -> Option<f64> {
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self.edge_cost(graph.edge_between(w[0], w[1])?)?;
        }
        Some(total)
    }

    /// Columns `edge,source,target,s_risk,cost,blocked`, valid edges only.
    pub fn write_csv<W: Write>(&self, graph: &GridGraph, out: W) -> Result<(), RiskError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["edge", "source", "target", "s_risk", "cost", "blocked"])?;
        for e in graph.edges() {
            let s = e.id.slot();
            w.write_record([
                s.to_string(),
                e.source.to_string(),
                e.target.to_string(),
                self.slip_risk[s].to_string(),
                self.cost[s].to_string(),
                self.blocked[s].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Risk-adjusted slip for every slot of an ensemble prediction.
pub fn risk_slip(pred: &SlipPrediction, graph: &GridGraph, cfg: &PlannerConfig) -> Result<Vec<f64>, RiskError> {
    let flat = pred.flat_mean.as_ref().ok_or(RiskError::MissingFlatQuery)?;
    if pred.slots != graph.slot_count() {
        return Err(RiskError::Coverage { expected: graph.slot_count(), got: pred.slots });
    }
    let mut out = vec![f64::NAN; pred.slots];
    for e in graph.edges() {
        let s = e.id.slot();
        let r = slip_as_risk_moments(&pred.moments(e.id), e.pitch, flat[s]);
        out[s] = uncertainty_adjusted_slip(&r, cfg.lambda, cfg.s_floor);
    }
    Ok(out)
}

pub fn build_cost_field(pred: &SlipPrediction, graph: &GridGraph, cfg: &PlannerConfig) -> Result<CostField, RiskError> {
    cfg.validate()?;
    CostField::from_slip_risk(graph, &risk_slip(pred, graph, cfg)?, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub path: Vec<usize>,
    /// Seconds; infinite when unsolved.
    pub cost: f64,
    pub expanded: usize,
    pub solved: bool,
}

#[derive(PartialEq)]
struct Entry {
    f: f64,
    h: f64,
    node: usize,
    g: f64,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Reversed so the max-heap pops the smallest (f, h, node).
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f).then(o.h.total_cmp(&self.h)).then(o.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Minimum-cost path over unblocked edges.
///
/// The heuristic is planar distance over the fastest unblocked speed, shrunk
/// by a relative 1e-9 so rounding cannot make it overestimate. Ties pop by
/// smaller `h`, then smaller node index.
pub fn a_star(graph: &GridGraph, field: &CostField, start: usize, goal: usize) -> Result<PlanResult, RiskError> {
    for v in [start, goal] {
        if v >= graph.node_count() {
            return Err(RiskError::OutOfGrid { node: v, height: graph.height(), width: graph.width() });
        }
    }
    if start == goal {
        return Ok(PlanResult { path: vec![start], cost: 0.0, expanded: 0, solved: true });
    }
    let unsolved = |expanded| PlanResult { path: Vec::new(), cost: f64::INFINITY, expanded, solved: false };
    let u_ub = field.max_speed();
    if u_ub <= 0.0 {
        return Ok(unsolved(0));
    }
    let scale = (1.0 - 1e-9) / u_ub;
    let h = |v: usize| graph.planar_distance(v, goal) * scale;
    let n = graph.node_count();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    g[start] = 0.0;
    heap.push(Entry { f: h(start), h: h(start), node: start, g: 0.0 });
    let mut expanded = 0;
    while let Some(Entry { node: v, g: gv, .. }) = heap.pop() {
        // Stale entry; the node was pushed again with a smaller g.
        if gv > g[v] {
            continue;
        }
        if v == goal {
            let mut path = vec![goal];
            while *path.last().unwrap() != start {
                path.push(parent[*path.last().unwrap()]);
            }
            path.reverse();
            return Ok(PlanResult { path, cost: gv, expanded, solved: true });
        }
        expanded += 1;
        for (e, w) in graph.neighbors(v) {
            let Some(c) = field.edge_cost(e) else { continue };
            let cand = gv + c;
            if cand < g[w] {
                g[w] = cand;
                parent[w] = v;
                let hw = h(w);
                heap.push(Entry { f: cand + hw, h: hw, node: w, g: cand });
            }
        }
    }
    Ok(unsolved(expanded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpt::mixture_moments;
    use crate::gridworld::Direction;
    use petgraph::algo::dijkstra;
    use petgraph::graph::{DiGraph, NodeIndex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(h: usize, w: usize) -> GridGraph {
        GridGraph::build(&vec![0.0; h * w], h, w, 1.0).unwrap()
    }

    fn moments(mean: f64, total: f64) -> Moments {
        Moments { mean, aleatoric: total, epistemic: 0.0, total }
    }

    #[test]
    fn ascent_keeps_moments() {
        let r = slip_as_risk_moments(&moments(0.3, 0.01), 0.2, 0.1);
        assert_eq!(r, RiskMoments { mean: 0.3, var: 0.01 });
        let r = slip_as_risk_moments(&moments(0.3, 0.01), 0.0, 0.1);
        assert_eq!(r.mean, 0.3);
    }

    #[test]
    fn descent_reflects_about_flat_mean() {
        let r = slip_as_risk_moments(&moments(-0.2, 0.04), -0.3, 0.1);
        assert!((r.mean - 0.4).abs() < 1e-12);
        assert_eq!(r.var, 0.04);
    }

    #[test]
    fn adjusted_slip_substitutions() {
        let r = RiskMoments { mean: 0.2, var: 0.0025 };
        assert_eq!(uncertainty_adjusted_slip(&r, 0.0, -0.99), 0.2);
        assert!((uncertainty_adjusted_slip(&r, 2.0, -0.99) - 0.3).abs() < 1e-12);
        let low = RiskMoments { mean: -1.5, var: 0.0 };
        assert_eq!(uncertainty_adjusted_slip(&low, 1.0, -0.99), -0.99);
    }

    #[test]
    fn velocity_branches() {
        assert_eq!(slip_to_velocity(0.0, 0.1).unwrap(), 0.1);
        assert!((slip_to_velocity(0.5, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!((slip_to_velocity(-0.5, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(slip_to_velocity(1.0, 0.1).unwrap(), 0.0);
        assert!(matches!(slip_to_velocity(-1.0, 0.1), Err(RiskError::Dyscontrol(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PlannerConfig::default().validate().is_ok());
        assert!(PlannerConfig::with_lambda(-0.1).validate().is_err());
        assert!(PlannerConfig { u_ref: 0.0, ..Default::default() }.validate().is_err());
        assert!(PlannerConfig { s_floor: -1.0, ..Default::default() }.validate().is_err());
        assert!(PlannerConfig { s_block: 1.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn cost_substitutions_and_blocking() {
        let g = GridGraph::build(&[0.0, 0.2, 0.0, 0.0], 2, 2, 1.0).unwrap();
        let cfg = PlannerConfig::default();
        let mut s = vec![f64::NAN; g.slot_count()];
        let flat_e = EdgeId::new(0, Direction::South);
        let slope_e = EdgeId::new(0, Direction::East);
        let blocked_e = EdgeId::new(3, Direction::North);
        s[flat_e.slot()] = 0.5;
        s[slope_e.slot()] = 0.0;
        s[blocked_e.slot()] = 1.0;
        let f = CostField::from_slip_risk(&g, &s, &cfg).unwrap();
        assert!((f.edge_cost(flat_e).unwrap() - 20.0).abs() < 1e-9);
        let len = f.edge_cost(slope_e).unwrap() * 0.1;
        assert!((len - 1.04f64.sqrt()).abs() < 1e-6);
        assert!(f.blocked[blocked_e.slot()] && f.edge_cost(blocked_e).is_none());
        assert_eq!(f.cost[blocked_e.slot()], f64::INFINITY);
        // NaN risk on a valid edge is treated as blocked.
        assert!(f.blocked[EdgeId::new(1, Direction::South).slot()]);
    }

    #[test]
    fn cost_is_monotone_in_lambda() {
        let g = flat(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: Vec<Moments> = (0..g.slot_count())
            .map(|_| {
                let mu: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.3..0.8)).collect();
                let var: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..0.05)).collect();
                mixture_moments(&mu, &var)
            })
            .collect();
        let mut prev: Option<CostField> = None;
        for k in 0..7 {
            let cfg = PlannerConfig::with_lambda(0.5 * k as f64);
            let s: Vec<f64> = m.iter().map(|m| uncertainty_adjusted_slip(&slip_as_risk_moments(m, 0.1, 0.0), cfg.lambda, cfg.s_floor)).collect();
            let f = CostField::from_slip_risk(&g, &s, &cfg).unwrap();
            if let Some(p) = &prev {
                for e in g.edges() {
                    let i = e.id.slot();
                    assert!(f.cost[i] >= p.cost[i]);
                    assert!(f.blocked[i] || !p.blocked[i]);
                }
            }
            prev = Some(f);
        }
    }

    #[test]
    fn uniform_field_gives_manhattan_path() {
        let g = flat(96, 96);
        let f = CostField::from_slip_risk(&g, &vec![0.0; g.slot_count()], &PlannerConfig::default()).unwrap();
        let r = a_star(&g, &f, g.node(16, 16), g.node(80, 80)).unwrap();
        assert!(r.solved);
        assert_eq!(r.path.len(), 129);
        assert!((r.cost - 1280.0).abs() < 1e-9);
        assert_eq!(f.path_cost(&g, &r.path), Some(r.cost));
    }

    #[test]
    fn trivial_and_unreachable() {
        let g = flat(5, 5);
        let mut s = vec![0.0; g.slot_count()];
        let f = CostField::from_slip_risk(&g, &s, &PlannerConfig::default()).unwrap();
        let r = a_star(&g, &f, 7, 7).unwrap();
        assert_eq!((r.path, r.cost, r.solved), (vec![7], 0.0, true));
        let goal = g.node(2, 2);
        for (_, w) in g.neighbors(goal) {
            s[g.edge_between(w, goal).unwrap().slot()] = 1.0;
        }
        let f = CostField::from_slip_risk(&g, &s, &PlannerConfig::default()).unwrap();
        let r = a_star(&g, &f, 0, goal).unwrap();
        assert!(!r.solved && r.path.is_empty() && r.cost.is_infinite());
        assert!(a_star(&g, &f, 0, 25).is_err());
    }

    fn dijkstra_costs(g: &GridGraph, f: &CostField, start: usize) -> Vec<Option<f64>> {
        let mut pg = DiGraph::<(), f64>::new();
        let nodes: Vec<NodeIndex> = (0..g.node_count()).map(|_| pg.add_node(())).collect();
        for e in g.edges() {
            if let Some(c) = f.edge_cost(e.id) {
                pg.add_edge(nodes[e.source], nodes[e.target], c);
            }
        }
        let d = dijkstra(&pg, nodes[start], None, |e| *e.weight());
        nodes.iter().map(|n| d.get(n).copied()).collect()
    }

    pub(crate) fn random_field(rng: &mut ChaCha8Rng, g: &GridGraph, block_p: f64) -> CostField {
        let s: Vec<f64> =
            (0..g.slot_count()).map(|_| if rng.gen_bool(block_p) { 1.0 } else { rng.gen_range(-0.5..0.95) }).collect();
        CostField::from_slip_risk(g, &s, &PlannerConfig::default()).unwrap()
    }

    #[test]
    fn matches_dijkstra_and_heuristic_is_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut unsolved = 0;
        for i in 0..100 {
            let hs: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..0.5)).collect();
            let g = GridGraph::build(&hs, 16, 16, 1.0).unwrap();
            let f = random_field(&mut rng, &g, [0.0, 0.2, 0.45][i % 3]);
            let (s, t) = (rng.gen_range(0..256), rng.gen_range(0..256));
            let r = a_star(&g, &f, s, t).unwrap();
            let d = dijkstra_costs(&g, &f, s);
            match d[t] {
                Some(c) => {
                    assert!(r.solved);
                    assert_eq!(r.cost, c, "instance {i}");
                    assert_eq!(f.path_cost(&g, &r.path), Some(r.cost));
                    // h(v) never exceeds the true cost-to-go.
                    let to_goal = {
                        let mut pg = DiGraph::<(), f64>::new();
                        let nodes: Vec<NodeIndex> = (0..256).map(|_| pg.add_node(())).collect();
                        for e in g.edges() {
                            if let Some(c) = f.edge_cost(e.id) {
                                pg.add_edge(nodes[e.target], nodes[e.source], c);
                            }
                        }
                        dijkstra(&pg, nodes[t], None, |e| *e.weight())
                    };
                    let u = f.max_speed();
                    for (v, c) in to_goal.iter().map(|(n, c)| (n.index(), c)) {
                        assert!(g.planar_distance(v, t) / u * (1.0 - 1e-9) <= *c);
                    }
                }
                None => {
                    unsolved += 1;
                    assert!(!r.solved);
                }
            }
        }
        assert!(unsolved > 0, "fixture should include unreachable goals");
    }

    #[test]
    fn plans_are_deterministic() {
        let g = flat(12, 12);
        let f = CostField::from_slip_risk(&g, &vec![0.2; g.slot_count()], &PlannerConfig::default()).unwrap();
        let a = a_star(&g, &f, 0, 143).unwrap();
        let b = a_star(&g, &f, 0, 143).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn descent_risk_prefers_flat_detour() {
        // Row 1 is a ridge: going over it means a steep climb and a steep
        // descent. Row 0 is flat. Slip grows with |pitch| in the model.
        let (h, w) = (3, 5);
        let mut hs = vec![0.0f32; h * w];
        hs[w + 2] = 0.8;
        let g = GridGraph::build(&hs, h, w, 1.0).unwrap();
        let model = |phi: f64| 0.05 + 0.8 * phi.abs();
        let mut mean = vec![f64::NAN; g.slot_count()];
        let mut flat_mean = vec![f64::NAN; g.slot_count()];
        for e in g.edges() {
            // Predicted slip is negative downhill (the rover speeds up).
            let phi = e.pitch;
            mean[e.id.slot()] = if phi >= 0.0 { model(phi) } else { 0.05 - 0.3 * phi.abs() };
            flat_mean[e.id.slot()] = model(0.0);
        }
        let cfg = PlannerConfig::with_lambda(1.0);
        let s: Vec<f64> = (0..g.slot_count())
            .map(|i| {
                if mean[i].is_nan() {
                    return f64::NAN;
                }
                let e = EdgeId(i as u32);
                let r = slip_as_risk_moments(&moments(mean[i], 0.0001), g.pitch(e), flat_mean[i]);
                uncertainty_adjusted_slip(&r, cfg.lambda, cfg.s_floor)
            })
            .collect();
        let f = CostField::from_slip_risk(&g, &s, &cfg).unwrap();
        let r = a_star(&g, &f, g.node(1, 0), g.node(1, 4)).unwrap();
        assert!(r.solved);
        assert!(!r.path.contains(&g.node(1, 2)), "path crossed the ridge: {:?}", r.path);
        // Every descent edge into or off the ridge scores above the flat edges.
        let down = g.edge_between(g.node(1, 2), g.node(1, 3)).unwrap();
        let flat_edge = g.edge_between(g.node(0, 0), g.node(0, 1)).unwrap();
        assert!(s[down.slot()] > s[flat_edge.slot()]);
    }
}
