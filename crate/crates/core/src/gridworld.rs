//! Directed four-neighbor grid graph with 3-D node positions and edge pitch.
//!
//! Node `v = row * width + col` sits at `(col * res, row * res, z)`. Directed
//! edges are addressed by slot `4 * v + d` with `d` in N, E, S, W order; slots
//! that would leave the grid exist in the numbering but are invalid. The same
//! numbering is used for slip-label files.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("grid must be at least 2x2, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("expected {expected} heights, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite height {value} at node {node}")]
    NonFinite { node: usize, value: f32 },
    #[error("resolution must be positive, got {0}")]
    Resolution(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::East, Direction::South, Direction::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Direction> {
        Self::ALL.get(i).copied()
    }

    /// `(d_row, d_col)`; north decreases the row index.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::North => (-1, 0),
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
        }
    }

    pub fn opposite(self) -> Direction {
        Self::ALL[(self.index() + 2) % 4]
    }
}

/// Slot number of a directed edge, `4 * source + direction`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId(pub u32);

impl EdgeId {
    pub fn new(source: usize, dir: Direction) -> Self {
        EdgeId((source * 4 + dir.index()) as u32)
    }

    pub fn slot(self) -> usize {
        self.0 as usize
    }

    pub fn source(self) -> usize {
        self.slot() / 4
    }

    pub fn direction(self) -> Direction {
        Direction::ALL[self.slot() % 4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub source: usize,
    pub target: usize,
    pub pitch: f64,
    /// 3-D distance between the endpoints.
    pub length: f64,
}

#[derive(Clone, Debug)]
pub struct GridGraph {
    height: usize,
    width: usize,
    resolution: f64,
    positions: Vec<[f64; 3]>,
    /// Per slot; NaN for slots that leave the grid.
    pitch: Vec<f64>,
    length: Vec<f64>,
    target: Vec<u32>,
}

const NO_TARGET: u32 = u32::MAX;

impl GridGraph {
    /// Builds the graph from row-major heights in meters.
    pub fn build(heights: &[f32], height: usize, width: usize, resolution: f64) -> Result<Self, GridError> {
        if height < 2 || width < 2 {
            return Err(GridError::TooSmall { height, width });
        }
        if heights.len() != height * width {
            return Err(GridError::Length { expected: height * width, got: heights.len() });
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::Resolution(resolution));
        }
        if let Some((node, &value)) = heights.iter().enumerate().find(|(_, h)| !h.is_finite()) {
            return Err(GridError::NonFinite { node, value });
        }
        let n = height * width;
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|v| [(v % width) as f64 * resolution, (v / width) as f64 * resolution, heights[v] as f64])
            .collect();
        let mut pitch = vec![f64::NAN; 4 * n];
        let mut length = vec![f64::NAN; 4 * n];
        let mut target = vec![NO_TARGET; 4 * n];
        for v in 0..n {
            let (r, c) = (v / width, v % width);
            // Each undirected pair is computed once from its east/south end and
            // mirrored, so reverse pitches are exact negations.
            for dir in [Direction::East, Direction::South] {
                let (dr, dc) = dir.offset();
                let (r2, c2) = (r as isize + dr, c as isize + dc);
                if r2 >= height as isize || c2 >= width as isize {
                    continue;
                }
                let u = r2 as usize * width + c2 as usize;
                let dz = positions[u][2] - positions[v][2];
                let phi = (dz / resolution).atan();
                let len = (resolution * resolution + dz * dz).sqrt();
                let fwd = EdgeId::new(v, dir).slot();
                let back = EdgeId::new(u, dir.opposite()).slot();
                pitch[fwd] = phi;
                pitch[back] = -phi;
                length[fwd] = len;
                length[back] = len;
                target[fwd] = u as u32;
                target[back] = v as u32;
            }
        }
        Ok(GridGraph { height, width, resolution, positions, pitch, length, target })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn node_count(&self) -> usize {
        self.height * self.width
    }

    /// Number of edge slots, valid or not: `4 * H * W`.
    pub fn slot_count(&self) -> usize {
        4 * self.node_count()
    }

    pub fn node(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, v: usize) -> (usize, usize) {
        (v / self.width, v % self.width)
    }

    pub fn position(&self, v: usize) -> [f64; 3] {
        self.positions[v]
    }

    pub fn is_valid(&self, e: EdgeId) -> bool {
        self.target.get(e.slot()).is_some_and(|&t| t != NO_TARGET)
    }

    pub fn edge(&self, e: EdgeId) -> Option<Edge> {
        let slot = e.slot();
        let &t = self.target.get(slot)?;
        (t != NO_TARGET).then(|| Edge {
            id: e,
            source: e.source(),
            target: t as usize,
            pitch: self.pitch[slot],
            length: self.length[slot],
        })
    }

    /// Pitch in radians, positive for ascent; NaN for invalid slots.
    pub fn pitch(&self, e: EdgeId) -> f64 {
        self.pitch[e.slot()]
    }

    pub fn length(&self, e: EdgeId) -> f64 {
        self.length[e.slot()]
    }

    pub fn target(&self, e: EdgeId) -> Option<usize> {
        let t = self.target[e.slot()];
        (t != NO_TARGET).then_some(t as usize)
    }

    /// Outgoing edges in N, E, S, W order, skipping those that leave the grid.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (EdgeId, usize)> + '_ {
        Direction::ALL.into_iter().filter_map(move |d| {
            let e = EdgeId::new(v, d);
            self.target(e).map(|t| (e, t))
        })
    }

    pub fn edge_between(&self, from: usize, to: usize) -> Option<EdgeId> {
        self.neighbors(from).find(|&(_, t)| t == to).map(|(e, _)| e)
    }

    /// All valid edges in slot order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.slot_count() as u32).filter_map(move |s| self.edge(EdgeId(s)))
    }

    /// Planar distance between two nodes.
    pub fn planar_distance(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.positions[a], self.positions[b]);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_map_has_zero_pitch() {
        let g = GridGraph::build(&[0.0; 12], 3, 4, 1.0).unwrap();
        assert!(g.edges().all(|e| e.pitch == 0.0 && e.length == 1.0));
    }

    #[test]
    fn analytic_pitches() {
        let g = GridGraph::build(&[0.0, 1.0, 0.0, 0.0], 2, 2, 1.0).unwrap();
        let e = g.edge_between(0, 1).unwrap();
        assert!((g.pitch(e) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((g.pitch(e) - 0.785398).abs() < 1e-6);

        let g = GridGraph::build(&[0.0, 0.2, 0.0, 0.0], 2, 2, 1.0).unwrap();
        let e = g.edge_between(0, 1).unwrap();
        assert!((g.pitch(e).to_degrees() - 11.31).abs() < 5e-3);
        assert!((g.length(e) - 1.04f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn neighbor_counts_and_order() {
        let g = GridGraph::build(&[0.0; 25], 5, 5, 1.0).unwrap();
        assert_eq!(g.neighbors(0).count(), 2);
        assert_eq!(g.neighbors(g.node(0, 2)).count(), 3);
        let centre = g.node(2, 2);
        let dirs: Vec<Direction> = g.neighbors(centre).map(|(e, _)| e.direction()).collect();
        assert_eq!(dirs, Direction::ALL.to_vec());
        let targets: Vec<usize> = g.neighbors(centre).map(|(_, t)| t).collect();
        assert_eq!(targets, vec![g.node(1, 2), g.node(2, 3), g.node(3, 2), g.node(2, 1)]);
    }

    #[test]
    fn edge_slots_are_a_bijection_with_label_indexing() {
        let (h, w) = (4, 6);
        let g = GridGraph::build(&vec![0.0; h * w], h, w, 1.0).unwrap();
        let mut seen = vec![false; 4 * h * w];
        for v in 0..h * w {
            for (e, t) in g.neighbors(v) {
                let slot = e.slot();
                assert!(!seen[slot]);
                seen[slot] = true;
                assert_eq!(slot / 4, v);
                assert_eq!(EdgeId(slot as u32).source(), v);
                let (dr, dc) = e.direction().offset();
                let (r, c) = g.coords(v);
                assert_eq!(g.node((r as isize + dr) as usize, (c as isize + dc) as usize), t);
            }
        }
        // Border-exiting slots are exactly the unseen ones.
        let border = 2 * h + 2 * w;
        assert_eq!(seen.iter().filter(|s| !**s).count(), border);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(GridGraph::build(&[0.0; 2], 1, 2, 1.0), Err(GridError::TooSmall { .. })));
        assert!(matches!(GridGraph::build(&[0.0, f32::NAN, 0.0, 0.0], 2, 2, 1.0), Err(GridError::NonFinite { node: 1, .. })));
    }

    proptest! {
        #[test]
        fn reverse_edges_are_antisymmetric(hs in proptest::collection::vec(-50.0f32..50.0, 20)) {
            let g = GridGraph::build(&hs, 4, 5, 0.7).unwrap();
            for e in g.edges() {
                let back = g.edge_between(e.target, e.source).unwrap();
                prop_assert_eq!(g.pitch(back), -e.pitch);
                prop_assert_eq!(g.length(back), e.length);
                let dz = hs[e.target] as f64 - hs[e.source] as f64;
                prop_assert!((e.length - (0.49 + dz * dz).sqrt()).abs() < 1e-12);
                prop_assert!(e.length >= 0.7);
            }
        }
    }
}
