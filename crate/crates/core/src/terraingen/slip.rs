use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gridworld::{EdgeId, GridGraph};

/// Latent slip curve of one terrain class.
///
/// `f(phi) = s0 + k_up (exp(g_up phi) - 1)` for ascent and
/// `s0 - k_down (exp(-g_down phi) - 1)` for descent, clamped to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlipFunctionParams {
    pub class: u8,
    pub s0: f64,
    pub k_up: f64,
    pub g_up: f64,
    pub k_down: f64,
    pub g_down: f64,
    pub sigma: f64,
}

const THIRTY_DEG: f64 = std::f64::consts::PI / 6.0;

impl SlipFunctionParams {
    /// Builds the curve from its values at +-30 degrees and the curvatures
    /// (per radian).
    pub fn from_endpoints(class: u8, s0: f64, up30: f64, g_up: f64, down30: f64, g_down: f64, sigma: f64) -> Self {
        SlipFunctionParams {
            class,
            s0,
            k_up: (up30 - s0) / ((g_up * THIRTY_DEG).exp() - 1.0),
            g_up,
            k_down: (s0 - down30) / ((g_down * THIRTY_DEG).exp() - 1.0),
            g_down,
            sigma,
        }
    }

    pub fn latent(&self, phi: f64) -> f64 {
        let v = if phi >= 0.0 {
            self.s0 + self.k_up * ((self.g_up * phi).exp() - 1.0)
        } else {
            self.s0 - self.k_down * ((-self.g_down * phi).exp() - 1.0)
        };
        v.clamp(-1.0, 1.0)
    }
}

/// The ten classes, ordered roughly from firm to treacherous ground.
pub fn default_slip_table() -> Vec<SlipFunctionParams> {
    #[rustfmt::skip]
    let rows: [(f64, f64, f64, f64, f64, f64); 10] = [
        (0.02, 0.35, 2.0, -0.20, 2.0, 0.02),
        (0.05, 0.50, 3.0, -0.25, 2.0, 0.03),
        (0.00, 0.30, 1.5, -0.30, 1.5, 0.02),
        (0.08, 0.90, 2.0, -0.50, 2.5, 0.05),
        (0.10, 0.98, 1.5, -0.60, 2.0, 0.08),
        (0.03, 0.60, 3.0, -0.60, 3.0, 0.04),
        (0.12, 0.99, 1.0, -0.80, 2.0, 0.10),
        (0.05, 0.95, 2.0, -0.40, 3.0, 0.06),
        (0.15, 0.99, 2.0, -0.95, 2.0, 0.07),
        (0.04, 0.45, 2.5, -0.45, 2.5, 0.03),
    ];
    rows.iter()
        .enumerate()
        .map(|(c, &(s0, up, gu, down, gd, sigma))| SlipFunctionParams::from_endpoints(c as u8, s0, up, gu, down, gd, sigma))
        .collect()
}

/// One label per edge slot (`4 * H * W`), NaN where the slot leaves the grid.
/// Each edge uses its source node's class; noise is drawn in slot order.
pub fn sample_slip_labels(graph: &GridGraph, classes: &[u8], params: &[SlipFunctionParams], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..graph.slot_count() as u32)
        .map(|s| {
            let e = EdgeId(s);
            if !graph.is_valid(e) {
                return f32::NAN;
            }
            let p = &params[classes[e.source()] as usize];
            let eps: f64 = StandardNormal.sample(&mut rng);
            (p.latent(graph.pitch(e)) + p.sigma * eps) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_satisfies_class_invariants() {
        let table = default_slip_table();
        assert_eq!(table.len(), 10);
        for p in &table {
            assert!(p.sigma > 0.0);
            let mut prev = -2.0;
            for i in -300..=300 {
                let v = p.latent((i as f64 / 10.0).to_radians());
                assert!(v > prev, "class {} not increasing at {i}", p.class);
                assert!(v > -1.0 && v < 1.0);
                prev = v;
            }
        }
    }

    #[test]
    fn endpoints_are_hit() {
        let p = SlipFunctionParams::from_endpoints(0, 0.1, 0.9, 4.0, -0.6, 3.0, 0.05);
        assert!((p.latent(THIRTY_DEG) - 0.9).abs() < 1e-12);
        assert!((p.latent(-THIRTY_DEG) + 0.6).abs() < 1e-12);
        assert_eq!(p.latent(0.0), 0.1);
    }

    #[test]
    fn noiseless_flat_label_is_offset() {
        let g = GridGraph::build(&[0.0; 9], 3, 3, 1.0).unwrap();
        let mut p = default_slip_table();
        p.iter_mut().for_each(|p| p.sigma = 0.0);
        let classes = [3u8; 9];
        let labels = sample_slip_labels(&g, &classes, &p, 1);
        for e in g.edges() {
            assert_eq!(labels[e.id.slot()] as f64, p[3].s0 as f32 as f64);
        }
        assert_eq!(labels.iter().filter(|v| v.is_nan()).count(), 12);
    }

    #[test]
    fn reverse_edge_uses_negated_pitch() {
        let g = GridGraph::build(&[0.0, 0.3, 0.0, 0.0], 2, 2, 1.0).unwrap();
        let mut p = default_slip_table();
        p.iter_mut().for_each(|p| p.sigma = 0.0);
        let labels = sample_slip_labels(&g, &[4; 4], &p, 0);
        let up = g.edge_between(0, 1).unwrap();
        let down = g.edge_between(1, 0).unwrap();
        assert_eq!(labels[up.slot()], p[4].latent(g.pitch(up)) as f32);
        assert_eq!(g.pitch(down), -g.pitch(up));
        assert_eq!(labels[down.slot()], p[4].latent(-g.pitch(up)) as f32);
    }

    #[test]
    fn label_mean_matches_latent() {
        // East edges of a constant ramp all climb at 20 degrees.
        let (h, w) = (160, 320);
        let rise = 20f64.to_radians().tan();
        let heights: Vec<f32> = (0..h * w).map(|v| ((v % w) as f64 * rise) as f32).collect();
        let g = GridGraph::build(&heights, h, w, 1.0).unwrap();
        let table = default_slip_table();
        let classes = vec![6u8; h * w];
        let mut sum = 0.0;
        let mut n = 0usize;
        for seed in 0..2 {
            let labels = sample_slip_labels(&g, &classes, &table, seed);
            for e in g.edges().filter(|e| e.id.direction() == crate::gridworld::Direction::East) {
                sum += labels[e.id.slot()] as f64;
                n += 1;
            }
        }
        let p = table[6];
        let expected = p.latent(rise.atan());
        assert!(n >= 100_000);
        assert!((sum / n as f64 - expected).abs() < 3.0 * p.sigma / (n as f64).sqrt() + 1e-6);
    }
}
