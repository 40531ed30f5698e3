use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Height map of one terrain template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainTemplate {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Row-major heights in meters.
    pub heights: Vec<f32>,
    pub seed: u64,
    pub crater: Option<Crater>,
}

/// Amplitude decay per diamond-square level, `2^-hurst`.
const HURST: f64 = 0.75;

/// Diamond-square heightfield cropped to `height x width`, then rescaled so
/// the RMS rise-over-run across grid edges equals `roughness`. A roughness of
/// zero gives a flat map.
pub fn generate_fractal_heights(seed: u64, height: usize, width: usize, resolution: f64, roughness: f64) -> TerrainTemplate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = 2;
    while size + 1 < height.max(width) {
        size *= 2;
    }
    let n = size + 1;
    let mut g = vec![0.0f64; n * n];
    let at = |r: usize, c: usize| r * n + c;
    for &(r, c) in &[(0, 0), (0, size), (size, 0), (size, size)] {
        g[at(r, c)] = rng.gen_range(-1.0..1.0);
    }
    let mut step = size;
    let mut amp = 1.0;
    while step > 1 {
        let half = step / 2;
        // Diamond: centers of squares.
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (g[at(r - half, c - half)] + g[at(r - half, c + half)] + g[at(r + half, c - half)] + g[at(r + half, c + half)]) / 4.0;
                g[at(r, c)] = avg + rng.gen_range(-amp..amp);
            }
        }
        // Square: edge midpoints, averaging the in-bounds neighbors.
        for r in (0..n).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if r >= half {
                    sum += g[at(r - half, c)];
                    cnt += 1.0;
                }
                if r + half < n {
                    sum += g[at(r + half, c)];
                    cnt += 1.0;
                }
                if c >= half {
                    sum += g[at(r, c - half)];
                    cnt += 1.0;
                }
                if c + half < n {
                    sum += g[at(r, c + half)];
                    cnt += 1.0;
                }
                g[at(r, c)] = sum / cnt + rng.gen_range(-amp..amp);
            }
        }
        step = half;
        amp *= 2f64.powf(-HURST);
    }

    let mut heights: Vec<f64> = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| g[at(r, c)]).collect();
    let mean = heights.iter().sum::<f64>() / heights.len() as f64;
    heights.iter_mut().for_each(|h| *h -= mean);
    let rms = rms_slope(&heights, height, width, resolution);
    let scale = if rms > 0.0 { roughness / rms } else { 0.0 };
    TerrainTemplate {
        height,
        width,
        resolution,
        heights: heights.iter().map(|h| (h * scale) as f32).collect(),
        seed,
        crater: None,
    }
}

fn rms_slope(h: &[f64], height: usize, width: usize, res: f64) -> f64 {
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for r in 0..height {
        for c in 0..width {
            if c + 1 < width {
                let d = (h[r * width + c + 1] - h[r * width + c]) / res;
                sum += d * d;
                cnt += 1;
            }
            if r + 1 < height {
                let d = (h[(r + 1) * width + c] - h[r * width + c]) / res;
                sum += d * d;
                cnt += 1;
            }
        }
    }
    (sum / cnt.max(1) as f64).sqrt()
}

/// Radially symmetric bowl with a raised rim.
///
/// With `rho = r / radius` the profile is `-D cos(pi rho)` inside the bowl and
/// `D (1 + cos(2 pi (rho - 1))) / 2` on the rim out to `rho = 1.5`; both parts
/// peak in slope at `pi D / radius`, so `D = tan(max_slope) radius / pi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crater {
    pub center_row: usize,
    pub center_col: usize,
    /// Bowl radius in meters.
    pub radius: f64,
    pub max_slope_deg: f64,
}

impl Crater {
    pub fn amplitude(&self) -> f64 {
        self.max_slope_deg.to_radians().tan() * self.radius / std::f64::consts::PI
    }

    /// Outer extent of the rim in meters.
    pub fn extent(&self) -> f64 {
        1.5 * self.radius
    }

    pub fn offset_at(&self, dist: f64) -> f64 {
        let d = self.amplitude();
        let rho = dist / self.radius;
        if rho <= 1.0 {
            -d * (std::f64::consts::PI * rho).cos()
        } else if rho <= 1.5 {
            d * (1.0 + (2.0 * std::f64::consts::PI * (rho - 1.0)).cos()) / 2.0
        } else {
            0.0
        }
    }
}

/// Superposes `crater` onto a copy of `template`.
pub fn apply_crater(template: &TerrainTemplate, crater: Crater) -> TerrainTemplate {
    let mut out = template.clone();
    let res = template.resolution;
    if crater.max_slope_deg != 0.0 {
        for r in 0..template.height {
            for c in 0..template.width {
                let dy = (r as f64 - crater.center_row as f64) * res;
                let dx = (c as f64 - crater.center_col as f64) * res;
                let off = crater.offset_at((dx * dx + dy * dy).sqrt());
                if off != 0.0 {
                    let h = &mut out.heights[r * template.width + c];
                    *h = (*h as f64 + off) as f32;
                }
            }
        }
    }
    out.crater = Some(crater);
    out
}

/// Adds one crater with its steepest wall drawn uniformly from `slope_range`
/// (degrees) and radius from `radius_range` (meters), centered so that the
/// rim stays inside the map.
pub fn add_crater(template: &TerrainTemplate, seed: u64, slope_range: [f64; 2], radius_range: [f64; 2]) -> TerrainTemplate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = if slope_range[1] > slope_range[0] { rng.gen_range(slope_range[0]..=slope_range[1]) } else { slope_range[0] };
    let res = template.resolution;
    let span = template.height.min(template.width) as f64 * res;
    // Rim extent 1.5R plus one cell of margin on both sides.
    let fit = ((span - 3.0 * res) / 3.0).max(res);
    let lo = radius_range[0].min(fit);
    let hi = radius_range[1].min(fit);
    let radius = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let margin = ((1.5 * radius) / res).ceil() as usize + 1;
    let pick = |rng: &mut ChaCha8Rng, n: usize| {
        if n > 2 * margin {
            rng.gen_range(margin..n - margin)
        } else {
            n / 2
        }
    };
    let center_row = pick(&mut rng, template.height);
    let center_col = pick(&mut rng, template.width);
    apply_crater(template, Crater { center_row, center_col, radius, max_slope_deg: slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::GridGraph;

    fn max_abs_pitch_deg(t: &TerrainTemplate) -> f64 {
        let g = GridGraph::build(&t.heights, t.height, t.width, t.resolution).unwrap();
        g.edges().map(|e| e.pitch.abs().to_degrees()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_roughness_is_flat() {
        let t = generate_fractal_heights(5, 48, 48, 1.0, 0.0);
        assert!(t.heights.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn same_seed_same_heights() {
        assert_eq!(generate_fractal_heights(9, 48, 40, 1.0, 0.13), generate_fractal_heights(9, 48, 40, 1.0, 0.13));
        assert_ne!(generate_fractal_heights(9, 48, 40, 1.0, 0.13).heights, generate_fractal_heights(10, 48, 40, 1.0, 0.13).heights);
    }

    #[test]
    fn crater_wall_slope_hits_target() {
        let flat = generate_fractal_heights(1, 48, 48, 1.0, 0.0);
        for target in [17.5, 23.0, 30.0] {
            for radius in [9.0, 13.0] {
                let t = apply_crater(&flat, Crater { center_row: 24, center_col: 24, radius, max_slope_deg: target });
                let m = max_abs_pitch_deg(&t);
                assert!((m - target).abs() <= 1.0, "target {target} radius {radius}: measured {m}");
            }
        }
    }

    #[test]
    fn zero_depth_crater_is_identity() {
        let t = generate_fractal_heights(2, 33, 33, 1.0, 0.13);
        let c = apply_crater(&t, Crater { center_row: 16, center_col: 16, radius: 8.0, max_slope_deg: 0.0 });
        assert_eq!(c.heights, t.heights);
    }

    #[test]
    fn sampled_crater_fits_inside() {
        let t = generate_fractal_heights(2, 48, 48, 1.0, 0.0);
        for seed in 0..50 {
            let c = add_crater(&t, seed, [17.5, 30.0], [9.0, 13.0]).crater.unwrap();
            let ext = (c.extent()).ceil() as usize;
            assert!(c.center_row >= ext && c.center_row + ext < 48, "{c:?}");
            assert!(c.center_col >= ext && c.center_col + ext < 48, "{c:?}");
            assert!((17.5..=30.0).contains(&c.max_slope_deg));
        }
    }
}
