use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perlin::Perlin;
use super::{derive_seed, TerrainTemplate};

/// Floor on the diffuse shading factor.
pub const AMBIENT: f64 = 0.1;

/// Base colors of the ten classes, 8-bit sRGB-like triples.
pub const DEFAULT_PALETTE: [[u8; 3]; 10] = [
    [207, 176, 138],
    [161, 112, 76],
    [143, 137, 130],
    [201, 123, 78],
    [96, 68, 55],
    [176, 153, 169],
    [129, 136, 97],
    [207, 193, 167],
    [116, 73, 81],
    [175, 152, 105],
];

/// Lattice spacing of the class fields as a fraction of the larger map side.
/// A quarter of the side fragments a 10-way argmax into ~90 clusters on a
/// 96x96 map; two thirds gives a median near 18.
const LATTICE_FRACTION: f64 = 2.0 / 3.0;

/// Per-node class ids: argmax over `num_classes` Perlin fields. Ties go to
/// the lower id.
///
/// Draws are repeated with a derived seed until at least two classes appear
/// (only possible when `num_classes >= 2`).
pub fn assign_classes(height: usize, width: usize, seed: u64, num_classes: usize) -> Vec<u8> {
    assert!(num_classes >= 1 && num_classes <= 256);
    if num_classes == 1 {
        return vec![0; height * width];
    }
    let wavelength = (height.max(width) as f64 * LATTICE_FRACTION).max(1.0);
    for attempt in 0u64.. {
        let fields: Vec<Perlin> = (0..num_classes).map(|c| Perlin::new(derive_seed(seed, &[attempt, c as u64]))).collect();
        let mut classes = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let (x, y) = (c as f64 / wavelength, r as f64 / wavelength);
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (k, f) in fields.iter().enumerate() {
                    let v = f.noise(x, y);
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                classes.push(best as u8);
            }
        }
        if height * width < 2 || classes.iter().any(|&k| k != classes[0]) {
            return classes;
        }
    }
    unreachable!()
}

/// Range of the vertical light component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRange {
    pub z_min: f64,
    pub z_max: f64,
}

impl LightRange {
    pub const IN_DOMAIN: LightRange = LightRange { z_min: 0.8, z_max: 1.0 };
    pub const LOW_SUN: LightRange = LightRange { z_min: 0.3, z_max: 0.5 };

    /// Unit light direction from a uniform azimuth and a uniform vertical
    /// component.
    pub fn sample(&self, seed: u64) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = rng.gen_range(0.0..std::f64::consts::TAU);
        let z = if self.z_max > self.z_min { rng.gen_range(self.z_min..=self.z_max) } else { self.z_min };
        light_from(psi, z)
    }
}

pub fn light_from(azimuth: f64, z: f64) -> [f64; 3] {
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let v = [rho * azimuth.cos(), rho * azimuth.sin(), z];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Unit surface normal at every node from central differences (one-sided on
/// the border). `x` grows with the column and `y` with the row.
pub fn surface_normals(t: &TerrainTemplate) -> Vec<[f64; 3]> {
    let (h, w, res) = (t.height, t.width, t.resolution);
    let z = |r: usize, c: usize| t.heights[r * w + c] as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let dzdx = (z(r, c1) - z(r, c0)) / ((c1 - c0).max(1) as f64 * res);
            let dzdy = (z(r1, c) - z(r0, c)) / ((r1 - r0).max(1) as f64 * res);
            let n = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            out.push([-dzdx / n, -dzdy / n, 1.0 / n]);
        }
    }
    out
}

pub fn shade_factor(normal: [f64; 3], light: [f64; 3]) -> f64 {
    let d = normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2];
    d.max(AMBIENT)
}

/// Shaded colors in `[0, 1]`, row-major RGB triples.
pub fn shade_with_light(t: &TerrainTemplate, classes: &[u8], palette: &[[u8; 3]], light: [f64; 3]) -> Vec<[f64; 3]> {
    surface_normals(t)
        .into_iter()
        .zip(classes)
        .map(|(n, &k)| {
            let s = shade_factor(n, light);
            let base = palette[k as usize];
            [0, 1, 2].map(|i| base[i] as f64 / 255.0 * s)
        })
        .collect()
}

/// Samples a light direction from `range` and shades the map.
pub fn shade_colors(t: &TerrainTemplate, classes: &[u8], palette: &[[u8; 3]], range: LightRange, seed: u64) -> (Vec<[f64; 3]>, [f64; 3]) {
    let light = range.sample(seed);
    (shade_with_light(t, classes, palette, light), light)
}

/// 8-bit storage form of shaded colors, `3 * H * W` bytes.
pub fn quantize(colors: &[[f64; 3]]) -> Vec<u8> {
    colors.iter().flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terraingen::generate_fractal_heights;

    fn components(classes: &[u8], h: usize, w: usize) -> usize {
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for s in 0..h * w {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(v) = stack.pop() {
                let (r, c) = (v / w, v % w);
                let mut push = |u: usize| {
                    if !seen[u] && classes[u] == classes[v] {
                        seen[u] = true;
                        stack.push(u);
                    }
                };
                if r > 0 {
                    push(v - w);
                }
                if r + 1 < h {
                    push(v + w);
                }
                if c > 0 {
                    push(v - 1);
                }
                if c + 1 < w {
                    push(v + 1);
                }
            }
        }
        count
    }

    #[test]
    fn single_class() {
        assert!(assign_classes(20, 20, 3, 1).iter().all(|&c| c == 0));
    }

    #[test]
    fn class_maps_form_clusters() {
        let mut counts = Vec::new();
        for seed in 0..100 {
            let m = assign_classes(96, 96, seed, 10);
            let distinct = (0..10u8).filter(|k| m.contains(k)).count();
            assert!((2..=10).contains(&distinct));
            counts.push(components(&m, 96, 96));
        }
        counts.sort();
        let median = counts[50];
        assert!((3..=30).contains(&median), "median cluster count {median}");
        assert_eq!(assign_classes(48, 48, 5, 10), assign_classes(48, 48, 5, 10));
    }

    #[test]
    fn overhead_light_on_flat_map_keeps_base_colors() {
        let t = generate_fractal_heights(0, 8, 8, 1.0, 0.0);
        let classes: Vec<u8> = (0..64).map(|i| (i % 10) as u8).collect();
        let colors = shade_with_light(&t, &classes, &DEFAULT_PALETTE, [0.0, 0.0, 1.0]);
        for (c, &k) in colors.iter().zip(&classes) {
            let base = DEFAULT_PALETTE[k as usize].map(|v| v as f64 / 255.0);
            assert_eq!(*c, base);
        }
    }

    #[test]
    fn back_facing_light_hits_ambient_floor() {
        assert_eq!(shade_factor([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]), AMBIENT);
        assert_eq!(shade_factor([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]), AMBIENT);
    }

    #[test]
    fn shading_stays_between_floor_and_base() {
        let t = generate_fractal_heights(11, 32, 32, 1.0, 0.3);
        let classes = assign_classes(32, 32, 11, 10);
        for range in [LightRange::IN_DOMAIN, LightRange::LOW_SUN] {
            let (colors, light) = shade_colors(&t, &classes, &DEFAULT_PALETTE, range, 2);
            assert!((light[2] >= range.z_min - 1e-12) && (light[2] <= range.z_max + 1e-12));
            assert!((light.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &k) in colors.iter().zip(&classes) {
                let base = DEFAULT_PALETTE[k as usize].map(|v| v as f64 / 255.0);
                for i in 0..3 {
                    assert!(c[i] <= base[i] + 1e-15 && c[i] >= AMBIENT * base[i] - 1e-15);
                }
            }
        }
    }

    #[test]
    fn light_draws_respect_ranges() {
        for seed in 0..200 {
            let a = LightRange::IN_DOMAIN.sample(seed);
            assert!((0.8..=1.0).contains(&a[2]));
            let b = LightRange::LOW_SUN.sample(seed);
            assert!((0.3..=0.5).contains(&b[2]));
        }
    }
}
