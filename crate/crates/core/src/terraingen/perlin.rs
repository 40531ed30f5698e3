use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Classic 2-D gradient noise over a seeded 256-entry permutation.
pub struct Perlin {
    perm: [u8; 512],
    offset: (f64, f64),
}

const GRADIENTS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

impl Perlin {
    /// The lattice is shifted by a random sub-cell offset so that fields with
    /// different seeds do not all vanish at the same integer points.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<u8> = (0..=255).collect();
        p.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        let offset = (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0));
        Perlin { perm, offset }
    }

    fn grad(&self, xi: usize, yi: usize, dx: f64, dy: f64) -> f64 {
        let h = self.perm[self.perm[xi & 255] as usize + (yi & 255)] as usize;
        let (gx, gy) = GRADIENTS[h & 7];
        gx * dx + gy * dy
    }

    pub fn noise(&self, x: f64, y: f64) -> f64 {
        let (x, y) = (x + self.offset.0, y + self.offset.1);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as i64 as usize, y0 as i64 as usize);
        let n00 = self.grad(xi, yi, fx, fy);
        let n10 = self.grad(xi + 1, yi, fx - 1.0, fy);
        let n01 = self.grad(xi, yi + 1, fx, fy - 1.0);
        let n11 = self.grad(xi + 1, yi + 1, fx - 1.0, fy - 1.0);
        let (u, v) = (fade(fx), fade(fy));
        lerp(lerp(n00, n10, u), lerp(n01, n11, u), v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_smooth() {
        let p = Perlin::new(3);
        let mut prev = p.noise(0.0, 0.3);
        for i in 1..2000 {
            let v = p.noise(i as f64 * 0.01, 0.3);
            assert!(v.abs() <= 1.0);
            assert!((v - prev).abs() < 0.05);
            prev = v;
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(Perlin::new(7).noise(1.3, 2.7), Perlin::new(7).noise(1.3, 2.7));
        assert_ne!(Perlin::new(7).noise(1.3, 2.7), Perlin::new(8).noise(1.3, 2.7));
    }
}
