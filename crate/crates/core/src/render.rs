//! Binary PPM/PGM panels of maps, predictions and paths.
//!
//! Scalar panels share one fixed color ramp and are scaled to the panel's own
//! value range; the range goes into a sidecar `.txt` next to the image.
//! Rendering is a pure function of its inputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dpt::SlipPrediction;
use crate::gridworld::{Direction, EdgeId, GridGraph};
use crate::terraingen::TerrainInstance;

/// Stops of the color ramp, dark to bright; luminance rises monotonically.
pub const RAMP: [[u8; 3]; 5] = [[0, 0, 4], [87, 16, 110], [188, 55, 84], [249, 142, 9], [252, 255, 164]];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn get(&self, r: usize, c: usize) -> [u8; 3] {
        let i = 3 * (r * self.width + c);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        if r < self.height && c < self.width {
            let i = 3 * (r * self.width + c);
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, k: usize) -> Image {
        let k = k.max(1);
        let mut out = Image::new(self.width * k, self.height * k);
        for r in 0..out.height {
            for c in 0..out.width {
                out.set(r, c, self.get(r / k, c / k));
            }
        }
        out
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }
}

/// 8-bit grayscale image as binary PGM.
pub fn write_pgm<W: Write>(width: usize, height: usize, gray: &[u8], mut out: W) -> std::io::Result<()> {
    assert_eq!(gray.len(), width * height);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(gray)
}

/// Ramp color at `t` in `[0, 1]` (clamped; NaN maps to the first stop).
pub fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let a = RAMP[i][ch] as f64;
        let b = RAMP[i + 1][ch] as f64;
        out[ch] = (a + (b - a) * f).round() as u8;
    }
    out
}

/// Per node, the mean of the finite values on its outgoing edges (NaN when
/// there are none).
pub fn node_field(graph: &GridGraph, edge_values: &[f64]) -> Vec<f64> {
    (0..graph.node_count())
        .map(|v| {
            let mut s = 0.0;
            let mut n = 0;
            for d in Direction::ALL {
                let e = EdgeId::new(v, d);
                if graph.is_valid(e) {
                    let x = edge_values[e.slot()];
                    if x.is_finite() {
                        s += x;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        })
        .collect()
}

/// Finite minimum and maximum; `(0, 0)` when nothing is finite.
pub fn value_range(values: &[f64]) -> (f64, f64) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 0.0)
    }
}

/// Scalar field on the ramp, scaled to `range`.
pub fn scalar_image(values: &[f64], height: usize, width: usize, range: (f64, f64)) -> Image {
    let mut img = Image::new(width, height);
    let span = range.1 - range.0;
    for (i, &v) in values.iter().enumerate() {
        let t = if span > 0.0 { (v - range.0) / span } else { 0.0 };
        img.set(i / width, i % width, ramp(t));
    }
    img
}

pub fn color_image(map: &TerrainInstance) -> Image {
    Image { width: map.width, height: map.height, data: map.colors.clone() }
}

/// Heights stretched to the full gray range.
pub fn height_gray(map: &TerrainInstance) -> Vec<u8> {
    let h: Vec<f64> = map.heights.iter().map(|&v| v as f64).collect();
    let (lo, hi) = value_range(&h);
    let span = hi - lo;
    h.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect()
}

/// Draws a path in `color`, a hollow square around the start and an
/// eight-armed star on the goal. `scale` is the factor `img` was upscaled by.
pub fn overlay_path(img: &mut Image, graph: &GridGraph, path: &[usize], scale: usize, color: [u8; 3]) {
    let k = scale.max(1);
    let center = |v: usize| {
        let (r, c) = graph.coords(v);
        (r * k + k / 2, c * k + k / 2)
    };
    for w in path.windows(2) {
        let (r0, c0) = center(w[0]);
        let (r1, c1) = center(w[1]);
        for r in r0.min(r1)..=r0.max(r1) {
            for c in c0.min(c1)..=c0.max(c1) {
                img.set(r, c, color);
            }
        }
    }
    let (Some(&start), Some(&goal)) = (path.first(), path.last()) else {
        return;
    };
    let arm = (k + 1) as i64;
    let mut put = |r: i64, c: i64| {
        if r >= 0 && c >= 0 {
            img.set(r as usize, c as usize, color);
        }
    };
    let (sr, sc) = center(start);
    let (sr, sc) = (sr as i64, sc as i64);
    for d in -arm..=arm {
        put(sr - arm, sc + d);
        put(sr + arm, sc + d);
        put(sr + d, sc - arm);
        put(sr + d, sc + arm);
    }
    let (gr, gc) = center(goal);
    let (gr, gc) = (gr as i64, gc as i64);
    for d in 0..=arm {
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
            put(gr + dr * d, gc + dc * d);
        }
    }
}

/// Writes `<name>.ppm` and, for scalar panels, `<name>.txt` with the bounds
/// of the ramp.
fn save(dir: &Path, name: &str, img: &Image, legend: Option<(&str, (f64, f64))>) -> std::io::Result<()> {
    img.write_ppm(fs::File::create(dir.join(format!("{name}.ppm")))?)?;
    if let Some((what, (lo, hi))) = legend {
        let text = format!("panel {name}\nquantity {what}\nramp dark-to-bright\nmin {lo}\nmax {hi}\n");
        fs::write(dir.join(format!("{name}.txt")), text)?;
    }
    Ok(())
}

/// The panel set for one map: colors, heights, ground-truth slip, predicted
/// mean, absolute error and the three standard deviations, plus one overlay
/// per path on the color image.
pub fn render_map(
    dir: &Path,
    map: &TerrainInstance,
    pred: &SlipPrediction,
    paths: &[(&str, &[usize])],
    scale: usize,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let g = map.graph();
    let (h, w) = (map.height, map.width);
    save(dir, "color", &color_image(map).upscale(scale), None)?;
    write_pgm(w, h, &height_gray(map), fs::File::create(dir.join("height.pgm"))?)?;
    let labels: Vec<f64> = map.slip.iter().map(|&v| v as f64).collect();
    let abs_err: Vec<f64> = pred.mean.iter().zip(&labels).map(|(m, l)| (m - l).abs()).collect();
    let sd = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<f64>>();
    let panels: [(&str, &str, Vec<f64>); 7] = [
        ("slip", "ground-truth slip", labels.clone()),
        ("prediction", "predicted mean slip", pred.mean.clone()),
        ("abs_error", "absolute error of the mean", abs_err),
        ("sd_total", "total standard deviation", sd(&pred.total)),
        ("sd_aleatoric", "aleatoric standard deviation", sd(&pred.aleatoric)),
        ("sd_epistemic", "epistemic standard deviation", sd(&pred.epistemic)),
        ("flat_prediction", "predicted slip at zero pitch", pred.flat_mean.clone().unwrap_or_else(|| vec![f64::NAN; pred.slots])),
    ];
    for (name, what, values) in panels {
        let field = node_field(&g, &values);
        let range = value_range(&field);
        save(dir, name, &scalar_image(&field, h, w, range).upscale(scale), Some((what, range)))?;
    }
    for (label, path) in paths {
        let mut img = color_image(map).upscale(scale);
        overlay_path(&mut img, &g, path, scale, [255, 255, 255]);
        save(dir, &format!("path_{label}"), &img, None)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_monotone_in_luminance() {
        let lum = |c: [u8; 3]| 0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64;
        let mut prev = -1.0;
        for i in 0..=100 {
            let l = lum(ramp(i as f64 / 100.0));
            assert!(l >= prev, "step {i}");
            prev = l;
        }
        assert_eq!(ramp(0.0), RAMP[0]);
        assert_eq!(ramp(1.0), RAMP[4]);
        assert_eq!(ramp(-3.0), ramp(0.0));
        assert_eq!(ramp(f64::NAN), RAMP[0]);
    }

    #[test]
    fn ppm_header_and_size() {
        let mut img = Image::new(3, 2);
        img.set(1, 2, [1, 2, 3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(buf.len(), 11 + 18);
        assert_eq!(&buf[buf.len() - 3..], &[1, 2, 3]);
        let mut g = Vec::new();
        write_pgm(2, 2, &[0, 1, 2, 3], &mut g).unwrap();
        assert_eq!(g, b"P5\n2 2\n255\n\x00\x01\x02\x03");
    }

    #[test]
    fn upscale_repeats_pixels() {
        let mut img = Image::new(2, 1);
        img.set(0, 1, [9, 9, 9]);
        let big = img.upscale(3);
        assert_eq!((big.width, big.height), (6, 3));
        assert_eq!(big.get(2, 3), [9, 9, 9]);
        assert_eq!(big.get(2, 2), [0, 0, 0]);
    }

    #[test]
    fn node_field_averages_outgoing_edges() {
        let g = GridGraph::build(&[0.0; 4], 2, 2, 1.0).unwrap();
        let mut vals = vec![f64::NAN; g.slot_count()];
        vals[EdgeId::new(0, Direction::East).slot()] = 1.0;
        vals[EdgeId::new(0, Direction::South).slot()] = 3.0;
        let f = node_field(&g, &vals);
        assert_eq!(f[0], 2.0);
        assert!(f[3].is_nan());
        assert_eq!(value_range(&f), (2.0, 2.0));
    }
}
