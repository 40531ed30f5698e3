use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::appearance::{assign_classes, quantize, shade_with_light, LightRange, DEFAULT_PALETTE};
use super::fractal::{add_crater, generate_fractal_heights, Crater};
use super::slip::{default_slip_table, sample_slip_labels, SlipFunctionParams};
use super::{derive_seed, TerrainError};
use crate::gridworld::GridGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "in-domain")]
    InDomain,
    /// Unfamiliar geometry: a steep crater.
    #[serde(rename = "ug")]
    Ug,
    /// Unfamiliar appearance: low sun.
    #[serde(rename = "ua")]
    Ua,
    #[serde(rename = "uga")]
    Uga,
}

impl Subset {
    pub const ALL: [Subset; 6] = [Subset::Train, Subset::Val, Subset::InDomain, Subset::Ug, Subset::Ua, Subset::Uga];
    pub const TEST: [Subset; 4] = [Subset::InDomain, Subset::Ug, Subset::Ua, Subset::Uga];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::InDomain => "in-domain",
            Subset::Ug => "ug",
            Subset::Ua => "ua",
            Subset::Uga => "uga",
        }
    }

    pub fn parse(s: &str) -> Option<Subset> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn has_crater(self) -> bool {
        matches!(self, Subset::Ug | Subset::Uga)
    }

    pub fn low_light(self) -> bool {
        matches!(self, Subset::Ua | Subset::Uga)
    }

    /// Seed namespace; the four test subsets share one so that test map `i`
    /// has the same template, classes, azimuth and noise stream in each.
    fn group(self) -> u64 {
        match self {
            Subset::Train => 1,
            Subset::Val => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSize {
    pub maps: usize,
    pub templates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    /// RMS rise over run of template edges.
    pub roughness: f64,
    pub num_classes: usize,
    pub train: SplitSize,
    pub val: SplitSize,
    /// Size of each of the four test subsets.
    pub test: SplitSize,
    pub in_domain_light: LightRange,
    pub low_light: LightRange,
    pub crater_slope_deg: [f64; 2],
    pub crater_radius: [f64; 2],
    pub palette: Vec<[u8; 3]>,
    pub slip_table: Vec<SlipFunctionParams>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            height: 48,
            width: 48,
            resolution: 1.0,
            roughness: 0.13,
            num_classes: 10,
            train: SplitSize { maps: 500, templates: 25 },
            val: SplitSize { maps: 125, templates: 6 },
            test: SplitSize { maps: 50, templates: 5 },
            in_domain_light: LightRange::IN_DOMAIN,
            low_light: LightRange::LOW_SUN,
            crater_slope_deg: [17.5, 30.0],
            crater_radius: [9.0, 13.0],
            palette: DEFAULT_PALETTE.to_vec(),
            slip_table: default_slip_table(),
        }
    }
}

impl DatasetConfig {
    pub fn split_size(&self, subset: Subset) -> SplitSize {
        match subset {
            Subset::Train => self.train,
            Subset::Val => self.val,
            _ => self.test,
        }
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        let bad = |m: &str| Err(TerrainError::Format(m.to_string()));
        if self.height < 2 || self.width < 2 {
            return bad("dataset.height and dataset.width must be at least 2");
        }
        if !(self.resolution > 0.0) {
            return bad("dataset.resolution must be positive");
        }
        if !(self.roughness >= 0.0) {
            return bad("dataset.roughness must be non-negative");
        }
        if self.num_classes == 0 || self.num_classes > self.palette.len() || self.num_classes > self.slip_table.len() {
            return bad("dataset.num_classes must be at least 1 and covered by dataset.palette and dataset.slip_table");
        }
        for (name, s) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if s.maps > 0 && s.templates == 0 {
                return Err(TerrainError::Format(format!("dataset.{name}.templates must be positive")));
            }
        }
        for (name, l) in [("in_domain_light", self.in_domain_light), ("low_light", self.low_light)] {
            if !(l.z_min > 0.0 && l.z_min <= l.z_max && l.z_max <= 1.0) {
                return Err(TerrainError::Format(format!("dataset.{name} needs 0 < z_min <= z_max <= 1")));
            }
        }
        if self.slip_table.iter().any(|p| !(p.sigma >= 0.0)) {
            return bad("dataset.slip_table sigma must be non-negative");
        }
        Ok(())
    }
}

/// One generated map with its hidden ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainInstance {
    pub subset: Subset,
    pub index: usize,
    pub template_index: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub heights: Vec<f32>,
    /// Row-major RGB, `3 * H * W` bytes.
    pub colors: Vec<u8>,
    pub classes: Vec<u8>,
    /// Per edge slot, NaN outside the grid.
    pub slip: Vec<f32>,
    pub light: [f64; 3],
    pub crater: Option<Crater>,
}

impl TerrainInstance {
    pub fn graph(&self) -> GridGraph {
        GridGraph::build(&self.heights, self.height, self.width, self.resolution).expect("instance heights are finite")
    }

    /// Colors in `[0, 1]` as an `H x W x 3` array.
    pub fn colors_f32(&self) -> Vec<f32> {
        self.colors.iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn stem(&self) -> String {
        format!("{}-{:04}", self.subset.name(), self.index)
    }

    pub fn record(&self) -> MapRecord {
        MapRecord {
            subset: self.subset,
            index: self.index,
            template_index: self.template_index,
            seed: self.seed,
            light: self.light,
            crater: self.crater,
            stem: self.stem(),
        }
    }
}

/// Generates map `index` of `subset`.
pub fn generate_instance(config: &DatasetConfig, master_seed: u64, subset: Subset, index: usize) -> TerrainInstance {
    let size = config.split_size(subset);
    let template_index = index % size.templates.max(1);
    let group = subset.group();
    let template_seed = derive_seed(master_seed, &[group, 0, template_index as u64]);
    let seed = derive_seed(master_seed, &[group, 1, index as u64]);
    let mut template = generate_fractal_heights(template_seed, config.height, config.width, config.resolution, config.roughness);
    if subset.has_crater() {
        template = add_crater(&template, derive_seed(seed, &[10]), config.crater_slope_deg, config.crater_radius);
    }
    let classes = assign_classes(config.height, config.width, derive_seed(seed, &[1]), config.num_classes);
    let range = if subset.low_light() { config.low_light } else { config.in_domain_light };
    let light = range.sample(derive_seed(seed, &[2]));
    let colors = quantize(&shade_with_light(&template, &classes, &config.palette, light));
    let graph = GridGraph::build(&template.heights, config.height, config.width, config.resolution).expect("generated heights are finite");
    let slip = sample_slip_labels(&graph, &classes, &config.slip_table, derive_seed(seed, &[3]));
    TerrainInstance {
        subset,
        index,
        template_index,
        seed,
        height: config.height,
        width: config.width,
        resolution: config.resolution,
        heights: template.heights,
        colors,
        classes,
        slip,
        light,
        crater: template.crater,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub subset: Subset,
    pub index: usize,
    pub template_index: usize,
    pub seed: u64,
    pub light: [f64; 3],
    pub crater: Option<Crater>,
    pub stem: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    master_seed: u64,
    config: DatasetConfig,
    maps: Vec<MapRecord>,
}

/// All six subsets in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub master_seed: u64,
    pub config: DatasetConfig,
    pub maps: Vec<TerrainInstance>,
}

impl Dataset {
    pub fn split(&self, subset: Subset) -> Vec<&TerrainInstance> {
        self.maps.iter().filter(|m| m.subset == subset).collect()
    }
}

pub fn build_dataset(config: &DatasetConfig, master_seed: u64) -> Result<Dataset, TerrainError> {
    config.validate()?;
    let jobs: Vec<(Subset, usize)> = Subset::ALL.iter().flat_map(|&s| (0..config.split_size(s).maps).map(move |i| (s, i))).collect();
    let maps = jobs.par_iter().map(|&(s, i)| generate_instance(config, master_seed, s, i)).collect();
    Ok(Dataset { master_seed, config: config.clone(), maps })
}

const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TerrainError + '_ {
    move |source| TerrainError::Io { path: path.display().to_string(), source }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>, TerrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(TerrainError::Format(format!("{}: expected {} bytes, found {}", path.display(), expected * 4, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>, TerrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(TerrainError::Format(format!("{}: expected {expected} bytes, found {}", path.display(), bytes.len())));
    }
    Ok(bytes)
}

fn map_path(dir: &Path, stem: &str, kind: &str) -> PathBuf {
    dir.join("maps").join(format!("{stem}.{kind}.bin"))
}

/// Writes `manifest.json` and four binary files per map under `maps/`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), TerrainError> {
    let maps_dir = dir.join("maps");
    fs::create_dir_all(&maps_dir).map_err(io_err(&maps_dir))?;
    for m in &ds.maps {
        let stem = m.stem();
        let files: [(&str, Vec<u8>); 4] = [
            ("heights", f32_bytes(&m.heights)),
            ("colors", m.colors.clone()),
            ("classes", m.classes.clone()),
            ("slip", f32_bytes(&m.slip)),
        ];
        for (kind, bytes) in files {
            let p = map_path(dir, &stem, kind);
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        master_seed: ds.master_seed,
        config: ds.config.clone(),
        maps: ds.maps.iter().map(|m| m.record()).collect(),
    };
    let p = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(io_err(&p))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, TerrainError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| TerrainError::Manifest { path: p.display().to_string(), source })?;
    if manifest.format != FORMAT {
        return Err(TerrainError::Format(format!("{}: unsupported format {}", p.display(), manifest.format)));
    }
    let cfg = &manifest.config;
    let n = cfg.height * cfg.width;
    let maps = manifest
        .maps
        .iter()
        .map(|r| {
            Ok(TerrainInstance {
                subset: r.subset,
                index: r.index,
                template_index: r.template_index,
                seed: r.seed,
                height: cfg.height,
                width: cfg.width,
                resolution: cfg.resolution,
                heights: read_f32(&map_path(dir, &r.stem, "heights"), n)?,
                colors: read_u8(&map_path(dir, &r.stem, "colors"), 3 * n)?,
                classes: read_u8(&map_path(dir, &r.stem, "classes"), n)?,
                slip: read_f32(&map_path(dir, &r.stem, "slip"), 4 * n)?,
                light: r.light,
                crater: r.crater,
            })
        })
        .collect::<Result<Vec<_>, TerrainError>>()?;
    Ok(Dataset { master_seed: manifest.master_seed, config: manifest.config, maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            height: 24,
            width: 24,
            train: SplitSize { maps: 4, templates: 2 },
            val: SplitSize { maps: 2, templates: 1 },
            test: SplitSize { maps: 2, templates: 1 },
            crater_radius: [5.0, 6.0],
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn desk_defaults() {
        let c = DatasetConfig::default();
        assert_eq!((c.train.maps, c.train.templates, c.val.maps, c.val.templates, c.test.maps), (500, 25, 125, 6, 50));
        assert_eq!((c.height, c.width, c.resolution), (48, 48, 1.0));
        assert_eq!(c.crater_slope_deg, [17.5, 30.0]);
    }

    #[test]
    fn uga_has_crater_and_low_light() {
        let c = DatasetConfig::default();
        for i in 0..5 {
            let m = generate_instance(&c, 7, Subset::Uga, i);
            assert!(m.crater.is_some());
            assert!((0.3..=0.5).contains(&m.light[2]));
            let d = generate_instance(&c, 7, Subset::InDomain, i);
            assert!(d.crater.is_none());
            assert!((0.8..=1.0).contains(&d.light[2]));
            assert_eq!(d.classes, m.classes);
        }
    }

    #[test]
    fn crater_maps_have_steep_edges() {
        let c = DatasetConfig::default();
        for i in 0..10 {
            let m = generate_instance(&c, 3, Subset::Ug, i);
            let g = m.graph();
            let total = g.edges().count() as f64;
            let steep = g.edges().filter(|e| e.pitch.abs().to_degrees() > 17.0).count() as f64;
            assert!(steep >= 0.01 * total);
        }
    }

    #[test]
    fn instances_hold_invariants() {
        let ds = build_dataset(&small(), 5).unwrap();
        assert_eq!(ds.maps.len(), 4 + 2 + 4 * 2);
        for m in &ds.maps {
            assert_eq!(m.slip.len(), 4 * 24 * 24);
            assert_eq!(m.slip.iter().filter(|v| v.is_nan()).count(), 4 * 24);
            assert!(m.classes.iter().any(|&k| k != m.classes[0]));
        }
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let cfg = small();
        let a = build_dataset(&cfg, 11).unwrap();
        let b = build_dataset(&cfg, 11).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        save_dataset(&a, da.path()).unwrap();
        save_dataset(&b, db.path()).unwrap();
        let listing = |d: &Path| {
            let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d.join("maps"))
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
                })
                .collect();
            v.sort();
            v.push(("manifest".into(), fs::read(d.join(MANIFEST)).unwrap()));
            v
        };
        assert_eq!(listing(da.path()), listing(db.path()));
        let back = load_dataset(da.path()).unwrap();
        assert_eq!(back.config, cfg);
        for (x, y) in back.maps.iter().zip(&a.maps) {
            assert_eq!(x.heights, y.heights);
            assert_eq!(x.colors, y.colors);
            assert_eq!(x.classes, y.classes);
            assert_eq!(x.slip.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.slip.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(x.record(), y.record());
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let cfg = small();
        let d = tempfile::tempdir().unwrap();
        save_dataset(&build_dataset(&cfg, 1).unwrap(), d.path()).unwrap();
        fs::remove_file(d.path().join("maps/val-0001.slip.bin")).unwrap();
        let err = load_dataset(d.path()).unwrap_err().to_string();
        assert!(err.contains("val-0001.slip.bin"), "{err}");
    }
}
