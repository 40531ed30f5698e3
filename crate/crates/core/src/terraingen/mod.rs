//! Synthetic planetary terrain: fractal height templates, optional craters,
//! Perlin class clusters, shaded appearance, and per-edge slip labels drawn
//! from hidden class-specific slip curves.
//!
//! Every random choice is seeded from a master seed through [`derive_seed`],
//! so a dataset is a pure function of its configuration and that seed.

mod appearance;
mod dataset;
mod fractal;
mod perlin;
mod slip;

pub use appearance::{
    assign_classes, light_from, quantize, shade_colors, shade_factor, shade_with_light, surface_normals, LightRange, AMBIENT,
    DEFAULT_PALETTE,
};
pub use dataset::{build_dataset, generate_instance, load_dataset, save_dataset, Dataset, DatasetConfig, MapRecord, SplitSize, Subset, TerrainInstance};
pub use fractal::{add_crater, apply_crater, generate_fractal_heights, Crater, TerrainTemplate};
pub use perlin::Perlin;
pub use slip::{default_slip_table, sample_slip_labels, SlipFunctionParams};

#[derive(Debug, thiserror::Error)]
pub enum TerrainError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Manifest { path: String, source: serde_json::Error },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] crate::gridworld::GridError),
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed of `seed` along a path of tags.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019))))
}
