//! Uncertainty-aware rover navigation on deformable terrain.
//!
//! A slip ensemble predicts a Gaussian per grid edge from a color image, the
//! planner penalizes predicted spread, and the rover retunes per-channel
//! scale/shift layers on the slip it measures while driving.
//!
//! ```
//! use slipnav::dpt::{DptConfig, Ensemble};
//! use slipnav::mission::{run_mission, MissionConfig};
//! use slipnav::terraingen::{generate_instance, DatasetConfig, Subset};
//!
//! let data = DatasetConfig { height: 16, width: 16, ..DatasetConfig::default() };
//! let map = generate_instance(&data, 0, Subset::Uga, 0);
//! let ens = Ensemble::new(&DptConfig { conv_channels: vec![4], hidden: vec![8], ..DptConfig::default() }, 2, 0).unwrap();
//! let cfg = MissionConfig { start: (2, 2), goal: (13, 13), adapt: true, ..MissionConfig::default() };
//! let run = run_mission(&map, &ens, &cfg).unwrap();
//! println!("{}", run.outcome.cause.name());
//! ```

pub mod autodiff;
pub mod gridworld;
pub mod terraingen;
pub mod dpt;
pub mod riskplan;
pub mod adapt;
pub mod mission;
pub mod experiment;
pub mod render;
