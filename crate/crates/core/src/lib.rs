//! Localization of ground users from a UAV's ToA and GPS measurements.
//!
//! The crate simulates a mission (channel, NR timing, GPS), jointly estimates
//! the UAV trajectory and the user positions, tracks the Cramér–Rao bound of
//! the user estimates, and can steer the UAV greedily towards the waypoints
//! that shrink that bound the most.
//!
//! ```no_run
//! use uavloc::{config::parse_run_config, model::validate_scenario, mission::run_mission};
//!
//! let cfg = parse_run_config(&std::fs::read_to_string("run.toml")?)?;
//! let scenario = validate_scenario(cfg.scenario.clone())?;
//! let result = run_mission(&scenario, &cfg.mission_config())?;
//! println!("user rmse {:.2} m", result.metrics.user_rmse);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod channel;
pub mod config;
pub mod error;
pub mod export;
pub mod fim;
pub mod measlog;
pub mod mission;
pub mod model;
pub mod nr;
pub mod planner;
pub mod slam;
pub mod units;

pub use error::{Error, Result};
pub use fim::{crb_trace, improvement_matrix, InfoState, StepContribution};
pub use mission::{monte_carlo, run_mission, MissionConfig, MissionMode, MissionResult, ToaPath};
pub use model::{validate_scenario, MeasurementSample, Scenario, ToaNoiseModel, ValidatedScenario, Vec2, Vec3};
pub use slam::{solve_slam, SlamProblem, SolverConfig, StateVector};
