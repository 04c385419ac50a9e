//! TOML run configuration.
//!
//! ```toml
//! [scenario]
//! users = [[0.0, 40.0]]
//! uav_start = [0.0, 0.0, 30.0]
//! uav_terminal = [40.0, 0.0, 30.0]
//! mission_steps = 60
//! d_max = "5 m"              # scalars accept SI numbers or unit strings
//! sample_rate = "61.44 MHz"
//!
//! [scenario.toa_noise]
//! kind = "constant"
//! sigma0 = "12.5 ns"
//!
//! [solver]
//! max_iter = 100
//!
//! [mission]
//! mode = "greedy"            # or "fixed"
//! toa = "nr"                 # or "ideal"
//! ```
//!
//! Unknown keys are rejected at every level. Absent scenario keys take the
//! defaults documented on [`Scenario`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::DEFAULT_EPS_PRIOR;
use crate::mission::{straight_line_path, MissionConfig, MissionMode, ToaPath};
use crate::model::{Scenario, Vec3};
use crate::planner::DEFAULT_HEADINGS;
use crate::slam::SolverConfig;
use crate::units::UNIT_ERROR_TAG;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    #[default]
    Greedy,
    /// Follow `path`, or the straight line to the terminal when absent.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionOptions {
    pub mode: PlanMode,
    pub toa: ToaPath,
    pub resolve_every: usize,
    pub headings: usize,
    pub eps_prior: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cir_len: Option<usize>,
    pub init_margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<Vec3>>,
}

impl Default for MissionOptions {
    fn default() -> Self {
        Self {
            mode: PlanMode::Greedy,
            toa: ToaPath::Ideal,
            resolve_every: 1,
            headings: DEFAULT_HEADINGS,
            eps_prior: DEFAULT_EPS_PRIOR,
            cir_len: None,
            init_margin: 20.0,
            path: None,
        }
    }
}

/// Whole configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub mission: MissionOptions,
}

impl RunConfig {
    pub fn mission_config(&self) -> MissionConfig {
        let o = &self.mission;
        let s = &self.scenario;
        let mode = match o.mode {
            PlanMode::Greedy => MissionMode::GreedyPlan,
            PlanMode::Fixed => MissionMode::FixedPath(
                o.path
                    .clone()
                    .unwrap_or_else(|| straight_line_path(s.uav_start, s.uav_terminal, s.mission_steps)),
            ),
        };
        MissionConfig {
            mode,
            toa: o.toa,
            resolve_every: o.resolve_every,
            solver: self.solver,
            headings: o.headings,
            eps_prior: o.eps_prior,
            cir_len: o.cir_len,
            init_margin: o.init_margin,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| map_toml_error(text, e))
}

/// Scenario section of a run configuration, with defaults applied.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    parse_run_config(text).map(|c| c.scenario)
}

pub fn serialize_scenario(s: &Scenario) -> String {
    RunConfig {
        scenario: s.clone(),
        solver: SolverConfig::default(),
        mission: MissionOptions::default(),
    }
    .to_toml()
}

fn map_toml_error(text: &str, e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let key = rest.split('`').next().unwrap_or(rest).to_string();
        return Error::UnknownKey(key);
    }
    if let Some(pos) = msg.find(UNIT_ERROR_TAG) {
        return Error::Unit(msg[pos + UNIT_ERROR_TAG.len()..].trim().to_string());
    }
    let line = e
        .span()
        .map(|sp| text[..sp.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse { line, message: msg }
}
