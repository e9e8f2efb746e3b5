use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::channel::{QualityLadder, SystemParams, UserProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
}

fn field(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { path: path.into(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NoTranscode,
    Transcode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    OptimalSmallGroups,
    Asymptotic,
    DcGeneral,
    Baseline1,
    Baseline2,
    Baseline3,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::OptimalSmallGroups => "optimal_small_groups",
            Scheme::Asymptotic => "asymptotic",
            Scheme::DcGeneral => "dc_general",
            Scheme::Baseline1 => "baseline1",
            Scheme::Baseline2 => "baseline2",
            Scheme::Baseline3 => "baseline3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepParam {
    K,
    M,
    #[serde(rename = "delta")]
    Delta,
    #[serde(rename = "tau")]
    Tau,
    #[serde(rename = "none")]
    None,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::K => "K",
            SweepParam::M => "M",
            SweepParam::Delta => "delta",
            SweepParam::Tau => "tau",
            SweepParam::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    #[serde(default)]
    pub values: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self { param: SweepParam::None, values: vec![] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum DirectionsSource {
    /// Uniform yaw, pitch from a clamped zero-mean normal; seeded from the experiment seed.
    #[default]
    Synthetic,
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub yaw_tiles: u32,
    pub pitch_tiles: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { yaw_tiles: 30, pitch_tiles: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FovConfig {
    pub width_deg: f64,
    pub height_deg: f64,
    /// Extra angle added on each side for prediction error.
    pub margin_deg: f64,
}

impl Default for FovConfig {
    fn default() -> Self {
        Self { width_deg: 100.0, height_deg: 100.0, margin_deg: 15.0 }
    }
}

/// Full-frame encoding rate per level; divided evenly over the tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    pub frame_rates_bps: Vec<f64>,
}

pub const DEFAULT_FRAME_RATES_BPS: [f64; 5] = [2.5e6, 5e6, 8e6, 12e6, 16e6];

impl Default for LadderConfig {
    fn default() -> Self {
        Self { frame_rates_bps: DEFAULT_FRAME_RATES_BPS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub dc_initial_points: usize,
    pub enumeration_cap: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { dc_initial_points: 1, enumeration_cap: 1_000_000 }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Scheme>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Scheme),
        Many(Vec<Scheme>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// One scheme or a list; every scheme runs on the same draws.
    #[serde(deserialize_with = "one_or_many")]
    pub scheme: Vec<Scheme>,
    #[serde(default)]
    pub sweep: Sweep,
    pub draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub system: SystemParams,
    #[serde(default)]
    pub ladder: LadderConfig,
    pub users: Vec<UserProfile>,
    #[serde(default)]
    pub directions: DirectionsSource,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub fov: FovConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ExperimentConfig {
    /// Reference setting: five users with unit gain, 1 µW transcoding power, levels (2,2,3,3,4).
    pub fn standard(scenario: Scenario, scheme: Vec<Scheme>) -> Self {
        let users = [2, 2, 3, 3, 4].iter().map(|&level| UserProfile { beta: 1.0, level, transcode_w: 1e-6 }).collect();
        Self {
            scenario,
            scheme,
            sweep: Sweep::default(),
            draws: 100,
            seed: 1,
            system: SystemParams::default(),
            ladder: LadderConfig::default(),
            users,
            directions: DirectionsSource::Synthetic,
            grid: GridConfig::default(),
            fov: FovConfig::default(),
            solver: SolverConfig::default(),
        }
    }

    pub fn ladder_is_default(&self) -> bool {
        self.ladder.frame_rates_bps == DEFAULT_FRAME_RATES_BPS
    }

    /// Per-tile ladder.
    pub fn tile_ladder(&self) -> QualityLadder {
        let tiles = f64::from(self.grid.yaw_tiles) * f64::from(self.grid.pitch_tiles);
        QualityLadder { rates_bps: self.ladder.frame_rates_bps.iter().map(|r| r / tiles).collect() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.draws == 0 {
            return Err(field("draws", "must be at least 1"));
        }
        if self.scheme.is_empty() {
            return Err(field("scheme", "needs at least one scheme"));
        }
        if self.scenario == Scenario::NoTranscode {
            if let Some(i) = self.scheme.iter().position(|s| *s == Scheme::Baseline3) {
                return Err(field(format!("scheme[{i}]"), "baseline3 is only defined for the transcode scenario"));
            }
        }
        self.system.validate().map_err(|e| field("system", e.to_string()))?;
        let ladder = self.tile_ladder();
        ladder.validate().map_err(|e| field("ladder.frame_rates_bps", e.to_string()))?;
        if self.grid.yaw_tiles == 0 || self.grid.pitch_tiles == 0 {
            return Err(field("grid", "tile counts must be positive"));
        }
        let fov_ok = self.fov.width_deg > 0.0
            && self.fov.width_deg <= 360.0
            && self.fov.height_deg > 0.0
            && self.fov.height_deg <= 180.0
            && self.fov.margin_deg >= 0.0
            && self.fov.margin_deg.is_finite();
        if !fov_ok {
            return Err(field("fov", "width in (0, 360], height in (0, 180], margin >= 0"));
        }
        if self.users.is_empty() {
            return Err(field("users", "needs at least one user"));
        }
        if self.users.len() > crate::geometry::UserSet::MAX_USERS {
            return Err(field("users", format!("at most {} users", crate::geometry::UserSet::MAX_USERS)));
        }
        for (i, u) in self.users.iter().enumerate() {
            u.validate(ladder.levels()).map_err(|e| field(format!("users[{i}]"), e.to_string()))?;
        }
        if self.solver.dc_initial_points == 0 {
            return Err(field("solver.dc_initial_points", "must be at least 1"));
        }
        let integral = |v: f64| v.fract() == 0.0 && v >= 1.0;
        for (i, &v) in self.sweep.values.iter().enumerate() {
            let path = format!("sweep.values[{i}]");
            match self.sweep.param {
                SweepParam::K if !(integral(v) && v as usize <= self.users.len()) => {
                    return Err(field(path, format!("K must be an integer in 1..={}", self.users.len())));
                }
                SweepParam::M if !integral(v) => return Err(field(path, "M must be a positive integer")),
                SweepParam::Tau if !integral(v) => return Err(field(path, "tau must be a positive integer")),
                SweepParam::Delta if !v.is_finite() => return Err(field(path, "delta must be finite")),
                _ => {}
            }
        }
        if self.sweep.param != SweepParam::None && self.sweep.values.is_empty() {
            return Err(field("sweep.values", "a sweep needs at least one value"));
        }
        if self.sweep.param == SweepParam::None && !self.sweep.values.is_empty() {
            return Err(field("sweep.values", "values given without a sweep parameter"));
        }
        Ok(())
    }
}

/// Parses and validates a TOML document; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        field(if path == "." { "<root>".to_string() } else { path }, e.into_inner().message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file; a relative direction file path is resolved against the config's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = parse_config(&text)?;
    if let DirectionsSource::Csv(p) = &cfg.directions {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.directions = DirectionsSource::Csv(dir.join(p));
            }
        }
    }
    Ok(cfg)
}
