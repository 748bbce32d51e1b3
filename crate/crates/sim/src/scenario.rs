//! Scenario files: TOML with SI units spelled out in key suffixes.

use std::fmt;
use std::path::Path;

use upf_core::control::{BestResponseConfig, CostParams, LaneSelection};
use upf_core::dynamics::{ActuatorLimits, DynamicsModel, VehicleState};
use upf_core::fieldgrid::GridSpec;
use upf_core::fields::FieldParams;
use upf_core::fusion::FusionParams;
use upf_core::population::{InteractionKernel, StyleLabel, StyleParameters, StyleTable};
use serde::{Deserialize, Serialize};

use crate::SimError;

pub const LANE_CHANGE_PRESET: &str = include_str!("../presets/lane_change.toml");
pub const OVERTAKING_PRESET: &str = include_str!("../presets/overtaking.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    ReplanEveryStep,
    PlanOnce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub dt_s: f64,
    pub duration_s: f64,
    pub lane_width_m: f64,
    pub n_lanes: u32,
    pub vehicle_width_m: f64,
    pub mode: RunMode,
    /// Field snapshot cadence in steps.
    pub snapshot_stride: usize,
    pub grid: GridConfig,
    pub dynamics: DynamicsConfig,
    pub fields: FieldConfig,
    pub fusion: FusionConfig,
    pub planner: PlannerConfig,
    pub styles: StylesConfig,
    pub vehicles: Vec<VehicleConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub s_min_m: f64,
    pub s_max_m: f64,
    pub d_min_m: f64,
    pub d_max_m: f64,
    pub n_s: usize,
    pub n_d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub sigma_w: f64,
    pub a_max_mps3: f64,
    pub omega_max_mps3: f64,
    pub accel_max_mps2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub tikhonov_b: f64,
    pub tikhonov_r: f64,
    pub v_max_mps: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub spread_sources: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Interface width in lateral grid spacings.
    pub epsilon_cells: f64,
    /// Pseudo-time step of the phase-field evolution.
    pub tau: f64,
    pub max_steps: usize,
    pub steady_tol: f64,
    pub stabilization: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon_steps: usize,
    /// Best responses are recomputed every this many steps; in between the
    /// previous plans are followed.
    pub replan_every_steps: usize,
    /// Plan step whose predicted states form the population measure.
    pub preview_step: usize,
    pub max_iterations: usize,
    pub w2_tol_m: f64,
    pub eta: f64,
    pub max_sweeps: usize,
    pub update_tol: f64,
    pub lane_selection: bool,
    pub corridor_behind_m: f64,
    pub corridor_ahead_m: f64,
    pub drift_gain: f64,
    /// Surrounding vehicles hold their speed instead of planning.
    pub scripted_svs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylesConfig {
    pub conservative: StyleConfig,
    pub cooperative: StyleConfig,
    pub aggressive: StyleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    pub alpha_b: f64,
    pub alpha_r: f64,
    pub lambda_b_m: f64,
    pub lambda_r_m: f64,
    pub sigma_b_m: f64,
    pub sigma_r_m: f64,
    pub r_s: f64,
    pub r_d: f64,
    pub target_speed_mps: f64,
    pub terminal_lane_weight: f64,
    pub terminal_speed_weight: f64,
    pub penalty_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub id: u32,
    #[serde(default)]
    pub host: bool,
    pub style: StyleLabel,
    pub s_m: f64,
    /// Lane index counted from the rightmost lane (0).
    pub lane: u32,
    pub speed_mps: f64,
}

/// Every violated invariant, one per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<String>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("; "))
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SimError::Parse(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, SimError> {
        let scenario: Scenario = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SimError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "lane_change" => LANE_CHANGE_PRESET,
            "overtaking" => OVERTAKING_PRESET,
            _ => return None,
        };
        Some(Self::from_toml_str(text).expect("bundled presets are valid"))
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_s / self.dt_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.dt_s > 0.0, "dt_s must be positive");
        check(self.duration_s >= 0.0, "duration_s must be nonnegative");
        if self.dt_s > 0.0 {
            let ratio = self.duration_s / self.dt_s;
            check((ratio - ratio.round()).abs() <= 1e-9, "duration_s must be an integral multiple of dt_s");
        }
        check(self.lane_width_m > 0.0, "lane_width_m must be positive");
        check(self.n_lanes >= 1, "n_lanes must be at least 1");
        check(
            self.vehicle_width_m > 0.0 && self.vehicle_width_m < self.lane_width_m,
            "vehicle_width_m must lie in (0, lane_width_m)",
        );
        check(self.snapshot_stride >= 1, "snapshot_stride must be at least 1");
        check(!self.vehicles.is_empty(), "at least one vehicle is required");
        check(
            self.vehicles.iter().filter(|v| v.host).count() == 1,
            "exactly one vehicle must be the host",
        );
        let mut ids: Vec<u32> = self.vehicles.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        ids.dedup();
        check(ids.len() == self.vehicles.len(), "vehicle ids must be unique");
        check(
            self.vehicles.iter().all(|v| v.lane < self.n_lanes),
            "vehicle lane index out of range",
        );
        check(
            self.vehicles.iter().all(|v| v.s_m.is_finite() && v.speed_mps.is_finite()),
            "vehicle positions and speeds must be finite",
        );
        let p = &self.planner;
        check(p.horizon_steps >= 1, "planner.horizon_steps must be at least 1");
        check(p.replan_every_steps >= 1, "planner.replan_every_steps must be at least 1");
        check(p.max_iterations >= 1, "planner.max_iterations must be at least 1");
        check(p.w2_tol_m > 0.0, "planner.w2_tol_m must be positive");
        check(p.corridor_behind_m >= 0.0 && p.corridor_ahead_m >= 0.0, "planner corridor extents must be nonnegative");
        let mut push_core = |r: upf_core::Result<()>| {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        };
        push_core(self.grid_spec().and_then(|g| g.validate()));
        push_core(DynamicsModel::new(self.dt_s.max(f64::MIN_POSITIVE), self.dynamics.sigma_w).map(|_| ()));
        push_core(self.field_params().validate());
        push_core(self.fusion_params().validate());
        push_core(self.best_response().validate());
        for label in StyleLabel::ALL {
            push_core(self.style_parameters(label).validate());
            push_core(self.cost_params(label).validate());
        }
        let d = &self.dynamics;
        if !(d.a_max_mps3 > 0.0 && d.omega_max_mps3 > 0.0 && d.accel_max_mps2 > 0.0) {
            errs.push("dynamics bounds must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(ValidationErrors(errs)))
        }
    }

    pub fn grid_spec(&self) -> upf_core::Result<GridSpec> {
        let g = &self.grid;
        GridSpec::new(g.s_min_m, g.s_max_m, g.d_min_m, g.d_max_m, g.n_s, g.n_d)
    }

    pub fn model(&self) -> upf_core::Result<DynamicsModel> {
        DynamicsModel::new(self.dt_s, self.dynamics.sigma_w)
    }

    pub fn limits(&self) -> ActuatorLimits {
        ActuatorLimits {
            a_max: self.dynamics.a_max_mps3,
            omega_max: self.dynamics.omega_max_mps3,
            accel_max: self.dynamics.accel_max_mps2,
        }
    }

    pub fn field_params(&self) -> FieldParams {
        let f = &self.fields;
        FieldParams {
            tikhonov_b: f.tikhonov_b,
            tikhonov_r: f.tikhonov_r,
            v_max: f.v_max_mps,
            cg_tol: f.cg_tol,
            cg_max_iter: f.cg_max_iter,
            spread_sources: f.spread_sources,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        let f = &self.fusion;
        FusionParams {
            epsilon: f.epsilon_cells,
            gamma: [f.gamma1, f.gamma2, f.gamma3, f.gamma4, f.gamma5],
            alpha1: f.alpha1,
            alpha2: f.alpha2,
            tau_step: f.tau,
            max_steps: f.max_steps,
            steady_tol: f.steady_tol,
            stabilization: f.stabilization,
            temperature: f.temperature,
        }
    }

    pub fn best_response(&self) -> BestResponseConfig {
        BestResponseConfig {
            eta: self.planner.eta,
            max_sweeps: self.planner.max_sweeps,
            tol: self.planner.update_tol,
            ..BestResponseConfig::default()
        }
    }

    pub fn lane_selection(&self) -> LaneSelection {
        LaneSelection {
            candidates: (0..self.n_lanes).map(|k| self.lane_center(k)).collect(),
            behind: self.planner.corridor_behind_m,
            ahead: self.planner.corridor_ahead_m,
        }
    }

    pub fn kernel(&self) -> InteractionKernel {
        InteractionKernel {
            gain: self.planner.drift_gain,
        }
    }

    fn style_config(&self, label: StyleLabel) -> &StyleConfig {
        match label {
            StyleLabel::Conservative => &self.styles.conservative,
            StyleLabel::Cooperative => &self.styles.cooperative,
            StyleLabel::Aggressive => &self.styles.aggressive,
        }
    }

    pub fn style_parameters(&self, label: StyleLabel) -> StyleParameters {
        let c = self.style_config(label);
        StyleParameters {
            alpha_b: c.alpha_b,
            alpha_r: c.alpha_r,
            lambda_b: c.lambda_b_m,
            lambda_r: c.lambda_r_m,
            sigma_b: c.sigma_b_m,
            sigma_r: c.sigma_r_m,
            r_s: c.r_s,
            r_d: c.r_d,
        }
    }

    pub fn style_table(&self) -> StyleTable {
        let mut table = StyleTable::default();
        for label in StyleLabel::ALL {
            *table.get_mut(label) = self.style_parameters(label);
        }
        table
    }

    pub fn cost_params(&self, label: StyleLabel) -> CostParams {
        let c = self.style_config(label);
        CostParams {
            r_s: c.r_s,
            r_d: c.r_d,
            terminal_lane_weight: c.terminal_lane_weight,
            terminal_speed_weight: c.terminal_speed_weight,
            target_speed: c.target_speed_mps,
            target_lane_offset: 0.0,
            penalty_weight: c.penalty_weight,
            road_half_width: 0.5 * self.n_lanes as f64 * self.lane_width_m,
            vehicle_width: self.vehicle_width_m,
        }
    }

    /// Lateral offset of a lane centre; lanes are symmetric about `d = 0`.
    pub fn lane_center(&self, lane: u32) -> f64 {
        (lane as f64 - 0.5 * (self.n_lanes as f64 - 1.0)) * self.lane_width_m
    }

    pub fn initial_state(&self, v: &VehicleConfig) -> VehicleState {
        VehicleState::cruising(v.s_m, self.lane_center(v.lane), v.speed_mps)
    }

    pub fn host(&self) -> &VehicleConfig {
        self.vehicles.iter().find(|v| v.host).expect("validated scenario has a host")
    }
}

/// Scenario from a path, or from a bundled preset name such as
/// `lane_change`.
pub fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    load_with_overrides(path, &[])
}

/// Like [`load_scenario`], applying `key=value` dotted overrides first.
pub fn load_with_overrides(path: &Path, overrides: &[(String, String)]) -> Result<Scenario, SimError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            match (path.exists(), stem) {
                (false, "lane_change") => LANE_CHANGE_PRESET.to_string(),
                (false, "overtaking") => OVERTAKING_PRESET.to_string(),
                _ => {
                    return Err(SimError::Io {
                        path: path.display().to_string(),
                        source: e,
                    })
                }
            }
        }
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| SimError::Parse(e.to_string()))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    Scenario::from_table(table)
}

/// Set an existing dotted key; array elements are addressed by index
/// (`vehicles.0.speed_mps`). The new value keeps the type of the old one.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), SimError> {
    let unknown = || SimError::Validation(ValidationErrors(vec![format!("unknown key `{key}`")]));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(unknown)?;
    if path.is_empty() {
        let slot = table.get_mut(*last).ok_or_else(unknown)?;
        *slot = coerce(slot, raw, key)?;
        return Ok(());
    }
    let mut cursor: &mut toml::Value = table.get_mut(parts[0]).ok_or_else(unknown)?;
    for seg in &path[1..] {
        cursor = step_into(cursor, seg).ok_or_else(unknown)?;
    }
    let slot = step_into(cursor, last).ok_or_else(unknown)?;
    *slot = coerce(slot, raw, key)?;
    Ok(())
}

fn step_into<'a>(v: &'a mut toml::Value, seg: &str) -> Option<&'a mut toml::Value> {
    match v {
        toml::Value::Table(t) => t.get_mut(seg),
        toml::Value::Array(a) => seg.parse::<usize>().ok().and_then(move |i| a.get_mut(i)),
        _ => None,
    }
}

fn coerce(old: &toml::Value, raw: &str, key: &str) -> Result<toml::Value, SimError> {
    let bad = |what: &str| SimError::Validation(ValidationErrors(vec![format!("`{key}` expects {what}, got `{raw}`")]));
    let raw = raw.trim();
    Ok(match old {
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?),
        toml::Value::String(_) => toml::Value::String(raw.trim_matches('"').to_string()),
        _ => return Err(bad("a scalar key")),
    })
}
