//! Closed simulation loop.

use upf_core::control::{
    build_environment, fixed_point_iteration, Agent, ConvergenceReport, DomainPolicy, Environment, GameSettings,
    TrajectoryPlan,
};
use upf_core::dynamics::{project_position, ControlInput, VehicleState};
use upf_core::fieldgrid::ScalarField;
use upf_core::population::{StyleLabel, StyleMeasures};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenario::{RunMode, Scenario};
use crate::SimError;

pub const CRITICAL_SEPARATION_M: f64 = 8.0;
pub const WARNING_SEPARATION_M: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u32,
    pub style: StyleLabel,
    pub host: bool,
    pub state: VehicleState,
    /// Control applied from this instant; absent on the final record.
    pub control: Option<ControlInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl FieldStats {
    pub fn of(f: &ScalarField) -> Self {
        Self {
            min: f.min(),
            max: f.max(),
            mean: f.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_s: f64,
    pub vehicles: Vec<VehicleRecord>,
    /// Host to nearest other vehicle; null when the host is alone.
    #[serde(with = "finite_or_null")]
    pub min_separation_m: f64,
    /// Closest pair over all vehicles; null for a single vehicle.
    #[serde(with = "finite_or_null")]
    pub min_pairwise_separation_m: f64,
    pub phi_host: f64,
    pub bbar_host: f64,
    pub rbar_host: f64,
    pub benefit: FieldStats,
    pub risk: FieldStats,
    pub phi: FieldStats,
    /// Best responses were recomputed at this step.
    pub replanned: bool,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    pub step: usize,
    pub benefit: ScalarField,
    pub risk: ScalarField,
    pub phi: ScalarField,
}

/// One fixed-point solve and the step it ran at.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceEntry {
    pub step: usize,
    pub t_s: f64,
    pub ids: Vec<u32>,
    pub report: ConvergenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    #[serde(with = "finite_or_null")]
    pub min_separation_m: f64,
    pub time_below_15m_s: f64,
    pub time_below_8m_s: f64,
    pub critical_m: f64,
    pub warning_m: f64,
    #[serde(with = "finite_or_null")]
    pub min_pairwise_separation_m: f64,
}

impl SafetyReport {
    pub fn from_records(records: &[StepRecord], dt: f64) -> Self {
        let min = |f: fn(&StepRecord) -> f64| records.iter().map(f).fold(f64::INFINITY, f64::min);
        let below = |th: f64| records.iter().filter(|r| r.min_separation_m < th).count() as f64 * dt;
        Self {
            min_separation_m: min(|r| r.min_separation_m),
            time_below_15m_s: below(WARNING_SEPARATION_M),
            time_below_8m_s: below(CRITICAL_SEPARATION_M),
            critical_m: CRITICAL_SEPARATION_M,
            warning_m: WARNING_SEPARATION_M,
            min_pairwise_separation_m: min(|r| r.min_pairwise_separation_m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<FieldSnapshot>,
    pub convergence: Vec<ConvergenceEntry>,
    /// Plans from the first fixed-point solve, by vehicle id.
    pub initial_plans: Vec<(u32, TrajectoryPlan)>,
}

impl RunLog {
    pub fn empty(scenario: Scenario) -> Self {
        Self {
            scenario,
            records: Vec::new(),
            snapshots: Vec::new(),
            convergence: Vec::new(),
            initial_plans: Vec::new(),
        }
    }

    pub fn safety(&self) -> SafetyReport {
        SafetyReport::from_records(&self.records, self.scenario.dt_s)
    }

    pub fn host_id(&self) -> u32 {
        self.scenario.host().id
    }
}

/// A run that aborted, with everything logged up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: SimError,
    pub partial: Box<RunLog>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.partial.records.len())
    }
}

impl std::error::Error for RunFailure {}

/// Minimum pairwise distance between projected positions; `+∞` for fewer
/// than two vehicles.
pub fn min_separation(states: &[VehicleState]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            best = best.min(project_position(a).distance(&project_position(b)));
        }
    }
    best
}

/// Distance from `states[host]` to the nearest other vehicle.
pub fn separation_from(states: &[VehicleState], host: usize) -> f64 {
    let h = project_position(&states[host]);
    states
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != host)
        .map(|(_, x)| h.distance(&project_position(x)))
        .fold(f64::INFINITY, f64::min)
}

fn game_settings(sc: &Scenario) -> Result<GameSettings, SimError> {
    Ok(GameSettings {
        model: sc.model()?,
        limits: sc.limits(),
        grid: sc.grid_spec()?,
        styles: sc.style_table(),
        field: sc.field_params(),
        fusion: sc.fusion_params(),
        lanes: sc.lane_selection(),
        kernel: sc.kernel(),
        best_response: sc.best_response(),
        domain: DomainPolicy::Saturate,
        preview_step: sc.planner.preview_step,
        max_iterations: sc.planner.max_iterations,
        w2_tol: sc.planner.w2_tol_m,
    })
}

/// Fields seen from the host: all other vehicles at their current states,
/// with positions outside the grid pinned to its boundary.
pub fn host_environment(sc: &Scenario, states: &[VehicleState]) -> Result<Environment, SimError> {
    let grid = sc.grid_spec()?;
    let measures = StyleMeasures::from_atoms(sc.vehicles.iter().zip(states).filter(|(v, _)| !v.host).map(|(v, x)| {
        let pinned = VehicleState {
            s: x.s.clamp(grid.s_min, grid.s_max),
            d: x.d.clamp(grid.d_min, grid.d_max),
            ..*x
        };
        (v.id, pinned, v.style)
    }));
    Ok(build_environment(
        &measures,
        &sc.style_table(),
        &grid,
        &sc.field_params(),
        &sc.fusion_params(),
    )?)
}

/// Simulate the scenario.
///
/// At every replanning step all players run the best-response iteration from
/// their current states; between replans each follows its latest plan. Every
/// vehicle is then propagated with seeded process noise.
pub fn run(sc: &Scenario, mode: RunMode) -> Result<RunLog, RunFailure> {
    let mut log = RunLog::empty(sc.clone());
    match run_into(sc, mode, &mut log) {
        Ok(()) => Ok(log),
        Err(error) => Err(RunFailure {
            error,
            partial: Box::new(log),
        }),
    }
}

fn run_into(sc: &Scenario, mode: RunMode, log: &mut RunLog) -> Result<(), SimError> {
    sc.validate()?;
    let settings = game_settings(sc)?;
    let model = &settings.model;
    let n_steps = sc.n_steps();
    let horizon = sc.planner.horizon_steps;
    let host_index = sc.vehicles.iter().position(|v| v.host).expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut states: Vec<VehicleState> = sc.vehicles.iter().map(|v| sc.initial_state(v)).collect();
    let mut guesses: Vec<Vec<ControlInput>> = vec![vec![ControlInput::ZERO; horizon]; states.len()];
    let mut plans: Vec<Vec<ControlInput>> = vec![Vec::new(); states.len()];
    let mut plan_start = 0usize;

    for k in 0..=n_steps {
        let t = k as f64 * sc.dt_s;
        let replan = k < n_steps
            && match mode {
                RunMode::ReplanEveryStep => k % sc.planner.replan_every_steps == 0,
                RunMode::PlanOnce => k == 0,
            };
        if replan {
            let agents: Vec<Agent> = sc
                .vehicles
                .iter()
                .zip(&states)
                .zip(&guesses)
                .map(|((v, x), guess)| Agent {
                    id: v.id,
                    state: *x,
                    style: v.style,
                    cost: {
                        let mut c = sc.cost_params(v.style);
                        c.target_lane_offset = sc.lane_center(v.lane);
                        c
                    },
                    select_lane: v.host && sc.planner.lane_selection,
                    scripted: !v.host && sc.planner.scripted_svs,
                    guess: guess.clone(),
                })
                .collect();
            let (outcomes, report) = fixed_point_iteration(&agents, &settings)?;
            if log.initial_plans.is_empty() {
                log.initial_plans = outcomes.iter().map(|o| (o.id, o.plan.clone())).collect();
            }
            log.convergence.push(ConvergenceEntry {
                step: k,
                t_s: t,
                ids: agents.iter().map(|a| a.id).collect(),
                report,
            });
            let shift = sc.planner.replan_every_steps;
            for (i, o) in outcomes.iter().enumerate() {
                plans[i] = o.plan.controls.clone();
                let mut next: Vec<ControlInput> = o.plan.controls.iter().skip(shift).copied().collect();
                let last = o.plan.controls.last().copied().unwrap_or_default();
                next.resize(horizon, last);
                guesses[i] = next;
            }
            plan_start = k;
        }

        let env = host_environment(sc, &states)?;
        let host_pos = project_position(&states[host_index]);
        let (bbar, rbar, phi) = env.values_at(host_pos);
        let controls: Vec<Option<ControlInput>> = if k < n_steps {
            plans
                .iter()
                .map(|p| Some(p.get(k - plan_start).copied().unwrap_or(ControlInput::ZERO)))
                .collect()
        } else {
            vec![None; states.len()]
        };
        if k % sc.snapshot_stride == 0 || k == n_steps {
            log.snapshots.push(FieldSnapshot {
                step: k,
                benefit: env.fields.benefit.clone(),
                risk: env.fields.risk.clone(),
                phi: env.unified.phi.clone(),
            });
        }
        log.records.push(StepRecord {
            t_s: t,
            vehicles: sc
                .vehicles
                .iter()
                .zip(&states)
                .zip(&controls)
                .map(|((v, x), u)| VehicleRecord {
                    id: v.id,
                    style: v.style,
                    host: v.host,
                    state: *x,
                    control: *u,
                })
                .collect(),
            min_separation_m: separation_from(&states, host_index),
            min_pairwise_separation_m: min_separation(&states),
            phi_host: phi,
            bbar_host: bbar,
            rbar_host: rbar,
            benefit: FieldStats::of(&env.fields.benefit),
            risk: FieldStats::of(&env.fields.risk),
            phi: FieldStats::of(&env.unified.phi),
            replanned: replan,
        });
        if k == n_steps {
            break;
        }
        for (x, u) in states.iter_mut().zip(&controls) {
            let w = model.sample_noise(&mut rng);
            *x = model.propagate_clamped(x, &u.unwrap_or_default(), &w, &settings.limits)?;
        }
    }
    Ok(())
}
