//! Per-vehicle optimal control against the unified potential and the
//! population-level best-response iteration.
//!
//! A plan is found by a certainty-equivalent Pontryagin sweep: roll the
//! noise-free dynamics forward, integrate the adjoint backward from the
//! terminal gradient, move the controls toward the minimizer of the
//! Hamiltonian and keep the step only if the total cost does not increase.
//!
//! Discretization, with `F(x, u) = A x + B u + Δt·φ(x)`:
//!
//! ```text
//! J      = Δt Σ_k L(x_k, u_k) + Ψ(x_K)
//! Y_K    = ∇Ψ(x_K)
//! Y_k    = F_xᵀ Y_{k+1} + Δt ∇_x L(x_k, u_k)
//! ∂J/∂u_k = Δt R u_k + Bᵀ Y_{k+1}
//! ```

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix2, Matrix6, Vector2, Vector6};

use crate::dynamics::{clamp_control, project_position, ActuatorLimits, ControlInput, DynamicsModel, Point2, VehicleState};
use crate::error::{Error, Result};
use crate::fieldgrid::{normalize, sample_saturating, sample_with_gradient, GridSpec, Sample, ScalarField};
use crate::fields::{build_fields, FieldPair, FieldParams};
use crate::fusion::{evolve_cahn_hilliard, initial_phi, FusionParams, UnifiedField};
use crate::population::{drift_and_jacobian, wasserstein2, InteractionKernel, PopulationMeasure, StyleLabel, StyleMeasures, StyleTable};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostParams {
    pub r_s: f64,
    pub r_d: f64,
    pub terminal_lane_weight: f64,
    pub terminal_speed_weight: f64,
    pub target_speed: f64,
    pub target_lane_offset: f64,
    pub penalty_weight: f64,
    /// Half width of the paved road, measured from the reference line.
    pub road_half_width: f64,
    pub vehicle_width: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            r_s: 1.0,
            r_d: 1.0,
            terminal_lane_weight: 0.2,
            terminal_speed_weight: 0.05,
            target_speed: 25.0,
            target_lane_offset: 0.0,
            penalty_weight: 10.0,
            road_half_width: 5.625,
            vehicle_width: 1.8,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_s > 0.0 && self.r_d > 0.0) {
            return Err(Error::invalid("cost.r", "control weights must be positive"));
        }
        if !(self.terminal_lane_weight >= 0.0 && self.terminal_speed_weight >= 0.0 && self.penalty_weight >= 0.0) {
            return Err(Error::invalid("cost.weights", "must be nonnegative"));
        }
        if !(self.road_half_width > 0.5 * self.vehicle_width) {
            return Err(Error::invalid("cost.road_half_width", "must exceed half the vehicle width"));
        }
        Ok(())
    }

    pub fn control_cost(&self) -> Matrix2<f64> {
        Matrix2::new(self.r_s, 0.0, 0.0, self.r_d)
    }

    /// Largest `|d|` that incurs no boundary penalty.
    pub fn lateral_limit(&self) -> f64 {
        self.road_half_width - 0.5 * self.vehicle_width
    }

    pub fn speed_ceiling(&self) -> f64 {
        1.2 * self.target_speed
    }
}

/// What to do with field lookups outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DomainPolicy {
    /// Clamp within one cell of the boundary, error beyond.
    #[default]
    Strict,
    /// Clamp every lookup onto the boundary.
    Saturate,
}

/// Population drift entering the planning dynamics.
#[derive(Debug, Clone, Copy)]
pub struct DriftTerm<'a> {
    pub measures: &'a StyleMeasures,
    pub styles: &'a StyleTable,
    pub kernel: InteractionKernel,
}

/// One vehicle's control problem against a fixed unified field.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a DynamicsModel,
    pub phi: &'a ScalarField,
    pub cost: CostParams,
    pub limits: ActuatorLimits,
    pub domain: DomainPolicy,
    pub drift: Option<DriftTerm<'a>>,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a DynamicsModel, phi: &'a ScalarField, cost: CostParams) -> Self {
        Self {
            model,
            phi,
            cost,
            limits: ActuatorLimits::default(),
            domain: DomainPolicy::Strict,
            drift: None,
        }
    }

    fn sample(&self, p: Point2) -> Result<Sample> {
        match self.domain {
            DomainPolicy::Strict => sample_with_gradient(self.phi, p),
            DomainPolicy::Saturate => Ok(sample_saturating(self.phi, p)),
        }
    }

    /// Soft-constraint penalty and its gradient in `(d, s_dot)`.
    fn penalty(&self, x: &VehicleState) -> (f64, f64, f64) {
        let c = &self.cost;
        let w = c.penalty_weight;
        let lim = c.lateral_limit();
        let excess_d = (x.d.abs() - lim).max(0.0);
        let under = (-x.s_dot).max(0.0);
        let over = (x.s_dot - c.speed_ceiling()).max(0.0);
        let value = w * (excess_d * excess_d + under * under + over * over);
        let grad_d = 2.0 * w * excess_d * x.d.signum();
        let grad_v = 2.0 * w * (over - under);
        (value, grad_d, grad_v)
    }

    pub fn running_cost(&self, x: &VehicleState, u: &ControlInput) -> Result<f64> {
        let phi = self.sample(project_position(x))?.value;
        let effort = 0.5 * (self.cost.r_s * u.a_s * u.a_s + self.cost.r_d * u.omega_d * u.omega_d);
        Ok(-phi + effort + self.penalty(x).0)
    }

    pub fn running_cost_gradient(&self, x: &VehicleState) -> Result<Vector6<f64>> {
        let smp = self.sample(project_position(x))?;
        let (_, pd, pv) = self.penalty(x);
        Ok(Vector6::new(-smp.ds, -smp.dd + pd, pv, 0.0, 0.0, 0.0))
    }

    pub fn terminal_cost(&self, x: &VehicleState) -> f64 {
        let c = &self.cost;
        let dl = x.d - c.target_lane_offset;
        let dv = x.s_dot - c.target_speed;
        0.5 * c.terminal_lane_weight * dl * dl + 0.5 * c.terminal_speed_weight * dv * dv
    }

    pub fn terminal_gradient(&self, x: &VehicleState) -> Vector6<f64> {
        let c = &self.cost;
        let mut g = Vector6::zeros();
        g[1] = c.terminal_lane_weight * (x.d - c.target_lane_offset);
        g[2] = c.terminal_speed_weight * (x.s_dot - c.target_speed);
        g
    }

    /// Continuous-time drift `φ(x)` and its Jacobian with respect to the state.
    fn drift_at(&self, x: &VehicleState) -> Option<(Vector6<f64>, Matrix6<f64>)> {
        let term = self.drift.as_ref()?;
        if term.kernel.gain == 0.0 {
            return None;
        }
        let (phi, jp) = drift_and_jacobian(x, term.measures, term.styles, &term.kernel);
        let mut jac = Matrix6::zeros();
        for r in 0..2 {
            for c in 0..2 {
                jac[(2 + r, c)] = jp[(r, c)];
            }
        }
        Some((phi, jac))
    }

    pub fn step(&self, x: &VehicleState, u: &ControlInput) -> VehicleState {
        let mut next = self.model.step_vector(&x.to_vector(), &u.to_vector(), &Vector6::zeros());
        if let Some((phi, _)) = self.drift_at(x) {
            next += phi * self.model.dt;
        }
        VehicleState::from_vector(&next)
    }

    /// Noise-free rollout; `controls.len() + 1` states.
    pub fn rollout(&self, x0: &VehicleState, controls: &[ControlInput]) -> Vec<VehicleState> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(*x0);
        let mut x = *x0;
        for u in controls {
            x = self.step(&x, u);
            states.push(x);
        }
        states
    }

    pub fn total_cost(&self, states: &[VehicleState], controls: &[ControlInput]) -> Result<f64> {
        let mut running = 0.0;
        for (x, u) in states.iter().zip(controls) {
            running += self.running_cost(x, u)?;
        }
        let last = states.last().ok_or(Error::invalid("plan", "no states"))?;
        Ok(self.model.dt * running + self.terminal_cost(last))
    }

    /// Adjoints `Y_0 ..= Y_K` for the given trajectory.
    pub fn adjoints(&self, states: &[VehicleState], controls: &[ControlInput]) -> Result<Vec<Vector6<f64>>> {
        let k = controls.len();
        if states.len() != k + 1 {
            return Err(Error::invalid("plan", "needs one more state than controls"));
        }
        let dt = self.model.dt;
        let at = self.model.a.transpose();
        let mut ys = vec![Vector6::zeros(); k + 1];
        ys[k] = self.terminal_gradient(&states[k]);
        for idx in (0..k).rev() {
            let x = &states[idx];
            let mut y = at * ys[idx + 1];
            if let Some((_, jac)) = self.drift_at(x) {
                y += (jac * dt).transpose() * ys[idx + 1];
            }
            ys[idx] = y + self.running_cost_gradient(x)? * dt;
        }
        Ok(ys)
    }

    /// `∂J/∂u_k = Δt R u_k + Bᵀ Y_{k+1}`.
    pub fn control_gradient(&self, controls: &[ControlInput], adjoints: &[Vector6<f64>]) -> Vec<Vector2<f64>> {
        let r = self.cost.control_cost();
        let bt = self.model.b.transpose();
        controls
            .iter()
            .enumerate()
            .map(|(k, u)| r * u.to_vector() * self.model.dt + bt * adjoints[k + 1])
            .collect()
    }

    pub fn hamiltonian(&self, x: &VehicleState, u: &ControlInput, y: &Vector6<f64>) -> Result<f64> {
        let mut f = self.model.a * x.to_vector() + self.model.b * u.to_vector();
        if let Some((phi, _)) = self.drift_at(x) {
            f += phi;
        }
        Ok(self.running_cost(x, u)? + y.dot(&f))
    }
}

/// `L(x, u) = -Φ(π(x)) + ½ uᵀRu + ℓ(x)` with strict domain handling.
pub fn running_cost(x: &VehicleState, u: &ControlInput, phi: &ScalarField, cp: &CostParams) -> Result<f64> {
    let model = unit_model();
    Problem::new(&model, phi, *cp).running_cost(x, u)
}

/// `H = L + yᵀ(Ax + Bu + φ)`.
pub fn hamiltonian(
    x: &VehicleState,
    u: &ControlInput,
    y: &Vector6<f64>,
    phi: &ScalarField,
    cp: &CostParams,
    model: &DynamicsModel,
) -> Result<f64> {
    Problem::new(model, phi, *cp).hamiltonian(x, u, y)
}

fn unit_model() -> DynamicsModel {
    DynamicsModel::new(0.1, 0.0).expect("valid constants")
}

/// Hamiltonian minimizer `-R⁻¹Bᵀy`, clamped to the actuator box.
pub fn optimal_control_from_adjoint(
    y: &Vector6<f64>,
    cp: &CostParams,
    model: &DynamicsModel,
    limits: &ActuatorLimits,
) -> ControlInput {
    let raw = model.b.transpose() * y;
    let u = ControlInput::new(-raw[0] / cp.r_s, -raw[1] / cp.r_d);
    clamp_control(&u, limits.a_max, limits.omega_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub adjoints: Vec<Vector6<f64>>,
    pub cost: f64,
}

impl TrajectoryPlan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// State at step `k`, clamped to the end of the plan.
    pub fn state_at(&self, k: usize) -> VehicleState {
        self.states[k.min(self.states.len() - 1)]
    }

    /// Controls shifted one step forward, repeating the last; warm start for
    /// the next replanning cycle.
    pub fn shifted_controls(&self) -> Vec<ControlInput> {
        let mut out: Vec<ControlInput> = self.controls.iter().skip(1).copied().collect();
        out.push(self.controls.last().copied().unwrap_or_default());
        out
    }
}

/// Rollout, adjoints and cost for fixed controls.
pub fn evaluate_plan(problem: &Problem<'_>, x0: &VehicleState, controls: Vec<ControlInput>) -> Result<TrajectoryPlan> {
    let states = problem.rollout(x0, &controls);
    let cost = problem.total_cost(&states, &controls)?;
    let adjoints = problem.adjoints(&states, &controls)?;
    Ok(TrajectoryPlan {
        states,
        controls,
        adjoints,
        cost,
    })
}

/// `Δt Σ L(x_k, u_k) + Ψ(x_K)` along the plan's stored states.
pub fn evaluate_cost(plan: &TrajectoryPlan, problem: &Problem<'_>) -> Result<f64> {
    problem.total_cost(&plan.states, &plan.controls)
}

/// Adjoint sequence for the plan's states and controls.
pub fn backward_sweep(plan: &TrajectoryPlan, problem: &Problem<'_>) -> Result<Vec<Vector6<f64>>> {
    problem.adjoints(&plan.states, &plan.controls)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BestResponseConfig {
    /// Initial step damping in `(0, 1]`.
    pub eta: f64,
    pub max_sweeps: usize,
    /// Stop once the proposed control update is below this in ∞-norm.
    pub tol: f64,
    /// Line search gives up below this step.
    pub min_eta: f64,
}

impl Default for BestResponseConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            max_sweeps: 200,
            tol: 1e-5,
            min_eta: 1e-9,
        }
    }
}

impl BestResponseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid("best_response.eta", "must lie in (0, 1]"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::invalid("best_response.max_sweeps", "must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("best_response.tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub plan: TrajectoryPlan,
    pub converged: bool,
    pub sweeps: usize,
    /// Cost after every accepted update, starting with the initial guess.
    pub cost_history: Vec<f64>,
    /// ∞-norm of the last proposed control update.
    pub update_norm: f64,
}

/// Damped forward-backward sweep from `initial` controls.
///
/// Each sweep moves every control toward `clamp(-R⁻¹BᵀY_{k+1}/Δt)`; steps
/// that raise the cost are halved until they do not. The step grows back
/// toward `eta` after each accepted update.
pub fn solve_best_response(
    x0: &VehicleState,
    problem: &Problem<'_>,
    initial: &[ControlInput],
    config: &BestResponseConfig,
) -> Result<BestResponse> {
    config.validate()?;
    problem.cost.validate()?;
    if initial.is_empty() {
        return Err(Error::invalid("horizon", "must be at least one step"));
    }
    let limits = problem.limits;
    let dt = problem.model.dt;
    let mut plan = evaluate_plan(
        problem,
        x0,
        initial
            .iter()
            .map(|u| clamp_control(u, limits.a_max, limits.omega_max))
            .collect(),
    )?;
    let mut history = vec![plan.cost];
    let mut eta = config.eta;
    let mut update_norm = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let direction: Vec<Vector2<f64>> = plan
            .controls
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let target = optimal_control_from_adjoint(&(plan.adjoints[k + 1] / dt), &problem.cost, problem.model, &limits);
                target.to_vector() - u.to_vector()
            })
            .collect();
        update_norm = direction.iter().fold(0.0, |m, d| m.max(d.amax()));
        if update_norm < config.tol {
            return Ok(BestResponse {
                plan,
                converged: true,
                sweeps,
                cost_history: history,
                update_norm,
            });
        }
        let mut accepted = false;
        while eta >= config.min_eta {
            let controls: Vec<ControlInput> = plan
                .controls
                .iter()
                .zip(&direction)
                .map(|(u, d)| ControlInput::from_vector(&(u.to_vector() + d * eta)))
                .collect();
            let states = problem.rollout(x0, &controls);
            let cost = problem.total_cost(&states, &controls)?;
            // Round-off slack so steps near the optimum are not rejected.
            let slack = 8.0 * f64::EPSILON * plan.cost.abs().max(1.0);
            if cost <= plan.cost + slack {
                let adjoints = problem.adjoints(&states, &controls)?;
                plan = TrajectoryPlan {
                    states,
                    controls,
                    adjoints,
                    cost,
                };
                history.push(cost);
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            return Err(Error::Stalled {
                sweeps,
                update_norm,
                best: alloc::boxed::Box::new(plan),
            });
        }
        eta = (eta * 2.0).min(config.eta);
    }
    Ok(BestResponse {
        plan,
        converged: false,
        sweeps,
        cost_history: history,
        update_norm,
    })
}

/// Softmax lane choice from the unified field.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LaneSelection {
    pub candidates: Vec<f64>,
    /// Corridor extent behind and ahead of the vehicle (m).
    pub behind: f64,
    pub ahead: f64,
}

impl Default for LaneSelection {
    fn default() -> Self {
        Self {
            candidates: vec![-3.75, 0.0, 3.75],
            behind: 40.0,
            ahead: 80.0,
        }
    }
}

impl LaneSelection {
    /// Mean field value along each candidate lane's corridor.
    pub fn scores(&self, phi: &ScalarField, s: f64) -> Vec<f64> {
        let spec = phi.spec;
        let (lo, hi) = (s - self.behind, s + self.ahead);
        let step = spec.ds();
        let n = (libm::ceil((hi - lo) / step) as usize).max(1);
        self.candidates
            .iter()
            .map(|&d| {
                let total: f64 = (0..=n)
                    .map(|i| sample_saturating(phi, Point2::new(lo + (hi - lo) * i as f64 / n as f64, d)).value)
                    .sum();
                total / (n + 1) as f64
            })
            .collect()
    }

    /// Candidate lanes reachable with at most one lane change from lateral
    /// offset `d`: the nearest candidate and its neighbours.
    pub fn reachable(&self, d: f64) -> core::ops::Range<usize> {
        let nearest = self
            .candidates
            .iter()
            .enumerate()
            .min_by(|a, b| libm::fabs(a.1 - d).total_cmp(&libm::fabs(b.1 - d)))
            .map_or(0, |(i, _)| i);
        nearest.saturating_sub(1)..(nearest + 2).min(self.candidates.len())
    }

    /// Softmax-weighted offset over the reachable lanes; temperature zero
    /// picks the best one.
    pub fn target_offset(&self, phi: &ScalarField, at: Point2, temperature: f64) -> f64 {
        let range = self.reachable(at.d);
        let scores = self.scores(phi, at.s);
        softmax_target(&self.candidates[range.clone()], &scores[range], temperature)
    }
}

/// Softmax over scores rescaled to unit range, so `temperature` is relative
/// to the spread between the best and worst lane.
pub fn softmax_target(candidates: &[f64], scores: &[f64], temperature: f64) -> f64 {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !(temperature > 0.0) {
        let idx = scores.iter().position(|&v| v == best).unwrap_or(0);
        return candidates[idx];
    }
    let spread = best - worst;
    if !(spread > 0.0) {
        return candidates.iter().sum::<f64>() / candidates.len() as f64;
    }
    let weights: Vec<f64> = scores
        .iter()
        .map(|v| libm::exp((v - best) / (spread * temperature)))
        .collect();
    let total: f64 = weights.iter().sum();
    candidates.iter().zip(&weights).map(|(c, w)| c * w).sum::<f64>() / total
}

/// One player of the game.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: u32,
    pub state: VehicleState,
    pub style: StyleLabel,
    pub cost: CostParams,
    /// Choose the target lane from the field instead of keeping
    /// `cost.target_lane_offset`.
    pub select_lane: bool,
    /// Follow `guess` instead of optimizing.
    pub scripted: bool,
    /// Initial controls, one per horizon step.
    pub guess: Vec<ControlInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSettings {
    pub model: DynamicsModel,
    pub limits: ActuatorLimits,
    pub grid: GridSpec,
    pub styles: StyleTable,
    pub field: FieldParams,
    pub fusion: FusionParams,
    pub lanes: LaneSelection,
    pub kernel: InteractionKernel,
    pub best_response: BestResponseConfig,
    pub domain: DomainPolicy,
    /// Plan step whose predicted states form the induced population measure.
    pub preview_step: usize,
    pub max_iterations: usize,
    pub w2_tol: f64,
}

/// Fields seen by one vehicle: everyone else's atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub fields: FieldPair,
    pub unified: UnifiedField,
}

impl Environment {
    /// `(B̄, R̄, Φ)` at a point.
    pub fn values_at(&self, p: Point2) -> (f64, f64, f64) {
        let b = sample_saturating(&normalize(&self.fields.benefit), p).value;
        let r = sample_saturating(&normalize(&self.fields.risk), p).value;
        let phi = sample_saturating(&self.unified.phi, p).value;
        (b, r, phi)
    }
}

/// Benefit, risk and fused field for a population.
pub fn build_environment(
    measures: &StyleMeasures,
    styles: &StyleTable,
    grid: &GridSpec,
    field: &FieldParams,
    fusion: &FusionParams,
) -> Result<Environment> {
    let fields = build_fields(measures, styles, grid, field)?;
    let phi0 = initial_phi(&fields.benefit, &fields.risk);
    let unified = evolve_cahn_hilliard(phi0, &fields.benefit, &fields.risk, fusion)?;
    Ok(Environment { fields, unified })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub id: u32,
    pub plan: TrajectoryPlan,
    pub target_lane: f64,
    pub converged: bool,
    /// Fields the agent answered; absent for scripted agents.
    pub environment: Option<Environment>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvergenceReport {
    /// `W2(m_k, m_{k-1})` for every counted iteration.
    pub gaps: Vec<f64>,
    /// `W2(m_k, m_final)` for every counted iteration.
    pub distances_to_final: Vec<f64>,
    /// Geometric mean of successive gap ratios; needs three gaps.
    pub rho_hat: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Per counted iteration, every agent's plan cost in agent order.
    pub costs: Vec<Vec<f64>>,
}

/// Geometric mean of `gaps[k+1] / gaps[k]`, when at least three gaps exist.
pub fn contraction_estimate(gaps: &[f64]) -> Option<f64> {
    if gaps.len() < 3 || !(gaps[0] > 0.0) {
        return None;
    }
    let last = *gaps.last()?;
    if last == 0.0 {
        return Some(0.0);
    }
    Some(libm::pow(last / gaps[0], 1.0 / (gaps.len() - 1) as f64))
}

fn induced_measure(agents: &[Agent], plans: &[TrajectoryPlan], preview: usize) -> PopulationMeasure {
    PopulationMeasure::uniform(
        agents
            .iter()
            .zip(plans)
            .map(|(a, p)| (a.id, p.state_at(preview), a.style)),
    )
}

/// Under the saturating policy, vehicles outside the grid act as sources
/// from the nearest boundary point.
fn source_state(x: &VehicleState, settings: &GameSettings) -> VehicleState {
    match settings.domain {
        DomainPolicy::Strict => *x,
        DomainPolicy::Saturate => {
            let g = &settings.grid;
            VehicleState {
                s: x.s.clamp(g.s_min, g.s_max),
                d: x.d.clamp(g.d_min, g.d_max),
                ..*x
            }
        }
    }
}

/// Rollout of the guess against a zero field.
fn scripted_plan(agent: &Agent, settings: &GameSettings) -> Result<TrajectoryPlan> {
    let empty = ScalarField::zeros(settings.grid);
    let mut problem = Problem::new(&settings.model, &empty, agent.cost);
    problem.domain = DomainPolicy::Saturate;
    problem.limits = settings.limits;
    evaluate_plan(&problem, &agent.state, agent.guess.clone())
}

fn respond(agent: &Agent, measure: &PopulationMeasure, settings: &GameSettings) -> Result<AgentOutcome> {
    if agent.scripted {
        return Ok(AgentOutcome {
            id: agent.id,
            plan: scripted_plan(agent, settings)?,
            target_lane: agent.cost.target_lane_offset,
            converged: true,
            environment: None,
        });
    }
    let others = StyleMeasures::from_atoms(
        measure
            .atoms
            .iter()
            .filter(|a| a.id != agent.id)
            .map(|a| (a.id, source_state(&a.state, settings), a.style)),
    );
    let environment = build_environment(&others, &settings.styles, &settings.grid, &settings.field, &settings.fusion)?;
    let mut cost = agent.cost;
    if agent.select_lane {
        cost.target_lane_offset =
            settings
                .lanes
                .target_offset(&environment.unified.phi, project_position(&agent.state), settings.fusion.temperature);
    }
    let problem = Problem {
        model: &settings.model,
        phi: &environment.unified.phi,
        cost,
        limits: settings.limits,
        domain: settings.domain,
        drift: Some(DriftTerm {
            measures: &others,
            styles: &settings.styles,
            kernel: settings.kernel,
        }),
    };
    let (plan, converged) = match solve_best_response(&agent.state, &problem, &agent.guess, &settings.best_response) {
        Ok(br) => (br.plan, br.converged),
        // A stalled line search still leaves a monotonically improved plan.
        Err(Error::Stalled { best, .. }) => (*best, false),
        Err(e) => return Err(e),
    };
    Ok(AgentOutcome {
        id: agent.id,
        plan,
        target_lane: cost.target_lane_offset,
        converged,
        environment: Some(environment),
    })
}

/// Best-response iteration on the population measure.
///
/// The first round answers the measure induced by the agents' guesses and
/// only seeds the iteration; every counted iteration then lets each agent
/// answer the measure induced by the previous round, always starting its
/// sweep from its own guess. Stops when consecutive measures are within
/// `w2_tol`.
pub fn fixed_point_iteration(agents: &[Agent], settings: &GameSettings) -> Result<(Vec<AgentOutcome>, ConvergenceReport)> {
    if settings.max_iterations == 0 {
        return Err(Error::invalid("max_iterations", "must be at least 1"));
    }
    if agents.is_empty() {
        return Err(Error::invalid("agents", "need at least one agent"));
    }
    let horizon = agents[0].guess.len();
    if horizon == 0 || agents.iter().any(|a| a.guess.len() != horizon) {
        return Err(Error::invalid("agents", "guesses must share a positive horizon"));
    }
    let preview = settings.preview_step.min(horizon);
    let seed_plans: Vec<TrajectoryPlan> = agents
        .iter()
        .map(|a| scripted_plan(a, settings))
        .collect::<Result<_>>()?;
    let seed_measure = induced_measure(agents, &seed_plans, preview);
    let mut outcomes: Vec<AgentOutcome> = agents
        .iter()
        .map(|a| respond(a, &seed_measure, settings))
        .collect::<Result<_>>()?;
    let mut measure = induced_measure(agents, &plans_of(&outcomes), preview);
    let mut history = vec![measure.clone()];
    let mut gaps = Vec::new();
    let mut costs = Vec::new();
    let mut converged = false;
    for _ in 0..settings.max_iterations {
        let next: Vec<AgentOutcome> = agents
            .iter()
            .map(|a| respond(a, &measure, settings))
            .collect::<Result<_>>()?;
        let next_measure = induced_measure(agents, &plans_of(&next), preview);
        let gap = wasserstein2(&next_measure, &measure)?;
        gaps.push(gap);
        costs.push(next.iter().map(|o| o.plan.cost).collect());
        outcomes = next;
        measure = next_measure;
        history.push(measure.clone());
        if gap < settings.w2_tol {
            converged = true;
            break;
        }
    }
    let distances_to_final = history[1..]
        .iter()
        .map(|m| wasserstein2(m, &measure))
        .collect::<Result<Vec<_>>>()?;
    let report = ConvergenceReport {
        rho_hat: contraction_estimate(&gaps),
        iterations: gaps.len(),
        gaps,
        distances_to_final,
        converged,
        costs,
    };
    Ok((outcomes, report))
}

fn plans_of(outcomes: &[AgentOutcome]) -> Vec<TrajectoryPlan> {
    outcomes.iter().map(|o| o.plan.clone()).collect()
}
