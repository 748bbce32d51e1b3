//! Cahn-Hilliard fusion of the normalized benefit and risk fields into the
//! unified potential.
//!
//! The order parameter evolves as the H⁻¹ gradient flow
//!
//! ```text
//! ∂Φ/∂τ = ∇²[ W'(Φ) - ε²∇²Φ - χ(B̄, R̄, Φ) ],   W(Φ) = ¼(Φ² - 1)²
//! ```
//!
//! whose stationary states satisfy `ε²∇²Φ - W'(Φ) + χ = C`. Time stepping is
//! semi-implicit: the biharmonic term and a linear stabilizer `S·(-∇²)` are
//! implicit, `W'` and `χ` explicit. The implicit operator is diagonalized in
//! the lateral direction by the zero-flux cosine basis and solved per mode as
//! a banded SPD system along `s`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fieldgrid::{gradient, laplacian_into, normalize, GridSpec, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionParams {
    /// Interface width in lateral grid spacings.
    pub epsilon: f64,
    pub gamma: [f64; 5],
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau_step: f64,
    pub max_steps: usize,
    pub steady_tol: f64,
    /// Linear stabilization constant of the splitting; energy-stable for
    /// `S >= max|W''| / 2` over the range of `Φ`.
    pub stabilization: f64,
    /// Sensitivity temperature handed to lane selection; not part of the PDE.
    pub temperature: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            gamma: [3.3, 3.3, 0.5, 0.5, 0.1],
            alpha1: 2.8,
            alpha2: 2.8,
            tau_step: 1e-4,
            max_steps: 5000,
            steady_tol: 1e-6,
            stabilization: 2.0,
            temperature: 0.1,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("fusion.epsilon", "must be positive"));
        }
        if self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::invalid("fusion.gamma", "coupling weights must be nonnegative"));
        }
        if !(self.alpha1 > 1.0 && self.alpha2 > 1.0) {
            return Err(Error::invalid("fusion.alpha", "exponents must exceed 1"));
        }
        if !(self.tau_step > 0.0) {
            return Err(Error::invalid("fusion.tau_step", "must be positive"));
        }
        if !(self.steady_tol > 0.0) {
            return Err(Error::invalid("fusion.steady_tol", "must be positive"));
        }
        if !(self.stabilization >= 0.0) {
            return Err(Error::invalid("fusion.stabilization", "must be nonnegative"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::invalid("fusion.temperature", "must be nonnegative"));
        }
        Ok(())
    }

    /// Physical interface width on `grid` (metres).
    pub fn epsilon_on(&self, grid: &GridSpec) -> f64 {
        self.epsilon * grid.dd()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedField {
    pub phi: ScalarField,
    pub steps_taken: usize,
    pub final_change: f64,
    pub residual: f64,
    pub converged: bool,
}

/// Divergence guard on `|Φ|∞`.
pub const DIVERGENCE_LIMIT: f64 = 10.0;

#[inline]
pub fn double_well(phi: f64) -> f64 {
    let t = phi * phi - 1.0;
    0.25 * t * t
}

#[inline]
pub fn double_well_prime(phi: f64) -> f64 {
    phi * phi * phi - phi
}

/// Nonlinear benefit/risk coupling at one node; `grad_b`, `grad_r` are the
/// planar gradients of the normalized fields.
pub fn coupling_chi(bbar: f64, rbar: f64, phi: f64, grad_b: [f64; 2], grad_r: [f64; 2], p: &FusionParams) -> f64 {
    use core::f64::consts::PI;
    let [g1, g2, g3, g4, g5] = p.gamma;
    g1 * libm::pow(bbar, p.alpha1) - g2 * libm::pow(rbar, p.alpha2)
        + g3 * bbar * rbar * libm::sin(PI * bbar) * libm::cos(PI * rbar)
        + g4 * phi * (bbar * bbar - rbar * rbar)
        + g5 * (grad_b[0] * grad_r[0] + grad_b[1] * grad_r[1])
}

/// `χ = base + slope · Φ` with the Φ-independent part precomputed.
#[derive(Debug, Clone)]
struct Coupling {
    base: Vec<f64>,
    slope: Vec<f64>,
}

impl Coupling {
    fn new(bbar: &ScalarField, rbar: &ScalarField, p: &FusionParams) -> Self {
        let gb = gradient(bbar);
        let gr = gradient(rbar);
        let n = bbar.values.len();
        let mut base = Vec::with_capacity(n);
        let mut slope = Vec::with_capacity(n);
        for k in 0..n {
            let (b, r) = (bbar.values[k], rbar.values[k]);
            base.push(coupling_chi(b, r, 0.0, [gb.ds[k], gb.dd[k]], [gr.ds[k], gr.dd[k]], p));
            slope.push(p.gamma[3] * (b * b - r * r));
        }
        Self { base, slope }
    }

    #[inline]
    fn at(&self, k: usize, phi: f64) -> f64 {
        self.base[k] + self.slope[k] * phi
    }
}

/// Factorized implicit operator `I + τ(ε² M² + S M)`, `M = -∇²`.
#[derive(Debug, Clone)]
pub struct ImplicitSolver {
    spec: GridSpec,
    /// Lateral cosine basis, `basis[j * n_d + k]`.
    basis: Vec<f64>,
    /// Per lateral mode, banded Cholesky factors along `s`.
    modes: Vec<BandedCholesky>,
}

impl ImplicitSolver {
    pub fn new(spec: GridSpec, tau: f64, epsilon: f64, stabilization: f64) -> Self {
        let (n_s, n_d) = (spec.n_s, spec.n_d);
        let cd = 1.0 / (spec.dd() * spec.dd());
        let cs = 1.0 / (spec.ds() * spec.ds());
        let mut basis = vec![0.0; n_d * n_d];
        for j in 0..n_d {
            for k in 0..n_d {
                let scale = if k == 0 {
                    libm::sqrt(1.0 / n_d as f64)
                } else {
                    libm::sqrt(2.0 / n_d as f64)
                };
                basis[j * n_d + k] =
                    scale * libm::cos(core::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n_d as f64);
            }
        }
        let eps2 = epsilon * epsilon;
        let modes = (0..n_d)
            .map(|k| {
                let mu = cd * (2.0 - 2.0 * libm::cos(core::f64::consts::PI * k as f64 / n_d as f64));
                // N = M_s + mu I, tridiagonal
                let nd: Vec<f64> = (0..n_s)
                    .map(|i| {
                        let neighbours = if i == 0 || i == n_s - 1 { 1.0 } else { 2.0 };
                        cs * neighbours + mu
                    })
                    .collect();
                let off = -cs;
                let mut d0 = vec![0.0; n_s];
                let mut d1 = vec![0.0; n_s];
                let mut d2 = vec![0.0; n_s];
                for i in 0..n_s {
                    let mut sq = nd[i] * nd[i];
                    if i > 0 {
                        sq += off * off;
                    }
                    if i + 1 < n_s {
                        sq += off * off;
                        d1[i] = tau * (eps2 * off * (nd[i] + nd[i + 1]) + stabilization * off);
                    }
                    if i + 2 < n_s {
                        d2[i] = tau * eps2 * off * off;
                    }
                    d0[i] = 1.0 + tau * (eps2 * sq + stabilization * nd[i]);
                }
                BandedCholesky::factor(d0, d1, d2)
            })
            .collect();
        Self { spec, basis, modes }
    }

    /// Solve the implicit system in place.
    pub fn solve(&self, rhs: &mut [f64]) {
        let (n_s, n_d) = (self.spec.n_s, self.spec.n_d);
        let mut hat = vec![0.0; n_s * n_d]; // mode-major: hat[k * n_s + i]
        for i in 0..n_s {
            let row = &rhs[i * n_d..(i + 1) * n_d];
            for k in 0..n_d {
                let mut acc = 0.0;
                for (j, v) in row.iter().enumerate() {
                    acc += self.basis[j * n_d + k] * v;
                }
                hat[k * n_s + i] = acc;
            }
        }
        for (k, chol) in self.modes.iter().enumerate() {
            chol.solve(&mut hat[k * n_s..(k + 1) * n_s]);
        }
        for i in 0..n_s {
            for j in 0..n_d {
                let mut acc = 0.0;
                for k in 0..n_d {
                    acc += self.basis[j * n_d + k] * hat[k * n_s + i];
                }
                rhs[i * n_d + j] = acc;
            }
        }
    }
}

/// Cholesky factor `L` of a symmetric pentadiagonal SPD matrix, stored by
/// diagonals.
#[derive(Debug, Clone)]
struct BandedCholesky {
    l0: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl BandedCholesky {
    /// `d0` main diagonal, `d1[i] = A[i][i+1]`, `d2[i] = A[i][i+2]`.
    fn factor(d0: Vec<f64>, d1: Vec<f64>, d2: Vec<f64>) -> Self {
        let n = d0.len();
        let mut l0 = vec![0.0; n];
        let mut l1 = vec![0.0; n]; // L[i+1][i]
        let mut l2 = vec![0.0; n]; // L[i+2][i]
        for i in 0..n {
            // L[i][i-2] = l2[i-2], L[i][i-1] = l1[i-1]
            let a = if i >= 2 { l2[i - 2] } else { 0.0 };
            let b = if i >= 1 { l1[i - 1] } else { 0.0 };
            l0[i] = libm::sqrt(d0[i] - a * a - b * b);
            if i + 1 < n {
                // A[i+1][i] = L[i+1][i-1] L[i][i-1] + L[i+1][i] L[i][i]
                let cross = if i >= 1 { l2[i - 1] * b } else { 0.0 };
                l1[i] = (d1[i] - cross) / l0[i];
            }
            if i + 2 < n {
                l2[i] = d2[i] / l0[i];
            }
        }
        Self { l0, l1, l2 }
    }

    fn solve(&self, x: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let mut v = x[i];
            if i >= 1 {
                v -= self.l1[i - 1] * x[i - 1];
            }
            if i >= 2 {
                v -= self.l2[i - 2] * x[i - 2];
            }
            x[i] = v / self.l0[i];
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            if i + 1 < n {
                v -= self.l1[i] * x[i + 1];
            }
            if i + 2 < n {
                v -= self.l2[i] * x[i + 2];
            }
            x[i] = v / self.l0[i];
        }
    }
}

/// Stepping state for one fusion run, so callers can observe every step.
pub struct CahnHilliard {
    params: FusionParams,
    epsilon: f64,
    solver: ImplicitSolver,
    coupling: Coupling,
    phi: ScalarField,
    lap: Vec<f64>,
    work: Vec<f64>,
}

impl CahnHilliard {
    /// `b` and `r` are the raw fields; they are normalized here.
    pub fn new(phi0: ScalarField, b: &ScalarField, r: &ScalarField, params: &FusionParams) -> Result<Self> {
        params.validate()?;
        if !phi0.same_grid(b) || !phi0.same_grid(r) {
            return Err(Error::GridMismatch);
        }
        let (bbar, rbar) = (normalize(b), normalize(r));
        Ok(Self::with_normalized(phi0, &bbar, &rbar, params))
    }

    fn with_normalized(phi0: ScalarField, bbar: &ScalarField, rbar: &ScalarField, params: &FusionParams) -> Self {
        let spec = phi0.spec;
        let epsilon = params.epsilon_on(&spec);
        Self {
            params: *params,
            epsilon,
            solver: ImplicitSolver::new(spec, params.tau_step, epsilon, params.stabilization),
            coupling: Coupling::new(bbar, rbar, params),
            phi: phi0,
            lap: vec![0.0; spec.len()],
            work: vec![0.0; spec.len()],
        }
    }

    pub fn phi(&self) -> &ScalarField {
        &self.phi
    }

    /// Pure Cahn-Hilliard (χ ≡ 0) on the given initial state.
    pub fn without_coupling(phi0: ScalarField, params: &FusionParams) -> Result<Self> {
        params.validate()?;
        let spec = phi0.spec;
        let epsilon = params.epsilon_on(&spec);
        let n = spec.len();
        Ok(Self {
            params: *params,
            epsilon,
            solver: ImplicitSolver::new(spec, params.tau_step, epsilon, params.stabilization),
            coupling: Coupling {
                base: vec![0.0; n],
                slope: vec![0.0; n],
            },
            phi: phi0,
            lap: vec![0.0; n],
            work: vec![0.0; n],
        })
    }

    /// Advance one step; returns the ∞-norm of the update.
    pub fn step(&mut self) -> f64 {
        let spec = self.phi.spec;
        let (tau, s) = (self.params.tau_step, self.params.stabilization);
        // g = W'(Φ) - SΦ - χ
        for (k, (w, &phi)) in self.work.iter_mut().zip(&self.phi.values).enumerate() {
            *w = double_well_prime(phi) - s * phi - self.coupling.at(k, phi);
        }
        laplacian_into(&spec, &self.work, &mut self.lap);
        for ((w, &phi), l) in self.work.iter_mut().zip(&self.phi.values).zip(&self.lap) {
            *w = phi + tau * l;
        }
        self.solver.solve(&mut self.work);
        let mut change = 0.0f64;
        for (phi, next) in self.phi.values.iter_mut().zip(&self.work) {
            change = change.max((next - *phi).abs());
            *phi = *next;
        }
        change
    }

    /// Chemical potential `ε²∇²Φ - W'(Φ) + χ` at every node.
    pub fn chemical_potential(&mut self) -> Vec<f64> {
        let spec = self.phi.spec;
        laplacian_into(&spec, &self.phi.values, &mut self.lap);
        let eps2 = self.epsilon * self.epsilon;
        self.phi
            .values
            .iter()
            .zip(&self.lap)
            .enumerate()
            .map(|(k, (&phi, &l))| eps2 * l - double_well_prime(phi) + self.coupling.at(k, phi))
            .collect()
    }

    pub fn residual(&mut self) -> f64 {
        residual_of(&self.chemical_potential())
    }

    /// Discrete Ginzburg-Landau energy `∫ ε²/2 |∇Φ|² + W(Φ)`.
    pub fn energy(&mut self) -> f64 {
        ginzburg_landau_energy(&self.phi, self.epsilon)
    }

    /// Step until the update falls below `steady_tol` or `max_steps` is hit.
    pub fn run(mut self) -> Result<UnifiedField> {
        let mut change = 0.0;
        let mut steps = 0;
        let mut converged = false;
        while steps < self.params.max_steps {
            change = self.step();
            steps += 1;
            let max_abs = self.phi.max_abs();
            if !(max_abs <= DIVERGENCE_LIMIT) {
                return Err(Error::Unstable { step: steps, max_abs });
            }
            if change < self.params.steady_tol {
                converged = true;
                break;
            }
        }
        let residual = self.residual();
        Ok(UnifiedField {
            phi: self.phi,
            steps_taken: steps,
            final_change: change,
            residual,
            converged,
        })
    }
}

fn residual_of(mu: &[f64]) -> f64 {
    let n = mu.len() as f64;
    let mean = mu.iter().sum::<f64>() / n;
    libm::sqrt(mu.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n)
}

pub fn ginzburg_landau_energy(phi: &ScalarField, epsilon: f64) -> f64 {
    let spec = phi.spec;
    let mut lap = vec![0.0; spec.len()];
    laplacian_into(&spec, &phi.values, &mut lap);
    let e: f64 = phi
        .values
        .iter()
        .zip(&lap)
        .map(|(&f, &l)| -0.5 * epsilon * epsilon * f * l + double_well(f))
        .sum();
    e * spec.cell_area()
}

/// Initial order parameter `B̄ - R̄`.
pub fn initial_phi(b: &ScalarField, r: &ScalarField) -> ScalarField {
    normalize(b).combine(1.0, &normalize(r), -1.0)
}

/// Evolve `phi0` under the coupled Cahn-Hilliard flow.
pub fn evolve_cahn_hilliard(
    phi0: ScalarField,
    b: &ScalarField,
    r: &ScalarField,
    params: &FusionParams,
) -> Result<UnifiedField> {
    CahnHilliard::new(phi0, b, r, params)?.run()
}

/// RMS deviation of the chemical potential from its mean.
pub fn euler_lagrange_residual(phi: &ScalarField, b: &ScalarField, r: &ScalarField, params: &FusionParams) -> Result<f64> {
    let mut ch = CahnHilliard::new(phi.clone(), b, r, params)?;
    Ok(ch.residual())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(0.0, 120.0, -8.0, 8.0, 32, 12).unwrap()
    }

    #[test]
    fn double_well_values() {
        assert_eq!(double_well_prime(0.0), 0.0);
        assert_eq!(double_well_prime(1.0), 0.0);
        assert_eq!(double_well_prime(-1.0), 0.0);
        assert_eq!(double_well_prime(2.0), 6.0);
        assert_eq!(double_well(1.0), 0.0);
    }

    #[test]
    fn coupling_term_by_term() {
        let p = FusionParams::default();
        assert_eq!(coupling_chi(0.0, 0.0, 0.7, [0.0; 2], [0.0; 2], &p), 0.0);
        assert!((coupling_chi(1.0, 0.0, 0.0, [0.0; 2], [0.0; 2], &p) - p.gamma[0]).abs() < 1e-15);
        let expect = -p.gamma[1] - p.gamma[3];
        assert!((coupling_chi(0.0, 1.0, 1.0, [0.0; 2], [0.0; 2], &p) - expect).abs() < 1e-15);
        let g = coupling_chi(0.0, 0.0, 0.0, [2.0, 1.0], [0.5, -3.0], &p);
        assert!((g - p.gamma[4] * (1.0 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let mut p = FusionParams::default();
        p.validate().unwrap();
        p.alpha1 = 1.0;
        assert!(p.validate().is_err());
        let p = FusionParams {
            gamma: [1.0, -1.0, 0.0, 0.0, 0.0],
            ..FusionParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn banded_cholesky_solves_pentadiagonal() {
        let n = 9;
        let d0: Vec<f64> = (0..n).map(|i| 6.0 + i as f64 * 0.1).collect();
        let d1: Vec<f64> = (0..n).map(|i| -1.0 - 0.05 * i as f64).collect();
        let d2: Vec<f64> = (0..n).map(|i| 0.3 + 0.01 * i as f64).collect();
        let chol = BandedCholesky::factor(d0.clone(), d1.clone(), d2.clone());
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[i] += d0[i] * x_true[i];
            if i + 1 < n {
                b[i] += d1[i] * x_true[i + 1];
                b[i + 1] += d1[i] * x_true[i];
            }
            if i + 2 < n {
                b[i] += d2[i] * x_true[i + 2];
                b[i + 2] += d2[i] * x_true[i];
            }
        }
        chol.solve(&mut b);
        for (x, y) in b.iter().zip(&x_true) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_solver_inverts_operator() {
        let spec = grid();
        let (tau, eps, s) = (0.3, 1.2, 2.0);
        let solver = ImplicitSolver::new(spec, tau, eps, s);
        let x = ScalarField::from_fn(spec, |a, b| (a * 0.07).sin() * (b * 0.4).cos() + 0.1 * b);
        // apply I + τ(ε² M² + S M) with M = -∇²
        let mut m1 = vec![0.0; spec.len()];
        laplacian_into(&spec, &x.values, &mut m1);
        let mut m2 = vec![0.0; spec.len()];
        laplacian_into(&spec, &m1, &mut m2);
        let mut rhs: Vec<f64> = (0..spec.len())
            .map(|k| x.values[k] + tau * (eps * eps * m2[k] - s * m1[k]))
            .collect();
        solver.solve(&mut rhs);
        for (a, b) in rhs.iter().zip(&x.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_uniform_fields_keep_zero_phase() {
        let spec = grid();
        let b = ScalarField::constant(spec, 0.8);
        let p = FusionParams {
            max_steps: 50,
            ..FusionParams::default()
        };
        let out = evolve_cahn_hilliard(ScalarField::zeros(spec), &b, &b, &p).unwrap();
        assert!(out.phi.max_abs() < 1e-14);
    }

    #[test]
    fn identical_fields_without_mixed_terms_keep_zero_phase() {
        let spec = grid();
        let b = ScalarField::from_fn(spec, |s, d| (-((s - 60.0) / 20.0).powi(2)).exp() + 0.01 * d);
        let p = FusionParams {
            gamma: [3.3, 3.3, 0.0, 0.5, 0.0],
            max_steps: 50,
            ..FusionParams::default()
        };
        let out = evolve_cahn_hilliard(ScalarField::zeros(spec), &b, &b, &p).unwrap();
        assert!(out.phi.max_abs() < 1e-12);
    }

    #[test]
    fn uniform_well_minimum_is_stationary() {
        let spec = grid();
        let p = FusionParams {
            max_steps: 20,
            ..FusionParams::default()
        };
        let mut ch = CahnHilliard::without_coupling(ScalarField::constant(spec, 1.0), &p).unwrap();
        for _ in 0..20 {
            assert!(ch.step() < 1e-14);
        }
        assert!(ch.residual() < 1e-12);
        let out = ch.run().unwrap();
        assert!(out.converged);
        assert!(out.phi.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn residual_orders_equilibrium_below_noise() {
        let spec = grid();
        let p = FusionParams::default();
        let uniform = ScalarField::constant(spec, 1.0);
        let flat = ScalarField::constant(spec, 0.3);
        assert!(euler_lagrange_residual(&uniform, &flat, &flat, &p).unwrap() < 1e-12);
        let rough = ScalarField::from_fn(spec, |s, d| (s * 1.7).sin() * (d * 2.3).cos());
        let b = ScalarField::from_fn(spec, |s, _| s);
        assert!(euler_lagrange_residual(&rough, &b, &flat, &p).unwrap() > 0.1);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = grid();
        let p = FusionParams {
            epsilon: 0.01,
            stabilization: 0.0,
            tau_step: 50.0,
            max_steps: 200,
            ..FusionParams::default()
        };
        let phi0 = ScalarField::from_fn(spec, |s, d| 3.0 * (s * 0.9).sin() * (d * 1.3).cos());
        let b = ScalarField::from_fn(spec, |s, _| s);
        match evolve_cahn_hilliard(phi0, &b, &b, &p) {
            Err(Error::Unstable { .. }) => {}
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = ScalarField::zeros(grid());
        let b = ScalarField::zeros(GridSpec::new(0.0, 10.0, -1.0, 1.0, 5, 5).unwrap());
        assert!(matches!(
            evolve_cahn_hilliard(a.clone(), &b, &b, &FusionParams::default()),
            Err(Error::GridMismatch)
        ));
    }
}
