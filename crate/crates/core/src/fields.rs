//! Benefit and risk fields.
//!
//! Each field minimizes a Dirichlet-plus-Tikhonov energy whose linear term is
//! a style-weighted kernel sum over the population. The minimizer solves the
//! screened Poisson problem `-∇²F + λF = source` with zero-flux boundaries,
//! which is done here by conjugate gradients on the discrete operator.

use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::project_position;
use crate::error::{Error, Result};
use crate::fieldgrid::{laplacian_into, GridSpec, ScalarField};
use crate::population::{StyleMeasures, StyleTable};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FieldParams {
    /// Tikhonov weight of the benefit energy.
    pub tikhonov_b: f64,
    /// Tikhonov weight of the risk energy.
    pub tikhonov_r: f64,
    /// Speed normalization of the risk kernel (m/s).
    pub v_max: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Gaussian pre-smoothing of the sources with the per-style spreading
    /// radii. Off by default.
    pub spread_sources: bool,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            tikhonov_b: 1.0,
            tikhonov_r: 1.0,
            v_max: 33.3,
            cg_tol: 1e-10,
            cg_max_iter: 2000,
            spread_sources: false,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tikhonov_b > 0.0) || !(self.tikhonov_r > 0.0) {
            return Err(Error::invalid("field.tikhonov", "weights must be positive"));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::invalid("field.v_max", "must be positive"));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::invalid("field.cg_tol", "must lie in (0, 1)"));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::invalid("field.cg_max_iter", "must be positive"));
        }
        Ok(())
    }
}

/// Solved benefit and risk fields with solver diagnostics
/// (`[benefit, risk]` order).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub benefit: ScalarField,
    pub risk: ScalarField,
    pub solve_iterations: [usize; 2],
    pub residuals: [f64; 2],
}

/// Exponential proximity kernel `exp(-r / lambda)`.
#[inline]
pub fn kernel_g(r: f64, lambda: f64) -> f64 {
    libm::exp(-r / lambda)
}

/// Proximity kernel amplified by speed: `exp(-r / lambda) * (1 + v² / v_max²)`.
#[inline]
pub fn kernel_h(r: f64, v: f64, lambda: f64, v_max: f64) -> f64 {
    kernel_g(r, lambda) * (1.0 + (v * v) / (v_max * v_max))
}

/// `sum_style alpha_b * sum_atoms w * G(|π(x) - r|)` at every node.
pub fn benefit_source(measures: &StyleMeasures, styles: &StyleTable, grid: &GridSpec) -> ScalarField {
    let mut field = ScalarField::zeros(*grid);
    for (label, measure) in measures.iter() {
        let p = styles.get(label);
        for atom in &measure.atoms {
            let pos = project_position(&atom.state);
            let amp = p.alpha_b * atom.weight;
            accumulate(&mut field, |s, d| amp * kernel_g(libm::hypot(s - pos.s, d - pos.d), p.lambda_b));
        }
    }
    field
}

/// `sum_style alpha_r * sum_atoms w * H(|π(x) - r|, |π̇(x)|)` at every node.
pub fn risk_source(measures: &StyleMeasures, styles: &StyleTable, grid: &GridSpec, v_max: f64) -> ScalarField {
    let mut field = ScalarField::zeros(*grid);
    for (label, measure) in measures.iter() {
        let p = styles.get(label);
        for atom in &measure.atoms {
            let pos = project_position(&atom.state);
            let speed = atom.state.speed();
            let amp = p.alpha_r * atom.weight;
            accumulate(&mut field, |s, d| {
                amp * kernel_h(libm::hypot(s - pos.s, d - pos.d), speed, p.lambda_r, v_max)
            });
        }
    }
    field
}

fn accumulate(field: &mut ScalarField, f: impl Fn(f64, f64) -> f64) {
    let spec = field.spec;
    for i in 0..spec.n_s {
        let s = spec.s_at(i);
        for j in 0..spec.n_d {
            field.values[i * spec.n_d + j] += f(s, spec.d_at(j));
        }
    }
}

/// Separable Gaussian blur with radius `sigma` (metres), truncated at three
/// radii and renormalized near the boundary.
pub fn gaussian_smooth(field: &ScalarField, sigma: f64) -> ScalarField {
    if !(sigma > 0.0) {
        return field.clone();
    }
    let spec = field.spec;
    let pass = |values: &[f64], along_s: bool| -> Vec<f64> {
        let (n, h) = if along_s { (spec.n_s, spec.ds()) } else { (spec.n_d, spec.dd()) };
        let reach = libm::ceil(3.0 * sigma / h) as isize;
        let weights: Vec<f64> = (-reach..=reach)
            .map(|k| libm::exp(-0.5 * (k as f64 * h / sigma) * (k as f64 * h / sigma)))
            .collect();
        let mut out = vec![0.0; values.len()];
        for i in 0..spec.n_s {
            for j in 0..spec.n_d {
                let centre = if along_s { i } else { j } as isize;
                let (mut acc, mut norm) = (0.0, 0.0);
                for (w, k) in weights.iter().zip(-reach..=reach) {
                    let idx = centre + k;
                    if idx < 0 || idx >= n as isize {
                        continue;
                    }
                    let src = if along_s {
                        spec.index(idx as usize, j)
                    } else {
                        spec.index(i, idx as usize)
                    };
                    acc += w * values[src];
                    norm += w;
                }
                out[spec.index(i, j)] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(&field.values, true);
    ScalarField {
        spec,
        values: pass(&tmp, false),
    }
}

/// Result of one screened Poisson solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenedSolve {
    pub field: ScalarField,
    pub iterations: usize,
    pub residual: f64,
}

/// Apply `-∇² + λ` with zero-flux boundaries.
pub fn apply_screened_operator(spec: &GridSpec, tikhonov: f64, x: &[f64], out: &mut [f64]) {
    laplacian_into(spec, x, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = tikhonov * xi - *o;
    }
}

/// Conjugate-gradient solve of `-∇²F + λF = source`.
pub fn solve_screened_poisson(source: &ScalarField, tikhonov: f64, params: &FieldParams) -> Result<ScreenedSolve> {
    if !(tikhonov > 0.0) {
        return Err(Error::invalid("tikhonov", "must be positive"));
    }
    let spec = source.spec;
    let n = spec.len();
    let b = &source.values;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(ScreenedSolve {
            field: ScalarField::zeros(spec),
            iterations: 0,
            residual: 0.0,
        });
    }
    // The diagonal is constant in the interior, so start from b / diag.
    let diag = tikhonov + 2.0 / (spec.ds() * spec.ds()) + 2.0 / (spec.dd() * spec.dd());
    let mut x: Vec<f64> = b.iter().map(|v| v / diag).collect();
    let mut ax = vec![0.0; n];
    apply_screened_operator(&spec, tikhonov, &x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let target = params.cg_tol * b_norm;
    let mut iterations = 0;
    while libm::sqrt(rr) > target {
        if iterations == params.cg_max_iter {
            return Err(Error::NoConvergence {
                solver: "screened Poisson CG",
                iterations,
                residual: libm::sqrt(rr) / b_norm,
            });
        }
        apply_screened_operator(&spec, tikhonov, &p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_next;
        iterations += 1;
    }
    // Report the true residual rather than the recursively updated one.
    apply_screened_operator(&spec, tikhonov, &x, &mut ax);
    let true_res = norm(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>()) / b_norm;
    Ok(ScreenedSolve {
        field: ScalarField { spec, values: x },
        iterations,
        residual: true_res,
    })
}

/// Assemble both sources and solve for the benefit and risk fields.
pub fn build_fields(
    measures: &StyleMeasures,
    styles: &StyleTable,
    grid: &GridSpec,
    params: &FieldParams,
) -> Result<FieldPair> {
    let mut b_src = benefit_source(measures, styles, grid);
    let mut r_src = risk_source(measures, styles, grid, params.v_max);
    if params.spread_sources {
        // One radius per field: the atom-weighted mean over present styles.
        let radius = |pick: fn(&crate::population::StyleParameters) -> f64| {
            let (mut acc, mut n) = (0.0, 0usize);
            for (label, m) in measures.iter() {
                acc += pick(styles.get(label)) * m.len() as f64;
                n += m.len();
            }
            if n == 0 {
                0.0
            } else {
                acc / n as f64
            }
        };
        b_src = gaussian_smooth(&b_src, radius(|p| p.sigma_b));
        r_src = gaussian_smooth(&r_src, radius(|p| p.sigma_r));
    }
    let b = solve_screened_poisson(&b_src, params.tikhonov_b, params)?;
    let r = solve_screened_poisson(&r_src, params.tikhonov_r, params)?;
    Ok(FieldPair {
        benefit: b.field,
        risk: r.field,
        solve_iterations: [b.iterations, r.iterations],
        residuals: [b.residual, r.residual],
    })
}

/// Discrete version of `∫ ½|∇F|² - source·F + λ/2 F²`, whose stationary
/// point is the screened Poisson solution.
pub fn screened_energy(field: &ScalarField, source: &ScalarField, tikhonov: f64) -> f64 {
    let spec = field.spec;
    let mut lap = vec![0.0; spec.len()];
    laplacian_into(&spec, &field.values, &mut lap);
    let e: f64 = field
        .values
        .iter()
        .zip(&lap)
        .zip(&source.values)
        .map(|((f, l), s)| -0.5 * f * l - s * f + 0.5 * tikhonov * f * f)
        .sum();
    e * spec.cell_area()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}
