//! Uniform node-centred grid over the `(s, d)` road domain and the discrete
//! operators used by the field solvers.
//!
//! Values are stored s-major: node `(i, j)` (longitudinal index `i`, lateral
//! index `j`) lives at `i * n_d + j`. Boundaries are zero-flux: the Laplacian
//! uses ghost nodes equal to their boundary neighbour, which makes it
//! symmetric with zero column sums.

use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::Point2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub n_s: usize,
    pub n_d: usize,
}

impl Default for GridSpec {
    /// 250 x 20 nodes over s in [0, 600] m, d in [-8, 8] m.
    fn default() -> Self {
        Self {
            s_min: 0.0,
            s_max: 600.0,
            d_min: -8.0,
            d_max: 8.0,
            n_s: 250,
            n_d: 20,
        }
    }
}

impl GridSpec {
    pub fn new(s_min: f64, s_max: f64, d_min: f64, d_max: f64, n_s: usize, n_d: usize) -> Result<Self> {
        let spec = Self {
            s_min,
            s_max,
            d_min,
            d_max,
            n_s,
            n_d,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_max > self.s_min) || !(self.s_min.is_finite() && self.s_max.is_finite()) {
            return Err(Error::invalid("grid.s_max", "must exceed s_min"));
        }
        if !(self.d_max > self.d_min) || !(self.d_min.is_finite() && self.d_max.is_finite()) {
            return Err(Error::invalid("grid.d_max", "must exceed d_min"));
        }
        if self.n_s < 4 || self.n_d < 4 {
            return Err(Error::invalid("grid", "needs at least 4 nodes per axis"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_s * self.n_d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ds(&self) -> f64 {
        (self.s_max - self.s_min) / (self.n_s - 1) as f64
    }

    pub fn dd(&self) -> f64 {
        (self.d_max - self.d_min) / (self.n_d - 1) as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.ds() * self.dd()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_d + j
    }

    #[inline]
    pub fn s_at(&self, i: usize) -> f64 {
        self.s_min + i as f64 * self.ds()
    }

    #[inline]
    pub fn d_at(&self, j: usize) -> f64 {
        self.d_min + j as f64 * self.dd()
    }

    pub fn node(&self, i: usize, j: usize) -> Point2 {
        Point2::new(self.s_at(i), self.d_at(j))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self::constant(spec, 0.0)
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
        }
    }

    /// Field sampled from `f(s, d)` at every node.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(spec.len());
        for i in 0..spec.n_s {
            let s = spec.s_at(i);
            for j in 0..spec.n_d {
                values.push(f(s, spec.d_at(j)));
            }
        }
        Self { spec, values }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::GridMismatch);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self { spec, values })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm2(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        self.spec == other.spec
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise `self * a + other * b`.
    pub fn combine(&self, a: f64, other: &ScalarField, b: f64) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
        }
    }
}

/// Per-node `(∂/∂s, ∂/∂d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub spec: GridSpec,
    pub ds: Vec<f64>,
    pub dd: Vec<f64>,
}

/// Second-order one-sided difference at the ends, central inside.
#[inline]
fn diff(f: impl Fn(usize) -> f64, k: usize, n: usize, h: f64) -> f64 {
    if k == 0 {
        (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
    } else if k == n - 1 {
        (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h)
    } else {
        (f(k + 1) - f(k - 1)) / (2.0 * h)
    }
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let spec = f.spec;
    let (hs, hd) = (spec.ds(), spec.dd());
    let mut gs = vec![0.0; spec.len()];
    let mut gd = vec![0.0; spec.len()];
    for i in 0..spec.n_s {
        for j in 0..spec.n_d {
            let k = spec.index(i, j);
            gs[k] = diff(|ii| f.at(ii, j), i, spec.n_s, hs);
            gd[k] = diff(|jj| f.at(i, jj), j, spec.n_d, hd);
        }
    }
    VectorField { spec, ds: gs, dd: gd }
}

/// 5-point Laplacian with zero-flux ghost nodes.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let mut out = vec![0.0; f.spec.len()];
    laplacian_into(&f.spec, &f.values, &mut out);
    ScalarField {
        spec: f.spec,
        values: out,
    }
}

pub(crate) fn laplacian_into(spec: &GridSpec, f: &[f64], out: &mut [f64]) {
    let (n_s, n_d) = (spec.n_s, spec.n_d);
    let (cs, cd) = (1.0 / (spec.ds() * spec.ds()), 1.0 / (spec.dd() * spec.dd()));
    for i in 0..n_s {
        for j in 0..n_d {
            let k = i * n_d + j;
            let c = f[k];
            let mut acc = 0.0;
            if i > 0 {
                acc += cs * (f[k - n_d] - c);
            }
            if i + 1 < n_s {
                acc += cs * (f[k + n_d] - c);
            }
            if j > 0 {
                acc += cd * (f[k - 1] - c);
            }
            if j + 1 < n_d {
                acc += cd * (f[k + 1] - c);
            }
            out[k] = acc;
        }
    }
}

/// Bilinear sample plus the exact partial derivatives of the interpolant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub ds: f64,
    pub dd: f64,
}

/// Interpolation of `f` at `p`. Points up to one cell outside the domain are
/// clamped onto the boundary; anything farther is an error.
pub fn sample_bilinear(f: &ScalarField, p: Point2) -> Result<f64> {
    sample_with_gradient(f, p).map(|s| s.value)
}

pub fn sample_with_gradient(f: &ScalarField, p: Point2) -> Result<Sample> {
    let spec = &f.spec;
    let (hs, hd) = (spec.ds(), spec.dd());
    if !(p.s.is_finite() && p.d.is_finite())
        || p.s < spec.s_min - hs
        || p.s > spec.s_max + hs
        || p.d < spec.d_min - hd
        || p.d > spec.d_max + hd
    {
        return Err(Error::OutOfDomain { s: p.s, d: p.d });
    }
    Ok(sample_saturating(f, p))
}

/// Interpolation with every point clamped onto the domain; derivatives along
/// a clamped axis are zero.
pub fn sample_saturating(f: &ScalarField, p: Point2) -> Sample {
    let spec = &f.spec;
    let (hs, hd) = (spec.ds(), spec.dd());
    let (s, s_inside) = clamp_axis(p.s, spec.s_min, spec.s_max);
    let (d, d_inside) = clamp_axis(p.d, spec.d_min, spec.d_max);
    let (i, ts) = locate(s, spec.s_min, hs, spec.n_s);
    let (j, td) = locate(d, spec.d_min, hd, spec.n_d);
    let f00 = f.at(i, j);
    let f10 = f.at(i + 1, j);
    let f01 = f.at(i, j + 1);
    let f11 = f.at(i + 1, j + 1);
    let value = f00 * (1.0 - ts) * (1.0 - td) + f10 * ts * (1.0 - td) + f01 * (1.0 - ts) * td + f11 * ts * td;
    let ds = if s_inside {
        ((f10 - f00) * (1.0 - td) + (f11 - f01) * td) / hs
    } else {
        0.0
    };
    let dd = if d_inside {
        ((f01 - f00) * (1.0 - ts) + (f11 - f10) * ts) / hd
    } else {
        0.0
    };
    Sample { value, ds, dd }
}

fn clamp_axis(x: f64, lo: f64, hi: f64) -> (f64, bool) {
    if x.is_nan() || x < lo {
        (lo, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Cell index and local coordinate in `[0, 1]`.
fn locate(x: f64, lo: f64, h: f64, n: usize) -> (usize, f64) {
    let u = (x - lo) / h;
    let cell = (libm::floor(u) as isize).clamp(0, n as isize - 2) as usize;
    (cell, (u - cell as f64).clamp(0.0, 1.0))
}

/// Affine rescale onto `[0, 1]`; a flat field (range below 1e-12) maps to 0.5.
pub fn normalize(f: &ScalarField) -> ScalarField {
    let (lo, hi) = (f.min(), f.max());
    let range = hi - lo;
    if !(range >= 1e-12) {
        return ScalarField::constant(f.spec, 0.5);
    }
    f.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}
