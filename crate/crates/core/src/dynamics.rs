//! Discrete-time linear kinematics in Frenet coordinates.
//!
//! The state stacks position, velocity and acceleration for the longitudinal
//! (`s`) and lateral (`d`) axes; the control is the jerk on each axis. One
//! step of length `dt` is the exact zero-order-hold discretization of a
//! triple integrator per axis.

use nalgebra::{Matrix6, Matrix6x2, Vector2, Vector6};
use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Frenet state `(s, d, s_dot, d_dot, s_ddot, d_ddot)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VehicleState {
    pub s: f64,
    pub d: f64,
    pub s_dot: f64,
    pub d_dot: f64,
    pub s_ddot: f64,
    pub d_ddot: f64,
}

impl VehicleState {
    pub const fn new(s: f64, d: f64, s_dot: f64, d_dot: f64, s_ddot: f64, d_ddot: f64) -> Self {
        Self {
            s,
            d,
            s_dot,
            d_dot,
            s_ddot,
            d_ddot,
        }
    }

    /// State cruising at `speed` along the road at lateral offset `d`.
    pub const fn cruising(s: f64, d: f64, speed: f64) -> Self {
        Self::new(s, d, speed, 0.0, 0.0, 0.0)
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.s, self.d, self.s_dot, self.d_dot, self.s_ddot, self.d_ddot)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    pub fn speed(&self) -> f64 {
        libm::hypot(self.s_dot, self.d_dot)
    }
}

/// Jerk command: longitudinal `a_s` and lateral `omega_d`, both in m/s³.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlInput {
    pub a_s: f64,
    pub omega_d: f64,
}

impl ControlInput {
    pub const ZERO: Self = Self::new(0.0, 0.0);

    pub const fn new(a_s: f64, omega_d: f64) -> Self {
        Self { a_s, omega_d }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.a_s, self.omega_d)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Planar road position `(s, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point2 {
    pub s: f64,
    pub d: f64,
}

impl Point2 {
    pub const fn new(s: f64, d: f64) -> Self {
        Self { s, d }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        libm::hypot(self.s - other.s, self.d - other.d)
    }
}

/// Actuator envelope. `accel_max` bounds the acceleration states after a
/// clamped propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActuatorLimits {
    pub a_max: f64,
    pub omega_max: f64,
    pub accel_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self {
            a_max: 3.0,
            omega_max: 1.0,
            accel_max: 3.0,
        }
    }
}

/// System matrices of the discrete triple integrator plus its process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub dt: f64,
    pub a: Matrix6<f64>,
    pub b: Matrix6x2<f64>,
    pub q: Matrix6<f64>,
    pub sigma_w: f64,
    /// Lower-triangular factor with `noise_factor * noise_factor^T ≈ q`.
    noise_factor: Matrix6<f64>,
}

const NOISE_JITTER: f64 = 1e-12;

impl DynamicsModel {
    pub fn new(dt: f64, sigma_w: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("dt", "must be positive and finite"));
        }
        if !(sigma_w >= 0.0) || !sigma_w.is_finite() {
            return Err(Error::invalid("sigma_w", "must be nonnegative and finite"));
        }
        let dt2 = dt * dt;
        let dt3 = dt2 * dt;
        let dt4 = dt3 * dt;

        let mut a = Matrix6::identity();
        let mut b = Matrix6x2::zeros();
        let mut q = Matrix6::zeros();
        // Axis offsets: 0 = longitudinal, 1 = lateral.
        for axis in 0..2 {
            let (p, v, acc) = (axis, axis + 2, axis + 4);
            a[(p, v)] = dt;
            a[(p, acc)] = dt2 / 2.0;
            a[(v, acc)] = dt;

            b[(p, axis)] = dt3 / 6.0;
            b[(v, axis)] = dt2 / 2.0;
            b[(acc, axis)] = dt;

            let block = [[dt4 / 4.0, dt3 / 2.0, dt2 / 2.0], [dt3 / 2.0, dt2, dt], [dt2 / 2.0, dt, 1.0]];
            let idx = [p, v, acc];
            for (i, row) in block.iter().enumerate() {
                for (j, value) in row.iter().enumerate() {
                    q[(idx[i], idx[j])] = sigma_w * sigma_w * value;
                }
            }
        }
        let noise_factor = psd_factor(&q)?;
        Ok(Self {
            dt,
            a,
            b,
            q,
            sigma_w,
            noise_factor,
        })
    }

    pub fn noise_factor(&self) -> &Matrix6<f64> {
        &self.noise_factor
    }

    /// `A x + B u + w`.
    pub fn propagate(&self, x: &VehicleState, u: &ControlInput, w: &Vector6<f64>) -> Result<VehicleState> {
        if !x.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        if !(u.a_s.is_finite() && u.omega_d.is_finite()) {
            return Err(Error::NonFinite("control"));
        }
        if !w.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("noise"));
        }
        Ok(VehicleState::from_vector(&self.step_vector(&x.to_vector(), &u.to_vector(), w)))
    }

    /// Propagation followed by saturation of the acceleration states.
    pub fn propagate_clamped(
        &self,
        x: &VehicleState,
        u: &ControlInput,
        w: &Vector6<f64>,
        limits: &ActuatorLimits,
    ) -> Result<VehicleState> {
        let mut next = self.propagate(x, u, w)?;
        next.s_ddot = next.s_ddot.clamp(-limits.accel_max, limits.accel_max);
        next.d_ddot = next.d_ddot.clamp(-limits.accel_max, limits.accel_max);
        Ok(next)
    }

    #[inline]
    pub fn step_vector(&self, x: &Vector6<f64>, u: &Vector2<f64>, w: &Vector6<f64>) -> Vector6<f64> {
        self.a * x + self.b * u + w
    }

    /// One draw of the process noise `L z`, `z ~ N(0, I)`.
    pub fn sample_noise<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vector6<f64> {
        if self.sigma_w == 0.0 {
            return Vector6::zeros();
        }
        let z = Vector6::from_fn(|_, _| StandardNormal.sample(rng));
        self.noise_factor * z
    }
}

/// Cholesky factor of a symmetric PSD matrix, retried with diagonal jitter
/// when the matrix is singular to working precision.
fn psd_factor(q: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    if q.iter().all(|&v| v == 0.0) {
        return Ok(Matrix6::zeros());
    }
    if let Some(ch) = q.cholesky() {
        return Ok(ch.l());
    }
    let jittered = q + Matrix6::identity() * NOISE_JITTER;
    jittered
        .cholesky()
        .map(|ch| ch.l())
        .ok_or(Error::Factorization("process noise covariance is not positive semidefinite"))
}

pub fn clamp_control(u: &ControlInput, a_max: f64, omega_max: f64) -> ControlInput {
    ControlInput::new(u.a_s.clamp(-a_max, a_max), u.omega_d.clamp(-omega_max, omega_max))
}

pub fn project_position(x: &VehicleState) -> Point2 {
    Point2::new(x.s, x.d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_entries() {
        let m = DynamicsModel::new(0.1, 0.0).unwrap();
        assert_eq!(m.a[(0, 2)], 0.1);
        assert_eq!(m.a[(0, 4)], 0.1 * 0.1 / 2.0);
        assert_eq!(m.b[(4, 0)], 0.1);
        assert!((m.b[(0, 0)] - 1.6667e-4).abs() < 1e-8);
        assert_eq!(m.q, Matrix6::zeros());
    }

    #[test]
    fn noise_covariance_scale() {
        let m = DynamicsModel::new(0.1, 0.05).unwrap();
        assert!((m.q[(4, 4)] - 0.0025).abs() < 1e-15);
        assert_eq!(m.q, m.q.transpose());
        let eig = m.q.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-12);
        let rebuilt = m.noise_factor() * m.noise_factor().transpose();
        assert!((rebuilt - m.q).abs().max() < 1e-10);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(DynamicsModel::new(0.0, 0.1), Err(Error::InvalidParameter { .. })));
        assert!(matches!(DynamicsModel::new(-0.1, 0.1), Err(Error::InvalidParameter { .. })));
        assert!(DynamicsModel::new(0.1, -1.0).is_err());
    }

    #[test]
    fn constant_velocity_and_pure_jerk() {
        let m = DynamicsModel::new(0.1, 0.0).unwrap();
        let w = Vector6::zeros();
        let x = m
            .propagate(&VehicleState::cruising(0.0, 0.0, 10.0), &ControlInput::ZERO, &w)
            .unwrap();
        assert!((x.s - 1.0).abs() < 1e-15);
        assert_eq!(x.s_dot, 10.0);

        let x = m
            .propagate(&VehicleState::default(), &ControlInput::new(6.0, 0.0), &w)
            .unwrap();
        assert!((x.s - 0.001).abs() < 1e-15);
        assert!((x.s_dot - 0.03).abs() < 1e-15);
        assert!((x.s_ddot - 0.6).abs() < 1e-15);
        assert_eq!((x.d, x.d_dot, x.d_ddot), (0.0, 0.0, 0.0));
    }

    #[test]
    fn propagate_rejects_non_finite() {
        let m = DynamicsModel::new(0.1, 0.0).unwrap();
        let bad = VehicleState::cruising(f64::NAN, 0.0, 1.0);
        assert_eq!(
            m.propagate(&bad, &ControlInput::ZERO, &Vector6::zeros()),
            Err(Error::NonFinite("state"))
        );
        let u = ControlInput::new(f64::INFINITY, 0.0);
        assert!(m.propagate(&VehicleState::default(), &u, &Vector6::zeros()).is_err());
    }

    #[test]
    fn clamped_propagation_saturates_acceleration() {
        let m = DynamicsModel::new(0.1, 0.0).unwrap();
        let limits = ActuatorLimits::default();
        let x = VehicleState::new(0.0, 0.0, 20.0, 0.0, 2.95, -2.95);
        let next = m
            .propagate_clamped(&x, &ControlInput::new(3.0, -1.0), &Vector6::zeros(), &limits)
            .unwrap();
        assert_eq!(next.s_ddot, 3.0);
        assert_eq!(next.d_ddot, -3.0);
    }

    #[test]
    fn zero_noise_is_zero() {
        let m = DynamicsModel::new(0.1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(m.sample_noise(&mut rng), Vector6::zeros());
        }
    }

    #[test]
    fn noise_is_deterministic_under_seed() {
        let m = DynamicsModel::new(0.1, 0.05).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(m.sample_noise(&mut r1), m.sample_noise(&mut r2));
    }

    #[test]
    fn monte_carlo_covariance() {
        let m = DynamicsModel::new(0.1, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let w = m.sample_noise(&mut rng);
            sum += w[4];
            sum_sq += w[4] * w[4];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - 0.0025).abs() / 0.0025 < 0.05, "var = {var}");
    }

    #[test]
    fn control_clamping() {
        assert_eq!(clamp_control(&ControlInput::new(5.0, 0.0), 3.0, 1.0), ControlInput::new(3.0, 0.0));
        assert_eq!(clamp_control(&ControlInput::ZERO, 3.0, 1.0), ControlInput::ZERO);
        assert_eq!(
            clamp_control(&ControlInput::new(-2.0, -1.5), 3.0, 1.0),
            ControlInput::new(-2.0, -1.0)
        );
    }

    #[test]
    fn projection() {
        assert_eq!(project_position(&VehicleState::cruising(200.0, 0.0, 22.0)), Point2::new(200.0, 0.0));
        assert_eq!(project_position(&VehicleState::default()), Point2::new(0.0, 0.0));
        let x = VehicleState::new(270.0, 3.75, 15.0, 0.1, 0.2, 0.3);
        assert_eq!(project_position(&x), Point2::new(270.0, 3.75));
    }
}
