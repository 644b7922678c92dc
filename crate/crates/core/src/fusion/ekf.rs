//! Extended Kalman filter over planar robot poses `(x, y, θ)`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Gaussian pose belief.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        Self { mean, covariance }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.covariance - self.covariance.transpose()).abs().max() <= tol
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (self.covariance + self.covariance.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

/// State transition `x_t = f(x_{t-1}, u_t) + w_t`, `w_t ~ N(0, Q)`.
pub trait MotionModel {
    fn transition(&self, x: &Vector3<f64>, u: &Vector3<f64>) -> Vector3<f64>;
    /// Jacobian of `transition` with respect to the state.
    fn jacobian(&self, x: &Vector3<f64>, u: &Vector3<f64>) -> Matrix3<f64>;
    fn process_noise(&self) -> Matrix3<f64>;
}

/// Measurement `z_t = h(x_t) + v_t`, `v_t ~ N(0, R)`.
pub trait ObservationModel {
    fn measure(&self, x: &Vector3<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &Vector3<f64>) -> DMatrix<f64>;
    fn measurement_noise(&self) -> DMatrix<f64>;
}

/// Displacement given in the world frame: `f(x, u) = x + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldOdometry {
    pub q: Matrix3<f64>,
}

impl MotionModel for WorldOdometry {
    fn transition(&self, x: &Vector3<f64>, u: &Vector3<f64>) -> Vector3<f64> {
        x + u
    }

    fn jacobian(&self, _x: &Vector3<f64>, _u: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity()
    }

    fn process_noise(&self) -> Matrix3<f64> {
        self.q
    }
}

/// Displacement `(forward, left, turn)` in the robot's body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyOdometry {
    pub q: Matrix3<f64>,
}

impl MotionModel for BodyOdometry {
    fn transition(&self, x: &Vector3<f64>, u: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = x.z.sin_cos();
        Vector3::new(
            x.x + u.x * c - u.y * s,
            x.y + u.x * s + u.y * c,
            wrap_angle(x.z + u.z),
        )
    }

    fn jacobian(&self, x: &Vector3<f64>, u: &Vector3<f64>) -> Matrix3<f64> {
        let (s, c) = x.z.sin_cos();
        Matrix3::new(
            1.0, 0.0, -u.x * s - u.y * c,
            0.0, 1.0, u.x * c - u.y * s,
            0.0, 0.0, 1.0,
        )
    }

    fn process_noise(&self) -> Matrix3<f64> {
        self.q
    }
}

/// Direct observation of the planar position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionObservation {
    pub r: DMatrix<f64>,
}

impl PositionObservation {
    pub fn isotropic(sigma: f64) -> Self {
        Self {
            r: DMatrix::from_diagonal_element(2, 2, sigma * sigma),
        }
    }
}

impl ObservationModel for PositionObservation {
    fn measure(&self, x: &Vector3<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x.x, x.y])
    }

    fn jacobian(&self, _x: &Vector3<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    fn measurement_noise(&self) -> DMatrix<f64> {
        self.r.clone()
    }
}

/// Linear measurement `z = H·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ObservationModel for LinearObservation {
    fn measure(&self, x: &Vector3<f64>) -> DVector<f64> {
        &self.h * DVector::from_column_slice(x.as_slice())
    }

    fn jacobian(&self, _x: &Vector3<f64>) -> DMatrix<f64> {
        self.h.clone()
    }

    fn measurement_noise(&self) -> DMatrix<f64> {
        self.r.clone()
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

pub fn ekf_predict(b: &GaussianBelief, u: &Vector3<f64>, mm: &impl MotionModel) -> GaussianBelief {
    let f = mm.jacobian(&b.mean, u);
    GaussianBelief {
        mean: mm.transition(&b.mean, u),
        covariance: symmetrize(&(f * b.covariance * f.transpose() + mm.process_noise())),
    }
}

/// Kalman correction with the observation model linearized at the mean.
/// Uses the Joseph form so the covariance stays positive semidefinite.
/// Returns the prior unchanged if the innovation covariance is singular.
pub fn ekf_update(b: &GaussianBelief, z: &DVector<f64>, om: &impl ObservationModel) -> GaussianBelief {
    let h = om.jacobian(&b.mean);
    let r = om.measurement_noise();
    let p = DMatrix::from_column_slice(3, 3, b.covariance.as_slice());
    let innovation = z - om.measure(&b.mean);
    let s = &h * &p * h.transpose() + &r;
    let Some(s_inv) = s.try_inverse() else {
        return b.clone();
    };
    let k = &p * h.transpose() * s_inv;
    let mean = DVector::from_column_slice(b.mean.as_slice()) + &k * innovation;
    let i_kh = DMatrix::identity(3, 3) - &k * &h;
    let cov = &i_kh * &p * i_kh.transpose() + &k * &r * k.transpose();
    GaussianBelief {
        mean: Vector3::new(mean[0], mean[1], mean[2]),
        covariance: symmetrize(&Matrix3::from_column_slice(cov.as_slice())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn belief() -> GaussianBelief {
        GaussianBelief::new(
            Vector3::new(1.0, 2.0, 0.3),
            Matrix3::new(0.2, 0.01, 0.0, 0.01, 0.3, 0.02, 0.0, 0.02, 0.1),
        )
    }

    #[test]
    fn zero_motion_zero_noise_is_identity() {
        let mm = WorldOdometry { q: Matrix3::zeros() };
        assert_eq!(ekf_predict(&belief(), &Vector3::zeros(), &mm), belief());
    }

    #[test]
    fn pure_translation_shifts_mean() {
        let mm = WorldOdometry { q: Matrix3::zeros() };
        let out = ekf_predict(&belief(), &Vector3::new(1.0, 0.0, 0.0), &mm);
        assert_eq!(out.mean, Vector3::new(2.0, 2.0, 0.3));
        assert_eq!(out.covariance, belief().covariance);
    }

    #[test]
    fn process_noise_adds_its_trace() {
        let mm = WorldOdometry {
            q: Matrix3::from_diagonal_element(0.01),
        };
        let out = ekf_predict(&belief(), &Vector3::new(0.5, -0.5, 0.1), &mm);
        assert!((out.covariance.trace() - belief().covariance.trace() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn body_odometry_jacobian_matches_finite_differences() {
        let mm = BodyOdometry { q: Matrix3::zeros() };
        let x = Vector3::new(0.4, -1.0, 0.7);
        let u = Vector3::new(0.3, 0.1, 0.05);
        let j = mm.jacobian(&x, &u);
        let eps = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += eps;
            xm[k] -= eps;
            let col = (mm.transition(&xp, &u) - mm.transition(&xm, &u)) / (2.0 * eps);
            assert!((col - j.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn zero_gain_limit_leaves_belief() {
        let om = PositionObservation {
            r: DMatrix::from_diagonal_element(2, 2, 1e300),
        };
        let b = belief();
        let z = om.measure(&b.mean);
        let out = ekf_update(&b, &z, &om);
        assert_eq!(out.mean, b.mean);
        assert!((out.covariance - b.covariance).abs().max() < 1e-12);
    }

    #[test]
    fn measurement_dominated_limit() {
        let om = PositionObservation::isotropic(1e-6);
        let z = DVector::from_column_slice(&[4.0, -3.0]);
        let out = ekf_update(&belief(), &z, &om);
        assert!((out.mean.x - 4.0).abs() < 1e-9 && (out.mean.y + 3.0).abs() < 1e-9);
        assert!(out.covariance.trace() <= belief().covariance.trace());
    }

    #[test]
    fn scalar_conjugate_update() {
        let prior_var = 0.3_f64;
        let r = 0.05_f64;
        let b = GaussianBelief::new(Vector3::new(1.5, 0.0, 0.0), Matrix3::from_diagonal(&Vector3::new(prior_var, 1.0, 1.0)));
        let om = LinearObservation {
            h: DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            r: DMatrix::from_element(1, 1, r),
        };
        let z = DVector::from_element(1, 2.1);
        let out = ekf_update(&b, &z, &om);
        let mean = (1.5 * r + 2.1 * prior_var) / (prior_var + r);
        let var = prior_var * r / (prior_var + r);
        assert!((out.mean.x - mean).abs() < 1e-12);
        assert!((out.covariance[(0, 0)] - var).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}
