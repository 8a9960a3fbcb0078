//! Axis-angle parametrization of rotations (exponential map on SO(3)).

use serde::{Deserialize, Serialize};

pub type Mat3 = [[f64; 3]; 3];

/// Below this angle the exponential map switches to its second-order series.
pub const SMALL_ANGLE: f64 = 1e-6;

pub fn hat(v: [f64; 3]) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

pub fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Rodrigues exponential map.
pub fn exp(r: [f64; 3]) -> Mat3 {
    let theta = norm(r);
    let k = hat(r);
    let k2 = mat_mul(&k, &k);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0, 0.5)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / (theta * theta))
    };
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id + a * k[i][j] + b * k2[i][j]
        })
    })
}

/// Partial derivatives of `exp(r)` with respect to each component of `r`.
pub fn exp_jacobian(r: [f64; 3]) -> [Mat3; 3] {
    let theta = norm(r);
    let e = |k: usize| -> [f64; 3] { std::array::from_fn(|i| if i == k { 1.0 } else { 0.0 }) };
    if theta < SMALL_ANGLE {
        let kr = hat(r);
        std::array::from_fn(|k| {
            let ek = hat(e(k));
            let a = mat_mul(&ek, &kr);
            let b = mat_mul(&kr, &ek);
            std::array::from_fn(|i| std::array::from_fn(|j| ek[i][j] + 0.5 * (a[i][j] + b[i][j])))
        })
    } else {
        let rot = exp(r);
        let kr = hat(r);
        let t2 = theta * theta;
        std::array::from_fn(|k| {
            // (I - R) e_k is the k-th column of I - R
            let col: [f64; 3] = std::array::from_fn(|i| e(k)[i] - rot[i][k]);
            let w = hat(cross(r, col));
            let inner: Mat3 =
                std::array::from_fn(|i| std::array::from_fn(|j| (r[k] * kr[i][j] + w[i][j]) / t2));
            mat_mul(&inner, &rot)
        })
    }
}

/// Rotation angle of a rotation matrix, in radians.
pub fn angle(rot: &Mat3) -> f64 {
    let c = 0.5 * (rot[0][0] + rot[1][1] + rot[2][2] - 1.0);
    c.clamp(-1.0, 1.0).acos()
}

/// Per-subject rigid transform: axis-angle rotation and translation in
/// normalized coordinate units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotation(&self) -> Mat3 {
        exp(self.axis_angle)
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let y = mat_vec(&self.rotation(), x);
        std::array::from_fn(|i| y[i] + self.translation[i])
    }
}

/// `exp(r) x + t`.
pub fn rigid_transform(p: &RigidParams, x: [f64; 3]) -> [f64; 3] {
    p.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;
    use std::f64::consts::FRAC_PI_2;

    fn orthonormality_error(r: &Mat3) -> f64 {
        let rtr = mat_mul(&transpose(r), r);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr[i][j] - id).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_at_zero() {
        let p = RigidParams::identity();
        assert_eq!(p.apply([0.3, -0.2, 0.9]), [0.3, -0.2, 0.9]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = RigidParams {
            axis_angle: [0.0, 0.0, FRAC_PI_2],
            translation: [0.1, 0.2, 0.3],
        };
        let y = p.apply([1.0, 0.0, 0.0]);
        let want = [0.1, 1.2, 0.3];
        for d in 0..3 {
            assert!((y[d] - want[d]).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn random_rotations_are_valid() {
        let mut rng = stream(42, "so3");
        for i in 0..1000 {
            let scale = match i % 4 {
                0 => 1e-9,
                1 => 1e-7,
                2 => 0.1,
                _ => 3.0,
            };
            let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * scale);
            let rot = exp(r);
            assert!(orthonormality_error(&rot) < 1e-6);
            assert!((det(&rot) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_on_both_branches() {
        let h = 1e-6;
        for r in [[0.3, -0.7, 0.2], [2e-7, -1e-7, 3e-7], [1.2, 0.4, -2.1]] {
            let jac = exp_jacobian(r);
            for k in 0..3 {
                let mut rp = r;
                let mut rm = r;
                rp[k] += h;
                rm[k] -= h;
                let (a, b) = (exp(rp), exp(rm));
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (a[i][j] - b[i][j]) / (2.0 * h);
                        assert!((fd - jac[k][i][j]).abs() < 1e-6, "r={r:?} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn angle_recovers_norm() {
        let r = [0.1, 0.05, -0.02];
        let n = norm(r);
        assert!((angle(&exp(r)) - n).abs() < 1e-12);
    }
}
