//! Quaternion algebra, rotation utilities, and small dense linear algebra
//! helpers shared across the pipeline, including the analytic adjoints needed
//! by the hand-written backward passes.

use nalgebra::{Matrix3, Vector3};

/// Unit-norm tolerance used by the early-out in [`Quat::normalized`]. A few
/// ulps wide so that renormalizing an already-unit quaternion returns the
/// exact same bits; this keeps zero-offset deformation chains bit-stable.
const UNIT_NORM_EPS: f64 = 16.0 * f64::EPSILON;

/// Quaternion stored as (w, x, y, z) with `w` the scalar part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns the unit quaternion along `self`.
    ///
    /// If the squared norm is already within a few ulps of one the input is
    /// returned unchanged, so repeated normalization is bit-stable.
    pub fn normalized(self) -> Quat {
        let n2 = self.dot(self);
        if (n2 - 1.0).abs() <= UNIT_NORM_EPS {
            return self;
        }
        let inv = 1.0 / n2.sqrt();
        Quat::new(self.w * inv, self.x * inv, self.y * inv, self.z * inv)
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Adjoint of [`Quat::normalized`]: maps the gradient w.r.t. the unit output
/// back to the raw input. Jacobian is `(I - u uᵀ) / ‖q‖`.
pub fn normalize_backward(raw: Quat, grad_unit: Quat) -> Quat {
    let n = raw.norm();
    let u = raw.normalized();
    let d = u.dot(grad_unit);
    Quat::new(
        (grad_unit.w - u.w * d) / n,
        (grad_unit.x - u.x * d) / n,
        (grad_unit.y - u.y * d) / n,
        (grad_unit.z - u.z * d) / n,
    )
}

/// Adjoint of the Hamilton product: gradients w.r.t. both factors.
pub fn quat_mul_backward(a: Quat, b: Quat, g: Quat) -> (Quat, Quat) {
    // Product components are bilinear; differentiate each explicitly.
    let ga = Quat::new(
        g.w * b.w + g.x * b.x + g.y * b.y + g.z * b.z,
        -g.w * b.x + g.x * b.w - g.y * b.z + g.z * b.y,
        -g.w * b.y + g.x * b.z + g.y * b.w - g.z * b.x,
        -g.w * b.z - g.x * b.y + g.y * b.x + g.z * b.w,
    );
    let gb = Quat::new(
        g.w * a.w + g.x * a.x + g.y * a.y + g.z * a.z,
        -g.w * a.x + g.x * a.w + g.y * a.z - g.z * a.y,
        -g.w * a.y - g.x * a.z + g.y * a.w + g.z * a.x,
        -g.w * a.z + g.x * a.y - g.y * a.x + g.z * a.w,
    );
    (ga, gb)
}

/// Adjoint of [`Quat::to_matrix`] for a unit quaternion: contracts the
/// upstream matrix gradient with `∂R/∂(w,x,y,z)`.
pub fn quat_to_matrix_backward(q: Quat, g: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Quat::new(gw, gx, gy, gz)
}

/// Rotation matrix to quaternion (Shepperd's method). Not differentiated;
/// used only outside the optimization path.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Quat {
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quat::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Quat::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q.normalized()
}

/// Cross-product matrix of `a`.
pub fn skew_matrix(a: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Axial vector of the skew part of `m`: `(M21-M12, M02-M20, M10-M01) / 2`
/// scaled by 2, i.e. the vector `c` with `⟨M, [ω]ₓ⟩ = cᵀω`.
fn skew_contraction(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Orthogonal polar factor of an invertible 3×3 matrix via Higham's Newton
/// iteration. The exact identity matrix is a bitwise fixed point.
///
/// Returns `(Q, H)` with `A = Q·H`, `Q` orthogonal, `H` symmetric.
pub fn polar3(a: &Matrix3<f64>) -> Option<(Matrix3<f64>, Matrix3<f64>)> {
    let mut x = *a;
    for _ in 0..50 {
        let inv_t = x.try_inverse()?.transpose();
        let next = (x + inv_t) * 0.5;
        let delta: f64 = (next - x).iter().map(|v| v.abs()).sum();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    let h = (x.transpose() * a + a.transpose() * x) * 0.5;
    Some((x, h))
}

/// Adjoint of the orthogonal polar factor: given `Q, H` from [`polar3`] and
/// the upstream gradient w.r.t. `Q`, returns the gradient w.r.t. `A`.
///
/// Derivation: with `Ω = QᵀdQ` skew, `[K ω]ₓ = QᵀdA − dAᵀQ` where
/// `K = tr(H)·I − H`, hence `Ā = Q·[K⁻¹ c]ₓ` with `c` the skew contraction of
/// `QᵀḠ`.
pub fn polar3_backward(q: &Matrix3<f64>, h: &Matrix3<f64>, grad_q: &Matrix3<f64>) -> Matrix3<f64> {
    let k = Matrix3::identity() * h.trace() - h;
    let c = skew_contraction(&(q.transpose() * grad_q));
    let u = k
        .try_inverse()
        .map(|ki| ki * c)
        .unwrap_or_else(Vector3::zeros);
    q * skew_matrix(u)
}

/// Eigenvalues of a symmetric 3×3 matrix, ascending. Closed-form trig method.
pub fn sym3_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let p1 = m[(0, 1)] * m[(0, 1)] + m[(0, 2)] * m[(0, 2)] + m[(1, 2)] * m[(1, 2)];
    if p1 == 0.0 {
        let mut d = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return d;
    }
    let q = m.trace() / 3.0;
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (m - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let mut out = [e1, e2, e3];
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Central finite-difference gradient of a scalar function, used as the
/// independent oracle by the gradient test suites.
pub fn fd_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error with an absolute floor, the comparison rule of the
/// gradient suites.
pub fn rel_err(got: f64, want: f64, abs_floor: f64) -> f64 {
    let denom = want.abs().max(abs_floor);
    (got - want).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_quat(rng: &mut impl Rng) -> Quat {
        Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalized()
    }

    #[test]
    fn normalized_is_bit_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = rand_quat(&mut rng);
            let q2 = q.normalized();
            assert_eq!(q.to_array().map(f64::to_bits), q2.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn identity_product_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q = rand_quat(&mut rng);
            let p = q.mul(Quat::IDENTITY);
            assert_eq!(q.to_array().map(f64::to_bits), p.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn to_matrix_is_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = rand_quat(&mut rng).to_matrix();
            let should_be_id = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(should_be_id[(i, j)], want, epsilon = 1e-12);
                }
            }
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mul_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let a = rand_quat(&mut rng);
            let b = rand_quat(&mut rng);
            let prod = a.mul(b).normalized().to_matrix();
            let matmul = a.to_matrix() * b.to_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(prod[(i, j)], matmul[(i, j)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn matrix_quat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = rand_quat(&mut rng);
            let q2 = matrix_to_quat(&q.to_matrix());
            // Same rotation up to sign.
            let d = q.dot(q2).abs();
            assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let raw = Quat::new(
                rng.gen_range(0.5..1.5),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            let w: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let f = |x: &[f64]| {
                let u = Quat::new(x[0], x[1], x[2], x[3]).normalized();
                w[0] * u.w + w[1] * u.x + w[2] * u.y + w[3] * u.z
            };
            let fd = fd_grad(f, &raw.to_array(), 1e-6);
            let got = normalize_backward(raw, Quat::from_array(w));
            for (g, e) in got.to_array().iter().zip(fd.iter()) {
                assert!(rel_err(*g, *e, 1e-8) < 1e-6, "got {g} want {e}");
            }
        }
    }

    #[test]
    fn quat_mul_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_quat(&mut rng);
        let b = rand_quat(&mut rng);
        let w: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let loss = |p: Quat| w[0] * p.w + w[1] * p.x + w[2] * p.y + w[3] * p.z;
        let (ga, gb) = quat_mul_backward(a, b, Quat::from_array(w));
        let fd_a = fd_grad(
            |x: &[f64]| loss(Quat::new(x[0], x[1], x[2], x[3]).mul(b)),
            &a.to_array(),
            1e-6,
        );
        let fd_b = fd_grad(
            |x: &[f64]| loss(a.mul(Quat::new(x[0], x[1], x[2], x[3]))),
            &b.to_array(),
            1e-6,
        );
        for (g, e) in ga.to_array().iter().zip(fd_a.iter()) {
            assert!(rel_err(*g, *e, 1e-8) < 1e-6);
        }
        for (g, e) in gb.to_array().iter().zip(fd_b.iter()) {
            assert!(rel_err(*g, *e, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn quat_to_matrix_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let q = rand_quat(&mut rng);
            let mut w = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    w[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            // Treat the quat components as free (matrix formula itself).
            let f = |x: &[f64]| {
                let r = Quat::new(x[0], x[1], x[2], x[3]).to_matrix();
                (0..3).map(|i| (0..3).map(|j| w[(i, j)] * r[(i, j)]).sum::<f64>()).sum()
            };
            let fd = fd_grad(f, &q.to_array(), 1e-6);
            let got = quat_to_matrix_backward(q, &w);
            for (g, e) in got.to_array().iter().zip(fd.iter()) {
                assert!(rel_err(*g, *e, 1e-8) < 1e-5, "got {g} want {e}");
            }
        }
    }

    #[test]
    fn polar_of_identity_is_bit_exact() {
        let (qi, hi) = polar3(&Matrix3::identity()).unwrap();
        assert_eq!(qi, Matrix3::identity());
        assert_eq!(hi, Matrix3::identity());
    }

    #[test]
    fn polar_of_rotation_is_that_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let r = rand_quat(&mut rng).to_matrix();
            let (q, _h) = polar3(&r).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(q[(i, j)], r[(i, j)], epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn polar_recovers_orthogonal_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..30 {
            let r = rand_quat(&mut rng).to_matrix();
            // SPD stretch.
            let mut s = Matrix3::identity();
            s[(0, 0)] = rng.gen_range(0.5..2.0);
            s[(1, 1)] = rng.gen_range(0.5..2.0);
            s[(2, 2)] = rng.gen_range(0.5..2.0);
            s[(0, 1)] = rng.gen_range(-0.2..0.2);
            s[(1, 0)] = s[(0, 1)];
            let a = r * s;
            let (q, h) = polar3(&a).unwrap();
            let recon = q * h;
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(recon[(i, j)], a[(i, j)], epsilon = 1e-10);
                }
            }
            let orth = q.transpose() * q;
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(orth[(i, j)], want, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn polar_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let r = rand_quat(&mut rng).to_matrix();
            let mut a = r;
            for i in 0..3 {
                for j in 0..3 {
                    a[(i, j)] += rng.gen_range(-0.2..0.2);
                }
            }
            let mut w = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    w[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            let (q, h) = polar3(&a).unwrap();
            let grad = polar3_backward(&q, &h, &w);
            let flat: Vec<f64> = a.iter().copied().collect();
            let f = |x: &[f64]| {
                let m = Matrix3::from_column_slice(x);
                let (qq, _) = polar3(&m).unwrap();
                (0..3).map(|i| (0..3).map(|j| w[(i, j)] * qq[(i, j)]).sum::<f64>()).sum()
            };
            let fd = fd_grad(f, &flat, 1e-6);
            let got: Vec<f64> = grad.iter().copied().collect();
            for (g, e) in got.iter().zip(fd.iter()) {
                assert!(rel_err(*g, *e, 1e-7) < 1e-5, "got {g} want {e}");
            }
        }
    }

    #[test]
    fn sym3_eigenvalues_match_diag_case() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, -1.0, 2.0));
        let e = sym3_eigenvalues(&m);
        assert_eq!(e, [-1.0, 2.0, 3.0]);
    }

    #[test]
    fn sym3_eigenvalues_match_characteristic_poly() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let q = rand_quat(&mut rng).to_matrix();
            let d = Vector3::new(
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
            );
            let m = q * Matrix3::from_diagonal(&d) * q.transpose();
            let eigs = sym3_eigenvalues(&m);
            let mut want = [d.x, d.y, d.z];
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, w) in eigs.iter().zip(want.iter()) {
                assert_abs_diff_eq!(e, w, epsilon = 1e-9);
            }
        }
    }
}
