//! Core data model for anisotropic semantic 3D Gaussians: storage encodings,
//! covariance construction, density evaluation, and quaternion offsets.

use crate::error::{Error, Result};
use crate::math::{normalize_backward, quat_mul_backward, quat_to_matrix_backward, sym3_eigenvalues, Quat};
use nalgebra::{Matrix3, Vector3};

/// Symmetric positive semi-definite 3×3 covariance.
pub type Covariance3 = Matrix3<f64>;

/// Minimum covariance eigenvalue enforced before inversion. Degenerate scales
/// appear during optimization; the floor keeps the quadratic form bounded.
pub const COV_EIG_FLOOR: f64 = 1e-8;

/// Tolerance on `‖r‖ = 1` for covariance construction.
pub const UNIT_QUAT_TOL: f64 = 1e-6;

/// One optimizable Gaussian. Opacity is stored as a pre-sigmoid logit, scales
/// as log-scales, the semantic attribute as softmax logits; the rotation is
/// kept unit-norm by every update path.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub position: Vector3<f64>,
    /// Spherical-harmonic color coefficients, `(degree+1)²` per channel,
    /// laid out `[coeff][channel]`.
    pub sh: Vec<f64>,
    pub opacity_logit: f64,
    pub log_scale: Vector3<f64>,
    pub rotation: Quat,
    /// Semantic logits, one per body part.
    pub semantic_logits: Vec<f64>,
}

impl GaussianPoint {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn semantic(&self) -> Vec<f64> {
        softmax(&self.semantic_logits)
    }

    /// Degree implied by the coefficient count.
    pub fn sh_degree(&self) -> usize {
        match self.sh.len() / 3 {
            1 => 0,
            4 => 1,
            9 => 2,
            other => panic!("unsupported SH coefficient count {other}"),
        }
    }
}

/// The optimizable cloud. `parent_index[i]` records which point `i` was
/// cloned or split from, when any densification has happened.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<GaussianPoint>,
    pub parent_index: Vec<Option<usize>>,
}

impl GaussianCloud {
    pub fn new(points: Vec<GaussianPoint>) -> Self {
        let parent_index = vec![None; points.len()];
        GaussianCloud { points, parent_index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of semantic parts carried per point.
    pub fn parts(&self) -> usize {
        self.points.first().map_or(0, |p| p.semantic_logits.len())
    }

    pub fn sh_coeffs(&self) -> usize {
        self.points.first().map_or(1, |p| p.sh.len() / 3)
    }

    /// Renormalizes every rotation; called after each optimizer step.
    pub fn renormalize_rotations(&mut self) {
        for p in &mut self.points {
            p.rotation = p.rotation.normalized();
        }
    }

    /// Checks the decode invariants; used by the trainer after steps.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let a = p.opacity();
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::numerical(format!("opacity {a} out of (0,1)")).at_point(i));
            }
            let s = p.scale();
            if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
                return Err(Error::numerical("non-positive decoded scale").at_point(i));
            }
            if (p.rotation.norm() - 1.0).abs() > UNIT_QUAT_TOL {
                return Err(Error::numerical("rotation drifted off unit norm").at_point(i));
            }
            let o = p.semantic();
            let sum: f64 = o.iter().sum();
            if o.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::numerical("semantic attribute off the simplex").at_point(i));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse sigmoid, clamped away from the asymptotes.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid_backward(decoded: f64, grad: f64) -> f64 {
    grad * decoded * (1.0 - decoded)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Adjoint of softmax given decoded probabilities.
pub fn softmax_backward(probs: &[f64], grad: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad.iter()).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad.iter())
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Builds `Σ = R·S·Sᵀ·Rᵀ` from positive scales and a unit rotation.
pub fn build_covariance(scale: Vector3<f64>, rotation: Quat) -> Result<Covariance3> {
    if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
        return Err(Error::InvalidInput(format!(
            "scales must be strictly positive, got {scale:?}"
        )));
    }
    if (rotation.norm() - 1.0).abs() > UNIT_QUAT_TOL {
        return Err(Error::InvalidInput(format!(
            "rotation must be unit norm, |r| = {}",
            rotation.norm()
        )));
    }
    let r = rotation.to_matrix();
    let m = Matrix3::from_diagonal(&scale.component_mul(&scale));
    Ok(r * m * r.transpose())
}

/// Adjoint of [`build_covariance`]: gradients w.r.t. the decoded scale and
/// the unit quaternion (the caller chains any normalization itself).
pub fn build_covariance_backward(
    scale: Vector3<f64>,
    rotation: Quat,
    grad_cov: &Matrix3<f64>,
) -> (Vector3<f64>, Quat) {
    let r = rotation.to_matrix();
    let sym = grad_cov + grad_cov.transpose();
    // dΣ/ds_k = 2 s_k (R e_k)(R e_k)ᵀ
    let mut grad_scale = Vector3::zeros();
    for k in 0..3 {
        let col = r.column(k);
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += col[i] * grad_cov[(i, j)] * col[j];
            }
        }
        grad_scale[k] = 2.0 * scale[k] * q;
    }
    let m = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let grad_r = sym * r * m;
    let grad_quat = quat_to_matrix_backward(rotation, &grad_r);
    (grad_scale, grad_quat)
}

/// Covariance from an explicit rotation matrix: `R·diag(s²)·Rᵀ`. The
/// optimization path carries rotations as matrices after skinning.
pub fn covariance_from_matrix(scale: Vector3<f64>, rot: &Matrix3<f64>) -> Covariance3 {
    let m = Matrix3::from_diagonal(&scale.component_mul(&scale));
    rot * m * rot.transpose()
}

/// Adjoint of [`covariance_from_matrix`].
pub fn covariance_from_matrix_backward(
    scale: Vector3<f64>,
    rot: &Matrix3<f64>,
    grad_cov: &Matrix3<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let sym = grad_cov + grad_cov.transpose();
    let mut grad_scale = Vector3::zeros();
    for k in 0..3 {
        let col = rot.column(k);
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += col[i] * grad_cov[(i, j)] * col[j];
            }
        }
        grad_scale[k] = 2.0 * scale[k] * q;
    }
    let m = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let grad_rot = sym * rot * m;
    (grad_scale, grad_rot)
}

/// Floors the eigenvalues of a symmetric matrix at [`COV_EIG_FLOOR`].
pub fn floor_covariance(cov: &Covariance3) -> Covariance3 {
    let eigs = sym3_eigenvalues(cov);
    let lift = COV_EIG_FLOOR - eigs[0];
    if lift > 0.0 {
        cov + Matrix3::identity() * lift
    } else {
        *cov
    }
}

/// Evaluates the Gaussian density `exp(-½ xᵀ Σ⁻¹ x)` at offset `x` from the
/// mean. The covariance is eigenvalue-floored before inversion.
pub fn gaussian_value(x: Vector3<f64>, cov: &Covariance3) -> Result<f64> {
    let floored = floor_covariance(cov);
    let det = floored.determinant();
    if !det.is_finite() || det <= 0.0 {
        return Err(Error::numerical(format!(
            "covariance singular after flooring (det {det})"
        )));
    }
    let inv = floored
        .try_inverse()
        .ok_or_else(|| Error::numerical("covariance not invertible"))?;
    let q = (x.transpose() * inv * x)[(0, 0)].max(0.0);
    Ok((-0.5 * q).exp())
}

/// Applies a small rotation offset: `normalize(r_c · [1, Δr])`.
///
/// With `Δr = 0` the result is exactly `r_c`; the orientation is preserved
/// bitwise.
pub fn quaternion_offset(r_c: Quat, delta: Vector3<f64>) -> Quat {
    r_c.mul(Quat::new(1.0, delta.x, delta.y, delta.z)).normalized()
}

/// Adjoint of [`quaternion_offset`]: gradients w.r.t. `r_c` (as a free
/// 4-vector) and the 3-vector offset.
pub fn quaternion_offset_backward(
    r_c: Quat,
    delta: Vector3<f64>,
    grad_out: Quat,
) -> (Quat, Vector3<f64>) {
    let q = Quat::new(1.0, delta.x, delta.y, delta.z);
    let raw = r_c.mul(q);
    let g_raw = normalize_backward(raw, grad_out);
    let (g_rc, g_q) = quat_mul_backward(r_c, q, g_raw);
    (g_rc, Vector3::new(g_q.x, g_q.y, g_q.z))
}
