//! Real spherical-harmonic color evaluation up to degree 2, with the
//! adjoints needed for optimization.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Coefficients per channel for a given degree.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at a unit direction, for degrees 0..=2.
fn basis(degree: usize, d: Vector3<f64>) -> [f64; 9] {
    let mut b = [0.0; 9];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * d.y;
        b[2] = SH_C1 * d.z;
        b[3] = -SH_C1 * d.x;
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (x * x - y * y);
    }
    b
}

/// Evaluates RGB color from SH coefficients (`[coeff][channel]` layout) at a
/// unit view direction.
pub fn eval_sh(degree: usize, sh: &[f64], dir: Vector3<f64>) -> [f64; 3] {
    debug_assert_eq!(sh.len(), coeff_count(degree) * 3);
    let b = basis(degree, dir);
    let mut out = [0.0; 3];
    for (j, bj) in b.iter().enumerate().take(coeff_count(degree)) {
        for (c, o) in out.iter_mut().enumerate() {
            *o += bj * sh[j * 3 + c];
        }
    }
    out
}

/// Adjoint of [`eval_sh`]: gradients w.r.t. the coefficients and the unit
/// direction.
pub fn eval_sh_backward(
    degree: usize,
    sh: &[f64],
    dir: Vector3<f64>,
    grad_color: [f64; 3],
) -> (Vec<f64>, Vector3<f64>) {
    let n = coeff_count(degree);
    let b = basis(degree, dir);
    let mut grad_sh = vec![0.0; n * 3];
    for (j, bj) in b.iter().enumerate().take(n) {
        for (c, g) in grad_color.iter().enumerate() {
            grad_sh[j * 3 + c] = bj * g;
        }
    }
    // s_j = Σ_c grad_color[c] · sh[j][c]; grad_dir = Σ_j s_j ∂b_j/∂dir.
    let mut grad_dir = Vector3::zeros();
    if degree >= 1 {
        let s = |j: usize| -> f64 {
            (0..3).map(|c| grad_color[c] * sh[j * 3 + c]).sum()
        };
        grad_dir.y += -SH_C1 * s(1);
        grad_dir.z += SH_C1 * s(2);
        grad_dir.x += -SH_C1 * s(3);
        if degree >= 2 {
            let (x, y, z) = (dir.x, dir.y, dir.z);
            let s4 = s(4);
            let s5 = s(5);
            let s6 = s(6);
            let s7 = s(7);
            let s8 = s(8);
            grad_dir.x += SH_C2[0] * y * s4 - 2.0 * SH_C2[2] * x * s6 + SH_C2[3] * z * s7
                + 2.0 * SH_C2[4] * x * s8;
            grad_dir.y += SH_C2[0] * x * s4 + SH_C2[1] * z * s5 - 2.0 * SH_C2[2] * y * s6
                - 2.0 * SH_C2[4] * y * s8;
            grad_dir.z += SH_C2[1] * y * s5 + 4.0 * SH_C2[2] * z * s6 + SH_C2[3] * x * s7;
        }
    }
    (grad_sh, grad_dir)
}

/// View direction from camera position to point, with its normalization
/// adjoint: `grad_pos = (I - d dᵀ) grad_dir / ‖p - c‖`.
pub fn view_dir(pos: Vector3<f64>, campos: Vector3<f64>) -> (Vector3<f64>, f64) {
    let v = pos - campos;
    let len = v.norm().max(1e-12);
    (v / len, len)
}

pub fn view_dir_backward(dir: Vector3<f64>, len: f64, grad_dir: Vector3<f64>) -> Vector3<f64> {
    (grad_dir - dir * dir.dot(&grad_dir)) / len
}
