//! Canonical-to-observation deformation: the pose-conditioned non-rigid
//! offset stage, skinning-weight prediction plus forward linear blend
//! skinning, and the post-fusion offset update. Every stage has an analytic
//! backward so the whole chain is differentiable end to end.
//!
//! Inside the optimization path rotations travel as matrices (quaternion
//! products and rotation-matrix products are interchangeable); the public
//! quaternion-typed operations wrap the same math.

use crate::error::{Error, Result};
use crate::gaussian::{
    quaternion_offset, quaternion_offset_backward, softmax, softmax_backward, GaussianCloud,
};
use crate::math::{
    matrix_to_quat, normalize_backward, polar3, polar3_backward, quat_mul_backward,
    quat_to_matrix_backward, Quat,
};
use crate::mlp::{
    positional_encoding, positional_encoding_backward, positional_encoding_width, MlpCache,
    MlpGrads, TinyMlp,
};
use crate::parallel::{self, Reduction};
use crate::template::BoneTransforms;
use nalgebra::{Matrix3, Vector3};

/// Per-point offsets predicted by the non-rigid network:
/// position, SH color coefficients, opacity logit, log-scale, rotation.
#[derive(Debug, Clone)]
pub struct NonRigidOffsets {
    pub dx: Vec<Vector3<f64>>,
    /// `n × (coeffs·3)` flattened.
    pub dsh: Vec<f64>,
    pub dopacity: Vec<f64>,
    pub dscale: Vec<Vector3<f64>>,
    pub drot: Vec<Vector3<f64>>,
}

impl NonRigidOffsets {
    pub fn zeros(n: usize, sh_len: usize) -> Self {
        NonRigidOffsets {
            dx: vec![Vector3::zeros(); n],
            dsh: vec![0.0; n * sh_len],
            dopacity: vec![0.0; n],
            dscale: vec![Vector3::zeros(); n],
            drot: vec![Vector3::zeros(); n],
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.dx.iter().all(|v| v.x == 0.0 && v.y == 0.0 && v.z == 0.0)
            && self.dsh.iter().all(|v| *v == 0.0)
            && self.dopacity.iter().all(|v| *v == 0.0)
            && self.dscale.iter().all(|v| v.x == 0.0 && v.y == 0.0 && v.z == 0.0)
            && self.drot.iter().all(|v| v.x == 0.0 && v.y == 0.0 && v.z == 0.0)
    }
}

/// Retained state of the non-rigid stage.
pub struct NonRigidStage {
    pub offsets: NonRigidOffsets,
    cache: MlpCache,
    positions: Vec<Vector3<f64>>,
    octaves: usize,
    sh_len: usize,
}

/// Expected network input width for the non-rigid stage.
pub fn nonrigid_input_width(octaves: usize, pose_dim: usize) -> usize {
    positional_encoding_width(octaves) + pose_dim
}

/// Expected network output width given the SH coefficient count per point.
pub fn nonrigid_output_width(sh_len: usize) -> usize {
    3 + sh_len + 1 + 3 + 3
}

/// Runs the non-rigid offset network on encoded canonical positions plus the
/// pose encoding.
pub fn nonrigid_forward(
    positions: &[Vector3<f64>],
    sh_len: usize,
    pose_encoding_vec: &[f64],
    net: &TinyMlp,
    octaves: usize,
) -> Result<NonRigidStage> {
    let n = positions.len();
    let want_in = nonrigid_input_width(octaves, pose_encoding_vec.len());
    if net.input_width() != want_in {
        return Err(Error::Config(format!(
            "non-rigid net input width {} != encoded width {}",
            net.input_width(),
            want_in
        )));
    }
    let want_out = nonrigid_output_width(sh_len);
    if net.output_width() != want_out {
        return Err(Error::Config(format!(
            "non-rigid net output width {} != offset width {}",
            net.output_width(),
            want_out
        )));
    }
    let pe_w = positional_encoding_width(octaves);
    let mut inputs = vec![0.0; n * want_in];
    parallel::for_each_chunk_mut(&mut inputs, want_in, |i, row| {
        let pe = positional_encoding(positions[i], octaves);
        row[..pe_w].copy_from_slice(&pe);
        row[pe_w..].copy_from_slice(pose_encoding_vec);
    });
    let cache = net.forward_batch(&inputs, n)?;

    let out_w = want_out;
    let outs = &cache.acts[net.layer_count()];
    let mut offsets = NonRigidOffsets::zeros(n, sh_len);
    for i in 0..n {
        let o = &outs[i * out_w..(i + 1) * out_w];
        offsets.dx[i] = Vector3::new(o[0], o[1], o[2]);
        offsets.dsh[i * sh_len..(i + 1) * sh_len].copy_from_slice(&o[3..3 + sh_len]);
        offsets.dopacity[i] = o[3 + sh_len];
        offsets.dscale[i] = Vector3::new(o[4 + sh_len], o[5 + sh_len], o[6 + sh_len]);
        offsets.drot[i] = Vector3::new(o[7 + sh_len], o[8 + sh_len], o[9 + sh_len]);
    }
    Ok(NonRigidStage {
        offsets,
        cache,
        positions: positions.to_vec(),
        octaves,
        sh_len,
    })
}

/// Backward of [`nonrigid_forward`]: parameter gradients plus canonical
/// position gradients through the positional encoding.
pub fn nonrigid_backward(
    stage: &NonRigidStage,
    net: &TinyMlp,
    grad_offsets: &NonRigidOffsets,
    mode: Reduction,
) -> Result<(MlpGrads, Vec<Vector3<f64>>)> {
    let n = stage.positions.len();
    let sh_len = stage.sh_len;
    let out_w = nonrigid_output_width(sh_len);
    let mut upstream = vec![0.0; n * out_w];
    for i in 0..n {
        let o = &mut upstream[i * out_w..(i + 1) * out_w];
        o[0] = grad_offsets.dx[i].x;
        o[1] = grad_offsets.dx[i].y;
        o[2] = grad_offsets.dx[i].z;
        o[3..3 + sh_len].copy_from_slice(&grad_offsets.dsh[i * sh_len..(i + 1) * sh_len]);
        o[3 + sh_len] = grad_offsets.dopacity[i];
        o[4 + sh_len] = grad_offsets.dscale[i].x;
        o[5 + sh_len] = grad_offsets.dscale[i].y;
        o[6 + sh_len] = grad_offsets.dscale[i].z;
        o[7 + sh_len] = grad_offsets.drot[i].x;
        o[8 + sh_len] = grad_offsets.drot[i].y;
        o[9 + sh_len] = grad_offsets.drot[i].z;
    }
    let (param_grads, input_grads) = net.backward_batch(&stage.cache, &upstream, mode)?;
    let pe_w = positional_encoding_width(stage.octaves);
    let in_w = net.input_width();
    let pos_grads = parallel::map_indexed(n, |i| {
        positional_encoding_backward(
            stage.positions[i],
            stage.octaves,
            &input_grads[i * in_w..i * in_w + pe_w],
        )
    });
    Ok((param_grads, pos_grads))
}

/// The non-rigidly deformed cloud `G_d`: stored-domain fields after additive
/// offsets, rotations after the quaternion offset.
#[derive(Debug, Clone)]
pub struct DeformedCloud {
    pub positions: Vec<Vector3<f64>>,
    pub sh: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
}

/// Applies non-rigid offsets: additive for position, SH, opacity logit, and
/// log-scale; quaternion offset for rotation. All-zero offsets reproduce the
/// canonical cloud exactly.
pub fn apply_offsets(cloud: &GaussianCloud, offsets: &NonRigidOffsets) -> DeformedCloud {
    let n = cloud.len();
    let sh_len = cloud.sh_coeffs() * 3;
    let mut out = DeformedCloud {
        positions: Vec::with_capacity(n),
        sh: Vec::with_capacity(n * sh_len),
        opacity_logits: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
    };
    for (i, p) in cloud.points.iter().enumerate() {
        out.positions.push(p.position + offsets.dx[i]);
        for (k, v) in p.sh.iter().enumerate() {
            out.sh.push(v + offsets.dsh[i * sh_len + k]);
        }
        out.opacity_logits.push(p.opacity_logit + offsets.dopacity[i]);
        out.log_scales.push(p.log_scale + offsets.dscale[i]);
        out.rotations.push(quaternion_offset(p.rotation, offsets.drot[i]));
    }
    out
}

/// Gradients of [`apply_offsets`] w.r.t. the stored cloud fields and the
/// offsets. Additive fields pass gradients through to both sides.
pub struct ApplyOffsetsGrads {
    pub cloud_positions: Vec<Vector3<f64>>,
    pub cloud_sh: Vec<f64>,
    pub cloud_opacity_logits: Vec<f64>,
    pub cloud_log_scales: Vec<Vector3<f64>>,
    pub cloud_rotations: Vec<Quat>,
    pub offsets: NonRigidOffsets,
}

pub fn apply_offsets_backward(
    cloud: &GaussianCloud,
    offsets: &NonRigidOffsets,
    grad_positions: &[Vector3<f64>],
    grad_sh: &[f64],
    grad_opacity_logits: &[f64],
    grad_log_scales: &[Vector3<f64>],
    grad_rotations: &[Quat],
) -> ApplyOffsetsGrads {
    let n = cloud.len();
    let mut out = ApplyOffsetsGrads {
        cloud_positions: grad_positions.to_vec(),
        cloud_sh: grad_sh.to_vec(),
        cloud_opacity_logits: grad_opacity_logits.to_vec(),
        cloud_log_scales: grad_log_scales.to_vec(),
        cloud_rotations: vec![Quat::new(0.0, 0.0, 0.0, 0.0); n],
        offsets: NonRigidOffsets {
            dx: grad_positions.to_vec(),
            dsh: grad_sh.to_vec(),
            dopacity: grad_opacity_logits.to_vec(),
            dscale: grad_log_scales.to_vec(),
            drot: vec![Vector3::zeros(); n],
        },
    };
    for (i, p) in cloud.points.iter().enumerate() {
        let (g_rc, g_dr) = quaternion_offset_backward(p.rotation, offsets.drot[i], grad_rotations[i]);
        out.cloud_rotations[i] = g_rc;
        out.offsets.drot[i] = g_dr;
    }
    out
}

// ---------------------------------------------------------------------------
// Rigid LBS
// ---------------------------------------------------------------------------

/// Blends bone transforms with convex weights: `T = Σ w_b B_b`.
pub fn blend_transforms(weights: &[f64], bones: &BoneTransforms) -> (Matrix3<f64>, Vector3<f64>) {
    let mut lin = Matrix3::zeros();
    let mut trans = Vector3::zeros();
    for (b, w) in weights.iter().enumerate() {
        let m = &bones.transforms[b];
        for i in 0..3 {
            for j in 0..3 {
                lin[(i, j)] += w * m[(i, j)];
            }
            trans[i] += w * m[(i, 3)];
        }
    }
    (lin, trans)
}

/// Retained state of the rigid LBS stage.
pub struct LbsStage {
    /// Observation-space positions `X_o`.
    pub positions: Vec<Vector3<f64>>,
    /// Observation-space rotations as matrices: `R_o = polar(T_lin) · R_d`.
    pub rot_mats: Vec<Matrix3<f64>>,
    /// Softmaxed skinning weights, `n × B`.
    pub skin_weights: Vec<f64>,
    pub bone_count: usize,
    skin_cache: MlpCache,
    input_positions: Vec<Vector3<f64>>,
    input_rotations: Vec<Quat>,
    r_d_mats: Vec<Matrix3<f64>>,
    t_lin: Vec<Matrix3<f64>>,
    q_polar: Vec<Matrix3<f64>>,
    h_polar: Vec<Matrix3<f64>>,
}

/// Forward LBS: predicts per-point skinning weights from the deformed
/// positions, blends bone transforms, moves positions rigidly, and rotates
/// orientations by the re-orthonormalized linear block.
pub fn lbs_forward(
    deformed: &DeformedCloud,
    skin_net: &TinyMlp,
    bones: &BoneTransforms,
) -> Result<LbsStage> {
    let n = deformed.positions.len();
    let b = bones.transforms.len();
    if skin_net.input_width() != 3 {
        return Err(Error::Config(format!(
            "skinning net input width {} != 3",
            skin_net.input_width()
        )));
    }
    if skin_net.output_width() != b {
        return Err(Error::Config(format!(
            "skinning net output width {} != bone count {}",
            skin_net.output_width(),
            b
        )));
    }
    let mut xs = vec![0.0; n * 3];
    for (i, p) in deformed.positions.iter().enumerate() {
        xs[i * 3] = p.x;
        xs[i * 3 + 1] = p.y;
        xs[i * 3 + 2] = p.z;
    }
    let skin_cache = skin_net.forward_batch(&xs, n)?;
    let logits = &skin_cache.acts[skin_net.layer_count()];
    let mut skin_weights = vec![0.0; n * b];
    for i in 0..n {
        let w = softmax(&logits[i * b..(i + 1) * b]);
        skin_weights[i * b..(i + 1) * b].copy_from_slice(&w);
    }

    struct PerPoint {
        pos: Vector3<f64>,
        rot: Matrix3<f64>,
        t_lin: Matrix3<f64>,
        q: Matrix3<f64>,
        h: Matrix3<f64>,
        r_d: Matrix3<f64>,
    }
    let per: Vec<Result<PerPoint>> = parallel::map_indexed(n, |i| {
        let w = &skin_weights[i * b..(i + 1) * b];
        let (lin, trans) = blend_transforms(w, bones);
        let pos = lin * deformed.positions[i] + trans;
        let (q, h) = polar3(&lin).ok_or_else(|| {
            Error::numerical("degenerate blended bone transform").at_point(i)
        })?;
        let r_d = deformed.rotations[i].normalized().to_matrix();
        let rot = q * r_d;
        Ok(PerPoint {
            pos,
            rot,
            t_lin: lin,
            q,
            h,
            r_d,
        })
    });
    let mut stage = LbsStage {
        positions: Vec::with_capacity(n),
        rot_mats: Vec::with_capacity(n),
        skin_weights,
        bone_count: b,
        skin_cache,
        input_positions: deformed.positions.clone(),
        input_rotations: deformed.rotations.clone(),
        r_d_mats: Vec::with_capacity(n),
        t_lin: Vec::with_capacity(n),
        q_polar: Vec::with_capacity(n),
        h_polar: Vec::with_capacity(n),
    };
    for p in per {
        let p = p?;
        stage.positions.push(p.pos);
        stage.rot_mats.push(p.rot);
        stage.t_lin.push(p.t_lin);
        stage.q_polar.push(p.q);
        stage.h_polar.push(p.h);
        stage.r_d_mats.push(p.r_d);
    }
    Ok(stage)
}

/// Gradients returned by [`lbs_backward`].
pub struct LbsGrads {
    /// W.r.t. the deformed positions `X_d` (through the blend, the rigid
    /// move, and the skinning net input).
    pub positions: Vec<Vector3<f64>>,
    /// W.r.t. the deformed rotations, as free quaternion components.
    pub rotations: Vec<Quat>,
    pub skin_net: MlpGrads,
}

/// Backward of [`lbs_forward`]. `grad_weights_extra` lets a skinning-weight
/// loss inject gradients on the softmaxed weights directly.
pub fn lbs_backward(
    stage: &LbsStage,
    skin_net: &TinyMlp,
    bones: &BoneTransforms,
    grad_positions: &[Vector3<f64>],
    grad_rot_mats: &[Matrix3<f64>],
    grad_weights_extra: Option<&[f64]>,
    mode: Reduction,
) -> Result<LbsGrads> {
    let n = stage.positions.len();
    let b = stage.bone_count;

    struct PerPoint {
        pos_grad: Vector3<f64>,
        rot_grad: Quat,
        logit_grads: Vec<f64>,
    }
    let per: Vec<PerPoint> = parallel::map_indexed(n, |i| {
        let g_pos = grad_positions[i];
        let g_rot = &grad_rot_mats[i];
        let q = &stage.q_polar[i];
        let r_d = &stage.r_d_mats[i];
        let x_d = stage.input_positions[i];

        // R_o = Q · R_d.
        let d_rd = q.transpose() * g_rot;
        let d_q = g_rot * r_d.transpose();
        let mut d_tlin = polar3_backward(q, &stage.h_polar[i], &d_q);

        // X_o = T_lin · X_d + T_trans.
        d_tlin += g_pos * x_d.transpose();
        let d_ttrans = g_pos;
        let pos_grad = stage.t_lin[i].transpose() * g_pos;

        // T = Σ w_b B_b.
        let mut d_w = vec![0.0; b];
        for (bi, dw) in d_w.iter_mut().enumerate() {
            let m = &bones.transforms[bi];
            let mut acc = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    acc += d_tlin[(r, c)] * m[(r, c)];
                }
                acc += d_ttrans[r] * m[(r, 3)];
            }
            *dw = acc;
        }
        if let Some(extra) = grad_weights_extra {
            for (dw, e) in d_w.iter_mut().zip(&extra[i * b..(i + 1) * b]) {
                *dw += e;
            }
        }
        let probs = &stage.skin_weights[i * b..(i + 1) * b];
        let logit_grads = softmax_backward(probs, &d_w);

        // Rotation gradient back to the deformed quaternion's free
        // components: matrix chain at the unit quaternion, then the
        // normalization projection.
        let raw = stage.input_rotations[i];
        let g_unit = quat_to_matrix_backward(raw.normalized(), &d_rd);
        let rot_grad = normalize_backward(raw, g_unit);

        PerPoint {
            pos_grad,
            rot_grad,
            logit_grads,
        }
    });

    let mut upstream = vec![0.0; n * b];
    for (i, p) in per.iter().enumerate() {
        upstream[i * b..(i + 1) * b].copy_from_slice(&p.logit_grads);
    }
    let (skin_grads, input_grads) = skin_net.backward_batch(&stage.skin_cache, &upstream, mode)?;

    let positions = (0..n)
        .map(|i| {
            per[i].pos_grad
                + Vector3::new(input_grads[i * 3], input_grads[i * 3 + 1], input_grads[i * 3 + 2])
        })
        .collect();
    Ok(LbsGrads {
        positions,
        rotations: per.iter().map(|p| p.rot_grad).collect(),
        skin_net: skin_grads,
    })
}

// ---------------------------------------------------------------------------
// Fusion offset application
// ---------------------------------------------------------------------------

/// Final observation-space cloud pieces after the fusion update.
pub struct FusionApplied {
    pub positions: Vec<Vector3<f64>>,
    pub rot_mats: Vec<Matrix3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    delta_quats: Vec<Quat>,
    drot: Vec<Vector3<f64>>,
}

/// Applies fused offsets `Δ(X', s', r')`: additive position and log-scale,
/// quaternion offset on the rotation (as a matrix product).
pub fn fusion_apply_mats(
    positions: &[Vector3<f64>],
    rot_mats: &[Matrix3<f64>],
    log_scales: &[Vector3<f64>],
    dx: &[Vector3<f64>],
    dscale: &[Vector3<f64>],
    drot: &[Vector3<f64>],
) -> FusionApplied {
    let n = positions.len();
    let mut out = FusionApplied {
        positions: Vec::with_capacity(n),
        rot_mats: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        delta_quats: Vec::with_capacity(n),
        drot: drot.to_vec(),
    };
    for i in 0..n {
        out.positions.push(positions[i] + dx[i]);
        out.log_scales.push(log_scales[i] + dscale[i]);
        let dq = Quat::new(1.0, drot[i].x, drot[i].y, drot[i].z).normalized();
        out.rot_mats.push(rot_mats[i] * dq.to_matrix());
        out.delta_quats.push(dq);
    }
    out
}

pub struct FusionApplyGrads {
    pub positions: Vec<Vector3<f64>>,
    pub rot_mats: Vec<Matrix3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub dx: Vec<Vector3<f64>>,
    pub dscale: Vec<Vector3<f64>>,
    pub drot: Vec<Vector3<f64>>,
}

pub fn fusion_apply_backward(
    applied: &FusionApplied,
    rot_mats_in: &[Matrix3<f64>],
    grad_positions: &[Vector3<f64>],
    grad_rot_mats: &[Matrix3<f64>],
    grad_log_scales: &[Vector3<f64>],
) -> FusionApplyGrads {
    let n = applied.positions.len();
    let mut out = FusionApplyGrads {
        positions: grad_positions.to_vec(),
        rot_mats: Vec::with_capacity(n),
        log_scales: grad_log_scales.to_vec(),
        dx: grad_positions.to_vec(),
        dscale: grad_log_scales.to_vec(),
        drot: Vec::with_capacity(n),
    };
    for i in 0..n {
        let dq = applied.delta_quats[i];
        // R_f = R_o · R(dq).
        out.rot_mats.push(grad_rot_mats[i] * dq.to_matrix().transpose());
        let d_rdq = rot_mats_in[i].transpose() * grad_rot_mats[i];
        let g_unit = quat_to_matrix_backward(dq, &d_rdq);
        let raw = Quat::new(1.0, applied.drot[i].x, applied.drot[i].y, applied.drot[i].z);
        let g_raw = normalize_backward(raw, g_unit);
        out.drot.push(Vector3::new(g_raw.x, g_raw.y, g_raw.z));
    }
    out
}

// ---------------------------------------------------------------------------
// Public quaternion-typed operations
// ---------------------------------------------------------------------------

/// Observation-space cloud with quaternion rotations (non-optimizing path).
#[derive(Debug, Clone)]
pub struct ObservationCloud {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub skin_weights: Vec<f64>,
    pub bone_count: usize,
}

/// Forward LBS returning quaternion rotations: `X_o = T·X_d`, rotation
/// re-orthonormalized via the polar factor and converted back to a
/// quaternion. Scale, opacity, color, and semantics are untouched by this
/// stage.
pub fn rigid_lbs(
    deformed: &DeformedCloud,
    skin_net: &TinyMlp,
    bones: &BoneTransforms,
) -> Result<ObservationCloud> {
    let stage = lbs_forward(deformed, skin_net, bones)?;
    let rotations = stage.rot_mats.iter().map(matrix_to_quat).collect();
    Ok(ObservationCloud {
        positions: stage.positions,
        rotations,
        skin_weights: stage.skin_weights,
        bone_count: stage.bone_count,
    })
}

/// Applies fused offsets on a quaternion-typed observation cloud: the same
/// update rules as the non-rigid application restricted to (X, s, r).
pub fn fusion_apply(
    positions: &[Vector3<f64>],
    log_scales: &[Vector3<f64>],
    rotations: &[Quat],
    dx: &[Vector3<f64>],
    dscale: &[Vector3<f64>],
    drot: &[Vector3<f64>],
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<Quat>) {
    let pos = positions.iter().zip(dx.iter()).map(|(p, d)| p + d).collect();
    let ls = log_scales.iter().zip(dscale.iter()).map(|(s, d)| s + d).collect();
    let rot = rotations
        .iter()
        .zip(drot.iter())
        .map(|(r, d)| quaternion_offset(*r, *d))
        .collect();
    (pos, ls, rot)
}

/// Gradient of a quaternion product used by tests; re-exported pieces of the
/// matrix-based chain.
pub fn quat_chain_backward(a: Quat, b: Quat, g: Quat) -> (Quat, Quat) {
    quat_mul_backward(a, b, g)
}
