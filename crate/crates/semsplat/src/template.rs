//! Procedural articulated body template: a capsule-limb humanoid with a
//! 16-bone tree, surface vertices, blend-skinning weights, and per-vertex
//! part labels. Stands in for a licensed parametric body model, providing
//! the same roles: initialization seed, skinning prior, and semantic prior.

use crate::checkpoint::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::math::Quat;
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Body part labels.
pub const PART_HEAD: u8 = 0;
pub const PART_TORSO: u8 = 1;
pub const PART_LEFT_ARM: u8 = 2;
pub const PART_RIGHT_ARM: u8 = 3;
pub const PART_LEGS: u8 = 4;
/// Number of distinct body parts.
pub const NUM_PARTS: usize = 5;

const TEMPLATE_MAGIC: [u8; 4] = *b"SPTB";
const TEMPLATE_VERSION: u32 = 1;

/// One bone: parent index (`None` for the root) plus the rest-pose joint
/// (head) and tip (tail) positions in canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub parent: Option<usize>,
    pub head: Vector3<f64>,
    pub tail: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBody {
    /// Canonical-pose surface vertices, meters.
    pub vertices: Vec<Vector3<f64>>,
    pub bones: Vec<Bone>,
    /// Row-stochastic V×B skinning weights, flattened row-major.
    pub lbs_weights: Vec<f64>,
    /// Per-vertex part label in `[0, NUM_PARTS)`.
    pub part_labels: Vec<u8>,
}

impl TemplateBody {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn weights_row(&self, v: usize) -> &[f64] {
        let b = self.bones.len();
        &self.lbs_weights[v * b..(v + 1) * b]
    }

    /// Axis-aligned bounds of the canonical vertices.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

/// Per-frame articulation: one local rotation per bone plus a root rigid
/// transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub bone_rotations: Vec<Quat>,
    pub root_translation: Vector3<f64>,
    pub root_rotation: Quat,
}

impl Pose {
    pub fn rest(bone_count: usize) -> Self {
        Pose {
            bone_rotations: vec![Quat::IDENTITY; bone_count],
            root_translation: Vector3::zeros(),
            root_rotation: Quat::IDENTITY,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.bone_rotations
            .iter()
            .all(|q| (q.norm() - 1.0).abs() < 1e-6)
            && (self.root_rotation.norm() - 1.0).abs() < 1e-6
            && self.root_translation.iter().all(|v| v.is_finite())
    }
}

/// Rigid canonical-to-observation transforms, one per bone.
#[derive(Debug, Clone)]
pub struct BoneTransforms {
    pub transforms: Vec<Matrix4<f64>>,
}

impl BoneTransforms {
    pub fn identity(bone_count: usize) -> Self {
        BoneTransforms {
            transforms: vec![Matrix4::identity(); bone_count],
        }
    }

    pub fn linear(&self, b: usize) -> Matrix3<f64> {
        self.transforms[b].fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self, b: usize) -> Vector3<f64> {
        self.transforms[b].fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn apply(&self, b: usize, p: Vector3<f64>) -> Vector3<f64> {
        self.linear(b) * p + self.translation(b)
    }
}

/// Build parameters for the procedural body.
#[derive(Debug, Clone)]
pub struct TemplateConfig {
    pub vertex_count: usize,
    pub seed: u64,
    /// Overall body height in scene units.
    pub height: f64,
    /// Multiplier on all capsule radii.
    pub radius_scale: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            vertex_count: 6890,
            seed: 0,
            height: 1.75,
            radius_scale: 1.0,
        }
    }
}

/// Skeleton table in a 1.75-unit reference frame: name, parent, head, tail,
/// capsule radius, part label.
#[allow(clippy::type_complexity)]
fn skeleton_table() -> Vec<(&'static str, Option<usize>, [f64; 3], [f64; 3], f64, u8)> {
    vec![
        ("pelvis", None, [0.0, 0.95, 0.0], [0.0, 1.05, 0.0], 0.125, PART_TORSO),
        ("spine", Some(0), [0.0, 1.05, 0.0], [0.0, 1.25, 0.0], 0.115, PART_TORSO),
        ("chest", Some(1), [0.0, 1.25, 0.0], [0.0, 1.45, 0.0], 0.13, PART_TORSO),
        ("head", Some(2), [0.0, 1.45, 0.0], [0.0, 1.72, 0.0], 0.09, PART_HEAD),
        ("l_upper_arm", Some(2), [0.16, 1.40, 0.0], [0.44, 1.40, 0.0], 0.048, PART_LEFT_ARM),
        ("l_forearm", Some(4), [0.44, 1.40, 0.0], [0.70, 1.40, 0.0], 0.04, PART_LEFT_ARM),
        ("l_hand", Some(5), [0.70, 1.40, 0.0], [0.84, 1.40, 0.0], 0.038, PART_LEFT_ARM),
        ("r_upper_arm", Some(2), [-0.16, 1.40, 0.0], [-0.44, 1.40, 0.0], 0.048, PART_RIGHT_ARM),
        ("r_forearm", Some(7), [-0.44, 1.40, 0.0], [-0.70, 1.40, 0.0], 0.04, PART_RIGHT_ARM),
        ("r_hand", Some(8), [-0.70, 1.40, 0.0], [-0.84, 1.40, 0.0], 0.038, PART_RIGHT_ARM),
        ("l_thigh", Some(0), [0.09, 0.92, 0.0], [0.09, 0.50, 0.0], 0.075, PART_LEGS),
        ("l_shin", Some(10), [0.09, 0.50, 0.0], [0.09, 0.10, 0.0], 0.055, PART_LEGS),
        ("l_foot", Some(11), [0.09, 0.10, 0.0], [0.09, 0.03, 0.16], 0.042, PART_LEGS),
        ("r_thigh", Some(0), [-0.09, 0.92, 0.0], [-0.09, 0.50, 0.0], 0.075, PART_LEGS),
        ("r_shin", Some(13), [-0.09, 0.50, 0.0], [-0.09, 0.10, 0.0], 0.055, PART_LEGS),
        ("r_foot", Some(14), [-0.09, 0.10, 0.0], [-0.09, 0.03, 0.16], 0.042, PART_LEGS),
    ]
}

/// Distance from a point to the segment [a, b].
fn segment_distance(p: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Builds the procedural capsule humanoid. Deterministic for a given config.
///
/// Vertices are sampled on capsule surfaces in proportion to surface area;
/// skinning weights come from truncated inverse distance to the two nearest
/// bone segments; each vertex is labeled by its owning limb's part.
pub fn build_template(config: &TemplateConfig) -> Result<TemplateBody> {
    let table = skeleton_table();
    let b = table.len();
    if config.vertex_count < b * 4 {
        return Err(Error::Config(format!(
            "vertex count {} too small for {} bones (need at least {})",
            config.vertex_count,
            b,
            b * 4
        )));
    }
    if config.height <= 0.0 || config.radius_scale <= 0.0 {
        return Err(Error::Config("template dimensions must be positive".into()));
    }
    let s = config.height / 1.75;
    let bones: Vec<Bone> = table
        .iter()
        .map(|(_, parent, head, tail, _, _)| Bone {
            parent: *parent,
            head: Vector3::new(head[0], head[1], head[2]) * s,
            tail: Vector3::new(tail[0], tail[1], tail[2]) * s,
        })
        .collect();
    let radii: Vec<f64> = table.iter().map(|t| t.4 * s * config.radius_scale).collect();
    let bone_parts: Vec<u8> = table.iter().map(|t| t.5).collect();

    // Area-proportional vertex budget per capsule, at least 4 each.
    let areas: Vec<f64> = bones
        .iter()
        .zip(radii.iter())
        .map(|(bone, r)| {
            let len = (bone.tail - bone.head).norm();
            2.0 * std::f64::consts::PI * r * len + 4.0 * std::f64::consts::PI * r * r
        })
        .collect();
    let total_area: f64 = areas.iter().sum();
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| ((a / total_area) * config.vertex_count as f64).floor() as usize)
        .map(|c| c.max(4))
        .collect();
    // Adjust to the exact total on the largest bone.
    let assigned: usize = counts.iter().sum();
    let largest = (0..b).max_by(|&i, &j| areas[i].partial_cmp(&areas[j]).unwrap()).unwrap();
    if assigned < config.vertex_count {
        counts[largest] += config.vertex_count - assigned;
    } else {
        let mut excess = assigned - config.vertex_count;
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| areas[j].partial_cmp(&areas[i]).unwrap());
        'outer: loop {
            for &i in &order {
                if excess == 0 {
                    break 'outer;
                }
                if counts[i] > 4 {
                    counts[i] -= 1;
                    excess -= 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vertices = Vec::with_capacity(config.vertex_count);
    let mut part_labels = Vec::with_capacity(config.vertex_count);
    for (bi, bone) in bones.iter().enumerate() {
        let r = radii[bi];
        let axis = bone.tail - bone.head;
        let len = axis.norm();
        let u = axis / len;
        // Orthonormal frame around the axis.
        let pick = if u.x.abs() < 0.9 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        };
        let e1 = u.cross(&pick).normalize();
        let e2 = u.cross(&e1);
        let cyl_area = 2.0 * std::f64::consts::PI * r * len;
        let cap_area = 4.0 * std::f64::consts::PI * r * r;
        for _ in 0..counts[bi] {
            let pick_cyl = rng.gen_range(0.0..cyl_area + cap_area) < cyl_area;
            let p = if pick_cyl {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let h = rng.gen_range(0.0..len);
                bone.head + u * h + (e1 * theta.cos() + e2 * theta.sin()) * r
            } else {
                // Uniform point on a sphere; assign to the matching cap.
                let z: f64 = rng.gen_range(-1.0..1.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let rho = (1.0 - z * z).sqrt();
                let q = (e1 * theta.cos() + e2 * theta.sin()) * rho + u * z;
                let center = if z >= 0.0 { bone.tail } else { bone.head };
                center + q * r
            };
            vertices.push(p);
            part_labels.push(bone_parts[bi]);
        }
    }

    // Truncated inverse-distance skinning weights over the two nearest bones.
    let mut lbs_weights = vec![0.0; vertices.len() * b];
    for (vi, v) in vertices.iter().enumerate() {
        let mut dists: Vec<(usize, f64)> = bones
            .iter()
            .enumerate()
            .map(|(bi, bone)| (bi, segment_distance(*v, bone.head, bone.tail)))
            .collect();
        dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let (b0, d0) = dists[0];
        let (b1, d1) = dists[1];
        let w0 = 1.0 / (d0 + 1e-6);
        let w1 = 1.0 / (d1 + 1e-6);
        let sum = w0 + w1;
        lbs_weights[vi * b + b0] = w0 / sum;
        lbs_weights[vi * b + b1] = w1 / sum;
    }

    Ok(TemplateBody {
        vertices,
        bones,
        lbs_weights,
        part_labels,
    })
}

/// Forward kinematics: canonical-to-observation rigid transform per bone.
///
/// `B_b = B_parent · T(j_b) · R(q_b) · T(-j_b)`, with the root additionally
/// pre-composed with the root rigid transform. The rest pose yields exact
/// identity matrices.
pub fn bone_transforms(body: &TemplateBody, pose: &Pose) -> Result<BoneTransforms> {
    if pose.bone_rotations.len() != body.bones.len() {
        return Err(Error::Usage(format!(
            "pose has {} rotations for {} bones",
            pose.bone_rotations.len(),
            body.bones.len()
        )));
    }
    if !pose.is_valid() {
        return Err(Error::InvalidInput("pose quaternions must be unit".into()));
    }
    let b = body.bones.len();
    let mut out = vec![Matrix4::identity(); b];
    for (bi, bone) in body.bones.iter().enumerate() {
        let j = bone.head;
        let rot = if bi == 0 {
            pose.root_rotation.mul(pose.bone_rotations[bi]).normalized()
        } else {
            pose.bone_rotations[bi].normalized()
        };
        let local = pivot_rotation(j, rot);
        out[bi] = match bone.parent {
            None => {
                let mut t = Matrix4::identity();
                t[(0, 3)] = pose.root_translation.x;
                t[(1, 3)] = pose.root_translation.y;
                t[(2, 3)] = pose.root_translation.z;
                t * local
            }
            Some(p) => {
                debug_assert!(p < bi, "bone parents must precede children");
                out[p] * local
            }
        };
    }
    Ok(BoneTransforms { transforms: out })
}

/// `T(j) · R(q) · T(-j)`: rotate about the pivot `j`.
fn pivot_rotation(j: Vector3<f64>, q: Quat) -> Matrix4<f64> {
    let r = q.to_matrix();
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for k in 0..3 {
            m[(i, k)] = r[(i, k)];
        }
    }
    let t = j - r * j;
    m[(0, 3)] = t.x;
    m[(1, 3)] = t.y;
    m[(2, 3)] = t.z;
    m
}

/// Flat pose encoding: all bone quaternions concatenated, length `4·B`.
pub fn pose_encoding(pose: &Pose) -> Vec<f64> {
    let mut out = Vec::with_capacity(pose.bone_rotations.len() * 4);
    for q in &pose.bone_rotations {
        out.extend_from_slice(&q.to_array());
    }
    out
}

/// Skins template vertices by their blended bone transforms.
pub fn skin_vertices(body: &TemplateBody, bones: &BoneTransforms) -> Vec<Vector3<f64>> {
    let b = body.bones.len();
    crate::parallel::map_indexed(body.vertices.len(), |vi| {
        let w = body.weights_row(vi);
        let v = body.vertices[vi];
        let mut out = Vector3::zeros();
        for bi in 0..b {
            if w[bi] != 0.0 {
                out += bones.apply(bi, v) * w[bi];
            }
        }
        out
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub fn write_template(path: &Path, body: &TemplateBody) -> Result<()> {
    let mut w = BinWriter::new();
    w.magic(&TEMPLATE_MAGIC);
    w.u32(TEMPLATE_VERSION);
    w.u64(body.vertices.len() as u64);
    w.u64(body.bones.len() as u64);
    w.u64(NUM_PARTS as u64);
    for v in &body.vertices {
        w.f64(v.x);
        w.f64(v.y);
        w.f64(v.z);
    }
    for bone in &body.bones {
        w.i64(bone.parent.map(|p| p as i64).unwrap_or(-1));
        for k in 0..3 {
            w.f64(bone.head[k]);
        }
        for k in 0..3 {
            w.f64(bone.tail[k]);
        }
    }
    for v in &body.lbs_weights {
        w.f64(*v);
    }
    for l in &body.part_labels {
        w.u8(*l);
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn read_template(path: &Path) -> Result<TemplateBody> {
    let data = std::fs::read(path)?;
    let mut r = BinReader::new(&data, &path.display().to_string());
    r.magic(&TEMPLATE_MAGIC)?;
    let version = r.u32()?;
    if version != TEMPLATE_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported template version {version}"),
        });
    }
    let v = r.u64()? as usize;
    let b = r.u64()? as usize;
    let p = r.u64()? as usize;
    if p != NUM_PARTS {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("template has {p} parts, expected {NUM_PARTS}"),
        });
    }
    let mut vertices = Vec::with_capacity(v);
    for _ in 0..v {
        vertices.push(Vector3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let mut bones = Vec::with_capacity(b);
    for _ in 0..b {
        let parent = r.i64()?;
        let head = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let tail = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        bones.push(Bone {
            parent: if parent < 0 { None } else { Some(parent as usize) },
            head,
            tail,
        });
    }
    let mut lbs_weights = Vec::with_capacity(v * b);
    for _ in 0..v * b {
        lbs_weights.push(r.f64()?);
    }
    let mut part_labels = Vec::with_capacity(v);
    for _ in 0..v {
        part_labels.push(r.u8()?);
    }
    r.done()?;
    Ok(TemplateBody {
        vertices,
        bones,
        lbs_weights,
        part_labels,
    })
}
