//! Synthetic multi-view dataset: the labeled template animated by smooth
//! per-bone rotation curves, textured per part, rendered to ground-truth RGB
//! images, exact masks, and part-label rasters with a supersampled z-buffered
//! point rasterizer. Sequences round-trip through a versioned on-disk layout.

use crate::annotate::zbuffer_points;
use crate::camera::Camera;
use crate::config::GenConfig;
use crate::error::{Error, Result};
use crate::image_io::{
    read_labels, read_mask, read_ppm, write_labels, write_mask, write_ppm, Image, LabelImage,
    LabelProvenance, MaskImage, BACKGROUND_LABEL,
};
use crate::math::Quat;
use crate::parallel;
use crate::template::{
    bone_transforms, build_template, read_template, skin_vertices, write_template, Pose,
    TemplateBody, TemplateConfig, NUM_PARTS,
};
use nalgebra::{Matrix4, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const META_HEADER: &str = "semsplat-meta v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One observation: image, exact mask, ground-truth part labels, camera
/// index, and the driving pose.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: usize,
    pub camera_index: usize,
    pub time: f64,
    pub rgb: Image,
    pub mask: MaskImage,
    pub parts_truth: LabelImage,
    pub pose: Pose,
}

/// A loaded dataset split plus shared cameras and bookkeeping.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub cameras: Vec<Camera>,
    pub split: Split,
    pub parts: usize,
    pub seed: u64,
    pub root: PathBuf,
}

impl Dataset {
    pub fn camera_of(&self, frame: &Frame) -> &Camera {
        &self.cameras[frame.camera_index]
    }

    /// Directory holding cached annotator label rasters for this split.
    pub fn label_cache_dir(&self) -> PathBuf {
        self.root.join(format!("labels_{}", self.split.dir_name()))
    }

    pub fn label_cache_path(&self, frame: &Frame) -> PathBuf {
        self.label_cache_dir().join(format!("frame_{:04}.lbl", frame.id))
    }
}

// ---------------------------------------------------------------------------
// Motion and texture
// ---------------------------------------------------------------------------

/// Smooth per-bone motion curves: sinusoidal swings with per-bone axis,
/// amplitude, frequency, and phase drawn once from the seed, plus a full
/// root-yaw revolution over the sequence so every camera sees all sides.
#[derive(Debug, Clone)]
pub struct MotionSpec {
    axes: Vec<Vector3<f64>>,
    amplitudes: Vec<f64>,
    frequencies: Vec<f64>,
    phases: Vec<f64>,
}

impl MotionSpec {
    pub fn generate(body: &TemplateBody, amplitude_scale: f64, seed: u64) -> Result<Self> {
        if !(0.0..=4.0).contains(&amplitude_scale) {
            return Err(Error::Config(format!(
                "motion amplitude scale {amplitude_scale} out of range"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D4F_5449_4F4E);
        let b = body.bone_count();
        // Base amplitudes per bone index (radians): joints swing, torso sways.
        let base: Vec<f64> = (0..b)
            .map(|i| match i {
                0 => 0.04,       // pelvis
                1 | 2 => 0.07,   // spine, chest
                3 => 0.12,       // head
                4 | 7 => 0.35,   // upper arms
                5 | 8 => 0.30,   // forearms
                6 | 9 => 0.15,   // hands
                10 | 13 => 0.28, // thighs
                11 | 14 => 0.25, // shins
                _ => 0.12,       // feet
            })
            .collect();
        let mut spec = MotionSpec {
            axes: Vec::with_capacity(b),
            amplitudes: Vec::with_capacity(b),
            frequencies: Vec::with_capacity(b),
            phases: Vec::with_capacity(b),
        };
        for i in 0..b {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let axis = if axis.norm() < 1e-6 {
                Vector3::new(1.0, 0.0, 0.0)
            } else {
                axis.normalize()
            };
            spec.axes.push(axis);
            spec.amplitudes
                .push(base[i] * amplitude_scale * rng.gen_range(0.7..1.0));
            spec.frequencies.push(rng.gen_range(1.0..2.0));
            spec.phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        Ok(spec)
    }

    /// Pose at normalized time `t ∈ [0, 1]`.
    pub fn pose_at(&self, t: f64) -> Pose {
        let b = self.axes.len();
        let mut pose = Pose::rest(b);
        for i in 0..b {
            let angle = self.amplitudes[i]
                * (std::f64::consts::TAU * self.frequencies[i] * t + self.phases[i]).sin();
            pose.bone_rotations[i] = axis_angle(self.axes[i], angle);
        }
        // Full revolution so the held-out camera sees learned surfaces.
        pose.root_rotation = axis_angle(Vector3::new(0.0, 1.0, 0.0), std::f64::consts::TAU * t);
        pose
    }
}

fn axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
    let half = angle / 2.0;
    let s = half.sin();
    Quat::new(half.cos(), axis.x * s, axis.y * s, axis.z * s).normalized()
}

/// Deterministic per-part surface texture: a per-part base color modulated
/// by a smooth directional stripe pattern of the canonical position.
pub fn vertex_color(part: u8, canonical: Vector3<f64>) -> [f64; 3] {
    const BASE: [[f64; 3]; NUM_PARTS] = [
        [0.85, 0.70, 0.55], // head
        [0.25, 0.45, 0.80], // torso
        [0.80, 0.30, 0.25], // left arm
        [0.30, 0.75, 0.35], // right arm
        [0.55, 0.45, 0.70], // legs
    ];
    const DIRS: [[f64; 3]; NUM_PARTS] = [
        [0.0, 1.0, 0.3],
        [0.8, 1.0, 0.0],
        [1.0, 0.2, 0.5],
        [1.0, -0.2, 0.5],
        [0.1, 1.0, 0.6],
    ];
    let p = part as usize % NUM_PARTS;
    let d = Vector3::new(DIRS[p][0], DIRS[p][1], DIRS[p][2]);
    let phase = canonical.dot(&d) * 24.0 + p as f64;
    let stripe = 0.72 + 0.28 * phase.sin();
    [
        (BASE[p][0] * stripe).clamp(0.0, 1.0),
        (BASE[p][1] * stripe).clamp(0.0, 1.0),
        (BASE[p][2] * stripe).clamp(0.0, 1.0),
    ]
}

// ---------------------------------------------------------------------------
// Ground-truth rendering
// ---------------------------------------------------------------------------

/// Renders one ground-truth frame at supersampled resolution: RGB averaged
/// over subsamples, mask by majority coverage, part labels by majority over
/// covered subsamples (nearer depth breaking ties through the z-buffer).
pub fn render_ground_truth(
    body: &TemplateBody,
    pose: &Pose,
    cam: &Camera,
    supersample: usize,
    point_radius: f64,
) -> Result<(Image, MaskImage, LabelImage)> {
    let bones = bone_transforms(body, pose)?;
    let posed = skin_vertices(body, &bones);
    let ss = supersample.max(1);
    let (w, h) = (cam.width, cam.height);
    let (wss, hss) = (w * ss, h * ss);
    let cam_ss = Camera::new(
        cam.world_to_camera,
        cam.fx * ss as f64,
        cam.fy * ss as f64,
        cam.cx * ss as f64,
        cam.cy * ss as f64,
        wss,
        hss,
    )?;
    let projected: Vec<(f64, f64, f64)> = posed.iter().map(|p| cam_ss.project(*p)).collect();
    let zbuf = zbuffer_points(&projected, point_radius, hss, wss);

    let mut rgb = Image::zeros(h, w, 3);
    let mut mask = MaskImage::zeros(h, w);
    let mut labels = LabelImage::background(h, w, LabelProvenance::ProjectedTemplate);
    let rows: Vec<(Vec<f64>, Vec<u8>, Vec<u8>)> = parallel::map_indexed(h, |y| {
        let mut row_rgb = vec![0.0; w * 3];
        let mut row_mask = vec![0u8; w];
        let mut row_label = vec![BACKGROUND_LABEL; w];
        for x in 0..w {
            let mut covered = 0usize;
            let mut acc = [0.0f64; 3];
            let mut part_votes = [0u32; NUM_PARTS];
            let mut nearest: Option<(f64, u8)> = None;
            for sy in 0..ss {
                for sx in 0..ss {
                    let slot = zbuf[(y * ss + sy) * wss + (x * ss + sx)];
                    if let Some((z, idx)) = slot {
                        covered += 1;
                        let v = idx as usize;
                        let c = vertex_color(body.part_labels[v], body.vertices[v]);
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                        let part = body.part_labels[v];
                        part_votes[part as usize] += 1;
                        nearest = match nearest {
                            None => Some((z, part)),
                            Some((bz, bp)) if z < bz => Some((z, part)),
                            other => other,
                        };
                    }
                }
            }
            let total = ss * ss;
            for c in 0..3 {
                row_rgb[x * 3 + c] = acc[c] / total as f64;
            }
            if covered * 2 >= total {
                row_mask[x] = 1;
                let maxv = *part_votes.iter().max().unwrap();
                // Majority part; ties resolve to the nearest subsample's part.
                let tied: Vec<u8> = (0..NUM_PARTS as u8)
                    .filter(|&p| part_votes[p as usize] == maxv)
                    .collect();
                row_label[x] = if tied.len() == 1 {
                    tied[0]
                } else {
                    let np = nearest.map(|(_, p)| p).unwrap_or(tied[0]);
                    if tied.contains(&np) {
                        np
                    } else {
                        tied[0]
                    }
                };
            }
        }
        (row_rgb, row_mask, row_label)
    });
    for (y, (rr, rm, rl)) in rows.into_iter().enumerate() {
        rgb.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&rr);
        mask.data[y * w..(y + 1) * w].copy_from_slice(&rm);
        labels.data[y * w..(y + 1) * w].copy_from_slice(&rl);
    }
    Ok((rgb, mask, labels))
}

// ---------------------------------------------------------------------------
// Generation and persistence
// ---------------------------------------------------------------------------

fn ring_cameras(body: &TemplateBody, cfg: &GenConfig) -> Result<Vec<Camera>> {
    let (lo, hi) = body.bounds();
    let center = (lo + hi) * 0.5;
    let focal = cfg.focal_factor * cfg.height as f64;
    (0..cfg.cameras)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / cfg.cameras as f64;
            let eye = center
                + Vector3::new(
                    cfg.camera_distance * theta.sin(),
                    0.12,
                    -cfg.camera_distance * theta.cos(),
                );
            Camera::look_at(
                eye,
                center,
                Vector3::new(0.0, 1.0, 0.0),
                focal,
                focal,
                cfg.width,
                cfg.height,
            )
        })
        .collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

fn pose_text(id: usize, cam: usize, time: f64, pose: &Pose) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frame {id}");
    let _ = writeln!(s, "cam {cam}");
    let _ = writeln!(s, "time {}", fmt_f64(time));
    let t = pose.root_translation;
    let _ = writeln!(s, "root_t {} {} {}", fmt_f64(t.x), fmt_f64(t.y), fmt_f64(t.z));
    let q = pose.root_rotation;
    let _ = writeln!(
        s,
        "root_q {} {} {} {}",
        fmt_f64(q.w),
        fmt_f64(q.x),
        fmt_f64(q.y),
        fmt_f64(q.z)
    );
    for (i, q) in pose.bone_rotations.iter().enumerate() {
        let _ = writeln!(
            s,
            "bone {i} {} {} {} {}",
            fmt_f64(q.w),
            fmt_f64(q.x),
            fmt_f64(q.y),
            fmt_f64(q.z)
        );
    }
    s
}

fn parse_pose_text(text: &str, path: &Path) -> Result<(usize, usize, f64, Pose)> {
    let err = |msg: String| Error::Format {
        path: path.display().to_string(),
        msg,
    };
    let mut id = 0usize;
    let mut cam = 0usize;
    let mut time = 0.0f64;
    let mut root_t = Vector3::zeros();
    let mut root_q = Quat::IDENTITY;
    let mut bones: Vec<(usize, Quat)> = Vec::new();
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| err(format!("bad float '{s}'")))
        };
        match toks[0] {
            "frame" => id = toks[1].parse().map_err(|_| err("bad frame id".into()))?,
            "cam" => cam = toks[1].parse().map_err(|_| err("bad cam index".into()))?,
            "time" => time = parse(toks[1])?,
            "root_t" => {
                root_t = Vector3::new(parse(toks[1])?, parse(toks[2])?, parse(toks[3])?)
            }
            "root_q" => {
                root_q = Quat::new(parse(toks[1])?, parse(toks[2])?, parse(toks[3])?, parse(toks[4])?)
            }
            "bone" => {
                let i: usize = toks[1].parse().map_err(|_| err("bad bone index".into()))?;
                bones.push((
                    i,
                    Quat::new(parse(toks[2])?, parse(toks[3])?, parse(toks[4])?, parse(toks[5])?),
                ));
            }
            other => return Err(err(format!("unknown pose line '{other}'"))),
        }
    }
    bones.sort_by_key(|(i, _)| *i);
    let pose = Pose {
        bone_rotations: bones.into_iter().map(|(_, q)| q).collect(),
        root_translation: root_t,
        root_rotation: root_q,
    };
    Ok((id, cam, time, pose))
}

/// Generates a full synthetic sequence on disk and returns the root path.
///
/// Layout: `meta` text file, `template.bin`, and per-split `train/` and
/// `test/` directories with `frame_NNNN.{ppm,msk,parts,pose}`. Frames from
/// the held-out camera form the test split.
pub fn generate_dataset(dir: &Path, cfg: &GenConfig) -> Result<()> {
    cfg.validate()?;
    let body = build_template(&TemplateConfig {
        vertex_count: cfg.vertex_count,
        seed: cfg.seed,
        ..TemplateConfig::default()
    })?;
    let motion = MotionSpec::generate(&body, cfg.motion_amplitude, cfg.seed)?;
    let cameras = ring_cameras(&body, cfg)?;

    std::fs::create_dir_all(dir)?;
    write_template(&dir.join("template.bin"), &body)?;

    let timesteps = cfg.frames.div_ceil(cfg.cameras);
    struct Plan {
        id: usize,
        cam: usize,
        time: f64,
    }
    let mut plan = Vec::new();
    'outer: for t in 0..timesteps {
        for c in 0..cfg.cameras {
            if plan.len() >= cfg.frames {
                break 'outer;
            }
            let time = if timesteps > 1 {
                t as f64 / timesteps as f64
            } else {
                0.0
            };
            plan.push(Plan {
                id: plan.len(),
                cam: c,
                time,
            });
        }
    }

    let mut train_count = 0usize;
    let mut test_count = 0usize;
    for split in [Split::Train, Split::Test] {
        std::fs::create_dir_all(dir.join(split.dir_name()))?;
    }
    // Render frames (parallel inside the ground-truth rasterizer).
    for p in &plan {
        let pose = motion.pose_at(p.time);
        let cam = &cameras[p.cam];
        let (rgb, mask, labels) =
            render_ground_truth(&body, &pose, cam, cfg.supersample, cfg.point_radius)?;
        let is_test = cfg.cameras > 1 && p.cam == cfg.test_camera;
        let split = if is_test { Split::Test } else { Split::Train };
        let local_id = if is_test { test_count } else { train_count };
        let base = dir
            .join(split.dir_name())
            .join(format!("frame_{local_id:04}"));
        write_ppm(&base.with_extension("ppm"), &rgb)?;
        write_mask(&base.with_extension("msk"), &mask)?;
        write_labels(&base.with_extension("parts"), &labels)?;
        std::fs::write(
            base.with_extension("pose"),
            pose_text(local_id, p.cam, p.time, &pose),
        )?;
        if is_test {
            test_count += 1;
        } else {
            train_count += 1;
        }
    }

    // Meta file.
    let mut meta = String::new();
    let _ = writeln!(meta, "{META_HEADER}");
    let _ = writeln!(meta, "resolution {} {}", cfg.width, cfg.height);
    let _ = writeln!(meta, "parts {NUM_PARTS}");
    let _ = writeln!(meta, "seed {}", cfg.seed);
    let _ = writeln!(meta, "supersample {}", cfg.supersample);
    let _ = writeln!(meta, "point_radius {}", fmt_f64(cfg.point_radius));
    let _ = writeln!(meta, "template template.bin");
    let _ = writeln!(meta, "cameras {}", cfg.cameras);
    for (i, cam) in cameras.iter().enumerate() {
        let mut line = format!(
            "camera {i} {} {} {} {}",
            fmt_f64(cam.fx),
            fmt_f64(cam.fy),
            fmt_f64(cam.cx),
            fmt_f64(cam.cy)
        );
        for r in 0..4 {
            for c in 0..4 {
                let _ = write!(line, " {}", fmt_f64(cam.world_to_camera[(r, c)]));
            }
        }
        let _ = writeln!(meta, "{line}");
    }
    let _ = writeln!(meta, "train {train_count}");
    let _ = writeln!(meta, "test {test_count}");
    std::fs::write(dir.join("meta"), meta)?;
    Ok(())
}

/// Loads the shared template of a sequence directory.
pub fn load_body(dir: &Path) -> Result<TemplateBody> {
    read_template(&dir.join("template.bin"))
}

/// Loads one split of a sequence directory.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let meta_path = dir.join("meta");
    let text = std::fs::read_to_string(&meta_path)?;
    let err = |msg: String| Error::Format {
        path: meta_path.display().to_string(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(META_HEADER) {
        return Err(err("bad meta header".into()));
    }
    let mut width = 0usize;
    let mut height = 0usize;
    let mut parts = 0usize;
    let mut seed = 0u64;
    let mut cameras: Vec<Camera> = Vec::new();
    let mut counts = [0usize; 2];
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "resolution" => {
                width = toks[1].parse().map_err(|_| err("bad width".into()))?;
                height = toks[2].parse().map_err(|_| err("bad height".into()))?;
            }
            "parts" => parts = toks[1].parse().map_err(|_| err("bad parts".into()))?,
            "seed" => seed = toks[1].parse().map_err(|_| err("bad seed".into()))?,
            "supersample" | "point_radius" | "template" | "cameras" => {}
            "camera" => {
                let f = |s: &str| -> Result<f64> {
                    s.parse().map_err(|_| err(format!("bad float '{s}'")))
                };
                let fx = f(toks[2])?;
                let fy = f(toks[3])?;
                let cx = f(toks[4])?;
                let cy = f(toks[5])?;
                let mut m = Matrix4::identity();
                for r in 0..4 {
                    for c in 0..4 {
                        m[(r, c)] = f(toks[6 + r * 4 + c])?;
                    }
                }
                cameras.push(Camera::new(m, fx, fy, cx, cy, width, height)?);
            }
            "train" => counts[0] = toks[1].parse().map_err(|_| err("bad train count".into()))?,
            "test" => counts[1] = toks[1].parse().map_err(|_| err("bad test count".into()))?,
            other => return Err(err(format!("unknown meta line '{other}'"))),
        }
    }
    let count = match split {
        Split::Train => counts[0],
        Split::Test => counts[1],
    };
    let sub = dir.join(split.dir_name());
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let base = sub.join(format!("frame_{i:04}"));
        let rgb = read_ppm(&base.with_extension("ppm"))?;
        let mask = read_mask(&base.with_extension("msk"))?;
        let parts_truth = read_labels(&base.with_extension("parts"), LabelProvenance::ProjectedTemplate)?;
        let pose_src = std::fs::read_to_string(base.with_extension("pose"))?;
        let (id, cam, time, pose) = parse_pose_text(&pose_src, &base.with_extension("pose"))?;
        frames.push(Frame {
            id,
            camera_index: cam,
            time,
            rgb,
            mask,
            parts_truth,
            pose,
        });
    }
    Ok(Dataset {
        frames,
        cameras,
        split,
        parts,
        seed,
        root: dir.to_path_buf(),
    })
}
