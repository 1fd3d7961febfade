//! Body-part annotation: pose the labeled template, rasterize it into a
//! label image with a z-buffered point rasterizer, and transfer labels onto
//! each frame's foreground mask by majority vote over nearest labeled pixels.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image_io::{
    read_labels, write_labels, LabelImage, LabelProvenance, MaskImage, BACKGROUND_LABEL,
};
use crate::knn::LabeledPixelGrid;
use crate::parallel;
use crate::template::{bone_transforms, skin_vertices, Pose, TemplateBody};

/// Neighbors consulted when transferring labels to a mask pixel.
pub const TRANSFER_K: usize = 5;

/// Depth cutoff for projected template vertices.
const POINT_NEAR: f64 = 0.01;

/// Z-buffers a set of projected points onto an image: per pixel, the point
/// with the smallest depth wins (ties broken by point index). `radius = 0`
/// marks only the pixel containing the point; larger radii stamp a disc of
/// that pixel radius around the projected position.
pub fn zbuffer_points(
    projected: &[(f64, f64, f64)],
    radius: f64,
    height: usize,
    width: usize,
) -> Vec<Option<(f64, u32)>> {
    let mut buf: Vec<Option<(f64, u32)>> = vec![None; height * width];
    let mut stamp = |x: i64, y: i64, z: f64, idx: u32| {
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return;
        }
        let slot = &mut buf[y as usize * width + x as usize];
        let better = match slot {
            None => true,
            Some((bz, bi)) => z < *bz || (z == *bz && idx < *bi),
        };
        if better {
            *slot = Some((z, idx));
        }
    };
    for (i, &(u, v, z)) in projected.iter().enumerate() {
        if z <= POINT_NEAR || !u.is_finite() || !v.is_finite() {
            continue;
        }
        if radius <= 0.0 {
            stamp(u.floor() as i64, v.floor() as i64, z, i as u32);
        } else {
            let x0 = (u - radius).floor() as i64;
            let x1 = (u + radius).ceil() as i64;
            let y0 = (v - radius).floor() as i64;
            let y1 = (v + radius).ceil() as i64;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = x as f64 + 0.5 - u;
                    let dy = y as f64 + 0.5 - v;
                    if dx * dx + dy * dy <= radius * radius {
                        stamp(x, y, z, i as u32);
                    }
                }
            }
        }
    }
    buf
}

/// Projects the posed template and rasterizes per-vertex part labels as
/// one-pixel points with z-buffering.
pub fn rasterize_template_labels(
    body: &TemplateBody,
    bones: &crate::template::BoneTransforms,
    cam: &Camera,
) -> LabelImage {
    let posed = skin_vertices(body, bones);
    let projected: Vec<(f64, f64, f64)> =
        posed.iter().map(|p| cam.project(*p)).collect();
    let buf = zbuffer_points(&projected, 0.0, cam.height, cam.width);
    let mut out = LabelImage::background(cam.height, cam.width, LabelProvenance::ProjectedTemplate);
    for (pix, slot) in buf.iter().enumerate() {
        if let Some((_, idx)) = slot {
            out.data[pix] = body.part_labels[*idx as usize];
        }
    }
    out
}

/// Transfers labels from a projected template raster onto a foreground mask:
/// every foreground pixel receives the majority label among its `k` nearest
/// labeled pixels (2D Euclidean distance); majority ties resolve to the label
/// of the nearest tied neighbor. Background pixels stay background.
pub fn transfer_labels(mask: &MaskImage, projected: &LabelImage, k: usize) -> Result<LabelImage> {
    if mask.height != projected.height || mask.width != projected.width {
        return Err(Error::Usage(format!(
            "mask {}x{} vs projected {}x{}",
            mask.height, mask.width, projected.height, projected.width
        )));
    }
    let grid = LabeledPixelGrid::build(projected);
    if grid.labeled_count() == 0 {
        return Err(Error::Annotation(
            "projected template raster has no labeled pixels".into(),
        ));
    }
    let k = k.max(1).min(grid.labeled_count());
    let (h, w) = (mask.height, mask.width);
    let rows: Vec<Vec<u8>> = parallel::map_indexed(h, |y| {
        let mut row = vec![BACKGROUND_LABEL; w];
        for (x, out) in row.iter_mut().enumerate() {
            if mask.get(y, x) == 0 {
                continue;
            }
            let neigh = grid.knn(x as i32, y as i32, k, w);
            let mut counts = [0u32; 256];
            for &(_, _, l, _) in &neigh {
                counts[l as usize] += 1;
            }
            let maxc = *counts.iter().max().unwrap();
            // Nearest neighbor whose label is among the tied majority.
            let winner = neigh
                .iter()
                .find(|&&(_, _, l, _)| counts[l as usize] == maxc)
                .map(|&(_, _, l, _)| l)
                .unwrap();
            *out = winner;
        }
        row
    });
    let mut out = LabelImage::background(h, w, LabelProvenance::TransferredMask);
    for (y, row) in rows.into_iter().enumerate() {
        out.data[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    Ok(out)
}

/// Full annotation of one frame: pose the template, rasterize labels,
/// transfer them onto the mask. When `cache` is given, a previously computed
/// result is reused and new results are written atomically.
pub fn annotate_frame(
    mask: &MaskImage,
    body: &TemplateBody,
    pose: &Pose,
    cam: &Camera,
    cache: Option<&std::path::Path>,
) -> Result<LabelImage> {
    if let Some(path) = cache {
        if path.exists() {
            return read_labels(path, LabelProvenance::TransferredMask);
        }
    }
    let bones = bone_transforms(body, pose)?;
    let projected = rasterize_template_labels(body, &bones, cam);
    let labels = transfer_labels(mask, &projected, TRANSFER_K)?;
    if let Some(path) = cache {
        let tmp = path.with_extension("tmp");
        write_labels(&tmp, &labels)?;
        std::fs::rename(&tmp, path)?;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::labeled_knn_exhaustive;
    use crate::template::{build_template, TemplateConfig};
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn body_and_cam() -> (TemplateBody, Camera) {
        let body = build_template(&TemplateConfig {
            vertex_count: 1500,
            ..TemplateConfig::default()
        })
        .unwrap();
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.9, -3.2),
            Vector3::new(0.0, 0.9, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            96,
            96,
        )
        .unwrap();
        (body, cam)
    }

    #[test]
    fn body_behind_camera_gives_background() {
        let (body, _) = body_and_cam();
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.9, -3.2),
            // Looking away from the body.
            Vector3::new(0.0, 0.9, -6.0),
            Vector3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            64,
            64,
        )
        .unwrap();
        let bones = bone_transforms(&body, &Pose::rest(body.bone_count())).unwrap();
        let labels = rasterize_template_labels(&body, &bones, &cam);
        assert_eq!(labels.labeled_count(), 0);
    }

    #[test]
    fn nearer_vertex_wins_pixel() {
        let buf = zbuffer_points(&[(5.3, 5.7, 2.0), (5.4, 5.2, 1.0)], 0.0, 10, 10);
        let slot = buf[5 * 10 + 5].unwrap();
        assert_eq!(slot.1, 1);
        // Equal depth: lower index wins.
        let buf2 = zbuffer_points(&[(5.3, 5.7, 2.0), (5.4, 5.2, 2.0)], 0.0, 10, 10);
        assert_eq!(buf2[5 * 10 + 5].unwrap().1, 0);
    }

    #[test]
    fn zbuffer_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        for _ in 0..50 {
            let n = rng.gen_range(1..60);
            let pts: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(-2.0..14.0),
                        rng.gen_range(-2.0..14.0),
                        rng.gen_range(0.5..5.0),
                    )
                })
                .collect();
            let got = zbuffer_points(&pts, 0.0, 12, 12);
            for y in 0..12 {
                for x in 0..12 {
                    // All vertices landing on this pixel, nearest wins.
                    let mut want: Option<(f64, u32)> = None;
                    for (i, &(u, v, z)) in pts.iter().enumerate() {
                        if u.floor() as i64 == x && v.floor() as i64 == y && z > POINT_NEAR {
                            let cand = (z, i as u32);
                            want = match want {
                                None => Some(cand),
                                Some(b) if (cand.0, cand.1) < b => Some(cand),
                                other => other,
                            };
                        }
                    }
                    assert_eq!(got[y as usize * 12 + x as usize], want);
                }
            }
        }
    }

    #[test]
    fn depth_offset_does_not_change_winners() {
        let mut rng = ChaCha8Rng::seed_from_u64(122);
        let pts: Vec<(f64, f64, f64)> = (0..40)
            .map(|_| {
                (
                    rng.gen_range(0.0..16.0),
                    rng.gen_range(0.0..16.0),
                    rng.gen_range(1.0..3.0),
                )
            })
            .collect();
        let shifted: Vec<(f64, f64, f64)> = pts.iter().map(|&(u, v, z)| (u, v, z + 7.5)).collect();
        let a = zbuffer_points(&pts, 0.0, 16, 16);
        let b = zbuffer_points(&shifted, 0.0, 16, 16);
        for (sa, sb) in a.iter().zip(b.iter()) {
            assert_eq!(sa.map(|(_, i)| i), sb.map(|(_, i)| i));
        }
    }

    #[test]
    fn transfer_zero_distance_takes_that_label() {
        let mut proj = LabelImage::background(8, 8, LabelProvenance::ProjectedTemplate);
        proj.set(3, 4, 2);
        proj.set(7, 7, 1);
        let mut mask = MaskImage::zeros(8, 8);
        mask.set(3, 4, 1);
        let out = transfer_labels(&mask, &proj, 1).unwrap();
        assert_eq!(out.get(3, 4), 2);
    }

    #[test]
    fn transfer_k1_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..60 {
            let h = rng.gen_range(6..24);
            let w = rng.gen_range(6..24);
            let mut proj = LabelImage::background(h, w, LabelProvenance::ProjectedTemplate);
            for _ in 0..rng.gen_range(1..20) {
                proj.set(rng.gen_range(0..h), rng.gen_range(0..w), rng.gen_range(0..5));
            }
            let mut mask = MaskImage::zeros(h, w);
            for _ in 0..rng.gen_range(1..h * w / 2) {
                mask.set(rng.gen_range(0..h), rng.gen_range(0..w), 1);
            }
            let out = transfer_labels(&mask, &proj, 1).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) == 1 {
                        let nn = labeled_knn_exhaustive(&proj, x as i32, y as i32, 1);
                        assert_eq!(out.get(y, x), nn[0].2);
                    } else {
                        assert_eq!(out.get(y, x), BACKGROUND_LABEL);
                    }
                }
            }
        }
    }

    #[test]
    fn far_mask_pixels_still_get_labels() {
        let mut proj = LabelImage::background(32, 32, LabelProvenance::ProjectedTemplate);
        proj.set(0, 0, 3);
        let mut mask = MaskImage::zeros(32, 32);
        mask.set(31, 31, 1);
        let out = transfer_labels(&mask, &proj, TRANSFER_K).unwrap();
        assert_eq!(out.get(31, 31), 3);
    }

    #[test]
    fn transfer_empty_projection_is_annotation_error() {
        let proj = LabelImage::background(8, 8, LabelProvenance::ProjectedTemplate);
        let mut mask = MaskImage::zeros(8, 8);
        mask.set(1, 1, 1);
        assert!(matches!(
            transfer_labels(&mask, &proj, 3),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn majority_tie_takes_nearest_tied_label() {
        // k = 5 with labels [A, B, B, C, C] by distance: tie B/C resolves to
        // the nearest pixel whose label is tied (B at distance 2).
        let mut proj = LabelImage::background(16, 16, LabelProvenance::ProjectedTemplate);
        proj.set(8, 9, 0); // A, d=1
        proj.set(8, 10, 1); // B, d=2
        proj.set(8, 11, 1); // B, d=3
        proj.set(12, 8, 2); // C, d=4
        proj.set(8, 13, 2); // C, d=5
        let mut mask = MaskImage::zeros(16, 16);
        mask.set(8, 8, 1);
        let out = transfer_labels(&mask, &proj, 5).unwrap();
        assert_eq!(out.get(8, 8), 1);
    }

    #[test]
    fn annotate_frame_caches_bit_identically() {
        let (body, cam) = body_and_cam();
        let pose = Pose::rest(body.bone_count());
        let bones = bone_transforms(&body, &pose).unwrap();
        // Mask from the projected template silhouette itself.
        let proj = rasterize_template_labels(&body, &bones, &cam);
        let mut mask = MaskImage::zeros(cam.height, cam.width);
        for y in 0..cam.height {
            for x in 0..cam.width {
                if proj.get(y, x) != BACKGROUND_LABEL {
                    mask.set(y, x, 1);
                }
            }
        }
        let dir = std::env::temp_dir().join("semsplat_annot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let cache = dir.join("frame_0.lbl");
        let _ = std::fs::remove_file(&cache);
        let a = annotate_frame(&mask, &body, &pose, &cam, Some(&cache)).unwrap();
        let b = annotate_frame(&mask, &body, &pose, &cam, Some(&cache)).unwrap();
        assert_eq!(a.data, b.data);
        // Every foreground pixel labeled, background untouched.
        for y in 0..cam.height {
            for x in 0..cam.width {
                if mask.get(y, x) == 1 {
                    assert_ne!(a.get(y, x), BACKGROUND_LABEL);
                } else {
                    assert_eq!(a.get(y, x), BACKGROUND_LABEL);
                }
            }
        }
    }

    #[test]
    fn all_zero_mask_gives_background() {
        let (body, cam) = body_and_cam();
        let pose = Pose::rest(body.bone_count());
        let mask = MaskImage::zeros(cam.height, cam.width);
        let out = annotate_frame(&mask, &body, &pose, &cam, None).unwrap();
        assert_eq!(out.labeled_count(), 0);
    }
}
