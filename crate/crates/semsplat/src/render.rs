//! Tile-based forward rasterizer for color, semantics, and accumulated alpha,
//! with an analytic backward pass through blending, the 2D covariance, and
//! the perspective projection.
//!
//! Contribution rule: a splat touches a pixel iff the pixel center lies in
//! the splat's `sigma_cut`-sigma bounding rectangle and the blended alpha
//! `α' = opacity · exp(-½ dᵀ Σ₂⁻¹ d)` passes `alpha_skip`. Tiling is a
//! conservative acceleration over the same rule, so the tiled renderer is
//! exactly equivalent to an untiled per-pixel loop.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{build_covariance_backward, GaussianPoint};
use crate::image_io::Image;
use crate::math::{normalize_backward, Quat};
use crate::parallel;
use crate::sh;
use nalgebra::{Matrix2x3, Matrix3, Vector3};

#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Tile edge length in pixels.
    pub tile_size: usize,
    /// Isotropic 2D covariance dilation in px².
    pub dilation: f64,
    /// Near plane in camera-space depth.
    pub near: f64,
    /// Blended alphas below this are skipped.
    pub alpha_skip: f64,
    /// Front-to-back walk stops when transmittance falls below this.
    pub transmittance_stop: f64,
    /// Constant background composited under residual transmittance.
    pub background: [f64; 3],
    /// Bounding-rectangle radius in standard deviations.
    pub sigma_cut: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            dilation: 0.3,
            near: 0.01,
            alpha_skip: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            background: [0.0; 3],
            sigma_cut: 3.0,
        }
    }
}

impl RenderConfig {
    /// Variant with the sparsity cutoffs disabled and rectangles widened so
    /// the image is covered; used by finite-difference gradient checks where
    /// the cutoffs would introduce discontinuities.
    pub fn smooth_for_gradcheck(mut self) -> Self {
        self.alpha_skip = 0.0;
        self.transmittance_stop = 0.0;
        self.sigma_cut = 1e4;
        self
    }
}

/// A projected Gaussian ready for blending.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index of the source point in the input cloud.
    pub point: usize,
    pub mean2d: [f64; 2],
    /// 2D covariance (a, b, c) of [[a, b], [b, c]], dilation included.
    pub cov2d: [f64; 3],
    /// Cached inverse of `cov2d`.
    pub inv2d: [f64; 3],
    /// Camera-space depth.
    pub depth: f64,
    /// Pixel-center AABB [x0, y0, x1, y1] at `sigma_cut` sigmas.
    pub rect: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Splats plus their flattened semantic payloads (`parts` values each).
#[derive(Debug, Clone, Default)]
pub struct SplatList {
    pub splats: Vec<Splat2D>,
    pub semantics: Vec<f64>,
    pub parts: usize,
}

impl SplatList {
    pub fn semantic(&self, i: usize) -> &[f64] {
        &self.semantics[i * self.parts..(i + 1) * self.parts]
    }
}

/// Rendered planes. Semantic pixels accumulate with the same weights as
/// color, so each semantic pixel vector sums to at most the alpha value.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub semantic: Image,
    pub alpha: Image,
    pub contributors: Vec<u32>,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct RasterState {
    pub splats: SplatList,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    width: usize,
    height: usize,
    cfg: RenderConfig,
}

/// Gradients w.r.t. splat-level quantities, indexed like the splat list.
#[derive(Debug, Clone)]
pub struct SplatGrads {
    pub mean2d: Vec<[f64; 2]>,
    pub cov2d: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub semantic: Vec<f64>,
    pub parts: usize,
}

/// Upstream gradients w.r.t. the rendered planes.
#[derive(Debug, Clone)]
pub struct ImageGrads {
    pub color: Image,
    pub semantic: Image,
    pub alpha: Image,
}

impl ImageGrads {
    pub fn zeros(height: usize, width: usize, parts: usize) -> Self {
        ImageGrads {
            color: Image::zeros(height, width, 3),
            semantic: Image::zeros(height, width, parts),
            alpha: Image::zeros(height, width, 1),
        }
    }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Projects one Gaussian given decoded position and world covariance.
/// Returns `None` when culled (behind the near plane, or its rectangle
/// misses every pixel center).
pub fn project_cov(
    pos: Vector3<f64>,
    cov3: &Matrix3<f64>,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Option<Splat2D> {
    let rot = cam.rotation();
    let t = rot * pos + cam.translation();
    if t.z <= cfg.near {
        return None;
    }
    let (u, v) = cam.project_cam(t);
    let inv_z = 1.0 / t.z;
    let j = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    );
    let vmat = j * rot;
    let c2 = vmat * cov3 * vmat.transpose();
    let a = c2[(0, 0)] + cfg.dilation;
    let b = c2[(0, 1)];
    let c = c2[(1, 1)] + cfg.dilation;
    let rx = cfg.sigma_cut * a.max(0.0).sqrt();
    let ry = cfg.sigma_cut * c.max(0.0).sqrt();
    let rect = [u - rx, v - ry, u + rx, v + ry];
    // Cull when no pixel center can fall inside the rectangle.
    let max_cx = cam.width as f64 - 0.5;
    let max_cy = cam.height as f64 - 0.5;
    if rect[2] < 0.5 || rect[0] > max_cx || rect[3] < 0.5 || rect[1] > max_cy {
        return None;
    }
    let det = a * c - b * b;
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let inv2d = [c / det, -b / det, a / det];
    Some(Splat2D {
        point: 0,
        mean2d: [u, v],
        cov2d: [a, b, c],
        inv2d,
        depth: t.z,
        rect,
        opacity: 0.0,
        color: [0.0; 3],
    })
}

/// Projects a stored Gaussian point: decodes opacity, scale, rotation,
/// semantics, and spherical-harmonic color for this camera, then projects.
/// Returns the splat plus its decoded semantic payload, or `None` if culled.
pub fn project_gaussian(
    g: &GaussianPoint,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Option<(Splat2D, Vec<f64>)> {
    let cov = crate::gaussian::build_covariance(g.scale(), g.rotation.normalized())
        .expect("decoded scales positive, rotation normalized");
    let mut splat = project_cov(g.position, &cov, cam, cfg)?;
    let (dir, _) = sh::view_dir(g.position, cam.position());
    splat.opacity = g.opacity();
    splat.color = sh::eval_sh(g.sh_degree(), &g.sh, dir);
    Some((splat, g.semantic()))
}

/// Decoded per-point inputs for rendering: world covariance form.
pub struct CovInputs<'a> {
    pub positions: &'a [Vector3<f64>],
    pub covariances: &'a [Matrix3<f64>],
    pub opacities: &'a [f64],
    pub colors: &'a [[f64; 3]],
    /// Flattened, `parts` values per point.
    pub semantics: &'a [f64],
    pub parts: usize,
}

/// Projects a decoded cloud into a splat list, dropping culled points.
pub fn project_splats(inp: &CovInputs, cam: &Camera, cfg: &RenderConfig) -> SplatList {
    let n = inp.positions.len();
    let projected: Vec<Option<Splat2D>> = parallel::map_indexed(n, |i| {
        project_cov(inp.positions[i], &inp.covariances[i], cam, cfg).map(|mut s| {
            s.point = i;
            s.opacity = inp.opacities[i];
            s.color = inp.colors[i];
            s
        })
    });
    let mut list = SplatList {
        splats: Vec::new(),
        semantics: Vec::new(),
        parts: inp.parts,
    };
    for s in projected.into_iter().flatten() {
        let p = s.point;
        list.splats.push(s);
        list.semantics
            .extend_from_slice(&inp.semantics[p * inp.parts..(p + 1) * inp.parts]);
    }
    list
}

// ---------------------------------------------------------------------------
// Forward rasterization
// ---------------------------------------------------------------------------

fn tile_range(lo: f64, hi: f64, limit: usize, tile: usize) -> Option<(usize, usize)> {
    // Pixel x contributes iff x + 0.5 ∈ [lo, hi].
    let px_lo = (lo - 0.5).ceil().max(0.0) as i64;
    let px_hi = (hi - 0.5).floor().min(limit as f64 - 1.0) as i64;
    if px_lo > px_hi {
        return None;
    }
    Some((px_lo as usize / tile, px_hi as usize / tile))
}

fn build_tiles(list: &SplatList, width: usize, height: usize, cfg: &RenderConfig) -> (Vec<Vec<u32>>, usize) {
    let ts = cfg.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in list.splats.iter().enumerate() {
        let Some((tx0, tx1)) = tile_range(s.rect[0], s.rect[2], width, ts) else {
            continue;
        };
        let Some((ty0, ty1)) = tile_range(s.rect[1], s.rect[3], height, ts) else {
            continue;
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    // Front-to-back order, ties broken by source point index.
    for lst in &mut tiles {
        lst.sort_by(|&a, &b| {
            let sa = &list.splats[a as usize];
            let sb = &list.splats[b as usize];
            sa.depth
                .partial_cmp(&sb.depth)
                .unwrap()
                .then(sa.point.cmp(&sb.point))
        });
    }
    (tiles, tiles_x)
}

struct TileOut {
    color: Vec<f64>,
    semantic: Vec<f64>,
    alpha: Vec<f64>,
    contributors: Vec<u32>,
}

#[inline]
fn splat_alpha_at(s: &Splat2D, px: f64, py: f64) -> f64 {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power =
        -0.5 * (s.inv2d[0] * dx * dx + 2.0 * s.inv2d[1] * dx * dy + s.inv2d[2] * dy * dy);
    s.opacity * power.min(0.0).exp()
}

#[inline]
fn in_rect(rect: &[f64; 4], px: f64, py: f64) -> bool {
    px >= rect[0] && px <= rect[2] && py >= rect[1] && py <= rect[3]
}

/// Alpha-blends sorted splats over every pixel, producing color, semantic,
/// and alpha planes plus per-pixel contributor counts.
pub fn rasterize(list: SplatList, cam: &Camera, cfg: &RenderConfig) -> (RenderOutput, RasterState) {
    let (width, height) = (cam.width, cam.height);
    let parts = list.parts;
    let (tiles, tiles_x) = build_tiles(&list, width, height, cfg);
    let ts = cfg.tile_size;
    let tiles_y = height.div_ceil(ts);

    let outs: Vec<TileOut> = parallel::map_indexed(tiles.len(), |ti| {
        let ty = ti / tiles_x;
        let tx = ti % tiles_x;
        let y0 = ty * ts;
        let x0 = tx * ts;
        let th = ts.min(height - y0);
        let tw = ts.min(width - x0);
        let mut out = TileOut {
            color: vec![0.0; th * tw * 3],
            semantic: vec![0.0; th * tw * parts],
            alpha: vec![0.0; th * tw],
            contributors: vec![0; th * tw],
        };
        let lst = &tiles[ti];
        for yy in 0..th {
            let py = (y0 + yy) as f64 + 0.5;
            for xx in 0..tw {
                let px = (x0 + xx) as f64 + 0.5;
                let pi = yy * tw + xx;
                let mut t_remain = 1.0;
                for &si in lst {
                    let s = &list.splats[si as usize];
                    if !in_rect(&s.rect, px, py) {
                        continue;
                    }
                    let alpha = splat_alpha_at(s, px, py);
                    if alpha < cfg.alpha_skip {
                        continue;
                    }
                    let w = alpha * t_remain;
                    for c in 0..3 {
                        out.color[pi * 3 + c] += s.color[c] * w;
                    }
                    let sem = list.semantic(si as usize);
                    for (p, sv) in sem.iter().enumerate() {
                        out.semantic[pi * parts + p] += sv * w;
                    }
                    out.alpha[pi] += w;
                    out.contributors[pi] += 1;
                    t_remain *= 1.0 - alpha;
                    if t_remain < cfg.transmittance_stop {
                        break;
                    }
                }
                for c in 0..3 {
                    out.color[pi * 3 + c] += cfg.background[c] * t_remain;
                }
            }
        }
        out
    });

    let mut color = Image::zeros(height, width, 3);
    let mut semantic = Image::zeros(height, width, parts.max(1));
    let mut alpha = Image::zeros(height, width, 1);
    let mut contributors = vec![0u32; height * width];
    for (ti, out) in outs.into_iter().enumerate() {
        let ty = ti / tiles_x;
        let tx = ti % tiles_x;
        let y0 = ty * ts;
        let x0 = tx * ts;
        let th = ts.min(height - y0);
        let tw = ts.min(width - x0);
        for yy in 0..th {
            for xx in 0..tw {
                let pi = yy * tw + xx;
                let (y, x) = (y0 + yy, x0 + xx);
                for c in 0..3 {
                    color.set(y, x, c, out.color[pi * 3 + c]);
                }
                for p in 0..parts {
                    semantic.set(y, x, p, out.semantic[pi * parts + p]);
                }
                alpha.set(y, x, 0, out.alpha[pi]);
                contributors[y * width + x] = out.contributors[pi];
            }
        }
    }
    let _ = tiles_y;

    (
        RenderOutput {
            color,
            semantic,
            alpha,
            contributors,
        },
        RasterState {
            splats: list,
            tiles,
            tiles_x,
            width,
            height,
            cfg: cfg.clone(),
        },
    )
}

// ---------------------------------------------------------------------------
// Backward rasterization
// ---------------------------------------------------------------------------

struct TileGrads {
    /// Same order as the tile's splat list.
    mean2d: Vec<[f64; 2]>,
    inv2d: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    color: Vec<[f64; 3]>,
    semantic: Vec<f64>,
}

/// Analytic gradients of the blending pass w.r.t. every splat parameter.
///
/// Re-walks each pixel exactly as the forward pass did (same skip and
/// termination rules), so skipped splats receive zero gradient.
pub fn rasterize_backward(state: &RasterState, grads: &ImageGrads) -> SplatGrads {
    let list = &state.splats;
    let parts = list.parts;
    let cfg = &state.cfg;
    let ts = cfg.tile_size;
    let (width, height) = (state.width, state.height);

    let tile_grads: Vec<TileGrads> = parallel::map_indexed(state.tiles.len(), |ti| {
        let lst = &state.tiles[ti];
        let ty = ti / state.tiles_x;
        let tx = ti % state.tiles_x;
        let y0 = ty * ts;
        let x0 = tx * ts;
        let th = ts.min(height - y0);
        let tw = ts.min(width - x0);
        let mut tg = TileGrads {
            mean2d: vec![[0.0; 2]; lst.len()],
            inv2d: vec![[0.0; 3]; lst.len()],
            opacity: vec![0.0; lst.len()],
            color: vec![[0.0; 3]; lst.len()],
            semantic: vec![0.0; lst.len() * parts],
        };
        // (position in tile list, alpha, transmittance before this splat)
        let mut scratch: Vec<(u32, f64, f64)> = Vec::with_capacity(lst.len());
        let mut after_sem = vec![0.0; parts];
        for yy in 0..th {
            let py = (y0 + yy) as f64 + 0.5;
            for xx in 0..tw {
                let px = (x0 + xx) as f64 + 0.5;
                let (y, x) = (y0 + yy, x0 + xx);
                let g_col = grads.color.pixel(y, x);
                let g_sem = grads.semantic.pixel(y, x);
                let g_alpha = grads.alpha.get(y, x, 0);

                scratch.clear();
                let mut t_remain = 1.0;
                for (li, &si) in lst.iter().enumerate() {
                    let s = &list.splats[si as usize];
                    if !in_rect(&s.rect, px, py) {
                        continue;
                    }
                    let alpha = splat_alpha_at(s, px, py);
                    if alpha < cfg.alpha_skip {
                        continue;
                    }
                    scratch.push((li as u32, alpha, t_remain));
                    t_remain *= 1.0 - alpha;
                    if t_remain < cfg.transmittance_stop {
                        break;
                    }
                }
                let t_final = t_remain;
                let bg_dot: f64 = (0..3).map(|c| g_col[c] * cfg.background[c]).sum();

                let mut after_col = [0.0; 3];
                after_sem.iter_mut().for_each(|v| *v = 0.0);
                let mut after_alpha = 0.0;
                for &(li, alpha, t_before) in scratch.iter().rev() {
                    let li = li as usize;
                    let si = lst[li] as usize;
                    let s = &list.splats[si];
                    let sem = list.semantic(si);
                    let w = alpha * t_before;

                    // Payload gradients.
                    for c in 0..3 {
                        tg.color[li][c] += g_col[c] * w;
                    }
                    for p in 0..parts {
                        tg.semantic[li * parts + p] += g_sem[p] * w;
                    }

                    // d(loss)/d(alpha'_i).
                    let payload_dot: f64 = (0..3).map(|c| g_col[c] * s.color[c]).sum::<f64>()
                        + (0..parts).map(|p| g_sem[p] * sem[p]).sum::<f64>()
                        + g_alpha;
                    let after_dot: f64 = (0..3).map(|c| g_col[c] * after_col[c]).sum::<f64>()
                        + (0..parts).map(|p| g_sem[p] * after_sem[p]).sum::<f64>()
                        + g_alpha * after_alpha
                        + bg_dot * t_final;
                    let d_alpha = payload_dot * t_before - after_dot / (1.0 - alpha);

                    // alpha' = opacity * exp(power).
                    let gval = alpha / s.opacity;
                    tg.opacity[li] += gval * d_alpha;
                    let d_power = alpha * d_alpha;

                    let dx = px - s.mean2d[0];
                    let dy = py - s.mean2d[1];
                    let mdx = s.inv2d[0] * dx + s.inv2d[1] * dy;
                    let mdy = s.inv2d[1] * dx + s.inv2d[2] * dy;
                    tg.mean2d[li][0] += d_power * mdx;
                    tg.mean2d[li][1] += d_power * mdy;
                    tg.inv2d[li][0] += d_power * (-0.5 * dx * dx);
                    tg.inv2d[li][1] += d_power * (-dx * dy);
                    tg.inv2d[li][2] += d_power * (-0.5 * dy * dy);

                    // Suffix accumulators.
                    for c in 0..3 {
                        after_col[c] += s.color[c] * w;
                    }
                    for (p, sv) in sem.iter().enumerate() {
                        after_sem[p] += sv * w;
                    }
                    after_alpha += w;
                }
            }
        }
        tg
    });

    // Merge per-tile buffers in tile order (deterministic reduction).
    let n = list.splats.len();
    let mut out = SplatGrads {
        mean2d: vec![[0.0; 2]; n],
        cov2d: vec![[0.0; 3]; n],
        opacity: vec![0.0; n],
        color: vec![[0.0; 3]; n],
        semantic: vec![0.0; n * parts],
        parts,
    };
    let mut inv_grads = vec![[0.0; 3]; n];
    for (ti, tg) in tile_grads.into_iter().enumerate() {
        for (li, &si) in state.tiles[ti].iter().enumerate() {
            let si = si as usize;
            out.mean2d[si][0] += tg.mean2d[li][0];
            out.mean2d[si][1] += tg.mean2d[li][1];
            for k in 0..3 {
                inv_grads[si][k] += tg.inv2d[li][k];
                out.color[si][k] += tg.color[li][k];
            }
            out.opacity[si] += tg.opacity[li];
            for p in 0..parts {
                out.semantic[si * parts + p] += tg.semantic[li * parts + p];
            }
        }
    }

    // Chain inverse-covariance gradients to the covariance: dC = -M G M.
    for (si, s) in list.splats.iter().enumerate() {
        let g = inv_grads[si];
        let m = [s.inv2d[0], s.inv2d[1], s.inv2d[2]];
        // Full symmetric gradient of the independent components (a, b, c).
        let g00 = g[0];
        let g01 = 0.5 * g[1];
        let g11 = g[2];
        // X = -M G M with M = [[m0,m1],[m1,m2]].
        let mg00 = m[0] * g00 + m[1] * g01;
        let mg01 = m[0] * g01 + m[1] * g11;
        let mg10 = m[1] * g00 + m[2] * g01;
        let mg11 = m[1] * g01 + m[2] * g11;
        let x00 = -(mg00 * m[0] + mg01 * m[1]);
        let x01 = -(mg00 * m[1] + mg01 * m[2]);
        let x11 = -(mg10 * m[1] + mg11 * m[2]);
        out.cov2d[si] = [x00, 2.0 * x01, x11];
    }
    out
}

// ---------------------------------------------------------------------------
// Projection backward
// ---------------------------------------------------------------------------

/// Gradients w.r.t. decoded world-covariance inputs, aligned with the
/// original point indexing (culled points stay zero).
pub struct CovGrads {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub semantics: Vec<f64>,
    /// Norm of the pixel-space positional gradient per point (densification
    /// statistic).
    pub mean2d_norm: Vec<f64>,
    /// Whether the point produced a splat for this view.
    pub visible: Vec<bool>,
}

/// Chains splat-level gradients through the projection to decoded points.
pub fn project_splats_backward(
    inp: &CovInputs,
    cam: &Camera,
    state: &RasterState,
    sg: &SplatGrads,
) -> CovGrads {
    let n = inp.positions.len();
    let parts = inp.parts;
    let mut out = CovGrads {
        positions: vec![Vector3::zeros(); n],
        covariances: vec![Matrix3::zeros(); n],
        opacities: vec![0.0; n],
        colors: vec![[0.0; 3]; n],
        semantics: vec![0.0; n * parts],
        mean2d_norm: vec![0.0; n],
        visible: vec![false; n],
    };
    let rot = cam.rotation();
    let rot_t = rot.transpose();
    for (si, s) in state.splats.splats.iter().enumerate() {
        let p = s.point;
        out.visible[p] = true;
        out.opacities[p] += sg.opacity[si];
        for c in 0..3 {
            out.colors[p][c] += sg.color[si][c];
        }
        for k in 0..parts {
            out.semantics[p * parts + k] += sg.semantic[si * parts + k];
        }
        let gm = sg.mean2d[si];
        out.mean2d_norm[p] = (gm[0] * gm[0] + gm[1] * gm[1]).sqrt();

        // Recompute projection intermediates.
        let t = rot * inp.positions[p] + cam.translation();
        let inv_z = 1.0 / t.z;
        let j = Matrix2x3::new(
            cam.fx * inv_z,
            0.0,
            -cam.fx * t.x * inv_z * inv_z,
            0.0,
            cam.fy * inv_z,
            -cam.fy * t.y * inv_z * inv_z,
        );
        let vmat = j * rot;

        // Covariance chain: G2 full symmetric from (a, b, c) components.
        let g = sg.cov2d[si];
        let g2 = nalgebra::Matrix2::new(g[0], 0.5 * g[1], 0.5 * g[1], g[2]);
        out.covariances[p] += vmat.transpose() * g2 * vmat;

        // dV = 2 G2 V Σ, dJ = dV Rᵀ.
        let sigma = &inp.covariances[p];
        let dv = 2.0 * g2 * vmat * sigma;
        let dj = dv * rot_t;

        // Mean chain.
        let mut gt = Vector3::new(
            gm[0] * cam.fx * inv_z,
            gm[1] * cam.fy * inv_z,
            -gm[0] * cam.fx * t.x * inv_z * inv_z - gm[1] * cam.fy * t.y * inv_z * inv_z,
        );
        // Jacobian entries' dependence on t.
        let iz2 = inv_z * inv_z;
        let iz3 = iz2 * inv_z;
        gt.x += dj[(0, 2)] * (-cam.fx * iz2);
        gt.y += dj[(1, 2)] * (-cam.fy * iz2);
        gt.z += dj[(0, 0)] * (-cam.fx * iz2)
            + dj[(0, 2)] * (2.0 * cam.fx * t.x * iz3)
            + dj[(1, 1)] * (-cam.fy * iz2)
            + dj[(1, 2)] * (2.0 * cam.fy * t.y * iz3);
        out.positions[p] += rot_t * gt;
    }
    out
}

// ---------------------------------------------------------------------------
// Decoded-cloud convenience wrapper (quaternion rotations)
// ---------------------------------------------------------------------------

/// Fully decoded cloud: positions, per-view RGB colors, opacities in (0,1),
/// positive scales, rotations as (possibly raw) quaternions, semantics on
/// the simplex.
pub struct DecodedCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub semantics: Vec<f64>,
    pub parts: usize,
}

pub struct CloudRenderState {
    pub raster: RasterState,
    covariances: Vec<Matrix3<f64>>,
}

/// Gradients w.r.t. every decoded parameter of every Gaussian.
pub struct DecodedGrads {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub semantics: Vec<f64>,
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Renders a decoded cloud (quaternion rotations) in one call.
pub fn render_cloud(
    cloud: &DecodedCloud,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<(RenderOutput, CloudRenderState)> {
    let n = cloud.positions.len();
    let covariances: Vec<Matrix3<f64>> = parallel::map_indexed(n, |i| {
        let q = cloud.rotations[i].normalized();
        let r = q.to_matrix();
        let s = cloud.scales[i];
        let m = Matrix3::from_diagonal(&s.component_mul(&s));
        r * m * r.transpose()
    });
    if covariances.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical("non-finite covariance during render"));
    }
    let inputs = CovInputs {
        positions: &cloud.positions,
        covariances: &covariances,
        opacities: &cloud.opacities,
        colors: &cloud.colors,
        semantics: &cloud.semantics,
        parts: cloud.parts,
    };
    let list = project_splats(&inputs, cam, cfg);
    let (out, raster) = rasterize(list, cam, cfg);
    Ok((out, CloudRenderState { raster, covariances }))
}

/// Backward of [`render_cloud`]: gradients for position, color, opacity,
/// scale, rotation (raw quaternion), and semantics.
pub fn render_cloud_backward(
    cloud: &DecodedCloud,
    cam: &Camera,
    state: &CloudRenderState,
    grads: &ImageGrads,
) -> DecodedGrads {
    let sg = rasterize_backward(&state.raster, grads);
    let inputs = CovInputs {
        positions: &cloud.positions,
        covariances: &state.covariances,
        opacities: &cloud.opacities,
        colors: &cloud.colors,
        semantics: &cloud.semantics,
        parts: cloud.parts,
    };
    let cg = project_splats_backward(&inputs, cam, &state.raster, &sg);
    let n = cloud.positions.len();
    let mut rotations = vec![Quat::new(0.0, 0.0, 0.0, 0.0); n];
    let mut scales = vec![Vector3::zeros(); n];
    for i in 0..n {
        if !cg.visible[i] {
            continue;
        }
        let (gs, gq_unit) =
            build_covariance_backward(cloud.scales[i], cloud.rotations[i].normalized(), &cg.covariances[i]);
        scales[i] = gs;
        rotations[i] = normalize_backward(cloud.rotations[i], gq_unit);
    }
    DecodedGrads {
        positions: cg.positions,
        colors: cg.colors,
        opacities: cg.opacities,
        scales,
        rotations,
        semantics: cg.semantics,
        mean2d_norm: cg.mean2d_norm,
        visible: cg.visible,
    }
}
