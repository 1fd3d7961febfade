//! Training objectives: masked photometric L1, silhouette L1, structural
//! dissimilarity, per-pixel semantic binary cross-entropy against annotator
//! labels, neighborhood KL consistency on semantic attributes, skinning
//! weight regression to the template prior, and the as-isometric-as-possible
//! penalty. Each term returns its value and analytic gradients.

use crate::error::{Error, Result};
use crate::image_io::{Image, LabelImage, MaskImage, BACKGROUND_LABEL};
use crate::knn::{knn_graph, PointGrid3};
use crate::template::TemplateBody;
use nalgebra::Vector3;

/// Loss weights λ₁..λ₇. The perceptual slot exists for config compatibility
/// but is unimplemented and defaults to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub skin: f64,
    pub isopos: f64,
    pub semantic: f64,
    pub neighborhood: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 0.1,
            ssim: 0.2,
            lpips: 0.0,
            skin: 0.1,
            isopos: 1.0,
            semantic: 0.1,
            neighborhood: 0.01,
        }
    }
}

/// One iteration's loss terms and their weighted total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub rgb: f64,
    pub mask: f64,
    pub ssim: f64,
    pub skin: f64,
    pub isopos: f64,
    pub semantic: f64,
    pub neighborhood: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "iteration,rgb,mask,ssim,skin,isopos,semantic,neighborhood,total"
    }

    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            iteration,
            self.rgb,
            self.mask,
            self.ssim,
            self.skin,
            self.isopos,
            self.semantic,
            self.neighborhood,
            self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Weighted sum per the full objective; the perceptual term is absent.
pub fn total_loss(report: &mut LossReport, w: &LossWeights) {
    report.total = report.rgb
        + w.mask * report.mask
        + w.ssim * report.ssim
        + w.skin * report.skin
        + w.isopos * report.isopos
        + w.semantic * report.semantic
        + w.neighborhood * report.neighborhood;
}

// ---------------------------------------------------------------------------
// Image-space terms
// ---------------------------------------------------------------------------

/// Mean absolute error over foreground pixels (all channels). Returns the
/// loss and its gradient w.r.t. the rendered image.
pub fn rgb_loss(rendered: &Image, target: &Image, mask: &MaskImage) -> Result<(f64, Image)> {
    if !rendered.same_shape(target) || rendered.height != mask.height || rendered.width != mask.width
    {
        return Err(Error::Usage("rgb loss resolution mismatch".into()));
    }
    let mut grad = Image::zeros(rendered.height, rendered.width, rendered.channels);
    let fg = mask.foreground_count();
    if fg == 0 {
        return Ok((0.0, grad));
    }
    let count = (fg * rendered.channels) as f64;
    let mut acc = 0.0;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            if mask.get(y, x) == 0 {
                continue;
            }
            for c in 0..rendered.channels {
                let d = rendered.get(y, x, c) - target.get(y, x, c);
                acc += d.abs();
                grad.set(y, x, c, d.signum() / count);
            }
        }
    }
    Ok((acc / count, grad))
}

/// Mean absolute error between the alpha plane and the binary mask over all
/// pixels.
pub fn mask_loss(alpha: &Image, mask: &MaskImage) -> Result<(f64, Image)> {
    if alpha.channels != 1 || alpha.height != mask.height || alpha.width != mask.width {
        return Err(Error::Usage("mask loss resolution mismatch".into()));
    }
    let count = (alpha.height * alpha.width) as f64;
    let mut grad = Image::zeros(alpha.height, alpha.width, 1);
    let mut acc = 0.0;
    for y in 0..alpha.height {
        for x in 0..alpha.width {
            let d = alpha.get(y, x, 0) - mask.get(y, x) as f64;
            acc += d.abs();
            grad.set(y, x, 0, d.signum() / count);
        }
    }
    Ok((acc / count, grad))
}

/// SSIM constants for unit dynamic range.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - half;
            let x = (i % size) as f64 - half;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Structural dissimilarity `1 - mean SSIM` with a Gaussian window, averaged
/// over channels and all centers where the full window fits. Returns the
/// loss and its gradient w.r.t. the rendered image. Images smaller than the
/// window yield zero.
pub fn ssim_loss(
    rendered: &Image,
    target: &Image,
    window: usize,
    sigma: f64,
) -> Result<(f64, Image)> {
    if !rendered.same_shape(target) {
        return Err(Error::Usage("ssim loss resolution mismatch".into()));
    }
    let (h, w, ch) = (rendered.height, rendered.width, rendered.channels);
    let mut grad = Image::zeros(h, w, ch);
    if h < window || w < window {
        return Ok((0.0, grad));
    }
    let win = gaussian_window(window, sigma);
    let ch_count = ((h - window + 1) * (w - window + 1) * ch) as f64;
    let mut mean_ssim = 0.0;
    for c in 0..ch {
        for cy in 0..=h - window {
            for cx in 0..=w - window {
                // Window statistics.
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for wy in 0..window {
                    for wx in 0..window {
                        let g = win[wy * window + wx];
                        let xv = rendered.get(cy + wy, cx + wx, c);
                        let yv = target.get(cy + wy, cx + wx, c);
                        mx += g * xv;
                        my += g * yv;
                        mxx += g * xv * xv;
                        myy += g * yv * yv;
                        mxy += g * xv * yv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cxy = mxy - mx * my;
                let a1 = 2.0 * mx * my + SSIM_C1;
                let a2 = 2.0 * cxy + SSIM_C2;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = vx + vy + SSIM_C2;
                let s = (a1 * a2) / (b1 * b2);
                mean_ssim += s;

                // Partials of s w.r.t. window statistics of x.
                let ds_dmx = (2.0 * my * a2) / (b1 * b2) - (a1 * a2 * 2.0 * mx) / (b1 * b1 * b2);
                let ds_dvx = -(a1 * a2) / (b1 * b2 * b2);
                let ds_dcxy = (2.0 * a1) / (b1 * b2);
                // Loss is 1 - mean(s): scatter -1/ch_count times ds/dx_i.
                let scale = -1.0 / ch_count;
                for wy in 0..window {
                    for wx in 0..window {
                        let g = win[wy * window + wx];
                        let xv = rendered.get(cy + wy, cx + wx, c);
                        let yv = target.get(cy + wy, cx + wx, c);
                        let d = g * (ds_dmx + ds_dvx * 2.0 * (xv - mx) + ds_dcxy * (yv - my));
                        let gi = grad.idx(cy + wy, cx + wx, c);
                        grad.data[gi] += scale * d;
                    }
                }
            }
        }
    }
    Ok((1.0 - mean_ssim / ch_count, grad))
}

/// Probability clamp for the semantic binary cross-entropy.
const BCE_CLAMP: f64 = 1e-6;

/// Mean binary cross-entropy between rendered semantic planes and one-hot
/// annotator labels over foreground pixels and all channels. Background
/// pixels are excluded. Returns the loss and its gradient w.r.t. the
/// rendered semantic image.
pub fn semantic_loss(rendered: &Image, annotation: &LabelImage) -> Result<(f64, Image)> {
    if rendered.height != annotation.height || rendered.width != annotation.width {
        return Err(Error::Usage("semantic loss resolution mismatch".into()));
    }
    let parts = rendered.channels;
    let mut grad = Image::zeros(rendered.height, rendered.width, parts);
    let fg = annotation.labeled_count();
    if fg == 0 {
        return Ok((0.0, grad));
    }
    let count = (fg * parts) as f64;
    let mut acc = 0.0;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            let label = annotation.get(y, x);
            if label == BACKGROUND_LABEL {
                continue;
            }
            for c in 0..parts {
                let t = if c == label as usize { 1.0 } else { 0.0 };
                let raw = rendered.get(y, x, c);
                let s = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                acc += -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
                // Zero gradient where the clamp is active.
                if raw > BCE_CLAMP && raw < 1.0 - BCE_CLAMP {
                    grad.set(y, x, c, (s - t) / (s * (1.0 - s)) / count);
                }
            }
        }
    }
    Ok((acc / count, grad))
}

// ---------------------------------------------------------------------------
// Point-space terms
// ---------------------------------------------------------------------------

/// Probability clamp inside the KL divergence.
const KL_CLAMP: f64 = 1e-8;

/// Local semantic consistency: `(1/N) Σ_m Σ_{n ∈ N_k(m)} KL(O_m ‖ O_n)` with
/// neighbors in canonical space and probabilities clamped. Returns the loss
/// and its gradient w.r.t. the decoded semantic probabilities (`n × parts`).
pub fn neighborhood_loss(
    positions: &[Vector3<f64>],
    semantics: &[f64],
    parts: usize,
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = positions.len();
    if n <= k {
        return Err(Error::Usage(format!(
            "neighborhood loss needs more than k = {k} points, got {n}"
        )));
    }
    let graph = knn_graph(positions, k);
    let mut grad = vec![0.0; n * parts];
    let inv_n = 1.0 / n as f64;
    let mut acc = 0.0;
    for m in 0..n {
        let p = &semantics[m * parts..(m + 1) * parts];
        for &nj in &graph[m * k..(m + 1) * k] {
            let q = &semantics[nj as usize * parts..(nj as usize + 1) * parts];
            for c in 0..parts {
                let pc = p[c].max(KL_CLAMP);
                let qc = q[c].max(KL_CLAMP);
                acc += pc * (pc / qc).ln();
                if p[c] > KL_CLAMP {
                    grad[m * parts + c] += ((pc / qc).ln() + 1.0) * inv_n;
                }
                if q[c] > KL_CLAMP {
                    grad[nj as usize * parts + c] += (-pc / qc) * inv_n;
                }
            }
        }
    }
    Ok((acc * inv_n, grad))
}

/// Mean squared error between predicted skinning weights and the template
/// weights of each point's nearest canonical vertex. Returns the loss and
/// its gradient w.r.t. the predicted weights (`n × B`). The nearest-vertex
/// selection is discrete and carries no gradient.
pub fn skin_loss(
    predicted: &[f64],
    positions: &[Vector3<f64>],
    body: &TemplateBody,
    template_grid: &PointGrid3,
) -> Result<(f64, Vec<f64>)> {
    let b = body.bone_count();
    let n = positions.len();
    if predicted.len() != n * b {
        return Err(Error::Usage(format!(
            "skin loss weight shape {} != {} × {}",
            predicted.len(),
            n,
            b
        )));
    }
    let mut grad = vec![0.0; n * b];
    let count = (n * b) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let nearest = template_grid.knn(positions[i], 1, None);
        let v = nearest[0].0;
        let target = body.weights_row(v);
        for j in 0..b {
            let d = predicted[i * b + j] - target[j];
            acc += d * d;
            grad[i * b + j] = 2.0 * d / count;
        }
    }
    Ok((acc / count, grad))
}

/// As-isometric-as-possible penalty: squared change of canonical k-NN pair
/// distances after deformation. The neighbor graph is built in canonical
/// space. Returns loss and gradients w.r.t. final and canonical positions.
pub fn isopos_loss(
    canonical: &[Vector3<f64>],
    observed: &[Vector3<f64>],
    k: usize,
) -> Result<(f64, Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let n = canonical.len();
    if n <= k {
        return Err(Error::Usage(format!(
            "isometry loss needs more than k = {k} points, got {n}"
        )));
    }
    if observed.len() != n {
        return Err(Error::Usage("isometry loss shape mismatch".into()));
    }
    let graph = knn_graph(canonical, k);
    let count = (n * k) as f64;
    let mut g_obs = vec![Vector3::zeros(); n];
    let mut g_can = vec![Vector3::zeros(); n];
    let mut acc = 0.0;
    for i in 0..n {
        for &jn in &graph[i * k..(i + 1) * k] {
            let j = jn as usize;
            let u = observed[i] - observed[j];
            let v = canonical[i] - canonical[j];
            let du = u.norm();
            let dv = v.norm();
            let diff = du - dv;
            acc += diff * diff;
            if du > 1e-12 {
                let dir = u / du;
                g_obs[i] += dir * (2.0 * diff / count);
                g_obs[j] -= dir * (2.0 * diff / count);
            }
            if dv > 1e-12 {
                let dir = v / dv;
                g_can[i] -= dir * (2.0 * diff / count);
                g_can[j] += dir * (2.0 * diff / count);
            }
        }
    }
    Ok((acc / count, g_obs, g_can))
}
