//! Evaluation metrics: PSNR, SSIM, semantic pixel accuracy, render rate.

use crate::error::{Error, Result};
use crate::image_io::{Image, LabelImage, BACKGROUND_LABEL};

/// PSNR on `[0,1]` images, capped at 100 dB for near-zero MSE. Inputs are
/// clamped to `[0,1]` before comparison.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Usage("psnr resolution mismatch".into()));
    }
    let mut mse = 0.0;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
        mse += d * d;
    }
    mse /= a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM (not the loss form), standard 11×11 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (loss, _) = crate::losses::ssim_loss(a, b, 11, 1.5)?;
    Ok(1.0 - loss)
}

/// Fraction of foreground pixels whose rendered argmax label matches the
/// ground-truth label. Ground-truth background pixels are ignored.
pub fn semantic_accuracy(rendered_semantic: &Image, truth: &LabelImage) -> Result<f64> {
    if rendered_semantic.height != truth.height || rendered_semantic.width != truth.width {
        return Err(Error::Usage("semantic accuracy resolution mismatch".into()));
    }
    let parts = rendered_semantic.channels;
    let mut fg = 0usize;
    let mut hit = 0usize;
    for y in 0..truth.height {
        for x in 0..truth.width {
            let label = truth.get(y, x);
            if label == BACKGROUND_LABEL {
                continue;
            }
            fg += 1;
            let px = rendered_semantic.pixel(y, x);
            let mut best = 0usize;
            for c in 1..parts {
                if px[c] > px[best] {
                    best = c;
                }
            }
            if best == label as usize {
                hit += 1;
            }
        }
    }
    if fg == 0 {
        return Ok(1.0);
    }
    Ok(hit as f64 / fg as f64)
}

/// Rendered argmax label map; pixels below the alpha threshold become
/// background.
pub fn argmax_labels(rendered_semantic: &Image, alpha: &Image, alpha_min: f64) -> LabelImage {
    let mut out = LabelImage::background(
        rendered_semantic.height,
        rendered_semantic.width,
        crate::image_io::LabelProvenance::TransferredMask,
    );
    let parts = rendered_semantic.channels;
    for y in 0..out.height {
        for x in 0..out.width {
            if alpha.get(y, x, 0) < alpha_min {
                continue;
            }
            let px = rendered_semantic.pixel(y, x);
            let mut best = 0usize;
            for c in 1..parts {
                if px[c] > px[best] {
                    best = c;
                }
            }
            out.set(y, x, best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::LabelProvenance;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_cap_at_100db() {
        let img = Image::zeros(8, 8, 3);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
        let mut a = Image::zeros(16, 16, 3);
        a.data.iter_mut().for_each(|v| *v = 0.4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_closed_form() {
        // MSE 0.01 → 20 dB.
        let a = Image::zeros(10, 10, 1);
        let mut b = Image::zeros(10, 10, 1);
        b.data.iter_mut().for_each(|v| *v = 0.1);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(161);
        for _ in 0..20 {
            let mut a = Image::zeros(9, 7, 3);
            let mut b = Image::zeros(9, 7, 3);
            for v in a.data.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            for v in b.data.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            let got = psnr(&a, &b).unwrap();
            // Scalar re-implementation.
            let mut mse = 0.0;
            for i in 0..a.data.len() {
                let d = a.data[i] - b.data[i];
                mse += d * d;
            }
            mse /= a.data.len() as f64;
            let want = 10.0 * (1.0 / mse).log10();
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn accuracy_counts_foreground_only() {
        let mut sem = Image::zeros(4, 4, 3);
        let mut truth = LabelImage::background(4, 4, LabelProvenance::TransferredMask);
        truth.set(0, 0, 1);
        truth.set(1, 1, 2);
        truth.set(2, 2, 0);
        sem.set(0, 0, 1, 0.9); // correct
        sem.set(1, 1, 0, 0.9); // wrong
        sem.set(2, 2, 0, 0.5); // correct
        let acc = semantic_accuracy(&sem, &truth).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }
}
