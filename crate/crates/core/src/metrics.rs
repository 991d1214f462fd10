//! Image comparison: masked RMSE per material region on linear RGB, and
//! SSIM on the luma of tonemapped full images.
//!
//! Tonemap for display and SSIM is x^(1/2.2) after exposure, clipped to
//! [0, 1]. SSIM uses the standard 11x11 Gaussian window (sigma 1.5),
//! k1 = 0.01, k2 = 0.03, dynamic range 1, averaged over fully interior
//! window positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {msg}")]
    DimensionMismatch { msg: String },
    #[error("empty mask")]
    EmptyMask,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::DimensionMismatch {
            msg: format!("{what}: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Sum of squared channel differences over masked pixels plus the sample
/// count, for pooling across views before the final square root.
pub fn masked_sq_error(
    photo: &Tensor,
    render: &Tensor,
    mask: &Tensor,
) -> Result<(f64, usize), MetricsError> {
    same_shape(photo, render, "photo vs render")?;
    if mask.shape()[..2] != photo.shape()[..2] {
        return Err(MetricsError::DimensionMismatch {
            msg: format!("mask {:?} vs photo {:?}", mask.shape(), photo.shape()),
        });
    }
    let (p, r, m) = (photo.data(), render.data(), mask.data());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pi, &mv) in m.iter().enumerate() {
        if mv <= 0.0 {
            continue;
        }
        for c in 0..3 {
            let d = r[pi * 3 + c] - p[pi * 3 + c];
            sum += d * d;
        }
        count += 3;
    }
    Ok((sum, count))
}

pub fn masked_rmse(photo: &Tensor, render: &Tensor, mask: &Tensor) -> Result<f64, MetricsError> {
    let (sum, count) = masked_sq_error(photo, render, mask)?;
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((sum / count as f64).sqrt())
}

/// Display transform: clip negatives, gamma-compress, clip to 1.
pub fn tonemap(linear: &Tensor) -> Tensor {
    linear.map(|v| v.max(0.0).powf(1.0 / 2.2).min(1.0))
}

/// Rec. 709 luma of an RGB image.
pub fn luma(rgb: &Tensor) -> Tensor {
    let s = rgb.shape();
    let d = rgb.data();
    Tensor::from_fn(&[s[0], s[1], 1], |pi| {
        0.2126 * d[pi * 3] + 0.7152 * d[pi * 3 + 1] + 0.0722 * d[pi * 3 + 2]
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// SSIM between two single-channel images in [0, 1].
pub fn ssim_gray(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    same_shape(a, b, "ssim inputs")?;
    let s = a.shape();
    let (h, w) = (s[0], s[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::DimensionMismatch {
            msg: format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"),
        });
    }
    let win = gaussian_window();
    let (da, db) = (a.data(), b.data());
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mut total = 0.0;
    let mut n = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * w + x0;
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    mu_a += g * da[row + wx];
                    mu_b += g * db[row + wx];
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * w + x0;
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let ea = da[row + wx] - mu_a;
                    let eb = db[row + wx] - mu_b;
                    var_a += g * ea * ea;
                    var_b += g * eb * eb;
                    cov += g * ea * eb;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// SSIM of two linear RGB images after tonemapping, on luma.
pub fn ssim_tonemapped(photo_linear: &Tensor, render_linear: &Tensor) -> Result<f64, MetricsError> {
    same_shape(photo_linear, render_linear, "ssim inputs")?;
    ssim_gray(
        &luma(&tonemap(photo_linear)),
        &luma(&tonemap(render_linear)),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PartRmse {
    pub part_id: String,
    pub rmse: f64,
    /// Masked samples pooled over all scored views.
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViewSsim {
    pub view_index: usize,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub method: String,
    pub parts: Vec<PartRmse>,
    pub views: Vec<ViewSsim>,
    pub mean_rmse: f64,
    pub mean_ssim: f64,
}

/// Pools per-part squared error across views (part id, photo, render, mask
/// triples) and scores SSIM per full view image.
pub fn build_report(
    method: &str,
    part_samples: &[(String, Vec<(Tensor, Tensor, Tensor)>)],
    view_images: &[(usize, Tensor, Tensor)],
) -> Result<MetricsReport, MetricsError> {
    let mut parts = Vec::with_capacity(part_samples.len());
    for (part_id, triples) in part_samples {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (photo, render, mask) in triples {
            let (s, c) = masked_sq_error(photo, render, mask)?;
            sum += s;
            count += c;
        }
        if count == 0 {
            return Err(MetricsError::EmptyMask);
        }
        parts.push(PartRmse {
            part_id: part_id.clone(),
            rmse: (sum / count as f64).sqrt(),
            samples: count,
        });
    }
    let mut views = Vec::with_capacity(view_images.len());
    for (vi, photo, render) in view_images {
        views.push(ViewSsim {
            view_index: *vi,
            ssim: ssim_tonemapped(photo, render)?,
        });
    }
    let mean_rmse = if parts.is_empty() {
        0.0
    } else {
        parts.iter().map(|p| p.rmse).sum::<f64>() / parts.len() as f64
    };
    let mean_ssim = if views.is_empty() {
        0.0
    } else {
        views.iter().map(|v| v.ssim).sum::<f64>() / views.len() as f64
    };
    Ok(MetricsReport {
        method: method.to_string(),
        parts,
        views,
        mean_rmse,
        mean_ssim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "metrics.img");
        Tensor::from_fn(&[h, w, 3], |_| rng.gen::<f64>())
    }

    #[test]
    fn identical_images_score_perfectly() {
        let img = random_image(16, 16, 1);
        let mask = Tensor::full(&[16, 16, 1], 1.0);
        assert_eq!(masked_rmse(&img, &img, &mask).unwrap(), 0.0);
        let s = ssim_tonemapped(&img, &img).unwrap();
        assert!(s > 0.999_999, "ssim {s}");
        assert!(s <= 1.0 + 1e-12);
    }

    #[test]
    fn constant_offset_has_that_rmse() {
        let img = random_image(12, 12, 2).map(|v| v * 0.8);
        let off = img.map(|v| v + 0.1);
        let mask = Tensor::full(&[12, 12, 1], 1.0);
        let r = masked_rmse(&img, &off, &mask).unwrap();
        assert!((r - 0.1).abs() < 1e-12, "rmse {r}");
    }

    #[test]
    fn rmse_ignores_unmasked_pixels() {
        let img = random_image(8, 8, 3);
        let mut bad = img.to_vec();
        // Corrupt the first pixel only, then mask it out.
        bad[0] += 100.0;
        let bad = Tensor::new(vec![8, 8, 3], bad).unwrap();
        let mask = Tensor::from_fn(&[8, 8, 1], |i| if i == 0 { 0.0 } else { 1.0 });
        assert_eq!(masked_rmse(&img, &bad, &mask).unwrap(), 0.0);
        let empty = Tensor::full(&[8, 8, 1], 0.0);
        assert!(matches!(
            masked_rmse(&img, &bad, &empty),
            Err(MetricsError::EmptyMask)
        ));
    }

    #[test]
    fn ssim_prefers_identity_over_negative() {
        let img = random_image(24, 24, 4);
        let neg = img.map(|v| 1.0 - v);
        let same = ssim_tonemapped(&img, &img).unwrap();
        let opposite = ssim_tonemapped(&img, &neg).unwrap();
        assert!(same > opposite, "{same} vs {opposite}");
        assert!((-1.0..=1.0).contains(&opposite));
    }

    #[test]
    fn ssim_stays_in_bounds_on_random_pairs() {
        for t in 0..10 {
            let a = random_image(16, 20, 100 + t);
            let b = random_image(16, 20, 200 + t);
            let s = ssim_tonemapped(&a, &b).unwrap();
            assert!((-1.0..=1.0 + 1e-12).contains(&s), "ssim {s}");
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = random_image(16, 16, 5);
        let b = random_image(16, 12, 6);
        assert!(matches!(
            ssim_tonemapped(&a, &b),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        let mask = Tensor::full(&[16, 16, 1], 1.0);
        assert!(matches!(
            masked_rmse(&a, &b, &mask),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        // Images smaller than the window cannot be scored.
        let tiny = random_image(8, 8, 7);
        assert!(matches!(
            ssim_tonemapped(&tiny, &tiny),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn report_pools_parts_and_views() {
        let photo = random_image(16, 16, 8).map(|v| v * 0.5);
        let render = photo.map(|v| v + 0.2);
        let mask = Tensor::full(&[16, 16, 1], 1.0);
        let report = build_report(
            "test",
            &[
                (
                    "a".into(),
                    vec![(photo.clone(), render.clone(), mask.clone())],
                ),
                ("b".into(), vec![(photo.clone(), photo.clone(), mask)]),
            ],
            &[(0, photo.clone(), render)],
        )
        .unwrap();
        assert_eq!(report.parts.len(), 2);
        assert!((report.parts[0].rmse - 0.2).abs() < 1e-12);
        assert_eq!(report.parts[1].rmse, 0.0);
        assert!((report.mean_rmse - 0.1).abs() < 1e-12);
        assert_eq!(report.views.len(), 1);
        assert!(report.mean_ssim > 0.0 && report.mean_ssim <= 1.0);
        assert_eq!(report.method, "test");
    }
}
