//! Geometry-photo alignment: instance matching, box-warp refinement, the
//! box-to-box warp itself, normal-agreement weighting, and consensus view
//! selection.
//!
//! Geometry masks/UVs and photo masks live in the same view raster but are
//! mutually misaligned; the warp maps one onto the other through their
//! bounding boxes: x_s = (x_t - c_dst)/l_dst * l_src + c_src, elementwise in
//! (x, y), nearest-pixel lookup, out-of-bounds sources dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("part is not visible in any view")]
    PartNotVisible,
    #[error("{0}")]
    ShapeMismatch(String),
}

/// Minimum normal agreement for a pixel to count as valid.
pub const WEIGHT_VALID: f64 = 0.95;
/// Minimum number of valid pixels for full optimization.
pub const VALID_COUNT_MIN: usize = 500;
/// Soft-IoU below this flags the pair as unmatched.
pub const SOFT_IOU_MIN: f64 = 0.05;

/// Bounding boxes driving the warp; centers and sizes in pixels, (x, y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WarpBoxes {
    pub c_g: [f64; 2],
    pub l_g: [f64; 2],
    pub c_p: [f64; 2],
    pub l_p: [f64; 2],
}

impl WarpBoxes {
    pub fn from_masks(mask_geo: &Tensor, mask_photo: &Tensor) -> Result<WarpBoxes, AlignError> {
        let (c_g, l_g) = mask_bbox(mask_geo).ok_or(AlignError::EmptyMask)?;
        let (c_p, l_p) = mask_bbox(mask_photo).ok_or(AlignError::EmptyMask)?;
        Ok(WarpBoxes { c_g, l_g, c_p, l_p })
    }

    /// Source (geometry) coordinates for a photo-space target pixel.
    pub fn geo_source_for(&self, x_t: [f64; 2]) -> [f64; 2] {
        [
            (x_t[0] - self.c_p[0]) / self.l_p[0] * self.l_g[0] + self.c_g[0],
            (x_t[1] - self.c_p[1]) / self.l_p[1] * self.l_g[1] + self.c_g[1],
        ]
    }

    /// Source (photo) coordinates for a geometry-space target pixel.
    pub fn photo_source_for(&self, x_t: [f64; 2]) -> [f64; 2] {
        [
            (x_t[0] - self.c_g[0]) / self.l_g[0] * self.l_p[0] + self.c_p[0],
            (x_t[1] - self.c_g[1]) / self.l_g[1] * self.l_p[1] + self.c_p[1],
        ]
    }
}

/// How the part proceeds through fitting, a total function of whether a
/// photo mask matched and how many pixels passed the normal-agreement test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AlignMode {
    Optimize,
    MedianFallback,
    GeoMedianFallback,
}

pub fn classify_mode(matched: bool, valid_count: usize) -> AlignMode {
    if !matched {
        AlignMode::GeoMedianFallback
    } else if valid_count >= VALID_COUNT_MIN {
        AlignMode::Optimize
    } else {
        AlignMode::MedianFallback
    }
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    /// Binary aligned mask times the agreement weight, in [0,1].
    pub mask_aligned: Tensor,
    /// Warped per-pixel UVs, zero outside the mask.
    pub uv_aligned: Tensor,
    /// max(0, N_inv . N_geo) per pixel inside the mask.
    pub weight: Tensor,
    pub valid_count: usize,
    pub mode: AlignMode,
}

/// Bounding box of pixels > 0.5 as (center, size) in (x, y); None if empty.
pub fn mask_bbox(mask: &Tensor) -> Option<([f64; 2], [f64; 2])> {
    let s = mask.shape();
    let (h, w) = (s[0], s[1]);
    let d = mask.data();
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..h {
        for x in 0..w {
            if d[y * w + x] > 0.5 {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let c = [(x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0];
    let l = [(x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64];
    Some((c, l))
}

/// Soft IoU between two masks, each downweighted by a Gaussian at its own
/// bounding-box center with sigma = half the box extents.
pub fn soft_iou(a: &Tensor, b: &Tensor) -> f64 {
    let (Some((ca, la)), Some((cb, lb))) = (mask_bbox(a), mask_bbox(b)) else {
        return 0.0;
    };
    let s = a.shape();
    let (h, w) = (s[0], s[1]);
    let (ad, bd) = (a.data(), b.data());
    let sig = |l: f64| (l / 2.0).max(0.5);
    let (sax, say) = (sig(la[0]), sig(la[1]));
    let (sbx, sby) = (sig(lb[0]), sig(lb[1]));
    let mut inter = 0.0;
    let mut union = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ga = (-((x as f64 - ca[0]).powi(2) / (2.0 * sax * sax)
                + (y as f64 - ca[1]).powi(2) / (2.0 * say * say)))
                .exp();
            let gb = (-((x as f64 - cb[0]).powi(2) / (2.0 * sbx * sbx)
                + (y as f64 - cb[1]).powi(2) / (2.0 * sby * sby)))
                .exp();
            let va = ad[i] * ga;
            let vb = bd[i] * gb;
            inter += va.min(vb);
            union += va.max(vb);
        }
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug)]
pub struct MatchOutcome {
    /// Argmax photo candidate, None when no candidate was admissible.
    pub photo_index: Option<usize>,
    pub soft_iou: f64,
    /// False routes the part to the geometry-median fallback.
    pub matched: bool,
}

/// Pairs each geometry submask with the photo candidate of maximum soft IoU.
/// When both label lists are given, only candidates with an equal label are
/// admissible. Low-overlap pairs keep their candidate but are flagged.
pub fn match_instances(
    geo_masks: &[Tensor],
    photo_masks: &[Tensor],
    geo_labels: Option<&[String]>,
    photo_labels: Option<&[String]>,
) -> Vec<MatchOutcome> {
    geo_masks
        .iter()
        .enumerate()
        .map(|(gi, gm)| {
            let mut best: Option<(usize, f64)> = None;
            for (pi, pm) in photo_masks.iter().enumerate() {
                if let (Some(gl), Some(pl)) = (geo_labels, photo_labels) {
                    if gl[gi] != pl[pi] {
                        continue;
                    }
                }
                let iou = soft_iou(gm, pm);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((pi, iou));
                }
            }
            match best {
                Some((pi, iou)) => MatchOutcome {
                    photo_index: Some(pi),
                    soft_iou: iou,
                    matched: iou >= SOFT_IOU_MIN,
                },
                None => MatchOutcome {
                    photo_index: None,
                    soft_iou: 0.0,
                    matched: false,
                },
            }
        })
        .collect()
}

fn hard_iou_warped(mask_geo: &Tensor, mask_photo: &Tensor, boxes: &WarpBoxes) -> f64 {
    let s = mask_photo.shape();
    let (h, w) = (s[0], s[1]);
    let gs = mask_geo.shape();
    let (gh, gw) = (gs[0], gs[1]);
    let (gd, pd) = (mask_geo.data(), mask_photo.data());
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..h {
        for x in 0..w {
            let src = boxes.geo_source_for([x as f64, y as f64]);
            let sx = src[0].round();
            let sy = src[1].round();
            let warped = sx >= 0.0
                && sy >= 0.0
                && (sx as usize) < gw
                && (sy as usize) < gh
                && gd[sy as usize * gw + sx as usize] > 0.5;
            let photo = pd[y * w + x] > 0.5;
            if warped && photo {
                inter += 1;
            }
            if warped || photo {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Refines the geometry box (center and size) by coordinate descent on hard
/// IoU between the warped geometry mask and the photo mask. Three rounds over
/// the four scalars, five candidate offsets per axis spanning +-25% of the
/// box size (halved each round). Never accepts a worse IoU.
pub fn optimize_warp(
    mask_geo: &Tensor,
    mask_photo: &Tensor,
) -> Result<(WarpBoxes, f64), AlignError> {
    let mut boxes = WarpBoxes::from_masks(mask_geo, mask_photo)?;
    let mut best = hard_iou_warped(mask_geo, mask_photo, &boxes);
    for round in 0..3 {
        let range = 0.25 / (1 << round) as f64;
        for axis in 0..2 {
            // Center offsets are fractions of the box size on that axis.
            for step in [-1.0, -0.5, 0.5, 1.0] {
                let mut cand = boxes;
                cand.c_g[axis] += step * range * boxes.l_g[axis];
                let iou = hard_iou_warped(mask_geo, mask_photo, &cand);
                if iou > best {
                    best = iou;
                    boxes = cand;
                }
            }
            for step in [-1.0, -0.5, 0.5, 1.0] {
                let mut cand = boxes;
                cand.l_g[axis] = (boxes.l_g[axis] * (1.0 + step * range)).max(1.0);
                let iou = hard_iou_warped(mask_geo, mask_photo, &cand);
                if iou > best {
                    best = iou;
                    boxes = cand;
                }
            }
        }
    }
    Ok((boxes, best))
}

/// Warps geometry-space UVs and mask into photo space. The aligned mask is
/// the warped geometry mask intersected with the photo mask; weights start
/// at 1 and are refined by [`weight_map`].
pub fn warp_geo_to_photo(
    uv_geo: &Tensor,
    mask_geo: &Tensor,
    mask_photo: &Tensor,
    boxes: &WarpBoxes,
) -> AlignResult {
    let s = mask_photo.shape();
    let (h, w) = (s[0], s[1]);
    let gs = mask_geo.shape();
    let (gh, gw) = (gs[0], gs[1]);
    let (gd, pd, uvd) = (mask_geo.data(), mask_photo.data(), uv_geo.data());
    let mut mask = vec![0.0; h * w];
    let mut uv = vec![0.0; h * w * 2];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if pd[y * w + x] <= 0.5 {
                continue;
            }
            let src = boxes.geo_source_for([x as f64, y as f64]);
            let sx = src[0].round();
            let sy = src[1].round();
            if sx < 0.0 || sy < 0.0 || sx as usize >= gw || sy as usize >= gh {
                continue;
            }
            let si = sy as usize * gw + sx as usize;
            if gd[si] > 0.5 {
                let i = y * w + x;
                mask[i] = 1.0;
                uv[i * 2] = uvd[si * 2];
                uv[i * 2 + 1] = uvd[si * 2 + 1];
                count += 1;
            }
        }
    }
    let mask = Tensor::new(vec![h, w, 1], mask).expect("sized above");
    AlignResult {
        weight: mask.clone(),
        mask_aligned: mask,
        uv_aligned: Tensor::new(vec![h, w, 2], uv).expect("sized above"),
        valid_count: count,
        mode: classify_mode(true, count),
    }
}

/// Warps an arbitrary geometry-space raster into photo space with the same
/// nearest-pixel map (no masking; combine with the aligned mask as needed).
pub fn warp_geo_raster_to_photo(
    raster: &Tensor,
    out_h: usize,
    out_w: usize,
    boxes: &WarpBoxes,
) -> Tensor {
    let s = raster.shape();
    let (gh, gw, c) = (s[0], s[1], s[2]);
    let rd = raster.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        for x in 0..out_w {
            let src = boxes.geo_source_for([x as f64, y as f64]);
            let sx = src[0].round();
            let sy = src[1].round();
            if sx < 0.0 || sy < 0.0 || sx as usize >= gw || sy as usize >= gh {
                continue;
            }
            let si = (sy as usize * gw + sx as usize) * c;
            let di = (y * out_w + x) * c;
            out[di..di + c].copy_from_slice(&rd[si..si + c]);
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("sized above")
}

/// Warps a photo-space image (and its mask) into geometry space, the mirror
/// of [`warp_geo_to_photo`] with the box roles exchanged.
pub fn warp_photo_to_geo(
    photo: &Tensor,
    mask_photo: &Tensor,
    mask_geo: &Tensor,
    boxes: &WarpBoxes,
) -> (Tensor, Tensor) {
    let gs = mask_geo.shape();
    let (h, w) = (gs[0], gs[1]);
    let ps = photo.shape();
    let (ph, pw, c) = (ps[0], ps[1], ps[2]);
    let (gd, pd, id) = (mask_geo.data(), mask_photo.data(), photo.data());
    let mut out = vec![0.0; h * w * c];
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if gd[y * w + x] <= 0.5 {
                continue;
            }
            let src = boxes.photo_source_for([x as f64, y as f64]);
            let sx = src[0].round();
            let sy = src[1].round();
            if sx < 0.0 || sy < 0.0 || sx as usize >= pw || sy as usize >= ph {
                continue;
            }
            let si = sy as usize * pw + sx as usize;
            if pd[si] > 0.5 {
                let di = (y * w + x) * c;
                out[di..di + c].copy_from_slice(&id[si * c..si * c + c]);
                mask[y * w + x] = 1.0;
            }
        }
    }
    (
        Tensor::new(vec![h, w, c], out).expect("sized above"),
        Tensor::new(vec![h, w, 1], mask).expect("sized above"),
    )
}

/// Per-pixel agreement weight max(0, N_inv . N_geo) inside the mask, the
/// count of pixels above [`WEIGHT_VALID`], and the resulting mode (assuming
/// a matched candidate; the caller downgrades unmatched parts).
pub fn weight_map(
    normals_inv: &Tensor,
    normals_geo: &Tensor,
    mask_aligned: &Tensor,
) -> Result<(Tensor, usize, AlignMode), AlignError> {
    let s = mask_aligned.shape();
    let (h, w) = (s[0], s[1]);
    if normals_inv.shape() != [h, w, 3] || normals_geo.shape() != [h, w, 3] {
        return Err(AlignError::ShapeMismatch(format!(
            "normals {:?}/{:?} vs mask {}x{}",
            normals_inv.shape(),
            normals_geo.shape(),
            h,
            w
        )));
    }
    let (a, b, m) = (normals_inv.data(), normals_geo.data(), mask_aligned.data());
    let mut weight = vec![0.0; h * w];
    let mut valid = 0usize;
    for i in 0..h * w {
        if m[i] <= 0.0 {
            continue;
        }
        let dot = a[i * 3] * b[i * 3] + a[i * 3 + 1] * b[i * 3 + 1] + a[i * 3 + 2] * b[i * 3 + 2];
        let wgt = dot.max(0.0);
        weight[i] = wgt;
        if wgt > WEIGHT_VALID {
            valid += 1;
        }
    }
    Ok((
        Tensor::new(vec![h, w, 1], weight).expect("sized above"),
        valid,
        classify_mode(true, valid),
    ))
}

impl AlignResult {
    /// Folds an agreement weight into the result: maskAligned becomes the
    /// binary mask times the weight, and mode/validCount are replaced.
    pub fn with_weights(
        mut self,
        weight: Tensor,
        valid_count: usize,
        matched: bool,
    ) -> AlignResult {
        let data: Vec<f64> = self
            .mask_aligned
            .data()
            .iter()
            .zip(weight.data())
            .map(|(m, w)| if *m > 0.0 { w.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        self.mask_aligned =
            Tensor::new(self.mask_aligned.shape().to_vec(), data).expect("same shape");
        self.weight = weight;
        self.valid_count = valid_count;
        self.mode = classify_mode(matched, valid_count);
        self
    }
}

/// One candidate view's selection score.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViewScore {
    pub view_index: usize,
    pub consensus: usize,
    pub coverage: f64,
    pub score: f64,
}

/// Per-view inputs for [`select_view`].
#[derive(Clone, Debug)]
pub struct ViewCandidate {
    /// Camera-to-world pose, rows of a 4x4 matrix.
    pub pose: [[f64; 4]; 4],
    /// Part mask in this view; empty means the part is not visible.
    pub mask_photo: Tensor,
    /// Concatenated masked statistics (mean and std of per-pixel albedo and
    /// roughness predictions); build with [`part_stats`].
    pub stats: Vec<f64>,
}

/// Concatenated mean and standard deviation of masked albedo (3 channels)
/// and roughness (1 channel) prediction maps: 8 entries.
pub fn part_stats(albedo: &Tensor, roughness: &Tensor, mask: &Tensor) -> Vec<f64> {
    let m = mask.data();
    let n: f64 = m.iter().filter(|&&v| v > 0.0).count() as f64;
    let mut out = Vec::with_capacity(8);
    let mut channel_stats = |data: &[f64], channels: usize| {
        for c in 0..channels {
            let mut mean = 0.0;
            for (i, &mv) in m.iter().enumerate() {
                if mv > 0.0 {
                    mean += data[i * channels + c];
                }
            }
            mean /= n.max(1.0);
            let mut var = 0.0;
            for (i, &mv) in m.iter().enumerate() {
                if mv > 0.0 {
                    var += (data[i * channels + c] - mean).powi(2);
                }
            }
            var /= n.max(1.0);
            out.push(mean);
            out.push(var.sqrt());
        }
    };
    channel_stats(albedo.data(), 3);
    channel_stats(roughness.data(), 1);
    out
}

fn pose_distance(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> (f64, f64) {
    // trace(Ra^T Rb) = sum_ij Ra[i][j]*Rb[i][j]
    let mut tr = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            tr += a[i][j] * b[i][j];
        }
    }
    let angle = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    let mut d2 = 0.0;
    for i in 0..3 {
        d2 += (a[i][3] - b[i][3]).powi(2);
    }
    (angle, d2.sqrt())
}

/// Minimum pose separation for two views to both enter selection.
pub const VIEW_MIN_ANGLE: f64 = 30.0 * std::f64::consts::PI / 180.0;
pub const VIEW_MIN_DIST: f64 = 1.0;

/// Picks the view to fit from: subsample pose-distinct views containing the
/// part, score each by consensus x center-weighted coverage, return the
/// argmax (ties to the lowest index).
pub fn select_view(
    views: &[ViewCandidate],
    tau: f64,
) -> Result<(usize, Vec<ViewScore>), AlignError> {
    let visible: Vec<usize> = (0..views.len())
        .filter(|&i| views[i].mask_photo.data().iter().any(|&v| v > 0.0))
        .collect();
    if visible.is_empty() {
        return Err(AlignError::PartNotVisible);
    }
    // Greedy subsample in index order: drop views too close to a kept one.
    let mut kept: Vec<usize> = Vec::new();
    for &i in &visible {
        let distinct = kept.iter().all(|&k| {
            let (ang, dist) = pose_distance(&views[i].pose, &views[k].pose);
            ang >= VIEW_MIN_ANGLE || dist >= VIEW_MIN_DIST
        });
        if distinct {
            kept.push(i);
        }
    }
    let mut scores = Vec::with_capacity(kept.len());
    for &i in &kept {
        let consensus = kept
            .iter()
            .filter(|&&j| j != i)
            .filter(|&&j| {
                let d2: f64 = views[i]
                    .stats
                    .iter()
                    .zip(&views[j].stats)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                d2.sqrt() <= tau
            })
            .count();
        let mask = &views[i].mask_photo;
        let s = mask.shape();
        let (h, w) = (s[0], s[1]);
        let (sx, sy) = (w as f64 / 4.0, h as f64 / 4.0);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let md = mask.data();
        let mut coverage = 0.0;
        for y in 0..h {
            for x in 0..w {
                if md[y * w + x] > 0.0 {
                    let g = (-((x as f64 + 0.5 - cx).powi(2) / (2.0 * sx * sx)
                        + (y as f64 + 0.5 - cy).powi(2) / (2.0 * sy * sy)))
                        .exp();
                    coverage += g * md[y * w + x];
                }
            }
        }
        scores.push(ViewScore {
            view_index: i,
            consensus,
            coverage,
            score: consensus as f64 * coverage,
        });
    }
    let best = scores
        .iter()
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap()
                .then(b.view_index.cmp(&a.view_index))
        })
        .expect("kept is nonempty");
    Ok((best.view_index, scores))
}
