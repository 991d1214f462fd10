//! Synthetic ground-truth scenes: fronto-parallel parts with known graph
//! parameters, UV transforms, light coefficients, and exposures, rendered
//! through the same shading layer the fitter uses. Optional pixel noise and
//! a translation of the geometry rasters exercise the alignment stage.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{
    GridLayout, LightKind, LightRecord, PartRecord, PartView, SceneBundle, ViewRecord,
};
use crate::fit::{render_with_textures, FitError, PartRenderCtx, Roughness};
use crate::matgraph::{self, GraphTemplate};
use crate::relight::{place_ceiling_lights, RelightError};
use crate::render::{
    view_dirs_from_fov, LightingGrid, RenderError, ShadeGeometry, UvTransformParams,
};
use crate::rng::{stream, stream_indexed};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthetic scene config: {msg}")]
    BadConfig { msg: String },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Relight(#[from] RelightError),
    #[error(transparent)]
    Ad(#[from] crate::tape::AdError),
}

fn default_graph_ids() -> Vec<String> {
    // Spatially varying templates only; the homogeneous fallback is a
    // degenerate target for texture recovery.
    [
        "wood", "brick", "tile", "checker", "speckled", "fabric", "plaster", "metal",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_layout() -> GridLayout {
    GridLayout {
        cells_h: 2,
        cells_w: 2,
        env_h: 4,
        env_w: 8,
    }
}

fn default_rotations() -> Vec<f64> {
    (0..4)
        .map(|k| k as f64 * std::f64::consts::PI / 4.0)
        .collect()
}

fn default_log_scales() -> Vec<f64> {
    vec![0.0]
}

fn default_translations() -> Vec<f64> {
    vec![0.0, 0.5]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SynthConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub n_views: usize,
    pub n_parts: usize,
    /// Templates drawn per part, cycled; empty means the default set.
    pub graph_ids: Vec<String>,
    pub texture_res: usize,
    pub layout: GridLayout,
    /// Additive Gaussian pixel noise sigma on the photos.
    pub noise: f64,
    /// Translation magnitude of the geometry rasters, pixels.
    pub misalign_px: f64,
    /// Non-anchor exposures drawn log-uniform within this factor.
    pub exposure_spread: f64,
    pub light_spacing: f64,
    pub room_bounds_min: [f64; 3],
    pub room_bounds_max: [f64; 3],
    /// The UV transform grid ground truth is drawn from; keep in sync with
    /// the fitting configuration for recovery scoring.
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub translations: Vec<f64>,
    pub background: f64,
    pub camera_fov: f64,
    pub diffuse_only: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            image_h: 128,
            image_w: 128,
            n_views: 2,
            n_parts: 2,
            graph_ids: default_graph_ids(),
            texture_res: 128,
            layout: default_layout(),
            noise: 0.0,
            misalign_px: 0.0,
            exposure_spread: 0.25,
            light_spacing: 3.0,
            room_bounds_min: [0.0, 0.0, 0.0],
            room_bounds_max: [4.0, 2.5, 3.0],
            rotations: default_rotations(),
            log_scales: default_log_scales(),
            translations: default_translations(),
            background: 0.1,
            camera_fov: 1.0,
            diffuse_only: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TruthPart {
    pub part_id: String,
    pub graph_id: String,
    pub theta: Vec<f64>,
    pub phi: UvTransformParams,
    /// Geometry raster translation (dx, dy) in pixels.
    pub misalign: [i64; 2],
}

/// Everything an evaluation needs to score recovery.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthTruth {
    pub parts: Vec<TruthPart>,
    /// Per light source, RGB; source order matches the bundle's light list.
    pub light_coeffs: Vec<[f64; 3]>,
    pub exposures: Vec<f64>,
    pub seed: u64,
}

/// Integer-translated raster: out(x) = in(x - delta), zero outside.
fn shift_raster(t: &Tensor, dx: i64, dy: i64) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0] as i64, s[1] as i64, s[2]);
    let d = t.data();
    Tensor::from_fn(s, |i| {
        let pi = i / c;
        let ch = i % c;
        let (y, x) = (pi as i64 / w, pi as i64 % w);
        let (sy, sx) = (y - dy, x - dx);
        if sy < 0 || sy >= h || sx < 0 || sx >= w {
            0.0
        } else {
            d[((sy * w + sx) as usize) * c + ch]
        }
    })
}

fn rect_mask(h: usize, w: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 1], |i| {
        let (y, x) = (i / w, i % w);
        if y >= y0 && y < y1 && x >= x0 && x < x1 {
            1.0
        } else {
            0.0
        }
    })
}

/// UV that spans one texture tile across the rect, at pixel centers.
fn rect_uv(h: usize, w: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Tensor {
    let (rw, rh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    Tensor::from_fn(&[h, w, 2], |i| {
        let pi = i / 2;
        let (y, x) = (pi / w, pi % w);
        if i % 2 == 0 {
            (x as f64 - x0 as f64 + 0.5) / rw
        } else {
            (y as f64 - y0 as f64 + 0.5) / rh
        }
    })
}

fn flat_normals(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 })
}

/// A smooth nonnegative environment grid: ambient floor plus a squared
/// cosine lobe around a random direction, mildly varied per cell.
fn synth_light_grid(layout: GridLayout, rng: &mut rand_chacha::ChaCha8Rng) -> LightingGrid {
    let (dirs, _) = crate::render::direction_table(layout.env_h, layout.env_w);
    let base = [
        0.3 + rng.gen::<f64>() * 0.7,
        0.3 + rng.gen::<f64>() * 0.7,
        0.3 + rng.gen::<f64>() * 0.7,
    ];
    let lobe = {
        let az = rng.gen::<f64>() * std::f64::consts::TAU;
        let zen = rng.gen::<f64>() * 0.9;
        [zen.sin() * az.cos(), zen.sin() * az.sin(), zen.cos()]
    };
    let cells = layout.cells();
    let radiance = Tensor::from_fn(&[cells, layout.dirs(), 3], |i| {
        let c = i % 3;
        let j = (i / 3) % layout.dirs();
        let cell = i / (3 * layout.dirs());
        let d = dirs[j];
        let cosine = (d[0] * lobe[0] + d[1] * lobe[1] + d[2] * lobe[2]).max(0.0);
        let cell_gain = 0.9 + 0.2 * cell as f64 / cells.max(2) as f64;
        base[c] * (0.35 + 0.65 * cosine * cosine) * cell_gain
    });
    LightingGrid::new(
        layout.cells_h,
        layout.cells_w,
        layout.env_h,
        layout.env_w,
        radiance,
    )
    .expect("constructed grid is valid")
}

struct PartGeometry {
    mask_photo: Tensor,
    uv_true: Tensor,
    misalign: (i64, i64),
}

fn layout_parts(
    cfg: &SynthConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<PartGeometry>, SynthError> {
    let (h, w) = (cfg.image_h, cfg.image_w);
    let margin = (cfg.misalign_px.abs().ceil() as usize) + 2;
    let strip = w / cfg.n_parts;
    if strip <= 2 * margin + 4 || h <= 2 * margin + 4 {
        return Err(SynthError::BadConfig {
            msg: format!(
                "{}x{} too small for {} parts with {}px misalignment",
                h, w, cfg.n_parts, cfg.misalign_px
            ),
        });
    }
    let mut out = Vec::with_capacity(cfg.n_parts);
    for p in 0..cfg.n_parts {
        let x0 = p * strip + margin;
        let x1 = (p + 1) * strip - margin;
        let (y0, y1) = (margin, h - margin);
        let ang = rng.gen::<f64>() * std::f64::consts::TAU;
        let (dx, dy) = (
            (cfg.misalign_px * ang.cos()).round() as i64,
            (cfg.misalign_px * ang.sin()).round() as i64,
        );
        out.push(PartGeometry {
            mask_photo: rect_mask(h, w, x0, x1, y0, y1),
            uv_true: rect_uv(h, w, x0, x1, y0, y1),
            misalign: (dx, dy),
        });
    }
    Ok(out)
}

/// Renders one part region in the photo frame under a composed grid.
fn render_region(
    mask: &Tensor,
    uv: &Tensor,
    normals_geo: &Tensor,
    view_dirs: &Tensor,
    grid: &LightingGrid,
    template: &GraphTemplate,
    theta: &[f64],
    phi: &UvTransformParams,
    exposure: f64,
    texture_res: usize,
    diffuse_only: bool,
) -> Result<Tensor, SynthError> {
    let geom = Arc::new(ShadeGeometry::for_full_image(mask, view_dirs, grid)?);
    let ctx = PartRenderCtx {
        geom,
        lighting: grid.radiance.clone(),
        uv: uv.clone(),
        normals_geo: normals_geo.clone(),
        exposure,
        photo: Tensor::zeros(mask.shape()),
        weighted_mask: mask.clone(),
        texture_res,
        diffuse_only,
    };
    let tex = crate::fit::eval_textures(template, theta, texture_res)?;
    let tape = Tape::new();
    let alb = tape.constant(tex.albedo)?;
    let nrm = tape.constant(tex.normals)?;
    let rgh = tape.constant(tex.roughness)?;
    let img = render_with_textures(&tape, &ctx, alb, nrm, Roughness::Texture(rgh), phi)?;
    Ok(tape.value(img))
}

/// Builds a scene bundle plus its ground truth record.
pub fn generate(cfg: &SynthConfig) -> Result<(SceneBundle, SynthTruth), SynthError> {
    if cfg.n_parts == 0 || cfg.n_views == 0 {
        return Err(SynthError::BadConfig {
            msg: "need at least one part and one view".into(),
        });
    }
    let graph_ids = if cfg.graph_ids.is_empty() {
        default_graph_ids()
    } else {
        cfg.graph_ids.clone()
    };
    for id in &graph_ids {
        if matgraph::find_template(id).is_none() {
            return Err(SynthError::BadConfig {
                msg: format!("unknown graph id {id:?}"),
            });
        }
    }
    let (h, w) = (cfg.image_h, cfg.image_w);
    let mut rng = stream(cfg.seed, "synth.scene");
    let parts_geo = layout_parts(cfg, &mut rng)?;

    // Light sources: ceiling grid plus the mandatory env window.
    let positions =
        place_ceiling_lights(cfg.room_bounds_min, cfg.room_bounds_max, cfg.light_spacing)?;
    let n_sources = positions.len() + 1;
    let mut grids: Vec<LightingGrid> = (0..n_sources)
        .map(|s| {
            let mut lr = stream_indexed(cfg.seed, "synth.light", s as u64);
            synth_light_grid(cfg.layout, &mut lr)
        })
        .collect();
    let coeffs: Vec<[f64; 3]> = (0..n_sources)
        .map(|_| {
            [
                0.5 + rng.gen::<f64>(),
                0.5 + rng.gen::<f64>(),
                0.5 + rng.gen::<f64>(),
            ]
        })
        .collect();

    // Ground-truth materials and UV transforms on the configured grid.
    let mut truth_parts = Vec::with_capacity(cfg.n_parts);
    for (p, geo) in parts_geo.iter().enumerate() {
        let graph_id = graph_ids[p % graph_ids.len()].clone();
        let template = matgraph::find_template(&graph_id).expect("checked above");
        let theta = matgraph::sample_random_params(template, cfg.seed ^ (p as u64 + 1) << 8);
        let phi = UvTransformParams {
            rotation: cfg.rotations[rng.gen_range(0..cfg.rotations.len())],
            log_scale: cfg.log_scales[rng.gen_range(0..cfg.log_scales.len())],
            translation: [
                cfg.translations[rng.gen_range(0..cfg.translations.len())],
                cfg.translations[rng.gen_range(0..cfg.translations.len())],
            ],
        };
        truth_parts.push(TruthPart {
            part_id: format!("part{p}"),
            graph_id,
            theta,
            phi,
            misalign: [geo.misalign.0, geo.misalign.1],
        });
    }

    let exposures: Vec<f64> = (0..cfg.n_views)
        .map(|v| {
            if v == 0 {
                1.0
            } else {
                let t = rng.gen::<f64>() * 2.0 - 1.0;
                (1.0 + cfg.exposure_spread).powf(t)
            }
        })
        .collect();

    let view_dirs = view_dirs_from_fov(h, w, cfg.camera_fov);
    let normals = flat_normals(h, w);

    // Render photos; if anything clips, dim every source and re-render so
    // the 8-bit photo encoding stays faithful.
    let mut photos: Vec<Tensor> = Vec::new();
    for _attempt in 0..2 {
        let composed = compose(&grids, &coeffs)?;
        photos.clear();
        for v in 0..cfg.n_views {
            let mut img = vec![0.0; h * w * 3];
            let mut covered = vec![false; h * w];
            for (geo, truth) in parts_geo.iter().zip(&truth_parts) {
                let template = matgraph::find_template(&truth.graph_id).unwrap();
                let rendered = render_region(
                    &geo.mask_photo,
                    &geo.uv_true,
                    &normals,
                    &view_dirs,
                    &composed,
                    template,
                    &truth.theta,
                    &truth.phi,
                    exposures[v],
                    cfg.texture_res,
                    cfg.diffuse_only,
                )?;
                let rd = rendered.data();
                let md = geo.mask_photo.data();
                for pi in 0..h * w {
                    if md[pi] > 0.0 {
                        covered[pi] = true;
                        for c in 0..3 {
                            img[pi * 3 + c] = rd[pi * 3 + c];
                        }
                    }
                }
            }
            for pi in 0..h * w {
                if !covered[pi] {
                    for c in 0..3 {
                        img[pi * 3 + c] = cfg.background * exposures[v];
                    }
                }
            }
            photos.push(Tensor::new(vec![h, w, 3], img).expect("sized"));
        }
        let peak = photos
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .fold(0.0f64, f64::max);
        if peak <= 0.95 {
            break;
        }
        let gain = 0.9 / peak;
        grids = grids.iter().map(|g| g.scaled([gain, gain, gain])).collect();
    }

    // Additive pixel noise via Box-Muller, clamped to valid radiance.
    if cfg.noise > 0.0 {
        for (v, photo) in photos.iter_mut().enumerate() {
            let mut nr = stream_indexed(cfg.seed, "synth.noise", v as u64);
            let noisy: Vec<f64> = photo
                .data()
                .iter()
                .map(|&x| {
                    let u1: f64 = nr.gen::<f64>().max(1e-12);
                    let u2: f64 = nr.gen();
                    let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    (x + cfg.noise * g).clamp(0.0, 1.0)
                })
                .collect();
            *photo = Tensor::new(photo.shape().to_vec(), noisy).expect("same size");
        }
    }

    let composed = compose(&grids, &coeffs)?;
    let views: Vec<ViewRecord> = (0..cfg.n_views)
        .map(|v| ViewRecord {
            photo: photos[v].clone(),
            normals_inv: normals.clone(),
            lighting_inv: composed.clone(),
            camera_pose: [
                [1.0, 0.0, 0.0, 1.5 * v as f64],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            exposure: 1.0,
            albedo_inv: None,
            roughness_inv: None,
        })
        .collect();

    let all_photo_masks: Vec<Tensor> = parts_geo.iter().map(|g| g.mask_photo.clone()).collect();
    let parts: Vec<PartRecord> = parts_geo
        .iter()
        .zip(&truth_parts)
        .map(|(geo, truth)| {
            let (dx, dy) = geo.misalign;
            let mask_geo = shift_raster(&geo.mask_photo, dx, dy);
            let uv_geo = shift_raster(&geo.uv_true, dx, dy);
            let per_view: BTreeMap<usize, PartView> = (0..cfg.n_views)
                .map(|v| {
                    (
                        v,
                        PartView {
                            mask_geo: mask_geo.clone(),
                            mask_photo_candidates: all_photo_masks.clone(),
                            uv_geo: uv_geo.clone(),
                            normals_geo: normals.clone(),
                        },
                    )
                })
                .collect();
            PartRecord {
                part_id: truth.part_id.clone(),
                semantic_label: None,
                per_view,
            }
        })
        .collect();

    let lights: Vec<LightRecord> = (0..n_sources)
        .map(|s| {
            let per_view: BTreeMap<usize, LightingGrid> =
                (0..cfg.n_views).map(|v| (v, grids[s].clone())).collect();
            LightRecord {
                light_id: if s + 1 < n_sources {
                    format!("ceiling{s}")
                } else {
                    "window".to_string()
                },
                kind: if s + 1 < n_sources {
                    LightKind::Area
                } else {
                    LightKind::EnvWindow
                },
                per_view,
            }
        })
        .collect();

    let bundle = SceneBundle {
        camera_fov: cfg.camera_fov,
        room_bounds_min: cfg.room_bounds_min,
        room_bounds_max: cfg.room_bounds_max,
        layout: cfg.layout,
        views,
        parts,
        lights,
    };
    let truth = SynthTruth {
        parts: truth_parts,
        light_coeffs: coeffs,
        exposures,
        seed: cfg.seed,
    };
    Ok((bundle, truth))
}

fn compose(grids: &[LightingGrid], coeffs: &[[f64; 3]]) -> Result<LightingGrid, SynthError> {
    let mut total = grids[0].scaled(coeffs[0]);
    for (g, &c) in grids.iter().zip(coeffs).skip(1) {
        total = total.add(&g.scaled(c))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{mask_bbox, optimize_warp, soft_iou};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_h: 48,
            image_w: 48,
            n_views: 2,
            n_parts: 2,
            texture_res: 64,
            graph_ids: vec!["wood".into(), "checker".into()],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generated_bundle_validates_and_round_trips() {
        let cfg = SynthConfig {
            misalign_px: 3.0,
            seed: 5,
            ..small_cfg()
        };
        let (bundle, truth) = generate(&cfg).unwrap();
        assert_eq!(bundle.views.len(), 2);
        assert_eq!(bundle.parts.len(), 2);
        assert_eq!(truth.parts.len(), 2);
        assert_eq!(truth.light_coeffs.len(), bundle.lights.len());
        assert_eq!(truth.exposures[0], 1.0);

        // Photos stay inside the 8-bit-encodable range.
        for v in &bundle.views {
            assert!(v.photo.data().iter().all(|&x| (0.0..=0.95).contains(&x)));
        }

        // Disk round trip passes full validation.
        let dir = tempfile::tempdir().unwrap();
        crate::bundle::save_bundle(dir.path(), &bundle).unwrap();
        let back = crate::bundle::load_bundle(dir.path()).unwrap();
        assert_eq!(back.parts.len(), 2);
        assert_eq!(back.lights.len(), bundle.lights.len());

        // Truth record serializes losslessly.
        let text = serde_json::to_string(&truth).unwrap();
        let t2: SynthTruth = serde_json::from_str(&text).unwrap();
        assert_eq!(t2.parts[0].theta, truth.parts[0].theta);
        assert_eq!(t2.light_coeffs, truth.light_coeffs);
    }

    #[test]
    fn same_seed_is_bit_identical_and_noise_perturbs() {
        let cfg = small_cfg();
        let (a, _) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.photo.data(), vb.photo.data());
        }
        let noisy_cfg = SynthConfig {
            noise: 0.01,
            ..small_cfg()
        };
        let (c, _) = generate(&noisy_cfg).unwrap();
        assert_ne!(a.views[0].photo.data(), c.views[0].photo.data());
        // Geometry rasters are untouched by photo noise.
        assert_eq!(
            a.parts[0].per_view[&0].mask_geo.data(),
            c.parts[0].per_view[&0].mask_geo.data()
        );
    }

    #[test]
    fn misalignment_shifts_geometry_and_warp_recovers() {
        let cfg = SynthConfig {
            misalign_px: 5.0,
            seed: 9,
            n_parts: 1,
            image_h: 64,
            image_w: 64,
            ..small_cfg()
        };
        let (bundle, truth) = generate(&cfg).unwrap();
        let pv = &bundle.parts[0].per_view[&0];
        let photo_mask = &pv.mask_photo_candidates[0];
        let [dx, dy] = truth.parts[0].misalign;
        assert!(dx != 0 || dy != 0);

        // The geometry mask is exactly the translated photo mask.
        let shifted = shift_raster(photo_mask, dx, dy);
        assert_eq!(shifted.data(), pv.mask_geo.data());

        // Alignment refinement recovers high overlap from the offset start.
        let (_, iou) = optimize_warp(&pv.mask_geo, photo_mask).unwrap();
        assert!(iou >= 0.95, "refined iou {iou}");
        let centers = mask_bbox(&pv.mask_geo).unwrap();
        let centers_photo = mask_bbox(photo_mask).unwrap();
        assert!((centers.0[0] - centers_photo.0[0] - dx as f64).abs() < 1e-9);
        assert!(soft_iou(&pv.mask_geo, photo_mask) > 0.0);
    }

    #[test]
    fn photos_differ_between_parts_and_background() {
        let (bundle, _) = generate(&small_cfg()).unwrap();
        let photo = &bundle.views[0].photo;
        let m0 = &bundle.parts[0].per_view[&0].mask_photo_candidates[0];
        let m1 = &bundle.parts[0].per_view[&0].mask_photo_candidates[1];
        let mean_under = |m: &Tensor| {
            let (mut s, mut n) = (0.0, 0.0);
            for (pi, &mv) in m.data().iter().enumerate() {
                if mv > 0.0 {
                    s += photo.data()[pi * 3];
                    n += 1.0;
                }
            }
            s / n
        };
        let (a, b) = (mean_under(m0), mean_under(m1));
        // Different materials produce visibly different regions.
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");
    }
}
