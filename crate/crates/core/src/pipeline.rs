//! End-to-end scene pipeline. Loads a bundle from disk, aligns every part
//! into its photos, picks and fits a material per part, solves the global
//! light mix and per-view exposures, rescales the fitted materials under the
//! solved lighting, and writes assets, renders, and a JSON report.
//!
//! Every stage is a pure function of the bundle and the configuration, so
//! re-running a command (or re-rendering from saved assets) reproduces the
//! pipeline's own outputs byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, AlignError, AlignMode, AlignResult, ViewCandidate, ViewScore, WarpBoxes};
use crate::bundle::{
    self, BundleError, FittedAssets, FittedPart, PartView, SceneBundle, ViewRecord,
};
use crate::fit::{
    self, ExemplarScore, ExemplarTally, FeatureBank, FitError, FitResult, GraphSelection,
    GraphSelectionConfig, HomogeneousMaterial, LossWeights, MedianSource, OptimizeConfig,
    ReoptimizeConfig, Roughness,
};
use crate::matgraph;
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::relight::{self, ExposureSet, LightCoeffs, RelightError, ViewSolveInputs};
use crate::render::{self, LightingGrid, RenderError, ShadeGeometry, UvTransformParams};
use crate::synth::{self, SynthConfig, SynthError, SynthTruth};
use crate::tape::{AdError, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bundle: {0}")]
    Bundle(#[from] BundleError),
    #[error("alignment: {0}")]
    Align(#[from] AlignError),
    #[error("fitting: {0}")]
    Fit(#[from] FitError),
    #[error("rendering: {0}")]
    Render(#[from] RenderError),
    #[error("lighting: {0}")]
    Relight(#[from] RelightError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("synthesis: {0}")]
    Synth(#[from] SynthError),
    #[error("autodiff: {0}")]
    Ad(#[from] AdError),
    #[error("view {0} does not exist in the bundle")]
    UnknownView(usize),
    #[error("part {0:?} does not exist in the bundle")]
    UnknownPart(String),
    #[error("view {view} has no albedo/roughness prediction maps; the inverse-render median baseline needs them")]
    MissingPredictions { view: usize },
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs for the full fitting pipeline; serialized as camelCase JSON. The
/// defaults match the production settings, tests shrink them for speed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    /// Side length of the square textures evaluated while fitting.
    pub fit_texture_res: usize,
    /// Alternating light/exposure refinement passes.
    pub lighting_rounds: usize,
    /// Statistics distance below which two views of a part agree.
    pub view_consensus_tau: f64,
    pub diffuse_only: bool,
    pub loss_weights: LossWeights,
    pub optimize: OptimizeConfig,
    pub reoptimize: ReoptimizeConfig,
    pub selection: GraphSelectionConfig,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            seed: 0,
            jobs: 0,
            fit_texture_res: 128,
            lighting_rounds: 2,
            view_consensus_tau: 0.5,
            diffuse_only: false,
            loss_weights: LossWeights::default(),
            optimize: OptimizeConfig::default(),
            reoptimize: ReoptimizeConfig::default(),
            selection: GraphSelectionConfig::default(),
        }
    }
}

pub fn load_pipeline_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
}

/// Baseline material estimators that skip graph fitting entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    PixelMedian,
    InvRenderMedian,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::PixelMedian => "pixelMedian",
            BaselineMethod::InvRenderMedian => "invRenderMedian",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<BaselineMethod, PipelineError> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        match norm.as_str() {
            "pixelmedian" => Ok(BaselineMethod::PixelMedian),
            "invrendermedian" => Ok(BaselineMethod::InvRenderMedian),
            _ => Err(PipelineError::Invalid(format!(
                "unknown baseline method {s:?}; expected pixelMedian or invRenderMedian"
            ))),
        }
    }
}

/// Deterministic per-part seed; parts are keyed by manifest order so the
/// exemplars command reproduces the pipeline's selection exactly.
pub fn part_seed(seed: u64, part_index: usize) -> u64 {
    seed ^ ((part_index as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageRecord {
    pub stage: String,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LightingReport {
    pub light_ids: Vec<String>,
    pub coeffs: LightCoeffs,
    pub exposures: ExposureSet,
    /// Mean squared residual after each refinement round.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PartReport {
    pub part_id: String,
    /// "optimize", "medianFallback", or "geoMedianFallback".
    pub mode: String,
    pub selected_view: usize,
    pub view_scores: Vec<ViewScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_candidate: Option<usize>,
    pub match_soft_iou: f64,
    pub refined_iou: f64,
    /// Pixels whose warped normals agree with the estimated ones.
    pub valid_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_tallies: Option<Vec<ExemplarTally>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo_scale: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roughness_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homogeneous: Option<HomogeneousMaterial>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitReport {
    pub method: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// Pixels count as reliable where the normal-agreement weight exceeds this.
    pub weight_valid_threshold: f64,
    /// Roughness assigned by the median fallbacks.
    pub median_fallback_roughness: f64,
    pub parts: Vec<PartReport>,
    pub lighting: LightingReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExemplarsReport {
    pub part_id: String,
    pub selected_view: usize,
    pub graph_id: String,
    pub k: usize,
    pub best_distance: f64,
    pub tallies: Vec<ExemplarTally>,
    pub ranked: Vec<ExemplarScore>,
}

fn mode_name(mode: AlignMode) -> &'static str {
    match mode {
        AlignMode::Optimize => "optimize",
        AlignMode::MedianFallback => "medianFallback",
        AlignMode::GeoMedianFallback => "geoMedianFallback",
    }
}

// ---------------------------------------------------------------------------
// Crop bookkeeping
// ---------------------------------------------------------------------------

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

/// Tight box around the mask support plus padding, clamped to the image.
fn mask_rect(mask: &Tensor, pad: usize) -> Option<Rect> {
    let s = mask.shape();
    let (h, w) = (s[0], s[1]);
    let d = mask.data();
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..h {
        for x in 0..w {
            if d[y * w + x] > 0.0 {
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
    Some(Rect {
        y0: y0.saturating_sub(pad),
        y1: (y1 + 1 + pad).min(h),
        x0: x0.saturating_sub(pad),
        x1: (x1 + 1 + pad).min(w),
    })
}

fn crop(t: &Tensor, r: Rect) -> Tensor {
    let s = t.shape();
    let (w, c) = (s[1], s[2]);
    let d = t.data();
    let (ch, cw) = (r.y1 - r.y0, r.x1 - r.x0);
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in r.y0..r.y1 {
        let row = (y * w + r.x0) * c;
        out.extend_from_slice(&d[row..row + cw * c]);
    }
    Tensor::new(vec![ch, cw, c], out).expect("sized above")
}

fn crop_cells(cells: &[u32], w: usize, r: Rect) -> Vec<u32> {
    let mut out = Vec::with_capacity((r.y1 - r.y0) * (r.x1 - r.x0));
    for y in r.y0..r.y1 {
        out.extend_from_slice(&cells[y * w + r.x0..y * w + r.x1]);
    }
    out
}

/// Writes crop pixels with mask support into the full-frame RGB canvas.
fn paste_masked(canvas: &mut [f64], w: usize, img: &Tensor, mask: &Tensor, r: Rect) {
    let cw = r.x1 - r.x0;
    let (id, md) = (img.data(), mask.data());
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let ci = (y - r.y0) * cw + (x - r.x0);
            if md[ci] > 0.0 {
                let dst = (y * w + x) * 3;
                canvas[dst..dst + 3].copy_from_slice(&id[ci * 3..ci * 3 + 3]);
            }
        }
    }
}

fn flat_normal_map(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Alignment plumbing
// ---------------------------------------------------------------------------

/// Everything alignment produces for one part in one view. For unmatched
/// parts the "aligned" rasters are the geometry-frame originals and the mode
/// is the geometry median fallback.
#[derive(Clone, Debug)]
struct ViewAlignment {
    matched: Option<usize>,
    soft_iou: f64,
    refined_iou: f64,
    boxes: Option<WarpBoxes>,
    /// Binary support of the aligned mask, before agreement weighting.
    mask_binary: Tensor,
    result: AlignResult,
    normals_aligned: Tensor,
}

fn align_part_view(view: &ViewRecord, pv: &PartView) -> Result<ViewAlignment, PipelineError> {
    let s = view.photo.shape();
    let (h, w) = (s[0], s[1]);
    let outcome = align::match_instances(
        std::slice::from_ref(&pv.mask_geo),
        &pv.mask_photo_candidates,
        None,
        None,
    )
    .pop()
    .expect("one geometry mask in, one outcome out");
    if outcome.matched {
        let ci = outcome
            .photo_index
            .expect("matched outcome names a candidate");
        let cand = &pv.mask_photo_candidates[ci];
        let (boxes, refined_iou) = align::optimize_warp(&pv.mask_geo, cand)?;
        let base = align::warp_geo_to_photo(&pv.uv_geo, &pv.mask_geo, cand, &boxes);
        let mask_binary = base.mask_aligned.clone();
        let normals_aligned = align::warp_geo_raster_to_photo(&pv.normals_geo, h, w, &boxes);
        let (weight, valid, _) =
            align::weight_map(&view.normals_inv, &normals_aligned, &mask_binary)?;
        let result = base.with_weights(weight, valid, true);
        Ok(ViewAlignment {
            matched: Some(ci),
            soft_iou: outcome.soft_iou,
            refined_iou,
            boxes: Some(boxes),
            mask_binary,
            result,
            normals_aligned,
        })
    } else {
        // No photo mask overlaps the geometry: keep the geometry frame.
        let result = AlignResult {
            mask_aligned: pv.mask_geo.clone(),
            uv_aligned: pv.uv_geo.clone(),
            weight: Tensor::full(&[h, w, 1], 1.0),
            valid_count: 0,
            mode: AlignMode::GeoMedianFallback,
        };
        Ok(ViewAlignment {
            matched: None,
            soft_iou: outcome.soft_iou,
            refined_iou: 0.0,
            boxes: None,
            mask_binary: pv.mask_geo.clone(),
            result,
            normals_aligned: pv.normals_geo.clone(),
        })
    }
}

/// Alignment across all views of one part plus the view chosen for fitting.
struct PartPlan {
    alignments: BTreeMap<usize, ViewAlignment>,
    selected_view: usize,
    view_scores: Vec<ViewScore>,
}

fn plan_part(
    bundle: &SceneBundle,
    part: &bundle::PartRecord,
    tau: f64,
) -> Result<PartPlan, PipelineError> {
    let (h, w) = bundle.image_dims();
    let mut alignments = BTreeMap::new();
    for (&vi, pv) in &part.per_view {
        alignments.insert(vi, align_part_view(&bundle.views[vi], pv)?);
    }
    // Candidates cover every view so score indices equal view indices;
    // unmatched views get an empty mask and fail the visibility filter.
    let empty = Tensor::zeros(&[h, w, 1]);
    let candidates: Vec<ViewCandidate> = (0..bundle.views.len())
        .map(|vi| {
            let (mask, stats) = match alignments.get(&vi) {
                Some(va) if va.matched.is_some() => {
                    let stats = align::part_stats(&bundle.views[vi].photo, &empty, &va.mask_binary);
                    (va.mask_binary.clone(), stats)
                }
                _ => (empty.clone(), vec![0.0; 8]),
            };
            ViewCandidate {
                pose: bundle.views[vi].camera_pose,
                mask_photo: mask,
                stats,
            }
        })
        .collect();
    match align::select_view(&candidates, tau) {
        Ok((vi, view_scores)) => Ok(PartPlan {
            alignments,
            selected_view: vi,
            view_scores,
        }),
        Err(AlignError::PartNotVisible) => {
            // Matched nowhere: fall back to the first view with geometry.
            let vi = part
                .per_view
                .iter()
                .find(|(_, pv)| pv.mask_geo.data().iter().any(|&m| m > 0.0))
                .map(|(&vi, _)| vi)
                .ok_or_else(|| {
                    PipelineError::Invalid(format!(
                        "part {:?} has no geometry pixels in any view",
                        part.part_id
                    ))
                })?;
            Ok(PartPlan {
                alignments,
                selected_view: vi,
                view_scores: Vec::new(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// Rendering from rasters and materials
// ---------------------------------------------------------------------------

struct CtxRasters<'a> {
    photo: &'a Tensor,
    uv: &'a Tensor,
    normals: &'a Tensor,
    /// Binary shading support.
    support: &'a Tensor,
    /// Loss mask (support times agreement weight).
    weighted: &'a Tensor,
}

/// Crops all rasters to the support box and assembles a render context.
fn part_ctx(
    r: CtxRasters,
    view_dirs: &Tensor,
    cells: &[u32],
    grid: &LightingGrid,
    exposure: f64,
    texture_res: usize,
    diffuse_only: bool,
) -> Result<(fit::PartRenderCtx, Rect), PipelineError> {
    let rect = mask_rect(r.support, 2)
        .ok_or_else(|| PipelineError::Invalid("empty part support".into()))?;
    let w = r.support.shape()[1];
    let mask_c = crop(r.support, rect);
    let dirs_c = crop(view_dirs, rect);
    let geom = ShadeGeometry::new(&mask_c, &dirs_c, crop_cells(cells, w, rect), grid)?;
    Ok((
        fit::PartRenderCtx {
            geom: Arc::new(geom),
            lighting: grid.radiance.clone(),
            uv: crop(r.uv, rect),
            normals_geo: crop(r.normals, rect),
            exposure,
            photo: crop(r.photo, rect),
            weighted_mask: crop(r.weighted, rect),
            texture_res,
            diffuse_only,
        },
        rect,
    ))
}

enum MaterialRef<'a> {
    Fitted(&'a FitResult),
    Homogeneous(&'a HomogeneousMaterial),
}

/// Shades one crop with a fixed material. Fitted materials render with their
/// reoptimization scales folded in and a constant roughness, matching the
/// exported texture assets.
fn render_material_crop(
    ctx: &fit::PartRenderCtx,
    mat: &MaterialRef,
) -> Result<Tensor, PipelineError> {
    let tape = Tape::new();
    let (ch, cw) = (ctx.photo.shape()[0], ctx.photo.shape()[1]);
    let out = match mat {
        MaterialRef::Fitted(f) => {
            let template = matgraph::find_template(&f.graph_id).ok_or_else(|| {
                PipelineError::Invalid(format!("unknown graph id {:?}", f.graph_id))
            })?;
            let tex = fit::eval_textures(template, &f.theta, ctx.texture_res)?;
            let albedo = Tensor::from_fn(tex.albedo.shape(), |i| {
                (tex.albedo.data()[i] * f.albedo_scale[i % 3]).clamp(0.0, 1.0)
            });
            let rough = (f.roughness_mean * f.roughness_scale).clamp(0.01, 1.0);
            let alb = tape.constant(albedo)?;
            let nrm = tape.constant(tex.normals)?;
            let rgh = tape.constant(Tensor::full(&[ch, cw, 1], rough))?;
            fit::render_with_textures(&tape, ctx, alb, nrm, Roughness::Map(rgh), &f.phi)?
        }
        MaterialRef::Homogeneous(hm) => {
            let alb = tape.constant(Tensor::from_fn(&[4, 4, 3], |i| {
                hm.albedo[i % 3].clamp(0.0, 1.0)
            }))?;
            let nrm = tape.constant(flat_normal_map(4, 4))?;
            let rgh = tape.constant(Tensor::full(&[ch, cw, 1], hm.roughness))?;
            fit::render_with_textures(
                &tape,
                ctx,
                alb,
                nrm,
                Roughness::Map(rgh),
                &UvTransformParams::identity(),
            )?
        }
    };
    Ok(tape.value(out))
}

fn material_of(fp: &FittedPart) -> Result<MaterialRef<'_>, PipelineError> {
    if let Some(f) = &fp.fit {
        Ok(MaterialRef::Fitted(f))
    } else if let Some(hm) = &fp.homogeneous {
        Ok(MaterialRef::Homogeneous(hm))
    } else {
        Err(PipelineError::Invalid(format!(
            "part {:?} carries no material",
            fp.part_id
        )))
    }
}

/// Per-view lighting grid rebuilt from the per-source grids and solved mix.
fn compose_for_view(
    bundle: &SceneBundle,
    coeffs: &LightCoeffs,
    view: usize,
) -> Result<LightingGrid, PipelineError> {
    let grids: Vec<LightingGrid> = bundle
        .lights
        .iter()
        .map(|l| {
            l.per_view.get(&view).cloned().ok_or_else(|| {
                PipelineError::Invalid(format!(
                    "light {:?} has no grid for view {view}",
                    l.light_id
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(relight::compose_global_lighting(&grids, coeffs)?)
}

/// Renders one full view from saved assets: each part is shaded over its
/// aligned support (geometry support when unmatched) and pasted onto a black
/// canvas, in manifest part order.
fn render_view_full(
    bundle: &SceneBundle,
    assets: &FittedAssets,
    aligns: &[Option<ViewAlignment>],
    view: usize,
    composed: Option<&LightingGrid>,
    view_dirs: &Tensor,
    cells: &[u32],
) -> Result<Tensor, PipelineError> {
    let (h, w) = bundle.image_dims();
    let grid = composed.unwrap_or(&bundle.views[view].lighting_inv);
    let exposure = assets.exposures.values[view];
    let mut canvas = vec![0.0; h * w * 3];
    for (pi, part) in bundle.parts.iter().enumerate() {
        let Some(va) = &aligns[pi] else { continue };
        let fp = assets
            .parts
            .iter()
            .find(|f| f.part_id == part.part_id)
            .ok_or_else(|| PipelineError::UnknownPart(part.part_id.clone()))?;
        let flat;
        let normals = if fp.flat_normals {
            flat = flat_normal_map(h, w);
            &flat
        } else {
            &va.normals_aligned
        };
        let (ctx, rect) = part_ctx(
            CtxRasters {
                photo: &bundle.views[view].photo,
                uv: &va.result.uv_aligned,
                normals,
                support: &va.mask_binary,
                weighted: &va.mask_binary,
            },
            view_dirs,
            cells,
            grid,
            exposure,
            fp.texture_res,
            fp.diffuse_only,
        )?;
        let img = render_material_crop(&ctx, &material_of(fp)?)?;
        let mask_c = crop(&va.mask_binary, rect);
        paste_masked(&mut canvas, w, &img, &mask_c, rect);
    }
    Ok(Tensor::new(vec![h, w, 3], canvas).expect("sized above"))
}

/// Recomputed alignment of every part for one view; `None` where the part
/// has no geometry in that view.
fn view_alignments(
    bundle: &SceneBundle,
    view: usize,
) -> Result<Vec<Option<ViewAlignment>>, PipelineError> {
    bundle
        .parts
        .iter()
        .map(|part| match part.per_view.get(&view) {
            Some(pv) => align_part_view(&bundle.views[view], pv).map(Some),
            None => Ok(None),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Shared io helpers
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", parent.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Invalid(format!("serialize: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn render_paths(dir: &Path, view: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("renders/v{view}.pfm")),
        dir.join(format!("renders/v{view}.png")),
    )
}

fn write_view_render(dir: &Path, view: usize, img: &Tensor) -> Result<(), PipelineError> {
    let (pfm, png) = render_paths(dir, view);
    if let Some(parent) = pfm.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", parent.display())))?;
    }
    bundle::save_float_map(&pfm, img)?;
    bundle::save_photo_png(&png, img)?;
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Invalid(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct PartMaterial {
    selection: Option<GraphSelection>,
    fit: Option<FitResult>,
    homogeneous: Option<HomogeneousMaterial>,
}

fn assemble_parts(
    bundle: &SceneBundle,
    plans: &[PartPlan],
    materials: &[PartMaterial],
    cfg: &PipelineConfig,
) -> Vec<FittedPart> {
    bundle
        .parts
        .iter()
        .enumerate()
        .map(|(pi, part)| FittedPart {
            part_id: part.part_id.clone(),
            mode: mode_name(plans[pi].alignments[&plans[pi].selected_view].result.mode).into(),
            selected_view: plans[pi].selected_view,
            fit: materials[pi].fit.clone(),
            homogeneous: materials[pi].homogeneous.clone(),
            texture_res: cfg.fit_texture_res,
            flat_normals: false,
            diffuse_only: cfg.diffuse_only,
        })
        .collect()
}

fn save_png_at(path: &Path, img: &Tensor) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", parent.display())))?;
    }
    Ok(bundle::save_photo_png(path, img)?)
}

/// Runs the full pipeline and writes report.json, fitted assets, and one
/// linear PFM plus preview PNG per view under `out_dir`.
pub fn run_fit(
    bundle_dir: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<FitReport, PipelineError> {
    let bundle = bundle::load_bundle(bundle_dir)?;
    let pool = thread_pool(cfg.jobs)?;
    pool.install(|| fit_scene(&bundle, cfg, out_dir))
}

fn fit_scene(
    bundle: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<FitReport, PipelineError> {
    let (h, w) = bundle.image_dims();
    let n_views = bundle.views.len();
    let bank = FeatureBank::shared();
    let view_dirs = render::view_dirs_from_fov(h, w, bundle.camera_fov);
    let cells = render::cell_of_pixel_map(h, w, bundle.layout.cells_h, bundle.layout.cells_w)?;

    // Stage 1: match, warp, and weight every part in every view, then pick
    // the fitting view per part.
    let plans: Vec<PartPlan> = bundle
        .parts
        .par_iter()
        .map(|part| plan_part(bundle, part, cfg.view_consensus_tau))
        .collect::<Result<_, _>>()?;
    let matched_views: usize = plans
        .iter()
        .map(|p| {
            p.alignments
                .values()
                .filter(|va| va.matched.is_some())
                .count()
        })
        .sum();

    // Stage 2: per part, choose a template by exemplar vote and fit it, or
    // take the median fallback when alignment is unreliable.
    let materials: Vec<PartMaterial> = bundle
        .parts
        .par_iter()
        .enumerate()
        .map(|(pi, _part)| -> Result<PartMaterial, PipelineError> {
            let plan = &plans[pi];
            let vi = plan.selected_view;
            let va = &plan.alignments[&vi];
            let view = &bundle.views[vi];
            match va.result.mode {
                AlignMode::Optimize => {
                    let (ctx, _) = part_ctx(
                        CtxRasters {
                            photo: &view.photo,
                            uv: &va.result.uv_aligned,
                            normals: &va.normals_aligned,
                            support: &va.mask_binary,
                            weighted: &va.result.mask_aligned,
                        },
                        &view_dirs,
                        &cells,
                        &view.lighting_inv,
                        view.exposure,
                        cfg.fit_texture_res,
                        cfg.diffuse_only,
                    )?;
                    let sel = fit::select_graph(
                        &ctx,
                        matgraph::list_collection(),
                        &cfg.selection,
                        bank,
                        part_seed(cfg.seed, pi),
                    )?;
                    let template = matgraph::find_template(&sel.graph_id)
                        .expect("selection returns a known id");
                    let fitted = fit::optimize_material(
                        &ctx,
                        template,
                        &sel.best_theta,
                        &cfg.loss_weights,
                        &cfg.optimize,
                        bank,
                    )?;
                    Ok(PartMaterial {
                        selection: Some(sel),
                        fit: Some(fitted),
                        homogeneous: None,
                    })
                }
                AlignMode::MedianFallback | AlignMode::GeoMedianFallback => {
                    let hm = fit::median_material(
                        &view.photo,
                        &va.mask_binary,
                        MedianSource::PhotoPixels,
                    )?;
                    Ok(PartMaterial {
                        selection: None,
                        fit: None,
                        homogeneous: Some(hm),
                    })
                }
            }
        })
        .collect::<Result<_, _>>()?;

    let stage2_materials = materials.clone();

    // Stage 3: alternate the nonnegative light mix and per-view exposures
    // against per-source renders of the current materials.
    let pairs: Vec<(usize, usize)> = (0..n_views)
        .flat_map(|v| (0..bundle.lights.len()).map(move |s| (v, s)))
        .collect();
    let per_light_renders: Vec<Tensor> = pairs
        .par_iter()
        .map(|&(vi, si)| -> Result<Tensor, PipelineError> {
            let grid = bundle.lights[si].per_view.get(&vi).ok_or_else(|| {
                PipelineError::Invalid(format!(
                    "light {:?} has no grid for view {vi}",
                    bundle.lights[si].light_id
                ))
            })?;
            let mut canvas = vec![0.0; h * w * 3];
            for (pi, plan) in plans.iter().enumerate() {
                let Some(va) = plan.alignments.get(&vi) else {
                    continue;
                };
                if va.matched.is_none() {
                    continue;
                }
                let mat = match (&materials[pi].fit, &materials[pi].homogeneous) {
                    (Some(f), _) => MaterialRef::Fitted(f),
                    (None, Some(hm)) => MaterialRef::Homogeneous(hm),
                    (None, None) => unreachable!("every part got a material"),
                };
                let (ctx, rect) = part_ctx(
                    CtxRasters {
                        photo: &bundle.views[vi].photo,
                        uv: &va.result.uv_aligned,
                        normals: &va.normals_aligned,
                        support: &va.mask_binary,
                        weighted: &va.result.mask_aligned,
                    },
                    &view_dirs,
                    &cells,
                    grid,
                    1.0,
                    cfg.fit_texture_res,
                    cfg.diffuse_only,
                )?;
                let img = render_material_crop(&ctx, &mat)?;
                let mask_c = crop(&va.mask_binary, rect);
                paste_masked(&mut canvas, w, &img, &mask_c, rect);
            }
            Ok(Tensor::new(vec![h, w, 3], canvas).expect("sized above"))
        })
        .collect::<Result<_, _>>()?;
    // Solve only over pixels whose warped normals firmly agree.
    let valid_masks: Vec<Tensor> = (0..n_views)
        .map(|vi| {
            Tensor::from_fn(&[h, w, 1], |i| {
                let hit = plans.iter().any(|plan| {
                    plan.alignments.get(&vi).is_some_and(|va| {
                        va.matched.is_some()
                            && va.result.mask_aligned.data()[i] > align::WEIGHT_VALID
                    })
                });
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    let solve_views: Vec<ViewSolveInputs> = (0..n_views)
        .map(|vi| ViewSolveInputs {
            per_light: (0..bundle.lights.len())
                .map(|si| &per_light_renders[vi * bundle.lights.len() + si])
                .collect(),
            photo: &bundle.views[vi].photo,
            valid: &valid_masks[vi],
        })
        .collect();
    let (coeffs, exposures, residuals) =
        relight::refine_lighting(&solve_views, 0, cfg.lighting_rounds)?;

    // Stage 4: warp each fitted part's photo back to the geometry frame and
    // rescale its material under the composed global lighting.
    let composed_per_view: Vec<LightingGrid> = (0..n_views)
        .map(|vi| compose_for_view(bundle, &coeffs, vi))
        .collect::<Result<_, _>>()?;
    let materials: Vec<PartMaterial> = materials
        .into_par_iter()
        .enumerate()
        .map(|(pi, mut mat)| -> Result<PartMaterial, PipelineError> {
            let Some(fitted) = mat.fit.take() else {
                return Ok(mat);
            };
            let plan = &plans[pi];
            let vi = plan.selected_view;
            let va = &plan.alignments[&vi];
            let pv = &bundle.parts[pi].per_view[&vi];
            let boxes = va.boxes.as_ref().expect("optimize mode is matched");
            let cand = &pv.mask_photo_candidates[va.matched.expect("matched")];
            let view = &bundle.views[vi];
            let (photo_geo, valid_warp) =
                align::warp_photo_to_geo(&view.photo, cand, &pv.mask_geo, boxes);
            let (weight_geo, _) =
                align::warp_photo_to_geo(&va.result.mask_aligned, cand, &pv.mask_geo, boxes);
            let support = Tensor::from_fn(&[h, w, 1], |i| {
                if pv.mask_geo.data()[i] > 0.0 && valid_warp.data()[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            });
            let weighted =
                Tensor::from_fn(&[h, w, 1], |i| weight_geo.data()[i] * support.data()[i]);
            let (ctx, _) = part_ctx(
                CtxRasters {
                    photo: &photo_geo,
                    uv: &pv.uv_geo,
                    normals: &pv.normals_geo,
                    support: &support,
                    weighted: &weighted,
                },
                &view_dirs,
                &cells,
                &composed_per_view[vi],
                exposures.values[vi],
                cfg.fit_texture_res,
                cfg.diffuse_only,
            )?;
            let template =
                matgraph::find_template(&fitted.graph_id).expect("fit carries a known id");
            let rescaled = fit::reoptimize_material(
                &ctx,
                template,
                &fitted,
                &cfg.loss_weights,
                &cfg.reoptimize,
                bank,
            )?;
            mat.fit = Some(rescaled);
            Ok(mat)
        })
        .collect::<Result<_, _>>()?;

    // Assets, renders, report.
    let assets = FittedAssets {
        method: "fit".into(),
        lighting_source: "composite".into(),
        parts: assemble_parts(bundle, &plans, &materials, cfg),
        light_coeffs: coeffs.clone(),
        exposures: exposures.clone(),
    };
    bundle::save_fitted_assets(out_dir, bundle, &assets)?;
    let view_align_cache: Vec<Vec<Option<ViewAlignment>>> = (0..n_views)
        .map(|vi| {
            bundle
                .parts
                .iter()
                .enumerate()
                .map(|(pi, _)| plans[pi].alignments.get(&vi).cloned())
                .collect()
        })
        .collect();
    for vi in 0..n_views {
        let img = render_view_full(
            bundle,
            &assets,
            &view_align_cache[vi],
            vi,
            Some(&composed_per_view[vi]),
            &view_dirs,
            &cells,
        )?;
        write_view_render(out_dir, vi, &img)?;
    }

    // Per-stage comparison images: the tonemapped photos, each part's
    // aligned weighted mask, the stage-2 materials under the bundle's own
    // lighting estimate, and the same materials under the solved lighting.
    // The reoptimized stage is renders/.
    let stages_dir = out_dir.join("stages");
    for (pi, part) in bundle.parts.iter().enumerate() {
        for (&vi, va) in &plans[pi].alignments {
            let m = &va.result.mask_aligned;
            let rgb = Tensor::from_fn(&[h, w, 3], |i| m.data()[i / 3]);
            save_png_at(
                &stages_dir.join(format!("alignment/{}_v{vi}.png", part.part_id)),
                &rgb,
            )?;
        }
    }
    let stage2_assets = FittedAssets {
        method: "fit".into(),
        lighting_source: "perView".into(),
        parts: assemble_parts(bundle, &plans, &stage2_materials, cfg),
        light_coeffs: LightCoeffs::ones(bundle.lights.len()),
        exposures: ExposureSet {
            values: bundle.views.iter().map(|v| v.exposure).collect(),
            anchor: 0,
            warnings: Vec::new(),
        },
    };
    let mut stage3_assets = stage2_assets.clone();
    stage3_assets.lighting_source = "composite".into();
    stage3_assets.light_coeffs = coeffs.clone();
    stage3_assets.exposures = exposures.clone();
    for vi in 0..n_views {
        save_png_at(
            &stages_dir.join(format!("photo/v{vi}.png")),
            &bundle.views[vi].photo,
        )?;
        let opt = render_view_full(
            bundle,
            &stage2_assets,
            &view_align_cache[vi],
            vi,
            None,
            &view_dirs,
            &cells,
        )?;
        save_png_at(
            &stages_dir.join(format!("materialOptimization/v{vi}.png")),
            &opt,
        )?;
        let lit = render_view_full(
            bundle,
            &stage3_assets,
            &view_align_cache[vi],
            vi,
            Some(&composed_per_view[vi]),
            &view_dirs,
            &cells,
        )?;
        save_png_at(
            &stages_dir.join(format!("lightingOptimization/v{vi}.png")),
            &lit,
        )?;
    }

    let n_opt = materials.iter().filter(|m| m.fit.is_some()).count();
    let n_geo = plans
        .iter()
        .filter(|p| p.alignments[&p.selected_view].result.mode == AlignMode::GeoMedianFallback)
        .count();
    let n_median = bundle.parts.len() - n_opt - n_geo;
    let report = FitReport {
        method: "fit".into(),
        seed: cfg.seed,
        stages: vec![
            StageRecord {
                stage: "alignment".into(),
                detail: format!(
                    "{matched_views} part-view pairs matched and warped across {n_views} views"
                ),
            },
            StageRecord {
                stage: "materialOptimization".into(),
                detail: format!(
                    "{n_opt} parts optimized, {n_median} median fallback, {n_geo} geometry fallback"
                ),
            },
            StageRecord {
                stage: "lightingOptimization".into(),
                detail: format!(
                    "{} sources over {} rounds, final residual {:.3e}",
                    bundle.lights.len(),
                    cfg.lighting_rounds,
                    residuals.last().copied().unwrap_or(f64::NAN)
                ),
            },
            StageRecord {
                stage: "materialReoptimization".into(),
                detail: format!("{n_opt} parts rescaled under the composed lighting"),
            },
        ],
        weight_valid_threshold: align::WEIGHT_VALID,
        median_fallback_roughness: fit::MEDIAN_FALLBACK_ROUGHNESS,
        parts: bundle
            .parts
            .iter()
            .enumerate()
            .map(|(pi, part)| {
                let plan = &plans[pi];
                let va = &plan.alignments[&plan.selected_view];
                let mat = &materials[pi];
                PartReport {
                    part_id: part.part_id.clone(),
                    mode: mode_name(va.result.mode).into(),
                    selected_view: plan.selected_view,
                    view_scores: plan.view_scores.clone(),
                    matched_candidate: va.matched,
                    match_soft_iou: va.soft_iou,
                    refined_iou: va.refined_iou,
                    valid_count: va.result.valid_count,
                    graph_id: mat.fit.as_ref().map(|f| f.graph_id.clone()),
                    selection_tallies: mat.selection.as_ref().map(|s| s.tallies.clone()),
                    final_loss: mat.fit.as_ref().map(|f| f.final_loss),
                    albedo_scale: mat.fit.as_ref().map(|f| f.albedo_scale),
                    roughness_scale: mat.fit.as_ref().map(|f| f.roughness_scale),
                    homogeneous: mat.homogeneous.clone(),
                }
            })
            .collect(),
        lighting: LightingReport {
            light_ids: bundle.lights.iter().map(|l| l.light_id.clone()).collect(),
            coeffs,
            exposures,
            residuals,
        },
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

/// Median-material baseline: same alignment and view choice as the pipeline,
/// then one homogeneous material per part, flat normals, and the bundle's
/// own lighting estimate. Writes the same output layout as [`run_fit`].
pub fn run_baseline(
    bundle_dir: &Path,
    method: BaselineMethod,
    out_dir: &Path,
) -> Result<FitReport, PipelineError> {
    let bundle = bundle::load_bundle(bundle_dir)?;
    let (h, w) = bundle.image_dims();
    let n_views = bundle.views.len();
    let cfg = PipelineConfig::default();
    let view_dirs = render::view_dirs_from_fov(h, w, bundle.camera_fov);
    let cells = render::cell_of_pixel_map(h, w, bundle.layout.cells_h, bundle.layout.cells_w)?;

    let plans: Vec<PartPlan> = bundle
        .parts
        .iter()
        .map(|part| plan_part(&bundle, part, cfg.view_consensus_tau))
        .collect::<Result<_, _>>()?;
    let parts: Vec<FittedPart> = bundle
        .parts
        .iter()
        .enumerate()
        .map(|(pi, part)| -> Result<FittedPart, PipelineError> {
            let plan = &plans[pi];
            let vi = plan.selected_view;
            let va = &plan.alignments[&vi];
            let view = &bundle.views[vi];
            let hm = match method {
                BaselineMethod::PixelMedian => {
                    fit::median_material(&view.photo, &va.mask_binary, MedianSource::PhotoPixels)?
                }
                BaselineMethod::InvRenderMedian => {
                    let albedo = view
                        .albedo_inv
                        .as_ref()
                        .ok_or(PipelineError::MissingPredictions { view: vi })?;
                    let roughness = view
                        .roughness_inv
                        .as_ref()
                        .ok_or(PipelineError::MissingPredictions { view: vi })?;
                    fit::median_material(
                        &view.photo,
                        &va.mask_binary,
                        MedianSource::InvRenderMaps { albedo, roughness },
                    )?
                }
            };
            Ok(FittedPart {
                part_id: part.part_id.clone(),
                mode: method.name().into(),
                selected_view: vi,
                fit: None,
                homogeneous: Some(hm),
                texture_res: 16,
                flat_normals: true,
                diffuse_only: false,
            })
        })
        .collect::<Result<_, _>>()?;

    let assets = FittedAssets {
        method: method.name().into(),
        lighting_source: "perView".into(),
        parts,
        light_coeffs: LightCoeffs::ones(bundle.lights.len()),
        exposures: ExposureSet {
            values: bundle.views.iter().map(|v| v.exposure).collect(),
            anchor: 0,
            warnings: Vec::new(),
        },
    };
    bundle::save_fitted_assets(out_dir, &bundle, &assets)?;
    for vi in 0..n_views {
        let aligns: Vec<Option<ViewAlignment>> = bundle
            .parts
            .iter()
            .enumerate()
            .map(|(pi, _)| plans[pi].alignments.get(&vi).cloned())
            .collect();
        let img = render_view_full(&bundle, &assets, &aligns, vi, None, &view_dirs, &cells)?;
        write_view_render(out_dir, vi, &img)?;
    }

    let report = FitReport {
        method: method.name().into(),
        seed: 0,
        stages: vec![
            StageRecord {
                stage: "alignment".into(),
                detail: format!("{} parts aligned", bundle.parts.len()),
            },
            StageRecord {
                stage: "medianMaterial".into(),
                detail: format!("{} homogeneous materials", bundle.parts.len()),
            },
        ],
        weight_valid_threshold: align::WEIGHT_VALID,
        median_fallback_roughness: fit::MEDIAN_FALLBACK_ROUGHNESS,
        parts: bundle
            .parts
            .iter()
            .enumerate()
            .map(|(pi, part)| {
                let plan = &plans[pi];
                let va = &plan.alignments[&plan.selected_view];
                PartReport {
                    part_id: part.part_id.clone(),
                    mode: method.name().into(),
                    selected_view: plan.selected_view,
                    view_scores: plan.view_scores.clone(),
                    matched_candidate: va.matched,
                    match_soft_iou: va.soft_iou,
                    refined_iou: va.refined_iou,
                    valid_count: va.result.valid_count,
                    graph_id: None,
                    selection_tallies: None,
                    final_loss: None,
                    albedo_scale: None,
                    roughness_scale: None,
                    homogeneous: assets.parts[pi].homogeneous.clone(),
                }
            })
            .collect(),
        lighting: LightingReport {
            light_ids: bundle.lights.iter().map(|l| l.light_id.clone()).collect(),
            coeffs: assets.light_coeffs.clone(),
            exposures: assets.exposures.clone(),
            residuals: Vec::new(),
        },
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Scores a run directory against the bundle photos: masked RMSE per part
/// pooled over views, SSIM per view, and their means. The directory only
/// needs `renders/v{i}.pfm` files, so externally produced render sets can be
/// scored too; the method label comes from `method`, falling back to the
/// saved assets and then to "external".
pub fn run_metrics(
    bundle_dir: &Path,
    run_dir: &Path,
    method: Option<&str>,
    out_path: Option<&Path>,
) -> Result<MetricsReport, PipelineError> {
    let bundle = bundle::load_bundle(bundle_dir)?;
    let label = match method {
        Some(m) => m.to_string(),
        None => match bundle::load_fitted_assets(run_dir) {
            Ok(assets) => assets.method,
            Err(BundleError::MissingAsset { .. }) => "external".into(),
            Err(e) => return Err(e.into()),
        },
    };
    let n_views = bundle.views.len();
    let renders: Vec<Tensor> = (0..n_views)
        .map(|vi| bundle::load_float_map(&render_paths(run_dir, vi).0, 3))
        .collect::<Result<_, _>>()?;

    let mut part_samples: Vec<(String, Vec<(Tensor, Tensor, Tensor)>)> = Vec::new();
    for part in &bundle.parts {
        let mut triples = Vec::new();
        for (&vi, pv) in &part.per_view {
            let va = align_part_view(&bundle.views[vi], pv)?;
            triples.push((
                bundle.views[vi].photo.clone(),
                renders[vi].clone(),
                va.mask_binary,
            ));
        }
        part_samples.push((part.part_id.clone(), triples));
    }
    let view_images: Vec<(usize, Tensor, Tensor)> = (0..n_views)
        .map(|vi| (vi, bundle.views[vi].photo.clone(), renders[vi].clone()))
        .collect();
    let report = metrics::build_report(&label, &part_samples, &view_images)?;
    let default_path = run_dir.join("metrics.json");
    write_json(out_path.unwrap_or(&default_path), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

/// Re-renders one view from saved assets, recomputing alignment from the
/// bundle; byte-identical to the PFM the producing run wrote for that view.
pub fn render_scene_view(
    bundle: &SceneBundle,
    assets: &FittedAssets,
    view: usize,
) -> Result<Tensor, PipelineError> {
    if view >= bundle.views.len() {
        return Err(PipelineError::UnknownView(view));
    }
    let (h, w) = bundle.image_dims();
    let view_dirs = render::view_dirs_from_fov(h, w, bundle.camera_fov);
    let cells = render::cell_of_pixel_map(h, w, bundle.layout.cells_h, bundle.layout.cells_w)?;
    let aligns = view_alignments(bundle, view)?;
    let composed = if assets.lighting_source == "perView" {
        None
    } else {
        Some(compose_for_view(bundle, &assets.light_coeffs, view)?)
    };
    render_view_full(
        bundle,
        assets,
        &aligns,
        view,
        composed.as_ref(),
        &view_dirs,
        &cells,
    )
}

/// CLI entry: loads bundle and assets, renders `view`, writes PFM + PNG.
pub fn run_render(
    bundle_dir: &Path,
    run_dir: &Path,
    view: usize,
    out_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let bundle = bundle::load_bundle(bundle_dir)?;
    let assets = bundle::load_fitted_assets(run_dir)?;
    let img = render_scene_view(&bundle, &assets, view)?;
    write_view_render(out_dir, view, &img)?;
    Ok(render_paths(out_dir, view).0)
}

// ---------------------------------------------------------------------------
// exemplars
// ---------------------------------------------------------------------------

/// Re-runs template selection for one part and writes every scored exemplar
/// render plus the vote tally. Uses the same seeds as the pipeline, so the
/// winner matches what `fit` would pick.
pub fn run_exemplars(
    bundle_dir: &Path,
    part_id: &str,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<ExemplarsReport, PipelineError> {
    let bundle = bundle::load_bundle(bundle_dir)?;
    let pi = bundle
        .parts
        .iter()
        .position(|p| p.part_id == part_id)
        .ok_or_else(|| PipelineError::UnknownPart(part_id.to_string()))?;
    let plan = plan_part(&bundle, &bundle.parts[pi], cfg.view_consensus_tau)?;
    let vi = plan.selected_view;
    let va = &plan.alignments[&vi];
    let view = &bundle.views[vi];
    let (h, w) = bundle.image_dims();
    let view_dirs = render::view_dirs_from_fov(h, w, bundle.camera_fov);
    let cells = render::cell_of_pixel_map(h, w, bundle.layout.cells_h, bundle.layout.cells_w)?;
    let (ctx, _) = part_ctx(
        CtxRasters {
            photo: &view.photo,
            uv: &va.result.uv_aligned,
            normals: &va.normals_aligned,
            support: &va.mask_binary,
            weighted: &va.result.mask_aligned,
        },
        &view_dirs,
        &cells,
        &view.lighting_inv,
        view.exposure,
        cfg.fit_texture_res,
        cfg.diffuse_only,
    )?;
    let sel = fit::select_graph(
        &ctx,
        matgraph::list_collection(),
        &cfg.selection,
        FeatureBank::shared(),
        part_seed(cfg.seed, pi),
    )?;

    // One shaded crop per exemplar, ranked best first, same rendering path
    // the vote used.
    let mut exemplar_ctx = ctx.clone();
    exemplar_ctx.texture_res = cfg.selection.exemplar_resolution;
    for (rank, ex) in sel.ranked.iter().enumerate() {
        let template = matgraph::find_template(&ex.graph_id).expect("ranked ids are known");
        let theta = matgraph::sample_random_params(template, ex.sample_seed);
        let tex = fit::eval_textures(template, &theta, cfg.selection.exemplar_resolution)?;
        let tape = Tape::new();
        let alb = tape.constant(tex.albedo)?;
        let nrm = tape.constant(tex.normals)?;
        let rgh = tape.constant(tex.roughness)?;
        let img = fit::render_with_textures(
            &tape,
            &exemplar_ctx,
            alb,
            nrm,
            Roughness::Texture(rgh),
            &UvTransformParams::identity(),
        )?;
        let path = out_dir.join(format!("exemplars/{rank:03}_{}.png", ex.graph_id));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", parent.display())))?;
        }
        bundle::save_photo_png(&path, &tape.value(img))?;
    }

    let report = ExemplarsReport {
        part_id: part_id.to_string(),
        selected_view: vi,
        graph_id: sel.graph_id.clone(),
        k: cfg.selection.k.min(sel.ranked.len()),
        best_distance: sel.best_distance,
        tallies: sel.tallies,
        ranked: sel.ranked,
    };
    write_json(&out_dir.join("exemplars.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

/// Generates a synthetic bundle (optionally from a JSON config) and writes
/// it plus the ground truth and the effective config under `out_dir`.
pub fn run_gen_synthetic(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<SynthTruth, PipelineError> {
    let mut cfg: SynthConfig = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (bundle, truth) = synth::generate(&cfg)?;
    bundle::save_bundle(out_dir, &bundle)?;
    write_json(&out_dir.join("truth.json"), &truth)?;
    write_json(&out_dir.join("synthConfig.json"), &cfg)?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::GridLayout;

    fn small_synth(seed: u64) -> SynthConfig {
        SynthConfig {
            image_h: 48,
            image_w: 48,
            n_views: 2,
            n_parts: 2,
            graph_ids: vec!["checker".into(), "speckled".into()],
            texture_res: 64,
            layout: GridLayout {
                cells_h: 2,
                cells_w: 2,
                env_h: 2,
                env_w: 4,
            },
            noise: 0.0,
            misalign_px: 0.0,
            exposure_spread: 0.25,
            light_spacing: 3.0,
            room_bounds_min: [0.0, 0.0, 0.0],
            room_bounds_max: [4.0, 2.5, 3.0],
            rotations: vec![0.0],
            log_scales: vec![0.0],
            translations: vec![0.0],
            background: 0.1,
            camera_fov: 1.0,
            diffuse_only: false,
            seed,
        }
    }

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 7,
            jobs: 1,
            fit_texture_res: 64,
            lighting_rounds: 1,
            view_consensus_tau: 0.5,
            diffuse_only: false,
            loss_weights: LossWeights::default(),
            optimize: OptimizeConfig {
                rounds: 1,
                adam_iters: 6,
                lr: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                rotations: vec![0.0],
                log_scales: vec![0.0],
                translations: vec![0.0],
            },
            reoptimize: ReoptimizeConfig { iters: 5, lr: 0.05 },
            selection: GraphSelectionConfig {
                samples_per_graph: 2,
                k: 3,
                exemplar_resolution: 64,
            },
        }
    }

    fn synth_bundle_dir(dir: &Path, seed: u64) -> PathBuf {
        let bundle_dir = dir.join("bundle");
        let (bundle, _) = synth::generate(&small_synth(seed)).unwrap();
        bundle::save_bundle(&bundle_dir, &bundle).unwrap();
        bundle_dir
    }

    #[test]
    fn config_json_round_trip_is_lossless() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 123;
        cfg.view_consensus_tau = 0.1 + 0.2; // deliberately non-representable nicely
        cfg.optimize.lr = 1.0 / 3.0;
        cfg.loss_weights.beta = 0.1;
        let js = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), js);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, &js).unwrap();
        let loaded = load_pipeline_config(&path).unwrap();
        assert_eq!(loaded.view_consensus_tau, cfg.view_consensus_tau);
        assert_eq!(loaded.optimize.lr, cfg.optimize.lr);

        // Typos in config files must not be silently ignored.
        std::fs::write(&path, "{\"bogus\": 1}").unwrap();
        assert!(matches!(
            load_pipeline_config(&path),
            Err(PipelineError::Invalid(_))
        ));

        // Partial files pick up defaults.
        std::fs::write(&path, "{\"seed\": 9}").unwrap();
        let partial = load_pipeline_config(&path).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.fit_texture_res, 128);
    }

    #[test]
    fn baseline_method_names_parse() {
        assert_eq!(
            "pixelMedian".parse::<BaselineMethod>().unwrap(),
            BaselineMethod::PixelMedian
        );
        assert_eq!(
            "inv-render-median".parse::<BaselineMethod>().unwrap(),
            BaselineMethod::InvRenderMedian
        );
        assert!("meanShift".parse::<BaselineMethod>().is_err());
    }

    #[test]
    fn fit_end_to_end_is_deterministic_and_rerenderable() {
        let dir = tempfile::tempdir().unwrap();
        let bundle_dir = synth_bundle_dir(dir.path(), 7);
        let cfg = tiny_cfg();

        let out = dir.path().join("run");
        let report = run_fit(&bundle_dir, &cfg, &out).unwrap();

        assert_eq!(
            report
                .stages
                .iter()
                .map(|s| s.stage.as_str())
                .collect::<Vec<_>>(),
            [
                "alignment",
                "materialOptimization",
                "lightingOptimization",
                "materialReoptimization"
            ]
        );
        assert_eq!(report.parts.len(), 2);
        // Perfectly aligned synthetic geometry keeps every part in the
        // optimizing mode, with a graph and a final loss attached.
        for part in &report.parts {
            assert_eq!(part.mode, "optimize");
            assert!(part.graph_id.is_some());
            assert!(part.final_loss.unwrap().is_finite());
            assert!(part.valid_count >= align::VALID_COUNT_MIN);
            assert!(part.refined_iou > 0.9);
        }
        let text = std::fs::read_to_string(out.join("report.json")).unwrap();
        assert!(text.contains("0.95"), "weight threshold missing: {text}");
        assert!(text.contains("0.7"), "fallback roughness missing");
        assert!(out.join("fitted/fitted.json").exists());
        for name in [
            "stages/photo/v0.png",
            "stages/alignment/part0_v0.png",
            "stages/materialOptimization/v0.png",
            "stages/lightingOptimization/v0.png",
            "renders/v1.png",
        ] {
            assert!(out.join(name).exists(), "missing stage image {name}");
        }

        // Same seed, same bundle: byte-identical report and renders.
        let out2 = dir.path().join("run2");
        run_fit(&bundle_dir, &cfg, &out2).unwrap();
        let bytes = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(
            bytes(&out.join("report.json")),
            bytes(&out2.join("report.json"))
        );
        for vi in 0..2 {
            assert_eq!(
                bytes(&render_paths(&out, vi).0),
                bytes(&render_paths(&out2, vi).0),
                "render v{vi} differs between identical runs"
            );
        }

        // The render command reproduces the run's own view renders.
        let out3 = dir.path().join("rerender");
        let pfm = run_render(&bundle_dir, &out, 0, &out3).unwrap();
        assert_eq!(bytes(&pfm), bytes(&render_paths(&out, 0).0));

        // Metrics score the run against the photos.
        let metrics = run_metrics(&bundle_dir, &out, None, None).unwrap();
        assert_eq!(metrics.method, "fit");
        assert_eq!(metrics.parts.len(), 2);
        assert!(metrics.mean_rmse.is_finite() && metrics.mean_rmse >= 0.0);
        assert!(out.join("metrics.json").exists());
    }

    #[test]
    fn baseline_runs_and_inv_render_needs_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let bundle_dir = synth_bundle_dir(dir.path(), 11);

        let out = dir.path().join("base");
        let report = run_baseline(&bundle_dir, BaselineMethod::PixelMedian, &out).unwrap();
        assert_eq!(report.method, "pixelMedian");
        for part in &report.parts {
            let hm = part.homogeneous.as_ref().unwrap();
            assert!(hm.albedo.iter().all(|a| (0.0..=1.0).contains(a)));
            assert_eq!(hm.roughness, fit::MEDIAN_FALLBACK_ROUGHNESS);
        }
        assert!(render_paths(&out, 0).0.exists());
        let assets = bundle::load_fitted_assets(&out).unwrap();
        assert_eq!(assets.method, "pixelMedian");
        assert_eq!(assets.lighting_source, "perView");
        assert!(assets.parts.iter().all(|p| p.flat_normals));

        // Rendering an out-of-range view is an explicit error.
        assert!(matches!(
            run_render(&bundle_dir, &out, 99, &dir.path().join("x")),
            Err(PipelineError::UnknownView(99))
        ));

        // Without prediction maps the inverse-render median cannot run.
        assert!(matches!(
            run_baseline(
                &bundle_dir,
                BaselineMethod::InvRenderMedian,
                &dir.path().join("inv0")
            ),
            Err(PipelineError::MissingPredictions { .. })
        ));

        // With constant prediction maps it reproduces those constants.
        let mut bundle = bundle::load_bundle(&bundle_dir).unwrap();
        let (h, w) = bundle.image_dims();
        for view in &mut bundle.views {
            view.albedo_inv = Some(Tensor::from_fn(&[h, w, 3], |i| match i % 3 {
                0 => 0.25,
                1 => 0.5,
                _ => 0.75,
            }));
            view.roughness_inv = Some(Tensor::full(&[h, w, 1], 0.375));
        }
        let bundle2_dir = dir.path().join("bundle2");
        bundle::save_bundle(&bundle2_dir, &bundle).unwrap();
        let report = run_baseline(
            &bundle2_dir,
            BaselineMethod::InvRenderMedian,
            &dir.path().join("inv"),
        )
        .unwrap();
        for part in &report.parts {
            let hm = part.homogeneous.as_ref().unwrap();
            for (got, want) in hm.albedo.iter().zip([0.25, 0.5, 0.75]) {
                assert!((got - want).abs() < 1e-6, "albedo {got} vs {want}");
            }
            assert!((hm.roughness - 0.375).abs() < 1e-6);
        }
    }

    #[test]
    fn exemplars_tally_covers_every_template() {
        let dir = tempfile::tempdir().unwrap();
        let bundle_dir = synth_bundle_dir(dir.path(), 13);
        let cfg = tiny_cfg();

        assert!(matches!(
            run_exemplars(&bundle_dir, "nope", &cfg, &dir.path().join("x")),
            Err(PipelineError::UnknownPart(_))
        ));

        let out = dir.path().join("ex");
        let report = run_exemplars(&bundle_dir, "part0", &cfg, &out).unwrap();
        let votes: usize = report.tallies.iter().map(|t| t.votes).sum();
        assert_eq!(votes, report.k);
        assert_eq!(report.tallies.len(), matgraph::list_collection().len());
        let expected = matgraph::list_collection().len() * cfg.selection.samples_per_graph;
        assert_eq!(report.ranked.len(), expected);
        assert!(report
            .ranked
            .windows(2)
            .all(|w| w[0].distance <= w[1].distance));
        let winner_votes = report
            .tallies
            .iter()
            .find(|t| t.graph_id == report.graph_id)
            .unwrap()
            .votes;
        assert!(report.tallies.iter().all(|t| t.votes <= winner_votes));
        let files = std::fs::read_dir(out.join("exemplars")).unwrap().count();
        assert_eq!(files, expected);
    }

    #[test]
    fn gen_synthetic_writes_bundle_truth_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("synth.json");
        let js = serde_json::to_string(&small_synth(3)).unwrap();
        std::fs::write(&cfg_path, js).unwrap();

        let out = dir.path().join("scene");
        let truth = run_gen_synthetic(Some(&cfg_path), Some(99), &out).unwrap();
        assert_eq!(truth.seed, 99);
        let bundle = bundle::load_bundle(&out).unwrap();
        assert_eq!(bundle.views.len(), 2);
        assert_eq!(bundle.parts.len(), 2);
        let echoed: SynthConfig =
            serde_json::from_str(&std::fs::read_to_string(out.join("synthConfig.json")).unwrap())
                .unwrap();
        assert_eq!(echoed.seed, 99);
        let truth_back: SynthTruth =
            serde_json::from_str(&std::fs::read_to_string(out.join("truth.json")).unwrap())
                .unwrap();
        assert_eq!(truth_back.parts.len(), 2);
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let t = Tensor::from_fn(&[5, 7, 3], |i| i as f64);
        let r = Rect {
            y0: 1,
            y1: 4,
            x0: 2,
            x1: 6,
        };
        let c = crop(&t, r);
        assert_eq!(c.shape(), [3, 4, 3]);
        assert_eq!(c.data()[0], t.data()[(1 * 7 + 2) * 3]);

        let mask = Tensor::full(&[3, 4, 1], 1.0);
        let mut canvas = vec![0.0; 5 * 7 * 3];
        paste_masked(&mut canvas, 7, &c, &mask, r);
        for y in 1..4 {
            for x in 2..6 {
                for ch in 0..3 {
                    assert_eq!(canvas[(y * 7 + x) * 3 + ch], t.data()[(y * 7 + x) * 3 + ch]);
                }
            }
        }
        assert_eq!(canvas[0], 0.0);

        // Padding clamps to the image borders.
        let m = Tensor::from_fn(&[4, 4, 1], |i| if i == 5 { 1.0 } else { 0.0 });
        let r = mask_rect(&m, 2).unwrap();
        assert_eq!(
            r,
            Rect {
                y0: 0,
                y1: 4,
                x0: 0,
                x1: 4
            }
        );
        assert!(mask_rect(&Tensor::zeros(&[4, 4, 1]), 1).is_none());
    }
}
