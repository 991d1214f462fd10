//! Material fitting: masked statistics and multi-scale feature losses, graph
//! selection by exemplar voting, the alternating UV-grid / gradient material
//! optimizer, scalar reoptimization under refined lighting, and the median
//! fallbacks for parts too small or too occluded to optimize.

use std::sync::{Arc, LazyLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matgraph::{eval_graph, sample_random_params, GraphTemplate, MatGraphError};
use crate::render::{
    render_part, rotate_normals, uv_transform, RenderError, ShadeGeometry, UvTransformParams,
};
use crate::tape::{AdError, KernelBank, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("weighted mask sums to zero")]
    EmptyMask,
    #[error("loss became non-finite during {stage}")]
    NonFiniteLoss { stage: &'static str },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Graph(#[from] MatGraphError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Blend of the statistics and feature terms; both nonnegative, not both 0.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

/// Fixed random multi-scale feature extractor: five cascade levels, sixteen
/// 5x5 kernels per level drawn once from a fixed seed, zero-mean per input
/// channel and unit norm per kernel. Level 0 filters the image; each deeper
/// level filters the downsampled rectified responses of the previous one, so
/// a location's normalized feature direction describes which filters fire in
/// its neighborhood rather than where, which is what separates texture
/// families after the per-location normalization.
#[derive(Debug)]
pub struct FeatureBank {
    levels: Vec<KernelBank>,
    sum16: KernelBank,
}

pub const FEATURE_LEVELS: usize = 5;
pub const FEATURE_KERNELS: usize = 16;

impl FeatureBank {
    fn new(seed: u64) -> FeatureBank {
        let mut levels = Vec::with_capacity(FEATURE_LEVELS);
        for level in 0..FEATURE_LEVELS {
            let cin = if level == 0 { 3 } else { FEATURE_KERNELS };
            let mut rng = crate::rng::stream_indexed(seed, "fit.featurebank", level as u64);
            let taps = 5 * 5;
            let mut weights = vec![0.0; FEATURE_KERNELS * taps * cin];
            for k in 0..FEATURE_KERNELS {
                for c in 0..cin {
                    let base = k * taps * cin + c;
                    let mut mean = 0.0;
                    for t in 0..taps {
                        let v: f64 = rng.gen::<f64>() - 0.5;
                        weights[base + t * cin] = v;
                        mean += v;
                    }
                    mean /= taps as f64;
                    for t in 0..taps {
                        weights[base + t * cin] -= mean;
                    }
                }
                let base = k * taps * cin;
                let norm: f64 = weights[base..base + taps * cin]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-12);
                for wv in &mut weights[base..base + taps * cin] {
                    *wv /= norm;
                }
            }
            levels.push(KernelBank::new(5, cin, FEATURE_KERNELS, weights).expect("valid bank"));
        }
        let sum16 =
            KernelBank::new(1, FEATURE_KERNELS, 1, vec![1.0; FEATURE_KERNELS]).expect("valid bank");
        FeatureBank { levels, sum16 }
    }

    pub fn shared() -> &'static FeatureBank {
        static BANK: LazyLock<FeatureBank> = LazyLock::new(|| FeatureBank::new(0x0f2a_11b7));
        &BANK
    }
}

fn mask_sum(mask: &Tensor) -> f64 {
    mask.data().iter().sum()
}

/// Normalized feature maps of an image at every cascade level that still
/// divides evenly; coarser levels are skipped for awkward crop sizes. Each
/// level past the first consumes the pooled rectified responses of the one
/// before it.
fn feature_maps(tape: &Tape, img: Var, bank: &FeatureBank) -> Result<Vec<Var>, AdError> {
    let mut maps = Vec::with_capacity(bank.levels.len());
    let mut cur = img;
    for (level, kb) in bank.levels.iter().enumerate() {
        if level > 0 {
            let s = tape.shape(cur);
            if s[0] < 2 || s[1] < 2 || s[0] % 2 != 0 || s[1] % 2 != 0 {
                break;
            }
            cur = tape.avg_pool2(cur)?;
        }
        let f = tape.conv2d_fixed(cur, kb)?;
        // The per-location descriptor is the rectified response spectrum:
        // which filters fire here, not the phase they fire with. Energies
        // are nonnegative, so unrelated textures still overlap somewhat
        // while a flat patch (zero spectrum) matches nothing but itself.
        cur = tape.abs(f);
        maps.push(tape.normalize_last(cur)?);
    }
    Ok(maps)
}

/// Precomputed photo-side feature maps, reused across optimizer iterations.
#[derive(Clone, Debug)]
pub struct FeatureTargets {
    levels: Vec<Tensor>,
    h: usize,
    w: usize,
}

pub fn feature_targets(photo: &Tensor, bank: &FeatureBank) -> Result<FeatureTargets, FitError> {
    let tape = Tape::new();
    let img = tape.constant(photo.clone())?;
    let maps = feature_maps(&tape, img, bank)?;
    Ok(FeatureTargets {
        levels: maps.iter().map(|&m| tape.value(m)).collect(),
        h: photo.shape()[0],
        w: photo.shape()[1],
    })
}

/// Masked statistics loss: per channel |mean difference| + |variance
/// difference| under the weighted mask, averaged over channels. Invariant to
/// within-mask pixel permutations of either image.
pub fn stat_loss(
    tape: &Tape,
    rendered: Var,
    photo: &Tensor,
    weighted_mask: &Tensor,
) -> Result<Var, FitError> {
    if mask_sum(weighted_mask) <= 0.0 {
        return Err(FitError::EmptyMask);
    }
    let photo_v = tape.constant(photo.clone())?;
    let mask = tape.constant(weighted_mask.clone())?;
    let mut total: Option<Var> = None;
    for c in 0..3 {
        let pc = tape.slice_last(photo_v, c, 1)?;
        let rc = tape.slice_last(rendered, c, 1)?;
        let d_mean = {
            let a = tape.reduce_mean_masked(pc, mask)?;
            let b = tape.reduce_mean_masked(rc, mask)?;
            tape.abs(tape.sub(a, b)?)
        };
        let d_var = {
            let a = tape.reduce_var_masked(pc, mask)?;
            let b = tape.reduce_var_masked(rc, mask)?;
            tape.abs(tape.sub(a, b)?)
        };
        let term = tape.add(d_mean, d_var)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("three channels"), 1.0 / 3.0))
}

/// Feature loss against precomputed targets: per level, squared differences
/// of normalized feature maps summed over channels, upsampled to image size,
/// summed over levels, then mask-weighted mean.
pub fn feature_loss_with_targets(
    tape: &Tape,
    rendered: Var,
    targets: &FeatureTargets,
    weighted_mask: &Tensor,
    bank: &FeatureBank,
) -> Result<Var, FitError> {
    if mask_sum(weighted_mask) <= 0.0 {
        return Err(FitError::EmptyMask);
    }
    let maps = feature_maps(tape, rendered, bank)?;
    debug_assert_eq!(maps.len(), targets.levels.len());
    let mut total: Option<Var> = None;
    for (m, t) in maps.iter().zip(&targets.levels) {
        let tv = tape.constant(t.clone())?;
        let diff = tape.sub(*m, tv)?;
        let sq = tape.mul(diff, diff)?;
        let summed = tape.conv2d_fixed(sq, &bank.sum16)?;
        let up = tape.upsample_bilinear(summed, targets.h, targets.w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, up)?,
            None => up,
        });
    }
    let mask = tape.constant(weighted_mask.clone())?;
    Ok(tape.reduce_mean_masked(total.expect("level 0 always present"), mask)?)
}

pub fn feature_loss(
    tape: &Tape,
    rendered: Var,
    photo: &Tensor,
    weighted_mask: &Tensor,
    bank: &FeatureBank,
) -> Result<Var, FitError> {
    let targets = feature_targets(photo, bank)?;
    feature_loss_with_targets(tape, rendered, &targets, weighted_mask, bank)
}

pub fn total_loss_with_targets(
    tape: &Tape,
    rendered: Var,
    photo: &Tensor,
    targets: &FeatureTargets,
    weighted_mask: &Tensor,
    weights: &LossWeights,
    bank: &FeatureBank,
) -> Result<Var, FitError> {
    let mut total: Option<Var> = None;
    if weights.alpha != 0.0 {
        let s = stat_loss(tape, rendered, photo, weighted_mask)?;
        total = Some(tape.scale(s, weights.alpha));
    }
    if weights.beta != 0.0 {
        let f = feature_loss_with_targets(tape, rendered, targets, weighted_mask, bank)?;
        let f = tape.scale(f, weights.beta);
        total = Some(match total {
            Some(t) => tape.add(t, f)?,
            None => f,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(stat_loss(tape, rendered, photo, weighted_mask).map(|s| tape.scale(s, 0.0))?),
    }
}

pub fn total_loss(
    tape: &Tape,
    rendered: Var,
    photo: &Tensor,
    weighted_mask: &Tensor,
    weights: &LossWeights,
    bank: &FeatureBank,
) -> Result<Var, FitError> {
    let targets = feature_targets(photo, bank)?;
    total_loss_with_targets(
        tape,
        rendered,
        photo,
        &targets,
        weighted_mask,
        weights,
        bank,
    )
}

/// Everything fixed about one part in its fitting view: shading geometry,
/// lighting, aligned UVs and geometry normals, the photo target, and the
/// weighted mask. All rasters are crop-sized.
#[derive(Clone, Debug)]
pub struct PartRenderCtx {
    pub geom: Arc<ShadeGeometry>,
    /// Radiance [cells, dirs, 3] matching `geom`.
    pub lighting: Tensor,
    pub uv: Tensor,
    pub normals_geo: Tensor,
    pub exposure: f64,
    pub photo: Tensor,
    pub weighted_mask: Tensor,
    pub texture_res: usize,
    pub diffuse_only: bool,
}

/// How the roughness input reaches the shader.
pub enum Roughness {
    /// Sample this texture through the UV transform like albedo/normals.
    Texture(Var),
    /// Use this crop-shaped map directly (e.g. a broadcast scalar).
    Map(Var),
}

/// Samples textures through phi and shades the crop; output is scaled by the
/// view exposure.
pub fn render_with_textures(
    tape: &Tape,
    ctx: &PartRenderCtx,
    albedo_tex: Var,
    normals_tex: Var,
    roughness: Roughness,
    phi: &UvTransformParams,
) -> Result<Var, FitError> {
    let uv = tape.constant(uv_transform(&ctx.uv, phi))?;
    let albedo = tape.bilinear_sample_wrap(albedo_tex, uv)?;
    let normals_s = tape.bilinear_sample_wrap(normals_tex, uv)?;
    let normals_s = tape.normalize3(normals_s)?;
    let normals = rotate_normals(tape, normals_s, &ctx.normals_geo)?;
    let rough = match roughness {
        Roughness::Texture(t) => tape.bilinear_sample_wrap(t, uv)?,
        Roughness::Map(m) => m,
    };
    let light = tape.constant(ctx.lighting.clone())?;
    let img = render_part(
        tape,
        albedo,
        normals,
        rough,
        light,
        ctx.geom.clone(),
        ctx.diffuse_only,
    )?;
    Ok(tape.scale(img, ctx.exposure))
}

/// Plain-tensor snapshot of a graph's textures at a fixed theta.
pub struct EvaluatedTextures {
    pub albedo: Tensor,
    pub normals: Tensor,
    pub roughness: Tensor,
    pub roughness_mean: f64,
}

pub fn eval_textures(
    template: &GraphTemplate,
    theta: &[f64],
    res: usize,
) -> Result<EvaluatedTextures, FitError> {
    let tape = Tape::new();
    let tex = eval_graph(&tape, template, theta, res)?;
    let roughness = tape.value(tex.roughness);
    let roughness_mean = roughness.data().iter().sum::<f64>() / roughness.len() as f64;
    Ok(EvaluatedTextures {
        albedo: tape.value(tex.albedo),
        normals: tape.value(tex.normals),
        roughness,
        roughness_mean,
    })
}

/// Adaptive-moment gradient descent, bias-corrected.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64) -> Adam {
        Adam {
            lr,
            b1,
            b2,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t);
        let bc2 = 1.0 - self.b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Alternating optimizer settings; the UV grid is the cartesian product of
/// rotations x log scales x translations^2.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct OptimizeConfig {
    pub rounds: usize,
    pub adam_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub translations: Vec<f64>,
}

impl Default for OptimizeConfig {
    fn default() -> OptimizeConfig {
        OptimizeConfig {
            rounds: 3,
            adam_iters: 200,
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            rotations: (0..16)
                .map(|k| k as f64 * std::f64::consts::PI / 8.0)
                .collect(),
            log_scales: (-4..=4).map(|k| k as f64 * 0.5).collect(),
            translations: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

impl OptimizeConfig {
    pub fn grid(&self) -> Vec<UvTransformParams> {
        let mut out = Vec::with_capacity(
            self.rotations.len() * self.log_scales.len() * self.translations.len().pow(2),
        );
        for &rot in &self.rotations {
            for &ls in &self.log_scales {
                for &ty in &self.translations {
                    for &tx in &self.translations {
                        out.push(UvTransformParams {
                            rotation: rot,
                            log_scale: ls,
                            translation: [tx, ty],
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitResult {
    pub graph_id: String,
    pub theta: Vec<f64>,
    pub phi: UvTransformParams,
    pub roughness_mean: f64,
    /// Per-channel albedo scales from reoptimization; 1 before it runs.
    pub albedo_scale: [f64; 3],
    pub roughness_scale: f64,
    /// Accepted (improving) loss values only, hence non-increasing.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

fn check_finite(loss: f64, stage: &'static str) -> Result<(), FitError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(FitError::NonFiniteLoss { stage })
    }
}

/// Forward-only loss of fixed textures under a candidate phi.
fn loss_for_phi(
    ctx: &PartRenderCtx,
    tex: &EvaluatedTextures,
    rough_scalar: f64,
    phi: &UvTransformParams,
    targets: &FeatureTargets,
    weights: &LossWeights,
    bank: &FeatureBank,
) -> Result<f64, FitError> {
    let tape = Tape::new();
    let alb = tape.constant(tex.albedo.clone())?;
    let nrm = tape.constant(tex.normals.clone())?;
    let shape = ctx.weighted_mask.shape().to_vec();
    let r = tape.constant(Tensor::scalar(rough_scalar))?;
    let r = tape.broadcast_to(r, &shape)?;
    let img = render_with_textures(&tape, ctx, alb, nrm, Roughness::Map(r), phi)?;
    let loss = total_loss_with_targets(
        &tape,
        img,
        &ctx.photo,
        targets,
        &ctx.weighted_mask,
        weights,
        bank,
    )?;
    Ok(tape.value(loss).item())
}

/// Alternates a discrete UV-transform search with gradient descent on the
/// graph parameters plus a scalar roughness. The scalar replaces the graph's
/// roughness map during optimization; callers rescale the full map so its
/// mean matches when materializing outputs. The trace records improving
/// iterates only and the best snapshot is returned.
pub fn optimize_material(
    ctx: &PartRenderCtx,
    template: &GraphTemplate,
    theta_init: &[f64],
    weights: &LossWeights,
    cfg: &OptimizeConfig,
    bank: &FeatureBank,
) -> Result<FitResult, FitError> {
    let targets = feature_targets(&ctx.photo, bank)?;
    let grid = cfg.grid();
    let mask_shape = ctx.weighted_mask.shape().to_vec();

    let mut theta: Vec<f64> = theta_init.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut phi = UvTransformParams::identity();
    let tex0 = eval_textures(template, &theta, ctx.texture_res)?;
    let mut rough = tex0.roughness_mean.clamp(0.01, 1.0);

    let mut best_loss = loss_for_phi(ctx, &tex0, rough, &phi, &targets, weights, bank)?;
    check_finite(best_loss, "initialization")?;
    let mut trace = vec![best_loss];
    let mut best = (theta.clone(), phi, rough);

    for _round in 0..cfg.rounds {
        // (a) Discrete UV search with the current textures.
        let tex = eval_textures(template, &theta, ctx.texture_res)?;
        for cand in &grid {
            let l = loss_for_phi(ctx, &tex, rough, cand, &targets, weights, bank)?;
            check_finite(l, "uv grid search")?;
            if l < best_loss {
                best_loss = l;
                phi = *cand;
                best = (theta.clone(), phi, rough);
                trace.push(l);
            }
        }

        // (b) Gradient descent on theta and the roughness scalar.
        let mut x: Vec<f64> = theta.iter().copied().chain([rough]).collect();
        let mut adam = Adam::new(x.len(), cfg.lr, cfg.beta1, cfg.beta2);
        for _it in 0..cfg.adam_iters {
            let tape = Tape::new();
            let tex = eval_graph(&tape, template, &x[..x.len() - 1], ctx.texture_res)?;
            let r_var = tape.param(Tensor::scalar(x[x.len() - 1]))?;
            let r_map = tape.broadcast_to(r_var, &mask_shape)?;
            let img = render_with_textures(
                &tape,
                ctx,
                tex.albedo,
                tex.normals,
                Roughness::Map(r_map),
                &phi,
            )?;
            let loss = total_loss_with_targets(
                &tape,
                img,
                &ctx.photo,
                &targets,
                &ctx.weighted_mask,
                weights,
                bank,
            )?;
            let lv = tape.value(loss).item();
            check_finite(lv, "gradient descent")?;
            if lv < best_loss {
                best_loss = lv;
                best = (x[..x.len() - 1].to_vec(), phi, x[x.len() - 1]);
                trace.push(lv);
            }
            let grads = tape.backward(loss, Tensor::scalar(1.0))?;
            let mut g = vec![0.0; x.len()];
            if let Some(gt) = grads.wrt(tex.theta) {
                g[..x.len() - 1].copy_from_slice(gt.data());
            }
            if let Some(gr) = grads.wrt(r_var) {
                g[x.len() - 1] = gr.item();
            }
            adam.step(&mut x, &g);
            let last = x.len() - 1;
            for v in &mut x[..last] {
                *v = v.clamp(0.0, 1.0);
            }
            x[last] = x[last].clamp(0.01, 1.0);
        }
        theta = x[..x.len() - 1].to_vec();
        rough = x[x.len() - 1];
    }

    let (theta, phi, rough) = best;
    Ok(FitResult {
        graph_id: template.id.clone(),
        theta,
        phi,
        roughness_mean: rough,
        albedo_scale: [1.0; 3],
        roughness_scale: 1.0,
        loss_trace: trace,
        final_loss: best_loss,
    })
}

/// Vote tally for one template after ranking exemplars.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExemplarTally {
    pub graph_id: String,
    pub votes: usize,
    /// Mean feature distance of this template's voting exemplars; absent
    /// when it received no votes.
    pub mean_distance: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GraphSelectionConfig {
    pub samples_per_graph: usize,
    pub k: usize,
    pub exemplar_resolution: usize,
}

impl Default for GraphSelectionConfig {
    fn default() -> GraphSelectionConfig {
        GraphSelectionConfig {
            samples_per_graph: 10,
            k: 21,
            exemplar_resolution: 128,
        }
    }
}

/// Parameter seed of exemplar `s` under a part-level seed.
pub fn exemplar_seed(seed: u64, s: usize) -> u64 {
    seed ^ ((s as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// One scored exemplar: which template, its feature distance to the photo,
/// and the seed that regenerates its parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExemplarScore {
    pub graph_id: String,
    pub distance: f64,
    pub sample_seed: u64,
}

/// Outcome of exemplar voting: the chosen template, the tally per template,
/// the full ranking, and the winner's closest exemplar parameters.
#[derive(Clone, Debug)]
pub struct GraphSelection {
    pub graph_id: String,
    pub tallies: Vec<ExemplarTally>,
    /// Every exemplar sorted by ascending distance.
    pub ranked: Vec<ExemplarScore>,
    pub best_theta: Vec<f64>,
    pub best_distance: f64,
}

/// Renders random exemplars from every template through the part's own view
/// and lets the k feature-nearest ones vote. Ties break on the smaller mean
/// distance, then the lower template index. Callers route small or occluded
/// parts (mode other than optimize) to the homogeneous template instead.
pub fn select_graph(
    ctx: &PartRenderCtx,
    collection: &[GraphTemplate],
    cfg: &GraphSelectionConfig,
    bank: &FeatureBank,
    seed: u64,
) -> Result<GraphSelection, FitError> {
    let targets = feature_targets(&ctx.photo, bank)?;
    let weights = LossWeights {
        alpha: 0.0,
        beta: 1.0,
    };
    // (distance, template index, sample seed), insertion order = sample order.
    let mut ranked: Vec<(f64, usize, u64)> =
        Vec::with_capacity(collection.len() * cfg.samples_per_graph);
    for (ti, template) in collection.iter().enumerate() {
        let mut exemplar_ctx = ctx.clone();
        exemplar_ctx.texture_res = cfg.exemplar_resolution;
        for s in 0..cfg.samples_per_graph {
            let sample_seed = exemplar_seed(seed, s);
            let theta = sample_random_params(template, sample_seed);
            let tex = eval_textures(template, &theta, cfg.exemplar_resolution)?;
            let tape = Tape::new();
            let alb = tape.constant(tex.albedo.clone())?;
            let nrm = tape.constant(tex.normals.clone())?;
            let rgh = tape.constant(tex.roughness.clone())?;
            let img = render_with_textures(
                &tape,
                &exemplar_ctx,
                alb,
                nrm,
                Roughness::Texture(rgh),
                &UvTransformParams::identity(),
            )?;
            let loss = total_loss_with_targets(
                &tape,
                img,
                &ctx.photo,
                &targets,
                &ctx.weighted_mask,
                &weights,
                bank,
            )?;
            let lv = tape.value(loss).item();
            check_finite(lv, "graph selection")?;
            ranked.push((lv, ti, sample_seed));
        }
    }
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances"));
    let k = cfg.k.min(ranked.len());
    let mut votes = vec![0usize; collection.len()];
    let mut dist_sum = vec![0.0; collection.len()];
    for &(d, ti, _) in &ranked[..k] {
        votes[ti] += 1;
        dist_sum[ti] += d;
    }
    let winner = (0..collection.len())
        .max_by(|&a, &b| {
            votes[a]
                .cmp(&votes[b])
                .then_with(|| {
                    let da = dist_sum[a] / votes[a].max(1) as f64;
                    let db = dist_sum[b] / votes[b].max(1) as f64;
                    db.partial_cmp(&da).expect("finite distances")
                })
                .then(b.cmp(&a))
        })
        .expect("nonempty collection");
    let tallies = (0..collection.len())
        .map(|ti| ExemplarTally {
            graph_id: collection[ti].id.clone(),
            votes: votes[ti],
            mean_distance: (votes[ti] > 0).then(|| dist_sum[ti] / votes[ti] as f64),
        })
        .collect();
    // The winner's closest exemplar seeds the continuous optimization.
    let &(best_distance, _, best_seed) = ranked
        .iter()
        .find(|&&(_, ti, _)| ti == winner)
        .expect("winner has exemplars");
    Ok(GraphSelection {
        graph_id: collection[winner].id.clone(),
        tallies,
        ranked: ranked
            .iter()
            .map(|&(d, ti, sd)| ExemplarScore {
                graph_id: collection[ti].id.clone(),
                distance: d,
                sample_seed: sd,
            })
            .collect(),
        best_theta: sample_random_params(&collection[winner], best_seed),
        best_distance,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ReoptimizeConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for ReoptimizeConfig {
    fn default() -> ReoptimizeConfig {
        ReoptimizeConfig {
            iters: 100,
            lr: 0.05,
        }
    }
}

/// Scale bounds for reoptimization.
pub const REOPT_SCALE_MIN: f64 = 0.25;
pub const REOPT_SCALE_MAX: f64 = 4.0;

/// After global lighting is refined, re-fits only four scalars (three albedo
/// channel scales and one roughness scale) against the photo warped into
/// geometry space. Theta and phi stay fixed.
pub fn reoptimize_material(
    ctx: &PartRenderCtx,
    template: &GraphTemplate,
    fit: &FitResult,
    weights: &LossWeights,
    cfg: &ReoptimizeConfig,
    bank: &FeatureBank,
) -> Result<FitResult, FitError> {
    let targets = feature_targets(&ctx.photo, bank)?;
    let tex = eval_textures(template, &fit.theta, ctx.texture_res)?;
    // Theta and phi are fixed, so sampling and the normal rotation happen
    // once; only the four scales flow through the tape.
    let (alb_sampled, normals_rotated) = {
        let tape = Tape::new();
        let uv = tape.constant(uv_transform(&ctx.uv, &fit.phi))?;
        let alb = tape.bilinear_sample_wrap(tape.constant(tex.albedo.clone())?, uv)?;
        let nrm = tape.bilinear_sample_wrap(tape.constant(tex.normals.clone())?, uv)?;
        let nrm = tape.normalize3(nrm)?;
        let rot = rotate_normals(&tape, nrm, &ctx.normals_geo)?;
        (tape.value(alb), tape.value(rot))
    };
    let rough_base = (fit.roughness_mean * fit.roughness_scale).clamp(0.01, 1.0);
    let mask_shape = ctx.weighted_mask.shape().to_vec();

    let mut x = [1.0f64; 4];
    let mut adam = Adam::new(4, cfg.lr, 0.9, 0.999);
    let mut best_x = x;
    let eval = |x: &[f64; 4]| -> Result<(f64, [f64; 4]), FitError> {
        let tape = Tape::new();
        let s = tape.param(Tensor::new(vec![4], x.to_vec())?)?;
        let s_rgb = tape.slice_last(s, 0, 3)?;
        let alb = tape.mul(tape.constant(alb_sampled.clone())?, s_rgb)?;
        let s_r = tape.slice_last(s, 3, 1)?;
        let r = tape.scale(s_r, rough_base);
        let r = tape.clamp(r, 0.01, 1.0);
        let r_map = tape.broadcast_to(r, &mask_shape)?;
        let nrm = tape.constant(normals_rotated.clone())?;
        let light = tape.constant(ctx.lighting.clone())?;
        let img = render_part(
            &tape,
            alb,
            nrm,
            r_map,
            light,
            ctx.geom.clone(),
            ctx.diffuse_only,
        )?;
        let img = tape.scale(img, ctx.exposure);
        let loss = total_loss_with_targets(
            &tape,
            img,
            &ctx.photo,
            &targets,
            &ctx.weighted_mask,
            weights,
            bank,
        )?;
        let lv = tape.value(loss).item();
        check_finite(lv, "reoptimization")?;
        let grads = tape.backward(loss, Tensor::scalar(1.0))?;
        let g = grads
            .wrt(s)
            .map(|t| {
                let d = t.data();
                [d[0], d[1], d[2], d[3]]
            })
            .unwrap_or([0.0; 4]);
        Ok((lv, g))
    };

    let (mut best_loss, _) = eval(&x)?;
    let mut trace = vec![best_loss];
    for _ in 0..cfg.iters {
        let (lv, g) = eval(&x)?;
        if lv < best_loss {
            best_loss = lv;
            best_x = x;
            trace.push(lv);
        }
        adam.step(&mut x, &g);
        for v in &mut x {
            *v = v.clamp(REOPT_SCALE_MIN, REOPT_SCALE_MAX);
        }
    }

    Ok(FitResult {
        albedo_scale: [
            fit.albedo_scale[0] * best_x[0],
            fit.albedo_scale[1] * best_x[1],
            fit.albedo_scale[2] * best_x[2],
        ],
        roughness_scale: fit.roughness_scale * best_x[3],
        loss_trace: trace,
        final_loss: best_loss,
        graph_id: fit.graph_id.clone(),
        theta: fit.theta.clone(),
        phi: fit.phi,
        roughness_mean: fit.roughness_mean,
    })
}

/// Where a homogeneous fallback material takes its values from.
pub enum MedianSource<'a> {
    /// Per-channel median of the masked photo pixels, roughness fixed at 0.7.
    PhotoPixels,
    /// Per-channel medians of per-pixel inverse-rendering prediction maps.
    InvRenderMaps {
        albedo: &'a Tensor,
        roughness: &'a Tensor,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HomogeneousMaterial {
    pub albedo: [f64; 3],
    pub roughness: f64,
}

/// Roughness assigned by the photo-pixel median fallback.
pub const MEDIAN_FALLBACK_ROUGHNESS: f64 = 0.7;

fn masked_channel_median(data: &[f64], channels: usize, c: usize, mask: &[f64]) -> f64 {
    let mut vals: Vec<f64> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, _)| data[i * channels + c])
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

pub fn median_material(
    photo: &Tensor,
    mask: &Tensor,
    source: MedianSource,
) -> Result<HomogeneousMaterial, FitError> {
    let m = mask.data();
    if !m.iter().any(|&v| v > 0.0) {
        return Err(FitError::EmptyMask);
    }
    match source {
        MedianSource::PhotoPixels => Ok(HomogeneousMaterial {
            albedo: [
                masked_channel_median(photo.data(), 3, 0, m),
                masked_channel_median(photo.data(), 3, 1, m),
                masked_channel_median(photo.data(), 3, 2, m),
            ],
            roughness: MEDIAN_FALLBACK_ROUGHNESS,
        }),
        MedianSource::InvRenderMaps { albedo, roughness } => Ok(HomogeneousMaterial {
            albedo: [
                masked_channel_median(albedo.data(), 3, 0, m),
                masked_channel_median(albedo.data(), 3, 1, m),
                masked_channel_median(albedo.data(), 3, 2, m),
            ],
            roughness: masked_channel_median(roughness.data(), 1, 0, m),
        }),
    }
}
