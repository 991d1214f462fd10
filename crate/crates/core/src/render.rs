//! Differentiable part rendering: UV transforms, texture sampling, normal
//! frame rotation, and microfacet shading under a spatially-varying grid of
//! incoming-light environment maps.
//!
//! Shading happens in camera space: the camera sits at the origin looking
//! down -z, so +z points toward the camera and the incoming-light directions
//! live on the +z hemisphere, uniform in (theta, phi) with solid angle
//! sin(theta) dtheta dphi. The n.omega clamp handles surface orientation.
//!
//! The whole shading sum is one fused tape op with a hand-derived VJP; at
//! desk-scale resolutions the per-pixel-per-direction loop dominates fit
//! time, so it must not decompose into thousands of elementwise tape nodes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{AdError, CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Fixed dielectric Fresnel reflectance at normal incidence.
pub const F0: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("lighting grid cannot be mapped onto the image: {msg}")]
    GridMismatch { msg: String },
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// UV transform phi: uv = Rot(rotation) * (2^logScale * uv0) + translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UvTransformParams {
    pub rotation: f64,
    pub log_scale: f64,
    pub translation: [f64; 2],
}

impl UvTransformParams {
    pub fn identity() -> UvTransformParams {
        UvTransformParams {
            rotation: 0.0,
            log_scale: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == UvTransformParams::identity()
    }
}

/// Applies phi to a [..., 2] uv raster. Identity parameters return the input
/// bits unchanged.
pub fn uv_transform(uv0: &Tensor, phi: &UvTransformParams) -> Tensor {
    if phi.is_identity() {
        return uv0.clone();
    }
    let s = phi.log_scale.exp2();
    let (sin, cos) = phi.rotation.sin_cos();
    let d = uv0.data();
    let mut out = Vec::with_capacity(d.len());
    for p in d.chunks(2) {
        let (u, v) = (p[0] * s, p[1] * s);
        out.push(cos * u - sin * v + phi.translation[0]);
        out.push(sin * u + cos * v + phi.translation[1]);
    }
    Tensor::new(uv0.shape().to_vec(), out).expect("shape preserved")
}

/// Spatially-varying incoming lighting: one envH x envW environment map per
/// grid cell, radiance stored flat as [cellsH*cellsW, envH*envW, 3].
#[derive(Clone, Debug)]
pub struct LightingGrid {
    pub cells_h: usize,
    pub cells_w: usize,
    pub env_h: usize,
    pub env_w: usize,
    pub radiance: Tensor,
}

impl LightingGrid {
    pub fn new(
        cells_h: usize,
        cells_w: usize,
        env_h: usize,
        env_w: usize,
        radiance: Tensor,
    ) -> Result<LightingGrid, RenderError> {
        let expect = [cells_h * cells_w, env_h * env_w, 3];
        if cells_h == 0 || cells_w == 0 || env_h == 0 || env_w == 0 || radiance.shape() != expect {
            return Err(RenderError::GridMismatch {
                msg: format!(
                    "radiance shape {:?} does not match {}x{} cells of {}x{} maps",
                    radiance.shape(),
                    cells_h,
                    cells_w,
                    env_h,
                    env_w
                ),
            });
        }
        if !radiance.is_all_finite() || radiance.data().iter().any(|&v| v < 0.0) {
            return Err(RenderError::GridMismatch {
                msg: "radiance must be finite and nonnegative".into(),
            });
        }
        Ok(LightingGrid {
            cells_h,
            cells_w,
            env_h,
            env_w,
            radiance,
        })
    }

    pub fn uniform(
        cells_h: usize,
        cells_w: usize,
        env_h: usize,
        env_w: usize,
        rgb: [f64; 3],
    ) -> LightingGrid {
        let radiance = Tensor::from_fn(&[cells_h * cells_w, env_h * env_w, 3], |i| rgb[i % 3]);
        LightingGrid::new(cells_h, cells_w, env_h, env_w, radiance).expect("valid by construction")
    }

    pub fn cells(&self) -> usize {
        self.cells_h * self.cells_w
    }

    pub fn dirs(&self) -> usize {
        self.env_h * self.env_w
    }

    pub fn same_layout(&self, other: &LightingGrid) -> bool {
        self.cells_h == other.cells_h
            && self.cells_w == other.cells_w
            && self.env_h == other.env_h
            && self.env_w == other.env_w
    }

    /// radiance * per-channel coefficients (light intensity scaling).
    pub fn scaled(&self, rgb: [f64; 3]) -> LightingGrid {
        let data: Vec<f64> = self
            .radiance
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * rgb[i % 3])
            .collect();
        LightingGrid {
            radiance: Tensor::new(self.radiance.shape().to_vec(), data).expect("same shape"),
            ..*self
        }
    }

    pub fn add(&self, other: &LightingGrid) -> Result<LightingGrid, RenderError> {
        if !self.same_layout(other) {
            return Err(RenderError::GridMismatch {
                msg: "grids have different layouts".into(),
            });
        }
        let data: Vec<f64> = self
            .radiance
            .data()
            .iter()
            .zip(other.radiance.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(LightingGrid {
            radiance: Tensor::new(self.radiance.shape().to_vec(), data).expect("same shape"),
            ..*self
        })
    }
}

/// Hemisphere quadrature: directions and solid angles for an envH x envW
/// grid, theta measured from +z (toward the camera), midpoint rule.
pub fn direction_table(env_h: usize, env_w: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let dtheta = std::f64::consts::FRAC_PI_2 / env_h as f64;
    let dphi = std::f64::consts::TAU / env_w as f64;
    let mut dirs = Vec::with_capacity(env_h * env_w);
    let mut domega = Vec::with_capacity(env_h * env_w);
    for i in 0..env_h {
        let theta = (i as f64 + 0.5) * dtheta;
        let (st, ct) = theta.sin_cos();
        for j in 0..env_w {
            let phi = (j as f64 + 0.5) * dphi;
            let (sp, cp) = phi.sin_cos();
            dirs.push([st * cp, st * sp, ct]);
            domega.push(st * dtheta * dphi);
        }
    }
    (dirs, domega)
}

/// Maps every pixel of an h x w image onto one grid cell (piecewise-constant,
/// total). Fails when the grid has more cells than pixels along an axis.
pub fn cell_of_pixel_map(
    h: usize,
    w: usize,
    cells_h: usize,
    cells_w: usize,
) -> Result<Vec<u32>, RenderError> {
    if cells_h == 0 || cells_w == 0 || cells_h > h || cells_w > w {
        return Err(RenderError::GridMismatch {
            msg: format!("{cells_h}x{cells_w} cells onto {h}x{w} image"),
        });
    }
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        let cy = y * cells_h / h;
        for x in 0..w {
            let cx = x * cells_w / w;
            map.push((cy * cells_w + cx) as u32);
        }
    }
    Ok(map)
}

/// Per-pixel unit vectors pointing from the surface toward the camera, for a
/// pinhole camera at the origin looking down -z with vertical field of view
/// `fov` (radians). Image y grows downward, camera y grows upward.
pub fn view_dirs_from_fov(h: usize, w: usize, fov: f64) -> Tensor {
    let tan_half = (fov / 2.0).tan();
    let aspect = w as f64 / h as f64;
    Tensor::from_fn(&[h, w, 3], |i| {
        let pix = i / 3;
        let (y, x) = (pix / w, pix % w);
        let xc = (2.0 * (x as f64 + 0.5) / w as f64 - 1.0) * tan_half * aspect;
        let yc = -(2.0 * (y as f64 + 0.5) / h as f64 - 1.0) * tan_half;
        let len = (xc * xc + yc * yc + 1.0).sqrt();
        match i % 3 {
            0 => -xc / len,
            1 => -yc / len,
            _ => 1.0 / len,
        }
    })
}

/// Builds a tangent frame on each geometric normal and carries sampled
/// tangent-space normals into camera space:
/// t = normalize(up x nGeo) with up=(0,1,0), falling back to up=(1,0,0) when
/// |nGeo . (0,1,0)| > 0.999; b = nGeo x t; out = normalize(nx t + ny b + nz nGeo).
pub fn rotate_normals(tape: &Tape, n_sampled: Var, n_geo: &Tensor) -> Result<Var, AdError> {
    let shape = n_geo.shape().to_vec();
    let gd = n_geo.data();
    let n = gd.len() / 3;
    let mut td = vec![0.0; gd.len()];
    let mut bd = vec![0.0; gd.len()];
    for i in 0..n {
        let g = [gd[i * 3], gd[i * 3 + 1], gd[i * 3 + 2]];
        let up = if g[1].abs() > 0.999 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let t = cross(up, g);
        let tl = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt().max(1e-12);
        let t = [t[0] / tl, t[1] / tl, t[2] / tl];
        let b = cross(g, t);
        for c in 0..3 {
            td[i * 3 + c] = t[c];
            bd[i * 3 + c] = b[c];
        }
    }
    let t = tape.constant(Tensor::new(shape.clone(), td)?)?;
    let b = tape.constant(Tensor::new(shape.clone(), bd)?)?;
    let g = tape.constant(n_geo.clone())?;
    let nx = tape.slice_last(n_sampled, 0, 1)?;
    let ny = tape.slice_last(n_sampled, 1, 1)?;
    let nz = tape.slice_last(n_sampled, 2, 1)?;
    let xt = tape.mul(nx, t)?;
    let yb = tape.mul(ny, b)?;
    let zg = tape.mul(nz, g)?;
    let sum = tape.add(tape.add(xt, yb)?, zg)?;
    tape.normalize3(sum)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Fixed per-pixel shading context: cell lookup, view directions, mask, and
/// the hemisphere quadrature. Shared by forward and backward passes.
#[derive(Debug)]
pub struct ShadeGeometry {
    pub h: usize,
    pub w: usize,
    pub cells: usize,
    pub cell_of_pixel: Vec<u32>,
    pub view_dirs: Vec<f64>,
    pub mask: Vec<f64>,
    pub dirs: Vec<[f64; 3]>,
    pub domega: Vec<f64>,
}

impl ShadeGeometry {
    /// `mask` is [h,w,1], `view_dirs` is [h,w,3]; `cell_of_pixel` must cover
    /// every pixel (use [`cell_of_pixel_map`] or slice one for a crop).
    pub fn new(
        mask: &Tensor,
        view_dirs: &Tensor,
        cell_of_pixel: Vec<u32>,
        grid: &LightingGrid,
    ) -> Result<ShadeGeometry, RenderError> {
        let ms = mask.shape();
        if ms.len() != 3 || ms[2] != 1 {
            return Err(RenderError::GridMismatch {
                msg: format!("mask shape {:?} must be [h,w,1]", ms),
            });
        }
        let (h, w) = (ms[0], ms[1]);
        if view_dirs.shape() != [h, w, 3] {
            return Err(RenderError::GridMismatch {
                msg: format!(
                    "view dirs shape {:?} vs {}x{} mask",
                    view_dirs.shape(),
                    h,
                    w
                ),
            });
        }
        if cell_of_pixel.len() != h * w {
            return Err(RenderError::GridMismatch {
                msg: format!("{} cell entries for {} pixels", cell_of_pixel.len(), h * w),
            });
        }
        let cells = grid.cells();
        if cell_of_pixel.iter().any(|&c| c as usize >= cells) {
            return Err(RenderError::GridMismatch {
                msg: "cell index out of range".into(),
            });
        }
        let (dirs, domega) = direction_table(grid.env_h, grid.env_w);
        Ok(ShadeGeometry {
            h,
            w,
            cells,
            cell_of_pixel,
            view_dirs: view_dirs.data().to_vec(),
            mask: mask.data().to_vec(),
            dirs,
            domega,
        })
    }

    pub fn for_full_image(
        mask: &Tensor,
        view_dirs: &Tensor,
        grid: &LightingGrid,
    ) -> Result<ShadeGeometry, RenderError> {
        let s = mask.shape();
        let cells = cell_of_pixel_map(s[0], s[1], grid.cells_h, grid.cells_w)?;
        ShadeGeometry::new(mask, view_dirs, cells, grid)
    }
}

/// Microfacet shading of one part, fused into a single tape op.
///
/// Per masked pixel p with lighting cell c(p):
///   I(p) = sum_j L(c(p), w_j) * (A(p)/pi + f_s) * max(0, N.w_j) * dOmega_j
/// with GGX f_s = 0.25 * F * D(n.h; a) * g(n.v) * g(n.l), a = R^2,
/// g(x) = 1/(x(1-k)+k), k = a/2, Schlick Fresnel F = F0+(1-F0)(1-h.v)^5.
/// F depends only on fixed (v, w_j), never on N or R.
#[derive(Debug)]
struct ShadeOp {
    geom: Arc<ShadeGeometry>,
    diffuse_only: bool,
}

const ALBEDO_IN: usize = 0;
const NORMALS_IN: usize = 1;
const ROUGH_IN: usize = 2;
const LIGHT_IN: usize = 3;

impl ShadeOp {
    fn check_shapes(&self, inputs: &[Tensor]) -> Result<(), AdError> {
        let g = &self.geom;
        let want = [
            vec![g.h, g.w, 3],
            vec![g.h, g.w, 3],
            vec![g.h, g.w, 1],
            vec![g.cells, g.dirs.len(), 3],
        ];
        for (i, shape) in want.iter().enumerate() {
            if inputs[i].shape() != &shape[..] {
                return Err(AdError::ShapeMismatch {
                    op: "shade",
                    lhs: inputs[i].shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        Ok(())
    }
}

struct PixelCtx {
    albedo: [f64; 3],
    normal: [f64; 3],
    view: [f64; 3],
    alpha: f64,
    k: f64,
    ndv_raw: f64,
    cell: usize,
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl ShadeOp {
    fn pixel_ctx(&self, inputs: &[Tensor], p: usize) -> PixelCtx {
        let g = &self.geom;
        let ad = inputs[ALBEDO_IN].data();
        let nd = inputs[NORMALS_IN].data();
        let rd = inputs[ROUGH_IN].data();
        let albedo = [ad[p * 3], ad[p * 3 + 1], ad[p * 3 + 2]];
        let normal = [nd[p * 3], nd[p * 3 + 1], nd[p * 3 + 2]];
        let view = [
            g.view_dirs[p * 3],
            g.view_dirs[p * 3 + 1],
            g.view_dirs[p * 3 + 2],
        ];
        let r = rd[p].clamp(0.01, 1.0);
        let alpha = r * r;
        PixelCtx {
            albedo,
            normal,
            view,
            alpha,
            k: alpha / 2.0,
            ndv_raw: dot(normal, view),
            cell: g.cell_of_pixel[p] as usize,
        }
    }
}

impl CustomOp for ShadeOp {
    fn name(&self) -> &'static str {
        "shade"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, AdError> {
        self.check_shapes(inputs)?;
        let g = &self.geom;
        let ld = inputs[LIGHT_IN].data();
        let n_dirs = g.dirs.len();
        let mut out = vec![0.0; g.h * g.w * 3];
        for p in 0..g.h * g.w {
            if g.mask[p] == 0.0 {
                continue;
            }
            let ctx = self.pixel_ctx(inputs, p);
            let ndv = ctx.ndv_raw.max(0.0);
            let gv = 1.0 / (ndv * (1.0 - ctx.k) + ctx.k);
            let lbase = ctx.cell * n_dirs * 3;
            let mut acc = [0.0; 3];
            for j in 0..n_dirs {
                let wj = g.dirs[j];
                let ndl = dot(ctx.normal, wj);
                if ndl <= 0.0 {
                    continue;
                }
                let weight = ndl * g.domega[j];
                let fs = if self.diffuse_only {
                    0.0
                } else {
                    let hv = half_vector(ctx.view, wj);
                    let hdv = dot(hv, ctx.view).clamp(0.0, 1.0);
                    let f = F0 + (1.0 - F0) * (1.0 - hdv).powi(5);
                    let ndh = dot(ctx.normal, hv).max(0.0);
                    let d = ndh * ndh * (ctx.alpha * ctx.alpha - 1.0) + 1.0;
                    let dist = ctx.alpha * ctx.alpha / (std::f64::consts::PI * d * d);
                    let gl = 1.0 / (ndl * (1.0 - ctx.k) + ctx.k);
                    0.25 * f * dist * gv * gl
                };
                for c in 0..3 {
                    acc[c] += ld[lbase + j * 3 + c]
                        * (ctx.albedo[c] / std::f64::consts::PI + fs)
                        * weight;
                }
            }
            out[p * 3..p * 3 + 3].copy_from_slice(&acc);
        }
        Tensor::new(vec![g.h, g.w, 3], out)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Option<Tensor>>, AdError> {
        self.check_shapes(inputs)?;
        let g = &self.geom;
        let ld = inputs[LIGHT_IN].data();
        let rd = inputs[ROUGH_IN].data();
        let cd = cot.data();
        let n_dirs = g.dirs.len();
        let mut d_alb = vec![0.0; g.h * g.w * 3];
        let mut d_nrm = vec![0.0; g.h * g.w * 3];
        let mut d_rgh = vec![0.0; g.h * g.w];
        let mut d_lgt = vec![0.0; g.cells * n_dirs * 3];
        for p in 0..g.h * g.w {
            if g.mask[p] == 0.0 {
                continue;
            }
            let ctx = self.pixel_ctx(inputs, p);
            // Roughness clamp: zero subgradient outside [0.01, 1].
            let r_active = (0.01..=1.0).contains(&rd[p]);
            let ndv = ctx.ndv_raw.max(0.0);
            let gv = 1.0 / (ndv * (1.0 - ctx.k) + ctx.k);
            let lbase = ctx.cell * n_dirs * 3;
            let cotp = [cd[p * 3], cd[p * 3 + 1], cd[p * 3 + 2]];
            let mut d_ndv_acc = 0.0;
            let mut d_n = [0.0; 3];
            for j in 0..n_dirs {
                let wj = g.dirs[j];
                let ndl = dot(ctx.normal, wj);
                if ndl <= 0.0 {
                    continue;
                }
                let dom = g.domega[j];
                let weight = ndl * dom;
                let lj = [
                    ld[lbase + j * 3],
                    ld[lbase + j * 3 + 1],
                    ld[lbase + j * 3 + 2],
                ];
                // sum_c cot_c * L_c, reused by every scalar path below.
                let cl = cotp[0] * lj[0] + cotp[1] * lj[1] + cotp[2] * lj[2];
                if self.diffuse_only {
                    let mut d_ndl = 0.0;
                    for c in 0..3 {
                        d_alb[p * 3 + c] += cotp[c] * lj[c] * weight / std::f64::consts::PI;
                        d_lgt[lbase + j * 3 + c] +=
                            cotp[c] * ctx.albedo[c] / std::f64::consts::PI * weight;
                        d_ndl += cotp[c] * lj[c] * ctx.albedo[c] / std::f64::consts::PI;
                    }
                    d_ndl *= dom;
                    for c in 0..3 {
                        d_n[c] += d_ndl * wj[c];
                    }
                    continue;
                }
                let hv = half_vector(ctx.view, wj);
                let hdv = dot(hv, ctx.view).clamp(0.0, 1.0);
                let f = F0 + (1.0 - F0) * (1.0 - hdv).powi(5);
                let ndh_raw = dot(ctx.normal, hv);
                let ndh = ndh_raw.max(0.0);
                let a2 = ctx.alpha * ctx.alpha;
                let d = ndh * ndh * (a2 - 1.0) + 1.0;
                let dist = a2 / (std::f64::consts::PI * d * d);
                let gl = 1.0 / (ndl * (1.0 - ctx.k) + ctx.k);
                let fs = 0.25 * f * dist * gv * gl;
                for c in 0..3 {
                    d_alb[p * 3 + c] += cotp[c] * lj[c] * weight / std::f64::consts::PI;
                    d_lgt[lbase + j * 3 + c] +=
                        cotp[c] * (ctx.albedo[c] / std::f64::consts::PI + fs) * weight;
                }
                // d(out)/d(ndl) through the cosine factor.
                let brdf = [
                    ctx.albedo[0] / std::f64::consts::PI + fs,
                    ctx.albedo[1] / std::f64::consts::PI + fs,
                    ctx.albedo[2] / std::f64::consts::PI + fs,
                ];
                let mut d_ndl = (cotp[0] * lj[0] * brdf[0]
                    + cotp[1] * lj[1] * brdf[1]
                    + cotp[2] * lj[2] * brdf[2])
                    * dom;
                // d(out)/d(fs) summed over channels.
                let d_fs = cl * weight;
                // fs partials.
                let dd_dndh = -4.0 * a2 * ndh * (a2 - 1.0) / (std::f64::consts::PI * d * d * d);
                let dgl_dx = -(1.0 - ctx.k) * gl * gl;
                let dgv_dx = -(1.0 - ctx.k) * gv * gv;
                // Through g(ndl).
                d_ndl += d_fs * 0.25 * f * dist * gv * dgl_dx;
                for c in 0..3 {
                    d_n[c] += d_ndl * wj[c];
                }
                // Through D(ndh): subgradient 0 when the raw dot is clamped.
                if ndh_raw > 0.0 {
                    let d_ndh = d_fs * 0.25 * f * dd_dndh * gv * gl;
                    for c in 0..3 {
                        d_n[c] += d_ndh * hv[c];
                    }
                }
                // Through g(ndv), accumulated once per pixel below.
                d_ndv_acc += d_fs * 0.25 * f * dist * dgv_dx * gl;
                // Through alpha: D directly, and k = alpha/2 in both g terms.
                if r_active {
                    let dd_da = 2.0 * ctx.alpha / (std::f64::consts::PI * d * d)
                        - 4.0 * ctx.alpha * a2 * ndh * ndh / (std::f64::consts::PI * d * d * d);
                    let dgl_dk = -(1.0 - ndl) * gl * gl;
                    let dgv_dk = -(1.0 - ndv) * gv * gv;
                    let dfs_da =
                        0.25 * f * (dd_da * gv * gl + dist * 0.5 * (dgv_dk * gl + gv * dgl_dk));
                    d_rgh[p] += d_fs * dfs_da * 2.0 * rd[p].clamp(0.01, 1.0);
                }
            }
            if ctx.ndv_raw > 0.0 {
                for c in 0..3 {
                    d_n[c] += d_ndv_acc * ctx.view[c];
                }
            }
            d_nrm[p * 3..p * 3 + 3].copy_from_slice(&d_n);
        }
        Ok(vec![
            Some(Tensor::new(vec![g.h, g.w, 3], d_alb)?),
            Some(Tensor::new(vec![g.h, g.w, 3], d_nrm)?),
            Some(Tensor::new(vec![g.h, g.w, 1], d_rgh)?),
            Some(Tensor::new(vec![g.cells, n_dirs, 3], d_lgt)?),
        ])
    }
}

#[inline]
fn half_vector(v: [f64; 3], w: [f64; 3]) -> [f64; 3] {
    let s = [v[0] + w[0], v[1] + w[1], v[2] + w[2]];
    let len = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt().max(1e-12);
    [s[0] / len, s[1] / len, s[2] / len]
}

/// Records the fused shading op; `lighting` must hold the grid's radiance
/// as a [cells, dirs, 3] tape var.
pub fn render_part(
    tape: &Tape,
    albedo: Var,
    normals: Var,
    roughness: Var,
    lighting: Var,
    geom: Arc<ShadeGeometry>,
    diffuse_only: bool,
) -> Result<Var, RenderError> {
    let op = Arc::new(ShadeOp { geom, diffuse_only });
    Ok(tape.custom(op, &[albedo, normals, roughness, lighting])?)
}
