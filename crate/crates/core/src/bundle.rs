//! Scene bundle i/o: a JSON manifest plus PNG/PFM assets on disk, loaded
//! into validated in-memory records, and the reverse for writing synthetic
//! bundles and fitted results.
//!
//! Photos are 8-bit sRGB PNGs linearized on load; everything else (normals,
//! UVs, lighting grids) travels through PFM and round-trips bit-exactly in
//! f32. A lighting grid is stored as one PFM whose rows stack the per-cell
//! environment maps in row-major cell order, which makes tiling a reshape.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{FitResult, HomogeneousMaterial};
use crate::matgraph;
use crate::pfm::{self, PfmError, PfmImage};
use crate::relight::{ExposureSet, LightCoeffs};
use crate::render::LightingGrid;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing asset: {path}")]
    MissingAsset { path: PathBuf },
    #[error(
        "dimension mismatch for {what}: expected {expected_h}x{expected_w}, got {got_h}x{got_w}"
    )]
    DimensionMismatch {
        what: String,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("invalid manifest: {msg}")]
    InvalidManifest { msg: String },
    #[error("i/o failure: {msg}")]
    IoFailure { msg: String },
    #[error("unknown part id {part_id:?}")]
    UnknownPart { part_id: String },
}

fn invalid(msg: impl Into<String>) -> BundleError {
    BundleError::InvalidManifest { msg: msg.into() }
}

fn map_io(path: &Path, e: std::io::Error) -> BundleError {
    if e.kind() == std::io::ErrorKind::NotFound {
        BundleError::MissingAsset {
            path: path.to_path_buf(),
        }
    } else {
        BundleError::IoFailure {
            msg: format!("{}: {e}", path.display()),
        }
    }
}

fn map_pfm(path: &Path, e: PfmError) -> BundleError {
    match e {
        PfmError::Io(io) => map_io(path, io),
        PfmError::Format(msg) => BundleError::IoFailure {
            msg: format!("{}: {msg}", path.display()),
        },
    }
}

/// Shape of every lighting grid in a bundle: spatial cells times an
/// environment-map resolution per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GridLayout {
    pub cells_h: usize,
    pub cells_w: usize,
    pub env_h: usize,
    pub env_w: usize,
}

impl GridLayout {
    pub fn cells(&self) -> usize {
        self.cells_h * self.cells_w
    }

    pub fn dirs(&self) -> usize {
        self.env_h * self.env_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LightKind {
    Area,
    EnvWindow,
}

/// One photo with its per-pixel estimates and camera.
#[derive(Clone, Debug)]
pub struct ViewRecord {
    pub photo: Tensor,
    pub normals_inv: Tensor,
    pub lighting_inv: LightingGrid,
    /// Camera-to-world rigid transform, meters.
    pub camera_pose: [[f64; 4]; 4],
    pub exposure: f64,
    /// Optional per-pixel material estimates from the upstream inverse
    /// renderer; some capture pipelines do not export them.
    pub albedo_inv: Option<Tensor>,
    pub roughness_inv: Option<Tensor>,
}

/// Geometry-side rasters of one part in one view.
#[derive(Clone, Debug)]
pub struct PartView {
    pub mask_geo: Tensor,
    pub mask_photo_candidates: Vec<Tensor>,
    pub uv_geo: Tensor,
    pub normals_geo: Tensor,
}

#[derive(Clone, Debug)]
pub struct PartRecord {
    pub part_id: String,
    pub semantic_label: Option<String>,
    pub per_view: BTreeMap<usize, PartView>,
}

#[derive(Clone, Debug)]
pub struct LightRecord {
    pub light_id: String,
    pub kind: LightKind,
    /// Incoming lighting with only this source on, at unit intensity.
    pub per_view: BTreeMap<usize, LightingGrid>,
}

#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub camera_fov: f64,
    pub room_bounds_min: [f64; 3],
    pub room_bounds_max: [f64; 3],
    pub layout: GridLayout,
    pub views: Vec<ViewRecord>,
    pub parts: Vec<PartRecord>,
    pub lights: Vec<LightRecord>,
}

impl SceneBundle {
    pub fn image_dims(&self) -> (usize, usize) {
        let s = self.views[0].photo.shape();
        (s[0], s[1])
    }

    pub fn part(&self, part_id: &str) -> Option<&PartRecord> {
        self.parts.iter().find(|p| p.part_id == part_id)
    }

    pub fn env_window_index(&self) -> usize {
        self.lights
            .iter()
            .position(|l| l.kind == LightKind::EnvWindow)
            .expect("validated bundle has an env window light")
    }
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

fn default_exposure() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Manifest {
    camera_fov: f64,
    room_bounds_min: [f64; 3],
    room_bounds_max: [f64; 3],
    lighting_layout: GridLayout,
    views: Vec<ManifestView>,
    parts: Vec<ManifestPart>,
    lights: Vec<ManifestLight>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ManifestView {
    photo: String,
    normals_inv: String,
    lighting_inv: String,
    camera_pose: [[f64; 4]; 4],
    #[serde(default = "default_exposure")]
    exposure: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    albedo_inv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roughness_inv: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ManifestPart {
    part_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    semantic_label: Option<String>,
    per_view: BTreeMap<usize, ManifestPartView>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ManifestPartView {
    mask_geo: String,
    mask_photo_candidates: Vec<String>,
    uv_geo: String,
    normals_geo: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ManifestLight {
    light_id: String,
    kind: LightKind,
    per_view: BTreeMap<usize, String>,
}

// ---------------------------------------------------------------------------
// sRGB and image codecs
// ---------------------------------------------------------------------------

static SRGB_TO_LINEAR: LazyLock<[f64; 256]> = LazyLock::new(|| {
    let mut lut = [0.0; 256];
    for (b, slot) in lut.iter_mut().enumerate() {
        let c = b as f64 / 255.0;
        *slot = if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        };
    }
    lut
});

pub fn srgb_byte_to_linear(b: u8) -> f64 {
    SRGB_TO_LINEAR[b as usize]
}

pub fn linear_to_srgb_byte(v: f64) -> u8 {
    let v = v.clamp(0.0, 1.0);
    let c = if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    (c * 255.0).round() as u8
}

pub fn load_photo_png(path: &Path) -> Result<Tensor, BundleError> {
    let bytes = std::fs::read(path).map_err(|e| map_io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| BundleError::IoFailure {
            msg: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img
        .as_raw()
        .iter()
        .map(|&b| srgb_byte_to_linear(b))
        .collect();
    Tensor::new(vec![h, w, 3], data).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })
}

pub fn save_photo_png(path: &Path, photo: &Tensor) -> Result<(), BundleError> {
    let s = photo.shape();
    let (h, w) = (s[0], s[1]);
    let bytes: Vec<u8> = photo
        .data()
        .iter()
        .map(|&v| linear_to_srgb_byte(v))
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save(path).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })
}

pub fn load_mask_png(path: &Path) -> Result<Tensor, BundleError> {
    let bytes = std::fs::read(path).map_err(|e| map_io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| BundleError::IoFailure {
            msg: format!("{}: {e}", path.display()),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img
        .as_raw()
        .iter()
        .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![h, w, 1], data).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })
}

pub fn save_mask_png(path: &Path, mask: &Tensor) -> Result<(), BundleError> {
    let s = mask.shape();
    let (h, w) = (s[0], s[1]);
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save(path).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })
}

/// Float image out as PFM; a 2-channel tensor is padded with a zero channel.
pub fn save_float_map(path: &Path, t: &Tensor) -> Result<(), BundleError> {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let img = match c {
        1 | 3 => PfmImage::from_f64(h, w, c, t.data()),
        2 => {
            let mut padded = vec![0.0f64; h * w * 3];
            for i in 0..h * w {
                padded[i * 3] = t.data()[i * 2];
                padded[i * 3 + 1] = t.data()[i * 2 + 1];
            }
            PfmImage::from_f64(h, w, 3, &padded)
        }
        other => {
            return Err(BundleError::IoFailure {
                msg: format!("{}: {other} channels unsupported", path.display()),
            })
        }
    }
    .map_err(|e| map_pfm(path, e))?;
    pfm::write_pfm(path, &img).map_err(|e| map_pfm(path, e))
}

/// Reads a PFM into a tensor with the requested channel count (2 channels
/// come back from the padded 3-channel layout).
pub fn load_float_map(path: &Path, channels: usize) -> Result<Tensor, BundleError> {
    let img = pfm::read_pfm(path).map_err(|e| map_pfm(path, e))?;
    let (h, w) = (img.h, img.w);
    let data = match (img.channels, channels) {
        (c, want) if c == want => img.to_f64(),
        (3, 2) => {
            let full = img.to_f64();
            let mut out = vec![0.0; h * w * 2];
            for i in 0..h * w {
                out[i * 2] = full[i * 3];
                out[i * 2 + 1] = full[i * 3 + 1];
            }
            out
        }
        (c, want) => {
            return Err(BundleError::IoFailure {
                msg: format!("{}: {c} channels, wanted {want}", path.display()),
            })
        }
    };
    Tensor::new(vec![h, w, channels], data).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })
}

pub fn save_lighting_grid(path: &Path, grid: &LightingGrid) -> Result<(), BundleError> {
    let layout = GridLayout {
        cells_h: grid.cells_h,
        cells_w: grid.cells_w,
        env_h: grid.env_h,
        env_w: grid.env_w,
    };
    // Radiance [C, D, 3] flattens to (C*envH) x envW x 3 rows directly.
    let img = PfmImage::from_f64(
        layout.cells() * layout.env_h,
        layout.env_w,
        3,
        grid.radiance.data(),
    )
    .map_err(|e| map_pfm(path, e))?;
    pfm::write_pfm(path, &img).map_err(|e| map_pfm(path, e))
}

pub fn load_lighting_grid(path: &Path, layout: GridLayout) -> Result<LightingGrid, BundleError> {
    let img = pfm::read_pfm(path).map_err(|e| map_pfm(path, e))?;
    let want_h = layout.cells() * layout.env_h;
    if img.h != want_h || img.w != layout.env_w || img.channels != 3 {
        return Err(BundleError::DimensionMismatch {
            what: path.display().to_string(),
            expected_h: want_h,
            expected_w: layout.env_w,
            got_h: img.h,
            got_w: img.w,
        });
    }
    let radiance = Tensor::new(vec![layout.cells(), layout.dirs(), 3], img.to_f64())
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    LightingGrid::new(
        layout.cells_h,
        layout.cells_w,
        layout.env_h,
        layout.env_w,
        radiance,
    )
    .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Bundle load/save
// ---------------------------------------------------------------------------

fn check_dims(what: &str, t: &Tensor, h: usize, w: usize) -> Result<(), BundleError> {
    let s = t.shape();
    if s[0] != h || s[1] != w {
        return Err(BundleError::DimensionMismatch {
            what: what.to_string(),
            expected_h: h,
            expected_w: w,
            got_h: s[0],
            got_w: s[1],
        });
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle, BundleError> {
    let manifest_path = dir.join("bundle.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| map_io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| invalid(format!("parse: {e}")))?;

    if manifest.views.is_empty() {
        return Err(invalid("bundle has no views"));
    }
    if manifest.parts.is_empty() {
        return Err(invalid("bundle has no parts"));
    }
    if !(manifest.camera_fov > 0.0 && manifest.camera_fov < std::f64::consts::PI) {
        return Err(invalid(format!("camera fov {}", manifest.camera_fov)));
    }
    for a in 0..3 {
        if !(manifest.room_bounds_max[a] > manifest.room_bounds_min[a]) {
            return Err(invalid(format!("room bounds axis {a} inverted or empty")));
        }
    }
    let layout = manifest.lighting_layout;
    if layout.cells() == 0 || layout.dirs() == 0 {
        return Err(invalid("lighting layout has zero extent"));
    }
    let env_windows = manifest
        .lights
        .iter()
        .filter(|l| l.kind == LightKind::EnvWindow)
        .count();
    if env_windows != 1 {
        return Err(invalid(format!(
            "expected exactly one envWindow light, found {env_windows}"
        )));
    }

    let mut views = Vec::with_capacity(manifest.views.len());
    let mut dims = (0usize, 0usize);
    for (vi, mv) in manifest.views.iter().enumerate() {
        if !(mv.exposure > 0.0) {
            return Err(invalid(format!("view {vi}: exposure {}", mv.exposure)));
        }
        let photo = load_photo_png(&dir.join(&mv.photo))?;
        if vi == 0 {
            dims = (photo.shape()[0], photo.shape()[1]);
        }
        check_dims(&mv.photo, &photo, dims.0, dims.1)?;
        let normals_inv = load_float_map(&dir.join(&mv.normals_inv), 3)?;
        check_dims(&mv.normals_inv, &normals_inv, dims.0, dims.1)?;
        validate_unit_normals(&mv.normals_inv, &normals_inv, None)?;
        let lighting_inv = load_lighting_grid(&dir.join(&mv.lighting_inv), layout)?;
        let albedo_inv = match &mv.albedo_inv {
            Some(rel) => {
                let t = load_float_map(&dir.join(rel), 3)?;
                check_dims(rel, &t, dims.0, dims.1)?;
                Some(t)
            }
            None => None,
        };
        let roughness_inv = match &mv.roughness_inv {
            Some(rel) => {
                let t = load_float_map(&dir.join(rel), 1)?;
                check_dims(rel, &t, dims.0, dims.1)?;
                Some(t)
            }
            None => None,
        };
        views.push(ViewRecord {
            photo,
            normals_inv,
            lighting_inv,
            camera_pose: mv.camera_pose,
            exposure: mv.exposure,
            albedo_inv,
            roughness_inv,
        });
    }

    let mut parts = Vec::with_capacity(manifest.parts.len());
    for mp in &manifest.parts {
        let mut per_view = BTreeMap::new();
        let mut any_geo = false;
        for (&vi, pv) in &mp.per_view {
            if vi >= views.len() {
                return Err(invalid(format!(
                    "part {:?} references view {vi}, bundle has {}",
                    mp.part_id,
                    views.len()
                )));
            }
            let mask_geo = load_mask_png(&dir.join(&pv.mask_geo))?;
            check_dims(&pv.mask_geo, &mask_geo, dims.0, dims.1)?;
            let mut cands = Vec::with_capacity(pv.mask_photo_candidates.len());
            for c in &pv.mask_photo_candidates {
                let m = load_mask_png(&dir.join(c))?;
                check_dims(c, &m, dims.0, dims.1)?;
                cands.push(m);
            }
            let uv_geo = load_float_map(&dir.join(&pv.uv_geo), 2)?;
            check_dims(&pv.uv_geo, &uv_geo, dims.0, dims.1)?;
            for (pi, &m) in mask_geo.data().iter().enumerate() {
                if m > 0.5 {
                    any_geo = true;
                    let (u, v) = (uv_geo.data()[pi * 2], uv_geo.data()[pi * 2 + 1]);
                    if !u.is_finite() || !v.is_finite() {
                        return Err(invalid(format!(
                            "part {:?}: non-finite uv inside mask in {}",
                            mp.part_id, pv.uv_geo
                        )));
                    }
                }
            }
            let normals_geo = load_float_map(&dir.join(&pv.normals_geo), 3)?;
            check_dims(&pv.normals_geo, &normals_geo, dims.0, dims.1)?;
            validate_unit_normals(&pv.normals_geo, &normals_geo, Some(&mask_geo))?;
            per_view.insert(
                vi,
                PartView {
                    mask_geo,
                    mask_photo_candidates: cands,
                    uv_geo,
                    normals_geo,
                },
            );
        }
        if !any_geo {
            return Err(invalid(format!(
                "part {:?} has an empty geometry mask in every view",
                mp.part_id
            )));
        }
        parts.push(PartRecord {
            part_id: mp.part_id.clone(),
            semantic_label: mp.semantic_label.clone(),
            per_view,
        });
    }

    let mut lights = Vec::with_capacity(manifest.lights.len());
    for ml in &manifest.lights {
        let mut per_view = BTreeMap::new();
        for (&vi, rel) in &ml.per_view {
            if vi >= views.len() {
                return Err(invalid(format!(
                    "light {:?} references view {vi}, bundle has {}",
                    ml.light_id,
                    views.len()
                )));
            }
            per_view.insert(vi, load_lighting_grid(&dir.join(rel), layout)?);
        }
        lights.push(LightRecord {
            light_id: ml.light_id.clone(),
            kind: ml.kind,
            per_view,
        });
    }

    Ok(SceneBundle {
        camera_fov: manifest.camera_fov,
        room_bounds_min: manifest.room_bounds_min,
        room_bounds_max: manifest.room_bounds_max,
        layout,
        views,
        parts,
        lights,
    })
}

/// Normals must be unit length to 1e-4, everywhere or under a mask.
fn validate_unit_normals(
    what: &str,
    normals: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(), BundleError> {
    let d = normals.data();
    let n = normals.len() / 3;
    for pi in 0..n {
        if let Some(m) = mask {
            if m.data()[pi] <= 0.5 {
                continue;
            }
        }
        let (x, y, z) = (d[pi * 3], d[pi * 3 + 1], d[pi * 3 + 2]);
        let len = (x * x + y * y + z * z).sqrt();
        if !len.is_finite() || (len - 1.0).abs() > 1e-4 {
            return Err(invalid(format!(
                "{what}: normal length {len:.6} at pixel {pi}"
            )));
        }
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), BundleError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| map_io(parent, e))?;
    }
    Ok(())
}

/// Writes a bundle as manifest + assets under `dir`. Photos pass through
/// 8-bit sRGB, so reloading quantizes them; float maps reload f32-exactly.
pub fn save_bundle(dir: &Path, bundle: &SceneBundle) -> Result<(), BundleError> {
    std::fs::create_dir_all(dir).map_err(|e| map_io(dir, e))?;
    let mut views = Vec::new();
    for (vi, view) in bundle.views.iter().enumerate() {
        let photo = format!("views/v{vi}/photo.png");
        let normals = format!("views/v{vi}/normals_inv.pfm");
        let lighting = format!("views/v{vi}/lighting_inv.pfm");
        for rel in [&photo, &normals, &lighting] {
            ensure_parent(&dir.join(rel))?;
        }
        save_photo_png(&dir.join(&photo), &view.photo)?;
        save_float_map(&dir.join(&normals), &view.normals_inv)?;
        save_lighting_grid(&dir.join(&lighting), &view.lighting_inv)?;
        let albedo_inv = match &view.albedo_inv {
            Some(t) => {
                let rel = format!("views/v{vi}/albedo_inv.pfm");
                save_float_map(&dir.join(&rel), t)?;
                Some(rel)
            }
            None => None,
        };
        let roughness_inv = match &view.roughness_inv {
            Some(t) => {
                let rel = format!("views/v{vi}/roughness_inv.pfm");
                save_float_map(&dir.join(&rel), t)?;
                Some(rel)
            }
            None => None,
        };
        views.push(ManifestView {
            photo,
            normals_inv: normals,
            lighting_inv: lighting,
            camera_pose: view.camera_pose,
            exposure: view.exposure,
            albedo_inv,
            roughness_inv,
        });
    }
    let mut parts = Vec::new();
    for part in &bundle.parts {
        let mut per_view = BTreeMap::new();
        for (&vi, pv) in &part.per_view {
            let base = format!("parts/{}/v{vi}", part.part_id);
            let mask_geo = format!("{base}/mask_geo.png");
            ensure_parent(&dir.join(&mask_geo))?;
            save_mask_png(&dir.join(&mask_geo), &pv.mask_geo)?;
            let mut cands = Vec::new();
            for (ci, cand) in pv.mask_photo_candidates.iter().enumerate() {
                let rel = format!("{base}/mask_photo_{ci}.png");
                save_mask_png(&dir.join(&rel), cand)?;
                cands.push(rel);
            }
            let uv_geo = format!("{base}/uv_geo.pfm");
            save_float_map(&dir.join(&uv_geo), &pv.uv_geo)?;
            let normals_geo = format!("{base}/normals_geo.pfm");
            save_float_map(&dir.join(&normals_geo), &pv.normals_geo)?;
            per_view.insert(
                vi,
                ManifestPartView {
                    mask_geo,
                    mask_photo_candidates: cands,
                    uv_geo,
                    normals_geo,
                },
            );
        }
        parts.push(ManifestPart {
            part_id: part.part_id.clone(),
            semantic_label: part.semantic_label.clone(),
            per_view,
        });
    }
    let mut lights = Vec::new();
    for light in &bundle.lights {
        let mut per_view = BTreeMap::new();
        for (&vi, grid) in &light.per_view {
            let rel = format!("lights/{}/v{vi}.pfm", light.light_id);
            ensure_parent(&dir.join(&rel))?;
            save_lighting_grid(&dir.join(&rel), grid)?;
            per_view.insert(vi, rel);
        }
        lights.push(ManifestLight {
            light_id: light.light_id.clone(),
            kind: light.kind,
            per_view,
        });
    }
    let manifest = Manifest {
        camera_fov: bundle.camera_fov,
        room_bounds_min: bundle.room_bounds_min,
        room_bounds_max: bundle.room_bounds_max,
        lighting_layout: bundle.layout,
        views,
        parts,
        lights,
    };
    let path = dir.join("bundle.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| BundleError::IoFailure {
        msg: format!("manifest encode: {e}"),
    })?;
    std::fs::write(&path, text).map_err(|e| map_io(&path, e))
}

// ---------------------------------------------------------------------------
// Fitted assets
// ---------------------------------------------------------------------------

/// Everything needed to reproduce one part's fitted material exactly: the
/// parameter report keeps full-precision values, textures are previews.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FittedPart {
    pub part_id: String,
    /// "optimize", "medianFallback", or "geoMedianFallback" from the full
    /// pipeline; "pixelMedian" or "invRenderMedian" from baselines.
    pub mode: String,
    pub selected_view: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homogeneous: Option<HomogeneousMaterial>,
    pub texture_res: usize,
    /// Baselines ignore estimated geometry detail and shade with flat normals.
    #[serde(default)]
    pub flat_normals: bool,
    #[serde(default)]
    pub diffuse_only: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FittedAssets {
    #[serde(default = "default_method")]
    pub method: String,
    /// "composite": rebuild each view's lighting from the per-source grids
    /// and `light_coeffs`; "perView": shade with the bundle's per-view
    /// lighting estimate as-is.
    #[serde(default = "default_lighting_source")]
    pub lighting_source: String,
    pub parts: Vec<FittedPart>,
    pub light_coeffs: LightCoeffs,
    pub exposures: ExposureSet,
}

fn default_method() -> String {
    "fit".into()
}

fn default_lighting_source() -> String {
    "composite".into()
}

/// Final texture maps of a fitted part with reoptimization scales applied.
#[derive(Clone, Debug)]
pub struct PartTextures {
    pub albedo: Tensor,
    pub normals: Tensor,
    pub roughness: Tensor,
}

pub fn fitted_part_textures(part: &FittedPart) -> Result<PartTextures, BundleError> {
    if let Some(fit) = &part.fit {
        let template = matgraph::find_template(&fit.graph_id)
            .ok_or_else(|| invalid(format!("unknown graph id {:?}", fit.graph_id)))?;
        let tex = crate::fit::eval_textures(template, &fit.theta, part.texture_res)
            .map_err(|e| invalid(format!("texture eval: {e}")))?;
        let albedo = Tensor::from_fn(tex.albedo.shape(), |i| {
            (tex.albedo.data()[i] * fit.albedo_scale[i % 3]).clamp(0.0, 1.0)
        });
        let rough = (fit.roughness_mean * fit.roughness_scale).clamp(0.01, 1.0);
        let res = part.texture_res;
        Ok(PartTextures {
            albedo,
            normals: tex.normals,
            roughness: Tensor::full(&[res, res, 1], rough),
        })
    } else if let Some(h) = &part.homogeneous {
        let res = part.texture_res.max(1);
        Ok(PartTextures {
            albedo: Tensor::from_fn(&[res, res, 3], |i| h.albedo[i % 3].clamp(0.0, 1.0)),
            normals: Tensor::from_fn(&[res, res, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 }),
            roughness: Tensor::full(&[res, res, 1], h.roughness),
        })
    } else {
        Err(invalid(format!(
            "part {:?} has neither fit nor homogeneous material",
            part.part_id
        )))
    }
}

fn save_png16_rgb(path: &Path, t: &Tensor) -> Result<(), BundleError> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let raw: Vec<u16> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("sized buffer");
    image::DynamicImage::ImageRgb16(img)
        .save(path)
        .map_err(|e| BundleError::IoFailure {
            msg: format!("{}: {e}", path.display()),
        })
}

fn save_png16_gray(path: &Path, t: &Tensor) -> Result<(), BundleError> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let raw: Vec<u16> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("sized buffer");
    image::DynamicImage::ImageLuma16(img)
        .save(path)
        .map_err(|e| BundleError::IoFailure {
            msg: format!("{}: {e}", path.display()),
        })
}

fn load_png16(path: &Path, channels: usize) -> Result<Tensor, BundleError> {
    let bytes = std::fs::read(path).map_err(|e| map_io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })?;
    let (data, h, w): (Vec<f64>, usize, usize) = if channels == 3 {
        let rgb = img.to_rgb16();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        (
            rgb.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
            h,
            w,
        )
    } else {
        let g = img.to_luma16();
        let (w, h) = (g.width() as usize, g.height() as usize);
        (
            g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
            h,
            w,
        )
    };
    Tensor::new(vec![h, w, channels], data).map_err(|e| BundleError::IoFailure {
        msg: format!("{}: {e}", path.display()),
    })
}

/// Writes fitted materials and lighting under `dir/fitted`: a JSON report
/// with full-precision parameters, 16-bit texture previews per part, and
/// normals as PFM. Every part id must exist in the bundle.
pub fn save_fitted_assets(
    dir: &Path,
    bundle: &SceneBundle,
    assets: &FittedAssets,
) -> Result<(), BundleError> {
    for part in &assets.parts {
        if bundle.part(&part.part_id).is_none() {
            return Err(BundleError::UnknownPart {
                part_id: part.part_id.clone(),
            });
        }
    }
    let root = dir.join("fitted");
    std::fs::create_dir_all(&root).map_err(|e| map_io(&root, e))?;
    for part in &assets.parts {
        let tex = fitted_part_textures(part)?;
        let base = root.join(&part.part_id);
        std::fs::create_dir_all(&base).map_err(|e| map_io(&base, e))?;
        save_png16_rgb(&base.join("albedo.png"), &tex.albedo)?;
        save_png16_gray(&base.join("roughness.png"), &tex.roughness)?;
        save_float_map(&base.join("normals.pfm"), &tex.normals)?;
    }
    let path = root.join("fitted.json");
    let text = serde_json::to_string_pretty(assets).map_err(|e| BundleError::IoFailure {
        msg: format!("fitted encode: {e}"),
    })?;
    std::fs::write(&path, text).map_err(|e| map_io(&path, e))
}

pub fn load_fitted_assets(dir: &Path) -> Result<FittedAssets, BundleError> {
    let path = dir.join("fitted").join("fitted.json");
    let text = std::fs::read_to_string(&path).map_err(|e| map_io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("fitted parse: {e}")))
}

pub fn load_part_textures(dir: &Path, part_id: &str) -> Result<PartTextures, BundleError> {
    let base = dir.join("fitted").join(part_id);
    Ok(PartTextures {
        albedo: load_png16(&base.join("albedo.png"), 3)?,
        normals: load_float_map(&base.join("normals.pfm"), 3)?,
        roughness: load_png16(&base.join("roughness.png"), 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn unit_normals(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "bundle.normals");
        let mut out = vec![0.0; h * w * 3];
        for pi in 0..h * w {
            let x = rng.gen::<f64>() * 0.4 - 0.2;
            let y = rng.gen::<f64>() * 0.4 - 0.2;
            let len = (x * x + y * y + 1.0).sqrt();
            out[pi * 3] = x / len;
            out[pi * 3 + 1] = y / len;
            out[pi * 3 + 2] = 1.0 / len;
        }
        Tensor::new(vec![h, w, 3], out).unwrap()
    }

    fn sample_bundle(h: usize, w: usize) -> SceneBundle {
        let mut rng = stream(11, "bundle.sample");
        let layout = GridLayout {
            cells_h: 2,
            cells_w: 2,
            env_h: 2,
            env_w: 4,
        };
        let grid = |r: &mut rand_chacha::ChaCha8Rng| {
            LightingGrid::new(2, 2, 2, 4, Tensor::from_fn(&[4, 8, 3], |_| r.gen::<f64>())).unwrap()
        };
        let photo = Tensor::from_fn(&[h, w, 3], |_| rng.gen::<f64>() * 0.9);
        let mask = Tensor::from_fn(&[h, w, 1], |i| {
            let (y, x) = (i / w, i % w);
            if y >= 2 && y < h - 2 && x >= 2 && x < w - 2 {
                1.0
            } else {
                0.0
            }
        });
        let uv = Tensor::from_fn(&[h, w, 2], |i| {
            let pi = i / 2;
            let (y, x) = (pi / w, pi % w);
            if i % 2 == 0 {
                (x as f64 + 0.5) / w as f64
            } else {
                (y as f64 + 0.5) / h as f64
            }
        });
        let pose = [
            [1.0, 0.0, 0.0, 0.5],
            [0.0, 1.0, 0.0, 1.2],
            [0.0, 0.0, 1.0, -0.3],
            [0.0, 0.0, 0.0, 1.0],
        ];
        SceneBundle {
            camera_fov: 1.0,
            room_bounds_min: [0.0, 0.0, 0.0],
            room_bounds_max: [4.0, 2.5, 3.0],
            layout,
            views: vec![ViewRecord {
                photo,
                normals_inv: unit_normals(h, w, 3),
                lighting_inv: grid(&mut rng),
                camera_pose: pose,
                exposure: 1.0,
                albedo_inv: None,
                roughness_inv: None,
            }],
            parts: vec![PartRecord {
                part_id: "floor".into(),
                semantic_label: Some("floor".into()),
                per_view: BTreeMap::from([(
                    0,
                    PartView {
                        mask_geo: mask.clone(),
                        mask_photo_candidates: vec![mask],
                        uv_geo: uv,
                        normals_geo: unit_normals(h, w, 4),
                    },
                )]),
            }],
            lights: vec![
                LightRecord {
                    light_id: "ceiling0".into(),
                    kind: LightKind::Area,
                    per_view: BTreeMap::from([(0, grid(&mut rng))]),
                },
                LightRecord {
                    light_id: "window".into(),
                    kind: LightKind::EnvWindow,
                    per_view: BTreeMap::from([(0, grid(&mut rng))]),
                },
            ],
        }
    }

    #[test]
    fn srgb_decode_matches_reference_points() {
        assert!((srgb_byte_to_linear(128) - 0.21586).abs() < 1e-5);
        assert_eq!(srgb_byte_to_linear(0), 0.0);
        assert!((srgb_byte_to_linear(255) - 1.0).abs() < 1e-12);
        // Encode inverts decode on every byte.
        for b in 0..=255u8 {
            assert_eq!(linear_to_srgb_byte(srgb_byte_to_linear(b)), b);
        }
    }

    #[test]
    fn minimal_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle(12, 10);
        save_bundle(dir.path(), &bundle).unwrap();
        let back = load_bundle(dir.path()).unwrap();

        assert_eq!(back.views.len(), 1);
        assert_eq!(back.parts.len(), 1);
        assert_eq!(back.lights.len(), 2);
        assert_eq!(back.image_dims(), (12, 10));
        assert_eq!(back.camera_fov, bundle.camera_fov);
        assert_eq!(back.views[0].camera_pose, bundle.views[0].camera_pose);
        assert_eq!(back.env_window_index(), 1);

        // Photos go through 8-bit sRGB: bounded quantization error.
        for (a, b) in back.views[0]
            .photo
            .data()
            .iter()
            .zip(bundle.views[0].photo.data())
        {
            assert!((a - b).abs() < 0.005, "{a} vs {b}");
        }
        // Float maps are exact at f32 precision.
        for (a, b) in back.views[0]
            .normals_inv
            .data()
            .iter()
            .zip(bundle.views[0].normals_inv.data())
        {
            assert_eq!(*a, *b as f32 as f64);
        }
        let pv = &back.parts[0].per_view[&0];
        let src = &bundle.parts[0].per_view[&0];
        assert_eq!(pv.mask_geo.data(), src.mask_geo.data());
        for (a, b) in pv.uv_geo.data().iter().zip(src.uv_geo.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        for (a, b) in back.lights[0].per_view[&0]
            .radiance
            .data()
            .iter()
            .zip(bundle.lights[0].per_view[&0].radiance.data())
        {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn lighting_grid_pfm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pfm");
        let mut rng = stream(7, "bundle.grid");
        let grid = LightingGrid::new(
            2,
            3,
            4,
            8,
            Tensor::from_fn(&[6, 32, 3], |_| rng.gen::<f64>() * 5.0),
        )
        .unwrap();
        save_lighting_grid(&path, &grid).unwrap();
        let layout = GridLayout {
            cells_h: 2,
            cells_w: 3,
            env_h: 4,
            env_w: 8,
        };
        let back = load_lighting_grid(&path, layout).unwrap();
        for (a, b) in back.radiance.data().iter().zip(grid.radiance.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // A wrong layout is a dimension error, not garbage data.
        let bad = GridLayout {
            cells_h: 3,
            cells_w: 3,
            env_h: 4,
            env_w: 8,
        };
        assert!(matches!(
            load_lighting_grid(&path, bad),
            Err(BundleError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_and_malformed_assets_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::MissingAsset { .. })
        ));

        let bundle = sample_bundle(8, 8);
        save_bundle(dir.path(), &bundle).unwrap();
        std::fs::remove_file(dir.path().join("views/v0/photo.png")).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::MissingAsset { .. })
        ));

        std::fs::write(dir.path().join("bundle.json"), "{ not json").unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::InvalidManifest { .. })
        ));
    }

    #[test]
    fn undersized_mask_is_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle(8, 8);
        save_bundle(dir.path(), &bundle).unwrap();
        let small = Tensor::full(&[4, 4, 1], 1.0);
        save_mask_png(&dir.path().join("parts/floor/v0/mask_geo.png"), &small).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_content() {
        // Non-unit inverse normals.
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = sample_bundle(8, 8);
        save_bundle(dir.path(), &bundle).unwrap();
        let skewed = Tensor::full(&[8, 8, 3], 0.9);
        save_float_map(&dir.path().join("views/v0/normals_inv.pfm"), &skewed).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::InvalidManifest { .. })
        ));

        // Two env windows.
        let dir = tempfile::tempdir().unwrap();
        bundle = sample_bundle(8, 8);
        bundle.lights[0].kind = LightKind::EnvWindow;
        save_bundle(dir.path(), &bundle).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::InvalidManifest { .. })
        ));

        // Non-finite uv inside the geometry mask.
        let dir = tempfile::tempdir().unwrap();
        bundle = sample_bundle(8, 8);
        save_bundle(dir.path(), &bundle).unwrap();
        let bad_uv = Tensor::full(&[8, 8, 2], f64::INFINITY);
        save_float_map(&dir.path().join("parts/floor/v0/uv_geo.pfm"), &bad_uv).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(BundleError::InvalidManifest { .. })
        ));
    }

    #[test]
    fn fitted_assets_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle(8, 8);
        save_bundle(dir.path(), &bundle).unwrap();

        let template = matgraph::find_template("wood").unwrap();
        let theta = matgraph::sample_random_params(template, 42);
        let fit = FitResult {
            graph_id: "wood".into(),
            theta,
            phi: crate::render::UvTransformParams::identity(),
            roughness_mean: 0.42,
            albedo_scale: [1.1, 0.9, 1.0],
            roughness_scale: 1.2,
            loss_trace: vec![1.0, 0.5],
            final_loss: 0.5,
        };
        let assets = FittedAssets {
            method: "fit".into(),
            lighting_source: "composite".into(),
            parts: vec![FittedPart {
                part_id: "floor".into(),
                mode: "optimize".into(),
                selected_view: 0,
                fit: Some(fit),
                homogeneous: None,
                texture_res: 64,
                flat_normals: false,
                diffuse_only: false,
            }],
            light_coeffs: LightCoeffs::ones(2),
            exposures: ExposureSet::ones(1, 0),
        };
        save_fitted_assets(dir.path(), &bundle, &assets).unwrap();

        let back = load_fitted_assets(dir.path()).unwrap();
        assert_eq!(back.parts.len(), 1);
        let f = back.parts[0].fit.as_ref().unwrap();
        // Full-precision parameters survive the JSON report bit-exactly.
        assert_eq!(f.theta, assets.parts[0].fit.as_ref().unwrap().theta);
        assert_eq!(f.albedo_scale, [1.1, 0.9, 1.0]);

        let expected = fitted_part_textures(&assets.parts[0]).unwrap();
        let loaded = load_part_textures(dir.path(), "floor").unwrap();
        for (a, b) in loaded.albedo.data().iter().zip(expected.albedo.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        for (a, b) in loaded
            .roughness
            .data()
            .iter()
            .zip(expected.roughness.data())
        {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        for (a, b) in loaded.normals.data().iter().zip(expected.normals.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn fitted_assets_validate_part_ids() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle(8, 8);
        let assets = FittedAssets {
            method: "fit".into(),
            lighting_source: "composite".into(),
            parts: vec![FittedPart {
                part_id: "no-such-part".into(),
                mode: "optimize".into(),
                selected_view: 0,
                fit: None,
                homogeneous: Some(HomogeneousMaterial {
                    albedo: [0.5, 0.5, 0.5],
                    roughness: 0.7,
                }),
                texture_res: 8,
                flat_normals: false,
                diffuse_only: false,
            }],
            light_coeffs: LightCoeffs::ones(1),
            exposures: ExposureSet::ones(1, 0),
        };
        assert!(matches!(
            save_fitted_assets(dir.path(), &bundle, &assets),
            Err(BundleError::UnknownPart { .. })
        ));

        // Empty result list still writes a valid report.
        let empty = FittedAssets {
            method: "fit".into(),
            lighting_source: "composite".into(),
            parts: Vec::new(),
            light_coeffs: LightCoeffs::ones(1),
            exposures: ExposureSet::ones(1, 0),
        };
        save_fitted_assets(dir.path(), &bundle, &empty).unwrap();
        let back = load_fitted_assets(dir.path()).unwrap();
        assert!(back.parts.is_empty());
    }
}
