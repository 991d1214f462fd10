//! Procedural material graphs.
//!
//! A [`GraphTemplate`] is a small DAG of generator and filter nodes plus a
//! parameter layout. Parameters live in a normalized vector theta in [0,1]^d;
//! each entry maps affinely into a physical range inside its node. The last
//! three entries of every template are an RGB albedo offset applied after the
//! albedo node, before the final clamp.
//!
//! [`eval_graph`] lowers a template onto a [`Tape`], so d(texture)/d(theta)
//! comes out of the tape's backward pass. Generator nodes (noise, bricks,
//! checkers, stripes) are theta-independent; their rasters are cached per
//! (kind, attrs, resolution) and enter the tape as constants, which makes
//! their gradients exactly zero by construction.

pub mod gen;

use std::collections::{HashMap, HashSet};
use std::sync::{LazyLock, Mutex};

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::tape::{AdError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MatGraphError {
    #[error("unknown node kind {kind:?} in node {node:?}")]
    UnknownNodeKind { node: String, kind: String },
    #[error("node {node:?} references {input:?} which is not an earlier node (cycle or missing)")]
    CyclicGraph { node: String, input: String },
    #[error("theta has {got} entries, template {template:?} needs {expected}")]
    ParamLengthMismatch {
        template: String,
        expected: usize,
        got: usize,
    },
    #[error("resolution {res} is not a power of two in [64, 2048]")]
    UnsupportedResolution { res: usize },
    #[error("invalid template {template:?}: {msg}")]
    InvalidTemplate { template: String, msg: String },
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Physical range for one normalized parameter, bound to a node knob.
#[derive(Clone, Debug, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub node: String,
    pub field: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub attrs: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct GraphOutputs {
    pub albedo: String,
    pub roughness: String,
    pub height: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GraphTemplate {
    pub id: String,
    pub category: String,
    /// Height-to-normal strength s: N = normalize(-s dh/du, -s dh/dv, 1).
    #[serde(default = "default_normal_strength")]
    pub normal_strength: f64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub outputs: GraphOutputs,
}

fn default_normal_strength() -> f64 {
    1.0
}

const KNOWN_KINDS: &[&str] = &[
    "valueNoise",
    "cellularNoise",
    "brick",
    "checker",
    "stripes",
    "constant",
    "levels",
    "blend",
    "colorizeRamp",
    "hsvAdjust",
    "scalarRemap",
    "tile",
    "invert",
];

const GENERATOR_KINDS: &[&str] = &["valueNoise", "cellularNoise", "brick", "checker", "stripes"];

/// Knobs each filter kind accepts via params or attrs.
fn knob_fields(kind: &str, attrs: &serde_json::Map<String, serde_json::Value>) -> Vec<String> {
    match kind {
        "levels" => ["inLow", "inHigh", "outLow", "outHigh", "gamma"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        "blend" => vec!["t".to_string()],
        "colorizeRamp" => {
            let knots = attrs.get("knots").and_then(|v| v.as_u64()).unwrap_or(2);
            let mut fields = Vec::new();
            for k in 0..knots {
                for ch in ["r", "g", "b"] {
                    fields.push(format!("c{k}.{ch}"));
                }
            }
            fields
        }
        "hsvAdjust" => ["hue", "sat", "val"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        "scalarRemap" => ["scale", "offset"].iter().map(|s| s.to_string()).collect(),
        "constant" => ["r", "g", "b", "v"].iter().map(|s| s.to_string()).collect(),
        _ => Vec::new(),
    }
}

impl GraphTemplate {
    pub fn from_json(json: &str) -> Result<GraphTemplate, MatGraphError> {
        let tpl: GraphTemplate =
            serde_json::from_str(json).map_err(|e| MatGraphError::InvalidTemplate {
                template: "<parse>".into(),
                msg: e.to_string(),
            })?;
        tpl.validate()?;
        Ok(tpl)
    }

    /// Total theta length: declared params plus the 3 albedo-offset entries.
    pub fn param_count(&self) -> usize {
        self.params.len() + 3
    }

    fn invalid(&self, msg: impl Into<String>) -> MatGraphError {
        MatGraphError::InvalidTemplate {
            template: self.id.clone(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<(), MatGraphError> {
        if self.nodes.is_empty() {
            return Err(self.invalid("no nodes"));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for node in &self.nodes {
            if !KNOWN_KINDS.contains(&node.kind.as_str()) {
                return Err(MatGraphError::UnknownNodeKind {
                    node: node.id.clone(),
                    kind: node.kind.clone(),
                });
            }
            // Topological order required: inputs must already be defined.
            for input in &node.inputs {
                if !seen.contains(input.as_str()) {
                    return Err(MatGraphError::CyclicGraph {
                        node: node.id.clone(),
                        input: input.clone(),
                    });
                }
            }
            let arity_ok = match node.kind.as_str() {
                k if GENERATOR_KINDS.contains(&k) => node.inputs.is_empty(),
                "constant" => node.inputs.is_empty(),
                "blend" => node.inputs.len() == 2 || node.inputs.len() == 3,
                "levels" | "colorizeRamp" | "hsvAdjust" | "scalarRemap" | "tile" | "invert" => {
                    node.inputs.len() == 1
                }
                _ => false,
            };
            if !arity_ok {
                return Err(self.invalid(format!(
                    "node {:?} ({}) has {} inputs",
                    node.id,
                    node.kind,
                    node.inputs.len()
                )));
            }
            if !seen.insert(&node.id) {
                return Err(self.invalid(format!("duplicate node id {:?}", node.id)));
            }
        }
        let ids: HashMap<&str, &NodeSpec> = self.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        let mut param_names = HashSet::new();
        for p in &self.params {
            if !(p.lo < p.hi) {
                return Err(self.invalid(format!("param {:?}: lo must be < hi", p.name)));
            }
            if !param_names.insert(p.name.as_str()) {
                return Err(self.invalid(format!("duplicate param {:?}", p.name)));
            }
            let node = ids.get(p.node.as_str()).ok_or_else(|| {
                self.invalid(format!("param {:?} references missing node", p.name))
            })?;
            if GENERATOR_KINDS.contains(&node.kind.as_str()) {
                return Err(self.invalid(format!(
                    "param {:?} drives generator {:?}; generators are theta-independent",
                    p.name, p.node
                )));
            }
            if !knob_fields(&node.kind, &node.attrs).contains(&p.field) {
                return Err(self.invalid(format!(
                    "param {:?}: node kind {} has no field {:?}",
                    p.name, node.kind, p.field
                )));
            }
        }
        for (label, id) in [
            ("albedo", &self.outputs.albedo),
            ("roughness", &self.outputs.roughness),
            ("height", &self.outputs.height),
        ] {
            if !ids.contains_key(id.as_str()) {
                return Err(self.invalid(format!("{label} output references missing node {id:?}")));
            }
        }
        Ok(())
    }
}

/// Textures produced by one graph evaluation, as tape vars of shape
/// [res, res, c]: albedo (3, clamped to [0,1]), tangent-space normals (3,
/// unit), roughness (1, clamped to [0.01, 1]), raw height (1).
pub struct TextureSet {
    pub theta: Var,
    pub albedo: Var,
    pub normals: Var,
    pub roughness: Var,
    pub height: Var,
}

fn is_supported_resolution(res: usize) -> bool {
    res.is_power_of_two() && (64..=2048).contains(&res)
}

static GEN_CACHE: LazyLock<Mutex<HashMap<String, Tensor>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

fn cached_generator(node: &NodeSpec, res: usize) -> Result<Tensor, MatGraphError> {
    let key = format!(
        "{}|{}|{}",
        node.kind,
        serde_json::Value::Object(node.attrs.clone()),
        res
    );
    if let Some(hit) = GEN_CACHE.lock().unwrap().get(&key) {
        return Ok(hit.clone());
    }
    let raster = rasterize_generator(node, res)?;
    GEN_CACHE.lock().unwrap().insert(key, raster.clone());
    Ok(raster)
}

fn attr_f64(node: &NodeSpec, key: &str, default: f64) -> f64 {
    node.attrs
        .get(key)
        .and_then(|v| v.as_f64())
        .unwrap_or(default)
}

fn attr_u64(node: &NodeSpec, key: &str, default: u64) -> u64 {
    node.attrs
        .get(key)
        .and_then(|v| v.as_u64())
        .unwrap_or(default)
}

fn attr_str<'a>(node: &'a NodeSpec, key: &str, default: &'a str) -> &'a str {
    node.attrs
        .get(key)
        .and_then(|v| v.as_str())
        .unwrap_or(default)
}

fn rasterize_generator(node: &NodeSpec, res: usize) -> Result<Tensor, MatGraphError> {
    Ok(match node.kind.as_str() {
        "valueNoise" => gen::value_noise(
            res,
            attr_u64(node, "seed", 1),
            attr_u64(node, "cells", 8) as usize,
            attr_u64(node, "octaves", 3) as usize,
        ),
        "cellularNoise" => gen::cellular_noise(
            res,
            attr_u64(node, "seed", 1),
            attr_u64(node, "cells", 8) as usize,
        ),
        "brick" => gen::brick(
            res,
            attr_u64(node, "seed", 1),
            attr_u64(node, "rows", 4) as usize,
            attr_u64(node, "cols", 8) as usize,
            attr_f64(node, "mortar", 0.06),
            attr_f64(node, "bevel", 0.05),
            attr_f64(node, "variation", 0.3),
        ),
        "checker" => gen::checker(res, attr_u64(node, "n", 8) as usize),
        "stripes" => {
            let profile = match attr_str(node, "profile", "sine") {
                "square" => gen::StripeProfile::Square,
                _ => gen::StripeProfile::Sine,
            };
            let axis = match attr_str(node, "axis", "u") {
                "v" => gen::StripeAxis::V,
                _ => gen::StripeAxis::U,
            };
            gen::stripes(res, attr_u64(node, "n", 8) as usize, profile, axis)
        }
        other => {
            return Err(MatGraphError::UnknownNodeKind {
                node: node.id.clone(),
                kind: other.to_string(),
            })
        }
    })
}

struct EvalCtx<'t> {
    tape: &'t Tape,
    res: usize,
    theta: Var,
    /// (node id, field) -> param index and physical range.
    bindings: HashMap<(String, String), (usize, f64, f64)>,
}

impl<'t> EvalCtx<'t> {
    /// Scalar knob: a theta-driven affine value if a param binds this field,
    /// otherwise the attr value (or the kind default) as a constant.
    fn knob(&self, node: &NodeSpec, field: &str, default: f64) -> Result<Var, MatGraphError> {
        if let Some((idx, lo, hi)) = self.bindings.get(&(node.id.clone(), field.to_string())) {
            let raw = self.tape.index1(self.theta, *idx)?;
            let scaled = self.tape.scale(raw, hi - lo);
            Ok(self.tape.offset(scaled, *lo))
        } else {
            Ok(self.tape.scalar_const(attr_f64(node, field, default))?)
        }
    }
}

/// Lowers `template` onto `tape` at `theta` (normalized, clamped to [0,1])
/// and `res` texels per side.
pub fn eval_graph(
    tape: &Tape,
    template: &GraphTemplate,
    theta: &[f64],
    res: usize,
) -> Result<TextureSet, MatGraphError> {
    if !is_supported_resolution(res) {
        return Err(MatGraphError::UnsupportedResolution { res });
    }
    if theta.len() != template.param_count() {
        return Err(MatGraphError::ParamLengthMismatch {
            template: template.id.clone(),
            expected: template.param_count(),
            got: theta.len(),
        });
    }
    let theta_clamped: Vec<f64> = theta.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let theta_var = tape.param(Tensor::new(vec![theta.len()], theta_clamped)?)?;

    let mut bindings = HashMap::new();
    for (i, p) in template.params.iter().enumerate() {
        bindings.insert((p.node.clone(), p.field.clone()), (i, p.lo, p.hi));
    }
    let ctx = EvalCtx {
        tape,
        res,
        theta: theta_var,
        bindings,
    };

    let mut vars: HashMap<&str, Var> = HashMap::new();
    for node in &template.nodes {
        let out = eval_node(&ctx, node, &vars)?;
        vars.insert(&node.id, out);
    }

    let albedo_raw = vars[template.outputs.albedo.as_str()];
    if *tape.shape(albedo_raw).last().unwrap() != 3 {
        return Err(MatGraphError::InvalidTemplate {
            template: template.id.clone(),
            msg: "albedo output must have 3 channels".into(),
        });
    }
    let rough_raw = vars[template.outputs.roughness.as_str()];
    if *tape.shape(rough_raw).last().unwrap() != 1 {
        return Err(MatGraphError::InvalidTemplate {
            template: template.id.clone(),
            msg: "roughness output must have 1 channel".into(),
        });
    }
    let height = vars[template.outputs.height.as_str()];
    if *tape.shape(height).last().unwrap() != 1 {
        return Err(MatGraphError::InvalidTemplate {
            template: template.id.clone(),
            msg: "height output must have 1 channel".into(),
        });
    }

    // Trailing 3 theta entries: RGB offset added before the final clamp.
    let d = template.param_count();
    let mut offs = Vec::new();
    for i in (d - 3)..d {
        let raw = tape.index1(theta_var, i)?;
        offs.push(tape.offset(raw, -0.5));
    }
    let offset = tape.concat_last(&offs)?;
    let shifted = tape.add(albedo_raw, offset)?;
    let albedo = tape.clamp(shifted, 0.0, 1.0);

    let roughness = tape.clamp(rough_raw, 0.01, 1.0);
    let normals = normals_from_height(tape, height, template.normal_strength)?;

    Ok(TextureSet {
        theta: theta_var,
        albedo,
        normals,
        roughness,
        height,
    })
}

/// Tangent-space normals from a height field via wrap-around central
/// differences in UV units: N = normalize(-s dh/du, -s dh/dv, 1).
pub fn normals_from_height(tape: &Tape, height: Var, strength: f64) -> Result<Var, AdError> {
    let shape = tape.shape(height);
    let (h, w) = (shape[0], shape[1]);
    // Central difference: value at x+1 arrives via roll(-1).
    let right = tape.roll(height, 1, -1)?;
    let left = tape.roll(height, 1, 1)?;
    let du = tape.sub(right, left)?;
    let dhdu = tape.scale(du, w as f64 / 2.0);
    let down = tape.roll(height, 0, -1)?;
    let up = tape.roll(height, 0, 1)?;
    let dv = tape.sub(down, up)?;
    let dhdv = tape.scale(dv, h as f64 / 2.0);
    let nx = tape.scale(dhdu, -strength);
    let ny = tape.scale(dhdv, -strength);
    let ones = tape.constant(Tensor::full(&[h, w, 1], 1.0))?;
    let stacked = tape.concat_last(&[nx, ny, ones])?;
    tape.normalize3(stacked)
}

fn eval_node(
    ctx: &EvalCtx,
    node: &NodeSpec,
    vars: &HashMap<&str, Var>,
) -> Result<Var, MatGraphError> {
    let tape = ctx.tape;
    let input = |i: usize| vars[node.inputs[i].as_str()];
    Ok(match node.kind.as_str() {
        k if GENERATOR_KINDS.contains(&k) => {
            let raster = cached_generator(node, ctx.res)?;
            tape.constant(raster)?
        }
        "constant" => {
            let channels = attr_u64(node, "channels", 3);
            let scalars = if channels == 1 {
                vec![ctx.knob(node, "v", 0.5)?]
            } else {
                vec![
                    ctx.knob(node, "r", 0.5)?,
                    ctx.knob(node, "g", 0.5)?,
                    ctx.knob(node, "b", 0.5)?,
                ]
            };
            let vec = tape.concat_last(&scalars)?;
            tape.broadcast_to(vec, &[ctx.res, ctx.res, channels as usize])?
        }
        "levels" => {
            let x = input(0);
            let in_lo = ctx.knob(node, "inLow", 0.0)?;
            let in_hi = ctx.knob(node, "inHigh", 1.0)?;
            let out_lo = ctx.knob(node, "outLow", 0.0)?;
            let out_hi = ctx.knob(node, "outHigh", 1.0)?;
            let gamma = ctx.knob(node, "gamma", 1.0)?;
            // u = clamp((x - inLow)/(inHigh - inLow)), y = outLow + (outHigh-outLow) u^gamma
            let num = tape.sub(x, in_lo)?;
            let den = tape.sub(in_hi, in_lo)?;
            let u = tape.div(num, den)?;
            let u = tape.clamp(u, 0.0, 1.0);
            let gamma_floor = tape.scalar_const(0.05)?;
            let gamma = tape.max(gamma, gamma_floor)?;
            let log_u = tape.log(u);
            let glog = tape.mul(gamma, log_u)?;
            let powed = tape.exp(glog);
            let span = tape.sub(out_hi, out_lo)?;
            let scaled = tape.mul(powed, span)?;
            tape.add(scaled, out_lo)?
        }
        "blend" => {
            let a = input(0);
            let b = input(1);
            if node.inputs.len() == 3 {
                tape.lerp(a, b, input(2))?
            } else {
                let t = ctx.knob(node, "t", 0.5)?;
                tape.lerp(a, b, t)?
            }
        }
        "colorizeRamp" => {
            let u = input(0);
            let knots = attr_u64(node, "knots", 2).max(2) as usize;
            let u = tape.clamp(u, 0.0, 1.0);
            let mut acc: Option<Var> = None;
            for k in 0..knots {
                let pos = k as f64 / (knots - 1) as f64;
                // Hat weight: 1 at the knot, linear to 0 at the neighbors.
                let centered = tape.offset(u, -pos);
                let dist = tape.abs(centered);
                let scaled = tape.scale(dist, -((knots - 1) as f64));
                let w = tape.clamp(tape.offset(scaled, 1.0), 0.0, 1.0);
                let default = k as f64 / (knots - 1) as f64;
                let color = tape.concat_last(&[
                    ctx.knob(node, &format!("c{k}.r"), default)?,
                    ctx.knob(node, &format!("c{k}.g"), default)?,
                    ctx.knob(node, &format!("c{k}.b"), default)?,
                ])?;
                let term = tape.mul(w, color)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            acc.expect("knots >= 2")
        }
        "hsvAdjust" => {
            let rgb = input(0);
            let hue = ctx.knob(node, "hue", 0.0)?;
            let sat = ctx.knob(node, "sat", 1.0)?;
            let val = ctx.knob(node, "val", 1.0)?;
            let rotated = hue_rotate(tape, rgb, hue)?;
            // Saturation: lerp from luma toward the color.
            let luma_w = tape.constant(Tensor::new(vec![3], vec![0.2126, 0.7152, 0.0722])?)?;
            let luma = tape.dot3(rotated, tape.broadcast_to(luma_w, &tape.shape(rotated))?)?;
            let saturated = tape.lerp(luma, rotated, sat)?;
            tape.mul(saturated, val)?
        }
        "scalarRemap" => {
            let x = input(0);
            let scale = ctx.knob(node, "scale", 1.0)?;
            let offset = ctx.knob(node, "offset", 0.0)?;
            let scaled = tape.mul(x, scale)?;
            tape.add(scaled, offset)?
        }
        "tile" => {
            let x = input(0);
            let n = attr_u64(node, "n", 2).max(1) as f64;
            let res = ctx.res;
            let uv = Tensor::from_fn(&[res, res, 2], |i| {
                let pix = i / 2;
                let (y, x_) = (pix / res, pix % res);
                let t = if i % 2 == 0 {
                    (x_ as f64 + 0.5) / res as f64
                } else {
                    (y as f64 + 0.5) / res as f64
                };
                (t * n).fract()
            });
            let uv = tape.constant(uv)?;
            tape.bilinear_sample_wrap(x, uv)?
        }
        "invert" => {
            let x = input(0);
            let neg = tape.neg(x);
            tape.offset(neg, 1.0)
        }
        other => {
            return Err(MatGraphError::UnknownNodeKind {
                node: node.id.clone(),
                kind: other.to_string(),
            })
        }
    })
}

/// Rotates hue around the luma axis (feColorMatrix hueRotate form), with the
/// angle as a differentiable scalar.
fn hue_rotate(tape: &Tape, rgb: Var, angle: Var) -> Result<Var, MatGraphError> {
    let c = tape.cos(angle);
    let s = tape.sin(angle);
    let r = tape.slice_last(rgb, 0, 1)?;
    let g = tape.slice_last(rgb, 1, 1)?;
    let b = tape.slice_last(rgb, 2, 1)?;
    // Each output channel is sum over in-channels of (base + cc*c + ss*s).
    let coef = |base: f64, cc: f64, ss: f64| -> Result<Var, MatGraphError> {
        let ct = tape.scale(c, cc);
        let st = tape.scale(s, ss);
        let sum = tape.add(ct, st)?;
        Ok(tape.offset(sum, base))
    };
    let rows = [
        [
            coef(0.213, 0.787, -0.213)?,
            coef(0.715, -0.715, -0.715)?,
            coef(0.072, -0.072, 0.928)?,
        ],
        [
            coef(0.213, -0.213, 0.143)?,
            coef(0.715, 0.285, 0.140)?,
            coef(0.072, -0.072, -0.283)?,
        ],
        [
            coef(0.213, -0.213, -0.787)?,
            coef(0.715, -0.715, 0.715)?,
            coef(0.072, 0.928, 0.072)?,
        ],
    ];
    let mut out_ch = Vec::with_capacity(3);
    for row in rows {
        let tr = tape.mul(r, row[0])?;
        let tg = tape.mul(g, row[1])?;
        let tb = tape.mul(b, row[2])?;
        let sum = tape.add(tape.add(tr, tg)?, tb)?;
        out_ch.push(sum);
    }
    Ok(tape.concat_last(&out_ch)?)
}

/// Uniform theta draw in [0,1]^d, deterministic in (template, seed).
pub fn sample_random_params(template: &GraphTemplate, seed: u64) -> Vec<f64> {
    let mut h = 0xcbf29ce484222325u64;
    for b in template.id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = crate::rng::stream_indexed(seed, "matgraph.sample", h);
    (0..template.param_count()).map(|_| rng.gen()).collect()
}

macro_rules! bundled {
    ($($name:literal),+ $(,)?) => {
        &[$(($name, include_str!(concat!("manifests/", $name, ".json")))),+]
    };
}

const BUNDLED_MANIFESTS: &[(&str, &str)] = bundled![
    "wood",
    "brick",
    "tile",
    "plaster",
    "metal",
    "fabric",
    "checker",
    "speckled",
    "homogeneous",
];

static COLLECTION: LazyLock<Vec<GraphTemplate>> = LazyLock::new(|| {
    BUNDLED_MANIFESTS
        .iter()
        .map(|(name, json)| {
            GraphTemplate::from_json(json)
                .unwrap_or_else(|e| panic!("bundled template {name} invalid: {e}"))
        })
        .collect()
});

/// The built-in template collection (stable order, unique ids).
pub fn list_collection() -> &'static [GraphTemplate] {
    &COLLECTION
}

pub fn find_template(id: &str) -> Option<&'static GraphTemplate> {
    list_collection().iter().find(|t| t.id == id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, max_rel_err};

    fn mid_theta(t: &GraphTemplate) -> Vec<f64> {
        vec![0.5; t.param_count()]
    }

    #[test]
    fn collection_has_nine_unique_templates() {
        let c = list_collection();
        assert!(c.len() >= 9, "only {} templates", c.len());
        let ids: HashSet<&str> = c.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids.len(), c.len());
        let homog = find_template("homogeneous").expect("homogeneous template");
        assert_eq!(homog.param_count(), 7);
    }

    #[test]
    fn homogeneous_outputs_are_constant_and_exact() {
        let tpl = find_template("homogeneous").unwrap();
        // 3 albedo, 1 roughness, 3 offsets (0.5 -> zero offset).
        let theta = vec![0.3, 0.5, 0.7, 0.25, 0.5, 0.5, 0.5];
        let tape = Tape::new();
        let tex = eval_graph(&tape, tpl, &theta, 64).unwrap();
        let albedo = tape.value(tex.albedo);
        for px in albedo.data().chunks(3) {
            assert_eq!(px, &[0.3, 0.5, 0.7]);
        }
        let rough = tape.value(tex.roughness);
        let expect = 0.01 + 0.99 * 0.25;
        for v in rough.data() {
            assert!((v - expect).abs() < 1e-12);
        }
        let normals = tape.value(tex.normals);
        for n in normals.data().chunks(3) {
            assert_eq!(n, &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn albedo_offset_shifts_before_clamp() {
        let tpl = find_template("homogeneous").unwrap();
        let base = vec![0.5, 0.5, 0.9, 0.5, 0.5, 0.5, 0.5];
        let mut shifted = base.clone();
        shifted[4] = 0.7; // +0.2 red offset
        shifted[6] = 1.0; // +0.5 blue offset, clamps at 1
        let tape = Tape::new();
        let a = eval_graph(&tape, tpl, &base, 64).unwrap();
        let b = eval_graph(&tape, tpl, &shifted, 64).unwrap();
        let pa = tape.value(a.albedo);
        let pb = tape.value(b.albedo);
        assert!((pb.data()[0] - (pa.data()[0] + 0.2)).abs() < 1e-12);
        assert_eq!(pb.data()[2], 1.0);
    }

    #[test]
    fn levels_identity_passes_input_through() {
        // Input squeezed into [0.2, 0.8] so the roughness clamp is a no-op
        // and the comparison sees the raw levels output.
        let json = r##"{
            "id": "lvltest", "category": "test",
            "nodes": [
                {"id": "n", "kind": "valueNoise", "attrs": {"seed": 3, "cells": 8, "octaves": 2}},
                {"id": "mid", "kind": "scalarRemap", "inputs": ["n"], "attrs": {"scale": 0.6, "offset": 0.2}},
                {"id": "lv", "kind": "levels", "inputs": ["mid"]},
                {"id": "a", "kind": "colorizeRamp", "inputs": ["lv"], "attrs": {"knots": 2}}
            ],
            "params": [
                {"name": "inLow", "node": "lv", "field": "inLow", "lo": 0.0, "hi": 1.0},
                {"name": "inHigh", "node": "lv", "field": "inHigh", "lo": 0.0, "hi": 1.0},
                {"name": "outLow", "node": "lv", "field": "outLow", "lo": 0.0, "hi": 1.0},
                {"name": "outHigh", "node": "lv", "field": "outHigh", "lo": 0.0, "hi": 1.0},
                {"name": "gamma", "node": "lv", "field": "gamma", "lo": 0.0, "hi": 2.0}
            ],
            "outputs": {"albedo": "a", "roughness": "lv", "height": "mid"}
        }"##;
        let tpl = GraphTemplate::from_json(json).unwrap();
        // inLow=0, inHigh=1, outLow=0, outHigh=1, gamma normalized 0.5 -> 1.0.
        let theta = vec![0.0, 1.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5];
        let tape = Tape::new();
        let tex = eval_graph(&tape, &tpl, &theta, 64).unwrap();
        let raw = tape.value(tex.height);
        let lv = tape.value(tex.roughness);
        for (a, b) in raw.data().iter().zip(lv.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn all_templates_evaluate_with_valid_ranges() {
        for tpl in list_collection() {
            let tape = Tape::new();
            let tex = eval_graph(&tape, tpl, &mid_theta(tpl), 64)
                .unwrap_or_else(|e| panic!("{}: {e}", tpl.id));
            let albedo = tape.value(tex.albedo);
            assert!(
                albedo.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "{}",
                tpl.id
            );
            let rough = tape.value(tex.roughness);
            assert!(
                rough.data().iter().all(|v| (0.01..=1.0).contains(v)),
                "{}",
                tpl.id
            );
            let normals = tape.value(tex.normals);
            for n in normals.data().chunks(3) {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((len - 1.0).abs() < 1e-4, "{}: |N| = {len}", tpl.id);
            }
        }
    }

    #[test]
    fn generators_ignore_theta() {
        let json = r##"{
            "id": "gentest", "category": "test",
            "nodes": [
                {"id": "n", "kind": "stripes", "attrs": {"n": 8}},
                {"id": "a", "kind": "colorizeRamp", "inputs": ["n"], "attrs": {"knots": 2}}
            ],
            "outputs": {"albedo": "a", "roughness": "n", "height": "n"}
        }"##;
        let tpl = GraphTemplate::from_json(json).unwrap();
        let tape = Tape::new();
        let t1 = eval_graph(&tape, &tpl, &[0.5, 0.5, 0.5], 64).unwrap();
        let t2 = eval_graph(&tape, &tpl, &[0.9, 0.1, 0.4], 64).unwrap();
        // Height is the raw generator: identical bits regardless of theta.
        assert_eq!(tape.value(t1.height).data(), tape.value(t2.height).data());
        // And its gradient w.r.t. theta is exactly zero (constant on tape).
        let seed = Tensor::full(&[64, 64, 1], 1.0);
        let g = tape.backward(t1.height, seed).unwrap();
        let gt = g.wrt(t1.theta);
        assert!(gt.is_none() || gt.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_random_params_is_seeded_and_centered() {
        let tpl = find_template("wood").unwrap();
        let a = sample_random_params(tpl, 5);
        let b = sample_random_params(tpl, 5);
        let c = sample_random_params(tpl, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), tpl.param_count());
        let mut acc = 0.0;
        let n = 200;
        for s in 0..n {
            let draw = sample_random_params(tpl, s);
            acc += draw.iter().sum::<f64>() / draw.len() as f64;
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn rejects_bad_resolution_and_theta_length() {
        let tpl = find_template("checker").unwrap();
        let tape = Tape::new();
        assert!(matches!(
            eval_graph(&tape, tpl, &mid_theta(tpl), 100),
            Err(MatGraphError::UnsupportedResolution { res: 100 })
        ));
        assert!(matches!(
            eval_graph(&tape, tpl, &[0.5], 64),
            Err(MatGraphError::ParamLengthMismatch { .. })
        ));
    }

    #[test]
    fn forward_references_are_cyclic_errors() {
        let json = r##"{
            "id": "cyc", "category": "test",
            "nodes": [
                {"id": "a", "kind": "invert", "inputs": ["b"]},
                {"id": "b", "kind": "checker", "attrs": {"n": 4}}
            ],
            "outputs": {"albedo": "a", "roughness": "a", "height": "a"}
        }"##;
        assert!(matches!(
            GraphTemplate::from_json(json),
            Err(MatGraphError::CyclicGraph { .. })
        ));
    }

    #[test]
    fn normals_from_height_matches_ramp_formula() {
        let tape = Tape::new();
        // Constant height -> flat normals.
        let flat = tape.param(Tensor::full(&[8, 8, 1], 0.4)).unwrap();
        let n = normals_from_height(&tape, flat, 2.0).unwrap();
        for px in tape.value(n).data().chunks(3) {
            assert_eq!(px, &[0.0, 0.0, 1.0]);
        }
        // h(u, v) = u: N prop to normalize(-s, 0, 1) away from the wrap seam.
        let res = 16;
        let ramp = tape
            .param(Tensor::from_fn(&[res, res, 1], |i| {
                ((i % res) as f64 + 0.5) / res as f64
            }))
            .unwrap();
        let s = 0.8;
        let n = normals_from_height(&tape, ramp, s).unwrap();
        let nv = tape.value(n);
        let expect_len = (s * s + 1.0).sqrt();
        let (ex, ez) = (-s / expect_len, 1.0 / expect_len);
        let px = &nv.data()[(res * 5 + 7) * 3..(res * 5 + 7) * 3 + 3];
        assert!((px[0] - ex).abs() < 1e-9 && px[1].abs() < 1e-12 && (px[2] - ez).abs() < 1e-9);
    }

    #[test]
    fn stronger_height_tilts_normals_more() {
        let tpl = find_template("wood").unwrap();
        let mut strong = tpl.clone();
        strong.normal_strength = tpl.normal_strength * 2.0;
        let theta = mid_theta(tpl);
        let tape = Tape::new();
        let a = eval_graph(&tape, tpl, &theta, 64).unwrap();
        let b = eval_graph(&tape, &strong, &theta, 64).unwrap();
        let mean_z = |v: Var| -> f64 {
            let t = tape.value(v);
            t.data().chunks(3).map(|c| c[2]).sum::<f64>() / (t.len() / 3) as f64
        };
        assert!(mean_z(b.normals) < mean_z(a.normals));
    }

    #[test]
    fn textures_tile_seamlessly() {
        // Wrap seam difference no worse than 2x the mean interior difference.
        for tpl in list_collection() {
            let tape = Tape::new();
            let theta = sample_random_params(tpl, 17);
            let tex = eval_graph(&tape, tpl, &theta, 128).unwrap();
            for (label, var) in [("albedo", tex.albedo), ("roughness", tex.roughness)] {
                let t = tape.value(var);
                let s = t.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let d = t.data();
                let mut seam = 0.0;
                let mut interior = 0.0;
                let mut icnt = 0usize;
                for y in 0..h {
                    for ch in 0..c {
                        seam += (d[(y * w) * c + ch] - d[(y * w + w - 1) * c + ch]).abs();
                        for x in 0..w - 1 {
                            interior +=
                                (d[(y * w + x) * c + ch] - d[(y * w + x + 1) * c + ch]).abs();
                            icnt += 1;
                        }
                    }
                }
                seam /= (h * c) as f64;
                interior /= icnt as f64;
                assert!(
                    seam <= 2.0 * interior + 1e-9,
                    "{} {}: seam {seam} interior {interior}",
                    tpl.id,
                    label
                );
            }
        }
    }

    #[test]
    fn halving_resolution_matches_downsampled_eval() {
        for tpl in list_collection() {
            let theta = sample_random_params(tpl, 3);
            let tape = Tape::new();
            let hi = eval_graph(&tape, tpl, &theta, 256).unwrap();
            let lo = eval_graph(&tape, tpl, &theta, 128).unwrap();
            let hi_down = tape.avg_pool2(hi.albedo).unwrap();
            let a = tape.value(hi_down);
            let b = tape.value(lo.albedo);
            let mae = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / a.len() as f64;
            assert!(mae <= 0.02, "{}: albedo MAE {mae}", tpl.id);
        }
    }

    #[test]
    fn texture_gradients_match_finite_differences() {
        // Weighted sum of albedo texels as scalar objective; d/d(theta)
        // against central differences.
        let tpl = find_template("wood").unwrap();
        let res = 64;
        let weights = Tensor::from_fn(&[res, res, 3], |i| ((i * 131 + 17) % 997) as f64 / 997.0);
        let objective = |theta: &[f64]| -> f64 {
            let tape = Tape::new();
            let tex = eval_graph(&tape, tpl, theta, res).unwrap();
            let albedo = tape.value(tex.albedo);
            albedo
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, w)| a * w)
                .sum()
        };
        let theta = sample_random_params(tpl, 12);
        let tape = Tape::new();
        let tex = eval_graph(&tape, tpl, &theta, res).unwrap();
        let g = tape.backward(tex.albedo, weights.clone()).unwrap();
        let analytic = g.wrt(tex.theta).unwrap().to_vec();
        let fd = fd_gradient(objective, &theta, 1e-5);
        let err = max_rel_err(&analytic, &fd, 1e-6);
        assert!(err <= 1e-4, "max rel err {err}");
    }
}
