//! Globally consistent lighting: ceiling light placement, nonnegative least
//! squares for per-light RGB intensities, closed-form per-view exposures,
//! alternating refinement, and composition of the refined lighting grids.
//!
//! The solve exploits render linearity in lighting: every view ships one
//! unit-intensity render per light source, so the model image is a
//! nonnegative combination of fixed images and the normal equations can be
//! accumulated once per refinement round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{LightingGrid, RenderError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RelightError {
    #[error("invalid room bounds: {msg}")]
    InvalidBounds { msg: String },
    #[error("{0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Nonnegative per-light RGB intensities, one coefficient vector per channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LightCoeffs {
    pub x_r: Vec<f64>,
    pub x_g: Vec<f64>,
    pub x_b: Vec<f64>,
    /// Degenerate columns or other solve anomalies, for the report.
    pub warnings: Vec<String>,
}

impl LightCoeffs {
    pub fn ones(n: usize) -> LightCoeffs {
        LightCoeffs {
            x_r: vec![1.0; n],
            x_g: vec![1.0; n],
            x_b: vec![1.0; n],
            warnings: Vec::new(),
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.x_r,
            1 => &self.x_g,
            _ => &self.x_b,
        }
    }

    pub fn len(&self) -> usize {
        self.x_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_r.is_empty()
    }

    /// RGB coefficients of source s.
    pub fn rgb(&self, s: usize) -> [f64; 3] {
        [self.x_r[s], self.x_g[s], self.x_b[s]]
    }
}

/// Per-view exposure scalars; the anchor view is pinned at exactly 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExposureSet {
    pub values: Vec<f64>,
    pub anchor: usize,
    pub warnings: Vec<String>,
}

impl ExposureSet {
    pub fn ones(n_views: usize, anchor: usize) -> ExposureSet {
        ExposureSet {
            values: vec![1.0; n_views],
            anchor,
            warnings: Vec::new(),
        }
    }
}

/// Uniform ceiling grid covering the room: ceil(extent / spacing) lights per
/// horizontal axis (x and z, y up), at least one, placed
/// at subdivision centers at ceiling height.
pub fn place_ceiling_lights(
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
    spacing: f64,
) -> Result<Vec<[f64; 3]>, RelightError> {
    for a in 0..3 {
        if !(bounds_max[a] > bounds_min[a]) {
            return Err(RelightError::InvalidBounds {
                msg: format!("axis {a}: {} .. {}", bounds_min[a], bounds_max[a]),
            });
        }
    }
    if !(spacing > 0.0) {
        return Err(RelightError::InvalidBounds {
            msg: format!("spacing {spacing}"),
        });
    }
    let len_x = bounds_max[0] - bounds_min[0];
    let len_z = bounds_max[2] - bounds_min[2];
    let nx = (len_x / spacing).ceil().max(1.0) as usize;
    let nz = (len_z / spacing).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(nx * nz);
    for iz in 0..nz {
        for ix in 0..nx {
            out.push([
                bounds_min[0] + (ix as f64 + 0.5) * len_x / nx as f64,
                bounds_max[1],
                bounds_min[2] + (iz as f64 + 0.5) * len_z / nz as f64,
            ]);
        }
    }
    Ok(out)
}

/// One view's contribution to the lighting solve: unit-intensity renders of
/// every light source, the photo, and the valid-pixel mask.
#[derive(Clone, Debug)]
pub struct ViewSolveInputs<'a> {
    pub per_light: Vec<&'a Tensor>,
    pub photo: &'a Tensor,
    pub valid: &'a Tensor,
}

/// Lawson-Hanson active set on the normal equations: minimize |Ax - b|^2
/// subject to x >= 0, given G = A^T A and h = A^T b.
fn nnls_gram(g: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let scale = h.iter().map(|v| v.abs()).fold(f64::MIN_POSITIVE, f64::max);
    let tol = 1e-12 * scale.max(1.0);
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    // w = h - G x, the negative gradient of the objective halves.
    let mut w: Vec<f64> = h.to_vec();
    for _outer in 0..(3 * n + 10) {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol && g[j][j] > 0.0 {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((j, _)) = best else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let z = solve_spd_subset(g, h, &idx);
            if z.iter().all(|&v| v > tol) {
                for (&i, &zi) in idx.iter().zip(&z) {
                    x[i] = zi;
                }
                break;
            }
            // Step toward z until the first passive variable hits zero.
            let mut alpha = 1.0f64;
            for (&i, &zi) in idx.iter().zip(&z) {
                if zi <= tol {
                    let xi = x[i];
                    if xi - zi > 0.0 {
                        alpha = alpha.min(xi / (xi - zi));
                    }
                }
            }
            for (&i, &zi) in idx.iter().zip(&z) {
                x[i] += alpha * (zi - x[i]);
            }
            for &i in &idx {
                if x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
        for i in 0..n {
            w[i] = h[i] - g[i].iter().zip(&x).map(|(gv, xv)| gv * xv).sum::<f64>();
        }
    }
    x
}

/// Gaussian elimination with partial pivoting on the passive-set submatrix.
fn solve_spd_subset(g: &[Vec<f64>], h: &[f64], idx: &[usize]) -> Vec<f64> {
    let m = idx.len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            a[r][c] = g[i][j];
        }
        a[r][m] = h[i];
    }
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in 0..m {
            if r != col {
                let f = a[r][col] / d;
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..m)
        .map(|r| {
            let d = a[r][r];
            if d.abs() < 1e-300 {
                0.0
            } else {
                a[r][m] / d
            }
        })
        .collect()
}

fn check_view_shapes(views: &[ViewSolveInputs]) -> Result<usize, RelightError> {
    let n = views
        .first()
        .map(|v| v.per_light.len())
        .ok_or_else(|| RelightError::ShapeMismatch("no views".into()))?;
    for (vi, v) in views.iter().enumerate() {
        if v.per_light.len() != n {
            return Err(RelightError::ShapeMismatch(format!(
                "view {vi} has {} light renders, expected {n}",
                v.per_light.len()
            )));
        }
        let s = v.photo.shape().to_vec();
        for p in &v.per_light {
            if p.shape() != &s[..] {
                return Err(RelightError::ShapeMismatch(format!(
                    "view {vi}: light render {:?} vs photo {:?}",
                    p.shape(),
                    s
                )));
            }
        }
        if v.valid.shape()[..2] != s[..2] {
            return Err(RelightError::ShapeMismatch(format!(
                "view {vi}: valid mask {:?} vs photo {:?}",
                v.valid.shape(),
                s
            )));
        }
    }
    Ok(n)
}

/// Per-channel nonnegative least squares for the light intensities. Columns
/// that never light a valid pixel are reported and pinned at zero.
pub fn solve_light_coeffs(
    views: &[ViewSolveInputs],
    exposures: &ExposureSet,
) -> Result<LightCoeffs, RelightError> {
    let n = check_view_shapes(views)?;
    let mut out = LightCoeffs {
        x_r: vec![0.0; n],
        x_g: vec![0.0; n],
        x_b: vec![0.0; n],
        warnings: Vec::new(),
    };
    for c in 0..3 {
        let mut gram = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for (vi, v) in views.iter().enumerate() {
            let e = exposures.values[vi];
            let mask = v.valid.data();
            let photo = v.photo.data();
            let lights: Vec<&[f64]> = v.per_light.iter().map(|t| t.data()).collect();
            for (pi, &m) in mask.iter().enumerate() {
                if m <= 0.0 {
                    continue;
                }
                let base = pi * 3 + c;
                for s in 0..n {
                    let ps = lights[s][base];
                    if ps == 0.0 {
                        continue;
                    }
                    rhs[s] += e * ps * photo[base];
                    for t in s..n {
                        gram[s][t] += e * e * ps * lights[t][base];
                    }
                }
            }
        }
        for s in 0..n {
            for t in 0..s {
                gram[s][t] = gram[t][s];
            }
        }
        for s in 0..n {
            if gram[s][s] <= 0.0 {
                out.warnings.push(format!(
                    "light {s} channel {c} never lights a valid pixel; coefficient pinned to 0"
                ));
            }
        }
        let x = nnls_gram(&gram, &rhs);
        match c {
            0 => out.x_r = x,
            1 => out.x_g = x,
            _ => out.x_b = x,
        }
    }
    Ok(out)
}

fn model_image(v: &ViewSolveInputs, coeffs: &LightCoeffs) -> Vec<f64> {
    let len = v.photo.len();
    let mut model = vec![0.0; len];
    for (s, light) in v.per_light.iter().enumerate() {
        let rgb = coeffs.rgb(s);
        for (i, lv) in light.data().iter().enumerate() {
            model[i] += rgb[i % 3] * lv;
        }
    }
    model
}

/// Closed-form per-view exposure against the current model images; the
/// anchor view stays exactly 1.
pub fn solve_exposures(
    views: &[ViewSolveInputs],
    coeffs: &LightCoeffs,
    anchor: usize,
) -> Result<ExposureSet, RelightError> {
    check_view_shapes(views)?;
    let mut set = ExposureSet::ones(views.len(), anchor);
    for (vi, v) in views.iter().enumerate() {
        if vi == anchor {
            continue;
        }
        let model = model_image(v, coeffs);
        let mask = v.valid.data();
        let photo = v.photo.data();
        let mut num = 0.0;
        let mut den = 0.0;
        for (pi, &m) in mask.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let mv = model[pi * 3 + c];
                num += mv * photo[pi * 3 + c];
                den += mv * mv;
            }
        }
        if den <= 0.0 {
            set.warnings
                .push(format!("view {vi}: zero model image, exposure left at 1"));
            continue;
        }
        let e = num / den;
        if e <= 0.0 {
            set.warnings.push(format!(
                "view {vi}: nonpositive exposure optimum {e:.3e} clamped"
            ));
            set.values[vi] = 1e-6;
        } else {
            set.values[vi] = e;
        }
    }
    Ok(set)
}

/// Total squared residual of the current coefficients and exposures over all
/// valid pixels and channels.
pub fn lighting_residual(
    views: &[ViewSolveInputs],
    coeffs: &LightCoeffs,
    exposures: &ExposureSet,
) -> f64 {
    let mut total = 0.0;
    for (vi, v) in views.iter().enumerate() {
        let e = exposures.values[vi];
        let model = model_image(v, coeffs);
        let mask = v.valid.data();
        let photo = v.photo.data();
        for (pi, &m) in mask.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let r = e * model[pi * 3 + c] - photo[pi * 3 + c];
                total += r * r;
            }
        }
    }
    total
}

/// Alternates the coefficient and exposure solves. Residuals after each
/// round are returned alongside; they never increase.
pub fn refine_lighting(
    views: &[ViewSolveInputs],
    anchor: usize,
    rounds: usize,
) -> Result<(LightCoeffs, ExposureSet, Vec<f64>), RelightError> {
    let n = check_view_shapes(views)?;
    let mut coeffs = LightCoeffs::ones(n);
    let mut exposures = ExposureSet::ones(views.len(), anchor);
    let mut residuals = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        coeffs = solve_light_coeffs(views, &exposures)?;
        exposures = solve_exposures(views, &coeffs, anchor)?;
        residuals.push(lighting_residual(views, &coeffs, &exposures));
    }
    Ok((coeffs, exposures, residuals))
}

/// Sum of the per-light grids weighted by their solved RGB coefficients;
/// exact by linearity of the render in lighting.
pub fn compose_global_lighting(
    grids: &[LightingGrid],
    coeffs: &LightCoeffs,
) -> Result<LightingGrid, RelightError> {
    if grids.is_empty() || grids.len() != coeffs.len() {
        return Err(RelightError::Render(RenderError::GridMismatch {
            msg: format!("{} grids vs {} coefficients", grids.len(), coeffs.len()),
        }));
    }
    let mut total = grids[0].scaled(coeffs.rgb(0));
    for (s, g) in grids.iter().enumerate().skip(1) {
        total = total.add(&g.scaled(coeffs.rgb(s)))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn ceiling_lights_cover_the_room() {
        let lights = place_ceiling_lights([0.0, 0.0, 0.0], [2.0, 2.5, 2.0], 3.0).unwrap();
        assert_eq!(lights.len(), 1);
        assert_eq!(lights[0], [1.0, 2.5, 1.0]);

        let lights = place_ceiling_lights([0.0, 0.0, 0.0], [7.0, 2.5, 3.0], 3.0).unwrap();
        assert_eq!(lights.len(), 3);
        for (i, l) in lights.iter().enumerate() {
            assert_eq!(l[1], 2.5);
            assert!((l[0] - (i as f64 + 0.5) * 7.0 / 3.0).abs() < 1e-12);
            assert_eq!(l[2], 1.5);
        }
        // Gaps never exceed the spacing.
        assert!(7.0 / 3.0 <= 3.0);

        assert!(place_ceiling_lights([0.0, 0.0, 0.0], [0.0, 2.0, 2.0], 3.0).is_err());
        assert!(place_ceiling_lights([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).is_err());
    }

    fn synth_lights(h: usize, w: usize, n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = stream(seed, "relight.synth");
        (0..n)
            .map(|_| Tensor::from_fn(&[h, w, 3], |_| 0.05 + rng.gen::<f64>()))
            .collect()
    }

    fn combine(lights: &[Tensor], weights: &[f64]) -> Tensor {
        Tensor::from_fn(lights[0].shape(), |i| {
            lights
                .iter()
                .zip(weights)
                .map(|(l, w)| w * l.data()[i])
                .sum()
        })
    }

    #[test]
    fn recovers_exact_combination() {
        let lights = synth_lights(8, 8, 2, 1);
        let photo = combine(&lights, &[0.3, 0.7]);
        let valid = Tensor::full(&[8, 8, 1], 1.0);
        let views = vec![ViewSolveInputs {
            per_light: lights.iter().collect(),
            photo: &photo,
            valid: &valid,
        }];
        let coeffs = solve_light_coeffs(&views, &ExposureSet::ones(1, 0)).unwrap();
        for c in 0..3 {
            assert!(
                (coeffs.channel(c)[0] - 0.3).abs() < 1e-8,
                "{:?}",
                coeffs.channel(c)
            );
            assert!((coeffs.channel(c)[1] - 0.7).abs() < 1e-8);
        }

        let photo1 = lights[0].clone();
        let views = vec![ViewSolveInputs {
            per_light: lights.iter().collect(),
            photo: &photo1,
            valid: &valid,
        }];
        let coeffs = solve_light_coeffs(&views, &ExposureSet::ones(1, 0)).unwrap();
        for c in 0..3 {
            assert!((coeffs.channel(c)[0] - 1.0).abs() < 1e-8);
            assert!(coeffs.channel(c)[1].abs() < 1e-8);
        }
    }

    #[test]
    fn infeasible_sign_matches_brute_force() {
        let lights = synth_lights(8, 8, 2, 2);
        let photo = combine(&lights, &[0.5, -0.2]);
        let valid = Tensor::full(&[8, 8, 1], 1.0);
        let views = vec![ViewSolveInputs {
            per_light: lights.iter().collect(),
            photo: &photo,
            valid: &valid,
        }];
        let coeffs = solve_light_coeffs(&views, &ExposureSet::ones(1, 0)).unwrap();

        // Brute-force oracle on a fine grid for channel 0.
        let (l0, l1, p) = (lights[0].data(), lights[1].data(), photo.data());
        let err = |x0: f64, x1: f64| -> f64 {
            let mut e = 0.0;
            for i in (0..p.len()).step_by(3) {
                let r = x0 * l0[i] + x1 * l1[i] - p[i];
                e += r * r;
            }
            e
        };
        let mut best = (0.0, 0.0, f64::INFINITY);
        let mut x0 = 0.0;
        while x0 <= 1.0 {
            let mut x1 = 0.0;
            while x1 <= 1.0 {
                let e = err(x0, x1);
                if e < best.2 {
                    best = (x0, x1, e);
                }
                x1 += 1e-3;
            }
            x0 += 1e-3;
        }
        assert!(coeffs.x_r[1].abs() < 1e-10, "x1 = {}", coeffs.x_r[1]);
        assert!((coeffs.x_r[0] - best.0).abs() < 2e-3);
        assert!(err(coeffs.x_r[0], coeffs.x_r[1]) <= best.2 + 1e-9);
    }

    #[test]
    fn nnls_satisfies_kkt_on_random_systems() {
        for trial in 0..20 {
            let mut rng = stream(trial, "relight.kkt");
            let n = 4;
            let lights = synth_lights(6, 6, n, 100 + trial);
            // Random signed combination makes some constraints active.
            let ws: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 0.8).collect();
            let photo = combine(&lights, &ws);
            let valid = Tensor::full(&[6, 6, 1], 1.0);
            let views = vec![ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo,
                valid: &valid,
            }];
            let coeffs = solve_light_coeffs(&views, &ExposureSet::ones(1, 0)).unwrap();
            // Rebuild gram/rhs for channel 0 and check the KKT conditions.
            let x = &coeffs.x_r;
            let (l, p) = (
                lights.iter().map(|t| t.data()).collect::<Vec<_>>(),
                photo.data(),
            );
            let mut grad = vec![0.0; n];
            let mut scale: f64 = 1.0;
            for s in 0..n {
                for i in (0..p.len()).step_by(3) {
                    let model: f64 = (0..n).map(|t| x[t] * l[t][i]).sum();
                    grad[s] += l[s][i] * (model - p[i]);
                    scale = scale.max(l[s][i].abs());
                }
            }
            for s in 0..n {
                if x[s] > 0.0 {
                    assert!(
                        grad[s].abs() <= 1e-8 * scale * p.len() as f64,
                        "trial {trial}: active gradient {}",
                        grad[s]
                    );
                } else {
                    assert!(
                        grad[s] >= -1e-8 * scale * p.len() as f64,
                        "trial {trial}: inactive gradient {}",
                        grad[s]
                    );
                }
            }
        }
    }

    #[test]
    fn exposures_recover_brightness_ratio() {
        let lights = synth_lights(8, 8, 2, 3);
        let photo0 = combine(&lights, &[0.4, 0.6]);
        let photo1 = photo0.map(|v| 2.0 * v);
        let valid = Tensor::full(&[8, 8, 1], 1.0);
        let views = vec![
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo0,
                valid: &valid,
            },
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo1,
                valid: &valid,
            },
        ];
        let coeffs = LightCoeffs {
            x_r: vec![0.4, 0.6],
            x_g: vec![0.4, 0.6],
            x_b: vec![0.4, 0.6],
            warnings: Vec::new(),
        };
        let exp = solve_exposures(&views, &coeffs, 0).unwrap();
        assert_eq!(exp.values[0], 1.0);
        assert!((exp.values[1] - 2.0).abs() < 1e-6);

        // Consistent photos give exposures of one.
        let views_eq = vec![
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo0,
                valid: &valid,
            },
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo0,
                valid: &valid,
            },
        ];
        let exp = solve_exposures(&views_eq, &coeffs, 1).unwrap();
        assert_eq!(exp.values[1], 1.0);
        assert!((exp.values[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn refinement_is_monotone_and_exact_on_consistent_bundles() {
        let lights = synth_lights(8, 8, 3, 4);
        let photo0 = combine(&lights, &[0.8, 0.1, 0.5]);
        let valid = Tensor::full(&[8, 8, 1], 1.0);

        // Photos already explained at unit exposure: one round is exact.
        let views = vec![
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo0,
                valid: &valid,
            },
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo0,
                valid: &valid,
            },
        ];
        let (coeffs, exp, residuals) = refine_lighting(&views, 0, 1).unwrap();
        assert!(residuals[0] <= 1e-10, "residual {}", residuals[0]);
        assert!((coeffs.x_r[0] - 0.8).abs() < 1e-8);
        assert!((coeffs.x_g[1] - 0.1).abs() < 1e-8);
        assert!((exp.values[1] - 1.0).abs() < 1e-8);
        assert_eq!(exp.values[0], 1.0);

        // A brighter second view pulls the alternation toward its exposure;
        // the residual never increases and the fixed point is approached.
        let photo1 = photo0.map(|v| 1.5 * v);
        let views = vec![
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo0,
                valid: &valid,
            },
            ViewSolveInputs {
                per_light: lights.iter().collect(),
                photo: &photo1,
                valid: &valid,
            },
        ];
        let (coeffs, exp, residuals) = refine_lighting(&views, 0, 40).unwrap();
        assert!(residuals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!((exp.values[1] - 1.5).abs() < 1e-4, "e1 = {}", exp.values[1]);
        assert!((coeffs.x_r[0] - 0.8).abs() < 1e-4);
        assert_eq!(exp.values[0], 1.0);

        let (c0, e0, r0) = refine_lighting(&views, 0, 0).unwrap();
        assert!(c0.x_r.iter().all(|&v| v == 1.0));
        assert!(e0.values.iter().all(|&v| v == 1.0));
        assert!(r0.is_empty());
    }

    #[test]
    fn zero_column_is_pinned_with_warning() {
        let lights = synth_lights(8, 8, 1, 5);
        let zero = Tensor::full(&[8, 8, 3], 0.0);
        let photo = lights[0].clone();
        let valid = Tensor::full(&[8, 8, 1], 1.0);
        let views = vec![ViewSolveInputs {
            per_light: vec![&lights[0], &zero],
            photo: &photo,
            valid: &valid,
        }];
        let coeffs = solve_light_coeffs(&views, &ExposureSet::ones(1, 0)).unwrap();
        assert_eq!(coeffs.x_r[1], 0.0);
        assert!(!coeffs.warnings.is_empty());
        assert!((coeffs.x_r[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn composition_is_linear_scaling() {
        let g1 = LightingGrid::uniform(2, 2, 4, 8, [0.3, 0.5, 0.7]);
        let g2 = LightingGrid::uniform(2, 2, 4, 8, [1.0, 1.0, 1.0]);
        let coeffs = LightCoeffs {
            x_r: vec![2.0, 0.0],
            x_g: vec![2.0, 0.0],
            x_b: vec![2.0, 0.0],
            warnings: Vec::new(),
        };
        let composed = compose_global_lighting(&[g1.clone(), g2.clone()], &coeffs).unwrap();
        for (a, b) in composed.radiance.data().iter().zip(g1.radiance.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }

        let ones = LightCoeffs::ones(1);
        let composed = compose_global_lighting(&[g1.clone()], &ones).unwrap();
        assert_eq!(composed.radiance.data(), g1.radiance.data());

        // Two coefficients against one grid is a layout mismatch.
        assert!(compose_global_lighting(&[g1], &coeffs).is_err());
    }

    #[test]
    fn render_under_composed_grid_matches_weighted_sum() {
        use crate::render::{render_part, view_dirs_from_fov, ShadeGeometry};
        use crate::tape::Tape;
        use std::sync::Arc;

        let mut rng = stream(9, "relight.linear");
        let mk = |seed: u64| {
            let mut r = stream(seed, "relight.grids");
            LightingGrid::new(1, 1, 4, 8, Tensor::from_fn(&[1, 32, 3], |_| r.gen::<f64>())).unwrap()
        };
        let (g1, g2) = (mk(1), mk(2));
        let coeffs = LightCoeffs {
            x_r: vec![0.7, 1.3],
            x_g: vec![0.2, 0.9],
            x_b: vec![1.1, 0.4],
            warnings: Vec::new(),
        };
        let composed = compose_global_lighting(&[g1.clone(), g2.clone()], &coeffs).unwrap();

        let mask = Tensor::full(&[4, 4, 1], 1.0);
        let vdirs = view_dirs_from_fov(4, 4, 1.0);
        let geom = Arc::new(ShadeGeometry::for_full_image(&mask, &vdirs, &g1).unwrap());
        let tape = Tape::new();
        let alb = tape
            .constant(Tensor::from_fn(&[4, 4, 3], |_| rng.gen::<f64>()))
            .unwrap();
        let nrm_raw = tape
            .constant(Tensor::from_fn(&[4, 4, 3], |i| match i % 3 {
                0 => 0.2,
                1 => -0.1,
                _ => 1.0,
            }))
            .unwrap();
        let nrm = tape.normalize3(nrm_raw).unwrap();
        let rgh = tape.constant(Tensor::full(&[4, 4, 1], 0.35)).unwrap();
        let render = |grid: &LightingGrid| -> Vec<f64> {
            let l = tape.constant(grid.radiance.clone()).unwrap();
            let out = render_part(&tape, alb, nrm, rgh, l, geom.clone(), false).unwrap();
            tape.value(out).to_vec()
        };
        let rc = render(&composed);
        let r1 = render(&g1.scaled(coeffs.rgb(0)));
        let r2 = render(&g2.scaled(coeffs.rgb(1)));
        for i in 0..rc.len() {
            assert!((rc[i] - (r1[i] + r2[i])).abs() <= 1e-12);
        }
    }
}
