//! Generator-node rasterization.
//!
//! Generators are seeded, parameter-independent, and tileable: lattice lookups
//! wrap modulo the lattice size, so texel (0) and texel (R-1) straddle the
//! same features as any interior pair. Everything is pure integer hashing on
//! (seed, cell) so rasters are identical across runs and platforms.

use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash of (seed, a, b) to [0, 1).
fn hash01(seed: u64, a: i64, b: i64) -> f64 {
    let h = splitmix(
        seed ^ (a as u64).wrapping_mul(0x9e3779b97f4a7c15)
            ^ (b as u64).wrapping_mul(0xc2b2ae3d27d4eb4f),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Quintic fade with zero first and second derivatives at the ends.
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Wraps a lattice index into [0, n).
fn wrap(i: i64, n: i64) -> i64 {
    i.rem_euclid(n)
}

/// Single octave of smoothed lattice value noise at (u, v) with an n x n
/// wrapped lattice.
fn value_noise_octave(seed: u64, n: i64, u: f64, v: f64) -> f64 {
    let x = u * n as f64;
    let y = v * n as f64;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = fade(x - x0);
    let fy = fade(y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = hash01(seed, wrap(ix, n), wrap(iy, n));
    let v10 = hash01(seed, wrap(ix + 1, n), wrap(iy, n));
    let v01 = hash01(seed, wrap(ix, n), wrap(iy + 1, n));
    let v11 = hash01(seed, wrap(ix + 1, n), wrap(iy + 1, n));
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

pub fn value_noise(res: usize, seed: u64, cells: usize, octaves: usize) -> Tensor {
    let octaves = octaves.max(1);
    let mut amp_total = 0.0;
    let mut amp = 1.0;
    for _ in 0..octaves {
        amp_total += amp;
        amp *= 0.5;
    }
    Tensor::from_fn(&[res, res, 1], |i| {
        let y = i / res;
        let x = i % res;
        let u = (x as f64 + 0.5) / res as f64;
        let v = (y as f64 + 0.5) / res as f64;
        let mut acc = 0.0;
        let mut amp = 1.0;
        for o in 0..octaves {
            let n = (cells.max(1) as i64) << o;
            acc += amp * value_noise_octave(seed.wrapping_add(o as u64), n, u, v);
            amp *= 0.5;
        }
        acc / amp_total
    })
}

/// Worley F1 noise: distance to the nearest jittered feature point, in cell
/// units, squashed to [0, 1].
pub fn cellular_noise(res: usize, seed: u64, cells: usize) -> Tensor {
    let n = cells.max(1) as i64;
    Tensor::from_fn(&[res, res, 1], |i| {
        let y = i / res;
        let x = i % res;
        let u = (x as f64 + 0.5) / res as f64 * n as f64;
        let v = (y as f64 + 0.5) / res as f64 * n as f64;
        let cx = u.floor() as i64;
        let cy = v.floor() as i64;
        let mut best = f64::INFINITY;
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let gx = cx + dx;
                let gy = cy + dy;
                let jx = hash01(seed, wrap(gx, n), wrap(gy, n));
                let jy = hash01(seed ^ 0x51ed2701, wrap(gx, n), wrap(gy, n));
                let px = gx as f64 + jx;
                let py = gy as f64 + jy;
                let d2 = (u - px) * (u - px) + (v - py) * (v - py);
                best = best.min(d2);
            }
        }
        (best.sqrt() / 1.2).clamp(0.0, 1.0)
    })
}

/// Running-bond brick profile. Output is 0 in mortar, ramps over `bevel`
/// (cell units) to the brick interior, and the interior is dimmed per brick
/// by `variation` of a hashed value.
pub fn brick(
    res: usize,
    seed: u64,
    rows: usize,
    cols: usize,
    mortar: f64,
    bevel: f64,
    variation: f64,
) -> Tensor {
    let rows = rows.max(1) as f64;
    let cols = cols.max(1) as f64;
    Tensor::from_fn(&[res, res, 1], |i| {
        let y = i / res;
        let x = i % res;
        let u = (x as f64 + 0.5) / res as f64;
        let v = (y as f64 + 0.5) / res as f64;
        let row = (v * rows).floor();
        let u_off = u + (row as i64 % 2) as f64 * 0.5 / cols;
        let col = (u_off * cols).floor();
        let fu = u_off * cols - col;
        let fv = v * rows - row;
        let edge = fu.min(1.0 - fu).min(fv.min(1.0 - fv));
        let profile = ((edge - mortar) / bevel.max(1e-6)).clamp(0.0, 1.0);
        let r = hash01(
            seed,
            wrap(col as i64, (cols as i64).max(1)),
            wrap(row as i64, (rows as i64).max(1)),
        );
        profile * (1.0 - variation + variation * r)
    })
}

/// Checkerboard with `n` cells per axis, shifted half a cell so that for even
/// `n` the wrap seam falls mid-cell and tiles without a hard edge.
pub fn checker(res: usize, n: usize) -> Tensor {
    let n = n.max(1) as f64;
    Tensor::from_fn(&[res, res, 1], |i| {
        let y = i / res;
        let x = i % res;
        let u = (x as f64 + 0.5) / res as f64;
        let v = (y as f64 + 0.5) / res as f64;
        let c = (u * n + 0.5).floor() as i64 + (v * n + 0.5).floor() as i64;
        (c.rem_euclid(2)) as f64
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StripeProfile {
    Sine,
    Square,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StripeAxis {
    U,
    V,
}

pub fn stripes(res: usize, n: usize, profile: StripeProfile, axis: StripeAxis) -> Tensor {
    let n = n.max(1) as f64;
    Tensor::from_fn(&[res, res, 1], |i| {
        let y = i / res;
        let x = i % res;
        let t = match axis {
            StripeAxis::U => (x as f64 + 0.5) / res as f64,
            StripeAxis::V => (y as f64 + 0.5) / res as f64,
        };
        match profile {
            StripeProfile::Sine => 0.5 + 0.5 * (std::f64::consts::TAU * n * t).sin(),
            // Quarter-period shift keeps the hard edges off the wrap seam.
            StripeProfile::Square => {
                if (t * n + 0.25).fract() < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seam_vs_interior(t: &Tensor) -> (f64, f64) {
        let s = t.shape();
        let (h, w) = (s[0], s[1]);
        let d = t.data();
        let mut seam = 0.0;
        for y in 0..h {
            seam += (d[y * w] - d[y * w + w - 1]).abs();
        }
        seam /= h as f64;
        let mut interior = 0.0;
        let mut cnt = 0usize;
        for y in 0..h {
            for x in 0..w - 1 {
                interior += (d[y * w + x] - d[y * w + x + 1]).abs();
                cnt += 1;
            }
        }
        (seam, interior / cnt as f64)
    }

    #[test]
    fn generators_are_deterministic() {
        let a = value_noise(64, 7, 8, 4);
        let b = value_noise(64, 7, 8, 4);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), value_noise(64, 8, 8, 4).data());
    }

    #[test]
    fn generators_tile_horizontally() {
        for t in [
            value_noise(64, 3, 8, 3),
            cellular_noise(64, 5, 8),
            brick(64, 2, 4, 8, 0.06, 0.05, 0.3),
            checker(64, 8),
            stripes(64, 8, StripeProfile::Sine, StripeAxis::U),
        ] {
            let (seam, interior) = seam_vs_interior(&t);
            assert!(
                seam <= 2.0 * interior + 1e-9,
                "seam {seam} vs interior {interior}"
            );
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for t in [
            value_noise(32, 11, 4, 5),
            cellular_noise(32, 1, 16),
            brick(32, 9, 4, 4, 0.1, 0.08, 0.5),
            checker(32, 4),
            stripes(32, 16, StripeProfile::Square, StripeAxis::V),
        ] {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
