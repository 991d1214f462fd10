//! Central finite-difference oracle used by the gradient test suites.

/// Central-difference gradient of a scalar function at `x`, one entry per
/// coordinate. The step is scaled by the coordinate's magnitude so large and
/// tiny parameters are probed at comparable relative precision.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error between an analytic and a finite-difference value.
/// Pairs whose magnitudes both fall under `floor` count as exact agreement:
/// FD noise dominates there and the true gradient is ~0.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    let m = analytic.abs().max(fd.abs());
    if m <= floor {
        0.0
    } else {
        (analytic - fd).abs() / m
    }
}

/// Worst relative error across paired gradient entries.
pub fn max_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_err(a, b, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3 x1 at (2, -1): grad (4, 3).
        let g = fd_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!(max_rel_err(&[4.0, 3.0], &g, 1e-12) < 1e-9);
    }

    #[test]
    fn rel_err_floors_near_zero_pairs() {
        assert_eq!(rel_err(1e-14, -2e-14, 1e-9), 0.0);
        assert!(rel_err(1.0, 1.001, 1e-9) > 9e-4);
    }
}
