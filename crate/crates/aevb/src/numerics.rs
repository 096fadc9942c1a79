//! Small dense linear algebra and quadrature routines.
//!
//! Everything here works on plain `f64` slices at the tiny sizes this crate
//! needs (covariances of a handful of dimensions, 1-d and 2-d integrals for
//! oracle checks). None of it touches the autodiff tape, which is exactly
//! why the test suites lean on it: it gives an independent route to values
//! the tape-based code must reproduce.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor L with L L^T = A, for a symmetric
/// positive-definite `a` stored row-major (n x n).
pub fn cholesky_lower(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves L y = b for lower-triangular L.
pub fn solve_lower(n: usize, l: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Solves L^T x = y for lower-triangular L.
pub fn solve_lower_transpose(n: usize, l: &[f64], y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// log det A from its lower Cholesky factor.
pub fn logdet_from_cholesky(n: usize, l: &[f64]) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn invert_spd(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky_lower(n, a)?;
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let y = solve_lower(n, &l, &e);
        let x = solve_lower_transpose(n, &l, &y);
        for i in 0..n {
            inv[i * n + j] = x[i];
        }
    }
    Ok(inv)
}

/// Log density of N(mean, cov) at `x`, with `cov` full SPD row-major.
pub fn mvn_logpdf(n: usize, x: &[f64], mean: &[f64], cov: &[f64]) -> Result<f64> {
    let l = cholesky_lower(n, cov)?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let y = solve_lower(n, &l, &diff);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    let logdet = logdet_from_cholesky(n, &l);
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

/// Nodes and weights of n-point Gauss-Hermite quadrature for weight
/// exp(-t^2): integral f(t) e^{-t^2} dt ≈ Σ w_i f(t_i). Computed by Newton
/// iteration on the Hermite recurrence; accurate to roundoff for n ≤ ~100.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        // Standard initial guesses marching inward from the largest root.
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Orthonormal Hermite recurrence.
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}

/// E[f(Z)] for Z ~ N(mu, sigma^2) via n-point Gauss-Hermite.
pub fn gauss_hermite_expect(n: usize, mu: f64, sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (t, w) = gauss_hermite(n);
    let c = std::f64::consts::PI.powf(-0.5);
    let s2 = std::f64::consts::SQRT_2;
    t.iter().zip(&w).map(|(&ti, &wi)| wi * f(mu + s2 * sigma * ti)).sum::<f64>() * c
}

/// Composite Simpson rule with `panels` panels (panels must be even... the
/// usual convention here: `panels` subintervals, rounded up to even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = if panels % 2 == 0 { panels } else { panels + 1 };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_recovers_simple_factor() {
        // A = [[4, 2], [2, 3]] has L = [[2, 0], [1, sqrt(2)]].
        let l = cholesky_lower(2, &[4.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-15);
        assert!((l[2] - 1.0).abs() < 1e-15);
        assert!((l[3] - 2.0f64.sqrt()).abs() < 1e-15);
        assert!((logdet_from_cholesky(2, &l) - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        match cholesky_lower(2, &[1.0, 2.0, 2.0, 1.0]) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected not-PD error, got {other:?}"),
        }
    }

    #[test]
    fn spd_inverse_times_matrix_is_identity() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = invert_spd(3, &a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * inv[k * 3 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-12, "({i},{j}) = {s}");
            }
        }
    }

    #[test]
    fn mvn_logpdf_standard_at_origin() {
        let v = mvn_logpdf(3, &[0.0; 3], &[0.0; 3], &eye3()).unwrap();
        assert!((v + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    fn eye3() -> Vec<f64> {
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    }

    #[test]
    fn gauss_hermite_integrates_polynomials_exactly() {
        // E[Z^2] = 1 and E[Z^4] = 3 for standard normal.
        let e2 = gauss_hermite_expect(8, 0.0, 1.0, |z| z * z);
        let e4 = gauss_hermite_expect(8, 0.0, 1.0, |z| z * z * z * z);
        assert!((e2 - 1.0).abs() < 1e-12, "{e2}");
        assert!((e4 - 3.0).abs() < 1e-12, "{e4}");
        // Shifted/scaled: E[Z] = mu.
        let e1 = gauss_hermite_expect(12, 1.7, 2.5, |z| z);
        assert!((e1 - 1.7).abs() < 1e-12);
        // Weights sum to sqrt(pi).
        let (_, w) = gauss_hermite(40);
        let total: f64 = w.iter().sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn simpson_integrates_smooth_functions() {
        let v = simpson(|x| x * x, 0.0, 1.0, 100);
        assert!((v - 1.0 / 3.0).abs() < 1e-10);
        let v = simpson(f64::exp, 0.0, 1.0, 1000);
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    }
}
