//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use tfqkd_core::BitString;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`, starting from `panels` equal sub-intervals.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, f1) = (f(x0), f(x1));
            let fm = f(0.5 * (x0 + x1));
            let whole = simpson(x0, x1, f0, fm, f1);
            refine(f, x0, x1, f0, fm, f1, whole, tol / panels as f64, 60)
        })
        .sum()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Probability mass of N(center, sigma^2) inside [lo, hi] by quadrature of
/// the density in standardized units.
pub fn normal_mass(center: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let a = ((lo - center) / sigma).max(-40.0);
    let b = ((hi - center) / sigma).min(40.0);
    if !(b > a) {
        return 0.0;
    }
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    // split at the peak so no panel straddles it unresolved
    let parts: Vec<(f64, f64)> = if a < 0.0 && b > 0.0 { vec![(a, 0.0), (0.0, b)] } else { vec![(a, b)] };
    parts.iter().map(|&(x, y)| integrate(&pdf, x, y, 1e-14, 64)).sum()
}

/// Dense Toeplitz matrix-vector product with T[i][j] = seed[i - j + n - 1].
pub fn dense_toeplitz(key: &BitString, rows: usize, seed: &BitString) -> BitString {
    let n = key.len();
    assert_eq!(seed.len(), n + rows - 1);
    let matrix: Vec<Vec<bool>> = (0..rows).map(|i| (0..n).map(|j| seed.get(i + n - 1 - j)).collect()).collect();
    matrix
        .iter()
        .map(|row| row.iter().zip(key.iter()).fold(false, |acc, (&t, k)| acc ^ (t & k)))
        .collect()
}

/// Standard deviation of a binomial count.
pub fn binomial_sigma(n: f64, p: f64) -> f64 {
    (n * p * (1.0 - p)).sqrt()
}
