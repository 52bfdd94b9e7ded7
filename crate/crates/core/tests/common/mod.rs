//! Independent reference computations for the integration tests: closed-form
//! Gaussian densities, adaptive Simpson quadrature and power iteration.
#![allow(dead_code)]

use std::f64::consts::PI;

pub const DW1: [(f64, f64, f64); 2] = [(0.4, -3.0, 1.0), (0.6, 4.0, 0.5)];

pub fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

pub fn mixture_pdf(parts: &[(f64, f64, f64)], x: f64) -> f64 {
    parts.iter().map(|&(w, m, s)| w * normal_pdf(x, m, s)).sum()
}

/// `α(x, y)` for a symmetric proposal.
pub fn alpha(parts: &[(f64, f64, f64)], x: f64, y: f64) -> f64 {
    let (px, py) = (mixture_pdf(parts, x), mixture_pdf(parts, y));
    if px == 0.0 {
        1.0
    } else {
        (py / px).min(1.0)
    }
}

fn simpson_step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson on `[a, b]`, started from 64 panels so narrow peaks are
/// not missed.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (l, r) = (a + h * i as f64, a + h * (i + 1) as f64);
            let (fl, fm, fr) = (f(l), f(0.5 * (l + r)), f(r));
            let whole = h / 6.0 * (fl + 4.0 * fm + fr);
            simpson_step(f, l, r, fl, fm, fr, whole, tol / panels as f64, 40)
        })
        .sum()
}

/// Stationary law of a dense row-stochastic matrix by power iteration.
pub fn power_iteration(p: &[Vec<f64>], iters: usize) -> Vec<f64> {
    let n = p.len();
    let mut v = vec![1.0 / n as f64; n];
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += v[i] * p[i][j];
            }
        }
        let s: f64 = next.iter().sum();
        v = next.into_iter().map(|x| x / s).collect();
    }
    v
}

/// `Σ_{k=0}^{K} (p^k f - π(f))`, stopping early once a term is below
/// `1e-16` in sup norm.
pub fn poisson_series(p: &[Vec<f64>], f: &[f64], pi: &[f64], max_terms: usize) -> Vec<f64> {
    let n = p.len();
    let mean: f64 = pi.iter().zip(f).map(|(a, b)| a * b).sum();
    let mut term: Vec<f64> = f.to_vec();
    let mut sum = vec![0.0; n];
    for _ in 0..=max_terms {
        let mut small = true;
        for i in 0..n {
            let t = term[i] - mean;
            sum[i] += t;
            small &= t.abs() < 1e-16;
        }
        if small {
            break;
        }
        term = (0..n).map(|i| (0..n).map(|j| p[i][j] * term[j]).sum()).collect();
    }
    sum
}
