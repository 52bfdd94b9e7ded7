//! Stationary distribution and Poisson equation of a finite stochastic
//! matrix, by dense LU with iterative refinement.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const REFINEMENT_STEPS: usize = 3;

fn solve_refined(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu
        .solve(b)
        .ok_or_else(|| Error::Singular(format!("{what} system is numerically rank deficient")))?;
    for _ in 0..REFINEMENT_STEPS {
        let r = b - a * &x;
        match lu.solve(&r) {
            Some(dx) => x += dx,
            None => break,
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what} system produced non-finite values")));
    }
    Ok(x)
}

/// Unique `π` with `π p = π` and `Σ π = 1`, from the balance equations with
/// one of them replaced by the normalization row.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    if !p.is_square() || n == 0 {
        return Err(Error::InvalidInput("transition matrix must be square and nonempty".into()));
    }
    let mut a = DMatrix::<f64>::identity(n, n) - p.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let pi = solve_refined(&a, &b, "stationary").map_err(|e| match e {
        Error::Singular(msg) => Error::Reducible(msg),
        other => other,
    })?;
    Ok(pi.iter().copied().collect())
}

/// Solution `f̂` of `(I - p) f̂ = f - π(f) 1` with `f̂[pin] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    values: Vec<f64>,
    coarse_mean: f64,
}

impl PoissonSolution {
    /// Wrap precomputed values.
    pub fn from_values(values: Vec<f64>, coarse_mean: f64) -> Self {
        Self { values, coarse_mean }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `π̂(f)`.
    pub fn coarse_mean(&self) -> f64 {
        self.coarse_mean
    }

    /// `sup_i |f̂_i - (p f̂)_i - (f_i - π̂(f))|`.
    pub fn residual(&self, p: &DMatrix<f64>, f: &[f64]) -> f64 {
        let n = self.values.len();
        (0..n)
            .map(|i| {
                let pf: f64 = (0..n).map(|j| p[(i, j)] * self.values[j]).sum();
                (self.values[i] - pf - (f[i] - self.coarse_mean)).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("poisson-solution\n");
        let _ = writeln!(s, "mean {:?}", self.coarse_mean);
        s.push_str("values");
        for v in &self.values {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut values = None;
        for (i, line) in text.lines().enumerate() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let nums = || -> Result<Vec<f64>> {
                toks[1..]
                    .iter()
                    .map(|t| t.parse().map_err(|_| Error::Parse(format!("line {}: bad number `{t}`", i + 1))))
                    .collect()
            };
            match toks.first().copied() {
                None | Some("poisson-solution") => {}
                Some("mean") => mean = nums()?.first().copied(),
                Some("values") => values = Some(nums()?),
                Some(other) => return Err(Error::Parse(format!("line {}: unknown record `{other}`", i + 1))),
            }
        }
        Ok(Self {
            values: values.ok_or_else(|| Error::Parse("missing values".into()))?,
            coarse_mean: mean.ok_or_else(|| Error::Parse("missing mean".into()))?,
        })
    }
}

/// Poisson solution pinned at `f̂[0] = 0`.
pub fn solve_poisson(p: &DMatrix<f64>, f: &[f64]) -> Result<PoissonSolution> {
    solve_poisson_pinned(p, f, 0)
}

/// Poisson solution pinned at `f̂[pin] = 0`.
pub fn solve_poisson_pinned(p: &DMatrix<f64>, f: &[f64], pin: usize) -> Result<PoissonSolution> {
    let pi = stationary_distribution(p)?;
    solve_with_stationary(p, &pi, f, pin)
}

pub(super) fn solve_with_stationary(
    p: &DMatrix<f64>,
    pi: &[f64],
    f: &[f64],
    pin: usize,
) -> Result<PoissonSolution> {
    let n = p.nrows();
    if f.len() != n {
        return Err(Error::Dimension { expected: n, got: f.len() });
    }
    if pin >= n {
        return Err(Error::InvalidInput(format!("pin {pin} out of range")));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("force vector has non-finite entries".into()));
    }
    let mean: f64 = pi.iter().zip(f).map(|(a, b)| a * b).sum();
    // The balance equation dropped for the pin row is the one carrying the
    // most stationary mass; its residual is then a small multiple of the
    // others'.
    let drop = pi
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    let mut a = DMatrix::<f64>::identity(n, n) - p;
    let mut b = DVector::from_iterator(n, f.iter().map(|v| v - mean));
    for j in 0..n {
        a[(drop, j)] = if j == pin { 1.0 } else { 0.0 };
    }
    b[drop] = 0.0;
    let x = solve_refined(&a, &b, "pinned Poisson")?;
    let mut values: Vec<f64> = x.iter().copied().collect();
    values[pin] = 0.0;
    Ok(PoissonSolution {
        values,
        coarse_mean: mean,
    })
}
