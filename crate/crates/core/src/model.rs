//! Target densities, random-walk proposals, force functions and drift
//! functions.
//!
//! The target is a finite mixture of Gaussians. Densities are evaluated in
//! log space (log-sum-exp over components) so that acceptance ratios stay
//! meaningful far in the tails where both densities underflow.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// One term of a Gaussian mixture, as supplied by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance matrix.
    pub covariance: Vec<Vec<f64>>,
}

/// Precomputed Gaussian kernel: Cholesky factor, precision and log
/// normalizer of an SPD covariance.
#[derive(Debug, Clone)]
struct Gaussian {
    dim: usize,
    chol: Vec<f64>,
    precision: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(covariance: &[Vec<f64>]) -> Result<Self> {
        let dim = covariance.len();
        if dim == 0 {
            return Err(Error::InvalidInput("empty covariance matrix".into()));
        }
        for row in covariance {
            check_dim(dim, row.len())?;
            check_finite(row)?;
        }
        let cov = DMatrix::from_fn(dim, dim, |i, j| covariance[i][j]);
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (cov[(i, j)], cov[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidInput(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
        let lower = chol.l();
        let log_det: f64 = 2.0 * (0..dim).map(|i| lower[(i, i)].ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            dim,
            chol: (0..dim * dim).map(|k| lower[(k / dim, k % dim)]).collect(),
            precision: (0..dim * dim).map(|k| precision[(k / dim, k % dim)]).collect(),
            log_norm: -0.5 * (dim as f64) * (2.0 * PI).ln() - 0.5 * log_det,
        })
    }

    /// Quadratic form `δᵀ Σ⁻¹ δ` with `δ_i = a_i - b_i`.
    #[inline]
    fn quad(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.dim;
        if d == 1 {
            let delta = a[0] - b[0];
            return delta * delta * self.precision[0];
        }
        let mut s = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (a[j] - b[j]);
            }
            s += (a[i] - b[i]) * acc;
        }
        s
    }

    #[inline]
    fn log_pdf(&self, x: &[f64], center: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.quad(x, center)
    }

    /// `out ← center + L z` with `z` standard normal.
    fn sample_into<R: Rng + ?Sized>(&self, center: &[f64], rng: &mut R, out: &mut [f64]) {
        let d = self.dim;
        out.copy_from_slice(center);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            for i in j..d {
                out[i] += self.chol[i * d + j] * z;
            }
        }
    }
}

/// Gaussian-mixture target density.
#[derive(Debug, Clone)]
pub struct TargetModel {
    dim: usize,
    components: Vec<MixtureComponent>,
    log_weights: Vec<f64>,
    cumulative: Vec<f64>,
    kernels: Vec<Gaussian>,
}

impl TargetModel {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidInput("mixture has no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidInput("zero-dimensional mixture".into()));
        }
        let mut kernels = Vec::with_capacity(components.len());
        for c in &components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "mixture weight {} is not strictly positive",
                    c.weight
                )));
            }
            check_dim(dim, c.mean.len())?;
            check_finite(&c.mean)?;
            check_dim(dim, c.covariance.len())?;
            kernels.push(Gaussian::new(&c.covariance)?);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(Self {
            dim,
            log_weights: components.iter().map(|c| c.weight.ln()).collect(),
            components,
            cumulative,
            kernels,
        })
    }

    /// One-dimensional mixture from `(weight, mean, standard deviation)` triples.
    pub fn univariate(parts: &[(f64, f64, f64)]) -> Result<Self> {
        Self::new(
            parts
                .iter()
                .map(|&(weight, mean, sd)| MixtureComponent {
                    weight,
                    mean: vec![mean],
                    covariance: vec![vec![sd * sd]],
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        check_finite(x)?;
        Ok(self.log_density_unchecked(x))
    }

    /// Log density without dimension or finiteness checks (hot loops).
    #[inline]
    pub fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        if self.kernels.len() == 1 {
            return self.log_weights[0] + self.kernels[0].log_pdf(x, &self.components[0].mean);
        }
        let mut terms = [0.0f64; 8];
        let mut heap;
        let terms: &mut [f64] = if self.kernels.len() <= terms.len() {
            &mut terms[..self.kernels.len()]
        } else {
            heap = vec![0.0; self.kernels.len()];
            &mut heap
        };
        let mut max = f64::NEG_INFINITY;
        let mut arg = 0;
        for (i, (k, c)) in self.kernels.iter().zip(&self.components).enumerate() {
            let t = self.log_weights[i] + k.log_pdf(x, &c.mean);
            terms[i] = t;
            if t > max {
                max = t;
                arg = i;
            }
        }
        let mut sum = 1.0;
        for (i, &t) in terms.iter().enumerate() {
            if i != arg {
                sum += (t - max).exp();
            }
        }
        max + sum.ln()
    }

    /// Exact draw from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }

    /// Exact draw written into `out`; returns the index of the component used.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        self.kernels[idx].sample_into(&self.components[idx].mean, rng, out);
        idx
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim).map(|a| self.raw_moment(a, 1)).collect()
    }

    /// `E[X_axis^order]` under the mixture, from the Gaussian moment recursion
    /// `m_p = μ m_{p-1} + (p-1) σ² m_{p-2}`.
    pub fn raw_moment(&self, axis: usize, order: usize) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * gaussian_raw_moment(c.mean[axis], c.covariance[axis][axis], order))
            .sum()
    }

    /// Local maxima of the density found by the mixture fixed-point ascent
    /// started from every component mean.
    pub fn modes(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let precisions: Vec<DMatrix<f64>> = self
            .kernels
            .iter()
            .map(|k| DMatrix::from_row_slice(d, d, &k.precision))
            .collect();
        let mut modes: Vec<Vec<f64>> = Vec::new();
        for start in &self.components {
            let mut x = start.mean.clone();
            for _ in 0..10_000 {
                let terms: Vec<f64> = self
                    .kernels
                    .iter()
                    .zip(&self.components)
                    .enumerate()
                    .map(|(i, (k, c))| self.log_weights[i] + k.log_pdf(&x, &c.mean))
                    .collect();
                let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut lhs = DMatrix::<f64>::zeros(d, d);
                let mut rhs = DVector::<f64>::zeros(d);
                for (i, t) in terms.iter().enumerate() {
                    let r = (t - max).exp();
                    lhs += &precisions[i] * r;
                    rhs += &precisions[i] * DVector::from_column_slice(&self.components[i].mean) * r;
                }
                let Some(next) = lhs.lu().solve(&rhs) else { break };
                let step: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = next.iter().copied().collect();
                if step < 1e-13 {
                    break;
                }
            }
            if !modes
                .iter()
                .any(|m| m.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-8))
            {
                modes.push(x);
            }
        }
        modes
    }

    /// `(argmax, log sup π)` over the located modes.
    pub fn log_max_density(&self) -> (Vec<f64>, f64) {
        self.modes()
            .into_iter()
            .map(|m| {
                let l = self.log_density_unchecked(&m);
                (m, l)
            })
            .fold((Vec::new(), f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
    }
}

fn gaussian_raw_moment(mean: f64, variance: f64, order: usize) -> f64 {
    let (mut prev, mut cur) = (1.0, mean);
    if order == 0 {
        return 1.0;
    }
    for p in 2..=order {
        let next = mean * cur + (p as f64 - 1.0) * variance * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// A proposal kernel `q(x, ·)` for the Metropolis-Hastings chain.
pub trait Proposal: Sync {
    fn dim(&self) -> usize;

    /// `ln q(x, y)`; may be `-inf`.
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64;

    fn sample_into<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]);

    /// True when `q(x, y) = q(y, x)`, letting acceptance skip the proposal ratio.
    fn is_symmetric(&self) -> bool {
        false
    }
}

/// Gaussian random walk, `q(x, y) = N(y - x; 0, Σ)`.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    covariance: Vec<Vec<f64>>,
    kernel: Gaussian,
    zero: Vec<f64>,
}

impl RandomWalk {
    pub fn new(covariance: Vec<Vec<f64>>) -> Result<Self> {
        let kernel = Gaussian::new(&covariance)?;
        Ok(Self {
            zero: vec![0.0; kernel.dim],
            covariance,
            kernel,
        })
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(
            (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { variance } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    /// `ln sup q = ln q(x, x)`.
    pub fn log_peak(&self) -> f64 {
        self.kernel.log_norm
    }
}

impl Proposal for RandomWalk {
    fn dim(&self) -> usize {
        self.kernel.dim
    }

    #[inline]
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        self.kernel.log_pdf(y, x)
    }

    #[inline]
    fn sample_into<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        self.kernel.sample_into(&self.zero, rng, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }

    fn is_symmetric(&self) -> bool {
        true
    }
}

/// Metropolis-Hastings acceptance probability `α(x, y)`.
pub fn acceptance<Q: Proposal>(model: &TargetModel, prop: &Q, x: &[f64], y: &[f64]) -> f64 {
    let lx = model.log_density_unchecked(x);
    let ly = model.log_density_unchecked(y);
    acceptance_from_logs(prop, x, lx, y, ly)
}

/// `α(x, y)` given cached `ln π(x)` and `ln π(y)`.
#[inline]
pub(crate) fn acceptance_from_logs<Q: Proposal>(
    prop: &Q,
    x: &[f64],
    log_pi_x: f64,
    y: &[f64],
    log_pi_y: f64,
) -> f64 {
    let la = log_acceptance_from_logs(prop, x, log_pi_x, y, log_pi_y);
    if la == 0.0 {
        1.0
    } else {
        la.exp()
    }
}

/// `ln α(x, y)`, always `≤ 0`.
#[inline]
pub(crate) fn log_acceptance_from_logs<Q: Proposal>(
    prop: &Q,
    x: &[f64],
    log_pi_x: f64,
    y: &[f64],
    log_pi_y: f64,
) -> f64 {
    let (num, den) = if prop.is_symmetric() {
        (log_pi_y, log_pi_x)
    } else {
        (
            log_pi_y + prop.log_density(y, x),
            log_pi_x + prop.log_density(x, y),
        )
    };
    if den == f64::NEG_INFINITY || num >= den {
        0.0
    } else {
        num - den
    }
}

/// A positive function on the state space used to measure allotments
/// (radius, mesh) and to build exhaustive sequences.
pub trait WeightFunction: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Points near which the function is small; seeds for sublevel-set searches.
    fn anchors(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.dim()]]
    }
}

/// Drift function `V_γ = c_γ π^{-γ}` with `c_γ = (sup π)^γ`, so that
/// `V_γ ≥ 1` with equality at the global mode.
#[derive(Debug, Clone)]
pub struct DriftFunction {
    gamma: f64,
    log_sup: f64,
    argmax: Vec<f64>,
    modes: Vec<Vec<f64>>,
    model: TargetModel,
}

impl DriftFunction {
    pub fn new(model: &TargetModel, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 0.5) {
            return Err(Error::InvalidInput(format!(
                "drift exponent {gamma} must lie in (0, 1/2)"
            )));
        }
        let modes = model.modes();
        let (argmax, log_sup) = model.log_max_density();
        Ok(Self {
            gamma,
            log_sup,
            argmax,
            modes,
            model: model.clone(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `c_γ`.
    pub fn normalizer(&self) -> f64 {
        (self.gamma * self.log_sup).exp()
    }

    pub fn argmax(&self) -> &[f64] {
        &self.argmax
    }

    pub fn model(&self) -> &TargetModel {
        &self.model
    }
}

impl WeightFunction for DriftFunction {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    #[inline]
    fn value(&self, x: &[f64]) -> f64 {
        (self.gamma * (self.log_sup - self.model.log_density_unchecked(x)))
            .exp()
            .max(1.0)
    }

    fn anchors(&self) -> Vec<Vec<f64>> {
        self.modes.clone()
    }
}

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum ForceKind {
    Polynomial { axis: usize, coefficients: Vec<f64> },
    Custom { f: Evaluator, mean: Option<f64> },
}

/// The function `F` whose stationary mean is being estimated.
#[derive(Clone)]
pub struct ForceFunction {
    kind: ForceKind,
}

impl ForceFunction {
    /// `F(x) = Σ_p c_p x_axis^p`.
    pub fn polynomial(axis: usize, coefficients: Vec<f64>) -> Self {
        Self {
            kind: ForceKind::Polynomial { axis, coefficients },
        }
    }

    /// `F(x) = x_0³`.
    pub fn cube() -> Self {
        Self::polynomial(0, vec![0.0, 0.0, 0.0, 1.0])
    }

    /// `F(x) = x_axis`.
    pub fn coordinate(axis: usize) -> Self {
        Self::polynomial(axis, vec![0.0, 1.0])
    }

    pub fn custom<F>(f: F, exact_mean: Option<f64>) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: ForceKind::Custom {
                f: Arc::new(f),
                mean: exact_mean,
            },
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ForceKind::Polynomial { axis, coefficients } => {
                let t = x[*axis];
                coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            ForceKind::Custom { f, .. } => f(x),
        }
    }

    /// Exact `π(F)` when available in closed form.
    pub fn exact_mean(&self, model: &TargetModel) -> Option<f64> {
        match &self.kind {
            ForceKind::Polynomial { axis, coefficients } => {
                if *axis >= model.dim() {
                    return None;
                }
                Some(
                    coefficients
                        .iter()
                        .enumerate()
                        .map(|(p, c)| c * model.raw_moment(*axis, p))
                        .sum(),
                )
            }
            ForceKind::Custom { mean, .. } => *mean,
        }
    }
}

impl fmt::Debug for ForceFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ForceKind::Polynomial { axis, coefficients } => f
                .debug_struct("Polynomial")
                .field("axis", axis)
                .field("coefficients", coefficients)
                .finish(),
            ForceKind::Custom { mean, .. } => {
                f.debug_struct("Custom").field("mean", mean).finish()
            }
        }
    }
}
