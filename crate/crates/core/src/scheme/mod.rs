//! The three steps of the construction: estimate the coarse transition
//! matrix on an allotment, solve its Poisson equation, and lift the solution
//! to a piecewise-constant function on the state space.

mod poisson;

pub use poisson::{solve_poisson, solve_poisson_pinned, stationary_distribution, PoissonSolution};

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::allotment::Allotment;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::model::{log_acceptance_from_logs, Proposal, TargetModel};
use crate::rng;

/// Sample sizes used for the matrix estimate when none are given.
pub const DEFAULT_MATRIX_SAMPLES: (usize, usize) = (1000, 1000);
/// Sample sizes used along the path when evaluating the control variate.
pub const DEFAULT_EVAL_SAMPLES: (usize, usize) = (1, 10);

/// Visits the Monte Carlo estimates `P̂(x, a_j)` for every `j ≠ own`, where
/// `own = locate(x)`.
///
/// Bounded cells use `n1` uniform draws `Y` in `J_j` averaging
/// `vol(J_j) α(x, Y) q(x, Y)`. The unbounded cell uses `n2` proposal draws
/// `Z ~ q(x, ·)` averaging `1_{J_0}(Z) α(x, Z)`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn for_each_off_diagonal<Q, R>(
    model: &TargetModel,
    prop: &Q,
    allot: &Allotment,
    x: &[f64],
    log_pi_x: f64,
    own: usize,
    (n1, n2): (usize, usize),
    rng: &mut R,
    scratch: &mut [f64],
    mut visit: impl FnMut(usize, f64),
) where
    Q: Proposal,
    R: Rng + ?Sized,
{
    let inv_n1 = 1.0 / n1 as f64;
    for j in 1..=allot.size() {
        if j == own {
            continue;
        }
        let mut acc = 0.0;
        for _ in 0..n1 {
            allot.sample_in_cell(j, rng, scratch);
            let lq = prop.log_density(x, scratch);
            let lpy = model.log_density_unchecked(scratch);
            acc += (lq + log_acceptance_from_logs(prop, x, log_pi_x, scratch, lpy)).exp();
        }
        visit(j, allot.volume(j) * acc * inv_n1);
    }
    if own != 0 {
        let mut acc = 0.0;
        for _ in 0..n2 {
            prop.sample_into(x, rng, scratch);
            if allot.locate(scratch) == 0 {
                let lpy = model.log_density_unchecked(scratch);
                acc += log_acceptance_from_logs(prop, x, log_pi_x, scratch, lpy).exp();
            }
        }
        visit(0, acc / n2 as f64);
    }
}

fn kernel_row<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    x: &[f64],
    allot: &Allotment,
    samples: (usize, usize),
    rng: &mut R,
) -> (Vec<f64>, bool) {
    let own = allot.locate(x);
    let mut row = vec![0.0; allot.cell_count()];
    let mut scratch = vec![0.0; x.len()];
    let log_pi_x = model.log_density_unchecked(x);
    for_each_off_diagonal(model, prop, allot, x, log_pi_x, own, samples, rng, &mut scratch, |j, p| {
        row[j] = p
    });
    let off: f64 = row.iter().sum();
    if off <= 1.0 {
        row[own] = 1.0 - off;
        (row, false)
    } else {
        log::warn!(
            "kernel row at {x:?} has off-diagonal mass {off} > 1; clamping (n1={}, n2={} too small?)",
            samples.0,
            samples.1
        );
        for p in row.iter_mut() {
            *p /= off;
        }
        row[own] = 0.0;
        (row, true)
    }
}

/// One row `P̂(x, ·)` of the Monte Carlo kernel estimator. The entry of the
/// cell containing `x` is one minus the rest; if that would be negative it
/// is set to zero and the row renormalized (with a logged warning).
pub fn estimate_kernel_row<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    x: &[f64],
    allot: &Allotment,
    n1: usize,
    n2: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_args(model, prop, allot, x, n1, n2)?;
    Ok(kernel_row(model, prop, x, allot, (n1, n2), rng).0)
}

fn check_args<Q: Proposal>(
    model: &TargetModel,
    prop: &Q,
    allot: &Allotment,
    x: &[f64],
    n1: usize,
    n2: usize,
) -> Result<()> {
    check_dim(model.dim(), x.len())?;
    check_dim(model.dim(), prop.dim())?;
    check_dim(model.dim(), allot.dim())?;
    check_finite(x)?;
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidInput("kernel sample sizes must be positive".into()));
    }
    Ok(())
}

/// Row-stochastic estimate of the coarse transition matrix together with
/// its stationary distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseChain {
    matrix: DMatrix<f64>,
    stationary: Vec<f64>,
    samples: Option<(usize, usize)>,
    seed: Option<u64>,
    clamped_rows: usize,
}

impl CoarseChain {
    /// Wrap an explicit row-stochastic matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidInput("transition matrix must be square and nonempty".into()));
        }
        for (i, row) in matrix.row_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidInput(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("row {i} sums to {s}")));
            }
        }
        check_irreducible(&matrix)?;
        let stationary = stationary_distribution(&matrix)?;
        Ok(Self {
            matrix,
            stationary,
            samples: None,
            seed: None,
            clamped_rows: 0,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Number of states `m + 1`.
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// `(n1, n2)` used for the estimate, if it was estimated.
    pub fn sample_sizes(&self) -> Option<(usize, usize)> {
        self.samples
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Rows where the diagonal had to be clamped to zero.
    pub fn clamped_rows(&self) -> usize {
        self.clamped_rows
    }

    /// `π̂(f)`.
    pub fn mean(&self, f: &[f64]) -> f64 {
        self.stationary.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    /// Poisson solution pinned at state 0, reusing the cached stationary law.
    pub fn solve_poisson(&self, f: &[f64]) -> Result<PoissonSolution> {
        poisson::solve_with_stationary(&self.matrix, &self.stationary, f, 0)
    }

    /// `sup_j |(π̂ p̂)_j - π̂_j|`.
    pub fn stationarity_residual(&self) -> f64 {
        let n = self.size();
        (0..n)
            .map(|j| {
                let s: f64 = (0..n).map(|i| self.stationary[i] * self.matrix[(i, j)]).sum();
                (s - self.stationary[j]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Plain-text dump: a header line, one `row` line per state and the
    /// stationary vector.
    pub fn to_text(&self) -> String {
        let mut s = String::from("coarse-chain\n");
        let _ = writeln!(s, "size {}", self.size());
        if let Some((n1, n2)) = self.samples {
            let _ = writeln!(s, "samples {n1} {n2}");
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed {seed}");
        }
        for row in self.matrix.row_iter() {
            s.push_str("row");
            for v in row.iter() {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        }
        s.push_str("stationary");
        for v in &self.stationary {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut size = None;
        let mut samples = None;
        let mut seed = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut stationary = None;
        let floats = |toks: &[&str], n: usize| -> Result<Vec<f64>> {
            toks.iter()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("line {n}: bad number `{t}`"))))
                .collect()
        };
        let ints = |toks: &[&str], n: usize| -> Result<Vec<u64>> {
            toks.iter()
                .map(|t| t.parse::<u64>().map_err(|_| Error::Parse(format!("line {n}: bad integer `{t}`"))))
                .collect()
        };
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.first().copied() {
                None | Some("coarse-chain") => {}
                Some("size") => size = ints(&toks[1..], n)?.first().map(|&v| v as usize),
                Some("samples") => {
                    let v = ints(&toks[1..], n)?;
                    if v.len() != 2 {
                        return Err(Error::Parse(format!("line {n}: samples needs two values")));
                    }
                    samples = Some((v[0] as usize, v[1] as usize));
                }
                Some("seed") => seed = ints(&toks[1..], n)?.first().copied(),
                Some("row") => rows.push(floats(&toks[1..], n)?),
                Some("stationary") => stationary = Some(floats(&toks[1..], n)?),
                Some(other) => return Err(Error::Parse(format!("line {n}: unknown record `{other}`"))),
            }
        }
        let size = size.ok_or_else(|| Error::Parse("missing size".into()))?;
        if rows.len() != size || rows.iter().any(|r| r.len() != size) {
            return Err(Error::Parse("matrix shape does not match size".into()));
        }
        let stationary = stationary.ok_or_else(|| Error::Parse("missing stationary vector".into()))?;
        if stationary.len() != size {
            return Err(Error::Parse("stationary vector has wrong length".into()));
        }
        Ok(Self {
            matrix: DMatrix::from_fn(size, size, |i, j| rows[i][j]),
            stationary,
            samples,
            seed,
            clamped_rows: 0,
        })
    }
}

/// Every state reaches state 0 and is reached from it along positive entries.
fn check_irreducible(p: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    for forward in [true, false] {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { p[(i, j)] } else { p[(j, i)] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            let dir = if forward { "is unreachable from" } else { "cannot reach" };
            return Err(Error::Reducible(format!("state {k} {dir} state 0")));
        }
    }
    Ok(())
}

/// Estimate `p̂_{ij} = P̂(a_i, a_j)` row by row. Row `i` uses its own stream
/// derived from `seed`, so rows may be computed in parallel.
pub fn estimate_transition_matrix<Q: Proposal>(
    model: &TargetModel,
    prop: &Q,
    allot: &Allotment,
    n1: usize,
    n2: usize,
    seed: u64,
) -> Result<CoarseChain> {
    check_args(model, prop, allot, allot.rep(0), n1, n2)?;
    let size = allot.cell_count();
    let rows: Vec<(Vec<f64>, bool)> = (0..size)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(rng::derive_seed(seed, &[i as u64]), rng::CHAIN_STREAM);
            kernel_row(model, prop, allot.rep(i), allot, (n1, n2), &mut r)
        })
        .collect();
    let clamped_rows = rows.iter().filter(|r| r.1).count();
    let matrix = DMatrix::from_fn(size, size, |i, j| rows[i].0[j]);
    check_irreducible(&matrix)?;
    let stationary = stationary_distribution(&matrix)?;
    Ok(CoarseChain {
        matrix,
        stationary,
        samples: Some((n1, n2)),
        seed: Some(seed),
        clamped_rows,
    })
}

/// Piecewise-constant lift `F̃(x) = f̂[locate(x)]` of a Poisson solution.
#[derive(Debug, Clone)]
pub struct ControlVariate {
    allotment: Allotment,
    values: Vec<f64>,
    eval_samples: (usize, usize),
}

impl ControlVariate {
    pub fn allotment(&self) -> &Allotment {
        &self.allotment
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        self.values[self.allotment.locate(x)]
    }

    /// `(n1', n2')` used when estimating `P̂F̃` along a path.
    pub fn eval_samples(&self) -> (usize, usize) {
        self.eval_samples
    }

    pub fn with_eval_samples(mut self, n1: usize, n2: usize) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::InvalidInput("evaluation sample sizes must be positive".into()));
        }
        self.eval_samples = (n1, n2);
        Ok(self)
    }

    /// Drop the unbounded cell from the lift (`F̃ = 0` on `J_0`).
    pub fn without_unbounded_cell(mut self) -> Self {
        self.values[0] = 0.0;
        self
    }

    /// Add a constant to every cell value.
    pub fn shifted(mut self, c: f64) -> Self {
        for v in &mut self.values {
            *v += c;
        }
        self
    }
}

/// `F̃ = Σ_{j=0}^{m} f̂_j 1_{J_j}`, with the default evaluation sample sizes.
pub fn build_control_variate(allot: &Allotment, sol: &PoissonSolution) -> Result<ControlVariate> {
    if sol.values().len() != allot.cell_count() {
        return Err(Error::Dimension {
            expected: allot.cell_count(),
            got: sol.values().len(),
        });
    }
    Ok(ControlVariate {
        allotment: allot.clone(),
        values: sol.values().to_vec(),
        eval_samples: DEFAULT_EVAL_SAMPLES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allotment::{build_1d, build_boxes};
    use crate::model::RandomWalk;

    fn setup() -> (TargetModel, RandomWalk, Allotment) {
        (
            TargetModel::univariate(&[(0.4, -3.0, 1.0), (0.6, 4.0, 0.5)]).unwrap(),
            RandomWalk::isotropic(1, 1.0).unwrap(),
            build_1d(-8.0, 7.0, 30).unwrap(),
        )
    }

    #[test]
    fn rows_sum_to_one() {
        let (m, q, a) = setup();
        let mut r = rng::stream(1, 0);
        for x in [-12.0, -8.0, -3.3, 0.0, 0.1, 4.0, 6.99, 7.5] {
            for (n1, n2) in [(1, 1), (1, 10), (50, 50)] {
                let row = estimate_kernel_row(&m, &q, &[x], &a, n1, n2, &mut r).unwrap();
                assert_eq!(row.len(), 31);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        assert!(estimate_kernel_row(&m, &q, &[0.0], &a, 0, 1, &mut r).is_err());
    }

    #[test]
    fn clamping_keeps_rows_stochastic() {
        // Wide cells and a narrow proposal: single draws overshoot often.
        let m = TargetModel::univariate(&[(1.0, 0.0, 1.0)]).unwrap();
        let q = RandomWalk::isotropic(1, 0.01).unwrap();
        let a = build_1d(-1.0, 1.0, 4).unwrap();
        let mut r = rng::stream(2, 0);
        let mut clamped = 0;
        for i in 0..2000 {
            let x = [-0.501 + 1e-4 * i as f64];
            let (row, c) = kernel_row(&m, &q, &x, &a, (1, 1), &mut r);
            clamped += c as usize;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert!(clamped > 0);
    }

    #[test]
    fn far_cell_gets_negligible_mass() {
        let (m, q, a) = setup();
        let mut r = rng::stream(3, 0);
        let row = estimate_kernel_row(&m, &q, &[-3.0], &a, 1000, 1000, &mut r).unwrap();
        // Cell 30 is (6.5, 7]; q(-3, ·) there is below N(9.5; 0, 1) ≈ 1e-20.
        assert!(row[30] < 1e-19);
    }

    #[test]
    fn estimated_matrix_is_stochastic_with_positive_diagonal() {
        let (m, q, a) = setup();
        let chain = estimate_transition_matrix(&m, &q, &a, 1000, 1000, 7).unwrap();
        assert_eq!(chain.size(), 31);
        for i in 0..31 {
            let row = chain.matrix().row(i);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row[i] > 0.0);
        }
        assert!(chain.stationarity_residual() < 1e-10);
        let again = estimate_transition_matrix(&m, &q, &a, 1000, 1000, 7).unwrap();
        assert_eq!(chain, again);
    }

    #[test]
    fn one_box_allotment_gives_two_states() {
        let (m, q, _) = setup();
        let a = build_1d(-20.0, 20.0, 1).unwrap();
        let mut r = rng::stream(1, 0);
        for i in 0..2 {
            let row = estimate_kernel_row(&m, &q, a.rep(i), &a, 100, 100, &mut r).unwrap();
            assert_eq!(row.len(), 2);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // From the box center no proposal draw reaches |z| > 20, so the
        // estimate cannot return to J_0.
        assert!(matches!(
            estimate_transition_matrix(&m, &q, &a, 100, 100, 1),
            Err(Error::Reducible(_))
        ));
        let b = build_1d(-2.0, 2.0, 1).unwrap();
        let chain = estimate_transition_matrix(&m, &q, &b, 100, 100, 1).unwrap();
        assert_eq!(chain.size(), 2);
        for i in 0..2 {
            assert!((chain.matrix().row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reducible_matrix_is_rejected() {
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(CoarseChain::from_matrix(p), Err(Error::Reducible(_))));
    }

    #[test]
    fn control_variate_is_piecewise_constant() {
        let a = build_boxes(&[-7.0, -4.0], &[6.0, 4.0], &[3, 2], None).unwrap();
        let p = DMatrix::from_fn(7, 7, |i, j| if i == j { 0.4 } else { 0.1 });
        let f: Vec<f64> = (0..7).map(|j| (j as f64).sin()).collect();
        let sol = solve_poisson(&p, &f).unwrap();
        let cv = build_control_variate(&a, &sol).unwrap();
        for j in 0..7 {
            assert_eq!(cv.value(a.rep(j)), sol.values()[j]);
        }
        let mut r = rng::stream(4, 0);
        let shifted = cv.clone().shifted(2.5);
        for _ in 0..10_000 {
            let x = [r.random_range(-9.0..8.0), r.random_range(-6.0..6.0)];
            assert_eq!(cv.value(&x), cv.value(a.representative(&x)));
            assert!((shifted.value(&x) - cv.value(&x) - 2.5).abs() < 1e-12);
        }
        let bad = PoissonSolution::from_values(vec![0.0; 3], 0.0);
        assert!(build_control_variate(&a, &bad).is_err());
    }

    #[test]
    fn text_round_trip() {
        let (m, q, a) = setup();
        let chain = estimate_transition_matrix(&m, &q, &a, 200, 200, 3).unwrap();
        let back = CoarseChain::from_text(&chain.to_text()).unwrap();
        assert_eq!(back.matrix(), chain.matrix());
        assert_eq!(back.stationary(), chain.stationary());
        assert_eq!(back.sample_sizes(), Some((200, 200)));
        assert_eq!(back.seed(), Some(3));
    }
}
