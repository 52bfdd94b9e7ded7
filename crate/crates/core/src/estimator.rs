//! Plain and control-variate ergodic estimators, their mean-square errors
//! over independent paths, and the rate diagnostic.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::allotment::{mesh_and_radius, Allotment};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::mh::{ChainPath, MetropolisChain};
use crate::model::{DriftFunction, ForceFunction, MixtureComponent, Proposal, TargetModel, WeightFunction};
use crate::rng::{self, StreamRng};
use crate::scheme::{for_each_off_diagonal, ControlVariate};

/// `S_k(G) = (1/k) Σ G(Φ_i)` along a path.
pub fn ergodic_average(path: &ChainPath, g: &ForceFunction) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::InvalidInput("empty path".into()));
    }
    Ok(path.iter().map(|x| g.eval(x)).sum::<f64>() / path.len() as f64)
}

/// Reusable buffer for [`cv_correction`].
struct Scratch(Vec<f64>);

/// `P̂F̃(x) - F̃(x)` written as `Σ_{j≠i} (f̂_j - f̂_i) P̂(x, a_j)` with `i` the
/// cell of `x`. Equal to the row-based form whenever the row needs no
/// clamping, and unbiased for `PF̃(x) - F̃(x)` always.
#[inline]
fn cv_correction<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    x: &[f64],
    log_pi_x: f64,
    cv: &ControlVariate,
    samples: (usize, usize),
    rng: &mut R,
    scratch: &mut Scratch,
) -> f64 {
    let allot = cv.allotment();
    let values = cv.values();
    let own = allot.locate(x);
    let here = values[own];
    let mut acc = 0.0;
    for_each_off_diagonal(model, prop, allot, x, log_pi_x, own, samples, rng, &mut scratch.0, |j, p| {
        acc += (values[j] - here) * p
    });
    acc
}

/// One auxiliary estimate of `P̂F̃(x) - F̃(x)` with evaluation sample sizes
/// `(n1, n2)`.
pub fn cv_estimate_step<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    x: &[f64],
    cv: &ControlVariate,
    n1: usize,
    n2: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dim(model.dim(), x.len())?;
    check_dim(model.dim(), cv.allotment().dim())?;
    check_finite(x)?;
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidInput("evaluation sample sizes must be positive".into()));
    }
    let mut scratch = Scratch(vec![0.0; x.len()]);
    let lp = model.log_density_unchecked(x);
    Ok(cv_correction(model, prop, x, lp, cv, (n1, n2), rng, &mut scratch))
}

/// Both estimators on one stationary-start path of length `k`. The chain
/// consumes only `chain_rng`; the kernel estimates consume only `aux_rng`.
pub fn run_cv_estimator_with_streams<Q, R1, R2>(
    model: &TargetModel,
    prop: &Q,
    force: &ForceFunction,
    cv: &ControlVariate,
    k: usize,
    chain_rng: &mut R1,
    aux_rng: &mut R2,
) -> Result<(f64, f64)>
where
    Q: Proposal,
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    if k == 0 {
        return Err(Error::InvalidInput("path length must be positive".into()));
    }
    check_dim(model.dim(), cv.allotment().dim())?;
    let mut chain = MetropolisChain::stationary(model, prop, chain_rng)?;
    let mut scratch = Scratch(vec![0.0; model.dim()]);
    let samples = cv.eval_samples();
    let (mut plain, mut controlled) = (0.0, 0.0);
    for _ in 0..k {
        chain.step(chain_rng);
        let x = chain.state();
        let f = force.eval(x);
        let c = cv_correction(model, prop, x, chain.log_density(), cv, samples, aux_rng, &mut scratch);
        plain += f;
        controlled += f + c;
    }
    Ok((plain / k as f64, controlled / k as f64))
}

/// [`run_cv_estimator_with_streams`] with the auxiliary stream split off
/// `rng` before the path is simulated.
pub fn run_cv_estimator<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    force: &ForceFunction,
    cv: &ControlVariate,
    k: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut aux = StreamRng::seed_from_u64(rng.random());
    run_cv_estimator_with_streams(model, prop, force, cv, k, rng, &mut aux)
}

/// Per-path values of both estimators over `n` independent paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRun {
    pub k: usize,
    pub plain: Vec<f64>,
    pub controlled: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EstimatorRun {
    pub fn len(&self) -> usize {
        self.plain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plain.is_empty()
    }

    /// Rows `path,seed,plain,controlled` with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "seed", "plain", "controlled"])?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                self.seeds[i].to_string(),
                format!("{:?}", self.plain[i]),
                format!("{:?}", self.controlled[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run `n` paths in parallel. Path `i` uses seed `derive_seed(seed, [i])`
/// with its chain and auxiliary draws on separate streams of that seed.
pub fn collect_runs<Q: Proposal>(
    model: &TargetModel,
    prop: &Q,
    force: &ForceFunction,
    cv: &ControlVariate,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<EstimatorRun> {
    if n == 0 {
        return Err(Error::InvalidInput("number of paths must be positive".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| rng::derive_seed(seed, &[i])).collect();
    let pairs: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&s| {
            let mut chain = rng::stream(s, rng::CHAIN_STREAM);
            let mut aux = rng::stream(s, rng::AUX_STREAM);
            run_cv_estimator_with_streams(model, prop, force, cv, k, &mut chain, &mut aux)
        })
        .collect::<Result<_>>()?;
    let (plain, controlled) = pairs.into_iter().unzip();
    Ok(EstimatorRun {
        k,
        plain,
        controlled,
        seeds,
    })
}

/// Mean-square errors of both estimators and their ratio, with standard
/// errors (the ratio's by the delta method).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementSummary {
    pub n: usize,
    pub plain_mse: f64,
    pub plain_mse_se: f64,
    pub controlled_mse: f64,
    pub controlled_mse_se: f64,
    pub ratio: f64,
    pub ratio_se: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// Summary of a run against the exact mean.
pub fn summarize(runs: &EstimatorRun, true_mean: f64) -> Result<ImprovementSummary> {
    let n = runs.len();
    if n < 2 {
        return Err(Error::InvalidInput("at least two paths are needed".into()));
    }
    if !true_mean.is_finite() {
        return Err(Error::NonFinite(vec![true_mean]));
    }
    let a: Vec<f64> = runs.plain.iter().map(|s| (s - true_mean).powi(2)).collect();
    let b: Vec<f64> = runs.controlled.iter().map(|s| (s - true_mean).powi(2)).collect();
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    let nf = n as f64;
    let (ratio, ratio_se) = if mb > 0.0 {
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (nf - 1.0);
        let r = ma / mb;
        let var = (va - 2.0 * r * cov + r * r * vb) / (mb * mb * nf);
        (r, var.max(0.0).sqrt())
    } else {
        log::warn!("controlled estimator has zero mean-square error over {n} paths; ratio reported as +inf");
        (f64::INFINITY, f64::NAN)
    };
    Ok(ImprovementSummary {
        n,
        plain_mse: ma,
        plain_mse_se: (va / nf).sqrt(),
        controlled_mse: mb,
        controlled_mse_se: (vb / nf).sqrt(),
        ratio,
        ratio_se,
    })
}

/// `r_{k,n} = Σ (S^i_k(F) - π(F))² / Σ (S^i_k(F + P̂F̃ - F̃) - π(F))²`, or
/// `+inf` when the denominator vanishes.
pub fn improvement_ratio(runs: &EstimatorRun, true_mean: f64) -> Result<f64> {
    Ok(summarize(runs, true_mean)?.ratio)
}

/// Terms of the asymptotic-variance bound `max{π(V² 1_{J_0}), δ²}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateDiagnostic {
    pub mass: f64,
    pub mass_se: f64,
    pub mesh_squared: f64,
    pub driver: f64,
}

/// Estimate of `π(V² 1_{J_0})` with its standard error, and the probed mesh
/// of `allot` under `V`.
///
/// `J_0` usually carries very little target mass, so the draws come from the
/// same mixture with every covariance scaled by `1/(1-2γ)`, whose tails
/// follow those of `V²π ∝ π^{1-2γ}`, blended equally with copies widened a
/// further 4 and 16 times so that a wide box is still reached. Draws are
/// reweighted by `π/g`.
pub fn rate_diagnostic<R: Rng + ?Sized>(
    model: &TargetModel,
    v: &DriftFunction,
    allot: &Allotment,
    samples: usize,
    probe: usize,
    rng: &mut R,
) -> Result<RateDiagnostic> {
    if samples < 1000 {
        return Err(Error::InvalidInput("rate diagnostic needs at least 1000 samples".into()));
    }
    check_dim(model.dim(), allot.dim())?;
    let scale = 1.0 / (1.0 - 2.0 * v.gamma());
    let widened = TargetModel::new(
        [1.0, 4.0, 16.0]
            .iter()
            .flat_map(|inflate| {
                model.components().iter().map(move |c| MixtureComponent {
                    weight: c.weight / 3.0,
                    covariance: c
                        .covariance
                        .iter()
                        .map(|row| row.iter().map(|s| s * scale * inflate).collect())
                        .collect(),
                    ..c.clone()
                })
            })
            .collect(),
    )?;
    let mut x = vec![0.0; model.dim()];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        widened.sample_into(rng, &mut x);
        if allot.locate(&x) == 0 {
            let w = (model.log_density_unchecked(&x) - widened.log_density_unchecked(&x)).exp();
            let t = v.value(&x).powi(2) * w;
            s += t;
            s2 += t * t;
        }
    }
    let n = samples as f64;
    let mass = s / n;
    let mass_se = ((s2 / n - mass * mass).max(0.0) / (n - 1.0)).sqrt();
    let mesh = mesh_and_radius(allot, v, probe)?.mesh;
    let mesh_squared = mesh * mesh;
    Ok(RateDiagnostic {
        mass,
        mass_se,
        mesh_squared,
        driver: mass.max(mesh_squared),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allotment::build_1d;
    use crate::mh::simulate_stationary_path;
    use crate::model::RandomWalk;
    use crate::scheme::{build_control_variate, estimate_transition_matrix, PoissonSolution};

    fn setup() -> (TargetModel, RandomWalk, Allotment) {
        (
            TargetModel::univariate(&[(0.4, -3.0, 1.0), (0.6, 4.0, 0.5)]).unwrap(),
            RandomWalk::isotropic(1, 1.0).unwrap(),
            build_1d(-8.0, 7.0, 30).unwrap(),
        )
    }

    fn flat_cv(a: &Allotment, c: f64) -> ControlVariate {
        build_control_variate(a, &PoissonSolution::from_values(vec![c; a.cell_count()], 0.0)).unwrap()
    }

    fn scheme_cv(m: &TargetModel, q: &RandomWalk, a: &Allotment) -> ControlVariate {
        let chain = estimate_transition_matrix(m, q, a, 1000, 1000, 11).unwrap();
        let f: Vec<f64> = a.representatives().map(|p| p[0].powi(3)).collect();
        build_control_variate(a, &chain.solve_poisson(&f).unwrap()).unwrap()
    }

    #[test]
    fn ergodic_average_examples() {
        let (m, q, _) = setup();
        let path = simulate_stationary_path(&m, &q, 100, 1).unwrap();
        let c = ForceFunction::polynomial(0, vec![2.5]);
        assert_eq!(ergodic_average(&path, &c).unwrap(), 2.5);
        let id = ForceFunction::coordinate(0);
        let two = simulate_stationary_path(&m, &q, 2, 1).unwrap();
        let expect = (two.state(0)[0] + two.state(1)[0]) / 2.0;
        assert_eq!(ergodic_average(&two, &id).unwrap(), expect);
    }

    #[test]
    fn constant_solution_gives_zero_correction() {
        let (m, q, a) = setup();
        let mut r = rng::stream(5, 0);
        for c in [0.0, 7.25] {
            let cv = flat_cv(&a, c);
            for x in [-9.0, -3.0, 0.0, 4.0, 7.0] {
                assert_eq!(cv_estimate_step(&m, &q, &[x], &cv, 1, 10, &mut r).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn zero_solution_leaves_plain_estimator_bit_identical() {
        let (m, q, a) = setup();
        let f = ForceFunction::cube();
        let runs = collect_runs(&m, &q, &f, &flat_cv(&a, 0.0), 500, 8, 3).unwrap();
        assert_eq!(runs.plain, runs.controlled);
    }

    #[test]
    fn chain_is_shared_and_reproducible() {
        let (m, q, a) = setup();
        let f = ForceFunction::cube();
        let cv = scheme_cv(&m, &q, &a);
        let one = collect_runs(&m, &q, &f, &cv, 300, 6, 21).unwrap();
        let two = collect_runs(&m, &q, &f, &cv, 300, 6, 21).unwrap();
        assert_eq!(one, two);
        // Evaluation sizes change the auxiliary draws only.
        let cv2 = cv.clone().with_eval_samples(3, 7).unwrap();
        let three = collect_runs(&m, &q, &f, &cv2, 300, 6, 21).unwrap();
        assert_eq!(one.plain, three.plain);
        assert_ne!(one.controlled, three.controlled);
    }

    #[test]
    fn correction_has_zero_stationary_mean() {
        let (m, q, a) = setup();
        let cv = scheme_cv(&m, &q, &a);
        let mut r = rng::stream(8, 0);
        let n = 10_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let x = m.sample(&mut r);
                cv_estimate_step(&m, &q, &x, &cv, 1, 10, &mut r).unwrap()
            })
            .collect();
        let (mean, var) = mean_var(&vals);
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn ratio_edge_cases() {
        let runs = EstimatorRun {
            k: 1,
            plain: vec![1.0, 2.0, 3.0],
            controlled: vec![1.0, 2.0, 3.0],
            seeds: vec![0, 1, 2],
        };
        assert_eq!(improvement_ratio(&runs, 0.5).unwrap(), 1.0);
        let exact = EstimatorRun {
            controlled: vec![0.5; 3],
            ..runs.clone()
        };
        assert_eq!(improvement_ratio(&exact, 0.5).unwrap(), f64::INFINITY);
        let single = EstimatorRun {
            k: 1,
            plain: vec![1.0],
            controlled: vec![1.0],
            seeds: vec![0],
        };
        assert!(improvement_ratio(&single, 0.0).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_path() {
        let runs = EstimatorRun {
            k: 4,
            plain: vec![1.5, 2.0],
            controlled: vec![1.25, 2.0],
            seeds: vec![10, 11],
        };
        let mut buf = Vec::new();
        runs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "path,seed,plain,controlled\n0,10,1.5,1.25\n1,11,2.0,2.0\n");
    }

    #[test]
    fn rate_diagnostic_terms() {
        let (m, _, a) = setup();
        let v = DriftFunction::new(&m, 0.25).unwrap();
        let mut r = rng::stream(9, 0);
        let d = rate_diagnostic(&m, &v, &a, 100_000, 16, &mut r).unwrap();
        assert_eq!(d.driver, d.mass.max(d.mesh_squared));
        assert!(d.mass > 0.0 && d.mesh_squared >= 0.0625);
        let fine = rate_diagnostic(&m, &v, &build_1d(-8.0, 7.0, 60).unwrap(), 100_000, 16, &mut r).unwrap();
        assert!(fine.mesh_squared < d.mesh_squared);
        assert!(rate_diagnostic(&m, &v, &a, 999, 16, &mut r).is_err());
    }
}
