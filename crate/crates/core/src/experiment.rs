//! TOML-configured experiments: a grid of `(m, k)` cells, each estimating a
//! coarse chain, solving its Poisson equation and comparing the plain and
//! controlled estimators over independent paths.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allotment::{build_1d, build_boxes, build_exhaustive_sequence, Allotment, ExhaustiveOptions};
use crate::error::{Error, Result};
use crate::estimator::{collect_runs, rate_diagnostic, summarize, EstimatorRun, ImprovementSummary, RateDiagnostic};
use crate::model::{DriftFunction, ForceFunction, MixtureComponent, RandomWalk, TargetModel};
use crate::rng;
use crate::scheme::{build_control_variate, estimate_transition_matrix, DEFAULT_EVAL_SAMPLES, DEFAULT_MATRIX_SAMPLES};

const MATRIX_TAG: u64 = 0;
const PATHS_TAG: u64 = 1;
const MASS_TAG: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: usize,
    /// Worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub threads: usize,
    /// Probe points per axis per cell for mesh estimates. Defaults to 64 in
    /// one dimension and 16 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_resolution: Option<usize>,
    pub output: PathBuf,
    /// Keep `f̂_0` on the unbounded cell; `false` sets `F̃ = 0` there.
    #[serde(default = "yes")]
    pub include_unbounded_cell: bool,
    pub target: TargetConfig,
    pub proposal: ProposalConfig,
    pub force: ForceConfig,
    pub allotment: AllotmentConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsConfig>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub components: Vec<MixtureComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ForceConfig {
    /// `x_0³`.
    Cube,
    Coordinate { axis: usize },
    /// `Σ_p coefficients[p] · x_axis^p`.
    Polynomial { axis: usize, coefficients: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AllotmentConfig {
    /// `(lo, hi]` split into `m` equal cells, once per entry of `m`.
    Interval { lo: f64, hi: f64, m: Vec<usize> },
    /// The box `(lo, hi]` split into `counts[i]` boxes per axis, once per
    /// entry of `counts`.
    Boxes {
        lo: Vec<f64>,
        hi: Vec<f64>,
        counts: Vec<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unbounded_representative: Option<Vec<f64>>,
    },
    /// Exhaustive sequence for the drift `V_gamma` at the given levels.
    Exhaustive {
        gamma: f64,
        levels: Vec<f64>,
        #[serde(default = "default_exhaustive_probe")]
        probe: usize,
    },
}

fn default_exhaustive_probe() -> usize {
    ExhaustiveOptions::default().probe
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n1: usize,
    pub n2: usize,
    pub eval_n1: usize,
    pub eval_n2: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n1: DEFAULT_MATRIX_SAMPLES.0,
            n2: DEFAULT_MATRIX_SAMPLES.1,
            eval_n1: DEFAULT_EVAL_SAMPLES.0,
            eval_n2: DEFAULT_EVAL_SAMPLES.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub gamma: f64,
    #[serde(default = "default_mass_samples")]
    pub mass_samples: usize,
    /// Path length for the observed `k · MSE` column.
    pub k: usize,
}

fn default_mass_samples() -> usize {
    1_000_000
}

/// Line (1-based) where `key` is assigned inside `[section]` (or at top
/// level for an empty section), for error messages.
fn key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    section_line
}

impl ExperimentConfig {
    /// Parse and validate. Errors carry the offending line when known.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config {
            line: e.span().map(|s| src[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        cfg.validate_with(Some(src))?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(None)
    }

    fn validate_with(&self, src: Option<&str>) -> Result<()> {
        let fail = |section: &str, key: &str, message: String| Error::Config {
            line: src.and_then(|s| key_line(s, section, key)),
            message,
        };
        if self.paths < 2 {
            return Err(fail("", "paths", format!("paths must be at least 2, got {}", self.paths)));
        }
        if self.probe_resolution.is_some_and(|p| p < 2) {
            return Err(fail("", "probe_resolution", "probe_resolution must be at least 2".into()));
        }
        let s = &self.sampling;
        for (key, v) in [("n1", s.n1), ("n2", s.n2), ("eval_n1", s.eval_n1), ("eval_n2", s.eval_n2)] {
            if v == 0 {
                return Err(fail("sampling", key, format!("{key} must be positive")));
            }
        }
        if self.grid.k.is_empty() || self.grid.k.contains(&0) {
            return Err(fail("grid", "k", "k must be a nonempty list of positive lengths".into()));
        }
        let model = self
            .model()
            .map_err(|e| fail("target", "components", e.to_string()))?;
        let d = model.dim();
        self.proposal()
            .and_then(|q| {
                if q.covariance().len() == d {
                    Ok(())
                } else {
                    Err(Error::Dimension {
                        expected: d,
                        got: q.covariance().len(),
                    })
                }
            })
            .map_err(|e| fail("proposal", "covariance", e.to_string()))?;
        let axis = match &self.force {
            ForceConfig::Cube => 0,
            ForceConfig::Coordinate { axis } | ForceConfig::Polynomial { axis, .. } => *axis,
        };
        if axis >= d {
            return Err(fail("force", "axis", format!("axis {axis} out of range for dimension {d}")));
        }
        match &self.allotment {
            AllotmentConfig::Interval { lo, hi, m } => {
                if d != 1 {
                    return Err(fail("allotment", "kind", "interval allotments need a 1-dimensional target".into()));
                }
                if !(lo < hi) {
                    return Err(fail("allotment", "hi", "need lo < hi".into()));
                }
                if m.is_empty() || m.contains(&0) {
                    return Err(fail("allotment", "m", "m must be a nonempty list of positive counts".into()));
                }
            }
            AllotmentConfig::Boxes {
                lo,
                hi,
                counts,
                unbounded_representative,
            } => {
                if lo.len() != d || hi.len() != d {
                    return Err(fail("allotment", "lo", format!("box bounds must have {d} coordinates")));
                }
                if counts.is_empty() || counts.iter().any(|c| c.len() != d || c.contains(&0)) {
                    return Err(fail(
                        "allotment",
                        "counts",
                        format!("counts must be a nonempty list of {d} positive integers each"),
                    ));
                }
                if unbounded_representative.as_ref().is_some_and(|a| a.len() != d) {
                    return Err(fail("allotment", "unbounded_representative", format!("need {d} coordinates")));
                }
            }
            AllotmentConfig::Exhaustive { gamma, levels, probe } => {
                if !(*gamma > 0.0 && *gamma < 0.5) {
                    return Err(fail("allotment", "gamma", "gamma must lie in (0, 0.5)".into()));
                }
                if levels.is_empty() || levels.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(fail("allotment", "levels", "levels must be nonempty and increasing".into()));
                }
                if *probe < 2 {
                    return Err(fail("allotment", "probe", "probe must be at least 2".into()));
                }
            }
        }
        if let Some(diag) = &self.diagnostics {
            if !(diag.gamma > 0.0 && diag.gamma < 0.5) {
                return Err(fail("diagnostics", "gamma", "gamma must lie in (0, 0.5)".into()));
            }
            if diag.mass_samples < 1000 {
                return Err(fail("diagnostics", "mass_samples", "mass_samples must be at least 1000".into()));
            }
            if diag.k == 0 {
                return Err(fail("diagnostics", "k", "k must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<TargetModel> {
        TargetModel::new(self.target.components.clone())
    }

    pub fn proposal(&self) -> Result<RandomWalk> {
        RandomWalk::new(self.proposal.covariance.clone())
    }

    pub fn force(&self) -> ForceFunction {
        match &self.force {
            ForceConfig::Cube => ForceFunction::cube(),
            ForceConfig::Coordinate { axis } => ForceFunction::coordinate(*axis),
            ForceConfig::Polynomial { axis, coefficients } => ForceFunction::polynomial(*axis, coefficients.clone()),
        }
    }

    pub fn probe(&self, dim: usize) -> usize {
        self.probe_resolution.unwrap_or(if dim == 1 { 64 } else { 16 })
    }

    /// The configured allotments in grid order.
    pub fn allotments(&self, model: &TargetModel) -> Result<Vec<Allotment>> {
        match &self.allotment {
            AllotmentConfig::Interval { lo, hi, m } => m.iter().map(|&m| build_1d(*lo, *hi, m)).collect(),
            AllotmentConfig::Boxes {
                lo,
                hi,
                counts,
                unbounded_representative,
            } => counts
                .iter()
                .map(|c| build_boxes(lo, hi, c, unbounded_representative.clone()))
                .collect(),
            AllotmentConfig::Exhaustive { gamma, levels, probe } => {
                let v = DriftFunction::new(model, *gamma)?;
                let opts = ExhaustiveOptions {
                    probe: *probe,
                    ..ExhaustiveOptions::default()
                };
                build_exhaustive_sequence(&v, levels, opts)
            }
        }
    }

    /// Setup of the one-dimensional two-well example with `F(x) = x³`.
    pub fn double_well_1d() -> Self {
        let c = |weight, mean: f64, sd: f64| MixtureComponent {
            weight,
            mean: vec![mean],
            covariance: vec![vec![sd * sd]],
        };
        Self {
            seed: 20_130_501,
            paths: 200,
            threads: 0,
            probe_resolution: None,
            output: PathBuf::from("out/double_well_1d"),
            include_unbounded_cell: true,
            target: TargetConfig {
                components: vec![c(0.4, -3.0, 1.0), c(0.6, 4.0, 0.5)],
            },
            proposal: ProposalConfig {
                covariance: vec![vec![1.0]],
            },
            force: ForceConfig::Cube,
            allotment: AllotmentConfig::Interval {
                lo: -8.0,
                hi: 7.0,
                m: vec![30, 50, 70, 100, 300, 500, 700],
            },
            sampling: SamplingConfig::default(),
            grid: GridConfig {
                k: vec![5_000, 20_000, 50_000, 200_000],
            },
            diagnostics: Some(DiagnosticsConfig {
                gamma: 0.25,
                mass_samples: default_mass_samples(),
                k: 20_000,
            }),
        }
    }

    /// Setup of the two-dimensional example with `F(x, y) = x`.
    pub fn double_well_2d() -> Self {
        Self {
            seed: 20_130_502,
            paths: 200,
            threads: 0,
            probe_resolution: None,
            output: PathBuf::from("out/double_well_2d"),
            include_unbounded_cell: true,
            target: TargetConfig {
                components: vec![
                    MixtureComponent {
                        weight: 0.6,
                        mean: vec![-3.0, 0.0],
                        covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    },
                    MixtureComponent {
                        weight: 0.4,
                        mean: vec![4.0, 0.0],
                        covariance: vec![vec![0.25, 0.0], vec![0.0, 0.25]],
                    },
                ],
            },
            proposal: ProposalConfig {
                covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            force: ForceConfig::Coordinate { axis: 0 },
            allotment: AllotmentConfig::Boxes {
                lo: vec![-7.0, -4.0],
                hi: vec![6.0, 4.0],
                counts: vec![vec![3, 2]],
                unbounded_representative: Some(vec![-7.0, 0.0]),
            },
            sampling: SamplingConfig::default(),
            grid: GridConfig {
                k: vec![50_000, 200_000],
            },
            diagnostics: None,
        }
    }
}

/// Outcome of one `(m, k)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub m: usize,
    pub k: usize,
    pub summary: ImprovementSummary,
    /// `(π̂(f) - π(F))²`, the squared error of the coarse chain's own mean.
    pub coarse_bias_sq: f64,
    pub runs: EstimatorRun,
}

/// Everything a cell needs that does not depend on `(m, k)`.
pub struct Setup {
    pub model: TargetModel,
    pub proposal: RandomWalk,
    pub force: ForceFunction,
    pub true_mean: f64,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let model = cfg.model()?;
        let force = cfg.force();
        let true_mean = force.exact_mean(&model).ok_or(Error::NoExactMean)?;
        Ok(Self {
            proposal: cfg.proposal()?,
            model,
            force,
            true_mean,
        })
    }
}

/// Seed of cell `(m, k)` under master seed `seed`.
pub fn cell_seed(seed: u64, m: usize, k: usize) -> u64 {
    rng::derive_seed(seed, &[m as u64, k as u64])
}

/// Run one cell: estimate the coarse chain on `allot`, solve the Poisson
/// equation for `f_j = F(a_j)`, and simulate `cfg.paths` paths of length `k`.
pub fn run_cell(cfg: &ExperimentConfig, setup: &Setup, allot: &Allotment, k: usize) -> Result<CellResult> {
    let m = allot.size();
    let seed = cell_seed(cfg.seed, m, k);
    let s = cfg.sampling;
    let chain = estimate_transition_matrix(
        &setup.model,
        &setup.proposal,
        allot,
        s.n1,
        s.n2,
        rng::derive_seed(seed, &[MATRIX_TAG]),
    )?;
    if chain.clamped_rows() > 0 {
        log::warn!("m={m}: {} matrix rows needed clamping", chain.clamped_rows());
    }
    let f: Vec<f64> = allot.representatives().map(|a| setup.force.eval(a)).collect();
    let sol = chain.solve_poisson(&f)?;
    let mut cv = build_control_variate(allot, &sol)?.with_eval_samples(s.eval_n1, s.eval_n2)?;
    if !cfg.include_unbounded_cell {
        cv = cv.without_unbounded_cell();
    }
    let runs = collect_runs(
        &setup.model,
        &setup.proposal,
        &setup.force,
        &cv,
        k,
        cfg.paths,
        rng::derive_seed(seed, &[PATHS_TAG]),
    )?;
    let summary = summarize(&runs, setup.true_mean)?;
    Ok(CellResult {
        m,
        k,
        summary,
        coarse_bias_sq: (sol.coarse_mean() - setup.true_mean).powi(2),
        runs,
    })
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Run every `(m, k)` cell and write `results.csv`, `results.txt` and one
/// `runs/m{m}_k{k}.csv` per cell under the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let allots = cfg.allotments(&setup.model)?;
    let out = &cfg.output;
    fs::create_dir_all(out.join("runs"))?;
    let cells = with_pool(cfg.threads, || {
        let mut cells = Vec::new();
        for allot in &allots {
            for &k in &cfg.grid.k {
                log::info!("cell m={} k={k}: {} paths", allot.size(), cfg.paths);
                let cell = run_cell(cfg, &setup, allot, k)?;
                log::info!(
                    "cell m={} k={k}: r = {:.4} ± {:.3}",
                    cell.m,
                    cell.summary.ratio,
                    cell.summary.ratio_se
                );
                cells.push(cell);
            }
        }
        Ok(cells)
    })?;

    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    w.write_record([
        "m",
        "k",
        "n",
        "ratio",
        "ratio_se",
        "plain_mse",
        "plain_mse_se",
        "controlled_mse",
        "controlled_mse_se",
        "coarse_bias_sq",
    ])?;
    for c in &cells {
        let s = &c.summary;
        w.write_record([
            c.m.to_string(),
            c.k.to_string(),
            s.n.to_string(),
            num(s.ratio),
            num(s.ratio_se),
            num(s.plain_mse),
            num(s.plain_mse_se),
            num(s.controlled_mse),
            num(s.controlled_mse_se),
            num(c.coarse_bias_sq),
        ])?;
    }
    w.flush()?;
    fs::write(out.join("results.txt"), format_table(&cells))?;
    for c in &cells {
        let f = fs::File::create(out.join("runs").join(format!("m{}_k{}.csv", c.m, c.k)))?;
        c.runs.write_csv(f)?;
    }
    Ok(cells)
}

/// Ratio table with `m` down the side and `k` across the top.
pub fn format_table(cells: &[CellResult]) -> String {
    let mut ms: Vec<usize> = cells.iter().map(|c| c.m).collect();
    ms.dedup();
    let mut ks: Vec<usize> = cells.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut s = String::new();
    let _ = write!(s, "{:>6}", "m \\ k");
    for k in &ks {
        let _ = write!(s, " {:>20}", k);
    }
    s.push('\n');
    for m in ms {
        let _ = write!(s, "{m:>6}");
        for k in &ks {
            match cells.iter().find(|c| c.m == m && c.k == *k) {
                Some(c) => {
                    let cell = format!("{:.4} ± {:.2}", c.summary.ratio, c.summary.ratio_se);
                    let _ = write!(s, " {cell:>20}");
                }
                None => {
                    let _ = write!(s, " {:>20}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// One row of the diagnostics report.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub m: usize,
    pub rate: RateDiagnostic,
    /// `k` times the controlled mean-square error at the diagnostics `k`.
    pub controlled_mse_k: f64,
}

/// For each configured allotment, the bound terms `π(V² 1_{J_0})` and `δ²`
/// next to the observed `k · MSE` of the controlled estimator; written to
/// `diagnostics.csv`.
pub fn run_diagnostics(cfg: &ExperimentConfig) -> Result<Vec<DiagnosticRow>> {
    cfg.validate()?;
    let diag = cfg.diagnostics.as_ref().ok_or_else(|| Error::Config {
        line: None,
        message: "a [diagnostics] section with gamma and k is required".into(),
    })?;
    let setup = Setup::new(cfg)?;
    let v = DriftFunction::new(&setup.model, diag.gamma)?;
    let allots = cfg.allotments(&setup.model)?;
    let probe = cfg.probe(setup.model.dim());
    let rows = with_pool(cfg.threads, || {
        allots
            .iter()
            .map(|allot| {
                let m = allot.size();
                log::info!("diagnostics m={m}");
                let mut r = rng::stream(rng::derive_seed(cfg.seed, &[m as u64, MASS_TAG]), rng::CHAIN_STREAM);
                let rate = rate_diagnostic(&setup.model, &v, allot, diag.mass_samples, probe, &mut r)?;
                let cell = run_cell(cfg, &setup, allot, diag.k)?;
                Ok(DiagnosticRow {
                    m,
                    rate,
                    controlled_mse_k: cell.summary.controlled_mse * diag.k as f64,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    fs::create_dir_all(&cfg.output)?;
    let mut w = csv::Writer::from_path(cfg.output.join("diagnostics.csv"))?;
    w.write_record(["m", "mass_term", "mass_se", "mesh_squared", "bound_driver", "controlled_mse_k"])?;
    for r in &rows {
        w.write_record([
            r.m.to_string(),
            num(r.rate.mass),
            num(r.rate.mass_se),
            num(r.rate.mesh_squared),
            num(r.rate.driver),
            num(r.controlled_mse_k),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
