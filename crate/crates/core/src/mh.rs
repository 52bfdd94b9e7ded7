//! Metropolis-Hastings chain driven by a target mixture and a proposal kernel.

use rand::Rng;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::model::{acceptance_from_logs, Proposal, TargetModel};
use crate::rng;

/// Running chain state with its cached log density.
#[derive(Debug, Clone)]
pub struct MetropolisChain<'a, Q> {
    model: &'a TargetModel,
    prop: &'a Q,
    state: Vec<f64>,
    log_pi: f64,
    candidate: Vec<f64>,
}

impl<'a, Q: Proposal> MetropolisChain<'a, Q> {
    pub fn new(model: &'a TargetModel, prop: &'a Q, x0: &[f64]) -> Result<Self> {
        check_dim(model.dim(), x0.len())?;
        check_dim(model.dim(), prop.dim())?;
        check_finite(x0)?;
        Ok(Self {
            model,
            prop,
            log_pi: model.log_density_unchecked(x0),
            state: x0.to_vec(),
            candidate: vec![0.0; x0.len()],
        })
    }

    /// Start from an exact draw of the target.
    pub fn stationary<R: Rng + ?Sized>(model: &'a TargetModel, prop: &'a Q, rng: &mut R) -> Result<Self> {
        let x0 = model.sample(rng);
        Self::new(model, prop, &x0)
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// `ln π` at the current state.
    pub fn log_density(&self) -> f64 {
        self.log_pi
    }

    /// One transition; returns whether the proposal was accepted. A rejected
    /// step leaves the state untouched.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        self.prop.sample_into(&self.state, rng, &mut self.candidate);
        let log_pi_y = self.model.log_density_unchecked(&self.candidate);
        let alpha = acceptance_from_logs(self.prop, &self.state, self.log_pi, &self.candidate, log_pi_y);
        let u: f64 = rng.random();
        if u < alpha {
            std::mem::swap(&mut self.state, &mut self.candidate);
            self.log_pi = log_pi_y;
            true
        } else {
            false
        }
    }
}

/// Draw `y ~ q(x, ·)` and move there with probability `α(x, y)`.
pub fn mh_step<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut chain = MetropolisChain::new(model, prop, x)?;
    chain.step(rng);
    Ok(chain.state)
}

/// States `Φ_1, …, Φ_k` of one simulated chain, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    dim: usize,
    states: Vec<f64>,
    seed: Option<u64>,
}

impl ChainPath {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.states.chunks_exact(self.dim)
    }
}

/// Iterate `mh_step` `k` times from `x0`. The returned path holds the `k`
/// post-transition states; `x0` itself is not included.
pub fn simulate_path<Q: Proposal, R: Rng + ?Sized>(
    model: &TargetModel,
    prop: &Q,
    x0: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<ChainPath> {
    if k == 0 {
        return Err(Error::InvalidInput("path length must be positive".into()));
    }
    let mut chain = MetropolisChain::new(model, prop, x0)?;
    let mut states = Vec::with_capacity(k * model.dim());
    for _ in 0..k {
        chain.step(rng);
        states.extend_from_slice(chain.state());
    }
    Ok(ChainPath {
        dim: model.dim(),
        states,
        seed: None,
    })
}

/// Path of length `k` started from an exact target draw, using the chain
/// stream keyed by `seed`.
pub fn simulate_stationary_path<Q: Proposal>(
    model: &TargetModel,
    prop: &Q,
    k: usize,
    seed: u64,
) -> Result<ChainPath> {
    let mut rng = rng::stream(seed, rng::CHAIN_STREAM);
    let x0 = model.sample(&mut rng);
    let mut path = simulate_path(model, prop, &x0, k, &mut rng)?;
    path.seed = Some(seed);
    Ok(path)
}
