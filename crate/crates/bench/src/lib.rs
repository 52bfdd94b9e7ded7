//! Fixtures shared by the benchmarks.

use poisson_cv::{build_1d, Allotment, ControlVariate, ExperimentConfig, RandomWalk, TargetModel};

pub struct Fixture {
    pub model: TargetModel,
    pub proposal: RandomWalk,
    pub allotment: Allotment,
}

/// The one-dimensional two-well target on `(-8, 7]` split into `m` cells.
pub fn double_well_1d(m: usize) -> Fixture {
    let cfg = ExperimentConfig::double_well_1d();
    Fixture {
        model: cfg.model().unwrap(),
        proposal: cfg.proposal().unwrap(),
        allotment: build_1d(-8.0, 7.0, m).unwrap(),
    }
}

/// The two-dimensional target with its 3 x 2 box allotment.
pub fn double_well_2d() -> Fixture {
    let cfg = ExperimentConfig::double_well_2d();
    let model = cfg.model().unwrap();
    Fixture {
        allotment: cfg.allotments(&model).unwrap().remove(0),
        proposal: cfg.proposal().unwrap(),
        model,
    }
}

impl Fixture {
    /// Control variate for `F(x) = x_0^3` from a matrix estimated with
    /// `n1 = n2 = 1000`.
    pub fn control_variate(&self, seed: u64) -> ControlVariate {
        let chain =
            poisson_cv::estimate_transition_matrix(&self.model, &self.proposal, &self.allotment, 1000, 1000, seed)
                .unwrap();
        let f: Vec<f64> = self.allotment.representatives().map(|a| a[0].powi(3)).collect();
        poisson_cv::build_control_variate(&self.allotment, &chain.solve_poisson(&f).unwrap()).unwrap()
    }
}
