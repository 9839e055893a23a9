use dlnm_lps::laplace::{fit, fit_fixed, hyper_objective, FitOptions, HyperProblem, Hyperparams};
use dlnm_lps::likelihood::Family;
use dlnm_lps::model::{Design, MainEffect, Model, ModelSpec, Modifier, PenaltyAssembly, PenaltyBlockTemplate, PenaltyTerm};
use dlnm_lps::simgen::{generate_panel, synthetic_exposure, AreaRegime, Modification, ScenarioSpec, SimulatedPanel};
use dlnm_lps::spatial::{AdjacencyGraph, SpatialSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simulated(j: usize, t: usize, seed: u64, rho: f64) -> SimulatedPanel {
    let mut s = ScenarioSpec::new(Modification::Linear, AreaRegime::Large, j, t, seed);
    s.rho = rho;
    generate_panel(&s, &synthetic_exposure(j, t, seed), Some(&AdjacencyGraph::lattice(j))).unwrap()
}

fn spec(modifier: Modifier, spatial: SpatialSpec) -> ModelSpec {
    let mut s = ModelSpec::new(modifier, MainEffect::Linear, spatial);
    s.lag_shrink = true;
    s.exposure_range = Some((0.0, 10.0));
    s
}

#[test]
fn small_instance_has_finite_smoothing_parameters() {
    let sim = simulated(5, 100, 1, 0.95);
    let model = Model::build(&spec(Modifier::None, SpatialSpec::leroux(AdjacencyGraph::lattice(5))), &sim.panel).unwrap();
    let f = fit(&model, &FitOptions::default()).unwrap();
    assert!(f.converged);
    assert_eq!(f.hyper.lambdas.len(), f.lambda_names.len());
    assert!(f.hyper.lambdas.iter().all(|l| l.is_finite() && *l > 0.0));
    assert!(f.p_d > 0.0 && f.p_d < f.xi.len() as f64);
    assert!(f.sigma.clone().cholesky().is_some());
    let rho = f.hyper.rho.unwrap();
    assert!(rho > 0.0 && rho < 1.0);
}

#[test]
fn recovers_iid_random_effect_precision() {
    // rho = 0 makes the Leroux generator iid with precision 1/σ² = 5
    let sim = simulated(50, 100, 21, 0.0);
    let model = Model::build(&spec(Modifier::None, SpatialSpec::iid()), &sim.panel).unwrap();
    let f = fit(&model, &FitOptions::default()).unwrap();
    let tau = f.hyper.tau.unwrap();
    assert!(f.converged);
    assert!(tau > 2.5 && tau < 10.0, "tau {tau}");

    // the objective prefers the generating precision to one 100x off
    let problem = HyperProblem::from_model(&model);
    let at = |tau: f64| {
        let h = Hyperparams { tau: Some(tau), ..f.hyper.clone() };
        hyper_objective(&problem, &h, Some(&f.xi)).unwrap().objective
    };
    let truth = at(5.0);
    assert!(truth > at(500.0) && truth > at(0.05));
}

#[test]
fn negative_binomial_on_poisson_counts_reaches_poisson_boundary() {
    let sim = simulated(5, 100, 2, 0.95);
    let mut s = spec(Modifier::None, SpatialSpec::leroux(AdjacencyGraph::lattice(5)));
    s.family = Family::NegativeBinomial;
    let model = Model::build(&s, &sim.panel).unwrap();
    let f = fit(&model, &FitOptions::default()).unwrap();
    let phi = f.hyper.phi.unwrap();
    assert!(phi >= 1e3, "phi {phi}");
}

#[test]
fn objective_is_continuous_in_smoothing_parameters() {
    let sim = simulated(5, 100, 3, 0.95);
    let model = Model::build(&spec(Modifier::Linear, SpatialSpec::leroux(AdjacencyGraph::lattice(5))), &sim.panel).unwrap();
    let problem = HyperProblem::from_model(&model);
    let base = problem.default_hyper();
    let values: Vec<f64> = (0..=20)
        .map(|k| {
            let mut h = base.clone();
            h.lambdas[0] *= 10f64.powf(k as f64 / 20.0);
            hyper_objective(&problem, &h, None).unwrap().objective
        })
        .collect();
    let steps: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let mean = steps.iter().sum::<f64>() / steps.len() as f64;
    let max = steps.iter().copied().fold(0.0, f64::max);
    assert!(max <= 4.0 * mean + 1e-8 * values[0].abs(), "steps {steps:?}");
}

#[test]
fn heavily_penalized_interaction_does_not_worsen_deviance() {
    let sim = simulated(6, 120, 4, 0.95);
    let graph = AdjacencyGraph::lattice(6);
    let m0 = Model::build(&spec(Modifier::None, SpatialSpec::leroux(graph.clone())), &sim.panel).unwrap();
    let m1 = Model::build(&spec(Modifier::Linear, SpatialSpec::leroux(graph)), &sim.panel).unwrap();
    let f0 = fit(&m0, &FitOptions::default()).unwrap();
    let lookup = |name: &str| f0.lambda_names.iter().position(|n| n == name).map(|i| f0.hyper.lambdas[i]);
    let lambdas: Vec<f64> = m1.penalty.lambda_names.iter().map(|n| lookup(n).unwrap_or(1e12)).collect();
    let h1 = Hyperparams { lambdas, ..f0.hyper.clone() };
    let r1 = fit_fixed(&HyperProblem::from_model(&m1), &h1).unwrap();
    let r0 = fit_fixed(&HyperProblem::from_model(&m0), &f0.hyper).unwrap();
    assert!(r1.deviance <= r0.deviance + 1e-6 * r0.deviance.abs(), "{} vs {}", r1.deviance, r0.deviance);
    assert!((r1.deviance - r0.deviance).abs() < 1e-3 * r0.deviance.abs());
}

#[test]
fn fits_are_bit_reproducible() {
    let sim = simulated(5, 100, 5, 0.95);
    let model = Model::build(&spec(Modifier::Linear, SpatialSpec::leroux(AdjacencyGraph::lattice(5))), &sim.panel).unwrap();
    let a = fit(&model, &FitOptions::default()).unwrap();
    let b = fit(&model, &FitOptions::default()).unwrap();
    assert_eq!(a.xi, b.xi);
    assert_eq!(a.sigma, b.sigma);
    assert_eq!(a.hyper, b.hyper);
    assert_eq!(a.dic.to_bits(), b.dic.to_bits());
}

#[test]
fn objective_invariant_to_swapping_symmetric_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, k) = (60, 3);
    let a = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(0..6) as f64);
    let stack = |first: &DMatrix<f64>, second: &DMatrix<f64>| {
        let mut h = DMatrix::from_element(n, 1 + 2 * k, 1.0);
        h.view_mut((0, 1), (n, k)).copy_from(first);
        h.view_mut((0, 1 + k), (n, k)).copy_from(second);
        Design::from_dense(h, DVector::zeros(n), y.clone())
    };
    let d = dlnm_lps::basis::penalty_block(k, 1, 1e-6).unwrap().matrix;
    let penalty = PenaltyAssembly {
        lambda_names: vec!["first".into(), "second".into()],
        blocks: vec![
            PenaltyBlockTemplate {
                name: "first",
                offset: 1,
                dim: k,
                terms: vec![PenaltyTerm { lambda: 0, matrix: d.clone() }],
                fixed: None,
            },
            PenaltyBlockTemplate {
                name: "second",
                offset: 1 + k,
                dim: k,
                terms: vec![PenaltyTerm { lambda: 1, matrix: d }],
                fixed: None,
            },
        ],
    };
    let (d1, d2) = (stack(&a, &b), stack(&b, &a));
    let problem = |design| HyperProblem {
        design,
        penalty: &penalty,
        spatial: None,
        family: Family::Poisson,
        zeta: 1e-5,
        inner: Default::default(),
    };
    let h = |l1: f64, l2: f64| Hyperparams { lambdas: vec![l1, l2], tau: None, rho: None, phi: None };
    for (l1, l2) in [(1.0, 1.0), (0.3, 20.0), (5.0, 0.01)] {
        let v1 = hyper_objective(&problem(&d1), &h(l1, l2), None).unwrap().objective;
        let v2 = hyper_objective(&problem(&d2), &h(l2, l1), None).unwrap().objective;
        assert!((v1 - v2).abs() < 1e-9 * v1.abs().max(1.0), "{v1} vs {v2}");
    }
}
