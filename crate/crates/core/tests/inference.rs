use dlnm_lps::error::Error;
use dlnm_lps::inference::{LagSel, Posterior};
use dlnm_lps::laplace::{fit, FitOptions, FitResult};
use dlnm_lps::model::{MainEffect, Model, Modifier};
use dlnm_lps::simgen::{
    generate_panel, simulation_variant, synthetic_exposure, AreaRegime, Modification, ScenarioSpec, SimulatedPanel,
};
use dlnm_lps::spatial::AdjacencyGraph;
use nalgebra::DVector;

const X0: f64 = 5.0;

fn simulated(j: usize, t: usize, seed: u64) -> SimulatedPanel {
    let s = ScenarioSpec::new(Modification::Linear, AreaRegime::Large, j, t, seed);
    generate_panel(&s, &synthetic_exposure(j, t, seed), Some(&AdjacencyGraph::lattice(j))).unwrap()
}

fn fitted(sim: &SimulatedPanel, modifier: Modifier) -> (Model, FitResult) {
    let graph = AdjacencyGraph::lattice(sim.panel.n_areas());
    let mut v = simulation_variant("m", modifier, &graph);
    v.spec.main_effect = MainEffect::Linear;
    let model = Model::build(&v.spec, &sim.panel).unwrap();
    let f = fit(&model, &FitOptions::default()).unwrap();
    (model, f)
}

fn all_lags() -> Vec<LagSel> {
    let mut l: Vec<LagSel> = (0..=8).map(LagSel::Lag).collect();
    l.push(LagSel::Overall);
    l
}

#[test]
fn relative_risk_invariants() {
    let sim = simulated(6, 150, 1);
    let (model, f) = fitted(&sim, Modifier::Linear);
    assert!(f.converged);
    let post = Posterior::new(&model, &f, 1000, 7).unwrap();
    let xs: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
    let zs = [-0.5, 0.0, 0.3, 0.8];
    let cells = post.log_rr(&xs, X0, &zs, &all_lags()).unwrap();
    for c in &cells {
        assert!(c.lo <= c.estimate && c.estimate <= c.hi, "{c:?}");
        if c.x == X0 {
            assert_eq!((c.estimate, c.lo, c.hi, c.sd), (0.0, 0.0, 0.0, 0.0));
        }
    }
    // overall equals the sum of lag-specific estimates
    for chunk in cells.chunks(10) {
        let s: f64 = chunk[..9].iter().map(|c| c.estimate).sum();
        assert!((s - chunk[9].estimate).abs() < 1e-12);
    }
    // affine in z
    for &x in &xs {
        let v: Vec<f64> =
            [-0.4, 0.1, 0.6].iter().map(|&z| post.surface(&[x], X0, z, &[LagSel::Overall]).unwrap()[0].estimate).collect();
        assert!((v[0] - 2.0 * v[1] + v[2]).abs() < 1e-10);
    }
}

#[test]
fn closed_form_sd_agrees_with_draw_quantiles() {
    let sim = simulated(6, 150, 2);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let post = Posterior::new(&model, &f, 4000, 3).unwrap();
    for c in post.surface(&[1.0, 3.0, 8.0], X0, 0.2, &all_lags()).unwrap() {
        let half = 0.5 * (c.hi - c.lo) / 1.959964;
        // Monte-Carlo error of a tail quantile at 4000 draws is about 6% of sd
        assert!((half / c.sd - 1.0).abs() < 0.12, "{c:?}");
    }
}

#[test]
fn doubling_draws_moves_quantiles_within_mc_error() {
    let sim = simulated(6, 150, 2);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let a = Posterior::new(&model, &f, 2000, 3).unwrap();
    let b = Posterior::new(&model, &f, 4000, 3).unwrap();
    // the same seed extends the draw set, so the first draws are shared
    assert_eq!(a.draws.columns(0, 2000), b.draws.columns(0, 2000));
    let ca = a.surface(&[2.0, 7.5], X0, 0.0, &all_lags()).unwrap();
    let cb = b.surface(&[2.0, 7.5], X0, 0.0, &all_lags()).unwrap();
    for (p, q) in ca.iter().zip(&cb) {
        // a tail quantile at 2000 draws has standard error ≈ 0.06 sd; half of
        // that variance remains in the difference to the nested 4000-draw value
        let se = 0.06 * p.sd * 0.5f64.sqrt();
        assert!((p.lo - q.lo).abs() < 3.0 * se && (p.hi - q.hi).abs() < 3.0 * se, "{p:?} {q:?}");
    }
}

#[test]
fn ratios_of_relative_risks() {
    let sim = simulated(6, 150, 3);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let post = Posterior::new(&model, &f, 500, 1).unwrap();
    let xs = [0.0, 2.5, 7.5, 10.0];
    for c in post.rrr(&xs, X0, 0.4, 0.4).unwrap() {
        assert_eq!((c.rrr, c.lo, c.hi), (1.0, 1.0, 1.0));
    }
    let one = post.rrr(&xs, X0, 0.3, 0.0).unwrap();
    let two = post.rrr(&xs, X0, 0.6, 0.0).unwrap();
    for (a, b) in one.iter().zip(&two) {
        assert!((2.0 * a.rrr.ln() - b.rrr.ln()).abs() < 1e-12);
    }

    let (model0, f0) = fitted(&sim, Modifier::None);
    let post0 = Posterior::new(&model0, &f0, 500, 1).unwrap();
    for c in post0.rrr(&xs, X0, 0.8, -0.5).unwrap() {
        assert_eq!((c.rrr, c.lo, c.hi), (1.0, 1.0, 1.0));
    }
    let a = post0.surface(&xs, X0, -0.5, &all_lags()).unwrap();
    let b = post0.surface(&xs, X0, 0.8, &all_lags()).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!((p.estimate, p.lo, p.hi), (q.estimate, q.lo, q.hi));
    }
}

#[test]
fn exceedance_probabilities() {
    let sim = simulated(6, 150, 4);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let n = 2000;
    let post = Posterior::new(&model, &f, n, 5).unwrap();
    let at_ref = post.exceedance(&[X0], &[0.0, 0.5], X0, 1.0).unwrap();
    assert!(at_ref.iter().all(|c| c.degenerate && c.probability == 0.0));
    let zero = post.exceedance(&[0.0, 3.0, 9.0], &[0.0], X0, 0.0).unwrap();
    assert!(zero.iter().all(|c| c.probability == 1.0));
    assert!(post.exceedance(&[3.0], &[0.0], X0, -1.0).is_err());

    // draws centred on zero: exceedance near one half
    let mut f0 = f.clone();
    let th = model.layout().theta1;
    for i in th.0..th.0 + th.1 + model.layout().theta2.1 {
        f0.xi[i] = 0.0;
    }
    let post0 = Posterior::new(&model, &f0, n, 6).unwrap();
    let se = (0.25 / n as f64).sqrt();
    for c in post0.exceedance(&[1.0, 8.0], &[0.0], X0, 1.0).unwrap() {
        assert!((c.probability - 0.5).abs() < 3.0 * se, "{c:?}");
    }
}

#[test]
fn domain_errors() {
    let sim = simulated(5, 120, 5);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let post = Posterior::new(&model, &f, 100, 1).unwrap();
    assert!(matches!(post.surface(&[11.0], X0, 0.0, &[LagSel::Overall]), Err(Error::Domain { .. })));
    assert!(post.surface(&[3.0], X0, 0.0, &[LagSel::Lag(9)]).is_err());
    assert!(Posterior::new(&model, &f, 0, 1).is_err());
}

#[test]
fn posterior_draws_are_seed_deterministic() {
    let sim = simulated(5, 120, 6);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let a = Posterior::new(&model, &f, 300, 9).unwrap();
    let b = Posterior::new(&model, &f, 300, 9).unwrap();
    assert_eq!(a.draws, b.draws);
}

#[test]
#[allow(clippy::reversed_empty_ranges)]
fn attributable_fraction_oracles() {
    let sim = simulated(5, 120, 7);
    let (model, f) = fitted(&sim, Modifier::Linear);
    let post = Posterior::new(&model, &f, 500, 2).unwrap();
    let panel = &sim.panel;

    let base = post.attributable_fraction(panel, X0, 20..120, None).unwrap();
    let same = post.attributable_fraction(panel, X0, 20..120, Some(&panel.modifier)).unwrap();
    for a in &same.areas {
        let (af, lo, hi) = a.counterfactual.unwrap();
        assert_eq!((af, lo, hi), (a.af, a.lo, a.hi));
        assert!(a.lo <= a.af && a.af <= a.hi);
    }
    assert_eq!(base.areas.iter().map(|a| a.af).collect::<Vec<_>>(), same.areas.iter().map(|a| a.af).collect::<Vec<_>>());
    assert!(post.attributable_fraction(panel, X0, 20..120, Some(&[0.0, 1.0])).is_err());
    assert!(post.attributable_fraction(panel, X0, 5..3, None).unwrap_err().to_string().contains("period"));
    assert!(post.attributable_fraction(panel, X0, 50..53, None).unwrap().short_period);

    // single time point: hand-evaluated formula from the stored cross-basis row
    let t = 60;
    let single = post.attributable_fraction(panel, X0, t..t + 1, None).unwrap();
    let cb = &model.crossbasis;
    let p = cb.n_coef();
    let reference = cb.row_for_lags(&[X0; 9]).unwrap();
    for (j, a) in single.areas.iter().enumerate() {
        let r = j * panel.n_times() + t;
        let w = DVector::from_fn(p, |q, _| cb.w[(r, q)] - reference[q]);
        let z = panel.modifier[j];
        let theta = post.theta_hat.rows(0, p) + post.theta_hat.rows(p, p) * z;
        let eta = w.dot(&theta);
        assert!((a.af - (1.0 - (-eta).exp())).abs() < 1e-10);
        assert_eq!(a.af > 0.0, eta > 0.0);
    }
}

#[test]
fn attributable_fraction_vanishes_at_reference_exposure() {
    let mut sim = simulated(4, 100, 8);
    for s in &mut sim.panel.exposure {
        for v in s[40..].iter_mut() {
            *v = X0;
        }
    }
    let (model, f) = fitted(&sim, Modifier::Linear);
    let post = Posterior::new(&model, &f, 200, 1).unwrap();
    let af = post.attributable_fraction(&sim.panel, X0, 60..100, None).unwrap();
    for a in &af.areas {
        assert!(a.af.abs() < 1e-12 && a.lo.abs() < 1e-12 && a.hi.abs() < 1e-12, "{a:?}");
    }
}
