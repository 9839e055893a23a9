use dlnm_lps::basis::{eval_basis, penalty_block, BasisSpec};
use dlnm_lps::crossbasis::{build_crossbasis, build_history};
use dlnm_lps::likelihood::{loglik_eta, Family};
use dlnm_lps::panel::quantile;
use dlnm_lps::simgen::{score, GridValues, ScoreGrid, TrueSurface};
use dlnm_lps::spatial::{precision, AdjacencyGraph, SpatialSpec};
use nalgebra::DVector;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bspline_partition_of_unity(n in 4usize..12, x in 0.0f64..1.0, lo in -5.0f64..5.0, width in 0.5f64..20.0) {
        let spec = BasisSpec::bspline_equispaced(lo, lo + width, n, 3, true).unwrap();
        let b = spec.eval_point(lo + x * width).unwrap();
        prop_assert!(b.iter().all(|v| *v >= -1e-14));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crossbasis_matches_triple_sum(
        t in 12usize..40,
        j in 1usize..4,
        lag in 1usize..6,
        vx in 3usize..6,
        vl in 3usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..j).map(|_| (0..t).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let bx = BasisSpec::bspline_equispaced(0.0, 10.0, vx, 2, false).unwrap();
        let bl = BasisSpec::bspline_equispaced(0.0, lag as f64, vl, 2, true).unwrap();
        let cb = build_crossbasis(&build_history(&x, lag).unwrap(), &bx, &bl).unwrap();
        let theta = DVector::from_fn(vx * vl, |_, _| rng.random_range(-1.0..1.0));
        let fitted = &cb.w * &theta;
        for a in 0..j {
            for tt in lag..t {
                let mut naive = 0.0;
                for l in 0..=lag {
                    let ex = bx.eval_point(x[a][tt - l]).unwrap();
                    let lg = bl.eval_point(l as f64).unwrap();
                    for i in 0..vx {
                        for k in 0..vl {
                            naive += ex[i] * lg[k] * theta[i * vl + k];
                        }
                    }
                }
                prop_assert!((fitted[a * t + tt] - naive).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn difference_penalty_is_positive_semidefinite(v in 3usize..12, order in 1usize..3, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = penalty_block(v, order, 1e-12).unwrap();
        let theta: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        prop_assert!(p.quadratic_form(&theta) >= -1e-12);
        // polynomials of degree below the order are unpenalized
        let line: Vec<f64> = (0..v).map(|i| if order == 1 { 2.0 } else { 1.0 + 0.5 * i as f64 }).collect();
        prop_assert!(p.quadratic_form(&line).abs() < 1e-9);
    }

    #[test]
    fn leroux_precision_is_symmetric_positive_definite(n in 2usize..30, rho in 0.0f64..0.999, tau in 0.01f64..100.0) {
        let g = precision(&SpatialSpec::leroux(AdjacencyGraph::lattice(n)), n, tau, Some(rho)).unwrap();
        prop_assert!((&g - g.transpose()).amax() == 0.0);
        prop_assert!(g.cholesky().is_some());
    }

    #[test]
    fn poisson_loglik_peaks_at_the_count(y in 0u32..500, shift in 0.01f64..3.0) {
        let y = y as f64;
        let at = |eta: f64| loglik_eta(&[y], &[eta], Family::Poisson, f64::INFINITY).unwrap();
        let best = (y.max(0.5)).ln();
        if y > 0.0 {
            prop_assert!(at(best) >= at(best + shift) && at(best) >= at(best - shift));
        } else {
            prop_assert!(at(best - shift) > at(best));
        }
    }

    #[test]
    fn negative_binomial_loglik_is_finite(y in 0u32..2000, eta in -5.0f64..10.0, log_phi in -3.0f64..12.0) {
        let v = loglik_eta(&[y as f64], &[eta], Family::NegativeBinomial, log_phi.exp()).unwrap();
        prop_assert!(v.is_finite() && v <= 1e-9);
    }

    #[test]
    fn true_surface_is_affine_in_z(x in 0.0f64..10.0, l in 0usize..9, z in -1.0f64..1.0, h in 0.01f64..1.0) {
        let s = TrueSurface::linear();
        let d2 = s.log_rr(x, l, z - h) - 2.0 * s.log_rr(x, l, z) + s.log_rr(x, l, z + h);
        prop_assert!(d2.abs() < 1e-14);
        prop_assert_eq!(s.log_rr(5.0, l, z), 0.0);
    }

    #[test]
    fn scores_are_bounded(seed in any::<u64>(), reps in 1usize..4, bias in -0.5f64..0.5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = ScoreGrid { xs: vec![0.0, 2.0, 4.0], max_lag: 2, n_areas: 2 };
        let nl = grid.n_lag_cells();
        let no = grid.n_overall_cells();
        let truth = GridValues::exact((0..nl).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..no).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut pairs = Vec::new();
        for _ in 0..reps {
            let noisy = |v: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { v.iter().map(|t| t + bias + rng.random_range(-0.1..0.1)).collect() };
            let lag = noisy(&truth.lag, &mut rng);
            let overall = noisy(&truth.overall, &mut rng);
            let est = GridValues {
                lag_lo: lag.iter().map(|v| v - 0.2).collect(),
                lag_hi: lag.iter().map(|v| v + 0.2).collect(),
                overall_lo: overall.iter().map(|v| v - 0.2).collect(),
                overall_hi: overall.iter().map(|v| v + 0.2).collect(),
                lag,
                overall,
            };
            pairs.push((est, truth.clone()));
        }
        let s = score(&pairs, &grid).unwrap();
        prop_assert!(s.rmse_lag >= 0.0 && s.rmse_overall >= 0.0);
        prop_assert!((0.0..=1.0).contains(&s.cov_lag) && (0.0..=1.0).contains(&s.cov_overall));
        prop_assert!(s.rmse_lag <= bias.abs() + 0.1 + 1e-12);
        pairs.reverse();
        let r = score(&pairs, &grid).unwrap();
        prop_assert!((r.rmse_lag - s.rmse_lag).abs() < 1e-12 && r.cov_overall == s.cov_overall);
    }

    #[test]
    fn quantiles_are_monotone(values in prop::collection::vec(-100.0f64..100.0, 1..50), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let (a, b) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(quantile(&values, a) <= quantile(&values, b));
    }
}

#[test]
fn lag_basis_matrix_has_unit_row_sums() {
    let spec = BasisSpec::bspline_equispaced(0.0, 8.0, 8, 3, true).unwrap();
    let m = eval_basis(&spec, &(0..=8).map(|l| l as f64).collect::<Vec<_>>()).unwrap();
    for r in m.row_iter() {
        assert!((r.sum() - 1.0).abs() < 1e-12);
    }
}
