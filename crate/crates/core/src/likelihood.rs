//! Poisson and negative-binomial log-likelihoods with derivatives in `ξ` and `φ`.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::Design;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Poisson,
    NegativeBinomial,
    /// Unit-variance Gaussian with identity link; a quadratic test family.
    Gaussian,
}

/// Weight convention for the negative-binomial curvature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianKind {
    /// `μφ/(φ+μ)`, always positive.
    #[default]
    Expected,
    /// `μφ(φ+y)/(φ+μ)²`, the exact second derivative.
    Observed,
}

/// Counts at or below this use an exact sum for `log Γ(y+φ) − log Γ(φ)`.
const EXACT_SUM_LIMIT: f64 = 200.0;

/// Linear predictor and mean at one `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodState {
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub family: Family,
    /// Dispersion; ignored unless the family is negative binomial.
    pub phi: f64,
}

impl LikelihoodState {
    pub fn new(eta: Vec<f64>, family: Family, phi: f64) -> Result<Self> {
        if let Some(bad) = eta.iter().find(|e| !e.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite linear predictor {bad}")));
        }
        if family == Family::NegativeBinomial && !(phi > 0.0) {
            return Err(Error::Argument(format!("dispersion must be positive, got {phi}")));
        }
        let mu = match family {
            Family::Gaussian => eta.clone(),
            _ => eta.iter().map(|e| e.exp()).collect(),
        };
        Ok(Self { eta, mu, family, phi })
    }
}

fn ln_factorial(y: f64) -> f64 {
    ln_gamma(y + 1.0)
}

/// `log Γ(y+φ) − log Γ(φ) − y log(φ+μ)` computed without cancellation for small `y`.
fn nb_count_term(y: f64, mu: f64, phi: f64) -> f64 {
    let denom = phi + mu;
    if y <= EXACT_SUM_LIMIT {
        let mut s = 0.0;
        let mut k = 0.0;
        while k < y {
            s += ((k - mu) / denom).ln_1p();
            k += 1.0;
        }
        s
    } else {
        ln_gamma(y + phi) - ln_gamma(phi) - y * denom.ln()
    }
}

fn row_loglik(y: f64, eta: f64, family: Family, phi: f64) -> f64 {
    match family {
        Family::Poisson => y * eta - eta.exp() - ln_factorial(y),
        Family::NegativeBinomial => {
            let mu = eta.exp();
            y * eta + nb_count_term(y, mu, phi) - ln_factorial(y) - phi * (mu / phi).ln_1p()
        }
        Family::Gaussian => -0.5 * (y - eta) * (y - eta) - 0.5 * (2.0 * std::f64::consts::PI).ln(),
    }
}

/// Log-likelihood summed over rows.
pub fn loglik(y: &[f64], state: &LikelihoodState) -> Result<f64> {
    if y.len() != state.eta.len() {
        return Err(Error::Shape(format!("{} responses for {} predictors", y.len(), state.eta.len())));
    }
    Ok(y.iter().zip(&state.eta).map(|(&yi, &e)| row_loglik(yi, e, state.family, state.phi)).sum())
}

/// Log-likelihood from a linear predictor directly.
pub fn loglik_eta(y: &[f64], eta: &[f64], family: Family, phi: f64) -> Result<f64> {
    if let Some(bad) = eta.iter().find(|e| !e.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite linear predictor {bad}")));
    }
    if y.len() != eta.len() {
        return Err(Error::Shape(format!("{} responses for {} predictors", y.len(), eta.len())));
    }
    Ok(y.iter().zip(eta).map(|(&yi, &e)| row_loglik(yi, e, family, phi)).sum())
}

/// Derivative of the log-likelihood in `η` and the curvature weight, per row.
pub fn residual_weight(y: f64, eta: f64, family: Family, phi: f64, kind: HessianKind) -> (f64, f64) {
    match family {
        Family::Poisson => {
            let mu = eta.exp();
            (y - mu, mu)
        }
        Family::NegativeBinomial => {
            let mu = eta.exp();
            let d = phi + mu;
            let r = phi * (y - mu) / d;
            let w = match kind {
                HessianKind::Expected => mu * phi / d,
                HessianKind::Observed => mu * phi * (phi + y) / (d * d),
            };
            (r, w)
        }
        Family::Gaussian => (y - eta, 1.0),
    }
}

/// Log-likelihood, score `Hᵀr` and information `HᵀΛH` at `ξ`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub information: DMatrix<f64>,
}

pub fn evaluate(design: &Design, xi: &DVector<f64>, family: Family, phi: f64, kind: HessianKind) -> Result<Evaluation> {
    let eta = design.eta(xi);
    let mut ll = 0.0;
    let mut res = Vec::with_capacity(eta.len());
    let mut wts = Vec::with_capacity(eta.len());
    for (area, e) in design.areas.iter().zip(&eta) {
        if let Some(bad) = e.iter().find(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite linear predictor {bad} in area {}", area.area)));
        }
        let mut r = DVector::zeros(e.len());
        let mut w = DVector::zeros(e.len());
        for i in 0..e.len() {
            ll += row_loglik(area.y[i], e[i], family, phi);
            let (ri, wi) = residual_weight(area.y[i], e[i], family, phi, kind);
            r[i] = ri;
            w[i] = wi;
        }
        res.push(r);
        wts.push(w);
    }
    Ok(Evaluation { loglik: ll, gradient: design.transpose_mul(&res), information: design.weighted_crossprod(&wts) })
}

/// Gradient and Hessian (`−HᵀΛH`) of the log-likelihood in `ξ`.
pub fn grad_hess(
    design: &Design,
    xi: &DVector<f64>,
    family: Family,
    phi: f64,
    kind: HessianKind,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ev = evaluate(design, xi, family, phi, kind)?;
    Ok((ev.gradient, -ev.information))
}

/// Log-likelihood at `ξ` only.
pub fn loglik_at(design: &Design, xi: &DVector<f64>, family: Family, phi: f64) -> Result<f64> {
    let mut ll = 0.0;
    for (area, e) in design.areas.iter().zip(design.eta(xi)) {
        ll += loglik_eta(area.y.as_slice(), e.as_slice(), family, phi)?;
    }
    Ok(ll)
}

/// `∂ℓ/∂φ` of the negative-binomial log-likelihood.
pub fn dloglik_dphi(y: &[f64], mu: &[f64], phi: f64) -> Result<f64> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Argument(format!("dispersion must be positive and finite, got {phi}")));
    }
    if y.len() != mu.len() {
        return Err(Error::Shape(format!("{} responses for {} means", y.len(), mu.len())));
    }
    let mut total = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        let psi = if yi <= EXACT_SUM_LIMIT {
            let mut s = 0.0;
            let mut k = 0.0;
            while k < yi {
                s += 1.0 / (phi + k);
                k += 1.0;
            }
            s
        } else {
            digamma(yi + phi) - digamma(phi)
        };
        total += psi - (mi / phi).ln_1p() + (mi - yi) / (phi + mi);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Design;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poisson(y: &[f64], mu: &[f64]) -> f64 {
        let eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
        loglik(y, &LikelihoodState::new(eta, Family::Poisson, f64::INFINITY).unwrap()).unwrap()
    }

    #[test]
    fn poisson_closed_forms() {
        assert_abs_diff_eq!(poisson(&[0.0], &[1.0]), -1.0, epsilon = 1e-15);
        let expect = 2.0 * 2f64.ln() - 2.0 - 2f64.ln();
        assert_abs_diff_eq!(poisson(&[2.0], &[2.0]), expect, epsilon = 1e-14);
    }

    #[test]
    fn nb_matches_direct_pmf() {
        for &(y, mu, phi) in &[(0.0, 1.3, 2.0), (3.0, 0.7, 0.5), (250.0, 240.0, 7.0), (12.0, 9.0, 40.0)] {
            let direct = ln_gamma(y + phi) - ln_gamma(phi) - ln_gamma(y + 1.0)
                + phi * (phi / (phi + mu)).ln()
                + y * (mu / (phi + mu)).ln();
            let st = LikelihoodState::new(vec![f64::ln(mu)], Family::NegativeBinomial, phi).unwrap();
            assert_abs_diff_eq!(loglik(&[y], &st).unwrap(), direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn nb_approaches_poisson() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..200).map(|_| rng.random_range(0..40) as f64).collect();
        // means near the counts, as on a fitted panel
        let eta: Vec<f64> = y.iter().map(|v| (v + 0.5).ln() + rng.random_range(-0.2..0.2)).collect();
        let p = loglik_eta(&y, &eta, Family::Poisson, 0.0).unwrap();
        let nb = loglik_eta(&y, &eta, Family::NegativeBinomial, 1e8).unwrap();
        assert!((p - nb).abs() < 1e-4, "{p} vs {nb}");
    }

    #[test]
    fn non_finite_eta_is_an_evaluation_error() {
        assert!(matches!(LikelihoodState::new(vec![f64::NAN], Family::Poisson, 1.0), Err(Error::Evaluation(_))));
        assert!(matches!(loglik_eta(&[1.0], &[f64::INFINITY], Family::Poisson, 1.0), Err(Error::Evaluation(_))));
    }

    #[test]
    fn intercept_score_at_unit_mean() {
        let y = vec![0.0, 2.0, 1.0, 3.0];
        let h = DMatrix::from_element(4, 1, 1.0);
        let d = Design::from_dense(h, DVector::zeros(4), DVector::from_vec(y.clone()));
        let (g, _) = grad_hess(&d, &DVector::zeros(1), Family::Poisson, 0.0, HessianKind::Expected).unwrap();
        assert_abs_diff_eq!(g[0], y.iter().map(|v| v - 1.0).sum::<f64>(), epsilon = 1e-14);
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Design {
        let h = DMatrix::from_fn(n, p, |_, _| rng.random_range(-0.4..0.4));
        let off = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.5));
        let y = DVector::from_fn(n, |_, _| rng.random_range(0..12) as f64);
        Design::from_dense(h, off, y)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rng.random_range(2..=30);
            let d = random_design(&mut rng, 60, p);
            let xi = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
            for (family, phi) in [(Family::Poisson, 0.0), (Family::NegativeBinomial, 3.7)] {
                let (g, hm) = grad_hess(&d, &xi, family, phi, HessianKind::Observed).unwrap();
                let h = 1e-5;
                for k in 0..p {
                    let mut a = xi.clone();
                    let mut b = xi.clone();
                    a[k] += h;
                    b[k] -= h;
                    let fd = (loglik_at(&d, &a, family, phi).unwrap() - loglik_at(&d, &b, family, phi).unwrap()) / (2.0 * h);
                    assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "seed {seed} {family:?} grad {k}: {fd} vs {}", g[k]);
                    let (ga, _) = grad_hess(&d, &a, family, phi, HessianKind::Observed).unwrap();
                    let (gb, _) = grad_hess(&d, &b, family, phi, HessianKind::Observed).unwrap();
                    let col = (ga - gb) / (2.0 * h);
                    let scale = hm.column(k).amax().max(1.0);
                    assert!((col - hm.column(k)).amax() <= 1e-5 * scale, "seed {seed} {family:?} hessian column {k}");
                }
            }
        }
    }

    #[test]
    fn poisson_hessian_is_negative_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_design(&mut rng, 40, 8);
        for _ in 0..5 {
            let xi = DVector::from_fn(8, |_, _| rng.random_range(-2.0..2.0));
            let (_, h) = grad_hess(&d, &xi, Family::Poisson, 0.0, HessianKind::Expected).unwrap();
            assert!(h.symmetric_eigenvalues().iter().all(|e| *e <= 1e-10));
        }
    }

    #[test]
    fn dispersion_derivative() {
        let y = [0.0, 3.0, 7.0, 1.0, 250.0];
        let mu = [0.4, 2.5, 9.0, 1.1, 230.0];
        for &phi in &[0.5, 5.0, 50.0] {
            let ll = |p: f64| -> f64 {
                let eta: Vec<f64> = mu.iter().map(|m: &f64| m.ln()).collect();
                loglik_eta(&y, &eta, Family::NegativeBinomial, p).unwrap()
            };
            let h = 1e-4 * phi;
            let fd = (ll(phi + h) - ll(phi - h)) / (2.0 * h);
            let an = dloglik_dphi(&y, &mu, phi).unwrap();
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "phi {phi}: {fd} vs {an}");
        }
        let phi = 3.0;
        assert_abs_diff_eq!(
            dloglik_dphi(&[0.0], &[1.0], phi).unwrap(),
            (phi / (phi + 1.0)).ln() + 1.0 / (phi + 1.0),
            epsilon = 1e-14
        );
        assert!(dloglik_dphi(&[2.0, 5.0], &[2.0, 5.0], 1e9).unwrap().abs() < 1e-8);
        assert!(matches!(dloglik_dphi(&[1.0], &[1.0], 0.0), Err(Error::Argument(_))));
    }
}
