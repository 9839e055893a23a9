//! Laplace approximation: conditional posterior mode of `ξ`, hyperparameter
//! posterior mode and the deviance information criterion.
//!
//! The Gamma auxiliaries `δ` of the smoothing and precision priors are
//! integrated out analytically, so each of `λ_k` and `τ` carries the marginal
//! prior `p(λ) ∝ λ^{ν/2−1} (b + νλ/2)^{−(a+ν/2)}`. The hyperparameters are
//! optimized on `(log λ, log τ, logit ρ, log φ)` with the matching Jacobians.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::ln_gamma;

use crate::basis::quad_form;
use crate::error::{Error, Result};
use crate::likelihood::{evaluate, loglik_at, Family, HessianKind};
use crate::linalg::{cholesky_with_jitter, frobenius_dot, logdet_chol};
use crate::model::{assemble_q, BlockLayout, Design, Model, PenaltyAssembly};
use crate::spatial::{structure_matrix, SpatialKind, SpatialSpec};

/// Shape `a` of the Gamma prior on the auxiliaries.
pub const PRIOR_A: f64 = 1e-5;
/// Rate `b` of the Gamma prior on the auxiliaries.
pub const PRIOR_B: f64 = 1e-5;
pub const PRIOR_NU: f64 = 3.0;

const LOG_LAMBDA_BOUNDS: (f64, f64) = (-15.0, 20.0);
const LOG_TAU_BOUNDS: (f64, f64) = (-15.0, 20.0);
const LOGIT_RHO_BOUNDS: (f64, f64) = (-12.0, 12.0);
const LOG_PHI_BOUNDS: (f64, f64) = (-5.0, 25.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    /// Trial points with `|η|` above this are backtracked (log-link families only).
    pub eta_bound: f64,
    pub hessian: HessianKind,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-8, rel_tol: 1e-10, eta_bound: 40.0, hessian: HessianKind::Expected }
    }
}

/// Conditional posterior mode of `ξ` and its Gaussian approximation.
#[derive(Debug, Clone)]
pub struct InnerMode {
    pub xi: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Cholesky factor of `HᵀΛH + Q` at the mode.
    pub chol: Cholesky<f64, Dyn>,
    pub loglik: f64,
    /// `loglik − ½ ξᵀQξ` at the mode.
    pub logpost: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl InnerMode {
    pub fn logdet_precision(&self) -> f64 {
        logdet_chol(&self.chol)
    }
}

fn initial_xi(design: &Design, family: Family) -> DVector<f64> {
    let n = design.n_xi();
    let mut xi = DVector::zeros(n);
    if family == Family::Gaussian || n == 0 {
        return xi;
    }
    let intercept = design
        .areas
        .iter()
        .all(|a| a.columns.iter().any(|&(x, b, c)| x == 0 && c == 1.0 && a.base.column(b).iter().all(|v| *v == 1.0)));
    if intercept {
        let (mut sy, mut se) = (0.0, 0.0);
        for a in &design.areas {
            sy += a.y.sum();
            se += a.offset.iter().map(|o| o.exp()).sum::<f64>();
        }
        if se > 0.0 && se.is_finite() {
            xi[0] = ((sy + 0.5) / se).ln();
        }
    }
    xi
}

fn trial_objective(design: &Design, q: &DMatrix<f64>, xi: &DVector<f64>, family: Family, phi: f64, bound: f64) -> Option<f64> {
    if family != Family::Gaussian {
        let too_big = design.eta(xi).iter().any(|e| e.iter().any(|v| !(v.abs() <= bound)));
        if too_big {
            return None;
        }
    }
    let ll = loglik_at(design, xi, family, phi).ok()?;
    let v = ll - 0.5 * quad_form(q, xi.as_slice());
    v.is_finite().then_some(v)
}

/// Newton iterations with step halving for the mode of `loglik(ξ) − ½ ξᵀQξ`.
pub fn inner_mode(
    design: &Design,
    q: &DMatrix<f64>,
    family: Family,
    phi: f64,
    start: Option<&DVector<f64>>,
    opts: &InnerOptions,
) -> Result<InnerMode> {
    let n = design.n_xi();
    if q.shape() != (n, n) {
        return Err(Error::Shape(format!("prior precision is {:?}, design has {n} coefficients", q.shape())));
    }
    let fresh = initial_xi(design, family);
    let mut xi = match start {
        Some(s) if s.len() == n && trial_objective(design, q, s, family, phi, opts.eta_bound).is_some() => s.clone(),
        _ => fresh,
    };
    let mut ev = evaluate(design, &xi, family, phi, opts.hessian)?;
    let mut obj = ev.loglik - 0.5 * quad_form(q, xi.as_slice());
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < opts.max_iter {
        let grad = &ev.gradient - q * &xi;
        grad_norm = grad.amax();
        if grad_norm < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let chol = cholesky_with_jitter(&ev.information + q, "negative Hessian of the conditional posterior")?;
        let step = chol.solve(&grad);
        let decrement = grad.dot(&step);
        // Predicted gain below objective resolution: the full step is final.
        if decrement < 1e-2 * opts.rel_tol * obj.abs().max(1.0) {
            let trial = &xi + &step;
            if trial_objective(design, q, &trial, family, phi, opts.eta_bound).is_some() {
                xi = trial;
                ev = evaluate(design, &xi, family, phi, opts.hessian)?;
                obj = ev.loglik - 0.5 * quad_form(q, xi.as_slice());
                grad_norm = (&ev.gradient - q * &xi).amax();
            }
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial = &xi + &step * t;
            if let Some(v) = trial_objective(design, q, &trial, family, phi, opts.eta_bound) {
                if v >= obj {
                    accepted = Some((trial, v));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, v)) => {
                let change = (v - obj).abs() / obj.abs().max(1.0);
                xi = trial;
                obj = v;
                ev = evaluate(design, &xi, family, phi, opts.hessian)?;
                if t == 1.0 && change < opts.rel_tol {
                    grad_norm = (&ev.gradient - q * &xi).amax();
                    converged = true;
                    break;
                }
            }
            None => {
                // No ascent is representable: the Newton decrement is at rounding level.
                if decrement <= 1e-9 * obj.abs().max(1.0) {
                    converged = true;
                    break;
                }
                return Err(Error::NoConvergence { iterations, grad_norm });
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations, grad_norm });
    }
    let chol = cholesky_with_jitter(&ev.information + q, "negative Hessian at the mode")?;
    let sigma = chol.inverse();
    Ok(InnerMode { xi, sigma, chol, loglik: ev.loglik, logpost: obj, iterations, grad_norm })
}

/// Hyperparameters at which the conditional posterior is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lambdas: Vec<f64>,
    /// Random-effect precision; absent without random effects.
    pub tau: Option<f64>,
    /// Leroux mixing parameter.
    pub rho: Option<f64>,
    /// Negative-binomial dispersion.
    pub phi: Option<f64>,
}

impl Hyperparams {
    /// Conditional modes of the auxiliaries `δ_λ` given `λ`.
    pub fn delta_lambda(&self) -> Vec<f64> {
        self.lambdas.iter().map(|&l| delta_mode(l)).collect()
    }

    pub fn delta_tau(&self) -> Option<f64> {
        self.tau.map(delta_mode)
    }
}

fn delta_mode(value: f64) -> f64 {
    ((PRIOR_A + PRIOR_NU / 2.0 - 1.0) / (PRIOR_B + PRIOR_NU * value / 2.0)).max(0.0)
}

/// `log p(λ) + log λ` for the δ-marginalized prior.
pub fn log_prior_precision_param(value: f64) -> f64 {
    let (a, b, nu) = (PRIOR_A, PRIOR_B, PRIOR_NU);
    a * b.ln() - ln_gamma(a) + 0.5 * nu * (0.5 * nu).ln() - ln_gamma(0.5 * nu) + ln_gamma(a + 0.5 * nu) + 0.5 * nu * value.ln()
        - (a + 0.5 * nu) * (b + 0.5 * nu * value).ln()
}

fn dlog_prior_precision_param(value: f64) -> f64 {
    let (a, b, nu) = (PRIOR_A, PRIOR_B, PRIOR_NU);
    0.5 * nu - (a + 0.5 * nu) * (0.5 * nu * value) / (b + 0.5 * nu * value)
}

/// `log p(ρ) + log ρ(1−ρ)` for the Beta(½, ½) prior on the logit scale.
pub fn log_prior_rho(rho: f64) -> f64 {
    -std::f64::consts::PI.ln() + 0.5 * rho.ln() + 0.5 * (1.0 - rho).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The pieces of a fit needed to evaluate the hyperparameter posterior.
#[derive(Debug, Clone, Copy)]
pub struct HyperProblem<'a> {
    pub design: &'a Design,
    pub penalty: &'a PenaltyAssembly,
    /// Random-effect prior; `None` when the layout has no random effects.
    pub spatial: Option<&'a SpatialSpec>,
    pub family: Family,
    pub zeta: f64,
    pub inner: InnerOptions,
}

impl<'a> HyperProblem<'a> {
    pub fn from_model(model: &'a Model) -> Self {
        let layout = model.layout();
        Self {
            design: &model.design,
            penalty: &model.penalty,
            spatial: (layout.u.1 > 0).then_some(&model.spec.spatial),
            family: model.spec.family,
            zeta: model.spec.unpenalized,
            inner: InnerOptions::default(),
        }
    }

    fn layout(&self) -> &BlockLayout {
        &self.design.layout
    }

    fn has_rho(&self) -> bool {
        self.spatial.is_some_and(|s| s.kind == SpatialKind::Leroux)
    }

    fn has_phi(&self) -> bool {
        self.family == Family::NegativeBinomial
    }

    pub fn n_hyper(&self) -> usize {
        self.penalty.n_lambda() + usize::from(self.spatial.is_some()) + usize::from(self.has_rho()) + usize::from(self.has_phi())
    }

    /// Names of the optimized coordinates, in order.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.penalty.lambda_names.iter().map(|n| format!("log_{n}")).collect();
        if self.spatial.is_some() {
            names.push("log_tau".into());
        }
        if self.has_rho() {
            names.push("logit_rho".into());
        }
        if self.has_phi() {
            names.push("log_phi".into());
        }
        names
    }

    pub fn default_hyper(&self) -> Hyperparams {
        Hyperparams {
            lambdas: vec![1.0; self.penalty.n_lambda()],
            tau: self.spatial.map(|_| 1.0),
            rho: self.has_rho().then_some(0.5),
            phi: self.has_phi().then_some(100.0),
        }
    }

    pub fn validate(&self, h: &Hyperparams) -> Result<()> {
        if h.lambdas.len() != self.penalty.n_lambda() {
            return Err(Error::Argument(format!(
                "{} smoothing parameters for {} penalty terms",
                h.lambdas.len(),
                self.penalty.n_lambda()
            )));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !h.lambdas.iter().all(|l| positive(*l)) {
            return Err(Error::Argument("smoothing parameters must be positive".into()));
        }
        if self.spatial.is_some() != h.tau.is_some() || !h.tau.is_none_or(positive) {
            return Err(Error::Argument("a positive tau is required exactly when random effects are present".into()));
        }
        if self.has_rho() != h.rho.is_some() || !h.rho.is_none_or(|r| r > 0.0 && r < 1.0) {
            return Err(Error::Argument("rho in (0, 1) is required exactly for the Leroux prior".into()));
        }
        if self.has_phi() != h.phi.is_some() || !h.phi.is_none_or(positive) {
            return Err(Error::Argument("a positive phi is required exactly for the negative-binomial family".into()));
        }
        Ok(())
    }

    pub fn to_coords(&self, h: &Hyperparams) -> Vec<f64> {
        let mut c: Vec<f64> = h.lambdas.iter().map(|l| l.ln()).collect();
        if let Some(t) = h.tau {
            c.push(t.ln());
        }
        if let Some(r) = h.rho {
            c.push((r / (1.0 - r)).ln());
        }
        if let Some(p) = h.phi {
            c.push(p.ln());
        }
        c
    }

    pub fn from_coords(&self, c: &[f64]) -> Hyperparams {
        let k = self.penalty.n_lambda();
        let mut i = k;
        let lambdas = c[..k].iter().map(|v| v.exp()).collect();
        let tau = self.spatial.map(|_| {
            i += 1;
            c[i - 1].exp()
        });
        let rho = self.has_rho().then(|| {
            i += 1;
            sigmoid(c[i - 1])
        });
        let phi = self.has_phi().then(|| {
            i += 1;
            c[i - 1].exp()
        });
        Hyperparams { lambdas, tau, rho, phi }
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![LOG_LAMBDA_BOUNDS; self.penalty.n_lambda()];
        if self.spatial.is_some() {
            b.push(LOG_TAU_BOUNDS);
        }
        if self.has_rho() {
            b.push(LOGIT_RHO_BOUNDS);
        }
        if self.has_phi() {
            b.push(LOG_PHI_BOUNDS);
        }
        b
    }

    fn log_prior(&self, h: &Hyperparams) -> f64 {
        let mut lp: f64 = h.lambdas.iter().map(|&l| log_prior_precision_param(l)).sum();
        if let Some(t) = h.tau {
            lp += log_prior_precision_param(t);
        }
        if let Some(r) = h.rho {
            lp += log_prior_rho(r);
        }
        lp
    }
}

/// Hyperparameter objective and the conditional fit behind it.
#[derive(Debug, Clone)]
pub struct HyperEval {
    pub hyper: Hyperparams,
    /// Laplace-approximated log marginal posterior of the transformed hyperparameters.
    pub objective: f64,
    /// Laplace approximation of `log p(y | hyperparameters)`.
    pub log_marginal: f64,
    pub log_prior: f64,
    pub mode: InnerMode,
    pub q: DMatrix<f64>,
    pub logdet_q: f64,
}

/// Evaluates the hyperparameter objective at `hyper`.
pub fn hyper_objective(problem: &HyperProblem, hyper: &Hyperparams, warm: Option<&DVector<f64>>) -> Result<HyperEval> {
    problem.validate(hyper)?;
    let layout = problem.layout();
    let random = problem.spatial.map(|s| (s, hyper.tau.unwrap(), hyper.rho));
    let pq = assemble_q(problem.penalty, &hyper.lambdas, random, layout, problem.zeta)?;
    let phi = hyper.phi.unwrap_or(f64::INFINITY);
    let mode = inner_mode(problem.design, &pq.q, problem.family, phi, warm, &problem.inner)?;
    let log_marginal = mode.logpost + 0.5 * pq.logdet - 0.5 * mode.logdet_precision();
    let log_prior = problem.log_prior(hyper);
    Ok(HyperEval {
        hyper: hyper.clone(),
        objective: log_marginal + log_prior,
        log_marginal,
        log_prior,
        mode,
        q: pq.q,
        logdet_q: pq.logdet,
    })
}

/// Diagonal blocks `(offset, block)` of a block-diagonal matrix.
type Blocks = Vec<(usize, DMatrix<f64>)>;

/// Derivative of `Q` in one transformed coordinate, as dense diagonal blocks.
fn q_derivatives(problem: &HyperProblem, h: &Hyperparams) -> Result<Vec<Blocks>> {
    let mut out = Vec::new();
    for (k, &lam) in h.lambdas.iter().enumerate() {
        let mut blocks = Vec::new();
        for b in &problem.penalty.blocks {
            if b.fixed.is_some() {
                continue;
            }
            let mut m = DMatrix::zeros(b.dim, b.dim);
            let mut any = false;
            for t in b.terms.iter().filter(|t| t.lambda == k) {
                m += &t.matrix * lam;
                any = true;
            }
            if any {
                blocks.push((b.offset, m));
            }
        }
        out.push(blocks);
    }
    if let Some(spatial) = problem.spatial {
        let layout = problem.layout();
        let n_u = layout.u.1;
        let tau = h.tau.unwrap();
        let g = crate::spatial::precision(spatial, n_u, tau, h.rho)?;
        out.push(vec![(layout.u.0, g)]);
        if let Some(rho) = h.rho {
            let r = structure_matrix(spatial.graph.as_ref().unwrap());
            let d = (r - DMatrix::identity(n_u, n_u)) * (tau * rho * (1.0 - rho));
            out.push(vec![(layout.u.0, d)]);
        }
    }
    Ok(out)
}

/// Analytic gradient of the objective in the transformed coordinates
/// (Poisson and Gaussian families).
fn analytic_gradient(problem: &HyperProblem, ev: &HyperEval) -> Result<Vec<f64>> {
    let h = &ev.hyper;
    let derivs = q_derivatives(problem, h)?;
    let xi = &ev.mode.xi;
    let sigma = &ev.mode.sigma;
    let design = problem.design;
    let lev = if problem.family == Family::Poisson { Some(design.leverages(sigma)) } else { None };
    let mu: Option<Vec<DVector<f64>>> = lev.as_ref().map(|_| design.eta(xi).into_iter().map(|e| e.map(f64::exp)).collect());

    // Blocks of Q whose inverse is needed, keyed by offset.
    let mut qinv_cache: Vec<(usize, usize, Cholesky<f64, Dyn>)> = Vec::new();
    let mut grad = Vec::with_capacity(derivs.len());
    for (k, blocks) in derivs.iter().enumerate() {
        let mut quad = 0.0;
        let mut tr_qinv = 0.0;
        let mut tr_sigma = 0.0;
        let mut qk_xi = DVector::zeros(xi.len());
        for (off, m) in blocks {
            let dim = m.nrows();
            let xb = xi.rows(*off, dim).into_owned();
            let mx = m * &xb;
            quad += xb.dot(&mx);
            qk_xi.rows_mut(*off, dim).copy_from(&mx);
            tr_sigma += frobenius_dot(&sigma.view((*off, *off), (dim, dim)).into_owned(), m);
            if qinv_cache.iter().all(|(o, _, _)| o != off) {
                let qb = ev.q.view((*off, *off), (dim, dim)).into_owned();
                qinv_cache.push((*off, dim, cholesky_with_jitter(qb, "prior precision block")?));
            }
            let chol = &qinv_cache.iter().find(|(o, _, _)| o == off).unwrap().2;
            tr_qinv += chol.solve(m).trace();
        }
        let mut third = 0.0;
        if let (Some(lev), Some(mu)) = (&lev, &mu) {
            let dxi = -(sigma * &qk_xi);
            let v = design.mul(&dxi);
            for ((va, la), ma) in v.iter().zip(lev).zip(mu) {
                for i in 0..va.len() {
                    third += ma[i] * va[i] * la[i];
                }
            }
        }
        let mut g = -0.5 * quad + 0.5 * tr_qinv - 0.5 * tr_sigma - 0.5 * third;
        let n_l = h.lambdas.len();
        g += if k < n_l {
            dlog_prior_precision_param(h.lambdas[k])
        } else if k == n_l {
            dlog_prior_precision_param(h.tau.unwrap())
        } else {
            0.5 - h.rho.unwrap()
        };
        grad.push(g);
    }
    Ok(grad)
}

fn fd_gradient(problem: &HyperProblem, center: &[f64], warm: &DVector<f64>, step: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; center.len()];
    for k in 0..center.len() {
        let mut a = center.to_vec();
        let mut b = center.to_vec();
        a[k] += step;
        b[k] -= step;
        let fa = hyper_objective(problem, &problem.from_coords(&a), Some(warm))?.objective;
        let fb = hyper_objective(problem, &problem.from_coords(&b), Some(warm))?.objective;
        g[k] = (fa - fb) / (2.0 * step);
    }
    Ok(g)
}

/// Objective gradient in the transformed coordinates.
pub fn hyper_gradient(problem: &HyperProblem, ev: &HyperEval, opts: &FitOptions) -> Result<Vec<f64>> {
    if opts.analytic_gradient && problem.family != Family::NegativeBinomial {
        analytic_gradient(problem, ev)
    } else {
        fd_gradient(problem, &problem.to_coords(&ev.hyper), &ev.mode.xi, opts.fd_step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub initial: Option<Hyperparams>,
    /// Outer quasi-Newton iteration budget.
    pub max_outer: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub fd_step: f64,
    /// Use the closed-form gradient where available (Poisson and Gaussian).
    pub analytic_gradient: bool,
    pub inner: InnerOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            initial: None,
            max_outer: 200,
            grad_tol: 1e-3,
            rel_tol: 1e-10,
            fd_step: 1e-3,
            analytic_gradient: true,
            inner: InnerOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub xi: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub hyper: Hyperparams,
    pub lambda_names: Vec<String>,
    pub dic: f64,
    pub p_d: f64,
    pub deviance: f64,
    pub loglik: f64,
    pub log_marginal: f64,
    pub objective: f64,
    pub converged: bool,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub evaluations: usize,
    /// Largest projected gradient component at the returned hyperparameters.
    pub hyper_grad_norm: f64,
}

/// DIC at the mode: `(DIC, p_D, D)` with `p_D = n_ξ − tr(QΣ̂)`.
pub fn compute_dic(mode: &InnerMode, q: &DMatrix<f64>) -> (f64, f64, f64) {
    let p_d = mode.xi.len() as f64 - frobenius_dot(q, &mode.sigma);
    let deviance = -2.0 * mode.loglik;
    (deviance + 2.0 * p_d, p_d, deviance)
}

fn finish(problem: &HyperProblem, ev: HyperEval, converged: bool, outer: usize, evaluations: usize, grad_norm: f64) -> FitResult {
    let (dic, p_d, deviance) = compute_dic(&ev.mode, &ev.q);
    FitResult {
        xi: ev.mode.xi.clone(),
        sigma: ev.mode.sigma.clone(),
        hyper: ev.hyper.clone(),
        lambda_names: problem.penalty.lambda_names.clone(),
        dic,
        p_d,
        deviance,
        loglik: ev.mode.loglik,
        log_marginal: ev.log_marginal,
        objective: ev.objective,
        converged,
        inner_iterations: ev.mode.iterations,
        outer_iterations: outer,
        evaluations,
        hyper_grad_norm: grad_norm,
    }
}

/// Conditional fit at fixed hyperparameters.
pub fn fit_fixed(problem: &HyperProblem, hyper: &Hyperparams) -> Result<FitResult> {
    let ev = hyper_objective(problem, hyper, None)?;
    Ok(finish(problem, ev, true, 0, 1, f64::NAN))
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Components of the ascent direction that would leave the box are zeroed.
fn projected(g: &[f64], x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    g.iter()
        .zip(x)
        .zip(bounds)
        .map(|((&gi, &xi), &(lo, hi))| if (xi <= lo && gi < 0.0) || (xi >= hi && gi > 0.0) { 0.0 } else { gi })
        .collect()
}

/// Maximizes the hyperparameter objective by projected BFGS.
pub fn hyper_optimize(problem: &HyperProblem, opts: &FitOptions) -> Result<FitResult> {
    let bounds = problem.bounds();
    let n = bounds.len();
    let initial = opts.initial.clone().unwrap_or_else(|| problem.default_hyper());
    problem.validate(&initial)?;
    let mut x = problem.to_coords(&initial);
    project(&mut x, &bounds);
    let mut evaluations = 1;
    let mut cur = hyper_objective(problem, &problem.from_coords(&x), None)?;
    if n == 0 {
        return Ok(finish(problem, cur, true, 0, evaluations, 0.0));
    }
    let mut g = hyper_gradient(problem, &cur, opts)?;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut converged = false;
    let mut iter = 0;
    let mut pg = projected(&g, &x, &bounds);
    while iter < opts.max_outer {
        let pg_norm = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pg_norm < opts.grad_tol {
            converged = true;
            break;
        }
        iter += 1;
        let pgv = DVector::from_vec(pg.clone());
        let mut d = &hinv * &pgv;
        for i in 0..n {
            if pg[i] == 0.0 {
                d[i] = 0.0;
            }
        }
        if d.dot(&pgv) <= 0.0 {
            hinv = DMatrix::identity(n, n);
            scaled = false;
            d = pgv.clone();
        }
        let longest = d.amax();
        if longest > 3.0 {
            d *= 3.0 / longest;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let mut trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            project(&mut trial, &bounds);
            let moved: f64 = trial.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
            evaluations += 1;
            if let Ok(ev) = hyper_objective(problem, &problem.from_coords(&trial), Some(&cur.mode.xi)) {
                if ev.objective >= cur.objective + 1e-4 * moved.max(0.0) {
                    next = Some((trial, ev));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, ev_new)) = next else {
            if scaled {
                hinv = DMatrix::identity(n, n);
                scaled = false;
                continue;
            }
            // Cannot improve along the gradient: stationary up to evaluation noise.
            converged = pg_norm < 1e3 * opts.grad_tol;
            break;
        };
        let change = (ev_new.objective - cur.objective).abs() / cur.objective.abs().max(1.0);
        let g_new = hyper_gradient(problem, &ev_new, opts)?;
        // BFGS update for the inverse Hessian of the negated objective.
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g.iter().zip(&g_new).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        x = x_new;
        cur = ev_new;
        g = g_new;
        pg = projected(&g, &x, &bounds);
        if change < opts.rel_tol {
            converged = true;
            break;
        }
    }
    let gn = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(finish(problem, cur, converged, iter, evaluations, gn))
}

/// Fits a model: hyperparameter mode, conditional mode, covariance and DIC.
pub fn fit(model: &Model, opts: &FitOptions) -> Result<FitResult> {
    let mut problem = HyperProblem::from_model(model);
    problem.inner = opts.inner;
    hyper_optimize(&problem, opts)
}
