//! Joint maximization of the bound over model and variational parameters
//! with limited-memory BFGS, plus initialization, profiled standard errors
//! and per-species effect tables.

use std::collections::VecDeque;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::elbo::{ArStructure, FixedEffects, ModelData, ModelSpec, Objective, ParamLayout, Params, VariationalState};
use crate::error::{Error, Result};
use crate::family::{log_norm_cdf, Family, Link};
use crate::kernel::{signal_base, CovariateCorrelation, SignalParams};
use crate::phylo::{correlation_matrix, ordering, OrderingMethod, PhyloCorrelation, PhyloTree};
use crate::sparseprec::{neighbor_sets, NeighborRule, NeighborSets};

/// Reported ρ is kept away from the boundary.
pub const RHO_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub nn: usize,
    pub rule: NeighborRule,
    pub ordering: OrderingMethod,
    /// Rank of the species-side variational covariance.
    pub d: usize,
    pub ar: ArStructure,
    pub shared_signal: bool,
    /// Estimate the correlation between covariate effects (otherwise Σ^r = I).
    pub correlated_effects: bool,
    /// Use the normalized inverse of C in the kernel.
    pub repulsion: bool,
    pub max_iter: usize,
    /// Gradient inf-norm tolerance, multiplied by the parameter count.
    pub gtol: f64,
    /// Relative objective change tolerance (three consecutive iterations).
    pub ftol: f64,
    pub memory: usize,
    pub seed: u64,
    pub standard_errors: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            nn: 10,
            rule: NeighborRule::Nngp,
            ordering: OrderingMethod::PhylogenyTips,
            d: 1,
            ar: ArStructure::Unstructured,
            shared_signal: false,
            correlated_effects: true,
            repulsion: false,
            max_iter: 2000,
            gtol: 1e-5,
            ftol: 1e-9,
            memory: 10,
            seed: 1,
            standard_errors: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.gtol > 0.0) || !(self.ftol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.d > m {
            return Err(Error::InvalidConfig(format!("rank d = {} exceeds {m} species", self.d)));
        }
        if m > 0 && self.nn > m - 1 {
            return Err(Error::InvalidConfig(format!(
                "nn = {} exceeds m - 1 = {}",
                self.nn,
                m - 1
            )));
        }
        if self.memory == 0 {
            return Err(Error::InvalidConfig("quasi-Newton memory must be at least 1".into()));
        }
        Ok(())
    }

    fn lbfgs(&self, n_params: usize) -> LbfgsOptions {
        LbfgsOptions {
            max_iter: self.max_iter,
            gtol: self.gtol * n_params.max(1) as f64,
            ftol: self.ftol,
            memory: self.memory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iter: 2000,
            gtol: 1e-5,
            ftol: 1e-9,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub theta: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub diagnostic: Option<String>,
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;
const FLAT_ITERS: usize = 3;

/// Maximizes `f` (returning value and gradient) from `x0`.
///
/// Failed evaluations during the line search are treated as insufficient
/// increase. Accepted values never decrease.
pub fn maximize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(x.as_slice())?;
    let mut evaluations = 1;
    let mut trace = vec![fx];
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut flat = 0;
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if g.amax() < opts.gtol {
            converged = true;
            break;
        }
        let mut dir = two_loop(&g, &hist);
        let mut slope = dir.dot(&g);
        if !(slope > 0.0) {
            hist.clear();
            dir = g.clone();
            slope = dir.dot(&g);
        }
        let mut step = if hist.is_empty() { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &x + &dir * step;
            evaluations += 1;
            if let Ok((ft, gt)) = f(trial.as_slice()) {
                if ft >= fx + ARMIJO * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fxn, gn)) = accepted else {
            if !hist.is_empty() {
                // Curvature pairs can go stale; retry along the gradient.
                hist.clear();
                continue;
            }
            diagnostic = Some(format!(
                "line search failed after {MAX_HALVINGS} halvings at iteration {iterations}"
            ));
            break;
        };
        iterations += 1;
        let s = &xn - &x;
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let rel = (fxn - fx).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fxn;
        g = gn;
        trace.push(fx);
        if iterations % 100 == 0 {
            debug!("iteration {iterations}: objective {fx:.6}, |g|inf {:.3e}", g.amax());
        }
        flat = if rel < opts.ftol { flat + 1 } else { 0 };
        if flat >= FLAT_ITERS {
            converged = true;
            break;
        }
    }
    if !converged && diagnostic.is_none() && iterations >= opts.max_iter {
        diagnostic = Some(format!("reached the iteration limit ({})", opts.max_iter));
    }
    Ok(LbfgsOutcome {
        theta: x,
        value: fx,
        gradient: g,
        iterations,
        evaluations,
        converged,
        trace,
        diagnostic,
    })
}

/// Two-loop recursion: approximate inverse (negative) Hessian times `g`.
fn two_loop(g: &DVector<f64>, hist: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alpha = vec![0.0; hist.len()];
    for (i, (s, y, rho)) in hist.iter().enumerate().rev() {
        alpha[i] = rho * s.dot(&q);
        q.axpy(-alpha[i], y, 1.0);
    }
    if let Some((s, y, _)) = hist.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for (i, (s, y, rho)) in hist.iter().enumerate() {
        let beta = rho * y.dot(&q);
        q.axpy(alpha[i] - beta, s, 1.0);
    }
    q
}

/// Community-level GLM on pooled responses (one coefficient vector for all
/// species), fitted by ridge-stabilized IRLS.
pub fn pooled_glm(data: &ModelData, ridge: f64) -> Result<DVector<f64>> {
    let (n, m, p) = (data.n_sites(), data.n_species(), data.n_covariates());
    // Sites share x_i across species, so aggregate to (count, total).
    let mut count = vec![0.0; n];
    let mut total = vec![0.0; n];
    for i in 0..n {
        for j in 0..m {
            if data.is_observed(i, j) {
                count[i] += 1.0;
                total[i] += data.y[(i, j)];
            }
        }
    }
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let mut xtwx = DMatrix::identity(p, p) * ridge;
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            if count[i] == 0.0 {
                continue;
            }
            let xi = data.x.row(i).transpose();
            let eta = xi.dot(&beta);
            let ybar = total[i] / count[i];
            let (w, z) = irls_terms(data.family, data.link, eta, ybar);
            let w = w * count[i];
            xtwx += &xi * xi.transpose() * w;
            xtwz += xi * (w * z);
        }
        let next = xtwx
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("pooled GLM normal equations".into()))?
            .solve(&xtwz);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pooled GLM coefficients".into()));
        }
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

/// IRLS weight and working response at predictor `eta` for mean response `ybar`.
fn irls_terms(family: Family, link: Link, eta: f64, ybar: f64) -> (f64, f64) {
    const EPS: f64 = 1e-10;
    match (family, link) {
        (Family::Poisson, _) => {
            let mu = eta.exp().max(EPS);
            (mu, eta + (ybar - mu) / mu)
        }
        (_, Link::Logit) => {
            let mu = (1.0 / (1.0 + (-eta).exp())).clamp(EPS, 1.0 - EPS);
            let v = mu * (1.0 - mu);
            (v, eta + (ybar - mu) / v)
        }
        _ => {
            let mu = log_norm_cdf(eta).exp().clamp(EPS, 1.0 - EPS);
            let dens = (-0.5 * eta * eta).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let dens = dens.max(EPS);
            (dens * dens / (mu * (1.0 - mu)), eta + (ybar - mu) / dens)
        }
    }
}

/// Starting point: pooled GLM for β^x, zero trait interactions and means,
/// σ_k = 0.3, ρ_k = 0.5, Σ^r = I, A^r = 0.1 I, A^d = 0.01 on its diagonal,
/// D = 0.1 beyond the first d entries.
pub fn initialize(data: &ModelData, layout: &ParamLayout) -> Result<(DVector<f64>, Vec<String>)> {
    let ModelSpec { p, m, t, d, .. } = layout.spec;
    let mut notes = Vec::new();
    let beta = match pooled_glm(data, 1e-4) {
        Ok(b) => b,
        Err(e) => {
            warn!("pooled GLM failed ({e}); starting fixed effects at zero");
            notes.push(format!("initial GLM failed: {e}"));
            DVector::zeros(p)
        }
    };
    let mut ad = DMatrix::zeros(m, d);
    for s in 0..d {
        ad[(s, s)] = 0.01;
    }
    let params = Params {
        fixed: FixedEffects { beta, btx: DMatrix::zeros(t, p) },
        signal: SignalParams::new(vec![0.3; p], vec![0.5; p], layout.spec.shared_signal)?,
        sigma_r: CovariateCorrelation::identity(p),
        state: VariationalState {
            a: DMatrix::zeros(p, m),
            ar: DMatrix::identity(p, p) * 0.1,
            ad,
            dvec: (0..m).map(|j| if j < d { 0.0 } else { 0.1 }).collect(),
        },
    };
    Ok((layout.pack(&params)?, notes))
}

/// Standard errors of the model parameters; σ and ρ on their natural scale
/// by the delta method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub beta: Vec<f64>,
    /// Row-major t×p.
    pub btx: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub sigma_r_params: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub elbo: f64,
    pub initial_elbo: f64,
    pub trace: Vec<f64>,
    pub wall_time_secs: f64,
    pub species: Vec<String>,
    pub covariates: Vec<String>,
    pub ordering: OrderingMethod,
    pub config: FitConfig,
    pub fixed: FixedEffects,
    pub sigma: Vec<f64>,
    /// Clipped to [1e-6, 1 - 1e-6].
    pub rho: Vec<f64>,
    pub sigma_r: DMatrix<f64>,
    pub state: VariationalState,
    pub standard_errors: Option<StandardErrors>,
    pub diagnostics: Vec<String>,
    /// Final unconstrained parameter vector.
    pub theta: Vec<f64>,
}

/// Everything the objective needs besides the data, derived from the tree.
#[derive(Debug, Clone)]
pub struct PriorSetup {
    pub corr: PhyloCorrelation,
    pub base: DMatrix<f64>,
    pub sets: NeighborSets,
}

impl PriorSetup {
    pub fn new(tree: &PhyloTree, config: &FitConfig) -> Result<Self> {
        let corr = correlation_matrix(tree)?;
        let ord = ordering(&corr, tree, config.ordering)?;
        let sets = neighbor_sets(&corr, &ord, config.nn, config.rule)?;
        let base = signal_base(&corr, config.repulsion)?;
        Ok(PriorSetup { corr, base, sets })
    }
}

pub fn model_spec(data: &ModelData, config: &FitConfig) -> ModelSpec {
    ModelSpec {
        p: data.n_covariates(),
        m: data.n_species(),
        t: data.n_traits(),
        d: config.d,
        ar: config.ar,
        shared_signal: config.shared_signal,
        correlated_effects: config.correlated_effects && data.n_covariates() > 1,
    }
}

/// Fits the model. Data columns must follow the tree's tip order.
pub fn fit(data: &ModelData, tree: &PhyloTree, config: &FitConfig) -> Result<FitResult> {
    let setup = PriorSetup::new(tree, config)?;
    fit_with(data, &setup, config, None)
}

/// Fits with a prepared prior, optionally from a given unconstrained start.
pub fn fit_with(data: &ModelData, setup: &PriorSetup, config: &FitConfig, start: Option<&[f64]>) -> Result<FitResult> {
    let started = Instant::now();
    let m = data.n_species();
    config.validate(m)?;
    if data.species != setup.corr.labels {
        let offenders = data
            .species
            .iter()
            .zip(&setup.corr.labels)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.clone())
            .collect();
        return Err(Error::SpeciesMismatch(offenders));
    }
    let obj = Objective::new(data, &setup.base, &setup.sets, model_spec(data, config))?;
    let (theta0, mut diagnostics) = match start {
        Some(s) => (DVector::from_column_slice(s), Vec::new()),
        None => initialize(data, &obj.layout)?,
    };
    let opts = config.lbfgs(obj.layout.len());
    let out = maximize(|th| obj.value_and_gradient(th), theta0, &opts)?;
    if let Some(d) = &out.diagnostic {
        diagnostics.push(d.clone());
    }
    let params = obj.layout.unpack(out.theta.as_slice())?;
    let standard_errors = if config.standard_errors {
        match standard_errors(&obj, out.theta.as_slice()) {
            Ok((se, note)) => {
                diagnostics.extend(note);
                Some(se)
            }
            Err(e) => {
                diagnostics.push(format!("standard errors unavailable: {e}"));
                None
            }
        }
    } else {
        None
    };
    let rho = params.signal.rho.iter().map(|r| r.clamp(RHO_CLIP, 1.0 - RHO_CLIP)).collect();
    Ok(FitResult {
        converged: out.converged,
        iterations: out.iterations,
        evaluations: out.evaluations,
        elbo: out.value,
        initial_elbo: out.trace[0],
        trace: out.trace,
        wall_time_secs: started.elapsed().as_secs_f64(),
        species: data.species.clone(),
        covariates: data.covariates.clone(),
        ordering: config.ordering,
        config: config.clone(),
        fixed: params.fixed,
        sigma: params.signal.sigma,
        rho,
        sigma_r: params.sigma_r.matrix,
        state: params.state,
        standard_errors,
        diagnostics,
        theta: out.theta.iter().copied().collect(),
    })
}

/// Central differences of the analytic gradient, symmetrized.
pub fn numerical_hessian(obj: &Objective, theta: &[f64]) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let mut h = DMatrix::zeros(n, n);
    let mut work = theta.to_vec();
    for i in 0..n {
        let step = 1e-5 * theta[i].abs().max(1.0);
        work[i] = theta[i] + step;
        let (_, gp) = obj.value_and_gradient(&work)?;
        work[i] = theta[i] - step;
        let (_, gm) = obj.value_and_gradient(&work)?;
        work[i] = theta[i];
        h.set_column(i, &((gp - gm) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Covariance of the `keep` coordinates after profiling out the rest:
/// inverse of `P_kk - P_kv P_vv⁺ P_vk` with `P` the negative Hessian.
/// The pseudo-inverse absorbs flat directions of the variational family.
fn profiled_covariance(neg_hess: &DMatrix<f64>, keep: &[usize]) -> Option<DMatrix<f64>> {
    let n = neg_hess.nrows();
    let rest: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| neg_hess[(rows[i], cols[j])]);
    let pkk = pick(keep, keep);
    let info = if rest.is_empty() {
        pkk
    } else {
        let pvv = pick(&rest, &rest);
        let pkv = pick(keep, &rest);
        let eig = SymmetricEigen::new(pvv);
        let top = eig.eigenvalues.amax();
        let inv_vals = eig
            .eigenvalues
            .map(|l| if l.abs() > 1e-10 * top { 1.0 / l } else { 0.0 });
        let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        pkk - &pkv * pinv * pkv.transpose()
    };
    let info = (&info + info.transpose()) * 0.5;
    let chol = info.cholesky()?;
    Some(chol.inverse())
}

/// Profiled-Hessian standard errors at a fitted point. Falls back to the
/// fixed effects alone when the full model block is not positive definite.
pub fn standard_errors(obj: &Objective, theta: &[f64]) -> Result<(StandardErrors, Option<String>)> {
    let lay = &obj.layout;
    let neg = -numerical_hessian(obj, theta)?;
    let params = lay.unpack(theta)?;
    let model: Vec<usize> = lay.model_range().collect();
    let fixed: Vec<usize> = (lay.beta.start..lay.btx.end).collect();
    let se_of = |cov: &DMatrix<f64>, offset: usize, range: std::ops::Range<usize>| -> Vec<f64> {
        range.map(|i| cov[(i - offset, i - offset)].max(0.0).sqrt()).collect()
    };
    if let Some(cov) = profiled_covariance(&neg, &model) {
        let p = lay.spec.p;
        let log_sigma = se_of(&cov, 0, lay.log_sigma.clone());
        let logit_rho = se_of(&cov, 0, lay.logit_rho.clone());
        let sigma = (0..p).map(|k| params.signal.sigma[k] * log_sigma[k]).collect();
        let rho = logit_rho
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let r = params.signal.rho[i];
                r * (1.0 - r) * s
            })
            .collect();
        return Ok((
            StandardErrors {
                beta: se_of(&cov, 0, lay.beta.clone()),
                btx: se_of(&cov, 0, lay.btx.clone()),
                sigma: Some(sigma),
                rho: Some(rho),
                sigma_r_params: Some(se_of(&cov, 0, lay.corr.clone())),
            },
            None,
        ));
    }
    let cov = profiled_covariance(&neg, &fixed)
        .ok_or_else(|| Error::NotPositiveDefinite("profiled information for fixed effects".into()))?;
    Ok((
        StandardErrors {
            beta: se_of(&cov, lay.beta.start, lay.beta.clone()),
            btx: se_of(&cov, lay.beta.start, lay.btx.clone()),
            sigma: None,
            rho: None,
            sigma_r_params: None,
        },
        Some("profiled information not positive definite; only fixed-effect standard errors reported".into()),
    ))
}

/// One row of the species-effect table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub species: String,
    pub covariate: String,
    /// Community mean plus species deviation.
    pub estimate: f64,
    pub deviation: f64,
    pub lower: f64,
    pub upper: f64,
    /// The 95% interval of the deviation contains zero.
    pub covers_zero: bool,
}

/// Per-species effects in data (tree tip) order with 95% intervals
/// `± 1.96 √(A^r_kk A^m_jj)`.
pub fn predict_effects(fit: &FitResult, traits: Option<&DMatrix<f64>>) -> Vec<EffectRow> {
    let st = &fit.state;
    let am = st.am_diag();
    let mut rows = Vec::with_capacity(fit.species.len() * fit.covariates.len());
    for (j, sp) in fit.species.iter().enumerate() {
        for (k, cov) in fit.covariates.iter().enumerate() {
            let dev = st.a[(k, j)];
            let half = 1.96 * (st.ar[(k, k)] * am[j]).max(0.0).sqrt();
            let est = fit.fixed.community_mean(traits, k, j) + dev;
            rows.push(EffectRow {
                species: sp.clone(),
                covariate: cov.clone(),
                estimate: est,
                deviation: dev,
                lower: est - half,
                upper: est + half,
                covers_zero: dev.abs() <= half,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::simulate_tree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_converges_exactly() {
        let target = DVector::from_vec(vec![1.5, -2.0, 0.25, 3.0]);
        let scales = DVector::from_vec(vec![1.0, 4.0, 0.5, 2.0]);
        let f = |x: &[f64]| -> Result<(f64, DVector<f64>)> {
            let x = DVector::from_column_slice(x);
            let diff = (&x - &target).component_mul(&scales);
            Ok((-diff.dot(&(&x - &target)), -2.0 * diff))
        };
        let opts = LbfgsOptions {
            gtol: 1e-10,
            ftol: 1e-300,
            ..Default::default()
        };
        let out = maximize(f, DVector::zeros(4), &opts).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 50, "{}", out.iterations);
        assert!((&out.theta - &target).amax() < 1e-8);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn stationary_start_takes_no_steps() {
        let f = |x: &[f64]| -> Result<(f64, DVector<f64>)> { Ok((-x[0] * x[0], DVector::from_vec(vec![-2.0 * x[0]]))) };
        let out = maximize(f, DVector::zeros(1), &LbfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn unbounded_objective_hits_iteration_limit() {
        let f = |x: &[f64]| -> Result<(f64, DVector<f64>)> { Ok((x[0], DVector::from_vec(vec![1.0]))) };
        let opts = LbfgsOptions {
            max_iter: 5,
            ..Default::default()
        };
        let out = maximize(f, DVector::zeros(1), &opts).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 5);
        assert!(out.diagnostic.is_some());
    }

    fn bernoulli_data(n: usize, m: usize, p: f64, seed: u64) -> ModelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y = DMatrix::from_fn(n, m, |_, _| f64::from(rng.random_bool(p)));
        let tree = simulate_tree(m, seed).unwrap();
        ModelData::new(y, x, None, Family::Bernoulli, Link::Probit)
            .unwrap()
            .with_labels(tree.tip_labels(), vec!["intercept".into(), "x".into()])
            .unwrap()
    }

    #[test]
    fn pooled_glm_balanced_data_gives_zero_intercept() {
        let x = DMatrix::from_element(40, 1, 1.0);
        let y = DMatrix::from_fn(40, 2, |i, j| ((i + j) % 2) as f64);
        let data = ModelData::new(y, x, None, Family::Bernoulli, Link::Probit).unwrap();
        let b = pooled_glm(&data, 1e-4).unwrap();
        assert!(b[0].abs() < 1e-8);
        // Poisson: intercept = log of the mean count.
        let y = DMatrix::from_fn(28, 3, |i, _| (i % 4) as f64);
        let data = ModelData::new(y, DMatrix::from_element(28, 1, 1.0), None, Family::Poisson, Link::Log).unwrap();
        let b = pooled_glm(&data, 1e-4).unwrap();
        assert!((b[0] - 1.5f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn initialization_defaults_and_determinism() {
        let data = bernoulli_data(30, 6, 0.5, 3);
        let spec = model_spec(&data, &FitConfig::default());
        let layout = ParamLayout::new(spec).unwrap();
        let (t1, _) = initialize(&data, &layout).unwrap();
        let (t2, _) = initialize(&data, &layout).unwrap();
        assert_eq!(t1, t2);
        let params = layout.unpack(t1.as_slice()).unwrap();
        assert!(params.signal.rho.iter().all(|&r| (r - 0.5).abs() < 1e-15));
        assert!(params.signal.sigma.iter().all(|&s| (s - 0.3).abs() < 1e-15));
        assert!((params.state.ar[(0, 0)] - 0.1).abs() < 1e-15);
        assert!((params.state.ad[(0, 0)] - 0.01).abs() < 1e-15);
        assert_eq!(params.state.dvec[0], 0.0);
        assert!((params.state.dvec[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn small_fit_is_monotone_and_refit_is_stable() {
        let data = bernoulli_data(40, 8, 0.4, 11);
        let tree = simulate_tree(8, 11).unwrap();
        let config = FitConfig {
            nn: 3,
            ..Default::default()
        };
        let fit1 = fit(&data, &tree, &config).unwrap();
        assert!(fit1.converged, "{:?}", fit1.diagnostics);
        assert!(fit1.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(fit1.elbo >= fit1.initial_elbo);
        assert!(fit1.rho.iter().all(|&r| r > 0.0 && r < 1.0));
        let setup = PriorSetup::new(&tree, &config).unwrap();
        let fit2 = fit_with(&data, &setup, &config, Some(&fit1.theta)).unwrap();
        assert!((fit2.elbo - fit1.elbo).abs() < 1e-6);
        let rows = predict_effects(&fit1, None);
        assert_eq!(rows.len(), 16);
    }

    #[test]
    fn effects_table_definitions() {
        let data = bernoulli_data(10, 3, 0.5, 1);
        let tree = simulate_tree(3, 1).unwrap();
        let config = FitConfig {
            nn: 1,
            max_iter: 0,
            ..Default::default()
        };
        let fit = fit(&data, &tree, &config).unwrap();
        let rows = predict_effects(&fit, None);
        let am = fit.state.am_diag();
        for (idx, row) in rows.iter().enumerate() {
            assert!(row.covers_zero);
            let (j, k) = (idx / 2, idx % 2);
            let width = 2.0 * 1.96 * (fit.state.ar[(k, k)] * am[j]).sqrt();
            assert!((row.upper - row.lower - width).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_species_rejected() {
        let data = bernoulli_data(10, 4, 0.5, 2);
        let data = data.clone().with_labels(vec!["a".into(), "b".into(), "c".into(), "d".into()], data.covariates.clone()).unwrap();
        let tree = simulate_tree(4, 2).unwrap();
        assert!(matches!(fit(&data, &tree, &FitConfig { nn: 2, ..Default::default() }), Err(Error::SpeciesMismatch(_))));
    }

    #[test]
    fn poisson_intercept_standard_error() {
        // Many sites, two species, no species deviations in the data.
        let (n, m) = (1500, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pois = rand_distr::Poisson::new(0.5f64.exp()).unwrap();
        use rand_distr::Distribution;
        let y = DMatrix::from_fn(n, m, |_, _| pois.sample(&mut rng));
        let tree = simulate_tree(m, 8).unwrap();
        let data = ModelData::new(y, DMatrix::from_element(n, 1, 1.0), None, Family::Poisson, Link::Log)
            .unwrap()
            .with_labels(tree.tip_labels(), vec!["intercept".into()])
            .unwrap();
        let config = FitConfig {
            nn: 1,
            standard_errors: true,
            ..Default::default()
        };
        let fit = fit(&data, &tree, &config).unwrap();
        let se = fit.standard_errors.as_ref().expect("standard errors").beta[0];
        let mu = fit.fixed.beta[0];
        let oracle = 1.0 / ((n * m) as f64 * mu.exp()).sqrt();
        assert!((se / oracle - 1.0).abs() < 0.2, "se {se} oracle {oracle}");
    }

    #[test]
    fn exchangeable_covariates_have_equal_standard_errors() {
        // Sites come in pairs with the two covariates swapped and equal
        // responses, so the bound is symmetric in the two slopes.
        let half = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<(f64, f64)> = (0..half).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let x = DMatrix::from_fn(2 * half, 3, |i, k| {
            let (u, v) = pairs[i / 2];
            let (u, v) = if i % 2 == 0 { (u, v) } else { (v, u) };
            [1.0, u, v][k]
        });
        let counts: Vec<f64> = (0..half * 3).map(|_| rng.random_range(0..3) as f64).collect();
        let y = DMatrix::from_fn(2 * half, 3, |i, j| counts[(i / 2) * 3 + j]);
        let tree = simulate_tree(3, 4).unwrap();
        let data = ModelData::new(y, x, None, Family::Poisson, Link::Log)
            .unwrap()
            .with_labels(tree.tip_labels(), vec!["i".into(), "a".into(), "b".into()])
            .unwrap();
        let config = FitConfig {
            nn: 2,
            correlated_effects: false,
            ar: ArStructure::Diagonal,
            standard_errors: true,
            ..Default::default()
        };
        let fit = fit(&data, &tree, &config).unwrap();
        let se = &fit.standard_errors.as_ref().unwrap().beta;
        assert!((se[1] - se[2]).abs() < 1e-2 * se[1], "{se:?}");
    }
}
