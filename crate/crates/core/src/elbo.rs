//! Variational lower bound for the phylogenetic mixed model with a
//! matrix-normal variational family `q(B^ε) = MN(a, A^r, A^m)`, where
//! `A^m = A^d A^dᵀ + diag(D)` is low-rank plus diagonal.
//!
//! Effects are stacked covariate-major (species fastest): the prior over
//! `vec(B^εᵀ)` is `L(Σ^r ⊗ I)Lᵀ` and the variational covariance is
//! `A^r ⊗ A^m`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::family::{expected_loglik_parts, Family, Link};
use crate::kernel::{
    build_prior, dot, pair_traces, prior_quadform, prior_trace, CovariateCorrelation, PriorFactor,
    SignalParams,
};
use crate::sparseprec::NeighborSets;

/// Responses, covariates and optional species traits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub y: DMatrix<f64>,
    observed: Vec<bool>,
    pub x: DMatrix<f64>,
    pub traits: Option<DMatrix<f64>>,
    pub family: Family,
    pub link: Link,
    pub species: Vec<String>,
    pub covariates: Vec<String>,
}

impl ModelData {
    /// Cells holding NaN are treated as missing.
    pub fn new(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        traits: Option<DMatrix<f64>>,
        family: Family,
        link: Link,
    ) -> Result<Self> {
        let (n, m) = y.shape();
        check_dim("covariate rows", n, x.nrows())?;
        if let Some(t) = &traits {
            check_dim("trait rows", m, t.nrows())?;
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("non-finite trait value".into()));
            }
        }
        if !family.supports(link) {
            return Err(Error::InvalidConfig(format!("link {link} not available for {family}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate value".into()));
        }
        let mut observed = vec![false; n * m];
        for i in 0..n {
            for j in 0..m {
                let v = y[(i, j)];
                if v.is_nan() {
                    continue;
                }
                if !family.valid_response(v) {
                    return Err(Error::InvalidData(format!(
                        "response {v} at site {i}, species {j} is invalid for {family}"
                    )));
                }
                observed[i * m + j] = true;
            }
        }
        let p = x.ncols();
        Ok(ModelData {
            y,
            observed,
            x,
            traits,
            family,
            link,
            species: (0..m).map(|j| format!("sp{}", j + 1)).collect(),
            covariates: (0..p).map(|k| format!("x{}", k + 1)).collect(),
        })
    }

    pub fn with_labels(mut self, species: Vec<String>, covariates: Vec<String>) -> Result<Self> {
        check_dim("species labels", self.n_species(), species.len())?;
        check_dim("covariate labels", self.n_covariates(), covariates.len())?;
        self.species = species;
        self.covariates = covariates;
        Ok(self)
    }

    /// Replaces the observation mask (row-major, `true` = observed).
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        check_dim("mask length", self.observed.len(), mask.len())?;
        let m = self.n_species();
        for (idx, &obs) in mask.iter().enumerate() {
            if obs {
                let v = self.y[(idx / m, idx % m)];
                if !self.family.valid_response(v) {
                    return Err(Error::InvalidData(format!("observed response {v} is invalid")));
                }
            }
        }
        self.observed = mask;
        Ok(self)
    }

    pub fn n_sites(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_species(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_traits(&self) -> usize {
        self.traits.as_ref().map_or(0, |t| t.ncols())
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.n_species() + j]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Reorders species: column r of the result is species `perm[r]`.
    pub fn permute_species(&self, perm: &[usize]) -> Result<ModelData> {
        let m = self.n_species();
        check_dim("species permutation", m, perm.len())?;
        let n = self.n_sites();
        let y = DMatrix::from_fn(n, m, |i, r| self.y[(i, perm[r])]);
        let mut observed = vec![false; n * m];
        for i in 0..n {
            for r in 0..m {
                observed[i * m + r] = self.observed[i * m + perm[r]];
            }
        }
        let traits = self
            .traits
            .as_ref()
            .map(|t| DMatrix::from_fn(m, t.ncols(), |r, s| t[(perm[r], s)]));
        Ok(ModelData {
            y,
            observed,
            x: self.x.clone(),
            traits,
            family: self.family,
            link: self.link,
            species: perm.iter().map(|&j| self.species[j].clone()).collect(),
            covariates: self.covariates.clone(),
        })
    }
}

/// Community mean responses β^x and trait interactions B^tx (t×p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub beta: DVector<f64>,
    pub btx: DMatrix<f64>,
}

impl FixedEffects {
    pub fn zeros(p: usize, t: usize) -> Self {
        FixedEffects {
            beta: DVector::zeros(p),
            btx: DMatrix::zeros(t, p),
        }
    }

    /// Community-level coefficient of covariate k for species j
    /// (β^x_k + t_jᵀ B^tx_{·k}).
    pub fn community_mean(&self, traits: Option<&DMatrix<f64>>, k: usize, j: usize) -> f64 {
        let mut v = self.beta[k];
        if let Some(t) = traits {
            for s in 0..t.ncols() {
                v += t[(j, s)] * self.btx[(s, k)];
            }
        }
        v
    }
}

/// Variational parameters: means `a` (p×m), row covariance `A^r`, and the
/// species covariance factors `A^d` (m×d lower triangular) and `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub a: DMatrix<f64>,
    pub ar: DMatrix<f64>,
    pub ad: DMatrix<f64>,
    pub dvec: Vec<f64>,
}

impl VariationalState {
    pub fn rank(&self) -> usize {
        self.ad.ncols()
    }

    /// Diagonal of `A^m`.
    pub fn am_diag(&self) -> Vec<f64> {
        (0..self.ad.nrows())
            .map(|j| self.ad.row(j).norm_squared() + self.dvec[j])
            .collect()
    }

    pub fn am(&self) -> DMatrix<f64> {
        &self.ad * self.ad.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(&self.dvec))
    }

    /// `log det A^m = 2 Σ_{s<d} log A^d_ss + Σ_{j≥d} log D_j`.
    pub fn logdet_am(&self) -> f64 {
        let d = self.rank();
        let lead: f64 = (0..d).map(|s| self.ad[(s, s)].ln()).sum();
        2.0 * lead + self.dvec[d..].iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Covariance of effects (k, j) and (l, j') under q.
    pub fn covariance(&self, k: usize, j: usize, l: usize, j2: usize) -> f64 {
        let mut am = self.ad.row(j).dot(&self.ad.row(j2));
        if j == j2 {
            am += self.dvec[j];
        }
        self.ar[(k, l)] * am
    }

    pub fn validate(&self, p: usize, m: usize) -> Result<()> {
        check_dim("variational mean rows", p, self.a.nrows())?;
        check_dim("variational mean columns", m, self.a.ncols())?;
        check_dim("A^r dimension", p, self.ar.nrows())?;
        check_dim("A^d rows", m, self.ad.nrows())?;
        check_dim("D length", m, self.dvec.len())?;
        let d = self.rank();
        if d > m {
            return Err(Error::InvalidConfig(format!("rank {d} exceeds {m} species")));
        }
        for s in 0..d {
            if !(self.ad[(s, s)] > 0.0) {
                return Err(Error::InvalidData("A^d needs a positive diagonal".into()));
            }
            for j in 0..s {
                if self.ad[(j, s)] != 0.0 {
                    return Err(Error::InvalidData("A^d must be lower triangular".into()));
                }
            }
        }
        if self.dvec[..d].iter().any(|&x| x != 0.0) || self.dvec[d..].iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidData(
                "D must be zero on the first d entries and positive afterwards".into(),
            ));
        }
        Ok(())
    }
}

/// Mean and variance of the linear predictor at site i, species j.
pub fn predictor_moments(
    data: &ModelData,
    fixed: &FixedEffects,
    state: &VariationalState,
    i: usize,
    j: usize,
) -> Result<(f64, f64)> {
    if i >= data.n_sites() || j >= data.n_species() {
        return Err(Error::InvalidData(format!("cell ({i}, {j}) out of range")));
    }
    let x = data.x.row(i);
    let p = data.n_covariates();
    let mut mu = 0.0;
    for k in 0..p {
        mu += x[k] * (fixed.community_mean(data.traits.as_ref(), k, j) + state.a[(k, j)]);
    }
    let xt = x.transpose();
    let q = (x * &state.ar * &xt)[(0, 0)];
    let amjj = state.ad.row(j).norm_squared() + state.dvec[j];
    Ok((mu, (amjj * q).max(0.0)))
}

/// `KL(q ‖ prior)` through the prior-algebra routines.
pub fn kl_divergence(state: &VariationalState, prior: &PriorFactor) -> Result<f64> {
    let p = prior.n_covariates();
    let m = prior.n_species();
    state.validate(p, m)?;
    let trace = prior_trace(prior, &state.ar, &state.ad, &state.dvec)?;
    let quad = prior_quadform(prior, &state.a)?;
    let logdet_ar = logdet_spd(&state.ar, "A^r")?;
    let kl = 0.5
        * (trace + quad - (p * m) as f64 + prior.logdet()
            - m as f64 * logdet_ar
            - p as f64 * state.logdet_am());
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

fn logdet_spd(a: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// Expected log-likelihood summed over observed cells minus the KL term.
pub fn elbo(
    data: &ModelData,
    fixed: &FixedEffects,
    state: &VariationalState,
    prior: &PriorFactor,
) -> Result<f64> {
    state.validate(data.n_covariates(), data.n_species())?;
    let coef = coefficients(data, fixed, &state.a);
    let (ll, _) = data_term(data, &coef, &state.ar, &state.am_diag(), false);
    let value = ll - kl_divergence(state, prior)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("elbo".into()));
    }
    Ok(value)
}

/// Per-species coefficient matrix (p×m): β^x 1ᵀ + (T B^tx)ᵀ + a.
fn coefficients(data: &ModelData, fixed: &FixedEffects, a: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, m) = a.shape();
    let mut coef = a.clone();
    for k in 0..p {
        for j in 0..m {
            coef[(k, j)] += fixed.beta[k];
        }
    }
    if let Some(t) = &data.traits {
        coef += (t * &fixed.btx).transpose();
    }
    coef
}

struct DataGrad {
    g_mu: DMatrix<f64>,
    g_v: DMatrix<f64>,
}

/// Σ over observed cells of E_q[log f]; optionally the per-cell derivatives
/// with respect to the predictor mean and variance. Sites are processed in
/// parallel and summed in site order.
fn data_term(
    data: &ModelData,
    coef: &DMatrix<f64>,
    ar: &DMatrix<f64>,
    am_diag: &[f64],
    want_grad: bool,
) -> (f64, Option<DataGrad>) {
    let n = data.n_sites();
    let m = data.n_species();
    if n == 0 {
        let grad = want_grad.then(|| DataGrad {
            g_mu: DMatrix::zeros(0, m),
            g_v: DMatrix::zeros(0, m),
        });
        return (0.0, grad);
    }
    let eta = &data.x * coef;
    let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = data.x.row(i);
            let q = (x * ar * x.transpose())[(0, 0)].max(0.0);
            let mut total = 0.0;
            let mut gmu = if want_grad { vec![0.0; m] } else { Vec::new() };
            let mut gv = if want_grad { vec![0.0; m] } else { Vec::new() };
            for j in 0..m {
                if !data.is_observed(i, j) {
                    continue;
                }
                let v = am_diag[j] * q;
                let (val, dmu, dv) = expected_loglik_parts(data.family, data.link, data.y[(i, j)], eta[(i, j)], v);
                total += val;
                if want_grad {
                    gmu[j] = dmu;
                    gv[j] = dv;
                }
            }
            (total, gmu, gv)
        })
        .collect();
    let value = rows.iter().map(|r| r.0).sum();
    let grad = want_grad.then(|| DataGrad {
        g_mu: DMatrix::from_fn(n, m, |i, j| rows[i].1[j]),
        g_v: DMatrix::from_fn(n, m, |i, j| rows[i].2[j]),
    });
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArStructure {
    Unstructured,
    Diagonal,
}

impl ArStructure {
    pub fn name(self) -> &'static str {
        match self {
            ArStructure::Unstructured => "unstructured",
            ArStructure::Diagonal => "diagonal",
        }
    }
}

impl std::fmt::Display for ArStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ArStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unstructured" | "full" => Ok(ArStructure::Unstructured),
            "diagonal" | "diag" => Ok(ArStructure::Diagonal),
            _ => Err(Error::InvalidConfig(format!("unknown A^r structure '{s}'"))),
        }
    }
}

/// Dimensions and structural switches of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p: usize,
    pub m: usize,
    pub t: usize,
    pub d: usize,
    pub ar: ArStructure,
    pub shared_signal: bool,
    /// Estimate Σ^r; otherwise Σ^r = I.
    pub correlated_effects: bool,
}

/// Positions of each parameter block in the unconstrained vector θ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub spec: ModelSpec,
    pub beta: Range<usize>,
    pub btx: Range<usize>,
    pub log_sigma: Range<usize>,
    pub logit_rho: Range<usize>,
    pub corr: Range<usize>,
    pub a: Range<usize>,
    pub ar: Range<usize>,
    pub ad: Range<usize>,
    pub log_d: Range<usize>,
}

/// All model and variational quantities on their natural scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub fixed: FixedEffects,
    pub signal: SignalParams,
    pub sigma_r: CovariateCorrelation,
    pub state: VariationalState,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Entries (j, s) of A^d stored in θ: lower triangle of the first d columns.
fn ad_entries(m: usize, d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |s| (s..m).map(move |j| (j, s)))
}

fn ar_entries(p: usize, ar: ArStructure) -> Vec<(usize, usize)> {
    match ar {
        ArStructure::Diagonal => (0..p).map(|k| (k, k)).collect(),
        ArStructure::Unstructured => (0..p).flat_map(|k| (0..=k).map(move |l| (k, l))).collect(),
    }
}

impl ParamLayout {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let ModelSpec { p, m, t, d, .. } = spec;
        if d > m {
            return Err(Error::InvalidConfig(format!("rank {d} exceeds {m} species")));
        }
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let beta = take(p);
        let btx = take(t * p);
        let log_sigma = take(p);
        let logit_rho = take(if spec.shared_signal { p.min(1) } else { p });
        let corr = take(if spec.correlated_effects {
            CovariateCorrelation::n_params(p)
        } else {
            0
        });
        let a = take(p * m);
        let ar = take(ar_entries(p, spec.ar).len());
        let ad = take(ad_entries(m, d).count());
        let log_d = take(m - d);
        Ok(ParamLayout {
            spec,
            beta,
            btx,
            log_sigma,
            logit_rho,
            corr,
            a,
            ar,
            ad,
            log_d,
        })
    }

    pub fn len(&self) -> usize {
        self.log_d.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model (non-variational) parameters occupy the leading block.
    pub fn model_range(&self) -> Range<usize> {
        0..self.corr.end
    }

    pub fn names(&self) -> Vec<String> {
        let ModelSpec { p, m, t, d, .. } = self.spec;
        let mut names = Vec::with_capacity(self.len());
        names.extend((0..p).map(|k| format!("beta[{k}]")));
        for s in 0..t {
            for k in 0..p {
                names.push(format!("btx[{s},{k}]"));
            }
        }
        names.extend((0..p).map(|k| format!("log_sigma[{k}]")));
        names.extend(self.logit_rho.clone().map(|i| format!("logit_rho[{}]", i - self.logit_rho.start)));
        if self.spec.correlated_effects {
            for k in 1..p {
                for l in 0..k {
                    names.push(format!("sigma_r[{k},{l}]"));
                }
            }
        }
        for k in 0..p {
            for j in 0..m {
                names.push(format!("a[{k},{j}]"));
            }
        }
        for (k, l) in ar_entries(p, self.spec.ar) {
            names.push(format!("ar_chol[{k},{l}]"));
        }
        for (j, s) in ad_entries(m, d) {
            names.push(format!("ad[{j},{s}]"));
        }
        names.extend((d..m).map(|j| format!("log_d[{j}]")));
        names
    }

    fn rho_index(&self, k: usize) -> usize {
        if self.spec.shared_signal {
            self.logit_rho.start
        } else {
            self.logit_rho.start + k
        }
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<Params> {
        check_dim("parameter vector", self.len(), theta.len())?;
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(self.names()[i].clone()));
        }
        let ModelSpec { p, m, t, d, .. } = self.spec;
        let beta = DVector::from_column_slice(&theta[self.beta.clone()]);
        let btx = DMatrix::from_fn(t, p, |s, k| theta[self.btx.start + s * p + k]);
        let sigma: Vec<f64> = theta[self.log_sigma.clone()].iter().map(|x| x.exp()).collect();
        let rho: Vec<f64> = (0..p).map(|k| logistic(theta[self.rho_index(k)])).collect();
        let signal = SignalParams::new(sigma, rho, self.spec.shared_signal)?;
        let sigma_r = if self.spec.correlated_effects {
            CovariateCorrelation::from_params(p, &theta[self.corr.clone()])?
        } else {
            CovariateCorrelation::identity(p)
        };
        let a = DMatrix::from_fn(p, m, |k, j| theta[self.a.start + k * m + j]);
        let lr = self.ar_chol(theta);
        let ar = &lr * lr.transpose();
        let mut ad = DMatrix::zeros(m, d);
        for (idx, (j, s)) in ad_entries(m, d).enumerate() {
            let v = theta[self.ad.start + idx];
            ad[(j, s)] = if j == s { v.exp() } else { v };
        }
        let mut dvec = vec![0.0; m];
        for j in d..m {
            dvec[j] = theta[self.log_d.start + j - d].exp();
        }
        Ok(Params {
            fixed: FixedEffects { beta, btx },
            signal,
            sigma_r,
            state: VariationalState { a, ar, ad, dvec },
        })
    }

    /// Lower Cholesky factor of A^r (diagonal on log scale in θ).
    fn ar_chol(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = self.spec.p;
        let mut lr = DMatrix::zeros(p, p);
        for (idx, (k, l)) in ar_entries(p, self.spec.ar).into_iter().enumerate() {
            let v = theta[self.ar.start + idx];
            lr[(k, l)] = if k == l { v.exp() } else { v };
        }
        lr
    }

    pub fn pack(&self, params: &Params) -> Result<DVector<f64>> {
        let ModelSpec { p, m, t, d, .. } = self.spec;
        params.state.validate(p, m)?;
        check_dim("A^d columns", d, params.state.rank())?;
        check_dim("trait interactions", t, params.fixed.btx.nrows())?;
        let mut theta = DVector::zeros(self.len());
        for k in 0..p {
            theta[self.beta.start + k] = params.fixed.beta[k];
            theta[self.log_sigma.start + k] = params.signal.sigma[k].ln();
        }
        for s in 0..t {
            for k in 0..p {
                theta[self.btx.start + s * p + k] = params.fixed.btx[(s, k)];
            }
        }
        for i in self.logit_rho.clone() {
            let k = i - self.logit_rho.start;
            theta[i] = logit(params.signal.rho[k]);
        }
        if self.spec.correlated_effects {
            let sr = if params.sigma_r.is_diagonal() {
                CovariateCorrelation::from_matrix(&params.sigma_r.matrix)?
            } else {
                params.sigma_r.clone()
            };
            for (i, v) in sr.params().iter().enumerate() {
                theta[self.corr.start + i] = *v;
            }
        }
        for k in 0..p {
            for j in 0..m {
                theta[self.a.start + k * m + j] = params.state.a[(k, j)];
            }
        }
        let lr = match self.spec.ar {
            ArStructure::Diagonal => DMatrix::from_diagonal(&params.state.ar.diagonal().map(f64::sqrt)),
            ArStructure::Unstructured => params
                .state
                .ar
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("A^r".into()))?
                .l(),
        };
        for (idx, (k, l)) in ar_entries(p, self.spec.ar).into_iter().enumerate() {
            theta[self.ar.start + idx] = if k == l { lr[(k, l)].ln() } else { lr[(k, l)] };
        }
        for (idx, (j, s)) in ad_entries(m, d).enumerate() {
            let v = params.state.ad[(j, s)];
            theta[self.ad.start + idx] = if j == s { v.ln() } else { v };
        }
        for j in d..m {
            theta[self.log_d.start + j - d] = params.state.dvec[j].ln();
        }
        Ok(theta)
    }
}

/// Flat per-covariate copies of the sparse factors sharing one pattern.
struct FlatFactors {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Vec<f64>>,
    /// dU/dρ_k entries.
    dvals: Vec<Vec<f64>>,
}

impl FlatFactors {
    fn new(prior: &PriorFactor) -> Self {
        let first = &prior.factors[0];
        let m = first.dim();
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for r in 0..m {
            cols.push(first.order[r]);
            cols.extend_from_slice(&first.neighbors[r]);
            row_ptr.push(cols.len());
        }
        let mut vals = Vec::with_capacity(prior.factors.len());
        let mut dvals = Vec::with_capacity(prior.factors.len());
        for (f, tan) in prior.factors.iter().zip(&prior.rho_tangents) {
            let mut v = Vec::with_capacity(cols.len());
            let mut dv = Vec::with_capacity(cols.len());
            for r in 0..m {
                let fr = f.cond_var[r];
                let s = fr.sqrt().recip();
                let ds = -0.5 * s / fr * tan.cond_var[r];
                v.push(s);
                dv.push(ds);
                for (b, db) in f.weights[r].iter().zip(&tan.weights[r]) {
                    v.push(-s * b);
                    dv.push(-s * db - ds * b);
                }
            }
            vals.push(v);
            dvals.push(dv);
        }
        FlatFactors {
            row_ptr,
            cols,
            vals,
            dvals,
        }
    }

    fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn apply_t(&self, k: usize, w: &[f64], out: &mut [f64]) {
        for r in 0..self.rows() {
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[e]] += self.vals[k][e] * w[r];
            }
        }
    }

    fn apply_t_mat(&self, k: usize, w: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for r in 0..self.rows() {
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, u) = (self.cols[e], self.vals[k][e]);
                for s in 0..w.ncols() {
                    out[(c, s)] += u * w[(r, s)];
                }
            }
        }
    }
}

/// KL value and its partial derivatives. Log-determinant terms of A^r and
/// A^m are left to the caller (they are handled on the parameter scale).
struct KlGrad {
    a: DMatrix<f64>,
    ar: DMatrix<f64>,
    ad: DMatrix<f64>,
    dvec: Vec<f64>,
    log_sigma: Vec<f64>,
    rho: Vec<f64>,
    sigma_r: DMatrix<f64>,
}

fn kl_with_gradient(state: &VariationalState, prior: &PriorFactor, want_grad: bool) -> Result<(f64, Option<KlGrad>)> {
    let p = prior.n_covariates();
    let m = prior.n_species();
    let d = state.rank();
    let s = &prior.sigma_r_inv;
    let ar = &state.ar;
    let w = prior.whitened_means(&state.a)?;
    let (tau, z) = pair_traces(prior, &state.ad, &state.dvec);
    let mut trace = 0.0;
    let mut quad = 0.0;
    let mut ww = DMatrix::zeros(p, p);
    for k in 0..p {
        for l in 0..p {
            ww[(k, l)] = dot(&w[k], &w[l]);
            trace += s[(k, l)] * ar[(l, k)] * tau[(k, l)];
            quad += s[(k, l)] * ww[(k, l)];
        }
    }
    let logdet_ar = logdet_spd(ar, "A^r")?;
    let kl = 0.5
        * (trace + quad - (p * m) as f64 + prior.logdet()
            - m as f64 * logdet_ar
            - p as f64 * state.logdet_am());
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    if !want_grad {
        return Ok((kl, None));
    }

    let flat = FlatFactors::new(prior);
    let mw = s.component_mul(ar);
    // vw_k = Σ_l S_kl W_l, y_k = Σ_l M_kl Z_l (position-indexed)
    let vw: Vec<Vec<f64>> = (0..p)
        .map(|k| {
            let mut acc = vec![0.0; m];
            for l in 0..p {
                let c = s[(k, l)];
                if c != 0.0 {
                    acc.iter_mut().zip(&w[l]).for_each(|(a, b)| *a += c * b);
                }
            }
            acc
        })
        .collect();
    let y: Vec<DMatrix<f64>> = (0..p)
        .map(|k| {
            let mut acc = DMatrix::zeros(m, d);
            for l in 0..p {
                let c = mw[(k, l)];
                if c != 0.0 {
                    acc += &z[l] * c;
                }
            }
            acc
        })
        .collect();

    let mut g_a = DMatrix::zeros(p, m);
    let mut g_ad = DMatrix::zeros(m, d);
    for k in 0..p {
        let mut row = vec![0.0; m];
        flat.apply_t(k, &vw[k], &mut row);
        for j in 0..m {
            g_a[(k, j)] = row[j];
        }
        flat.apply_t_mat(k, &y[k], &mut g_ad);
    }
    let g_ar = DMatrix::from_fn(p, p, |l, k| 0.5 * s[(k, l)] * tau[(k, l)]);

    let nnz = flat.cols.len();
    let mut omega_diag = vec![0.0; m];
    let mut log_sigma = vec![0.0; p];
    let mut rho = vec![0.0; p];
    let mut mu_entries = vec![0.0; nnz];
    for k in 0..p {
        mu_entries.iter_mut().for_each(|x| *x = 0.0);
        for l in 0..p {
            let c = mw[(k, l)];
            if c != 0.0 {
                mu_entries.iter_mut().zip(&flat.vals[l]).for_each(|(a, b)| *a += c * b);
            }
        }
        let (mut g_sigma, mut g_rho) = (0.0, 0.0);
        for r in 0..m {
            for e in flat.row_ptr[r]..flat.row_ptr[r + 1] {
                let c = flat.cols[e];
                let u = flat.vals[k][e];
                omega_diag[c] += u * mu_entries[e];
                let mut g = mu_entries[e] * state.dvec[c] + vw[k][r] * state.a[(k, c)];
                for t in 0..d {
                    g += y[k][(r, t)] * state.ad[(c, t)];
                }
                g_sigma -= g * u;
                g_rho += g * flat.dvals[k][e];
            }
        }
        let tan = &prior.rho_tangents[k];
        let f = &prior.factors[k].cond_var;
        let dlogdet: f64 = tan.cond_var.iter().zip(f).map(|(df, f)| df / f).sum();
        log_sigma[k] = g_sigma + m as f64;
        rho[k] = g_rho + 0.5 * dlogdet;
    }
    let dvec = omega_diag.iter().map(|o| 0.5 * o).collect();

    let h = DMatrix::from_fn(p, p, |k, l| ar[(k, l)] * tau[(k, l)] + ww[(k, l)]);
    let sigma_r = (s * &h * s) * -0.5 + s * (0.5 * m as f64);

    Ok((
        kl,
        Some(KlGrad {
            a: g_a,
            ar: g_ar,
            ad: g_ad,
            dvec,
            log_sigma,
            rho,
            sigma_r,
        }),
    ))
}

/// The bound as a function of the unconstrained parameter vector, with
/// fixed conditioning sets and kernel base matrix.
pub struct Objective<'a> {
    pub data: &'a ModelData,
    pub base: &'a DMatrix<f64>,
    pub sets: &'a NeighborSets,
    pub layout: ParamLayout,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a ModelData, base: &'a DMatrix<f64>, sets: &'a NeighborSets, spec: ModelSpec) -> Result<Self> {
        check_dim("covariates", data.n_covariates(), spec.p)?;
        check_dim("species", data.n_species(), spec.m)?;
        check_dim("traits", data.n_traits(), spec.t)?;
        check_dim("kernel dimension", spec.m, base.nrows())?;
        check_dim("neighbour sets", spec.m, sets.dim())?;
        Ok(Objective {
            data,
            base,
            sets,
            layout: ParamLayout::new(spec)?,
        })
    }

    pub fn prior(&self, params: &Params) -> Result<PriorFactor> {
        build_prior(self.base, self.sets, &params.signal, &params.sigma_r)
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let params = self.layout.unpack(theta)?;
        let prior = self.prior(&params)?;
        let coef = coefficients(self.data, &params.fixed, &params.state.a);
        let (ll, _) = data_term(self.data, &coef, &params.state.ar, &params.state.am_diag(), false);
        let (kl, _) = kl_with_gradient(&params.state, &prior, false)?;
        let v = ll - kl;
        if !v.is_finite() {
            return Err(Error::NonFinite("elbo".into()));
        }
        Ok(v)
    }

    /// Bound and its exact gradient with respect to θ.
    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
        let lay = &self.layout;
        let ModelSpec { p, m, t, d, .. } = lay.spec;
        let params = lay.unpack(theta)?;
        let prior = self.prior(&params)?;
        let st = &params.state;
        let am_diag = st.am_diag();
        let coef = coefficients(self.data, &params.fixed, &st.a);
        let (ll, dg) = data_term(self.data, &coef, &st.ar, &am_diag, true);
        let dg = dg.expect("gradient requested");
        let (kl, kg) = kl_with_gradient(st, &prior, true)?;
        let kg = kg.expect("gradient requested");
        let value = ll - kl;

        let x = &self.data.x;
        // Data-term derivatives on natural scales.
        let r = x.transpose() * &dg.g_mu; // p×m
        let mut g_am = vec![0.0; m];
        let mut g_ar = DMatrix::zeros(p, p);
        for i in 0..self.data.n_sites() {
            let xi = x.row(i);
            let q = (xi * &st.ar * xi.transpose())[(0, 0)];
            let mut c = 0.0;
            for j in 0..m {
                let gv = dg.g_v[(i, j)];
                g_am[j] += gv * q;
                c += gv * am_diag[j];
            }
            if c != 0.0 {
                g_ar += xi.transpose() * xi * c;
            }
        }
        g_ar -= &kg.ar;

        let mut grad = DVector::zeros(lay.len());
        for k in 0..p {
            grad[lay.beta.start + k] = r.row(k).sum();
        }
        if let Some(tr) = &self.data.traits {
            let g_btx = tr.transpose() * r.transpose();
            for s in 0..t {
                for k in 0..p {
                    grad[lay.btx.start + s * p + k] = g_btx[(s, k)];
                }
            }
        }
        for k in 0..p {
            grad[lay.log_sigma.start + k] = -kg.log_sigma[k];
            let rho = params.signal.rho[k];
            grad[lay.rho_index(k)] += -kg.rho[k] * rho * (1.0 - rho);
        }
        if p > 0 && lay.spec.correlated_effects {
            let g = params.sigma_r.pullback(&(-&kg.sigma_r));
            for (i, v) in g.into_iter().enumerate() {
                grad[lay.corr.start + i] = v;
            }
        }
        for k in 0..p {
            for j in 0..m {
                grad[lay.a.start + k * m + j] = r[(k, j)] - kg.a[(k, j)];
            }
        }
        // A^r = L Lᵀ: ∂/∂L = (G + Gᵀ) L, plus the +½ m log det A^r term.
        let lr = lay.ar_chol(theta);
        let g_l = (&g_ar + g_ar.transpose()) * &lr;
        for (idx, (k, l)) in ar_entries(p, lay.spec.ar).into_iter().enumerate() {
            grad[lay.ar.start + idx] = if k == l {
                g_l[(k, k)] * lr[(k, k)] + m as f64
            } else {
                g_l[(k, l)]
            };
        }
        // A^m diagonal feeds A^d rows and D; KL adds Ω A^d and ½ Ω_jj.
        for (idx, (j, s)) in ad_entries(m, d).enumerate() {
            let v = st.ad[(j, s)];
            let g = 2.0 * g_am[j] * v - kg.ad[(j, s)];
            grad[lay.ad.start + idx] = if j == s { g * v + p as f64 } else { g };
        }
        for j in d..m {
            let g = g_am[j] - kg.dvec[j];
            grad[lay.log_d.start + j - d] = g * st.dvec[j] + 0.5 * p as f64;
        }

        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {}", lay.names()[i])));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("elbo".into()));
        }
        Ok((value, grad))
    }
}
