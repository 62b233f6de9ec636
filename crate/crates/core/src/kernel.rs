//! Per-covariate phylogenetic kernels, the covariate correlation Σ^r and the
//! prior-precision algebra of the stacked random effects.
//!
//! Random effects are stacked covariate-major (species fastest), so the prior
//! covariance has blocks `Σ[k,l] = L_k L_lᵀ Σ^r_kl` with `L_k` a Cholesky
//! factor of `Σ_k = σ_k² (ρ_k C + (1 - ρ_k) I)`. With sparse factors the
//! precision is `Σ^{-1}[k,l] = [Σ^r]^{-1}_kl U_kᵀ U_l`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::phylo::PhyloCorrelation;
use crate::sparseprec::{
    build_factor_with_tangent, CovarianceKernel, FactorTangent, NeighborSets, SparseInvChol,
};

/// Per-covariate scale σ_k and phylogenetic signal ρ_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    pub shared_signal: bool,
}

impl SignalParams {
    pub fn new(sigma: Vec<f64>, rho: Vec<f64>, shared_signal: bool) -> Result<Self> {
        check_dim("signal parameters", sigma.len(), rho.len())?;
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("σ_k must be positive and finite".into()));
        }
        if rho.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidConfig("ρ_k must lie in [0, 1]".into()));
        }
        if shared_signal && rho.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidConfig("shared signal requires equal ρ_k".into()));
        }
        Ok(SignalParams {
            sigma,
            rho,
            shared_signal,
        })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Phylogenetic variance γ_k² = ρ_k σ_k².
    pub fn phylo_variance(&self, k: usize) -> f64 {
        self.rho[k] * self.sigma[k] * self.sigma[k]
    }

    /// Independent variance δ_k² = (1 - ρ_k) σ_k².
    pub fn independent_variance(&self, k: usize) -> f64 {
        (1.0 - self.rho[k]) * self.sigma[k] * self.sigma[k]
    }
}

/// Correlation between covariate effects of the same species.
///
/// Parameterized by the strictly-lower entries `z` of a unit-diagonal lower
/// triangular matrix whose rows are normalized to unit length; Σ^r is the
/// product of the normalized factor with its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateCorrelation {
    pub matrix: DMatrix<f64>,
    params: Vec<f64>,
    diagonal: bool,
}

impl CovariateCorrelation {
    pub fn n_params(p: usize) -> usize {
        p * p.saturating_sub(1) / 2
    }

    pub fn identity(p: usize) -> Self {
        CovariateCorrelation {
            matrix: DMatrix::identity(p, p),
            params: Vec::new(),
            diagonal: true,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn factor(p: usize, z: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let mut l = DMatrix::identity(p, p);
        let mut idx = 0;
        for k in 1..p {
            for j in 0..k {
                l[(k, j)] = z[idx];
                idx += 1;
            }
        }
        let norms: Vec<f64> = (0..p).map(|k| l.row(k).norm()).collect();
        for k in 0..p {
            let n = norms[k];
            l.row_mut(k).iter_mut().for_each(|x| *x /= n);
        }
        (l, norms)
    }

    pub fn from_params(p: usize, z: &[f64]) -> Result<Self> {
        check_dim("covariate correlation parameters", Self::n_params(p), z.len())?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariate correlation parameters".into()));
        }
        let (l, _) = Self::factor(p, z);
        let mut matrix = &l * l.transpose();
        for k in 0..p {
            matrix[(k, k)] = 1.0;
        }
        Ok(CovariateCorrelation {
            matrix,
            params: z.to_vec(),
            diagonal: false,
        })
    }

    /// Inverse of [`from_params`](Self::from_params) for a correlation matrix.
    pub fn from_matrix(matrix: &DMatrix<f64>) -> Result<Self> {
        let p = matrix.nrows();
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("covariate correlation".into()))?;
        let l = chol.l();
        let mut z = Vec::with_capacity(Self::n_params(p));
        for k in 1..p {
            for j in 0..k {
                z.push(l[(k, j)] / l[(k, k)]);
            }
        }
        Self::from_params(p, &z)
    }

    /// Chain rule: gradient with respect to `z` given `grad` = ∂f/∂Σ^r
    /// (entries treated as independent).
    pub fn pullback(&self, grad: &DMatrix<f64>) -> Vec<f64> {
        let p = self.dim();
        if self.diagonal {
            return Vec::new();
        }
        let (l, norms) = Self::factor(p, &self.params);
        let g_l = (grad + grad.transpose()) * &l;
        let mut out = Vec::with_capacity(self.params.len());
        for k in 1..p {
            let row = l.row(k);
            let g = g_l.row(k);
            let proj = g.dot(&row);
            for j in 0..k {
                out.push((g[j] - proj * row[j]) / norms[k]);
            }
        }
        out
    }
}

/// Correlation structure used inside the kernels: `C` itself, or with
/// `repulsion` the inverse of `C` rescaled to unit diagonal.
pub fn signal_base(corr: &PhyloCorrelation, repulsion: bool) -> Result<DMatrix<f64>> {
    if !repulsion {
        return Ok(corr.matrix.clone());
    }
    let inv = corr
        .matrix
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("phylogenetic correlation (repulsion)".into()))?
        .inverse();
    let m = inv.nrows();
    let s: Vec<f64> = (0..m).map(|j| inv[(j, j)].sqrt()).collect();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            inv[(i, j)] / (s[i] * s[j])
        }
    }))
}

/// `K(j,l) = σ² {ρ C*_jl + (1 - ρ) 1[j = l]}`.
#[derive(Debug, Clone, Copy)]
pub struct PagelKernel<'a> {
    pub base: &'a DMatrix<f64>,
    pub rho: f64,
    pub sigma: f64,
}

impl CovarianceKernel for PagelKernel<'_> {
    fn dim(&self) -> usize {
        self.base.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        let s2 = self.sigma * self.sigma;
        if i == j {
            s2 * (self.rho * self.base[(i, i)] + (1.0 - self.rho))
        } else {
            s2 * self.rho * self.base[(i, j)]
        }
    }
}

/// ∂K/∂ρ = σ² (C* - I).
struct PagelRhoTangent<'a> {
    base: &'a DMatrix<f64>,
    sigma: f64,
}

impl CovarianceKernel for PagelRhoTangent<'_> {
    fn dim(&self) -> usize {
        self.base.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        let d = if i == j { 1.0 } else { 0.0 };
        self.sigma * self.sigma * (self.base[(i, j)] - d)
    }
}

pub fn pagel_kernel(base: &DMatrix<f64>, rho: f64, sigma: f64) -> PagelKernel<'_> {
    PagelKernel { base, rho, sigma }
}

/// Sparse prior factors for every covariate plus the inverse of Σ^r.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub factors: Vec<SparseInvChol>,
    /// Derivatives of each factor's rows with respect to ρ_k.
    pub rho_tangents: Vec<FactorTangent>,
    pub sigma_r: DMatrix<f64>,
    pub sigma_r_inv: DMatrix<f64>,
    pub logdet_sigma_r: f64,
}

/// Builds `U_k` for every covariate on fixed conditioning sets.
pub fn build_prior(
    base: &DMatrix<f64>,
    sets: &NeighborSets,
    signal: &SignalParams,
    sigma_r: &CovariateCorrelation,
) -> Result<PriorFactor> {
    let p = signal.len();
    check_dim("covariate correlation", p, sigma_r.dim())?;
    check_dim("kernel dimension", sets.dim(), base.nrows())?;
    let built: Vec<(SparseInvChol, FactorTangent)> = (0..p)
        .into_par_iter()
        .map(|k| {
            let kern = pagel_kernel(base, signal.rho[k], signal.sigma[k]);
            let tan = PagelRhoTangent {
                base,
                sigma: signal.sigma[k],
            };
            build_factor_with_tangent(&kern, &tan, sets)
        })
        .collect::<Result<_>>()?;
    let (factors, rho_tangents) = built.into_iter().unzip();
    let chol = sigma_r
        .matrix
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariate correlation".into()))?;
    let logdet_sigma_r = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(PriorFactor {
        factors,
        rho_tangents,
        sigma_r: sigma_r.matrix.clone(),
        sigma_r_inv: chol.inverse(),
        logdet_sigma_r,
    })
}

impl PriorFactor {
    pub fn n_covariates(&self) -> usize {
        self.factors.len()
    }

    pub fn n_species(&self) -> usize {
        self.factors.first().map_or(0, SparseInvChol::dim)
    }

    /// log det Σ_prior = m log det Σ^r + Σ_k log det K̃_k.
    pub fn logdet(&self) -> f64 {
        self.n_species() as f64 * self.logdet_sigma_r
            + self.factors.iter().map(SparseInvChol::logdet_approx_cov).sum::<f64>()
    }

    fn check_means(&self, a: &DMatrix<f64>) -> Result<()> {
        check_dim("variational mean rows", self.n_covariates(), a.nrows())?;
        check_dim("variational mean columns", self.n_species(), a.ncols())
    }

    /// `W_k = U_k a_k` for every covariate (rows of `a` are covariates).
    pub fn whitened_means(&self, a: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        self.check_means(a)?;
        self.factors
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let row: Vec<f64> = a.row(k).iter().copied().collect();
                f.apply_u(&row)
            })
            .collect()
    }
}

/// `vec(aᵀ)ᵀ Σ_prior^{-1} vec(aᵀ) = Σ_kl [Σ^r]^{-1}_kl (U_k a_k)ᵀ (U_l a_l)`.
pub fn prior_quadform(prior: &PriorFactor, a: &DMatrix<f64>) -> Result<f64> {
    let w = prior.whitened_means(a)?;
    let p = prior.n_covariates();
    let mut total = 0.0;
    for k in 0..p {
        for l in 0..p {
            let s = prior.sigma_r_inv[(k, l)];
            if s != 0.0 {
                total += s * dot(&w[k], &w[l]);
            }
        }
    }
    Ok(total)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise traces `τ_kl = tr(U_l A^m U_kᵀ)` with `A^m = A^d A^dᵀ + diag(D)`.
///
/// `z[k] = U_k A^d` is returned alongside for reuse.
pub(crate) fn pair_traces(
    prior: &PriorFactor,
    ad: &DMatrix<f64>,
    dvec: &[f64],
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let p = prior.n_covariates();
    let z: Vec<DMatrix<f64>> = prior.factors.iter().map(|f| f.apply_u_mat(ad)).collect();
    let mut tau = DMatrix::zeros(p, p);
    for k in 0..p {
        for l in k..p {
            let mut t = z[k].dot(&z[l]);
            let (fk, fl) = (&prior.factors[k], &prior.factors[l]);
            for r in 0..fk.dim() {
                for ((c, uk), (_, ul)) in fk.row_entries(r).zip(fl.row_entries(r)) {
                    t += uk * ul * dvec[c];
                }
            }
            tau[(k, l)] = t;
            tau[(l, k)] = t;
        }
    }
    (tau, z)
}

/// `tr{Σ_prior^{-1} (A^r ⊗ A^m)} = Σ_kl [Σ^r]^{-1}_kl A^r_lk tr(U_l A^m U_kᵀ)`.
pub fn prior_trace(
    prior: &PriorFactor,
    ar: &DMatrix<f64>,
    ad: &DMatrix<f64>,
    dvec: &[f64],
) -> Result<f64> {
    let p = prior.n_covariates();
    let m = prior.n_species();
    check_dim("A^r dimension", p, ar.nrows())?;
    check_dim("A^d rows", m, ad.nrows())?;
    check_dim("D length", m, dvec.len())?;
    let (tau, _) = pair_traces(prior, ad, dvec);
    let mut total = 0.0;
    for k in 0..p {
        for l in 0..p {
            total += prior.sigma_r_inv[(k, l)] * ar[(l, k)] * tau[(k, l)];
        }
    }
    Ok(total)
}

/// Species association matrix between sites with covariate rows `x` and
/// `x2`: `Σ_kl x_k x2_l Σ^r_kl L(Σ_k) L(Σ_l)ᵀ` using exact dense factors.
pub fn species_associations(
    base: &DMatrix<f64>,
    signal: &SignalParams,
    sigma_r: &DMatrix<f64>,
    x: &[f64],
    x2: &[f64],
) -> Result<DMatrix<f64>> {
    let p = signal.len();
    check_dim("site covariates", p, x.len())?;
    check_dim("site covariates", p, x2.len())?;
    check_dim("covariate correlation", p, sigma_r.nrows())?;
    let m = base.nrows();
    let chols: Vec<DMatrix<f64>> = (0..p)
        .map(|k| {
            let kern = pagel_kernel(base, signal.rho[k], signal.sigma[k]);
            let dense = DMatrix::from_fn(m, m, |i, j| kern.entry(i, j));
            dense
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| Error::NotPositiveDefinite(format!("kernel of covariate {k}")))
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(m, m);
    for k in 0..p {
        if x[k] == 0.0 {
            continue;
        }
        for l in 0..p {
            let w = x[k] * x2[l] * sigma_r[(k, l)];
            if w != 0.0 {
                out += (&chols[k] * chols[l].transpose()) * w;
            }
        }
    }
    Ok(out)
}

/// Dense `Σ_kl c_kl U_kᵀ U_l` is never formed in the hot path; this helper is
/// used for reporting the approximate prior precision of one covariate.
pub fn covariate_precision(prior: &PriorFactor, k: usize) -> DMatrix<f64> {
    prior.factors[k].precision()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::{correlation_matrix, parse_newick, simulate_tree, Ordering};
    use nalgebra::DVector;
    use crate::sparseprec::{neighbor_sets, NeighborRule};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(k: &impl CovarianceKernel) -> DMatrix<f64> {
        let m = k.dim();
        DMatrix::from_fn(m, m, |i, j| k.entry(i, j))
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.kronecker(b)
    }

    /// Dense L(Σ^r ⊗ I)Lᵀ with block-diagonal exact Cholesky factors.
    fn dense_prior(base: &DMatrix<f64>, signal: &SignalParams, sr: &DMatrix<f64>) -> DMatrix<f64> {
        let m = base.nrows();
        let p = signal.len();
        let mut l = DMatrix::zeros(p * m, p * m);
        for k in 0..p {
            let kern = dense(&pagel_kernel(base, signal.rho[k], signal.sigma[k]));
            let lk = kern.cholesky().unwrap().l();
            l.view_mut((k * m, k * m), (m, m)).copy_from(&lk);
        }
        &l * kron(sr, &DMatrix::identity(m, m)) * l.transpose()
    }

    fn three_tip() -> PhyloCorrelation {
        correlation_matrix(&parse_newick("((A:1,B:1):1,C:2);").unwrap()).unwrap()
    }

    #[test]
    fn pagel_kernel_cases() {
        let c = three_tip().matrix;
        assert_eq!(dense(&pagel_kernel(&c, 0.0, 1.7)), DMatrix::identity(3, 3) * 1.7 * 1.7);
        assert_eq!(dense(&pagel_kernel(&c, 1.0, 1.0)), c);
        let k = pagel_kernel(&c, 0.5, 2f64.sqrt());
        assert!((k.entry(0, 1) - 0.5).abs() < 1e-15);
        assert!((k.entry(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn repulsion_base_is_unit_diagonal_inverse() {
        let c = correlation_matrix(&simulate_tree(6, 3).unwrap()).unwrap();
        let r = signal_base(&c, true).unwrap();
        let inv = c.matrix.clone().try_inverse().unwrap();
        for i in 0..6 {
            assert!((r[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..6 {
                let expect = inv[(i, j)] / (inv[(i, i)] * inv[(j, j)]).sqrt();
                assert!((r[(i, j)] - expect).abs() < 1e-10);
            }
        }
        let singular = PhyloCorrelation::from_matrix(
            DMatrix::from_element(2, 2, 1.0),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(signal_base(&singular, true).is_err());
    }

    #[test]
    fn prior_logdet_simple_cases() {
        let c = correlation_matrix(&simulate_tree(5, 1).unwrap()).unwrap();
        let sets = NeighborSets::full(&Ordering::identity(5));
        let sig = SignalParams::new(vec![0.7], vec![0.3], false).unwrap();
        let prior = build_prior(&c.matrix, &sets, &sig, &CovariateCorrelation::identity(1)).unwrap();
        let kd = dense(&pagel_kernel(&c.matrix, 0.3, 0.7));
        assert!((prior.logdet() - kd.determinant().ln()).abs() < 1e-10);

        let sig = SignalParams::new(vec![0.5, 2.0], vec![0.0, 0.0], false).unwrap();
        let sets = neighbor_sets(&c, &Ordering::identity(5), 2, NeighborRule::Nngp).unwrap();
        let prior = build_prior(&c.matrix, &sets, &sig, &CovariateCorrelation::identity(2)).unwrap();
        let expect = 5.0 * (0.25f64.ln() + 4f64.ln());
        assert!((prior.logdet() - expect).abs() < 1e-12);
    }

    #[test]
    fn quadform_and_trace_simple_cases() {
        let c = correlation_matrix(&simulate_tree(4, 1).unwrap()).unwrap();
        let sets = neighbor_sets(&c, &Ordering::identity(4), 1, NeighborRule::Nngp).unwrap();
        let sig = SignalParams::new(vec![1.0], vec![0.0], false).unwrap();
        let prior = build_prior(&c.matrix, &sets, &sig, &CovariateCorrelation::identity(1)).unwrap();
        let a = DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 0.25]);
        assert!((prior_quadform(&prior, &a).unwrap() - a.norm_squared()).abs() < 1e-14);
        assert_eq!(prior_quadform(&prior, &DMatrix::zeros(1, 4)).unwrap(), 0.0);

        let sig = SignalParams::new(vec![1.0; 3], vec![0.0; 3], false).unwrap();
        let prior = build_prior(&c.matrix, &sets, &sig, &CovariateCorrelation::identity(3)).unwrap();
        let t = prior_trace(&prior, &DMatrix::identity(3, 3), &DMatrix::zeros(4, 0), &[1.0; 4]).unwrap();
        assert!((t - 12.0).abs() < 1e-12);
        let t2 = prior_trace(&prior, &(DMatrix::identity(3, 3) * 2.5), &DMatrix::zeros(4, 0), &[1.0; 4]).unwrap();
        assert!((t2 - 2.5 * t).abs() < 1e-12);
    }

    #[test]
    fn prior_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 3;
        let c = correlation_matrix(&simulate_tree(m, 7).unwrap()).unwrap();
        let sig = SignalParams::new(vec![0.8, 1.3], vec![0.4, 0.9], false).unwrap();
        let sr = CovariateCorrelation::from_params(2, &[0.6]).unwrap();
        let prior = build_prior(&c.matrix, &NeighborSets::full(&Ordering::identity(m)), &sig, &sr).unwrap();
        let full = dense_prior(&c.matrix, &sig, &sr.matrix);
        let dl = full.determinant().ln();
        assert!((prior.logdet() - dl).abs() < 1e-8 * dl.abs().max(1.0));

        let a = DMatrix::from_fn(2, m, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_iterator(2 * m, a.transpose().iter().copied());
        let inv = full.clone().try_inverse().unwrap();
        let expect = (v.transpose() * &inv * &v)[(0, 0)];
        let got = prior_quadform(&prior, &a).unwrap();
        assert!((got - expect).abs() < 1e-8 * expect.abs());
    }

    #[test]
    fn species_associations_cases() {
        let c = correlation_matrix(&simulate_tree(3, 2).unwrap()).unwrap().matrix;
        let sig = SignalParams::new(vec![0.9, 1.4], vec![0.3, 0.7], false).unwrap();
        let sr = CovariateCorrelation::from_params(2, &[-0.4]).unwrap().matrix;
        let e1 = species_associations(&c, &sig, &sr, &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        let k1 = dense(&pagel_kernel(&c, 0.7, 1.4));
        assert!((e1 - k1).norm() < 1e-12);
        let z = species_associations(&c, &sig, &sr, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(z, DMatrix::zeros(3, 3));

        let (x, x2) = ([0.3, -1.2], [1.1, 0.4]);
        let got = species_associations(&c, &sig, &sr, &x, &x2).unwrap();
        let full = dense_prior(&c, &sig, &sr);
        let sel = |x: &[f64]| kron(&DMatrix::from_row_slice(1, 2, x), &DMatrix::identity(3, 3));
        let expect = sel(&x) * full * sel(&x2).transpose();
        assert!((got - expect).norm() < 1e-12);
    }

    #[test]
    fn off_diagonal_blocks_match_lu_split() {
        // Lower factor L_k Diag(diag L_k)^{-1} and upper Diag(diag L_k) L_lᵀ Σ^r_kl
        // multiply back to L_k L_lᵀ Σ^r_kl.
        let c = correlation_matrix(&simulate_tree(6, 5).unwrap()).unwrap().matrix;
        let sig = SignalParams::new(vec![0.6, 1.1, 0.9], vec![0.2, 0.5, 0.95], false).unwrap();
        let sr = CovariateCorrelation::from_params(3, &[0.3, -0.2, 0.5]).unwrap().matrix;
        let full = dense_prior(&c, &sig, &sr);
        let ls: Vec<DMatrix<f64>> = (0..3)
            .map(|k| dense(&pagel_kernel(&c, sig.rho[k], sig.sigma[k])).cholesky().unwrap().l())
            .collect();
        for k in 0..3 {
            for l in 0..3 {
                let dk = DMatrix::from_diagonal(&ls[k].diagonal());
                let lower = &ls[k] * dk.clone().try_inverse().unwrap();
                let upper = &dk * ls[l].transpose() * sr[(k, l)];
                let block = full.view((k * 6, l * 6), (6, 6)).clone_owned();
                assert!((lower * upper - &block).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_signal_reduces_to_kronecker() {
        let c = correlation_matrix(&simulate_tree(5, 9).unwrap()).unwrap().matrix;
        let sig = SignalParams::new(vec![0.5, 1.5, 1.0], vec![0.6; 3], true).unwrap();
        let sr = CovariateCorrelation::from_params(3, &[0.2, 0.7, -0.3]).unwrap().matrix;
        let full = dense_prior(&c, &sig, &sr);
        // Σ^r scaled by σ_k σ_l, Kronecker with the common correlation kernel.
        let cov_r = DMatrix::from_fn(3, 3, |k, l| sr[(k, l)] * sig.sigma[k] * sig.sigma[l]);
        let common = dense(&pagel_kernel(&c, 0.6, 1.0));
        let expect = kron(&cov_r, &common);
        assert!((full - expect).norm() < 1e-12);
    }

    #[test]
    fn kernels_are_positive_definite() {
        for seed in 0..5 {
            let c = correlation_matrix(&simulate_tree(50, seed).unwrap()).unwrap().matrix;
            for rho in [0.0, 0.3, 0.9, 0.999] {
                let k = dense(&pagel_kernel(&c, rho, 1.3));
                assert!(k.cholesky().is_some());
            }
            let k1 = dense(&pagel_kernel(&c, 1.0, 1.0));
            let eig = k1.symmetric_eigenvalues();
            let max = eig.max();
            assert!(eig.iter().all(|&e| e >= -1e-10 * max));
        }
    }

    #[test]
    fn correlation_pullback_matches_finite_difference() {
        let z = [0.3, -0.8, 1.2];
        let g = DMatrix::from_row_slice(3, 3, &[0.1, 0.5, -0.3, 0.2, 0.0, 0.7, -1.0, 0.4, 0.3]);
        let f = |z: &[f64]| CovariateCorrelation::from_params(3, z).unwrap().matrix.component_mul(&g).sum();
        let grad = CovariateCorrelation::from_params(3, &z).unwrap().pullback(&g);
        for i in 0..3 {
            let mut up = z;
            let mut dn = z;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-8, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn signal_params_validated() {
        assert!(SignalParams::new(vec![0.0], vec![0.5], false).is_err());
        assert!(SignalParams::new(vec![1.0], vec![1.5], false).is_err());
        assert!(SignalParams::new(vec![1.0, 1.0], vec![0.2, 0.3], true).is_err());
        let s = SignalParams::new(vec![2.0], vec![0.25], false).unwrap();
        assert!((s.phylo_variance(0) - 1.0).abs() < 1e-15);
        assert!((s.independent_variance(0) - 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn correlation_map_valid_and_round_trips(z in proptest::collection::vec(-4.0f64..4.0, 6)) {
            let s = CovariateCorrelation::from_params(4, &z).unwrap();
            for k in 0..4 {
                prop_assert!((s.matrix[(k, k)] - 1.0).abs() < 1e-12);
                for l in 0..4 {
                    prop_assert!((s.matrix[(k, l)] - s.matrix[(l, k)]).abs() < 1e-14);
                    if k != l {
                        prop_assert!(s.matrix[(k, l)].abs() < 1.0);
                    }
                }
            }
            prop_assert!(s.matrix.clone().cholesky().is_some());
            let back = CovariateCorrelation::from_matrix(&s.matrix).unwrap();
            prop_assert!((back.matrix - &s.matrix).norm() < 1e-10);
        }
    }
}
