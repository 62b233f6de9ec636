//! Synthetic datasets from the generative model and signal-recovery
//! summaries for simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::ModelData;
use crate::error::{Error, Result};
use crate::family::{mean_response, Family, Link};
use crate::optim::{fit_with, FitConfig, PriorSetup};
use crate::phylo::{correlation_matrix, simulate_tree, PhyloTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimProtocol {
    pub n: usize,
    pub m: usize,
    /// Number of Uniform(-1, 1) covariates, excluding the intercept.
    pub p: usize,
    pub intercept: bool,
    pub family: Family,
    pub link: Option<Link>,
    /// True phylogenetic signal, shared by all covariates.
    pub rho: f64,
    pub wishart_scale: f64,
    /// Degrees of freedom; defaults to the effect dimension.
    pub wishart_df: Option<f64>,
    /// Community means; default zero.
    pub beta: Option<Vec<f64>>,
    pub seed: u64,
    pub replicates: usize,
}

impl Default for SimProtocol {
    fn default() -> Self {
        SimProtocol {
            n: 100,
            m: 100,
            p: 5,
            intercept: true,
            family: Family::Bernoulli,
            link: None,
            rho: 0.5,
            wishart_scale: 0.2,
            wishart_df: None,
            beta: None,
            seed: 1,
            replicates: 30,
        }
    }
}

impl SimProtocol {
    /// Number of columns of X (and of random effects per species).
    pub fn effect_dim(&self) -> usize {
        self.p + usize::from(self.intercept)
    }

    pub fn link(&self) -> Link {
        self.link.unwrap_or(self.family.default_link())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m < 2 || self.effect_dim() == 0 {
            return Err(Error::InvalidConfig(
                "simulation needs n >= 1, m >= 2 and at least one covariate".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("ρ = {} outside [0, 1]", self.rho)));
        }
        if !(self.wishart_scale > 0.0) {
            return Err(Error::InvalidConfig("Wishart scale must be positive".into()));
        }
        if !self.family.supports(self.link()) {
            return Err(Error::InvalidConfig(format!("link {} not available for {}", self.link(), self.family)));
        }
        if let Some(b) = &self.beta {
            if b.len() != self.effect_dim() {
                return Err(Error::Dimension {
                    what: "simulation community means",
                    expected: self.effect_dim(),
                    found: b.len(),
                });
            }
        }
        Ok(())
    }

    /// Seed of replicate `r`, independent of the other replicates.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r as u64);
        rng.next_u64()
    }
}

/// Bartlett draw from W(scale, df).
pub fn wishart_sample<R: Rng + ?Sized>(scale: &DMatrix<f64>, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(df >= p as f64) || !df.is_finite() {
        return Err(Error::InvalidConfig(format!("Wishart df {df} below dimension {p}")));
    }
    let ls = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Wishart scale".into()))?
        .l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = ls * a;
    let w = &la * la.transpose();
    Ok((&w + w.transpose()) * 0.5)
}

/// Generating values of one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: f64,
    pub sigma_r: DMatrix<f64>,
    /// Wishart draw σσᵀ ∘ Σ^r.
    pub effect_cov: DMatrix<f64>,
    /// Species deviations, covariates × species.
    pub effects: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: ModelData,
    pub tree: PhyloTree,
    pub truth: Truth,
}

const STREAM_TREE: u64 = 1;
const STREAM_X: u64 = 2;
const STREAM_COV: u64 = 3;
const STREAM_EFFECTS: u64 = 4;
const STREAM_RESPONSE: u64 = 5;

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// One dataset from the protocol with the given seed (tree, X, effect
/// covariance, effects and responses each use their own stream).
pub fn simulate_dataset(protocol: &SimProtocol, seed: u64) -> Result<SimDataset> {
    protocol.validate()?;
    let (n, m, q) = (protocol.n, protocol.m, protocol.effect_dim());
    let tree = simulate_tree(m, stream(seed, STREAM_TREE).next_u64())?;
    let corr = correlation_matrix(&tree)?;

    let mut rng = stream(seed, STREAM_X);
    let mut x = DMatrix::zeros(n, q);
    for i in 0..n {
        for k in 0..q {
            x[(i, k)] = if protocol.intercept && k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) };
        }
    }

    let mut rng = stream(seed, STREAM_COV);
    let df = protocol.wishart_df.unwrap_or(q as f64);
    let w = wishart_sample(&(DMatrix::identity(q, q) * protocol.wishart_scale), df, &mut rng)?;
    let sigma: Vec<f64> = (0..q).map(|k| w[(k, k)].sqrt()).collect();
    let sigma_r = DMatrix::from_fn(q, q, |k, l| if k == l { 1.0 } else { w[(k, l)] / (sigma[k] * sigma[l]) });

    // vec(B^εᵀ) ~ N(0, W ⊗ K) with K = ρC + (1-ρ)I: B^ε = L_K Z L_Wᵀ.
    let rho = protocol.rho;
    let k = &corr.matrix * rho + DMatrix::identity(m, m) * (1.0 - rho);
    let lk = k
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("simulation kernel".into()))?
        .l();
    let lw = w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Wishart draw".into()))?
        .l();
    let mut rng = stream(seed, STREAM_EFFECTS);
    let z = DMatrix::from_fn(m, q, |_, _| StandardNormal.sample(&mut rng));
    let b_eps = lk * z * lw.transpose(); // m×q
    let effects = b_eps.transpose();

    let beta = protocol.beta.clone().unwrap_or_else(|| vec![0.0; q]);
    let coef = DMatrix::from_fn(q, m, |k, j| beta[k] + effects[(k, j)]);
    let eta = &x * coef;
    let link = protocol.link();
    let mut rng = stream(seed, STREAM_RESPONSE);
    let mut y = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let mu = mean_response(link, eta[(i, j)]);
            y[(i, j)] = match protocol.family {
                Family::Bernoulli => {
                    let d = Bernoulli::new(mu.clamp(0.0, 1.0)).map_err(|e| Error::InvalidData(e.to_string()))?;
                    f64::from(d.sample(&mut rng))
                }
                Family::Poisson => {
                    if mu <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(mu).map_err(|e| Error::InvalidData(e.to_string()))?.sample(&mut rng)
                    }
                }
            };
        }
    }
    let covariates = (0..q)
        .map(|k| if protocol.intercept && k == 0 { "intercept".to_string() } else { format!("x{}", k + usize::from(!protocol.intercept)) })
        .collect();
    let data = ModelData::new(y, x, None, protocol.family, link)?.with_labels(tree.tip_labels(), covariates)?;
    Ok(SimDataset {
        data,
        tree,
        truth: Truth {
            beta,
            sigma,
            rho,
            sigma_r,
            effect_cov: w,
            effects,
        },
    })
}

/// A fitting condition within a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudyCondition {
    pub m: usize,
    pub nn: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub condition: StudyCondition,
    pub replicate: usize,
    pub seed: u64,
    pub rho_true: f64,
    /// Mean of the per-covariate estimates (all equal under a shared signal).
    pub rho_hat: f64,
    pub elbo: f64,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time_secs: f64,
}

/// Fits every condition on every replicate. Replicates run in parallel;
/// within a replicate, conditions sharing m reuse the same dataset.
/// Output is ordered by (condition, replicate).
pub fn run_study(protocol: &SimProtocol, conditions: &[StudyCondition], base: &FitConfig) -> Result<Vec<ReplicateOutcome>> {
    protocol.validate()?;
    let per_rep: Vec<Result<Vec<ReplicateOutcome>>> = (0..protocol.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = protocol.replicate_seed(r);
            let mut out = Vec::with_capacity(conditions.len());
            let mut cached: Option<(usize, SimDataset)> = None;
            for cond in conditions {
                if cached.as_ref().map(|c| c.0) != Some(cond.m) {
                    let proto = SimProtocol { m: cond.m, ..protocol.clone() };
                    cached = Some((cond.m, simulate_dataset(&proto, seed)?));
                }
                let sim = &cached.as_ref().expect("dataset cached").1;
                let config = FitConfig {
                    nn: cond.nn,
                    d: cond.d,
                    ..base.clone()
                };
                let setup = PriorSetup::new(&sim.tree, &config)?;
                let fit = fit_with(&sim.data, &setup, &config, None)?;
                let rho_hat = fit.rho.iter().sum::<f64>() / fit.rho.len() as f64;
                out.push(ReplicateOutcome {
                    condition: *cond,
                    replicate: r,
                    seed,
                    rho_true: protocol.rho,
                    rho_hat,
                    elbo: fit.elbo,
                    converged: fit.converged,
                    iterations: fit.iterations,
                    wall_time_secs: fit.wall_time_secs,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(protocol.replicates * conditions.len());
    for rep in per_rep {
        all.extend(rep?);
    }
    all.sort_by_key(|o| {
        let c = conditions.iter().position(|c| *c == o.condition).unwrap_or(usize::MAX);
        (c, o.replicate)
    });
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub replicates: usize,
    pub converged: usize,
    /// Median |ρ̂ - ρ|.
    pub mae: f64,
    pub median_rho_hat: f64,
    pub time_median: f64,
    pub time_p025: f64,
    pub time_p975: f64,
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn recovery_metrics(outcomes: &[ReplicateOutcome]) -> Result<RecoverySummary> {
    if outcomes.is_empty() {
        return Err(Error::InvalidData("no replicates to summarize".into()));
    }
    let err: Vec<f64> = outcomes.iter().map(|o| (o.rho_hat - o.rho_true).abs()).collect();
    let rho: Vec<f64> = outcomes.iter().map(|o| o.rho_hat).collect();
    let time: Vec<f64> = outcomes.iter().map(|o| o.wall_time_secs).collect();
    Ok(RecoverySummary {
        replicates: outcomes.len(),
        converged: outcomes.iter().filter(|o| o.converged).count(),
        mae: quantile(&err, 0.5),
        median_rho_hat: quantile(&rho, 0.5),
        time_median: quantile(&time, 0.5),
        time_p025: quantile(&time, 0.025),
        time_p975: quantile(&time, 0.975),
    })
}

/// Summaries per condition, in the order given.
pub fn summarize(outcomes: &[ReplicateOutcome], conditions: &[StudyCondition]) -> Result<Vec<(StudyCondition, RecoverySummary)>> {
    conditions
        .iter()
        .map(|c| {
            let group: Vec<ReplicateOutcome> = outcomes.iter().filter(|o| o.condition == *c).cloned().collect();
            Ok((*c, recovery_metrics(&group)?))
        })
        .collect()
}

/// Mean and standard error of each entry over draws (for tests and checks).
pub fn entrywise_moments(draws: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (r, c) = draws[0].shape();
    let n = draws.len() as f64;
    let mean = draws.iter().fold(DMatrix::zeros(r, c), |acc, d| acc + d) / n;
    let var = draws
        .iter()
        .fold(DMatrix::zeros(r, c), |acc, d| acc + (d - &mean).map(|x| x * x))
        / (n - 1.0);
    (mean, var.map(|v| (v / n).sqrt()))
}

/// Column-stacked effects vec(B^εᵀ) (covariate-major, species fastest).
pub fn stacked_effects(effects: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(effects.len(), effects.transpose().iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wishart_scalar_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, nu) = (0.7, 3.0);
        let draws: Vec<DMatrix<f64>> = (0..10_000)
            .map(|_| wishart_sample(&DMatrix::from_element(1, 1, s), nu, &mut rng).unwrap())
            .collect();
        let (mean, se) = entrywise_moments(&draws);
        assert!((mean[(0, 0)] - s * nu).abs() < 3.0 * se[(0, 0)]);
    }

    #[test]
    fn wishart_mean_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scale = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 0.5, -0.2, 0.1, -0.2, 0.8]);
        let df = 5.0;
        let draws: Vec<DMatrix<f64>> = (0..10_000).map(|_| wishart_sample(&scale, df, &mut rng).unwrap()).collect();
        let (mean, se) = entrywise_moments(&draws);
        for i in 0..3 {
            for j in 0..3 {
                assert!((mean[(i, j)] - df * scale[(i, j)]).abs() < 3.5 * se[(i, j)], "{i},{j}");
            }
        }
        assert!(wishart_sample(&scale, 2.0, &mut rng).is_err());
        let a = wishart_sample(&scale, df, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = wishart_sample(&scale, df, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn small_protocol() -> SimProtocol {
        SimProtocol {
            n: 20,
            m: 6,
            p: 2,
            replicates: 2,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_is_reproducible_and_valid() {
        let proto = small_protocol();
        let a = simulate_dataset(&proto, 5).unwrap();
        let b = simulate_dataset(&proto, 5).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
        assert!(a.data.y.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.data.x.column(0).iter().all(|&v| v == 1.0));
        assert!(a.data.x.columns(1, 2).iter().all(|&v| (-1.0..1.0).contains(&v)));
        // covariance split reassembles the draw
        let t = &a.truth;
        for k in 0..3 {
            assert_eq!(t.sigma_r[(k, k)], 1.0);
            for l in 0..3 {
                let back = t.sigma[k] * t.sigma[l] * t.sigma_r[(k, l)];
                assert!((back - t.effect_cov[(k, l)]).abs() < 1e-12);
            }
        }
        assert_ne!(proto.replicate_seed(0), proto.replicate_seed(1));
    }

    #[test]
    fn vanishing_effects_leave_fixed_part() {
        let proto = SimProtocol {
            n: 30,
            m: 4,
            p: 1,
            family: Family::Poisson,
            wishart_scale: 1e-8,
            beta: Some(vec![1.0, 0.5]),
            ..Default::default()
        };
        let sim = simulate_dataset(&proto, 3).unwrap();
        assert!(sim.truth.effects.amax() < 1e-2);
        // Same response stream with a different effect draw gives the same
        // counts once effects are negligible.
        let again = simulate_dataset(&SimProtocol { wishart_scale: 1e-10, ..proto }, 3).unwrap();
        assert_eq!(sim.data.y, again.data.y);
    }

    #[test]
    fn no_signal_gives_uncorrelated_species() {
        let proto = SimProtocol {
            n: 1,
            m: 3,
            p: 0,
            rho: 0.0,
            wishart_scale: 1.0,
            ..Default::default()
        };
        let draws: Vec<(f64, f64)> = (0..10_000)
            .map(|s| {
                let e = simulate_dataset(&proto, s).unwrap().truth.effects;
                (e[(0, 0)] / e.row(0).norm().max(1e-300), e[(0, 1)] / e.row(0).norm().max(1e-300))
            })
            .collect();
        let n = draws.len() as f64;
        let (ma, mb) = draws.iter().fold((0.0, 0.0), |acc, d| (acc.0 + d.0 / n, acc.1 + d.1 / n));
        let cov: f64 = draws.iter().map(|d| (d.0 - ma) * (d.1 - mb)).sum::<f64>() / n;
        let va: f64 = draws.iter().map(|d| (d.0 - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = draws.iter().map(|d| (d.1 - mb).powi(2)).sum::<f64>() / n;
        assert!((cov / (va * vb).sqrt()).abs() < 0.1);
    }

    #[test]
    fn empirical_effect_covariance_matches_prior() {
        // Fixed covariance draw, many effect draws: compare with W ⊗ K.
        let proto = SimProtocol {
            n: 1,
            m: 4,
            p: 1,
            rho: 0.6,
            wishart_scale: 1.0,
            ..Default::default()
        };
        let first = simulate_dataset(&proto, 0).unwrap();
        let tree = first.tree.clone();
        let w = first.truth.effect_cov.clone();
        let corr = correlation_matrix(&tree).unwrap();
        let k = &corr.matrix * 0.6 + DMatrix::identity(4, 4) * 0.4;
        let want = w.kronecker(&k);
        let lk = k.clone().cholesky().unwrap().l();
        let lw = w.clone().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dim = want.nrows();
        let mut acc = DMatrix::zeros(dim, dim);
        let draws = 100_000;
        for _ in 0..draws {
            let z = DMatrix::from_fn(4, 2, |_, _| StandardNormal.sample(&mut rng));
            let v = stacked_effects(&(&lk * z * lw.transpose()).transpose());
            acc += &v * v.transpose();
        }
        acc /= draws as f64;
        for i in 0..dim {
            for j in 0..dim {
                let scale = (want[(i, i)] * want[(j, j)]).sqrt();
                assert!((acc[(i, j)] - want[(i, j)]).abs() < 0.05 * scale, "{i},{j}");
            }
        }
    }

    fn outcome(rho_hat: f64, t: f64) -> ReplicateOutcome {
        ReplicateOutcome {
            condition: StudyCondition { m: 10, nn: 1, d: 1 },
            replicate: 0,
            seed: 0,
            rho_true: 0.5,
            rho_hat,
            elbo: 0.0,
            converged: true,
            iterations: 1,
            wall_time_secs: t,
        }
    }

    #[test]
    fn recovery_metric_cases() {
        let s = recovery_metrics(&[outcome(0.5, 1.0), outcome(0.5, 2.0)]).unwrap();
        assert_eq!(s.mae, 0.0);
        let s = recovery_metrics(&[outcome(0.0, 1.0), outcome(1.0, 2.0), outcome(0.0, 3.0)]).unwrap();
        assert_eq!(s.mae, 0.5);
        assert_eq!(s.time_median, 2.0);
        let s = recovery_metrics(&[outcome(0.4, 1.0), outcome(0.6, 1.0)]).unwrap();
        assert!((s.mae - 0.1).abs() < 1e-12);
        assert!(recovery_metrics(&[]).is_err());
        assert!((quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.025) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn tiny_study_runs() {
        let proto = SimProtocol {
            n: 15,
            m: 5,
            p: 1,
            replicates: 2,
            ..Default::default()
        };
        let conds = [StudyCondition { m: 5, nn: 1, d: 1 }, StudyCondition { m: 5, nn: 3, d: 0 }];
        let base = FitConfig {
            shared_signal: true,
            ..Default::default()
        };
        let out = run_study(&proto, &conds, &base).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].condition, conds[0]);
        assert_eq!(out[1].replicate, 1);
        let summary = summarize(&out, &conds).unwrap();
        assert_eq!(summary.len(), 2);
    }
}
