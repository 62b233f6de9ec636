//! Sparse approximate inverse Cholesky factors built from nearest-neighbour
//! or band conditioning sets.
//!
//! A factor `U` has one row per position `r` of an ordering π and one column
//! per species. Row `r` is `f_r^{-1/2} (e_{π(r)} - Σ_c b_rc e_{A_r[c]})`, so
//! `UᵀU` is the approximate precision in the original species indexing and
//! `(UᵀU)^{-1}` the implied approximate covariance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::phylo::{Ordering, PhyloCorrelation};

/// Upper bound on truncated conditioning sets. Full conditioning
/// (`nn = m - 1`) is always accepted.
pub const MAX_NEIGHBORS: usize = 64;

/// Rows whose conditional variance falls below this fraction of the
/// marginal variance are treated as singular.
const CONDITIONING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborRule {
    /// Most similar predecessors by phylogenetic correlation.
    Nngp,
    /// Immediately preceding positions.
    Band,
}

impl NeighborRule {
    pub fn name(self) -> &'static str {
        match self {
            NeighborRule::Nngp => "nngp",
            NeighborRule::Band => "band",
        }
    }
}

impl fmt::Display for NeighborRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeighborRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nngp" => Ok(NeighborRule::Nngp),
            "band" => Ok(NeighborRule::Band),
            _ => Err(Error::InvalidConfig(format!("unknown neighbour rule '{s}'"))),
        }
    }
}

/// Conditioning sets per position. `sets[r]` holds species indices, sorted by
/// their position in the ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub order: Vec<usize>,
    pub sets: Vec<Vec<usize>>,
    pub rule: NeighborRule,
    pub nn: usize,
}

impl NeighborSets {
    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Every position conditions on all predecessors.
    pub fn full(ordering: &Ordering) -> NeighborSets {
        let m = ordering.len();
        NeighborSets {
            order: ordering.perm.clone(),
            sets: (0..m).map(|r| ordering.perm[..r].to_vec()).collect(),
            rule: NeighborRule::Band,
            nn: m.saturating_sub(1),
        }
    }

    pub fn is_full(&self) -> bool {
        self.sets.iter().enumerate().all(|(r, s)| s.len() == r)
    }

    /// Total number of stored off-diagonal weights.
    pub fn nnz_offdiag(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

fn check_nn(nn: usize, m: usize) -> Result<()> {
    let full = m >= 1 && nn == m - 1;
    let valid = (nn >= 1 || m == 1) && nn < m.max(1) && (nn <= MAX_NEIGHBORS || full);
    if valid {
        Ok(())
    } else {
        Err(Error::NeighborCount { nn, m })
    }
}

/// Conditioning sets under `ordering`.
///
/// `Nngp` keeps the `nn` predecessors with the largest correlation to the
/// current species (ties go to the earlier position); `Band` keeps the `nn`
/// immediately preceding positions.
pub fn neighbor_sets(
    corr: &PhyloCorrelation,
    ordering: &Ordering,
    nn: usize,
    rule: NeighborRule,
) -> Result<NeighborSets> {
    let m = corr.dim();
    check_dim("ordering length", m, ordering.len())?;
    check_nn(nn, m)?;
    let c = &corr.matrix;
    match rule {
        NeighborRule::Nngp => Ok(select_by_score(ordering, nn, rule, |j, a| -c[(j, a)])),
        NeighborRule::Band => {
            let perm = &ordering.perm;
            let sets = (0..m).map(|r| perm[r.saturating_sub(nn)..r].to_vec()).collect();
            Ok(NeighborSets {
                order: perm.clone(),
                sets,
                rule,
                nn,
            })
        }
    }
}

/// Nearest-neighbour sets ranked by ascending patristic distance instead of
/// descending correlation.
pub fn neighbor_sets_by_distance(
    dist: &DMatrix<f64>,
    ordering: &Ordering,
    nn: usize,
) -> Result<NeighborSets> {
    check_dim("ordering length", dist.nrows(), ordering.len())?;
    check_nn(nn, dist.nrows())?;
    Ok(select_by_score(ordering, nn, NeighborRule::Nngp, |j, a| dist[(j, a)]))
}

/// Keeps the `nn` predecessors with the smallest score.
fn select_by_score<F>(ordering: &Ordering, nn: usize, rule: NeighborRule, score: F) -> NeighborSets
where
    F: Fn(usize, usize) -> f64,
{
    let perm = &ordering.perm;
    let sets = (0..perm.len())
        .map(|r| {
            let j = perm[r];
            let mut cand: Vec<usize> = (0..r).collect();
            cand.sort_by(|&x, &y| score(j, perm[x]).total_cmp(&score(j, perm[y])));
            cand.truncate(nn);
            cand.sort_unstable();
            cand.into_iter().map(|q| perm[q]).collect()
        })
        .collect();
    NeighborSets {
        order: perm.clone(),
        sets,
        rule,
        nn,
    }
}

/// Entry-wise access to a symmetric covariance.
pub trait CovarianceKernel: Sync {
    fn dim(&self) -> usize;
    fn entry(&self, i: usize, j: usize) -> f64;
}

impl CovarianceKernel for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self[(i, j)]
    }
}

/// Sparse approximate inverse Cholesky factor `U = F^{-1/2}(I - B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInvChol {
    pub order: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub cond_var: Vec<f64>,
}

/// Derivatives of the row weights and conditional variances along one
/// direction of the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTangent {
    pub weights: Vec<Vec<f64>>,
    pub cond_var: Vec<f64>,
}

struct RowSolve {
    weights: Vec<f64>,
    cond_var: f64,
    d_weights: Vec<f64>,
    d_cond_var: f64,
}

fn solve_row<K, T>(
    kernel: &K,
    tangent: Option<&T>,
    r: usize,
    j: usize,
    set: &[usize],
) -> Result<RowSolve>
where
    K: CovarianceKernel,
    T: CovarianceKernel,
{
    let kjj = kernel.entry(j, j);
    let q = set.len();
    if q == 0 {
        if !(kjj > 0.0) {
            return Err(Error::Conditioning {
                row: r,
                species: j,
                cond_var: kjj,
            });
        }
        return Ok(RowSolve {
            weights: Vec::new(),
            cond_var: kjj,
            d_weights: Vec::new(),
            d_cond_var: tangent.map_or(0.0, |t| t.entry(j, j)),
        });
    }
    let kaa = DMatrix::from_fn(q, q, |a, b| kernel.entry(set[a], set[b]));
    let kaj = DVector::from_fn(q, |a, _| kernel.entry(set[a], j));
    let chol = kaa.cholesky().ok_or(Error::Conditioning {
        row: r,
        species: j,
        cond_var: f64::NAN,
    })?;
    let b = chol.solve(&kaj);
    let f = kjj - kaj.dot(&b);
    if !(f > CONDITIONING_FLOOR * kjj) {
        return Err(Error::Conditioning {
            row: r,
            species: j,
            cond_var: f,
        });
    }
    let (d_weights, d_cond_var) = match tangent {
        None => (Vec::new(), 0.0),
        Some(t) => {
            let eaa = DMatrix::from_fn(q, q, |a, c| t.entry(set[a], set[c]));
            let eaj = DVector::from_fn(q, |a, _| t.entry(set[a], j));
            let eaa_b = &eaa * &b;
            let db = chol.solve(&(&eaj - &eaa_b));
            let df = t.entry(j, j) - 2.0 * b.dot(&eaj) + b.dot(&eaa_b);
            (db.iter().copied().collect(), df)
        }
    };
    Ok(RowSolve {
        weights: b.iter().copied().collect(),
        cond_var: f,
        d_weights,
        d_cond_var,
    })
}

/// Builds the factor row by row: `b_r = K_{A_r A_r}^{-1} K_{A_r j}` and
/// `f_r = K_jj - K_{j A_r} b_r` with `j = π(r)`. Rows are solved in parallel;
/// each row's arithmetic is independent of the worker count.
pub fn build_factor<K: CovarianceKernel>(kernel: &K, sets: &NeighborSets) -> Result<SparseInvChol> {
    build_rows::<K, DMatrix<f64>>(kernel, None, sets).map(|(f, _)| f)
}

/// Same as [`build_factor`] and additionally differentiates every row along
/// the kernel direction `tangent` (entry-wise dK).
pub fn build_factor_with_tangent<K, T>(
    kernel: &K,
    tangent: &T,
    sets: &NeighborSets,
) -> Result<(SparseInvChol, FactorTangent)>
where
    K: CovarianceKernel,
    T: CovarianceKernel,
{
    build_rows(kernel, Some(tangent), sets).map(|(f, t)| (f, t.expect("tangent requested")))
}

fn build_rows<K, T>(
    kernel: &K,
    tangent: Option<&T>,
    sets: &NeighborSets,
) -> Result<(SparseInvChol, Option<FactorTangent>)>
where
    K: CovarianceKernel,
    T: CovarianceKernel,
{
    check_dim("kernel dimension", sets.dim(), kernel.dim())?;
    let rows: Vec<RowSolve> = (0..sets.dim())
        .into_par_iter()
        .map(|r| solve_row(kernel, tangent, r, sets.order[r], &sets.sets[r]))
        .collect::<Result<_>>()?;
    let mut weights = Vec::with_capacity(rows.len());
    let mut cond_var = Vec::with_capacity(rows.len());
    let mut d_weights = Vec::with_capacity(rows.len());
    let mut d_cond_var = Vec::with_capacity(rows.len());
    for row in rows {
        weights.push(row.weights);
        cond_var.push(row.cond_var);
        d_weights.push(row.d_weights);
        d_cond_var.push(row.d_cond_var);
    }
    let factor = SparseInvChol {
        order: sets.order.clone(),
        neighbors: sets.sets.clone(),
        weights,
        cond_var,
    };
    let tangent = tangent.map(|_| FactorTangent {
        weights: d_weights,
        cond_var: d_cond_var,
    });
    Ok((factor, tangent))
}

impl SparseInvChol {
    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Non-zero entries of row `r` as (species column, value); the diagonal
    /// entry comes first.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.cond_var[r].sqrt().recip();
        std::iter::once((self.order[r], s)).chain(
            self.neighbors[r]
                .iter()
                .zip(&self.weights[r])
                .map(move |(&c, &b)| (c, -s * b)),
        )
    }

    /// `U v`: input indexed by species, output by position.
    pub fn apply_u(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("vector length", self.dim(), v.len())?;
        Ok((0..self.dim())
            .map(|r| self.row_entries(r).map(|(c, u)| u * v[c]).sum())
            .collect())
    }

    /// `Uᵀ w`: input indexed by position, output by species.
    pub fn apply_ut(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("vector length", self.dim(), w.len())?;
        let mut out = vec![0.0; self.dim()];
        for (r, &wr) in w.iter().enumerate() {
            for (c, u) in self.row_entries(r) {
                out[c] += u * wr;
            }
        }
        Ok(out)
    }

    /// `U M` for a dense species-by-k matrix; rows of the result are positions.
    pub fn apply_u_mat(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), mat.ncols());
        for r in 0..self.dim() {
            for (c, u) in self.row_entries(r) {
                for s in 0..mat.ncols() {
                    out[(r, s)] += u * mat[(c, s)];
                }
            }
        }
        out
    }

    /// `Uᵀ M` for a dense position-by-k matrix.
    pub fn apply_ut_mat(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), mat.ncols());
        for r in 0..self.dim() {
            for (c, u) in self.row_entries(r) {
                for s in 0..mat.ncols() {
                    out[(c, s)] += u * mat[(r, s)];
                }
            }
        }
        out
    }

    /// log det of the implied covariance, Σ_r log f_r.
    pub fn logdet_approx_cov(&self) -> f64 {
        self.cond_var.iter().map(|f| f.ln()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut u = DMatrix::zeros(m, m);
        for r in 0..m {
            for (c, v) in self.row_entries(r) {
                u[(r, c)] = v;
            }
        }
        u
    }

    /// Approximate precision `UᵀU` in species indexing.
    pub fn precision(&self) -> DMatrix<f64> {
        let u = self.to_dense();
        u.transpose() * u
    }

    /// Diagnostic CSV: position, species, neighbour species, weights, f.
    pub fn write_csv<W: Write>(&self, out: W, labels: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "species", "neighbors", "weights", "cond_var"])?;
        let name = |j: usize| match labels {
            Some(l) => l[j].clone(),
            None => j.to_string(),
        };
        for r in 0..self.dim() {
            let nb: Vec<String> = self.neighbors[r].iter().map(|&c| name(c)).collect();
            let wt: Vec<String> = self.weights[r].iter().map(|b| format!("{b:e}")).collect();
            w.write_record([
                r.to_string(),
                name(self.order[r]),
                nb.join(";"),
                wt.join(";"),
                format!("{:e}", self.cond_var[r]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Frobenius norm of `(UᵀU) C - I` for a factor built on the kernel `C`.
pub fn approx_error(corr: &PhyloCorrelation, factor: &SparseInvChol) -> Result<f64> {
    let m = corr.dim();
    check_dim("factor dimension", m, factor.dim())?;
    let c = &corr.matrix;
    // U C, one position row at a time.
    let mut uc = DMatrix::<f64>::zeros(m, m);
    for r in 0..m {
        for (col, u) in factor.row_entries(r) {
            for s in 0..m {
                uc[(r, s)] += u * c[(col, s)];
            }
        }
    }
    let mut prod = DMatrix::<f64>::zeros(m, m);
    for r in 0..m {
        for (col, u) in factor.row_entries(r) {
            for s in 0..m {
                prod[(col, s)] += u * uc[(r, s)];
            }
        }
    }
    for j in 0..m {
        prod[(j, j)] -= 1.0;
    }
    Ok(prod.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::{correlation_matrix, ordering, parse_newick, simulate_tree, OrderingMethod};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    fn identity_corr(m: usize) -> PhyloCorrelation {
        PhyloCorrelation::from_matrix(
            DMatrix::identity(m, m),
            (0..m).map(|j| format!("t{j}")).collect(),
        )
        .unwrap()
    }

    fn three_tip() -> PhyloCorrelation {
        correlation_matrix(&parse_newick("((A:1,B:1):1,C:2);").unwrap()).unwrap()
    }

    #[test]
    fn band_sets() {
        let c = identity_corr(6);
        let s = neighbor_sets(&c, &Ordering::identity(6), 2, NeighborRule::Band).unwrap();
        assert_eq!(s.sets[0], Vec::<usize>::new());
        assert_eq!(s.sets[1], vec![0]);
        assert_eq!(s.sets[4], vec![2, 3]);
        // permuted: sets hold species, taken from the preceding positions
        let o = Ordering {
            perm: vec![5, 4, 3, 2, 1, 0],
            method: OrderingMethod::Identity,
        };
        let s = neighbor_sets(&c, &o, 2, NeighborRule::Band).unwrap();
        assert_eq!(s.sets[4], vec![3, 2]);
    }

    #[test]
    fn nngp_full_and_ties() {
        let t = simulate_tree(8, 2).unwrap();
        let c = correlation_matrix(&t).unwrap();
        let s = neighbor_sets(&c, &Ordering::identity(8), 7, NeighborRule::Nngp).unwrap();
        assert!(s.is_full());
        assert_eq!(s, {
            let mut f = NeighborSets::full(&Ordering::identity(8));
            f.rule = NeighborRule::Nngp;
            f
        });

        let s = neighbor_sets(&identity_corr(7), &Ordering::identity(7), 3, NeighborRule::Nngp).unwrap();
        assert_eq!(s.sets[6], vec![0, 1, 2]);
        assert_eq!(s.sets[2], vec![0, 1]);
    }

    #[test]
    fn nngp_picks_most_correlated() {
        let c = three_tip();
        // order C, A, B: B should condition on A (corr .5) rather than C (0)
        let o = Ordering {
            perm: vec![2, 0, 1],
            method: OrderingMethod::Identity,
        };
        let s = neighbor_sets(&c, &o, 1, NeighborRule::Nngp).unwrap();
        assert_eq!(s.sets[2], vec![0]);
    }

    #[test]
    fn nn_range_checked() {
        let c = identity_corr(5);
        let o = Ordering::identity(5);
        assert!(matches!(
            neighbor_sets(&c, &o, 0, NeighborRule::Nngp),
            Err(Error::NeighborCount { .. })
        ));
        assert!(neighbor_sets(&c, &o, 5, NeighborRule::Band).is_err());
        let big = identity_corr(100);
        assert!(neighbor_sets(&big, &Ordering::identity(100), 65, NeighborRule::Band).is_err());
        assert!(neighbor_sets(&big, &Ordering::identity(100), 99, NeighborRule::Band).is_ok());
    }

    #[test]
    fn diagonal_kernel() {
        let k = DMatrix::identity(5, 5) * 2.5;
        let sets = neighbor_sets(&identity_corr(5), &Ordering::identity(5), 2, NeighborRule::Band).unwrap();
        let f = build_factor(&k, &sets).unwrap();
        assert!(f.weights.iter().flatten().all(|&b| b == 0.0));
        assert!(f.cond_var.iter().all(|&v| v == 2.5));
        let v = vec![1.0, -2.0, 0.5, 3.0, 0.0];
        let uv = f.apply_u(&v).unwrap();
        for (a, b) in uv.iter().zip(&v) {
            assert!((a - b / 2.5f64.sqrt()).abs() < 1e-15);
        }
        assert_eq!(f.apply_u(&[0.0; 5]).unwrap(), vec![0.0; 5]);
        assert!((f.logdet_approx_cov() - 5.0 * 2.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn three_tip_hand_computation() {
        // Schur complements of C = [[1,.5,0],[.5,1,0],[0,0,1]] with one neighbour.
        let c = three_tip();
        let sets = neighbor_sets(&c, &Ordering::identity(3), 1, NeighborRule::Nngp).unwrap();
        let f = build_factor(&c.matrix, &sets).unwrap();
        assert_eq!(f.cond_var[0], 1.0);
        assert!((f.cond_var[1] - 0.75).abs() < 1e-15);
        assert!((f.weights[1][0] - 0.5).abs() < 1e-15);
        // species C conditions on A or B (both corr 0, tie -> earlier = A); f_3 = 1
        assert_eq!(sets.sets[2], vec![0]);
        assert!((f.cond_var[2] - 1.0).abs() < 1e-15);
        assert!((f.logdet_approx_cov() - (0.0 + 0.75f64.ln() + 0.0)).abs() < 1e-15);
    }

    #[test]
    fn full_conditioning_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in [1usize, 2, 5, 9] {
            let k = random_spd(m, &mut rng);
            let sets = NeighborSets::full(&Ordering::identity(m));
            let f = build_factor(&k, &sets).unwrap();
            let kinv = k.clone().cholesky().unwrap().inverse();
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let utuv = f.apply_ut(&f.apply_u(&v).unwrap()).unwrap();
            let direct = &kinv * DVector::from_vec(v.clone());
            for j in 0..m {
                assert!((utuv[j] - direct[j]).abs() < 1e-8);
            }
            let dense_logdet = 2.0 * k.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum();
            assert!((f.logdet_approx_cov() - dense_logdet).abs() < 1e-8 * dense_logdet.abs().max(1.0));
        }
    }

    #[test]
    fn approx_error_cases() {
        let c = identity_corr(6);
        for nn in 1..=5 {
            for rule in [NeighborRule::Nngp, NeighborRule::Band] {
                let sets = neighbor_sets(&c, &Ordering::identity(6), nn, rule).unwrap();
                let f = build_factor(&c.matrix, &sets).unwrap();
                assert_eq!(approx_error(&c, &f).unwrap(), 0.0);
            }
        }
        let t = simulate_tree(100, 42).unwrap();
        let c = correlation_matrix(&t).unwrap();
        let o = ordering(&c, &t, OrderingMethod::PhylogenyTips).unwrap();
        let err = |nn| {
            let sets = neighbor_sets(&c, &o, nn, NeighborRule::Nngp).unwrap();
            approx_error(&c, &build_factor(&c.matrix, &sets).unwrap()).unwrap()
        };
        assert!(err(15) < err(1));
        assert!(err(99) < 1e-7);
    }

    #[test]
    fn conditioning_failure_names_row() {
        // two identical species: the second has zero conditional variance
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let sets = NeighborSets::full(&Ordering::identity(2));
        match build_factor(&k, &sets) {
            Err(Error::Conditioning { row, species, .. }) => assert_eq!((row, species), (1, 1)),
            other => panic!("expected conditioning failure, got {other:?}"),
        }
    }

    #[test]
    fn worker_count_does_not_change_factor() {
        let t = simulate_tree(120, 8).unwrap();
        let c = correlation_matrix(&t).unwrap();
        let sets = neighbor_sets(&c, &Ordering::identity(120), 10, NeighborRule::Nngp).unwrap();
        let build = |w| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .unwrap()
                .install(|| build_factor(&c.matrix, &sets).unwrap())
        };
        let one = build(1);
        let four = build(4);
        assert_eq!(one, four);
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let t = simulate_tree(10, 4).unwrap();
        let c = correlation_matrix(&t).unwrap().matrix;
        let sets = neighbor_sets(
            &correlation_matrix(&t).unwrap(),
            &Ordering::identity(10),
            3,
            NeighborRule::Nngp,
        )
        .unwrap();
        let kern = |rho: f64| &c * rho + DMatrix::identity(10, 10) * (1.0 - rho);
        let dk = &c - DMatrix::identity(10, 10);
        let (_, tan) = build_factor_with_tangent(&kern(0.4), &dk, &sets).unwrap();
        let h = 1e-6;
        let up = build_factor(&kern(0.4 + h), &sets).unwrap();
        let dn = build_factor(&kern(0.4 - h), &sets).unwrap();
        for r in 0..10 {
            let fd = (up.cond_var[r] - dn.cond_var[r]) / (2.0 * h);
            assert!((fd - tan.cond_var[r]).abs() < 1e-7);
            for q in 0..up.weights[r].len() {
                let fd = (up.weights[r][q] - dn.weights[r][q]) / (2.0 * h);
                assert!((fd - tan.weights[r][q]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn factor_csv_export() {
        let c = three_tip();
        let sets = neighbor_sets(&c, &Ordering::identity(3), 1, NeighborRule::Nngp).unwrap();
        let f = build_factor(&c.matrix, &sets).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf, Some(&c.labels)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("position,species,neighbors,weights,cond_var"));
        assert!(text.contains("1,B,A,5e-1,7.5e-1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Conditioning on a superset never increases the conditional variance.
        #[test]
        fn larger_sets_never_increase_cond_var(seed in 0u64..1000, m in 3usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_spd(m, &mut rng);
            let order = Ordering::identity(m);
            let corr = PhyloCorrelation::from_matrix(k.clone(), (0..m).map(|j| j.to_string()).collect()).unwrap();
            for nn in 1..m - 1 {
                let small = build_factor(&k, &neighbor_sets(&corr, &order, nn, NeighborRule::Band).unwrap()).unwrap();
                let large = build_factor(&k, &neighbor_sets(&corr, &order, nn + 1, NeighborRule::Band).unwrap()).unwrap();
                for r in 0..m {
                    prop_assert!(large.cond_var[r] <= small.cond_var[r] * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn exact_under_full_conditioning(seed in 0u64..1000, m in 1usize..13) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_spd(m, &mut rng);
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let o = Ordering { perm, method: OrderingMethod::Identity };
            let f = build_factor(&k, &NeighborSets::full(&o)).unwrap();
            let resid = f.precision() * &k - DMatrix::identity(m, m);
            prop_assert!(resid.norm() / (m as f64).sqrt() < 1e-8);
        }

        #[test]
        fn logdet_matches_reconstructed_covariance(seed in 0u64..1000, m in 2usize..13, nn in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_spd(m, &mut rng);
            let corr = PhyloCorrelation::from_matrix(k.clone(), (0..m).map(|j| j.to_string()).collect()).unwrap();
            let nn = nn.min(m - 1);
            let f = build_factor(&k, &neighbor_sets(&corr, &Ordering::identity(m), nn, NeighborRule::Nngp).unwrap()).unwrap();
            let cov = f.precision().try_inverse().unwrap();
            let dense = cov.determinant().ln();
            prop_assert!((f.logdet_approx_cov() - dense).abs() < 1e-8 * dense.abs().max(1.0));
        }
    }
}
