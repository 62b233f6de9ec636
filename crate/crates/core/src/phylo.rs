//! Phylogenies: Newick ingestion, shared-branch-length algebra, species
//! orderings and a simple random tree generator.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rooted tree stored as a flat node list.
///
/// Node 0 is not necessarily the root; `root` names it. Tips are kept in
/// left-to-right order as they appear in the Newick string (or as generated).
#[derive(Debug, Clone, PartialEq)]
pub struct PhyloTree {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    branch_length: Vec<f64>,
    label: Vec<Option<String>>,
    root: usize,
    tips: Vec<usize>,
}

impl PhyloTree {
    /// Builds a tree from parent pointers. Children keep the order in which
    /// they are listed in `parent` (lower node index first).
    pub fn from_parents(
        parent: Vec<Option<usize>>,
        branch_length: Vec<f64>,
        label: Vec<Option<String>>,
    ) -> Result<Self> {
        let n = parent.len();
        if n == 0 {
            return Err(Error::InvalidTree("empty tree".into()));
        }
        if branch_length.len() != n || label.len() != n {
            return Err(Error::InvalidTree(
                "parent, branch length and label vectors differ in length".into(),
            ));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidTree(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == i {
                    return Err(Error::InvalidTree(format!("node {i} has invalid parent {p}")));
                }
                children[p].push(i);
            }
        }
        for (i, &b) in branch_length.iter().enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::InvalidTree(format!(
                    "node {i} has invalid branch length {b}"
                )));
            }
        }
        let mut tree = PhyloTree {
            parent,
            children,
            branch_length,
            label,
            root: roots[0],
            tips: Vec::new(),
        };
        tree.finish()?;
        Ok(tree)
    }

    /// Collects tips in preorder and checks connectivity and label rules.
    fn finish(&mut self) -> Result<()> {
        let n = self.parent.len();
        let mut seen = vec![false; n];
        let mut tips = Vec::new();
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            if seen[v] {
                return Err(Error::InvalidTree("cycle detected".into()));
            }
            seen[v] = true;
            if self.children[v].is_empty() {
                tips.push(v);
            }
            for &c in self.children[v].iter().rev() {
                stack.push(c);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidTree("tree is not connected".into()));
        }
        let mut labels = HashSet::new();
        for &t in &tips {
            match self.label[t].as_deref() {
                None | Some("") => {
                    return Err(Error::InvalidTree(format!("tip node {t} has no label")))
                }
                Some(l) => {
                    if !labels.insert(l.to_string()) {
                        return Err(Error::InvalidTree(format!("duplicate tip label '{l}'")));
                    }
                }
            }
        }
        self.tips = tips;
        Ok(())
    }

    pub fn n_tips(&self) -> usize {
        self.tips.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn branch_length(&self, node: usize) -> f64 {
        self.branch_length[node]
    }

    /// Node ids of the tips, left to right.
    pub fn tip_nodes(&self) -> &[usize] {
        &self.tips
    }

    pub fn tip_labels(&self) -> Vec<String> {
        self.tips
            .iter()
            .map(|&t| self.label[t].clone().unwrap_or_default())
            .collect()
    }

    /// Root-to-node path length for every node.
    pub fn node_depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.n_nodes()];
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            for &c in &self.children[v] {
                depth[c] = depth[v] + self.branch_length[c];
                stack.push(c);
            }
        }
        depth
    }

    /// Root-to-tip depth per tip (left-to-right tip order).
    pub fn tip_depths(&self) -> Vec<f64> {
        let depth = self.node_depths();
        self.tips.iter().map(|&t| depth[t]).collect()
    }

    /// Shared branch length S: S_jl is the depth of the most recent common
    /// ancestor of tips j and l, S_jj the depth of tip j.
    pub fn shared_branch_lengths(&self) -> DMatrix<f64> {
        let m = self.n_tips();
        let depth = self.node_depths();
        let mut tip_index = vec![usize::MAX; self.n_nodes()];
        for (j, &t) in self.tips.iter().enumerate() {
            tip_index[t] = j;
        }
        let mut s = DMatrix::zeros(m, m);
        // Post-order: tips below each node; pairs split at a node share its depth.
        let mut below: Vec<Vec<usize>> = vec![Vec::new(); self.n_nodes()];
        for v in self.postorder() {
            if self.children[v].is_empty() {
                let j = tip_index[v];
                s[(j, j)] = depth[v];
                below[v].push(j);
                continue;
            }
            let kids = self.children[v].clone();
            let mut acc: Vec<usize> = Vec::new();
            for c in kids {
                let sub = std::mem::take(&mut below[c]);
                for &a in &acc {
                    for &b in &sub {
                        s[(a, b)] = depth[v];
                        s[(b, a)] = depth[v];
                    }
                }
                acc.extend(sub);
            }
            below[v] = acc;
        }
        s
    }

    fn postorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.n_nodes());
        let mut stack = vec![(self.root, false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
            } else {
                stack.push((v, true));
                for &c in self.children[v].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        order
    }

    /// Serializes to Newick. Branch lengths use the shortest round-trip
    /// decimal representation, so parse(to_newick(t)) reproduces t.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_node(self.root, &mut out);
        out.push(';');
        out
    }

    fn write_node(&self, v: usize, out: &mut String) {
        if !self.children[v].is_empty() {
            out.push('(');
            for (i, &c) in self.children[v].iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_node(c, out);
            }
            out.push(')');
        }
        if let Some(l) = &self.label[v] {
            out.push_str(&quote_label(l));
        }
        if v != self.root || self.branch_length[v] > 0.0 {
            let _ = write!(out, ":{}", self.branch_length[v]);
        }
    }
}

fn quote_label(label: &str) -> String {
    let needs_quotes = label
        .chars()
        .any(|c| c.is_whitespace() || "():;,[]'".contains(c));
    if needs_quotes {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// Parses a single Newick tree.
pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    let mut p = NewickParser {
        src: text.as_bytes(),
        pos: 0,
        parent: Vec::new(),
        length: Vec::new(),
        label: Vec::new(),
        length_pos: Vec::new(),
    };
    let root = p.subtree(None)?;
    p.skip_ws();
    if p.peek() != Some(b';') {
        return Err(p.err("expected ';' at end of tree"));
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err("trailing characters after ';'"));
    }
    for (v, len) in p.length.iter().enumerate() {
        if v != root && len.is_none() {
            return Err(Error::Parse {
                pos: p.length_pos[v],
                msg: "missing branch length".into(),
            });
        }
    }
    // Duplicate labels are reported with the position of the second occurrence.
    let mut seen = HashSet::new();
    for v in 0..p.parent.len() {
        let is_tip = !p.parent.contains(&Some(v));
        if is_tip {
            if let Some(l) = &p.label[v] {
                if !seen.insert(l.clone()) {
                    return Err(Error::Parse {
                        pos: p.length_pos[v],
                        msg: format!("duplicate tip label '{l}'"),
                    });
                }
            }
        }
    }
    let lengths = p.length.iter().map(|l| l.unwrap_or(0.0)).collect();
    PhyloTree::from_parents(p.parent, lengths, p.label)
}

struct NewickParser<'a> {
    src: &'a [u8],
    pos: usize,
    parent: Vec<Option<usize>>,
    length: Vec<Option<f64>>,
    label: Vec<Option<String>>,
    length_pos: Vec<usize>,
}

impl NewickParser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    while let Some(c) = self.peek() {
                        self.pos += 1;
                        if c == b']' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn subtree(&mut self, parent: Option<usize>) -> Result<usize> {
        self.skip_ws();
        let node = self.parent.len();
        self.parent.push(parent);
        self.length.push(None);
        self.label.push(None);
        self.length_pos.push(self.pos);
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                self.subtree(Some(node))?;
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(_) => return Err(self.err("expected ',' or ')'")),
                    None => return Err(self.err("unbalanced parentheses")),
                }
            }
        }
        self.skip_ws();
        let label = self.label()?;
        if self.parent[..].iter().all(|&q| q != Some(node)) && label.is_empty() {
            return Err(self.err("tip without label"));
        }
        if !label.is_empty() {
            self.label[node] = Some(label);
        }
        self.skip_ws();
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while let Some(c) = self.peek() {
                if c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
            let value: f64 = text.parse().map_err(|_| Error::Parse {
                pos: start,
                msg: format!("invalid branch length '{text}'"),
            })?;
            if value < 0.0 || !value.is_finite() {
                return Err(Error::Parse {
                    pos: start,
                    msg: format!("negative or non-finite branch length {value}"),
                });
            }
            self.length[node] = Some(value);
            self.length_pos[node] = start;
        }
        Ok(node)
    }

    fn label(&mut self) -> Result<String> {
        if self.peek() == Some(b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = Vec::new();
            loop {
                match self.peek() {
                    None => {
                        return Err(Error::Parse {
                            pos: start,
                            msg: "unterminated quoted label".into(),
                        })
                    }
                    Some(b'\'') => {
                        if self.src.get(self.pos + 1) == Some(&b'\'') {
                            out.push(b'\'');
                            self.pos += 2;
                        } else {
                            self.pos += 1;
                            break;
                        }
                    }
                    Some(c) => {
                        out.push(c);
                        self.pos += 1;
                    }
                }
            }
            return String::from_utf8(out).map_err(|_| Error::Parse {
                pos: start,
                msg: "label is not valid UTF-8".into(),
            });
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() || b"():;,[]'".contains(&c) {
                break;
            }
            self.pos += 1;
        }
        String::from_utf8(self.src[start..self.pos].to_vec()).map_err(|_| Error::Parse {
            pos: start,
            msg: "label is not valid UTF-8".into(),
        })
    }
}

/// Dense phylogenetic correlation matrix with its tip labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyloCorrelation {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl PhyloCorrelation {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Wraps an arbitrary unit-diagonal matrix (no tree needed).
    pub fn from_matrix(matrix: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() != labels.len() {
            return Err(Error::Dimension {
                what: "correlation matrix",
                expected: labels.len(),
                found: matrix.nrows(),
            });
        }
        Ok(PhyloCorrelation { matrix, labels })
    }

    /// Reorders rows and columns: position r of the result is species `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> PhyloCorrelation {
        let m = perm.len();
        let matrix = DMatrix::from_fn(m, m, |r, s| self.matrix[(perm[r], perm[s])]);
        let labels = perm.iter().map(|&j| self.labels[j].clone()).collect();
        PhyloCorrelation { matrix, labels }
    }
}

/// C_jl = S_jl / sqrt(S_jj S_ll).
pub fn correlation_matrix(tree: &PhyloTree) -> Result<PhyloCorrelation> {
    let s = tree.shared_branch_lengths();
    let labels = tree.tip_labels();
    let m = s.nrows();
    for j in 0..m {
        if !(s[(j, j)] > 0.0) {
            return Err(Error::DegenerateDepth {
                tip: labels[j].clone(),
            });
        }
    }
    let mut c = DMatrix::from_fn(m, m, |j, l| s[(j, l)] / (s[(j, j)] * s[(l, l)]).sqrt());
    for j in 0..m {
        c[(j, j)] = 1.0;
    }
    Ok(PhyloCorrelation { matrix: c, labels })
}

/// Patristic distances d_jl = S_jj + S_ll - 2 S_jl.
pub fn evolutionary_distances(tree: &PhyloTree) -> DMatrix<f64> {
    let s = tree.shared_branch_lengths();
    let m = s.nrows();
    DMatrix::from_fn(m, m, |j, l| {
        if j == l {
            0.0
        } else {
            (s[(j, j)] + s[(l, l)] - 2.0 * s[(j, l)]).max(0.0)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingMethod {
    /// Tip order of the phylogeny.
    PhylogenyTips,
    Alphabetical,
    SumPairwiseDistance,
    RootDistance,
    FirstEigenvector,
    SumSquaredCovariance,
    Identity,
}

impl OrderingMethod {
    /// The six heuristics compared in ordering scans.
    pub const HEURISTICS: [OrderingMethod; 6] = [
        OrderingMethod::PhylogenyTips,
        OrderingMethod::Alphabetical,
        OrderingMethod::SumPairwiseDistance,
        OrderingMethod::RootDistance,
        OrderingMethod::FirstEigenvector,
        OrderingMethod::SumSquaredCovariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderingMethod::PhylogenyTips => "phylogeny-tips",
            OrderingMethod::Alphabetical => "alphabetical",
            OrderingMethod::SumPairwiseDistance => "sum-pairwise-distance",
            OrderingMethod::RootDistance => "root-distance",
            OrderingMethod::FirstEigenvector => "first-eigenvector",
            OrderingMethod::SumSquaredCovariance => "sum-squared-covariance",
            OrderingMethod::Identity => "identity",
        }
    }
}

impl fmt::Display for OrderingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.to_ascii_lowercase().as_str() {
            "phylogeny-tips" | "tips" | "phylogeny" => OrderingMethod::PhylogenyTips,
            "alphabetical" | "alpha" => OrderingMethod::Alphabetical,
            "sum-pairwise-distance" | "distance" => OrderingMethod::SumPairwiseDistance,
            "root-distance" | "root" => OrderingMethod::RootDistance,
            "first-eigenvector" | "eigenvector" => OrderingMethod::FirstEigenvector,
            "sum-squared-covariance" | "covariance" => OrderingMethod::SumSquaredCovariance,
            "identity" => OrderingMethod::Identity,
            _ => return Err(Error::UnknownOrdering(s.to_string())),
        };
        Ok(m)
    }
}

/// A permutation of species: position r holds species `perm[r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    pub perm: Vec<usize>,
    pub method: OrderingMethod,
}

impl Ordering {
    pub fn identity(m: usize) -> Self {
        Ordering {
            perm: (0..m).collect(),
            method: OrderingMethod::Identity,
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Position of each species.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (r, &j) in self.perm.iter().enumerate() {
            inv[j] = r;
        }
        inv
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        for &j in &self.perm {
            if j >= seen.len() || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        true
    }
}

/// Species ordering. `corr` and `tree` must index species identically
/// (as produced by [`correlation_matrix`]).
pub fn ordering(corr: &PhyloCorrelation, tree: &PhyloTree, method: OrderingMethod) -> Result<Ordering> {
    let m = corr.dim();
    if tree.n_tips() != m {
        return Err(Error::Dimension {
            what: "tree tips vs correlation matrix",
            expected: m,
            found: tree.n_tips(),
        });
    }
    let c = &corr.matrix;
    let mut perm: Vec<usize> = (0..m).collect();
    match method {
        OrderingMethod::PhylogenyTips | OrderingMethod::Identity => {}
        OrderingMethod::Alphabetical => perm.sort_by(|&a, &b| corr.labels[a].cmp(&corr.labels[b])),
        OrderingMethod::SumPairwiseDistance => {
            let d = evolutionary_distances(tree);
            let key: Vec<f64> = (0..m).map(|j| d.row(j).iter().sum()).collect();
            sort_by_key(&mut perm, &key);
        }
        OrderingMethod::RootDistance => sort_by_key(&mut perm, &tree.tip_depths()),
        OrderingMethod::FirstEigenvector => {
            let key = dominant_eigenvector(c);
            sort_by_key(&mut perm, &key);
        }
        OrderingMethod::SumSquaredCovariance => {
            let key: Vec<f64> = (0..m).map(|j| c.row(j).iter().map(|x| x * x).sum()).collect();
            sort_by_key(&mut perm, &key);
        }
    }
    Ok(Ordering { perm, method })
}

fn sort_by_key(perm: &mut [usize], key: &[f64]) {
    // Stable: equal keys keep their original index order.
    perm.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
}

/// Dominant eigenvector with its first nonzero entry made positive.
fn dominant_eigenvector(c: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(c.clone());
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Random bifurcating tree: start from a cherry and split a uniformly chosen
/// tip until `m` tips exist. Branch lengths are i.i.d. Uniform(0, 1).
/// Tips are labelled s0001, s0002, ... in order of creation.
pub fn simulate_tree(m: usize, seed: u64) -> Result<PhyloTree> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!(
            "tree simulation needs at least 2 tips, got {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut length = vec![0.0];
    let mut tips: Vec<usize> = Vec::new();
    for _ in 0..2 {
        parent.push(Some(0));
        length.push(rng.sample::<f64, _>(Open01));
        tips.push(parent.len() - 1);
    }
    while tips.len() < m {
        let pick = rng.random_range(0..tips.len());
        let v = tips.remove(pick);
        for _ in 0..2 {
            parent.push(Some(v));
            length.push(rng.sample::<f64, _>(Open01));
            tips.push(parent.len() - 1);
        }
    }
    let mut label = vec![None; parent.len()];
    let mut created = tips.clone();
    created.sort_unstable();
    for (i, &t) in created.iter().enumerate() {
        label[t] = Some(format!("s{:04}", i + 1));
    }
    PhyloTree::from_parents(parent, length, label)
}
