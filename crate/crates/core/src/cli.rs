//! Command-line front end: `fit`, `simulate`, `ordering-scan`, `benchmark`.
//!
//! Settings come from an optional TOML file; flags override it.
//! Exit codes: 0 ok, 1 other errors, 2 fit did not converge,
//! 3 species or site mismatch, 4 input/output failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Deserialize;

use crate::elbo::{ArStructure, ModelData};
use crate::error::{Error, Result};
use crate::family::{Family, Link};
use crate::io::{fmt_num, read_table, write_rows};
use crate::optim::{fit, fit_with, predict_effects, FitConfig, FitResult, PriorSetup};
use crate::phylo::{correlation_matrix, ordering, parse_newick, OrderingMethod, PhyloTree};
use crate::simulate::{quantile, run_study, simulate_dataset, summarize, ReplicateOutcome, SimProtocol, StudyCondition};
use crate::sparseprec::{approx_error, build_factor, neighbor_sets, NeighborRule, NeighborSets};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub y: Option<PathBuf>,
    pub x: Option<PathBuf>,
    pub traits: Option<PathBuf>,
    pub tree: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyGrid {
    pub m: Vec<usize>,
    pub nn: Vec<usize>,
    pub d: Vec<usize>,
    /// Fit one ρ shared by all covariates (the simulated truth is shared).
    pub shared_signal: bool,
}

impl Default for StudyGrid {
    fn default() -> Self {
        StudyGrid {
            m: Vec::new(),
            nn: Vec::new(),
            d: Vec::new(),
            shared_signal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanGrid {
    pub nn: Vec<usize>,
    pub orderings: Vec<OrderingMethod>,
    pub rules: Vec<NeighborRule>,
    /// Add a full-conditioning row per ordering.
    pub full: bool,
}

impl Default for ScanGrid {
    fn default() -> Self {
        ScanGrid {
            nn: (1..=15).collect(),
            orderings: OrderingMethod::HEURISTICS.to_vec(),
            rules: vec![NeighborRule::Nngp, NeighborRule::Band],
            full: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchGrid {
    pub d: Vec<usize>,
    pub ar: Vec<ArStructure>,
    pub replicates: Option<usize>,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            d: vec![0, 1],
            ar: vec![ArStructure::Unstructured],
            replicates: None,
        }
    }
}

/// Contents of the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub family: Option<Family>,
    pub link: Option<Link>,
    pub input: InputPaths,
    pub fit: FitConfig,
    pub simulate: SimProtocol,
    pub study: StudyGrid,
    pub scan: ScanGrid,
    pub benchmark: BenchGrid,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "phylovar", version, about = "Phylogenetic mixed models for community data by variational approximation")]
pub struct Cli {
    /// TOML configuration file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for every internal pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to response, covariate and tree files.
    Fit(FitArgs),
    /// Run a simulation study and summarize signal recovery.
    Simulate(SimArgs),
    /// Tabulate approximation error over orderings, rules and neighbour counts.
    OrderingScan(ScanArgs),
    /// Time fits across variational ranks and A^r structures.
    Benchmark(BenchArgs),
}

#[derive(Debug, Args, Default)]
pub struct FitFlags {
    #[arg(long)]
    pub nn: Option<usize>,
    #[arg(long)]
    pub rule: Option<NeighborRule>,
    #[arg(long)]
    pub ordering: Option<OrderingMethod>,
    /// Rank of the species variational covariance.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub ar: Option<ArStructure>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shared_signal: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub correlated_effects: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub repulsion: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standard_errors: Option<bool>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub gtol: Option<f64>,
    #[arg(long)]
    pub ftol: Option<f64>,
    #[arg(long)]
    pub memory: Option<usize>,
}

impl FitFlags {
    fn apply(&self, c: &mut FitConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(nn, rule, ordering, d, ar, shared_signal, correlated_effects, repulsion, standard_errors, max_iter, gtol, ftol, memory);
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Responses: sites × species, first column the site id.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Covariates: sites × covariates, first column the site id.
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Species traits: species × traits, first column the species label.
    #[arg(long)]
    pub traits: Option<PathBuf>,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub link: Option<Link>,
    #[command(flatten)]
    pub fit: FitFlags,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Species counts to study (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub nn_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub d_grid: Option<Vec<usize>>,
    #[command(flatten)]
    pub fit: FitFlags,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub nn_grid: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub d_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ar_grid: Option<Vec<ArStructure>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub family: Option<Family>,
    #[command(flatten)]
    pub fit: FitFlags,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::SpeciesMismatch(_) | Error::SiteMismatch(_) => EXIT_MISMATCH,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Toml(_) | Error::Parse { .. } => EXIT_IO,
        _ => EXIT_ERROR,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed.or(cfg.seed) {
        cfg.fit.seed = seed;
        cfg.simulate.seed = seed;
    }
    let threads = cli.threads.or(cfg.threads).unwrap_or(0);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Fit(args) => {
            override_path(&mut cfg.input.y, args.y);
            override_path(&mut cfg.input.x, args.x);
            override_path(&mut cfg.input.traits, args.traits);
            override_path(&mut cfg.input.tree, args.tree);
            cfg.family = args.family.or(cfg.family);
            cfg.link = args.link.or(cfg.link);
            args.fit.apply(&mut cfg.fit);
            cmd_fit(&cfg, &out)
        }
        Command::Simulate(args) => {
            let s = &mut cfg.simulate;
            s.n = args.n.unwrap_or(s.n);
            s.m = args.m.unwrap_or(s.m);
            s.p = args.p.unwrap_or(s.p);
            s.family = args.family.unwrap_or(s.family);
            s.rho = args.rho.unwrap_or(s.rho);
            s.replicates = args.replicates.unwrap_or(s.replicates);
            if let Some(g) = args.m_grid {
                cfg.study.m = g;
            }
            if let Some(g) = args.nn_grid {
                cfg.study.nn = g;
            }
            if let Some(g) = args.d_grid {
                cfg.study.d = g;
            }
            args.fit.apply(&mut cfg.fit);
            cmd_simulate(&cfg, &out)
        }
        Command::OrderingScan(args) => {
            override_path(&mut cfg.input.tree, args.tree);
            if let Some(g) = args.nn_grid {
                cfg.scan.nn = g;
            }
            cmd_ordering_scan(&cfg, &out)
        }
        Command::Benchmark(args) => {
            let s = &mut cfg.simulate;
            s.n = args.n.unwrap_or(s.n);
            s.m = args.m.unwrap_or(s.m);
            s.p = args.p.unwrap_or(s.p);
            s.family = args.family.unwrap_or(s.family);
            if let Some(g) = args.d_grid {
                cfg.benchmark.d = g;
            }
            if let Some(g) = args.ar_grid {
                cfg.benchmark.ar = g;
            }
            cfg.benchmark.replicates = args.replicates.or(cfg.benchmark.replicates);
            args.fit.apply(&mut cfg.fit);
            cmd_benchmark(&cfg, &out)
        }
    })
}

fn override_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing input path for {what}")))
}

pub fn read_tree(path: &Path) -> Result<PhyloTree> {
    parse_newick(&fs::read_to_string(path)?)
}

/// Loads Y, X, optional traits and the tree, with species columns aligned
/// to the tree's tip order.
pub fn load_inputs(cfg: &RunConfig) -> Result<(ModelData, PhyloTree)> {
    let tree = read_tree(required(&cfg.input.tree, "tree")?)?;
    let ytab = read_table(required(&cfg.input.y, "responses")?)?;
    let xtab = read_table(required(&cfg.input.x, "covariates")?)?;
    if ytab.ids != xtab.ids {
        let first = ytab
            .ids
            .iter()
            .zip(&xtab.ids)
            .position(|(a, b)| a != b)
            .unwrap_or(ytab.ids.len().min(xtab.ids.len()));
        return Err(Error::SiteMismatch(format!(
            "responses have {} sites, covariates {}; first difference at row {}",
            ytab.ids.len(),
            xtab.ids.len(),
            first + 1
        )));
    }
    let tips = tree.tip_labels();
    let cols = align(&ytab.columns, &tips)?;
    let (n, m) = (ytab.ids.len(), tips.len());
    let y = DMatrix::from_fn(n, m, |i, r| ytab.values[(i, cols[r])]);
    let traits = match &cfg.input.traits {
        Some(path) => {
            let t = read_table(path)?;
            let rows = align(&t.ids, &tips)?;
            Some(DMatrix::from_fn(m, t.columns.len(), |r, s| t.values[(rows[r], s)]))
        }
        None => None,
    };
    let family = match cfg.family {
        Some(f) => f,
        None => {
            let binary = y.iter().all(|v| v.is_nan() || *v == 0.0 || *v == 1.0);
            let f = if binary { Family::Bernoulli } else { Family::Poisson };
            info!("family not given; using {f}");
            f
        }
    };
    let link = cfg.link.unwrap_or(family.default_link());
    let data = ModelData::new(y, xtab.values, traits, family, link)?.with_labels(tips, xtab.columns)?;
    Ok((data, tree))
}

/// Index of each tip among `names`; every name must match exactly one tip.
fn align(names: &[String], tips: &[String]) -> Result<Vec<usize>> {
    let tipset: BTreeSet<&String> = tips.iter().collect();
    let nameset: BTreeSet<&String> = names.iter().collect();
    let mut offenders: BTreeSet<String> = tipset.symmetric_difference(&nameset).map(|s| s.to_string()).collect();
    if nameset.len() != names.len() {
        let mut seen = BTreeSet::new();
        for n in names {
            if !seen.insert(n) {
                offenders.insert(n.clone());
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::SpeciesMismatch(offenders.into_iter().collect()));
    }
    Ok(tips
        .iter()
        .map(|t| names.iter().position(|n| n == t).expect("checked above"))
        .collect())
}

/// Display rule for signal estimates: 0.05 or lower shows as a blank cell.
pub fn signal_display(rho: f64) -> String {
    if rho <= 0.05 {
        String::new()
    } else {
        fmt_num(rho)
    }
}

pub fn write_fit_outputs(result: &FitResult, data: &ModelData, out: &Path) -> Result<()> {
    fs::write(out.join("fit.json"), serde_json::to_string_pretty(result)?)?;
    let se = result.standard_errors.as_ref();
    let cfg = &result.config;
    let rows: Vec<Vec<String>> = result
        .covariates
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let rho_se = se.and_then(|s| s.rho.as_ref()).map(|v| v[k.min(v.len() - 1)]);
            let sigma_se = se.and_then(|s| s.sigma.as_ref()).map(|v| v[k]);
            vec![
                result.ordering.to_string(),
                cfg.rule.to_string(),
                cfg.nn.to_string(),
                cfg.d.to_string(),
                fmt_num(result.wall_time_secs),
                fmt_num(result.elbo),
                result.converged.to_string(),
                name.clone(),
                fmt_num(result.rho[k]),
                signal_display(result.rho[k]),
                fmt_num(result.sigma[k]),
                rho_se.map(fmt_num).unwrap_or_default(),
                sigma_se.map(fmt_num).unwrap_or_default(),
            ]
        })
        .collect();
    write_rows(
        &out.join("signal.csv"),
        &[
            "ordering", "rule", "nn", "d", "time_secs", "elbo", "converged", "covariate", "rho", "rho_display", "sigma",
            "rho_se", "sigma_se",
        ],
        &rows,
    )?;
    let effects: Vec<Vec<String>> = predict_effects(result, data.traits.as_ref())
        .into_iter()
        .map(|e| {
            vec![
                e.species,
                e.covariate,
                fmt_num(e.estimate),
                fmt_num(e.deviation),
                fmt_num(e.lower),
                fmt_num(e.upper),
                e.covers_zero.to_string(),
            ]
        })
        .collect();
    write_rows(
        &out.join("effects.csv"),
        &["species", "covariate", "estimate", "deviation", "lower", "upper", "covers_zero"],
        &effects,
    )
}

fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let (data, tree) = load_inputs(cfg)?;
    info!(
        "fitting {} sites x {} species, {} covariates ({})",
        data.n_sites(),
        data.n_species(),
        data.n_covariates(),
        data.family
    );
    let result = fit(&data, &tree, &cfg.fit)?;
    write_fit_outputs(&result, &data, out)?;
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("warning: fit did not converge: {}", result.diagnostics.join("; "));
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// Cartesian product m × nn × d, defaulting each axis to the configured value.
pub fn study_conditions(cfg: &RunConfig) -> Vec<StudyCondition> {
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let ms = or(&cfg.study.m, cfg.simulate.m);
    let nns = or(&cfg.study.nn, cfg.fit.nn);
    let ds = or(&cfg.study.d, cfg.fit.d);
    let mut out = Vec::new();
    for &m in &ms {
        for &nn in &nns {
            for &d in &ds {
                out.push(StudyCondition { m, nn, d });
            }
        }
    }
    out
}

/// Writes sim_replicates.csv, sim_summary.csv (deterministic columns only)
/// and sim_timing.csv.
pub fn write_study_outputs(
    family: Family,
    outcomes: &[ReplicateOutcome],
    conditions: &[StudyCondition],
    out: &Path,
) -> Result<()> {
    let fam = family.to_string();
    let reps: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                fam.clone(),
                o.condition.m.to_string(),
                o.condition.nn.to_string(),
                o.condition.d.to_string(),
                o.replicate.to_string(),
                o.seed.to_string(),
                fmt_num(o.rho_true),
                fmt_num(o.rho_hat),
                fmt_num(o.elbo),
                o.converged.to_string(),
                o.iterations.to_string(),
                fmt_num(o.wall_time_secs),
            ]
        })
        .collect();
    write_rows(
        &out.join("sim_replicates.csv"),
        &["family", "m", "nn", "d", "replicate", "seed", "rho_true", "rho_hat", "elbo", "converged", "iterations", "time_secs"],
        &reps,
    )?;
    let summary = summarize(outcomes, conditions)?;
    let keys = |c: &StudyCondition| vec![fam.clone(), c.m.to_string(), c.nn.to_string(), c.d.to_string()];
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|(c, s)| {
            let mut r = keys(c);
            r.extend([
                s.replicates.to_string(),
                s.converged.to_string(),
                fmt_num(s.mae),
                fmt_num(s.median_rho_hat),
            ]);
            r
        })
        .collect();
    write_rows(
        &out.join("sim_summary.csv"),
        &["family", "m", "nn", "d", "replicates", "converged", "mae_rho", "median_rho_hat"],
        &rows,
    )?;
    let timing: Vec<Vec<String>> = summary
        .iter()
        .map(|(c, s)| {
            let mut r = keys(c);
            r.extend([fmt_num(s.time_median), fmt_num(s.time_p025), fmt_num(s.time_p975)]);
            r
        })
        .collect();
    write_rows(
        &out.join("sim_timing.csv"),
        &["family", "m", "nn", "d", "time_median", "time_p2_5", "time_p97_5"],
        &timing,
    )
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let conditions = study_conditions(cfg);
    let base = FitConfig {
        shared_signal: cfg.study.shared_signal,
        ..cfg.fit.clone()
    };
    info!(
        "simulation study: {} conditions x {} replicates",
        conditions.len(),
        cfg.simulate.replicates
    );
    let outcomes = run_study(&cfg.simulate, &conditions, &base)?;
    write_study_outputs(cfg.simulate.family, &outcomes, &conditions, out)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub ordering: OrderingMethod,
    /// `nngp`, `band` or `full`.
    pub rule: String,
    pub nn: usize,
    pub error: f64,
}

/// Approximation error ‖UᵀU C - I‖_F of the sparse factor of C for every
/// ordering × rule × nn (nn above m - 1 is skipped).
pub fn ordering_scan(tree: &PhyloTree, grid: &ScanGrid) -> Result<Vec<ScanRow>> {
    let corr = correlation_matrix(tree)?;
    let m = corr.dim();
    let per_method: Vec<Result<Vec<ScanRow>>> = grid
        .orderings
        .par_iter()
        .map(|&method| {
            let ord = ordering(&corr, tree, method)?;
            let mut rows = Vec::new();
            for &rule in &grid.rules {
                for &nn in grid.nn.iter().filter(|&&nn| nn < m) {
                    let sets = neighbor_sets(&corr, &ord, nn, rule)?;
                    let f = build_factor(&corr.matrix, &sets)?;
                    rows.push(ScanRow {
                        ordering: method,
                        rule: rule.to_string(),
                        nn,
                        error: approx_error(&corr, &f)?,
                    });
                }
            }
            if grid.full {
                let f = build_factor(&corr.matrix, &NeighborSets::full(&ord))?;
                rows.push(ScanRow {
                    ordering: method,
                    rule: "full".into(),
                    nn: m.saturating_sub(1),
                    error: approx_error(&corr, &f)?,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_method {
        all.extend(r?);
    }
    Ok(all)
}

fn cmd_ordering_scan(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let tree = read_tree(required(&cfg.input.tree, "tree")?)?;
    let rows: Vec<Vec<String>> = ordering_scan(&tree, &cfg.scan)?
        .into_iter()
        .map(|r| vec![r.ordering.to_string(), r.rule, r.nn.to_string(), fmt_num(r.error)])
        .collect();
    write_rows(&out.join("ordering_scan.csv"), &["ordering", "rule", "nn", "error"], &rows)?;
    Ok(EXIT_OK)
}

fn cmd_benchmark(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let proto = &cfg.simulate;
    let reps = cfg.benchmark.replicates.unwrap_or(proto.replicates);
    let grid: Vec<(usize, ArStructure)> = cfg
        .benchmark
        .d
        .iter()
        .flat_map(|&d| cfg.benchmark.ar.iter().map(move |&a| (d, a)))
        .collect();
    // Fits run one at a time so timings are not inflated by each other.
    let mut runs: Vec<Vec<(f64, FitResult)>> = vec![Vec::new(); grid.len()];
    for r in 0..reps {
        let sim = simulate_dataset(proto, proto.replicate_seed(r))?;
        for (g, &(d, ar)) in grid.iter().enumerate() {
            let config = FitConfig { d, ar, ..cfg.fit.clone() };
            let setup = PriorSetup::new(&sim.tree, &config)?;
            let f = fit_with(&sim.data, &setup, &config, None)?;
            runs[g].push((f.wall_time_secs, f));
        }
    }
    let mut timing = Vec::new();
    let mut detail = Vec::new();
    for (g, &(d, ar)) in grid.iter().enumerate() {
        for (r, (t, f)) in runs[g].iter().enumerate() {
            detail.push(vec![
                d.to_string(),
                ar.to_string(),
                r.to_string(),
                fmt_num(*t),
                fmt_num(f.elbo),
                f.iterations.to_string(),
                f.converged.to_string(),
            ]);
        }
        if runs[g].is_empty() {
            continue;
        }
        let times: Vec<f64> = runs[g].iter().map(|x| x.0).collect();
        let elbos: Vec<f64> = runs[g].iter().map(|x| x.1.elbo).collect();
        timing.push(vec![
            d.to_string(),
            ar.to_string(),
            runs[g].len().to_string(),
            fmt_num(quantile(&times, 0.5)),
            fmt_num(quantile(&times, 0.025)),
            fmt_num(quantile(&times, 0.975)),
            fmt_num(quantile(&elbos, 0.5)),
        ]);
    }
    write_rows(
        &out.join("timing.csv"),
        &["d", "ar", "replicates", "time_median", "time_p2_5", "time_p97_5", "median_elbo"],
        &timing,
    )?;
    write_rows(
        &out.join("benchmark_runs.csv"),
        &["d", "ar", "replicate", "time_secs", "elbo", "iterations", "converged"],
        &detail,
    )?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_rule() {
        assert_eq!(signal_display(0.04), "");
        assert_eq!(signal_display(0.05), "");
        assert_eq!(signal_display(0.051), "0.051");
        assert_eq!(signal_display(0.87654321), "0.876543");
    }

    #[test]
    fn config_file_parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml(
            "seed = 4\n[fit]\nnn = 3\nrule = \"band\"\nordering = \"root-distance\"\nar = \"diagonal\"\n[simulate]\nn = 10\nfamily = \"poisson\"\n[study]\nnn = [1, 5]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.fit.nn, 3);
        assert_eq!(cfg.fit.rule, NeighborRule::Band);
        assert_eq!(cfg.fit.ordering, OrderingMethod::RootDistance);
        assert_eq!(cfg.fit.ar, ArStructure::Diagonal);
        assert_eq!(cfg.simulate.family, Family::Poisson);
        assert_eq!(cfg.study.nn, vec![1, 5]);
        assert!(RunConfig::from_toml("[fit]\nbogus = 1\n").is_err());
    }

    #[test]
    fn flags_override_config() {
        let mut c = FitConfig::default();
        let flags = FitFlags {
            nn: Some(2),
            shared_signal: Some(true),
            ..Default::default()
        };
        flags.apply(&mut c);
        assert_eq!(c.nn, 2);
        assert!(c.shared_signal);
        assert_eq!(c.d, FitConfig::default().d);
    }

    #[test]
    fn alignment_reports_offenders() {
        let tips: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let names: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(align(&names, &tips).unwrap(), vec![1, 2, 0]);
        let bad: Vec<String> = ["a", "b", "z"].iter().map(|s| s.to_string()).collect();
        match align(&bad, &tips) {
            Err(Error::SpeciesMismatch(v)) => assert_eq!(v, vec!["c", "z"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn star_tree_scan_is_exact() {
        let tree = parse_newick("(a:1,b:1,c:1,d:1);").unwrap();
        let rows = ordering_scan(&tree, &ScanGrid::default()).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.error < 1e-12));
    }
}
