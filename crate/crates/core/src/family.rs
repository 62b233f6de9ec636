//! Response families and expectations of the log-likelihood under a
//! Gaussian linear predictor η ~ N(μ, v).

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bernoulli,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Probit,
    Logit,
    Log,
}

impl Family {
    pub fn default_link(self) -> Link {
        match self {
            Family::Bernoulli => Link::Probit,
            Family::Poisson => Link::Log,
        }
    }

    pub fn supports(self, link: Link) -> bool {
        matches!(
            (self, link),
            (Family::Bernoulli, Link::Probit) | (Family::Bernoulli, Link::Logit) | (Family::Poisson, Link::Log)
        )
    }

    pub fn valid_response(self, y: f64) -> bool {
        match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "binary" | "binomial" => Ok(Family::Bernoulli),
            "poisson" | "count" => Ok(Family::Poisson),
            _ => Err(Error::InvalidConfig(format!("unknown family '{s}'"))),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Probit => "probit",
            Link::Logit => "logit",
            Link::Log => "log",
        })
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "probit" => Ok(Link::Probit),
            "logit" => Ok(Link::Logit),
            "log" => Ok(Link::Log),
            _ => Err(Error::InvalidConfig(format!("unknown link '{s}'"))),
        }
    }
}

pub const GH_NODES: usize = 20;

/// Gauss–Hermite rule for weight e^{-x²} (Golub–Welsch), weights divided
/// by √π so they sum to one.
pub fn gauss_hermite() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GH_NODES;
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jac[(k, k - 1)] = b;
            jac[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(jac);
        let mut rule: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        rule.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove eigensolver noise.
        for i in 0..n / 2 {
            let x = 0.5 * (rule[n - 1 - i].0 - rule[i].0);
            let w = 0.5 * (rule[n - 1 - i].1 + rule[i].1);
            rule[i] = (-x, w);
            rule[n - 1 - i] = (x, w);
        }
        let total: f64 = rule.iter().map(|r| r.1).sum();
        rule.iter_mut().for_each(|r| r.1 /= total);
        rule
    })
}

/// log Φ(z), accurate in both tails.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z < -30.0 {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2) + 105.0 / (z2 * z2 * z2 * z2);
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    } else if z < 0.0 {
        (0.5 * erfc(-z / SQRT_2)).ln()
    } else {
        (-0.5 * erfc(z / SQRT_2)).ln_1p()
    }
}

fn log_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * PI).ln()
}

/// Inverse Mills ratio φ(z)/Φ(z).
pub fn inv_mills(z: f64) -> f64 {
    (log_norm_pdf(z) - log_norm_cdf(z)).exp()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log f(y | η) with its first two derivatives in η, for the Bernoulli links.
fn bernoulli_terms(link: Link, y: f64, eta: f64) -> (f64, f64, f64) {
    match link {
        Link::Logit => {
            let p = logistic(eta);
            (y * eta - softplus(eta), y - p, -p * (1.0 - p))
        }
        _ => {
            let s = if y > 0.5 { 1.0 } else { -1.0 };
            let z = s * eta;
            let lc = log_norm_cdf(z);
            let lam = (log_norm_pdf(z) - lc).exp();
            (lc, s * lam, -lam * (z + lam))
        }
    }
}

fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        0.0
    } else {
        ln_gamma(y + 1.0)
    }
}

/// Plain log-likelihood at a fixed linear predictor.
pub fn log_lik(family: Family, link: Link, y: f64, eta: f64) -> f64 {
    match family {
        Family::Poisson => y * eta - eta.exp() - ln_factorial(y),
        Family::Bernoulli => bernoulli_terms(link, y, eta).0,
    }
}

/// E[log f(y | η)], η ~ N(μ, v), and its partial derivatives in μ and v.
///
/// Poisson/log is closed form. Bernoulli uses the 20-node Gauss–Hermite rule;
/// the v-derivative is the exact derivative of that rule (so value and
/// gradient agree), falling back to ½E[∂²log f/∂η²] as v → 0.
/// Inputs are not validated.
pub fn expected_loglik_parts(family: Family, link: Link, y: f64, mu: f64, v: f64) -> (f64, f64, f64) {
    match family {
        Family::Poisson => {
            let e = (mu + 0.5 * v).exp();
            (y * mu - e - ln_factorial(y), y - e, -0.5 * e)
        }
        Family::Bernoulli => {
            let sd = (2.0 * v).sqrt();
            let (mut val, mut dmu, mut d2, mut dx) = (0.0, 0.0, 0.0, 0.0);
            for &(x, w) in gauss_hermite() {
                let (h, h1, h2) = bernoulli_terms(link, y, mu + sd * x);
                val += w * h;
                dmu += w * h1;
                d2 += w * h2;
                dx += w * h1 * x;
            }
            let dv = if v > 1e-12 { dx / sd } else { 0.5 * d2 };
            (val, dmu, dv)
        }
    }
}

/// E[log f(y | η)] for η ~ N(μ, v), validated.
pub fn expected_loglik(family: Family, link: Link, y: f64, mu: f64, v: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::InvalidData(format!("negative predictor variance {v}")));
    }
    if !family.supports(link) {
        return Err(Error::InvalidConfig(format!("link {link} not available for {family}")));
    }
    if !family.valid_response(y) {
        return Err(Error::InvalidData(format!("response {y} invalid for {family}")));
    }
    Ok(expected_loglik_parts(family, link, y, mu, v).0)
}

/// Inverse link.
pub fn mean_response(link: Link, eta: f64) -> f64 {
    match link {
        Link::Probit => 0.5 * erfc(-eta / SQRT_2),
        Link::Logit => logistic(eta),
        Link::Log => eta.exp(),
    }
}
