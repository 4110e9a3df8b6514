//! Discrete laws on `{0, 1, 2, ...}`: construction, moments, exact sampling,
//! size-biasing and thinning.
//!
//! A [`LawHandle`] keeps a dense pmf table over a window that covers all but
//! `1e-15` of the mass; sampling is inversion against the cumulative table,
//! with the (rare) tail handled by walking the pmf past the window.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

/// Offspring laws count as critical when `|mean - 1|` is at most this.
pub const CRITICAL_TOL: f64 = 1e-9;
/// Finite pmfs off by at most this much are renormalized, otherwise rejected.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Mass left outside the pmf table.
const WINDOW_TAIL: f64 = 1e-15;
/// Hard limit on the table length; laws needing more are rejected.
const MAX_WINDOW: usize = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("invalid distribution spec: {0}")]
    InvalidSpec(String),
    #[error("offspring law has mean {mean}, expected 1")]
    NotCritical { mean: f64 },
    #[error("thinning parameter {0} outside [0, 1]")]
    ThinningOutOfRange(f64),
}

/// A user-facing description of a law. This is the serialized form used in
/// experiment configs, e.g. `{"family":"poisson","rate":0.25}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum DistSpec {
    Poisson {
        rate: f64,
    },
    /// Geometric on `{0, 1, ...}` with success probability `p`:
    /// `P(k) = (1-p)^k p`.
    Geometric {
        p: f64,
    },
    Binomial {
        trials: u32,
        p: f64,
    },
    Finite {
        pmf: Vec<(u64, f64)>,
    },
}

impl DistSpec {
    /// Parses the CLI shorthand `family:params`, e.g. `poisson:0.25`,
    /// `geometric:0.5`, `binomial:2,0.5`, `finite:0=0.5,2=0.5`.
    pub fn parse_shorthand(s: &str) -> Result<DistSpec, DistError> {
        let bad = |msg: &str| DistError::InvalidSpec(format!("{s:?}: {msg}"));
        let (family, params) = s
            .split_once(':')
            .ok_or_else(|| bad("expected family:params"))?;
        let num = |t: &str| -> Result<f64, DistError> {
            t.trim().parse::<f64>().map_err(|_| bad("bad number"))
        };
        match family.trim() {
            "poisson" => Ok(DistSpec::Poisson { rate: num(params)? }),
            "geometric" => Ok(DistSpec::Geometric { p: num(params)? }),
            "binomial" => {
                let (n, p) = params
                    .split_once(',')
                    .ok_or_else(|| bad("expected trials,p"))?;
                let trials = n
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| bad("bad trial count"))?;
                Ok(DistSpec::Binomial { trials, p: num(p)? })
            }
            "finite" => {
                let mut pmf = Vec::new();
                for entry in params.split(',') {
                    let (v, p) = entry
                        .split_once('=')
                        .ok_or_else(|| bad("expected value=prob"))?;
                    let v = v.trim().parse::<u64>().map_err(|_| bad("bad value"))?;
                    pmf.push((v, num(p)?));
                }
                Ok(DistSpec::Finite { pmf })
            }
            _ => Err(bad("unknown family")),
        }
    }

    /// Inverse of [`DistSpec::parse_shorthand`].
    pub fn shorthand(&self) -> String {
        match self {
            DistSpec::Poisson { rate } => format!("poisson:{rate}"),
            DistSpec::Geometric { p } => format!("geometric:{p}"),
            DistSpec::Binomial { trials, p } => format!("binomial:{trials},{p}"),
            DistSpec::Finite { pmf } => {
                let parts: Vec<String> = pmf.iter().map(|(v, p)| format!("{v}={p}")).collect();
                format!("finite:{}", parts.join(","))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum LawKind {
    Poisson { rate: f64 },
    Geometric { p: f64 },
    Binomial,
    Finite,
    Thinned { base: LawHandle, t: f64 },
    SizeBiased { base: LawHandle },
}

/// An immutable, validated law. Cheap to clone and safe to share.
#[derive(Clone, Debug)]
pub struct LawHandle(Arc<LawInner>);

#[derive(Debug)]
struct LawInner {
    kind: LawKind,
    spec: Option<DistSpec>,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
    /// Largest value with positive mass, when the support is bounded.
    support_max: Option<u64>,
    mean: f64,
    variance: f64,
}

/// Summary of an offspring law used to gate the tree samplers.
#[derive(Clone, Debug, PartialEq)]
pub struct OffspringReport {
    pub mean: f64,
    pub variance: f64,
    pub is_critical: bool,
    /// Span of the support lattice; total progeny sizes live in `1 + period·ℕ`.
    pub period: u64,
    pub is_delta1: bool,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Builds a pmf table from a sequential generator, stopping once the mass
/// left over is below `WINDOW_TAIL` (and the mode has been passed).
fn unbounded_table(mean: f64, mut next: impl FnMut(u64) -> f64) -> Result<Vec<f64>, DistError> {
    let mut table = Vec::new();
    let mut cum = 0.0;
    let mut k = 0u64;
    loop {
        let p = next(k);
        table.push(p);
        cum += p;
        if cum >= 1.0 - WINDOW_TAIL && (k as f64) >= mean {
            break;
        }
        // Past the bulk the terms decay; stop once they vanish numerically.
        if p == 0.0 && (k as f64) > 2.0 * mean + 64.0 {
            break;
        }
        k += 1;
        if table.len() >= MAX_WINDOW {
            return Err(DistError::InvalidSpec(
                "law too spread out to tabulate".into(),
            ));
        }
    }
    Ok(table)
}

impl LawHandle {
    fn from_parts(
        kind: LawKind,
        spec: Option<DistSpec>,
        pmf: Vec<f64>,
        support_max: Option<u64>,
        mean: f64,
        variance: f64,
    ) -> LawHandle {
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for &p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        LawHandle(Arc::new(LawInner {
            kind,
            spec,
            pmf,
            cdf,
            support_max,
            mean,
            variance,
        }))
    }

    /// The spec this law was built from, if it is a base family.
    pub fn spec(&self) -> Option<&DistSpec> {
        self.0.spec.as_ref()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean
    }

    pub fn variance(&self) -> f64 {
        self.0.variance
    }

    pub fn has_finite_variance(&self) -> bool {
        self.0.variance.is_finite()
    }

    /// Largest value with positive mass, if the support is bounded.
    pub fn support_max(&self) -> Option<u64> {
        self.0.support_max
    }

    /// The tabulated pmf window `P(0), P(1), ...`.
    pub fn pmf_table(&self) -> &[f64] {
        &self.0.pmf
    }

    pub fn pmf(&self, k: u64) -> f64 {
        if let Some(&p) = self.0.pmf.get(k as usize) {
            return p;
        }
        if matches!(self.0.support_max, Some(max) if k > max) {
            return 0.0;
        }
        self.tail_pmf(k)
    }

    fn tail_pmf(&self, k: u64) -> f64 {
        match &self.0.kind {
            LawKind::Poisson { rate } => {
                if *rate == 0.0 {
                    0.0
                } else {
                    ((k as f64) * rate.ln() - rate - ln_factorial(k)).exp()
                }
            }
            LawKind::Geometric { p } => (1.0 - p).powf(k as f64) * p,
            LawKind::Binomial | LawKind::Finite => 0.0,
            LawKind::Thinned { base, t } => {
                if k == 0 {
                    (1.0 - t) + t * base.pmf(0)
                } else {
                    t * base.pmf(k)
                }
            }
            LawKind::SizeBiased { base } => k as f64 * base.pmf(k),
        }
    }

    /// Draws one value by exact inversion of the cdf.
    #[inline]
    pub fn sample(&self, rng: &mut RngStream) -> u64 {
        let u = rng.uniform();
        let cdf = &self.0.cdf;
        let k = if cdf.len() <= 32 {
            cdf.iter().position(|&c| u < c).unwrap_or(cdf.len())
        } else {
            cdf.partition_point(|&c| c <= u)
        };
        if k < cdf.len() {
            return k as u64;
        }
        self.sample_tail(u)
    }

    #[cold]
    fn sample_tail(&self, u: f64) -> u64 {
        let mut acc = *self.0.cdf.last().unwrap_or(&0.0);
        let mut k = self.0.cdf.len() as u64;
        let limit = self.0.support_max.unwrap_or(u64::MAX);
        loop {
            if k >= limit {
                return limit;
            }
            let p = self.tail_pmf(k);
            acc += p;
            if u < acc || (p == 0.0 && k as f64 > 4.0 * self.0.mean + 1e4) {
                return k;
            }
            k += 1;
        }
    }

    /// Short human-readable description.
    pub fn describe(&self) -> String {
        match (&self.0.spec, &self.0.kind) {
            (Some(spec), _) => spec.shorthand(),
            (None, LawKind::Thinned { base, t }) => format!("thin({}, {t})", base.describe()),
            (None, LawKind::SizeBiased { base }) => format!("sizebiased({})", base.describe()),
            (None, _) => "law".to_string(),
        }
    }

    pub fn is_delta(&self, value: u64) -> bool {
        (self.pmf(value) - 1.0).abs() <= NORMALIZATION_TOL
    }
}

impl fmt::Display for LawHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Validates a spec and builds its law, with closed-form moments.
pub fn make_law(spec: &DistSpec) -> Result<LawHandle, DistError> {
    let invalid = |msg: String| Err(DistError::InvalidSpec(msg));
    match *spec {
        DistSpec::Poisson { rate } => {
            if !(rate.is_finite() && rate >= 0.0) {
                return invalid(format!("poisson rate must be >= 0, got {rate}"));
            }
            if rate > 700.0 {
                return invalid(format!("poisson rate {rate} too large to tabulate"));
            }
            let mut p = (-rate).exp();
            let table = unbounded_table(rate, |k| {
                if k > 0 {
                    p *= rate / k as f64;
                }
                p
            })?;
            let support_max = (rate == 0.0).then_some(0);
            Ok(LawHandle::from_parts(
                LawKind::Poisson { rate },
                Some(spec.clone()),
                table,
                support_max,
                rate,
                rate,
            ))
        }
        DistSpec::Geometric { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return invalid(format!(
                    "geometric success probability must be in (0, 1], got {p}"
                ));
            }
            let q = 1.0 - p;
            let mean = q / p;
            let mut term = p;
            let table = unbounded_table(mean, |k| {
                if k > 0 {
                    term *= q;
                }
                term
            })?;
            let support_max = (p == 1.0).then_some(0);
            Ok(LawHandle::from_parts(
                LawKind::Geometric { p },
                Some(spec.clone()),
                table,
                support_max,
                mean,
                q / (p * p),
            ))
        }
        DistSpec::Binomial { trials, p } => {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("binomial probability must be in [0, 1], got {p}"));
            }
            if trials as usize >= MAX_WINDOW {
                return invalid(format!("binomial trial count {trials} too large"));
            }
            let n = trials as usize;
            let mut table = vec![0.0; n + 1];
            if p == 0.0 {
                table[0] = 1.0;
            } else if p == 1.0 {
                table[n] = 1.0;
            } else {
                let ratio = p / (1.0 - p);
                let mut term = (n as f64 * (1.0 - p).ln()).exp();
                for (k, slot) in table.iter_mut().enumerate() {
                    if k > 0 {
                        term *= (n - k + 1) as f64 / k as f64 * ratio;
                    }
                    *slot = term;
                }
            }
            let last = table.iter().rposition(|&x| x > 0.0).unwrap_or(0);
            table.truncate(last + 1);
            let mean = n as f64 * p;
            Ok(LawHandle::from_parts(
                LawKind::Binomial,
                Some(spec.clone()),
                table,
                Some(last as u64),
                mean,
                mean * (1.0 - p),
            ))
        }
        DistSpec::Finite { ref pmf } => {
            if pmf.is_empty() {
                return invalid("finite pmf is empty".into());
            }
            let max = pmf.iter().map(|&(v, _)| v).max().unwrap_or(0);
            if max as usize >= MAX_WINDOW {
                return invalid(format!("finite pmf value {max} too large"));
            }
            let mut table = vec![0.0; max as usize + 1];
            for &(v, p) in pmf {
                if !(p.is_finite() && p >= 0.0) {
                    return invalid(format!(
                        "probability {p} for value {v} is not a nonnegative number"
                    ));
                }
                table[v as usize] += p;
            }
            let total: f64 = table.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return invalid(format!("finite pmf sums to {total}, not 1"));
            }
            table.iter_mut().for_each(|p| *p /= total);
            let last = table.iter().rposition(|&x| x > 0.0).unwrap_or(0);
            table.truncate(last + 1);
            let (mean, variance) = table_moments(&table);
            Ok(LawHandle::from_parts(
                LawKind::Finite,
                Some(spec.clone()),
                table,
                Some(last as u64),
                mean,
                variance,
            ))
        }
    }
}

/// Mean and variance of a tabulated pmf (compensated sums).
fn table_moments(table: &[f64]) -> (f64, f64) {
    let mean: f64 = table.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let var: f64 = table
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = k as f64 - mean;
            d * d * p
        })
        .sum();
    (mean, var)
}

/// The size-biased law `k ↦ k·ν_k` of a critical offspring law.
pub fn size_biased(offspring: &LawHandle) -> Result<LawHandle, DistError> {
    let mean = offspring.mean();
    if (mean - 1.0).abs() > CRITICAL_TOL {
        return Err(DistError::NotCritical { mean });
    }
    let big_sigma2 = offspring.variance();
    let target_mean = big_sigma2 + 1.0;
    let (table, support_max) = match offspring.support_max() {
        Some(max) => {
            let t: Vec<f64> = (0..=max).map(|k| k as f64 * offspring.pmf(k)).collect();
            (t, Some(max))
        }
        None => (
            unbounded_table(target_mean, |k| k as f64 * offspring.pmf(k))?,
            None,
        ),
    };
    // Mean is exactly Σ²+1; the variance needs a third moment, so sum it.
    let (_, variance) = table_moments(&table);
    Ok(LawHandle::from_parts(
        LawKind::SizeBiased {
            base: offspring.clone(),
        },
        None,
        table,
        support_max,
        target_mean,
        variance,
    ))
}

/// The thinned law `(1-t)·δ₀ + t·μ`.
pub fn thin(cars: &LawHandle, t: f64) -> Result<LawHandle, DistError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DistError::ThinningOutOfRange(t));
    }
    let base = cars.pmf_table();
    let mut table: Vec<f64> = base.iter().map(|p| t * p).collect();
    table[0] += 1.0 - t;
    let support_max = if t == 0.0 {
        Some(0)
    } else {
        cars.support_max()
    };
    if t == 0.0 {
        table.truncate(1);
    }
    let m = cars.mean();
    Ok(LawHandle::from_parts(
        LawKind::Thinned {
            base: cars.clone(),
            t,
        },
        None,
        table,
        support_max,
        t * m,
        t * cars.variance() + t * (1.0 - t) * m * m,
    ))
}

/// Draws one value; see [`LawHandle::sample`].
pub fn sample(law: &LawHandle, rng: &mut RngStream) -> u64 {
    law.sample(rng)
}

pub fn check_offspring(law: &LawHandle) -> OffspringReport {
    let table = law.pmf_table();
    let mut first: Option<u64> = None;
    let mut period = 0u64;
    for (k, &p) in table.iter().enumerate() {
        if p > 0.0 {
            match first {
                None => first = Some(k as u64),
                Some(f) => period = gcd(period, k as u64 - f),
            }
        }
    }
    // Unbounded families have consecutive support, so the window decides.
    OffspringReport {
        mean: law.mean(),
        variance: law.variance(),
        is_critical: (law.mean() - 1.0).abs() <= CRITICAL_TOL,
        period: period.max(1),
        is_delta1: law.is_delta(1),
    }
}
