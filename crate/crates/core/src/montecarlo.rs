//! Monte Carlo estimators with standard errors.
//!
//! Replicate `i` of an estimator draws only from stream `(seed, domain, i)`
//! (see [`crate::rng`]), and per-replicate results are merged in index
//! order, so every estimate is bit-identical for any number of workers.
//!
//! Unconditioned critical trees have infinite mean size. Their estimators
//! take a vertex cap, exclude and count overflowed replicates, and rerun the
//! overflowed ones at twice the cap on the same streams; the shift between
//! the two estimates is reported.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DistError, DistSpec, LawHandle};
use crate::parking::flux_from_degrees;
use crate::rng::{domain, RngStream};
use crate::theory::{self, Extended, ModelParams, RegimeKind, TheoryError};
use crate::trees::{self, gw_degrees_into, KestenSampler, TreeError, Truncation};

pub const DEFAULT_CAP: usize = 1_000_000;
/// Flux above which a replicate of an infinite-tree estimator counts as
/// diverged.
pub const DIVERGENCE_THRESHOLD: u64 = 1_000;
/// Fraction of diverged replicates that raises the `diverged` flag.
pub const DIVERGENCE_PREVALENCE: f64 = 0.01;
pub const MOM_BLOCKS: usize = 16;
/// Sample excess kurtosis above which standard errors switch to
/// median-of-means.
pub const KURTOSIS_TRIP: f64 = 1_000.0;
/// The walk estimator wants a flux pool at least this many times larger
/// than the number of pool draws it makes.
pub const POOL_FACTOR: f64 = 10.0;
/// Largest generation size explored by [`spinal_check`].
const GENERATION_CAP: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("all {replicates} replicates overflowed the vertex cap")]
    AllOverflowed { replicates: u64 },
    #[error("at least one replicate is required")]
    NoReplicates,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMethod {
    SampleSd,
    MedianOfMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub std_error: f64,
    /// Replicates attempted, overflowed ones included.
    pub replicates: u64,
    pub overflow_count: u64,
    pub diverged: bool,
    pub seed: u64,
    pub se_method: SeMethod,
}

impl Estimate {
    /// Summarizes the values of the non-overflowed replicates.
    pub fn from_values(
        values: &[f64],
        replicates: u64,
        seed: u64,
    ) -> Result<Estimate, EstimateError> {
        if replicates == 0 {
            return Err(EstimateError::NoReplicates);
        }
        if values.is_empty() {
            return Err(EstimateError::AllOverflowed { replicates });
        }
        let (point, std_error, se_method) = summarize(values);
        Ok(Estimate {
            point,
            std_error,
            replicates,
            overflow_count: replicates - values.len() as u64,
            diverged: false,
            seed,
            se_method,
        })
    }

    pub fn used(&self) -> u64 {
        self.replicates - self.overflow_count
    }

    pub fn overflow_fraction(&self) -> f64 {
        self.overflow_count as f64 / self.replicates as f64
    }

    /// `|point - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.point - target).abs() / self.std_error
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance (n - 1 denominator) and excess kurtosis.
fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = mean(values);
    let (mut s2, mut s4) = (0.0, 0.0);
    for &v in values {
        let d = (v - mu) * (v - mu);
        s2 += d;
        s4 += d * d;
    }
    if s2 == 0.0 || values.len() < 2 {
        return (0.0, 0.0);
    }
    (s2 / (n - 1.0), n * s4 / (s2 * s2) - 3.0)
}

fn summarize(values: &[f64]) -> (f64, f64, SeMethod) {
    let n = values.len();
    let (var, kurtosis) = moments(values);
    if n >= 8 * MOM_BLOCKS && kurtosis > KURTOSIS_TRIP {
        let blocks: Vec<f64> = (0..MOM_BLOCKS)
            .map(|b| mean(&values[b * n / MOM_BLOCKS..(b + 1) * n / MOM_BLOCKS]))
            .collect();
        let mut sorted = blocks.clone();
        sorted.sort_by(f64::total_cmp);
        let point = 0.5 * (sorted[MOM_BLOCKS / 2 - 1] + sorted[MOM_BLOCKS / 2]);
        let (block_var, _) = moments(&blocks);
        let se = (std::f64::consts::FRAC_PI_2 * block_var / MOM_BLOCKS as f64).sqrt();
        return (point, se, SeMethod::MedianOfMeans);
    }
    (mean(values), (var / n as f64).sqrt(), SeMethod::SampleSd)
}

fn run_replicates<T, S>(
    seed: u64,
    domain: u64,
    reps: u64,
    init: impl Fn() -> S + Sync + Send,
    f: impl Fn(&mut S, &mut RngStream) -> T + Sync + Send,
) -> Vec<T>
where
    T: Send,
{
    (0..reps as usize)
        .into_par_iter()
        .map_init(init, |state, i| {
            f(state, &mut RngStream::derive(seed, domain, i as u64))
        })
        .collect()
}

fn run_indices<T, S>(
    seed: u64,
    domain: u64,
    indices: &[u64],
    init: impl Fn() -> S + Sync + Send,
    f: impl Fn(&mut S, &mut RngStream) -> T + Sync + Send,
) -> Vec<T>
where
    T: Send,
{
    indices
        .par_iter()
        .map_init(init, |state, &i| {
            f(state, &mut RngStream::derive(seed, domain, i))
        })
        .collect()
}

#[derive(Default)]
struct Scratch {
    degrees: Vec<u32>,
    spine: Vec<usize>,
    counts: Vec<u32>,
    stack: Vec<u64>,
}

impl Scratch {
    fn label_and_park(&mut self, cars: &LawHandle, rng: &mut RngStream) -> (u64, bool) {
        self.counts.clear();
        self.counts
            .extend((0..self.degrees.len()).map(|_| cars.sample(rng) as u32));
        flux_from_degrees(&self.degrees, &self.counts, &mut self.stack)
    }
}

/// Flux and root occupancy of one parked unconditioned tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GwOutcome {
    pub flux: u64,
    pub root_parked: bool,
    pub size: usize,
}

/// One replicate: the tree's degrees, then one label per vertex in preorder,
/// then the flux. Draws the same numbers as `sample_gw` followed by
/// `assign_arrivals`.
fn gw_parking_replicate(
    offspring: &LawHandle,
    cars: &LawHandle,
    cap: usize,
    rng: &mut RngStream,
    scratch: &mut Scratch,
) -> Option<GwOutcome> {
    scratch.degrees.clear();
    if !gw_degrees_into(offspring, rng, cap, &mut scratch.degrees) {
        return None;
    }
    let (flux, root_parked) = scratch.label_and_park(cars, rng);
    Some(GwOutcome {
        flux,
        root_parked,
        size: scratch.degrees.len(),
    })
}

/// Parked unconditioned trees at `cap`, with the overflowed replicates
/// rerun at `2·cap` on their own streams.
#[derive(Clone, Debug)]
pub struct GwParkingRun {
    pub seed: u64,
    pub cap: usize,
    pub outcomes: Vec<Option<GwOutcome>>,
    /// `(replicate, outcome at 2·cap)` for every replicate overflowed at `cap`.
    pub reruns: Vec<(u64, Option<GwOutcome>)>,
}

/// Estimate at the cap, the same estimate at twice the cap, and whether the
/// two differ by a standard error or more.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CappedEstimate {
    pub estimate: Estimate,
    pub doubled: Estimate,
    pub shift: f64,
    pub cap_sensitive: bool,
}

pub fn run_gw_parking(
    offspring: &LawHandle,
    cars: &LawHandle,
    reps: u64,
    cap: usize,
    seed: u64,
) -> Result<GwParkingRun, EstimateError> {
    trees::require_offspring(offspring)?;
    if reps == 0 {
        return Err(EstimateError::NoReplicates);
    }
    if cap == 0 {
        return Err(EstimateError::InvalidConfig("cap must be positive".into()));
    }
    let d = domain::UNCONDITIONED;
    let outcomes = run_replicates(seed, d, reps, Scratch::default, |s, rng| {
        gw_parking_replicate(offspring, cars, cap, rng, s)
    });
    let overflowed: Vec<u64> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_none())
        .map(|(i, _)| i as u64)
        .collect();
    let doubled_cap = cap.saturating_mul(2);
    let rerun = run_indices(seed, d, &overflowed, Scratch::default, |s, rng| {
        gw_parking_replicate(offspring, cars, doubled_cap, rng, s)
    });
    Ok(GwParkingRun {
        seed,
        cap,
        outcomes,
        reruns: overflowed.into_iter().zip(rerun).collect(),
    })
}

impl GwParkingRun {
    pub fn replicates(&self) -> u64 {
        self.outcomes.len() as u64
    }

    pub fn overflow_fraction(&self) -> f64 {
        self.reruns.len() as f64 / self.outcomes.len() as f64
    }

    fn capped(&self, f: impl Fn(&GwOutcome) -> f64) -> Result<CappedEstimate, EstimateError> {
        let values: Vec<f64> = self.outcomes.iter().flatten().map(&f).collect();
        let estimate = Estimate::from_values(&values, self.replicates(), self.seed)?;
        let mut doubled_values: Vec<f64> = Vec::with_capacity(values.len() + self.reruns.len());
        let mut reruns = self.reruns.iter().peekable();
        for (i, o) in self.outcomes.iter().enumerate() {
            let o = match o {
                Some(o) => Some(o),
                None => reruns
                    .next()
                    .filter(|(j, _)| *j == i as u64)
                    .and_then(|(_, r)| r.as_ref()),
            };
            doubled_values.extend(o.map(&f));
        }
        let doubled = Estimate::from_values(&doubled_values, self.replicates(), self.seed)?;
        let shift = doubled.point - estimate.point;
        let cap_sensitive = shift.abs() >= estimate.std_error && shift != 0.0;
        let estimate = Estimate {
            diverged: cap_sensitive,
            ..estimate
        };
        Ok(CappedEstimate {
            estimate,
            doubled,
            shift,
            cap_sensitive,
        })
    }

    pub fn mean_flux(&self) -> Result<CappedEstimate, EstimateError> {
        self.capped(|o| o.flux as f64)
    }

    pub fn root_parked(&self) -> Result<CappedEstimate, EstimateError> {
        self.capped(|o| if o.root_parked { 1.0 } else { 0.0 })
    }
}

/// `E[φ(T)]` over `reps` unconditioned trees.
pub fn estimate_mean_flux(
    offspring: &LawHandle,
    cars: &LawHandle,
    reps: u64,
    cap: usize,
    seed: u64,
) -> Result<CappedEstimate, EstimateError> {
    run_gw_parking(offspring, cars, reps, cap, seed)?.mean_flux()
}

/// `P(root of T holds a car)` over `reps` unconditioned trees.
pub fn estimate_root_parked_prob(
    offspring: &LawHandle,
    cars: &LawHandle,
    reps: u64,
    cap: usize,
    seed: u64,
) -> Result<CappedEstimate, EstimateError> {
    run_gw_parking(offspring, cars, reps, cap, seed)?.root_parked()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedFlux {
    /// Estimate of `E[φ(T_n)] / n`.
    pub estimate: Estimate,
    pub n: usize,
    pub fluxes: Vec<u64>,
    pub root_parked: Vec<bool>,
}

impl ConditionedFlux {
    pub fn median_flux(&self) -> f64 {
        let mut v = self.fluxes.clone();
        v.sort_unstable();
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2] as f64
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2]) as f64
        }
    }
}

/// `φ(T_n)/n` over `reps` trees conditioned on `n` vertices.
pub fn estimate_flux_conditioned(
    offspring: &LawHandle,
    cars: &LawHandle,
    n: usize,
    reps: u64,
    seed: u64,
) -> Result<ConditionedFlux, EstimateError> {
    trees::require_offspring(offspring)?;
    if !trees::is_admissible(offspring, n) {
        return Err(TreeError::Inadmissible(n).into());
    }
    if reps == 0 {
        return Err(EstimateError::NoReplicates);
    }
    let results = run_replicates(
        seed,
        domain::FLUX_CONDITIONED,
        reps,
        Scratch::default,
        |s, rng| {
            let tree = trees::sample_gw_conditioned(offspring, n, rng)?;
            s.degrees.clear();
            s.degrees.extend_from_slice(tree.degrees());
            Ok::<_, TreeError>(s.label_and_park(cars, rng))
        },
    );
    let mut fluxes = Vec::with_capacity(results.len());
    let mut root_parked = Vec::with_capacity(results.len());
    for r in results {
        let (f, p) = r?;
        fluxes.push(f);
        root_parked.push(p);
    }
    let per_n: Vec<f64> = fluxes.iter().map(|&f| f as f64 / n as f64).collect();
    let estimate = Estimate::from_values(&per_n, reps, seed)?;
    Ok(ConditionedFlux {
        estimate,
        n,
        fluxes,
        root_parked,
    })
}

/// Empirical law of the root flux of a family of infinite-tree replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct FluxDistribution {
    /// Fluxes of the non-overflowed replicates, in replicate order.
    pub values: Vec<u64>,
    pub replicates: u64,
    pub overflow_count: u64,
    pub diverged_count: u64,
    pub diverged: bool,
    pub seed: u64,
}

impl FluxDistribution {
    fn new(results: Vec<Option<u64>>, threshold: u64, seed: u64) -> Result<Self, EstimateError> {
        let replicates = results.len() as u64;
        let values: Vec<u64> = results.into_iter().flatten().collect();
        if values.is_empty() {
            return Err(EstimateError::AllOverflowed { replicates });
        }
        let diverged_count = values.iter().filter(|&&v| v > threshold).count() as u64;
        let diverged = diverged_count as f64 >= DIVERGENCE_PREVALENCE * values.len() as f64
            && diverged_count > 0;
        Ok(FluxDistribution {
            overflow_count: replicates - values.len() as u64,
            replicates,
            values,
            diverged_count,
            diverged,
            seed,
        })
    }

    pub fn mean(&self) -> Estimate {
        let v: Vec<f64> = self.values.iter().map(|&x| x as f64).collect();
        let (point, std_error, se_method) = summarize(&v);
        Estimate {
            point,
            std_error,
            replicates: self.replicates,
            overflow_count: self.overflow_count,
            diverged: self.diverged,
            seed: self.seed,
            se_method,
        }
    }

    pub fn histogram(&self) -> BTreeMap<u64, u64> {
        let mut h = BTreeMap::new();
        for &v in &self.values {
            *h.entry(v).or_insert(0) += 1;
        }
        h
    }

    /// Smallest value `x` with `F(x) >= q`.
    pub fn quantile(&self, q: f64) -> u64 {
        let mut v = self.values.clone();
        v.sort_unstable();
        let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[k - 1]
    }

    /// Two-sample Kolmogorov–Smirnov distance `sup_x |F(x) - G(x)|`.
    pub fn ks_distance(&self, other: &FluxDistribution) -> f64 {
        let (a, b) = (self.histogram(), other.histogram());
        let (na, nb) = (self.values.len() as f64, other.values.len() as f64);
        let mut keys: Vec<u64> = a.keys().chain(b.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let (mut fa, mut fb, mut sup) = (0.0f64, 0.0f64, 0.0f64);
        for k in keys {
            fa += *a.get(&k).unwrap_or(&0) as f64 / na;
            fb += *b.get(&k).unwrap_or(&0) as f64 / nb;
            sup = sup.max((fa - fb).abs());
        }
        sup
    }

    /// Total-variation distance between the two empirical laws.
    pub fn tv_distance(&self, other: &FluxDistribution) -> f64 {
        let (a, b) = (self.histogram(), other.histogram());
        let (na, nb) = (self.values.len() as f64, other.values.len() as f64);
        let mut keys: Vec<u64> = a.keys().chain(b.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        0.5 * keys
            .into_iter()
            .map(|k| {
                (*a.get(&k).unwrap_or(&0) as f64 / na - *b.get(&k).unwrap_or(&0) as f64 / nb).abs()
            })
            .sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfiniteConfig {
    /// Truncation height `H`.
    pub height: usize,
    pub reps: u64,
    pub cap: usize,
    pub seed: u64,
    pub divergence_threshold: u64,
}

impl InfiniteConfig {
    pub fn new(height: usize, reps: u64, seed: u64) -> Self {
        InfiniteConfig {
            height,
            reps,
            cap: DEFAULT_CAP,
            seed,
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

/// Root flux of Kesten's tree cut to the ball of radius `H`. The flux of
/// the ball is nondecreasing in `H` and tends to `φ(T_∞)`.
pub fn estimate_flux_infinite_direct(
    offspring: &LawHandle,
    cars: &LawHandle,
    cfg: &InfiniteConfig,
) -> Result<FluxDistribution, EstimateError> {
    let sampler = KestenSampler::new(offspring)?;
    if cfg.reps == 0 {
        return Err(EstimateError::NoReplicates);
    }
    let results = run_replicates(
        cfg.seed,
        domain::FLUX_INF_DIRECT,
        cfg.reps,
        Scratch::default,
        |s, rng| {
            let Scratch { degrees, spine, .. } = s;
            if !sampler.sample_degrees(cfg.height, rng, cfg.cap, Truncation::Ball, degrees, spine) {
                return None;
            }
            Some(s.label_and_park(cars, rng).0)
        },
    );
    FluxDistribution::new(results, cfg.divergence_threshold, cfg.seed)
}

/// Draws `Z = F_1 + … + F_{Y-1} + P` with `Y` size-biased, `F_i` resampled
/// from a pool of `φ(T)` draws, and `P` a car count.
#[derive(Clone, Debug)]
pub struct SpineIncrementSampler {
    size_biased: LawHandle,
    cars: LawHandle,
    pool: Arc<[u64]>,
}

impl SpineIncrementSampler {
    pub fn new(
        offspring: &LawHandle,
        cars: &LawHandle,
        pool: Vec<u64>,
    ) -> Result<Self, EstimateError> {
        let sampler = KestenSampler::new(offspring)?;
        if pool.is_empty() {
            return Err(EstimateError::InvalidConfig("empty flux pool".into()));
        }
        Ok(SpineIncrementSampler {
            size_biased: sampler.size_biased().clone(),
            cars: cars.clone(),
            pool: pool.into(),
        })
    }

    /// `(Z, number of pool draws)`.
    #[inline]
    pub fn draw_counted(&self, rng: &mut RngStream) -> (u64, u64) {
        let y = self.size_biased.sample(rng);
        let mut z = 0;
        for _ in 1..y {
            z += self.pool[rng.below(self.pool.len() as u64) as usize];
        }
        (z + self.cars.sample(rng), y - 1)
    }

    pub fn draw(&self, rng: &mut RngStream) -> u64 {
        self.draw_counted(rng).0
    }

    pub fn pool(&self) -> &[u64] {
        &self.pool
    }
}

/// The walk `W_h = Z_0 + … + Z_h - (h + 1)` and its running maximum.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WalkPath {
    partial: Vec<i64>,
    running_max: Vec<i64>,
}

impl WalkPath {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, z: u64) {
        let prev = self.partial.last().copied().unwrap_or(0);
        let w = prev + z as i64 - 1;
        let max = self.running_max.last().copied().unwrap_or(i64::MIN).max(w);
        self.partial.push(w);
        self.running_max.push(max);
    }

    pub fn len(&self) -> usize {
        self.partial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partial.is_empty()
    }

    pub fn increments(&self) -> impl Iterator<Item = i64> + '_ {
        let mut prev = 0;
        self.partial.iter().map(move |&w| {
            let d = w - prev;
            prev = w;
            d
        })
    }

    pub fn partial_sums(&self) -> &[i64] {
        &self.partial
    }

    /// `max_{h' <= h} W_{h'} ∨ 0`.
    pub fn flux_at(&self, h: usize) -> u64 {
        self.running_max[h].max(0) as u64
    }

    pub fn flux(&self) -> u64 {
        self.running_max.last().map_or(0, |&m| m.max(0) as u64)
    }
}

/// `Z_0, …, Z_H` from one stream.
pub fn sample_walk_path(
    sampler: &SpineIncrementSampler,
    height: usize,
    rng: &mut RngStream,
) -> WalkPath {
    let mut path = WalkPath::new();
    for _ in 0..=height {
        path.push(sampler.draw(rng));
    }
    path
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkConfig {
    pub height: usize,
    pub reps: u64,
    pub pool_size: u64,
    pub pool_cap: usize,
    pub seed: u64,
    pub divergence_threshold: u64,
}

impl WalkConfig {
    pub fn new(height: usize, reps: u64, pool_size: u64, seed: u64) -> Self {
        WalkConfig {
            height,
            reps,
            pool_size,
            pool_cap: DEFAULT_CAP,
            seed,
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolDiagnostics {
    pub requested: u64,
    pub size: usize,
    pub overflow_count: u64,
    pub consumed: u64,
    /// `consumed / size`.
    pub resampling_ratio: f64,
    /// Set when the pool is smaller than `POOL_FACTOR` times the draws.
    pub too_small: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkReport {
    pub distribution: FluxDistribution,
    /// `E[Z]`; the standard error includes the pool's own sampling error.
    pub z_mean: Estimate,
    pub pool: PoolDiagnostics,
}

/// Fluxes of `size` unconditioned trees, overflowed ones dropped.
pub fn build_flux_pool(
    offspring: &LawHandle,
    cars: &LawHandle,
    size: u64,
    cap: usize,
    seed: u64,
) -> Result<(Vec<u64>, u64), EstimateError> {
    trees::require_offspring(offspring)?;
    let results = run_replicates(seed, domain::FLUX_POOL, size, Scratch::default, |s, rng| {
        gw_parking_replicate(offspring, cars, cap, rng, s).map(|o| o.flux)
    });
    let overflow = results.iter().filter(|r| r.is_none()).count() as u64;
    Ok((results.into_iter().flatten().collect(), overflow))
}

/// `φ(T_∞) = sup_h W_h ∨ 0`, the supremum taken over `h <= H`.
pub fn estimate_flux_infinite_walk(
    offspring: &LawHandle,
    cars: &LawHandle,
    cfg: &WalkConfig,
) -> Result<WalkReport, EstimateError> {
    if cfg.reps == 0 || cfg.pool_size == 0 {
        return Err(EstimateError::NoReplicates);
    }
    let (pool, pool_overflow) =
        build_flux_pool(offspring, cars, cfg.pool_size, cfg.pool_cap, cfg.seed)?;
    if pool.is_empty() {
        return Err(EstimateError::AllOverflowed {
            replicates: cfg.pool_size,
        });
    }
    let sampler = SpineIncrementSampler::new(offspring, cars, pool)?;
    // Per replicate: (flux, Σz, Σz², pool draws).
    let results = run_replicates(
        cfg.seed,
        domain::FLUX_INF_WALK,
        cfg.reps,
        || (),
        |_, rng| {
            let (mut w, mut max) = (0i64, i64::MIN);
            let (mut sz, mut sz2, mut used) = (0.0, 0.0, 0u64);
            for _ in 0..=cfg.height {
                let (z, k) = sampler.draw_counted(rng);
                w += z as i64 - 1;
                max = max.max(w);
                sz += z as f64;
                sz2 += (z as f64) * (z as f64);
                used += k;
            }
            (max.max(0) as u64, sz, sz2, used)
        },
    );
    let n_z = (cfg.reps * (cfg.height as u64 + 1)) as f64;
    let (mut sz, mut sz2, mut consumed) = (0.0, 0.0, 0u64);
    for r in &results {
        sz += r.1;
        sz2 += r.2;
        consumed += r.3;
    }
    let z_point = sz / n_z;
    let z_var = ((sz2 - n_z * z_point * z_point) / (n_z - 1.0)).max(0.0);
    let pool_f: Vec<f64> = sampler.pool().iter().map(|&f| f as f64).collect();
    let (pool_var, _) = moments(&pool_f);
    let big_sigma2 = offspring.variance();
    let z_se = (z_var / n_z + big_sigma2 * big_sigma2 * pool_var / pool_f.len() as f64).sqrt();
    let z_mean = Estimate {
        point: z_point,
        std_error: z_se,
        replicates: n_z as u64,
        overflow_count: 0,
        diverged: false,
        seed: cfg.seed,
        se_method: SeMethod::SampleSd,
    };
    let size = sampler.pool().len();
    let resampling_ratio = consumed as f64 / size as f64;
    let pool = PoolDiagnostics {
        requested: cfg.pool_size,
        size,
        overflow_count: pool_overflow,
        consumed,
        resampling_ratio,
        too_small: resampling_ratio * POOL_FACTOR > 1.0,
    };
    let distribution = FluxDistribution::new(
        results.into_iter().map(|r| Some(r.0)).collect(),
        cfg.divergence_threshold,
        cfg.seed,
    )?;
    Ok(WalkReport {
        distribution,
        z_mean,
        pool,
    })
}

/// Test functional for the spinal decomposition, a function of the pointed
/// tree `Pruned(t, x)` (through the height of its point) and of `Top(t, x)`
/// (through its size).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinalFunctional {
    Zero,
    /// `1{|x| = height, |Top| = top_size}`.
    HeightTopSize {
        height: usize,
        top_size: usize,
    },
}

impl SpinalFunctional {
    pub fn eval(&self, point_height: usize, top_size: usize) -> f64 {
        match *self {
            SpinalFunctional::Zero => 0.0,
            SpinalFunctional::HeightTopSize {
                height,
                top_size: k,
            } => (point_height == height && top_size == k) as u8 as f64,
        }
    }

    /// Height beyond which the functional vanishes.
    fn support_height(&self) -> Option<usize> {
        match *self {
            SpinalFunctional::Zero => None,
            SpinalFunctional::HeightTopSize { height, .. } => Some(height),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinalReport {
    /// `E[Σ_{x ∈ T} F(Pruned(T, x), Top(T, x))]`.
    pub lhs: Estimate,
    /// `Σ_h E[F(Pruned(T_∞, S_h), T)]`, `T` independent of `T_∞`.
    pub rhs: Estimate,
}

impl SpinalReport {
    pub fn combined_se(&self) -> f64 {
        self.lhs.std_error.hypot(self.rhs.std_error)
    }

    pub fn difference(&self) -> f64 {
        self.lhs.point - self.rhs.point
    }
}

/// Two independent estimates of the two sides of the spinal decomposition.
///
/// The left side explores `T` generation by generation down to the support
/// height and then grows each subtree there only until it exceeds the size
/// the functional looks at. The right side samples the ball of radius `h₀`
/// of `T_∞`, prunes it at `S_h₀`, and pairs it with an independent `T`.
pub fn spinal_check(
    offspring: &LawHandle,
    functional: SpinalFunctional,
    reps: u64,
    seed: u64,
) -> Result<SpinalReport, EstimateError> {
    let kesten = KestenSampler::new(offspring)?;
    if reps == 0 {
        return Err(EstimateError::NoReplicates);
    }
    let Some(h0) = functional.support_height() else {
        let zeros = vec![0.0; reps as usize];
        let e = Estimate::from_values(&zeros, reps, seed)?;
        return Ok(SpinalReport {
            lhs: e.clone(),
            rhs: e,
        });
    };
    let top_cap = match functional {
        SpinalFunctional::HeightTopSize { top_size, .. } => top_size.max(1),
        SpinalFunctional::Zero => 1,
    };

    let lhs = run_replicates(seed, domain::SPINAL_LHS, reps, Vec::new, |buf, rng| {
        let mut generation: u64 = 1;
        for _ in 0..h0 {
            let mut next = 0u64;
            for _ in 0..generation {
                next += offspring.sample(rng);
            }
            generation = next;
            if generation > GENERATION_CAP {
                return None;
            }
        }
        let mut total = 0.0;
        for _ in 0..generation {
            buf.clear();
            // Sizes beyond `top_cap` only matter through `F = 0`; one extra
            // vertex is enough to tell.
            let size = if gw_degrees_into(offspring, rng, top_cap, buf) {
                buf.len()
            } else {
                top_cap + 1
            };
            total += functional.eval(h0, size);
        }
        Some(total)
    });
    let lhs_values: Vec<f64> = lhs.into_iter().flatten().collect();
    let lhs = Estimate::from_values(&lhs_values, reps, seed)?;

    let rhs = run_replicates(seed, domain::SPINAL_RHS, reps, Vec::new, |buf, rng| {
        let ball = kesten
            .sample(h0, rng, usize::MAX, Truncation::Ball)
            .complete()?;
        let pointed = trees::pruned(&ball.tree, ball.spine[h0]).ok()?;
        let point_height = pointed.tree.depth(pointed.point);
        buf.clear();
        let size = if gw_degrees_into(offspring, rng, top_cap, buf) {
            buf.len()
        } else {
            top_cap + 1
        };
        Some(functional.eval(point_height, size))
    });
    let rhs_values: Vec<f64> = rhs.into_iter().flatten().collect();
    let rhs = Estimate::from_values(&rhs_values, reps, seed)?;
    Ok(SpinalReport { lhs, rhs })
}

/// Car law family indexed by its mean, for sweeps over `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum CarFamily {
    Poisson,
    Geometric,
    Bernoulli,
    Binomial { trials: u32 },
}

impl CarFamily {
    /// `poisson`, `geometric`, `bernoulli` or `binomial:<trials>`.
    pub fn parse(s: &str) -> Result<CarFamily, DistError> {
        match s.trim().split_once(':') {
            None => match s.trim() {
                "poisson" => Ok(CarFamily::Poisson),
                "geometric" => Ok(CarFamily::Geometric),
                "bernoulli" => Ok(CarFamily::Bernoulli),
                other => Err(DistError::InvalidSpec(format!(
                    "unknown car family {other:?}"
                ))),
            },
            Some(("binomial", n)) => n
                .trim()
                .parse()
                .map(|trials| CarFamily::Binomial { trials })
                .map_err(|_| DistError::InvalidSpec(format!("bad trial count in {s:?}"))),
            Some(_) => Err(DistError::InvalidSpec(format!("unknown car family {s:?}"))),
        }
    }

    pub fn spec_with_mean(&self, m: f64) -> Result<DistSpec, DistError> {
        if !(m.is_finite() && m >= 0.0) {
            return Err(DistError::InvalidSpec(format!(
                "car mean {m} must be finite and >= 0"
            )));
        }
        let spec = match *self {
            CarFamily::Poisson => DistSpec::Poisson { rate: m },
            CarFamily::Geometric => DistSpec::Geometric { p: 1.0 / (1.0 + m) },
            CarFamily::Bernoulli => DistSpec::Binomial { trials: 1, p: m },
            CarFamily::Binomial { trials } => {
                if trials == 0 {
                    return Err(DistError::InvalidSpec(
                        "binomial family needs trials >= 1".into(),
                    ));
                }
                DistSpec::Binomial {
                    trials,
                    p: m / trials as f64,
                }
            }
        };
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub reps: u64,
    pub cap: usize,
    /// Size of the conditioned trees; `None` skips that column.
    pub conditioned_n: Option<usize>,
    pub conditioned_reps: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: f64,
    pub theta: Option<f64>,
    pub regime: Option<RegimeKind>,
    pub phi1_closed: Option<Extended>,
    pub mean_flux: Option<Estimate>,
    pub parked_prob: Option<Estimate>,
    pub flux_per_n: Option<Estimate>,
    pub overflow_frac: Option<f64>,
    pub cap_sensitive: bool,
    /// Master seed of this row: the sweep seed plus the row index.
    pub seed: u64,
    pub error: Option<String>,
}

/// One row per car mean in `grid`; failures are recorded in the row.
pub fn sweep(
    offspring: &LawHandle,
    family: CarFamily,
    grid: &[f64],
    cfg: &SweepConfig,
) -> Vec<SweepRow> {
    grid.iter()
        .enumerate()
        .map(|(i, &m)| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let mut row = SweepRow {
                m,
                theta: None,
                regime: None,
                phi1_closed: None,
                mean_flux: None,
                parked_prob: None,
                flux_per_n: None,
                overflow_frac: None,
                cap_sensitive: false,
                seed,
                error: None,
            };
            if let Err(e) = fill_row(offspring, family, cfg, &mut row) {
                row.error = Some(e.to_string());
            }
            row
        })
        .collect()
}

fn fill_row(
    offspring: &LawHandle,
    family: CarFamily,
    cfg: &SweepConfig,
    row: &mut SweepRow,
) -> Result<(), EstimateError> {
    let cars = crate::distributions::make_law(&family.spec_with_mean(row.m)?)?;
    let params = ModelParams::from_laws(&cars, offspring)?;
    let regime = theory::classify(&params);
    row.theta = Some(regime.theta);
    row.regime = Some(regime.kind);
    row.phi1_closed = theory::phi_closed_form(1.0, &params).ok();
    let run = run_gw_parking(offspring, &cars, cfg.reps, cfg.cap, row.seed)?;
    row.overflow_frac = Some(run.overflow_fraction());
    let flux = run.mean_flux()?;
    let parked = run.root_parked()?;
    row.cap_sensitive = flux.cap_sensitive || parked.cap_sensitive;
    row.mean_flux = Some(flux.estimate);
    row.parked_prob = Some(parked.estimate);
    if let Some(n) = cfg.conditioned_n {
        row.flux_per_n = Some(
            estimate_flux_conditioned(offspring, &cars, n, cfg.conditioned_reps, row.seed)?
                .estimate,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::make_law;
    use crate::parking::{assign_arrivals, park};

    fn law(s: &str) -> LawHandle {
        make_law(&DistSpec::parse_shorthand(s).unwrap()).unwrap()
    }

    #[test]
    fn summarize_plain_and_constant() {
        let (p, se, m) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(m, SeMethod::SampleSd);
        assert_eq!(summarize(&[7.0; 10]), (7.0, 0.0, SeMethod::SampleSd));
    }

    #[test]
    fn summarize_switches_on_heavy_tails() {
        let mut v = vec![0.0; 100_000];
        v[12_345] = 1e6;
        let (p, _, m) = summarize(&v);
        assert_eq!(m, SeMethod::MedianOfMeans);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn estimate_errors() {
        assert_eq!(
            Estimate::from_values(&[], 0, 1),
            Err(EstimateError::NoReplicates)
        );
        assert_eq!(
            Estimate::from_values(&[], 5, 1),
            Err(EstimateError::AllOverflowed { replicates: 5 })
        );
        let e = Estimate::from_values(&[1.0, 1.0], 5, 1).unwrap();
        assert_eq!(e.overflow_count, 3);
        assert_eq!(e.used(), 2);
    }

    #[test]
    fn fused_replicate_matches_composite_path() {
        let nu = law("poisson:1");
        let cars = law("poisson:0.4");
        let mut scratch = Scratch::default();
        for i in 0..300 {
            let mut a = RngStream::derive(5, 0, i);
            let mut b = a.clone();
            let fused = gw_parking_replicate(&nu, &cars, 5_000, &mut a, &mut scratch);
            let composite = trees::sample_gw(&nu, &mut b, 5_000)
                .unwrap()
                .complete()
                .map(|t| {
                    let l = assign_arrivals(&t, &cars, &mut b);
                    let r = park(&t, &l).unwrap();
                    GwOutcome {
                        flux: r.flux,
                        root_parked: r.occupied[0],
                        size: t.len(),
                    }
                });
            assert_eq!(fused, composite);
        }
    }

    #[test]
    fn no_cars_no_flux() {
        let nu = law("geometric:0.5");
        let zero = law("poisson:0");
        let e = estimate_mean_flux(&nu, &zero, 2_000, 10_000, 1).unwrap();
        assert_eq!(e.estimate.point, 0.0);
        assert!(!e.cap_sensitive);
        assert_eq!(
            estimate_root_parked_prob(&nu, &zero, 500, 10_000, 1)
                .unwrap()
                .estimate
                .point,
            0.0
        );
        assert_eq!(
            estimate_flux_conditioned(&nu, &zero, 50, 50, 1)
                .unwrap()
                .estimate
                .point,
            0.0
        );
        let d =
            estimate_flux_infinite_direct(&nu, &zero, &InfiniteConfig::new(20, 200, 1)).unwrap();
        assert!(d.values.iter().all(|&v| v == 0));
        let w = estimate_flux_infinite_walk(&nu, &zero, &WalkConfig::new(20, 200, 200, 1)).unwrap();
        assert!(w.distribution.values.iter().all(|&v| v == 0));
        assert_eq!(w.z_mean.point, 0.0);
    }

    #[test]
    fn overflow_is_counted_and_rerun() {
        let nu = law("poisson:1");
        let cars = law("poisson:0.25");
        let run = run_gw_parking(&nu, &cars, 2_000, 20, 3).unwrap();
        let overflowed = run.outcomes.iter().filter(|o| o.is_none()).count();
        assert!(overflowed > 0);
        assert_eq!(run.reruns.len(), overflowed);
        let e = run.mean_flux().unwrap();
        assert_eq!(e.estimate.overflow_count as usize, overflowed);
        assert!(e.doubled.overflow_count <= e.estimate.overflow_count);
        // Reruns continue the same trees: sizes exceed the first cap.
        for (_, r) in &run.reruns {
            if let Some(o) = r {
                assert!(o.size > 20 && o.size <= 40);
            }
        }
    }

    #[test]
    fn all_overflowed_is_an_error() {
        let nu = law("finite:0=0.001,1=0.998,2=0.001");
        let cars = law("poisson:0.25");
        let err = estimate_mean_flux(&nu, &cars, 10, 1, 1).unwrap_err();
        assert_eq!(err, EstimateError::AllOverflowed { replicates: 10 });
    }

    #[test]
    fn non_critical_offspring_rejected() {
        let nu = law("poisson:0.8");
        let cars = law("poisson:0.25");
        assert!(matches!(
            estimate_mean_flux(&nu, &cars, 10, 100, 1),
            Err(EstimateError::Tree(TreeError::NotCritical { .. }))
        ));
    }

    #[test]
    fn supercritical_mean_flux_is_cap_sensitive() {
        let nu = law("poisson:1");
        let cars = law("poisson:0.75");
        let e = estimate_mean_flux(&nu, &cars, 5_000, 2_000, 11).unwrap();
        assert!(e.cap_sensitive, "{e:?}");
        assert!(e.shift > 0.0);
    }

    #[test]
    fn conditioned_inadmissible() {
        let nu = law("finite:0=0.5,2=0.5");
        let cars = law("poisson:0.25");
        assert_eq!(
            estimate_flux_conditioned(&nu, &cars, 4, 10, 1).unwrap_err(),
            EstimateError::Tree(TreeError::Inadmissible(4))
        );
        assert!(estimate_flux_conditioned(&nu, &cars, 5, 10, 1).is_ok());
    }

    #[test]
    fn distribution_distances() {
        let a = FluxDistribution::new(vec![Some(0), Some(0), Some(1), Some(2)], 10, 0).unwrap();
        let b = FluxDistribution::new(vec![Some(0), Some(1), Some(1), None], 10, 0).unwrap();
        assert_eq!(b.overflow_count, 1);
        assert!((a.ks_distance(&b) - 0.25).abs() < 1e-12);
        assert!(
            (a.tv_distance(&b) - 0.5 * ((0.5 - 1.0 / 3.0) + (2.0 / 3.0 - 0.25) + 0.25)).abs()
                < 1e-12
        );
        assert_eq!(a.ks_distance(&a), 0.0);
        assert_eq!(a.quantile(0.5), 0);
        assert_eq!(a.quantile(0.75), 1);
        assert_eq!(a.quantile(1.0), 2);
    }

    #[test]
    fn divergence_flag() {
        let v: Vec<Option<u64>> = (0..100)
            .map(|i| Some(if i == 0 { 50 } else { 1 }))
            .collect();
        assert!(FluxDistribution::new(v.clone(), 10, 0).unwrap().diverged);
        assert!(!FluxDistribution::new(v, 100, 0).unwrap().diverged);
    }

    #[test]
    fn walk_path_bookkeeping() {
        let mut w = WalkPath::new();
        for z in [0, 3, 0, 0, 2] {
            w.push(z);
        }
        assert_eq!(w.partial_sums(), &[-1, 1, 0, -1, 0]);
        assert_eq!(w.increments().collect::<Vec<_>>(), vec![-1, 2, -1, -1, 1]);
        assert_eq!(
            (0..5).map(|h| w.flux_at(h)).collect::<Vec<_>>(),
            vec![0, 1, 1, 1, 1]
        );
        assert_eq!(w.flux(), 1);
    }

    #[test]
    fn walk_flux_monotone_in_height() {
        let nu = law("poisson:1");
        let cars = law("poisson:0.25");
        let (pool, _) = build_flux_pool(&nu, &cars, 2_000, 100_000, 2).unwrap();
        let s = SpineIncrementSampler::new(&nu, &cars, pool).unwrap();
        for i in 0..200 {
            let p = sample_walk_path(&s, 60, &mut RngStream::derive(1, 0, i));
            for h in [10, 30, 50] {
                let short = sample_walk_path(&s, h, &mut RngStream::derive(1, 0, i));
                assert_eq!(short.flux(), p.flux_at(h));
                assert!(short.flux() <= p.flux());
            }
        }
    }

    #[test]
    fn direct_and_walk_agree_roughly() {
        let nu = law("poisson:1");
        let cars = law("poisson:0.25");
        let d =
            estimate_flux_infinite_direct(&nu, &cars, &InfiniteConfig::new(40, 4_000, 4)).unwrap();
        let w = estimate_flux_infinite_walk(&nu, &cars, &WalkConfig::new(40, 4_000, 20_000, 4))
            .unwrap();
        assert!(
            d.ks_distance(&w.distribution) < 0.04,
            "{}",
            d.ks_distance(&w.distribution)
        );
        assert!(w.z_mean.z_score(0.2928932) < 4.0, "{:?}", w.z_mean);
        assert!(w.pool.too_small);
    }

    #[test]
    fn spinal_zero_functional() {
        let nu = law("geometric:0.5");
        let r = spinal_check(&nu, SpinalFunctional::Zero, 100, 1).unwrap();
        assert_eq!((r.lhs.point, r.rhs.point), (0.0, 0.0));
    }

    #[test]
    fn spinal_sides_agree() {
        let nu = law("geometric:0.5");
        for (h, k) in [(0, 1), (1, 2)] {
            let r = spinal_check(
                &nu,
                SpinalFunctional::HeightTopSize {
                    height: h,
                    top_size: k,
                },
                40_000,
                9,
            )
            .unwrap();
            assert!(r.difference().abs() < 4.0 * r.combined_se(), "{r:?}");
        }
    }

    #[test]
    fn car_families() {
        assert_eq!(
            CarFamily::parse("binomial:3").unwrap(),
            CarFamily::Binomial { trials: 3 }
        );
        assert!(CarFamily::parse("cauchy").is_err());
        for f in [
            CarFamily::Poisson,
            CarFamily::Geometric,
            CarFamily::Bernoulli,
            CarFamily::Binomial { trials: 4 },
        ] {
            let l = make_law(&f.spec_with_mean(0.3).unwrap()).unwrap();
            assert!((l.mean() - 0.3).abs() < 1e-12, "{f:?}");
        }
        assert!(make_law(&CarFamily::Bernoulli.spec_with_mean(1.5).unwrap()).is_err());
    }

    #[test]
    fn sweep_rows() {
        let nu = law("geometric:0.5");
        let cfg = SweepConfig {
            reps: 300,
            cap: 10_000,
            conditioned_n: Some(20),
            conditioned_reps: 20,
            seed: 5,
        };
        assert!(sweep(&nu, CarFamily::Poisson, &[], &cfg).is_empty());
        let rows = sweep(&nu, CarFamily::Poisson, &[0.3, 0.5, 1.7], &cfg);
        assert_eq!(rows[0].regime, Some(RegimeKind::Subcritical));
        assert_eq!(rows[1].regime, Some(RegimeKind::Supercritical));
        assert_eq!(
            rows.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![5, 6, 7]
        );
        assert!(rows[0].mean_flux.is_some() && rows[0].flux_per_n.is_some());
        assert!(rows[2].error.is_none() || rows[2].regime.is_some());
    }

    #[test]
    fn reproducible() {
        let nu = law("poisson:1");
        let cars = law("poisson:0.5");
        let a = estimate_mean_flux(&nu, &cars, 1_000, 10_000, 77).unwrap();
        let b = estimate_mean_flux(&nu, &cars, 1_000, 10_000, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a,
            estimate_mean_flux(&nu, &cars, 1_000, 10_000, 78).unwrap()
        );
    }
}
