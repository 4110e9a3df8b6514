//! Closed-form side of the model: the phase parameter Θ, the regime, the
//! blow-up time `t_max` of the mean flux, the mean flux `Φ(t)` of the
//! thinned model and an independent RK4 solution of its integral equation.
//!
//! Notation: `m`, `σ²` are the mean and variance of the car law, `Σ²` the
//! variance of the critical offspring law, `e = σ² + m² - m = E[L(L-1)]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::LawHandle;

/// Stop integrating once `1 - m·s - Σ²·Φ(s)` falls below this.
pub const SINGULARITY_MARGIN: f64 = 1e-6;
/// Relative tolerance on Θ for the critical regime.
pub const CRITICAL_THETA_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("car mean {0} exceeds 1")]
    MeanAboveOne(f64),
    #[error("car variance is infinite")]
    InfiniteVariance,
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("integrand denominator fell below {SINGULARITY_MARGIN} at s = {at}")]
    SingularityApproached { at: f64 },
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
}

/// A nonnegative real or `+∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(x) => Some(x),
            Extended::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite)
    }

    /// As an `f64`, mapping the marker to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    /// Car mean `m > 0`.
    pub m: f64,
    /// Car variance `σ²`, possibly `+∞`.
    pub sigma2: f64,
    /// Offspring variance `Σ² > 0`.
    pub big_sigma2: f64,
}

impl ModelParams {
    pub fn new(m: f64, sigma2: f64, big_sigma2: f64) -> Result<Self, TheoryError> {
        if !(m.is_finite() && m > 0.0) {
            return Err(TheoryError::InvalidParams(format!(
                "car mean must be positive, got {m}"
            )));
        }
        if sigma2.is_nan() || sigma2 < 0.0 {
            return Err(TheoryError::InvalidParams(format!(
                "car variance must be >= 0, got {sigma2}"
            )));
        }
        if !(big_sigma2.is_finite() && big_sigma2 > 0.0) {
            return Err(TheoryError::InvalidParams(format!(
                "offspring variance must be positive and finite, got {big_sigma2}"
            )));
        }
        let p = ModelParams {
            m,
            sigma2,
            big_sigma2,
        };
        // E[L(L-1)] >= 0 for integer-valued L.
        let pair = sigma2 + m * m - m;
        if pair < -1e-12 * (1.0 + m * m) {
            return Err(TheoryError::InvalidParams(format!(
                "σ² + m² - m = {pair} is negative; no integer law has these moments"
            )));
        }
        Ok(p)
    }

    pub fn from_laws(cars: &LawHandle, offspring: &LawHandle) -> Result<Self, TheoryError> {
        Self::new(cars.mean(), cars.variance(), offspring.variance())
    }

    /// `σ² + m² - m`, clamped at zero.
    pub fn pair_moment(&self) -> f64 {
        (self.sigma2 + self.m * self.m - self.m).max(0.0)
    }

    /// `Σ²·(σ² + m² - m)`.
    fn drift_coefficient(&self) -> f64 {
        self.big_sigma2 * self.pair_moment()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeKind {
    Subcritical,
    Critical,
    Supercritical,
}

impl RegimeKind {
    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Subcritical => "subcritical",
            RegimeKind::Critical => "critical",
            RegimeKind::Supercritical => "supercritical",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regime {
    pub kind: RegimeKind,
    pub theta: f64,
    /// `None` when `t_max` is not defined (`m > 1` or `σ² = ∞`).
    pub t_max: Option<Extended>,
}

/// `Θ = (1-m)² - Σ²(σ² + m² - m)`; `-∞` when `σ² = ∞`.
pub fn theta(p: &ModelParams) -> f64 {
    if p.sigma2.is_infinite() {
        return f64::NEG_INFINITY;
    }
    let a = 1.0 - p.m;
    a * a - p.drift_coefficient()
}

pub fn classify(p: &ModelParams) -> Regime {
    let th = theta(p);
    if p.m > 1.0 || p.sigma2.is_infinite() {
        return Regime {
            kind: RegimeKind::Supercritical,
            theta: th,
            t_max: None,
        };
    }
    let tol = CRITICAL_THETA_TOL * (1.0f64).max((1.0 - p.m).powi(2));
    let kind = if th.abs() <= tol {
        RegimeKind::Critical
    } else if th > 0.0 {
        RegimeKind::Subcritical
    } else {
        RegimeKind::Supercritical
    };
    Regime {
        kind,
        theta: th,
        t_max: t_max(p).ok(),
    }
}

/// Smallest positive root of `(1 - m·t)² = t·Σ²(σ² + m² - m)`, or `+∞` when
/// the right-hand side vanishes identically (cars in `{0, 1}` a.s.).
pub fn t_max(p: &ModelParams) -> Result<Extended, TheoryError> {
    if p.m > 1.0 {
        return Err(TheoryError::MeanAboveOne(p.m));
    }
    if p.sigma2.is_infinite() {
        return Err(TheoryError::InfiniteVariance);
    }
    let c = p.drift_coefficient();
    if c <= 0.0 {
        return Ok(Extended::Infinite);
    }
    // m²t² - (2m + c)t + 1 = 0; the product of the roots is 1/m², which
    // gives the small root without cancellation.
    let b = 2.0 * p.m + c;
    Ok(Extended::Finite(2.0 / (b + (c * (4.0 * p.m + c)).sqrt())))
}

/// Mean flux `Φ(t)` at the root of `T` under car law `(1-t)δ₀ + tμ`.
pub fn phi_closed_form(t: f64, p: &ModelParams) -> Result<Extended, TheoryError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(TheoryError::TimeOutOfRange(t));
    }
    if p.sigma2.is_infinite() {
        return Ok(if t == 0.0 {
            Extended::Finite(0.0)
        } else {
            Extended::Infinite
        });
    }
    if p.m <= 1.0 {
        if let Extended::Finite(tm) = t_max(p)? {
            if t > tm {
                return Ok(Extended::Infinite);
            }
        }
    }
    Ok(Extended::Finite(phi_branch(t, p)))
}

/// `((1-mt) - √((1-mt)² - ct)) / Σ²` written as `e·t / ((1-mt) + √…)`.
fn phi_branch(t: f64, p: &ModelParams) -> f64 {
    let e = p.pair_moment();
    if e == 0.0 || t == 0.0 {
        return 0.0;
    }
    let a = 1.0 - p.m * t;
    let disc = (a * a - p.drift_coefficient() * t).max(0.0);
    let den = a + disc.sqrt();
    if den <= 0.0 {
        return 0.0;
    }
    e * t / den
}

/// `Φ(t)` by fixed-step classical RK4 on
/// `Φ' = (½(σ² + m² - m) + mΦ) / (1 - m·s - Σ²Φ)`, `Φ(0) = 0`.
pub fn phi_ode(t: f64, p: &ModelParams, step: f64) -> Result<f64, TheoryError> {
    Ok(phi_ode_grid(&[t], p, step)?[0])
}

/// [`phi_ode`] at every time of a nondecreasing grid, in one pass: full
/// steps on the lattice `k·step`, then a partial step to each grid time.
pub fn phi_ode_grid(times: &[f64], p: &ModelParams, step: f64) -> Result<Vec<f64>, TheoryError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(TheoryError::BadStep(step));
    }
    if let Some(&t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(TheoryError::TimeOutOfRange(t));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(TheoryError::InvalidParams(
            "grid times must be nondecreasing".into(),
        ));
    }
    if p.sigma2.is_infinite() {
        return Err(TheoryError::InfiniteVariance);
    }
    let half_e = 0.5 * p.pair_moment();
    let rhs = |s: f64, y: f64| -> Result<f64, TheoryError> {
        let den = 1.0 - p.m * s - p.big_sigma2 * y;
        if den < SINGULARITY_MARGIN {
            return Err(TheoryError::SingularityApproached { at: s });
        }
        Ok((half_e + p.m * y) / den)
    };
    let advance = |s: f64, y: f64, h: f64| -> Result<f64, TheoryError> {
        let k1 = rhs(s, y)?;
        let k2 = rhs(s + 0.5 * h, y + 0.5 * h * k1)?;
        let k3 = rhs(s + 0.5 * h, y + 0.5 * h * k2)?;
        let k4 = rhs(s + h, y + h * k3)?;
        Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    };
    let mut out = Vec::with_capacity(times.len());
    let (mut done, mut s, mut y) = (0u64, 0.0, 0.0);
    for &t in times {
        let full_steps = (t / step).floor() as u64;
        while done < full_steps {
            y = advance(s, y, step)?;
            done += 1;
            s = done as f64 * step;
        }
        let rest = t - s;
        out.push(if rest > 0.0 { advance(s, y, rest)? } else { y });
    }
    Ok(out)
}

/// `Σ²·E[φ(T)] + m - 1` from the closed form: `-√Θ` when `Θ >= 0`, `+∞`
/// in the supercritical regime.
pub fn root_flux_identity(p: &ModelParams) -> Extended {
    let regime = classify(p);
    if regime.kind == RegimeKind::Supercritical {
        return Extended::Infinite;
    }
    // Φ(1) with the discriminant (1-m)² - c = Θ clamped at zero, so a
    // critical Θ that rounds slightly negative still gives 0.
    let th = regime.theta.max(0.0);
    let a = 1.0 - p.m;
    let den = a + th.sqrt();
    let phi1 = if den > 0.0 {
        p.pair_moment() / den
    } else {
        0.0
    };
    Extended::Finite(p.big_sigma2 * phi1 + p.m - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson_poisson(m: f64) -> ModelParams {
        ModelParams::new(m, m, 1.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn theta_values() {
        let p = ModelParams::new(1.0, 0.7, 2.0).unwrap();
        assert!(close(theta(&p), -1.4, 1e-15));
        assert!(close(theta(&poisson_poisson(0.25)), 0.5, 1e-15));
        assert_eq!(theta(&poisson_poisson(0.5)), 0.0);
        assert_eq!(
            theta(&ModelParams::new(0.5, f64::INFINITY, 1.0).unwrap()),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify(&poisson_poisson(0.25)).kind,
            RegimeKind::Subcritical
        );
        assert_eq!(classify(&poisson_poisson(0.5)).kind, RegimeKind::Critical);
        assert_eq!(
            classify(&poisson_poisson(0.75)).kind,
            RegimeKind::Supercritical
        );
        // Geometric(1/2) offspring (Σ² = 2), Poisson cars: 1 - 2m - m² = 0.
        let m = 2f64.sqrt() - 1.0;
        assert_eq!(
            classify(&ModelParams::new(m, m, 2.0).unwrap()).kind,
            RegimeKind::Critical
        );
        assert_eq!(
            classify(&poisson_poisson(1.5)).kind,
            RegimeKind::Supercritical
        );
        assert_eq!(
            classify(&ModelParams::new(0.1, f64::INFINITY, 1.0).unwrap()).kind,
            RegimeKind::Supercritical
        );
        // σ²Σ² >= 1 is supercritical at any density.
        for m in [0.01, 0.1, 0.5, 0.9] {
            let p = ModelParams::new(m, 1.0, 1.0).unwrap();
            assert_eq!(classify(&p).kind, RegimeKind::Supercritical, "m={m}");
        }
    }

    #[test]
    fn rejects_inconsistent_moments() {
        // Bernoulli has the smallest variance for a given mean: m - m².
        assert!(ModelParams::new(0.5, 0.1, 1.0).is_err());
        assert!(ModelParams::new(0.5, 0.25, 1.0).is_ok());
        assert!(ModelParams::new(0.0, 0.0, 1.0).is_err());
        assert!(ModelParams::new(0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn t_max_values() {
        assert!(close(
            t_max(&poisson_poisson(0.5)).unwrap().to_f64(),
            1.0,
            1e-14
        ));
        let expect = (0.5625 - 0.06640625f64.sqrt()) / 0.125;
        assert!(close(
            t_max(&poisson_poisson(0.25)).unwrap().to_f64(),
            expect,
            1e-12
        ));
        assert!(close(expect, 2.4384, 1e-4));
        let bern = ModelParams::new(0.3, 0.3 - 0.09, 1.5).unwrap();
        assert_eq!(t_max(&bern).unwrap(), Extended::Infinite);
        assert!(matches!(
            t_max(&poisson_poisson(1.2)),
            Err(TheoryError::MeanAboveOne(_))
        ));
    }

    #[test]
    fn t_max_solves_the_quadratic() {
        for &(m, s2, big) in &[
            (0.25, 0.25, 1.0),
            (0.5, 0.5, 1.0),
            (0.9, 0.3, 2.0),
            (0.1, 3.0, 0.5),
            (1.0, 0.5, 1.0),
        ] {
            let p = ModelParams::new(m, s2, big).unwrap();
            let t = t_max(&p).unwrap().to_f64();
            let resid = (1.0 - m * t).powi(2) - t * big * p.pair_moment();
            assert!(resid.abs() < 1e-10, "{m} {s2} {big}: {resid}");
        }
    }

    #[test]
    fn regime_matches_t_max_position() {
        for i in 1..=100 {
            let m = i as f64 / 100.0;
            for &(s2, big) in &[(m, 1.0), (m, 2.0), (m * (1.0 - m), 3.0), (0.05, 0.7)] {
                let Ok(p) = ModelParams::new(m, s2, big) else {
                    continue;
                };
                if p.pair_moment() == 0.0 && m == 1.0 {
                    // δ₁ cars: excluded from the model.
                    continue;
                }
                let r = classify(&p);
                let tm = r.t_max.unwrap().to_f64();
                match r.kind {
                    RegimeKind::Subcritical => assert!(tm > 1.0),
                    RegimeKind::Critical => assert!(close(tm, 1.0, 1e-9)),
                    RegimeKind::Supercritical => assert!(tm < 1.0),
                }
            }
        }
    }

    #[test]
    fn discriminant_decreasing_on_unit_interval() {
        for &(m, s2, big) in &[
            (0.25, 0.25, 1.0),
            (0.9, 0.09, 2.0),
            (1.0, 0.0, 1.0),
            (0.5, 2.0, 0.3),
        ] {
            let p = ModelParams::new(m, s2, big).unwrap();
            let g = |t: f64| (1.0 - m * t).powi(2) - t * big * p.pair_moment();
            let mut prev = g(0.0);
            for i in 1..=10_000 {
                let cur = g(i as f64 / 10_000.0);
                assert!(cur <= prev + 1e-15);
                prev = cur;
            }
        }
    }

    #[test]
    fn phi_values() {
        let p = poisson_poisson(0.25);
        assert_eq!(phi_closed_form(0.0, &p).unwrap(), Extended::Finite(0.0));
        let phi1 = phi_closed_form(1.0, &p).unwrap().to_f64();
        assert!(close(phi1, 0.75 - 0.5f64.sqrt(), 1e-15));
        assert!(close(phi1, 0.0428932, 1e-7));
        let sup = poisson_poisson(0.75);
        let tm = t_max(&sup).unwrap().to_f64();
        assert!(tm < 1.0);
        assert_eq!(phi_closed_form(1.0, &sup).unwrap(), Extended::Infinite);
        assert!(phi_closed_form(tm, &sup).unwrap().finite().is_some());
        assert!(phi_closed_form(1.5, &p).is_err());
    }

    #[test]
    fn phi_matches_textbook_form() {
        let p = ModelParams::new(0.4, 0.7, 1.3).unwrap();
        let tm = t_max(&p).unwrap().to_f64().min(1.0);
        for i in 0..=100 {
            let t = tm * i as f64 / 100.0;
            let a = 1.0 - p.m * t;
            let naive =
                (a - (a * a - p.big_sigma2 * p.pair_moment() * t).max(0.0).sqrt()) / p.big_sigma2;
            assert!(close(
                phi_closed_form(t, &p).unwrap().to_f64(),
                naive,
                1e-12
            ));
        }
    }

    #[test]
    fn phi_monotone_and_continuous() {
        for p in [
            poisson_poisson(0.25),
            poisson_poisson(0.5),
            poisson_poisson(0.75),
        ] {
            let end = t_max(&p).unwrap().to_f64().min(1.0);
            let mut prev = 0.0;
            for i in 0..=10_000 {
                let v = phi_closed_form(end * i as f64 / 10_000.0, &p)
                    .unwrap()
                    .to_f64();
                assert!(v >= prev - 1e-15);
                assert!(v - prev < 0.02, "jump at step {i}");
                prev = v;
            }
        }
    }

    #[test]
    fn ode_matches_closed_form() {
        assert_eq!(phi_ode(0.0, &poisson_poisson(0.25), 1e-4).unwrap(), 0.0);
        let v = phi_ode(1.0, &poisson_poisson(0.25), 1e-4).unwrap();
        assert!(close(v, 0.0428932, 1e-6), "{v}");
        let p = poisson_poisson(0.5);
        let v = phi_ode(0.9, &p, 1e-4).unwrap();
        assert!(close(v, phi_closed_form(0.9, &p).unwrap().to_f64(), 1e-6));
    }

    #[test]
    fn ode_grid_matches_pointwise() {
        let p = poisson_poisson(0.3);
        let times = [0.0, 0.00005, 0.1, 0.1, 0.33333, 0.5, 1.0];
        let grid = phi_ode_grid(&times, &p, 1e-3).unwrap();
        for (t, g) in times.iter().zip(grid) {
            assert_eq!(g, phi_ode(*t, &p, 1e-3).unwrap());
        }
        assert!(phi_ode_grid(&[0.5, 0.2], &p, 1e-3).is_err());
    }

    #[test]
    fn ode_detects_singularity() {
        let p = poisson_poisson(0.75);
        assert!(matches!(
            phi_ode(1.0, &p, 1e-4),
            Err(TheoryError::SingularityApproached { .. })
        ));
        assert!(matches!(
            phi_ode(0.5, &p, 0.0),
            Err(TheoryError::BadStep(_))
        ));
    }

    #[test]
    fn line_two_identity() {
        assert_eq!(
            root_flux_identity(&poisson_poisson(0.5)),
            Extended::Finite(0.0)
        );
        let v = root_flux_identity(&poisson_poisson(0.25)).to_f64();
        assert!(close(v, -(0.5f64.sqrt()), 1e-12));
        assert_eq!(
            root_flux_identity(&poisson_poisson(0.75)),
            Extended::Infinite
        );
    }

    #[test]
    fn identity_on_parameter_grid() {
        for i in 1..=40 {
            let m = i as f64 / 40.0;
            for &(extra, big) in &[(0.0, 1.0), (0.01, 2.0), (0.05, 0.5), (0.2, 1.5)] {
                let s2 = m * (1.0 - m) + extra;
                let p = ModelParams::new(m, s2, big).unwrap();
                let th = theta(&p);
                if th < 0.0 {
                    continue;
                }
                let via_phi = big * phi_closed_form(1.0, &p).unwrap().to_f64() + m - 1.0;
                assert!(
                    close(via_phi, -th.sqrt(), 1e-12),
                    "m={m} extra={extra} big={big}"
                );
                assert!(close(root_flux_identity(&p).to_f64(), -th.sqrt(), 1e-12));
            }
        }
    }
}
