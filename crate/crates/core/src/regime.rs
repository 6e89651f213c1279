//! Decision map for ordered solution pairs of `Lu + |u|^{q-1}u ≤ Lv + |v|^{q-1}v`.
//!
//! For the model weight `(1+|x|²)^(-σ/2) δ_ij` the map from `(n, q, σ)` to
//! "comparison holds" / "counterexample exists" is complete. For general
//! weights only the sufficient capacity conditions can be evaluated.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::operator::WeightField;
use crate::radial::{capacity_scan, estimate_liminf, frak_c_scan, CapacitySequence, LiminfVerdict};

/// Relative tolerance for the exact-boundary tests `σ = -2`, `σ = n-2`,
/// `q = 1` and `q = n/(n-σ-2)`.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// `p = p1 = 2(q-ν)/(q-1)` and `p2 = 2q/(q-1-ν)` for `q > 1`, `ν ∈ (0,1) ∩ (0,q-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub p: f64,
    pub p1: f64,
    pub p2: f64,
    pub nu: f64,
}

impl Exponents {
    pub fn new(q: f64, nu: f64) -> Result<Self> {
        if !(q > 1.0 && q.is_finite()) {
            return arg(format!("the exponents need q > 1, got {q}"));
        }
        if !(nu > 0.0 && nu < 1.0 && nu < q - 1.0) {
            return arg(format!(
                "ν must lie in (0, 1) ∩ (0, q-1) = (0, {}), got {nu}",
                (q - 1.0).min(1.0)
            ));
        }
        let p = 2.0 * (q - nu) / (q - 1.0);
        Ok(Self {
            p,
            p1: p,
            p2: 2.0 * q / (q - 1.0 - nu),
            nu,
        })
    }

    /// Uses the midpoint `ν = min(1, q-1) / 2`.
    pub fn with_default_nu(q: f64) -> Result<Self> {
        Self::new(q, default_nu(q))
    }
}

pub fn default_nu(q: f64) -> f64 {
    (q - 1.0).min(1.0) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    LiouvilleHolds,
    CounterexampleExists,
    OutsideScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Authority {
    Thm1,
    Thm2,
    Thm3,
    Thm4,
    Thm5,
    Thm6,
    Thm7,
    Thm8,
    Prop3,
    Prop4,
    Prop5,
    Prop6,
    Prop7,
    Prop8,
    Ex2,
    Ex4,
    Ex5,
    Ex7,
}

impl Authority {
    pub fn is_theorem(self) -> bool {
        use Authority::*;
        matches!(self, Thm1 | Thm2 | Thm3 | Thm4 | Thm5 | Thm6 | Thm7 | Thm8)
    }

    pub fn is_example(self) -> bool {
        use Authority::*;
        matches!(self, Ex2 | Ex4 | Ex5 | Ex7)
    }
}

impl fmt::Display for Authority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::LiouvilleHolds => "liouville_holds",
            Outcome::CounterexampleExists => "counterexample_exists",
            Outcome::OutsideScope => "outside_scope",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub outcome: Outcome,
    /// `None` only for `OutsideScope`.
    pub authority: Option<Authority>,
    pub exponents: Option<Exponents>,
    pub boundary: bool,
}

impl RegimeVerdict {
    fn new(
        outcome: Outcome,
        authority: Authority,
        exponents: Option<Exponents>,
        boundary: bool,
    ) -> Self {
        debug_assert!(match outcome {
            Outcome::LiouvilleHolds => authority.is_theorem(),
            Outcome::CounterexampleExists => authority.is_example(),
            Outcome::OutsideScope => false,
        });
        Self {
            outcome,
            authority: Some(authority),
            exponents,
            boundary,
        }
    }

    fn outside(exponents: Option<Exponents>) -> Self {
        Self {
            outcome: Outcome::OutsideScope,
            authority: None,
            exponents,
            boundary: false,
        }
    }
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= BOUNDARY_TOL * a.abs().max(b.abs()).max(1.0)
}

/// `n/(n-σ-2)` for `σ < n-2`.
pub fn critical_q(n: usize, sigma: f64) -> f64 {
    n as f64 / (n as f64 - sigma - 2.0)
}

/// Classifies `(n, q, σ)` for the model weight. Total on `n ≥ 2`, `q > 0`, finite `σ`.
pub fn classify_model(n: usize, q: f64, sigma: f64) -> Result<RegimeVerdict> {
    if n < 2 {
        return arg(format!("n must be at least 2, got {n}"));
    }
    if !(q > 0.0 && q.is_finite() && sigma.is_finite()) {
        return arg(format!("need q > 0 and finite σ, got q = {q}, σ = {sigma}"));
    }
    let nf = n as f64;
    let on_upper = near(sigma, nf - 2.0);
    let on_lower = near(sigma, -2.0);
    let sigma_high = sigma >= nf - 2.0 || on_upper;
    let sigma_low = sigma <= -2.0 || on_lower;

    use Authority::*;
    use Outcome::*;
    if near(q, 1.0) {
        return Ok(if sigma_low {
            RegimeVerdict::new(CounterexampleExists, Ex7, None, on_lower)
        } else {
            RegimeVerdict::new(LiouvilleHolds, Thm8, None, false)
        });
    }
    if q < 1.0 {
        return Ok(if sigma_high {
            RegimeVerdict::new(LiouvilleHolds, Thm2, None, on_upper)
        } else {
            RegimeVerdict::new(CounterexampleExists, Ex2, None, false)
        });
    }
    let ex = Exponents::with_default_nu(q).ok();
    if sigma_high {
        return Ok(RegimeVerdict::new(LiouvilleHolds, Thm2, ex, on_upper));
    }
    if sigma_low {
        return Ok(RegimeVerdict::new(CounterexampleExists, Ex4, ex, on_lower));
    }
    let qc = critical_q(n, sigma);
    let on_critical = near(q, qc);
    Ok(if q <= qc || on_critical {
        RegimeVerdict::new(LiouvilleHolds, Thm6, ex, on_critical)
    } else {
        RegimeVerdict::new(CounterexampleExists, Ex5, ex, false)
    })
}

/// Capacity sequences available to the capacity-based classification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CapacityEvidence {
    /// `cap_{L,2}` on `(B_{R/2}, R^n \ B_R)`.
    pub cap2: Option<CapacitySequence>,
    /// `cap_{L,p}` with `p = 2(q-ν)/(q-1)`.
    pub cap_p: Option<CapacitySequence>,
    /// `ℭ_{L,p1,p2}`.
    pub frak_c: Option<CapacitySequence>,
    pub dimension: usize,
}

/// Evaluates the sufficient capacity conditions in order: bounded `cap_{L,2}`,
/// then (for `q > 1`) bounded `cap_{L,p}` and bounded `ℭ`, then (for `q = 1`)
/// `cap_{L,2} R^{-n} → 0`.
pub fn classify_capacity(ev: &CapacityEvidence, q: f64, nu: Option<f64>) -> Result<RegimeVerdict> {
    if !(q > 0.0 && q.is_finite()) {
        return arg(format!("q must be positive, got {q}"));
    }
    let is_one = near(q, 1.0);
    let ex = if q > 1.0 && !is_one {
        Some(Exponents::new(q, nu.unwrap_or_else(|| default_nu(q)))?)
    } else {
        None
    };
    if q <= 1.0 || is_one {
        if ev.cap2.is_none() {
            return arg("q ≤ 1 needs the cap_{L,2} sequence");
        }
    } else if ev.cap2.is_none() && ev.cap_p.is_none() && ev.frak_c.is_none() {
        return arg("no capacity sequence supplied");
    }

    use Authority::*;
    use Outcome::*;
    if let Some(seq) = &ev.cap2 {
        if estimate_liminf(seq, None)?.is_finite() {
            return Ok(RegimeVerdict::new(LiouvilleHolds, Thm1, ex, false));
        }
    }
    if let Some(ex) = ex {
        if let Some(seq) = &ev.cap_p {
            if (seq.p - ex.p).abs() > 1e-9 * ex.p {
                return Err(Error::Argument(format!(
                    "cap_p sequence has p = {}, expected {}",
                    seq.p, ex.p
                )));
            }
            if estimate_liminf(seq, None)?.is_finite() {
                return Ok(RegimeVerdict::new(LiouvilleHolds, Thm3, Some(ex), false));
            }
        }
        if let Some(seq) = &ev.frak_c {
            if estimate_liminf(seq, None)?.is_finite() {
                return Ok(RegimeVerdict::new(LiouvilleHolds, Thm5, Some(ex), false));
            }
        }
    }
    if is_one {
        if ev.dimension < 2 {
            return arg("the R^{-n} normalization needs the dimension of the evidence");
        }
        let seq = ev.cap2.as_ref().expect("checked above");
        if estimate_liminf(seq, Some(-(ev.dimension as f64)))? == LiminfVerdict::TendsToZero {
            return Ok(RegimeVerdict::new(LiouvilleHolds, Thm7, None, false));
        }
    }
    Ok(RegimeVerdict::outside(ex))
}

/// Builds the sequences `classify_capacity` needs for a radial weight over `radii`.
pub fn radial_evidence(
    w: &WeightField,
    q: f64,
    nu: Option<f64>,
    radii: &[f64],
) -> Result<CapacityEvidence> {
    let mut ev = CapacityEvidence {
        cap2: Some(capacity_scan(2.0, w, radii, 0.5)?),
        dimension: w.dimension(),
        ..CapacityEvidence::default()
    };
    if q > 1.0 && !near(q, 1.0) {
        let ex = Exponents::new(q, nu.unwrap_or_else(|| default_nu(q)))?;
        ev.cap_p = Some(capacity_scan(ex.p, w, radii, 0.5)?);
        ev.frak_c = Some(frak_c_scan(w, q, ex.nu, radii)?);
    }
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial::log_spaced;
    use Authority::*;
    use Outcome::*;

    #[test]
    fn exponent_examples() {
        let e = Exponents::new(2.0, 0.5).unwrap();
        assert_eq!((e.p, e.p1, e.p2), (3.0, 3.0, 8.0));
        let e = Exponents::new(3.0, 0.5).unwrap();
        assert!((e.p1 - 2.5).abs() < 1e-15 && (e.p2 - 4.0).abs() < 1e-15);
        assert!(Exponents::new(2.0, 1.5).is_err());
        assert!(Exponents::new(1.2, 0.3).is_err()); // ν ≥ q-1
        assert!(Exponents::new(2.0, 0.0).is_err());
        assert!(Exponents::new(1.0, 0.5).is_err());
    }

    #[test]
    fn exponents_exceed_two() {
        for q in [1.1, 1.5, 2.0, 4.0, 10.0] {
            for frac in [0.1, 0.5, 0.9] {
                let nu = frac * (q - 1.0f64).min(1.0);
                let e = Exponents::new(q, nu).unwrap();
                assert!(e.p > 2.0 && e.p2 > 2.0 && e.p2 > e.p1);
            }
        }
    }

    fn check(n: usize, q: f64, sigma: f64, outcome: Outcome, auth: Authority, boundary: bool) {
        let v = classify_model(n, q, sigma).unwrap();
        assert_eq!(
            (v.outcome, v.authority, v.boundary),
            (outcome, Some(auth), boundary),
            "({n}, {q}, {sigma})"
        );
    }

    #[test]
    fn model_examples() {
        check(3, 2.0, 0.0, LiouvilleHolds, Thm6, false);
        check(3, 4.0, 0.0, CounterexampleExists, Ex5, false);
        check(2, 0.5, 0.0, LiouvilleHolds, Thm2, true);
        check(3, 1.0, -3.0, CounterexampleExists, Ex7, false);
        check(2, 1.0, -2.0, CounterexampleExists, Ex7, true);
        check(3, 3.0, 0.0, LiouvilleHolds, Thm6, true);
        check(3, 2.0, -2.0, CounterexampleExists, Ex4, true);
        check(3, 2.0, 1.0, LiouvilleHolds, Thm2, true);
        check(3, 0.5, 0.5, CounterexampleExists, Ex2, false);
        check(3, 1.0, 0.0, LiouvilleHolds, Thm8, false);
    }

    #[test]
    fn model_is_total_and_tags_are_consistent() {
        for n in 2..=6 {
            for qi in 1..60 {
                let q = qi as f64 * 0.1;
                for si in -40..=60 {
                    let sigma = si as f64 * 0.1;
                    let v = classify_model(n, q, sigma).unwrap();
                    assert_ne!(v.outcome, OutsideScope);
                    let a = v.authority.unwrap();
                    match v.outcome {
                        LiouvilleHolds => assert!(a.is_theorem()),
                        CounterexampleExists => assert!(a.is_example()),
                        OutsideScope => unreachable!(),
                    }
                }
            }
        }
    }

    #[test]
    fn model_rejects_bad_input() {
        assert!(classify_model(1, 2.0, 0.0).is_err());
        assert!(classify_model(3, 0.0, 0.0).is_err());
        assert!(classify_model(3, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn capacity_examples() {
        let radii = log_spaced(10.0, 1e4, 10);
        let w = WeightField::radial_power(3, 1.0).unwrap();
        for q in [0.5, 1.0, 3.0] {
            let ev = radial_evidence(&w, q, None, &radii).unwrap();
            let v = classify_capacity(&ev, q, None).unwrap();
            assert_eq!(
                (v.outcome, v.authority),
                (LiouvilleHolds, Some(Thm1)),
                "q = {q}"
            );
        }
        let w = WeightField::radial_power(3, 0.0).unwrap();
        let ev = radial_evidence(&w, 1.0, None, &radii).unwrap();
        let v = classify_capacity(&ev, 1.0, None).unwrap();
        assert_eq!((v.outcome, v.authority), (LiouvilleHolds, Some(Thm7)));

        let ev = radial_evidence(&w, 4.0, None, &radii).unwrap();
        let v = classify_capacity(&ev, 4.0, None).unwrap();
        assert_eq!(v.outcome, OutsideScope);
        assert_eq!(v.authority, None);

        // q = 2 sits where the cap_{L,p} exponent vanishes
        let ev = radial_evidence(&w, 2.0, None, &radii).unwrap();
        let v = classify_capacity(&ev, 2.0, None).unwrap();
        assert_eq!((v.outcome, v.authority), (LiouvilleHolds, Some(Thm3)));

        // cap_{L,p} grows here but ℭ decays
        let ev = radial_evidence(&w, 2.5, None, &radii).unwrap();
        let v = classify_capacity(&ev, 2.5, None).unwrap();
        assert_eq!((v.outcome, v.authority), (LiouvilleHolds, Some(Thm5)));
    }

    #[test]
    fn capacity_missing_sequences() {
        let ev = CapacityEvidence::default();
        assert!(classify_capacity(&ev, 0.5, None).is_err());
        assert!(classify_capacity(&ev, 1.0, None).is_err());
        assert!(classify_capacity(&ev, 2.0, None).is_err());
    }

    #[test]
    fn verdict_round_trips() {
        let v = classify_model(3, 2.0, 0.0).unwrap();
        let text = serde_json::to_string(&v).unwrap();
        assert!(text.contains("\"liouville_holds\"") && text.contains("\"Thm6\""));
        assert_eq!(serde_json::from_str::<RegimeVerdict>(&text).unwrap(), v);
    }
}
