//! Capacities of concentric-ball condensers for radially symmetric weights.
//!
//! For a radial weight `w(r)` the energy of a radial profile is
//! `ω_{n-1} ∫ w^{p/2} r^{n-1} |φ'|^p dr`. Minimizing it under
//! `∫_{r_in}^{r_out} |φ'| dr = 1` gives `|φ'| ∝ g^{-1/(p-1)}` with
//! `g = w^{p/2} r^{n-1}`, hence
//!
//! ```text
//! cap = ω_{n-1} · ( ∫_{r_in}^{r_out} g(r)^{-1/(p-1)} dr )^{1-p}.
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::operator::WeightField;
use crate::quadrature::{integrate, QuadOptions, Spacing};
use crate::regime::Exponents;
use crate::special::unit_sphere_area;

/// Smallest exponent accepted by the capacity engines.
pub const MIN_EXPONENT: f64 = 1.05;

/// Target relative error of the capacity integral.
pub const CAPACITY_REL_TOL: f64 = 1e-10;

/// Samples kept in the optimal profile.
pub const PROFILE_POINTS: usize = 65;

/// `|slope|` at or below this value counts as bounded.
pub const LIMINF_SLOPE_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RadialExact,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// The weight vanished (or went negative) somewhere on the condenser.
    pub degenerate_weight: bool,
    pub converged: bool,
    pub iterations: usize,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            degenerate_weight: false,
            converged: true,
            iterations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub value: f64,
    /// `(radius, φ*(radius))` samples of the optimal profile. Empty for grid results.
    pub profile: Vec<(f64, f64)>,
    pub quadrature_error_estimate: f64,
    pub method: Method,
    pub diagnostics: Diagnostics,
}

pub(crate) fn check_exponent(p: f64) -> Result<()> {
    if !(p >= MIN_EXPONENT) || !p.is_finite() {
        return Err(Error::UnsupportedExponent(p));
    }
    Ok(())
}

fn radial_weight_fn(w: &WeightField) -> Result<impl Fn(f64) -> f64 + '_> {
    if !w.is_radial() {
        return arg("the radial engine needs a radial weight (radial_power or isotropic)");
    }
    Ok(move |r: f64| w.radial_weight(r).unwrap_or(0.0))
}

fn sample_radii(r_in: f64, r_out: f64, count: usize) -> Vec<f64> {
    let log = r_out / r_in > 4.0;
    (0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            if k == 0 {
                r_in
            } else if k + 1 == count {
                r_out
            } else if log {
                r_in * (r_out / r_in).powf(t)
            } else {
                r_in + t * (r_out - r_in)
            }
        })
        .collect()
}

fn degenerate_result() -> CapacityResult {
    CapacityResult {
        value: 0.0,
        profile: Vec::new(),
        quadrature_error_estimate: 0.0,
        method: Method::RadialExact,
        diagnostics: Diagnostics {
            degenerate_weight: true,
            ..Diagnostics::default()
        },
    }
}

/// `cap_{L,p}(closed B_{r_in}, R^n \ B_{r_out})` for a radial weight, `n = W.dimension()`.
pub fn radial_capacity(p: f64, w: &WeightField, r_in: f64, r_out: f64) -> Result<CapacityResult> {
    check_exponent(p)?;
    if !(r_in > 0.0 && r_out > r_in && r_out.is_finite()) {
        return arg(format!("need 0 < r_in < r_out, got ({r_in}, {r_out})"));
    }
    let weight = radial_weight_fn(w)?;
    let n = w.dimension() as f64;

    let radii = sample_radii(r_in, r_out, PROFILE_POINTS);
    // dense screen for vanishing weights between the profile nodes
    let screen = sample_radii(r_in, r_out, 4 * PROFILE_POINTS + 1);
    if screen.iter().any(|&r| !(weight(r) > 0.0)) {
        let mut res = degenerate_result();
        res.profile = vec![(r_in, 1.0), (r_out, 0.0)];
        return Ok(res);
    }

    // g^{-1/(p-1)} with g = w^{p/2} r^{n-1}, evaluated in log form
    let inv = 1.0 / (p - 1.0);
    let slope = |r: f64| (-(0.5 * p * weight(r).ln() + (n - 1.0) * r.ln()) * inv).exp();

    let opts = QuadOptions::default()
        .with_rel_tol(CAPACITY_REL_TOL)
        .with_initial_panels(2)
        .with_spacing(Spacing::Auto);
    let mut cumulative = Vec::with_capacity(radii.len());
    cumulative.push(0.0);
    let mut total = 0.0;
    let mut err = 0.0;
    for pair in radii.windows(2) {
        let q = match integrate(slope, pair[0], pair[1], &opts) {
            Ok(q) => q,
            Err(Error::NonFinite(_)) => {
                let mut res = degenerate_result();
                res.profile = vec![(r_in, 1.0), (r_out, 0.0)];
                return Ok(res);
            }
            Err(e) => return Err(e),
        };
        total += q.value;
        err += q.error;
        cumulative.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite(format!(
            "capacity integral evaluated to {total}"
        )));
    }

    let value = unit_sphere_area(w.dimension()) * total.powf(1.0 - p);
    let profile = radii
        .iter()
        .zip(&cumulative)
        .map(|(&r, &c)| (r, (1.0 - c / total).clamp(0.0, 1.0)))
        .collect();
    Ok(CapacityResult {
        value,
        profile,
        quadrature_error_estimate: (p - 1.0) * err / total * value,
        method: Method::RadialExact,
        diagnostics: Diagnostics::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub r: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "quantity", rename_all = "snake_case")]
pub enum SequenceKind {
    /// `cap_{L,p}(B_{ratio·R}, R^n \ B_R)`.
    Capacity,
    /// The product `cap_{L,p1}(B_R, R^n \ B_{2R})^{1/2} · cap_{L,p2}(B_{R/2}, R^n \ B_R)^{1/p2}`.
    FrakC { q: f64, nu: f64, p1: f64, p2: f64 },
}

/// Values indexed by the outer radius `R` of a condenser family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySequence {
    pub entries: Vec<SequenceEntry>,
    pub p: f64,
    pub condenser_ratio: f64,
    pub kind: SequenceKind,
}

impl CapacitySequence {
    pub fn new(entries: Vec<SequenceEntry>, p: f64, condenser_ratio: f64) -> Result<Self> {
        check_radii(&entries.iter().map(|e| e.r).collect::<Vec<_>>())?;
        if entries.iter().any(|e| !(e.value >= 0.0)) {
            return arg("sequence values must be non-negative");
        }
        Ok(Self {
            entries,
            p,
            condenser_ratio,
            kind: SequenceKind::Capacity,
        })
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.r)
    }
}

fn check_radii(r_list: &[f64]) -> Result<()> {
    if r_list.is_empty() {
        return arg("the R list is empty");
    }
    if r_list.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return arg("R values must be positive and finite");
    }
    if r_list.windows(2).any(|w| w[1] <= w[0]) {
        return arg("R values must be strictly increasing");
    }
    Ok(())
}

/// `n` log-spaced radii from `r_min` to `r_max`, both included.
pub fn log_spaced(r_min: f64, r_max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![r_min],
        _ => (0..count)
            .map(|k| {
                if k + 1 == count {
                    r_max
                } else {
                    r_min * (r_max / r_min).powf(k as f64 / (count - 1) as f64)
                }
            })
            .collect(),
    }
}

/// `entry_k = cap_{L,p}(B_{ratio·R_k}, R^n \ B_{R_k})`, evaluated in parallel.
pub fn capacity_scan(
    p: f64,
    w: &WeightField,
    r_list: &[f64],
    ratio: f64,
) -> Result<CapacitySequence> {
    check_exponent(p)?;
    check_radii(r_list)?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return arg(format!("condenser ratio must lie in (0, 1), got {ratio}"));
    }
    let entries = r_list
        .par_iter()
        .map(|&r| radial_capacity(p, w, ratio * r, r).map(|c| SequenceEntry { r, value: c.value }))
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacitySequence {
        entries,
        p,
        condenser_ratio: ratio,
        kind: SequenceKind::Capacity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square deviation in log space.
    pub residual: f64,
    pub window: (f64, f64),
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_log_log(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: points.len(),
        });
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::Domain(format!("cannot take logs of ({x}, {y})")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("all abscissae coincide".into()));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (logs
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    Ok((slope, intercept, rms))
}

/// Fits `ln value = slope · ln R + intercept` over entries with `R` in `window` (inclusive).
pub fn fit_log_slope(seq: &CapacitySequence, window: Option<(f64, f64)>) -> Result<SlopeFit> {
    let (lo, hi) = window.unwrap_or_else(|| {
        let first = seq.entries.first().map_or(0.0, |e| e.r);
        let last = seq.entries.last().map_or(0.0, |e| e.r);
        (first, last)
    });
    let slack = 1e-12;
    let points: Vec<(f64, f64)> = seq
        .entries
        .iter()
        .filter(|e| e.r >= lo * (1.0 - slack) && e.r <= hi * (1.0 + slack))
        .map(|e| (e.r, e.value))
        .collect();
    let (slope, intercept, residual) = fit_log_log(&points)?;
    Ok(SlopeFit {
        slope,
        intercept,
        residual,
        window: (lo, hi),
    })
}

/// `ℭ_{L,p1,p2}(R) = cap_{L,p1}(B_R, R^n \ B_{2R})^{1/2} · cap_{L,p2}(B_{R/2}, R^n \ B_R)^{1/p2}`
/// with `p1 = 2(q-ν)/(q-1)` and `p2 = 2q/(q-1-ν)`.
pub fn frak_c(w: &WeightField, q: f64, nu: f64, r: f64) -> Result<f64> {
    let ex = Exponents::new(q, nu)?;
    frak_c_with(w, &ex, r)
}

fn frak_c_with(w: &WeightField, ex: &Exponents, r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return arg(format!("R must be positive, got {r}"));
    }
    let first = radial_capacity(ex.p1, w, r, 2.0 * r)?.value;
    let second = radial_capacity(ex.p2, w, 0.5 * r, r)?.value;
    Ok(first.sqrt() * second.powf(1.0 / ex.p2))
}

pub fn frak_c_scan(w: &WeightField, q: f64, nu: f64, r_list: &[f64]) -> Result<CapacitySequence> {
    let ex = Exponents::new(q, nu)?;
    check_radii(r_list)?;
    let entries = r_list
        .par_iter()
        .map(|&r| frak_c_with(w, &ex, r).map(|value| SequenceEntry { r, value }))
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacitySequence {
        entries,
        p: ex.p1,
        condenser_ratio: 0.5,
        kind: SequenceKind::FrakC {
            q,
            nu,
            p1: ex.p1,
            p2: ex.p2,
        },
    })
}

/// Growth exponent of `cap_{L,p}` for the model weight on `(B_{R/2}, R^n \ B_R)`.
pub fn model_capacity_exponent(n: usize, p: f64, sigma: f64) -> f64 {
    (2.0 * n as f64 - p * (sigma + 2.0)) / 2.0
}

/// Growth exponent of `ℭ` for the model weight as the sum of its two factor exponents.
pub fn model_frak_c_exponent(n: usize, sigma: f64, ex: &Exponents) -> f64 {
    let n = n as f64;
    let s = sigma + 2.0;
    (2.0 * n - ex.p1 * s) / 4.0 + (2.0 * n - ex.p2 * s) / (2.0 * ex.p2)
}

/// The same exponent written in closed form in `q` and `ν`:
/// `(2q-1-ν)(q(n-σ-2)-n) / (2q(q-1))`.
pub fn model_frak_c_exponent_closed(n: usize, sigma: f64, q: f64, nu: f64) -> f64 {
    let n = n as f64;
    (2.0 * q - 1.0 - nu) * (q * (n - sigma - 2.0) - n) / (2.0 * q * (q - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum LiminfVerdict {
    Bounded { estimate: f64 },
    DivergesLikeSlope { slope: f64 },
    TendsToZero,
}

impl LiminfVerdict {
    /// The liminf is finite.
    pub fn is_finite(&self) -> bool {
        !matches!(self, LiminfVerdict::DivergesLikeSlope { .. })
    }
}

/// Classifies the large-`R` behaviour of `value · R^ρ` by its log-log slope.
pub fn estimate_liminf(seq: &CapacitySequence, normalizer: Option<f64>) -> Result<LiminfVerdict> {
    let len = seq.entries.len();
    if len < 5 {
        return Err(Error::InsufficientData {
            needed: 5,
            got: len,
        });
    }
    let (first, last) = (seq.entries[0].r, seq.entries[len - 1].r);
    if last / first < 100.0 * (1.0 - 1e-12) {
        return Err(Error::Argument(format!(
            "the sequence spans {:.3} decades; at least 2 are needed",
            (last / first).log10()
        )));
    }
    let rho = normalizer.unwrap_or(0.0);
    let points: Vec<(f64, f64)> = seq
        .entries
        .iter()
        .map(|e| (e.r, e.value * e.r.powf(rho)))
        .collect();
    if points.iter().any(|p| p.1 == 0.0) {
        return Ok(LiminfVerdict::Bounded { estimate: 0.0 });
    }
    let (slope, _, _) = fit_log_log(&points)?;
    Ok(if slope > LIMINF_SLOPE_TOL {
        LiminfVerdict::DivergesLikeSlope { slope }
    } else if slope < -LIMINF_SLOPE_TOL {
        LiminfVerdict::TendsToZero
    } else {
        LiminfVerdict::Bounded {
            estimate: points[len - 1].1,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    /// Independent route: midpoint sums of the one-dimensional energy for the
    /// piecewise-linear radial profile that minimizes it on a fine radial mesh.
    /// On each cell the optimal slope is constant, so the discrete problem has
    /// the same closed structure with cell weights `G_k h_k^{1-p}`.
    fn brute_force_radial(
        n: usize,
        p: f64,
        w: impl Fn(f64) -> f64,
        r_in: f64,
        r_out: f64,
        cells: usize,
    ) -> f64 {
        let h = (r_out - r_in) / cells as f64;
        // energy of a profile with jumps d_k is Σ G_k |d_k|^p h^{1-p}; minimizing
        // under Σ d_k = 1 gives (Σ (G_k h^{1-p})^{-1/(p-1)})^{1-p}
        let mut s = 0.0;
        for k in 0..cells {
            let r = r_in + (k as f64 + 0.5) * h;
            let g = w(r).powf(p / 2.0) * r.powi(n as i32 - 1) * h.powf(1.0 - p);
            s += g.powf(-1.0 / (p - 1.0));
        }
        unit_sphere_area(n) * s.powf(1.0 - p)
    }

    #[test]
    fn classical_three_dimensional_condenser() {
        let w = WeightField::identity(3).unwrap();
        let c = radial_capacity(2.0, &w, 1.0, 2.0).unwrap();
        assert!(rel(c.value, 8.0 * PI) < 1e-9, "{}", c.value);
        assert_eq!(c.method, Method::RadialExact);
        assert!(c.quadrature_error_estimate < 1e-8 * c.value);
        let bf = brute_force_radial(3, 2.0, |_| 1.0, 1.0, 2.0, 20_000);
        assert!(rel(bf, 8.0 * PI) < 1e-6);
    }

    #[test]
    fn planar_condenser() {
        let w = WeightField::identity(2).unwrap();
        let c = radial_capacity(2.0, &w, 1.0, E).unwrap();
        assert!(rel(c.value, 2.0 * PI) < 1e-9);
    }

    #[test]
    fn matches_brute_force_for_weighted_p() {
        for (n, p, sigma) in [(3, 3.0, 1.0), (2, 1.5, -1.0), (4, 2.5, 2.0)] {
            let w = WeightField::radial_power(n, sigma).unwrap();
            let c = radial_capacity(p, &w, 0.7, 3.1).unwrap().value;
            let bf =
                brute_force_radial(n, p, |r| (1.0 + r * r).powf(-sigma / 2.0), 0.7, 3.1, 40_000);
            assert!(rel(c, bf) < 1e-6, "n={n} p={p} σ={sigma}: {c} vs {bf}");
        }
    }

    #[test]
    fn zero_weight_is_degenerate() {
        let w = WeightField::zero(3).unwrap();
        let c = radial_capacity(2.5, &w, 1.0, 2.0).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.diagnostics.degenerate_weight);
        // a weight vanishing only inside the annulus is caught as well
        let w = WeightField::isotropic(2, |r| (r - 1.5).max(0.0)).unwrap();
        assert!(
            radial_capacity(2.0, &w, 1.0, 2.0)
                .unwrap()
                .diagnostics
                .degenerate_weight
        );
    }

    #[test]
    fn exponent_guard() {
        let w = WeightField::identity(3).unwrap();
        assert!(matches!(
            radial_capacity(1.0, &w, 1.0, 2.0),
            Err(Error::UnsupportedExponent(_))
        ));
        assert!(matches!(
            radial_capacity(0.5, &w, 1.0, 2.0),
            Err(Error::UnsupportedExponent(_))
        ));
        assert!(matches!(
            radial_capacity(1.01, &w, 1.0, 2.0),
            Err(Error::UnsupportedExponent(_))
        ));
        assert!(radial_capacity(1.05, &w, 1.0, 2.0).is_ok());
    }

    #[test]
    fn rejects_bad_annulus_and_matrix_weight() {
        let w = WeightField::identity(3).unwrap();
        assert!(radial_capacity(2.0, &w, 2.0, 1.0).is_err());
        let m = WeightField::diagonal(vec![1.0, 2.0]).unwrap();
        assert!(radial_capacity(2.0, &m, 1.0, 2.0).is_err());
    }

    #[test]
    fn profile_invariants() {
        let w = WeightField::radial_power(3, -1.0).unwrap();
        let c = radial_capacity(3.0, &w, 0.5, 40.0).unwrap();
        let first = c.profile.first().unwrap();
        let last = c.profile.last().unwrap();
        assert_eq!(first.0, 0.5);
        assert_eq!(last.0, 40.0);
        assert!((first.1 - 1.0).abs() < 1e-10 && last.1.abs() < 1e-10);
        for pair in c.profile.windows(2) {
            assert!(pair[1].0 > pair[0].0);
            assert!(pair[1].1 <= pair[0].1);
        }
        assert!(c.profile.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn profile_energy_reproduces_capacity() {
        // the energy of the piecewise-linear interpolant of the profile
        // approaches the capacity from above
        let w = WeightField::identity(3).unwrap();
        let c = radial_capacity(2.0, &w, 1.0, 2.0).unwrap();
        let mut energy = 0.0;
        for pair in c.profile.windows(2) {
            let (r0, f0) = pair[0];
            let (r1, f1) = pair[1];
            let slope = (f1 - f0) / (r1 - r0);
            energy += slope * slope * (r1.powi(3) - r0.powi(3)) / 3.0;
        }
        energy *= 4.0 * PI;
        assert!(energy >= c.value * (1.0 - 1e-12));
        assert!(rel(energy, c.value) < 1e-3);
    }

    #[test]
    fn scan_examples() {
        let w = WeightField::identity(3).unwrap();
        let s = capacity_scan(2.0, &w, &[2.0], 0.5).unwrap();
        assert_eq!(s.entries.len(), 1);
        assert!(rel(s.entries[0].value, 8.0 * PI) < 1e-9);
        let w2 = WeightField::identity(2).unwrap();
        let s = capacity_scan(2.0, &w2, &[E], 1.0 / E).unwrap();
        assert!(rel(s.entries[0].value, 2.0 * PI) < 1e-9);
        let z = WeightField::zero(3).unwrap();
        let s = capacity_scan(2.0, &z, &[1.0, 2.0, 3.0], 0.5).unwrap();
        assert!(s.entries.iter().all(|e| e.value == 0.0));
        assert!(capacity_scan(2.0, &w, &[], 0.5).is_err());
        assert!(capacity_scan(2.0, &w, &[2.0, 1.0], 0.5).is_err());
        assert!(capacity_scan(2.0, &w, &[2.0], 1.0).is_err());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let entries = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&r: &f64| SequenceEntry { r, value: r * r })
            .collect();
        let seq = CapacitySequence::new(entries, 2.0, 0.5).unwrap();
        let fit = fit_log_slope(&seq, Some((10.0, 1000.0))).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-10);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn slope_fit_errors() {
        let entries = vec![
            SequenceEntry { r: 1.0, value: 1.0 },
            SequenceEntry { r: 2.0, value: 0.0 },
            SequenceEntry { r: 3.0, value: 2.0 },
            SequenceEntry {
                r: 40.0,
                value: 2.0,
            },
        ];
        let seq = CapacitySequence::new(entries, 2.0, 0.5).unwrap();
        assert!(matches!(
            fit_log_slope(&seq, Some((1.0, 3.0))),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            fit_log_slope(&seq, Some((3.0, 50.0))),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn scan_slopes_match_model_exponents() {
        let radii = log_spaced(10.0, 1e4, 16);
        for (n, p, sigma) in [(3, 2.0, 0.0), (4, 3.0, 0.0)] {
            let w = WeightField::radial_power(n, sigma).unwrap();
            let seq = capacity_scan(p, &w, &radii, 0.5).unwrap();
            let fit = fit_log_slope(&seq, Some((10.0, 1e4))).unwrap();
            let expected = model_capacity_exponent(n, p, sigma);
            assert!(
                (fit.slope - expected).abs() < 0.05,
                "{n} {p} {sigma}: {}",
                fit.slope
            );
        }
    }

    #[test]
    fn monotone_in_plates() {
        let w = WeightField::radial_power(3, 0.7).unwrap();
        let base = radial_capacity(2.5, &w, 1.0, 3.0).unwrap().value;
        assert!(radial_capacity(2.5, &w, 1.0, 4.0).unwrap().value <= base);
        assert!(radial_capacity(2.5, &w, 0.8, 3.0).unwrap().value <= base);
    }

    #[test]
    fn weight_scaling_law() {
        let w = WeightField::radial_power(3, 1.3).unwrap();
        let p = 2.7;
        let c = 4.5;
        let base = radial_capacity(p, &w, 1.0, 5.0).unwrap().value;
        let scaled = radial_capacity(p, &w.scaled(c), 1.0, 5.0).unwrap().value;
        assert!(rel(scaled, c.powf(p / 2.0) * base) < 1e-8);
    }

    #[test]
    fn two_sided_bound_and_upper_constant() {
        // value / R^κ stays in a fixed band for R in [10, 1e4]
        for (n, p, sigma) in [(3, 2.0, 1.0), (3, 3.0, -0.5), (2, 2.5, 0.5)] {
            let w = WeightField::radial_power(n, sigma).unwrap();
            let kappa = model_capacity_exponent(n, p, sigma);
            let radii = log_spaced(10.0, 1e4, 12);
            let seq = capacity_scan(p, &w, &radii, 0.5).unwrap();
            let ratios: Vec<f64> = seq
                .entries
                .iter()
                .map(|e| e.value / e.r.powf(kappa))
                .collect();
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            assert!(lo > 0.0 && hi / lo < 1.1, "{ratios:?}");
            // upper constant fitted on the first decade holds beyond it with 5% room
            let c_hat = 1.05 * ratios[..4].iter().cloned().fold(0.0, f64::max);
            for e in &seq.entries {
                assert!(e.value <= c_hat * e.r.powf(kappa) * 1.05);
            }
        }
    }

    #[test]
    fn frak_c_exponent_forms_agree() {
        for (n, sigma, q, nu) in [(3, 0.0, 2.0, 0.5), (4, 1.0, 1.5, 0.25), (2, -1.0, 3.0, 0.9)] {
            let ex = Exponents::new(q, nu).unwrap();
            let a = model_frak_c_exponent(n, sigma, &ex);
            let b = model_frak_c_exponent_closed(n, sigma, q, nu);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let ex = Exponents::new(2.0, 0.5).unwrap();
        assert!((model_frak_c_exponent(3, 0.0, &ex) + 0.625).abs() < 1e-12);
    }

    #[test]
    fn frak_c_zero_weight_and_slope() {
        let z = WeightField::zero(3).unwrap();
        assert_eq!(frak_c(&z, 2.0, 0.5, 10.0).unwrap(), 0.0);
        assert!(frak_c(&z, 2.0, 1.5, 10.0).is_err());
        let w = WeightField::identity(3).unwrap();
        let seq = frak_c_scan(&w, 2.0, 0.5, &log_spaced(10.0, 1e4, 10)).unwrap();
        let fit = fit_log_slope(&seq, None).unwrap();
        assert!((fit.slope + 0.625).abs() < 0.05, "{}", fit.slope);
    }

    #[test]
    fn liminf_examples() {
        let radii = log_spaced(10.0, 1e4, 12);
        let bounded = capacity_scan(
            2.0,
            &WeightField::radial_power(3, 1.0).unwrap(),
            &radii,
            0.5,
        )
        .unwrap();
        assert!(matches!(
            estimate_liminf(&bounded, None).unwrap(),
            LiminfVerdict::Bounded { .. }
        ));
        let growing = capacity_scan(2.0, &WeightField::identity(3).unwrap(), &radii, 0.5).unwrap();
        match estimate_liminf(&growing, None).unwrap() {
            LiminfVerdict::DivergesLikeSlope { slope } => assert!((slope - 1.0).abs() < 0.02),
            v => panic!("{v:?}"),
        }
        assert_eq!(
            estimate_liminf(&growing, Some(-3.0)).unwrap(),
            LiminfVerdict::TendsToZero
        );
    }

    #[test]
    fn liminf_needs_enough_data() {
        let w = WeightField::identity(3).unwrap();
        let short = capacity_scan(2.0, &w, &log_spaced(10.0, 1e4, 4), 0.5).unwrap();
        assert!(matches!(
            estimate_liminf(&short, None),
            Err(Error::InsufficientData { .. })
        ));
        let narrow = capacity_scan(2.0, &w, &log_spaced(10.0, 500.0, 8), 0.5).unwrap();
        assert!(estimate_liminf(&narrow, None).is_err());
    }

    #[test]
    fn sequence_round_trips_through_json() {
        let w = WeightField::radial_power(3, 0.5).unwrap();
        let seq = frak_c_scan(&w, 2.0, 0.5, &[10.0, 20.0, 40.0]).unwrap();
        let text = serde_json::to_string(&seq).unwrap();
        let back: CapacitySequence = serde_json::from_str(&text).unwrap();
        assert_eq!(back, seq);
    }
}
