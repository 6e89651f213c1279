//! Certification of ordered solution pairs `(u, v)` of
//! `Lu + |u|^{q-1}u ≤ Lv + |v|^{q-1}v` for the model operator
//! `Lg = div((1 + |x|²)^{-σ/2} ∇g)`.
//!
//! Candidate functions are finite sums `Σ c_k (1 + r²)^{β_k}`, so every
//! derivative is available in closed form. A pair is stored as `(v, d)` with
//! `u = v + d`; the operator part of the residual is then `-L d`, which avoids
//! cancelling two large terms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::operator::{WeightField, WeightKind, MAX_DIMENSION};
use crate::quadrature::{gauss_legendre, integrate, QuadOptions, Spacing};
use crate::radial::log_spaced;
use crate::special::unit_sphere_area;

/// Default number of log-spaced radii in residual scans.
pub const RESIDUAL_GRID_POINTS: usize = 2000;
/// Default outer radius of residual scans.
pub const RESIDUAL_GRID_MAX: f64 = 1e3;
const RESIDUAL_GRID_MIN: f64 = 1e-3;
/// Dyadic search range for α.
pub const ALPHA_LOG2_RANGE: (f64, f64) = (-40.0, 40.0);
pub const ALPHA_BISECTION_STEPS: usize = 200;
/// Per-integral tolerance of weak-form quadrature.
pub const WEAK_FORM_REL_TOL: f64 = 1e-9;
/// Allowed negative weak-form gap, relative to the integral magnitudes.
pub const WEAK_FORM_SLACK: f64 = 1e-6;
pub const BUMP_COUNT: usize = 12;
pub const BUMP_RADII: (f64, f64) = (1.0, 100.0);

/// `coeff · (1 + r²)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerTerm {
    pub coeff: f64,
    pub exponent: f64,
}

/// A radial function `Σ c_k (1 + r²)^{β_k}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RadialExpr {
    pub terms: Vec<PowerTerm>,
}

impl RadialExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn power(coeff: f64, exponent: f64) -> Self {
        Self {
            terms: vec![PowerTerm { coeff, exponent }],
        }
        .normalized()
    }

    /// Merges equal exponents and drops zero coefficients.
    pub fn normalized(mut self) -> Self {
        self.terms.sort_by(|a, b| a.exponent.total_cmp(&b.exponent));
        let mut out: Vec<PowerTerm> = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            match out.last_mut() {
                Some(last) if last.exponent == t.exponent => last.coeff += t.coeff,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coeff != 0.0);
        Self { terms: out }
    }

    pub fn plus(&self, other: &Self) -> Self {
        Self {
            terms: self.terms.iter().chain(&other.terms).copied().collect(),
        }
        .normalized()
    }

    pub fn minus(&self, other: &Self) -> Self {
        let neg = other.terms.iter().map(|t| PowerTerm {
            coeff: -t.coeff,
            exponent: t.exponent,
        });
        Self {
            terms: self.terms.iter().copied().chain(neg).collect(),
        }
        .normalized()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self
            .terms
            .iter()
            .any(|t| !(t.coeff.is_finite() && t.exponent.is_finite()))
        {
            return Err(Error::Validation(
                "radial expression has non-finite terms".into(),
            ));
        }
        Ok(())
    }

    pub fn value(&self, r: f64) -> f64 {
        let s = 1.0 + r * r;
        self.terms
            .iter()
            .map(|t| t.coeff * s.powf(t.exponent))
            .sum()
    }

    /// `g'(r) / r = Σ 2cβ s^{β-1}`.
    pub fn d1(&self, r: f64) -> f64 {
        let s = 1.0 + r * r;
        self.terms
            .iter()
            .map(|t| 2.0 * t.coeff * t.exponent * s.powf(t.exponent - 1.0))
            .sum()
    }

    /// `g'(r)`.
    pub fn derivative(&self, r: f64) -> f64 {
        r * self.d1(r)
    }

    /// `(g'/r)' / r = Σ 4cβ(β-1) s^{β-2}`.
    fn d2(&self, r: f64) -> f64 {
        let s = 1.0 + r * r;
        self.terms
            .iter()
            .map(|t| 4.0 * t.coeff * t.exponent * (t.exponent - 1.0) * s.powf(t.exponent - 2.0))
            .sum()
    }

    /// `L g(r) = r^{1-n} (r^{n-1} w g')'` with `w = (1 + r²)^{-σ/2}`, exact at `r = 0`.
    pub fn model_operator(&self, n: usize, sigma: f64, r: f64) -> f64 {
        let s = 1.0 + r * r;
        let w = s.powf(-0.5 * sigma);
        let wr = -sigma * r * r * w / s;
        let d1 = self.d1(r);
        w * (n as f64 * d1 + r * r * self.d2(r)) + wr * d1
    }
}

/// `|x|^{q-1} x`.
pub fn signed_power(x: f64, q: f64) -> f64 {
    x.signum() * x.abs().powf(q)
}

/// `F(v + d) - F(v)` with `F(x) = |x|^{q-1}x`, computed without cancellation
/// when `v` and `v + d` share a sign.
fn power_difference(v: f64, d: f64, q: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    let u = v + d;
    if v != 0.0 && u != 0.0 && v.signum() == u.signum() {
        let ratio = d / v;
        v.signum() * v.abs().powf(q) * (q * ratio.ln_1p()).exp_m1()
    } else {
        signed_power(u, q) - signed_power(v, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Example2,
    Example4,
    Example5,
    Example7,
    Custom,
}

/// Which way α must move to make the residual non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaDirection {
    Large,
    Small,
}

impl ExampleKind {
    pub fn alpha_direction(self) -> Option<AlphaDirection> {
        match self {
            ExampleKind::Example2 => Some(AlphaDirection::Large),
            ExampleKind::Example4 | ExampleKind::Example5 => Some(AlphaDirection::Small),
            ExampleKind::Example7 | ExampleKind::Custom => None,
        }
    }
}

/// Candidate ordered pair `u = v + d ≥ v` for the model operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub kind: ExampleKind,
    pub n: usize,
    pub q: f64,
    pub sigma: f64,
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub v: RadialExpr,
    pub d: RadialExpr,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

fn check_common(n: usize, q: f64, sigma: f64) -> Result<()> {
    if !(2..=MAX_DIMENSION).contains(&n) {
        return invalid(format!(
            "dimension must lie in [2, {MAX_DIMENSION}], got {n}"
        ));
    }
    if !(q > 0.0 && q.is_finite()) {
        return invalid(format!("q must be positive and finite, got {q}"));
    }
    if !sigma.is_finite() {
        return invalid("sigma must be finite");
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be positive and finite, got {alpha}"));
    }
    Ok(())
}

/// `μ` range of the `q = 1` pair, `[lo, hi]`.
pub fn example7_mu_range(n: usize, sigma: f64) -> (f64, f64) {
    let nf = n as f64;
    if sigma <= -2.0 - 1.0 / nf {
        (1.0 / (2.0 * nf), -(sigma + 2.0) / 2.0)
    } else {
        let m = nf - sigma - 2.0;
        let root = (m * m - 4.0).max(0.0).sqrt();
        ((m - root) / 4.0, (m + root) / 4.0)
    }
}

impl ExamplePair {
    /// `u = α s^γ + s^{-μ}`, `v = α s^γ`, `γ = (2+σ)/(2(1-q))`, for `0 < q < 1`,
    /// `σ < n-2`, `0 < μ < (n-2-σ)/2`; needs α large.
    pub fn example2(n: usize, q: f64, sigma: f64, mu: f64, alpha: f64) -> Result<Self> {
        check_common(n, q, sigma)?;
        check_alpha(alpha)?;
        let nf = n as f64;
        if !(q < 1.0) {
            return invalid(format!("this pair needs 0 < q < 1, got {q}"));
        }
        if !(sigma < nf - 2.0) {
            return invalid(format!("this pair needs sigma < n - 2, got {sigma}"));
        }
        if !(mu > 0.0 && mu < (nf - 2.0 - sigma) / 2.0) {
            return invalid(format!(
                "mu must lie in (0, {}), got {mu}",
                (nf - 2.0 - sigma) / 2.0
            ));
        }
        let gamma = (2.0 + sigma) / (2.0 * (1.0 - q));
        Ok(Self {
            kind: ExampleKind::Example2,
            n,
            q,
            sigma,
            mu: Some(mu),
            alpha: Some(alpha),
            v: RadialExpr::power(alpha, gamma),
            d: RadialExpr::power(1.0, -mu),
        })
    }

    /// `u = α s^{-μ}`, `v = 0` for `q > 1`, `σ ≤ -2`, `-(σ+2)/2 < μ < (n-σ-2)/2`; needs α small.
    pub fn example4(n: usize, q: f64, sigma: f64, mu: f64, alpha: f64) -> Result<Self> {
        check_common(n, q, sigma)?;
        check_alpha(alpha)?;
        let nf = n as f64;
        if !(q > 1.0) {
            return invalid(format!("this pair needs q > 1, got {q}"));
        }
        if !(sigma <= -2.0) {
            return invalid(format!("this pair needs sigma <= -2, got {sigma}"));
        }
        let (lo, hi) = (-(sigma + 2.0) / 2.0, (nf - sigma - 2.0) / 2.0);
        if !(mu > lo && mu < hi) {
            return invalid(format!("mu must lie in ({lo}, {hi}), got {mu}"));
        }
        Ok(Self::decaying(
            ExampleKind::Example4,
            n,
            q,
            sigma,
            mu,
            Some(alpha),
        ))
    }

    /// `u = α s^{-μ}`, `v = 0` for `-2 < σ < n-2`, `q > n/(n-σ-2)`,
    /// `(σ+2)/(2(q-1)) ≤ μ < (n-2-σ)/2`; needs α small.
    pub fn example5(n: usize, q: f64, sigma: f64, mu: f64, alpha: f64) -> Result<Self> {
        check_common(n, q, sigma)?;
        check_alpha(alpha)?;
        let nf = n as f64;
        if !(sigma > -2.0 && sigma < nf - 2.0) {
            return invalid(format!("this pair needs -2 < sigma < n - 2, got {sigma}"));
        }
        let qc = nf / (nf - sigma - 2.0);
        if !(q > qc) {
            return invalid(format!(
                "this pair needs q > n/(n - sigma - 2) = {qc}, got {q}"
            ));
        }
        let (lo, hi) = ((sigma + 2.0) / (2.0 * (q - 1.0)), (nf - 2.0 - sigma) / 2.0);
        if !(mu >= lo && mu < hi) {
            return invalid(format!("mu must lie in [{lo}, {hi}), got {mu}"));
        }
        Ok(Self::decaying(
            ExampleKind::Example5,
            n,
            q,
            sigma,
            mu,
            Some(alpha),
        ))
    }

    /// `u = s^{-μ}`, `v = 0` for `q = 1`, `σ ≤ -2`, μ in [`example7_mu_range`].
    pub fn example7(n: usize, sigma: f64, mu: f64) -> Result<Self> {
        check_common(n, 1.0, sigma)?;
        if !(sigma <= -2.0) {
            return invalid(format!("this pair needs sigma <= -2, got {sigma}"));
        }
        let (lo, hi) = example7_mu_range(n, sigma);
        if !(mu >= lo && mu <= hi) {
            return invalid(format!("mu must lie in [{lo}, {hi}], got {mu}"));
        }
        Ok(Self::decaying(
            ExampleKind::Example7,
            n,
            1.0,
            sigma,
            mu,
            None,
        ))
    }

    fn decaying(
        kind: ExampleKind,
        n: usize,
        q: f64,
        sigma: f64,
        mu: f64,
        alpha: Option<f64>,
    ) -> Self {
        Self {
            kind,
            n,
            q,
            sigma,
            mu: Some(mu),
            alpha,
            v: RadialExpr::zero(),
            d: RadialExpr::power(alpha.unwrap_or(1.0), -mu),
        }
    }

    /// Arbitrary pair; `u ≥ v` is checked on the residual grid.
    pub fn custom(n: usize, q: f64, sigma: f64, u: RadialExpr, v: RadialExpr) -> Result<Self> {
        check_common(n, q, sigma)?;
        u.check()?;
        v.check()?;
        let d = u.minus(&v);
        let pair = Self {
            kind: ExampleKind::Custom,
            n,
            q,
            sigma,
            mu: None,
            alpha: None,
            v,
            d,
        };
        if let Some(r) = residual_grid(RESIDUAL_GRID_MAX, RESIDUAL_GRID_POINTS)
            .into_iter()
            .find(|&r| pair.d.value(r) < 0.0)
        {
            return invalid(format!("u < v at r = {r:e}"));
        }
        Ok(pair)
    }

    /// The same template with another α.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mu = self.mu.unwrap_or(0.0);
        match self.kind {
            ExampleKind::Example2 => Self::example2(self.n, self.q, self.sigma, mu, alpha),
            ExampleKind::Example4 => Self::example4(self.n, self.q, self.sigma, mu, alpha),
            ExampleKind::Example5 => Self::example5(self.n, self.q, self.sigma, mu, alpha),
            ExampleKind::Example7 | ExampleKind::Custom => arg("this pair has no free constant"),
        }
    }

    pub fn u(&self) -> RadialExpr {
        self.v.plus(&self.d)
    }

    /// The model weight `(1 + |x|²)^{-σ/2}` of the pair's operator.
    pub fn weight(&self) -> Result<WeightField> {
        WeightField::radial_power(self.n, self.sigma)
    }
}

/// `[Lv + F(v)] - [Lu + F(u)]` at radius `r`; non-negative values certify the
/// inequality pointwise.
pub fn strong_residual(pair: &ExamplePair, r: f64) -> Result<f64> {
    if !(r >= 0.0 && r.is_finite()) {
        return arg(format!("radius must be non-negative and finite, got {r}"));
    }
    Ok(residual_at(pair, r))
}

fn residual_at(pair: &ExamplePair, r: f64) -> f64 {
    if pair.d.is_zero() {
        return 0.0;
    }
    let ld = pair.d.model_operator(pair.n, pair.sigma, r);
    -ld - power_difference(pair.v.value(r), pair.d.value(r), pair.q)
}

/// Log-spaced radii on `[10⁻³, r_max]` preceded by `r = 0`.
pub fn residual_grid(r_max: f64, points: usize) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend(log_spaced(RESIDUAL_GRID_MIN, r_max, points));
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualScan {
    pub min_residual: f64,
    pub argmin: f64,
    pub points: usize,
}

/// Minimum of the strong residual over the residual grid.
pub fn residual_scan(pair: &ExamplePair, r_max: f64, points: usize) -> Result<ResidualScan> {
    if !(r_max > RESIDUAL_GRID_MIN && r_max.is_finite()) || points < 2 {
        return arg(format!(
            "need r_max > {RESIDUAL_GRID_MIN} and at least 2 points"
        ));
    }
    let grid = residual_grid(r_max, points);
    let values: Vec<f64> = grid.par_iter().map(|&r| residual_at(pair, r)).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("residual at r = {:e}", grid[i])));
    }
    let (i, min) = values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid is non-empty");
    Ok(ResidualScan {
        min_residual: min,
        argmin: grid[i],
        points: grid.len(),
    })
}

/// Smooth radial cut-off: 1 on `|x - c| ≤ ρ_inner`, 0 beyond `ρ_outer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub rho_inner: f64,
    pub rho_outer: f64,
}

fn flat(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

fn flat_derivative(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp() / (x * x)
    } else {
        0.0
    }
}

impl TestFunction {
    pub fn new(center: Vec<f64>, rho_inner: f64, rho_outer: f64) -> Result<Self> {
        if !(rho_inner > 0.0 && rho_outer > rho_inner && rho_outer.is_finite()) {
            return arg(format!(
                "need 0 < rho_inner < rho_outer, got ({rho_inner}, {rho_outer})"
            ));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return arg("bump centre must be finite");
        }
        Ok(Self {
            center,
            rho_inner,
            rho_outer,
        })
    }

    pub fn centered(n: usize, rho_inner: f64, rho_outer: f64) -> Result<Self> {
        Self::new(vec![0.0; n], rho_inner, rho_outer)
    }

    pub fn is_centered(&self) -> bool {
        self.center.iter().all(|c| *c == 0.0)
    }

    /// Profile as a function of the distance `ρ` to the centre.
    pub fn profile(&self, rho: f64) -> f64 {
        let t = (rho - self.rho_inner) / (self.rho_outer - self.rho_inner);
        if t <= 0.0 {
            1.0
        } else if t >= 1.0 {
            0.0
        } else {
            let (a, b) = (flat(1.0 - t), flat(t));
            a / (a + b)
        }
    }

    /// `dζ/dρ`.
    pub fn profile_derivative(&self, rho: f64) -> f64 {
        let width = self.rho_outer - self.rho_inner;
        let t = (rho - self.rho_inner) / width;
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        let (a, b) = (flat(1.0 - t), flat(t));
        let (da, db) = (-flat_derivative(1.0 - t), flat_derivative(t));
        (da * b - a * db) / ((a + b) * (a + b)) / width
    }
}

/// The default battery: origin-centred bumps with `ρ_outer` log-spaced in
/// `[1, 100]` and `ρ_inner = ρ_outer / 2`.
pub fn bump_battery(n: usize) -> Vec<TestFunction> {
    log_spaced(BUMP_RADII.0, BUMP_RADII.1, BUMP_COUNT)
        .into_iter()
        .map(|rho| TestFunction {
            center: vec![0.0; n],
            rho_inner: rho / 2.0,
            rho_outer: rho,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakFormOptions {
    pub rel_tol: f64,
    /// Composite Gauss-Legendre panels per axis for off-centre bumps.
    pub panels: usize,
    pub order: usize,
}

impl Default for WeakFormOptions {
    fn default() -> Self {
        Self {
            rel_tol: WEAK_FORM_REL_TOL,
            panels: 16,
            order: 8,
        }
    }
}

/// Value of the weak form together with the size of its two integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakGap {
    pub gap: f64,
    /// `∫ |a∇(u-v)·∇ζ| + ∫ |F(u) - F(v)| ζ`.
    pub magnitude: f64,
}

impl WeakGap {
    pub fn passes(&self) -> bool {
        self.gap >= -WEAK_FORM_SLACK * self.magnitude.max(1.0)
    }
}

/// `∫ a∇(u-v)·∇ζ dx - ∫ (F(u) - F(v)) ζ dx`.
pub fn weak_form_gap(
    pair: &ExamplePair,
    w: &WeightField,
    zeta: &TestFunction,
    opts: &WeakFormOptions,
) -> Result<WeakGap> {
    let n = pair.n;
    if w.dimension() != n || zeta.center.len() != n {
        return arg(format!(
            "pair, weight and bump dimensions differ: {n}, {}, {}",
            w.dimension(),
            zeta.center.len()
        ));
    }
    if pair.d.is_zero() {
        return Ok(WeakGap {
            gap: 0.0,
            magnitude: 0.0,
        });
    }
    let radial_weight = !matches!(w.kind(), WeightKind::Matrix(_));
    if zeta.is_centered() && radial_weight {
        radial_gap(pair, w, zeta, opts)
    } else {
        grid_gap(pair, w, zeta, opts)
    }
}

fn radial_gap(
    pair: &ExamplePair,
    w: &WeightField,
    zeta: &TestFunction,
    opts: &WeakFormOptions,
) -> Result<WeakGap> {
    let n = pair.n as i32;
    let quad = QuadOptions::default()
        .with_rel_tol(opts.rel_tol)
        .with_spacing(Spacing::Linear);
    let weight = |r: f64| w.radial_weight(r).unwrap_or(0.0);
    let grad =
        |r: f64| weight(r) * pair.d.derivative(r) * zeta.profile_derivative(r) * r.powi(n - 1);
    let source = |r: f64| {
        power_difference(pair.v.value(r), pair.d.value(r), pair.q) * zeta.profile(r) * r.powi(n - 1)
    };
    let mut gap = 0.0;
    let mut magnitude = 0.0;
    for (a, b) in [(0.0, zeta.rho_inner), (zeta.rho_inner, zeta.rho_outer)] {
        let g = if a == 0.0 {
            0.0
        } else {
            integrate(grad, a, b, &quad)?.value
        };
        let ga = if a == 0.0 {
            0.0
        } else {
            integrate(|r| grad(r).abs(), a, b, &quad)?.value
        };
        let f = integrate(source, a, b, &quad)?.value;
        let fa = integrate(|r| source(r).abs(), a, b, &quad)?.value;
        gap += g - f;
        magnitude += ga + fa;
    }
    let omega = unit_sphere_area(pair.n);
    Ok(WeakGap {
        gap: omega * gap,
        magnitude: omega * magnitude,
    })
}

fn grid_gap(
    pair: &ExamplePair,
    w: &WeightField,
    zeta: &TestFunction,
    opts: &WeakFormOptions,
) -> Result<WeakGap> {
    let n = pair.n;
    if n > 3 {
        return Err(Error::Unsupported(format!(
            "off-centre weak-form quadrature supports n <= 3, got {n}"
        )));
    }
    if opts.panels == 0 || opts.order == 0 {
        return arg("quadrature needs at least one panel and one node");
    }
    let (nodes, weights) = gauss_legendre(opts.order);
    let rho = zeta.rho_outer;
    let panel = 2.0 * rho / opts.panels as f64;
    // 1-D abscissae and weights on [-ρ, ρ]
    let mut xs = Vec::with_capacity(opts.panels * opts.order);
    let mut ws = Vec::with_capacity(xs.capacity());
    for k in 0..opts.panels {
        let mid = -rho + (k as f64 + 0.5) * panel;
        for (x, wt) in nodes.iter().zip(&weights) {
            xs.push(mid + 0.5 * panel * x);
            ws.push(0.5 * panel * wt);
        }
    }
    let m = xs.len();
    let total = m.pow(n as u32);
    let (gap, magnitude) = (0..m)
        .into_par_iter()
        .map(|first| {
            let mut x = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut a = vec![0.0; n * n];
            let (mut gap, mut mag) = (0.0, 0.0);
            for rest in 0..total / m {
                let mut idx = rest;
                let mut wt = ws[first];
                y[0] = xs[first];
                for d in 1..n {
                    let i = idx % m;
                    idx /= m;
                    y[d] = xs[i];
                    wt *= ws[i];
                }
                let dist = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dist >= rho {
                    continue;
                }
                for d in 0..n {
                    x[d] = zeta.center[d] + y[d];
                }
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let z = zeta.profile(dist);
                let dz = zeta.profile_derivative(dist);
                let mut g = 0.0;
                if dz != 0.0 {
                    // ∇(u-v) = (d'/r) x, ∇ζ = ζ'(ρ) y / ρ
                    let d1 = pair.d.d1(r);
                    w.coefficients_unchecked(&x, &mut a);
                    let mut form = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            form += a[i * n + j] * x[i] * y[j];
                        }
                    }
                    g = d1 * form * dz / dist;
                }
                let f = power_difference(pair.v.value(r), pair.d.value(r), pair.q) * z;
                gap += wt * (g - f);
                mag += wt * (g.abs() + f.abs());
            }
            (gap, mag)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if !(gap.is_finite() && magnitude.is_finite()) {
        return Err(Error::NonFinite("weak-form integrand".into()));
    }
    Ok(WeakGap { gap, magnitude })
}

/// Outcome of the α search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaCertificate {
    pub direction: AlphaDirection,
    /// Returned α: the bisection boundary moved by a factor 2 into the admissible side.
    pub alpha: f64,
    /// Last admissible α found by bisection.
    pub boundary_alpha: f64,
    /// Minimum residual at `alpha`.
    pub margin: f64,
    /// Minimum residual one further factor 2 into the admissible side.
    pub margin_beyond: f64,
}

/// Finds α for templates with a free constant. Pairs without one are returned
/// unchanged with no certificate.
pub fn calibrate_alpha(
    pair: &ExamplePair,
    r_max: f64,
    grid_points: usize,
) -> Result<(ExamplePair, Option<AlphaCertificate>)> {
    let Some(direction) = pair.kind.alpha_direction() else {
        return Ok((pair.clone(), None));
    };
    let grid = residual_grid(r_max, grid_points);
    let mut best = f64::NEG_INFINITY;
    let mut margin = |log2_alpha: f64| -> Result<f64> {
        let candidate = pair.with_alpha(log2_alpha.exp2())?;
        let m = grid
            .par_iter()
            .map(|&r| residual_at(&candidate, r))
            .reduce(|| f64::INFINITY, f64::min);
        if m.is_nan() {
            return Err(Error::NonFinite(format!(
                "residual at alpha = 2^{log2_alpha}"
            )));
        }
        best = best.max(m);
        Ok(m)
    };
    let (lo, hi) = ALPHA_LOG2_RANGE;
    // `good` is admissible, `bad` is not; `sign` points from bad towards good
    let (safe_end, far_end, sign) = match direction {
        AlphaDirection::Large => (hi, lo, 1.0),
        AlphaDirection::Small => (lo, hi, -1.0),
    };
    if margin(safe_end)? < 0.0 {
        return Err(Error::Calibration { max_margin: best });
    }
    let boundary = if margin(far_end)? >= 0.0 {
        far_end
    } else {
        let (mut good, mut bad) = (safe_end, far_end);
        for _ in 0..ALPHA_BISECTION_STEPS {
            if (good - bad).abs() < 1e-12 {
                break;
            }
            let mid = 0.5 * (good + bad);
            if margin(mid)? >= 0.0 {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    };
    let chosen = clamp_log2(boundary + sign);
    let beyond = clamp_log2(chosen + sign);
    let m_chosen = margin(chosen)?;
    let m_beyond = margin(beyond)?;
    if m_chosen < 0.0 || m_beyond < 0.0 {
        return Err(Error::Calibration { max_margin: best });
    }
    let certificate = AlphaCertificate {
        direction,
        alpha: chosen.exp2(),
        boundary_alpha: boundary.exp2(),
        margin: m_chosen,
        margin_beyond: m_beyond,
    };
    Ok((pair.with_alpha(certificate.alpha)?, Some(certificate)))
}

fn clamp_log2(x: f64) -> f64 {
    x.clamp(ALPHA_LOG2_RANGE.0, ALPHA_LOG2_RANGE.1)
}

/// `(∫_Q a∇f·∇f)^{1/2} + (∫_Q |f|^{q̂})^{1/q̂}` over the ball `Q = B_ρ`, `q̂ = max(1, q)`.
pub fn sobolev_norm(f: &RadialExpr, rho: f64, w: &WeightField, q: f64) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return arg(format!("ball radius must be positive, got {rho}"));
    }
    if !(q > 0.0 && q.is_finite()) {
        return arg(format!("q must be positive, got {q}"));
    }
    f.check()?;
    let n = w.dimension();
    let q_hat = q.max(1.0);
    let quad = QuadOptions::default()
        .with_rel_tol(1e-10)
        .with_spacing(Spacing::Linear);
    let angular = angular_average(w)?;
    let energy = integrate(
        |r| {
            let df = f.derivative(r);
            angular(r) * df * df * r.powi(n as i32 - 1)
        },
        0.0,
        rho,
        &quad,
    )?
    .value;
    let mass = integrate(
        |r| f.value(r).abs().powf(q_hat) * r.powi(n as i32 - 1),
        0.0,
        rho,
        &quad,
    )?
    .value;
    let omega = unit_sphere_area(n);
    let value = (omega * energy).max(0.0).sqrt() + (omega * mass).powf(1.0 / q_hat);
    if !value.is_finite() {
        return Err(Error::NonFinite("Sobolev-type norm".into()));
    }
    Ok(value)
}

/// `r ↦` mean over the unit sphere of `θᵀ a(rθ) θ`.
fn angular_average(w: &WeightField) -> Result<Box<dyn Fn(f64) -> f64 + '_>> {
    let n = w.dimension();
    if !matches!(w.kind(), WeightKind::Matrix(_)) {
        return Ok(Box::new(move |r| w.radial_weight(r).unwrap_or(0.0)));
    }
    let dirs: Vec<(Vec<f64>, f64)> = match n {
        2 => {
            let k = 64;
            (0..k)
                .map(|i| {
                    let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                    (vec![t.cos(), t.sin()], 1.0 / k as f64)
                })
                .collect()
        }
        3 => {
            let (z, zw) = gauss_legendre(24);
            let k = 48;
            let mut out = Vec::with_capacity(z.len() * k);
            for (c, cw) in z.iter().zip(&zw) {
                let s = (1.0 - c * c).sqrt();
                for i in 0..k {
                    let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                    out.push((vec![s * t.cos(), s * t.sin(), *c], cw / (2.0 * k as f64)));
                }
            }
            out
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "matrix weights need n <= 3 here, got {n}"
            )));
        }
    };
    Ok(Box::new(move |r| {
        let mut a = vec![0.0; n * n];
        let mut x = vec![0.0; n];
        let mut total = 0.0;
        for (theta, wt) in &dirs {
            for d in 0..n {
                x[d] = r * theta[d];
            }
            w.coefficients_unchecked(&x, &mut a);
            let mut form = 0.0;
            for i in 0..n {
                for j in 0..n {
                    form += a[i * n + j] * theta[i] * theta[j];
                }
            }
            total += wt * form;
        }
        total
    }))
}

/// Infimum of `(F(u) - F(v))(u - v) / |u - v|^{q+1}` over a `samples × samples`
/// grid on `[-10, 10]²` and the line `u = -v`.
pub fn power_gap_constant(q: f64, samples: usize) -> Result<f64> {
    if !(q >= 1.0 && q.is_finite()) {
        return arg(format!("the power gap needs q >= 1, got {q}"));
    }
    if samples < 2 {
        return arg("need at least 2 samples per axis");
    }
    let ratio = |u: f64, v: f64| {
        let d = u - v;
        (signed_power(u, q) - signed_power(v, q)) * d / d.abs().powf(q + 1.0)
    };
    let step = 20.0 / (samples - 1) as f64;
    let grid_min = (0..samples)
        .into_par_iter()
        .map(|i| {
            let u = -10.0 + i as f64 * step;
            (0..samples)
                .filter(|&j| j != i)
                .map(|j| ratio(u, -10.0 + j as f64 * step))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min);
    let line_min = (1..=samples)
        .map(|i| {
            let u = 10.0 * i as f64 / samples as f64;
            ratio(u, -u)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(grid_min.min(line_min))
}

/// Serializable description of a candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleConfig {
    /// `"2"`, `"4"`, `"5"`, `"7"` or `"custom"`.
    pub example: String,
    pub n: usize,
    #[serde(default)]
    pub q: Option<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub mu: Option<f64>,
    /// Fixed α; calibrated when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub u: Option<RadialExpr>,
    #[serde(default)]
    pub v: Option<RadialExpr>,
}

impl ExampleConfig {
    /// Builds the pair, with α = 1 as placeholder when it is to be calibrated.
    pub fn build(&self) -> Result<ExamplePair> {
        let need = |x: Option<f64>, name: &str| {
            x.ok_or_else(|| Error::Argument(format!("example {} needs `{name}`", self.example)))
        };
        let alpha = self.alpha.unwrap_or(1.0);
        match self.example.trim_start_matches("example").trim() {
            "2" => ExamplePair::example2(
                self.n,
                need(self.q, "q")?,
                self.sigma,
                need(self.mu, "mu")?,
                alpha,
            ),
            "4" => ExamplePair::example4(
                self.n,
                need(self.q, "q")?,
                self.sigma,
                need(self.mu, "mu")?,
                alpha,
            ),
            "5" => ExamplePair::example5(
                self.n,
                need(self.q, "q")?,
                self.sigma,
                need(self.mu, "mu")?,
                alpha,
            ),
            "7" => {
                if let Some(q) = self.q {
                    if q != 1.0 {
                        return invalid(format!("this pair needs q = 1, got {q}"));
                    }
                }
                ExamplePair::example7(self.n, self.sigma, need(self.mu, "mu")?)
            }
            "custom" => ExamplePair::custom(
                self.n,
                need(self.q, "q")?,
                self.sigma,
                self.u.clone().unwrap_or_default(),
                self.v.clone().unwrap_or_default(),
            ),
            other => arg(format!(
                "unknown example `{other}`; expected 2, 4, 5, 7 or custom"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub r_max: f64,
    pub grid_points: usize,
    pub weak: WeakFormOptions,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            r_max: RESIDUAL_GRID_MAX,
            grid_points: RESIDUAL_GRID_POINTS,
            weak: WeakFormOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpReport {
    pub rho_inner: f64,
    pub rho_outer: f64,
    pub gap: f64,
    pub magnitude: f64,
    pub passed: bool,
}

/// Everything needed to re-check a certified pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub pair: ExamplePair,
    pub calibration: Option<AlphaCertificate>,
    pub residual: ResidualScan,
    pub bumps: Vec<BumpReport>,
    pub min_gap: f64,
    pub passed: bool,
}

/// Calibrates α when `pair.alpha` is to be searched, scans the strong residual
/// and evaluates the weak form on the default bump battery.
pub fn certify(
    pair: &ExamplePair,
    calibrate: bool,
    opts: &CertifyOptions,
) -> Result<CertificationReport> {
    let (pair, calibration) = if calibrate {
        calibrate_alpha(pair, opts.r_max, opts.grid_points)?
    } else {
        (pair.clone(), None)
    };
    let residual = residual_scan(&pair, opts.r_max, opts.grid_points)?;
    let w = pair.weight()?;
    let bumps = bump_battery(pair.n)
        .par_iter()
        .map(|zeta| {
            let g = weak_form_gap(&pair, &w, zeta, &opts.weak)?;
            Ok(BumpReport {
                rho_inner: zeta.rho_inner,
                rho_outer: zeta.rho_outer,
                gap: g.gap,
                magnitude: g.magnitude,
                passed: g.passes(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let min_gap = bumps.iter().map(|b| b.gap).fold(f64::INFINITY, f64::min);
    let passed = residual.min_residual >= 0.0 && bumps.iter().all(|b| b.passed);
    Ok(CertificationReport {
        pair,
        calibration,
        residual,
        bumps,
        min_gap,
        passed,
    })
}
