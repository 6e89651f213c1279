//! Coefficient fields of divergence-form operators `Lu = Σ (a_ij u_{x_i})_{x_j}`,
//! condensers, and the pointwise quadratic form `Σ a_ij ξ_i ξ_j`.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Largest dimension accepted for general coefficient fields.
pub const MAX_DIMENSION: usize = 10;

/// Quadratic-form values below `-NEGATIVITY_TOL` mark an invalid field.
pub const NEGATIVITY_TOL: f64 = 1e-12;

pub type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Writes the row-major `n × n` coefficient matrix at `x` into `out`.
pub type MatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum WeightKind {
    /// `a_ij(x) = (1 + |x|²)^(-σ/2) δ_ij`.
    RadialPower {
        sigma: f64,
    },
    /// `a_ij(x) = w(|x|) δ_ij`.
    Isotropic(RadialFn),
    Matrix(MatrixFn),
}

impl fmt::Debug for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightKind::RadialPower { sigma } => write!(f, "RadialPower {{ sigma: {sigma} }}"),
            WeightKind::Isotropic(_) => f.write_str("Isotropic(..)"),
            WeightKind::Matrix(_) => f.write_str("Matrix(..)"),
        }
    }
}

/// Constants `(A, σ)` of the decay condition `sup_{R/2<|x|<R} Σ a_ij² ≤ A R^(-2σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConstants {
    pub a: f64,
    pub sigma: f64,
}

/// The coefficient matrix `a_ij(x)` of the operator.
#[derive(Clone, Debug)]
pub struct WeightField {
    dimension: usize,
    kind: WeightKind,
    decay: Option<DecayConstants>,
}

fn check_dimension(n: usize) -> Result<()> {
    if !(2..=MAX_DIMENSION).contains(&n) {
        return arg(format!(
            "dimension must lie in [2, {MAX_DIMENSION}], got {n}"
        ));
    }
    Ok(())
}

impl WeightField {
    /// The model weight `(1 + |x|²)^(-σ/2) δ_ij`. Its decay constants are `(n, σ)`.
    pub fn radial_power(n: usize, sigma: f64) -> Result<Self> {
        check_dimension(n)?;
        if !sigma.is_finite() {
            return arg("sigma must be finite");
        }
        Ok(Self {
            dimension: n,
            kind: WeightKind::RadialPower { sigma },
            decay: Some(DecayConstants { a: n as f64, sigma }),
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::radial_power(n, 0.0)
    }

    pub fn isotropic<F>(n: usize, w: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        check_dimension(n)?;
        Ok(Self {
            dimension: n,
            kind: WeightKind::Isotropic(Arc::new(w)),
            decay: None,
        })
    }

    pub fn constant(n: usize, c: f64) -> Result<Self> {
        Self::isotropic(n, move |_| c)
    }

    pub fn zero(n: usize) -> Result<Self> {
        Self::constant(n, 0.0)
    }

    pub fn matrix<F>(n: usize, a: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        check_dimension(n)?;
        Ok(Self {
            dimension: n,
            kind: WeightKind::Matrix(Arc::new(a)),
            decay: None,
        })
    }

    /// Constant diagonal field `diag(d_1, …, d_n)`.
    pub fn diagonal(entries: Vec<f64>) -> Result<Self> {
        let n = entries.len();
        Self::matrix(n, move |_, out| {
            out.fill(0.0);
            for (i, d) in entries.iter().enumerate() {
                out[i * n + i] = *d;
            }
        })
    }

    /// Planar field `Rθ diag(λ1, λ2) Rθᵀ`.
    pub fn rotated_2d(angle: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let a11 = lambda1 * c * c + lambda2 * s * s;
        let a22 = lambda1 * s * s + lambda2 * c * c;
        let a12 = (lambda1 - lambda2) * s * c;
        Self::matrix(2, move |_, out| out.copy_from_slice(&[a11, a12, a12, a22]))
    }

    pub fn with_decay(mut self, decay: DecayConstants) -> Self {
        self.decay = Some(decay);
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn decay(&self) -> Option<DecayConstants> {
        self.decay
    }

    pub fn is_radial(&self) -> bool {
        !matches!(self.kind, WeightKind::Matrix(_))
    }

    /// `σ` when this is the model weight.
    pub fn radial_power_sigma(&self) -> Option<f64> {
        match self.kind {
            WeightKind::RadialPower { sigma } => Some(sigma),
            _ => None,
        }
    }

    /// The scalar weight `w(r)` for radial kinds.
    pub fn radial_weight(&self, r: f64) -> Option<f64> {
        match &self.kind {
            WeightKind::RadialPower { sigma } => Some((1.0 + r * r).powf(-0.5 * sigma)),
            WeightKind::Isotropic(w) => Some(w(r)),
            WeightKind::Matrix(_) => None,
        }
    }

    /// The field multiplied by `c`, i.e. `c · a_ij(x)`.
    pub fn scaled(&self, c: f64) -> Self {
        let n = self.dimension;
        let kind = match &self.kind {
            WeightKind::RadialPower { sigma } => {
                let sigma = *sigma;
                WeightKind::Isotropic(Arc::new(move |r| c * (1.0 + r * r).powf(-0.5 * sigma)))
            }
            WeightKind::Isotropic(w) => {
                let w = Arc::clone(w);
                WeightKind::Isotropic(Arc::new(move |r| c * w(r)))
            }
            WeightKind::Matrix(a) => {
                let a = Arc::clone(a);
                WeightKind::Matrix(Arc::new(move |x, out| {
                    a(x, out);
                    out.iter_mut().for_each(|v| *v *= c);
                }))
            }
        };
        let decay = self.decay.map(|d| DecayConstants {
            a: d.a * c * c,
            sigma: d.sigma,
        });
        Self {
            dimension: n,
            kind,
            decay,
        }
    }

    /// Fills `out` (length n²) with `a_ij(x)`, row-major.
    pub fn coefficients(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dimension;
        if x.len() != n || out.len() != n * n {
            return arg(format!(
                "expected a point of length {n} and a buffer of length {}, got {} and {}",
                n * n,
                x.len(),
                out.len()
            ));
        }
        self.coefficients_unchecked(x, out);
        Ok(())
    }

    pub(crate) fn coefficients_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dimension;
        match &self.kind {
            WeightKind::Matrix(a) => a(x, out),
            _ => {
                let w = self.radial_weight(norm(x)).unwrap_or(0.0);
                out.fill(0.0);
                for i in 0..n {
                    out[i * n + i] = w;
                }
            }
        }
    }

    /// `Σ_{i,j} a_ij(x) ξ_i ξ_j`.
    pub fn quadratic_form(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        let n = self.dimension;
        if x.len() != n || xi.len() != n {
            return arg(format!(
                "dimension mismatch: field has n = {n}, point has {}, vector has {}",
                x.len(),
                xi.len()
            ));
        }
        let value = match &self.kind {
            WeightKind::Matrix(a) => {
                let mut m = vec![0.0; n * n];
                a(x, &mut m);
                bilinear(&m, xi, xi)
            }
            _ => {
                let w = self.radial_weight(norm(x)).unwrap_or(0.0);
                w * xi.iter().map(|v| v * v).sum::<f64>()
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("quadratic form at {x:?}")));
        }
        if value < -NEGATIVITY_TOL {
            return Err(Error::InvalidField(format!(
                "quadratic form is {value:e} < 0 at x = {x:?}, ξ = {xi:?}"
            )));
        }
        Ok(value.max(0.0))
    }

    /// Lower estimate of `sup_{r_in ≤ |x| ≤ r_out} Σ a_ij(x)²`. Exact for the model weight.
    pub fn weight_sup_norm(&self, r_in: f64, r_out: f64, samples: usize) -> Result<f64> {
        if !(r_in > 0.0 && r_out > r_in && r_out.is_finite()) {
            return arg(format!("invalid annulus ({r_in}, {r_out})"));
        }
        if samples == 0 {
            return arg("samples must be at least 1");
        }
        let n = self.dimension;
        match &self.kind {
            WeightKind::RadialPower { sigma } => {
                // (1+r²)^(-σ) is monotone in r: the sup sits at an endpoint
                let r = if *sigma >= 0.0 { r_in } else { r_out };
                Ok(n as f64 * (1.0 + r * r).powf(-sigma))
            }
            WeightKind::Isotropic(w) => {
                let best = radii(r_in, r_out, samples)
                    .map(|r| {
                        let v = w(r);
                        n as f64 * v * v
                    })
                    .fold(0.0, f64::max);
                Ok(best)
            }
            WeightKind::Matrix(a) => {
                let n_radii = (samples as f64).sqrt().ceil() as usize;
                let n_dirs = samples.div_ceil(n_radii);
                let dirs = probe_directions(n, n_dirs);
                let mut m = vec![0.0; n * n];
                let mut x = vec![0.0; n];
                let mut best = 0.0f64;
                for r in radii(r_in, r_out, n_radii) {
                    for d in &dirs {
                        for (xi, di) in x.iter_mut().zip(d) {
                            *xi = r * di;
                        }
                        a(&x, &mut m);
                        best = best.max(m.iter().map(|v| v * v).sum());
                    }
                }
                Ok(best)
            }
        }
    }

    /// Largest `|a_ij(x) - a_ji(x)|` over `probes` random points in `|x| ≤ radius`.
    pub fn symmetry_defect(&self, probes: usize, radius: f64, seed: u64) -> f64 {
        let n = self.dimension;
        let WeightKind::Matrix(a) = &self.kind else {
            return 0.0;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = vec![0.0; n * n];
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
            a(&x, &mut m);
            for i in 0..n {
                for j in 0..i {
                    worst = worst.max((m[i * n + j] - m[j * n + i]).abs());
                }
            }
        }
        worst
    }

    /// Checks symmetry and non-negative definiteness on random probes.
    pub fn validate(&self, probes: usize, radius: f64, seed: u64) -> Result<()> {
        let defect = self.symmetry_defect(probes, radius, seed);
        if defect > NEGATIVITY_TOL {
            return Err(Error::InvalidField(format!(
                "asymmetric coefficients, defect {defect:e}"
            )));
        }
        let n = self.dimension;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
            let xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            self.quadratic_form(&x, &xi)?;
        }
        Ok(())
    }

    /// Whether `a(Px) = P a(x) P` for every coordinate reflection `P`, on probes.
    pub fn is_reflection_invariant(&self, probes: usize, radius: f64, seed: u64) -> bool {
        let n = self.dimension;
        let WeightKind::Matrix(a) = &self.kind else {
            return true;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = vec![0.0; n * n];
        let mut mr = vec![0.0; n * n];
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
            a(&x, &mut m);
            let scale = m.iter().fold(1e-300f64, |s, v| s.max(v.abs()));
            for axis in 0..n {
                let mut y = x.clone();
                y[axis] = -y[axis];
                a(&y, &mut mr);
                for i in 0..n {
                    for j in 0..n {
                        let sign = if (i == axis) != (j == axis) {
                            -1.0
                        } else {
                            1.0
                        };
                        if (mr[i * n + j] - sign * m[i * n + j]).abs() > 1e-12 * scale {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn bilinear(m: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let mut t = 0.0;
        for j in 0..n {
            t += row[j] * b[j];
        }
        s += a[i] * t;
    }
    s
}

fn radii(r_in: f64, r_out: f64, count: usize) -> impl Iterator<Item = f64> {
    let step = if count > 1 {
        (r_out - r_in) / (count - 1) as f64
    } else {
        0.0
    };
    (0..count).map(move |k| {
        if k + 1 == count && count > 1 {
            r_out
        } else {
            r_in + k as f64 * step
        }
    })
}

/// Deterministic unit vectors: the coordinate axes and their diagonals first,
/// then seeded random directions.
fn probe_directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(count.max(2 * n));
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        dirs.push(e);
    }
    let diag = 1.0 / (n as f64).sqrt();
    dirs.push(vec![diag; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while dirs.len() < count {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let len = norm(&v);
        if len > 1e-3 {
            dirs.push(v.into_iter().map(|c| c / len).collect());
        }
    }
    dirs
}

/// Lattice index of a grid node.
pub type CellIndex = Vec<usize>;

/// Uniform Cartesian grid of nodes `origin + h·index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub spacing: f64,
    /// Number of nodes along each axis.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CondenserKind {
    ConcentricBalls {
        r_in: f64,
        r_out: f64,
    },
    GridMask {
        inner: BTreeSet<CellIndex>,
        outer: BTreeSet<CellIndex>,
        grid: GridSpec,
    },
}

/// Plates `(D, G)` in `R^n`: the closed inner plate and the outer plate.
#[derive(Debug, Clone, PartialEq)]
pub struct Condenser {
    kind: CondenserKind,
    dimension: usize,
}

impl Condenser {
    /// `(closed ball B_{r_in}, R^n \ B_{r_out})`.
    pub fn concentric_balls(n: usize, r_in: f64, r_out: f64) -> Result<Self> {
        check_dimension(n)?;
        if !(r_in > 0.0 && r_out > r_in && r_out.is_finite()) {
            return arg(format!("need 0 < r_in < r_out, got ({r_in}, {r_out})"));
        }
        Ok(Self {
            kind: CondenserKind::ConcentricBalls { r_in, r_out },
            dimension: n,
        })
    }

    pub fn grid_mask(
        grid: GridSpec,
        inner: BTreeSet<CellIndex>,
        outer: BTreeSet<CellIndex>,
    ) -> Result<Self> {
        let n = grid.shape.len();
        check_dimension(n)?;
        if grid.origin.len() != n {
            return arg("grid origin and shape have different dimensions");
        }
        if !(grid.spacing > 0.0 && grid.spacing.is_finite()) {
            return arg(format!(
                "grid spacing must be positive, got {}",
                grid.spacing
            ));
        }
        if grid.shape.iter().any(|&s| s < 2) {
            return arg("grid needs at least two nodes per axis");
        }
        if inner.is_empty() || outer.is_empty() {
            return arg("both plates must be nonempty");
        }
        for c in inner.iter().chain(&outer) {
            if c.len() != n || c.iter().zip(&grid.shape).any(|(i, s)| i >= s) {
                return arg(format!("cell {c:?} lies outside the grid {:?}", grid.shape));
            }
        }
        if let Some(c) = inner.intersection(&outer).next() {
            return arg(format!("cell {c:?} belongs to both plates"));
        }
        Ok(Self {
            kind: CondenserKind::GridMask { inner, outer, grid },
            dimension: n,
        })
    }

    pub fn kind(&self) -> &CondenserKind {
        &self.kind
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Config-file description of a weight field, e.g.
/// `{kind = "radial_power", sigma = -1.0, n = 3}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    RadialPower {
        n: usize,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
    Identity {
        n: usize,
    },
    Zero {
        n: usize,
    },
    Constant {
        n: usize,
        value: f64,
    },
    Diagonal {
        entries: Vec<f64>,
    },
    Rotated {
        angle: f64,
        eigenvalues: [f64; 2],
    },
}

impl WeightSpec {
    pub fn dimension(&self) -> usize {
        match self {
            WeightSpec::RadialPower { n, .. }
            | WeightSpec::Identity { n }
            | WeightSpec::Zero { n }
            | WeightSpec::Constant { n, .. } => *n,
            WeightSpec::Diagonal { entries } => entries.len(),
            WeightSpec::Rotated { .. } => 2,
        }
    }

    pub fn build(&self) -> Result<WeightField> {
        match self {
            WeightSpec::RadialPower { n, sigma, scale } => {
                let w = WeightField::radial_power(*n, *sigma)?;
                Ok(match scale {
                    Some(c) => w.scaled(*c),
                    None => w,
                })
            }
            WeightSpec::Identity { n } => WeightField::identity(*n),
            WeightSpec::Zero { n } => WeightField::zero(*n),
            WeightSpec::Constant { n, value } => WeightField::constant(*n, *value),
            WeightSpec::Diagonal { entries } => WeightField::diagonal(entries.clone()),
            WeightSpec::Rotated { angle, eigenvalues } => {
                WeightField::rotated_2d(*angle, eigenvalues[0], eigenvalues[1])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_gives_zero() {
        let w = WeightField::radial_power(3, 0.0).unwrap();
        assert_eq!(
            w.quadratic_form(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0])
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn identity_weight_at_origin() {
        let w = WeightField::radial_power(3, 0.0).unwrap();
        assert_eq!(
            w.quadratic_form(&[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0])
                .unwrap(),
            2.0
        );
        // σ = 0 means weight one everywhere
        assert_eq!(
            w.quadratic_form(&[5.0, -2.0, 1.0], &[1.0, 1.0, 0.0])
                .unwrap(),
            2.0
        );
    }

    #[test]
    fn radial_power_two() {
        let w = WeightField::radial_power(2, 2.0).unwrap();
        let v = w.quadratic_form(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let w = WeightField::radial_power(3, 1.0).unwrap();
        assert!(matches!(
            w.quadratic_form(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            w.quadratic_form(&[1.0, 0.0, 0.0], &[1.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn negative_field_is_rejected() {
        let w = WeightField::diagonal(vec![1.0, -0.5]).unwrap();
        assert!(matches!(
            w.quadratic_form(&[0.0, 0.0], &[0.0, 1.0]),
            Err(Error::InvalidField(_))
        ));
        assert!(w.validate(100, 3.0, 0).is_err());
        // tiny negative round-off is clamped
        let w = WeightField::diagonal(vec![1.0, -1e-14]).unwrap();
        assert_eq!(w.quadratic_form(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn dimension_bounds() {
        assert!(WeightField::radial_power(1, 0.0).is_err());
        assert!(WeightField::radial_power(11, 0.0).is_err());
        assert!(WeightField::radial_power(10, 0.0).is_ok());
    }

    #[test]
    fn sup_norm_examples() {
        let w = WeightField::radial_power(2, 0.0).unwrap();
        assert!((w.weight_sup_norm(1.0, 2.0, 10).unwrap() - 2.0).abs() < 1e-15);
        let w = WeightField::radial_power(3, 2.0).unwrap();
        assert!((w.weight_sup_norm(1.0, 2.0, 10).unwrap() - 0.75).abs() < 1e-15);
        let z = WeightField::matrix(3, |_, out| out.fill(0.0)).unwrap();
        assert_eq!(z.weight_sup_norm(1.0, 2.0, 50).unwrap(), 0.0);
        assert!(w.weight_sup_norm(2.0, 1.0, 10).is_err());
        assert!(w.weight_sup_norm(1.0, 2.0, 0).is_err());
    }

    #[test]
    fn sampled_sup_is_a_lower_bound_and_matches_closed_form() {
        // the isotropic copy of the model weight goes through the sampling path
        for sigma in [-1.5, 0.5, 2.0] {
            let exact = WeightField::radial_power(3, sigma).unwrap();
            let sampled =
                WeightField::isotropic(3, move |r| (1.0 + r * r).powf(-0.5 * sigma)).unwrap();
            let e = exact.weight_sup_norm(1.0, 4.0, 1).unwrap();
            let s = sampled.weight_sup_norm(1.0, 4.0, 64).unwrap();
            assert!(s <= e * (1.0 + 1e-14));
            // endpoints are sampled, so the monotone profile is hit exactly
            assert!((s - e).abs() < 1e-12 * e);
        }
    }

    #[test]
    fn decay_condition_holds_for_model_weight() {
        // sup_{R/2<|x|<R} Σ a_ij² · R^(2σ) stays in a fixed positive band
        for sigma in [-1.0, 0.0, 1.0, 2.5] {
            let w = WeightField::radial_power(3, sigma).unwrap();
            let ratios: Vec<f64> = [10.0, 1e2, 1e3, 1e4, 1e5]
                .iter()
                .map(|r: &f64| w.weight_sup_norm(r / 2.0, *r, 1).unwrap() * r.powf(2.0 * sigma))
                .collect();
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            assert!(lo > 0.0 && hi / lo < 2.0, "σ = {sigma}: {ratios:?}");
        }
    }

    #[test]
    fn rotated_field_is_symmetric_and_not_reflection_invariant() {
        let w = WeightField::rotated_2d(0.4, 1.0, 0.1).unwrap();
        assert!(w.symmetry_defect(100, 5.0, 7) <= 1e-12);
        assert!(w.validate(100, 5.0, 7).is_ok());
        assert!(!w.is_reflection_invariant(10, 5.0, 1));
        let d = WeightField::diagonal(vec![1.0, 0.1]).unwrap();
        assert!(d.is_reflection_invariant(10, 5.0, 1));
    }

    #[test]
    fn asymmetric_matrix_is_detected() {
        let w =
            WeightField::matrix(2, |_, out| out.copy_from_slice(&[1.0, 0.3, 0.0, 1.0])).unwrap();
        assert!(w.symmetry_defect(10, 1.0, 0) > 0.1);
        assert!(matches!(
            w.validate(10, 1.0, 0),
            Err(Error::InvalidField(_))
        ));
    }

    #[test]
    fn scaled_multiplies_form() {
        let w = WeightField::radial_power(2, 1.0).unwrap();
        let s = w.scaled(3.0);
        let x = [0.3, 1.2];
        let xi = [0.7, -0.2];
        let a = w.quadratic_form(&x, &xi).unwrap();
        let b = s.quadratic_form(&x, &xi).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-14);
    }

    #[test]
    fn condenser_invariants() {
        assert!(Condenser::concentric_balls(3, 1.0, 2.0).is_ok());
        assert!(Condenser::concentric_balls(3, 2.0, 2.0).is_err());
        assert!(Condenser::concentric_balls(3, 0.0, 2.0).is_err());
        let grid = GridSpec {
            origin: vec![0.0, 0.0],
            spacing: 0.5,
            shape: vec![4, 4],
        };
        let inner: BTreeSet<_> = [vec![1, 1]].into_iter().collect();
        let outer: BTreeSet<_> = [vec![0, 0], vec![3, 3]].into_iter().collect();
        assert!(Condenser::grid_mask(grid.clone(), inner.clone(), outer.clone()).is_ok());
        let clash: BTreeSet<_> = [vec![1, 1]].into_iter().collect();
        assert!(Condenser::grid_mask(grid.clone(), inner.clone(), clash).is_err());
        assert!(Condenser::grid_mask(grid.clone(), BTreeSet::new(), outer.clone()).is_err());
        let outside: BTreeSet<_> = [vec![4, 0]].into_iter().collect();
        assert!(Condenser::grid_mask(grid, inner, outside).is_err());
    }

    #[test]
    fn weight_spec_from_toml() {
        let spec: WeightSpec =
            toml::from_str("kind = \"radial_power\"\nsigma = -1.0\nn = 3\n").unwrap();
        assert_eq!(
            spec,
            WeightSpec::RadialPower {
                n: 3,
                sigma: -1.0,
                scale: None
            }
        );
        let w = spec.build().unwrap();
        assert_eq!(w.radial_power_sigma(), Some(-1.0));
        assert!(toml::from_str::<WeightSpec>("kind = \"zero\"\nn = 2\nbogus = 1\n").is_err());
        let rot: WeightSpec =
            toml::from_str("kind = \"rotated\"\nangle = 0.5\neigenvalues = [1.0, 0.2]\n").unwrap();
        assert_eq!(rot.build().unwrap().dimension(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quadratic_form_is_homogeneous_of_degree_two(
                sigma in -3.0f64..3.0,
                x in prop::collection::vec(-5.0f64..5.0, 3),
                xi in prop::collection::vec(-2.0f64..2.0, 3),
                c in -4.0f64..4.0,
            ) {
                let w = WeightField::radial_power(3, sigma).unwrap();
                let base = w.quadratic_form(&x, &xi).unwrap();
                let cxi: Vec<f64> = xi.iter().map(|v| c * v).collect();
                let scaled = w.quadratic_form(&x, &cxi).unwrap();
                prop_assert!((scaled - c * c * base).abs() <= 1e-12 * (c * c * base).abs().max(1e-300));
            }

            #[test]
            fn rotated_form_is_nonnegative(
                angle in 0.0f64..6.3,
                l1 in 0.0f64..3.0,
                l2 in 0.0f64..3.0,
                xi in prop::collection::vec(-2.0f64..2.0, 2),
            ) {
                let w = WeightField::rotated_2d(angle, l1, l2).unwrap();
                prop_assert!(w.quadratic_form(&[0.0, 0.0], &xi).unwrap() >= 0.0);
            }
        }
    }
}
