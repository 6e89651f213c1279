//! Grid minimization of the capacity energy `∫ (Σ a_ij φ_{x_i} φ_{x_j})^{p/2} dx`.
//!
//! Unknowns live on the nodes of a uniform grid. Every grid cube is split into
//! the `n!` Kuhn simplices `v_0 → v_0 + e_{π(1)} → … → v_0 + Σ e_{π(k)}`; on each
//! simplex the piecewise-linear interpolant has the gradient whose `π(k)`-th
//! component is the forward difference along the `k`-th path edge. The grid
//! function is therefore Lipschitz and admissible, and the discrete energy is
//!
//! ```text
//! E[φ] = Σ_cubes Σ_π Q(a(x_c), ∇_π φ)^{p/2} · h^n / n!
//! ```
//!
//! with the coefficients frozen at the cube centre `x_c`. Halving the spacing
//! refines the triangulation, so nested masks give nested feasible sets.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::operator::{Condenser, CondenserKind, GridSpec, WeightField, WeightKind};
use crate::radial::{check_exponent, CapacityResult, Diagnostics, Method};

/// Largest number of cubes accepted in three dimensions.
pub const MAX_CUBES_3D: usize = 64 * 64 * 64;

/// Slack of the comparison bound check.
pub const PROP1_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeRole {
    Free,
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Linear solve for `p = 2`; otherwise a `p = 2` warm start followed by
    /// projected L-BFGS.
    Auto,
    /// Projected L-BFGS with Armijo backtracking.
    Lbfgs,
    /// Plain projected steepest descent with Armijo backtracking.
    ProjectedGradient,
}

/// How grid nodes are assigned to the plates of an annulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateRule {
    /// Nodes inside the plates.
    Nodal,
    /// Nodes within `h/2` of the plates.
    #[default]
    HalfCell,
    /// All vertices of simplices meeting the plates; the interpolant is then
    /// admissible and the energy bounds the continuum capacity from above for
    /// constant coefficients.
    Conforming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteOptions {
    pub max_iters: usize,
    pub tolerance: f64,
    pub step_rule: StepRule,
}

impl Default for DiscreteOptions {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            tolerance: 1e-9,
            step_rule: StepRule::Auto,
        }
    }
}

enum Coeffs {
    Scalar(Vec<f64>),
    Full(Vec<f64>),
}

/// A grid condenser problem: nodes, plate roles, coefficients and exponent.
pub struct GridProblem {
    grid: GridSpec,
    strides: Vec<usize>,
    roles: Vec<NodeRole>,
    weight: WeightField,
    p: f64,
    reflect: bool,
    annulus: Option<(f64, f64)>,
    coeffs: Coeffs,
    cubes: Vec<usize>,
    // per Kuhn simplex: node offsets along the path and the axis of each edge
    paths: Vec<([usize; 4], [usize; 3])>,
}

impl std::fmt::Debug for GridProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridProblem")
            .field("grid", &self.grid)
            .field("p", &self.p)
            .field("reflect", &self.reflect)
            .field("annulus", &self.annulus)
            .field("free", &self.free_count())
            .finish()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for a in 0..used.len() {
            if !used[a] {
                used[a] = true;
                prefix.push(a);
                rec(prefix, used, out);
                prefix.pop();
                used[a] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Smallest and largest distance from the origin to the Kuhn simplex
/// `{lo + h·y : 1 ≥ y_{π(1)} ≥ … ≥ y_{π(n)} ≥ 0}`.
fn simplex_distance_range(lo: &[f64], h: f64, perm: &[usize]) -> (f64, f64) {
    // nearest point: isotonic (non-increasing) regression of -lo/h along π, clamped to [0, 1]
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(perm.len());
    for &a in perm {
        let mut mean = -lo[a] / h;
        let mut len = 1;
        while let Some(&(m, l)) = blocks.last() {
            if m >= mean {
                break;
            }
            mean = (m * l as f64 + mean * len as f64) / (l + len) as f64;
            len += l;
            blocks.pop();
        }
        blocks.push((mean, len));
    }
    let mut near = 0.0;
    let mut k = 0;
    for (mean, len) in blocks {
        let y = mean.clamp(0.0, 1.0);
        for &a in &perm[k..k + len] {
            let x = lo[a] + h * y;
            near += x * x;
        }
        k += len;
    }
    // farthest point: a vertex
    let mut x = lo.to_vec();
    let mut far = x.iter().map(|v| v * v).sum::<f64>();
    for &a in perm {
        x[a] += h;
        far = far.max(x.iter().map(|v| v * v).sum::<f64>());
    }
    (near.sqrt(), far.sqrt())
}

/// Marks every vertex of a Kuhn simplex meeting `|x| ≤ r_in` as inner and every
/// vertex of a simplex reaching `|x| ≥ r_out` as outer.
fn conforming_roles(grid: &GridSpec, r_in: f64, r_out: f64, roles: &mut [NodeRole]) {
    let n = grid.shape.len();
    let h = grid.spacing;
    let mut strides = vec![1usize; n];
    for d in 1..n {
        strides[d] = strides[d - 1] * grid.shape[d - 1];
    }
    let perms = permutations(n);
    let mut idx = vec![0usize; n];
    let cube_count: usize = grid.shape.iter().map(|s| s - 1).product();
    for c in 0..cube_count {
        let mut rest = c;
        for d in 0..n {
            idx[d] = rest % (grid.shape[d] - 1);
            rest /= grid.shape[d] - 1;
        }
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        let lo: Vec<f64> = (0..n).map(|d| grid.origin[d] + idx[d] as f64 * h).collect();
        for perm in &perms {
            let (near, far) = simplex_distance_range(&lo, h, perm);
            let role = if near <= r_in {
                NodeRole::Inner
            } else if far >= r_out {
                NodeRole::Outer
            } else {
                continue;
            };
            let mut k = base;
            for j in 0..=n {
                if j > 0 {
                    k += strides[perm[j - 1]];
                }
                // a simplex touching both plates cannot occur once h√n < r_out - r_in
                if roles[k] == NodeRole::Free || role == NodeRole::Inner {
                    roles[k] = role;
                }
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).product::<usize>() as f64
}

impl GridProblem {
    fn build(
        grid: GridSpec,
        roles: Vec<NodeRole>,
        weight: WeightField,
        p: f64,
        reflect: bool,
        annulus: Option<(f64, f64)>,
    ) -> Result<Self> {
        check_exponent(p)?;
        let n = grid.shape.len();
        if !(2..=3).contains(&n) {
            return Err(Error::Unsupported(format!(
                "grid problems support n = 2 or 3, got {n}"
            )));
        }
        if weight.dimension() != n {
            return arg(format!(
                "weight has dimension {}, grid has {n}",
                weight.dimension()
            ));
        }
        let cube_count: usize = grid.shape.iter().map(|s| s - 1).product();
        if n == 3 && cube_count > MAX_CUBES_3D {
            return Err(Error::Unsupported(format!(
                "{cube_count} cubes exceed the 3-D limit of 64³"
            )));
        }
        let mut strides = vec![1; n];
        for d in 1..n {
            strides[d] = strides[d - 1] * grid.shape[d - 1];
        }
        let node_count: usize = grid.shape.iter().product();
        debug_assert_eq!(roles.len(), node_count);

        let paths = permutations(n)
            .into_iter()
            .map(|perm| {
                let mut offsets = [0usize; 4];
                let mut axes = [0usize; 3];
                for (k, &axis) in perm.iter().enumerate() {
                    offsets[k + 1] = offsets[k] + strides[axis];
                    axes[k] = axis;
                }
                (offsets, axes)
            })
            .collect();

        // cube corners, keeping only cubes whose energy can be nonzero
        let corner_offsets: Vec<usize> = (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .filter(|d| mask >> d & 1 == 1)
                    .map(|d| strides[d])
                    .sum()
            })
            .collect();
        let mut cubes = Vec::new();
        let mut all_cubes = Vec::with_capacity(cube_count);
        let mut idx = vec![0usize; n];
        loop {
            let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            all_cubes.push((base, idx.clone()));
            let first = roles[base];
            if corner_offsets
                .iter()
                .any(|o| roles[base + o] == NodeRole::Free || roles[base + o] != first)
            {
                cubes.push(base);
            }
            let mut d = 0;
            loop {
                if d == n {
                    break;
                }
                idx[d] += 1;
                if idx[d] < grid.shape[d] - 1 {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }

        // coefficients at the centres of the active cubes, indexed like `cubes`
        let active: std::collections::HashSet<usize> = cubes.iter().copied().collect();
        let mut x = vec![0.0; n];
        let coeffs = match weight.kind() {
            WeightKind::Matrix(_) => {
                let mut data = Vec::with_capacity(cubes.len() * n * n);
                let mut m = vec![0.0; n * n];
                for (base, idx) in &all_cubes {
                    if !active.contains(base) {
                        continue;
                    }
                    for d in 0..n {
                        x[d] = grid.origin[d] + (idx[d] as f64 + 0.5) * grid.spacing;
                    }
                    weight.coefficients_unchecked(&x, &mut m);
                    data.extend_from_slice(&m);
                }
                Coeffs::Full(data)
            }
            _ => {
                let mut data = Vec::with_capacity(cubes.len());
                for (base, idx) in &all_cubes {
                    if !active.contains(base) {
                        continue;
                    }
                    for d in 0..n {
                        x[d] = grid.origin[d] + (idx[d] as f64 + 0.5) * grid.spacing;
                    }
                    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    data.push(weight.radial_weight(r).unwrap_or(0.0));
                }
                Coeffs::Scalar(data)
            }
        };
        let bad = match &coeffs {
            Coeffs::Scalar(v) | Coeffs::Full(v) => v.iter().any(|c| !c.is_finite()),
        };
        if bad {
            return Err(Error::NonFinite("weight coefficients on the grid".into()));
        }
        if let Coeffs::Scalar(v) = &coeffs {
            if let Some(c) = v.iter().find(|c| **c < 0.0) {
                return Err(Error::InvalidField(format!(
                    "negative weight {c} on the grid"
                )));
            }
        }

        Ok(Self {
            grid,
            strides,
            roles,
            weight,
            p,
            reflect,
            annulus,
            coeffs,
            cubes,
            paths,
        })
    }

    /// Problem for a grid-mask condenser. Box-boundary nodes outside the inner
    /// plate join the outer plate.
    pub fn from_condenser(condenser: &Condenser, weight: WeightField, p: f64) -> Result<Self> {
        let CondenserKind::GridMask { inner, outer, grid } = condenser.kind() else {
            return arg(
                "grid problems need a grid-mask condenser; use GridProblem::annulus for balls",
            );
        };
        let n = grid.shape.len();
        let node_count: usize = grid.shape.iter().product();
        let mut roles = vec![NodeRole::Free; node_count];
        let index = |c: &[usize]| -> usize {
            let mut s = 1;
            let mut k = 0;
            for d in 0..n {
                k += c[d] * s;
                s *= grid.shape[d];
            }
            k
        };
        for c in inner {
            roles[index(c)] = NodeRole::Inner;
        }
        for c in outer {
            roles[index(c)] = NodeRole::Outer;
        }
        let mut idx = vec![0usize; n];
        for k in 0..node_count {
            let mut rest = k;
            for d in 0..n {
                idx[d] = rest % grid.shape[d];
                rest /= grid.shape[d];
            }
            let on_boundary = idx
                .iter()
                .zip(&grid.shape)
                .any(|(i, s)| *i == 0 || *i + 1 == *s);
            if on_boundary && roles[k] == NodeRole::Free {
                roles[k] = NodeRole::Outer;
            }
        }
        Self::build(grid.clone(), roles, weight, p, false, None)
    }

    /// Annulus `r_in ≤ |x| ≤ r_out` on a grid of spacing `h` with the default
    /// plate rule.
    /// With `reflect`, only the positive orthant is stored and the energy is
    /// multiplied by `2^n`; the weight must be invariant under coordinate
    /// reflections.
    pub fn annulus(
        weight: WeightField,
        p: f64,
        r_in: f64,
        r_out: f64,
        h: f64,
        reflect: bool,
    ) -> Result<Self> {
        Self::annulus_with_rule(weight, p, r_in, r_out, h, reflect, PlateRule::default())
    }

    pub fn annulus_with_rule(
        weight: WeightField,
        p: f64,
        r_in: f64,
        r_out: f64,
        h: f64,
        reflect: bool,
        rule: PlateRule,
    ) -> Result<Self> {
        let n = weight.dimension();
        if !(r_in > 0.0 && r_out > r_in && r_out.is_finite()) {
            return arg(format!("need 0 < r_in < r_out, got ({r_in}, {r_out})"));
        }
        if !(h > 0.0 && h < r_out - r_in) {
            return arg(format!(
                "spacing {h} must be positive and below the annulus width"
            ));
        }
        if reflect && !weight.is_reflection_invariant(64, r_out, 0) {
            return arg("the weight is not invariant under coordinate reflections");
        }
        let m = (r_out / h - 1e-9).ceil() as usize;
        let (origin, shape) = if reflect {
            (vec![0.0; n], vec![m + 1; n])
        } else {
            (vec![-(m as f64) * h; n], vec![2 * m + 1; n])
        };
        let grid = GridSpec {
            origin,
            spacing: h,
            shape,
        };
        let node_count: usize = grid.shape.iter().product();
        let mut roles = vec![NodeRole::Free; node_count];
        match rule {
            PlateRule::Conforming => conforming_roles(&grid, r_in, r_out, &mut roles),
            PlateRule::Nodal | PlateRule::HalfCell => {
                let slack = if rule == PlateRule::HalfCell {
                    0.5 * h
                } else {
                    1e-12 * r_out
                };
                for (k, role) in roles.iter_mut().enumerate() {
                    let mut rest = k;
                    let mut r2 = 0.0;
                    for d in 0..n {
                        let x = grid.origin[d] + (rest % grid.shape[d]) as f64 * h;
                        rest /= grid.shape[d];
                        r2 += x * x;
                    }
                    let r = r2.sqrt();
                    if r <= r_in + slack {
                        *role = NodeRole::Inner;
                    } else if r >= r_out - slack {
                        *role = NodeRole::Outer;
                    }
                }
            }
        }
        Self::build(grid, roles, weight, p, reflect, Some((r_in, r_out)))
    }

    /// Halves the spacing. A new node at the midpoint of a coarse Kuhn edge
    /// belongs to a plate only when both edge ends do, so every coarse feasible
    /// function stays feasible.
    pub fn refine(&self) -> Result<Self> {
        let n = self.dimension();
        let shape: Vec<usize> = self.grid.shape.iter().map(|s| 2 * (s - 1) + 1).collect();
        let grid = GridSpec {
            origin: self.grid.origin.clone(),
            spacing: self.grid.spacing / 2.0,
            shape,
        };
        let node_count: usize = grid.shape.iter().product();
        let mut roles = Vec::with_capacity(node_count);
        let mut fine = vec![0usize; n];
        for k in 0..node_count {
            let mut rest = k;
            for d in 0..n {
                fine[d] = rest % grid.shape[d];
                rest /= grid.shape[d];
            }
            let mut a = 0;
            let mut b = 0;
            for d in 0..n {
                a += (fine[d] / 2) * self.strides[d];
                b += (fine[d] / 2 + fine[d] % 2) * self.strides[d];
            }
            let (ra, rb) = (self.roles[a], self.roles[b]);
            roles.push(if ra == rb { ra } else { NodeRole::Free });
        }
        Self::build(
            grid,
            roles,
            self.weight.clone(),
            self.p,
            self.reflect,
            self.annulus,
        )
    }

    /// The same grid and plates with another weight.
    pub fn with_weight(&self, weight: WeightField) -> Result<Self> {
        if self.reflect && !weight.is_reflection_invariant(64, self.extent(), 0) {
            return arg("the weight is not invariant under coordinate reflections");
        }
        Self::build(
            self.grid.clone(),
            self.roles.clone(),
            weight,
            self.p,
            self.reflect,
            self.annulus,
        )
    }

    pub fn with_exponent(&self, p: f64) -> Result<Self> {
        Self::build(
            self.grid.clone(),
            self.roles.clone(),
            self.weight.clone(),
            p,
            self.reflect,
            self.annulus,
        )
    }

    fn extent(&self) -> f64 {
        self.grid
            .origin
            .iter()
            .zip(&self.grid.shape)
            .map(|(o, s)| {
                o.abs()
                    .max((o + (*s as f64 - 1.0) * self.grid.spacing).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn dimension(&self) -> usize {
        self.grid.shape.len()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn weight(&self) -> &WeightField {
        &self.weight
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn annulus_radii(&self) -> Option<(f64, f64)> {
        self.annulus
    }

    pub fn free_count(&self) -> usize {
        self.roles.iter().filter(|r| **r == NodeRole::Free).count()
    }

    pub fn node_position(&self, k: usize) -> Vec<f64> {
        let mut rest = k;
        (0..self.dimension())
            .map(|d| {
                let i = rest % self.grid.shape[d];
                rest /= self.grid.shape[d];
                self.grid.origin[d] + i as f64 * self.grid.spacing
            })
            .collect()
    }

    fn scale(&self) -> f64 {
        let n = self.dimension();
        let mult = if self.reflect {
            (1u32 << n) as f64
        } else {
            1.0
        };
        mult * self.grid.spacing.powi(n as i32) / factorial(n)
    }

    fn is_degenerate(&self) -> bool {
        match &self.coeffs {
            Coeffs::Scalar(v) | Coeffs::Full(v) => v.iter().all(|c| *c == 0.0),
        }
    }

    /// Energy at `phi` (full node vector); accumulates the gradient when given.
    pub fn energy(&self, phi: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self.energy_with_exponent(self.p, phi, grad)
    }

    fn energy_with_exponent(&self, p: f64, phi: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match (self.dimension(), &self.coeffs) {
            (2, Coeffs::Scalar(c)) => self.kernel::<2, true>(c, p, phi, grad),
            (2, Coeffs::Full(c)) => self.kernel::<2, false>(c, p, phi, grad),
            (_, Coeffs::Scalar(c)) => self.kernel::<3, true>(c, p, phi, grad),
            (_, Coeffs::Full(c)) => self.kernel::<3, false>(c, p, phi, grad),
        }
    }

    fn kernel<const N: usize, const SCALAR: bool>(
        &self,
        coeffs: &[f64],
        p: f64,
        phi: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let inv_h = 1.0 / self.grid.spacing;
        let scale = self.scale();
        let half_p = 0.5 * p;
        let quadratic = half_p == 1.0;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let mut xi = [0.0f64; N];
        let mut axi = [0.0f64; N];
        let mut total = 0.0;
        for (ci, &base) in self.cubes.iter().enumerate() {
            let m = if SCALAR {
                &coeffs[ci..ci + 1]
            } else {
                &coeffs[ci * N * N..(ci + 1) * N * N]
            };
            for (offsets, axes) in &self.paths {
                for k in 0..N {
                    xi[axes[k]] = (phi[base + offsets[k + 1]] - phi[base + offsets[k]]) * inv_h;
                }
                let mut q = 0.0;
                for i in 0..N {
                    axi[i] = if SCALAR {
                        m[0] * xi[i]
                    } else {
                        (0..N).map(|j| m[i * N + j] * xi[j]).sum()
                    };
                    q += xi[i] * axi[i];
                }
                if q <= 0.0 {
                    continue;
                }
                let qp = if quadratic { q } else { q.powf(half_p) };
                total += qp;
                if let Some(g) = grad.as_deref_mut() {
                    let factor = if quadratic { 2.0 } else { p * qp / q } * scale * inv_h;
                    for k in 0..N {
                        let c = factor * axi[axes[k]];
                        g[base + offsets[k + 1]] += c;
                        g[base + offsets[k]] -= c;
                    }
                }
            }
        }
        total * scale
    }

    /// Diagonal of the Hessian of the `p`-energy at `phi`, used as preconditioner.
    fn hessian_diagonal(&self, p: f64, phi: &[f64]) -> Vec<f64> {
        let n = self.dimension();
        let inv_h = 1.0 / self.grid.spacing;
        let scale = self.scale();
        let mut diag = vec![0.0; phi.len()];
        let mut xi = [0.0f64; 3];
        let mut m = [0.0f64; 9];
        let mut sums = Vec::new();
        for (ci, &base) in self.cubes.iter().enumerate() {
            match &self.coeffs {
                Coeffs::Scalar(c) => {
                    m.fill(0.0);
                    for d in 0..n {
                        m[d * n + d] = c[ci];
                    }
                }
                Coeffs::Full(c) => m[..n * n].copy_from_slice(&c[ci * n * n..(ci + 1) * n * n]),
            }
            let peak = m[..n * n].iter().fold(0.0f64, |s, v| s.max(v.abs()));
            for (offsets, axes) in &self.paths {
                for k in 0..n {
                    xi[axes[k]] = (phi[base + offsets[k + 1]] - phi[base + offsets[k]]) * inv_h;
                }
                let mut axi = [0.0f64; 3];
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        axi[i] += m[i * n + j] * xi[j];
                    }
                    q += xi[i] * axi[i];
                }
                // Hessian of Q^{p/2} in ξ: p Q^{p/2-1} A + p(p-2) Q^{p/2-2} (Aξ)(Aξ)ᵀ
                let floor = 1e-12 * peak * inv_h * inv_h;
                let qf = q.max(floor);
                let c1 = p * qf.powf(0.5 * p - 1.0);
                let c2 = p * (p - 2.0) * qf.powf(0.5 * p - 2.0);
                sums.clear();
                for j in 0..=n {
                    // node v_j enters ξ[axes[j-1]] with +1/h and ξ[axes[j]] with -1/h
                    let plus = if j >= 1 { Some(axes[j - 1]) } else { None };
                    let minus = if j < n { Some(axes[j]) } else { None };
                    let mut bab = 0.0;
                    let mut ab = 0.0;
                    if let Some(a) = plus {
                        bab += m[a * n + a];
                        ab += axi[a];
                    }
                    if let Some(b) = minus {
                        bab += m[b * n + b];
                        ab -= axi[b];
                    }
                    if let (Some(a), Some(b)) = (plus, minus) {
                        bab -= 2.0 * m[a * n + b];
                    }
                    let val = (c1 * bab + (c2 * ab * ab).max(0.0)) * inv_h * inv_h * scale;
                    sums.push(val);
                }
                for (j, v) in sums.iter().enumerate() {
                    diag[base + offsets[j]] += v;
                }
            }
        }
        diag
    }

    fn initial_guess(&self) -> Vec<f64> {
        let fixed = |role: NodeRole| match role {
            NodeRole::Inner => Some(1.0),
            NodeRole::Outer => Some(0.0),
            NodeRole::Free => None,
        };
        if let Some((r_in, r_out)) = self.annulus {
            return (0..self.roles.len())
                .map(|k| {
                    fixed(self.roles[k]).unwrap_or_else(|| {
                        let r = self
                            .node_position(k)
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        ((r_out - r) / (r_out - r_in)).clamp(0.0, 1.0)
                    })
                })
                .collect();
        }
        let d_in = self.grid_distance(NodeRole::Inner);
        let d_out = self.grid_distance(NodeRole::Outer);
        (0..self.roles.len())
            .map(|k| {
                fixed(self.roles[k]).unwrap_or_else(|| {
                    let (a, b) = (d_in[k] as f64, d_out[k] as f64);
                    if a + b == 0.0 {
                        0.5
                    } else {
                        b / (a + b)
                    }
                })
            })
            .collect()
    }

    /// Lattice (Manhattan) distance to the nearest node with `role`.
    fn grid_distance(&self, role: NodeRole) -> Vec<u32> {
        let n = self.dimension();
        let mut dist = vec![u32::MAX; self.roles.len()];
        let mut queue = VecDeque::new();
        for (k, r) in self.roles.iter().enumerate() {
            if *r == role {
                dist[k] = 0;
                queue.push_back(k);
            }
        }
        while let Some(k) = queue.pop_front() {
            let mut rest = k;
            for d in 0..n {
                let i = rest % self.grid.shape[d];
                rest /= self.grid.shape[d];
                let s = self.strides[d];
                let mut visit = |j: usize| {
                    if dist[j] == u32::MAX {
                        dist[j] = dist[k] + 1;
                        queue.push_back(j);
                    }
                };
                if i > 0 {
                    visit(k - s);
                }
                if i + 1 < self.grid.shape[d] {
                    visit(k + s);
                }
            }
        }
        dist
    }
}

/// Outcome of a grid minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSolution {
    pub result: CapacityResult,
    /// Minimizer on all grid nodes, axis 0 fastest.
    pub values: Vec<f64>,
    /// Energy after each accepted step of the final descent phase.
    pub energy_history: Vec<f64>,
    pub grid: GridSpec,
}

impl DiscreteSolution {
    /// CSV dump: a matrix (rows along axis 1, columns along axis 0) in 2-D,
    /// `i,j,k,value` rows in 3-D.
    pub fn to_csv(&self) -> String {
        let shape = &self.grid.shape;
        let mut out = String::new();
        if shape.len() == 2 {
            for j in 0..shape[1] {
                let row: Vec<String> = (0..shape[0])
                    .map(|i| format!("{:.16e}", self.values[j * shape[0] + i]))
                    .collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        } else {
            out.push_str("i,j,k,value\n");
            for (idx, v) in self.values.iter().enumerate() {
                let i = idx % shape[0];
                let j = (idx / shape[0]) % shape[1];
                let k = idx / (shape[0] * shape[1]);
                let _ = writeln!(out, "{i},{j},{k},{v:.16e}");
            }
        }
        out
    }
}

struct Descent<'a> {
    prob: &'a GridProblem,
    p: f64,
    free: Vec<usize>,
    full: Vec<f64>,
    grad_full: Vec<f64>,
}

impl<'a> Descent<'a> {
    fn new(prob: &'a GridProblem, p: f64, start: Vec<f64>) -> Self {
        let free = (0..prob.roles.len())
            .filter(|&k| prob.roles[k] == NodeRole::Free)
            .collect();
        let len = start.len();
        Self {
            prob,
            p,
            free,
            full: start,
            grad_full: vec![0.0; len],
        }
    }

    fn x(&self) -> Vec<f64> {
        self.free.iter().map(|&k| self.full[k]).collect()
    }

    fn set(&mut self, x: &[f64]) {
        for (&k, v) in self.free.iter().zip(x) {
            self.full[k] = *v;
        }
    }

    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.set(x);
        let e = self
            .prob
            .energy_with_exponent(self.p, &self.full, Some(&mut self.grad_full));
        for (gi, &k) in g.iter_mut().zip(&self.free) {
            *gi = self.grad_full[k];
        }
        e
    }

    fn energy_only(&mut self, x: &[f64]) -> f64 {
        self.set(x);
        self.prob.energy_with_exponent(self.p, &self.full, None)
    }

    fn diag(&mut self, x: &[f64]) -> Vec<f64> {
        self.set(x);
        let d = self.prob.hessian_diagonal(self.p, &self.full);
        let raw: Vec<f64> = self.free.iter().map(|&k| d[k]).collect();
        let peak = raw.iter().fold(0.0f64, |s, v| s.max(*v));
        let floor = if peak > 0.0 { 1e-12 * peak } else { 1.0 };
        raw.into_iter().map(|v| v.max(floor)).collect()
    }

    /// Preconditioned conjugate gradients on the quadratic `p = 2` energy.
    /// Returns the iterate, energy history and iteration count.
    fn linear_solve(
        &mut self,
        x0: Vec<f64>,
        max_iters: usize,
    ) -> (Vec<f64>, Vec<f64>, usize, bool) {
        debug_assert_eq!(self.p, 2.0);
        let m = x0.len();
        let diag = self.diag(&x0);
        let mut x = x0;
        let mut g = vec![0.0; m];
        let mut energy = self.eval(&x, &mut g);
        let mut history = vec![energy];
        let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
        let r0 = norm2(&r);
        if r0 == 0.0 {
            return (x, history, 0, true);
        }
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
        let mut d = z.clone();
        let mut rz = dot(&r, &z);
        let mut hd = vec![0.0; m];
        // Hessian-vector products come from the gradient of the homogeneous
        // quadratic at a direction with the plates set to zero
        let mut probe = vec![0.0; self.full.len()];
        let mut probe_grad = vec![0.0; self.full.len()];
        for it in 1..=max_iters {
            probe.fill(0.0);
            for (&k, v) in self.free.iter().zip(&d) {
                probe[k] = *v;
            }
            self.prob
                .energy_with_exponent(2.0, &probe, Some(&mut probe_grad));
            for (h, &k) in hd.iter_mut().zip(&self.free) {
                *h = probe_grad[k];
            }
            let dhd = dot(&d, &hd);
            if !(dhd > 0.0) {
                return (x, history, it, true);
            }
            let alpha = rz / dhd;
            // E(x + αd) = E + α gᵀd + α²/2 dᵀHd with g = -r
            energy += -alpha * dot(&r, &d) + 0.5 * alpha * alpha * dhd;
            history.push(energy);
            for i in 0..m {
                x[i] += alpha * d[i];
                r[i] -= alpha * hd[i];
            }
            if norm2(&r) <= 1e-10 * r0 {
                return (x, history, it, true);
            }
            for i in 0..m {
                z[i] = r[i] / diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..m {
                d[i] = z[i] + beta * d[i];
            }
        }
        (x, history, max_iters, false)
    }

    /// Projected descent with Armijo backtracking; `memory = 0` gives plain
    /// projected (preconditioned) steepest descent.
    fn projected(
        &mut self,
        mut x: Vec<f64>,
        memory: usize,
        precondition: bool,
        max_iters: usize,
        tol: f64,
    ) -> (Vec<f64>, Vec<f64>, usize, bool) {
        let m = x.len();
        for v in x.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let mut g = vec![0.0; m];
        let mut energy = self.eval(&x, &mut g);
        let mut history = vec![energy];
        if m == 0 || energy == 0.0 {
            return (x, history, 0, true);
        }
        let diag = if precondition {
            self.diag(&x)
        } else {
            vec![1.0; m]
        };
        let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
        let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
        let mut rho_hist: VecDeque<f64> = VecDeque::new();
        let mut step_scale = 1.0;
        let mut small = 0;
        let mut g_new = vec![0.0; m];
        let mut trial = vec![0.0; m];
        for it in 1..=max_iters {
            // two-loop recursion with a diagonal initial Hessian
            let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
            let k = s_hist.len();
            let mut alphas = vec![0.0; k];
            for i in (0..k).rev() {
                let a = rho_hist[i] * dot(&s_hist[i], &d);
                alphas[i] = a;
                axpy(-a, &y_hist[i], &mut d);
            }
            let gamma = if k > 0 {
                let y = &y_hist[k - 1];
                let s = &s_hist[k - 1];
                let yhy: f64 = y.iter().zip(&diag).map(|(v, dd)| v * v / dd).sum();
                dot(s, y) / yhy
            } else {
                1.0
            };
            for (di, dd) in d.iter_mut().zip(&diag) {
                *di *= gamma / dd;
            }
            for i in 0..k {
                let b = rho_hist[i] * dot(&y_hist[i], &d);
                axpy(alphas[i] - b, &s_hist[i], &mut d);
            }
            // drop components pushing active bounds outward
            for i in 0..m {
                if (x[i] <= 0.0 && d[i] < 0.0) || (x[i] >= 1.0 && d[i] > 0.0) {
                    d[i] = 0.0;
                }
            }
            if dot(&g, &d) >= 0.0 {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                for i in 0..m {
                    d[i] = -g[i] / diag[i];
                    if (x[i] <= 0.0 && d[i] < 0.0) || (x[i] >= 1.0 && d[i] > 0.0) {
                        d[i] = 0.0;
                    }
                }
                if dot(&g, &d) >= 0.0 {
                    return (x, history, it, true);
                }
            }
            let mut t = if memory > 0 && k > 0 { 1.0 } else { step_scale };
            let mut accepted = None;
            for _ in 0..60 {
                for i in 0..m {
                    trial[i] = (x[i] + t * d[i]).clamp(0.0, 1.0);
                }
                let decrease: f64 = (0..m).map(|i| g[i] * (trial[i] - x[i])).sum();
                let e = self.energy_only(&trial);
                if e <= energy + 1e-4 * decrease && e <= energy {
                    accepted = Some(e);
                    break;
                }
                t *= 0.5;
            }
            let Some(e_new) = accepted else {
                return (x, history, it, true);
            };
            if memory == 0 {
                step_scale = (t * 2.0).min(1e6);
            }
            self.eval(&trial, &mut g_new);
            let s: Vec<f64> = (0..m).map(|i| trial[i] - x[i]).collect();
            let y: Vec<f64> = (0..m).map(|i| g_new[i] - g[i]).collect();
            let sy = dot(&s, &y);
            if memory > 0 && sy > 1e-12 * norm2(&s) * norm2(&y) {
                if s_hist.len() == memory {
                    s_hist.pop_front();
                    y_hist.pop_front();
                    rho_hist.pop_front();
                }
                rho_hist.push_back(1.0 / sy);
                s_hist.push_back(s);
                y_hist.push_back(y);
            }
            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut g, &mut g_new);
            let rel = (energy - e_new) / energy.max(f64::MIN_POSITIVE);
            energy = e_new;
            history.push(energy);
            if energy == 0.0 {
                return (x, history, it, true);
            }
            small = if rel < tol { small + 1 } else { 0 };
            if small >= 2 {
                return (x, history, it, true);
            }
        }
        (x, history, max_iters, false)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Minimizes the grid energy over free node values in `[0, 1]`.
pub fn discrete_capacity(prob: &GridProblem, opts: &DiscreteOptions) -> Result<DiscreteSolution> {
    if !(opts.tolerance > 0.0) {
        return arg("tolerance must be positive");
    }
    let start = prob.initial_guess();
    let finish = |values: Vec<f64>, history: Vec<f64>, diagnostics: Diagnostics| {
        let value = prob.energy(&values, None);
        DiscreteSolution {
            result: CapacityResult {
                value,
                profile: Vec::new(),
                quadrature_error_estimate: 0.0,
                method: Method::Discrete,
                diagnostics,
            },
            values,
            energy_history: history,
            grid: prob.grid.clone(),
        }
    };
    if prob.is_degenerate() {
        let diag = Diagnostics {
            degenerate_weight: true,
            ..Diagnostics::default()
        };
        let e = prob.energy(&start, None);
        return Ok(finish(start, vec![e], diag));
    }
    if prob.free_count() == 0 {
        let e = prob.energy(&start, None);
        return Ok(finish(start, vec![e], Diagnostics::default()));
    }

    let mut descent = Descent::new(prob, prob.p, start);
    let x0 = descent.x();
    let (x, history, iterations, converged) = match opts.step_rule {
        StepRule::ProjectedGradient => {
            descent.projected(x0, 0, false, opts.max_iters, opts.tolerance)
        }
        StepRule::Lbfgs => descent.projected(x0, 8, true, opts.max_iters, opts.tolerance),
        StepRule::Auto => {
            let mut warm = Descent::new(prob, 2.0, descent.full.clone());
            let (x, hist, it, conv) = warm.linear_solve(x0, opts.max_iters);
            let inside = x.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v));
            if prob.p == 2.0 && inside {
                let x: Vec<f64> = x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
                (x, hist, it, conv)
            } else {
                let budget = opts.max_iters.saturating_sub(it).max(1);
                let (x, hist, it2, conv) = descent.projected(x, 8, true, budget, opts.tolerance);
                (x, hist, it + it2, conv)
            }
        }
    };
    descent.set(&x);
    let values = descent.full;
    Ok(finish(
        values,
        history,
        Diagnostics {
            degenerate_weight: false,
            converged,
            iterations,
        },
    ))
}

/// Both sides of the comparison bound `cap_W ≤ sup(Σ a_ij²)^{p/4} · cap_identity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Check {
    pub lhs: f64,
    pub rhs: f64,
    pub sup_factor: f64,
    pub identity_capacity: f64,
    pub holds: bool,
}

/// Evaluates the comparison bound on an annulus problem with `r_out > r_in > 1`.
pub fn check_prop1(prob: &GridProblem, opts: &DiscreteOptions) -> Result<Prop1Check> {
    let Some((r_in, r_out)) = prob.annulus else {
        return arg("the comparison bound needs an annulus problem");
    };
    if !(r_in > 1.0) {
        return arg(format!(
            "the comparison bound needs r_out > r_in > 1, got r_in = {r_in}"
        ));
    }
    let lhs = discrete_capacity(prob, opts)?.result.value;
    let identity = prob.with_weight(WeightField::identity(prob.dimension())?)?;
    let identity_capacity = discrete_capacity(&identity, opts)?.result.value;
    let sup = prob.weight.weight_sup_norm(r_in, r_out, 4096)?;
    let sup_factor = sup.powf(prob.p / 4.0);
    let rhs = sup_factor * identity_capacity;
    Ok(Prop1Check {
        lhs,
        rhs,
        sup_factor,
        identity_capacity,
        holds: lhs <= rhs * (1.0 + PROP1_SLACK),
    })
}
