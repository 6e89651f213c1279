//! Globally adaptive Simpson quadrature on a finite interval.
//!
//! Every segment carries five samples, so its Simpson estimate on the whole
//! segment can be compared with the composite estimate on both halves. The
//! difference drives a Richardson correction and serves as the local error
//! estimate. The segment with the largest error is bisected until the summed
//! error meets the tolerance.
//!
//! Integrands that vary over many decades of the abscissa (power laws on
//! `[r_in, r_out]` with `r_out / r_in` large) are integrated in the variable
//! `t = ln r`, which turns them into smooth exponentials.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Logarithmic,
    /// Logarithmic when `a > 0` and `b / a > 4`, linear otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_segments: usize,
    pub initial_panels: usize,
    pub spacing: Spacing,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 0.0,
            max_segments: 20_000,
            initial_panels: 8,
            spacing: Spacing::Auto,
        }
    }
}

impl QuadOptions {
    pub fn with_rel_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self
    }

    pub fn with_abs_tol(mut self, tol: f64) -> Self {
        self.abs_tol = tol;
        self
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_initial_panels(mut self, panels: usize) -> Self {
        self.initial_panels = panels.max(1);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// Sum of the local error estimates, absolute.
    pub error: f64,
    pub evaluations: usize,
    pub segments: usize,
}

impl Quadrature {
    pub fn relative_error(&self) -> f64 {
        if self.value == 0.0 {
            self.error
        } else {
            self.error / self.value.abs()
        }
    }
}

struct Segment {
    a: f64,
    b: f64,
    // samples at a, a+h/4, a+h/2, a+3h/4, b
    f: [f64; 5],
    value: f64,
    error: f64,
}

impl Segment {
    fn new(a: f64, b: f64, f: [f64; 5]) -> Self {
        let h = b - a;
        let whole = h / 6.0 * (f[0] + 4.0 * f[2] + f[4]);
        let halves = h / 12.0 * (f[0] + 4.0 * f[1] + 2.0 * f[2] + 4.0 * f[3] + f[4]);
        let diff = halves - whole;
        Self {
            a,
            b,
            f,
            value: halves + diff / 15.0,
            error: diff.abs() / 15.0,
        }
    }
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(f64) -> f64> Counted<F> {
    fn eval(&mut self, x: f64) -> Result<f64> {
        self.evaluations += 1;
        let y = (self.f)(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite(format!("integrand returned {y} at {x:e}")))
        }
    }
}

/// Integrates `f` over `[a, b]`. Reversed bounds flip the sign.
pub fn integrate<F>(f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<Quadrature>
where
    F: FnMut(f64) -> f64,
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Argument(format!("non-finite bounds [{a}, {b}]")));
    }
    if a == b {
        return Ok(Quadrature {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
            segments: 0,
        });
    }
    if a > b {
        let mut q = integrate(f, b, a, opts)?;
        q.value = -q.value;
        return Ok(q);
    }
    let log = match opts.spacing {
        Spacing::Linear => false,
        Spacing::Logarithmic => {
            if a <= 0.0 {
                return Err(Error::Argument(format!(
                    "logarithmic spacing needs a positive lower bound, got {a}"
                )));
            }
            true
        }
        Spacing::Auto => a > 0.0 && b / a > 4.0,
    };
    if log {
        let mut f = f;
        let (ta, tb) = (a.ln(), b.ln());
        // more initial panels for wider ranges: one per half decade at least
        let decades = (b / a).log10();
        let panels = opts.initial_panels.max((2.0 * decades).ceil() as usize);
        let opts = QuadOptions {
            initial_panels: panels,
            ..*opts
        };
        adaptive(
            move |t: f64| {
                let r = t.exp();
                f(r) * r
            },
            ta,
            tb,
            &opts,
        )
    } else {
        adaptive(f, a, b, opts)
    }
}

fn adaptive<F>(f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<Quadrature>
where
    F: FnMut(f64) -> f64,
{
    let mut f = Counted { f, evaluations: 0 };
    let panels = opts.initial_panels.max(1);
    let width = (b - a) / panels as f64;
    let mut heap = BinaryHeap::with_capacity(panels * 4);
    let mut left = f.eval(a)?;
    for k in 0..panels {
        let lo = a + k as f64 * width;
        let hi = if k + 1 == panels { b } else { lo + width };
        let h = hi - lo;
        let right = f.eval(hi)?;
        let samples = [
            left,
            f.eval(lo + 0.25 * h)?,
            f.eval(lo + 0.5 * h)?,
            f.eval(lo + 0.75 * h)?,
            right,
        ];
        heap.push(Segment::new(lo, hi, samples));
        left = right;
    }

    loop {
        let (total, err) = heap
            .iter()
            .fold((0.0, 0.0), |(v, e), s| (v + s.value, e + s.error));
        let target = opts.abs_tol.max(opts.rel_tol * total.abs());
        if err <= target || heap.len() >= opts.max_segments {
            return Ok(Quadrature {
                value: total,
                error: err,
                evaluations: f.evaluations,
                segments: heap.len(),
            });
        }
        // bisect the worst segments in a batch to amortize the summation above
        let batch = (heap.len() / 8).max(1);
        for _ in 0..batch {
            let Some(worst) = heap.pop() else { break };
            if worst.error == 0.0 {
                heap.push(worst);
                break;
            }
            let Segment {
                a: lo, b: hi, f: s, ..
            } = worst;
            let mid = 0.5 * (lo + hi);
            let h = hi - lo;
            let l1 = f.eval(lo + 0.125 * h)?;
            let l3 = f.eval(lo + 0.375 * h)?;
            let r1 = f.eval(lo + 0.625 * h)?;
            let r3 = f.eval(lo + 0.875 * h)?;
            heap.push(Segment::new(lo, mid, [s[0], l1, s[1], l3, s[2]]));
            heap.push(Segment::new(mid, hi, [s[2], r1, s[3], r3, s[4]]));
        }
    }
}

/// Gauss-Legendre nodes and weights of the given order on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let m = order as f64;
    for i in 0..order.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // three-term recurrence for P_order and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let p = if order == 0 { 1.0 } else { p1 };
            let prev = if order <= 1 { 1.0 } else { p0 };
            dp = m * (x * p - prev) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}
