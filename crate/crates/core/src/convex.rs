//! Convex analysis on tensor grids: discrete Legendre–Fenchel transforms,
//! supercoercivity certificates and distances between convex functions.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::functionals::{Budget, FunctionalContext, FunctionalError};
use crate::measure::DualVector;
use crate::model::{Model, ModelError, ModelSpec};
use crate::regulator::Regulator;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("grid function has no finite value")]
    NotProper,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("neither epigraph meets the box of radius {radius}")]
    EmptyEpigraphWindow { radius: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error("model error: {0}")]
    Model(String),
}

impl From<ModelError> for ConvexError {
    fn from(e: ModelError) -> Self {
        ConvexError::Model(e.to_string())
    }
}

/// Uniform nodes `min, …, max` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, nodes: usize) -> Self {
        assert!(min < max && nodes >= 2, "axis needs min < max and at least two nodes");
        Self { min, max, nodes }
    }

    /// `[-radius, radius]`.
    pub fn symmetric(radius: f64, nodes: usize) -> Self {
        Self::new(-radius, radius, nodes)
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.point(i)).collect()
    }
}

/// Extended-real samples on a tensor grid, row-major with the last axis
/// fastest. `+∞` marks points outside the effective domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    axes: Vec<Axis>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self, ConvexError> {
        let expected: usize = axes.iter().map(|a| a.nodes).product();
        if axes.is_empty() || values.len() != expected {
            return Err(ConvexError::Invalid(format!(
                "{} values for a grid of {expected} nodes",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(ConvexError::Invalid("values must be finite or +inf".into()));
        }
        if !values.iter().any(|v| v.is_finite()) {
            return Err(ConvexError::NotProper);
        }
        Ok(Self { axes, values })
    }

    pub fn from_fn(axes: Vec<Axis>, f: impl Fn(&[f64]) -> f64) -> Result<Self, ConvexError> {
        let total: usize = axes.iter().map(|a| a.nodes).product();
        let mut values = Vec::with_capacity(total);
        let mut x = vec![0.0; axes.len()];
        for idx in 0..total {
            unravel(&axes, idx, &mut x);
            values.push(f(&x));
        }
        Self::new(axes, values)
    }

    pub fn one_d(axis: Axis, f: impl Fn(f64) -> f64) -> Result<Self, ConvexError> {
        Self::from_fn(vec![axis], |x| f(x[0]))
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        unravel(&self.axes, idx, &mut x);
        x
    }

    /// Value at the node nearest to `x`.
    pub fn nearest(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        for (a, xi) in self.axes.iter().zip(x) {
            let i = ((xi - a.min) / a.spacing()).round().clamp(0.0, (a.nodes - 1) as f64) as usize;
            idx = idx * a.nodes + i;
        }
        self.values[idx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, ConvexError> {
        Self::new(self.axes.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    fn same_grid(&self, other: &GridFunction) -> bool {
        self.axes.len() == other.axes.len()
            && self.axes.iter().zip(&other.axes).all(|(a, b)| {
                a.nodes == b.nodes && (a.min - b.min).abs() <= 1e-12 * a.min.abs().max(1.0) && (a.max - b.max).abs() <= 1e-12 * a.max.abs().max(1.0)
            })
    }
}

fn unravel(axes: &[Axis], mut idx: usize, x: &mut [f64]) {
    for a in (0..axes.len()).rev() {
        let n = axes[a].nodes;
        x[a] = axes[a].point(idx % n);
        idx /= n;
    }
}

/// Vertices of the lower convex hull of the finite points, by index.
pub fn lower_hull(xs: &[f64], fs: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..xs.len() {
        if !fs[i].is_finite() {
            continue;
        }
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b when it lies on or above the chord a → i
            let cross = (xs[b] - xs[a]) * (fs[i] - fs[a]) - (fs[b] - fs[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// `max_i [t xᵢ − fᵢ]` for each sorted `t`, in `O(N + M)`. Returns `−∞`
/// everywhere when no `fᵢ` is finite.
pub fn conjugate_1d(xs: &[f64], fs: &[f64], ts: &[f64]) -> Vec<f64> {
    let hull = lower_hull(xs, fs);
    if hull.is_empty() {
        return vec![f64::NEG_INFINITY; ts.len()];
    }
    let mut out = Vec::with_capacity(ts.len());
    let mut j = 0;
    for &t in ts {
        let val = |i: usize| t * xs[i] - fs[i];
        while j + 1 < hull.len() && val(hull[j + 1]) >= val(hull[j]) {
            j += 1;
        }
        // sortedness of ts lets the pointer only move forward; guard anyway
        while j > 0 && val(hull[j - 1]) > val(hull[j]) {
            j -= 1;
        }
        out.push(val(hull[j]));
    }
    out
}

/// Discrete conjugate on a tensor dual grid, composed axis by axis.
pub fn conjugate(f: &GridFunction, dual: &[Axis]) -> Result<GridFunction, ConvexError> {
    if dual.len() != f.dim() {
        return Err(ConvexError::GridMismatch(format!("dual grid has {} axes, primal {}", dual.len(), f.dim())));
    }
    let dim = f.dim();
    let mut shape: Vec<usize> = f.axes.iter().map(|a| a.nodes).collect();
    let mut data = f.values.clone();
    for axis in 0..dim {
        let xs = f.axes[axis].points();
        let ts = dual[axis].points();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let m = ts.len();
        let mut next = vec![0.0; outer * m * inner];
        let negate = axis > 0;
        let lines: Vec<(usize, usize)> = (0..outer).flat_map(|o| (0..inner).map(move |i| (o, i))).collect();
        let results: Vec<Vec<f64>> = lines
            .par_iter()
            .map(|&(o, i)| {
                let line: Vec<f64> = (0..n)
                    .map(|j| {
                        let v = data[(o * n + j) * inner + i];
                        if negate {
                            -v
                        } else {
                            v
                        }
                    })
                    .collect();
                conjugate_1d(&xs, &line, &ts)
            })
            .collect();
        for (&(o, i), r) in lines.iter().zip(results) {
            for (j, v) in r.into_iter().enumerate() {
                next[(o * m + j) * inner + i] = v;
            }
        }
        shape[axis] = m;
        data = next;
    }
    // every primal point excluded along some line gives −∞; only possible for improper f
    if data.contains(&f64::NEG_INFINITY) {
        return Err(ConvexError::NotProper);
    }
    GridFunction::new(dual.to_vec(), data)
}

/// `f*(t)` at an arbitrary dual point by direct scan.
pub fn conjugate_at(f: &GridFunction, t: &[f64]) -> f64 {
    let mut x = vec![0.0; f.dim()];
    let mut best = f64::NEG_INFINITY;
    for (idx, &v) in f.values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        unravel(&f.axes, idx, &mut x);
        let s: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() - v;
        best = best.max(s);
    }
    best
}

/// `f**` on the primal grid. In one dimension this is the exact lower
/// convex hull of the samples; in several dimensions the dual grid spans
/// the range of difference slopes at four times the primal resolution, and
/// every node also contributes its difference-gradient tangent plane.
/// The plane pass costs O(n²) in the node count.
pub fn biconjugate(f: &GridFunction) -> Result<GridFunction, ConvexError> {
    if f.dim() == 1 {
        let xs = f.axes[0].points();
        let hull = lower_hull(&xs, &f.values);
        if hull.is_empty() {
            return Err(ConvexError::NotProper);
        }
        let (lo, hi) = (hull[0], hull[hull.len() - 1]);
        let mut out = vec![f64::INFINITY; xs.len()];
        let mut seg = 0;
        for i in lo..=hi {
            if hull.len() == 1 {
                out[i] = f.values[i];
                continue;
            }
            while seg + 2 < hull.len() && hull[seg + 1] <= i {
                seg += 1;
            }
            let (a, b) = (hull[seg], hull[seg + 1]);
            out[i] = if i == a || i == b {
                f.values[i]
            } else {
                let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
                f.values[a] + t * (f.values[b] - f.values[a])
            };
        }
        return GridFunction::new(f.axes.clone(), out);
    }
    let finite: Vec<f64> = f.values.iter().copied().filter(|v| v.is_finite()).collect();
    let spread = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max) - finite.iter().copied().fold(f64::INFINITY, f64::min);
    let dual: Vec<Axis> = f
        .axes
        .iter()
        .map(|a| {
            let slope = (spread / a.spacing()).max(1.0);
            Axis::symmetric(slope, 4 * a.nodes + 1)
        })
        .collect();
    let fs = conjugate(f, &dual)?;
    let back = conjugate(&fs, &f.axes)?;
    // Supporting planes at the nodal discrete gradients recover convex
    // samples to second order, which the dual grid alone cannot.
    let planes: Vec<(Vec<f64>, f64)> = (0..f.len())
        .into_par_iter()
        .filter_map(|idx| {
            let t = nodal_gradient(f, idx)?;
            let c = conjugate_at(f, &t);
            c.is_finite().then_some((t, c))
        })
        .collect();
    let values = back
        .values
        .par_iter()
        .zip(&f.values)
        .enumerate()
        .map(|(idx, (b, v))| {
            let x = f.point(idx);
            let best = planes
                .iter()
                .map(|(t, c)| t.iter().zip(&x).map(|(a, y)| a * y).sum::<f64>() - c)
                .fold(*b, f64::max);
            // a biconjugate never exceeds the function it came from
            best.min(*v)
        })
        .collect();
    GridFunction::new(f.axes.clone(), values)
}

/// Second-order difference gradient at a node; `None` next to non-finite values.
fn nodal_gradient(f: &GridFunction, idx: usize) -> Option<Vec<f64>> {
    let dim = f.dim();
    let mut stride = 1;
    let mut strides = vec![0; dim];
    for a in (0..dim).rev() {
        strides[a] = stride;
        stride *= f.axes[a].nodes;
    }
    let mut grad = vec![0.0; dim];
    for a in 0..dim {
        let n = f.axes[a].nodes;
        let i = (idx / strides[a]) % n;
        let h = f.axes[a].spacing();
        let at = |o: isize| f.values[(idx as isize + o * strides[a] as isize) as usize];
        if n < 3 {
            return None;
        }
        let g = if i == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if i + 1 == n {
            (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h)
        } else {
            (at(1) - at(-1)) / (2.0 * h)
        };
        if !g.is_finite() {
            return None;
        }
        grad[a] = g;
    }
    Some(grad)
}

/// `max (f − f**)` over finite nodes: zero for convex samples.
pub fn biconjugate_check(f: &GridFunction) -> Result<f64, ConvexError> {
    let fss = biconjugate(f)?;
    Ok(f.values
        .iter()
        .zip(&fss.values)
        .filter(|(v, _)| v.is_finite())
        .map(|(v, w)| v - w)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    /// Largest `C` with `f*(T) ≥ p(T) + C` at every finite node.
    pub constant: f64,
    pub binding: Vec<f64>,
    /// A binding node on the box boundary means the bound may keep
    /// degrading on larger boxes.
    pub binding_on_boundary: bool,
}

/// Supercoercivity constant against `p(T) = sqrt(Σ (w_a T_a)²)`.
pub fn supercoercivity_certificate(fstar: &GridFunction, weights: &[f64]) -> Result<Certificate, ConvexError> {
    if weights.len() != fstar.dim() {
        return Err(ConvexError::GridMismatch(format!("{} weights for {} axes", weights.len(), fstar.dim())));
    }
    let mut best = f64::INFINITY;
    let mut binding = 0;
    let mut t = vec![0.0; fstar.dim()];
    for (idx, &v) in fstar.values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        unravel(&fstar.axes, idx, &mut t);
        let p = t.iter().zip(weights).map(|(x, w)| (w * x).powi(2)).sum::<f64>().sqrt();
        if v - p < best {
            best = v - p;
            binding = idx;
        }
    }
    let point = fstar.point(binding);
    let mut rest = binding;
    let mut on_boundary = false;
    for a in (0..fstar.dim()).rev() {
        let n = fstar.axes[a].nodes;
        let i = rest % n;
        rest /= n;
        on_boundary |= i == 0 || i + 1 == n;
    }
    Ok(Certificate { constant: best, binding: point, binding_on_boundary: on_boundary })
}

/// `max |f − g|` over nodes with Euclidean norm at most `radius`.
pub fn uniform_distance(f: &GridFunction, g: &GridFunction, radius: f64) -> Result<f64, ConvexError> {
    if !f.same_grid(g) {
        return Err(ConvexError::GridMismatch("functions live on different grids".into()));
    }
    if f.axes.iter().any(|a| a.min > -radius + 1e-12 || a.max < radius - 1e-12) {
        return Err(ConvexError::GridMismatch(format!("grid does not cover the ball of radius {radius}")));
    }
    let mut x = vec![0.0; f.dim()];
    let mut worst: f64 = 0.0;
    for idx in 0..f.len() {
        unravel(&f.axes, idx, &mut x);
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() > radius + 1e-12 {
            continue;
        }
        let (a, b) = (f.values[idx], g.values[idx]);
        let d = match (a.is_finite(), b.is_finite()) {
            (true, true) => (a - b).abs(),
            (false, false) => 0.0,
            _ => f64::INFINITY,
        };
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Hausdorff distance between `epi f ∩ B_ρ` and `epi g ∩ B_ρ` for the
/// product metric `max(‖x − y‖_∞, |s − t|)`, with `B_ρ` the cube of radius
/// `ρ` in every coordinate including the value.
///
/// One-dimensional inputs are treated as piecewise linear and the distance
/// from each graph sample to the other epigraph is exact; in several
/// dimensions the other epigraph is represented by its node samples.
pub fn aw_distance(f: &GridFunction, g: &GridFunction, rho: f64) -> Result<f64, ConvexError> {
    if f.dim() != g.dim() {
        return Err(ConvexError::GridMismatch("functions have different dimensions".into()));
    }
    let pf = epigraph_samples(f, rho);
    let pg = epigraph_samples(g, rho);
    match (pf.is_empty(), pg.is_empty()) {
        (true, true) => return Err(ConvexError::EmptyEpigraphWindow { radius: rho }),
        (true, false) | (false, true) => return Ok(f64::INFINITY),
        _ => {}
    }
    if f.dim() == 1 {
        let ef = Epigraph1d::new(f, rho);
        let eg = Epigraph1d::new(g, rho);
        let a = pf.par_iter().map(|(x, v)| eg.distance(x[0], *v)).reduce(|| 0.0, f64::max);
        let b = pg.par_iter().map(|(x, v)| ef.distance(x[0], *v)).reduce(|| 0.0, f64::max);
        return Ok(a.max(b));
    }
    let nf = node_samples(f, rho);
    let ng = node_samples(g, rho);
    let a = pf.par_iter().map(|(x, v)| sampled_distance(&ng, x, *v, rho)).reduce(|| 0.0, f64::max);
    let b = pg.par_iter().map(|(x, v)| sampled_distance(&nf, x, *v, rho)).reduce(|| 0.0, f64::max);
    Ok(a.max(b))
}

fn node_samples(f: &GridFunction, rho: f64) -> Vec<(Vec<f64>, f64)> {
    (0..f.len())
        .filter_map(|idx| {
            let x = f.point(idx);
            let v = f.values[idx];
            (v <= rho && x.iter().all(|c| c.abs() <= rho)).then(|| (x, v.max(-rho)))
        })
        .collect()
}

fn sampled_distance(samples: &[(Vec<f64>, f64)], x: &[f64], v: f64, rho: f64) -> f64 {
    samples
        .iter()
        .map(|(y, low)| {
            let dx = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let dv = if v < *low { low - v } else if v > rho { v - rho } else { 0.0 };
            dx.max(dv)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Graph points `(x, max(f(x), −ρ))` inside the box: nodes, segment
/// midpoints, and the crossings of the value bounds and the box faces.
fn epigraph_samples(f: &GridFunction, rho: f64) -> Vec<(Vec<f64>, f64)> {
    if f.dim() != 1 {
        let mut out = node_samples(f, rho);
        // midpoints along each axis
        let mut x = vec![0.0; f.dim()];
        for idx in 0..f.len() {
            unravel(&f.axes, idx, &mut x);
            let mut stride = 1;
            for a in (0..f.dim()).rev() {
                let n = f.axes[a].nodes;
                let i = (idx / stride) % n;
                if i + 1 < n {
                    let (v0, v1) = (f.values[idx], f.values[idx + stride]);
                    if v0.is_finite() && v1.is_finite() {
                        let mut m = x.clone();
                        m[a] += 0.5 * f.axes[a].spacing();
                        let v = 0.5 * (v0 + v1);
                        if v <= rho && m.iter().all(|c| c.abs() <= rho) {
                            out.push((m, v.max(-rho)));
                        }
                    }
                }
                stride *= n;
            }
        }
        return out;
    }
    let xs = f.axes[0].points();
    let vs = &f.values;
    let mut cand: Vec<(f64, f64)> = Vec::new();
    for i in 0..xs.len() {
        cand.push((xs[i], vs[i]));
        if i + 1 < xs.len() && vs[i].is_finite() && vs[i + 1].is_finite() {
            let (x0, x1, v0, v1) = (xs[i], xs[i + 1], vs[i], vs[i + 1]);
            let at = |x: f64| v0 + (v1 - v0) * (x - x0) / (x1 - x0);
            cand.push((0.5 * (x0 + x1), 0.5 * (v0 + v1)));
            for level in [rho, -rho] {
                if (v0 - level) * (v1 - level) < 0.0 {
                    let x = x0 + (level - v0) * (x1 - x0) / (v1 - v0);
                    cand.push((x, level));
                }
            }
            for face in [rho, -rho] {
                if x0 < face && face < x1 {
                    cand.push((face, at(face)));
                }
            }
        }
    }
    cand.into_iter()
        .filter(|(x, v)| v.is_finite() && *v <= rho + 1e-12 && x.abs() <= rho + 1e-12)
        .map(|(x, v)| (vec![x], v.max(-rho)))
        .collect()
}

/// Piecewise-linear epigraph on one axis with range-minimum queries.
struct Epigraph1d {
    xs: Vec<f64>,
    vs: Vec<f64>,
    rho: f64,
    /// sparse table of node minima
    table: Vec<Vec<f64>>,
}

impl Epigraph1d {
    fn new(f: &GridFunction, rho: f64) -> Self {
        let xs = f.axes[0].points();
        let vs = f.values.clone();
        let mut table = vec![vs.clone()];
        let mut width = 1;
        while 2 * width <= vs.len() {
            let prev = table.last().expect("non-empty table");
            let next: Vec<f64> = (0..=vs.len() - 2 * width).map(|i| prev[i].min(prev[i + width])).collect();
            table.push(next);
            width *= 2;
        }
        Self { xs, vs, rho, table }
    }

    fn range_min(&self, lo: usize, hi: usize) -> f64 {
        if lo > hi {
            return f64::INFINITY;
        }
        let len = hi - lo + 1;
        let level = (usize::BITS - 1 - len.leading_zeros()) as usize;
        let w = 1 << level;
        self.table[level][lo].min(self.table[level][hi + 1 - w])
    }

    fn value_at(&self, x: f64) -> f64 {
        let h = self.xs[1] - self.xs[0];
        let n = self.xs.len();
        let pos = ((x - self.xs[0]) / h).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let t = pos - i as f64;
        let (v0, v1) = (self.vs[i], self.vs[i + 1]);
        if t <= 1e-12 {
            return v0;
        }
        if t >= 1.0 - 1e-12 {
            return v1;
        }
        if !v0.is_finite() || !v1.is_finite() {
            return f64::INFINITY;
        }
        v0 + t * (v1 - v0)
    }

    /// `min g` over `[a, b]`.
    fn min_over(&self, a: f64, b: f64) -> f64 {
        if a > b {
            return f64::INFINITY;
        }
        let h = self.xs[1] - self.xs[0];
        let x0 = self.xs[0];
        let lo = ((a - x0) / h).ceil().max(0.0) as usize;
        let hi_f = ((b - x0) / h).floor();
        let inner = if hi_f < 0.0 { f64::INFINITY } else { self.range_min(lo, (hi_f as usize).min(self.xs.len() - 1)) };
        inner.min(self.value_at(a)).min(self.value_at(b))
    }

    /// Distance in the product max-norm from `(x, v)` to the truncated epigraph.
    fn distance(&self, x: f64, v: f64) -> f64 {
        let rho = self.rho;
        let lo_x = self.xs[0].max(-rho);
        let hi_x = self.xs[self.xs.len() - 1].min(rho);
        let reachable = |t: f64| -> bool {
            if v - t > rho || v + t < -rho {
                return false;
            }
            let a = (x - t).max(lo_x);
            let b = (x + t).min(hi_x);
            self.min_over(a, b) <= (v + t).min(rho)
        };
        let mut hi = 4.0 * rho + (x.abs() + v.abs());
        if !reachable(hi) {
            return f64::INFINITY;
        }
        if reachable(0.0) {
            return 0.0;
        }
        let mut lo = 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if reachable(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-14 * hi.max(1e-300) {
                break;
            }
        }
        hi
    }
}

// ---------------------------------------------------------------------------
// convergence diagnostics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub source_axis: Axis,
    pub field_axis: Axis,
    /// Radius for the uniform distance of the `W_n`.
    pub radius: f64,
    /// Box radii for the epigraph distance of the `Γ₀ⁿ`.
    pub aw_radii: Vec<f64>,
    /// Dual values `T` of the characteristic-function probe.
    pub dictionary: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            source_axis: Axis::symmetric(15.0, 401),
            field_axis: Axis::symmetric(6.0, 1201),
            radius: 2.0,
            aw_radii: vec![3.0, 6.0, 12.0],
            dictionary: vec![0.5, 1.0, 1.5, 2.0],
            samples: 100_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub index: usize,
    /// `max |W_n − W| ` on the ball of radius `radius`.
    pub uniform: f64,
    /// `(ρ, d_AW(Γ₀ⁿ, Γ₀))` for each configured radius.
    pub aw: Vec<(f64, f64)>,
    /// `max_T |E_n cos(Tψ) − E cos(Tψ)|`.
    pub probe: f64,
    /// Distances to the next element of the sequence.
    pub cauchy_aw: Option<Vec<(f64, f64)>>,
    pub cauchy_probe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub uniform_decreasing: bool,
    /// One verdict per AW radius.
    pub aw_decreasing: Vec<(f64, bool)>,
    pub probe_decreasing: bool,
    /// Consecutive epigraph distances fail to shrink.
    pub non_cauchy: bool,
}

struct Element {
    w: GridFunction,
    gamma: GridFunction,
    probe: Vec<f64>,
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn element(spec: &ModelSpec, config: &ProbeConfig, budget: &Budget, normals: &[f64]) -> Result<Element, ConvexError> {
    let model = Model::new(spec.clone())?;
    if model.modes() != 1 {
        return Err(ConvexError::Invalid(format!("convergence suite expects single-mode models, got {} modes", model.modes())));
    }
    let ctx = FunctionalContext::with_budget(model.clone(), Regulator::litim(), *budget)?;
    let sources = config.source_axis.points();
    let w_values: Vec<f64> = sources
        .par_iter()
        .map(|&t| ctx.w(0.0, &DualVector::scalar(t)))
        .collect::<Result<_, _>>()?;
    let w = GridFunction::new(vec![config.source_axis], w_values)?;
    let gamma = conjugate(&w, &[config.field_axis])?;
    // self-normalised weights e^{−S} on common normals
    let sd = model.covariance()[(0, 0)].sqrt();
    let mut log_w: Vec<f64> = normals
        .iter()
        .map(|z| -model.interaction_value(&DVector::from_element(1, sd * z)))
        .collect();
    let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for l in &mut log_w {
        *l = (*l - shift).exp();
    }
    let total: f64 = log_w.iter().sum();
    let probe = config
        .dictionary
        .iter()
        .map(|&t| normals.iter().zip(&log_w).map(|(z, w)| w * (t * sd * z).cos()).sum::<f64>() / total)
        .collect();
    Ok(Element { w, gamma, probe })
}

/// Distances of each model in `sequence` to `limit`, at `k = 0`.
pub fn convergence_suite(
    sequence: &[ModelSpec],
    limit: &ModelSpec,
    config: &ProbeConfig,
    budget: &Budget,
) -> Result<ConvergenceReport, ConvexError> {
    if sequence.is_empty() {
        return Err(ConvexError::Invalid("empty model sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normals: Vec<f64> = (0..config.samples).map(|_| StandardNormal.sample(&mut rng)).collect();
    let lim = element(limit, config, budget, &normals)?;
    let elements: Vec<Element> = sequence
        .par_iter()
        .map(|s| element(s, config, budget, &normals))
        .collect::<Result<_, _>>()?;
    let probe_distance = |a: &Element, b: &Element| -> f64 {
        a.probe.iter().zip(&b.probe).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let aw_all = |a: &Element, b: &Element| -> Result<Vec<(f64, f64)>, ConvexError> {
        config.aw_radii.iter().map(|&r| Ok((r, aw_distance(&a.gamma, &b.gamma, r)?))).collect()
    };
    let mut rows = Vec::with_capacity(elements.len());
    for (i, e) in elements.iter().enumerate() {
        let next = elements.get(i + 1);
        rows.push(ConvergenceRow {
            index: i + 1,
            uniform: uniform_distance(&e.w, &lim.w, config.radius)?,
            aw: aw_all(e, &lim)?,
            probe: probe_distance(e, &lim),
            cauchy_aw: next.map(|n| aw_all(e, n)).transpose()?,
            cauchy_probe: next.map(|n| probe_distance(e, n)),
        });
    }
    let uniform: Vec<f64> = rows.iter().map(|r| r.uniform).collect();
    let probe: Vec<f64> = rows.iter().map(|r| r.probe).collect();
    let aw_decreasing = config
        .aw_radii
        .iter()
        .enumerate()
        .map(|(j, &rho)| {
            let d: Vec<f64> = rows.iter().map(|r| r.aw[j].1).collect();
            (rho, strictly_decreasing(&d))
        })
        .collect();
    let non_cauchy = if rows.len() >= 3 {
        (0..config.aw_radii.len()).any(|j| {
            let d: Vec<f64> = rows.iter().filter_map(|r| r.cauchy_aw.as_ref().map(|c| c[j].1)).collect();
            !strictly_decreasing(&d) || d[d.len() - 1] >= 0.5 * d[0]
        })
    } else {
        false
    };
    Ok(ConvergenceReport {
        uniform_decreasing: strictly_decreasing(&uniform),
        aw_decreasing,
        probe_decreasing: strictly_decreasing(&probe),
        non_cauchy,
        rows,
    })
}
