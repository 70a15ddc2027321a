//! Scale flow of the subtracted effective average action in two
//! representations: values on a field grid (single mode, untruncated) and a
//! vertex expansion truncated after the four-point function.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::functionals::{FunctionalContext, FunctionalError};
use crate::measure::{DualVector, Field};
use crate::model::Model;
use crate::regulator::Regulator;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("convexity lost at k = {k}: Γ'' + R_k = {margin:.3e} at node {node:?}")]
    ConvexityLoss { k: f64, node: Option<usize>, margin: f64 },
    #[error("step size {step:.3e} underflowed at k = {k}")]
    StepUnderflow { k: f64, step: f64 },
    #[error("invalid flow setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
}

/// A state the integrator can advance in `k`.
pub trait Action: Clone + Send + Sync {
    fn k(&self) -> f64;
    fn pack(&self) -> Vec<f64>;
    /// Rebuilds the action from packed values at scale `k`.
    fn unpack(&self, k: f64, values: &[f64]) -> Self;
    /// `∂_k` of the packed values.
    fn rhs(&self, k: f64, values: &[f64], regulator: &Regulator) -> Result<Vec<f64>, FlowError>;
    /// Momenta whose Litim kinks the step controller must land on.
    fn momenta(&self) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// grid representation

#[derive(Debug, Clone, PartialEq)]
pub struct GridAction {
    pub k: f64,
    pub phi: Vec<f64>,
    /// `Γ̄_k(φ_i)`; zero at the centre node.
    pub values: Vec<f64>,
    /// Momentum of the single mode, entering `R_k(p₁)`.
    pub momentum: f64,
    /// Hold the two outermost nodes at their initial values.
    pub freeze_boundary: bool,
}

impl GridAction {
    pub fn new(k: f64, phi: Vec<f64>, values: Vec<f64>, momentum: f64) -> Result<Self, FlowError> {
        let n = phi.len();
        if n < 7 || n.is_multiple_of(2) || values.len() != n {
            return Err(FlowError::Invalid(format!(
                "grid needs an odd number (>= 7) of nodes with matching values, got {n} nodes and {} values",
                values.len()
            )));
        }
        let h = phi[1] - phi[0];
        let uniform = phi.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1.0));
        if !(h > 0.0) || !uniform || phi[n / 2].abs() > 1e-12 {
            return Err(FlowError::Invalid("grid must be uniform, increasing and centred on zero".into()));
        }
        let mut values = values;
        let c = values[n / 2];
        for v in &mut values {
            *v -= c;
        }
        Ok(Self { k, phi, values, momentum, freeze_boundary: false })
    }

    pub fn with_frozen_boundary(mut self, freeze: bool) -> Self {
        self.freeze_boundary = freeze;
        self
    }

    pub fn centre(&self) -> usize {
        self.phi.len() / 2
    }

    pub fn spacing(&self) -> f64 {
        self.phi[1] - self.phi[0]
    }

    pub fn second_derivative(&self) -> Vec<f64> {
        second_derivative(&self.values, self.spacing())
    }

    /// Fourth derivative at `φ = 0` from a sixth-order-accurate 7-point
    /// stencil of the given stride.
    pub fn fourth_derivative_at_centre(&self, stride: usize) -> f64 {
        let c = self.centre() as isize;
        let s = stride.max(1) as isize;
        let h = self.spacing() * s as f64;
        let f = |o: isize| self.values[(c + o * s) as usize];
        (-f(-3) + 12.0 * f(-2) - 39.0 * f(-1) + 56.0 * f(0) - 39.0 * f(1) + 12.0 * f(2) - f(3)) / (6.0 * h.powi(4))
    }

    /// Largest `|Γ̄(φ) − Γ̄(−φ)|` over the grid.
    pub fn asymmetry(&self) -> f64 {
        let n = self.values.len();
        (0..n / 2).map(|i| (self.values[i] - self.values[n - 1 - i]).abs()).fold(0.0, f64::max)
    }

    /// Max-abs difference to `other` over nodes with `|φ| ≤ radius`.
    pub fn max_deviation(&self, other: impl Fn(f64) -> f64, radius: f64) -> f64 {
        self.phi
            .iter()
            .zip(&self.values)
            .filter(|(p, _)| p.abs() <= radius + 1e-12)
            .map(|(p, v)| (v - other(*p)).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Fourth-order second differences; one-sided at the two nodes nearest each end.
pub fn second_derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    assert!(n >= 6, "second_derivative needs at least six nodes");
    let s = 12.0 * h * h;
    let mut d = vec![0.0; n];
    for i in 2..n - 2 {
        d[i] = (-f[i - 2] + 16.0 * f[i - 1] - 30.0 * f[i] + 16.0 * f[i + 1] - f[i + 2]) / s;
    }
    let forward0 = |g: &dyn Fn(usize) -> f64| {
        (45.0 * g(0) - 154.0 * g(1) + 214.0 * g(2) - 156.0 * g(3) + 61.0 * g(4) - 10.0 * g(5)) / s
    };
    let forward1 = |g: &dyn Fn(usize) -> f64| (10.0 * g(0) - 15.0 * g(1) - 4.0 * g(2) + 14.0 * g(3) - 6.0 * g(4) + g(5)) / s;
    let left = |i: usize| f[i];
    let right = |i: usize| f[n - 1 - i];
    d[0] = forward0(&left);
    d[1] = forward1(&left);
    d[n - 1] = forward0(&right);
    d[n - 2] = forward1(&right);
    d
}

/// Round-off scale of [`second_derivative`] at each node.
fn stencil_noise(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let s = f64::EPSILON / (12.0 * h * h);
    let weighted = |coeffs: &[f64], at: &dyn Fn(usize) -> f64| coeffs.iter().enumerate().map(|(j, c)| c * at(j).abs()).sum::<f64>() * s;
    let mut e = vec![0.0; n];
    for i in 2..n - 2 {
        e[i] = weighted(&[1.0, 16.0, 30.0, 16.0, 1.0], &|j| f[i + j - 2]);
    }
    let edge0 = [45.0, 154.0, 214.0, 156.0, 61.0, 10.0];
    let edge1 = [10.0, 15.0, 4.0, 14.0, 6.0, 1.0];
    e[0] = weighted(&edge0, &|j| f[j]);
    e[1] = weighted(&edge1, &|j| f[j]);
    e[n - 1] = weighted(&edge0, &|j| f[n - 1 - j]);
    e[n - 2] = weighted(&edge1, &|j| f[n - 1 - j]);
    e
}

/// `∂_kΓ̄(φ_i) = ½Ṙ[(Γ̄''_i + R)⁻¹ − (Γ̄''_c + R)⁻¹]`.
pub fn rhs_grid(state: &GridAction, regulator: &Regulator) -> Result<Vec<f64>, FlowError> {
    grid_rhs(state.k, &state.values, state.spacing(), state.momentum, state.freeze_boundary, regulator)
}

fn grid_rhs(k: f64, values: &[f64], h: f64, momentum: f64, freeze: bool, regulator: &Regulator) -> Result<Vec<f64>, FlowError> {
    let n = values.len();
    let r = regulator.value(k, momentum);
    let rdot = regulator.dk(k, momentum);
    let d2 = second_derivative(values, h);
    let c = n / 2;
    let mut worst: Option<(usize, f64)> = None;
    for (i, d) in d2.iter().enumerate() {
        let margin = d + r;
        if !(margin > 0.0) && worst.is_none_or(|(_, m)| margin < m) {
            worst = Some((i, margin));
        }
    }
    if let Some((node, margin)) = worst {
        return Err(FlowError::ConvexityLoss { k, node: Some(node), margin });
    }
    if rdot == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let inv_c = 1.0 / (d2[c] + r);
    let noise = stencil_noise(values, h);
    let mut out: Vec<f64> = d2
        .iter()
        .zip(&noise)
        .map(|(d, e)| {
            // curvature differences below stencil round-off are not resolvable
            if (d - d2[c]).abs() <= 8.0 * (e + noise[c]) {
                0.0
            } else {
                0.5 * rdot * (1.0 / (d + r) - inv_c)
            }
        })
        .collect();
    out[c] = 0.0;
    if freeze {
        out[0] = 0.0;
        out[n - 1] = 0.0;
    }
    Ok(out)
}

impl Action for GridAction {
    fn k(&self) -> f64 {
        self.k
    }

    fn pack(&self) -> Vec<f64> {
        self.values.clone()
    }

    fn unpack(&self, k: f64, values: &[f64]) -> Self {
        Self { k, values: values.to_vec(), ..self.clone() }
    }

    fn rhs(&self, k: f64, values: &[f64], regulator: &Regulator) -> Result<Vec<f64>, FlowError> {
        grid_rhs(k, values, self.spacing(), self.momentum, self.freeze_boundary, regulator)
    }

    fn momenta(&self) -> Vec<f64> {
        vec![self.momentum]
    }
}

// ---------------------------------------------------------------------------
// vertex representation

/// Fully symmetric rank-4 tensor stored once per sorted index tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTensor4 {
    dim: usize,
    data: Vec<f64>,
    /// dense `a,b,c,d` → compressed slot
    slots: Vec<usize>,
}

impl SymmetricTensor4 {
    pub fn zeros(dim: usize) -> Self {
        let mut sorted = Vec::new();
        for a in 0..dim {
            for b in a..dim {
                for c in b..dim {
                    for d in c..dim {
                        sorted.push([a, b, c, d]);
                    }
                }
            }
        }
        let mut slots = vec![0; dim.pow(4)];
        for a in 0..dim {
            for b in 0..dim {
                for c in 0..dim {
                    for d in 0..dim {
                        let mut key = [a, b, c, d];
                        key.sort_unstable();
                        let slot = sorted.binary_search(&key).expect("sorted tuple present");
                        slots[((a * dim + b) * dim + c) * dim + d] = slot;
                    }
                }
            }
        }
        Self { dim, data: vec![0.0; sorted.len()], slots }
    }

    /// Symmetrises a dense `dim⁴` row-major array.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Self {
        let mut t = Self::zeros(dim);
        let mut counts = vec![0usize; t.data.len()];
        for (i, v) in dense.iter().enumerate() {
            let s = t.slots[i];
            t.data[s] += v;
            counts[s] += 1;
        }
        for (v, c) in t.data.iter_mut().zip(counts) {
            *v /= c as f64;
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.slot(a, b, c, d)]
    }

    pub fn set(&mut self, a: usize, b: usize, c: usize, d: usize, value: f64) {
        let s = self.slot(a, b, c, d);
        self.data[s] = value;
    }

    pub fn compressed(&self) -> &[f64] {
        &self.data
    }

    fn slot(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        let n = self.dim;
        self.slots[((a * n + b) * n + c) * n + d]
    }

    /// The matrix `V^{ab}_{xy} = γ_{abxy}`.
    fn slice(&self, a: usize, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |x, y| self.get(a, b, x, y))
    }

    /// Sorted index tuples in storage order.
    fn tuples(&self) -> Vec<[usize; 4]> {
        let mut out = vec![[0; 4]; self.data.len()];
        let n = self.dim;
        for a in 0..n {
            for b in a..n {
                for c in b..n {
                    for d in c..n {
                        out[self.slot(a, b, c, d)] = [a, b, c, d];
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexAction {
    pub k: f64,
    pub gamma2: DMatrix<f64>,
    pub gamma4: SymmetricTensor4,
    pub even: bool,
    pub momenta: Vec<f64>,
    pub momentum_weights: Vec<f64>,
}

impl VertexAction {
    pub fn modes(&self) -> usize {
        self.gamma2.nrows()
    }

    /// `Γ̄(φ) ≈ ½ γ²(φ,φ) + (1/24) γ⁴(φ,φ,φ,φ)`.
    pub fn evaluate(&self, phi: &Field) -> f64 {
        let m = self.modes();
        let mut quartic = 0.0;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        quartic += self.gamma4.get(a, b, c, d) * phi[a] * phi[b] * phi[c] * phi[d];
                    }
                }
            }
        }
        0.5 * phi.dot(&(&self.gamma2 * phi)) + quartic / 24.0
    }
}

/// Derivatives of `(γ², γ⁴)` with `Γ^(6) = 0`.
pub fn rhs_vertex(state: &VertexAction, regulator: &Regulator) -> Result<(DMatrix<f64>, SymmetricTensor4), FlowError> {
    if !state.even {
        return Err(FlowError::Invalid("vertex flow is implemented for even theories only".into()));
    }
    vertex_rhs(state.k, &state.gamma2, &state.gamma4, &state.momenta, &state.momentum_weights, regulator)
}

fn vertex_rhs(
    k: f64,
    gamma2: &DMatrix<f64>,
    gamma4: &SymmetricTensor4,
    momenta: &[f64],
    weights: &[f64],
    regulator: &Regulator,
) -> Result<(DMatrix<f64>, SymmetricTensor4), FlowError> {
    let m = gamma2.nrows();
    let reg = regulator.matrix(k, momenta, weights);
    let total = gamma2 + DMatrix::from_diagonal(&reg.f);
    let total = (&total + total.transpose()) * 0.5;
    let chol = total.clone().cholesky().ok_or_else(|| FlowError::ConvexityLoss {
        k,
        node: None,
        margin: total.clone().symmetric_eigenvalues().min(),
    })?;
    let mut d2 = DMatrix::zeros(m, m);
    let mut d4 = SymmetricTensor4::zeros(m);
    if reg.fdot.iter().all(|&v| v == 0.0) {
        return Ok((d2, d4));
    }
    let g = chol.inverse();
    let h = &g * DMatrix::from_diagonal(&reg.fdot) * &g;
    let slices: Vec<Vec<DMatrix<f64>>> = (0..m).map(|a| (0..m).map(|b| gamma4.slice(a, b)).collect()).collect();
    for a in 0..m {
        for b in 0..m {
            d2[(a, b)] = -0.5 * h.component_mul(&slices[a][b]).sum();
        }
    }
    // T(ab,cd) = Tr[H V^{ab} G V^{cd}]
    let left: Vec<Vec<DMatrix<f64>>> = slices.iter().map(|row| row.iter().map(|v| &h * v).collect()).collect();
    let right: Vec<Vec<DMatrix<f64>>> = slices.iter().map(|row| row.iter().map(|v| &g * v).collect()).collect();
    let trace = |a: usize, b: usize, c: usize, d: usize| -> f64 { left[a][b].component_mul(&right[c][d].transpose()).sum() };
    let tuples = gamma4.tuples();
    let values: Vec<f64> = tuples
        .par_iter()
        .map(|&[a, b, c, d]| trace(a, b, c, d) + trace(a, c, b, d) + trace(a, d, b, c))
        .collect();
    d4.data = values;
    Ok(((&d2 + d2.transpose()) * 0.5, d4))
}

impl Action for VertexAction {
    fn k(&self) -> f64 {
        self.k
    }

    fn pack(&self) -> Vec<f64> {
        let m = self.modes();
        let mut out = Vec::with_capacity(m * (m + 1) / 2 + self.gamma4.len());
        for a in 0..m {
            for b in a..m {
                out.push(self.gamma2[(a, b)]);
            }
        }
        out.extend_from_slice(self.gamma4.compressed());
        out
    }

    fn unpack(&self, k: f64, values: &[f64]) -> Self {
        let m = self.modes();
        let mut gamma2 = DMatrix::zeros(m, m);
        let mut i = 0;
        for a in 0..m {
            for b in a..m {
                gamma2[(a, b)] = values[i];
                gamma2[(b, a)] = values[i];
                i += 1;
            }
        }
        let mut gamma4 = self.gamma4.clone();
        gamma4.data.copy_from_slice(&values[i..]);
        Self { k, gamma2, gamma4, ..self.clone() }
    }

    fn rhs(&self, k: f64, values: &[f64], regulator: &Regulator) -> Result<Vec<f64>, FlowError> {
        let state = self.unpack(k, values);
        let (d2, d4) = rhs_vertex(&state, regulator)?;
        let tmp = VertexAction { gamma2: d2, gamma4: d4, ..state };
        Ok(tmp.pack())
    }

    fn momenta(&self) -> Vec<f64> {
        self.momenta.clone()
    }
}

// ---------------------------------------------------------------------------
// integrator

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    pub rtol: f64,
    pub atol: f64,
    /// First trial step; `None` picks a fraction of the interval.
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for Controller {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, initial_step: None, max_steps: 1_000_000 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evaluations: usize,
    pub min_step: f64,
    pub max_step: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<A> {
    pub k: f64,
    pub action: A,
    /// Cumulative statistics up to this checkpoint.
    pub stats: StepStats,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory<A> {
    pub checkpoints: Vec<Checkpoint<A>>,
    pub stats: StepStats,
}

impl<A: Action> FlowTrajectory<A> {
    pub fn final_action(&self) -> &A {
        &self.checkpoints.last().expect("trajectory has at least one checkpoint").action
    }

    /// The snapshot closest to `k`.
    pub fn at(&self, k: f64) -> Option<&A> {
        self.checkpoints
            .iter()
            .min_by(|a, b| (a.k - k).abs().total_cmp(&(b.k - k).abs()))
            .map(|c| &c.action)
    }
}

/// A flow that stopped early, with everything computed up to that point.
#[derive(Debug, Clone)]
pub struct Interrupted<A> {
    pub error: FlowError,
    pub last_good: A,
    pub partial: FlowTrajectory<A>,
}

impl<A> fmt::Display for Interrupted<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl<A: fmt::Debug> std::error::Error for Interrupted<A> {}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `initial` from its scale down to `k_to`, landing exactly on
/// every requested checkpoint and every Litim kink in between.
pub fn integrate<A: Action>(
    initial: &A,
    k_to: f64,
    checkpoints: &[f64],
    regulator: &Regulator,
    controller: &Controller,
) -> Result<FlowTrajectory<A>, Interrupted<A>> {
    let k_from = initial.k();
    let mut stats = StepStats { min_step: f64::INFINITY, ..StepStats::default() };
    let mut trajectory = FlowTrajectory { checkpoints: Vec::new(), stats };
    let fail = |error: FlowError, last: A, mut partial: FlowTrajectory<A>, stats: StepStats| {
        partial.stats = stats;
        Interrupted { error, last_good: last, partial }
    };
    if !(k_to >= 0.0) || !(k_from >= k_to) {
        return Err(fail(
            FlowError::Invalid(format!("need k_from >= k_to >= 0, got {k_from} -> {k_to}")),
            initial.clone(),
            trajectory,
            stats,
        ));
    }
    let mut wanted: Vec<f64> = checkpoints.iter().copied().filter(|&c| c <= k_from && c >= k_to).collect();
    wanted.push(k_to);
    wanted.sort_by(|a, b| b.total_cmp(a));
    wanted.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * k_from.max(1.0));
    let mut stops: Vec<f64> = wanted.clone();
    for kink in regulator.kinks(&initial.momenta()) {
        if kink < k_from && kink > k_to {
            stops.push(kink);
        }
    }
    stops.sort_by(|a, b| b.total_cmp(a));
    stops.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * k_from.max(1.0));

    let mut k = k_from;
    let mut y = initial.pack();
    let mut state = initial.clone();
    let record = |k: f64, y: &[f64], state: &A, stats: StepStats, traj: &mut FlowTrajectory<A>| {
        traj.checkpoints.push(Checkpoint { k, action: state.unpack(k, y), stats });
    };
    if wanted.first().is_some_and(|&c| (c - k_from).abs() <= 1e-14 * k_from.max(1.0)) {
        record(k, &y, &state, stats, &mut trajectory);
    }
    if k_from == k_to {
        trajectory.stats = stats;
        if trajectory.checkpoints.is_empty() {
            record(k, &y, &state, stats, &mut trajectory);
        }
        return Ok(trajectory);
    }

    let mut f0 = match state.rhs(k, &y, regulator) {
        Ok(f) => f,
        Err(e) => return Err(fail(e, state, trajectory, stats)),
    };
    stats.rhs_evaluations += 1;
    let min_step = 1e-12 * k_from.max(1e-300);
    let mut step = controller.initial_step.unwrap_or(0.01 * (k_from - k_to)).min(k_from - k_to);
    let n = y.len();
    let mut next_stop = 0;
    while next_stop < stops.len() && stops[next_stop] >= k {
        next_stop += 1;
    }
    let mut stages: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut convexity: Option<FlowError> = None;

    while k > k_to {
        if stats.accepted + stats.rejected >= controller.max_steps {
            return Err(fail(FlowError::StepUnderflow { k, step }, state.unpack(k, &y), trajectory, stats));
        }
        let target = stops[next_stop];
        let mut landing = false;
        let mut h = step;
        if k - h <= target + 1e-14 * k_from.max(1.0) {
            h = k - target;
            landing = true;
        }
        if h < min_step && !landing {
            let err = convexity.take().unwrap_or(FlowError::StepUnderflow { k, step: h });
            return Err(fail(err, state.unpack(k, &y), trajectory, stats));
        }
        // stages, integrating with dk = -h
        stages[0].clone_from(&f0);
        let mut stage_error = None;
        for s in 1..7 {
            let ks = k - C[s] * h;
            let ys: Vec<f64> = (0..n)
                .map(|i| y[i] - h * (0..s).map(|j| A[s][j] * stages[j][i]).sum::<f64>())
                .collect();
            stats.rhs_evaluations += 1;
            match state.rhs(ks, &ys, regulator) {
                Ok(f) => stages[s] = f,
                Err(e) => {
                    stage_error = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = stage_error {
            match e {
                FlowError::ConvexityLoss { .. } => {
                    convexity = Some(e);
                    stats.rejected += 1;
                    step = 0.25 * h;
                    continue;
                }
                other => return Err(fail(other, state.unpack(k, &y), trajectory, stats)),
            }
        }
        let y5: Vec<f64> = (0..n).map(|i| y[i] - h * (0..7).map(|j| B5[j] * stages[j][i]).sum::<f64>()).collect();
        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h * (0..7).map(|j| (B5[j] - B4[j]) * stages[j][i]).sum::<f64>();
            let scale = controller.atol + controller.rtol * y[i].abs().max(y5[i].abs());
            err_sq += (e / scale).powi(2);
        }
        let err = (err_sq / n.max(1) as f64).sqrt();
        if err <= 1.0 || h <= min_step {
            k = if landing { target } else { k - h };
            y = y5;
            f0 = stages[6].clone();
            stats.accepted += 1;
            stats.min_step = stats.min_step.min(h);
            stats.max_step = stats.max_step.max(h);
            convexity = None;
            state = state.unpack(k, &y);
            if landing {
                if wanted.iter().any(|&w| (w - target).abs() <= 1e-14 * k_from.max(1.0)) {
                    record(k, &y, &state, stats, &mut trajectory);
                }
                next_stop += 1;
                if target > 0.0 && next_stop < stops.len() {
                    // the regulator may be non-smooth here; restart the derivative
                    match state.rhs(k, &y, regulator) {
                        Ok(f) => f0 = f,
                        Err(e) => return Err(fail(e, state, trajectory, stats)),
                    }
                    stats.rhs_evaluations += 1;
                }
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            step = if landing { step.max(h * factor) } else { h * factor };
        } else {
            stats.rejected += 1;
            step = h * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    if stats.min_step == f64::INFINITY {
        stats.min_step = 0.0;
    }
    for c in &mut trajectory.checkpoints {
        if c.stats.min_step == f64::INFINITY {
            c.stats.min_step = 0.0;
        }
    }
    trajectory.stats = stats;
    Ok(trajectory)
}

// ---------------------------------------------------------------------------
// initial conditions

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Exact,
    Classical,
}

impl std::str::FromStr for InitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "classical" => Ok(Self::Classical),
            other => Err(format!("unknown initial condition `{other}` (expected exact or classical)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Initial<A> {
    pub action: A,
    /// Max-abs difference between the exact and classical initial data
    /// (grid nodes, or vertex coefficients).
    pub discrepancy: f64,
}

/// Grid initial data for a single-mode model on its configured field grid.
pub fn initial_grid(ctx: &FunctionalContext, mode: InitMode, k_uv: f64) -> Result<Initial<GridAction>, FlowError> {
    let model = ctx.model();
    if model.modes() != 1 {
        return Err(FlowError::Invalid(format!("grid flow needs a single mode, model has {}", model.modes())));
    }
    if !(k_uv > 0.0) {
        return Err(FlowError::Invalid(format!("k_UV must be positive, got {k_uv}")));
    }
    let phi = model.field_grid().points();
    let classical: Vec<f64> = phi.iter().map(|&p| model.classical_asymptote_scalar(p)).collect();
    let exact = || -> Result<Vec<f64>, FlowError> {
        let fields: Vec<Field> = phi.iter().map(|&p| DVector::from_element(1, p)).collect();
        let zero = ctx.gamma(k_uv, &DVector::zeros(1))?;
        Ok(ctx.gamma_batch(k_uv, &fields)?.into_iter().map(|g| g.gamma - zero).collect())
    };
    let (values, discrepancy) = if model.interaction().is_free() {
        (classical.clone(), 0.0)
    } else {
        let ex = exact()?;
        let d = ex.iter().zip(&classical).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        (if mode == InitMode::Exact { ex } else { classical.clone() }, d)
    };
    let action = GridAction::new(k_uv, phi, values, model.momenta()[0])?;
    Ok(Initial { action, discrepancy })
}

fn classical_vertex(model: &Model) -> (DMatrix<f64>, SymmetricTensor4) {
    let m = model.modes();
    let zero = DVector::zeros(m);
    let gamma2 = model.precision() + model.interaction_hessian(&zero);
    let mut gamma4 = SymmetricTensor4::zeros(m);
    let c4 = model.interaction().c4;
    let geometry = model.geometry();
    for [a, b, c, d] in gamma4.tuples() {
        let v: f64 = (0..geometry.positions.len())
            .map(|i| {
                let row = geometry.basis.row(i);
                geometry.position_weights[i] * row[a] * row[b] * row[c] * row[d]
            })
            .sum();
        gamma4.set(a, b, c, d, 24.0 * c4 * v);
    }
    (gamma2, gamma4)
}

fn exact_vertex(ctx: &FunctionalContext, k: f64) -> Result<(DMatrix<f64>, SymmetricTensor4), FlowError> {
    let m = ctx.modes();
    let zero = DualVector::zeros(m);
    let cov = ctx.connected_cov(k, &zero)?;
    let a = cov
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(FlowError::ConvexityLoss { k, node: None, margin: 0.0 })?;
    let f = ctx.regulator_matrix(k).f;
    let gamma2 = &a - DMatrix::from_diagonal(&f);
    let kappa = ctx.connected_fourth(k, &zero)?;
    let mut dense = vec![0.0; m.pow(4)];
    // γ⁴_abcd = −κ_ijkl A_ia A_jb A_kc A_ld, one index at a time
    let contract = |t: &[f64], axis: usize| -> Vec<f64> {
        let mut out = vec![0.0; m.pow(4)];
        let stride = m.pow(3 - axis as u32);
        for (idx, o) in out.iter_mut().enumerate() {
            let target = (idx / stride) % m;
            let base = idx - target * stride;
            *o = (0..m).map(|i| t[base + i * stride] * a[(i, target)]).sum();
        }
        out
    };
    let mut t = kappa;
    for axis in 0..4 {
        t = contract(&t, axis);
    }
    for (d, v) in dense.iter_mut().zip(&t) {
        *d = -v;
    }
    Ok(((&gamma2 + gamma2.transpose()) * 0.5, SymmetricTensor4::from_dense(m, &dense)))
}

/// Vertex initial data; `discrepancy` compares exact and classical
/// coefficients.
pub fn initial_vertex(ctx: &FunctionalContext, mode: InitMode, k_uv: f64) -> Result<Initial<VertexAction>, FlowError> {
    let model = ctx.model();
    if !model.interaction().is_even() {
        return Err(FlowError::Invalid("vertex flow needs an even interaction (c3 = 0)".into()));
    }
    if !(k_uv > 0.0) {
        return Err(FlowError::Invalid(format!("k_UV must be positive, got {k_uv}")));
    }
    let (c2, c4) = classical_vertex(model);
    let (gamma2, gamma4, discrepancy) = if model.interaction().is_free() {
        (c2, c4, 0.0)
    } else {
        let (e2, e4) = exact_vertex(ctx, k_uv)?;
        let d = (&e2 - &c2).amax().max(
            e4.compressed()
                .iter()
                .zip(c4.compressed())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        match mode {
            InitMode::Exact => (e2, e4, d),
            InitMode::Classical => (c2, c4, d),
        }
    };
    Ok(Initial {
        action: VertexAction {
            k: k_uv,
            gamma2,
            gamma4,
            even: true,
            momenta: model.momenta().to_vec(),
            momentum_weights: model.momentum_weights(),
        },
        discrepancy,
    })
}

// ---------------------------------------------------------------------------
// unsubtracted equation with the normalisation term

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FirstFormRow {
    pub k: f64,
    pub phi: Vec<f64>,
    /// Finite difference of `Γ_k(φ)` in `k`.
    pub lhs: f64,
    /// `½Tr[Ḟ_k (Γ''_k + F_k)⁻¹] + ∂_k ln N_k`.
    pub rhs: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FirstFormReport {
    pub rows: Vec<FirstFormRow>,
    pub max_difference: f64,
}

/// Compares both sides of the unsubtracted flow equation at each probe.
pub fn frge_first_form_check(ctx: &FunctionalContext, probes: &[(f64, Field)]) -> Result<FirstFormReport, FlowError> {
    let rows: Vec<FirstFormRow> = probes
        .par_iter()
        .map(|(k, phi)| first_form_row(ctx, *k, phi))
        .collect::<Result<_, _>>()?;
    let max_difference = rows.iter().map(|r| r.difference).fold(0.0, f64::max);
    Ok(FirstFormReport { rows, max_difference })
}

fn first_form_row(ctx: &FunctionalContext, k: f64, phi: &Field) -> Result<FirstFormRow, FlowError> {
    let reg = ctx.regulator_matrix(k);
    let (lhs, rhs) = if k < 0.0 && reg.is_zero() {
        // neither side depends on k below zero
        (0.0, 0.0)
    } else {
        let solve = ctx.invert_mean_field(k, phi, None)?;
        let cov = &solve.moments.covariance;
        let trace: f64 = reg.fdot.iter().enumerate().map(|(j, d)| d * cov[(j, j)]).sum();
        let rhs = 0.5 * trace + ctx.dk_log_normalization(k)?;
        let lhs = k_derivative(|kk| Ok(ctx.gamma(kk, phi)?), k)?;
        (lhs, rhs)
    };
    Ok(FirstFormRow { k, phi: phi.iter().copied().collect(), lhs, rhs, difference: (lhs - rhs).abs() })
}

/// Three-level Richardson extrapolation of central differences, step
/// `min(0.1, k/4)`.
fn k_derivative(f: impl Fn(f64) -> Result<f64, FlowError>, k: f64) -> Result<f64, FlowError> {
    let h = if k > 0.0 { (0.25 * k).min(0.1) } else { 0.1 };
    let d = |h: f64| -> Result<f64, FlowError> { Ok((f(k + h)? - f(k - h)?) / (2.0 * h)) };
    let d1 = d(h)?;
    let d2 = d(h / 2.0)?;
    let d3 = d(h / 4.0)?;
    let r1 = (4.0 * d2 - d1) / 3.0;
    let r2 = (4.0 * d3 - d2) / 3.0;
    Ok((16.0 * r2 - r1) / 15.0)
}
