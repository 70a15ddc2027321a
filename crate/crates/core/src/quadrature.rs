//! Gauss–Hermite rules for expectations against the standard normal density,
//! plus tensor-product iteration over several axes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Largest supported number of nodes per axis. The dense eigenproblem that
/// seeds the roots costs `O(level³)`, so this keeps a cold start cheap.
pub const MAX_LEVEL: usize = 400;

/// A Gauss–Hermite rule normalised for the probabilists' weight, i.e.
/// `Σ wᵢ g(zᵢ) ≈ ∫ g(z) e^{-z²/2} / √(2π) dz`. Weights sum to one.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes the rule with `level` nodes. The roots are seeded with the
    /// eigenvalues of the Jacobi matrix and polished by Newton iteration on
    /// the orthonormal Hermite recurrence, which also yields the weights.
    ///
    /// # Panics
    /// If `level` is zero or exceeds [`MAX_LEVEL`].
    pub fn new(level: usize) -> Self {
        assert!(
            (1..=MAX_LEVEL).contains(&level),
            "Gauss-Hermite level must lie in 1..={MAX_LEVEL}, got {level}"
        );
        let n = level;
        let nf = n as f64;
        // physicists' Hermite: zero diagonal, off-diagonal sqrt(i/2)
        let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut seeds: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        seeds.sort_by(|a, b| b.total_cmp(a));

        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = seeds[i];
            for _ in 0..8 {
                let (p1, p2, _) = orthonormal_hermite(n, z);
                let step = p1 / ((2.0 * nf).sqrt() * p2);
                if !step.is_finite() {
                    break;
                }
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            let (_, p2, log_scale) = orthonormal_hermite(n, z);
            // w = 2 / (2n p_{n-1}²), with the recurrence's scale restored
            let log_w = std::f64::consts::LN_2 - 2.0 * ((2.0 * nf).sqrt() * p2.abs()).ln() - 2.0 * log_scale;
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = log_w.exp();
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        // physicists' -> probabilists'
        let sqrt2 = std::f64::consts::SQRT_2;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = x
            .iter()
            .zip(&w)
            .map(|(&xi, &wi)| (sqrt2 * xi, wi * inv_sqrt_pi))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // renormalise against round-off in the weights
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// Shared, lazily computed rule.
    pub fn cached(level: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(level)
            .or_insert_with(|| Arc::new(GaussHermite::new(level)))
            .clone()
    }

    pub fn level(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// One-dimensional expectation of `g` under the standard normal.
    pub fn expect(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * g(z))
            .sum()
    }
}

/// Values `(p_n(z), p_{n-1}(z))` of the orthonormal Hermite polynomials
/// (physicists' weight), divided by `e^{scale}` to stay inside `f64` range.
fn orthonormal_hermite(n: usize, z: f64) -> (f64, f64, f64) {
    const BIG: f64 = 1e150;
    // π^{-1/4}
    let mut p1 = 0.751_125_544_464_942_5_f64;
    let mut p2 = 0.0;
    let mut scale = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
        if p1.abs() > BIG {
            p1 /= BIG;
            p2 /= BIG;
            scale += BIG.ln();
        }
    }
    (p1, p2, scale)
}

/// Visits every node of the `dim`-fold tensor product of `rule`, handing the
/// callback the standard-normal coordinates and the product weight.
pub fn for_each_tensor_node(rule: &GaussHermite, dim: usize, mut visit: impl FnMut(&[f64], f64)) {
    let level = rule.level();
    let mut index = vec![0usize; dim];
    let mut z = vec![0.0; dim];
    if dim == 0 {
        visit(&z, 1.0);
        return;
    }
    loop {
        let mut weight = 1.0;
        for (axis, &i) in index.iter().enumerate() {
            z[axis] = rule.nodes[i];
            weight *= rule.weights[i];
        }
        visit(&z, weight);
        let mut axis = 0;
        loop {
            index[axis] += 1;
            if index[axis] < level {
                break;
            }
            index[axis] = 0;
            axis += 1;
            if axis == dim {
                return;
            }
        }
    }
}

/// Number of nodes in a `dim`-fold tensor rule, saturating on overflow.
pub fn tensor_size(level: usize, dim: usize) -> usize {
    (0..dim).fold(1usize, |acc, _| acc.saturating_mul(level))
}
