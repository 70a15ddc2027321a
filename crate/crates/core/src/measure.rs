//! The regularised Gaussian measure at finite truncation: sampling,
//! quadrature, and its Cameron–Martin structure.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::Model;
use crate::quadrature::{for_each_tensor_node, tensor_size, GaussHermite, MAX_LEVEL};

pub type Field = DVector<f64>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("covariance is not symmetric positive definite")]
    NotSpd,
    #[error("requested error {requested:.3e} not reached within budget (best estimate {achieved:.3e} with {evaluations} evaluations)")]
    BudgetExceeded { requested: f64, achieved: f64, evaluations: usize },
    #[error("tensor quadrature supports at most {max} modes, model has {modes}")]
    TooManyModes { modes: usize, max: usize },
}

/// Coordinates of a source (dual) element; pairs with fields as `Σ T_j ψ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector(pub DVector<f64>);

impl DualVector {
    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(DVector::from_vec(values))
    }

    pub fn scalar(value: f64) -> Self {
        Self(DVector::from_element(1, value))
    }

    pub fn pair(&self, field: &Field) -> f64 {
        self.0.dot(field)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<DVector<f64>> for DualVector {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

/// Largest mode count accepted by the tensor Gauss–Hermite rule.
pub const MAX_QUADRATURE_MODES: usize = 4;

/// Default nodes per axis for the tensor rule.
pub fn default_level(modes: usize) -> usize {
    match modes {
        0 | 1 => 64,
        2 => 32,
        3 => 16,
        _ => 10,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Quadrature,
    MonteCarlo { seed: u64 },
}

/// Accuracy budget for [`GaussianMeasure::expectation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectationBudget {
    pub tolerance: f64,
    /// Starting level; `None` uses [`default_level`].
    pub level: Option<usize>,
    pub max_level: usize,
    pub initial_samples: usize,
    pub max_samples: usize,
}

impl Default for ExpectationBudget {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            level: None,
            max_level: 128,
            initial_samples: 10_000,
            max_samples: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodKind {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationResult {
    pub value: f64,
    /// Non-negative error estimate (level comparison or standard error).
    pub error: f64,
    pub method: MethodKind,
    /// Nodes per axis (quadrature) or samples (Monte Carlo).
    pub count: usize,
    pub seed: Option<u64>,
}

/// Centred Gaussian measure with covariance `C_ν`.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    precision: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
}

impl GaussianMeasure {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self, MeasureError> {
        let cholesky = covariance.clone().cholesky().ok_or(MeasureError::NotSpd)?;
        let factor = cholesky.l();
        let precision = cholesky.inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        Ok(Self { covariance, factor, precision, cholesky })
    }

    pub fn of_model(model: &Model) -> Self {
        Self::new(model.covariance().clone()).expect("model covariance is SPD by construction")
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular `L` with `L Lᵀ = C_ν`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `ln det C_ν`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `ψ = L z` with `z` i.i.d. standard normal, deterministic in `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Field> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.dim();
        (0..count)
            .map(|_| {
                let z = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng)));
                &self.factor * z
            })
            .collect()
    }

    /// Cameron–Martin inner product `⟨T, S⟩ = Tᵀ C_ν S`.
    pub fn cm_inner(&self, t: &DualVector, s: &DualVector) -> f64 {
        t.0.dot(&(&self.covariance * &s.0))
    }

    /// `R_ν T = C_ν T`, the embedding of a source into the Cameron–Martin space.
    pub fn r_nu(&self, t: &DualVector) -> Field {
        &self.covariance * &t.0
    }

    pub fn r_nu_inverse(&self, phi: &Field) -> DualVector {
        DualVector(self.cholesky.solve(phi))
    }

    /// Cameron–Martin norm `φᵀ C_ν⁻¹ φ` of a field.
    pub fn cm_norm_sq(&self, phi: &Field) -> f64 {
        phi.dot(&self.cholesky.solve(phi))
    }

    pub fn expectation<G>(&self, g: G, method: Method, budget: &ExpectationBudget) -> Result<ExpectationResult, MeasureError>
    where
        G: Fn(&Field) -> f64,
    {
        match method {
            Method::Quadrature => self.quadrature(&g, budget),
            Method::MonteCarlo { seed } => self.monte_carlo(&g, seed, budget),
        }
    }

    fn quadrature_at(&self, g: &dyn Fn(&Field) -> f64, level: usize) -> f64 {
        let rule = GaussHermite::cached(level);
        let m = self.dim();
        let mut z_vec = DVector::zeros(m);
        let mut total = 0.0;
        for_each_tensor_node(&rule, m, |z, w| {
            z_vec.copy_from_slice(z);
            let psi = &self.factor * &z_vec;
            total += w * g(&psi);
        });
        total
    }

    fn quadrature(&self, g: &dyn Fn(&Field) -> f64, budget: &ExpectationBudget) -> Result<ExpectationResult, MeasureError> {
        let m = self.dim();
        if m > MAX_QUADRATURE_MODES {
            return Err(MeasureError::TooManyModes { modes: m, max: MAX_QUADRATURE_MODES });
        }
        let max_level = budget.max_level.min(MAX_LEVEL);
        let mut level = budget.level.unwrap_or_else(|| default_level(m)).min(max_level);
        let mut coarse = self.quadrature_at(g, (2 * level / 3).max(1));
        loop {
            let fine = self.quadrature_at(g, level);
            let error = (fine - coarse).abs();
            if error <= budget.tolerance * fine.abs().max(1.0) {
                return Ok(ExpectationResult { value: fine, error, method: MethodKind::Quadrature, count: level, seed: None });
            }
            if level >= max_level {
                return Err(MeasureError::BudgetExceeded {
                    requested: budget.tolerance,
                    achieved: error,
                    evaluations: tensor_size(level, m),
                });
            }
            coarse = fine;
            level = (level * 3 / 2).min(max_level);
        }
    }

    fn monte_carlo(&self, g: &dyn Fn(&Field) -> f64, seed: u64, budget: &ExpectationBudget) -> Result<ExpectationResult, MeasureError> {
        let mut count = budget.initial_samples.max(2);
        loop {
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for (i, psi) in self.sample(count, seed).iter().enumerate() {
                let v = g(psi);
                let delta = v - mean;
                mean += delta / (i + 1) as f64;
                m2 += delta * (v - mean);
            }
            let variance = m2 / (count - 1) as f64;
            let error = (variance / count as f64).sqrt();
            if error <= budget.tolerance {
                return Ok(ExpectationResult { value: mean, error, method: MethodKind::MonteCarlo, count, seed: Some(seed) });
            }
            if count >= budget.max_samples {
                return Err(MeasureError::BudgetExceeded { requested: budget.tolerance, achieved: error, evaluations: count });
            }
            count = (count * 4).min(budget.max_samples);
        }
    }
}
