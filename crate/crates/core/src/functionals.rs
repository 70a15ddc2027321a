//! Regularised partition functions, their logarithms and the effective
//! average action obtained by inverting the mean-field map.
//!
//! Every integral is a tilted Gaussian integral in mode coordinates, written
//! with respect to Lebesgue measure:
//!
//! `ℓ(ψ) = −½ψᵀPψ + Tᵀψ − S_int(ψ + a) − ½ Σ_j f_j (ψ + b)_j²`
//!
//! with `P = C_ν⁻¹`, `f` the diagonal of `F_k`, and optional shifts `a`, `b`
//! used by the Cameron–Martin form and by `X_{k,φ}`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::laplace::{self, IntegrationError, Levels, LogDensity, Moments, TiltedIntegral};
use crate::measure::{DualVector, ExpectationBudget, Field, GaussianMeasure, MeasureError, Method};
use crate::model::Model;
use crate::regulator::{Regulator, RegulatorMatrix};

/// Largest number of modes handled by the tensor quadrature.
pub const MAX_MODES: usize = 4;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error("quadrature budget exceeded: wanted {requested:.3e}, best estimate {achieved:.3e} at {level} nodes per axis")]
    BudgetExceeded { requested: f64, achieved: f64, level: usize },
    #[error("integrand became non-finite near {at:?}")]
    NonFinite { at: Vec<f64> },
    #[error("{modes} modes exceed the quadrature limit of {max}")]
    TooManyModes { modes: usize, max: usize },
    #[error("direct and Cameron-Martin forms of W disagree: {direct} vs {shifted}")]
    SelfCheckFailed { direct: f64, shifted: f64 },
    #[error("Newton iteration stalled after {iterations} steps with residual {residual:.3e}")]
    NewtonStalled { iterations: usize, residual: f64 },
    #[error("mean field out of reach: source norm {source_norm:.3e}, residual {residual:.3e}")]
    RangeExceeded { source_norm: f64, residual: f64 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

impl From<IntegrationError> for FunctionalError {
    fn from(e: IntegrationError) -> Self {
        match e {
            IntegrationError::BudgetExceeded { requested, achieved, level } => {
                FunctionalError::BudgetExceeded { requested, achieved, level }
            }
            IntegrationError::NonFinite { at } => FunctionalError::NonFinite { at },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    /// Absolute tolerance on log-masses and tilted moments.
    pub tolerance: f64,
    /// Override of the per-axis quadrature levels.
    pub levels: Option<Levels>,
    pub newton_tolerance: f64,
    pub newton_max_iterations: usize,
    /// Extra Newton steps taken after the tolerance is met, while they help.
    pub polish_steps: usize,
    /// Evaluate `W` both directly and in Cameron–Martin form.
    pub self_check: bool,
    /// Sources beyond this norm are reported as [`FunctionalError::RangeExceeded`].
    pub max_source: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            levels: None,
            newton_tolerance: 1e-10,
            newton_max_iterations: 60,
            polish_steps: 2,
            self_check: true,
            max_source: 1e12,
        }
    }
}

struct Tilted<'a> {
    model: &'a Model,
    source: &'a DVector<f64>,
    f: &'a DVector<f64>,
    interaction_shift: Option<&'a DVector<f64>>,
    regulator_shift: Option<&'a DVector<f64>>,
}

impl Tilted<'_> {
    fn shifted(&self, psi: &DVector<f64>, shift: Option<&DVector<f64>>) -> DVector<f64> {
        match shift {
            Some(a) => psi + a,
            None => psi.clone(),
        }
    }
}

impl LogDensity for Tilted<'_> {
    fn dim(&self) -> usize {
        self.model.modes()
    }

    fn value(&self, psi: &DVector<f64>) -> f64 {
        let p = self.model.precision();
        let u = self.shifted(psi, self.interaction_shift);
        let v = self.shifted(psi, self.regulator_shift);
        let reg: f64 = v.iter().zip(self.f.iter()).map(|(x, f)| f * x * x).sum();
        -0.5 * psi.dot(&(p * psi)) + self.source.dot(psi) - self.model.interaction_value(&u) - 0.5 * reg
    }

    fn derivatives(&self, psi: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.model.precision();
        let u = self.shifted(psi, self.interaction_shift);
        let v = self.shifted(psi, self.regulator_shift);
        let grad = -(p * psi) + self.source - self.model.interaction_gradient(&u) - self.f.component_mul(&v);
        let hess = -p - self.model.interaction_hessian(&u) - DMatrix::from_diagonal(self.f);
        (grad, hess)
    }
}

/// Tilted moments at a source `T`.
#[derive(Debug, Clone)]
pub struct TiltedMoments {
    /// `W_k(T)`.
    pub w: f64,
    pub mean: Field,
    pub covariance: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct MeanFieldSolve {
    pub source: DualVector,
    pub residual: f64,
    pub iterations: usize,
    pub moments: TiltedMoments,
}

#[derive(Debug, Clone)]
pub struct GammaPoint {
    pub field: Field,
    pub gamma: f64,
    pub source: DualVector,
    pub w: f64,
    pub residual: f64,
    /// `J(φ) − W_k(J) − ½F_k(φ,φ) − Γ_k(φ)`, kept for bookkeeping.
    pub fenchel_young: f64,
}

/// Immutable evaluation context: a model, a regulator and an accuracy budget.
#[derive(Debug, Clone)]
pub struct FunctionalContext {
    model: Model,
    regulator: Regulator,
    budget: Budget,
    /// `½ ln det(2π C_ν)`.
    log_gauss: f64,
}

impl FunctionalContext {
    pub fn new(model: Model, regulator: Regulator) -> Result<Self, FunctionalError> {
        Self::with_budget(model, regulator, Budget::default())
    }

    pub fn with_budget(model: Model, regulator: Regulator, budget: Budget) -> Result<Self, FunctionalError> {
        let m = model.modes();
        if m > MAX_MODES {
            return Err(FunctionalError::TooManyModes { modes: m, max: MAX_MODES });
        }
        let measure = GaussianMeasure::of_model(&model);
        let log_gauss = 0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + measure.log_det());
        Ok(Self { model, regulator, budget, log_gauss })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn regulator(&self) -> &Regulator {
        &self.regulator
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    pub fn modes(&self) -> usize {
        self.model.modes()
    }

    pub fn regulator_matrix(&self, k: f64) -> RegulatorMatrix {
        self.regulator.matrix(k, self.model.momenta(), &self.model.momentum_weights())
    }

    fn levels(&self) -> Levels {
        self.budget.levels.unwrap_or_else(|| Levels::for_dim(self.modes()))
    }

    fn integrate(
        &self,
        f: &DVector<f64>,
        source: &DVector<f64>,
        interaction_shift: Option<&DVector<f64>>,
        regulator_shift: Option<&DVector<f64>>,
        moments: Moments,
        start: Option<&DVector<f64>>,
    ) -> Result<TiltedIntegral, FunctionalError> {
        let density = Tilted { model: &self.model, source, f, interaction_shift, regulator_shift };
        let start = match start {
            Some(s) => s.clone(),
            None => {
                // mode of the Gaussian part
                let mut rhs = source.clone();
                if let Some(b) = regulator_shift {
                    rhs -= f.component_mul(b);
                }
                let a = self.model.precision() + DMatrix::from_diagonal(f);
                a.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(self.modes()))
            }
        };
        Ok(laplace::integrate(&density, &start, self.levels(), self.budget.tolerance, moments)?)
    }

    fn log_mass_zero(&self, f: &DVector<f64>, moments: Moments) -> Result<TiltedIntegral, FunctionalError> {
        let zero = DVector::zeros(self.modes());
        self.integrate(f, &zero, None, None, moments, None)
    }

    /// `ln N_k`.
    pub fn log_normalization(&self, k: f64) -> Result<f64, FunctionalError> {
        let f = self.regulator_matrix(k).f;
        Ok(self.log_mass_zero(&f, Moments::MassOnly)?.log_mass - self.log_gauss)
    }

    /// `W_k(T) = ln Z_k(T)`, cross-checked against the Cameron–Martin form
    /// when the budget asks for it.
    pub fn w(&self, k: f64, t: &DualVector) -> Result<f64, FunctionalError> {
        if t.as_vector().iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        let f = self.regulator_matrix(k).f;
        let base = self.log_mass_zero(&f, Moments::MassOnly)?.log_mass;
        let direct = self.integrate(&f, t.as_vector(), None, None, Moments::MassOnly, None)?.log_mass - base;
        if self.budget.self_check {
            let shifted = self.w_cameron_martin(&f, t, base)?;
            let scale = direct.abs().max(1.0);
            if (direct - shifted).abs() > 10.0 * self.budget.tolerance * scale {
                return Err(FunctionalError::SelfCheckFailed { direct, shifted });
            }
        }
        Ok(direct)
    }

    /// `½⟨T, C T⟩ + ln E_ν[f_k(ψ + C T)] − ln N_k`.
    fn w_cameron_martin(&self, f: &DVector<f64>, t: &DualVector, base: f64) -> Result<f64, FunctionalError> {
        let c = self.model.covariance();
        let shift = c * t.as_vector();
        let zero = DVector::zeros(self.modes());
        let start = -&shift;
        let shifted = self.integrate(f, &zero, Some(&shift), Some(&shift), Moments::MassOnly, Some(&start))?;
        Ok(0.5 * t.as_vector().dot(&shift) + shifted.log_mass - base)
    }

    /// `Z_k(T)`.
    pub fn z(&self, k: f64, t: &DualVector) -> Result<f64, FunctionalError> {
        Ok(self.w(k, t)?.exp())
    }

    /// `W_k(T)` together with its first two derivatives in `T`.
    pub fn moments(&self, k: f64, t: &DualVector) -> Result<TiltedMoments, FunctionalError> {
        let f = self.regulator_matrix(k).f;
        self.moments_with(&f, t, None, None)
    }

    fn moments_with(
        &self,
        f: &DVector<f64>,
        t: &DualVector,
        base: Option<f64>,
        start: Option<&DVector<f64>>,
    ) -> Result<TiltedMoments, FunctionalError> {
        let base = match base {
            Some(b) => b,
            None => self.log_mass_zero(f, Moments::MassOnly)?.log_mass,
        };
        let r = self.integrate(f, t.as_vector(), None, None, Moments::UpToSecond, start)?;
        let min_eigenvalue = r.covariance.clone().symmetric_eigenvalues().min();
        Ok(TiltedMoments {
            w: r.log_mass - base,
            mean: r.mean,
            covariance: r.covariance,
            min_eigenvalue,
            error: r.error,
        })
    }

    /// `D_T W_k(T)`.
    pub fn mean_field(&self, k: f64, t: &DualVector) -> Result<Field, FunctionalError> {
        Ok(self.moments(k, t)?.mean)
    }

    /// `D²_T W_k(T)`.
    pub fn connected_cov(&self, k: f64, t: &DualVector) -> Result<DMatrix<f64>, FunctionalError> {
        Ok(self.moments(k, t)?.covariance)
    }

    /// Fourth connected cumulant of the tilted measure, dense `M⁴` row-major.
    pub fn connected_fourth(&self, k: f64, t: &DualVector) -> Result<Vec<f64>, FunctionalError> {
        let f = self.regulator_matrix(k).f;
        let r = self.integrate(&f, t.as_vector(), None, None, Moments::UpToFourth, None)?;
        Ok(r.fourth_cumulant.expect("requested fourth cumulant"))
    }

    /// Solves `D_T W_k(J) = φ` by Newton's method with the connected
    /// covariance as Jacobian.
    pub fn invert_mean_field(&self, k: f64, phi: &Field, warm: Option<&DualVector>) -> Result<MeanFieldSolve, FunctionalError> {
        let f = self.regulator_matrix(k).f;
        let base = self.log_mass_zero(&f, Moments::MassOnly)?.log_mass;
        let mut j = match warm {
            Some(w) => w.as_vector().clone(),
            // classical guess: ∂ of ½φᵀ(P+F)φ + S(φ)
            None => self.model.precision() * phi + f.component_mul(phi) + self.model.interaction_gradient(phi),
        };
        let tol = self.budget.newton_tolerance;
        let evaluate = |j: &DVector<f64>| -> Result<(TiltedMoments, DVector<f64>), FunctionalError> {
            if !(j.norm() <= self.budget.max_source) {
                return Err(FunctionalError::RangeExceeded { source_norm: j.norm(), residual: f64::INFINITY });
            }
            let m = self.moments_with(&f, &DualVector(j.clone()), Some(base), Some(phi))?;
            let r = &m.mean - phi;
            Ok((m, r))
        };
        let (mut mom, mut r) = evaluate(&j)?;
        let mut res = r.amax();
        let mut iterations = 0;
        let mut polished = 0;
        while iterations < self.budget.newton_max_iterations {
            if res <= tol {
                if polished >= self.budget.polish_steps || res <= 1e-15 * (1.0 + phi.amax()) {
                    break;
                }
                polished += 1;
            }
            iterations += 1;
            let step = match mom.covariance.clone().cholesky() {
                Some(c) => -c.solve(&r),
                None => {
                    return Err(FunctionalError::NewtonStalled { iterations, residual: res });
                }
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1e-10 {
                let trial = &j + alpha * &step;
                match evaluate(&trial) {
                    Ok((m2, r2)) => {
                        let res2 = r2.amax();
                        if res2 < (1.0 - 1e-4 * alpha) * res {
                            j = trial;
                            mom = m2;
                            r = r2;
                            res = res2;
                            accepted = true;
                            break;
                        }
                    }
                    Err(FunctionalError::RangeExceeded { .. }) | Err(FunctionalError::NonFinite { .. }) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            if !accepted {
                if res <= tol {
                    break;
                }
                if !(j.norm() <= self.budget.max_source) || !res.is_finite() {
                    return Err(FunctionalError::RangeExceeded { source_norm: j.norm(), residual: res });
                }
                return Err(FunctionalError::NewtonStalled { iterations, residual: res });
            }
        }
        if res > tol {
            return Err(FunctionalError::NewtonStalled { iterations, residual: res });
        }
        Ok(MeanFieldSolve { source: DualVector(j), residual: res, iterations, moments: mom })
    }

    /// `Γ_k(φ) = J(φ) − W_k(J) − ½F_k(φ,φ)`.
    pub fn gamma_point(&self, k: f64, phi: &Field, warm: Option<&DualVector>) -> Result<GammaPoint, FunctionalError> {
        let reg = self.regulator_matrix(k);
        let solve = self.invert_mean_field(k, phi, warm)?;
        let jphi = solve.source.pair(phi);
        let half_f = 0.5 * reg.form(phi);
        let gamma = jphi - solve.moments.w - half_f;
        let fenchel_young = jphi - solve.moments.w - half_f - gamma;
        Ok(GammaPoint {
            field: phi.clone(),
            gamma,
            source: solve.source,
            w: solve.moments.w,
            residual: solve.residual,
            fenchel_young,
        })
    }

    pub fn gamma(&self, k: f64, phi: &Field) -> Result<f64, FunctionalError> {
        Ok(self.gamma_point(k, phi, None)?.gamma)
    }

    /// `Γ̄_k(φ) = Γ_k(φ) − Γ_k(0)`.
    pub fn gamma_bar(&self, k: f64, phi: &Field) -> Result<f64, FunctionalError> {
        let zero = DVector::zeros(self.modes());
        Ok(self.gamma(k, phi)? - self.gamma(k, &zero)?)
    }

    /// `Γ_k` at every field in `fields`, solved independently in parallel.
    pub fn gamma_batch(&self, k: f64, fields: &[Field]) -> Result<Vec<GammaPoint>, FunctionalError> {
        fields.par_iter().map(|phi| self.gamma_point(k, phi, None)).collect()
    }

    /// Sequential variant of [`FunctionalContext::gamma_batch`] that warm
    /// starts each solve from its predecessor.
    pub fn gamma_chain(&self, k: f64, fields: &[Field]) -> Result<Vec<GammaPoint>, FunctionalError> {
        let mut out: Vec<GammaPoint> = Vec::with_capacity(fields.len());
        for phi in fields {
            let warm = out.last().map(|p| p.source.clone());
            out.push(self.gamma_point(k, phi, warm.as_ref())?);
        }
        Ok(out)
    }

    /// `Γ̄_k(a·e)` for each amplitude `a` along the direction `e`.
    pub fn gamma_bar_along(&self, k: f64, direction: &Field, amplitudes: &[f64]) -> Result<Vec<f64>, FunctionalError> {
        let zero = DVector::zeros(self.modes());
        let g0 = self.gamma(k, &zero)?;
        let fields: Vec<Field> = amplitudes.iter().map(|a| direction * *a).collect();
        Ok(self.gamma_batch(k, &fields)?.into_iter().map(|p| p.gamma - g0).collect())
    }

    /// `DΓ_k(φ) = J(φ) − F_kφ`.
    pub fn gamma_gradient(&self, k: f64, phi: &Field) -> Result<Field, FunctionalError> {
        let f = self.regulator_matrix(k).f;
        let j = self.invert_mean_field(k, phi, None)?.source;
        Ok(j.0 - f.component_mul(phi))
    }

    /// `D²Γ_k(φ)` by Richardson-extrapolated central differences of
    /// [`FunctionalContext::gamma_gradient`], step `1e-4·(1+|φ|)`.
    pub fn gamma_hessian_fd(&self, k: f64, phi: &Field) -> Result<DMatrix<f64>, FunctionalError> {
        let m = self.modes();
        let h = 1e-4 * (1.0 + phi.norm());
        let f = self.regulator_matrix(k).f;
        let centre = self.invert_mean_field(k, phi, None)?.source;
        let grad = |x: &Field| -> Result<Field, FunctionalError> {
            let j = self.invert_mean_field(k, x, Some(&centre))?.source;
            Ok(j.0 - f.component_mul(x))
        };
        let mut hess = DMatrix::zeros(m, m);
        for a in 0..m {
            let mut e = DVector::zeros(m);
            e[a] = 1.0;
            let diff = |step: f64| -> Result<Field, FunctionalError> {
                Ok((grad(&(phi + &e * step))? - grad(&(phi - &e * step))?) / (2.0 * step))
            };
            let coarse = diff(h)?;
            let fine = diff(0.5 * h)?;
            hess.set_column(a, &((4.0 * fine - coarse) / 3.0));
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }

    /// `∂_k ln N_k = −½ Σ_j ∂_k f_j E[ψ_j²]` at zero source.
    pub fn dk_log_normalization(&self, k: f64) -> Result<f64, FunctionalError> {
        let reg = self.regulator_matrix(k);
        if reg.fdot.iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        let r = self.log_mass_zero(&reg.f, Moments::UpToSecond)?;
        Ok(-0.5
            * reg
                .fdot
                .iter()
                .enumerate()
                .map(|(j, d)| d * (r.covariance[(j, j)] + r.mean[j] * r.mean[j]))
                .sum::<f64>())
    }

    /// `X_{k,φ}(T) = N_k⁻¹ E_ν[exp(T(ψ) − S_int(ψ+φ) − ½F_k(ψ,ψ))]`.
    pub fn x_functional(&self, k: f64, phi: &Field, t: &DualVector) -> Result<f64, FunctionalError> {
        Ok(self.log_x_functional(k, phi, t)?.exp())
    }

    pub fn log_x_functional(&self, k: f64, phi: &Field, t: &DualVector) -> Result<f64, FunctionalError> {
        let f = self.regulator_matrix(k).f;
        let base = self.log_mass_zero(&f, Moments::MassOnly)?.log_mass;
        let r = self.integrate(&f, t.as_vector(), Some(phi), None, Moments::MassOnly, None)?;
        Ok(r.log_mass - base)
    }

    /// `E_ν[g e^{−½F_k}] / E_ν[e^{−½F_k}]`, i.e. the expectation of `g`
    /// under the Gaussian with precision `C_ν⁻¹ + F_k`.
    pub fn dirac_ratio<G>(&self, g: G, k: f64) -> Result<f64, FunctionalError>
    where
        G: Fn(&Field) -> f64,
    {
        let f = self.regulator_matrix(k).f;
        let precision = self.model.precision() + DMatrix::from_diagonal(&f);
        let cov = precision.try_inverse().ok_or(MeasureError::NotSpd)?;
        let cov = (&cov + cov.transpose()) * 0.5;
        let measure = GaussianMeasure::new(cov)?;
        let budget = ExpectationBudget { tolerance: self.budget.tolerance, ..ExpectationBudget::default() };
        Ok(measure.expectation(g, Method::Quadrature, &budget)?.value)
    }
}
