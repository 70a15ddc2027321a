//! Finite-mode truncations of a regularised scalar theory.
//!
//! A [`ModelSpec`] describes the theory declaratively (it is what the JSON
//! config holds); [`Model`] is the built, immutable object carrying the mode
//! basis, the free operator, the window operator and the resulting covariance
//! of the regularised Gaussian measure.
//!
//! Fields are stored as coordinates in a real orthonormal mode basis. In one
//! dimension the box has length `L = 2π/Δp` and the basis is
//! `{1/√L, √(2/L) cos(|p|x), √(2/L) sin(|p|x)}`, where coordinate `j` carries
//! momentum `p_j` (positive momenta label cosines, negative ones sines). The
//! `M` position nodes `x_i` with trapezoid weight `h = L/M` make this basis
//! exactly orthonormal under the discrete inner product, so the change of basis
//! is the real form of the unitary discrete Fourier map.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("malformed model config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("window operator is ill-conditioned: condition number {condition:.3e} exceeds {bound:.3e}")]
    SingularWindow { condition: f64, bound: f64 },
    #[error("covariance of the regularised measure is not symmetric positive definite")]
    NotSpd,
    #[error("exp(-S_int) is not integrable against the regularised measure: {0}")]
    NotIntegrable(String),
}

/// Polynomial interaction `Σ_i w_i [c2 ψ(x_i)² + c3 ψ(x_i)³ + c4 ψ(x_i)⁴]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    #[serde(default)]
    pub c2: f64,
    #[serde(default)]
    pub c3: f64,
    #[serde(default)]
    pub c4: f64,
}

impl Interaction {
    pub fn quartic(c4: f64) -> Self {
        Self { c2: 0.0, c3: 0.0, c4 }
    }

    pub fn is_free(&self) -> bool {
        self.c2 == 0.0 && self.c3 == 0.0 && self.c4 == 0.0
    }

    pub fn is_even(&self) -> bool {
        self.c3 == 0.0
    }

    /// Pointwise density `c2 u² + c3 u³ + c4 u⁴`.
    pub fn density(&self, u: f64) -> f64 {
        let u2 = u * u;
        u2 * (self.c2 + u * (self.c3 + u * self.c4))
    }

    pub fn density_d1(&self, u: f64) -> f64 {
        u * (2.0 * self.c2 + u * (3.0 * self.c3 + 4.0 * self.c4 * u))
    }

    pub fn density_d2(&self, u: f64) -> f64 {
        2.0 * self.c2 + u * (6.0 * self.c3 + 12.0 * self.c4 * u)
    }
}

/// Window parameters of the regularisation operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    Identity,
    /// Position window of radius `n·K` and momentum cutoff `n·Λ`.
    Gaussian { k: f64, lambda: f64, n: f64 },
    /// Single-mode shortcut: the whole window collapses to a factor `r ∈ (0, 1]`.
    Scalar { r: f64 },
}

impl Window {
    fn from_value(value: &Value) -> Result<Self, String> {
        match value {
            Value::String(s) if s == "identity" => Ok(Window::Identity),
            Value::String(s) => Err(format!("unknown window `{s}` (expected \"identity\")")),
            Value::Object(map) => {
                if map.contains_key("r") {
                    check_keys(map, &["r"], "window")?;
                    Ok(Window::Scalar { r: number(map, "r", "window")? })
                } else {
                    check_keys(map, &["K", "Lambda", "n"], "window")?;
                    Ok(Window::Gaussian {
                        k: number(map, "K", "window")?,
                        lambda: number(map, "Lambda", "window")?,
                        n: number(map, "n", "window")?,
                    })
                }
            }
            other => Err(format!("window must be \"identity\" or an object, got {other}")),
        }
    }

    fn to_value(self) -> Value {
        match self {
            Window::Identity => Value::String("identity".into()),
            Window::Gaussian { k, lambda, n } => serde_json::json!({"K": k, "Lambda": lambda, "n": n}),
            Window::Scalar { r } => serde_json::json!({ "r": r }),
        }
    }
}

fn check_keys(map: &Map<String, Value>, allowed: &[&str], context: &str) -> Result<(), String> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(format!("unknown field `{key}` in {context}, expected one of {allowed:?}"));
        }
    }
    Ok(())
}

fn number(map: &Map<String, Value>, key: &str, context: &str) -> Result<f64, String> {
    map.get(key)
        .ok_or_else(|| format!("missing field `{key}` in {context}"))?
        .as_f64()
        .ok_or_else(|| format!("field `{key}` in {context} must be a number"))
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Window::from_value(&value).map_err(serde::de::Error::custom)
    }
}

/// Uniform field grid `[-phi_max, phi_max]` with an odd node count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldGrid {
    pub phi_max: f64,
    pub nodes: usize,
}

impl FieldGrid {
    pub fn spacing(&self) -> f64 {
        2.0 * self.phi_max / (self.nodes - 1) as f64
    }

    pub fn center(&self) -> usize {
        self.nodes / 2
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        let c = self.center() as f64;
        (0..self.nodes).map(|i| (i as f64 - c) * h).collect()
    }
}

impl Default for FieldGrid {
    fn default() -> Self {
        Self { phi_max: 3.0, nodes: 201 }
    }
}

/// Declarative description of a truncated regularised theory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dimension: u8,
    pub modes: usize,
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_spacing: Option<f64>,
    #[serde(default)]
    pub interaction: Interaction,
    pub window: Window,
    #[serde(default)]
    pub field_grid: FieldGrid,
}

impl ModelSpec {
    /// Zero-dimensional single-mode theory with a scalar window `r`.
    pub fn single_mode(mass: f64, r: f64, interaction: Interaction) -> Self {
        let window = if r == 1.0 { Window::Identity } else { Window::Scalar { r } };
        Self {
            dimension: 0,
            modes: 1,
            mass,
            momentum_spacing: None,
            interaction,
            window,
            field_grid: FieldGrid::default(),
        }
    }

    /// One-dimensional theory on `modes` momenta spaced by `spacing`.
    pub fn lattice_1d(modes: usize, mass: f64, spacing: f64, window: Window, interaction: Interaction) -> Self {
        Self {
            dimension: 1,
            modes,
            mass,
            momentum_spacing: Some(spacing),
            interaction,
            window,
            field_grid: FieldGrid::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self, ModelError> {
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("model spec serialises")
    }

    fn validate_shape(&self) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::Invalid(msg));
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return invalid(format!("mass must be positive, got {}", self.mass));
        }
        if self.modes == 0 {
            return invalid("modes must be at least 1".into());
        }
        match self.dimension {
            0 => {
                if self.modes != 1 {
                    return invalid(format!("dimension 0 has exactly one mode, got {}", self.modes));
                }
            }
            1 => {
                if self.modes.is_multiple_of(2) {
                    return invalid(format!(
                        "dimension 1 needs an odd mode count for a symmetric momentum grid, got {}",
                        self.modes
                    ));
                }
                match self.momentum_spacing {
                    Some(dp) if dp.is_finite() && dp > 0.0 => {}
                    _ => return invalid("dimension 1 requires a positive momentum_spacing".into()),
                }
            }
            d => return invalid(format!("dimension must be 0 or 1, got {d}")),
        }
        let Interaction { c2, c3, c4 } = self.interaction;
        if !(c2.is_finite() && c3.is_finite() && c4.is_finite()) {
            return invalid("interaction coefficients must be finite".into());
        }
        if c4 < 0.0 {
            return invalid(format!("c4 must be non-negative, got {c4}"));
        }
        match self.window {
            Window::Identity => {}
            Window::Gaussian { k, lambda, n } => {
                for (name, v) in [("K", k), ("Lambda", lambda), ("n", n)] {
                    if !(v.is_finite() && v > 0.0) {
                        return invalid(format!("window {name} must be positive, got {v}"));
                    }
                }
            }
            Window::Scalar { r } => {
                if self.dimension != 0 {
                    return invalid("a scalar window is only available in dimension 0".into());
                }
                if !(r > 0.0 && r <= 1.0) {
                    return invalid(format!("scalar window r must lie in (0, 1], got {r}"));
                }
            }
        }
        let grid = self.field_grid;
        if !(grid.phi_max.is_finite() && grid.phi_max > 0.0) {
            return invalid(format!("field_grid.phi_max must be positive, got {}", grid.phi_max));
        }
        if grid.nodes < 5 || grid.nodes.is_multiple_of(2) {
            return invalid(format!("field_grid.nodes must be odd and at least 5, got {}", grid.nodes));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Upper bound on the condition number of the window operator.
    pub condition_bound: f64,
    /// Acknowledges an odd (c3 ≠ 0) interaction.
    pub allow_unbounded: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { condition_bound: 1e12, allow_unbounded: false }
    }
}

/// Diagonal free operator `b_j = m² + p_j²` in the mode basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeOperator {
    pub diagonal: Vec<f64>,
    pub lower_bound: f64,
}

#[derive(Debug, Clone)]
pub struct RegularizationOperator {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub condition: f64,
}

/// Mode grid and discretisation geometry.
#[derive(Debug, Clone)]
pub struct ModeGeometry {
    pub momenta: Vec<f64>,
    pub positions: Vec<f64>,
    pub position_weights: Vec<f64>,
    /// `basis[(i, j)] = e_j(x_i)`, so that `ψ(x_i) = Σ_j basis[(i, j)] ψ_j`.
    pub basis: DMatrix<f64>,
}

pub fn mode_geometry(spec: &ModelSpec) -> ModeGeometry {
    if spec.dimension == 0 {
        return ModeGeometry {
            momenta: vec![0.0],
            positions: vec![0.0],
            position_weights: vec![1.0],
            basis: DMatrix::identity(1, 1),
        };
    }
    let m = spec.modes;
    let dp = spec.momentum_spacing.expect("validated");
    let half = (m - 1) as f64 / 2.0;
    let length = 2.0 * PI / dp;
    let h = length / m as f64;
    let momenta: Vec<f64> = (0..m).map(|j| (j as f64 - half) * dp).collect();
    let positions: Vec<f64> = (0..m).map(|i| (i as f64 - half) * h).collect();
    let basis = DMatrix::from_fn(m, m, |i, j| {
        let p = momenta[j];
        let x = positions[i];
        if p == 0.0 {
            1.0 / length.sqrt()
        } else if p > 0.0 {
            (2.0 / length).sqrt() * (p * x).cos()
        } else {
            (2.0 / length).sqrt() * (-p * x).sin()
        }
    });
    ModeGeometry { momenta, positions, position_weights: vec![h; m], basis }
}

pub fn build_free_operator(spec: &ModelSpec) -> Result<FreeOperator, ModelError> {
    spec.validate_shape()?;
    let geometry = mode_geometry(spec);
    Ok(free_operator(spec.mass, &geometry.momenta))
}

fn free_operator(mass: f64, momenta: &[f64]) -> FreeOperator {
    let diagonal: Vec<f64> = momenta.iter().map(|p| mass * mass + p * p).collect();
    let lower_bound = diagonal.iter().copied().fold(f64::INFINITY, f64::min);
    FreeOperator { diagonal, lower_bound }
}

pub fn build_regularization(spec: &ModelSpec, options: &BuildOptions) -> Result<RegularizationOperator, ModelError> {
    spec.validate_shape()?;
    regularization(spec, &mode_geometry(spec), options)
}

fn regularization(
    spec: &ModelSpec,
    geometry: &ModeGeometry,
    options: &BuildOptions,
) -> Result<RegularizationOperator, ModelError> {
    let m = spec.modes;
    let matrix = match spec.window {
        Window::Identity => DMatrix::identity(m, m),
        Window::Scalar { r } => DMatrix::from_element(1, 1, r),
        Window::Gaussian { k, lambda, n } => {
            let chi = geometry
                .positions
                .iter()
                .zip(&geometry.position_weights)
                .map(|(x, w)| w * (-x * x / (2.0 * n * n * k * k)).exp());
            let weighted = DMatrix::from_diagonal(&DVector::from_iterator(m, chi));
            let position_window = geometry.basis.transpose() * weighted * &geometry.basis;
            let momentum_window = DVector::from_iterator(
                m,
                geometry.momenta.iter().map(|p| (-p * p / (2.0 * n * n * lambda * lambda)).exp()),
            );
            position_window * DMatrix::from_diagonal(&momentum_window)
        }
    };
    let singular = matrix.clone().svd(false, false).singular_values;
    let smax = singular.max();
    let smin = singular.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= options.condition_bound) {
        return Err(ModelError::SingularWindow { condition, bound: options.condition_bound });
    }
    let inverse = matrix.clone().try_inverse().ok_or(ModelError::SingularWindow {
        condition,
        bound: options.condition_bound,
    })?;
    Ok(RegularizationOperator { matrix, inverse, condition })
}

/// `C_ν = R B⁻¹ Rᵀ`.
pub fn covariance(free: &FreeOperator, window: &RegularizationOperator) -> Result<DMatrix<f64>, ModelError> {
    let m = free.diagonal.len();
    let b_inv = DMatrix::from_diagonal(&DVector::from_iterator(m, free.diagonal.iter().map(|b| 1.0 / b)));
    let c = &window.matrix * b_inv * window.matrix.transpose();
    let c = (&c + c.transpose()) * 0.5;
    if c.clone().cholesky().is_none() {
        return Err(ModelError::NotSpd);
    }
    Ok(c)
}

/// A built, immutable finite-mode theory.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    geometry: ModeGeometry,
    free: FreeOperator,
    window: RegularizationOperator,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        Self::with_options(spec, &BuildOptions::default())
    }

    pub fn with_options(spec: ModelSpec, options: &BuildOptions) -> Result<Self, ModelError> {
        spec.validate_shape()?;
        if spec.interaction.c3 != 0.0 && !options.allow_unbounded {
            return Err(ModelError::Invalid(
                "odd interaction (c3 != 0) requires the allow-unbounded acknowledgement".into(),
            ));
        }
        let geometry = mode_geometry(&spec);
        let free = free_operator(spec.mass, &geometry.momenta);
        let window = regularization(&spec, &geometry, options)?;
        let covariance = covariance(&free, &window)?;
        let precision = covariance.clone().cholesky().ok_or(ModelError::NotSpd)?.inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        let model = Self { spec, geometry, free, window, covariance, precision };
        model.certify_integrability()?;
        Ok(model)
    }

    /// Checks that `exp(-S_int)` has finite ν-expectation. A positive quartic
    /// term settles it; without one, a cubic term never integrates and a
    /// negative quadratic term integrates iff the tilted precision stays
    /// positive definite.
    fn certify_integrability(&self) -> Result<(), ModelError> {
        let Interaction { c2, c3, c4 } = self.spec.interaction;
        if c4 > 0.0 || (c3 == 0.0 && c2 >= 0.0) {
            return Ok(());
        }
        if c3 != 0.0 {
            return Err(ModelError::NotIntegrable(
                "a cubic term without a positive quartic term is unbounded below at every scale".into(),
            ));
        }
        let hessian = self.interaction_hessian(&DVector::zeros(self.modes()));
        let tilted = &self.precision + hessian;
        let smallest = tilted.symmetric_eigen().eigenvalues.min();
        if smallest <= 0.0 {
            return Err(ModelError::NotIntegrable(format!(
                "negative c2 = {c2} overwhelms the Gaussian precision (smallest eigenvalue {smallest:.3e})"
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn modes(&self) -> usize {
        self.spec.modes
    }

    pub fn geometry(&self) -> &ModeGeometry {
        &self.geometry
    }

    pub fn momenta(&self) -> &[f64] {
        &self.geometry.momenta
    }

    /// Momentum-quadrature weights folded into the regulator matrix. The
    /// orthonormal mode coordinates already carry the measure `Δp·L/2π = 1`.
    pub fn momentum_weights(&self) -> Vec<f64> {
        vec![1.0; self.modes()]
    }

    pub fn free_operator(&self) -> &FreeOperator {
        &self.free
    }

    pub fn regularization(&self) -> &RegularizationOperator {
        &self.window
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn interaction(&self) -> Interaction {
        self.spec.interaction
    }

    pub fn field_grid(&self) -> FieldGrid {
        self.spec.field_grid
    }

    /// Field values at the position nodes.
    pub fn at_positions(&self, field: &DVector<f64>) -> DVector<f64> {
        &self.geometry.basis * field
    }

    pub fn interaction_value(&self, field: &DVector<f64>) -> f64 {
        let inter = self.spec.interaction;
        if inter.is_free() {
            return 0.0;
        }
        let u = self.at_positions(field);
        u.iter()
            .zip(&self.geometry.position_weights)
            .map(|(&ui, &w)| w * inter.density(ui))
            .sum()
    }

    pub fn interaction_gradient(&self, field: &DVector<f64>) -> DVector<f64> {
        let inter = self.spec.interaction;
        if inter.is_free() {
            return DVector::zeros(self.modes());
        }
        let u = self.at_positions(field);
        let local = DVector::from_iterator(
            u.len(),
            u.iter().zip(&self.geometry.position_weights).map(|(&ui, &w)| w * inter.density_d1(ui)),
        );
        self.geometry.basis.tr_mul(&local)
    }

    pub fn interaction_hessian(&self, field: &DVector<f64>) -> DMatrix<f64> {
        let inter = self.spec.interaction;
        let m = self.modes();
        if inter.is_free() {
            return DMatrix::zeros(m, m);
        }
        let u = self.at_positions(field);
        let basis = &self.geometry.basis;
        let mut h = DMatrix::zeros(m, m);
        for (i, &ui) in u.iter().enumerate() {
            let c = self.geometry.position_weights[i] * inter.density_d2(ui);
            if c == 0.0 {
                continue;
            }
            let row = basis.row(i);
            h += c * row.transpose() * row;
        }
        h
    }

    /// `½ φᵀ C_ν⁻¹ φ + S_int(φ) − S_int(0)`: the large-k limit of the
    /// subtracted effective average action.
    pub fn classical_asymptote(&self, field: &DVector<f64>) -> f64 {
        let zero = DVector::zeros(self.modes());
        0.5 * field.dot(&(&self.precision * field)) + self.interaction_value(field) - self.interaction_value(&zero)
    }

    /// Convenience for single-mode models.
    pub fn classical_asymptote_scalar(&self, phi: f64) -> f64 {
        self.classical_asymptote(&DVector::from_element(1, phi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn window_1d() -> ModelSpec {
        ModelSpec::lattice_1d(3, 1.0, 1.0, Window::Gaussian { k: 10.0, lambda: 1.0, n: 1.0 }, Interaction::default())
    }

    #[test]
    fn free_operator_examples() {
        let d0 = ModelSpec::single_mode(1.0, 1.0, Interaction::default());
        let free = build_free_operator(&d0).unwrap();
        assert_eq!(free.diagonal, vec![1.0]);
        assert_eq!(free.lower_bound, 1.0);

        let d1 = ModelSpec::lattice_1d(3, 1.0, 1.0, Window::Identity, Interaction::default());
        let free = build_free_operator(&d1).unwrap();
        assert_eq!(free.diagonal, vec![2.0, 1.0, 2.0]);
        assert_eq!(free.lower_bound, 1.0);

        let d1 = ModelSpec::lattice_1d(3, 0.5, 2.0, Window::Identity, Interaction::default());
        assert_eq!(build_free_operator(&d1).unwrap().diagonal, vec![4.25, 0.25, 4.25]);
    }

    #[test]
    fn basis_is_orthonormal_under_trapezoid_weights() {
        for m in [1, 3, 5, 9] {
            let spec = ModelSpec::lattice_1d(m, 1.0, 0.7, Window::Identity, Interaction::default());
            let g = mode_geometry(&spec);
            let gram = g.basis.transpose() * DMatrix::from_diagonal(&DVector::from_vec(g.position_weights.clone())) * &g.basis;
            assert!((gram - DMatrix::identity(m, m)).abs().max() < 1e-13, "M = {m}");
        }
    }

    #[test]
    fn identity_and_scalar_windows() {
        let spec = ModelSpec::lattice_1d(3, 1.0, 1.0, Window::Identity, Interaction::default());
        let r = build_regularization(&spec, &BuildOptions::default()).unwrap();
        assert_eq!(r.matrix, DMatrix::identity(3, 3));

        let spec = ModelSpec::single_mode(1.0, 0.5, Interaction::default());
        let r = build_regularization(&spec, &BuildOptions::default()).unwrap();
        assert_eq!(r.matrix[(0, 0)], 0.5);
    }

    #[test]
    fn scalar_covariances() {
        let model = Model::new(ModelSpec::single_mode(1.0, 1.0, Interaction::default())).unwrap();
        assert_eq!(model.covariance()[(0, 0)], 1.0);
        let model = Model::new(ModelSpec::single_mode(1.0, 0.5, Interaction::default())).unwrap();
        assert_relative_eq!(model.covariance()[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn window_diagonal_increases_towards_identity() {
        let mut previous = vec![0.0; 5];
        for n in [1.0, 2.0, 4.0, 8.0, 32.0] {
            let spec = ModelSpec::lattice_1d(5, 1.0, 1.0, Window::Gaussian { k: 0.5, lambda: 0.5, n }, Interaction::default());
            let r = build_regularization(&spec, &BuildOptions::default()).unwrap();
            for j in 0..5 {
                let d = r.matrix[(j, j)];
                assert!(d > previous[j] && d <= 1.0 + 1e-12);
                previous[j] = d;
            }
        }
        assert!(previous.iter().all(|d| (d - 1.0).abs() < 2e-2), "{previous:?}");
    }

    #[test]
    fn aggressive_window_is_rejected() {
        let spec = ModelSpec::lattice_1d(9, 1.0, 1.0, Window::Gaussian { k: 0.05, lambda: 0.05, n: 1.0 }, Interaction::default());
        let err = build_regularization(&spec, &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::SingularWindow { .. }));
    }

    #[test]
    fn classical_asymptote_examples() {
        let model = Model::new(ModelSpec::single_mode(1.0, 1.0, Interaction::quartic(0.1))).unwrap();
        assert_eq!(model.classical_asymptote_scalar(0.0), 0.0);
        assert_relative_eq!(model.classical_asymptote_scalar(1.0), 0.6, epsilon = 1e-15);
        let model = Model::new(ModelSpec::single_mode(1.0, 0.5, Interaction::default())).unwrap();
        assert_relative_eq!(model.classical_asymptote_scalar(1.0), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn identity_window_asymptote_uses_free_operator() {
        let spec = ModelSpec::lattice_1d(5, 0.8, 0.6, Window::Identity, Interaction { c2: 0.2, c3: 0.0, c4: 0.05 });
        let model = Model::new(spec).unwrap();
        let phi = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4]);
        let b = &model.free_operator().diagonal;
        let quad: f64 = phi.iter().zip(b).map(|(f, b)| 0.5 * b * f * f).sum();
        assert_relative_eq!(model.classical_asymptote(&phi), quad + model.interaction_value(&phi), epsilon = 1e-13);
    }

    #[test]
    fn interaction_derivatives_match_finite_differences() {
        let spec = ModelSpec::lattice_1d(3, 1.0, 1.0, window_1d().window, Interaction { c2: 0.3, c3: 0.2, c4: 0.1 });
        let model = Model::with_options(spec, &BuildOptions { allow_unbounded: true, ..Default::default() }).unwrap();
        let phi = DVector::from_vec(vec![0.4, -0.3, 0.7]);
        let g = model.interaction_gradient(&phi);
        let h = model.interaction_hessian(&phi);
        let eps = 1e-5;
        for j in 0..3 {
            let mut up = phi.clone();
            up[j] += eps;
            let mut dn = phi.clone();
            dn[j] -= eps;
            let fd = (model.interaction_value(&up) - model.interaction_value(&dn)) / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-8);
            let fd_col = (model.interaction_gradient(&up) - model.interaction_gradient(&dn)) / (2.0 * eps);
            for i in 0..3 {
                assert!((fd_col[i] - h[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn validation_errors() {
        let mut spec = ModelSpec::single_mode(1.0, 1.0, Interaction::quartic(-0.1));
        assert!(matches!(Model::new(spec.clone()), Err(ModelError::Invalid(_))));
        spec.interaction = Interaction { c2: 0.0, c3: 0.1, c4: 0.1 };
        assert!(matches!(Model::new(spec.clone()), Err(ModelError::Invalid(_))));
        let allow = BuildOptions { allow_unbounded: true, ..Default::default() };
        assert!(Model::with_options(spec.clone(), &allow).is_ok());
        spec.interaction = Interaction { c2: 0.0, c3: 0.1, c4: 0.0 };
        assert!(matches!(Model::with_options(spec.clone(), &allow), Err(ModelError::NotIntegrable(_))));
        spec.interaction = Interaction { c2: -0.4, c3: 0.0, c4: 0.0 };
        assert!(Model::new(spec.clone()).is_ok());
        spec.interaction = Interaction { c2: -0.6, c3: 0.0, c4: 0.0 };
        assert!(matches!(Model::new(spec.clone()), Err(ModelError::NotIntegrable(_))));
        spec.interaction = Interaction::default();
        spec.field_grid.nodes = 200;
        assert!(matches!(Model::new(spec), Err(ModelError::Invalid(_))));
        let even_modes = ModelSpec::lattice_1d(4, 1.0, 1.0, Window::Identity, Interaction::default());
        assert!(Model::new(even_modes).is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let text = r#"{
            "dimension": 1, "modes": 3, "mass": 1.0, "momentum_spacing": 1.0,
            "interaction": {"c2": 0.0, "c3": 0.0, "c4": 0.1},
            "window": {"K": 10.0, "Lambda": 1.0, "n": 1},
            "field_grid": {"phi_max": 3.0, "nodes": 201}
        }"#;
        let spec = ModelSpec::from_json(text).unwrap();
        assert_eq!(spec.window, Window::Gaussian { k: 10.0, lambda: 1.0, n: 1.0 });
        let again = ModelSpec::from_value(spec.to_value()).unwrap();
        assert_eq!(again, spec);

        let identity = text.replace(r#"{"K": 10.0, "Lambda": 1.0, "n": 1}"#, r#""identity""#);
        assert_eq!(ModelSpec::from_json(&identity).unwrap().window, Window::Identity);

        let bad = text.replace("\"mass\"", "\"mas\"");
        let err = ModelSpec::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("mas"), "{err}");
        let bad = text.replace("\"Lambda\"", "\"Lamda\"");
        let err = ModelSpec::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("Lamda"), "{err}");
        let bad = text.replace("\"c4\"", "\"c5\"");
        assert!(ModelSpec::from_json(&bad).unwrap_err().to_string().contains("c5"));
    }
}
