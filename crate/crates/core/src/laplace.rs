//! Mode-centred Gauss–Hermite integration of `∫ exp ℓ(x) dx`.
//!
//! The tensor rule is mapped through the Gaussian that matches `ℓ` to second
//! order at its mode, so the nodes follow the tilted density wherever the
//! source pushes it. All sums are carried in log space.

use nalgebra::{DMatrix, DVector};

use crate::quadrature::{for_each_tensor_node, GaussHermite, MAX_LEVEL};

/// A log-density (up to an additive constant) on `R^dim`.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    /// Gradient and Hessian of [`LogDensity::value`].
    fn derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("integration error estimate {achieved:.3e} exceeds {requested:.3e} at {level} nodes per axis")]
    BudgetExceeded { requested: f64, achieved: f64, level: usize },
    #[error("non-finite integrand near x = {at:?}")]
    NonFinite { at: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Levels {
    pub start: usize,
    pub max: usize,
}

impl Levels {
    /// Defaults that resolve the quartic fixtures to ~1e-12.
    pub fn for_dim(dim: usize) -> Self {
        match dim {
            0 | 1 => Self { start: 96, max: MAX_LEVEL },
            2 => Self { start: 32, max: 128 },
            3 => Self { start: 16, max: 40 },
            _ => Self { start: 12, max: 20 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moments {
    MassOnly,
    UpToSecond,
    UpToFourth,
}

#[derive(Debug, Clone)]
pub struct TiltedIntegral {
    pub log_mass: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Fourth cumulant, dense in `dim⁴` row-major order.
    pub fourth_cumulant: Option<Vec<f64>>,
    pub mode: DVector<f64>,
    pub error: f64,
    pub level: usize,
}

/// Damped Newton ascent to the mode of `ℓ`; returns the mode and a positive
/// definite curvature matrix there.
pub fn find_mode(density: &dyn LogDensity, start: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), IntegrationError> {
    let mut x = start.clone();
    let mut fx = density.value(&x);
    if !fx.is_finite() {
        return Err(IntegrationError::NonFinite { at: x.iter().copied().collect() });
    }
    for _ in 0..200 {
        let (g, h) = density.derivatives(&x);
        let curvature = positive_curvature(-h);
        let step = curvature.clone().cholesky().expect("curvature made positive definite").solve(&g);
        let decrement = g.dot(&step);
        if decrement <= 1e-24 * (1.0 + fx.abs()) {
            return Ok((x, curvature));
        }
        let mut alpha = 1.0;
        loop {
            let trial = &x + alpha * &step;
            let ft = density.value(&trial);
            if ft.is_finite() && ft >= fx + 1e-4 * alpha * decrement {
                x = trial;
                fx = ft;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                let (_, h) = density.derivatives(&x);
                return Ok((x, positive_curvature(-h)));
            }
        }
    }
    let (_, h) = density.derivatives(&x);
    Ok((x, positive_curvature(-h)))
}

fn positive_curvature(h: DMatrix<f64>) -> DMatrix<f64> {
    let h = (&h + h.transpose()) * 0.5;
    if h.clone().cholesky().is_some() {
        return h;
    }
    let eig = h.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let floor = 1e-6 * scale;
    let lambda = eig.eigenvalues.map(|v| v.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&lambda) * eig.eigenvectors.transpose()
}

struct Centre {
    mode: DVector<f64>,
    value: f64,
    /// `A` with `A Aᵀ = H⁻¹`.
    map: DMatrix<f64>,
    log_det_map: f64,
}

fn centre(density: &dyn LogDensity, mode: DVector<f64>, curvature: &DMatrix<f64>) -> Centre {
    let chol = curvature.clone().cholesky().expect("positive definite curvature");
    let l = chol.l();
    let map = l
        .clone()
        .transpose()
        .try_inverse()
        .expect("triangular factor with positive diagonal is invertible");
    let log_det_map = -l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let value = density.value(&mode);
    Centre { mode, value, map, log_det_map }
}

fn integrate_at(density: &dyn LogDensity, c: &Centre, level: usize, moments: Moments) -> Result<TiltedIntegral, IntegrationError> {
    let dim = density.dim();
    let rule = GaussHermite::cached(level);
    let mut exps = Vec::new();
    let mut weights = Vec::new();
    let mut offsets: Vec<DVector<f64>> = Vec::new();
    let mut z_vec = DVector::zeros(dim);
    let mut failure = None;
    for_each_tensor_node(&rule, dim, |z, w| {
        if w == 0.0 || failure.is_some() {
            return;
        }
        z_vec.copy_from_slice(z);
        let delta = &c.map * &z_vec;
        let x = &c.mode + &delta;
        let lx = density.value(&x);
        let e = lx - c.value + 0.5 * z_vec.norm_squared();
        if e.is_nan() || e == f64::INFINITY {
            failure = Some(x.iter().copied().collect());
            return;
        }
        exps.push(e);
        weights.push(w);
        if moments != Moments::MassOnly {
            offsets.push(delta);
        }
    });
    if let Some(at) = failure {
        return Err(IntegrationError::NonFinite { at });
    }
    let shift = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = exps.iter().zip(&weights).map(|(e, w)| w * (e - shift).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let log_mass = c.value + 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() + c.log_det_map + shift + total.ln();

    let mut mean = c.mode.clone();
    let mut covariance = DMatrix::zeros(dim, dim);
    let mut fourth = None;
    if moments != Moments::MassOnly {
        let mut first = DVector::zeros(dim);
        for (s, d) in scaled.iter().zip(&offsets) {
            first.axpy(s / total, d, 1.0);
        }
        let centred: Vec<DVector<f64>> = offsets.iter().map(|d| d - &first).collect();
        for (s, y) in scaled.iter().zip(&centred) {
            covariance.ger(s / total, y, y, 1.0);
        }
        covariance = (&covariance + covariance.transpose()) * 0.5;
        mean += first;
        if moments == Moments::UpToFourth {
            let n4 = dim * dim * dim * dim;
            let mut raw = vec![0.0; n4];
            for (s, y) in scaled.iter().zip(&centred) {
                let w = s / total;
                let mut idx = 0;
                for a in 0..dim {
                    for b in 0..dim {
                        let wab = w * y[a] * y[b];
                        for cc in 0..dim {
                            let wabc = wab * y[cc];
                            for d in 0..dim {
                                raw[idx] += wabc * y[d];
                                idx += 1;
                            }
                        }
                    }
                }
            }
            let mut idx = 0;
            for a in 0..dim {
                for b in 0..dim {
                    for cc in 0..dim {
                        for d in 0..dim {
                            raw[idx] -= covariance[(a, b)] * covariance[(cc, d)]
                                + covariance[(a, cc)] * covariance[(b, d)]
                                + covariance[(a, d)] * covariance[(b, cc)];
                            idx += 1;
                        }
                    }
                }
            }
            fourth = Some(raw);
        }
    }
    Ok(TiltedIntegral {
        log_mass,
        mean,
        covariance,
        fourth_cumulant: fourth,
        mode: c.mode.clone(),
        error: 0.0,
        level,
    })
}

fn discrepancy(a: &TiltedIntegral, b: &TiltedIntegral) -> f64 {
    let mut d = (a.log_mass - b.log_mass).abs();
    d = d.max((&a.mean - &b.mean).amax());
    d = d.max((&a.covariance - &b.covariance).amax());
    if let (Some(x), Some(y)) = (&a.fourth_cumulant, &b.fourth_cumulant) {
        d = x.iter().zip(y).fold(d, |m, (p, q)| m.max((p - q).abs()));
    }
    d
}

/// Integrates `exp ℓ` with level escalation until the coarse/fine discrepancy
/// is within `tolerance`.
pub fn integrate(
    density: &dyn LogDensity,
    start: &DVector<f64>,
    levels: Levels,
    tolerance: f64,
    moments: Moments,
) -> Result<TiltedIntegral, IntegrationError> {
    let (mode, curvature) = find_mode(density, start)?;
    let c = centre(density, mode, &curvature);
    let max = levels.max.min(MAX_LEVEL);
    let mut level = levels.start.min(max);
    let mut coarse = integrate_at(density, &c, (2 * level / 3).max(2), moments)?;
    loop {
        let mut fine = integrate_at(density, &c, level, moments)?;
        let error = discrepancy(&fine, &coarse);
        fine.error = error;
        if error <= tolerance {
            return Ok(fine);
        }
        if level >= max {
            return Err(IntegrationError::BudgetExceeded { requested: tolerance, achieved: error, level });
        }
        coarse = fine;
        level = (level * 3 / 2).min(max);
    }
}
