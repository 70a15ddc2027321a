//! Regulator families `k ↦ R_k(p)` and their admissibility checks.
//!
//! The regulator acts diagonally on mode coordinates:
//! `F_k(φ, φ) = Σ_j R_k(p_j) w̃_j φ_j²`, and `F_k ≡ 0` for `k < 0`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum RegulatorError {
    #[error("regulator condition `{condition}` violated at k = {k}, p = {p}")]
    ConditionViolated { condition: Condition, k: f64, p: f64 },
    #[error("bad regulator table: {0}")]
    Table(String),
    #[error("unknown regulator `{0}` (expected litim, exponential or table:<path>)")]
    Unknown(String),
    #[error("cannot read regulator table: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse regulator table: {0}")]
    Csv(#[from] csv::Error),
}

/// `(k² − p²) θ(k² − p²)` for `k ≥ 0`, zero for `k < 0`.
pub fn litim(k: f64, p: f64) -> f64 {
    if k < 0.0 {
        return 0.0;
    }
    (k * k - p * p).max(0.0)
}

/// `p² / (exp(p²/k²) − 1)` for `k > 0` with value `k²` at `p = 0`; zero for `k ≤ 0`.
pub fn exponential(k: f64, p: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let x = (p * p) / (k * k);
    if x == 0.0 {
        return k * k;
    }
    k * k * x / x.exp_m1()
}

fn litim_dk(k: f64, p: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let gap = k * k - p * p;
    if gap > 0.0 {
        2.0 * k
    } else if gap == 0.0 {
        // symmetric difference quotient across the kink
        k
    } else {
        0.0
    }
}

fn exponential_dk(k: f64, p: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let x = (p * p) / (k * k);
    if x == 0.0 {
        return 2.0 * k;
    }
    // 2k · x² eˣ / (eˣ − 1)², written with e^{-x} to stay finite for large x
    let em = (-x).exp();
    let denom = -(-x).exp_m1();
    2.0 * k * x * x * em / (denom * denom)
}

/// Rectangular `(k, |p|)` table with bilinear interpolation, clamped at the
/// table edges. Queries with `k < 0` return zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRegulator {
    ks: Vec<f64>,
    ps: Vec<f64>,
    /// Row-major in `(k, p)`.
    values: Vec<f64>,
    derivatives: Vec<f64>,
}

impl TableRegulator {
    /// Builds the table from `(k, p, R, dR)` rows, which must cover a full
    /// rectangular grid in any order.
    pub fn from_rows(rows: &[(f64, f64, f64, f64)]) -> Result<Self, RegulatorError> {
        if rows.is_empty() {
            return Err(RegulatorError::Table("no rows".into()));
        }
        let mut ks: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut ps: Vec<f64> = rows.iter().map(|r| r.1.abs()).collect();
        for v in ks.iter().chain(&ps) {
            if !v.is_finite() {
                return Err(RegulatorError::Table("non-finite grid coordinate".into()));
            }
        }
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        ps.sort_by(f64::total_cmp);
        ps.dedup();
        let np = ps.len();
        let mut values = vec![f64::NAN; ks.len() * np];
        let mut derivatives = vec![f64::NAN; ks.len() * np];
        for &(k, p, r, dr) in rows {
            let i = ks.binary_search_by(|v| v.total_cmp(&k)).expect("present");
            let j = ps.binary_search_by(|v| v.total_cmp(&p.abs())).expect("present");
            values[i * np + j] = r;
            derivatives[i * np + j] = dr;
        }
        if values.iter().chain(&derivatives).any(|v| v.is_nan()) {
            return Err(RegulatorError::Table(format!(
                "rows do not cover the full {}×{} (k, p) grid",
                ks.len(),
                np
            )));
        }
        Ok(Self { ks, ps, values, derivatives })
    }

    /// Reads CSV with header columns `k, p, R, dR`.
    pub fn from_csv_path(path: &Path) -> Result<Self, RegulatorError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| RegulatorError::Table(format!("missing column `{name}`")))
        };
        let (ik, ip, ir, id) = (column("k")?, column("p")?, column("R")?, column("dR")?);
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let get = |i: usize| -> Result<f64, RegulatorError> {
                record
                    .get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| RegulatorError::Table(format!("unparsable value in row {:?}", record)))
            };
            rows.push((get(ik)?, get(ip)?, get(ir)?, get(id)?));
        }
        Self::from_rows(&rows)
    }

    /// Samples an analytic regulator onto a table.
    pub fn sample(regulator: &Regulator, ks: &[f64], ps: &[f64]) -> Result<Self, RegulatorError> {
        let rows: Vec<_> = ks
            .iter()
            .flat_map(|&k| ps.iter().map(move |&p| (k, p)))
            .map(|(k, p)| (k, p, regulator.value(k, p), regulator.dk(k, p)))
            .collect();
        Self::from_rows(&rows)
    }

    /// Overwrites the stored value at the grid node nearest to `(k, p)`.
    pub fn set_value(&mut self, k: f64, p: f64, value: f64) {
        let i = nearest(&self.ks, k);
        let j = nearest(&self.ps, p.abs());
        self.values[i * self.ps.len() + j] = value;
    }

    pub fn k_nodes(&self) -> &[f64] {
        &self.ks
    }

    fn interpolate(&self, data: &[f64], k: f64, p: f64) -> f64 {
        if k < 0.0 {
            return 0.0;
        }
        let (i0, i1, tk) = bracket(&self.ks, k);
        let (j0, j1, tp) = bracket(&self.ps, p.abs());
        let np = self.ps.len();
        let at = |i: usize, j: usize| data[i * np + j];
        let lo = at(i0, j0) * (1.0 - tp) + at(i0, j1) * tp;
        let hi = at(i1, j0) * (1.0 - tp) + at(i1, j1) * tp;
        lo * (1.0 - tk) + hi * tk
    }
}

fn nearest(grid: &[f64], x: f64) -> usize {
    let (i0, i1, t) = bracket(grid, x);
    if t < 0.5 {
        i0
    } else {
        i1
    }
}

fn bracket(grid: &[f64], x: f64) -> (usize, usize, f64) {
    let n = grid.len();
    if n == 1 || x <= grid[0] {
        return (0, 0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let i1 = grid.partition_point(|&g| g <= x);
    let i0 = i1 - 1;
    (i0, i1, (x - grid[i0]) / (grid[i1] - grid[i0]))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegulatorKind {
    Litim,
    Exponential,
    Table(Arc<TableRegulator>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regulator {
    kind: RegulatorKind,
}

impl Regulator {
    pub fn litim() -> Self {
        Self { kind: RegulatorKind::Litim }
    }

    pub fn exponential() -> Self {
        Self { kind: RegulatorKind::Exponential }
    }

    pub fn table(table: TableRegulator) -> Self {
        Self { kind: RegulatorKind::Table(Arc::new(table)) }
    }

    pub fn kind(&self) -> &RegulatorKind {
        &self.kind
    }

    /// `R_k(p)`.
    pub fn value(&self, k: f64, p: f64) -> f64 {
        match &self.kind {
            RegulatorKind::Litim => litim(k, p),
            RegulatorKind::Exponential => exponential(k, p),
            RegulatorKind::Table(t) => t.interpolate(&t.values, k, p),
        }
    }

    /// `∂_k R_k(p)`.
    pub fn dk(&self, k: f64, p: f64) -> f64 {
        match &self.kind {
            RegulatorKind::Litim => litim_dk(k, p),
            RegulatorKind::Exponential => exponential_dk(k, p),
            RegulatorKind::Table(t) => t.interpolate(&t.derivatives, k, p),
        }
    }

    /// Scales in `k > 0` where `∂_k R_k(p)` may jump for one of `momenta`.
    /// Step controllers land on these instead of stepping across them.
    pub fn kinks(&self, momenta: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = match &self.kind {
            RegulatorKind::Litim => momenta.iter().map(|p| p.abs()).filter(|&k| k > 0.0).collect(),
            RegulatorKind::Exponential => Vec::new(),
            RegulatorKind::Table(t) => t.ks.iter().copied().filter(|&k| k > 0.0).collect(),
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Diagonal mode-basis matrices of `F_k` and `∂_k F_k`.
    pub fn matrix(&self, k: f64, momenta: &[f64], weights: &[f64]) -> RegulatorMatrix {
        let n = momenta.len();
        RegulatorMatrix {
            f: DVector::from_iterator(n, momenta.iter().zip(weights).map(|(&p, &w)| self.value(k, p) * w)),
            fdot: DVector::from_iterator(n, momenta.iter().zip(weights).map(|(&p, &w)| self.dk(k, p) * w)),
        }
    }

    pub fn check_conditions(&self, plan: &SamplePlan) -> ConditionReport {
        check_conditions(self, plan)
    }
}

impl fmt::Display for Regulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RegulatorKind::Litim => write!(f, "litim"),
            RegulatorKind::Exponential => write!(f, "exponential"),
            RegulatorKind::Table(_) => write!(f, "table"),
        }
    }
}

impl FromStr for Regulator {
    type Err = RegulatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "litim" => Ok(Self::litim()),
            "exponential" => Ok(Self::exponential()),
            _ => match s.strip_prefix("table:") {
                Some(path) => Ok(Self::table(TableRegulator::from_csv_path(Path::new(path))?)),
                None => Err(RegulatorError::Unknown(s.to_string())),
            },
        }
    }
}

/// Diagonal entries `F_k,j = R_k(p_j) w̃_j` and `Ḟ_k,j = ∂_k R_k(p_j) w̃_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorMatrix {
    pub f: DVector<f64>,
    pub fdot: DVector<f64>,
}

impl RegulatorMatrix {
    /// `F_k(φ, φ)`.
    pub fn form(&self, phi: &DVector<f64>) -> f64 {
        phi.iter().zip(self.f.iter()).map(|(x, f)| f * x * x).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.f.iter().all(|&v| v == 0.0) && self.fdot.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `0 ≤ R_k(p) ≤ k²` for `k ≥ 0`.
    Bound,
    /// `R_k(p)/k² → c(p) > 0` as `k → ∞`.
    Divergence,
    /// `∂_k R_k(p) ≥ 0`.
    Monotone,
    /// `R_k = ∂_k R_k = 0` for `k < 0`.
    NegativeScale,
    /// `∂_k R_k` agrees with a central difference quotient.
    DerivativeConsistency,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Condition::Bound => "bound",
            Condition::Divergence => "divergence",
            Condition::Monotone => "monotone",
            Condition::NegativeScale => "negative-scale",
            Condition::DerivativeConsistency => "derivative-consistency",
        };
        f.write_str(name)
    }
}

/// Where and how densely to probe a regulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePlan {
    pub k_max: f64,
    pub p_max: f64,
    pub samples: usize,
    pub seed: u64,
    /// The asymptotic fit covers `k ∈ [s·K, 10·s·K]` with `K = max(k_max, p_max)`.
    pub asymptotic_scale: f64,
    pub asymptotic_points: usize,
    /// Smallest acceptable asymptotic ratio `c(p)`.
    pub min_asymptotic_ratio: f64,
    /// Relative step of the central difference, scaled by `max(1, k)`.
    pub fd_step: f64,
    pub fd_rel_tol: f64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            k_max: 10.0,
            p_max: 10.0,
            samples: 10_000,
            seed: 0x5eed,
            asymptotic_scale: 10.0,
            asymptotic_points: 16,
            min_asymptotic_ratio: 1e-3,
            fd_step: 1e-6,
            fd_rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCheck {
    pub condition: Condition,
    pub passed: bool,
    pub evaluated: usize,
    /// Worst violation margin seen (positive means violated).
    pub worst: f64,
    pub witness: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub regulator: String,
    pub checks: Vec<ConditionCheck>,
    /// Smallest fitted asymptotic ratio `c(p)` over the sampled momenta.
    pub min_asymptotic_ratio: f64,
}

impl ConditionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, condition: Condition) -> &ConditionCheck {
        self.checks.iter().find(|c| c.condition == condition).expect("every condition is checked")
    }

    /// First failing condition as an error carrying its witness.
    pub fn ensure_all_passed(&self) -> Result<(), RegulatorError> {
        match self.checks.iter().find(|c| !c.passed) {
            None => Ok(()),
            Some(c) => {
                let (k, p) = c.witness.unwrap_or((f64::NAN, f64::NAN));
                Err(RegulatorError::ConditionViolated { condition: c.condition, k, p })
            }
        }
    }
}

struct Tracker {
    condition: Condition,
    evaluated: usize,
    worst: f64,
    witness: Option<(f64, f64)>,
}

impl Tracker {
    fn new(condition: Condition) -> Self {
        Self { condition, evaluated: 0, worst: f64::NEG_INFINITY, witness: None }
    }

    /// Records a margin; positive margins are violations.
    fn record(&mut self, margin: f64, k: f64, p: f64) {
        self.evaluated += 1;
        let margin = if margin.is_nan() { f64::INFINITY } else { margin };
        if margin > self.worst {
            self.worst = margin;
            if margin > 0.0 {
                self.witness = Some((k, p));
            }
        }
    }

    fn finish(self) -> ConditionCheck {
        ConditionCheck {
            condition: self.condition,
            passed: self.worst <= 0.0,
            evaluated: self.evaluated,
            worst: self.worst,
            witness: self.witness,
        }
    }
}

fn check_conditions(regulator: &Regulator, plan: &SamplePlan) -> ConditionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let points: Vec<(f64, f64)> = (0..plan.samples)
        .map(|_| {
            // (0, max] rather than [0, max)
            let k = plan.k_max * (1.0 - rng.random::<f64>());
            let p = plan.p_max * (1.0 - rng.random::<f64>());
            (k, p)
        })
        .collect();
    let is_table = matches!(regulator.kind, RegulatorKind::Table(_));

    let mut bound = Tracker::new(Condition::Bound);
    let mut monotone = Tracker::new(Condition::Monotone);
    let mut negative = Tracker::new(Condition::NegativeScale);
    let mut derivative = Tracker::new(Condition::DerivativeConsistency);
    let mut divergence = Tracker::new(Condition::Divergence);

    for &(k, p) in &points {
        let r = regulator.value(k, p);
        let k2 = k * k;
        let slack = 1e-12 * k2;
        bound.record((-r - slack).max(r - k2 - slack), k, p);

        let dr = regulator.dk(k, p);
        monotone.record(-dr - 1e-14 * k, k, p);

        let kn = -k;
        negative.record(regulator.value(kn, p).abs().max(regulator.dk(kn, p).abs()), kn, p);

        let h = plan.fd_step * k.max(1.0);
        let near_kink = regulator.kinks(&[p]).iter().any(|&kk| (kk - k).abs() <= 2.0 * h) || k <= 2.0 * h;
        if !near_kink {
            let fd = (regulator.value(k + h, p) - regulator.value(k - h, p)) / (2.0 * h);
            let tol = if is_table {
                // bilinear tables are only first-order consistent with their dR column
                5e-2 * dr.abs() + 1e-3 * k
            } else {
                plan.fd_rel_tol * dr.abs() + 1e-8 * k
            };
            derivative.record((fd - dr).abs() - tol, k, p);
        }
    }

    // asymptotic ratio R_k(p)/k² over one decade, fitted as c + a/k²
    let base = plan.asymptotic_scale * plan.k_max.max(plan.p_max);
    let n = plan.asymptotic_points.max(2);
    let mut min_ratio = f64::INFINITY;
    for &(_, p) in &points {
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let k = base * 10f64.powf(i as f64 / (n - 1) as f64);
            let x = 1.0 / (k * k);
            let y = regulator.value(k, p) / (k * k);
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        let nf = n as f64;
        let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
        let c = (sy - slope * sx) / nf;
        min_ratio = min_ratio.min(c);
        divergence.record(plan.min_asymptotic_ratio - c, 10.0 * base, p);
    }

    ConditionReport {
        regulator: regulator.to_string(),
        checks: vec![bound.finish(), divergence.finish(), monotone.finish(), negative.finish(), derivative.finish()],
        min_asymptotic_ratio: min_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn litim_examples() {
        assert_eq!(litim(2.0, 1.0), 3.0);
        assert_eq!(litim(1.0, 2.0), 0.0);
        assert_eq!(litim(-1.0, 0.3), 0.0);
        let r = Regulator::litim();
        assert_eq!(r.dk(2.0, 1.0), 4.0);
        assert_eq!(r.dk(1.0, 2.0), 0.0);
        assert_eq!(r.dk(1.0, 1.0), 1.0);
    }

    #[test]
    fn exponential_examples() {
        assert_eq!(exponential(1.0, 0.0), 1.0);
        assert!((exponential(1.0, 1e-9) - 1.0).abs() < 1e-12);
        assert!((exponential(1.0, 1.0) - 1.0 / (std::f64::consts::E - 1.0)).abs() < 1e-15);
        assert!((exponential(1.0, 1.0) - 0.581_976_7).abs() < 1e-7);
        assert!(exponential(1e-3, 1.0) == 0.0);
        assert_eq!(exponential(0.0, 1.0), 0.0);
        assert_eq!(exponential(-2.0, 0.0), 0.0);
    }

    #[test]
    fn exponential_derivative_matches_central_difference() {
        let r = Regulator::exponential();
        let h = 1e-6;
        for &(k, p) in &[(1.0, 1.0), (0.5, 0.2), (3.0, 7.0), (2.0, 0.0)] {
            let fd = (exponential(k + h, p) - exponential(k - h, p)) / (2.0 * h);
            let dk = r.dk(k, p);
            assert!(((fd - dk) / dk).abs() < 1e-6, "k={k} p={p}: {fd} vs {dk}");
        }
        assert!(r.dk(0.01, 5.0).is_finite());
    }

    #[test]
    fn builtins_pass_all_conditions() {
        for reg in [Regulator::litim(), Regulator::exponential()] {
            let report = reg.check_conditions(&SamplePlan::default());
            assert!(report.all_passed(), "{reg}: {report:?}");
            assert!((report.min_asymptotic_ratio - 1.0).abs() < 1e-3);
            assert!(report.ensure_all_passed().is_ok());
        }
    }

    #[test]
    fn table_with_negative_dip_fails_bound() {
        let ks: Vec<f64> = (0..=40).map(|i| i as f64 * 0.25).collect();
        let ps: Vec<f64> = (0..=40).map(|i| i as f64 * 0.25).collect();
        let mut table = TableRegulator::sample(&Regulator::litim(), &ks, &ps).unwrap();
        table.set_value(5.0, 1.0, -100.0);
        let reg = Regulator::table(table);
        let report = reg.check_conditions(&SamplePlan::default());
        let bound = report.check(Condition::Bound);
        assert!(!bound.passed);
        let (k, p) = bound.witness.unwrap();
        assert!((k - 5.0).abs() < 0.25 && (p - 1.0).abs() < 0.25, "witness ({k}, {p})");
        match report.ensure_all_passed() {
            Err(RegulatorError::ConditionViolated { condition, .. }) => assert_eq!(condition, Condition::Bound),
            other => panic!("expected a violation, got {other:?}"),
        }
    }

    #[test]
    fn table_interpolation_reproduces_grid_values() {
        let ks = [0.0, 1.0, 2.0];
        let ps = [0.0, 1.0];
        let table = TableRegulator::sample(&Regulator::litim(), &ks, &ps).unwrap();
        let reg = Regulator::table(table);
        assert_eq!(reg.value(2.0, 1.0), 3.0);
        assert_eq!(reg.value(1.5, 0.0), 0.5 * (1.0 + 4.0));
        assert_eq!(reg.value(-1.0, 0.0), 0.0);
        assert!(TableRegulator::from_rows(&[(0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("litim".parse::<Regulator>().unwrap(), Regulator::litim());
        assert_eq!("exponential".parse::<Regulator>().unwrap(), Regulator::exponential());
        assert!(matches!("optimised".parse::<Regulator>(), Err(RegulatorError::Unknown(_))));
    }

    #[test]
    fn matrix_is_diagonal_and_nonnegative() {
        let reg = Regulator::litim();
        let m = reg.matrix(1.5, &[-2.0, -1.0, 0.0, 1.0, 2.0], &[1.0; 5]);
        assert_eq!(m.f.as_slice(), &[0.0, 1.25, 2.25, 1.25, 0.0]);
        assert_eq!(m.fdot.as_slice(), &[0.0, 3.0, 3.0, 3.0, 0.0]);
        assert_eq!(reg.kinks(&[-2.0, -1.0, 0.0, 1.0, 2.0]), vec![1.0, 2.0]);
        assert!(reg.matrix(-1.0, &[0.0], &[1.0]).is_zero());
    }
}
