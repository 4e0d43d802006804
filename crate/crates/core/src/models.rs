//! Benchmark stochastic systems with exact drift and diffusion evaluators.
//!
//! All registered models have diagonal diffusion. Models that support the
//! second-order generator action also expose first and second derivatives of
//! the drift and of the diffusion covariance `a = σσᵀ` through
//! [`SdeCoefficients::coefficient_jet`].

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::special::{factorial, hermite};

/// Drift and diffusion of an Itô SDE `dX = b(X) dt + σ(X) dW`.
pub trait SdeCoefficients: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Row-major `dim × dim` diffusion matrix `σ(x)`.
    fn diffusion(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Row-major covariance `σσᵀ(x)`.
    fn covariance(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let s = self.diffusion(x)?;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
            }
        }
        Ok(a)
    }

    /// Drift and covariance with their first and second derivatives.
    fn coefficient_jet(&self, _x: &[f64]) -> Result<CoefficientJet> {
        Err(Error::NotAvailable(
            "coefficient derivatives are not provided by this model".into(),
        ))
    }
}

/// Drift `b`, covariance `a` and their derivatives at one point.
///
/// Index layout (row-major, `d = dim`):
/// `drift_d1[i*d + k] = ∂_k b_i`, `drift_d2[(i*d + k)*d + l] = ∂_k ∂_l b_i`,
/// `cov_d1[(i*d + j)*d + k] = ∂_k a_ij`, `cov_d2[((i*d + j)*d + k)*d + l] = ∂_k ∂_l a_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientJet {
    pub dim: usize,
    pub drift: Vec<f64>,
    pub drift_d1: Vec<f64>,
    pub drift_d2: Vec<f64>,
    pub cov: Vec<f64>,
    pub cov_d1: Vec<f64>,
    pub cov_d2: Vec<f64>,
}

impl CoefficientJet {
    fn zeros(dim: usize) -> Self {
        let d = dim;
        Self {
            dim,
            drift: vec![0.0; d],
            drift_d1: vec![0.0; d * d],
            drift_d2: vec![0.0; d * d * d],
            cov: vec![0.0; d * d],
            cov_d1: vec![0.0; d * d * d],
            cov_d2: vec![0.0; d * d * d * d],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    pub theta: f64,
    pub mu0: f64,
    pub sigma: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            mu0: 0.0,
            sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StuartLandauParams {
    pub delta: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for StuartLandauParams {
    fn default() -> Self {
        Self {
            delta: 0.25,
            kappa: 1.0,
            epsilon: 0.05,
            gamma: 1.0,
            beta: 1.0,
        }
    }
}

impl StuartLandauParams {
    /// Limit-cycle radius `sqrt(δ/κ)`.
    pub fn radius(&self) -> f64 {
        (self.delta / self.kappa).sqrt()
    }

    /// Twist factor `β/κ`.
    pub fn twist(&self) -> f64 {
        self.beta / self.kappa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coordinates {
    Polar,
    Cartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleWellParams {
    pub noise: [f64; 2],
}

impl Default for TripleWellParams {
    fn default() -> Self {
        Self { noise: [1.09, 1.09] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralMassParams {
    /// Half-width of the Lorentzian excitability distribution.
    pub delta: f64,
    /// Synaptic coupling.
    pub j: f64,
    pub sigma_r: f64,
    pub sigma_v: f64,
    pub input_low: f64,
    pub input_high: f64,
    /// Probability of keeping the current input level per integration step.
    pub stay_prob: f64,
}

impl Default for NeuralMassParams {
    fn default() -> Self {
        Self {
            delta: 1.0,
            j: 15.0,
            sigma_r: 0.01,
            sigma_v: 0.01,
            input_low: -10.0,
            input_high: -2.0,
            stay_prob: 0.9999,
        }
    }
}

// Gaussian bumps of the triple-well potential: (amplitude, x-center, y-center).
const TRIPLE_WELL_BUMPS: [(f64, f64, f64); 4] = [
    (3.0, 0.0, 1.0 / 3.0),
    (-3.0, 0.0, 5.0 / 3.0),
    (-5.0, 1.0, 0.0),
    (-5.0, -1.0, 0.0),
];

/// Triple-well potential `V(x, y)`.
pub fn triple_well_potential(x: f64, y: f64) -> f64 {
    triple_well_potential_deriv(x, y, 0, 0)
}

/// `∂_x^i ∂_y^j V(x, y)` for any `i, j`.
pub fn triple_well_potential_deriv(x: f64, y: f64, i: usize, j: usize) -> f64 {
    let mut total = 0.0;
    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
    for &(c, cx, cy) in &TRIPLE_WELL_BUMPS {
        let u = x - cx;
        let w = y - cy;
        total += c * sign * hermite(i, u) * hermite(j, w) * (-u * u - w * w).exp();
    }
    // 0.2 x^4 + 0.2 (y - 1/3)^4
    let quartic = |t: f64, k: usize| -> f64 {
        match k {
            0 => 0.2 * t.powi(4),
            1 => 0.8 * t.powi(3),
            2 => 2.4 * t * t,
            3 => 4.8 * t,
            4 => 4.8,
            _ => 0.0,
        }
    };
    if j == 0 {
        total += quartic(x, i);
    }
    if i == 0 {
        total += quartic(y - 1.0 / 3.0, j);
    }
    total
}

/// Registered benchmark systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SdeModel {
    /// `dX = θ(μ0 − X) dt + σ dW`.
    Ou(OuParams),
    /// Stuart-Landau oscillator; polar state is `(r, θ)`.
    StuartLandau {
        params: StuartLandauParams,
        coordinates: Coordinates,
    },
    /// `dX = −∇V(X) dt + diag(noise) dW`.
    TripleWell(TripleWellParams),
    /// Two-dimensional firing-rate model with state `(r, v)`. `input` is the
    /// current level of the latent drive `I(t)`.
    NeuralMass { params: NeuralMassParams, input: f64 },
}

impl SdeModel {
    pub fn ou(theta: f64, mu0: f64, sigma: f64) -> Result<Self> {
        let m = SdeModel::Ou(OuParams { theta, mu0, sigma });
        m.validate()?;
        Ok(m)
    }

    pub fn stuart_landau(params: StuartLandauParams, coordinates: Coordinates) -> Result<Self> {
        let m = SdeModel::StuartLandau {
            params,
            coordinates,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn triple_well(params: TripleWellParams) -> Result<Self> {
        let m = SdeModel::TripleWell(params);
        m.validate()?;
        Ok(m)
    }

    pub fn neural_mass(params: NeuralMassParams) -> Result<Self> {
        let m = SdeModel::NeuralMass {
            params,
            input: params.input_high,
        };
        m.validate()?;
        Ok(m)
    }

    /// Same model with the latent drive set to `level` (neural mass only;
    /// other models are returned unchanged).
    pub fn with_input(&self, level: f64) -> Self {
        match self {
            SdeModel::NeuralMass { params, .. } => SdeModel::NeuralMass {
                params: *params,
                input: level,
            },
            other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        match self {
            SdeModel::Ou(p) => {
                // σ = 0 is allowed: it gives the deterministic linear decay.
                if !(p.theta > 0.0) {
                    return bad("OU theta must be positive");
                }
                if !(p.sigma >= 0.0) || !p.mu0.is_finite() {
                    return bad("OU sigma must be non-negative and mu0 finite");
                }
            }
            SdeModel::StuartLandau { params, .. } => {
                if !(params.kappa > 0.0) {
                    return bad("Stuart-Landau kappa must be positive");
                }
                if !(params.epsilon >= 0.0) {
                    return bad("Stuart-Landau epsilon must be non-negative");
                }
            }
            SdeModel::TripleWell(p) => {
                if p.noise.iter().any(|s| !(*s >= 0.0)) {
                    return bad("triple-well noise levels must be non-negative");
                }
            }
            SdeModel::NeuralMass { params, .. } => {
                if !(params.stay_prob > 0.0 && params.stay_prob < 1.0) {
                    return bad("stay probability must lie in (0, 1)");
                }
                if !(params.sigma_r >= 0.0 && params.sigma_v >= 0.0) {
                    return bad("neural-mass noise levels must be non-negative");
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SdeModel::Ou(_) => "ou",
            SdeModel::StuartLandau {
                coordinates: Coordinates::Polar,
                ..
            } => "stuart-landau-polar",
            SdeModel::StuartLandau { .. } => "stuart-landau-cartesian",
            SdeModel::TripleWell(_) => "triple-well",
            SdeModel::NeuralMass { .. } => "neural-mass",
        }
    }

    /// Analytic generator eigenvalues for the given modes.
    pub fn analytic_generator_eigs(&self, modes: &[ModeIndex]) -> Result<Vec<Complex64>> {
        modes
            .iter()
            .map(|mode| match (self, mode) {
                (SdeModel::Ou(p), ModeIndex::Ou(n)) => {
                    Ok(Complex64::new(-(*n as f64) * p.theta, 0.0))
                }
                (SdeModel::StuartLandau { params, .. }, ModeIndex::StuartLandau { l, n }) => {
                    let n = *n as f64;
                    // Imaginary part n(1 − δ).
                    let im = n * (1.0 - params.delta);
                    let re = if *l == 0 {
                        let r2 = params.delta / params.kappa;
                        -n * n * params.epsilon * params.epsilon / (2.0 * r2)
                    } else {
                        -2.0 * (*l as f64) * params.delta
                    };
                    Ok(Complex64::new(re, im))
                }
                (SdeModel::Ou(_), _) | (SdeModel::StuartLandau { .. }, _) => Err(
                    Error::InvalidArgument(format!("mode {mode:?} does not fit model {}", self.name())),
                ),
                _ => Err(Error::NotAvailable(format!(
                    "no analytic spectrum for {}",
                    self.name()
                ))),
            })
            .collect()
    }

    /// Analytic eigenfunction value. Stuart-Landau states are `(r, θ)`.
    pub fn analytic_eigenfunction(&self, mode: ModeIndex, x: &[f64]) -> Result<Complex64> {
        match (self, mode) {
            (SdeModel::Ou(p), ModeIndex::Ou(n)) => {
                check_dim(1, x.len())?;
                let scale = (p.sigma * p.sigma / (2.0 * p.theta)).sqrt();
                if !(scale > 0.0) {
                    return Err(Error::Domain("OU eigenfunctions need sigma > 0".into()));
                }
                Ok(Complex64::new(hermite(n, (x[0] - p.mu0) / scale), 0.0))
            }
            (SdeModel::StuartLandau { params, .. }, ModeIndex::StuartLandau { l, n }) => {
                check_dim(2, x.len())?;
                let (r, theta) = (x[0], x[1]);
                if !(r > 0.0) {
                    return Err(Error::Domain(format!("radius must be positive, got {r}")));
                }
                let rr = params.radius();
                let phase = n as f64 * (theta - params.twist() * (r / rr).ln());
                let carrier = Complex64::from_polar(1.0, phase);
                if l == 0 {
                    return Ok(carrier);
                }
                let an = n.unsigned_abs() as usize;
                let norm = 1.0 / (2f64.powi(an as i32) * factorial(an)).sqrt();
                let u = (2.0 * params.delta).sqrt() * (r - rr) / params.epsilon;
                Ok(carrier * (norm * hermite(l, u)))
            }
            (SdeModel::Ou(_), _) | (SdeModel::StuartLandau { .. }, _) => Err(
                Error::InvalidArgument(format!("mode {mode:?} does not fit model {}", self.name())),
            ),
            _ => Err(Error::NotAvailable(format!(
                "no analytic eigenfunctions for {}",
                self.name()
            ))),
        }
    }
}

/// Mode labels for analytic spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeIndex {
    Ou(usize),
    StuartLandau { l: usize, n: i64 },
}

impl SdeCoefficients for SdeModel {
    fn dim(&self) -> usize {
        match self {
            SdeModel::Ou(_) => 1,
            _ => 2,
        }
    }

    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            SdeModel::Ou(p) => vec![p.theta * (p.mu0 - x[0])],
            SdeModel::StuartLandau {
                params: p,
                coordinates: Coordinates::Polar,
            } => {
                let r = x[0];
                if !(r > 0.0) {
                    return Err(Error::Domain(format!("radius must be positive, got {r}")));
                }
                vec![
                    p.delta * r - p.kappa * r.powi(3) + p.epsilon * p.epsilon / (2.0 * r),
                    p.gamma - p.beta * r * r,
                ]
            }
            SdeModel::StuartLandau {
                params: p,
                coordinates: Coordinates::Cartesian,
            } => {
                let (a, b) = (x[0], x[1]);
                let rho2 = a * a + b * b;
                let radial = p.delta - p.kappa * rho2;
                let angular = p.gamma - p.beta * rho2;
                vec![radial * a - angular * b, angular * a + radial * b]
            }
            SdeModel::TripleWell(_) => vec![
                -triple_well_potential_deriv(x[0], x[1], 1, 0),
                -triple_well_potential_deriv(x[0], x[1], 0, 1),
            ],
            SdeModel::NeuralMass { params: p, input } => {
                let (r, v) = (x[0], x[1]);
                vec![
                    p.delta / PI + 2.0 * r * v,
                    v * v + p.j * r + input - PI * PI * r * r,
                ]
            }
        })
    }

    fn diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            SdeModel::Ou(p) => vec![p.sigma],
            SdeModel::StuartLandau {
                params: p,
                coordinates: Coordinates::Polar,
            } => {
                let r = x[0];
                if !(r > 0.0) {
                    return Err(Error::Domain(format!("radius must be positive, got {r}")));
                }
                vec![p.epsilon, 0.0, 0.0, p.epsilon / r]
            }
            SdeModel::StuartLandau { params: p, .. } => vec![p.epsilon, 0.0, 0.0, p.epsilon],
            SdeModel::TripleWell(p) => vec![p.noise[0], 0.0, 0.0, p.noise[1]],
            SdeModel::NeuralMass { params: p, .. } => vec![p.sigma_r, 0.0, 0.0, p.sigma_v],
        })
    }

    fn coefficient_jet(&self, x: &[f64]) -> Result<CoefficientJet> {
        let d = self.dim();
        check_dim(d, x.len())?;
        let mut jet = CoefficientJet::zeros(d);
        jet.drift = self.drift(x)?;
        jet.cov = self.covariance(x)?;
        let d1 = |i: usize, k: usize| i * d + k;
        let d2 = |i: usize, k: usize, l: usize| (i * d + k) * d + l;
        let c1 = |i: usize, j: usize, k: usize| (i * d + j) * d + k;
        let c2 = |i: usize, j: usize, k: usize, l: usize| ((i * d + j) * d + k) * d + l;
        match self {
            SdeModel::Ou(p) => {
                jet.drift_d1[0] = -p.theta;
            }
            SdeModel::StuartLandau {
                params: p,
                coordinates: Coordinates::Polar,
            } => {
                let r = x[0];
                let e2 = p.epsilon * p.epsilon;
                jet.drift_d1[d1(0, 0)] = p.delta - 3.0 * p.kappa * r * r - e2 / (2.0 * r * r);
                jet.drift_d2[d2(0, 0, 0)] = -6.0 * p.kappa * r + e2 / r.powi(3);
                jet.drift_d1[d1(1, 0)] = -2.0 * p.beta * r;
                jet.drift_d2[d2(1, 0, 0)] = -2.0 * p.beta;
                jet.cov_d1[c1(1, 1, 0)] = -2.0 * e2 / r.powi(3);
                jet.cov_d2[c2(1, 1, 0, 0)] = 6.0 * e2 / r.powi(4);
            }
            SdeModel::StuartLandau { params: p, .. } => {
                let (a, b) = (x[0], x[1]);
                let (k, bt, g, dl) = (p.kappa, p.beta, p.gamma, p.delta);
                jet.drift_d1[d1(0, 0)] = dl - k * (3.0 * a * a + b * b) + 2.0 * bt * a * b;
                jet.drift_d1[d1(0, 1)] = -2.0 * k * a * b - g + bt * (a * a + 3.0 * b * b);
                jet.drift_d1[d1(1, 0)] = g - bt * (3.0 * a * a + b * b) - 2.0 * k * a * b;
                jet.drift_d1[d1(1, 1)] = -2.0 * bt * a * b + dl - k * (a * a + 3.0 * b * b);
                jet.drift_d2[d2(0, 0, 0)] = -6.0 * k * a + 2.0 * bt * b;
                jet.drift_d2[d2(0, 0, 1)] = -2.0 * k * b + 2.0 * bt * a;
                jet.drift_d2[d2(0, 1, 0)] = -2.0 * k * b + 2.0 * bt * a;
                jet.drift_d2[d2(0, 1, 1)] = -2.0 * k * a + 6.0 * bt * b;
                jet.drift_d2[d2(1, 0, 0)] = -6.0 * bt * a - 2.0 * k * b;
                jet.drift_d2[d2(1, 0, 1)] = -2.0 * bt * b - 2.0 * k * a;
                jet.drift_d2[d2(1, 1, 0)] = -2.0 * bt * b - 2.0 * k * a;
                jet.drift_d2[d2(1, 1, 1)] = -2.0 * bt * a - 6.0 * k * b;
            }
            SdeModel::TripleWell(_) => {
                // b = −∇V, so ∂^α b_i = −∂^α ∂_i V.
                let pv = |ix: usize, iy: usize| triple_well_potential_deriv(x[0], x[1], ix, iy);
                let unit = |axis: usize| if axis == 0 { (1, 0) } else { (0, 1) };
                for i in 0..2 {
                    for k in 0..2 {
                        let (a1, b1) = unit(i);
                        let (a2, b2) = unit(k);
                        jet.drift_d1[d1(i, k)] = -pv(a1 + a2, b1 + b2);
                        for l in 0..2 {
                            let (a3, b3) = unit(l);
                            jet.drift_d2[d2(i, k, l)] = -pv(a1 + a2 + a3, b1 + b2 + b3);
                        }
                    }
                }
            }
            SdeModel::NeuralMass { params: p, .. } => {
                let (r, v) = (x[0], x[1]);
                jet.drift_d1[d1(0, 0)] = 2.0 * v;
                jet.drift_d1[d1(0, 1)] = 2.0 * r;
                jet.drift_d1[d1(1, 0)] = p.j - 2.0 * PI * PI * r;
                jet.drift_d1[d1(1, 1)] = 2.0 * v;
                jet.drift_d2[d2(0, 0, 1)] = 2.0;
                jet.drift_d2[d2(0, 1, 0)] = 2.0;
                jet.drift_d2[d2(1, 0, 0)] = -2.0 * PI * PI;
                jet.drift_d2[d2(1, 1, 1)] = 2.0;
            }
        }
        Ok(jet)
    }
}

impl<T: SdeCoefficients + ?Sized> SdeCoefficients for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).drift(x)
    }
    fn diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).diffusion(x)
    }
    fn covariance(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).covariance(x)
    }
    fn coefficient_jet(&self, x: &[f64]) -> Result<CoefficientJet> {
        (**self).coefficient_jet(x)
    }
}

/// Deterministic companion of a model: same drift, zero diffusion.
#[derive(Debug, Clone)]
pub struct Deterministic<M>(pub M);

impl<M: SdeCoefficients> SdeCoefficients for Deterministic<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.drift(x)
    }
    fn diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(vec![0.0; self.dim() * self.dim()])
    }
    fn coefficient_jet(&self, x: &[f64]) -> Result<CoefficientJet> {
        let mut jet = self.0.coefficient_jet(x)?;
        jet.cov.iter_mut().for_each(|v| *v = 0.0);
        jet.cov_d1.iter_mut().for_each(|v| *v = 0.0);
        jet.cov_d2.iter_mut().for_each(|v| *v = 0.0);
        Ok(jet)
    }
}
