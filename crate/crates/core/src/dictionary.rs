//! Dictionaries of observables and the generator acting on them.
//!
//! Every fixed family is a tensor product of one-dimensional factors, so any
//! mixed partial derivative is a product of per-axis factor derivatives. The
//! families evaluate exact derivatives up to fourth order, which is what the
//! second-order generator action needs.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::SdeCoefficients;
use crate::special::{falling_factorial, hermite_all};

/// Highest derivative order carried by the factor tables.
const MAX_ORDER: usize = 4;

/// Value, gradient and Hessian of all `N` observables at one point.
///
/// `grad[j*d + i] = ∂_i ψ_j`, `hess[(j*d + i)*d + k] = ∂_i ∂_k ψ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<Complex64>,
    pub grad: Vec<Complex64>,
    pub hess: Vec<Complex64>,
}

/// A finite family of scalar observables `ψ_1, …, ψ_N` on `R^dim`.
pub trait Observables: Send + Sync {
    fn dim(&self) -> usize;

    /// Dictionary size `N`.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<Complex64>>;

    fn jet(&self, x: &[f64]) -> Result<Jet>;

    /// `N × dim` row-major Jacobian.
    fn jacobian(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        Ok(self.jet(x)?.grad)
    }

    /// `N × dim × dim` Hessians.
    fn hessian(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        Ok(self.jet(x)?.hess)
    }
}

impl<T: Observables + ?Sized> Observables for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn len(&self) -> usize {
        (**self).len()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        (**self).eval(x)
    }
    fn jet(&self, x: &[f64]) -> Result<Jet> {
        (**self).jet(x)
    }
}

/// Serializable description of a fixed dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DictionarySpec {
    /// All monomials of total degree `≤ max_degree`.
    Monomial { dim: usize, max_degree: usize },
    /// `exp(i n θ) · exp(i 2π k (r − r_min)/(r_max − r_min))` on polar states
    /// `(r, θ)` with `|n| ≤ angular_modes`, `|k| ≤ radial_modes`.
    Fourier {
        angular_modes: usize,
        radial_modes: usize,
        #[serde(default = "default_r_min")]
        r_min: f64,
        #[serde(default = "default_r_max")]
        r_max: f64,
    },
    /// Products of physicists' Hermite polynomials `H_k((x_i − center_i)/scale_i)`
    /// of total order `≤ max_order`.
    Hermite {
        max_order: usize,
        center: Vec<f64>,
        scale: Vec<f64>,
    },
    /// `exp(−|x − c|² / (2 w²))` for each center/width pair.
    GaussianRbf {
        centers: Vec<Vec<f64>>,
        widths: Vec<f64>,
    },
}

fn default_r_min() -> f64 {
    0.4
}

fn default_r_max() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq)]
enum Factor {
    /// `x^p`
    Power(usize),
    /// `H_n((x − c)/s)`
    Hermite { n: usize, center: f64, scale: f64 },
    /// `exp(i ω (x − origin))`
    Wave { omega: f64, origin: f64 },
    /// `exp(−(x − c)² / (2 w²))`
    Gaussian { center: f64, width: f64 },
}

impl Factor {
    /// Derivatives of order `0..=MAX_ORDER` at `x`.
    fn derivatives(&self, x: f64) -> [Complex64; MAX_ORDER + 1] {
        let mut out = [Complex64::new(0.0, 0.0); MAX_ORDER + 1];
        match *self {
            Factor::Power(p) => {
                for (k, o) in out.iter_mut().enumerate() {
                    if k <= p {
                        *o = Complex64::new(falling_factorial(p, k) * x.powi((p - k) as i32), 0.0);
                    }
                }
            }
            Factor::Hermite { n, center, scale } => {
                let u = (x - center) / scale;
                let h = hermite_all(n, u);
                // d/du H_n = 2n H_{n−1}
                for (k, o) in out.iter_mut().enumerate() {
                    if k <= n {
                        let c = 2f64.powi(k as i32) * falling_factorial(n, k) / scale.powi(k as i32);
                        *o = Complex64::new(c * h[n - k], 0.0);
                    }
                }
            }
            Factor::Wave { omega, origin } => {
                let base = Complex64::from_polar(1.0, omega * (x - origin));
                let io = Complex64::new(0.0, omega);
                let mut pow = Complex64::new(1.0, 0.0);
                for o in out.iter_mut() {
                    *o = pow * base;
                    pow *= io;
                }
            }
            Factor::Gaussian { center, width } => {
                // g = e^{−u²}, u = (x − c)/(√2 w); d^k g/dx^k = (−1)^k H_k(u) e^{−u²} / (√2 w)^k
                let s = std::f64::consts::SQRT_2 * width;
                let u = (x - center) / s;
                let g = (-u * u).exp();
                let h = hermite_all(MAX_ORDER, u);
                for (k, o) in out.iter_mut().enumerate() {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    *o = Complex64::new(sign * h[k] * g / s.powi(k as i32), 0.0);
                }
            }
        }
        out
    }
}

/// A fixed tensor-product dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDictionary {
    spec: DictionarySpec,
    dim: usize,
    /// `factors[j][i]` is the factor of basis `j` along axis `i`.
    factors: Vec<Vec<Factor>>,
}

/// Multi-indices of total degree `≤ max_degree` in graded order; within a
/// degree the first axis carries the highest power first.
pub fn graded_exponents(dim: usize, max_degree: usize) -> Vec<Vec<usize>> {
    fn fill(dim: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == dim - 1 {
            let mut e = prefix.clone();
            e.push(total);
            out.push(e);
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            fill(dim, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for t in 0..=max_degree {
        fill(dim, t, &mut Vec::new(), &mut out);
    }
    out
}

impl FixedDictionary {
    pub fn new(spec: DictionarySpec) -> Result<Self> {
        let (dim, factors) = match &spec {
            DictionarySpec::Monomial { dim, max_degree } => {
                if *dim == 0 {
                    return Err(Error::InvalidArgument("monomial dim must be positive".into()));
                }
                let f = graded_exponents(*dim, *max_degree)
                    .into_iter()
                    .map(|e| e.into_iter().map(Factor::Power).collect())
                    .collect();
                (*dim, f)
            }
            DictionarySpec::Fourier {
                angular_modes,
                radial_modes,
                r_min,
                r_max,
            } => {
                if !(r_max > r_min) {
                    return Err(Error::InvalidArgument("fourier radial interval is degenerate".into()));
                }
                let width = r_max - r_min;
                let an = *angular_modes as i64;
                let rk = *radial_modes as i64;
                let mut f = Vec::new();
                for n in -an..=an {
                    for k in -rk..=rk {
                        f.push(vec![
                            Factor::Wave {
                                omega: 2.0 * PI * k as f64 / width,
                                origin: *r_min,
                            },
                            Factor::Wave {
                                omega: n as f64,
                                origin: 0.0,
                            },
                        ]);
                    }
                }
                (2, f)
            }
            DictionarySpec::Hermite {
                max_order,
                center,
                scale,
            } => {
                let dim = center.len();
                if dim == 0 {
                    return Err(Error::InvalidArgument("hermite center is empty".into()));
                }
                check_dim(dim, scale.len())?;
                if scale.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::InvalidArgument("hermite scales must be positive".into()));
                }
                let f = graded_exponents(dim, *max_order)
                    .into_iter()
                    .map(|e| {
                        e.into_iter()
                            .enumerate()
                            .map(|(i, n)| Factor::Hermite {
                                n,
                                center: center[i],
                                scale: scale[i],
                            })
                            .collect()
                    })
                    .collect();
                (dim, f)
            }
            DictionarySpec::GaussianRbf { centers, widths } => {
                check_dim(centers.len(), widths.len())?;
                let dim = centers.first().map(|c| c.len()).unwrap_or(0);
                if dim == 0 {
                    return Err(Error::InvalidArgument("rbf dictionary needs centers".into()));
                }
                if widths.iter().any(|w| !(*w > 0.0)) {
                    return Err(Error::InvalidArgument("rbf widths must be positive".into()));
                }
                let mut f = Vec::with_capacity(centers.len());
                for (c, &w) in centers.iter().zip(widths) {
                    check_dim(dim, c.len())?;
                    f.push(
                        c.iter()
                            .map(|&ci| Factor::Gaussian {
                                center: ci,
                                width: w,
                            })
                            .collect(),
                    );
                }
                (dim, f)
            }
        };
        Ok(Self { spec, dim, factors })
    }

    pub fn spec(&self) -> &DictionarySpec {
        &self.spec
    }

    /// Index of the constant function, if the family contains one.
    pub fn constant_index(&self) -> Option<usize> {
        self.factors.iter().position(|fs| {
            fs.iter().all(|f| match f {
                Factor::Power(0) => true,
                Factor::Hermite { n: 0, .. } => true,
                Factor::Wave { omega, .. } => *omega == 0.0,
                _ => false,
            })
        })
    }

    /// Per-basis, per-axis derivative tables at `x`.
    fn tables(&self, x: &[f64]) -> Result<Vec<[Complex64; MAX_ORDER + 1]>> {
        check_dim(self.dim, x.len())?;
        let mut t = Vec::with_capacity(self.factors.len() * self.dim);
        for fs in &self.factors {
            for (i, f) in fs.iter().enumerate() {
                t.push(f.derivatives(x[i]));
            }
        }
        Ok(t)
    }

    /// Fourth-order derivative evaluator at `x`.
    pub fn derivatives(&self, x: &[f64]) -> Result<Derivatives> {
        if matches!(self.spec, DictionarySpec::Fourier { .. }) {
            return Err(Error::UnsupportedFamily(
                "fourier dictionaries do not provide fourth derivatives".into(),
            ));
        }
        Ok(Derivatives {
            dim: self.dim,
            tables: self.tables(x)?,
        })
    }
}

/// Mixed partial derivatives of every basis function at a fixed point.
pub struct Derivatives {
    dim: usize,
    tables: Vec<[Complex64; MAX_ORDER + 1]>,
}

impl Derivatives {
    /// `∂_{axes[0]} ∂_{axes[1]} … ψ_j` for up to four axes.
    pub fn get(&self, j: usize, axes: &[usize]) -> Complex64 {
        let mut counts = [0usize; 8];
        for &a in axes {
            counts[a] += 1;
        }
        let row = &self.tables[j * self.dim..(j + 1) * self.dim];
        row.iter()
            .enumerate()
            .fold(Complex64::new(1.0, 0.0), |acc, (i, t)| acc * t[counts[i]])
    }
}

impl Observables for FixedDictionary {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.factors.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        check_dim(self.dim, x.len())?;
        Ok(self
            .factors
            .iter()
            .map(|fs| {
                fs.iter()
                    .enumerate()
                    .fold(Complex64::new(1.0, 0.0), |acc, (i, f)| acc * f.derivatives(x[i])[0])
            })
            .collect())
    }

    fn jet(&self, x: &[f64]) -> Result<Jet> {
        let d = self.dim;
        let n = self.len();
        let derivs = Derivatives {
            dim: d,
            tables: self.tables(x)?,
        };
        let mut jet = Jet {
            len: n,
            dim: d,
            values: Vec::with_capacity(n),
            grad: Vec::with_capacity(n * d),
            hess: Vec::with_capacity(n * d * d),
        };
        for j in 0..n {
            jet.values.push(derivs.get(j, &[]));
            for i in 0..d {
                jet.grad.push(derivs.get(j, &[i]));
            }
            for i in 0..d {
                for k in 0..d {
                    // Symmetric by construction: the product only sees axis counts.
                    jet.hess.push(derivs.get(j, &[i, k]));
                }
            }
        }
        Ok(jet)
    }
}

/// `(Aψ_j)(x) = Σ_i b_i ∂_i ψ_j + ½ Σ_ik a_ik ∂_i ∂_k ψ_j` with `a = σσᵀ`.
pub fn generator_action(
    dict: &dyn Observables,
    model: &dyn SdeCoefficients,
    x: &[f64],
) -> Result<Vec<Complex64>> {
    check_dim(dict.dim(), model.dim())?;
    let b = model.drift(x)?;
    let a = model.covariance(x)?;
    let jet = dict.jet(x)?;
    Ok(apply_generator(&jet, &b, Some(&a)))
}

/// Lie derivative `b · ∇ψ_j` of a deterministic flow.
pub fn generator_action_deterministic(
    dict: &dyn Observables,
    model: &dyn SdeCoefficients,
    x: &[f64],
) -> Result<Vec<Complex64>> {
    check_dim(dict.dim(), model.dim())?;
    let b = model.drift(x)?;
    let jet = dict.jet(x)?;
    Ok(apply_generator(&jet, &b, None))
}

/// Generator action assembled from a precomputed jet and coefficients.
pub fn apply_generator(jet: &Jet, drift: &[f64], cov: Option<&[f64]>) -> Vec<Complex64> {
    let d = jet.dim;
    (0..jet.len)
        .map(|j| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..d {
                acc += jet.grad[j * d + i] * drift[i];
            }
            if let Some(a) = cov {
                for i in 0..d {
                    for k in 0..d {
                        let aik = a[i * d + k];
                        if aik != 0.0 {
                            acc += jet.hess[(j * d + i) * d + k] * (0.5 * aik);
                        }
                    }
                }
            }
            acc
        })
        .collect()
}

/// `(A²ψ_j)(x)`: the generator applied to the closed form of `Aψ_j`.
///
/// Needs fourth derivatives of the dictionary and second derivatives of the
/// drift and covariance.
pub fn generator_action_second(
    dict: &FixedDictionary,
    model: &dyn SdeCoefficients,
    x: &[f64],
) -> Result<Vec<Complex64>> {
    check_dim(dict.dim(), model.dim())?;
    let f = dict.derivatives(x)?;
    let c = model.coefficient_jet(x)?;
    let d = dict.dim();
    let b = |i: usize| c.drift[i];
    let db = |i: usize, k: usize| c.drift_d1[i * d + k];
    let ddb = |i: usize, k: usize, l: usize| c.drift_d2[(i * d + k) * d + l];
    let a = |i: usize, j: usize| c.cov[i * d + j];
    let da = |i: usize, j: usize, k: usize| c.cov_d1[(i * d + j) * d + k];
    let dda = |i: usize, j: usize, k: usize, l: usize| c.cov_d2[((i * d + j) * d + k) * d + l];

    let mut out = Vec::with_capacity(dict.len());
    for jb in 0..dict.len() {
        let p = |axes: &[usize]| f.get(jb, axes);
        // ∂_k (Aψ)
        let first = |k: usize| {
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..d {
                s += p(&[i]) * db(i, k) + p(&[i, k]) * b(i);
                for j in 0..d {
                    s += (p(&[i, j]) * da(i, j, k) + p(&[i, j, k]) * a(i, j)) * 0.5;
                }
            }
            s
        };
        // ∂_k ∂_l (Aψ)
        let second = |k: usize, l: usize| {
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..d {
                s += p(&[i]) * ddb(i, k, l)
                    + p(&[i, l]) * db(i, k)
                    + p(&[i, k]) * db(i, l)
                    + p(&[i, k, l]) * b(i);
                for j in 0..d {
                    s += (p(&[i, j]) * dda(i, j, k, l)
                        + p(&[i, j, l]) * da(i, j, k)
                        + p(&[i, j, k]) * da(i, j, l)
                        + p(&[i, j, k, l]) * a(i, j))
                        * 0.5;
                }
            }
            s
        };
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..d {
            acc += first(k) * b(k);
            for l in 0..d {
                let akl = a(k, l);
                if akl != 0.0 {
                    acc += second(k, l) * (0.5 * akl);
                }
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// `Σ_j c_j ψ_j(x)`.
pub fn eigenfunction_eval(dict: &dyn Observables, coeffs: &[Complex64], x: &[f64]) -> Result<Complex64> {
    check_dim(dict.len(), coeffs.len())?;
    let v = dict.eval(x)?;
    Ok(v.iter().zip(coeffs).map(|(a, b)| a * b).sum())
}
