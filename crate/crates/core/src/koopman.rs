//! Gram assembly, Koopman operator estimates and their spectra.
//!
//! All estimators work with the normalized Gram matrices
//! `Ĝ = Ψ_X* Ψ_X / m`, `Ĥ = Ψ_X* Ψ'_X / m` and `Ĉ = Ψ_X* Ψ_Y / m`, and with a
//! regularization `γ` added to `Ĝ`. Every solve against `Ĝ + γI` goes through
//! a Cholesky factorization.

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::Solve;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Accum, Mat, MatRef, Par, Side};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{generator_action, generator_action_deterministic, Observables};
use crate::error::{check_dim, Error, Result};
use crate::models::SdeCoefficients;
use crate::simulate::SnapshotEnsemble;

/// Rows per partial product in the Gram reduction.
const GRAM_BLOCK: usize = 512;

/// Relative regularization used when none is given: `γ = 1e-8 · tr(Ĝ)/N`.
pub const DEFAULT_RELATIVE_GAMMA: f64 = 1e-8;

/// Relative tolerance under which two `|μ|` are treated as equal when ordering.
const ORDER_TIE_TOL: f64 = 1e-12;

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

fn rows_to_mat(rows: Vec<Vec<Complex64>>, ncols: usize) -> Mat<Complex64> {
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

fn check_points(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "point buffer of length {} is not a multiple of dim {dim}",
            points.len()
        )));
    }
    Ok(points.len() / dim)
}

/// `m × N` matrix of `ψ_j(x_i)` for row-major points.
pub fn eval_matrix(dict: &dyn Observables, points: &[f64]) -> Result<Mat<Complex64>> {
    let d = dict.dim();
    check_points(points, d)?;
    let rows = points
        .par_chunks(d)
        .enumerate()
        .map(|(i, x)| dict.eval(x).map_err(|e| e.at_row(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows_to_mat(rows, dict.len()))
}

/// Which generator acts on the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    /// Drift and diffusion terms.
    #[default]
    Stochastic,
    /// Drift term only (Lie derivative of the mean flow).
    Deterministic,
}

/// `m × N` matrix of `(Aψ_j)(x_i)`.
pub fn action_matrix(
    dict: &dyn Observables,
    model: &dyn SdeCoefficients,
    points: &[f64],
    action: Action,
) -> Result<Mat<Complex64>> {
    let d = dict.dim();
    check_dim(d, model.dim())?;
    check_points(points, d)?;
    let rows = points
        .par_chunks(d)
        .enumerate()
        .map(|(i, x)| {
            match action {
                Action::Stochastic => generator_action(dict, model, x),
                Action::Deterministic => generator_action_deterministic(dict, model, x),
            }
            .map_err(|e| e.at_row(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows_to_mat(rows, dict.len()))
}

/// `Ψ_X`, `Ψ'_X` and `Ψ_Y` for one ensemble.
#[derive(Debug, Clone)]
pub struct DataMatrices {
    pub psi_x: Mat<Complex64>,
    pub psi_prime_x: Option<Mat<Complex64>>,
    pub psi_y: Mat<Complex64>,
}

/// Evaluates the dictionary on both halves of the ensemble and, if a model is
/// given, its generator action on the initial states.
pub fn assemble_data_matrices(
    dict: &dyn Observables,
    ensemble: &SnapshotEnsemble,
    model: Option<&dyn SdeCoefficients>,
    action: Action,
) -> Result<DataMatrices> {
    check_dim(dict.dim(), ensemble.dim)?;
    let psi_x = eval_matrix(dict, &ensemble.x_points)?;
    let psi_y = eval_matrix(dict, &ensemble.y_points)?;
    let psi_prime_x = model
        .map(|m| action_matrix(dict, m, &ensemble.x_points, action))
        .transpose()?;
    Ok(DataMatrices {
        psi_x,
        psi_prime_x,
        psi_y,
    })
}

/// `a* b / m`, reduced over fixed row blocks in a fixed tree order so the
/// result does not depend on the thread count.
pub fn gram_product(a: MatRef<'_, Complex64>, b: MatRef<'_, Complex64>) -> Result<Mat<Complex64>> {
    check_dim(a.nrows(), b.nrows())?;
    let m = a.nrows();
    if m == 0 {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let starts: Vec<usize> = (0..m).step_by(GRAM_BLOCK).collect();
    let mut parts: Vec<Mat<Complex64>> = starts
        .par_iter()
        .map(|&s| {
            let len = GRAM_BLOCK.min(m - s);
            let mut out = Mat::<Complex64>::zeros(a.ncols(), b.ncols());
            matmul(
                out.as_mut(),
                Accum::Replace,
                a.subrows(s, len).adjoint(),
                b.subrows(s, len),
                Complex64::new(1.0, 0.0),
                Par::Seq,
            );
            out
        })
        .collect();
    while parts.len() > 1 {
        parts = parts
            .chunks_mut(2)
            .map(|pair| match pair {
                [x, y] => &*x + &*y,
                [x] => std::mem::replace(x, Mat::zeros(0, 0)),
                _ => unreachable!(),
            })
            .collect();
    }
    let scale = 1.0 / m as f64;
    let sum = parts.pop().expect("at least one block");
    Ok(Mat::from_fn(sum.nrows(), sum.ncols(), |i, j| sum[(i, j)] * scale))
}

fn hermitian_part(g: &Mat<Complex64>) -> Mat<Complex64> {
    Mat::from_fn(g.nrows(), g.ncols(), |i, j| (g[(i, j)] + g[(j, i)].conj()) * 0.5)
}

/// `γ = 1e-8 · tr(Ĝ)/N`.
pub fn default_gamma(g: MatRef<'_, Complex64>) -> f64 {
    let n = g.nrows();
    let tr: f64 = (0..n).map(|i| g[(i, i)].re).sum();
    DEFAULT_RELATIVE_GAMMA * tr / n as f64
}

fn regularized(g: MatRef<'_, Complex64>, gamma: f64) -> Mat<Complex64> {
    Mat::from_fn(g.nrows(), g.ncols(), |i, j| {
        if i == j {
            g[(i, j)] + gamma
        } else {
            g[(i, j)]
        }
    })
}

fn cholesky(g: MatRef<'_, Complex64>, gamma: f64) -> Result<faer::linalg::solvers::Llt<Complex64>> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and ≥ 0, got {gamma}")));
    }
    regularized(g, gamma)
        .llt(Side::Lower)
        .map_err(|_| Error::SingularGram { gamma })
}

/// `(Ĝ + γI)⁻¹ rhs` via Cholesky.
pub fn regularized_solve(
    g: MatRef<'_, Complex64>,
    gamma: f64,
    rhs: MatRef<'_, Complex64>,
) -> Result<Mat<Complex64>> {
    check_dim(g.nrows(), rhs.nrows())?;
    let llt = cholesky(g, gamma)?;
    Ok(llt.solve(rhs))
}

/// Empirical Gram matrices and their metadata.
#[derive(Debug, Clone)]
pub struct GramPair {
    pub g: Mat<Complex64>,
    pub h: Mat<Complex64>,
    pub m: usize,
    pub gamma: f64,
    pub delta_t: f64,
}

impl GramPair {
    /// Validates shapes, symmetrizes `Ĝ`, resolves the default `γ` and checks
    /// that `Ĝ + γI` admits a Cholesky factor.
    pub fn from_matrices(
        g: Mat<Complex64>,
        h: Mat<Complex64>,
        m: usize,
        gamma: Option<f64>,
        delta_t: f64,
    ) -> Result<Self> {
        let n = g.nrows();
        check_dim(n, g.ncols())?;
        check_dim(n, h.nrows())?;
        check_dim(n, h.ncols())?;
        if !(delta_t > 0.0) {
            return Err(Error::InvalidArgument(format!("delta_t must be positive, got {delta_t}")));
        }
        let g = hermitian_part(&g);
        let gamma = gamma.unwrap_or_else(|| default_gamma(g.as_ref()));
        cholesky(g.as_ref(), gamma)?;
        Ok(Self {
            g,
            h,
            m,
            gamma,
            delta_t,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// `(Ĝ + γI)⁻¹ Ĥ`.
    pub fn generator_matrix(&self) -> Result<Mat<Complex64>> {
        regularized_solve(self.g.as_ref(), self.gamma, self.h.as_ref())
    }
}

/// `Ĝ = Ψ_X* Ψ_X / m`, `Ĥ = Ψ_X* Ψ'_X / m`.
pub fn gram(
    psi_x: MatRef<'_, Complex64>,
    psi_prime_x: MatRef<'_, Complex64>,
    gamma: Option<f64>,
    delta_t: f64,
) -> Result<GramPair> {
    check_dim(psi_x.nrows(), psi_prime_x.nrows())?;
    check_dim(psi_x.ncols(), psi_prime_x.ncols())?;
    let g = gram_product(psi_x, psi_x)?;
    let h = gram_product(psi_x, psi_prime_x)?;
    GramPair::from_matrices(g, h, psi_x.nrows(), gamma, delta_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    SdmdSemigroup,
    EdmdSemigroup,
    GedmdGenerator,
}

impl OperatorKind {
    pub fn is_generator(self) -> bool {
        self == OperatorKind::GedmdGenerator
    }
}

/// A finite-dimensional Koopman semigroup or generator estimate.
#[derive(Debug, Clone)]
pub struct KoopmanApproximation {
    pub matrix: Mat<Complex64>,
    pub kind: OperatorKind,
    /// Absent for generator estimates.
    pub delta_t: Option<f64>,
    pub gamma: f64,
}

/// `K̂ = I + Δt (Ĝ + γI)⁻¹ Ĥ`.
pub fn sdmd_operator(gp: &GramPair) -> Result<KoopmanApproximation> {
    let a = gp.generator_matrix()?;
    let n = gp.dim();
    let dt = gp.delta_t;
    let matrix = Mat::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        a[(i, j)] * dt + id
    });
    Ok(KoopmanApproximation {
        matrix,
        kind: OperatorKind::SdmdSemigroup,
        delta_t: Some(dt),
        gamma: gp.gamma,
    })
}

/// `K̂ = (Ĝ + γI)⁻¹ Ĉ` with `Ĉ = Ψ_X* Ψ_Y / m`.
pub fn edmd_operator(
    psi_x: MatRef<'_, Complex64>,
    psi_y: MatRef<'_, Complex64>,
    gamma: Option<f64>,
    delta_t: f64,
) -> Result<KoopmanApproximation> {
    check_dim(psi_x.nrows(), psi_y.nrows())?;
    check_dim(psi_x.ncols(), psi_y.ncols())?;
    let g = hermitian_part(&gram_product(psi_x, psi_x)?);
    let c = gram_product(psi_x, psi_y)?;
    let gamma = gamma.unwrap_or_else(|| default_gamma(g.as_ref()));
    let matrix = regularized_solve(g.as_ref(), gamma, c.as_ref())?;
    Ok(KoopmanApproximation {
        matrix,
        kind: OperatorKind::EdmdSemigroup,
        delta_t: Some(delta_t),
        gamma,
    })
}

/// `Â = (Ĝ + γI)⁻¹ Ĥ`.
pub fn gedmd_operator(
    psi_x: MatRef<'_, Complex64>,
    psi_prime_x: MatRef<'_, Complex64>,
    gamma: Option<f64>,
) -> Result<KoopmanApproximation> {
    check_dim(psi_x.nrows(), psi_prime_x.nrows())?;
    check_dim(psi_x.ncols(), psi_prime_x.ncols())?;
    let g = hermitian_part(&gram_product(psi_x, psi_x)?);
    let h = gram_product(psi_x, psi_prime_x)?;
    let gamma = gamma.unwrap_or_else(|| default_gamma(g.as_ref()));
    let matrix = regularized_solve(g.as_ref(), gamma, h.as_ref())?;
    Ok(KoopmanApproximation {
        matrix,
        kind: OperatorKind::GedmdGenerator,
        delta_t: None,
        gamma,
    })
}

/// How generator eigenvalues relate to semigroup eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Conversion {
    /// `λ = (μ − 1)/Δt`.
    #[default]
    Linearized,
    /// `λ = log(μ)/Δt`.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    GeneratorToSemigroup,
    SemigroupToGenerator,
}

/// `μ = e^{Δt λ}` or `λ = log(μ)/Δt` (principal branch).
pub fn convert_eigs(values: &[Complex64], delta_t: f64, direction: Direction) -> Result<Vec<Complex64>> {
    if !(delta_t > 0.0) {
        return Err(Error::InvalidArgument(format!("delta_t must be positive, got {delta_t}")));
    }
    values
        .iter()
        .map(|&v| match direction {
            Direction::GeneratorToSemigroup => Ok((v * delta_t).exp()),
            Direction::SemigroupToGenerator => {
                if v == zero() {
                    Err(Error::Domain("logarithm of a zero eigenvalue".into()))
                } else {
                    Ok(v.ln() / delta_t)
                }
            }
        })
        .collect()
}

/// Eigenvalues with coefficient vectors of the eigenfunctions.
#[derive(Debug, Clone)]
pub struct SpectralResult {
    /// Descending `|μ|`.
    pub semigroup_eigs: Vec<Complex64>,
    pub generator_eigs: Vec<Complex64>,
    /// Column `k` holds the dictionary coefficients of eigenfunction `k`,
    /// scaled so that `v* Ĝ v = 1` with its largest entry real and positive.
    pub coeffs: Mat<Complex64>,
    pub delta_t: f64,
    pub conversion: Conversion,
}

impl SpectralResult {
    pub fn len(&self) -> usize {
        self.semigroup_eigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semigroup_eigs.is_empty()
    }

    pub fn column(&self, k: usize) -> Vec<Complex64> {
        self.coeffs.col(k).iter().copied().collect()
    }
}

fn mu_order(a: Complex64, b: Complex64) -> std::cmp::Ordering {
    let (ma, mb) = (a.norm(), b.norm());
    let tol = ORDER_TIE_TOL * ma.max(mb).max(1.0);
    if (ma - mb).abs() > tol {
        return mb.partial_cmp(&ma).unwrap_or(std::cmp::Ordering::Equal);
    }
    if (a.re - b.re).abs() > tol {
        return b.re.partial_cmp(&a.re).unwrap_or(std::cmp::Ordering::Equal);
    }
    a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal)
}

/// Scales `v` to unit `v* G v` (falling back to `v* (G + γI) v` if that
/// vanishes) and rotates it so its largest entry is real and positive.
fn normalize_column(v: &mut [Complex64], g: MatRef<'_, Complex64>, gamma: f64) {
    let n = v.len();
    let mut q = 0.0;
    for i in 0..n {
        let mut row = zero();
        for j in 0..n {
            row += g[(i, j)] * v[j];
        }
        q += (v[i].conj() * row).re;
    }
    let norm2: f64 = v.iter().map(|c| c.norm_sqr()).sum();
    if !(q > 1e-300) {
        q += gamma * norm2;
    }
    let scale = if q > 0.0 { 1.0 / q.sqrt() } else { 1.0 };
    let big = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let pivot = v
        .iter()
        .position(|c| c.norm() >= big * (1.0 - 1e-12))
        .unwrap_or(0);
    let phase = if v[pivot].norm() > 0.0 {
        v[pivot].conj() / v[pivot].norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    for c in v.iter_mut() {
        *c = *c * phase * scale;
    }
}

fn assemble_result(
    mut pairs: Vec<(Complex64, Complex64, Vec<Complex64>)>,
    g: MatRef<'_, Complex64>,
    gamma: f64,
    delta_t: f64,
    conversion: Conversion,
) -> SpectralResult {
    pairs.sort_by(|a, b| mu_order(a.0, b.0));
    let n = g.nrows();
    let k = pairs.len();
    let mut coeffs = Mat::<Complex64>::zeros(n, k);
    let mut mus = Vec::with_capacity(k);
    let mut lambdas = Vec::with_capacity(k);
    for (c, (mu, lambda, mut v)) in pairs.into_iter().enumerate() {
        normalize_column(&mut v, g, gamma);
        for (i, x) in v.into_iter().enumerate() {
            coeffs[(i, c)] = x;
        }
        mus.push(mu);
        lambdas.push(lambda);
    }
    SpectralResult {
        semigroup_eigs: mus,
        generator_eigs: lambdas,
        coeffs,
        delta_t,
        conversion,
    }
}

fn generator_from_mu(mu: Complex64, lin: Complex64, delta_t: f64, conversion: Conversion) -> Complex64 {
    match conversion {
        Conversion::Linearized => lin,
        Conversion::Exponential => {
            if mu == zero() {
                Complex64::new(f64::NEG_INFINITY, 0.0)
            } else {
                mu.ln() / delta_t
            }
        }
    }
}

/// Solves `Ĥ v = λ (Ĝ + γI) v` by whitening with the Cholesky factor of
/// `Ĝ + γI`, then reports `μ = 1 + Δt λ` and the generator eigenvalue under
/// `conversion`.
pub fn spectrum(gp: &GramPair, conversion: Conversion) -> Result<SpectralResult> {
    let llt = cholesky(gp.g.as_ref(), gp.gamma)?;
    let l = llt.L();
    // M = L⁻¹ Ĥ L⁻*
    let mut x = gp.h.clone();
    solve_lower_triangular_in_place(l, x.as_mut(), Par::Seq);
    let mut y = x.adjoint().to_owned();
    solve_lower_triangular_in_place(l, y.as_mut(), Par::Seq);
    let whitened = y.adjoint().to_owned();
    let evd = whitened.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let mut w = evd.U().to_owned();
    solve_upper_triangular_in_place(l.adjoint(), w.as_mut(), Par::Seq);
    let s = evd.S();
    let dt = gp.delta_t;
    let pairs = (0..gp.dim())
        .map(|k| {
            let lambda = s[k];
            let mu = Complex64::new(1.0, 0.0) + lambda * dt;
            let gen = generator_from_mu(mu, lambda, dt, conversion);
            (mu, gen, w.col(k).iter().copied().collect())
        })
        .collect();
    Ok(assemble_result(pairs, gp.g.as_ref(), gp.gamma, dt, conversion))
}

/// Spectrum of the Galerkin matrix restricted to the numerically resolved
/// span of the dictionary.
///
/// With `D` the inverse square root of `diag Ĝ`, `DĜD = QΛQ*` is whitened by
/// `W = D Q_r Λ_r^{-1/2}`, keeping eigenvalues above `rank_tol · max Λ`, and the reduced matrix `W* T W` is diagonalized. `T` is
/// `Ĥ` for SDMD and gEDMD (a generator, `μ = 1 + Δt λ`) and `Ĉ = Ψ_X* Ψ_Y / m`
/// for EDMD (a semigroup). Directions of `Ĝ` below the cutoff carry no data
/// and would otherwise surface as spurious modes at `μ ≈ 1`; learned
/// dictionaries produce many of them. When `constant` names the index of the
/// constant observable, that direction is always kept and only its
/// `Ĝ`-orthogonal complement is truncated, so the exact constant eigenpair
/// survives. Returns one column per kept direction.
pub fn truncated_spectrum(
    g: MatRef<'_, Complex64>,
    target: MatRef<'_, Complex64>,
    kind: OperatorKind,
    delta_t: f64,
    rank_tol: f64,
    constant: Option<usize>,
    conversion: Conversion,
) -> Result<SpectralResult> {
    check_dim(g.nrows(), g.ncols())?;
    check_dim(g.nrows(), target.nrows())?;
    check_dim(g.ncols(), target.ncols())?;
    if !(delta_t > 0.0) {
        return Err(Error::InvalidArgument(format!("delta_t must be positive, got {delta_t}")));
    }
    if !(0.0..1.0).contains(&rank_tol) {
        return Err(Error::InvalidArgument(format!("rank_tol must lie in [0, 1), got {rank_tol}")));
    }
    let n = g.nrows();
    let gh = hermitian_part(&g.to_owned());
    // Basis of the complement: every other coordinate made Ĝ-orthogonal to the pinned one.
    let (pinned, z) = match constant {
        Some(c) => {
            if c >= n {
                return Err(Error::InvalidArgument(format!("constant index {c} out of range for N = {n}")));
            }
            let gcc = gh[(c, c)].re;
            if !(gcc > 0.0) {
                return Err(Error::SingularGram { gamma: 0.0 });
            }
            let others: Vec<usize> = (0..n).filter(|&j| j != c).collect();
            let z = Mat::from_fn(n, n - 1, |i, k| {
                let j = others[k];
                if i == j {
                    Complex64::new(1.0, 0.0)
                } else if i == c {
                    -gh[(c, j)] / gcc
                } else {
                    zero()
                }
            });
            let u = Mat::from_fn(n, 1, |i, _| if i == c { Complex64::new(1.0 / gcc.sqrt(), 0.0) } else { zero() });
            (Some(u), z)
        }
        None => (None, Mat::<Complex64>::identity(n, n)),
    };
    let gz = hermitian_part(&(z.adjoint() * &gh * &z));
    let nz = gz.nrows();
    // Unit-diagonal scaling first so the cutoff does not depend on feature magnitudes.
    let d: Vec<f64> = (0..nz)
        .map(|i| {
            let gi = gz[(i, i)].re;
            if gi > 0.0 { 1.0 / gi.sqrt() } else { 0.0 }
        })
        .collect();
    let scaled = Mat::from_fn(nz, nz, |i, j| gz[(i, j)] * (d[i] * d[j]));
    let evd = scaled
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let lam = evd.S().column_vector();
    let q = evd.U();
    let top = (0..nz).map(|i| lam[i].re).fold(0.0, f64::max);
    if !(top > 0.0) && pinned.is_none() {
        return Err(Error::SingularGram { gamma: 0.0 });
    }
    let keep: Vec<usize> = (0..nz).filter(|&i| top > 0.0 && lam[i].re > rank_tol * top).collect();
    let wz = Mat::from_fn(nz, keep.len(), |i, j| q[(i, keep[j])] * (d[i] / lam[keep[j]].re.sqrt()));
    let wz = &z * &wz;
    let w = match &pinned {
        Some(u) => Mat::from_fn(n, wz.ncols() + 1, |i, j| if j == 0 { u[(i, 0)] } else { wz[(i, j - 1)] }),
        None => wz,
    };
    let keep_len = w.ncols();
    let reduced = w.adjoint() * target * &w;
    let red = reduced.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let v = &w * red.U();
    let s = red.S();
    let one = Complex64::new(1.0, 0.0);
    let pairs = (0..keep_len)
        .map(|k| {
            let e = s[k];
            let (mu, gen) = match kind {
                OperatorKind::EdmdSemigroup => (e, generator_from_mu(e, (e - one) / delta_t, delta_t, conversion)),
                OperatorKind::SdmdSemigroup => {
                    let mu = one + e * delta_t;
                    (mu, generator_from_mu(mu, e, delta_t, conversion))
                }
                OperatorKind::GedmdGenerator => match conversion {
                    Conversion::Linearized => (one + e * delta_t, e),
                    Conversion::Exponential => ((e * delta_t).exp(), e),
                },
            };
            (mu, gen, v.col(k).iter().copied().collect())
        })
        .collect();
    Ok(assemble_result(pairs, g, 0.0, delta_t, conversion))
}

/// Spectrum of an explicit operator matrix.
///
/// Semigroup estimates report their eigenvalues as `μ` and derive `λ` with
/// `conversion`; generator estimates do the reverse using `delta_t`
/// (`μ = 1 + Δt λ` when linearized, `e^{Δt λ}` otherwise). `g` is only used
/// to normalize the coefficient columns.
pub fn operator_spectrum(
    op: &KoopmanApproximation,
    g: MatRef<'_, Complex64>,
    delta_t: f64,
    conversion: Conversion,
) -> Result<SpectralResult> {
    check_dim(op.matrix.nrows(), g.nrows())?;
    if !(delta_t > 0.0) {
        return Err(Error::InvalidArgument(format!("delta_t must be positive, got {delta_t}")));
    }
    let evd = op.matrix.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let u = evd.U();
    let s = evd.S();
    let pairs = (0..op.matrix.nrows())
        .map(|k| {
            let e = s[k];
            let (mu, gen) = if op.kind.is_generator() {
                let mu = match conversion {
                    Conversion::Linearized => Complex64::new(1.0, 0.0) + e * delta_t,
                    Conversion::Exponential => (e * delta_t).exp(),
                };
                (mu, e)
            } else {
                let lin = (e - Complex64::new(1.0, 0.0)) / delta_t;
                (e, generator_from_mu(e, lin, delta_t, conversion))
            };
            (mu, gen, u.col(k).iter().copied().collect())
        })
        .collect();
    Ok(assemble_result(pairs, g, op.gamma, delta_t, conversion))
}

/// One reference/estimate pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeMatch {
    pub reference_index: usize,
    pub estimate_index: usize,
    pub reference: Complex64,
    pub estimate: Complex64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    /// In the order the references were processed (ascending `|λ_ref|`).
    pub pairs: Vec<ModeMatch>,
    /// Estimates left without a partner.
    pub surplus: Vec<usize>,
}

impl MatchReport {
    /// Pair for reference `i`, if any.
    pub fn for_reference(&self, i: usize) -> Option<&ModeMatch> {
        self.pairs.iter().find(|p| p.reference_index == i)
    }

    pub fn max_error(&self) -> f64 {
        self.pairs.iter().map(|p| p.error).fold(0.0, f64::max)
    }
}

/// True when eigenvector column `k` is (numerically) the constant observable `c`.
pub fn is_constant_mode(result: &SpectralResult, k: usize, c: usize) -> bool {
    let v = result.coeffs.col(k);
    let lead = v[c].norm();
    lead > 0.0 && (0..v.nrows()).all(|i| i == c || v[i].norm() <= 1e-8 * lead)
}

/// Mode indices by slowest timescale first: ascending `|Re λ|`, then ascending
/// `|Im λ|`, then ascending index. Spurious growing modes rank by their rate. The constant mode is dropped when `constant`
/// gives its dictionary index.
pub fn slow_modes(result: &SpectralResult, constant: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..result.len())
        .filter(|&k| constant.is_none_or(|c| !is_constant_mode(result, k, c)))
        .collect();
    idx.sort_by(|&a, &b| {
        let (la, lb) = (result.generator_eigs[a], result.generator_eigs[b]);
        la.re
            .abs()
            .partial_cmp(&lb.re.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(la.im.abs().partial_cmp(&lb.im.abs()).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy nearest-neighbour pairing of estimates to references, visiting
/// references by ascending modulus; each estimate is used at most once.
pub fn match_modes(estimates: &[Complex64], references: &[Complex64]) -> Result<MatchReport> {
    if estimates.is_empty() || references.is_empty() {
        return Err(Error::InvalidArgument("mode matching needs non-empty lists".into()));
    }
    let mut order: Vec<usize> = (0..references.len()).collect();
    order.sort_by(|&a, &b| {
        references[a]
            .norm()
            .partial_cmp(&references[b].norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut used = vec![false; estimates.len()];
    let mut pairs = Vec::new();
    for r in order {
        let best = (0..estimates.len())
            .filter(|&e| !used[e])
            .min_by(|&a, &b| {
                (estimates[a] - references[r])
                    .norm()
                    .partial_cmp(&(estimates[b] - references[r]).norm())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        let Some(e) = best else { break };
        used[e] = true;
        pairs.push(ModeMatch {
            reference_index: r,
            estimate_index: e,
            reference: references[r],
            estimate: estimates[e],
            error: (estimates[e] - references[r]).norm(),
        });
    }
    let surplus = (0..estimates.len()).filter(|&e| !used[e]).collect();
    Ok(MatchReport { pairs, surplus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{DictionarySpec, FixedDictionary};
    use crate::models::SdeModel;
    use crate::rng;
    use crate::stats;
    use rand::Rng as _;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn ou() -> SdeModel {
        SdeModel::ou(1.0, 0.0, 0.1).unwrap()
    }

    fn mono(dim: usize, deg: usize) -> FixedDictionary {
        FixedDictionary::new(DictionarySpec::Monomial { dim, max_degree: deg }).unwrap()
    }

    fn hand() -> (FixedDictionary, SnapshotEnsemble) {
        let e = SnapshotEnsemble::from_pairs(1, vec![-1.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0], 0.1).unwrap();
        (mono(1, 1), e)
    }

    fn assert_mat(a: &Mat<Complex64>, b: &[&[f64]], tol: f64) {
        for (i, row) in b.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((a[(i, j)] - c(*v)).norm() <= tol, "({i},{j}): {} vs {v}", a[(i, j)]);
            }
        }
    }

    #[test]
    fn hand_instance() {
        let (d, e) = hand();
        let model = ou();
        let dm = assemble_data_matrices(&d, &e, Some(&model), Action::Stochastic).unwrap();
        assert_mat(&dm.psi_x, &[&[1.0, -1.0], &[1.0, 0.0], &[1.0, 1.0]], 0.0);
        let pp = dm.psi_prime_x.unwrap();
        assert_mat(&pp, &[&[0.0, 1.0], &[0.0, 0.0], &[0.0, -1.0]], 0.0);
        assert_eq!(dm.psi_y, dm.psi_x);

        let gp = gram(dm.psi_x.as_ref(), pp.as_ref(), Some(0.0), 0.1).unwrap();
        assert_mat(&gp.g, &[&[1.0, 0.0], &[0.0, 2.0 / 3.0]], 1e-15);
        assert_mat(&gp.h, &[&[0.0, 0.0], &[0.0, -2.0 / 3.0]], 1e-15);
        let k = sdmd_operator(&gp).unwrap();
        assert_mat(&k.matrix, &[&[1.0, 0.0], &[0.0, 0.9]], 1e-15);
        let a = gedmd_operator(dm.psi_x.as_ref(), pp.as_ref(), Some(0.0)).unwrap();
        assert_mat(&a.matrix, &[&[0.0, 0.0], &[0.0, -1.0]], 1e-15);

        let s = spectrum(&gp, Conversion::Linearized).unwrap();
        assert!((s.generator_eigs[0] - c(0.0)).norm() < 1e-12);
        assert!((s.generator_eigs[1] - c(-1.0)).norm() < 1e-12);
        assert!((s.semigroup_eigs[1] - c(0.9)).norm() < 1e-12);
        // Second eigenfunction ∝ x.
        let v = s.column(1);
        assert!(v[0].norm() < 1e-12);
        assert!((v[1] - c((1.5f64).sqrt())).norm() < 1e-12);
    }

    #[test]
    fn truncated_spectrum_matches_full_rank_case() {
        let (d, e) = hand();
        let dm = assemble_data_matrices(&d, &e, Some(&ou()), Action::Stochastic).unwrap();
        let pp = dm.psi_prime_x.unwrap();
        let gp = gram(dm.psi_x.as_ref(), pp.as_ref(), Some(0.0), 0.1).unwrap();
        let full = spectrum(&gp, Conversion::Linearized).unwrap();
        let t = truncated_spectrum(
            gp.g.as_ref(),
            gp.h.as_ref(),
            OperatorKind::SdmdSemigroup,
            0.1,
            1e-10,
            None,
            Conversion::Linearized,
        )
        .unwrap();
        assert_eq!(t.len(), full.len());
        for k in 0..t.len() {
            assert!((t.semigroup_eigs[k] - full.semigroup_eigs[k]).norm() < 1e-12);
            assert!((t.generator_eigs[k] - full.generator_eigs[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn truncated_spectrum_drops_redundant_directions() {
        // Third column duplicates the second, so the Gram has rank 2.
        let xs = [-1.0, -0.3, 0.4, 1.0];
        let psi = Mat::from_fn(4, 3, |i, j| c(if j == 0 { 1.0 } else { xs[i] }));
        let act = Mat::from_fn(4, 3, |i, j| c(if j == 0 { 0.0 } else { -xs[i] }));
        let m = 4.0;
        let g = psi.adjoint() * &psi * faer::Scale(c(1.0 / m));
        let h = psi.adjoint() * &act * faer::Scale(c(1.0 / m));
        let t = truncated_spectrum(
            g.as_ref(),
            h.as_ref(),
            OperatorKind::GedmdGenerator,
            0.1,
            1e-10,
            None,
            Conversion::Linearized,
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert!((t.generator_eigs[0] - c(0.0)).norm() < 1e-12);
        assert!((t.generator_eigs[1] - c(-1.0)).norm() < 1e-12);
    }

    #[test]
    fn truncated_spectrum_keeps_the_constant_and_ignores_scale() {
        // Columns 1 and 2 are nearly collinear; column 2 is also rescaled by 1e6.
        let xs = [-1.0, -0.3, 0.4, 1.0, 0.1];
        let f = |x: f64, j: usize| match j {
            0 => 1.0,
            1 => x,
            _ => 1e6 * (x + 1e-9 * x * x),
        };
        let psi = Mat::from_fn(5, 3, |i, j| c(f(xs[i], j)));
        let act = Mat::from_fn(5, 3, |i, j| c(if j == 0 { 0.0 } else { -f(xs[i], j) }));
        let g = psi.adjoint() * &psi * faer::Scale(c(0.2));
        let h = psi.adjoint() * &act * faer::Scale(c(0.2));
        let t = truncated_spectrum(
            g.as_ref(),
            h.as_ref(),
            OperatorKind::SdmdSemigroup,
            0.1,
            1e-6,
            Some(0),
            Conversion::Linearized,
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.generator_eigs[0], c(0.0));
        assert!((t.generator_eigs[1] - c(-1.0)).norm() < 1e-9);
        let v = t.column(0);
        assert!((v[0] - c(1.0)).norm() < 1e-12 && v[1].norm() < 1e-12 && v[2].norm() < 1e-12);
    }

    #[test]
    fn slow_modes_skip_the_constant() {
        let (d, e) = hand();
        let dm = assemble_data_matrices(&d, &e, Some(&ou()), Action::Stochastic).unwrap();
        let pp = dm.psi_prime_x.unwrap();
        let gp = gram(dm.psi_x.as_ref(), pp.as_ref(), Some(0.0), 0.1).unwrap();
        let s = spectrum(&gp, Conversion::Linearized).unwrap();
        assert_eq!(slow_modes(&s, None), vec![0, 1]);
        assert_eq!(slow_modes(&s, Some(0)), vec![1]);
        assert!(is_constant_mode(&s, 0, 0));
        assert!(!is_constant_mode(&s, 1, 0));
    }

    #[test]
    fn growing_modes_rank_by_rate() {
        let eigs = vec![c(0.0), Complex64::new(0.02, 5.0), c(-0.01), c(-1.0)];
        let s = SpectralResult {
            semigroup_eigs: eigs.iter().map(|z| c(1.0) + z * 0.1).collect(),
            generator_eigs: eigs,
            coeffs: Mat::identity(4, 4),
            delta_t: 0.1,
            conversion: Conversion::Linearized,
        };
        assert_eq!(slow_modes(&s, Some(0)), vec![2, 1, 3]);
    }

    #[test]
    fn single_point_needs_regularization() {
        let psi = Mat::from_fn(1, 2, |_, j| c([1.0, 0.5][j]));
        let gp = gram(psi.as_ref(), psi.as_ref(), Some(1e-6), 0.1);
        assert!(gp.is_ok());
        assert!(matches!(
            gram(psi.as_ref(), psi.as_ref(), Some(-1.0), 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stationary_dictionary_gives_identity() {
        let g = Mat::<Complex64>::identity(3, 3);
        let gp = GramPair::from_matrices(g, Mat::zeros(3, 3), 10, None, 0.1).unwrap();
        let k = sdmd_operator(&gp).unwrap();
        assert_eq!(k.matrix, Mat::<Complex64>::identity(3, 3));
    }

    #[test]
    fn diagonal_spectrum() {
        let gp = GramPair::from_matrices(
            Mat::identity(2, 2),
            Mat::from_fn(2, 2, |i, j| if i == j && i == 1 { c(-1.0) } else { c(0.0) }),
            2,
            Some(0.0),
            0.1,
        )
        .unwrap();
        let s = spectrum(&gp, Conversion::Linearized).unwrap();
        assert_eq!(s.semigroup_eigs, vec![c(1.0), c(0.9)]);
        assert_eq!(s.generator_eigs, vec![c(0.0), c(-1.0)]);
        let s = spectrum(&gp, Conversion::Exponential).unwrap();
        assert!((s.generator_eigs[1] - c(0.9f64.ln() / 0.1)).norm() < 1e-14);
    }

    fn random_instance(seed: u64, m: usize, n: usize) -> (Mat<Complex64>, Mat<Complex64>, Mat<Complex64>) {
        let mut r = rng::stream(seed, 0);
        let mut draw = |rows: usize| {
            Mat::from_fn(rows, n, |_, _| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5))
        };
        let mut psi = draw(m);
        for i in 0..m {
            psi[(i, 0)] = c(1.0);
        }
        let mut prime = draw(m);
        for i in 0..m {
            prime[(i, 0)] = c(0.0);
        }
        let y = draw(m);
        (psi, prime, y)
    }

    #[test]
    fn identity_between_sdmd_and_gedmd() {
        for seed in 0..5 {
            let (psi, prime, _) = random_instance(seed, 40, 5);
            let gp = gram(psi.as_ref(), prime.as_ref(), None, 0.05).unwrap();
            let k = sdmd_operator(&gp).unwrap();
            let a = gedmd_operator(psi.as_ref(), prime.as_ref(), Some(gp.gamma)).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    assert!((k.matrix[(i, j)] - c(id) - a.matrix[(i, j)] * 0.05).norm() <= 1e-13);
                }
            }
            let scaled = GramPair::from_matrices(gp.g.clone(), &gp.h * faer::Scale(c(3.0)), gp.m, Some(gp.gamma), 0.05).unwrap();
            let k3 = sdmd_operator(&scaled).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    let lhs = k3.matrix[(i, j)] - c(id);
                    let rhs = (k.matrix[(i, j)] - c(id)) * 3.0;
                    assert!((lhs - rhs).norm() <= 1e-13 * rhs.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn whitened_spectrum_matches_operator_eigenvalues() {
        for seed in 0..5 {
            let (psi, prime, _) = random_instance(100 + seed, 60, 6);
            let gp = gram(psi.as_ref(), prime.as_ref(), None, 0.1).unwrap();
            let k = sdmd_operator(&gp).unwrap();
            let direct = k.matrix.eigenvalues().unwrap();
            let s = spectrum(&gp, Conversion::Linearized).unwrap();
            let rep = match_modes(&direct, &s.semigroup_eigs).unwrap();
            assert!(rep.max_error() <= 1e-10, "{}", rep.max_error());
            // Constant eigenpair.
            assert!((s.semigroup_eigs.iter().any(|m| (m - c(1.0)).norm() < 1e-10)));
            let mut e0 = Mat::<Complex64>::zeros(6, 1);
            e0[(0, 0)] = c(1.0);
            let ke = &k.matrix * &e0;
            for i in 0..6 {
                assert!((ke[(i, 0)] - e0[(i, 0)]).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_eigenvector_is_exact() {
        let (psi, prime, _) = random_instance(9, 50, 4);
        for gamma in [0.0, 1e-6, 1e-2] {
            let gp = gram(psi.as_ref(), prime.as_ref(), Some(gamma), 0.1).unwrap();
            let s = spectrum(&gp, Conversion::Linearized).unwrap();
            let k = s
                .semigroup_eigs
                .iter()
                .position(|m| (m - c(1.0)).norm() < 1e-12)
                .expect("constant mode");
            let v = s.column(k);
            for x in &v[1..] {
                assert!(x.norm() <= 1e-12 * v[0].norm());
            }
        }
    }

    #[test]
    fn edmd_is_the_least_squares_minimizer() {
        let (psi, _, y) = random_instance(4, 8, 2);
        let k = edmd_operator(psi.as_ref(), y.as_ref(), Some(0.0), 0.1).unwrap();
        let resid = |km: &Mat<Complex64>| (&y - &psi * km).norm_l2();
        let base = resid(&k.matrix);
        let mut r = rng::stream(4, 1);
        for _ in 0..200 {
            let p = Mat::from_fn(2, 2, |_, _| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5) * 1e-3);
            assert!(resid(&(&k.matrix + &p)) >= base);
        }
        let id = edmd_operator(psi.as_ref(), psi.as_ref(), Some(1e-14), 0.1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id.matrix[(i, j)] - c(e)).norm() < 1e-10);
            }
        }
        let zero = Mat::<Complex64>::zeros(8, 2);
        let a = gedmd_operator(psi.as_ref(), zero.as_ref(), None).unwrap();
        assert_eq!(a.matrix, Mat::<Complex64>::zeros(2, 2));
        // Rank-deficient data with γ > 0.
        let dup = Mat::from_fn(8, 2, |i, _| psi[(i, 0)]);
        assert!(edmd_operator(dup.as_ref(), y.as_ref(), Some(1e-3), 0.1).is_ok());
    }

    #[test]
    fn conversion_examples_and_roundtrip() {
        assert_eq!(convert_eigs(&[c(0.0)], 0.3, Direction::GeneratorToSemigroup).unwrap()[0], c(1.0));
        let mu = convert_eigs(&[c(-1.0)], 0.1, Direction::GeneratorToSemigroup).unwrap()[0];
        assert!((mu.re - 0.904837418035960).abs() < 1e-12);
        assert!(matches!(
            convert_eigs(&[c(0.0)], 0.1, Direction::SemigroupToGenerator),
            Err(Error::Domain(_))
        ));
        let mut r = rng::stream(77, 0);
        let dt = 0.1;
        let lam: Vec<Complex64> = (0..1000)
            .map(|_| Complex64::new(-5.0 + 10.0 * r.random::<f64>(), (r.random::<f64>() * 2.0 - 1.0) * 0.99 * std::f64::consts::PI / dt))
            .collect();
        let mu = convert_eigs(&lam, dt, Direction::GeneratorToSemigroup).unwrap();
        let back = convert_eigs(&mu, dt, Direction::SemigroupToGenerator).unwrap();
        for (a, b) in lam.iter().zip(&back) {
            assert!((a - b).norm() <= 1e-14 * a.norm().max(1.0) * 10.0);
        }
    }

    #[test]
    fn ordering_is_by_modulus_then_real_then_imag() {
        let mut v = vec![c(0.5), Complex64::new(0.0, 1.0), c(-1.0), c(1.0), Complex64::new(0.0, -1.0)];
        v.sort_by(|a, b| mu_order(*a, *b));
        assert_eq!(
            v,
            vec![c(1.0), Complex64::new(0.0, -1.0), Complex64::new(0.0, 1.0), c(-1.0), c(0.5)]
        );
    }

    #[test]
    fn match_modes_examples() {
        let refs = [c(0.0), c(-1.0)];
        let rep = match_modes(&refs, &refs).unwrap();
        assert_eq!(rep.max_error(), 0.0);
        let rep = match_modes(&[c(-1.02), c(0.001)], &refs).unwrap();
        assert_eq!(rep.for_reference(0).unwrap().estimate_index, 1);
        assert_eq!(rep.for_reference(1).unwrap().estimate_index, 0);
        let rep = match_modes(&[c(-1.02), c(0.001), c(-7.0)], &refs).unwrap();
        assert_eq!(rep.surplus, vec![2]);
        assert!(match_modes(&[], &refs).is_err());
    }

    #[test]
    fn gram_is_thread_count_independent() {
        let (psi, prime, _) = random_instance(31, 3000, 4);
        let a = gram_product(psi.as_ref(), prime.as_ref()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| gram_product(psi.as_ref(), prime.as_ref()).unwrap());
        assert_eq!(a, b);
    }

    /// `E[x^k]` for `x ~ U[-2, 2]`.
    fn uniform_moment(k: usize) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            2f64.powi(k as i32) / (k + 1) as f64
        }
    }

    /// Exact `G`, `H` for monomials on `U[-2, 2]` under OU(θ=1, μ0=0, σ).
    pub(crate) fn ou_uniform_grams(deg: usize, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let n = deg + 1;
        let mut g = vec![0.0; n * n];
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = uniform_moment(i + j);
                // A x^j = -j x^j + ½σ² j(j-1) x^{j-2}
                let mut v = -(j as f64) * uniform_moment(i + j);
                if j >= 2 {
                    v += 0.5 * sigma * sigma * (j * (j - 1)) as f64 * uniform_moment(i + j - 2);
                }
                h[i * n + j] = v;
            }
        }
        (g, h)
    }

    #[test]
    fn quadrature_oracle_for_ou_monomials() {
        let deg = 5;
        let n = deg + 1;
        let m = 100_000;
        let mut r = rng::stream(2024, 0);
        let pts: Vec<f64> = (0..m).map(|_| -2.0 + 4.0 * r.random::<f64>()).collect();
        let d = mono(1, deg);
        let model = ou();
        let psi = eval_matrix(&d, &pts).unwrap();
        let prime = action_matrix(&d, &model, &pts, Action::Stochastic).unwrap();
        let gp = gram(psi.as_ref(), prime.as_ref(), None, 0.1).unwrap();
        let (g, h) = ou_uniform_grams(deg, 0.1);
        for i in 0..n {
            for j in 0..n {
                let gs: Vec<f64> = (0..m).map(|k| psi[(k, i)].re * psi[(k, j)].re).collect();
                let hs: Vec<f64> = (0..m).map(|k| psi[(k, i)].re * prime[(k, j)].re).collect();
                let (se_g, se_h) = (stats::std_error(&gs), stats::std_error(&hs));
                assert!((gp.g[(i, j)].re - g[i * n + j]).abs() <= 4.0 * se_g + 1e-12, "G({i},{j})");
                assert!((gp.h[(i, j)].re - h[i * n + j]).abs() <= 4.0 * se_h + 1e-12, "H({i},{j})");
            }
        }
        let s = spectrum(&gp, Conversion::Linearized).unwrap();
        let refs: Vec<Complex64> = (0..n).map(|k| c(-(k as f64))).collect();
        let rep = match_modes(&s.generator_eigs, &refs).unwrap();
        assert!(rep.max_error() <= 0.05, "{rep:?}");
    }

    #[test]
    fn gram_concentration_rate() {
        let deg = 3;
        let n = deg + 1;
        let (g, _) = ou_uniform_grams(deg, 0.1);
        let d = mono(1, deg);
        let err = |m: usize, trial: u64| {
            let mut r = rng::stream(500 + m as u64, trial);
            let pts: Vec<f64> = (0..m).map(|_| -2.0 + 4.0 * r.random::<f64>()).collect();
            let psi = eval_matrix(&d, &pts).unwrap();
            let gh = gram_product(psi.as_ref(), psi.as_ref()).unwrap();
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += (gh[(i, j)].re - g[i * n + j]).powi(2);
                }
            }
            s.sqrt()
        };
        let mean_err = |m: usize| stats::mean(&(0..50).map(|t| err(m, t)).collect::<Vec<_>>());
        let ratio = mean_err(4000) / mean_err(1000);
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }
}
