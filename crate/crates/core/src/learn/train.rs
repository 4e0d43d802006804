//! Alternating optimization of dictionary parameters and Koopman matrix.
//!
//! Each outer epoch takes `inner_steps` gradient steps on the network with
//! the matrix `K` held fixed, then replaces `K` by the closed-form minimizer
//! for the current dictionary. The loss is `‖T − Ψ_X K‖_F² + γ‖K‖_F²` with
//! target `T = Ψ_Y` (SDMD-DL, EDMD-DL) or `T = Ψ'_X` (gEDMD-DL), summed over
//! samples.

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{channel_count, hessian_pairs, NetworkSpec, Order, TrainableDictionary, CHUNK};
use crate::dictionary::Observables;
use crate::error::{check_dim, Error, Result};
use crate::koopman::{operator_spectrum, truncated_spectrum, Conversion, KoopmanApproximation, OperatorKind, SpectralResult};
use crate::models::SdeCoefficients;
use crate::simulate::SnapshotEnsemble;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// `K = I + Δt (Ψ_X*Ψ_X + γI)⁻¹ Ψ_X*Ψ'_X`, fitted against `Ψ_Y`.
    SdmdDl,
    /// `K = (Ψ_X*Ψ_X + γI)⁻¹ Ψ_X*Ψ_Y`.
    EdmdDl,
    /// `K = (Ψ_X*Ψ_X + γI)⁻¹ Ψ_X*Ψ'_X`, fitted against `Ψ'_X`.
    GedmdDl,
}

impl Method {
    pub fn needs_coefficients(self) -> bool {
        !matches!(self, Method::EdmdDl)
    }

    pub fn kind(self) -> OperatorKind {
        match self {
            Method::SdmdDl => OperatorKind::SdmdSemigroup,
            Method::EdmdDl => OperatorKind::EdmdSemigroup,
            Method::GedmdDl => OperatorKind::GedmdGenerator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Tikhonov weight on `‖K‖_F²`.
    pub gamma: f64,
    pub outer_epochs: usize,
    pub inner_steps: usize,
    /// Rows per gradient step; 0 uses every sample.
    #[serde(default)]
    pub batch_size: usize,
    /// Heavy-ball momentum 0.9.
    #[serde(default)]
    pub momentum: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and ≥ 0".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig("gamma must be finite and ≥ 0".into()));
        }
        if self.outer_epochs == 0 {
            return Err(Error::InvalidConfig("outer_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Snapshot pairs with the SDE coefficients evaluated at the initial states.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub dim: usize,
    pub delta_t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `m × d`.
    pub drift: Option<Vec<f64>>,
    /// `m × d × d`.
    pub cov: Option<Vec<f64>>,
}

impl TrainingData {
    pub fn new(ensemble: &SnapshotEnsemble, coefficients: Option<&dyn SdeCoefficients>) -> Result<Self> {
        let d = ensemble.dim;
        let (drift, cov) = match coefficients {
            Some(c) => {
                check_dim(d, c.dim())?;
                let rows = ensemble
                    .x_points
                    .par_chunks(d)
                    .enumerate()
                    .map(|(i, x)| -> Result<(Vec<f64>, Vec<f64>)> {
                        let b = c.drift(x).map_err(|e| e.at_row(i))?;
                        let a = c.covariance(x).map_err(|e| e.at_row(i))?;
                        Ok((b, a))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (b, a): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
                (Some(b.concat()), Some(a.concat()))
            }
            None => (None, None),
        };
        Ok(Self {
            dim: d,
            delta_t: ensemble.delta_t,
            x: ensemble.x_points.clone(),
            y: ensemble.y_points.clone(),
            drift,
            cov,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn coefficients(&self) -> Result<(&[f64], &[f64])> {
        match (&self.drift, &self.cov) {
            (Some(b), Some(a)) => Ok((b, a)),
            _ => Err(Error::InvalidConfig(
                "this method needs drift and diffusion (analytic or estimated)".into(),
            )),
        }
    }
}

/// `aᵀ b` summed over fixed row blocks in a fixed order.
fn cross(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let m = a.nrows();
    let mut acc = Mat::<f64>::zeros(a.ncols(), b.ncols());
    let mut s = 0;
    while s < m {
        let len = CHUNK.min(m - s);
        matmul(
            acc.as_mut(),
            Accum::Add,
            a.subrows(s, len).transpose(),
            b.subrows(s, len),
            1.0,
            Par::Seq,
        );
        s += len;
    }
    acc
}

fn ridge_solve(psi: MatRef<'_, f64>, rhs_cross: &Mat<f64>, gamma: f64) -> Result<Mat<f64>> {
    let mut g = cross(psi, psi);
    for i in 0..g.nrows() {
        g[(i, i)] += gamma;
    }
    let llt = g.llt(Side::Lower).map_err(|_| Error::SingularGram { gamma })?;
    Ok(llt.solve(rhs_cross))
}

/// Dictionary matrices for the closed-form update and the full loss.
pub struct Evaluated {
    pub psi_x: Mat<f64>,
    /// `Ψ_Y` or `Ψ'_X` depending on the method.
    pub target: Mat<f64>,
    /// `Ψ'_X` when it was computed but is not the loss target (SDMD-DL).
    pub prime: Option<Mat<f64>>,
    pub k: Mat<f64>,
}

impl Evaluated {
    /// Right-hand side of the Galerkin problem: `Ψ_Y` for EDMD-DL, `Ψ'_X` otherwise.
    pub fn galerkin_target(&self) -> &Mat<f64> {
        self.prime.as_ref().unwrap_or(&self.target)
    }
}

/// True when rows `s..e` form one trajectory, i.e. `y_k = x_{k+1}` bitwise.
fn chained(data: &TrainingData, s: usize, e: usize) -> bool {
    let d = data.dim;
    e > s
        && data.y[s * d..(e - 1) * d]
            .iter()
            .zip(&data.x[(s + 1) * d..e * d])
            .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// `x_s … x_{e-1}, y_{e-1}` for a chained block.
fn chain_points(data: &TrainingData, s: usize, e: usize) -> Vec<f64> {
    let d = data.dim;
    let mut pts = data.x[s * d..e * d].to_vec();
    pts.extend_from_slice(&data.y[(e - 1) * d..e * d]);
    pts
}

/// `Ψ_Y`, reusing `Ψ_X` rows when the pairs come from one trajectory.
fn eval_y(dict: &TrainableDictionary, data: &TrainingData, psi_x: &Mat<f64>) -> Result<Mat<f64>> {
    let m = data.len();
    if !chained(data, 0, m) {
        return dict.eval_batch(&data.y);
    }
    let d = data.dim;
    let last = dict.eval_batch(&data.y[(m - 1) * d..])?;
    Ok(Mat::from_fn(m, psi_x.ncols(), |r, j| {
        if r + 1 < m {
            psi_x[(r + 1, j)]
        } else {
            last[(0, j)]
        }
    }))
}

/// Closed-form `K` for the current dictionary.
pub fn closed_form_update(
    dict: &TrainableDictionary,
    data: &TrainingData,
    method: Method,
    gamma: f64,
) -> Result<Evaluated> {
    check_dim(dict.dim, data.dim)?;
    match method {
        Method::EdmdDl => {
            let psi_x = dict.eval_batch(&data.x)?;
            let psi_y = eval_y(dict, data, &psi_x)?;
            let k = ridge_solve(psi_x.as_ref(), &cross(psi_x.as_ref(), psi_y.as_ref()), gamma)?;
            Ok(Evaluated {
                psi_x,
                target: psi_y,
                prime: None,
                k,
            })
        }
        Method::SdmdDl => {
            let (b, a) = data.coefficients()?;
            let (psi_x, prime) = dict.action_batch(&data.x, b, Some(a))?;
            let psi_y = eval_y(dict, data, &psi_x)?;
            let mut k = ridge_solve(psi_x.as_ref(), &cross(psi_x.as_ref(), prime.as_ref()), gamma)?;
            for i in 0..k.nrows() {
                for j in 0..k.ncols() {
                    k[(i, j)] *= data.delta_t;
                }
                k[(i, i)] += 1.0;
            }
            Ok(Evaluated {
                psi_x,
                target: psi_y,
                prime: Some(prime),
                k,
            })
        }
        Method::GedmdDl => {
            let (b, a) = data.coefficients()?;
            let (psi_x, prime) = dict.action_batch(&data.x, b, Some(a))?;
            let k = ridge_solve(psi_x.as_ref(), &cross(psi_x.as_ref(), prime.as_ref()), gamma)?;
            Ok(Evaluated {
                psi_x,
                target: prime,
                prime: None,
                k,
            })
        }
    }
}

fn frobenius2(m: &Mat<f64>) -> f64 {
    let n = m.norm_l2();
    n * n
}

fn residual_loss(ev: &Evaluated, gamma: f64) -> f64 {
    let r = &ev.target - &ev.psi_x * &ev.k;
    frobenius2(&r) + gamma * frobenius2(&ev.k)
}

/// `‖T − Ψ_X K‖_F² + γ‖K‖_F²` over all samples for a given `K`.
pub fn loss_eval(
    dict: &TrainableDictionary,
    k: &Mat<f64>,
    data: &TrainingData,
    method: Method,
    gamma: f64,
) -> Result<f64> {
    let n = dict.len();
    check_dim(n, k.nrows())?;
    check_dim(n, k.ncols())?;
    let (psi_x, target) = match method {
        Method::EdmdDl | Method::SdmdDl => {
            let psi_x = dict.eval_batch(&data.x)?;
            let psi_y = eval_y(dict, data, &psi_x)?;
            (psi_x, psi_y)
        }
        Method::GedmdDl => {
            let (b, a) = data.coefficients()?;
            dict.action_batch(&data.x, b, Some(a))?
        }
    };
    Ok(residual_loss(&Evaluated { psi_x, target, prime: None, k: k.clone() }, gamma))
}

/// Residual part of the loss and its parameter gradient with `K` fixed,
/// restricted to rows `start..end`.
fn loss_and_gradient_rows(
    dict: &TrainableDictionary,
    k: &Mat<f64>,
    data: &TrainingData,
    method: Method,
    start: usize,
    end: usize,
) -> Result<(f64, Vec<f64>)> {
    let d = dict.dim;
    let nl = dict.n_learned();
    let mut grad = vec![0.0; dict.n_params()];
    let mut loss = 0.0;
    let kt = k.transpose().to_owned();
    let learned = |m: &Mat<f64>| m.as_ref().subcols(0, nl).to_owned();
    let mut s = start;
    while s < end {
        let e = (s + CHUNK).min(end);
        let xs = &data.x[s * d..e * d];
        match method {
            Method::EdmdDl | Method::SdmdDl if chained(data, s, e) => {
                // One pass over the shared states; row r + 1 is both x_{r+1} and y_r.
                let pts = chain_points(data, s, e);
                let tape = dict.forward(&pts, Order::Value);
                let all = dict.assemble_values(&pts, &tape.out[0]);
                let n = e - s;
                let psi_x = all.as_ref().subrows(0, n);
                let psi_y = all.as_ref().subrows(1, n);
                let r = psi_y - psi_x * k;
                loss += frobenius2(&r);
                let d_x = learned(&(&r * &kt * -2.0));
                let d_y = learned(&(&r * 2.0));
                let d_all = Mat::from_fn(n + 1, nl, |i, j| {
                    let from_x = if i < n { d_x[(i, j)] } else { 0.0 };
                    let from_y = if i > 0 { d_y[(i - 1, j)] } else { 0.0 };
                    from_x + from_y
                });
                dict.backward(&tape, &[d_all], &mut grad);
            }
            Method::EdmdDl | Method::SdmdDl => {
                let ys = &data.y[s * d..e * d];
                let tx = dict.forward(xs, Order::Value);
                let ty = dict.forward(ys, Order::Value);
                let psi_x = dict.assemble_values(xs, &tx.out[0]);
                let psi_y = dict.assemble_values(ys, &ty.out[0]);
                let r = &psi_y - &psi_x * k;
                loss += frobenius2(&r);
                let d_y = &r * 2.0;
                let d_x = &r * &kt * -2.0;
                dict.backward(&tx, &[learned(&d_x)], &mut grad);
                dict.backward(&ty, &[learned(&d_y)], &mut grad);
            }
            Method::GedmdDl => {
                let (b, a) = data.coefficients()?;
                let b = &b[s * d..e * d];
                let a = &a[s * d * d..e * d * d];
                let tape = dict.forward(xs, Order::Hessian);
                let psi_x = dict.assemble_values(xs, &tape.out[0]);
                let prime = dict.assemble_action(&tape, b, Some(a));
                let r = &prime - &psi_x * k;
                loss += frobenius2(&r);
                let d_prime = &r * 2.0;
                let d_x = &r * &kt * -2.0;
                let rows = e - s;
                let mut d_out = Vec::with_capacity(channel_count(d, Order::Hessian));
                d_out.push(learned(&d_x));
                for i in 0..d {
                    d_out.push(Mat::from_fn(rows, nl, |r, j| b[r * d + i] * d_prime[(r, j)]));
                }
                for &(i, kk) in &hessian_pairs(d) {
                    let w = if i == kk { 0.5 } else { 1.0 };
                    d_out.push(Mat::from_fn(rows, nl, |r, j| w * a[(r * d + i) * d + kk] * d_prime[(r, j)]));
                }
                dict.backward(&tape, &d_out, &mut grad);
            }
        }
        s = e;
    }
    Ok((loss, grad))
}

/// Full loss and its gradient with respect to the network parameters, `K` fixed.
pub fn loss_and_gradient(
    dict: &TrainableDictionary,
    k: &Mat<f64>,
    data: &TrainingData,
    method: Method,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = dict.len();
    check_dim(n, k.nrows())?;
    check_dim(n, k.ncols())?;
    let (loss, grad) = loss_and_gradient_rows(dict, k, data, method, 0, data.len())?;
    Ok((loss + gamma * frobenius2(k), grad))
}

/// Loss, score and selection outcome per outer epoch (1-based epochs).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    /// One score per epoch when a scorer was supplied, else empty.
    pub scores: Vec<f64>,
    pub selected_epoch: Option<usize>,
    pub selection_score: Option<f64>,
}

impl TrainTrace {
    /// `epoch,loss,score` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,score\n");
        for (i, l) in self.losses.iter().enumerate() {
            let score = self.scores.get(i).map(|v| format!("{v:.16e}")).unwrap_or_default();
            s.push_str(&format!("{},{l:.16e},{score}\n", i + 1));
        }
        s
    }
}

/// Epoch with the largest `|score|`; the earliest wins ties.
pub fn select_epoch(trace: &TrainTrace) -> Result<usize> {
    if trace.scores.is_empty() {
        return Err(Error::InvalidConfig("no per-epoch scores were recorded".into()));
    }
    let mut best = 0;
    for (i, s) in trace.scores.iter().enumerate() {
        if s.abs() > trace.scores[best].abs() {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Pearson correlation of two series.
pub fn mode_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    stats::pearson(a, b)
}

/// Standardized real part of `Σ_j c_j ψ_j` along the rows of `psi`.
pub fn eigenfunction_series(psi: &Mat<f64>, coeffs: &[Complex64]) -> Result<Vec<f64>> {
    check_dim(psi.ncols(), coeffs.len())?;
    let raw: Vec<f64> = (0..psi.nrows())
        .map(|r| (0..psi.ncols()).map(|j| psi[(r, j)] * coeffs[j].re).sum())
        .collect();
    stats::standardize(&raw)
}

/// State handed to a per-epoch scorer.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub method: Method,
    pub dictionary: &'a TrainableDictionary,
    pub operator: &'a KoopmanApproximation,
    /// Dictionary values at the training inputs.
    pub psi_x: &'a Mat<f64>,
    /// `Ψ_Y` for EDMD-DL, `Ψ'_X` otherwise.
    pub galerkin_target: &'a Mat<f64>,
    pub delta_t: f64,
}

impl EpochView<'_> {
    /// Eigen-decomposition of the ridge-regularized operator `K`.
    pub fn operator_spectrum(&self, conversion: Conversion) -> Result<SpectralResult> {
        let g = complex_gram(self.psi_x);
        operator_spectrum(self.operator, g.as_ref(), self.delta_t, conversion)
    }

    /// Same as [`learned_spectrum`] without re-evaluating the dictionary.
    pub fn spectrum(&self, rank_tol: f64, conversion: Conversion) -> Result<SpectralResult> {
        let g = complex_gram(self.psi_x);
        let t = complex_cross(self.psi_x, self.galerkin_target);
        truncated_spectrum(
            g.as_ref(),
            t.as_ref(),
            self.method.kind(),
            self.delta_t,
            rank_tol,
            Some(self.dictionary.constant_index()),
            conversion,
        )
    }
}

/// Relative eigenvalue cutoff of `Ĝ` for spectra of learned dictionaries.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Spectrum of a learned dictionary on `data`, restricted to the numerically
/// resolved span of its features.
///
/// The Galerkin target is `Ψ_Y` for EDMD-DL and `Ψ'_X` otherwise, so the
/// result depends on the dictionary only, not on the ridge-regularized `K`.
pub fn learned_spectrum(
    dict: &TrainableDictionary,
    data: &TrainingData,
    method: Method,
    rank_tol: f64,
    conversion: Conversion,
) -> Result<SpectralResult> {
    let (psi_x, target) = match method {
        Method::EdmdDl => {
            let psi_x = dict.eval_batch(&data.x)?;
            let psi_y = eval_y(dict, data, &psi_x)?;
            (psi_x, psi_y)
        }
        Method::SdmdDl | Method::GedmdDl => {
            let (b, a) = data.coefficients()?;
            dict.action_batch(&data.x, b, Some(a))?
        }
    };
    let g = complex_gram(&psi_x);
    let t = complex_cross(&psi_x, &target);
    truncated_spectrum(
        g.as_ref(),
        t.as_ref(),
        method.kind(),
        data.delta_t,
        rank_tol,
        Some(dict.constant_index()),
        conversion,
    )
}

fn complex_cross(a: &Mat<f64>, b: &Mat<f64>) -> Mat<Complex64> {
    let c = cross(a.as_ref(), b.as_ref());
    let m = a.nrows().max(1) as f64;
    Mat::from_fn(c.nrows(), c.ncols(), |i, j| Complex64::new(c[(i, j)] / m, 0.0))
}

/// `Ψ*Ψ / m` as a complex matrix.
pub fn complex_gram(psi: &Mat<f64>) -> Mat<Complex64> {
    complex_cross(psi, psi)
}

fn to_operator(k: &Mat<f64>, method: Method, delta_t: f64, gamma: f64, m: usize) -> KoopmanApproximation {
    KoopmanApproximation {
        matrix: Mat::from_fn(k.nrows(), k.ncols(), |i, j| Complex64::new(k[(i, j)], 0.0)),
        kind: method.kind(),
        delta_t: (!method.kind().is_generator()).then_some(delta_t),
        // Normalized convention: the solve is against Ψ*Ψ/m + (γ/m) I.
        gamma: gamma / m as f64,
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub dictionary: TrainableDictionary,
    pub operator: KoopmanApproximation,
    pub trace: TrainTrace,
    /// State at the selected epoch when a scorer was supplied.
    pub selected: Option<(TrainableDictionary, KoopmanApproximation)>,
}

pub type Scorer<'s> = dyn FnMut(&EpochView<'_>) -> Result<f64> + 's;

/// Builds a dictionary from `spec` (standardized on the training inputs) and trains it.
pub fn train(
    data: &TrainingData,
    spec: &NetworkSpec,
    config: &TrainConfig,
    scorer: Option<&mut Scorer<'_>>,
) -> Result<Trained> {
    let mut dict = TrainableDictionary::new(data.dim, spec, config.seed)?;
    if spec.standardize {
        dict.standardize_from(&data.x)?;
    }
    train_from(dict, data, config, scorer)
}

/// Trains an existing dictionary.
pub fn train_from(
    mut dict: TrainableDictionary,
    data: &TrainingData,
    config: &TrainConfig,
    mut scorer: Option<&mut Scorer<'_>>,
) -> Result<Trained> {
    config.validate()?;
    check_dim(dict.dim, data.dim)?;
    let m = data.len();
    if m == 0 {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if config.method.needs_coefficients() {
        data.coefficients()?;
    }
    let gamma = config.gamma;
    let eta = config.learning_rate;
    let batch = if config.batch_size == 0 { m } else { config.batch_size.min(m) };
    let n_batches = m.div_ceil(batch);

    let mut ev = closed_form_update(&dict, data, config.method, gamma)?;
    let mut params = dict.params();
    let mut velocity = vec![0.0; params.len()];
    let mut trace = TrainTrace::default();
    let mut selected = None;
    let mut step = 0usize;

    for epoch in 1..=config.outer_epochs {
        for _ in 0..config.inner_steps {
            let b = step % n_batches;
            step += 1;
            let (start, end) = (b * batch, ((b + 1) * batch).min(m));
            let (loss, grad) = loss_and_gradient_rows(&dict, &ev.k, data, config.method, start, end)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: eta,
                });
            }
            if eta == 0.0 {
                continue;
            }
            if config.momentum {
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                    *v = 0.9 * *v - eta * g;
                    *p += *v;
                }
            } else {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= eta * g;
                }
            }
            dict.set_params(&params)?;
        }
        // A Gram matrix that only turns singular after parameter updates means
        // the steps drove the features into saturation.
        ev = closed_form_update(&dict, data, config.method, gamma).map_err(|e| match e {
            Error::SingularGram { .. } if eta > 0.0 && config.inner_steps > 0 => Error::Divergence {
                epoch,
                learning_rate: eta,
            },
            other => other,
        })?;
        let loss = residual_loss(&ev, gamma);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                learning_rate: eta,
            });
        }
        trace.losses.push(loss);
        if let Some(score_fn) = scorer.as_deref_mut() {
            let op = to_operator(&ev.k, config.method, data.delta_t, gamma, m);
            let view = EpochView {
                epoch,
                method: config.method,
                dictionary: &dict,
                operator: &op,
                psi_x: &ev.psi_x,
                galerkin_target: ev.galerkin_target(),
                delta_t: data.delta_t,
            };
            let score = score_fn(&view)?;
            let better = trace
                .scores
                .iter()
                .all(|s: &f64| score.abs() > s.abs());
            trace.scores.push(score);
            if better {
                trace.selected_epoch = Some(epoch);
                trace.selection_score = Some(score);
                selected = Some((dict.clone(), op));
            }
        }
    }
    let operator = to_operator(&ev.k, config.method, data.delta_t, gamma, m);
    Ok(Trained {
        dictionary: dict,
        operator,
        trace,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SdeModel;
    use crate::rng;
    use rand::Rng as _;

    fn spec(hidden: Vec<usize>, n_learned: usize) -> NetworkSpec {
        NetworkSpec {
            hidden,
            n_learned,
            standardize: true,
        }
    }

    fn config(method: Method, eta: f64, outer: usize) -> TrainConfig {
        TrainConfig {
            method,
            learning_rate: eta,
            gamma: 1e-6,
            outer_epochs: outer,
            inner_steps: 2,
            batch_size: 0,
            momentum: false,
            seed: 3,
        }
    }

    fn toy_data(seed: u64, m: usize) -> TrainingData {
        let mut r = rng::stream(seed, 0);
        let x: Vec<f64> = (0..2 * m).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = x
            .chunks(2)
            .flat_map(|p| [0.9 * p[0] + 0.1 * p[1], -0.2 * p[0] + 0.8 * p[1]])
            .collect();
        let ens = SnapshotEnsemble::from_pairs(2, x, y, 0.1).unwrap();
        let model = SdeModel::stuart_landau(Default::default(), crate::models::Coordinates::Cartesian).unwrap();
        TrainingData::new(&ens, Some(&model)).unwrap()
    }

    #[test]
    fn loss_examples() {
        let data = toy_data(1, 5);
        let dict = TrainableDictionary::new(2, &spec(vec![4], 2), 1).unwrap();
        let psi_x = dict.eval_batch(&data.x).unwrap();
        let psi_y = dict.eval_batch(&data.y).unwrap();
        let zero = Mat::<f64>::zeros(dict.len(), dict.len());
        let l = loss_eval(&dict, &zero, &data, Method::EdmdDl, 0.0).unwrap();
        assert!((l - frobenius2(&psi_y)).abs() <= 1e-12 * l);
        // Identity evolution gives an exact fit.
        let mut same = data.clone();
        same.y = same.x.clone();
        let id = Mat::<f64>::identity(dict.len(), dict.len());
        assert!(loss_eval(&dict, &id, &same, Method::EdmdDl, 0.0).unwrap() < 1e-24);
        let _ = psi_x;
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = toy_data(2, 5);
        for method in [Method::SdmdDl, Method::EdmdDl, Method::GedmdDl] {
            for (hidden, seed) in [(vec![4], 4u64), (vec![3, 4], 5)] {
                let mut dict = TrainableDictionary::new(2, &spec(hidden, 3), seed).unwrap();
                let mut p = dict.params();
                let mut r = rng::stream(seed, 1);
                for v in p.iter_mut() {
                    *v += 0.2 * (r.random::<f64>() - 0.5);
                }
                dict.set_params(&p).unwrap();
                let n = dict.len();
                let k = Mat::from_fn(n, n, |_, _| r.random::<f64>() - 0.5);
                let (_, grad) = loss_and_gradient(&dict, &k, &data, method, 0.01).unwrap();
                let h = 1e-6;
                for i in 0..p.len() {
                    let mut q = p.clone();
                    q[i] += h;
                    dict.set_params(&q).unwrap();
                    let lp = loss_eval(&dict, &k, &data, method, 0.01).unwrap();
                    q[i] -= 2.0 * h;
                    dict.set_params(&q).unwrap();
                    let lm = loss_eval(&dict, &k, &data, method, 0.01).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let tol = 1e-4 * fd.abs().max(grad[i].abs()).max(1e-3);
                    assert!((fd - grad[i]).abs() <= tol, "{method:?} param {i}: fd {fd} vs {}", grad[i]);
                }
                dict.set_params(&p).unwrap();
            }
        }
    }

    #[test]
    fn trajectory_pairs_share_evaluations() {
        let model = SdeModel::ou(1.0, 0.0, 0.3).unwrap();
        let path = crate::simulate::simulate_trajectory(&model, &[0.8], 0.01, 40, 9).unwrap();
        let x: Vec<f64> = path[..40].iter().map(|p| p[0]).collect();
        let y: Vec<f64> = path[1..].iter().map(|p| p[0]).collect();
        let ens = SnapshotEnsemble::from_pairs(1, x.clone(), y.clone(), 0.01).unwrap();
        let chain = TrainingData::new(&ens, Some(&model)).unwrap();
        assert!(chained(&chain, 0, chain.len()));
        // Reversing the pair order gives the same sums without the chain structure.
        let rx: Vec<f64> = x.iter().rev().copied().collect();
        let ry: Vec<f64> = y.iter().rev().copied().collect();
        let ens = SnapshotEnsemble::from_pairs(1, rx, ry, 0.01).unwrap();
        let plain = TrainingData::new(&ens, Some(&model)).unwrap();
        assert!(!chained(&plain, 0, plain.len()));

        let dict = TrainableDictionary::new(1, &spec(vec![5], 3), 2).unwrap();
        for method in [Method::SdmdDl, Method::EdmdDl] {
            let a = closed_form_update(&dict, &chain, method, 1e-3).unwrap();
            let b = closed_form_update(&dict, &plain, method, 1e-3).unwrap();
            for i in 0..a.k.nrows() {
                for j in 0..a.k.ncols() {
                    assert!((a.k[(i, j)] - b.k[(i, j)]).abs() <= 1e-9 * (1.0 + b.k[(i, j)].abs()));
                }
            }
            let (la, ga) = loss_and_gradient(&dict, &a.k, &chain, method, 1e-3).unwrap();
            let (lb, gb) = loss_and_gradient(&dict, &a.k, &plain, method, 1e-3).unwrap();
            assert!((la - lb).abs() <= 1e-10 * lb.abs().max(1.0));
            for (u, v) in ga.iter().zip(&gb) {
                assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0), "{method:?}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy_data(3, 40);
        let cfg = config(Method::SdmdDl, 0.0, 3);
        let out = train(&data, &spec(vec![5], 3), &cfg, None).unwrap();
        let mut init = TrainableDictionary::new(2, &spec(vec![5], 3), cfg.seed).unwrap();
        init.standardize_from(&data.x).unwrap();
        assert_eq!(out.dictionary, init);
        let ev = closed_form_update(&init, &data, Method::SdmdDl, cfg.gamma).unwrap();
        let expect = to_operator(&ev.k, Method::SdmdDl, data.delta_t, cfg.gamma, data.len());
        assert_eq!(out.operator.matrix, expect.matrix);
        assert_eq!(out.trace.losses.len(), 3);
    }

    #[test]
    fn frozen_sdmd_equals_identity_plus_dt_gedmd() {
        let data = toy_data(4, 60);
        let s = train(&data, &spec(vec![5], 3), &config(Method::SdmdDl, 0.0, 1), None).unwrap();
        let g = train(&data, &spec(vec![5], 3), &config(Method::GedmdDl, 0.0, 1), None).unwrap();
        let n = s.dictionary.len();
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                let lhs = s.operator.matrix[(i, j)];
                let rhs = g.operator.matrix[(i, j)] * data.delta_t + id;
                assert!((lhs - rhs).norm() <= 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn constant_eigenpair_survives_training() {
        let data = toy_data(5, 80);
        let mut checks = 0;
        let mut scorer = |v: &EpochView<'_>| -> Result<f64> {
            let c = v.dictionary.constant_index();
            let k = &v.operator.matrix;
            for i in 0..k.nrows() {
                let want = if i == c { 1.0 } else { 0.0 };
                assert!((k[(i, c)] - Complex64::new(want, 0.0)).norm() <= 1e-10);
            }
            checks += 1;
            Ok(v.epoch as f64)
        };
        let out = train(
            &data,
            &spec(vec![6], 3),
            &config(Method::SdmdDl, 1e-3, 4),
            Some(&mut scorer),
        )
        .unwrap();
        assert_eq!(checks, 4);
        assert_eq!(select_epoch(&out.trace).unwrap(), 4);
        assert_eq!(out.trace.selected_epoch, Some(4));
    }

    #[test]
    fn edmd_dl_fits_a_linear_system() {
        let x: Vec<f64> = (0..100).map(|i| -1.0 + 2.0 * i as f64 / 99.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.9 * v).collect();
        let ens = SnapshotEnsemble::from_pairs(1, x, y, 0.1).unwrap();
        let data = TrainingData::new(&ens, None).unwrap();
        let mut cfg = config(Method::EdmdDl, 3e-2, 200);
        cfg.gamma = 1e-9;
        cfg.momentum = true;
        cfg.inner_steps = 20;
        let out = train(&data, &spec(vec![4], 2), &cfg, None).unwrap();
        let last = *out.trace.losses.last().unwrap();
        assert!(last <= 1e-6, "loss {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(7, 50);
        let cfg = TrainConfig {
            momentum: true,
            batch_size: 16,
            ..config(Method::GedmdDl, 1e-4, 5)
        };
        let a = train(&data, &spec(vec![4, 3], 3), &cfg, None).unwrap();
        let b = train(&data, &spec(vec![4, 3], 3), &cfg, None).unwrap();
        assert_eq!(a.dictionary, b.dictionary);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_data(8, 30);
        let err = train(&data, &spec(vec![4], 2), &config(Method::EdmdDl, 1e6, 50), None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn missing_coefficients_are_a_config_error() {
        let mut data = toy_data(9, 10);
        data.drift = None;
        data.cov = None;
        let err = train(&data, &spec(vec![4], 2), &config(Method::SdmdDl, 0.0, 1), None).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(train(&data, &spec(vec![4], 2), &config(Method::EdmdDl, 0.0, 1), None).is_ok());
    }

    #[test]
    fn epoch_selection_examples() {
        let mut t = TrainTrace {
            losses: vec![1.0],
            scores: vec![0.3],
            ..Default::default()
        };
        assert_eq!(select_epoch(&t).unwrap(), 1);
        t.scores = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(select_epoch(&t).unwrap(), 10);
        t.scores = vec![0.1, 0.2, 0.1, -0.3, 0.2, 0.5, 0.9, -0.9, 0.4];
        assert_eq!(select_epoch(&t).unwrap(), 7);
        t.scores.clear();
        assert!(matches!(select_epoch(&t), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn trace_csv_has_one_row_per_epoch() {
        let t = TrainTrace {
            losses: vec![2.0, 1.0],
            scores: vec![0.5, 0.25],
            selected_epoch: Some(1),
            selection_score: Some(0.5),
        };
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("2,"));
    }
}
