//! Invariant checks run before and after every experiment.

use faer::Mat;

use sdmd::dictionary::{DictionarySpec, FixedDictionary};
use sdmd::koopman::{
    assemble_data_matrices, convert_eigs, gedmd_operator, gram, match_modes, operator_spectrum, sdmd_operator,
    spectrum, Action, Conversion, Direction, GramPair, SpectralResult,
};
use sdmd::models::SdeModel;
use sdmd::simulate::SnapshotEnsemble;
use sdmd::Complex64;

use crate::error::{Result, StageExt};
use crate::report::InvariantOutcome;

const IDENTITY_TOL: f64 = 1e-13;
const CONSISTENCY_TOL: f64 = 1e-10;
const CONSTANT_TOL: f64 = 1e-10;
const ROUNDTRIP_TOL: f64 = 1e-14;
const HAND_TOL: f64 = 1e-12;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn max_abs_diff(a: &Mat<Complex64>, b: &Mat<Complex64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    m
}

fn dense(rows: &[&[f64]]) -> Mat<Complex64> {
    Mat::from_fn(rows.len(), rows[0].len(), |i, j| c(rows[i][j]))
}

/// `max |K̂ − I − Δt (Ĝ + γI)⁻¹ Ĥ|`.
pub fn identity_relation(gp: &GramPair) -> Result<InvariantOutcome> {
    let k = sdmd_operator(gp).stage("identity check")?;
    let a = gp.generator_matrix().stage("identity check")?;
    let n = gp.dim();
    let expected = Mat::from_fn(n, n, |i, j| a[(i, j)] * gp.delta_t + if i == j { c(1.0) } else { c(0.0) });
    Ok(InvariantOutcome::check(
        "identity relation",
        max_abs_diff(&k.matrix, &expected),
        IDENTITY_TOL,
        "K = I + dt A, max entry difference",
    ))
}

/// Eigenvalues of `K̂` against `1 + Δt·eig(Ĥ, Ĝ + γI)` after matching.
pub fn spectrum_consistency(gp: &GramPair, result: &SpectralResult) -> Result<InvariantOutcome> {
    let k = sdmd_operator(gp).stage("consistency check")?;
    let direct = operator_spectrum(&k, gp.g.as_ref(), gp.delta_t, Conversion::Linearized).stage("consistency check")?;
    let report = match_modes(&direct.semigroup_eigs, &result.semigroup_eigs).stage("consistency check")?;
    let scale = result.semigroup_eigs.iter().map(|z| z.norm()).fold(1.0, f64::max);
    Ok(InvariantOutcome::check(
        "spectrum consistency",
        report.max_error() / scale,
        CONSISTENCY_TOL,
        "eig(K) vs 1 + dt eig(H, G + gamma I), relative to max(1, max |mu|)",
    ))
}

/// The constant observable is an eigenfunction with `μ = 1`: the basis
/// vector of the constant lies in the span of eigenvectors whose eigenvalue
/// is within `CLUSTER` of one, which also covers degenerate eigenspaces.
pub fn constant_eigenpair(result: &SpectralResult, constant: usize) -> InvariantOutcome {
    const CLUSTER: f64 = 1e-6;
    let gap = result.semigroup_eigs.iter().map(|z| (z - c(1.0)).norm()).fold(f64::INFINITY, f64::min);
    let mut basis: Vec<Vec<Complex64>> = Vec::new();
    for k in 0..result.len() {
        if (result.semigroup_eigs[k] - c(1.0)).norm() > CLUSTER {
            continue;
        }
        let mut v = result.column(k);
        let scale = norm(&v);
        for q in &basis {
            let p = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm(&v);
        if n > 1e-10 * scale {
            basis.push(v.into_iter().map(|z| z / n).collect());
        }
    }
    let residual = if basis.is_empty() {
        1.0
    } else {
        let mut r = vec![c(0.0); result.coeffs.nrows()];
        r[constant] = c(1.0);
        for q in &basis {
            let p = dot(q, &r);
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        norm(&r)
    };
    InvariantOutcome::check(
        "constant eigenpair",
        gap.max(residual),
        CONSTANT_TOL,
        "max(min |mu - 1|, distance of the constant from the mu = 1 eigenspace)",
    )
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Exponential conversion `λ → μ → λ` on representative values.
pub fn conversion_roundtrip(delta_t: f64) -> Result<InvariantOutcome> {
    let lambdas = [c(0.0), c(-1.0), c(-5.0), Complex64::new(-0.005, 0.75), Complex64::new(-0.5, -3.0)];
    let mu = convert_eigs(&lambdas, delta_t, Direction::GeneratorToSemigroup).stage("roundtrip check")?;
    let back = convert_eigs(&mu, delta_t, Direction::SemigroupToGenerator).stage("roundtrip check")?;
    let err = lambdas
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).norm() / a.norm().max(1.0))
        .fold(0.0, f64::max);
    Ok(InvariantOutcome::check(
        "lambda-mu roundtrip",
        err,
        ROUNDTRIP_TOL,
        "relative error of log(exp(dt lambda))/dt",
    ))
}

/// Among the `count` slowest modes, `max |Im λ| ≤ 0.05 · max |Re λ|`.
pub fn realness(result: &SpectralResult, slow: &[usize], count: usize) -> InvariantOutcome {
    let lead: Vec<Complex64> = slow.iter().take(count).map(|&k| result.generator_eigs[k]).collect();
    let im = lead.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let re = lead.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let ratio = if re > 0.0 { im / re } else if im == 0.0 { 0.0 } else { f64::INFINITY };
    InvariantOutcome::check(
        "spectral realness",
        ratio,
        0.05,
        format!("max |Im| / max |Re| over the {count} slowest modes"),
    )
    .soft()
}

/// Checks on a three-point OU instance with known Gram matrices and spectrum.
pub fn preflight() -> Result<Vec<InvariantOutcome>> {
    let model = SdeModel::ou(1.0, 0.0, 0.1).stage("preflight")?;
    let dict = FixedDictionary::new(DictionarySpec::Monomial { dim: 1, max_degree: 1 }).stage("preflight")?;
    let points = vec![-1.0, 0.0, 1.0];
    let data = SnapshotEnsemble::from_pairs(1, points.clone(), points, 0.1).stage("preflight")?;
    let dm = assemble_data_matrices(&dict, &data, Some(&model), Action::Stochastic).stage("preflight")?;
    let pp = dm.psi_prime_x.expect("model was supplied");
    let gp = gram(dm.psi_x.as_ref(), pp.as_ref(), Some(0.0), 0.1).stage("preflight")?;
    let s = spectrum(&gp, Conversion::Linearized).stage("preflight")?;

    let gram_err = max_abs_diff(&gp.g, &dense(&[&[1.0, 0.0], &[0.0, 2.0 / 3.0]]))
        .max(max_abs_diff(&gp.h, &dense(&[&[0.0, 0.0], &[0.0, -2.0 / 3.0]])));
    let expected = [c(0.0), c(-1.0)];
    let eig_err = match_modes(&s.generator_eigs, &expected).stage("preflight")?.max_error();
    let a = gedmd_operator(dm.psi_x.as_ref(), pp.as_ref(), Some(0.0)).stage("preflight")?;
    let k = sdmd_operator(&gp).stage("preflight")?;
    let via_gedmd = Mat::from_fn(2, 2, |i, j| a.matrix[(i, j)] * 0.1 + if i == j { c(1.0) } else { c(0.0) });

    Ok(vec![
        InvariantOutcome::check("preflight hand gram", gram_err, HAND_TOL, "G = diag(1, 2/3), H = diag(0, -2/3)"),
        InvariantOutcome::check("preflight hand spectrum", eig_err, HAND_TOL, "generator spectrum {0, -1}"),
        InvariantOutcome::check(
            "preflight sdmd-gedmd identity",
            max_abs_diff(&k.matrix, &via_gedmd),
            IDENTITY_TOL,
            "K_sdmd = I + dt A_gedmd",
        ),
        named(identity_relation(&gp)?, "preflight identity relation"),
        named(spectrum_consistency(&gp, &s)?, "preflight spectrum consistency"),
        named(constant_eigenpair(&s, 0), "preflight constant eigenpair"),
        conversion_roundtrip(0.1)?,
    ])
}

fn named(mut o: InvariantOutcome, name: &str) -> InvariantOutcome {
    o.name = name.to_string();
    o
}
