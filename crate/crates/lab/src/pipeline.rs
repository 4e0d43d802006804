//! Shared stages: data acquisition, coefficients, spectra and exports.

use std::path::{Path, PathBuf};

use faer::Mat;

use sdmd::dictionary::{FixedDictionary, Observables};
use sdmd::estimate::{estimate_coefficients, CoefficientEstimate};
use sdmd::io::{csv_table, read_ensemble, write_atomic, write_spectrum, EnsemblePaths};
use sdmd::koopman::{
    assemble_data_matrices, edmd_operator, gedmd_operator, gram, gram_product, match_modes, operator_spectrum,
    slow_modes, spectrum, Action, DataMatrices, SpectralResult,
};
use sdmd::learn::{learned_spectrum, train, Scorer, Trained, TrainableDictionary, TrainingData};
use sdmd::models::{ModeIndex, SdeCoefficients, SdeModel};
use sdmd::simulate::{generate_ensemble, linspace, EnsembleOptions, SnapshotEnsemble};
use sdmd::Complex64;

use crate::config::{CoefficientSource, Config, MethodName};
use crate::error::{LabError, Result, StageExt};
use crate::invariants;
use crate::report::{
    blob_hash, pair, MatchRow, MatchTable, MethodReport, ProbeRow, Report, TrainingSummary,
};

/// Reference values of the triple-well spectrum, compared as semigroup
/// eigenvalues at `Δt = 0.1`.
pub const TRIPLE_WELL_REFERENCE: [f64; 3] = [0.999_999_135, 0.993, 0.892];

/// Writes a result file and records it in the report.
pub fn emit(report: &mut Report, dir: &Path, name: &str, contents: &str) -> Result<()> {
    write_atomic(&dir.join(name), contents.as_bytes()).stage("write results")?;
    report.outputs.push(PathBuf::from(name));
    Ok(())
}

/// Simulates the configured ensemble, or loads the configured export.
pub fn acquire_ensemble(config: &Config, report: &mut Report) -> Result<SnapshotEnsemble> {
    match &config.ensemble {
        Some(dir) => {
            let paths = EnsemblePaths::new(dir, "ensemble");
            for p in [&paths.x, &paths.y, &paths.metadata] {
                let bytes = std::fs::read(p).map_err(|e| LabError::io(p, e))?;
                report.input_hashes.insert(p.display().to_string(), blob_hash(&bytes));
            }
            let (ens, _) = read_ensemble(dir, "ensemble").stage("load ensemble")?;
            if ens.dim != config.model.dim() {
                return Err(LabError::Config(format!(
                    "ensemble dimension {} does not match the model",
                    ens.dim
                )));
            }
            if (ens.delta_t - config.delta_t).abs() > 1e-12 * config.delta_t {
                return Err(LabError::Config(format!(
                    "ensemble delta_t {} differs from the configured {}",
                    ens.delta_t, config.delta_t
                )));
            }
            Ok(ens)
        }
        None => generate_ensemble(
            &config.model,
            &config.sampler,
            config.delta_t,
            config.substeps,
            config.seed,
            EnsembleOptions {
                snapshots_per_trajectory: config.snapshots_per_trajectory,
                store_trajectories: false,
            },
        )
        .stage("simulate"),
    }
}

/// Drift and diffusion used by generator-based methods.
pub enum Coefficients {
    Analytic(SdeModel),
    Estimated(Box<CoefficientEstimate>),
}

impl Coefficients {
    pub fn resolve(config: &Config, ens: &SnapshotEnsemble, report: &mut Report, dir: &Path) -> Result<Self> {
        match config.coefficients {
            CoefficientSource::Analytic => Ok(Coefficients::Analytic(config.model.clone())),
            CoefficientSource::Estimated => {
                let est = estimate_coefficients(ens, &config.estimator).stage("estimate coefficients")?;
                emit(report, dir, "coefficients.json", &est.to_json().stage("estimate coefficients")?)?;
                Ok(Coefficients::Estimated(Box::new(est)))
            }
        }
    }

    pub fn as_dyn(&self) -> &dyn SdeCoefficients {
        match self {
            Coefficients::Analytic(m) => m,
            Coefficients::Estimated(e) => e.as_ref(),
        }
    }
}

/// Observables whose span carries the eigenfunctions.
pub enum Basis<'a> {
    Fixed(&'a FixedDictionary),
    Learned(&'a TrainableDictionary),
}

impl Basis<'_> {
    /// `m × N` values at row-major points.
    pub fn eval(&self, points: &[f64]) -> Result<Mat<Complex64>> {
        match self {
            Basis::Fixed(d) => sdmd::koopman::eval_matrix(*d, points).stage("evaluate eigenfunctions"),
            Basis::Learned(d) => {
                let v = d.eval_batch(points).stage("evaluate eigenfunctions")?;
                Ok(Mat::from_fn(v.nrows(), v.ncols(), |i, j| Complex64::new(v[(i, j)], 0.0)))
            }
        }
    }

    pub fn constant_index(&self) -> Option<usize> {
        match self {
            Basis::Fixed(d) => d.constant_index(),
            Basis::Learned(d) => Some(d.constant_index()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Basis::Fixed(d) => d.len(),
            Basis::Learned(d) => d.n_learned() + 1 + d.dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `Σ_j ψ_j(x) v_j` for each point and each requested mode.
pub fn eigenfunction_values(basis: &Basis<'_>, result: &SpectralResult, modes: &[usize], points: &[f64]) -> Result<Vec<Vec<Complex64>>> {
    let psi = basis.eval(points)?;
    Ok((0..psi.nrows())
        .map(|r| {
            modes
                .iter()
                .map(|&k| (0..psi.ncols()).map(|j| psi[(r, j)] * result.coeffs[(j, k)]).sum())
                .collect()
        })
        .collect())
}

/// Tensor lattice points in row-major order (last axis fastest).
pub fn lattice_points(domain: &[[f64; 2]], counts: &[usize]) -> Vec<f64> {
    let axes: Vec<Vec<f64>> = domain.iter().zip(counts).map(|(iv, &c)| linspace(iv[0], iv[1], c)).collect();
    let total: usize = counts.iter().product();
    let d = counts.len();
    let mut out = Vec::with_capacity(total * d);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0; d];
        for ax in (0..d).rev() {
            idx[ax] = rem % counts[ax];
            rem /= counts[ax];
        }
        out.extend((0..d).map(|ax| axes[ax][idx[ax]]));
    }
    out
}

/// Reference spectrum for the configured model, if one is known.
pub fn references(config: &Config) -> Result<Option<(String, Vec<Complex64>, Vec<String>)>> {
    let r = config.references;
    if r == 0 {
        return Ok(None);
    }
    let out = match &config.model {
        SdeModel::Ou(_) => {
            let modes: Vec<ModeIndex> = (0..r).map(ModeIndex::Ou).collect();
            let values = config.model.analytic_generator_eigs(&modes).stage("references")?;
            let labels = (0..r).map(|n| format!("n={n}")).collect();
            Some(("generator".to_string(), values, labels))
        }
        SdeModel::StuartLandau { .. } => {
            let ns: Vec<i64> = (-(r as i64)..=r as i64).collect();
            let modes: Vec<ModeIndex> = ns.iter().map(|&n| ModeIndex::StuartLandau { l: 0, n }).collect();
            let values = config.model.analytic_generator_eigs(&modes).stage("references")?;
            let labels = ns.iter().map(|n| format!("l=0,n={n}")).collect();
            Some(("generator".to_string(), values, labels))
        }
        SdeModel::TripleWell(_) => {
            let k = r.min(TRIPLE_WELL_REFERENCE.len());
            let values = TRIPLE_WELL_REFERENCE[..k].iter().map(|&v| Complex64::new(v, 0.0)).collect();
            let labels = (1..=k).map(|i| format!("mu_{i}")).collect();
            Some(("semigroup".to_string(), values, labels))
        }
        SdeModel::NeuralMass { .. } => None,
    };
    Ok(out)
}

fn match_table(config: &Config, result: &SpectralResult) -> Result<Option<MatchTable>> {
    let Some((space, refs, labels)) = references(config)? else {
        return Ok(None);
    };
    let estimates = if space == "generator" { &result.generator_eigs } else { &result.semigroup_eigs };
    if estimates.is_empty() {
        return Ok(None);
    }
    let m = match_modes(estimates, &refs).stage("match modes")?;
    let rows = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = m.for_reference(i);
            MatchRow {
                label: labels[i].clone(),
                reference: pair(*r),
                estimate: p.map(|p| pair(p.estimate)),
                error: p.map(|p| p.error),
            }
        })
        .collect();
    Ok(Some(MatchTable {
        space,
        rows,
        max_error: Some(m.max_error()),
    }))
}

/// Spectrum and its provenance for one method.
pub struct MethodOutcome {
    pub report: MethodReport,
    pub result: SpectralResult,
}

/// Builds the per-method report and writes spectra and eigenfunction grids.
pub fn finish_method(
    config: &Config,
    method: MethodName,
    basis: &Basis<'_>,
    result: SpectralResult,
    training: Option<TrainingSummary>,
    report: &mut Report,
    dir: &Path,
) -> Result<MethodOutcome> {
    let stem = method.stem();
    write_spectrum(dir, &stem, &result).stage("write results")?;
    report.outputs.push(PathBuf::from(format!("{stem}_eigenvalues.csv")));
    report.outputs.push(PathBuf::from(format!("{stem}_eigenvectors.csv")));

    let slow = slow_modes(&result, None);
    let shown: Vec<usize> = slow
        .iter()
        .copied()
        .take(config.lattice.as_ref().map_or(4, |l| l.modes))
        .collect();

    if let Some(lat) = &config.lattice {
        let points = lattice_points(&lat.domain, &lat.counts);
        let values = eigenfunction_values(basis, &result, &shown, &points)?;
        let d = lat.domain.len();
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        for r in 1..=shown.len() {
            header.push(format!("re_phi{r}"));
            header.push(format!("im_phi{r}"));
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = points.chunks(d).zip(&values).map(|(x, v)| {
            let mut row = x.to_vec();
            row.extend(v.iter().flat_map(|z| [z.re, z.im]));
            row
        });
        emit(report, dir, &format!("{stem}_eigenfunctions.csv"), &csv_table(&header, rows))?;
    }

    let probes = if config.probes.is_empty() {
        Vec::new()
    } else {
        let flat: Vec<f64> = config.probes.concat();
        let values = eigenfunction_values(basis, &result, &shown, &flat)?;
        config
            .probes
            .iter()
            .zip(values)
            .map(|(p, v)| ProbeRow {
                point: p.clone(),
                values: v.iter().map(|z| z.re).collect(),
            })
            .collect()
    };

    if let Some(c) = basis.constant_index() {
        let mut o = invariants::constant_eigenpair(&result, c);
        o.name = format!("{} constant eigenpair", method.label());
        // Plain EDMD maps the constant to (G + gamma I)^-1 G 1, off by O(gamma).
        if method == MethodName::Edmd {
            o = o.soft();
        }
        report.invariants.push(o);
    }
    if matches!(config.model, SdeModel::Ou(_) | SdeModel::TripleWell(_)) {
        let mut o = invariants::realness(&result, &slow, 4);
        o.name = format!("{} spectral realness", method.label());
        report.invariants.push(o);
    }

    let mr = MethodReport {
        method: method.label().to_string(),
        dictionary_size: basis.len(),
        semigroup_eigs: result.semigroup_eigs.iter().map(|z| pair(*z)).collect(),
        generator_eigs: result.generator_eigs.iter().map(|z| pair(*z)).collect(),
        slow_order: slow,
        matches: match_table(config, &result)?,
        probes,
        training,
    };
    report.methods.push(mr.clone());
    Ok(MethodOutcome { report: mr, result })
}

/// Data matrices of a fixed dictionary on one ensemble.
pub fn fixed_matrices(
    dict: &FixedDictionary,
    ens: &SnapshotEnsemble,
    coefficients: Option<&Coefficients>,
) -> Result<DataMatrices> {
    assemble_data_matrices(dict, ens, coefficients.map(Coefficients::as_dyn), Action::Stochastic)
        .stage("assemble data matrices")
}

/// Spectrum of a fixed-dictionary method; SDMD also runs the identity and
/// consistency checks on its Gram pair.
pub fn fixed_spectrum(config: &Config, method: MethodName, dm: &DataMatrices, report: &mut Report) -> Result<SpectralResult> {
    let needs = || {
        dm.psi_prime_x
            .as_ref()
            .ok_or_else(|| LabError::Config(format!("{} needs drift and diffusion", method.label())))
    };
    match method {
        MethodName::Sdmd => {
            let gp = gram(dm.psi_x.as_ref(), needs()?.as_ref(), config.gamma, config.delta_t).stage("gram")?;
            let s = spectrum(&gp, config.conversion).stage("spectrum")?;
            report.invariants.push(invariants::identity_relation(&gp)?);
            report.invariants.push(invariants::spectrum_consistency(&gp, &s)?);
            Ok(s)
        }
        MethodName::Gedmd => {
            let op = gedmd_operator(dm.psi_x.as_ref(), needs()?.as_ref(), config.gamma).stage("operator")?;
            let g = gram_product(dm.psi_x.as_ref(), dm.psi_x.as_ref()).stage("gram")?;
            operator_spectrum(&op, g.as_ref(), config.delta_t, config.conversion).stage("spectrum")
        }
        MethodName::Edmd => {
            let op = edmd_operator(dm.psi_x.as_ref(), dm.psi_y.as_ref(), config.gamma, config.delta_t)
                .stage("operator")?;
            let g = gram_product(dm.psi_x.as_ref(), dm.psi_x.as_ref()).stage("gram")?;
            operator_spectrum(&op, g.as_ref(), config.delta_t, config.conversion).stage("spectrum")
        }
        _ => Err(LabError::Other(format!("{} is not a fixed-dictionary method", method.label()))),
    }
}

/// Trains one learned method and returns the dictionary to analyse (the
/// epoch-selected one when a scorer was given) with its spectrum.
pub fn learned_run(
    config: &Config,
    method: MethodName,
    data: &TrainingData,
    scorer: Option<&mut Scorer<'_>>,
    select: bool,
) -> Result<(Trained, TrainableDictionary, SpectralResult)> {
    let learned = method.learned().expect("learned method");
    let net = config.network.as_ref().expect("validated");
    let tr = config.training.as_ref().expect("validated");
    let trained = train(data, net, &tr.train_config(learned), scorer).stage("train")?;
    let dict = match (&trained.selected, select) {
        (Some((d, _)), true) => d.clone(),
        _ => trained.dictionary.clone(),
    };
    let s = learned_spectrum(&dict, data, learned, tr.rank_tol, config.conversion).stage("spectrum")?;
    Ok((trained, dict, s))
}

/// Saves the trained dictionary and its trace; returns the summary.
pub fn save_training(
    method: MethodName,
    trained: &Trained,
    dict: &TrainableDictionary,
    rank: usize,
    report: &mut Report,
    dir: &Path,
) -> Result<TrainingSummary> {
    let stem = method.stem();
    emit(report, dir, &format!("{stem}_dictionary.json"), &dict.to_json().stage("write results")?)?;
    emit(report, dir, &format!("{stem}_trace.csv"), &trained.trace.to_csv())?;
    Ok(TrainingSummary {
        final_loss: trained.trace.losses.last().copied().unwrap_or(f64::NAN),
        epochs: trained.trace.losses.len(),
        selected_epoch: trained.trace.selected_epoch,
        selection_score: trained.trace.selection_score,
        rank,
    })
}
