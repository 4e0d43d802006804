//! Command drivers.

use std::path::Path;

use sdmd::dictionary::FixedDictionary;
use sdmd::io::{csv_table, write_ensemble, EnsembleMetadata};
use sdmd::koopman::{match_modes, slow_modes};
use sdmd::learn::{eigenfunction_series, EpochView, Method, TrainingData};
use sdmd::models::{SdeCoefficients, SdeModel};
use sdmd::stats::pearson;

use crate::config::{Config, MethodName};
use crate::error::{LabError, Result, StageExt};
use crate::pipeline::{
    acquire_ensemble, emit, finish_method, fixed_matrices, fixed_spectrum, learned_run, save_training, Basis,
    Coefficients, MethodOutcome,
};
use crate::report::{InvariantOutcome, NeuralMassReport, Report};

/// Writes `ensemble_x.csv`, `ensemble_y.csv`, `ensemble_meta.json` and, for
/// driven models, `ensemble_inputs.csv`.
pub fn simulate(config: &Config, report: &mut Report, dir: &Path) -> Result<()> {
    let ens = acquire_ensemble(config, report)?;
    let meta = EnsembleMetadata::describe(&ens, Some(&config.model), Some(&config.sampler));
    write_ensemble(dir, "ensemble", &ens, &meta).stage("write ensemble")?;
    for name in ["ensemble_x.csv", "ensemble_y.csv", "ensemble_meta.json"] {
        report.outputs.push(name.into());
    }
    if let Some(inputs) = &ens.latent_inputs {
        emit(report, dir, "ensemble_inputs.csv", &csv_table(&["input"], inputs.iter().map(|v| vec![*v])))?;
    }
    Ok(())
}

/// Runs every configured method on one data set.
pub fn spectra(config: &Config, report: &mut Report, dir: &Path) -> Result<Vec<MethodOutcome>> {
    let ens = acquire_ensemble(config, report)?;
    let needs_coeffs = config.methods.iter().any(|m| m.needs_coefficients());
    let coeffs = if needs_coeffs {
        Some(Coefficients::resolve(config, &ens, report, dir)?)
    } else {
        None
    };
    let fixed = match (&config.dictionary, config.methods.iter().any(|m| m.learned().is_none())) {
        (Some(spec), true) => Some(FixedDictionary::new(spec.clone()).stage("dictionary")?),
        _ => None,
    };
    let matrices = match &fixed {
        Some(d) => Some(fixed_matrices(d, &ens, coeffs.as_ref())?),
        None => None,
    };
    let data = if config.methods.iter().any(|m| m.learned().is_some()) {
        Some(TrainingData::new(&ens, coeffs.as_ref().map(Coefficients::as_dyn)).stage("training data")?)
    } else {
        None
    };

    let mut outcomes = Vec::new();
    for &method in &config.methods {
        let outcome = match method.learned() {
            None => {
                let dict = fixed.as_ref().expect("fixed dictionary");
                let s = fixed_spectrum(config, method, matrices.as_ref().expect("matrices"), report)?;
                finish_method(config, method, &Basis::Fixed(dict), s, None, report, dir)?
            }
            Some(_) => {
                let data = data.as_ref().expect("training data");
                let (trained, dict, s) = learned_run(config, method, data, None, false)?;
                let summary = save_training(method, &trained, &dict, s.len(), report, dir)?;
                finish_method(config, method, &Basis::Learned(&dict), s, Some(summary), report, dir)?
            }
        };
        outcomes.push(outcome);
    }
    if outcomes.len() >= 2 {
        compare_tables(config, &outcomes, report, dir)?;
    }
    add_deviations(config, report);
    Ok(outcomes)
}

/// Aligned eigenvalue table and the SDMD/gEDMD agreement check.
fn compare_tables(config: &Config, outcomes: &[MethodOutcome], report: &mut Report, dir: &Path) -> Result<()> {
    let rows = outcomes.iter().map(|o| o.report.slow_order.len()).max().unwrap_or(0);
    let mut header = vec!["rank".to_string()];
    for o in outcomes {
        let s = o.report.method.replace('-', "_");
        header.push(format!("{s}_re_lambda"));
        header.push(format!("{s}_im_lambda"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let table = csv_table(
        &header,
        (0..rows).map(|r| {
            let mut row = vec![(r + 1) as f64];
            for o in outcomes {
                match o.report.slow_order.get(r) {
                    Some(&k) => row.extend(o.report.generator_eigs[k]),
                    None => row.extend([f64::NAN, f64::NAN]),
                }
            }
            row
        }),
    );
    emit(report, dir, "compare_eigenvalues.csv", &table)?;

    let find = |m: MethodName| outcomes.iter().find(|o| o.report.method == m.label());
    if let (Some(a), Some(b)) = (find(MethodName::Sdmd), find(MethodName::Gedmd)) {
        let m = match_modes(&a.result.generator_eigs, &b.result.generator_eigs).stage("compare")?;
        let scale = b.result.generator_eigs.iter().map(|z| z.norm()).fold(1.0, f64::max);
        report.invariants.push(InvariantOutcome::check(
            "sdmd-gedmd generator agreement",
            m.max_error() / scale,
            1e-10 * config.delta_t.max(1.0),
            "matched generator eigenvalues, relative to max(1, max |lambda|)",
        ));
    }
    Ok(())
}

fn add_deviations(config: &Config, report: &mut Report) {
    let d = &mut report.deviations;
    if let SdeModel::TripleWell(_) = config.model {
        d.push(
            "Triple-well reference values (0.999999135, 0.993, 0.892) are compared as semigroup \
             eigenvalues at delta_t = 0.1."
                .into(),
        );
    }
    if let (Some(net), true) = (&config.network, config.methods.iter().any(|m| m.learned().is_some())) {
        d.push(format!(
            "Learned dictionary size N = {} learned + 1 constant + {} coordinates.",
            net.n_learned,
            config.model.dim()
        ));
        if let Some(tr) = &config.training {
            d.push(format!(
                "Learned spectra are computed on the resolved span of the features (relative Gram cutoff {:e}).",
                tr.rank_tol
            ));
        }
    }
    if let SdeModel::NeuralMass { params, .. } = config.model {
        d.push(format!(
            "Scaled run: {} points with input stay probability {} so regime switches occur within the run.",
            config.snapshots_per_trajectory, params.stay_prob
        ));
        d.push("SDMD-DL and EDMD-DL share one regularization weight.".into());
    }
}

/// Scaled neural-mass comparison of SDMD-DL against EDMD-DL.
pub fn neural_mass(config: &Config, report: &mut Report, dir: &Path) -> Result<()> {
    let ens = acquire_ensemble(config, report)?;
    let latent = ens
        .latent_inputs
        .clone()
        .ok_or_else(|| LabError::Config("the neural-mass run needs the latent input series".into()))?;
    let switches = latent.windows(2).filter(|w| w[0] != w[1]).count();
    let coeffs = Coefficients::resolve(config, &ens, report, dir)?;
    let data = TrainingData::new(&ens, Some(coeffs.as_dyn())).stage("training data")?;
    let rank_tol = config.training.as_ref().expect("validated").rank_tol;
    let dt = config.delta_t;

    let times: Vec<f64> = (0..ens.len()).map(|k| k as f64 * dt).collect();
    emit(
        report,
        dir,
        "nm_inputs.csv",
        &csv_table(
            &["t", "r", "v", "input"],
            (0..ens.len()).map(|k| vec![times[k], ens.x(k)[0], ens.x(k)[1], latent[k]]),
        ),
    )?;

    let mut phi2_scores = std::collections::BTreeMap::new();
    let mut phi3_scores = std::collections::BTreeMap::new();
    let mut traces = Vec::new();
    let mut sdmd_selected = None;
    for &method in &config.methods {
        let conversion = config.conversion;
        let mut scorer = |v: &EpochView<'_>| -> sdmd::Result<f64> {
            let s = v.spectrum(rank_tol, conversion)?;
            match slow_modes(&s, Some(v.dictionary.constant_index())).first() {
                Some(&k) => pearson(&eigenfunction_series(v.psi_x, &s.column(k))?, &latent),
                None => Ok(0.0),
            }
        };
        let select = method.learned() == Some(Method::SdmdDl);
        let (trained, dict, s) = learned_run(config, method, &data, Some(&mut scorer), select)?;
        if select {
            sdmd_selected = trained.trace.selected_epoch;
        }
        let summary = save_training(method, &trained, &dict, s.len(), report, dir)?;
        let slow = slow_modes(&s, Some(dict.constant_index()));
        let psi = dict.eval_batch(&data.x).stage("evaluate eigenfunctions")?;
        let series = |i: usize| -> Result<Vec<f64>> {
            match slow.get(i) {
                Some(&k) => eigenfunction_series(&psi, &s.column(k)).stage("eigenfunction series"),
                None => Ok(vec![0.0; psi.nrows()]),
            }
        };
        let (phi2, phi3) = (series(0)?, series(1)?);
        let score = |phi: &[f64]| if phi.iter().all(|v| *v == 0.0) { 0.0 } else { pearson(phi, &latent).unwrap_or(0.0) };
        phi2_scores.insert(method.label().to_string(), score(&phi2));
        phi3_scores.insert(method.label().to_string(), score(&phi3));
        emit(
            report,
            dir,
            &format!("nm_{}_phi.csv", method.stem()),
            &csv_table(&["t", "phi2", "phi3"], (0..phi2.len()).map(|k| vec![times[k], phi2[k], phi3[k]])),
        )?;
        traces.push((method, trained.trace.clone()));
        finish_method(config, method, &Basis::Learned(&dict), s, Some(summary), report, dir)?;
    }

    let mut header = vec!["epoch".to_string()];
    for (m, _) in &traces {
        header.push(format!("{}_loss", m.stem()));
        header.push(format!("{}_score", m.stem()));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let epochs = traces.iter().map(|(_, t)| t.losses.len()).max().unwrap_or(0);
    let trace_rows = (0..epochs).map(|e| {
        let mut row = vec![(e + 1) as f64];
        for (_, t) in &traces {
            row.push(t.losses.get(e).copied().unwrap_or(f64::NAN));
            row.push(t.scores.get(e).copied().unwrap_or(f64::NAN));
        }
        row
    });
    emit(report, dir, "nm_trace.csv", &csv_table(&header, trace_rows))?;

    let mut scores = String::from("method,phi2_pearson,phi3_pearson,selected_epoch\n");
    for &m in &config.methods {
        let l = m.label();
        let sel = if m.learned() == Some(Method::SdmdDl) { sdmd_selected } else { None };
        scores.push_str(&format!(
            "{l},{},{},{}\n",
            sdmd::io::fmt_f64(phi2_scores[l]),
            sdmd::io::fmt_f64(phi3_scores[l]),
            sel.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    emit(report, dir, "nm_scores.csv", &scores)?;

    let sd = phi2_scores.get("sdmd-dl").map(|v| v.abs());
    let ed = phi2_scores.get("edmd-dl").map(|v| v.abs());
    report.neural_mass = Some(NeuralMassReport {
        samples: ens.len(),
        regime_switches: switches,
        phi2_scores,
        phi3_scores,
        sdmd_selected_epoch: sdmd_selected,
        soft_target_met: sd.is_some_and(|v| v >= 0.8),
        sdmd_at_least_edmd: matches!((sd, ed), (Some(a), Some(b)) if a >= b),
    });
    add_deviations(config, report);
    Ok(())
}
