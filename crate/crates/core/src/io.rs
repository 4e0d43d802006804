//! File formats: ensemble CSV pairs, spectral tables and Gram matrices.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which
//! round-trips every finite `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{Conversion, GramPair, SpectralResult};
use crate::models::SdeModel;
use crate::simulate::{SamplerSpec, SnapshotEnsemble};
use crate::Complex64;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Formats one float for CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders a header line plus rows of floats.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Parses a CSV with a header line into rows of floats.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::Parse(format!(
                "line {}: expected {} columns, found {}",
                i + 2,
                header.len(),
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Sidecar describing how an ensemble was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMetadata {
    pub model: Option<SdeModel>,
    pub sampler: Option<SamplerSpec>,
    pub dim: usize,
    pub samples: usize,
    pub delta_t: f64,
    pub substep: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl EnsembleMetadata {
    pub fn describe(ensemble: &SnapshotEnsemble, model: Option<&SdeModel>, sampler: Option<&SamplerSpec>) -> Self {
        Self {
            model: model.cloned(),
            sampler: sampler.cloned(),
            dim: ensemble.dim,
            samples: ensemble.len(),
            delta_t: ensemble.delta_t,
            substep: ensemble.substep,
            substeps: ensemble.substeps,
            seed: ensemble.seed,
        }
    }
}

/// Locations of the three files making up an exported ensemble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsemblePaths {
    pub x: PathBuf,
    pub y: PathBuf,
    pub metadata: PathBuf,
}

impl EnsemblePaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            x: dir.join(format!("{stem}_x.csv")),
            y: dir.join(format!("{stem}_y.csv")),
            metadata: dir.join(format!("{stem}_meta.json")),
        }
    }
}

fn point_table(dim: usize, points: &[f64]) -> String {
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_table(&header, points.chunks(dim).map(<[f64]>::to_vec))
}

fn read_points(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let (header, rows) = parse_csv(&read_text(path)?).map_err(|e| annotate(path, e))?;
    if header.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: header.len(),
        });
    }
    Ok(rows.into_iter().flatten().collect())
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Writes `{stem}_x.csv`, `{stem}_y.csv` and `{stem}_meta.json` under `dir`.
pub fn write_ensemble(dir: &Path, stem: &str, ensemble: &SnapshotEnsemble, meta: &EnsembleMetadata) -> Result<EnsemblePaths> {
    let paths = EnsemblePaths::new(dir, stem);
    write_atomic(&paths.x, point_table(ensemble.dim, &ensemble.x_points).as_bytes())?;
    write_atomic(&paths.y, point_table(ensemble.dim, &ensemble.y_points).as_bytes())?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(&paths.metadata, json.as_bytes())?;
    Ok(paths)
}

/// Reads an ensemble written by [`write_ensemble`]. Stored trajectories and
/// latent inputs are not part of the format.
pub fn read_ensemble(dir: &Path, stem: &str) -> Result<(SnapshotEnsemble, EnsembleMetadata)> {
    let paths = EnsemblePaths::new(dir, stem);
    let meta: EnsembleMetadata = serde_json::from_str(&read_text(&paths.metadata)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", paths.metadata.display())))?;
    let x = read_points(&paths.x, meta.dim)?;
    let y = read_points(&paths.y, meta.dim)?;
    if x.len() != meta.samples * meta.dim {
        return Err(Error::DimensionMismatch {
            expected: meta.samples,
            got: x.len() / meta.dim.max(1),
        });
    }
    let mut ensemble = SnapshotEnsemble::from_pairs(meta.dim, x, y, meta.delta_t)?;
    ensemble.substep = meta.substep;
    ensemble.substeps = meta.substeps;
    ensemble.seed = meta.seed;
    Ok((ensemble, meta))
}

/// Eigenvalue table with columns `index, re_mu, im_mu, re_lambda, im_lambda`.
pub fn spectrum_csv(result: &SpectralResult) -> String {
    csv_table(
        &["index", "re_mu", "im_mu", "re_lambda", "im_lambda"],
        result
            .semigroup_eigs
            .iter()
            .zip(&result.generator_eigs)
            .enumerate()
            .map(|(k, (mu, la))| vec![k as f64, mu.re, mu.im, la.re, la.im]),
    )
}

/// Coefficient matrix with one row per dictionary element and a
/// `re_k, im_k` column pair per eigenfunction.
pub fn complex_matrix_csv(mat: &Mat<Complex64>) -> String {
    let mut header = String::new();
    for j in 0..mat.ncols() {
        if j > 0 {
            header.push(',');
        }
        let _ = write!(header, "re_{j},im_{j}");
    }
    let header: Vec<&str> = header.split(',').filter(|h| !h.is_empty()).collect();
    csv_table(
        &header,
        (0..mat.nrows()).map(|i| (0..mat.ncols()).flat_map(|j| [mat[(i, j)].re, mat[(i, j)].im]).collect()),
    )
}

/// Inverse of [`complex_matrix_csv`].
pub fn parse_complex_matrix(text: &str) -> Result<Mat<Complex64>> {
    let (header, rows) = parse_csv(text)?;
    if header.len() % 2 != 0 {
        return Err(Error::Parse("complex matrix needs re/im column pairs".into()));
    }
    let ncols = header.len() / 2;
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| {
        Complex64::new(rows[i][2 * j], rows[i][2 * j + 1])
    }))
}

/// Writes `{stem}_eigenvalues.csv` and `{stem}_eigenvectors.csv`.
pub fn write_spectrum(dir: &Path, stem: &str, result: &SpectralResult) -> Result<(PathBuf, PathBuf)> {
    let values = dir.join(format!("{stem}_eigenvalues.csv"));
    let vectors = dir.join(format!("{stem}_eigenvectors.csv"));
    write_atomic(&values, spectrum_csv(result).as_bytes())?;
    write_atomic(&vectors, complex_matrix_csv(&result.coeffs).as_bytes())?;
    Ok((values, vectors))
}

/// Reads a spectrum written by [`write_spectrum`].
pub fn read_spectrum(dir: &Path, stem: &str, delta_t: f64, conversion: Conversion) -> Result<SpectralResult> {
    let values = dir.join(format!("{stem}_eigenvalues.csv"));
    let vectors = dir.join(format!("{stem}_eigenvectors.csv"));
    let (_, rows) = parse_csv(&read_text(&values)?).map_err(|e| annotate(&values, e))?;
    if rows.iter().any(|r| r.len() != 5) {
        return Err(Error::Parse(format!("{}: expected 5 columns", values.display())));
    }
    let coeffs = parse_complex_matrix(&read_text(&vectors)?).map_err(|e| annotate(&vectors, e))?;
    if coeffs.ncols() != rows.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            got: coeffs.ncols(),
        });
    }
    Ok(SpectralResult {
        semigroup_eigs: rows.iter().map(|r| Complex64::new(r[1], r[2])).collect(),
        generator_eigs: rows.iter().map(|r| Complex64::new(r[3], r[4])).collect(),
        coeffs,
        delta_t,
        conversion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GramMetadata {
    size: usize,
    m: usize,
    gamma: f64,
    delta_t: f64,
}

/// Writes `{stem}_G.csv`, `{stem}_H.csv` and `{stem}_meta.json`.
pub fn write_gram_pair(dir: &Path, stem: &str, gp: &GramPair) -> Result<[PathBuf; 3]> {
    let g = dir.join(format!("{stem}_G.csv"));
    let h = dir.join(format!("{stem}_H.csv"));
    let meta = dir.join(format!("{stem}_meta.json"));
    write_atomic(&g, complex_matrix_csv(&gp.g).as_bytes())?;
    write_atomic(&h, complex_matrix_csv(&gp.h).as_bytes())?;
    let json = serde_json::to_string_pretty(&GramMetadata {
        size: gp.dim(),
        m: gp.m,
        gamma: gp.gamma,
        delta_t: gp.delta_t,
    })
    .map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(&meta, json.as_bytes())?;
    Ok([g, h, meta])
}

/// Reads a Gram pair written by [`write_gram_pair`], re-running validation.
pub fn read_gram_pair(dir: &Path, stem: &str) -> Result<GramPair> {
    let g = dir.join(format!("{stem}_G.csv"));
    let h = dir.join(format!("{stem}_H.csv"));
    let meta = dir.join(format!("{stem}_meta.json"));
    let meta: GramMetadata =
        serde_json::from_str(&read_text(&meta)?).map_err(|e| Error::Parse(format!("{}: {e}", meta.display())))?;
    let gm = parse_complex_matrix(&read_text(&g)?).map_err(|e| annotate(&g, e))?;
    let hm = parse_complex_matrix(&read_text(&h)?).map_err(|e| annotate(&h, e))?;
    if gm.nrows() != meta.size {
        return Err(Error::DimensionMismatch {
            expected: meta.size,
            got: gm.nrows(),
        });
    }
    GramPair::from_matrices(gm, hm, meta.m, Some(meta.gamma), meta.delta_t)
}
