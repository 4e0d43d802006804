//! Drift and diffusion estimation from snapshot pairs.
//!
//! The next state is predicted by a least-squares affine fit inside each cell
//! of a uniform bin grid. Drift is `(ŷ(x) − x)/Δt`, and the diagonal diffusion
//! is `sqrt(mean r² / Δt)` with `r = y − ŷ(x)` the in-cell residuals.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::SdeCoefficients;
use crate::simulate::SnapshotEnsemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_bins")]
    pub bins_per_axis: usize,
    /// Bin grid extent; the data bounding box when absent.
    #[serde(default)]
    pub domain: Option<Vec<[f64; 2]>>,
}

fn default_bins() -> usize {
    50
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            bins_per_axis: default_bins(),
            domain: None,
        }
    }
}

/// Affine next-state predictor of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFit {
    pub count: usize,
    /// Expansion point of the affine model (sample mean of the cell).
    pub anchor: Vec<f64>,
    /// Row-major `dim × (dim + 1)`: `ŷ_i = c_i0 + Σ_k c_i(k+1) (x_k − anchor_k)`.
    pub coef: Vec<f64>,
    /// Per-axis mean squared residual; empty until the diffusion fit.
    pub residual_var: Vec<f64>,
}

/// Binned drift/diffusion estimate usable wherever model coefficients are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimate {
    pub dim: usize,
    pub delta_t: f64,
    pub bins_per_axis: usize,
    pub domain: Vec<[f64; 2]>,
    pub sample_count: usize,
    /// Row-major over axes, last axis fastest; `None` for cells without
    /// enough samples for an affine fit.
    pub bins: Vec<Option<BinFit>>,
}

/// Result of a query together with whether it left the fitted region.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub value: Vec<f64>,
    pub extrapolated: bool,
}

fn bounding_box(points: &[f64], dim: usize) -> Vec<[f64; 2]> {
    let mut dom = vec![[f64::INFINITY, f64::NEG_INFINITY]; dim];
    for x in points.chunks(dim) {
        for (i, v) in x.iter().enumerate() {
            dom[i][0] = dom[i][0].min(*v);
            dom[i][1] = dom[i][1].max(*v);
        }
    }
    for d in dom.iter_mut() {
        if d[1] <= d[0] {
            d[0] -= 0.5;
            d[1] += 0.5;
        }
    }
    dom
}

impl CoefficientEstimate {
    fn cell_coords(&self, x: &[f64]) -> (Vec<usize>, bool) {
        let b = self.bins_per_axis;
        let mut outside = false;
        let coords = x
            .iter()
            .zip(&self.domain)
            .map(|(v, [lo, hi])| {
                if v < lo || v > hi {
                    outside = true;
                }
                let t = ((v - lo) / (hi - lo) * b as f64).floor();
                t.clamp(0.0, (b - 1) as f64) as usize
            })
            .collect();
        (coords, outside)
    }

    fn flat(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, c| acc * self.bins_per_axis + c)
    }

    fn cell_index(&self, x: &[f64]) -> Option<usize> {
        let (c, outside) = self.cell_coords(x);
        (!outside).then(|| self.flat(&c))
    }

    /// Fitted cell containing `x`, or the nearest fitted cell by grid distance.
    fn locate(&self, x: &[f64]) -> Result<(&BinFit, bool)> {
        check_dim(self.dim, x.len())?;
        let (c, outside) = self.cell_coords(x);
        if let Some(fit) = &self.bins[self.flat(&c)] {
            return Ok((fit, outside));
        }
        let b = self.bins_per_axis;
        let mut best: Option<(usize, usize)> = None;
        for (k, fit) in self.bins.iter().enumerate() {
            if fit.is_none() {
                continue;
            }
            let mut rem = k;
            let mut dist = 0;
            for axis in (0..self.dim).rev() {
                let ck = rem % b;
                rem /= b;
                dist += ck.abs_diff(c[axis]).pow(2);
            }
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((k, dist));
            }
        }
        let (k, _) = best.ok_or_else(|| Error::InsufficientData("no fitted bins".into()))?;
        Ok((self.bins[k].as_ref().expect("fitted"), true))
    }

    /// Predicted next state `ŷ(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<Query> {
        let (fit, extrapolated) = self.locate(x)?;
        let d = self.dim;
        let value = (0..d)
            .map(|i| {
                let row = &fit.coef[i * (d + 1)..(i + 1) * (d + 1)];
                row[0]
                    + (0..d)
                        .map(|k| row[k + 1] * (self.clamp_axis(k, x[k]) - fit.anchor[k]))
                        .sum::<f64>()
            })
            .collect();
        Ok(Query { value, extrapolated })
    }

    fn clamp_axis(&self, k: usize, v: f64) -> f64 {
        v.clamp(self.domain[k][0], self.domain[k][1])
    }

    /// `b̂(x) = (ŷ(x) − x)/Δt`.
    pub fn drift_query(&self, x: &[f64]) -> Result<Query> {
        let mut q = self.predict(x)?;
        for (v, xi) in q.value.iter_mut().zip(x) {
            *v = (*v - xi) / self.delta_t;
        }
        Ok(q)
    }

    /// Diagonal of `σ̂(x)`.
    pub fn diffusion_query(&self, x: &[f64]) -> Result<Query> {
        let (fit, extrapolated) = self.locate(x)?;
        if fit.residual_var.is_empty() {
            return Err(Error::NotAvailable("diffusion has not been estimated".into()));
        }
        let value = fit
            .residual_var
            .iter()
            .map(|v| (v / self.delta_t).sqrt())
            .collect();
        Ok(Query { value, extrapolated })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn affine_fit(xs: &[&[f64]], ys: &[&[f64]], dim: usize) -> BinFit {
    let n = xs.len();
    let p = dim + 1;
    let mut anchor = vec![0.0; dim];
    for x in xs {
        for k in 0..dim {
            anchor[k] += x[k] / n as f64;
        }
    }
    let design = |r: usize, c: usize| if c == 0 { 1.0 } else { xs[r][c - 1] - anchor[c - 1] };
    let mut ata = Mat::<f64>::zeros(p, p);
    let mut aty = Mat::<f64>::zeros(p, dim);
    for r in 0..n {
        for a in 0..p {
            let da = design(r, a);
            for b in 0..p {
                ata[(a, b)] += da * design(r, b);
            }
            for i in 0..dim {
                aty[(a, i)] += da * ys[r][i];
            }
        }
    }
    let mut coef = vec![0.0; dim * p];
    match ata.llt(Side::Lower) {
        Ok(llt) => {
            let sol = llt.solve(&aty);
            for i in 0..dim {
                for a in 0..p {
                    coef[i * p + a] = sol[(a, i)];
                }
            }
        }
        // Collinear inputs: constant predictor.
        Err(_) => {
            for i in 0..dim {
                coef[i * p] = ys.iter().map(|y| y[i]).sum::<f64>() / n as f64;
            }
        }
    }
    BinFit {
        count: n,
        anchor,
        coef,
        residual_var: Vec::new(),
    }
}

/// Least-squares next-state predictor on a uniform bin grid.
pub fn estimate_drift(data: &SnapshotEnsemble, config: &EstimatorConfig) -> Result<CoefficientEstimate> {
    let d = data.dim;
    if !(data.delta_t > 0.0) {
        return Err(Error::InvalidArgument("delta_t must be positive".into()));
    }
    if config.bins_per_axis == 0 {
        return Err(Error::InvalidArgument("bins_per_axis must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("no snapshot pairs".into()));
    }
    let domain = match &config.domain {
        Some(dom) => {
            check_dim(d, dom.len())?;
            if dom.iter().any(|[a, b]| !(b > a)) {
                return Err(Error::InvalidArgument("degenerate estimator domain".into()));
            }
            dom.clone()
        }
        None => bounding_box(&data.x_points, d),
    };
    let total = config
        .bins_per_axis
        .checked_pow(d as u32)
        .ok_or_else(|| Error::InvalidArgument("too many bins".into()))?;
    let mut est = CoefficientEstimate {
        dim: d,
        delta_t: data.delta_t,
        bins_per_axis: config.bins_per_axis,
        domain,
        sample_count: data.len(),
        bins: vec![None; total],
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); total];
    for k in 0..data.len() {
        if let Some(c) = est.cell_index(data.x(k)) {
            members[c].push(k);
        }
    }
    for (c, idx) in members.iter().enumerate() {
        if idx.len() < d + 2 {
            continue;
        }
        let xs: Vec<&[f64]> = idx.iter().map(|&k| data.x(k)).collect();
        let ys: Vec<&[f64]> = idx.iter().map(|&k| data.y(k)).collect();
        est.bins[c] = Some(affine_fit(&xs, &ys, d));
    }
    if est.bins.iter().all(Option::is_none) {
        return Err(Error::InsufficientData(format!(
            "no bin holds at least {} samples",
            d + 2
        )));
    }
    Ok(est)
}

/// Adds per-cell residual variances to a drift estimate fitted on `data`.
pub fn estimate_diffusion(data: &SnapshotEnsemble, drift: CoefficientEstimate) -> Result<CoefficientEstimate> {
    check_dim(drift.dim, data.dim)?;
    if drift.delta_t != data.delta_t {
        return Err(Error::InvalidArgument("drift was fitted with a different delta_t".into()));
    }
    let d = drift.dim;
    let mut sums = vec![vec![0.0; d]; drift.bins.len()];
    let mut counts = vec![0usize; drift.bins.len()];
    for k in 0..data.len() {
        let x = data.x(k);
        let Some(c) = drift.cell_index(x) else { continue };
        if drift.bins[c].is_none() {
            continue;
        }
        let yhat = drift.predict(x)?.value;
        for i in 0..d {
            sums[c][i] += (data.y(k)[i] - yhat[i]).powi(2);
        }
        counts[c] += 1;
    }
    let mut est = drift;
    for (c, fit) in est.bins.iter_mut().enumerate() {
        if let Some(fit) = fit {
            fit.residual_var = sums[c].iter().map(|s| s / counts[c].max(1) as f64).collect();
        }
    }
    Ok(est)
}

/// Drift followed by diffusion.
pub fn estimate_coefficients(data: &SnapshotEnsemble, config: &EstimatorConfig) -> Result<CoefficientEstimate> {
    let drift = estimate_drift(data, config)?;
    estimate_diffusion(data, drift)
}

impl SdeCoefficients for CoefficientEstimate {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.drift_query(x)?.value)
    }

    fn diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        let diag = self.diffusion_query(x)?.value;
        let d = self.dim;
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            s[i * d + i] = diag[i];
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SdeModel;
    use crate::simulate::{generate_ensemble, EnsembleOptions, SamplerSpec};

    fn ou_pairs(sigma: f64, m: usize, seed: u64) -> SnapshotEnsemble {
        let model = SdeModel::ou(1.0, 0.0, sigma).unwrap();
        let sampler = SamplerSpec::UniformRandom {
            domain: vec![[-2.0, 2.0]],
            m,
        };
        generate_ensemble(&model, &sampler, 0.05, 50, seed, EnsembleOptions::default()).unwrap()
    }

    fn cfg(bins: usize) -> EstimatorConfig {
        EstimatorConfig {
            bins_per_axis: bins,
            domain: Some(vec![[-2.0, 2.0]]),
        }
    }

    fn max_drift_error(est: &CoefficientEstimate) -> f64 {
        (0..=60)
            .map(|i| {
                let x = -1.5 + 3.0 * i as f64 / 60.0;
                (est.drift(&[x]).unwrap()[0] + x).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn noiseless_linear_data_is_reproduced() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.9 * x).collect();
        let dt = 0.105;
        let data = SnapshotEnsemble::from_pairs(1, xs.clone(), ys.clone(), dt).unwrap();
        let est = estimate_coefficients(&data, &cfg(10)).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let b = est.drift(&[*x]).unwrap()[0];
            assert!((b - (y - x) / dt).abs() < 1e-10);
            assert!((b + 0.952_380_952_380_952_4 * x).abs() < 1e-10);
            assert!(est.diffusion(&[*x]).unwrap()[0] < 1e-6);
        }
    }

    #[test]
    fn stationary_data_has_zero_drift() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let data = SnapshotEnsemble::from_pairs(1, xs.clone(), xs, 0.1).unwrap();
        let est = estimate_coefficients(&data, &cfg(10)).unwrap();
        for x in [0.0, 0.33, 0.9] {
            assert!(est.drift(&[x]).unwrap()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn ou_drift_and_diffusion() {
        let data = ou_pairs(0.1, 100_000, 8);
        let est = estimate_coefficients(&data, &cfg(50)).unwrap();
        assert!(max_drift_error(&est) <= 0.1);
        let s: Vec<f64> = (0..=40)
            .map(|i| est.diffusion(&[-1.0 + 2.0 * i as f64 / 40.0]).unwrap()[0])
            .collect();
        let mean = crate::stats::mean(&s);
        assert!((mean - 0.1).abs() <= 0.02, "{mean}");
        assert!(s.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn doubling_noise_doubles_diffusion() {
        let avg = |sigma: f64| {
            let est = estimate_coefficients(&ou_pairs(sigma, 50_000, 3), &cfg(20)).unwrap();
            crate::stats::mean(
                &(0..=20)
                    .map(|i| est.diffusion(&[-1.0 + 0.1 * i as f64]).unwrap()[0])
                    .collect::<Vec<_>>(),
            )
        };
        let ratio = avg(0.2) / avg(0.1);
        assert!((ratio - 2.0).abs() <= 0.2, "{ratio}");
    }

    #[test]
    fn more_data_does_not_hurt() {
        let small = estimate_drift(&ou_pairs(0.1, 10_000, 1), &cfg(20)).unwrap();
        let big = estimate_drift(&ou_pairs(0.1, 100_000, 1), &cfg(20)).unwrap();
        assert!(max_drift_error(&big) <= 1.2 * max_drift_error(&small));
    }

    #[test]
    fn empty_cells_fall_back_to_neighbours() {
        let xs: Vec<f64> = (0..50).map(|i| 0.5 + i as f64 / 100.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.9 * x).collect();
        let data = SnapshotEnsemble::from_pairs(1, xs, ys, 0.1).unwrap();
        let est = estimate_coefficients(
            &data,
            &EstimatorConfig {
                bins_per_axis: 4,
                domain: Some(vec![[0.0, 2.0]]),
            },
        )
        .unwrap();
        let q = est.drift_query(&[1.8]).unwrap();
        assert!(q.extrapolated);
        let q = est.drift_query(&[0.7]).unwrap();
        assert!(!q.extrapolated);
        assert!(est.drift_query(&[5.0]).unwrap().extrapolated);

        let too_few = SnapshotEnsemble::from_pairs(1, vec![0.1, 0.2], vec![0.1, 0.2], 0.1).unwrap();
        assert!(matches!(
            estimate_drift(&too_few, &EstimatorConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn json_roundtrip() {
        let est = estimate_coefficients(&ou_pairs(0.1, 2000, 5), &cfg(8)).unwrap();
        let back = CoefficientEstimate::from_json(&est.to_json().unwrap()).unwrap();
        assert_eq!(est, back);
    }
}
