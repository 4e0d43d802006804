//! Euler-Maruyama integration and reproducible snapshot ensembles.
//!
//! Trajectory `k` of an ensemble draws its Gaussian increments from
//! `rng::stream(seed, k)`; initial states come from the sampler stream and the
//! latent neural-mass drive from its own stream. Results therefore do not
//! depend on how trajectories are scheduled across threads.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::{SdeCoefficients, SdeModel};
use crate::rng::{self, tags, Rng};

/// How initial states are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplerSpec {
    /// Tensor grid with `counts[i]` equispaced points on each closed interval
    /// (end points included). The last axis varies fastest.
    UniformGrid {
        domain: Vec<[f64; 2]>,
        counts: Vec<usize>,
    },
    /// `m` independent uniform draws from the box.
    UniformRandom { domain: Vec<[f64; 2]>, m: usize },
    /// A single fixed starting point.
    Point { x0: Vec<f64> },
}

impl SamplerSpec {
    pub fn dim(&self) -> usize {
        match self {
            SamplerSpec::UniformGrid { domain, .. } | SamplerSpec::UniformRandom { domain, .. } => {
                domain.len()
            }
            SamplerSpec::Point { x0 } => x0.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_domain = |domain: &[[f64; 2]]| -> Result<()> {
            if domain.is_empty() {
                return Err(Error::InvalidArgument("sampler domain is empty".into()));
            }
            for iv in domain {
                if !(iv[0].is_finite() && iv[1].is_finite() && iv[0] < iv[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "degenerate sampler interval [{}, {}]",
                        iv[0], iv[1]
                    )));
                }
            }
            Ok(())
        };
        match self {
            SamplerSpec::UniformGrid { domain, counts } => {
                check_domain(domain)?;
                check_dim(domain.len(), counts.len())?;
                if counts.iter().any(|&c| c == 0) {
                    return Err(Error::InvalidArgument("grid counts must be positive".into()));
                }
            }
            SamplerSpec::UniformRandom { domain, m } => {
                check_domain(domain)?;
                if *m == 0 {
                    return Err(Error::InvalidArgument("sample count must be positive".into()));
                }
            }
            SamplerSpec::Point { x0 } => {
                if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("invalid starting point".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match self {
            SamplerSpec::UniformGrid { counts, .. } => counts.iter().product(),
            SamplerSpec::UniformRandom { m, .. } => *m,
            SamplerSpec::Point { .. } => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `len × dim` initial states.
    pub fn sample(&self, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        let d = self.dim();
        match self {
            SamplerSpec::UniformGrid { domain, counts } => {
                let axes: Vec<Vec<f64>> = domain
                    .iter()
                    .zip(counts)
                    .map(|(iv, &c)| linspace(iv[0], iv[1], c))
                    .collect();
                let total = self.len();
                let mut out = Vec::with_capacity(total * d);
                for flat in 0..total {
                    let mut rem = flat;
                    let mut idx = vec![0; d];
                    for ax in (0..d).rev() {
                        idx[ax] = rem % counts[ax];
                        rem /= counts[ax];
                    }
                    for ax in 0..d {
                        out.push(axes[ax][idx[ax]]);
                    }
                }
                Ok(out)
            }
            SamplerSpec::UniformRandom { domain, m } => {
                let mut r = rng::stream(seed, tags::SAMPLER);
                let mut out = Vec::with_capacity(m * d);
                for _ in 0..*m {
                    for iv in domain {
                        let u: f64 = r.random();
                        out.push(iv[0] + (iv[1] - iv[0]) * u);
                    }
                }
                Ok(out)
            }
            SamplerSpec::Point { x0 } => Ok(x0.clone()),
        }
    }
}

/// `count` equispaced points on `[a, b]`, both ends included.
pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![a],
        _ => (0..count)
            .map(|i| {
                if i == count - 1 {
                    b
                } else {
                    a + (b - a) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// Sampled snapshot pairs `(x_k, y_k)` where `y_k` is `x_k` evolved by `delta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEnsemble {
    pub dim: usize,
    /// Row-major `m × dim`.
    pub x_points: Vec<f64>,
    /// Row-major `m × dim`.
    pub y_points: Vec<f64>,
    /// Per initial state, the visited states at integrator resolution.
    pub trajectories: Option<Vec<Vec<f64>>>,
    /// Latent drive in effect at each `x_k` (neural mass only).
    pub latent_inputs: Option<Vec<f64>>,
    pub delta_t: f64,
    pub substep: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl SnapshotEnsemble {
    /// Builds an ensemble from explicit pairs.
    pub fn from_pairs(dim: usize, x_points: Vec<f64>, y_points: Vec<f64>, delta_t: f64) -> Result<Self> {
        if dim == 0 || x_points.len() % dim != 0 {
            return Err(Error::InvalidArgument("x_points is not a multiple of dim".into()));
        }
        check_dim(x_points.len(), y_points.len())?;
        Ok(Self {
            dim,
            x_points,
            y_points,
            trajectories: None,
            latent_inputs: None,
            delta_t,
            substep: delta_t,
            substeps: 1,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.x_points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x_points.is_empty()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.x_points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn y(&self, k: usize) -> &[f64] {
        &self.y_points[k * self.dim..(k + 1) * self.dim]
    }
}

/// Ensemble generation switches beyond the required arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    /// Number of consecutive snapshot pairs pooled from each trajectory.
    pub snapshots_per_trajectory: usize,
    /// Keep every integrator state.
    pub store_trajectories: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            snapshots_per_trajectory: 1,
            store_trajectories: false,
        }
    }
}

fn em_update(model: &dyn SdeCoefficients, x: &[f64], h: f64, noise: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    check_dim(d, x.len())?;
    check_dim(d, noise.len())?;
    let b = model.drift(x)?;
    let s = model.diffusion(x)?;
    let sq = h.sqrt();
    let next: Vec<f64> = (0..d)
        .map(|i| {
            let kick: f64 = (0..d).map(|k| s[i * d + k] * noise[k]).sum();
            x[i] + b[i] * h + kick * sq
        })
        .collect();
    Ok(next)
}

/// One Euler-Maruyama step `x + b(x) h + σ(x) sqrt(h) ξ`.
pub fn em_step(model: &dyn SdeCoefficients, x: &[f64], h: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let next = em_update(model, x, h, noise)?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow {
            step: 0,
            state: next,
        });
    }
    Ok(next)
}

/// Path of `n_steps + 1` states starting at `x0`.
pub fn simulate_trajectory(
    model: &dyn SdeCoefficients,
    x0: &[f64],
    h: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let mut r = rng::stream(seed, 0);
    let mut noise = vec![0.0; model.dim()];
    let mut path = Vec::with_capacity(n_steps + 1);
    path.push(x0.to_vec());
    for step in 0..n_steps {
        rng::fill_standard_normal(&mut r, &mut noise);
        let next = em_step(model, &path[step], h, &noise).map_err(|e| with_step(e, step))?;
        path.push(next);
    }
    Ok(path)
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NumericalOverflow { state, .. } => Error::NumericalOverflow { step, state },
        other => other,
    }
}

/// Two-state Markov chain over `levels`, starting at `levels.0`, keeping its
/// state with probability `stay_prob` at each step.
pub fn markov_input_series(levels: (f64, f64), stay_prob: f64, n_steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, tags::INPUT);
    markov_series_from(&mut r, levels, stay_prob, n_steps)
}

fn markov_series_from(r: &mut Rng, levels: (f64, f64), stay_prob: f64, n_steps: usize) -> Result<Vec<f64>> {
    if !(stay_prob > 0.0 && stay_prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "stay probability must lie in (0, 1), got {stay_prob}"
        )));
    }
    let mut out = Vec::with_capacity(n_steps);
    let mut high = false;
    for step in 0..n_steps {
        if step > 0 {
            let u: f64 = r.random();
            if u >= stay_prob {
                high = !high;
            }
        }
        out.push(if high { levels.1 } else { levels.0 });
    }
    Ok(out)
}

struct TrajectoryOutput {
    pairs_x: Vec<f64>,
    pairs_y: Vec<f64>,
    inputs: Option<Vec<f64>>,
    path: Option<Vec<f64>>,
}

/// Simulates every sampled initial state for `delta_t` (in `substeps`
/// integrator steps) and collects the snapshot pairs.
pub fn generate_ensemble(
    model: &SdeModel,
    sampler: &SamplerSpec,
    delta_t: f64,
    substeps: usize,
    seed: u64,
    options: EnsembleOptions,
) -> Result<SnapshotEnsemble> {
    model.validate()?;
    let d = model.dim();
    check_dim(d, sampler.dim())?;
    if !(delta_t > 0.0) || substeps == 0 {
        return Err(Error::InvalidArgument(
            "delta_t must be positive and substeps at least 1".into(),
        ));
    }
    if options.snapshots_per_trajectory == 0 {
        return Err(Error::InvalidArgument("snapshots_per_trajectory must be positive".into()));
    }
    let h = delta_t / substeps as f64;
    let starts = sampler.sample(seed)?;
    let m0 = starts.len() / d;
    let n_snap = options.snapshots_per_trajectory;

    let run = |k: usize| -> Result<TrajectoryOutput> {
        let mut r = rng::stream(seed, k as u64);
        let inputs = match model {
            SdeModel::NeuralMass { params, .. } => {
                let mut ir = rng::stream(rng::mix_seed(seed, tags::INPUT), k as u64);
                Some(markov_series_from(
                    &mut ir,
                    (params.input_low, params.input_high),
                    params.stay_prob,
                    n_snap * substeps + 1,
                )?)
            }
            _ => None,
        };
        let mut x = starts[k * d..(k + 1) * d].to_vec();
        let mut noise = vec![0.0; d];
        let mut pairs_x = Vec::with_capacity(n_snap * d);
        let mut pairs_y = Vec::with_capacity(n_snap * d);
        let mut pair_inputs = inputs.as_ref().map(|_| Vec::with_capacity(n_snap));
        let mut path = options
            .store_trajectories
            .then(|| Vec::with_capacity((n_snap * substeps + 1) * d));
        if let Some(p) = path.as_mut() {
            p.extend_from_slice(&x);
        }
        let mut step = 0;
        for _ in 0..n_snap {
            pairs_x.extend_from_slice(&x);
            if let (Some(pi), Some(inp)) = (pair_inputs.as_mut(), inputs.as_ref()) {
                pi.push(inp[step]);
            }
            for _ in 0..substeps {
                rng::fill_standard_normal(&mut r, &mut noise);
                let next = match inputs.as_ref() {
                    Some(inp) => em_update(&model.with_input(inp[step]), &x, h, &noise)?,
                    None => em_update(model, &x, h, &noise)?,
                };
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalOverflow { step, state: next }.at_row(k));
                }
                x = next;
                step += 1;
                if let Some(p) = path.as_mut() {
                    p.extend_from_slice(&x);
                }
            }
            pairs_y.extend_from_slice(&x);
        }
        Ok(TrajectoryOutput {
            pairs_x,
            pairs_y,
            inputs: pair_inputs,
            path,
        })
    };

    let outputs: Vec<TrajectoryOutput> = (0..m0)
        .into_par_iter()
        .map(run)
        .collect::<Result<Vec<_>>>()?;

    let mut x_points = Vec::with_capacity(m0 * n_snap * d);
    let mut y_points = Vec::with_capacity(m0 * n_snap * d);
    let mut latent = matches!(model, SdeModel::NeuralMass { .. }).then(Vec::new);
    let mut trajectories = options.store_trajectories.then(Vec::new);
    for out in outputs {
        x_points.extend(out.pairs_x);
        y_points.extend(out.pairs_y);
        if let (Some(l), Some(i)) = (latent.as_mut(), out.inputs) {
            l.extend(i);
        }
        if let (Some(t), Some(p)) = (trajectories.as_mut(), out.path) {
            t.push(p);
        }
    }
    Ok(SnapshotEnsemble {
        dim: d,
        x_points,
        y_points,
        trajectories,
        latent_inputs: latent,
        delta_t,
        substep: h,
        substeps,
        seed,
    })
}
