//! Experiment configuration: JSON with per-experiment defaults.
//!
//! A user file is merged over the defaults of its `experiment` and the result
//! is deserialized strictly, so unknown keys anywhere are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sdmd::dictionary::{DictionarySpec, FixedDictionary, Observables};
use sdmd::estimate::EstimatorConfig;
use sdmd::koopman::Conversion;
use sdmd::learn::{Method, NetworkSpec, TrainConfig};
use sdmd::models::{SdeCoefficients, SdeModel};
use sdmd::simulate::SamplerSpec;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "ou")]
    Ou,
    #[serde(rename = "stuart-landau")]
    StuartLandau,
    #[serde(rename = "triple-well")]
    TripleWell,
    #[serde(rename = "neural-mass")]
    NeuralMass,
    #[serde(rename = "convergence-m")]
    ConvergenceM,
    #[serde(rename = "convergence-dt")]
    ConvergenceDt,
    #[serde(rename = "convergence-N", alias = "convergence-n")]
    ConvergenceN,
    #[serde(rename = "custom")]
    Custom,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ou => "ou",
            Experiment::StuartLandau => "stuart-landau",
            Experiment::TripleWell => "triple-well",
            Experiment::NeuralMass => "neural-mass",
            Experiment::ConvergenceM => "convergence-m",
            Experiment::ConvergenceDt => "convergence-dt",
            Experiment::ConvergenceN => "convergence-N",
            Experiment::Custom => "custom",
        }
    }

    pub fn is_convergence(self) -> bool {
        matches!(
            self,
            Experiment::ConvergenceM | Experiment::ConvergenceDt | Experiment::ConvergenceN
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Sdmd,
    Edmd,
    Gedmd,
    SdmdDl,
    EdmdDl,
    GedmdDl,
}

impl MethodName {
    /// Training method for dictionary-learning variants.
    pub fn learned(self) -> Option<Method> {
        match self {
            MethodName::SdmdDl => Some(Method::SdmdDl),
            MethodName::EdmdDl => Some(Method::EdmdDl),
            MethodName::GedmdDl => Some(Method::GedmdDl),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MethodName::Sdmd => "sdmd",
            MethodName::Edmd => "edmd",
            MethodName::Gedmd => "gedmd",
            MethodName::SdmdDl => "sdmd-dl",
            MethodName::EdmdDl => "edmd-dl",
            MethodName::GedmdDl => "gedmd-dl",
        }
    }

    /// File-name stem.
    pub fn stem(self) -> String {
        self.label().replace('-', "_")
    }

    /// Needs drift and diffusion at the samples.
    pub fn needs_coefficients(self) -> bool {
        !matches!(self, MethodName::Edmd | MethodName::EdmdDl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientSource {
    Analytic,
    Estimated,
}

/// Trainer settings shared by all learned methods of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub learning_rate: f64,
    /// Tikhonov weight on `‖K‖_F²`.
    pub gamma: f64,
    pub outer_epochs: usize,
    pub inner_steps: usize,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: bool,
    /// Seed of the network initialization.
    pub init_seed: u64,
    /// Relative eigenvalue cutoff of the learned Gram matrix.
    pub rank_tol: f64,
}

impl TrainingSettings {
    pub fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            learning_rate: self.learning_rate,
            gamma: self.gamma,
            outer_epochs: self.outer_epochs,
            inner_steps: self.inner_steps,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: self.init_seed,
        }
    }
}

/// Evaluation grid for eigenfunction exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lattice {
    pub domain: Vec<[f64; 2]>,
    pub counts: Vec<usize>,
    /// Number of slowest modes exported.
    pub modes: usize,
}

/// Grids of the convergence studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub sample_sizes: Vec<usize>,
    #[serde(default)]
    pub trials: usize,
    #[serde(default)]
    pub time_steps: Vec<f64>,
    #[serde(default)]
    pub degrees: Vec<usize>,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: Experiment,
    pub model: SdeModel,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub dictionary: Option<DictionarySpec>,
    pub methods: Vec<MethodName>,
    /// Regularization of fixed-dictionary solves; relative default when absent.
    #[serde(default)]
    pub gamma: Option<f64>,
    pub delta_t: f64,
    pub substeps: usize,
    pub snapshots_per_trajectory: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Directory holding an `ensemble_*` export to use instead of simulating.
    #[serde(default)]
    pub ensemble: Option<PathBuf>,
    pub coefficients: CoefficientSource,
    pub estimator: EstimatorConfig,
    pub conversion: Conversion,
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    #[serde(default)]
    pub training: Option<TrainingSettings>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub lattice: Option<Lattice>,
    /// States at which the slowest eigenfunctions are reported.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    /// Analytic or tabulated reference modes to match: OU `n < references`,
    /// Stuart-Landau `l = 0, |n| ≤ references`, triple-well the first
    /// `references` tabulated values.
    pub references: usize,
}

fn common_defaults(experiment: Experiment) -> Value {
    json!({
        "experiment": experiment.name(),
        "substeps": 100,
        "snapshots_per_trajectory": 1,
        "seed": 1,
        "output_dir": format!("runs/{}", experiment.name()),
        "coefficients": "analytic",
        "estimator": {"bins_per_axis": 50},
        "conversion": "linearized",
        "references": 0,
    })
}

fn ou_base() -> Value {
    json!({
        "model": {"model": "ou", "theta": 1.0, "mu0": 0.0, "sigma": 0.1},
        "sampler": {"kind": "uniform-random", "domain": [[-2.0, 2.0]], "m": 4000},
        "dictionary": {"family": "monomial", "dim": 1, "max_degree": 5},
        "methods": ["sdmd"],
        "delta_t": 0.1,
    })
}

fn experiment_defaults(experiment: Experiment) -> Value {
    let pi = std::f64::consts::PI;
    match experiment {
        Experiment::Ou => merge(
            ou_base(),
            json!({
                "network": {"hidden": [32, 32], "n_learned": 18},
                "training": {"learning_rate": 1e-3, "gamma": 0.1, "outer_epochs": 300,
                             "inner_steps": 2, "momentum": true, "init_seed": 1, "rank_tol": 1e-6},
                "references": 6,
                "lattice": {"domain": [[-2.0, 2.0]], "counts": [101], "modes": 4},
            }),
        ),
        Experiment::StuartLandau => json!({
            "model": {"model": "stuart-landau", "coordinates": "polar",
                      "params": {"delta": 0.25, "kappa": 1.0, "epsilon": 0.05, "gamma": 1.0, "beta": 1.0}},
            "sampler": {"kind": "uniform-grid", "domain": [[0.4, 0.8], [-pi, pi]], "counts": [20, 20]},
            "dictionary": {"family": "fourier", "angular_modes": 9, "radial_modes": 3, "r_min": 0.2, "r_max": 1.0},
            "methods": ["sdmd"],
            "delta_t": 0.1,
            "substeps": 10000,
            "references": 5,
            "lattice": {"domain": [[0.4, 0.8], [-pi, pi]], "counts": [40, 80], "modes": 4},
        }),
        Experiment::TripleWell => json!({
            "model": {"model": "triple-well", "noise": [1.09, 1.09]},
            "sampler": {"kind": "uniform-grid", "domain": [[-2.0, 2.0], [-1.0, 2.0]], "counts": [35, 35]},
            "dictionary": {"family": "monomial", "dim": 2, "max_degree": 3},
            "methods": ["sdmd-dl"],
            "delta_t": 0.1,
            "network": {"hidden": [64, 64], "n_learned": 7},
            "training": {"learning_rate": 1e-5, "gamma": 1.0, "outer_epochs": 300,
                         "inner_steps": 2, "momentum": false, "init_seed": 3, "rank_tol": 1e-6},
            "references": 3,
            "lattice": {"domain": [[-2.0, 2.0], [-1.0, 2.0]], "counts": [100, 75], "modes": 3},
            "probes": [[-1.0, 0.0], [1.0, 0.0]],
        }),
        Experiment::NeuralMass => json!({
            "model": {"model": "neural-mass", "input": -10.0,
                      "params": {"delta": 1.0, "j": 15.0, "sigma_r": 0.01, "sigma_v": 0.01,
                                 "input_low": -10.0, "input_high": -2.0, "stay_prob": 0.999}},
            "sampler": {"kind": "point", "x0": [0.5, -2.0]},
            "methods": ["sdmd-dl", "edmd-dl"],
            "delta_t": 0.01,
            "substeps": 1,
            "snapshots_per_trajectory": 60000,
            "coefficients": "estimated",
            "estimator": {"bins_per_axis": 20},
            "network": {"hidden": [50, 50], "n_learned": 25},
            "training": {"learning_rate": 1e-6, "gamma": 1.0, "outer_epochs": 300,
                         "inner_steps": 2, "momentum": false, "init_seed": 1, "rank_tol": 1e-6},
        }),
        Experiment::ConvergenceM => merge(
            ou_base(),
            json!({
                "dictionary": {"family": "monomial", "dim": 1, "max_degree": 3},
                "sweep": {"sample_sizes": [1000, 4000, 16000], "trials": 50},
            }),
        ),
        Experiment::ConvergenceDt => merge(
            ou_base(),
            json!({
                "dictionary": {"family": "monomial", "dim": 1, "max_degree": 2},
                "sweep": {"time_steps": [1e-3, 3e-3, 1e-2, 3e-2, 1e-1]},
                "probes": [[1.0]],
            }),
        ),
        Experiment::ConvergenceN => merge(
            ou_base(),
            json!({"sweep": {"degrees": [2, 3, 4, 5, 6]}, "references": 2}),
        ),
        Experiment::Custom => json!({}),
    }
}

const TAG_KEYS: [&str; 3] = ["model", "kind", "family"];

/// Recursive object merge of `over` onto `base`. Objects whose variant tag
/// differs are replaced instead of merged; arrays and scalars are replaced.
pub fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Object(mut b), Value::Object(o)) => {
            let retagged = TAG_KEYS.iter().any(|t| {
                matches!((b.get(*t), o.get(*t)), (Some(Value::String(x)), Some(Value::String(y))) if x != y)
            });
            if retagged {
                return Value::Object(o);
            }
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, over) => over,
    }
}

impl Config {
    /// Parses user JSON, fills the defaults of its experiment and validates.
    pub fn resolve(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        let experiment: Experiment = user
            .get("experiment")
            .cloned()
            .ok_or_else(|| LabError::Config("missing field `experiment`".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| LabError::Config(e.to_string())))?;
        let defaults = merge(common_defaults(experiment), experiment_defaults(experiment));
        let config: Config =
            serde_json::from_value(merge(defaults, user)).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Defaults of `experiment` without user overrides.
    pub fn preset(experiment: Experiment) -> Result<Self> {
        Self::resolve(&json!({"experiment": experiment.name()}).to_string())
    }

    /// Checks every referenced parameter before any computation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        self.model.validate().map_err(|e| LabError::Config(format!("model: {e}")))?;
        self.sampler.validate().map_err(|e| LabError::Config(format!("sampler: {e}")))?;
        let d = self.model.dim();
        if self.sampler.dim() != d {
            return bad(format!("sampler dimension {} does not match model dimension {d}", self.sampler.dim()));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return bad(format!("delta_t must be positive, got {}", self.delta_t));
        }
        if self.substeps == 0 || self.snapshots_per_trajectory == 0 {
            return bad("substeps and snapshots_per_trajectory must be positive".into());
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma must be finite and ≥ 0, got {g}"));
            }
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if let Some(spec) = &self.dictionary {
            let dict = FixedDictionary::new(spec.clone()).map_err(|e| LabError::Config(format!("dictionary: {e}")))?;
            if dict.dim() != d {
                return bad(format!("dictionary dimension {} does not match model dimension {d}", dict.dim()));
            }
        }
        let fixed = self.methods.iter().any(|m| m.learned().is_none());
        if fixed && self.dictionary.is_none() && !self.experiment.is_convergence() {
            return bad("fixed-dictionary methods need `dictionary`".into());
        }
        if self.methods.iter().any(|m| m.learned().is_some()) {
            let (Some(net), Some(tr)) = (&self.network, &self.training) else {
                return bad("learned methods need `network` and `training`".into());
            };
            if net.hidden.is_empty() || net.hidden.len() > 2 || net.hidden.contains(&0) || net.n_learned == 0 {
                return bad("network needs one or two positive hidden widths and n_learned > 0".into());
            }
            tr.train_config(Method::SdmdDl)
                .validate()
                .map_err(|e| LabError::Config(format!("training: {e}")))?;
            if tr.inner_steps == 0 {
                return bad("training.inner_steps must be positive".into());
            }
            if !(0.0..1.0).contains(&tr.rank_tol) {
                return bad(format!("training.rank_tol must lie in [0, 1), got {}", tr.rank_tol));
            }
        }
        if self.estimator.bins_per_axis == 0 {
            return bad("estimator.bins_per_axis must be positive".into());
        }
        if let Some(l) = &self.lattice {
            if l.domain.len() != d || l.counts.len() != d || l.counts.contains(&0) {
                return bad("lattice domain and counts must match the model dimension".into());
            }
            if l.domain.iter().any(|iv| !(iv[0] < iv[1])) {
                return bad("lattice intervals must be increasing".into());
            }
        }
        if let Some(p) = self.probes.iter().find(|p| p.len() != d) {
            return bad(format!("probe {p:?} does not match model dimension {d}"));
        }
        self.validate_experiment()
    }

    fn validate_experiment(&self) -> Result<()> {
        let bad = |msg: &str| Err(LabError::Config(format!("{}: {msg}", self.experiment.name())));
        let is_ou = matches!(self.model, SdeModel::Ou(_));
        let sweep = self.sweep.as_ref();
        match self.experiment {
            Experiment::ConvergenceM => {
                let ok_dict = matches!(self.dictionary, Some(DictionarySpec::Monomial { dim: 1, .. }));
                let ok_sampler = matches!(&self.sampler, SamplerSpec::UniformRandom { domain, .. } if domain.len() == 1);
                if !(is_ou && ok_dict && ok_sampler) {
                    return bad("needs an OU model, a 1D monomial dictionary and a uniform-random sampler");
                }
                match sweep {
                    Some(s) if !s.sample_sizes.is_empty() && !s.sample_sizes.contains(&0) && s.trials > 0 => {}
                    _ => return bad("sweep.sample_sizes and sweep.trials must be positive"),
                }
            }
            Experiment::ConvergenceDt => {
                if !(is_ou && matches!(self.dictionary, Some(DictionarySpec::Monomial { dim: 1, .. }))) {
                    return bad("needs an OU model and a 1D monomial dictionary");
                }
                match sweep {
                    Some(s) if s.time_steps.len() >= 2 && s.time_steps.iter().all(|t| *t > 0.0) => {}
                    _ => return bad("sweep.time_steps needs at least two positive steps"),
                }
                if self.probes.is_empty() {
                    return bad("needs at least one probe state");
                }
            }
            Experiment::ConvergenceN => {
                if !is_ou {
                    return bad("needs an OU model");
                }
                match sweep {
                    Some(s) if !s.degrees.is_empty() && !s.degrees.contains(&0) => {}
                    _ => return bad("sweep.degrees must be non-empty and positive"),
                }
                if self.references < 2 {
                    return bad("references must cover at least the first nontrivial mode");
                }
            }
            Experiment::NeuralMass => {
                if !matches!(self.model, SdeModel::NeuralMass { .. }) {
                    return bad("needs the neural-mass model");
                }
                if self.methods.iter().any(|m| m.learned().is_none()) {
                    return bad("compares learned methods only");
                }
            }
            _ => {}
        }
        if self.ensemble.is_some() && matches!(self.model, SdeModel::NeuralMass { .. }) {
            return bad("neural-mass runs need the latent input and cannot load an ensemble export");
        }
        Ok(())
    }

    /// Pretty JSON echo.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::Other(e.to_string()))
    }
}
