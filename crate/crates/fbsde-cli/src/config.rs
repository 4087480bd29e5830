//! Run configuration: flat key-value text with section headers. Every key
//! mirrors a library field name; the resolved configuration is echoed into
//! the run manifest, which is itself a valid configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fbsde::grid::GridSpec;
use fbsde::problems::{BuiltinProblem, Problem};
use fbsde::quantizer::TrainingSchedule;
use fbsde::solver::{DifferentiatedProblem, Interpolation, SolverConfig, Variant};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub quantizer: QuantizerSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Written by the manifest; informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunStamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStamp {
    pub version: String,
    pub command: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSection {
    /// burgers_coupled_periodic | burgers_coupled_gaussian |
    /// burgers_pure_backward | kpz2d | porous_media
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "L")]
    pub l: Option<f64>,
    /// Real time at which the terminal condition applies (porous media
    /// solves on a sub-interval, so this can exceed grid.T).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_terminal: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub dimension: usize,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "R")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default)]
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<Vec<f64>>,
    #[serde(rename = "N")]
    pub n_steps: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Real time of solver time 0; reference comparisons evaluate at
    /// t0 + t_k.
    #[serde(default)]
    pub t0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizerSection {
    #[serde(rename = "M")]
    pub points: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lloyd_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lloyd_max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clvq_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion_samples: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub store_all_slices: bool,
    #[serde(default = "default_interpolation")]
    pub interpolation: String,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            variant: default_variant(),
            store_all_slices: false,
            interpolation: default_interpolation(),
        }
    }
}

fn default_variant() -> String {
    "full31".into()
}

fn default_interpolation() -> String {
    "nearest".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OutputSection {
    /// Solver times whose nearest slices are exported (0 always is).
    #[serde(default)]
    pub export_times: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.grid;
        if g.dimension == 0 || g.n_steps == 0 {
            return Err(ConfigError::Invalid("dimension and N must be positive".into()));
        }
        if !(g.delta > 0.0) || !(g.horizon > 0.0) {
            return Err(ConfigError::Invalid("delta and T must be positive".into()));
        }
        if g.period.is_none() && (g.radius.is_none() || g.rho.is_none()) {
            return Err(ConfigError::Invalid(
                "truncated grids need R and rho; periodic grids need period".into(),
            ));
        }
        if self.quantizer.points == 0 {
            return Err(ConfigError::Invalid("quantizer M must be positive".into()));
        }
        self.variant()?;
        self.interpolation()?;
        self.build_problem()?;
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        let g = &self.grid;
        GridSpec {
            dimension: g.dimension,
            delta: g.delta,
            radius: g.radius.unwrap_or_else(|| {
                g.period.as_ref().map_or(1.0, |p| p[0])
            }),
            rho: g.rho.unwrap_or_else(|| g.period.as_ref().map_or(1.0, |p| p[0])),
            eta: g.eta,
            period: g.period.clone(),
            n_steps: g.n_steps,
            horizon: g.horizon,
        }
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        match self.solver.variant.as_str() {
            "full31" => Ok(Variant::Full31),
            "simple3910" => Ok(Variant::Simple3910),
            "pure_backward" => Ok(Variant::PureBackward),
            "differentiated" => Ok(Variant::Differentiated),
            other => Err(ConfigError::Invalid(format!(
                "unknown variant {other:?} (full31, simple3910, pure_backward, differentiated)"
            ))),
        }
    }

    pub fn interpolation(&self) -> Result<Interpolation, ConfigError> {
        match self.solver.interpolation.as_str() {
            "nearest" => Ok(Interpolation::Nearest),
            "linear1d" => Ok(Interpolation::Linear1d),
            other => Err(ConfigError::Invalid(format!(
                "unknown interpolation {other:?} (nearest, linear1d)"
            ))),
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig, ConfigError> {
        Ok(SolverConfig {
            grid: self.grid_spec(),
            variant: self.variant()?,
            store_all_slices: self.solver.store_all_slices,
            retain_slices: self.retained_slices(),
            interpolation: self.interpolation()?,
        })
    }

    /// Slice indices nearest the requested export times.
    pub fn retained_slices(&self) -> Vec<usize> {
        let h = self.grid.horizon / self.grid.n_steps as f64;
        self.output
            .export_times
            .iter()
            .map(|t| ((t / h).round() as usize).min(self.grid.n_steps))
            .collect()
    }

    pub fn builtin(&self) -> Result<BuiltinProblem, ConfigError> {
        let p = &self.problem;
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| {
                ConfigError::Invalid(format!("problem {:?} needs the {key} key", p.name))
            })
        };
        match p.name.as_str() {
            "burgers_coupled_periodic" => Ok(BuiltinProblem::BurgersCoupledPeriodic {
                epsilon: need(p.epsilon, "epsilon")?,
            }),
            "burgers_coupled_gaussian" => Ok(BuiltinProblem::BurgersCoupledGaussian {
                epsilon: need(p.epsilon, "epsilon")?,
            }),
            "burgers_pure_backward" => Ok(BuiltinProblem::BurgersPureBackward {
                epsilon: need(p.epsilon, "epsilon")?,
            }),
            "kpz2d" => {
                let theta = need(p.theta, "theta")?;
                if theta.abs() >= 1.0 {
                    return Err(ConfigError::Invalid("theta must satisfy |theta| < 1".into()));
                }
                Ok(BuiltinProblem::Kpz2d {
                    nu: need(p.nu, "nu")?,
                    sigma: [1.0, 0.0, theta, (1.0 - theta * theta).sqrt()],
                })
            }
            "porous_media" => Ok(BuiltinProblem::PorousMedia {
                l: need(p.l, "L")?,
                t_terminal: need(p.t_terminal, "t_terminal")?,
            }),
            other => Err(ConfigError::Invalid(format!(
                "unknown problem {other:?} (burgers_coupled_periodic, burgers_coupled_gaussian, \
                 burgers_pure_backward, kpz2d, porous_media)"
            ))),
        }
    }

    pub fn build_problem(&self) -> Result<Problem, ConfigError> {
        self.builtin()?
            .build()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// The two-field companion for the differentiated variant.
    pub fn build_differentiated(&self) -> Result<DifferentiatedProblem, ConfigError> {
        match self.builtin()? {
            BuiltinProblem::PorousMedia { l, t_terminal } => {
                Ok(fbsde::solver::porous_differentiated(l, t_terminal))
            }
            other => Err(ConfigError::Invalid(format!(
                "the differentiated variant is only defined for porous_media, not {other:?}"
            ))),
        }
    }

    pub fn training_schedule(&self) -> TrainingSchedule {
        let q = &self.quantizer;
        let mut sched = TrainingSchedule::default();
        if let Some(v) = q.lloyd_samples {
            sched.lloyd_samples = v;
        }
        if let Some(v) = q.lloyd_max_iters {
            sched.lloyd_max_iters = v;
        }
        if let Some(v) = q.clvq_samples {
            sched.clvq_samples = v;
        }
        if let Some(v) = q.weight_samples {
            sched.weight_samples = v;
        }
        if let Some(v) = q.distortion_samples {
            sched.distortion_samples = v;
        }
        sched
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[problem]
name = "burgers_coupled_periodic"
epsilon = 0.15

[grid]
dimension = 1
delta = 1e-3
period = [1.0]
N = 100
T = 1.0

[quantizer]
M = 160
seed = 7

[solver]
variant = "full31"

[output]
export_times = [0.0, 0.5, 1.0]
"#;

    #[test]
    fn sample_config_parses_and_round_trips() {
        let cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.retained_slices(), vec![0, 50, 100]);
        let spec = cfg.grid_spec();
        assert_eq!(spec.n_steps, 100);
        // The serialized form parses back to the same configuration.
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn missing_keys_are_reported() {
        let mut cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.problem.epsilon = None;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let mut cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.grid.period = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_variant_is_rejected() {
        let mut cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.solver.variant = "implicit".into();
        assert!(cfg.validate().is_err());
    }
}
