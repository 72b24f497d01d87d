//! Problem files: one JSON document per analysis case.
//!
//! ```json
//! {
//!   "system": { "A": [[-1]], "B": [[1]], "C": [[1]] },
//!   "perturbation": { "D": [[1]], "E": [[1]], "norm": "two" },
//!   "sector": { "Sigma1": [[0]], "Sigma2": [[0.5]] },
//!   "simulation": { "dt": 0.01, "horizon": 50 },
//!   "sweep": [0.1, 0.2]
//! }
//! ```
//!
//! Instead of `sector`, a problem may name a `network` file (resolved
//! relative to the problem file) or a `builtin_nonlinearity`. With none of
//! the three the problem is linear.

use std::path::{Path, PathBuf};

use posilure::matrix::{Mat, NormKind};
use posilure::nn::{Ffnn, NnError};
use posilure::robustness::{LtiSystem, PerturbationStructure, RobustnessError, SectorBound};
use posilure::simulation::{builtin_nonlinearity, BuiltinNonlinearity, BUILTIN_NAMES};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("network {path}: {source}")]
    Network { path: PathBuf, source: NnError },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(rename = "A")]
    a: Mat,
    #[serde(rename = "B")]
    b: Mat,
    #[serde(rename = "C")]
    c: Mat,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerturbation {
    #[serde(rename = "D")]
    d: Mat,
    #[serde(rename = "E")]
    e: Mat,
    #[serde(default)]
    norm: Option<String>,
    #[serde(rename = "S", default)]
    s: Option<Mat>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSector {
    #[serde(rename = "Sigma1")]
    sigma1: Mat,
    #[serde(rename = "Sigma2")]
    sigma2: Mat,
}

/// Optional overrides of the simulation defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationOverrides {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub decay_threshold: Option<f64>,
    pub growth_threshold: Option<f64>,
    pub blowup_bound: Option<f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    /// Upper end of the critical-perturbation search.
    pub delta_max: Option<f64>,
    /// Bracket width at which the critical-perturbation search stops.
    pub tol: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    system: RawSystem,
    perturbation: RawPerturbation,
    #[serde(default)]
    sector: Option<RawSector>,
    #[serde(default)]
    network: Option<PathBuf>,
    #[serde(default)]
    builtin_nonlinearity: Option<String>,
    #[serde(default)]
    simulation: SimulationOverrides,
    #[serde(default)]
    sweep: Option<Vec<f64>>,
}

pub enum Feedback {
    Sector(SectorBound),
    Network {
        path: PathBuf,
        net: Box<Ffnn>,
    },
    Builtin {
        name: String,
        builtin: BuiltinNonlinearity,
    },
}

impl Feedback {
    pub fn kind(&self) -> &'static str {
        match self {
            Feedback::Sector(_) => "sector",
            Feedback::Network { .. } => "network",
            Feedback::Builtin { .. } => "builtin_nonlinearity",
        }
    }
}

pub struct Problem {
    pub path: PathBuf,
    pub system: LtiSystem,
    pub perturbation: PerturbationStructure,
    /// `None` for a purely linear problem.
    pub feedback: Option<Feedback>,
    pub simulation: SimulationOverrides,
    pub sweep: Option<Vec<f64>>,
    /// Bytes of every file read while loading, in order.
    pub sources: Vec<Vec<u8>>,
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

fn read(path: &Path) -> Result<Vec<u8>, ProblemError> {
    std::fs::read(path).map_err(|source| ProblemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_network(path: &Path) -> Result<(Ffnn, Vec<u8>), ProblemError> {
    let bytes = read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let net = Ffnn::from_json_str(&text).map_err(|source| ProblemError::Network {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((net, bytes))
}

impl Problem {
    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let bytes = read(path)?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let raw: RawProblem = serde_json::from_str(&text).map_err(|e| ProblemError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let invalid = |key: &str, message: String| ProblemError::Invalid {
            path: path.to_path_buf(),
            line: line_of(&text, key),
            message,
        };

        let system = LtiSystem::new(raw.system.a, raw.system.b, raw.system.c)
            .map_err(|e| invalid("system", e.to_string()))?;

        let norm = match raw.perturbation.norm.as_deref() {
            None => NormKind::OperatorTwo,
            Some(s) => s.parse::<NormKind>().map_err(|e| invalid("norm", e))?,
        };
        let perturbation = match raw.perturbation.s {
            Some(s) => {
                if raw.perturbation.norm.is_some() && norm != NormKind::MaxAbsEntry {
                    return Err(invalid(
                        "S",
                        "a Schur-scaled perturbation uses the max_abs norm".into(),
                    ));
                }
                PerturbationStructure::with_schur_scale(raw.perturbation.d, raw.perturbation.e, s)
            }
            None => PerturbationStructure::new(raw.perturbation.d, raw.perturbation.e, norm),
        }
        .map_err(|e| invalid("perturbation", e.to_string()))?;
        if perturbation.state_dim() != system.states() {
            return Err(invalid(
                "perturbation",
                format!(
                    "perturbation acts on {} states, system has {}",
                    perturbation.state_dim(),
                    system.states()
                ),
            ));
        }

        let given = [
            raw.sector.is_some(),
            raw.network.is_some(),
            raw.builtin_nonlinearity.is_some(),
        ];
        if given.iter().filter(|&&g| g).count() > 1 {
            return Err(invalid(
                "system",
                "give at most one of sector, network, builtin_nonlinearity".into(),
            ));
        }

        let mut sources = vec![bytes.clone()];
        let feedback = if let Some(sector) = raw.sector {
            let sector = SectorBound::new(sector.sigma1, sector.sigma2)
                .map_err(|e: RobustnessError| invalid("sector", e.to_string()))?;
            let want = (system.inputs(), system.outputs());
            if sector.upper.shape() != want {
                return Err(invalid(
                    "sector",
                    format!(
                        "sector matrices are {:?}, expected {want:?}",
                        sector.upper.shape()
                    ),
                ));
            }
            Some(Feedback::Sector(sector))
        } else if let Some(rel) = raw.network {
            let resolved = path.parent().unwrap_or_else(|| Path::new(".")).join(rel);
            let (net, net_bytes) = load_network(&resolved)?;
            sources.push(net_bytes);
            Some(Feedback::Network {
                path: resolved,
                net: Box::new(net),
            })
        } else if let Some(name) = raw.builtin_nonlinearity {
            let builtin = builtin_nonlinearity(&name).ok_or_else(|| {
                invalid(
                    "builtin_nonlinearity",
                    format!(
                        "unknown nonlinearity '{name}'; known: {}",
                        BUILTIN_NAMES.join(", ")
                    ),
                )
            })?;
            Some(Feedback::Builtin { name, builtin })
        } else {
            None
        };

        if let Some(deltas) = &raw.sweep {
            if deltas.iter().any(|d| !d.is_finite() || *d < 0.0) {
                return Err(invalid(
                    "sweep",
                    "sweep deltas must be finite and nonnegative".into(),
                ));
            }
        }

        Ok(Self {
            path: path.to_path_buf(),
            system,
            perturbation,
            feedback,
            simulation: raw.simulation,
            sweep: raw.sweep,
            sources,
        })
    }

    /// Swaps in a network given on the command line.
    pub fn replace_network(&mut self, path: &Path) -> Result<(), ProblemError> {
        let (net, bytes) = load_network(path)?;
        self.sources.push(bytes);
        self.feedback = Some(Feedback::Network {
            path: path.to_path_buf(),
            net: Box::new(net),
        });
        Ok(())
    }
}

/// Hex SHA-256 over the concatenated input files.
pub fn digest(sources: &[Vec<u8>]) -> String {
    let mut hasher = Sha256::new();
    for s in sources {
        hasher.update(s);
    }
    hex::encode(hasher.finalize())
}
