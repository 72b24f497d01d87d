use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use posilure::matrix::{operator_norm, Mat, NormKind};
use posilure::nn::{
    sector_bound_ffnn, select_refined_sign, Ffnn, FfnnSectorBound, InputBox, NnError,
};
use posilure::robustness::{
    nn_stability_radius, nn_stability_radius_ungated, refine_upper_sector, stability_radius_linear,
    stability_radius_lure, stability_radius_lure_ungated, stability_radius_schur, RadiusReport,
    RobustnessError, SectorBound,
};
use posilure::simulation::{
    default_direction, default_sweep_deltas, find_critical_delta, simulate_lure, sweep,
    trial_initial_state, worst_case_gain, Nonlinearity, SearchConfig, SimConfig, SimError,
    DEFAULT_BLOWUP_BOUND, DEFAULT_DECAY_THRESHOLD, DEFAULT_DT, DEFAULT_GROWTH_THRESHOLD,
    DEFAULT_HORIZON, DEFAULT_SEED, DEFAULT_TRIALS,
};
use serde_json::json;
use thiserror::Error;

use crate::problem::{digest, load_network, Feedback, Problem, ProblemError};
use crate::report::Report;

/// Samples used when checking refined sectors against the network.
const REFINE_SAMPLES: usize = 1000;
const DEFAULT_SEARCH_TOL: f64 = 1e-3;
/// Search range for the critical perturbation, in multiples of the analytic radius.
const SEARCH_RANGE_FACTOR: f64 = 4.0;
/// Grid used to test a built-in scalar map against its declared sector.
const BUILTIN_CHECK_RANGE: f64 = 20.0;
const BUILTIN_CHECK_SAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the positivity and stability gates of the closed loop.
    Check,
    /// Stability radius of the problem (linear, sector or network feedback).
    Radius,
    /// Sector bound of a zero-bias network.
    NnBound,
    /// Simulate seeded random trajectories over a grid of perturbation sizes.
    Sweep,
    /// Refine a network's upper sector from a critical perturbation size.
    Refine,
}

fn parse_norm(s: &str) -> Result<NormKind, String> {
    s.parse()
}

#[derive(Debug, Parser)]
#[command(
    name = "posilure",
    version,
    about = "Robustness analysis of positive Lur'e systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Problem file (JSON).
    #[arg(long, global = true)]
    pub problem: Option<PathBuf>,
    /// Network file; replaces any network named by the problem.
    #[arg(long, global = true)]
    pub network: Option<PathBuf>,
    /// Norm for the radius: one, two or inf.
    #[arg(long, global = true, value_parser = parse_norm)]
    pub norm: Option<NormKind>,
    /// Evaluate the radius formula even when certification fails.
    #[arg(long, global = true)]
    pub override_gates: bool,
    /// Critical perturbation size for `refine`; simulated when absent.
    #[arg(long, global = true)]
    pub delta_crit: Option<f64>,
    /// CSV output for `sweep`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory for one trajectory CSV per sweep run.
    #[arg(long, global = true)]
    pub trajectories: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// The analysis ran and came out negative.
    Negative,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::Negative => 2,
        }
    }
}

pub struct Outcome {
    pub report: Report,
    pub status: Status,
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Check => cmd_check(&load_problem(cli)?),
        Command::Radius => cmd_radius(&load_problem(cli)?, cli),
        Command::NnBound => cmd_nn_bound(cli),
        Command::Sweep => cmd_sweep(&load_problem(cli)?, cli),
        Command::Refine => cmd_refine(&load_problem(cli)?, cli),
    }
}

fn load_problem(cli: &Cli) -> Result<Problem, CliError> {
    let path = cli
        .problem
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --problem <path>".into()))?;
    let mut problem = Problem::load(path)?;
    if let Some(net) = &cli.network {
        problem.replace_network(net)?;
    }
    Ok(problem)
}

fn new_report(command: &str, problem: &Problem) -> Report {
    let mut report = Report::new(command, digest(&problem.sources));
    report.set("problem", problem.path.display().to_string());
    report.set(
        "feedback",
        problem.feedback.as_ref().map_or("none", Feedback::kind),
    );
    report
}

fn network_bound_json(bound: &FfnnSectorBound, net: &Ffnn) -> serde_json::Value {
    let spec = &net.activations()[0];
    json!({
        "gamma1": bound.sector.lower,
        "gamma2": bound.sector.upper,
        "gamma2_norm_two": operator_norm(&bound.sector.upper, NormKind::OperatorTwo),
        "activation": {
            "name": spec.name(),
            "a1": spec.a1,
            "a2": spec.a2,
            "c": bound.activation_gain,
        },
        "depth": bound.depth,
        "layer_products": bound.partial_products,
    })
}

/// Sector used by the analytic commands, plus the network bound when the
/// sector comes from a network.
fn analysis_sector(
    feedback: &Feedback,
    report: &mut Report,
) -> Result<(SectorBound, Option<FfnnSectorBound>), CliError> {
    match feedback {
        Feedback::Sector(sector) => Ok((sector.clone(), None)),
        Feedback::Network { net, .. } => {
            let bound = sector_bound_ffnn(net)?;
            report.set("network_sector", network_bound_json(&bound, net));
            Ok((bound.sector.clone(), Some(bound)))
        }
        Feedback::Builtin { name, builtin } => {
            let (lo, hi) = builtin.declared_sector;
            let check =
                builtin
                    .scalar
                    .sector_check(lo, hi, BUILTIN_CHECK_RANGE, BUILTIN_CHECK_SAMPLES);
            if check.violations > 0 {
                report.warn(format!(
                    "{name} leaves its declared sector [{lo}, {hi}]: f(y)/y spans [{}, {}] on (0, {BUILTIN_CHECK_RANGE}]",
                    check.min_ratio, check.max_ratio
                ));
            }
            report.set("declared_sector", [lo, hi]);
            report.set("declared_sector_check", &check);
            Ok((
                SectorBound::new(
                    Mat::scalar(lo).expect("finite"),
                    Mat::scalar(hi).expect("finite"),
                )?,
                None,
            ))
        }
    }
}

fn zero_sector(problem: &Problem) -> SectorBound {
    let zero = Mat::zeros(problem.system.inputs(), problem.system.outputs());
    SectorBound {
        lower: zero.clone(),
        upper: zero,
    }
}

pub fn cmd_check(problem: &Problem) -> Result<Outcome, CliError> {
    let mut report = new_report("check", problem);
    let sector = match &problem.feedback {
        Some(fb) => analysis_sector(fb, &mut report)?.0,
        None => {
            report.warn("no nonlinearity given; checked the zero sector");
            zero_sector(problem)
        }
    };
    let cert = posilure::robustness::certify_positive_lure(&problem.system, &sector)?;
    report.set("sector", &sector);
    report.set("gates", &cert);
    let failed = cert.failed_gates();
    if !failed.is_empty() {
        report.warn(format!(
            "positivity and stability are not certified; failed gates: {}",
            failed.join(", ")
        ));
    }
    let status = if cert.verdict {
        Status::Success
    } else {
        Status::Negative
    };
    report.set("verdict", cert.verdict);
    Ok(Outcome { report, status })
}

fn set_radius(report: &mut Report, radius: &RadiusReport) {
    report.set("radius", radius.radius);
    report.set("norm", radius.norm.label());
    report.set("formula", radius.formula);
    report.set("closed_loop", &radius.closed_loop);
    report.set("gates", &radius.gates);
}

/// Radius for the problem; `Ok(None)` when the gates fail and are not overridden.
fn compute_radius(
    problem: &Problem,
    norm: Option<NormKind>,
    override_gates: bool,
    report: &mut Report,
) -> Result<Option<RadiusReport>, CliError> {
    let pert = match norm {
        Some(n) => problem.perturbation.with_norm(n),
        None => problem.perturbation.clone(),
    };
    let Some(fb) = &problem.feedback else {
        let linear = if pert.schur_scale().is_some() {
            stability_radius_schur(problem.system.a(), &pert)
        } else {
            stability_radius_linear(problem.system.a(), &pert)
        };
        return match linear {
            Ok(r) => Ok(Some(r)),
            Err(e @ (RobustnessError::NotMetzler | RobustnessError::NotHurwitz)) => {
                report.warn(format!("linear radius unavailable: {e}"));
                Ok(None)
            }
            Err(e) => Err(e.into()),
        };
    };
    let (sector, nn) = analysis_sector(fb, report)?;
    let gated = if nn.is_some() {
        nn_stability_radius(&problem.system, &sector, &pert)
    } else {
        stability_radius_lure(&problem.system, &sector, &pert)
    };
    match gated {
        Ok(r) => Ok(Some(r)),
        Err(RobustnessError::CertificationFailed(_) | RobustnessError::NotMetzlerUpper) => {
            let ungated = if nn.is_some() {
                nn_stability_radius_ungated(&problem.system, &sector, &pert)?
            } else {
                stability_radius_lure_ungated(&problem.system, &sector, &pert)?
            };
            let failed = match &ungated.gates {
                posilure::robustness::RadiusGates::Aizerman(cert) => {
                    let mut names = cert.failed_gates();
                    if !cert.metzler_at_upper {
                        names.push("A + B Sigma2 C Metzler");
                    }
                    names.join(", ")
                }
                _ => String::new(),
            };
            if override_gates {
                report.warn(format!(
                    "GATES OVERRIDDEN: {failed} failed; the radius below is the formula value and is NOT certified"
                ));
                Ok(Some(ungated))
            } else {
                report.set("gates", &ungated.gates);
                report.warn(format!(
                    "certification failed ({failed}); rerun with --override-gates to evaluate the formula anyway"
                ));
                Ok(None)
            }
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_radius(problem: &Problem, cli: &Cli) -> Result<Outcome, CliError> {
    let mut report = new_report("radius", problem);
    report.set(
        "gates_overridden",
        if cli.override_gates { "yes" } else { "no" },
    );
    match compute_radius(problem, cli.norm, cli.override_gates, &mut report)? {
        Some(r) => {
            set_radius(&mut report, &r);
            Ok(Outcome {
                report,
                status: Status::Success,
            })
        }
        None => {
            report.set("radius", serde_json::Value::Null);
            Ok(Outcome {
                report,
                status: Status::Negative,
            })
        }
    }
}

pub fn cmd_nn_bound(cli: &Cli) -> Result<Outcome, CliError> {
    let (net, sources, origin) = match (&cli.network, &cli.problem) {
        (Some(path), _) => {
            let (net, bytes) = load_network(path)?;
            (net, vec![bytes], path.clone())
        }
        (None, Some(_)) => {
            let problem = load_problem(cli)?;
            match problem.feedback {
                Some(Feedback::Network { path, net }) => (*net, problem.sources, path),
                _ => {
                    return Err(CliError::Usage(
                        "the problem names no network; pass --network <path>".into(),
                    ))
                }
            }
        }
        (None, None) => {
            return Err(CliError::Usage(
                "nn-bound needs --network <path> or --problem <path>".into(),
            ))
        }
    };
    let bound = sector_bound_ffnn(&net)?;
    let mut report = Report::new("nn-bound", digest(&sources));
    report.set("network", origin.display().to_string());
    if let serde_json::Value::Object(map) = network_bound_json(&bound, &net) {
        for (k, v) in map {
            report.set(&k, v);
        }
    }
    Ok(Outcome {
        report,
        status: Status::Success,
    })
}

struct SimSettings {
    cfg: SimConfig,
    trials: usize,
    seed: u64,
    delta_max: Option<f64>,
    tol: f64,
}

fn sim_settings(problem: &Problem, cli: &Cli) -> Result<SimSettings, CliError> {
    let o = &problem.simulation;
    let mut cfg = SimConfig::new(
        cli.dt.or(o.dt).unwrap_or(DEFAULT_DT),
        cli.horizon.or(o.horizon).unwrap_or(DEFAULT_HORIZON),
        Mat::filled(problem.system.states(), 1, 1.0),
    )?;
    cfg.decay_threshold = o.decay_threshold.unwrap_or(DEFAULT_DECAY_THRESHOLD);
    cfg.growth_threshold = o.growth_threshold.unwrap_or(DEFAULT_GROWTH_THRESHOLD);
    cfg.blowup_bound = o.blowup_bound.unwrap_or(DEFAULT_BLOWUP_BOUND);
    cfg.validate()?;
    Ok(SimSettings {
        cfg,
        trials: cli.trials.or(o.trials).unwrap_or(DEFAULT_TRIALS),
        seed: cli.seed.or(o.seed).unwrap_or(DEFAULT_SEED),
        delta_max: o.delta_max,
        tol: o.tol.unwrap_or(DEFAULT_SEARCH_TOL),
    })
}

fn loop_nonlinearity(problem: &Problem, report: &mut Report) -> Result<Nonlinearity, CliError> {
    Ok(match &problem.feedback {
        Some(Feedback::Sector(sector)) => {
            report.warn("sector-only problem: simulated with the linear gain Sigma2");
            worst_case_gain(sector)
        }
        Some(Feedback::Network { net, .. }) => Nonlinearity::network((**net).clone())?,
        Some(fb @ Feedback::Builtin { builtin, .. }) => {
            analysis_sector(fb, report)?;
            builtin.phi.clone()
        }
        None => Nonlinearity::LinearGain(Mat::zeros(
            problem.system.inputs(),
            problem.system.outputs(),
        )),
    })
}

/// Analytic radius for simulation commands, falling back to the ungated
/// formula with a warning.
fn reference_radius(problem: &Problem, report: &mut Report) -> Result<Option<f64>, CliError> {
    let mut scratch = Report::new("", String::new());
    if let Some(r) = compute_radius(problem, None, false, &mut scratch)? {
        return Ok(Some(r.radius));
    }
    let r = compute_radius(problem, None, true, &mut scratch)?;
    if let Some(r) = &r {
        report.warn(format!(
            "reference radius {} comes from the ungated formula; certification failed",
            r.radius
        ));
    }
    Ok(r.map(|r| r.radius))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn cmd_sweep(problem: &Problem, cli: &Cli) -> Result<Outcome, CliError> {
    let mut report = new_report("sweep", problem);
    let settings = sim_settings(problem, cli)?;
    let phi = loop_nonlinearity(problem, &mut report)?;
    let radius = reference_radius(problem, &mut report)?;
    let deltas = match (&problem.sweep, radius) {
        (Some(d), _) => d.clone(),
        (None, Some(r)) => default_sweep_deltas(r),
        (None, None) => {
            return Err(CliError::Usage(
                "no sweep deltas given and no radius to derive them from".into(),
            ))
        }
    };
    let direction = default_direction(&problem.perturbation);
    let table = sweep(
        &problem.system,
        &phi,
        &problem.perturbation,
        &deltas,
        &direction,
        &settings.cfg,
        settings.trials,
        settings.seed,
    )?;
    if let Some(out) = &cli.out {
        table.write_csv(create(out)?)?;
        report.set("csv", out.display().to_string());
    }
    if let Some(dir) = &cli.trajectories {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        for (i, &delta) in deltas.iter().enumerate() {
            for trial in 0..settings.trials {
                let (_, x0) = trial_initial_state(problem.system.states(), settings.seed, trial);
                let cfg = SimConfig {
                    x0,
                    ..settings.cfg.clone()
                };
                let traj = simulate_lure(
                    &problem.system,
                    &phi,
                    &problem.perturbation,
                    &direction.scale(delta),
                    &cfg,
                )?;
                traj.write_csv(create(
                    &dir.join(format!("delta{i:02}_trial{trial:02}.csv")),
                )?)?;
            }
        }
        report.set("trajectories", dir.display().to_string());
    }
    report.set("deltas", &deltas);
    report.set("direction", &direction);
    report.set("trials", settings.trials);
    report.set("seed", settings.seed);
    report.set("dt", settings.cfg.dt);
    report.set("horizon", settings.cfg.horizon);
    report.set("summary", table.summary());
    if let Some(r) = radius {
        report.set("radius", r);
        let conservative = table.radius_looks_conservative(r);
        report.set("analytic_radius_conservative", conservative);
        if conservative {
            report
                .warn("analytic radius conservative: every trial beyond the radius stayed stable");
        }
    }
    Ok(Outcome {
        report,
        status: Status::Success,
    })
}

pub fn cmd_refine(problem: &Problem, cli: &Cli) -> Result<Outcome, CliError> {
    let mut report = new_report("refine", problem);
    let Some(Feedback::Network { net, .. }) = &problem.feedback else {
        return Err(CliError::Usage(
            "refine needs a network (in the problem or via --network)".into(),
        ));
    };
    if !problem.perturbation.is_scalar() {
        return Err(CliError::Usage(
            "refine needs a scalar perturbation structure".into(),
        ));
    }
    let settings = sim_settings(problem, cli)?;
    let delta_crit = match cli.delta_crit {
        Some(d) => {
            report.set("delta_crit_source", "given");
            d
        }
        None => {
            let delta_max = match settings.delta_max {
                Some(d) => d,
                None => {
                    let r = reference_radius(problem, &mut report)?.ok_or_else(|| {
                        CliError::Usage("no radius available; set simulation.delta_max".into())
                    })?;
                    SEARCH_RANGE_FACTOR * r
                }
            };
            let search = SearchConfig {
                trials: settings.trials,
                seed: settings.seed,
                ..SearchConfig::new(delta_max, settings.tol)
            };
            let phi = Nonlinearity::network((**net).clone())?;
            let found = find_critical_delta(
                &problem.system,
                &phi,
                &problem.perturbation,
                &default_direction(&problem.perturbation),
                &settings.cfg,
                &search,
            );
            match found {
                Ok(c) => {
                    report.set("delta_crit_source", "simulated");
                    report.set("delta_crit_bracket", [c.bracket.0, c.bracket.1]);
                    c.delta_star
                }
                Err(e @ (SimError::UnstableAtZero | SimError::NoInstabilityFound { .. })) => {
                    report.set("delta_crit_source", "simulated");
                    report.set("search_error", e.to_string());
                    report.warn(format!("critical perturbation search failed: {e}"));
                    return Ok(Outcome {
                        report,
                        status: Status::Negative,
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    let refined = refine_upper_sector(&problem.system, &problem.perturbation, delta_crit, None)?;
    let selection = select_refined_sign(
        net,
        refined.magnitude,
        REFINE_SAMPLES,
        &InputBox::default_for(net.input_dim()),
        settings.seed,
    )?;
    let original = sector_bound_ffnn(net)?;
    report.set("delta_crit", delta_crit);
    report.set("magnitude", refined.magnitude);
    report.set("original_gamma2", &original.sector.upper);
    report.set("candidates", &refined.candidates);
    report.set("refined_sector", &selection.sector);
    report.set("sign", selection.sign);
    report.set("violations_positive", selection.violations_positive);
    report.set("violations_negative", selection.violations_negative);
    report.set("samples", REFINE_SAMPLES);
    if selection.chosen_violations() > 0 {
        report.warn(format!(
            "the refined sector is violated at {} of {REFINE_SAMPLES} samples",
            selection.chosen_violations()
        ));
    }
    Ok(Outcome {
        report,
        status: Status::Success,
    })
}
