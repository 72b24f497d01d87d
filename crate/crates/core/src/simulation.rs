//! Fixed-step simulation of perturbed Lur'e loops
//! `x' = (A + D Δ E) x + B Φ(C x, t)`, trajectory classification, and the
//! critical-perturbation search built on top of them.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::matrix::{operator_norm, Mat};
use crate::nn::{Ffnn, NnError};
use crate::robustness::{PerturbationStructure, RobustnessError, SectorBound};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 20.0;
pub const DEFAULT_DECAY_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_GROWTH_THRESHOLD: f64 = 1e3;
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e9;
pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("nonlinearity '{0}' does not vanish at the origin")]
    NonzeroAtOrigin(String),
    #[error("state became non-finite at t = {time} before reaching the blow-up bound")]
    NonFiniteState { time: f64 },
    #[error("initial state is zero; decay ratio undefined")]
    ZeroInitialState,
    #[error("some trial is already unstable at zero perturbation")]
    UnstableAtZero,
    #[error("no instability found up to delta = {largest_tested}")]
    NoInstabilityFound { largest_tested: f64 },
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// Static scalar map applied componentwise to the plant output.
#[derive(Clone)]
pub struct ScalarNonlinearity {
    name: String,
    f: Arc<ScalarFn>,
}

impl ScalarNonlinearity {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, y: f64) -> f64 {
        (self.f)(y)
    }

    /// Checks `lower * y <= f(y) <= upper * y` on the grid `y_k = k * y_max / samples`.
    pub fn sector_check(
        &self,
        lower: f64,
        upper: f64,
        y_max: f64,
        samples: usize,
    ) -> ScalarSectorCheck {
        let mut check = ScalarSectorCheck {
            samples,
            violations: 0,
            min_ratio: f64::INFINITY,
            max_ratio: f64::NEG_INFINITY,
            first_violation: None,
        };
        for k in 1..=samples {
            let y = y_max * k as f64 / samples as f64;
            let fy = self.eval(y);
            let ratio = fy / y;
            check.min_ratio = check.min_ratio.min(ratio);
            check.max_ratio = check.max_ratio.max(ratio);
            if fy < lower * y || fy > upper * y {
                check.violations += 1;
                check.first_violation.get_or_insert(y);
            }
        }
        check
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarSectorCheck {
    pub samples: usize,
    pub violations: usize,
    /// Extremes of `f(y) / y` over the grid.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub first_violation: Option<f64>,
}

/// Time-sampled hook `Φ(z, t)`; writes `m` outputs for `p` inputs.
#[derive(Clone)]
pub struct TimeVaryingHook {
    name: String,
    inputs: usize,
    outputs: usize,
    f: Arc<VectorFn>,
}

/// Feedback nonlinearity `u = Φ(y, t)`.
#[derive(Clone)]
pub enum Nonlinearity {
    StaticScalar(ScalarNonlinearity),
    Network(Ffnn),
    LinearGain(Mat),
    TimeVarying(TimeVaryingHook),
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::StaticScalar(s) => write!(f, "StaticScalar({})", s.name),
            Nonlinearity::Network(net) => write!(
                f,
                "Network({} -> {}, {} hidden)",
                net.input_dim(),
                net.output_dim(),
                net.depth()
            ),
            Nonlinearity::LinearGain(k) => write!(f, "LinearGain({k})"),
            Nonlinearity::TimeVarying(h) => write!(f, "TimeVarying({})", h.name),
        }
    }
}

impl Nonlinearity {
    /// Registers a scalar map; it must vanish at the origin.
    pub fn scalar(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let name = name.into();
        if f(0.0) != 0.0 {
            return Err(SimError::NonzeroAtOrigin(name));
        }
        Ok(Nonlinearity::StaticScalar(ScalarNonlinearity {
            name,
            f: Arc::new(f),
        }))
    }

    pub fn network(net: Ffnn) -> Result<Self> {
        net.check_evaluable()?;
        if net
            .eval_slice(&vec![0.0; net.input_dim()])?
            .iter()
            .any(|&u| u != 0.0)
        {
            return Err(SimError::NonzeroAtOrigin("network".into()));
        }
        Ok(Nonlinearity::Network(net))
    }

    /// Registers `Φ(z, t)`, checked to vanish at `(0, 0)` only.
    pub fn time_varying(
        name: impl Into<String>,
        inputs: usize,
        outputs: usize,
        f: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        let name = name.into();
        let mut out = vec![0.0; outputs];
        f(&vec![0.0; inputs], 0.0, &mut out);
        if out.iter().any(|&u| u != 0.0) {
            return Err(SimError::NonzeroAtOrigin(name));
        }
        Ok(Nonlinearity::TimeVarying(TimeVaryingHook {
            name,
            inputs,
            outputs,
            f: Arc::new(f),
        }))
    }

    fn check_dims(&self, m: usize, p: usize) -> Result<()> {
        let (want_in, want_out) = match self {
            Nonlinearity::StaticScalar(_) => {
                if m != p {
                    return Err(SimError::DimensionMismatch(format!(
                        "a componentwise scalar map needs as many inputs as outputs (m = {m}, p = {p})"
                    )));
                }
                return Ok(());
            }
            Nonlinearity::Network(net) => (net.input_dim(), net.output_dim()),
            Nonlinearity::LinearGain(k) => (k.cols(), k.rows()),
            Nonlinearity::TimeVarying(h) => (h.inputs, h.outputs),
        };
        if (want_in, want_out) != (p, m) {
            return Err(SimError::DimensionMismatch(format!(
                "nonlinearity maps {want_in} -> {want_out}, plant needs {p} -> {m}"
            )));
        }
        Ok(())
    }

    fn apply(&self, z: &[f64], t: f64, out: &mut [f64]) {
        match self {
            Nonlinearity::StaticScalar(s) => {
                for (o, zi) in out.iter_mut().zip(z) {
                    *o = s.eval(*zi);
                }
            }
            Nonlinearity::Network(net) => {
                let u = net
                    .eval_slice(z)
                    .expect("network validated at registration");
                out.copy_from_slice(&u);
            }
            Nonlinearity::LinearGain(k) => k.mul_vec_into(z, out),
            Nonlinearity::TimeVarying(h) => (h.f)(z, t, out),
        }
    }
}

/// A named nonlinearity shipped with the crate, with the sector it is
/// declared to occupy.
pub struct BuiltinNonlinearity {
    pub phi: Nonlinearity,
    pub scalar: ScalarNonlinearity,
    pub declared_sector: (f64, f64),
}

pub const BUILTIN_NAMES: &[&str] = &["cubic_sine"];

pub fn builtin_nonlinearity(name: &str) -> Option<BuiltinNonlinearity> {
    match name {
        // f(y) = -1.5 y + 0.01 y^3 + sin(2 y), declared in [-2, -0.48].
        "cubic_sine" => {
            let phi =
                Nonlinearity::scalar(name, |y: f64| -1.5 * y + 0.01 * y.powi(3) + (2.0 * y).sin())
                    .expect("cubic_sine vanishes at the origin");
            let scalar = match &phi {
                Nonlinearity::StaticScalar(s) => s.clone(),
                _ => unreachable!(),
            };
            Some(BuiltinNonlinearity {
                phi,
                scalar,
                declared_sector: (-2.0, -0.48),
            })
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub method: Method,
    pub x0: Mat,
    pub decay_threshold: f64,
    pub growth_threshold: f64,
    pub blowup_bound: f64,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, x0: Mat) -> Result<Self> {
        let cfg = Self {
            dt,
            horizon,
            method: Method::Rk4,
            x0,
            decay_threshold: DEFAULT_DECAY_THRESHOLD,
            growth_threshold: DEFAULT_GROWTH_THRESHOLD,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default step and horizon for the given initial state.
    pub fn with_defaults(x0: Mat) -> Self {
        Self::new(DEFAULT_DT, DEFAULT_HORIZON, x0).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon.is_finite() && self.dt <= self.horizon) {
            return bad(format!(
                "need dt <= horizon, got dt = {} and horizon = {}",
                self.dt, self.horizon
            ));
        }
        if self.x0.cols() != 1 {
            return bad(format!("x0 must be a column, got {:?}", self.x0.shape()));
        }
        if !(self.decay_threshold > 0.0 && self.decay_threshold < self.growth_threshold) {
            return bad("need 0 < decay_threshold < growth_threshold".into());
        }
        if self.blowup_bound.is_nan() || self.blowup_bound <= 0.0 {
            return bad("blowup_bound must be positive".into());
        }
        Ok(())
    }

    /// Number of steps; the last sample sits at `steps * dt >= horizon`.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Sampled solution; all three sequences have the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Mat>,
    pub outputs: Vec<Mat>,
    /// Time at which `||x||∞` first exceeded the blow-up bound.
    pub blowup_time: Option<f64>,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.states.first().map_or(0, Mat::rows);
        let p = self.outputs.first().map_or(0, Mat::rows);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=p).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for ((t, x), y) in self.times.iter().zip(&self.states).zip(&self.outputs) {
            let mut record = vec![t.to_string()];
            record.extend(x.as_slice().iter().map(f64::to_string));
            record.extend(y.as_slice().iter().map(f64::to_string));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stability {
    Stable,
    Unstable,
    Inconclusive,
}

impl fmt::Display for Stability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub label: Stability,
    /// `||x(T)||∞ / ||x(0)||∞`, or the ratio at blow-up.
    pub decay_ratio: f64,
    pub blowup_time: Option<f64>,
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn verdict(
    decay_ratio: f64,
    blowup_time: Option<f64>,
    decay: f64,
    growth: f64,
) -> StabilityVerdict {
    let label = if blowup_time.is_some() || decay_ratio >= growth {
        Stability::Unstable
    } else if decay_ratio <= decay {
        Stability::Stable
    } else {
        Stability::Inconclusive
    };
    StabilityVerdict {
        label,
        decay_ratio,
        blowup_time,
    }
}

pub fn classify_stability(
    traj: &Trajectory,
    decay_threshold: f64,
    growth_threshold: f64,
) -> Result<StabilityVerdict> {
    let (first, last) = match (traj.states.first(), traj.states.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(SimError::InvalidConfig("empty trajectory".into())),
    };
    let start = inf_norm(first.as_slice());
    if start == 0.0 {
        return Err(SimError::ZeroInitialState);
    }
    Ok(verdict(
        inf_norm(last.as_slice()) / start,
        traj.blowup_time,
        decay_threshold,
        growth_threshold,
    ))
}

/// Right-hand side of the perturbed loop with preallocated scratch space.
struct LoopField<'a> {
    m: Mat,
    b: &'a Mat,
    c: &'a Mat,
    phi: &'a Nonlinearity,
    y: Vec<f64>,
    u: Vec<f64>,
    bu: Vec<f64>,
}

impl<'a> LoopField<'a> {
    fn new(
        sys: &'a crate::robustness::LtiSystem,
        phi: &'a Nonlinearity,
        pert: &PerturbationStructure,
        delta: &Mat,
    ) -> Result<Self> {
        phi.check_dims(sys.inputs(), sys.outputs())?;
        if pert.state_dim() != sys.states() {
            return Err(SimError::DimensionMismatch(format!(
                "perturbation acts on {} states, system has {}",
                pert.state_dim(),
                sys.states()
            )));
        }
        let m = sys
            .a()
            .checked_add(&pert.perturbation(delta)?)
            .map_err(RobustnessError::from)?;
        Ok(Self {
            m,
            b: sys.b(),
            c: sys.c(),
            phi,
            y: vec![0.0; sys.outputs()],
            u: vec![0.0; sys.inputs()],
            bu: vec![0.0; sys.states()],
        })
    }

    fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]) {
        self.c.mul_vec_into(x, &mut self.y);
        self.phi.apply(&self.y, t, &mut self.u);
        self.b.mul_vec_into(&self.u, &mut self.bu);
        self.m.mul_vec_into(x, out);
        for (o, v) in out.iter_mut().zip(&self.bu) {
            *o += v;
        }
    }

    fn output(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.c.rows()];
        self.c.mul_vec_into(x, &mut y);
        y
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `x` by one step. Returns false, leaving `x` untouched, when
    /// an intermediate stage already leaves the ball of radius `bound`.
    #[allow(clippy::needless_range_loop)]
    fn step(
        &mut self,
        field: &mut LoopField<'_>,
        t: f64,
        dt: f64,
        bound: f64,
        x: &mut [f64],
    ) -> bool {
        let half = 0.5 * dt;
        let escaped = |v: &[f64]| v.iter().any(|c| c.abs() > bound);
        field.eval(t, x, &mut self.k1);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        if escaped(&self.tmp) {
            return false;
        }
        field.eval(t + half, &self.tmp, &mut self.k2);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        if escaped(&self.tmp) {
            return false;
        }
        field.eval(t + half, &self.tmp, &mut self.k3);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        if escaped(&self.tmp) {
            return false;
        }
        field.eval(t + dt, &self.tmp, &mut self.k4);
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        true
    }
}

/// Integrates from `x0`, calling `record` at every sample (including t = 0).
/// Returns the final state and the blow-up time, if any.
fn integrate(
    field: &mut LoopField<'_>,
    cfg: &SimConfig,
    x0: &[f64],
    mut record: impl FnMut(f64, &[f64]),
) -> Result<(Vec<f64>, Option<f64>)> {
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(x.len());
    record(0.0, &x);
    for k in 0..cfg.steps() {
        let t = k as f64 * cfg.dt;
        let t_next = (k + 1) as f64 * cfg.dt;
        if !rk.step(field, t, cfg.dt, cfg.blowup_bound, &mut x) {
            return Ok((x, Some(t_next)));
        }
        if x.iter().any(|v| v.abs() > cfg.blowup_bound) {
            if x.iter().all(|v| v.is_finite()) {
                record(t_next, &x);
            }
            return Ok((x, Some(t_next)));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(SimError::NonFiniteState { time: t_next });
        }
        record(t_next, &x);
    }
    Ok((x, None))
}

fn check_x0(sys: &crate::robustness::LtiSystem, x0: &Mat) -> Result<()> {
    if x0.shape() != (sys.states(), 1) {
        return Err(SimError::DimensionMismatch(format!(
            "x0 is {:?}, expected {:?}",
            x0.shape(),
            (sys.states(), 1)
        )));
    }
    Ok(())
}

/// RK4 solution of `x' = (A + D Δ E) x + B Φ(C x, t)` from `cfg.x0`.
pub fn simulate_lure(
    sys: &crate::robustness::LtiSystem,
    phi: &Nonlinearity,
    pert: &PerturbationStructure,
    delta: &Mat,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_x0(sys, &cfg.x0)?;
    let mut field = LoopField::new(sys, phi, pert, delta)?;
    let capacity = cfg.steps() + 1;
    let mut times = Vec::with_capacity(capacity);
    let mut raw_states: Vec<Vec<f64>> = Vec::with_capacity(capacity);
    let (_, blowup_time) = integrate(&mut field, cfg, cfg.x0.as_slice(), |t, x| {
        times.push(t);
        raw_states.push(x.to_vec());
    })?;
    let outputs = raw_states
        .iter()
        .map(|x| Mat::column(&field.output(x)).expect("finite output"))
        .collect();
    let states = raw_states
        .iter()
        .map(|x| Mat::column(x).expect("finite state"))
        .collect();
    Ok(Trajectory {
        times,
        states,
        outputs,
        blowup_time,
    })
}

/// Seed and initial state of trial `trial`: `x0 ~ U[0, 1]^n` from a
/// ChaCha8 stream seeded with `seed + trial`.
pub fn trial_initial_state(n: usize, seed: u64, trial: usize) -> (u64, Mat) {
    let trial_seed = seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    (trial_seed, Mat::column(&x0).expect("finite samples"))
}

fn run_verdict(
    sys: &crate::robustness::LtiSystem,
    phi: &Nonlinearity,
    pert: &PerturbationStructure,
    delta: &Mat,
    cfg: &SimConfig,
    x0: &Mat,
) -> Result<StabilityVerdict> {
    let mut field = LoopField::new(sys, phi, pert, delta)?;
    let start = inf_norm(x0.as_slice());
    if start == 0.0 {
        return Err(SimError::ZeroInitialState);
    }
    let (x_final, blowup) = integrate(&mut field, cfg, x0.as_slice(), |_, _| {})?;
    Ok(verdict(
        inf_norm(&x_final) / start,
        blowup,
        cfg.decay_threshold,
        cfg.growth_threshold,
    ))
}

/// Default perturbation direction: `1` for a scalar structure, otherwise the
/// all-ones pattern normalized in the structure's norm.
pub fn default_direction(pert: &PerturbationStructure) -> Mat {
    let (k1, k2) = pert.delta_shape();
    if (k1, k2) == (1, 1) {
        return Mat::filled(1, 1, 1.0);
    }
    let ones = Mat::filled(k1, k2, 1.0);
    ones.scale(1.0 / operator_norm(&ones, pert.norm()))
}

fn unit_direction(direction: &Mat, pert: &PerturbationStructure) -> Result<Mat> {
    if direction.shape() != pert.delta_shape() {
        return Err(SimError::DimensionMismatch(format!(
            "direction is {:?}, expected {:?}",
            direction.shape(),
            pert.delta_shape()
        )));
    }
    let norm = operator_norm(direction, pert.norm());
    if norm == 0.0 {
        return Err(SimError::InvalidConfig(
            "perturbation direction is zero".into(),
        ));
    }
    Ok(direction.scale(1.0 / norm))
}

/// Parameters of [`find_critical_delta`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchConfig {
    pub delta_max: f64,
    /// Bisection stops once the bracket is at most this wide.
    pub tol: f64,
    pub trials: usize,
    pub seed: u64,
    /// Number of halvings of `delta_max` in the coarse ascending sweep.
    pub halvings: u32,
}

impl SearchConfig {
    pub fn new(delta_max: f64, tol: f64) -> Self {
        Self {
            delta_max,
            tol,
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
            halvings: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalDelta {
    pub delta_star: f64,
    /// Largest δ with no unstable trial, smallest δ with one.
    pub bracket: (f64, f64),
    /// Every δ evaluated, with whether some trial was unstable there.
    pub evaluations: Vec<(f64, bool)>,
}

fn any_unstable(
    sys: &crate::robustness::LtiSystem,
    phi: &Nonlinearity,
    pert: &PerturbationStructure,
    delta: &Mat,
    cfg: &SimConfig,
    initial: &[Mat],
) -> Result<bool> {
    let verdicts = initial
        .par_iter()
        .map(|x0| run_verdict(sys, phi, pert, delta, cfg, x0))
        .collect::<Result<Vec<_>>>()?;
    Ok(verdicts.iter().any(|v| v.label == Stability::Unstable))
}

/// Smallest perturbation size along `direction` at which some random trial
/// trajectory is classified unstable.
///
/// A coarse sweep over `delta_max * 2^-j` (ascending) finds the first
/// unstable size, then bisection shrinks the bracket to `search.tol`.
/// Inconclusive trials count as not unstable, so the result errs high.
pub fn find_critical_delta(
    sys: &crate::robustness::LtiSystem,
    phi: &Nonlinearity,
    pert: &PerturbationStructure,
    direction: &Mat,
    cfg: &SimConfig,
    search: &SearchConfig,
) -> Result<CriticalDelta> {
    cfg.validate()?;
    if !(search.delta_max > 0.0 && search.tol > 0.0 && search.trials > 0) {
        return Err(SimError::InvalidConfig(
            "need delta_max > 0, tol > 0 and at least one trial".into(),
        ));
    }
    let dir = unit_direction(direction, pert)?;
    let initial: Vec<Mat> = (0..search.trials)
        .map(|t| trial_initial_state(sys.states(), search.seed, t).1)
        .collect();
    let mut evaluations = Vec::new();
    let mut probe = |delta: f64| -> Result<bool> {
        let unstable = any_unstable(sys, phi, pert, &dir.scale(delta), cfg, &initial)?;
        evaluations.push((delta, unstable));
        Ok(unstable)
    };

    if probe(0.0)? {
        return Err(SimError::UnstableAtZero);
    }
    let mut lo = 0.0;
    let mut hi = None;
    for j in (0..=search.halvings).rev() {
        let delta = search.delta_max * 0.5_f64.powi(j as i32);
        if probe(delta)? {
            hi = Some(delta);
            break;
        }
        lo = delta;
    }
    let mut hi = hi.ok_or(SimError::NoInstabilityFound {
        largest_tested: search.delta_max,
    })?;
    while hi - lo > search.tol {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CriticalDelta {
        delta_star: 0.5 * (lo + hi),
        bracket: (lo, hi),
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub trial: usize,
    pub seed: u64,
    pub verdict: StabilityVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub delta: f64,
    pub stable: usize,
    pub inconclusive: usize,
    pub unstable: usize,
}

/// Verdicts ordered by δ (as given) and then by trial index.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut out: Vec<SweepSummary> = Vec::new();
        for row in &self.rows {
            let entry = match out.last_mut() {
                Some(last) if last.delta == row.delta => last,
                _ => {
                    out.push(SweepSummary {
                        delta: row.delta,
                        stable: 0,
                        inconclusive: 0,
                        unstable: 0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            match row.verdict.label {
                Stability::Stable => entry.stable += 1,
                Stability::Inconclusive => entry.inconclusive += 1,
                Stability::Unstable => entry.unstable += 1,
            }
        }
        out
    }

    /// Columns: `delta,trial,seed,verdict,decay_ratio,blowup_time`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "delta",
            "trial",
            "seed",
            "verdict",
            "decay_ratio",
            "blowup_time",
        ])?;
        for row in &self.rows {
            w.write_record([
                row.delta.to_string(),
                row.trial.to_string(),
                row.seed.to_string(),
                row.verdict.label.to_string(),
                row.verdict.decay_ratio.to_string(),
                row.verdict
                    .blowup_time
                    .map(|t| t.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// True when at least one δ exceeds `radius` and every trial there is stable.
    pub fn radius_looks_conservative(&self, radius: f64) -> bool {
        let beyond: Vec<&SweepRow> = self.rows.iter().filter(|r| r.delta > radius).collect();
        !beyond.is_empty() && beyond.iter().all(|r| r.verdict.label == Stability::Stable)
    }
}

/// `[0.5, 0.8, 1.0, 1.2, 1.5] * radius`.
pub fn default_sweep_deltas(radius: f64) -> Vec<f64> {
    [0.5, 0.8, 1.0, 1.2, 1.5]
        .iter()
        .map(|f| f * radius)
        .collect()
}

/// Runs `trials` seeded random trajectories for every δ along `direction`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    sys: &crate::robustness::LtiSystem,
    phi: &Nonlinearity,
    pert: &PerturbationStructure,
    deltas: &[f64],
    direction: &Mat,
    cfg: &SimConfig,
    trials: usize,
    seed: u64,
) -> Result<SweepTable> {
    cfg.validate()?;
    let dir = unit_direction(direction, pert)?;
    let initial: Vec<(u64, Mat)> = (0..trials)
        .map(|t| trial_initial_state(sys.states(), seed, t))
        .collect();
    let jobs: Vec<(f64, usize)> = deltas
        .iter()
        .flat_map(|&d| (0..trials).map(move |t| (d, t)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(delta, trial)| {
            let (trial_seed, x0) = &initial[trial];
            let verdict = run_verdict(sys, phi, pert, &dir.scale(delta), cfg, x0)?;
            Ok(SweepRow {
                delta,
                trial,
                seed: *trial_seed,
                verdict,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

/// Worst-case linear gain of a sector, used to simulate sector-only problems.
pub fn worst_case_gain(sector: &SectorBound) -> Nonlinearity {
    Nonlinearity::LinearGain(sector.upper.clone())
}
