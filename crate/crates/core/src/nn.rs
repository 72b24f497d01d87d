//! Feedforward networks used as feedback controllers, and their sector bounds.
//!
//! A network with `q` hidden layers maps `z` (the plant output) through
//! `ω_i = φ(W_i ω_{i-1} + b_i)` and an affine output layer. When every bias is
//! zero and every hidden layer uses the same activation with sector
//! `[a1, a2]`, the network lies in `[-Γ₂, Γ₂]` on the nonnegative orthant with
//! `Γ₂ = c^q |W_{q+1}| ... |W_1|` and `c = max(|a1|, |a2|)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{elementwise_abs, operator_norm, Mat, MatrixError, NormKind};
use crate::robustness::SectorBound;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("cannot read network file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("network has no layers")]
    NoLayers,
    #[error("layer {layer}: {detail}")]
    BadLayer { layer: usize, detail: String },
    #[error("invalid activation: {0}")]
    InvalidActivation(String),
    #[error("activation '{0}' has no evaluable form")]
    NotEvaluable(String),
    #[error("sector bound needs zero biases; nonzero bias in layer(s) {0:?}")]
    NonzeroBias(Vec<usize>),
    #[error("sector bound needs one shared activation across hidden layers")]
    MixedActivations,
    #[error("expected input of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("expected a single-output network, got {0} outputs")]
    NotSiso(usize),
    #[error("invalid sampling request: {0}")]
    InvalidSampling(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum ActivationKind {
    Relu,
    Tanh,
    /// `max(slope * x, x)` with `0 <= slope < 1`.
    LeakyRelu {
        slope: f64,
    },
    /// Declared sector only; cannot be evaluated.
    Custom {
        label: String,
    },
}

/// Activation together with its declared sector `[a1, a2]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub a1: f64,
    pub a2: f64,
}

impl ActivationSpec {
    pub fn relu() -> Self {
        Self {
            kind: ActivationKind::Relu,
            a1: 0.0,
            a2: 1.0,
        }
    }

    pub fn tanh() -> Self {
        Self {
            kind: ActivationKind::Tanh,
            a1: 0.0,
            a2: 1.0,
        }
    }

    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slope) {
            return Err(NnError::InvalidActivation(format!(
                "leaky_relu slope must lie in [0, 1), got {slope}"
            )));
        }
        Ok(Self {
            kind: ActivationKind::LeakyRelu { slope },
            a1: slope,
            a2: 1.0,
        })
    }

    pub fn custom(label: impl Into<String>, a1: f64, a2: f64) -> Result<Self> {
        if !(a1.is_finite() && a2.is_finite() && a1 < a2) {
            return Err(NnError::InvalidActivation(format!(
                "custom sector needs finite a1 < a2, got [{a1}, {a2}]"
            )));
        }
        Ok(Self {
            kind: ActivationKind::Custom {
                label: label.into(),
            },
            a1,
            a2,
        })
    }

    /// Sector gain `c = max(|a1|, |a2|)`.
    pub fn gain(&self) -> f64 {
        self.a1.abs().max(self.a2.abs())
    }

    pub fn name(&self) -> &str {
        match &self.kind {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::LeakyRelu { .. } => "leaky_relu",
            ActivationKind::Custom { label } => label,
        }
    }

    fn apply(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::LeakyRelu { slope } => x.max(slope * x),
            ActivationKind::Custom { .. } => {
                unreachable!("custom activations are rejected before evaluation")
            }
        }
    }

    fn from_file(raw: &RawActivation) -> Result<Self> {
        let builtin = match raw.name.as_str() {
            "relu" => Some(Self::relu()),
            "tanh" => Some(Self::tanh()),
            "leaky_relu" => {
                let slope = raw.a1.ok_or_else(|| {
                    NnError::InvalidActivation("leaky_relu needs a1 (the negative slope)".into())
                })?;
                Some(Self::leaky_relu(slope)?)
            }
            _ => None,
        };
        match builtin {
            Some(spec) => {
                // A declared sector may be looser than the built-in one, never tighter.
                let a1 = raw.a1.unwrap_or(spec.a1);
                let a2 = raw.a2.unwrap_or(spec.a2);
                if a1 > spec.a1 || a2 < spec.a2 || a1 >= a2 {
                    return Err(NnError::InvalidActivation(format!(
                        "{} lies in [{}, {}]; declared [{a1}, {a2}] does not contain it",
                        raw.name, spec.a1, spec.a2
                    )));
                }
                Ok(Self { a1, a2, ..spec })
            }
            None => match (raw.a1, raw.a2) {
                (Some(a1), Some(a2)) => Self::custom(raw.name.clone(), a1, a2),
                _ => Err(NnError::InvalidActivation(format!(
                    "custom activation '{}' requires explicit a1 and a2",
                    raw.name
                ))),
            },
        }
    }

    fn to_file(&self) -> RawActivation {
        RawActivation {
            name: self.name().to_string(),
            a1: Some(self.a1),
            a2: Some(self.a2),
        }
    }
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Layer {
    pub weights: Mat,
    pub bias: Mat,
}

impl Layer {
    pub fn new(weights: Mat, bias: Mat) -> Result<Self> {
        if bias.shape() != (weights.rows(), 1) {
            return Err(NnError::BadLayer {
                layer: 0,
                detail: format!(
                    "bias is {:?}, expected {:?}",
                    bias.shape(),
                    (weights.rows(), 1)
                ),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn unbiased(weights: Mat) -> Self {
        let bias = Mat::zeros(weights.rows(), 1);
        Self { weights, bias }
    }

    fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        self.weights.mul_vec_into(x, out);
        for (o, b) in out.iter_mut().zip(self.bias.as_slice()) {
            *o += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ffnn {
    hidden: Vec<Layer>,
    output: Layer,
    /// One activation per hidden layer.
    activations: Vec<ActivationSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawActivation {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a2: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<RawActivation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawNetwork {
    activation: RawActivation,
    layers: Vec<RawLayer>,
}

impl Ffnn {
    /// Network with one activation shared by all hidden layers.
    pub fn new(hidden: Vec<Layer>, output: Layer, activation: ActivationSpec) -> Result<Self> {
        let activations = vec![activation; hidden.len()];
        Self::with_activations(hidden, output, activations)
    }

    pub fn with_activations(
        hidden: Vec<Layer>,
        output: Layer,
        activations: Vec<ActivationSpec>,
    ) -> Result<Self> {
        if activations.len() != hidden.len() {
            return Err(NnError::InvalidActivation(format!(
                "{} activations for {} hidden layers",
                activations.len(),
                hidden.len()
            )));
        }
        let mut width = hidden.first().unwrap_or(&output).weights.cols();
        for (idx, layer) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            if layer.weights.cols() != width {
                return Err(NnError::BadLayer {
                    layer: idx,
                    detail: format!(
                        "expects {} inputs but the previous layer yields {width}",
                        layer.weights.cols()
                    ),
                });
            }
            if layer.bias.shape() != (layer.weights.rows(), 1) {
                return Err(NnError::BadLayer {
                    layer: idx,
                    detail: "bias length differs from row count".into(),
                });
            }
            width = layer.weights.rows();
        }
        Ok(Self {
            hidden,
            output,
            activations,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawNetwork = serde_json::from_str(text)?;
        Self::from_raw(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let layer = |l: &Layer, act: Option<&ActivationSpec>| RawLayer {
            rows: l.weights.rows(),
            cols: l.weights.cols(),
            weights: l.weights.as_slice().to_vec(),
            bias: l.bias.as_slice().to_vec(),
            activation: act.map(ActivationSpec::to_file),
        };
        let shared = self
            .activations
            .first()
            .cloned()
            .unwrap_or_else(ActivationSpec::relu);
        let mut layers: Vec<RawLayer> = self
            .hidden
            .iter()
            .zip(&self.activations)
            .map(|(l, a)| layer(l, (a != &shared).then_some(a)))
            .collect();
        layers.push(layer(&self.output, None));
        let raw = RawNetwork {
            activation: shared.to_file(),
            layers,
        };
        serde_json::to_string_pretty(&raw).expect("network serializes")
    }

    fn from_raw(raw: RawNetwork) -> Result<Self> {
        let default_act = ActivationSpec::from_file(&raw.activation)?;
        let mut layers = Vec::with_capacity(raw.layers.len());
        let mut activations = Vec::new();
        for (idx, rl) in raw.layers.iter().enumerate() {
            let bad = |detail: String| NnError::BadLayer { layer: idx, detail };
            if rl.weights.len() != rl.rows * rl.cols {
                return Err(bad(format!(
                    "{} weights for a {}x{} layer",
                    rl.weights.len(),
                    rl.rows,
                    rl.cols
                )));
            }
            if rl.bias.len() != rl.rows {
                return Err(bad(format!(
                    "{} biases for {} rows",
                    rl.bias.len(),
                    rl.rows
                )));
            }
            let weights =
                Mat::new(rl.rows, rl.cols, rl.weights.clone()).map_err(|e| bad(e.to_string()))?;
            let bias = Mat::new(rl.rows, 1, rl.bias.clone()).map_err(|e| bad(e.to_string()))?;
            layers.push(Layer { weights, bias });
            activations.push(match &rl.activation {
                Some(a) => ActivationSpec::from_file(a)?,
                None => default_act.clone(),
            });
        }
        let output = layers.pop().ok_or(NnError::NoLayers)?;
        activations.pop();
        Self::with_activations(layers, output, activations)
    }

    pub fn hidden_layers(&self) -> &[Layer] {
        &self.hidden
    }

    pub fn output_layer(&self) -> &Layer {
        &self.output
    }

    pub fn activations(&self) -> &[ActivationSpec] {
        &self.activations
    }

    /// Number of hidden layers `q`.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.output).weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.output.weights.rows()
    }

    /// Ensures every hidden activation has an evaluable form.
    pub fn check_evaluable(&self) -> Result<()> {
        match self
            .activations
            .iter()
            .find(|a| matches!(a.kind, ActivationKind::Custom { .. }))
        {
            Some(a) => Err(NnError::NotEvaluable(a.name().to_string())),
            None => Ok(()),
        }
    }

    /// Forward pass on a plain slice.
    pub fn eval_slice(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                found: z.len(),
            });
        }
        self.check_evaluable()?;
        let mut current = z.to_vec();
        for (layer, act) in self.hidden.iter().zip(&self.activations) {
            let mut next = vec![0.0; layer.weights.rows()];
            layer.affine_into(&current, &mut next);
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            current = next;
        }
        let mut out = vec![0.0; self.output_dim()];
        self.output.affine_into(&current, &mut out);
        Ok(out)
    }
}

/// Forward pass `π(z)` for a column input.
pub fn ffnn_eval(net: &Ffnn, z: &Mat) -> Result<Mat> {
    if z.cols() != 1 {
        return Err(NnError::DimensionMismatch {
            expected: net.input_dim(),
            found: z.rows() * z.cols(),
        });
    }
    Ok(Mat::column(&net.eval_slice(z.as_slice())?)?)
}

/// Sector bound of a zero-bias network plus the factors that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FfnnSectorBound {
    pub sector: SectorBound,
    /// `c = max(|a1|, |a2|)`.
    pub activation_gain: f64,
    pub depth: usize,
    /// `|W_1|`, `|W_2| |W_1|`, ... up to the unscaled full product.
    pub partial_products: Vec<Mat>,
}

pub fn sector_bound_ffnn(net: &Ffnn) -> Result<FfnnSectorBound> {
    let layers: Vec<&Layer> = net
        .hidden
        .iter()
        .chain(std::iter::once(&net.output))
        .collect();
    let biased: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.bias.as_slice().iter().any(|&b| b != 0.0))
        .map(|(i, _)| i)
        .collect();
    if !biased.is_empty() {
        return Err(NnError::NonzeroBias(biased));
    }
    if net.activations.windows(2).any(|w| w[0] != w[1]) {
        return Err(NnError::MixedActivations);
    }
    let c = net.activations.first().map_or(1.0, ActivationSpec::gain);

    let mut product = elementwise_abs(&layers[0].weights);
    let mut partial_products = vec![product.clone()];
    for layer in &layers[1..] {
        product = elementwise_abs(&layer.weights).matmul(&product)?;
        partial_products.push(product.clone());
    }
    let upper = product.scale(c.powi(net.depth() as i32));
    Ok(FfnnSectorBound {
        sector: SectorBound::symmetric(upper),
        activation_gain: c,
        depth: net.depth(),
        partial_products,
    })
}

/// Axis-aligned sampling box on the nonnegative orthant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(NnError::InvalidSampling(
                "box bounds must have equal, positive length".into(),
            ));
        }
        let ok = lower
            .iter()
            .zip(&upper)
            .all(|(l, u)| l.is_finite() && u.is_finite() && *l >= 0.0 && l <= u);
        if !ok {
            return Err(NnError::InvalidSampling(
                "box bounds must be finite with 0 <= lower <= upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// `[0, 10]^dim`.
    pub fn default_for(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![10.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.random_range(l..u) } else { l })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorViolation {
    pub z: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorCheck {
    pub samples: usize,
    pub violations: Vec<SectorViolation>,
    /// Largest `π(z)_j / (Γ₂ z)_j` over components with a positive denominator.
    pub max_ratio: Option<f64>,
}

// Relative slack for the sector inequalities; the bound and the network
// compute the same products in different orders.
const SECTOR_SLACK: f64 = 1e-9;

/// Samples `z` uniformly in `input_box` and records every sample violating
/// `Γ₁ z <= π(z) <= Γ₂ z`.
pub fn empirical_sector_check(
    net: &Ffnn,
    sector: &SectorBound,
    samples: usize,
    input_box: &InputBox,
    seed: u64,
) -> Result<SectorCheck> {
    if samples == 0 {
        return Err(NnError::InvalidSampling(
            "samples must be at least 1".into(),
        ));
    }
    let (m, p) = sector.upper.shape();
    if input_box.dim() != net.input_dim() || p != net.input_dim() || m != net.output_dim() {
        return Err(NnError::DimensionMismatch {
            expected: net.input_dim(),
            found: input_box.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut max_ratio: Option<f64> = None;
    let mut lo = vec![0.0; m];
    let mut hi = vec![0.0; m];
    for _ in 0..samples {
        let z = input_box.sample(&mut rng);
        let out = net.eval_slice(&z)?;
        sector.lower.mul_vec_into(&z, &mut lo);
        sector.upper.mul_vec_into(&z, &mut hi);
        let mut violated = false;
        for j in 0..m {
            let scale = 1.0 + lo[j].abs().max(hi[j].abs()).max(out[j].abs());
            if out[j] < lo[j] - SECTOR_SLACK * scale || out[j] > hi[j] + SECTOR_SLACK * scale {
                violated = true;
            }
            if hi[j] > 0.0 {
                let ratio = out[j] / hi[j];
                max_ratio = Some(max_ratio.map_or(ratio, |r| r.max(ratio)));
            }
        }
        if violated {
            violations.push(SectorViolation { z, output: out });
        }
    }
    Ok(SectorCheck {
        samples,
        violations,
        max_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignSelection {
    pub sector: SectorBound,
    /// `+1.0` or `-1.0`.
    pub sign: f64,
    pub violations_positive: usize,
    pub violations_negative: usize,
}

impl SignSelection {
    pub fn chosen_violations(&self) -> usize {
        if self.sign > 0.0 {
            self.violations_positive
        } else {
            self.violations_negative
        }
    }
}

fn mean_output(net: &Ffnn, samples: usize, input_box: &InputBox, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        total += net
            .eval_slice(&input_box.sample(&mut rng))?
            .iter()
            .sum::<f64>();
    }
    Ok(total / samples as f64)
}

/// Picks the sign of a refined SISO upper bound by sampling the network
/// against `[-||Γ₂||, ±magnitude]`.
///
/// The candidate with fewer violations wins. On a tie the sign of the mean
/// sampled output decides, and a zero mean goes to `+magnitude`.
pub fn select_refined_sign(
    net: &Ffnn,
    magnitude: f64,
    samples: usize,
    input_box: &InputBox,
    seed: u64,
) -> Result<SignSelection> {
    if net.output_dim() != 1 {
        return Err(NnError::NotSiso(net.output_dim()));
    }
    if !(magnitude.is_finite() && magnitude > 0.0) {
        return Err(NnError::InvalidSampling(format!(
            "magnitude must be positive, got {magnitude}"
        )));
    }
    let original = sector_bound_ffnn(net)?.sector.upper;
    let lower = Mat::filled(
        1,
        net.input_dim(),
        -operator_norm(&original, NormKind::OperatorTwo),
    );
    let candidate = |sign: f64| -> Result<(SectorBound, usize)> {
        let sector = SectorBound {
            lower: lower.clone(),
            upper: Mat::filled(1, net.input_dim(), sign * magnitude),
        };
        let check = empirical_sector_check(net, &sector, samples, input_box, seed)?;
        Ok((sector, check.violations.len()))
    };
    let (plus, violations_positive) = candidate(1.0)?;
    let (minus, violations_negative) = candidate(-1.0)?;
    let prefer_minus = match violations_negative.cmp(&violations_positive) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => mean_output(net, samples, input_box, seed)? < 0.0,
    };
    let (sector, sign) = if prefer_minus {
        (minus, -1.0)
    } else {
        (plus, 1.0)
    };
    Ok(SignSelection {
        sector,
        sign,
        violations_positive,
        violations_negative,
    })
}
