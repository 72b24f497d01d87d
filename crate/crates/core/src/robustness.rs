//! Closed-loop assembly, positive-Aizerman certification and stability radii.
//!
//! Every radius here has the same shape: invert a Metzler Hurwitz matrix,
//! sandwich the inverse between the (nonnegative) perturbation scalings, and
//! take the reciprocal of a norm or spectral radius of the product.

use serde::Serialize;
use thiserror::Error;

use crate::matrix::{
    self, elementwise_leq, inverse, is_hurwitz, is_metzler, is_nonnegative,
    metzler_hurwitz_certificate, operator_norm, spectral_abscissa, Mat, MatrixError, NormKind,
    DEFAULT_HURWITZ_TOL, DEFAULT_MAX_ITER, DEFAULT_SPECTRAL_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("state matrix is not Metzler")]
    NotMetzler,
    #[error("state matrix is not Hurwitz")]
    NotHurwitz,
    #[error("closed loop at the upper sector bound is not Metzler")]
    NotMetzlerUpper,
    #[error("positive-Aizerman certification failed: {}", .0.failed_gates().join(", "))]
    CertificationFailed(Box<AizermanCertificate>),
    #[error("perturbation structure has no Schur scale")]
    MissingSchurScale,
    #[error("spectral radius of the scaled gain is zero; the structure cannot destabilize")]
    ZeroSpectralRadius,
    #[error("gain E A^-1 D vanishes; the structure cannot destabilize")]
    UnboundedRadius,
    #[error("norm {0:?} is not a monotone operator norm")]
    UnsupportedNorm(NormKind),
    #[error("invalid perturbation structure: {0}")]
    InvalidStructure(String),
    #[error("expected P >= Q entrywise")]
    OrderViolated,
    #[error("network sector must satisfy lower = -upper")]
    AsymmetricSector,
}

pub type Result<T> = std::result::Result<T, RobustnessError>;

fn mismatch(what: impl Into<String>) -> RobustnessError {
    RobustnessError::DimensionMismatch(what.into())
}

/// Linear part `x' = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LtiSystem {
    a: Mat,
    b: Mat,
    c: Mat,
}

impl LtiSystem {
    pub fn new(a: Mat, b: Mat, c: Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(mismatch(format!("A must be square, got {:?}", a.shape())));
        }
        if b.rows() != a.rows() {
            return Err(mismatch(format!(
                "B has {} rows, A has {}",
                b.rows(),
                a.rows()
            )));
        }
        if c.cols() != a.rows() {
            return Err(mismatch(format!(
                "C has {} columns, A has {} rows",
                c.cols(),
                a.rows()
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    pub fn states(&self) -> usize {
        self.a.rows()
    }

    pub fn inputs(&self) -> usize {
        self.b.cols()
    }

    pub fn outputs(&self) -> usize {
        self.c.rows()
    }
}

/// Entrywise sector `[lower, upper]`, both `m x p`.
///
/// Ordering is not enforced here; it is one of the certification gates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorBound {
    pub lower: Mat,
    pub upper: Mat,
}

impl SectorBound {
    pub fn new(lower: Mat, upper: Mat) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(mismatch(format!(
                "sector bounds {:?} and {:?} differ in shape",
                lower.shape(),
                upper.shape()
            )));
        }
        Ok(Self { lower, upper })
    }

    /// `[-upper, upper]`.
    pub fn symmetric(upper: Mat) -> Self {
        Self {
            lower: upper.scale(-1.0),
            upper,
        }
    }

    pub fn is_ordered(&self) -> bool {
        elementwise_leq(&self.lower, &self.upper).unwrap_or(false)
    }

    pub fn is_symmetric(&self) -> bool {
        self.lower == self.upper.scale(-1.0)
    }
}

/// Structured perturbation `D Δ E`, optionally with an entrywise scale `S`
/// so that the effective perturbation is `D (S ∘ Δ) E`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationStructure {
    d: Mat,
    e: Mat,
    norm: NormKind,
    schur_scale: Option<Mat>,
}

impl PerturbationStructure {
    pub fn new(d: Mat, e: Mat, norm: NormKind) -> Result<Self> {
        if !is_nonnegative(&d) || !is_nonnegative(&e) {
            return Err(RobustnessError::InvalidStructure(
                "D and E must be entrywise nonnegative".into(),
            ));
        }
        if d.rows() != e.cols() {
            return Err(mismatch(format!(
                "D is {:?} but E is {:?}; D rows must equal E columns",
                d.shape(),
                e.shape()
            )));
        }
        Ok(Self {
            d,
            e,
            norm,
            schur_scale: None,
        })
    }

    /// Schur-scaled structure; the norm is fixed to [`NormKind::MaxAbsEntry`].
    pub fn with_schur_scale(d: Mat, e: Mat, s: Mat) -> Result<Self> {
        let mut pert = Self::new(d, e, NormKind::MaxAbsEntry)?;
        if !is_nonnegative(&s) {
            return Err(RobustnessError::InvalidStructure(
                "Schur scale S must be entrywise nonnegative".into(),
            ));
        }
        if s.shape() != pert.delta_shape() {
            return Err(mismatch(format!(
                "S is {:?}, expected {:?}",
                s.shape(),
                pert.delta_shape()
            )));
        }
        pert.schur_scale = Some(s);
        Ok(pert)
    }

    pub fn d(&self) -> &Mat {
        &self.d
    }

    pub fn e(&self) -> &Mat {
        &self.e
    }

    pub fn norm(&self) -> NormKind {
        self.norm
    }

    pub fn schur_scale(&self) -> Option<&Mat> {
        self.schur_scale.as_ref()
    }

    /// Same scalings under a different norm. Drops any Schur scale.
    pub fn with_norm(&self, norm: NormKind) -> Self {
        Self {
            d: self.d.clone(),
            e: self.e.clone(),
            norm,
            schur_scale: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.d.rows()
    }

    /// Shape `(k1, k2)` of Δ.
    pub fn delta_shape(&self) -> (usize, usize) {
        (self.d.cols(), self.e.rows())
    }

    pub fn is_scalar(&self) -> bool {
        self.delta_shape() == (1, 1)
    }

    /// `D (S ∘ Δ) E` (or `D Δ E` without a Schur scale).
    pub fn perturbation(&self, delta: &Mat) -> Result<Mat> {
        if delta.shape() != self.delta_shape() {
            return Err(mismatch(format!(
                "Δ is {:?}, expected {:?}",
                delta.shape(),
                self.delta_shape()
            )));
        }
        let scaled = match &self.schur_scale {
            Some(s) => s.hadamard(delta)?,
            None => delta.clone(),
        };
        Ok(self.d.matmul(&scaled)?.matmul(&self.e)?)
    }

    fn check_state_dim(&self, n: usize) -> Result<()> {
        if self.state_dim() != n {
            return Err(mismatch(format!(
                "perturbation acts on {} states, system has {}",
                self.state_dim(),
                n
            )));
        }
        Ok(())
    }
}

/// Gate-by-gate outcome of the positive-Aizerman test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AizermanCertificate {
    pub b_nonneg: bool,
    pub c_nonneg: bool,
    pub sector_ordered: bool,
    pub metzler_at_lower: bool,
    pub hurwitz_at_upper: bool,
    /// Not a hypothesis of the theorem; needed for the positive vector and by
    /// the radius formula.
    pub metzler_at_upper: bool,
    /// Spectral abscissa of `A + B Σ₂ C`.
    pub upper_abscissa: f64,
    /// `v > 0` with `(A + B Σ₂ C) v < 0`.
    pub positive_vector: Option<Mat>,
    pub verdict: bool,
}

impl AizermanCertificate {
    pub fn failed_gates(&self) -> Vec<&'static str> {
        [
            (self.b_nonneg, "B >= 0"),
            (self.c_nonneg, "C >= 0"),
            (self.sector_ordered, "Sigma1 <= Sigma2"),
            (self.metzler_at_lower, "A + B Sigma1 C Metzler"),
            (self.hurwitz_at_upper, "A + B Sigma2 C Hurwitz"),
        ]
        .into_iter()
        .filter_map(|(ok, name)| (!ok).then_some(name))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusFormula {
    LinearNorm,
    SchurSpectral,
    LureUpperSector,
    NnUpperSector,
}

/// Hypotheses checked before a radius formula was applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusGates {
    Linear { metzler: bool, hurwitz: bool },
    Aizerman(AizermanCertificate),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusReport {
    pub radius: f64,
    pub norm: NormKind,
    /// The matrix whose inverse enters the formula.
    pub closed_loop: Mat,
    pub formula: RadiusFormula,
    pub gates: RadiusGates,
}

/// `A + B K C`.
pub fn closed_loop_matrix(sys: &LtiSystem, gain: &Mat) -> Result<Mat> {
    if gain.shape() != (sys.inputs(), sys.outputs()) {
        return Err(mismatch(format!(
            "gain is {:?}, expected {:?}",
            gain.shape(),
            (sys.inputs(), sys.outputs())
        )));
    }
    Ok(sys.a.checked_add(&sys.b.matmul(gain)?.matmul(&sys.c)?)?)
}

fn check_sector_shape(sys: &LtiSystem, sector: &SectorBound) -> Result<()> {
    let want = (sys.inputs(), sys.outputs());
    if sector.upper.shape() != want {
        return Err(mismatch(format!(
            "sector is {:?}, expected {:?}",
            sector.upper.shape(),
            want
        )));
    }
    Ok(())
}

/// Evaluates every hypothesis of the positive Aizerman theorem.
pub fn certify_positive_lure(sys: &LtiSystem, sector: &SectorBound) -> Result<AizermanCertificate> {
    check_sector_shape(sys, sector)?;
    let lower = closed_loop_matrix(sys, &sector.lower)?;
    let upper = closed_loop_matrix(sys, &sector.upper)?;

    let b_nonneg = is_nonnegative(&sys.b);
    let c_nonneg = is_nonnegative(&sys.c);
    let sector_ordered = sector.is_ordered();
    let metzler_at_lower = is_metzler(&lower)?;
    let metzler_at_upper = is_metzler(&upper)?;
    let upper_abscissa = spectral_abscissa(&upper, DEFAULT_SPECTRAL_TOL, DEFAULT_MAX_ITER)?.value;
    let hurwitz_at_upper = upper_abscissa < -DEFAULT_HURWITZ_TOL;

    let positive_vector = if metzler_at_upper && hurwitz_at_upper {
        metzler_hurwitz_certificate(&upper).ok()
    } else {
        None
    };
    let verdict = b_nonneg && c_nonneg && sector_ordered && metzler_at_lower && hurwitz_at_upper;
    Ok(AizermanCertificate {
        b_nonneg,
        c_nonneg,
        sector_ordered,
        metzler_at_lower,
        hurwitz_at_upper,
        metzler_at_upper,
        upper_abscissa,
        positive_vector,
        verdict,
    })
}

fn require_monotone(norm: NormKind) -> Result<()> {
    if norm.is_monotone_operator() {
        Ok(())
    } else {
        Err(RobustnessError::UnsupportedNorm(norm))
    }
}

fn reciprocal(gain_norm: f64) -> Result<f64> {
    let radius = 1.0 / gain_norm;
    if gain_norm > 0.0 && radius.is_finite() {
        Ok(radius)
    } else {
        Err(RobustnessError::UnboundedRadius)
    }
}

/// `E M^{-1} D`.
fn structured_gain(m: &Mat, pert: &PerturbationStructure) -> Result<Mat> {
    Ok(pert.e.matmul(&inverse(m)?)?.matmul(&pert.d)?)
}

fn linear_gates(a: &Mat) -> Result<(bool, bool)> {
    let metzler = is_metzler(a)?;
    let hurwitz = is_hurwitz(a, DEFAULT_HURWITZ_TOL)?;
    if !metzler {
        return Err(RobustnessError::NotMetzler);
    }
    if !hurwitz {
        return Err(RobustnessError::NotHurwitz);
    }
    Ok((metzler, hurwitz))
}

/// `1 / ||E A^{-1} D||` for a Metzler Hurwitz `A`.
pub fn stability_radius_linear(a: &Mat, pert: &PerturbationStructure) -> Result<RadiusReport> {
    require_monotone(pert.norm)?;
    if !a.is_square() {
        return Err(MatrixError::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        }
        .into());
    }
    pert.check_state_dim(a.rows())?;
    let (metzler, hurwitz) = linear_gates(a)?;
    let gain = structured_gain(a, pert)?;
    Ok(RadiusReport {
        radius: reciprocal(operator_norm(&gain, pert.norm))?,
        norm: pert.norm,
        closed_loop: a.clone(),
        formula: RadiusFormula::LinearNorm,
        gates: RadiusGates::Linear { metzler, hurwitz },
    })
}

/// `1 / ρ(E (-A)^{-1} D S)` for Schur-scaled perturbations measured by the
/// largest entry.
pub fn stability_radius_schur(a: &Mat, pert: &PerturbationStructure) -> Result<RadiusReport> {
    let s = pert
        .schur_scale
        .as_ref()
        .ok_or(RobustnessError::MissingSchurScale)?;
    if !a.is_square() {
        return Err(MatrixError::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        }
        .into());
    }
    pert.check_state_dim(a.rows())?;
    let (metzler, hurwitz) = linear_gates(a)?;
    let product = structured_gain(&a.scale(-1.0), pert)?.matmul(s)?;
    let rho = matrix::spectral_radius(&product, DEFAULT_SPECTRAL_TOL, DEFAULT_MAX_ITER)?.value;
    if rho <= 0.0 {
        return Err(RobustnessError::ZeroSpectralRadius);
    }
    Ok(RadiusReport {
        radius: 1.0 / rho,
        norm: NormKind::MaxAbsEntry,
        closed_loop: a.clone(),
        formula: RadiusFormula::SchurSpectral,
        gates: RadiusGates::Linear { metzler, hurwitz },
    })
}

/// Radius of the Lur'e loop, `1 / ||E (A + B Σ₂ C)^{-1} D||`.
///
/// Fails with [`RobustnessError::CertificationFailed`] unless every
/// positive-Aizerman gate passes, and with
/// [`RobustnessError::NotMetzlerUpper`] if the upper closed loop is not
/// Metzler.
pub fn stability_radius_lure(
    sys: &LtiSystem,
    sector: &SectorBound,
    pert: &PerturbationStructure,
) -> Result<RadiusReport> {
    let report = stability_radius_lure_ungated(sys, sector, pert)?;
    if let RadiusGates::Aizerman(cert) = &report.gates {
        if !cert.verdict {
            return Err(RobustnessError::CertificationFailed(Box::new(cert.clone())));
        }
        if !cert.metzler_at_upper {
            return Err(RobustnessError::NotMetzlerUpper);
        }
    }
    Ok(report)
}

/// Evaluates the Lur'e radius formula regardless of the gate outcome.
///
/// The certificate is still computed and embedded, so callers can report
/// which hypotheses failed. Only the inverse of the upper closed loop is
/// required to exist.
pub fn stability_radius_lure_ungated(
    sys: &LtiSystem,
    sector: &SectorBound,
    pert: &PerturbationStructure,
) -> Result<RadiusReport> {
    require_monotone(pert.norm)?;
    pert.check_state_dim(sys.states())?;
    let cert = certify_positive_lure(sys, sector)?;
    let upper = closed_loop_matrix(sys, &sector.upper)?;
    let gain = structured_gain(&upper, pert)?;
    Ok(RadiusReport {
        radius: reciprocal(operator_norm(&gain, pert.norm))?,
        norm: pert.norm,
        closed_loop: upper,
        formula: RadiusFormula::LureUpperSector,
        gates: RadiusGates::Aizerman(cert),
    })
}

/// Radius of a loop closed through a network whose sector is `[-Γ₂, Γ₂]`.
pub fn nn_stability_radius(
    sys: &LtiSystem,
    nn_sector: &SectorBound,
    pert: &PerturbationStructure,
) -> Result<RadiusReport> {
    if !nn_sector.is_symmetric() {
        return Err(RobustnessError::AsymmetricSector);
    }
    let mut report = stability_radius_lure(sys, nn_sector, pert)?;
    report.formula = RadiusFormula::NnUpperSector;
    Ok(report)
}

/// Same as [`nn_stability_radius`] without enforcing the gates.
pub fn nn_stability_radius_ungated(
    sys: &LtiSystem,
    nn_sector: &SectorBound,
    pert: &PerturbationStructure,
) -> Result<RadiusReport> {
    if !nn_sector.is_symmetric() {
        return Err(RobustnessError::AsymmetricSector);
    }
    let mut report = stability_radius_lure_ungated(sys, nn_sector, pert)?;
    report.formula = RadiusFormula::NnUpperSector;
    Ok(report)
}

/// Refined magnitude of the upper network sector and its two sign candidates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinedSector {
    pub magnitude: f64,
    /// `[+magnitude, -magnitude]` as `m x p` matrices (scalars in the SISO case).
    pub candidates: [Mat; 2],
    pub delta_crit: f64,
}

/// Default unit perturbation direction: the identity pattern truncated to
/// `k1 x k2` (the scalar 1 for a scalar structure).
pub fn default_refinement_direction(pert: &PerturbationStructure) -> Mat {
    let (k1, k2) = pert.delta_shape();
    Mat::from_fn(k1, k2, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Sector magnitude at which the loop, perturbed by `delta_crit` along
/// `direction`, loses invertibility: `1 / ||C (A + δ D Δ̂ E)^{-1} B||`.
pub fn refine_upper_sector(
    sys: &LtiSystem,
    pert: &PerturbationStructure,
    delta_crit: f64,
    direction: Option<&Mat>,
) -> Result<RefinedSector> {
    pert.check_state_dim(sys.states())?;
    let default_dir;
    let dir = match direction {
        Some(d) => d,
        None => {
            default_dir = default_refinement_direction(pert);
            &default_dir
        }
    };
    let perturbed = sys
        .a
        .checked_add(&pert.perturbation(&dir.scale(delta_crit))?)?;
    let transfer = sys.c.matmul(&inverse(&perturbed)?)?.matmul(&sys.b)?;
    let norm = if pert.norm.is_monotone_operator() {
        pert.norm
    } else {
        NormKind::OperatorTwo
    };
    let magnitude = reciprocal(operator_norm(&transfer, norm))?;
    let shape = (sys.inputs(), sys.outputs());
    let candidates = [
        Mat::filled(shape.0, shape.1, magnitude),
        Mat::filled(shape.0, shape.1, -magnitude),
    ];
    Ok(RefinedSector {
        magnitude,
        candidates,
        delta_crit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityGap {
    pub r_p: f64,
    pub r_q: f64,
}

/// Radii of two ordered Metzler Hurwitz matrices `P >= Q`; the larger matrix
/// has the smaller radius.
pub fn monotonicity_gap(p: &Mat, q: &Mat, pert: &PerturbationStructure) -> Result<MonotonicityGap> {
    if !elementwise_leq(q, p)? {
        return Err(RobustnessError::OrderViolated);
    }
    Ok(MonotonicityGap {
        r_p: stability_radius_linear(p, pert)?.radius,
        r_q: stability_radius_linear(q, pert)?.radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::spectral_abscissa;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    fn sys_a() -> LtiSystem {
        LtiSystem::new(
            m(&[&[-5.0, 5.0, 1.0], &[6.0, -7.0, 1.0], &[2.0, 1.0, -5.0]]),
            Mat::column(&[1.0, 1.0, 1.0]).unwrap(),
            Mat::row(&[1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    fn pert_a() -> PerturbationStructure {
        PerturbationStructure::new(
            Mat::column(&[1.0, 0.5, 1.0]).unwrap(),
            Mat::row(&[0.5, 1.0, 1.0]).unwrap(),
            NormKind::OperatorTwo,
        )
        .unwrap()
    }

    fn sys_b() -> LtiSystem {
        LtiSystem::new(
            m(&[&[-5.0, 3.0, 1.0], &[2.0, -5.0, 1.0], &[3.0, 1.0, -4.0]]),
            Mat::column(&[0.5, 1.0, 0.4]).unwrap(),
            Mat::row(&[0.3, 1.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    fn pert_b() -> PerturbationStructure {
        PerturbationStructure::new(
            Mat::column(&[1.0, 0.0, 0.0]).unwrap(),
            Mat::row(&[1.0, 0.0, 0.0]).unwrap(),
            NormKind::OperatorTwo,
        )
        .unwrap()
    }

    fn scalar_sector(lo: f64, hi: f64) -> SectorBound {
        SectorBound::new(Mat::scalar(lo).unwrap(), Mat::scalar(hi).unwrap()).unwrap()
    }

    fn assert_mat_close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let diff = a.checked_sub(b).unwrap().max_abs();
        assert!(diff <= tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn closed_loop_examples() {
        let sys = sys_a();
        assert_eq!(
            closed_loop_matrix(&sys, &Mat::zeros(1, 1)).unwrap(),
            *sys.a()
        );
        let upper = closed_loop_matrix(&sys, &Mat::scalar(-0.48).unwrap()).unwrap();
        assert_mat_close(
            &upper,
            &m(&[
                &[-5.48, 4.52, 0.52],
                &[5.52, -7.48, 0.52],
                &[1.52, 0.52, -5.48],
            ]),
            1e-12,
        );
        let lower = closed_loop_matrix(&sys, &Mat::scalar(-2.0).unwrap()).unwrap();
        assert_eq!(
            lower,
            m(&[&[-7.0, 3.0, -1.0], &[4.0, -9.0, -1.0], &[0.0, -1.0, -7.0]])
        );
        assert!(matches!(
            closed_loop_matrix(&sys, &Mat::zeros(2, 1)),
            Err(RobustnessError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn certification_of_example_a_fails_only_at_lower_metzler_gate() {
        let cert = certify_positive_lure(&sys_a(), &scalar_sector(-2.0, -0.48)).unwrap();
        assert!(cert.b_nonneg && cert.c_nonneg && cert.sector_ordered);
        assert!(!cert.metzler_at_lower);
        assert!(cert.metzler_at_upper && cert.hurwitz_at_upper);
        assert!(cert.positive_vector.is_some());
        assert!(!cert.verdict);
        assert_eq!(cert.failed_gates(), vec!["A + B Sigma1 C Metzler"]);
    }

    #[test]
    fn certification_of_example_b_fails_at_upper_hurwitz_gate() {
        // A + 0.91 B C has an eigenvalue at about +0.3007.
        let cert = certify_positive_lure(
            &sys_b(),
            &SectorBound::symmetric(Mat::scalar(0.91).unwrap()),
        )
        .unwrap();
        assert!(cert.metzler_at_lower && cert.metzler_at_upper);
        assert!(!cert.hurwitz_at_upper);
        assert!((cert.upper_abscissa - 0.300_678_960_898_9).abs() < 1e-9);
        assert!(cert.positive_vector.is_none());
        assert!(!cert.verdict);
    }

    #[test]
    fn zero_sector_on_stable_metzler_plant_certifies() {
        let sys = LtiSystem::new(
            m(&[&[-2.0, 1.0], &[0.5, -3.0]]),
            Mat::column(&[1.0, 0.0]).unwrap(),
            Mat::row(&[0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let cert = certify_positive_lure(&sys, &scalar_sector(0.0, 0.0)).unwrap();
        assert!(cert.verdict);
        let v = cert.positive_vector.unwrap();
        assert!(v.min_entry() > 0.0);
    }

    #[test]
    fn unordered_sector_fails_gate() {
        let cert = certify_positive_lure(&sys_b(), &scalar_sector(0.2, 0.1)).unwrap();
        assert!(!cert.sector_ordered);
        assert!(!cert.verdict);
    }

    #[test]
    fn linear_radius_examples() {
        let eye = Mat::identity(3);
        for norm in [
            NormKind::OperatorOne,
            NormKind::OperatorTwo,
            NormKind::OperatorInf,
        ] {
            let pert = PerturbationStructure::new(eye.clone(), eye.clone(), norm).unwrap();
            let r = stability_radius_linear(&eye.scale(-1.0), &pert).unwrap();
            assert!((r.radius - 1.0).abs() < 1e-12);
            assert_eq!(r.formula, RadiusFormula::LinearNorm);
        }
        let one = Mat::scalar(1.0).unwrap();
        let pert =
            PerturbationStructure::new(one.clone(), one.clone(), NormKind::OperatorTwo).unwrap();
        let r = stability_radius_linear(&Mat::scalar(-2.0).unwrap(), &pert).unwrap();
        assert!((r.radius - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_radius_rejects_bad_inputs() {
        let one = Mat::scalar(1.0).unwrap();
        let pert =
            PerturbationStructure::new(one.clone(), one.clone(), NormKind::OperatorTwo).unwrap();
        assert_eq!(
            stability_radius_linear(&Mat::scalar(1.0).unwrap(), &pert),
            Err(RobustnessError::NotHurwitz)
        );
        let pert3 = pert_a();
        assert_eq!(
            stability_radius_linear(
                &m(&[&[-1.0, -1.0, 0.0], &[0.0, -1.0, 0.0], &[0.0, 0.0, -1.0]]),
                &pert3
            ),
            Err(RobustnessError::NotMetzler)
        );
        let max_abs = pert.with_norm(NormKind::MaxAbsEntry);
        assert_eq!(
            stability_radius_linear(&Mat::scalar(-1.0).unwrap(), &max_abs),
            Err(RobustnessError::UnsupportedNorm(NormKind::MaxAbsEntry))
        );
        assert!(matches!(
            stability_radius_linear(&Mat::identity(2).scale(-1.0), &pert),
            Err(RobustnessError::DimensionMismatch(_))
        ));
        let zero =
            PerturbationStructure::new(Mat::zeros(1, 1), one, NormKind::OperatorTwo).unwrap();
        assert_eq!(
            stability_radius_linear(&Mat::scalar(-1.0).unwrap(), &zero),
            Err(RobustnessError::UnboundedRadius)
        );
    }

    #[test]
    fn perturbation_structure_validation() {
        let neg = PerturbationStructure::new(
            Mat::column(&[1.0, -0.5]).unwrap(),
            Mat::row(&[1.0, 1.0]).unwrap(),
            NormKind::OperatorOne,
        );
        assert!(matches!(neg, Err(RobustnessError::InvalidStructure(_))));
        let shape = PerturbationStructure::new(
            Mat::column(&[1.0, 0.5]).unwrap(),
            Mat::row(&[1.0, 1.0, 1.0]).unwrap(),
            NormKind::OperatorOne,
        );
        assert!(matches!(shape, Err(RobustnessError::DimensionMismatch(_))));
        let schur = PerturbationStructure::with_schur_scale(
            Mat::identity(2),
            Mat::identity(2),
            Mat::filled(2, 2, 1.0),
        )
        .unwrap();
        assert_eq!(schur.norm(), NormKind::MaxAbsEntry);
        let bad_s = PerturbationStructure::with_schur_scale(
            Mat::identity(2),
            Mat::identity(2),
            Mat::filled(2, 2, -1.0),
        );
        assert!(matches!(bad_s, Err(RobustnessError::InvalidStructure(_))));
    }

    #[test]
    fn schur_radius_examples() {
        let one = Mat::scalar(1.0).unwrap();
        let a = Mat::scalar(-3.0).unwrap();
        let pert =
            PerturbationStructure::with_schur_scale(one.clone(), one.clone(), one.clone()).unwrap();
        let schur = stability_radius_schur(&a, &pert).unwrap();
        assert_eq!(schur.formula, RadiusFormula::SchurSpectral);
        for norm in [
            NormKind::OperatorOne,
            NormKind::OperatorTwo,
            NormKind::OperatorInf,
        ] {
            let lin = stability_radius_linear(&a, &pert.with_norm(norm)).unwrap();
            assert!((lin.radius - schur.radius).abs() < 1e-12);
        }
        let zero_s =
            PerturbationStructure::with_schur_scale(one.clone(), one.clone(), Mat::zeros(1, 1))
                .unwrap();
        assert_eq!(
            stability_radius_schur(&a, &zero_s),
            Err(RobustnessError::ZeroSpectralRadius)
        );
        let plain = PerturbationStructure::new(one.clone(), one, NormKind::OperatorTwo).unwrap();
        assert_eq!(
            stability_radius_schur(&a, &plain),
            Err(RobustnessError::MissingSchurScale)
        );
    }

    #[test]
    fn lure_radius_example_a_requires_override() {
        let sector = scalar_sector(-2.0, -0.48);
        let err = stability_radius_lure(&sys_a(), &sector, &pert_a()).unwrap_err();
        match err {
            RobustnessError::CertificationFailed(cert) => assert!(!cert.metzler_at_lower),
            other => panic!("unexpected {other:?}"),
        }
        // The formula on the stated matrices: 1 / |E (A + B Σ₂ C)^{-1} D| = 0.64889...
        let report = stability_radius_lure_ungated(&sys_a(), &sector, &pert_a()).unwrap();
        assert!(
            (report.radius - 0.648_890_418_028_557_3).abs() < 1e-12,
            "{}",
            report.radius
        );
    }

    #[test]
    fn lure_radius_zero_sector_matches_linear() {
        let sys = LtiSystem::new(
            m(&[&[-2.0, 1.0], &[0.5, -3.0]]),
            Mat::column(&[1.0, 1.0]).unwrap(),
            Mat::row(&[1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let eye = Mat::identity(2);
        let pert = PerturbationStructure::new(eye.clone(), eye, NormKind::OperatorTwo).unwrap();
        let lure = stability_radius_lure(&sys, &scalar_sector(0.0, 0.0), &pert).unwrap();
        let lin = stability_radius_linear(sys.a(), &pert).unwrap();
        assert!((lure.radius - lin.radius).abs() < 1e-12);
        assert_eq!(lure.formula, RadiusFormula::LureUpperSector);
    }

    #[test]
    fn nn_radius_examples() {
        // Zero network: radius of A alone, 1 / |E A^{-1} D| = 45/19.
        let zero = nn_stability_radius(
            &sys_b(),
            &SectorBound::symmetric(Mat::zeros(1, 1)),
            &pert_b(),
        )
        .unwrap();
        let lin = stability_radius_linear(sys_b().a(), &pert_b()).unwrap();
        assert!((zero.radius - lin.radius).abs() < 1e-12);
        assert!((zero.radius - 45.0 / 19.0).abs() < 1e-12);
        assert_eq!(zero.formula, RadiusFormula::NnUpperSector);

        assert_eq!(
            nn_stability_radius(&sys_b(), &scalar_sector(-0.1, 0.5), &pert_b()),
            Err(RobustnessError::AsymmetricSector)
        );
        // Γ₂ = 0.91 leaves A + B Γ₂ C unstable, so no certified radius exists.
        let err = nn_stability_radius(
            &sys_b(),
            &SectorBound::symmetric(Mat::scalar(0.91).unwrap()),
            &pert_b(),
        )
        .unwrap_err();
        assert!(matches!(err, RobustnessError::CertificationFailed(_)));
    }

    #[test]
    fn nn_radius_half_gain_matches_scalar_bisection() {
        let sys = sys_b();
        let pert = pert_b();
        let gamma = Mat::scalar(0.5).unwrap();
        let report =
            nn_stability_radius(&sys, &SectorBound::symmetric(gamma.clone()), &pert).unwrap();
        // Abscissa of A + δ D E + B Γ₂ C is increasing in δ; bisect its zero.
        let upper = closed_loop_matrix(&sys, &gamma).unwrap();
        let de = pert.perturbation(&Mat::scalar(1.0).unwrap()).unwrap();
        let abscissa = |delta: f64| {
            spectral_abscissa(&upper.checked_add(&de.scale(delta)).unwrap(), 1e-10, 10_000)
                .unwrap()
                .value
        };
        let (mut lo, mut hi) = (0.0, 10.0 * report.radius);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if abscissa(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((0.5 * (lo + hi) - report.radius).abs() < 1e-6 * report.radius);
        // Frozen from the oracle above: 0.878758169934641.
        assert!((report.radius - 0.878_758_169_934_641).abs() < 1e-9);
    }

    #[test]
    fn refinement_examples() {
        let sys = sys_b();
        let pert = pert_b();
        // 1 / |C (A + 3.15 D E)^{-1} B| on the stated matrices.
        let refined = refine_upper_sector(&sys, &pert, 3.15, None).unwrap();
        assert!(
            (refined.magnitude - 0.373_115_577_889_447).abs() < 1e-9,
            "{}",
            refined.magnitude
        );
        assert_eq!(refined.candidates[0].get(0, 0), refined.magnitude);
        assert_eq!(refined.candidates[1].get(0, 0), -refined.magnitude);

        let unperturbed = refine_upper_sector(&sys, &pert, 0.0, None).unwrap();
        let transfer = sys
            .c()
            .matmul(&inverse(sys.a()).unwrap())
            .unwrap()
            .matmul(sys.b())
            .unwrap();
        assert!((unperturbed.magnitude - 1.0 / transfer.get(0, 0).abs()).abs() < 1e-12);
    }

    #[test]
    fn refinement_round_trip() {
        let sys = sys_b();
        let pert = pert_b();
        for gamma in [0.1, 0.3, 0.5, 0.65] {
            let sector = SectorBound::symmetric(Mat::scalar(gamma).unwrap());
            let r = stability_radius_lure(&sys, &sector, &pert).unwrap().radius;
            let refined = refine_upper_sector(&sys, &pert, r, None).unwrap();
            assert!(
                (refined.magnitude - gamma).abs() < 1e-6,
                "{gamma}: {}",
                refined.magnitude
            );
        }
    }

    #[test]
    fn refinement_singular_perturbed_matrix() {
        let sys = sys_b();
        let pert = pert_b();
        let r0 = stability_radius_linear(sys.a(), &pert).unwrap().radius;
        assert!(matches!(
            refine_upper_sector(&sys, &pert, r0, None),
            Err(RobustnessError::Matrix(MatrixError::Singular { .. }))
        ));
    }

    #[test]
    fn monotonicity_examples() {
        let eye = Mat::identity(2);
        let pert =
            PerturbationStructure::new(eye.clone(), eye.clone(), NormKind::OperatorTwo).unwrap();
        let p = eye.scale(-1.0);
        let same = monotonicity_gap(&p, &p, &pert).unwrap();
        assert_eq!(same.r_p, same.r_q);
        let gap = monotonicity_gap(&p, &eye.scale(-2.0), &pert).unwrap();
        assert!((gap.r_p - 1.0).abs() < 1e-12 && (gap.r_q - 2.0).abs() < 1e-12);
        assert_eq!(
            monotonicity_gap(&eye.scale(-2.0), &p, &pert),
            Err(RobustnessError::OrderViolated)
        );
    }
}
