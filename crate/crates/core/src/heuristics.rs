//! Split-direction heuristics: constrained maximization of nonlinearity
//! measures built from the STM, the STT, and the unscented transform.
//!
//! Every objective value `F` is reported unsquared, so a whitened criterion
//! reads as a Mahalanobis distance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::propagation::{symmetrize, Mixand};
use crate::tensorlab::{
    cholesky_lower, maximize_form_with_starts, sym_eigen_desc, top_right_singular, whitening_factor,
    FullySymTensor, PowerIterationOptions, Tensor3, TensorError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeuristicError {
    #[error("heuristic {kind} requires the {missing}")]
    Missing {
        kind: HeuristicKind,
        missing: &'static str,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid heuristic parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown heuristic {0:?}")]
    UnknownKind(String),
    #[error("sigma point {index} could not be mapped: {message}")]
    SigmaPoint { index: usize, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeuristicKind {
    #[serde(rename = "MAXVAR")]
    Maxvar,
    #[serde(rename = "FOS")]
    Fos,
    #[serde(rename = "SOS")]
    Sos,
    #[serde(rename = "SOLC")]
    Solc,
    #[serde(rename = "SADL")]
    Sadl,
    #[serde(rename = "USFOS")]
    Usfos,
    #[serde(rename = "USSOLC")]
    Ussolc,
    #[serde(rename = "SAFOS")]
    Safos,
    #[serde(rename = "SASOS")]
    Sasos,
    #[serde(rename = "WUSSOS")]
    Wussos,
    #[serde(rename = "WUSSOLC")]
    Wussolc,
    #[serde(rename = "WUSSADL_S")]
    WussadlS,
    #[serde(rename = "WUSSADL_D")]
    WussadlD,
    #[serde(rename = "WSASOS")]
    Wsasos,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 14] = [
        HeuristicKind::Maxvar,
        HeuristicKind::Fos,
        HeuristicKind::Sos,
        HeuristicKind::Solc,
        HeuristicKind::Sadl,
        HeuristicKind::Usfos,
        HeuristicKind::Ussolc,
        HeuristicKind::Safos,
        HeuristicKind::Sasos,
        HeuristicKind::Wussos,
        HeuristicKind::Wussolc,
        HeuristicKind::WussadlS,
        HeuristicKind::WussadlD,
        HeuristicKind::Wsasos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::Maxvar => "MAXVAR",
            HeuristicKind::Fos => "FOS",
            HeuristicKind::Sos => "SOS",
            HeuristicKind::Solc => "SOLC",
            HeuristicKind::Sadl => "SADL",
            HeuristicKind::Usfos => "USFOS",
            HeuristicKind::Ussolc => "USSOLC",
            HeuristicKind::Safos => "SAFOS",
            HeuristicKind::Sasos => "SASOS",
            HeuristicKind::Wussos => "WUSSOS",
            HeuristicKind::Wussolc => "WUSSOLC",
            HeuristicKind::WussadlS => "WUSSADL_S",
            HeuristicKind::WussadlD => "WUSSADL_D",
            HeuristicKind::Wsasos => "WSASOS",
        }
    }

    /// Uses the first-order expansion `G`.
    pub fn needs_stm(self) -> bool {
        matches!(
            self,
            HeuristicKind::Fos
                | HeuristicKind::Usfos
                | HeuristicKind::Safos
                | HeuristicKind::Sadl
                | HeuristicKind::WussadlS
                | HeuristicKind::WussadlD
        )
    }

    /// Uses the second-order tensor `G2`.
    pub fn needs_stt(self) -> bool {
        matches!(
            self,
            HeuristicKind::Sos
                | HeuristicKind::Solc
                | HeuristicKind::Ussolc
                | HeuristicKind::Sasos
                | HeuristicKind::Wussos
                | HeuristicKind::Wussolc
                | HeuristicKind::Wsasos
        )
    }

    pub fn needs_whitening(self) -> bool {
        matches!(
            self,
            HeuristicKind::Wussos
                | HeuristicKind::Wussolc
                | HeuristicKind::WussadlS
                | HeuristicKind::WussadlD
                | HeuristicKind::Wsasos
        )
    }

    /// Needs an unscented-transform statistical linearization.
    pub fn needs_statistical(self) -> bool {
        matches!(
            self,
            HeuristicKind::Sadl | HeuristicKind::WussadlS | HeuristicKind::WussadlD
        )
    }

    /// Whether the whitening matrix comes from the unscented output covariance
    /// rather than the linearly mapped one.
    pub fn whitening_from_unscented(self) -> bool {
        self == HeuristicKind::WussadlS
    }

    /// Constraint `δᵀP⁻¹δ = 1` rather than `‖δ‖₂ = 1`.
    pub fn uncertainty_scaled(self) -> bool {
        matches!(
            self,
            HeuristicKind::Maxvar
                | HeuristicKind::Usfos
                | HeuristicKind::Ussolc
                | HeuristicKind::Wussos
                | HeuristicKind::Wussolc
                | HeuristicKind::WussadlS
                | HeuristicKind::WussadlD
        )
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeuristicKind {
    type Err = HeuristicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        HeuristicKind::ALL
            .into_iter()
            .find(|k| k.name() == up)
            .ok_or_else(|| HeuristicError::UnknownKind(s.to_string()))
    }
}

/// Heuristic choice plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicSpec {
    pub kind: HeuristicKind,
    pub ut_alpha: f64,
    pub ut_beta: f64,
    pub ut_kappa: f64,
    pub power_iteration: PowerIterationOptions,
}

impl HeuristicSpec {
    pub fn new(kind: HeuristicKind) -> Self {
        Self {
            kind,
            ut_alpha: 0.5,
            ut_beta: 2.0,
            ut_kappa: 0.0,
            power_iteration: PowerIterationOptions {
                max_iter: 5000,
                ..PowerIterationOptions::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), HeuristicError> {
        if !(self.ut_alpha > 0.0 && self.ut_alpha.is_finite()) {
            return Err(HeuristicError::InvalidParameter(format!(
                "ut_alpha must be positive, got {}",
                self.ut_alpha
            )));
        }
        if !self.ut_beta.is_finite() || !self.ut_kappa.is_finite() {
            return Err(HeuristicError::InvalidParameter(
                "ut_beta and ut_kappa must be finite".into(),
            ));
        }
        if self.power_iteration.max_iter == 0 || !(self.power_iteration.tol > 0.0) {
            return Err(HeuristicError::InvalidParameter(
                "power iteration needs a positive tolerance and iteration budget".into(),
            ));
        }
        Ok(())
    }
}

/// Scaled sigma points for the unscented transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

/// `2n + 1` sigma points `m`, `m ± √(n+λ) Lₖ` with `λ = α²(n+κ) − n`.
pub fn sigma_points(
    spec: &HeuristicSpec,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<SigmaPoints, HeuristicError> {
    spec.validate()?;
    let n = m.len();
    if p.nrows() != n || p.ncols() != n {
        return Err(HeuristicError::Dimension {
            expected: n,
            got: p.nrows(),
        });
    }
    let nf = n as f64;
    let lambda = spec.ut_alpha.powi(2) * (nf + spec.ut_kappa) - nf;
    let scale = nf + lambda;
    if !(scale > 0.0) {
        return Err(HeuristicError::InvalidParameter(format!(
            "sigma point spread n + λ = {scale} must be positive"
        )));
    }
    let l = cholesky_lower(p)? * scale.sqrt();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(m.clone());
    for k in 0..n {
        points.push(m + l.column(k));
    }
    for k in 0..n {
        points.push(m - l.column(k));
    }
    let wi = 1.0 / (2.0 * scale);
    let w0 = lambda / scale;
    let mut mean_weights = vec![wi; 2 * n + 1];
    mean_weights[0] = w0;
    let mut cov_weights = mean_weights.clone();
    cov_weights[0] = w0 + 1.0 - spec.ut_alpha.powi(2) + spec.ut_beta;
    Ok(SigmaPoints {
        points,
        mean_weights,
        cov_weights,
    })
}

/// Affine least-squares fit `z ≈ G_SL x + b` from the unscented transform.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticalLinearization {
    pub g_sl: DMatrix<f64>,
    pub b: DVector<f64>,
    pub m_z: DVector<f64>,
    pub p_xz: DMatrix<f64>,
    pub p_z: DMatrix<f64>,
}

/// Statistical linearization from already mapped sigma points.
pub fn statistical_linearization_from_images(
    sp: &SigmaPoints,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    images: &[DVector<f64>],
) -> Result<StatisticalLinearization, HeuristicError> {
    if images.len() != sp.points.len() {
        return Err(HeuristicError::Dimension {
            expected: sp.points.len(),
            got: images.len(),
        });
    }
    let nz = images[0].len();
    let n = m.len();
    let mut m_z = DVector::zeros(nz);
    for (w, z) in sp.mean_weights.iter().zip(images) {
        if z.len() != nz {
            return Err(HeuristicError::Dimension {
                expected: nz,
                got: z.len(),
            });
        }
        m_z += z * *w;
    }
    let mut p_xz = DMatrix::zeros(n, nz);
    let mut p_z = DMatrix::zeros(nz, nz);
    for ((w, x), z) in sp.cov_weights.iter().zip(&sp.points).zip(images) {
        let dx = x - m;
        let dz = z - &m_z;
        p_xz += &dx * dz.transpose() * *w;
        p_z += &dz * dz.transpose() * *w;
    }
    let p_z = symmetrize(&p_z);
    let lu = p.clone().lu();
    let g_sl = lu
        .solve(&p_xz)
        .ok_or(HeuristicError::Tensor(TensorError::Singular))?
        .transpose();
    let b = &m_z - &g_sl * m;
    Ok(StatisticalLinearization {
        g_sl,
        b,
        m_z,
        p_xz,
        p_z,
    })
}

/// Unscented-transform statistical linearization of `map` about `(m, P)`.
pub fn statistical_linearization<F>(
    mut map: F,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    spec: &HeuristicSpec,
) -> Result<StatisticalLinearization, HeuristicError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, String>,
{
    let sp = sigma_points(spec, m, p)?;
    let images = sp
        .points
        .iter()
        .enumerate()
        .map(|(index, x)| map(x).map_err(|message| HeuristicError::SigmaPoint { index, message }))
        .collect::<Result<Vec<_>, _>>()?;
    statistical_linearization_from_images(&sp, m, p, &images)
}

/// Whitening for a parent and all its descendants: the inverse Cholesky
/// factor of `Φ P0 Φᵀ`.
pub fn whitening_from_parent(
    p0: &DMatrix<f64>,
    phi: &DMatrix<f64>,
) -> Result<DMatrix<f64>, HeuristicError> {
    Ok(whitening_factor(&symmetrize(&(phi * p0 * phi.transpose())))?)
}

/// Inputs to a direction search. `mixand.cov` is the input covariance `P_x`.
#[derive(Debug, Clone, Copy)]
pub struct SplitContext<'a> {
    pub mixand: &'a Mixand,
    pub g: Option<&'a DMatrix<f64>>,
    pub g2: Option<&'a Tensor3>,
    pub w: Option<&'a DMatrix<f64>>,
    pub statistical: Option<&'a StatisticalLinearization>,
}

impl<'a> SplitContext<'a> {
    pub fn new(mixand: &'a Mixand) -> Self {
        Self {
            mixand,
            g: None,
            g2: None,
            w: None,
            statistical: None,
        }
    }

    pub fn with_stm(mut self, g: &'a DMatrix<f64>) -> Self {
        self.g = Some(g);
        self
    }

    pub fn with_stt(mut self, g2: &'a Tensor3) -> Self {
        self.g2 = Some(g2);
        self
    }

    pub fn with_whitening(mut self, w: &'a DMatrix<f64>) -> Self {
        self.w = Some(w);
        self
    }

    pub fn with_statistical(mut self, s: &'a StatisticalLinearization) -> Self {
        self.statistical = Some(s);
        self
    }
}

/// Result of a direction search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDirection {
    /// 2-normalized maximizer with canonical sign.
    pub direction: DVector<f64>,
    /// Maximizer scaled to satisfy the heuristic's constraint.
    pub constrained: DVector<f64>,
    /// Unsquared objective value at the maximizer.
    pub value: f64,
    /// The top eigen- or singular value was (nearly) repeated.
    pub tie: bool,
}

struct Ingredients<'a> {
    kind: HeuristicKind,
    n: usize,
    p: &'a DMatrix<f64>,
    ctx: &'a SplitContext<'a>,
}

impl<'a> Ingredients<'a> {
    fn new(kind: HeuristicKind, ctx: &'a SplitContext<'a>) -> Result<Self, HeuristicError> {
        let n = ctx.mixand.dim();
        let ing = Self {
            kind,
            n,
            p: &ctx.mixand.cov,
            ctx,
        };
        if kind.needs_stm() {
            ing.stm()?;
        }
        if kind.needs_stt() {
            ing.stt()?;
        }
        if kind.needs_whitening() {
            ing.whitening()?;
        }
        if kind.needs_statistical() {
            ing.statistical()?;
        }
        Ok(ing)
    }

    fn stm(&self) -> Result<&'a DMatrix<f64>, HeuristicError> {
        let g = self.ctx.g.ok_or(HeuristicError::Missing {
            kind: self.kind,
            missing: "state transition matrix",
        })?;
        if g.ncols() != self.n {
            return Err(HeuristicError::Dimension {
                expected: self.n,
                got: g.ncols(),
            });
        }
        Ok(g)
    }

    fn stt(&self) -> Result<&'a Tensor3, HeuristicError> {
        let g2 = self.ctx.g2.ok_or(HeuristicError::Missing {
            kind: self.kind,
            missing: "state transition tensor",
        })?;
        if g2.dim() != self.n {
            return Err(HeuristicError::Dimension {
                expected: self.n,
                got: g2.dim(),
            });
        }
        Ok(g2)
    }

    fn whitening(&self) -> Result<&'a DMatrix<f64>, HeuristicError> {
        let w = self.ctx.w.ok_or(HeuristicError::Missing {
            kind: self.kind,
            missing: "whitening matrix",
        })?;
        if w.ncols() != self.n {
            return Err(HeuristicError::Dimension {
                expected: self.n,
                got: w.ncols(),
            });
        }
        Ok(w)
    }

    fn statistical(&self) -> Result<&'a StatisticalLinearization, HeuristicError> {
        self.ctx.statistical.ok_or(HeuristicError::Missing {
            kind: self.kind,
            missing: "statistical linearization",
        })
    }

    fn chol(&self) -> Result<DMatrix<f64>, HeuristicError> {
        Ok(cholesky_lower(self.p)?)
    }

    fn linearization_gap(&self) -> Result<DMatrix<f64>, HeuristicError> {
        let s = self.statistical()?;
        let g = self.stm()?;
        if s.g_sl.shape() != g.shape() {
            return Err(HeuristicError::Dimension {
                expected: g.nrows(),
                got: s.g_sl.nrows(),
            });
        }
        Ok(&s.g_sl - g)
    }

    /// Output-whitened STT slices `Σ_i W_ai G2^i`.
    fn whitened_slices(&self) -> Result<Vec<DMatrix<f64>>, HeuristicError> {
        let g2 = self.stt()?;
        let w = self.whitening()?;
        let n = self.n;
        let slices: Vec<DMatrix<f64>> = (0..n).map(|i| g2.slice(i)).collect();
        Ok((0..w.nrows())
            .map(|a| {
                let mut h = DMatrix::zeros(n, n);
                for (i, s) in slices.iter().enumerate() {
                    h += s * w[(a, i)];
                }
                h
            })
            .collect())
    }

    fn slices(&self) -> Result<Vec<DMatrix<f64>>, HeuristicError> {
        let g2 = self.stt()?;
        Ok((0..self.n).map(|i| g2.slice(i)).collect())
    }
}

/// `Σ_a T^a ⊗ T^a`, fully symmetrized, so that `S x⁴ = Σ_a (xᵀT^a x)²`.
fn quartic_from_slices(n: usize, slices: &[DMatrix<f64>]) -> Result<FullySymTensor, TensorError> {
    let mut data = vec![0.0; n * n * n * n];
    for t in slices {
        for j in 0..n {
            for k in 0..n {
                let tjk = t[(j, k)];
                if tjk == 0.0 {
                    continue;
                }
                for l in 0..n {
                    for m in 0..n {
                        data[((j * n + k) * n + l) * n + m] += tjk * t[(l, m)];
                    }
                }
            }
        }
    }
    FullySymTensor::symmetrize(4, n, data)
}

/// `∫ s sᵀ (sᵀA s) dφ(s)` over the unit sphere with normalized measure.
fn sphere_moment_quadratic(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let nf = n as f64;
    let a = symmetrize(a);
    (DMatrix::identity(n, n) * a.trace() + a * 2.0) / (nf * (nf + 2.0))
}

/// `∫ s sᵀ Σ_i (sᵀT^i s)² dφ(s)` over the unit sphere with normalized measure.
fn sphere_moment_quartic(slices: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    let mut m = DMatrix::zeros(n, n);
    for t in slices {
        let t = symmetrize(t);
        let tr = t.trace();
        let t2 = &t * &t;
        let tr2 = t2.trace();
        m += DMatrix::identity(n, n) * (tr * tr + 2.0 * tr2) + &t * (4.0 * tr) + t2 * 8.0;
    }
    m / (nf * (nf + 2.0) * (nf + 4.0))
}

/// Maximizes `Σ_a (sᵀT^a s)²` over the unit sphere. Besides the default
/// starts, the power iteration is seeded with the extreme eigenvectors of each
/// slice and of the Gram sum, which sit in the basins of the large maxima.
fn maximize_quartic(
    n: usize,
    slices: &[DMatrix<f64>],
    opts: &PowerIterationOptions,
) -> Result<(DVector<f64>, f64), HeuristicError> {
    let s = quartic_from_slices(n, slices)?;
    let mut starts = Vec::new();
    let gram = slices
        .iter()
        .fold(DMatrix::zeros(n, n), |acc, t| acc + t.transpose() * t);
    starts.push(sym_eigen_desc(&gram).1.column(0).into_owned());
    for t in slices {
        let (vals, vecs, _) = sym_eigen_desc(t);
        if vals[0].abs() > 0.0 || vals[n - 1].abs() > 0.0 {
            let k = if vals[0].abs() >= vals[n - 1].abs() { 0 } else { n - 1 };
            starts.push(vecs.column(k).into_owned());
        }
    }
    let pair = maximize_form_with_starts(&s, opts, &starts)?;
    Ok((pair.vector, sqrt_nonneg(pair.value)))
}

fn sqrt_nonneg(x: f64) -> f64 {
    x.max(0.0).sqrt()
}

fn finish(
    constrained: DVector<f64>,
    value: f64,
    tie: bool,
) -> Result<SplitDirection, HeuristicError> {
    let norm = constrained.norm();
    if !(norm > 0.0) || !norm.is_finite() || !value.is_finite() {
        return Err(HeuristicError::Tensor(TensorError::Singular));
    }
    let mut direction = &constrained / norm;
    let mut constrained = constrained;
    let before = direction.clone();
    crate::tensorlab::canonical_sign(&mut direction);
    if direction != before {
        constrained.neg_mut();
    }
    Ok(SplitDirection {
        direction,
        constrained,
        value,
        tie,
    })
}

/// Maximizes the heuristic's objective under its constraint and returns the
/// 2-normalized maximizer and the unsquared objective value.
pub fn split_direction(
    spec: &HeuristicSpec,
    ctx: &SplitContext<'_>,
) -> Result<SplitDirection, HeuristicError> {
    spec.validate()?;
    let ing = Ingredients::new(spec.kind, ctx)?;
    let n = ing.n;
    match spec.kind {
        HeuristicKind::Maxvar => {
            let (vals, vecs, tie) = sym_eigen_desc(ing.p);
            let lam = vals[0].max(0.0);
            finish(vecs.column(0) * lam.sqrt(), lam.sqrt(), tie)
        }
        HeuristicKind::Fos => {
            let (sigma, v, tie) = top_right_singular(ing.stm()?);
            finish(v, sigma, tie)
        }
        HeuristicKind::Sadl => {
            let (sigma, v, tie) = top_right_singular(&ing.linearization_gap()?);
            finish(v, sigma, tie)
        }
        HeuristicKind::Usfos => {
            let l = ing.chol()?;
            let (sigma, v, tie) = top_right_singular(&(ing.stm()? * &l));
            finish(l * v, sigma, tie)
        }
        HeuristicKind::WussadlS | HeuristicKind::WussadlD => {
            let l = ing.chol()?;
            let m = ing.whitening()? * ing.linearization_gap()? * &l;
            let (sigma, v, tie) = top_right_singular(&m);
            finish(l * v, sigma, tie)
        }
        HeuristicKind::Solc => {
            let q = ing
                .slices()?
                .iter()
                .fold(DMatrix::zeros(n, n), |acc, s| acc + s.transpose() * s);
            let (vals, vecs, tie) = sym_eigen_desc(&q);
            finish(vecs.column(0).into_owned(), sqrt_nonneg(vals[0]), tie)
        }
        HeuristicKind::Ussolc => {
            let l = ing.chol()?;
            let q = ing.slices()?.iter().fold(DMatrix::zeros(n, n), |acc, s| {
                let t = s * &l;
                acc + t.transpose() * t
            });
            let (vals, vecs, tie) = sym_eigen_desc(&q);
            finish(&l * vecs.column(0), sqrt_nonneg(vals[0]), tie)
        }
        HeuristicKind::Wussolc => {
            let l = ing.chol()?;
            let q = ing.whitened_slices()?.iter().fold(DMatrix::zeros(n, n), |acc, h| {
                let t = l.transpose() * h * &l;
                acc + t.transpose() * t
            });
            let (vals, vecs, tie) = sym_eigen_desc(&q);
            finish(&l * vecs.column(0), sqrt_nonneg(vals[0]), tie)
        }
        HeuristicKind::Sos => {
            let (v, value) = maximize_quartic(n, &ing.slices()?, &spec.power_iteration)?;
            finish(v, value, false)
        }
        HeuristicKind::Wussos => {
            let l = ing.chol()?;
            let t: Vec<DMatrix<f64>> = ing
                .whitened_slices()?
                .iter()
                .map(|h| l.transpose() * h * &l)
                .collect();
            let (v, value) = maximize_quartic(n, &t, &spec.power_iteration)?;
            finish(l * v, value, false)
        }
        HeuristicKind::Safos | HeuristicKind::Sasos | HeuristicKind::Wsasos => {
            let m = sphere_average_matrix(spec.kind, ctx)?;
            let (vals, vecs, tie) = sym_eigen_desc(&m);
            finish(vecs.column(0).into_owned(), sqrt_nonneg(vals[0]), tie)
        }
    }
}

/// Matrix `M` with `δᵀMδ` equal to the sphere-averaged objective of the
/// SAFOS, SASOS, and WSASOS kinds: `u = L s` ranges over the `P_x`
/// ellipsoid while `s` is uniform on the unit sphere.
pub fn sphere_average_matrix(
    kind: HeuristicKind,
    ctx: &SplitContext<'_>,
) -> Result<DMatrix<f64>, HeuristicError> {
    let ing = Ingredients::new(kind, ctx)?;
    let n = ing.n;
    let l = ing.chol()?;
    let inner = match kind {
        HeuristicKind::Safos => {
            let gl = ing.stm()? * &l;
            sphere_moment_quadratic(&(gl.transpose() * gl))
        }
        HeuristicKind::Sasos => {
            let t: Vec<DMatrix<f64>> =
                ing.slices()?.iter().map(|s| l.transpose() * s * &l).collect();
            sphere_moment_quartic(&t, n)
        }
        HeuristicKind::Wsasos => {
            let t: Vec<DMatrix<f64>> = ing
                .whitened_slices()?
                .iter()
                .map(|h| l.transpose() * h * &l)
                .collect();
            sphere_moment_quartic(&t, n)
        }
        other => {
            return Err(HeuristicError::InvalidParameter(format!(
                "{other} is not a sphere-averaged heuristic"
            )))
        }
    };
    Ok(symmetrize(&(&l * inner * l.transpose())))
}

/// Objective value (unsquared) for an arbitrary nonzero direction, after
/// scaling it onto the heuristic's constraint surface. Evaluated directly
/// from the definitions rather than through the eigen reductions.
pub fn evaluate_objective(
    spec: &HeuristicSpec,
    ctx: &SplitContext<'_>,
    direction: &DVector<f64>,
) -> Result<f64, HeuristicError> {
    let ing = Ingredients::new(spec.kind, ctx)?;
    if direction.len() != ing.n {
        return Err(HeuristicError::Dimension {
            expected: ing.n,
            got: direction.len(),
        });
    }
    let delta = if spec.kind.uncertainty_scaled() {
        let lu = ing.p.clone().lu();
        let y = lu
            .solve(direction)
            .ok_or(HeuristicError::Tensor(TensorError::Singular))?;
        direction / direction.dot(&y).sqrt()
    } else {
        direction.normalize()
    };
    let second = |g2: &Tensor3| g2.contract_pair(&delta);
    let value = match spec.kind {
        HeuristicKind::Maxvar => delta.norm(),
        HeuristicKind::Fos | HeuristicKind::Usfos => (ing.stm()? * &delta).norm(),
        HeuristicKind::Sadl => (ing.linearization_gap()? * &delta).norm(),
        HeuristicKind::WussadlS | HeuristicKind::WussadlD => {
            (ing.whitening()? * ing.linearization_gap()? * &delta).norm()
        }
        HeuristicKind::Sos => second(ing.stt()?)?.norm(),
        HeuristicKind::Wussos => (ing.whitening()? * second(ing.stt()?)?).norm(),
        HeuristicKind::Solc | HeuristicKind::Ussolc => ing.stt()?.contract_last(&delta)?.norm(),
        HeuristicKind::Wussolc => {
            let l = ing.chol()?;
            (ing.whitening()? * ing.stt()?.contract_last(&delta)? * l).norm()
        }
        HeuristicKind::Safos | HeuristicKind::Sasos | HeuristicKind::Wsasos => {
            let m = sphere_average_matrix(spec.kind, ctx)?;
            sqrt_nonneg(delta.dot(&(m * &delta)))
        }
    };
    Ok(value)
}
