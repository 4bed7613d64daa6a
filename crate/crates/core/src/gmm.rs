//! Gaussian mixtures, the univariate split library, and the moment-matched
//! multivariate split.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::propagation::{check_spd, symmetrize, Lineage, Mixand, PropagationError};
use crate::tensorlab::{cholesky_lower, lower_triangular_inverse, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GmmError {
    #[error("split libraries are limited to odd component counts, got {0}")]
    EvenComponentCount(usize),
    #[error("regularization weight must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("library optimizer did not converge (objective spread {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("mixture weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("split direction must be a unit vector (norm {0})")]
    NotUnit(f64),
    #[error("invalid library file: {0}")]
    Library(String),
    #[error("empty mixture")]
    Empty,
}

impl From<PropagationError> for GmmError {
    fn from(e: PropagationError) -> Self {
        GmmError::NotPositiveDefinite(e.to_string())
    }
}

impl From<TensorError> for GmmError {
    fn from(e: TensorError) -> Self {
        GmmError::NotPositiveDefinite(e.to_string())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf_1d(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Multivariate normal density.
pub fn gaussian_pdf(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64, GmmError> {
    let n = mean.len();
    if x.len() != n {
        return Err(GmmError::Dimension {
            expected: n,
            got: x.len(),
        });
    }
    let l = cholesky_lower(cov)?;
    let z = lower_triangular_inverse(&l) * (x - mean);
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let log_p = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared());
    Ok(log_p.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub mixands: Vec<Mixand>,
}

impl GaussianMixture {
    /// Validates weights (sum to one within 1e-12) and covariances.
    pub fn new(mixands: Vec<Mixand>) -> Result<Self, GmmError> {
        if mixands.is_empty() {
            return Err(GmmError::Empty);
        }
        let n = mixands[0].dim();
        for m in &mixands {
            if m.dim() != n {
                return Err(GmmError::Dimension {
                    expected: n,
                    got: m.dim(),
                });
            }
            check_spd(&m.cov)?;
        }
        let total: f64 = mixands.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(GmmError::WeightSum(total));
        }
        Ok(Self { mixands })
    }

    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GmmError> {
        Self::new(vec![Mixand::new(1.0, mean, cov, Lineage::root())?])
    }

    pub fn dim(&self) -> usize {
        self.mixands[0].dim()
    }

    pub fn len(&self) -> usize {
        self.mixands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixands.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.mixands.iter().map(|m| m.weight).sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.dim());
        for m in &self.mixands {
            mu += &m.mean * m.weight;
        }
        mu
    }

    /// Overall covariance by exact moment recombination.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let n = self.dim();
        let mut p = DMatrix::zeros(n, n);
        for m in &self.mixands {
            let d = &m.mean - &mu;
            p += (&m.cov + &d * d.transpose()) * m.weight;
        }
        symmetrize(&p)
    }

    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64, GmmError> {
        let mut s = 0.0;
        for m in &self.mixands {
            s += m.weight * gaussian_pdf(x, &m.mean, &m.cov)?;
        }
        Ok(s)
    }

    /// Marginal CDF along one state axis.
    pub fn marginal_cdf(&self, axis: usize, v: f64) -> f64 {
        self.mixands
            .iter()
            .map(|m| m.weight * normal_cdf((v - m.mean[axis]) / m.cov[(axis, axis)].sqrt()))
            .sum()
    }

    /// Marginal density along one state axis.
    pub fn marginal_pdf(&self, axis: usize, v: f64) -> f64 {
        self.mixands
            .iter()
            .map(|m| m.weight * normal_pdf_1d(v, m.mean[axis], m.cov[(axis, axis)]))
            .sum()
    }

    /// Two-dimensional marginal density on the axis pair `(a, b)`.
    pub fn marginal_pdf_2d(&self, a: usize, b: usize, x: f64, y: f64) -> Result<f64, GmmError> {
        let mut s = 0.0;
        for m in &self.mixands {
            let mean = DVector::from_vec(vec![m.mean[a], m.mean[b]]);
            let cov = DMatrix::from_row_slice(
                2,
                2,
                &[m.cov[(a, a)], m.cov[(a, b)], m.cov[(b, a)], m.cov[(b, b)]],
            );
            s += m.weight * gaussian_pdf(&DVector::from_vec(vec![x, y]), &mean, &cov)?;
        }
        Ok(s)
    }
}

/// Univariate split of the standard normal into `L_s` weighted Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLibraryEntry {
    #[serde(rename = "L_s")]
    pub l_s: usize,
    pub lambda: f64,
    /// `[weight, mean, sigma]`, ascending by mean.
    pub triples: Vec<[f64; 3]>,
}

const DEFAULT_LIBRARY_JSON: &str = include_str!("../data/split_library_3_1e-4.json");

impl SplitLibraryEntry {
    pub fn from_json(s: &str) -> Result<Self, GmmError> {
        let e: Self = serde_json::from_str(s).map_err(|e| GmmError::Library(e.to_string()))?;
        e.validate(1e-10)?;
        Ok(e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("library entries always serialize")
    }

    /// The shipped `(L_s = 3, λ = 1e-4)` entry.
    pub fn default_entry() -> Self {
        Self::from_json(DEFAULT_LIBRARY_JSON).expect("shipped library is valid")
    }

    /// Returns the shipped entry when the key matches, otherwise generates one.
    pub fn load(l_s: usize, lambda: f64) -> Result<Self, GmmError> {
        let d = Self::default_entry();
        if d.l_s == l_s && d.lambda == lambda {
            Ok(d)
        } else {
            generate_split_library(l_s, lambda)
        }
    }

    pub fn key(&self) -> String {
        format!("L_s={},lambda={:e}", self.l_s, self.lambda)
    }

    /// Checks unit mass, zero mean, unit variance, symmetry and ordering.
    pub fn validate(&self, tol: f64) -> Result<(), GmmError> {
        let bad = |msg: String| Err(GmmError::Library(msg));
        if self.triples.len() != self.l_s || self.l_s == 0 {
            return bad(format!("{} triples for L_s = {}", self.triples.len(), self.l_s));
        }
        let w: f64 = self.triples.iter().map(|t| t[0]).sum();
        let m: f64 = self.triples.iter().map(|t| t[0] * t[1]).sum();
        let v: f64 = self.triples.iter().map(|t| t[0] * (t[2] * t[2] + t[1] * t[1])).sum();
        if (w - 1.0).abs() > tol || m.abs() > tol || (v - 1.0).abs() > tol {
            return bad(format!("moments (mass {w}, mean {m}, variance {v})"));
        }
        let k = self.triples.len();
        for i in 0..k {
            let (a, b) = (self.triples[i], self.triples[k - 1 - i]);
            if (a[0] - b[0]).abs() > tol || (a[1] + b[1]).abs() > tol || (a[2] - b[2]).abs() > tol {
                return bad("entry is not symmetric".into());
            }
            if a[0] <= 0.0 || a[2] <= 0.0 {
                return bad("non-positive weight or sigma".into());
            }
        }
        if self.triples.windows(2).any(|w| w[1][1] <= w[0][1]) {
            return bad("means are not strictly ascending".into());
        }
        Ok(())
    }

    /// Index of the zero-mean component.
    pub fn central_index(&self) -> usize {
        self.l_s / 2
    }
}

fn gauss_overlap(ma: f64, mb: f64, var: f64) -> f64 {
    normal_pdf_1d(ma, mb, var)
}

/// Library parameters: spacing `Δ`, weights for offsets `0..=K` (symmetric), common sigma².
struct LibraryShape {
    delta: f64,
    weights: Vec<f64>,
    sigma2: f64,
}

fn shape_from_params(k: usize, params: &[f64]) -> Option<LibraryShape> {
    let delta = params[0].exp();
    let mut raw = vec![1.0];
    raw.extend(params[1..=k].iter().map(|v| v.exp()));
    let total: f64 = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let spread: f64 = (1..=k).map(|j| 2.0 * weights[j] * (j as f64 * delta).powi(2)).sum();
    let sigma2 = 1.0 - spread;
    if !(sigma2 > 0.0) || !delta.is_finite() {
        return None;
    }
    Some(LibraryShape {
        delta,
        weights,
        sigma2,
    })
}

fn expand(shape: &LibraryShape, k: usize) -> Vec<(f64, f64)> {
    (0..2 * k + 1)
        .map(|i| {
            let off = i as isize - k as isize;
            (shape.weights[off.unsigned_abs()], off as f64 * shape.delta)
        })
        .collect()
}

/// L2 distance to the standard normal plus `λ σ²`, for homoscedastic components.
pub fn library_objective(components: &[(f64, f64)], sigma2: f64, lambda: f64) -> f64 {
    let qq = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
    let qp: f64 = components
        .iter()
        .map(|(w, m)| w * gauss_overlap(*m, 0.0, 1.0 + sigma2))
        .sum();
    let mut pp = 0.0;
    for (wa, ma) in components {
        for (wb, mb) in components {
            pp += wa * wb * gauss_overlap(*ma, *mb, 2.0 * sigma2);
        }
    }
    qq - 2.0 * qp + pp + lambda * sigma2
}

/// Deterministic Nelder–Mead minimizer.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iter: usize,
    xtol: f64,
    ftol: f64,
) -> (Vec<f64>, f64, bool) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut p = x0.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let fspread = (vals[d] - vals[0]).abs();
        let xspread = simplex[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if xspread <= xtol && fspread <= ftol {
            return (simplex[0].clone(), vals[0], true);
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|p| p[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    let p: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(x, b)| b + 0.5 * (x - b))
                        .collect();
                    vals[i] = f(&p);
                    simplex[i] = p;
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best].clone(), vals[best], false)
}

/// Optimizes the symmetric, equally spaced, homoscedastic split of the
/// standard normal into `l_s` components under exact mean/variance matching.
pub fn generate_split_library(l_s: usize, lambda: f64) -> Result<SplitLibraryEntry, GmmError> {
    if l_s.is_multiple_of(2) {
        return Err(GmmError::EvenComponentCount(l_s));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(GmmError::InvalidLambda(lambda));
    }
    if l_s == 1 {
        return Ok(SplitLibraryEntry {
            l_s,
            lambda,
            triples: vec![[1.0, 0.0, 1.0]],
        });
    }
    let k = l_s / 2;
    let objective = |p: &[f64]| match shape_from_params(k, p) {
        Some(s) => library_objective(&expand(&s, k), s.sigma2, lambda),
        None => f64::INFINITY,
    };
    // Start from a moderate, feasible split and restart from the best point
    // until the simplex stops moving.
    let mut x: Vec<f64> = vec![(1.0 / k as f64).ln()];
    x.extend((1..=k).map(|_| (0.25f64).ln()));
    let mut best = f64::INFINITY;
    let mut converged = false;
    for _ in 0..20 {
        let (xn, fx, ok) = nelder_mead(&objective, &x, 0.25, 20_000, 1e-12, 1e-18);
        let improved = fx < best - 1e-17;
        x = xn;
        best = best.min(fx);
        if ok && !improved {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GmmError::NoConvergence { residual: best });
    }
    let shape = shape_from_params(k, &x).ok_or(GmmError::NoConvergence { residual: best })?;
    let sigma = shape.sigma2.sqrt();
    let triples = expand(&shape, k)
        .into_iter()
        .map(|(w, m)| [w, m, sigma])
        .collect();
    let entry = SplitLibraryEntry {
        l_s,
        lambda,
        triples,
    };
    entry.validate(1e-10)?;
    Ok(entry)
}

/// Splits `mix` along unit `direction` using `lib`.
///
/// Child means sit at `m + m̃_i v` with `v = δ̂ / √(δ̂ᵀP⁻¹δ̂)`, i.e. at
/// Mahalanobis offsets `m̃_i` along the direction. All children share the
/// covariance `P − (Σ w̃_j m̃_j²) v vᵀ`, so the mixture keeps the parent mean
/// and covariance.
pub fn split_multivariate(
    mix: &Mixand,
    direction: &DVector<f64>,
    lib: &SplitLibraryEntry,
) -> Result<Vec<Mixand>, GmmError> {
    let n = mix.dim();
    if direction.len() != n {
        return Err(GmmError::Dimension {
            expected: n,
            got: direction.len(),
        });
    }
    let norm = direction.norm();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(GmmError::NotUnit(norm));
    }
    if lib.l_s == 1 {
        return Ok(vec![Mixand {
            lineage: mix.lineage.child(0),
            ..mix.clone()
        }]);
    }
    let l = cholesky_lower(&mix.cov)?;
    let y = lower_triangular_inverse(&l) * direction;
    let quad = y.norm_squared();
    let v = direction / quad.sqrt();
    let spread: f64 = lib.triples.iter().map(|t| t[0] * t[1] * t[1]).sum();
    let shared = symmetrize(&(&mix.cov - &v * v.transpose() * spread));
    let mut children = Vec::with_capacity(lib.l_s);
    for (i, t) in lib.triples.iter().enumerate() {
        let mean = if t[1] == 0.0 {
            mix.mean.clone()
        } else {
            &mix.mean + &v * t[1]
        };
        let child = Mixand::new(mix.weight * t[0], mean, shared.clone(), mix.lineage.child(i))?;
        children.push(child);
    }
    Ok(children)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose() + DMatrix::identity(n, n) * 0.2) * scale
    }

    fn random_gm(rng: &mut ChaCha8Rng, n: usize, k: usize) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let tot: f64 = raw.iter().sum();
        let mix = raw
            .iter()
            .enumerate()
            .map(|(i, w)| {
                Mixand::new(
                    w / tot,
                    DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
                    random_spd(rng, n, 1.0),
                    Lineage::root().child(i),
                )
                .unwrap()
            })
            .collect();
        GaussianMixture::new(mix).unwrap()
    }

    #[test]
    fn pdf_standard_normal_2d() {
        let gm = GaussianMixture::single(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let p = gm.pdf(&DVector::zeros(2)).unwrap();
        assert!((p - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-16);
    }

    #[test]
    fn pdf_duplicate_mixands() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = DVector::from_vec(vec![1.0, -1.0]);
        let one = GaussianMixture::single(m.clone(), p.clone()).unwrap();
        let two = GaussianMixture::new(vec![
            Mixand::new(0.5, m.clone(), p.clone(), Lineage::root()).unwrap(),
            Mixand::new(0.5, m.clone(), p.clone(), Lineage::root()).unwrap(),
        ])
        .unwrap();
        let x = DVector::from_vec(vec![0.3, 0.2]);
        assert!((one.pdf(&x).unwrap() - two.pdf(&x).unwrap()).abs() < 1e-16);
    }

    #[test]
    fn pdf_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gm = random_gm(&mut rng, 3, 3);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let mut naive = 0.0;
            for m in &gm.mixands {
                let inv = m.cov.clone().try_inverse().unwrap();
                let d = &x - &m.mean;
                let q = (d.transpose() * inv * &d)[0];
                naive += m.weight * (-0.5 * q).exp()
                    / ((2.0 * std::f64::consts::PI).powi(3) * m.cov.determinant()).sqrt();
            }
            let p = gm.pdf(&x).unwrap();
            assert!((p - naive).abs() <= 1e-14 * naive.max(1e-300) + 1e-300, "{p} vs {naive}");
        }
    }

    #[test]
    fn marginal_cdf_limits_and_derivative() {
        let gm = GaussianMixture::single(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(gm.marginal_cdf(0, 0.0), 0.5);
        assert_eq!(gm.marginal_cdf(0, f64::INFINITY), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gm = random_gm(&mut rng, 2, 3);
        // Composite Simpson integration of the marginal pdf from far left.
        for &v in &[-1.0, 0.0, 0.7, 2.0] {
            let a = -40.0;
            let steps = 20_000;
            let h = (v - a) / steps as f64;
            let mut s = gm.marginal_pdf(1, a) + gm.marginal_pdf(1, v);
            for i in 1..steps {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * gm.marginal_pdf(1, a + i as f64 * h);
            }
            let quad = s * h / 3.0;
            assert!((quad - gm.marginal_cdf(1, v)).abs() < 1e-6);
        }
    }

    #[test]
    fn library_trivial_and_errors() {
        let e = generate_split_library(1, 0.3).unwrap();
        assert_eq!(e.triples, vec![[1.0, 0.0, 1.0]]);
        assert!(matches!(generate_split_library(2, 1e-4), Err(GmmError::EvenComponentCount(2))));
        assert!(generate_split_library(3, 0.0).is_err());
    }

    #[test]
    fn library_three_component_shape() {
        let e = generate_split_library(3, 1e-4).unwrap();
        e.validate(1e-12).unwrap();
        let [w0, m0, s0] = e.triples[0];
        let [w1, m1, s1] = e.triples[1];
        let [w2, m2, s2] = e.triples[2];
        assert_eq!(m1, 0.0);
        assert!(m0 < 0.0 && m2 > 0.0 && (m0 + m2).abs() < 1e-15);
        assert_eq!(w0, w2);
        assert!(w1 > 0.0);
        assert!(s0 < 1.0 && s0 == s1 && s1 == s2);
    }

    #[test]
    fn library_matches_grid_search() {
        let lambda = 1e-4;
        let e = generate_split_library(3, lambda).unwrap();
        let delta = e.triples[2][1];
        let sigma = e.triples[2][2];
        let eval = |d: f64, s: f64| {
            let w1 = (1.0 - s * s) / (2.0 * d * d);
            if !(w1 > 0.0 && w1 < 0.5) {
                return f64::INFINITY;
            }
            library_objective(&[(w1, -d), (1.0 - 2.0 * w1, 0.0), (w1, d)], s * s, lambda)
        };
        // Coarse-to-fine grid over (spacing, sigma) ending at step 1e-4.
        let (mut dc, mut sc): (f64, f64) = (1.5, 0.5);
        let mut half: (f64, f64) = (1.45, 0.49);
        for step in [1e-2, 1e-3, 1e-4] {
            let mut best = (f64::INFINITY, dc, sc);
            let nd = (half.0 / step).round() as i64;
            let ns = (half.1 / step).round() as i64;
            for i in -nd..=nd {
                for j in -ns..=ns {
                    let (d, s) = (dc + i as f64 * step, sc + j as f64 * step);
                    if d <= 0.0 || s <= 0.0 || s >= 1.0 {
                        continue;
                    }
                    let f = eval(d, s);
                    if f < best.0 {
                        best = (f, d, s);
                    }
                }
            }
            dc = best.1;
            sc = best.2;
            half = (10.0 * step, 10.0 * step);
        }
        assert!((delta - dc).abs() <= 2e-4, "spacing {delta} vs grid {dc}");
        assert!((sigma - sc).abs() <= 2e-4, "sigma {sigma} vs grid {sc}");
        assert!(eval(delta, sigma) <= eval(dc, sc) + 1e-15);
    }

    #[test]
    fn shipped_library_is_reproducible() {
        let shipped = SplitLibraryEntry::default_entry();
        let fresh = generate_split_library(3, 1e-4).unwrap();
        assert_eq!(shipped, fresh);
        assert_eq!(SplitLibraryEntry::from_json(&fresh.to_json()).unwrap(), fresh);
    }

    #[test]
    fn split_identity_cov() {
        let lib = SplitLibraryEntry::default_entry();
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let mix = Mixand::new(1.0, m.clone(), DMatrix::identity(2, 2), Lineage::root()).unwrap();
        let kids = split_multivariate(&mix, &DVector::from_vec(vec![1.0, 0.0]), &lib).unwrap();
        let gm = GaussianMixture::new(kids.clone()).unwrap();
        assert!((gm.mean() - &m).amax() < 1e-12);
        assert!((gm.covariance() - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert_eq!(kids[1].mean, m);
        assert_eq!(kids[0].mean[1], 2.0);
        assert!((kids[0].mean[0] - 1.0 + kids[2].mean[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn split_single_component_is_identity() {
        let lib = generate_split_library(1, 1e-4).unwrap();
        let mix = Mixand::new(0.3, DVector::zeros(2), DMatrix::identity(2, 2), Lineage::root()).unwrap();
        let kids = split_multivariate(&mix, &DVector::from_vec(vec![0.0, 1.0]), &lib).unwrap();
        assert_eq!(kids.len(), 1);
        assert_eq!(kids[0].mean, mix.mean);
        assert_eq!(kids[0].cov, mix.cov);
        assert_eq!(kids[0].weight, mix.weight);
    }

    #[test]
    fn split_reduces_variance_along_direction() {
        let lib = SplitLibraryEntry::default_entry();
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 0.25]));
        let mix = Mixand::new(1.0, DVector::zeros(3), p, Lineage::root()).unwrap();
        let kids = split_multivariate(&mix, &DVector::from_vec(vec![1.0, 0.0, 0.0]), &lib).unwrap();
        for k in &kids {
            assert!(k.cov[(0, 0)] < 9.0);
        }
    }

    #[test]
    fn split_preserves_moments_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let libs = [
            SplitLibraryEntry::default_entry(),
            generate_split_library(5, 1e-3).unwrap(),
        ];
        for trial in 0..200 {
            let n = 6;
            let scale = 10f64.powf(rng.random_range(-6.0..6.0));
            let p = random_spd(&mut rng, n, scale);
            let m = DVector::from_fn(n, |_, _| rng.random_range(-100.0..100.0) * scale.sqrt());
            let w = rng.random_range(0.01..1.0);
            let mix = Mixand::new(w, m.clone(), p.clone(), Lineage::root()).unwrap();
            let d = crate::tensorlab::random_unit_vector(&mut rng, n);
            let kids = split_multivariate(&mix, &d, &libs[trial % 2]).unwrap();
            let tw: f64 = kids.iter().map(|k| k.weight).sum();
            assert!((tw - w).abs() <= 1e-15);
            let renorm: Vec<Mixand> = kids
                .iter()
                .map(|k| Mixand {
                    weight: k.weight / w,
                    ..k.clone()
                })
                .collect();
            let gm = GaussianMixture { mixands: renorm };
            let dm = (gm.mean() - &m).norm();
            assert!(dm <= 1e-12 * (m.norm() + p.norm().sqrt()), "mean error {dm}");
            let dp = (gm.covariance() - &p).norm();
            assert!(dp <= 1e-12 * p.norm(), "cov error {}", dp / p.norm());
        }
    }

    #[test]
    fn split_rejects_bad_direction() {
        let lib = SplitLibraryEntry::default_entry();
        let mix = Mixand::new(1.0, DVector::zeros(2), DMatrix::identity(2, 2), Lineage::root()).unwrap();
        assert!(matches!(
            split_multivariate(&mix, &DVector::from_vec(vec![2.0, 0.0]), &lib),
            Err(GmmError::NotUnit(_))
        ));
    }
}
