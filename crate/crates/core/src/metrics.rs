//! Monte Carlo truth and the figures of merit comparing a mixture against it:
//! Mahalanobis distance of means (MaDEM), maximum covariance ratio (MCR) and
//! the 2-norm of per-axis Cramér–von Mises statistics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VectorField;
use crate::gmm::GaussianMixture;
use crate::integrator::IntegratorOptions;
use crate::propagation::propagate_state;
use crate::tensorlab::{cholesky_lower, generalized_sym_eig, lower_triangular_inverse};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("sample {index} failed to propagate: {message}")]
    Sample { index: usize, message: String },
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{which} covariance is not positive definite: {message}")]
    NotPositiveDefinite { which: &'static str, message: String },
    #[error("non-finite sample value at row {row}")]
    NonFinite { row: usize },
    #[error("sample file: {0}")]
    Format(String),
}

/// Propagated Monte Carlo samples at epoch `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t: f64,
    pub seed: u64,
    pub samples: Vec<DVector<f64>>,
}

impl SampleSet {
    pub fn new(t: f64, seed: u64, samples: Vec<DVector<f64>>) -> Result<Self, MetricsError> {
        if samples.len() < 2 {
            return Err(MetricsError::TooFewSamples {
                min: 2,
                got: samples.len(),
            });
        }
        let n = samples[0].len();
        for (row, s) in samples.iter().enumerate() {
            if s.len() != n {
                return Err(MetricsError::Dimension {
                    expected: n,
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(MetricsError::NonFinite { row });
            }
        }
        Ok(Self { t, seed, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.dim());
        for s in &self.samples {
            mu += s;
        }
        mu / self.len() as f64
    }

    /// Unbiased sample covariance (1/(N−1)).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let n = self.dim();
        let mut p = DMatrix::zeros(n, n);
        for s in &self.samples {
            let d = s - &mu;
            p.ger(1.0, &d, &d, 1.0);
        }
        p /= (self.len() - 1) as f64;
        (&p + p.transpose()) * 0.5
    }

    /// Writes `t,x1..xn` rows with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let fmt = |e: csv::Error| MetricsError::Format(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("x{i}")));
        w.write_record(&header).map_err(fmt)?;
        for s in &self.samples {
            let mut row = vec![self.t.to_string()];
            row.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(fmt)?;
        }
        w.flush().map_err(|e| MetricsError::Format(e.to_string()))
    }

    /// Reads a file written by [`SampleSet::write_csv`]; the seed is not stored
    /// in the CSV and is supplied by the caller.
    pub fn read_csv<R: Read>(input: R, seed: u64) -> Result<Self, MetricsError> {
        let fmt = |e: csv::Error| MetricsError::Format(e.to_string());
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(fmt)?.clone();
        if header.get(0) != Some("t") || header.len() < 2 {
            return Err(MetricsError::Format("header must start with t,x1".into()));
        }
        let mut t = None;
        let mut samples = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(fmt)?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MetricsError::Format(format!("row {row}: {e}")))?;
            match t {
                None => t = Some(vals[0]),
                Some(t0) if t0 != vals[0] => {
                    return Err(MetricsError::Format(format!(
                        "row {row}: mixed epochs {t0} and {}",
                        vals[0]
                    )))
                }
                _ => {}
            }
            samples.push(DVector::from_column_slice(&vals[1..]));
        }
        Self::new(t.unwrap_or(0.0), seed, samples)
    }
}

/// Draws `count` samples from `gm`: a categorical pick over the weights, then
/// `m + L z` with `z` standard normal. One ChaCha8 stream seeded by `seed`
/// is consumed in sample order, so the draw is independent of threading.
pub fn sample_mixture(gm: &GaussianMixture, count: usize, seed: u64) -> Result<Vec<DVector<f64>>, MetricsError> {
    let factors = gm
        .mixands
        .iter()
        .map(|m| {
            cholesky_lower(&m.cov).map_err(|e| MetricsError::NotPositiveDefinite {
                which: "mixand",
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut cumulative = Vec::with_capacity(gm.len());
    let mut acc = 0.0;
    for m in &gm.mixands {
        acc += m.weight;
        cumulative.push(acc);
    }
    let total = acc;
    let n = gm.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random::<f64>() * total;
        let k = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(gm.len() - 1);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(&gm.mixands[k].mean + &factors[k] * z);
    }
    Ok(out)
}

/// Monte Carlo truth: samples of `gm` at `t0` propagated to `tf` in parallel.
/// Propagation failures report the smallest failing sample index.
pub fn mc_truth<V: VectorField + ?Sized>(
    field: &V,
    gm: &GaussianMixture,
    count: usize,
    seed: u64,
    t0: f64,
    tf: f64,
    opts: &IntegratorOptions,
) -> Result<SampleSet, MetricsError> {
    if count < 2 {
        return Err(MetricsError::TooFewSamples { min: 2, got: count });
    }
    let initial = sample_mixture(gm, count, seed)?;
    if tf == t0 {
        return SampleSet::new(tf, seed, initial);
    }
    let propagated: Vec<Result<DVector<f64>, MetricsError>> = initial
        .par_iter()
        .enumerate()
        .map(|(index, x)| {
            propagate_state(field, x, t0, tf, opts).map_err(|e| MetricsError::Sample {
                index,
                message: e.to_string(),
            })
        })
        .collect();
    let samples = propagated.into_iter().collect::<Result<Vec<_>, _>>()?;
    SampleSet::new(tf, seed, samples)
}

/// Which covariance defines the MaDEM norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MademNorm {
    /// Overall covariance of the mixture approximation.
    #[default]
    Mixture,
    /// Sample covariance of the truth set.
    Sample,
}

fn check_dims(gm: &GaussianMixture, s: &SampleSet) -> Result<(), MetricsError> {
    if gm.dim() != s.dim() {
        return Err(MetricsError::Dimension {
            expected: gm.dim(),
            got: s.dim(),
        });
    }
    Ok(())
}

/// `‖μ_gm − μ_samples‖` in the inverse of the chosen covariance.
pub fn madem(gm: &GaussianMixture, s: &SampleSet, norm: MademNorm) -> Result<f64, MetricsError> {
    check_dims(gm, s)?;
    let (p, which) = match norm {
        MademNorm::Mixture => (gm.covariance(), "mixture"),
        MademNorm::Sample => (s.covariance(), "sample"),
    };
    let l = cholesky_lower(&p).map_err(|e| MetricsError::NotPositiveDefinite {
        which,
        message: e.to_string(),
    })?;
    let d = gm.mean() - s.mean();
    Ok((lower_triangular_inverse(&l) * d).norm())
}

/// Maximum covariance ratio between two SPD matrices: the eigenvalues of
/// `P⁻¹x = λP′⁻¹x` are those of `P′x = λPx`; returns `max(λ_max, 1/λ_min)`.
pub fn covariance_ratio(p: &DMatrix<f64>, p_prime: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let eig = generalized_sym_eig(p_prime, p).map_err(|e| MetricsError::NotPositiveDefinite {
        which: "compared",
        message: e.to_string(),
    })?;
    let max = eig.values[0];
    let min = eig.values[eig.values.len() - 1];
    Ok(max.max(1.0 / min))
}

pub fn mcr(gm: &GaussianMixture, s: &SampleSet) -> Result<f64, MetricsError> {
    check_dims(gm, s)?;
    covariance_ratio(&gm.covariance(), &s.covariance())
}

/// One-sample Cramér–von Mises statistic in order-statistic form,
/// `1/(12N) + Σ ((2i−1)/(2N) − F(x_(i)))²`.
pub fn cvm_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let gap = (2 * i + 1) as f64 / (2.0 * n) - cdf(x);
            gap * gap
        })
        .sum();
    1.0 / (12.0 * n) + sum
}

/// Per-axis CvM statistics against the mixture marginals.
pub fn cvm_per_axis(gm: &GaussianMixture, s: &SampleSet) -> Result<Vec<f64>, MetricsError> {
    check_dims(gm, s)?;
    Ok((0..s.dim())
        .map(|axis| {
            let column: Vec<f64> = s.samples.iter().map(|x| x[axis]).collect();
            cvm_statistic(&column, |v| gm.marginal_cdf(axis, v))
        })
        .collect())
}

pub fn cvm_norm(gm: &GaussianMixture, s: &SampleSet) -> Result<f64, MetricsError> {
    Ok(cvm_per_axis(gm, s)?.iter().map(|w| w * w).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub madem: f64,
    pub cvm_norm: f64,
    pub mcr: f64,
}

pub fn evaluate(gm: &GaussianMixture, s: &SampleSet, norm: MademNorm) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        madem: madem(gm, s, norm)?,
        cvm_norm: cvm_norm(gm, s)?,
        mcr: mcr(gm, s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::dynamics::{DynamicsError, JetBuffers};
    use crate::propagation::{Lineage, Mixand};
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn standard(n: usize) -> GaussianMixture {
        GaussianMixture::single(DVector::zeros(n), DMatrix::identity(n, n)).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.2
    }

    fn random_gm(rng: &mut ChaCha8Rng, n: usize) -> GaussianMixture {
        let w = [0.2, 0.5, 0.3];
        let mixands = w
            .iter()
            .enumerate()
            .map(|(i, &wi)| {
                let m = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                Mixand::new(wi, m, random_spd(rng, n), Lineage::root().child(i)).unwrap()
            })
            .collect();
        GaussianMixture::new(mixands).unwrap()
    }

    #[test]
    fn madem_examples() {
        let gm = standard(2);
        let at_mean = SampleSet::new(0.0, 0, vec![DVector::zeros(2), DVector::zeros(2)]).unwrap();
        assert_eq!(madem(&gm, &at_mean, MademNorm::Mixture).unwrap(), 0.0);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let shifted = SampleSet::new(
            0.0,
            0,
            vec![&e1 + DVector::from_vec(vec![0.5, 0.0]), &e1 - DVector::from_vec(vec![0.5, 0.0])],
        )
        .unwrap();
        assert!((madem(&gm, &shifted, MademNorm::Mixture).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn madem_shrinks_like_inverse_sqrt_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gm = random_gm(&mut rng, 3);
        let avg = |count: usize| {
            (0..20)
                .map(|rep| {
                    let s = SampleSet::new(0.0, rep, sample_mixture(&gm, count, rep).unwrap()).unwrap();
                    madem(&gm, &s, MademNorm::Mixture).unwrap()
                })
                .sum::<f64>()
                / 20.0
        };
        let small = avg(1_000);
        let large = avg(100_000);
        // E‖z‖ for z ~ N(0, I₃/N) is about 1.596/√N.
        assert!((small * 1_000f64.sqrt() / 1.596 - 1.0).abs() < 0.3, "{small}");
        assert!((large * 100_000f64.sqrt() / 1.596 - 1.0).abs() < 0.3, "{large}");
        assert!((small / large / 10.0 - 1.0).abs() < 0.4);
    }

    #[test]
    fn mcr_examples() {
        let p = DMatrix::identity(3, 3) * 4.0;
        let i = DMatrix::identity(3, 3);
        assert!((covariance_ratio(&p, &p).unwrap() - 1.0).abs() < 1e-14);
        assert!((covariance_ratio(&p, &i).unwrap() - 4.0).abs() < 1e-14);
        assert!((covariance_ratio(&i, &p).unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn mcr_matches_direction_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let p = random_spd(&mut rng, 3);
            let q = random_spd(&mut rng, 3);
            let exact = covariance_ratio(&p, &q).unwrap();
            let mut best: f64 = 1.0;
            for _ in 0..100_000 {
                let x = crate::tensorlab::random_unit_vector(&mut rng, 3);
                let r = (x.transpose() * &q * &x)[0] / (x.transpose() * &p * &x)[0];
                best = best.max(r).max(1.0 / r);
            }
            assert!(best <= exact * (1.0 + 1e-12));
            assert!((best / exact - 1.0).abs() < 0.01, "{best} vs {exact}");
        }
    }

    #[test]
    fn cvm_plug_in_minimum() {
        let gm = standard(1);
        let normal = Normal::standard();
        let n = 500;
        let quantiles: Vec<DVector<f64>> = (1..=n)
            .map(|i| DVector::from_element(1, normal.inverse_cdf((2 * i - 1) as f64 / (2 * n) as f64)))
            .collect();
        let s = SampleSet::new(0.0, 0, quantiles).unwrap();
        let w = cvm_norm(&gm, &s).unwrap();
        assert!((w - 1.0 / (12.0 * n as f64)).abs() < 1e-14, "{w}");
    }

    #[test]
    fn cvm_null_expectation() {
        // Under the null the order-statistic form has mean 1/6 for any N.
        let gm = standard(1);
        let reps = 400;
        let mean = (0..reps)
            .map(|rep| {
                let s = SampleSet::new(0.0, rep, sample_mixture(&gm, 200, rep).unwrap()).unwrap();
                cvm_norm(&gm, &s).unwrap()
            })
            .sum::<f64>()
            / reps as f64;
        // Null standard deviation is about 0.27; 400 reps give a 0.014 standard error.
        assert!((mean - 1.0 / 6.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn cvm_shifted_axis() {
        let gm = standard(2);
        let mut samples = sample_mixture(&gm, 1_000, 3).unwrap();
        for s in &mut samples {
            s[1] += 10.0;
        }
        let s = SampleSet::new(0.0, 3, samples).unwrap();
        let per_axis = cvm_per_axis(&gm, &s).unwrap();
        let column: Vec<f64> = s.samples.iter().map(|x| x[1]).collect();
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        let direct: f64 = sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| ((2 * i + 1) as f64 / 2000.0 - gm.marginal_cdf(1, x)).powi(2))
            .sum::<f64>()
            + 1.0 / 12_000.0;
        assert!((per_axis[1] - direct).abs() < 1e-12);
        assert!(per_axis[1] > 300.0, "{}", per_axis[1]);
        assert!(per_axis[0] < 2.0);
    }

    struct Linear(DMatrix<f64>);

    impl VectorField for Linear {
        fn dim(&self) -> usize {
            self.0.nrows()
        }

        fn jet_into(&self, x: &[f64], order: u8, buf: &mut JetBuffers) -> Result<(), DynamicsError> {
            let n = self.dim();
            for i in 0..n {
                buf.f[i] = (0..n).map(|j| self.0[(i, j)] * x[j]).sum();
            }
            if order >= 1 {
                for i in 0..n {
                    for j in 0..n {
                        buf.df[i * n + j] = self.0[(i, j)];
                    }
                }
            }
            if order >= 2 {
                buf.d2f.iter_mut().for_each(|v| *v = 0.0);
            }
            Ok(())
        }
    }

    #[test]
    fn mc_truth_linear_field() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.5, -0.1]);
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let gm = GaussianMixture::single(DVector::from_vec(vec![1.0, 0.0]), p0.clone()).unwrap();
        let dt = 2.0;
        let s = mc_truth(&Linear(a.clone()), &gm, 10_000, 11, 0.0, dt, &IntegratorOptions::default()).unwrap();
        let e = (a * dt).exp();
        let expected = &e * p0 * e.transpose();
        let rel = (s.covariance() - &expected).norm() / expected.norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn mc_truth_without_propagation_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gm = random_gm(&mut rng, 3);
        let field = Linear(DMatrix::zeros(3, 3));
        let opts = IntegratorOptions::default();
        let a = mc_truth(&field, &gm, 4_000, 42, 1.0, 1.0, &opts).unwrap();
        let b = mc_truth(&field, &gm, 4_000, 42, 1.0, 1.0, &opts).unwrap();
        assert_eq!(a, b);
        let sd = gm.covariance().diagonal().map(f64::sqrt);
        let err = a.mean() - gm.mean();
        for i in 0..3 {
            assert!(err[i].abs() < 4.0 * sd[i] / (4_000f64).sqrt(), "axis {i}");
        }
        let c = mc_truth(&field, &gm, 100, 42, 0.0, 0.5, &opts).unwrap();
        let d = mc_truth(&field, &gm, 100, 42, 0.0, 0.5, &opts).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn csv_round_trip() {
        let gm = standard(6);
        let s = SampleSet::new(3.25, 8, sample_mixture(&gm, 50, 8).unwrap()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,x1,x2,x3,x4,x5,x6\n"));
        let back = SampleSet::read_csv(&buf[..], 8).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mcr_symmetric_and_at_least_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_spd(&mut rng, 4);
            let q = random_spd(&mut rng, 4);
            let ab = covariance_ratio(&p, &q).unwrap();
            let ba = covariance_ratio(&q, &p).unwrap();
            prop_assert!(ab >= 1.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * ab);
        }

        #[test]
        fn madem_linear_invariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gm = random_gm(&mut rng, 3);
            let s = SampleSet::new(0.0, seed, sample_mixture(&gm, 50, seed).unwrap()).unwrap();
            let t = random_spd(&mut rng, 3);
            let c = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let mapped_gm = GaussianMixture::new(gm.mixands.iter().map(|m| {
                Mixand::new(m.weight, &t * &m.mean + &c, &t * &m.cov * t.transpose(), m.lineage.clone()).unwrap()
            }).collect()).unwrap();
            let mapped_s = SampleSet::new(0.0, seed, s.samples.iter().map(|x| &t * x + &c).collect()).unwrap();
            let a = madem(&gm, &s, MademNorm::Mixture).unwrap();
            let b = madem(&mapped_gm, &mapped_s, MademNorm::Mixture).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a));
        }

        #[test]
        fn cvm_monotone_reparameterization(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let gm = standard(1);
            let s = SampleSet::new(0.0, seed, sample_mixture(&gm, 200, seed).unwrap()).unwrap();
            let values: Vec<f64> = s.samples.iter().map(|x| x[0]).collect();
            let base = cvm_statistic(&values, |v| gm.marginal_cdf(0, v));
            let g = |v: f64| (scale * v + shift).exp();
            let ginv = |u: f64| (u.ln() - shift) / scale;
            let mapped: Vec<f64> = values.iter().map(|&v| g(v)).collect();
            let other = cvm_statistic(&mapped, |u| gm.marginal_cdf(0, ginv(u)));
            prop_assert!((base - other).abs() <= 1e-9 * base.max(1e-3));
        }
    }
}
