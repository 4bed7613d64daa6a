//! Joint integration of state, state transition matrix (STM) and second-order
//! state transition tensor (STT), flow-map composition, and mixand moment
//! propagation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{JetBuffers, VectorField};
use crate::integrator::{integrate_controlled, IntegrationError, IntegratorOptions};
use crate::tensorlab::{cholesky_lower, solve_tensor_system, Tensor3, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropagationError {
    #[error("integration failed (last good epoch {last_good_epoch:?}): {source}")]
    Integration {
        last_good_epoch: Option<f64>,
        #[source]
        source: IntegrationError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("propagated covariance is not positive definite (eigenvalues {eigenvalues:?})")]
    NotPositiveDefinite { eigenvalues: Vec<f64> },
    #[error("invalid checkpoint times: {0}")]
    InvalidCheckpoints(String),
    #[error("flow expansion lacks the {0}")]
    MissingTensor(&'static str),
    #[error("invalid mixand: {0}")]
    InvalidMixand(String),
}

impl From<IntegrationError> for PropagationError {
    fn from(source: IntegrationError) -> Self {
        PropagationError::Integration {
            last_good_epoch: source.last_good_epoch(),
            source,
        }
    }
}

/// How much of the flow expansion to integrate alongside the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlowOrder {
    State,
    Stm,
    Stt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: f64,
    pub state: DVector<f64>,
    /// `Φ(t, t0)`
    pub stm: Option<DMatrix<f64>>,
    /// `Ψ(t, t0)`
    pub stt: Option<Tensor3>,
}

impl Checkpoint {
    pub fn stm(&self) -> Result<&DMatrix<f64>, PropagationError> {
        self.stm.as_ref().ok_or(PropagationError::MissingTensor("STM"))
    }

    pub fn stt(&self) -> Result<&Tensor3, PropagationError> {
        self.stt.as_ref().ok_or(PropagationError::MissingTensor("STT"))
    }
}

/// Flow-map expansion about one reference trajectory, sampled at checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExpansion {
    pub t0: f64,
    pub order: FlowOrder,
    pub checkpoints: Vec<Checkpoint>,
}

impl FlowExpansion {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("expansions are never empty")
    }

    pub fn times(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.t).collect()
    }
}

/// Number of unique entries of a trailing-symmetric rank-3 tensor.
fn packed_stt_len(n: usize) -> usize {
    n * n * (n + 1) / 2
}

fn extended_len(n: usize, order: FlowOrder) -> usize {
    match order {
        FlowOrder::State => n,
        FlowOrder::Stm => n + n * n,
        FlowOrder::Stt => n + n * n + packed_stt_len(n),
    }
}

/// Pairs `(j, k)` with `j <= k` in packing order.
fn packed_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for k in j..n {
            out.push((j, k));
        }
    }
    out
}

struct FlowRhs<'a, V: VectorField + ?Sized> {
    field: &'a V,
    order: FlowOrder,
    n: usize,
    pairs: Vec<(usize, usize)>,
    buf: JetBuffers,
    hphi: Vec<f64>,
    quad: Vec<f64>,
}

impl<'a, V: VectorField + ?Sized> FlowRhs<'a, V> {
    fn new(field: &'a V, order: FlowOrder) -> Self {
        let n = field.dim();
        Self {
            field,
            order,
            n,
            pairs: packed_pairs(n),
            buf: JetBuffers::new(n),
            hphi: vec![0.0; n * n],
            quad: vec![0.0; n * n],
        }
    }

    fn eval(&mut self, y: &[f64], dy: &mut [f64]) -> Result<(), String> {
        let n = self.n;
        let jet_order = match self.order {
            FlowOrder::State => 0,
            FlowOrder::Stm => 1,
            FlowOrder::Stt => 2,
        };
        self.field
            .jet_into(&y[..n], jet_order, &mut self.buf)
            .map_err(|e| e.to_string())?;
        dy[..n].copy_from_slice(&self.buf.f);
        if self.order == FlowOrder::State {
            return Ok(());
        }
        let a = &self.buf.df;
        let phi = &y[n..n + n * n];
        {
            let dphi = &mut dy[n..n + n * n];
            for i in 0..n {
                for c in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += a[i * n + j] * phi[j * n + c];
                    }
                    dphi[i * n + c] = s;
                }
            }
        }
        if self.order != FlowOrder::Stt {
            return Ok(());
        }
        let np = self.pairs.len();
        let base = n + n * n;
        let psi = &y[base..];
        let h = &self.buf.d2f;
        for i in 0..n {
            let hi = &h[i * n * n..(i + 1) * n * n];
            let nonzero = hi.iter().any(|v| *v != 0.0);
            if nonzero {
                // hphi = H_i Φ, quad = Φᵀ H_i Φ
                for j in 0..n {
                    for b in 0..n {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += hi[j * n + k] * phi[k * n + b];
                        }
                        self.hphi[j * n + b] = s;
                    }
                }
                for a_ in 0..n {
                    for b in a_..n {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += phi[j * n + a_] * self.hphi[j * n + b];
                        }
                        self.quad[a_ * n + b] = s;
                    }
                }
            }
            let ai = &a[i * n..(i + 1) * n];
            for (p, &(ja, kb)) in self.pairs.iter().enumerate() {
                let mut s = if nonzero { self.quad[ja * n + kb] } else { 0.0 };
                for (j, aij) in ai.iter().enumerate() {
                    if *aij != 0.0 {
                        s += aij * psi[j * np + p];
                    }
                }
                dy[base + i * np + p] = s;
            }
        }
        Ok(())
    }
}

fn unpack(n: usize, order: FlowOrder, t: f64, y: &[f64]) -> Checkpoint {
    let state = DVector::from_column_slice(&y[..n]);
    let stm = (order >= FlowOrder::Stm).then(|| DMatrix::from_row_slice(n, n, &y[n..n + n * n]));
    let stt = (order == FlowOrder::Stt).then(|| {
        let np = packed_stt_len(n) / n;
        let base = n + n * n;
        let mut t3 = Tensor3::zeros(n);
        for i in 0..n {
            for (p, &(j, k)) in packed_pairs(n).iter().enumerate() {
                let v = y[base + i * np + p];
                t3.set(i, j, k, v);
                t3.set(i, k, j, v);
            }
        }
        t3
    });
    Checkpoint { t, state, stm, stt }
}

/// Integrates the reference trajectory from `(t0, x0)` together with `Φ` and
/// (for [`FlowOrder::Stt`]) `Ψ`, recording a checkpoint at every requested
/// time. `t0` is always the first checkpoint.
pub fn integrate_flow<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    t0: f64,
    checkpoint_times: &[f64],
    order: FlowOrder,
    opts: &IntegratorOptions,
) -> Result<FlowExpansion, PropagationError> {
    let n = field.dim();
    if x0.len() != n {
        return Err(PropagationError::InvalidCheckpoints(format!(
            "initial state has dimension {}, field has {n}",
            x0.len()
        )));
    }
    if checkpoint_times.is_empty() {
        return Err(PropagationError::InvalidCheckpoints("no checkpoint times".into()));
    }
    if checkpoint_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PropagationError::InvalidCheckpoints(
            "checkpoint times must be strictly increasing".into(),
        ));
    }
    if checkpoint_times[0] < t0 {
        return Err(PropagationError::InvalidCheckpoints(
            "checkpoint times precede the initial epoch".into(),
        ));
    }
    let mut times = Vec::with_capacity(checkpoint_times.len() + 1);
    if checkpoint_times[0] > t0 {
        times.push(t0);
    }
    times.extend_from_slice(checkpoint_times);

    let mut y0 = vec![0.0; extended_len(n, order)];
    y0[..n].copy_from_slice(x0.as_slice());
    if order >= FlowOrder::Stm {
        for i in 0..n {
            y0[n + i * n + i] = 1.0;
        }
    }
    let mut rhs = FlowRhs::new(field, order);
    let mut checkpoints = Vec::with_capacity(times.len());
    // Step control covers the state and STM only, so carrying the STT does
    // not change the step sequence or the STM values.
    let controlled = if order >= FlowOrder::Stm { n + n * n } else { n };
    integrate_controlled(
        |_, y, dy| rhs.eval(y, dy),
        t0,
        &y0,
        controlled,
        &times,
        opts,
        |_, t, y| checkpoints.push(unpack(n, order, t, y)),
    )?;
    Ok(FlowExpansion {
        t0,
        order,
        checkpoints,
    })
}

/// Propagates a single state from `t0` to `tf`.
pub fn propagate_state<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    t0: f64,
    tf: f64,
    opts: &IntegratorOptions,
) -> Result<DVector<f64>, PropagationError> {
    let flow = integrate_flow(field, x0, t0, &[tf], FlowOrder::State, opts)?;
    Ok(flow.last().state.clone())
}

/// `Φ(tf, ts) = Φ(tf, t0) Φ(ts, t0)⁻¹` via an LU solve.
pub fn stm_between(
    phi_f0: &DMatrix<f64>,
    phi_s0: &DMatrix<f64>,
) -> Result<DMatrix<f64>, PropagationError> {
    let lu = phi_s0.transpose().lu();
    if !lu.is_invertible() || !lu.determinant().is_normal() {
        return Err(TensorError::Singular.into());
    }
    let xt = lu
        .solve(&phi_f0.transpose())
        .ok_or(PropagationError::Tensor(TensorError::Singular))?;
    Ok(xt.transpose())
}

/// `Ψ(tf, ts)` from the expansions about `t0`: the difference
/// `Ψ(tf,t0) − Φ(tf,ts)·Ψ(ts,t0)` with both trailing indices contracted with
/// `Φ(ts,t0)⁻¹`.
pub fn stt_between(
    psi_f0: &Tensor3,
    phi_s0: &DMatrix<f64>,
    psi_s0: &Tensor3,
    phi_fs: &DMatrix<f64>,
) -> Result<Tensor3, PropagationError> {
    let diff = psi_f0.sub(&psi_s0.left_mul(phi_fs)?);
    let half = solve_tensor_system(phi_s0, &diff, 1)?;
    let mut out = solve_tensor_system(phi_s0, &half, 2)?;
    out.symmetrize_trailing();
    Ok(out)
}

/// Forward composition `Ψ(tf,t0) = Φ(tf,ts)·Ψ(ts,t0) + Ψ(tf,ts)[Φ(ts,t0), Φ(ts,t0)]`.
pub fn compose_stt(
    phi_fs: &DMatrix<f64>,
    psi_fs: &Tensor3,
    phi_s0: &DMatrix<f64>,
    psi_s0: &Tensor3,
) -> Result<Tensor3, PropagationError> {
    Ok(psi_s0.left_mul(phi_fs)?.add(&psi_fs.bilinear(phi_s0)?))
}

/// First-order update of the STM for a reference offset `dm`: `Φ + Ψ·dm`.
pub fn stm_shift_reference(phi: &DMatrix<f64>, psi: &Tensor3, dm: &DVector<f64>) -> DMatrix<f64> {
    phi + psi.contract_last(dm).expect("dimensions checked by caller")
}

/// Position of a mixand in the split tree: the child index taken at each split.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Lineage(pub Vec<u16>);

impl Lineage {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    /// Root has depth 1.
    pub fn depth(&self) -> usize {
        self.0.len() + 1
    }

    pub fn child(&self, index: usize) -> Self {
        let mut path = self.0.clone();
        path.push(index as u16);
        Self(path)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }
}

impl std::fmt::Display for Lineage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r")?;
        for i in &self.0 {
            write!(f, ".{i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixand {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub lineage: Lineage,
}

impl Mixand {
    pub fn new(
        weight: f64,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        lineage: Lineage,
    ) -> Result<Self, PropagationError> {
        if !(weight > 0.0 && weight <= 1.0 + 1e-12) {
            return Err(PropagationError::InvalidMixand(format!("weight {weight} outside (0, 1]")));
        }
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(PropagationError::InvalidMixand(format!(
                "covariance is {}x{}, mean has dimension {n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        check_spd(&cov)?;
        Ok(Self {
            weight,
            mean,
            cov,
            lineage,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

pub(crate) fn check_spd(p: &DMatrix<f64>) -> Result<(), PropagationError> {
    if cholesky_lower(p).is_err() {
        let eig = SymmetricEigen::new(p.clone());
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        return Err(PropagationError::NotPositiveDefinite { eigenvalues });
    }
    Ok(())
}

/// Linear covariance mapping: `m' = φ(m)`, `P' = Φ P Φᵀ`.
pub fn propagate_moments_first(
    mix: &Mixand,
    mapped_mean: &DVector<f64>,
    phi: &DMatrix<f64>,
) -> Result<Mixand, PropagationError> {
    let cov = symmetrize(&(phi * &mix.cov * phi.transpose()));
    check_spd(&cov)?;
    Ok(Mixand {
        weight: mix.weight,
        mean: mapped_mean.clone(),
        cov,
        lineage: mix.lineage.clone(),
    })
}

/// Second-order Taylor moment mapping about the mixand mean for a Gaussian input.
///
/// `δm_i = ½ Ψ_i:P` and `P' = Φ P Φᵀ − δm δmᵀ + ¼ Ψ_i,ab Ψ_j,cd E[x_a x_b x_c x_d]`,
/// where the Gaussian fourth moment reduces the last two terms to
/// `½ tr(Ψ_i P Ψ_j P)`.
pub fn propagate_moments_second(
    mix: &Mixand,
    mapped_mean: &DVector<f64>,
    phi: &DMatrix<f64>,
    psi: &Tensor3,
) -> Result<Mixand, PropagationError> {
    let n = mix.dim();
    let p = &mix.cov;
    let psi_p: Vec<DMatrix<f64>> = (0..n).map(|i| psi.slice(i) * p).collect();
    let dm = DVector::from_fn(n, |i, _| 0.5 * psi_p[i].trace());
    let mut cov = phi * p * phi.transpose();
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * psi_p[i].component_mul(&psi_p[j].transpose()).sum();
            cov[(i, j)] += v;
            if i != j {
                cov[(j, i)] += v;
            }
        }
    }
    let cov = symmetrize(&cov);
    check_spd(&cov)?;
    Ok(Mixand {
        weight: mix.weight,
        mean: mapped_mean + dm,
        cov,
        lineage: mix.lineage.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DynamicsModel, Units, EARTH_MU};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circular_leo() -> (DynamicsModel, DVector<f64>, f64) {
        let r = 7000.0;
        let v = (EARTH_MU / r).sqrt();
        let x0 = DVector::from_vec(vec![r, 0.0, 0.0, 0.0, v * 0.8, v * 0.6]);
        let period = 2.0 * std::f64::consts::PI * (r.powi(3) / EARTH_MU).sqrt();
        (DynamicsModel::two_body(EARTH_MU).unwrap(), x0, period)
    }

    fn symplectic_form(n: usize) -> DMatrix<f64> {
        let h = n / 2;
        let mut j = DMatrix::zeros(n, n);
        for i in 0..h {
            j[(i, h + i)] = 1.0;
            j[(h + i, i)] = -1.0;
        }
        j
    }

    #[test]
    fn zero_span_is_identity_flow() {
        let (m, x0, _) = circular_leo();
        let flow = integrate_flow(&m, &x0, 5.0, &[5.0], FlowOrder::Stt, &Default::default()).unwrap();
        assert_eq!(flow.checkpoints.len(), 1);
        let c = &flow.checkpoints[0];
        assert_eq!(c.state, x0);
        assert_eq!(c.stm.as_ref().unwrap(), &DMatrix::identity(6, 6));
        assert_eq!(c.stt.as_ref().unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn circular_orbit_period_and_symplecticity() {
        let (m, x0, period) = circular_leo();
        let flow =
            integrate_flow(&m, &x0, 0.0, &[period / 2.0, period], FlowOrder::Stm, &Default::default())
                .unwrap();
        assert_eq!(flow.checkpoints.len(), 3);
        let last = flow.last();
        let rel = (&last.state - &x0).norm() / x0.norm();
        assert!(rel < 1e-8, "return defect {rel}");
        let phi = last.stm.as_ref().unwrap();
        let j = symplectic_form(6);
        let defect = (phi.transpose() * &j * phi - &j).norm();
        // Dimensional units: Φ mixes km and km/s, so compare against ‖Φ‖².
        let rel = defect / phi.norm_squared();
        assert!(rel < 1e-12, "symplectic defect {defect} (relative {rel})");
    }

    #[test]
    fn cr3bp_stm_is_symplectic() {
        // With velocity (not momentum) coordinates the invariant form is TᵀJT,
        // where p = v + ẑ × r.
        let mu = 1.0 / 82.30059;
        let m = DynamicsModel::cr3bp(mu, Units::default()).unwrap();
        let x0 = DVector::from_vec(vec![0.924, 1.47e-28, 0.148, -2.71e-16, -0.147, -2.42e-14]);
        let flow = integrate_flow(&m, &x0, 0.0, &[4.8], FlowOrder::Stm, &Default::default()).unwrap();
        let phi = flow.last().stm().unwrap();
        let mut t = DMatrix::<f64>::identity(6, 6);
        t[(3, 1)] = -1.0;
        t[(4, 0)] = 1.0;
        let omega = t.transpose() * symplectic_form(6) * &t;
        let defect = (phi.transpose() * &omega * phi - &omega).norm();
        assert!(defect < 1e-7, "defect {defect}");
    }

    #[test]
    fn stm_and_stt_match_finite_differences() {
        let (m, x0, period) = circular_leo();
        let tf = 0.3 * period;
        let opts = IntegratorOptions::default();
        let flow = integrate_flow(&m, &x0, 0.0, &[tf], FlowOrder::Stt, &opts).unwrap();
        let phi = flow.last().stm.clone().unwrap();
        let psi = flow.last().stt.clone().unwrap();
        let scale = [1.0, 1.0, 1.0, 1e-3, 1e-3, 1e-3];
        for j in 0..6 {
            let eps = scale[j];
            let run = |d: f64| {
                let mut x = x0.clone();
                x[j] += d;
                integrate_flow(&m, &x, 0.0, &[tf], FlowOrder::Stm, &opts).unwrap()
            };
            let p = run(eps);
            let q = run(-eps);
            let col = (&p.last().state - &q.last().state) / (2.0 * eps);
            let want = phi.column(j).into_owned();
            assert!((&col - &want).norm() / want.norm() < 1e-5, "Φ column {j}");
            let dphi = (p.last().stm.as_ref().unwrap() - q.last().stm.as_ref().unwrap()) / (2.0 * eps);
            // Ψ[i][k][j] = ∂Φ[i][k]/∂x0[j]
            let got = DMatrix::from_fn(6, 6, |i, k| psi.get(i, k, j));
            assert!(
                (&dphi - &got).norm() / got.norm().max(1e-300) < 1e-5,
                "Ψ slice {j}: {}",
                (&dphi - &got).norm() / got.norm()
            );
        }
    }

    #[test]
    fn stm_between_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(6, 6) * 3.0;
        assert_eq!(stm_between(&a, &DMatrix::identity(6, 6)).unwrap(), a);
        let id = stm_between(&a, &a).unwrap();
        assert!((id - DMatrix::identity(6, 6)).amax() < 1e-12);
        assert!(stm_between(&a, &DMatrix::zeros(6, 6)).is_err());
    }

    #[test]
    fn stt_between_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut psi = Tensor3::from_fn(6, |_, _, _| rng.random_range(-1.0..1.0));
        psi.symmetrize_trailing();
        let phi = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(6, 6) * 3.0;
        let out = stt_between(&psi, &DMatrix::identity(6, 6), &Tensor3::zeros(6), &phi).unwrap();
        assert!(out.sub(&psi).frobenius_norm() < 1e-15);
    }

    #[test]
    fn cocycle_closure_two_body() {
        let (m, x0, period) = circular_leo();
        let opts = IntegratorOptions::default();
        let ts = 0.4 * period;
        let tf = 0.9 * period;
        let flow = integrate_flow(&m, &x0, 0.0, &[ts, tf], FlowOrder::Stt, &opts).unwrap();
        let (s, f) = (&flow.checkpoints[1], &flow.checkpoints[2]);
        let phi_fs = stm_between(f.stm().unwrap(), s.stm().unwrap()).unwrap();
        let closure = &phi_fs * s.stm().unwrap() - f.stm().unwrap();
        assert!(closure.norm() / f.stm().unwrap().norm() < 1e-9);
        let psi_fs = stt_between(f.stt().unwrap(), s.stm().unwrap(), s.stt().unwrap(), &phi_fs).unwrap();
        let back = compose_stt(&phi_fs, &psi_fs, s.stm().unwrap(), s.stt().unwrap()).unwrap();
        assert!(back.sub(f.stt().unwrap()).frobenius_norm() / f.stt().unwrap().frobenius_norm() < 1e-9);
        // Fresh integration from ts.
        let fresh = integrate_flow(&m, &s.state, ts, &[tf], FlowOrder::Stt, &opts).unwrap();
        let fphi = fresh.last().stm().unwrap();
        assert!((fphi - &phi_fs).norm() / fphi.norm() < 1e-8);
        let fpsi = fresh.last().stt().unwrap();
        assert!(fpsi.sub(&psi_fs).frobenius_norm() / fpsi.frobenius_norm() < 1e-7);
    }

    #[test]
    fn cr3bp_jacobi_constant_is_conserved() {
        let mu = 1.0 / 82.30059;
        let m = DynamicsModel::cr3bp(mu, Units::default()).unwrap();
        let x0 = DVector::from_vec(vec![0.924, 1.47e-28, 0.148, -2.71e-16, -0.147, -2.42e-14]);
        let flow = integrate_flow(&m, &x0, 0.0, &[1.0, 2.0, 4.0], FlowOrder::State, &Default::default())
            .unwrap();
        let c0 = m.jacobi_constant(x0.as_slice()).unwrap();
        for c in &flow.checkpoints {
            let cj = m.jacobi_constant(c.state.as_slice()).unwrap();
            assert!((cj - c0).abs() < 1e-10, "{cj} vs {c0}");
        }
    }

    #[test]
    fn shift_reference_trivial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let psi = Tensor3::from_fn(6, |_, _, _| rng.random_range(-1.0..1.0));
        assert_eq!(stm_shift_reference(&phi, &psi, &DVector::zeros(6)), phi);
        let dm = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(stm_shift_reference(&phi, &Tensor3::zeros(6), &dm), phi);
    }

    fn mixand(n: usize, cov: DMatrix<f64>) -> Mixand {
        Mixand::new(0.5, DVector::zeros(n), cov, Lineage::root()).unwrap()
    }

    #[test]
    fn first_order_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mix = mixand(2, p.clone());
        let out = propagate_moments_first(&mix, &mix.mean, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(out.cov, p);
        assert_eq!(out.weight, 0.5);
        let phi = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let out = propagate_moments_first(&mix, &mix.mean, &phi).unwrap();
        assert_eq!(out.cov[(0, 0)], 8.0);
        assert_eq!(out.cov[(0, 1)], 1.0);
        assert_eq!(out.cov[(1, 1)], 1.0);
    }

    #[test]
    fn second_order_scalar_square() {
        for sigma in [0.1f64, 1.0, 3.0] {
            let mix = mixand(1, DMatrix::from_element(1, 1, sigma * sigma));
            let psi = Tensor3::from_fn(1, |_, _, _| 2.0);
            let out = propagate_moments_second(&mix, &DVector::zeros(1), &DMatrix::zeros(1, 1), &psi)
                .unwrap();
            assert!((out.mean[0] - sigma * sigma).abs() <= 1e-12 * sigma * sigma);
            assert!((out.cov[(0, 0)] - 2.0 * sigma.powi(4)).abs() <= 1e-12 * sigma.powi(4));
        }
    }

    #[test]
    fn second_order_reduces_to_first_for_zero_stt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let p = &a * a.transpose() + DMatrix::identity(6, 6);
        let mix = mixand(6, p);
        let phi = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(6, 6) * 2.0;
        let m1 = propagate_moments_first(&mix, &mix.mean, &phi).unwrap();
        let m2 = propagate_moments_second(&mix, &mix.mean, &phi, &Tensor3::zeros(6)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn second_order_matches_fourth_moment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 3;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = &a * a.transpose() + DMatrix::identity(n, n) * 0.3;
        let mut psi = Tensor3::from_fn(n, |_, _, _| rng.random_range(-1.0..1.0));
        psi.symmetrize_trailing();
        let phi = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mix = mixand(n, p.clone());
        let out = propagate_moments_second(&mix, &DVector::zeros(n), &phi, &psi).unwrap();
        // Brute-force contraction with the Gaussian fourth-moment tensor.
        let c = |a: usize, b: usize, c: usize, d: usize| {
            p[(a, b)] * p[(c, d)] + p[(a, c)] * p[(b, d)] + p[(a, d)] * p[(b, c)]
        };
        let dm: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        s += 0.5 * psi.get(i, a, b) * p[(a, b)];
                    }
                }
                s
            })
            .collect();
        let phipphi = &phi * &p * phi.transpose();
        for i in 0..n {
            assert!((out.mean[i] - dm[i]).abs() < 1e-12);
            for j in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        for cc in 0..n {
                            for d in 0..n {
                                s += psi.get(i, a, b) * psi.get(j, cc, d) * c(a, b, cc, d);
                            }
                        }
                    }
                }
                let want = phipphi[(i, j)] - dm[i] * dm[j] + 0.25 * s;
                assert!((out.cov[(i, j)] - want).abs() < 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mixand_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            Mixand::new(1.0, DVector::zeros(2), bad, Lineage::root()),
            Err(PropagationError::NotPositiveDefinite { .. })
        ));
        assert!(Mixand::new(0.0, DVector::zeros(1), DMatrix::identity(1, 1), Lineage::root()).is_err());
        let l = Lineage::root().child(1).child(2);
        assert_eq!(l.depth(), 3);
        assert_eq!(l.to_string(), "r.1.2");
        assert_eq!(l.parent().unwrap(), Lineage::root().child(1));
    }
}
