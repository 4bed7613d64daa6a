//! Autonomous vector fields with analytic first and second state partials.
//!
//! States are `(r, v)` 6-vectors. Two-body states are dimensional (km, km/s);
//! CR3BP states are nondimensional in the rotating frame with the primaries at
//! `(−μ, 0, 0)` and `(1 − μ, 0, 0)` and unit angular rate.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorlab::Tensor3;

/// Earth gravitational parameter in km³/s².
pub const EARTH_MU: f64 = 398_600.441_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("state is singular at the {body} (distance {distance:e})")]
    Singular { body: &'static str, distance: f64 },
    #[error("invalid gravitational parameter {0}")]
    InvalidMu(f64),
    #[error("state must have dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("jet order must be 0, 1 or 2, got {0}")]
    BadOrder(u8),
}

/// Scratch buffers for a field evaluation: `f` (n), `df` (n×n row-major), `d2f` (n³ row-major).
#[derive(Debug, Clone)]
pub struct JetBuffers {
    pub n: usize,
    pub f: Vec<f64>,
    pub df: Vec<f64>,
    pub d2f: Vec<f64>,
}

impl JetBuffers {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            f: vec![0.0; n],
            df: vec![0.0; n * n],
            d2f: vec![0.0; n * n * n],
        }
    }
}

/// An autonomous vector field `dx/dt = f(x)` that can report its partials.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Writes `f` and, for `order >= 1` / `order >= 2`, the Jacobian and
    /// Hessian into `buf`. Entries of derivative blocks above `order` are left
    /// untouched.
    fn jet_into(&self, x: &[f64], order: u8, buf: &mut JetBuffers) -> Result<(), DynamicsError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "two_body")]
    TwoBody,
    #[serde(rename = "cr3bp")]
    Cr3bp,
}

/// Reporting scales: one state length unit in km and one time unit in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length_km: f64,
    pub time_s: f64,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            length_km: 1.0,
            time_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub kind: ModelKind,
    pub mu: f64,
    #[serde(default)]
    pub units: Units,
}

impl DynamicsModel {
    pub fn two_body(mu: f64) -> Result<Self, DynamicsError> {
        let m = Self {
            kind: ModelKind::TwoBody,
            mu,
            units: Units::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn cr3bp(mu: f64, units: Units) -> Result<Self, DynamicsError> {
        let m = Self {
            kind: ModelKind::Cr3bp,
            mu,
            units,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.mu > 0.0
            && self.mu.is_finite()
            && (self.kind == ModelKind::TwoBody || self.mu < 0.5);
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidMu(self.mu))
        }
    }

    /// Jacobi constant `x² + y² + 2(1−μ)/r₁ + 2μ/r₂ − v²` (CR3BP only).
    pub fn jacobi_constant(&self, x: &[f64]) -> Option<f64> {
        if self.kind != ModelKind::Cr3bp {
            return None;
        }
        let mu = self.mu;
        let r1 = ((x[0] + mu).powi(2) + x[1] * x[1] + x[2] * x[2]).sqrt();
        let r2 = ((x[0] - 1.0 + mu).powi(2) + x[1] * x[1] + x[2] * x[2]).sqrt();
        let v2 = x[3] * x[3] + x[4] * x[4] + x[5] * x[5];
        Some(x[0] * x[0] + x[1] * x[1] + 2.0 * (1.0 - mu) / r1 + 2.0 * mu / r2 - v2)
    }
}

/// Adds the acceleration of a point mass `gm` at relative position `d`
/// (field point minus body) and its partials to the acceleration rows.
fn add_point_mass(
    gm: f64,
    d: [f64; 3],
    order: u8,
    body: &'static str,
    buf: &mut JetBuffers,
) -> Result<(), DynamicsError> {
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let r = r2.sqrt();
    if !(r > 0.0) || !r.is_finite() {
        return Err(DynamicsError::Singular { body, distance: r });
    }
    let r3 = r2 * r;
    let n = buf.n;
    for i in 0..3 {
        buf.f[3 + i] -= gm * d[i] / r3;
    }
    if order >= 1 {
        let r5 = r3 * r2;
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                buf.df[(3 + i) * n + j] += -gm * delta / r3 + 3.0 * gm * d[i] * d[j] / r5;
            }
        }
        if order >= 2 {
            let r7 = r5 * r2;
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        let dij = if i == j { d[k] } else { 0.0 };
                        let dik = if i == k { d[j] } else { 0.0 };
                        let djk = if j == k { d[i] } else { 0.0 };
                        buf.d2f[((3 + i) * n + j) * n + k] += 3.0 * gm * (dij + dik + djk) / r5
                            - 15.0 * gm * d[i] * (d[j] * d[k]) / r7;
                    }
                }
            }
        }
    }
    Ok(())
}

impl VectorField for DynamicsModel {
    fn dim(&self) -> usize {
        6
    }

    fn jet_into(&self, x: &[f64], order: u8, buf: &mut JetBuffers) -> Result<(), DynamicsError> {
        if x.len() != 6 || buf.n != 6 {
            return Err(DynamicsError::Dimension {
                expected: 6,
                got: x.len(),
            });
        }
        if order > 2 {
            return Err(DynamicsError::BadOrder(order));
        }
        buf.f.iter_mut().for_each(|v| *v = 0.0);
        buf.f[..3].copy_from_slice(&x[3..6]);
        if order >= 1 {
            buf.df.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..3 {
                buf.df[i * 6 + 3 + i] = 1.0;
            }
        }
        if order >= 2 {
            buf.d2f.iter_mut().for_each(|v| *v = 0.0);
        }
        match self.kind {
            ModelKind::TwoBody => {
                add_point_mass(self.mu, [x[0], x[1], x[2]], order, "central body", buf)?;
            }
            ModelKind::Cr3bp => {
                let mu = self.mu;
                add_point_mass(
                    1.0 - mu,
                    [x[0] + mu, x[1], x[2]],
                    order,
                    "primary",
                    buf,
                )?;
                add_point_mass(mu, [x[0] - 1.0 + mu, x[1], x[2]], order, "secondary", buf)?;
                buf.f[3] += 2.0 * x[4] + x[0];
                buf.f[4] += -2.0 * x[3] + x[1];
                if order >= 1 {
                    buf.df[3 * 6] += 1.0;
                    buf.df[4 * 6 + 1] += 1.0;
                    buf.df[3 * 6 + 4] += 2.0;
                    buf.df[4 * 6 + 3] -= 2.0;
                }
            }
        }
        Ok(())
    }
}

/// Field value and partials as owned nalgebra objects.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldJet {
    pub f: DVector<f64>,
    pub df: Option<DMatrix<f64>>,
    pub d2f: Option<Tensor3>,
}

pub fn eval_jet<V: VectorField + ?Sized>(
    field: &V,
    x: &DVector<f64>,
    order: u8,
) -> Result<FieldJet, DynamicsError> {
    let n = field.dim();
    let mut buf = JetBuffers::new(n);
    field.jet_into(x.as_slice(), order, &mut buf)?;
    Ok(FieldJet {
        f: DVector::from_vec(buf.f),
        df: (order >= 1).then(|| DMatrix::from_row_slice(n, n, &buf.df)),
        d2f: (order >= 2).then(|| Tensor3::from_raw(n, buf.d2f)),
    })
}

/// Classical orbital elements; angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeplerElements {
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub raan: f64,
    pub argp: f64,
    pub nu: f64,
}

impl KeplerElements {
    pub fn to_cartesian(&self, mu: f64) -> DVector<f64> {
        let p = self.a * (1.0 - self.e * self.e);
        let r = p / (1.0 + self.e * self.nu.cos());
        let rp = Vector3::new(r * self.nu.cos(), r * self.nu.sin(), 0.0);
        let vp = Vector3::new(-self.nu.sin(), self.e + self.nu.cos(), 0.0) * (mu / p).sqrt();
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), self.raan)
            * nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), self.i)
            * nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), self.argp);
        let r = rot * rp;
        let v = rot * vp;
        DVector::from_vec(vec![r.x, r.y, r.z, v.x, v.y, v.z])
    }

    /// Inverse of [`to_cartesian`](Self::to_cartesian) for elliptic, inclined orbits.
    pub fn from_cartesian(x: &DVector<f64>, mu: f64) -> Self {
        let r = Vector3::new(x[0], x[1], x[2]);
        let v = Vector3::new(x[3], x[4], x[5]);
        let h = r.cross(&v);
        let node = Vector3::z().cross(&h);
        let rn = r.norm();
        let ev = (v.cross(&h)) / mu - r / rn;
        let e = ev.norm();
        let energy = v.norm_squared() / 2.0 - mu / rn;
        let a = -mu / (2.0 * energy);
        let i = (h.z / h.norm()).clamp(-1.0, 1.0).acos();
        let mut raan = node.y.atan2(node.x);
        if raan < 0.0 {
            raan += 2.0 * std::f64::consts::PI;
        }
        let angle = |u: &Vector3<f64>, w: &Vector3<f64>| {
            let c = u.dot(w) / (u.norm() * w.norm());
            let s = h.dot(&u.cross(w)) / (h.norm() * u.norm() * w.norm());
            let mut th = s.atan2(c);
            if th < 0.0 {
                th += 2.0 * std::f64::consts::PI;
            }
            th
        };
        let argp = angle(&node, &ev);
        let nu = angle(&ev, &r);
        Self {
            a,
            e,
            i,
            raan,
            argp,
            nu,
        }
    }

    pub fn period(&self, mu: f64) -> f64 {
        2.0 * std::f64::consts::PI * (self.a.powi(3) / mu).sqrt()
    }
}
