//! Passive and active myocardial constitutive laws.
//!
//! The passive response is a transversely anisotropic exponential strain
//! energy with a compressible volumetric term; the active response is an
//! orthotropic-free stress along the fiber direction scaled by a
//! prescribed twitch.

use nalgebra::Matrix3;

use crate::geometry::Triad;
use crate::{Error, Result};

/// Exponent threshold beyond which exp(Q) is declared non-admissible
/// instead of overflowing to inf.
const Q_OVERFLOW: f64 = 700.0;

#[derive(Debug, Clone, Copy)]
pub struct MaterialParams {
    /// Stress scale of the exponential term, Pa.
    pub c: f64,
    pub b_f: f64,
    pub b_s: f64,
    pub b_n: f64,
    pub b_fs: f64,
    pub b_fn: f64,
    pub b_sn: f64,
    /// Bulk modulus of the volumetric penalty, Pa.
    pub bulk: f64,
    /// Reference density, kg/m^3.
    pub density: f64,
}

impl MaterialParams {
    pub fn baseline() -> Self {
        MaterialParams {
            c: 880.0,
            b_f: 8.0,
            b_s: 6.0,
            b_n: 3.0,
            b_fs: 12.0,
            b_fn: 3.0,
            b_sn: 3.0,
            bulk: 5.0e4,
            density: 1.0e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c <= 0.0 || self.bulk <= 0.0 || self.density <= 0.0 {
            return Err(Error::invalid("material scales c, bulk, density must be positive"));
        }
        for (name, b) in [
            ("b_f", self.b_f),
            ("b_s", self.b_s),
            ("b_n", self.b_n),
            ("b_fs", self.b_fs),
            ("b_fn", self.b_fn),
            ("b_sn", self.b_sn),
        ] {
            if b < 0.0 || !b.is_finite() {
                return Err(Error::invalid(format!("exponent weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Deformation measures derived from the gradient F.
#[derive(Debug, Clone, Copy)]
pub struct Kinematics {
    pub f: Matrix3<f64>,
    pub j: f64,
    pub f_inv_t: Matrix3<f64>,
    /// Green-Lagrange strain E = (F^T F - I)/2.
    pub e: Matrix3<f64>,
}

/// Derived measures of a deformation gradient. Fails when J <= 0.
pub fn kinematics(f: &Matrix3<f64>) -> Result<Kinematics> {
    let j = f.determinant();
    if !(j > 0.0) || !j.is_finite() {
        return Err(Error::NonAdmissible);
    }
    let f_inv = f.try_inverse().ok_or(Error::NonAdmissible)?;
    let e = 0.5 * (f.transpose() * f - Matrix3::identity());
    Ok(Kinematics {
        f: *f,
        j,
        f_inv_t: f_inv.transpose(),
        e,
    })
}

/// Rotation matrix whose columns are the fiber triad.
#[inline]
fn triad_matrix(tr: &Triad) -> Matrix3<f64> {
    Matrix3::from_columns(&[tr.f, tr.s, tr.n])
}

/// Exponent weight matrix B in the fiber frame, paired entry-wise with
/// the rotated strain.
#[inline]
fn weight_matrix(m: &MaterialParams) -> Matrix3<f64> {
    Matrix3::new(
        m.b_f, m.b_fs, m.b_fn,
        m.b_fs, m.b_s, m.b_sn,
        m.b_fn, m.b_sn, m.b_n,
    )
}

fn exponent_q(m: &MaterialParams, e_fib: &Matrix3<f64>) -> f64 {
    let b = weight_matrix(m);
    let mut q = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            q += b[(r, c)] * e_fib[(r, c)] * e_fib[(r, c)];
        }
    }
    q
}

/// Strain energy density W(F), Pa.
pub fn strain_energy(m: &MaterialParams, tr: &Triad, f: &Matrix3<f64>) -> Result<f64> {
    let kin = kinematics(f)?;
    let r = triad_matrix(tr);
    let e_fib = r.transpose() * kin.e * r;
    let q = exponent_q(m, &e_fib);
    if q > Q_OVERFLOW {
        return Err(Error::NonAdmissible);
    }
    let j = kin.j;
    let w_vol = 0.5 * m.bulk * (j - 1.0) * j.ln();
    Ok(0.5 * m.c * (q.exp() - 1.0) + w_vol)
}

/// First Piola-Kirchhoff stress of the passive law, P = dW/dF.
pub fn first_piola(m: &MaterialParams, tr: &Triad, f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let kin = kinematics(f)?;
    let r = triad_matrix(tr);
    let e_fib = r.transpose() * kin.e * r;
    let q = exponent_q(m, &e_fib);
    if q > Q_OVERFLOW {
        return Err(Error::NonAdmissible);
    }
    let b = weight_matrix(m);
    // second Piola-Kirchhoff in the fiber frame: S~ = C exp(Q) (B o E~)
    let mut s_fib = Matrix3::zeros();
    for rr in 0..3 {
        for cc in 0..3 {
            s_fib[(rr, cc)] = m.c * q.exp() * b[(rr, cc)] * e_fib[(rr, cc)];
        }
    }
    let s = r * s_fib * r.transpose();
    let j = kin.j;
    // d/dJ of (K/2)(J-1)lnJ = (K/2)(lnJ + 1 - 1/J); dJ/dF = J F^{-T}
    let dwvol_dj = 0.5 * m.bulk * (j.ln() + 1.0 - 1.0 / j);
    Ok(f * s + dwvol_dj * j * kin.f_inv_t)
}

/// Active first Piola-Kirchhoff stress: tension along the deformed fiber.
pub fn active_piola(ta: f64, tr: &Triad, f: &Matrix3<f64>) -> Matrix3<f64> {
    let ff0 = f * tr.f;
    ta * ff0 * tr.f.transpose()
}

/// Directional derivative of the total stress (passive + active) along dF:
/// the consistent tangent contraction dP(F)[dF].
pub fn piola_tangent(
    m: &MaterialParams,
    tr: &Triad,
    ta: f64,
    f: &Matrix3<f64>,
    df: &Matrix3<f64>,
) -> Result<Matrix3<f64>> {
    let kin = kinematics(f)?;
    let r = triad_matrix(tr);
    let e_fib = r.transpose() * kin.e * r;
    let q = exponent_q(m, &e_fib);
    if q > Q_OVERFLOW {
        return Err(Error::NonAdmissible);
    }
    let b = weight_matrix(m);
    let eq = q.exp();

    let de = 0.5 * (df.transpose() * f + f.transpose() * df);
    let de_fib = r.transpose() * de * r;
    let mut dq = 0.0;
    let mut s_fib = Matrix3::zeros();
    let mut ds_fib = Matrix3::zeros();
    for rr in 0..3 {
        for cc in 0..3 {
            dq += 2.0 * b[(rr, cc)] * e_fib[(rr, cc)] * de_fib[(rr, cc)];
            s_fib[(rr, cc)] = m.c * eq * b[(rr, cc)] * e_fib[(rr, cc)];
            ds_fib[(rr, cc)] = m.c * eq * b[(rr, cc)] * de_fib[(rr, cc)];
        }
    }
    let s = r * s_fib * r.transpose();
    let ds = r * (ds_fib + dq * s_fib) * r.transpose();

    let j = kin.j;
    let fit = kin.f_inv_t;
    let dj = j * fit.dot(df);
    let dfit = -fit * df.transpose() * fit;
    let g = 0.5 * m.bulk * (j.ln() + 1.0 - 1.0 / j);
    let dg = 0.5 * m.bulk * (1.0 / j + 1.0 / (j * j));

    let dp_iso = df * s + f * ds;
    let dp_vol = (dg * j + g) * dj * fit + g * j * dfit;
    let dp_act = ta * df * tr.f * tr.f.transpose();
    Ok(dp_iso + dp_vol + dp_act)
}

/// Prescribed active tension over one heartbeat.
#[derive(Debug, Clone, Copy)]
pub struct ActiveTensionSpec {
    /// Peak tension, Pa.
    pub peak: f64,
    /// Heartbeat period, s.
    pub period: f64,
}

impl ActiveTensionSpec {
    pub fn baseline() -> Self {
        ActiveTensionSpec { peak: 5.0e4, period: 0.8 }
    }
}

/// Normalized twitch on one period of length 0.8: raised-cosine rise on
/// [0.05, 0.20], unit plateau on [0.20, 0.40], raised-cosine decay on
/// [0.40, 0.60], zero elsewhere. C^1 everywhere with an exact unit peak;
/// the sustained plateau mimics the systolic tension of the underlying
/// excitation-contraction dynamics.
fn twitch(tau: f64) -> f64 {
    const T0: f64 = 0.05;
    const TP0: f64 = 0.20;
    const TP1: f64 = 0.40;
    const T1: f64 = 0.60;
    if tau <= T0 || tau >= T1 {
        0.0
    } else if tau < TP0 {
        0.5 * (1.0 - (std::f64::consts::PI * (tau - T0) / (TP0 - T0)).cos())
    } else if tau <= TP1 {
        1.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (tau - TP1) / (T1 - TP1)).cos())
    }
}

/// Active tension at time t, periodic in the heartbeat period.
pub fn active_tension(spec: &ActiveTensionSpec, t: f64) -> f64 {
    let frac = (t / spec.period).rem_euclid(1.0);
    spec.peak * twitch(0.8 * frac)
}
