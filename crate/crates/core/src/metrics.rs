//! Error metrics between trajectories and clinical outputs: ejection
//! fraction and maximal pressure rise rate.

use nalgebra::DVector;

use crate::{Error, Result, MMHG};

/// Time-averaged absolute and relative L2 displacement errors: means
/// over the steps of ||u_h - u_r||_2 and of its normalization by
/// ||u_h||_2.
pub fn error_metrics(fom: &[DVector<f64>], rom: &[DVector<f64>]) -> Result<(f64, f64)> {
    if fom.len() != rom.len() || fom.is_empty() {
        return Err(Error::invalid("trajectories must share the time grid"));
    }
    let nt = fom.len() as f64;
    let mut abs = 0.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in fom.iter().zip(rom) {
        if a.len() != b.len() {
            return Err(Error::invalid("trajectory states differ in dimension"));
        }
        let e = (a - b).norm();
        abs += e;
        num += e;
        den += a.norm();
    }
    Ok((abs / nt, num / den.max(f64::MIN_POSITIVE)))
}

/// Ejection fraction (EDV - ESV)/EDV with end-diastolic and end-systolic
/// volumes taken as the cycle extrema.
pub fn ejection_fraction(volumes: &[f64]) -> Result<f64> {
    let edv = volumes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let esv = volumes.iter().copied().fold(f64::INFINITY, f64::min);
    if volumes.is_empty() || edv <= 0.0 {
        return Err(Error::invalid("ejection fraction needs a positive end-diastolic volume"));
    }
    Ok((edv - esv) / edv)
}

/// Maximal discrete pressure rise rate max_n (p^n - p^{n-1}) / dt.
pub fn dpdt_max(pressures: &[f64], dt: f64) -> Result<f64> {
    if pressures.len() < 2 || dt <= 0.0 {
        return Err(Error::invalid("dP/dt needs at least two samples and dt > 0"));
    }
    Ok(pressures
        .windows(2)
        .map(|w| (w[1] - w[0]) / dt)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// One row of the sweep output table.
#[derive(Debug, Clone)]
pub struct OutputRecord {
    pub mu: [f64; 4],
    pub ef: f64,
    /// Pa/s internally; written as mmHg/s.
    pub dpdt_max: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub status: String,
}

/// Fixed, versioned header of the sweep CSV.
pub const CSV_HEADER: &str = "mu_1,mu_2,mu_3,mu_4,EF,dpdt_max_mmHg_s,eps_abs,eps_rel,status";

impl OutputRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.10e},{:.10e},{:.10e},{:.10e},{:.6},{:.4},{:.6e},{:.6e},{}",
            self.mu[0],
            self.mu[1],
            self.mu[2],
            self.mu[3],
            self.ef,
            self.dpdt_max / MMHG,
            self.eps_abs,
            self.eps_rel,
            self.status
        )
    }
}
