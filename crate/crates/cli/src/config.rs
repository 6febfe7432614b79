//! Structured run configuration: sectioned key/value text with explicit
//! clinical units (mmHg, ml) converted to SI at parse time.

use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use hyrom::circulation::CirculationParams;
use hyrom::constitutive::{ActiveTensionSpec, MaterialParams};
use hyrom::fem::{BoundaryParams, FemModel};
use hyrom::fom::{HeartbeatSettings, NewtonSettings};
use hyrom::geometry::{assign_fibers, build_ellipsoid_mesh, mark_ischemic, HexMesh, IschemicMask, MeshSpec};
use hyrom::{Error, Result, MMHG};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(default = "d_inner")]
    pub inner_semi_axes: [f64; 3],
    #[serde(default = "d_outer")]
    pub outer_semi_axes: [f64; 3],
    #[serde(default = "d_trunc")]
    pub truncation_height: f64,
    #[serde(default = "d_resolution")]
    pub resolution: [usize; 3],
    #[serde(default = "d_alpha_endo")]
    pub alpha_endo_deg: f64,
    #[serde(default = "d_alpha_epi")]
    pub alpha_epi_deg: f64,
    /// Center of the ischemic ball when the radius parameter is nonzero.
    #[serde(default = "d_ischemic_center")]
    pub ischemic_center: [f64; 3],
}

fn d_inner() -> [f64; 3] {
    [0.027, 0.027, 0.057]
}
fn d_outer() -> [f64; 3] {
    [0.04, 0.04, 0.07]
}
fn d_trunc() -> f64 {
    0.02
}
fn d_resolution() -> [usize; 3] {
    [6, 8, 4]
}
fn d_alpha_endo() -> f64 {
    60.0
}
fn d_alpha_epi() -> f64 {
    -60.0
}
fn d_ischemic_center() -> [f64; 3] {
    [0.0335, 0.0, 0.0]
}

impl Default for GeometrySection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirculationSection {
    #[serde(default = "d_compliance")]
    pub compliance: f64,
    #[serde(default = "d_p_ed")]
    pub p_ed_mmhg: f64,
    #[serde(default = "d_p_avo")]
    pub p_avo_mmhg: f64,
    #[serde(default = "d_p_mvo")]
    pub p_mvo_mmhg: f64,
    #[serde(default = "d_period")]
    pub period: f64,
}

fn d_compliance() -> f64 {
    4.5e-9
}
fn d_p_ed() -> f64 {
    15.0
}
fn d_p_avo() -> f64 {
    82.5
}
fn d_p_mvo() -> f64 {
    5.0
}
fn d_period() -> f64 {
    0.8
}

impl Default for CirculationSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_n_steps")]
    pub n_steps: usize,
    #[serde(default = "d_inflate")]
    pub inflate_steps: usize,
    #[serde(default = "d_tol_rel")]
    pub newton_tol_rel: f64,
    #[serde(default = "d_tol_vol")]
    pub newton_tol_vol: f64,
}

fn d_dt() -> f64 {
    2.5e-3
}
fn d_n_steps() -> usize {
    320
}
fn d_inflate() -> usize {
    10
}
fn d_tol_rel() -> f64 {
    1e-6
}
fn d_tol_vol() -> f64 {
    1e-9
}

impl Default for SimulationSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

/// Parameter box of mu = [bulk modulus K, peripheral resistance R_p,
/// peak active tension, ischemic radius r].
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSection {
    #[serde(default = "d_k_range")]
    pub bulk_range: [f64; 2],
    #[serde(default = "d_rp_range")]
    pub resistance_range: [f64; 2],
    #[serde(default = "d_ta_range")]
    pub tension_range: [f64; 2],
    #[serde(default = "d_r_range")]
    pub radius_range: [f64; 2],
}

fn d_k_range() -> [f64; 2] {
    [2.5e4, 7.5e4]
}
fn d_rp_range() -> [f64; 2] {
    [2.5e7, 4.5e7]
}
fn d_ta_range() -> [f64; 2] {
    [4.5e4, 6.0e4]
}
fn d_r_range() -> [f64; 2] {
    [0.2e-3, 20.0e-3]
}

impl Default for ParameterSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSection {
    /// FOM snapshot runs feeding the basis.
    #[serde(default = "d_n_snapshots")]
    pub n_snapshots: usize,
    /// ROM recording runs feeding the surrogate training.
    #[serde(default = "d_n_recordings")]
    pub n_recordings: usize,
    #[serde(default = "d_eps_pod")]
    pub eps_pod: f64,
    /// Optional fixed reduced dimension overriding the energy criterion.
    #[serde(default)]
    pub n_override: Option<usize>,
    /// Keep every stride-th recorded operator sample for training.
    #[serde(default = "d_train_stride")]
    pub train_stride: usize,
    /// Residual interpolation modes of the discrete-interpolation stage.
    #[serde(default = "d_m_deim")]
    pub m_deim: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Keep the bulk modulus fixed at its baseline during sweeps.
    #[serde(default)]
    pub fix_bulk: bool,
    /// Zero the ischemic radius during offline sampling (physiological
    /// scenario).
    #[serde(default = "d_true")]
    pub physiological: bool,
}

fn d_n_snapshots() -> usize {
    8
}
fn d_n_recordings() -> usize {
    20
}
fn d_eps_pod() -> f64 {
    1e-3
}
fn d_train_stride() -> usize {
    1
}
fn d_m_deim() -> usize {
    30
}
fn d_epochs() -> usize {
    200
}
fn d_patience() -> usize {
    50
}
fn d_true() -> bool {
    true
}

impl Default for OfflineSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub circulation: CirculationSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub parameters: ParameterSection,
    #[serde(default)]
    pub offline: OfflineSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        // mesh geometry is validated again by build_ellipsoid_mesh
        let g = &self.geometry;
        if g.resolution.iter().any(|&n| n < 2) {
            return Err(Error::invalid("config: resolution counts must be >= 2"));
        }
        // resistance is per-sample; validate with a placeholder value
        CirculationParams {
            resistance: 1.0,
            ..self.circulation_params()
        }
        .validate()?;
        for (name, [lo, hi]) in [
            ("bulk_range", self.parameters.bulk_range),
            ("resistance_range", self.parameters.resistance_range),
            ("tension_range", self.parameters.tension_range),
            ("radius_range", self.parameters.radius_range),
        ] {
            if !(lo.is_finite() && hi > lo) {
                return Err(Error::invalid(format!("config: {name} must be non-degenerate")));
            }
        }
        if self.simulation.dt <= 0.0 || self.simulation.n_steps == 0 {
            return Err(Error::invalid("config: simulation needs dt > 0, n_steps > 0"));
        }
        if self.offline.n_snapshots == 0 || self.offline.n_recordings == 0 {
            return Err(Error::invalid("config: offline run counts must be positive"));
        }
        if self.offline.train_stride == 0 {
            return Err(Error::invalid("config: train_stride must be at least 1"));
        }
        if !(0.0 < self.offline.eps_pod && self.offline.eps_pod < 1.0) {
            return Err(Error::invalid("config: eps_pod must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn mesh_spec(&self) -> MeshSpec {
        MeshSpec {
            inner_semi_axes: self.geometry.inner_semi_axes,
            outer_semi_axes: self.geometry.outer_semi_axes,
            truncation_height: self.geometry.truncation_height,
            resolution: (
                self.geometry.resolution[0],
                self.geometry.resolution[1],
                self.geometry.resolution[2],
            ),
        }
    }

    pub fn build_mesh(&self) -> Result<HexMesh> {
        build_ellipsoid_mesh(&self.mesh_spec())
    }

    pub fn circulation_params(&self) -> CirculationParams {
        CirculationParams {
            compliance: self.circulation.compliance,
            resistance: 0.0, // per-sample; filled from mu
            p_ed: self.circulation.p_ed_mmhg * MMHG,
            p_avo: self.circulation.p_avo_mmhg * MMHG,
            p_mvo: self.circulation.p_mvo_mmhg * MMHG,
            period: self.circulation.period,
        }
    }

    pub fn circulation_for(&self, mu: &[f64; 4]) -> CirculationParams {
        CirculationParams {
            resistance: mu[1],
            ..self.circulation_params()
        }
    }

    pub fn active_for(&self, mu: &[f64; 4]) -> ActiveTensionSpec {
        ActiveTensionSpec {
            peak: mu[2],
            period: self.circulation.period,
        }
    }

    pub fn heartbeat_settings(&self) -> HeartbeatSettings {
        HeartbeatSettings {
            dt: self.simulation.dt,
            n_steps: self.simulation.n_steps,
            inflate_steps: self.simulation.inflate_steps,
        }
    }

    pub fn newton_settings(&self) -> NewtonSettings {
        NewtonSettings {
            tol_rel: self.simulation.newton_tol_rel,
            tol_vol: self.simulation.newton_tol_vol,
            ..NewtonSettings::default()
        }
    }

    /// Sampling box in mu order [K, R_p, Ta, r].
    pub fn ranges(&self) -> [(f64, f64); 4] {
        let p = &self.parameters;
        let bulk = if self.offline.fix_bulk {
            let k = MaterialParams::baseline().bulk;
            (k, k)
        } else {
            (p.bulk_range[0], p.bulk_range[1])
        };
        let radius = if self.offline.physiological {
            (0.0, 0.0)
        } else {
            (p.radius_range[0], p.radius_range[1])
        };
        [
            bulk,
            (p.resistance_range[0], p.resistance_range[1]),
            (p.tension_range[0], p.tension_range[1]),
            radius,
        ]
    }

    /// Widest box the surrogate inputs are normalized over.
    pub fn normalization_box(&self) -> ([f64; 4], [f64; 4]) {
        let p = &self.parameters;
        (
            [p.bulk_range[0], p.resistance_range[0], p.tension_range[0], 0.0],
            [p.bulk_range[1], p.resistance_range[1], p.tension_range[1], p.radius_range[1]],
        )
    }

    /// Full-order model at one parameter point, reusing a prebuilt mesh.
    pub fn model_for(&self, mesh: &HexMesh, mu: &[f64; 4]) -> Result<FemModel> {
        let fibers = assign_fibers(mesh, self.geometry.alpha_endo_deg, self.geometry.alpha_epi_deg)?;
        let mask = if mu[3] > 0.0 {
            let c = self.geometry.ischemic_center;
            mark_ischemic(mesh, Vector3::new(c[0], c[1], c[2]), mu[3])?
        } else {
            IschemicMask::none(mesh)
        };
        let material = MaterialParams {
            bulk: mu[0],
            ..MaterialParams::baseline()
        };
        FemModel::new(mesh.clone(), fibers, material, BoundaryParams::baseline(), mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.geometry.resolution, [6, 8, 4]);
        assert_eq!(cfg.simulation.n_steps, 320);
        let circ = cfg.circulation_for(&[5e4, 3.5e7, 5e4, 0.0]);
        assert!((circ.p_ed - 15.0 * MMHG).abs() < 1e-9);
        assert_eq!(circ.resistance, 3.5e7);
    }

    #[test]
    fn mmhg_units_convert_at_parse_time() {
        let cfg = RunConfig::parse("[circulation]\np_avo_mmhg = 90.0\n").unwrap();
        let circ = cfg.circulation_params();
        assert!((circ.p_avo - 90.0 * MMHG).abs() < 1e-9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[circulation]\npressure = 1.0\n").is_err());
        assert!(RunConfig::parse("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        let cfg = RunConfig::parse("[parameters]\nbulk_range = [5e4, 5e4]\n");
        assert!(cfg.is_err());
    }

    #[test]
    fn physiological_box_pins_the_radius() {
        let cfg = RunConfig::parse("").unwrap();
        let r = cfg.ranges();
        assert_eq!(r[3], (0.0, 0.0));
        let cfg2 = RunConfig::parse("[offline]\nphysiological = false\n").unwrap();
        assert_eq!(cfg2.ranges()[3], (0.2e-3, 20.0e-3));
    }
}
