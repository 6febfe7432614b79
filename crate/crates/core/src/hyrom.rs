//! Surrogate-driven online solver: reduced Newton iterations whose
//! operators come from trained networks (or a recorded-operator replay)
//! instead of finite element assembly. The cycle driver, phase machine
//! and windkessel are shared with the full-order solver; only the step
//! operators differ.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::circulation::CirculationParams;
use crate::constitutive::ActiveTensionSpec;
use crate::dnn::{
    train_operator_map, vec_cols, vec_cols_inverse, InputScaler, OperatorMapNet, TrainConfig,
    TrainStats, LATENT_DIM,
};
use crate::fem::FemModel;
use crate::fom::{run_cycle_partial, CycleStepper, CycleTrace, HeartbeatSettings};
use crate::rom::{OperatorSnapshots, ReducedBasis};
use crate::{Error, Result};

/// The four trained operator maps with their scalers and the iteration
/// range seen in training.
#[derive(Debug, Clone)]
pub struct SurrogateNets {
    /// Reduced dimension N.
    pub n: usize,
    /// Largest Newton iteration index seen during recording.
    pub k_max: usize,
    pub rho_net: OperatorMapNet,
    pub iota_net: OperatorMapNet,
    pub pi_net: OperatorMapNet,
    pub upsilon_net: OperatorMapNet,
    pub input: InputScaler,
    /// Relative drop of the predicted residual norm that ends a step.
    pub eps_nwt: f64,
    /// Absolute residual-norm floor below which a step counts as
    /// converged regardless of the relative drop.
    pub rho_floor: f64,
}

/// Per-map statistics of one training session.
#[derive(Debug, Clone)]
pub struct SurrogateTrainStats {
    pub rho: TrainStats,
    pub iota: TrainStats,
    pub pi: TrainStats,
    pub upsilon: TrainStats,
}

/// Train the four operator maps from recorded reduced-operator data, one
/// `OperatorSnapshots` per recording run.
pub fn train_surrogates(
    runs: &[OperatorSnapshots],
    mu_lo: [f64; 4],
    mu_hi: [f64; 4],
    period: f64,
    config: &TrainConfig,
) -> Result<(SurrogateNets, SurrogateTrainStats)> {
    let n = runs
        .first()
        .ok_or_else(|| Error::invalid("no recording runs to train on"))?
        .n;
    if runs.iter().any(|r| r.n != n) {
        return Err(Error::invalid("recording runs disagree on the reduced dimension"));
    }
    let k_max = runs
        .iter()
        .flat_map(|r| r.rho_samples.iter().map(|s| s.k))
        .max()
        .unwrap_or(0);
    let input = InputScaler { mu_lo, mu_hi, period, k_max };

    let mut rho_x = Vec::new();
    let mut rho_y = Vec::new();
    let mut rho_runs = Vec::new();
    let mut iota_y = Vec::new();
    let mut pi_x = Vec::new();
    let mut pi_y = Vec::new();
    let mut pi_runs = Vec::new();
    let mut ups_y = Vec::new();
    let mut norms = Vec::new();
    for (rid, run) in runs.iter().enumerate() {
        for (i, s) in run.rho_samples.iter().enumerate() {
            let (x, _) = input.normalize(s.mu, s.t, s.k);
            rho_x.push(x);
            rho_y.push(rho_target(&run.rho[i], s.p, &run.rho_q[i]));
            iota_y.push(vec_cols(&run.iota[i]));
            rho_runs.push(rid);
            norms.push(run.rho[i].norm());
        }
        for (i, s) in run.pi_samples.iter().enumerate() {
            let (x, _) = input.normalize(s.mu, s.t, s.k);
            pi_x.push(x);
            pi_y.push(run.pi[i].clone());
            ups_y.push(run.upsilon[i].clone());
            pi_runs.push(rid);
        }
    }
    if rho_x.is_empty() || pi_x.is_empty() {
        return Err(Error::invalid("recordings contain no operator samples"));
    }

    // floor: low quantile of recorded residual norms, the scale at which
    // the offline solver stopped iterating
    norms.sort_by(|a, b| a.total_cmp(b));
    let rho_floor = norms[norms.len() / 20];

    let (rho_net, st_rho) = train_operator_map(&rho_x, &rho_y, &rho_runs, config)?;
    let (iota_net, st_iota) = train_operator_map(&rho_x, &iota_y, &rho_runs, config)?;
    let (pi_net, st_pi) = train_operator_map(&pi_x, &pi_y, &pi_runs, config)?;
    let (upsilon_net, st_ups) = train_operator_map(&pi_x, &ups_y, &pi_runs, config)?;

    Ok((
        SurrogateNets {
            n,
            k_max,
            rho_net,
            iota_net,
            pi_net,
            upsilon_net,
            input,
            // looser than the offline Newton tolerance: one predicted
            // update typically drops the norm 1e3-fold, while marginal
            // first-step predictions hover just above 1e-2
            eps_nwt: 3e-2,
            rho_floor,
        },
        SurrogateTrainStats { rho: st_rho, iota: st_iota, pi: st_pi, upsilon: st_ups },
    ))
}

/// Training target of the residual map: unit direction, log norm, the
/// pressure and the reduced iterate the residual was assembled at.
/// Residual norms decay over many decades within one Newton iteration,
/// which a min-max scaled regression cannot resolve directly; in log
/// space the stopping rule stays meaningful. The reference pressure and
/// iterate let the online solver correct the prediction for its own
/// state through the tangent and the coupling vector.
fn rho_target(rho: &DVector<f64>, p: f64, q: &DVector<f64>) -> DVector<f64> {
    let n = rho.len();
    let nrm = rho.norm();
    let mut y = DVector::zeros(2 * n + 2);
    if nrm > 0.0 {
        y.rows_mut(0, n).copy_from(&(rho / nrm));
    }
    y[n] = nrm.max(1e-30).ln();
    y[n + 1] = p;
    y.rows_mut(n + 2, n).copy_from(q);
    y
}

/// Inverse of `rho_target` for a network prediction: the residual with
/// the predicted direction rescaled to the predicted norm, plus the
/// reference pressure and iterate.
fn rho_from_prediction(y: &DVector<f64>, n: usize) -> Result<(DVector<f64>, f64, DVector<f64>)> {
    if y.len() != 2 * n + 2 {
        return Err(Error::invalid("residual prediction length disagrees with N"));
    }
    let dir = y.rows(0, n).into_owned();
    let dn = dir.norm();
    let p_ref = y[n + 1];
    let q_ref = y.rows(n + 2, n).into_owned();
    if dn == 0.0 {
        return Ok((DVector::zeros(n), p_ref, q_ref));
    }
    Ok((dir * (y[n].exp() / dn), p_ref, q_ref))
}

/// Provider of reduced Newton operators indexed by (parameters, time,
/// iteration). `rho` returning `None` means the step is converged at
/// iterate k, which lets a replay reproduce recorded iteration counts
/// exactly.
pub trait OperatorSource {
    fn n(&self) -> usize;
    /// Residual at iterate k with the online iterate `q` and pressure
    /// `p`; predictions are corrected to first order for the gap between
    /// the online state and the state the training data was assembled at.
    fn rho(
        &mut self,
        mu: [f64; 4],
        t: f64,
        k: usize,
        q: &DVector<f64>,
        p: f64,
    ) -> Result<Option<DVector<f64>>>;
    fn iota(&mut self, mu: [f64; 4], t: f64, k: usize) -> Result<DMatrix<f64>>;
    fn pi(&mut self, mu: [f64; 4], t: f64, k: usize) -> Result<DVector<f64>>;
    /// Constraint data of length N + 1: dV/du projection then the volume
    /// residual.
    fn upsilon(&mut self, mu: [f64; 4], t: f64, k: usize) -> Result<DVector<f64>>;
    /// Whether a predicted residual norm ends the step's iteration.
    fn converged(&self, rho_norm: f64, rho0_norm: f64) -> bool;
    /// Iteration cap per step.
    fn cap(&self) -> usize;
}

/// Replay of recorded Galerkin ROM operators, keyed by (time, iteration).
pub struct ReplaySource<'a> {
    ops: &'a OperatorSnapshots,
    rho_index: HashMap<(u64, usize), usize>,
    pi_index: HashMap<(u64, usize), usize>,
}

impl<'a> ReplaySource<'a> {
    pub fn new(ops: &'a OperatorSnapshots) -> Self {
        let rho_index = ops
            .rho_samples
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.t.to_bits(), s.k), i))
            .collect();
        let pi_index = ops
            .pi_samples
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.t.to_bits(), s.k), i))
            .collect();
        ReplaySource { ops, rho_index, pi_index }
    }

    fn rho_at(&self, t: f64, k: usize) -> Option<usize> {
        self.rho_index.get(&(t.to_bits(), k)).copied()
    }
}

impl OperatorSource for ReplaySource<'_> {
    fn n(&self) -> usize {
        self.ops.n
    }

    fn rho(
        &mut self,
        _mu: [f64; 4],
        t: f64,
        k: usize,
        _q: &DVector<f64>,
        _p: f64,
    ) -> Result<Option<DVector<f64>>> {
        Ok(self.rho_at(t, k).map(|i| self.ops.rho[i].clone()))
    }

    fn iota(&mut self, _mu: [f64; 4], t: f64, k: usize) -> Result<DMatrix<f64>> {
        let i = self
            .rho_at(t, k)
            .ok_or_else(|| Error::invalid(format!("no recorded tangent at t = {t}, k = {k}")))?;
        Ok(self.ops.iota[i].clone())
    }

    fn pi(&mut self, _mu: [f64; 4], t: f64, k: usize) -> Result<DVector<f64>> {
        let i = self
            .pi_index
            .get(&(t.to_bits(), k))
            .ok_or_else(|| Error::invalid(format!("no recorded coupling at t = {t}, k = {k}")))?;
        Ok(self.ops.pi[*i].clone())
    }

    fn upsilon(&mut self, _mu: [f64; 4], t: f64, k: usize) -> Result<DVector<f64>> {
        let i = self
            .pi_index
            .get(&(t.to_bits(), k))
            .ok_or_else(|| Error::invalid(format!("no recorded constraint at t = {t}, k = {k}")))?;
        Ok(self.ops.upsilon[*i].clone())
    }

    fn converged(&self, _rho_norm: f64, _rho0_norm: f64) -> bool {
        false
    }

    fn cap(&self) -> usize {
        usize::MAX
    }
}

/// Network inference source with clamp/extrapolation warnings and
/// operator-evaluation cost counters.
pub struct NetSource<'a> {
    nets: &'a SurrogateNets,
    pub warnings: Vec<String>,
    warned_clamp: bool,
    warned_extrapolation: bool,
    /// Operator evaluations performed (one per rho/iota/pi/upsilon call).
    pub op_evals: usize,
    /// Wall time spent inside operator evaluations.
    pub op_time: Duration,
}

impl<'a> NetSource<'a> {
    pub fn new(nets: &'a SurrogateNets) -> Self {
        NetSource {
            nets,
            warnings: Vec::new(),
            warned_clamp: false,
            warned_extrapolation: false,
            op_evals: 0,
            op_time: Duration::ZERO,
        }
    }

    fn input(&mut self, mu: [f64; 4], t: f64, k: usize) -> [f64; LATENT_DIM] {
        let (x, clamped) = self.nets.input.normalize(mu, t, k);
        if clamped && !self.warned_clamp {
            self.warned_clamp = true;
            self.warnings.push(format!(
                "iteration index {k} beyond training range {}, clamped",
                self.nets.k_max
            ));
        }
        if !self.warned_extrapolation && x[..4].iter().any(|v| !(0.0..=1.0).contains(v)) {
            self.warned_extrapolation = true;
            self.warnings
                .push(format!("parameters {mu:?} outside the training box, extrapolating"));
        }
        x
    }

    fn timed<T>(&mut self, f: impl FnOnce(&SurrogateNets) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self.nets);
        self.op_time += start.elapsed();
        self.op_evals += 1;
        out
    }
}

impl OperatorSource for NetSource<'_> {
    fn n(&self) -> usize {
        self.nets.n
    }

    fn rho(
        &mut self,
        mu: [f64; 4],
        t: f64,
        k: usize,
        q: &DVector<f64>,
        p: f64,
    ) -> Result<Option<DVector<f64>>> {
        let x = self.input(mu, t, k);
        let n = self.nets.n;
        self.timed(|nets| {
            let (rho, p_ref, q_ref) = rho_from_prediction(&nets.rho_net.predict(&x)?, n)?;
            if k > 0 {
                // the first corrected update already absorbed the state
                // gap dz: iota (-iota^-1 (iota, pi) dz) + (iota, pi) dz
                // = 0, so later iterates match the recorded residuals
                return Ok(Some(rho));
            }
            let pi = nets.pi_net.predict(&x)?;
            let iota = vec_cols_inverse(&nets.iota_net.predict(&x)?, n)?;
            Ok(Some(rho + pi * (p - p_ref) + iota * (q - q_ref)))
        })
    }

    fn iota(&mut self, mu: [f64; 4], t: f64, k: usize) -> Result<DMatrix<f64>> {
        let x = self.input(mu, t, k);
        let n = self.nets.n;
        self.timed(|nets| vec_cols_inverse(&nets.iota_net.predict(&x)?, n))
    }

    fn pi(&mut self, mu: [f64; 4], t: f64, k: usize) -> Result<DVector<f64>> {
        let x = self.input(mu, t, k);
        self.timed(|nets| nets.pi_net.predict(&x))
    }

    fn upsilon(&mut self, mu: [f64; 4], t: f64, k: usize) -> Result<DVector<f64>> {
        let x = self.input(mu, t, k);
        self.timed(|nets| nets.upsilon_net.predict(&x))
    }

    fn converged(&self, rho_norm: f64, rho0_norm: f64) -> bool {
        rho_norm < self.nets.eps_nwt * rho0_norm.max(f64::MIN_POSITIVE)
            || rho_norm < self.nets.rho_floor
    }

    fn cap(&self) -> usize {
        (2 * self.nets.k_max).max(10)
    }
}

/// One segregated reduced Newton update: iota du = -rho.
pub fn newton_step_segregated(iota: &DMatrix<f64>, rho: &DVector<f64>) -> Result<DVector<f64>> {
    iota.clone()
        .lu()
        .solve(&(-rho))
        .ok_or_else(|| Error::Singular("predicted reduced tangent not invertible".into()))
}

/// One constrained reduced Newton update via the Schur complement of the
/// bordered system [[iota, pi], [g', 0]] (du, dp) = (-rho, -rvol), with
/// upsilon = [g; rvol].
pub fn newton_step_saddle(
    iota: &DMatrix<f64>,
    rho: &DVector<f64>,
    pi: &DVector<f64>,
    upsilon: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let n = iota.nrows();
    if rho.len() != n || pi.len() != n || upsilon.len() != n + 1 {
        return Err(Error::invalid("operator shapes disagree with the reduced dimension"));
    }
    let g = upsilon.rows(0, n);
    let rvol = upsilon[n];
    let lu = iota.clone().lu();
    let w1 = lu
        .solve(rho)
        .ok_or_else(|| Error::Singular("predicted reduced tangent not invertible".into()))?;
    let w2 = lu
        .solve(pi)
        .ok_or_else(|| Error::Singular("predicted reduced tangent not invertible".into()))?;
    let s = g.dot(&w2);
    if s == 0.0 || !s.is_finite() {
        return Err(Error::Singular("zero Schur scalar in reduced saddle step".into()));
    }
    let dp = (rvol - g.dot(&w1)) / s;
    let dq = -&w1 - dp * w2;
    Ok((dq, dp))
}

/// Cavity volume of a reduced state through the basis rows that the
/// volume functional actually reads, so the cost scales with the surface.
pub struct ReducedVolume {
    dofs: Vec<usize>,
    v_rows: DMatrix<f64>,
    n_dofs: usize,
}

impl ReducedVolume {
    pub fn new(model: &FemModel, v: &DMatrix<f64>) -> Self {
        let dofs = model.volume_support_dofs();
        let v_rows = DMatrix::from_fn(dofs.len(), v.ncols(), |i, j| v[(dofs[i], j)]);
        ReducedVolume { dofs, v_rows, n_dofs: v.nrows() }
    }

    pub fn volume(&self, model: &FemModel, q: &DVector<f64>) -> Result<f64> {
        let restricted = &self.v_rows * q;
        let mut u = DVector::zeros(self.n_dofs);
        for (i, &d) in self.dofs.iter().enumerate() {
            u[d] = restricted[i];
        }
        model.cavity_volume(&u)
    }
}

/// Reduced stepper whose operators come from an `OperatorSource`. The
/// initial guess of every step is the previous committed state, matching
/// the recording convention of the offline ROM.
pub struct HyromStepper<'a, S: OperatorSource> {
    model: &'a FemModel,
    source: &'a mut S,
    vol: ReducedVolume,
    mu: [f64; 4],
    q: DVector<f64>,
    p: f64,
    pub reduced_states: Vec<DVector<f64>>,
}

impl<'a, S: OperatorSource> HyromStepper<'a, S> {
    pub fn new(
        model: &'a FemModel,
        v: &DMatrix<f64>,
        mu: [f64; 4],
        u0: &DVector<f64>,
        p0: f64,
        source: &'a mut S,
    ) -> Self {
        let q0 = v.transpose() * u0;
        HyromStepper {
            model,
            source,
            vol: ReducedVolume::new(model, v),
            mu,
            q: q0.clone(),
            p: p0,
            reduced_states: vec![q0],
        }
    }

    fn commit(&mut self, q: DVector<f64>, p: f64) {
        self.reduced_states.push(q.clone());
        self.q = q;
        self.p = p;
    }

    /// Shared iteration driver; `update` applies one solve and returns
    /// the pressure increment. Associated function so callers can keep
    /// disjoint borrows of the stepper's fields inside `update`.
    fn iterate(
        source: &mut S,
        mu: [f64; 4],
        t: f64,
        mut q: DVector<f64>,
        mut p: f64,
        mut update: impl FnMut(&mut S, &mut DVector<f64>, &DVector<f64>, usize) -> Result<f64>,
    ) -> Result<(DVector<f64>, f64, usize)> {
        let rho0 = match source.rho(mu, t, 0, &q, p)? {
            None => return Ok((q, p, 0)),
            Some(r) => r,
        };
        let n0 = rho0.norm();
        let mut rho = rho0;
        let cap = source.cap();
        let mut k = 0;
        loop {
            p += update(source, &mut q, &rho, k)?;
            k += 1;
            match source.rho(mu, t, k, &q, p)? {
                None => break,
                Some(r) => {
                    if source.converged(r.norm(), n0) {
                        break;
                    }
                    if k >= cap {
                        return Err(Error::Convergence {
                            step: 0,
                            iters: k,
                            ratio: r.norm() / n0.max(f64::MIN_POSITIVE),
                        });
                    }
                    rho = r;
                }
            }
        }
        Ok((q, p, k))
    }
}

impl<S: OperatorSource> CycleStepper for HyromStepper<'_, S> {
    fn volume(&self) -> Result<f64> {
        self.vol.volume(self.model, &self.q)
    }

    fn pressure_step(&mut self, t: f64, p: f64, _ta: f64) -> Result<usize> {
        let mu = self.mu;
        // the prescribed pressure is the load the residual sees
        let (q, _, iters) =
            Self::iterate(self.source, mu, t, self.q.clone(), p, |source, q, rho, k| {
                let iota = source.iota(mu, t, k)?;
                let dq = newton_step_segregated(&iota, rho)?;
                *q += dq;
                Ok(0.0)
            })?;
        // prescribed pressure replaces whatever the update produced
        self.commit(q, p);
        Ok(iters)
    }

    fn volume_step(&mut self, t: f64, v_target: f64, _ta: f64) -> Result<(f64, usize)> {
        let mu = self.mu;
        let model = self.model;
        let vol = &self.vol;
        let (q, p, iters) =
            Self::iterate(self.source, mu, t, self.q.clone(), self.p, |source, q, rho, k| {
                let iota = source.iota(mu, t, k)?;
                let pi = source.pi(mu, t, k)?;
                let mut upsilon = source.upsilon(mu, t, k)?;
                // constraint residual from the actual iterate, not the
                // recorded trajectory: the volume is evaluated online
                // anyway and this closes the only feedback loop between
                // the predicted updates and the circulation state
                let n = upsilon.len() - 1;
                upsilon[n] = vol.volume(model, q)? - v_target;
                let (dq, dp) = newton_step_saddle(&iota, rho, &pi, &upsilon)?;
                *q += dq;
                Ok(dp)
            })?;
        self.commit(q, p);
        Ok((p, iters))
    }
}

/// Outcome of one surrogate-driven heartbeat. A step that exhausts the
/// iteration cap flags the run instead of erroring; the trace up to the
/// failed step is retained.
#[derive(Debug, Clone)]
pub struct HyromOutput {
    pub trace: CycleTrace,
    pub reduced: Vec<DVector<f64>>,
    /// Step index of the first non-converged step, if any.
    pub failed: Option<usize>,
}

/// One heartbeat of the online solver on top of any operator source.
pub fn hyrom_run<S: OperatorSource>(
    model: &FemModel,
    circ: &CirculationParams,
    act: &ActiveTensionSpec,
    basis: &ReducedBasis,
    mu: [f64; 4],
    u0: &DVector<f64>,
    source: &mut S,
    settings: &HeartbeatSettings,
) -> Result<HyromOutput> {
    if basis.n() != source.n() {
        return Err(Error::invalid("basis and operator source disagree on N"));
    }
    let mut stepper = HyromStepper::new(model, &basis.v, mu, u0, circ.p_ed, source);
    let (trace, failure) = run_cycle_partial(&mut stepper, circ, act, settings, circ.p_ed)?;
    let reduced = std::mem::take(&mut stepper.reduced_states);
    match failure {
        None => Ok(HyromOutput { trace, reduced, failed: None }),
        Some(Error::Convergence { step, .. }) => {
            Ok(HyromOutput { trace, reduced, failed: Some(step) })
        }
        Some(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::MaterialParams;
    use crate::fem::BoundaryParams;
    use crate::fom::{run_heartbeat, NewtonSettings};
    use crate::geometry::{assign_fibers, build_ellipsoid_mesh, IschemicMask, MeshSpec};
    use crate::linalg::thin_qr_q;
    use crate::rom::{pod, rom_run, RomOutput, SnapshotMatrix, SnapshotMeta};
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn tiny_model() -> FemModel {
        let spec = MeshSpec {
            resolution: (2, 2, 2),
            ..MeshSpec::desk_default()
        };
        let mesh = build_ellipsoid_mesh(&spec).unwrap();
        let fibers = assign_fibers(&mesh, 60.0, -60.0).unwrap();
        let mask = IschemicMask::none(&mesh);
        FemModel::new(
            mesh,
            fibers,
            MaterialParams::baseline(),
            BoundaryParams::baseline(),
            mask,
        )
        .unwrap()
    }

    fn short_settings() -> HeartbeatSettings {
        HeartbeatSettings {
            n_steps: 160,
            ..HeartbeatSettings::baseline()
        }
    }

    fn mu_baseline() -> [f64; 4] {
        [5.0e4, 3.5e7, 5.0e4, 0.0]
    }

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn segregated_step_small_for_small_residual() {
        let n = 5;
        let iota = spd(n, 1);
        let rho = DVector::from_element(n, 1e-9);
        let dq = newton_step_segregated(&iota, &rho).unwrap();
        // ||dq|| <= ||iota^-1|| ||rho||
        let inv_norm = iota
            .clone()
            .try_inverse()
            .unwrap()
            .norm();
        assert!(dq.norm() <= inv_norm * rho.norm() * (1.0 + 1e-12));
        assert!(newton_step_segregated(&iota, &DVector::zeros(n)).unwrap().norm() == 0.0);
    }

    #[test]
    fn saddle_step_zero_at_converged_point() {
        let n = 4;
        let iota = spd(n, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pi = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let mut upsilon = DVector::from_fn(n + 1, |_, _| rng.gen_range(-1.0..1.0));
        upsilon[n] = 0.0; // rvol = 0
        let (dq, dp) = newton_step_saddle(&iota, &DVector::zeros(n), &pi, &upsilon).unwrap();
        assert!(dq.norm() < 1e-14 && dp.abs() < 1e-14);
    }

    #[test]
    fn saddle_schur_matches_dense_bordered_solve() {
        let n = 7;
        let iota = spd(n, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let pi = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let upsilon = DVector::from_fn(n + 1, |_, _| rng.gen_range(-1.0..1.0));
        let (dq, dp) = newton_step_saddle(&iota, &rho, &pi, &upsilon).unwrap();

        let mut a = DMatrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(&iota);
        a.view_mut((0, n), (n, 1)).copy_from(&pi);
        a.view_mut((n, 0), (1, n))
            .copy_from(&upsilon.rows(0, n).transpose());
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-&rho));
        rhs[n] = -upsilon[n];
        let sol = a.lu().solve(&rhs).unwrap();
        let scale = sol.amax().max(1.0);
        assert!((&dq - sol.rows(0, n)).amax() < 1e-12 * scale);
        assert!((dp - sol[n]).abs() < 1e-12 * scale);
    }

    #[test]
    fn saddle_rejects_singular_tangent_and_schur() {
        let n = 3;
        let zero = DMatrix::zeros(n, n);
        let rho = DVector::from_element(n, 1.0);
        let pi = DVector::from_element(n, 1.0);
        let ups = DVector::from_element(n + 1, 1.0);
        assert!(matches!(
            newton_step_saddle(&zero, &rho, &pi, &ups),
            Err(Error::Singular(_))
        ));
        // invertible tangent but g orthogonal to iota^-1 pi
        let iota = DMatrix::identity(n, n);
        let pi2 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let mut ups2 = DVector::zeros(n + 1);
        ups2[1] = 1.0; // g = e2, g . pi2 = 0
        ups2[n] = 0.5;
        assert!(matches!(
            newton_step_saddle(&iota, &rho, &pi2, &ups2),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn restricted_volume_matches_full_lift() {
        let model = tiny_model();
        let nd = model.n_dofs();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = thin_qr_q(&DMatrix::from_fn(nd, 5, |_, _| rng.gen_range(-1.0..1.0)));
        let rv = ReducedVolume::new(&model, &v);
        for trial in 0..3 {
            let q = DVector::from_fn(5, |i, _| 1e-4 * ((i + trial) as f64 + 0.5));
            let full = model.cavity_volume(&(&v * &q)).unwrap();
            let restricted = rv.volume(&model, &q).unwrap();
            assert!(
                (full - restricted).abs() < 1e-15 * full.abs().max(1e-300),
                "trial {trial}: {full} vs {restricted}"
            );
        }
    }

    fn reference_rom() -> (FemModel, RomOutput, ReducedBasis, DVector<f64>) {
        let model = tiny_model();
        let newton = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let fom = run_heartbeat(&model, &circ, &act, &newton, &settings).unwrap();
        let mut s = SnapshotMatrix::new(model.n_dofs());
        for (j, u) in fom.displacements.iter().enumerate() {
            s.push_column(u, SnapshotMeta { sample: 0, time: j as f64 }).unwrap();
        }
        let basis = pod(&s, 1e-6).unwrap();
        let u0 = fom.displacements[0].clone();
        let rom = rom_run(
            &model,
            &circ,
            &act,
            &basis,
            mu_baseline(),
            &u0,
            &newton,
            &settings,
            true,
        )
        .unwrap();
        (model, rom, basis, u0)
    }

    #[test]
    fn replay_reproduces_the_galerkin_rom() {
        let (model, rom, basis, u0) = reference_rom();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let ops = &rom.recording.as_ref().unwrap().ops;

        let mut source = ReplaySource::new(ops);
        let out = hyrom_run(
            &model,
            &circ,
            &act,
            &basis,
            mu_baseline(),
            &u0,
            &mut source,
            &settings,
        )
        .unwrap();
        assert!(out.failed.is_none());

        assert_eq!(out.reduced.len(), rom.reduced.len());
        let q_scale = rom
            .reduced
            .iter()
            .map(|q| q.amax())
            .fold(0.0, f64::max);
        let mut worst = 0.0f64;
        for (a, b) in out.reduced.iter().zip(&rom.reduced) {
            worst = worst.max((a - b).amax());
        }
        assert!(
            worst < 1e-12 * q_scale,
            "reduced trajectories differ by {worst:.3e} (scale {q_scale:.3e})"
        );
        // identical iteration counts and traces
        assert_eq!(out.trace.newton_iters, rom.trace.newton_iters);
        let p_scale = rom.trace.pressures.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        for (a, b) in out.trace.pressures.iter().zip(&rom.trace.pressures) {
            assert!((a - b).abs() < 1e-12 * p_scale);
        }
        for (a, b) in out.trace.volumes.iter().zip(&rom.trace.volumes) {
            assert!((a - b).abs() < 1e-12 * b.abs());
        }
        assert_eq!(out.trace.phases, rom.trace.phases);
    }

    #[test]
    fn replay_is_deterministic() {
        let (model, rom, basis, u0) = reference_rom();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let ops = &rom.recording.as_ref().unwrap().ops;

        let run = |seed_ignored: u64| {
            let _ = seed_ignored;
            let mut source = ReplaySource::new(ops);
            hyrom_run(
                &model,
                &circ,
                &act,
                &basis,
                mu_baseline(),
                &u0,
                &mut source,
                &settings,
            )
            .unwrap()
        };
        let a = run(0);
        let b = run(1);
        for (x, y) in a.reduced.iter().zip(&b.reduced) {
            assert_eq!(x, y);
        }
        assert_eq!(a.trace.pressures, b.trace.pressures);
    }

    /// Source whose predicted residual never drops: the run must flag
    /// the first step instead of looping.
    struct StallingSource {
        n: usize,
    }

    impl OperatorSource for StallingSource {
        fn n(&self) -> usize {
            self.n
        }
        fn rho(
            &mut self,
            _mu: [f64; 4],
            _t: f64,
            _k: usize,
            _q: &DVector<f64>,
            _p: f64,
        ) -> Result<Option<DVector<f64>>> {
            Ok(Some(DVector::from_element(self.n, 1.0)))
        }
        fn iota(&mut self, _mu: [f64; 4], _t: f64, _k: usize) -> Result<DMatrix<f64>> {
            Ok(DMatrix::identity(self.n, self.n))
        }
        fn pi(&mut self, _mu: [f64; 4], _t: f64, _k: usize) -> Result<DVector<f64>> {
            Ok(DVector::from_element(self.n, 1.0))
        }
        fn upsilon(&mut self, _mu: [f64; 4], _t: f64, _k: usize) -> Result<DVector<f64>> {
            let mut u = DVector::from_element(self.n + 1, 1.0);
            u[self.n] = 0.0;
            Ok(u)
        }
        fn converged(&self, _rho_norm: f64, _rho0_norm: f64) -> bool {
            false
        }
        fn cap(&self) -> usize {
            10
        }
    }

    #[test]
    fn stalled_iteration_flags_the_run_with_partial_trace() {
        let (model, _, basis, u0) = reference_rom();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let mut source = StallingSource { n: basis.n() };
        let out = hyrom_run(
            &model,
            &circ,
            &act,
            &basis,
            mu_baseline(),
            &u0,
            &mut source,
            &settings,
        )
        .unwrap();
        assert_eq!(out.failed, Some(1), "first step exhausts the cap");
        assert_eq!(out.trace.times.len(), 1, "only the initial state retained");
    }

    #[test]
    fn trained_surrogates_run_a_heartbeat() {
        let (model, rom, basis, u0) = reference_rom();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let ops = rom.recording.as_ref().unwrap().ops.clone();

        // single-run training data: a plumbing smoke test, not an
        // accuracy claim (that lives in the acceptance suite)
        let config = TrainConfig {
            epochs: 60,
            patience: 60,
            ..TrainConfig::default()
        };
        let mu = mu_baseline();
        let lo = [2.5e4, 2.5e7, 4.5e4, 0.0];
        let hi = [7.5e4, 4.5e7, 6.0e4, 20.0e-3];
        let (nets, stats) =
            train_surrogates(&[ops], lo, hi, circ.period, &config).unwrap();
        assert!(!stats.rho.diverged && !stats.iota.diverged);
        assert_eq!(nets.n, basis.n());
        assert!(nets.rho_floor > 0.0);

        let mut source = NetSource::new(&nets);
        let out = hyrom_run(
            &model,
            &circ,
            &act,
            &basis,
            mu,
            &u0,
            &mut source,
            &settings,
        )
        .unwrap();
        assert!(out.trace.volumes.iter().all(|v| v.is_finite()));
        assert!(source.op_evals > 0);
        // under-trained nets may or may not converge every step; the run
        // must end cleanly either way
        if let Some(step) = out.failed {
            assert!(step >= 1 && out.trace.times.len() == step);
        } else {
            assert_eq!(out.trace.times.len(), settings.n_steps + 1);
        }
    }

    #[test]
    fn net_source_warns_on_clamped_iteration_and_extrapolation() {
        let (_, rom, _, _) = reference_rom();
        let circ = CirculationParams::baseline();
        let ops = rom.recording.as_ref().unwrap().ops.clone();
        let config = TrainConfig { epochs: 2, patience: 2, ..TrainConfig::default() };
        let lo = [2.5e4, 2.5e7, 4.5e4, 0.0];
        let hi = [7.5e4, 4.5e7, 6.0e4, 20.0e-3];
        let (nets, _) = train_surrogates(&[ops], lo, hi, circ.period, &config).unwrap();

        let mut source = NetSource::new(&nets);
        let q0 = DVector::zeros(nets.n);
        source.rho(mu_baseline(), 0.1, nets.k_max + 5, &q0, 0.0).unwrap();
        assert!(source.warnings.iter().any(|w| w.contains("clamped")));
        let mut mu_out = mu_baseline();
        mu_out[0] = 1e6; // outside the training box
        source.rho(mu_out, 0.1, 0, &q0, 0.0).unwrap();
        assert!(source.warnings.iter().any(|w| w.contains("extrapolating")));
    }
}
