//! Projection-based model reduction: POD bases (deterministic and
//! randomized SVD), the Galerkin reduced cycle with per-iteration
//! operator recording, and DEIM hyper-reduction of the residual.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::circulation::CirculationParams;
use crate::constitutive::ActiveTensionSpec;
use crate::fem::{FemModel, FemState, TermFlags};
use crate::fom::{run_cycle, CycleStepper, CycleTrace, HeartbeatSettings, NewtonSettings};
use crate::geometry::HexMesh;
use crate::linalg::{thin_qr_q, thin_svd};
use crate::{Error, Result};

/// Column metadata of one snapshot: which run it came from and when.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotMeta {
    pub sample: usize,
    pub time: f64,
}

/// Dense column collection of full-order states or residuals.
#[derive(Debug, Clone)]
pub struct SnapshotMatrix {
    pub s: DMatrix<f64>,
    pub meta: Vec<SnapshotMeta>,
}

impl SnapshotMatrix {
    pub fn new(nrows: usize) -> Self {
        SnapshotMatrix { s: DMatrix::zeros(nrows, 0), meta: Vec::new() }
    }

    pub fn push_column(&mut self, col: &DVector<f64>, meta: SnapshotMeta) -> Result<()> {
        if col.len() != self.s.nrows() {
            return Err(Error::invalid("snapshot length does not match the matrix"));
        }
        if col.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("snapshot contains non-finite entries"));
        }
        let ncols = self.s.ncols();
        self.s = self.s.clone().insert_column(ncols, 0.0);
        self.s.set_column(ncols, col);
        self.meta.push(meta);
        Ok(())
    }

    pub fn n_cols(&self) -> usize {
        self.s.ncols()
    }
}

/// Orthonormal reduction basis with the singular-value history that
/// produced it.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub v: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub eps_pod: f64,
}

impl ReducedBasis {
    pub fn n(&self) -> usize {
        self.v.ncols()
    }

    /// Frobenius departure of V'V from identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.v.transpose() * &self.v;
        (g - DMatrix::identity(self.n(), self.n())).norm()
    }
}

/// Proper orthogonal decomposition: keep the smallest N with retained
/// energy sum_{i<=N} s_i^2 / sum s_i^2 >= 1 - eps_pod^2.
pub fn pod(snapshots: &SnapshotMatrix, eps_pod: f64) -> Result<ReducedBasis> {
    if snapshots.n_cols() == 0 {
        return Err(Error::invalid("empty snapshot matrix"));
    }
    if !(eps_pod > 0.0 && eps_pod < 1.0) {
        return Err(Error::invalid("pod tolerance must lie in (0, 1)"));
    }
    let (u, sigma) = thin_svd(&snapshots.s)?;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::invalid("all-zero snapshot matrix"));
    }
    let target = (1.0 - eps_pod * eps_pod) * total;
    let mut acc = 0.0;
    let mut n = sigma.len();
    for (i, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            n = i + 1;
            break;
        }
    }
    Ok(ReducedBasis {
        v: u.columns(0, n).into_owned(),
        singular_values: sigma,
        eps_pod,
    })
}

/// POD truncated at a user-fixed dimension instead of the energy rule.
pub fn pod_fixed_rank(snapshots: &SnapshotMatrix, n: usize) -> Result<ReducedBasis> {
    if snapshots.n_cols() == 0 || n == 0 {
        return Err(Error::invalid("empty snapshot matrix or zero rank"));
    }
    let (u, sigma) = thin_svd(&snapshots.s)?;
    if n > sigma.len() {
        return Err(Error::invalid("requested rank exceeds the snapshot count"));
    }
    Ok(ReducedBasis {
        v: u.columns(0, n).into_owned(),
        singular_values: sigma,
        eps_pod: 0.0,
    })
}

/// Randomized range finder with Gaussian sketching, `power_iters` rounds
/// of subspace iteration (re-orthonormalized each half step), and a small
/// SVD of the projected matrix. Deterministic for a fixed seed.
pub fn randomized_svd(
    snapshots: &SnapshotMatrix,
    n_target: usize,
    oversampling: usize,
    power_iters: usize,
    seed: u64,
) -> Result<ReducedBasis> {
    let s = &snapshots.s;
    let (nr, nc) = (s.nrows(), s.ncols());
    let sketch = n_target + oversampling;
    if n_target == 0 || sketch > nr.min(nc) {
        return Err(Error::invalid(format!(
            "sketch width {sketch} must fit within the {nr}x{nc} matrix"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(nc, sketch, |_, _| standard_normal(&mut rng));
    let mut q = thin_qr_q(&(s * &g));
    for _ in 0..power_iters {
        let z = thin_qr_q(&(s.transpose() * &q));
        q = thin_qr_q(&(s * &z));
    }
    let b = q.transpose() * s;
    let (ub, sigma) = thin_svd(&b)?;
    let v = &q * ub.columns(0, n_target);
    Ok(ReducedBasis {
        v,
        singular_values: sigma.rows(0, n_target).into_owned(),
        eps_pod: 0.0,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two open-interval uniforms
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Identification of one recorded operator: parameter vector, time,
/// Newton iteration index, and the cavity pressure the operators were
/// assembled at (the online solver corrects predicted residuals for its
/// own pressure through the coupling vector).
#[derive(Debug, Clone, Copy)]
pub struct OpSample {
    pub mu: [f64; 4],
    pub t: f64,
    pub k: usize,
    pub p: f64,
}

/// Reduced Newton operators logged during ROM runs, the training data of
/// the operator surrogates. The pressure-column and constraint-row pairs
/// are recorded at every iteration too so their surrogates cover the
/// whole cycle; only volume-constrained steps have a meaningful volume
/// residual entry (zero elsewhere, and the online solver recomputes it
/// from the actual iterate anyway).
#[derive(Debug, Clone, Default)]
pub struct OperatorSnapshots {
    pub n: usize,
    pub rho: Vec<DVector<f64>>,
    pub iota: Vec<DMatrix<f64>>,
    /// Reduced iterate each residual was evaluated at, the state
    /// reference the online solver corrects its predictions towards.
    pub rho_q: Vec<DVector<f64>>,
    pub rho_samples: Vec<OpSample>,
    pub pi: Vec<DVector<f64>>,
    pub upsilon: Vec<DVector<f64>>,
    pub pi_samples: Vec<OpSample>,
}

impl OperatorSnapshots {
    pub fn new(n: usize) -> Self {
        OperatorSnapshots { n, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.len() != self.iota.len() || self.rho.len() != self.rho_samples.len() {
            return Err(Error::invalid("residual/tangent snapshot counts disagree"));
        }
        if self.rho.len() != self.rho_q.len() {
            return Err(Error::invalid("residual/iterate snapshot counts disagree"));
        }
        if self.pi.len() != self.upsilon.len() || self.pi.len() != self.pi_samples.len() {
            return Err(Error::invalid("pressure/constraint snapshot counts disagree"));
        }
        if self.pi.len() > self.rho.len() {
            return Err(Error::invalid("constrained-step snapshots exceed the total"));
        }
        for w in [&self.rho_samples, &self.pi_samples] {
            for pair in w.windows(2) {
                let a = (pair[0].t, pair[0].k);
                let b = (pair[1].t, pair[1].k);
                if b <= a {
                    return Err(Error::invalid("operator samples must increase in (t, k)"));
                }
            }
        }
        Ok(())
    }
}

/// Everything logged while a ROM run records training data.
#[derive(Debug, Clone)]
pub struct RomRecording {
    pub ops: OperatorSnapshots,
    /// Full-order residual at every Newton iteration, the DEIM input.
    pub residuals: SnapshotMatrix,
}

/// Result of a reduced cycle: traces plus the reduced trajectory.
#[derive(Debug, Clone)]
pub struct RomOutput {
    pub trace: CycleTrace,
    /// Reduced coordinates per step, including the initial state.
    pub reduced: Vec<DVector<f64>>,
    pub recording: Option<RomRecording>,
}

/// Galerkin stepper: full-order operators assembled at the lifted state
/// and projected onto the basis; reduced dense systems solved by LU with
/// partial pivoting.
pub struct RomStepper<'a> {
    model: &'a FemModel,
    v: &'a DMatrix<f64>,
    newton: NewtonSettings,
    dt: f64,
    mu: [f64; 4],
    q: DVector<f64>,
    q_prev: DVector<f64>,
    q_prev2: DVector<f64>,
    p: f64,
    pub reduced_states: Vec<DVector<f64>>,
    pub recording: Option<RomRecording>,
}

impl<'a> RomStepper<'a> {
    pub fn new(
        model: &'a FemModel,
        basis: &'a ReducedBasis,
        newton: NewtonSettings,
        dt: f64,
        mu: [f64; 4],
        u0: &DVector<f64>,
        p0: f64,
        record: bool,
    ) -> Self {
        let v = &basis.v;
        let q0 = v.transpose() * u0;
        let recording = record.then(|| RomRecording {
            ops: OperatorSnapshots::new(v.ncols()),
            residuals: SnapshotMatrix::new(model.n_dofs()),
        });
        RomStepper {
            model,
            v,
            newton,
            dt,
            mu,
            q: q0.clone(),
            q_prev: q0.clone(),
            q_prev2: q0.clone(),
            p: p0,
            reduced_states: vec![q0],
            recording,
        }
    }

    fn lift(&self, q: &DVector<f64>) -> DVector<f64> {
        self.v * q
    }

    fn commit(&mut self, q_new: DVector<f64>, p_new: f64) {
        self.q_prev2 = std::mem::replace(&mut self.q_prev, q_new.clone());
        self.reduced_states.push(q_new.clone());
        self.q = q_new;
        self.p = p_new;
    }

    /// Full residual and its basis projection at a reduced iterate.
    fn residual(
        &self,
        q: &DVector<f64>,
        u_prev: &DVector<f64>,
        u_prev2: &DVector<f64>,
        p: f64,
        ta: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let u = self.lift(q);
        let st = FemState { u: &u, u_prev, u_prev2, dt: self.dt, p, ta };
        let r = self.model.assemble_residual(&st, TermFlags::all())?;
        let rho = self.v.transpose() * &r;
        Ok((r, rho))
    }
}

impl CycleStepper for RomStepper<'_> {
    fn volume(&self) -> Result<f64> {
        self.model.cavity_volume(&self.lift(&self.q))
    }

    fn pressure_step(&mut self, t: f64, p: f64, ta: f64) -> Result<usize> {
        let u_prev = self.lift(&self.q_prev);
        let u_prev2 = self.lift(&self.q_prev2);
        let mut q = self.q.clone();
        let (mut r, mut rho) = self.residual(&q, &u_prev, &u_prev2, p, ta)?;
        let rho0 = rho.norm().max(self.newton.tol_abs);

        for it in 0..self.newton.max_iters {
            if rho.norm() / rho0 < self.newton.tol_rel || rho.norm() < self.newton.tol_abs {
                self.commit(q, p);
                return Ok(it);
            }
            let u = self.lift(&q);
            let st = FemState { u: &u, u_prev: &u_prev, u_prev2: &u_prev2, dt: self.dt, p, ta };
            let kmat = self.model.assemble_jacobian(&st, TermFlags::all())?;
            let iota = self.v.transpose() * kmat.mul_dense(self.v);
            if let Some(rec) = self.recording.as_mut() {
                let n = self.v.ncols();
                let pi = self.v.transpose() * self.model.assemble_drdp(&st)?;
                let g_r = self.v.transpose() * self.model.volume_constraint_row(&u)?;
                let sample = OpSample { mu: self.mu, t, k: it, p };
                rec.ops.rho.push(rho.clone());
                rec.ops.iota.push(iota.clone());
                rec.ops.rho_q.push(q.clone());
                rec.ops.rho_samples.push(sample);
                let mut upsilon = DVector::zeros(n + 1);
                upsilon.rows_mut(0, n).copy_from(&g_r);
                rec.ops.pi.push(pi);
                rec.ops.upsilon.push(upsilon);
                rec.ops.pi_samples.push(sample);
                rec.residuals.push_column(&r, SnapshotMeta { sample: 0, time: t })?;
            }
            let dq = iota
                .clone()
                .lu()
                .solve(&(-&rho))
                .ok_or_else(|| Error::Singular("reduced tangent not invertible".into()))?;

            let mut theta = 1.0;
            let mut accepted = false;
            for _ in 0..=self.newton.max_backtracks {
                let cand = &q + theta * &dq;
                match self.residual(&cand, &u_prev, &u_prev2, p, ta) {
                    Ok((rc, rhoc)) => {
                        if rhoc.norm() <= rho.norm() * (1.0 - 1e-4 * theta)
                            || rhoc.norm() < self.newton.tol_abs
                        {
                            q = cand;
                            r = rc;
                            rho = rhoc;
                            accepted = true;
                            break;
                        }
                        theta *= 0.5;
                    }
                    Err(Error::NonAdmissible) => theta *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            if !accepted {
                return Err(Error::Convergence { step: 0, iters: it, ratio: rho.norm() / rho0 });
            }
        }
        Err(Error::Convergence {
            step: 0,
            iters: self.newton.max_iters,
            ratio: rho.norm() / rho0,
        })
    }

    fn volume_step(&mut self, t: f64, v_target: f64, ta: f64) -> Result<(f64, usize)> {
        let u_prev = self.lift(&self.q_prev);
        let u_prev2 = self.lift(&self.q_prev2);
        let n = self.v.ncols();
        let mut q = self.q.clone();
        let mut p = self.p;
        let v_scale = v_target.abs().max(1e-9);

        let (mut r, mut rho) = self.residual(&q, &u_prev, &u_prev2, p, ta)?;
        let mut rvol = self.model.cavity_volume(&self.lift(&q))? - v_target;
        let rho0 = rho.norm().max(self.newton.tol_abs);
        let merit = |rn: f64, rv: f64| (rn / rho0).powi(2) + (rv / v_scale).powi(2);

        for it in 0..self.newton.max_iters {
            let res_ok = rho.norm() / rho0 < self.newton.tol_rel
                || rho.norm() < self.newton.tol_abs;
            let vol_ok = rvol.abs() / v_scale < self.newton.tol_vol;
            if res_ok && vol_ok {
                self.commit(q, p);
                return Ok((p, it));
            }

            let u = self.lift(&q);
            let st = FemState { u: &u, u_prev: &u_prev, u_prev2: &u_prev2, dt: self.dt, p, ta };
            let kmat = self.model.assemble_jacobian(&st, TermFlags::all())?;
            let iota = self.v.transpose() * kmat.mul_dense(self.v);
            let pi = self.v.transpose() * self.model.assemble_drdp(&st)?;
            let g_r = self.v.transpose() * self.model.volume_constraint_row(&u)?;

            if let Some(rec) = self.recording.as_mut() {
                let sample = OpSample { mu: self.mu, t, k: it, p };
                rec.ops.rho.push(rho.clone());
                rec.ops.iota.push(iota.clone());
                rec.ops.rho_q.push(q.clone());
                rec.ops.rho_samples.push(sample);
                let mut upsilon = DVector::zeros(n + 1);
                upsilon.rows_mut(0, n).copy_from(&g_r);
                upsilon[n] = rvol;
                rec.ops.pi.push(pi.clone());
                rec.ops.upsilon.push(upsilon);
                rec.ops.pi_samples.push(sample);
                rec.residuals.push_column(&r, SnapshotMeta { sample: 0, time: t })?;
            }

            // bordered reduced system [[iota, pi], [g_r', 0]]
            let mut a = DMatrix::zeros(n + 1, n + 1);
            a.view_mut((0, 0), (n, n)).copy_from(&iota);
            a.view_mut((0, n), (n, 1)).copy_from(&pi);
            a.view_mut((n, 0), (1, n)).copy_from(&g_r.transpose());
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&rho));
            rhs[n] = -rvol;
            let sol = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("reduced saddle system not invertible".into()))?;
            let dq = sol.rows(0, n).into_owned();
            let dp = sol[n];

            let m_old = merit(rho.norm(), rvol);
            let mut theta = 1.0;
            let mut accepted = false;
            for _ in 0..=self.newton.max_backtracks {
                let cand_q = &q + theta * &dq;
                let cand_p = p + theta * dp;
                match self.residual(&cand_q, &u_prev, &u_prev2, cand_p, ta) {
                    Ok((rc, rhoc)) => {
                        let rv = self.model.cavity_volume(&self.lift(&cand_q))? - v_target;
                        let m_new = merit(rhoc.norm(), rv);
                        if m_new <= m_old * (1.0 - 1e-4 * theta) || m_new < 1e-24 {
                            q = cand_q;
                            p = cand_p;
                            r = rc;
                            rho = rhoc;
                            rvol = rv;
                            accepted = true;
                            break;
                        }
                        theta *= 0.5;
                    }
                    Err(Error::NonAdmissible) => theta *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            if !accepted {
                return Err(Error::Convergence { step: 0, iters: it, ratio: rho.norm() / rho0 });
            }
        }
        Err(Error::Convergence {
            step: 0,
            iters: self.newton.max_iters,
            ratio: rho.norm() / rho0,
        })
    }
}

/// Reduced heartbeat with the Galerkin stepper; optionally records the
/// reduced operators and the full residuals for DEIM and training.
#[allow(clippy::too_many_arguments)]
pub fn rom_run(
    model: &FemModel,
    circ: &CirculationParams,
    act: &ActiveTensionSpec,
    basis: &ReducedBasis,
    mu: [f64; 4],
    u0: &DVector<f64>,
    newton: &NewtonSettings,
    settings: &HeartbeatSettings,
    record: bool,
) -> Result<RomOutput> {
    let mut stepper = RomStepper::new(
        model, basis, *newton, settings.dt, mu, u0, circ.p_ed, record,
    );
    let trace = run_cycle(&mut stepper, circ, act, settings, circ.p_ed)?;
    if let Some(rec) = &stepper.recording {
        rec.ops.validate()?;
    }
    Ok(RomOutput {
        trace,
        reduced: stepper.reduced_states,
        recording: stepper.recording,
    })
}

/// DEIM interpolation data for the full-order residual.
#[derive(Debug, Clone)]
pub struct DeimData {
    /// Residual basis, one column per interpolation mode.
    pub u_m: DMatrix<f64>,
    /// Interpolation dofs, one per mode, duplicate free.
    pub indices: Vec<usize>,
    /// Elements owning any interpolation dof; the reduced mesh.
    pub cells: Vec<usize>,
    /// Per-cell membership mask of the reduced mesh.
    pub mask: Vec<bool>,
    /// V' U_m (P' U_m)^{-1}, mapping sampled entries to reduced space.
    pub projector: DMatrix<f64>,
    /// Condition number of the interpolation matrix P' U_m.
    pub cond: f64,
}

/// Greedy DEIM index selection over the leading left singular vectors of
/// the residual snapshots, then the reduced mesh and the projector.
pub fn deim_build(
    residuals: &SnapshotMatrix,
    m: usize,
    basis: &ReducedBasis,
    mesh: &HexMesh,
) -> Result<DeimData> {
    if residuals.n_cols() == 0 {
        return Err(Error::invalid("no residual snapshots"));
    }
    let (u, sigma) = thin_svd(&residuals.s)?;
    let rank = sigma.iter().filter(|s| **s > 1e-13 * sigma[0]).count();
    if m == 0 || m > rank {
        return Err(Error::invalid(format!(
            "deim dimension {m} outside the snapshot rank {rank}"
        )));
    }
    let u_m = u.columns(0, m).into_owned();

    let mut indices = Vec::with_capacity(m);
    indices.push(u_m.column(0).iamax());
    for l in 1..m {
        // interpolate the next mode on the current indices and pick the
        // dof where the interpolation error is largest
        let ul = u_m.column(l).into_owned();
        let mut a = DMatrix::zeros(l, l);
        let mut b = DVector::zeros(l);
        for (i, &pi) in indices.iter().enumerate() {
            for j in 0..l {
                a[(i, j)] = u_m[(pi, j)];
            }
            b[i] = ul[pi];
        }
        let c = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular("deim interpolation system singular".into()))?;
        let res = &ul - u_m.columns(0, l) * c;
        indices.push(res.iamax());
    }
    {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::Singular("duplicate deim interpolation index".into()));
        }
    }

    let mut ptu = DMatrix::zeros(m, m);
    for (i, &pi) in indices.iter().enumerate() {
        for j in 0..m {
            ptu[(i, j)] = u_m[(pi, j)];
        }
    }
    let (_, svals) = thin_svd(&ptu)?;
    let smin = svals[svals.len() - 1];
    if smin <= 0.0 {
        return Err(Error::Singular("deim interpolation matrix singular".into()));
    }
    let cond = svals[0] / smin;
    let inv = ptu
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("deim matrix singular, cond {cond:.3e}")))?;
    let projector = basis.v.transpose() * &u_m * inv;

    // reduced mesh: every element containing a vertex of a selected dof
    let mut mask = vec![false; mesh.n_cells()];
    for c in 0..mesh.n_cells() {
        if mesh.cells[c]
            .iter()
            .any(|&v| indices.iter().any(|&i| i / 3 == v))
        {
            mask[c] = true;
        }
    }
    let cells: Vec<usize> = (0..mesh.n_cells()).filter(|&c| mask[c]).collect();

    Ok(DeimData { u_m, indices, cells, mask, projector, cond })
}

/// Hyper-reduced stepper: residual and tangent are assembled on the
/// reduced mesh only, sampled at the interpolation dofs, and lifted to
/// reduced space through the DEIM projector. The scalar surface data of
/// the volume constraint stays exact.
pub struct DeimStepper<'a> {
    model: &'a FemModel,
    v: &'a DMatrix<f64>,
    deim: &'a DeimData,
    newton: NewtonSettings,
    dt: f64,
    q: DVector<f64>,
    q_prev: DVector<f64>,
    q_prev2: DVector<f64>,
    p: f64,
    pub reduced_states: Vec<DVector<f64>>,
    /// Elements visited by residual or tangent assembly, cumulative.
    pub cells_assembled: usize,
    pub assembly_calls: usize,
}

impl<'a> DeimStepper<'a> {
    pub fn new(
        model: &'a FemModel,
        basis: &'a ReducedBasis,
        deim: &'a DeimData,
        newton: NewtonSettings,
        dt: f64,
        u0: &DVector<f64>,
        p0: f64,
    ) -> Self {
        let q0 = basis.v.transpose() * u0;
        DeimStepper {
            model,
            v: &basis.v,
            deim,
            newton,
            dt,
            q: q0.clone(),
            q_prev: q0.clone(),
            q_prev2: q0.clone(),
            p: p0,
            reduced_states: vec![q0],
            cells_assembled: 0,
            assembly_calls: 0,
        }
    }

    fn lift(&self, q: &DVector<f64>) -> DVector<f64> {
        self.v * q
    }

    fn commit(&mut self, q_new: DVector<f64>, p_new: f64) {
        self.q_prev2 = std::mem::replace(&mut self.q_prev, q_new.clone());
        self.reduced_states.push(q_new.clone());
        self.q = q_new;
        self.p = p_new;
    }

    /// DEIM-approximated reduced residual at a reduced iterate.
    fn rho(
        &mut self,
        q: &DVector<f64>,
        u_prev: &DVector<f64>,
        u_prev2: &DVector<f64>,
        p: f64,
        ta: f64,
    ) -> Result<DVector<f64>> {
        let u = self.lift(q);
        let st = FemState { u: &u, u_prev, u_prev2, dt: self.dt, p, ta };
        let r = self
            .model
            .assemble_residual_masked(&st, TermFlags::all(), Some(&self.deim.mask))?;
        self.cells_assembled += self.deim.cells.len();
        self.assembly_calls += 1;
        let sampled = DVector::from_fn(self.deim.indices.len(), |i, _| r[self.deim.indices[i]]);
        Ok(&self.deim.projector * sampled)
    }

    /// DEIM-approximated reduced tangent at a reduced iterate.
    fn iota(
        &mut self,
        q: &DVector<f64>,
        u_prev: &DVector<f64>,
        u_prev2: &DVector<f64>,
        p: f64,
        ta: f64,
    ) -> Result<DMatrix<f64>> {
        let u = self.lift(q);
        let st = FemState { u: &u, u_prev, u_prev2, dt: self.dt, p, ta };
        let kmat = self
            .model
            .assemble_jacobian_masked(&st, TermFlags::all(), Some(&self.deim.mask))?;
        self.cells_assembled += self.deim.cells.len();
        self.assembly_calls += 1;
        let kv = kmat.mul_dense(self.v);
        let m = self.deim.indices.len();
        let sampled = DMatrix::from_fn(m, self.v.ncols(), |i, j| kv[(self.deim.indices[i], j)]);
        Ok(&self.deim.projector * sampled)
    }
}

impl CycleStepper for DeimStepper<'_> {
    fn volume(&self) -> Result<f64> {
        self.model.cavity_volume(&self.lift(&self.q))
    }

    fn pressure_step(&mut self, _t: f64, p: f64, ta: f64) -> Result<usize> {
        let u_prev = self.lift(&self.q_prev);
        let u_prev2 = self.lift(&self.q_prev2);
        let mut q = self.q.clone();
        let mut rho = self.rho(&q, &u_prev, &u_prev2, p, ta)?;
        let rho0 = rho.norm().max(self.newton.tol_abs);

        for it in 0..self.newton.max_iters {
            if rho.norm() / rho0 < self.newton.tol_rel || rho.norm() < self.newton.tol_abs {
                self.commit(q, p);
                return Ok(it);
            }
            let iota = self.iota(&q, &u_prev, &u_prev2, p, ta)?;
            let dq = iota
                .lu()
                .solve(&(-&rho))
                .ok_or_else(|| Error::Singular("deim reduced tangent not invertible".into()))?;

            let mut theta = 1.0;
            let mut accepted = false;
            for _ in 0..=self.newton.max_backtracks {
                let cand = &q + theta * &dq;
                match self.rho(&cand, &u_prev, &u_prev2, p, ta) {
                    Ok(rhoc) => {
                        if rhoc.norm() <= rho.norm() * (1.0 - 1e-4 * theta)
                            || rhoc.norm() < self.newton.tol_abs
                        {
                            q = cand;
                            rho = rhoc;
                            accepted = true;
                            break;
                        }
                        theta *= 0.5;
                    }
                    Err(Error::NonAdmissible) => theta *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            if !accepted {
                return Err(Error::Convergence { step: 0, iters: it, ratio: rho.norm() / rho0 });
            }
        }
        Err(Error::Convergence {
            step: 0,
            iters: self.newton.max_iters,
            ratio: rho.norm() / rho0,
        })
    }

    fn volume_step(&mut self, _t: f64, v_target: f64, ta: f64) -> Result<(f64, usize)> {
        let u_prev = self.lift(&self.q_prev);
        let u_prev2 = self.lift(&self.q_prev2);
        let n = self.v.ncols();
        let mut q = self.q.clone();
        let mut p = self.p;
        let v_scale = v_target.abs().max(1e-9);

        let mut rho = self.rho(&q, &u_prev, &u_prev2, p, ta)?;
        let mut rvol = self.model.cavity_volume(&self.lift(&q))? - v_target;
        let rho0 = rho.norm().max(self.newton.tol_abs);
        let merit = |rn: f64, rv: f64| (rn / rho0).powi(2) + (rv / v_scale).powi(2);

        for it in 0..self.newton.max_iters {
            let res_ok = rho.norm() / rho0 < self.newton.tol_rel
                || rho.norm() < self.newton.tol_abs;
            let vol_ok = rvol.abs() / v_scale < self.newton.tol_vol;
            if res_ok && vol_ok {
                self.commit(q, p);
                return Ok((p, it));
            }

            let iota = self.iota(&q, &u_prev, &u_prev2, p, ta)?;
            // surface-only terms are cheap and kept exact
            let u = self.lift(&q);
            let st = FemState { u: &u, u_prev: &u_prev, u_prev2: &u_prev2, dt: self.dt, p, ta };
            let pi = self.v.transpose() * self.model.assemble_drdp(&st)?;
            let g_r = self.v.transpose() * self.model.volume_constraint_row(&u)?;

            let mut a = DMatrix::zeros(n + 1, n + 1);
            a.view_mut((0, 0), (n, n)).copy_from(&iota);
            a.view_mut((0, n), (n, 1)).copy_from(&pi);
            a.view_mut((n, 0), (1, n)).copy_from(&g_r.transpose());
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&rho));
            rhs[n] = -rvol;
            let sol = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("deim saddle system not invertible".into()))?;
            let dq = sol.rows(0, n).into_owned();
            let dp = sol[n];

            let m_old = merit(rho.norm(), rvol);
            let mut theta = 1.0;
            let mut accepted = false;
            for _ in 0..=self.newton.max_backtracks {
                let cand_q = &q + theta * &dq;
                let cand_p = p + theta * dp;
                match self.rho(&cand_q, &u_prev, &u_prev2, cand_p, ta) {
                    Ok(rhoc) => {
                        let rv = self.model.cavity_volume(&self.lift(&cand_q))? - v_target;
                        let m_new = merit(rhoc.norm(), rv);
                        if m_new <= m_old * (1.0 - 1e-4 * theta) || m_new < 1e-24 {
                            q = cand_q;
                            p = cand_p;
                            rho = rhoc;
                            rvol = rv;
                            accepted = true;
                            break;
                        }
                        theta *= 0.5;
                    }
                    Err(Error::NonAdmissible) => theta *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            if !accepted {
                return Err(Error::Convergence { step: 0, iters: it, ratio: rho.norm() / rho0 });
            }
        }
        Err(Error::Convergence {
            step: 0,
            iters: self.newton.max_iters,
            ratio: rho.norm() / rho0,
        })
    }
}

/// Reduced heartbeat with DEIM-approximated operators.
#[allow(clippy::too_many_arguments)]
pub fn deim_rom_run(
    model: &FemModel,
    circ: &CirculationParams,
    act: &ActiveTensionSpec,
    basis: &ReducedBasis,
    deim: &DeimData,
    u0: &DVector<f64>,
    newton: &NewtonSettings,
    settings: &HeartbeatSettings,
) -> Result<(RomOutput, DeimRunStats)> {
    let mut stepper =
        DeimStepper::new(model, basis, deim, *newton, settings.dt, u0, circ.p_ed);
    let trace = run_cycle(&mut stepper, circ, act, settings, circ.p_ed)?;
    let stats = DeimRunStats {
        cells_assembled: stepper.cells_assembled,
        assembly_calls: stepper.assembly_calls,
        reduced_mesh_cells: deim.cells.len(),
    };
    Ok((
        RomOutput {
            trace,
            reduced: stepper.reduced_states,
            recording: None,
        },
        stats,
    ))
}

/// Assembly instrumentation of one hyper-reduced run.
#[derive(Debug, Clone, Copy)]
pub struct DeimRunStats {
    pub cells_assembled: usize,
    pub assembly_calls: usize,
    pub reduced_mesh_cells: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::MaterialParams;
    use crate::fem::BoundaryParams;
    use crate::fom::{quasi_static_inflate, run_heartbeat};
    use crate::geometry::{assign_fibers, build_ellipsoid_mesh, IschemicMask, MeshSpec};
    use rand::Rng;

    fn random_orthonormal(nr: usize, nc: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        thin_qr_q(&DMatrix::from_fn(nr, nc, |_, _| rng.gen_range(-1.0..1.0)))
    }

    fn snap(s: DMatrix<f64>) -> SnapshotMatrix {
        let meta = (0..s.ncols())
            .map(|j| SnapshotMeta { sample: 0, time: j as f64 })
            .collect();
        SnapshotMatrix { s, meta }
    }

    #[test]
    fn pod_rank_one_gives_single_mode() {
        let col = DVector::from_fn(40, |i, _| ((i + 1) as f64).sin());
        let mut s = DMatrix::zeros(40, 6);
        for j in 0..6 {
            s.set_column(j, &(2.5 * &col));
        }
        let basis = pod(&snap(s), 0.3).unwrap();
        assert_eq!(basis.n(), 1);
        let unit = &col / col.norm();
        let dot = basis.v.column(0).dot(&unit).abs();
        assert!((dot - 1.0).abs() < 1e-12, "mode misaligned, |dot| = {dot}");
        assert!(basis.orthonormality_defect() < 1e-12);
    }

    #[test]
    fn pod_truncation_matches_energy_criterion() {
        // spectrum {1, 1e-1, 1e-2, 1e-3}; brute-force scan of the
        // retained-energy rule gives the expected dimension
        let svals = [1.0, 1e-1, 1e-2, 1e-3];
        let u = random_orthonormal(30, 4, 7);
        let w = random_orthonormal(12, 4, 8);
        let mut s = DMatrix::zeros(30, 12);
        for (k, sv) in svals.iter().enumerate() {
            s += *sv * u.column(k) * w.column(k).transpose();
        }
        let eps = 1.5e-2;
        let total: f64 = svals.iter().map(|s| s * s).sum();
        let mut expect = svals.len();
        let mut acc = 0.0;
        for (i, sv) in svals.iter().enumerate() {
            acc += sv * sv;
            if acc >= (1.0 - eps * eps) * total {
                expect = i + 1;
                break;
            }
        }
        let basis = pod(&snap(s), eps).unwrap();
        assert_eq!(basis.n(), expect);
    }

    #[test]
    fn pod_satisfies_projection_error_identity() {
        // optimal subspace: squared projection error equals the tail
        // energy of the spectrum
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = DMatrix::from_fn(50, 18, |_, _| rng.gen_range(-1.0..1.0));
        let basis = pod(&snap(s.clone()), 0.25).unwrap();
        let n = basis.n();
        assert!(n < 18);
        let proj = &basis.v * (basis.v.transpose() * &s);
        let err2 = (&s - proj).norm_squared();
        let tail: f64 = basis
            .singular_values
            .iter()
            .skip(n)
            .map(|sv| sv * sv)
            .sum();
        assert!(
            (err2 - tail).abs() < 1e-9 * tail.max(1e-300),
            "projection error {err2:.6e} vs spectral tail {tail:.6e}"
        );
    }

    #[test]
    fn pod_rejects_degenerate_input() {
        assert!(pod(&SnapshotMatrix::new(10), 0.1).is_err());
        assert!(pod(&snap(DMatrix::zeros(10, 3)), 0.1).is_err());
        assert!(pod(&snap(DMatrix::identity(5, 3)), 1.5).is_err());
    }

    #[test]
    fn randomized_svd_recovers_exact_rank() {
        let r = 6;
        let u = random_orthonormal(80, r, 3);
        let w = random_orthonormal(40, r, 4);
        let mut s = DMatrix::zeros(80, 40);
        for k in 0..r {
            s += (1.0 + k as f64) * u.column(k) * w.column(k).transpose();
        }
        let basis = randomized_svd(&snap(s.clone()), r, 10, 2, 99).unwrap();
        assert_eq!(basis.n(), r);
        assert!(basis.orthonormality_defect() < 1e-10);
        let err = (&s - &basis.v * (basis.v.transpose() * &s)).norm();
        assert!(err < 1e-10, "exact-rank reconstruction error {err:.3e}");
    }

    #[test]
    fn randomized_svd_tracks_deterministic_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = random_orthonormal(500, 60, 22);
        let w = random_orthonormal(200, 60, 23);
        let mut s = DMatrix::zeros(500, 200);
        for k in 0..60 {
            s += 0.85f64.powi(k as i32) * u.column(k) * w.column(k).transpose();
        }
        s += DMatrix::from_fn(500, 200, |_, _| rng.gen_range(-1e-8..1e-8));
        let n = 20;
        let det = pod_fixed_rank(&snap(s.clone()), n).unwrap();
        let det_err = (&s - &det.v * (det.v.transpose() * &s)).norm();
        let rnd = randomized_svd(&snap(s.clone()), n, 10, 2, 5).unwrap();
        let rnd_err = (&s - &rnd.v * (rnd.v.transpose() * &s)).norm();
        assert!(
            rnd_err <= 1.5 * det_err,
            "randomized tail {rnd_err:.3e} vs deterministic {det_err:.3e}"
        );
    }

    #[test]
    fn randomized_svd_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = DMatrix::from_fn(60, 30, |_, _| rng.gen_range(-1.0..1.0));
        let a = randomized_svd(&snap(s.clone()), 8, 10, 2, 1234).unwrap();
        let b = randomized_svd(&snap(s), 8, 10, 2, 1234).unwrap();
        assert_eq!(a.v, b.v);
    }

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

    /// Time-averaged relative L2 error between two state trajectories.
    fn eps_rel(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
        assert_eq!(a.len(), b.len());
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum();
        let den: f64 = a.iter().map(|x| x.norm()).sum();
        num / den
    }

    #[test]
    fn full_basis_rom_reproduces_fom() {
        let model = tiny_model();
        let newton = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let fom = run_heartbeat(&model, &circ, &act, &newton, &settings).unwrap();

        // orthonormal span of the converged trajectory
        let mut s = DMatrix::zeros(model.n_dofs(), fom.displacements.len());
        for (j, u) in fom.displacements.iter().enumerate() {
            s.set_column(j, u);
        }
        let basis = ReducedBasis {
            v: thin_qr_q(&s),
            singular_values: DVector::zeros(0),
            eps_pod: 0.0,
        };
        assert!(basis.orthonormality_defect() < 1e-10);

        let out = rom_run(
            &model,
            &circ,
            &act,
            &basis,
            mu_baseline(),
            &fom.displacements[0],
            &newton,
            &settings,
            true,
        )
        .unwrap();

        let lifted: Vec<DVector<f64>> =
            out.reduced.iter().map(|q| &basis.v * q).collect();
        let err = eps_rel(&lifted, &fom.displacements);
        assert!(err < 1e-6, "full-basis reduced trajectory error {err:.3e}");

        // recording bookkeeping: one operator pair per Newton solve
        let rec = out.recording.unwrap();
        let total: usize = out.trace.newton_iters.iter().sum();
        assert_eq!(rec.ops.rho.len(), total);
        assert_eq!(rec.residuals.n_cols(), total);
        assert_eq!(rec.ops.pi.len(), rec.ops.rho.len(), "coupling pairs cover every iteration");
        rec.ops.validate().unwrap();
    }

    #[test]
    fn underresolved_basis_aborts_the_cycle() {
        let model = tiny_model();
        let newton = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();

        // single mode along a dof outside the cavity-volume support that
        // still feels the active stress: the constrained steps cannot
        // move the volume once activation loads the mode, so the run
        // must abort instead of silently producing a trajectory
        let n = model.n_dofs();
        let g0 = model.volume_constraint_row(&DVector::zeros(n)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let u_a = DVector::from_fn(n, |_, _| rng.gen_range(-5e-4..5e-4));
        let u_b = DVector::from_fn(n, |_, _| rng.gen_range(-5e-4..5e-4));
        let g1 = model.volume_constraint_row(&u_a).unwrap();
        let g2 = model.volume_constraint_row(&u_b).unwrap();
        let zero = DVector::zeros(n);
        let st = FemState { u: &zero, u_prev: &zero, u_prev2: &zero, dt: 2.5e-3, p: 0.0, ta: 5.0e4 };
        let r_act = model.assemble_residual(&st, TermFlags::only_internal()).unwrap();
        let dead = (0..n)
            .filter(|&i| g0[i] == 0.0 && g1[i] == 0.0 && g2[i] == 0.0)
            .max_by(|&a, &b| r_act[a].abs().total_cmp(&r_act[b].abs()))
            .expect("some dof must be outside the volume support");
        assert!(r_act[dead].abs() > 1e-6, "mode must feel the activation");
        let mut v = DMatrix::zeros(n, 1);
        v[(dead, 0)] = 1.0;
        let basis = ReducedBasis { v, singular_values: DVector::zeros(0), eps_pod: 0.0 };

        let out = rom_run(
            &model,
            &circ,
            &act,
            &basis,
            mu_baseline(),
            &DVector::zeros(n),
            &newton,
            &settings,
            false,
        );
        match out {
            Err(Error::Singular(_)) | Err(Error::Convergence { .. }) => {}
            other => panic!("expected a divergence report, got {other:?}"),
        }
    }

    #[test]
    fn deim_greedy_matches_bruteforce_selection() {
        let s = DMatrix::from_row_slice(
            5,
            3,
            &[
                0.9, -0.2, 0.05, -0.3, 0.8, 0.4, 0.1, 0.6, -0.7, 0.5, -0.5, 0.9, -0.8, 0.1, 0.3,
            ],
        );
        let (u, _) = thin_svd(&s).unwrap();

        // reference greedy selection, solved by explicit elimination
        let mut expect = vec![u.column(0).iamax()];
        for l in 1..3 {
            let ul = u.column(l).into_owned();
            let mut a = DMatrix::zeros(l, l);
            let mut b = DVector::zeros(l);
            for (i, &p) in expect.iter().enumerate() {
                for j in 0..l {
                    a[(i, j)] = u[(p, j)];
                }
                b[i] = ul[p];
            }
            let c = a.lu().solve(&b).unwrap();
            let r = &ul - u.columns(0, l) * c;
            let mut best = 0;
            for i in 0..5 {
                if r[i].abs() > r[best].abs() {
                    best = i;
                }
            }
            expect.push(best);
        }

        let mesh = build_ellipsoid_mesh(&MeshSpec {
            resolution: (2, 2, 2),
            ..MeshSpec::desk_default()
        })
        .unwrap();
        let basis = ReducedBasis {
            v: DMatrix::identity(5, 2),
            singular_values: DVector::zeros(0),
            eps_pod: 0.0,
        };
        let deim = deim_build(&snap(s), 3, &basis, &mesh).unwrap();
        assert_eq!(deim.indices, expect);
        assert!(deim.cond >= 1.0);
    }

    #[test]
    fn deim_interpolation_exact_at_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let s = DMatrix::from_fn(30, 5, |_, _| rng.gen_range(-1.0..1.0));
        let mesh = build_ellipsoid_mesh(&MeshSpec {
            resolution: (2, 2, 2),
            ..MeshSpec::desk_default()
        })
        .unwrap();
        let basis = ReducedBasis {
            v: DMatrix::identity(30, 4),
            singular_values: DVector::zeros(0),
            eps_pod: 0.0,
        };
        let deim = deim_build(&snap(s.clone()), 5, &basis, &mesh).unwrap();

        // interpolation operator reproduces every snapshot
        let m = 5;
        let mut ptu = DMatrix::zeros(m, m);
        for (i, &p) in deim.indices.iter().enumerate() {
            for j in 0..m {
                ptu[(i, j)] = deim.u_m[(p, j)];
            }
        }
        let inv = ptu.lu().try_inverse().unwrap();
        for j in 0..s.ncols() {
            let col = s.column(j).into_owned();
            let sampled = DVector::from_fn(m, |i, _| col[deim.indices[i]]);
            let rebuilt = &deim.u_m * (&inv * sampled);
            assert!(
                (&rebuilt - &col).norm() < 1e-10 * col.norm(),
                "snapshot {j} not interpolated exactly"
            );
        }
        assert!(deim_build(&snap(s), 25, &basis, &mesh).is_err(), "rank bound enforced");
    }

    #[test]
    fn deim_full_rank_matches_galerkin_rom() {
        let model = tiny_model();
        let newton = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = short_settings();
        let u0 = quasi_static_inflate(&model, circ.p_ed, 10, &newton).unwrap();

        // truncated displacement basis from a recording run
        let fom = run_heartbeat(&model, &circ, &act, &newton, &settings).unwrap();
        let mut s = SnapshotMatrix::new(model.n_dofs());
        for (j, u) in fom.displacements.iter().enumerate() {
            s.push_column(u, SnapshotMeta { sample: 0, time: j as f64 }).unwrap();
        }
        let basis = pod(&s, 1e-6).unwrap();
        assert!(basis.n() < fom.displacements.len());

        let galerkin = rom_run(
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
        let residuals = galerkin.recording.as_ref().unwrap().residuals.clone();
        let (_, sigma) = thin_svd(&residuals.s).unwrap();
        let rank = sigma.iter().filter(|sv| **sv > 1e-13 * sigma[0]).count();

        let deim = deim_build(&residuals, rank, &basis, &model.mesh).unwrap();
        let (hyper, stats) = deim_rom_run(
            &model, &circ, &act, &basis, &deim, &u0, &newton, &settings,
        )
        .unwrap();

        assert_eq!(hyper.reduced.len(), galerkin.reduced.len());
        let mut worst: f64 = 0.0;
        for (a, b) in hyper.reduced.iter().zip(&galerkin.reduced) {
            worst = worst.max((a - b).norm() / b.norm().max(1e-30));
        }
        assert!(worst < 1e-8, "full-rank hyper-reduction deviates by {worst:.3e}");

        // instrumentation: every assembly visited only the reduced mesh
        assert_eq!(stats.cells_assembled, stats.assembly_calls * stats.reduced_mesh_cells);
        assert!(stats.reduced_mesh_cells <= model.mesh.n_cells());
    }

    #[test]
    fn deim_reduced_mesh_shrinks_for_small_m() {
        let model = tiny_model();
        let n_h = model.n_dofs();
        // synthetic residual snapshots concentrated on few dofs
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut s = DMatrix::zeros(n_h, 6);
        for j in 0..6 {
            for i in 0..12 {
                s[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let basis = ReducedBasis {
            v: random_orthonormal(n_h, 4, 56),
            singular_values: DVector::zeros(0),
            eps_pod: 0.0,
        };
        let deim = deim_build(&snap(s), 3, &basis, &model.mesh).unwrap();
        assert_eq!(deim.indices.len(), 3);
        assert!(
            deim.cells.len() < model.mesh.n_cells(),
            "reduced mesh must be a strict subset for local snapshots"
        );
        for &c in &deim.cells {
            assert!(deim.mask[c]);
        }
    }
}
