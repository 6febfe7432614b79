//! Full-order time integration of the coupled 3D-0D problem: damped
//! Newton solvers for the pressure-driven and volume-constrained steps,
//! quasi-static inflation to the end-diastolic state, and the heartbeat
//! loop dispatching on the cardiac-cycle phase.

use nalgebra::DVector;

use crate::circulation::{
    advance_phase, filling_pressure, windkessel_step, CirculationParams, CycleState, Phase,
};
use crate::constitutive::{active_tension, ActiveTensionSpec};
use crate::fem::{FemModel, FemState, TermFlags};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    /// Relative residual drop for convergence.
    pub tol_rel: f64,
    /// Absolute residual floor; also the zero-residual guard.
    pub tol_abs: f64,
    /// Relative cavity-volume defect allowed in constrained solves; kept
    /// well below the per-step conservation budget of the cycle.
    pub tol_vol: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol_rel: 1e-6,
            tol_abs: 1e-10,
            tol_vol: 1e-9,
            max_iters: 25,
            max_backtracks: 10,
        }
    }
}

/// Newton with backtracking for R(u) = 0 at fixed cavity pressure.
/// Returns the solution and the iteration count.
#[allow(clippy::too_many_arguments)]
pub fn newton_segregated(
    model: &FemModel,
    u0: &DVector<f64>,
    u_prev: &DVector<f64>,
    u_prev2: &DVector<f64>,
    dt: f64,
    p: f64,
    ta: f64,
    flags: TermFlags,
    settings: &NewtonSettings,
) -> Result<(DVector<f64>, usize)> {
    let mut u = u0.clone();
    fn st<'a>(
        u: &'a DVector<f64>,
        u_prev: &'a DVector<f64>,
        u_prev2: &'a DVector<f64>,
        dt: f64,
        p: f64,
        ta: f64,
    ) -> FemState<'a> {
        FemState { u, u_prev, u_prev2, dt, p, ta }
    }
    let mut r = model.assemble_residual(&st(&u, u_prev, u_prev2, dt, p, ta), flags)?;
    let r0 = r.norm().max(settings.tol_abs);
    for it in 0..settings.max_iters {
        if r.norm() / r0 < settings.tol_rel || r.norm() < settings.tol_abs {
            return Ok((u, it));
        }
        let k = model.assemble_jacobian(&st(&u, u_prev, u_prev2, dt, p, ta), flags)?;
        let solver = k.factorize()?;
        let du = solver.solve(&(-&r));

        let mut theta = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_backtracks {
            let cand = &u + theta * &du;
            match model.assemble_residual(&st(&cand, u_prev, u_prev2, dt, p, ta), flags) {
                Ok(rc) => {
                    if rc.norm() <= r.norm() * (1.0 - 1e-4 * theta)
                        || rc.norm() < settings.tol_abs
                    {
                        u = cand;
                        r = rc;
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
            return Err(Error::Convergence {
                step: 0,
                iters: it,
                ratio: r.norm() / r0,
            });
        }
    }
    Err(Error::Convergence {
        step: 0,
        iters: settings.max_iters,
        ratio: r.norm() / r0,
    })
}

/// Newton for the volume-constrained saddle problem: find (u, p) with
/// R(u, p) = 0 and V(u) = v_target. Each iteration solves the Schur
/// complement of the bordered system with two sparse solves.
#[allow(clippy::too_many_arguments)]
pub fn newton_saddle(
    model: &FemModel,
    u0: &DVector<f64>,
    p0: f64,
    u_prev: &DVector<f64>,
    u_prev2: &DVector<f64>,
    dt: f64,
    v_target: f64,
    ta: f64,
    flags: TermFlags,
    settings: &NewtonSettings,
) -> Result<(DVector<f64>, f64, usize)> {
    let mut u = u0.clone();
    let mut p = p0;
    let v_scale = v_target.abs().max(1e-9);
    fn st<'a>(
        u: &'a DVector<f64>,
        u_prev: &'a DVector<f64>,
        u_prev2: &'a DVector<f64>,
        dt: f64,
        p: f64,
        ta: f64,
    ) -> FemState<'a> {
        FemState { u, u_prev, u_prev2, dt, p, ta }
    }

    let mut r = model.assemble_residual(&st(&u, u_prev, u_prev2, dt, p, ta), flags)?;
    let mut rvol = model.cavity_volume(&u)? - v_target;
    let r0 = r.norm().max(settings.tol_abs);
    let merit = |rn: f64, rv: f64| (rn / r0).powi(2) + (rv / v_scale).powi(2);

    for it in 0..settings.max_iters {
        let res_ok = r.norm() / r0 < settings.tol_rel || r.norm() < settings.tol_abs;
        let vol_ok = rvol.abs() / v_scale < settings.tol_vol;
        if res_ok && vol_ok {
            return Ok((u, p, it));
        }

        let k = model.assemble_jacobian(&st(&u, u_prev, u_prev2, dt, p, ta), flags)?;
        let solver = k.factorize()?;
        let drdp = model.assemble_drdp(&st(&u, u_prev, u_prev2, dt, p, ta))?;
        let y1 = solver.solve(&(-&r));
        let y2 = solver.solve(&(-&drdp));
        let g = model.volume_constraint_row(&u)?;
        let denom = g.dot(&y2);
        if denom.abs() < 1e-300 {
            return Err(Error::Singular("volume constraint insensitive to pressure".into()));
        }
        let dp = (rvol + g.dot(&y1)) / (-denom);
        let du = y1 + dp * y2;

        let m_old = merit(r.norm(), rvol);
        let mut theta = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_backtracks {
            let cand_u = &u + theta * &du;
            let cand_p = p + theta * dp;
            match model.assemble_residual(&st(&cand_u, u_prev, u_prev2, dt, cand_p, ta), flags) {
                Ok(rc) => {
                    let rv = model.cavity_volume(&cand_u)? - v_target;
                    let m_new = merit(rc.norm(), rv);
                    if m_new <= m_old * (1.0 - 1e-4 * theta) || m_new < 1e-24 {
                        u = cand_u;
                        p = cand_p;
                        r = rc;
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
            return Err(Error::Convergence {
                step: 0,
                iters: it,
                ratio: r.norm() / r0,
            });
        }
    }
    Err(Error::Convergence {
        step: 0,
        iters: settings.max_iters,
        ratio: r.norm() / r0,
    })
}

/// Ramp the cavity pressure from zero to `p_target` through quasi-static
/// equilibria, with adaptive step halving on failed continuation steps.
/// The huge pseudo time step suppresses the Robin dashpot.
pub fn quasi_static_inflate(
    model: &FemModel,
    p_target: f64,
    n_steps: usize,
    settings: &NewtonSettings,
) -> Result<DVector<f64>> {
    if p_target < 0.0 || n_steps == 0 {
        return Err(Error::invalid("inflation needs p_target >= 0 and n_steps > 0"));
    }
    let flags = TermFlags::quasi_static();
    let dt_qs = 1e6;
    let mut u = DVector::zeros(model.n_dofs());
    let mut p_done = 0.0;
    let mut dp = p_target / n_steps as f64;
    while p_done < p_target * (1.0 - 1e-12) {
        let p_try = (p_done + dp).min(p_target);
        let u_prev = u.clone();
        match newton_segregated(model, &u, &u_prev, &u_prev, dt_qs, p_try, 0.0, flags, settings) {
            Ok((u_new, _)) => {
                u = u_new;
                p_done = p_try;
            }
            Err(Error::Convergence { .. }) | Err(Error::NonAdmissible) => {
                dp *= 0.5;
                if dp < p_target * 1e-5 {
                    return Err(Error::Convergence {
                        step: 0,
                        iters: 0,
                        ratio: p_done / p_target,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(u)
}

/// Traces and converged states of one heartbeat simulation.
#[derive(Debug, Clone)]
pub struct HeartbeatOutput {
    pub times: Vec<f64>,
    pub pressures: Vec<f64>,
    pub volumes: Vec<f64>,
    pub phases: Vec<Phase>,
    pub newton_iters: Vec<usize>,
    /// Converged displacement per step, including the initial state.
    pub displacements: Vec<DVector<f64>>,
}

/// Per-step traces of one cardiac cycle, independent of model fidelity.
#[derive(Debug, Clone)]
pub struct CycleTrace {
    pub times: Vec<f64>,
    pub pressures: Vec<f64>,
    pub volumes: Vec<f64>,
    pub phases: Vec<Phase>,
    pub newton_iters: Vec<usize>,
}

/// One time step of the mechanics at either prescribed cavity pressure
/// or prescribed cavity volume. Implementations own the displacement
/// history and commit it when a step succeeds, so the same cycle driver
/// serves the full-order, reduced, and surrogate models.
pub trait CycleStepper {
    /// Cavity volume of the last committed state.
    fn volume(&self) -> Result<f64>;
    /// Solve one step at prescribed pressure and commit; returns the
    /// Newton iteration count.
    fn pressure_step(&mut self, t: f64, p: f64, ta: f64) -> Result<usize>;
    /// Solve one step at prescribed volume and commit; returns the
    /// attained pressure and the iteration count.
    fn volume_step(&mut self, t: f64, v_target: f64, ta: f64) -> Result<(f64, usize)>;
}

/// The four-phase cardiac cycle on top of any stepper: isovolumetric
/// phases prescribe the volume, ejection couples to the windkessel, and
/// filling follows the pressure ramp anchored at mitral opening.
pub fn run_cycle<S: CycleStepper>(
    stepper: &mut S,
    circ: &CirculationParams,
    act: &ActiveTensionSpec,
    settings: &HeartbeatSettings,
    p0: f64,
) -> Result<CycleTrace> {
    let (trace, failure) = run_cycle_partial(stepper, circ, act, settings, p0)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(trace),
    }
}

/// As `run_cycle`, but a step failure returns the trace up to the failed
/// step together with the error instead of discarding it.
pub fn run_cycle_partial<S: CycleStepper>(
    stepper: &mut S,
    circ: &CirculationParams,
    act: &ActiveTensionSpec,
    settings: &HeartbeatSettings,
    p0: f64,
) -> Result<(CycleTrace, Option<Error>)> {
    circ.validate()?;
    if settings.dt <= 0.0 || settings.n_steps == 0 {
        return Err(Error::invalid("cycle needs dt > 0 and n_steps > 0"));
    }
    let dt = settings.dt;
    let v0 = stepper.volume()?;

    let mut out = CycleTrace {
        times: vec![0.0],
        pressures: vec![p0],
        volumes: vec![v0],
        phases: vec![Phase::IsoContraction],
        newton_iters: vec![0],
    };

    let mut cycle = CycleState::new();
    let mut p = p0;
    let mut v_target = v0;

    for n in 1..=settings.n_steps {
        let t = n as f64 * dt;
        let ta = active_tension(act, t);

        let stepped = match cycle.phase {
            Phase::IsoContraction | Phase::IsoRelaxation => {
                stepper.volume_step(t, v_target, ta)
            }
            Phase::Ejection => {
                let k = out.volumes.len();
                let dvdt_prev = if k >= 2 {
                    (out.volumes[k - 1] - out.volumes[k - 2]) / dt
                } else {
                    0.0
                };
                let pn = windkessel_step(circ, p, dvdt_prev, dt);
                stepper.pressure_step(t, pn, ta).map(|it| (pn, it))
            }
            Phase::Filling => {
                let pn = filling_pressure(circ, cycle.t_mvo.unwrap_or(t), cycle.p_mvo_event, t);
                stepper.pressure_step(t, pn, ta).map(|it| (pn, it))
            }
        };
        let (p_new, iters) = match stepped {
            Ok(v) => v,
            Err(e) => return Ok((out, Some(tag_step(e, n)))),
        };

        let v_new = stepper.volume()?;
        let dvdt = (v_new - out.volumes.last().unwrap()) / dt;
        let prev_phase = cycle.phase;
        advance_phase(circ, &mut cycle, p_new, dvdt, t);
        if prev_phase == Phase::Ejection && cycle.phase == Phase::IsoRelaxation {
            v_target = v_new;
        }

        out.times.push(t);
        out.pressures.push(p_new);
        out.volumes.push(v_new);
        out.phases.push(cycle.phase);
        out.newton_iters.push(iters);
        p = p_new;
    }

    Ok((out, None))
}

/// Full-order stepper: the FEM Newton solvers with stored history.
pub struct FomStepper<'a> {
    pub model: &'a FemModel,
    pub newton: NewtonSettings,
    pub dt: f64,
    pub u: DVector<f64>,
    pub u_prev: DVector<f64>,
    pub u_prev2: DVector<f64>,
    pub p: f64,
    /// Converged displacement per step, including the initial state.
    pub displacements: Vec<DVector<f64>>,
}

impl<'a> FomStepper<'a> {
    /// Start from the end-diastolic state `u0` at pressure `p0` with zero
    /// initial velocity.
    pub fn new(
        model: &'a FemModel,
        newton: NewtonSettings,
        dt: f64,
        u0: DVector<f64>,
        p0: f64,
    ) -> Self {
        FomStepper {
            model,
            newton,
            dt,
            u: u0.clone(),
            u_prev: u0.clone(),
            u_prev2: u0.clone(),
            p: p0,
            displacements: vec![u0],
        }
    }

    fn commit(&mut self, u_new: DVector<f64>, p_new: f64) {
        self.u_prev2 = std::mem::replace(&mut self.u_prev, u_new.clone());
        self.displacements.push(u_new.clone());
        self.u = u_new;
        self.p = p_new;
    }
}

impl CycleStepper for FomStepper<'_> {
    fn volume(&self) -> Result<f64> {
        self.model.cavity_volume(&self.u)
    }

    fn pressure_step(&mut self, _t: f64, p: f64, ta: f64) -> Result<usize> {
        let (u_new, it) = newton_segregated(
            self.model,
            &self.u,
            &self.u_prev,
            &self.u_prev2,
            self.dt,
            p,
            ta,
            TermFlags::all(),
            &self.newton,
        )?;
        self.commit(u_new, p);
        Ok(it)
    }

    fn volume_step(&mut self, _t: f64, v_target: f64, ta: f64) -> Result<(f64, usize)> {
        let (u_new, p_new, it) = newton_saddle(
            self.model,
            &self.u,
            self.p,
            &self.u_prev,
            &self.u_prev2,
            self.dt,
            v_target,
            ta,
            TermFlags::all(),
            &self.newton,
        )?;
        self.commit(u_new, p_new);
        Ok((p_new, it))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeartbeatSettings {
    pub dt: f64,
    pub n_steps: usize,
    pub inflate_steps: usize,
}

impl HeartbeatSettings {
    pub fn baseline() -> Self {
        HeartbeatSettings {
            dt: 2.5e-3,
            n_steps: 320,
            inflate_steps: 10,
        }
    }
}

/// One full cardiac cycle: quasi-static inflation to end-diastole, then
/// the four-phase loop. Isovolumetric phases solve the volume-constrained
/// saddle problem, ejection couples to the windkessel, filling follows
/// the prescribed pressure ramp.
pub fn run_heartbeat(
    model: &FemModel,
    circ: &CirculationParams,
    act: &ActiveTensionSpec,
    newton: &NewtonSettings,
    settings: &HeartbeatSettings,
) -> Result<HeartbeatOutput> {
    let u0 = quasi_static_inflate(model, circ.p_ed, settings.inflate_steps, newton)?;
    let mut stepper = FomStepper::new(model, *newton, settings.dt, u0, circ.p_ed);
    let trace = run_cycle(&mut stepper, circ, act, settings, circ.p_ed)?;
    Ok(HeartbeatOutput {
        times: trace.times,
        pressures: trace.pressures,
        volumes: trace.volumes,
        phases: trace.phases,
        newton_iters: trace.newton_iters,
        displacements: stepper.displacements,
    })
}

fn tag_step(e: Error, step: usize) -> Error {
    match e {
        Error::Convergence { iters, ratio, .. } => Error::Convergence { step, iters, ratio },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::MaterialParams;
    use crate::fem::BoundaryParams;
    use crate::geometry::{assign_fibers, build_ellipsoid_mesh, IschemicMask, MeshSpec};

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

    #[test]
    fn inflation_reaches_equilibrium_and_grows_cavity() {
        let model = tiny_model();
        let settings = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let u = quasi_static_inflate(&model, circ.p_ed, 10, &settings).unwrap();
        let v0 = model.cavity_volume(&DVector::zeros(model.n_dofs())).unwrap();
        let v_ed = model.cavity_volume(&u).unwrap();
        assert!(v_ed > v0 * 1.02, "end-diastolic volume {v_ed:.3e} vs rest {v0:.3e}");

        // equilibrium check: the quasi-static residual at the solution
        let st = FemState { u: &u, u_prev: &u, u_prev2: &u, dt: 1e6, p: circ.p_ed, ta: 0.0 };
        let r = model
            .assemble_residual(&st, TermFlags::quasi_static())
            .unwrap();
        let st0 = FemState { u: &u, u_prev: &u, u_prev2: &u, dt: 1e6, p: 0.0, ta: 0.0 };
        let r_scale = model
            .assemble_residual(&st0, TermFlags::quasi_static())
            .unwrap()
            .norm();
        assert!(r.norm() < 1e-5 * r_scale.max(1e-6), "|R| = {}", r.norm());
    }

    #[test]
    fn monotone_pressure_volume_relation() {
        let model = tiny_model();
        let settings = NewtonSettings::default();
        let mut last = model.cavity_volume(&DVector::zeros(model.n_dofs())).unwrap();
        for p in [500.0, 1000.0, 2000.0] {
            let u = quasi_static_inflate(&model, p, 8, &settings).unwrap();
            let v = model.cavity_volume(&u).unwrap();
            assert!(v > last, "inflation must be monotone: V({p}) = {v:.4e}");
            last = v;
        }
    }

    #[test]
    fn saddle_recovers_the_rest_state() {
        // constraining the volume to its rest value with no activation
        // must return (u, p) ~ (0, 0)
        let model = tiny_model();
        let settings = NewtonSettings::default();
        let n = model.n_dofs();
        let zero = DVector::zeros(n);
        let v_rest = model.cavity_volume(&zero).unwrap();
        let (u, p, _) = newton_saddle(
            &model,
            &zero,
            300.0,
            &zero,
            &zero,
            1e6,
            v_rest,
            0.0,
            TermFlags::quasi_static(),
            &settings,
        )
        .unwrap();
        assert!(p.abs() < 1.0, "rest pressure {p}");
        assert!(u.amax() < 1e-6, "rest displacement {}", u.amax());
    }

    #[test]
    fn isovolumetric_activation_raises_pressure() {
        let model = tiny_model();
        let settings = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let u_ed = quasi_static_inflate(&model, circ.p_ed, 10, &settings).unwrap();
        let v_ed = model.cavity_volume(&u_ed).unwrap();
        let (_, p1, _) = newton_saddle(
            &model,
            &u_ed,
            circ.p_ed,
            &u_ed,
            &u_ed,
            1e6,
            v_ed,
            1.0e4,
            TermFlags::quasi_static(),
            &settings,
        )
        .unwrap();
        assert!(
            p1 > circ.p_ed * 1.2,
            "active tension at fixed volume must raise pressure: {p1:.1} Pa"
        );
    }

    #[test]
    fn heartbeat_traverses_all_phases() {
        let model = tiny_model();
        let newton = NewtonSettings::default();
        let circ = CirculationParams::baseline();
        let act = ActiveTensionSpec::baseline();
        let settings = HeartbeatSettings::baseline();
        let out = run_heartbeat(&model, &circ, &act, &newton, &settings).unwrap();

        assert_eq!(out.times.len(), settings.n_steps + 1);
        for ph in [
            Phase::IsoContraction,
            Phase::Ejection,
            Phase::IsoRelaxation,
            Phase::Filling,
        ] {
            assert!(out.phases.contains(&ph), "phase {ph:?} never reached");
        }
        // phase order is monotone in the enum sequence
        let rank = |ph: Phase| match ph {
            Phase::IsoContraction => 0,
            Phase::Ejection => 1,
            Phase::IsoRelaxation => 2,
            Phase::Filling => 3,
        };
        for w in out.phases.windows(2) {
            assert!(rank(w[1]) >= rank(w[0]), "phase order violated: {w:?}");
        }

        // volume is conserved step to step during the isovolumetric phases
        let v0 = out.volumes[0];
        for i in 1..out.volumes.len() {
            if matches!(out.phases[i], Phase::IsoContraction | Phase::IsoRelaxation)
                && out.phases[i] == out.phases[i - 1]
            {
                assert!(
                    (out.volumes[i] - out.volumes[i - 1]).abs() / v0 < 1e-8,
                    "isovolumetric phase drifted at step {i}"
                );
            }
        }

        // volume shrinks during ejection and grows back during filling
        for i in 1..out.volumes.len() {
            if out.phases[i] == Phase::Ejection && out.phases[i - 1] == Phase::Ejection {
                assert!(out.volumes[i] < out.volumes[i - 1], "dV/dt >= 0 inside ejection at {i}");
            }
            if out.phases[i] == Phase::Filling && out.phases[i - 1] == Phase::Filling {
                assert!(out.volumes[i] > out.volumes[i - 1], "dV/dt <= 0 inside filling at {i}");
            }
        }
        let v_min = out.volumes.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(v_min < 0.95 * v0, "no ejection happened: min V {v_min:.3e} vs {v0:.3e}");

        // aortic valve opened at the threshold
        let i_ej = out.phases.iter().position(|&p| p == Phase::Ejection).unwrap();
        assert!(out.pressures[i_ej] >= circ.p_avo * 0.999);

        // pressure stays in a physiological bracket
        for &p in &out.pressures {
            assert!(p > 0.0 && p < 40000.0, "pressure {p} Pa out of range");
        }
    }
}
